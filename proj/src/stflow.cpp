#include "stmoe/stflow.hpp"

#include <json.hpp>

#include "stmoe/errors.hpp"
#include "stmoe/io.hpp"

namespace stmoe::flow {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kFormatVersion = 1;

ordered_json schema_to_json(const ExternalSchema& schema) {
  ordered_json arr = ordered_json::array();
  for (const auto& f : schema.fields) {
    ordered_json j;
    j["name"] = f.name;
    if (f.kind == FieldKind::categorical) {
      j["kind"] = "categorical";
      j["categories"] = f.categories;
    } else {
      j["kind"] = "continuous";
      j["min"] = f.min;
      j["max"] = f.max;
    }
    arr.push_back(std::move(j));
  }
  return arr;
}

ExternalSchema schema_from_json(const ordered_json& arr) {
  ExternalSchema schema;
  for (const auto& j : arr) {
    ExternalField f;
    f.name = j.at("name").get<std::string>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "categorical") {
      f.kind = FieldKind::categorical;
      f.categories = j.at("categories").get<std::vector<std::string>>();
    } else if (kind == "continuous") {
      f.kind = FieldKind::continuous;
      f.min = j.at("min").get<double>();
      f.max = j.at("max").get<double>();
    } else {
      throw DataError("unknown external field kind '" + kind + "'");
    }
    schema.fields.push_back(std::move(f));
  }
  schema.validate();
  return schema;
}

ordered_json array_entry(const std::string& file, const Shape& shape) {
  ordered_json j;
  j["file"] = file;
  j["shape"] = shape;
  j["dtype"] = "f32le";
  return j;
}

Shape expect_array(const ordered_json& arrays, const std::string& key) {
  const auto& a = arrays.at(key);
  if (a.at("dtype").get<std::string>() != "f32le") {
    throw DataError("array '" + key + "' has unsupported dtype " + a.at("dtype").dump());
  }
  return a.at("shape").get<Shape>();
}

}  // namespace

void write_stflow(const fs::path& dir, const StFlowData& data) {
  data.series.validate();
  const auto& grid = data.series.grid;
  const std::size_t t_count = data.series.size();
  const std::size_t n_ext = data.schema.width();
  if (data.externals.size() != t_count) {
    throw DataError("external vectors (" + std::to_string(data.externals.size()) +
                    ") do not match snapshots (" + std::to_string(t_count) + ")");
  }
  fs::create_directories(dir);

  ordered_json m;
  m["format"] = "stflow";
  m["version"] = kFormatVersion;
  m["grid"] = {{"height", grid.height},
               {"width", grid.width},
               {"bounds",
                {{"min_lat", grid.bounds.min_lat},
                 {"max_lat", grid.bounds.max_lat},
                 {"min_lon", grid.bounds.min_lon},
                 {"max_lon", grid.bounds.max_lon}}}};
  m["interval_minutes"] = grid.interval_minutes;
  m["start_timestamp"] = data.start_timestamp;
  m["start_t"] = t_count ? data.series.snapshots.front().t : 0;
  m["channels"] = data.channel_names;
  m["external_schema"] = schema_to_json(data.schema);
  ordered_json arrays;
  arrays["flow"] = array_entry("flow.bin", {t_count, 2, grid.height, grid.width});
  arrays["external"] = array_entry("external.bin", {t_count, n_ext});
  if (data.truth_masks) {
    arrays["truth_masks"] = array_entry("truth_masks.bin", data.truth_masks->shape());
  }
  m["arrays"] = arrays;

  std::string flow;
  for (const auto& s : data.series.snapshots) io::append_f32le(flow, s.flow.data());
  std::string ext;
  for (const auto& e : data.externals) {
    if (e.values.size() != n_ext) throw DataError("external vector length mismatch");
    io::append_f32le(ext, e.values);
  }
  io::write_file(dir / "manifest.json", m.dump(2) + "\n");
  io::write_file(dir / "flow.bin", flow);
  io::write_file(dir / "external.bin", ext);
  if (data.truth_masks) {
    std::string masks;
    io::append_f32le(masks, data.truth_masks->data());
    io::write_file(dir / "truth_masks.bin", masks);
  }
}

StFlowData read_stflow(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) {
    throw DataError("no stflow manifest at " + (dir / "manifest.json").string());
  }
  ordered_json m;
  try {
    m = ordered_json::parse(io::read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest.json: " + std::string(e.what()));
  }
  StFlowData data;
  try {
    if (m.at("format").get<std::string>() != "stflow") throw DataError("not an stflow manifest");
    if (m.at("version").get<int>() != kFormatVersion) {
      throw DataError("unsupported stflow version " + m.at("version").dump());
    }
    auto& grid = data.series.grid;
    grid.height = m.at("grid").at("height").get<std::size_t>();
    grid.width = m.at("grid").at("width").get<std::size_t>();
    const auto& b = m.at("grid").at("bounds");
    grid.bounds = {b.at("min_lat").get<double>(), b.at("max_lat").get<double>(),
                   b.at("min_lon").get<double>(), b.at("max_lon").get<double>()};
    grid.interval_minutes = m.at("interval_minutes").get<double>();
    grid.validate();
    data.start_timestamp = m.at("start_timestamp").get<std::string>();
    data.channel_names = m.at("channels").get<std::vector<std::string>>();
    data.schema = schema_from_json(m.at("external_schema"));
    const long start_t = m.value("start_t", 0L);

    const auto& arrays = m.at("arrays");
    const Shape flow_shape = expect_array(arrays, "flow");
    if (flow_shape.size() != 4 || flow_shape[1] != 2 || flow_shape[2] != grid.height ||
        flow_shape[3] != grid.width) {
      throw DataError("flow array shape " + shape_string(flow_shape) +
                      " does not match the grid");
    }
    const std::size_t t_count = flow_shape[0];
    const auto flow = io::read_f32le(dir / "flow.bin", shape_volume(flow_shape));
    const std::size_t per = 2 * grid.height * grid.width;
    for (std::size_t t = 0; t < t_count; ++t) {
      std::vector<double> v(flow.begin() + static_cast<long>(t * per),
                            flow.begin() + static_cast<long>((t + 1) * per));
      data.series.snapshots.push_back(
          FlowSnapshot{Tensor(Shape{2, grid.height, grid.width}, std::move(v)),
                       start_t + static_cast<long>(t)});
    }

    const Shape ext_shape = expect_array(arrays, "external");
    if (ext_shape.size() != 2 || ext_shape[0] != t_count || ext_shape[1] != data.schema.width()) {
      throw DataError("external array shape " + shape_string(ext_shape) +
                      " does not match T=" + std::to_string(t_count) +
                      " and schema width " + std::to_string(data.schema.width()));
    }
    const auto ext = io::read_f32le(dir / "external.bin", shape_volume(ext_shape));
    for (std::size_t t = 0; t < t_count; ++t) {
      ExternalVector e;
      e.values.assign(ext.begin() + static_cast<long>(t * ext_shape[1]),
                      ext.begin() + static_cast<long>((t + 1) * ext_shape[1]));
      data.externals.push_back(std::move(e));
    }

    if (arrays.contains("truth_masks")) {
      const Shape ms = expect_array(arrays, "truth_masks");
      if (ms.size() != 3 || ms[1] != grid.height || ms[2] != grid.width) {
        throw DataError("truth mask shape " + shape_string(ms) + " does not match the grid");
      }
      data.truth_masks = Tensor(ms, io::read_f32le(dir / "truth_masks.bin", shape_volume(ms)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }
  data.series.validate();
  return data;
}

std::string manifest_hash(const fs::path& dir) {
  return io::git_blob_sha1(io::read_file(dir / "manifest.json"));
}

}  // namespace stmoe::flow
