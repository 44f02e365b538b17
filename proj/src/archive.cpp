#include "stmoe/archive.hpp"

#include "stmoe/errors.hpp"
#include "stmoe/io.hpp"

namespace stmoe::io {

namespace {
constexpr std::string_view kMagic = "STMOECKP";
constexpr std::uint32_t kVersion = 1;
}  // namespace

const Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return &t;
  }
  return nullptr;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  std::string out(kMagic);
  append_u32le(out, kVersion);
  append_u32le(out, static_cast<std::uint32_t>(archive.header_json.size()));
  out += archive.header_json;
  append_u32le(out, static_cast<std::uint32_t>(archive.arrays.size()));
  for (const auto& [name, t] : archive.arrays) {
    append_u32le(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    append_u32le(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) append_u32le(out, static_cast<std::uint32_t>(d));
    append_f32le(out, t.data());
  }
  write_file(path, out);
}

TensorArchive read_archive(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string_view view(bytes);
  if (view.substr(0, kMagic.size()) != kMagic) {
    throw DataError(path.string() + " is not a checkpoint (bad magic)");
  }
  std::size_t pos = kMagic.size();
  auto u32 = [&]() {
    const auto v = parse_u32le(view, pos);
    pos += 4;
    return v;
  };
  auto take = [&](std::size_t n) {
    if (pos + n > view.size()) throw DataError(path.string() + ": truncated checkpoint");
    auto s = view.substr(pos, n);
    pos += n;
    return s;
  };
  const auto version = u32();
  if (version != kVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  TensorArchive archive;
  archive.header_json = std::string(take(u32()));
  const auto count = u32();
  for (std::uint32_t a = 0; a < count; ++a) {
    std::string name(take(u32()));
    const auto rank = u32();
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(u32());
    auto values = parse_f32le(take(4 * shape_volume(shape)));
    archive.arrays.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (pos != view.size()) throw DataError(path.string() + ": trailing bytes in checkpoint");
  return archive;
}

}  // namespace stmoe::io
