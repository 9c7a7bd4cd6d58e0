#include "fedsl/checkpoint.hpp"

#include <array>
#include <bit>
#include <algorithm>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

namespace fedsl {

namespace {

constexpr std::array<char, 8> kMagic = {'F', 'E', 'D', 'S', 'L', 'C', 'K', 'P'};

template <class T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <class T>
T get_le(std::istream& in, const std::filesystem::path& path) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
    throw IoError("truncated checkpoint: " + path.string());
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

std::string_view to_string(ModelRole role) {
  return role == ModelRole::kStudent ? "student" : "teacher";
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());

  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.role));
  put_le<std::int64_t>(out, checkpoint.round);
  const auto& segments = checkpoint.params.layout().segments();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(segments.size()));
  for (const Segment& s : segments) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.name.size()));
    out.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    put_le<std::int64_t>(out, s.rows);
    put_le<std::int64_t>(out, s.cols);
  }
  const Eigen::VectorXd& v = checkpoint.params.values();
  for (Eigen::Index i = 0; i < v.size(); ++i) put_le<double>(out, v[i]);
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());

  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  const auto version = get_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
  }
  const auto role = get_le<std::uint32_t>(in, path);
  if (role > 1) throw IoError("bad role field in checkpoint: " + path.string());
  const auto round = get_le<std::int64_t>(in, path);
  const auto n_segments = get_le<std::uint32_t>(in, path);

  std::vector<ParamLayout::Shape> shapes;
  for (std::uint32_t i = 0; i < n_segments; ++i) {
    const auto len = get_le<std::uint32_t>(in, path);
    if (len > 4096) throw IoError("implausible segment name length in " + path.string());
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw IoError("truncated checkpoint: " + path.string());
    const auto rows = get_le<std::int64_t>(in, path);
    const auto cols = get_le<std::int64_t>(in, path);
    shapes.push_back({std::move(name), rows, cols});
  }
  auto layout = std::make_shared<const ParamLayout>(shapes);
  Eigen::VectorXd values(layout->size());
  for (Eigen::Index i = 0; i < values.size(); ++i) values[i] = get_le<double>(in, path);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw IoError("trailing bytes in checkpoint: " + path.string());
  }
  return {ParamVector(std::move(layout), std::move(values)), round, static_cast<ModelRole>(role)};
}

}  // namespace fedsl
