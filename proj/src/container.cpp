#include "crossmodal/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "crossmodal/errors.hpp"

namespace crossmodal {

namespace {

template <typename T>
T byteswap_if_big_endian(T value) {
  if constexpr (std::endian::native == std::endian::little) {
    return value;
  } else {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
      std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }
}

template <typename T>
void write_le(std::ostream& out, const std::vector<T>& values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(T)));
  } else {
    for (T v : values) {
      v = byteswap_if_big_endian(v);
      out.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
  }
}

template <typename T>
std::vector<T> read_le(std::istream& in, std::size_t count,
                       const std::filesystem::path& path) {
  std::vector<T> values(count);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(count * sizeof(T)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(T)) {
    throw IoError("truncated payload in " + path.string());
  }
  for (auto& v : values) v = byteswap_if_big_endian(v);
  return values;
}

std::filesystem::path temp_path_for(const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  return tmp;
}

void commit(const std::filesystem::path& tmp, const std::filesystem::path& path) {
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
}

}  // namespace

void write_container(const std::filesystem::path& path, ContainerFile file) {
  file.header["payload_floats"] = file.payload.size();
  file.header["label_count"] = file.labels.size();
  ensure_parent(path);
  const auto tmp = temp_path_for(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    const std::string header = file.header.dump();
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.put('\n');
    write_le(out, file.payload);
    write_le(out, file.labels);
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  commit(tmp, path);
}

ContainerFile read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("missing header in " + path.string());
  ContainerFile file;
  try {
    file.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed header in " + path.string() + ": " + e.what());
  }
  const auto floats = file.header.value("payload_floats", std::size_t{0});
  const auto labels = file.header.value("label_count", std::size_t{0});
  file.payload = read_le<float>(in, floats, path);
  file.labels = read_le<std::int32_t>(in, labels, path);
  return file;
}

void write_text_atomic(const std::filesystem::path& path,
                       const std::string& text) {
  ensure_parent(path);
  const auto tmp = temp_path_for(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  commit(tmp, path);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace crossmodal
