#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"

namespace crossmodal {

// On-disk container shared by datasets, proxy sets and checkpoints:
//
//   <UTF-8 JSON header>\n
//   <payload_floats x little-endian float32>
//   <label_count x little-endian int32>
//
// The writer fills header["payload_floats"] and header["label_count"].
struct ContainerFile {
  nlohmann::json header;
  std::vector<float> payload;
  std::vector<std::int32_t> labels;
};

// Writes atomically (temporary file, then rename).
void write_container(const std::filesystem::path& path, ContainerFile file);
ContainerFile read_container(const std::filesystem::path& path);

// Atomic text write used for JSON records, CSV and SVG outputs.
void write_text_atomic(const std::filesystem::path& path,
                       const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace crossmodal
