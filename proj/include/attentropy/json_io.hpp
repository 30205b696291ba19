#pragma once

#include <filesystem>

#include <json.hpp>

namespace attentropy {

// Throws IoError when unreadable, ConfigError when not valid JSON.
nlohmann::json read_json(const std::filesystem::path& path);
// Two-space indented, trailing newline. Output is byte-stable for equal input.
void write_json(const nlohmann::json& j, const std::filesystem::path& path);

}  // namespace attentropy
