#pragma once

// Reproducibility record written next to every CLI output. Needs
// OpenSSL::Crypto at link time.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "shiftshare/error.hpp"
#include "shiftshare/io.hpp"

namespace shiftshare {

inline constexpr const char* kVersion = "0.1.0";

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw NumericalError("SHA-256 digest failed");
  }
  std::ostringstream out;
  for (unsigned int k = 0; k < length; ++k) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[k]);
  return out.str();
}

inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(detail::read_file(path)); }

struct RunManifest {
  std::vector<std::string> command_line;
  nlohmann::json config;      // resolved options
  std::string config_digest;  // SHA-256 of config.dump()
  std::map<std::string, std::string> inputs;   // path -> SHA-256
  std::map<std::string, std::string> outputs;  // path -> SHA-256
  std::optional<std::uint64_t> seed;
  std::string version = kVersion;
  std::string timestamp;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["command_line"] = command_line;
    j["config"] = config;
    j["config_digest"] = config_digest;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json(nullptr);
    j["version"] = version;
    j["timestamp"] = timestamp;
    return j;
  }
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

}  // namespace shiftshare
