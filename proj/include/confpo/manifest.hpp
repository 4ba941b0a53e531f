// SPDX-License-Identifier: Apache-2.0
//
// Run manifests: the resolved settings, seeds, inputs and outputs of one
// command, with SHA-256 digests of every artifact.

#pragma once

#include <openssl/evp.h>

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "confpo/config.hpp"
#include "confpo/data.hpp"
#include "confpo/error.hpp"

namespace confpo {

inline constexpr const char* kToolVersion = "0.1.0";

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path.string() + "' for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("sha256: digest initialisation failed");
  }
  std::array<char, 1 << 16> buf{};
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md.data(), &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xf];
  }
  return out;
}

class RunManifest {
 public:
  RunManifest(std::string command, const Settings& settings, std::filesystem::path path)
      : path_(std::move(path)) {
    body_["schema_version"] = kSchemaVersion;
    body_["tool"] = "confpo";
    body_["tool_version"] = kToolVersion;
    body_["command"] = std::move(command);
    body_["config"] = settings.to_json();
    body_["seeds"] = nlohmann::ordered_json::object();
    body_["inputs"] = nlohmann::ordered_json::array();
    body_["outputs"] = nlohmann::ordered_json::array();
    body_["status"] = "started";
  }

  void seed(const std::string& name, std::uint64_t value) { body_["seeds"][name] = value; }

  void input(const std::filesystem::path& p) {
    body_["inputs"].push_back({{"path", p.generic_string()}, {"sha256", sha256_file(p)}});
  }

  void output(const std::filesystem::path& p) { outputs_.push_back(p); }

  const std::filesystem::path& path() const noexcept { return path_; }

  /// Writes the manifest with planned outputs; call before side effects.
  void write_started() {
    nlohmann::ordered_json outs = nlohmann::ordered_json::array();
    for (const auto& p : outputs_) outs.push_back({{"path", p.generic_string()}, {"sha256", nullptr}});
    body_["outputs"] = outs;
    body_["status"] = "started";
    flush();
  }

  /// Hashes every output (each must exist) and marks the run complete.
  void write_complete() {
    nlohmann::ordered_json outs = nlohmann::ordered_json::array();
    for (const auto& p : outputs_) {
      if (!std::filesystem::exists(p)) throw Error("expected output '" + p.string() + "' was not written");
      outs.push_back({{"path", p.generic_string()}, {"sha256", sha256_file(p)}});
    }
    body_["outputs"] = outs;
    body_["status"] = "complete";
    flush();
  }

  const nlohmann::ordered_json& json() const noexcept { return body_; }

 private:
  void flush() {
    ensure_parent_dir(path_);
    std::ofstream os(path_, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write manifest '" + path_.string() + "'");
    os << body_.dump(2) << '\n';
  }

  std::filesystem::path path_;
  nlohmann::ordered_json body_;
  std::vector<std::filesystem::path> outputs_;
};

}  // namespace confpo
