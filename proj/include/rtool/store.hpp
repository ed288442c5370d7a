#pragma once

// Plain-directory analysis store. Every artifact is a file plus a manifest entry recording
// the fingerprint of the inputs it was built from and of its own content, so reruns can
// skip artifacts whose inputs are unchanged and detect files edited behind the store's back.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rtool/error.hpp"
#include "rtool/text.hpp"

namespace rtool {

namespace fs = std::filesystem;

/// Writes through a sibling temporary file and a rename, so readers never see partial content.
inline void write_atomic(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

class AnalysisStore {
 public:
  explicit AnalysisStore(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_);
    const auto m = root_ / kManifest;
    if (fs::exists(m)) {
      try {
        manifest_ = nlohmann::json::parse(text::read_file(m.string()));
      } catch (const nlohmann::json::exception& e) {
        throw SchemaError(m.string() + ": corrupt manifest: " + e.what());
      }
    }
    if (!manifest_.is_object() || !manifest_.contains("artifacts")) manifest_ = {{"artifacts", nlohmann::json::object()}};
  }

  const fs::path& root() const noexcept { return root_; }
  fs::path path_of(const std::string& name) const { return root_ / name; }

  bool contains(const std::string& name) const { return artifacts().contains(name) && fs::exists(path_of(name)); }

  /// Recorded input fingerprint, if the artifact exists.
  std::optional<std::string> inputs_of(const std::string& name) const {
    if (!artifacts().contains(name)) return std::nullopt;
    return artifacts().at(name).at("inputs").get<std::string>();
  }

  /// Fingerprint of the artifact's content as recorded at write time.
  std::optional<std::string> output_of(const std::string& name) const {
    if (!artifacts().contains(name)) return std::nullopt;
    return artifacts().at(name).at("output").get<std::string>();
  }

  /// True when the artifact was built from `inputs` and its file is unmodified.
  bool fresh(const std::string& name, const std::string& inputs) const {
    auto in = inputs_of(name);
    if (!in || *in != inputs || !fs::exists(path_of(name))) return false;
    return text::fingerprint(read(name)) == *output_of(name);
  }

  std::string read(const std::string& name) const {
    if (!fs::exists(path_of(name))) throw ValidationError("store has no artifact '" + name + "' in " + root_.string());
    return text::read_file(path_of(name).string());
  }

  /// Stores content and records it as complete. Returns the content fingerprint.
  std::string put(const std::string& name, std::string_view content, const std::string& inputs) {
    write_atomic(path_of(name), content);
    const auto out = text::fingerprint(content);
    manifest_["artifacts"][name] = {{"inputs", inputs}, {"output", out}};
    save();
    ++computed_;
    return out;
  }

  /// Returns the stored content when fresh, otherwise produces, stores and returns it.
  template <class Produce>
  std::string get_or_put(const std::string& name, const std::string& inputs, Produce&& produce) {
    if (fresh(name, inputs)) {
      ++skipped_;
      return read(name);
    }
    std::string content = produce();
    put(name, content, inputs);
    return content;
  }

  void note_skipped() { ++skipped_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : artifacts().items()) out.push_back(k);
    return out;
  }

  const nlohmann::json& manifest() const noexcept { return manifest_; }
  int computed() const noexcept { return computed_; }
  int skipped() const noexcept { return skipped_; }

  static constexpr const char* kManifest = "manifest.json";

 private:
  const nlohmann::json& artifacts() const { return manifest_.at("artifacts"); }
  void save() const { write_atomic(root_ / kManifest, manifest_.dump(2) + "\n"); }

  fs::path root_;
  nlohmann::json manifest_;
  int computed_ = 0;
  int skipped_ = 0;
};

/// Fingerprint over several parts, each length-prefixed so boundaries cannot collide.
inline std::string combine_fingerprints(std::initializer_list<std::string_view> parts) {
  text::Fnv1a h;
  for (auto p : parts) {
    h.update(static_cast<std::int64_t>(p.size()));
    h.update(p);
  }
  return h.hex();
}

inline std::string combine_fingerprints(const std::vector<std::string>& parts) {
  text::Fnv1a h;
  for (const auto& p : parts) {
    h.update(static_cast<std::int64_t>(p.size()));
    h.update(p);
  }
  return h.hex();
}

}  // namespace rtool
