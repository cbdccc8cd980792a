#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyatt/file_io.hpp"
#include "hyatt/heatmap.hpp"

namespace hyatt {

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ManifestSample {
  std::string image;  ///< relative to the manifest's directory unless absolute
  std::vector<Point> landmarks;  ///< original-image pixels
  std::optional<double> spacing_mm;
};

struct DatasetManifest {
  std::size_t num_landmarks = 0;
  std::array<std::size_t, 2> target_size{0, 0};  ///< (H, W)
  std::vector<ManifestSample> samples;

  void validate() const {
    if (num_landmarks == 0) throw ManifestError("manifest: num_landmarks must be positive");
    if (target_size[0] == 0 || target_size[1] == 0) throw ManifestError("manifest: target_size must be positive");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].landmarks.size() != num_landmarks) {
        throw ManifestError("manifest: sample " + std::to_string(i) + " has " + std::to_string(samples[i].landmarks.size()) +
                            " landmarks, expected " + std::to_string(num_landmarks));
      }
      if (samples[i].spacing_mm && !(*samples[i].spacing_mm > 0)) {
        throw ManifestError("manifest: sample " + std::to_string(i) + " spacing_mm must be positive");
      }
    }
  }
};

inline std::string manifest_to_string(const DatasetManifest& m) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["num_landmarks"] = m.num_landmarks;
  j["target_size"] = m.target_size;
  j["samples"] = ordered_json::array();
  for (const auto& s : m.samples) {
    ordered_json e;
    e["image"] = s.image;
    e["landmarks"] = ordered_json::array();
    for (const auto& p : s.landmarks) e["landmarks"].push_back({p.x, p.y});
    e["spacing_mm"] = s.spacing_mm ? ordered_json(*s.spacing_mm) : ordered_json(nullptr);
    j["samples"].push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

inline DatasetManifest manifest_from_string(const std::string& text) {
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() != "num_landmarks" && it.key() != "target_size" && it.key() != "samples") {
        throw ManifestError("manifest: unknown key " + it.key());
      }
    }
    m.num_landmarks = j.at("num_landmarks").get<std::size_t>();
    m.target_size = j.at("target_size").get<std::array<std::size_t, 2>>();
    for (const auto& e : j.at("samples")) {
      ManifestSample s;
      s.image = e.at("image").get<std::string>();
      for (const auto& p : e.at("landmarks")) {
        const auto xy = p.get<std::array<double, 2>>();
        s.landmarks.push_back({xy[0], xy[1]});
      }
      if (e.contains("spacing_mm") && !e.at("spacing_mm").is_null()) s.spacing_mm = e.at("spacing_mm").get<double>();
      m.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

inline DatasetManifest read_manifest(const std::string& path) {
  try {
    return manifest_from_string(read_file(path));
  } catch (const ManifestError& e) {
    throw ManifestError(path + ": " + e.what());
  }
}

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
  m.validate();
  write_file(path, manifest_to_string(m));
}

/// Image path as stored, resolved against the manifest's directory.
inline std::string resolve_image(const std::string& manifest_path, const std::string& image) {
  const std::filesystem::path p(image);
  if (p.is_absolute()) return p.string();
  return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

}  // namespace hyatt
