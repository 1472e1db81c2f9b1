#pragma once

// Artifact plumbing: binary PPM/PGM images, the flat dotted-key run
// configuration, and dataset manifests.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ibot/image.hpp"

namespace ibot {

// ---------------------------------------------------------------------------
// PPM (P6) / PGM (P5), 8-bit only
// ---------------------------------------------------------------------------

namespace detail {

inline int pnm_token(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comments between header fields
  while (true) {
    int c = in.peek();
    if (c == EOF) throw std::runtime_error("truncated image header in " + path);
    if (std::isspace(c)) {
      in.get();
    } else if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else {
      break;
    }
  }
  int value;
  if (!(in >> value)) throw std::runtime_error("malformed image header in " + path);
  return value;
}

}  // namespace detail

inline Image parse_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open image " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  std::string magic = {m0, m1};
  if (magic != "P6" && magic != "P5")
    throw std::runtime_error("unsupported image magic '" + magic + "' in " + path + " (need binary P6 or P5)");
  std::size_t channels = magic == "P6" ? 3 : 1;
  int w = detail::pnm_token(f, path);
  int h = detail::pnm_token(f, path);
  int maxval = detail::pnm_token(f, path);
  if (w <= 0 || h <= 0) throw std::runtime_error("bad image dimensions in " + path);
  if (maxval != 255) throw std::runtime_error("unsupported max value " + std::to_string(maxval) + " in " + path);
  f.get();  // the single whitespace byte after the header
  std::size_t count = static_cast<std::size_t>(w) * h * channels;
  std::vector<unsigned char> raw(count);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(f.gcount()) != count) throw std::runtime_error("truncated pixel data in " + path);
  Image im(static_cast<std::size_t>(h), static_cast<std::size_t>(w), channels);
  for (std::size_t i = 0; i < count; ++i) im.pix[i] = static_cast<float>(raw[i]) / 255.0f;
  return im;
}

inline void write_image(const std::string& path, const Image& im) {
  if (im.c != 1 && im.c != 3) throw std::invalid_argument("write_image: only 1 or 3 channels supported");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write image " + path);
  f << (im.c == 3 ? "P6" : "P5") << "\n" << im.w << " " << im.h << "\n255\n";
  std::vector<unsigned char> raw(im.pix.size());
  for (std::size_t i = 0; i < im.pix.size(); ++i) {
    float v = std::clamp(im.pix[i], 0.0f, 1.0f);
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

// ---------------------------------------------------------------------------
// run configuration: flat dotted-key = value lines, '#' comments
// ---------------------------------------------------------------------------

class RunConfig {
 public:
  // the full key surface with defaults; unknown keys are rejected
  static std::map<std::string, std::string> defaults() {
    return {
        {"run.name", "run"},
        {"run.dir", "runs"},
        {"data.dir", ""},
        {"model.image_size", "32"},
        {"model.patch_size", "8"},
        {"model.embed_dim", "64"},
        {"model.depth", "4"},
        {"model.heads", "4"},
        {"model.mlp_ratio", "4.0"},
        {"head.hidden_dim", "256"},
        {"head.bottleneck_dim", "64"},
        {"head.out_dim", "1024"},
        {"head.shared", "1"},
        {"train.epochs", "100"},
        {"train.batch_size", "64"},
        {"train.warmup_epochs", "10"},
        {"train.base_lr_scale", "0.0005"},
        {"train.final_lr", "1e-06"},
        {"train.weight_decay", "0.04"},
        {"train.ema_start", "0.996"},
        {"train.ema_end", "1.0"},
        {"train.clip_norm", "0"},
        {"train.cls_weight", "1"},
        {"train.mim_weight", "1"},
        {"train.pipeline", "b"},
        {"train.tokenizer", "online"},
        {"train.snapshot_every_epochs", "25"},
        {"train.freeze_head_epochs", "1"},
        {"train.seed", "0"},
        {"crops.global_count", "2"},
        {"crops.global_size", "32"},
        {"crops.local_count", "0"},
        {"crops.local_size", "16"},
        {"crops.scale_split", "0.32"},
        {"crops.local_scale_min", "0.05"},
        {"crops.augment", "1"},
        {"crops.hflip_p", "0.5"},
        {"crops.jitter", "0.4"},
        {"crops.grayscale_p", "0.2"},
        {"mask.p_zero", "0.5"},
        {"mask.range_lo", "0.1"},
        {"mask.range_hi", "0.5"},
        {"distill.temp_cls_student", "0.1"},
        {"distill.temp_patch_student", "0.1"},
        {"distill.teacher_temp_start", "0.04"},
        {"distill.teacher_temp_end", "0.07"},
        {"distill.teacher_temp_warmup_epochs", "30"},
        {"distill.center_momentum_cls", "0.9"},
        {"distill.center_momentum_patch", "0.9"},
        {"distill.centering", "1"},
        {"eval.knn_temperature", "0.07"},
        {"eval.probe_epochs", "100"},
    };
  }

  RunConfig() : values_(defaults()) {}

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("unknown config key '" + key + "'");
    it->second = value;
  }

  void load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config " + path);
    load_stream(f, path);
  }

  void load_stream(std::istream& f, const std::string& path) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": expected key = value");
      auto trim = [](std::string s) {
        auto a = s.find_first_not_of(" \t\r");
        auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("unknown config key '" + key + "'");
    return it->second;
  }
  double get_double(const std::string& key) const {
    const auto& s = get(key);
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("config key '" + key + "': '" + s + "' is not a number");
    return v;
  }
  std::size_t get_size(const std::string& key) const {
    double v = get_double(key);
    if (v < 0 || v != std::floor(v))
      throw std::invalid_argument("config key '" + key + "' must be a nonnegative integer");
    return static_cast<std::size_t>(v);
  }
  bool get_bool(const std::string& key) const { return get_size(key) != 0; }

  std::string resolved() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
    return out.str();
  }

  bool operator==(const RunConfig& other) const { return values_ == other.values_; }

  // keys whose values differ, for resume-mismatch diagnostics
  std::vector<std::string> diff(const RunConfig& other) const {
    std::vector<std::string> keys;
    for (const auto& [k, v] : values_)
      if (other.values_.at(k) != v) keys.push_back(k + ": '" + v + "' vs '" + other.values_.at(k) + "'");
    return keys;
  }

 private:
  std::map<std::string, std::string> values_;
};

inline RunConfig parse_config_text(const std::string& text) {
  std::istringstream ss(text);
  RunConfig cfg;
  cfg.load_stream(ss, "<inline>");
  return cfg;
}

// ---------------------------------------------------------------------------
// dataset manifests
// ---------------------------------------------------------------------------

struct DatasetManifest {
  std::filesystem::path root;
  std::size_t num_classes = 0;
  std::vector<std::pair<std::string, std::size_t>> samples;  // (relative file, label)

  std::size_t size() const { return samples.size(); }

  void validate() const {
    std::vector<char> seen(num_classes, 0);
    for (const auto& [file, label] : samples) {
      if (label >= num_classes)
        throw std::runtime_error("manifest: label " + std::to_string(label) + " out of range in " + file);
      if (!std::filesystem::exists(root / file)) throw std::runtime_error("manifest: missing file " + file);
      seen[label] = 1;
    }
    for (std::size_t c = 0; c < num_classes; ++c)
      if (!seen[c] && !samples.empty())
        throw std::runtime_error("manifest: class " + std::to_string(c) + " has no samples");
  }
};

inline void save_manifest(const DatasetManifest& m) {
  std::ofstream f(m.root / "manifest.txt", std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write manifest in " + m.root.string());
  f << "classes " << m.num_classes << "\n";
  for (const auto& [file, label] : m.samples) f << file << " " << label << "\n";
}

inline DatasetManifest load_manifest(const std::string& dir) {
  DatasetManifest m;
  m.root = dir;
  std::ifstream f(m.root / "manifest.txt");
  if (!f) throw std::runtime_error("no manifest.txt in " + dir);
  std::string word;
  if (!(f >> word >> m.num_classes) || word != "classes")
    throw std::runtime_error("malformed manifest header in " + dir);
  std::string file;
  std::size_t label;
  while (f >> file >> label) m.samples.push_back({file, label});
  m.validate();
  return m;
}

}  // namespace ibot
