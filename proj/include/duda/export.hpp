#pragma once

// Writes a benchmark to disk as binary PPM images, PGM label maps holding raw
// class ids, and a JSON manifest.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "duda/error.hpp"
#include "duda/synth_data.hpp"

namespace duda {

inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  for (float v : img.pixels)
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
  if (!os) throw IoError("failed writing " + path);
}

inline void write_pgm(const LabelMap& labels, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path);
  os << "P5\n" << labels.width << ' ' << labels.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(labels.classes.data()), static_cast<std::streamsize>(labels.classes.size()));
  if (!os) throw IoError("failed writing " + path);
}

inline nlohmann::json export_benchmark(const Benchmark& bench, const std::string& dir) {
  namespace fs = std::filesystem;
  for (const char* sub : {"source", "target", "eval"}) fs::create_directories(fs::path(dir) / sub);
  auto name = [](const char* prefix, std::size_t i) {
    std::string n = std::to_string(i);
    return std::string(prefix) + std::string(n.size() < 4 ? 4 - n.size() : 0, '0') + n;
  };
  nlohmann::json m;
  const auto& spec = bench.spec();
  std::vector<std::string> kinds;
  for (auto k : spec.shape_kinds) kinds.emplace_back(to_string(k));
  m["scene"] = {{"seed", spec.seed},
                {"height", spec.height},
                {"width", spec.width},
                {"num_shapes", spec.num_shapes},
                {"class_frequencies", spec.class_frequencies},
                {"shape_kinds", kinds}};
  m["shift"] = {{"scale", bench.shift().scale},
                {"bias", bench.shift().bias},
                {"noise_sigma", bench.shift().noise_sigma},
                {"texture_amplitude", bench.shift().texture_amplitude}};
  m["ignore_label"] = kIgnore;
  auto src = nlohmann::json::array();
  for (std::size_t i = 0; i < bench.source().size(); ++i) {
    const auto img = "source/" + name("img", i) + ".ppm", lbl = "source/" + name("lbl", i) + ".pgm";
    write_ppm(bench.source().images[i], (fs::path(dir) / img).string());
    write_pgm(bench.source().labels[i], (fs::path(dir) / lbl).string());
    src.push_back({{"image", img}, {"labels", lbl}});
  }
  auto tgt = nlohmann::json::array();
  for (std::size_t i = 0; i < bench.target().size(); ++i) {
    const auto img = "target/" + name("img", i) + ".ppm";
    write_ppm(bench.target().image(i), (fs::path(dir) / img).string());
    tgt.push_back({{"image", img}});
  }
  auto ev = nlohmann::json::array();
  for (std::size_t i = 0; i < bench.evaluation().size(); ++i) {
    const auto img = "eval/" + name("img", i) + ".ppm", lbl = "eval/" + name("lbl", i) + ".pgm";
    write_ppm(bench.evaluation().images[i], (fs::path(dir) / img).string());
    write_pgm(bench.evaluation().labels[i], (fs::path(dir) / lbl).string());
    ev.push_back({{"image", img}, {"labels", lbl}});
  }
  m["source"] = src;
  m["target"] = tgt;
  m["eval"] = ev;
  std::ofstream os((fs::path(dir) / "manifest.json").string(), std::ios::trunc);
  if (!os) throw IoError("cannot write manifest in " + dir);
  os << m.dump(2) << '\n';
  return m;
}

}  // namespace duda
