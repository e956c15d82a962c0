#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "sitspan/tensor.hpp"

namespace sitspan::viz {

// Minimal PNG codec (zlib-backed). Grayscale-16 for label maps, RGB-8 for
// figures. Deterministic output for a fixed zlib version.
void png_write_gray16(const std::filesystem::path& path, const Tensor<uint16_t>& img);
Tensor<uint16_t> png_read_gray16(const std::filesystem::path& path);
void png_write_rgb8(const std::filesystem::path& path, const Tensor<uint8_t>& img);  // [H,W,3]

struct Rgb {
  uint8_t r = 0, g = 0, b = 0;
};

// viridis-like colormap for v in [0,1]
Rgb colormap_viridis(double v);
// stable per-id color for instance overlays; id 0 maps to near-black
Rgb instance_color(int32_t id);
// categorical color for semantic class ids
Rgb class_color(int32_t cls, int32_t n_classes);

// In-memory RGB canvas with a tiny 5x7 digit/letter font for figure labels.
struct Canvas {
  Tensor<uint8_t> img;  // [H,W,3]

  Canvas(int64_t h, int64_t w, Rgb fill = {255, 255, 255});
  void set(int64_t i, int64_t j, Rgb c);
  void fill_rect(int64_t i0, int64_t j0, int64_t h, int64_t w, Rgb c);
  void text(int64_t i, int64_t j, const std::string& s, Rgb c, int scale = 1);
  void save(const std::filesystem::path& path) const;
};

// Figure helpers used by the CLI and the metrics report.
void save_heatmap_png(const std::filesystem::path& path, const Tensor<float>& map);
void save_class_map_png(const std::filesystem::path& path, const Tensor<int32_t>& sem,
                        int32_t n_classes);
void save_instance_map_png(const std::filesystem::path& path,
                           const Tensor<int32_t>& inst);
void save_confusion_png(const std::filesystem::path& path,
                        const Tensor<int64_t>& counts,
                        const std::vector<std::string>& names);
void save_bar_chart_png(const std::filesystem::path& path,
                        const std::vector<double>& values,
                        const std::vector<std::string>& labels,
                        const std::string& title);
// grayscale tile montage: tiles [N, H, W] in [0,1], laid out rows x cols
void save_montage_png(const std::filesystem::path& path, const Tensor<float>& tiles,
                      int64_t rows, int64_t cols);

}  // namespace sitspan::viz
