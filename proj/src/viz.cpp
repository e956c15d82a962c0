#include "sitspan/viz.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace sitspan::viz {

namespace {

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

void write_chunk(std::ofstream& f, const char type[4],
                 const std::vector<unsigned char>& data) {
  std::vector<unsigned char> len;
  put_u32(len, uint32_t(data.size()));
  f.write(reinterpret_cast<const char*>(len.data()), 4);
  f.write(type, 4);
  if (!data.empty())
    f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
  if (!data.empty()) crc = crc32(crc, data.data(), uInt(data.size()));
  std::vector<unsigned char> crcb;
  put_u32(crcb, uint32_t(crc));
  f.write(reinterpret_cast<const char*>(crcb.data()), 4);
}

void write_png(const std::filesystem::path& path, int64_t h, int64_t w,
               int bit_depth, int color_type,
               const std::vector<unsigned char>& raster, int64_t stride) {
  std::vector<unsigned char> raw;
  raw.reserve(size_t(h * (stride + 1)));
  for (int64_t i = 0; i < h; ++i) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), raster.begin() + i * stride,
               raster.begin() + (i + 1) * stride);
  }
  uLongf bound = compressBound(uLong(raw.size()));
  std::vector<unsigned char> compressed(bound);
  int rc = compress2(compressed.data(), &bound, raw.data(), uLong(raw.size()), 6);
  check(rc == Z_OK, ErrorCode::Internal, "zlib compression failed");
  compressed.resize(bound);

  std::ofstream f(path, std::ios::binary);
  check(bool(f), ErrorCode::IndexError, "cannot write " + path.string());
  static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  f.write(reinterpret_cast<const char*>(sig), 8);
  std::vector<unsigned char> ihdr;
  put_u32(ihdr, uint32_t(w));
  put_u32(ihdr, uint32_t(h));
  ihdr.push_back(uint8_t(bit_depth));
  ihdr.push_back(uint8_t(color_type));
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  write_chunk(f, "IHDR", ihdr);
  write_chunk(f, "IDAT", compressed);
  write_chunk(f, "IEND", {});
}

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace

void png_write_gray16(const std::filesystem::path& path, const Tensor<uint16_t>& img) {
  int64_t h = img.dim(0), w = img.dim(1);
  std::vector<unsigned char> raster(size_t(h * w * 2));
  for (int64_t k = 0; k < h * w; ++k) {
    raster[size_t(2 * k)] = uint8_t(img[k] >> 8);  // network byte order
    raster[size_t(2 * k + 1)] = uint8_t(img[k] & 0xff);
  }
  write_png(path, h, w, 16, 0, raster, w * 2);
}

void png_write_rgb8(const std::filesystem::path& path, const Tensor<uint8_t>& img) {
  check(img.ndim() == 3 && img.dim(2) == 3, ErrorCode::ShapeError,
        "png_write_rgb8 wants [H,W,3]");
  int64_t h = img.dim(0), w = img.dim(1);
  std::vector<unsigned char> raster(img.data(), img.data() + img.numel());
  write_png(path, h, w, 8, 2, raster, w * 3);
}

Tensor<uint16_t> png_read_gray16(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  check(bool(f), ErrorCode::IndexError, "cannot open " + path.string());
  unsigned char sig[8];
  f.read(reinterpret_cast<char*>(sig), 8);
  static const unsigned char want[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  check(bool(f) && std::memcmp(sig, want, 8) == 0, ErrorCode::FormatError,
        "not a PNG: " + path.string());
  int64_t w = 0, h = 0;
  int bit_depth = 0, color_type = 0;
  std::vector<unsigned char> idat;
  while (f) {
    unsigned char lenb[4];
    if (!f.read(reinterpret_cast<char*>(lenb), 4)) break;
    uint32_t len = (uint32_t(lenb[0]) << 24) | (uint32_t(lenb[1]) << 16) |
                   (uint32_t(lenb[2]) << 8) | lenb[3];
    char type[5] = {0};
    f.read(type, 4);
    std::vector<unsigned char> data(len);
    if (len) f.read(reinterpret_cast<char*>(data.data()), len);
    f.ignore(4);  // crc
    if (std::strncmp(type, "IHDR", 4) == 0) {
      w = (int64_t(data[0]) << 24) | (int64_t(data[1]) << 16) |
          (int64_t(data[2]) << 8) | data[3];
      h = (int64_t(data[4]) << 24) | (int64_t(data[5]) << 16) |
          (int64_t(data[6]) << 8) | data[7];
      bit_depth = data[8];
      color_type = data[9];
      check(data[12] == 0, ErrorCode::FormatError, "interlaced PNG unsupported");
    } else if (std::strncmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data.begin(), data.end());
    } else if (std::strncmp(type, "IEND", 4) == 0) {
      break;
    }
  }
  check(bit_depth == 16 && color_type == 0, ErrorCode::FormatError,
        path.string() + ": expected 16-bit grayscale");
  int64_t stride = w * 2;
  uLongf raw_len = uLongf(h * (stride + 1));
  std::vector<unsigned char> raw(raw_len);
  int rc = uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size()));
  check(rc == Z_OK && int64_t(raw_len) == h * (stride + 1), ErrorCode::FormatError,
        path.string() + ": bad PNG payload");

  // undo scanline filters (bpp = 2)
  Tensor<uint16_t> out{Shape{h, w}};
  std::vector<unsigned char> prev(size_t(stride), 0), cur(size_t(stride), 0);
  for (int64_t i = 0; i < h; ++i) {
    const unsigned char* line = raw.data() + i * (stride + 1);
    int filter = line[0];
    for (int64_t x = 0; x < stride; ++x) {
      int rawv = line[1 + x];
      int a = x >= 2 ? cur[size_t(x - 2)] : 0;
      int b = prev[size_t(x)];
      int c = x >= 2 ? prev[size_t(x - 2)] : 0;
      int v = 0;
      switch (filter) {
        case 0: v = rawv; break;
        case 1: v = rawv + a; break;
        case 2: v = rawv + b; break;
        case 3: v = rawv + (a + b) / 2; break;
        case 4: v = rawv + paeth(a, b, c); break;
        default: fail(ErrorCode::FormatError, "unknown PNG filter");
      }
      cur[size_t(x)] = uint8_t(v & 0xff);
    }
    for (int64_t j = 0; j < w; ++j)
      out.at(i, j) = uint16_t((cur[size_t(2 * j)] << 8) | cur[size_t(2 * j + 1)]);
    std::swap(prev, cur);
  }
  return out;
}

// ---------------------------------------------------------------------------
// colors
// ---------------------------------------------------------------------------

Rgb colormap_viridis(double v) {
  static const double stops[9][3] = {
      {68, 1, 84},    {71, 44, 122},  {59, 81, 139},  {44, 113, 142},
      {33, 144, 141}, {39, 173, 129}, {92, 200, 99},  {170, 220, 50},
      {253, 231, 37}};
  v = std::min(1.0, std::max(0.0, v));
  double x = v * 8.0;
  int i = std::min(7, int(x));
  double f = x - i;
  Rgb c;
  c.r = uint8_t(stops[i][0] + f * (stops[i + 1][0] - stops[i][0]));
  c.g = uint8_t(stops[i][1] + f * (stops[i + 1][1] - stops[i][1]));
  c.b = uint8_t(stops[i][2] + f * (stops[i + 1][2] - stops[i][2]));
  return c;
}

namespace {

Rgb hsv(double h, double s, double v) {
  double c = v * s;
  double x = c * (1.0 - std::abs(std::fmod(h * 6.0, 2.0) - 1.0));
  double m = v - c;
  double r = 0, g = 0, b = 0;
  int seg = int(h * 6.0) % 6;
  switch (seg) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  return {uint8_t(255 * (r + m)), uint8_t(255 * (g + m)), uint8_t(255 * (b + m))};
}

}  // namespace

Rgb instance_color(int32_t id) {
  if (id <= 0) return {18, 18, 18};
  double hue = std::fmod(double(id) * 0.6180339887498949, 1.0);
  double val = 0.75 + 0.2 * std::fmod(double(id) * 0.35, 1.0);
  return hsv(hue, 0.65, val);
}

Rgb class_color(int32_t cls, int32_t n_classes) {
  if (cls <= 0) return {30, 30, 30};
  if (cls > n_classes) return {235, 235, 235};  // void
  return hsv(double(cls - 1) / double(std::max(1, n_classes)), 0.85, 0.92);
}

// ---------------------------------------------------------------------------
// canvas + microfont
// ---------------------------------------------------------------------------

namespace {

// 3x5 bitmap font, row-major, bit 14 = top-left
uint16_t glyph_bits(char ch) {
  switch (ch) {
    case '0': return 0b111101101101111;
    case '1': return 0b010110010010111;
    case '2': return 0b111001111100111;
    case '3': return 0b111001111001111;
    case '4': return 0b101101111001001;
    case '5': return 0b111100111001111;
    case '6': return 0b111100111101111;
    case '7': return 0b111001001010010;
    case '8': return 0b111101111101111;
    case '9': return 0b111101111001111;
    case '.': return 0b000000000000010;
    case '-': return 0b000000111000000;
    case '%': return 0b101001010100101;
    case 'A': return 0b010101111101101;
    case 'B': return 0b110101110101110;
    case 'C': return 0b011100100100011;
    case 'D': return 0b110101101101110;
    case 'E': return 0b111100110100111;
    case 'F': return 0b111100110100100;
    case 'G': return 0b011100101101011;
    case 'H': return 0b101101111101101;
    case 'I': return 0b111010010010111;
    case 'J': return 0b001001001101010;
    case 'K': return 0b101110100110101;
    case 'L': return 0b100100100100111;
    case 'M': return 0b101111111101101;
    case 'N': return 0b110101101101101;
    case 'O': return 0b010101101101010;
    case 'P': return 0b110101110100100;
    case 'Q': return 0b010101101011001;
    case 'R': return 0b110101110110101;
    case 'S': return 0b011100010001110;
    case 'T': return 0b111010010010010;
    case 'U': return 0b101101101101111;
    case 'V': return 0b101101101101010;
    case 'W': return 0b101101111111101;
    case 'X': return 0b101101010101101;
    case 'Y': return 0b101101010010010;
    case 'Z': return 0b111001010100111;
    default: return 0;
  }
}

}  // namespace

Canvas::Canvas(int64_t h, int64_t w, Rgb fill) : img(Shape{h, w, 3}) {
  for (int64_t k = 0; k < h * w; ++k) {
    img[3 * k] = fill.r;
    img[3 * k + 1] = fill.g;
    img[3 * k + 2] = fill.b;
  }
}

void Canvas::set(int64_t i, int64_t j, Rgb c) {
  if (i < 0 || j < 0 || i >= img.dim(0) || j >= img.dim(1)) return;
  int64_t k = (i * img.dim(1) + j) * 3;
  img[k] = c.r;
  img[k + 1] = c.g;
  img[k + 2] = c.b;
}

void Canvas::fill_rect(int64_t i0, int64_t j0, int64_t h, int64_t w, Rgb c) {
  for (int64_t i = i0; i < i0 + h; ++i)
    for (int64_t j = j0; j < j0 + w; ++j) set(i, j, c);
}

void Canvas::text(int64_t i, int64_t j, const std::string& s, Rgb c, int scale) {
  int64_t x = j;
  for (char ch : s) {
    char up = char(std::toupper(static_cast<unsigned char>(ch)));
    uint16_t bits = glyph_bits(up);
    for (int r = 0; r < 5; ++r)
      for (int col = 0; col < 3; ++col)
        if (bits & (1 << (14 - (r * 3 + col))))
          fill_rect(i + r * scale, x + col * scale, scale, scale, c);
    x += 4 * scale;
  }
}

void Canvas::save(const std::filesystem::path& path) const {
  png_write_rgb8(path, img);
}

// ---------------------------------------------------------------------------
// figures
// ---------------------------------------------------------------------------

void save_heatmap_png(const std::filesystem::path& path, const Tensor<float>& map) {
  int64_t h = map.dim(0), w = map.dim(1);
  Canvas cv(h, w);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      cv.set(i, j, colormap_viridis(double(map.at(i, j))));
  cv.save(path);
}

void save_class_map_png(const std::filesystem::path& path, const Tensor<int32_t>& sem,
                        int32_t n_classes) {
  int64_t h = sem.dim(0), w = sem.dim(1);
  Canvas cv(h, w);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      cv.set(i, j, class_color(sem.at(i, j), n_classes));
  cv.save(path);
}

void save_instance_map_png(const std::filesystem::path& path,
                           const Tensor<int32_t>& inst) {
  int64_t h = inst.dim(0), w = inst.dim(1);
  Canvas cv(h, w);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) cv.set(i, j, instance_color(inst.at(i, j)));
  cv.save(path);
}

void save_confusion_png(const std::filesystem::path& path,
                        const Tensor<int64_t>& counts,
                        const std::vector<std::string>& names) {
  int64_t k = counts.dim(0);
  int64_t cell = std::max<int64_t>(6, 240 / std::max<int64_t>(1, k));
  int64_t margin = 18;
  Canvas cv(margin + k * cell + 4, margin + k * cell + 4);
  for (int64_t t = 0; t < k; ++t) {
    int64_t row_total = 0;
    for (int64_t p = 0; p < k; ++p) row_total += counts.at(t, p);
    for (int64_t p = 0; p < k; ++p) {
      double v = row_total > 0 ? double(counts.at(t, p)) / double(row_total) : 0.0;
      cv.fill_rect(margin + t * cell, margin + p * cell, cell - 1, cell - 1,
                   colormap_viridis(v));
    }
  }
  for (int64_t t = 0; t < k && cell >= 8; ++t) {
    std::string label = t < int64_t(names.size()) ? names[size_t(t)]
                                                  : std::to_string(t);
    if (label.size() > 2) label = label.substr(0, 2);
    cv.text(margin + t * cell + 1, 2, label, {0, 0, 0});
    cv.text(2, margin + t * cell + 1, label, {0, 0, 0});
  }
  cv.save(path);
}

void save_bar_chart_png(const std::filesystem::path& path,
                        const std::vector<double>& values,
                        const std::vector<std::string>& labels,
                        const std::string& title) {
  int64_t n = int64_t(values.size());
  int64_t bar_w = 14, gap = 6, plot_h = 120;
  int64_t w = std::max<int64_t>(80, 10 + n * (bar_w + gap) + 10);
  Canvas cv(plot_h + 34, w);
  double vmax = 1.0;
  for (double v : values) vmax = std::max(vmax, v);
  cv.text(4, 6, title, {0, 0, 0});
  for (int64_t i = 0; i < n; ++i) {
    double frac = std::max(0.0, values[size_t(i)] / vmax);
    int64_t bh = int64_t(frac * (plot_h - 2));
    int64_t x = 10 + i * (bar_w + gap);
    cv.fill_rect(14 + (plot_h - bh), x, bh, bar_w, colormap_viridis(frac));
    if (i < int64_t(labels.size()))
      cv.text(plot_h + 18, x, labels[size_t(i)].substr(0, 3), {0, 0, 0});
  }
  cv.save(path);
}

void save_montage_png(const std::filesystem::path& path, const Tensor<float>& tiles,
                      int64_t rows, int64_t cols) {
  check(tiles.ndim() == 3, ErrorCode::ShapeError, "montage wants [N,H,W]");
  int64_t n = tiles.dim(0), h = tiles.dim(1), w = tiles.dim(2);
  Canvas cv(rows * (h + 1) + 1, cols * (w + 1) + 1, {255, 255, 255});
  for (int64_t t = 0; t < n && t < rows * cols; ++t) {
    int64_t r = t / cols, c = t % cols;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        double v = std::min(1.0, std::max(0.0, double(tiles.at(t, i, j))));
        uint8_t g = uint8_t(255 * v);
        cv.set(1 + r * (h + 1) + i, 1 + c * (w + 1) + j, {g, g, g});
      }
  }
  cv.save(path);
}

}  // namespace sitspan::viz
