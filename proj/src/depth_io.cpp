#include "depthfuse/depth_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <string>

#include "depthfuse/error.hpp"
#include "depthfuse/rng.hpp"

namespace depthfuse {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return f;
}

// Decoded PNG samples, one entry per channel sample, big-endian combined.
struct RawPng {
  std::size_t width = 0;
  std::size_t height = 0;
  int bit_depth = 0;
  int color_type = 0;
  std::size_t channels = 0;
  std::vector<std::uint16_t> samples;
};

bool decode_png(std::FILE* file, RawPng& out, bool header_only, char* message, std::size_t message_len) {
  // Allocated here so a longjmp never skips their destructors.
  std::vector<png_byte> buffer;
  std::vector<png_bytep> rows;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    std::snprintf(message, message_len, "corrupt or unsupported PNG data");
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, file);
  png_read_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  out.color_type = png_get_color_type(png, info);
  out.channels = png_get_channels(png, info);
  if (!header_only) {
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    buffer.resize(rowbytes * out.height);
    rows.resize(out.height);
    for (std::size_t y = 0; y < out.height; ++y) rows[y] = buffer.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    const std::size_t count = out.width * out.height * out.channels;
    out.samples.resize(count);
    if (out.bit_depth == 16) {
      for (std::size_t y = 0; y < out.height; ++y) {
        const png_byte* row = rows[y];
        for (std::size_t i = 0; i < out.width * out.channels; ++i) {
          out.samples[y * out.width * out.channels + i] =
              static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1]);
        }
      }
    } else if (out.bit_depth == 8) {
      for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t i = 0; i < out.width * out.channels; ++i) {
          out.samples[y * out.width * out.channels + i] = rows[y][i];
        }
      }
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

RawPng read_png(const std::filesystem::path& path, bool header_only = false) {
  FilePtr f = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError("'" + path.string() + "' is not a PNG file");
  }
  std::rewind(f.get());
  RawPng raw;
  char message[128] = "cannot allocate PNG reader";
  if (!decode_png(f.get(), raw, header_only, message, sizeof(message))) {
    throw FormatError("'" + path.string() + "': " + message);
  }
  return raw;
}

bool encode_png(std::FILE* file, std::size_t width, std::size_t height, int bit_depth, int color_type,
                const std::vector<png_bytep>& rows) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, file);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

// `bytes` holds big-endian samples for 16-bit images.
void write_png(const std::filesystem::path& path, std::size_t width, std::size_t height, int bit_depth,
               int color_type, std::size_t channels, std::vector<png_byte>& bytes) {
  const std::size_t rowbytes = width * channels * static_cast<std::size_t>(bit_depth / 8);
  std::vector<png_bytep> rows(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = bytes.data() + y * rowbytes;
  FilePtr f = open_file(path, "wb");
  if (!encode_png(f.get(), width, height, bit_depth, color_type, rows)) {
    throw IoError("failed writing PNG '" + path.string() + "'");
  }
  if (std::fflush(f.get()) != 0) throw IoError("failed writing PNG '" + path.string() + "'");
}

void require_gray(const RawPng& raw, const std::filesystem::path& path, const char* what) {
  if (raw.color_type != PNG_COLOR_TYPE_GRAY || raw.channels != 1) {
    throw FormatError(std::string(what) + " '" + path.string() + "' must be single-channel grayscale");
  }
}

std::vector<png_byte> pack16(const std::vector<std::uint16_t>& samples) {
  std::vector<png_byte> bytes(2 * samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    bytes[2 * i] = static_cast<png_byte>(samples[i] >> 8);
    bytes[2 * i + 1] = static_cast<png_byte>(samples[i] & 0xFF);
  }
  return bytes;
}

}  // namespace

DepthMap load_depth(const std::filesystem::path& path, DepthRole role) {
  const RawPng raw = read_png(path);
  require_gray(raw, path, "depth image");
  if (raw.bit_depth != 16) {
    throw FormatError("depth image '" + path.string() + "' must be 16-bit, got " + std::to_string(raw.bit_depth));
  }
  std::vector<double> values(raw.samples.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = raw.samples[i] / 1000.0;
  return DepthMap(raw.width, raw.height, std::move(values), role);
}

void save_depth(const DepthMap& map, const std::filesystem::path& path) {
  std::vector<std::uint16_t> mm(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = map[i];
    if (v > kMaxEncodableDepth) {
      throw RangeError("depth " + std::to_string(v) + " m exceeds encodable maximum 65.535 m");
    }
    const double q = std::round(v * 1000.0);
    if (v != 0.0 && q == 0.0) {
      throw RangeError("valid depth " + std::to_string(v) + " m rounds to 0 mm");
    }
    mm[i] = static_cast<std::uint16_t>(q);
  }
  auto bytes = pack16(mm);
  write_png(path, map.width(), map.height(), 16, PNG_COLOR_TYPE_GRAY, 1, bytes);
}

RgbImage load_rgb(const std::filesystem::path& path) {
  const RawPng raw = read_png(path);
  if (raw.color_type != PNG_COLOR_TYPE_RGB || raw.bit_depth != 8) {
    throw FormatError("RGB image '" + path.string() + "' must be 8-bit, 3-channel");
  }
  RgbImage img(raw.width, raw.height);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<std::uint8_t>(raw.samples[i]);
  return img;
}

void save_rgb(const RgbImage& image, const std::filesystem::path& path) {
  std::vector<png_byte> bytes(image.data.begin(), image.data.end());
  write_png(path, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, 3, bytes);
}

LabelMap load_labels(const std::filesystem::path& path, LabelSemantics semantics) {
  const RawPng raw = read_png(path);
  require_gray(raw, path, "label image");
  if (raw.bit_depth != 8 && raw.bit_depth != 16) {
    throw FormatError("label image '" + path.string() + "' must be 8- or 16-bit");
  }
  LabelMap labels(raw.width, raw.height, semantics);
  for (std::size_t i = 0; i < labels.labels.size(); ++i) labels.labels[i] = raw.samples[i];
  return labels;
}

void save_labels(const LabelMap& labels, const std::filesystem::path& path) {
  const std::uint32_t top = labels.max_label();
  if (top > 0xFFFF) throw RangeError("label " + std::to_string(top) + " does not fit a 16-bit PNG");
  if (top <= 0xFF) {
    std::vector<png_byte> bytes(labels.labels.begin(), labels.labels.end());
    write_png(path, labels.width, labels.height, 8, PNG_COLOR_TYPE_GRAY, 1, bytes);
    return;
  }
  std::vector<std::uint16_t> wide(labels.labels.begin(), labels.labels.end());
  auto bytes = pack16(wide);
  write_png(path, labels.width, labels.height, 16, PNG_COLOR_TYPE_GRAY, 1, bytes);
}

void save_mask(const PixelMask& mask, const std::filesystem::path& path) {
  std::vector<png_byte> bytes(mask.bits.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask[i] ? 255 : 0;
  write_png(path, mask.width, mask.height, 8, PNG_COLOR_TYPE_GRAY, 1, bytes);
}

PixelMask load_mask(const std::filesystem::path& path) {
  const RawPng raw = read_png(path);
  require_gray(raw, path, "mask image");
  if (raw.bit_depth != 8) throw FormatError("mask image '" + path.string() + "' must be 8-bit");
  PixelMask mask(raw.width, raw.height);
  for (std::size_t i = 0; i < mask.bits.size(); ++i) mask.set(i, raw.samples[i] != 0);
  return mask;
}

void save_gray8(std::size_t width, std::size_t height, const std::vector<std::uint8_t>& pixels,
                const std::filesystem::path& path) {
  if (pixels.size() != width * height) throw DimensionError("save_gray8: pixel count mismatch");
  std::vector<png_byte> bytes(pixels.begin(), pixels.end());
  write_png(path, width, height, 8, PNG_COLOR_TYPE_GRAY, 1, bytes);
}

std::pair<std::size_t, std::size_t> png_dimensions(const std::filesystem::path& path) {
  const RawPng raw = read_png(path, true);
  return {raw.width, raw.height};
}

// ---- resampling ----

namespace {

// Source index under half-pixel-centre alignment.
std::size_t nearest_source(std::size_t dst, std::size_t src_extent, std::size_t dst_extent) {
  const std::size_t s = (2 * dst + 1) * src_extent / (2 * dst_extent);
  return std::min(s, src_extent - 1);
}

}  // namespace

RgbImage resize_bilinear(const RgbImage& image, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw DimensionError("resize target must be >= 1");
  RgbImage out(width, height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        auto px = [&](std::size_t xx, std::size_t yy) {
          return static_cast<double>(image.data[3 * (yy * image.width + xx) + c]);
        };
        const double v = (1 - wy) * ((1 - wx) * px(x0, y0) + wx * px(x1, y0)) +
                         wy * ((1 - wx) * px(x0, y1) + wx * px(x1, y1));
        out.data[3 * (y * width + x) + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

DepthMap resize_nearest(const DepthMap& depth, std::size_t width, std::size_t height) {
  std::vector<double> values(width * height);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t syy = nearest_source(y, depth.height(), height);
    for (std::size_t x = 0; x < width; ++x) {
      values[y * width + x] = depth.at(nearest_source(x, depth.width(), width), syy);
    }
  }
  return DepthMap(width, height, std::move(values), depth.role());
}

LabelMap resize_nearest(const LabelMap& labels, std::size_t width, std::size_t height) {
  LabelMap out(width, height, labels.semantics);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t syy = nearest_source(y, labels.height, height);
    for (std::size_t x = 0; x < width; ++x) {
      out.labels[y * width + x] = labels.labels[syy * labels.width + nearest_source(x, labels.width, width)];
    }
  }
  return out;
}

AlignedSample resize_then_crop(const RgbImage& rgb, const DepthMap& depth, const LabelMap* labels,
                               const PreprocessOptions& options) {
  if (rgb.width != depth.width() || rgb.height != depth.height()) {
    throw DimensionError("RGB and depth dimensions differ");
  }
  if (labels && (labels->width != rgb.width || labels->height != rgb.height)) {
    throw DimensionError("label and RGB dimensions differ");
  }
  if (options.crop_width > options.resize_width || options.crop_height > options.resize_height) {
    throw DimensionError("crop window larger than resize target");
  }
  if (rgb.width < options.crop_width || rgb.height < options.crop_height) {
    throw DimensionError("source " + std::to_string(rgb.width) + "x" + std::to_string(rgb.height) +
                         " smaller than crop " + std::to_string(options.crop_width) + "x" +
                         std::to_string(options.crop_height));
  }
  const std::size_t tw = options.resize_width, th = options.resize_height;
  const std::size_t cw = options.crop_width, ch = options.crop_height;

  AlignedSample out;
  if (options.mode == CropMode::kCenter) {
    out.crop_x = (tw - cw) / 2;
    out.crop_y = (th - ch) / 2;
  } else {
    Rng rng(options.seed);
    out.crop_x = rng.index(tw - cw + 1);
    out.crop_y = rng.index(th - ch + 1);
  }

  const RgbImage rgb_r = resize_bilinear(rgb, tw, th);
  const DepthMap depth_r = resize_nearest(depth, tw, th);
  out.rgb = RgbImage(cw, ch);
  std::vector<double> dv(cw * ch);
  for (std::size_t y = 0; y < ch; ++y) {
    for (std::size_t x = 0; x < cw; ++x) {
      const std::size_t src = (y + out.crop_y) * tw + (x + out.crop_x);
      out.rgb.set_pixel(y * cw + x, rgb_r.pixel(src));
      dv[y * cw + x] = depth_r[src];
    }
  }
  out.depth = DepthMap(cw, ch, std::move(dv), depth.role());
  if (labels) {
    const LabelMap lab_r = resize_nearest(*labels, tw, th);
    LabelMap cropped(cw, ch, labels->semantics);
    for (std::size_t y = 0; y < ch; ++y) {
      for (std::size_t x = 0; x < cw; ++x) {
        cropped.labels[y * cw + x] = lab_r.labels[(y + out.crop_y) * tw + (x + out.crop_x)];
      }
    }
    out.labels = std::move(cropped);
  }
  return out;
}

}  // namespace depthfuse
