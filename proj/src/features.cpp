#include "nemf/features.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "nemf/error.hpp"
#include "nemf/random.hpp"

namespace nemf {

namespace io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

}  // namespace io

namespace {

constexpr char kFeatureMagic[] = "NMFT";
constexpr std::uint16_t kFeatureVersion = 1;
// Weight of the random-projection block relative to the unit-norm orientation block.
constexpr double kProjectionGain = 4.0;

bool has_extension(const std::filesystem::path& path, std::initializer_list<const char*> exts) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return std::any_of(exts.begin(), exts.end(), [&](const char* e) { return ext == e; });
}

struct PnmHeader {
  char kind = 0;
  std::size_t cols = 0;
  std::size_t rows = 0;
  unsigned maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  PnmHeader h;
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    return tok;
  };
  const std::string magic = next_token();
  if (magic != "P5" && magic != "P6") throw Error(ErrorCode::kBadMagic, name + ": not a binary PGM/PPM file");
  h.kind = magic[1];
  try {
    h.cols = std::stoul(next_token());
    h.rows = std::stoul(next_token());
    h.maxval = static_cast<unsigned>(std::stoul(next_token()));
  } catch (const std::exception&) {
    throw Error(ErrorCode::kCorrupt, name + ": malformed PNM header");
  }
  if (h.maxval == 0 || h.maxval > 65535 || h.rows == 0 || h.cols == 0) {
    throw Error(ErrorCode::kCorrupt, name + ": malformed PNM header");
  }
  h.data_offset = pos + 1;
  return h;
}

Image read_pnm(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const PnmHeader h = parse_pnm_header(bytes, path.string());
  Image img;
  img.rows = h.rows;
  img.cols = h.cols;
  img.channels = h.kind == '6' ? 3 : 1;
  const std::size_t sample_bytes = h.maxval > 255 ? 2 : 1;
  const std::size_t n = img.rows * img.cols * img.channels;
  if (h.data_offset + n * sample_bytes > bytes.size()) {
    throw Error(ErrorCode::kTruncated, path.string() + ": pixel data truncated");
  }
  img.data.resize(n);
  const std::uint8_t* p = bytes.data() + h.data_offset;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned v = sample_bytes == 2 ? (p[2 * i] << 8) | p[2 * i + 1] : p[i];
    img.data[i] = static_cast<float>(v) / static_cast<float>(h.maxval);
  }
  return img;
}

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw Error(ErrorCode::kIo, path.string() + ": " + png.message);
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw Error(ErrorCode::kCorrupt, path.string() + ": " + msg);
  }
  Image img;
  img.rows = png.height;
  img.cols = png.width;
  img.channels = color ? 3 : 1;
  img.data.resize(buffer.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) img.data[i] = static_cast<float>(buffer[i]) / 255.0f;
  return img;
}

// Pixel fetch with the configured boundary rule.
struct PatchSampler {
  const Image& image;
  BoundaryMode mode;

  std::size_t wrap_index(std::ptrdiff_t i, std::size_t n) const {
    if (mode == BoundaryMode::kWrap) {
      const auto m = static_cast<std::ptrdiff_t>(n);
      return static_cast<std::size_t>(((i % m) + m) % m);
    }
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
  }
  float value(std::ptrdiff_t r, std::ptrdiff_t c, std::size_t ch) const {
    return image.at(wrap_index(r, image.rows), wrap_index(c, image.cols), ch);
  }
  float luminance(std::ptrdiff_t r, std::ptrdiff_t c) const {
    float total = 0.0f;
    for (std::size_t ch = 0; ch < image.channels; ++ch) total += value(r, c, ch);
    return total / static_cast<float>(image.channels);
  }
};

std::size_t grid_center(std::size_t index, std::size_t grid, std::size_t extent) {
  if (grid <= 1) return 0;
  const double pos = static_cast<double>(index) * static_cast<double>(extent - 1) / static_cast<double>(grid - 1);
  return static_cast<std::size_t>(std::lround(pos));
}

}  // namespace

void validate_pair(const ImagePair& pair) {
  for (const Image* img : {&pair.source, &pair.target}) {
    if (img->rows < kMinImageExtent || img->cols < kMinImageExtent) {
      throw Error(ErrorCode::kInvalidArgument, "image pair: rasters must be at least 16x16");
    }
    if (img->channels != 1 && img->channels != 3) {
      throw Error(ErrorCode::kInvalidArgument, "image pair: channel count must be 1 or 3");
    }
  }
}

Image read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::kIo, "missing image " + path.string());
  if (has_extension(path, {".png"})) return read_png(path);
  return read_pnm(path);
}

std::pair<std::size_t, std::size_t> probe_image_size(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::kIo, "missing image " + path.string());
  if (has_extension(path, {".png"})) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str())) {
      throw Error(ErrorCode::kIo, path.string() + ": " + png.message);
    }
    std::pair<std::size_t, std::size_t> size{png.height, png.width};
    png_image_free(&png);
    return size;
  }
  const auto header = parse_pnm_header(io::read_file(path), path.string());
  return {header.rows, header.cols};
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw Error(ErrorCode::kInvalidArgument, "write_png: channel count must be 1 or 3");
  }
  std::vector<std::uint8_t> buffer(image.data.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    buffer[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data[i], 0.0f, 1.0f) * 255.0f));
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.cols);
  png.height = static_cast<png_uint_32>(image.rows);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw Error(ErrorCode::kIo, path.string() + ": " + png.message);
  }
}

FeatureGrid extract_handcrafted(const Image& image, const ExtractorConfig& config) {
  const std::size_t color_dims = image.channels;
  if (config.grid_rows == 0 || config.grid_cols == 0 || config.patch_size == 0) {
    throw Error(ErrorCode::kInvalidArgument, "extract_handcrafted: grid and patch extents must be positive");
  }
  if (image.rows < config.patch_size || image.cols < config.patch_size) {
    throw Error(ErrorCode::kInvalidArgument, "extract_handcrafted: image smaller than the patch size");
  }
  if (config.descriptor_dim < color_dims + kOrientationBins) {
    throw Error(ErrorCode::kInvalidArgument, "extract_handcrafted: descriptor_dim too small for color + orientation bins");
  }
  const std::size_t proj_dims = config.descriptor_dim - color_dims - kOrientationBins;
  const std::size_t patch = config.patch_size;
  const std::size_t raw_dims = patch * patch * image.channels;

  // Fixed-seed Gaussian projection, scaled to keep unit-variance inputs at unit variance.
  std::vector<double> projection(proj_dims * raw_dims);
  {
    Rng rng(derive_seed(config.projection_seed, raw_dims));
    const double s = 1.0 / std::sqrt(static_cast<double>(raw_dims));
    for (auto& v : projection) v = rng.normal() * s;
  }

  FeatureGrid grid;
  grid.rows = config.grid_rows;
  grid.cols = config.grid_cols;
  grid.channels = config.descriptor_dim;
  grid.values.assign(grid.rows * grid.cols * grid.channels, 0.0f);
  grid.provenance = FeatureProvenance::kHandcrafted;

  const PatchSampler sampler{image, config.boundary};
  const auto half = static_cast<std::ptrdiff_t>(patch / 2);
  std::vector<double> raw(raw_dims);

  for (std::size_t gr = 0; gr < grid.rows; ++gr) {
    for (std::size_t gc = 0; gc < grid.cols; ++gc) {
      const auto r0 = static_cast<std::ptrdiff_t>(grid_center(gr, grid.rows, image.rows)) - half;
      const auto c0 = static_cast<std::ptrdiff_t>(grid_center(gc, grid.cols, image.cols)) - half;
      float* out = grid.values.data() + (gr * grid.cols + gc) * grid.channels;

      double patch_mean = 0.0;
      std::vector<double> color(color_dims, 0.0);
      std::array<double, kOrientationBins> hist{};
      for (std::size_t dr = 0; dr < patch; ++dr) {
        for (std::size_t dc = 0; dc < patch; ++dc) {
          const std::ptrdiff_t r = r0 + static_cast<std::ptrdiff_t>(dr);
          const std::ptrdiff_t c = c0 + static_cast<std::ptrdiff_t>(dc);
          for (std::size_t ch = 0; ch < image.channels; ++ch) {
            const double v = sampler.value(r, c, ch);
            color[ch] += v;
            raw[(dr * patch + dc) * image.channels + ch] = v;
            patch_mean += v;
          }
          const double gy = 0.5 * (sampler.luminance(r + 1, c) - sampler.luminance(r - 1, c));
          const double gx = 0.5 * (sampler.luminance(r, c + 1) - sampler.luminance(r, c - 1));
          const double magnitude = std::hypot(gx, gy);
          if (magnitude <= 0.0) continue;
          double angle = std::atan2(gy, gx);
          if (angle < 0.0) angle += 2.0 * std::numbers::pi;
          // soft assignment between the two nearest orientation bins
          const double pos = angle / (2.0 * std::numbers::pi) * kOrientationBins;
          const auto lo = static_cast<std::size_t>(std::floor(pos)) % kOrientationBins;
          const double frac = pos - std::floor(pos);
          hist[lo] += magnitude * (1.0 - frac);
          hist[(lo + 1) % kOrientationBins] += magnitude * frac;
        }
      }
      const double count = static_cast<double>(patch * patch);
      patch_mean /= count * static_cast<double>(image.channels);
      for (std::size_t ch = 0; ch < color_dims; ++ch) out[ch] = static_cast<float>(color[ch] / count);

      double hist_norm = 0.0;
      for (double h : hist) hist_norm += h * h;
      hist_norm = std::sqrt(hist_norm);
      for (std::size_t b = 0; b < kOrientationBins; ++b) {
        out[color_dims + b] = hist_norm > 0.0 ? static_cast<float>(hist[b] / hist_norm) : 0.0f;
      }

      for (auto& v : raw) v -= patch_mean;
      for (std::size_t k = 0; k < proj_dims; ++k) {
        double acc = 0.0;
        const double* row = projection.data() + k * raw_dims;
        for (std::size_t i = 0; i < raw_dims; ++i) acc += row[i] * raw[i];
        out[color_dims + kOrientationBins + k] = static_cast<float>(acc * kProjectionGain);
      }
    }
  }
  return grid;
}

void export_features(const std::filesystem::path& path, const FeatureGrid& grid) {
  if (grid.values.size() != grid.rows * grid.cols * grid.channels) {
    throw Error(ErrorCode::kShape, "export_features: value count does not match the grid shape");
  }
  io::ByteWriter w;
  w.bytes(std::string_view(kFeatureMagic, 4));
  w.u16(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(grid.rows));
  w.u32(static_cast<std::uint32_t>(grid.cols));
  w.u32(static_cast<std::uint32_t>(grid.channels));
  for (float v : grid.values) w.f32(v);
  io::write_file(path, w.buffer());
}

FeatureGrid import_features(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes.data(), bytes.size(), path.string());
  if (bytes.size() < 4 || r.bytes(4) != std::string_view(kFeatureMagic, 4)) {
    throw Error(ErrorCode::kBadMagic, path.string() + ": not a feature container (magic mismatch)");
  }
  const std::uint16_t version = r.u16();
  if (version != kFeatureVersion) {
    throw Error(ErrorCode::kUnsupportedVersion, path.string() + ": unsupported feature version " + std::to_string(version));
  }
  FeatureGrid grid;
  grid.rows = r.u32();
  grid.cols = r.u32();
  grid.channels = r.u32();
  grid.provenance = FeatureProvenance::kImported;
  if (grid.rows == 0 || grid.cols == 0 || grid.channels == 0) {
    throw Error(ErrorCode::kCorrupt, path.string() + ": zero extent in header");
  }
  const std::size_t n = grid.rows * grid.cols * grid.channels;
  if (r.remaining() < n * 4) {
    std::ostringstream os;
    os << path.string() << ": payload truncated (expected " << n * 4 << " bytes, found " << r.remaining() << ")";
    throw Error(ErrorCode::kTruncated, os.str());
  }
  grid.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    grid.values[i] = r.f32();
    if (!std::isfinite(grid.values[i])) {
      const std::size_t ch = i % grid.channels;
      const std::size_t cell = i / grid.channels;
      std::ostringstream os;
      os << path.string() << ": non-finite value at index " << i << " (row " << cell / grid.cols << ", col "
         << cell % grid.cols << ", channel " << ch << ")";
      throw Error(ErrorCode::kNonFinite, os.str());
    }
  }
  return grid;
}

Tensor CostVolume::as_tensor() const { return Tensor::from_values({src_rows, src_cols, tgt_rows, tgt_cols}, values); }

CostVolume correlate(const FeatureGrid& source, const FeatureGrid& target) {
  if (source.channels != target.channels) {
    std::ostringstream os;
    os << "correlate: channel mismatch (" << source.channels << " vs " << target.channels << ")";
    throw Error(ErrorCode::kShape, os.str());
  }
  const std::size_t d = source.channels;
  auto norms = [d](const FeatureGrid& g) {
    std::vector<double> n(g.rows * g.cols);
    for (std::size_t i = 0; i < n.size(); ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += static_cast<double>(g.values[i * d + k]) * g.values[i * d + k];
      n[i] = std::sqrt(s);
    }
    return n;
  };
  const auto ns = norms(source);
  const auto nt = norms(target);

  CostVolume cv;
  cv.src_rows = source.rows;
  cv.src_cols = source.cols;
  cv.tgt_rows = target.rows;
  cv.tgt_cols = target.cols;
  const std::size_t S = ns.size();
  const std::size_t T = nt.size();
  cv.values.assign(S * T, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    if (ns[s] == 0.0) continue;
    const float* a = source.values.data() + s * d;
    for (std::size_t t = 0; t < T; ++t) {
      if (nt[t] == 0.0) continue;
      const float* b = target.values.data() + t * d;
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += static_cast<double>(a[k]) * b[k];
      cv.values[s * T + t] = std::clamp(dot / (ns[s] * nt[t]), -1.0, 1.0);
    }
  }
  return cv;
}

}  // namespace nemf
