#include "gflow/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

#include <png.h>
#include <zlib.h>

#include "gflow/error.hpp"

namespace gflow {

namespace {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  void u64(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out_.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }

  Bytes& bytes() { return out_; }

 private:
  Bytes out_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, const char* what) : b_(bytes), what_(what) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * b);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * b);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> raw(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return b_.size() - pos_; }
  std::size_t position() const { return pos_; }

  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError(std::string(what_) + ": truncated data");
  }

 private:
  std::span<const std::uint8_t> b_;
  const char* what_;
  std::size_t pos_ = 0;
};

}  // namespace

// ---------------------------------------------------------------------------
// Files

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// .flo

Bytes encode_flo(const FlowField& field) {
  if (field.width <= 0 || field.height <= 0) throw ContractError("write_flo: empty flow field");
  if (field.flow.rows() != field.pixels() || field.valid.size() != static_cast<std::size_t>(field.pixels()))
    throw ContractError("write_flo: inconsistent flow field");
  ByteWriter w;
  w.f32(kFloMagic);
  w.i32(field.width);
  w.i32(field.height);
  for (int p = 0; p < field.pixels(); ++p) {
    if (!field.valid[p]) {
      w.f32(kFloUnknown);
      w.f32(kFloUnknown);
      continue;
    }
    const double u = field.flow(p, 0), v = field.flow(p, 1);
    if (!std::isfinite(u) || !std::isfinite(v)) throw ContractError("write_flo: non-finite flow value");
    w.f32(static_cast<float>(u));
    w.f32(static_cast<float>(v));
  }
  return std::move(w.bytes());
}

FlowField decode_flo(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "read_flo");
  if (r.f32() != kFloMagic) throw FormatError("read_flo: bad magic");
  const std::int32_t w = r.i32(), h = r.i32();
  // Same sanity bound as the reference Middlebury reader.
  if (w <= 0 || h <= 0 || w > 99999 || h > 99999) throw FormatError("read_flo: invalid dimensions");
  if (r.remaining() / 8 < static_cast<std::size_t>(w) * static_cast<std::size_t>(h))
    throw FormatError("read_flo: truncated data");
  FlowField f(w, h);
  for (int p = 0; p < f.pixels(); ++p) {
    const float u = r.f32(), v = r.f32();
    if (!(std::abs(u) < kFloUnknown) || !(std::abs(v) < kFloUnknown)) continue;
    f.flow(p, 0) = u;
    f.flow(p, 1) = v;
    f.valid[p] = 1;
  }
  return f;
}

void write_flo(const FlowField& field, const std::filesystem::path& path) { write_file(path, encode_flo(field)); }

FlowField read_flo(const std::filesystem::path& path) { return decode_flo(read_file(path)); }

// ---------------------------------------------------------------------------
// PNG

std::uint8_t quantize_channel(double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw ContractError("write_png: channel value outside [0, 1]");
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

Bytes encode_png(const Image& image) {
  if (image.width <= 0 || image.height <= 0) throw ContractError("write_png: empty image");
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(image.pixels()) * 3);
  for (int p = 0; p < image.pixels(); ++p)
    for (int c = 0; c < 3; ++c) pixels[3 * p + c] = quantize_channel(image.rgb(p, c));

  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, pixels.data(), 0, nullptr))
    throw FormatError(std::string("write_png: ") + png.message);
  Bytes out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, pixels.data(), 0, nullptr))
    throw FormatError(std::string("write_png: ") + png.message);
  out.resize(size);
  return out;
}

Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
    throw FormatError(std::string("read_png: ") + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw FormatError(std::string("read_png: ") + png.message);
  }
  Image img(static_cast<int>(png.width), static_cast<int>(png.height));
  for (int p = 0; p < img.pixels(); ++p)
    for (int c = 0; c < 3; ++c) img.rgb(p, c) = pixels[3 * p + c] / 255.0;
  return img;
}

void write_png(const Image& image, const std::filesystem::path& path) { write_file(path, encode_png(image)); }

Image read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

Image clamp01(Image image) {
  image.rgb = image.rgb.max(0.0).min(1.0);
  return image;
}

// ---------------------------------------------------------------------------
// Colorwheel

const std::vector<Vec3>& colorwheel() {
  static const std::vector<Vec3> wheel = [] {
    constexpr int ry = 15, yg = 6, gc = 4, cb = 11, bm = 13, mr = 6;
    std::vector<Vec3> w;
    auto ramp = [](int i, int n) { return std::floor(255.0 * i / n); };
    for (int i = 0; i < ry; ++i) w.emplace_back(255, ramp(i, ry), 0);
    for (int i = 0; i < yg; ++i) w.emplace_back(255 - ramp(i, yg), 255, 0);
    for (int i = 0; i < gc; ++i) w.emplace_back(0, 255, ramp(i, gc));
    for (int i = 0; i < cb; ++i) w.emplace_back(0, 255 - ramp(i, cb), 255);
    for (int i = 0; i < bm; ++i) w.emplace_back(ramp(i, bm), 0, 255);
    for (int i = 0; i < mr; ++i) w.emplace_back(255, 0, 255 - ramp(i, mr));
    for (Vec3& c : w) c /= 255.0;
    return w;
  }();
  return wheel;
}

Image flow_to_color(const FlowField& field, std::optional<double> max_magnitude) {
  double scale = 1.0;
  if (max_magnitude) {
    if (!(*max_magnitude > 0.0)) throw ContractError("flow_to_color: max magnitude must be positive");
    scale = *max_magnitude;
  } else {
    std::vector<double> mags;
    for (int p = 0; p < field.pixels(); ++p)
      if (field.valid[p]) mags.push_back(std::hypot(field.flow(p, 0), field.flow(p, 1)));
    if (!mags.empty()) {
      const std::size_t rank = static_cast<std::size_t>(std::ceil(0.99 * mags.size())) - 1;
      std::nth_element(mags.begin(), mags.begin() + rank, mags.end());
      scale = std::max(mags[rank], kMinColorScale);
    }
  }

  const auto& wheel = colorwheel();
  const int ncols = static_cast<int>(wheel.size());
  Image out(field.width, field.height, Vec3::Ones());
  for (int p = 0; p < field.pixels(); ++p) {
    if (!field.valid[p]) continue;
    const double u = field.flow(p, 0) / scale, v = field.flow(p, 1) / scale;
    const double rad = std::hypot(u, v);
    const double a = std::atan2(-v, -u) / std::numbers::pi;
    const double fk = (a + 1.0) / 2.0 * (ncols - 1);
    const int k0 = static_cast<int>(std::floor(fk));
    const int k1 = (k0 + 1) % ncols;
    const double f = fk - k0;
    Vec3 col = (1.0 - f) * wheel[k0] + f * wheel[k1];
    if (rad <= 1.0)
      col = (Vec3::Ones() - rad * (Vec3::Ones() - col)).eval();
    else
      col *= 0.75;
    out.rgb.row(p) = col.transpose().array();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'G', 'F', 'C', 'K'};

std::uint32_t crc_of(std::span<const std::uint8_t> b) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, b.data(), static_cast<uInt>(b.size())));
}

}  // namespace

Bytes encode_checkpoint(const Checkpoint& ckpt) {
  ckpt.field.validate();
  ByteWriter w;
  w.raw({reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 4});
  w.u32(kCheckpointVersion);
  w.u64(ckpt.field.size());
  w.u64(static_cast<std::uint64_t>(ckpt.field.last_frame()));
  w.u64(ckpt.seed);
  w.u64(ckpt.config.size());
  w.raw({reinterpret_cast<const std::uint8_t*>(ckpt.config.data()), ckpt.config.size()});
  const Eigen::VectorXd x = pack(ckpt.field);
  for (Eigen::Index i = 0; i < x.size(); ++i) w.f64(x[i]);
  w.u32(crc_of(w.bytes()));
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "load_checkpoint");
  const auto magic = r.raw(4);
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic)) throw FormatError("load_checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("load_checkpoint: unsupported version " + std::to_string(version));
  const std::uint64_t count = r.u64(), last_frame = r.u64(), seed = r.u64(), config_len = r.u64();
  r.need(config_len);
  const auto config = r.raw(config_len);
  // Every parameter is 8 bytes; check the length before allocating.
  constexpr std::uint64_t kLimit = std::uint64_t(1) << 40;
  if (count > kLimit || last_frame > kLimit) throw FormatError("load_checkpoint: corrupt header");
  const std::uint64_t params = count * (14 + 10 * last_frame);
  if (r.remaining() < 4 || (r.remaining() - 4) / 8 < params || (r.remaining() - 4) != params * 8)
    throw FormatError("load_checkpoint: length mismatch (truncated or corrupt)");

  Checkpoint out;
  out.seed = seed;
  out.config.assign(config.begin(), config.end());
  out.field = DynamicField::still(GaussianSet(count), static_cast<int>(last_frame));
  Eigen::VectorXd x(static_cast<Eigen::Index>(params));
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = r.f64();
  const std::size_t body = r.position();
  const std::uint32_t stored = r.u32();
  if (stored != crc_of(bytes.subspan(0, body))) throw FormatError("load_checkpoint: checksum mismatch");
  unpack(x, out.field);
  return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace gflow
