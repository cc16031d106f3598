#include "fnas/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "fnas/errors.hpp"

namespace fnas {

// --- dataset record -----------------------------------------------------------------

void Dataset::validate() const {
  if (!images.defined() || images.rank() != 4) throw InputError("dataset '" + name + "': images must be [N,C,H,W]");
  if (images.dim(0) != labels.size()) {
    throw InputError("dataset '" + name + "': " + std::to_string(images.dim(0)) + " images but " +
                     std::to_string(labels.size()) + " labels");
  }
  if (classes < 2) throw InputError("dataset '" + name + "': needs at least two classes");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw InputError("dataset '" + name + "': label " + std::to_string(labels[i]) + " of sample " +
                       std::to_string(i) + " outside [0," + std::to_string(classes) + ")");
    }
  }
  for (double v : images.data()) {
    if (!std::isfinite(v)) throw InputError("dataset '" + name + "': non-finite pixel");
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.classes = classes;
  out.name = name;
  out.provenance = provenance;
  out.mean = mean;
  out.stddev = stddev;
  out.images = batch_images(indices, 0, indices.size());
  out.labels = batch_labels(indices, 0, indices.size());
  return out;
}

Tensor Dataset::batch_images(const std::vector<std::size_t>& order, std::size_t first, std::size_t count) const {
  const std::size_t per = channels() * height() * width();
  std::vector<double> v(count * per);
  const auto src = images.data();
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t idx = order.at(first + i);
    std::copy(src.begin() + static_cast<long>(idx * per), src.begin() + static_cast<long>((idx + 1) * per),
              v.begin() + static_cast<long>(i * per));
  }
  return Tensor({count, channels(), height(), width()}, std::move(v));
}

std::vector<int> Dataset::batch_labels(const std::vector<std::size_t>& order, std::size_t first,
                                       std::size_t count) const {
  std::vector<int> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = labels.at(order.at(first + i));
  return out;
}

// --- synthetic gratings ---------------------------------------------------------------

Difficulty parse_difficulty(const std::string& name) {
  if (name == "easy") return Difficulty::easy;
  if (name == "medium") return Difficulty::medium;
  if (name == "hard") return Difficulty::hard;
  throw ConfigError("unknown difficulty '" + name + "' (easy, medium, hard)");
}

const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::easy:
      return "easy";
    case Difficulty::medium:
      return "medium";
    case Difficulty::hard:
      return "hard";
  }
  return "medium";
}

namespace {

struct GratingStyle {
  double spread;      // fraction of the orientation band covered
  double distractor;  // amplitude of a random second grating, relative
  double noise;       // pixel noise standard deviation
};

GratingStyle style_of(Difficulty d) {
  switch (d) {
    case Difficulty::easy:
      return {0.3, 0.0, 0.05};
    case Difficulty::medium:
      return {0.6, 0.35, 0.12};
    case Difficulty::hard:
      return {0.9, 0.6, 0.2};
  }
  return {0.6, 0.35, 0.12};
}

}  // namespace

Dataset synth_generate(const SynthSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic data needs K >= 2");
  if (spec.samples == 0 || spec.size < 2 || spec.channels == 0) throw ConfigError("synthetic data: empty spec");
  Rng rng(spec.seed, "synth");
  const auto style = style_of(spec.difficulty);
  const std::size_t n = spec.samples, s = spec.size, c = spec.channels;

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % spec.classes);
  for (std::size_t i = n; i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);

  const double pi = std::numbers::pi;
  std::vector<double> px(n * c * s * s);
  std::vector<double> gain(c);
  for (std::size_t i = 0; i < n; ++i) {
    const double theta = pi * (labels[i] + 0.5 + (rng.uniform() - 0.5) * style.spread) / spec.classes;
    const double freq = 2.0 * pi * rng.uniform(1.5, 3.5) / static_cast<double>(s);
    const double phase = rng.uniform(0.0, 2.0 * pi);
    const double amp = rng.uniform(0.25, 0.45);
    const double d_theta = rng.uniform(0.0, pi);
    const double d_freq = 2.0 * pi * rng.uniform(1.0, 4.0) / static_cast<double>(s);
    const double d_phase = rng.uniform(0.0, 2.0 * pi);
    for (auto& g : gain) g = rng.uniform(0.6, 1.0);
    const double ct = std::cos(theta), st = std::sin(theta), cd = std::cos(d_theta), sd = std::sin(d_theta);
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const double u = static_cast<double>(x), v = static_cast<double>(y);
        const double wave = amp * std::sin(freq * (u * ct + v * st) + phase) +
                            style.distractor * amp * std::sin(d_freq * (u * cd + v * sd) + d_phase);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double value = 0.5 + gain[ch] * wave + style.noise * rng.normal();
          px[((i * c + ch) * s + y) * s + x] = std::clamp(value, 0.0, 1.0);
        }
      }
    }
  }
  Dataset ds;
  ds.images = Tensor({n, c, s, s}, std::move(px));
  ds.labels = std::move(labels);
  ds.classes = spec.classes;
  ds.name = "synth";
  ds.provenance = "synth K=" + std::to_string(spec.classes) + " N=" + std::to_string(n) + " H=" + std::to_string(s) +
                  " C=" + std::to_string(c) + " seed=" + std::to_string(spec.seed) +
                  " difficulty=" + difficulty_name(spec.difficulty);
  ds.validate();
  return ds;
}

// --- binary readers -------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string bytes_digest(const std::vector<unsigned char>& bytes) {
  return digest_hex(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

[[noreturn]] void format_error(const std::string& path, std::size_t offset, const std::string& what) {
  throw FormatError(path + ": " + what + " at byte offset " + std::to_string(offset));
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t offset, const std::string& path) {
  if (offset + 4 > b.size()) format_error(path, b.size(), "truncated header");
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto ib = read_file(images_path);
  const auto lb = read_file(labels_path);
  if (read_be32(ib, 0, images_path) != 0x00000803u) format_error(images_path, 0, "bad image magic");
  if (read_be32(lb, 0, labels_path) != 0x00000801u) format_error(labels_path, 0, "bad label magic");
  const std::size_t n = read_be32(ib, 4, images_path);
  const std::size_t h = read_be32(ib, 8, images_path);
  const std::size_t w = read_be32(ib, 12, images_path);
  const std::size_t nl = read_be32(lb, 4, labels_path);
  if (n != nl) format_error(labels_path, 4, "label count " + std::to_string(nl) + " differs from image count " + std::to_string(n));
  if (h == 0 || w == 0) format_error(images_path, 8, "zero image dimension");
  const std::size_t image_bytes = 16 + n * h * w;
  if (ib.size() < image_bytes) format_error(images_path, ib.size(), "truncated pixel data, expected " + std::to_string(image_bytes) + " bytes");
  if (lb.size() < 8 + n) format_error(labels_path, lb.size(), "truncated label data, expected " + std::to_string(8 + n) + " bytes");

  std::vector<double> px(n * h * w);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = ib[16 + i] / 255.0;
  Dataset ds;
  ds.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lb[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.images = Tensor({n, 1, h, w}, std::move(px));
  ds.classes = std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  ds.name = "idx";
  ds.provenance = "idx " + bytes_digest(ib) + " " + bytes_digest(lb);
  ds.validate();
  return ds;
}

Dataset load_idx(const std::string& images_path) {
  std::string labels = images_path;
  const auto pos = labels.find("images-idx3");
  if (pos == std::string::npos) throw InputError("cannot derive a labels file from '" + images_path + "'");
  labels.replace(pos, 11, "labels-idx1");
  return load_idx(images_path, labels);
}

Dataset load_cifar_binary(const std::string& path) {
  constexpr std::size_t kRecord = 3073, kPixels = 3072;
  std::vector<std::string> files;
  if (std::filesystem::is_directory(path)) {
    for (int b = 1; b <= 5; ++b) files.push_back((std::filesystem::path(path) / ("data_batch_" + std::to_string(b) + ".bin")).string());
  } else {
    files.push_back(path);
  }
  std::vector<double> px;
  std::vector<int> labels;
  std::string provenance = "cifar10";
  for (const auto& file : files) {
    const auto bytes = read_file(file);
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      format_error(file, bytes.size() - bytes.size() % kRecord, "truncated record (records are 3073 bytes)");
    }
    for (std::size_t off = 0; off < bytes.size(); off += kRecord) {
      if (bytes[off] > 9) format_error(file, off, "label " + std::to_string(bytes[off]) + " outside [0,10)");
      labels.push_back(bytes[off]);
      for (std::size_t i = 0; i < kPixels; ++i) px.push_back(bytes[off + 1 + i] / 255.0);
    }
    provenance += " " + bytes_digest(bytes);
  }
  Dataset ds;
  const std::size_t n = labels.size();
  ds.images = Tensor({n, 3, 32, 32}, std::move(px));
  ds.labels = std::move(labels);
  ds.classes = 10;
  ds.name = "cifar10";
  ds.provenance = provenance;
  ds.validate();
  return ds;
}

// --- standardization ------------------------------------------------------------------

void compute_standardization(const Dataset& ds, std::vector<double>& mean, std::vector<double>& stddev) {
  const std::size_t n = ds.size(), c = ds.channels(), plane = ds.height() * ds.width();
  mean.assign(c, 0.0);
  stddev.assign(c, 0.0);
  const auto x = ds.images.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < plane; ++p) s += x[(i * c + ch) * plane + p];
    }
    const double mu = s / static_cast<double>(n * plane);
    double q = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < plane; ++p) {
        const double d = x[(i * c + ch) * plane + p] - mu;
        q += d * d;
      }
    }
    mean[ch] = mu;
    stddev[ch] = std::max(std::sqrt(q / static_cast<double>(n * plane)), 1e-8);
  }
}

void apply_standardization(Dataset& ds, const std::vector<double>& mean, const std::vector<double>& stddev) {
  const std::size_t n = ds.size(), c = ds.channels(), plane = ds.height() * ds.width();
  if (mean.size() != c || stddev.size() != c) throw DimensionError("standardization statistics do not match channels");
  auto x = ds.images.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < plane; ++p) {
        double& v = x[(i * c + ch) * plane + p];
        v = (v - mean[ch]) / stddev[ch];
      }
    }
  }
  ds.mean = mean;
  ds.stddev = stddev;
}

// --- augmentation ---------------------------------------------------------------------

void flip_horizontal(double* image, std::size_t c, std::size_t h, std::size_t w) {
  for (std::size_t r = 0; r < c * h; ++r) std::reverse(image + r * w, image + (r + 1) * w);
}

void pad_and_crop(double* image, std::size_t c, std::size_t h, std::size_t w, std::size_t pad, std::size_t top,
                  std::size_t left) {
  if (top > 2 * pad || left > 2 * pad) throw ConfigError("crop offset outside the padded image");
  std::vector<double> out(c * h * w, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = static_cast<long>(y + top) - static_cast<long>(pad);
      if (sy < 0 || sy >= static_cast<long>(h)) continue;
      for (std::size_t x = 0; x < w; ++x) {
        const long sx = static_cast<long>(x + left) - static_cast<long>(pad);
        if (sx < 0 || sx >= static_cast<long>(w)) continue;
        out[(ch * h + y) * w + x] = image[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
      }
    }
  }
  std::copy(out.begin(), out.end(), image);
}

void cutout(double* image, std::size_t c, std::size_t h, std::size_t w, std::size_t length, Rng& rng) {
  if (length == 0) return;
  const long cy = static_cast<long>(rng.below(h)), cx = static_cast<long>(rng.below(w));
  const long half = static_cast<long>(length / 2);
  const long y0 = std::max(0L, cy - half), y1 = std::min(static_cast<long>(h), cy - half + static_cast<long>(length));
  const long x0 = std::max(0L, cx - half), x1 = std::min(static_cast<long>(w), cx - half + static_cast<long>(length));
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (long y = y0; y < y1; ++y) {
      for (long x = x0; x < x1; ++x) image[(ch * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)] = 0.0;
    }
  }
}

Tensor cutout(const Tensor& image, std::size_t length, Rng& rng) {
  if (image.rank() != 3) throw DimensionError("cutout expects [C,H,W], got " + shape_str(image.shape()));
  std::vector<double> v(image.data().begin(), image.data().end());
  cutout(v.data(), image.dim(0), image.dim(1), image.dim(2), length, rng);
  return Tensor(image.shape(), std::move(v));
}

Tensor augment_batch(const Tensor& images, const AugmentPolicy& policy, Rng& rng) {
  if (images.rank() != 4) throw DimensionError("augment expects [N,C,H,W], got " + shape_str(images.shape()));
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  std::vector<double> v(images.data().begin(), images.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    double* img = v.data() + i * c * h * w;
    if (policy.pad > 0) {
      const std::size_t top = rng.below(2 * policy.pad + 1), left = rng.below(2 * policy.pad + 1);
      pad_and_crop(img, c, h, w, policy.pad, top, left);
    }
    if (rng.bernoulli(policy.flip_prob)) flip_horizontal(img, c, h, w);
    cutout(img, c, h, w, policy.cutout, rng);
  }
  return Tensor(images.shape(), std::move(v));
}

}  // namespace fnas
