#pragma once

// Benchmark tasks: the heteroskedastic 1-D regression problem, corrupted
// digit classification (IDX files or a synthetic seven-segment generator),
// base-model pretraining and a small binary cache for datasets and weights.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pacconf/data.hpp"
#include "pacconf/error.hpp"
#include "pacconf/nn.hpp"
#include "pacconf/numeric.hpp"
#include "pacconf/optimizer.hpp"
#include "pacconf/params.hpp"
#include "pacconf/predictor.hpp"
#include "pacconf/rng.hpp"
#include "pacconf/tape.hpp"

namespace pacconf {

// --- Regression ----------------------------------------------------------------

struct RegressionNoise {
  double homoskedastic = 0.3;
  double heteroskedastic = 1.8;
};

struct RegressionTask {
  Dataset train;
  Dataset cal;
  Dataset test;
};

inline double regression_mean(double x) { return std::cos(5.0 * x); }

/// n i.i.d. points of y = cos(5x) + a e1 + b sigmoid(5x) e2 with
/// x ~ U(-1, 1), e1, e2 ~ U(-0.5, 0.5).
template <class R>
Dataset sample_regression(long n, R& rng, const RegressionNoise& noise = {}) {
  std::uniform_real_distribution<double> ux(-1.0, 1.0);
  std::uniform_real_distribution<double> ue(-0.5, 0.5);
  Dataset d{Mat(n, 1), Vec(n)};
  for (long i = 0; i < n; ++i) {
    const double x = ux(rng);
    const double e1 = ue(rng);
    const double e2 = ue(rng);
    d.x(i, 0) = x;
    d.y(i) = regression_mean(x) + noise.homoskedastic * e1 + noise.heteroskedastic * sigmoid(5.0 * x) * e2;
  }
  return d;
}

/// Targets at fixed inputs (used to probe the conditional noise law).
template <class R>
Vec sample_regression_at(double x, long n, R& rng, const RegressionNoise& noise = {}) {
  std::uniform_real_distribution<double> ue(-0.5, 0.5);
  Vec y(n);
  for (long i = 0; i < n; ++i) {
    const double e1 = ue(rng);
    const double e2 = ue(rng);
    y(i) = regression_mean(x) + noise.homoskedastic * e1 + noise.heteroskedastic * sigmoid(5.0 * x) * e2;
  }
  return y;
}

inline RegressionTask gen_regression(long n_train, long n_cal, long n_test, std::uint64_t seed,
                                     const RegressionNoise& noise = {}) {
  if (n_train < 1 || n_cal < 1 || n_test < 1) throw DomainError("gen_regression: sizes must be >= 1");
  RegressionTask t;
  Rng r_train = make_rng({seed, stream::data, 0});
  Rng r_cal = make_rng({seed, stream::data, 1});
  Rng r_test = make_rng({seed, stream::data, 2});
  t.train = sample_regression(n_train, r_train, noise);
  t.cal = sample_regression(n_cal, r_cal, noise);
  t.test = sample_regression(n_test, r_test, noise);
  return t;
}

inline Arch regression_base_arch() { return Arch{{1, 64, 64, 1}, Activation::relu, Activation::identity, Head::identity}; }
inline Arch regression_u_arch() { return Arch{{1, 128, 128, 1}, Activation::tanh, Activation::identity, Head::identity}; }

// --- Supervised pretraining ----------------------------------------------------

struct TrainConfig {
  long steps = 3000;
  double learning_rate = 1e-2;
  StepRule step_rule = StepRule::adam;
  long minibatch = 0;  ///< 0: full batch
};

inline Var mse_loss(Var params, const Arch& arch, const Dataset& d) {
  Tape& tape = *params.tape;
  Var pred = forward_mlp(params, arch, tape.constant(d.x));
  return ad::mean(ad::square(ad::sub(pred, tape.constant(d.y))));
}

inline Var cross_entropy_loss(Var params, const Arch& arch, const Dataset& d) {
  Tape& tape = *params.tape;
  Arch a = arch;
  a.head = Head::log_softmax;
  Var logp = forward_mlp(params, a, tape.constant(d.x));
  return ad::scale(ad::mean(ad::gather_rows(logp, d.labels())), -1.0);
}

template <class LossFn>
ParamVector train_supervised(ParamVector init, const Arch& arch, const Dataset& data, const TrainConfig& tc,
                             std::uint64_t seed, LossFn loss_fn) {
  if (data.empty()) throw DomainError("train: empty training data");
  Vec theta = std::move(init.values);
  Stepper stepper(tc.step_rule, tc.learning_rate, 1);
  Rng rng = make_rng({seed, stream::base_model, 1});
  for (long step = 0; step < tc.steps; ++step) {
    const Dataset batch = tc.minibatch > 0 ? sample_minibatch(data, tc.minibatch, rng) : data;
    Tape tape;
    Var p = tape.variable(theta);
    Var loss = loss_fn(p, arch, batch);
    tape.backward(loss);
    stepper.tick();
    stepper.update(0, theta, p.grad().col(0));
  }
  return ParamVector(init.layout, std::move(theta));
}

/// MSE pretraining of the base regressor on the task's train split.
inline ParamVector train_base_regressor(const RegressionTask& task, const TrainConfig& tc, std::uint64_t seed,
                                        const Arch& arch = regression_base_arch()) {
  Rng rng = make_rng({seed, stream::base_model});
  return train_supervised(init_mlp(arch, rng), arch, task.train, tc, seed, mse_loss);
}

inline double mse(const ParamVector& params, const Arch& arch, const Dataset& d) {
  const Mat f = forward_mlp(params, arch, d.x);
  return (f.col(0) - d.y).squaredNorm() / static_cast<double>(d.size());
}

/// Cross-entropy pretraining of a dense classifier on clean images.
inline ParamVector train_base_classifier(const Dataset& clean, const Arch& arch, const TrainConfig& tc,
                                         std::uint64_t seed) {
  Rng rng = make_rng({seed, stream::base_model});
  return train_supervised(init_mlp(arch, rng), arch, clean, tc, seed, cross_entropy_loss);
}

inline double accuracy(const ParamVector& params, const Arch& arch, const Dataset& d) {
  const Mat logits = forward_mlp(params, arch, d.x);
  long hit = 0;
  for (long i = 0; i < d.size(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    if (best == static_cast<long>(d.y(i))) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(d.size());
}

// --- IDX ingestion -------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot open '" + p.string() + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& file) {
  if (off + 4 > b.size()) throw ParseError(file + ": truncated at offset " + std::to_string(off));
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

}  // namespace detail

/// Images as rows of x (pixels scaled to [0, 1]) and labels in y.
struct ImageSet {
  Dataset data;
  long rows = 0;
  long cols = 0;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline ImageSet parse_idx(const std::vector<unsigned char>& images, const std::vector<unsigned char>& labels) {
  const std::uint32_t im_magic = detail::be32(images, 0, "images");
  if (im_magic != kIdxImagesMagic) throw ParseError("images: bad magic at offset 0");
  const std::uint32_t lb_magic = detail::be32(labels, 0, "labels");
  if (lb_magic != kIdxLabelsMagic) throw ParseError("labels: bad magic at offset 0");
  const long n = detail::be32(images, 4, "images");
  const long rows = detail::be32(images, 8, "images");
  const long cols = detail::be32(images, 12, "images");
  const long n_labels = detail::be32(labels, 4, "labels");
  if (n != n_labels) {
    throw ParseError("image/label count mismatch: " + std::to_string(n) + " images, " + std::to_string(n_labels) +
                     " labels");
  }
  const std::size_t pixels = static_cast<std::size_t>(rows * cols);
  if (images.size() < 16 + static_cast<std::size_t>(n) * pixels) {
    throw ParseError("images: truncated at offset " + std::to_string(images.size()));
  }
  if (labels.size() < 8 + static_cast<std::size_t>(n)) {
    throw ParseError("labels: truncated at offset " + std::to_string(labels.size()));
  }
  ImageSet out;
  out.rows = rows;
  out.cols = cols;
  out.data.x.resize(n, rows * cols);
  out.data.y.resize(n);
  for (long i = 0; i < n; ++i) {
    const unsigned char* px = images.data() + 16 + static_cast<std::size_t>(i) * pixels;
    for (std::size_t k = 0; k < pixels; ++k) out.data.x(i, static_cast<long>(k)) = px[k] / 255.0;
    out.data.y(i) = labels[8 + static_cast<std::size_t>(i)];
  }
  return out;
}

inline ImageSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  return parse_idx(detail::read_file(images_path), detail::read_file(labels_path));
}

/// Block-average downsampling by an integer factor.
inline ImageSet downsample(const ImageSet& in, long factor) {
  if (factor < 1 || in.rows % factor != 0 || in.cols % factor != 0) {
    throw DomainError("downsample: factor must divide the image size");
  }
  if (factor == 1) return in;
  ImageSet out;
  out.rows = in.rows / factor;
  out.cols = in.cols / factor;
  out.data.y = in.data.y;
  out.data.x = Mat::Zero(in.data.size(), out.rows * out.cols);
  const double w = 1.0 / static_cast<double>(factor * factor);
  for (long i = 0; i < in.data.size(); ++i) {
    for (long r = 0; r < in.rows; ++r) {
      for (long c = 0; c < in.cols; ++c) {
        out.data.x(i, (r / factor) * out.cols + c / factor) += w * in.data.x(i, r * in.cols + c);
      }
    }
  }
  return out;
}

// --- Synthetic digits -------------------------------------------------------------

/// Seven-segment digits with random placement, scale, slant, stroke width and
/// intensity, rendered anti-aliased on a side x side canvas in [0, 1].
/// Several digit pairs differ by a single segment, so heavy corruption leaves
/// a genuinely ambiguous task.
template <class R>
Eigen::RowVectorXd render_digit(int digit, long side, R& rng) {
  // Segments a..g as endpoints on the unit glyph box (x right, y down).
  static constexpr std::array<std::array<double, 4>, 7> kSegments{{
      {0.0, 0.0, 1.0, 0.0},  // a: top
      {1.0, 0.0, 1.0, 0.5},  // b: upper right
      {1.0, 0.5, 1.0, 1.0},  // c: lower right
      {0.0, 1.0, 1.0, 1.0},  // d: bottom
      {0.0, 0.5, 0.0, 1.0},  // e: lower left
      {0.0, 0.0, 0.0, 0.5},  // f: upper left
      {0.0, 0.5, 1.0, 0.5},  // g: middle
  }};
  static constexpr std::array<unsigned, 10> kMask{0x3F, 0x06, 0x5B, 0x4F, 0x66, 0x6D, 0x7D, 0x07, 0x7F, 0x6F};
  if (digit < 0 || digit > 9) throw DomainError("render_digit: digit must be in 0..9");

  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double s = static_cast<double>(side);
  const double height = s * (0.55 + 0.15 * u(rng));
  const double width = height * (0.45 + 0.15 * u(rng));
  const double cx = 0.5 * s + s * 0.08 * (u(rng) - 0.5);
  const double cy = 0.5 * s + s * 0.08 * (u(rng) - 0.5);
  const double slant = 0.25 * (u(rng) - 0.3);
  const double stroke = s * (0.05 + 0.03 * u(rng));
  const double ink = 0.75 + 0.25 * u(rng);

  std::vector<std::array<double, 4>> segs;
  for (std::size_t k = 0; k < kSegments.size(); ++k) {
    if (!(kMask[static_cast<std::size_t>(digit)] >> k & 1U)) continue;
    auto [x0, y0, x1, y1] = kSegments[k];
    const auto map = [&](double gx, double gy, double& px, double& py) {
      py = cy + (gy - 0.5) * height;
      px = cx + (gx - 0.5) * width - slant * (gy - 0.5) * height;
    };
    std::array<double, 4> seg{};
    map(x0, y0, seg[0], seg[1]);
    map(x1, y1, seg[2], seg[3]);
    segs.push_back(seg);
  }

  Eigen::RowVectorXd img = Eigen::RowVectorXd::Zero(side * side);
  for (long r = 0; r < side; ++r) {
    for (long c = 0; c < side; ++c) {
      const double px = static_cast<double>(c) + 0.5;
      const double py = static_cast<double>(r) + 0.5;
      double dist = kInf;
      for (const auto& sg : segs) {
        const double dx = sg[2] - sg[0];
        const double dy = sg[3] - sg[1];
        const double len2 = dx * dx + dy * dy;
        const double t = len2 > 0.0 ? std::clamp(((px - sg[0]) * dx + (py - sg[1]) * dy) / len2, 0.0, 1.0) : 0.0;
        dist = std::min(dist, std::hypot(px - sg[0] - t * dx, py - sg[1] - t * dy));
      }
      img(r * side + c) = ink * std::clamp(stroke - dist + 0.5, 0.0, 1.0);
    }
  }
  return img;
}

/// n synthetic digits with uniformly drawn labels.
inline ImageSet synthetic_digits(long n, long side, std::uint64_t seed) {
  if (n < 0 || side < 4) throw DomainError("synthetic_digits: need n >= 0 and side >= 4");
  ImageSet out;
  out.rows = side;
  out.cols = side;
  out.data.x.resize(n, side * side);
  out.data.y.resize(n);
  for (long i = 0; i < n; ++i) {
    Rng rng = make_rng({seed, stream::data, 7, static_cast<std::uint64_t>(i)});
    const int digit = static_cast<int>(rng() % 10);
    out.data.y(i) = digit;
    out.data.x.row(i) = render_digit(digit, side, rng);
  }
  return out;
}

// --- Corruption ---------------------------------------------------------------------

/// Rotation about the image centre with bilinear interpolation and zero fill.
inline Eigen::RowVectorXd rotate_image(const Eigen::RowVectorXd& img, long rows, long cols, double radians) {
  Eigen::RowVectorXd out = Eigen::RowVectorXd::Zero(rows * cols);
  const double cr = 0.5 * static_cast<double>(rows - 1);
  const double cc = 0.5 * static_cast<double>(cols - 1);
  const double cs = std::cos(radians);
  const double sn = std::sin(radians);
  const auto at = [&](long r, long c) { return (r < 0 || r >= rows || c < 0 || c >= cols) ? 0.0 : img(r * cols + c); };
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      // Inverse map: sample the source at the output pixel rotated by -angle.
      const double dr = static_cast<double>(r) - cr;
      const double dc = static_cast<double>(c) - cc;
      const double sr = cr + cs * dr - sn * dc;
      const double sc = cc + sn * dr + cs * dc;
      const double fr = std::floor(sr);
      const double fc = std::floor(sc);
      const double wr = sr - fr;
      const double wc = sc - fc;
      const long r0 = static_cast<long>(fr);
      const long c0 = static_cast<long>(fc);
      out(r * cols + c) = (1 - wr) * (1 - wc) * at(r0, c0) + (1 - wr) * wc * at(r0, c0 + 1) +
                          wr * (1 - wc) * at(r0 + 1, c0) + wr * wc * at(r0 + 1, c0 + 1);
    }
  }
  return out;
}

struct CorruptionConfig {
  double max_degrees = 30.0;
  double noise_std = 1.3;
};

/// Random rotation in [-max_degrees, max_degrees] followed by unclipped
/// Gaussian pixel noise. Image i uses a stream keyed by (seed, i).
inline ImageSet corrupt(const ImageSet& in, std::uint64_t seed, const CorruptionConfig& cc = {}) {
  ImageSet out = in;
  for (long i = 0; i < in.data.size(); ++i) {
    Rng rng = make_rng({seed, stream::corruption, static_cast<std::uint64_t>(i)});
    std::uniform_real_distribution<double> ang(-cc.max_degrees, cc.max_degrees);
    const double radians = ang(rng) * std::numbers::pi / 180.0;
    Eigen::RowVectorXd img = rotate_image(in.data.x.row(i), in.rows, in.cols, radians);
    if (cc.noise_std > 0.0) img += cc.noise_std * standard_normal(rng, img.size()).transpose();
    out.data.x.row(i) = img;
  }
  return out;
}

// --- Classification task ---------------------------------------------------------------

struct ClassificationSource {
  std::string train_images;  ///< IDX paths; empty selects the synthetic generator
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  long side = 28;            ///< synthetic image side, or the IDX side after downsampling
  long synthetic_seed = 0;   ///< fixed pool of synthetic digits shared by all runs
  CorruptionConfig corruption;

  bool synthetic() const { return train_images.empty(); }
};

struct ClassificationTask {
  Dataset train;  ///< clean
  Dataset cal;    ///< corrupted
  Dataset test;   ///< corrupted
  long side = 0;
};

namespace detail {

inline ImageSet idx_at_side(const std::string& images, const std::string& labels, long side) {
  ImageSet s = load_idx(images, labels);
  if (s.rows != s.cols || s.rows % side != 0) throw DomainError("classification: side must divide the IDX image side");
  return downsample(s, s.rows / side);
}

}  // namespace detail

/// Clean training images plus corrupted calibration and test images. The
/// calibration/test pool is fixed; its split and corruption vary with seed.
inline ClassificationTask make_classification_task(const ClassificationSource& src, long n_train, long n_cal,
                                                   long n_test, std::uint64_t seed) {
  if (n_train < 1 || n_cal < 1 || n_test < 1) throw DomainError("classification: sizes must be >= 1");
  ImageSet train;
  ImageSet pool;
  const auto pool_seed = static_cast<std::uint64_t>(src.synthetic_seed);
  if (src.synthetic()) {
    train = synthetic_digits(n_train, src.side, stream_key({pool_seed, 1}));
    pool = synthetic_digits(n_cal + n_test, src.side, stream_key({pool_seed, 2}));
  } else {
    train = detail::idx_at_side(src.train_images, src.train_labels, src.side);
    pool = detail::idx_at_side(src.test_images, src.test_labels, src.side);
    if (train.data.size() < n_train || pool.data.size() < n_cal + n_test) {
      throw DomainError("classification: IDX files hold too few images for the requested sizes");
    }
    train.data = train.data.slice(0, n_train);
  }
  Rng rng = make_rng({seed, stream::split});
  const SplitData parts = random_split(pool.data, 1.0, rng);  // shuffled copy
  ImageSet cal{parts.first.slice(0, n_cal), pool.rows, pool.cols};
  ImageSet test{parts.first.slice(n_cal, n_test), pool.rows, pool.cols};
  ClassificationTask t;
  t.side = pool.rows;
  t.train = std::move(train.data);
  t.cal = corrupt(cal, stream_key({seed, 1}), src.corruption).data;
  t.test = corrupt(test, stream_key({seed, 2}), src.corruption).data;
  return t;
}

// --- Binary cache ----------------------------------------------------------------------
//
// Format: 8-byte magic, uint32 version, int64 rows, int64 cols, then x
// (row-major float64) and y (float64). Parameter files store one column.

inline constexpr char kDatasetMagic[8] = {'P', 'C', 'D', 'A', 'T', 'A', '\0', '\0'};
inline constexpr std::uint32_t kCacheVersion = 1;

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open '" + tmp.string() + "' for writing");
    os.write(kDatasetMagic, sizeof(kDatasetMagic));
    const std::uint32_t version = kCacheVersion;
    const std::int64_t rows = d.x.rows();
    const std::int64_t cols = d.x.cols();
    os.write(reinterpret_cast<const char*>(&version), sizeof(version));
    os.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
    os.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> xr = d.x;
    os.write(reinterpret_cast<const char*>(xr.data()), static_cast<std::streamsize>(xr.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(d.y.data()), static_cast<std::streamsize>(d.y.size() * sizeof(double)));
    if (!os) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open dataset cache '" + path.string() + "'");
  char magic[8];
  detail::read_exact(is, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kDatasetMagic, sizeof(magic)) != 0) throw ParseError("not a dataset cache (bad magic)");
  std::uint32_t version = 0;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  detail::read_exact(is, reinterpret_cast<char*>(&version), sizeof(version), "version");
  if (version != kCacheVersion) throw ParseError("unsupported dataset cache version");
  detail::read_exact(is, reinterpret_cast<char*>(&rows), sizeof(rows), "rows");
  detail::read_exact(is, reinterpret_cast<char*>(&cols), sizeof(cols), "cols");
  if (rows < 0 || cols < 0 || rows * cols > (1LL << 32)) throw ParseError("dataset cache: implausible shape");
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> xr(rows, cols);
  Dataset d;
  d.y.resize(rows);
  detail::read_exact(is, reinterpret_cast<char*>(xr.data()), static_cast<std::size_t>(rows * cols) * sizeof(double),
                     "x");
  detail::read_exact(is, reinterpret_cast<char*>(d.y.data()), static_cast<std::size_t>(rows) * sizeof(double), "y");
  d.x = xr;
  return d;
}

inline void save_params(const ParamVector& p, const std::filesystem::path& path) {
  save_dataset(Dataset{Mat(p.values), Vec::Zero(p.size())}, path);
}

inline ParamVector load_params(const Arch& arch, const std::filesystem::path& path) {
  Dataset d = load_dataset(path);
  auto layout = arch.layout();
  if (d.x.cols() != 1 || d.x.rows() != layout->size()) throw ParseError("parameter cache does not match architecture");
  return ParamVector(std::move(layout), d.x.col(0));
}

/// Returns the cached value at `path` or computes, stores and returns it.
/// An empty path disables caching.
template <class T, class Load, class Save, class Make>
T cached(const std::filesystem::path& path, Load load, Save save, Make make) {
  if (!path.empty() && std::filesystem::exists(path)) {
    try {
      return load(path);
    } catch (const ParseError&) {
      // stale or truncated entry: rebuild it
    }
  }
  T value = make();
  if (!path.empty()) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    save(value, path);
  }
  return value;
}

}  // namespace pacconf
