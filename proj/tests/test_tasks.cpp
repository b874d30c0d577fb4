#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <vector>

#include "gradcheck.hpp"
#include "pacconf/tasks.hpp"

using namespace pacconf;
namespace fs = std::filesystem;

// ------------------------------------------------------------------ regression

TEST(RegressionTask, NoiseFreeTargetsFollowTheMean) {
  Rng rng(3);
  const Dataset d = sample_regression(200, rng, RegressionNoise{0.0, 0.0});
  for (long i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d.y(i), std::cos(5.0 * d.x(i, 0)));
    EXPECT_GE(d.x(i, 0), -1.0);
    EXPECT_LE(d.x(i, 0), 1.0);
  }
}

TEST(RegressionTask, NoiseGrowsWithX) {
  Rng rng(4);
  auto variance = [](const Vec& y) { return (y.array() - y.mean()).square().sum() / static_cast<double>(y.size() - 1); };
  const double right = variance(sample_regression_at(1.0, 100000, rng));
  const double left = variance(sample_regression_at(-1.0, 100000, rng));
  EXPECT_GT(right, left);
  // Uniform(-1/2, 1/2) noise has variance 1/12.
  const double s = 1.0 / (1.0 + std::exp(-5.0));
  EXPECT_NEAR(right, (0.09 + 3.24 * s * s) / 12.0, 0.01);
}

TEST(RegressionTask, DeterministicUnderSeed) {
  const auto a = gen_regression(50, 60, 70, 9);
  const auto b = gen_regression(50, 60, 70, 9);
  const auto c = gen_regression(50, 60, 70, 10);
  EXPECT_EQ(a.train.x, b.train.x);
  EXPECT_EQ(a.cal.y, b.cal.y);
  EXPECT_EQ(a.test.y, b.test.y);
  EXPECT_NE(a.cal.y, c.cal.y);
  EXPECT_EQ(a.train.size(), 50);
  EXPECT_EQ(a.cal.size(), 60);
  EXPECT_EQ(a.test.size(), 70);
  EXPECT_THROW(gen_regression(0, 1, 1, 1), DomainError);
}

TEST(BaseRegressor, TrainingFitsTheMean) {
  const auto task = gen_regression(100, 10, 2000, 1);
  const Arch arch = regression_base_arch();
  TrainConfig tc;
  const ParamVector trained = train_base_regressor(task, tc, 1);
  TrainConfig none = tc;
  none.steps = 0;
  const ParamVector initial = train_base_regressor(task, none, 1);
  EXPECT_LT(mse(trained, arch, task.train), mse(initial, arch, task.train));
  const Mat at_zero = forward_mlp(trained, arch, Mat::Zero(1, 1));
  EXPECT_NEAR(at_zero(0, 0), 1.0, 0.3);
  // The noise alone costs about 0.12 in test MSE.
  EXPECT_LT(mse(trained, arch, task.test), 0.3);
}

TEST(BaseRegressor, MseGradientMatchesFiniteDifferences) {
  const auto task = gen_regression(16, 1, 1, 2);
  const Arch arch{{1, 12, 12, 1}, Activation::tanh};
  Rng rng(5);
  const ParamVector theta = init_mlp(arch, rng);
  auto f = [&](Tape&, const std::vector<Var>& v) { return mse_loss(v[0], arch, task.train); };
  EXPECT_LT(gradcheck::check(f, {theta.values}, 1e-5).rel_error, 1e-4);

  Dataset labeled{Mat(6, 3), Vec(6)};
  labeled.x = gradcheck::uniform(6, 3, -1, 1, 8);
  labeled.y << 0, 1, 2, 3, 1, 0;
  const Arch cls{{3, 5, 4}, Activation::tanh};
  const ParamVector ctheta = init_mlp(cls, rng);
  auto ce = [&](Tape&, const std::vector<Var>& v) { return cross_entropy_loss(v[0], cls, labeled); };
  EXPECT_LT(gradcheck::check(ce, {ctheta.values}, 1e-5).rel_error, 1e-4);
}

// ------------------------------------------------------------------------ IDX

namespace {

void put32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xFF));
}

std::vector<unsigned char> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                                      const std::vector<unsigned char>& pixels) {
  std::vector<unsigned char> b;
  put32(b, 0x00000803);
  put32(b, n);
  put32(b, rows);
  put32(b, cols);
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

std::vector<unsigned char> idx_labels(const std::vector<unsigned char>& labels) {
  std::vector<unsigned char> b;
  put32(b, 0x00000801);
  put32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

template <class F>
std::string error_of(F f) {
  try {
    f();
  } catch (const ParseError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Idx, ParsesHandBuiltFixture) {
  const auto images = idx_images(2, 2, 2, {0, 255, 51, 102, 255, 0, 0, 204});
  const auto labels = idx_labels({7, 3});
  const ImageSet s = parse_idx(images, labels);
  EXPECT_EQ(s.rows, 2);
  EXPECT_EQ(s.cols, 2);
  ASSERT_EQ(s.data.size(), 2);
  EXPECT_DOUBLE_EQ(s.data.x(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(s.data.x(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(s.data.x(0, 2), 0.2);
  EXPECT_DOUBLE_EQ(s.data.x(0, 3), 0.4);
  EXPECT_DOUBLE_EQ(s.data.x(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(s.data.x(1, 3), 0.8);
  EXPECT_EQ(s.data.y(0), 7.0);
  EXPECT_EQ(s.data.y(1), 3.0);

  // Same bytes through the file loader.
  const fs::path dir = fs::temp_directory_path() / "pacconf_idx_test";
  fs::create_directories(dir);
  {
    std::ofstream(dir / "img", std::ios::binary).write(reinterpret_cast<const char*>(images.data()),
                                                      static_cast<std::streamsize>(images.size()));
    std::ofstream(dir / "lbl", std::ios::binary).write(reinterpret_cast<const char*>(labels.data()),
                                                      static_cast<std::streamsize>(labels.size()));
  }
  EXPECT_EQ(load_idx(dir / "img", dir / "lbl").data.x, s.data.x);
}

TEST(Idx, BadMagicNamesTheOffset) {
  auto images = idx_images(1, 1, 1, {9});
  images[3] = 0x04;
  const std::string msg = error_of([&] { parse_idx(images, idx_labels({1})); });
  EXPECT_NE(msg.find("magic"), std::string::npos);
  EXPECT_NE(msg.find("offset 0"), std::string::npos);
}

TEST(Idx, CountMismatchAndTruncation) {
  const auto images = idx_images(2, 2, 2, {1, 2, 3, 4, 5, 6, 7, 8});
  const std::string msg = error_of([&] { parse_idx(images, idx_labels({1, 2, 3})); });
  EXPECT_NE(msg.find("count mismatch"), std::string::npos);
  const auto short_images = idx_images(2, 2, 2, {1, 2, 3, 4, 5});
  EXPECT_NE(error_of([&] { parse_idx(short_images, idx_labels({1, 2})); }).find("truncated"), std::string::npos);
  EXPECT_THROW(parse_idx({0, 0}, idx_labels({1})), ParseError);
}

TEST(Idx, DownsampleAveragesBlocks) {
  ImageSet s;
  s.rows = 2;
  s.cols = 2;
  s.data = Dataset{Mat(1, 4), Vec::Constant(1, 5.0)};
  s.data.x << 0.0, 0.4, 0.8, 1.2;
  const ImageSet d = downsample(s, 2);
  EXPECT_EQ(d.rows, 1);
  EXPECT_NEAR(d.data.x(0, 0), 0.6, 1e-15);
  EXPECT_THROW(downsample(s, 3), DomainError);
}

// ------------------------------------------------------------------ corruption

TEST(Corruption, ZeroAngleIsIdentity) {
  const ImageSet digits = synthetic_digits(5, 16, 1);
  for (long i = 0; i < 5; ++i) {
    const Eigen::RowVectorXd out = rotate_image(digits.data.x.row(i), 16, 16, 0.0);
    EXPECT_LT((out - digits.data.x.row(i)).cwiseAbs().maxCoeff(), 1e-6);
  }
  const ImageSet same = corrupt(digits, 3, CorruptionConfig{0.0, 0.0});
  EXPECT_LT((same.data.x - digits.data.x).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Corruption, NoiseHasTheConfiguredSpread) {
  ImageSet blank;
  blank.rows = 32;
  blank.cols = 32;
  blank.data = Dataset{Mat::Zero(1000, 1024), Vec::Zero(1000)};
  const ImageSet noisy = corrupt(blank, 5);
  const double n = static_cast<double>(noisy.data.x.size());
  const double mean = noisy.data.x.sum() / n;
  const double sd = std::sqrt((noisy.data.x.array() - mean).square().sum() / (n - 1.0));
  EXPECT_NEAR(sd, 1.3, 0.013);
  // Values are kept unclipped.
  EXPECT_LT(noisy.data.x.minCoeff(), -3.0);
}

TEST(Corruption, QuarterTurnMovesADotWhereGeometryPredicts) {
  const long side = 9;
  const double centre = 4.0;
  for (const auto& [r0, c0] : std::vector<std::pair<long, long>>{{1, 4}, {4, 7}, {2, 6}}) {
    Eigen::RowVectorXd img = Eigen::RowVectorXd::Zero(side * side);
    img(r0 * side + c0) = 1.0;
    for (double degrees : {90.0, 180.0, -90.0}) {
      const double t = degrees * std::numbers::pi / 180.0;
      const Eigen::RowVectorXd out = rotate_image(img, side, side, t);
      // Output offset is the source offset under the forward rotation.
      const double dr = static_cast<double>(r0) - centre;
      const double dc = static_cast<double>(c0) - centre;
      const long r1 = std::lround(centre + std::cos(t) * dr + std::sin(t) * dc);
      const long c1 = std::lround(centre - std::sin(t) * dr + std::cos(t) * dc);
      EXPECT_NEAR(out(r1 * side + c1), 1.0, 1e-9) << degrees << " deg from (" << r0 << "," << c0 << ")";
      EXPECT_NEAR(out.sum(), 1.0, 1e-9);
    }
  }
}

TEST(Corruption, DeterministicPerImage) {
  const ImageSet digits = synthetic_digits(6, 12, 2);
  const ImageSet a = corrupt(digits, 11);
  const ImageSet b = corrupt(digits, 11);
  EXPECT_EQ(a.data.x, b.data.x);
  // Image i depends only on (seed, i): a prefix corrupts identically.
  ImageSet head = digits;
  head.data = digits.data.slice(0, 3);
  EXPECT_EQ(corrupt(head, 11).data.x, a.data.x.topRows(3));
}

// --------------------------------------------------------------- classifier

TEST(SyntheticDigits, LabelsAndRange) {
  const ImageSet d = synthetic_digits(500, 14, 4);
  std::vector<int> counts(10, 0);
  for (long i = 0; i < d.data.size(); ++i) ++counts[static_cast<std::size_t>(d.data.y(i))];
  for (int c : counts) EXPECT_GT(c, 20);
  EXPECT_GE(d.data.x.minCoeff(), 0.0);
  EXPECT_LE(d.data.x.maxCoeff(), 1.0);
  EXPECT_EQ(synthetic_digits(3, 14, 4).data.x, d.data.x.topRows(3));
}

TEST(BaseClassifier, LearnsCleanDigits) {
  const ImageSet train = synthetic_digits(7000, 14, 21);
  const ImageSet held = synthetic_digits(1000, 14, 22);
  const Arch arch{{196, 32, 10}, Activation::relu};
  TrainConfig tc;
  tc.steps = 600;
  tc.learning_rate = 3e-3;
  tc.minibatch = 128;
  const ParamVector theta = train_base_classifier(train.data, arch, tc, 1);
  EXPECT_GT(accuracy(theta, arch, train.data), 0.9);
  EXPECT_GT(accuracy(theta, arch, held.data), 0.9);

  Rng rng(1);
  const double chance = accuracy(init_mlp(arch, rng), arch, held.data);
  EXPECT_LT(chance, 0.25);

  Arch with_head = arch;
  with_head.head = Head::log_softmax;
  const Mat logp = forward_mlp(theta, with_head, held.data.x.topRows(20));
  for (long i = 0; i < 20; ++i) EXPECT_NEAR(logp.row(i).array().exp().sum(), 1.0, 1e-12);
}

TEST(ClassificationTask, SplitsAreDisjointAndSeeded) {
  ClassificationSource src;
  src.side = 12;
  const auto a = make_classification_task(src, 50, 40, 60, 1);
  const auto b = make_classification_task(src, 50, 40, 60, 1);
  const auto c = make_classification_task(src, 50, 40, 60, 2);
  EXPECT_EQ(a.cal.x, b.cal.x);
  EXPECT_NE(a.cal.x, c.cal.x);
  EXPECT_EQ(a.train.x, c.train.x);  // clean training pool does not depend on the run seed
  EXPECT_EQ(a.cal.size(), 40);
  EXPECT_EQ(a.test.size(), 60);
  EXPECT_EQ(a.side, 12);
}

// --------------------------------------------------------------------- cache

TEST(Cache, RoundTripsDatasetsAndParameters) {
  const fs::path dir = fs::temp_directory_path() / "pacconf_cache_test";
  fs::remove_all(dir);
  const auto task = gen_regression(30, 1, 1, 3);
  save_dataset(task.train, dir / "d.bin");
  const Dataset back = load_dataset(dir / "d.bin");
  EXPECT_EQ(back.x, task.train.x);
  EXPECT_EQ(back.y, task.train.y);

  const Arch arch{{1, 4, 1}};
  Rng rng(2);
  const ParamVector p = init_mlp(arch, rng);
  save_params(p, dir / "p.bin");
  EXPECT_EQ(load_params(arch, dir / "p.bin").values, p.values);
  EXPECT_THROW(load_params(Arch{{1, 5, 1}}, dir / "p.bin"), ParseError);

  int builds = 0;
  auto make = [&] {
    ++builds;
    return task.train;
  };
  const auto load = [](const fs::path& f) { return load_dataset(f); };
  const auto save = [](const Dataset& d, const fs::path& f) { save_dataset(d, f); };
  cached<Dataset>(dir / "c.bin", load, save, make);
  const Dataset again = cached<Dataset>(dir / "c.bin", load, save, make);
  EXPECT_EQ(builds, 1);
  EXPECT_EQ(again.y, task.train.y);

  // A truncated entry is rebuilt instead of trusted.
  fs::resize_file(dir / "c.bin", 20);
  cached<Dataset>(dir / "c.bin", load, save, make);
  EXPECT_EQ(builds, 2);
}
