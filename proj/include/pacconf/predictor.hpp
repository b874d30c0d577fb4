#pragma once

// Randomized set-valued predictor: a bank of pre-sampled (theta, tau) pairs.
// Each test input is answered by one pair chosen from a stream keyed by
// (seed, point index), so evaluation is independent of point order.

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "pacconf/data.hpp"
#include "pacconf/error.hpp"
#include "pacconf/params.hpp"
#include "pacconf/rng.hpp"
#include "pacconf/score.hpp"
#include "pacconf/soft.hpp"

namespace pacconf {

struct CalibratedPair {
  ParamVector theta;
  double tau = 0.0;
};

/// Everything needed to recompute the coverage and efficiency certificates
/// of a predictor without the calibration data.
struct CertificateInputs {
  double alpha = 0.1;
  double delta = 0.05;
  double alpha_hat = 0.1;
  long n = 0;
  double kl_qp = 0.0;
  double empirical_efficiency = 0.0;  ///< scaled to [0, 1]
  double beta = 1.0;
  double l_tau = 1.0;
  double gamma = 0.05;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CertificateInputs, alpha, delta, alpha_hat, n, kl_qp, empirical_efficiency, beta,
                                   l_tau, gamma)

struct CalibratedPredictor {
  ScoreModel model;
  double alpha_hat = 0.1;
  std::vector<CalibratedPair> samples;
  std::optional<CertificateInputs> certificate;
};

struct EvalMetrics {
  double coverage_rate = 0.0;
  double mean_efficiency = 0.0;  ///< mean set size (classification) or interval width (regression)
  long n_test = 0;
  long covered = 0;
};

/// Calibrates a single deterministic theta.
inline CalibratedPredictor single_predictor(const ScoreModel& model, const ParamVector& theta, const Dataset& data,
                                            double alpha_hat) {
  CalibratedPredictor p;
  p.model = model;
  p.alpha_hat = alpha_hat;
  p.samples.push_back({theta, calibrate(model, theta, data, alpha_hat)});
  return p;
}

/// Draws m parameter vectors from q and calibrates each on `data`.
inline CalibratedPredictor build_randomized_predictor(const DiagGaussian& q, const ScoreModel& model,
                                                      const Dataset& data, double alpha_hat, long m,
                                                      std::uint64_t seed) {
  if (m < 1) throw DomainError("build_randomized_predictor: m must be >= 1");
  if (!same_layout(q.mu.layout, model.theta_layout())) throw ShapeError("build_randomized_predictor: layout mismatch");
  CalibratedPredictor p;
  p.model = model;
  p.alpha_hat = alpha_hat;
  for (long i = 0; i < m; ++i) {
    Rng rng = make_rng({seed, stream::predictor, static_cast<std::uint64_t>(i)});
    ParamVector theta = reparam_sample(q, standard_normal(rng, q.size()));
    const double tau = calibrate(model, theta, data, alpha_hat);
    p.samples.push_back({std::move(theta), tau});
  }
  return p;
}

/// Index of the pair answering test point i.
inline std::size_t assigned_pair(std::uint64_t seed, long i, std::size_t m) {
  return keyed_index(stream_key({seed, stream::evaluation, static_cast<std::uint64_t>(i)}), m);
}

inline EvalMetrics evaluate(const CalibratedPredictor& pred, const Dataset& test, std::uint64_t seed) {
  if (test.empty()) throw DomainError("evaluate: empty test set");
  if (pred.samples.empty()) throw DomainError("evaluate: predictor has no samples");
  const std::size_t m = pred.samples.size();
  std::vector<std::vector<long>> groups(m);
  for (long i = 0; i < test.size(); ++i) groups[assigned_pair(seed, i, m)].push_back(i);

  EvalMetrics out;
  out.n_test = test.size();
  double total_eff = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    if (groups[k].empty()) continue;
    const Dataset part = test.subset(groups[k]);
    const auto& pair = pred.samples[k];
    const ScoreTable table = score_table(pred.model, pair.theta, part);
    for (long i = 0; i < part.size(); ++i) {
      const PredictionSet set = predict_set(table, i, pair.tau);
      if (table.calib(i) <= pair.tau) ++out.covered;
      total_eff += set.size();
    }
  }
  out.coverage_rate = static_cast<double>(out.covered) / static_cast<double>(out.n_test);
  out.mean_efficiency = total_eff / static_cast<double>(out.n_test);
  return out;
}

// --- Serialization -------------------------------------------------------
//
// Layout: 8-byte magic "PCPRED\0\0", uint32 format version, uint64 header
// length, UTF-8 JSON header, then raw little-endian float64 arrays: the base
// parameters followed by (tau, theta[0..d)) for every sample.

inline constexpr char kPredictorMagic[8] = {'P', 'C', 'P', 'R', 'E', 'D', '\0', '\0'};
inline constexpr std::uint32_t kPredictorVersion = 1;

namespace detail {

inline void write_doubles(std::ostream& os, const double* p, std::size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

inline void read_exact(std::istream& is, char* dst, std::size_t n, const std::string& what) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw ParseError("predictor file truncated while reading " + what);
}

}  // namespace detail

inline nlohmann::json predictor_header(const CalibratedPredictor& p) {
  nlohmann::json h;
  h["score_kind"] = to_string(p.model.kind);
  h["base_arch"] = p.model.base_arch;
  h["u_offset"] = p.model.u_offset;
  if (p.model.kind == ScoreKind::regression_scaled) h["aux_arch"] = p.model.aux_arch;
  h["alpha_hat"] = p.alpha_hat;
  h["num_samples"] = p.samples.size();
  h["base_param_count"] = p.model.base_params.size();
  h["theta_count"] = p.model.theta_layout()->size();
  if (p.certificate) h["certificate"] = *p.certificate;
  return h;
}

inline void save_predictor(const CalibratedPredictor& p, const std::filesystem::path& path) {
  const std::string header = predictor_header(p).dump();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open '" + tmp.string() + "' for writing");
    os.write(kPredictorMagic, sizeof(kPredictorMagic));
    const std::uint32_t version = kPredictorVersion;
    os.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t len = header.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::write_doubles(os, p.model.base_params.values.data(), static_cast<std::size_t>(p.model.base_params.size()));
    for (const auto& s : p.samples) {
      detail::write_doubles(os, &s.tau, 1);
      detail::write_doubles(os, s.theta.values.data(), static_cast<std::size_t>(s.theta.size()));
    }
    if (!os) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline CalibratedPredictor load_predictor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open predictor file '" + path.string() + "'");
  char magic[8];
  detail::read_exact(is, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kPredictorMagic, sizeof(magic)) != 0) throw ParseError("not a predictor file (bad magic)");
  std::uint32_t version = 0;
  detail::read_exact(is, reinterpret_cast<char*>(&version), sizeof(version), "version");
  if (version != kPredictorVersion) {
    throw ParseError("unsupported predictor format version " + std::to_string(version));
  }
  std::uint64_t len = 0;
  detail::read_exact(is, reinterpret_cast<char*>(&len), sizeof(len), "header length");
  if (len > (1ULL << 30)) throw ParseError("predictor header length is implausible");
  std::string text(len, '\0');
  detail::read_exact(is, text.data(), len, "header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("predictor header: ") + e.what());
  }

  const Arch base_arch = h.at("base_arch").get<Arch>();
  const long base_count = h.at("base_param_count").get<long>();
  if (base_count != base_arch.layout()->size()) throw ParseError("predictor header: base parameter count mismatch");
  Vec base(base_count);
  detail::read_exact(is, reinterpret_cast<char*>(base.data()), static_cast<std::size_t>(base_count) * sizeof(double),
                     "base parameters");
  ParamVector base_params(base_arch.layout(), std::move(base));

  CalibratedPredictor p;
  switch (score_kind_from_string(h.at("score_kind").get<std::string>())) {
    case ScoreKind::regression_residual: p.model = ScoreModel::regression_residual(base_arch, base_params); break;
    case ScoreKind::regression_scaled:
      p.model = ScoreModel::regression_scaled(base_arch, base_params, h.at("aux_arch").get<Arch>());
      break;
    case ScoreKind::classification_logprob: p.model = ScoreModel::classification(base_arch, base_params); break;
  }
  p.model.u_offset = h.value("u_offset", 0.6);
  p.alpha_hat = h.at("alpha_hat").get<double>();
  if (h.contains("certificate")) p.certificate = h.at("certificate").get<CertificateInputs>();
  const long d = h.at("theta_count").get<long>();
  if (d != p.model.theta_layout()->size()) throw ParseError("predictor header: theta count mismatch");
  const auto m = h.at("num_samples").get<std::size_t>();
  for (std::size_t i = 0; i < m; ++i) {
    CalibratedPair pair;
    detail::read_exact(is, reinterpret_cast<char*>(&pair.tau), sizeof(double), "threshold");
    Vec theta(d);
    detail::read_exact(is, reinterpret_cast<char*>(theta.data()), static_cast<std::size_t>(d) * sizeof(double),
                       "theta");
    pair.theta = ParamVector(p.model.theta_layout(), std::move(theta));
    p.samples.push_back(std::move(pair));
  }
  return p;
}

}  // namespace pacconf
