#pragma once

// Nonconformity scores, prediction sets and threshold calibration.

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "pacconf/data.hpp"
#include "pacconf/error.hpp"
#include "pacconf/nn.hpp"
#include "pacconf/numeric.hpp"
#include "pacconf/params.hpp"
#include "pacconf/soft.hpp"
#include "pacconf/tape.hpp"

namespace pacconf {

enum class ScoreKind {
  regression_residual,     ///< |f(x) - y|, no trainable parameters
  regression_scaled,       ///< |f(x) - y| / (1 + sigmoid(gate) u(x))
  classification_logprob,  ///< -log softmax f(x; theta)[y]
};

inline std::string to_string(ScoreKind k) {
  switch (k) {
    case ScoreKind::regression_residual: return "regression_residual";
    case ScoreKind::regression_scaled: return "regression_scaled";
    case ScoreKind::classification_logprob: return "classification_logprob";
  }
  return "";
}

inline ScoreKind score_kind_from_string(const std::string& s) {
  if (s == "regression_residual") return ScoreKind::regression_residual;
  if (s == "regression_scaled") return ScoreKind::regression_scaled;
  if (s == "classification_logprob") return ScoreKind::classification_logprob;
  throw ParseError("unknown score kind '" + s + "'");
}

/// Parametric nonconformity score s(x, y; theta).
///
/// Regression models keep the base predictor f frozen in `base_params`; the
/// trainable theta is the u-network plus a scalar gate. Classification models
/// train the whole network, whose pretrained weights sit in `base_params`.
struct ScoreModel {
  ScoreKind kind = ScoreKind::regression_residual;
  Arch base_arch;
  ParamVector base_params;
  Arch aux_arch;
  double u_offset = 0.6;

  static ScoreModel regression_residual(Arch base, ParamVector base_params) {
    ScoreModel m;
    m.kind = ScoreKind::regression_residual;
    m.base_arch = std::move(base);
    m.base_params = std::move(base_params);
    m.finalize();
    return m;
  }

  static ScoreModel regression_scaled(Arch base, ParamVector base_params, Arch u_arch) {
    ScoreModel m;
    m.kind = ScoreKind::regression_scaled;
    m.base_arch = std::move(base);
    m.base_params = std::move(base_params);
    m.aux_arch = std::move(u_arch);
    if (m.aux_arch.outputs() != 1 || m.aux_arch.inputs() != m.base_arch.inputs()) {
      throw ShapeError("regression_scaled: u-network must map the input to one output");
    }
    m.finalize();
    return m;
  }

  static ScoreModel classification(Arch arch, ParamVector params) {
    ScoreModel m;
    m.kind = ScoreKind::classification_logprob;
    arch.head = Head::log_softmax;
    m.base_arch = std::move(arch);
    m.base_params = std::move(params);
    m.finalize();
    return m;
  }

  bool is_classification() const { return kind == ScoreKind::classification_logprob; }
  long num_labels() const { return is_classification() ? base_arch.outputs() : 0; }

  /// Layout of the trainable parameter vector theta.
  const LayoutPtr& theta_layout() const { return theta_layout_; }

  /// Default theta: pretrained weights for classification, zeros otherwise.
  ParamVector default_theta() const {
    if (is_classification()) return base_params;
    return ParamVector::zeros(theta_layout_);
  }

  long u_param_count() const { return kind == ScoreKind::regression_scaled ? theta_layout_->size() - 1 : 0; }

 private:
  void finalize() {
    base_arch.validate();
    if (!same_layout(base_params.layout, base_arch.layout())) {
      throw ShapeError("ScoreModel: base parameters do not match the base architecture");
    }
    if (kind == ScoreKind::regression_scaled) {
      Layout::Builder b;
      const LayoutPtr aux = aux_arch.layout();
      for (const auto& s : aux->segments()) b.add(s.name, s.rows, s.cols, s.fan_in);
      b.add("gate", 1, 1, 1);
      theta_layout_ = b.build();
    } else if (kind == ScoreKind::classification_logprob) {
      theta_layout_ = base_params.layout;
    } else {
      theta_layout_ = Layout::Builder{}.build();
    }
  }

  LayoutPtr theta_layout_;
};

/// Differentiable scores of a batch under one theta.
struct ScoreVars {
  Var calib;       ///< (n x 1) score at the observed label
  Var all_labels;  ///< classification: (n x K) scores of every label
  Var radius;      ///< regression_scaled: (n x 1) 1 + sigmoid(gate) u(x)
};

/// Records the score computation for `batch` on the tape of `theta`.
inline ScoreVars score_vars(const ScoreModel& model, Var theta, const Dataset& batch) {
  Tape& tape = *theta.tape;
  if (theta.rows() != model.theta_layout()->size() || theta.cols() != 1) {
    throw ShapeError("score: theta layout does not match the score model");
  }
  ScoreVars out;
  if (model.is_classification()) {
    Var logp = forward_mlp(theta, model.base_arch, tape.constant(batch.x));
    out.all_labels = ad::scale(logp, -1.0);
    out.calib = ad::gather_rows(out.all_labels, batch.labels());
    return out;
  }
  const Mat f = forward_mlp(model.base_params, model.base_arch, batch.x);
  Var resid = tape.constant((f.col(0) - batch.y).cwiseAbs());
  if (model.kind == ScoreKind::regression_residual) {
    out.calib = resid;
    return out;
  }
  const long n_u = model.u_param_count();
  Var u_params = ad::slice(theta, 0, n_u, 1);
  Var gate = ad::slice(theta, n_u, 1, 1);
  Var ff = forward_mlp(u_params, model.aux_arch, tape.constant(batch.x));
  Var u = ad::add_scalar(ad::softplus(ad::add_scalar(ff, model.u_offset)), -1.0);
  Var g = ad::broadcast(ad::sigmoid(gate), batch.size(), 1);
  out.radius = ad::add_scalar(ad::mul(g, u), 1.0);
  out.calib = ad::div(resid, out.radius);
  return out;
}

/// Plain per-point quantities needed to build prediction sets.
struct ScoreTable {
  Vec calib;       ///< score at the observed label
  Mat all_labels;  ///< classification only
  Vec center;      ///< regression: f(x)
  Vec radius;      ///< regression: interval half-width per unit of tau
};

inline ScoreTable score_table(const ScoreModel& model, const ParamVector& theta, const Dataset& data,
                              long chunk = 4096) {
  if (!same_layout(theta.layout, model.theta_layout())) throw ShapeError("score: theta layout mismatch");
  ScoreTable t;
  const long n = data.size();
  t.calib.resize(n);
  if (model.is_classification()) t.all_labels.resize(n, model.num_labels());
  if (!model.is_classification()) {
    t.center.resize(n);
    t.radius.resize(n);
  }
  for (long begin = 0; begin < n; begin += chunk) {
    const long count = std::min(chunk, n - begin);
    const Dataset part = data.slice(begin, count);
    Tape tape;
    const ScoreVars sv = score_vars(model, tape.constant(theta.values), part);
    t.calib.segment(begin, count) = sv.calib.value().col(0);
    if (model.is_classification()) {
      t.all_labels.middleRows(begin, count) = sv.all_labels.value();
    } else {
      t.center.segment(begin, count) = forward_mlp(model.base_params, model.base_arch, part.x).col(0);
      if (model.kind == ScoreKind::regression_scaled) {
        t.radius.segment(begin, count) = sv.radius.value().col(0);
      } else {
        t.radius.segment(begin, count).setOnes();
      }
    }
  }
  return t;
}

/// Calibration scores s(x_i, y_i; theta).
inline Vec scores(const ScoreModel& model, const ParamVector& theta, const Dataset& data) {
  return score_table(model, theta, data).calib;
}

inline double score(const ScoreModel& model, const ParamVector& theta, const Eigen::RowVectorXd& x, double y) {
  Dataset d{Mat(x), Vec::Constant(1, y)};
  return scores(model, theta, d)(0);
}

/// C(x; tau) = {y : s(x, y) <= tau}: a label subset or a closed interval.
struct PredictionSet {
  bool is_interval = false;
  std::vector<long> labels;
  double lo = 0.0;
  double hi = 0.0;

  bool contains(double y) const {
    if (is_interval) return lo <= y && y <= hi;
    return std::find(labels.begin(), labels.end(), static_cast<long>(y)) != labels.end();
  }
  /// Label count or interval width.
  double size() const { return is_interval ? hi - lo : static_cast<double>(labels.size()); }
};

/// Prediction set of row `i` of a score table.
inline PredictionSet predict_set(const ScoreTable& t, long i, double tau) {
  PredictionSet out;
  if (t.all_labels.size() > 0) {
    for (long y = 0; y < t.all_labels.cols(); ++y) {
      if (t.all_labels(i, y) <= tau) out.labels.push_back(y);
    }
    return out;
  }
  if (tau < 0.0) throw DomainError("predict_set: regression threshold must be non-negative");
  out.is_interval = true;
  if (std::isinf(tau)) {
    out.lo = -kInf;
    out.hi = kInf;
    return out;
  }
  const double half = tau * t.radius(i);
  out.lo = t.center(i) - half;
  out.hi = t.center(i) + half;
  return out;
}

inline PredictionSet predict_set(const ScoreModel& model, const ParamVector& theta, const Eigen::RowVectorXd& x,
                                 double tau) {
  Dataset d{Mat(x), Vec::Zero(1)};
  return predict_set(score_table(model, theta, d), 0, tau);
}

/// Conformal threshold: the ceil((n+1)(1-alpha_hat))-th smallest score.
inline double calibrate(const ScoreModel& model, const ParamVector& theta, const Dataset& data, double alpha_hat) {
  if (data.empty()) throw DomainError("calibrate: empty calibration data");
  const Vec s = scores(model, theta, data);
  return hard_quantile_threshold(std::span<const double>(s.data(), static_cast<std::size_t>(s.size())), alpha_hat);
}

}  // namespace pacconf
