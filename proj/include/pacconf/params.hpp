#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pacconf/error.hpp"

namespace pacconf {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// One named (rows x cols) block of a flat parameter vector.
struct Segment {
  std::string name;
  long rows = 0;
  long cols = 0;
  long offset = 0;
  long fan_in = 1;  ///< fan-in of the layer the block belongs to

  long size() const { return rows * cols; }
  bool operator==(const Segment&) const = default;
};

/// Ordered, immutable description of how a flat vector splits into blocks.
class Layout {
 public:
  struct Builder {
    std::vector<Segment> segments;
    long total = 0;

    Builder& add(std::string name, long rows, long cols, long fan_in) {
      if (rows <= 0 || cols <= 0) throw ShapeError("Layout: segment '" + name + "' has empty shape");
      segments.push_back(Segment{std::move(name), rows, cols, total, fan_in});
      total += rows * cols;
      return *this;
    }
    std::shared_ptr<const Layout> build() { return std::shared_ptr<const Layout>(new Layout(std::move(segments), total)); }
  };

  const std::vector<Segment>& segments() const { return segments_; }
  long size() const { return total_; }

  const Segment& segment(const std::string& name) const {
    for (const auto& s : segments_) {
      if (s.name == name) return s;
    }
    throw ShapeError("Layout: no segment named '" + name + "'");
  }

  bool operator==(const Layout& other) const { return segments_ == other.segments_; }

 private:
  Layout(std::vector<Segment> segments, long total) : segments_(std::move(segments)), total_(total) {}

  std::vector<Segment> segments_;
  long total_ = 0;
};

using LayoutPtr = std::shared_ptr<const Layout>;

inline bool same_layout(const LayoutPtr& a, const LayoutPtr& b) { return a == b || (a && b && *a == *b); }

/// Flat real parameter vector tagged with its layout.
struct ParamVector {
  LayoutPtr layout;
  Vec values;

  ParamVector() = default;
  ParamVector(LayoutPtr l, Vec v) : layout(std::move(l)), values(std::move(v)) {
    if (!layout) throw ShapeError("ParamVector: missing layout");
    if (values.size() != layout->size()) {
      throw ShapeError("ParamVector: " + std::to_string(values.size()) + " values for a layout of size " +
                       std::to_string(layout->size()));
    }
  }
  static ParamVector zeros(LayoutPtr l) {
    const long n = l ? l->size() : 0;
    return ParamVector(std::move(l), Vec::Zero(n));
  }

  long size() const { return values.size(); }

  /// Copy of one block as a matrix.
  Mat block(const std::string& name) const {
    const auto& s = layout->segment(name);
    return Eigen::Map<const Mat>(values.data() + s.offset, s.rows, s.cols);
  }
};

/// Diagonal Gaussian N(mu, diag(sigma^2)) with sigma = exp(log_sigma).
struct DiagGaussian {
  ParamVector mu;
  ParamVector log_sigma;

  DiagGaussian() = default;
  DiagGaussian(ParamVector m, ParamVector ls) : mu(std::move(m)), log_sigma(std::move(ls)) {
    if (!same_layout(mu.layout, log_sigma.layout) || mu.size() != log_sigma.size()) {
      throw ShapeError("DiagGaussian: mean and log-sigma layouts differ");
    }
  }

  /// Per-block variance sigma^2 = scale / sqrt(fan_in) around `mean`.
  static DiagGaussian fan_in_scaled(const ParamVector& mean, double variance_scale) {
    Vec ls(mean.size());
    for (const auto& s : mean.layout->segments()) {
      const double var = variance_scale / std::sqrt(static_cast<double>(s.fan_in));
      ls.segment(s.offset, s.size()).setConstant(0.5 * std::log(var));
    }
    return DiagGaussian(mean, ParamVector(mean.layout, std::move(ls)));
  }

  long size() const { return mu.size(); }
  Vec sigma() const { return log_sigma.values.array().exp(); }
};

}  // namespace pacconf
