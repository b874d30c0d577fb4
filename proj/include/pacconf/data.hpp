#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "pacconf/error.hpp"
#include "pacconf/params.hpp"

namespace pacconf {

/// Labeled points: one input per row of `x`. `y` holds the regression target
/// or the class index (stored as a real).
struct Dataset {
  Mat x;
  Vec y;

  long size() const { return x.rows(); }
  bool empty() const { return x.rows() == 0; }

  Dataset subset(std::span<const long> rows) const {
    Dataset out;
    out.x.resize(static_cast<long>(rows.size()), x.cols());
    out.y.resize(static_cast<long>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const long r = rows[i];
      if (r < 0 || r >= size()) throw ShapeError("Dataset::subset: row out of range");
      out.x.row(static_cast<long>(i)) = x.row(r);
      out.y(static_cast<long>(i)) = y(r);
    }
    return out;
  }

  Dataset slice(long begin, long count) const {
    if (begin < 0 || count < 0 || begin + count > size()) throw ShapeError("Dataset::slice: out of range");
    return Dataset{x.middleRows(begin, count), y.segment(begin, count)};
  }

  std::vector<long> labels() const {
    std::vector<long> out(static_cast<std::size_t>(y.size()));
    for (long i = 0; i < y.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<long>(y(i));
    return out;
  }
};

/// Disjoint (first, second) split; `first_fraction` of the rows go first.
struct SplitData {
  Dataset first;
  Dataset second;
};

template <class Rng>
SplitData random_split(const Dataset& d, double first_fraction, Rng& rng) {
  if (first_fraction < 0.0 || first_fraction > 1.0) throw DomainError("random_split: fraction must lie in [0, 1]");
  std::vector<long> idx(static_cast<std::size_t>(d.size()));
  std::iota(idx.begin(), idx.end(), 0L);
  // Fisher-Yates with an explicit draw so the permutation does not depend
  // on the standard library's shuffle implementation.
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  const auto n_first = static_cast<std::size_t>(std::llround(first_fraction * static_cast<double>(d.size())));
  std::span<const long> all(idx);
  return SplitData{d.subset(all.first(n_first)), d.subset(all.subspan(n_first))};
}

}  // namespace pacconf
