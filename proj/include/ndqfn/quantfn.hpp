#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ndqfn/common.hpp"

namespace ndqfn {

// Fixed support fractions p_0 < p_1 < ... < p_N, all strictly inside (0, 1).
// Storage is shared and immutable, so copies are cheap.
class QuantileGrid {
 public:
  static constexpr double kLowerEdge = 0.001;
  static constexpr double kUpperEdge = 0.999;

  // p_0 = 0.001, p_i = i/N for 0 < i < N, p_N = 0.999.
  explicit QuantileGrid(int segments = 32) {
    if (segments < 1) throw ConfigError("QuantileGrid: need at least one segment");
    std::vector<double> points(static_cast<std::size_t>(segments) + 1);
    points.front() = kLowerEdge;
    for (int i = 1; i < segments; ++i) points[i] = static_cast<double>(i) / segments;
    points.back() = kUpperEdge;
    points_ = std::make_shared<const std::vector<double>>(std::move(points));
  }

  explicit QuantileGrid(std::vector<double> points) {
    if (points.size() < 2) throw ConfigError("QuantileGrid: need at least two points");
    if (!(points.front() > 0.0) || !(points.back() < 1.0)) {
      throw ConfigError("QuantileGrid: points must lie strictly inside (0, 1)");
    }
    for (std::size_t i = 1; i < points.size(); ++i) {
      if (!(points[i - 1] < points[i])) {
        throw ConfigError("QuantileGrid: points must be strictly increasing");
      }
    }
    points_ = std::make_shared<const std::vector<double>>(std::move(points));
  }

  int segments() const { return static_cast<int>(points_->size()) - 1; }
  std::span<const double> points() const { return *points_; }
  double point(int i) const { return (*points_)[static_cast<std::size_t>(i)]; }
  double lower() const { return points_->front(); }
  double upper() const { return points_->back(); }
  double midpoint(int i) const { return 0.5 * (point(i) + point(i + 1)); }
  double width(int i) const { return point(i + 1) - point(i); }

  double clamp(double tau) const { return std::clamp(tau, lower(), upper()); }

  // Index i of the segment with p_i <= tau < p_{i+1}; tau = p_N maps to the
  // last segment. tau is clamped first.
  int segment_of(double tau) const {
    tau = clamp(tau);
    const auto& p = *points_;
    auto it = std::upper_bound(p.begin(), p.end(), tau);
    int i = static_cast<int>(it - p.begin()) - 1;
    return std::min(i, segments() - 1);
  }

  friend bool operator==(const QuantileGrid& a, const QuantileGrid& b) {
    return a.points_ == b.points_ || *a.points_ == *b.points_;
  }

 private:
  std::shared_ptr<const std::vector<double>> points_;
};

// Monotone piecewise-linear quantile curve: a baseline at p_0 plus N
// non-negative increments. The support values are
//   value(p_k) = baseline + (1/N) * sum_{j<=k} increments[j-1].
class PiecewiseQuantileFunction {
 public:
  PiecewiseQuantileFunction(QuantileGrid grid, double baseline, std::vector<double> increments)
      : grid_(std::move(grid)), baseline_(baseline), increments_(std::move(increments)) {
    if (static_cast<int>(increments_.size()) != grid_.segments()) {
      throw std::invalid_argument("PiecewiseQuantileFunction: need one increment per segment");
    }
    if (!std::isfinite(baseline_)) {
      throw std::invalid_argument("PiecewiseQuantileFunction: non-finite baseline");
    }
    cumulative_.resize(increments_.size() + 1);
    cumulative_[0] = 0.0;
    for (std::size_t j = 0; j < increments_.size(); ++j) {
      if (!(increments_[j] >= 0.0) || !std::isfinite(increments_[j])) {
        throw std::invalid_argument("PiecewiseQuantileFunction: increments must be finite and >= 0");
      }
      cumulative_[j + 1] = cumulative_[j] + increments_[j];
    }
  }

  static PiecewiseQuantileFunction constant(QuantileGrid grid, double value) {
    std::vector<double> zeros(static_cast<std::size_t>(grid.segments()), 0.0);
    return PiecewiseQuantileFunction(std::move(grid), value, std::move(zeros));
  }

  const QuantileGrid& grid() const { return grid_; }
  double baseline() const { return baseline_; }
  std::span<const double> increments() const { return increments_; }

  // sum_{j=1}^{k} Delta_j, unscaled.
  double cumulative_increment(int k) const { return cumulative_[static_cast<std::size_t>(k)]; }

  double support_value(int k) const {
    return baseline_ + cumulative_increment(k) / grid_.segments();
  }

 private:
  QuantileGrid grid_;
  double baseline_;
  std::vector<double> increments_;
  std::vector<double> cumulative_;
};

// Segment and interpolation weight of a (clamped) fraction.
struct SegmentPosition {
  int segment;
  double fraction;  // (tau - p_i) / (p_{i+1} - p_i), in [0, 1]
};

inline SegmentPosition locate(const QuantileGrid& grid, double tau) {
  tau = grid.clamp(tau);
  const int i = grid.segment_of(tau);
  return {i, (tau - grid.point(i)) / grid.width(i)};
}

//   Delta_0 + (1/N) [ sum_{j=1}^{i} Delta_j + (tau - p_i)/(p_{i+1} - p_i) Delta_{i+1} ]
// for the segment i containing tau. Out-of-range tau is clamped.
inline double evaluate(const PiecewiseQuantileFunction& q, double tau) {
  const auto [i, w] = locate(q.grid(), tau);
  const double inside = q.cumulative_increment(i) + w * q.increments()[static_cast<std::size_t>(i)];
  return q.baseline() + inside / q.grid().segments();
}

// Adds upstream * d evaluate(tau) / d(baseline, increments) into the given
// accumulators. evaluate is linear in the parameters, so this is exact.
inline void accumulate_evaluate_gradient(const QuantileGrid& grid, double tau, double upstream,
                                         double& d_baseline, std::span<double> d_increments) {
  const auto [i, w] = locate(grid, tau);
  const double scale = upstream / grid.segments();
  d_baseline += upstream;
  for (int j = 0; j < i; ++j) d_increments[static_cast<std::size_t>(j)] += scale;
  d_increments[static_cast<std::size_t>(i)] += scale * w;
}

// Integral of the curve over [p_0, p_N] by the trapezoid rule, which is exact
// for a piecewise-linear function.
inline double q_value(const PiecewiseQuantileFunction& q) {
  const auto& grid = q.grid();
  double total = 0.0;
  for (int i = 0; i < grid.segments(); ++i) {
    total += 0.5 * grid.width(i) * (q.support_value(i + 1) + q.support_value(i));
  }
  return total;
}

// Same integral via the Dirac-mixture view: widths times midpoint values.
inline double q_value_midpoint(const PiecewiseQuantileFunction& q) {
  const auto& grid = q.grid();
  double total = 0.0;
  for (int i = 0; i < grid.segments(); ++i) total += grid.width(i) * evaluate(q, grid.midpoint(i));
  return total;
}

namespace detail {

// Integral of |d| over a segment of the given width where d is linear with
// endpoint values d0, d1.
inline double abs_linear_integral(double d0, double d1, double width) {
  if ((d0 >= 0.0 && d1 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0)) {
    return 0.5 * width * (std::abs(d0) + std::abs(d1));
  }
  // Split at the zero crossing: two triangles.
  return 0.5 * width * (d0 * d0 + d1 * d1) / (std::abs(d0) + std::abs(d1));
}

// Integral of u^2 over [0, width] where u is linear with endpoint values u0, u1.
inline double square_linear_integral(double u0, double u1, double width) {
  return width * (u0 * u0 + u0 * u1 + u1 * u1) / 3.0;
}

}  // namespace detail

// 1-Wasserstein distance between the two curves: the exact integral of
// |a(tau) - b(tau)| over [p_0, p_N].
inline double w1_distance(const PiecewiseQuantileFunction& a, const PiecewiseQuantileFunction& b) {
  if (!(a.grid() == b.grid())) throw ConfigError("w1_distance: curves live on different grids");
  const auto& grid = a.grid();
  double total = 0.0;
  double d_left = a.support_value(0) - b.support_value(0);
  for (int i = 0; i < grid.segments(); ++i) {
    const double d_right = a.support_value(i + 1) - b.support_value(i + 1);
    total += detail::abs_linear_integral(d_left, d_right, grid.width(i));
    d_left = d_right;
  }
  return total;
}

// Integral of (F(tau) - F(1/2))^2 over [max(1/2, p_0), p_N]. The curve is not
// defined past p_N, so the upper limit is p_N rather than 1.
inline double left_truncated_variance(const PiecewiseQuantileFunction& q) {
  const auto& grid = q.grid();
  const double median = evaluate(q, 0.5);
  const double lower = std::max(0.5, grid.lower());
  double total = 0.0;
  for (int i = grid.segment_of(lower); i < grid.segments(); ++i) {
    const double a = std::max(lower, grid.point(i));
    const double b = grid.point(i + 1);
    if (!(b > a)) continue;
    total += detail::square_linear_integral(evaluate(q, a) - median, evaluate(q, b) - median, b - a);
  }
  return total;
}

// Curve dump: one "tau,value" line per support point, round-trip precision.
inline void write_curve(std::ostream& out, const PiecewiseQuantileFunction& q) {
  for (int k = 0; k <= q.grid().segments(); ++k) {
    out << format_double(q.grid().point(k)) << ',' << format_double(q.support_value(k)) << '\n';
  }
}

struct CurvePoint {
  double tau;
  double value;
};

inline std::vector<CurvePoint> read_curve(std::istream& in) {
  std::vector<CurvePoint> points;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ConfigError("curve dump: missing comma in '" + line + "'");
    points.push_back({parse_double(std::string_view(line).substr(0, comma)),
                      parse_double(std::string_view(line).substr(comma + 1))});
  }
  return points;
}

}  // namespace ndqfn
