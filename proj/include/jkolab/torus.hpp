#pragma once

// Periodic grid geometry on the unit flat torus R^n / Z^n (n = 1, 2) and
// second-order finite-difference calculus on it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "jkolab/error.hpp"
#include "jkolab/parallel.hpp"

namespace jkolab {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

/// Point on the torus; coordinates beyond dim() are ignored (kept at zero).
using Point = std::array<double, 2>;
using MultiIndex = std::array<int, 2>;

/// Wraps a coordinate into [0, 1).
inline double wrap_unit(double s) {
  double w = s - std::floor(s);
  return w >= 1.0 ? 0.0 : w;
}

/// Signed minimal-image displacement s in [-1/2, 1/2) with s = t - u mod 1.
inline double minimal_image(double t_minus_u) {
  return t_minus_u - std::floor(t_minus_u + 0.5);
}

/// Squared flat-torus distance: per coordinate, the squared offset minimized
/// over the integer shifts {-1, 0, 1}.
inline double torus_distance_sq(std::span<const double> x, std::span<const double> y) {
  double acc = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    double best = std::numeric_limits<double>::infinity();
    for (int m = -1; m <= 1; ++m) {
      double s = x[d] - y[d] + m;
      best = std::min(best, s * s);
    }
    acc += best;
  }
  return acc;
}

inline double torus_distance_sq(const Point& x, const Point& y, int dim) {
  return torus_distance_sq(std::span<const double>(x.data(), static_cast<std::size_t>(dim)),
                           std::span<const double>(y.data(), static_cast<std::size_t>(dim)));
}

class TorusGrid {
 public:
  TorusGrid(int dim, int points_per_dim) : dim_(dim), m_(points_per_dim) {
    require(dim == 1 || dim == 2, ErrorCode::invalid_argument,
            "torus dimension must be 1 or 2, got " + std::to_string(dim));
    require(points_per_dim >= 2, ErrorCode::invalid_argument,
            "need at least 2 points per dimension, got " + std::to_string(points_per_dim));
    h_ = 1.0 / m_;
    cell_ = dim_ == 1 ? h_ : h_ * h_;
    count_ = dim_ == 1 ? static_cast<std::size_t>(m_)
                       : static_cast<std::size_t>(m_) * static_cast<std::size_t>(m_);
  }

  int dim() const noexcept { return dim_; }
  int points_per_dim() const noexcept { return m_; }
  double spacing() const noexcept { return h_; }
  double cell_volume() const noexcept { return cell_; }
  std::size_t node_count() const noexcept { return count_; }

  /// Row-major: the first coordinate varies slowest.
  MultiIndex multi_index(std::size_t flat) const noexcept {
    if (dim_ == 1) return {static_cast<int>(flat), 0};
    return {static_cast<int>(flat / m_), static_cast<int>(flat % m_)};
  }

  std::size_t flat_index(MultiIndex idx) const noexcept {
    int i0 = wrap_index(idx[0]);
    if (dim_ == 1) return static_cast<std::size_t>(i0);
    return static_cast<std::size_t>(i0) * m_ + static_cast<std::size_t>(wrap_index(idx[1]));
  }

  int wrap_index(int i) const noexcept {
    int r = i % m_;
    return r < 0 ? r + m_ : r;
  }

  Point node(std::size_t flat) const noexcept {
    MultiIndex mi = multi_index(flat);
    return {mi[0] * h_, dim_ == 2 ? mi[1] * h_ : 0.0};
  }

  /// Periodic neighbour of `flat` displaced by `offset` nodes along axis d.
  std::size_t shifted(std::size_t flat, int d, int offset) const noexcept {
    MultiIndex mi = multi_index(flat);
    mi[d] += offset;
    return flat_index(mi);
  }

  double distance_sq(std::size_t i, std::size_t j) const noexcept {
    return torus_distance_sq(node(i), node(j), dim_);
  }

  friend bool operator==(const TorusGrid& a, const TorusGrid& b) noexcept {
    return a.dim_ == b.dim_ && a.m_ == b.m_;
  }

 private:
  int dim_;
  int m_;
  double h_ = 0.0;
  double cell_ = 0.0;
  std::size_t count_ = 0;
};

inline void require_same_grid(const TorusGrid& a, const TorusGrid& b) {
  if (!(a == b))
    throw Error(ErrorCode::grid_mismatch,
                "(n=" + std::to_string(a.dim()) + ", M=" + std::to_string(a.points_per_dim()) +
                    ") vs (n=" + std::to_string(b.dim()) +
                    ", M=" + std::to_string(b.points_per_dim()) + ")");
}

/// Real scalar per grid node.
class GridField {
 public:
  explicit GridField(TorusGrid grid, double fill = 0.0)
      : grid_(grid), values_(grid.node_count(), fill) {}

  GridField(TorusGrid grid, std::vector<double> values) : grid_(grid), values_(std::move(values)) {
    require(values_.size() == grid_.node_count(), ErrorCode::invalid_argument,
            "field has " + std::to_string(values_.size()) + " values, grid has " +
                std::to_string(grid_.node_count()) + " nodes");
  }

  template <class F>
  static GridField sample(TorusGrid grid, F&& f) {
    std::vector<double> v(grid.node_count());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(grid.node(i));
    return GridField(grid, std::move(v));
  }

  const TorusGrid& grid() const noexcept { return grid_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const std::vector<double>& data() const noexcept { return values_; }
  double operator[](std::size_t i) const noexcept { return values_[i]; }
  double& operator[](std::size_t i) noexcept { return values_[i]; }

  double max_abs() const noexcept {
    double m = 0.0;
    for (double v : values_) m = std::max(m, std::abs(v));
    return m;
  }

 private:
  TorusGrid grid_;
  std::vector<double> values_;
};

/// Strictly positive grid density of unit mass (sum of values times h^n).
class DensityField {
 public:
  static constexpr double kMassTolerance = 1e-9;

  DensityField(TorusGrid grid, std::vector<double> values) : field_(grid, std::move(values)) {
    validate();
  }

  explicit DensityField(GridField field) : field_(std::move(field)) { validate(); }

  /// Rescales positive values to unit mass.
  static DensityField normalized(TorusGrid grid, std::vector<double> values) {
    double mass = 0.0;
    for (double v : values) mass += v;
    mass *= grid.cell_volume();
    require(mass > 0.0 && std::isfinite(mass), ErrorCode::invalid_argument,
            "cannot normalize a density with non-positive mass");
    for (double& v : values) v /= mass;
    return DensityField(grid, std::move(values));
  }

  template <class F>
  static DensityField sample(TorusGrid grid, F&& f) {
    std::vector<double> v(grid.node_count());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(grid.node(i));
    return normalized(grid, std::move(v));
  }

  static DensityField uniform(TorusGrid grid) {
    return DensityField(grid, std::vector<double>(grid.node_count(), 1.0));
  }

  const TorusGrid& grid() const noexcept { return field_.grid(); }
  const GridField& field() const noexcept { return field_; }
  operator const GridField&() const noexcept { return field_; }
  std::size_t size() const noexcept { return field_.size(); }
  std::span<const double> values() const noexcept { return field_.values(); }
  double operator[](std::size_t i) const noexcept { return field_[i]; }

  double mass() const noexcept {
    double s = 0.0;
    for (double v : field_.values()) s += v;
    return s * grid().cell_volume();
  }

  double min_value() const noexcept {
    return *std::min_element(field_.values().begin(), field_.values().end());
  }

  double max_value() const noexcept {
    return *std::max_element(field_.values().begin(), field_.values().end());
  }

  GridField log() const {
    std::vector<double> v(size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(field_[i]);
    return GridField(grid(), std::move(v));
  }

 private:
  void validate() const {
    for (double v : field_.values())
      require(std::isfinite(v) && v > 0.0, ErrorCode::invalid_argument,
              "density values must be finite and strictly positive");
    double m = mass();
    require(std::abs(m - 1.0) <= kMassTolerance, ErrorCode::invalid_argument,
            "density mass " + std::to_string(m) + " differs from 1");
  }

  GridField field_;
};

/// One scalar field per coordinate direction.
class VectorField {
 public:
  explicit VectorField(TorusGrid grid) : grid_(grid) {
    for (int d = 0; d < grid.dim(); ++d) comps_.emplace_back(grid);
  }

  const TorusGrid& grid() const noexcept { return grid_; }
  const GridField& component(int d) const { return comps_.at(static_cast<std::size_t>(d)); }
  GridField& component(int d) { return comps_.at(static_cast<std::size_t>(d)); }

  Point at(std::size_t node) const noexcept {
    Point p{0.0, 0.0};
    for (int d = 0; d < grid_.dim(); ++d) p[d] = comps_[d][node];
    return p;
  }

 private:
  TorusGrid grid_;
  std::vector<GridField> comps_;
};

/// Symmetric 2x2 (or 1x1) matrix. For n = 1 only xx is meaningful.
struct SymMat {
  double xx = 0.0;
  double xy = 0.0;
  double yy = 0.0;

  double operator()(int a, int b) const noexcept {
    if (a != b) return xy;
    return a == 0 ? xx : yy;
  }
};

/// Smallest eigenvalue of a symmetric matrix of the given dimension.
inline double min_eigenvalue(const SymMat& m, int dim) noexcept {
  if (dim == 1) return m.xx;
  double mean = 0.5 * (m.xx + m.yy);
  double half_diff = 0.5 * (m.xx - m.yy);
  return mean - std::hypot(half_diff, m.xy);
}

inline double max_abs_entry(const SymMat& m, int dim) noexcept {
  if (dim == 1) return std::abs(m.xx);
  return std::max({std::abs(m.xx), std::abs(m.xy), std::abs(m.yy)});
}

/// Symmetric-matrix valued field; only the upper triangle is stored so
/// symmetry holds by construction.
class SymMatField {
 public:
  explicit SymMatField(TorusGrid grid) : grid_(grid), entries_(grid.node_count()) {}

  const TorusGrid& grid() const noexcept { return grid_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const SymMat& operator[](std::size_t i) const noexcept { return entries_[i]; }
  SymMat& operator[](std::size_t i) noexcept { return entries_[i]; }

  double entry(std::size_t node, int a, int b) const noexcept { return entries_[node](a, b); }

  /// Scalar field of one matrix entry.
  GridField component(int a, int b) const {
    GridField out(grid_);
    for (std::size_t i = 0; i < size(); ++i) out[i] = entries_[i](a, b);
    return out;
  }

 private:
  TorusGrid grid_;
  std::vector<SymMat> entries_;
};

namespace detail {
inline void require_fd_grid(const TorusGrid& g) {
  require(g.points_per_dim() >= 8, ErrorCode::invalid_argument,
          "finite differences need at least 8 points per dimension");
}
}  // namespace detail

/// Centered periodic differences (u[i+e_d] - u[i-e_d]) / 2h.
inline VectorField gradient(const GridField& u) {
  const TorusGrid& g = u.grid();
  detail::require_fd_grid(g);
  VectorField out(g);
  const double inv2h = 0.5 / g.spacing();
  for (int d = 0; d < g.dim(); ++d) {
    GridField& c = out.component(d);
    for (std::size_t i = 0; i < u.size(); ++i)
      c[i] = (u[g.shifted(i, d, 1)] - u[g.shifted(i, d, -1)]) * inv2h;
  }
  return out;
}

/// Second differences on the diagonal, composed centered differences off it.
inline SymMatField hessian(const GridField& u) {
  const TorusGrid& g = u.grid();
  detail::require_fd_grid(g);
  SymMatField out(g);
  const double inv_h2 = 1.0 / (g.spacing() * g.spacing());
  for (std::size_t i = 0; i < u.size(); ++i) {
    SymMat& m = out[i];
    m.xx = (u[g.shifted(i, 0, 1)] - 2.0 * u[i] + u[g.shifted(i, 0, -1)]) * inv_h2;
    if (g.dim() == 2) {
      m.yy = (u[g.shifted(i, 1, 1)] - 2.0 * u[i] + u[g.shifted(i, 1, -1)]) * inv_h2;
      std::size_t pp = g.shifted(g.shifted(i, 0, 1), 1, 1);
      std::size_t pm = g.shifted(g.shifted(i, 0, 1), 1, -1);
      std::size_t mp = g.shifted(g.shifted(i, 0, -1), 1, 1);
      std::size_t mm = g.shifted(g.shifted(i, 0, -1), 1, -1);
      m.xy = (u[pp] - u[pm] - u[mp] + u[mm]) * 0.25 * inv_h2;
    }
  }
  return out;
}

struct MinEigStats {
  GridField eigmin;
  double global_min = 0.0;
  std::size_t argmin = 0;  ///< lowest node index among ties
};

inline MinEigStats min_eig_stats(const SymMatField& h) {
  MinEigStats s{GridField(h.grid()), std::numeric_limits<double>::infinity(), 0};
  for (std::size_t i = 0; i < h.size(); ++i) {
    double e = min_eigenvalue(h[i], h.grid().dim());
    s.eigmin[i] = e;
    if (e < s.global_min) {
      s.global_min = e;
      s.argmin = i;
    }
  }
  return s;
}

}  // namespace jkolab
