#pragma once

// Discrete Fourier transforms of grid fields, trigonometric interpolation and
// periodic multilinear interpolation.

#include <complex>
#include <vector>

#include "jkolab/torus.hpp"

namespace jkolab {

using Complex = std::complex<double>;

/// Signed frequency of DFT slot k: {-M/2, ..., M/2 - 1} for even M.
inline int signed_mode(int k, int m) noexcept { return k < (m + 1) / 2 ? k : k - m; }

namespace detail {

inline std::vector<Complex> twiddles(int m, double sign) {
  std::vector<Complex> w(static_cast<std::size_t>(m));
  for (int k = 0; k < m; ++k) w[k] = std::polar(1.0, sign * kTwoPi * k / m);
  return w;
}

// In-place 1D DFT along axis `axis` of a row-major M^n complex array.
inline void dft_axis(std::vector<Complex>& a, const TorusGrid& g, int axis, double sign) {
  const int m = g.points_per_dim();
  const auto w = twiddles(m, sign);
  const std::size_t stride = (g.dim() == 2 && axis == 0) ? static_cast<std::size_t>(m) : 1;
  const std::size_t lines = g.node_count() / m;
  std::vector<Complex> in(m), out(m);
  for (std::size_t line = 0; line < lines; ++line) {
    std::size_t base;
    if (g.dim() == 1) base = 0;
    else if (axis == 0) base = line;                          // column `line`
    else base = line * static_cast<std::size_t>(m);           // row `line`
    for (int j = 0; j < m; ++j) in[j] = a[base + j * stride];
    for (int k = 0; k < m; ++k) {
      Complex acc = 0.0;
      for (int j = 0; j < m; ++j) acc += in[j] * w[(static_cast<long>(k) * j) % m];
      out[k] = acc;
    }
    for (int k = 0; k < m; ++k) a[base + k * stride] = out[k];
  }
}

}  // namespace detail

/// Fourier coefficients c_m = h^n sum_x u(x) exp(-2 pi i m.x), stored in DFT
/// slot order. With this scaling c_0 is the total mass.
class SpectralState {
 public:
  explicit SpectralState(const GridField& u) : grid_(u.grid()), coeff_(u.size()) {
    for (std::size_t i = 0; i < u.size(); ++i) coeff_[i] = u[i];
    for (int d = 0; d < grid_.dim(); ++d) detail::dft_axis(coeff_, grid_, d, -1.0);
    for (auto& c : coeff_) c *= grid_.cell_volume();
  }

  SpectralState(TorusGrid grid, std::vector<Complex> coeff) : grid_(grid), coeff_(std::move(coeff)) {
    require(coeff_.size() == grid_.node_count(), ErrorCode::invalid_argument,
            "coefficient count does not match grid");
  }

  const TorusGrid& grid() const noexcept { return grid_; }
  std::span<const Complex> coefficients() const noexcept { return coeff_; }
  std::span<Complex> coefficients() noexcept { return coeff_; }

  /// Integer frequency vector of slot `flat`.
  MultiIndex mode(std::size_t flat) const noexcept {
    MultiIndex k = grid_.multi_index(flat);
    int m = grid_.points_per_dim();
    return {signed_mode(k[0], m), grid_.dim() == 2 ? signed_mode(k[1], m) : 0};
  }

  /// Node values u(x) = sum_m c_m exp(2 pi i m.x) (real part).
  GridField to_field() const {
    std::vector<Complex> a = coeff_;
    for (int d = 0; d < grid_.dim(); ++d) detail::dft_axis(a, grid_, d, 1.0);
    GridField out(grid_);
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i].real();
    return out;
  }

 private:
  TorusGrid grid_;
  std::vector<Complex> coeff_;
};

/// Value, gradient and Hessian of a scalar function at one point.
struct Jet {
  double value = 0.0;
  Point grad{0.0, 0.0};
  SymMat hess{};
};

/// Band-limited periodic interpolant of node data. Reproduces the data at
/// nodes exactly (up to round-off) and is smooth everywhere.
class TrigInterpolant {
 public:
  explicit TrigInterpolant(const GridField& u) : state_(u) {
    const int m = u.grid().points_per_dim();
    modes_.resize(static_cast<std::size_t>(m));
    for (int k = 0; k < m; ++k) modes_[k] = signed_mode(k, m);
  }

  const TorusGrid& grid() const noexcept { return state_.grid(); }

  Jet eval(const Point& y) const {
    const TorusGrid& g = grid();
    const int m = g.points_per_dim();
    const auto c = state_.coefficients();
    auto phases = [&](double coord) {
      std::vector<Complex> e(static_cast<std::size_t>(m));
      for (int k = 0; k < m; ++k) {
        double frac = wrap_unit(modes_[k] * coord);
        e[k] = std::polar(1.0, kTwoPi * frac);
      }
      return e;
    };
    Jet jet;
    const Complex i2pi(0.0, kTwoPi);
    if (g.dim() == 1) {
      auto e = phases(y[0]);
      Complex v = 0.0, d1 = 0.0, d2 = 0.0;
      for (int k = 0; k < m; ++k) {
        Complex t = c[k] * e[k];
        Complex w = i2pi * static_cast<double>(modes_[k]);
        v += t;
        d1 += w * t;
        d2 += w * w * t;
      }
      jet.value = v.real();
      jet.grad[0] = d1.real();
      jet.hess.xx = d2.real();
      return jet;
    }
    auto e0 = phases(y[0]);
    auto e1 = phases(y[1]);
    Complex v = 0.0, g0 = 0.0, g1 = 0.0, h00 = 0.0, h01 = 0.0, h11 = 0.0;
    for (int k0 = 0; k0 < m; ++k0) {
      Complex s0 = 0.0, s1 = 0.0, s2 = 0.0;
      const Complex* row = c.data() + static_cast<std::size_t>(k0) * m;
      for (int k1 = 0; k1 < m; ++k1) {
        Complex t = row[k1] * e1[k1];
        Complex w = i2pi * static_cast<double>(modes_[k1]);
        s0 += t;
        s1 += w * t;
        s2 += w * w * t;
      }
      Complex w0 = i2pi * static_cast<double>(modes_[k0]);
      Complex p = e0[k0];
      v += p * s0;
      g0 += w0 * p * s0;
      g1 += p * s1;
      h00 += w0 * w0 * p * s0;
      h01 += w0 * p * s1;
      h11 += p * s2;
    }
    jet.value = v.real();
    jet.grad = {g0.real(), g1.real()};
    jet.hess = {h00.real(), h01.real(), h11.real()};
    return jet;
  }

 private:
  SpectralState state_;
  std::vector<int> modes_;
};

/// Periodic multilinear interpolation of node values at an arbitrary point.
inline double interpolate_linear(const GridField& u, const Point& y) {
  const TorusGrid& g = u.grid();
  const int m = g.points_per_dim();
  int base[2] = {0, 0};
  double w[2] = {0.0, 0.0};
  for (int d = 0; d < g.dim(); ++d) {
    double s = wrap_unit(y[d]) * m;
    double fl = std::floor(s);
    base[d] = static_cast<int>(fl) % m;
    w[d] = s - fl;
  }
  if (g.dim() == 1) {
    return (1.0 - w[0]) * u[g.flat_index({base[0], 0})] + w[0] * u[g.flat_index({base[0] + 1, 0})];
  }
  double acc = 0.0;
  for (int a = 0; a <= 1; ++a)
    for (int b = 0; b <= 1; ++b) {
      double wt = (a ? w[0] : 1.0 - w[0]) * (b ? w[1] : 1.0 - w[1]);
      acc += wt * u[g.flat_index({base[0] + a, base[1] + b})];
    }
  return acc;
}

}  // namespace jkolab
