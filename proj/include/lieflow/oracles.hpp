#pragma once

// Brute-force reference computations for tests: tensor-grid trapezoid
// quadrature, self-normalized importance sampling, and central differences.
// Not used by the estimators or the command-line tool.

#include <functional>
#include <limits>
#include <vector>

#include "lieflow/gaussian.hpp"
#include "lieflow/random.hpp"

namespace lieflow::oracles {

struct GridAxis {
  double lo;
  double hi;
  Index points;
};

struct GridSpec {
  std::vector<GridAxis> axes;

  Index dims() const { return static_cast<Index>(axes.size()); }

  void validate() const {
    if (axes.empty() || axes.size() > 6) throw DimensionError("GridSpec: between 1 and 6 dimensions");
    for (const auto& a : axes) {
      if (a.points < 16) throw DimensionError("GridSpec: at least 16 points per dimension");
      if (!(a.hi > a.lo)) throw DimensionError("GridSpec: empty axis");
    }
  }

  /// Box of +-halfwidth around center with the same point count per axis.
  static GridSpec box(const Vector& center, const Vector& halfwidth, Index points) {
    GridSpec g;
    for (Index k = 0; k < center.size(); ++k) g.axes.push_back({center(k) - halfwidth(k), center(k) + halfwidth(k), points});
    return g;
  }
};

struct QuadratureResult {
  double log_normalizer = 0.0;
  Vector mean;
  Matrix second_moment;
  /// Expectations of the extra feature function, if one was given.
  Vector features;
  /// max density on the box faces relative to the max density.
  double boundary_ratio = 0.0;
};

using LogDensity = std::function<double(const Vector&)>;
using Feature = std::function<Vector(const Vector&)>;

/// Trapezoid-rule normalizer, mean and second moment of exp(log_density) on
/// the grid. Throws when the boundary ratio exceeds boundary_tolerance.
inline QuadratureResult quadrature_moments(const LogDensity& log_density, const GridSpec& grid,
                                           const Feature& feature = nullptr, double boundary_tolerance = 1e-8) {
  grid.validate();
  const Index K = grid.dims();
  Index total = 1;
  for (const auto& a : grid.axes) total *= a.points;
  std::vector<double> logf(static_cast<size_t>(total));
  Vector point(K);
  auto locate = [&](Index p, double* weight, bool* face) {
    double w = 1.0;
    bool on_face = false;
    for (Index k = K - 1; k >= 0; --k) {
      const auto& a = grid.axes[static_cast<size_t>(k)];
      const Index i = p % a.points;
      p /= a.points;
      const double h = (a.hi - a.lo) / static_cast<double>(a.points - 1);
      point(k) = a.lo + h * static_cast<double>(i);
      const bool end = (i == 0 || i == a.points - 1);
      w *= h * (end ? 0.5 : 1.0);
      on_face = on_face || end;
    }
    if (weight) *weight = w;
    if (face) *face = on_face;
  };
  double peak = -std::numeric_limits<double>::infinity(), face_peak = peak;
  for (Index p = 0; p < total; ++p) {
    bool face = false;
    locate(p, nullptr, &face);
    const double v = log_density(point);
    if (std::isnan(v)) throw NumericError("quadrature_moments: log density returned NaN");
    logf[static_cast<size_t>(p)] = v;
    peak = std::max(peak, v);
    if (face) face_peak = std::max(face_peak, v);
  }
  if (!std::isfinite(peak)) throw NumericError("quadrature_moments: density vanishes on the grid");
  QuadratureResult out;
  out.boundary_ratio = std::exp(face_peak - peak);
  if (out.boundary_ratio > boundary_tolerance)
    throw NumericError(detail::concat("quadrature_moments: box too small (boundary ratio ", out.boundary_ratio, ")"));
  double z = 0.0;
  Vector s1 = Vector::Zero(K);
  Matrix s2 = Matrix::Zero(K, K);
  Vector sf;
  for (Index p = 0; p < total; ++p) {
    double w = 0.0;
    locate(p, &w, nullptr);
    w *= std::exp(logf[static_cast<size_t>(p)] - peak);
    if (w == 0.0) continue;
    z += w;
    s1 += w * point;
    s2.noalias() += w * point * point.transpose();
    if (feature) {
      const Vector f = feature(point);
      if (sf.size() == 0) sf = Vector::Zero(f.size());
      sf += w * f;
    }
  }
  out.log_normalizer = peak + std::log(z);
  out.mean = s1 / z;
  out.second_moment = s2 / z;
  if (feature) out.features = sf / z;
  return out;
}

struct McResult {
  Vector mean;
  Matrix second_moment;
  Vector mean_se;           // standard errors of the mean entries
  Matrix second_moment_se;  // standard errors of the second-moment entries
  Vector features;
  Vector features_se;
  double ess = 0.0;
  double log_normalizer = 0.0;  // log of the estimated normalizer of exp(log_unnormalized)
};

/// Self-normalized importance sampling with a Gaussian proposal.
/// Throws when the effective sample size is below min_ess_fraction of samples.
inline McResult mc_moments(const LogDensity& log_unnormalized, const Gaussian& proposal, Index samples,
                           std::uint64_t seed, const Feature& feature = nullptr, double min_ess_fraction = 0.01) {
  if (samples < 2) throw DimensionError("mc_moments: need at least two samples");
  const Index K = proposal.dim();
  const SpdFactor pf(proposal.cov(), FactorPolicy{1e300});
  const Matrix l = pf.llt().matrixL();
  CounterRng rng(seed, stream_id({0x6f7261636c65ull}));
  Matrix xs(K, samples);
  std::vector<double> logw(static_cast<size_t>(samples));
  double peak = -std::numeric_limits<double>::infinity();
  for (Index s = 0; s < samples; ++s) {
    const Vector e = rng.normal_vector(K);
    xs.col(s) = proposal.mean() + l * e;
    const double lq = -0.5 * (static_cast<double>(K) * kLog2Pi + pf.log_det() + e.squaredNorm());
    const double lw = log_unnormalized(xs.col(s)) - lq;
    if (std::isnan(lw)) throw NumericError("mc_moments: log weight is NaN");
    logw[static_cast<size_t>(s)] = lw;
    peak = std::max(peak, lw);
  }
  Vector w(samples);
  for (Index s = 0; s < samples; ++s) w(s) = std::exp(logw[static_cast<size_t>(s)] - peak);
  const double wsum = w.sum();
  McResult out;
  out.ess = wsum * wsum / w.squaredNorm();
  if (out.ess < min_ess_fraction * static_cast<double>(samples))
    throw NumericError(detail::concat("mc_moments: effective sample size ", out.ess, " too small"));
  out.log_normalizer = peak + std::log(wsum / static_cast<double>(samples));
  const Vector wn = w / wsum;
  out.mean = xs * wn;
  out.second_moment = Matrix::Zero(K, K);
  for (Index s = 0; s < samples; ++s) out.second_moment.noalias() += wn(s) * xs.col(s) * xs.col(s).transpose();
  out.mean_se = Vector::Zero(K);
  out.second_moment_se = Matrix::Zero(K, K);
  std::vector<Vector> fs;
  if (feature) {
    for (Index s = 0; s < samples; ++s) fs.push_back(feature(xs.col(s)));
    out.features = Vector::Zero(fs.front().size());
    for (Index s = 0; s < samples; ++s) out.features += wn(s) * fs[static_cast<size_t>(s)];
    out.features_se = Vector::Zero(out.features.size());
  }
  // delta-method variance of a self-normalized estimate: sum wn^2 (f - E f)^2
  for (Index s = 0; s < samples; ++s) {
    const double w2 = wn(s) * wn(s);
    const Vector x = xs.col(s);
    out.mean_se += w2 * (x - out.mean).cwiseAbs2();
    out.second_moment_se += w2 * (x * x.transpose() - out.second_moment).cwiseAbs2();
    if (feature) out.features_se += w2 * (fs[static_cast<size_t>(s)] - out.features).cwiseAbs2();
  }
  out.mean_se = out.mean_se.cwiseSqrt();
  out.second_moment_se = out.second_moment_se.cwiseSqrt();
  if (feature) out.features_se = out.features_se.cwiseSqrt();
  return out;
}

/// (f(x + h e_k) - f(x - h e_k)) / 2h for every coordinate k.
inline Vector finite_difference_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double h) {
  Vector g(x.size());
  Vector p = x;
  for (Index k = 0; k < x.size(); ++k) {
    p(k) = x(k) + h;
    const double up = f(p);
    p(k) = x(k) - h;
    const double down = f(p);
    p(k) = x(k);
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError(detail::concat("finite_difference_gradient: non-finite value at coordinate ", k));
    g(k) = (up - down) / (2.0 * h);
  }
  return g;
}

}  // namespace lieflow::oracles
