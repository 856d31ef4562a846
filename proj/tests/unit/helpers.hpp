#pragma once

#include "timewarp/energy.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>

namespace tw::testing {

/// Central-difference gradient of a scalar function of a matrix.
inline Matrix fd_gradient(const std::function<double(const Matrix&)>& fn, Matrix x, double h) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double keep = x(r, c);
      x(r, c) = keep + h;
      const double up = fn(x);
      x(r, c) = keep - h;
      const double down = fn(x);
      x(r, c) = keep;
      g(r, c) = (up - down) / (2.0 * h);
    }
  }
  return g;
}

/// max |a - b| / max(max |b|, floor).
inline double rel_error(const Matrix& a, const Matrix& b, double floor = 1e-8) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), floor);
}

/// Bead chain of n atoms with bonds, angles, and (for n >= 4, d = 3) dihedrals.
inline SystemPtr bead_chain(int n, int d, const std::string& name = "chain") {
  auto s = std::make_shared<SystemSpec>();
  s->name = name;
  s->n_atoms = n;
  s->dimension = d;
  for (int i = 0; i < n; ++i) {
    s->atom_types.push_back(i % 3);
    s->masses.push_back(1.0 + 0.25 * i);
  }
  for (int i = 0; i + 1 < n; ++i) s->bonds.push_back({i, i + 1, 20.0 + i, 1.0 + 0.05 * i});
  for (int i = 0; i + 2 < n; ++i) s->angles.push_back({i, i + 1, i + 2, 5.0, 2.0});
  if (d == 3) {
    for (int i = 0; i + 3 < n; ++i) s->dihedrals.push_back({i, i + 1, i + 2, i + 3, 1.5, 2, 0.7});
  }
  s->nonbonded_sigma = 0.6;
  s->validate();
  return s;
}

/// A roughly extended random configuration for a chain (no coincident atoms).
inline Matrix chain_config(int n, int d, RngStream& rng, double jitter = 0.3) {
  Matrix x(n, d);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < d; ++c) x(i, c) = (c == 0 ? 0.9 * i : 0.0) + jitter * rng.normal();
  }
  return x;
}

/// Trapezoid-quadrature Boltzmann marginal of a 1-D potential binned onto
/// [lo, hi) with `bins` equal bins.
inline std::vector<double> quadrature_marginal(const std::function<double(double)>& u, double temperature,
                                               double lo, double hi, int bins, int points = 100000) {
  std::vector<double> mass(static_cast<std::size_t>(bins), 0.0);
  const double h = (hi - lo) / (points - 1);
  std::vector<double> w(static_cast<std::size_t>(points));
  for (int k = 0; k < points; ++k) w[k] = std::exp(-u(lo + k * h) / temperature);
  double total = 0.0;
  for (int k = 0; k + 1 < points; ++k) {
    const double seg = 0.5 * h * (w[k] + w[k + 1]);
    const double mid = lo + (k + 0.5) * h;
    const int b = std::min(bins - 1, static_cast<int>((mid - lo) / (hi - lo) * bins));
    mass[b] += seg;
    total += seg;
  }
  for (double& m : mass) m /= total;
  return mass;
}

inline std::vector<double> histogram(const std::vector<double>& xs, double lo, double hi, int bins) {
  std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
  for (double x : xs) {
    if (x < lo || x >= hi) continue;
    h[std::min(bins - 1, static_cast<int>((x - lo) / (hi - lo) * bins))] += 1.0;
  }
  for (double& v : h) v /= static_cast<double>(xs.size());
  return h;
}

inline double total_variation(const std::vector<double>& p, const std::vector<double>& q) {
  double tv = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) tv += std::abs(p[i] - q[i]);
  return 0.5 * tv;
}

/// Asymptotic Kolmogorov tail with the Stephens small-sample correction.
inline double kolmogorov_pvalue(double d, double n_eff) {
  const double s = std::sqrt(n_eff);
  const double lambda = (s + 0.12 + 0.11 / s) * d;
  if (lambda < 0.2) return 1.0;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

/// One-sample KS p-value against the standard normal CDF.
inline double ks_normal_pvalue(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = 0.5 * std::erfc(-xs[i] / std::sqrt(2.0));
    d = std::max({d, f - i / n, (i + 1) / n - f});
  }
  return kolmogorov_pvalue(d, n);
}

/// Two-sample KS p-value.
inline double ks_two_sample_pvalue(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(i / na - j / nb));
  }
  return kolmogorov_pvalue(d, na * nb / (na + nb));
}

}  // namespace tw::testing
