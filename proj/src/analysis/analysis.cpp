#include "timewarp/analysis.hpp"

#include "timewarp/parallel.hpp"

#include <boost/math/distributions/binomial.hpp>
#include <fftw3.h>
#include <spdlog/spdlog.h>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <set>

namespace tw {

Vector features(const Matrix& positions) {
  const auto n = positions.rows();
  const auto d = positions.cols();
  if (n == 1 || d == 1) {
    Vector f(n * d);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index c = 0; c < d; ++c) f[i * d + c] = positions(i, c);
    }
    return f;
  }
  Vector f(n * (n - 1) / 2);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) f[k++] = (positions.row(i) - positions.row(j)).norm();
  }
  return f;
}

Matrix trajectory_features(const std::vector<Matrix>& frames) {
  if (frames.empty()) return {};
  const Vector first = features(frames.front());
  Matrix out(static_cast<Eigen::Index>(frames.size()), first.size());
  for (std::size_t t = 0; t < frames.size(); ++t) out.row(static_cast<Eigen::Index>(t)) = features(frames[t]).transpose();
  return out;
}

Matrix chain_features(const Chain& chain) {
  if (chain.size() == 0) return {};
  const Vector first = features(chain.frame(0));
  Matrix out(static_cast<Eigen::Index>(chain.size()), first.size());
  for (std::size_t t = 0; t < chain.size(); ++t) out.row(static_cast<Eigen::Index>(t)) = features(chain.frame(t)).transpose();
  return out;
}

Matrix TicaModel::project(const Matrix& feats) const {
  if (feats.cols() != mean.size()) throw std::invalid_argument("TicaModel::project: feature width mismatch");
  return (feats.rowwise() - mean.transpose()) * transform;
}

Vector TicaModel::component(const Matrix& feats, int k) const {
  if (k < 0 || k >= transform.cols()) throw std::invalid_argument("TicaModel: no component " + std::to_string(k));
  return (feats.rowwise() - mean.transpose()) * transform.col(k);
}

TicaModel tica_fit(const std::vector<Matrix>& series, int lag) {
  if (lag < 0) throw std::invalid_argument("tica_fit: lag must be >= 0");
  if (series.empty()) throw std::invalid_argument("tica_fit: no data");
  const auto f = series.front().cols();
  Eigen::Index frames = 0;
  Vector mean = Vector::Zero(f);
  for (const auto& s : series) {
    if (s.cols() != f) throw std::invalid_argument("tica_fit: inconsistent feature widths");
    mean += s.colwise().sum().transpose();
    frames += s.rows();
  }
  mean /= static_cast<double>(frames);

  Matrix c0 = Matrix::Zero(f, f);
  Matrix ct = Matrix::Zero(f, f);
  Eigen::Index pairs = 0;
  for (const auto& s : series) {
    const Matrix x = s.rowwise() - mean.transpose();
    c0 += x.transpose() * x;
    if (s.rows() > lag + 1) {
      const auto m = s.rows() - lag;
      ct += x.topRows(m).transpose() * x.bottomRows(m);
      pairs += m;
    }
  }
  if (pairs == 0) throw std::invalid_argument("tica_fit: every series is shorter than lag + 2 frames");
  c0 /= static_cast<double>(frames);
  ct = (0.5 * (ct + ct.transpose()) / static_cast<double>(pairs)).eval();

  Eigen::SelfAdjointEigenSolver<Matrix> c0_eig(c0);
  const double top = c0_eig.eigenvalues().maxCoeff();
  if (!(top > 0.0) || c0_eig.eigenvalues().minCoeff() < 1e-12 * top) {
    throw std::runtime_error("tica_fit: feature covariance is rank deficient; prune constant or collinear features");
  }
  const Matrix c0_reg = c0 + 1e-8 * Matrix::Identity(f, f);
  if (lag == 0) ct = c0_reg;

  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> solver(ct, c0_reg);
  if (solver.info() != Eigen::Success) throw std::runtime_error("tica_fit: eigensolver failed");
  std::vector<int> order(static_cast<std::size_t>(f));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return solver.eigenvalues()[a] > solver.eigenvalues()[b]; });

  TicaModel model;
  model.lag = lag;
  model.mean = mean;
  model.transform.resize(f, f);
  model.eigenvalues.resize(f);
  for (Eigen::Index k = 0; k < f; ++k) {
    Vector v = solver.eigenvectors().col(order[static_cast<std::size_t>(k)]);
    Eigen::Index big = 0;
    v.cwiseAbs().maxCoeff(&big);
    if (v[big] < 0) v = -v;
    model.transform.col(k) = v;
    model.eigenvalues[k] = std::clamp(solver.eigenvalues()[order[static_cast<std::size_t>(k)]], -1.0, 1.0);
  }
  return model;
}

TicaModel tica_fit(const Matrix& series, int lag) { return tica_fit(std::vector<Matrix>{series}, lag); }

std::vector<double> autocorrelation(std::span<const double> series, int max_lag, std::optional<Moments> about) {
  const auto m = series.size();
  if (max_lag < 0 || m <= static_cast<std::size_t>(max_lag)) {
    throw std::invalid_argument("autocorrelation: series length must exceed max_lag");
  }
  double mean = 0.0, var = 0.0;
  if (about) {
    mean = about->mean;
    var = about->variance;
  } else {
    mean = std::accumulate(series.begin(), series.end(), 0.0) / static_cast<double>(m);
    for (double v : series) var += (v - mean) * (v - mean);
    var /= static_cast<double>(m);
  }
  if (!(var > 0.0)) throw std::invalid_argument("autocorrelation: series has zero variance");

  std::size_t n = 1;
  while (n < 2 * m) n <<= 1;
  std::vector<double> buf(n, 0.0);
  for (std::size_t t = 0; t < m; ++t) buf[t] = series[t] - mean;
  std::vector<fftw_complex> spec(n / 2 + 1);
  static std::mutex planner;
  fftw_plan fwd, inv;
  {
    std::lock_guard lock(planner);
    fwd = fftw_plan_dft_r2c_1d(static_cast<int>(n), buf.data(), spec.data(), FFTW_ESTIMATE);
    inv = fftw_plan_dft_c2r_1d(static_cast<int>(n), spec.data(), buf.data(), FFTW_ESTIMATE);
  }
  fftw_execute(fwd);
  for (auto& c : spec) {
    c[0] = c[0] * c[0] + c[1] * c[1];
    c[1] = 0.0;
  }
  fftw_execute(inv);
  {
    std::lock_guard lock(planner);
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(inv);
  }
  std::vector<double> rho(static_cast<std::size_t>(max_lag));
  const double norm = static_cast<double>(n) * static_cast<double>(m) * var;
  for (int tau = 1; tau <= max_lag; ++tau) rho[static_cast<std::size_t>(tau - 1)] = buf[static_cast<std::size_t>(tau)] / norm;
  return rho;
}

EssResult ess(std::span<const double> series, double t_sampling, double threshold, int max_lag,
              std::optional<Moments> about) {
  if (!(t_sampling > 0.0)) throw std::invalid_argument("ess: t_sampling must be > 0");
  const auto m = series.size();
  if (m < 2) throw std::invalid_argument("ess: need at least 2 samples");
  if (max_lag <= 0) max_lag = static_cast<int>(m - 1);
  max_lag = std::min<int>(max_lag, static_cast<int>(m - 1));
  const auto rho = autocorrelation(series, max_lag, about);

  EssResult r;
  for (int tau = 1; tau <= max_lag; ++tau) {
    const double v = rho[static_cast<std::size_t>(tau - 1)];
    if (v < threshold || v < 0.0) break;
    r.rho_sum += v;
    r.cutoff = tau;
  }
  if (1.0 + 2.0 * r.rho_sum <= 0.0) {
    spdlog::warn("ess: non-positive denominator, truncating at first negative autocorrelation");
    r.fallback = true;
    r.rho_sum = 0.0;
    r.cutoff = 0;
    for (int tau = 1; tau <= max_lag && rho[static_cast<std::size_t>(tau - 1)] >= 0.0; ++tau) {
      r.rho_sum += rho[static_cast<std::size_t>(tau - 1)];
      r.cutoff = tau;
    }
  }
  r.m_eff = static_cast<double>(m) / (1.0 + 2.0 * r.rho_sum);
  r.ess_per_second = r.m_eff / t_sampling;
  return r;
}

double speedup_factor(const Matrix& model_features, double t_model, const Matrix& md_features, double t_md,
                      const TicaModel& tica, int component, double threshold, std::optional<Moments> about) {
  const Vector a = tica.component(model_features, component);
  const Vector b = tica.component(md_features, component);
  EssResult ra, rb;
  try {
    ra = ess(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())), t_model, threshold, 0, about);
    rb = ess(std::span<const double>(b.data(), static_cast<std::size_t>(b.size())), t_md, threshold, 0, about);
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("speedup_factor: ESS undefined: ") + e.what());
  }
  return ra.ess_per_second / rb.ess_per_second;
}

std::vector<double> FreeEnergyProfile::centers() const {
  std::vector<double> c;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) c.push_back(0.5 * (edges[i] + edges[i + 1]));
  return c;
}

FreeEnergyProfile free_energy_profile(std::span<const double> samples, int n_bins, double temperature,
                                      std::optional<std::pair<double, double>> range) {
  if (n_bins < 1) throw std::invalid_argument("free_energy_profile: n_bins must be >= 1");
  if (samples.empty()) throw std::invalid_argument("free_energy_profile: no samples");
  double lo, hi;
  if (range) {
    std::tie(lo, hi) = *range;
  } else {
    const auto [mn, mx] = std::minmax_element(samples.begin(), samples.end());
    lo = *mn;
    hi = *mx;
    if (hi == lo) {
      lo -= 0.5;
      hi += 0.5;
    }
    hi = std::nextafter(hi, std::numeric_limits<double>::infinity());
  }
  if (!(hi > lo)) throw std::invalid_argument("free_energy_profile: empty range");
  std::vector<double> counts(static_cast<std::size_t>(n_bins), 0.0);
  for (double x : samples) {
    if (x < lo || x >= hi) continue;
    const int b = std::min(n_bins - 1, static_cast<int>((x - lo) / (hi - lo) * n_bins));
    counts[static_cast<std::size_t>(b)] += 1.0;
  }
  FreeEnergyProfile p;
  for (int i = 0; i <= n_bins; ++i) p.edges.push_back(lo + (hi - lo) * i / n_bins);
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (total == 0.0) throw std::invalid_argument("free_energy_profile: all bins empty");
  double best = std::numeric_limits<double>::infinity();
  for (double c : counts) {
    if (c > 0) best = std::min(best, -temperature * std::log(c / total));
  }
  for (double c : counts) {
    if (c > 0) {
      p.values.emplace_back(-temperature * std::log(c / total) - best);
    } else {
      p.values.emplace_back(std::nullopt);
    }
  }
  return p;
}

double kolmogorov_pvalue(double statistic, double n_eff) {
  const double s = std::sqrt(n_eff);
  const double lambda = (s + 0.12 + 0.11 / s) * statistic;
  if (lambda < 0.2) return 1.0;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = 2.0 * std::exp(-2.0 * k * k * lambda * lambda);
    p += (k % 2) ? term : -term;
    if (term < 1e-16) break;
  }
  return std::clamp(p, 0.0, 1.0);
}

KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("ks_two_sample: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return {d, kolmogorov_pvalue(d, na * nb / (na + nb))};
}

KsResult ks_one_sample(std::vector<double> a, const std::function<double(double)>& cdf) {
  if (a.empty()) throw std::invalid_argument("ks_one_sample: empty sample");
  std::sort(a.begin(), a.end());
  const double n = static_cast<double>(a.size());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double f = cdf(a[i]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return {d, kolmogorov_pvalue(d, n)};
}

double binomial_test_greater(long long k, long long n, double p0) {
  if (n < 1 || k < 0 || k > n) throw std::invalid_argument("binomial_test_greater: need 0 <= k <= n, n >= 1");
  if (k == 0) return 1.0;
  if (p0 <= 0.0) return 0.0;
  if (p0 >= 1.0) return 1.0;
  boost::math::binomial_distribution<double> dist(static_cast<double>(n), p0);
  return boost::math::cdf(boost::math::complement(dist, static_cast<double>(k - 1)));
}

ConditionalSampler flow_conditional(ConditionalFlow& flow, std::vector<int> atom_types) {
  return [&flow, types = std::move(atom_types)](const Matrix& x, int n, RngStream& rng) {
    std::vector<Matrix> out;
    constexpr int kChunk = 256;
    for (int done = 0; done < n; done += kChunk) {
      const int count = std::min(kChunk, n - done);
      auto props = flow.sample(FlowInput::repeat(x, types, count), rng);
      for (int b = 0; b < count; ++b) out.push_back(props.positions.middleRows(b * x.rows(), x.rows()));
    }
    return out;
  };
}

ConditionalSampler dynamics_conditional(SystemPtr system, Potential potential, LangevinParams params,
                                        long long horizon_steps, int threads) {
  return [=](const Matrix& x, int n, RngStream& rng) {
    RngStream sub = rng.child(rng.next_u64());
    return conditional_ensemble(system, potential, params, x, horizon_steps, n, sub, threads);
  };
}

ConditionalReport compare_conditionals(const ConditionalSampler& model, const ConditionalSampler& reference,
                                       const Potential& potential, const SystemSpec& system, const Matrix& x_start,
                                       int n_samples, RngStream& rng) {
  if (n_samples < 1) throw std::invalid_argument("compare_conditionals: n_samples must be >= 1");
  RngStream model_rng = rng.child(1);
  RngStream ref_rng = rng.child(2);
  const auto ms = model(x_start, n_samples, model_rng);
  const auto rs = reference(x_start, n_samples, ref_rng);
  ConditionalReport r;
  const auto nb = system.bonds.size();
  r.model_bonds.resize(nb);
  r.reference_bonds.resize(nb);
  auto collect = [&](const std::vector<Matrix>& xs, std::vector<double>& energy, std::vector<double>& proj,
                     std::vector<std::vector<double>>& bonds) {
    for (const auto& x : xs) {
      energy.push_back(potential.energy(x));
      proj.push_back(features(x)[0]);
      for (std::size_t b = 0; b < nb; ++b) {
        const auto& bond = system.bonds[b];
        bonds[b].push_back((x.row(bond.i) - x.row(bond.j)).norm());
      }
    }
  };
  collect(ms, r.model_energy, r.model_projection, r.model_bonds);
  collect(rs, r.reference_energy, r.reference_projection, r.reference_bonds);
  r.energy = ks_two_sample(r.model_energy, r.reference_energy);
  r.projection = ks_two_sample(r.model_projection, r.reference_projection);
  for (std::size_t b = 0; b < nb; ++b) {
    r.bonds.push_back(ks_two_sample(r.model_bonds[b], r.reference_bonds[b]));
    r.max_bond_ks = std::max(r.max_bond_ks, r.bonds.back().statistic);
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  r.mean_energy_gap = mean(r.model_energy) - mean(r.reference_energy);
  r.energy_mismatch = r.energy.p_value < 0.01;
  return r;
}

namespace {

using Cell = std::vector<long>;

Cell cell_of(const Matrix& proj, Eigen::Index row, int k, double width) {
  Cell c(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) c[static_cast<std::size_t>(i)] = static_cast<long>(std::floor(proj(row, i) / width));
  return c;
}

/// All cells within Chebyshev distance 1 of c (including c).
std::vector<Cell> neighborhood(const Cell& c) {
  std::vector<Cell> out{c};
  for (std::size_t axis = 0; axis < c.size(); ++axis) {
    const auto n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
      for (long delta : {-1L, 1L}) {
        Cell e = out[i];
        e[axis] += delta;
        out.push_back(std::move(e));
      }
    }
  }
  return out;
}

int used_components(const TicaModel& tica, const ValidationConfig& config) {
  return std::max(1, std::min<int>(config.components, static_cast<int>(tica.transform.cols())));
}

std::set<Cell> md_cells(const TicaModel& tica, const std::vector<Matrix>& md_reference, int k, double width) {
  const Matrix proj = tica.project(trajectory_features(md_reference));
  std::set<Cell> cells;
  for (Eigen::Index t = 0; t < proj.rows(); ++t) cells.insert(cell_of(proj, t, k, width));
  return cells;
}

}  // namespace

void validate_candidates(std::vector<Candidate>& candidates, const TicaModel& tica,
                         const std::vector<Matrix>& md_reference, const SystemPtr& system,
                         const Potential& potential, const LangevinParams& dynamics,
                         const ValidationConfig& config, const RngStream& rng) {
  const int k = used_components(tica, config);
  const auto known = md_cells(tica, md_reference, k, config.cell);
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    auto& cand = candidates[c];
    const auto ends = conditional_ensemble(system, potential, dynamics, cand.positions, config.horizon_steps,
                                           config.n_ensembles, rng.child(c), config.threads);
    const Matrix proj = tica.project(trajectory_features(ends)).leftCols(k);
    int stay = 0, in_known = 0;
    for (Eigen::Index r = 0; r < proj.rows(); ++r) {
      if ((proj.row(r).transpose() - cand.center.head(k)).norm() <= cand.radius) ++stay;
      if (known.count(cell_of(proj, r, k, config.cell))) ++in_known;
    }
    cand.stay = static_cast<double>(stay) / static_cast<double>(ends.size());
    cand.known = static_cast<double>(in_known) / static_cast<double>(ends.size());
    cand.validated = cand.stay > config.stay_fraction;
    spdlog::info("validate: candidate {} stay {:.2f} known {:.2f} -> {}", c, cand.stay, cand.known,
                 cand.validated ? "validated" : "rejected");
  }
}

ValidationReport validate_new_states(const std::vector<Matrix>& md_reference, std::span<const Chain> exploration,
                                     const SystemPtr& system, const Potential& potential,
                                     const LangevinParams& dynamics, const ValidationConfig& config,
                                     const RngStream& rng) {
  if (md_reference.empty()) throw std::invalid_argument("validate_new_states: empty MD reference");
  ValidationReport report;
  report.tica = tica_fit(trajectory_features(md_reference), config.lag);
  const int k = used_components(report.tica, config);

  std::set<Cell> known_dilated;
  for (const auto& c : md_cells(report.tica, md_reference, k, config.cell)) {
    for (auto& e : neighborhood(c)) known_dilated.insert(std::move(e));
  }

  // Exploration-only points grouped by cell.
  struct Point {
    const Chain* chain;
    std::size_t frame;
    Vector tic;
  };
  std::map<Cell, std::vector<Point>> outside;
  for (const auto& chain : exploration) {
    if (chain.size() == 0) continue;
    const Matrix proj = report.tica.project(chain_features(chain)).leftCols(k);
    for (Eigen::Index t = 0; t < proj.rows(); ++t) {
      Cell c = cell_of(proj, t, k, config.cell);
      if (known_dilated.count(c)) continue;
      outside[c].push_back({&chain, static_cast<std::size_t>(t), proj.row(t).transpose()});
    }
  }

  // Connected components over adjacent cells.
  std::set<Cell> seen;
  for (const auto& [start, _] : outside) {
    if (seen.count(start)) continue;
    std::vector<Cell> stack{start};
    seen.insert(start);
    std::vector<const Point*> members;
    while (!stack.empty()) {
      Cell c = stack.back();
      stack.pop_back();
      for (const auto& p : outside.at(c)) members.push_back(&p);
      for (auto& e : neighborhood(c)) {
        if (outside.count(e) && !seen.count(e)) {
          seen.insert(e);
          stack.push_back(std::move(e));
        }
      }
    }
    if (static_cast<int>(members.size()) < config.min_points) continue;
    Vector centroid = Vector::Zero(k);
    for (const auto* p : members) centroid += p->tic;
    centroid /= static_cast<double>(members.size());
    const Point* medoid = *std::min_element(members.begin(), members.end(), [&](const Point* a, const Point* b) {
      return (a->tic - centroid).squaredNorm() < (b->tic - centroid).squaredNorm();
    });
    std::vector<double> dist;
    for (const auto* p : members) dist.push_back((p->tic - medoid->tic).norm());
    std::sort(dist.begin(), dist.end());
    const auto qi = static_cast<std::size_t>(std::floor(config.radius_quantile * static_cast<double>(dist.size() - 1)));
    Candidate cand;
    cand.positions = medoid->chain->frame(medoid->frame);
    cand.center = medoid->tic;
    cand.radius = std::max(config.min_radius, dist[qi]);
    cand.points = static_cast<int>(members.size());
    report.candidates.push_back(std::move(cand));
  }
  if (report.candidates.empty()) {
    spdlog::info("validate: none found");
    return report;
  }
  validate_candidates(report.candidates, report.tica, md_reference, system, potential, dynamics, config, rng);
  return report;
}

}  // namespace tw
