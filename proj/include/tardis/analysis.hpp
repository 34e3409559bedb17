#pragma once

// Path-length simulations over abstract read/write traces and Jacobian norm
// probes for a linear-algebra-explicit memory recurrence.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "tardis/errors.hpp"
#include "tardis/rng.hpp"

namespace tardis {

enum class AccessModel { tardis_uniform, umann, urmann };

inline std::string_view to_string(AccessModel m) {
  switch (m) {
    case AccessModel::tardis_uniform: return "tardis-uniform";
    case AccessModel::umann: return "uMANN";
    case AccessModel::urmann: return "urMANN";
  }
  return "?";
}

inline AccessModel parse_access_model(std::string_view s) {
  for (auto m : {AccessModel::tardis_uniform, AccessModel::umann, AccessModel::urmann}) {
    if (s == to_string(m)) return m;
  }
  throw ValueError("unknown model kind '" + std::string(s) +
                   "' (expected tardis-uniform, uMANN or urMANN)");
}

/// Reads and writes of one episode; index t-1 holds step t.
struct AccessTrace {
  std::size_t cells = 0;
  std::vector<std::size_t> reads;
  std::vector<std::size_t> writes;
  [[nodiscard]] std::size_t steps() const { return reads.size(); }
};

/// Reads are uniform over the cells written so far (all k once full); step 1
/// reads an empty memory. Writes: TARDIS fills slots 0..k-1 for t <= k and
/// then overwrites the cell it read; uMANN fills the same way and then writes
/// a uniformly random cell; urMANN writes cyclically.
inline AccessTrace simulate_trace(AccessModel model, std::size_t T, std::size_t k, Rng& rng) {
  if (T == 0 || k == 0) {
    throw ValueError("simulate: T and k must be positive");
  }
  AccessTrace tr;
  tr.cells = k;
  for (std::size_t t = 1; t <= T; ++t) {
    const std::size_t j = t == 1 ? 0 : rng.below(std::min(k, t - 1));
    std::size_t w = 0;
    switch (model) {
      case AccessModel::tardis_uniform: w = t <= k ? t - 1 : j; break;
      case AccessModel::umann: w = t <= k ? t - 1 : rng.below(k); break;
      case AccessModel::urmann: w = (t - 1) % k; break;
    }
    tr.reads.push_back(j);
    tr.writes.push_back(w);
  }
  return tr;
}

/// Wormhole-chain length per cell after the trace: a write to cell i after
/// reading j sets len(i) = len(j) + 1; writes during the first k steps set 0.
inline std::vector<std::size_t> chain_lengths(const AccessTrace& tr) {
  std::vector<std::size_t> len(tr.cells, 0);
  for (std::size_t t = 1; t <= tr.steps(); ++t) {
    const std::size_t j = tr.reads[t - 1];
    const std::size_t i = tr.writes[t - 1];
    len[i] = t <= tr.cells ? 0 : len[j] + 1;
  }
  return len;
}

struct DependencyPath {
  std::size_t length = 0;       // edges on a shortest path
  std::size_t recurrence = 0;   // of which outside wormholes (t-1 -> t)
  std::size_t wormholes = 0;
};

/// Shortest path from state t0 to state t1 (1-based steps) over recurrence
/// edges t-1 -> t and wormhole edges w -> t, where w is the step that last
/// wrote the cell read at step t. Among shortest paths the one with the
/// fewest recurrence edges is reported.
inline DependencyPath shortest_dependency_path(const AccessTrace& tr, std::size_t t0,
                                               std::size_t t1) {
  if (t0 >= t1) {
    throw ValueError("shortest path: need t0 < t1 (got " + std::to_string(t0) + ", " +
                     std::to_string(t1) + ")");
  }
  if (t1 > tr.steps()) {
    throw ValueError("shortest path: t1 beyond the trace length");
  }
  constexpr std::size_t inf = std::numeric_limits<std::size_t>::max();
  // last_write[t] = step whose write the read at step t sees (0 if none)
  std::vector<std::size_t> last_write(tr.steps() + 1, 0);
  std::vector<std::size_t> writer(tr.cells, 0);
  for (std::size_t t = 1; t <= tr.steps(); ++t) {
    last_write[t] = writer[tr.reads[t - 1]];
    writer[tr.writes[t - 1]] = t;
  }
  std::vector<DependencyPath> best(t1 + 1, DependencyPath{inf, inf, 0});
  best[t0] = {0, 0, 0};
  auto better = [](const DependencyPath& a, const DependencyPath& b) {
    return a.length < b.length || (a.length == b.length && a.recurrence < b.recurrence);
  };
  for (std::size_t t = t0 + 1; t <= t1; ++t) {
    if (best[t - 1].length != inf) {
      DependencyPath c = best[t - 1];
      ++c.length;
      ++c.recurrence;
      if (better(c, best[t])) best[t] = c;
    }
    const std::size_t w = last_write[t];
    if (w >= t0 && w != 0 && w < t && best[w].length != inf) {
      DependencyPath c = best[w];
      ++c.length;
      ++c.wormholes;
      if (better(c, best[t])) best[t] = c;
    }
  }
  return best[t1];
}

struct PathStats {
  AccessModel model = AccessModel::tardis_uniform;
  std::size_t T = 0;
  std::size_t k = 0;
  std::size_t n_sims = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> len_values;  // final per-cell lengths, sim-major
  double mean_len = 0.0;     // mean over sims of the mean final chain length
  double sd_len = 0.0;
  std::size_t t0 = 0;
  std::size_t t1 = 0;
  double mean_path = 0.0;    // mean shortest dependency path t1 -> t0
  double mean_outside = 0.0; // mean recurrence edges on that path
};

inline PathStats simulate_paths(AccessModel model, std::size_t T, std::size_t k,
                                std::size_t n_sims, std::uint64_t seed,
                                std::optional<std::pair<std::size_t, std::size_t>> dependency = {}) {
  if (n_sims == 0) throw ValueError("simulate: n_sims must be positive");
  if (T == 0 || k == 0) throw ValueError("simulate: T and k must be positive");
  PathStats s;
  s.model = model;
  s.T = T;
  s.k = k;
  s.n_sims = n_sims;
  s.seed = seed;
  if (dependency) {
    s.t0 = dependency->first;
    s.t1 = dependency->second;
  }
  const Rng root(seed);
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < n_sims; ++i) {
    Rng rng = root.substream("sim", i);
    const AccessTrace tr = simulate_trace(model, T, k, rng);
    const auto len = chain_lengths(tr);
    s.len_values.insert(s.len_values.end(), len.begin(), len.end());
    const double m = std::accumulate(len.begin(), len.end(), 0.0) / static_cast<double>(k);
    sum += m;
    sum2 += m * m;
    if (dependency) {
      const DependencyPath p = shortest_dependency_path(tr, s.t0, s.t1);
      s.mean_path += static_cast<double>(p.length);
      s.mean_outside += static_cast<double>(p.recurrence);
    }
  }
  const double n = static_cast<double>(n_sims);
  s.mean_len = sum / n;
  s.sd_len = std::sqrt(std::max(0.0, sum2 / n - s.mean_len * s.mean_len));
  s.mean_path /= n;
  s.mean_outside /= n;
  return s;
}

inline void write_path_csv_header(std::ostream& out) {
  out << "model_kind,T,k,seed,n_sims,mean_len,sd_len,t0,t1,mean_path,mean_outside\n";
}

inline void write_path_csv_row(std::ostream& out, const PathStats& s) {
  out << to_string(s.model) << ',' << s.T << ',' << s.k << ',' << s.seed << ',' << s.n_sims << ','
      << s.mean_len << ',' << s.sd_len << ',' << s.t0 << ',' << s.t1 << ',' << s.mean_path << ','
      << s.mean_outside << '\n';
}

/// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw ValueError("spearman: need two equal-length samples of size >= 2");
  }
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t q = i; q <= j; ++q) r[idx[q]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// --------------------------------------------------------- Jacobian probes

/// Dense row-major matrix for the probe algebra.
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}
  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

inline Mat operator*(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) throw ShapeError("probe: matrix product dimension mismatch");
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

inline Mat operator+(Mat a, const Mat& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw ShapeError("probe: matrix sum dimension mismatch");
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

inline Mat operator-(Mat a, const Mat& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw ShapeError("probe: matrix difference dimension mismatch");
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] -= b.v[i];
  return a;
}

inline std::vector<double> mat_vec(const Mat& a, const std::vector<double>& x) {
  std::vector<double> y(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) y[i] += a(i, j) * x[j];
  }
  return y;
}

inline Mat scale_rows(const std::vector<double>& d, const Mat& a) {
  Mat out = a;
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) out(i, j) *= d[i];
  }
  return out;
}

/// Largest singular value by power iteration on A^T A.
inline double spectral_norm(const Mat& a, std::size_t max_iter = 200, double tol = 1e-8) {
  if (a.rows == 0 || a.cols == 0) return 0.0;
  std::vector<double> x(a.cols);
  for (std::size_t j = 0; j < a.cols; ++j) x[j] = 1.0 + 0.01 * static_cast<double>(j % 7);
  Mat at(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) at(j, i) = a(i, j);
  }
  auto norm = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double e : v) s += e * e;
    return std::sqrt(s);
  };
  double sigma = 0.0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    const double nx = norm(x);
    if (nx == 0.0) return 0.0;
    for (double& e : x) e /= nx;
    const auto ax = mat_vec(a, x);
    const double s = norm(ax);
    if (it > 0 && std::abs(s - sigma) <= tol * std::max(s, 1e-300)) {
      return s;
    }
    sigma = s;
    x = mat_vec(at, ax);
  }
  return sigma;
}

enum class Activation { linear, tanh };

/// z_t = W h_{t-1} + V A h_{w(t)} + U x_t,  h_t = f(z_t), where h_{w(t)} is
/// the state written at the step whose cell is read at t (none: no read).
struct ProbeModel {
  Mat W;  // n x n
  Mat V;  // n x m
  Mat A;  // m x n, write projection
  Mat U;  // n x d_x
  Activation f = Activation::linear;

  [[nodiscard]] std::size_t hidden() const { return W.rows; }
};

inline Mat gaussian(std::size_t r, std::size_t c, Rng& rng, double sd) {
  Mat m(r, c);
  for (double& e : m.v) e = sd * rng.normal();
  return m;
}

/// Random Gaussian matrices with ||W|| = w_norm and ||V||, ||A|| = 1.
inline ProbeModel random_probe_model(std::size_t n, std::size_t m, std::size_t dx, double w_norm,
                                     Activation f, Rng& rng) {
  ProbeModel p;
  auto normalized = [&](std::size_t r, std::size_t c, double target) {
    Mat x = gaussian(r, c, rng, 1.0);
    const double s = spectral_norm(x, 1000, 1e-12);
    for (double& e : x.v) e *= target / s;
    return x;
  };
  p.W = normalized(n, n, w_norm);
  p.V = normalized(n, m, 1.0);
  p.A = normalized(m, n, 1.0);
  p.U = gaussian(n, dx, rng, 1.0 / std::sqrt(static_cast<double>(dx)));
  p.f = f;
  return p;
}

struct JacobianProbe {
  std::size_t t0 = 0, t1 = 0;
  double q_norm = 0.0;
  double r_norm = 0.0;
  double full_norm = 0.0;
  double path_norm = 0.0;  // ||diag(f'_{t1}) V A||, the direct memory term
};

/// `source[t]` (t = 1..t1, index t) is the step whose written state is read
/// at step t, or nullopt for no read. States are written every step.
inline JacobianProbe jacobian_probe(const ProbeModel& p, std::size_t t0, std::size_t t1,
                                    const std::vector<std::vector<double>>& inputs,
                                    const std::vector<std::optional<std::size_t>>& source) {
  if (t0 >= t1) throw ValueError("probe: need t0 < t1");
  if (inputs.size() < t1 + 1 || source.size() < t1 + 1) {
    throw ValueError("probe: inputs and read sources must cover steps 0..t1");
  }
  const std::size_t n = p.hidden();
  std::vector<std::vector<double>> h(t1 + 1, std::vector<double>(n, 0.0));
  std::vector<std::optional<Mat>> J(t1 + 1);  // d h_t / d h_{t0}; empty means zero
  J[t0] = Mat::identity(n);
  Mat Q = Mat::identity(n);
  std::vector<double> last_fprime(n, 1.0);
  for (std::size_t t = 1; t <= t1; ++t) {
    auto z = mat_vec(p.W, h[t - 1]);
    const auto ux = mat_vec(p.U, inputs[t]);
    std::optional<std::size_t> w = source[t];
    if (w && *w >= t) throw ValueError("probe: read source must precede the reading step");
    if (w) {
      const auto vr = mat_vec(p.V, mat_vec(p.A, h[*w]));
      for (std::size_t i = 0; i < n; ++i) z[i] += vr[i];
    }
    std::vector<double> fprime(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      z[i] += ux[i];
      if (p.f == Activation::tanh) {
        h[t][i] = std::tanh(z[i]);
        fprime[i] = 1.0 - h[t][i] * h[t][i];
      } else {
        h[t][i] = z[i];
      }
      if (!std::isfinite(h[t][i])) {
        throw NumericalError("probe: non-finite state at step " + std::to_string(t));
      }
    }
    if (t <= t0) continue;
    Mat inner(n, n);
    if (J[t - 1]) inner = p.W * *J[t - 1];
    if (w && J[*w]) inner = inner + p.V * (p.A * *J[*w]);
    J[t] = scale_rows(fprime, inner);
    Q = scale_rows(fprime, p.W * Q);
    last_fprime = fprime;
  }
  JacobianProbe out;
  out.t0 = t0;
  out.t1 = t1;
  out.full_norm = spectral_norm(*J[t1]);
  out.q_norm = spectral_norm(Q);
  out.r_norm = spectral_norm(*J[t1] - Q);
  out.path_norm = spectral_norm(scale_rows(last_fprime, p.V * p.A));
  return out;
}

/// The cell holding h_{t0} is read at t1; every other step reads a state
/// written before t0 (step 0), so only the final read depends on h_{t0}.
inline std::vector<std::optional<std::size_t>> oracle_sources(std::size_t t0, std::size_t t1) {
  std::vector<std::optional<std::size_t>> s(t1 + 1);
  for (std::size_t t = 1; t <= t1; ++t) s[t] = t == t1 ? t0 : 0;
  return s;
}

inline std::vector<std::optional<std::size_t>> no_reads(std::size_t t1) {
  return std::vector<std::optional<std::size_t>>(t1 + 1);
}

/// Read sources implied by an access trace (last writer of each read cell).
inline std::vector<std::optional<std::size_t>> trace_sources(const AccessTrace& tr) {
  std::vector<std::optional<std::size_t>> s(tr.steps() + 1);
  std::vector<std::optional<std::size_t>> writer(tr.cells);
  for (std::size_t t = 1; t <= tr.steps(); ++t) {
    s[t] = writer[tr.reads[t - 1]];
    writer[tr.writes[t - 1]] = t;
  }
  return s;
}

inline void write_probe_csv_header(std::ostream& out) {
  out << "policy,activation,t0,t1,gap,q_norm,r_norm,full_norm,path_norm\n";
}

inline void write_probe_csv_row(std::ostream& out, std::string_view policy, Activation f,
                                const JacobianProbe& j) {
  out << policy << ',' << (f == Activation::linear ? "linear" : "tanh") << ',' << j.t0 << ','
      << j.t1 << ',' << (j.t1 - j.t0) << ',' << j.q_norm << ',' << j.r_norm << ',' << j.full_norm
      << ',' << j.path_norm << '\n';
}

}  // namespace tardis
