#pragma once

// Executable checks of the privacy argument:
//  * the two-candidate distinguishing game against uniform additive masks,
//    with its l1 upper bound and the exact product-form total variation;
//  * non-identifiability of W from one sketch (M_pub, M_pub W): exact rank
//    and kernel over Q, and explicit alternative weight matrices;
//  * what goes wrong when one W is sketched twice.

#include <gmpxx.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "remo/error.hpp"
#include "remo/random.hpp"
#include "remo/ring.hpp"

namespace remo {

// ---------------------------------------------------------------------------
// Distinguishing game over the reals.

inline double l1_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorCode::kShapeMismatch, "candidate vectors differ in length");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s;
}

// 1/2 + 1/2 * min(|e1 - e2|_1 / lambda, 1).
inline double tv_bound(std::span<const double> e1, std::span<const double> e2, double lambda) {
  if (!(lambda > 0)) fail(ErrorCode::kBadConfig, "mask range lambda must be positive");
  return 0.5 + 0.5 * std::min(l1_distance(e1, e2) / lambda, 1.0);
}

struct GameConfig {
  std::vector<double> e1, e2;
  double lambda = 1.0;
  std::size_t trials = 1000000;
  std::uint64_t seed = 1;
};

struct BoundReport {
  double empirical = 0;
  double bound = 0;
  double stderr_ = 0;
  std::size_t trials = 0;
  bool pass = false;
};

// Each trial: fair bit b, mask uniform on [-lambda/2, lambda/2]^N, observe
// e_b + mask. The adversary is Bayes-optimal: both likelihoods are flat on
// their boxes, so it names the box that contains the observation and flips a
// coin when both do.
inline BoundReport run_distinguishing_game(const GameConfig& cfg) {
  if (cfg.e1.size() != cfg.e2.size() || cfg.e1.empty()) fail(ErrorCode::kBadConfig, "candidates need equal, nonzero length");
  if (!(cfg.lambda > 0) || cfg.trials == 0) fail(ErrorCode::kBadConfig, "lambda > 0 and trials >= 1 required");
  const std::size_t n = cfg.e1.size();
  const double half = cfg.lambda / 2;
  Rng rng(cfg.seed);
  std::vector<double> obs(n);
  std::size_t wins = 0;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    const bool b = fair_coin(rng);
    const auto& eb = b ? cfg.e2 : cfg.e1;
    for (std::size_t i = 0; i < n; ++i) obs[i] = eb[i] + uniform_real(rng, -half, half);
    bool in1 = true, in2 = true;
    for (std::size_t i = 0; i < n; ++i) {
      in1 = in1 && std::abs(obs[i] - cfg.e1[i]) <= half;
      in2 = in2 && std::abs(obs[i] - cfg.e2[i]) <= half;
    }
    bool guess;
    if (in1 && !in2) {
      guess = false;
    } else if (in2 && !in1) {
      guess = true;
    } else {
      guess = fair_coin(rng);
    }
    wins += guess == b;
  }
  BoundReport r;
  r.trials = cfg.trials;
  r.empirical = static_cast<double>(wins) / static_cast<double>(cfg.trials);
  r.bound = tv_bound(cfg.e1, cfg.e2, cfg.lambda);
  r.stderr_ = std::sqrt(r.empirical * (1 - r.empirical) / static_cast<double>(cfg.trials));
  r.pass = r.empirical <= r.bound + 3 * r.stderr_;
  return r;
}

struct TvResult {
  double numeric = 0;      // midpoint-grid integration
  double closed_form = 0;  // 1 - prod max(1 - |delta_i| / lambda, 0)
};

// Total variation between the two uniform boxes, integrated numerically on a
// grid of `grid` cells per axis over their joint bounding box.
inline TvResult tv_exact_small(std::span<const double> e1, std::span<const double> e2, double lambda,
                               std::size_t grid = 400) {
  const std::size_t n = e1.size();
  if (n != e2.size() || n == 0) fail(ErrorCode::kBadConfig, "candidates need equal, nonzero length");
  if (n > 3) fail(ErrorCode::kDimTooLarge, "grid integration supports at most 3 dimensions");
  if (!(lambda > 0) || grid == 0) fail(ErrorCode::kBadConfig, "lambda > 0 and grid >= 1 required");
  const double half = lambda / 2;

  TvResult r;
  double overlap = 1;
  for (std::size_t i = 0; i < n; ++i) overlap *= std::max(1 - std::abs(e1[i] - e2[i]) / lambda, 0.0);
  r.closed_form = 1 - overlap;

  std::vector<double> lo(n), step(n);
  double cell = 1;
  for (std::size_t i = 0; i < n; ++i) {
    lo[i] = std::min(e1[i], e2[i]) - half;
    step[i] = (std::max(e1[i], e2[i]) + half - lo[i]) / static_cast<double>(grid);
    cell *= step[i];
  }
  const double density = 1 / std::pow(lambda, static_cast<double>(n));
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= grid;
  double sum = 0;
  std::vector<double> x(n);
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::size_t rem = idx;
    bool in1 = true, in2 = true;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = lo[i] + (static_cast<double>(rem % grid) + 0.5) * step[i];
      rem /= grid;
      in1 = in1 && std::abs(x[i] - e1[i]) <= half;
      in2 = in2 && std::abs(x[i] - e2[i]) <= half;
    }
    if (in1 != in2) sum += density * cell;
  }
  r.numeric = 0.5 * sum;
  return r;
}

// ---------------------------------------------------------------------------
// Exact linear algebra over Q.

using QMatrix = std::vector<std::vector<mpq_class>>;

inline mpq_class exact_value(std::int64_t v, std::uint32_t f) {
  mpq_class q(mpz_class(std::to_string(v)), mpz_class(1) << f);
  q.canonicalize();
  return q;
}

// Dequantized values as exact rationals.
inline QMatrix to_rational(const RingMatrix& a) {
  QMatrix out(a.rows(), std::vector<mpq_class>(a.cols()));
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out[i][j] = exact_value(a.params().to_signed(a.at(i, j)), a.params().f);
  return out;
}

inline QMatrix to_rational(const RealMatrix& a) {
  QMatrix out(a.rows, std::vector<mpq_class>(a.cols));
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out[i][j] = mpq_class(a.at(i, j));  // doubles are exact rationals
  return out;
}

inline QMatrix q_matmul(const QMatrix& a, const QMatrix& b) {
  const std::size_t n = a.size(), inner = b.size(), m = inner ? b[0].size() : 0;
  if (n && a[0].size() != inner) fail(ErrorCode::kShapeMismatch, "q_matmul shapes");
  QMatrix out(n, std::vector<mpq_class>(m, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t l = 0; l < inner; ++l) {
      if (a[i][l] == 0) continue;
      for (std::size_t j = 0; j < m; ++j) out[i][j] += a[i][l] * b[l][j];
    }
  return out;
}

// A = A_int / denom with A_int integral: exact, and lets products run on
// plain integers instead of canonicalizing rationals at every step.
struct IntegerForm {
  std::vector<std::vector<mpz_class>> values;
  mpz_class denom = 1;
};

inline IntegerForm integer_form(const QMatrix& a) {
  IntegerForm out;
  for (const auto& row : a)
    for (const auto& v : row) mpz_lcm(out.denom.get_mpz_t(), out.denom.get_mpz_t(), v.get_den_mpz_t());
  for (const auto& row : a) {
    std::vector<mpz_class> r;
    r.reserve(row.size());
    for (const auto& v : row) r.emplace_back(v.get_num() * (out.denom / v.get_den()));
    out.values.push_back(std::move(r));
  }
  return out;
}

// Scales each row by its own denominator lcm. Row space and solution sets of
// [A | b] systems are unchanged.
inline std::vector<std::vector<mpz_class>> integer_rows(const QMatrix& a) {
  std::vector<std::vector<mpz_class>> out;
  for (const auto& row : a) {
    auto r = integer_form(QMatrix{row});
    out.push_back(std::move(r.values[0]));
  }
  return out;
}

struct FractionFreeRref {
  std::vector<std::size_t> pivots;  // pivot column of each pivot row
  mpz_class scale = 1;              // every pivot equals this; RREF = matrix / scale
};

// Fraction-free Gauss-Jordan over the integers, in place. Each update
// divides exactly by the previous pivot, so entries stay bounded by minors
// and no gcd is ever taken.
inline FractionFreeRref rref_integer(std::vector<std::vector<mpz_class>>& a, std::size_t cols_to_reduce) {
  FractionFreeRref out;
  std::size_t row = 0;
  mpz_class prev = 1, t;
  for (std::size_t c = 0; c < cols_to_reduce && row < a.size(); ++c) {
    std::size_t p = row;
    while (p < a.size() && a[p][c] == 0) ++p;
    if (p == a.size()) continue;
    std::swap(a[p], a[row]);
    const mpz_class piv = a[row][c];
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (i == row) continue;
      const mpz_class lead = a[i][c];
      for (std::size_t j = 0; j < a[i].size(); ++j) {
        if (j == c) continue;
        t = piv * a[i][j];
        mpz_submul(t.get_mpz_t(), lead.get_mpz_t(), a[row][j].get_mpz_t());
        mpz_divexact(a[i][j].get_mpz_t(), t.get_mpz_t(), prev.get_mpz_t());
      }
      a[i][c] = 0;
    }
    prev = piv;
    out.pivots.push_back(c);
    ++row;
  }
  out.scale = prev;
  return out;
}

struct SolutionSpace {
  std::size_t m = 0, d = 0;
  std::size_t rank = 0;
  QMatrix kernel;  // kernel basis, one d-vector per entry
  std::size_t kernel_dim() const { return kernel.size(); }
};

inline SolutionSpace kernel_analysis(const QMatrix& base) {
  if (base.empty() || base[0].empty()) fail(ErrorCode::kBadDims, "empty base");
  SolutionSpace s;
  s.m = base.size();
  s.d = base[0].size();
  auto a = integer_rows(base);
  const FractionFreeRref r = rref_integer(a, s.d);
  s.rank = r.pivots.size();
  std::vector<bool> is_pivot(s.d, false);
  for (auto c : r.pivots) is_pivot[c] = true;
  for (std::size_t free = 0; free < s.d; ++free) {
    if (is_pivot[free]) continue;
    std::vector<mpq_class> v(s.d, 0);
    v[free] = 1;
    for (std::size_t k = 0; k < r.pivots.size(); ++k) {
      v[r.pivots[k]] = mpq_class(-a[k][free], r.scale);
      v[r.pivots[k]].canonicalize();
    }
    s.kernel.push_back(std::move(v));
  }
  return s;
}

inline SolutionSpace kernel_analysis(const RingMatrix& base) { return kernel_analysis(to_rational(base)); }

// One solution of base * W0 = target (free variables at zero).
inline QMatrix particular_solution(const QMatrix& base, const QMatrix& target) {
  const std::size_t m = base.size(), d = base[0].size(), o = target[0].size();
  if (target.size() != m) fail(ErrorCode::kShapeMismatch, "target rows differ from base rows");
  QMatrix aug(m);
  for (std::size_t i = 0; i < m; ++i) {
    aug[i] = base[i];
    aug[i].insert(aug[i].end(), target[i].begin(), target[i].end());
  }
  auto a = integer_rows(aug);
  const FractionFreeRref r = rref_integer(a, d);
  for (std::size_t i = r.pivots.size(); i < m; ++i)
    for (std::size_t j = d; j < d + o; ++j)
      if (a[i][j] != 0) fail(ErrorCode::kShapeMismatch, "target is not in the column space of the base");
  QMatrix w0(d, std::vector<mpq_class>(o, 0));
  for (std::size_t k = 0; k < r.pivots.size(); ++k)
    for (std::size_t j = 0; j < o; ++j) {
      w0[r.pivots[k]][j] = mpq_class(a[k][d + j], r.scale);
      w0[r.pivots[k]][j].canonicalize();
    }
  return w0;
}

// max |base * w - target|, exactly.
inline double max_abs_residual(const QMatrix& base, const QMatrix& w, const QMatrix& target) {
  const IntegerForm a = integer_form(base), b = integer_form(w);
  const std::size_t n = base.size(), inner = w.size(), o = inner ? w[0].size() : 0;
  if (n && base[0].size() != inner) fail(ErrorCode::kShapeMismatch, "residual shapes");
  const mpz_class denom = a.denom * b.denom;
  mpq_class worst = 0;
  mpz_class acc;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) {
      acc = 0;
      for (std::size_t l = 0; l < inner; ++l) mpz_addmul(acc.get_mpz_t(), a.values[i][l].get_mpz_t(), b.values[l][j].get_mpz_t());
      mpq_class diff(acc, denom);
      diff.canonicalize();
      diff -= target[i][j];
      if (abs(diff) > worst) worst = abs(diff);
    }
  return worst.get_d();
}

// `count` distinct W' = W0 + Z with M_pub W' = R_pub and Z != 0. Each column
// of Z is a random nonzero integer combination of kernel vectors.
inline std::vector<QMatrix> enumerate_consistent_weights(const QMatrix& base, const QMatrix& pool, std::size_t count,
                                                         std::uint64_t seed) {
  const SolutionSpace space = kernel_analysis(base);
  if (space.kernel.empty()) fail(ErrorCode::kTrivialKernel, "base has full column rank; W is identifiable");
  const QMatrix w0 = particular_solution(base, pool);
  const std::size_t d = space.d, o = pool[0].size();
  const IntegerForm kernel = integer_form(space.kernel);
  Rng rng(seed);
  std::vector<QMatrix> out;
  std::vector<long> coeff(space.kernel.size());
  mpz_class z;
  while (out.size() < count) {
    QMatrix w = w0;
    bool moved = false;
    for (std::size_t j = 0; j < o; ++j) {
      for (auto& c : coeff) c = static_cast<long>(uniform_below(rng, 9)) - 4;
      for (std::size_t i = 0; i < d; ++i) {
        z = 0;
        for (std::size_t v = 0; v < coeff.size(); ++v)
          if (coeff[v]) z += coeff[v] * kernel.values[v][i];
        if (z == 0) continue;
        mpq_class dz(z, kernel.denom);
        dz.canonicalize();
        w[i][j] += dz;
        moved = true;
      }
    }
    if (!moved) continue;  // Z = 0 is not an alternative
    if (std::find(out.begin(), out.end(), w) != out.end()) continue;
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sketch stacking. With several bases for one W the attacker solves the
// stacked ring system S W = R directly. Elimination over Z_{2^k} pivots on
// the entry of lowest 2-adic valuation v; each unknown is then fixed modulo
// 2^(k-v), and since real weights are tiny next to 2^(k-v-1) the centred
// lift is the true value.

namespace detail {

inline std::uint64_t odd_inverse(std::uint64_t a) {
  std::uint64_t x = a;  // correct to 3 bits for odd a
  for (int i = 0; i < 5; ++i) x *= 2 - a * x;
  return x;
}

}  // namespace detail

struct StackingResult {
  std::size_t sketches = 0;
  std::size_t stacked_rows = 0;
  std::size_t rational_rank = 0;
  unsigned max_pivot_valuation = 0;
  bool solved = false;
  std::optional<RingMatrix> recovered;
  double max_error = INFINITY;  // vs. the true W on dequantized values, if given
  bool recovered_w = false;
};

inline StackingResult stacking_attack_demo(const std::vector<RingMatrix>& bases, const std::vector<RingMatrix>& pools,
                                           const RingMatrix* truth = nullptr, double tolerance = 1e-6) {
  if (bases.empty() || bases.size() != pools.size()) fail(ErrorCode::kBadConfig, "need matching bases and pools");
  const QuantParams p = bases[0].params();
  const std::size_t d = bases[0].cols(), o = pools[0].cols();
  StackingResult res;
  res.sketches = bases.size();

  std::vector<std::vector<std::uint64_t>> rows;
  QMatrix stacked;
  for (std::size_t b = 0; b < bases.size(); ++b) {
    if (bases[b].cols() != d || pools[b].rows() != bases[b].rows() || pools[b].cols() != o) {
      fail(ErrorCode::kShapeMismatch, "sketch shapes disagree");
    }
    const QMatrix q = to_rational(bases[b]);
    stacked.insert(stacked.end(), q.begin(), q.end());
    for (std::size_t i = 0; i < bases[b].rows(); ++i) {
      std::vector<std::uint64_t> r(bases[b].row(i).begin(), bases[b].row(i).end());
      r.insert(r.end(), pools[b].row(i).begin(), pools[b].row(i).end());
      rows.push_back(std::move(r));
    }
  }
  res.stacked_rows = rows.size();
  res.rational_rank = kernel_analysis(stacked).rank;
  if (res.rational_rank < d) return res;  // underdetermined over Q, hopeless

  const std::uint64_t mask = p.mask();
  const unsigned k = p.k;
  auto valuation = [&](std::uint64_t v) { return v == 0 ? k : static_cast<unsigned>(std::countr_zero(v)); };
  std::vector<unsigned> val(d);
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t piv = c;
    for (std::size_t i = c + 1; i < rows.size(); ++i)
      if (valuation(rows[i][c]) < valuation(rows[piv][c])) piv = i;
    val[c] = valuation(rows[piv][c]);
    if (val[c] > k / 2) return res;  // too little of this unknown survives
    std::swap(rows[piv], rows[c]);
    res.max_pivot_valuation = std::max(res.max_pivot_valuation, val[c]);
    const std::uint64_t inv = detail::odd_inverse(rows[c][c] >> val[c]);
    for (std::size_t i = c + 1; i < rows.size(); ++i) {
      if (rows[i][c] == 0) continue;
      const std::uint64_t f = (rows[i][c] >> val[c]) * inv;
      for (std::size_t j = c; j < d + o; ++j) rows[i][j] = (rows[i][j] - f * rows[c][j]) & mask;
    }
  }

  RingMatrix w(d, o, p);
  for (std::size_t j = 0; j < o; ++j) {
    for (std::size_t ii = d; ii-- > 0;) {
      std::uint64_t rhs = rows[ii][d + j];
      for (std::size_t l = ii + 1; l < d; ++l) rhs -= rows[ii][l] * w.at(l, j);
      rhs &= mask;
      const unsigned v = val[ii];
      if (v && (rhs & ((std::uint64_t{1} << v) - 1))) return res;  // inconsistent system
      const unsigned bits = k - v;
      const std::uint64_t low = bits == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << bits) - 1;
      std::uint64_t x = ((rhs >> v) * detail::odd_inverse(rows[ii][ii] >> v)) & low;
      if (x >> (bits - 1)) x |= ~low;  // centred lift
      w.set(ii, j, x);
    }
  }
  res.solved = true;
  res.recovered = w;
  if (truth) {
    const RealMatrix a = dequantize(w), b = dequantize(*truth);
    res.max_error = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) res.max_error = std::max(res.max_error, std::abs(a.data[i] - b.data[i]));
    res.recovered_w = res.max_error <= tolerance;
  }
  return res;
}

}  // namespace remo
