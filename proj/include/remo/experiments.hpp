#pragma once

// Drivers behind the command-line subcommands, kept in the library so the
// acceptance run exercises exactly the same code.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <memory>
#include <optional>
#include <thread>
#include <vector>

#include "remo/attack.hpp"
#include "remo/audit.hpp"
#include "remo/config.hpp"
#include "remo/enclave.hpp"
#include "remo/net.hpp"
#include "remo/privacy.hpp"
#include "remo/provider.hpp"

namespace remo {

// Owns the provider side for a run: in-process, a private loopback server,
// or nothing at all when the provider is remote.
class ProviderHost {
 public:
  ProviderHost(const ModelWeights& weights, TransportSpec spec, bool record = true) : spec_(std::move(spec)) {
    if (spec_.kind != TransportSpec::Kind::kRemoteTcp) {
      provider_ = std::make_unique<Provider>(weights.config, weights.projections, record);
    }
    if (spec_.kind == TransportSpec::Kind::kLocalTcp) {
      server_ = std::make_unique<TcpServer>(*provider_, Endpoint{"127.0.0.1", 0});
    }
  }

  // One connection per session on TCP.
  std::unique_ptr<Transport> connect() const {
    switch (spec_.kind) {
      case TransportSpec::Kind::kInProcess: return std::make_unique<InProcessTransport>(*provider_);
      case TransportSpec::Kind::kLocalTcp: return std::make_unique<TcpTransport>(server_->endpoint());
      case TransportSpec::Kind::kRemoteTcp: return std::make_unique<TcpTransport>(Endpoint{spec_.host, spec_.port});
    }
    fail(ErrorCode::kBadConfig, "unknown transport");
  }

  const Provider* provider() const { return provider_.get(); }

 private:
  TransportSpec spec_;
  std::unique_ptr<Provider> provider_;
  std::unique_ptr<TcpServer> server_;
};

inline std::vector<TokenSeq> run_prompts(const RunConfig& cfg, std::size_t count) {
  return synthetic_corpus(count, cfg.prompt_len, cfg.model.vocab, cfg.corpus_seed());
}

// ---------------------------------------------------------------------------
// demo

struct DemoReport {
  TokenSeq prompt, response, reference;
  std::optional<AuditReport> audit;  // only when the provider runs here
  std::size_t transcript_entries = 0;
  std::optional<std::vector<OpId>> pool_mismatches;  // only with check_pools
  bool matches() const { return response == reference; }
};

inline DemoReport run_demo(const RunConfig& cfg) {
  const ModelWeights weights = ModelWeights::generate(cfg.model, cfg.model_seed());
  ProviderHost host(weights, parse_transport(cfg.transport));
  Enclave enclave(cfg.model, weights.structural, PrgKey::from_u64(cfg.mask_seed()), cfg.sketch_rows);
  DemoReport r;
  r.prompt = run_prompts(cfg, 1)[0];
  const GenerateOptions opts{cfg.max_new, true};
  auto transport = host.connect();
  r.response = enclave.run_session(*transport, 0, r.prompt, opts);
  r.reference = reference_generate(weights, r.prompt, opts);
  if (host.provider()) {
    const auto entries = host.provider()->transcript().entries();
    r.transcript_entries = entries.size();
    r.audit = inspect_transcript(entries);
  }
  // Probe after the audit snapshot so the probe traffic stays out of it.
  if (cfg.check_pools) {
    auto probe = host.connect();
    r.pool_mismatches = enclave.check_pools(*probe, 1, derive_seed(cfg.trial_seed(), 7));
  }
  return r;
}

// ---------------------------------------------------------------------------
// invariance

struct Divergence {
  std::size_t prompt = 0;
  std::size_t position = 0;
  std::optional<TokenId> expected, got;  // empty past the end of a sequence
};

struct InvarianceReport {
  std::size_t prompts = 0;
  std::size_t pairs_equal = 0;
  std::size_t tokens_compared = 0;
  std::size_t tokens_equal = 0;
  double tra = 1.0;
  std::vector<Divergence> divergences;
  bool pass() const { return divergences.empty() && tra == 1.0; }
};

inline std::optional<Divergence> first_divergence(std::size_t prompt, const TokenSeq& expected, const TokenSeq& got) {
  const std::size_t n = std::max(expected.size(), got.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto e = i < expected.size() ? std::optional<TokenId>(expected[i]) : std::nullopt;
    const auto g = i < got.size() ? std::optional<TokenId>(got[i]) : std::nullopt;
    if (e != g) return Divergence{prompt, i, e, g};
  }
  return std::nullopt;
}

inline InvarianceReport run_invariance(const RunConfig& cfg) {
  if (cfg.prompts == 0) fail(ErrorCode::kEmptyRun, "invariance needs at least one prompt");
  const ModelWeights weights = ModelWeights::generate(cfg.model, cfg.model_seed());
  ProviderHost host(weights, parse_transport(cfg.transport), /*record=*/false);
  Enclave enclave(cfg.model, weights.structural, PrgKey::from_u64(cfg.mask_seed()), cfg.sketch_rows);
  const auto prompts = run_prompts(cfg, cfg.prompts);
  const GenerateOptions opts{cfg.max_new, true};

  InvarianceReport r;
  r.prompts = prompts.size();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const TokenSeq expected = reference_generate(weights, prompts[i], opts);
    EnclaveHooks hooks;
    if (cfg.hook_corrupt_prompt >= 0 && static_cast<std::size_t>(cfg.hook_corrupt_prompt) == i) {
      // Lift token 0 at the first step where it would not win anyway.
      std::size_t step = 0;
      while (step + 1 < expected.size() && expected[step] == 0) ++step;
      hooks.corrupt_reply = std::make_pair(std::uint64_t{step}, cfg.model.head_op());
    }
    auto transport = host.connect();
    const TokenSeq got = enclave.run_session(*transport, i, prompts[i], opts, hooks);

    const std::size_t common = std::min(expected.size(), got.size());
    r.tokens_compared += std::max(expected.size(), got.size());
    for (std::size_t j = 0; j < common; ++j) r.tokens_equal += expected[j] == got[j];
    if (auto d = first_divergence(i, expected, got)) {
      r.divergences.push_back(*d);
    } else {
      ++r.pairs_equal;
    }
  }
  r.tra = r.tokens_compared ? static_cast<double>(r.tokens_equal) / static_cast<double>(r.tokens_compared) : 1.0;
  return r;
}

// ---------------------------------------------------------------------------
// attack

inline AttackConfig attack_config(const RunConfig& cfg) {
  AttackConfig a;
  a.model = cfg.model;
  a.model_seed = cfg.model_seed();
  a.mask_seed = cfg.mask_seed();
  a.corpus_seed = cfg.corpus_seed();
  a.prompts = cfg.attack_prompts;
  a.prompt_len = cfg.attack_prompt_len;
  a.max_new = cfg.attack_max_new;
  a.zipf_s = cfg.zipf_s;
  a.train_fraction = cfg.train_fraction;
  return a;
}

struct AttackVerdict {
  bool unmasked_high = false;     // unmasked prompt TRA >= 0.90
  bool masked_in_ci = false;      // masked prompt TRA inside the 99% interval around 1/vocab
  bool masked_low = false;        // every masked row <= 3x chance
  double ratio = 0;               // unmasked / masked on prompt positions
  bool ratio_ok = false;          // >= 20
  bool pass() const { return unmasked_high && masked_in_ci && masked_low && ratio_ok; }
};

// Acceptance is judged on prompt positions: their labels are uniform, so
// chance is exactly 1/vocab. Response labels follow the model's own skewed
// output distribution, where chance is not 1/vocab (see README).
inline AttackVerdict judge_attack(const AttackReport& report) {
  AttackVerdict v;
  const AttackRow& plain = report.row(false, "prompt");
  const AttackRow& masked = report.row(true, "prompt");
  v.unmasked_high = plain.tra >= 0.90;
  v.masked_in_ci = masked.tra >= masked.ci_low && masked.tra <= masked.ci_high;
  v.masked_low = true;
  for (const auto& r : report.rows)
    if (r.masked) v.masked_low = v.masked_low && r.tra <= 3 * r.chance_level;
  v.ratio = masked.tra > 0 ? plain.tra / masked.tra : INFINITY;
  v.ratio_ok = v.ratio >= 20;
  return v;
}

// ---------------------------------------------------------------------------
// privacy

struct GameRow {
  std::size_t dim = 1;
  double norm_ratio = 0;
  double exact = 0;  // optimal success, 1/2 + TV/2 from the product form
  BoundReport report;
};

// Candidates 0 and an equal split of ratio * lambda over `dim` coordinates,
// so |e1 - e2|_1 / lambda = ratio.
inline GameConfig game_point(double lambda, std::size_t dim, double ratio, std::size_t trials, std::uint64_t seed) {
  GameConfig g;
  g.e1.assign(dim, 0.0);
  g.e2.assign(dim, ratio * lambda / static_cast<double>(dim));
  g.lambda = lambda;
  g.trials = trials;
  g.seed = seed;
  return g;
}

inline std::vector<GameRow> run_game_grid(const RunConfig& cfg) {
  std::vector<GameRow> rows;
  std::uint64_t idx = 0;
  for (std::size_t dim : cfg.game_dims) {
    for (double ratio : cfg.ratios) {
      const GameConfig g = game_point(cfg.lambda, dim, ratio, cfg.trials, derive_seed(cfg.trial_seed(), idx++));
      GameRow r;
      r.dim = dim;
      r.norm_ratio = ratio;
      double overlap = 1;
      for (std::size_t i = 0; i < dim; ++i) overlap *= std::max(1 - std::abs(g.e2[i] - g.e1[i]) / g.lambda, 0.0);
      r.exact = 0.5 + 0.5 * (1 - overlap);
      r.report = run_distinguishing_game(g);
      rows.push_back(r);
    }
  }
  return rows;
}

// Scalar game at ratio 0.1 must land within 3 sigma of 0.55.
struct ScalarCheck {
  bool present = false;
  double empirical = 0, sigma = 0;
  bool pass = false;
};

inline ScalarCheck scalar_tenth_check(const std::vector<GameRow>& rows) {
  ScalarCheck c;
  for (const auto& r : rows) {
    if (r.dim != 1 || std::abs(r.norm_ratio - 0.1) > 1e-12) continue;
    c.present = true;
    c.empirical = r.report.empirical;
    c.sigma = std::sqrt(0.55 * 0.45 / static_cast<double>(r.report.trials));
    c.pass = std::abs(c.empirical - 0.55) <= 3 * c.sigma;
  }
  return c;
}

struct TvRow {
  std::size_t dim = 1;
  double norm_ratio = 0;
  double numeric = 0, closed_form = 0, l1_bound = 0;
  bool pass = false;
};

// Grid integration against the product form, and the product form against
// the l1 bound, for dims 1..3.
inline std::vector<TvRow> run_tv_checks(const RunConfig& cfg) {
  std::vector<TvRow> rows;
  for (std::size_t dim = 1; dim <= 3; ++dim) {
    const std::size_t grid = dim == 1 ? 4000 : dim == 2 ? 800 : 120;
    const double tol = 3.0 * static_cast<double>(dim) / static_cast<double>(grid);
    for (double ratio : cfg.ratios) {
      const GameConfig g = game_point(cfg.lambda, dim, ratio, 1, 0);
      const TvResult t = tv_exact_small(g.e1, g.e2, g.lambda, grid);
      TvRow r{dim, ratio, t.numeric, t.closed_form, std::min(ratio, 1.0), false};
      r.pass = std::abs(t.numeric - t.closed_form) <= tol && t.closed_form <= r.l1_bound + 1e-12;
      rows.push_back(r);
    }
  }
  return rows;
}

struct KernelRow {
  OpId op;
  std::size_t m = 0, d = 0, rank = 0, kernel_dim = 0;
  bool kernel_ok = false;  // kernel_dim == d - m > 0
  std::size_t consistent = 0;
  double max_residual = INFINITY;
  bool consistent_ok = false;  // `count` distinct W' != W, residual <= 1e-9
  bool one_sketch_recovers = false;
  bool stacked_ran = false;
  bool stacked_recovers = false;
  double stacked_error = INFINITY;
  std::string note;
};

inline std::vector<KernelRow> run_kernel_checks(const RunConfig& cfg) {
  const ModelWeights weights = ModelWeights::generate(cfg.model, cfg.model_seed());
  const PrgKey key = PrgKey::from_u64(cfg.mask_seed());
  Provider provider(cfg.model, weights.projections, false);
  InProcessTransport transport(provider);
  Enclave enclave(cfg.model, weights.structural, key, cfg.sketch_rows);
  if (!cfg.hook_force_square) enclave.setup(transport);

  // A second provider instance has no issuance record: this is the bypass the
  // stacking demonstration needs, and exactly what the single-issue rule on a
  // real provider forbids.
  Provider amnesiac(cfg.model, weights.projections, false);

  std::vector<KernelRow> rows;
  for (OpId op : cfg.model.op_ids()) {
    const RingMatrix& w = weights.projections->at(op);
    RingMatrix base, pool;
    if (cfg.hook_force_square) {
      const std::size_t d = cfg.model.input_dim(op);
      base = detail::sample_public_base(key, op, d, d, cfg.model.params);
      pool = ring_matmul(base, w);  // no honest provider answers a full-height base
    } else {
      const MaskBase& mb = enclave.pools().at(op);
      base = mb.public_base;
      pool = *mb.pool;
    }
    KernelRow r;
    r.op = op;
    r.m = base.rows();
    r.d = base.cols();
    const QMatrix qm = to_rational(base);
    const SolutionSpace space = kernel_analysis(qm);
    r.rank = space.rank;
    r.kernel_dim = space.kernel_dim();
    r.kernel_ok = r.kernel_dim == r.d - r.m && r.kernel_dim > 0;

    // Real-domain pool: the ring pool wraps modulo 2^k, the rational one does not.
    const QMatrix qw = to_rational(w);
    const QMatrix real_pool = q_matmul(qm, qw);
    try {
      const auto alts = enumerate_consistent_weights(qm, real_pool, cfg.consistent_count, derive_seed(cfg.trial_seed(), 1000 + op.value));
      r.consistent = alts.size();
      r.max_residual = 0;
      bool distinct = true;
      for (std::size_t a = 0; a < alts.size(); ++a) {
        r.max_residual = std::max(r.max_residual, max_abs_residual(qm, alts[a], real_pool));
        distinct = distinct && alts[a] != qw;
        for (std::size_t b = 0; b < a; ++b) distinct = distinct && alts[a] != alts[b];
      }
      r.consistent_ok = alts.size() == cfg.consistent_count && distinct && r.max_residual <= 1e-9;
    } catch (const Error& e) {
      r.note = e.what();
    }

    r.one_sketch_recovers = stacking_attack_demo({base}, {pool}, &w).recovered_w;
    if (!cfg.hook_force_square) {
      const RingMatrix second = detail::sample_public_base(key, op, r.m, r.d, cfg.model.params, /*session=*/1);
      const RingMatrix second_pool = std::get<PoolReply>(amnesiac.handle(SetupBase{op, second})).pool;
      const auto stacked = stacking_attack_demo({base, second}, {pool, second_pool}, &w);
      r.stacked_ran = true;
      r.stacked_recovers = stacked.recovered_w;
      r.stacked_error = stacked.max_error;
    }
    rows.push_back(r);
  }
  return rows;
}

struct PrivacyReport {
  std::vector<GameRow> games;
  ScalarCheck scalar;
  std::vector<TvRow> tv;
  std::vector<KernelRow> kernels;

  bool games_pass() const {
    for (const auto& g : games)
      if (!g.report.pass) return false;
    return !scalar.present || scalar.pass;
  }
  bool tv_pass() const {
    for (const auto& t : tv)
      if (!t.pass) return false;
    return true;
  }
  bool kernel_pass() const {
    for (const auto& k : kernels)
      if (!k.kernel_ok || !k.consistent_ok || k.one_sketch_recovers || !k.stacked_recovers) return false;
    return !kernels.empty();
  }
  bool pass() const { return games_pass() && tv_pass() && kernel_pass(); }
};

inline PrivacyReport run_privacy(const RunConfig& cfg) {
  PrivacyReport r;
  r.games = run_game_grid(cfg);
  r.scalar = scalar_tenth_check(r.games);
  r.tv = run_tv_checks(cfg);
  r.kernels = run_kernel_checks(cfg);
  return r;
}

// ---------------------------------------------------------------------------
// bench

struct RequestLatency {
  std::size_t clients = 0, client = 0, request = 0, max_new = 0, new_tokens = 0;
  double ttft_ms = 0, e2e_ms = 0;
  bool correct = false;
};

struct LatencySummary {
  std::size_t clients = 0, max_new = 0, requests = 0;
  double mean_e2e_ms = 0, p50_e2e_ms = 0, p95_e2e_ms = 0;
  double mean_ttft_ms = 0, p50_ttft_ms = 0, p95_ttft_ms = 0;
  bool all_correct = true;
  bool ttft_ok = true;  // TTFT <= end-to-end for every request
};

struct LatencyReport {
  std::vector<RequestLatency> requests;
  std::vector<LatencySummary> by_clients;  // fixed max_new, varying clients
  std::vector<LatencySummary> by_length;   // one client, varying max_new
  bool length_trend_monotone = false;      // informational only

  bool pass() const {
    for (const auto* group : {&by_clients, &by_length})
      for (const auto& s : *group)
        if (!s.all_correct || !s.ttft_ok) return false;
    return !by_clients.empty();
  }
};

namespace detail {

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::min(v.size() - 1, rank ? rank - 1 : 0)];
}

inline LatencySummary summarize(const std::vector<RequestLatency>& reqs, std::size_t clients, std::size_t max_new) {
  LatencySummary s;
  s.clients = clients;
  s.max_new = max_new;
  std::vector<double> e2e, ttft;
  for (const auto& r : reqs) {
    e2e.push_back(r.e2e_ms);
    ttft.push_back(r.ttft_ms);
    s.all_correct = s.all_correct && r.correct;
    s.ttft_ok = s.ttft_ok && r.ttft_ms <= r.e2e_ms;
  }
  s.requests = reqs.size();
  for (double v : e2e) s.mean_e2e_ms += v / static_cast<double>(e2e.size());
  for (double v : ttft) s.mean_ttft_ms += v / static_cast<double>(ttft.size());
  s.p50_e2e_ms = percentile(e2e, 0.5);
  s.p95_e2e_ms = percentile(e2e, 0.95);
  s.p50_ttft_ms = percentile(ttft, 0.5);
  s.p95_ttft_ms = percentile(ttft, 0.95);
  return s;
}

}  // namespace detail

// Bench always talks TCP: a private loopback server unless a remote
// provider was named.
inline LatencyReport run_bench(const RunConfig& cfg) {
  using Clock = std::chrono::steady_clock;
  if (cfg.bench_clients.empty() || cfg.bench_requests == 0) fail(ErrorCode::kEmptyRun, "bench needs clients and requests");
  TransportSpec spec = parse_transport(cfg.transport);
  if (spec.kind == TransportSpec::Kind::kInProcess) spec.kind = TransportSpec::Kind::kLocalTcp;

  const ModelWeights weights = ModelWeights::generate(cfg.model, cfg.model_seed());
  ProviderHost host(weights, spec, /*record=*/false);
  Enclave enclave(cfg.model, weights.structural, PrgKey::from_u64(cfg.mask_seed()), cfg.sketch_rows);
  enclave.setup(*host.connect());

  std::size_t max_clients = 0;
  for (auto c : cfg.bench_clients) max_clients = std::max(max_clients, c);
  const auto prompts = run_prompts(cfg, max_clients * cfg.bench_requests);
  std::atomic<std::uint64_t> next_session{0};

  auto run_group = [&](std::size_t clients, std::size_t max_new) {
    const GenerateOptions base_opts{max_new, false};
    std::vector<TokenSeq> expected(clients * cfg.bench_requests);
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] = reference_generate(weights, prompts[i], base_opts);

    std::vector<RequestLatency> out(clients * cfg.bench_requests);
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(clients);
    for (std::size_t c = 0; c < clients; ++c) {
      threads.emplace_back([&, c] {
        try {
          for (std::size_t q = 0; q < cfg.bench_requests; ++q) {
            const std::size_t idx = c * cfg.bench_requests + q;
            RequestLatency& r = out[idx];
            r.clients = clients;
            r.client = c;
            r.request = q;
            r.max_new = max_new;
            std::optional<Clock::time_point> first;
            GenerateOptions opts = base_opts;
            opts.on_token = [&](TokenId) {
              if (!first) first = Clock::now();
            };
            const auto t0 = Clock::now();
            auto transport = host.connect();
            const TokenSeq got = enclave.run_session(*transport, next_session++, prompts[idx], opts);
            const auto t1 = Clock::now();
            r.new_tokens = got.size();
            r.e2e_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            r.ttft_ms = std::chrono::duration<double, std::milli>(first.value_or(t1) - t0).count();
            r.correct = got == expected[idx];
          }
        } catch (...) {
          errors[c] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    return out;
  };

  LatencyReport report;
  for (std::size_t clients : cfg.bench_clients) {
    auto reqs = run_group(clients, cfg.max_new);
    report.by_clients.push_back(detail::summarize(reqs, clients, cfg.max_new));
    report.requests.insert(report.requests.end(), reqs.begin(), reqs.end());
  }
  for (std::size_t len : cfg.bench_lengths) {
    auto reqs = run_group(1, len);
    report.by_length.push_back(detail::summarize(reqs, 1, len));
    report.requests.insert(report.requests.end(), reqs.begin(), reqs.end());
  }
  report.length_trend_monotone = true;
  for (std::size_t i = 1; i < report.by_length.size(); ++i)
    report.length_trend_monotone =
        report.length_trend_monotone && report.by_length[i].mean_e2e_ms >= report.by_length[i - 1].mean_e2e_ms;
  return report;
}

}  // namespace remo
