// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "remo/audit.hpp"
#include "remo/experiments.hpp"
#include "remo/masking.hpp"
#include "remo/net.hpp"
#include "remo/wire.hpp"

namespace remo {
namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

RingMatrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, const QuantParams& p) {
  std::vector<std::uint64_t> v(rows * cols);
  for (auto& x : v) x = rng();
  return RingMatrix(rows, cols, p, std::move(v));
}

Outcome output_invariance() {
  const RunConfig cfg;
  const InvarianceReport r = run_invariance(cfg);
  return {r.pass() && r.prompts == 100,
          fmt("prompts=%zu identical=%zu TRA=%.6f", r.prompts, r.pairs_equal, r.tra)};
}

Outcome exact_recovery() {
  Rng rng(2024);
  std::size_t mismatches = 0;
  const std::size_t tuples = 10000;
  for (std::size_t t = 0; t < tuples; ++t) {
    const auto k = static_cast<std::uint32_t>(2 + uniform_below(rng, 63));
    const QuantParams p{k, static_cast<std::uint32_t>(1 + uniform_below(rng, k - 1))};
    const std::size_t n = 1 + uniform_below(rng, 8);
    const std::size_t d = 2 + uniform_below(rng, 7);
    const std::size_t m = 1 + uniform_below(rng, d - 1);
    const std::size_t out = 1 + uniform_below(rng, 8);
    const RingMatrix e = random_matrix(rng, n, d, p);
    const RingMatrix w = random_matrix(rng, d, out, p);
    const RingMatrix pvt = random_matrix(rng, n, m, p);
    const RingMatrix pub = random_matrix(rng, m, d, p);

    const RingMatrix masked = mask_embedding(e, pvt, pub);
    const RingMatrix o_hat = ring_matmul(masked, w);
    const RingMatrix pool = ring_matmul(pub, w);
    if (recover(o_hat, pvt, pool) != ring_matmul(e, w)) ++mismatches;
  }
  return {mismatches == 0, fmt("tuples=%zu mismatched=%zu", tuples, mismatches)};
}

Outcome attack_degradation() {
  const AttackReport report = run_attack_eval(attack_config(RunConfig{}));
  const AttackVerdict v = judge_attack(report);
  const AttackRow& plain = report.row(false, "prompt");
  const AttackRow& masked = report.row(true, "prompt");
  const bool enough = masked.positions >= 10000 && plain.positions >= 10000;
  return {v.pass() && enough,
          fmt("prompt positions=%zu unmasked TRA=%.4f masked TRA=%.5f CI=[%.5f, %.5f] ratio=%.1f", masked.positions,
              plain.tra, masked.tra, masked.ci_low, masked.ci_high, v.ratio)};
}

Outcome bound_holds() {
  const RunConfig cfg;
  const auto rows = run_game_grid(cfg);
  std::size_t ok = 0;
  double worst = -INFINITY;
  for (const auto& r : rows) {
    ok += r.report.pass && r.report.trials == 1000000;
    worst = std::max(worst, r.report.empirical - r.report.bound - 3 * r.report.stderr_);
  }
  const ScalarCheck s = scalar_tenth_check(rows);
  return {ok == rows.size() && !rows.empty() && s.present && s.pass,
          fmt("grid points=%zu within bound=%zu worst margin=%.5f scalar@0.1=%.5f (sigma %.5f)", rows.size(), ok,
              worst, s.empirical, s.sigma)};
}

Outcome non_identifiability() {
  const auto rows = run_kernel_checks(RunConfig{});
  std::size_t kernel = 0, consistent = 0, single = 0, stacked = 0;
  double residual = 0, error = 0;
  for (const auto& r : rows) {
    kernel += r.kernel_ok && r.kernel_dim == r.d - r.m;
    consistent += r.consistent_ok && r.consistent >= 10;
    single += !r.one_sketch_recovers;
    stacked += r.stacked_ran && r.stacked_recovers;
    residual = std::max(residual, r.max_residual);
    error = std::max(error, r.stacked_error);
  }
  const std::size_t n = rows.size();
  return {n > 0 && kernel == n && consistent == n && single == n && stacked == n,
          fmt("matrices=%zu kernel=d-m:%zu consistent:%zu max residual=%.2e one sketch blocked:%zu two sketches "
              "recover:%zu max error=%.2e",
              n, kernel, consistent, residual, single, stacked, error)};
}

std::vector<Message> messages_of(const Provider& p) {
  std::vector<Message> out;
  for (const auto& e : p.transcript().entries()) out.push_back(e.message);
  return out;
}

Outcome protocol_integrity() {
  // wire round trip
  Rng rng(77);
  std::size_t lossy = 0;
  for (int t = 0; t < 10000; ++t) {
    const QuantParams p{static_cast<std::uint32_t>(2 + uniform_below(rng, 63)), 1};
    auto mat = [&] { return random_matrix(rng, 1 + uniform_below(rng, 6), 1 + uniform_below(rng, 6), p); };
    const OpId op{static_cast<std::uint32_t>(rng())};
    Message m;
    switch (uniform_below(rng, 7)) {
      case 0: m = SetupBase{op, mat()}; break;
      case 1: m = PoolReply{op, mat()}; break;
      case 2: m = MatMulRequest{rng(), rng(), op, mat()}; break;
      case 3: m = MatMulReply{rng(), rng(), op, mat()}; break;
      case 4: m = OpenSession{rng()}; break;
      case 5: m = CloseSession{rng()}; break;
      default: {
        std::string detail(uniform_below(rng, 40), 'x');
        for (auto& ch : detail) ch = static_cast<char>(' ' + uniform_below(rng, 90));
        m = ErrorReply{static_cast<ErrorCode>(uniform_below(rng, 20)), detail};
      }
    }
    lossy += !(decode_message(encode_message(m)) == m);
  }

  // transports
  RunConfig cfg;
  cfg.prompts = 10;
  const ModelWeights weights = ModelWeights::generate(cfg.model, cfg.model_seed());
  const PrgKey key = PrgKey::from_u64(cfg.mask_seed());
  const auto prompts = run_prompts(cfg, cfg.prompts);
  const GenerateOptions opts{cfg.max_new, true};

  Provider local(cfg.model, weights.projections);
  InProcessTransport inproc(local);
  Enclave e1(cfg.model, weights.structural, key);
  Provider remote(cfg.model, weights.projections);
  TcpServer server(remote, Endpoint{"127.0.0.1", 0});
  Enclave e2(cfg.model, weights.structural, key);
  std::size_t same_output = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const TokenSeq a = e1.run_session(inproc, i, prompts[i], opts);
    TcpTransport tcp(server.endpoint());
    const TokenSeq b = e2.run_session(tcp, i, prompts[i], opts);
    same_output += a == b && a == reference_generate(weights, prompts[i], opts);
  }
  const bool bitwise = same_output == prompts.size() && messages_of(local) == messages_of(remote);

  // audit: honest run, then the two negative controls
  const bool honest = inspect_transcript(local.transcript().entries()).pass();

  Provider plain(cfg.model, weights.projections);
  InProcessTransport plain_t(plain);
  Enclave e3(cfg.model, weights.structural, key);
  EnclaveHooks no_mask;
  no_mask.disable_masking = true;
  for (std::size_t i = 0; i < 4; ++i) e3.run_session(plain_t, i, prompts[i], opts, no_mask);
  const bool no_mask_caught = !inspect_transcript(plain.transcript().entries()).clause("uniformity").pass;

  auto entries = local.transcript().entries();
  for (const auto& e : entries) {
    if (auto* r = std::get_if<MatMulRequest>(&e.message)) {
      MatMulRequest dup = *r;
      dup.step += 1000;
      entries.push_back({Direction::kToProvider, e.timestamp_ns, dup});
      break;
    }
  }
  const bool dup_caught = !inspect_transcript(entries).clause("freshness").pass;

  return {lossy == 0 && bitwise && honest && no_mask_caught && dup_caught,
          fmt("wire lossy=%zu/10000 tcp==inproc=%s honest audit=%s no-masking caught=%s duplicate caught=%s", lossy,
              bitwise ? "yes" : "no", honest ? "pass" : "fail", no_mask_caught ? "yes" : "no",
              dup_caught ? "yes" : "no")};
}

Outcome efficiency() {
  RunConfig cfg;
  cfg.bench_clients = {1, 2, 4, 8};
  const LatencyReport r = run_bench(cfg);
  std::size_t clients_seen = 0, correct = 0, ttft = 0;
  for (const auto& q : r.requests) {
    correct += q.correct;
    ttft += q.ttft_ms <= q.e2e_ms;
  }
  for (const auto& s : r.by_clients) clients_seen += s.requests > 0;
  return {r.pass() && clients_seen == 4 && correct == r.requests.size() && ttft == r.requests.size(),
          fmt("client counts=%zu requests=%zu correct=%zu ttft<=e2e=%zu", clients_seen, r.requests.size(), correct,
              ttft)};
}

}  // namespace
}  // namespace remo

int main() {
  using namespace remo;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"output invariance", output_invariance},
      {"exact recovery", exact_recovery},
      {"attack degradation", attack_degradation},
      {"distinguishing bound", bound_holds},
      {"model non-identifiability", non_identifiability},
      {"protocol integrity", protocol_integrity},
      {"efficiency sanity", efficiency},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s %zu %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d of %zu criteria failed\n", failed, criteria.size());
  return failed ? 1 : 0;
}
