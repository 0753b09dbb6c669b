// remo: command-line driver for the masked-outsourcing toolkit.
//
// Exit codes: 0 every check of the command passed, 1 a check failed,
// 2 usage, configuration or protocol error.

#include <CLI11.hpp>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <unistd.h>

#include "remo/config.hpp"
#include "remo/experiments.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace remo {
namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string transport;
  std::optional<std::size_t> prompts, max_new, trials;
  std::vector<std::size_t> clients;
};

RunConfig resolve(const CommonArgs& a, const std::string& command) {
  RunConfig cfg = a.config_path.empty() ? RunConfig{} : load_config(a.config_path);
  if (const char* env = std::getenv("REMO_SEED")) apply_setting(cfg, "seed", env, "REMO_SEED");
  for (const auto& s : a.sets) apply_override(cfg, s);
  if (a.seed) cfg.seed = *a.seed;
  if (!a.out.empty()) cfg.out = a.out;
  if (!a.transport.empty()) cfg.transport = a.transport;
  if (a.prompts) (command == "attack" ? cfg.attack_prompts : cfg.prompts) = *a.prompts;
  if (a.max_new) (command == "attack" ? cfg.attack_max_new : cfg.max_new) = *a.max_new;
  if (a.trials) cfg.trials = *a.trials;
  if (!a.clients.empty()) cfg.bench_clients = a.clients;
  parse_transport(cfg.transport);  // reject bad specs before any work
  cfg.model.validate();
  return cfg;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

const auto g_start = std::chrono::steady_clock::now();

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

class Reports {
 public:
  explicit Reports(const RunConfig& cfg, std::string command) : dir_(cfg.out), command_(std::move(command)) {
    fs::create_directories(dir_);
    json_["command"] = command_;
    // The output directory is where, not what: it goes to meta.json so runs
    // differing only in location stay byte-identical.
    std::istringstream lines(serialize_config(cfg));
    std::string config, line;
    while (std::getline(lines, line))
      if (line.rfind("out = ", 0) != 0) config += line + "\n";
    json_["config"] = config;
  }

  json& data() { return json_; }
  std::ostringstream& csv() { return csv_; }

  int finish(bool pass) {
    json_["pass"] = pass;
    write("report.json", json_.dump(2) + "\n");
    if (!csv_.str().empty()) write("report.csv", csv_.str());
    char host[256] = {};
    ::gethostname(host, sizeof host - 1);
    json meta{{"command", command_},
              {"finished_utc", utc_now()},
              {"elapsed_s", std::chrono::duration<double>(std::chrono::steady_clock::now() - g_start).count()},
              {"host", host},
              {"out", dir_},
              {"exit_code", pass ? 0 : 1}};
    write("meta.json", meta.dump(2) + "\n");
    std::cout << (pass ? "PASS" : "FAIL") << "  reports in " << dir_ << "\n";
    return pass ? 0 : 1;
  }

 private:
  void write(const std::string& name, const std::string& text) {
    std::ofstream f(fs::path(dir_) / name, std::ios::binary);
    if (!f) fail(ErrorCode::kBadConfig, "cannot write " + (fs::path(dir_) / name).string());
    f << text;
  }

  std::string dir_, command_;
  json json_;
  std::ostringstream csv_;
};

std::string tokens_str(const TokenSeq& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + std::to_string(t[i]);
  return s;
}

int cmd_demo(const RunConfig& cfg) {
  const DemoReport r = run_demo(cfg);
  Reports rep(cfg, "demo");
  std::cout << "prompt:    " << tokens_str(r.prompt) << "\n"
            << "response:  " << tokens_str(r.response) << "\n"
            << "reference: " << tokens_str(r.reference) << "  (" << (r.matches() ? "match" : "MISMATCH") << ")\n";
  auto& j = rep.data();
  j["prompt"] = r.prompt;
  j["response"] = r.response;
  j["reference"] = r.reference;
  j["matches_reference"] = r.matches();
  bool pass = r.matches();
  if (r.audit) {
    std::cout << "transcript: " << r.transcript_entries << " messages, " << r.audit->masked_payloads
              << " masked payloads\n";
    j["transcript_messages"] = r.transcript_entries;
    j["masked_payloads"] = r.audit->masked_payloads;
    for (const auto& c : r.audit->clauses) {
      std::cout << "  audit " << c.name << ": " << (c.pass ? "ok" : "FAIL " + c.detail) << "\n";
      j["audit"][c.name] = c.pass;
    }
  }
  if (r.pool_mismatches) {
    std::cout << "pool check: " << (r.pool_mismatches->empty() ? "all pools agree" : "MISMATCH");
    for (OpId op : *r.pool_mismatches) std::cout << " " << to_string(op);
    std::cout << "\n";
    j["pool_mismatches"] = r.pool_mismatches->size();
    pass = pass && r.pool_mismatches->empty();
  }
  rep.csv() << "kind,index,token\n";
  for (std::size_t i = 0; i < r.prompt.size(); ++i) rep.csv() << "prompt," << i << "," << r.prompt[i] << "\n";
  for (std::size_t i = 0; i < r.response.size(); ++i) rep.csv() << "response," << i << "," << r.response[i] << "\n";
  return rep.finish(pass);
}

int cmd_invariance(const RunConfig& cfg) {
  const InvarianceReport r = run_invariance(cfg);
  Reports rep(cfg, "invariance");
  std::cout << "prompts " << r.prompts << ", identical pairs " << r.pairs_equal << ", TRA " << fmt(r.tra) << "\n";
  auto& j = rep.data();
  j["prompts"] = r.prompts;
  j["pairs_equal"] = r.pairs_equal;
  j["tokens_compared"] = r.tokens_compared;
  j["tokens_equal"] = r.tokens_equal;
  j["tra"] = r.tra;
  j["divergences"] = json::array();
  rep.csv() << "prompt,position,expected,got\n";
  auto tok = [](const std::optional<TokenId>& t) { return t ? std::to_string(*t) : std::string("none"); };
  for (const auto& d : r.divergences) {
    std::cout << "  divergence: prompt " << d.prompt << " position " << d.position << " expected " << tok(d.expected)
              << " got " << tok(d.got) << "\n";
    j["divergences"].push_back({{"prompt", d.prompt}, {"position", d.position}, {"expected", tok(d.expected)},
                                {"got", tok(d.got)}});
    rep.csv() << d.prompt << "," << d.position << "," << tok(d.expected) << "," << tok(d.got) << "\n";
  }
  return rep.finish(r.pass());
}

int cmd_attack(const RunConfig& cfg) {
  const AttackReport r = run_attack_eval(attack_config(cfg));
  const AttackVerdict v = judge_attack(r);
  Reports rep(cfg, "attack");
  write_attack_csv(rep.csv(), r);
  std::cout << rep.csv().str();
  auto& j = rep.data();
  j["train_rows"] = r.train_rows;
  for (const auto& row : r.rows) {
    j["rows"].push_back({{"tap", row.tap},
                         {"masked", row.masked},
                         {"position_class", row.position_class},
                         {"positions", row.positions},
                         {"tra", row.tra},
                         {"cosine_proxy", row.cosine_proxy},
                         {"chance_level", row.chance_level},
                         {"ci_low", row.ci_low},
                         {"ci_high", row.ci_high}});
  }
  j["clauses"] = {{"unmasked_prompt_tra_ge_0_90", v.unmasked_high},
                  {"masked_prompt_tra_in_ci", v.masked_in_ci},
                  {"masked_tra_le_3x_chance", v.masked_low},
                  {"ratio_ge_20", v.ratio_ok}};
  j["ratio"] = v.ratio;
  std::cout << "unmasked>=0.90 " << v.unmasked_high << "  masked in CI " << v.masked_in_ci << "  masked<=3x chance "
            << v.masked_low << "  ratio " << fmt(v.ratio) << "\n";
  return rep.finish(v.pass());
}

int cmd_privacy(const RunConfig& cfg) {
  const PrivacyReport r = run_privacy(cfg);
  Reports rep(cfg, "privacy");
  auto& j = rep.data();
  rep.csv() << "dim,norm_ratio,bound,empirical,stderr,pass\n";
  std::cout << "distinguishing game (" << cfg.trials << " trials per point)\n";
  for (const auto& g : r.games) {
    rep.csv() << g.dim << "," << fmt(g.norm_ratio) << "," << fmt(g.report.bound) << "," << fmt(g.report.empirical) << ","
              << fmt(g.report.stderr_) << "," << (g.report.pass ? 1 : 0) << "\n";
    std::cout << "  dim " << g.dim << " ratio " << fmt(g.norm_ratio) << "  empirical " << fmt(g.report.empirical)
              << "  exact " << fmt(g.exact) << "  bound " << fmt(g.report.bound) << (g.report.pass ? "" : "  FAIL")
              << "\n";
    j["games"].push_back({{"dim", g.dim},
                          {"norm_ratio", g.norm_ratio},
                          {"bound", g.report.bound},
                          {"empirical", g.report.empirical},
                          {"stderr", g.report.stderr_},
                          {"exact_optimal", g.exact},
                          {"trials", g.report.trials},
                          {"pass", g.report.pass}});
  }
  if (r.scalar.present) {
    std::cout << "  scalar ratio 0.1 vs 0.55: " << fmt(r.scalar.empirical) << " (3 sigma = " << fmt(3 * r.scalar.sigma)
              << ") " << (r.scalar.pass ? "ok" : "FAIL") << "\n";
    j["scalar_tenth"] = {{"empirical", r.scalar.empirical}, {"sigma", r.scalar.sigma}, {"pass", r.scalar.pass}};
  }
  for (const auto& t : r.tv) {
    j["tv"].push_back({{"dim", t.dim},
                       {"norm_ratio", t.norm_ratio},
                       {"numeric", t.numeric},
                       {"closed_form", t.closed_form},
                       {"l1_bound", t.l1_bound},
                       {"pass", t.pass}});
  }
  std::cout << "total variation cross-checks: " << (r.tv_pass() ? "ok" : "FAIL") << "\n";
  std::cout << "weight matrices (m, d, kernel dim, consistent W', stacked recovery)\n";
  for (const auto& k : r.kernels) {
    std::cout << "  " << to_string(k.op) << "  m=" << k.m << " d=" << k.d << " kernel=" << k.kernel_dim
              << (k.kernel_ok ? "" : " FAIL") << "  W'=" << k.consistent << (k.consistent_ok ? "" : " FAIL")
              << "  one sketch " << (k.one_sketch_recovers ? "RECOVERS" : "fails") << ", two sketches "
              << (!k.stacked_ran ? "n/a" : k.stacked_recovers ? "recover" : "FAIL") << (k.note.empty() ? "" : "  (" + k.note + ")") << "\n";
    j["kernels"].push_back({{"op", to_string(k.op)},
                            {"m", k.m},
                            {"d", k.d},
                            {"rank", k.rank},
                            {"kernel_dim", k.kernel_dim},
                            {"kernel_ok", k.kernel_ok},
                            {"consistent", k.consistent},
                            {"max_residual", k.max_residual},
                            {"consistent_ok", k.consistent_ok},
                            {"one_sketch_recovers", k.one_sketch_recovers},
                            {"stacked_recovers", k.stacked_recovers},
                            {"stacked_error", k.stacked_error},
                            {"note", k.note}});
  }
  j["clauses"] = {{"games", r.games_pass()}, {"tv", r.tv_pass()}, {"kernel", r.kernel_pass()}};
  return rep.finish(r.pass());
}

int cmd_bench(const RunConfig& cfg) {
  const LatencyReport r = run_bench(cfg);
  Reports rep(cfg, "bench");
  auto& j = rep.data();
  rep.csv() << "clients,client,request,max_new,new_tokens,ttft_ms,e2e_ms,correct\n";
  for (const auto& q : r.requests) {
    rep.csv() << q.clients << "," << q.client << "," << q.request << "," << q.max_new << "," << q.new_tokens << ","
              << fmt(q.ttft_ms) << "," << fmt(q.e2e_ms) << "," << (q.correct ? 1 : 0) << "\n";
  }
  auto summary = [](const LatencySummary& s) {
    return json{{"clients", s.clients},         {"max_new", s.max_new},         {"requests", s.requests},
                {"mean_e2e_ms", s.mean_e2e_ms}, {"p50_e2e_ms", s.p50_e2e_ms},   {"p95_e2e_ms", s.p95_e2e_ms},
                {"mean_ttft_ms", s.mean_ttft_ms}, {"p50_ttft_ms", s.p50_ttft_ms}, {"p95_ttft_ms", s.p95_ttft_ms},
                {"all_correct", s.all_correct}, {"ttft_le_e2e", s.ttft_ok}};
  };
  std::cout << "clients  max_new  mean_e2e_ms  p95_e2e_ms  mean_ttft_ms  correct\n";
  auto line = [](const LatencySummary& s) {
    std::printf("%7zu  %7zu  %11.3f  %10.3f  %12.3f  %s\n", s.clients, s.max_new, s.mean_e2e_ms, s.p95_e2e_ms,
                s.mean_ttft_ms, s.all_correct && s.ttft_ok ? "yes" : "NO");
  };
  for (const auto& s : r.by_clients) {
    line(s);
    j["by_clients"].push_back(summary(s));
  }
  for (const auto& s : r.by_length) {
    line(s);
    j["by_length"].push_back(summary(s));
  }
  std::fflush(stdout);
  j["length_trend_monotone"] = r.length_trend_monotone;
  return rep.finish(r.pass());
}

volatile std::sig_atomic_t g_stop = 0;

int cmd_serve(const RunConfig& cfg) {
  TransportSpec spec = parse_transport(cfg.transport);
  Endpoint ep;
  if (spec.kind == TransportSpec::Kind::kRemoteTcp) ep = Endpoint{spec.host, spec.port};
  const ModelWeights weights = ModelWeights::generate(cfg.model, cfg.model_seed());
  Provider provider(cfg.model, weights.projections, /*record=*/false);

  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);  // before the server spawns threads

  TcpServer server(provider, ep);
  std::cout << "listening on " << server.endpoint().host << ":" << server.endpoint().port << std::endl;
  if (cfg.serve_seconds > 0) {
    timespec ts{static_cast<time_t>(cfg.serve_seconds), 0};
    sigtimedwait(&set, nullptr, &ts);
  } else {
    int sig = 0;
    sigwait(&set, &sig);
  }
  server.stop();
  std::cout << "stopped" << std::endl;
  return 0;
}

void add_common(CLI::App* sub, CommonArgs& a) {
  sub->add_option("--config", a.config_path, "config file (key = value lines)");
  sub->add_option("--set", a.sets, "override one config key, key=value (repeatable)");
  sub->add_option("--out", a.out, "output directory for report.csv / report.json / meta.json");
  sub->add_option("--seed", a.seed, "master seed (overrides REMO_SEED and the config)");
  sub->add_option("--transport", a.transport, "inproc | tcp | tcp:host:port");
}

}  // namespace
}  // namespace remo

int main(int argc, char** argv) {
  using namespace remo;
  CLI::App app{"Masked matrix-multiplication outsourcing: demo, checks and experiments"};
  app.require_subcommand(1);
  CommonArgs args;

  auto* demo = app.add_subcommand("demo", "one masked generation, compared with the plain reference");
  auto* invariance = app.add_subcommand("invariance", "masked vs reference generation over many prompts");
  auto* attack = app.add_subcommand("attack", "nearest-centroid token inversion on plain and masked views");
  auto* privacy = app.add_subcommand("privacy", "distinguishing game, TV checks, weight non-identifiability");
  auto* bench = app.add_subcommand("bench", "latency and time-to-first-token under concurrent clients");
  auto* serve = app.add_subcommand("serve", "run the weight-holding provider over TCP");
  for (auto* sub : {demo, invariance, attack, privacy, bench, serve}) add_common(sub, args);
  for (auto* sub : {demo, invariance, attack, bench}) sub->add_option("--max-new", args.max_new, "tokens to generate");
  for (auto* sub : {invariance, attack}) sub->add_option("--prompts", args.prompts, "number of prompts");
  privacy->add_option("--trials", args.trials, "trials per grid point");
  bench->add_option("--clients", args.clients, "client counts, e.g. --clients 1 2 4 8");

  CLI11_PARSE(app, argc, argv);

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = resolve(args, command);
    if (command == "demo") return cmd_demo(cfg);
    if (command == "invariance") return cmd_invariance(cfg);
    if (command == "attack") return cmd_attack(cfg);
    if (command == "privacy") return cmd_privacy(cfg);
    if (command == "bench") return cmd_bench(cfg);
    if (command == "serve") return cmd_serve(cfg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
