#pragma once

// Token reconstruction from provider-visible activations. The attacker taps
// one projection input, learns a centroid per token from labelled sessions,
// and classifies held-out rows by nearest centroid. Against the raw input this
// is close to a lookup table; against the masked payload it should do no
// better than guessing.

#include <boost/math/distributions/binomial.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "remo/enclave.hpp"
#include "remo/model.hpp"
#include "remo/provider.hpp"
#include "remo/random.hpp"

namespace remo {

struct LabelledRow {
  std::vector<double> row;  // dequantized
  TokenId token = 0;
  bool prompt = true;       // prompt position vs. generated position
  std::uint64_t session = 0;
};

struct AttackDataset {
  std::vector<LabelledRow> rows;
  std::size_t size() const { return rows.size(); }
};

// Records rows of one tapped op during a session, both as the enclave held
// them and as they went out on the wire.
class ViewCollector {
 public:
  explicit ViewCollector(OpId tap) : tap_(tap) {}

  // Hooks for one Enclave::run_session call.
  EnclaveHooks begin(std::uint64_t session) {
    session_ = session;
    pending_.clear();
    EnclaveHooks h;
    h.tap = [this](const TapEvent& ev) { on_tap(ev); };
    return h;
  }

  // Step 0 rows are the prompt; row of step s >= 1 is the (s-1)-th generated
  // token being fed back. Labels are attached once the response is known.
  void finish(const TokenSeq& prompt, const TokenSeq& response) {
    for (auto& p : pending_) {
      const TokenId label = p.prompt ? prompt.at(p.index) : response.at(p.index);
      plain_.rows.push_back({std::move(p.plain), label, p.prompt, session_});
      masked_.rows.push_back({std::move(p.masked), label, p.prompt, session_});
    }
    pending_.clear();
  }

  const AttackDataset& view(bool masked) const { return masked ? masked_ : plain_; }

 private:
  struct Pending {
    std::vector<double> plain, masked;
    bool prompt;
    std::size_t index;
  };

  void on_tap(const TapEvent& ev) {
    if (ev.op != tap_) return;
    const RealMatrix p = dequantize(ev.plain), m = dequantize(ev.masked);
    for (std::size_t i = 0; i < p.rows; ++i) {
      const bool in_prompt = ev.step == 0;
      pending_.push_back({{p.row(i).begin(), p.row(i).end()}, {m.row(i).begin(), m.row(i).end()}, in_prompt,
                          in_prompt ? i : static_cast<std::size_t>(ev.step - 1)});
    }
  }

  OpId tap_;
  std::uint64_t session_ = 0;
  std::vector<Pending> pending_;
  AttackDataset plain_, masked_;
};

struct CentroidModel {
  std::size_t dim = 0;
  std::map<TokenId, std::vector<double>> centroids;
  bool trained() const { return !centroids.empty(); }
};

// Per-token mean of the training rows.
inline CentroidModel train_centroids(const AttackDataset& train) {
  if (train.rows.empty()) fail(ErrorCode::kEmptyClass, "no training rows");
  CentroidModel model;
  model.dim = train.rows.front().row.size();
  std::map<TokenId, std::size_t> counts;
  for (const auto& r : train.rows) {
    if (r.row.size() != model.dim) fail(ErrorCode::kShapeMismatch, "training rows differ in width");
    auto& c = model.centroids[r.token];
    if (c.empty()) c.assign(model.dim, 0.0);
    for (std::size_t j = 0; j < model.dim; ++j) c[j] += r.row[j];
    ++counts[r.token];
  }
  for (auto& [tok, c] : model.centroids)
    for (auto& v : c) v /= static_cast<double>(counts[tok]);
  return model;
}

// Nearest centroid by Euclidean distance; ties go to the lowest token id.
inline TokenId predict(const CentroidModel& model, std::span<const double> row) {
  if (!model.trained()) fail(ErrorCode::kEmptyClass, "model has no classes");
  TokenId best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& [tok, c] : model.centroids) {  // ascending ids
    double dist = 0.0;
    for (std::size_t j = 0; j < c.size(); ++j) {
      const double diff = row[j] - c[j];
      dist += diff * diff;
    }
    if (dist < best_d) {
      best_d = dist;
      best = tok;
    }
  }
  return best;
}

inline double tra(std::span<const TokenId> truth, std::span<const TokenId> guess) {
  if (truth.size() != guess.size()) fail(ErrorCode::kLengthMismatch, "tra: sequences differ in length");
  if (truth.empty()) fail(ErrorCode::kEmptyRun, "tra: no positions");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == guess[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

// Mean cosine between the embedding rows of the true and guessed tokens.
inline double cosine_proxy(std::span<const TokenId> truth, std::span<const TokenId> guess, const RingMatrix& table) {
  if (truth.size() != guess.size()) fail(ErrorCode::kLengthMismatch, "cosine_proxy: sequences differ in length");
  if (truth.empty()) fail(ErrorCode::kEmptyRun, "cosine_proxy: no positions");
  const RealMatrix t = dequantize(table);
  auto cos = [&](TokenId a, TokenId b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < t.cols; ++j) {
      ab += t.at(a, j) * t.at(b, j);
      aa += t.at(a, j) * t.at(a, j);
      bb += t.at(b, j) * t.at(b, j);
    }
    return (aa == 0 || bb == 0) ? 0.0 : ab / std::sqrt(aa * bb);
  };
  double sum = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= t.rows || guess[i] >= t.rows) fail(ErrorCode::kTokenOutOfRange, "cosine_proxy token id");
    sum += cos(truth[i], guess[i]);
  }
  return sum / static_cast<double>(truth.size());
}

// Central 99% (or 1 - alpha) acceptance region of Binomial(n, p) as rates.
inline std::pair<double, double> binomial_interval(std::size_t n, double p, double alpha = 0.01) {
  boost::math::binomial_distribution<double> dist(static_cast<double>(n), p);
  const double lo = boost::math::quantile(dist, alpha / 2);
  const double hi = boost::math::quantile(boost::math::complement(dist, alpha / 2));
  return {std::floor(lo) / static_cast<double>(n), std::ceil(hi) / static_cast<double>(n)};
}

// Seeded synthetic prompts. zipf_s = 0 draws uniformly.
inline std::vector<TokenSeq> synthetic_corpus(std::size_t count, std::size_t length, std::size_t vocab,
                                              std::uint64_t seed, double zipf_s = 0.0) {
  if (count == 0 || length == 0) fail(ErrorCode::kEmptyRun, "empty corpus");
  Rng rng(seed);
  std::vector<double> cdf(vocab);
  double total = 0;
  for (std::size_t i = 0; i < vocab; ++i) {
    total += zipf_s > 0 ? 1.0 / std::pow(static_cast<double>(i + 1), zipf_s) : 1.0;
    cdf[i] = total;
  }
  std::vector<TokenSeq> out(count, TokenSeq(length));
  for (auto& seq : out) {
    for (auto& t : seq) {
      if (zipf_s > 0) {
        const double u = uniform01(rng) * total;
        t = static_cast<TokenId>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        if (t >= vocab) t = static_cast<TokenId>(vocab - 1);
      } else {
        t = static_cast<TokenId>(uniform_below(rng, vocab));
      }
    }
  }
  return out;
}

struct AttackConfig {
  ModelConfig model{};
  std::uint64_t model_seed = 1;
  std::uint64_t mask_seed = 2;
  std::uint64_t corpus_seed = 3;
  std::size_t prompts = 1500;
  std::size_t prompt_len = 40;
  std::size_t max_new = 16;
  double zipf_s = 0.0;
  OpId tap = OpId::make(0, 0);   // first layer, query projection input
  double train_fraction = 0.8;
};

struct AttackRow {
  std::string tap;
  bool masked = false;
  std::string position_class;  // "prompt" or "response"
  std::size_t positions = 0;
  double tra = 0;
  double cosine_proxy = 0;
  double chance_level = 0;
  double ci_low = 0;
  double ci_high = 0;
};

struct AttackReport {
  std::vector<AttackRow> rows;  // unmasked/masked x prompt/response
  std::size_t train_rows = 0;

  const AttackRow& row(bool masked, const std::string& cls) const {
    for (const auto& r : rows)
      if (r.masked == masked && r.position_class == cls) return r;
    fail(ErrorCode::kEmptyRun, "no attack row for " + cls);
  }
};

inline std::string tap_name(OpId op) { return "layer" + std::to_string(op.layer()) + "_slot" + std::to_string(op.slot()); }

// Fills `row` from predictions over `test`.
inline AttackRow score(const CentroidModel& model, const std::vector<const LabelledRow*>& test, const RingMatrix& table,
                       std::size_t vocab) {
  AttackRow r;
  TokenSeq truth, guess;
  for (const auto* lr : test) {
    truth.push_back(lr->token);
    guess.push_back(predict(model, lr->row));
  }
  r.positions = truth.size();
  r.tra = tra(truth, guess);
  r.cosine_proxy = cosine_proxy(truth, guess, table);
  r.chance_level = 1.0 / static_cast<double>(vocab);
  std::tie(r.ci_low, r.ci_high) = binomial_interval(r.positions, r.chance_level);
  return r;
}

inline AttackReport run_attack_eval(const AttackConfig& cfg) {
  cfg.model.validate();
  const auto ops = cfg.model.op_ids();
  if (std::find(ops.begin(), ops.end(), cfg.tap) == ops.end()) {
    fail(ErrorCode::kTapUnavailable, "no projection " + to_string(cfg.tap) + " to tap");
  }
  if (!(cfg.train_fraction > 0 && cfg.train_fraction < 1)) fail(ErrorCode::kBadConfig, "train_fraction in (0,1)");

  const ModelWeights weights = ModelWeights::generate(cfg.model, cfg.model_seed);
  Provider provider(cfg.model, weights.projections, /*record=*/false);
  InProcessTransport transport(provider);
  Enclave enclave(cfg.model, weights.structural, PrgKey::from_u64(cfg.mask_seed));
  const auto corpus = synthetic_corpus(cfg.prompts, cfg.prompt_len, cfg.model.vocab, cfg.corpus_seed, cfg.zipf_s);
  const GenerateOptions opts{cfg.max_new, false};

  ViewCollector collector(cfg.tap);
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const EnclaveHooks hooks = collector.begin(s);
    const TokenSeq response = enclave.run_session(transport, s, corpus[s], opts, hooks);
    collector.finish(corpus[s], response);
  }

  // Split by session so no prompt contributes to both sides.
  const std::size_t train_sessions =
      static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(corpus.size())));
  AttackReport report;
  for (bool masked : {false, true}) {
    const AttackDataset& all = collector.view(masked);
    AttackDataset train;
    std::vector<const LabelledRow*> prompt_rows, response_rows;
    for (const auto& r : all.rows) {
      if (r.session < train_sessions) {
        train.rows.push_back(r);
      } else {
        (r.prompt ? prompt_rows : response_rows).push_back(&r);
      }
    }
    report.train_rows = train.size();
    const CentroidModel model = train_centroids(train);
    for (auto [cls, rows] : {std::pair{"prompt", &prompt_rows}, std::pair{"response", &response_rows}}) {
      if (rows->empty()) continue;
      AttackRow r = score(model, *rows, weights.structural->embedding, cfg.model.vocab);
      r.tap = tap_name(cfg.tap);
      r.masked = masked;
      r.position_class = cls;
      report.rows.push_back(r);
    }
  }
  return report;
}

inline void write_attack_csv(std::ostream& out, const AttackReport& report) {
  out << "tap,masked,position_class,positions,tra,cosine_proxy,chance_level,ci_low,ci_high\n";
  char buf[256];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%s,%zu,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.tap.c_str(), r.masked ? 1 : 0,
                  r.position_class.c_str(), r.positions, r.tra, r.cosine_proxy, r.chance_level, r.ci_low, r.ci_high);
    out << buf;
  }
}

}  // namespace remo
