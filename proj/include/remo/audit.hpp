#pragma once

// Checks a provider transcript for plaintext leakage symptoms.

#include <boost/math/distributions/chi_squared.hpp>

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "remo/provider.hpp"

namespace remo {

struct AuditClause {
  std::string name;
  bool pass = true;
  std::string detail;
};

struct AuditReport {
  std::vector<AuditClause> clauses;  // schema, matrix_routing, uniformity, freshness
  std::size_t masked_payloads = 0;
  std::size_t residue_samples = 0;
  double chi_square = 0.0;
  double p_value = 1.0;

  bool pass() const {
    for (const auto& c : clauses)
      if (!c.pass) return false;
    return true;
  }
  const AuditClause& clause(const std::string& name) const {
    for (const auto& c : clauses)
      if (c.name == name) return c;
    fail(ErrorCode::kAuditFail, "no clause " + name);
  }
};

struct ChiSquareResult {
  double statistic = 0.0;
  double p_value = 1.0;
  std::size_t samples = 0;
};

// Goodness of fit of the low byte of every value against uniform on 256 bins.
inline ChiSquareResult low_byte_uniformity(std::span<const std::uint64_t> values) {
  std::array<std::uint64_t, 256> bins{};
  for (auto v : values) ++bins[v & 0xff];
  ChiSquareResult r;
  r.samples = values.size();
  if (values.empty()) return r;
  const double expected = static_cast<double>(values.size()) / 256.0;
  for (auto c : bins) {
    const double diff = static_cast<double>(c) - expected;
    r.statistic += diff * diff / expected;
  }
  boost::math::chi_squared dist(255.0);
  r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

inline bool carries_matrix(const Message& m) { return !std::holds_alternative<OpenSession>(m) && !std::holds_alternative<CloseSession>(m) && !std::holds_alternative<ErrorReply>(m); }

// Full report; does not throw on violations.
inline AuditReport inspect_transcript(const std::vector<TranscriptEntry>& entries, double alpha = 0.01) {
  AuditReport report;
  AuditClause schema{"schema", true, ""};
  AuditClause routing{"matrix_routing", true, ""};
  AuditClause uniformity{"uniformity", true, ""};
  AuditClause freshness{"freshness", true, ""};

  std::vector<std::uint64_t> residues;
  // payload bytes -> (session, step) of its first appearance
  std::map<std::vector<std::uint64_t>, std::pair<std::uint64_t, std::uint64_t>> seen;

  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const Tag tag = tag_of(e.message);
    const bool inbound = e.direction == Direction::kToProvider;
    const bool inbound_ok = tag == Tag::kSetupBase || tag == Tag::kMatMulRequest || tag == Tag::kOpenSession ||
                            tag == Tag::kCloseSession;
    const bool outbound_ok = tag == Tag::kPoolReply || tag == Tag::kMatMulReply || tag == Tag::kOpenSession ||
                             tag == Tag::kCloseSession || tag == Tag::kError;
    if (schema.pass && (inbound ? !inbound_ok : !outbound_ok)) {
      schema.pass = false;
      schema.detail = "entry " + std::to_string(i) + ": " + std::string(tag_name(tag)) +
                      (inbound ? " sent to provider" : " sent by provider");
    }
    if (inbound && carries_matrix(e.message) && tag != Tag::kSetupBase && tag != Tag::kMatMulRequest && routing.pass) {
      routing.pass = false;
      routing.detail = "entry " + std::to_string(i) + ": matrix inside " + std::string(tag_name(tag));
    }
    if (const auto* req = std::get_if<MatMulRequest>(&e.message); req && inbound) {
      ++report.masked_payloads;
      auto data = req->masked_input.data();
      residues.insert(residues.end(), data.begin(), data.end());
      std::vector<std::uint64_t> key(data.begin(), data.end());
      key.push_back(req->masked_input.cols());
      auto [it, fresh] = seen.emplace(std::move(key), std::make_pair(req->session, req->step));
      if (!fresh && it->second != std::make_pair(req->session, req->step) && freshness.pass) {
        freshness.pass = false;
        freshness.detail = "entry " + std::to_string(i) + " repeats a payload from session " +
                           std::to_string(it->second.first) + " step " + std::to_string(it->second.second);
      }
    }
  }

  const ChiSquareResult chi = low_byte_uniformity(residues);
  report.residue_samples = chi.samples;
  report.chi_square = chi.statistic;
  report.p_value = chi.p_value;
  uniformity.pass = chi.p_value >= alpha;
  uniformity.detail = "chi2=" + std::to_string(chi.statistic) + " p=" + std::to_string(chi.p_value) +
                      " over " + std::to_string(chi.samples) + " residues";

  report.clauses = {schema, routing, uniformity, freshness};
  return report;
}

// Throws AuditFail naming the first violated clause.
inline AuditReport audit_transcript(const std::vector<TranscriptEntry>& entries, double alpha = 0.01) {
  AuditReport report = inspect_transcript(entries, alpha);
  for (const auto& c : report.clauses)
    if (!c.pass) fail(ErrorCode::kAuditFail, c.name + ": " + c.detail);
  return report;
}

}  // namespace remo
