#pragma once

// Tampered-slice detection. Every upload's slice accuracy is compared with
// records that share its embedding count (how many times that client has
// embedded its slice). Until beta uploads have been rejected, an upload must
// clear the lower confidence bound of that honest cohort; afterwards it must
// clear the upper confidence bound of the rejected pool.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace robwe::detection {

/// Standard normal quantile. Acklam's rational approximation followed by one
/// Halley step against erfc, which brings the error to ~1e-15.
inline double inverse_normal_cdf(double c) {
  if (!(c > 0.0 && c < 1.0)) throw std::domain_error("inverse_normal_cdf: confidence must lie in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double cc[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                  -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (c < p_low) {
    const double q = std::sqrt(-2.0 * std::log(c));
    x = (((((cc[0] * q + cc[1]) * q + cc[2]) * q + cc[3]) * q + cc[4]) * q + cc[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (c <= 1.0 - p_low) {
    const double q = c - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-c));
    x = -(((((cc[0] * q + cc[1]) * q + cc[2]) * q + cc[3]) * q + cc[4]) * q + cc[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - c;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(x * x / 2.0);
  return x - u / (1.0 + x * u / 2.0);
}

struct DetectionRecord {
  std::size_t round = 0;
  std::size_t client_id = 0;
  std::size_t embedding_count = 1;
  double acc = 0.0;

  bool same_upload(const DetectionRecord& o) const { return round == o.round && client_id == o.client_id; }
};

enum class Decision { accept, reject };

/// Which rule produced a decision.
enum class Rule { disabled, insufficient_evidence, honest_cohort, malicious_pool };

inline const char* to_string(Decision d) { return d == Decision::accept ? "accept" : "reject"; }

inline const char* to_string(Rule r) {
  switch (r) {
    case Rule::disabled: return "disabled";
    case Rule::insufficient_evidence: return "insufficient";
    case Rule::honest_cohort: return "honest_cohort";
    case Rule::malicious_pool: return "malicious_pool";
  }
  return "?";
}

struct DetectorConfig {
  bool enabled = true;
  double c_n = 0.975;
  double c_m = 0.5;
  std::size_t beta = 5;
  std::size_t min_cohort = 3;

  void validate() const {
    if (!(c_n > 0.0 && c_n < 1.0) || !(c_m > 0.0 && c_m < 1.0))
      throw std::invalid_argument("detector confidences must lie in (0, 1)");
    if (beta < 1) throw std::invalid_argument("detector beta must be >= 1");
  }
};

struct CohortStats {
  double mean = 0.0;
  double stddev = std::numeric_limits<double>::quiet_NaN();  // needs count >= 2
  std::size_t count = 0;
};

/// Sample mean and (n - 1) standard deviation.
inline CohortStats summarize(std::span<const double> values) {
  CohortStats s;
  s.count = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

struct Verdict {
  DetectionRecord record;
  Decision decision = Decision::accept;
  Rule rule = Rule::disabled;
  double threshold = std::numeric_limits<double>::quiet_NaN();
};

class DetectionLedger {
 public:
  std::size_t num_m() const { return malicious_.size(); }
  std::span<const DetectionRecord> malicious_records() const { return malicious_; }

  std::span<const DetectionRecord> honest_records(std::size_t embedding_count) const {
    auto it = honest_.find(embedding_count);
    if (it == honest_.end()) return {};
    return it->second;
  }

  std::size_t num_honest() const {
    std::size_t n = 0;
    for (const auto& [_, v] : honest_) n += v.size();
    return n;
  }

  /// Every verdict in the order it was made.
  std::span<const Verdict> history() const { return history_; }

  void commit(const Verdict& v) {
    if (v.decision == Decision::accept) honest_[v.record.embedding_count].push_back(v.record);
    else malicious_.push_back(v.record);
    history_.push_back(v);
  }

  std::set<std::size_t> rejected_clients() const {
    std::set<std::size_t> out;
    for (const auto& r : malicious_) out.insert(r.client_id);
    return out;
  }

 private:
  std::map<std::size_t, std::vector<DetectionRecord>> honest_;
  std::vector<DetectionRecord> malicious_;
  std::vector<Verdict> history_;
};

/// Honest records with the same embedding count plus same-round peers, minus
/// the record under test.
inline CohortStats cohort_stats(const DetectionLedger& ledger, std::size_t embedding_count,
                                std::span<const DetectionRecord> peers, const DetectionRecord& exclude) {
  std::vector<double> values;
  for (const auto& r : ledger.honest_records(embedding_count))
    if (!r.same_upload(exclude)) values.push_back(r.acc);
  for (const auto& r : peers)
    if (r.embedding_count == embedding_count && !r.same_upload(exclude)) values.push_back(r.acc);
  return summarize(values);
}

inline CohortStats cohort_stats(const DetectionLedger& ledger, std::size_t embedding_count,
                                const DetectionRecord& exclude) {
  return cohort_stats(ledger, embedding_count, {}, exclude);
}

/// acc > mu - Z(c_n) sigma / sqrt(n); with sigma = 0, acc >= mu.
inline Decision honest_cohort_rule(double acc, const CohortStats& s, double z, double* threshold = nullptr) {
  const double t = s.mean - z * s.stddev / std::sqrt(static_cast<double>(s.count));
  if (threshold) *threshold = t;
  if (s.stddev == 0.0) return acc >= s.mean ? Decision::accept : Decision::reject;
  return acc > t ? Decision::accept : Decision::reject;
}

/// acc > mu_m + Z(c_m) sigma_m / sqrt(num_m).
inline Decision malicious_pool_rule(double acc, const CohortStats& s, double z, double* threshold = nullptr) {
  const double t = s.mean + z * s.stddev / std::sqrt(static_cast<double>(s.count));
  if (threshold) *threshold = t;
  return acc > t ? Decision::accept : Decision::reject;
}

/// Decision for one upload; the ledger is not modified. peers are the other
/// uploads of the same round.
inline Verdict decide(const DetectionRecord& record, const DetectionLedger& ledger,
                      std::span<const DetectionRecord> peers, const DetectorConfig& cfg) {
  Verdict v{record, Decision::accept, Rule::disabled, std::numeric_limits<double>::quiet_NaN()};
  if (!cfg.enabled) return v;
  if (ledger.num_m() < cfg.beta) {
    const auto s = cohort_stats(ledger, record.embedding_count, peers, record);
    if (s.count < std::max<std::size_t>(cfg.min_cohort, 2)) {
      v.rule = Rule::insufficient_evidence;
      return v;
    }
    v.rule = Rule::honest_cohort;
    v.decision = honest_cohort_rule(record.acc, s, inverse_normal_cdf(cfg.c_n), &v.threshold);
  } else {
    std::vector<double> pool;
    for (const auto& r : ledger.malicious_records()) pool.push_back(r.acc);
    const auto s = summarize(pool);
    if (s.count < std::max<std::size_t>(cfg.min_cohort, 2)) {
      v.rule = Rule::insufficient_evidence;
      return v;
    }
    v.rule = Rule::malicious_pool;
    v.decision = malicious_pool_rule(record.acc, s, inverse_normal_cdf(cfg.c_m), &v.threshold);
  }
  return v;
}

inline Verdict decide(const DetectionRecord& record, const DetectionLedger& ledger, const DetectorConfig& cfg) {
  return decide(record, ledger, {}, cfg);
}

/// Server-side detector: decides a round's uploads against the ledger as it
/// stood at the start of the round, then commits them all.
class Detector {
 public:
  explicit Detector(DetectorConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  std::vector<Verdict> review_round(std::span<const DetectionRecord> uploads) {
    std::vector<Verdict> out;
    out.reserve(uploads.size());
    for (const auto& r : uploads) {
      if (!(r.acc >= 0.0 && r.acc <= 1.0)) throw std::invalid_argument("detection record accuracy outside [0, 1]");
      if (r.embedding_count < 1) throw std::invalid_argument("detection record embedding count must be >= 1");
      out.push_back(decide(r, ledger_, uploads, cfg_));
    }
    for (const auto& v : out) ledger_.commit(v);
    return out;
  }

  const DetectionLedger& ledger() const { return ledger_; }
  const DetectorConfig& config() const { return cfg_; }

 private:
  DetectorConfig cfg_;
  DetectionLedger ledger_;
};

struct DetectionMetrics {
  double d_t = 0.0;  // malicious clients ever rejected / malicious clients
  double d_f = 0.0;  // honest clients ever rejected / honest clients
};

inline DetectionMetrics detection_metrics(const DetectionLedger& ledger, const std::set<std::size_t>& malicious,
                                          std::size_t n_clients) {
  const auto rejected = ledger.rejected_clients();
  std::size_t tp = 0, fp = 0;
  for (auto c : rejected) (malicious.count(c) ? tp : fp)++;
  DetectionMetrics m;
  if (!malicious.empty()) m.d_t = static_cast<double>(tp) / static_cast<double>(malicious.size());
  const std::size_t honest = n_clients - malicious.size();
  if (honest > 0) m.d_f = static_cast<double>(fp) / static_cast<double>(honest);
  return m;
}

inline constexpr const char* ledger_csv_header = "round,client,embedding_count,acc,decision,rule";

inline void write_ledger_csv(std::ostream& os, const DetectionLedger& ledger) {
  os << ledger_csv_header << '\n';
  char buf[32];
  for (const auto& v : ledger.history()) {
    const auto acc = std::string(buf, std::to_chars(buf, buf + sizeof buf, v.record.acc).ptr);
    os << v.record.round << ',' << v.record.client_id << ',' << v.record.embedding_count << ',' << acc << ','
       << to_string(v.decision) << ',' << to_string(v.rule) << '\n';
  }
}

}  // namespace robwe::detection
