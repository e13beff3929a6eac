#pragma once

// Reconstruction metrics: RougeL, perplexity, embedding cosine, LLM judge,
// named-entity recovery rate (NERR) and stealing rate; plus the report type
// that persists per-example rows next to the aggregates derived from them.

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "tei/consistency.hpp"
#include "tei/datasets.hpp"
#include "tei/decoder.hpp"
#include "tei/encoder.hpp"
#include "tei/errors.hpp"
#include "tei/prompts.hpp"
#include "tei/remote.hpp"
#include "tei/text.hpp"

namespace tei {

// ---- RougeL ---------------------------------------------------------------

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// LCS F-measure over lowercased, punctuation-stripped whitespace tokens.
inline double rouge_l(const std::string& reference, const std::string& candidate) {
  const auto ref = text::metric_tokens(reference);
  const auto cand = text::metric_tokens(candidate);
  if (ref.empty() || cand.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(ref, cand));
  const double p = lcs / static_cast<double>(cand.size());
  const double r = lcs / static_cast<double>(ref.size());
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

// ---- Perplexity -----------------------------------------------------------

class TokenScorer {
 public:
  virtual ~TokenScorer() = default;
  // Natural-log probability of every scored token of `text`.
  virtual std::vector<double> token_log_probs(const std::string& text) const = 0;
};

// Scores text with the attack decoder conditioned on a zero vector.
class DecoderScorer final : public TokenScorer {
 public:
  DecoderScorer(const InversionDecoder& decoder, std::size_t max_len) : decoder_(decoder), max_len_(max_len) {}

  std::vector<double> token_log_probs(const std::string& s) const override {
    const auto seq = decoder_.encode_text(s, max_len_);
    const Matrix logits = decoder_.position_logits(RowVector::Zero(decoder_.shape().input_dim), seq);
    const Matrix lp = nn::log_softmax_rows(logits);
    std::vector<double> out;
    for (Eigen::Index p = 0; p < lp.rows(); ++p) out.push_back(lp(p, seq[static_cast<std::size_t>(p + 1)]));
    return out;
  }

 private:
  const InversionDecoder& decoder_;
  std::size_t max_len_;
};

struct NllTally {
  double nll_sum = 0;
  long tokens = 0;
};

inline NllTally score_text(const TokenScorer& scorer, const std::string& s) {
  NllTally t;
  for (double lp : scorer.token_log_probs(s)) {
    t.nll_sum -= lp;
    ++t.tokens;
  }
  return t;
}

// exp of the mean per-token NLL pooled over every token of every text.
inline double perplexity_from_tallies(const std::vector<NllTally>& tallies) {
  double nll = 0;
  long n = 0;
  for (const auto& t : tallies) {
    nll += t.nll_sum;
    n += t.tokens;
  }
  if (n == 0) throw UsageError("perplexity: no tokens to score");
  return std::exp(nll / static_cast<double>(n));
}

inline double perplexity(const std::vector<std::string>& texts, const TokenScorer& scorer) {
  if (texts.empty()) throw UsageError("perplexity: empty corpus");
  std::vector<NllTally> tallies;
  tallies.reserve(texts.size());
  for (const auto& t : texts) tallies.push_back(score_text(scorer, t));
  return perplexity_from_tallies(tallies);
}

// ---- Embedding cosine -----------------------------------------------------

// Per-pair cosine between evaluator embeddings; an empty candidate scores 0.
inline std::vector<double> embedding_cos_per_example(const std::vector<std::string>& references,
                                                     const std::vector<std::string>& candidates,
                                                     const EncoderBackend& evaluator) {
  if (references.size() != candidates.size())
    throw AlignmentError("embedding_cos: " + std::to_string(references.size()) + " references vs " +
                         std::to_string(candidates.size()) + " candidates");
  std::vector<double> out(references.size(), 0.0);
  if (references.empty()) return out;
  std::vector<std::string> refs, cands;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < references.size(); ++i) {
    if (text::trim(candidates[i]).empty()) continue;
    refs.push_back(references[i]);
    cands.push_back(candidates[i]);
    idx.push_back(i);
  }
  if (idx.empty()) return out;
  Matrix a = normalize_rows(encode_batch(evaluator, refs));
  Matrix b = normalize_rows(encode_batch(evaluator, cands));
  for (std::size_t k = 0; k < idx.size(); ++k)
    out[idx[k]] = a.row(static_cast<Eigen::Index>(k)).dot(b.row(static_cast<Eigen::Index>(k)));
  return out;
}

inline double embedding_cos(const std::vector<std::string>& references, const std::vector<std::string>& candidates,
                            const EncoderBackend& evaluator) {
  auto v = embedding_cos_per_example(references, candidates, evaluator);
  if (v.empty()) throw UsageError("embedding_cos: no pairs");
  double acc = 0;
  for (double c : v) acc += c;
  return acc / static_cast<double>(v.size());
}

// ---- LLM judge ------------------------------------------------------------

inline double parse_judge_score(const std::string& response) {
  const std::string t = text::trim(response);
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    throw JudgeProtocolError("judge response is not a number: '" + t + "'");
  }
  if (used != t.size() || !std::isfinite(v)) throw JudgeProtocolError("judge response is not a single number: '" + t + "'");
  if (v > 1.0 || v < 0.0) {
    spdlog::warn("judge returned {} outside [0, 1]; clamping", v);
    v = std::clamp(v, 0.0, 1.0);
  }
  return v;
}

inline double llm_eval(const std::string& reference, const std::string& candidate, const CompletionClient& judge) {
  return parse_judge_score(judge.complete(prompts::judge_prompt(candidate, reference)));
}

// ---- Named-entity recovery ------------------------------------------------

struct Entity {
  std::string category;
  std::string surface;
};

class NerExtractor {
 public:
  virtual ~NerExtractor() = default;
  virtual std::vector<Entity> extract(const std::string& text) const = 0;
};

// Regex (age, sex) plus gazetteers (history, symptom, disease) for the
// synthetic clinical corpus.
class ClinicalNerExtractor final : public NerExtractor {
 public:
  explicit ClinicalNerExtractor(ClinicalLexicon lex = {}) : lex_(std::move(lex)) {}

  std::vector<Entity> extract(const std::string& s) const override {
    std::vector<Entity> out;
    const std::string t = text::normalize_surface(s);
    static const std::regex age_re(R"((\d{1,3})\s*(year-old|year old|yo)\b)");
    static const std::regex sex_re(R"(\b(male|female|man|woman)\b)");
    std::smatch m;
    if (std::regex_search(t, m, age_re)) out.push_back({"age", m.str(0)});
    if (std::regex_search(t, m, sex_re)) out.push_back({"sex", m.str(0)});
    const auto words = text::bag_tokens(t);
    auto gazetteer = [&](const std::vector<std::string>& list, const std::string& cat) {
      for (const auto& w : words)
        if (std::find(list.begin(), list.end(), w) != list.end()) out.push_back({cat, w});
    };
    gazetteer(lex_.histories, "history");
    gazetteer(lex_.symptoms, "symptom");
    gazetteer(lex_.diseases, "disease");
    return out;
  }

 private:
  ClinicalLexicon lex_;
};

// Per category: fraction of reference entities whose normalized surface is a
// substring of the normalized candidate. Categories absent from the reference
// are omitted.
inline std::map<std::string, double> nerr(const std::string& reference, const std::string& candidate,
                                          const NerExtractor& extractor) {
  std::vector<Entity> ents;
  try {
    ents = extractor.extract(reference);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw ExtractorError(std::string("NER extractor failed: ") + e.what());
  }
  const std::string cand = text::normalize_surface(candidate);
  std::map<std::string, std::pair<int, int>> tally;
  for (const auto& e : ents) {
    auto& [hit, total] = tally[e.category];
    ++total;
    if (cand.find(text::normalize_surface(e.surface)) != std::string::npos) ++hit;
  }
  std::map<std::string, double> out;
  for (const auto& [cat, ht] : tally) out[cat] = static_cast<double>(ht.first) / static_cast<double>(ht.second);
  return out;
}

// ---- Stealing rate --------------------------------------------------------

inline double stealing_rate(double transfer_score, double oracle_score) {
  if (!(oracle_score > 0)) throw UsageError("stealing_rate: oracle score must be positive");
  return transfer_score / oracle_score;
}

// ---- Report ---------------------------------------------------------------

struct MetricToggles {
  bool rouge_l = true;
  bool ppl = true;
  bool cos = true;
  bool llm_eval = false;
  bool nerr = false;

  static MetricToggles parse(const std::string& csv) {
    MetricToggles t{false, false, false, false, false};
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = text::trim(item);
      if (item == "rougeL") t.rouge_l = true;
      else if (item == "ppl") t.ppl = true;
      else if (item == "cos") t.cos = true;
      else if (item == "llm_eval") t.llm_eval = true;
      else if (item == "nerr") t.nerr = true;
      else if (!item.empty()) throw UsageError("unknown metric '" + item + "' (rougeL, ppl, cos, llm_eval, nerr)");
    }
    return t;
  }
};

struct ExampleRow {
  std::string reference;
  std::string candidate;
  std::optional<double> rouge_l;
  std::optional<double> cos;
  std::optional<double> llm_eval;
  std::optional<NllTally> nll;
  std::optional<std::map<std::string, double>> nerr;
};

struct AttackReport {
  std::optional<double> rouge_l;
  std::optional<double> ppl;
  std::optional<double> cos;
  std::optional<double> llm_eval;
  std::optional<std::map<std::string, double>> nerr;
  long n_examples = 0;
  long llm_eval_skipped = 0;
  std::vector<ExampleRow> rows;
};

// Aggregates recomputed from rows: arithmetic means (NERR per category over
// the rows where the category occurs); perplexity pools token NLLs.
inline AttackReport aggregate(std::vector<ExampleRow> rows, const MetricToggles& t, long llm_skipped = 0) {
  AttackReport r;
  r.n_examples = static_cast<long>(rows.size());
  r.llm_eval_skipped = llm_skipped;
  auto mean_of = [&](auto get) -> std::optional<double> {
    double acc = 0;
    long n = 0;
    for (const auto& row : rows)
      if (auto v = get(row)) {
        acc += *v;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return acc / static_cast<double>(n);
  };
  if (t.rouge_l) r.rouge_l = mean_of([](const ExampleRow& x) { return x.rouge_l; });
  if (t.cos) r.cos = mean_of([](const ExampleRow& x) { return x.cos; });
  if (t.llm_eval) r.llm_eval = mean_of([](const ExampleRow& x) { return x.llm_eval; });
  if (t.ppl) {
    std::vector<NllTally> tallies;
    for (const auto& row : rows)
      if (row.nll) tallies.push_back(*row.nll);
    if (!tallies.empty()) r.ppl = perplexity_from_tallies(tallies);
  }
  if (t.nerr) {
    std::map<std::string, std::pair<double, long>> acc;
    for (const auto& row : rows)
      if (row.nerr)
        for (const auto& [cat, v] : *row.nerr) {
          acc[cat].first += v;
          acc[cat].second += 1;
        }
    std::map<std::string, double> out;
    for (const auto& [cat, sv] : acc) out[cat] = sv.first / static_cast<double>(sv.second);
    r.nerr = out;
  }
  r.rows = std::move(rows);
  return r;
}

struct MetricBackends {
  const TokenScorer* scorer = nullptr;
  const EncoderBackend* evaluator = nullptr;
  const CompletionClient* judge = nullptr;
  const NerExtractor* extractor = nullptr;
};

// Scores (reference, candidate) pairs with the toggled metrics.
inline AttackReport evaluate_reconstructions(const std::vector<std::pair<std::string, std::string>>& pairs,
                                             const MetricToggles& t, const MetricBackends& b) {
  if (t.ppl && !b.scorer) throw UsageError("perplexity requested without a scorer");
  if (t.cos && !b.evaluator) throw UsageError("cosine requested without an evaluator encoder");
  if (t.llm_eval && !b.judge) throw UsageError("llm_eval requested without a judge endpoint");
  if (t.nerr && !b.extractor) throw UsageError("nerr requested without an extractor");

  std::vector<ExampleRow> rows(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    rows[i].reference = pairs[i].first;
    rows[i].candidate = pairs[i].second;
  }
  if (t.cos && !pairs.empty()) {
    std::vector<std::string> refs, cands;
    for (const auto& p : pairs) {
      refs.push_back(p.first);
      cands.push_back(p.second);
    }
    auto c = embedding_cos_per_example(refs, cands, *b.evaluator);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i].cos = c[i];
  }
  long skipped = 0;
  for (auto& row : rows) {
    if (t.rouge_l) row.rouge_l = rouge_l(row.reference, row.candidate);
    if (t.ppl && !text::trim(row.candidate).empty()) row.nll = score_text(*b.scorer, row.candidate);
    if (t.nerr) row.nerr = nerr(row.reference, row.candidate, *b.extractor);
    if (t.llm_eval) {
      try {
        row.llm_eval = llm_eval(row.reference, row.candidate, *b.judge);
      } catch (const JudgeProtocolError& e) {
        spdlog::warn("llm_eval skipped: {}", e.what());
        ++skipped;
      }
    }
  }
  return aggregate(std::move(rows), t, skipped);
}

inline nlohmann::json to_json(const AttackReport& r) {
  nlohmann::json agg = {{"n_examples", r.n_examples}};
  if (r.rouge_l) agg["rougeL"] = *r.rouge_l;
  if (r.ppl) agg["ppl"] = *r.ppl;
  if (r.cos) agg["cos"] = *r.cos;
  if (r.llm_eval) agg["llm_eval"] = *r.llm_eval;
  if (r.llm_eval_skipped) agg["llm_eval_skipped"] = r.llm_eval_skipped;
  if (r.nerr) agg["nerr"] = *r.nerr;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    nlohmann::json j = {{"reference", row.reference}, {"candidate", row.candidate}};
    if (row.rouge_l) j["rougeL"] = *row.rouge_l;
    if (row.cos) j["cos"] = *row.cos;
    if (row.llm_eval) j["llm_eval"] = *row.llm_eval;
    if (row.nll) {
      j["nll_sum"] = row.nll->nll_sum;
      j["tokens"] = row.nll->tokens;
    }
    if (row.nerr) j["nerr"] = *row.nerr;
    rows.push_back(std::move(j));
  }
  return {{"aggregate", agg}, {"per_example", rows}};
}

inline std::vector<ExampleRow> rows_from_json(const nlohmann::json& report) {
  std::vector<ExampleRow> rows;
  for (const auto& j : report.at("per_example")) {
    ExampleRow row;
    row.reference = j.at("reference").get<std::string>();
    row.candidate = j.at("candidate").get<std::string>();
    if (j.contains("rougeL")) row.rouge_l = j["rougeL"].get<double>();
    if (j.contains("cos")) row.cos = j["cos"].get<double>();
    if (j.contains("llm_eval")) row.llm_eval = j["llm_eval"].get<double>();
    if (j.contains("nll_sum")) row.nll = NllTally{j["nll_sum"].get<double>(), j["tokens"].get<long>()};
    if (j.contains("nerr")) row.nerr = j["nerr"].get<std::map<std::string, double>>();
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace tei
