#pragma once

// Leaked dataset D_L, external corpus, surrogate dataset D_S, augmentation,
// and the templated synthetic clinical corpus.
//
// Leak file:   JSONL {"text": string, "embedding": [float, ...]}
// Corpus file: JSONL {"text": string}

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "tei/encoder.hpp"
#include "tei/errors.hpp"
#include "tei/prompts.hpp"
#include "tei/remote.hpp"
#include "tei/text.hpp"
#include "tei/types.hpp"

namespace tei {

struct LeakedPair {
  std::string text;
  std::vector<double> embedding;

  bool operator==(const LeakedPair&) const = default;
};

enum class Origin { external, augmented };

struct SurrogatePair {
  std::string text;
  std::vector<double> embedding;
  Origin origin = Origin::external;
};

inline EmbeddingMatrix embeddings_of(const std::vector<LeakedPair>& pairs) {
  std::vector<std::vector<double>> rows;
  rows.reserve(pairs.size());
  for (const auto& p : pairs) rows.push_back(p.embedding);
  return rows_to_matrix(rows);
}

inline std::vector<std::string> texts_of(const std::vector<LeakedPair>& pairs) {
  std::vector<std::string> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.text);
  return out;
}

namespace detail {

inline std::ifstream open_for_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return in;
}

// Writes to a sibling temporary file and renames it into place.
template <typename Fn>
void write_atomically(const std::string& path, Fn&& body) {
  namespace fs = std::filesystem;
  fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    body(out);
    out.flush();
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path + "': " + ec.message());
}

inline nlohmann::json parse_line(const std::string& line, const std::string& path, long lineno) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
  }
}

inline std::string read_text_field(const nlohmann::json& obj, const std::string& path, long lineno) {
  if (!obj.is_object() || !obj.contains("text") || !obj["text"].is_string())
    throw ParseError(path + ":" + std::to_string(lineno) + ": expected an object with a string \"text\" field");
  std::string t = text::trim(obj["text"].get<std::string>());
  if (t.empty()) throw ParseError(path + ":" + std::to_string(lineno) + ": empty text");
  return t;
}

}  // namespace detail

inline std::vector<LeakedPair> load_leak(const std::string& path) {
  auto in = detail::open_for_read(path);
  std::vector<LeakedPair> out;
  std::string line;
  long lineno = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty()) continue;
    auto obj = detail::parse_line(line, path, lineno);
    LeakedPair p;
    p.text = detail::read_text_field(obj, path, lineno);
    if (!obj.contains("embedding") || !obj["embedding"].is_array() || obj["embedding"].empty())
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected a non-empty \"embedding\" array");
    for (const auto& v : obj["embedding"]) {
      if (!v.is_number()) throw ParseError(path + ":" + std::to_string(lineno) + ": embedding entries must be numbers");
      p.embedding.push_back(v.get<double>());
    }
    if (width == 0) width = p.embedding.size();
    if (p.embedding.size() != width)
      throw DimensionError(path + ":" + std::to_string(lineno) + ": embedding width " +
                           std::to_string(p.embedding.size()) + " differs from " + std::to_string(width));
    out.push_back(std::move(p));
  }
  return out;
}

inline void save_leak(const std::string& path, const std::vector<LeakedPair>& pairs) {
  detail::write_atomically(path, [&](std::ostream& out) {
    for (const auto& p : pairs) out << nlohmann::json{{"text", p.text}, {"embedding", p.embedding}}.dump() << '\n';
  });
}

inline std::vector<std::string> load_corpus(const std::string& path) {
  auto in = detail::open_for_read(path);
  std::vector<std::string> out;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty()) continue;
    out.push_back(detail::read_text_field(detail::parse_line(line, path, lineno), path, lineno));
  }
  return out;
}

inline void save_corpus(const std::string& path, const std::vector<std::string>& texts) {
  detail::write_atomically(path, [&](std::ostream& out) {
    for (const auto& t : texts) out << nlohmann::json{{"text", t}}.dump() << '\n';
  });
}

// Pairs texts with embedding rows.
inline std::vector<LeakedPair> make_pairs(const std::vector<std::string>& texts, const EmbeddingMatrix& e) {
  if (e.rows() != static_cast<Eigen::Index>(texts.size()))
    throw AlignmentError("have " + std::to_string(texts.size()) + " texts but " + std::to_string(e.rows()) + " embeddings");
  std::vector<LeakedPair> out;
  out.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) out.push_back({texts[i], row_to_vector(e, static_cast<Eigen::Index>(i))});
  return out;
}

// One pair per document, embedded by the surrogate as it currently stands.
inline std::vector<SurrogatePair> build_surrogate_dataset(const SurrogateModel& model, const std::vector<std::string>& corpus,
                                                          std::size_t batch_size, Origin origin = Origin::external) {
  if (corpus.empty()) throw UsageError("build_surrogate_dataset: empty corpus");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  std::vector<SurrogatePair> out;
  out.reserve(corpus.size());
  for (std::size_t b = 0; b < corpus.size(); b += batch_size) {
    std::vector<std::string> chunk(corpus.begin() + static_cast<long>(b),
                                   corpus.begin() + static_cast<long>(std::min(corpus.size(), b + batch_size)));
    EmbeddingMatrix e = model.encode(chunk);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      out.push_back({chunk[i], row_to_vector(e, static_cast<Eigen::Index>(i)), origin});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

enum class AugmentStrategy { none, llm, swap, del, replace, insert };

inline AugmentStrategy parse_augment_strategy(const std::string& s) {
  if (s == "none") return AugmentStrategy::none;
  if (s == "llm") return AugmentStrategy::llm;
  if (s == "swap") return AugmentStrategy::swap;
  if (s == "delete") return AugmentStrategy::del;
  if (s == "replace") return AugmentStrategy::replace;
  if (s == "insert") return AugmentStrategy::insert;
  throw UsageError("unknown augmentation strategy '" + s + "' (none, llm, swap, delete, replace, insert)");
}

inline std::string to_string(AugmentStrategy s) {
  switch (s) {
    case AugmentStrategy::none: return "none";
    case AugmentStrategy::llm: return "llm";
    case AugmentStrategy::swap: return "swap";
    case AugmentStrategy::del: return "delete";
    case AugmentStrategy::replace: return "replace";
    case AugmentStrategy::insert: return "insert";
  }
  return "none";
}

struct AugmentationSpec {
  AugmentStrategy strategy = AugmentStrategy::none;
  int multiplier = 0;
  std::uint64_t seed = 0;
};

// Word list drawn from a corpus, sorted and deduplicated so that replacement
// draws do not depend on corpus order.
inline std::vector<std::string> corpus_vocabulary(const std::vector<std::string>& corpus) {
  std::set<std::string> words;
  for (const auto& t : corpus)
    for (auto& w : text::split_whitespace(t)) words.insert(w);
  return {words.begin(), words.end()};
}

class Augmenter {
 public:
  Augmenter(AugmentationSpec spec, std::vector<std::string> vocabulary, const CompletionClient* llm = nullptr)
      : spec_(spec), vocab_(std::move(vocabulary)), llm_(llm) {
    if (spec_.multiplier < 0) throw UsageError("augmentation multiplier must be >= 0");
    if ((spec_.strategy == AugmentStrategy::replace || spec_.strategy == AugmentStrategy::insert) && vocab_.empty())
      throw UsageError("replace/insert augmentation needs a non-empty corpus vocabulary");
    if (spec_.strategy == AugmentStrategy::llm && !llm_) throw UsageError("llm augmentation needs a completion client");
  }

  const AugmentationSpec& spec() const { return spec_; }

  std::vector<std::string> augment(const std::string& input) const {
    std::vector<std::string> out;
    if (spec_.strategy == AugmentStrategy::none || spec_.multiplier == 0) return out;
    if (spec_.strategy == AugmentStrategy::llm) return augment_llm(input);

    const auto tokens = text::split_whitespace(input);
    const std::size_t need = spec_.strategy == AugmentStrategy::insert ? 1 : 2;
    if (tokens.size() < need) {
      spdlog::warn("augment({}): skipping input with {} token(s): '{}'", to_string(spec_.strategy), tokens.size(), input);
      return out;
    }
    for (int v = 0; v < spec_.multiplier; ++v) {
      Rng rng(mix_seed(mix_seed(spec_.seed, fnv1a(input)), static_cast<std::uint64_t>(v) * 16 + static_cast<std::uint64_t>(spec_.strategy)));
      auto toks = tokens;
      auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
      switch (spec_.strategy) {
        case AugmentStrategy::swap: {
          std::size_t i = pick(toks.size());
          std::size_t j = pick(toks.size() - 1);
          if (j >= i) ++j;
          std::swap(toks[i], toks[j]);
          break;
        }
        case AugmentStrategy::del: toks.erase(toks.begin() + static_cast<long>(pick(toks.size()))); break;
        case AugmentStrategy::replace: toks[pick(toks.size())] = vocab_[pick(vocab_.size())]; break;
        case AugmentStrategy::insert: {
          std::size_t pos = pick(toks.size() + 1);
          toks.insert(toks.begin() + static_cast<long>(pos), vocab_[pick(vocab_.size())]);
          break;
        }
        default: break;
      }
      out.push_back(text::join(toks));
    }
    return out;
  }

 private:
  std::vector<std::string> augment_llm(const std::string& input) const {
    std::vector<std::string> out;
    while (static_cast<int>(out.size()) < spec_.multiplier) {
      std::string reply;
      try {
        reply = llm_->complete(prompts::augmentation_prompt(input));
      } catch (const Error& e) {
        throw AugmentationError(std::string("llm augmentation failed: ") + e.what());
      }
      const std::size_t before = out.size();
      std::size_t taken = 0;
      for (auto& line : split_lines(reply)) {
        if (taken == 5 || static_cast<int>(out.size()) == spec_.multiplier) break;
        out.push_back(line);
        ++taken;
      }
      if (out.size() == before) throw AugmentationError("llm augmentation returned no sentences");
    }
    return out;
  }

  static std::vector<std::string> split_lines(const std::string& s) {
    std::vector<std::string> lines;
    std::size_t b = 0;
    while (b <= s.size()) {
      auto e = s.find('\n', b);
      auto line = text::trim(s.substr(b, e == std::string::npos ? std::string::npos : e - b));
      if (!line.empty()) lines.push_back(line);
      if (e == std::string::npos) break;
      b = e + 1;
    }
    return lines;
  }

  AugmentationSpec spec_;
  std::vector<std::string> vocab_;
  const CompletionClient* llm_;
};

// ---------------------------------------------------------------------------
// Synthetic clinical notes: "<AGE> year-old <SEX> with a history of <HISTORY> ..."

struct ClinicalLexicon {
  std::vector<std::string> ages{"34", "41", "47", "52", "59", "63", "68", "74", "81"};
  std::vector<std::string> sexes{"male", "female"};
  std::vector<std::string> histories{"diabetes", "hypertension", "asthma", "copd", "cirrhosis", "cancer"};
  std::vector<std::string> symptoms{"fever", "cough", "dyspnea", "nausea", "syncope", "headache", "fatigue"};
  std::vector<std::string> diseases{"pneumonia", "sepsis", "stroke", "pancreatitis", "cellulitis", "appendicitis"};
};

struct ClinicalNote {
  std::string text;
  std::string age, sex, history, symptom, disease;
};

inline ClinicalNote make_clinical_note(Rng& rng, const ClinicalLexicon& lex = {}) {
  auto pick = [&](const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  ClinicalNote n{"", pick(lex.ages), pick(lex.sexes), pick(lex.histories), pick(lex.symptoms), pick(lex.diseases)};
  const std::string age = n.age + " year-old";
  switch (std::uniform_int_distribution<int>(0, 3)(rng)) {
    case 0:
      n.text = age + " " + n.sex + " with a history of " + n.history + " who presents with " + n.symptom +
               " and is admitted for " + n.disease;
      break;
    case 1:
      n.text = "patient is a " + age + " " + n.sex + " with " + n.history + " admitted for " + n.disease +
               " after " + n.symptom;
      break;
    case 2:
      n.text = age + " " + n.sex + " presents with " + n.symptom + " , history of " + n.history +
               " , diagnosed with " + n.disease;
      break;
    default:
      n.text = "the patient is a " + age + " " + n.sex + " who was diagnosed with " + n.disease +
               " and reports " + n.symptom + " with a history of " + n.history;
      break;
  }
  return n;
}

inline std::vector<std::string> synthetic_clinical_corpus(std::size_t n, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xc11c));
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_clinical_note(rng).text);
  return out;
}

// Whitespace-trim and cut each document to its first sentence.
inline std::vector<std::string> preprocess_documents(const std::vector<std::string>& docs) {
  std::vector<std::string> out;
  for (const auto& d : docs) {
    auto s = text::first_sentence(d);
    if (!s.empty()) out.push_back(std::move(s));
  }
  return out;
}

}  // namespace tei
