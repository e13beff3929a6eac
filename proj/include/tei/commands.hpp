#pragma once

// Subcommand bodies behind tools/tei.cpp. Each returns normally on success and
// throws a tei::Error subclass otherwise; the caller maps kinds to exit codes.

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tei/datasets.hpp"
#include "tei/encoder.hpp"
#include "tei/errors.hpp"
#include "tei/metrics.hpp"
#include "tei/pipeline.hpp"
#include "tei/remote.hpp"

namespace tei {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;
  std::map<std::string, std::string> artifacts;
  nlohmann::json metrics = nlohmann::json::object();

  nlohmann::json to_json() const {
    return {{"command", command}, {"config_hash", config_hash}, {"seed", seed},       {"started", started},
            {"finished", finished}, {"artifacts", artifacts},   {"metrics", metrics}};
  }

  void write(const std::string& path) {
    for (const auto& [k, p] : artifacts)
      if (!std::filesystem::exists(p)) throw IoError("manifest artifact '" + k + "' is missing: " + p);
    finished = utc_timestamp();
    const std::string body = to_json().dump(2) + "\n";
    detail::write_atomically(path, [&](std::ostream& out) { out << body; });
  }
};

// ---- leak-build -----------------------------------------------------------

struct LeakBuildOptions {
  std::string corpus_path;
  std::string endpoint;  // remote embedding service; wins over backend
  std::string backend = "synthetic-victim";
  std::size_t sample_n = 0;
  std::uint64_t seed = 0;
  std::string out_path;
  std::size_t batch_size = 32;
  int max_retries = 3;
};

// Samples texts without replacement, queries the victim once, writes JSONL.
inline std::vector<LeakedPair> cmd_leak_build(const LeakBuildOptions& o) {
  if (o.sample_n == 0) throw UsageError("sample size must be >= 1");
  if (o.out_path.empty()) throw UsageError("an output path is required");
  auto corpus = load_corpus(o.corpus_path);
  if (o.sample_n > corpus.size())
    throw UsageError("cannot sample " + std::to_string(o.sample_n) + " texts from a corpus of " +
                     std::to_string(corpus.size()));
  std::vector<std::size_t> idx(corpus.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(mix_seed(o.seed, 0x1eac));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(o.sample_n);
  std::vector<std::string> texts;
  for (auto i : idx) texts.push_back(corpus[i]);

  EmbeddingMatrix e;
  if (!o.endpoint.empty()) {
    e = fetch_remote_embeddings(o.endpoint, texts, o.batch_size, o.max_retries);
  } else {
    auto backend = make_backend(o.backend);
    e = encode_in_batches(*backend, texts, o.batch_size);
  }
  auto pairs = make_pairs(texts, e);
  save_leak(o.out_path, pairs);
  return pairs;
}

// ---- train ----------------------------------------------------------------

struct TrainOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> name;
  std::optional<std::string> resume_from;
  bool overwrite = false;
};

inline AttackConfig apply_overrides(AttackConfig c, const TrainOverrides& o) {
  if (o.seed) c.seed = *o.seed;
  if (o.out_dir) c.out_dir = *o.out_dir;
  if (o.name) c.name = *o.name;
  if (o.resume_from) c.resume_from = *o.resume_from;
  return c;
}

struct TrainOutcome {
  TrainingResult result;
  std::string manifest_path;
};

inline TrainOutcome cmd_train(const AttackConfig& config, bool overwrite, const CompletionClient* llm = nullptr) {
  RunManifest m;
  m.command = "train";
  m.config_hash = config_hash(config);
  m.seed = config.seed;
  m.started = utc_timestamp();
  RunOptions ro;
  ro.overwrite = overwrite;
  ro.llm = llm;
  TrainOutcome out;
  out.result = run_training(config, ro);
  m.artifacts["checkpoint"] = out.result.checkpoint;
  m.artifacts["metrics_log"] = out.result.metrics_log;
  m.metrics["logged_steps"] = out.result.logged_steps;
  m.metrics["steps"] = out.result.steps;
  m.metrics["adversarial_steps"] = out.result.adversarial_steps;
  if (out.result.last) m.metrics["final_loss"] = to_json(*out.result.last);
  out.manifest_path = (std::filesystem::path(out.result.run_dir) / "manifest.json").string();
  m.write(out.manifest_path);
  return out;
}

// ---- attack / evaluate ----------------------------------------------------

inline void save_reconstructions(const std::string& path, const std::vector<Reconstruction>& recs) {
  detail::write_atomically(path, [&](std::ostream& out) {
    for (const auto& r : recs) out << nlohmann::json{{"truth", r.truth}, {"reconstruction", r.reconstruction}}.dump() << '\n';
  });
}

inline std::vector<Reconstruction> cmd_attack(const std::string& checkpoint, const std::string& eval_path,
                                              const std::string& decode, const std::string& out_path) {
  auto pairs = load_leak(eval_path);
  auto recs = run_attack(checkpoint, pairs, DecodeStrategy::parse(decode));
  if (!out_path.empty()) save_reconstructions(out_path, recs);
  return recs;
}

struct EvaluateOptions {
  MetricToggles toggles;
  std::string decode;                   // empty = the checkpoint's configured strategy
  std::string evaluator = "hash-bow:dim=64,seed=101";
  std::string judge_endpoint;
  const CompletionClient* judge = nullptr;  // overrides judge_endpoint
  const EncoderBackend* evaluator_backend = nullptr;  // overrides evaluator
};

inline AttackReport evaluate_decoder(const InversionDecoder& decoder, std::size_t max_len,
                                     const std::vector<LeakedPair>& eval_pairs, const DecodeStrategy& strategy,
                                     const EvaluateOptions& o) {
  auto recs = run_attack(decoder, eval_pairs, strategy, max_len);
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& r : recs) pairs.emplace_back(r.truth, r.reconstruction);

  DecoderScorer scorer(decoder, max_len);
  BackendPtr evaluator;
  std::unique_ptr<CompletionClient> judge;
  ClinicalNerExtractor extractor;
  MetricBackends b;
  b.scorer = &scorer;
  if (o.toggles.cos) {
    if (o.evaluator_backend) {
      b.evaluator = o.evaluator_backend;
    } else {
      evaluator = make_backend(o.evaluator);
      b.evaluator = evaluator.get();
    }
  }
  if (o.toggles.llm_eval) {
    if (o.judge) {
      b.judge = o.judge;
    } else {
      if (o.judge_endpoint.empty()) throw UsageError("llm_eval needs a judge endpoint");
      judge = std::make_unique<HttpCompletionClient>(o.judge_endpoint, RetryPolicy{}, credential_from_env("TEI_LLM_API_KEY"));
      b.judge = judge.get();
    }
  }
  b.extractor = &extractor;
  return evaluate_reconstructions(pairs, o.toggles, b);
}

inline AttackReport cmd_evaluate(const std::string& checkpoint, const std::string& eval_path, const EvaluateOptions& o,
                                 const std::string& out_path = {}) {
  auto eval_pairs = load_leak(eval_path);
  if (eval_pairs.empty()) throw UsageError("evaluation file '" + eval_path + "' has no pairs");
  TrainState s = load_checkpoint(checkpoint);
  const auto strategy = DecodeStrategy::parse(o.decode.empty() ? s.config.decode : o.decode);
  auto report = evaluate_decoder(s.decoder, s.config.max_len, eval_pairs, strategy, o);
  if (!out_path.empty()) {
    const std::string body = to_json(report).dump(2) + "\n";
    detail::write_atomically(out_path, [&](std::ostream& out) { out << body; });
  }
  return report;
}

// ---- ablate ---------------------------------------------------------------

enum class AblationAxis { components, leak_size, surrogate_backbone };

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "components") return AblationAxis::components;
  if (s == "leak_size") return AblationAxis::leak_size;
  if (s == "surrogate_backbone") return AblationAxis::surrogate_backbone;
  throw UsageError("unknown ablation axis '" + s + "' (components, leak_size, surrogate_backbone)");
}

struct AblationRow {
  std::string label;
  std::size_t leak_size = 0;
  std::string mode;
  bool surrogate = false;
  bool adversarial = false;
  bool consistency = false;
  std::string backbone;
  AttackReport report;
};

// Component on/off grid: direct, surrogate only, +adv, +consistency, full.
inline std::vector<std::pair<std::string, AttackConfig>> component_grid(const AttackConfig& base) {
  std::vector<std::pair<std::string, AttackConfig>> out;
  auto mk = [&](const std::string& label, AttackMode mode, bool adv, bool consist) {
    AttackConfig c = base;
    c.mode = mode;
    c.weights.adv = adv ? base.weights.adv : 0.0;
    c.weights.intra = consist ? base.weights.intra : 0.0;
    c.weights.inter = consist ? base.weights.inter : 0.0;
    c.adversarial.adv_weight = c.weights.adv;
    out.emplace_back(label, c);
  };
  mk("direct", AttackMode::direct, false, false);
  mk("surrogate", AttackMode::transfer, false, false);
  mk("surrogate+adv", AttackMode::transfer, true, false);
  mk("surrogate+consistency", AttackMode::transfer, false, true);
  mk("surrogate+adv+consistency", AttackMode::transfer, true, true);
  return out;
}

template <typename T>
std::vector<T> dedup_values(const std::vector<T>& values) {
  std::vector<T> out;
  for (const auto& v : values) {
    if (std::find(out.begin(), out.end(), v) != out.end()) {
      std::ostringstream os;
      os << v;
      spdlog::warn("duplicate ablation value '{}' ignored", os.str());
      continue;
    }
    out.push_back(v);
  }
  return out;
}

struct AblateOptions {
  EvaluateOptions eval;
  bool parallel = false;
  bool overwrite = false;
};

inline std::vector<AblationRow> cmd_ablate(const AttackConfig& base, AblationAxis axis,
                                           const std::vector<std::string>& raw_values, const AblateOptions& o) {
  if (base.eval_path.empty()) throw UsageError("ablation needs eval_path in the base config");
  auto values = dedup_values(raw_values);

  struct Job {
    AblationRow row;
    AttackConfig config;
  };
  std::vector<Job> jobs;
  auto parse_size = [](const std::string& v) -> std::size_t {
    try {
      std::size_t used = 0;
      const long n = std::stol(v, &used);
      if (used != v.size() || n < 1) throw std::invalid_argument(v);
      return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
      throw UsageError("leak size must be a positive integer, got '" + v + "'");
    }
  };

  // Validate every value before any training starts.
  switch (axis) {
    case AblationAxis::leak_size:
    case AblationAxis::components: {
      if (axis == AblationAxis::leak_size && values.empty()) throw UsageError("leak_size axis needs values");
      std::vector<std::size_t> sizes;
      for (const auto& v : values) sizes.push_back(parse_size(v));
      if (sizes.empty()) sizes.push_back(base.leak_limit);
      for (auto n : sizes) {
        std::vector<std::pair<std::string, AttackConfig>> cfgs;
        if (axis == AblationAxis::components) cfgs = component_grid(base);
        else cfgs.emplace_back(to_string(base.mode), base);
        for (auto& [label, c] : cfgs) {
          c.leak_limit = n;
          Job j;
          j.row.label = label;
          j.row.leak_size = n;
          j.config = c;
          jobs.push_back(std::move(j));
        }
      }
      break;
    }
    case AblationAxis::surrogate_backbone:
      if (values.empty()) throw UsageError("surrogate_backbone axis needs values");
      for (const auto& v : values) {
        const auto spec = BackendSpec::parse(v);
        if (!BackendRegistry::global().contains(spec.name))
          throw UsageError("unknown backbone '" + v + "' for the surrogate_backbone axis");
        Job j;
        j.row.label = v;
        j.row.leak_size = base.leak_limit;
        j.config = base;
        j.config.backbone = v;
        jobs.push_back(std::move(j));
      }
      break;
  }
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    auto& j = jobs[i];
    j.config.name = base.name + "/row-" + std::to_string(i);
    j.config.resume_from.clear();
    j.config.validate();
    j.row.mode = to_string(j.config.mode);
    j.row.surrogate = j.config.mode != AttackMode::direct;
    j.row.adversarial = j.row.surrogate && j.config.weights.adv > 0;
    j.row.consistency = j.row.surrogate && (j.config.weights.intra > 0 || j.config.weights.inter > 0);
    j.row.backbone = j.row.surrogate ? j.config.backbone : "";
  }

  const auto eval_pairs = load_leak(base.eval_path);
  if (eval_pairs.empty()) throw UsageError("evaluation file '" + base.eval_path + "' has no pairs");
  auto run_one = [&](Job& j) {
    RunOptions ro;
    ro.overwrite = o.overwrite;
    auto res = run_training(j.config, ro);
    TrainState s = load_checkpoint(res.checkpoint);
    j.row.report = evaluate_decoder(s.decoder, s.config.max_len, eval_pairs, DecodeStrategy::parse(s.config.decode), o.eval);
  };
  if (o.parallel) {
    std::vector<std::future<void>> fs;
    for (auto& j : jobs) fs.push_back(std::async(std::launch::async, [&run_one, &j] { run_one(j); }));
    for (auto& f : fs) f.get();
  } else {
    for (auto& j : jobs) run_one(j);
  }
  std::vector<AblationRow> rows;
  for (auto& j : jobs) rows.push_back(std::move(j.row));
  return rows;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows, const MetricToggles& t) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "label,leak_size,mode,surrogate,adversarial,consistency,backbone,n_examples";
  if (t.rouge_l) os << ",rougeL";
  if (t.ppl) os << ",ppl";
  if (t.cos) os << ",cos";
  if (t.llm_eval) os << ",llm_eval";
  std::set<std::string> ner_cats;
  if (t.nerr)
    for (const auto& r : rows)
      if (r.report.nerr)
        for (const auto& [k, v] : *r.report.nerr) ner_cats.insert(k);
  for (const auto& k : ner_cats) os << ",nerr_" << k;
  os << '\n';
  auto opt = [&](const std::optional<double>& v) {
    os << ',';
    if (v) os << *v;
  };
  for (const auto& r : rows) {
    os << csv_field(r.label) << ',' << r.leak_size << ',' << r.mode << ',' << r.surrogate << ',' << r.adversarial << ','
       << r.consistency << ',' << csv_field(r.backbone) << ',' << r.report.n_examples;
    if (t.rouge_l) opt(r.report.rouge_l);
    if (t.ppl) opt(r.report.ppl);
    if (t.cos) opt(r.report.cos);
    if (t.llm_eval) opt(r.report.llm_eval);
    for (const auto& k : ner_cats) {
      std::optional<double> v;
      if (r.report.nerr && r.report.nerr->count(k)) v = r.report.nerr->at(k);
      opt(v);
    }
    os << '\n';
  }
  return os.str();
}

// ---- corpus ---------------------------------------------------------------

inline std::vector<std::string> cmd_corpus(std::size_t n, std::uint64_t seed, const std::string& out_path) {
  if (n == 0) throw UsageError("corpus size must be >= 1");
  auto texts = synthetic_clinical_corpus(n, seed);
  if (!out_path.empty()) save_corpus(out_path, texts);
  return texts;
}

}  // namespace tei
