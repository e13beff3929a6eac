#pragma once

// Joint training of surrogate adapter, discriminator and inversion decoder:
//   L_final = w_lm * L_LM + w_intra * L_intra + w_inter * L_inter + w_adv * L_adv
// plus the direct (leak-only) and oracle (true external embeddings) variants.

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tei/adversarial.hpp"
#include "tei/checkpoint.hpp"
#include "tei/consistency.hpp"
#include "tei/datasets.hpp"
#include "tei/decoder.hpp"
#include "tei/encoder.hpp"
#include "tei/errors.hpp"
#include "tei/nn.hpp"
#include "tei/remote.hpp"

namespace tei {

enum class AttackMode { direct, transfer, oracle };

inline AttackMode parse_mode(const std::string& s) {
  if (s == "direct") return AttackMode::direct;
  if (s == "transfer") return AttackMode::transfer;
  if (s == "oracle") return AttackMode::oracle;
  throw UsageError("unknown mode '" + s + "' (direct, transfer, oracle)");
}

inline std::string to_string(AttackMode m) {
  switch (m) {
    case AttackMode::direct: return "direct";
    case AttackMode::transfer: return "transfer";
    case AttackMode::oracle: return "oracle";
  }
  return "transfer";
}

struct LossWeights {
  double lm = 1.0;
  double intra = 1.0;
  double inter = 1.0;
  double adv = 1.0;
};

struct AttackConfig {
  // Run bookkeeping; excluded from the fingerprint.
  std::string name = "run";
  std::string out_dir = "runs";
  std::string resume_from;

  AttackMode mode = AttackMode::transfer;
  std::string leak_path;
  std::string corpus_path;  // external corpus (transfer)
  std::string oracle_path;  // victim-labelled external pairs (oracle)
  std::string eval_path;    // held-out leak-format pairs, used by ablation
  std::size_t leak_limit = 0;  // 0 = use the whole leak file

  std::string backbone = "sentence-transformers/gtr-t5-base";
  std::string decoder = "microsoft/DialoGPT-small";
  std::size_t vocab_size = 64;
  std::size_t max_len = 64;

  double learning_rate = 3e-5;
  double disc_learning_rate = 0.0;  // 0 = same as learning_rate
  double weight_decay = 0.01;
  std::size_t batch_size = 16;
  long warmup_steps = 0;
  long total_steps = 1000;
  long checkpoint_every = 0;  // 0 = initial and final only

  LossWeights weights;
  AdvSchedule adversarial;
  long disc_hidden = 256;

  AugmentationSpec augmentation;
  std::string llm_endpoint;
  std::string decode = "greedy";
  std::uint64_t seed = 0;

  void validate() const {
    if (leak_path.empty()) throw UsageError("config: leak_path is required");
    if (mode == AttackMode::transfer && corpus_path.empty()) throw UsageError("config: transfer mode needs corpus_path");
    if (mode == AttackMode::oracle && oracle_path.empty()) throw UsageError("config: oracle mode needs oracle_path");
    if (batch_size < 1) throw UsageError("config: batch_size must be >= 1");
    if (total_steps < 0 || warmup_steps < 0) throw UsageError("config: step counts must be >= 0");
    if (!(learning_rate > 0)) throw UsageError("config: learning_rate must be positive");
    if (max_len < 1) throw UsageError("config: max_len must be >= 1");
    for (double w : {weights.lm, weights.intra, weights.inter, weights.adv})
      if (!(w >= 0)) throw UsageError("config: loss weights must be nonnegative");
    adversarial.validate();
    DecodeStrategy::parse(decode);
  }
};

inline nlohmann::json to_json(const AttackConfig& c) {
  return {
      {"name", c.name},
      {"out_dir", c.out_dir},
      {"resume_from", c.resume_from},
      {"mode", to_string(c.mode)},
      {"leak_path", c.leak_path},
      {"corpus_path", c.corpus_path},
      {"oracle_path", c.oracle_path},
      {"eval_path", c.eval_path},
      {"leak_limit", c.leak_limit},
      {"backbone", c.backbone},
      {"decoder", c.decoder},
      {"vocab_size", c.vocab_size},
      {"max_len", c.max_len},
      {"learning_rate", c.learning_rate},
      {"disc_learning_rate", c.disc_learning_rate},
      {"weight_decay", c.weight_decay},
      {"batch_size", c.batch_size},
      {"warmup_steps", c.warmup_steps},
      {"total_steps", c.total_steps},
      {"checkpoint_every", c.checkpoint_every},
      {"weights", {{"lm", c.weights.lm}, {"intra", c.weights.intra}, {"inter", c.weights.inter}, {"adv", c.weights.adv}}},
      {"adversarial", {{"d_steps", c.adversarial.d_steps}, {"g_steps", c.adversarial.g_steps}}},
      {"disc_hidden", c.disc_hidden},
      {"augmentation",
       {{"strategy", to_string(c.augmentation.strategy)},
        {"multiplier", c.augmentation.multiplier},
        {"seed", c.augmentation.seed}}},
      {"llm_endpoint", c.llm_endpoint},
      {"decode", c.decode},
      {"seed", c.seed},
  };
}

inline AttackConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  static const std::vector<std::string> known{
      "name",         "out_dir",      "resume_from",        "mode",         "leak_path",      "corpus_path",
      "oracle_path",  "eval_path",    "leak_limit",         "backbone",     "decoder",        "vocab_size",
      "max_len",      "learning_rate", "disc_learning_rate", "weight_decay", "batch_size",     "warmup_steps",
      "total_steps",  "checkpoint_every", "weights",        "adversarial",  "disc_hidden",    "augmentation",
      "llm_endpoint", "decode",       "seed"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw UsageError("config: unknown key '" + k + "'");

  AttackConfig c;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("name", c.name);
    get("out_dir", c.out_dir);
    get("resume_from", c.resume_from);
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
    get("leak_path", c.leak_path);
    get("corpus_path", c.corpus_path);
    get("oracle_path", c.oracle_path);
    get("eval_path", c.eval_path);
    get("leak_limit", c.leak_limit);
    get("backbone", c.backbone);
    get("decoder", c.decoder);
    get("vocab_size", c.vocab_size);
    get("max_len", c.max_len);
    get("learning_rate", c.learning_rate);
    get("disc_learning_rate", c.disc_learning_rate);
    get("weight_decay", c.weight_decay);
    get("batch_size", c.batch_size);
    get("warmup_steps", c.warmup_steps);
    get("total_steps", c.total_steps);
    get("checkpoint_every", c.checkpoint_every);
    get("disc_hidden", c.disc_hidden);
    get("llm_endpoint", c.llm_endpoint);
    get("decode", c.decode);
    get("seed", c.seed);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      for (const auto& [k, v] : w.items())
        if (k != "lm" && k != "intra" && k != "inter" && k != "adv") throw UsageError("config: unknown weight '" + k + "'");
      c.weights.lm = w.value("lm", c.weights.lm);
      c.weights.intra = w.value("intra", c.weights.intra);
      c.weights.inter = w.value("inter", c.weights.inter);
      c.weights.adv = w.value("adv", c.weights.adv);
    }
    if (j.contains("adversarial")) {
      const auto& a = j.at("adversarial");
      c.adversarial.d_steps = a.value("d_steps", c.adversarial.d_steps);
      c.adversarial.g_steps = a.value("g_steps", c.adversarial.g_steps);
    }
    if (j.contains("augmentation")) {
      const auto& a = j.at("augmentation");
      c.augmentation.strategy = parse_augment_strategy(a.value("strategy", std::string("none")));
      c.augmentation.multiplier = a.value("multiplier", 0);
      c.augmentation.seed = a.value("seed", std::uint64_t{0});
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  c.adversarial.adv_weight = c.weights.adv;
  return c;
}

inline AttackConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  try {
    return config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

// Stable fingerprint over every field that affects training.
inline std::string config_hash(const AttackConfig& c) {
  auto j = to_json(c);
  j.erase("name");
  j.erase("out_dir");
  j.erase("resume_from");
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
  return os.str();
}

// ---------------------------------------------------------------------------

// Cyclic iterator over [0, n) reshuffled every epoch. The index drawn at any
// position is a pure function of (seed, stream, position), so resuming needs
// only the step counter.
class CyclicSampler {
 public:
  CyclicSampler(std::size_t n, std::uint64_t seed, std::uint64_t stream) : n_(n), seed_(seed), stream_(stream) {}

  std::vector<std::size_t> batch(long step, std::size_t batch_size) const {
    std::vector<std::size_t> out;
    if (n_ == 0) return out;
    for (std::size_t k = 0; k < batch_size; ++k) {
      const std::uint64_t pos = static_cast<std::uint64_t>(step) * batch_size + k;
      const std::uint64_t epoch = pos / n_;
      if (epoch != cached_epoch_) {
        perm_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
        Rng rng(mix_seed(mix_seed(seed_, stream_), epoch));
        std::shuffle(perm_.begin(), perm_.end(), rng);
        cached_epoch_ = epoch;
      }
      out.push_back(perm_[pos % n_]);
    }
    return out;
  }

 private:
  std::size_t n_;
  std::uint64_t seed_, stream_;
  mutable std::uint64_t cached_epoch_ = ~0ull;
  mutable std::vector<std::size_t> perm_;
};

struct LossBreakdown {
  long step = 0;
  double lr = 0;
  double lm = 0;
  double intra = 0;
  double inter = 0;
  double adv = 0;
  double disc = 0;
  double total = 0;
  int disc_updates = 0;
};

inline nlohmann::json to_json(const LossBreakdown& b) {
  return {{"step", b.step}, {"lr", b.lr},       {"lm", b.lm},       {"intra", b.intra}, {"inter", b.inter},
          {"adv", b.adv},   {"disc", b.disc},   {"total", b.total}, {"disc_updates", b.disc_updates}};
}

// Training data after loading, augmentation, tokenization and backbone encoding.
struct TrainingData {
  std::vector<std::string> leak_texts;
  EmbeddingMatrix leak_private;         // E_P rows
  EmbeddingMatrix leak_backbone;        // backbone(leak texts); empty in direct mode
  std::vector<TokenSequence> leak_tokens;

  std::vector<std::string> ext_texts;   // external corpus, then augmented leak texts
  std::vector<Origin> ext_origin;
  EmbeddingMatrix ext_backbone;
  EmbeddingMatrix ext_oracle;           // oracle mode: victim embeddings of the first ext_oracle.rows() texts
  std::vector<TokenSequence> ext_tokens;
};

class TrainState {
 public:
  AttackConfig config;
  WordTokenizer tokenizer;
  std::optional<Adapter> adapter;
  std::optional<Discriminator> discriminator;
  InversionDecoder decoder;
  nn::AdamW main_optimizer;
  nn::AdamW disc_optimizer;
  long step = 0;
  long adversarial_steps = 0;
  std::map<std::string, double> ema;

  nn::ParameterList main_parameters() {
    auto ps = decoder.parameters();
    if (adapter) {
      auto a = adapter->parameters();
      ps.insert(ps.begin(), a.begin(), a.end());
    }
    return ps;
  }

  nn::ParameterList all_parameters() {
    auto ps = main_parameters();
    if (discriminator) {
      auto d = discriminator->parameters();
      ps.insert(ps.end(), d.begin(), d.end());
    }
    return ps;
  }

  std::uint64_t parameter_checksum() { return nn::checksum(all_parameters()); }

  double lr_at(long s) const {
    return nn::warmup_linear_lr(config.learning_rate, s, config.warmup_steps, config.total_steps);
  }
  double disc_lr_at(long s) const {
    const double base = config.disc_learning_rate > 0 ? config.disc_learning_rate : config.learning_rate;
    return nn::warmup_linear_lr(base, s, config.warmup_steps, config.total_steps);
  }
};

// Fresh state: tokenizer over every training text, parameters from the seed.
inline TrainState init_state(const AttackConfig& config, const TrainingData& data, Eigen::Index backbone_dim) {
  TrainState s;
  s.config = config;
  std::vector<std::string> all = data.leak_texts;
  all.insert(all.end(), data.ext_texts.begin(), data.ext_texts.end());
  s.tokenizer = WordTokenizer::build(all, config.vocab_size);
  const Eigen::Index d_v = data.leak_private.cols();
  // One stream per component, so the decoder starts identical in every mode.
  if (config.mode != AttackMode::direct) {
    Rng adapter_rng(mix_seed(config.seed, 0xada));
    Rng disc_rng(mix_seed(config.seed, 0xd15c));
    s.adapter = Adapter(backbone_dim, d_v, adapter_rng);
    s.discriminator = Discriminator(d_v, config.disc_hidden, disc_rng);
  }
  Rng decoder_rng(mix_seed(config.seed, 0xdec));
  s.decoder = make_decoder(config.decoder, d_v, s.tokenizer, decoder_rng);
  nn::AdamW::Options o;
  o.weight_decay = config.weight_decay;
  s.main_optimizer = nn::AdamW(o);
  s.disc_optimizer = nn::AdamW(o);
  return s;
}

namespace detail {

inline Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

template <typename T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

inline void scale_grads(const nn::ParameterList& ps, double w) {
  for (auto* p : ps) p->grad *= w;
}

}  // namespace detail

// One optimization step on a leak batch and an external batch (given as row
// indices into `data`). Transfer/oracle: discriminator phase, then a single
// joint AdamW step on adapter + decoder. Direct: decoder on leak pairs only.
inline LossBreakdown train_step(TrainState& s, const TrainingData& data, const std::vector<std::size_t>& leak_idx,
                                const std::vector<std::size_t>& ext_idx) {
  const auto& cfg = s.config;
  const auto& w = cfg.weights;
  if (leak_idx.empty()) throw UsageError("train_step: empty leak batch");
  LossBreakdown b;
  b.step = s.step;
  b.lr = s.lr_at(s.step);

  const Matrix ep = detail::gather_rows(data.leak_private, leak_idx);
  auto seqs = detail::gather(data.leak_tokens, leak_idx);
  Matrix dec_input = ep;

  auto decoder_params = s.decoder.parameters();
  nn::ParameterList step_params = decoder_params;

  if (cfg.mode != AttackMode::direct) {
    if (ext_idx.empty()) throw UsageError("train_step: empty external batch");
    Adapter& adapter = *s.adapter;
    Discriminator& disc = *s.discriminator;
    auto adapter_params = adapter.parameters();
    auto disc_params = disc.parameters();
    const Matrix bl = detail::gather_rows(data.leak_backbone, leak_idx);
    const Matrix bt = detail::gather_rows(data.ext_backbone, ext_idx);
    const bool adversarial = w.adv > 0;
    const bool train_adapter = w.intra > 0 || w.inter > 0 || adversarial;

    if (adversarial) {
      for (int k = 0; k < cfg.adversarial.d_steps; ++k) {
        nn::zero_grad(disc_params);
        b.disc = disc_loss_backward(disc, ep, adapter.apply(bt));
        if (!std::isfinite(b.disc))
          throw DivergenceError("discriminator loss non-finite at step " + std::to_string(s.step));
        s.disc_optimizer.step(disc_params, s.disc_lr_at(s.step));
        ++b.disc_updates;
      }
      // Generator updates beyond the one folded into the joint step.
      for (int k = 1; k < cfg.adversarial.g_steps; ++k) {
        nn::zero_grad(adapter_params);
        Matrix g;
        gen_adv_loss_backward(disc, adapter.apply(bt), &g);
        adapter.backward(bt, w.adv * g);
        s.main_optimizer.step(adapter_params, b.lr);
      }
    }

    nn::zero_grad(adapter_params);
    const Matrix es = adapter.apply(bl);
    const Matrix et = adapter.apply(bt);
    b.intra = intra_loss(ep, es);
    b.inter = inter_loss(ep, es);
    Matrix g_es = Matrix::Zero(es.rows(), es.cols());
    if (w.intra > 0) g_es += w.intra * intra_grad(ep, es);
    if (w.inter > 0) g_es += w.inter * inter_grad(ep, es);
    adapter.backward(bl, g_es);
    if (adversarial) {
      Matrix g_et;
      b.adv = gen_adv_loss_backward(disc, et, &g_et);
      adapter.backward(bt, w.adv * g_et);
    }
    if (train_adapter) step_params.insert(step_params.begin(), adapter_params.begin(), adapter_params.end());

    // Decoder sees external texts paired with their current surrogate
    // embeddings (values only) or, in oracle mode, the victim embeddings.
    Matrix ext_emb = et;
    if (cfg.mode == AttackMode::oracle)
      for (std::size_t i = 0; i < ext_idx.size(); ++i)
        if (static_cast<Eigen::Index>(ext_idx[i]) < data.ext_oracle.rows())
          ext_emb.row(static_cast<Eigen::Index>(i)) = data.ext_oracle.row(static_cast<Eigen::Index>(ext_idx[i]));
    dec_input.conservativeResize(ep.rows() + ext_emb.rows(), Eigen::NoChange);
    dec_input.bottomRows(ext_emb.rows()) = ext_emb;
    auto ext_seqs = detail::gather(data.ext_tokens, ext_idx);
    seqs.insert(seqs.end(), ext_seqs.begin(), ext_seqs.end());
    s.adversarial_steps += b.disc_updates;
  }

  nn::zero_grad(decoder_params);
  b.lm = s.decoder.batch_lm_loss_backward(dec_input, seqs);
  detail::scale_grads(decoder_params, w.lm);

  b.total = w.lm * b.lm + w.intra * b.intra + w.inter * b.inter + w.adv * b.adv;
  if (!std::isfinite(b.total)) {
    std::ostringstream os;
    os << "non-finite total loss at step " << s.step << " (lm=" << b.lm << " intra=" << b.intra << " inter=" << b.inter
       << " adv=" << b.adv << " disc=" << b.disc << ")";
    throw DivergenceError(os.str());
  }
  s.main_optimizer.step(step_params, b.lr);

  for (const auto& [k, v] : std::map<std::string, double>{{"lm", b.lm}, {"intra", b.intra}, {"inter", b.inter},
                                                          {"adv", b.adv}, {"disc", b.disc}, {"total", b.total}}) {
    auto it = s.ema.find(k);
    if (it == s.ema.end()) s.ema[k] = v;
    else it->second = 0.99 * it->second + 0.01 * v;
  }
  ++s.step;
  return b;
}

// ---- data preparation -----------------------------------------------------

inline EmbeddingMatrix encode_in_batches(const EncoderBackend& backend, const std::vector<std::string>& texts,
                                         std::size_t batch_size) {
  EmbeddingMatrix out(static_cast<Eigen::Index>(texts.size()), backend.dimension());
  for (std::size_t b = 0; b < texts.size(); b += batch_size) {
    const std::size_t e = std::min(texts.size(), b + batch_size);
    out.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) =
        encode_batch(backend, std::vector<std::string>(texts.begin() + static_cast<long>(b), texts.begin() + static_cast<long>(e)));
  }
  return out;
}

// ---- encoder stealing on its own ------------------------------------------

struct StealOptions {
  long steps = 2000;
  std::size_t batch_size = 32;
  double learning_rate = 1e-2;
  double weight_decay = 0.0;
  double intra = 1.0;
  double inter = 1.0;
  std::uint64_t seed = 0;
};

// Fits only the adapter of a surrogate on leaked pairs with the consistency
// losses; no decoder is involved.
inline SurrogateModel steal_encoder(BackendPtr backbone, const std::vector<LeakedPair>& pairs, const StealOptions& o) {
  if (pairs.empty()) throw UsageError("steal_encoder: no leaked pairs");
  if (!backbone) throw UsageError("steal_encoder: no backbone");
  std::vector<std::string> texts;
  for (const auto& p : pairs) texts.push_back(p.text);
  const Matrix x = encode_in_batches(*backbone, texts, 256);
  const Matrix ep = embeddings_of(pairs);
  Rng rng(mix_seed(o.seed, 0xada));
  Adapter adapter(x.cols(), ep.cols(), rng);
  nn::AdamW::Options ao;
  ao.weight_decay = o.weight_decay;
  nn::AdamW opt(ao);
  auto params = adapter.parameters();
  CyclicSampler sampler(pairs.size(), o.seed, 0x57ea1);
  for (long t = 0; t < o.steps; ++t) {
    const auto idx = sampler.batch(t, std::min(o.batch_size, pairs.size()));
    Matrix xb(static_cast<Eigen::Index>(idx.size()), x.cols()), pb(static_cast<Eigen::Index>(idx.size()), ep.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      xb.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
      pb.row(static_cast<Eigen::Index>(i)) = ep.row(static_cast<Eigen::Index>(idx[i]));
    }
    const Matrix es = adapter.apply(xb);
    Matrix g = Matrix::Zero(es.rows(), es.cols());
    if (o.intra > 0) g += o.intra * intra_grad(pb, es);
    if (o.inter > 0) g += o.inter * inter_grad(pb, es);
    nn::zero_grad(params);
    adapter.backward(xb, g);
    opt.step(params, nn::warmup_linear_lr(o.learning_rate, t, 0, o.steps));
    if (!nn::all_finite(params)) throw DivergenceError("steal_encoder: adapter diverged at step " + std::to_string(t));
  }
  return SurrogateModel(std::move(backbone), std::move(adapter));
}

// Deterministic subset of the first `limit` pairs after a seeded shuffle.
inline std::vector<LeakedPair> subsample(std::vector<LeakedPair> pairs, std::size_t limit, std::uint64_t seed) {
  if (limit == 0 || limit >= pairs.size()) return pairs;
  Rng rng(mix_seed(seed, 0x5ab));
  std::shuffle(pairs.begin(), pairs.end(), rng);
  pairs.resize(limit);
  return pairs;
}

struct PreparedRun {
  TrainingData data;
  BackendPtr backbone;  // null in direct mode
};

inline PreparedRun prepare_data(const AttackConfig& cfg, const CompletionClient* llm = nullptr) {
  PreparedRun run;
  auto& d = run.data;
  auto leak = subsample(load_leak(cfg.leak_path), cfg.leak_limit, cfg.seed);
  if (leak.empty()) throw UsageError("leak file '" + cfg.leak_path + "' has no pairs");
  d.leak_texts = texts_of(leak);
  d.leak_private = embeddings_of(leak);

  if (cfg.mode != AttackMode::direct) {
    run.backbone = make_backend(cfg.backbone);
    if (cfg.mode == AttackMode::transfer) {
      d.ext_texts = load_corpus(cfg.corpus_path);
    } else {
      auto oracle = load_leak(cfg.oracle_path);
      if (!oracle.empty() && oracle.front().embedding.size() != static_cast<std::size_t>(d.leak_private.cols()))
        throw DimensionError("oracle embeddings have width " + std::to_string(oracle.front().embedding.size()) +
                             " but leak embeddings have width " + std::to_string(d.leak_private.cols()));
      d.ext_texts = texts_of(oracle);
      d.ext_oracle = embeddings_of(oracle);
    }
    d.ext_origin.assign(d.ext_texts.size(), Origin::external);

    if (cfg.augmentation.strategy != AugmentStrategy::none && cfg.augmentation.multiplier > 0) {
      std::unique_ptr<CompletionClient> owned;
      if (cfg.augmentation.strategy == AugmentStrategy::llm && !llm) {
        if (cfg.llm_endpoint.empty()) throw UsageError("llm augmentation needs llm_endpoint");
        owned = std::make_unique<HttpCompletionClient>(cfg.llm_endpoint);
        llm = owned.get();
      }
      std::vector<std::string> vocab_src = d.ext_texts;
      vocab_src.insert(vocab_src.end(), d.leak_texts.begin(), d.leak_texts.end());
      Augmenter aug(cfg.augmentation, corpus_vocabulary(vocab_src), llm);
      for (const auto& t : d.leak_texts)
        for (auto& v : aug.augment(t)) {
          if (text::trim(v).empty()) continue;
          d.ext_texts.push_back(std::move(v));
          d.ext_origin.push_back(Origin::augmented);
        }
    }
    if (d.ext_texts.empty()) throw UsageError("external corpus is empty");
    d.leak_backbone = encode_in_batches(*run.backbone, d.leak_texts, cfg.batch_size);
    d.ext_backbone = encode_in_batches(*run.backbone, d.ext_texts, cfg.batch_size);
  }
  return run;
}

inline void tokenize_data(TrainingData& d, const WordTokenizer& tok, std::size_t max_len) {
  d.leak_tokens.clear();
  d.ext_tokens.clear();
  for (const auto& t : d.leak_texts) d.leak_tokens.push_back(tok.encode(t, max_len));
  for (const auto& t : d.ext_texts) d.ext_tokens.push_back(tok.encode(t, max_len));
}

// ---- checkpoints ----------------------------------------------------------

inline void save_checkpoint(const std::string& path, TrainState& s) {
  Archive a;
  a.header["format"] = 1;
  a.header["config"] = to_json(s.config);
  a.header["config_hash"] = config_hash(s.config);
  a.header["step"] = s.step;
  a.header["adversarial_steps"] = s.adversarial_steps;
  a.header["ema"] = s.ema;
  a.header["tokenizer"] = s.tokenizer.vocabulary();
  const auto& sh = s.decoder.shape();
  a.header["decoder_shape"] = {{"input_dim", sh.input_dim}, {"hidden", sh.hidden}, {"vocab", sh.vocab}, {"layers", sh.layers}};
  if (s.adapter) a.header["adapter_shape"] = {s.adapter->input_dim(), s.adapter->output_dim()};
  if (s.discriminator) a.header["disc_shape"] = {s.discriminator->input_dim(), s.discriminator->hidden()};
  for (auto* p : s.all_parameters()) a.tensors[p->name] = p->value;
  nlohmann::json steps = nlohmann::json::object();
  for (auto [opt, tag] : {std::pair{&s.main_optimizer, "opt.main"}, std::pair{&s.disc_optimizer, "opt.disc"}}) {
    nlohmann::json t = nlohmann::json::object();
    for (const auto& [name, slot] : opt->slots()) {
      a.tensors[std::string(tag) + "/" + name + "/m"] = slot.m;
      a.tensors[std::string(tag) + "/" + name + "/v"] = slot.v;
      t[name] = slot.t;
    }
    steps[tag] = t;
  }
  a.header["optimizer_steps"] = steps;
  write_archive(path, a);
}

inline TrainState load_checkpoint(const std::string& path) {
  Archive a = read_archive(path);
  TrainState s;
  try {
    s.config = config_from_json(a.header.at("config"));
    s.step = a.header.at("step").get<long>();
    s.adversarial_steps = a.header.value("adversarial_steps", 0L);
    s.ema = a.header.at("ema").get<std::map<std::string, double>>();
    s.tokenizer = WordTokenizer(a.header.at("tokenizer").get<std::vector<std::string>>());
    const auto& ds = a.header.at("decoder_shape");
    DecoderShape shape{ds.at("input_dim").get<Eigen::Index>(), ds.at("hidden").get<Eigen::Index>(),
                       ds.at("vocab").get<Eigen::Index>(), ds.at("layers").get<int>()};
    Rng rng(0);
    s.decoder = InversionDecoder(shape, s.tokenizer, rng);
    if (a.header.contains("adapter_shape")) {
      auto as = a.header["adapter_shape"];
      s.adapter = Adapter(as[0].get<Eigen::Index>(), as[1].get<Eigen::Index>(), rng);
    }
    if (a.header.contains("disc_shape")) {
      auto dsh = a.header["disc_shape"];
      s.discriminator = Discriminator(dsh[0].get<Eigen::Index>(), dsh[1].get<Eigen::Index>(), rng);
    }
    for (auto* p : s.all_parameters()) {
      auto it = a.tensors.find(p->name);
      if (it == a.tensors.end()) throw ParseError("checkpoint '" + path + "' lacks tensor '" + p->name + "'");
      if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols())
        throw ParseError("checkpoint '" + path + "': tensor '" + p->name + "' has the wrong shape");
      p->value = it->second;
      p->zero_grad();
    }
    nn::AdamW::Options o;
    o.weight_decay = s.config.weight_decay;
    s.main_optimizer = nn::AdamW(o);
    s.disc_optimizer = nn::AdamW(o);
    const auto& steps = a.header.at("optimizer_steps");
    for (auto [opt, tag] : {std::pair{&s.main_optimizer, "opt.main"}, std::pair{&s.disc_optimizer, "opt.disc"}}) {
      for (const auto& [name, t] : steps.at(tag).items()) {
        nn::AdamW::Slot slot;
        slot.m = a.tensors.at(std::string(tag) + "/" + name + "/m");
        slot.v = a.tensors.at(std::string(tag) + "/" + name + "/v");
        slot.t = t.get<long>();
        opt->slots()[name] = std::move(slot);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint '" + path + "' has a malformed header: " + e.what());
  } catch (const std::out_of_range& e) {
    throw ParseError("checkpoint '" + path + "' is missing optimizer state: " + e.what());
  }
  return s;
}

// ---- run driver -----------------------------------------------------------

struct RunOptions {
  bool overwrite = false;
  const CompletionClient* llm = nullptr;  // overrides config.llm_endpoint
  // Called with every step's breakdown (after it is logged).
  std::function<void(const LossBreakdown&)> on_step;
};

struct TrainingResult {
  std::string run_dir;
  std::string checkpoint;  // final checkpoint
  std::string metrics_log;
  std::vector<std::string> checkpoints;
  long steps = 0;
  long logged_steps = 0;
  long adversarial_steps = 0;
  std::optional<LossBreakdown> last;
  std::uint64_t parameter_checksum = 0;
};

inline std::string checkpoint_path(const std::string& run_dir, long step) {
  return (std::filesystem::path(run_dir) / ("step-" + std::to_string(step)) / "checkpoint.bin").string();
}

inline TrainingResult run_training(const AttackConfig& config, const RunOptions& opts = {}) {
  namespace fs = std::filesystem;
  config.validate();
  TrainingResult result;
  const fs::path run_dir = fs::path(config.out_dir) / config.name;
  result.run_dir = run_dir.string();
  result.metrics_log = (run_dir / "metrics.jsonl").string();

  const bool resuming = !config.resume_from.empty();
  const bool resume_in_place =
      resuming && fs::exists(run_dir) &&
      fs::weakly_canonical(config.resume_from).string().rfind(fs::weakly_canonical(run_dir).string(), 0) == 0;
  if (fs::exists(run_dir) && !resume_in_place) {
    if (!opts.overwrite) throw UsageError("run directory '" + run_dir.string() + "' exists (pass --overwrite to replace it)");
    fs::remove_all(run_dir);
  }
  fs::create_directories(run_dir);

  PreparedRun prepared = prepare_data(config, opts.llm);
  TrainState state;
  if (resuming) {
    state = load_checkpoint(config.resume_from);
    if (config_hash(state.config) != config_hash(config))
      throw UsageError("checkpoint '" + config.resume_from + "' was produced by a different configuration (hash " +
                       config_hash(state.config) + " vs " + config_hash(config) + ")");
    state.config = config;
  } else {
    state = init_state(config, prepared.data, prepared.backbone ? prepared.backbone->dimension() : 0);
  }
  tokenize_data(prepared.data, state.tokenizer, config.max_len);

  // Keep log lines up to the resumed step only.
  std::vector<std::string> kept;
  if (resume_in_place && fs::exists(result.metrics_log)) {
    std::ifstream in(result.metrics_log);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty() && nlohmann::json::parse(line).at("step").get<long>() < state.step) kept.push_back(line);
  }
  std::ofstream log(result.metrics_log, std::ios::trunc);
  if (!log) throw IoError("cannot write '" + result.metrics_log + "'");
  for (const auto& l : kept) log << l << '\n';

  auto write_ckpt = [&] {
    const auto p = checkpoint_path(run_dir.string(), state.step);
    save_checkpoint(p, state);
    result.checkpoints.push_back(p);
    result.checkpoint = p;
  };
  if (!resuming) write_ckpt();

  const CyclicSampler leak_sampler(prepared.data.leak_texts.size(), config.seed, 11);
  const CyclicSampler ext_sampler(prepared.data.ext_texts.size(), config.seed, 12);
  while (state.step < config.total_steps) {
    const long t = state.step;
    LossBreakdown b;
    try {
      b = train_step(state, prepared.data, leak_sampler.batch(t, config.batch_size), ext_sampler.batch(t, config.batch_size));
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + "; last good checkpoint: " +
                            (result.checkpoint.empty() ? std::string("none") : result.checkpoint));
    }
    log << to_json(b).dump() << '\n';
    log.flush();
    ++result.logged_steps;
    if (opts.on_step) opts.on_step(b);
    result.last = b;
    if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 && state.step < config.total_steps)
      write_ckpt();
  }
  if (result.checkpoint.empty() || result.checkpoint != checkpoint_path(run_dir.string(), state.step)) write_ckpt();
  result.steps = state.step;
  result.adversarial_steps = state.adversarial_steps;
  result.parameter_checksum = state.parameter_checksum();
  return result;
}

// ---- attack ---------------------------------------------------------------

struct Reconstruction {
  std::string truth;
  std::string reconstruction;
};

inline std::vector<Reconstruction> run_attack(const InversionDecoder& decoder, const std::vector<LeakedPair>& eval_pairs,
                                              const DecodeStrategy& strategy, std::size_t max_len) {
  std::vector<Reconstruction> out;
  out.reserve(eval_pairs.size());
  for (const auto& p : eval_pairs) {
    if (static_cast<Eigen::Index>(p.embedding.size()) != decoder.shape().input_dim)
      throw DimensionError("evaluation embedding width " + std::to_string(p.embedding.size()) +
                           " does not match the decoder's input width " + std::to_string(decoder.shape().input_dim));
    RowVector e = Eigen::Map<const RowVector>(p.embedding.data(), static_cast<Eigen::Index>(p.embedding.size()));
    out.push_back({p.text, decoder.generate(e, strategy, max_len)});
  }
  return out;
}

inline std::vector<Reconstruction> run_attack(const std::string& checkpoint, const std::vector<LeakedPair>& eval_pairs,
                                              const DecodeStrategy& strategy) {
  TrainState s = load_checkpoint(checkpoint);
  return run_attack(s.decoder, eval_pairs, strategy, s.config.max_len);
}

}  // namespace tei
