#pragma once

// Text encoders: the abstract backend interface, the bundled hashing backbone,
// a synthetic victim used to fabricate leaks offline, the trainable affine
// adapter, and the surrogate model (frozen backbone + adapter).

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include "tei/errors.hpp"
#include "tei/nn.hpp"
#include "tei/text.hpp"
#include "tei/types.hpp"

namespace tei {

class EncoderBackend {
 public:
  virtual ~EncoderBackend() = default;
  virtual std::string name() const = 0;
  virtual Eigen::Index dimension() const = 0;
  // Implementations may assume a non-empty batch of non-blank texts.
  virtual EmbeddingMatrix encode(const std::vector<std::string>& texts) const = 0;
};

using BackendPtr = std::shared_ptr<const EncoderBackend>;

inline EmbeddingMatrix encode_batch(const EncoderBackend& backend, const std::vector<std::string>& texts) {
  if (texts.empty()) throw UsageError("encode_batch: empty batch");
  for (std::size_t i = 0; i < texts.size(); ++i)
    if (text::trim(texts[i]).empty())
      throw UsageError("encode_batch: text " + std::to_string(i) + " is empty after trimming");

  EmbeddingMatrix out;
  try {
    out = backend.encode(texts);
  } catch (const BackendError&) {
    throw;
  } catch (const std::exception& e) {
    throw BackendError("backend '" + backend.name() + "' failed: " + e.what());
  }
  if (out.rows() != static_cast<Eigen::Index>(texts.size()) || out.cols() != backend.dimension())
    throw BackendError("backend '" + backend.name() + "' returned " + std::to_string(out.rows()) + "x" +
                       std::to_string(out.cols()) + " for " + std::to_string(texts.size()) +
                       " texts of dimension " + std::to_string(backend.dimension()));
  if (!out.allFinite()) throw BackendError("backend '" + backend.name() + "' produced non-finite values");
  return out;
}

// Deterministic bag-of-n-grams encoder. Every feature (unigram, and bigram when
// ngram >= 2) hashes to a fixed Gaussian vector; a text embeds to the feature
// sum scaled by 1/sqrt(count).
class HashingBackbone final : public EncoderBackend {
 public:
  HashingBackbone(Eigen::Index dim, std::uint64_t seed, int ngram = 2)
      : dim_(dim), seed_(seed), ngram_(ngram) {
    if (dim <= 0) throw UsageError("hash-bow: dimension must be positive");
    if (ngram < 1 || ngram > 2) throw UsageError("hash-bow: ngram must be 1 or 2");
  }

  std::string name() const override {
    return "hash-bow:dim=" + std::to_string(dim_) + ",seed=" + std::to_string(seed_) +
           ",ngram=" + std::to_string(ngram_);
  }
  Eigen::Index dimension() const override { return dim_; }

  EmbeddingMatrix encode(const std::vector<std::string>& texts) const override {
    EmbeddingMatrix out(static_cast<Eigen::Index>(texts.size()), dim_);
    for (std::size_t i = 0; i < texts.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = embed(texts[i]);
    return out;
  }

  RowVector embed(const std::string& s) const {
    auto toks = text::bag_tokens(s);
    if (toks.empty()) toks.push_back(text::trim(s));
    RowVector acc = RowVector::Zero(dim_);
    double count = 0;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      acc += feature(toks[i]);
      count += 1;
      if (ngram_ >= 2 && i + 1 < toks.size()) {
        acc += feature(toks[i] + ' ' + toks[i + 1]);
        count += 1;
      }
    }
    return acc / std::sqrt(count);
  }

 private:
  RowVector feature(const std::string& f) const {
    Rng rng(mix_seed(seed_, fnv1a(f)));
    std::normal_distribution<double> dist(0.0, 1.0);
    RowVector v(dim_);
    for (Eigen::Index j = 0; j < dim_; ++j) v(j) = dist(rng);
    return v;
  }

  Eigen::Index dim_;
  std::uint64_t seed_;
  int ngram_;
};

// Stand-in for an anonymous embedding service: a hidden random affine map of a
// private hashing encoder, optionally squashed by tanh(gain * z), plus
// per-text deterministic Gaussian noise.
class SyntheticVictim final : public EncoderBackend {
 public:
  struct Options {
    Eigen::Index dim = 48;
    std::uint64_t seed = 5;
    double noise = 0.01;
    double gain = 0.0;  // 0 keeps the map affine
    Eigen::Index base_dim = 32;
    std::uint64_t base_seed = 7;
    int base_ngram = 2;
  };

  explicit SyntheticVictim(Options o) : opts_(o), base_(o.base_dim, o.base_seed, o.base_ngram) {
    if (o.dim <= 0) throw UsageError("synthetic-victim: dimension must be positive");
    Rng rng(mix_seed(o.seed, 0xa11ce));
    weight_ = random_normal(o.base_dim, o.dim, rng, 1.0 / std::sqrt(static_cast<double>(o.base_dim)));
    bias_ = random_normal(1, o.dim, rng, 0.1);
  }

  std::string name() const override {
    std::ostringstream os;
    os << "synthetic-victim:dim=" << opts_.dim << ",seed=" << opts_.seed << ",noise=" << opts_.noise
       << ",gain=" << opts_.gain << ",base_dim=" << opts_.base_dim << ",base_seed=" << opts_.base_seed
       << ",base_ngram=" << opts_.base_ngram;
    return os.str();
  }
  Eigen::Index dimension() const override { return opts_.dim; }

  EmbeddingMatrix encode(const std::vector<std::string>& texts) const override {
    EmbeddingMatrix z = base_.encode(texts) * weight_;
    z.rowwise() += bias_.row(0);
    if (opts_.gain > 0) z = (z.array() * opts_.gain).tanh();
    if (opts_.noise > 0) {
      for (std::size_t i = 0; i < texts.size(); ++i) {
        Rng rng(mix_seed(opts_.seed ^ 0x5eed, fnv1a(texts[i])));
        std::normal_distribution<double> dist(0.0, opts_.noise);
        for (Eigen::Index j = 0; j < z.cols(); ++j) z(static_cast<Eigen::Index>(i), j) += dist(rng);
      }
    }
    return z;
  }

 private:
  Options opts_;
  HashingBackbone base_;
  Matrix weight_;
  Matrix bias_;
};

// Backend over a user callback; handy for plugging external models and for tests.
class CallbackBackend final : public EncoderBackend {
 public:
  using Fn = std::function<EmbeddingMatrix(const std::vector<std::string>&)>;
  CallbackBackend(std::string name, Eigen::Index dim, Fn fn) : name_(std::move(name)), dim_(dim), fn_(std::move(fn)) {}
  std::string name() const override { return name_; }
  Eigen::Index dimension() const override { return dim_; }
  EmbeddingMatrix encode(const std::vector<std::string>& texts) const override { return fn_(texts); }

 private:
  std::string name_;
  Eigen::Index dim_;
  Fn fn_;
};

// Affine map from backbone space (d_s) to victim space (d_v): E * weight + bias.
class Adapter {
 public:
  Adapter() = default;

  Adapter(Eigen::Index d_s, Eigen::Index d_v, Rng& rng)
      : weight_("adapter.weight", random_uniform(d_s, d_v, rng, 1.0 / std::sqrt(static_cast<double>(d_s)))),
        bias_("adapter.bias", Matrix::Zero(1, d_v)) {}

  Adapter(Matrix weight, RowVector bias)
      : weight_("adapter.weight", std::move(weight)), bias_("adapter.bias", Matrix(bias)) {
    if (bias_.value.cols() != weight_.value.cols())
      throw DimensionError("adapter: bias width " + std::to_string(bias_.value.cols()) +
                           " does not match weight output width " + std::to_string(weight_.value.cols()));
  }

  static Adapter identity(Eigen::Index d) { return Adapter(Matrix::Identity(d, d), RowVector::Zero(d)); }

  Eigen::Index input_dim() const { return weight_.value.rows(); }
  Eigen::Index output_dim() const { return weight_.value.cols(); }

  const Matrix& weight() const { return weight_.value; }
  RowVector bias() const { return bias_.value.row(0); }

  EmbeddingMatrix apply(const EmbeddingMatrix& e) const {
    if (e.cols() != input_dim())
      throw DimensionError("adapter expects input width " + std::to_string(input_dim()) + ", got " +
                           std::to_string(e.cols()));
    EmbeddingMatrix out = e * weight_.value;
    out.rowwise() += bias_.value.row(0);
    return out;
  }

  // Accumulates d(loss)/d(weight, bias) given d(loss)/d(output).
  void backward(const EmbeddingMatrix& input, const Matrix& grad_out) {
    weight_.grad.noalias() += input.transpose() * grad_out;
    bias_.grad += grad_out.colwise().sum();
  }

  nn::ParameterList parameters() { return {&weight_, &bias_}; }

 private:
  nn::Parameter weight_;
  nn::Parameter bias_;
};

// phi_hat(x) = adapter(backbone(x)); the backbone is never written.
class SurrogateModel {
 public:
  SurrogateModel(BackendPtr backbone, Adapter adapter) : backbone_(std::move(backbone)), adapter_(std::move(adapter)) {
    if (!backbone_) throw UsageError("surrogate model needs a backbone");
    if (backbone_->dimension() != adapter_.input_dim())
      throw DimensionError("backbone width " + std::to_string(backbone_->dimension()) +
                           " does not match adapter input width " + std::to_string(adapter_.input_dim()));
  }

  const EncoderBackend& backbone() const { return *backbone_; }
  const BackendPtr& backbone_ptr() const { return backbone_; }
  Adapter& adapter() { return adapter_; }
  const Adapter& adapter() const { return adapter_; }

  EmbeddingMatrix encode(const std::vector<std::string>& texts) const {
    return adapter_.apply(encode_batch(*backbone_, texts));
  }

 private:
  BackendPtr backbone_;
  Adapter adapter_;
};

// ---------------------------------------------------------------------------
// Registry: backends are resolved from identifiers of the form
//   name[:key=value,key=value,...]

struct BackendSpec {
  std::string name;
  std::map<std::string, std::string> params;

  static BackendSpec parse(const std::string& id) {
    BackendSpec spec;
    auto colon = id.find(':');
    spec.name = text::trim(id.substr(0, colon));
    if (spec.name.empty()) throw UsageError("empty backend identifier");
    if (colon == std::string::npos) return spec;
    std::stringstream ss(id.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (text::trim(item).empty()) continue;
      auto eq = item.find('=');
      if (eq == std::string::npos) throw UsageError("backend parameter '" + item + "' is not key=value");
      spec.params[text::trim(item.substr(0, eq))] = text::trim(item.substr(eq + 1));
    }
    return spec;
  }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = params.find(key);
    return it == params.end() ? fallback : it->second;
  }
  long get_int(const std::string& key, long fallback) const {
    auto it = params.find(key);
    if (it == params.end()) return fallback;
    try {
      return std::stol(it->second);
    } catch (const std::exception&) {
      throw UsageError("backend parameter " + key + "='" + it->second + "' is not an integer");
    }
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = params.find(key);
    if (it == params.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw UsageError("backend parameter " + key + "='" + it->second + "' is not a number");
    }
  }
};

class BackendRegistry {
 public:
  using Factory = std::function<BackendPtr(const BackendSpec&)>;

  static BackendRegistry& global() {
    static BackendRegistry reg = with_builtins();
    return reg;
  }

  void add(const std::string& name, Factory f) {
    std::lock_guard lock(mu_);
    factories_[name] = std::move(f);
  }

  bool contains(const std::string& name) const {
    std::lock_guard lock(mu_);
    return factories_.count(name) > 0;
  }

  BackendPtr create(const std::string& id) const {
    auto spec = BackendSpec::parse(id);
    Factory f;
    {
      std::lock_guard lock(mu_);
      auto it = factories_.find(spec.name);
      if (it == factories_.end())
        throw BackendError("no encoder backend registered for '" + spec.name +
                           "' (pretrained checkpoints must be registered by the embedding application)");
      f = it->second;
    }
    return f(spec);
  }

  static BackendRegistry with_builtins() {
    BackendRegistry reg;
    reg.factories_["hash-bow"] = [](const BackendSpec& s) -> BackendPtr {
      return std::make_shared<HashingBackbone>(s.get_int("dim", 32), static_cast<std::uint64_t>(s.get_int("seed", 7)),
                                               static_cast<int>(s.get_int("ngram", 2)));
    };
    reg.factories_["synthetic-victim"] = [](const BackendSpec& s) -> BackendPtr {
      SyntheticVictim::Options o;
      o.dim = s.get_int("dim", o.dim);
      o.seed = static_cast<std::uint64_t>(s.get_int("seed", static_cast<long>(o.seed)));
      o.noise = s.get_double("noise", o.noise);
      o.gain = s.get_double("gain", o.gain);
      o.base_dim = s.get_int("base_dim", o.base_dim);
      o.base_seed = static_cast<std::uint64_t>(s.get_int("base_seed", static_cast<long>(o.base_seed)));
      o.base_ngram = static_cast<int>(s.get_int("base_ngram", o.base_ngram));
      return std::make_shared<SyntheticVictim>(o);
    };
    return reg;
  }

 private:
  BackendRegistry() = default;
  BackendRegistry(const BackendRegistry& other) : factories_(other.factories_) {}
  BackendRegistry(BackendRegistry&& other) noexcept : factories_(std::move(other.factories_)) {}

  mutable std::mutex mu_;
  std::map<std::string, Factory> factories_;
};

inline BackendPtr make_backend(const std::string& id) { return BackendRegistry::global().create(id); }

}  // namespace tei
