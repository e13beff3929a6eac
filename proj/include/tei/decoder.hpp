#pragma once

// Inversion decoder: a prefix-conditioned autoregressive GRU language model.
//
// Position 0 receives the projected embedding (affine d_v -> h), position 1
// the BOS token, position p > 1 the gold token w_{p-1}. The output at
// position p >= 1 predicts w_p. Training uses teacher forcing; the loss of a
// sequence is its mean per-token negative log-likelihood.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "tei/encoder.hpp"
#include "tei/errors.hpp"
#include "tei/nn.hpp"
#include "tei/tokenizer.hpp"
#include "tei/types.hpp"

namespace tei {

struct DecoderShape {
  Eigen::Index input_dim = 0;  // d_v
  Eigen::Index hidden = 64;
  Eigen::Index vocab = 0;
  int layers = 2;
};

struct DecodeStrategy {
  enum class Kind { greedy, beam, top_k };
  Kind kind = Kind::greedy;
  int k = 1;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static DecodeStrategy greedy() { return {}; }
  static DecodeStrategy beam(int k) { return {Kind::beam, k, 1.0, 0}; }
  static DecodeStrategy top_k(int k, double temperature, std::uint64_t seed) { return {Kind::top_k, k, temperature, seed}; }

  static DecodeStrategy parse(const std::string& s, std::uint64_t seed = 0) {
    // greedy | beam:<k> | top_k:<k>[:<temperature>]
    auto parts = std::vector<std::string>{};
    std::size_t b = 0;
    while (true) {
      auto c = s.find(':', b);
      parts.push_back(s.substr(b, c == std::string::npos ? std::string::npos : c - b));
      if (c == std::string::npos) break;
      b = c + 1;
    }
    try {
      if (parts[0] == "greedy" && parts.size() == 1) return greedy();
      if (parts[0] == "beam" && parts.size() == 2) return beam(std::stoi(parts[1]));
      if (parts[0] == "top_k" && (parts.size() == 2 || parts.size() == 3))
        return top_k(std::stoi(parts[1]), parts.size() == 3 ? std::stod(parts[2]) : 1.0, seed);
    } catch (const std::exception&) {
    }
    throw UsageError("unknown decode strategy '" + s + "' (expected greedy, beam:<k> or top_k:<k>[:<temp>])");
  }

  std::string to_string() const {
    switch (kind) {
      case Kind::greedy: return "greedy";
      case Kind::beam: return "beam:" + std::to_string(k);
      case Kind::top_k: return "top_k:" + std::to_string(k) + ":" + std::to_string(temperature);
    }
    return "greedy";
  }
};

class InversionDecoder {
 public:
  InversionDecoder() = default;

  InversionDecoder(DecoderShape shape, WordTokenizer tokenizer, Rng& rng)
      : shape_(shape), tokenizer_(std::move(tokenizer)) {
    shape_.vocab = static_cast<Eigen::Index>(tokenizer_.size());
    if (shape_.input_dim <= 0 || shape_.hidden <= 0 || shape_.layers < 1)
      throw UsageError("decoder shape needs positive input_dim, hidden, layers");
    const Eigen::Index h = shape_.hidden;
    const double bh = 1.0 / std::sqrt(static_cast<double>(h));
    const double bi = 1.0 / std::sqrt(static_cast<double>(shape_.input_dim));
    proj_w_ = nn::Parameter("dec.proj.weight", random_uniform(shape_.input_dim, h, rng, bi));
    proj_b_ = nn::Parameter("dec.proj.bias", Matrix::Zero(1, h));
    tok_emb_ = nn::Parameter("dec.tok_emb", random_normal(shape_.vocab, h, rng, 1.0));
    for (int l = 0; l < shape_.layers; ++l) {
      const std::string p = "dec.gru" + std::to_string(l);
      layers_.push_back({nn::Parameter(p + ".wx", random_uniform(h, 3 * h, rng, bh)),
                         nn::Parameter(p + ".wh", random_uniform(h, 3 * h, rng, bh)),
                         nn::Parameter(p + ".bx", random_uniform(1, 3 * h, rng, bh)),
                         nn::Parameter(p + ".bh", random_uniform(1, 3 * h, rng, bh))});
    }
    out_w_ = nn::Parameter("dec.out.weight", random_uniform(h, shape_.vocab, rng, bh));
    out_b_ = nn::Parameter("dec.out.bias", Matrix::Zero(1, shape_.vocab));
  }

  const DecoderShape& shape() const { return shape_; }
  const WordTokenizer& tokenizer() const { return tokenizer_; }

  nn::ParameterList parameters() {
    nn::ParameterList ps{&proj_w_, &proj_b_, &tok_emb_};
    for (auto& l : layers_) {
      ps.push_back(&l.wx);
      ps.push_back(&l.wh);
      ps.push_back(&l.bx);
      ps.push_back(&l.bh);
    }
    ps.push_back(&out_w_);
    ps.push_back(&out_b_);
    return ps;
  }

  nn::ParameterList projection_parameters() { return {&proj_w_, &proj_b_}; }

  TokenSequence encode_text(const std::string& s, std::size_t max_len) const { return tokenizer_.encode(s, max_len); }

  // ---- teacher-forced scoring --------------------------------------------

  // Per-sequence sum of NLL over positions 1..u and the token counts u.
  struct SequenceScores {
    std::vector<double> nll_sum;
    std::vector<long> tokens;
  };

  SequenceScores score(const EmbeddingMatrix& e, const std::vector<TokenSequence>& seqs) const {
    Forward f = forward(e, seqs);
    return f.scores;
  }

  // Mean over sequences of the per-token mean NLL.
  double batch_lm_loss(const EmbeddingMatrix& e, const std::vector<TokenSequence>& seqs) const {
    return mean_loss(forward(e, seqs).scores);
  }

  double lm_loss(const RowVector& embedding, const TokenSequence& seq) const {
    return batch_lm_loss(Matrix(embedding), {seq});
  }

  // Same value as batch_lm_loss; accumulates parameter gradients and, when
  // requested, returns d(loss)/d(embedding rows).
  double batch_lm_loss_backward(const EmbeddingMatrix& e, const std::vector<TokenSequence>& seqs,
                                Matrix* grad_embedding = nullptr) {
    Forward f = forward(e, seqs);
    backward(f, e, seqs, grad_embedding);
    return mean_loss(f.scores);
  }

  // Logits (rows = positions 1..u, predicting w_1..w_u) for one sequence.
  Matrix position_logits(const RowVector& embedding, const TokenSequence& seq) const {
    Forward f = forward(Matrix(embedding), {seq});
    const long u = static_cast<long>(seq.size()) - 1;
    Matrix out(u, shape_.vocab);
    for (long p = 1; p <= u; ++p) out.row(p - 1) = f.logits[static_cast<std::size_t>(p)].row(0);
    return out;
  }

  // ---- incremental decoding ----------------------------------------------

  struct State {
    std::vector<RowVector> hidden;
    RowVector log_probs;  // distribution over the next token
  };

  State start(const RowVector& embedding) const {
    if (embedding.size() != shape_.input_dim)
      throw DimensionError("decoder expects embedding width " + std::to_string(shape_.input_dim) + ", got " +
                           std::to_string(embedding.size()));
    State s;
    s.hidden.assign(static_cast<std::size_t>(shape_.layers), RowVector::Zero(shape_.hidden));
    RowVector x = embedding * proj_w_.value + proj_b_.value.row(0);
    advance(s, x);
    advance(s, tok_emb_.value.row(WordTokenizer::bos));
    return s;
  }

  void feed(State& s, int token) const {
    check_token(token);
    advance(s, tok_emb_.value.row(token));
  }

  std::vector<int> generate_ids(const RowVector& embedding, const DecodeStrategy& strategy, std::size_t max_len) const {
    if (max_len < 1) throw UsageError("max_len must be >= 1");
    switch (strategy.kind) {
      case DecodeStrategy::Kind::greedy: return sample_loop(embedding, max_len, nullptr, 0, 1.0);
      case DecodeStrategy::Kind::top_k: {
        if (strategy.k < 1 || !(strategy.temperature > 0)) throw UsageError("top_k needs k >= 1 and temperature > 0");
        Rng rng(strategy.seed);
        return sample_loop(embedding, max_len, &rng, strategy.k, strategy.temperature);
      }
      case DecodeStrategy::Kind::beam: return beam_search(embedding, max_len, strategy.k);
    }
    return {};
  }

  std::string generate(const RowVector& embedding, const DecodeStrategy& strategy, std::size_t max_len) const {
    return tokenizer_.decode(generate_ids(embedding, strategy, max_len));
  }

 private:
  struct Layer {
    nn::Parameter wx, wh, bx, bh;
  };

  struct StepCache {
    Matrix x, h_prev, z, r, n, hn;
  };

  struct Forward {
    long positions = 0;
    std::vector<std::vector<StepCache>> cache;  // [layer][position]
    std::vector<Matrix> top;                    // top-layer hidden per position
    std::vector<Matrix> logits;                 // per position
    std::vector<Matrix> log_probs;
    SequenceScores scores;
  };

  void check_token(int t) const {
    if (t < 0 || t >= shape_.vocab)
      throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of size " + std::to_string(shape_.vocab));
  }

  void validate(const EmbeddingMatrix& e, const std::vector<TokenSequence>& seqs) const {
    if (e.rows() != static_cast<Eigen::Index>(seqs.size()))
      throw AlignmentError("embedding rows (" + std::to_string(e.rows()) + ") do not match token sequences (" +
                           std::to_string(seqs.size()) + ")");
    if (seqs.empty()) throw UsageError("empty batch");
    if (e.cols() != shape_.input_dim)
      throw DimensionError("decoder expects embedding width " + std::to_string(shape_.input_dim) + ", got " +
                           std::to_string(e.cols()));
    for (const auto& s : seqs) {
      if (s.size() < 2) throw UsageError("token sequence needs at least one token after BOS");
      for (int t : s) check_token(t);
    }
  }

  static double mean_loss(const SequenceScores& sc) {
    double acc = 0;
    for (std::size_t i = 0; i < sc.nll_sum.size(); ++i) acc += sc.nll_sum[i] / static_cast<double>(sc.tokens[i]);
    return acc / static_cast<double>(sc.nll_sum.size());
  }

  void gru_step(const Layer& L, const Matrix& x, const Matrix& h_prev, StepCache& c, Matrix& h_out) const {
    const Eigen::Index h = shape_.hidden;
    Matrix gx = (x * L.wx.value).rowwise() + L.bx.value.row(0);
    Matrix gh = (h_prev * L.wh.value).rowwise() + L.bh.value.row(0);
    c.x = x;
    c.h_prev = h_prev;
    c.z = (gx.leftCols(h) + gh.leftCols(h)).unaryExpr([](double v) { return nn::sigmoid(v); });
    c.r = (gx.middleCols(h, h) + gh.middleCols(h, h)).unaryExpr([](double v) { return nn::sigmoid(v); });
    c.hn = gh.rightCols(h);
    c.n = (gx.rightCols(h).array() + c.r.array() * c.hn.array()).tanh();
    h_out = (1.0 - c.z.array()) * c.n.array() + c.z.array() * h_prev.array();
  }

  Forward forward(const EmbeddingMatrix& e, const std::vector<TokenSequence>& seqs) const {
    validate(e, seqs);
    const Eigen::Index b = e.rows();
    long positions = 0;
    for (const auto& s : seqs) positions = std::max(positions, static_cast<long>(s.size()));
    Forward f;
    f.positions = positions;
    f.cache.assign(static_cast<std::size_t>(shape_.layers), std::vector<StepCache>(static_cast<std::size_t>(positions)));
    f.top.resize(static_cast<std::size_t>(positions));
    f.logits.resize(static_cast<std::size_t>(positions));
    f.log_probs.resize(static_cast<std::size_t>(positions));
    f.scores.nll_sum.assign(seqs.size(), 0.0);
    f.scores.tokens.assign(seqs.size(), 0);

    std::vector<Matrix> h(static_cast<std::size_t>(shape_.layers), Matrix::Zero(b, shape_.hidden));
    for (long p = 0; p < positions; ++p) {
      Matrix x(b, shape_.hidden);
      if (p == 0) {
        x = (e * proj_w_.value).rowwise() + proj_b_.value.row(0);
      } else {
        for (Eigen::Index i = 0; i < b; ++i) {
          const auto& s = seqs[static_cast<std::size_t>(i)];
          const int tok = p - 1 < static_cast<long>(s.size()) ? s[static_cast<std::size_t>(p - 1)] : WordTokenizer::eos;
          x.row(i) = tok_emb_.value.row(tok);
        }
      }
      for (int l = 0; l < shape_.layers; ++l) {
        Matrix h_new;
        gru_step(layers_[static_cast<std::size_t>(l)], l == 0 ? x : h[static_cast<std::size_t>(l - 1)],
                 h[static_cast<std::size_t>(l)], f.cache[static_cast<std::size_t>(l)][static_cast<std::size_t>(p)], h_new);
        h[static_cast<std::size_t>(l)] = std::move(h_new);
      }
      f.top[static_cast<std::size_t>(p)] = h.back();
      if (p == 0) continue;
      Matrix logits = (h.back() * out_w_.value).rowwise() + out_b_.value.row(0);
      Matrix lp = nn::log_softmax_rows(logits);
      for (Eigen::Index i = 0; i < b; ++i) {
        const auto& s = seqs[static_cast<std::size_t>(i)];
        if (p < static_cast<long>(s.size())) {
          f.scores.nll_sum[static_cast<std::size_t>(i)] -= lp(i, s[static_cast<std::size_t>(p)]);
          f.scores.tokens[static_cast<std::size_t>(i)] += 1;
        }
      }
      f.logits[static_cast<std::size_t>(p)] = std::move(logits);
      f.log_probs[static_cast<std::size_t>(p)] = std::move(lp);
    }
    return f;
  }

  void backward(const Forward& f, const EmbeddingMatrix& e, const std::vector<TokenSequence>& seqs, Matrix* grad_e) {
    const Eigen::Index b = e.rows();
    const Eigen::Index h = shape_.hidden;
    const double inv_b = 1.0 / static_cast<double>(b);
    std::vector<Matrix> dh(static_cast<std::size_t>(shape_.layers), Matrix::Zero(b, h));

    for (long p = f.positions - 1; p >= 0; --p) {
      const auto up = static_cast<std::size_t>(p);
      if (p > 0) {
        // d loss / d logits = (softmax - onehot) / (u_i * B) on valid positions.
        Matrix g = f.log_probs[up].array().exp();
        for (Eigen::Index i = 0; i < b; ++i) {
          const auto& s = seqs[static_cast<std::size_t>(i)];
          if (p < static_cast<long>(s.size())) {
            g(i, s[up]) -= 1.0;
            g.row(i) *= inv_b / static_cast<double>(f.scores.tokens[static_cast<std::size_t>(i)]);
          } else {
            g.row(i).setZero();
          }
        }
        out_w_.grad.noalias() += f.top[up].transpose() * g;
        out_b_.grad += g.colwise().sum();
        dh.back().noalias() += g * out_w_.value.transpose();
      }
      for (int l = shape_.layers - 1; l >= 0; --l) {
        auto& L = layers_[static_cast<std::size_t>(l)];
        const StepCache& c = f.cache[static_cast<std::size_t>(l)][up];
        Matrix& dht = dh[static_cast<std::size_t>(l)];
        Matrix dn = dht.array() * (1.0 - c.z.array());
        Matrix dz = dht.array() * (c.h_prev.array() - c.n.array());
        Matrix dh_prev = dht.array() * c.z.array();
        Matrix dn_pre = dn.array() * (1.0 - c.n.array().square());
        Matrix dr = dn_pre.array() * c.hn.array();
        Matrix gx(b, 3 * h), gh(b, 3 * h);
        gx.leftCols(h) = dz.array() * c.z.array() * (1.0 - c.z.array());
        gx.middleCols(h, h) = dr.array() * c.r.array() * (1.0 - c.r.array());
        gx.rightCols(h) = dn_pre;
        gh.leftCols(h) = gx.leftCols(h);
        gh.middleCols(h, h) = gx.middleCols(h, h);
        gh.rightCols(h) = dn_pre.array() * c.r.array();
        L.wx.grad.noalias() += c.x.transpose() * gx;
        L.bx.grad += gx.colwise().sum();
        L.wh.grad.noalias() += c.h_prev.transpose() * gh;
        L.bh.grad += gh.colwise().sum();
        dh_prev.noalias() += gh * L.wh.value.transpose();
        Matrix dx = gx * L.wx.value.transpose();
        dht = std::move(dh_prev);
        if (l > 0) {
          dh[static_cast<std::size_t>(l - 1)] += dx;
        } else if (p == 0) {
          proj_w_.grad.noalias() += e.transpose() * dx;
          proj_b_.grad += dx.colwise().sum();
          if (grad_e) *grad_e = dx * proj_w_.value.transpose();
        } else {
          for (Eigen::Index i = 0; i < b; ++i) {
            const auto& s = seqs[static_cast<std::size_t>(i)];
            const int tok = p - 1 < static_cast<long>(s.size()) ? s[static_cast<std::size_t>(p - 1)] : WordTokenizer::eos;
            tok_emb_.grad.row(tok) += dx.row(i);
          }
        }
      }
    }
  }

  void advance(State& s, const RowVector& x_in) const {
    Matrix x = x_in;
    for (int l = 0; l < shape_.layers; ++l) {
      StepCache c;
      Matrix h_new;
      gru_step(layers_[static_cast<std::size_t>(l)], x, s.hidden[static_cast<std::size_t>(l)], c, h_new);
      s.hidden[static_cast<std::size_t>(l)] = h_new.row(0);
      x = h_new;
    }
    Matrix logits = (x * out_w_.value).rowwise() + out_b_.value.row(0);
    s.log_probs = nn::log_softmax_rows(logits).row(0);
  }

  // Greedy when rng is null (ties -> lowest id); otherwise top-k sampling.
  std::vector<int> sample_loop(const RowVector& embedding, std::size_t max_len, Rng* rng, int k, double temperature) const {
    State s = start(embedding);
    std::vector<int> out;
    while (out.size() < max_len) {
      int next = 0;
      if (!rng) {
        double best = -std::numeric_limits<double>::infinity();
        for (Eigen::Index t = 0; t < shape_.vocab; ++t) {
          if (t == WordTokenizer::bos) continue;
          if (s.log_probs(t) > best) {
            best = s.log_probs(t);
            next = static_cast<int>(t);
          }
        }
      } else {
        std::vector<int> ids;
        for (Eigen::Index t = 0; t < shape_.vocab; ++t)
          if (t != WordTokenizer::bos) ids.push_back(static_cast<int>(t));
        const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), ids.size());
        std::partial_sort(ids.begin(), ids.begin() + static_cast<long>(kk), ids.end(),
                          [&](int a, int b) { return s.log_probs(a) > s.log_probs(b) || (s.log_probs(a) == s.log_probs(b) && a < b); });
        ids.resize(kk);
        std::vector<double> w;
        const double top = s.log_probs(ids[0]) / temperature;
        for (int t : ids) w.push_back(std::exp(s.log_probs(t) / temperature - top));
        std::discrete_distribution<int> dist(w.begin(), w.end());
        next = ids[static_cast<std::size_t>(dist(*rng))];
      }
      out.push_back(next);
      if (next == WordTokenizer::eos) break;
      feed(s, next);
    }
    return out;
  }

  // Beam search on total log-probability (no length normalization).
  std::vector<int> beam_search(const RowVector& embedding, std::size_t max_len, int k) const {
    if (k < 1) throw UsageError("beam width must be >= 1");
    struct Hyp {
      std::vector<int> ids;
      double score = 0;
      State state;
      bool done = false;
    };
    struct Cand {
      std::size_t parent;
      int token;  // -1 carries a finished hypothesis forward
      double score;
    };
    std::vector<Hyp> beams{{{}, 0.0, start(embedding), false}};
    for (std::size_t len = 0; len < max_len; ++len) {
      std::vector<Cand> cand;
      for (std::size_t b = 0; b < beams.size(); ++b) {
        if (beams[b].done) {
          cand.push_back({b, -1, beams[b].score});
          continue;
        }
        for (Eigen::Index t = 0; t < shape_.vocab; ++t)
          if (t != WordTokenizer::bos) cand.push_back({b, static_cast<int>(t), beams[b].score + beams[b].state.log_probs(t)});
      }
      std::stable_sort(cand.begin(), cand.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
      cand.resize(std::min<std::size_t>(cand.size(), static_cast<std::size_t>(k)));
      std::vector<Hyp> next;
      for (const auto& c : cand) {
        const Hyp& parent = beams[c.parent];
        if (c.token < 0) {
          next.push_back(parent);
          continue;
        }
        Hyp h{parent.ids, c.score, {}, c.token == WordTokenizer::eos};
        h.ids.push_back(c.token);
        if (!h.done) {
          h.state = parent.state;
          feed(h.state, c.token);
        }
        next.push_back(std::move(h));
      }
      beams = std::move(next);
      if (std::all_of(beams.begin(), beams.end(), [](const Hyp& h) { return h.done; })) break;
    }
    return beams.front().ids;
  }

  DecoderShape shape_;
  WordTokenizer tokenizer_;
  nn::Parameter proj_w_, proj_b_, tok_emb_;
  std::vector<Layer> layers_;
  nn::Parameter out_w_, out_b_;
};

// Decoder factory keyed by identifier: "toy-gru[:hidden=..,layers=..]".
inline InversionDecoder make_decoder(const std::string& id, Eigen::Index input_dim, WordTokenizer tokenizer, Rng& rng) {
  auto spec = BackendSpec::parse(id);
  if (spec.name != "toy-gru")
    throw BackendError("no inversion decoder registered for '" + spec.name +
                       "' (pretrained decoders must be provided by the embedding application)");
  DecoderShape shape;
  shape.input_dim = input_dim;
  shape.hidden = spec.get_int("hidden", 64);
  shape.layers = static_cast<int>(spec.get_int("layers", 2));
  return InversionDecoder(shape, std::move(tokenizer), rng);
}

}  // namespace tei
