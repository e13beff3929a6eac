#pragma once

// Domain discriminator and the alternating min-max update that pushes the
// surrogate embeddings of external documents (E_T) toward the private
// embedding distribution (E_P). Labels: private = 1, surrogate = 0.

#include <cmath>
#include <string>

#include "tei/encoder.hpp"
#include "tei/errors.hpp"
#include "tei/nn.hpp"
#include "tei/types.hpp"

namespace tei {

// d_v -> hidden -> hidden -> 1 feed-forward scorer, tanh hidden layers, sigmoid head.
class Discriminator {
 public:
  Discriminator() = default;

  Discriminator(Eigen::Index input_dim, Eigen::Index hidden, Rng& rng)
      : w1_("disc.w1", random_uniform(input_dim, hidden, rng, 1.0 / std::sqrt(double(input_dim)))),
        b1_("disc.b1", random_uniform(1, hidden, rng, 1.0 / std::sqrt(double(input_dim)))),
        w2_("disc.w2", random_uniform(hidden, hidden, rng, 1.0 / std::sqrt(double(hidden)))),
        b2_("disc.b2", random_uniform(1, hidden, rng, 1.0 / std::sqrt(double(hidden)))),
        w3_("disc.w3", random_uniform(hidden, 1, rng, 1.0 / std::sqrt(double(hidden)))),
        b3_("disc.b3", random_uniform(1, 1, rng, 1.0 / std::sqrt(double(hidden)))) {}

  // All weights zero and the head bias set to `logit`: scores every input sigmoid(logit).
  static Discriminator constant(Eigen::Index input_dim, Eigen::Index hidden, double logit = 0.0) {
    Discriminator d;
    d.w1_ = nn::Parameter("disc.w1", Matrix::Zero(input_dim, hidden));
    d.b1_ = nn::Parameter("disc.b1", Matrix::Zero(1, hidden));
    d.w2_ = nn::Parameter("disc.w2", Matrix::Zero(hidden, hidden));
    d.b2_ = nn::Parameter("disc.b2", Matrix::Zero(1, hidden));
    d.w3_ = nn::Parameter("disc.w3", Matrix::Zero(hidden, 1));
    d.b3_ = nn::Parameter("disc.b3", Matrix::Constant(1, 1, logit));
    return d;
  }

  Eigen::Index input_dim() const { return w1_.value.rows(); }
  Eigen::Index hidden() const { return w1_.value.cols(); }

  struct Cache {
    Matrix input, h1, h2;
    Vector logits;
  };

  Vector logits(const Matrix& e, Cache* cache = nullptr) const {
    check_width(e);
    Matrix h1 = ((e * w1_.value).rowwise() + b1_.value.row(0)).array().tanh();
    Matrix h2 = ((h1 * w2_.value).rowwise() + b2_.value.row(0)).array().tanh();
    Vector z = (h2 * w3_.value).col(0).array() + b3_.value(0, 0);
    if (cache) {
      cache->input = e;
      cache->h1 = std::move(h1);
      cache->h2 = std::move(h2);
      cache->logits = z;
    }
    return z;
  }

  Vector probabilities(const Matrix& e) const { return logits(e).unaryExpr([](double z) { return nn::sigmoid(z); }); }

  // Backpropagates d(loss)/d(logits). Accumulates parameter gradients when
  // `accumulate_params` is set; always returns d(loss)/d(input).
  Matrix backward(const Cache& c, const Vector& grad_logits, bool accumulate_params) {
    Matrix g3 = grad_logits;  // N x 1
    Matrix dh2 = g3 * w3_.value.transpose();
    Matrix g2 = dh2.array() * (1.0 - c.h2.array().square());
    Matrix dh1 = g2 * w2_.value.transpose();
    Matrix g1 = dh1.array() * (1.0 - c.h1.array().square());
    if (accumulate_params) {
      w3_.grad.noalias() += c.h2.transpose() * g3;
      b3_.grad += g3.colwise().sum();
      w2_.grad.noalias() += c.h1.transpose() * g2;
      b2_.grad += g2.colwise().sum();
      w1_.grad.noalias() += c.input.transpose() * g1;
      b1_.grad += g1.colwise().sum();
    }
    return g1 * w1_.value.transpose();
  }

  nn::ParameterList parameters() { return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}; }

  // Fraction of rows classified correctly: C(e_p) > 0.5 and C(e_t) < 0.5.
  double accuracy(const Matrix& ep, const Matrix& et) const {
    Vector zp = logits(ep), zt = logits(et);
    double correct = (zp.array() > 0).count() + (zt.array() < 0).count();
    return correct / static_cast<double>(zp.size() + zt.size());
  }

 private:
  void check_width(const Matrix& e) const {
    if (e.cols() != input_dim())
      throw DimensionError("discriminator expects width " + std::to_string(input_dim()) + ", got " +
                           std::to_string(e.cols()));
  }

  nn::Parameter w1_, b1_, w2_, b2_, w3_, b3_;
};

struct AdvSchedule {
  int d_steps = 1;
  int g_steps = 1;
  double adv_weight = 1.0;

  void validate() const {
    if (d_steps < 1 || g_steps < 1) throw UsageError("adversarial schedule needs d_steps >= 1 and g_steps >= 1");
    if (!(adv_weight >= 0)) throw UsageError("adv_weight must be nonnegative");
  }
};

// Balanced binary cross-entropy from logits:
//   0.5 * (mean -log sigmoid(z_p) + mean -log(1 - sigmoid(z_t)))
inline double disc_loss_from_logits(const Vector& zp, const Vector& zt) {
  if (zp.size() == 0 || zt.size() == 0) throw UsageError("disc_loss: empty batch");
  double lp = 0, lt = 0;
  for (Eigen::Index i = 0; i < zp.size(); ++i) lp -= nn::log_sigmoid(zp(i));
  for (Eigen::Index i = 0; i < zt.size(); ++i) lt -= nn::log_sigmoid(-zt(i));
  return 0.5 * (lp / double(zp.size()) + lt / double(zt.size()));
}

// Same loss from probabilities, for scorers that expose probabilities only.
inline double disc_loss_from_probs(const Vector& pp, const Vector& pt) {
  if (pp.size() == 0 || pt.size() == 0) throw UsageError("disc_loss: empty batch");
  return 0.5 * (-pp.array().log().mean() - (1.0 - pt.array()).log().mean());
}

inline double disc_loss(const Discriminator& c, const EmbeddingMatrix& ep, const EmbeddingMatrix& et) {
  if (ep.cols() != et.cols())
    throw DimensionError("disc_loss: private width " + std::to_string(ep.cols()) + " vs surrogate width " +
                         std::to_string(et.cols()));
  return disc_loss_from_logits(c.logits(ep), c.logits(et));
}

// Non-saturating generator loss: mean -log C(e_t).
inline double gen_adv_loss_from_logits(const Vector& zt) {
  if (zt.size() == 0) throw UsageError("gen_adv_loss: empty batch");
  double l = 0;
  for (Eigen::Index i = 0; i < zt.size(); ++i) l -= nn::log_sigmoid(zt(i));
  return l / double(zt.size());
}

inline double gen_adv_loss(const Discriminator& c, const EmbeddingMatrix& et) {
  return gen_adv_loss_from_logits(c.logits(et));
}

// Gradient of the discriminator loss w.r.t. the discriminator parameters (accumulated).
inline double disc_loss_backward(Discriminator& c, const EmbeddingMatrix& ep, const EmbeddingMatrix& et) {
  if (ep.cols() != et.cols()) throw DimensionError("disc_loss: width mismatch");
  Discriminator::Cache cp, ct;
  Vector zp = c.logits(ep, &cp), zt = c.logits(et, &ct);
  const double loss = disc_loss_from_logits(zp, zt);
  Vector gp = zp.unaryExpr([](double z) { return nn::sigmoid(z) - 1.0; }) * (0.5 / double(zp.size()));
  Vector gt = zt.unaryExpr([](double z) { return nn::sigmoid(z); }) * (0.5 / double(zt.size()));
  c.backward(cp, gp, true);
  c.backward(ct, gt, true);
  return loss;
}

// Value and gradient of the generator loss w.r.t. E_T. Discriminator
// parameter gradients are left untouched.
inline double gen_adv_loss_backward(Discriminator& c, const EmbeddingMatrix& et, Matrix* grad_et) {
  Discriminator::Cache ct;
  Vector zt = c.logits(et, &ct);
  const double loss = gen_adv_loss_from_logits(zt);
  Vector g = zt.unaryExpr([](double z) { return nn::sigmoid(z) - 1.0; }) / double(zt.size());
  *grad_et = c.backward(ct, g, false);
  return loss;
}

// Standalone alternating min-max over a discriminator and an adapter.
struct AdversarialState {
  Discriminator discriminator;
  Adapter adapter;
  nn::AdamW disc_optimizer;
  nn::AdamW gen_optimizer;
  double disc_lr = 1e-3;
  double gen_lr = 1e-3;
  long step = 0;
  long disc_updates = 0;
  long gen_updates = 0;
};

struct AdvStepResult {
  double disc_loss = 0;
  double gen_loss = 0;
};

// d_steps discriminator updates on disc_loss, then g_steps adapter updates on
// adv_weight * gen_adv_loss. `backbone_t` holds the pre-adapter embeddings of
// the external batch; E_T = adapter(backbone_t) is recomputed after every update.
inline AdvStepResult adv_step(AdversarialState& s, const EmbeddingMatrix& batch_p, const EmbeddingMatrix& backbone_t,
                              const AdvSchedule& schedule) {
  schedule.validate();
  if (batch_p.rows() == 0 || backbone_t.rows() == 0) throw UsageError("adv_step: empty batch");
  AdvStepResult r;
  auto disc_params = s.discriminator.parameters();
  auto gen_params = s.adapter.parameters();

  for (int k = 0; k < schedule.d_steps; ++k) {
    nn::zero_grad(disc_params);
    EmbeddingMatrix et = s.adapter.apply(backbone_t);
    r.disc_loss = disc_loss_backward(s.discriminator, batch_p, et);
    if (!std::isfinite(r.disc_loss))
      throw DivergenceError("discriminator loss is non-finite at adversarial step " + std::to_string(s.step));
    s.disc_optimizer.step(disc_params, s.disc_lr);
    ++s.disc_updates;
  }
  for (int k = 0; k < schedule.g_steps; ++k) {
    nn::zero_grad(gen_params);
    EmbeddingMatrix et = s.adapter.apply(backbone_t);
    Matrix grad_et;
    r.gen_loss = gen_adv_loss_backward(s.discriminator, et, &grad_et);
    if (!std::isfinite(r.gen_loss))
      throw DivergenceError("generator loss is non-finite at adversarial step " + std::to_string(s.step));
    if (schedule.adv_weight > 0) {
      s.adapter.backward(backbone_t, schedule.adv_weight * grad_et);
      s.gen_optimizer.step(gen_params, s.gen_lr);
    }
    ++s.gen_updates;
  }
  ++s.step;
  return r;
}

}  // namespace tei
