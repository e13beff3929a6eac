#pragma once

// Minimal training primitives shared by the adapter, the discriminator and the
// inversion decoder: named parameters with gradient buffers, AdamW, and the
// warmup + linear-decay learning-rate schedule.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tei/types.hpp"

namespace tei::nn {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
    grad = Matrix::Zero(value.rows(), value.cols());
  }

  void zero_grad() { grad.setZero(); }
};

using ParameterList = std::vector<Parameter*>;

inline void zero_grad(const ParameterList& params) {
  for (auto* p : params) p->zero_grad();
}

inline std::uint64_t checksum(const ParameterList& params) {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto* p : params)
    h = fnv1a_bytes(p->value.data(), sizeof(double) * static_cast<std::size_t>(p->value.size()), h);
  return h;
}

inline bool all_finite(const ParameterList& params) {
  for (const auto* p : params)
    if (!p->value.allFinite()) return false;
  return true;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow.
inline double log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

// Row-wise log-softmax.
inline Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double mx = logits.row(i).maxCoeff();
    double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

// AdamW with decoupled weight decay. Moments and step counts are kept per
// parameter name so disjoint subsets can be stepped independently.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  struct Slot {
    Matrix m;
    Matrix v;
    long t = 0;
  };

  AdamW() = default;
  explicit AdamW(Options opts) : opts_(opts) {}

  const Options& options() const { return opts_; }

  void step(const ParameterList& params, double lr) {
    for (auto* p : params) {
      auto& s = slot(*p);
      s.t += 1;
      s.m = opts_.beta1 * s.m + (1.0 - opts_.beta1) * p->grad;
      s.v = opts_.beta2 * s.v + (1.0 - opts_.beta2) * p->grad.cwiseProduct(p->grad);
      const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(s.t));
      const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(s.t));
      if (opts_.weight_decay != 0.0) p->value *= (1.0 - lr * opts_.weight_decay);
      p->value.array() -= lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + opts_.eps);
    }
  }

  Slot& slot(const Parameter& p) {
    auto it = slots_.find(p.name);
    if (it == slots_.end()) {
      Slot s;
      s.m = Matrix::Zero(p.value.rows(), p.value.cols());
      s.v = Matrix::Zero(p.value.rows(), p.value.cols());
      it = slots_.emplace(p.name, std::move(s)).first;
    }
    return it->second;
  }

  const std::map<std::string, Slot>& slots() const { return slots_; }
  std::map<std::string, Slot>& slots() { return slots_; }

 private:
  Options opts_;
  std::map<std::string, Slot> slots_;
};

// Linear warmup from 0 to base_lr over warmup_steps, then linear decay to 0 at
// total_steps. `step` is zero-based: the rate applied by the (step+1)-th update.
inline double warmup_linear_lr(double base_lr, long step, long warmup_steps, long total_steps) {
  if (total_steps <= 0) return base_lr;
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const long decay_span = total_steps - warmup_steps;
  if (decay_span <= 0) return base_lr;
  const double remaining = static_cast<double>(total_steps - step) / static_cast<double>(decay_span);
  return base_lr * std::max(0.0, remaining);
}

}  // namespace tei::nn
