#pragma once

// Encoder-stealing objective over matched private (E_P) and surrogate (E_S)
// embedding batches:
//   intra = mean over all N*d entries of (E_P - E_S)^2
//   inter = ||Q_P - Q_S||_F^2 / N^2, Q = row-normalized E times its transpose

#include <cmath>
#include <string>

#include "tei/errors.hpp"
#include "tei/types.hpp"

namespace tei {

using SimilarityMatrix = Matrix;

struct ConsistencyLossValue {
  double intra = 0;
  double inter = 0;
  double total = 0;
};

struct ConsistencyGradient {
  Matrix intra;  // d intra / d E_S
  Matrix inter;  // d inter / d E_S
  Matrix total;
};

// Row-normalized copy of E. Throws on a zero-norm row.
inline Matrix normalize_rows(const Matrix& e, Vector* norms_out = nullptr) {
  Vector norms = e.rowwise().norm();
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    if (!(norms(i) > 0))
      throw DegenerateInputError("row " + std::to_string(i) + " has zero L2 norm; cosine undefined", static_cast<long>(i));
  if (norms_out) *norms_out = norms;
  return norms.cwiseInverse().asDiagonal() * e;
}

inline SimilarityMatrix pairwise_cosine(const EmbeddingMatrix& e) {
  if (e.rows() < 1) throw UsageError("pairwise_cosine: empty matrix");
  Matrix n = normalize_rows(e);
  Matrix q = n * n.transpose();
  // GEMM blocking can leave the two triangles an ulp apart.
  q.triangularView<Eigen::StrictlyLower>() = Matrix(q.transpose());
  return q;
}

inline double intra_loss(const EmbeddingMatrix& ep, const EmbeddingMatrix& es) {
  require_same_shape(ep, es, "intra_loss");
  if (ep.size() == 0) throw UsageError("intra_loss: empty matrices");
  return (ep - es).squaredNorm() / static_cast<double>(ep.size());
}

inline double inter_loss(const EmbeddingMatrix& ep, const EmbeddingMatrix& es) {
  if (ep.rows() != es.rows())
    throw DimensionError("inter_loss: row counts differ (" + std::to_string(ep.rows()) + " vs " +
                         std::to_string(es.rows()) + ")");
  const double n = static_cast<double>(ep.rows());
  return (pairwise_cosine(ep) - pairwise_cosine(es)).squaredNorm() / (n * n);
}

inline ConsistencyLossValue consistency_loss(const EmbeddingMatrix& ep, const EmbeddingMatrix& es) {
  ConsistencyLossValue v;
  v.intra = intra_loss(ep, es);
  v.inter = inter_loss(ep, es);
  v.total = v.intra + v.inter;
  return v;
}

inline Matrix intra_grad(const EmbeddingMatrix& ep, const EmbeddingMatrix& es) {
  require_same_shape(ep, es, "intra_grad");
  return 2.0 * (es - ep) / static_cast<double>(ep.size());
}

inline Matrix inter_grad(const EmbeddingMatrix& ep, const EmbeddingMatrix& es) {
  if (ep.rows() != es.rows()) throw DimensionError("inter_grad: row counts differ");
  const double n = static_cast<double>(ep.rows());
  Vector norms;
  Matrix ns = normalize_rows(es, &norms);
  Matrix g = -2.0 * (pairwise_cosine(ep) - ns * ns.transpose()) / (n * n);  // dL/dQ_S, symmetric
  Matrix gn = 2.0 * g * ns;                                                   // dL/d(normalized rows)
  Matrix out(es.rows(), es.cols());
  for (Eigen::Index i = 0; i < es.rows(); ++i) {
    const double along = gn.row(i).dot(ns.row(i));
    out.row(i) = (gn.row(i) - along * ns.row(i)) / norms(i);
  }
  return out;
}

inline ConsistencyGradient consistency_grad(const EmbeddingMatrix& ep, const EmbeddingMatrix& es) {
  ConsistencyGradient g;
  g.intra = intra_grad(ep, es);
  g.inter = inter_grad(ep, es);
  g.total = g.intra + g.inter;
  return g;
}

}  // namespace tei
