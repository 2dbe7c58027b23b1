#pragma once

#include <cstdint>
#include <vector>

#include "cotrack/matrix.hpp"
#include "cotrack/params.hpp"

namespace cotrack {

// Every forward here has a matching hand-derived backward. Backwards take the
// upstream gradient, accumulate into ParamStore gradients, and return the
// gradient w.r.t. their inputs.

/// y = x * W^T + b, rows independent. W is (d_out x d_in), b is (1 x d_out).
inline Matrix linear_forward(const Matrix& W, const Matrix& b,
                             const Matrix& x) {
  if (x.cols != W.cols)
    throw std::invalid_argument("linear_forward: input dim mismatch");
  if (b.rows != 1 || b.cols != W.rows)
    throw std::invalid_argument("linear_forward: bias shape mismatch");
  Matrix y = matmul_nt(x, W);
  for (int i = 0; i < y.rows; ++i)
    for (int j = 0; j < y.cols; ++j) y.at(i, j) += b.at(0, j);
  return y;
}

/// Returns dx; accumulates dW, db.
inline Matrix linear_backward(const Matrix& W, const Matrix& x,
                              const Matrix& dy, Matrix& dW, Matrix& db) {
  add_inplace(dW, matmul_tn(dy, x));
  add_inplace(db, colsum(dy));
  return matmul(dy, W);
}

inline Matrix relu(const Matrix& x) {
  Matrix y = x;
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

/// dx from dy given the pre-activation z.
inline Matrix relu_backward(const Matrix& z, const Matrix& dy) {
  Matrix dx = dy;
  for (size_t i = 0; i < dx.data.size(); ++i)
    if (z.data[i] <= 0.0) dx.data[i] = 0.0;
  return dx;
}

struct MlpCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation output of each layer
};

/// Plain MLP with ReLU between layers (never after the last). Parameters live
/// in a ParamStore; the struct only holds handles.
struct Mlp {
  std::vector<int> w;
  std::vector<int> b;

  /// dims = {in, hidden..., out}. The last layer can be zero-initialized
  /// (residual heads, identity-at-start contracts) with a chosen bias value.
  void init(ParamStore& ps, const std::string& prefix,
            const std::vector<int>& dims, Rng& rng, bool zero_last = false,
            double last_bias = 0.0) {
    if (dims.size() < 2)
      throw std::invalid_argument("Mlp: need at least one layer");
    w.clear();
    b.clear();
    for (size_t i = 0; i + 1 < dims.size(); ++i) {
      const bool last = (i + 2 == dims.size());
      const Init wi = (last && zero_last) ? Init::Zero : Init::He;
      w.push_back(ps.create(prefix + ".w" + std::to_string(i), dims[i + 1],
                            dims[i], wi, rng));
      const int bh = ps.create(prefix + ".b" + std::to_string(i), 1,
                               dims[i + 1], Init::Zero, rng);
      if (last && last_bias != 0.0)
        for (double& v : ps.at(bh).value.data) v = last_bias;
      b.push_back(bh);
    }
  }

  size_t layers() const { return w.size(); }

  Matrix forward(const ParamStore& ps, const Matrix& x,
                 MlpCache* cache = nullptr) const {
    if (w.empty()) throw std::logic_error("Mlp::forward: uninitialized");
    Matrix h = x;
    for (size_t i = 0; i < w.size(); ++i) {
      if (cache) cache->inputs.push_back(h);
      Matrix z = linear_forward(ps.value(w[i]), ps.value(b[i]), h);
      if (cache) cache->pre.push_back(z);
      h = (i + 1 < w.size()) ? relu(z) : std::move(z);
    }
    return h;
  }

  Matrix backward(ParamStore& ps, const MlpCache& cache,
                  const Matrix& dy) const {
    Matrix dz = dy;
    for (size_t ri = w.size(); ri-- > 0;) {
      if (ri + 1 < w.size()) dz = relu_backward(cache.pre[ri], dz);
      dz = linear_backward(ps.value(w[ri]), cache.inputs[ri], dz,
                           ps.grad(w[ri]), ps.grad(b[ri]));
    }
    return dz;
  }
};

using Mask = std::vector<uint8_t>;  // row-major, nonzero = attend

/// Row-wise softmax with masking. A fully-masked row yields an all-zero row
/// so padded slots are inert downstream.
inline Matrix masked_softmax_rows(const Matrix& logits, const Mask& mask) {
  if (static_cast<int>(mask.size()) != logits.rows * logits.cols)
    throw std::invalid_argument("masked_softmax_rows: mask size mismatch");
  Matrix p(logits.rows, logits.cols);
  for (int i = 0; i < logits.rows; ++i) {
    double mx = -1e300;
    bool any = false;
    for (int j = 0; j < logits.cols; ++j)
      if (mask[i * logits.cols + j]) {
        any = true;
        mx = std::max(mx, logits.at(i, j));
      }
    if (!any) continue;
    double denom = 0.0;
    for (int j = 0; j < logits.cols; ++j)
      if (mask[i * logits.cols + j]) {
        const double e = std::exp(logits.at(i, j) - mx);
        p.at(i, j) = e;
        denom += e;
      }
    for (int j = 0; j < logits.cols; ++j) p.at(i, j) /= denom;
  }
  return p;
}

inline Matrix masked_softmax_backward(const Matrix& p, const Matrix& dp,
                                      const Mask& mask) {
  Matrix dz(p.rows, p.cols);
  for (int i = 0; i < p.rows; ++i) {
    double dot = 0.0;
    for (int j = 0; j < p.cols; ++j)
      if (mask[i * p.cols + j]) dot += dp.at(i, j) * p.at(i, j);
    for (int j = 0; j < p.cols; ++j)
      if (mask[i * p.cols + j])
        dz.at(i, j) = p.at(i, j) * (dp.at(i, j) - dot);
  }
  return dz;
}

struct AttentionCache {
  Matrix q, k, v;
  Matrix probs;
  Mask mask;
};

/// softmax(Q K^T / sqrt(d)) V with boolean masking; fully-masked query rows
/// produce zero output rows.
inline Matrix scaled_dot_attention(const Matrix& q, const Matrix& k,
                                   const Matrix& v, const Mask& mask,
                                   AttentionCache* cache = nullptr) {
  if (q.cols != k.cols)
    throw std::invalid_argument("attention: Q/K dim mismatch");
  if (k.rows != v.rows)
    throw std::invalid_argument("attention: K/V row mismatch");
  if (static_cast<int>(mask.size()) != q.rows * k.rows)
    throw std::invalid_argument("attention: mask shape mismatch");
  Matrix s = matmul_nt(q, k);
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols));
  for (double& x : s.data) x *= inv;
  Matrix p = masked_softmax_rows(s, mask);
  Matrix y = matmul(p, v);
  if (cache) {
    cache->q = q;
    cache->k = k;
    cache->v = v;
    cache->probs = p;
    cache->mask = mask;
  }
  return y;
}

struct AttentionGrads {
  Matrix dq, dk, dv;
};

inline AttentionGrads scaled_dot_attention_backward(const AttentionCache& c,
                                                    const Matrix& dy) {
  AttentionGrads g;
  Matrix dp = matmul_nt(dy, c.v);
  g.dv = matmul_tn(c.probs, dy);
  Matrix ds = masked_softmax_backward(c.probs, dp, c.mask);
  const double inv = 1.0 / std::sqrt(static_cast<double>(c.q.cols));
  for (double& x : ds.data) x *= inv;
  g.dq = matmul(ds, c.k);
  g.dk = matmul_tn(ds, c.q);
  return g;
}

struct MhaCache {
  Matrix xq, xkv;
  Matrix q, k, v;
  std::vector<AttentionCache> heads;
  Matrix ycat;
};

/// Multi-head attention: biasless Q/K/V projections, output projection with
/// bias. Heads split the feature dimension evenly.
struct MultiHeadAttention {
  int wq = -1, wk = -1, wv = -1, wo = -1, bo = -1;
  int heads = 1;
  int dim = 0;

  void init(ParamStore& ps, const std::string& prefix, int d, int n_heads,
            Rng& rng, bool zero_out = true) {
    if (d % n_heads != 0)
      throw std::invalid_argument("MultiHeadAttention: d % heads != 0");
    dim = d;
    heads = n_heads;
    wq = ps.create(prefix + ".wq", d, d, Init::Xavier, rng);
    wk = ps.create(prefix + ".wk", d, d, Init::Xavier, rng);
    wv = ps.create(prefix + ".wv", d, d, Init::Xavier, rng);
    wo = ps.create(prefix + ".wo", d, d, zero_out ? Init::Zero : Init::Xavier,
                   rng);
    bo = ps.create(prefix + ".bo", 1, d, Init::Zero, rng);
  }

  /// mask is (rows(xq) x rows(xkv)), shared across heads.
  Matrix forward(const ParamStore& ps, const Matrix& xq, const Matrix& xkv,
                 const Mask& mask, MhaCache* cache = nullptr) const {
    const int dh = dim / heads;
    Matrix q = matmul_nt(xq, ps.value(wq));
    Matrix k = matmul_nt(xkv, ps.value(wk));
    Matrix v = matmul_nt(xkv, ps.value(wv));
    Matrix ycat(xq.rows, dim);
    std::vector<AttentionCache> hc(cache ? heads : 0);
    for (int h = 0; h < heads; ++h) {
      Matrix qh = slice_cols(q, h * dh, dh);
      Matrix kh = slice_cols(k, h * dh, dh);
      Matrix vh = slice_cols(v, h * dh, dh);
      Matrix yh = scaled_dot_attention(qh, kh, vh, mask,
                                       cache ? &hc[h] : nullptr);
      for (int i = 0; i < yh.rows; ++i)
        for (int j = 0; j < dh; ++j) ycat.at(i, h * dh + j) = yh.at(i, j);
    }
    Matrix out = linear_forward(ps.value(wo), ps.value(bo), ycat);
    if (cache) {
      cache->xq = xq;
      cache->xkv = xkv;
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->heads = std::move(hc);
      cache->ycat = std::move(ycat);
    }
    return out;
  }

  struct Grads {
    Matrix dxq, dxkv;
  };

  Grads backward(ParamStore& ps, const MhaCache& c, const Matrix& dy) const {
    const int dh = dim / heads;
    Matrix dycat =
        linear_backward(ps.value(wo), c.ycat, dy, ps.grad(wo), ps.grad(bo));
    Matrix dq(c.q.rows, dim), dk(c.k.rows, dim), dv(c.v.rows, dim);
    for (int h = 0; h < heads; ++h) {
      Matrix dyh = slice_cols(dycat, h * dh, dh);
      AttentionGrads g = scaled_dot_attention_backward(c.heads[h], dyh);
      add_into_cols(dq, g.dq, h * dh);
      add_into_cols(dk, g.dk, h * dh);
      add_into_cols(dv, g.dv, h * dh);
    }
    Grads out;
    add_inplace(ps.grad(wq), matmul_tn(dq, c.xq));
    add_inplace(ps.grad(wk), matmul_tn(dk, c.xkv));
    add_inplace(ps.grad(wv), matmul_tn(dv, c.xkv));
    out.dxq = matmul(dq, ps.value(wq));
    out.dxkv = matmul(dk, ps.value(wk));
    add_inplace(out.dxkv, matmul(dv, ps.value(wv)));
    return out;
  }
};

/// Standard interleaved sin/cos positional encoding; position 0 gives the
/// alternating 0/1 pattern.
inline Matrix sinusoidal_pe(int position, int d) {
  if (d <= 0 || d % 2 != 0)
    throw std::invalid_argument("sinusoidal_pe: d must be positive and even");
  if (position < 0)
    throw std::invalid_argument("sinusoidal_pe: negative position");
  Matrix pe(1, d);
  for (int i = 0; i < d / 2; ++i) {
    const double freq =
        std::pow(10000.0, -2.0 * static_cast<double>(i) / d);
    pe.at(0, 2 * i) = std::sin(position * freq);
    pe.at(0, 2 * i + 1) = std::cos(position * freq);
  }
  return pe;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kProbEps = 1e-7;

/// Binary focal loss on a probability. Targets are {0,1}; p is clamped to
/// [eps, 1-eps] before the log.
inline double focal_loss(double p, int target, double alpha, double gamma) {
  p = std::min(std::max(p, kProbEps), 1.0 - kProbEps);
  if (target == 1) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
  return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

/// dL/dp (zero outside the clamp range, matching the clamped forward).
inline double focal_loss_grad(double p, int target, double alpha,
                              double gamma) {
  if (p < kProbEps || p > 1.0 - kProbEps) return 0.0;
  if (target == 1) {
    return alpha * gamma * std::pow(1.0 - p, gamma - 1.0) * std::log(p) -
           alpha * std::pow(1.0 - p, gamma) / p;
  }
  return -(1.0 - alpha) * gamma * std::pow(p, gamma - 1.0) *
             std::log(1.0 - p) +
         (1.0 - alpha) * std::pow(p, gamma) / (1.0 - p);
}

/// Mean absolute difference.
inline double l1_loss(const Matrix& pred, const Matrix& target) {
  check_same_shape(pred, target, "l1_loss");
  if (pred.data.empty()) return 0.0;
  double s = 0.0;
  for (size_t i = 0; i < pred.data.size(); ++i)
    s += std::abs(pred.data[i] - target.data[i]);
  return s / static_cast<double>(pred.data.size());
}

/// d mean|pred-target| / d pred = sign / n.
inline Matrix l1_loss_grad(const Matrix& pred, const Matrix& target) {
  check_same_shape(pred, target, "l1_loss_grad");
  Matrix g(pred.rows, pred.cols);
  const double inv = 1.0 / static_cast<double>(pred.data.size());
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const double d = pred.data[i] - target.data[i];
    g.data[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
  }
  return g;
}

}  // namespace cotrack
