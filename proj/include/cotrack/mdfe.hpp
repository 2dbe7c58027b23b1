#pragma once

#include <deque>
#include <unordered_map>
#include <vector>

#include "cotrack/geometry.hpp"
#include "cotrack/model.hpp"
#include "cotrack/nn.hpp"
#include "cotrack/scene.hpp"

namespace cotrack {

/// Query slots for one agent and frame: per-row feature vector and 3D
/// reference point, with track slots (inherited identity) ahead of fresh ones.
struct QuerySet {
  Matrix features;   // N x d
  Matrix refpoints;  // N x 3
  std::vector<int64_t> track_ids;  // -1 for fresh slots

  int n() const { return features.rows; }

  void validate() const {
    if (features.rows != refpoints.rows ||
        features.rows != static_cast<int>(track_ids.size()))
      throw std::invalid_argument("QuerySet: inconsistent row counts");
  }
};

struct InstanceFeatures {
  Matrix m;  // N x d motion features
  Matrix s;  // N x d semantic features

  int n() const { return m.rows; }
};

/// Per-identity FIFO of past (motion, semantic) feature rows, capped at tau.
/// Entries are plain values; nothing here participates in gradients.
class HistoryBuffer {
 public:
  explicit HistoryBuffer(int tau = 4) : tau_(tau) {
    if (tau < 0) throw std::invalid_argument("HistoryBuffer: negative tau");
  }

  int tau() const { return tau_; }

  void push(int64_t id, Matrix m_row, Matrix s_row) {
    if (tau_ == 0) return;
    auto& dq = slots_[id];
    dq.push_back({std::move(m_row), std::move(s_row)});
    while (static_cast<int>(dq.size()) > tau_) dq.pop_front();
  }

  /// Drop identities not in the active set.
  void retain(const std::vector<int64_t>& active_ids) {
    std::unordered_map<int64_t, bool> keep;
    for (int64_t id : active_ids) keep[id] = true;
    for (auto it = slots_.begin(); it != slots_.end();)
      it = keep.count(it->first) ? std::next(it) : slots_.erase(it);
  }

  int valid_count(int64_t id) const {
    auto it = slots_.find(id);
    return it == slots_.end() ? 0 : static_cast<int>(it->second.size());
  }

  /// Keys/values for one instance's cross-attention: tau rows ordered most
  /// recent first with sinusoidal position by age, plus the validity mask.
  /// Missing slots are zero rows under a false mask.
  struct Gathered {
    Matrix kv_m;  // tau x d
    Matrix kv_s;  // tau x d
    Mask mask;    // tau entries
  };

  Gathered gather(int64_t id, int d) const {
    Gathered g;
    g.kv_m = Matrix(tau_, d);
    g.kv_s = Matrix(tau_, d);
    g.mask.assign(static_cast<size_t>(tau_), 0);
    auto it = slots_.find(id);
    if (it == slots_.end() || id < 0) return g;
    const auto& dq = it->second;
    // deque holds oldest..newest; row j is age j+1 (newest first)
    for (int j = 0; j < static_cast<int>(dq.size()) && j < tau_; ++j) {
      const auto& entry = dq[dq.size() - 1 - static_cast<size_t>(j)];
      Matrix pe = sinusoidal_pe(j + 1, d);
      for (int c = 0; c < d; ++c) {
        g.kv_m.at(j, c) = entry.first.at(0, c) + pe.at(0, c);
        g.kv_s.at(j, c) = entry.second.at(0, c) + pe.at(0, c);
      }
      g.mask[j] = 1;
    }
    return g;
  }

  size_t tracked_ids() const { return slots_.size(); }

 private:
  int tau_;
  std::unordered_map<int64_t, std::deque<std::pair<Matrix, Matrix>>> slots_;
};

/// Appends this frame's enhanced features for every slot that carries an id.
inline void history_update(HistoryBuffer& buffer, const InstanceFeatures& feats,
                           const std::vector<int64_t>& ids) {
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] >= 0)
      buffer.push(ids[i], feats.m.row(static_cast<int>(i)),
                  feats.s.row(static_cast<int>(i)));
}

// ---------------------------------------------------------------------------
// Decoder emulation: bind detections to query slots and mix features.
// ---------------------------------------------------------------------------

struct BindResult {
  std::vector<int> det_for_slot;   // detection index per slot, -1 if unbound
  std::vector<Box3D> coarse;       // coarse box per slot
};

/// Globally-greedy nearest binding. Track slots bind first, gated by
/// `gate_radius`; remaining detections then fill fresh slots by proximity
/// with no gate. Bound slots move their reference point onto the detection.
inline BindResult bind_detections(const std::vector<Detection>& dets,
                                  QuerySet& q, double gate_radius) {
  q.validate();
  const int n = q.n();
  BindResult out;
  out.det_for_slot.assign(n, -1);
  out.coarse.resize(n);
  std::vector<bool> det_used(dets.size(), false);

  auto dist2 = [&](int slot, int det) {
    const double dx = q.refpoints.at(slot, 0) - dets[det].box.x;
    const double dy = q.refpoints.at(slot, 1) - dets[det].box.y;
    return dx * dx + dy * dy;
  };

  auto greedy_round = [&](bool track_slots, double gate) {
    while (true) {
      double best = gate > 0 ? gate * gate : 1e300;
      int bs = -1, bd = -1;
      for (int s = 0; s < n; ++s) {
        if (out.det_for_slot[s] >= 0) continue;
        if (track_slots != (q.track_ids[s] >= 0)) continue;
        for (size_t dj = 0; dj < dets.size(); ++dj) {
          if (det_used[dj]) continue;
          const double d2 = dist2(s, static_cast<int>(dj));
          if (d2 < best) {
            best = d2;
            bs = s;
            bd = static_cast<int>(dj);
          }
        }
      }
      if (bs < 0) break;
      out.det_for_slot[bs] = bd;
      det_used[bd] = true;
    }
  };

  greedy_round(/*track_slots=*/true, gate_radius);
  greedy_round(/*track_slots=*/false, /*gate=*/0.0);

  for (int s = 0; s < n; ++s) {
    const int dj = out.det_for_slot[s];
    if (dj >= 0) {
      out.coarse[s] = dets[dj].box;
      q.refpoints.at(s, 0) = dets[dj].box.x;
      q.refpoints.at(s, 1) = dets[dj].box.y;
      q.refpoints.at(s, 2) = dets[dj].box.z;
    } else {
      Box3D placeholder;
      placeholder.x = q.refpoints.at(s, 0);
      placeholder.y = q.refpoints.at(s, 1);
      placeholder.z = q.refpoints.at(s, 2);
      placeholder.score = 0.0;
      out.coarse[s] = placeholder;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// MDFE forward/backward.
// ---------------------------------------------------------------------------

struct TemporalLayerCache {
  Matrix x_in;
  MhaCache self_cache;
  std::vector<MhaCache> cross_caches;  // one per instance
  Matrix x_after_cross;
  MlpCache ffn_cache;
};

struct TemporalBlockCache {
  std::vector<Matrix> kv;   // per instance, tau x d (PE applied)
  std::vector<Mask> mask;   // per instance
  TemporalLayerCache layer[2];
};

inline Matrix temporal_block_forward(const TemporalBlock& block,
                                     const ParamStore& ps, const Matrix& x_in,
                                     const std::vector<Matrix>& kv,
                                     const std::vector<Mask>& kv_mask,
                                     TemporalBlockCache* cache) {
  const int n = x_in.rows;
  Matrix x = x_in;
  if (cache) {
    cache->kv = kv;
    cache->mask = kv_mask;
  }
  Mask self_mask(static_cast<size_t>(n) * n, 1);
  for (int li = 0; li < 2; ++li) {
    const TemporalLayer& layer = block.layers[li];
    TemporalLayerCache* lc = cache ? &cache->layer[li] : nullptr;
    if (lc) lc->x_in = x;
    Matrix y = layer.self_attn.forward(ps, x, x, self_mask,
                                       lc ? &lc->self_cache : nullptr);
    add_inplace(x, y);
    if (lc) lc->cross_caches.resize(n);
    for (int i = 0; i < n; ++i) {
      Matrix qrow = x.row(i);
      Matrix yrow = layer.cross_attn.forward(
          ps, qrow, kv[i], kv_mask[i], lc ? &lc->cross_caches[i] : nullptr);
      for (int c = 0; c < x.cols; ++c) x.at(i, c) += yrow.at(0, c);
    }
    if (lc) lc->x_after_cross = x;
    Matrix f = layer.ffn.forward(ps, x, lc ? &lc->ffn_cache : nullptr);
    add_inplace(x, f);
  }
  return x;
}

/// Backward through the block; history keys receive no gradient (features are
/// carried across frames as values).
inline Matrix temporal_block_backward(const TemporalBlock& block,
                                      ParamStore& ps,
                                      const TemporalBlockCache& cache,
                                      const Matrix& dy) {
  Matrix dx = dy;
  for (int li = 1; li >= 0; --li) {
    const TemporalLayer& layer = block.layers[li];
    const TemporalLayerCache& lc = cache.layer[li];
    // ffn residual
    Matrix dffn = layer.ffn.backward(ps, lc.ffn_cache, dx);
    add_inplace(dx, dffn);
    // cross attention residual, per instance
    const int n = dx.rows;
    for (int i = 0; i < n; ++i) {
      Matrix drow(1, dx.cols);
      for (int c = 0; c < dx.cols; ++c) drow.at(0, c) = dx.at(i, c);
      auto g = layer.cross_attn.backward(ps, lc.cross_caches[i], drow);
      for (int c = 0; c < dx.cols; ++c) dx.at(i, c) += g.dxq.at(0, c);
      // g.dxkv discarded: history is detached
    }
    // self attention residual
    auto gs = layer.self_attn.backward(ps, lc.self_cache, dx);
    add_inplace(dx, gs.dxq);
    add_inplace(dx, gs.dxkv);
  }
  return dx;
}

struct MotionHeadCache {
  MlpCache mlp;
  std::vector<int> pool_arg;  // winning corner row per (instance, feature)
  int n = 0;
};

/// PointNet-style motion features: the shared 4-layer MLP runs per corner
/// point, then a per-feature max pools over each instance's 8 corners.
inline Matrix motion_head_forward(const AgentModel& model,
                                  const ParamStore& ps,
                                  const std::vector<Box3D>& boxes,
                                  MotionHeadCache* cache = nullptr) {
  const int n = static_cast<int>(boxes.size());
  const int d = model.cfg.d;
  Matrix corners(8 * n, 3);
  for (int i = 0; i < n; ++i) {
    Matrix c8 = corners_from_box(boxes[i]);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 3; ++c) corners.at(8 * i + r, c) = c8.at(r, c);
  }
  Matrix point_feats =
      model.motion.forward(ps, corners, cache ? &cache->mlp : nullptr);
  Matrix m(n, d);
  std::vector<int> pool_arg(static_cast<size_t>(n) * d, -1);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) {
      double best = point_feats.at(8 * i, c);
      int arg = 8 * i;
      for (int r = 1; r < 8; ++r) {
        const double v = point_feats.at(8 * i + r, c);
        if (v > best) {  // ties keep the first index
          best = v;
          arg = 8 * i + r;
        }
      }
      m.at(i, c) = best;
      pool_arg[static_cast<size_t>(i) * d + c] = arg;
    }
  if (cache) {
    cache->pool_arg = std::move(pool_arg);
    cache->n = n;
  }
  return m;
}

inline void motion_head_backward(const AgentModel& model, ParamStore& ps,
                                 const MotionHeadCache& cache,
                                 const Matrix& dm) {
  const int d = model.cfg.d;
  Matrix dpoints(8 * cache.n, d);
  for (int i = 0; i < cache.n; ++i)
    for (int c = 0; c < d; ++c)
      dpoints.at(cache.pool_arg[static_cast<size_t>(i) * d + c], c) +=
          dm.at(i, c);
  model.motion.backward(ps, cache.mlp, dpoints);
}

struct MdfeCache {
  Matrix mix_in;  // N x 2d
  MlpCache sem_cache;
  MotionHeadCache motion_cache;
  TemporalBlockCache tm_cache;
  TemporalBlockCache ts_cache;
};

struct MdfeOutput {
  InstanceFeatures feats;        // enhanced M, S
  std::vector<Box3D> coarse;     // per-slot coarse boxes
  std::vector<int> det_for_slot;
  Matrix q_hat;                  // mixed query features
};

/// Full per-agent feature extraction for one frame: bind detections, mix
/// features, run semantic/motion heads, temporally enhance both feature
/// kinds against the history buffer, then append this frame to the history
/// for slots that already carry identities.
inline MdfeOutput mdfe_forward(const AgentModel& model, const ParamStore& ps,
                               const std::vector<Detection>& dets, QuerySet& q,
                               HistoryBuffer& history, double gate_radius,
                               MdfeCache* cache = nullptr,
                               bool update_history = true) {
  q.validate();
  const int n = q.n();
  const int d = model.cfg.d;
  MdfeOutput out;
  BindResult bind = bind_detections(dets, q, gate_radius);
  out.coarse = bind.coarse;
  out.det_for_slot = bind.det_for_slot;

  // mixing layer: q_hat = W [feature | detection latent] + b
  Matrix mix_in(n, 2 * d);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < d; ++c) mix_in.at(i, c) = q.features.at(i, c);
    const int dj = bind.det_for_slot[i];
    if (dj >= 0)
      for (int c = 0; c < d; ++c)
        mix_in.at(i, d + c) = dets[dj].feature.at(0, c);
  }
  out.q_hat = linear_forward(ps.value(model.mix_w), ps.value(model.mix_b),
                             mix_in);
  if (cache) cache->mix_in = mix_in;

  // semantic features from mixed query features
  Matrix s = model.semantic.forward(ps, out.q_hat,
                                    cache ? &cache->sem_cache : nullptr);

  // motion features from center-relative corners through the point MLP
  Matrix m = motion_head_forward(model, ps, bind.coarse,
                                 cache ? &cache->motion_cache : nullptr);

  // temporal enhancement over per-identity history
  std::vector<Matrix> kv_m(n), kv_s(n);
  std::vector<Mask> mask(n);
  for (int i = 0; i < n; ++i) {
    auto g = history.gather(q.track_ids[i], d);
    kv_m[i] = std::move(g.kv_m);
    kv_s[i] = std::move(g.kv_s);
    mask[i] = g.mask;
  }
  out.feats.m = temporal_block_forward(model.temporal_m, ps, m, kv_m, mask,
                                       cache ? &cache->tm_cache : nullptr);
  out.feats.s = temporal_block_forward(model.temporal_s, ps, s, kv_s, mask,
                                       cache ? &cache->ts_cache : nullptr);

  if (update_history) history_update(history, out.feats, q.track_ids);
  return out;
}

struct MdfeGrads {
  Matrix d_query_features;  // N x d, gradient into the inherited features
};

/// Backward from gradients on the enhanced features to every MDFE parameter
/// (mix, heads, temporal blocks) plus the incoming query features.
inline MdfeGrads mdfe_backward(const AgentModel& model, ParamStore& ps,
                               const MdfeCache& cache, const Matrix& dm,
                               const Matrix& ds) {
  const int d = model.cfg.d;
  MdfeGrads out;

  Matrix dm_pre = temporal_block_backward(model.temporal_m, ps, cache.tm_cache,
                                          dm);
  Matrix ds_pre = temporal_block_backward(model.temporal_s, ps, cache.ts_cache,
                                          ds);

  motion_head_backward(model, ps, cache.motion_cache, dm_pre);

  // semantic head back to the mixed features, then through the mixing layer
  Matrix dq_hat = model.semantic.backward(ps, cache.sem_cache, ds_pre);
  Matrix dmix = linear_backward(ps.value(model.mix_w), cache.mix_in, dq_hat,
                                ps.grad(model.mix_w), ps.grad(model.mix_b));
  out.d_query_features = slice_cols(dmix, 0, d);
  return out;
}

}  // namespace cotrack
