#pragma once

#include <cstring>
#include <vector>

#include "cotrack/hungarian.hpp"
#include "cotrack/mdfe.hpp"
#include "cotrack/model.hpp"
#include "cotrack/rotation.hpp"

namespace cotrack {

/// 9-vector pose conditioning code: continuous 6D rotation encoding followed
/// by the raw translation.
inline Matrix encode_pose(const Pose& pose) {
  pose.validate();
  return hconcat(rot6d_encode(pose.r), pose.t);
}

/// Block-diagonal latent affine map predicted from the pose code. The
/// "rotation" part is unconstrained within blocks; it is assembled as
/// identity plus predicted residual so zeroed heads give a no-op alignment.
struct LatentTransform {
  Matrix rhat;  // d x d
  Matrix that;  // 1 x d
  int block = 0;
};

struct LatentTransformCache {
  Matrix pose_code;
  MlpCache rot_cache;
  MlpCache trans_cache;
};

inline LatentTransform predict_latent_transform(
    const ParamStore& ps, const Mlp& rot_head, const Mlp& trans_head,
    const Matrix& pose_code, int d, int block,
    LatentTransformCache* cache = nullptr) {
  if (d % block != 0)
    throw std::invalid_argument("predict_latent_transform: d % block != 0");
  const int blocks = d / block;
  Matrix rot_out = rot_head.forward(ps, pose_code,
                                    cache ? &cache->rot_cache : nullptr);
  if (rot_out.cols != blocks * block * block)
    throw std::invalid_argument("predict_latent_transform: head width");
  LatentTransform tf;
  tf.block = block;
  tf.rhat = Matrix::identity(d);
  for (int b = 0; b < blocks; ++b)
    for (int i = 0; i < block; ++i)
      for (int j = 0; j < block; ++j)
        tf.rhat.at(b * block + i, b * block + j) +=
            rot_out.at(0, b * block * block + i * block + j);
  tf.that = trans_head.forward(ps, pose_code,
                               cache ? &cache->trans_cache : nullptr);
  if (cache) cache->pose_code = pose_code;
  return tf;
}

/// Row-wise latent alignment: f_aligned = f * Rhat^T + that.
inline Matrix caa_align(const Matrix& feats, const LatentTransform& tf) {
  if (feats.empty()) return Matrix(feats.rows, tf.rhat.cols);
  Matrix out = matmul_nt(feats, tf.rhat);
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out.at(i, j) += tf.that.at(0, j);
  return out;
}

/// Backward for one aligned feature set: returns d_feats and pushes gradients
/// into the two prediction heads.
inline Matrix caa_align_backward(ParamStore& ps, const Mlp& rot_head,
                                 const Mlp& trans_head,
                                 const LatentTransformCache& cache,
                                 const LatentTransform& tf,
                                 const Matrix& feats_in, const Matrix& dout) {
  const int d = tf.rhat.rows;
  const int block = tf.block;
  const int blocks = d / block;
  // dRhat = dout^T * feats ; dthat = column sums
  Matrix drhat = matmul_tn(dout, feats_in);
  Matrix dthat = colsum(dout);
  Matrix drot(1, blocks * block * block);
  for (int b = 0; b < blocks; ++b)
    for (int i = 0; i < block; ++i)
      for (int j = 0; j < block; ++j)
        drot.at(0, b * block * block + i * block + j) =
            drhat.at(b * block + i, b * block + j);
  rot_head.backward(ps, cache.rot_cache, drot);
  trans_head.backward(ps, cache.trans_cache, dthat);
  return matmul(dout, tf.rhat);
}

// ---------------------------------------------------------------------------
// Graph-based association.
// ---------------------------------------------------------------------------

struct AffinityMatrix {
  Matrix a;  // N_V x N_I in [0,1]
};

struct GbaCache {
  Matrix node_v_in, node_i_in;
  MlpCache node_v_cache, node_i_cache;
  Matrix nv, ni;
  Matrix qv, qi;        // projected node features
  Matrix dp;            // (N_V*N_I) x 3 absolute point differences
  MlpCache edge_cache;
  Matrix edges;         // (N_V*N_I) x d
  Matrix edge_proj;     // edges * W^E
  Matrix ffn_in;        // (N_V*N_I) x (1+d)
  MlpCache ffn_cache;
  Matrix a;             // sigmoid output
};

/// Affinity between every (vehicle, infrastructure) instance pair from node
/// features (MLP over [M|S]), projected dot-product attention, and edge
/// features from absolute reference point differences; a terminal FFN plus
/// sigmoid yields probabilities.
inline AffinityMatrix gba_affinity(const CoopModel& coop, const ParamStore& ps,
                                   const InstanceFeatures& veh,
                                   const InstanceFeatures& inf,
                                   const Matrix& pv, const Matrix& pi,
                                   GbaCache* cache = nullptr) {
  const int nv_count = veh.n();
  const int ni_count = inf.n();
  const int d = coop.cfg.d;
  AffinityMatrix out;
  out.a = Matrix(nv_count, ni_count);
  if (nv_count == 0 || ni_count == 0) return out;

  Matrix node_v_in = hconcat(veh.m, veh.s);
  Matrix node_i_in = hconcat(inf.m, inf.s);
  Matrix nv = coop.node_mlp.forward(ps, node_v_in,
                                    cache ? &cache->node_v_cache : nullptr);
  Matrix ni = coop.node_mlp.forward(ps, node_i_in,
                                    cache ? &cache->node_i_cache : nullptr);
  Matrix qv = matmul(nv, ps.value(coop.wv));
  Matrix qi = matmul(ni, ps.value(coop.wi));
  Matrix att = matmul_nt(qv, qi);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& x : att.data) x *= inv_sqrt_d;

  Matrix dp(nv_count * ni_count, 3);
  for (int i = 0; i < nv_count; ++i)
    for (int j = 0; j < ni_count; ++j)
      for (int c = 0; c < 3; ++c)
        dp.at(i * ni_count + j, c) = std::abs(pv.at(i, c) - pi.at(j, c));
  Matrix edges =
      coop.edge_mlp.forward(ps, dp, cache ? &cache->edge_cache : nullptr);
  Matrix edge_proj = matmul(edges, ps.value(coop.we));

  Matrix ffn_in(nv_count * ni_count, 1 + d);
  for (int i = 0; i < nv_count; ++i)
    for (int j = 0; j < ni_count; ++j) {
      const int r = i * ni_count + j;
      double esum = 0.0;
      for (int c = 0; c < d; ++c) esum += edge_proj.at(r, c);
      ffn_in.at(r, 0) = att.at(i, j) + esum;
      for (int c = 0; c < d; ++c) ffn_in.at(r, 1 + c) = edge_proj.at(r, c);
    }
  Matrix logits =
      coop.gba_ffn.forward(ps, ffn_in, cache ? &cache->ffn_cache : nullptr);
  for (int i = 0; i < nv_count; ++i)
    for (int j = 0; j < ni_count; ++j)
      out.a.at(i, j) = sigmoid(logits.at(i * ni_count + j, 0));

  if (cache) {
    cache->node_v_in = std::move(node_v_in);
    cache->node_i_in = std::move(node_i_in);
    cache->nv = std::move(nv);
    cache->ni = std::move(ni);
    cache->qv = std::move(qv);
    cache->qi = std::move(qi);
    cache->dp = std::move(dp);
    cache->edges = std::move(edges);
    cache->edge_proj = std::move(edge_proj);
    cache->ffn_in = std::move(ffn_in);
    cache->a = out.a;
  }
  return out;
}

struct GbaGrads {
  Matrix dm_v, ds_v;  // gradients into the vehicle features
  Matrix dm_i, ds_i;  // gradients into the aligned infrastructure features
};

/// Backward from dL/dA. Reference points carry no parameters, so their
/// gradient is not propagated.
inline GbaGrads gba_backward(const CoopModel& coop, ParamStore& ps,
                             const GbaCache& cache, const Matrix& da) {
  const int nv_count = da.rows;
  const int ni_count = da.cols;
  const int d = coop.cfg.d;
  GbaGrads out;
  out.dm_v = Matrix(nv_count, d);
  out.ds_v = Matrix(nv_count, d);
  out.dm_i = Matrix(ni_count, d);
  out.ds_i = Matrix(ni_count, d);
  if (nv_count == 0 || ni_count == 0) return out;

  Matrix dlogits(nv_count * ni_count, 1);
  for (int i = 0; i < nv_count; ++i)
    for (int j = 0; j < ni_count; ++j) {
      const double a = cache.a.at(i, j);
      dlogits.at(i * ni_count + j, 0) = da.at(i, j) * a * (1.0 - a);
    }
  Matrix dffn_in = coop.gba_ffn.backward(ps, cache.ffn_cache, dlogits);

  Matrix datt(nv_count, ni_count);
  Matrix dedge_proj(nv_count * ni_count, d);
  for (int i = 0; i < nv_count; ++i)
    for (int j = 0; j < ni_count; ++j) {
      const int r = i * ni_count + j;
      const double dsum = dffn_in.at(r, 0);
      datt.at(i, j) = dsum;
      for (int c = 0; c < d; ++c)
        dedge_proj.at(r, c) = dsum + dffn_in.at(r, 1 + c);
    }

  // edge path (reference point gradients stop here)
  add_inplace(ps.grad(coop.we), matmul_tn(cache.edges, dedge_proj));
  Matrix dedges = matmul_nt(dedge_proj, ps.value(coop.we));
  coop.edge_mlp.backward(ps, cache.edge_cache, dedges);

  // attention path
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix datt_scaled = scale(datt, inv_sqrt_d);
  Matrix dqv = matmul(datt_scaled, cache.qi);
  Matrix dqi = matmul_tn(datt_scaled, cache.qv);
  add_inplace(ps.grad(coop.wv), matmul_tn(cache.nv, dqv));
  add_inplace(ps.grad(coop.wi), matmul_tn(cache.ni, dqi));
  Matrix dnv = matmul_nt(dqv, ps.value(coop.wv));
  Matrix dni = matmul_nt(dqi, ps.value(coop.wi));

  Matrix dnode_v_in = coop.node_mlp.backward(ps, cache.node_v_cache, dnv);
  Matrix dnode_i_in = coop.node_mlp.backward(ps, cache.node_i_cache, dni);
  out.dm_v = slice_cols(dnode_v_in, 0, d);
  out.ds_v = slice_cols(dnode_v_in, d, d);
  out.dm_i = slice_cols(dnode_i_in, 0, d);
  out.ds_i = slice_cols(dnode_i_in, d, d);
  return out;
}

// ---------------------------------------------------------------------------
// Matching and aggregation.
// ---------------------------------------------------------------------------

struct MatchSet {
  struct Pair {
    int v;
    int i;
    double affinity;
  };
  std::vector<Pair> pairs;
  std::vector<int> unmatched_v;
  std::vector<int> unmatched_i;
};

/// Hungarian assignment on 1-A; assignments below the affinity threshold are
/// discarded to the unmatched sets.
inline MatchSet match(const AffinityMatrix& aff, double threshold) {
  const Matrix& a = aff.a;
  MatchSet out;
  std::vector<bool> v_used(a.rows, false), i_used(a.cols, false);
  if (!a.empty()) {
    Matrix cost(a.rows, a.cols);
    for (size_t k = 0; k < a.data.size(); ++k) cost.data[k] = 1.0 - a.data[k];
    Assignment asg = hungarian(cost);
    for (auto [r, c] : asg.pairs) {
      if (a.at(r, c) >= threshold) {
        out.pairs.push_back({r, c, a.at(r, c)});
        v_used[r] = true;
        i_used[c] = true;
      }
    }
  }
  for (int r = 0; r < a.rows; ++r)
    if (!v_used[r]) out.unmatched_v.push_back(r);
  for (int c = 0; c < a.cols; ++c)
    if (!i_used[c]) out.unmatched_i.push_back(c);
  return out;
}

enum class Provenance : uint8_t { Vehicle = 0, Infra = 1, Fused = 2 };

inline const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::Vehicle: return "vehicle";
    case Provenance::Infra: return "infra";
    default: return "fused";
  }
}

struct AggregateResult {
  InstanceFeatures feats;
  Matrix refpoints;  // vehicle frame
  std::vector<Provenance> tags;
  std::vector<int> src_v;  // vehicle row per output row, -1 if none
  std::vector<int> src_i;  // infrastructure row per output row, -1 if none
};

struct GateCache {
  Matrix in;        // 1 x 2d
  MlpCache mlp;
  Matrix g;         // 1 x d sigmoid
  Matrix fv, fi;    // the fused rows
};

struct AggregateCache {
  std::vector<int> fused_rows;  // output rows that are fused (vehicle order)
  std::vector<GateCache> gate_m;
  std::vector<GateCache> gate_s;
};

namespace detail {

inline Matrix gated_fuse_row(const Mlp& gate, const ParamStore& ps,
                             const Matrix& fv, const Matrix& fi,
                             GateCache* cache) {
  Matrix in = hconcat(fv, fi);
  MlpCache mc;
  Matrix z = gate.forward(ps, in, cache ? &mc : nullptr);
  Matrix g(1, z.cols);
  for (int c = 0; c < z.cols; ++c) g.at(0, c) = sigmoid(z.at(0, c));
  Matrix fused(1, z.cols);
  for (int c = 0; c < z.cols; ++c)
    fused.at(0, c) = g.at(0, c) * fv.at(0, c) +
                     (1.0 - g.at(0, c)) * fi.at(0, c);
  if (cache) {
    cache->in = std::move(in);
    cache->mlp = std::move(mc);
    cache->g = std::move(g);
    cache->fv = fv;
    cache->fi = fi;
  }
  return fused;
}

struct GateGrads {
  Matrix dfv, dfi;
};

inline GateGrads gated_fuse_row_backward(const Mlp& gate, ParamStore& ps,
                                         const GateCache& c,
                                         const Matrix& dfused) {
  const int d = dfused.cols;
  GateGrads out;
  out.dfv = Matrix(1, d);
  out.dfi = Matrix(1, d);
  Matrix dz(1, d);
  for (int k = 0; k < d; ++k) {
    const double g = c.g.at(0, k);
    out.dfv.at(0, k) = dfused.at(0, k) * g;
    out.dfi.at(0, k) = dfused.at(0, k) * (1.0 - g);
    const double dg = dfused.at(0, k) * (c.fv.at(0, k) - c.fi.at(0, k));
    dz.at(0, k) = dg * g * (1.0 - g);
  }
  Matrix din = gate.backward(ps, c.mlp, dz);
  for (int k = 0; k < d; ++k) {
    out.dfv.at(0, k) += din.at(0, k);
    out.dfi.at(0, k) += din.at(0, d + k);
  }
  return out;
}

}  // namespace detail

/// Merge the two instance sets under the match routing. Output rows keep the
/// vehicle ordering (fused in place), then append unmatched infrastructure
/// instances with their spatially transformed reference points.
inline AggregateResult aggregate(const CoopModel& coop, const ParamStore& ps,
                                 const MatchSet& matches,
                                 const InstanceFeatures& veh,
                                 const InstanceFeatures& inf_aligned,
                                 const Matrix& pv, const Matrix& pi_aligned,
                                 AggregateCache* cache = nullptr) {
  const int nv_count = veh.n();
  const int d = coop.cfg.d;
  std::vector<int> match_of_v(nv_count, -1);
  for (size_t k = 0; k < matches.pairs.size(); ++k)
    match_of_v[matches.pairs[k].v] = static_cast<int>(k);

  const int n_out = nv_count + static_cast<int>(matches.unmatched_i.size());
  AggregateResult out;
  out.feats.m = Matrix(n_out, d);
  out.feats.s = Matrix(n_out, d);
  out.refpoints = Matrix(n_out, 3);
  out.tags.resize(n_out);
  out.src_v.assign(n_out, -1);
  out.src_i.assign(n_out, -1);

  for (int i = 0; i < nv_count; ++i) {
    out.src_v[i] = i;
    for (int c = 0; c < 3; ++c) out.refpoints.at(i, c) = pv.at(i, c);
    const int k = match_of_v[i];
    if (k < 0) {
      out.tags[i] = Provenance::Vehicle;
      for (int c = 0; c < d; ++c) {
        out.feats.m.at(i, c) = veh.m.at(i, c);
        out.feats.s.at(i, c) = veh.s.at(i, c);
      }
    } else {
      const int j = matches.pairs[k].i;
      out.tags[i] = Provenance::Fused;
      out.src_i[i] = j;
      GateCache gm, gs;
      Matrix fused_m = detail::gated_fuse_row(
          coop.gate_m, ps, veh.m.row(i), inf_aligned.m.row(j),
          cache ? &gm : nullptr);
      Matrix fused_s = detail::gated_fuse_row(
          coop.gate_s, ps, veh.s.row(i), inf_aligned.s.row(j),
          cache ? &gs : nullptr);
      out.feats.m.set_row(i, fused_m);
      out.feats.s.set_row(i, fused_s);
      if (cache) {
        cache->fused_rows.push_back(i);
        cache->gate_m.push_back(std::move(gm));
        cache->gate_s.push_back(std::move(gs));
      }
    }
  }
  int row = nv_count;
  for (int j : matches.unmatched_i) {
    out.tags[row] = Provenance::Infra;
    out.src_i[row] = j;
    for (int c = 0; c < d; ++c) {
      out.feats.m.at(row, c) = inf_aligned.m.at(j, c);
      out.feats.s.at(row, c) = inf_aligned.s.at(j, c);
    }
    for (int c = 0; c < 3; ++c) out.refpoints.at(row, c) = pi_aligned.at(j, c);
    ++row;
  }
  return out;
}

struct AggregateGrads {
  Matrix dm_v, ds_v;          // gradients into vehicle features
  Matrix dm_i, ds_i;          // gradients into aligned infra features
};

inline AggregateGrads aggregate_backward(const CoopModel& coop, ParamStore& ps,
                                         const MatchSet& matches,
                                         const AggregateResult& agg,
                                         const AggregateCache& cache,
                                         int nv_count, int ni_count,
                                         const Matrix& dm_out,
                                         const Matrix& ds_out) {
  const int d = coop.cfg.d;
  AggregateGrads out;
  out.dm_v = Matrix(nv_count, d);
  out.ds_v = Matrix(nv_count, d);
  out.dm_i = Matrix(ni_count, d);
  out.ds_i = Matrix(ni_count, d);

  size_t fused_idx = 0;
  for (int r = 0; r < dm_out.rows; ++r) {
    const int vi = agg.src_v[r];
    const int ij = agg.src_i[r];
    switch (agg.tags[r]) {
      case Provenance::Vehicle:
        for (int c = 0; c < d; ++c) {
          out.dm_v.at(vi, c) += dm_out.at(r, c);
          out.ds_v.at(vi, c) += ds_out.at(r, c);
        }
        break;
      case Provenance::Infra:
        for (int c = 0; c < d; ++c) {
          out.dm_i.at(ij, c) += dm_out.at(r, c);
          out.ds_i.at(ij, c) += ds_out.at(r, c);
        }
        break;
      case Provenance::Fused: {
        auto gm = detail::gated_fuse_row_backward(
            coop.gate_m, ps, cache.gate_m[fused_idx], dm_out.row(r));
        auto gs = detail::gated_fuse_row_backward(
            coop.gate_s, ps, cache.gate_s[fused_idx], ds_out.row(r));
        for (int c = 0; c < d; ++c) {
          out.dm_v.at(vi, c) += gm.dfv.at(0, c);
          out.dm_i.at(ij, c) += gm.dfi.at(0, c);
          out.ds_v.at(vi, c) += gs.dfv.at(0, c);
          out.ds_i.at(ij, c) += gs.dfi.at(0, c);
        }
        ++fused_idx;
        break;
      }
    }
  }
  (void)matches;
  return out;
}

// ---------------------------------------------------------------------------
// V2X message wire format.
// ---------------------------------------------------------------------------

/// One transmitted instance. Values are rounded through 32-bit floats, which
/// is exactly what the wire carries.
struct V2xInstance {
  Matrix m_row;   // 1 x d
  Matrix s_row;   // 1 x d
  Matrix point;   // 1 x 3 (sender frame)
  double score = 0.0;
  int class_label = 0;
  int sender_row = -1;     // index in the sender's instance set (diagnostic)
  int64_t gt_hint = -1;    // sender-side detection provenance (diagnostic)
};

struct V2xMessage {
  int d = 0;
  std::vector<V2xInstance> instances;

  int count() const { return static_cast<int>(instances.size()); }
};

inline double round_f32(double x) {
  return static_cast<double>(static_cast<float>(x));
}

/// Wire size: u32 count header plus per instance 2*d f32 features, 3 f32
/// point, f32 score, u8 class.
inline size_t message_wire_bytes(int n_instances, int d) {
  return 4 + static_cast<size_t>(n_instances) * (8 * static_cast<size_t>(d) + 17);
}

inline size_t message_payload_bytes_per_instance(int d) {
  return 8 * static_cast<size_t>(d) + 17;
}

inline V2xMessage pack_message(const InstanceFeatures& feats,
                               const Matrix& points,
                               const std::vector<double>& scores,
                               const std::vector<int>& classes,
                               const std::vector<int>& rows) {
  V2xMessage msg;
  msg.d = feats.m.cols;
  for (int r : rows) {
    V2xInstance inst;
    inst.m_row = feats.m.row(r);
    inst.s_row = feats.s.row(r);
    inst.point = points.row(r);
    for (double& x : inst.m_row.data) x = round_f32(x);
    for (double& x : inst.s_row.data) x = round_f32(x);
    for (double& x : inst.point.data) x = round_f32(x);
    inst.score = round_f32(scores[r]);
    inst.class_label = classes[r];
    inst.sender_row = r;
    msg.instances.push_back(std::move(inst));
  }
  return msg;
}

/// Exact wire encoding; its length always equals message_wire_bytes.
inline std::vector<uint8_t> serialize_message(const V2xMessage& msg) {
  std::vector<uint8_t> out;
  out.reserve(message_wire_bytes(msg.count(), msg.d));
  auto put_f32 = [&](double v) {
    const float f = static_cast<float>(v);
    uint8_t b[4];
    std::memcpy(b, &f, 4);
    out.insert(out.end(), b, b + 4);
  };
  const uint32_t n = static_cast<uint32_t>(msg.instances.size());
  uint8_t hb[4];
  std::memcpy(hb, &n, 4);
  out.insert(out.end(), hb, hb + 4);
  for (const V2xInstance& inst : msg.instances) {
    for (double v : inst.m_row.data) put_f32(v);
    for (double v : inst.s_row.data) put_f32(v);
    for (double v : inst.point.data) put_f32(v);
    put_f32(inst.score);
    out.push_back(static_cast<uint8_t>(inst.class_label));
  }
  return out;
}

inline V2xMessage deserialize_message(const std::vector<uint8_t>& bytes,
                                      int d) {
  V2xMessage msg;
  msg.d = d;
  if (bytes.size() < 4) throw std::runtime_error("v2x message truncated");
  uint32_t n = 0;
  std::memcpy(&n, bytes.data(), 4);
  size_t off = 4;
  auto get_f32 = [&]() {
    float f = 0;
    std::memcpy(&f, bytes.data() + off, 4);
    off += 4;
    return static_cast<double>(f);
  };
  if (bytes.size() != message_wire_bytes(static_cast<int>(n), d))
    throw std::runtime_error("v2x message size mismatch");
  for (uint32_t i = 0; i < n; ++i) {
    V2xInstance inst;
    inst.m_row = Matrix(1, d);
    inst.s_row = Matrix(1, d);
    inst.point = Matrix(1, 3);
    for (int c = 0; c < d; ++c) inst.m_row.at(0, c) = get_f32();
    for (int c = 0; c < d; ++c) inst.s_row.at(0, c) = get_f32();
    for (int c = 0; c < 3; ++c) inst.point.at(0, c) = get_f32();
    inst.score = get_f32();
    inst.class_label = bytes[off++];
    msg.instances.push_back(std::move(inst));
  }
  return msg;
}

}  // namespace cotrack
