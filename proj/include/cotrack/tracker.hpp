#pragma once

#include <cstdint>
#include <optional>
#include <unordered_map>
#include <vector>

#include "cotrack/fusion.hpp"
#include "cotrack/mdfe.hpp"
#include "cotrack/model.hpp"
#include "cotrack/scene.hpp"

namespace cotrack {

// ---------------------------------------------------------------------------
// Decode heads.
// ---------------------------------------------------------------------------

struct DecodeCache {
  MlpCache reg_cache, cls_cache;
  Matrix reg_out;     // N x 10
  Matrix cls_logits;  // N x C
  Matrix refpoints;
};

struct Decoded {
  std::vector<Box3D> boxes;
  Matrix probs;    // N x C sigmoid class probabilities
  Matrix reg_out;  // raw regression output

  int n() const { return probs.rows; }
};

/// Regression head on motion features emits offsets relative to the reference
/// point, log dimensions, an un-normalized (sin, cos) yaw pair and planar
/// velocity; classification head on semantic features emits per-class
/// sigmoid probabilities. Score is the max class probability.
inline Decoded decode_forward(const AgentModel& model, const ParamStore& ps,
                              const InstanceFeatures& feats,
                              const Matrix& refpoints,
                              DecodeCache* cache = nullptr) {
  Decoded out;
  const int n = feats.n();
  Matrix reg = model.reg_head.forward(ps, feats.m,
                                      cache ? &cache->reg_cache : nullptr);
  Matrix logits = model.cls_head.forward(ps, feats.s,
                                         cache ? &cache->cls_cache : nullptr);
  out.probs = Matrix(n, logits.cols);
  for (size_t i = 0; i < logits.data.size(); ++i)
    out.probs.data[i] = sigmoid(logits.data[i]);
  out.boxes.resize(n);
  for (int i = 0; i < n; ++i) {
    Box3D b;
    b.x = refpoints.at(i, 0) + reg.at(i, 0);
    b.y = refpoints.at(i, 1) + reg.at(i, 1);
    b.z = refpoints.at(i, 2) + reg.at(i, 2);
    b.w = std::exp(reg.at(i, 3));
    b.l = std::exp(reg.at(i, 4));
    b.h = std::exp(reg.at(i, 5));
    const double sn = reg.at(i, 6), cs = reg.at(i, 7);
    b.theta = (std::hypot(sn, cs) < 1e-12) ? 0.0 : std::atan2(sn, cs);
    b.vx = reg.at(i, 8);
    b.vy = reg.at(i, 9);
    int best_c = 0;
    for (int c = 1; c < out.probs.cols; ++c)
      if (out.probs.at(i, c) > out.probs.at(i, best_c)) best_c = c;
    b.class_label = best_c;
    b.score = out.probs.at(i, best_c);
    out.boxes[i] = b;
  }
  out.reg_out = reg;
  if (cache) {
    cache->reg_out = std::move(reg);
    cache->cls_logits = std::move(logits);
    cache->refpoints = refpoints;
  }
  return out;
}

/// Predicted attribute row in the 10-component box space for loss/matching:
/// [x, y, z, w, l, h, sin~, cos~, vx, vy] (yaw pair left un-normalized).
inline Matrix decoded_attributes(const Matrix& reg_out, const Matrix& refpoints,
                                 int row) {
  Matrix a(1, 10);
  a.at(0, 0) = refpoints.at(row, 0) + reg_out.at(row, 0);
  a.at(0, 1) = refpoints.at(row, 1) + reg_out.at(row, 1);
  a.at(0, 2) = refpoints.at(row, 2) + reg_out.at(row, 2);
  a.at(0, 3) = std::exp(reg_out.at(row, 3));
  a.at(0, 4) = std::exp(reg_out.at(row, 4));
  a.at(0, 5) = std::exp(reg_out.at(row, 5));
  a.at(0, 6) = reg_out.at(row, 6);
  a.at(0, 7) = reg_out.at(row, 7);
  a.at(0, 8) = reg_out.at(row, 8);
  a.at(0, 9) = reg_out.at(row, 9);
  return a;
}

struct DecodeGrads {
  Matrix dm, ds;
};

/// Backward from gradients in attribute space (d_attr, N x 10) and on class
/// probabilities (d_probs, N x C) to the feature inputs.
inline DecodeGrads decode_backward(const AgentModel& model, ParamStore& ps,
                                   const DecodeCache& cache,
                                   const Matrix& d_attr,
                                   const Matrix& d_probs) {
  const int n = d_attr.rows;
  Matrix dreg(n, 10);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) dreg.at(i, c) = d_attr.at(i, c);
    for (int c = 3; c < 6; ++c)
      dreg.at(i, c) = d_attr.at(i, c) * std::exp(cache.reg_out.at(i, c));
    for (int c = 6; c < 10; ++c) dreg.at(i, c) = d_attr.at(i, c);
  }
  Matrix dcls(n, d_probs.cols);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d_probs.cols; ++c) {
      const double p = sigmoid(cache.cls_logits.at(i, c));
      dcls.at(i, c) = d_probs.at(i, c) * p * (1.0 - p);
    }
  DecodeGrads g;
  g.dm = model.reg_head.backward(ps, cache.reg_cache, dreg);
  g.ds = model.cls_head.backward(ps, cache.cls_cache, dcls);
  return g;
}

// ---------------------------------------------------------------------------
// Track lifecycle.
// ---------------------------------------------------------------------------

struct Track {
  int64_t id = -1;
  Matrix feature;   // 1 x d propagated semantic feature
  Matrix refpoint;  // 1 x 3
  double vx = 0.0, vy = 0.0;
  double last_score = 0.0;
  int age = 0;
  int misses = 0;
  int class_label = 0;
  int64_t bound_gt = -1;  // training-time supervision binding
};

struct TrackSet {
  std::vector<Track> tracks;

  Track* find(int64_t id) {
    for (Track& t : tracks)
      if (t.id == id) return &t;
    return nullptr;
  }
};

/// Fresh-query reference points: a seeded uniform grid over the horizontal
/// range with deterministic jitter, fixed for the life of a stream.
inline Matrix fresh_query_grid(int n_fresh, const double range[4],
                               uint64_t seed) {
  Matrix pts(n_fresh, 3);
  if (n_fresh == 0) return pts;
  const int side = static_cast<int>(std::ceil(std::sqrt(double(n_fresh))));
  const double dx = (range[1] - range[0]) / side;
  const double dy = (range[3] - range[2]) / side;
  Rng rng(derive_seed(seed, "fresh-grid"));
  for (int i = 0; i < n_fresh; ++i) {
    const int gx = i % side, gy = i / side;
    pts.at(i, 0) = range[0] + (gx + 0.5) * dx + rng.uniform(-0.25, 0.25) * dx;
    pts.at(i, 1) = range[2] + (gy + 0.5) * dy + rng.uniform(-0.25, 0.25) * dy;
    pts.at(i, 2) = 0.9;
  }
  return pts;
}

/// Track slots (inherited feature + reference point) followed by fresh slots
/// carrying the learned initial feature on the grid points.
inline QuerySet init_queries(const TrackSet& tracks, const Matrix& fresh_grid,
                             const AgentModel& model, const ParamStore& ps) {
  const int d = model.cfg.d;
  const int nt = static_cast<int>(tracks.tracks.size());
  const int nf = fresh_grid.rows;
  QuerySet q;
  q.features = Matrix(nt + nf, d);
  q.refpoints = Matrix(nt + nf, 3);
  q.track_ids.assign(nt + nf, -1);
  for (int i = 0; i < nt; ++i) {
    const Track& t = tracks.tracks[i];
    for (int c = 0; c < d; ++c) q.features.at(i, c) = t.feature.at(0, c);
    for (int c = 0; c < 3; ++c) q.refpoints.at(i, c) = t.refpoint.at(0, c);
    q.track_ids[i] = t.id;
  }
  const Matrix& init = ps.value(model.query_init);
  for (int i = 0; i < nf; ++i) {
    for (int c = 0; c < d; ++c) q.features.at(nt + i, c) = init.at(0, c);
    for (int c = 0; c < 3; ++c)
      q.refpoints.at(nt + i, c) = fresh_grid.at(i, c);
  }
  return q;
}

struct SelectParams {
  double score_keep = 0.4;
  int patience = 5;
  double dt = 0.1;
  bool training = false;
};

struct SelectionResult {
  std::vector<int> emitted_rows;
  std::vector<int64_t> emitted_ids;
  std::vector<std::pair<int64_t, int>> spawned;  // (new id, row)
};

/// Keeps or spawns tracks from decoded instances and propagates them to the
/// next frame: the propagated feature is the row's semantic feature and the
/// reference point advances by the decoded planar velocity. Instances below
/// the keep threshold accrue misses and coast; tracks out of patience drop.
/// In training mode, keep/spawn follows ground-truth bindings instead of
/// scores so supervision stays attached to slots.
inline SelectionResult select_and_propagate(
    const Decoded& dec, const std::vector<int64_t>& row_track,
    const InstanceFeatures& feats, TrackSet& tracks, int64_t& next_id,
    const SelectParams& p, const std::vector<int64_t>* row_gt = nullptr) {
  if (p.dt <= 0) throw std::invalid_argument("select_and_propagate: dt <= 0");
  SelectionResult out;
  const int n = dec.n();
  std::unordered_map<int64_t, int> row_of;
  for (int r = 0; r < n; ++r)
    if (row_track[r] >= 0) row_of[row_track[r]] = r;

  auto keep_decision = [&](int row) {
    if (p.training) return row_gt && (*row_gt)[row] >= 0;
    return dec.boxes[row].score >= p.score_keep;
  };

  std::vector<Track> kept;
  kept.reserve(tracks.tracks.size());
  for (Track& t : tracks.tracks) {
    auto it = row_of.find(t.id);
    if (it == row_of.end()) continue;  // slot vanished (should not happen)
    const int r = it->second;
    if (keep_decision(r)) {
      const Box3D& b = dec.boxes[r];
      t.feature = feats.s.row(r);
      t.refpoint = Matrix::from_rows(
          {{b.x + b.vx * p.dt, b.y + b.vy * p.dt, b.z}});
      t.vx = b.vx;
      t.vy = b.vy;
      t.last_score = b.score;
      t.class_label = b.class_label;
      t.misses = 0;
      ++t.age;
      if (row_gt) t.bound_gt = (*row_gt)[r];
      out.emitted_rows.push_back(r);
      out.emitted_ids.push_back(t.id);
      kept.push_back(t);
    } else {
      ++t.misses;
      if (row_gt) t.bound_gt = -1;
      if (t.misses <= p.patience) {
        t.feature = feats.s.row(r);
        t.refpoint.at(0, 0) += t.vx * p.dt;
        t.refpoint.at(0, 1) += t.vy * p.dt;
        ++t.age;
        kept.push_back(t);
      }
    }
  }
  for (int r = 0; r < n; ++r) {
    if (row_track[r] >= 0) continue;
    if (!keep_decision(r)) continue;
    const Box3D& b = dec.boxes[r];
    Track t;
    t.id = next_id++;
    t.feature = feats.s.row(r);
    t.refpoint =
        Matrix::from_rows({{b.x + b.vx * p.dt, b.y + b.vy * p.dt, b.z}});
    t.vx = b.vx;
    t.vy = b.vy;
    t.last_score = b.score;
    t.class_label = b.class_label;
    t.age = 1;
    if (row_gt) t.bound_gt = (*row_gt)[r];
    kept.push_back(t);
    out.emitted_rows.push_back(r);
    out.emitted_ids.push_back(t.id);
    out.spawned.emplace_back(t.id, r);
  }
  tracks.tracks = std::move(kept);
  return out;
}

// ---------------------------------------------------------------------------
// Latency compensation and late fusion.
// ---------------------------------------------------------------------------

/// Advance message reference points by the velocity decoded from each
/// instance's motion feature (sender-side heads); features pass unchanged.
inline V2xMessage compensate_latency(const V2xMessage& msg, double delay,
                                     const AgentModel& sender,
                                     const ParamStore& ps) {
  if (delay < 0) throw std::invalid_argument("compensate_latency: delay < 0");
  if (delay == 0) return msg;
  V2xMessage out = msg;
  for (V2xInstance& inst : out.instances) {
    Matrix reg = sender.reg_head.forward(ps, inst.m_row);
    inst.point.at(0, 0) += reg.at(0, 8) * delay;
    inst.point.at(0, 1) += reg.at(0, 9) * delay;
  }
  return out;
}

/// DAIR-style late fusion: transform infrastructure boxes into the vehicle
/// frame, merge duplicates within a 2 m center gate by Hungarian matching
/// (higher score wins), and return the union.
struct LateFusionBox {
  Box3D box;
  int64_t id;
};

inline std::vector<LateFusionBox> late_fuse_boxes(
    const std::vector<LateFusionBox>& veh,
    const std::vector<LateFusionBox>& infra_in_infra_frame, const Pose& pose,
    double gate = 2.0) {
  std::vector<LateFusionBox> infra;
  infra.reserve(infra_in_infra_frame.size());
  for (const LateFusionBox& b : infra_in_infra_frame)
    infra.push_back({transform_box(b.box, pose), b.id});

  std::vector<bool> veh_drop(veh.size(), false), inf_drop(infra.size(), false);
  if (!veh.empty() && !infra.empty()) {
    Matrix cost(static_cast<int>(veh.size()), static_cast<int>(infra.size()));
    for (int i = 0; i < cost.rows; ++i)
      for (int j = 0; j < cost.cols; ++j)
        cost.at(i, j) = veh[i].box.center_dist_2d(infra[j].box);
    Assignment asg = hungarian(cost);
    for (auto [i, j] : asg.pairs) {
      if (cost.at(i, j) > gate) continue;
      if (veh[i].box.score >= infra[j].box.score)
        inf_drop[j] = true;
      else
        veh_drop[i] = true;
    }
  }
  std::vector<LateFusionBox> out;
  for (size_t i = 0; i < veh.size(); ++i)
    if (!veh_drop[i]) out.push_back(veh[i]);
  for (size_t j = 0; j < infra.size(); ++j)
    if (!inf_drop[j]) out.push_back(infra[j]);
  return out;
}

// ---------------------------------------------------------------------------
// Full tracking step.
// ---------------------------------------------------------------------------

enum class Mode { NoFusion, Coop, LateFusion };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::NoFusion: return "no_fusion";
    case Mode::Coop: return "coop";
    default: return "late_fusion";
  }
}

inline Mode mode_from_name(const std::string& s) {
  if (s == "no_fusion") return Mode::NoFusion;
  if (s == "coop") return Mode::Coop;
  if (s == "late_fusion") return Mode::LateFusion;
  throw std::invalid_argument("unknown mode: " + s);
}

struct FrameOutputBox {
  int frame = 0;
  int64_t id = -1;
  Box3D box;  // vehicle frame, score/class filled
  Provenance tag = Provenance::Vehicle;
};

struct FrameOutput {
  std::vector<FrameOutputBox> boxes;
  size_t message_bytes = 0;
  int n_vehicle_instances = 0;
  int n_message_instances = 0;
  int n_matches = 0;
  double mean_matched_affinity = 0.0;
};

struct RunOptions {
  Mode mode = Mode::Coop;
  int n_fresh = 24;
  double gate_radius = 4.0;
  double score_keep = 0.4;
  double match_threshold = 0.5;
  double transmit_threshold = 0.4;
  int patience = 5;
  int latency_frames = 0;
  bool compensate_latency = false;
  double rot_noise_sigma = 0.0;
  bool rot_noise_global = false;
  bool force_empty_infra = false;
  uint64_t noise_seed = 1234;
};

/// Per-agent stream state carried across frames.
struct AgentState {
  TrackSet tracks;
  HistoryBuffer history;
  int64_t next_id = 0;
  Matrix fresh_grid;

  AgentState() : history(4) {}
  AgentState(int tau, int n_fresh, const double range[4], uint64_t seed,
             int64_t first_id)
      : history(tau), next_id(first_id) {
    fresh_grid = fresh_query_grid(n_fresh, range, seed);
  }
};

/// Everything the cooperative tracker carries between frames.
struct TrackerState {
  AgentState vehicle;
  AgentState infra;
  std::vector<V2xMessage> message_log;  // per frame, for latency replay
};

/// One no-fusion agent pass: queries, MDFE, decode, select, history for new
/// identities. Returns the decoded instances plus per-row ids for emission.
struct AgentFrameResult {
  QuerySet queries;
  MdfeOutput mdfe;
  Decoded decoded;
  SelectionResult selection;
};

inline AgentFrameResult agent_frame(const AgentModel& model,
                                    const ParamStore& ps,
                                    const std::vector<Detection>& dets,
                                    AgentState& state, double gate_radius,
                                    const SelectParams& sel) {
  AgentFrameResult out;
  out.queries = init_queries(state.tracks, state.fresh_grid, model, ps);
  out.mdfe = mdfe_forward(model, ps, dets, out.queries, state.history,
                          gate_radius);
  out.decoded =
      decode_forward(model, ps, out.mdfe.feats, out.queries.refpoints);
  out.selection =
      select_and_propagate(out.decoded, out.queries.track_ids, out.mdfe.feats,
                           state.tracks, state.next_id, sel);
  for (auto [id, row] : out.selection.spawned)
    state.history.push(id, out.mdfe.feats.m.row(row),
                       out.mdfe.feats.s.row(row));
  std::vector<int64_t> active;
  for (const Track& t : state.tracks.tracks) active.push_back(t.id);
  state.history.retain(active);
  return out;
}

/// Builds the outgoing message from an infrastructure frame: every selected
/// instance above the transmit threshold is packed (float32 wire rounding).
inline V2xMessage build_message(const AgentFrameResult& inf_frame,
                                const InstanceFeatures& feats,
                                const Matrix& refpoints,
                                double transmit_threshold) {
  std::vector<int> rows;
  std::vector<double> scores(static_cast<size_t>(feats.n()), 0.0);
  std::vector<int> classes(static_cast<size_t>(feats.n()), 0);
  for (int r = 0; r < feats.n(); ++r) {
    scores[r] = inf_frame.decoded.boxes[r].score;
    classes[r] = inf_frame.decoded.boxes[r].class_label;
  }
  for (size_t k = 0; k < inf_frame.selection.emitted_rows.size(); ++k) {
    const int r = inf_frame.selection.emitted_rows[k];
    if (scores[r] >= transmit_threshold) rows.push_back(r);
  }
  return pack_message(feats, refpoints, scores, classes, rows);
}

/// Optional per-step association diagnostics, used by evaluation code to
/// score association quality against simulator provenance.
struct StepDiagnostics {
  std::vector<int64_t> v_slot_gt;           // per vehicle slot
  std::vector<int64_t> msg_gt;              // per used message instance
  std::vector<std::pair<int, int>> matches; // predicted (slot, instance)
  Matrix pv;                                // vehicle slot reference points
  Matrix pi_veh;                            // message points, vehicle frame
};

/// One cooperative tracking step. Fusion happens strictly after both agents
/// decode: the infrastructure message carries already-extracted features, the
/// vehicle aligns them, associates, aggregates and re-decodes the merged set.
inline FrameOutput tracker_step(const AgentModel& veh_model,
                                const AgentModel& inf_model,
                                const CoopModel& coop, const ParamStore& ps,
                                const std::vector<Detection>& veh_dets,
                                const std::vector<Detection>& inf_dets,
                                const Pose& rel_pose, double dt, int frame,
                                TrackerState& state, const RunOptions& opt,
                                StepDiagnostics* diag = nullptr) {
  FrameOutput out;
  SelectParams sel;
  sel.score_keep = opt.score_keep;
  sel.patience = opt.patience;
  sel.dt = dt;

  // --- vehicle front-end (queries + MDFE), decode deferred to fusion ---
  QuerySet qv = init_queries(state.vehicle.tracks, state.vehicle.fresh_grid,
                             veh_model, ps);
  MdfeOutput mv = mdfe_forward(veh_model, ps, veh_dets, qv,
                               state.vehicle.history, opt.gate_radius);
  out.n_vehicle_instances = qv.n();

  // --- infrastructure subsystem and message ---
  V2xMessage msg;
  msg.d = veh_model.cfg.d;
  if (opt.mode == Mode::Coop) {
    AgentFrameResult inf_frame =
        agent_frame(inf_model, ps, inf_dets, state.infra, opt.gate_radius,
                    sel);
    V2xMessage fresh_msg;
    if (!opt.force_empty_infra) {
      QuerySet& qi = inf_frame.queries;
      fresh_msg = build_message(inf_frame, inf_frame.mdfe.feats, qi.refpoints,
                                opt.transmit_threshold);
      for (V2xInstance& inst : fresh_msg.instances) {
        const int dj = inf_frame.mdfe.det_for_slot[inst.sender_row];
        if (dj >= 0) inst.gt_hint = inf_dets[dj].gt_id;
      }
    } else {
      fresh_msg.d = veh_model.cfg.d;
    }
    state.message_log.push_back(fresh_msg);
    const int src = frame - opt.latency_frames;
    if (src >= 0) msg = state.message_log[src];
    if (opt.compensate_latency && opt.latency_frames > 0 && msg.count() > 0)
      msg = compensate_latency(msg, opt.latency_frames * dt, inf_model, ps);
    out.message_bytes = serialize_message(fresh_msg).size();
    out.n_message_instances = msg.count();
  }

  // --- cross-agent alignment, association, aggregation ---
  Pose pose_for_caa = rel_pose;
  Pose pose_for_space = rel_pose;
  if (opt.rot_noise_sigma > 0) {
    Rng nrng(derive_seed(opt.noise_seed, "rotnoise",
                         static_cast<uint64_t>(frame)));
    Matrix noisy = perturb_rotation(rel_pose.r, opt.rot_noise_sigma, nrng);
    pose_for_caa.r = noisy;
    if (opt.rot_noise_global) pose_for_space.r = noisy;
  }

  InstanceFeatures fused = mv.feats;
  Matrix fused_points = qv.refpoints;
  std::vector<Provenance> tags(static_cast<size_t>(qv.n()),
                               Provenance::Vehicle);
  std::vector<int64_t> row_track = qv.track_ids;
  std::vector<int> row_msg_class(static_cast<size_t>(qv.n()), -1);

  if (opt.mode == Mode::Coop && msg.count() > 0) {
    const int ni = msg.count();
    InstanceFeatures inf_feats;
    inf_feats.m = Matrix(ni, msg.d);
    inf_feats.s = Matrix(ni, msg.d);
    Matrix inf_points(ni, 3);
    for (int j = 0; j < ni; ++j) {
      inf_feats.m.set_row(j, msg.instances[j].m_row);
      inf_feats.s.set_row(j, msg.instances[j].s_row);
      for (int c = 0; c < 3; ++c)
        inf_points.at(j, c) = msg.instances[j].point.at(0, c);
    }
    Matrix code = encode_pose(pose_for_caa);
    LatentTransform tf_m = predict_latent_transform(
        ps, coop.caa_rot_m, coop.caa_trans_m, code, coop.cfg.d,
        coop.cfg.block);
    LatentTransform tf_s = predict_latent_transform(
        ps, coop.caa_rot_s, coop.caa_trans_s, code, coop.cfg.d,
        coop.cfg.block);
    InstanceFeatures aligned;
    aligned.m = caa_align(inf_feats.m, tf_m);
    aligned.s = caa_align(inf_feats.s, tf_s);
    Matrix pi_veh = spatial_transform(inf_points, pose_for_space);

    AffinityMatrix aff = gba_affinity(coop, ps, mv.feats, aligned,
                                      qv.refpoints, pi_veh);
    MatchSet ms = match(aff, opt.match_threshold);
    out.n_matches = static_cast<int>(ms.pairs.size());
    for (const auto& pr : ms.pairs) out.mean_matched_affinity += pr.affinity;
    if (out.n_matches > 0) out.mean_matched_affinity /= out.n_matches;
    if (diag) {
      diag->v_slot_gt.assign(static_cast<size_t>(qv.n()), -1);
      for (int r = 0; r < qv.n(); ++r)
        if (mv.det_for_slot[r] >= 0)
          diag->v_slot_gt[r] = veh_dets[mv.det_for_slot[r]].gt_id;
      diag->msg_gt.clear();
      for (const V2xInstance& inst : msg.instances)
        diag->msg_gt.push_back(inst.gt_hint);
      diag->matches.clear();
      for (const auto& pr : ms.pairs) diag->matches.emplace_back(pr.v, pr.i);
      diag->pv = qv.refpoints;
      diag->pi_veh = pi_veh;
    }

    AggregateResult agg = aggregate(coop, ps, ms, mv.feats, aligned,
                                    qv.refpoints, pi_veh);
    fused = agg.feats;
    fused_points = agg.refpoints;
    tags = agg.tags;
    row_track.assign(static_cast<size_t>(fused.n()), -1);
    row_msg_class.assign(static_cast<size_t>(fused.n()), -1);
    for (int r = 0; r < fused.n(); ++r) {
      if (agg.src_v[r] >= 0) row_track[r] = qv.track_ids[agg.src_v[r]];
      if (agg.src_i[r] >= 0)
        row_msg_class[r] = msg.instances[agg.src_i[r]].class_label;
    }
  }

  // --- decode the merged set with vehicle heads and manage identities ---
  Decoded dec = decode_forward(veh_model, ps, fused, fused_points);
  SelectionResult selr =
      select_and_propagate(dec, row_track, fused, state.vehicle.tracks,
                           state.vehicle.next_id, sel);
  for (auto [id, row] : selr.spawned)
    state.vehicle.history.push(id, fused.m.row(row), fused.s.row(row));
  std::vector<int64_t> active;
  for (const Track& t : state.vehicle.tracks.tracks) active.push_back(t.id);
  state.vehicle.history.retain(active);

  for (size_t k = 0; k < selr.emitted_rows.size(); ++k) {
    const int r = selr.emitted_rows[k];
    FrameOutputBox fb;
    fb.frame = frame;
    fb.id = selr.emitted_ids[k];
    fb.box = dec.boxes[r];
    fb.tag = tags[r];
    out.boxes.push_back(fb);
  }
  return out;
}

}  // namespace cotrack
