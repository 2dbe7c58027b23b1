#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cotrack/scene.hpp"
#include "cotrack/tracker.hpp"

namespace cotrack {

struct GtBox {
  int64_t id = -1;
  Box3D box;
};

/// Union of both agents' observable ground truth, expressed in the vehicle
/// frame, deduplicated by track id.
inline std::vector<GtBox> cooperative_gt(const AgentObservation& veh_obs,
                                         const AgentObservation& inf_obs,
                                         const Pose& rel_pose) {
  std::vector<GtBox> out;
  std::unordered_map<int64_t, bool> seen;
  for (size_t i = 0; i < veh_obs.observable_ids.size(); ++i) {
    out.push_back({veh_obs.observable_ids[i], veh_obs.observable_gt[i]});
    seen[veh_obs.observable_ids[i]] = true;
  }
  for (size_t i = 0; i < inf_obs.observable_ids.size(); ++i) {
    if (seen.count(inf_obs.observable_ids[i])) continue;
    out.push_back({inf_obs.observable_ids[i],
                   transform_box(inf_obs.observable_gt[i], rel_pose)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Supervision matching.
// ---------------------------------------------------------------------------

struct GtMatch {
  std::vector<int64_t> row_gt;  // matched gt id per row, -1 = background
  std::vector<int> row_gt_idx;  // index into the gt list, -1 = background
  int matched = 0;
};

/// Track slots keep their previous ground-truth binding while that identity
/// is still present; remaining rows are Hungarian-matched to unclaimed ground
/// truth on mean-L1 attribute cost, gated by center distance.
inline GtMatch gt_match(const Decoded& dec, const Matrix& refpoints,
                        const std::vector<int64_t>& prior_binding,
                        const std::vector<GtBox>& gt, double gate = 2.0) {
  const int n = dec.n();
  GtMatch out;
  out.row_gt.assign(n, -1);
  out.row_gt_idx.assign(n, -1);
  std::unordered_map<int64_t, int> gt_idx;
  for (size_t g = 0; g < gt.size(); ++g)
    gt_idx[gt[g].id] = static_cast<int>(g);
  std::vector<bool> gt_used(gt.size(), false);

  for (int r = 0; r < n; ++r) {
    const int64_t prior = prior_binding[r];
    if (prior < 0) continue;
    auto it = gt_idx.find(prior);
    if (it == gt_idx.end() || gt_used[it->second]) continue;
    out.row_gt[r] = prior;
    out.row_gt_idx[r] = it->second;
    gt_used[it->second] = true;
    ++out.matched;
  }

  std::vector<int> free_rows;
  for (int r = 0; r < n; ++r)
    if (out.row_gt[r] < 0) free_rows.push_back(r);
  std::vector<int> free_gt;
  for (size_t g = 0; g < gt.size(); ++g)
    if (!gt_used[g]) free_gt.push_back(static_cast<int>(g));
  if (!free_rows.empty() && !free_gt.empty()) {
    const double kInfCost = 1e6;
    Matrix cost(static_cast<int>(free_rows.size()),
                static_cast<int>(free_gt.size()));
    for (int a = 0; a < cost.rows; ++a)
      for (int b = 0; b < cost.cols; ++b) {
        const Box3D& gb = gt[free_gt[b]].box;
        Matrix pred = decoded_attributes(dec.reg_out, refpoints, free_rows[a]);
        const double cd = std::hypot(pred.at(0, 0) - gb.x,
                                     pred.at(0, 1) - gb.y);
        cost.at(a, b) =
            cd > gate ? kInfCost : l1_loss(pred, gb.attributes());
      }
    Assignment asg = hungarian(cost);
    for (auto [a, b] : asg.pairs) {
      if (cost.at(a, b) >= kInfCost) continue;
      out.row_gt[free_rows[a]] = gt[free_gt[b]].id;
      out.row_gt_idx[free_rows[a]] = free_gt[b];
      ++out.matched;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Association labels (stage 2).
// ---------------------------------------------------------------------------

struct AssociationLabels {
  Matrix labels;              // N_V x N_I, entries {0,1}
  std::vector<int64_t> v_gt;  // per vehicle instance
  std::vector<int64_t> i_gt;  // per infrastructure instance
};

namespace detail {

inline std::vector<int64_t> match_side_to_gt(
    const std::vector<Matrix>& attrs, const std::vector<GtBox>& gt,
    double gate) {
  std::vector<int64_t> out(attrs.size(), -1);
  if (attrs.empty() || gt.empty()) return out;
  const double kInfCost = 1e6;
  Matrix cost(static_cast<int>(attrs.size()), static_cast<int>(gt.size()));
  for (int a = 0; a < cost.rows; ++a)
    for (int b = 0; b < cost.cols; ++b) {
      const double cd = std::hypot(attrs[a].at(0, 0) - gt[b].box.x,
                                   attrs[a].at(0, 1) - gt[b].box.y);
      cost.at(a, b) =
          cd > gate ? kInfCost : l1_loss(attrs[a], gt[b].box.attributes());
    }
  Assignment asg = hungarian(cost);
  for (auto [a, b] : asg.pairs)
    if (cost.at(a, b) < kInfCost) out[a] = gt[b].id;
  return out;
}

}  // namespace detail

/// Both agents' predictions are Hungarian-matched to ground truth on L1
/// attribute cost (2 m center gate); a cell is positive exactly when both
/// sides matched the same identity, and negative otherwise.
inline AssociationLabels gen_assoc_labels(
    const std::vector<Matrix>& veh_attrs,
    const std::vector<Matrix>& inf_attrs_vehicle_frame,
    const std::vector<GtBox>& gt, double gate = 2.0) {
  AssociationLabels out;
  out.v_gt = detail::match_side_to_gt(veh_attrs, gt, gate);
  out.i_gt = detail::match_side_to_gt(inf_attrs_vehicle_frame, gt, gate);
  out.labels = Matrix(static_cast<int>(veh_attrs.size()),
                      static_cast<int>(inf_attrs_vehicle_frame.size()));
  for (int i = 0; i < out.labels.rows; ++i)
    for (int j = 0; j < out.labels.cols; ++j)
      out.labels.at(i, j) =
          (out.v_gt[i] >= 0 && out.v_gt[i] == out.i_gt[j]) ? 1.0 : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

struct LossWeights {
  double bbx = 0.25;
  double cls = 2.0;
  double asso = 10.0;
  double cls_alpha = 0.25, cls_gamma = 2.0;
  double asso_alpha = 0.5, asso_gamma = 1.0;
};

struct LossReport {
  double l_bbx = 0.0;
  double l_cls = 0.0;
  double l_asso = 0.0;
  double total = 0.0;
  int matched = 0;
  int box_rows = 0;

  void finish(const LossWeights& w) {
    total = w.bbx * l_bbx + w.cls * l_cls + w.asso * l_asso;
  }
};

/// Box L1 + class focal losses over one decoded set, with gradients in
/// attribute/probability space. Box loss covers matched rows flagged
/// box-eligible; classification covers every row and class.
struct DetectionLoss {
  LossReport report;
  Matrix d_attr;   // N x 10
  Matrix d_probs;  // N x C
};

inline DetectionLoss detection_loss(const Decoded& dec, const Matrix& refpoints,
                                    const GtMatch& match,
                                    const std::vector<GtBox>& gt,
                                    const std::vector<bool>& box_eligible,
                                    const LossWeights& w) {
  const int n = dec.n();
  const int n_classes = dec.probs.cols;
  DetectionLoss out;
  out.d_attr = Matrix(n, 10);
  out.d_probs = Matrix(n, n_classes);

  int n_pos = 0, n_box = 0;
  for (int r = 0; r < n; ++r) {
    if (match.row_gt_idx[r] >= 0) ++n_pos;
    if (match.row_gt_idx[r] >= 0 && box_eligible[r]) ++n_box;
  }
  const double box_norm = 1.0 / std::max(1, n_box);
  const double cls_norm = 1.0 / std::max(1, n_pos);
  out.report.matched = n_pos;
  out.report.box_rows = n_box;

  for (int r = 0; r < n; ++r) {
    const int g = match.row_gt_idx[r];
    if (g >= 0 && box_eligible[r]) {
      Matrix pred = decoded_attributes(dec.reg_out, refpoints, r);
      Matrix target = gt[g].box.attributes();
      out.report.l_bbx += l1_loss(pred, target) * box_norm;
      Matrix dl = l1_loss_grad(pred, target);
      for (int c = 0; c < 10; ++c)
        out.d_attr.at(r, c) = dl.at(0, c) * box_norm * w.bbx;
    }
    for (int c = 0; c < n_classes; ++c) {
      const int target = (g >= 0 && gt[g].box.class_label == c) ? 1 : 0;
      const double p = dec.probs.at(r, c);
      out.report.l_cls +=
          focal_loss(p, target, w.cls_alpha, w.cls_gamma) * cls_norm;
      out.d_probs.at(r, c) =
          focal_loss_grad(p, target, w.cls_alpha, w.cls_gamma) * cls_norm *
          w.cls;
    }
  }
  return out;
}

struct AssociationLoss {
  double value = 0.0;
  Matrix da;  // N_V x N_I gradient on the affinity matrix (weighted)
};

inline AssociationLoss association_loss(const Matrix& a, const Matrix& labels,
                                        const LossWeights& w) {
  AssociationLoss out;
  out.da = Matrix(a.rows, a.cols);
  if (a.empty()) return out;
  const double norm = 1.0 / static_cast<double>(a.rows * a.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) {
      const int t = labels.at(i, j) > 0.5 ? 1 : 0;
      out.value +=
          focal_loss(a.at(i, j), t, w.asso_alpha, w.asso_gamma) * norm;
      out.da.at(i, j) =
          focal_loss_grad(a.at(i, j), t, w.asso_alpha, w.asso_gamma) * norm *
          w.asso;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Trainers.
// ---------------------------------------------------------------------------

struct TrainParams {
  int epochs = 10;
  double base_lr = 2e-4;
  double weight_decay = 0.01;
  LossWeights weights;
  double gate_radius = 4.0;
  double gt_gate = 2.0;
  int n_fresh = 24;
  double score_keep = 0.4;
  int patience = 5;
  double transmit_threshold = 0.4;
  double match_threshold = 0.5;
  bool freeze_stage1 = false;
  uint64_t seed = 1;
};

struct StepLog {
  int64_t step = 0;
  double lr = 0.0;
  double l_bbx = 0.0, l_cls = 0.0, l_asso = 0.0, total = 0.0;
};

using StepCallback = std::function<void(const StepLog&)>;

namespace detail {

inline void check_finite_loss(double total) {
  if (!std::isfinite(total))
    throw std::runtime_error("training diverged: non-finite loss");
}

inline std::vector<int> epoch_order(int n, Rng& rng) {
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = rng.uniform_int(0, i);
    std::swap(order[i], order[j]);
  }
  return order;
}

/// Scatter per-row query-feature gradients: fresh rows accumulate into the
/// learned initial feature; track rows are detached.
inline void route_query_grads(const AgentModel& model, ParamStore& ps,
                              const QuerySet& q, const Matrix& dq) {
  Matrix& g = ps.grad(model.query_init);
  for (int r = 0; r < q.n(); ++r)
    if (q.track_ids[r] < 0)
      for (int c = 0; c < dq.cols; ++c) g.at(0, c) += dq.at(r, c);
}

inline std::vector<int64_t> prior_bindings(const QuerySet& q,
                                           TrackSet& tracks) {
  std::vector<int64_t> out(q.n(), -1);
  for (int r = 0; r < q.n(); ++r) {
    if (q.track_ids[r] < 0) continue;
    Track* t = tracks.find(q.track_ids[r]);
    if (t) out[r] = t->bound_gt;
  }
  return out;
}

}  // namespace detail

/// Stage 1: streaming per-frame optimization of a single agent against its
/// own observable ground truth. State (tracks, history) carries across
/// frames as values; gradients never cross a frame boundary.
inline void stage1_train(ParamStore& ps, const AgentModel& model,
                         AgentKind kind,
                         const std::vector<Scenario>& scenarios,
                         const TrainParams& tp,
                         const StepCallback& on_step = nullptr) {
  if (scenarios.empty())
    throw std::invalid_argument("stage1_train: no scenarios");
  int64_t frames_per_epoch = 0;
  for (const Scenario& sc : scenarios) frames_per_epoch += sc.frames;
  const int64_t total_steps = frames_per_epoch * tp.epochs;
  Rng order_rng(derive_seed(tp.seed, "stage1-order",
                            kind == AgentKind::Vehicle ? 0 : 1));
  SelectParams sel;
  sel.training = true;
  sel.score_keep = tp.score_keep;
  sel.patience = tp.patience;

  for (int epoch = 0; epoch < tp.epochs; ++epoch) {
    const std::vector<int> order =
        detail::epoch_order(static_cast<int>(scenarios.size()), order_rng);
    for (int si : order) {
      const Scenario& sc = scenarios[si];
      sel.dt = 1.0 / sc.spec.frame_rate;
      const AgentConfig& acfg = sc.agent(kind);
      AgentState state(model.cfg.tau, tp.n_fresh, acfg.range,
                       derive_seed(sc.seed, "stream", int(kind)), 0);
      for (int t = 0; t < sc.frames; ++t) {
        AgentObservation obs = observe(sc, kind, t);
        std::vector<GtBox> gt;
        for (size_t i = 0; i < obs.observable_ids.size(); ++i)
          gt.push_back({obs.observable_ids[i], obs.observable_gt[i]});

        QuerySet q = init_queries(state.tracks, state.fresh_grid, model, ps);
        MdfeCache mcache;
        MdfeOutput mdfe = mdfe_forward(model, ps, obs.detections, q,
                                       state.history, tp.gate_radius, &mcache);
        DecodeCache dcache;
        Decoded dec =
            decode_forward(model, ps, mdfe.feats, q.refpoints, &dcache);

        const std::vector<int64_t> prior =
            detail::prior_bindings(q, state.tracks);
        GtMatch gm = gt_match(dec, q.refpoints, prior, gt, tp.gt_gate);
        std::vector<bool> box_ok(q.n(), false);
        for (int r = 0; r < q.n(); ++r)
          box_ok[r] = mdfe.det_for_slot[r] >= 0;
        DetectionLoss dl = detection_loss(dec, q.refpoints, gm, gt, box_ok,
                                          tp.weights);
        dl.report.finish(tp.weights);
        detail::check_finite_loss(dl.report.total);

        ps.zero_grads();
        DecodeGrads dg = decode_backward(model, ps, dcache, dl.d_attr,
                                         dl.d_probs);
        MdfeGrads mg = mdfe_backward(model, ps, mcache, dg.dm, dg.ds);
        detail::route_query_grads(model, ps, q, mg.d_query_features);
        const double lr = cosine_lr(std::min(ps.step_count(), total_steps - 1),
                                    total_steps, tp.base_lr);
        ps.adamw_step(lr, tp.weight_decay);

        SelectionResult sr = select_and_propagate(
            dec, q.track_ids, mdfe.feats, state.tracks, state.next_id, sel,
            &gm.row_gt);
        for (auto [id, row] : sr.spawned)
          state.history.push(id, mdfe.feats.m.row(row),
                             mdfe.feats.s.row(row));
        std::vector<int64_t> active;
        for (const Track& tr : state.tracks.tracks) active.push_back(tr.id);
        state.history.retain(active);

        if (on_step)
          on_step({ps.step_count(), lr, dl.report.l_bbx, dl.report.l_cls, 0.0,
                   dl.report.total});
      }
    }
  }
}

/// Stage 2: joint cooperative training. The vehicle pipeline runs through
/// alignment, association, aggregation and the fused decode; the
/// infrastructure subsystem tracks on its own (score-driven, as at inference)
/// and transmits; gradients flow back over the wire into both agents.
inline void stage2_train(ParamStore& ps, const AgentModel& veh,
                         const AgentModel& inf, const CoopModel& coop,
                         const std::vector<Scenario>& scenarios,
                         const TrainParams& tp,
                         const StepCallback& on_step = nullptr) {
  if (scenarios.empty())
    throw std::invalid_argument("stage2_train: no scenarios");
  int64_t frames_per_epoch = 0;
  for (const Scenario& sc : scenarios) frames_per_epoch += sc.frames;
  const int64_t total_steps = frames_per_epoch * tp.epochs;
  const int64_t step_offset = ps.step_count();
  Rng order_rng(derive_seed(tp.seed, "stage2-order"));
  std::vector<std::string> freeze;
  if (tp.freeze_stage1) freeze = {veh.prefix + ".", inf.prefix + "."};

  SelectParams veh_sel;
  veh_sel.training = true;
  veh_sel.score_keep = tp.score_keep;
  veh_sel.patience = tp.patience;
  SelectParams inf_sel;  // inference-style selection on the sender
  inf_sel.training = false;
  inf_sel.score_keep = tp.score_keep;
  inf_sel.patience = tp.patience;

  for (int epoch = 0; epoch < tp.epochs; ++epoch) {
    const std::vector<int> order =
        detail::epoch_order(static_cast<int>(scenarios.size()), order_rng);
    for (int si : order) {
      const Scenario& sc = scenarios[si];
      veh_sel.dt = inf_sel.dt = 1.0 / sc.spec.frame_rate;
      TrackerState state;
      state.vehicle = AgentState(veh.cfg.tau, tp.n_fresh, sc.vehicle.range,
                                 derive_seed(sc.seed, "stream", 0), 0);
      state.infra = AgentState(inf.cfg.tau, tp.n_fresh, sc.infra.range,
                               derive_seed(sc.seed, "stream", 1), 0);
      for (int t = 0; t < sc.frames; ++t) {
        AgentObservation veh_obs = observe(sc, AgentKind::Vehicle, t);
        AgentObservation inf_obs = observe(sc, AgentKind::Infrastructure, t);
        const Pose& rel = sc.rel_pose[t];

        // vehicle front-end
        QuerySet qv = init_queries(state.vehicle.tracks,
                                   state.vehicle.fresh_grid, veh, ps);
        MdfeCache v_mcache;
        MdfeOutput mv = mdfe_forward(veh, ps, veh_obs.detections, qv,
                                     state.vehicle.history, tp.gate_radius,
                                     &v_mcache);

        // infrastructure subsystem: full own-frame pass
        QuerySet qi = init_queries(state.infra.tracks, state.infra.fresh_grid,
                                   inf, ps);
        MdfeCache i_mcache;
        MdfeOutput mi = mdfe_forward(inf, ps, inf_obs.detections, qi,
                                     state.infra.history, tp.gate_radius,
                                     &i_mcache);
        Decoded dec_i = decode_forward(inf, ps, mi.feats, qi.refpoints);
        SelectionResult sr_i = select_and_propagate(
            dec_i, qi.track_ids, mi.feats, state.infra.tracks,
            state.infra.next_id, inf_sel);
        for (auto [id, row] : sr_i.spawned)
          state.infra.history.push(id, mi.feats.m.row(row),
                                   mi.feats.s.row(row));
        std::vector<int64_t> inf_active;
        for (const Track& tr : state.infra.tracks.tracks)
          inf_active.push_back(tr.id);
        state.infra.history.retain(inf_active);

        // message (float32 wire rounding; straight-through in backward)
        std::vector<int> tx_rows;
        for (size_t k = 0; k < sr_i.emitted_rows.size(); ++k) {
          const int r = sr_i.emitted_rows[k];
          if (dec_i.boxes[r].score >= tp.transmit_threshold)
            tx_rows.push_back(r);
        }
        std::vector<double> scores(qi.n());
        std::vector<int> classes(qi.n());
        for (int r = 0; r < qi.n(); ++r) {
          scores[r] = dec_i.boxes[r].score;
          classes[r] = dec_i.boxes[r].class_label;
        }
        V2xMessage msg =
            pack_message(mi.feats, qi.refpoints, scores, classes, tx_rows);
        const int ni = msg.count();

        // cross-agent pipeline
        InstanceFeatures wire;
        wire.m = Matrix(ni, veh.cfg.d);
        wire.s = Matrix(ni, veh.cfg.d);
        Matrix wire_points(ni, 3);
        for (int j = 0; j < ni; ++j) {
          wire.m.set_row(j, msg.instances[j].m_row);
          wire.s.set_row(j, msg.instances[j].s_row);
          for (int c = 0; c < 3; ++c)
            wire_points.at(j, c) = msg.instances[j].point.at(0, c);
        }
        Matrix code = encode_pose(rel);
        LatentTransformCache tc_m, tc_s;
        LatentTransform tf_m = predict_latent_transform(
            ps, coop.caa_rot_m, coop.caa_trans_m, code, coop.cfg.d,
            coop.cfg.block, &tc_m);
        LatentTransform tf_s = predict_latent_transform(
            ps, coop.caa_rot_s, coop.caa_trans_s, code, coop.cfg.d,
            coop.cfg.block, &tc_s);
        InstanceFeatures aligned;
        aligned.m = caa_align(wire.m, tf_m);
        aligned.s = caa_align(wire.s, tf_s);
        Matrix pi_veh = spatial_transform(wire_points, rel);

        GbaCache gba_cache;
        AffinityMatrix aff = gba_affinity(coop, ps, mv.feats, aligned,
                                          qv.refpoints, pi_veh, &gba_cache);
        MatchSet ms = match(aff, tp.match_threshold);
        AggregateCache agg_cache;
        AggregateResult agg = aggregate(coop, ps, ms, mv.feats, aligned,
                                        qv.refpoints, pi_veh, &agg_cache);

        DecodeCache dcache;
        Decoded dec = decode_forward(veh, ps, agg.feats, agg.refpoints,
                                     &dcache);

        // labels and losses
        std::vector<GtBox> gt = cooperative_gt(veh_obs, inf_obs, rel);
        std::vector<Matrix> veh_attrs(qv.n());
        {
          Decoded dec_v_pre =
              decode_forward(veh, ps, mv.feats, qv.refpoints);
          for (int r = 0; r < qv.n(); ++r)
            veh_attrs[r] =
                decoded_attributes(dec_v_pre.reg_out, qv.refpoints, r);
        }
        std::vector<Matrix> inf_attrs(ni);
        for (int j = 0; j < ni; ++j) {
          const int r = msg.instances[j].sender_row;
          Box3D b = dec_i.boxes[r];
          inf_attrs[j] = transform_box(b, rel).attributes();
        }
        AssociationLabels labels = gen_assoc_labels(veh_attrs, inf_attrs, gt,
                                                    tp.gt_gate);
        AssociationLoss al = association_loss(aff.a, labels.labels,
                                              tp.weights);

        std::vector<int64_t> row_track(agg.feats.n(), -1);
        std::vector<int64_t> prior(agg.feats.n(), -1);
        std::vector<bool> box_ok(agg.feats.n(), false);
        for (int r = 0; r < agg.feats.n(); ++r) {
          if (agg.src_v[r] >= 0) {
            row_track[r] = qv.track_ids[agg.src_v[r]];
            if (row_track[r] >= 0) {
              Track* tr = state.vehicle.tracks.find(row_track[r]);
              if (tr) prior[r] = tr->bound_gt;
            }
          }
          const bool veh_bound =
              agg.src_v[r] >= 0 && mv.det_for_slot[agg.src_v[r]] >= 0;
          box_ok[r] = veh_bound || agg.tags[r] != Provenance::Vehicle;
        }
        GtMatch gm = gt_match(dec, agg.refpoints, prior, gt, tp.gt_gate);
        DetectionLoss dl = detection_loss(dec, agg.refpoints, gm, gt, box_ok,
                                          tp.weights);
        dl.report.l_asso = al.value;
        dl.report.finish(tp.weights);
        detail::check_finite_loss(dl.report.total);

        // backward
        ps.zero_grads();
        DecodeGrads dg = decode_backward(veh, ps, dcache, dl.d_attr,
                                         dl.d_probs);
        AggregateGrads ag = aggregate_backward(coop, ps, ms, agg, agg_cache,
                                               qv.n(), ni, dg.dm, dg.ds);
        GbaGrads gg = gba_backward(coop, ps, gba_cache, al.da);
        add_inplace(ag.dm_v, gg.dm_v);
        add_inplace(ag.ds_v, gg.ds_v);
        add_inplace(ag.dm_i, gg.dm_i);
        add_inplace(ag.ds_i, gg.ds_i);
        Matrix d_wire_m = caa_align_backward(ps, coop.caa_rot_m,
                                             coop.caa_trans_m, tc_m, tf_m,
                                             wire.m, ag.dm_i);
        Matrix d_wire_s = caa_align_backward(ps, coop.caa_rot_s,
                                             coop.caa_trans_s, tc_s, tf_s,
                                             wire.s, ag.ds_i);
        // scatter wire gradients back onto the sender's instance rows
        Matrix dmi(qi.n(), inf.cfg.d), dsi(qi.n(), inf.cfg.d);
        for (int j = 0; j < ni; ++j) {
          const int r = msg.instances[j].sender_row;
          for (int c = 0; c < inf.cfg.d; ++c) {
            dmi.at(r, c) += d_wire_m.at(j, c);
            dsi.at(r, c) += d_wire_s.at(j, c);
          }
        }
        MdfeGrads vg = mdfe_backward(veh, ps, v_mcache, ag.dm_v, ag.ds_v);
        detail::route_query_grads(veh, ps, qv, vg.d_query_features);
        MdfeGrads ig = mdfe_backward(inf, ps, i_mcache, dmi, dsi);
        detail::route_query_grads(inf, ps, qi, ig.d_query_features);

        const double lr = cosine_lr(
            std::min(ps.step_count() - step_offset, total_steps - 1),
            total_steps, tp.base_lr);
        ps.adamw_step(lr, tp.weight_decay, 0.9, 0.999, 1e-8, freeze);

        // vehicle selection driven by supervision bindings
        SelectionResult sr = select_and_propagate(
            dec, row_track, agg.feats, state.vehicle.tracks,
            state.vehicle.next_id, veh_sel, &gm.row_gt);
        for (auto [id, row] : sr.spawned)
          state.vehicle.history.push(id, agg.feats.m.row(row),
                                     agg.feats.s.row(row));
        std::vector<int64_t> active;
        for (const Track& tr : state.vehicle.tracks.tracks)
          active.push_back(tr.id);
        state.vehicle.history.retain(active);

        if (on_step)
          on_step({ps.step_count(), lr, dl.report.l_bbx, dl.report.l_cls,
                   dl.report.l_asso, dl.report.total});
      }
    }
  }
}

}  // namespace cotrack
