#pragma once

#include <string>
#include <vector>

#include "cotrack/config.hpp"
#include "cotrack/metrics.hpp"
#include "cotrack/tracker.hpp"
#include "cotrack/training.hpp"

namespace cotrack {

/// The three parameter groups of the full system in one store.
struct ModelBundle {
  ParamStore ps;
  AgentModel veh;
  AgentModel inf;
  CoopModel coop;

  void build(const ModelConfig& mc, uint64_t init_seed) {
    Rng rng(derive_seed(init_seed, "model-init"));
    veh.init(ps, "veh", mc, rng);
    inf.init(ps, "inf", mc, rng);
    coop.init(ps, mc, rng, "coop");
  }
};

inline std::vector<Scenario> make_scenarios(const Config& cfg, int count,
                                            uint64_t split_tag) {
  std::vector<Scenario> out;
  out.reserve(count);
  const ScenarioSpec spec = cfg.scenario_spec();
  for (int i = 0; i < count; ++i)
    out.push_back(generate_scenario(
        spec, derive_seed(cfg.seed, "scenario", split_tag * 100000 + i)));
  return out;
}

inline std::vector<Scenario> train_scenarios(const Config& cfg) {
  return make_scenarios(cfg, cfg.n_train_scenarios, 1);
}

inline std::vector<Scenario> eval_scenarios(const Config& cfg) {
  return make_scenarios(cfg, cfg.n_eval_scenarios, 2);
}

// ---------------------------------------------------------------------------
// Scenario runs.
// ---------------------------------------------------------------------------

struct AssocFrame {
  std::vector<int64_t> v_gt;
  std::vector<int64_t> i_gt;
  std::vector<std::pair<int, int>> predicted;
  Matrix pv, pi;
};

struct ScenarioRunResult {
  std::vector<FrameOutput> frames;
  std::vector<size_t> message_bytes;
  std::vector<AssocFrame> assoc;
};

/// Runs the cooperative (or no-fusion) tracker over one scenario.
inline ScenarioRunResult run_scenario(ModelBundle& mb, const Scenario& sc,
                                      const RunOptions& opt,
                                      bool collect_assoc = false) {
  ScenarioRunResult out;
  const double dt = 1.0 / sc.spec.frame_rate;
  TrackerState state;
  state.vehicle = AgentState(mb.veh.cfg.tau, opt.n_fresh, sc.vehicle.range,
                             derive_seed(sc.seed, "stream", 0), 0);
  state.infra = AgentState(mb.inf.cfg.tau, opt.n_fresh, sc.infra.range,
                           derive_seed(sc.seed, "stream", 1), 0);
  for (int t = 0; t < sc.frames; ++t) {
    AgentObservation veh_obs = observe(sc, AgentKind::Vehicle, t);
    AgentObservation inf_obs = observe(sc, AgentKind::Infrastructure, t);
    StepDiagnostics diag;
    FrameOutput fo = tracker_step(
        mb.veh, mb.inf, mb.coop, mb.ps, veh_obs.detections,
        inf_obs.detections, sc.rel_pose[t], dt, t, state, opt,
        collect_assoc ? &diag : nullptr);
    if (opt.mode == Mode::Coop) out.message_bytes.push_back(fo.message_bytes);
    if (collect_assoc) {
      AssocFrame af;
      af.v_gt = std::move(diag.v_slot_gt);
      af.i_gt = std::move(diag.msg_gt);
      af.predicted = std::move(diag.matches);
      af.pv = std::move(diag.pv);
      af.pi = std::move(diag.pi_veh);
      out.assoc.push_back(std::move(af));
    }
    out.frames.push_back(std::move(fo));
  }
  return out;
}

/// Late-fusion baseline: both agents track independently; infrastructure
/// boxes are transformed into the vehicle frame and duplicate pairs within a
/// 2 m gate merge, keeping the higher score. Transmission carries boxes only.
inline ScenarioRunResult run_scenario_late_fusion(ModelBundle& mb,
                                                  const Scenario& sc,
                                                  const RunOptions& opt) {
  ScenarioRunResult out;
  const double dt = 1.0 / sc.spec.frame_rate;
  AgentState veh_state(mb.veh.cfg.tau, opt.n_fresh, sc.vehicle.range,
                       derive_seed(sc.seed, "stream", 0), 0);
  AgentState inf_state(mb.inf.cfg.tau, opt.n_fresh, sc.infra.range,
                       derive_seed(sc.seed, "stream", 1), 0);
  SelectParams sel;
  sel.score_keep = opt.score_keep;
  sel.patience = opt.patience;
  sel.dt = dt;
  constexpr int64_t kInfraIdOffset = 1000000;
  // wire cost per transmitted box: 9 f32 values + f32 score + u8 class
  constexpr size_t kBoxBytes = 9 * 4 + 4 + 1;
  for (int t = 0; t < sc.frames; ++t) {
    AgentObservation veh_obs = observe(sc, AgentKind::Vehicle, t);
    AgentObservation inf_obs = observe(sc, AgentKind::Infrastructure, t);
    AgentFrameResult vf = agent_frame(mb.veh, mb.ps, veh_obs.detections,
                                      veh_state, opt.gate_radius, sel);
    AgentFrameResult nf = agent_frame(mb.inf, mb.ps, inf_obs.detections,
                                      inf_state, opt.gate_radius, sel);
    std::vector<LateFusionBox> veh_boxes, inf_boxes;
    for (size_t k = 0; k < vf.selection.emitted_rows.size(); ++k)
      veh_boxes.push_back({vf.decoded.boxes[vf.selection.emitted_rows[k]],
                           vf.selection.emitted_ids[k]});
    for (size_t k = 0; k < nf.selection.emitted_rows.size(); ++k)
      inf_boxes.push_back({nf.decoded.boxes[nf.selection.emitted_rows[k]],
                           nf.selection.emitted_ids[k] + kInfraIdOffset});
    std::vector<LateFusionBox> merged =
        late_fuse_boxes(veh_boxes, inf_boxes, sc.rel_pose[t]);
    FrameOutput fo;
    for (const LateFusionBox& b : merged) {
      FrameOutputBox fb;
      fb.frame = t;
      fb.id = b.id;
      fb.box = b.box;
      fb.tag = b.id >= kInfraIdOffset ? Provenance::Infra
                                      : Provenance::Vehicle;
      fo.boxes.push_back(fb);
    }
    fo.message_bytes = 4 + inf_boxes.size() * kBoxBytes;
    out.message_bytes.push_back(fo.message_bytes);
    out.frames.push_back(std::move(fo));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation harness.
// ---------------------------------------------------------------------------

inline bool in_vehicle_range(const Scenario& sc, const Box3D& b) {
  return b.x >= sc.vehicle.range[0] && b.x <= sc.vehicle.range[1] &&
         b.y >= sc.vehicle.range[2] && b.y <= sc.vehicle.range[3];
}

/// Ground truth for evaluation: everything inside the vehicle's horizontal
/// range (vehicle frame), regardless of which agent can see it.
inline std::vector<EvalBox> collect_gt_boxes(const Scenario& sc,
                                             int eval_class,
                                             int frame_offset = 0) {
  std::vector<EvalBox> out;
  for (int t = 0; t < sc.frames; ++t) {
    const Pose world_to_veh = pose_inverse(sc.vehicle.pose_per_frame[t]);
    for (auto& [id, box] : sc.gt_at(t)) {
      Box3D b = transform_box(box, world_to_veh);
      if (!in_vehicle_range(sc, b)) continue;
      if (eval_class >= 0 && b.class_label != eval_class) continue;
      out.push_back({frame_offset + t, id, b});
    }
  }
  return out;
}

inline std::vector<EvalBox> collect_pred_boxes(
    const std::vector<FrameOutput>& frames, const Scenario& sc,
    int eval_class, int frame_offset = 0) {
  std::vector<EvalBox> out;
  for (const FrameOutput& fo : frames)
    for (const FrameOutputBox& b : fo.boxes) {
      if (!in_vehicle_range(sc, b.box)) continue;
      if (eval_class >= 0 && b.box.class_label != eval_class) continue;
      out.push_back({frame_offset + b.frame, b.id, b.box});
    }
  return out;
}

struct AssocScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int64_t predicted = 0, truth = 0, correct = 0;
};

inline AssocScore score_assoc_pairs(
    const std::vector<std::pair<int, int>>& predicted,
    const std::vector<int64_t>& v_gt, const std::vector<int64_t>& i_gt) {
  AssocScore s;
  // true pairs: same real identity seen by both sides
  std::unordered_map<int64_t, int> v_of;
  for (size_t v = 0; v < v_gt.size(); ++v)
    if (v_gt[v] >= 0) v_of[v_gt[v]] = static_cast<int>(v);
  for (size_t i = 0; i < i_gt.size(); ++i)
    if (i_gt[i] >= 0 && v_of.count(i_gt[i])) ++s.truth;
  s.predicted = static_cast<int64_t>(predicted.size());
  for (auto [v, i] : predicted) {
    if (v_gt[v] >= 0 && v_gt[v] == i_gt[i]) ++s.correct;
  }
  return s;
}

inline void finish_assoc(AssocScore& s) {
  s.precision = s.predicted > 0
                    ? static_cast<double>(s.correct) / s.predicted
                    : 0.0;
  s.recall = s.truth > 0 ? static_cast<double>(s.correct) / s.truth : 0.0;
  s.f1 = (s.precision + s.recall) > 0
             ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
             : 0.0;
}

/// Distance-only association baseline: Hungarian on 2D reference point
/// distance with a gate.
inline std::vector<std::pair<int, int>> distance_baseline_matches(
    const Matrix& pv, const Matrix& pi, double gate = 4.0) {
  std::vector<std::pair<int, int>> out;
  if (pv.rows == 0 || pi.rows == 0) return out;
  const double kBig = 1e9;
  Matrix cost(pv.rows, pi.rows);
  for (int i = 0; i < pv.rows; ++i)
    for (int j = 0; j < pi.rows; ++j) {
      const double d = std::hypot(pv.at(i, 0) - pi.at(j, 0),
                                  pv.at(i, 1) - pi.at(j, 1));
      cost.at(i, j) = d <= gate ? d : kBig;
    }
  for (auto [i, j] : hungarian(cost).pairs)
    if (cost.at(i, j) < kBig) out.emplace_back(i, j);
  return out;
}

struct BenchmarkReport {
  MetricReport metrics;
  AssocScore assoc_gba;
  AssocScore assoc_distance;
  double frame_rate = 10.0;
};

/// Runs a mode over an evaluation corpus and aggregates metrics. Frames of
/// different scenarios are kept disjoint by a per-scenario frame offset.
inline BenchmarkReport evaluate_mode(ModelBundle& mb,
                                     const std::vector<Scenario>& scenarios,
                                     const RunOptions& opt, const Config& cfg,
                                     bool collect_assoc = false) {
  BenchmarkReport rep;
  rep.frame_rate = cfg.frame_rate;
  std::vector<EvalBox> preds, gts;
  std::vector<size_t> bytes;
  int frame_offset = 0;
  for (const Scenario& sc : scenarios) {
    ScenarioRunResult rr =
        opt.mode == Mode::LateFusion
            ? run_scenario_late_fusion(mb, sc, opt)
            : run_scenario(mb, sc, opt, collect_assoc);
    auto p = collect_pred_boxes(rr.frames, sc, cfg.eval_class, frame_offset);
    auto g = collect_gt_boxes(sc, cfg.eval_class, frame_offset);
    preds.insert(preds.end(), p.begin(), p.end());
    gts.insert(gts.end(), g.begin(), g.end());
    bytes.insert(bytes.end(), rr.message_bytes.begin(),
                 rr.message_bytes.end());
    if (collect_assoc) {
      for (const AssocFrame& af : rr.assoc) {
        AssocScore sg = score_assoc_pairs(af.predicted, af.v_gt, af.i_gt);
        rep.assoc_gba.predicted += sg.predicted;
        rep.assoc_gba.truth += sg.truth;
        rep.assoc_gba.correct += sg.correct;
        auto base = distance_baseline_matches(af.pv, af.pi);
        AssocScore sb = score_assoc_pairs(base, af.v_gt, af.i_gt);
        rep.assoc_distance.predicted += sb.predicted;
        rep.assoc_distance.truth += sb.truth;
        rep.assoc_distance.correct += sb.correct;
      }
    }
    frame_offset += sc.frames + 10;
  }
  rep.metrics.tracking = amota_eval(preds, gts, cfg.eval_radius);
  rep.metrics.detection = map_detection(preds, gts);
  rep.metrics.bps = transmission_bps(bytes, cfg.frame_rate);
  if (collect_assoc) {
    finish_assoc(rep.assoc_gba);
    finish_assoc(rep.assoc_distance);
    rep.metrics.assoc_precision = rep.assoc_gba.precision;
    rep.metrics.assoc_recall = rep.assoc_gba.recall;
    rep.metrics.assoc_f1 = rep.assoc_gba.f1;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// End-to-end training entry points.
// ---------------------------------------------------------------------------

/// Builds a bundle and trains stage 1 for both agents on the corpus.
inline void train_stage1(ModelBundle& mb, const Config& cfg,
                         const std::vector<Scenario>& scenarios,
                         const StepCallback& log = nullptr) {
  TrainParams tp = cfg.train_params(1);
  stage1_train(mb.ps, mb.veh, AgentKind::Vehicle, scenarios, tp, log);
  stage1_train(mb.ps, mb.inf, AgentKind::Infrastructure, scenarios, tp, log);
}

inline void train_stage2(ModelBundle& mb, const Config& cfg,
                         const std::vector<Scenario>& scenarios,
                         const StepCallback& log = nullptr) {
  TrainParams tp = cfg.train_params(2);
  stage2_train(mb.ps, mb.veh, mb.inf, mb.coop, scenarios, tp, log);
}

}  // namespace cotrack
