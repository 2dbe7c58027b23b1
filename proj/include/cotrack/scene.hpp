#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotrack/geometry.hpp"
#include "cotrack/matrix.hpp"
#include "cotrack/rng.hpp"
#include "cotrack/rotation.hpp"

namespace cotrack {

enum class AgentKind { Vehicle, Infrastructure };

inline const char* agent_name(AgentKind k) {
  return k == AgentKind::Vehicle ? "vehicle" : "infrastructure";
}

constexpr int kNumClasses = 3;  // 0 car, 1 cyclist, 2 pedestrian

/// Feature-space gap between an agent's latent features and the shared
/// embedding basis: f_agent = f * D^T + e. D is block-diagonal with the same
/// block size as the latent codec, built as I + 0.35 * (unit-spectral-norm
/// noise) per block, so its condition number stays below 5.
struct DomainOperator {
  Matrix d;  // dim x dim
  Matrix e;  // 1 x dim

  static DomainOperator identity(int dim) {
    DomainOperator op;
    op.d = Matrix::identity(dim);
    op.e = Matrix(1, dim);
    return op;
  }
};

namespace detail {

inline double spectral_norm_estimate(const Matrix& a, int iters = 60) {
  Matrix v(a.cols, 1, 1.0);
  double norm = 0.0;
  for (int it = 0; it < iters; ++it) {
    Matrix av = matmul(a, v);
    Matrix atav = matmul_tn(a, av);
    norm = frobenius_norm(atav);
    if (norm < 1e-300) return 0.0;
    v = scale(atav, 1.0 / norm);
  }
  Matrix av = matmul(a, v);
  return frobenius_norm(av) / std::max(frobenius_norm(v), 1e-300);
}

}  // namespace detail

inline DomainOperator make_domain_operator(int dim, int block, uint64_t seed,
                                           double gap_strength = 0.35) {
  if (dim % block != 0)
    throw std::invalid_argument("make_domain_operator: dim % block != 0");
  Rng rng(seed);
  DomainOperator op;
  op.d = Matrix(dim, dim);
  op.e = Matrix(1, dim);
  for (int b = 0; b < dim / block; ++b) {
    Matrix g(block, block);
    for (double& x : g.data) x = rng.normal();
    const double sn = detail::spectral_norm_estimate(g);
    if (sn > 1e-12) g = scale(g, gap_strength / sn);
    for (int i = 0; i < block; ++i)
      for (int j = 0; j < block; ++j)
        op.d.at(b * block + i, b * block + j) = (i == j ? 1.0 : 0.0) + g.at(i, j);
  }
  for (double& x : op.e.data) x = rng.normal(0.0, 0.1);
  return op;
}

/// Shared latent embedding of object attributes. The descriptor packs four
/// padded groups (class/appearance, size, heading, velocity) into the block
/// layout of the latent space; heading and velocity components transform
/// linearly under a frame rotation, so the cross-agent gap stays affine.
struct FeatureCodec {
  int dim = 0;
  int block = 0;
  Matrix basis;  // dim x dim, block-diagonal orthogonal

  static FeatureCodec make(int dim, int block, uint64_t seed) {
    if (dim % block != 0)
      throw std::invalid_argument("FeatureCodec: dim % block != 0");
    FeatureCodec fc;
    fc.dim = dim;
    fc.block = block;
    fc.basis = Matrix(dim, dim);
    Rng rng(derive_seed(seed, "codec-basis"));
    for (int b = 0; b < dim / block; ++b) {
      // random rows, Gram-Schmidt within the block
      Matrix m(block, block);
      for (double& x : m.data) x = rng.normal();
      for (int i = 0; i < block; ++i) {
        for (int p = 0; p < i; ++p) {
          double proj = 0.0;
          for (int j = 0; j < block; ++j) proj += m.at(i, j) * m.at(p, j);
          for (int j = 0; j < block; ++j) m.at(i, j) -= proj * m.at(p, j);
        }
        double n = 0.0;
        for (int j = 0; j < block; ++j) n += m.at(i, j) * m.at(i, j);
        n = std::sqrt(std::max(n, 1e-12));
        for (int j = 0; j < block; ++j) m.at(i, j) /= n;
      }
      for (int i = 0; i < block; ++i)
        for (int j = 0; j < block; ++j)
          fc.basis.at(b * block + i, b * block + j) = m.at(i, j);
    }
    return fc;
  }

  /// Raw grouped descriptor of a box plus its persistent appearance pair.
  Matrix descriptor(const Box3D& b, double app1, double app2) const {
    Matrix d(1, dim);
    const int nb = dim / block;
    auto put = [&](int group, int slot, double v) {
      const int blk = group % nb;
      const int col = blk * block + slot;
      if (slot < block) d.at(0, col) += v;
    };
    // group 0: class one-hot, appearance, bias
    if (b.class_label >= 0 && b.class_label < kNumClasses)
      put(0, b.class_label, 1.0);
    put(0, 3, app1);
    put(0, 4, app2);
    put(0, 5, 0.5);
    // group 1: size
    put(1, 0, b.w / 2.0);
    put(1, 1, b.l / 2.0);
    put(1, 2, b.h / 2.0);
    put(1, 3, std::log(b.w) / 2.0);
    put(1, 4, std::log(b.l) / 2.0);
    put(1, 5, std::log(b.h) / 2.0);
    put(1, 6, std::sqrt(b.w * b.w + b.l * b.l + b.h * b.h) / 5.0);
    // group 2: heading (rotates as a 2-vector under frame changes)
    put(2, 0, std::sin(b.theta));
    put(2, 1, std::cos(b.theta));
    put(2, 2, 0.5 * std::sin(b.theta));
    put(2, 3, 0.5 * std::cos(b.theta));
    // group 3: velocity (rotates as a 2-vector; speed invariant)
    put(3, 0, b.vx / 5.0);
    put(3, 1, b.vy / 5.0);
    put(3, 2, b.vx / 10.0);
    put(3, 3, b.vy / 10.0);
    put(3, 4, std::hypot(b.vx, b.vy) / 5.0);
    return d;
  }

  Matrix embed(const Box3D& b, double app1, double app2,
               const DomainOperator& op) const {
    Matrix raw = matmul_nt(descriptor(b, app1, app2), basis);
    Matrix f = matmul_nt(raw, op.d);
    add_inplace(f, op.e);
    return f;
  }
};

/// One simulated detection: a noisy box in the agent frame, the latent
/// feature the emulated detector would attach to it, and (for diagnostics
/// only) the ground-truth track it came from; -1 marks clutter.
struct Detection {
  Box3D box;
  Matrix feature;
  int64_t gt_id = -1;
};

struct AgentConfig {
  AgentKind kind = AgentKind::Vehicle;
  std::vector<Pose> pose_per_frame;  // agent -> world
  double range[4] = {-51.2, 51.2, -51.2, 51.2};
  double z_range[2] = {-5.0, 3.0};
  double sigma_pos = 0.5;
  double sigma_dim = 0.05;
  double sigma_yaw = 0.1;
  double sigma_vel = 0.3;
  double sigma_feat = 0.02;
  double miss_rate = 0.1;
  double clutter_rate = 0.1;
  double occlusion_factor = 0.8;
  DomainOperator domain;

  void validate(int frames) const {
    if (range[0] >= range[1] || range[2] >= range[3] ||
        z_range[0] >= z_range[1])
      throw std::invalid_argument("AgentConfig: ranges must be ordered");
    if (miss_rate < 0 || miss_rate >= 1 || clutter_rate < 0)
      throw std::invalid_argument("AgentConfig: bad rates");
    if (static_cast<int>(pose_per_frame.size()) != frames)
      throw std::invalid_argument("AgentConfig: pose table length mismatch");
  }
};

struct GroundTruthTrack {
  int64_t track_id = 0;
  int class_label = 0;
  int first_frame = 0;
  double app1 = 0.0, app2 = 0.0;     // persistent appearance cue
  std::vector<Box3D> boxes;          // world frame, one per live frame

  bool alive_at(int frame) const {
    return frame >= first_frame &&
           frame < first_frame + static_cast<int>(boxes.size());
  }
  const Box3D& box_at(int frame) const { return boxes[frame - first_frame]; }
};

/// Parameters of the synthetic world. Everything that shapes a scenario is
/// here so (spec, seed) fully determines the output.
struct ScenarioSpec {
  double frame_rate = 10.0;
  double duration_s = 8.0;
  int n_objects = 14;
  double world_half = 45.0;        // object spawn box half-extent (m)
  double static_fraction = 0.0;
  double convoy_fraction = 0.4;    // fraction of objects spawned in convoys
  double turn_prob = 0.35;         // chance a motion segment is a turn
  int feature_dim = 32;
  int feature_block = 8;
  uint64_t domain_seed = 7;
  bool identity_domain = false;    // no cross-agent feature gap
  double gap_strength = 0.35;
  // agent noise template (applied to both agents)
  double sigma_pos = 0.5;
  double sigma_dim = 0.05;
  double sigma_yaw = 0.1;
  double sigma_vel = 0.3;
  double sigma_feat = 0.02;
  double miss_rate = 0.1;
  double clutter_rate = 0.1;
  double occlusion_factor = 0.8;
  // infrastructure placement (sampled per scenario)
  double infra_dist_min = 25.0;
  double infra_dist_max = 45.0;
  double infra_height = 5.0;

  int frames() const {
    const int f = static_cast<int>(std::lround(duration_s * frame_rate));
    return f;
  }

  void validate() const {
    if (frames() <= 0)
      throw std::invalid_argument("ScenarioSpec: zero frames");
    if (n_objects < 0) throw std::invalid_argument("ScenarioSpec: n_objects");
    if (feature_dim <= 0 || feature_dim % feature_block != 0)
      throw std::invalid_argument("ScenarioSpec: feature_dim % block != 0");
  }
};

struct Scenario {
  ScenarioSpec spec;
  uint64_t seed = 0;
  int frames = 0;
  std::vector<GroundTruthTrack> tracks;
  AgentConfig vehicle;
  AgentConfig infra;
  std::vector<Pose> rel_pose;  // infrastructure -> vehicle, per frame
  FeatureCodec codec;

  const AgentConfig& agent(AgentKind k) const {
    return k == AgentKind::Vehicle ? vehicle : infra;
  }

  /// World-frame ground truth boxes alive at `frame` with their track ids.
  std::vector<std::pair<int64_t, Box3D>> gt_at(int frame) const {
    std::vector<std::pair<int64_t, Box3D>> out;
    for (const auto& tr : tracks)
      if (tr.alive_at(frame)) out.emplace_back(tr.track_id, tr.box_at(frame));
    return out;
  }
};

namespace detail {

struct ObjectState {
  double x, y, heading, speed;
  double yaw_rate = 0.0;
  int segment_left = 0;  // frames until the motion segment changes
  int class_label = 0;
  double w, l, h;
  double app1, app2;
};

inline void sample_class_and_dims(Rng& rng, ObjectState& o) {
  const double u = rng.uniform();
  if (u < 0.6) {
    o.class_label = 0;  // car
    o.w = rng.uniform(1.8, 2.1);
    o.l = rng.uniform(4.2, 5.0);
    o.h = rng.uniform(1.4, 1.8);
    o.speed = rng.uniform(7.0, 13.0);
  } else if (u < 0.85) {
    o.class_label = 1;  // cyclist
    o.w = rng.uniform(0.6, 0.8);
    o.l = rng.uniform(1.6, 2.0);
    o.h = rng.uniform(1.5, 1.8);
    o.speed = rng.uniform(3.0, 6.0);
  } else {
    o.class_label = 2;  // pedestrian
    o.w = rng.uniform(0.5, 0.7);
    o.l = rng.uniform(0.5, 0.7);
    o.h = rng.uniform(1.6, 1.9);
    o.speed = rng.uniform(0.8, 2.0);
  }
  o.app1 = rng.uniform(-1.0, 1.0);
  o.app2 = rng.uniform(-1.0, 1.0);
}

inline void next_segment(Rng& rng, const ScenarioSpec& spec, ObjectState& o) {
  if (o.speed == 0.0) {
    o.yaw_rate = 0.0;
    o.segment_left = 1 << 30;
    return;
  }
  if (rng.bernoulli(spec.turn_prob)) {
    o.yaw_rate = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.15, 0.45);
    o.segment_left = static_cast<int>(rng.uniform(1.0, 3.0) * spec.frame_rate);
  } else {
    o.yaw_rate = 0.0;
    o.segment_left = static_cast<int>(rng.uniform(2.0, 5.0) * spec.frame_rate);
  }
  o.segment_left = std::max(o.segment_left, 1);
}

inline Box3D state_to_box(const ObjectState& o) {
  Box3D b;
  b.x = o.x;
  b.y = o.y;
  b.z = o.h / 2.0;
  b.w = o.w;
  b.l = o.l;
  b.h = o.h;
  b.theta = wrap_angle(o.heading);
  b.vx = o.speed * std::cos(o.heading);
  b.vy = o.speed * std::sin(o.heading);
  return b;
}

inline ObjectState spawn_object(Rng& rng, const ScenarioSpec& spec,
                                bool entering) {
  ObjectState o{};
  sample_class_and_dims(rng, o);
  if (rng.uniform() < spec.static_fraction) o.speed = 0.0;
  const double hw = spec.world_half;
  double x, y;
  do {
    x = rng.uniform(-hw, hw);
    y = rng.uniform(-hw, hw);
  } while (std::hypot(x, y) < 6.0);
  if (entering) {
    // place on the spawn box edge, heading inward with jitter
    const int side = rng.uniform_int(0, 3);
    if (side == 0) x = -hw;
    if (side == 1) x = hw;
    if (side == 2) y = -hw;
    if (side == 3) y = hw;
    o.heading = std::atan2(-y, -x) + rng.uniform(-0.6, 0.6);
  } else {
    o.heading = rng.uniform(-M_PI, M_PI);
  }
  o.x = x;
  o.y = y;
  next_segment(rng, spec, o);
  return o;
}

}  // namespace detail

/// Deterministic scene synthesis: constant-velocity segments with occasional
/// yaw-rate turns, convoy groups for close-range association cases, objects
/// respawning as new tracks when they leave the world box.
inline Scenario generate_scenario(const ScenarioSpec& spec, uint64_t seed) {
  spec.validate();
  Scenario sc;
  sc.spec = spec;
  sc.seed = seed;
  sc.frames = spec.frames();
  sc.codec = FeatureCodec::make(spec.feature_dim, spec.feature_block,
                                spec.domain_seed);

  // agents
  sc.vehicle.kind = AgentKind::Vehicle;
  sc.vehicle.range[0] = -51.2;
  sc.vehicle.range[1] = 51.2;
  sc.vehicle.range[2] = -51.2;
  sc.vehicle.range[3] = 51.2;
  sc.infra.kind = AgentKind::Infrastructure;
  sc.infra.range[0] = 0.0;
  sc.infra.range[1] = 102.4;
  sc.infra.range[2] = -51.2;
  sc.infra.range[3] = 51.2;
  for (AgentConfig* a : {&sc.vehicle, &sc.infra}) {
    a->sigma_pos = spec.sigma_pos;
    a->sigma_dim = spec.sigma_dim;
    a->sigma_yaw = spec.sigma_yaw;
    a->sigma_vel = spec.sigma_vel;
    a->sigma_feat = spec.sigma_feat;
    a->miss_rate = spec.miss_rate;
    a->clutter_rate = spec.clutter_rate;
    a->occlusion_factor = spec.occlusion_factor;
  }
  if (spec.identity_domain) {
    sc.vehicle.domain = DomainOperator::identity(spec.feature_dim);
    sc.infra.domain = DomainOperator::identity(spec.feature_dim);
  } else {
    sc.vehicle.domain =
        make_domain_operator(spec.feature_dim, spec.feature_block,
                             derive_seed(spec.domain_seed, "domain-vehicle"),
                             spec.gap_strength);
    sc.infra.domain =
        make_domain_operator(spec.feature_dim, spec.feature_block,
                             derive_seed(spec.domain_seed, "domain-infra"),
                             spec.gap_strength);
  }

  Rng rng(derive_seed(seed, "scenario"));

  // vehicle static at the origin; infrastructure placed per scenario, aimed
  // back at the scene with an elevated mount
  const Pose veh_pose = Pose::identity();
  const double ang = rng.uniform(-M_PI, M_PI);
  const double dist = rng.uniform(spec.infra_dist_min, spec.infra_dist_max);
  const double ix = dist * std::cos(ang);
  const double iy = dist * std::sin(ang);
  const double iyaw = std::atan2(-iy, -ix) + rng.uniform(-0.3, 0.3);
  const Pose inf_pose = Pose::from_yaw_xyz(iyaw, ix, iy, spec.infra_height);
  sc.vehicle.pose_per_frame.assign(sc.frames, veh_pose);
  sc.infra.pose_per_frame.assign(sc.frames, inf_pose);
  sc.rel_pose.assign(sc.frames,
                     pose_compose(pose_inverse(veh_pose), inf_pose));

  // spawn initial population: convoys first, then singles
  const double dt = 1.0 / spec.frame_rate;
  std::vector<detail::ObjectState> objs;
  std::vector<int64_t> obj_track(spec.n_objects, -1);
  int64_t next_id = 0;
  const int n_convoy = static_cast<int>(spec.n_objects * spec.convoy_fraction);
  while (static_cast<int>(objs.size()) < n_convoy) {
    detail::ObjectState lead = detail::spawn_object(rng, spec, false);
    objs.push_back(lead);
    const int followers =
        std::min(rng.uniform_int(1, 2),
                 n_convoy - static_cast<int>(objs.size()));
    detail::ObjectState prev = lead;
    for (int f = 0; f < followers; ++f) {
      detail::ObjectState fo = prev;
      const double gap = rng.uniform(5.0, 8.0);
      fo.x -= gap * std::cos(prev.heading);
      fo.y -= gap * std::sin(prev.heading);
      fo.speed = prev.speed * rng.uniform(0.95, 1.05);
      fo.app1 = rng.uniform(-1.0, 1.0);
      fo.app2 = rng.uniform(-1.0, 1.0);
      detail::next_segment(rng, spec, fo);
      objs.push_back(fo);
      prev = fo;
    }
  }
  while (static_cast<int>(objs.size()) < spec.n_objects)
    objs.push_back(detail::spawn_object(rng, spec, false));
  objs.resize(spec.n_objects);

  auto open_track = [&](int obj_idx, int frame) {
    GroundTruthTrack tr;
    tr.track_id = next_id++;
    tr.class_label = objs[obj_idx].class_label;
    tr.first_frame = frame;
    tr.app1 = objs[obj_idx].app1;
    tr.app2 = objs[obj_idx].app2;
    sc.tracks.push_back(tr);
    obj_track[obj_idx] = static_cast<int64_t>(sc.tracks.size()) - 1;
  };

  for (int i = 0; i < spec.n_objects; ++i) open_track(i, 0);

  const double exit_half = spec.world_half + 10.0;
  for (int t = 0; t < sc.frames; ++t) {
    for (int i = 0; i < spec.n_objects; ++i) {
      detail::ObjectState& o = objs[i];
      if (t > 0) {
        o.heading += o.yaw_rate * dt;
        o.x += o.speed * std::cos(o.heading) * dt;
        o.y += o.speed * std::sin(o.heading) * dt;
        if (--o.segment_left <= 0) detail::next_segment(rng, spec, o);
        if (std::abs(o.x) > exit_half || std::abs(o.y) > exit_half) {
          // track ends; a fresh object (new identity) enters
          o = detail::spawn_object(rng, spec, true);
          open_track(i, t);
        }
      }
      sc.tracks[obj_track[i]].boxes.push_back(detail::state_to_box(o));
    }
  }
  return sc;
}

/// Ground truth visible to an agent at frame t: in range and not occluded
/// (independent of the per-frame miss coin flips). Boxes are returned in the
/// agent frame, paired with track ids.
struct AgentObservation {
  std::vector<Detection> detections;
  std::vector<int64_t> observable_ids;
  std::vector<Box3D> observable_gt;  // agent frame, parallel to ids
};

namespace detail {

inline bool in_range(const AgentConfig& a, const Box3D& b) {
  return b.x >= a.range[0] && b.x <= a.range[1] && b.y >= a.range[2] &&
         b.y <= a.range[3] && b.z >= a.z_range[0] && b.z <= a.z_range[1];
}

/// Simple angular-overlap occlusion: an object is hidden when a strictly
/// nearer object covers its azimuth within `factor` of the nearer object's
/// angular half-width.
inline std::vector<bool> occlusion_mask(const std::vector<Box3D>& boxes,
                                        double factor) {
  const int n = static_cast<int>(boxes.size());
  std::vector<bool> occluded(n, false);
  if (factor <= 0.0) return occluded;
  std::vector<double> dist(n), az(n), halfw(n);
  for (int i = 0; i < n; ++i) {
    dist[i] = std::hypot(boxes[i].x, boxes[i].y);
    az[i] = std::atan2(boxes[i].y, boxes[i].x);
    halfw[i] = std::atan2(0.5 * std::max(boxes[i].w, boxes[i].l),
                          std::max(dist[i], 1.0));
  }
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      if (i == j || dist[i] + 1.0 >= dist[j]) continue;
      if (std::abs(wrap_angle(az[i] - az[j])) < factor * halfw[i]) {
        occluded[j] = true;
        break;
      }
    }
  }
  return occluded;
}

}  // namespace detail

/// Emulated per-agent detector output at frame t. Pure in (scenario, kind, t).
inline AgentObservation observe(const Scenario& sc, AgentKind kind, int t) {
  if (t < 0 || t >= sc.frames)
    throw std::invalid_argument("observe: frame out of range");
  const AgentConfig& a = sc.agent(kind);
  const Pose world_to_agent = pose_inverse(a.pose_per_frame[t]);
  Rng rng(derive_seed(sc.seed, agent_name(kind), static_cast<uint64_t>(t)));

  AgentObservation out;
  std::vector<Box3D> in_frame;
  std::vector<const GroundTruthTrack*> in_tracks;
  for (const auto& tr : sc.tracks) {
    if (!tr.alive_at(t)) continue;
    Box3D b = transform_box(tr.box_at(t), world_to_agent);
    if (!detail::in_range(a, b)) continue;
    in_frame.push_back(b);
    in_tracks.push_back(&tr);
  }
  const std::vector<bool> occluded =
      detail::occlusion_mask(in_frame, a.occlusion_factor);

  for (size_t i = 0; i < in_frame.size(); ++i) {
    if (occluded[i]) continue;
    out.observable_ids.push_back(in_tracks[i]->track_id);
    out.observable_gt.push_back(in_frame[i]);
    if (rng.bernoulli(a.miss_rate)) continue;
    Detection det;
    det.gt_id = in_tracks[i]->track_id;
    Box3D b = in_frame[i];
    b.x += rng.normal(0.0, a.sigma_pos);
    b.y += rng.normal(0.0, a.sigma_pos);
    b.z += rng.normal(0.0, 0.5 * a.sigma_pos);
    b.w *= std::exp(rng.normal(0.0, a.sigma_dim));
    b.l *= std::exp(rng.normal(0.0, a.sigma_dim));
    b.h *= std::exp(rng.normal(0.0, a.sigma_dim));
    b.theta = wrap_angle(b.theta + rng.normal(0.0, a.sigma_yaw));
    b.vx += rng.normal(0.0, a.sigma_vel);
    b.vy += rng.normal(0.0, a.sigma_vel);
    b.score = std::clamp(rng.normal(0.9, 0.05), 0.0, 1.0);
    det.box = b;
    det.feature = sc.codec.embed(b, in_tracks[i]->app1, in_tracks[i]->app2,
                                 a.domain);
    if (a.sigma_feat > 0.0)
      for (double& x : det.feature.data) x += rng.normal(0.0, a.sigma_feat);
    out.detections.push_back(std::move(det));
  }

  // clutter: incoherent fake objects pushed through the same embedding
  const int n_clutter = rng.poisson(a.clutter_rate);
  for (int c = 0; c < n_clutter; ++c) {
    Detection det;
    det.gt_id = -1;
    Box3D b;
    b.x = rng.uniform(a.range[0], a.range[1]);
    b.y = rng.uniform(a.range[2], a.range[3]);
    b.class_label = rng.uniform_int(0, kNumClasses - 1);
    b.w = rng.uniform(0.5, 2.2);
    b.l = rng.uniform(0.5, 5.2);
    b.h = rng.uniform(0.8, 2.0);
    b.z = b.h / 2.0;
    b.theta = rng.uniform(-M_PI, M_PI);
    const double sp = rng.uniform(0.0, 14.0);
    const double dir = rng.uniform(-M_PI, M_PI);
    b.vx = sp * std::cos(dir);
    b.vy = sp * std::sin(dir);
    b.score = std::clamp(rng.normal(0.5, 0.15), 0.0, 1.0);
    det.box = b;
    det.feature = sc.codec.embed(b, rng.uniform(-1.0, 1.0),
                                 rng.uniform(-1.0, 1.0), a.domain);
    for (double& x : det.feature.data)
      x += rng.normal(0.0, std::max(a.sigma_feat, 0.0) * 3.0);
    out.detections.push_back(std::move(det));
  }
  return out;
}

}  // namespace cotrack
