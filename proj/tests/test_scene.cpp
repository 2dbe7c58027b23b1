#include <gtest/gtest.h>

#include <set>

#include "cotrack/geometry.hpp"
#include "cotrack/scene.hpp"

using namespace cotrack;

namespace {

ScenarioSpec quiet_spec() {
  ScenarioSpec s;
  s.n_objects = 6;
  s.duration_s = 3.0;
  s.sigma_pos = 0;
  s.sigma_dim = 0;
  s.sigma_yaw = 0;
  s.sigma_vel = 0;
  s.sigma_feat = 0;
  s.miss_rate = 0;
  s.clutter_rate = 0;
  s.occlusion_factor = 0;
  return s;
}

bool boxes_equal(const Box3D& a, const Box3D& b, double tol = 0.0) {
  return std::abs(a.x - b.x) <= tol && std::abs(a.y - b.y) <= tol &&
         std::abs(a.z - b.z) <= tol && std::abs(a.w - b.w) <= tol &&
         std::abs(a.l - b.l) <= tol && std::abs(a.theta - b.theta) <= tol;
}

}  // namespace

TEST(Corners, AxisAlignedBox) {
  Box3D b;
  b.w = 2;
  b.l = 4;
  b.h = 2;
  Matrix c = corners_from_box(b);
  ASSERT_EQ(c.rows, 8);
  std::multiset<std::tuple<double, double, double>> got, want;
  for (int i = 0; i < 8; ++i) got.insert({c.at(i, 0), c.at(i, 1), c.at(i, 2)});
  for (int sx : {1, -1})
    for (int sy : {1, -1})
      for (int sz : {1, -1}) want.insert({2.0 * sx, 1.0 * sy, 1.0 * sz});
  EXPECT_EQ(got, want);
  // fixed order: first corner is (+l/2, +w/2, +h/2)
  EXPECT_DOUBLE_EQ(c.at(0, 0), 2);
  EXPECT_DOUBLE_EQ(c.at(0, 1), 1);
  EXPECT_DOUBLE_EQ(c.at(0, 2), 1);
}

TEST(Corners, CentroidIsZero) {
  Box3D b;
  b.w = 1.7;
  b.l = 4.3;
  b.h = 1.5;
  b.theta = 0.77;
  b.x = 12;
  b.y = -5;
  b.z = 3;
  Matrix c = corners_from_box(b);
  Matrix mean = colsum(c);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(mean.at(0, j) / 8.0, 0.0, 1e-12);
}

TEST(Corners, QuarterTurnSwapsFootprint) {
  Box3D a;
  a.w = 2;
  a.l = 4;
  a.h = 1;
  a.theta = M_PI / 2;
  Box3D b;
  b.w = 4;
  b.l = 2;
  b.h = 1;
  b.theta = 0;
  auto point_set = [](const Matrix& m) {
    std::multiset<std::pair<long long, long long>> s;
    for (int i = 0; i < m.rows; ++i)
      s.insert({std::llround(m.at(i, 0) * 1e9), std::llround(m.at(i, 1) * 1e9)});
    return s;
  };
  EXPECT_EQ(point_set(corners_from_box(a)), point_set(corners_from_box(b)));
  EXPECT_THROW(corners_from_box(Box3D{0, 0, 0, -1, 1, 1}), std::invalid_argument);
}

TEST(Scenario, DeterministicGivenSeed) {
  ScenarioSpec spec;
  spec.n_objects = 10;
  spec.duration_s = 4.0;
  Scenario a = generate_scenario(spec, 99);
  Scenario b = generate_scenario(spec, 99);
  ASSERT_EQ(a.tracks.size(), b.tracks.size());
  for (size_t i = 0; i < a.tracks.size(); ++i) {
    ASSERT_EQ(a.tracks[i].boxes.size(), b.tracks[i].boxes.size());
    for (size_t f = 0; f < a.tracks[i].boxes.size(); ++f)
      EXPECT_TRUE(boxes_equal(a.tracks[i].boxes[f], b.tracks[i].boxes[f]));
  }
  Scenario c = generate_scenario(spec, 100);
  bool any_diff = c.tracks.size() != a.tracks.size();
  if (!any_diff)
    any_diff = !boxes_equal(a.tracks[0].boxes[0], c.tracks[0].boxes[0]);
  EXPECT_TRUE(any_diff);
}

TEST(Scenario, StaticObjectHoldsStill) {
  ScenarioSpec spec = quiet_spec();
  spec.n_objects = 1;
  spec.static_fraction = 1.0;
  spec.convoy_fraction = 0.0;
  spec.duration_s = 1.0;
  Scenario sc = generate_scenario(spec, 5);
  ASSERT_EQ(sc.tracks.size(), 1u);
  ASSERT_EQ(static_cast<int>(sc.tracks[0].boxes.size()), 10);
  for (const Box3D& b : sc.tracks[0].boxes) {
    EXPECT_TRUE(boxes_equal(b, sc.tracks[0].boxes[0]));
    EXPECT_DOUBLE_EQ(b.vx, 0);
    EXPECT_DOUBLE_EQ(b.vy, 0);
  }
}

TEST(Scenario, StraightMotionMatchesVelocity) {
  ScenarioSpec spec = quiet_spec();
  spec.turn_prob = 0.0;
  spec.convoy_fraction = 0.0;
  spec.n_objects = 4;
  Scenario sc = generate_scenario(spec, 11);
  const double dt = 1.0 / spec.frame_rate;
  for (const auto& tr : sc.tracks) {
    for (size_t f = 1; f < tr.boxes.size(); ++f) {
      EXPECT_NEAR(tr.boxes[f].x - tr.boxes[f - 1].x, tr.boxes[f].vx * dt, 1e-9);
      EXPECT_NEAR(tr.boxes[f].y - tr.boxes[f - 1].y, tr.boxes[f].vy * dt, 1e-9);
    }
  }
}

TEST(Scenario, FrameCountScalesWithRate) {
  ScenarioSpec two = quiet_spec();
  two.frame_rate = 2.0;
  ScenarioSpec ten = quiet_spec();
  ten.frame_rate = 10.0;
  EXPECT_EQ(ten.frames(), 5 * two.frames());
  ScenarioSpec bad = quiet_spec();
  bad.duration_s = 0.0;
  EXPECT_THROW(generate_scenario(bad, 1), std::invalid_argument);
}

TEST(Observe, CleanObservationMatchesGroundTruth) {
  ScenarioSpec spec = quiet_spec();
  Scenario sc = generate_scenario(spec, 21);
  for (int t = 0; t < sc.frames; t += 7) {
    AgentObservation obs = observe(sc, AgentKind::Vehicle, t);
    auto gt = sc.gt_at(t);
    // vehicle frame == world frame here (identity pose)
    EXPECT_EQ(obs.detections.size(), obs.observable_ids.size());
    for (const Detection& det : obs.detections) {
      bool found = false;
      for (auto& [id, box] : gt)
        if (id == det.gt_id) {
          EXPECT_TRUE(boxes_equal(det.box, box, 1e-12));
          found = true;
        }
      EXPECT_TRUE(found);
    }
  }
}

TEST(Observe, OutOfRangeObjectsAbsent) {
  ScenarioSpec spec = quiet_spec();
  spec.world_half = 45.0;
  Scenario sc = generate_scenario(spec, 31);
  // shrink the vehicle's range drastically; distant objects must disappear
  sc.vehicle.range[0] = -5;
  sc.vehicle.range[1] = 5;
  sc.vehicle.range[2] = -5;
  sc.vehicle.range[3] = 5;
  AgentObservation obs = observe(sc, AgentKind::Vehicle, 0);
  for (const Detection& det : obs.detections) {
    EXPECT_LE(std::abs(det.box.x), 5.0);
    EXPECT_LE(std::abs(det.box.y), 5.0);
  }
}

TEST(Observe, IdentityDomainsGiveIdenticalFeatures) {
  ScenarioSpec spec = quiet_spec();
  spec.identity_domain = true;
  Scenario sc = generate_scenario(spec, 41);
  // re-mount the infrastructure with the same orientation as the vehicle so
  // per-agent boxes (and hence descriptors) coincide
  sc.infra.pose_per_frame.assign(sc.frames, Pose::from_yaw_xyz(0, 0, 0, 0));
  AgentObservation ov = observe(sc, AgentKind::Vehicle, 2);
  AgentObservation oi = observe(sc, AgentKind::Infrastructure, 2);
  int compared = 0;
  for (const Detection& dv : ov.detections)
    for (const Detection& di : oi.detections)
      if (dv.gt_id == di.gt_id && dv.gt_id >= 0) {
        EXPECT_LT(max_abs_diff(dv.feature, di.feature), 1e-12);
        ++compared;
      }
  EXPECT_GT(compared, 0);
}

TEST(Observe, RelativePosePlacesInfraDetectionsOnVehicleGt) {
  ScenarioSpec spec = quiet_spec();
  spec.sigma_pos = 0.4;
  Scenario sc = generate_scenario(spec, 51);
  int checked = 0;
  for (int t = 0; t < sc.frames; t += 5) {
    AgentObservation oi = observe(sc, AgentKind::Infrastructure, t);
    const Pose& rel = sc.rel_pose[t];
    auto gt = sc.gt_at(t);  // vehicle frame == world frame
    for (const Detection& det : oi.detections) {
      if (det.gt_id < 0) continue;
      Box3D in_vehicle = transform_box(det.box, rel);
      for (auto& [id, box] : gt)
        if (id == det.gt_id) {
          const double dist = std::hypot(in_vehicle.x - box.x,
                                         in_vehicle.y - box.y);
          EXPECT_LT(dist, 3.0 * spec.sigma_pos * 2.0);
          ++checked;
        }
    }
  }
  EXPECT_GT(checked, 10);
}

TEST(Observe, DeterministicPerFrame) {
  ScenarioSpec spec;
  spec.n_objects = 8;
  spec.duration_s = 2.0;
  Scenario sc = generate_scenario(spec, 61);
  AgentObservation a = observe(sc, AgentKind::Vehicle, 3);
  AgentObservation b = observe(sc, AgentKind::Vehicle, 3);
  ASSERT_EQ(a.detections.size(), b.detections.size());
  for (size_t i = 0; i < a.detections.size(); ++i) {
    EXPECT_TRUE(boxes_equal(a.detections[i].box, b.detections[i].box));
    EXPECT_DOUBLE_EQ(
        max_abs_diff(a.detections[i].feature, b.detections[i].feature), 0);
  }
}

TEST(DomainOperator, WellConditioned) {
  DomainOperator op = make_domain_operator(32, 8, 123);
  Matrix diff = sub(op.d, Matrix::identity(32));
  const double sn = detail::spectral_norm_estimate(diff);
  EXPECT_LE(sn, 0.351);  // singular values of D within [0.649, 1.351]
  const double cond_bound = (1.0 + sn) / (1.0 - sn);
  EXPECT_LT(cond_bound, 5.0);
  // block structure: off-block entries are exactly zero
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j)
      if (i / 8 != j / 8) EXPECT_DOUBLE_EQ(op.d.at(i, j), 0.0);
}

TEST(Occlusion, AngularOverlapHidesFarObject) {
  std::vector<Box3D> boxes(2);
  boxes[0].x = 5;
  boxes[0].y = 0;
  boxes[0].w = 2;
  boxes[0].l = 4.5;
  boxes[1].x = 12;
  boxes[1].y = 0.5;
  boxes[1].w = 2;
  boxes[1].l = 4.5;
  auto mask = detail::occlusion_mask(boxes, 0.8);
  EXPECT_FALSE(mask[0]);
  EXPECT_TRUE(mask[1]);
  boxes[1].y = 9.0;  // move far object out of the near object's shadow
  mask = detail::occlusion_mask(boxes, 0.8);
  EXPECT_FALSE(mask[1]);
}

TEST(FeatureCodec, CrossFrameGapIsBlockAffine) {
  // same object expressed in two frames differing by a yaw rotation: the
  // latent difference must be recoverable by a block-diagonal linear map,
  // which the alignment module's segmented transform can represent
  FeatureCodec fc = FeatureCodec::make(32, 8, 7);
  Box3D b;
  b.w = 2;
  b.l = 4.5;
  b.h = 1.5;
  b.theta = 0.3;
  b.vx = 8 * std::cos(0.3);
  b.vy = 8 * std::sin(0.3);
  const double dyaw = 0.9;
  Box3D rotated = transform_box(b, Pose::from_yaw_xyz(dyaw, 0, 0, 0));
  Matrix f_a = fc.descriptor(b, 0.2, -0.5);
  Matrix f_b = fc.descriptor(rotated, 0.2, -0.5);
  // heading/velocity groups rotate, other groups match exactly
  const double c = std::cos(dyaw), s = std::sin(dyaw);
  for (int col = 0; col < 8; ++col) {
    EXPECT_NEAR(f_b.at(0, col), f_a.at(0, col), 1e-12);           // semantic
    EXPECT_NEAR(f_b.at(0, 8 + col), f_a.at(0, 8 + col), 1e-12);   // size
  }
  EXPECT_NEAR(f_b.at(0, 16), c * f_a.at(0, 16) + s * f_a.at(0, 17), 1e-12);
  EXPECT_NEAR(f_b.at(0, 17), -s * f_a.at(0, 16) + c * f_a.at(0, 17), 1e-12);
  EXPECT_NEAR(f_b.at(0, 24), c * f_a.at(0, 24) - s * f_a.at(0, 25), 1e-12);
}
