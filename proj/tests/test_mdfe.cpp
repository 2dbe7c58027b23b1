#include <gtest/gtest.h>

#include "cotrack/gradcheck.hpp"
#include "cotrack/mdfe.hpp"

using namespace cotrack;

namespace {

ModelConfig small_cfg() {
  ModelConfig c;
  c.d = 8;
  c.tau = 3;
  c.heads = 2;
  c.ffw_mult = 2;
  c.block = 4;
  c.n_classes = 3;
  return c;
}

AgentModel make_model(ParamStore& ps, const ModelConfig& cfg,
                      uint64_t seed = 5, const std::string& name = "a") {
  Rng rng(seed);
  AgentModel m;
  m.init(ps, name, cfg, rng);
  // non-degenerate temporal blocks for gradient tests
  for (Param& p : ps.all()) {
    if (p.value.data.empty()) continue;
    if (p.name.find(".wo") != std::string::npos ||
        p.name.find(".ffn.w1") != std::string::npos) {
      Rng r2(seed ^ fnv1a(p.name));
      for (double& v : p.value.data) v = 0.2 * r2.normal();
    }
  }
  return m;
}

Matrix random_matrix(int r, int c, Rng& rng, double s = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data) v = s * rng.normal();
  return m;
}

Detection make_det(double x, double y, int64_t gt, Rng& rng, int d) {
  Detection det;
  det.box.x = x;
  det.box.y = y;
  det.box.z = 0.8;
  det.box.w = 2;
  det.box.l = 4.5;
  det.box.h = 1.6;
  det.box.theta = 0.4;
  det.box.vx = 5;
  det.box.vy = 1;
  det.gt_id = gt;
  det.feature = random_matrix(1, d, rng, 0.5);
  return det;
}

double project(const Matrix& y, const Matrix& c) {
  double s = 0;
  for (size_t i = 0; i < y.data.size(); ++i) s += c.data[i] * y.data[i];
  return s;
}

}  // namespace

TEST(HistoryBuffer, FifoEviction) {
  HistoryBuffer h(4);
  Matrix row(1, 2);
  for (int f = 1; f <= 6; ++f) {
    row.at(0, 0) = f;
    h.push(7, row, row);
  }
  EXPECT_EQ(h.valid_count(7), 4);
  auto g = h.gather(7, 2);
  // newest first: frames 6,5,4,3 (position encodings added on top)
  for (int j = 0; j < 4; ++j) {
    const double pe0 = sinusoidal_pe(j + 1, 2).at(0, 0);
    EXPECT_NEAR(g.kv_m.at(j, 0) - pe0, 6 - j, 1e-12);
    EXPECT_EQ(g.mask[j], 1);
  }
}

TEST(HistoryBuffer, NewIdHasOneValidSlot) {
  HistoryBuffer h(4);
  Matrix row(1, 2, 1.0);
  h.push(3, row, row);
  auto g = h.gather(3, 2);
  EXPECT_EQ(g.mask[0], 1);
  EXPECT_EQ(g.mask[1], 0);
  EXPECT_EQ(g.mask[2], 0);
  EXPECT_EQ(g.mask[3], 0);
  auto empty = h.gather(42, 2);
  for (int j = 0; j < 4; ++j) EXPECT_EQ(empty.mask[j], 0);
}

TEST(HistoryBuffer, RetainDropsInactive) {
  HistoryBuffer h(2);
  Matrix row(1, 1, 1.0);
  h.push(1, row, row);
  h.push(2, row, row);
  h.retain({2});
  EXPECT_EQ(h.valid_count(1), 0);
  EXPECT_EQ(h.valid_count(2), 1);
}

TEST(SemanticHead, IdentityInitPassesThrough) {
  ParamStore ps;
  ModelConfig cfg = small_cfg();
  AgentModel m = make_model(ps, cfg);
  ps.at("a.sem.w0").value = Matrix::identity(cfg.d);
  ps.at("a.sem.w1").value = Matrix::identity(cfg.d);
  Rng rng(3);
  Matrix x = random_matrix(4, cfg.d, rng);
  for (double& v : x.data) v = std::abs(v);  // stay in the linear ReLU region
  Matrix s = m.semantic.forward(ps, x);
  EXPECT_LT(max_abs_diff(s, x), 1e-12);
}

TEST(SemanticHead, RowwisePurity) {
  ParamStore ps;
  AgentModel m = make_model(ps, small_cfg());
  Rng rng(4);
  Matrix x = random_matrix(2, 8, rng);
  x.set_row(1, x.row(0));
  Matrix s = m.semantic.forward(ps, x);
  EXPECT_DOUBLE_EQ(max_abs_diff(s.row(0), s.row(1)), 0);
}

TEST(MotionHead, CornerPermutationInvariance) {
  ParamStore ps;
  AgentModel m = make_model(ps, small_cfg());
  Box3D b;
  b.w = 2.1;
  b.l = 4.4;
  b.h = 1.5;
  b.theta = 0.7;
  Matrix m1 = motion_head_forward(m, ps, {b});
  // permuting corners = feeding the same 8 points in another order; pooling
  // is order-free, so run the MLP manually on permuted rows
  Matrix corners = corners_from_box(b);
  Matrix permuted(8, 3);
  const int perm[8] = {5, 2, 7, 0, 3, 6, 1, 4};
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 3; ++c) permuted.at(r, c) = corners.at(perm[r], c);
  Matrix feats = m.motion.forward(ps, permuted);
  for (int c = 0; c < 8; ++c) {
    double best = -1e300;
    for (int r = 0; r < 8; ++r) best = std::max(best, feats.at(r, c));
    EXPECT_NEAR(best, m1.at(0, c), 1e-12);
  }
}

TEST(MotionHead, TranslationInvariance) {
  ParamStore ps;
  AgentModel m = make_model(ps, small_cfg());
  Box3D a;
  a.w = 1.9;
  a.l = 4.2;
  a.h = 1.4;
  a.theta = -0.3;
  Box3D b = a;
  b.x += 17;
  b.y -= 4;
  b.z += 2;
  Matrix ma = motion_head_forward(m, ps, {a});
  Matrix mb = motion_head_forward(m, ps, {b});
  EXPECT_DOUBLE_EQ(max_abs_diff(ma, mb), 0);
}

TEST(MotionHead, GradientMatchesFiniteDifferences) {
  ParamStore ps;
  AgentModel m = make_model(ps, small_cfg());
  Box3D b;
  b.w = 2.0;
  b.l = 4.5;
  b.h = 1.6;
  b.theta = 0.35;  // generic yaw keeps pooling away from ties
  Rng rng(6);
  Matrix c = random_matrix(1, 8, rng);
  auto loss = [&]() { return project(motion_head_forward(m, ps, {b}), c); };
  ps.zero_grads();
  MotionHeadCache cache;
  motion_head_forward(m, ps, {b}, &cache);
  motion_head_backward(m, ps, cache, c);
  auto rep = check_param_gradients(ps, loss, 1e-5, 8, 99);
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst_param;
}

TEST(TemporalBlock, AllMaskedHistoryEqualsHistoryFreePath) {
  ParamStore ps;
  ModelConfig cfg = small_cfg();
  AgentModel m = make_model(ps, cfg);
  Rng rng(8);
  Matrix x = random_matrix(3, cfg.d, rng);
  // all-masked garbage history vs zero-length history
  std::vector<Matrix> kv_garbage(3), kv_none(3);
  std::vector<Mask> mask_garbage(3), mask_none(3);
  for (int i = 0; i < 3; ++i) {
    kv_garbage[i] = random_matrix(cfg.tau, cfg.d, rng, 100.0);
    mask_garbage[i].assign(cfg.tau, 0);
    kv_none[i] = Matrix(0, cfg.d);
    mask_none[i] = {};
  }
  Matrix a = temporal_block_forward(m.temporal_m, ps, x, kv_garbage,
                                    mask_garbage, nullptr);
  Matrix b =
      temporal_block_forward(m.temporal_m, ps, x, kv_none, mask_none, nullptr);
  EXPECT_DOUBLE_EQ(max_abs_diff(a, b), 0);
}

TEST(TemporalBlock, MaskedSlotIsInert) {
  ParamStore ps;
  ModelConfig cfg = small_cfg();
  AgentModel m = make_model(ps, cfg);
  Rng rng(9);
  Matrix x = random_matrix(2, cfg.d, rng);
  std::vector<Matrix> kv1(2), kv2(2);
  std::vector<Mask> m1(2), m2(2);
  for (int i = 0; i < 2; ++i) {
    kv1[i] = random_matrix(2, cfg.d, rng);
    m1[i] = {1, 1};
    kv2[i] = Matrix(3, cfg.d);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < cfg.d; ++c) kv2[i].at(r, c) = kv1[i].at(r, c);
    for (int c = 0; c < cfg.d; ++c) kv2[i].at(2, c) = 1e6;  // masked garbage
    m2[i] = {1, 1, 0};
  }
  Matrix a = temporal_block_forward(m.temporal_m, ps, x, kv1, m1, nullptr);
  Matrix b = temporal_block_forward(m.temporal_m, ps, x, kv2, m2, nullptr);
  EXPECT_DOUBLE_EQ(max_abs_diff(a, b), 0);
}

TEST(TemporalBlock, GradientMatchesFiniteDifferences) {
  ParamStore ps;
  ModelConfig cfg = small_cfg();
  AgentModel m = make_model(ps, cfg);
  Rng rng(10);
  Matrix x = random_matrix(3, cfg.d, rng);
  std::vector<Matrix> kv(3);
  std::vector<Mask> mask(3);
  for (int i = 0; i < 3; ++i) {
    kv[i] = random_matrix(cfg.tau, cfg.d, rng);
    mask[i] = {1, 1, 0};
  }
  Matrix c = random_matrix(3, cfg.d, rng);
  auto loss = [&]() {
    return project(
        temporal_block_forward(m.temporal_m, ps, x, kv, mask, nullptr), c);
  };
  ps.zero_grads();
  TemporalBlockCache cache;
  temporal_block_forward(m.temporal_m, ps, x, kv, mask, &cache);
  Matrix dx = temporal_block_backward(m.temporal_m, ps, cache, c);
  auto rep = check_param_gradients(ps, loss, 1e-5, 6, 7);
  EXPECT_LT(rep.max_rel_err, 1e-4) << rep.worst_param;
  auto repx = check_input_gradient(x, dx, loss);
  EXPECT_LT(repx.max_rel_err, 1e-4);
}

TEST(BindDetections, SingleDetectionBindsFreshQuery) {
  QuerySet q;
  q.features = Matrix(1, 8);
  q.refpoints = Matrix::from_rows({{10, 10, 1}});
  q.track_ids = {-1};
  Rng rng(2);
  std::vector<Detection> dets{make_det(3, 4, 0, rng, 8)};
  BindResult b = bind_detections(dets, q, 4.0);
  EXPECT_EQ(b.det_for_slot[0], 0);
  EXPECT_DOUBLE_EQ(b.coarse[0].x, 3);
  EXPECT_DOUBLE_EQ(q.refpoints.at(0, 0), 3);  // reference point refined
}

TEST(BindDetections, TrackSlotKeepsIdentityOnGateHit) {
  QuerySet q;
  q.features = Matrix(2, 8);
  q.refpoints = Matrix::from_rows({{5, 5, 1}, {40, 40, 1}});
  q.track_ids = {77, -1};
  Rng rng(2);
  std::vector<Detection> dets{make_det(5.5, 5.2, 1, rng, 8)};
  BindResult b = bind_detections(dets, q, 4.0);
  EXPECT_EQ(b.det_for_slot[0], 0);  // the track slot wins within the gate
  EXPECT_EQ(b.det_for_slot[1], -1);
  EXPECT_EQ(q.track_ids[0], 77);
}

TEST(BindDetections, MatchesGreedyNearestOracle) {
  // oracle: sort all (slot, det) pairs by distance, sweep greedily
  Rng rng(123);
  for (int trial = 0; trial < 30; ++trial) {
    const int n_slots = rng.uniform_int(1, 6);
    const int n_dets = rng.uniform_int(1, 6);
    QuerySet q;
    q.features = Matrix(n_slots, 8);
    q.refpoints = Matrix(n_slots, 3);
    q.track_ids.assign(n_slots, -1);
    for (int i = 0; i < n_slots; ++i) {
      q.refpoints.at(i, 0) = rng.uniform(-20, 20);
      q.refpoints.at(i, 1) = rng.uniform(-20, 20);
    }
    std::vector<Detection> dets;
    for (int j = 0; j < n_dets; ++j)
      dets.push_back(
          make_det(rng.uniform(-20, 20), rng.uniform(-20, 20), j, rng, 8));
    QuerySet q2 = q;
    BindResult got = bind_detections(dets, q, 4.0);

    struct Pair {
      double d2;
      int s, dj;
    };
    std::vector<Pair> pairs;
    for (int s = 0; s < n_slots; ++s)
      for (int dj = 0; dj < n_dets; ++dj) {
        const double dx = q2.refpoints.at(s, 0) - dets[dj].box.x;
        const double dy = q2.refpoints.at(s, 1) - dets[dj].box.y;
        pairs.push_back({dx * dx + dy * dy, s, dj});
      }
    std::sort(pairs.begin(), pairs.end(),
              [](const Pair& a, const Pair& b) { return a.d2 < b.d2; });
    std::vector<int> want(n_slots, -1);
    std::vector<bool> used(n_dets, false);
    for (const Pair& p : pairs) {
      if (want[p.s] >= 0 || used[p.dj]) continue;
      want[p.s] = p.dj;
      used[p.dj] = true;
    }
    EXPECT_EQ(got.det_for_slot, want) << "trial " << trial;
  }
}

TEST(Mdfe, EmptyFrameGivesEmptyFeatures) {
  ParamStore ps;
  ModelConfig cfg = small_cfg();
  AgentModel m = make_model(ps, cfg);
  HistoryBuffer hist(cfg.tau);
  QuerySet q;
  q.features = Matrix(0, cfg.d);
  q.refpoints = Matrix(0, 3);
  MdfeOutput out = mdfe_forward(m, ps, {}, q, hist, 4.0);
  EXPECT_EQ(out.feats.m.rows, 0);
  EXPECT_EQ(out.feats.s.rows, 0);
  EXPECT_EQ(hist.tracked_ids(), 0u);
}

TEST(Mdfe, DeterministicForward) {
  ParamStore ps;
  ModelConfig cfg = small_cfg();
  AgentModel m = make_model(ps, cfg);
  Rng rng(31);
  std::vector<Detection> dets{make_det(1, 2, 0, rng, cfg.d),
                              make_det(8, -3, 1, rng, cfg.d)};
  auto run = [&]() {
    HistoryBuffer hist(cfg.tau);
    QuerySet q;
    q.features = Matrix(3, cfg.d, 0.1);
    q.refpoints = Matrix::from_rows({{0, 0, 1}, {6, -2, 1}, {20, 20, 1}});
    q.track_ids = {-1, -1, -1};
    return mdfe_forward(m, ps, dets, q, hist, 4.0);
  };
  MdfeOutput a = run();
  MdfeOutput b = run();
  EXPECT_DOUBLE_EQ(max_abs_diff(a.feats.m, b.feats.m), 0);
  EXPECT_DOUBLE_EQ(max_abs_diff(a.feats.s, b.feats.s), 0);
}

TEST(Mdfe, SeparateAgentParameterSetsAreDisjoint) {
  ParamStore ps;
  ModelConfig cfg = small_cfg();
  AgentModel veh = make_model(ps, cfg, 5, "veh");
  AgentModel inf = make_model(ps, cfg, 6, "inf");
  Rng rng(32);
  std::vector<Detection> dets{make_det(1, 2, 0, rng, cfg.d)};
  auto run_inf = [&]() {
    HistoryBuffer hist(cfg.tau);
    QuerySet q;
    q.features = Matrix(1, cfg.d, 0.1);
    q.refpoints = Matrix::from_rows({{0, 0, 1}});
    q.track_ids = {-1};
    return mdfe_forward(inf, ps, dets, q, hist, 4.0);
  };
  MdfeOutput before = run_inf();
  for (double& v : ps.at("veh.sem.w0").value.data) v += 100.0;
  MdfeOutput after = run_inf();
  EXPECT_DOUBLE_EQ(max_abs_diff(before.feats.s, after.feats.s), 0);
}

TEST(Mdfe, EndToEndGradientMatchesFiniteDifferences) {
  ParamStore ps;
  ModelConfig cfg = small_cfg();
  AgentModel m = make_model(ps, cfg);
  Rng rng(33);
  std::vector<Detection> dets{make_det(1, 2, 0, rng, cfg.d),
                              make_det(8, -3, 1, rng, cfg.d),
                              make_det(-5, 6, 2, rng, cfg.d)};
  // history for one slot so temporal cross-attention is active
  HistoryBuffer base_hist(cfg.tau);
  base_hist.push(42, random_matrix(1, cfg.d, rng, 0.3),
                 random_matrix(1, cfg.d, rng, 0.3));
  Matrix cm = random_matrix(3, cfg.d, rng);
  Matrix cs = random_matrix(3, cfg.d, rng);
  auto make_queries = [&]() {
    QuerySet q;
    q.features = Matrix(3, cfg.d, 0.1);
    q.refpoints = Matrix::from_rows({{1.5, 2.5, 1}, {7, -2, 1}, {-5, 5, 1}});
    q.track_ids = {42, -1, -1};
    return q;
  };
  auto loss = [&]() {
    HistoryBuffer hist = base_hist;
    QuerySet q = make_queries();
    MdfeOutput out = mdfe_forward(m, ps, dets, q, hist, 4.0, nullptr, false);
    return project(out.feats.m, cm) + project(out.feats.s, cs);
  };
  ps.zero_grads();
  {
    HistoryBuffer hist = base_hist;
    QuerySet q = make_queries();
    MdfeCache cache;
    mdfe_forward(m, ps, dets, q, hist, 4.0, &cache, false);
    mdfe_backward(m, ps, cache, cm, cs);
  }
  auto rep = check_param_gradients(ps, loss, 1e-5, 5, 11);
  EXPECT_LT(rep.max_rel_err, 1e-3) << rep.worst_param;
}
