#include <gtest/gtest.h>

#include "cotrack/rng.hpp"
#include "cotrack/rotation.hpp"

using namespace cotrack;

TEST(Rot6d, IdentityRoundTrip) {
  Matrix v = rot6d_encode(Matrix::identity(3));
  const double expected[6] = {1, 0, 0, 0, 1, 0};
  for (int i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(v.data[i], expected[i]);
  Matrix r = rot6d_decode(v);
  EXPECT_NEAR(max_abs_diff(r, Matrix::identity(3)), 0, 1e-15);
}

TEST(Rot6d, YawQuarterTurnRoundTrips) {
  Matrix r = rotation_z(M_PI / 2);
  Matrix back = rot6d_decode(rot6d_encode(r));
  EXPECT_LT(max_abs_diff(back, r), 1e-9);
}

TEST(Rot6d, RandomRotationsRoundTrip) {
  Rng rng(33);
  for (int i = 0; i < 1000; ++i) {
    Matrix r = random_rotation(rng);
    Matrix back = rot6d_decode(rot6d_encode(r));
    EXPECT_LT(max_abs_diff(back, r), 1e-9);
  }
}

TEST(Rot6d, DecodeAlwaysOrthonormalDetPlusOne) {
  Rng rng(34);
  for (int i = 0; i < 1000; ++i) {
    Matrix v(1, 6);
    for (double& x : v.data) x = rng.normal();
    Matrix r = rot6d_decode(v);
    EXPECT_LT(max_orthonormality_error(r), 1e-9);
    EXPECT_NEAR(det3(r), 1.0, 1e-9);
  }
}

TEST(Rot6d, DegenerateInputsThrow) {
  Matrix zero_first(1, 6);
  zero_first.data = {0, 0, 0, 1, 0, 0};
  EXPECT_THROW(rot6d_decode(zero_first), std::invalid_argument);
  Matrix parallel(1, 6);
  parallel.data = {1, 1, 0, 2, 2, 0};
  EXPECT_THROW(rot6d_decode(parallel), std::invalid_argument);
  Matrix not_rot = Matrix::identity(3);
  not_rot.at(0, 0) = 2.0;
  EXPECT_THROW(rot6d_encode(not_rot), std::invalid_argument);
}

TEST(Pose, InverseComposesToIdentity) {
  Rng rng(35);
  for (int i = 0; i < 50; ++i) {
    Pose p;
    p.r = random_rotation(rng);
    p.t = Matrix::from_rows({{rng.normal(0, 10), rng.normal(0, 10),
                              rng.normal(0, 2)}});
    Matrix pts(4, 3);
    for (double& x : pts.data) x = rng.normal(0, 20);
    Matrix there = spatial_transform(pts, p);
    Matrix back = spatial_transform(there, pose_inverse(p));
    EXPECT_LT(max_abs_diff(back, pts), 1e-9);
  }
}

TEST(Pose, IdentityAndPureTranslation) {
  Matrix pts = Matrix::from_rows({{0, 0, 0}, {1, 2, 3}});
  EXPECT_DOUBLE_EQ(max_abs_diff(spatial_transform(pts, Pose::identity()), pts),
                   0);
  Pose t = Pose::from_yaw_xyz(0, 1, 0, 0);
  Matrix out = spatial_transform(pts, t);
  EXPECT_DOUBLE_EQ(out.at(0, 0), 1);
  EXPECT_DOUBLE_EQ(out.at(0, 1), 0);
}

TEST(Pose, ComposeMatchesSequentialApplication) {
  Rng rng(36);
  Pose a, b;
  a.r = random_rotation(rng);
  a.t = Matrix::from_rows({{1, 2, 3}});
  b.r = random_rotation(rng);
  b.t = Matrix::from_rows({{-4, 0, 2}});
  Matrix pts(3, 3);
  for (double& x : pts.data) x = rng.normal(0, 5);
  Matrix seq = spatial_transform(spatial_transform(pts, a), b);
  Matrix comp = spatial_transform(pts, pose_compose(b, a));
  EXPECT_LT(max_abs_diff(seq, comp), 1e-12);
}

TEST(Rotation, PerturbationStaysProper) {
  Rng rng(37);
  Matrix r = random_rotation(rng);
  Matrix p = perturb_rotation(r, 0.1, rng);
  EXPECT_LT(max_orthonormality_error(p), 1e-12);
  EXPECT_NEAR(det3(p), 1.0, 1e-12);
}
