#include "recon3d/geometry.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <random>

using namespace recon3d;

namespace {

CameraIntrinsics unit_k() {
  CameraIntrinsics k;
  k.fx = k.fy = 1;
  k.cx = k.cy = 0;
  k.width = k.height = 1;
  return k;
}

}  // namespace

TEST(Unproject, PrincipalRay) {
  const auto p = unproject_pixel(0, 0, 5, unit_k(), {});
  ASSERT_TRUE(p);
  EXPECT_EQ(*p, Vec3(0, 0, 5));
}

TEST(Unproject, RigidTranslation) {
  CameraExtrinsics t;
  t.translation = Vec3(1, 2, 3);
  const auto p = unproject_pixel(0, 0, 5, unit_k(), t);
  ASSERT_TRUE(p);
  EXPECT_EQ(*p, Vec3(1, 2, 8));
}

TEST(Unproject, OffsetPrincipalPointMatchesMatrixOracle) {
  CameraIntrinsics k;
  k.fx = k.fy = 2;
  k.cx = k.cy = 1;
  k.width = k.height = 4;
  const auto p = unproject_pixel(1, 3, 4, k, {});
  ASSERT_TRUE(p);
  EXPECT_NEAR((*p - Vec3(4, 0, 4)).norm(), 0, 1e-12);
  const Vec3 oracle = oracle::unproject_homogeneous(1, 3, 4, k.matrix(), Eigen::Matrix4d::Identity());
  EXPECT_NEAR((*p - oracle).norm(), 0, 1e-12);
}

TEST(Unproject, NonPositiveDepthIsInvalid) {
  EXPECT_FALSE(unproject_pixel(0, 0, 0, unit_k(), {}));
  EXPECT_FALSE(unproject_pixel(0, 0, -1, unit_k(), {}));
  EXPECT_FALSE(unproject_pixel(0, 0, std::nan(""), unit_k(), {}));
}

TEST(Unproject, RoundTripRandomCameras) {
  std::mt19937_64 rng(3);
  for (int n = 0; n < 2000; ++n) {
    const auto c = oracle::random_camera(rng);
    std::uniform_real_distribution<double> ui(0, c.k.height - 1), uj(0, c.k.width - 1), ud(0.1, 20);
    const double i = ui(rng), j = uj(rng), d = ud(rng);
    const auto p = unproject_pixel(i, j, d, c.k, c.t);
    ASSERT_TRUE(p);
    const auto back = project_point(*p, c.k, c.t);
    ASSERT_TRUE(back);
    EXPECT_NEAR(back->row, i, 1e-6);
    EXPECT_NEAR(back->col, j, 1e-6);
    EXPECT_NEAR(back->depth, d, 1e-9);
  }
}

TEST(UnprojectFrame, ConstantDepthPlane) {
  PosedFrame f;
  f.intrinsics = CameraIntrinsics::from_fov(6, 5, 1.2);
  f.depth.assign(30, 2.5f);
  const PointMap pm = unproject_frame(f);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 6; ++j) {
      ASSERT_TRUE(pm.is_valid(i, j));
      EXPECT_DOUBLE_EQ(pm.at(i, j).z(), 2.5);
    }
  }
}

TEST(UnprojectFrame, ZeroDepthAllInvalid) {
  PosedFrame f;
  f.intrinsics = CameraIntrinsics::from_fov(4, 4, 1.0);
  f.depth.assign(16, 0.0f);
  const PointMap pm = unproject_frame(f);
  EXPECT_EQ(std::count(pm.valid.begin(), pm.valid.end(), 1), 0);
}

TEST(UnprojectFrame, ShapeMismatchThrows) {
  PosedFrame f;
  f.intrinsics = CameraIntrinsics::from_fov(4, 4, 1.0);
  f.depth.assign(15, 1.0f);
  EXPECT_THROW(unproject_frame(f), std::invalid_argument);
}

TEST(UnprojectFrame, RigidInvariance) {
  std::mt19937_64 rng(11);
  PosedFrame f;
  f.intrinsics = CameraIntrinsics::from_fov(8, 6, 1.1);
  std::uniform_real_distribution<float> ud(0.5f, 4.0f);
  for (int n = 0; n < 48; ++n) f.depth.push_back(n % 7 == 0 ? 0.0f : ud(rng));
  f.extrinsics = oracle::random_camera(rng).t;
  const CameraExtrinsics g = oracle::random_camera(rng).t;
  PosedFrame moved = f;
  moved.extrinsics = g.compose(f.extrinsics);
  const PointMap a = unproject_frame(f), b = unproject_frame(moved);
  for (std::size_t n = 0; n < a.coords.size(); ++n) {
    ASSERT_EQ(a.valid[n], b.valid[n]);
    if (a.valid[n]) {
      EXPECT_NEAR((g.to_world(a.coords[n]) - b.coords[n]).norm(), 0, 1e-9);
    }
  }
}

TEST(Extrinsics, LookAtIsRotation) {
  const auto t = CameraExtrinsics::look_at(Vec3(1, 2, 1.5), Vec3(3, 3, 0.5));
  EXPECT_NO_THROW(t.validate());
  // Optical axis points at the target.
  EXPECT_NEAR((t.rotation.col(2) - (Vec3(3, 3, 0.5) - Vec3(1, 2, 1.5)).normalized()).norm(), 0, 1e-12);
}

TEST(Intrinsics, ValidateRejectsBadValues) {
  CameraIntrinsics k = CameraIntrinsics::from_fov(8, 8, 1.0);
  EXPECT_NO_THROW(k.validate());
  k.fx = 0;
  EXPECT_THROW(k.validate(), std::invalid_argument);
  k = CameraIntrinsics::from_fov(8, 8, 1.0);
  k.cx = 8;
  EXPECT_THROW(k.validate(), std::invalid_argument);
}

TEST(Sinusoid, OriginIsSinZeroCosOne) {
  const std::vector<Vec3> p{Vec3::Zero()};
  const Eigen::MatrixXd e = sinusoidal_encode(p, 24);
  for (int axis = 0; axis < 3; ++axis) {
    for (int f = 0; f < 4; ++f) {
      EXPECT_EQ(e(0, axis * 8 + f), 0.0);
      EXPECT_EQ(e(0, axis * 8 + 4 + f), 1.0);
    }
  }
}

TEST(Sinusoid, Deterministic) {
  const std::vector<Vec3> p{Vec3(0.3, -1.2, 2.2), Vec3(5, 5, 5)};
  const Eigen::MatrixXd a = sinusoidal_encode(p, 36), b = sinusoidal_encode(p, 36);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()), 0);
}

TEST(Sinusoid, AxisSeparable) {
  const std::vector<Vec3> p{Vec3(0.7, 1.9, 0.1), Vec3(0.7, 1.9, 2.6)};
  const Eigen::MatrixXd e = sinusoidal_encode(p, 48);
  EXPECT_EQ(e.block(0, 0, 1, 32), e.block(1, 0, 1, 32));
  EXPECT_NE(e.block(0, 32, 1, 16), e.block(1, 32, 1, 16));
}

TEST(Sinusoid, DimMustBeMultipleOfSix) {
  const std::vector<Vec3> p{Vec3::Zero()};
  EXPECT_THROW(sinusoidal_encode(p, 16), std::invalid_argument);
  EXPECT_THROW(sinusoidal_encode(p, 0), std::invalid_argument);
}

TEST(Sinusoid, BoundedAndInjectiveOnGrid) {
  // 16^3 grid with spacing 0.1 m, finer than the 0.25 m shortest wavelength.
  std::vector<Vec3> pts;
  for (int a = 0; a < 16; ++a)
    for (int b = 0; b < 16; ++b)
      for (int c = 0; c < 16; ++c) pts.emplace_back(0.1 * a, 0.1 * b, 0.1 * c);
  const Eigen::MatrixXd e = sinusoidal_encode(pts, 96);
  EXPECT_LE(e.cwiseAbs().maxCoeff(), 1.0);
  // Injective: per-axis blocks separate distinct grid coordinates.
  for (int axis = 0; axis < 3; ++axis) {
    for (int a = 0; a < 16; ++a) {
      for (int b = a + 1; b < 16; ++b) {
        const std::vector<Vec3> two{Vec3::Constant(0.1 * a), Vec3::Constant(0.1 * b)};
        const Eigen::MatrixXd t = sinusoidal_encode(two, 96);
        EXPECT_GT((t.row(0).segment(axis * 32, 32) - t.row(1).segment(axis * 32, 32)).norm(), 1e-3);
      }
    }
  }
}

TEST(Bev, SinglePointAtCenter) {
  BevConfig cfg;
  cfg.x_min = -2;
  cfg.x_max = 2;
  cfg.y_min = -2;
  cfg.y_max = 2;
  cfg.resolution = 9;  // odd: the bounds center lies inside cell (4, 4)
  const std::vector<ColoredPoint> pts{{Vec3(0, 0, 1), Eigen::Vector3f(1, 0, 0)}};
  const BevSplat s = project_to_bev(pts, cfg);
  const auto oracle = oracle::bev_splat(pts, cfg);
  EXPECT_EQ(s.occupancy, oracle.occupancy);
  EXPECT_EQ(std::count(s.occupancy.begin(), s.occupancy.end(), 1), 1);
  EXPECT_EQ(s.occupancy[4 * 9 + 4], 1);
}

TEST(Bev, EmptyCloud) {
  BevConfig cfg;
  const BevSplat s = project_to_bev({}, cfg);
  EXPECT_TRUE(std::all_of(s.image.rgb.begin(), s.image.rgb.end(), [](float v) { return v == 0; }));
  EXPECT_TRUE(std::all_of(s.occupancy.begin(), s.occupancy.end(), [](auto v) { return v == 0; }));
}

TEST(Bev, HighestPointWins) {
  BevConfig cfg;
  cfg.resolution = 8;
  const std::vector<ColoredPoint> pts{{Vec3(0.5, 0.5, 2.0), Eigen::Vector3f(0, 0, 1)},
                                      {Vec3(0.5, 0.5, 0.2), Eigen::Vector3f(1, 0, 0)}};
  const BevSplat s = project_to_bev(pts, cfg);
  const auto cell = cfg.cell(0.5, 0.5);
  ASSERT_TRUE(cell);
  const std::size_t idx = static_cast<std::size_t>(cell->first) * 8 + cell->second;
  EXPECT_EQ(s.image.rgb[idx * 3 + 2], 1.0f);
  EXPECT_EQ(s.image.rgb[idx * 3], 0.0f);
}

TEST(Bev, MatchesBruteForceOracle) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto [pts, cfg] = oracle::random_cloud(rng, 500);
    const BevSplat s = project_to_bev(pts, cfg);
    const auto o = oracle::bev_splat(pts, cfg);
    EXPECT_EQ(s.occupancy, o.occupancy);
    EXPECT_EQ(s.image.rgb, o.rgb);
  }
}

TEST(BlankMask, FullAndEmpty) {
  BevImage im{16, std::vector<float>(16 * 16 * 3, 0.5f)};
  const std::vector<std::uint8_t> full(256, 1), empty(256, 0);
  const auto a = blank_mask(im, full, 8);
  const auto b = blank_mask(im, empty, 8);
  EXPECT_EQ(a, std::vector<std::uint8_t>(4, 1));
  EXPECT_EQ(b, std::vector<std::uint8_t>(4, 0));
}

TEST(BlankMask, SinglePixelSelectsItsToken) {
  BevImage im{32, std::vector<float>(32 * 32 * 3, 0.0f)};
  for (int r = 0; r < 32; r += 5) {
    for (int c = 0; c < 32; c += 3) {
      std::vector<std::uint8_t> occ(32 * 32, 0);
      occ[static_cast<std::size_t>(r) * 32 + c] = 1;
      const auto m = blank_mask(im, occ, 8);
      for (int tr = 0; tr < 4; ++tr) {
        for (int tc = 0; tc < 4; ++tc) EXPECT_EQ(m[static_cast<std::size_t>(tr) * 4 + tc], (tr == r / 8 && tc == c / 8) ? 1 : 0);
      }
    }
  }
}

TEST(BlankMask, ShapeMismatchThrows) {
  BevImage im{16, std::vector<float>(16 * 16 * 3, 0.0f)};
  const std::vector<std::uint8_t> occ(100, 0);
  EXPECT_THROW(blank_mask(im, occ, 8), std::invalid_argument);
}

TEST(BoxIou, AnalyticOracle) {
  std::mt19937_64 rng(17);
  for (int n = 0; n < 1000; ++n) {
    const Box3 a = oracle::random_box(rng), b = oracle::random_box(rng);
    EXPECT_NEAR(box_iou(a, b), oracle::aabb_iou(a, b), 1e-9);
  }
}

TEST(BoxIou, IdenticalDisjointHalfOverlap) {
  const Box3 a{Vec3(0, 0, 0), Vec3(2, 1, 1)};
  EXPECT_DOUBLE_EQ(box_iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(box_iou(a, Box3{Vec3(5, 5, 5), Vec3(6, 6, 6)}), 0.0);
  // b shares half of a's volume: IoU = 1 / (2 + 2 - 1) = 1/3.
  const Box3 b{Vec3(1, 0, 0), Vec3(3, 1, 1)};
  EXPECT_NEAR(box_iou(a, b), 1.0 / 3.0, 1e-12);
  EXPECT_GT(box_iou(a, b), 0.25);
  EXPECT_LT(box_iou(a, b), 0.5);
}
