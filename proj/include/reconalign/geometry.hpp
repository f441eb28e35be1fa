#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "reconalign/errors.hpp"

namespace reconalign {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat34 = Eigen::Matrix<double, 3, 4>;

/// Similarity transform x -> scale * rotation * x + translation.
/// `rotation` is always a proper rotation (orthonormal, det +1); the factory
/// re-orthonormalizes inputs that drifted by less than 1e-6 and rejects
/// anything further off, so composition chains cannot silently degrade.
struct SimilarityTransform3 {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static SimilarityTransform3 identity() { return {}; }

  /// Validating constructor. Throws InvalidTransform on non-positive scale,
  /// non-finite entries, a reflection, or a matrix too far from orthonormal.
  static SimilarityTransform3 from_parts(double scale, const Mat3& rotation,
                                         const Vec3& translation);

  /// Equivalent 4x4 homogeneous matrix (last row 0 0 0 1).
  Eigen::Matrix4d as_matrix() const;
};

Vec3 apply_transform(const SimilarityTransform3& t, const Vec3& p);

/// compose(t2, t1) applies t1 first: result(p) == t2(t1(p)).
SimilarityTransform3 compose(const SimilarityTransform3& t2,
                             const SimilarityTransform3& t1);

SimilarityTransform3 invert(const SimilarityTransform3& t);

/// Pinhole camera. `rotation`/`translation` map world points into the camera
/// frame; `intrinsics` is upper triangular with K(2,2) == 1.
struct CameraModel {
  Mat3 intrinsics = Mat3::Identity();
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  int width = 0;
  int height = 0;

  static CameraModel create(const Mat3& intrinsics, const Mat3& rotation,
                            const Vec3& translation, int width, int height);

  /// Position of the projection center in world coordinates.
  Vec3 center() const { return -(rotation.transpose() * translation); }

  Mat34 projection_matrix() const;

  /// Throws InvariantViolation if any camera invariant does not hold.
  void validate() const;
};

struct Projection {
  Vec2 pixel;
  double depth = 0.0;
};

/// Projects a world point. Throws DepthNonPositive when the point is on or
/// behind the camera plane (depth <= 1e-9).
Projection project(const CameraModel& cam, const Vec3& p);

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit length
};

/// Ray through a pixel. The pixel must lie in [0,width) x [0,height);
/// otherwise PixelOutOfBounds is thrown.
Ray backproject_ray(const CameraModel& cam, const Vec2& pixel);

struct TriangulationResult {
  Vec3 point;
  double mean_reprojection_error_px = 0.0;
};

/// Homogeneous DLT triangulation over two or more observations. Throws
/// InvalidArgument for fewer than two observations and DegenerateGeometry
/// when the stacked constraints are rank-deficient or the rays are parallel.
TriangulationResult triangulate(
    const std::vector<std::pair<CameraModel, Vec2>>& observations);

/// One 2D feature observation tied to a reconstructed 3D point.
struct TrackObservation {
  std::string frame_id;
  int keypoint_index = 0;
  Vec2 pixel = Vec2::Zero();
  int64_t point_id = 0;
};

/// Sparse per-video reconstruction: 3D points, per-frame cameras and the
/// 2D -> 3D observation tracks connecting them.
struct Reconstruction {
  std::string id;
  std::map<int64_t, Vec3> points;
  std::map<std::string, CameraModel> frames;
  std::vector<TrackObservation> observations;

  /// Checks referential integrity and duplicate (frame, keypoint) pairs.
  /// Throws InvariantViolation naming the offending record.
  void validate() const;
};

/// Named 3D keypoints in some reconstruction's frame, stored columnwise.
struct Keypoints3D {
  std::vector<std::string> names;
  Eigen::Matrix3Xd coords;
};

}  // namespace reconalign
