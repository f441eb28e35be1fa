#include "reconalign/geometry.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <set>
#include <sstream>

namespace reconalign {

namespace {

constexpr double kOrthoRepairLimit = 1e-6;
constexpr double kMinDepth = 1e-9;

// Nearest proper rotation in Frobenius norm (polar decomposition via SVD).
Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Mat3 flip = Mat3::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return r;
}

Mat3 checked_rotation(const Mat3& rotation, const char* what) {
  if (!rotation.allFinite()) {
    throw InvalidTransform(std::string(what) + ": non-finite rotation matrix");
  }
  const double deviation =
      (rotation.transpose() * rotation - Mat3::Identity()).norm();
  if (deviation >= kOrthoRepairLimit) {
    std::ostringstream msg;
    msg << what << ": rotation deviates from orthonormal by " << deviation;
    throw InvalidTransform(msg.str());
  }
  if (rotation.determinant() < 0.0) {
    throw InvalidTransform(std::string(what) +
                           ": rotation has negative determinant (reflection)");
  }
  // Matrices already orthonormal to machine precision pass through
  // unchanged, which keeps repeated save/load cycles bit-stable.
  if (deviation < 1e-12) return rotation;
  return nearest_rotation(rotation);
}

}  // namespace

SimilarityTransform3 SimilarityTransform3::from_parts(double scale,
                                                      const Mat3& rotation,
                                                      const Vec3& translation) {
  if (!std::isfinite(scale) || scale <= 0.0) {
    throw InvalidTransform("similarity transform requires a positive, finite scale");
  }
  if (!translation.allFinite()) {
    throw InvalidTransform("similarity transform translation must be finite");
  }
  SimilarityTransform3 t;
  t.scale = scale;
  t.rotation = checked_rotation(rotation, "similarity transform");
  t.translation = translation;
  return t;
}

Eigen::Matrix4d SimilarityTransform3::as_matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = scale * rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

Vec3 apply_transform(const SimilarityTransform3& t, const Vec3& p) {
  return t.scale * (t.rotation * p) + t.translation;
}

SimilarityTransform3 compose(const SimilarityTransform3& t2,
                             const SimilarityTransform3& t1) {
  return SimilarityTransform3::from_parts(
      t2.scale * t1.scale, t2.rotation * t1.rotation,
      t2.scale * (t2.rotation * t1.translation) + t2.translation);
}

SimilarityTransform3 invert(const SimilarityTransform3& t) {
  const Mat3 rt = t.rotation.transpose();
  return SimilarityTransform3::from_parts(1.0 / t.scale, rt,
                                          -(rt * t.translation) / t.scale);
}

CameraModel CameraModel::create(const Mat3& intrinsics, const Mat3& rotation,
                                const Vec3& translation, int width,
                                int height) {
  CameraModel cam;
  cam.intrinsics = intrinsics;
  cam.rotation = checked_rotation(rotation, "camera extrinsics");
  cam.translation = translation;
  cam.width = width;
  cam.height = height;
  cam.validate();
  return cam;
}

void CameraModel::validate() const {
  if (width <= 0 || height <= 0) {
    throw InvariantViolation("camera image size must be positive");
  }
  if (!intrinsics.allFinite() || !rotation.allFinite() ||
      !translation.allFinite()) {
    throw InvariantViolation("camera parameters must be finite");
  }
  if (std::abs(intrinsics(2, 2) - 1.0) > 1e-12 ||
      std::abs(intrinsics(1, 0)) > 1e-12 ||
      std::abs(intrinsics(2, 0)) > 1e-12 ||
      std::abs(intrinsics(2, 1)) > 1e-12) {
    throw InvariantViolation(
        "camera intrinsics must be upper triangular with K(2,2) == 1");
  }
  if (intrinsics(0, 0) <= 0.0 || intrinsics(1, 1) <= 0.0) {
    throw InvariantViolation("camera focal lengths must be positive");
  }
  const double deviation =
      (rotation.transpose() * rotation - Mat3::Identity()).norm();
  if (deviation > 1e-9 || rotation.determinant() < 0.0) {
    throw InvariantViolation("camera rotation is not a proper rotation");
  }
}

Mat34 CameraModel::projection_matrix() const {
  Mat34 rt;
  rt.leftCols<3>() = rotation;
  rt.col(3) = translation;
  return intrinsics * rt;
}

Projection project(const CameraModel& cam, const Vec3& p) {
  if (!p.allFinite()) {
    throw InvalidArgument("project: point must be finite");
  }
  const Vec3 cam_point = cam.rotation * p + cam.translation;
  if (cam_point.z() <= kMinDepth) {
    std::ostringstream msg;
    msg << "point depth " << cam_point.z() << " is not positive";
    throw DepthNonPositive(msg.str());
  }
  const Vec3 h = cam.intrinsics * cam_point;
  return Projection{Vec2(h.x() / h.z(), h.y() / h.z()), cam_point.z()};
}

Ray backproject_ray(const CameraModel& cam, const Vec2& pixel) {
  if (!(pixel.x() >= 0.0 && pixel.x() < cam.width && pixel.y() >= 0.0 &&
        pixel.y() < cam.height)) {
    std::ostringstream msg;
    msg << "pixel (" << pixel.x() << ", " << pixel.y() << ") outside [0,"
        << cam.width << ")x[0," << cam.height << ")";
    throw PixelOutOfBounds(msg.str());
  }
  const Vec3 dir_cam =
      cam.intrinsics.inverse() * Vec3(pixel.x(), pixel.y(), 1.0);
  Vec3 dir_world = cam.rotation.transpose() * dir_cam;
  dir_world.normalize();
  return Ray{cam.center(), dir_world};
}

TriangulationResult triangulate(
    const std::vector<std::pair<CameraModel, Vec2>>& observations) {
  if (observations.size() < 2) {
    throw InvalidArgument("triangulate requires at least two observations");
  }

  // All rays emanating from a single center never intersect in a point.
  bool centers_distinct = false;
  const Vec3 first_center = observations.front().first.center();
  for (const auto& [cam, pixel] : observations) {
    if ((cam.center() - first_center).norm() > 1e-9) {
      centers_distinct = true;
      break;
    }
  }
  if (!centers_distinct) {
    throw DegenerateGeometry("triangulate: all camera centers coincide");
  }

  Eigen::MatrixXd design(2 * observations.size(), 4);
  for (size_t i = 0; i < observations.size(); ++i) {
    const auto& [cam, pixel] = observations[i];
    const Mat34 p = cam.projection_matrix();
    design.row(2 * i) = pixel.x() * p.row(2) - p.row(0);
    design.row(2 * i + 1) = pixel.y() * p.row(2) - p.row(1);
  }
  for (Eigen::Index r = 0; r < design.rows(); ++r) {
    const double norm = design.row(r).norm();
    if (norm > 0.0) design.row(r) /= norm;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(design, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(2) <= 1e-9 * sv(0)) {
    throw DegenerateGeometry("triangulate: design matrix is rank-deficient");
  }
  const Eigen::Vector4d solution = svd.matrixV().col(3);
  if (std::abs(solution(3)) <= 1e-9 * solution.head<3>().norm()) {
    throw DegenerateGeometry("triangulate: rays are parallel (point at infinity)");
  }
  const Vec3 point = solution.head<3>() / solution(3);

  double error_sum = 0.0;
  for (const auto& [cam, pixel] : observations) {
    try {
      error_sum += (project(cam, point).pixel - pixel).norm();
    } catch (const DepthNonPositive&) {
      throw DegenerateGeometry(
          "triangulate: solution lies behind one of the cameras");
    }
  }
  return TriangulationResult{point,
                             error_sum / static_cast<double>(observations.size())};
}

void Reconstruction::validate() const {
  for (const auto& [point_id, point] : points) {
    if (!point.allFinite()) {
      std::ostringstream msg;
      msg << "reconstruction " << id << ": point " << point_id
          << " has non-finite coordinates";
      throw InvariantViolation(msg.str());
    }
  }
  for (const auto& [frame_id, cam] : frames) {
    try {
      cam.validate();
    } catch (const InvariantViolation& e) {
      std::ostringstream msg;
      msg << "reconstruction " << id << ": frame " << frame_id << ": "
          << e.what();
      throw InvariantViolation(msg.str());
    }
  }
  std::set<std::pair<std::string, int>> seen;
  for (const auto& obs : observations) {
    std::ostringstream where;
    where << "reconstruction " << id << ": observation (" << obs.frame_id
          << ", " << obs.keypoint_index << ")";
    if (frames.find(obs.frame_id) == frames.end()) {
      throw InvariantViolation(where.str() + " references unknown frame");
    }
    if (points.find(obs.point_id) == points.end()) {
      throw InvariantViolation(where.str() + " references unknown point " +
                               std::to_string(obs.point_id));
    }
    if (!seen.insert({obs.frame_id, obs.keypoint_index}).second) {
      throw InvariantViolation(where.str() + " is duplicated");
    }
  }
}

}  // namespace reconalign
