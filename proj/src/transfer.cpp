#include "reconalign/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

namespace reconalign {

TriangulatedKeypoints triangulate_keypoints(
    const std::vector<KeypointAnnotation2D>& annotations,
    const Reconstruction& rec) {
  std::map<std::string, std::vector<std::pair<CameraModel, Vec2>>> per_name;
  std::set<std::string> unregistered;
  for (const auto& a : annotations) {
    if (!a.video_id.empty() && a.video_id != rec.id) continue;
    auto frame_it = rec.frames.find(a.frame_id);
    if (frame_it == rec.frames.end()) {
      unregistered.insert(a.keypoint_name);
      per_name.try_emplace(a.keypoint_name);
      continue;
    }
    const CameraModel& cam = frame_it->second;
    if (a.pixel.x() < 0 || a.pixel.x() >= cam.width || a.pixel.y() < 0 ||
        a.pixel.y() >= cam.height) {
      throw InvariantViolation("annotation '" + a.keypoint_name + "' on frame '" +
                               a.frame_id + "' lies outside the frame bounds");
    }
    per_name[a.keypoint_name].push_back({cam, a.pixel});
  }

  TriangulatedKeypoints out;
  std::vector<std::pair<std::string, Vec3>> accepted;
  for (const auto& [name, views] : per_name) {
    if (views.size() < 2) {
      out.dropped.push_back({name, "InsufficientViews"});
      continue;
    }
    try {
      const TriangulationResult result = triangulate(views);
      accepted.push_back({name, result.point});
      out.mean_reprojection_errors_px.push_back(
          result.mean_reprojection_error_px);
    } catch (const DegenerateGeometry&) {
      out.dropped.push_back({name, "DegenerateGeometry"});
    }
  }

  out.keypoints.names.reserve(accepted.size());
  out.keypoints.coords.resize(3, static_cast<Eigen::Index>(accepted.size()));
  for (size_t i = 0; i < accepted.size(); ++i) {
    out.keypoints.names.push_back(accepted[i].first);
    out.keypoints.coords.col(static_cast<Eigen::Index>(i)) = accepted[i].second;
  }
  return out;
}

Keypoints3D transfer_keypoints(const Keypoints3D& k_src,
                               const SimilarityTransform3& s) {
  Keypoints3D out;
  out.names = k_src.names;
  out.coords.resize(3, k_src.coords.cols());
  for (Eigen::Index c = 0; c < k_src.coords.cols(); ++c) {
    out.coords.col(c) = apply_transform(s, k_src.coords.col(c));
  }
  return out;
}

namespace {

// Columns of src/dst for keypoint names present in both sets, name-sorted.
std::pair<std::vector<Vec3>, std::vector<Vec3>> common_columns(
    const Keypoints3D& a, const Keypoints3D& b) {
  std::map<std::string, Eigen::Index> index_b;
  for (size_t i = 0; i < b.names.size(); ++i) {
    index_b[b.names[i]] = static_cast<Eigen::Index>(i);
  }
  std::vector<std::pair<std::string, Eigen::Index>> shared;
  for (size_t i = 0; i < a.names.size(); ++i) {
    if (index_b.count(a.names[i])) {
      shared.push_back({a.names[i], static_cast<Eigen::Index>(i)});
    }
  }
  std::sort(shared.begin(), shared.end());
  std::vector<Vec3> from, to;
  from.reserve(shared.size());
  to.reserve(shared.size());
  for (const auto& [name, ia] : shared) {
    from.push_back(a.coords.col(ia));
    to.push_back(b.coords.col(index_b.at(name)));
  }
  return {from, to};
}

}  // namespace

SimilarityTransform3 fit_gt_transform(const Keypoints3D& k_src,
                                      const Keypoints3D& k_tgt) {
  auto [src, dst] = common_columns(k_src, k_tgt);
  if (src.size() < 3) {
    throw TooFewCommonKeypoints(
        "fit_gt_transform: " + std::to_string(src.size()) +
        " common keypoint names, need at least 3");
  }
  return fit_similarity_umeyama(src, dst);
}

double keypoint_consistency_residual(const Keypoints3D& k_src,
                                     const Keypoints3D& k_tgt) {
  auto [src, dst] = common_columns(k_src, k_tgt);
  if (src.size() < 3) {
    throw TooFewCommonKeypoints(
        "keypoint_consistency_residual needs at least 3 common keypoints");
  }
  const SimilarityTransform3 fit = fit_similarity_umeyama(src, dst);
  double sum = 0.0;
  Vec3 lo = dst.front(), hi = dst.front();
  for (size_t i = 0; i < src.size(); ++i) {
    sum += (dst[i] - apply_transform(fit, src[i])).squaredNorm();
    lo = lo.cwiseMin(dst[i]);
    hi = hi.cwiseMax(dst[i]);
  }
  const double rms = std::sqrt(sum / static_cast<double>(src.size()));
  const double diameter = (hi - lo).norm();
  if (diameter <= 0.0) return std::numeric_limits<double>::infinity();
  return rms / diameter;
}

PckCurve pck_3d(const Keypoints3D& predicted, const Keypoints3D& ground_truth,
                const std::vector<double>& thresholds_cm,
                double metric_scale_cm_per_unit) {
  if (!(metric_scale_cm_per_unit > 0.0)) {
    throw InvalidArgument("pck_3d: metric scale must be positive");
  }
  if (!std::is_sorted(thresholds_cm.begin(), thresholds_cm.end())) {
    throw InvalidArgument("pck_3d: thresholds must be ascending");
  }
  auto [pred, gt] = common_columns(predicted, ground_truth);
  if (pred.empty()) {
    throw NoCommonKeypoints("pck_3d: no common keypoint names");
  }

  std::vector<double> distances_cm;
  distances_cm.reserve(pred.size());
  for (size_t i = 0; i < pred.size(); ++i) {
    distances_cm.push_back(metric_scale_cm_per_unit * (pred[i] - gt[i]).norm());
  }

  PckCurve curve;
  curve.thresholds_cm = thresholds_cm;
  curve.values.reserve(thresholds_cm.size());
  for (double threshold : thresholds_cm) {
    int within = 0;
    for (double d : distances_cm) {
      if (d <= threshold) ++within;
    }
    curve.values.push_back(static_cast<double>(within) /
                           static_cast<double>(distances_cm.size()));
  }
  return curve;
}

PckCurve mean_pck_over_pairs(const std::vector<PckCurve>& curves) {
  if (curves.empty()) {
    throw InvalidArgument("mean_pck_over_pairs: no curves supplied");
  }
  const auto& grid = curves.front().thresholds_cm;
  for (const auto& c : curves) {
    if (c.thresholds_cm != grid) {
      throw ThresholdGridMismatch(
          "mean_pck_over_pairs: curves use different threshold grids");
    }
    if (c.values.size() != grid.size()) {
      throw InvariantViolation("mean_pck_over_pairs: malformed curve");
    }
  }
  PckCurve mean;
  mean.thresholds_cm = grid;
  mean.values.assign(grid.size(), 0.0);
  for (const auto& c : curves) {
    for (size_t i = 0; i < grid.size(); ++i) mean.values[i] += c.values[i];
  }
  for (double& v : mean.values) v /= static_cast<double>(curves.size());
  return mean;
}

}  // namespace reconalign
