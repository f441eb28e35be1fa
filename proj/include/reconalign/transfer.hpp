#pragma once

#include <string>
#include <vector>

#include "reconalign/alignment.hpp"
#include "reconalign/geometry.hpp"

namespace reconalign {

/// A manual 2D keypoint annotation in one frame of one video.
struct KeypointAnnotation2D {
  std::string video_id;
  std::string frame_id;
  std::string keypoint_name;
  Vec2 pixel = Vec2::Zero();
};

/// Fraction of keypoints within each distance threshold, thresholds in
/// centimeters and ascending.
struct PckCurve {
  std::vector<double> thresholds_cm;
  std::vector<double> values;
};

struct TriangulatedKeypoints {
  Keypoints3D keypoints;
  /// Per triangulated keypoint, the mean reprojection error in pixels
  /// (aligned with keypoints.names).
  std::vector<double> mean_reprojection_errors_px;
  /// Keypoints that could not be triangulated: (name, reason).
  std::vector<std::pair<std::string, std::string>> dropped;
};

/// Triangulates each named keypoint from its annotated frames in `rec`.
/// Keypoints with fewer than two usable annotations or degenerate geometry
/// are reported in `dropped` rather than failing the whole call.
TriangulatedKeypoints triangulate_keypoints(
    const std::vector<KeypointAnnotation2D>& annotations,
    const Reconstruction& rec);

/// Columnwise transform application; names are preserved.
Keypoints3D transfer_keypoints(const Keypoints3D& k_src,
                               const SimilarityTransform3& s);

/// Least-squares similarity between keypoint sets matched by name (the
/// ground-truth fit used for evaluation). Throws TooFewCommonKeypoints when
/// fewer than three names are shared.
SimilarityTransform3 fit_gt_transform(const Keypoints3D& k_src,
                                      const Keypoints3D& k_tgt);

/// RMS residual of the best similarity fit between the common keypoints,
/// as a fraction of the target keypoint cloud's bounding-box diagonal.
/// Used to admit video pairs whose annotations have a consistent 3D shape.
double keypoint_consistency_residual(const Keypoints3D& k_src,
                                     const Keypoints3D& k_tgt);

/// PCK over keypoints matched by name. metric_scale_cm_per_unit converts
/// model units to centimeters. Thresholds must be ascending.
PckCurve pck_3d(const Keypoints3D& predicted, const Keypoints3D& ground_truth,
                const std::vector<double>& thresholds_cm,
                double metric_scale_cm_per_unit);

/// Pointwise mean of curves sharing one threshold grid.
PckCurve mean_pck_over_pairs(const std::vector<PckCurve>& curves);

}  // namespace reconalign
