#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "reconalign/geometry.hpp"
#include "reconalign/matching.hpp"

namespace reconalign {

/// A lifted 3D-3D correspondence between two reconstructions.
struct Correspondence3D {
  Vec3 point_a;  // in reconstruction A's frame
  Vec3 point_b;  // in reconstruction B's frame
  std::pair<std::string, std::string> source_pair;  // originating frame pair
};

/// Resolves 2D-2D matches into 3D-3D correspondences by looking up, on each
/// side, the observation track whose stored pixel lies within assoc_radius_px
/// of the matched pixel (nearest one; ties by lowest keypoint index). Matches
/// without a track on either side are dropped.
std::vector<Correspondence3D> lift_matches(const MatchSet& matches,
                                           const Reconstruction& rec_a,
                                           const Reconstruction& rec_b,
                                           double assoc_radius_px = 2.0);

/// Closed-form least-squares similarity fit dst ~= s * R * src + t
/// (Umeyama). The returned rotation is always proper (det +1), including for
/// mirrored inputs. Throws TooFewPoints (< 3 pairs) and
/// DegenerateConfiguration (collinear points).
SimilarityTransform3 fit_similarity_umeyama(const std::vector<Vec3>& src,
                                            const std::vector<Vec3>& dst);

struct RansacConfig {
  /// Inlier residual threshold. Interpreted as a fraction of the target
  /// cloud's bounding-box diagonal unless threshold_is_absolute is set.
  double inlier_threshold = 0.02;
  bool threshold_is_absolute = false;
  int max_iterations = 10000;
  double confidence = 0.999;  // adaptive early-exit confidence
  int min_inliers = 12;
  double min_inlier_ratio = 0.15;
  uint64_t seed = 0;
};

struct SimilarityFit {
  SimilarityTransform3 transform;  // maps frame A points into frame B
  std::vector<int> inlier_indices;  // ascending, into the input list
  int total_count = 0;
  double inlier_rms = 0.0;  // residual RMS over inliers, frame-B units
};

/// Robust similarity estimation: RANSAC over minimal 3-point Umeyama fits
/// with adaptive termination, followed by a refit on the consensus set.
/// Returns nullopt when no model reaches min_inliers and min_inlier_ratio.
/// Throws InsufficientCorrespondences when fewer than max(3, min_inliers)
/// correspondences are supplied.
std::optional<SimilarityFit> solver_u(
    const std::vector<Correspondence3D>& correspondences,
    const RansacConfig& cfg);

/// A successfully estimated alignment between two reconstructions.
struct EdgeEstimate {
  std::string from_id;
  std::string to_id;
  SimilarityTransform3 transform;  // from_id frame -> to_id frame
  int inlier_count = 0;
  int total_count = 0;
  double inlier_rms = 0.0;
};

/// Nodes are reconstruction ids; each edge is one successful pairwise
/// alignment, stored once per unordered pair (the reverse direction is the
/// inverse transform).
struct AlignmentGraph {
  std::vector<std::string> nodes;  // sorted, unique
  std::vector<EdgeEstimate> edges;

  bool has_node(const std::string& id) const;
  void validate() const;
};

using PairwiseCorrespondences =
    std::map<std::pair<std::string, std::string>, std::vector<Correspondence3D>>;

/// Runs solver_u for every supplied pair (per-pair seeds derived from the
/// pair ids so results are independent of scheduling). Pairs that fail to
/// reach consensus simply contribute no edge; isolated nodes are kept.
AlignmentGraph build_alignment_graph(const std::vector<std::string>& node_ids,
                                     const PairwiseCorrespondences& pairwise,
                                     const RansacConfig& cfg, int threads = 1);

/// Transform mapping from_id coordinates into to_id coordinates, composed
/// along the shortest path (hop count; ties prefer the path with the largest
/// minimum inlier count, then the lexicographically smallest node sequence).
/// Throws NodesDisconnected when no path exists.
SimilarityTransform3 path_transform(const AlignmentGraph& graph,
                                    const std::string& from_id,
                                    const std::string& to_id);

struct Registration {
  /// Per node, the transform taking that node's coordinates into the
  /// reference frame. Contains the reference itself (identity).
  std::map<std::string, SimilarityTransform3> to_reference;
  std::vector<std::string> unregistered;  // nodes with no path to reference
};

Registration register_all(const AlignmentGraph& graph,
                          const std::string& reference_id);

}  // namespace reconalign
