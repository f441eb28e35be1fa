#pragma once

#include <string>
#include <vector>

#include "reconalign/geometry.hpp"

namespace reconalign {

/// Local features of one frame: descriptor columns plus pixel positions.
struct LocalFeatureSet {
  std::string frame_id;
  Eigen::MatrixXd descriptors;   // d_L x N_L
  Eigen::Matrix2Xd positions;    // 2 x N_L, pixels
};

/// Image-level descriptor of one frame.
struct GlobalDescriptor {
  std::string frame_id;
  Eigen::VectorXd vector;
};

/// Dense 2D->2D mapping between a frame pair, sampled on a regular grid over
/// the source frame plus a per-cell validity mask. Cell (ix, iy) holds the
/// mapping for the source pixel at the cell's center.
struct FlowField {
  std::string source_frame_id;
  std::string target_frame_id;
  int grid_width = 0;
  int grid_height = 0;
  int source_width = 0;   // pixels of the source frame
  int source_height = 0;
  std::vector<Vec2> mapped;     // grid_height * grid_width, row-major
  std::vector<uint8_t> valid;   // same layout, 0 or 1

  const Vec2& at(int ix, int iy) const { return mapped[iy * grid_width + ix]; }
  bool valid_at(int ix, int iy) const { return valid[iy * grid_width + ix] != 0; }
};

enum class MatchStage { raw_mutual, flow_filtered };

std::string to_string(MatchStage stage);
MatchStage match_stage_from_string(const std::string& s);

struct Match {
  int index_a = 0;
  int index_b = 0;
  Vec2 pixel_a = Vec2::Zero();
  Vec2 pixel_b = Vec2::Zero();
};

/// One-to-one 2D-2D correspondences between a frame pair.
struct MatchSet {
  std::string frame_a;
  std::string frame_b;
  std::vector<Match> matches;
  MatchStage stage = MatchStage::raw_mutual;
};

/// Mutual nearest-neighbor matching on L2-normalized descriptors. Ties are
/// broken toward the lowest index, so the result does not depend on thread
/// count or memory layout.
MatchSet mutual_nn_match(const LocalFeatureSet& a, const LocalFeatureSet& b);

struct FramePairCandidate {
  std::string frame_a;
  std::string frame_b;
  double similarity = 0.0;
};

/// Top n_m cross-video frame pairs by cosine similarity, sorted descending
/// (ties by frame ids ascending). Returns fewer when |A|*|B| < n_m.
std::vector<FramePairCandidate> retrieve_frame_pairs(
    const std::vector<GlobalDescriptor>& video_a,
    const std::vector<GlobalDescriptor>& video_b, int n_m);

/// Keeps the matches whose mapped source pixel lands within tolerance_px of
/// the matched target pixel. The flow grid is sampled bilinearly; matches in
/// invalid flow regions are rejected.
MatchSet flow_filter(const MatchSet& matches, const FlowField& flow,
                     double tolerance_px);

}  // namespace reconalign
