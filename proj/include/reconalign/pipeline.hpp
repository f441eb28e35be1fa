#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "reconalign/alignment.hpp"
#include "reconalign/grounding.hpp"
#include "reconalign/io.hpp"
#include "reconalign/transfer.hpp"

// End-to-end drivers shared by the CLI and the integration tests. Every
// driver is deterministic for a fixed config: per-pair work derives its seed
// from ids, and aggregation runs in sorted order regardless of thread count.

namespace reconalign {

struct MatchingConfig {
  int n_m = 10;                  // retrieved frame pairs per video pair
  double flow_tolerance_px = 8.0;
  double assoc_radius_px = 2.0;  // 2D observation association radius
};

struct PipelineConfig {
  uint64_t seed = 0;
  int threads = 1;
  MatchingConfig matching;
  RansacConfig ransac;
  int grid_divisions = 20;
  int grid_n_v = 500;
  TrainConfig train;
  AnchorStrategy anchor_strategy = AnchorStrategy::center_of_frame;
  double surface_radius_px = 5.0;
  double metric_scale_cm_per_unit = 100.0;
  std::vector<double> thresholds_cm;  // defaults to 1..100 cm
  double table_threshold_cm = 30.0;

  PipelineConfig();
  void validate() const;
};

/// Reads a JSON config file; absent keys keep their defaults.
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

struct PairMatchResult {
  std::string video_a;
  std::string video_b;
  std::vector<MatchSet> raw;       // one per retrieved frame pair
  std::vector<MatchSet> filtered;  // flow-filtered counterparts
  int raw_count = 0;
  int filtered_count = 0;
};

/// Frame-pair retrieval, mutual matching and flow filtering for every video
/// pair with the required inputs. Throws MissingFile when filtering is
/// requested but the flow for a retrieved frame pair is absent.
std::vector<PairMatchResult> run_matching(const Dataset& dataset,
                                          const MatchingConfig& cfg,
                                          int threads);

using VideoPairMatches =
    std::map<std::pair<std::string, std::string>, std::vector<MatchSet>>;

struct AlignmentRun {
  AlignmentGraph graph;
  Registration registration;
  /// Aggregated 3D-3D correspondence counts per video pair (pre solver).
  std::map<std::pair<std::string, std::string>, int> correspondence_counts;
};

/// Lifts filtered matches to 3D-3D correspondences (aggregated per video
/// pair), estimates edges and registers everything to the reference.
AlignmentRun run_alignment(const Dataset& dataset,
                           const VideoPairMatches& filtered_matches,
                           const std::string& reference_id,
                           const RansacConfig& ransac,
                           double assoc_radius_px, int threads);

struct TransferRun {
  Keypoints3D source_keypoints;
  std::vector<std::pair<std::string, std::string>> dropped_keypoints;
  /// Per reachable target video: transferred 3D keypoints in its frame.
  std::map<std::string, Keypoints3D> transferred;
  std::vector<std::string> disconnected_targets;
  /// Per target video: 2D projections of the transferred keypoints.
  std::map<std::string, std::vector<KeypointAnnotation2D>> projections;
};

TransferRun run_transfer(const Dataset& dataset, const AlignmentGraph& graph,
                         const std::string& source_id,
                         const std::vector<KeypointAnnotation2D>& annotations);

struct PckEvaluation {
  PckCurve mean;
  std::map<std::string, PckCurve> per_video;
  std::vector<std::string> admitted;
  /// Videos rejected by the shape-consistency filter (fit RMS >= 10% of the
  /// keypoint cloud diameter) or lacking common keypoints.
  std::vector<std::pair<std::string, std::string>> rejected;  // (video, reason)
};

PckEvaluation run_eval_pck(const std::map<std::string, Keypoints3D>& predicted,
                           const std::map<std::string, Keypoints3D>& ground_truth,
                           const std::vector<double>& thresholds_cm,
                           double metric_scale_cm_per_unit,
                           double max_consistency_residual = 0.1);

struct GroundingTrainRun {
  GroundingCheckpoint checkpoint;
  std::vector<double> epoch_losses;
  /// Per group: training pairs kept and drop accounting.
  std::map<std::string, TrainingPairReport> reports;
  /// Per group: the reference video each member was registered to.
  std::map<std::string, std::string> group_references;
  std::vector<std::string> skipped_videos;  // unregistered within their group
};

/// Builds, per manifest group, the registered cloud, voxel grid and training
/// pairs, then trains the shared-encoder model jointly over all groups.
GroundingTrainRun run_grounding_training(const Dataset& dataset,
                                         const AlignmentGraph& graph,
                                         const PipelineConfig& cfg);

}  // namespace reconalign
