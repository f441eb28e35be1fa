#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "reconalign/io.hpp"

namespace reconalign {

/// A named 3D location of interest on the canonical object (grounding target).
struct ObjectCluster {
  std::string name;
  Vec3 position = Vec3::Zero();  // canonical frame
};

/// Configuration of the deterministic synthetic-scene generator. One shared
/// canonical object is viewed by `num_models` synthetic videos, each carrying
/// its own planted similarity transform, cameras, features and narration.
struct SyntheticSceneConfig {
  uint64_t seed = 0;
  int num_models = 3;
  int master_points = 400;   // shared object cloud size
  int cameras_per_model = 6;

  double object_extent = 1.0;     // half extent in x and y, canonical units
  double object_thickness = 0.0;  // half extent in z; 0 keeps the object planar
  double camera_distance = 3.0;

  int image_width = 640;
  int image_height = 480;
  double focal = 500.0;

  double pixel_noise = 0.0;       // sigma, px, on feature/annotation positions
  double point_noise = 0.0;       // sigma, canonical units, per-model 3D points
  double outlier_fraction = 0.0;  // corrupted fraction of planted raw matches
  double corruption_min_offset_px = 40.0;  // corrupted targets move at least this far

  double scale_min = 0.5;  // planted transform scale range
  double scale_max = 2.0;

  /// Per-model visible slice of the object along x, as fractions of the full
  /// extent. Empty means every model sees the whole object. Controls the
  /// alignment graph topology (chains, low-overlap pairs).
  std::vector<std::pair<double, double>> visibility_windows;

  int descriptor_dim = 32;
  int global_descriptor_dim = 16;
  int retrieved_pairs_per_video_pair = 12;  // frame pairs given flow + matches
  int flow_grid_divisor = 4;                // flow grid = image size / divisor

  // keypoint transfer
  int num_keypoints = 8;
  int annotated_frames_per_video = 4;

  // grounding
  std::vector<ObjectCluster> clusters;
  int cluster_points = 40;      // extra cloud points per cluster
  double cluster_radius = 0.08;
  std::vector<std::string> narration_templates;  // "{}" is the object slot
  std::vector<std::string> query_templates;      // held-out phrasings
  std::vector<int> segments_per_model;  // one entry per model; empty = none
  int queries_per_object = 2;
  int decoy_detections_per_frame = 1;
  int saliency_rows = 8;
  int saliency_cols = 14;

  void validate() const;  // throws InvalidConfig
};

/// Everything the generator knows to be true, for scoring pipeline stages.
struct GroundTruthBundle {
  /// Per video id, the planted transform canonical -> that video's frame.
  /// The planted alignment between videos a and b is
  /// compose(canonical_to_model[b], invert(canonical_to_model[a])).
  std::map<std::string, SimilarityTransform3> canonical_to_model;
  Keypoints3D canonical_keypoints;
  std::vector<ObjectCluster> clusters;
  /// Planted corrupted rows per raw match file (video pair).
  std::map<std::pair<std::string, std::string>, int> corrupted_match_counts;
  double pixel_noise = 0.0;
  double point_noise = 0.0;
};

struct SyntheticScene {
  std::map<std::string, VideoData> videos;
  /// Raw mutual matches per video pair (ids ascending), with the configured
  /// fraction of corrupted rows planted.
  std::map<std::pair<std::string, std::string>, std::vector<MatchSet>>
      raw_matches;
  /// Planted per-video 3D keypoints (each video's own frame), the transfer
  /// evaluation ground truth.
  std::map<std::string, Keypoints3D> gt_keypoints;
  std::map<std::string, std::vector<KeypointAnnotation2D>> annotations;
  /// Grounding queries; gt_point is in the query's own video frame (each
  /// video doubles as one grounding model analogue).
  std::vector<GroundingQuery> queries;
  GroundTruthBundle ground_truth;
};

/// Deterministic for a fixed config (byte-identical files after saving).
/// Before noise injection the generated observations, matches and flow are
/// exactly consistent with the planted geometry.
SyntheticScene generate_synthetic_scene(const SyntheticSceneConfig& cfg);

/// Writes the scene as a loadable dataset: manifest + per-video files, raw
/// match files, annotations, ground-truth keypoints, queries and the
/// ground-truth bundle.
void save_synthetic_scene(const std::filesystem::path& directory,
                          const SyntheticScene& scene);

void save_ground_truth(const std::filesystem::path& path,
                       const GroundTruthBundle& bundle);
GroundTruthBundle load_ground_truth(const std::filesystem::path& path);

}  // namespace reconalign
