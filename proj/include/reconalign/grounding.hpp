#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "reconalign/alignment.hpp"
#include "reconalign/geometry.hpp"
#include "reconalign/rng.hpp"
#include "reconalign/transfer.hpp"

namespace reconalign {

/// Uniform voxelization of the aligned model's bounding box. Only the
/// `active` voxels (those holding the most training points) carry class
/// labels; labels are assigned in ascending flat-index order.
struct VoxelGrid {
  Vec3 bbox_min = Vec3::Zero();
  Vec3 bbox_max = Vec3::Zero();
  int divisions = 20;
  std::vector<int64_t> active;       // sorted flat voxel indices
  std::map<int64_t, int> label_of;   // flat index -> class label

  int num_active() const { return static_cast<int>(active.size()); }

  /// Flat index of the voxel containing p (x fastest), or nullopt outside
  /// the bounding box. Bins are half-open; the top boundary per axis belongs
  /// to the last bin.
  std::optional<int64_t> flat_index_of(const Vec3& p) const;

  /// Class label at p, or nullopt when p is outside or in an inactive voxel.
  std::optional<int> label_at(const Vec3& p) const;

  Vec3 voxel_center(int64_t flat_index) const;
  Vec3 center_of_label(int label) const;
  double voxel_diagonal() const;

  void validate() const;
};

/// Bounding box from registered_points; active set = the n_v voxels with the
/// highest training-point counts (ties broken by lowest flat index). Axes
/// with zero extent are inflated by a tiny epsilon so the box stays valid.
VoxelGrid build_voxel_grid(const std::vector<Vec3>& registered_points,
                           int divisions,
                           const std::vector<Vec3>& training_points, int n_v);

/// One narrated temporal segment, reduced to its representative frame.
struct NarrationSegment {
  std::string video_id;
  std::string text;
  std::string frame_id;
};

/// Hand-detector output for one frame (consumed as data).
struct Detection2D {
  std::string frame_id;
  Vec2 pixel = Vec2::Zero();
  double confidence = 0.0;
};

/// Per-frame score map (e.g. text-video similarity), consumed as data.
struct SaliencyMap {
  std::string frame_id;
  int rows = 0;
  int cols = 0;
  std::vector<double> scores;  // rows * cols, row-major

  double at(int r, int c) const { return scores[r * cols + c]; }
};

enum class AnchorStrategy { center_of_frame, hand_detector, saliency_argmax };

std::string to_string(AnchorStrategy s);
AnchorStrategy anchor_strategy_from_string(const std::string& s);

/// 2D supervision point for a narration segment, or nullopt when the chosen
/// strategy has no evidence for the frame (e.g. no hand detected). Throws
/// MissingStrategyInput when the strategy's data source was not supplied at
/// all.
std::optional<Vec2> select_anchor(const NarrationSegment& segment,
                                  AnchorStrategy strategy,
                                  const CameraModel& camera,
                                  const std::vector<Detection2D>* detections,
                                  const SaliencyMap* saliency);

/// Nearest visible surface point: among points projecting within radius_px
/// of the pixel (positive depth), the one with minimum depth. nullopt when
/// no point qualifies.
std::optional<Vec3> backproject_to_surface(const Vec2& pixel,
                                           const CameraModel& camera,
                                           const std::vector<Vec3>& points,
                                           double radius_px = 5.0);

struct TrainingPair {
  std::string text;
  int voxel_label = 0;
  AnchorStrategy anchor_strategy = AnchorStrategy::center_of_frame;
  Vec3 world_point = Vec3::Zero();  // reference frame, inside the voxel
};

struct TrainingPairReport {
  std::vector<TrainingPair> pairs;
  /// Drop counts keyed by reason: unknown_video, unregistered_video,
  /// unknown_frame, no_anchor, backprojection_failed, outside_bbox,
  /// inactive_voxel.
  std::map<std::string, int> dropped;
};

struct SegmentContext {
  const std::map<std::string, Reconstruction>* reconstructions = nullptr;
  const std::map<std::string, SimilarityTransform3>* to_reference = nullptr;
  const std::vector<Detection2D>* detections = nullptr;  // nullable
  const std::vector<SaliencyMap>* saliency_maps = nullptr;  // nullable
  double surface_radius_px = 5.0;
};

/// Anchor point of one segment backprojected onto its video's model and
/// mapped into the reference frame. Reports a drop reason instead of a point
/// when any stage fails.
struct SegmentWorldPoint {
  std::optional<Vec3> world_point;
  std::string drop_reason;  // empty on success
};
SegmentWorldPoint segment_world_point(const NarrationSegment& segment,
                                      AnchorStrategy strategy,
                                      const SegmentContext& ctx);

/// Full training-pair generation: anchor -> backproject -> transform to the
/// reference frame -> voxel lookup, with per-reason drop accounting.
TrainingPairReport generate_training_pairs(
    const std::vector<NarrationSegment>& segments, AnchorStrategy strategy,
    const VoxelGrid& grid, const SegmentContext& ctx);

struct TrainConfig {
  int embedding_dim = 1024;
  int vocab_buckets = 1 << 15;
  double learning_rate = 0.05;
  double momentum = 0.9;
  int batch_size = 64;
  int epochs = 50;
  double embedding_init_stddev = 0.1;
  uint64_t seed = 0;
};

/// Lowercases, splits on non-alphanumeric characters and hashes each token
/// into [0, vocab_buckets).
std::vector<int> hash_tokens(const std::string& text, int vocab_buckets);

/// Shared bag-of-hashed-tokens text encoder plus one linear scoring head per
/// model. Heads are initialized to zero so an untrained model scores every
/// voxel uniformly.
struct GroundingModel {
  int vocab_buckets = 0;
  int embedding_dim = 0;
  Eigen::MatrixXd embeddings;  // vocab_buckets x d

  struct Head {
    Eigen::MatrixXd weight;  // d x N_v
    Eigen::VectorXd bias;    // N_v
  };
  std::map<std::string, Head> heads;

  /// Mean-pooled token embedding (zero vector for token-free text).
  Eigen::VectorXd encode(const std::string& text) const;
};

struct TrainingSample {
  std::string model_id;
  const TrainingPair* pair = nullptr;
};

/// Summed cross-entropy of the softmax voxel scores over the samples;
/// optionally accumulates analytic gradients (same shapes as the model).
struct GroundingGradients {
  Eigen::MatrixXd d_embeddings;
  std::map<std::string, GroundingModel::Head> d_heads;
};
double grounding_loss(const GroundingModel& model,
                      const std::vector<TrainingSample>& samples,
                      GroundingGradients* gradients = nullptr);

struct TrainOutcome {
  GroundingModel model;
  std::vector<double> epoch_losses;  // full-set loss per sample, per epoch
};

/// Joint mini-batch SGD (momentum) over all models' training pairs; the
/// encoder receives gradients from every head. Samples are canonicalized
/// before the seed-derived shuffle, so the result does not depend on input
/// order. Throws EmptyTrainingSet / LabelOutOfRange on bad input.
TrainOutcome train_grounding(
    const std::map<std::string, std::vector<TrainingPair>>& pairs_by_model,
    const std::map<std::string, VoxelGrid>& grids, const TrainConfig& cfg);

struct QueryResult {
  Eigen::VectorXd scores;  // softmax over the model's active voxels
  int predicted_label = 0;
  Vec3 predicted_point = Vec3::Zero();  // center of the argmax voxel
};

QueryResult ground_query(const GroundingModel& model,
                         const std::string& model_id, const std::string& text,
                         const VoxelGrid& grid);

/// Uniformly random active-voxel center (the "chance" baseline).
Vec3 chance_baseline(const VoxelGrid& grid, Rng& rng);

struct GroundingQuery {
  std::string model_id;
  std::string object_class;  // optional grouping key for the per-class table
  std::string text;
  Vec3 gt_point = Vec3::Zero();  // reference frame of model_id
};

struct GroundingEval {
  PckCurve method;
  PckCurve chance;
  /// Per object class (sorted): class name -> (chance curve, method curve).
  std::map<std::string, std::pair<PckCurve, PckCurve>> per_class;
  int query_count = 0;
};

/// Pooled PCK over all queries plus the per-class breakdown; the chance
/// baseline is drawn once per query from chance_seed.
GroundingEval evaluate_grounding_pck(
    const std::vector<GroundingQuery>& queries, const GroundingModel& model,
    const std::map<std::string, VoxelGrid>& grids,
    const std::vector<double>& thresholds_cm,
    const std::map<std::string, double>& metric_scales_cm_per_unit,
    uint64_t chance_seed);

}  // namespace reconalign
