#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "reconalign/alignment.hpp"
#include "reconalign/geometry.hpp"
#include "reconalign/grounding.hpp"
#include "reconalign/matching.hpp"
#include "reconalign/transfer.hpp"

// Line-oriented text formats with a '#' header carrying the format version;
// large arrays (feature descriptors, flow grids) live in a raw little-endian
// binary blob next to the text sidecar. See docs/FORMATS.md for the exact
// layouts. All floating-point fields are written with 17 significant digits,
// so text round trips are lossless.

namespace reconalign {

/// Shortest exact decimal representation fitting 17 significant digits.
std::string format_double(double value);

/// Strict double parser; throws ParseError on trailing garbage.
double parse_double(const std::string& token, const std::string& context);

// reconstruction (.rec)
void save_reconstruction(const std::filesystem::path& path,
                         const Reconstruction& rec);
Reconstruction load_reconstruction(const std::filesystem::path& path);

// local features (.lfd + .lfd.bin)
void save_features(const std::filesystem::path& path,
                   const std::vector<LocalFeatureSet>& features);
std::vector<LocalFeatureSet> load_features(const std::filesystem::path& path);

// global descriptors (.gdv)
void save_global_descriptors(const std::filesystem::path& path,
                             const std::vector<GlobalDescriptor>& descriptors);
std::vector<GlobalDescriptor> load_global_descriptors(
    const std::filesystem::path& path);

// dense flow (.flo2 + .flo2.bin)
void save_flows(const std::filesystem::path& path,
                const std::vector<FlowField>& flows);
std::vector<FlowField> load_flows(const std::filesystem::path& path);

// matches (.m2d)
void save_matches(const std::filesystem::path& path,
                  const std::vector<MatchSet>& match_sets);
std::vector<MatchSet> load_matches(const std::filesystem::path& path);

// alignment graph (.agr)
void save_alignment_graph(const std::filesystem::path& path,
                          const AlignmentGraph& graph);
AlignmentGraph load_alignment_graph(const std::filesystem::path& path);

// 2D keypoint annotations (.kp2)
void save_annotations(const std::filesystem::path& path,
                      const std::vector<KeypointAnnotation2D>& annotations);
std::vector<KeypointAnnotation2D> load_annotations(
    const std::filesystem::path& path);

// named 3D keypoints per video (.kp3)
void save_keypoints3d(const std::filesystem::path& path,
                      const std::map<std::string, Keypoints3D>& by_video);
std::map<std::string, Keypoints3D> load_keypoints3d(
    const std::filesystem::path& path);

// narration segments (.nar, tab-separated so text may contain spaces)
void save_narration(const std::filesystem::path& path,
                    const std::vector<NarrationSegment>& segments);
std::vector<NarrationSegment> load_narration(const std::filesystem::path& path);

// hand detections (.det)
void save_detections(const std::filesystem::path& path,
                     const std::vector<Detection2D>& detections);
std::vector<Detection2D> load_detections(const std::filesystem::path& path);

// saliency maps (.sal)
void save_saliency(const std::filesystem::path& path,
                   const std::vector<SaliencyMap>& maps);
std::vector<SaliencyMap> load_saliency(const std::filesystem::path& path);

// PCK curves (.pck): one threshold column plus named value series.
struct PckTable {
  std::vector<double> thresholds_cm;
  std::vector<std::pair<std::string, std::vector<double>>> series;
};
void save_pck(const std::filesystem::path& path, const PckTable& table);
PckTable load_pck(const std::filesystem::path& path);

// grounding queries (.qry, tab-separated)
void save_queries(const std::filesystem::path& path,
                  const std::vector<GroundingQuery>& queries);
std::vector<GroundingQuery> load_queries(const std::filesystem::path& path);

// grounding checkpoint (.gmod, binary): encoder, per-model heads and their
// voxel grids.
struct GroundingCheckpoint {
  GroundingModel model;
  std::map<std::string, VoxelGrid> grids;
};
void save_grounding_checkpoint(const std::filesystem::path& path,
                               const GroundingCheckpoint& checkpoint);
GroundingCheckpoint load_grounding_checkpoint(const std::filesystem::path& path);

/// Per-video file references. Paths are stored relative to the manifest.
struct ManifestEntry {
  std::string video_id;
  std::string group = "default";
  std::optional<std::string> reconstruction;
  std::optional<std::string> features;
  std::optional<std::string> global_descriptors;
  std::optional<std::string> flows;
  std::optional<std::string> narration;
  std::optional<std::string> detections;
  std::optional<std::string> saliency;
};

struct Manifest {
  std::filesystem::path directory;  // resolved at load time
  std::vector<ManifestEntry> entries;
};

void save_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest load_manifest(const std::filesystem::path& path);

struct VideoData {
  std::string group = "default";
  std::optional<Reconstruction> reconstruction;
  std::vector<LocalFeatureSet> features;
  std::vector<GlobalDescriptor> global_descriptors;
  std::vector<FlowField> flows;
  std::vector<NarrationSegment> narration;
  std::vector<Detection2D> detections;
  std::vector<SaliencyMap> saliency;
};

struct Dataset {
  std::map<std::string, VideoData> videos;
};

struct LoadOptions {
  /// Reconstructions with fewer points are discarded at ingestion.
  int min_model_points = 50;
  /// Per video, only the first max_frames_per_video frames (sorted by id)
  /// are kept; dependent records (observations, features, descriptors,
  /// flows, narration, detections, saliency) are filtered accordingly.
  /// Zero disables the cap.
  int max_frames_per_video = 200;
};

struct LoadResult {
  Dataset dataset;
  std::vector<std::string> discarded_videos;  // below min_model_points
};

/// Loads and validates every file referenced by the manifest. Violated
/// invariants raise InvariantViolation naming the record; missing files raise
/// MissingFile; malformed content raises ParseError with file/line context.
LoadResult load_dataset(const std::filesystem::path& manifest_path,
                        const LoadOptions& options = {});

}  // namespace reconalign
