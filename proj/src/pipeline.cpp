#include "reconalign/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "reconalign/parallel.hpp"

#include "json.hpp"

namespace reconalign {

PipelineConfig::PipelineConfig() {
  for (int t = 1; t <= 100; ++t) thresholds_cm.push_back(t);
}

void PipelineConfig::validate() const {
  if (threads < 1) throw InvalidConfig("threads must be >= 1");
  if (matching.n_m < 1) throw InvalidConfig("matching.n_m must be >= 1");
  if (!(matching.flow_tolerance_px > 0.0)) {
    throw InvalidConfig("matching.flow_tolerance_px must be positive");
  }
  if (!(matching.assoc_radius_px > 0.0)) {
    throw InvalidConfig("matching.assoc_radius_px must be positive");
  }
  if (!(ransac.inlier_threshold > 0.0) || ransac.max_iterations < 1 ||
      ransac.min_inliers < 3 || ransac.min_inlier_ratio < 0.0 ||
      ransac.min_inlier_ratio > 1.0 || ransac.confidence <= 0.0 ||
      ransac.confidence >= 1.0) {
    throw InvalidConfig("invalid ransac configuration");
  }
  if (grid_divisions < 1 || grid_n_v < 1) {
    throw InvalidConfig("invalid voxel grid configuration");
  }
  if (!(metric_scale_cm_per_unit > 0.0)) {
    throw InvalidConfig("metric_scale_cm_per_unit must be positive");
  }
  if (thresholds_cm.empty() ||
      !std::is_sorted(thresholds_cm.begin(), thresholds_cm.end())) {
    throw InvalidConfig("thresholds_cm must be a non-empty ascending list");
  }
  if (!(surface_radius_px > 0.0)) {
    throw InvalidConfig("surface_radius_px must be positive");
  }
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("config '" + path.string() + "': " + e.what());
  }

  PipelineConfig cfg;
  try {
    cfg.seed = j.value("seed", cfg.seed);
    cfg.threads = j.value("threads", cfg.threads);
    if (j.contains("matching")) {
      const auto& m = j.at("matching");
      cfg.matching.n_m = m.value("n_m", cfg.matching.n_m);
      cfg.matching.flow_tolerance_px =
          m.value("flow_tolerance_px", cfg.matching.flow_tolerance_px);
      cfg.matching.assoc_radius_px =
          m.value("assoc_radius_px", cfg.matching.assoc_radius_px);
    }
    if (j.contains("ransac")) {
      const auto& r = j.at("ransac");
      cfg.ransac.inlier_threshold =
          r.value("inlier_threshold", cfg.ransac.inlier_threshold);
      cfg.ransac.threshold_is_absolute =
          r.value("threshold_is_absolute", cfg.ransac.threshold_is_absolute);
      cfg.ransac.max_iterations =
          r.value("max_iterations", cfg.ransac.max_iterations);
      cfg.ransac.confidence = r.value("confidence", cfg.ransac.confidence);
      cfg.ransac.min_inliers = r.value("min_inliers", cfg.ransac.min_inliers);
      cfg.ransac.min_inlier_ratio =
          r.value("min_inlier_ratio", cfg.ransac.min_inlier_ratio);
    }
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      cfg.grid_divisions = g.value("divisions", cfg.grid_divisions);
      cfg.grid_n_v = g.value("n_v", cfg.grid_n_v);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      cfg.train.embedding_dim = t.value("embedding_dim", cfg.train.embedding_dim);
      cfg.train.vocab_buckets = t.value("vocab_buckets", cfg.train.vocab_buckets);
      cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
      cfg.train.momentum = t.value("momentum", cfg.train.momentum);
      cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
      cfg.train.epochs = t.value("epochs", cfg.train.epochs);
      cfg.train.embedding_init_stddev =
          t.value("embedding_init_stddev", cfg.train.embedding_init_stddev);
    }
    if (j.contains("anchor_strategy")) {
      cfg.anchor_strategy =
          anchor_strategy_from_string(j.at("anchor_strategy").get<std::string>());
    }
    cfg.surface_radius_px = j.value("surface_radius_px", cfg.surface_radius_px);
    cfg.metric_scale_cm_per_unit =
        j.value("metric_scale_cm_per_unit", cfg.metric_scale_cm_per_unit);
    if (j.contains("thresholds_cm")) {
      cfg.thresholds_cm = j.at("thresholds_cm").get<std::vector<double>>();
    }
    cfg.table_threshold_cm = j.value("table_threshold_cm", cfg.table_threshold_cm);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("config '" + path.string() + "': " + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// matching

std::vector<PairMatchResult> run_matching(const Dataset& dataset,
                                          const MatchingConfig& cfg,
                                          int threads) {
  std::vector<std::pair<std::string, std::string>> video_pairs;
  for (auto a = dataset.videos.begin(); a != dataset.videos.end(); ++a) {
    if (a->second.global_descriptors.empty() || a->second.features.empty()) {
      continue;
    }
    for (auto b = std::next(a); b != dataset.videos.end(); ++b) {
      if (b->second.global_descriptors.empty() || b->second.features.empty()) {
        continue;
      }
      video_pairs.push_back({a->first, b->first});
    }
  }

  std::vector<PairMatchResult> results(video_pairs.size());
  parallel_for(video_pairs.size(), threads, [&](size_t i) {
    const auto& [id_a, id_b] = video_pairs[i];
    const VideoData& video_a = dataset.videos.at(id_a);
    const VideoData& video_b = dataset.videos.at(id_b);

    PairMatchResult result;
    result.video_a = id_a;
    result.video_b = id_b;

    std::map<std::string, const LocalFeatureSet*> features_a, features_b;
    for (const auto& f : video_a.features) features_a[f.frame_id] = &f;
    for (const auto& f : video_b.features) features_b[f.frame_id] = &f;

    const auto candidates = retrieve_frame_pairs(
        video_a.global_descriptors, video_b.global_descriptors, cfg.n_m);
    for (const auto& candidate : candidates) {
      const auto fa = features_a.find(candidate.frame_a);
      const auto fb = features_b.find(candidate.frame_b);
      if (fa == features_a.end() || fb == features_b.end()) {
        throw MissingFile("no local features for retrieved frame pair (" +
                          candidate.frame_a + ", " + candidate.frame_b + ")");
      }
      MatchSet raw = mutual_nn_match(*fa->second, *fb->second);

      const FlowField* flow = nullptr;
      for (const auto& f : video_a.flows) {
        if (f.source_frame_id == candidate.frame_a &&
            f.target_frame_id == candidate.frame_b) {
          flow = &f;
          break;
        }
      }
      if (!flow) {
        throw MissingFile("no dense flow for retrieved frame pair (" +
                          candidate.frame_a + " -> " + candidate.frame_b +
                          "); extend the flow archive of video '" + id_a + "'");
      }
      MatchSet filtered = flow_filter(raw, *flow, cfg.flow_tolerance_px);
      result.raw_count += static_cast<int>(raw.matches.size());
      result.filtered_count += static_cast<int>(filtered.matches.size());
      result.raw.push_back(std::move(raw));
      result.filtered.push_back(std::move(filtered));
    }
    results[i] = std::move(result);
  });
  return results;
}

// ---------------------------------------------------------------------------
// alignment

AlignmentRun run_alignment(const Dataset& dataset,
                           const VideoPairMatches& filtered_matches,
                           const std::string& reference_id,
                           const RansacConfig& ransac,
                           double assoc_radius_px, int threads) {
  std::vector<std::string> node_ids;
  for (const auto& [id, video] : dataset.videos) {
    if (video.reconstruction) node_ids.push_back(id);
  }

  PairwiseCorrespondences pairwise;
  AlignmentRun run;
  for (const auto& [pair, match_sets] : filtered_matches) {
    const auto rec_a = dataset.videos.find(pair.first);
    const auto rec_b = dataset.videos.find(pair.second);
    if (rec_a == dataset.videos.end() || !rec_a->second.reconstruction) {
      throw UnknownReference("matches reference unknown video '" + pair.first + "'");
    }
    if (rec_b == dataset.videos.end() || !rec_b->second.reconstruction) {
      throw UnknownReference("matches reference unknown video '" + pair.second + "'");
    }
    auto& corrs = pairwise[pair];
    for (const auto& ms : match_sets) {
      const auto lifted = lift_matches(ms, *rec_a->second.reconstruction,
                                       *rec_b->second.reconstruction,
                                       assoc_radius_px);
      corrs.insert(corrs.end(), lifted.begin(), lifted.end());
    }
    run.correspondence_counts[pair] = static_cast<int>(corrs.size());
  }

  run.graph = build_alignment_graph(node_ids, pairwise, ransac, threads);
  run.registration = register_all(run.graph, reference_id);
  return run;
}

// ---------------------------------------------------------------------------
// keypoint transfer

TransferRun run_transfer(const Dataset& dataset, const AlignmentGraph& graph,
                         const std::string& source_id,
                         const std::vector<KeypointAnnotation2D>& annotations) {
  const auto source_it = dataset.videos.find(source_id);
  if (source_it == dataset.videos.end() || !source_it->second.reconstruction) {
    throw UnknownReference("transfer source video '" + source_id +
                           "' is not in the dataset");
  }

  TransferRun run;
  const TriangulatedKeypoints triangulated =
      triangulate_keypoints(annotations, *source_it->second.reconstruction);
  run.source_keypoints = triangulated.keypoints;
  run.dropped_keypoints = triangulated.dropped;
  if (run.source_keypoints.names.empty()) {
    throw TooFewCommonKeypoints("no source keypoint could be triangulated");
  }

  for (const auto& [target_id, video] : dataset.videos) {
    if (target_id == source_id || !video.reconstruction) continue;
    if (!graph.has_node(target_id)) {
      run.disconnected_targets.push_back(target_id);
      continue;
    }
    SimilarityTransform3 transform;
    try {
      transform = path_transform(graph, source_id, target_id);
    } catch (const NodesDisconnected&) {
      run.disconnected_targets.push_back(target_id);
      continue;
    }
    Keypoints3D transferred = transfer_keypoints(run.source_keypoints, transform);

    auto& projections = run.projections[target_id];
    for (const auto& [frame_id, cam] : video.reconstruction->frames) {
      for (size_t j = 0; j < transferred.names.size(); ++j) {
        try {
          const Projection proj =
              project(cam, transferred.coords.col(static_cast<Eigen::Index>(j)));
          if (proj.pixel.x() < 0.0 || proj.pixel.x() >= cam.width ||
              proj.pixel.y() < 0.0 || proj.pixel.y() >= cam.height) {
            continue;
          }
          projections.push_back(KeypointAnnotation2D{
              target_id, frame_id, transferred.names[j], proj.pixel});
        } catch (const DepthNonPositive&) {
        }
      }
    }
    run.transferred.emplace(target_id, std::move(transferred));
  }
  return run;
}

PckEvaluation run_eval_pck(const std::map<std::string, Keypoints3D>& predicted,
                           const std::map<std::string, Keypoints3D>& ground_truth,
                           const std::vector<double>& thresholds_cm,
                           double metric_scale_cm_per_unit,
                           double max_consistency_residual) {
  PckEvaluation eval;
  std::vector<PckCurve> curves;
  for (const auto& [video_id, pred] : predicted) {
    const auto gt_it = ground_truth.find(video_id);
    if (gt_it == ground_truth.end()) {
      eval.rejected.push_back({video_id, "no_ground_truth"});
      continue;
    }
    double residual = 0.0;
    try {
      residual = keypoint_consistency_residual(pred, gt_it->second);
    } catch (const TooFewCommonKeypoints&) {
      eval.rejected.push_back({video_id, "too_few_common_keypoints"});
      continue;
    }
    if (residual >= max_consistency_residual) {
      eval.rejected.push_back({video_id, "inconsistent_shape"});
      continue;
    }
    curves.push_back(
        pck_3d(pred, gt_it->second, thresholds_cm, metric_scale_cm_per_unit));
    eval.per_video.emplace(video_id, curves.back());
    eval.admitted.push_back(video_id);
  }
  if (curves.empty()) {
    throw NoCommonKeypoints("no video pair was admitted for PCK evaluation");
  }
  eval.mean = mean_pck_over_pairs(curves);
  return eval;
}

// ---------------------------------------------------------------------------
// grounding

GroundingTrainRun run_grounding_training(const Dataset& dataset,
                                         const AlignmentGraph& graph,
                                         const PipelineConfig& cfg) {
  // Group videos per grounding model (one reconstruction group per model).
  std::map<std::string, std::vector<std::string>> groups;
  for (const auto& [video_id, video] : dataset.videos) {
    if (video.reconstruction) groups[video.group].push_back(video_id);
  }
  if (groups.empty()) {
    throw EmptyTrainingSet("run_grounding_training: no reconstructions");
  }

  GroundingTrainRun run;
  std::map<std::string, std::vector<TrainingPair>> pairs_by_group;
  std::map<std::string, VoxelGrid> grids;

  for (const auto& [group, members] : groups) {
    const std::string& reference = members.front();  // sorted: smallest id
    run.group_references[group] = reference;

    std::map<std::string, Reconstruction> recs;
    std::map<std::string, SimilarityTransform3> to_reference;
    std::vector<Vec3> registered_cloud;
    std::vector<NarrationSegment> segments;
    std::vector<Detection2D> detections;
    std::vector<SaliencyMap> saliency;
    for (const std::string& video_id : members) {
      SimilarityTransform3 transform;
      try {
        transform = path_transform(graph, video_id, reference);
      } catch (const NodesDisconnected&) {
        run.skipped_videos.push_back(video_id);
        continue;
      } catch (const UnknownReference&) {
        run.skipped_videos.push_back(video_id);
        continue;
      }
      const VideoData& video = dataset.videos.at(video_id);
      recs.emplace(video_id, *video.reconstruction);
      to_reference.emplace(video_id, transform);
      for (const auto& [point_id, p] : video.reconstruction->points) {
        registered_cloud.push_back(apply_transform(transform, p));
      }
      segments.insert(segments.end(), video.narration.begin(),
                      video.narration.end());
      detections.insert(detections.end(), video.detections.begin(),
                        video.detections.end());
      saliency.insert(saliency.end(), video.saliency.begin(),
                      video.saliency.end());
    }
    if (registered_cloud.empty() || segments.empty()) {
      run.reports[group] = {};
      continue;
    }

    SegmentContext ctx;
    ctx.reconstructions = &recs;
    ctx.to_reference = &to_reference;
    ctx.detections = &detections;
    ctx.saliency_maps = &saliency;
    ctx.surface_radius_px = cfg.surface_radius_px;

    // Training points first (they select the active voxels), then labels.
    std::vector<Vec3> training_points;
    for (const auto& segment : segments) {
      const SegmentWorldPoint swp =
          segment_world_point(segment, cfg.anchor_strategy, ctx);
      if (swp.world_point) training_points.push_back(*swp.world_point);
    }
    const VoxelGrid grid = build_voxel_grid(registered_cloud, cfg.grid_divisions,
                                            training_points, cfg.grid_n_v);
    TrainingPairReport report =
        generate_training_pairs(segments, cfg.anchor_strategy, grid, ctx);
    if (!report.pairs.empty()) {
      grids.emplace(group, grid);
      pairs_by_group.emplace(group, report.pairs);
    }
    run.reports[group] = std::move(report);
  }

  if (pairs_by_group.empty()) {
    throw EmptyTrainingSet(
        "run_grounding_training: no group produced training pairs");
  }

  TrainConfig train_cfg = cfg.train;
  train_cfg.seed = mix_seed(cfg.seed, fnv1a("grounding-train"));
  TrainOutcome outcome = train_grounding(pairs_by_group, grids, train_cfg);
  run.checkpoint.model = std::move(outcome.model);
  run.checkpoint.grids = std::move(grids);
  run.epoch_losses = std::move(outcome.epoch_losses);
  return run;
}

}  // namespace reconalign
