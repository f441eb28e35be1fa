// reconalign command line: batch pipeline driver (synthesis, matching,
// alignment, keypoint transfer, PCK evaluation, language grounding).
// Exit codes: 0 success, 1 input error, 2 internal error.

#include <Eigen/Geometry>

#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "reconalign/io.hpp"
#include "reconalign/pipeline.hpp"
#include "reconalign/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace reconalign;

namespace {

class JsonLog {
 public:
  void open(const fs::path& path) {
    out_.open(path);
    if (!out_) throw MissingFile("cannot open log file '" + path.string() + "'");
  }

  void event(json record) {
    if (out_.is_open()) out_ << record.dump() << "\n";
  }

 private:
  std::ofstream out_;
};

json transform_to_json(const SimilarityTransform3& t) {
  Eigen::Quaterniond q(t.rotation);
  q.normalize();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  return json::array({t.scale, q.w(), q.x(), q.y(), q.z(), t.translation.x(),
                      t.translation.y(), t.translation.z()});
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw MissingFile("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

SyntheticSceneConfig synthetic_config_from_json(const json& j) {
  SyntheticSceneConfig cfg;
  try {
    cfg.seed = j.value("seed", cfg.seed);
    cfg.num_models = j.value("num_models", cfg.num_models);
    cfg.master_points = j.value("master_points", cfg.master_points);
    cfg.cameras_per_model = j.value("cameras_per_model", cfg.cameras_per_model);
    cfg.object_extent = j.value("object_extent", cfg.object_extent);
    cfg.object_thickness = j.value("object_thickness", cfg.object_thickness);
    cfg.camera_distance = j.value("camera_distance", cfg.camera_distance);
    cfg.image_width = j.value("image_width", cfg.image_width);
    cfg.image_height = j.value("image_height", cfg.image_height);
    cfg.focal = j.value("focal", cfg.focal);
    cfg.pixel_noise = j.value("pixel_noise", cfg.pixel_noise);
    cfg.point_noise = j.value("point_noise", cfg.point_noise);
    cfg.outlier_fraction = j.value("outlier_fraction", cfg.outlier_fraction);
    cfg.corruption_min_offset_px =
        j.value("corruption_min_offset_px", cfg.corruption_min_offset_px);
    cfg.scale_min = j.value("scale_min", cfg.scale_min);
    cfg.scale_max = j.value("scale_max", cfg.scale_max);
    if (j.contains("visibility_windows")) {
      for (const auto& w : j.at("visibility_windows")) {
        cfg.visibility_windows.push_back(
            {w.at(0).get<double>(), w.at(1).get<double>()});
      }
    }
    cfg.descriptor_dim = j.value("descriptor_dim", cfg.descriptor_dim);
    cfg.global_descriptor_dim =
        j.value("global_descriptor_dim", cfg.global_descriptor_dim);
    cfg.retrieved_pairs_per_video_pair = j.value(
        "retrieved_pairs_per_video_pair", cfg.retrieved_pairs_per_video_pair);
    cfg.flow_grid_divisor = j.value("flow_grid_divisor", cfg.flow_grid_divisor);
    cfg.num_keypoints = j.value("num_keypoints", cfg.num_keypoints);
    cfg.annotated_frames_per_video =
        j.value("annotated_frames_per_video", cfg.annotated_frames_per_video);
    if (j.contains("clusters")) {
      for (const auto& c : j.at("clusters")) {
        ObjectCluster cluster;
        cluster.name = c.at("name").get<std::string>();
        const auto& p = c.at("position");
        cluster.position = Vec3(p.at(0).get<double>(), p.at(1).get<double>(),
                                p.at(2).get<double>());
        cfg.clusters.push_back(std::move(cluster));
      }
    }
    cfg.cluster_points = j.value("cluster_points", cfg.cluster_points);
    cfg.cluster_radius = j.value("cluster_radius", cfg.cluster_radius);
    if (j.contains("narration_templates")) {
      cfg.narration_templates =
          j.at("narration_templates").get<std::vector<std::string>>();
    }
    if (j.contains("query_templates")) {
      cfg.query_templates =
          j.at("query_templates").get<std::vector<std::string>>();
    }
    if (j.contains("segments_per_model")) {
      cfg.segments_per_model =
          j.at("segments_per_model").get<std::vector<int>>();
    }
    cfg.queries_per_object = j.value("queries_per_object", cfg.queries_per_object);
    cfg.decoy_detections_per_frame =
        j.value("decoy_detections_per_frame", cfg.decoy_detections_per_frame);
    cfg.saliency_rows = j.value("saliency_rows", cfg.saliency_rows);
    cfg.saliency_cols = j.value("saliency_cols", cfg.saliency_cols);
  } catch (const json::exception& e) {
    throw ParseError(std::string("synthetic scene config: ") + e.what());
  }
  return cfg;
}

struct GlobalArgs {
  std::string manifest;
  std::string reference;
  std::string output = "out";
  std::string config;
  std::string log;
  std::optional<uint64_t> seed;
  std::optional<int> threads;
};

PipelineConfig resolve_pipeline_config(const GlobalArgs& args) {
  PipelineConfig cfg;
  if (!args.config.empty()) cfg = load_pipeline_config(args.config);
  if (args.seed) cfg.seed = *args.seed;
  if (args.threads) cfg.threads = *args.threads;
  cfg.ransac.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

std::string pair_file_stem(const std::string& a, const std::string& b) {
  return a + "__" + b;
}

// ---------------------------------------------------------------------------

int cmd_synth(const GlobalArgs& args, JsonLog& log) {
  if (args.config.empty()) {
    throw InvalidConfig("synth requires --config with a scene description");
  }
  std::ifstream in(args.config);
  if (!in) throw MissingFile("cannot open config '" + args.config + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("config '" + args.config + "': " + e.what());
  }
  SyntheticSceneConfig cfg = synthetic_config_from_json(j);
  if (args.seed) cfg.seed = *args.seed;

  const SyntheticScene scene = generate_synthetic_scene(cfg);
  fs::create_directories(args.output);
  save_synthetic_scene(args.output, scene);

  int total_segments = 0;
  for (const auto& [id, video] : scene.videos) {
    total_segments += static_cast<int>(video.narration.size());
  }
  std::cout << "synthesized " << scene.videos.size() << " videos, "
            << scene.raw_matches.size() << " video pairs, " << total_segments
            << " narration segments -> " << args.output << "\n";
  log.event({{"event", "synth_done"},
             {"videos", scene.videos.size()},
             {"output", args.output}});
  return 0;
}

int cmd_match(const GlobalArgs& args, JsonLog& log) {
  if (args.manifest.empty()) throw InvalidConfig("match requires --manifest");
  const PipelineConfig cfg = resolve_pipeline_config(args);
  const LoadResult loaded = load_dataset(args.manifest);

  const auto results = run_matching(loaded.dataset, cfg.matching, cfg.threads);
  if (results.empty()) {
    throw InvalidArgument(
        "no video pair has both local features and global descriptors");
  }

  fs::create_directories(fs::path(args.output) / "matches_raw");
  fs::create_directories(fs::path(args.output) / "matches_filtered");
  json report = json::object();
  for (const auto& r : results) {
    const std::string stem = pair_file_stem(r.video_a, r.video_b);
    save_matches(fs::path(args.output) / "matches_raw" / (stem + ".m2d"), r.raw);
    save_matches(fs::path(args.output) / "matches_filtered" / (stem + ".m2d"),
                 r.filtered);
    const double retention =
        r.raw_count > 0 ? static_cast<double>(r.filtered_count) / r.raw_count
                        : 0.0;
    std::cout << "pair " << r.video_a << " " << r.video_b << ": raw "
              << r.raw_count << " filtered " << r.filtered_count
              << " retention " << retention << "\n";
    report[stem] = {{"raw", r.raw_count},
                    {"filtered", r.filtered_count},
                    {"retention", retention}};
    log.event({{"event", "match_pair"},
               {"video_a", r.video_a},
               {"video_b", r.video_b},
               {"raw", r.raw_count},
               {"filtered", r.filtered_count}});
  }
  write_json(fs::path(args.output) / "match_report.json", report);
  return 0;
}

int cmd_align(const GlobalArgs& args, const std::string& matches_dir,
              JsonLog& log) {
  if (args.manifest.empty()) throw InvalidConfig("align requires --manifest");
  if (args.reference.empty()) throw InvalidConfig("align requires --reference");
  const PipelineConfig cfg = resolve_pipeline_config(args);
  const LoadResult loaded = load_dataset(args.manifest);

  if (!fs::is_directory(matches_dir)) {
    throw MissingFile("matches directory '" + matches_dir + "' does not exist");
  }
  VideoPairMatches filtered;
  std::vector<fs::path> match_files;
  for (const auto& entry : fs::directory_iterator(matches_dir)) {
    if (entry.path().extension() == ".m2d") match_files.push_back(entry.path());
  }
  std::sort(match_files.begin(), match_files.end());
  for (const auto& file : match_files) {
    const std::string stem = file.stem().string();
    const size_t sep = stem.find("__");
    if (sep == std::string::npos) {
      throw ParseError("match file '" + file.string() +
                       "' is not named <videoA>__<videoB>.m2d");
    }
    filtered[{stem.substr(0, sep), stem.substr(sep + 2)}] = load_matches(file);
  }

  const AlignmentRun run =
      run_alignment(loaded.dataset, filtered, args.reference, cfg.ransac,
                    cfg.matching.assoc_radius_px, cfg.threads);

  fs::create_directories(args.output);
  save_alignment_graph(fs::path(args.output) / "graph.agr", run.graph);

  json report;
  report["reference"] = args.reference;
  report["nodes"] = run.graph.nodes;
  json edges = json::array();
  for (const auto& e : run.graph.edges) {
    edges.push_back({{"from", e.from_id},
                     {"to", e.to_id},
                     {"inliers", e.inlier_count},
                     {"total", e.total_count},
                     {"rms", e.inlier_rms},
                     {"transform", transform_to_json(e.transform)}});
    log.event({{"event", "edge"},
               {"from", e.from_id},
               {"to", e.to_id},
               {"inliers", e.inlier_count}});
  }
  report["edges"] = edges;
  json registered = json::object();
  for (const auto& [id, t] : run.registration.to_reference) {
    registered[id] = transform_to_json(t);
  }
  report["registered"] = registered;
  report["unregistered"] = run.registration.unregistered;
  json counts = json::object();
  for (const auto& [pair, n] : run.correspondence_counts) {
    counts[pair_file_stem(pair.first, pair.second)] = n;
  }
  report["correspondence_counts"] = counts;
  report["discarded_videos"] = loaded.discarded_videos;
  write_json(fs::path(args.output) / "registration.json", report);

  std::cout << "graph: " << run.graph.nodes.size() << " nodes, "
            << run.graph.edges.size() << " edges; registered "
            << run.registration.to_reference.size() << ", unregistered "
            << run.registration.unregistered.size() << "\n";
  return 0;
}

int cmd_transfer(const GlobalArgs& args, const std::string& graph_path,
                 const std::string& source, const std::string& annotations_path,
                 JsonLog& log) {
  if (args.manifest.empty()) throw InvalidConfig("transfer requires --manifest");
  const LoadResult loaded = load_dataset(args.manifest);
  const AlignmentGraph graph = load_alignment_graph(graph_path);
  const auto annotations = load_annotations(annotations_path);

  const TransferRun run = run_transfer(loaded.dataset, graph, source, annotations);

  fs::create_directories(fs::path(args.output) / "projections");
  std::map<std::string, Keypoints3D> output = run.transferred;
  output[source] = run.source_keypoints;
  save_keypoints3d(fs::path(args.output) / "transferred.kp3", output);
  for (const auto& [target, projections] : run.projections) {
    save_annotations(fs::path(args.output) / "projections" / (target + ".kp2"),
                     projections);
  }

  json report;
  report["source"] = source;
  report["triangulated"] = run.source_keypoints.names;
  json dropped = json::array();
  for (const auto& [name, reason] : run.dropped_keypoints) {
    dropped.push_back({{"keypoint", name}, {"reason", reason}});
  }
  report["dropped_keypoints"] = dropped;
  std::vector<std::string> targets;
  for (const auto& [id, kps] : run.transferred) targets.push_back(id);
  report["targets"] = targets;
  report["disconnected_targets"] = run.disconnected_targets;
  write_json(fs::path(args.output) / "transfer_report.json", report);

  std::cout << "transferred " << run.source_keypoints.names.size()
            << " keypoints from " << source << " to " << run.transferred.size()
            << " videos (" << run.disconnected_targets.size()
            << " disconnected)\n";
  log.event({{"event", "transfer_done"},
             {"source", source},
             {"targets", run.transferred.size()}});
  return 0;
}

int cmd_eval_pck(const GlobalArgs& args, const std::string& pred_path,
                 const std::string& gt_path, JsonLog& log) {
  const PipelineConfig cfg = resolve_pipeline_config(args);
  const auto predicted = load_keypoints3d(pred_path);
  const auto ground_truth = load_keypoints3d(gt_path);

  const PckEvaluation eval = run_eval_pck(
      predicted, ground_truth, cfg.thresholds_cm, cfg.metric_scale_cm_per_unit);

  fs::create_directories(args.output);
  PckTable table;
  table.thresholds_cm = eval.mean.thresholds_cm;
  table.series.push_back({"mean_pck", eval.mean.values});
  save_pck(fs::path(args.output) / "pck.pck", table);

  json report;
  report["admitted"] = eval.admitted;
  json rejected = json::array();
  for (const auto& [video, reason] : eval.rejected) {
    rejected.push_back({{"video", video}, {"reason", reason}});
  }
  report["rejected"] = rejected;
  json per_video = json::object();
  for (const auto& [video, curve] : eval.per_video) {
    per_video[video] = curve.values;
  }
  report["per_video"] = per_video;
  report["thresholds_cm"] = eval.mean.thresholds_cm;
  report["mean"] = eval.mean.values;
  write_json(fs::path(args.output) / "eval_report.json", report);

  std::cout << "PCK over " << eval.admitted.size() << " admitted video pairs ("
            << eval.rejected.size() << " rejected) -> " << args.output
            << "/pck.pck\n";
  log.event({{"event", "eval_pck_done"}, {"admitted", eval.admitted.size()}});
  return 0;
}

int cmd_ground_train(const GlobalArgs& args, const std::string& graph_path,
                     JsonLog& log) {
  if (args.manifest.empty()) {
    throw InvalidConfig("ground train requires --manifest");
  }
  const PipelineConfig cfg = resolve_pipeline_config(args);
  const LoadResult loaded = load_dataset(args.manifest);
  const AlignmentGraph graph = load_alignment_graph(graph_path);

  const GroundingTrainRun run = run_grounding_training(loaded.dataset, graph, cfg);

  fs::create_directories(args.output);
  save_grounding_checkpoint(fs::path(args.output) / "model.gmod", run.checkpoint);

  json report;
  report["epoch_losses"] = run.epoch_losses;
  report["group_references"] = run.group_references;
  report["skipped_videos"] = run.skipped_videos;
  json groups = json::object();
  for (const auto& [group, r] : run.reports) {
    groups[group] = {{"pairs", r.pairs.size()}, {"dropped", r.dropped}};
  }
  report["groups"] = groups;
  write_json(fs::path(args.output) / "train_report.json", report);

  std::cout << "trained grounding model over " << run.reports.size()
            << " groups; final loss "
            << (run.epoch_losses.empty() ? 0.0 : run.epoch_losses.back())
            << " -> " << args.output << "/model.gmod\n";
  log.event({{"event", "ground_train_done"}, {"groups", run.reports.size()}});
  return 0;
}

int cmd_ground_query(const GlobalArgs& args, const std::string& checkpoint_path,
                     const std::string& model_id, const std::string& text) {
  const GroundingCheckpoint cp = load_grounding_checkpoint(checkpoint_path);
  const auto grid_it = cp.grids.find(model_id);
  if (grid_it == cp.grids.end()) {
    throw UnknownModelId("checkpoint has no model '" + model_id + "'");
  }
  const QueryResult result =
      ground_query(cp.model, model_id, text, grid_it->second);

  const double spread = result.scores.maxCoeff() - result.scores.minCoeff();
  if (spread < 1e-12) {
    std::cerr << "warning: scores are uniform; the model looks untrained for '"
              << model_id << "'\n";
  }

  std::vector<int> order(result.scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (result.scores(a) != result.scores(b)) {
      return result.scores(a) > result.scores(b);
    }
    return a < b;
  });
  json top = json::array();
  for (int i = 0; i < std::min<int>(5, static_cast<int>(order.size())); ++i) {
    const Vec3 center = grid_it->second.center_of_label(order[i]);
    top.push_back({{"label", order[i]},
                   {"score", result.scores(order[i])},
                   {"center", {center.x(), center.y(), center.z()}}});
  }
  const json out = {{"model_id", model_id},
                    {"text", text},
                    {"predicted_label", result.predicted_label},
                    {"predicted_point",
                     {result.predicted_point.x(), result.predicted_point.y(),
                      result.predicted_point.z()}},
                    {"top", top}};
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_ground_eval(const GlobalArgs& args, const std::string& checkpoint_path,
                    const std::string& queries_path, JsonLog& log) {
  const PipelineConfig cfg = resolve_pipeline_config(args);
  const GroundingCheckpoint cp = load_grounding_checkpoint(checkpoint_path);
  const auto queries = load_queries(queries_path);

  std::map<std::string, double> scales;
  for (const auto& [id, grid] : cp.grids) {
    scales[id] = cfg.metric_scale_cm_per_unit;
  }
  const GroundingEval eval =
      evaluate_grounding_pck(queries, cp.model, cp.grids, cfg.thresholds_cm,
                             scales, mix_seed(cfg.seed, fnv1a("chance")));

  fs::create_directories(args.output);
  PckTable table;
  table.thresholds_cm = eval.method.thresholds_cm;
  table.series.push_back({"chance", eval.chance.values});
  table.series.push_back({"method", eval.method.values});
  save_pck(fs::path(args.output) / "grounding.pck", table);

  // Per-class table at the headline threshold (object, chance, method).
  size_t table_index = 0;
  for (size_t i = 0; i < cfg.thresholds_cm.size(); ++i) {
    if (cfg.thresholds_cm[i] <= cfg.table_threshold_cm) table_index = i;
  }
  std::ofstream classes(fs::path(args.output) / "grounding_classes.tsv");
  classes << "# object\tchance\tmethod (PCK at "
          << format_double(cfg.thresholds_cm[table_index]) << " cm)\n";
  for (const auto& [cls, curves] : eval.per_class) {
    classes << cls << '\t' << format_double(curves.first.values[table_index])
            << '\t' << format_double(curves.second.values[table_index]) << "\n";
  }
  classes << "average\t" << format_double(eval.chance.values[table_index])
          << '\t' << format_double(eval.method.values[table_index]) << "\n";

  json report;
  report["queries"] = eval.query_count;
  report["threshold_cm"] = cfg.thresholds_cm[table_index];
  report["method_at_threshold"] = eval.method.values[table_index];
  report["chance_at_threshold"] = eval.chance.values[table_index];
  write_json(fs::path(args.output) / "eval_report.json", report);

  std::cout << "grounding PCK at " << cfg.thresholds_cm[table_index]
            << " cm: method " << eval.method.values[table_index] << ", chance "
            << eval.chance.values[table_index] << " over " << eval.query_count
            << " queries\n";
  log.event({{"event", "ground_eval_done"}, {"queries", eval.query_count}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reconalign: alignment of per-video 3D reconstructions, "
               "keypoint transfer and text-to-voxel grounding"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalArgs args;
  uint64_t seed_value = 0;
  int threads_value = 1;
  app.add_option("--manifest", args.manifest, "dataset manifest path");
  app.add_option("--reference", args.reference, "reference video id");
  app.add_option("--output", args.output, "output directory (default: out)");
  app.add_option("--config", args.config, "JSON configuration file");
  app.add_option("--log", args.log, "JSON-lines event log path");
  auto* seed_opt = app.add_option("--seed", seed_value, "deterministic seed");
  auto* threads_opt = app.add_option("--threads", threads_value, "worker threads");

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->fallthrough();
  auto* match = app.add_subcommand("match", "retrieve frame pairs and match features");
  match->fallthrough();
  auto* align = app.add_subcommand("align", "build the alignment graph and register");
  align->fallthrough();
  std::string matches_dir = "out/matches_filtered";
  align->add_option("--matches", matches_dir, "directory of filtered .m2d files");

  auto* transfer = app.add_subcommand("transfer", "transfer keypoint annotations");
  transfer->fallthrough();
  std::string graph_path = "out/graph.agr";
  std::string source_id;
  std::string annotations_path;
  transfer->add_option("--graph", graph_path, "alignment graph (.agr)");
  transfer->add_option("--source", source_id, "source video id")->required();
  transfer->add_option("--annotations", annotations_path, "2D annotations (.kp2)")
      ->required();

  auto* eval_pck = app.add_subcommand("evaluate-pck", "score transferred keypoints");
  eval_pck->fallthrough();
  std::string pred_path, gt_path;
  eval_pck->add_option("--pred", pred_path, "predicted keypoints (.kp3)")->required();
  eval_pck->add_option("--gt", gt_path, "ground-truth keypoints (.kp3)")->required();

  auto* ground = app.add_subcommand("ground", "text-to-voxel grounding");
  ground->require_subcommand(1);
  ground->fallthrough();
  auto* ground_train = ground->add_subcommand("train", "train the grounding model");
  ground_train->fallthrough();
  std::string ground_graph = "out/graph.agr";
  ground_train->add_option("--graph", ground_graph, "alignment graph (.agr)");
  auto* ground_query_cmd = ground->add_subcommand("query", "ground one text query");
  ground_query_cmd->fallthrough();
  std::string checkpoint_path = "out/model.gmod";
  std::string model_id, query_text;
  ground_query_cmd->add_option("--checkpoint", checkpoint_path, "model checkpoint");
  ground_query_cmd->add_option("--model-id", model_id, "grounding model id")->required();
  ground_query_cmd->add_option("--text", query_text, "query text")->required();
  auto* ground_eval = ground->add_subcommand("eval", "evaluate grounding PCK");
  ground_eval->fallthrough();
  std::string queries_path;
  ground_eval->add_option("--checkpoint", checkpoint_path, "model checkpoint");
  ground_eval->add_option("--queries", queries_path, "queries (.qry)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);  // prints the message or requested help text
    return rc == 0 ? 0 : 1;     // usage problems are input errors
  }
  if (!seed_opt->empty()) args.seed = seed_value;
  if (!threads_opt->empty()) args.threads = threads_value;

  try {
    JsonLog log;
    if (!args.log.empty()) log.open(args.log);
    if (synth->parsed()) return cmd_synth(args, log);
    if (match->parsed()) return cmd_match(args, log);
    if (align->parsed()) return cmd_align(args, matches_dir, log);
    if (transfer->parsed()) {
      return cmd_transfer(args, graph_path, source_id, annotations_path, log);
    }
    if (eval_pck->parsed()) return cmd_eval_pck(args, pred_path, gt_path, log);
    if (ground_train->parsed()) return cmd_ground_train(args, ground_graph, log);
    if (ground_query_cmd->parsed()) {
      return cmd_ground_query(args, checkpoint_path, model_id, query_text);
    }
    if (ground_eval->parsed()) {
      return cmd_ground_eval(args, checkpoint_path, queries_path, log);
    }
    std::cerr << "error: no subcommand\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
}
