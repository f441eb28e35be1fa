#include "reconalign/grounding.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>

namespace reconalign {

std::optional<int64_t> VoxelGrid::flat_index_of(const Vec3& p) const {
  for (int axis = 0; axis < 3; ++axis) {
    if (p(axis) < bbox_min(axis) || p(axis) > bbox_max(axis)) return std::nullopt;
  }
  int64_t flat = 0;
  int64_t stride = 1;
  for (int axis = 0; axis < 3; ++axis) {
    const double cell =
        (bbox_max(axis) - bbox_min(axis)) / static_cast<double>(divisions);
    int idx = static_cast<int>(std::floor((p(axis) - bbox_min(axis)) / cell));
    // Half-open bins; the top boundary belongs to the last bin.
    idx = std::clamp(idx, 0, divisions - 1);
    flat += stride * idx;
    stride *= divisions;
  }
  return flat;
}

std::optional<int> VoxelGrid::label_at(const Vec3& p) const {
  const auto flat = flat_index_of(p);
  if (!flat) return std::nullopt;
  const auto it = label_of.find(*flat);
  if (it == label_of.end()) return std::nullopt;
  return it->second;
}

Vec3 VoxelGrid::voxel_center(int64_t flat_index) const {
  const int ix = static_cast<int>(flat_index % divisions);
  const int iy = static_cast<int>((flat_index / divisions) % divisions);
  const int iz = static_cast<int>(flat_index / (static_cast<int64_t>(divisions) * divisions));
  const Vec3 cell = (bbox_max - bbox_min) / static_cast<double>(divisions);
  return bbox_min + Vec3((ix + 0.5) * cell.x(), (iy + 0.5) * cell.y(),
                         (iz + 0.5) * cell.z());
}

Vec3 VoxelGrid::center_of_label(int label) const {
  if (label < 0 || label >= num_active()) {
    throw LabelOutOfRange("voxel label " + std::to_string(label) +
                          " outside [0, " + std::to_string(num_active()) + ")");
  }
  return voxel_center(active[label]);
}

double VoxelGrid::voxel_diagonal() const {
  return ((bbox_max - bbox_min) / static_cast<double>(divisions)).norm();
}

void VoxelGrid::validate() const {
  if (divisions < 1) throw InvariantViolation("voxel grid divisions must be >= 1");
  for (int axis = 0; axis < 3; ++axis) {
    if (!(bbox_min(axis) < bbox_max(axis))) {
      throw InvariantViolation("voxel grid bounding box is degenerate");
    }
  }
  const int64_t total =
      static_cast<int64_t>(divisions) * divisions * divisions;
  if (static_cast<int64_t>(active.size()) > total) {
    throw InvariantViolation("more active voxels than grid cells");
  }
  if (!std::is_sorted(active.begin(), active.end()) ||
      std::adjacent_find(active.begin(), active.end()) != active.end()) {
    throw InvariantViolation("active voxel list must be sorted and unique");
  }
  if (label_of.size() != active.size()) {
    throw InvariantViolation("active voxel labels are inconsistent");
  }
  for (size_t i = 0; i < active.size(); ++i) {
    if (active[i] < 0 || active[i] >= total) {
      throw InvariantViolation("active voxel index out of range");
    }
    const auto it = label_of.find(active[i]);
    if (it == label_of.end() || it->second != static_cast<int>(i)) {
      throw InvariantViolation("active voxel labels are inconsistent");
    }
  }
}

VoxelGrid build_voxel_grid(const std::vector<Vec3>& registered_points,
                           int divisions,
                           const std::vector<Vec3>& training_points, int n_v) {
  if (registered_points.empty()) {
    throw EmptyPointCloud("build_voxel_grid: no registered points");
  }
  if (divisions < 1 || divisions > 256) {
    throw InvalidArgument("build_voxel_grid: divisions must be in [1, 256]");
  }
  if (n_v < 1) {
    throw InvalidArgument("build_voxel_grid: n_v must be >= 1");
  }

  VoxelGrid grid;
  grid.divisions = divisions;
  grid.bbox_min = registered_points.front();
  grid.bbox_max = registered_points.front();
  for (const Vec3& p : registered_points) {
    if (!p.allFinite()) {
      throw InvalidArgument("build_voxel_grid: non-finite registered point");
    }
    grid.bbox_min = grid.bbox_min.cwiseMin(p);
    grid.bbox_max = grid.bbox_max.cwiseMax(p);
  }
  // A flat or single-point cloud would make the box degenerate on some axis;
  // inflate those axes so binning stays well defined.
  const double diag = (grid.bbox_max - grid.bbox_min).norm();
  const double pad = std::max(1e-9, 1e-6 * diag);
  for (int axis = 0; axis < 3; ++axis) {
    if (!(grid.bbox_min(axis) < grid.bbox_max(axis))) {
      grid.bbox_min(axis) -= pad;
      grid.bbox_max(axis) += pad;
    }
  }

  const int64_t total = static_cast<int64_t>(divisions) * divisions * divisions;
  std::vector<int64_t> counts(total, 0);
  for (const Vec3& p : training_points) {
    if (const auto flat = grid.flat_index_of(p)) ++counts[*flat];
  }

  std::vector<int64_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (counts[a] != counts[b]) return counts[a] > counts[b];
    return a < b;
  });
  const int64_t keep = std::min<int64_t>(n_v, total);
  grid.active.assign(order.begin(), order.begin() + keep);
  std::sort(grid.active.begin(), grid.active.end());
  for (size_t i = 0; i < grid.active.size(); ++i) {
    grid.label_of[grid.active[i]] = static_cast<int>(i);
  }
  grid.validate();
  return grid;
}

std::string to_string(AnchorStrategy s) {
  switch (s) {
    case AnchorStrategy::center_of_frame: return "center_of_frame";
    case AnchorStrategy::hand_detector: return "hand_detector";
    case AnchorStrategy::saliency_argmax: return "saliency_argmax";
  }
  return "center_of_frame";
}

AnchorStrategy anchor_strategy_from_string(const std::string& s) {
  if (s == "center_of_frame") return AnchorStrategy::center_of_frame;
  if (s == "hand_detector") return AnchorStrategy::hand_detector;
  if (s == "saliency_argmax") return AnchorStrategy::saliency_argmax;
  throw ParseError("unknown anchor strategy '" + s + "'");
}

std::optional<Vec2> select_anchor(const NarrationSegment& segment,
                                  AnchorStrategy strategy,
                                  const CameraModel& camera,
                                  const std::vector<Detection2D>* detections,
                                  const SaliencyMap* saliency) {
  switch (strategy) {
    case AnchorStrategy::center_of_frame:
      return Vec2(camera.width / 2.0, camera.height / 2.0);

    case AnchorStrategy::hand_detector: {
      if (!detections) {
        throw MissingStrategyInput(
            "hand_detector strategy requires detections for segment on frame '" +
            segment.frame_id + "'");
      }
      const Detection2D* best = nullptr;
      for (const auto& d : *detections) {
        if (d.frame_id != segment.frame_id) continue;
        if (!best || d.confidence > best->confidence) best = &d;
      }
      if (!best) return std::nullopt;
      return best->pixel;
    }

    case AnchorStrategy::saliency_argmax: {
      if (!saliency) {
        throw MissingStrategyInput(
            "saliency_argmax strategy requires a saliency map for frame '" +
            segment.frame_id + "'");
      }
      if (saliency->frame_id != segment.frame_id) {
        throw MissingStrategyInput("saliency map is for frame '" +
                                   saliency->frame_id + "', segment is on '" +
                                   segment.frame_id + "'");
      }
      if (saliency->rows < 1 || saliency->cols < 1 ||
          static_cast<int>(saliency->scores.size()) !=
              saliency->rows * saliency->cols) {
        throw InvariantViolation("saliency map for frame '" +
                                 saliency->frame_id + "' is malformed");
      }
      int best = 0;
      for (int i = 1; i < static_cast<int>(saliency->scores.size()); ++i) {
        if (saliency->scores[i] > saliency->scores[best]) best = i;
      }
      const int r = best / saliency->cols;
      const int c = best % saliency->cols;
      return Vec2((c + 0.5) * camera.width / static_cast<double>(saliency->cols),
                  (r + 0.5) * camera.height / static_cast<double>(saliency->rows));
    }
  }
  throw InvalidArgument("select_anchor: unknown strategy");
}

std::optional<Vec3> backproject_to_surface(const Vec2& pixel,
                                           const CameraModel& camera,
                                           const std::vector<Vec3>& points,
                                           double radius_px) {
  if (!(pixel.x() >= 0.0 && pixel.x() < camera.width && pixel.y() >= 0.0 &&
        pixel.y() < camera.height)) {
    std::ostringstream msg;
    msg << "backproject_to_surface: pixel (" << pixel.x() << ", " << pixel.y()
        << ") outside the frame";
    throw PixelOutOfBounds(msg.str());
  }
  const Vec3* best = nullptr;
  double best_depth = 0.0;
  for (const Vec3& p : points) {
    Projection proj;
    try {
      proj = project(camera, p);
    } catch (const DepthNonPositive&) {
      continue;
    }
    if ((proj.pixel - pixel).norm() > radius_px) continue;
    if (!best || proj.depth < best_depth) {
      best = &p;
      best_depth = proj.depth;
    }
  }
  if (!best) return std::nullopt;
  return *best;
}

SegmentWorldPoint segment_world_point(const NarrationSegment& segment,
                                      AnchorStrategy strategy,
                                      const SegmentContext& ctx) {
  const auto rec_it = ctx.reconstructions->find(segment.video_id);
  if (rec_it == ctx.reconstructions->end()) {
    return {std::nullopt, "unknown_video"};
  }
  const Reconstruction& rec = rec_it->second;
  const auto reg_it = ctx.to_reference->find(segment.video_id);
  if (reg_it == ctx.to_reference->end()) {
    return {std::nullopt, "unregistered_video"};
  }
  const auto frame_it = rec.frames.find(segment.frame_id);
  if (frame_it == rec.frames.end()) {
    return {std::nullopt, "unknown_frame"};
  }
  const CameraModel& camera = frame_it->second;

  const SaliencyMap* saliency = nullptr;
  if (strategy == AnchorStrategy::saliency_argmax) {
    if (!ctx.saliency_maps) {
      throw MissingStrategyInput(
          "saliency_argmax strategy requires saliency maps");
    }
    for (const auto& m : *ctx.saliency_maps) {
      if (m.frame_id == segment.frame_id) {
        saliency = &m;
        break;
      }
    }
    if (!saliency) return {std::nullopt, "no_anchor"};
  }

  const auto anchor =
      select_anchor(segment, strategy, camera, ctx.detections, saliency);
  if (!anchor) return {std::nullopt, "no_anchor"};

  std::vector<Vec3> points;
  points.reserve(rec.points.size());
  for (const auto& [id, p] : rec.points) points.push_back(p);

  std::optional<Vec3> surface;
  try {
    surface =
        backproject_to_surface(*anchor, camera, points, ctx.surface_radius_px);
  } catch (const PixelOutOfBounds&) {
    return {std::nullopt, "no_anchor"};
  }
  if (!surface) return {std::nullopt, "backprojection_failed"};
  return {apply_transform(reg_it->second, *surface), ""};
}

TrainingPairReport generate_training_pairs(
    const std::vector<NarrationSegment>& segments, AnchorStrategy strategy,
    const VoxelGrid& grid, const SegmentContext& ctx) {
  TrainingPairReport report;
  for (const auto& segment : segments) {
    const SegmentWorldPoint swp = segment_world_point(segment, strategy, ctx);
    if (!swp.world_point) {
      ++report.dropped[swp.drop_reason];
      continue;
    }
    const auto flat = grid.flat_index_of(*swp.world_point);
    if (!flat) {
      ++report.dropped["outside_bbox"];
      continue;
    }
    const auto label_it = grid.label_of.find(*flat);
    if (label_it == grid.label_of.end()) {
      ++report.dropped["inactive_voxel"];
      continue;
    }
    report.pairs.push_back(TrainingPair{segment.text, label_it->second,
                                        strategy, *swp.world_point});
  }
  return report;
}

std::vector<int> hash_tokens(const std::string& text, int vocab_buckets) {
  if (vocab_buckets < 1) {
    throw InvalidArgument("hash_tokens: vocab_buckets must be >= 1");
  }
  std::vector<int> tokens;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      tokens.push_back(static_cast<int>(fnv1a(current) %
                                        static_cast<uint64_t>(vocab_buckets)));
      current.clear();
    }
  };
  for (char ch : text) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return tokens;
}

Eigen::VectorXd GroundingModel::encode(const std::string& text) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(embedding_dim);
  const std::vector<int> tokens = hash_tokens(text, vocab_buckets);
  if (tokens.empty()) return out;
  for (int t : tokens) out += embeddings.row(t).transpose();
  return out / static_cast<double>(tokens.size());
}

namespace {

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - m).exp();
  return e / e.sum();
}

}  // namespace

double grounding_loss(const GroundingModel& model,
                      const std::vector<TrainingSample>& samples,
                      GroundingGradients* gradients) {
  if (gradients) {
    gradients->d_embeddings =
        Eigen::MatrixXd::Zero(model.vocab_buckets, model.embedding_dim);
    gradients->d_heads.clear();
    for (const auto& [id, head] : model.heads) {
      gradients->d_heads[id] = GroundingModel::Head{
          Eigen::MatrixXd::Zero(head.weight.rows(), head.weight.cols()),
          Eigen::VectorXd::Zero(head.bias.size())};
    }
  }

  double loss = 0.0;
  for (const auto& sample : samples) {
    const auto head_it = model.heads.find(sample.model_id);
    if (head_it == model.heads.end()) {
      throw UnknownModelId("grounding_loss: no head for model '" +
                           sample.model_id + "'");
    }
    const GroundingModel::Head& head = head_it->second;
    const int label = sample.pair->voxel_label;
    if (label < 0 || label >= head.bias.size()) {
      throw LabelOutOfRange("grounding_loss: label " + std::to_string(label) +
                            " out of range for model '" + sample.model_id + "'");
    }

    const std::vector<int> tokens =
        hash_tokens(sample.pair->text, model.vocab_buckets);
    Eigen::VectorXd encoding = Eigen::VectorXd::Zero(model.embedding_dim);
    for (int t : tokens) encoding += model.embeddings.row(t).transpose();
    if (!tokens.empty()) encoding /= static_cast<double>(tokens.size());

    const Eigen::VectorXd logits = head.weight.transpose() * encoding + head.bias;
    const Eigen::VectorXd probs = softmax(logits);
    loss -= std::log(std::max(probs(label), 1e-300));

    if (gradients) {
      Eigen::VectorXd dlogits = probs;
      dlogits(label) -= 1.0;
      auto& dhead = gradients->d_heads[sample.model_id];
      dhead.weight += encoding * dlogits.transpose();
      dhead.bias += dlogits;
      if (!tokens.empty()) {
        const Eigen::VectorXd dencoding =
            (head.weight * dlogits) / static_cast<double>(tokens.size());
        for (int t : tokens) {
          gradients->d_embeddings.row(t) += dencoding.transpose();
        }
      }
    }
  }
  return loss;
}

TrainOutcome train_grounding(
    const std::map<std::string, std::vector<TrainingPair>>& pairs_by_model,
    const std::map<std::string, VoxelGrid>& grids, const TrainConfig& cfg) {
  if (pairs_by_model.empty()) {
    throw EmptyTrainingSet("train_grounding: no models supplied");
  }
  if (cfg.embedding_dim < 1 || cfg.vocab_buckets < 1 || cfg.batch_size < 1 ||
      cfg.epochs < 0 || !(cfg.learning_rate > 0.0) || cfg.momentum < 0.0 ||
      cfg.momentum >= 1.0) {
    throw InvalidConfig("train_grounding: invalid training configuration");
  }

  TrainOutcome outcome;
  GroundingModel& model = outcome.model;
  model.vocab_buckets = cfg.vocab_buckets;
  model.embedding_dim = cfg.embedding_dim;

  std::vector<TrainingSample> samples;
  for (const auto& [model_id, pairs] : pairs_by_model) {
    const auto grid_it = grids.find(model_id);
    if (grid_it == grids.end()) {
      throw UnknownModelId("train_grounding: no voxel grid for model '" +
                           model_id + "'");
    }
    if (pairs.empty()) {
      throw EmptyTrainingSet("train_grounding: model '" + model_id +
                             "' has no training pairs");
    }
    const int n_v = grid_it->second.num_active();
    for (const auto& pair : pairs) {
      if (pair.voxel_label < 0 || pair.voxel_label >= n_v) {
        throw LabelOutOfRange("train_grounding: label " +
                              std::to_string(pair.voxel_label) +
                              " out of range for model '" + model_id + "'");
      }
      samples.push_back(TrainingSample{model_id, &pair});
    }
    model.heads[model_id] = GroundingModel::Head{
        Eigen::MatrixXd::Zero(cfg.embedding_dim, n_v),
        Eigen::VectorXd::Zero(n_v)};
  }

  // Canonical sample order: training must not depend on how callers ordered
  // the pairs, only on the seed-derived shuffle.
  std::sort(samples.begin(), samples.end(),
            [](const TrainingSample& a, const TrainingSample& b) {
              if (a.model_id != b.model_id) return a.model_id < b.model_id;
              if (a.pair->text != b.pair->text) return a.pair->text < b.pair->text;
              if (a.pair->voxel_label != b.pair->voxel_label) {
                return a.pair->voxel_label < b.pair->voxel_label;
              }
              for (int axis = 0; axis < 3; ++axis) {
                if (a.pair->world_point(axis) != b.pair->world_point(axis)) {
                  return a.pair->world_point(axis) < b.pair->world_point(axis);
                }
              }
              return false;
            });

  Rng rng(cfg.seed);
  model.embeddings.resize(cfg.vocab_buckets, cfg.embedding_dim);
  for (Eigen::Index r = 0; r < model.embeddings.rows(); ++r) {
    for (Eigen::Index c = 0; c < model.embeddings.cols(); ++c) {
      model.embeddings(r, c) = cfg.embedding_init_stddev * rng.normal();
    }
  }

  Eigen::MatrixXd vel_embeddings =
      Eigen::MatrixXd::Zero(cfg.vocab_buckets, cfg.embedding_dim);
  std::map<std::string, GroundingModel::Head> velocities;
  for (const auto& [id, head] : model.heads) {
    velocities[id] = GroundingModel::Head{
        Eigen::MatrixXd::Zero(head.weight.rows(), head.weight.cols()),
        Eigen::VectorXd::Zero(head.bias.size())};
  }

  const int n = static_cast<int>(samples.size());
  outcome.epoch_losses.push_back(grounding_loss(model, samples) / n);

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with our own RNG; std::shuffle is implementation-defined.
    for (int i = n - 1; i > 0; --i) {
      std::swap(order[i], order[rng.uniform_int(i + 1)]);
    }

    for (int start = 0; start < n; start += cfg.batch_size) {
      const int end = std::min(n, start + cfg.batch_size);
      const double inv_batch = 1.0 / static_cast<double>(end - start);

      std::map<std::string, GroundingModel::Head> head_grads;
      std::map<int, Eigen::VectorXd> embedding_grads;
      for (int s = start; s < end; ++s) {
        const TrainingSample& sample = samples[order[s]];
        const GroundingModel::Head& head = model.heads.at(sample.model_id);
        const std::vector<int> tokens =
            hash_tokens(sample.pair->text, model.vocab_buckets);
        Eigen::VectorXd encoding = Eigen::VectorXd::Zero(model.embedding_dim);
        for (int t : tokens) encoding += model.embeddings.row(t).transpose();
        if (!tokens.empty()) encoding /= static_cast<double>(tokens.size());

        Eigen::VectorXd dlogits =
            softmax(head.weight.transpose() * encoding + head.bias);
        dlogits(sample.pair->voxel_label) -= 1.0;

        auto [hg_it, inserted] = head_grads.try_emplace(
            sample.model_id,
            GroundingModel::Head{
                Eigen::MatrixXd::Zero(head.weight.rows(), head.weight.cols()),
                Eigen::VectorXd::Zero(head.bias.size())});
        hg_it->second.weight += inv_batch * (encoding * dlogits.transpose());
        hg_it->second.bias += inv_batch * dlogits;

        if (!tokens.empty()) {
          const Eigen::VectorXd dencoding = (head.weight * dlogits) *
                                            (inv_batch /
                                             static_cast<double>(tokens.size()));
          for (int t : tokens) {
            auto [eg_it, fresh] = embedding_grads.try_emplace(
                t, Eigen::VectorXd::Zero(model.embedding_dim));
            eg_it->second += dencoding;
          }
        }
      }

      // Momentum update: v <- momentum*v - lr*g; theta <- theta + v.
      vel_embeddings *= cfg.momentum;
      for (const auto& [bucket, grad] : embedding_grads) {
        vel_embeddings.row(bucket) -= cfg.learning_rate * grad.transpose();
      }
      model.embeddings += vel_embeddings;

      for (auto& [id, vel] : velocities) {
        vel.weight *= cfg.momentum;
        vel.bias *= cfg.momentum;
        const auto hg_it = head_grads.find(id);
        if (hg_it != head_grads.end()) {
          vel.weight -= cfg.learning_rate * hg_it->second.weight;
          vel.bias -= cfg.learning_rate * hg_it->second.bias;
        }
        auto& head = model.heads.at(id);
        head.weight += vel.weight;
        head.bias += vel.bias;
      }
    }
    outcome.epoch_losses.push_back(grounding_loss(model, samples) / n);
  }
  return outcome;
}

QueryResult ground_query(const GroundingModel& model,
                         const std::string& model_id, const std::string& text,
                         const VoxelGrid& grid) {
  const auto head_it = model.heads.find(model_id);
  if (head_it == model.heads.end()) {
    throw UnknownModelId("ground_query: no head for model '" + model_id + "'");
  }
  const GroundingModel::Head& head = head_it->second;
  if (head.bias.size() != grid.num_active()) {
    throw InvalidArgument("ground_query: head size " +
                          std::to_string(head.bias.size()) +
                          " does not match grid with " +
                          std::to_string(grid.num_active()) + " active voxels");
  }

  QueryResult result;
  result.scores = softmax(head.weight.transpose() * model.encode(text) + head.bias);
  result.predicted_label = 0;
  for (int i = 1; i < result.scores.size(); ++i) {
    if (result.scores(i) > result.scores(result.predicted_label)) {
      result.predicted_label = i;
    }
  }
  result.predicted_point = grid.center_of_label(result.predicted_label);
  return result;
}

Vec3 chance_baseline(const VoxelGrid& grid, Rng& rng) {
  if (grid.active.empty()) {
    throw InvalidArgument("chance_baseline: grid has no active voxels");
  }
  return grid.voxel_center(grid.active[rng.uniform_int(grid.num_active())]);
}

GroundingEval evaluate_grounding_pck(
    const std::vector<GroundingQuery>& queries, const GroundingModel& model,
    const std::map<std::string, VoxelGrid>& grids,
    const std::vector<double>& thresholds_cm,
    const std::map<std::string, double>& metric_scales_cm_per_unit,
    uint64_t chance_seed) {
  if (queries.empty()) {
    throw InvalidArgument("evaluate_grounding_pck: no queries");
  }
  if (!std::is_sorted(thresholds_cm.begin(), thresholds_cm.end())) {
    throw InvalidArgument("evaluate_grounding_pck: thresholds must be ascending");
  }

  Rng chance_rng(chance_seed);
  std::vector<double> method_cm, chance_cm;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>
      per_class_cm;  // class -> (chance, method)
  for (const auto& q : queries) {
    const auto grid_it = grids.find(q.model_id);
    if (grid_it == grids.end()) {
      throw UnknownModelId("evaluate_grounding_pck: no grid for model '" +
                           q.model_id + "'");
    }
    const auto scale_it = metric_scales_cm_per_unit.find(q.model_id);
    if (scale_it == metric_scales_cm_per_unit.end()) {
      throw UnknownModelId("evaluate_grounding_pck: no metric scale for model '" +
                           q.model_id + "'");
    }
    const double scale = scale_it->second;
    const QueryResult qr = ground_query(model, q.model_id, q.text, grid_it->second);
    const double d_method = scale * (qr.predicted_point - q.gt_point).norm();
    const double d_chance =
        scale * (chance_baseline(grid_it->second, chance_rng) - q.gt_point).norm();
    method_cm.push_back(d_method);
    chance_cm.push_back(d_chance);
    if (!q.object_class.empty()) {
      auto& slot = per_class_cm[q.object_class];
      slot.first.push_back(d_chance);
      slot.second.push_back(d_method);
    }
  }

  auto make_curve = [&thresholds_cm](const std::vector<double>& distances) {
    PckCurve curve;
    curve.thresholds_cm = thresholds_cm;
    for (double threshold : thresholds_cm) {
      int within = 0;
      for (double d : distances) {
        if (d <= threshold) ++within;
      }
      curve.values.push_back(static_cast<double>(within) /
                             static_cast<double>(distances.size()));
    }
    return curve;
  };

  GroundingEval eval;
  eval.method = make_curve(method_cm);
  eval.chance = make_curve(chance_cm);
  eval.query_count = static_cast<int>(queries.size());
  for (const auto& [cls, distances] : per_class_cm) {
    eval.per_class[cls] = {make_curve(distances.first),
                           make_curve(distances.second)};
  }
  return eval;
}

}  // namespace reconalign
