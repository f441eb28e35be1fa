#include "reconalign/alignment.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "reconalign/parallel.hpp"
#include "reconalign/rng.hpp"

namespace reconalign {

std::vector<Correspondence3D> lift_matches(const MatchSet& matches,
                                           const Reconstruction& rec_a,
                                           const Reconstruction& rec_b,
                                           double assoc_radius_px) {
  if (matches.stage != MatchStage::flow_filtered) {
    throw StageMismatch("lift_matches expects flow_filtered matches");
  }
  if (rec_a.frames.find(matches.frame_a) == rec_a.frames.end()) {
    throw UnknownFrame("lift_matches: frame '" + matches.frame_a +
                       "' not in reconstruction '" + rec_a.id + "'");
  }
  if (rec_b.frames.find(matches.frame_b) == rec_b.frames.end()) {
    throw UnknownFrame("lift_matches: frame '" + matches.frame_b +
                       "' not in reconstruction '" + rec_b.id + "'");
  }

  auto frame_observations = [](const Reconstruction& rec,
                               const std::string& frame_id) {
    std::vector<const TrackObservation*> obs;
    for (const auto& o : rec.observations) {
      if (o.frame_id == frame_id) obs.push_back(&o);
    }
    return obs;
  };
  const auto obs_a = frame_observations(rec_a, matches.frame_a);
  const auto obs_b = frame_observations(rec_b, matches.frame_b);

  // Nearest stored observation within the association radius; ties go to the
  // lowest keypoint index.
  auto resolve = [assoc_radius_px](const std::vector<const TrackObservation*>& obs,
                                   const Vec2& pixel) -> const TrackObservation* {
    const TrackObservation* best = nullptr;
    double best_dist = 0.0;
    for (const TrackObservation* o : obs) {
      const double d = (o->pixel - pixel).norm();
      if (d > assoc_radius_px) continue;
      if (!best || d < best_dist ||
          (d == best_dist && o->keypoint_index < best->keypoint_index)) {
        best = o;
        best_dist = d;
      }
    }
    return best;
  };

  std::vector<Correspondence3D> out;
  out.reserve(matches.matches.size());
  for (const Match& m : matches.matches) {
    const TrackObservation* ta = resolve(obs_a, m.pixel_a);
    if (!ta) continue;
    const TrackObservation* tb = resolve(obs_b, m.pixel_b);
    if (!tb) continue;
    out.push_back(Correspondence3D{rec_a.points.at(ta->point_id),
                                   rec_b.points.at(tb->point_id),
                                   {matches.frame_a, matches.frame_b}});
  }
  return out;
}

SimilarityTransform3 fit_similarity_umeyama(const std::vector<Vec3>& src,
                                            const std::vector<Vec3>& dst) {
  if (src.size() != dst.size()) {
    throw InvalidArgument("fit_similarity_umeyama: point lists differ in size");
  }
  const int n = static_cast<int>(src.size());
  if (n < 3) {
    throw TooFewPoints("fit_similarity_umeyama needs at least 3 point pairs, got " +
                       std::to_string(n));
  }

  Vec3 mean_src = Vec3::Zero();
  Vec3 mean_dst = Vec3::Zero();
  for (int i = 0; i < n; ++i) {
    mean_src += src[i];
    mean_dst += dst[i];
  }
  mean_src /= n;
  mean_dst /= n;

  double src_variance = 0.0;
  Mat3 covariance = Mat3::Zero();
  for (int i = 0; i < n; ++i) {
    const Vec3 cs = src[i] - mean_src;
    const Vec3 cd = dst[i] - mean_dst;
    src_variance += cs.squaredNorm();
    covariance += cd * cs.transpose();
  }
  src_variance /= n;
  covariance /= n;

  if (src_variance <= 1e-18) {
    throw DegenerateConfiguration(
        "fit_similarity_umeyama: source points are coincident");
  }

  Eigen::JacobiSVD<Mat3> svd(covariance,
                             Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 d = svd.singularValues();
  // Rank 2 (planar) is fine; rank < 2 means collinear or coincident points.
  if (d(1) <= 1e-9 * std::max(d(0), 1e-300)) {
    throw DegenerateConfiguration(
        "fit_similarity_umeyama: points are collinear within tolerance");
  }

  Vec3 sign = Vec3::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) {
    sign(2) = -1.0;
  }
  const Mat3 rotation =
      svd.matrixU() * sign.asDiagonal() * svd.matrixV().transpose();
  const double scale = d.dot(sign) / src_variance;
  if (!(scale > 0.0)) {
    throw DegenerateConfiguration(
        "fit_similarity_umeyama: non-positive scale estimate");
  }
  const Vec3 translation = mean_dst - scale * (rotation * mean_src);
  return SimilarityTransform3::from_parts(scale, rotation, translation);
}

namespace {

double bbox_diagonal(const std::vector<Correspondence3D>& corrs) {
  Vec3 lo = corrs.front().point_b;
  Vec3 hi = lo;
  for (const auto& c : corrs) {
    lo = lo.cwiseMin(c.point_b);
    hi = hi.cwiseMax(c.point_b);
  }
  return (hi - lo).norm();
}

std::vector<int> count_inliers(const std::vector<Correspondence3D>& corrs,
                               const SimilarityTransform3& t, double threshold) {
  std::vector<int> inliers;
  for (int i = 0; i < static_cast<int>(corrs.size()); ++i) {
    const double residual =
        (corrs[i].point_b - apply_transform(t, corrs[i].point_a)).norm();
    if (residual <= threshold) inliers.push_back(i);
  }
  return inliers;
}

double inlier_rms(const std::vector<Correspondence3D>& corrs,
                  const SimilarityTransform3& t, const std::vector<int>& inliers) {
  if (inliers.empty()) return 0.0;
  double sum = 0.0;
  for (int i : inliers) {
    sum += (corrs[i].point_b - apply_transform(t, corrs[i].point_a)).squaredNorm();
  }
  return std::sqrt(sum / static_cast<double>(inliers.size()));
}

// Standard adaptive RANSAC bound: iterations needed to draw one
// all-inlier minimal sample with the requested confidence.
int required_iterations(double inlier_ratio, double confidence, int cap) {
  if (inlier_ratio <= 0.0) return cap;
  const double w3 = inlier_ratio * inlier_ratio * inlier_ratio;
  if (w3 >= 1.0) return 1;
  const double denom = std::log1p(-w3);
  if (denom >= 0.0) return cap;
  const double needed = std::log(1.0 - confidence) / denom;
  if (needed >= static_cast<double>(cap)) return cap;
  return std::max(1, static_cast<int>(std::ceil(needed)));
}

}  // namespace

std::optional<SimilarityFit> solver_u(
    const std::vector<Correspondence3D>& correspondences,
    const RansacConfig& cfg) {
  const int n = static_cast<int>(correspondences.size());
  const int required = std::max(3, cfg.min_inliers);
  if (n < required) {
    std::ostringstream msg;
    msg << "solver_u: " << n << " correspondences supplied, need at least "
        << required;
    throw InsufficientCorrespondences(msg.str());
  }

  const double threshold =
      cfg.threshold_is_absolute
          ? cfg.inlier_threshold
          : cfg.inlier_threshold * bbox_diagonal(correspondences);
  if (!(threshold > 0.0)) return std::nullopt;

  Rng rng(cfg.seed);
  std::vector<int> best_inliers;
  SimilarityTransform3 best_transform;
  int iteration_cap = cfg.max_iterations;

  for (int iter = 0; iter < iteration_cap; ++iter) {
    int i0 = rng.uniform_int(n);
    int i1 = rng.uniform_int(n);
    while (i1 == i0) i1 = rng.uniform_int(n);
    int i2 = rng.uniform_int(n);
    while (i2 == i0 || i2 == i1) i2 = rng.uniform_int(n);

    SimilarityTransform3 candidate;
    try {
      candidate = fit_similarity_umeyama(
          {correspondences[i0].point_a, correspondences[i1].point_a,
           correspondences[i2].point_a},
          {correspondences[i0].point_b, correspondences[i1].point_b,
           correspondences[i2].point_b});
    } catch (const Error&) {
      continue;  // degenerate sample
    }

    std::vector<int> inliers = count_inliers(correspondences, candidate, threshold);
    if (inliers.size() > best_inliers.size()) {
      best_inliers = std::move(inliers);
      best_transform = candidate;
      iteration_cap = std::min(
          cfg.max_iterations,
          required_iterations(static_cast<double>(best_inliers.size()) / n,
                              cfg.confidence, cfg.max_iterations));
    }
  }

  if (static_cast<int>(best_inliers.size()) < 3) return std::nullopt;

  // Refit on the consensus set, keeping the minimal-sample model if the
  // refit loses support (the final inlier count never drops below the best
  // accepted minimal-sample count).
  SimilarityTransform3 final_transform = best_transform;
  std::vector<int> final_inliers = best_inliers;
  try {
    std::vector<Vec3> src, dst;
    src.reserve(best_inliers.size());
    dst.reserve(best_inliers.size());
    for (int i : best_inliers) {
      src.push_back(correspondences[i].point_a);
      dst.push_back(correspondences[i].point_b);
    }
    const SimilarityTransform3 refit = fit_similarity_umeyama(src, dst);
    std::vector<int> recount = count_inliers(correspondences, refit, threshold);
    if (recount.size() >= best_inliers.size()) {
      final_transform = refit;
      final_inliers = std::move(recount);
    }
  } catch (const Error&) {
    // fall back to the minimal-sample model
  }

  const int count = static_cast<int>(final_inliers.size());
  if (count < cfg.min_inliers ||
      static_cast<double>(count) / n < cfg.min_inlier_ratio) {
    return std::nullopt;
  }
  SimilarityFit fit;
  fit.transform = final_transform;
  fit.inlier_rms = inlier_rms(correspondences, final_transform, final_inliers);
  fit.inlier_indices = std::move(final_inliers);
  fit.total_count = n;
  return fit;
}

bool AlignmentGraph::has_node(const std::string& id) const {
  return std::binary_search(nodes.begin(), nodes.end(), id);
}

void AlignmentGraph::validate() const {
  if (!std::is_sorted(nodes.begin(), nodes.end()) ||
      std::adjacent_find(nodes.begin(), nodes.end()) != nodes.end()) {
    throw InvariantViolation("alignment graph nodes must be sorted and unique");
  }
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& e : edges) {
    if (!has_node(e.from_id) || !has_node(e.to_id)) {
      throw InvariantViolation("alignment graph edge (" + e.from_id + ", " +
                               e.to_id + ") references unknown node");
    }
    if (e.from_id == e.to_id) {
      throw InvariantViolation("alignment graph self-edge at " + e.from_id);
    }
    auto key = std::minmax(e.from_id, e.to_id);
    if (!seen.insert({key.first, key.second}).second) {
      throw InvariantViolation("duplicate alignment graph edge (" + e.from_id +
                               ", " + e.to_id + ")");
    }
    if (e.inlier_count < 0 || e.inlier_count > e.total_count) {
      throw InvariantViolation("alignment graph edge (" + e.from_id + ", " +
                               e.to_id + ") has inconsistent inlier counts");
    }
  }
}

AlignmentGraph build_alignment_graph(const std::vector<std::string>& node_ids,
                                     const PairwiseCorrespondences& pairwise,
                                     const RansacConfig& cfg, int threads) {
  AlignmentGraph graph;
  graph.nodes = node_ids;
  std::sort(graph.nodes.begin(), graph.nodes.end());
  graph.nodes.erase(std::unique(graph.nodes.begin(), graph.nodes.end()),
                    graph.nodes.end());

  std::vector<const PairwiseCorrespondences::value_type*> entries;
  std::set<std::pair<std::string, std::string>> seen_pairs;
  for (const auto& entry : pairwise) {
    const auto& [from_id, to_id] = entry.first;
    if (!graph.has_node(from_id) || !graph.has_node(to_id)) {
      throw InvalidArgument("build_alignment_graph: pair (" + from_id + ", " +
                            to_id + ") references unknown node");
    }
    if (from_id == to_id) {
      throw InvalidArgument("build_alignment_graph: self pair at " + from_id);
    }
    auto key = std::minmax(from_id, to_id);
    if (!seen_pairs.insert({key.first, key.second}).second) {
      throw InvalidArgument("build_alignment_graph: pair (" + from_id + ", " +
                            to_id + ") supplied in both directions");
    }
    entries.push_back(&entry);
  }

  std::vector<std::optional<EdgeEstimate>> results(entries.size());
  parallel_for(entries.size(), threads, [&](size_t i) {
    const auto& [pair_ids, corrs] = *entries[i];
    if (static_cast<int>(corrs.size()) < std::max(3, cfg.min_inliers)) return;
    RansacConfig pair_cfg = cfg;
    pair_cfg.seed =
        mix_seed(mix_seed(cfg.seed, fnv1a(pair_ids.first)), fnv1a(pair_ids.second));
    const auto fit = solver_u(corrs, pair_cfg);
    if (!fit) return;
    EdgeEstimate edge;
    edge.from_id = pair_ids.first;
    edge.to_id = pair_ids.second;
    edge.transform = fit->transform;
    edge.inlier_count = static_cast<int>(fit->inlier_indices.size());
    edge.total_count = fit->total_count;
    edge.inlier_rms = fit->inlier_rms;
    results[i] = std::move(edge);
  });

  for (auto& r : results) {
    if (r) graph.edges.push_back(std::move(*r));
  }
  return graph;
}

namespace {

struct PathLabel {
  int min_inlier_count = std::numeric_limits<int>::max();
  std::vector<std::string> sequence;  // node ids from source to here
  SimilarityTransform3 transform;     // source frame -> this node's frame
};

// Prefer larger bottleneck inlier count, then the lexicographically smaller
// node sequence. Sequences compared here always have equal length.
bool better_label(const PathLabel& a, const PathLabel& b) {
  if (a.min_inlier_count != b.min_inlier_count) {
    return a.min_inlier_count > b.min_inlier_count;
  }
  return a.sequence < b.sequence;
}

}  // namespace

SimilarityTransform3 path_transform(const AlignmentGraph& graph,
                                    const std::string& from_id,
                                    const std::string& to_id) {
  if (!graph.has_node(from_id)) {
    throw UnknownReference("path_transform: unknown node '" + from_id + "'");
  }
  if (!graph.has_node(to_id)) {
    throw UnknownReference("path_transform: unknown node '" + to_id + "'");
  }
  if (from_id == to_id) return SimilarityTransform3::identity();

  // Adjacency with both edge directions available.
  struct Arc {
    std::string to;
    SimilarityTransform3 transform;
    int inlier_count;
  };
  std::map<std::string, std::vector<Arc>> adjacency;
  for (const auto& e : graph.edges) {
    adjacency[e.from_id].push_back(Arc{e.to_id, e.transform, e.inlier_count});
    adjacency[e.to_id].push_back(Arc{e.from_id, invert(e.transform), e.inlier_count});
  }
  for (auto& [node, arcs] : adjacency) {
    std::sort(arcs.begin(), arcs.end(),
              [](const Arc& a, const Arc& b) { return a.to < b.to; });
  }

  // Breadth-first by hop count; one best label per node and level.
  std::map<std::string, PathLabel> settled;
  std::map<std::string, PathLabel> frontier;
  frontier[from_id] =
      PathLabel{std::numeric_limits<int>::max(), {from_id},
                SimilarityTransform3::identity()};

  while (!frontier.empty()) {
    if (auto it = frontier.find(to_id); it != frontier.end()) {
      return it->second.transform;
    }
    for (const auto& [node, label] : frontier) {
      settled.emplace(node, label);
    }
    std::map<std::string, PathLabel> next;
    for (const auto& [node, label] : frontier) {
      auto arcs_it = adjacency.find(node);
      if (arcs_it == adjacency.end()) continue;
      for (const Arc& arc : arcs_it->second) {
        if (settled.count(arc.to)) continue;
        PathLabel candidate;
        candidate.min_inlier_count = std::min(label.min_inlier_count, arc.inlier_count);
        candidate.sequence = label.sequence;
        candidate.sequence.push_back(arc.to);
        candidate.transform = compose(arc.transform, label.transform);
        auto [it, inserted] = next.emplace(arc.to, candidate);
        if (!inserted && better_label(candidate, it->second)) {
          it->second = candidate;
        }
      }
    }
    frontier = std::move(next);
  }
  throw NodesDisconnected("no path between '" + from_id + "' and '" + to_id + "'");
}

Registration register_all(const AlignmentGraph& graph,
                          const std::string& reference_id) {
  if (!graph.has_node(reference_id)) {
    throw UnknownReference("register_all: unknown reference '" + reference_id +
                           "'");
  }
  Registration out;
  for (const auto& node : graph.nodes) {
    try {
      out.to_reference[node] = path_transform(graph, node, reference_id);
    } catch (const NodesDisconnected&) {
      out.unregistered.push_back(node);
    }
  }
  return out;
}

}  // namespace reconalign
