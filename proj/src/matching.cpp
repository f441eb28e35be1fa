#include "reconalign/matching.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace reconalign {

std::string to_string(MatchStage stage) {
  return stage == MatchStage::raw_mutual ? "raw_mutual" : "flow_filtered";
}

MatchStage match_stage_from_string(const std::string& s) {
  if (s == "raw_mutual") return MatchStage::raw_mutual;
  if (s == "flow_filtered") return MatchStage::flow_filtered;
  throw ParseError("unknown match stage '" + s + "'");
}

namespace {

Eigen::MatrixXd normalized_columns(const Eigen::MatrixXd& m, const char* what) {
  Eigen::MatrixXd out = m;
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    const double norm = out.col(c).norm();
    if (norm <= 0.0 || !std::isfinite(norm)) {
      std::ostringstream msg;
      msg << what << ": descriptor column " << c << " is not normalizable";
      throw InvariantViolation(msg.str());
    }
    out.col(c) /= norm;
  }
  return out;
}

// Argmax per column with ties resolved toward the lowest row index.
std::vector<int> column_argmax(const Eigen::MatrixXd& similarity) {
  std::vector<int> best(similarity.cols());
  for (Eigen::Index c = 0; c < similarity.cols(); ++c) {
    int best_row = 0;
    double best_value = similarity(0, c);
    for (Eigen::Index r = 1; r < similarity.rows(); ++r) {
      if (similarity(r, c) > best_value) {
        best_value = similarity(r, c);
        best_row = static_cast<int>(r);
      }
    }
    best[c] = best_row;
  }
  return best;
}

}  // namespace

MatchSet mutual_nn_match(const LocalFeatureSet& a, const LocalFeatureSet& b) {
  if (a.descriptors.cols() == 0) {
    throw EmptyFeatureSet("mutual_nn_match: feature set '" + a.frame_id +
                          "' is empty");
  }
  if (b.descriptors.cols() == 0) {
    throw EmptyFeatureSet("mutual_nn_match: feature set '" + b.frame_id +
                          "' is empty");
  }
  if (a.descriptors.rows() != b.descriptors.rows()) {
    throw InvalidArgument("mutual_nn_match: descriptor dimensions differ");
  }

  const Eigen::MatrixXd na = normalized_columns(a.descriptors, "mutual_nn_match");
  const Eigen::MatrixXd nb = normalized_columns(b.descriptors, "mutual_nn_match");

  // On unit vectors, minimizing Euclidean distance is maximizing dot product.
  const Eigen::MatrixXd similarity = na.transpose() * nb;  // N_A x N_B
  const std::vector<int> best_a_for_b = column_argmax(similarity);
  const std::vector<int> best_b_for_a = column_argmax(similarity.transpose());

  MatchSet out;
  out.frame_a = a.frame_id;
  out.frame_b = b.frame_id;
  out.stage = MatchStage::raw_mutual;
  for (int i = 0; i < static_cast<int>(best_b_for_a.size()); ++i) {
    const int j = best_b_for_a[i];
    if (best_a_for_b[j] == i) {
      out.matches.push_back(Match{i, j, a.positions.col(i), b.positions.col(j)});
    }
  }
  return out;
}

std::vector<FramePairCandidate> retrieve_frame_pairs(
    const std::vector<GlobalDescriptor>& video_a,
    const std::vector<GlobalDescriptor>& video_b, int n_m) {
  if (video_a.empty() || video_b.empty()) {
    throw EmptyDescriptorList("retrieve_frame_pairs: empty descriptor list");
  }
  if (n_m < 1) {
    throw InvalidArgument("retrieve_frame_pairs: n_m must be >= 1");
  }

  std::vector<FramePairCandidate> all;
  all.reserve(video_a.size() * video_b.size());
  for (const auto& da : video_a) {
    const double norm_a = da.vector.norm();
    if (norm_a <= 0.0) {
      throw InvariantViolation("retrieve_frame_pairs: zero descriptor for '" +
                               da.frame_id + "'");
    }
    for (const auto& db : video_b) {
      const double norm_b = db.vector.norm();
      if (norm_b <= 0.0) {
        throw InvariantViolation("retrieve_frame_pairs: zero descriptor for '" +
                                 db.frame_id + "'");
      }
      all.push_back(FramePairCandidate{
          da.frame_id, db.frame_id, da.vector.dot(db.vector) / (norm_a * norm_b)});
    }
  }

  std::sort(all.begin(), all.end(),
            [](const FramePairCandidate& x, const FramePairCandidate& y) {
              if (x.similarity != y.similarity) return x.similarity > y.similarity;
              if (x.frame_a != y.frame_a) return x.frame_a < y.frame_a;
              return x.frame_b < y.frame_b;
            });
  if (static_cast<int>(all.size()) > n_m) all.resize(n_m);
  return all;
}

namespace {

// Clamped bilinear sample of the flow grid at a source pixel. Returns false
// if any contributing cell is masked invalid.
bool sample_flow(const FlowField& flow, const Vec2& source_pixel, Vec2* out) {
  const double sx = static_cast<double>(flow.source_width) / flow.grid_width;
  const double sy = static_cast<double>(flow.source_height) / flow.grid_height;
  // Grid coordinates with cell centers at integer positions.
  double gx = source_pixel.x() / sx - 0.5;
  double gy = source_pixel.y() / sy - 0.5;
  gx = std::clamp(gx, 0.0, static_cast<double>(flow.grid_width - 1));
  gy = std::clamp(gy, 0.0, static_cast<double>(flow.grid_height - 1));

  const int x0 = std::min(static_cast<int>(gx), flow.grid_width - 1);
  const int y0 = std::min(static_cast<int>(gy), flow.grid_height - 1);
  const int x1 = std::min(x0 + 1, flow.grid_width - 1);
  const int y1 = std::min(y0 + 1, flow.grid_height - 1);
  const double fx = gx - x0;
  const double fy = gy - y0;

  if (!flow.valid_at(x0, y0) || !flow.valid_at(x1, y0) ||
      !flow.valid_at(x0, y1) || !flow.valid_at(x1, y1)) {
    return false;
  }
  *out = (1 - fy) * ((1 - fx) * flow.at(x0, y0) + fx * flow.at(x1, y0)) +
         fy * ((1 - fx) * flow.at(x0, y1) + fx * flow.at(x1, y1));
  return true;
}

}  // namespace

MatchSet flow_filter(const MatchSet& matches, const FlowField& flow,
                     double tolerance_px) {
  if (matches.stage != MatchStage::raw_mutual) {
    throw StageMismatch("flow_filter expects raw_mutual matches, got " +
                        to_string(matches.stage));
  }
  if (flow.source_frame_id != matches.frame_a ||
      flow.target_frame_id != matches.frame_b) {
    std::ostringstream msg;
    msg << "flow covers (" << flow.source_frame_id << " -> "
        << flow.target_frame_id << ") but matches are (" << matches.frame_a
        << " -> " << matches.frame_b << ")";
    throw FlowFrameMismatch(msg.str());
  }
  if (tolerance_px <= 0.0) {
    throw InvalidArgument("flow_filter: tolerance must be positive");
  }

  MatchSet out;
  out.frame_a = matches.frame_a;
  out.frame_b = matches.frame_b;
  out.stage = MatchStage::flow_filtered;
  for (const Match& m : matches.matches) {
    Vec2 mapped;
    if (!sample_flow(flow, m.pixel_a, &mapped)) continue;
    if ((mapped - m.pixel_b).norm() <= tolerance_px) {
      out.matches.push_back(m);
    }
  }
  return out;
}

}  // namespace reconalign
