#include "reconalign/synthetic.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace reconalign {

namespace fs = std::filesystem;

void SyntheticSceneConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InvalidConfig("synthetic scene config: " + what);
  };
  require(num_models >= 1, "num_models must be >= 1");
  require(master_points >= 10, "master_points must be >= 10");
  require(cameras_per_model >= 2, "cameras_per_model must be >= 2");
  require(object_extent > 0.0, "object_extent must be positive");
  require(object_thickness >= 0.0, "object_thickness must be >= 0");
  require(camera_distance > object_extent, "cameras must sit outside the object");
  require(image_width > 0 && image_height > 0, "image size must be positive");
  require(focal > 0.0, "focal must be positive");
  require(pixel_noise >= 0.0, "pixel_noise must be >= 0");
  require(point_noise >= 0.0, "point_noise must be >= 0");
  require(outlier_fraction >= 0.0 && outlier_fraction <= 1.0,
          "outlier_fraction must be in [0, 1]");
  require(scale_min > 0.0 && scale_max >= scale_min, "bad scale range");
  if (!visibility_windows.empty()) {
    require(static_cast<int>(visibility_windows.size()) == num_models,
            "visibility_windows must have one entry per model");
    for (const auto& [lo, hi] : visibility_windows) {
      require(lo >= 0.0 && hi <= 1.0 && lo < hi, "bad visibility window");
    }
  }
  require(descriptor_dim >= 8, "descriptor_dim must be >= 8");
  require(global_descriptor_dim >= 10, "global_descriptor_dim must be >= 10");
  require(retrieved_pairs_per_video_pair >= 1, "need at least one retrieved pair");
  require(flow_grid_divisor >= 1, "flow_grid_divisor must be >= 1");
  require(num_keypoints >= 0, "num_keypoints must be >= 0");
  require(annotated_frames_per_video >= 2, "need >= 2 annotated frames");
  if (!segments_per_model.empty()) {
    require(static_cast<int>(segments_per_model.size()) == num_models,
            "segments_per_model must have one entry per model");
    require(!clusters.empty(), "grounding segments need object clusters");
    require(!narration_templates.empty(), "grounding segments need templates");
    for (int s : segments_per_model) require(s >= 0, "negative segment count");
  }
  require(saliency_rows >= 1 && saliency_cols >= 1, "bad saliency map size");
  require(queries_per_object >= 0, "queries_per_object must be >= 0");
}

namespace {

std::string video_name(int m) { return "v" + std::to_string(m); }

std::string frame_name(int m, const char* kind, int i) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "v%d/%s%03d", m, kind, i);
  return buffer;
}

Mat3 look_at_rotation(const Vec3& center, const Vec3& target) {
  const Vec3 z = (target - center).normalized();
  Vec3 up(0.0, 0.0, 1.0);
  if (std::abs(z.dot(up)) > 0.99) up = Vec3(0.0, 1.0, 0.0);
  const Vec3 x = up.cross(z).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.row(0) = x;
  r.row(1) = y;
  r.row(2) = z;
  return r;
}

SimilarityTransform3 random_similarity(Rng& rng, double scale_min,
                                       double scale_max) {
  // Uniform rotation from a normalized 4-normal quaternion.
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  const double scale = rng.uniform(scale_min, scale_max);
  const Vec3 translation(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0),
                         rng.uniform(-2.0, 2.0));
  return SimilarityTransform3::from_parts(scale, q.toRotationMatrix(),
                                          translation);
}

struct CanonicalCamera {
  Vec3 center;
  Mat3 rotation;  // canonical world -> camera
  Vec3 look_target;
};

// Largest-remainder split of `total` corrupted rows over sections sized
// `section_sizes`, capped by each section's size.
std::vector<int> distribute_corruption(const std::vector<int>& section_sizes,
                                       double fraction) {
  const long long total_rows =
      std::accumulate(section_sizes.begin(), section_sizes.end(), 0ll);
  int target = static_cast<int>(std::llround(fraction * total_rows));
  std::vector<int> counts(section_sizes.size(), 0);
  std::vector<std::pair<double, size_t>> remainders;
  for (size_t i = 0; i < section_sizes.size(); ++i) {
    const double exact = fraction * section_sizes[i];
    counts[i] = std::min(section_sizes[i], static_cast<int>(exact));
    remainders.push_back({exact - counts[i], i});
    target -= counts[i];
  }
  std::sort(remainders.begin(), remainders.end(),
            [](const auto& a, const auto& b) {
              if (a.first != b.first) return a.first > b.first;
              return a.second < b.second;
            });
  for (const auto& [rem, i] : remainders) {
    if (target <= 0) break;
    if (counts[i] < section_sizes[i]) {
      ++counts[i];
      --target;
    }
  }
  return counts;
}

}  // namespace

SyntheticScene generate_synthetic_scene(const SyntheticSceneConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  SyntheticScene scene;

  // --- canonical object -----------------------------------------------------
  const double ex = cfg.object_extent;
  const double ez = cfg.object_thickness;
  std::vector<Vec3> canonical_points;
  canonical_points.reserve(cfg.master_points +
                           cfg.clusters.size() * cfg.cluster_points);
  for (int i = 0; i < cfg.master_points; ++i) {
    canonical_points.push_back(Vec3(rng.uniform(-ex, ex), rng.uniform(-ex, ex),
                                    ez > 0.0 ? rng.uniform(-ez, ez) : 0.0));
  }
  const int first_cluster_point = cfg.master_points;
  for (const auto& cluster : cfg.clusters) {
    for (int i = 0; i < cfg.cluster_points; ++i) {
      Vec3 p = cluster.position;
      p.x() += cfg.cluster_radius * rng.normal();
      p.y() += cfg.cluster_radius * rng.normal();
      if (ez > 0.0) {
        p.z() += std::min(cfg.cluster_radius, ez / 2.0) * rng.normal();
        p.z() = std::clamp(p.z(), -ez, ez);
      }
      canonical_points.push_back(p);
    }
  }
  const int total_points = static_cast<int>(canonical_points.size());

  Keypoints3D keypoints;
  keypoints.coords.resize(3, cfg.num_keypoints);
  for (int j = 0; j < cfg.num_keypoints; ++j) {
    char name[16];
    std::snprintf(name, sizeof(name), "kp%02d", j);
    keypoints.names.push_back(name);
    keypoints.coords.col(j) = Vec3(rng.uniform(-0.8 * ex, 0.8 * ex),
                                   rng.uniform(-0.8 * ex, 0.8 * ex),
                                   ez > 0.0 ? rng.uniform(-ez, ez) : 0.0);
  }
  scene.ground_truth.canonical_keypoints = keypoints;
  scene.ground_truth.clusters = cfg.clusters;
  scene.ground_truth.pixel_noise = cfg.pixel_noise;
  scene.ground_truth.point_noise = cfg.point_noise;

  // --- planted transforms and per-model point clouds ------------------------
  std::vector<SimilarityTransform3> to_model(cfg.num_models);
  to_model[0] = SimilarityTransform3::identity();
  for (int m = 1; m < cfg.num_models; ++m) {
    to_model[m] = random_similarity(rng, cfg.scale_min, cfg.scale_max);
  }
  for (int m = 0; m < cfg.num_models; ++m) {
    scene.ground_truth.canonical_to_model[video_name(m)] = to_model[m];
  }

  // Per-model 3D noise is injected in the canonical frame so its magnitude is
  // comparable across models regardless of the planted scales.
  std::vector<std::vector<Vec3>> model_points(cfg.num_models);
  for (int m = 0; m < cfg.num_models; ++m) {
    model_points[m].reserve(total_points);
    for (const Vec3& p : canonical_points) {
      Vec3 noisy = p;
      if (cfg.point_noise > 0.0) {
        noisy += Vec3(cfg.point_noise * rng.normal(),
                      cfg.point_noise * rng.normal(),
                      cfg.point_noise * rng.normal());
      }
      model_points[m].push_back(apply_transform(to_model[m], noisy));
    }
  }

  std::vector<std::vector<int>> visible_ids(cfg.num_models);
  for (int m = 0; m < cfg.num_models; ++m) {
    if (cfg.visibility_windows.empty()) {
      visible_ids[m].resize(total_points);
      std::iota(visible_ids[m].begin(), visible_ids[m].end(), 0);
    } else {
      const auto [lo, hi] = cfg.visibility_windows[m];
      const double x_lo = (2.0 * lo - 1.0) * ex;
      const double x_hi = (2.0 * hi - 1.0) * ex;
      for (int k = 0; k < cfg.master_points; ++k) {
        const double x = canonical_points[k].x();
        if (x >= x_lo && x <= x_hi) visible_ids[m].push_back(k);
      }
      for (int k = first_cluster_point; k < total_points; ++k) {
        visible_ids[m].push_back(k);  // clusters are always visible
      }
    }
  }

  // --- cameras, reconstructions, observations -------------------------------
  Mat3 intrinsics = Mat3::Identity();
  intrinsics(0, 0) = cfg.focal;
  intrinsics(1, 1) = cfg.focal;
  intrinsics(0, 2) = cfg.image_width / 2.0;
  intrinsics(1, 2) = cfg.image_height / 2.0;

  std::map<std::string, CanonicalCamera> canonical_cameras;
  // Per frame: canonical point id -> (keypoint index, exact pixel).
  struct Track {
    int keypoint_index;
    Vec2 pixel;
  };
  std::map<std::string, std::map<int, Track>> frame_tracks;
  std::vector<std::vector<std::string>> ring_frames(cfg.num_models);

  auto add_frame = [&](int m, const std::string& frame_id, const Vec3& center,
                       const Vec3& target) {
    const CanonicalCamera canonical{center, look_at_rotation(center, target),
                                    target};
    canonical_cameras[frame_id] = canonical;
    const SimilarityTransform3& g = to_model[m];
    const Mat3 model_rotation = canonical.rotation * g.rotation.transpose();
    const Vec3 model_center = apply_transform(g, center);
    const CameraModel cam =
        CameraModel::create(intrinsics, model_rotation,
                            -(model_rotation * model_center), cfg.image_width,
                            cfg.image_height);
    Reconstruction& rec = *scene.videos[video_name(m)].reconstruction;
    rec.frames.emplace(frame_id, cam);
    auto& tracks = frame_tracks[frame_id];
    int next_index = 0;
    for (int k : visible_ids[m]) {
      Projection proj;
      try {
        proj = project(cam, model_points[m][k]);
      } catch (const DepthNonPositive&) {
        continue;
      }
      if (proj.pixel.x() < 0.0 || proj.pixel.x() >= cfg.image_width ||
          proj.pixel.y() < 0.0 || proj.pixel.y() >= cfg.image_height) {
        continue;
      }
      rec.observations.push_back(
          TrackObservation{frame_id, next_index, proj.pixel, k});
      tracks[k] = Track{next_index, proj.pixel};
      ++next_index;
    }
    return cam;
  };

  for (int m = 0; m < cfg.num_models; ++m) {
    VideoData& video = scene.videos[video_name(m)];
    video.reconstruction = Reconstruction{};
    video.reconstruction->id = video_name(m);
    for (int k : visible_ids[m]) {
      video.reconstruction->points.emplace(k, model_points[m][k]);
    }

    Vec3 look_center(0.0, 0.0, 0.0);
    if (!cfg.visibility_windows.empty()) {
      const auto [lo, hi] = cfg.visibility_windows[m];
      look_center.x() = (lo + hi - 1.0) * ex;
    }
    for (int i = 0; i < cfg.cameras_per_model; ++i) {
      const double azimuth =
          2.0 * M_PI * i / cfg.cameras_per_model + rng.uniform(-0.15, 0.15);
      const double elevation = rng.uniform(0.35, 0.75);
      const double distance = cfg.camera_distance * rng.uniform(0.9, 1.1);
      const Vec3 center =
          look_center + distance * Vec3(std::cos(elevation) * std::cos(azimuth),
                                        std::cos(elevation) * std::sin(azimuth),
                                        std::sin(elevation));
      const Vec3 target =
          look_center + Vec3(rng.uniform(-0.1, 0.1) * ex,
                             rng.uniform(-0.1, 0.1) * ex, 0.0);
      const std::string frame_id = frame_name(m, "f", i);
      add_frame(m, frame_id, center, target);
      ring_frames[m].push_back(frame_id);
    }
  }

  // --- planted keypoints, annotations ---------------------------------------
  for (int m = 0; m < cfg.num_models; ++m) {
    const std::string video_id = video_name(m);
    Keypoints3D k_model;
    k_model.names = keypoints.names;
    k_model.coords.resize(3, cfg.num_keypoints);
    for (int j = 0; j < cfg.num_keypoints; ++j) {
      k_model.coords.col(j) =
          apply_transform(to_model[m], keypoints.coords.col(j));
    }
    scene.gt_keypoints[video_id] = k_model;

    auto& annotations = scene.annotations[video_id];
    const Reconstruction& rec = *scene.videos[video_id].reconstruction;
    const int step =
        std::max(1, cfg.cameras_per_model / cfg.annotated_frames_per_video);
    int annotated = 0;
    for (int i = 0; i < cfg.cameras_per_model &&
                    annotated < cfg.annotated_frames_per_video;
         i += step, ++annotated) {
      const std::string& frame_id = ring_frames[m][i];
      const CameraModel& cam = rec.frames.at(frame_id);
      for (int j = 0; j < cfg.num_keypoints; ++j) {
        Projection proj;
        try {
          proj = project(cam, k_model.coords.col(j));
        } catch (const DepthNonPositive&) {
          continue;
        }
        Vec2 pixel = proj.pixel;
        if (cfg.pixel_noise > 0.0) {
          pixel.x() += cfg.pixel_noise * rng.normal();
          pixel.y() += cfg.pixel_noise * rng.normal();
        }
        if (pixel.x() < 0.0 || pixel.x() >= cfg.image_width ||
            pixel.y() < 0.0 || pixel.y() >= cfg.image_height) {
          continue;
        }
        annotations.push_back(
            KeypointAnnotation2D{video_id, frame_id, keypoints.names[j], pixel});
      }
    }
  }

  // --- descriptors ------------------------------------------------------------
  // One identity vector per canonical point, shared across videos. Corruption
  // permutes identities inside a per-video subset, which turns into wrong but
  // mutually-consistent matches downstream.
  Eigen::MatrixXd identity_descriptors(cfg.descriptor_dim, total_points);
  for (int k = 0; k < total_points; ++k) {
    for (int d = 0; d < cfg.descriptor_dim; ++d) {
      identity_descriptors(d, k) = rng.normal();
    }
    identity_descriptors.col(k).normalize();
  }

  std::vector<std::vector<int>> identity_map(cfg.num_models);
  const double per_video_fraction =
      cfg.outlier_fraction > 0.0 ? 1.0 - std::sqrt(1.0 - cfg.outlier_fraction)
                                 : 0.0;
  for (int m = 0; m < cfg.num_models; ++m) {
    auto& map = identity_map[m];
    map.resize(total_points);
    std::iota(map.begin(), map.end(), 0);
    const int corrupted =
        static_cast<int>(std::llround(per_video_fraction * total_points));
    if (corrupted >= 2) {
      std::vector<int> subset(total_points);
      std::iota(subset.begin(), subset.end(), 0);
      for (int i = total_points - 1; i > 0; --i) {
        std::swap(subset[i], subset[rng.uniform_int(i + 1)]);
      }
      subset.resize(corrupted);
      // Cyclic shift of the shuffled subset: a derangement, so every
      // corrupted feature still carries a unique (wrong) identity.
      for (int i = 0; i < corrupted; ++i) {
        map[subset[i]] = subset[(i + 1) % corrupted];
      }
    }
  }

  for (int m = 0; m < cfg.num_models; ++m) {
    VideoData& video = scene.videos[video_name(m)];
    for (const std::string& frame_id : ring_frames[m]) {
      const auto& tracks = frame_tracks.at(frame_id);
      LocalFeatureSet features;
      features.frame_id = frame_id;
      features.positions.resize(2, static_cast<Eigen::Index>(tracks.size()));
      features.descriptors.resize(cfg.descriptor_dim,
                                  static_cast<Eigen::Index>(tracks.size()));
      for (const auto& [point_id, track] : tracks) {
        Vec2 position = track.pixel;
        if (cfg.pixel_noise > 0.0) {
          position.x() += cfg.pixel_noise * rng.normal();
          position.y() += cfg.pixel_noise * rng.normal();
        }
        position.x() = std::clamp(position.x(), 0.0, cfg.image_width - 1e-6);
        position.y() = std::clamp(position.y(), 0.0, cfg.image_height - 1e-6);
        features.positions.col(track.keypoint_index) = position;
        Eigen::VectorXd descriptor =
            identity_descriptors.col(identity_map[m][point_id]);
        for (int d = 0; d < cfg.descriptor_dim; ++d) {
          descriptor(d) += 0.02 * rng.normal();
        }
        features.descriptors.col(track.keypoint_index) = descriptor.normalized();
      }
      video.features.push_back(std::move(features));

      // Global descriptor from the canonical camera pose, so frames showing
      // the same object region rank as similar across videos.
      const CanonicalCamera& canonical = canonical_cameras.at(frame_id);
      GlobalDescriptor gd;
      gd.frame_id = frame_id;
      gd.vector.resize(cfg.global_descriptor_dim);
      const Vec3 dir = canonical.center.normalized();
      const Vec3 axis = canonical.rotation.row(2);
      gd.vector(0) = dir.x();
      gd.vector(1) = dir.y();
      gd.vector(2) = dir.z();
      gd.vector(3) = axis.x();
      gd.vector(4) = axis.y();
      gd.vector(5) = axis.z();
      gd.vector(6) = canonical.look_target.x() / ex;
      gd.vector(7) = canonical.look_target.y() / ex;
      gd.vector(8) = canonical.center.norm() / cfg.camera_distance;
      for (int d = 9; d < cfg.global_descriptor_dim; ++d) {
        gd.vector(d) = 0.01 * rng.normal();
      }
      video.global_descriptors.push_back(std::move(gd));
    }
  }

  // --- per video pair: retrieved frame pairs, flows, raw matches ------------
  const int grid_w = std::max(2, cfg.image_width / cfg.flow_grid_divisor);
  const int grid_h = std::max(2, cfg.image_height / cfg.flow_grid_divisor);
  const Mat3 k_inverse = intrinsics.inverse();

  for (int ma = 0; ma < cfg.num_models; ++ma) {
    for (int mb = ma + 1; mb < cfg.num_models; ++mb) {
      const std::string id_a = video_name(ma);
      const std::string id_b = video_name(mb);
      const auto retrieved = retrieve_frame_pairs(
          scene.videos[id_a].global_descriptors,
          scene.videos[id_b].global_descriptors,
          cfg.retrieved_pairs_per_video_pair);

      std::vector<MatchSet> pair_matches;
      std::vector<int> section_sizes;
      for (const auto& candidate : retrieved) {
        const CanonicalCamera& cam_a = canonical_cameras.at(candidate.frame_a);
        const CanonicalCamera& cam_b = canonical_cameras.at(candidate.frame_b);

        // Dense flow from the canonical mid-plane (z = 0): cast the source
        // ray, intersect the plane, project into the target camera.
        FlowField flow;
        flow.source_frame_id = candidate.frame_a;
        flow.target_frame_id = candidate.frame_b;
        flow.grid_width = grid_w;
        flow.grid_height = grid_h;
        flow.source_width = cfg.image_width;
        flow.source_height = cfg.image_height;
        flow.mapped.assign(static_cast<size_t>(grid_w) * grid_h, Vec2::Zero());
        flow.valid.assign(static_cast<size_t>(grid_w) * grid_h, 0);
        const CameraModel target_canonical = CameraModel::create(
            intrinsics, cam_b.rotation, -(cam_b.rotation * cam_b.center),
            cfg.image_width, cfg.image_height);
        for (int iy = 0; iy < grid_h; ++iy) {
          for (int ix = 0; ix < grid_w; ++ix) {
            const Vec2 source_pixel(
                (ix + 0.5) * cfg.image_width / static_cast<double>(grid_w),
                (iy + 0.5) * cfg.image_height / static_cast<double>(grid_h));
            const Vec3 dir =
                (cam_a.rotation.transpose() *
                 (k_inverse * Vec3(source_pixel.x(), source_pixel.y(), 1.0)))
                    .normalized();
            if (std::abs(dir.z()) < 1e-9) continue;
            const double t = -cam_a.center.z() / dir.z();
            if (t <= 0.0) continue;
            const Vec3 plane_point = cam_a.center + t * dir;
            try {
              const Projection proj = project(target_canonical, plane_point);
              flow.mapped[iy * grid_w + ix] = proj.pixel;
              flow.valid[iy * grid_w + ix] = 1;
            } catch (const DepthNonPositive&) {
            }
          }
        }
        scene.videos[id_a].flows.push_back(std::move(flow));

        // Raw mutual matches between the frame pair: every identity visible
        // in both frames produces one match at the (noisy) feature pixels.
        const auto& tracks_a = frame_tracks.at(candidate.frame_a);
        const auto& tracks_b = frame_tracks.at(candidate.frame_b);
        const LocalFeatureSet* features_a = nullptr;
        const LocalFeatureSet* features_b = nullptr;
        for (const auto& f : scene.videos[id_a].features) {
          if (f.frame_id == candidate.frame_a) features_a = &f;
        }
        for (const auto& f : scene.videos[id_b].features) {
          if (f.frame_id == candidate.frame_b) features_b = &f;
        }

        // Raw matches from the true tracks; corruption is planted explicitly
        // below so the file carries an exact corrupted-row count.
        MatchSet ms;
        ms.frame_a = candidate.frame_a;
        ms.frame_b = candidate.frame_b;
        ms.stage = MatchStage::raw_mutual;
        for (const auto& [point_id, track_a] : tracks_a) {
          const auto it = tracks_b.find(point_id);
          if (it == tracks_b.end()) continue;
          ms.matches.push_back(
              Match{track_a.keypoint_index, it->second.keypoint_index,
                    features_a->positions.col(track_a.keypoint_index),
                    features_b->positions.col(it->second.keypoint_index)});
        }
        section_sizes.push_back(static_cast<int>(ms.matches.size()));
        pair_matches.push_back(std::move(ms));
      }

      // Plant exactly the configured fraction of corrupted rows across the
      // whole file (largest remainder per section). Corruption rotates the
      // (index_b, pixel_b) targets along a cycle of chosen rows, which keeps
      // the one-to-one invariant while displacing every chosen row by at
      // least corruption_min_offset_px.
      int planted = 0;
      if (cfg.outlier_fraction > 0.0) {
        const std::vector<int> per_section =
            distribute_corruption(section_sizes, cfg.outlier_fraction);
        int carry = 0;
        for (size_t s = 0; s < pair_matches.size(); ++s) {
          MatchSet& ms = pair_matches[s];
          const int n = static_cast<int>(ms.matches.size());
          int want = per_section[s] + carry;
          carry = 0;
          if (want < 2 || n < 2) {
            carry = want;
            continue;
          }
          want = std::min(want, n);

          std::vector<int> rows(n);
          std::iota(rows.begin(), rows.end(), 0);
          for (int i = n - 1; i > 0; --i) {
            std::swap(rows[i], rows[rng.uniform_int(i + 1)]);
          }
          auto far_enough = [&](int receiver, int donor) {
            return (ms.matches[donor].pixel_b - ms.matches[receiver].pixel_b)
                       .norm() >= cfg.corruption_min_offset_px;
          };
          std::vector<int> cycle;
          std::vector<char> used(n, 0);
          for (int r : rows) {
            if (static_cast<int>(cycle.size()) == want) break;
            if (cycle.empty() || far_enough(cycle.back(), r)) {
              cycle.push_back(r);
              used[r] = 1;
            }
          }
          // Close the cycle; if the last element cannot feed the first,
          // replace it with a candidate that can.
          while (cycle.size() >= 2 && !far_enough(cycle.back(), cycle.front())) {
            bool repaired = false;
            for (int r : rows) {
              if (used[r]) continue;
              if (far_enough(cycle[cycle.size() - 2], r) &&
                  far_enough(r, cycle.front())) {
                used[cycle.back()] = 0;
                cycle.back() = r;
                used[r] = 1;
                repaired = true;
                break;
              }
            }
            if (!repaired) {
              used[cycle.back()] = 0;
              cycle.pop_back();
            }
          }
          if (static_cast<int>(cycle.size()) < 2) {
            carry = want;
            continue;
          }
          carry = want - static_cast<int>(cycle.size());

          std::vector<std::pair<int, Vec2>> donors;
          donors.reserve(cycle.size());
          for (size_t i = 0; i < cycle.size(); ++i) {
            const Match& donor = ms.matches[cycle[(i + 1) % cycle.size()]];
            donors.push_back({donor.index_b, donor.pixel_b});
          }
          for (size_t i = 0; i < cycle.size(); ++i) {
            ms.matches[cycle[i]].index_b = donors[i].first;
            ms.matches[cycle[i]].pixel_b = donors[i].second;
          }
          planted += static_cast<int>(cycle.size());
        }
      }
      scene.ground_truth.corrupted_match_counts[{id_a, id_b}] = planted;
      scene.raw_matches[{id_a, id_b}] = std::move(pair_matches);
    }
  }

  // --- narration, detections, saliency (grounding supervision) --------------
  if (!cfg.segments_per_model.empty()) {
    for (int m = 0; m < cfg.num_models; ++m) {
      const std::string video_id = video_name(m);
      VideoData& video = scene.videos[video_id];
      for (int s = 0; s < cfg.segments_per_model[m]; ++s) {
        const ObjectCluster& object =
            cfg.clusters[s % static_cast<int>(cfg.clusters.size())];
        const std::string& tpl = cfg.narration_templates[rng.uniform_int(
            static_cast<int>(cfg.narration_templates.size()))];
        std::string text = tpl;
        const size_t slot = text.find("{}");
        if (slot != std::string::npos) text.replace(slot, 2, object.name);

        // A dedicated frame whose camera looks at the narrated object.
        const double azimuth = rng.uniform(0.0, 2.0 * M_PI);
        const double elevation = rng.uniform(0.4, 0.8);
        const double distance = cfg.camera_distance * rng.uniform(0.9, 1.1);
        const Vec3 center =
            object.position +
            distance * Vec3(std::cos(elevation) * std::cos(azimuth),
                            std::cos(elevation) * std::sin(azimuth),
                            std::sin(elevation));
        const Vec3 target = object.position + Vec3(rng.uniform(-0.02, 0.02),
                                                   rng.uniform(-0.02, 0.02),
                                                   0.0);
        const std::string frame_id = frame_name(m, "s", s);
        const CameraModel cam = add_frame(m, frame_id, center, target);
        video.narration.push_back(NarrationSegment{video_id, text, frame_id});

        // Primary hand detection near the object plus low-confidence decoys.
        const Vec3 hand_model = apply_transform(
            to_model[m], object.position + Vec3(rng.uniform(-0.03, 0.03),
                                                rng.uniform(-0.03, 0.03), 0.0));
        Vec2 object_pixel(cfg.image_width / 2.0, cfg.image_height / 2.0);
        try {
          Vec2 p = project(cam, hand_model).pixel;
          if (p.x() >= 0 && p.x() < cfg.image_width && p.y() >= 0 &&
              p.y() < cfg.image_height) {
            object_pixel = p;
          }
        } catch (const DepthNonPositive&) {
        }
        video.detections.push_back(
            Detection2D{frame_id, object_pixel, rng.uniform(0.75, 0.95)});
        for (int d = 0; d < cfg.decoy_detections_per_frame; ++d) {
          video.detections.push_back(Detection2D{
              frame_id,
              Vec2(rng.uniform(0.0, cfg.image_width - 1.0),
                   rng.uniform(0.0, cfg.image_height - 1.0)),
              rng.uniform(0.1, 0.5)});
        }

        SaliencyMap saliency;
        saliency.frame_id = frame_id;
        saliency.rows = cfg.saliency_rows;
        saliency.cols = cfg.saliency_cols;
        saliency.scores.resize(static_cast<size_t>(saliency.rows) *
                               saliency.cols);
        for (double& score : saliency.scores) score = rng.uniform(0.0, 0.3);
        const int cell_c = std::clamp(
            static_cast<int>(object_pixel.x() * saliency.cols / cfg.image_width),
            0, saliency.cols - 1);
        const int cell_r = std::clamp(
            static_cast<int>(object_pixel.y() * saliency.rows / cfg.image_height),
            0, saliency.rows - 1);
        saliency.scores[cell_r * saliency.cols + cell_c] =
            0.8 + rng.uniform(0.0, 0.2);
        video.saliency.push_back(std::move(saliency));
      }
    }

    if (!cfg.query_templates.empty()) {
      for (int m = 0; m < cfg.num_models; ++m) {
        for (const auto& object : cfg.clusters) {
          for (int q = 0; q < cfg.queries_per_object; ++q) {
            const std::string& tpl = cfg.query_templates[rng.uniform_int(
                static_cast<int>(cfg.query_templates.size()))];
            std::string text = tpl;
            const size_t slot = text.find("{}");
            if (slot != std::string::npos) text.replace(slot, 2, object.name);
            scene.queries.push_back(GroundingQuery{
                video_name(m), object.name, text,
                apply_transform(to_model[m], object.position)});
          }
        }
      }
    }
  }

  for (auto& [video_id, video] : scene.videos) {
    if (!cfg.segments_per_model.empty()) video.group = video_id;
    video.reconstruction->validate();
  }
  return scene;
}

// ---------------------------------------------------------------------------
// persistence

void save_ground_truth(const fs::path& path, const GroundTruthBundle& bundle) {
  std::ofstream out(path);
  if (!out) throw MissingFile("cannot write '" + path.string() + "'");
  out << "# reconalign ground-truth v1\n";
  for (const auto& [video_id, transform] : bundle.canonical_to_model) {
    out << "transform " << video_id << ' ';
    Eigen::Quaterniond q(transform.rotation);
    q.normalize();
    if (q.w() < 0.0) q.coeffs() = -q.coeffs();
    out << format_double(transform.scale) << ' ' << format_double(q.w()) << ' '
        << format_double(q.x()) << ' ' << format_double(q.y()) << ' '
        << format_double(q.z()) << ' '
        << format_double(transform.translation.x()) << ' '
        << format_double(transform.translation.y()) << ' '
        << format_double(transform.translation.z()) << "\n";
  }
  for (size_t j = 0; j < bundle.canonical_keypoints.names.size(); ++j) {
    const Vec3 p = bundle.canonical_keypoints.coords.col(static_cast<Eigen::Index>(j));
    out << "keypoint " << bundle.canonical_keypoints.names[j] << ' '
        << format_double(p.x()) << ' ' << format_double(p.y()) << ' '
        << format_double(p.z()) << "\n";
  }
  for (const auto& cluster : bundle.clusters) {
    out << "object " << cluster.name << ' ' << format_double(cluster.position.x())
        << ' ' << format_double(cluster.position.y()) << ' '
        << format_double(cluster.position.z()) << "\n";
  }
  for (const auto& [pair, count] : bundle.corrupted_match_counts) {
    out << "corrupted " << pair.first << ' ' << pair.second << ' ' << count
        << "\n";
  }
  out << "param pixel_noise " << format_double(bundle.pixel_noise) << "\n";
  out << "param point_noise " << format_double(bundle.point_noise) << "\n";
}

GroundTruthBundle load_ground_truth(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open '" + path.string() + "'");
  std::string header;
  if (!std::getline(in, header) || header != "# reconalign ground-truth v1") {
    throw ParseError(path.string() + ": unsupported header");
  }
  GroundTruthBundle bundle;
  std::vector<std::pair<std::string, Vec3>> keypoints;
  std::string line;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    auto next = [&]() {
      std::string token;
      if (!(ls >> token)) throw ParseError(where + ": truncated record");
      return token;
    };
    if (kind == "transform") {
      const std::string video_id = next();
      const double scale = parse_double(next(), where);
      const double qw = parse_double(next(), where);
      const double qx = parse_double(next(), where);
      const double qy = parse_double(next(), where);
      const double qz = parse_double(next(), where);
      Eigen::Quaterniond q(qw, qx, qy, qz);
      q.normalize();
      const Vec3 t(parse_double(next(), where), parse_double(next(), where),
                   parse_double(next(), where));
      bundle.canonical_to_model[video_id] =
          SimilarityTransform3::from_parts(scale, q.toRotationMatrix(), t);
    } else if (kind == "keypoint" || kind == "object") {
      const std::string name = next();
      const Vec3 p(parse_double(next(), where), parse_double(next(), where),
                   parse_double(next(), where));
      if (kind == "keypoint") {
        keypoints.push_back({name, p});
      } else {
        bundle.clusters.push_back(ObjectCluster{name, p});
      }
    } else if (kind == "corrupted") {
      const std::string a = next();
      const std::string b = next();
      bundle.corrupted_match_counts[{a, b}] =
          static_cast<int>(parse_double(next(), where));
    } else if (kind == "param") {
      const std::string name = next();
      const double value = parse_double(next(), where);
      if (name == "pixel_noise") bundle.pixel_noise = value;
      if (name == "point_noise") bundle.point_noise = value;
    } else {
      throw ParseError(where + ": unknown record '" + kind + "'");
    }
  }
  bundle.canonical_keypoints.coords.resize(3, static_cast<Eigen::Index>(keypoints.size()));
  for (size_t j = 0; j < keypoints.size(); ++j) {
    bundle.canonical_keypoints.names.push_back(keypoints[j].first);
    bundle.canonical_keypoints.coords.col(static_cast<Eigen::Index>(j)) =
        keypoints[j].second;
  }
  return bundle;
}

void save_synthetic_scene(const fs::path& directory, const SyntheticScene& scene) {
  fs::create_directories(directory / "videos");
  fs::create_directories(directory / "matches_raw");
  fs::create_directories(directory / "annotations");
  fs::create_directories(directory / "gt");

  Manifest manifest;
  for (const auto& [video_id, video] : scene.videos) {
    ManifestEntry entry;
    entry.video_id = video_id;
    entry.group = video.group;
    const std::string base = "videos/" + video_id;
    entry.reconstruction = base + ".rec";
    save_reconstruction(directory / *entry.reconstruction, *video.reconstruction);
    if (!video.features.empty()) {
      entry.features = base + ".lfd";
      save_features(directory / *entry.features, video.features);
    }
    if (!video.global_descriptors.empty()) {
      entry.global_descriptors = base + ".gdv";
      save_global_descriptors(directory / *entry.global_descriptors,
                              video.global_descriptors);
    }
    if (!video.flows.empty()) {
      entry.flows = base + ".flo2";
      save_flows(directory / *entry.flows, video.flows);
    }
    if (!video.narration.empty()) {
      entry.narration = base + ".nar";
      save_narration(directory / *entry.narration, video.narration);
    }
    if (!video.detections.empty()) {
      entry.detections = base + ".det";
      save_detections(directory / *entry.detections, video.detections);
    }
    if (!video.saliency.empty()) {
      entry.saliency = base + ".sal";
      save_saliency(directory / *entry.saliency, video.saliency);
    }
    manifest.entries.push_back(std::move(entry));
  }
  save_manifest(directory / "manifest.txt", manifest);

  for (const auto& [pair, match_sets] : scene.raw_matches) {
    save_matches(directory / "matches_raw" / (pair.first + "__" + pair.second + ".m2d"),
                 match_sets);
  }
  for (const auto& [video_id, annotations] : scene.annotations) {
    if (!annotations.empty()) {
      save_annotations(directory / "annotations" / (video_id + ".kp2"),
                       annotations);
    }
  }
  if (!scene.gt_keypoints.empty()) {
    save_keypoints3d(directory / "gt" / "keypoints.kp3", scene.gt_keypoints);
  }
  if (!scene.queries.empty()) {
    save_queries(directory / "gt" / "queries.qry", scene.queries);
  }
  save_ground_truth(directory / "gt" / "bundle.gtb", scene.ground_truth);
}

}  // namespace reconalign
