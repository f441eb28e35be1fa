#include "reconalign/grounding.hpp"

#include <numeric>
#include <set>

#include "doctest.h"
#include "test_support.hpp"

using namespace reconalign;
using reconalign::testing::random_camera;
using reconalign::testing::random_point;

TEST_CASE("build_voxel_grid: single voxel and histogram oracle") {
  const std::vector<Vec3> cloud = {Vec3(0, 0, 0), Vec3(1, 1, 1)};
  const VoxelGrid single = build_voxel_grid(cloud, 1, cloud, 4);
  CHECK(single.num_active() == 1);
  CHECK(single.label_of.at(0) == 0);

  Rng rng(501);
  std::vector<Vec3> registered, training;
  for (int i = 0; i < 500; ++i) registered.push_back(random_point(rng));
  for (int i = 0; i < 3000; ++i) training.push_back(random_point(rng));
  const int divisions = 20;
  const int n_v = 150;
  const VoxelGrid grid = build_voxel_grid(registered, divisions, training, n_v);
  CHECK(grid.num_active() == n_v);
  const int64_t total = static_cast<int64_t>(divisions) * divisions * divisions;
  CHECK(total == 8000);

  // Histogram oracle: recount every voxel, then re-derive the active set.
  std::vector<int64_t> counts(total, 0);
  for (const Vec3& p : training) {
    const auto flat = grid.flat_index_of(p);
    if (flat) ++counts[*flat];
  }
  std::vector<int64_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (counts[a] != counts[b]) return counts[a] > counts[b];
    return a < b;
  });
  std::set<int64_t> expected(order.begin(), order.begin() + n_v);
  std::set<int64_t> actual(grid.active.begin(), grid.active.end());
  CHECK(actual == expected);

  CHECK_THROWS_AS(build_voxel_grid({}, 10, training, 5), EmptyPointCloud);
  CHECK_THROWS_AS(build_voxel_grid(registered, 0, training, 5), InvalidArgument);
}

TEST_CASE("voxel binning is half-open with a closed top boundary") {
  const std::vector<Vec3> corners = {Vec3(0, 0, 0), Vec3(1, 1, 1)};
  const VoxelGrid grid = build_voxel_grid(corners, 4, corners, 64);
  CHECK(*grid.flat_index_of(Vec3(0, 0, 0)) == 0);
  // The far corner belongs to the last voxel, not outside.
  const int64_t last = 4 * 4 * 4 - 1;
  CHECK(*grid.flat_index_of(Vec3(1, 1, 1)) == last);
  CHECK(!grid.flat_index_of(Vec3(1.00001, 0.5, 0.5)).has_value());
  // An interior boundary belongs to the upper cell.
  CHECK(*grid.flat_index_of(Vec3(0.25, 0, 0)) == 1);

  // A flat cloud still produces a valid (inflated) box.
  const std::vector<Vec3> plane = {Vec3(0, 0, 0.5), Vec3(1, 1, 0.5)};
  const VoxelGrid flat = build_voxel_grid(plane, 4, plane, 4);
  CHECK(flat.bbox_min.z() < flat.bbox_max.z());
  CHECK(flat.flat_index_of(Vec3(0.5, 0.5, 0.5)).has_value());
}

TEST_CASE("select_anchor strategies") {
  Mat3 k = Mat3::Identity();
  k(0, 0) = 500;
  k(1, 1) = 500;
  k(0, 2) = 320;
  k(1, 2) = 240;
  const CameraModel cam =
      CameraModel::create(k, Mat3::Identity(), Vec3(0, 0, 3), 640, 480);
  const NarrationSegment segment{"vid", "remove the filter", "f0"};

  const auto center = select_anchor(segment, AnchorStrategy::center_of_frame,
                                    cam, nullptr, nullptr);
  REQUIRE(center.has_value());
  CHECK((*center - Vec2(320, 240)).norm() == 0.0);

  std::vector<Detection2D> detections = {
      {"f0", Vec2(100, 100), 0.9},
      {"f0", Vec2(500, 400), 0.4},
      {"other", Vec2(1, 1), 0.99},
  };
  const auto hand = select_anchor(segment, AnchorStrategy::hand_detector, cam,
                                  &detections, nullptr);
  REQUIRE(hand.has_value());
  CHECK((*hand - Vec2(100, 100)).norm() == 0.0);
  CHECK_THROWS_AS(select_anchor(segment, AnchorStrategy::hand_detector, cam,
                                nullptr, nullptr),
                  MissingStrategyInput);
  std::vector<Detection2D> none = {{"other", Vec2(1, 1), 0.9}};
  CHECK(!select_anchor(segment, AnchorStrategy::hand_detector, cam, &none,
                       nullptr)
             .has_value());

  // Saliency argmax: a 14x8-style map, scaled to pixel coordinates by hand.
  SaliencyMap map;
  map.frame_id = "f0";
  map.rows = 8;
  map.cols = 14;
  map.scores.assign(14 * 8, 0.1);
  const int max_r = 5, max_c = 9;
  map.scores[max_r * 14 + max_c] = 0.95;
  const auto saliency = select_anchor(segment, AnchorStrategy::saliency_argmax,
                                      cam, nullptr, &map);
  REQUIRE(saliency.has_value());
  const Vec2 expected((max_c + 0.5) * 640.0 / 14.0, (max_r + 0.5) * 480.0 / 8.0);
  CHECK((*saliency - expected).norm() < 1e-12);
  CHECK_THROWS_AS(select_anchor(segment, AnchorStrategy::saliency_argmax, cam,
                                nullptr, nullptr),
                  MissingStrategyInput);
}

TEST_CASE("backproject_to_surface: visibility and the exhaustive oracle") {
  Mat3 k = Mat3::Identity();
  k(0, 0) = 500;
  k(1, 1) = 500;
  k(0, 2) = 320;
  k(1, 2) = 240;
  const CameraModel cam =
      CameraModel::create(k, Mat3::Identity(), Vec3::Zero(), 640, 480);

  // Single point projecting exactly at the pixel.
  const Vec3 p(0.0, 0.0, 2.0);
  const auto hit = backproject_to_surface(Vec2(320, 240), cam, {p}, 5.0);
  REQUIRE(hit.has_value());
  CHECK((*hit - p).norm() == 0.0);

  // Two points on the same ray: the nearer one wins.
  const auto nearer = backproject_to_surface(
      Vec2(320, 240), cam, {Vec3(0, 0, 5), Vec3(0, 0, 1)}, 5.0);
  REQUIRE(nearer.has_value());
  CHECK(nearer->z() == 1.0);

  CHECK(!backproject_to_surface(Vec2(10, 10), cam, {p}, 5.0).has_value());
  CHECK_THROWS_AS(backproject_to_surface(Vec2(-5, 10), cam, {p}, 5.0),
                  PixelOutOfBounds);

  // Dense random cloud versus an exhaustive independent recount.
  Rng rng(502);
  std::vector<Vec3> cloud;
  for (int i = 0; i < 4000; ++i) {
    cloud.push_back(Vec3(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0),
                         rng.uniform(1.5, 3.5)));
  }
  const Vec2 query(300.0, 250.0);
  const double radius = 5.0;
  const auto got = backproject_to_surface(query, cam, cloud, radius);
  REQUIRE(got.has_value());
  const Vec3* expected = nullptr;
  for (const auto& c : cloud) {
    const Vec3 pc = cam.rotation * c + cam.translation;
    if (pc.z() <= 1e-9) continue;
    const Vec2 pix(k(0, 0) * pc.x() / pc.z() + k(0, 2),
                   k(1, 1) * pc.y() / pc.z() + k(1, 2));
    if ((pix - query).norm() > radius) continue;
    if (!expected) {
      expected = &c;
    } else {
      const Vec3 pe = cam.rotation * *expected + cam.translation;
      if (pc.z() < pe.z()) expected = &c;
    }
  }
  REQUIRE(expected != nullptr);
  CHECK((*got - *expected).norm() == 0.0);
}

TEST_CASE("hash_tokens: lowercase, split on non-alphanumerics") {
  const auto a = hash_tokens("Remove the Air-Filter!", 4096);
  const auto b = hash_tokens("remove   THE air filter", 4096);
  CHECK(a == b);
  CHECK(a.size() == 4);
  CHECK(hash_tokens("", 4096).empty());
  CHECK(hash_tokens("...", 4096).empty());
  for (int t : a) {
    CHECK(t >= 0);
    CHECK(t < 4096);
  }
}

namespace {

// Two voxels, two disjoint token sets: linearly separable by construction.
std::map<std::string, std::vector<TrainingPair>> separable_pairs() {
  std::map<std::string, std::vector<TrainingPair>> pairs;
  const std::vector<std::string> words_a = {"alpha", "apple", "anchor"};
  const std::vector<std::string> words_b = {"beta", "bottle", "bridge"};
  for (int i = 0; i < 20; ++i) {
    TrainingPair pa;
    pa.text = "take the " + words_a[i % 3];
    pa.voxel_label = 0;
    pa.world_point = Vec3(0.25, 0.5, 0.5);
    pairs["m"].push_back(pa);
    TrainingPair pb;
    pb.text = "take the " + words_b[i % 3];
    pb.voxel_label = 1;
    pb.world_point = Vec3(0.75, 0.5, 0.5);
    pairs["m"].push_back(pb);
  }
  return pairs;
}

std::map<std::string, VoxelGrid> two_voxel_grid() {
  const std::vector<Vec3> cloud = {Vec3(0, 0, 0), Vec3(1, 1, 1)};
  std::vector<Vec3> training = {Vec3(0.25, 0.5, 0.5), Vec3(0.75, 0.5, 0.5)};
  std::map<std::string, VoxelGrid> grids;
  grids["m"] = build_voxel_grid(cloud, 2, training, 2);
  return grids;
}

}  // namespace

TEST_CASE("train_grounding: separable task reaches 0.99 accuracy") {
  TrainConfig cfg;
  cfg.embedding_dim = 16;
  cfg.vocab_buckets = 512;
  cfg.epochs = 200;
  cfg.batch_size = 8;
  cfg.seed = 3;
  const auto pairs = separable_pairs();
  const auto grids = two_voxel_grid();
  const TrainOutcome outcome = train_grounding(pairs, grids, cfg);

  // Initial loss with zeroed heads is ln(N_v) per sample.
  CHECK(outcome.epoch_losses.front() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-9));

  int correct = 0, total = 0;
  for (const auto& pair : pairs.at("m")) {
    const QueryResult qr =
        ground_query(outcome.model, "m", pair.text, grids.at("m"));
    correct += qr.predicted_label == pair.voxel_label;
    ++total;
    // Softmax scores are a probability distribution.
    CHECK(qr.scores.minCoeff() >= 0.0);
    CHECK(qr.scores.sum() == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(static_cast<double>(correct) / total >= 0.99);

  // Loss decreased and never spiked upward.
  CHECK(outcome.epoch_losses.back() < 0.1);
  for (size_t e = 1; e < outcome.epoch_losses.size(); ++e) {
    CHECK(outcome.epoch_losses[e] <=
          outcome.epoch_losses[e - 1] + 0.05 * outcome.epoch_losses[e - 1] + 1e-9);
  }
}

TEST_CASE("train_grounding is invariant to input ordering") {
  TrainConfig cfg;
  cfg.embedding_dim = 12;
  cfg.vocab_buckets = 256;
  cfg.epochs = 15;
  cfg.batch_size = 8;
  cfg.seed = 17;
  auto pairs = separable_pairs();
  const auto grids = two_voxel_grid();
  const TrainOutcome a = train_grounding(pairs, grids, cfg);

  auto& list = pairs.at("m");
  std::reverse(list.begin(), list.end());
  std::swap(list[3], list[11]);
  const TrainOutcome b = train_grounding(pairs, grids, cfg);

  CHECK((a.model.embeddings - b.model.embeddings).norm() == 0.0);
  CHECK((a.model.heads.at("m").weight - b.model.heads.at("m").weight).norm() ==
        0.0);
  CHECK((a.model.heads.at("m").bias - b.model.heads.at("m").bias).norm() == 0.0);
}

TEST_CASE("train_grounding input validation") {
  const auto grids = two_voxel_grid();
  TrainConfig cfg;
  cfg.embedding_dim = 8;
  cfg.vocab_buckets = 64;
  CHECK_THROWS_AS(train_grounding({}, grids, cfg), EmptyTrainingSet);

  std::map<std::string, std::vector<TrainingPair>> empty_model;
  empty_model["m"] = {};
  CHECK_THROWS_AS(train_grounding(empty_model, grids, cfg), EmptyTrainingSet);

  std::map<std::string, std::vector<TrainingPair>> bad_label;
  TrainingPair p;
  p.text = "word";
  p.voxel_label = 2;  // grid has two voxels: labels 0 and 1
  bad_label["m"] = {p};
  CHECK_THROWS_AS(train_grounding(bad_label, grids, cfg), LabelOutOfRange);

  std::map<std::string, std::vector<TrainingPair>> unknown_grid;
  p.voxel_label = 0;
  unknown_grid["other"] = {p};
  CHECK_THROWS_AS(train_grounding(unknown_grid, grids, cfg), UnknownModelId);
}

TEST_CASE("grounding loss gradients match central finite differences") {
  Rng rng(503);
  const int d = 8, n_v = 5, vocab = 32;
  GroundingModel model;
  model.embedding_dim = d;
  model.vocab_buckets = vocab;
  model.embeddings.resize(vocab, d);
  for (int r = 0; r < vocab; ++r) {
    for (int c = 0; c < d; ++c) model.embeddings(r, c) = 0.3 * rng.normal();
  }
  GroundingModel::Head head;
  head.weight.resize(d, n_v);
  head.bias.resize(n_v);
  for (int r = 0; r < d; ++r) {
    for (int c = 0; c < n_v; ++c) head.weight(r, c) = 0.3 * rng.normal();
  }
  for (int c = 0; c < n_v; ++c) head.bias(c) = 0.1 * rng.normal();
  model.heads["m"] = head;

  std::vector<TrainingPair> pairs;
  const std::vector<std::string> texts = {"alpha beta", "gamma", "delta alpha",
                                          "epsilon zeta eta"};
  for (int i = 0; i < 4; ++i) {
    TrainingPair p;
    p.text = texts[i];
    p.voxel_label = i % n_v;
    pairs.push_back(p);
  }
  std::vector<TrainingSample> samples;
  for (const auto& p : pairs) samples.push_back({"m", &p});

  GroundingGradients grads;
  grounding_loss(model, samples, &grads);

  const double step = 1e-5;
  auto check_grad = [&](double* param, double analytic) {
    const double saved = *param;
    *param = saved + step;
    const double up = grounding_loss(model, samples);
    *param = saved - step;
    const double down = grounding_loss(model, samples);
    *param = saved;
    const double numeric = (up - down) / (2.0 * step);
    CHECK(std::abs(analytic - numeric) <=
          1e-4 * std::max({1.0, std::abs(analytic), std::abs(numeric)}));
  };

  auto& m_head = model.heads.at("m");
  for (int r = 0; r < d; ++r) {
    for (int c = 0; c < n_v; ++c) {
      check_grad(&m_head.weight(r, c), grads.d_heads.at("m").weight(r, c));
    }
  }
  for (int c = 0; c < n_v; ++c) {
    check_grad(&m_head.bias(c), grads.d_heads.at("m").bias(c));
  }
  // Embedding rows actually touched by the texts.
  std::set<int> touched;
  for (const auto& p : pairs) {
    for (int t : hash_tokens(p.text, vocab)) touched.insert(t);
  }
  CHECK(!touched.empty());
  for (int t : touched) {
    for (int c = 0; c < d; ++c) {
      check_grad(&model.embeddings(t, c), grads.d_embeddings(t, c));
    }
  }
}

TEST_CASE("ground_query on an untrained model is uniform, argmax label 0") {
  GroundingModel model;
  model.embedding_dim = 4;
  model.vocab_buckets = 16;
  model.embeddings = Eigen::MatrixXd::Zero(16, 4);
  model.heads["m"] = GroundingModel::Head{Eigen::MatrixXd::Zero(4, 3),
                                          Eigen::VectorXd::Zero(3)};
  const std::vector<Vec3> cloud = {Vec3(0, 0, 0), Vec3(1, 1, 1)};
  const VoxelGrid grid = build_voxel_grid(cloud, 3, cloud, 3);

  const QueryResult qr = ground_query(model, "m", "anything", grid);
  CHECK(qr.predicted_label == 0);
  for (int i = 0; i < qr.scores.size(); ++i) {
    CHECK(qr.scores(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  CHECK((qr.predicted_point - grid.center_of_label(0)).norm() == 0.0);

  CHECK_THROWS_AS(ground_query(model, "nope", "anything", grid), UnknownModelId);
}

TEST_CASE("chance_baseline: determinism and uniformity") {
  const std::vector<Vec3> cloud = {Vec3(0, 0, 0), Vec3(1, 1, 1)};
  std::vector<Vec3> training;
  Rng cloud_rng(504);
  for (int i = 0; i < 2000; ++i) {
    training.push_back(Vec3(cloud_rng.uniform(0, 1), cloud_rng.uniform(0, 1),
                            cloud_rng.uniform(0, 1)));
  }
  const VoxelGrid grid = build_voxel_grid(cloud, 4, training, 30);

  // Single active voxel: always its center.
  const VoxelGrid single = build_voxel_grid(cloud, 1, training, 1);
  Rng r1(1);
  CHECK((chance_baseline(single, r1) - single.voxel_center(0)).norm() == 0.0);

  // Same seed, same sequence.
  Rng a(42), b(42);
  for (int i = 0; i < 50; ++i) {
    CHECK((chance_baseline(grid, a) - chance_baseline(grid, b)).norm() == 0.0);
  }

  // Chi-square uniformity over the active voxels.
  std::map<int64_t, int> hits;
  Rng c(7);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const Vec3 p = chance_baseline(grid, c);
    bool found = false;
    for (int64_t flat : grid.active) {
      if ((grid.voxel_center(flat) - p).norm() < 1e-12) {
        ++hits[flat];
        found = true;
        break;
      }
    }
    CHECK(found);
  }
  const double expected = static_cast<double>(draws) / grid.num_active();
  double chi2 = 0.0;
  for (int64_t flat : grid.active) {
    const double diff = hits[flat] - expected;
    chi2 += diff * diff / expected;
  }
  // 99.9th percentile of chi2 with 29 dof is ~58; allow ample headroom.
  CHECK(chi2 < 70.0);
}

TEST_CASE("generate_training_pairs: labels, drops and voxel containment") {
  Mat3 k = Mat3::Identity();
  k(0, 0) = 500;
  k(1, 1) = 500;
  k(0, 2) = 320;
  k(1, 2) = 240;

  Reconstruction rec;
  rec.id = "vid";
  rec.frames.emplace("f0", CameraModel::create(k, Mat3::Identity(),
                                               Vec3(0, 0, 3), 640, 480));
  // A small blob on the optical axis in front of the camera.
  Rng rng(505);
  for (int i = 0; i < 50; ++i) {
    rec.points.emplace(i, Vec3(0.02 * rng.normal(), 0.02 * rng.normal(),
                               0.02 * rng.normal()));
  }

  std::map<std::string, Reconstruction> recs;
  recs.emplace("vid", rec);
  std::map<std::string, SimilarityTransform3> registration;
  registration.emplace("vid", SimilarityTransform3::identity());

  std::vector<Vec3> cloud;
  for (const auto& [id, p] : rec.points) cloud.push_back(p);
  const VoxelGrid grid = build_voxel_grid(cloud, 4, cloud, 30);

  SegmentContext ctx;
  ctx.reconstructions = &recs;
  ctx.to_reference = &registration;

  std::vector<NarrationSegment> segments = {
      {"vid", "tighten the bolt", "f0"},
      {"vid", "remove the cap", "f0"},
      {"ghost", "no such video", "f0"},
      {"vid", "no such frame", "f9"},
  };
  const TrainingPairReport report = generate_training_pairs(
      segments, AnchorStrategy::center_of_frame, grid, ctx);
  CHECK(report.pairs.size() == 2);
  CHECK(report.dropped.at("unknown_video") == 1);
  CHECK(report.dropped.at("unknown_frame") == 1);
  for (const auto& pair : report.pairs) {
    // Emitted world points sit inside their labeled voxel.
    const auto label = grid.label_at(pair.world_point);
    REQUIRE(label.has_value());
    CHECK(*label == pair.voxel_label);
  }
}

TEST_CASE("evaluate_grounding_pck: exact prediction and chance determinism") {
  GroundingModel model;
  model.embedding_dim = 4;
  model.vocab_buckets = 16;
  model.embeddings = Eigen::MatrixXd::Zero(16, 4);
  model.heads["m"] = GroundingModel::Head{Eigen::MatrixXd::Zero(4, 3),
                                          Eigen::VectorXd::Zero(3)};
  const std::vector<Vec3> cloud = {Vec3(0, 0, 0), Vec3(1, 1, 1)};
  std::map<std::string, VoxelGrid> grids;
  grids["m"] = build_voxel_grid(cloud, 3, cloud, 3);

  // Untrained model predicts label 0's center; make that the ground truth.
  std::vector<GroundingQuery> queries = {
      {"m", "cls", "whatever", grids.at("m").center_of_label(0)}};
  const std::vector<double> thresholds = {1.0, 10.0};
  std::map<std::string, double> scales{{"m", 100.0}};

  const GroundingEval eval =
      evaluate_grounding_pck(queries, model, grids, thresholds, scales, 5);
  CHECK(eval.method.values[0] == 1.0);
  CHECK(eval.method.values[1] == 1.0);
  CHECK(eval.per_class.count("cls") == 1);

  const GroundingEval again =
      evaluate_grounding_pck(queries, model, grids, thresholds, scales, 5);
  CHECK(again.chance.values == eval.chance.values);

  CHECK_THROWS_AS(evaluate_grounding_pck({{"zz", "", "t", Vec3::Zero()}}, model,
                                         grids, thresholds, scales, 5),
                  UnknownModelId);
}
