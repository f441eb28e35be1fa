#include "reconalign/matching.hpp"

#include <set>

#include "doctest.h"
#include "test_support.hpp"

using namespace reconalign;

namespace {

LocalFeatureSet make_features(const std::string& frame_id,
                              const Eigen::MatrixXd& descriptors) {
  LocalFeatureSet f;
  f.frame_id = frame_id;
  f.descriptors = descriptors;
  f.positions.resize(2, descriptors.cols());
  for (Eigen::Index c = 0; c < descriptors.cols(); ++c) {
    f.positions.col(c) = Vec2(10.0 * static_cast<double>(c), 5.0);
  }
  return f;
}

// Identity flow over a w x h frame: every grid cell maps its own center.
FlowField identity_flow(const std::string& src, const std::string& tgt, int w,
                        int h, int grid_w, int grid_h) {
  FlowField flow;
  flow.source_frame_id = src;
  flow.target_frame_id = tgt;
  flow.grid_width = grid_w;
  flow.grid_height = grid_h;
  flow.source_width = w;
  flow.source_height = h;
  flow.mapped.resize(static_cast<size_t>(grid_w) * grid_h);
  flow.valid.assign(flow.mapped.size(), 1);
  for (int iy = 0; iy < grid_h; ++iy) {
    for (int ix = 0; ix < grid_w; ++ix) {
      flow.mapped[iy * grid_w + ix] =
          Vec2((ix + 0.5) * w / static_cast<double>(grid_w),
               (iy + 0.5) * h / static_cast<double>(grid_h));
    }
  }
  return flow;
}

}  // namespace

TEST_CASE("mutual_nn_match: a set matches itself") {
  Rng rng(201);
  Eigen::MatrixXd d(8, 20);
  for (Eigen::Index c = 0; c < d.cols(); ++c) {
    for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, c) = rng.normal();
  }
  const LocalFeatureSet f = make_features("f", d);
  const MatchSet ms = mutual_nn_match(f, f);
  CHECK(ms.stage == MatchStage::raw_mutual);
  REQUIRE(ms.matches.size() == 20);
  for (const auto& m : ms.matches) CHECK(m.index_a == m.index_b);
}

TEST_CASE("mutual_nn_match equals the exhaustive O(N^2) oracle") {
  Rng rng(202);
  for (int trial = 0; trial < 10; ++trial) {
    const int na = 5 + rng.uniform_int(30);
    const int nb = 5 + rng.uniform_int(30);
    Eigen::MatrixXd da(6, na), db(6, nb);
    for (Eigen::Index c = 0; c < da.cols(); ++c) {
      for (Eigen::Index r = 0; r < da.rows(); ++r) da(r, c) = rng.normal();
    }
    for (Eigen::Index c = 0; c < db.cols(); ++c) {
      for (Eigen::Index r = 0; r < db.rows(); ++r) db(r, c) = rng.normal();
    }
    const LocalFeatureSet fa = make_features("a", da);
    const LocalFeatureSet fb = make_features("b", db);
    const MatchSet ms = mutual_nn_match(fa, fb);

    // Oracle: brute-force Euclidean distances on normalized columns.
    Eigen::MatrixXd na_n = da, nb_n = db;
    for (Eigen::Index c = 0; c < na_n.cols(); ++c) na_n.col(c).normalize();
    for (Eigen::Index c = 0; c < nb_n.cols(); ++c) nb_n.col(c).normalize();
    std::set<std::pair<int, int>> expected;
    for (int i = 0; i < na; ++i) {
      int best_j = 0;
      for (int j = 1; j < nb; ++j) {
        if ((na_n.col(i) - nb_n.col(j)).norm() <
            (na_n.col(i) - nb_n.col(best_j)).norm()) {
          best_j = j;
        }
      }
      int best_i = 0;
      for (int i2 = 1; i2 < na; ++i2) {
        if ((na_n.col(i2) - nb_n.col(best_j)).norm() <
            (na_n.col(best_i) - nb_n.col(best_j)).norm()) {
          best_i = i2;
        }
      }
      if (best_i == i) expected.insert({i, best_j});
    }
    std::set<std::pair<int, int>> actual;
    for (const auto& m : ms.matches) actual.insert({m.index_a, m.index_b});
    CHECK(actual == expected);
  }
}

TEST_CASE("mutual_nn_match: single shared column across orthogonal sets") {
  Eigen::MatrixXd da = Eigen::MatrixXd::Zero(6, 2);
  da(0, 0) = 1.0;  // e0
  da(1, 1) = 1.0;  // e1
  Eigen::MatrixXd db = Eigen::MatrixXd::Zero(6, 2);
  db(2, 0) = 1.0;  // e2
  db(1, 1) = 1.0;  // e1 shared
  const MatchSet ms = mutual_nn_match(make_features("a", da), make_features("b", db));
  // e1<->e1 is the only pair that is mutually nearest with a strict margin;
  // the remaining orthogonal columns tie at distance sqrt(2) and resolve by
  // lowest index, producing at most the (0, 0) pair as well.
  bool found_shared = false;
  for (const auto& m : ms.matches) {
    if (m.index_a == 1) {
      CHECK(m.index_b == 1);
      found_shared = true;
    }
  }
  CHECK(found_shared);
}

TEST_CASE("mutual_nn_match output is one-to-one; errors on empty sets") {
  Rng rng(203);
  Eigen::MatrixXd d(4, 40);
  for (Eigen::Index c = 0; c < d.cols(); ++c) {
    for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, c) = rng.normal();
  }
  Eigen::MatrixXd d2(4, 25);
  for (Eigen::Index c = 0; c < d2.cols(); ++c) {
    for (Eigen::Index r = 0; r < d2.rows(); ++r) d2(r, c) = rng.normal();
  }
  const MatchSet ms =
      mutual_nn_match(make_features("a", d), make_features("b", d2));
  std::set<int> seen_a, seen_b;
  for (const auto& m : ms.matches) {
    CHECK(seen_a.insert(m.index_a).second);
    CHECK(seen_b.insert(m.index_b).second);
  }

  const LocalFeatureSet empty = make_features("e", Eigen::MatrixXd(4, 0));
  CHECK_THROWS_AS(mutual_nn_match(empty, make_features("b", d2)), EmptyFeatureSet);
  CHECK_THROWS_AS(mutual_nn_match(make_features("a", d), empty), EmptyFeatureSet);
}

TEST_CASE("retrieve_frame_pairs basics") {
  GlobalDescriptor a{"a0", Eigen::Vector3d(1, 0, 0)};
  GlobalDescriptor b{"b0", Eigen::Vector3d(2, 0, 0)};  // same direction
  const auto single = retrieve_frame_pairs({a}, {b}, 4);
  REQUIRE(single.size() == 1);
  CHECK(single[0].similarity == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(retrieve_frame_pairs({}, {b}, 1), EmptyDescriptorList);
  CHECK_THROWS_AS(retrieve_frame_pairs({a}, {b}, 0), InvalidArgument);
}

TEST_CASE("retrieve_frame_pairs matches the full cross-product oracle") {
  Rng rng(204);
  std::vector<GlobalDescriptor> va, vb;
  for (int i = 0; i < 7; ++i) {
    Eigen::VectorXd v(5);
    for (int d = 0; d < 5; ++d) v(d) = rng.normal();
    va.push_back({"a" + std::to_string(i), v});
  }
  for (int j = 0; j < 6; ++j) {
    Eigen::VectorXd v(5);
    for (int d = 0; d < 5; ++d) v(d) = rng.normal();
    vb.push_back({"b" + std::to_string(j), v});
  }

  const int n_m = 9;
  const auto got = retrieve_frame_pairs(va, vb, n_m);
  REQUIRE(static_cast<int>(got.size()) == n_m);

  std::vector<double> oracle;
  for (const auto& da : va) {
    for (const auto& db : vb) {
      oracle.push_back(da.vector.dot(db.vector) /
                       (da.vector.norm() * db.vector.norm()));
    }
  }
  std::sort(oracle.rbegin(), oracle.rend());
  for (int k = 0; k < n_m; ++k) {
    CHECK(got[k].similarity == doctest::Approx(oracle[k]).epsilon(1e-12));
  }
  // Non-increasing similarity sequence.
  for (size_t k = 1; k < got.size(); ++k) {
    CHECK(got[k].similarity <= got[k - 1].similarity);
  }

  // Requesting more than |A|*|B| returns all pairs.
  const auto all = retrieve_frame_pairs(va, vb, 10000);
  CHECK(all.size() == va.size() * vb.size());
}

TEST_CASE("flow_filter: identity flow keeps consistent matches") {
  MatchSet ms;
  ms.frame_a = "a";
  ms.frame_b = "b";
  ms.stage = MatchStage::raw_mutual;
  Rng rng(205);
  for (int i = 0; i < 40; ++i) {
    const Vec2 p(rng.uniform(5.0, 635.0), rng.uniform(5.0, 475.0));
    ms.matches.push_back(Match{i, i, p, p});
  }
  const FlowField flow = identity_flow("a", "b", 640, 480, 160, 120);
  const MatchSet kept = flow_filter(ms, flow, 3.0);
  CHECK(kept.stage == MatchStage::flow_filtered);
  CHECK(kept.matches.size() == ms.matches.size());

  // One match displaced by twice the tolerance disappears.
  MatchSet displaced = ms;
  displaced.matches[7].pixel_b += Vec2(6.0, 0.0);
  const MatchSet filtered = flow_filter(displaced, flow, 3.0);
  CHECK(filtered.matches.size() == ms.matches.size() - 1);
  for (const auto& m : filtered.matches) CHECK(m.index_a != 7);
}

TEST_CASE("flow_filter: stage and frame mismatches, invalid cells") {
  const FlowField flow = identity_flow("a", "b", 100, 100, 25, 25);
  MatchSet ms;
  ms.frame_a = "a";
  ms.frame_b = "b";
  ms.stage = MatchStage::flow_filtered;
  CHECK_THROWS_AS(flow_filter(ms, flow, 2.0), StageMismatch);

  ms.stage = MatchStage::raw_mutual;
  MatchSet wrong = ms;
  wrong.frame_a = "c";
  CHECK_THROWS_AS(flow_filter(wrong, flow, 2.0), FlowFrameMismatch);

  // A match sitting in an invalidated region is rejected.
  FlowField masked = flow;
  for (size_t i = 0; i < masked.valid.size(); ++i) masked.valid[i] = 0;
  ms.matches.push_back(Match{0, 0, Vec2(50, 50), Vec2(50, 50)});
  CHECK(flow_filter(ms, masked, 2.0).matches.empty());
}

TEST_CASE("flow_filter removes exactly the corrupted set under a homography") {
  // Synthetic homography: a plane seen by two cameras. The oracle applies the
  // exact plane-induced mapping to pixel_a.
  Rng rng(206);
  Mat3 h;  // a mild projective warp
  h << 0.95, 0.05, 8.0, -0.03, 1.05, -6.0, 1e-5, -2e-5, 1.0;
  auto apply_h = [&](const Vec2& p) {
    const Vec3 q = h * Vec3(p.x(), p.y(), 1.0);
    return Vec2(q.x() / q.z(), q.y() / q.z());
  };

  const int w = 640, h_px = 480, grid_w = 160, grid_h = 120;
  FlowField flow;
  flow.source_frame_id = "a";
  flow.target_frame_id = "b";
  flow.grid_width = grid_w;
  flow.grid_height = grid_h;
  flow.source_width = w;
  flow.source_height = h_px;
  flow.mapped.resize(static_cast<size_t>(grid_w) * grid_h);
  flow.valid.assign(flow.mapped.size(), 1);
  for (int iy = 0; iy < grid_h; ++iy) {
    for (int ix = 0; ix < grid_w; ++ix) {
      flow.mapped[iy * grid_w + ix] = apply_h(
          Vec2((ix + 0.5) * w / static_cast<double>(grid_w),
               (iy + 0.5) * h_px / static_cast<double>(grid_h)));
    }
  }

  MatchSet ms;
  ms.frame_a = "a";
  ms.frame_b = "b";
  ms.stage = MatchStage::raw_mutual;
  std::set<int> corrupted;
  const int n = 200;
  for (int i = 0; i < n; ++i) {
    const Vec2 pa(rng.uniform(20.0, w - 20.0), rng.uniform(20.0, h_px - 20.0));
    Vec2 pb = apply_h(pa);
    if (i % 10 < 3) {  // 30% corrupted
      pb += Vec2(rng.uniform(30.0, 120.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0),
                 rng.uniform(30.0, 120.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0));
      corrupted.insert(i);
    }
    ms.matches.push_back(Match{i, i, pa, pb});
  }

  const MatchSet kept = flow_filter(ms, flow, 3.0);
  std::set<int> kept_ids;
  for (const auto& m : kept.matches) kept_ids.insert(m.index_a);
  for (int i = 0; i < n; ++i) {
    CHECK(kept_ids.count(i) == (corrupted.count(i) ? 0u : 1u));
  }

  // Idempotent on its own output (same flow and tolerance).
  MatchSet again = kept;
  again.stage = MatchStage::raw_mutual;
  const MatchSet twice = flow_filter(again, flow, 3.0);
  CHECK(twice.matches.size() == kept.matches.size());
}
