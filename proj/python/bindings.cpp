// Python bindings for the core operations: similarity transforms, the
// Umeyama/RANSAC solvers, camera geometry, alignment graphs, PCK evaluation,
// voxel grids and grounding training.

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "reconalign/alignment.hpp"
#include "reconalign/grounding.hpp"
#include "reconalign/synthetic.hpp"
#include "reconalign/transfer.hpp"

namespace py = pybind11;
using namespace reconalign;

namespace {

std::vector<Vec3> rows_to_points(const Eigen::MatrixXd& m, const char* what) {
  if (m.cols() != 3) {
    throw InvalidArgument(std::string(what) + ": expected an (N, 3) array");
  }
  std::vector<Vec3> out;
  out.reserve(m.rows());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    out.push_back(m.row(r).transpose());
  }
  return out;
}

Keypoints3D make_keypoints(const std::vector<std::string>& names,
                           const Eigen::MatrixXd& coords) {
  if (coords.cols() != 3 ||
      coords.rows() != static_cast<Eigen::Index>(names.size())) {
    throw InvalidArgument("Keypoints3D: coords must be (len(names), 3)");
  }
  Keypoints3D k;
  k.names = names;
  k.coords = coords.transpose();
  return k;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Alignment of per-video 3D reconstructions, keypoint transfer and "
            "text-to-voxel grounding";

  py::register_exception<Error>(m, "ReconalignError", PyExc_RuntimeError);

  py::class_<SimilarityTransform3>(m, "SimilarityTransform3")
      .def(py::init(&SimilarityTransform3::from_parts), py::arg("scale"),
           py::arg("rotation"), py::arg("translation"))
      .def_static("identity", &SimilarityTransform3::identity)
      .def_readonly("scale", &SimilarityTransform3::scale)
      .def_readonly("rotation", &SimilarityTransform3::rotation)
      .def_readonly("translation", &SimilarityTransform3::translation)
      .def("matrix", &SimilarityTransform3::as_matrix,
           "4x4 homogeneous matrix")
      .def(
          "apply",
          [](const SimilarityTransform3& t, const Eigen::MatrixXd& points) {
            const auto pts = rows_to_points(points, "apply");
            Eigen::MatrixXd out(points.rows(), 3);
            for (Eigen::Index r = 0; r < points.rows(); ++r) {
              out.row(r) = apply_transform(t, pts[r]).transpose();
            }
            return out;
          },
          py::arg("points"), "Transforms an (N, 3) array of points")
      .def("__repr__", [](const SimilarityTransform3& t) {
        return "<SimilarityTransform3 scale=" + std::to_string(t.scale) + ">";
      });

  m.def("compose", &compose, py::arg("t2"), py::arg("t1"),
        "compose(t2, t1) applies t1 first");
  m.def("invert", &invert, py::arg("t"));

  py::class_<CameraModel>(m, "CameraModel")
      .def(py::init(&CameraModel::create), py::arg("intrinsics"),
           py::arg("rotation"), py::arg("translation"), py::arg("width"),
           py::arg("height"))
      .def_readonly("intrinsics", &CameraModel::intrinsics)
      .def_readonly("rotation", &CameraModel::rotation)
      .def_readonly("translation", &CameraModel::translation)
      .def_readonly("width", &CameraModel::width)
      .def_readonly("height", &CameraModel::height)
      .def("center", &CameraModel::center);

  m.def(
      "project",
      [](const CameraModel& cam, const Vec3& p) {
        const Projection proj = project(cam, p);
        return py::make_tuple(proj.pixel, proj.depth);
      },
      py::arg("camera"), py::arg("point"), "Returns (pixel, depth)");
  m.def(
      "backproject_ray",
      [](const CameraModel& cam, const Vec2& pixel) {
        const Ray ray = backproject_ray(cam, pixel);
        return py::make_tuple(ray.origin, ray.direction);
      },
      py::arg("camera"), py::arg("pixel"), "Returns (origin, direction)");
  m.def(
      "triangulate",
      [](const std::vector<std::pair<CameraModel, Vec2>>& observations) {
        const TriangulationResult result = triangulate(observations);
        return py::make_tuple(result.point, result.mean_reprojection_error_px);
      },
      py::arg("observations"),
      "DLT triangulation over [(camera, pixel), ...]; returns (point, "
      "mean reprojection error)");

  m.def(
      "fit_similarity_umeyama",
      [](const Eigen::MatrixXd& src, const Eigen::MatrixXd& dst) {
        return fit_similarity_umeyama(rows_to_points(src, "src"),
                                      rows_to_points(dst, "dst"));
      },
      py::arg("src"), py::arg("dst"),
      "Least-squares similarity fit dst ~= s*R*src + t on (N, 3) arrays");

  py::class_<RansacConfig>(m, "RansacConfig")
      .def(py::init<>())
      .def_readwrite("inlier_threshold", &RansacConfig::inlier_threshold)
      .def_readwrite("threshold_is_absolute", &RansacConfig::threshold_is_absolute)
      .def_readwrite("max_iterations", &RansacConfig::max_iterations)
      .def_readwrite("confidence", &RansacConfig::confidence)
      .def_readwrite("min_inliers", &RansacConfig::min_inliers)
      .def_readwrite("min_inlier_ratio", &RansacConfig::min_inlier_ratio)
      .def_readwrite("seed", &RansacConfig::seed);

  m.def(
      "solver_u",
      [](const Eigen::MatrixXd& src, const Eigen::MatrixXd& dst,
         const RansacConfig& cfg) -> py::object {
        const auto src_pts = rows_to_points(src, "src");
        const auto dst_pts = rows_to_points(dst, "dst");
        if (src_pts.size() != dst_pts.size()) {
          throw InvalidArgument("solver_u: src and dst sizes differ");
        }
        std::vector<Correspondence3D> corrs;
        corrs.reserve(src_pts.size());
        for (size_t i = 0; i < src_pts.size(); ++i) {
          corrs.push_back({src_pts[i], dst_pts[i], {"a", "b"}});
        }
        const auto fit = solver_u(corrs, cfg);
        if (!fit) return py::none();
        return py::make_tuple(fit->transform, fit->inlier_indices,
                              fit->inlier_rms);
      },
      py::arg("src"), py::arg("dst"), py::arg("config") = RansacConfig{},
      "RANSAC + Umeyama similarity estimation; returns (transform, "
      "inlier_indices, inlier_rms) or None when no consensus is reached");

  py::class_<Keypoints3D>(m, "Keypoints3D")
      .def(py::init(&make_keypoints), py::arg("names"), py::arg("coords"))
      .def_readonly("names", &Keypoints3D::names)
      .def_property_readonly("coords", [](const Keypoints3D& k) {
        return Eigen::MatrixXd(k.coords.transpose());
      });

  m.def("transfer_keypoints", &transfer_keypoints, py::arg("keypoints"),
        py::arg("transform"));
  m.def("fit_gt_transform", &fit_gt_transform, py::arg("source"),
        py::arg("target"),
        "Similarity between keypoint sets matched by name");
  m.def(
      "pck_3d",
      [](const Keypoints3D& predicted, const Keypoints3D& gt,
         const std::vector<double>& thresholds_cm, double metric_scale) {
        const PckCurve curve = pck_3d(predicted, gt, thresholds_cm, metric_scale);
        return py::make_tuple(curve.thresholds_cm, curve.values);
      },
      py::arg("predicted"), py::arg("ground_truth"), py::arg("thresholds_cm"),
      py::arg("metric_scale_cm_per_unit"),
      "Returns (thresholds_cm, pck_values)");

  py::class_<VoxelGrid>(m, "VoxelGrid")
      .def_readonly("bbox_min", &VoxelGrid::bbox_min)
      .def_readonly("bbox_max", &VoxelGrid::bbox_max)
      .def_readonly("divisions", &VoxelGrid::divisions)
      .def_readonly("active", &VoxelGrid::active)
      .def_property_readonly("num_active", &VoxelGrid::num_active)
      .def("label_at",
           [](const VoxelGrid& g, const Vec3& p) -> py::object {
             const auto label = g.label_at(p);
             if (!label) return py::none();
             return py::int_(*label);
           })
      .def("center_of_label", &VoxelGrid::center_of_label)
      .def("voxel_diagonal", &VoxelGrid::voxel_diagonal);

  m.def(
      "build_voxel_grid",
      [](const Eigen::MatrixXd& registered, int divisions,
         const Eigen::MatrixXd& training, int n_v) {
        return build_voxel_grid(rows_to_points(registered, "registered_points"),
                                divisions,
                                rows_to_points(training, "training_points"),
                                n_v);
      },
      py::arg("registered_points"), py::arg("divisions"),
      py::arg("training_points"), py::arg("n_v"));

  py::class_<TrainingPair>(m, "TrainingPair")
      .def(py::init([](const std::string& text, int voxel_label,
                       const Vec3& world_point) {
             TrainingPair p;
             p.text = text;
             p.voxel_label = voxel_label;
             p.world_point = world_point;
             return p;
           }),
           py::arg("text"), py::arg("voxel_label"),
           py::arg("world_point") = Vec3::Zero().eval())
      .def_readwrite("text", &TrainingPair::text)
      .def_readwrite("voxel_label", &TrainingPair::voxel_label)
      .def_readwrite("world_point", &TrainingPair::world_point);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("embedding_dim", &TrainConfig::embedding_dim)
      .def_readwrite("vocab_buckets", &TrainConfig::vocab_buckets)
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("momentum", &TrainConfig::momentum)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("seed", &TrainConfig::seed);

  py::class_<GroundingModel>(m, "GroundingModel")
      .def_readonly("vocab_buckets", &GroundingModel::vocab_buckets)
      .def_readonly("embedding_dim", &GroundingModel::embedding_dim)
      .def("model_ids", [](const GroundingModel& model) {
        std::vector<std::string> ids;
        for (const auto& [id, head] : model.heads) ids.push_back(id);
        return ids;
      });

  m.def(
      "train_grounding",
      [](const std::map<std::string, std::vector<TrainingPair>>& pairs,
         const std::map<std::string, VoxelGrid>& grids, const TrainConfig& cfg) {
        TrainOutcome outcome = train_grounding(pairs, grids, cfg);
        return py::make_tuple(std::move(outcome.model), outcome.epoch_losses);
      },
      py::arg("pairs_by_model"), py::arg("grids"),
      py::arg("config") = TrainConfig{},
      "Joint mini-batch training; returns (model, per-epoch losses)");

  m.def(
      "ground_query",
      [](const GroundingModel& model, const std::string& model_id,
         const std::string& text, const VoxelGrid& grid) {
        const QueryResult qr = ground_query(model, model_id, text, grid);
        return py::make_tuple(qr.scores, qr.predicted_label, qr.predicted_point);
      },
      py::arg("model"), py::arg("model_id"), py::arg("text"), py::arg("grid"),
      "Returns (softmax scores, argmax label, predicted 3D point)");

  m.def("hash_tokens", &hash_tokens, py::arg("text"), py::arg("vocab_buckets"));

  py::class_<AlignmentGraph>(m, "AlignmentGraph")
      .def_readonly("nodes", &AlignmentGraph::nodes)
      .def("edge_count",
           [](const AlignmentGraph& g) { return g.edges.size(); });
  m.def("load_alignment_graph",
        [](const std::string& path) { return load_alignment_graph(path); },
        py::arg("path"));
  m.def(
      "path_transform",
      [](const AlignmentGraph& graph, const std::string& from_id,
         const std::string& to_id) {
        return path_transform(graph, from_id, to_id);
      },
      py::arg("graph"), py::arg("from_id"), py::arg("to_id"));
}
