#include "reconalign/io.hpp"

#include <Eigen/Geometry>

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace reconalign {

namespace fs = std::filesystem;

std::string format_double(double value) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.17g", value);
  return buffer;
}

double parse_double(const std::string& token, const std::string& context) {
  errno = 0;
  char* end = nullptr;
  const double value = std::strtod(token.c_str(), &end);
  if (end != token.c_str() + token.size() || token.empty() || errno == ERANGE) {
    throw ParseError(context + ": bad number '" + token + "'");
  }
  return value;
}

namespace {

long long parse_int(const std::string& token, const std::string& context) {
  errno = 0;
  char* end = nullptr;
  const long long value = std::strtoll(token.c_str(), &end, 10);
  if (end != token.c_str() + token.size() || token.empty() || errno == ERANGE) {
    throw ParseError(context + ": bad integer '" + token + "'");
  }
  return value;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  std::string token;
  while (in >> token) out.push_back(token);
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

// Identifiers go into whitespace-separated records and file names, so they
// must stay free of blanks and control characters.
void check_identifier(const std::string& id, const std::string& context) {
  if (id.empty()) throw InvariantViolation(context + ": empty identifier");
  for (char ch : id) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (!(std::isalnum(c) || c == '_' || c == '-' || c == '.' || c == '/')) {
      throw InvariantViolation(context + ": identifier '" + id +
                               "' contains unsupported character");
    }
  }
}

void check_text_field(const std::string& text, const std::string& context) {
  if (text.find('\t') != std::string::npos ||
      text.find('\n') != std::string::npos ||
      text.find('\r') != std::string::npos) {
    throw InvariantViolation(context + ": text may not contain tabs or newlines");
  }
}

class LineReader {
 public:
  LineReader(const fs::path& path, const std::string& expected_header)
      : path_(path.string()), in_(path) {
    if (!in_) throw MissingFile("cannot open '" + path_ + "'");
    std::string header;
    if (!std::getline(in_, header)) {
      throw ParseError(path_ + ": empty file");
    }
    ++line_no_;
    if (header != expected_header) {
      throw ParseError(path_ + ": unsupported header '" + header +
                       "' (supported: '" + expected_header + "')");
    }
  }

  /// Next non-comment, non-blank line. Returns false at end of file.
  bool next(std::string* line) {
    while (std::getline(in_, *line)) {
      ++line_no_;
      if (!line->empty() && line->back() == '\r') line->pop_back();
      if (line->empty() || (*line)[0] == '#') continue;
      return true;
    }
    return false;
  }

  std::string where() const {
    return path_ + ":" + std::to_string(line_no_);
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(where() + ": " + msg);
  }

 private:
  std::string path_;
  std::ifstream in_;
  int line_no_ = 0;
};

std::ofstream open_out(const fs::path& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw MissingFile("cannot write '" + path.string() + "'");
  return out;
}

void write_u64(std::ostream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_f64(std::ostream& out, const double* data, size_t count) {
  out.write(reinterpret_cast<const char*>(data),
            static_cast<std::streamsize>(count * sizeof(double)));
}

uint64_t read_u64(std::istream& in, const std::string& context) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw ParseError(context + ": truncated binary data");
  return v;
}

void read_f64(std::istream& in, double* data, size_t count,
              const std::string& context) {
  in.read(reinterpret_cast<char*>(data),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw ParseError(context + ": truncated binary data");
}

std::string quaternion_record(const SimilarityTransform3& t) {
  Eigen::Quaterniond q(t.rotation);
  q.normalize();
  // Canonical sign so identical rotations serialize identically.
  if (q.w() < 0.0 || (q.w() == 0.0 && (q.x() < 0.0 || (q.x() == 0.0 && (q.y() < 0.0 || (q.y() == 0.0 && q.z() < 0.0)))))) {
    q.coeffs() = -q.coeffs();
  }
  std::ostringstream out;
  out << format_double(t.scale) << ' ' << format_double(q.w()) << ' '
      << format_double(q.x()) << ' ' << format_double(q.y()) << ' '
      << format_double(q.z()) << ' ' << format_double(t.translation.x()) << ' '
      << format_double(t.translation.y()) << ' '
      << format_double(t.translation.z());
  return out.str();
}

SimilarityTransform3 transform_from_tokens(const std::vector<std::string>& t,
                                           size_t offset,
                                           const std::string& context) {
  const double scale = parse_double(t[offset], context);
  Eigen::Quaterniond q(parse_double(t[offset + 1], context),
                       parse_double(t[offset + 2], context),
                       parse_double(t[offset + 3], context),
                       parse_double(t[offset + 4], context));
  if (q.norm() <= 0.0) throw ParseError(context + ": zero quaternion");
  q.normalize();
  const Vec3 translation(parse_double(t[offset + 5], context),
                         parse_double(t[offset + 6], context),
                         parse_double(t[offset + 7], context));
  return SimilarityTransform3::from_parts(scale, q.toRotationMatrix(),
                                          translation);
}

}  // namespace

// ---------------------------------------------------------------------------
// reconstruction (.rec)

void save_reconstruction(const fs::path& path, const Reconstruction& rec) {
  rec.validate();
  std::ofstream out = open_out(path);
  out << "# reconalign reconstruction v1\n";
  out << "id " << rec.id << "\n";
  for (const auto& [point_id, p] : rec.points) {
    out << "point " << point_id << ' ' << format_double(p.x()) << ' '
        << format_double(p.y()) << ' ' << format_double(p.z()) << "\n";
  }
  for (const auto& [frame_id, cam] : rec.frames) {
    out << "frame " << frame_id << ' ' << cam.width << ' ' << cam.height;
    const Mat3& k = cam.intrinsics;
    for (double v : {k(0, 0), k(1, 1), k(0, 2), k(1, 2), k(0, 1)}) {
      out << ' ' << format_double(v);
    }
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) out << ' ' << format_double(cam.rotation(r, c));
    }
    for (int i = 0; i < 3; ++i) out << ' ' << format_double(cam.translation(i));
    out << "\n";
  }
  for (const auto& obs : rec.observations) {
    out << "obs " << obs.frame_id << ' ' << obs.keypoint_index << ' '
        << format_double(obs.pixel.x()) << ' ' << format_double(obs.pixel.y())
        << ' ' << obs.point_id << "\n";
  }
}

Reconstruction load_reconstruction(const fs::path& path) {
  LineReader reader(path, "# reconalign reconstruction v1");
  Reconstruction rec;
  std::string line;
  while (reader.next(&line)) {
    const auto tokens = split_ws(line);
    if (tokens[0] == "id") {
      if (tokens.size() != 2) reader.fail("expected 'id <video_id>'");
      check_identifier(tokens[1], reader.where());
      rec.id = tokens[1];
    } else if (tokens[0] == "point") {
      if (tokens.size() != 5) reader.fail("expected 'point <id> <x> <y> <z>'");
      const int64_t id = parse_int(tokens[1], reader.where());
      const Vec3 p(parse_double(tokens[2], reader.where()),
                   parse_double(tokens[3], reader.where()),
                   parse_double(tokens[4], reader.where()));
      if (!rec.points.emplace(id, p).second) {
        reader.fail("duplicate point id " + tokens[1]);
      }
    } else if (tokens[0] == "frame") {
      if (tokens.size() != 21) reader.fail("expected 21 frame tokens");
      check_identifier(tokens[1], reader.where());
      const int width = static_cast<int>(parse_int(tokens[2], reader.where()));
      const int height = static_cast<int>(parse_int(tokens[3], reader.where()));
      Mat3 k = Mat3::Identity();
      k(0, 0) = parse_double(tokens[4], reader.where());
      k(1, 1) = parse_double(tokens[5], reader.where());
      k(0, 2) = parse_double(tokens[6], reader.where());
      k(1, 2) = parse_double(tokens[7], reader.where());
      k(0, 1) = parse_double(tokens[8], reader.where());
      Mat3 r;
      for (int i = 0; i < 9; ++i) {
        r(i / 3, i % 3) = parse_double(tokens[9 + i], reader.where());
      }
      const Vec3 t(parse_double(tokens[18], reader.where()),
                   parse_double(tokens[19], reader.where()),
                   parse_double(tokens[20], reader.where()));
      try {
        if (!rec.frames.emplace(tokens[1], CameraModel::create(k, r, t, width, height))
                 .second) {
          reader.fail("duplicate frame id '" + tokens[1] + "'");
        }
      } catch (const Error& e) {
        throw InvariantViolation(reader.where() + ": " + e.what());
      }
    } else if (tokens[0] == "obs") {
      if (tokens.size() != 6) {
        reader.fail("expected 'obs <frame> <kp_index> <px> <py> <point_id>'");
      }
      TrackObservation obs;
      obs.frame_id = tokens[1];
      obs.keypoint_index = static_cast<int>(parse_int(tokens[2], reader.where()));
      obs.pixel = Vec2(parse_double(tokens[3], reader.where()),
                       parse_double(tokens[4], reader.where()));
      obs.point_id = parse_int(tokens[5], reader.where());
      rec.observations.push_back(std::move(obs));
    } else {
      reader.fail("unknown record '" + tokens[0] + "'");
    }
  }
  if (rec.id.empty()) {
    throw ParseError(path.string() + ": missing 'id' record");
  }
  try {
    rec.validate();
  } catch (const InvariantViolation& e) {
    throw InvariantViolation(path.string() + ": " + e.what());
  }
  return rec;
}

// ---------------------------------------------------------------------------
// local features (.lfd + .lfd.bin)

void save_features(const fs::path& path,
                   const std::vector<LocalFeatureSet>& features) {
  const fs::path blob_path = path.string() + ".bin";
  std::ofstream sidecar = open_out(path);
  std::ofstream blob = open_out(blob_path, /*binary=*/true);
  sidecar << "# reconalign local-features v1\n";
  sidecar << "# blob " << blob_path.filename().string()
          << " float64 little-endian: positions(2xN) then descriptors(dxN), column-major\n";
  uint64_t offset = 0;
  for (const auto& f : features) {
    check_identifier(f.frame_id, "save_features");
    const Eigen::Index n = f.descriptors.cols();
    const Eigen::Index d = f.descriptors.rows();
    if (f.positions.cols() != n) {
      throw InvariantViolation("save_features: frame '" + f.frame_id +
                               "' positions/descriptors disagree");
    }
    sidecar << "frame " << f.frame_id << ' ' << d << ' ' << n << ' ' << offset
            << "\n";
    write_f64(blob, f.positions.data(), static_cast<size_t>(2 * n));
    write_f64(blob, f.descriptors.data(), static_cast<size_t>(d * n));
    offset += static_cast<uint64_t>(2 * n + d * n);
  }
}

std::vector<LocalFeatureSet> load_features(const fs::path& path) {
  LineReader reader(path, "# reconalign local-features v1");
  const fs::path blob_path = path.string() + ".bin";
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw MissingFile("cannot open '" + blob_path.string() + "'");

  std::vector<LocalFeatureSet> out;
  std::string line;
  while (reader.next(&line)) {
    const auto tokens = split_ws(line);
    if (tokens[0] != "frame" || tokens.size() != 5) {
      reader.fail("expected 'frame <id> <d> <n> <offset>'");
    }
    LocalFeatureSet f;
    f.frame_id = tokens[1];
    check_identifier(f.frame_id, reader.where());
    const long long d = parse_int(tokens[2], reader.where());
    const long long n = parse_int(tokens[3], reader.where());
    const long long offset = parse_int(tokens[4], reader.where());
    if (d < 1 || n < 0 || offset < 0) reader.fail("bad feature dimensions");
    blob.seekg(static_cast<std::streamoff>(offset * sizeof(double)));
    f.positions.resize(2, n);
    f.descriptors.resize(d, n);
    read_f64(blob, f.positions.data(), static_cast<size_t>(2 * n), reader.where());
    read_f64(blob, f.descriptors.data(), static_cast<size_t>(d * n), reader.where());
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// global descriptors (.gdv)

void save_global_descriptors(const fs::path& path,
                             const std::vector<GlobalDescriptor>& descriptors) {
  std::ofstream out = open_out(path);
  out << "# reconalign global-descriptors v1\n";
  for (const auto& d : descriptors) {
    check_identifier(d.frame_id, "save_global_descriptors");
    out << "frame " << d.frame_id << ' ' << d.vector.size();
    for (Eigen::Index i = 0; i < d.vector.size(); ++i) {
      out << ' ' << format_double(d.vector(i));
    }
    out << "\n";
  }
}

std::vector<GlobalDescriptor> load_global_descriptors(const fs::path& path) {
  LineReader reader(path, "# reconalign global-descriptors v1");
  std::vector<GlobalDescriptor> out;
  std::string line;
  while (reader.next(&line)) {
    const auto tokens = split_ws(line);
    if (tokens[0] != "frame" || tokens.size() < 3) {
      reader.fail("expected 'frame <id> <dim> <values...>'");
    }
    GlobalDescriptor d;
    d.frame_id = tokens[1];
    check_identifier(d.frame_id, reader.where());
    const long long dim = parse_int(tokens[2], reader.where());
    if (dim < 1 || tokens.size() != static_cast<size_t>(dim) + 3) {
      reader.fail("descriptor value count does not match declared dimension");
    }
    d.vector.resize(dim);
    for (long long i = 0; i < dim; ++i) {
      d.vector(i) = parse_double(tokens[3 + i], reader.where());
    }
    if (d.vector.norm() <= 0.0) {
      throw InvariantViolation(reader.where() + ": zero global descriptor for '" +
                               d.frame_id + "'");
    }
    out.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// dense flow (.flo2 + .flo2.bin)

void save_flows(const fs::path& path, const std::vector<FlowField>& flows) {
  const fs::path blob_path = path.string() + ".bin";
  std::ofstream sidecar = open_out(path);
  std::ofstream blob = open_out(blob_path, /*binary=*/true);
  sidecar << "# reconalign flow v1\n";
  sidecar << "# blob " << blob_path.filename().string()
          << ": per flow, mapped pixels (2 float64 per cell, row-major) then "
             "validity bytes\n";
  uint64_t offset = 0;
  for (const auto& f : flows) {
    check_identifier(f.source_frame_id, "save_flows");
    check_identifier(f.target_frame_id, "save_flows");
    const size_t cells = static_cast<size_t>(f.grid_width) * f.grid_height;
    if (f.mapped.size() != cells || f.valid.size() != cells) {
      throw InvariantViolation("save_flows: grid size mismatch for (" +
                               f.source_frame_id + " -> " + f.target_frame_id +
                               ")");
    }
    sidecar << "flow " << f.source_frame_id << ' ' << f.target_frame_id << ' '
            << f.grid_width << ' ' << f.grid_height << ' ' << f.source_width
            << ' ' << f.source_height << ' ' << offset << "\n";
    for (const Vec2& m : f.mapped) {
      write_f64(blob, m.data(), 2);
    }
    blob.write(reinterpret_cast<const char*>(f.valid.data()),
               static_cast<std::streamsize>(cells));
    offset += cells * (2 * sizeof(double) + 1);
  }
}

std::vector<FlowField> load_flows(const fs::path& path) {
  LineReader reader(path, "# reconalign flow v1");
  const fs::path blob_path = path.string() + ".bin";
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw MissingFile("cannot open '" + blob_path.string() + "'");

  std::vector<FlowField> out;
  std::string line;
  while (reader.next(&line)) {
    const auto tokens = split_ws(line);
    if (tokens[0] != "flow" || tokens.size() != 8) {
      reader.fail("expected 'flow <src> <tgt> <gw> <gh> <sw> <sh> <offset>'");
    }
    FlowField f;
    f.source_frame_id = tokens[1];
    f.target_frame_id = tokens[2];
    f.grid_width = static_cast<int>(parse_int(tokens[3], reader.where()));
    f.grid_height = static_cast<int>(parse_int(tokens[4], reader.where()));
    f.source_width = static_cast<int>(parse_int(tokens[5], reader.where()));
    f.source_height = static_cast<int>(parse_int(tokens[6], reader.where()));
    const long long offset = parse_int(tokens[7], reader.where());
    if (f.grid_width < 1 || f.grid_height < 1 || f.source_width < 1 ||
        f.source_height < 1 || offset < 0) {
      reader.fail("bad flow dimensions");
    }
    const size_t cells = static_cast<size_t>(f.grid_width) * f.grid_height;
    blob.seekg(static_cast<std::streamoff>(offset));
    f.mapped.resize(cells);
    for (Vec2& m : f.mapped) {
      read_f64(blob, m.data(), 2, reader.where());
    }
    f.valid.resize(cells);
    blob.read(reinterpret_cast<char*>(f.valid.data()),
              static_cast<std::streamsize>(cells));
    if (!blob) reader.fail("truncated flow blob");
    for (size_t i = 0; i < cells; ++i) {
      if (f.valid[i] && !f.mapped[i].allFinite()) {
        throw InvariantViolation(reader.where() +
                                 ": non-finite mapped pixel marked valid");
      }
    }
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// matches (.m2d)

void save_matches(const fs::path& path, const std::vector<MatchSet>& match_sets) {
  std::ofstream out = open_out(path);
  out << "# reconalign matches v1\n";
  for (const auto& ms : match_sets) {
    check_identifier(ms.frame_a, "save_matches");
    check_identifier(ms.frame_b, "save_matches");
    out << "pair " << ms.frame_a << ' ' << ms.frame_b << ' '
        << to_string(ms.stage) << ' ' << ms.matches.size() << "\n";
    for (const auto& m : ms.matches) {
      out << "match " << m.index_a << ' ' << m.index_b << ' '
          << format_double(m.pixel_a.x()) << ' ' << format_double(m.pixel_a.y())
          << ' ' << format_double(m.pixel_b.x()) << ' '
          << format_double(m.pixel_b.y()) << "\n";
    }
  }
}

std::vector<MatchSet> load_matches(const fs::path& path) {
  LineReader reader(path, "# reconalign matches v1");
  std::vector<MatchSet> out;
  std::string line;
  while (reader.next(&line)) {
    auto tokens = split_ws(line);
    if (tokens[0] != "pair" || tokens.size() != 5) {
      reader.fail("expected 'pair <frame_a> <frame_b> <stage> <count>'");
    }
    MatchSet ms;
    ms.frame_a = tokens[1];
    ms.frame_b = tokens[2];
    ms.stage = match_stage_from_string(tokens[3]);
    const long long count = parse_int(tokens[4], reader.where());
    for (long long i = 0; i < count; ++i) {
      if (!reader.next(&line)) reader.fail("truncated match list");
      tokens = split_ws(line);
      if (tokens[0] != "match" || tokens.size() != 7) {
        reader.fail("expected 'match <ia> <ib> <ax> <ay> <bx> <by>'");
      }
      Match m;
      m.index_a = static_cast<int>(parse_int(tokens[1], reader.where()));
      m.index_b = static_cast<int>(parse_int(tokens[2], reader.where()));
      m.pixel_a = Vec2(parse_double(tokens[3], reader.where()),
                       parse_double(tokens[4], reader.where()));
      m.pixel_b = Vec2(parse_double(tokens[5], reader.where()),
                       parse_double(tokens[6], reader.where()));
      ms.matches.push_back(m);
    }
    out.push_back(std::move(ms));
  }
  return out;
}

// ---------------------------------------------------------------------------
// alignment graph (.agr)

void save_alignment_graph(const fs::path& path, const AlignmentGraph& graph) {
  graph.validate();
  std::ofstream out = open_out(path);
  out << "# reconalign alignment-graph v1\n";
  for (const auto& node : graph.nodes) {
    out << "node " << node << "\n";
  }
  for (const auto& e : graph.edges) {
    out << "edge " << e.from_id << ' ' << e.to_id << ' '
        << quaternion_record(e.transform) << ' ' << e.inlier_count << ' '
        << e.total_count << ' ' << format_double(e.inlier_rms) << "\n";
  }
}

AlignmentGraph load_alignment_graph(const fs::path& path) {
  LineReader reader(path, "# reconalign alignment-graph v1");
  AlignmentGraph graph;
  std::string line;
  while (reader.next(&line)) {
    const auto tokens = split_ws(line);
    if (tokens[0] == "node") {
      if (tokens.size() != 2) reader.fail("expected 'node <id>'");
      check_identifier(tokens[1], reader.where());
      graph.nodes.push_back(tokens[1]);
    } else if (tokens[0] == "edge") {
      if (tokens.size() != 14) reader.fail("expected 14 edge tokens");
      EdgeEstimate e;
      e.from_id = tokens[1];
      e.to_id = tokens[2];
      try {
        e.transform = transform_from_tokens(tokens, 3, reader.where());
      } catch (const Error& err) {
        throw ParseError(reader.where() + ": " + err.what());
      }
      e.inlier_count = static_cast<int>(parse_int(tokens[11], reader.where()));
      e.total_count = static_cast<int>(parse_int(tokens[12], reader.where()));
      e.inlier_rms = parse_double(tokens[13], reader.where());
      graph.edges.push_back(std::move(e));
    } else {
      reader.fail("unknown record '" + tokens[0] + "'");
    }
  }
  std::sort(graph.nodes.begin(), graph.nodes.end());
  try {
    graph.validate();
  } catch (const InvariantViolation& e) {
    throw InvariantViolation(path.string() + ": " + e.what());
  }
  return graph;
}

// ---------------------------------------------------------------------------
// 2D keypoint annotations (.kp2)

void save_annotations(const fs::path& path,
                      const std::vector<KeypointAnnotation2D>& annotations) {
  std::ofstream out = open_out(path);
  out << "# reconalign keypoints2d v1\n";
  for (const auto& a : annotations) {
    check_identifier(a.video_id, "save_annotations");
    check_identifier(a.frame_id, "save_annotations");
    check_identifier(a.keypoint_name, "save_annotations");
    out << "ann " << a.video_id << ' ' << a.frame_id << ' ' << a.keypoint_name
        << ' ' << format_double(a.pixel.x()) << ' '
        << format_double(a.pixel.y()) << "\n";
  }
}

std::vector<KeypointAnnotation2D> load_annotations(const fs::path& path) {
  LineReader reader(path, "# reconalign keypoints2d v1");
  std::vector<KeypointAnnotation2D> out;
  std::string line;
  while (reader.next(&line)) {
    const auto tokens = split_ws(line);
    if (tokens[0] != "ann" || tokens.size() != 6) {
      reader.fail("expected 'ann <video> <frame> <name> <px> <py>'");
    }
    KeypointAnnotation2D a;
    a.video_id = tokens[1];
    a.frame_id = tokens[2];
    a.keypoint_name = tokens[3];
    a.pixel = Vec2(parse_double(tokens[4], reader.where()),
                   parse_double(tokens[5], reader.where()));
    out.push_back(std::move(a));
  }
  return out;
}

// ---------------------------------------------------------------------------
// named 3D keypoints (.kp3)

void save_keypoints3d(const fs::path& path,
                      const std::map<std::string, Keypoints3D>& by_video) {
  std::ofstream out = open_out(path);
  out << "# reconalign keypoints3d v1\n";
  for (const auto& [video_id, kps] : by_video) {
    check_identifier(video_id, "save_keypoints3d");
    for (size_t i = 0; i < kps.names.size(); ++i) {
      check_identifier(kps.names[i], "save_keypoints3d");
      const Vec3 p = kps.coords.col(static_cast<Eigen::Index>(i));
      out << "kp3 " << video_id << ' ' << kps.names[i] << ' '
          << format_double(p.x()) << ' ' << format_double(p.y()) << ' '
          << format_double(p.z()) << "\n";
    }
  }
}

std::map<std::string, Keypoints3D> load_keypoints3d(const fs::path& path) {
  LineReader reader(path, "# reconalign keypoints3d v1");
  std::map<std::string, std::vector<std::pair<std::string, Vec3>>> raw;
  std::string line;
  while (reader.next(&line)) {
    const auto tokens = split_ws(line);
    if (tokens[0] != "kp3" || tokens.size() != 6) {
      reader.fail("expected 'kp3 <video> <name> <x> <y> <z>'");
    }
    raw[tokens[1]].push_back(
        {tokens[2], Vec3(parse_double(tokens[3], reader.where()),
                         parse_double(tokens[4], reader.where()),
                         parse_double(tokens[5], reader.where()))});
  }
  std::map<std::string, Keypoints3D> out;
  for (const auto& [video_id, entries] : raw) {
    Keypoints3D kps;
    kps.coords.resize(3, static_cast<Eigen::Index>(entries.size()));
    for (size_t i = 0; i < entries.size(); ++i) {
      kps.names.push_back(entries[i].first);
      kps.coords.col(static_cast<Eigen::Index>(i)) = entries[i].second;
    }
    out.emplace(video_id, std::move(kps));
  }
  return out;
}

// ---------------------------------------------------------------------------
// narration (.nar)

void save_narration(const fs::path& path,
                    const std::vector<NarrationSegment>& segments) {
  std::ofstream out = open_out(path);
  out << "# reconalign narration v1\n";
  for (const auto& s : segments) {
    check_identifier(s.video_id, "save_narration");
    check_identifier(s.frame_id, "save_narration");
    check_text_field(s.text, "save_narration");
    if (s.text.empty()) {
      throw InvariantViolation("save_narration: empty narration text");
    }
    out << "seg\t" << s.video_id << '\t' << s.frame_id << '\t' << s.text << "\n";
  }
}

std::vector<NarrationSegment> load_narration(const fs::path& path) {
  LineReader reader(path, "# reconalign narration v1");
  std::vector<NarrationSegment> out;
  std::string line;
  while (reader.next(&line)) {
    const auto fields = split_tabs(line);
    if (fields.size() != 4 || fields[0] != "seg") {
      reader.fail("expected 'seg<TAB><video><TAB><frame><TAB><text>'");
    }
    if (fields[3].empty()) {
      throw InvariantViolation(reader.where() + ": empty narration text");
    }
    out.push_back(NarrationSegment{fields[1], fields[3], fields[2]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// detections (.det)

void save_detections(const fs::path& path,
                     const std::vector<Detection2D>& detections) {
  std::ofstream out = open_out(path);
  out << "# reconalign detections v1\n";
  for (const auto& d : detections) {
    check_identifier(d.frame_id, "save_detections");
    out << "det " << d.frame_id << ' ' << format_double(d.pixel.x()) << ' '
        << format_double(d.pixel.y()) << ' ' << format_double(d.confidence)
        << "\n";
  }
}

std::vector<Detection2D> load_detections(const fs::path& path) {
  LineReader reader(path, "# reconalign detections v1");
  std::vector<Detection2D> out;
  std::string line;
  while (reader.next(&line)) {
    const auto tokens = split_ws(line);
    if (tokens[0] != "det" || tokens.size() != 5) {
      reader.fail("expected 'det <frame> <px> <py> <confidence>'");
    }
    Detection2D d;
    d.frame_id = tokens[1];
    d.pixel = Vec2(parse_double(tokens[2], reader.where()),
                   parse_double(tokens[3], reader.where()));
    d.confidence = parse_double(tokens[4], reader.where());
    if (d.confidence < 0.0 || d.confidence > 1.0) {
      throw InvariantViolation(reader.where() + ": confidence outside [0, 1]");
    }
    out.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------
// saliency (.sal)

void save_saliency(const fs::path& path, const std::vector<SaliencyMap>& maps) {
  std::ofstream out = open_out(path);
  out << "# reconalign saliency v1\n";
  for (const auto& m : maps) {
    check_identifier(m.frame_id, "save_saliency");
    if (m.rows < 1 || m.cols < 1 ||
        m.scores.size() != static_cast<size_t>(m.rows) * m.cols) {
      throw InvariantViolation("save_saliency: malformed map for '" +
                               m.frame_id + "'");
    }
    out << "map " << m.frame_id << ' ' << m.rows << ' ' << m.cols;
    for (double s : m.scores) out << ' ' << format_double(s);
    out << "\n";
  }
}

std::vector<SaliencyMap> load_saliency(const fs::path& path) {
  LineReader reader(path, "# reconalign saliency v1");
  std::vector<SaliencyMap> out;
  std::string line;
  while (reader.next(&line)) {
    const auto tokens = split_ws(line);
    if (tokens[0] != "map" || tokens.size() < 4) {
      reader.fail("expected 'map <frame> <rows> <cols> <scores...>'");
    }
    SaliencyMap m;
    m.frame_id = tokens[1];
    m.rows = static_cast<int>(parse_int(tokens[2], reader.where()));
    m.cols = static_cast<int>(parse_int(tokens[3], reader.where()));
    if (m.rows < 1 || m.cols < 1 ||
        tokens.size() != static_cast<size_t>(m.rows) * m.cols + 4) {
      reader.fail("score count does not match declared map size");
    }
    for (size_t i = 4; i < tokens.size(); ++i) {
      const double s = parse_double(tokens[i], reader.where());
      if (!std::isfinite(s)) {
        throw InvariantViolation(reader.where() + ": non-finite saliency score");
      }
      m.scores.push_back(s);
    }
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCK tables (.pck)

void save_pck(const fs::path& path, const PckTable& table) {
  std::ofstream out = open_out(path);
  out << "# reconalign pck v1\n";
  out << "# columns: threshold_cm";
  for (const auto& [name, values] : table.series) {
    check_identifier(name, "save_pck");
    if (values.size() != table.thresholds_cm.size()) {
      throw InvariantViolation("save_pck: series '" + name +
                               "' length mismatch");
    }
    out << '\t' << name;
  }
  out << "\n";
  for (size_t i = 0; i < table.thresholds_cm.size(); ++i) {
    out << format_double(table.thresholds_cm[i]);
    for (const auto& [name, values] : table.series) {
      out << '\t' << format_double(values[i]);
    }
    out << "\n";
  }
}

PckTable load_pck(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open '" + path.string() + "'");
  std::string header;
  if (!std::getline(in, header) || header != "# reconalign pck v1") {
    throw ParseError(path.string() + ": unsupported header");
  }
  std::string columns;
  if (!std::getline(in, columns) || columns.rfind("# columns: threshold_cm", 0) != 0) {
    throw ParseError(path.string() + ": missing column header");
  }
  PckTable table;
  {
    const auto names = split_tabs(columns.substr(std::strlen("# columns: ")));
    for (size_t i = 1; i < names.size(); ++i) {
      table.series.push_back({names[i], {}});
    }
  }
  std::string line;
  int line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_tabs(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != table.series.size() + 1) {
      throw ParseError(where + ": column count mismatch");
    }
    table.thresholds_cm.push_back(parse_double(fields[0], where));
    for (size_t i = 0; i < table.series.size(); ++i) {
      table.series[i].second.push_back(parse_double(fields[i + 1], where));
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// grounding queries (.qry)

void save_queries(const fs::path& path,
                  const std::vector<GroundingQuery>& queries) {
  std::ofstream out = open_out(path);
  out << "# reconalign queries v1\n";
  for (const auto& q : queries) {
    check_identifier(q.model_id, "save_queries");
    if (!q.object_class.empty()) check_identifier(q.object_class, "save_queries");
    check_text_field(q.text, "save_queries");
    out << "query\t" << q.model_id << '\t'
        << (q.object_class.empty() ? "-" : q.object_class) << '\t'
        << format_double(q.gt_point.x()) << '\t' << format_double(q.gt_point.y())
        << '\t' << format_double(q.gt_point.z()) << '\t' << q.text << "\n";
  }
}

std::vector<GroundingQuery> load_queries(const fs::path& path) {
  LineReader reader(path, "# reconalign queries v1");
  std::vector<GroundingQuery> out;
  std::string line;
  while (reader.next(&line)) {
    const auto fields = split_tabs(line);
    if (fields.size() != 7 || fields[0] != "query") {
      reader.fail("expected 'query<TAB>model<TAB>class<TAB>x<TAB>y<TAB>z<TAB>text'");
    }
    GroundingQuery q;
    q.model_id = fields[1];
    q.object_class = fields[2] == "-" ? "" : fields[2];
    q.gt_point = Vec3(parse_double(fields[3], reader.where()),
                      parse_double(fields[4], reader.where()),
                      parse_double(fields[5], reader.where()));
    q.text = fields[6];
    if (q.text.empty()) reader.fail("empty query text");
    out.push_back(std::move(q));
  }
  return out;
}

// ---------------------------------------------------------------------------
// grounding checkpoint (.gmod)

namespace {
constexpr char kGmodMagic[8] = {'R', 'A', 'G', 'M', 'O', 'D', '0', '1'};

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in, const std::string& context) {
  const uint64_t len = read_u64(in, context);
  if (len > (1u << 20)) throw ParseError(context + ": unreasonable string length");
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError(context + ": truncated binary data");
  return s;
}
}  // namespace

void save_grounding_checkpoint(const fs::path& path,
                               const GroundingCheckpoint& checkpoint) {
  const GroundingModel& model = checkpoint.model;
  std::ofstream out = open_out(path, /*binary=*/true);
  out.write(kGmodMagic, sizeof(kGmodMagic));
  write_u64(out, static_cast<uint64_t>(model.vocab_buckets));
  write_u64(out, static_cast<uint64_t>(model.embedding_dim));
  write_u64(out, model.heads.size());
  write_f64(out, model.embeddings.data(),
            static_cast<size_t>(model.embeddings.size()));
  for (const auto& [id, head] : model.heads) {
    const auto grid_it = checkpoint.grids.find(id);
    if (grid_it == checkpoint.grids.end()) {
      throw InvalidArgument("save_grounding_checkpoint: no grid for model '" +
                            id + "'");
    }
    const VoxelGrid& grid = grid_it->second;
    if (grid.num_active() != head.bias.size()) {
      throw InvariantViolation(
          "save_grounding_checkpoint: head and grid disagree for '" + id + "'");
    }
    write_string(out, id);
    write_u64(out, static_cast<uint64_t>(head.bias.size()));
    write_f64(out, head.weight.data(), static_cast<size_t>(head.weight.size()));
    write_f64(out, head.bias.data(), static_cast<size_t>(head.bias.size()));
    write_f64(out, grid.bbox_min.data(), 3);
    write_f64(out, grid.bbox_max.data(), 3);
    write_u64(out, static_cast<uint64_t>(grid.divisions));
    write_u64(out, grid.active.size());
    out.write(reinterpret_cast<const char*>(grid.active.data()),
              static_cast<std::streamsize>(grid.active.size() * sizeof(int64_t)));
  }
}

GroundingCheckpoint load_grounding_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFile("cannot open '" + path.string() + "'");
  const std::string context = path.string();
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kGmodMagic, sizeof(magic)) != 0) {
    throw ParseError(context + ": not a reconalign grounding checkpoint");
  }
  GroundingCheckpoint cp;
  cp.model.vocab_buckets = static_cast<int>(read_u64(in, context));
  cp.model.embedding_dim = static_cast<int>(read_u64(in, context));
  const uint64_t num_models = read_u64(in, context);
  if (cp.model.vocab_buckets < 1 || cp.model.embedding_dim < 1) {
    throw ParseError(context + ": bad checkpoint dimensions");
  }
  cp.model.embeddings.resize(cp.model.vocab_buckets, cp.model.embedding_dim);
  read_f64(in, cp.model.embeddings.data(),
           static_cast<size_t>(cp.model.embeddings.size()), context);
  for (uint64_t m = 0; m < num_models; ++m) {
    const std::string id = read_string(in, context);
    const uint64_t n_v = read_u64(in, context);
    GroundingModel::Head head;
    head.weight.resize(cp.model.embedding_dim, static_cast<Eigen::Index>(n_v));
    head.bias.resize(static_cast<Eigen::Index>(n_v));
    read_f64(in, head.weight.data(), static_cast<size_t>(head.weight.size()),
             context);
    read_f64(in, head.bias.data(), static_cast<size_t>(head.bias.size()), context);
    VoxelGrid grid;
    read_f64(in, grid.bbox_min.data(), 3, context);
    read_f64(in, grid.bbox_max.data(), 3, context);
    grid.divisions = static_cast<int>(read_u64(in, context));
    const uint64_t n_active = read_u64(in, context);
    if (n_active != n_v) {
      throw ParseError(context + ": head/grid size mismatch for '" + id + "'");
    }
    grid.active.resize(n_active);
    in.read(reinterpret_cast<char*>(grid.active.data()),
            static_cast<std::streamsize>(n_active * sizeof(int64_t)));
    if (!in) throw ParseError(context + ": truncated binary data");
    for (size_t i = 0; i < grid.active.size(); ++i) {
      grid.label_of[grid.active[i]] = static_cast<int>(i);
    }
    try {
      grid.validate();
    } catch (const InvariantViolation& e) {
      throw ParseError(context + ": invalid grid for '" + id + "': " + e.what());
    }
    cp.model.heads.emplace(id, std::move(head));
    cp.grids.emplace(id, std::move(grid));
  }
  return cp;
}

// ---------------------------------------------------------------------------
// manifest

void save_manifest(const fs::path& path, const Manifest& manifest) {
  std::ofstream out = open_out(path);
  out << "# reconalign manifest v1\n";
  for (const auto& e : manifest.entries) {
    check_identifier(e.video_id, "save_manifest");
    out << "video " << e.video_id << " group=" << e.group;
    auto field = [&](const char* key, const std::optional<std::string>& value) {
      if (value) out << ' ' << key << '=' << *value;
    };
    field("rec", e.reconstruction);
    field("features", e.features);
    field("gdesc", e.global_descriptors);
    field("flow", e.flows);
    field("narration", e.narration);
    field("detections", e.detections);
    field("saliency", e.saliency);
    out << "\n";
  }
}

Manifest load_manifest(const fs::path& path) {
  LineReader reader(path, "# reconalign manifest v1");
  Manifest manifest;
  manifest.directory = fs::absolute(path).parent_path();
  std::string line;
  while (reader.next(&line)) {
    const auto tokens = split_ws(line);
    if (tokens[0] != "video" || tokens.size() < 2) {
      reader.fail("expected 'video <id> [key=value ...]'");
    }
    ManifestEntry entry;
    entry.video_id = tokens[1];
    check_identifier(entry.video_id, reader.where());
    for (size_t i = 2; i < tokens.size(); ++i) {
      const size_t eq = tokens[i].find('=');
      if (eq == std::string::npos) reader.fail("expected key=value, got '" + tokens[i] + "'");
      const std::string key = tokens[i].substr(0, eq);
      const std::string value = tokens[i].substr(eq + 1);
      if (value.empty()) reader.fail("empty value for key '" + key + "'");
      if (key == "group") entry.group = value;
      else if (key == "rec") entry.reconstruction = value;
      else if (key == "features") entry.features = value;
      else if (key == "gdesc") entry.global_descriptors = value;
      else if (key == "flow") entry.flows = value;
      else if (key == "narration") entry.narration = value;
      else if (key == "detections") entry.detections = value;
      else if (key == "saliency") entry.saliency = value;
      else reader.fail("unknown manifest key '" + key + "'");
    }
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

// ---------------------------------------------------------------------------
// dataset loading & validation

namespace {

void validate_video(const std::string& video_id, const VideoData& video) {
  const Reconstruction* rec =
      video.reconstruction ? &*video.reconstruction : nullptr;

  for (const auto& f : video.features) {
    for (Eigen::Index c = 0; c < f.descriptors.cols(); ++c) {
      if (f.descriptors.col(c).norm() <= 0.0) {
        throw InvariantViolation("video " + video_id + ": feature frame '" +
                                 f.frame_id + "' column " + std::to_string(c) +
                                 " is not normalizable");
      }
    }
    if (rec) {
      const auto frame_it = rec->frames.find(f.frame_id);
      if (frame_it != rec->frames.end()) {
        const CameraModel& cam = frame_it->second;
        for (Eigen::Index c = 0; c < f.positions.cols(); ++c) {
          const Vec2 p = f.positions.col(c);
          if (p.x() < 0 || p.x() >= cam.width || p.y() < 0 || p.y() >= cam.height) {
            throw InvariantViolation(
                "video " + video_id + ": feature frame '" + f.frame_id +
                "' position " + std::to_string(c) + " outside frame bounds");
          }
        }
      }
    }
  }

  if (rec) {
    for (const auto& seg : video.narration) {
      if (rec->frames.find(seg.frame_id) == rec->frames.end()) {
        throw InvariantViolation("video " + video_id + ": narration segment on '" +
                                 seg.frame_id + "' references unknown frame");
      }
    }
    for (const auto& det : video.detections) {
      const auto frame_it = rec->frames.find(det.frame_id);
      if (frame_it == rec->frames.end()) continue;
      const CameraModel& cam = frame_it->second;
      if (det.pixel.x() < 0 || det.pixel.x() >= cam.width ||
          det.pixel.y() < 0 || det.pixel.y() >= cam.height) {
        throw InvariantViolation("video " + video_id + ": detection on '" +
                                 det.frame_id + "' outside frame bounds");
      }
    }
  }
}

}  // namespace

namespace {

// Keeps only the first max_frames frames (sorted by id) and drops every
// record that references a removed frame.
void truncate_video_frames(VideoData& video, int max_frames) {
  if (!video.reconstruction || max_frames <= 0) return;
  Reconstruction& rec = *video.reconstruction;
  if (static_cast<int>(rec.frames.size()) <= max_frames) return;

  std::set<std::string> kept;
  for (const auto& [frame_id, cam] : rec.frames) {
    if (static_cast<int>(kept.size()) == max_frames) break;
    kept.insert(frame_id);
  }
  auto keep = [&kept](const std::string& frame_id) {
    return kept.count(frame_id) != 0;
  };
  for (auto it = rec.frames.begin(); it != rec.frames.end();) {
    it = keep(it->first) ? std::next(it) : rec.frames.erase(it);
  }
  std::erase_if(rec.observations,
                [&](const TrackObservation& o) { return !keep(o.frame_id); });
  std::erase_if(video.features,
                [&](const LocalFeatureSet& f) { return !keep(f.frame_id); });
  std::erase_if(video.global_descriptors,
                [&](const GlobalDescriptor& d) { return !keep(d.frame_id); });
  std::erase_if(video.flows,
                [&](const FlowField& f) { return !keep(f.source_frame_id); });
  std::erase_if(video.narration,
                [&](const NarrationSegment& s) { return !keep(s.frame_id); });
  std::erase_if(video.detections,
                [&](const Detection2D& d) { return !keep(d.frame_id); });
  std::erase_if(video.saliency,
                [&](const SaliencyMap& s) { return !keep(s.frame_id); });
}

}  // namespace

LoadResult load_dataset(const fs::path& manifest_path,
                        const LoadOptions& options) {
  const Manifest manifest = load_manifest(manifest_path);
  LoadResult result;
  for (const auto& entry : manifest.entries) {
    if (result.dataset.videos.count(entry.video_id)) {
      throw InvariantViolation("manifest lists video '" + entry.video_id +
                               "' twice");
    }
    VideoData video;
    video.group = entry.group;
    auto resolve = [&](const std::string& rel) {
      return manifest.directory / rel;
    };
    if (entry.reconstruction) {
      video.reconstruction = load_reconstruction(resolve(*entry.reconstruction));
      if (video.reconstruction->id != entry.video_id) {
        throw InvariantViolation("manifest video '" + entry.video_id +
                                 "' points at reconstruction '" +
                                 video.reconstruction->id + "'");
      }
      if (static_cast<int>(video.reconstruction->points.size()) <
          options.min_model_points) {
        result.discarded_videos.push_back(entry.video_id);
        continue;  // small models are discarded at ingestion
      }
    }
    if (entry.features) video.features = load_features(resolve(*entry.features));
    if (entry.global_descriptors) {
      video.global_descriptors =
          load_global_descriptors(resolve(*entry.global_descriptors));
    }
    if (entry.flows) video.flows = load_flows(resolve(*entry.flows));
    if (entry.narration) video.narration = load_narration(resolve(*entry.narration));
    if (entry.detections) video.detections = load_detections(resolve(*entry.detections));
    if (entry.saliency) video.saliency = load_saliency(resolve(*entry.saliency));
    truncate_video_frames(video, options.max_frames_per_video);
    validate_video(entry.video_id, video);
    result.dataset.videos.emplace(entry.video_id, std::move(video));
  }
  return result;
}

}  // namespace reconalign
