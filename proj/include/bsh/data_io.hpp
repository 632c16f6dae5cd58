#pragma once

#include <algorithm>
#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "bsh/box.hpp"
#include "bsh/common.hpp"
#include "bsh/grid.hpp"
#include "bsh/shape_labels.hpp"

namespace bsh {

inline const char* class_name(int class_id) {
  switch (class_id) {
    case 0: return "Car";
    case 1: return "Pedestrian";
    case 2: return "Cyclist";
    default: return "DontCare";
  }
}

inline int class_id_from_name(const std::string& name) {
  if (name == "Car") return 0;
  if (name == "Pedestrian") return 1;
  if (name == "Cyclist") return 2;
  return -1;
}

// Row-major 4x4 rigid transform helpers.
using Mat4 = std::array<double, 16>;

inline Mat4 mat4_identity() {
  Mat4 m{};
  m[0] = m[5] = m[10] = m[15] = 1.0;
  return m;
}

inline Mat4 mat4_mul(const Mat4& a, const Mat4& b) {
  Mat4 r{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += a[size_t(i * 4 + k)] * b[size_t(k * 4 + j)];
      r[size_t(i * 4 + j)] = s;
    }
  return r;
}

// Inverse of a rigid transform (rotation + translation).
inline Mat4 mat4_rigid_inverse(const Mat4& m) {
  Mat4 r = mat4_identity();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[size_t(i * 4 + j)] = m[size_t(j * 4 + i)];
  for (int i = 0; i < 3; ++i) {
    double t = 0;
    for (int j = 0; j < 3; ++j) t += r[size_t(i * 4 + j)] * m[size_t(j * 4 + 3)];
    r[size_t(i * 4 + 3)] = -t;
  }
  return r;
}

inline std::array<double, 3> mat4_apply(const Mat4& m, double x, double y, double z,
                                        double w = 1.0) {
  return {m[0] * x + m[1] * y + m[2] * z + m[3] * w,
          m[4] * x + m[5] * y + m[6] * z + m[7] * w,
          m[8] * x + m[9] * y + m[10] * z + m[11] * w};
}

struct Calib {
  Mat4 rect = mat4_identity();          // R0_rect as 4x4
  Mat4 velo_to_cam = mat4_identity();   // Tr_velo_to_cam as 4x4
  bool valid = false;

  Mat4 velo_to_rect() const { return mat4_mul(rect, velo_to_cam); }
  Mat4 rect_to_velo() const { return mat4_rigid_inverse(velo_to_rect()); }

  // Nominal KITTI sensor arrangement, used by the synthetic writer.
  static Calib nominal() {
    Calib c;
    c.valid = true;
    c.velo_to_cam = {0, -1, 0, 0,
                     0, 0, -1, 0,
                     1, 0, 0, 0,
                     0, 0, 0, 1};
    return c;
  }
};

struct ObjectLabel {
  int class_id = -1;
  std::string type = "DontCare";
  Box3D box;  // LiDAR frame
  double truncated = 0.0;
  int occluded = 0;
  double alpha = -10.0;
  std::array<double, 4> bbox2d = {-1.0, -1.0, -1.0, -1.0};
};

struct Frame {
  std::string id;
  std::vector<Point4> points;
  std::vector<ObjectLabel> objects;        // real class labels
  std::vector<Box3D> ignore_regions;       // DontCare boxes with valid dims
  Calib calib;
};

// ---- velodyne binary ----

inline std::vector<Point4> read_velodyne(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw data_error("cannot read velodyne file: " + path);
  const std::streamoff bytes = f.tellg();
  if (bytes % 16 != 0)
    throw data_error("truncated velodyne file " + path + " at byte offset " +
                     std::to_string(bytes - bytes % 16) + " (" + std::to_string(bytes) +
                     " bytes total)");
  f.seekg(0);
  std::vector<float> raw(size_t(bytes) / 4);
  f.read(reinterpret_cast<char*>(raw.data()), bytes);
  if (!f) throw data_error("short read on velodyne file: " + path);
  std::vector<Point4> pts(raw.size() / 4);
  for (size_t i = 0; i < pts.size(); ++i) {
    pts[i] = {double(raw[4 * i]), double(raw[4 * i + 1]), double(raw[4 * i + 2]),
              double(raw[4 * i + 3])};
  }
  return pts;
}

inline void write_velodyne(const std::string& path, const std::vector<Point4>& pts) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write velodyne file: " + path);
  std::vector<float> raw(pts.size() * 4);
  for (size_t i = 0; i < pts.size(); ++i) {
    raw[4 * i] = float(pts[i].x);
    raw[4 * i + 1] = float(pts[i].y);
    raw[4 * i + 2] = float(pts[i].z);
    raw[4 * i + 3] = float(pts[i].r);
  }
  f.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size() * 4));
  if (!f) throw data_error("short write on velodyne file: " + path);
}

// ---- calibration ----

inline Calib read_calib(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw data_error("cannot read calib file: " + path);
  Calib c;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "R0_rect:" || key == "R_rect:") {
      Mat4 m = mat4_identity();
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) ss >> m[size_t(i * 4 + j)];
      if (!ss) throw data_error("bad R0_rect in " + path);
      c.rect = m;
      c.valid = true;
    } else if (key == "Tr_velo_to_cam:") {
      Mat4 m = mat4_identity();
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) ss >> m[size_t(i * 4 + j)];
      if (!ss) throw data_error("bad Tr_velo_to_cam in " + path);
      c.velo_to_cam = m;
      c.valid = true;
    }
  }
  return c;
}

inline void write_calib(const std::string& path, const Calib& c) {
  std::ofstream f(path);
  if (!f) throw data_error("cannot write calib file: " + path);
  for (const char* p : {"P0:", "P1:", "P2:", "P3:"}) {
    f << p;
    for (int i = 0; i < 12; ++i) f << ' ' << (i % 5 == 0 ? 1 : 0);
    f << '\n';
  }
  f << "R0_rect:";
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) f << ' ' << format_double(c.rect[size_t(i * 4 + j)]);
  f << '\n';
  f << "Tr_velo_to_cam:";
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) f << ' ' << format_double(c.velo_to_cam[size_t(i * 4 + j)]);
  f << '\n';
}

// ---- labels ----

// Camera-frame KITTI label -> LiDAR-frame box. The camera (x,y,z) is the
// bottom face center; ry rotates about the camera Y axis.
inline Box3D camera_label_to_lidar(double h, double w, double l, double x, double y, double z,
                                   double ry, const Calib& calib) {
  const Mat4 inv = calib.rect_to_velo();
  const auto c = mat4_apply(inv, x, y, z);
  const auto d = mat4_apply(inv, std::cos(ry), 0.0, -std::sin(ry), 0.0);
  Box3D b;
  b.x = c[0];
  b.y = c[1];
  b.z = c[2] + 0.5 * h;
  b.l = l;
  b.w = w;
  b.h = h;
  b.theta = normalize_angle(std::atan2(d[1], d[0]));
  return b;
}

inline void lidar_box_to_camera(const Box3D& b, const Calib& calib, double& h, double& w,
                                double& l, double& x, double& y, double& z, double& ry) {
  const Mat4 fwd = calib.velo_to_rect();
  const auto c = mat4_apply(fwd, b.x, b.y, b.z - 0.5 * b.h);
  const auto d = mat4_apply(fwd, std::cos(b.theta), std::sin(b.theta), 0.0, 0.0);
  h = b.h;
  w = b.w;
  l = b.l;
  x = c[0];
  y = c[1];
  z = c[2];
  ry = normalize_angle(std::atan2(-d[2], d[0]));
}

struct LabelFile {
  std::vector<ObjectLabel> objects;
  std::vector<Box3D> ignore_regions;
};

inline LabelFile read_labels(const std::string& path, const Calib& calib) {
  std::ifstream f(path);
  if (!f) throw data_error("cannot read label file: " + path);
  LabelFile out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<std::string> fields;
    std::string tok;
    while (ss >> tok) fields.push_back(tok);
    if (fields.size() != 15)
      throw data_error("label parse error " + path + ":" + std::to_string(line_no) +
                       ": expected 15 fields, got " + std::to_string(fields.size()));
    ObjectLabel ol;
    ol.type = fields[0];
    ol.class_id = class_id_from_name(ol.type);
    ol.truncated = parse_double(fields[1]);
    ol.occluded = int(parse_double(fields[2]));
    ol.alpha = parse_double(fields[3]);
    for (int i = 0; i < 4; ++i) ol.bbox2d[size_t(i)] = parse_double(fields[size_t(4 + i)]);
    const double h = parse_double(fields[8]);
    const double w = parse_double(fields[9]);
    const double l = parse_double(fields[10]);
    const double x = parse_double(fields[11]);
    const double y = parse_double(fields[12]);
    const double z = parse_double(fields[13]);
    const double ry = parse_double(fields[14]);
    const bool has_box = h > 0 && w > 0 && l > 0;
    if (has_box) ol.box = camera_label_to_lidar(h, w, l, x, y, z, ry, calib);
    if (ol.type == "DontCare" || ol.class_id < 0) {
      if (has_box) out.ignore_regions.push_back(ol.box);
      continue;
    }
    out.objects.push_back(std::move(ol));
  }
  return out;
}

inline void write_labels(const std::string& path, const Frame& frame) {
  std::ofstream f(path);
  if (!f) throw data_error("cannot write label file: " + path);
  auto emit = [&](const std::string& type, double trunc, int occ, double alpha,
                  const std::array<double, 4>& bbox, const Box3D& b) {
    double h, w, l, x, y, z, ry;
    lidar_box_to_camera(b, frame.calib, h, w, l, x, y, z, ry);
    f << type << ' ' << format_double(trunc) << ' ' << occ << ' ' << format_double(alpha);
    for (double v : bbox) f << ' ' << format_double(v);
    f << ' ' << format_double(h) << ' ' << format_double(w) << ' ' << format_double(l) << ' '
      << format_double(x) << ' ' << format_double(y) << ' ' << format_double(z) << ' '
      << format_double(ry) << '\n';
  };
  for (const ObjectLabel& ol : frame.objects)
    emit(ol.type, ol.truncated, ol.occluded, ol.alpha, ol.bbox2d, ol.box);
  for (const Box3D& b : frame.ignore_regions)
    emit("DontCare", -1, -1, -10, {-1, -1, -1, -1}, b);
}

// ---- dataset directory layout ----

inline void write_frame(const std::string& dir, const Frame& frame) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "velodyne");
  fs::create_directories(fs::path(dir) / "label_2");
  fs::create_directories(fs::path(dir) / "calib");
  write_velodyne((fs::path(dir) / "velodyne" / (frame.id + ".bin")).string(), frame.points);
  write_labels((fs::path(dir) / "label_2" / (frame.id + ".txt")).string(), frame);
  write_calib((fs::path(dir) / "calib" / (frame.id + ".txt")).string(), frame.calib);
}

inline std::vector<std::string> list_frame_ids(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> ids;
  const fs::path vdir = fs::path(dir) / "velodyne";
  if (!fs::exists(vdir)) throw data_error("no velodyne/ directory under " + dir);
  for (const auto& e : fs::directory_iterator(vdir)) {
    if (e.path().extension() == ".bin") ids.push_back(e.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline Frame read_frame(const std::string& dir, const std::string& id,
                        bool with_labels = true) {
  namespace fs = std::filesystem;
  Frame fr;
  fr.id = id;
  fr.points = read_velodyne((fs::path(dir) / "velodyne" / (id + ".bin")).string());
  const std::string calib_path = (fs::path(dir) / "calib" / (id + ".txt")).string();
  if (fs::exists(calib_path)) fr.calib = read_calib(calib_path);
  if (with_labels) {
    LabelFile lf =
        read_labels((fs::path(dir) / "label_2" / (id + ".txt")).string(), fr.calib);
    fr.objects = std::move(lf.objects);
    fr.ignore_regions = std::move(lf.ignore_regions);
  }
  return fr;
}

// ---- shape bank file ----

inline void save_bank(const std::string& path, const ShapeBank& bank) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot write shape bank: " + path);
  const char magic[4] = {'B', 'S', 'H', 'B'};
  f.write(magic, 4);
  auto put_u32 = [&](std::uint32_t v) {
    char b[4] = {char(v), char(v >> 8), char(v >> 16), char(v >> 24)};
    f.write(b, 4);
  };
  put_u32(std::uint32_t(bank.entries.size()));
  for (const auto& e : bank.entries) {
    put_u32(std::uint32_t(e.class_id));
    float dims[3] = {float(e.l), float(e.w), float(e.h)};
    f.write(reinterpret_cast<const char*>(dims), 12);
    put_u32(std::uint32_t(e.points.size()));
    std::vector<float> buf(e.points.size() * 4);
    for (size_t i = 0; i < e.points.size(); ++i) {
      buf[4 * i] = float(e.points[i].x);
      buf[4 * i + 1] = float(e.points[i].y);
      buf[4 * i + 2] = float(e.points[i].z);
      buf[4 * i + 3] = float(e.points[i].r);
    }
    f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 4));
  }
}

inline ShapeBank load_bank(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw data_error("cannot read shape bank: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "BSHB", 4) != 0) throw data_error("bad bank magic: " + path);
  auto get_u32 = [&]() {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
           std::uint32_t(b[3]) << 24;
  };
  ShapeBank bank;
  const std::uint32_t count = get_u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    ShapeBankEntry e;
    e.class_id = int(get_u32());
    float dims[3];
    f.read(reinterpret_cast<char*>(dims), 12);
    e.l = dims[0];
    e.w = dims[1];
    e.h = dims[2];
    const std::uint32_t n = get_u32();
    std::vector<float> buf(size_t(n) * 4);
    f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
    if (!f) throw data_error("truncated shape bank: " + path);
    e.points.resize(n);
    for (std::uint32_t k = 0; k < n; ++k) {
      e.points[k] = {double(buf[4 * k]), double(buf[4 * k + 1]), double(buf[4 * k + 2]),
                     double(buf[4 * k + 3])};
    }
    bank.entries.push_back(std::move(e));
  }
  return bank;
}

}  // namespace bsh
