#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtm/errors.hpp"
#include "dtm/rng.hpp"
#include "dtm/schema.hpp"
#include "dtm/supervision.hpp"

namespace dtm {

/// Planar 8-bit image: pixels[c*h*w + y*w + x].
struct ImageU8 {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  static ImageU8 make(int channels, int height, int width, std::uint8_t fill = 0) {
    ImageU8 img;
    img.channels = channels;
    img.height = height;
    img.width = width;
    img.pixels.assign(static_cast<std::size_t>(channels) * height * width, fill);
    return img;
  }

  std::uint8_t& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::uint8_t at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  bool operator==(const ImageU8& o) const {
    return channels == o.channels && height == o.height && width == o.width && pixels == o.pixels;
  }
};

struct Sample {
  std::string id;
  ImageU8 image;
  std::vector<std::uint8_t> labels;  // schema attribute order
  KeypointSet keypoints;
};

struct Dataset {
  AttributeSchema schema;
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

// ---- built-in synthetic task ----

/// Schema rendered by gen_synthetic: three global tint attributes and nine
/// local accessory attributes. Every assigned joint belongs to exactly one
/// attribute and each left/right pair stays within its attribute, so mirror
/// augmentation maps the rendered accessories onto the swapped joints.
inline AttributeSchema default_schema() {
  AttributeSchema schema;
  auto global = [&schema](const std::string& name) {
    schema.attributes.push_back({name, true, {}});
  };
  auto local = [&schema](const std::string& name, std::initializer_list<const char*> joints) {
    AttributeDef def{name, false, {}};
    for (const char* j : joints) def.keypoint_ids.push_back(joint_index(j));
    schema.attributes.push_back(std::move(def));
  };
  global("tint_red");
  global("tint_green");
  global("tint_blue");
  local("hat", {"nose"});
  local("glasses", {"left_eye", "right_eye"});
  local("earrings", {"left_ear", "right_ear"});
  local("scarf", {"left_shoulder", "right_shoulder"});
  local("elbow_pads", {"left_elbow", "right_elbow"});
  local("gloves", {"left_wrist", "right_wrist"});
  local("belt", {"left_hip", "right_hip"});
  local("knee_pads", {"left_knee", "right_knee"});
  local("boots", {"left_ankle", "right_ankle"});
  schema.validate();
  return schema;
}

struct SynthConfig {
  int height = 128;
  int width = 96;
  int n_train = 4000;
  int n_val = 500;
  int n_test = 1000;
  std::uint64_t seed = 1234;
  double blob_radius = 6.0;
  double joint_jitter = 3.0;    // per-joint position jitter, pixels
  double noise_stddev = 35.0;   // additive Gaussian pixel noise
  double occlusion_prob = 0.2;  // per-joint invisibility
  double positive_rate = 0.35;  // per-attribute Bernoulli rate
  double tint_strength = 20.0;  // added to one channel when a tint is positive
  int down_stride = 8;          // image dims must divide by the model's stride
};

namespace detail {

struct Rgb {
  std::uint8_t r, g, b;
};

/// One well-separated color per local attribute, in default_schema() order.
inline const std::array<Rgb, 9>& accessory_colors() {
  static const std::array<Rgb, 9> colors = {{
      {200, 30, 30},    // hat
      {30, 200, 30},    // glasses
      {30, 30, 220},    // earrings
      {220, 200, 30},   // scarf
      {200, 30, 200},   // elbow_pads
      {30, 200, 200},   // gloves
      {240, 130, 20},   // belt
      {130, 20, 240},   // knee_pads
      {245, 245, 245},  // boots
  }};
  return colors;
}

/// Upright stick figure in a body-centred frame (x right, y down), before
/// per-sample scale/offset/jitter.
inline const std::array<std::pair<double, double>, kNumJoints>& canonical_pose() {
  static const std::array<std::pair<double, double>, kNumJoints> pose = {{
      {0.0, -40.0},    // nose
      {4.0, -44.0},    // left_eye
      {-4.0, -44.0},   // right_eye
      {8.0, -41.0},    // left_ear
      {-8.0, -41.0},   // right_ear
      {14.0, -25.0},   // left_shoulder
      {-14.0, -25.0},  // right_shoulder
      {20.0, -5.0},    // left_elbow
      {-20.0, -5.0},   // right_elbow
      {24.0, 12.0},    // left_wrist
      {-24.0, 12.0},   // right_wrist
      {9.0, 5.0},      // left_hip
      {-9.0, 5.0},     // right_hip
      {10.0, 25.0},    // left_knee
      {-10.0, 25.0},   // right_knee
      {11.0, 45.0},    // left_ankle
      {-11.0, 45.0},   // right_ankle
  }};
  return pose;
}

inline const std::vector<std::pair<int, int>>& skeleton_edges() {
  static const std::vector<std::pair<int, int>> edges = {
      {5, 6},  {5, 7},   {7, 9},   {6, 8},   {8, 10},  {5, 11},
      {6, 12}, {11, 12}, {11, 13}, {13, 15}, {12, 14}, {14, 16},
  };
  return edges;
}

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::min(255.0, std::max(0.0, std::round(v))));
}

inline void set_pixel(ImageU8& img, int x, int y, Rgb color) {
  if (x < 0 || x >= img.width || y < 0 || y >= img.height) return;
  img.at(0, y, x) = color.r;
  img.at(1, y, x) = color.g;
  img.at(2, y, x) = color.b;
}

inline void draw_line(ImageU8& img, double x0, double y0, double x1, double y1, Rgb color) {
  const int steps = 1 + 2 * static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0)));
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    set_pixel(img, static_cast<int>(std::round(x0 + t * (x1 - x0))),
              static_cast<int>(std::round(y0 + t * (y1 - y0))), color);
  }
}

inline void draw_disc(ImageU8& img, double cx, double cy, double radius, Rgb color) {
  const int x_lo = static_cast<int>(std::floor(cx - radius)), x_hi = static_cast<int>(std::ceil(cx + radius));
  const int y_lo = static_cast<int>(std::floor(cy - radius)), y_hi = static_cast<int>(std::ceil(cy + radius));
  for (int y = y_lo; y <= y_hi; ++y)
    for (int x = x_lo; x <= x_hi; ++x) {
      const double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy <= radius * radius) set_pixel(img, x, y, color);
    }
}

inline void draw_circle(ImageU8& img, double cx, double cy, double radius, Rgb color) {
  const int steps = std::max(16, static_cast<int>(8 * radius));
  for (int i = 0; i < steps; ++i) {
    const double a = 2.0 * 3.14159265358979323846 * i / steps;
    set_pixel(img, static_cast<int>(std::round(cx + radius * std::cos(a))),
              static_cast<int>(std::round(cy + radius * std::sin(a))), color);
  }
}

}  // namespace detail

/// Deterministic synthetic sample. Each sample is produced from its own RNG
/// stream keyed by (seed, split, index), with a fixed draw order, so the
/// result does not depend on generation order or batching.
inline Sample synth_sample(const SynthConfig& cfg, const AttributeSchema& schema, int split_id, int index) {
  Rng rng(derive_seed(cfg.seed, "synth.sample", static_cast<std::uint64_t>(split_id),
                      static_cast<std::uint64_t>(index)));

  // Draw order: pose scale/offset, per-joint jitter, visibility, labels,
  // background shade, then pixel noise. Changing it changes the dataset.
  const double scale = rng.uniform(0.8, 1.1);
  const double off_x = cfg.width / 2.0 + rng.uniform(-6.0, 6.0);
  const double off_y = cfg.height / 2.0 + rng.uniform(-6.0, 6.0);

  Sample s;
  const auto& pose = detail::canonical_pose();
  for (int j = 0; j < kNumJoints; ++j) {
    s.keypoints.joints[j].x = off_x + scale * pose[j].first + rng.uniform(-cfg.joint_jitter, cfg.joint_jitter);
    s.keypoints.joints[j].y = off_y + scale * pose[j].second + rng.uniform(-cfg.joint_jitter, cfg.joint_jitter);
  }
  for (int j = 0; j < kNumJoints; ++j) s.keypoints.joints[j].visible = !rng.bernoulli(cfg.occlusion_prob);

  s.labels.resize(static_cast<std::size_t>(schema.total()));
  for (int a = 0; a < schema.total(); ++a) s.labels[a] = rng.bernoulli(cfg.positive_rate) ? 1 : 0;

  // A positive accessory must stay observable: if every assigned joint was
  // occluded, restore the first one.
  for (int a = 0; a < schema.total(); ++a) {
    const auto& def = schema.attributes[a];
    if (def.is_global || !s.labels[a]) continue;
    bool any_visible = false;
    for (int j : def.keypoint_ids) any_visible = any_visible || s.keypoints.joints[j].visible;
    if (!any_visible) s.keypoints.joints[def.keypoint_ids.front()].visible = true;
  }

  const double bg = rng.uniform(105.0, 150.0);

  s.image = ImageU8::make(3, cfg.height, cfg.width);
  double shade[3] = {bg, bg, bg};
  const std::vector<int> globals = schema.global_indices();
  for (std::size_t g = 0; g < globals.size() && g < 3; ++g)
    if (s.labels[globals[g]]) shade[g] += cfg.tint_strength;
  for (int c = 0; c < 3; ++c) {
    const std::uint8_t v = detail::clamp_u8(shade[c]);
    std::fill_n(s.image.pixels.begin() + static_cast<std::size_t>(c) * cfg.height * cfg.width,
                static_cast<std::size_t>(cfg.height) * cfg.width, v);
  }

  const detail::Rgb body{60, 60, 60};
  for (const auto& [a, b] : detail::skeleton_edges())
    detail::draw_line(s.image, s.keypoints.joints[a].x, s.keypoints.joints[a].y, s.keypoints.joints[b].x,
                      s.keypoints.joints[b].y, body);
  const double head_cx = (s.keypoints.joints[3].x + s.keypoints.joints[4].x) / 2.0;
  const double head_cy = s.keypoints.joints[0].y - 2.0 * scale;
  detail::draw_circle(s.image, head_cx, head_cy, 8.0 * scale, body);

  const std::vector<int> locals = schema.local_indices();
  for (std::size_t li = 0; li < locals.size(); ++li) {
    const int a = locals[li];
    if (!s.labels[a]) continue;
    const detail::Rgb color = detail::accessory_colors()[li % detail::accessory_colors().size()];
    for (int j : schema.attributes[a].keypoint_ids) {
      const auto& kp = s.keypoints.joints[j];
      if (kp.visible) detail::draw_disc(s.image, kp.x, kp.y, cfg.blob_radius, color);
    }
  }

  if (cfg.noise_stddev > 0) {
    for (std::size_t i = 0; i < s.image.pixels.size(); ++i)
      s.image.pixels[i] =
          detail::clamp_u8(s.image.pixels[i] + rng.normal(0.0, cfg.noise_stddev));
  }

  char buf[32];
  const char* split_name = split_id == 0 ? "train" : split_id == 1 ? "val" : "test";
  std::snprintf(buf, sizeof(buf), "%s_%06d", split_name, index);
  s.id = buf;
  return s;
}

inline Dataset gen_synthetic(const SynthConfig& cfg) {
  if (cfg.down_stride > 0 && (cfg.height % cfg.down_stride != 0 || cfg.width % cfg.down_stride != 0))
    throw ConfigError("gen_synthetic: " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) +
                      " is not divisible by the down stride " + std::to_string(cfg.down_stride));
  Dataset ds;
  ds.schema = default_schema();
  ds.train.reserve(static_cast<std::size_t>(cfg.n_train));
  ds.val.reserve(static_cast<std::size_t>(cfg.n_val));
  ds.test.reserve(static_cast<std::size_t>(cfg.n_test));
  for (int i = 0; i < cfg.n_train; ++i) ds.train.push_back(synth_sample(cfg, ds.schema, 0, i));
  for (int i = 0; i < cfg.n_val; ++i) ds.val.push_back(synth_sample(cfg, ds.schema, 1, i));
  for (int i = 0; i < cfg.n_test; ++i) ds.test.push_back(synth_sample(cfg, ds.schema, 2, i));
  return ds;
}

// ---- augmentation ----

/// Horizontal flip: image mirrored, keypoint x reflected, left/right joints
/// swapped. Labels are untouched.
inline Sample mirror_sample(const Sample& s) {
  Sample out = s;
  const int w = s.image.width;
  for (int c = 0; c < s.image.channels; ++c)
    for (int y = 0; y < s.image.height; ++y)
      for (int x = 0; x < w; ++x) out.image.at(c, y, x) = s.image.at(c, y, w - 1 - x);
  for (int j = 0; j < kNumJoints; ++j) out.keypoints.joints[j].x = (w - 1) - s.keypoints.joints[j].x;
  for (const auto& [l, r] : mirror_joint_pairs()) std::swap(out.keypoints.joints[l], out.keypoints.joints[r]);
  return out;
}

/// Replicate-pad the image by `pad` on every side, then take the original-size
/// window whose top-left corner sits at (dx, dy) in the padded image, with
/// dx, dy in [0, 2*pad]. Keypoints shifted accordingly; ones leaving the frame
/// are marked invisible (coordinates kept).
inline Sample crop_sample(const Sample& s, int dx, int dy, int pad) {
  if (dx < 0 || dx > 2 * pad || dy < 0 || dy > 2 * pad)
    throw ConfigError("crop_sample: offset (" + std::to_string(dx) + ", " + std::to_string(dy) +
                      ") outside [0, " + std::to_string(2 * pad) + "]");
  Sample out = s;
  const int h = s.image.height, w = s.image.width;
  for (int c = 0; c < s.image.channels; ++c)
    for (int y = 0; y < h; ++y) {
      const int sy = std::clamp(y + dy - pad, 0, h - 1);
      for (int x = 0; x < w; ++x) {
        const int sx = std::clamp(x + dx - pad, 0, w - 1);
        out.image.at(c, y, x) = s.image.at(c, sy, sx);
      }
    }
  for (int j = 0; j < kNumJoints; ++j) {
    auto& kp = out.keypoints.joints[j];
    kp.x = s.keypoints.joints[j].x - (dx - pad);
    kp.y = s.keypoints.joints[j].y - (dy - pad);
    if (kp.x < 0 || kp.x >= w || kp.y < 0 || kp.y >= h) kp.visible = false;
  }
  return out;
}

/// Training-time augmentation; the draw order (flip, dx, dy) is fixed so a
/// given RNG stream always produces the same transform.
inline Sample augment(const Sample& s, Rng& rng, int pad = 10) {
  const bool flip = rng.bernoulli(0.5);
  const int dx = rng.uniform_int(0, 2 * pad);
  const int dy = rng.uniform_int(0, 2 * pad);
  Sample out = flip ? mirror_sample(s) : s;
  return crop_sample(out, dx, dy, pad);
}

// ---- on-disk dataset format ----

struct LoadReport {
  int missing_keypoints = 0;  // samples that had no keypoints row
  int orphan_rows = 0;        // annotation/keypoint rows with unknown ids
};

namespace detail {

inline void write_ppm(const ImageU8& img, const std::string& path) {
  if (img.channels != 3) throw IoError("write_ppm: need 3 channels, got " + std::to_string(img.channels));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write image '" + path + "'");
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) row[static_cast<std::size_t>(x) * 3 + c] = img.at(c, y, x);
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw IoError("failed writing image '" + path + "'");
}

inline ImageU8 read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image '" + path + "'");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
    throw IoError("'" + path + "' is not a P6/255 image");
  is.get();  // single whitespace after the header
  ImageU8 img = ImageU8::make(3, h, w);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!is) throw IoError("'" + path + "': truncated pixel data");
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = row[static_cast<std::size_t>(x) * 3 + c];
  }
  return img;
}

inline std::vector<std::string> csv_fields(const std::string& line) { return split(line, ','); }

inline IoError row_error(const std::string& file, int line_no, const std::string& what) {
  return IoError(file + ":" + std::to_string(line_no) + ": " + what);
}

}  // namespace detail

inline void save_schema(const AttributeSchema& schema, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path + "'");
  for (const auto& a : schema.attributes) {
    os << a.name << ":" << (a.is_global ? "global" : "local");
    if (!a.is_global) {
      os << ":";
      for (std::size_t i = 0; i < a.keypoint_ids.size(); ++i)
        os << (i ? "," : "") << joint_names()[a.keypoint_ids[i]];
    }
    os << "\n";
  }
}

inline AttributeSchema load_schema(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open '" + path + "'");
  AttributeSchema schema;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto parts = detail::split(t, ':');
    if (parts.size() < 2) throw detail::row_error(path, line_no, "expected name:global or name:local:joints");
    AttributeDef def;
    def.name = detail::trim(parts[0]);
    const std::string kind = detail::trim(parts[1]);
    if (kind == "global") {
      if (parts.size() != 2) throw detail::row_error(path, line_no, "global attribute takes no joints");
      def.is_global = true;
    } else if (kind == "local") {
      if (parts.size() != 3) throw detail::row_error(path, line_no, "local attribute needs a joint list");
      def.is_global = false;
      for (const auto& j : detail::split(parts[2], ','))
        def.keypoint_ids.push_back(joint_index(detail::trim(j)));
    } else {
      throw detail::row_error(path, line_no, "unknown attribute kind '" + kind + "'");
    }
    schema.attributes.push_back(std::move(def));
  }
  schema.validate();
  return schema;
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  save_schema(ds.schema, (fs::path(dir) / "schema.txt").string());

  std::ofstream manifest((fs::path(dir) / "manifest.csv").string());
  std::ofstream ann((fs::path(dir) / "annotations.csv").string());
  std::ofstream kps((fs::path(dir) / "keypoints.csv").string());
  if (!manifest || !ann || !kps) throw IoError("cannot write dataset files under '" + dir + "'");

  manifest << "id,split\n";
  ann << "id";
  for (const auto& a : ds.schema.attributes) ann << "," << a.name;
  ann << "\n";
  kps << "id";
  for (const auto& name : joint_names()) kps << "," << name << "_x," << name << "_y," << name << "_v";
  kps << "\n";

  char buf[64];
  auto write_split = [&](const std::vector<Sample>& samples, const char* split) {
    for (const auto& s : samples) {
      manifest << s.id << "," << split << "\n";
      ann << s.id;
      for (std::uint8_t v : s.labels) ann << "," << static_cast<int>(v);
      ann << "\n";
      kps << s.id;
      for (const auto& kp : s.keypoints.joints) {
        std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,%d", kp.x, kp.y, kp.visible ? 1 : 0);
        kps << buf;
      }
      kps << "\n";
      detail::write_ppm(s.image, (fs::path(dir) / "images" / (s.id + ".ppm")).string());
    }
  };
  write_split(ds.train, "train");
  write_split(ds.val, "val");
  write_split(ds.test, "test");
}

inline Dataset load_dataset(const std::string& dir, LoadReport* report = nullptr) {
  namespace fs = std::filesystem;
  LoadReport local_report;
  LoadReport& rep = report ? *report : local_report;

  Dataset ds;
  ds.schema = load_schema((fs::path(dir) / "schema.txt").string());

  const std::string manifest_path = (fs::path(dir) / "manifest.csv").string();
  std::ifstream manifest(manifest_path);
  if (!manifest) throw IoError("cannot open '" + manifest_path + "'");
  std::string line;
  int line_no = 0;
  std::getline(manifest, line);
  ++line_no;
  if (detail::trim(line) != "id,split") throw detail::row_error(manifest_path, 1, "bad header '" + line + "'");

  std::vector<std::pair<std::string, int>> order;  // id -> split id
  std::unordered_map<std::string, std::size_t> index_of;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::csv_fields(line);
    if (f.size() != 2) throw detail::row_error(manifest_path, line_no, "expected id,split");
    int split;
    if (f[1] == "train")
      split = 0;
    else if (f[1] == "val")
      split = 1;
    else if (f[1] == "test")
      split = 2;
    else
      throw detail::row_error(manifest_path, line_no, "unknown split '" + f[1] + "'");
    index_of[f[0]] = order.size();
    order.emplace_back(f[0], split);
  }

  std::vector<std::vector<std::uint8_t>> labels(order.size());
  std::vector<KeypointSet> keypoints(order.size());
  std::vector<bool> has_kps(order.size(), false), has_labels(order.size(), false);
  for (auto& ks : keypoints)
    for (auto& kp : ks.joints) kp = {0.0, 0.0, false};

  const std::string ann_path = (fs::path(dir) / "annotations.csv").string();
  std::ifstream ann(ann_path);
  if (!ann) throw IoError("cannot open '" + ann_path + "'");
  line_no = 0;
  std::getline(ann, line);
  ++line_no;
  {
    const auto f = detail::csv_fields(detail::trim(line));
    if (f.size() != static_cast<std::size_t>(ds.schema.total()) + 1)
      throw detail::row_error(ann_path, 1, "header lists " + std::to_string(f.size() - 1) + " attributes, schema has " +
                                               std::to_string(ds.schema.total()));
    for (int a = 0; a < ds.schema.total(); ++a)
      if (f[static_cast<std::size_t>(a) + 1] != ds.schema.attributes[a].name)
        throw detail::row_error(ann_path, 1, "attribute column '" + f[static_cast<std::size_t>(a) + 1] +
                                                 "' does not match schema ('" + ds.schema.attributes[a].name + "')");
  }
  while (std::getline(ann, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::csv_fields(line);
    if (f.size() != static_cast<std::size_t>(ds.schema.total()) + 1)
      throw detail::row_error(ann_path, line_no,
                              "expected " + std::to_string(ds.schema.total() + 1) + " fields, got " +
                                  std::to_string(f.size()));
    auto it = index_of.find(f[0]);
    if (it == index_of.end()) {
      ++rep.orphan_rows;
      continue;
    }
    auto& row = labels[it->second];
    row.resize(static_cast<std::size_t>(ds.schema.total()));
    for (int a = 0; a < ds.schema.total(); ++a) {
      const std::string& v = f[static_cast<std::size_t>(a) + 1];
      if (v != "0" && v != "1") throw detail::row_error(ann_path, line_no, "label '" + v + "' is not 0/1");
      row[static_cast<std::size_t>(a)] = v == "1" ? 1 : 0;
    }
    has_labels[it->second] = true;
  }

  const std::string kps_path = (fs::path(dir) / "keypoints.csv").string();
  std::ifstream kps(kps_path);
  if (!kps) throw IoError("cannot open '" + kps_path + "'");
  line_no = 0;
  std::getline(kps, line);
  ++line_no;
  while (std::getline(kps, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::csv_fields(line);
    if (f.size() != 1 + 3 * static_cast<std::size_t>(kNumJoints))
      throw detail::row_error(kps_path, line_no,
                              "expected " + std::to_string(1 + 3 * kNumJoints) + " fields, got " +
                                  std::to_string(f.size()));
    auto it = index_of.find(f[0]);
    if (it == index_of.end()) {
      ++rep.orphan_rows;
      continue;
    }
    auto& ks = keypoints[it->second];
    for (int j = 0; j < kNumJoints; ++j) {
      try {
        ks.joints[j].x = std::stod(f[1 + 3 * static_cast<std::size_t>(j)]);
        ks.joints[j].y = std::stod(f[2 + 3 * static_cast<std::size_t>(j)]);
      } catch (const std::exception&) {
        throw detail::row_error(kps_path, line_no, "bad coordinate for joint '" + joint_names()[j] + "'");
      }
      const std::string& v = f[3 + 3 * static_cast<std::size_t>(j)];
      if (v != "0" && v != "1") throw detail::row_error(kps_path, line_no, "visibility '" + v + "' is not 0/1");
      ks.joints[j].visible = v == "1";
    }
    has_kps[it->second] = true;
  }

  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& [id, split] = order[i];
    if (!has_labels[i]) throw IoError("dataset '" + dir + "': sample '" + id + "' has no annotation row");
    if (!has_kps[i]) ++rep.missing_keypoints;
    Sample s;
    s.id = id;
    s.labels = labels[i];
    s.keypoints = keypoints[i];
    s.image = detail::read_ppm((fs::path(dir) / "images" / (id + ".ppm")).string());
    (split == 0 ? ds.train : split == 1 ? ds.val : ds.test).push_back(std::move(s));
  }
  return ds;
}

}  // namespace dtm
