#include "veil/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "veil/error.hpp"

namespace veil {

using nlohmann::ordered_json;

namespace {

constexpr double kBackground = 0.5;
constexpr double kFaceValue = 0.82;
constexpr double kEyeValue = 0.08;
constexpr double kBrowValue = 0.15;
constexpr double kNoseValue = 0.30;
constexpr double kMouthValue = 0.10;

struct IdentityFactors {
  double face_rx, face_ry, eye_dx, eye_y, nose_len;
};

struct EmotionFactors {
  double mouth_curve, mouth_open, brow_tilt;
};

double lerp(double lo, double hi, double u) { return lo + (hi - lo) * u; }

double coverage(double signed_dist) { return std::clamp(0.5 - signed_dist, 0.0, 1.0); }

double mix(double under, double over, double alpha) { return under + (over - under) * alpha; }

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double abx = bx - ax, aby = by - ay;
  const double apx = px - ax, apy = py - ay;
  const double len2 = abx * abx + aby * aby;
  const double t = len2 > 0.0 ? std::clamp((apx * abx + apy * aby) / len2, 0.0, 1.0) : 0.0;
  const double dx = apx - t * abx, dy = apy - t * aby;
  return std::sqrt(dx * dx + dy * dy);
}

// Normalized identity-factor coordinates in the unit cube; degenerate
// (zero-width) ranges collapse to a point.
std::array<double, 5> normalized(const IdentityFactors& f, const SyntheticConfig& c) {
  auto nrm = [](double v, const FactorRange& r) {
    const double w = r.width();
    return w > 1e-12 ? (v - r.lo) / w : 0.0;
  };
  return {nrm(f.face_rx, c.face_rx), nrm(f.face_ry, c.face_ry), nrm(f.eye_dx, c.eye_dx),
          nrm(f.eye_y, c.eye_y), nrm(f.nose_len, c.nose_len)};
}

double factor_distance(const std::array<double, 5>& a, const std::array<double, 5>& b) {
  double acc = 0.0;
  for (int i = 0; i < 5; ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

EmotionFactors emotion_prototype(const SyntheticConfig& c, int k) {
  const double u = c.num_emotions == 1 ? 0.5 : static_cast<double>(k) / (c.num_emotions - 1);
  const double tri = 1.0 - std::abs(2.0 * u - 1.0);
  return {lerp(c.mouth_curve.lo, c.mouth_curve.hi, u), lerp(c.mouth_open.lo, c.mouth_open.hi, tri),
          lerp(c.brow_tilt.hi, c.brow_tilt.lo, u)};
}

LabeledImage render_face(const SyntheticConfig& cfg, const IdentityFactors& id,
                         const EmotionFactors& emo, double off_x, double off_y) {
  const int n = cfg.image_size;
  const double sc = n / 48.0;  // geometry parameters are calibrated for 48px
  LabeledImage img;
  img.width = n;
  img.height = n;
  img.pixels.assign(static_cast<std::size_t>(n) * n, kBackground);

  const double cx = (n - 1) / 2.0 + off_x * sc;
  const double cy = (n - 1) / 2.0 + 1.5 * sc + off_y * sc;
  const double rx = id.face_rx * sc, ry = id.face_ry * sc;
  const double eye_y = cy + (id.eye_y - 25.0) * sc;
  const double eye_l = cx - id.eye_dx * sc, eye_r = cx + id.eye_dx * sc;
  const double eye_rad = 1.7 * sc;
  const double brow_y = eye_y - 4.0 * sc;
  const double brow_hl = 2.6 * sc, brow_rad = 0.7 * sc;
  const double nose_top = eye_y + 2.2 * sc;
  const double nose_bot = nose_top + id.nose_len * sc;
  const double nose_rad = 0.55 * sc;
  const double mouth_y = cy + 10.2 * sc;
  const double mouth_hw = 6.3 * sc;
  const double mouth_rad = (0.5 + 0.55 * std::max(emo.mouth_open, 0.2)) * sc;

  // mouth polyline: parabola, corners move opposite to the center
  constexpr int kMouthSegs = 8;
  std::array<double, kMouthSegs + 1> mx, my;
  for (int i = 0; i <= kMouthSegs; ++i) {
    const double s = -1.0 + 2.0 * i / kMouthSegs;
    mx[static_cast<std::size_t>(i)] = cx + mouth_hw * s;
    my[static_cast<std::size_t>(i)] = mouth_y - emo.mouth_curve * (s * s - 0.5) * sc;
  }

  const double ct = std::cos(emo.brow_tilt), st = std::sin(emo.brow_tilt);

  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      double v = kBackground;

      // face ellipse
      const double ex = (px - cx) / rx, ey = (py - cy) / ry;
      const double q = std::sqrt(ex * ex + ey * ey);
      v = mix(v, kFaceValue, coverage((q - 1.0) * std::min(rx, ry)));

      // eyes
      double d = std::hypot(px - eye_l, py - eye_y) - eye_rad;
      v = mix(v, kEyeValue, coverage(d));
      d = std::hypot(px - eye_r, py - eye_y) - eye_rad;
      v = mix(v, kEyeValue, coverage(d));

      // brows, mirrored tilt
      d = segment_distance(px, py, eye_l - brow_hl * ct, brow_y + brow_hl * st,
                           eye_l + brow_hl * ct, brow_y - brow_hl * st) - brow_rad;
      v = mix(v, kBrowValue, coverage(d));
      d = segment_distance(px, py, eye_r - brow_hl * ct, brow_y - brow_hl * st,
                           eye_r + brow_hl * ct, brow_y + brow_hl * st) - brow_rad;
      v = mix(v, kBrowValue, coverage(d));

      // nose
      d = segment_distance(px, py, cx, nose_top, cx, nose_bot) - nose_rad;
      v = mix(v, kNoseValue, coverage(d));

      // mouth
      double dm = 1e30;
      for (int i = 0; i < kMouthSegs; ++i) {
        dm = std::min(dm, segment_distance(px, py, mx[static_cast<std::size_t>(i)],
                                           my[static_cast<std::size_t>(i)],
                                           mx[static_cast<std::size_t>(i) + 1],
                                           my[static_cast<std::size_t>(i) + 1]));
      }
      v = mix(v, kMouthValue, coverage(dm - mouth_rad));

      img.pixels[static_cast<std::size_t>(y) * n + x] = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

std::vector<IdentityFactors> sample_identities(const SyntheticConfig& cfg) {
  // Required separation scales with the per-image jitter so that the jitter
  // cloud of one identity cannot reach another.
  auto jitter_component = [&](const FactorRange& r) {
    return cfg.jitter / std::max(r.width(), 1e-9);
  };
  double jitter_norm = 0.0;
  for (const FactorRange* r : {&cfg.face_rx, &cfg.face_ry, &cfg.eye_dx, &cfg.eye_y, &cfg.nose_len}) {
    jitter_norm += jitter_component(*r) * jitter_component(*r);
  }
  jitter_norm = std::sqrt(jitter_norm);
  const double required = std::max(4.0 * jitter_norm, 0.15);

  Rng rng(mix_seed({cfg.seed, 0x1DF5ull}));
  std::vector<IdentityFactors> out;
  std::vector<std::array<double, 5>> coords;
  for (int i = 0; i < cfg.num_identities; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 5000 && !placed; ++attempt) {
      IdentityFactors f{rng.uniform(cfg.face_rx.lo, cfg.face_rx.hi),
                        rng.uniform(cfg.face_ry.lo, cfg.face_ry.hi),
                        rng.uniform(cfg.eye_dx.lo, cfg.eye_dx.hi),
                        rng.uniform(cfg.eye_y.lo, cfg.eye_y.hi),
                        rng.uniform(cfg.nose_len.lo, cfg.nose_len.hi)};
      auto c = normalized(f, cfg);
      bool ok = true;
      for (const auto& other : coords) {
        if (factor_distance(c, other) < required) {
          ok = false;
          break;
        }
      }
      if (ok) {
        out.push_back(f);
        coords.push_back(c);
        placed = true;
      }
    }
    if (!placed) {
      throw DataError("generate_synthetic: identity factors collide; could not place identity " +
                      std::to_string(i) + " at normalized separation " + std::to_string(required) +
                      " — widen the factor ranges or reduce the jitter");
    }
  }
  return out;
}

LabeledImage bilinear_rotate(const LabeledImage& img, double angle_rad) {
  const int w = img.width, h = img.height;
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
  LabeledImage out = img;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = ca * dx + sa * dy + cx;
      const double sy = -sa * dx + ca * dy + cy;
      double v = kBackground;
      if (sx >= 0.0 && sx <= w - 1.0 && sy >= 0.0 && sy <= h - 1.0) {
        const int x0 = static_cast<int>(std::floor(sx));
        const int y0 = static_cast<int>(std::floor(sy));
        const int x1 = std::min(x0 + 1, w - 1);
        const int y1 = std::min(y0 + 1, h - 1);
        const double fx = sx - x0, fy = sy - y0;
        const double top = img.pixels[static_cast<std::size_t>(y0) * w + x0] * (1 - fx) +
                           img.pixels[static_cast<std::size_t>(y0) * w + x1] * fx;
        const double bot = img.pixels[static_cast<std::size_t>(y1) * w + x0] * (1 - fx) +
                           img.pixels[static_cast<std::size_t>(y1) * w + x1] * fx;
        v = top * (1 - fy) + bot * fy;
      }
      out.pixels[static_cast<std::size_t>(y) * w + x] = v;
    }
  }
  return out;
}

}  // namespace

int num_classes(const Dataset& data, Task task) {
  if (data.empty()) throw DataError("num_classes: empty dataset");
  std::set<int> labels;
  for (const LabeledImage& img : data) {
    const int v = label_of(img, task);
    if (v < 0) throw DataError("num_classes: negative label " + std::to_string(v));
    labels.insert(v);
  }
  const int k = *labels.rbegin() + 1;
  for (int i = 0; i < k; ++i) {
    if (!labels.count(i)) {
      throw DataError("num_classes: labels are not contiguous; class " + std::to_string(i) +
                      " is missing below max " + std::to_string(k - 1));
    }
  }
  return k;
}

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_identities < 1 || cfg.num_emotions < 1) {
    throw ConfigError("generate_synthetic: class counts must be positive");
  }
  if (cfg.images_per_cell < 1) {
    throw ConfigError("generate_synthetic: images_per_cell must be positive");
  }
  if (cfg.image_size < 16) {
    throw ConfigError("generate_synthetic: image_size must be at least 16");
  }

  const std::vector<IdentityFactors> identities = sample_identities(cfg);
  std::vector<EmotionFactors> emotions;
  for (int e = 0; e < cfg.num_emotions; ++e) emotions.push_back(emotion_prototype(cfg, e));

  Dataset out;
  out.reserve(static_cast<std::size_t>(cfg.num_identities) * cfg.num_emotions * cfg.images_per_cell);
  int index = 0;
  for (int i = 0; i < cfg.num_identities; ++i) {
    for (int e = 0; e < cfg.num_emotions; ++e) {
      for (int r = 0; r < cfg.images_per_cell; ++r, ++index) {
        Rng rng(mix_seed({cfg.seed, 0xD47Aull, static_cast<std::uint64_t>(index)}));
        IdentityFactors id = identities[static_cast<std::size_t>(i)];
        id.face_rx += rng.normal(0.0, cfg.jitter);
        id.face_ry += rng.normal(0.0, cfg.jitter);
        id.eye_dx += rng.normal(0.0, cfg.jitter);
        id.eye_y += rng.normal(0.0, cfg.jitter);
        id.nose_len += rng.normal(0.0, cfg.jitter);
        EmotionFactors emo = emotions[static_cast<std::size_t>(e)];
        emo.mouth_curve += rng.normal(0.0, cfg.jitter);
        emo.mouth_open = std::max(0.2, emo.mouth_open + rng.normal(0.0, 0.5 * cfg.jitter));
        emo.brow_tilt += rng.normal(0.0, 0.12 * cfg.jitter);
        const double off_x = cfg.center_jitter > 0.0 ? rng.uniform(-cfg.center_jitter, cfg.center_jitter) : 0.0;
        const double off_y = cfg.center_jitter > 0.0 ? rng.uniform(-cfg.center_jitter, cfg.center_jitter) : 0.0;

        LabeledImage img = render_face(cfg, id, emo, off_x, off_y);
        img.identity = i;
        img.emotion = e;
        img.group_id = index;
        out.push_back(std::move(img));
      }
    }
  }
  return out;
}

LabeledImage rotate_image(const LabeledImage& image, double degrees) {
  return bilinear_rotate(image, degrees * 3.14159265358979323846 / 180.0);
}

LabeledImage augment(const LabeledImage& image, const AugmentConfig& config, Rng& rng) {
  if (config.rotation_degrees < 0.0 || config.noise_sigma < 0.0) {
    throw ConfigError("augment: rotation range and noise sigma must be >= 0");
  }
  const double angle_deg = rng.uniform(-config.rotation_degrees, config.rotation_degrees);
  const bool do_flip = rng.bernoulli(config.flip_probability);

  LabeledImage out = rotate_image(image, angle_deg);
  if (do_flip) {
    for (int y = 0; y < out.height; ++y) {
      double* row = out.pixels.data() + static_cast<std::size_t>(y) * out.width;
      std::reverse(row, row + out.width);
    }
  }
  if (config.noise_sigma > 0.0) {
    for (double& v : out.pixels) {
      v = std::clamp(v + rng.normal(0.0, config.noise_sigma), 0.0, 1.0);
    }
  }
  return out;
}

Dataset expand_corpus(const Dataset& images, const AugmentConfig& config, std::uint64_t seed) {
  if (images.empty()) throw DataError("expand_corpus: empty input");
  if (config.target_size < static_cast<int>(images.size())) {
    throw ConfigError("expand_corpus: target_size " + std::to_string(config.target_size) +
                      " below input size " + std::to_string(images.size()));
  }
  Dataset out = images;
  out.reserve(static_cast<std::size_t>(config.target_size));
  std::size_t next_source = 0;
  while (out.size() < static_cast<std::size_t>(config.target_size)) {
    Rng rng(mix_seed({seed, 0xA06ull, static_cast<std::uint64_t>(out.size())}));
    out.push_back(augment(images[next_source], config, rng));
    next_source = (next_source + 1) % images.size();
  }
  return out;
}

FoldPlan make_group_folds(const Dataset& images, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("make_group_folds: k must be >= 2, got " + std::to_string(k));
  if (images.empty()) throw DataError("make_group_folds: empty dataset");

  // group -> (identity, emotion), first occurrence wins
  std::map<int, std::pair<int, int>> group_labels;
  for (const LabeledImage& img : images) {
    group_labels.emplace(img.group_id, std::make_pair(img.identity, img.emotion));
  }
  if (static_cast<int>(group_labels.size()) < k) {
    throw DataError("make_group_folds: " + std::to_string(group_labels.size()) +
                    " groups cannot fill " + std::to_string(k) + " folds");
  }

  // stratify by (identity, emotion) when every cell can reach every fold,
  // otherwise by identity only
  std::map<std::pair<int, int>, std::vector<int>> cells;
  for (const auto& [gid, labels] : group_labels) cells[labels].push_back(gid);
  bool full_strata = true;
  for (const auto& [key, gids] : cells) {
    if (static_cast<int>(gids.size()) < k) {
      full_strata = false;
      break;
    }
  }

  std::map<std::pair<int, int>, std::vector<int>> strata;
  if (full_strata) {
    strata = std::move(cells);
  } else {
    for (const auto& [gid, labels] : group_labels) {
      strata[{labels.first, -1}].push_back(gid);
    }
  }

  FoldPlan plan;
  plan.k = k;
  plan.stratification = full_strata ? "identity_emotion" : "identity_only";
  plan.fold_groups.assign(static_cast<std::size_t>(k), {});
  Rng rng(mix_seed({seed, 0xF01D5ull}));
  std::size_t cursor = 0;
  for (auto& [key, gids] : strata) {
    rng.shuffle(gids);
    for (int gid : gids) {
      plan.fold_groups[cursor % static_cast<std::size_t>(k)].push_back(gid);
      ++cursor;
    }
  }
  for (auto& fold : plan.fold_groups) std::sort(fold.begin(), fold.end());
  return plan;
}

void save_dataset(const Dataset& images, const std::filesystem::path& directory) {
  if (images.empty()) throw DataError("save_dataset: empty dataset");
  std::filesystem::create_directories(directory / "images");
  std::ofstream manifest(directory / "manifest.csv", std::ios::trunc);
  if (!manifest) throw DataError("save_dataset: cannot open manifest.csv");
  manifest << "filename,identity,emotion,group_id\n";

  char name[32];
  for (std::size_t i = 0; i < images.size(); ++i) {
    const LabeledImage& img = images[i];
    std::snprintf(name, sizeof(name), "img_%06zu.pgm", i);
    std::ofstream pgm(directory / "images" / name, std::ios::binary | std::ios::trunc);
    if (!pgm) throw DataError("save_dataset: cannot open " + std::string(name));
    pgm << "P5\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> bytes(img.pixels.size());
    for (std::size_t p = 0; p < img.pixels.size(); ++p) {
      const double v = std::clamp(img.pixels[p], 0.0, 1.0);
      bytes[p] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    pgm.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    manifest << name << "," << img.identity << "," << img.emotion << "," << img.group_id << "\n";
  }
}

namespace {

LabeledImage load_pgm(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("load_dataset: cannot open " + file.string());

  auto next_token = [&in, &file]() {
    std::string tok;
    for (;;) {
      int c = in.get();
      if (c == EOF) throw DataError("load_dataset: truncated PGM header in " + file.string());
      if (c == '#') {  // comment to end of line
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok += static_cast<char>(c);
    }
  };

  if (next_token() != "P5") throw DataError("load_dataset: " + file.string() + " is not a binary PGM");
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (w < 1 || h < 1) throw DataError("load_dataset: bad dimensions in " + file.string());
  if (maxval != 255) {
    throw DataError("load_dataset: " + file.string() + " has maxval " + std::to_string(maxval) +
                    ", expected 255");
  }

  LabeledImage img;
  img.width = w;
  img.height = h;
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw DataError("load_dataset: truncated pixel data in " + file.string());
  img.pixels.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& directory) {
  std::ifstream manifest(directory / "manifest.csv");
  if (!manifest) throw DataError("load_dataset: missing " + (directory / "manifest.csv").string());

  std::string line;
  if (!std::getline(manifest, line) || line != "filename,identity,emotion,group_id") {
    throw DataError("load_dataset: bad manifest header in " + (directory / "manifest.csv").string());
  }

  Dataset out;
  int line_no = 1;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string filename, identity, emotion, group;
    if (!std::getline(row, filename, ',') || !std::getline(row, identity, ',') ||
        !std::getline(row, emotion, ',') || !std::getline(row, group)) {
      throw DataError("load_dataset: malformed manifest row at " +
                      (directory / "manifest.csv").string() + ":" + std::to_string(line_no));
    }
    LabeledImage img;
    try {
      img = load_pgm(directory / "images" / filename);
      img.identity = std::stoi(identity);
      img.emotion = std::stoi(emotion);
      img.group_id = std::stoi(group);
    } catch (const DataError&) {
      throw;
    } catch (const std::exception&) {
      throw DataError("load_dataset: unparseable manifest row at " +
                      (directory / "manifest.csv").string() + ":" + std::to_string(line_no));
    }
    if (img.identity < 0 || img.emotion < 0 || img.group_id < 0) {
      throw DataError("load_dataset: out-of-range label at " + (directory / "manifest.csv").string() +
                      ":" + std::to_string(line_no));
    }
    out.push_back(std::move(img));
  }
  if (out.empty()) throw DataError("load_dataset: manifest has no rows");

  // surfaces non-contiguous label sets early, naming the gap
  num_classes(out, Task::Emotion);
  num_classes(out, Task::Identity);
  return out;
}

void save_fold_plan(const FoldPlan& plan, const std::filesystem::path& file) {
  ordered_json j;
  j["k"] = plan.k;
  j["stratification"] = plan.stratification;
  j["folds"] = plan.fold_groups;
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw DataError("save_fold_plan: cannot open " + file.string());
  out << j.dump(2) << "\n";
}

FoldPlan load_fold_plan(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("load_fold_plan: missing " + file.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError("load_fold_plan: malformed " + file.string() + ": " + e.what());
  }
  FoldPlan plan;
  plan.k = j.at("k").get<int>();
  plan.stratification = j.at("stratification").get<std::string>();
  plan.fold_groups = j.at("folds").get<std::vector<std::vector<int>>>();
  return plan;
}

}  // namespace veil
