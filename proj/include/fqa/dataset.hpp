// Scene persistence (JSONL), normalization, splitting, batching and edge
// construction.
//
// Scene line schema:
//   {"scene_id": str, "T": int,
//    "agents": [{"id": str, "immobile": bool, "pos": [[x,y] x T], "mask": [0|1 x T]}]}
// Event-log line schema:
//   {"scene_id": str, "events": [[t, kind, i, j]]}
// Floats are written with 17 significant digits so a load/save round trip is
// bit-exact.

#pragma once

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fqa/scene.hpp"

namespace fqa {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NormalizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
  // Integral-looking tokens parse back as integers, which drops the sign of -0.
  if (std::strpbrk(buf, ".eEn") == nullptr) out += ".0";
}

inline void append_json_string(std::string& out, const std::string& s) {
  out += nlohmann::json(s).dump();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// JSONL persistence

inline std::string scene_to_json_line(const Scene& scene) {
  std::string out = "{\"scene_id\":";
  detail::append_json_string(out, scene.scene_id);
  out += ",\"T\":" + std::to_string(scene.T) + ",\"agents\":[";
  for (std::size_t a = 0; a < scene.agents.size(); ++a) {
    const Agent& ag = scene.agents[a];
    if (a) out += ',';
    out += "{\"id\":";
    detail::append_json_string(out, ag.id);
    out += ",\"immobile\":";
    out += ag.immobile ? "true" : "false";
    out += ",\"pos\":[";
    for (std::size_t t = 0; t < ag.pos.size(); ++t) {
      if (t) out += ',';
      out += '[';
      detail::append_double(out, ag.pos[t][0]);
      out += ',';
      detail::append_double(out, ag.pos[t][1]);
      out += ']';
    }
    out += "],\"mask\":[";
    for (std::size_t t = 0; t < ag.mask.size(); ++t) {
      if (t) out += ',';
      out += ag.mask[t] ? '1' : '0';
    }
    out += "]}";
  }
  out += "]}";
  return out;
}

inline Scene scene_from_json(const nlohmann::json& j, std::size_t line_no) {
  auto where = [&] { return "line " + std::to_string(line_no) + ": "; };
  Scene s;
  try {
    s.scene_id = j.at("scene_id").get<std::string>();
    s.T = j.at("T").get<std::size_t>();
    for (const auto& ja : j.at("agents")) {
      Agent a;
      a.id = ja.at("id").get<std::string>();
      a.immobile = ja.at("immobile").get<bool>();
      for (const auto& p : ja.at("pos")) {
        if (p.size() != 2) throw SchemaError(where() + "position entries must be [x, y]");
        a.pos.push_back({p[0].get<double>(), p[1].get<double>()});
      }
      for (const auto& m : ja.at("mask")) {
        const int v = m.get<int>();
        if (v != 0 && v != 1) throw SchemaError(where() + "mask entries must be 0 or 1");
        a.mask.push_back(static_cast<std::uint8_t>(v));
      }
      if (a.pos.size() != s.T || a.mask.size() != s.T) {
        throw SchemaError(where() + "agent '" + a.id + "' has " + std::to_string(a.pos.size()) +
                          " positions and " + std::to_string(a.mask.size()) + " mask entries, T=" +
                          std::to_string(s.T));
      }
      s.agents.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(where() + e.what());
  }
  return s;
}

/// Streams scenes from a JSONL file one line at a time.
class SceneReader {
 public:
  explicit SceneReader(const std::string& path) : in_(path) {
    if (!in_) throw std::runtime_error("cannot open scene file '" + path + "'");
  }

  std::optional<Scene> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("line " + std::to_string(line_no_) + ": " + e.what());
      }
      return scene_from_json(j, line_no_);
    }
    return std::nullopt;
  }

 private:
  std::ifstream in_;
  std::size_t line_no_ = 0;
};

class SceneWriter {
 public:
  explicit SceneWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write scene file '" + path + "'");
  }
  void write(const Scene& scene) { out_ << scene_to_json_line(scene) << '\n'; }

 private:
  std::ofstream out_;
};

inline void save_scenes(const std::string& path, std::span<const Scene> scenes) {
  SceneWriter w(path);
  for (const auto& s : scenes) w.write(s);
}

inline std::vector<Scene> load_scenes(const std::string& path) {
  SceneReader r(path);
  std::vector<Scene> out;
  while (auto s = r.next()) out.push_back(std::move(*s));
  return out;
}

inline std::string event_log_to_json_line(const EventLog& log) {
  std::string out = "{\"scene_id\":";
  detail::append_json_string(out, log.scene_id);
  out += ",\"events\":[";
  for (std::size_t k = 0; k < log.events.size(); ++k) {
    const Event& e = log.events[k];
    if (k) out += ',';
    out += '[' + std::to_string(e.t) + ",\"" + to_string(e.kind) + "\"," + std::to_string(e.i) + ',' +
           std::to_string(e.j) + ']';
  }
  out += "]}";
  return out;
}

inline void save_event_logs(const std::string& path, std::span<const EventLog> logs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write event file '" + path + "'");
  for (const auto& l : logs) out << event_log_to_json_line(l) << '\n';
}

inline std::vector<EventLog> load_event_logs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open event file '" + path + "'");
  std::vector<EventLog> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EventLog log;
      log.scene_id = j.at("scene_id").get<std::string>();
      for (const auto& e : j.at("events")) {
        log.events.push_back({e.at(0).get<int>(), event_kind_from_string(e.at(1).get<std::string>()),
                              e.at(2).get<int>(), e.at(3).get<int>()});
      }
      out.push_back(std::move(log));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Affine map x' = (x - center) / scale with one scale shared by both axes.
struct NormalizeTransform {
  double cx = 0.0, cy = 0.0, scale = 1.0;

  Point apply(Point p) const { return {(p[0] - cx) / scale, (p[1] - cy) / scale}; }
  Point invert(Point p) const { return {p[0] * scale + cx, p[1] * scale + cy}; }

  /// FNV-1a over the bit patterns of the three parameters.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : {cx, cy, scale}) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
  }

  bool operator==(const NormalizeTransform&) const = default;
};

/// Fits the transform sending the bounding box of all present positions into
/// [-1,1]^2: centered per axis, scaled by the larger half-extent.
inline NormalizeTransform fit_normalization(std::span<const Scene> scenes) {
  double lo[2] = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
  double hi[2] = {-lo[0], -lo[1]};
  bool any = false;
  for (const auto& s : scenes)
    for (const auto& a : s.agents)
      for (std::size_t t = 0; t < s.T; ++t) {
        if (!a.mask[t]) continue;
        any = true;
        for (int k = 0; k < 2; ++k) {
          lo[k] = std::min(lo[k], a.pos[t][k]);
          hi[k] = std::max(hi[k], a.pos[t][k]);
        }
      }
  if (!any) throw NormalizationError("normalization needs at least one present position");
  const double half = std::max(hi[0] - lo[0], hi[1] - lo[1]) / 2.0;
  if (!(half > 0.0)) throw NormalizationError("degenerate bounding box (zero extent)");
  return {(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, half};
}

/// Maps present positions; masked positions keep the sentinel.
inline Scene apply_transform(Scene s, const NormalizeTransform& tf) {
  for (auto& a : s.agents)
    for (std::size_t t = 0; t < s.T; ++t)
      if (a.mask[t]) a.pos[t] = tf.apply(a.pos[t]);
  return s;
}

inline Scene invert_transform(Scene s, const NormalizeTransform& tf) {
  for (auto& a : s.agents)
    for (std::size_t t = 0; t < s.T; ++t)
      if (a.mask[t]) a.pos[t] = tf.invert(a.pos[t]);
  return s;
}

inline std::pair<std::vector<Scene>, NormalizeTransform> normalize(std::span<const Scene> scenes) {
  if (scenes.empty()) throw NormalizationError("cannot normalize an empty scene set");
  const auto tf = fit_normalization(scenes);
  std::vector<Scene> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(apply_transform(s, tf));
  return {std::move(out), tf};
}

// ---------------------------------------------------------------------------
// Splitting

struct Split {
  std::vector<Scene> train, val, test;
};

struct SplitSizes {
  std::size_t train, val, test;
};

/// 70/15/15 by count: val and test get floor(0.15 n) (at least 1), train
/// takes the remainder.
inline SplitSizes split_sizes(std::size_t n) {
  if (n < 3) throw std::invalid_argument("split needs at least 3 scenes, got " + std::to_string(n));
  const std::size_t held = std::max<std::size_t>(1, n * 15 / 100);
  return {n - 2 * held, held, held};
}

inline std::vector<std::size_t> split_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  return idx;
}

inline Split split(std::span<const Scene> scenes, std::uint64_t seed) {
  const auto sizes = split_sizes(scenes.size());
  const auto idx = split_order(scenes.size(), seed);
  Split out;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Scene& s = scenes[idx[k]];
    if (k < sizes.train) out.train.push_back(s);
    else if (k < sizes.train + sizes.val) out.val.push_back(s);
    else out.test.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

/// Scenes padded to a common agent count. Layout: positions[((b*N + i)*T + t)*2 + k].
struct Batch {
  std::size_t B = 0, N = 0, T = 0;
  std::vector<double> positions;
  std::vector<std::uint8_t> masks;  // [(b*N + i)*T + t]
  std::vector<std::size_t> scene_index;

  double x(std::size_t b, std::size_t i, std::size_t t, int k) const {
    return positions[((b * N + i) * T + t) * 2 + static_cast<std::size_t>(k)];
  }
  bool present(std::size_t b, std::size_t i, std::size_t t) const {
    return masks[(b * N + i) * T + t] != 0;
  }
  std::size_t rows() const { return B * N; }
};

/// Packs the given scenes (all of equal T). Masked and padded cells hold 0.
inline Batch make_batch(std::span<const Scene> scenes, std::span<const std::size_t> which) {
  if (which.empty()) throw std::invalid_argument("make_batch: empty batch");
  Batch b;
  b.B = which.size();
  b.T = scenes[which[0]].T;
  for (auto i : which) {
    if (scenes[i].T != b.T) throw SchemaError("make_batch: scenes in a batch must share T");
    b.N = std::max(b.N, scenes[i].num_agents());
  }
  b.positions.assign(b.B * b.N * b.T * 2, 0.0);
  b.masks.assign(b.B * b.N * b.T, 0);
  for (std::size_t k = 0; k < which.size(); ++k) {
    const Scene& s = scenes[which[k]];
    b.scene_index.push_back(which[k]);
    for (std::size_t i = 0; i < s.num_agents(); ++i)
      for (std::size_t t = 0; t < b.T; ++t) {
        if (!s.agents[i].mask[t]) continue;
        const std::size_t cell = (k * b.N + i) * b.T + t;
        b.masks[cell] = 1;
        b.positions[cell * 2] = s.agents[i].pos[t][0];
        b.positions[cell * 2 + 1] = s.agents[i].pos[t][1];
      }
  }
  return b;
}

/// Groups scene indices by T (ascending) and chunks each group in `order`.
inline std::vector<std::vector<std::size_t>> batch_indices(std::span<const Scene> scenes,
                                                           std::span<const std::size_t> order,
                                                           std::size_t batch_size) {
  std::vector<std::size_t> horizons;
  for (auto i : order) horizons.push_back(scenes[i].T);
  std::sort(horizons.begin(), horizons.end());
  horizons.erase(std::unique(horizons.begin(), horizons.end()), horizons.end());
  std::vector<std::vector<std::size_t>> out;
  for (auto T : horizons) {
    std::vector<std::size_t> cur;
    for (auto i : order) {
      if (scenes[i].T != T) continue;
      cur.push_back(i);
      if (cur.size() == batch_size) out.push_back(std::exchange(cur, {}));
    }
    if (!cur.empty()) out.push_back(std::move(cur));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Edges

struct EdgeMode {
  enum Kind { Full, DistanceCutoff } kind = Full;
  double d_thresh = 0.5;

  static EdgeMode full() { return {Full, 0.5}; }
  static EdgeMode cutoff(double d) { return {DistanceCutoff, d}; }
};

struct Edge {
  std::size_t sender, receiver;
  bool operator==(const Edge&) const = default;
};

using EdgeSet = std::vector<Edge>;

/// Directed edges between present agents at one timestep, sender-major order.
inline EdgeSet build_edges(std::span<const Point> positions, std::span<const std::uint8_t> present,
                           EdgeMode mode) {
  EdgeSet edges;
  const std::size_t n = positions.size();
  for (std::size_t s = 0; s < n; ++s) {
    if (!present[s]) continue;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == s || !present[r]) continue;
      if (mode.kind == EdgeMode::DistanceCutoff) {
        const double dx = positions[s][0] - positions[r][0];
        const double dy = positions[s][1] - positions[r][1];
        if (std::sqrt(dx * dx + dy * dy) > mode.d_thresh) continue;
      }
      edges.push_back({s, r});
    }
  }
  return edges;
}

}  // namespace fqa
