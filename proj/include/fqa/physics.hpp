// Synthetic physics scenes: elastic balls with walls and fixed landmarks
// ("Collisions") and softened Coulomb charges in a walled box ("Charges").

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fqa/scene.hpp"

namespace fqa::physics {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Vec2 {
  double x = 0.0, y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2& operator+=(Vec2 o) { x += o.x; y += o.y; return *this; }
  Vec2& operator-=(Vec2 o) { x -= o.x; y -= o.y; return *this; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm2() const { return dot(*this); }
  double norm() const { return std::sqrt(norm2()); }
  bool operator==(const Vec2&) const = default;
};

/// splitmix64 finalizer; per-scene seeds are splitmix64(master ^ splitmix64(index)).
inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t scene_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(master ^ splitmix64(index));
}

struct CollisionsConfig {
  int num_agents = 4;
  int num_landmarks = 2;
  double box_half_width = 1.0;
  double agent_radius = 0.05;
  double landmark_radius = 0.1;
  double dt = 0.1;
  int substeps = 10;
  int T = 25;
  double speed_scale = 0.3;
  std::uint64_t seed = 0;
  int max_placement_tries = 10000;

  /// Largest speed allowed at initialization: keeps per-frame travel below one radius.
  double max_speed() const { return 0.99 * agent_radius / dt; }

  void validate() const {
    if (num_agents < 0 || num_landmarks < 0) throw ConfigError("collisions.num_agents/num_landmarks must be >= 0");
    if (!(agent_radius > 0)) throw ConfigError("collisions.agent_radius must be > 0");
    if (!(landmark_radius > 0)) throw ConfigError("collisions.landmark_radius must be > 0");
    if (!(dt > 0)) throw ConfigError("collisions.dt must be > 0");
    if (substeps < 1) throw ConfigError("collisions.substeps must be >= 1");
    if (T < 2) throw ConfigError("collisions.T must be >= 2");
    if (!(box_half_width > agent_radius)) throw ConfigError("collisions.box_half_width must exceed agent_radius");
    if (!(speed_scale >= 0)) throw ConfigError("collisions.speed_scale must be >= 0");
  }
};

struct ChargesConfig {
  int num_charges = 4;
  std::vector<int> charge_values;  // empty: drawn uniformly from {+1,-1}
  double coulomb_constant = 0.05;
  double softening = 1e-2;
  double box_half_width = 1.0;
  double dt = 0.1;
  int substeps = 20;
  int T = 25;
  double speed_scale = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_charges < 0) throw ConfigError("charges.num_charges must be >= 0");
    if (!charge_values.empty() && charge_values.size() != static_cast<std::size_t>(num_charges))
      throw ConfigError("charges.charge_values must list one value per charge");
    for (int q : charge_values)
      if (q != 1 && q != -1) throw ConfigError("charges.charge_values entries must be +1 or -1");
    if (!(softening > 0)) throw ConfigError("charges.softening must be > 0");
    if (substeps < 1) throw ConfigError("charges.substeps must be >= 1");
    if (!(dt > 0)) throw ConfigError("charges.dt must be > 0");
    if (T < 2) throw ConfigError("charges.T must be >= 2");
    if (!(box_half_width > 0)) throw ConfigError("charges.box_half_width must be > 0");
  }
};

/// Equal-mass elastic resolution along the contact normal. Returns the input
/// velocities unchanged when the pair is not approaching. `fallback_normal`
/// (typically the previous-frame displacement p1 - p2) is used when the
/// centers coincide.
inline std::pair<Vec2, Vec2> resolve_pair_collision(Vec2 p1, Vec2 v1, Vec2 p2, Vec2 v2,
                                                    double radius, Vec2 fallback_normal = {}) {
  (void)radius;
  Vec2 n = p1 - p2;
  double len = n.norm();
  if (len == 0.0) {
    n = fallback_normal;
    len = n.norm();
    if (len == 0.0) {
      n = v2 - v1;
      len = n.norm();
    }
    if (len == 0.0) return {v1, v2};
  }
  n = n * (1.0 / len);
  const double approach = (v1 - v2).dot(n);
  if (approach >= 0.0) return {v1, v2};
  const Vec2 impulse = n * approach;
  return {v1 - impulse, v2 + impulse};
}

/// Mirror reflection of `v` about the plane with unit normal `n`.
inline Vec2 reflect(Vec2 v, Vec2 n) { return v - n * (2.0 * v.dot(n)); }

namespace detail {

struct Body {
  Vec2 p, v;
  double radius = 0.0;
  bool immobile = false;
};

/// Reflects bodies off the box walls (inner extent box - radius).
template <class OnHit>
void resolve_walls(std::vector<Body>& bodies, double box, OnHit on_hit) {
  for (std::size_t i = 0; i < bodies.size(); ++i) {
    Body& b = bodies[i];
    if (b.immobile) continue;
    const double lim = box - b.radius;
    bool hit = false;
    if (b.p.x > lim) { b.p.x = 2 * lim - b.p.x; b.v.x = -std::abs(b.v.x); hit = true; }
    if (b.p.x < -lim) { b.p.x = -2 * lim - b.p.x; b.v.x = std::abs(b.v.x); hit = true; }
    if (b.p.y > lim) { b.p.y = 2 * lim - b.p.y; b.v.y = -std::abs(b.v.y); hit = true; }
    if (b.p.y < -lim) { b.p.y = -2 * lim - b.p.y; b.v.y = std::abs(b.v.y); hit = true; }
    if (hit) on_hit(i);
  }
}

inline std::vector<Point> snapshot(const std::vector<Body>& bodies) {
  std::vector<Point> out;
  out.reserve(bodies.size());
  for (const auto& b : bodies) out.push_back({b.p.x, b.p.y});
  return out;
}

inline Scene scene_from_frames(const std::string& id_prefix, std::uint64_t seed,
                               const std::vector<std::vector<Point>>& frames,
                               const std::vector<Body>& bodies, int num_mobile) {
  Scene scene;
  scene.scene_id = id_prefix + "-" + std::to_string(seed);
  scene.T = frames.size();
  for (std::size_t i = 0; i < bodies.size(); ++i) {
    Agent a;
    const bool mobile = static_cast<int>(i) < num_mobile;
    a.id = (mobile ? "a" : "l") + std::to_string(mobile ? i : i - num_mobile);
    a.immobile = bodies[i].immobile;
    a.mask.assign(frames.size(), 1);
    for (const auto& f : frames) a.pos.push_back(f[i]);
    scene.agents.push_back(std::move(a));
  }
  return scene;
}

inline Vec2 draw_velocity(std::mt19937_64& rng, double speed_scale, double max_speed) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec2 v{normal(rng) * speed_scale, normal(rng) * speed_scale};
  const double s = v.norm();
  if (max_speed > 0 && s > max_speed) v = v * (max_speed / s);
  return v;
}

}  // namespace detail

/// Velocities immediately before and after one resolved contact. For wall
/// and landmark contacts only the `i` entries are meaningful.
struct ContactRecord {
  EventKind kind = EventKind::AgentAgent;
  int i = 0, j = -1;
  Vec2 vi_before, vj_before, vi_after, vj_after;
};

struct CollisionsResult {
  Scene scene;
  EventLog events;
  std::vector<ContactRecord> contacts;
  std::vector<double> frame_energy;  // total kinetic energy at each frame
};

/// Balls (unit mass) on a frictionless plane inside a walled box with fixed
/// circular landmarks. Landmarks are emitted after the balls as immobile agents.
inline CollisionsResult generate_collisions(const CollisionsConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const double box = cfg.box_half_width;
  std::vector<detail::Body> bodies;

  // Landmarks first so balls are rejected against them too.
  std::vector<detail::Body> landmarks, balls;
  auto place = [&](double radius, std::vector<detail::Body>& into, bool immobile) {
    std::uniform_real_distribution<double> coord(-(box - radius), box - radius);
    for (int attempt = 0; attempt < cfg.max_placement_tries; ++attempt) {
      Vec2 p{coord(rng), coord(rng)};
      bool ok = true;
      for (const auto* group : {&landmarks, &balls})
        for (const auto& o : *group)
          if ((p - o.p).norm() <= radius + o.radius) ok = false;
      if (ok) {
        into.push_back({p, {}, radius, immobile});
        return;
      }
    }
    throw GenerationError("could not place non-overlapping bodies after " +
                          std::to_string(cfg.max_placement_tries) + " tries");
  };
  for (int i = 0; i < cfg.num_landmarks; ++i) place(cfg.landmark_radius, landmarks, true);
  for (int i = 0; i < cfg.num_agents; ++i) place(cfg.agent_radius, balls, false);
  for (auto& b : balls) b.v = detail::draw_velocity(rng, cfg.speed_scale, cfg.max_speed());
  bodies = balls;
  bodies.insert(bodies.end(), landmarks.begin(), landmarks.end());
  const int n_mobile = cfg.num_agents;

  EventLog log;
  std::vector<ContactRecord> contacts;
  std::vector<double> energy;
  auto total_energy = [&] {
    double e = 0.0;
    for (const auto& b : bodies) e += 0.5 * b.v.norm2();
    return e;
  };
  std::vector<std::vector<Point>> frames{detail::snapshot(bodies)};
  energy.push_back(total_energy());
  const double h = cfg.dt / cfg.substeps;
  for (int frame = 1; frame < cfg.T; ++frame) {
    for (int sub = 0; sub < cfg.substeps; ++sub) {
      std::vector<Vec2> before(bodies.size());
      for (std::size_t i = 0; i < bodies.size(); ++i) before[i] = bodies[i].p;
      for (auto& b : bodies)
        if (!b.immobile) b.p += b.v * h;

      auto add_event = [&](EventKind kind, int i, int j) {
        Event e{frame, kind, i, j};
        // One event per contact per frame interval.
        for (auto it = log.events.rbegin(); it != log.events.rend() && it->t == frame; ++it)
          if (*it == e) return;
        log.events.push_back(e);
      };

      std::vector<Vec2> v_pre(bodies.size());
      for (std::size_t i = 0; i < bodies.size(); ++i) v_pre[i] = bodies[i].v;
      detail::resolve_walls(bodies, box, [&](std::size_t i) {
        add_event(EventKind::AgentWall, static_cast<int>(i), -1);
        contacts.push_back({EventKind::AgentWall, static_cast<int>(i), -1, v_pre[i], {}, bodies[i].v, {}});
      });

      for (int i = 0; i < n_mobile; ++i) {
        for (std::size_t l = n_mobile; l < bodies.size(); ++l) {
          auto& b = bodies[i];
          const auto& lm = bodies[l];
          Vec2 d = b.p - lm.p;
          const double reach = b.radius + lm.radius;
          double len = d.norm();
          if (len > reach) continue;
          if (len == 0.0) { d = before[i] - lm.p; len = d.norm(); }
          if (len == 0.0) continue;
          const Vec2 n = d * (1.0 / len);
          if (b.v.dot(n) < 0.0) {
            const Vec2 pre = b.v;
            b.v = reflect(b.v, n);
            add_event(EventKind::AgentLandmark, i, static_cast<int>(l));
            contacts.push_back({EventKind::AgentLandmark, i, static_cast<int>(l), pre, {}, b.v, {}});
          }
          b.p = lm.p + n * reach;
        }
      }

      for (int i = 0; i < n_mobile; ++i) {
        for (int j = i + 1; j < n_mobile; ++j) {
          auto& a = bodies[i];
          auto& b = bodies[j];
          const double reach = a.radius + b.radius;
          Vec2 d = a.p - b.p;
          double len = d.norm();
          if (len > reach) continue;
          const Vec2 fallback = before[i] - before[j];
          auto [va, vb] = resolve_pair_collision(a.p, a.v, b.p, b.v, cfg.agent_radius, fallback);
          if (!(va == a.v && vb == b.v)) {
            contacts.push_back({EventKind::AgentAgent, i, j, a.v, b.v, va, vb});
            a.v = va;
            b.v = vb;
            add_event(EventKind::AgentAgent, i, j);
          }
          // Separate overlapping centers symmetrically along the normal.
          if (len == 0.0) { d = fallback; len = d.norm(); }
          if (len > 0.0 && len < reach) {
            const Vec2 push = d * (0.5 * (reach - len) / len);
            a.p += push;
            b.p -= push;
          }
        }
      }
    }
    frames.push_back(detail::snapshot(bodies));
    energy.push_back(total_energy());
  }

  CollisionsResult out;
  out.contacts = std::move(contacts);
  out.frame_energy = std::move(energy);
  out.scene = detail::scene_from_frames("collisions", cfg.seed, frames, bodies, n_mobile);
  log.scene_id = out.scene.scene_id;
  out.events = std::move(log);
  return out;
}

/// Softened pairwise Coulomb accelerations (unit masses).
inline std::vector<Vec2> coulomb_accelerations(const std::vector<Vec2>& p, const std::vector<int>& q,
                                               double k, double softening) {
  std::vector<Vec2> a(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    for (std::size_t j = i + 1; j < p.size(); ++j) {
      const Vec2 d = p[i] - p[j];
      const double r2 = d.norm2() + softening;
      const double f = k * q[i] * q[j] / (r2 * std::sqrt(r2));
      const Vec2 fij = d * f;
      a[i] += fij;
      a[j] -= fij;
    }
  }
  return a;
}

struct ChargesState {
  std::vector<Vec2> p, v;
  std::vector<int> q;
};

/// One kick-drift-kick step of length h followed by wall reflection.
inline void charges_substep(ChargesState& s, double h, const ChargesConfig& cfg) {
  auto a = coulomb_accelerations(s.p, s.q, cfg.coulomb_constant, cfg.softening);
  for (std::size_t i = 0; i < s.p.size(); ++i) {
    s.v[i] += a[i] * (0.5 * h);
    s.p[i] += s.v[i] * h;
  }
  std::vector<detail::Body> bodies;
  for (std::size_t i = 0; i < s.p.size(); ++i) bodies.push_back({s.p[i], s.v[i], 0.0, false});
  detail::resolve_walls(bodies, cfg.box_half_width, [](std::size_t) {});
  for (std::size_t i = 0; i < s.p.size(); ++i) {
    s.p[i] = bodies[i].p;
    s.v[i] = bodies[i].v;
  }
  a = coulomb_accelerations(s.p, s.q, cfg.coulomb_constant, cfg.softening);
  for (std::size_t i = 0; i < s.p.size(); ++i) s.v[i] += a[i] * (0.5 * h);
}

inline ChargesState initial_charges(const ChargesConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  ChargesState s;
  std::uniform_real_distribution<double> coord(-cfg.box_half_width, cfg.box_half_width);
  std::bernoulli_distribution sign(0.5);
  for (int i = 0; i < cfg.num_charges; ++i) s.p.push_back({coord(rng), coord(rng)});
  for (int i = 0; i < cfg.num_charges; ++i) s.v.push_back(detail::draw_velocity(rng, cfg.speed_scale, 0.0));
  for (int i = 0; i < cfg.num_charges; ++i)
    s.q.push_back(cfg.charge_values.empty() ? (sign(rng) ? 1 : -1) : cfg.charge_values[i]);
  return s;
}

/// Integrates `state` for T-1 frames and returns the recorded frames.
inline std::vector<std::vector<Point>> integrate_charges(ChargesState state, const ChargesConfig& cfg) {
  std::vector<std::vector<Point>> frames;
  auto snap = [&] {
    std::vector<Point> f;
    for (const auto& p : state.p) f.push_back({p.x, p.y});
    frames.push_back(std::move(f));
  };
  snap();
  const double h = cfg.dt / cfg.substeps;
  for (int frame = 1; frame < cfg.T; ++frame) {
    for (int sub = 0; sub < cfg.substeps; ++sub) charges_substep(state, h, cfg);
    snap();
  }
  return frames;
}

inline Scene generate_charges(const ChargesConfig& cfg) {
  cfg.validate();
  const ChargesState s0 = initial_charges(cfg);
  const auto frames = integrate_charges(s0, cfg);
  std::vector<detail::Body> bodies(s0.p.size());
  return detail::scene_from_frames("charges", cfg.seed, frames, bodies, cfg.num_charges);
}

inline double kinetic_energy(const std::vector<Vec2>& v) {
  double e = 0.0;
  for (const auto& x : v) e += 0.5 * x.norm2();
  return e;
}


/// Softened Coulomb potential energy, matching `coulomb_accelerations`.
inline double coulomb_potential(const std::vector<Vec2>& p, const std::vector<int>& q, double k, double softening) {
  double e = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = i + 1; j < p.size(); ++j) e += k * q[i] * q[j] / std::sqrt((p[i] - p[j]).norm2() + softening);
  return e;
}

struct ConservationReport {
  double energy_drift = 0.0;       // max relative deviation from the first frame
  double contact_momentum = 0.0;   // worst agent-agent momentum error
  double contact_energy = 0.0;     // worst agent-agent kinetic energy error
  double reflection_speed = 0.0;   // worst wall/landmark speed error
};

inline ConservationReport check_conservation(const CollisionsResult& r) {
  ConservationReport rep;
  if (!r.frame_energy.empty() && r.frame_energy.front() > 0) {
    for (double e : r.frame_energy)
      rep.energy_drift = std::max(rep.energy_drift, std::abs(e - r.frame_energy.front()) / r.frame_energy.front());
  }
  for (const auto& c : r.contacts) {
    if (c.kind == EventKind::AgentAgent) {
      const Vec2 dp = (c.vi_after + c.vj_after) - (c.vi_before + c.vj_before);
      rep.contact_momentum = std::max(rep.contact_momentum, dp.norm());
      const double ke0 = 0.5 * (c.vi_before.norm2() + c.vj_before.norm2());
      const double ke1 = 0.5 * (c.vi_after.norm2() + c.vj_after.norm2());
      rep.contact_energy = std::max(rep.contact_energy, std::abs(ke1 - ke0));
    } else {
      rep.reflection_speed = std::max(rep.reflection_speed, std::abs(c.vi_after.norm() - c.vi_before.norm()));
    }
  }
  return rep;
}

/// Thresholds: energy drift 1e-6 relative, contacts 1e-9, reflections 1e-12.
inline bool conserved(const ConservationReport& r) {
  return r.energy_drift < 1e-6 && r.contact_momentum < 1e-9 && r.contact_energy < 1e-9 && r.reflection_speed < 1e-12;
}

/// Largest relative deviation of total (kinetic + potential) energy from the
/// first frame over a Charges integration.
inline double charges_energy_drift(const ChargesConfig& cfg) {
  ChargesState s = initial_charges(cfg);
  auto total = [&] { return kinetic_energy(s.v) + coulomb_potential(s.p, s.q, cfg.coulomb_constant, cfg.softening); };
  const double e0 = total();
  const double ref = std::max(std::abs(e0), kinetic_energy(s.v));
  double drift = 0.0;
  const double h = cfg.dt / cfg.substeps;
  for (int frame = 1; frame < cfg.T; ++frame) {
    for (int sub = 0; sub < cfg.substeps; ++sub) charges_substep(s, h, cfg);
    drift = std::max(drift, std::abs(total() - e0) / (ref > 0 ? ref : 1.0));
  }
  return drift;
}

}  // namespace fqa::physics
