// Core scene data shared by the simulators, dataset tools and models.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fqa {

using Point = std::array<double, 2>;

struct Agent {
  std::string id;
  bool immobile = false;
  std::vector<Point> pos;      // T entries; sentinel (0,0) where mask is false
  std::vector<std::uint8_t> mask;  // T entries, 0 or 1

  bool present(std::size_t t) const { return mask[t] != 0; }
};

struct Scene {
  std::string scene_id;
  std::size_t T = 0;
  std::vector<Agent> agents;

  std::size_t num_agents() const { return agents.size(); }
};

inline bool operator==(const Agent& a, const Agent& b) {
  return a.id == b.id && a.immobile == b.immobile && a.pos == b.pos && a.mask == b.mask;
}
inline bool operator==(const Scene& a, const Scene& b) {
  return a.scene_id == b.scene_id && a.T == b.T && a.agents == b.agents;
}

enum class EventKind { AgentAgent, AgentWall, AgentLandmark };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::AgentAgent: return "agent-agent";
    case EventKind::AgentWall: return "agent-wall";
    case EventKind::AgentLandmark: return "agent-landmark";
  }
  return "?";
}

inline EventKind event_kind_from_string(const std::string& s) {
  if (s == "agent-agent") return EventKind::AgentAgent;
  if (s == "agent-wall") return EventKind::AgentWall;
  if (s == "agent-landmark") return EventKind::AgentLandmark;
  throw std::invalid_argument("unknown event kind '" + s + "'");
}

/// A resolved contact. `t` is the 1-based frame index the contact's
/// integration interval starts from: the contact happened while advancing
/// frame t to frame t+1. `j` is -1 for wall contacts.
struct Event {
  int t = 0;
  EventKind kind = EventKind::AgentAgent;
  int i = 0;
  int j = -1;

  bool operator==(const Event&) const = default;
};

struct EventLog {
  std::string scene_id;
  std::vector<Event> events;

  bool operator==(const EventLog&) const = default;
};

}  // namespace fqa
