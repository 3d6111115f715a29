// Trajectory plots: SVG with one panel per variant plus a CSV of the plotted
// points. Observed frames are drawn in light shades, predicted frames in dark
// shades, and circle radii grow with time.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fqa/dataset.hpp"
#include "fqa/model.hpp"
#include "fqa/scene.hpp"
#include "fqa/training.hpp"

namespace fqa {

class PlotError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Predicted positions of one variant, indexed [i][t]; frames before T_obs
/// and invalid cells are empty.
struct PlotPanel {
  std::string label;
  std::vector<std::vector<std::optional<Point>>> predicted;
};

/// Rolls `model` out on one normalized scene and maps predictions back to
/// original units with `tf`.
inline PlotPanel predict_panel(const Model& model, const Scene& normalized, const NormalizeTransform& tf,
                               std::string label) {
  const std::vector<Scene> one{normalized};
  const std::size_t idx = 0;
  const Batch batch = make_batch(one, std::span(&idx, 1));
  const std::size_t T_obs = observed_frames(batch.T);
  const auto res = rollout(model, batch, {.teacher_frames = T_obs});
  PlotPanel panel{std::move(label), {}};
  panel.predicted.assign(normalized.num_agents(), std::vector<std::optional<Point>>(batch.T));
  for (std::size_t t = T_obs; t < batch.T && t >= 1; ++t) {
    const auto& v = res.predictions[t - 1].values();
    for (std::size_t i = 0; i < normalized.num_agents(); ++i) {
      if (!(batch.present(0, i, t - 1) && batch.present(0, i, t))) continue;
      panel.predicted[i][t] = tf.invert(Point{v[i * 2], v[i * 2 + 1]});
    }
  }
  return panel;
}

namespace detail {

inline const char* agent_color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                  "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"};
  return palette[i % 10];
}

inline double circle_radius(std::size_t t) { return 1.5 + 0.2 * static_cast<double>(t); }

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace detail

/// Writes `svg_path` and `csv_path`. With no panels, a single observed-only
/// panel is drawn. Every variant panel contributes N*T CSV rows.
inline void emit_plot(const Scene& scene, std::span<const PlotPanel> panels, const std::string& svg_path,
                      const std::string& csv_path) {
  const std::size_t N = scene.num_agents(), T = scene.T, T_obs = observed_frames(T);
  for (const auto& p : panels)
    if (p.predicted.size() != N || std::any_of(p.predicted.begin(), p.predicted.end(), [&](auto& r) { return r.size() != T; }))
      throw std::invalid_argument("emit_plot: panel '" + p.label + "' does not match the scene shape");

  double lo_x = std::numeric_limits<double>::infinity(), hi_x = -lo_x, lo_y = lo_x, hi_y = -lo_x;
  auto extend = [&](const Point& q) {
    lo_x = std::min(lo_x, q[0]);
    hi_x = std::max(hi_x, q[0]);
    lo_y = std::min(lo_y, q[1]);
    hi_y = std::max(hi_y, q[1]);
  };
  for (const auto& a : scene.agents)
    for (std::size_t t = 0; t < T; ++t)
      if (a.mask[t]) extend(a.pos[t]);
  for (const auto& p : panels)
    for (const auto& row : p.predicted)
      for (const auto& q : row)
        if (q) extend(*q);
  if (!std::isfinite(lo_x)) lo_x = lo_y = -1, hi_x = hi_y = 1;
  const double span = std::max({hi_x - lo_x, hi_y - lo_y, 1e-9});
  const double size = 360, pad = 24;
  auto px = [&](const Point& q) {
    return std::pair{pad + (q[0] - lo_x) / span * (size - 2 * pad), size - pad - (q[1] - lo_y) / span * (size - 2 * pad)};
  };

  std::vector<PlotPanel> drawn(panels.begin(), panels.end());
  const bool observed_only = drawn.empty();
  if (observed_only) drawn.push_back({"observed", {}});

  std::ofstream svg(svg_path, std::ios::trunc);
  if (!svg) throw PlotError("cannot write '" + svg_path + "'");
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw PlotError("cannot write '" + csv_path + "'");

  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size * static_cast<double>(drawn.size())
      << "\" height=\"" << size + 20 << "\">\n";
  csv << "panel,agent,t,phase,x,y,radius\n";
  for (std::size_t k = 0; k < drawn.size(); ++k) {
    const auto& panel = drawn[k];
    svg << "<g transform=\"translate(" << size * static_cast<double>(k) << ",20)\">\n"
        << "<rect x=\"0\" y=\"0\" width=\"" << size << "\" height=\"" << size
        << "\" fill=\"white\" stroke=\"#cccccc\"/>\n"
        << "<text x=\"" << size / 2 << "\" y=\"-6\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
        << panel.label << "</text>\n";
    for (std::size_t i = 0; i < N; ++i) {
      const auto& a = scene.agents[i];
      const char* color = detail::agent_color(i);
      const std::size_t last = observed_only ? T_obs : T;
      for (std::size_t t = 0; t < last; ++t) {
        const bool observed = t < T_obs;
        std::optional<Point> q;
        if (observed) {
          if (a.mask[t]) q = a.pos[t];
        } else {
          q = panel.predicted[i][t];
        }
        const double r = detail::circle_radius(t);
        csv << panel.label << ',' << a.id << ',' << t << ',' << (observed ? "observed" : "predicted") << ',';
        if (q) csv << detail::fmt((*q)[0]) << ',' << detail::fmt((*q)[1]);
        else csv << ',';
        csv << ',' << detail::fmt(r) << '\n';
        if (!q) continue;
        const auto [x, y] = px(*q);
        svg << "<circle cx=\"" << detail::fmt(x) << "\" cy=\"" << detail::fmt(y) << "\" r=\"" << detail::fmt(r)
            << "\" fill=\"" << color << "\" fill-opacity=\"" << (observed ? "0.3" : "0.9") << "\"/>\n";
      }
    }
    svg << "</g>\n";
  }
  svg << "</svg>\n";
  if (!svg || !csv) throw PlotError("failed while writing plot files");
}

}  // namespace fqa
