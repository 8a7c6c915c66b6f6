#include "gapfill/viz.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "gapfill/corpus_io.hpp"
#include "gapfill/error.hpp"

namespace gapfill {

namespace {

constexpr int kMargin = 8;
constexpr int kCaption = 24;

const ColorRamp kRamps[] = {
    {"reds", {255, 245, 240}, {103, 0, 13}},
    {"blues", {247, 251, 255}, {8, 48, 107}},
    {"greys", {255, 255, 255}, {0, 0, 0}},
};

std::string escape_xml(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

std::string fixed3(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 3);
  return std::string(buf, res.ptr);
}

void append_layer(std::string& out, const DensityField& f, const ColorRamp& ramp,
                  std::string_view layer, int cell, double alpha, bool opacity_by_value) {
  const double max = f.max_value();
  const auto& g = f.grid;
  out += "<g class=\"" + std::string(layer) + "\">\n";
  for (std::size_t row = 0; row < g.ny; ++row) {
    const std::size_t iy = g.ny - 1 - row;
    for (std::size_t ix = 0; ix < g.nx; ++ix) {
      const double t = max > 0.0 ? f.at(ix, iy) / max : 0.0;
      out += "<rect data-layer=\"" + std::string(layer) + "\" data-ix=\"" + std::to_string(ix) +
             "\" data-iy=\"" + std::to_string(iy) + "\" x=\"" + std::to_string(ix * cell) +
             "\" y=\"" + std::to_string(row * cell) + "\" width=\"" + std::to_string(cell) +
             "\" height=\"" + std::to_string(cell) + "\" fill=\"" + ramp.color(t) + "\"";
      if (opacity_by_value) out += " fill-opacity=\"" + fixed3(alpha * std::clamp(t, 0.0, 1.0)) + "\"";
      out += "/>\n";
    }
  }
  out += "</g>\n";
}

// Cells plus title, drawn with the top-left corner at the origin.
std::string panel_body(const OverlaySpec& spec, std::string_view caption) {
  spec.validate();
  const int cell = cell_pixels(spec.base.grid);
  const int w = cell * static_cast<int>(spec.base.grid.nx);
  const int h = cell * static_cast<int>(spec.base.grid.ny);
  std::string out;
  out += "<g transform=\"translate(" + std::to_string(kMargin) + "," + std::to_string(kMargin) + ")\">\n";
  append_layer(out, spec.base, color_ramp(spec.base_ramp), "base", cell, 1.0, false);
  append_layer(out, spec.overlay, color_ramp(spec.overlay_ramp), "overlay", cell, spec.overlay_alpha, true);
  out += "<rect x=\"0\" y=\"0\" width=\"" + std::to_string(w) + "\" height=\"" + std::to_string(h) +
         "\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n";
  out += "</g>\n";
  out += "<text x=\"" + std::to_string(kMargin + w / 2) + "\" y=\"" +
         std::to_string(kMargin + h + kCaption - 8) +
         "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">" +
         escape_xml(caption) + "</text>\n";
  return out;
}

int panel_width(const OverlaySpec& s) {
  return cell_pixels(s.base.grid) * static_cast<int>(s.base.grid.nx) + 2 * kMargin;
}

int panel_height(const OverlaySpec& s) {
  return cell_pixels(s.base.grid) * static_cast<int>(s.base.grid.ny) + 2 * kMargin + kCaption;
}

std::string svg_open(int w, int h) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
         "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
         std::to_string(w) + "\" height=\"" + std::to_string(h) + "\" viewBox=\"0 0 " +
         std::to_string(w) + " " + std::to_string(h) + "\">\n" + "<rect x=\"0\" y=\"0\" width=\"" +
         std::to_string(w) + "\" height=\"" + std::to_string(h) + "\" fill=\"#ffffff\"/>\n";
}

}  // namespace

std::string ColorRamp::color(double t) const {
  t = std::isfinite(t) ? std::clamp(t, 0.0, 1.0) : 0.0;
  static constexpr char hex[] = "0123456789abcdef";
  std::string out = "#";
  for (std::size_t c = 0; c < 3; ++c) {
    const double v = light[c] + (static_cast<double>(dark[c]) - light[c]) * t;
    const auto b = static_cast<unsigned>(std::lround(v));
    out += hex[b >> 4];
    out += hex[b & 15];
  }
  return out;
}

const ColorRamp& color_ramp(std::string_view name) {
  for (const auto& r : kRamps) {
    if (r.name == name) return r;
  }
  throw PreconditionError("unknown color ramp: " + std::string(name));
}

void OverlaySpec::validate() const {
  base.grid.validate();
  if (!(base.grid == overlay.grid)) throw PreconditionError("overlay grid differs from base grid");
  const std::size_t cells = base.grid.nx * base.grid.ny;
  if (base.values.size() != cells || overlay.values.size() != cells) {
    throw PreconditionError("density field size does not match its grid");
  }
  if (!(overlay_alpha > 0.0f && overlay_alpha <= 1.0f)) {
    throw PreconditionError("overlay_alpha must lie in (0, 1]");
  }
  color_ramp(base_ramp);
  color_ramp(overlay_ramp);
}

int cell_pixels(const GridSpec& grid) {
  const auto longest = static_cast<int>(std::max(grid.nx, grid.ny));
  return std::max(2, 480 / std::max(1, longest));
}

std::string overlay_svg(const OverlaySpec& spec) {
  spec.validate();
  const int w = panel_width(spec);
  const int h = panel_height(spec);
  return svg_open(w, h) + panel_body(spec, spec.title) + "</svg>\n";
}

void render_overlay_svg(const OverlaySpec& spec, const std::filesystem::path& path) {
  write_file_atomic(path, overlay_svg(spec));
}

std::string panel_grid_svg(std::span<const OverlaySpec> specs, std::size_t columns) {
  if (specs.empty()) throw PreconditionError("panel grid needs at least one panel");
  if (columns == 0) throw PreconditionError("panel grid needs at least one column");
  int pw = 0;
  int ph = 0;
  for (const auto& s : specs) {
    s.validate();
    pw = std::max(pw, panel_width(s));
    ph = std::max(ph, panel_height(s));
  }
  const std::size_t cols = std::min(columns, specs.size());
  const std::size_t rows = (specs.size() + columns - 1) / columns;
  std::string out = svg_open(pw * static_cast<int>(cols), ph * static_cast<int>(rows));
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const int x = pw * static_cast<int>(i % columns);
    const int y = ph * static_cast<int>(i / columns);
    std::string caption = "(";
    caption += i < 26 ? std::string(1, static_cast<char>('a' + i)) : std::to_string(i + 1);
    caption += ") " + specs[i].title;
    out += "<g id=\"panel-" + std::to_string(i) + "\" transform=\"translate(" + std::to_string(x) +
           "," + std::to_string(y) + ")\">\n";
    out += panel_body(specs[i], caption);
    out += "</g>\n";
  }
  out += "</svg>\n";
  return out;
}

void render_panel_grid(std::span<const OverlaySpec> specs, std::size_t columns,
                       const std::filesystem::path& path) {
  write_file_atomic(path, panel_grid_svg(specs, columns));
}

}  // namespace gapfill
