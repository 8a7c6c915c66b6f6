#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "gapfill/density.hpp"

namespace gapfill {

/// Linear white-to-dark color ramp. Known names: "reds", "blues", "greys".
struct ColorRamp {
  std::string name;
  std::array<std::uint8_t, 3> light;
  std::array<std::uint8_t, 3> dark;

  /// "#rrggbb" for t clamped to [0, 1]; t = 1 is the darkest color.
  std::string color(double t) const;
};

/// Throws PreconditionError for an unknown name.
const ColorRamp& color_ramp(std::string_view name);

struct OverlaySpec {
  DensityField base;
  DensityField overlay;
  std::string base_ramp = "reds";
  std::string overlay_ramp = "blues";
  float overlay_alpha = 0.6f;
  std::string title;

  /// Throws PreconditionError on a grid mismatch, a bad alpha or an unknown ramp.
  void validate() const;
};

/// Pixel edge of one grid cell for a grid of the given resolution.
int cell_pixels(const GridSpec& grid);

/// Standalone SVG with one rect per cell per layer, base layer first, rows
/// from the top (largest y) down. Each layer is normalized by its own max.
std::string overlay_svg(const OverlaySpec& spec);
void render_overlay_svg(const OverlaySpec& spec, const std::filesystem::path& path);

/// Panels laid out left to right, `columns` per row, each captioned
/// "(a) title", "(b) title", ... Throws PreconditionError for no panels or
/// zero columns.
std::string panel_grid_svg(std::span<const OverlaySpec> specs, std::size_t columns);
void render_panel_grid(std::span<const OverlaySpec> specs, std::size_t columns,
                       const std::filesystem::path& path);

}  // namespace gapfill
