#include <doctest.h>

#include <regex>
#include <set>

#include "gapfill/error.hpp"
#include "gapfill/viz.hpp"
#include "test_support.hpp"
#include "viz_fixture.hpp"

using namespace gapfill;

namespace {

const std::filesystem::path kGolden = GAPFILL_GOLDEN_DIR;

struct Cell {
  std::string layer;
  int ix, iy;
  std::string fill;
};

std::vector<Cell> cells(const std::string& svg) {
  std::vector<Cell> out;
  static const std::regex re(
      R"re(data-layer="(\w+)" data-ix="(\d+)" data-iy="(\d+)"[^>]*fill="(#[0-9a-f]{6})")re");
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), re); it != std::sregex_iterator(); ++it)
    out.push_back({(*it)[1], std::stoi((*it)[2]), std::stoi((*it)[3]), (*it)[4]});
  return out;
}

GridSpec grid4() { return GridSpec{0.0, 4.0, 0.0, 4.0, 4, 4}; }

DensityField field(const GridSpec& g, std::vector<float> v) { return DensityField{{1, 1, 1}, g, std::move(v), {}}; }

OverlaySpec fixture4() { return testing_support::overlay_fixture_4x4(); }

}  // namespace

TEST_CASE("color ramps") {
  CHECK(color_ramp("reds").color(0) == "#fff5f0");
  CHECK(color_ramp("reds").color(1) == "#67000d");
  CHECK(color_ramp("blues").color(2) == "#08306b");
  CHECK(color_ramp("greys").color(0.5) == "#808080");
  CHECK_THROWS_AS(color_ramp("viridis"), PreconditionError);
}

TEST_CASE("uniform base field paints every base cell alike") {
  auto g = grid4();
  OverlaySpec s{field(g, std::vector<float>(16, 3.0f)), field(g, std::vector<float>(16, 0.0f))};
  auto cs = cells(overlay_svg(s));
  REQUIRE(cs.size() == 32);
  for (const auto& c : cs)
    if (c.layer == "base") CHECK(c.fill == color_ramp("reds").color(1));
}

TEST_CASE("single-point overlay is darkest at its cell") {
  auto g = grid4();
  std::vector<Point2> one = {{2.6, 1.2}};
  auto over = kde_grid(one, {0.5f, 0.5f, 1}, g);
  OverlaySpec s{field(g, std::vector<float>(16, 1.0f)), over};
  auto cs = cells(overlay_svg(s));
  const auto darkest = color_ramp("blues").color(1);
  int count = 0;
  for (const auto& c : cs) {
    if (c.layer != "overlay" || c.fill != darkest) continue;
    ++count;
    CHECK(c.ix == 2);
    CHECK(c.iy == 1);
  }
  CHECK(count == 1);
}

TEST_CASE("base layer precedes overlay and rows start at the top") {
  auto svg = overlay_svg(fixture4());
  CHECK(svg.find("class=\"base\"") < svg.find("class=\"overlay\""));
  auto cs = cells(svg);
  REQUIRE(cs.size() == 32);
  CHECK(cs[0].iy == 3);
  CHECK(cs[0].ix == 0);
  CHECK(cs[4].iy == 2);
  CHECK(cs[15].iy == 0);
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(svg.find("version=\"1.1\"") != std::string::npos);
}

TEST_CASE("golden 4x4 overlay") {
  const auto svg = overlay_svg(fixture4());
  CHECK(svg == overlay_svg(fixture4()));
  if (std::getenv("GAPFILL_WRITE_GOLDEN")) testing_support::write_text(kGolden / "overlay_4x4.svg", svg);
  CHECK(svg == testing_support::read_text(kGolden / "overlay_4x4.svg"));
  testing_support::TempDir dir;
  render_overlay_svg(fixture4(), dir / "o.svg");
  CHECK(testing_support::read_text(dir / "o.svg") == svg);
}

TEST_CASE("spec validation") {
  auto s = fixture4();
  s.overlay = field(GridSpec{0, 4, 0, 4, 2, 2}, std::vector<float>(4, 1));
  CHECK_THROWS_AS(s.validate(), PreconditionError);
  CHECK_THROWS_AS(overlay_svg(s), PreconditionError);
  s = fixture4();
  s.overlay_alpha = 0.0f;
  CHECK_THROWS_AS(s.validate(), PreconditionError);
  s = fixture4();
  s.base_ramp = "nope";
  CHECK_THROWS_AS(s.validate(), PreconditionError);
}

TEST_CASE("panel grid layout") {
  std::vector<OverlaySpec> four(4, fixture4());
  const auto svg4 = panel_grid_svg(four, 4);
  std::regex tr(R"re(id="panel-\d+" transform="translate\((\d+),(\d+)\)")re");
  std::set<std::string> rows4;
  for (auto it = std::sregex_iterator(svg4.begin(), svg4.end(), tr); it != std::sregex_iterator(); ++it)
    rows4.insert((*it)[2]);
  CHECK(rows4.size() == 1);
  CHECK(svg4.find("(a) fixture") != std::string::npos);
  CHECK(svg4.find("(d) fixture") != std::string::npos);

  std::vector<OverlaySpec> eight(8, fixture4());
  const auto svg8 = panel_grid_svg(eight, 4);
  std::set<std::string> rows8;
  std::size_t panels = 0;
  for (auto it = std::sregex_iterator(svg8.begin(), svg8.end(), tr); it != std::sregex_iterator(); ++it) {
    rows8.insert((*it)[2]);
    ++panels;
  }
  CHECK(rows8.size() == 2);
  CHECK(panels == 8);
  CHECK(svg8.find("(h) fixture") != std::string::npos);

  CHECK_THROWS_AS(panel_grid_svg(std::vector<OverlaySpec>{}, 4), PreconditionError);
  CHECK_THROWS_AS(panel_grid_svg(four, 0), PreconditionError);
}
