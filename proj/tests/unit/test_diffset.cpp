#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "gapfill/diffset.hpp"
#include "gapfill/error.hpp"
#include "gapfill/rng.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace gapfill;

namespace {

std::vector<ProjectedPoint> cloud(std::size_t n, double cx, double cy, double s, std::uint64_t seed,
                                  const std::string& prefix = "p") {
  Rng rng(seed);
  std::vector<ProjectedPoint> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({prefix + std::to_string(i), float(cx + s * rng.normal()), float(cy + s * rng.normal())});
  }
  return out;
}

std::vector<oracle::Pt> as_oracle(const std::vector<ProjectedPoint>& pts) {
  std::vector<oracle::Pt> out;
  for (const auto& p : pts) out.push_back({p.x, p.y});
  return out;
}

std::vector<std::size_t> selected(const std::vector<DiffVerdict>& v) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i].selected) out.push_back(i);
  return out;
}

DiffsetConfig threshold(float tau, KdeParams p) {
  DiffsetConfig c;
  c.criterion = Criterion::threshold;
  c.tau = tau;
  c.kde = p;
  return c;
}

DiffsetConfig ratio(float tau, KdeParams p) {
  DiffsetConfig c;
  c.criterion = Criterion::ratio;
  c.tau = tau;
  c.kde = p;
  return c;
}

}  // namespace

TEST_CASE("identical sets keep the core point out of the threshold set") {
  auto pts = cloud(10, 0, 0, 1, 3);
  auto v = diff_by_threshold(pts, pts, threshold(0.7f, {0.5f, 0.5f, 1}));
  auto top = std::max_element(v.begin(), v.end(), [](auto& a, auto& b) { return a.f_sft < b.f_sft; });
  CHECK(top->score == 1.0f);
  CHECK_FALSE(top->selected);
  CHECK(selected(v) == oracle::select_threshold(as_oracle(pts), as_oracle(pts), 0.5f, 0.5f, 1, 0.7f, true));
}

TEST_CASE("a far point is selected by the threshold rule") {
  auto sft = cloud(20, 0, 0, 1, 4);
  auto pre = sft;
  pre.push_back({"far", 100, 100});
  auto v = diff_by_threshold(pre, sft, threshold(0.7f, {1, 1, 1}));
  CHECK(v.back().selected);
  CHECK(v.back().score < 1e-6f);
}

TEST_CASE("a tiny threshold selects nothing") {
  auto pts = cloud(10, 0, 0, 0.1, 5);
  auto v = diff_by_threshold(pts, pts, threshold(1e-6f, {1, 1, 1}));
  CHECK(selected(v).empty());
}

TEST_CASE("threshold with empty reference fails") {
  auto pts = cloud(3, 0, 0, 1, 1);
  CHECK_THROWS_AS(diff_by_threshold(pts, {}, threshold(0.7f, {1, 1, 1})), PreconditionError);
}

TEST_CASE("disjoint supports select every corpus point by ratio") {
  auto pre = cloud(30, 10, 0, 0.3, 6);
  auto sft = cloud(30, -10, 0, 0.3, 7, "s");
  auto v = diff_by_ratio(pre, sft, ratio(1.0f, {1, 1, 1}));
  CHECK(selected(v).size() == pre.size());
  for (const auto& d : v) {
    CHECK(std::isinf(d.score));
    CHECK(d.f_pre.has_value());
  }
}

TEST_CASE("identical sets under the ratio rule match the oracle") {
  auto pts = cloud(20, 0, 0, 1, 9);
  auto v = diff_by_ratio(pts, pts, ratio(1.0f, {0.6f, 0.6f, 1}));
  auto want = oracle::select_ratio(as_oracle(pts), as_oracle(pts), 0.6f, 0.6f, 1, 1.0f, 20.0);
  CHECK(selected(v) == want);
  CHECK(selected(v).size() < pts.size());
}

TEST_CASE("ratio needs two corpus points") {
  auto one = cloud(1, 0, 0, 1, 1);
  CHECK_THROWS_AS(diff_by_ratio(one, one, ratio(1.0f, {1, 1, 1})), PreconditionError);
}

TEST_CASE("tau monotonicity and self-consistency") {
  auto pre = cloud(80, 0, 0, 1.5, 10);
  auto sft = cloud(60, 0.5, 0, 0.7, 11, "s");
  const KdeParams p{0.4f, 0.4f, 1};
  std::vector<std::size_t> prev_t, prev_r;
  bool first = true;
  for (float tau : {0.1f, 0.4f, 0.7f, 1.0f}) {
    auto t = selected(diff_by_threshold(pre, sft, threshold(tau, p)));
    auto rv = diff_by_ratio(pre, sft, ratio(tau, p));
    auto r = selected(rv);
    if (!first) {
      CHECK(std::includes(t.begin(), t.end(), prev_t.begin(), prev_t.end()));
      CHECK(std::includes(prev_r.begin(), prev_r.end(), r.begin(), r.end()));
    }
    for (const auto& d : rv) CHECK(d.selected == (d.score > tau));
    prev_t = t;
    prev_r = r;
    first = false;
  }
}

TEST_CASE("permuting the SFT set changes no verdict") {
  auto pre = cloud(50, 0, 0, 1, 12);
  auto sft = cloud(40, 0.3, 0.2, 0.8, 13, "s");
  auto shuffled = sft;
  Rng rng(1);
  rng.shuffle(shuffled);
  const KdeParams p{0.5f, 0.5f, 1};
  auto a = diff_by_ratio(pre, sft, ratio(1.0f, p));
  auto b = diff_by_ratio(pre, shuffled, ratio(1.0f, p));
  CHECK(selected(a) == selected(b));
  CHECK(selected(diff_by_threshold(pre, sft, threshold(0.7f, p))) ==
        selected(diff_by_threshold(pre, shuffled, threshold(0.7f, p))));
}

TEST_CASE("auto bandwidth uses Scott's rule on the union") {
  auto pre = cloud(30, 0, 0, 1, 14);
  auto sft = cloud(20, 1, 1, 2, 15, "s");
  DiffsetConfig c;
  auto params = resolve_kde_params(pre, sft, c);
  std::vector<Point2> all = to_points(pre);
  for (const auto& p : to_points(sft)) all.push_back(p);
  auto scott = default_bandwidth(all);
  CHECK(params.h_x == scott.h_x);
  CHECK(params.h_y == scott.h_y);
}

TEST_CASE("config validation") {
  DiffsetConfig c;
  c.tau = 1.5f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.normalize_threshold_densities = false;
  CHECK_NOTHROW(c.validate());
  c.tau = 0.0f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.criterion = Criterion::ratio;
  c.tau = 2.0f;
  CHECK_NOTHROW(c.validate());
  CHECK(parse_criterion("ratio") == Criterion::ratio);
  CHECK_FALSE(parse_criterion("other").has_value());
}

TEST_CASE("materialize keeps corpus order") {
  std::vector<TextRecord> corpus;
  for (int i = 0; i < 5; ++i) corpus.push_back({"r" + std::to_string(i), "text " + std::to_string(i), {}});
  std::vector<DiffVerdict> v;
  for (int i = 4; i >= 0; --i) v.push_back({"r" + std::to_string(i), 0, std::nullopt, 0, i == 1 || i == 3});
  auto out = materialize_diffset(v, corpus);
  REQUIRE(out.size() == 2);
  CHECK(out[0].id == "r1");
  CHECK(out[1].id == "r3");

  for (auto& d : v) d.selected = false;
  CHECK(materialize_diffset(v, corpus).empty());
  for (auto& d : v) d.selected = true;
  CHECK(materialize_diffset(v, corpus) == corpus);

  v.push_back({"ghost", 0, std::nullopt, 0, true});
  CHECK_THROWS_AS(materialize_diffset(v, corpus), PreconditionError);
}

TEST_CASE("invert_selection flips every verdict") {
  std::vector<DiffVerdict> v = {{"a", 1, std::nullopt, 0.5f, true}, {"b", 1, std::nullopt, 0.9f, false}};
  auto inv = invert_selection(v);
  CHECK_FALSE(inv[0].selected);
  CHECK(inv[1].selected);
}

TEST_CASE("verdict report round-trips infinity") {
  testing_support::TempDir dir;
  std::vector<DiffVerdict> v = {{"a", 0.25f, 0.5f, 2.0f, true},
                                {"b", 0.0f, 0.125f, std::numeric_limits<float>::infinity(), true},
                                {"c", 0.1f, std::nullopt, 0.3f, false}};
  write_verdicts(v, dir / "v.jsonl");
  const auto text = testing_support::read_text(dir / "v.jsonl");
  CHECK(text.find(R"({"id":"b","f_sft":0.0,"f_pre":0.125,"score":"inf","selected":true})") != std::string::npos);
  CHECK(text.find(R"("f_pre":null)") != std::string::npos);
  CHECK(read_verdicts(dir / "v.jsonl") == v);
}
