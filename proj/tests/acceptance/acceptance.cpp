// One PASS/FAIL line per acceptance criterion. Exit status is nonzero when any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "gapfill/corpus_io.hpp"
#include "gapfill/density.hpp"
#include "gapfill/diffset.hpp"
#include "gapfill/error.hpp"
#include "gapfill/hashing.hpp"
#include "gapfill/log.hpp"
#include "gapfill/pipeline.hpp"
#include "gapfill/projection.hpp"
#include "gapfill/rewrite.hpp"
#include "gapfill/rng.hpp"
#include "gapfill/viz.hpp"
#include "oracles.hpp"
#include "pipeline_fixture.hpp"
#include "viz_fixture.hpp"

using namespace gapfill;

namespace {

constexpr double kChi2Crit_0999_df9 = 27.877164871256568;

struct Verdict {
  bool ok = true;
  std::string detail;

  void fail(const std::string& why) {
    if (ok) detail = why;
    ok = false;
  }
};

std::vector<Point2> random_points(Rng& rng, std::size_t n, double spread) {
  std::vector<Point2> out(n);
  const double cx = rng.normal() * 2, cy = rng.normal() * 2;
  for (auto& p : out) {
    p.x = static_cast<float>(cx + spread * rng.normal());
    p.y = static_cast<float>(cy + spread * rng.normal());
  }
  return out;
}

std::vector<oracle::Pt> to_oracle(const std::vector<Point2>& pts) {
  std::vector<oracle::Pt> out;
  for (const auto& p : pts) out.push_back({p.x, p.y});
  return out;
}

double rel(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

Verdict ac1() {
  Verdict v;
  Rng rng(2024);
  double worst = 0.0, worst_trunc = 0.0, worst_trunc_pointwise = 0.0;
  for (int f = 0; f < 20; ++f) {
    const std::size_t nq = 50 + rng.below(451), nr = 50 + rng.below(451);
    auto q = random_points(rng, nq, 0.5 + rng.unit() * 2);
    auto r = random_points(rng, nr, 0.5 + rng.unit() * 2);
    const KdeParams p{static_cast<float>(0.1 + rng.unit()), static_cast<float>(0.1 + rng.unit()),
                      static_cast<float>(0.5 + rng.unit())};
    const auto oq = to_oracle(q), orf = to_oracle(r);
    const auto exact = kde_batch(q, r, p, KdeMode::exact);
    const auto trunc = kde_batch(q, r, p, KdeMode::truncated);
    const auto at_ref = kde_batch(r, r, p, KdeMode::exact);
    const double peak = *std::max_element(at_ref.begin(), at_ref.end());
    for (std::size_t i = 0; i < nq; ++i) {
      worst_trunc = std::max(worst_trunc, std::abs(trunc[i] - exact[i]) / peak);
      worst_trunc_pointwise = std::max(worst_trunc_pointwise, rel(trunc[i], exact[i]));
      const double want = oracle::kde(oq[i], orf, p.h_x, p.h_y, p.sigma);
      worst = std::max({worst, rel(kde_at(q[i], r, p), want), rel(exact[i], want)});
    }
    const auto loo = kde_self_excluded_batch(r, p);
    for (std::size_t i = 0; i < nr; ++i) {
      const double want = oracle::kde_loo(i, orf, p.h_x, p.h_y, p.sigma, double(nr));
      worst = std::max({worst, rel(kde_self_excluded(i, r, p), want), rel(loo[i], want)});
    }
  }
  if (worst > 1e-7) v.fail("exact relative error " + std::to_string(worst));
  // Truncation drops terms below a fixed kernel value, so its error is bounded
  // in absolute terms; it is measured against the reference field's peak.
  if (worst_trunc > 1e-6) v.fail("truncated error / peak " + std::to_string(worst_trunc));
  if (v.ok) {
    std::ostringstream s;
    s << "max rel err exact " << worst << ", truncated err/peak " << worst_trunc << " (pointwise rel "
      << worst_trunc_pointwise << ")";
    v.detail = s.str();
  }
  return v;
}

Verdict ac2() {
  Verdict v;
  if (kernel({0, 0}, {1, 0}, 1.0) != std::exp(-0.5)) v.fail("kernel((0,0),(1,0),1) != exp(-0.5)");
  std::vector<Point2> two = {{0, 0}, {0, 0}};
  if (kde_self_excluded(0, two, {1, 1, 1}, SelfExcludedDivisor::m) != 0.5) v.fail("coincident pair != 0.5");
  if (v.ok) v.detail = "exp(-0.5) and 0.5 reproduced exactly";
  return v;
}

std::vector<std::size_t> selected(const std::vector<DiffVerdict>& d) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d[i].selected) out.push_back(i);
  return out;
}

std::vector<ProjectedPoint> as_projected(const std::vector<Point2>& pts) {
  std::vector<ProjectedPoint> out;
  for (std::size_t i = 0; i < pts.size(); ++i)
    out.push_back({"p" + std::to_string(i), static_cast<float>(pts[i].x), static_cast<float>(pts[i].y)});
  return out;
}

Verdict ac3() {
  Verdict v;
  Rng rng(77);
  const float taus[] = {0.1f, 0.7f, 1.0f, 2.0f};
  std::size_t checks = 0;
  for (int f = 0; f < 50 && v.ok; ++f) {
    const std::size_t np = 20 + rng.below(281), ns = 20 + rng.below(281);
    auto pre = random_points(rng, np, 0.5 + rng.unit() * 2);
    auto sft = random_points(rng, ns, 0.5 + rng.unit() * 2);
    const auto opre = to_oracle(pre), osft = to_oracle(sft);
    const auto ppre = as_projected(pre), psft = as_projected(sft);
    const KdeParams p{static_cast<float>(0.2 + rng.unit()), static_cast<float>(0.2 + rng.unit()), 1.0f};
    std::vector<std::size_t> prev_t, prev_r;
    for (std::size_t k = 0; k < 4; ++k) {
      const float tau = taus[k];
      DiffsetConfig c;
      c.kde = p;
      c.tau = tau;
      c.criterion = Criterion::threshold;
      // Normalized scores live in [0, 1]; tau above 1 uses raw densities.
      c.normalize_threshold_densities = tau <= 1.0f;
      auto t = selected(diff_by_threshold(ppre, psft, c));
      auto t_want = oracle::select_threshold(opre, osft, p.h_x, p.h_y, p.sigma, tau, c.normalize_threshold_densities);
      c.criterion = Criterion::ratio;
      auto r = selected(diff_by_ratio(ppre, psft, c));
      auto r_want = oracle::select_ratio(opre, osft, p.h_x, p.h_y, p.sigma, tau, double(np));
      checks += 2;
      if (t != t_want) v.fail("threshold mismatch on fixture " + std::to_string(f) + " tau " + std::to_string(tau));
      if (r != r_want) v.fail("ratio mismatch on fixture " + std::to_string(f) + " tau " + std::to_string(tau));
      if (k > 0 && k < 3 && !std::includes(t.begin(), t.end(), prev_t.begin(), prev_t.end()))
        v.fail("threshold selection shrank as tau grew");
      if (k > 0 && !std::includes(prev_r.begin(), prev_r.end(), r.begin(), r.end()))
        v.fail("ratio selection grew as tau grew");
      prev_t = t;
      prev_r = r;
    }
  }
  if (v.ok) v.detail = std::to_string(checks) + " selections equal to the oracle";
  return v;
}

Verdict ac4() {
  Verdict v;
  std::vector<int> items(10);
  for (int i = 0; i < 10; ++i) items[i] = i;
  std::vector<long long> counts(10, 0);
  for (std::uint64_t seed = 0; seed < 100000; ++seed)
    for (int x : reservoir_sample<int>(std::span<const int>(items), 3, seed)) ++counts[x];
  const double stat = oracle::chi_square_uniform(counts, 100000.0 * 3 / 10);
  if (!(stat < kChi2Crit_0999_df9)) v.fail("chi-square " + std::to_string(stat));
  for (std::size_t n : {0u, 1u, 3u}) {
    std::vector<int> shortv(items.begin(), items.begin() + n);
    if (reservoir_sample<int>(std::span<const int>(shortv), 3, 9) != shortv) v.fail("short stream reordered");
  }
  if (v.ok) v.detail = "chi-square " + std::to_string(stat) + " < " + std::to_string(kChi2Crit_0999_df9);
  return v;
}

Verdict ac5() {
  Verdict v;
  Rng rng(5);
  double worst_cos = 1.0;
  for (int f = 0; f < 20; ++f) {
    const std::size_t d = 2 + rng.below(19), n = 60 + rng.below(200);
    // Random orthonormal basis by Gram-Schmidt.
    std::vector<std::vector<double>> basis;
    while (basis.size() < d) {
      std::vector<double> b(d);
      for (double& x : b) x = rng.normal();
      for (const auto& o : basis) {
        double dot = 0;
        for (std::size_t k = 0; k < d; ++k) dot += b[k] * o[k];
        for (std::size_t k = 0; k < d; ++k) b[k] -= dot * o[k];
      }
      double norm = 0;
      for (double x : b) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      for (double& x : b) x /= norm;
      basis.push_back(b);
    }
    std::vector<float> rows(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double z = rng.normal() * (j == 0 ? 6.0 : j == 1 ? 3.0 : 1.0 / double(j));
        for (std::size_t k = 0; k < d; ++k) rows[i * d + k] += static_cast<float>(z * basis[j][k]);
      }
    }
    const PcaModel m = pca_fit(rows, d);
    std::vector<double> drows(rows.begin(), rows.end());
    auto [vals, vecs] = oracle::jacobi_eigen(oracle::covariance(drows, n, d), d);
    for (int a = 0; a < 2; ++a) {
      double dot = 0, self = 0;
      for (std::size_t k = 0; k < d; ++k) {
        dot += m.components[a][k] * vecs[a][k];
        self += double(m.components[a][k]) * m.components[a][k];
      }
      worst_cos = std::min(worst_cos, std::abs(dot));
      if (std::abs(self - 1.0) > 1e-5) v.fail("component not unit length");
    }
    double cross = 0;
    for (std::size_t k = 0; k < d; ++k) cross += double(m.components[0][k]) * m.components[1][k];
    if (std::abs(cross) > 1e-5) v.fail("components not orthogonal");
    if (!(m.explained_variance[0] >= m.explained_variance[1])) v.fail("variance not ordered");

    // No random unit direction beats the first component's projected variance.
    auto var_along = [&](const std::vector<double>& dir) {
      double mean = 0, sq = 0;
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < d; ++k) s += drows[i * d + k] * dir[k];
        mean += s;
        sq += s * s;
      }
      mean /= double(n);
      return (sq - double(n) * mean * mean) / double(n - 1);
    };
    const double best = var_along(std::vector<double>(m.components[0].begin(), m.components[0].end()));
    for (int t = 0; t < 50; ++t) {
      std::vector<double> dir(d);
      double norm = 0;
      for (double& x : dir) {
        x = rng.normal();
        norm += x * x;
      }
      for (double& x : dir) x /= std::sqrt(norm);
      if (var_along(dir) > best * (1 + 1e-6)) v.fail("random direction beat the first component");
    }
  }
  if (worst_cos < 1 - 1e-6) v.fail("min |cosine| " + std::to_string(worst_cos));
  if (v.ok) {
    std::ostringstream s;
    s.precision(12);
    s << "min |cosine| " << worst_cos;
    v.detail = s.str();
  }
  return v;
}

Verdict ac6() {
  Verdict v;
  const std::filesystem::path dir = GAPFILL_PROMPT_DIR;
  const std::pair<TemplateName, std::vector<std::string>> cases[] = {
      {TemplateName::query_generation, {"SLOT-TEXT"}},
      {TemplateName::query_scoring, {"SLOT-QUERY"}},
      {TemplateName::answer_generation, {"SLOT-TEXT", "SLOT-QUESTION"}}};
  for (const auto& [name, slots] : cases) {
    const std::string file = std::string(to_string(name)) + ".txt";
    const std::string text = testing_support::read_text(dir / file);
    if (builtin_template(name).text != text) v.fail(file + " differs from the shipped template");
    if (sha256_hex(text) != builtin_template_sha256(name)) v.fail(file + " checksum mismatch");
    std::string expect;
    std::size_t pos = 0, k = 0;
    for (std::size_t hit; (hit = text.find("{}", pos)) != std::string::npos; pos = hit + 2)
      expect += text.substr(pos, hit - pos) + slots.at(k++);
    expect += text.substr(pos);
    if (k != slots.size()) v.fail(file + " slot count");
    if (render_prompt(builtin_template(name), slots) != expect) v.fail(file + " render differs outside slots");
  }
  if (v.ok) v.detail = "3 templates byte-equal, renders differ only at slots";
  return v;
}

Verdict ac7() {
  Verdict v;
  auto cand = [](int quality, int difficulty, bool extra) {
    QueryCandidate q;
    q.origin_id = "r";
    q.question = "q";
    q.quality = quality;
    q.difficulty = difficulty;
    q.additional_info_needed = extra;
    return q;
  };
  const FilterPolicy def;
  FilterPolicy lenient;
  lenient.reject_if_additional_info = false;
  if (!filter_queries(std::vector{cand(8, 5, true)}, def).kept.empty()) v.fail("example kept under default policy");
  if (filter_queries(std::vector{cand(8, 5, true)}, lenient).kept.size() != 1)
    v.fail("example rejected with reject_if_additional_info=false");
  if (!filter_queries(std::vector{cand(5, 5, false)}, def).kept.empty()) v.fail("quality 5 kept");
  if (filter_queries(std::vector{cand(6, 5, false)}, def).kept.size() != 1) v.fail("quality 6 rejected");
  if (v.ok) v.detail = "example rejected by default, kept when lenient, boundary 5/6 holds";
  return v;
}

std::map<std::string, std::string> snapshot(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), root).string();
    if (rel == "manifest.json" || rel == ".lock") continue;
    out[rel] = testing_support::read_text(e.path());
  }
  return out;
}

std::size_t line_count(const std::filesystem::path& p) {
  const auto text = testing_support::read_text(p);
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "gapfill");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

Verdict ac8() {
  Verdict v;
  testing_support::TempDir dir;
  testing_support::StubServer chat("/v1/chat/completions", testing_support::canned_completion);
  testing_support::PipelineFixture fx(dir, 200, 50, chat.url());
  if (int rc = cli({"run", "--config", fx.config.string()}); rc != 0) {
    v.fail("first run exited " + std::to_string(rc));
    return v;
  }
  const auto first_calls = chat.requests();
  const Layout layout{dir / "work"};
  for (Stage s : kAllStages)
    for (const auto& p : layout.outputs(s))
      if (!std::filesystem::exists(p)) v.fail("missing output " + p.string());

  const std::size_t sft = line_count(layout.sft());
  const std::size_t rewritten = line_count(layout.rewritten());
  const std::size_t combined = line_count(layout.combined());
  const double ratio = fx.doc["merge"]["ratio"].get<double>();
  const auto target = static_cast<std::size_t>(std::llround(static_cast<float>(ratio) * double(sft)));
  if (combined != sft + std::min(target, rewritten))
    v.fail("combined " + std::to_string(combined) + " != " + std::to_string(sft) + " + min(" +
           std::to_string(target) + ", " + std::to_string(rewritten) + ")");
  if (rewritten == 0) v.fail("no rewritten pairs");

  const auto before = snapshot(layout.root);
  if (int rc = cli({"run", "--config", fx.config.string()}); rc != 0) v.fail("second run exited " + std::to_string(rc));
  if (snapshot(layout.root) != before) v.fail("second run changed outputs");
  if (int rc = cli({"run", "--config", fx.config.string(), "--force"}); rc != 0)
    v.fail("forced run exited " + std::to_string(rc));
  if (snapshot(layout.root) != before) v.fail("forced rerun not byte-identical");
  if (chat.requests() != first_calls)
    v.fail(std::to_string(chat.requests() - first_calls) + " network calls after the first run");
  if (v.ok)
    v.detail = "combined " + std::to_string(combined) + " = " + std::to_string(sft) + " + " +
               std::to_string(std::min(target, rewritten)) + "; reruns byte-identical, 0 calls (first run " +
               std::to_string(first_calls) + ")";
  return v;
}

Verdict ac9() {
  Verdict v;
  Rng rng(9);
  auto cluster = [&](std::size_t n, double c, const std::string& prefix) {
    std::vector<ProjectedPoint> out;
    for (std::size_t i = 0; i < n; ++i)
      out.push_back({prefix + std::to_string(i), static_cast<float>(c + 0.4 * rng.normal()),
                     static_cast<float>(c + 0.4 * rng.normal())});
    return out;
  };
  const auto sft = cluster(300, 0, "s");
  auto pre = cluster(300, 0, "a");
  const auto far = cluster(300, 10, "b");
  pre.insert(pre.end(), far.begin(), far.end());
  std::ostringstream detail;
  for (auto crit : {Criterion::threshold, Criterion::ratio}) {
    DiffsetConfig c;
    c.criterion = crit;
    c.tau = crit == Criterion::threshold ? 0.7f : 1.0f;
    const auto d = extract_diffset(pre, sft, c);
    std::size_t in_a = 0, in_b = 0;
    for (std::size_t i = 0; i < d.size(); ++i)
      if (d[i].selected) ++(i < 300 ? in_a : in_b);
    const double fa = in_a / 300.0, fb = in_b / 300.0;
    if (fb < 0.95) v.fail(std::string(to_string(crit)) + ": second cluster coverage " + std::to_string(fb));
    if (fa > 0.05) v.fail(std::string(to_string(crit)) + ": first cluster share " + std::to_string(fa));
    detail << to_string(crit) << " A " << fa * 100 << "% B " << fb * 100 << "%; ";
  }
  if (v.ok) v.detail = detail.str();
  return v;
}

Verdict ac10() {
  Verdict v;
  const auto spec = testing_support::overlay_fixture_4x4();
  const auto svg = overlay_svg(spec);
  const std::filesystem::path golden = std::filesystem::path(GAPFILL_GOLDEN_DIR) / "overlay_4x4.svg";
  if (svg != testing_support::read_text(golden)) v.fail("SVG differs from " + golden.filename().string());
  if (svg != overlay_svg(spec)) v.fail("rendering not deterministic");
  static const std::regex re(R"re(data-layer="(\w+)" data-ix="(\d+)" data-iy="(\d+)"[^>]*fill="(#[0-9a-f]{6})")re");
  for (const auto& [layer, field, ramp] : {std::tuple{"base", &spec.base, spec.base_ramp},
                                           std::tuple{"overlay", &spec.overlay, spec.overlay_ramp}}) {
    const auto& vals = field->values;
    const auto arg = std::max_element(vals.begin(), vals.end()) - vals.begin();
    const std::size_t ax = arg % field->grid.nx, ay = arg / field->grid.nx;
    const auto darkest = color_ramp(ramp).color(1.0);
    std::size_t hits = 0;
    for (auto it = std::sregex_iterator(svg.begin(), svg.end(), re); it != std::sregex_iterator(); ++it) {
      if ((*it)[1] != layer || (*it)[4] != darkest) continue;
      ++hits;
      if (std::stoul((*it)[2]) != ax || std::stoul((*it)[3]) != ay) v.fail(std::string(layer) + " darkest cell off argmax");
    }
    if (hits != 1) v.fail(std::string(layer) + " has " + std::to_string(hits) + " darkest cells");
  }
  if (v.ok) v.detail = "golden match; darkest cells at argmax in both layers";
  return v;
}

}  // namespace

int main() {
  logger()->set_level(spdlog::level::err);
  struct Criterion_ {
    const char* name;
    std::function<Verdict()> run;
    double limit_s;  // 0 = no runtime bound
  };
  const std::vector<Criterion_> all = {{"AC1", ac1, 30}, {"AC2", ac2, 0},  {"AC3", ac3, 60}, {"AC4", ac4, 10},
                                       {"AC5", ac5, 0},  {"AC6", ac6, 0},  {"AC7", ac7, 0},  {"AC8", ac8, 60},
                                       {"AC9", ac9, 0},  {"AC10", ac10, 0}};
  int failures = 0;
  for (const auto& c : all) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v.fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0 && secs > c.limit_s) v.fail("took " + std::to_string(secs) + " s, limit " + std::to_string(c.limit_s));
    if (!v.ok) ++failures;
    std::printf("%s %s (%.2fs) %s\n", c.name, v.ok ? "PASS" : "FAIL", secs, v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
