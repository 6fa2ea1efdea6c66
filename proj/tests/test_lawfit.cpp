#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "scalelab/lawfit.hpp"
#include "scalelab/rng.hpp"

using namespace scalelab;

namespace {

std::vector<CurvePoint> law_points(const PowerLaw& law, const std::vector<double>& fs) {
  std::vector<CurvePoint> pts;
  for (double f : fs) pts.push_back({f, law.predict(f)});
  return pts;
}

std::vector<double> log_spaced(double lo, double hi, int n) {
  std::vector<double> out;
  for (int i = 0; i < n; ++i)
    out.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1)));
  return out;
}

}  // namespace

TEST_CASE("noiseless recovery to 1e-6 relative") {
  PowerLaw truth{5.0, -0.4, 2.0};
  std::vector<CurvePoint> pts = law_points(truth, {1, 10, 100, 1000, 10000});
  for (auto obj : {FitConfig::Objective::huber_log, FitConfig::Objective::least_squares_log}) {
    FitConfig cfg;
    cfg.objective = obj;
    FitReport rep = fit_power_law(pts, cfg);
    CHECK(std::fabs(rep.law.a / truth.a - 1.0) <= 1e-6);
    CHECK(std::fabs(rep.law.b / truth.b - 1.0) <= 1e-6);
    CHECK(std::fabs(rep.law.c / truth.c - 1.0) <= 1e-6);
    CHECK(rep.objective_value <= 1e-12);
    CHECK(rep.residuals.size() == pts.size());
  }
}

TEST_CASE("fit validation") {
  PowerLaw truth{5.0, -0.4, 2.0};
  std::vector<CurvePoint> three = law_points(truth, {1, 10, 100});
  CHECK_THROWS_WITH_AS(fit_power_law(three), doctest::Contains("insufficient points"), ConfigError);
  std::vector<CurvePoint> flat = {{1, 3}, {1, 3}, {1, 3}, {1, 3}};
  CHECK_THROWS_AS(fit_power_law(flat), ConfigError);
  std::vector<CurvePoint> nonpos = {{1, 3}, {2, -1}, {3, 3}, {4, 3}};
  CHECK_THROWS_AS(fit_power_law(nonpos), ConfigError);
  // fitted c stays below min(loss)
  FitReport rep = fit_power_law(law_points(truth, {1, 3, 10, 100, 3000}));
  double min_l = 1e300;
  for (auto p : law_points(truth, {1, 3, 10, 100, 3000})) min_l = std::min(min_l, p.loss);
  CHECK(rep.law.c < min_l);
  CHECK(rep.law.b < 0);
  CHECK(rep.law.a > 0);
}

TEST_CASE("predict basics") {
  PowerLaw law{10, -0.3, 1.5};
  CHECK(law.predict(1.0) == doctest::Approx(11.5));
  CHECK(law.predict(1e15) == doctest::Approx(1.5).epsilon(1e-3));
  // strictly decreasing
  double prev = law.predict(0.5);
  for (double f = 1; f < 1e6; f *= 10) {
    double v = law.predict(f);
    CHECK(v < prev);
    prev = v;
  }
  CHECK_THROWS_AS(law.predict(0.0), ConfigError);
}

TEST_CASE("fitted crossover: analytic fixture") {
  PowerLaw l1{2.0, -0.5, 0.0}, l2{1.0, -0.25, 0.0};
  CrossoverReport rep = crossover_fitted(l1, l2, 0.1, 1e6);
  REQUIRE(rep.found);
  CHECK(std::fabs(rep.f_star / 16.0 - 1.0) <= 1e-6);
  CHECK(l1.predict(rep.f_star) == doctest::Approx(0.5).epsilon(1e-5));
  // symmetric under operand swap
  CrossoverReport swapped = crossover_fitted(l2, l1, 0.1, 1e6);
  REQUIRE(swapped.found);
  CHECK(swapped.f_star == rep.f_star);
}

TEST_CASE("fitted crossover: degenerate and dominated cases") {
  PowerLaw l{3.0, -0.4, 1.0};
  CrossoverReport same = crossover_fitted(l, l, 1, 1e6);
  CHECK_FALSE(same.found);
  CHECK(same.degenerate);

  PowerLaw lo{3.0, -0.4, 0.5}, hi{3.0, -0.4, 1.0};
  CrossoverReport dom = crossover_fitted(lo, hi, 1, 1e6);
  CHECK_FALSE(dom.found);
  CHECK_FALSE(dom.degenerate);
  CHECK_THROWS_AS(crossover_fitted(l, l, -1, 10), ConfigError);
}

TEST_CASE("empirical crossover: bracket and persistence") {
  // A starts above B, crosses between f=100 and f=200, stays below
  std::vector<CurvePoint> a = {{10, 5.0}, {50, 4.0}, {100, 3.5}, {200, 3.0}, {400, 2.8}, {800, 2.7}};
  std::vector<CurvePoint> b = {{10, 6.0}, {50, 4.5}, {100, 3.7}, {200, 2.9}, {400, 2.6}, {800, 2.4}};
  CrossoverReport rep = crossover_empirical(a, b, 2);
  REQUIRE(rep.found);
  CHECK(rep.f_lo == 100);
  CHECK(rep.f_hi == 200);
  CHECK(rep.persistent);

  // touch once then revert: no persistent crossing
  std::vector<CurvePoint> c = {{10, 5.0}, {100, 3.0}, {200, 3.2}, {400, 2.0}, {800, 1.5}};
  std::vector<CurvePoint> d = {{10, 5.5}, {100, 3.1}, {200, 3.1}, {400, 2.2}, {800, 1.8}};
  CrossoverReport touch = crossover_empirical(c, d, 2);
  CHECK_FALSE(touch.found);

  // disjoint support
  std::vector<CurvePoint> left = {{1, 4.0}, {2, 3.0}};
  std::vector<CurvePoint> right = {{100, 2.0}, {200, 1.0}};
  CHECK_THROWS_WITH_AS(crossover_empirical(left, right, 1), doctest::Contains("no common support"),
                       DataError);
}

TEST_CASE("empirical crossover is invariant to re-gridding") {
  // diff(f) = 4 f^-0.5 - 2 f^-0.3 - 0.2: positive at f=1, negative for large f
  PowerLaw la{4.0, -0.5, 2.0}, lb{2.0, -0.3, 2.2};
  std::vector<CurvePoint> a5 = law_points(la, log_spaced(1, 1e6, 9));
  std::vector<CurvePoint> b5 = law_points(lb, log_spaced(1, 1e6, 9));
  CrossoverReport coarse = crossover_empirical(a5, b5, 2);
  std::vector<CurvePoint> a9 = law_points(la, log_spaced(1, 1e6, 33));
  std::vector<CurvePoint> b9 = law_points(lb, log_spaced(1, 1e6, 33));
  CrossoverReport fine = crossover_empirical(a9, b9, 2);
  REQUIRE(coarse.found);
  REQUIRE(fine.found);
  // the fine bracket lives inside the coarse one
  CHECK(fine.f_lo >= coarse.f_lo * 0.999);
  CHECK(fine.f_hi <= coarse.f_hi * 1.001);
}

TEST_CASE("monte-carlo recovery under 1%% log-normal noise (smoke)") {
  PowerLaw truth{5.0, -0.4, 2.0};
  std::vector<double> fs = log_spaced(1, 1e4, 20);
  std::vector<double> db, dc;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<CurvePoint> pts;
    for (double f : fs) pts.push_back({f, truth.predict(f) * std::exp(0.01 * rng.normal())});
    FitReport rep = fit_power_law(pts);
    db.push_back(std::fabs(rep.law.b - truth.b));
    dc.push_back(std::fabs(rep.law.c / truth.c - 1.0));
  }
  std::sort(db.begin(), db.end());
  std::sort(dc.begin(), dc.end());
  CHECK(db[db.size() / 2] <= 0.02);
  CHECK(dc[dc.size() / 2] <= 0.01);
}

TEST_CASE("extrapolation report") {
  PowerLaw truth{6.0, -0.35, 1.8};
  std::vector<double> fs = log_spaced(1, 1e5, 10);

  // model-true data: no deviation onset
  ExtrapolationReport clean = extrapolation_report(law_points(truth, fs), {PrefixRule::Kind::first_k, 5, 0});
  CHECK(clean.fit_label == "k=5");
  CHECK(clean.prefix_points == 5);
  CHECK(std::isinf(clean.onset_f));
  CHECK(std::isinf(clean.extrapolation_multiple));

  // curve departs from the law beyond f = 1e3
  std::vector<CurvePoint> bent = law_points(truth, fs);
  for (CurvePoint& p : bent)
    if (p.f > 1e3) p.loss *= 1.10;  // 10% departure
  ExtrapolationReport rep = extrapolation_report(bent, {PrefixRule::Kind::first_k, 5, 0});
  CHECK(std::isfinite(rep.onset_f));
  CHECK(rep.onset_f > 1e3);
  CHECK(rep.extrapolation_multiple == doctest::Approx(rep.onset_f / rep.f_max_fit));

  // f-threshold prefix labels differently; prefix covering everything errors
  ExtrapolationReport byf = extrapolation_report(bent, {PrefixRule::Kind::f_max, 0, 50.0});
  CHECK(byf.fit_label == "f<=50");
  CHECK_THROWS_AS(extrapolation_report(bent, {PrefixRule::Kind::f_max, 0, 1e9}), ConfigError);
  std::vector<CurvePoint> five = law_points(truth, log_spaced(1, 100, 5));
  CHECK_THROWS_AS(extrapolation_report(five, {PrefixRule::Kind::first_k, 5, 0}), ConfigError);
}

TEST_CASE("curve csv round trip") {
  namespace fs2 = std::filesystem;
  std::string path = (fs2::temp_directory_path() / "slab_curve_test.csv").string();
  std::vector<CurvePoint> pts = {{1.5e10, 4.25}, {3e11, 3.875}, {9e12, 3.5}};
  write_curve_csv(path, pts);
  std::vector<CurvePoint> back = read_curve_csv(path);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].f == doctest::Approx(pts[i].f).epsilon(1e-10));
    CHECK(back[i].loss == doctest::Approx(pts[i].loss).epsilon(1e-10));
  }
  fs2::remove(path);
  CHECK_THROWS_AS(read_curve_csv(path), DataError);
}
