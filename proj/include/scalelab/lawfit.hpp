#pragma once

#include <optional>
#include <string>
#include <vector>

#include "scalelab/common.hpp"

namespace scalelab {

struct CurvePoint {
  double f = 0;     // training compute (flops)
  double loss = 0;  // nats
};

// L(f) = a * f^b + c with a > 0, b < 0, c >= 0: strictly decreasing in f,
// approaching c from above.
struct PowerLaw {
  double a = 1, b = -0.5, c = 0;
  double predict(double f) const;
};

struct FitConfig {
  enum class Objective { least_squares_log, huber_log };
  Objective objective = Objective::huber_log;
  double huber_delta = 1e-3;
  // multi-start grid: b in [b_lo, b_hi] step b_step; c in n_c values over
  // [0, c_frac * min(loss)]; log a solved in closed form per start
  double b_lo = -0.9, b_hi = -0.05, b_step = 0.05;
  int n_c = 10;
  double c_frac = 0.95;
  int max_iters = 400;
  double tol = 1e-13;
};

struct FitReport {
  PowerLaw law;
  double objective_value = 0;
  std::vector<double> residuals;  // log-space, per point
  int n_starts = 0;
  bool converged = false;
};

// Robust log-space fit of (a, b, c); c is constrained below min(loss).
FitReport fit_power_law(const std::vector<CurvePoint>& points, const FitConfig& cfg = {});

struct CrossoverReport {
  enum class Kind { fitted, empirical };
  Kind kind = Kind::fitted;
  bool found = false;
  bool degenerate = false;  // identical laws / identically-zero difference
  double f_star = 0;        // fitted
  double f_lo = 0, f_hi = 0;  // empirical bracket (adjacent grid values)
  bool persistent = false;
};

// Root of predict(a) - predict(b) by bisection on log f; smallest root in
// range; not-found when the difference never changes sign.
CrossoverReport crossover_fitted(const PowerLaw& law1, const PowerLaw& law2, double f_lo,
                                 double f_hi, double tol_logf = 1e-6);

// Piecewise-linear interpolation in (log f, loss) on the shared grid of both
// curves; returns the smallest bracket where the difference changes sign and
// keeps the new sign for >= persistence_k subsequent shared grid points.
CrossoverReport crossover_empirical(const std::vector<CurvePoint>& curve_a,
                                    const std::vector<CurvePoint>& curve_b, int persistence_k = 2);

struct PrefixRule {
  enum class Kind { first_k, f_max };
  Kind kind = Kind::first_k;
  int k = 5;
  double f_threshold = 0;
};

struct HoldoutPoint {
  double f = 0, observed = 0, predicted = 0, rel_dev = 0;
};

struct ExtrapolationReport {
  PowerLaw law;
  std::string fit_label;  // e.g. "k=5"
  int prefix_points = 0;
  double f_max_fit = 0;
  std::vector<HoldoutPoint> holdout;
  double deviation_tol = 0.01;
  double onset_f = 0;                  // inf when the law holds over all holdout points
  double extrapolation_multiple = 0;   // onset_f / f_max_fit (inf when no onset)
};

ExtrapolationReport extrapolation_report(const std::vector<CurvePoint>& points,
                                         const PrefixRule& prefix, const FitConfig& cfg = {},
                                         double deviation_tol = 0.01);

// CSV exchange format: header "f,loss", one point per line.
std::vector<CurvePoint> read_curve_csv(const std::string& path);
void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& points);

}  // namespace scalelab
