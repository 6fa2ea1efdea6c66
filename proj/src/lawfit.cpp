#include "scalelab/lawfit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace scalelab {

double PowerLaw::predict(double f) const {
  if (f <= 0) throw ConfigError("predict: f must be positive");
  return a * std::pow(f, b) + c;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Problem {
  const std::vector<CurvePoint>* pts;
  FitConfig cfg;
  double c_hi;  // upper bound for c (just below min loss)

  // parameters x = (log a, b, c)
  double objective(const double* x) const {
    double a = std::exp(x[0]), b = x[1], c = x[2];
    if (b >= 0 || c < 0 || c > c_hi) return kInf;
    double total = 0;
    for (const CurvePoint& p : *pts) {
      double y = a * std::pow(p.f, b) + c;
      if (y <= 0) return kInf;
      double r = std::log(y) - std::log(p.loss);
      if (cfg.objective == FitConfig::Objective::least_squares_log) {
        total += r * r;
      } else {
        double ar = std::fabs(r), d = cfg.huber_delta;
        total += ar <= d ? 0.5 * r * r : d * (ar - 0.5 * d);
      }
    }
    return total;
  }

  void residuals_jacobian(const double* x, std::vector<double>& r,
                          std::vector<std::array<double, 3>>& J) const {
    double a = std::exp(x[0]), b = x[1], c = x[2];
    size_t n = pts->size();
    r.resize(n);
    J.resize(n);
    for (size_t i = 0; i < n; ++i) {
      const CurvePoint& p = (*pts)[i];
      double m = a * std::pow(p.f, b);
      double y = m + c;
      r[i] = std::log(y) - std::log(p.loss);
      J[i] = {m / y, m * std::log(p.f) / y, 1.0 / y};
    }
  }
};

// Nelder-Mead on 3 parameters with box handling through the objective.
void nelder_mead(const Problem& prob, double* x, int max_iters, double tol) {
  constexpr int n = 3;
  double simplex[n + 1][n];
  double fv[n + 1];
  for (int i = 0; i <= n; ++i) {
    for (int j = 0; j < n; ++j) simplex[i][j] = x[j];
    if (i > 0) {
      double step = std::fabs(simplex[i][i - 1]) > 1e-8 ? 0.05 * std::fabs(simplex[i][i - 1]) : 0.01;
      simplex[i][i - 1] += step;
    }
    fv[i] = prob.objective(simplex[i]);
  }
  for (int iter = 0; iter < max_iters; ++iter) {
    int order[n + 1] = {0, 1, 2, 3};
    std::sort(order, order + n + 1, [&](int a, int b) { return fv[a] < fv[b]; });
    int best = order[0], worst = order[n], second = order[n - 1];
    if (std::isfinite(fv[best]) && fv[worst] - fv[best] < tol * (std::fabs(fv[best]) + tol)) break;
    double centroid[n] = {0, 0, 0};
    for (int i = 0; i <= n; ++i)
      if (i != worst)
        for (int j = 0; j < n; ++j) centroid[j] += simplex[i][j] / n;
    auto blend = [&](double t, double* out) {
      for (int j = 0; j < n; ++j) out[j] = centroid[j] + t * (simplex[worst][j] - centroid[j]);
    };
    double xr[n];
    blend(-1.0, xr);
    double fr = prob.objective(xr);
    if (fr < fv[best]) {
      double xe[n];
      blend(-2.0, xe);
      double fe = prob.objective(xe);
      const double* take = fe < fr ? xe : xr;
      double ft = std::min(fe, fr);
      std::copy(take, take + n, simplex[worst]);
      fv[worst] = ft;
    } else if (fr < fv[second]) {
      std::copy(xr, xr + n, simplex[worst]);
      fv[worst] = fr;
    } else {
      double xc[n];
      blend(0.5, xc);
      double fc = prob.objective(xc);
      if (fc < fv[worst]) {
        std::copy(xc, xc + n, simplex[worst]);
        fv[worst] = fc;
      } else {
        for (int i = 0; i <= n; ++i) {
          if (i == best) continue;
          for (int j = 0; j < n; ++j)
            simplex[i][j] = simplex[best][j] + 0.5 * (simplex[i][j] - simplex[best][j]);
          fv[i] = prob.objective(simplex[i]);
        }
      }
    }
  }
  int best = 0;
  for (int i = 1; i <= n; ++i)
    if (fv[i] < fv[best]) best = i;
  std::copy(simplex[best], simplex[best] + n, x);
}

// Damped Gauss-Newton polish with Huber IRLS weights; clamps to the box.
bool lm_polish(const Problem& prob, double* x, int iters) {
  std::vector<double> r;
  std::vector<std::array<double, 3>> J;
  double lambda = 1e-8;
  double fx = prob.objective(x);
  bool improved = false;
  for (int it = 0; it < iters; ++it) {
    prob.residuals_jacobian(x, r, J);
    double A[3][3] = {};
    double g[3] = {};
    for (size_t i = 0; i < r.size(); ++i) {
      double w = 1.0;
      if (prob.cfg.objective == FitConfig::Objective::huber_log) {
        double ar = std::fabs(r[i]);
        if (ar > prob.cfg.huber_delta) w = prob.cfg.huber_delta / ar;
      }
      for (int p = 0; p < 3; ++p) {
        g[p] += w * J[i][p] * r[i];
        for (int q = 0; q < 3; ++q) A[p][q] += w * J[i][p] * J[i][q];
      }
    }
    for (int p = 0; p < 3; ++p) A[p][p] += lambda * (1.0 + A[p][p]);
    // solve A dx = -g (Gaussian elimination, 3x3)
    double M[3][4];
    for (int p = 0; p < 3; ++p) {
      for (int q = 0; q < 3; ++q) M[p][q] = A[p][q];
      M[p][3] = -g[p];
    }
    for (int col = 0; col < 3; ++col) {
      int piv = col;
      for (int row = col + 1; row < 3; ++row)
        if (std::fabs(M[row][col]) > std::fabs(M[piv][col])) piv = row;
      if (std::fabs(M[piv][col]) < 1e-300) return improved;
      std::swap(M[piv], M[col]);
      for (int row = 0; row < 3; ++row) {
        if (row == col) continue;
        double fscale = M[row][col] / M[col][col];
        for (int q = col; q < 4; ++q) M[row][q] -= fscale * M[col][q];
      }
    }
    double nx[3];
    for (int p = 0; p < 3; ++p) nx[p] = x[p] + M[p][3] / M[p][p];
    nx[1] = std::min(nx[1], -1e-9);
    nx[2] = std::clamp(nx[2], 0.0, prob.c_hi);
    double fn = prob.objective(nx);
    if (fn < fx) {
      std::copy(nx, nx + 3, x);
      fx = fn;
      lambda = std::max(lambda * 0.3, 1e-14);
      improved = true;
      if (fx < 1e-30) break;
    } else {
      lambda *= 10;
      if (lambda > 1e8) break;
    }
  }
  return improved;
}

}  // namespace

FitReport fit_power_law(const std::vector<CurvePoint>& points, const FitConfig& cfg) {
  if (points.size() < 4) throw ConfigError("insufficient points: power-law fit needs >= 4");
  double min_l = kInf, min_f = kInf, max_f = -kInf;
  for (const CurvePoint& p : points) {
    if (!(p.f > 0) || !(p.loss > 0))
      throw ConfigError("power-law fit needs positive flops and losses");
    min_l = std::min(min_l, p.loss);
    min_f = std::min(min_f, p.f);
    max_f = std::max(max_f, p.f);
  }
  if (min_f == max_f) throw ConfigError("power-law fit needs distinct flops values");

  Problem prob{&points, cfg, 0.999999 * min_l};

  FitReport best;
  best.objective_value = kInf;
  for (double b0 = cfg.b_lo; b0 <= cfg.b_hi + 1e-12; b0 += cfg.b_step) {
    for (int ci = 0; ci < cfg.n_c; ++ci) {
      double c0 = cfg.c_frac * min_l * static_cast<double>(ci) / std::max(1, cfg.n_c - 1);
      // closed-form log a given (b, c): regress log(l - c) on b*log f
      double loga = 0;
      int used = 0;
      for (const CurvePoint& p : points) {
        double resid = p.loss - c0;
        if (resid <= 0) continue;
        loga += std::log(resid) - b0 * std::log(p.f);
        ++used;
      }
      if (used == 0) continue;
      double x[3] = {loga / used, b0, std::min(c0, prob.c_hi)};
      ++best.n_starts;
      nelder_mead(prob, x, cfg.max_iters, cfg.tol);
      lm_polish(prob, x, 60);
      double fx = prob.objective(x);
      if (fx < best.objective_value) {
        best.objective_value = fx;
        best.law = PowerLaw{std::exp(x[0]), x[1], x[2]};
        best.converged = true;
      }
    }
  }
  if (!std::isfinite(best.objective_value))
    throw NumericError("power-law fit found no finite optimum in the search region");
  best.residuals.reserve(points.size());
  for (const CurvePoint& p : points)
    best.residuals.push_back(std::log(best.law.predict(p.f)) - std::log(p.loss));
  return best;
}

CrossoverReport crossover_fitted(const PowerLaw& law1, const PowerLaw& law2, double f_lo,
                                 double f_hi, double tol_logf) {
  if (!(f_lo > 0) || !(f_lo < f_hi)) throw ConfigError("crossover range must satisfy 0 < lo < hi");
  CrossoverReport rep;
  rep.kind = CrossoverReport::Kind::fitted;
  auto diff = [&](double lf) { return law1.predict(std::exp(lf)) - law2.predict(std::exp(lf)); };

  const int kScan = 512;
  double llo = std::log(f_lo), lhi = std::log(f_hi);
  double prev_lf = llo, prev_d = diff(llo);
  bool all_zero = std::fabs(prev_d) < 1e-300;
  for (int i = 1; i <= kScan; ++i) {
    double lf = llo + (lhi - llo) * static_cast<double>(i) / kScan;
    double d = diff(lf);
    all_zero = all_zero && std::fabs(d) < 1e-300;
    if ((prev_d < 0 && d > 0) || (prev_d > 0 && d < 0)) {
      double a = prev_lf, b = lf, da = prev_d;
      while (b - a > tol_logf) {
        double mid = 0.5 * (a + b);
        double dm = diff(mid);
        if ((da < 0 && dm < 0) || (da > 0 && dm > 0)) {
          a = mid;
          da = dm;
        } else {
          b = mid;
        }
      }
      rep.found = true;
      rep.f_star = std::exp(0.5 * (a + b));
      return rep;
    }
    if (prev_d == 0 && d != 0 && i >= 2) {
      // exact touch at a scan point: treat as the crossing location
      rep.found = true;
      rep.f_star = std::exp(prev_lf);
      return rep;
    }
    prev_lf = lf;
    prev_d = d;
  }
  rep.degenerate = all_zero;
  return rep;
}

CrossoverReport crossover_empirical(const std::vector<CurvePoint>& curve_a,
                                    const std::vector<CurvePoint>& curve_b, int persistence_k) {
  if (curve_a.size() < 2 || curve_b.size() < 2)
    throw ConfigError("empirical crossover needs >= 2 points per curve");
  auto sorted = [](std::vector<CurvePoint> c) {
    std::sort(c.begin(), c.end(), [](const CurvePoint& x, const CurvePoint& y) { return x.f < y.f; });
    return c;
  };
  std::vector<CurvePoint> a = sorted(curve_a), b = sorted(curve_b);
  double lo = std::max(a.front().f, b.front().f);
  double hi = std::min(a.back().f, b.back().f);
  if (!(lo <= hi)) throw DataError("no common support between curves");

  std::vector<double> grid;
  for (const CurvePoint& p : a)
    if (p.f >= lo && p.f <= hi) grid.push_back(p.f);
  for (const CurvePoint& p : b)
    if (p.f >= lo && p.f <= hi) grid.push_back(p.f);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  auto interp = [](const std::vector<CurvePoint>& c, double f) {
    // piecewise linear in (log f, loss)
    if (f <= c.front().f) return c.front().loss;
    if (f >= c.back().f) return c.back().loss;
    size_t j = 1;
    while (c[j].f < f) ++j;
    double x0 = std::log(c[j - 1].f), x1 = std::log(c[j].f);
    double t = (std::log(f) - x0) / (x1 - x0);
    return c[j - 1].loss + t * (c[j].loss - c[j - 1].loss);
  };

  CrossoverReport rep;
  rep.kind = CrossoverReport::Kind::empirical;
  std::vector<double> d(grid.size());
  for (size_t i = 0; i < grid.size(); ++i) d[i] = interp(a, grid[i]) - interp(b, grid[i]);

  auto sgn = [](double x) { return x > 0 ? 1 : (x < 0 ? -1 : 0); };
  int last_sign = 0;
  for (size_t i = 0; i < grid.size(); ++i) {
    int s = sgn(d[i]);
    if (s == 0) continue;
    if (last_sign != 0 && s != last_sign) {
      // candidate crossing in (grid[i-1], grid[i]); check persistence
      bool persistent = true;
      int confirmed = 0;
      for (size_t j = i + 1; j < grid.size() && confirmed < persistence_k; ++j) {
        int sj = sgn(d[j]);
        if (sj == 0) continue;
        if (sj != s) {
          persistent = false;
          break;
        }
        ++confirmed;
      }
      if (persistent && confirmed >= persistence_k) {
        rep.found = true;
        rep.persistent = true;
        rep.f_lo = grid[i - 1];
        rep.f_hi = grid[i];
        return rep;
      }
    }
    last_sign = s;
  }
  return rep;
}

ExtrapolationReport extrapolation_report(const std::vector<CurvePoint>& points,
                                         const PrefixRule& prefix, const FitConfig& cfg,
                                         double deviation_tol) {
  if (points.size() < 6) throw ConfigError("extrapolation report needs >= 6 points");
  std::vector<CurvePoint> sorted = points;
  std::sort(sorted.begin(), sorted.end(),
            [](const CurvePoint& x, const CurvePoint& y) { return x.f < y.f; });
  std::vector<CurvePoint> fit_pts;
  char label[64];
  if (prefix.kind == PrefixRule::Kind::first_k) {
    if (prefix.k < 4) throw ConfigError("prefix k must be >= 4");
    fit_pts.assign(sorted.begin(), sorted.begin() + std::min<size_t>(sorted.size(), static_cast<size_t>(prefix.k)));
    std::snprintf(label, sizeof(label), "k=%d", prefix.k);
  } else {
    for (const CurvePoint& p : sorted)
      if (p.f <= prefix.f_threshold) fit_pts.push_back(p);
    std::snprintf(label, sizeof(label), "f<=%g", prefix.f_threshold);
  }
  if (fit_pts.size() >= sorted.size())
    throw ConfigError("prefix covers all points; nothing to hold out");

  ExtrapolationReport rep;
  rep.fit_label = label;
  rep.prefix_points = static_cast<int>(fit_pts.size());
  rep.f_max_fit = fit_pts.back().f;
  rep.deviation_tol = deviation_tol;
  rep.law = fit_power_law(fit_pts, cfg).law;
  rep.onset_f = kInf;
  rep.extrapolation_multiple = kInf;
  for (size_t i = fit_pts.size(); i < sorted.size(); ++i) {
    HoldoutPoint h;
    h.f = sorted[i].f;
    h.observed = sorted[i].loss;
    h.predicted = rep.law.predict(h.f);
    h.rel_dev = std::fabs(h.predicted - h.observed) / h.observed;
    rep.holdout.push_back(h);
    if (h.rel_dev > deviation_tol && rep.onset_f == kInf) {
      rep.onset_f = h.f;
      rep.extrapolation_multiple = h.f / rep.f_max_fit;
    }
  }
  return rep;
}

std::vector<CurvePoint> read_curve_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read curve csv " + path);
  std::vector<CurvePoint> out;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.find("f") != std::string::npos && line.find_first_of("0123456789") == std::string::npos)
        continue;  // header row
    }
    double fv = 0, lv = 0;
    if (std::sscanf(line.c_str(), "%lf,%lf", &fv, &lv) != 2)
      throw DataError("bad curve row in " + path + ": " + line);
    out.push_back({fv, lv});
  }
  if (out.empty()) throw DataError("empty curve csv " + path);
  return out;
}

void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& points) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write curve csv " + path);
  f << "f,loss\n";
  char buf[80];
  for (const CurvePoint& p : points) {
    std::snprintf(buf, sizeof(buf), "%.12g,%.12g\n", p.f, p.loss);
    f << buf;
  }
}

}  // namespace scalelab
