#pragma once

// Plan-quality metrics on dose maps: dose score (relative and absolute),
// DVH curves, Dq statistics, DVH score, homogeneity index, difference maps,
// and a paired t-test across cases.
//
// Masks are float maps where any nonzero value selects the voxel.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "dosediff/phantom.hpp"

namespace dosediff::metrics {

using Dose = std::span<const double>;
using Mask = std::span<const float>;

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kRelativeFloor = 1e-3;  // prescription units
inline constexpr std::size_t kDvhBins = 256;
inline constexpr double kDvhMaxDose = data::kDoseScale;

namespace detail {

inline void check_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw MetricError(std::string(what) + ": size mismatch " + std::to_string(a) + " vs " + std::to_string(b));
}

inline std::vector<double> masked(Dose dose, Mask mask, const char* what) {
  check_same(dose.size(), mask.size(), what);
  std::vector<double> v;
  for (std::size_t i = 0; i < dose.size(); ++i)
    if (mask[i] != 0.0f) v.push_back(dose[i]);
  if (v.empty()) throw MetricError(std::string(what) + ": empty mask");
  return v;
}

}  // namespace detail

enum class ScoreVariant { Relative, Mae };

struct DoseScore {
  double value = 0.0;
  std::size_t used = 0;
  std::size_t excluded = 0;  // relative variant: truth at or below the floor
};

/// Relative: mean of (pred - truth) / truth over masked voxels with truth >
/// floor (signed). Mae: mean |pred - truth| over the mask.
inline DoseScore dose_score_detail(Dose pred, Dose truth, Mask mask, ScoreVariant variant) {
  detail::check_same(pred.size(), truth.size(), "dose_score");
  detail::check_same(pred.size(), mask.size(), "dose_score");
  DoseScore r;
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask[i] == 0.0f) continue;
    if (variant == ScoreVariant::Relative) {
      if (truth[i] <= kRelativeFloor) {
        ++r.excluded;
        continue;
      }
      sum += (pred[i] - truth[i]) / truth[i];
    } else {
      sum += std::abs(pred[i] - truth[i]);
    }
    ++r.used;
  }
  if (r.used == 0) {
    throw MetricError(r.excluded ? "dose_score: every masked voxel is below the relative floor" : "dose_score: empty mask");
  }
  r.value = sum / static_cast<double>(r.used);
  return r;
}

inline double dose_score(Dose pred, Dose truth, Mask mask, ScoreVariant variant) {
  return dose_score_detail(pred, truth, mask, variant).value;
}

struct DvhCurve {
  std::string structure;
  std::vector<double> dose;
  std::vector<double> volume_pct;
};

/// Percent of the structure receiving at least `threshold`.
inline double volume_at(Dose dose, Mask mask, double threshold) {
  const auto v = detail::masked(dose, mask, "volume_at");
  const auto n = std::count_if(v.begin(), v.end(), [&](double x) { return x >= threshold; });
  return 100.0 * static_cast<double>(n) / static_cast<double>(v.size());
}

/// Cumulative DVH on bin_count uniform thresholds from 0 to max_dose inclusive.
inline DvhCurve dvh_curve(Dose dose, Mask mask, std::size_t bin_count = kDvhBins, double max_dose = kDvhMaxDose,
                          std::string structure = {}) {
  if (bin_count < 2) throw MetricError("dvh_curve: need at least two bins");
  auto v = detail::masked(dose, mask, "dvh_curve");
  std::sort(v.begin(), v.end());
  DvhCurve c;
  c.structure = std::move(structure);
  for (std::size_t k = 0; k < bin_count; ++k) {
    const double d = max_dose * static_cast<double>(k) / static_cast<double>(bin_count - 1);
    const auto at_least = v.end() - std::lower_bound(v.begin(), v.end(), d);
    c.dose.push_back(d);
    c.volume_pct.push_back(100.0 * static_cast<double>(at_least) / static_cast<double>(v.size()));
  }
  return c;
}

/// Dq: masked doses sorted descending, element ceil(q/100 * N) - 1.
inline double d_stat(Dose dose, Mask mask, double q_percent) {
  if (!(q_percent > 0.0 && q_percent <= 100.0)) throw MetricError("d_stat: q must be in (0, 100]");
  auto v = detail::masked(dose, mask, "d_stat");
  std::sort(v.begin(), v.end(), std::greater<>());
  const auto n = static_cast<double>(v.size());
  auto idx = static_cast<std::size_t>(std::ceil(q_percent / 100.0 * n));
  idx = std::clamp<std::size_t>(idx, 1, v.size()) - 1;
  return v[idx];
}

inline constexpr double kDvhScoreQ[] = {1.0, 95.0, 99.0};

/// Mean of |Dq(pred) - Dq(truth)| over all (structure, q) pairs.
inline double dvh_score(Dose pred, Dose truth, const std::vector<Mask>& structures) {
  if (structures.empty()) throw MetricError("dvh_score: no structures");
  double sum = 0.0;
  std::size_t n = 0;
  for (const Mask& m : structures)
    for (double q : kDvhScoreQ) {
      sum += std::abs(d_stat(pred, m, q) - d_stat(truth, m, q));
      ++n;
    }
  return sum / static_cast<double>(n);
}

/// Population standard deviation over mean, within the region.
inline double homogeneity_index(Dose dose, Mask region) {
  const auto v = detail::masked(dose, region, "homogeneity_index");
  const auto n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  if (mean == 0.0) throw MetricError("homogeneity_index: zero mean dose");
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / n) / mean;
}

/// As homogeneity_index, but NaN when the region receives no dose at all
/// (an untrained model can predict exactly zero there).
inline double homogeneity_index_or_nan(Dose dose, Mask region) {
  const auto v = detail::masked(dose, region, "homogeneity_index");
  if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) return std::numeric_limits<double>::quiet_NaN();
  return homogeneity_index(dose, region);
}

inline std::vector<double> dose_difference_map(Dose pred, Dose truth) {
  detail::check_same(pred.size(), truth.size(), "dose_difference_map");
  std::vector<double> d(pred.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = pred[i] - truth[i];
  return d;
}

struct TTest {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

/// Paired two-sided t-test on a - b.
inline TTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  detail::check_same(a.size(), b.size(), "paired_t_test");
  if (a.size() < 2) throw MetricError("paired_t_test: need at least two pairs");
  const auto n = static_cast<double>(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  if (!(sd > 0.0)) throw MetricError("paired_t_test: differences have zero variance");
  TTest r;
  r.t = mean / (sd / std::sqrt(n));
  r.df = n - 1.0;
  const boost::math::students_t dist(r.df);
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

// ---------------------------------------------------------------------------
// Per-case report.

enum class Region { Body, Ptv };

inline std::string to_string(Region r) { return r == Region::Body ? "body" : "ptv"; }
inline Region parse_region(const std::string& s) {
  if (s == "body") return Region::Body;
  if (s == "ptv") return Region::Ptv;
  throw MetricError("unknown region '" + s + "' (expected body or ptv)");
}

struct MetricOptions {
  Region eval_region = Region::Body;
  Region hi_region = Region::Ptv;
  std::size_t dvh_bins = kDvhBins;
  double dvh_max_dose = kDvhMaxDose;
};

struct StructureStats {
  std::string name;
  double pred_d1 = 0, pred_d95 = 0, pred_d99 = 0;
  double truth_d1 = 0, truth_d95 = 0, truth_d99 = 0;
};

struct MetricsReport {
  std::string case_id;
  double dose_score_relative = 0.0;
  double dose_score_mae = 0.0;
  double dvh_score = 0.0;
  double hi = 0.0;        // prediction
  double hi_truth = 0.0;
  double max_abs_diff = 0.0;
  std::size_t relative_excluded = 0;
  std::string eval_mask, hi_mask;
  std::vector<StructureStats> structures;
};

struct NamedMask {
  std::string name;
  const std::vector<float>* mask;
};

inline std::vector<NamedMask> structures_of(const data::PhantomSample& s) {
  std::vector<NamedMask> out{{"PTV", &s.ptv}};
  for (std::size_t k = 0; k < s.oars.size(); ++k) out.push_back({"OAR" + std::to_string(k + 1), &s.oars[k]});
  return out;
}

inline std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

inline MetricsReport evaluate_case(const std::string& case_id, std::span<const float> pred_dose,
                                   const data::PhantomSample& truth, const MetricOptions& opt = {}) {
  const auto pred = to_double(pred_dose), gt = to_double(truth.dose);
  const auto body = data::body_mask(truth);
  const std::vector<float>& eval = opt.eval_region == Region::Body ? body : truth.ptv;
  const std::vector<float>& hi = opt.hi_region == Region::Body ? body : truth.ptv;

  MetricsReport r;
  r.case_id = case_id;
  r.eval_mask = to_string(opt.eval_region);
  r.hi_mask = to_string(opt.hi_region);
  const auto rel = dose_score_detail(pred, gt, eval, ScoreVariant::Relative);
  r.dose_score_relative = rel.value;
  r.relative_excluded = rel.excluded;
  r.dose_score_mae = dose_score(pred, gt, eval, ScoreVariant::Mae);
  std::vector<Mask> masks;
  for (const auto& s : structures_of(truth)) {
    masks.emplace_back(*s.mask);
    r.structures.push_back({s.name, d_stat(pred, *s.mask, 1), d_stat(pred, *s.mask, 95), d_stat(pred, *s.mask, 99),
                            d_stat(gt, *s.mask, 1), d_stat(gt, *s.mask, 95), d_stat(gt, *s.mask, 99)});
  }
  r.dvh_score = dvh_score(pred, gt, masks);
  r.hi = homogeneity_index_or_nan(pred, hi);
  r.hi_truth = homogeneity_index_or_nan(gt, hi);
  for (double d : dose_difference_map(pred, gt)) r.max_abs_diff = std::max(r.max_abs_diff, std::abs(d));
  return r;
}

// ---------------------------------------------------------------------------
// Text exports.

inline const char* kEvalCsvHeader = "case,dose_score_rel,dose_score_mae,dvh_score,hi";
inline const char* kDvhCsvHeader = "structure,dose,volume_pct";

inline std::string csv_row(const MetricsReport& r) {
  using data::format_double;
  return r.case_id + "," + format_double(r.dose_score_relative) + "," + format_double(r.dose_score_mae) + "," +
         format_double(r.dvh_score) + "," + format_double(r.hi);
}

inline std::string key_value_block(const MetricsReport& r) {
  using data::format_double;
  std::ostringstream os;
  os << "case=" << r.case_id << "\n"
     << "dose_score_relative=" << format_double(r.dose_score_relative) << "\n"
     << "dose_score_mae=" << format_double(r.dose_score_mae) << "\n"
     << "dvh_score=" << format_double(r.dvh_score) << "\n"
     << "hi=" << format_double(r.hi) << "\n"
     << "hi_truth=" << format_double(r.hi_truth) << "\n"
     << "max_abs_diff=" << format_double(r.max_abs_diff) << "\n"
     << "relative_excluded=" << r.relative_excluded << "\n"
     << "eval_mask=" << r.eval_mask << "\n"
     << "hi_mask=" << r.hi_mask << "\n";
  for (const auto& s : r.structures) {
    os << s.name << ".pred_D1=" << format_double(s.pred_d1) << "\n"
       << s.name << ".pred_D95=" << format_double(s.pred_d95) << "\n"
       << s.name << ".pred_D99=" << format_double(s.pred_d99) << "\n"
       << s.name << ".truth_D1=" << format_double(s.truth_d1) << "\n"
       << s.name << ".truth_D95=" << format_double(s.truth_d95) << "\n"
       << s.name << ".truth_D99=" << format_double(s.truth_d99) << "\n";
  }
  return os.str();
}

inline std::string dvh_csv(const std::vector<DvhCurve>& curves) {
  std::string out = std::string(kDvhCsvHeader) + "\n";
  for (const auto& c : curves)
    for (std::size_t k = 0; k < c.dose.size(); ++k)
      out += c.structure + "," + data::format_double(c.dose[k]) + "," + data::format_double(c.volume_pct[k]) + "\n";
  return out;
}

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single case
};

inline Summary summarize(std::span<const double> v) {
  if (v.empty()) throw MetricError("summarize: no values");
  const auto n = static_cast<double>(v.size());
  Summary s;
  for (double x : v) s.mean += x;
  s.mean /= n;
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

/// "1.901±1.087"
inline std::string mean_pm_std(const Summary& s, int decimals = 3) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.*f±%.*f", decimals, s.mean, decimals, s.std);
  return buf;
}

}  // namespace dosediff::metrics
