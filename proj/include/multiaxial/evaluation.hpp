#pragma once

// Scoring of label volumes against references: per-class Dice, subject
// and cohort summaries, parcellation-to-tissue mapping, paired
// significance tests, and report I/O (CSV and structured text).

#include <algorithm>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "multiaxial/error.hpp"
#include "multiaxial/image.hpp"
#include "multiaxial/volume_core.hpp"

namespace multiaxial::eval {

using Score = std::optional<double>;  // empty: class absent from both volumes

inline std::vector<int> all_classes() {
  std::vector<int> c(kNumClasses);
  std::iota(c.begin(), c.end(), 0);
  return c;
}

inline std::vector<int> brain_classes() { return {kWhiteMatter, kGrayMatter}; }

struct DiceCounts {
  std::vector<std::int64_t> pred, truth, both;  // indexed by class code
};

/// Voxel tallies per class code; voxels with a nonzero `exclude` entry are
/// skipped.
template <class P, class T>
DiceCounts count_overlap(const Grid3<P>& pred, const Grid3<T>& truth, int max_code = 255,
                         const Grid3<std::uint8_t>* exclude = nullptr) {
  if (pred.dims() != truth.dims()) throw ShapeError("dice: prediction and reference grids differ in size");
  if (exclude && exclude->dims() != pred.dims()) throw ShapeError("dice: exclusion mask grid differs in size");
  DiceCounts c;
  const auto n = static_cast<std::size_t>(max_code + 1);
  c.pred.assign(n, 0);
  c.truth.assign(n, 0);
  c.both.assign(n, 0);
  for (std::size_t v = 0; v < pred.size(); ++v) {
    if (exclude && (*exclude)[v]) continue;
    const auto p = static_cast<std::int64_t>(pred[v]), t = static_cast<std::int64_t>(truth[v]);
    if (p >= 0 && p <= max_code) ++c.pred[p];
    if (t >= 0 && t <= max_code) ++c.truth[t];
    if (p == t && p >= 0 && p <= max_code) ++c.both[p];
  }
  return c;
}

inline Score dice_from_counts(const DiceCounts& c, int code) {
  const auto denom = c.pred[code] + c.truth[code];
  if (denom == 0) return std::nullopt;
  return 2.0 * static_cast<double>(c.both[code]) / static_cast<double>(denom);
}

/// 2|P_c & T_c| / (|P_c| + |T_c|) per requested class.
template <class P, class T>
std::vector<Score> dice_per_class(const Grid3<P>& pred, const Grid3<T>& truth,
                                  const std::vector<int>& classes = all_classes(),
                                  const Grid3<std::uint8_t>* exclude = nullptr) {
  const int max_code = classes.empty() ? 0 : *std::max_element(classes.begin(), classes.end());
  const auto counts = count_overlap(pred, truth, max_code, exclude);
  std::vector<Score> out;
  for (int c : classes) out.push_back(c < 0 ? std::nullopt : dice_from_counts(counts, c));
  return out;
}

template <class P, class T>
std::vector<Score> dice_per_class(const Image<P>& pred, const Image<T>& truth,
                                  const std::vector<int>& classes = all_classes(),
                                  const Grid3<std::uint8_t>* exclude = nullptr) {
  require_same_geometry(pred, truth, "dice");
  return dice_per_class(pred.grid, truth.grid, classes, exclude);
}

/// Unweighted mean over the defined scores.
inline double subject_score(const std::vector<Score>& scores) {
  double s = 0;
  int n = 0;
  for (const auto& x : scores)
    if (x) s += *x, ++n;
  if (n == 0) throw DomainError("subject score: every class in the subset is undefined");
  return s / n;
}

/// Mean over `subset` (class codes) of per-class scores listed for `classes`.
inline double subject_score(const std::vector<Score>& scores, const std::vector<int>& classes,
                            const std::vector<int>& subset) {
  std::vector<Score> picked;
  for (int c : subset) {
    const auto it = std::find(classes.begin(), classes.end(), c);
    if (it == classes.end()) throw DomainError("class " + std::to_string(c) + " is not among the scored classes");
    picked.push_back(scores[static_cast<std::size_t>(it - classes.begin())]);
  }
  return subject_score(picked);
}

struct CohortStats {
  std::int64_t n = 0;
  double median = 0, iqr = 0, mean = 0, std = 0;
  bool std_defined = false;  // false for a single subject (std reported as 0)

  bool operator==(const CohortStats&) const = default;
};

/// Median and IQR use the linear-interpolation percentile; std uses n-1.
inline CohortStats cohort_stats(const std::vector<double>& scores) {
  if (scores.empty()) throw DomainError("cohort statistics of an empty set");
  CohortStats s;
  s.n = static_cast<std::int64_t>(scores.size());
  s.median = percentile(std::span<const double>(scores), 0.5);
  s.iqr = percentile(std::span<const double>(scores), 0.75) - percentile(std::span<const double>(scores), 0.25);
  s.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0;
    for (double x : scores) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
    s.std_defined = true;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Parcellation mapping

struct ParcelEntry {
  std::int32_t code = 0;
  std::int64_t voxels = 0;
  std::int64_t wm_overlap = 0;
  std::int64_t gm_overlap = 0;
  std::uint8_t tissue = kBackground;  // 2, 3, or 0 when excluded
  bool excluded = false;              // user-excluded, or no WM/GM overlap

  bool operator==(const ParcelEntry&) const = default;
};

struct ParcelMapping {
  std::vector<ParcelEntry> entries;  // one per parcel code, ascending

  const ParcelEntry& at(std::int32_t code) const {
    for (const auto& e : entries)
      if (e.code == code) return e;
    throw DomainError("parcel code " + std::to_string(code) + " not in mapping");
  }
};

struct ParcelRemap {
  ParcelMapping mapping;
  LabelVolume remapped;              // codes {0, 2, 3}
  Grid3<std::uint8_t> exclusion;     // 1 where the parcel was user-excluded
};

/// Assigns each parcel code to WM or GM by majority overlap with the
/// reference (ties to GM). Code 0 is unlabeled and maps to background;
/// parcels overlapping neither tissue, and codes in `excluded`, map to
/// background as well.
inline ParcelRemap map_parcellation(const ParcelVolume& parcels, const LabelVolume& truth,
                                    const std::set<std::int32_t>& excluded = {}) {
  require_same_geometry(parcels, truth, "map_parcellation");
  std::map<std::int32_t, ParcelEntry> table;
  for (std::size_t v = 0; v < parcels.grid.size(); ++v) {
    auto& e = table[parcels.grid[v]];
    e.code = parcels.grid[v];
    ++e.voxels;
    if (truth.grid[v] == kWhiteMatter) ++e.wm_overlap;
    if (truth.grid[v] == kGrayMatter) ++e.gm_overlap;
  }
  ParcelRemap out;
  for (auto& [code, e] : table) {
    if (code == 0) {
      e.tissue = kBackground;
    } else if (excluded.count(code) || (e.wm_overlap == 0 && e.gm_overlap == 0)) {
      e.tissue = kBackground;
      e.excluded = true;
    } else {
      e.tissue = e.wm_overlap > e.gm_overlap ? kWhiteMatter : kGrayMatter;
    }
    out.mapping.entries.push_back(e);
  }
  out.remapped.grid = Grid3<std::uint8_t>(parcels.dims());
  out.remapped.affine = parcels.affine;
  out.exclusion = Grid3<std::uint8_t>(parcels.dims());
  for (std::size_t v = 0; v < parcels.grid.size(); ++v) {
    const auto code = parcels.grid[v];
    out.remapped.grid[v] = table[code].tissue;
    out.exclusion[v] = excluded.count(code) ? 1 : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Significance tests

struct TestResult {
  std::string name;        // "wilcoxon" or "friedman"
  std::string comparison;  // free-form label
  double statistic = 0;
  double p = 1;
  std::int64_t n = 0;      // nonzero pairs (wilcoxon) or subjects (friedman)
  std::string method;      // "exact", "normal", "chi2"
  bool degenerate = false;

  bool operator==(const TestResult&) const = default;
};

/// Average ranks (1-based) of `v`; ties share the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline constexpr std::int64_t kWilcoxonExactMax = 12;

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; W = min(W+, W-). Exact sign enumeration for n <= 12, else a
/// normal approximation with tie and continuity corrections.
inline TestResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                       std::string comparison = {}) {
  if (a.size() != b.size()) throw ShapeError("wilcoxon: paired samples differ in length");
  TestResult r{"wilcoxon", std::move(comparison)};
  std::vector<double> diff, mag;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (b[i] - a[i] != 0.0) {
      diff.push_back(b[i] - a[i]);
      mag.push_back(std::abs(b[i] - a[i]));
    }
  r.n = static_cast<std::int64_t>(diff.size());
  if (r.n == 0) {
    r.degenerate = true;
    r.method = "none";
    return r;
  }
  if (r.n < 5) throw DomainError("wilcoxon: need at least 5 nonzero differences, have " + std::to_string(r.n));
  const auto ranks = average_ranks(mag);
  double wp = 0, wm = 0;
  for (std::size_t i = 0; i < diff.size(); ++i) (diff[i] > 0 ? wp : wm) += ranks[i];
  r.statistic = std::min(wp, wm);

  if (r.n <= kWilcoxonExactMax) {
    // Distribution of W+ over all 2^n sign patterns, on doubled ranks so
    // average (half-integer) ranks stay integral.
    std::vector<int> doubled;
    int total = 0;
    for (double x : ranks) {
      doubled.push_back(static_cast<int>(std::lround(2 * x)));
      total += doubled.back();
    }
    std::vector<double> ways(static_cast<std::size_t>(total + 1), 0.0);
    ways[0] = 1;
    for (int d : doubled)
      for (int s = total; s >= d; --s) ways[s] += ways[s - d];
    const double patterns = std::ldexp(1.0, static_cast<int>(r.n));
    const auto w2 = static_cast<int>(std::lround(2 * r.statistic));
    double tail = 0;
    for (int s = 0; s <= std::min(w2, total); ++s) tail += ways[s];
    r.p = std::min(1.0, 2.0 * tail / patterns);
    r.method = "exact";
  } else {
    const double n = static_cast<double>(r.n);
    double ties = 0;
    std::map<double, int> groups;
    for (double x : ranks) ++groups[x];
    for (const auto& [rank, t] : groups) ties += static_cast<double>(t) * t * t - t;
    const double mean = n * (n + 1) / 4.0;
    const double var = n * (n + 1) * (2 * n + 1) / 24.0 - ties / 48.0;
    if (var <= 0) {
      r.p = 1;
    } else {
      const double z = (std::abs(r.statistic - mean) - 0.5) / std::sqrt(var);
      r.p = std::min(1.0, std::erfc(std::max(z, 0.0) / std::sqrt(2.0)));
    }
    r.method = "normal";
  }
  return r;
}

/// Friedman rank test on a subjects x methods table (row-major), with the
/// tie-corrected chi-square statistic and p from chi-square(k-1).
inline TestResult friedman(const std::vector<std::vector<double>>& table, std::string comparison = {}) {
  TestResult r{"friedman", std::move(comparison)};
  const auto n = table.size();
  if (n < 2) throw DomainError("friedman: need at least 2 subjects");
  const auto k = table[0].size();
  if (k < 2) throw DomainError("friedman: need at least 2 methods");
  for (const auto& row : table)
    if (row.size() != k) throw ShapeError("friedman: ragged table");
  std::vector<double> rank_sum(k, 0.0);
  double tie_sum = 0;
  for (const auto& row : table) {
    const auto ranks = average_ranks(row);
    for (std::size_t j = 0; j < k; ++j) rank_sum[j] += ranks[j];
    std::map<double, int> groups;
    for (double x : row) ++groups[x];
    for (const auto& [v, t] : groups) tie_sum += static_cast<double>(t) * t * t - t;
  }
  const double N = static_cast<double>(n), K = static_cast<double>(k);
  double ss = 0;
  for (double R : rank_sum) ss += (R - N * (K + 1) / 2) * (R - N * (K + 1) / 2);
  const double denom = N * K * (K + 1) / 12.0 - tie_sum / (12.0 * (K - 1));
  r.n = static_cast<std::int64_t>(n);
  r.method = "chi2";
  if (denom <= 1e-12) {
    r.statistic = 0;
    r.p = 1;
    r.degenerate = true;
    return r;
  }
  r.statistic = ss / denom;
  r.p = boost::math::gamma_q((K - 1) / 2.0, r.statistic / 2.0);
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct SubjectRow {
  std::string subject;
  std::vector<Score> per_class;  // aligned with DiceReport::classes
  Score mean;

  bool operator==(const SubjectRow&) const = default;
};

struct ColumnStats {
  std::vector<std::optional<CohortStats>> per_class;
  std::optional<CohortStats> mean;

  bool operator==(const ColumnStats&) const = default;
};

struct DiceReport {
  std::vector<int> classes = all_classes();
  std::vector<SubjectRow> rows;
  ColumnStats stats;
  std::vector<TestResult> tests;

  bool operator==(const DiceReport&) const = default;

  void add_subject(std::string id, std::vector<Score> scores) {
    SubjectRow row{std::move(id), std::move(scores), std::nullopt};
    try {
      row.mean = subject_score(row.per_class);
    } catch (const DomainError&) {
    }
    rows.push_back(std::move(row));
  }

  /// Recomputes cohort statistics for every column from the subject table.
  void finalize() {
    auto column = [&](auto get) -> std::optional<CohortStats> {
      std::vector<double> v;
      for (const auto& r : rows)
        if (const Score s = get(r)) v.push_back(*s);
      if (v.empty()) return std::nullopt;
      return cohort_stats(v);
    };
    stats.per_class.clear();
    for (std::size_t c = 0; c < classes.size(); ++c)
      stats.per_class.push_back(column([&](const SubjectRow& r) { return r.per_class[c]; }));
    stats.mean = column([](const SubjectRow& r) { return r.mean; });
  }

  std::vector<double> subject_means() const {
    std::vector<double> v;
    for (const auto& r : rows)
      if (r.mean) v.push_back(*r.mean);
    return v;
  }
};

namespace detail {

inline std::string fmt6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

inline std::string fmt_score(const Score& s) { return s ? fmt6(*s) : "NA"; }

inline double round6(double x) { return std::strtod(fmt6(x).c_str(), nullptr); }

inline Score parse_score(const std::string& s) {
  if (s == "NA") return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw FormatError("bad number '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("bad number '" + s + "'");
  }
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline const char* kStatNames[] = {"n", "median", "iqr", "mean", "std", "std_defined"};

inline std::string stat_field(const std::optional<CohortStats>& s, int which) {
  if (!s) return "NA";
  switch (which) {
    case 0: return std::to_string(s->n);
    case 1: return fmt6(s->median);
    case 2: return fmt6(s->iqr);
    case 3: return fmt6(s->mean);
    case 4: return fmt6(s->std);
    default: return s->std_defined ? "1" : "0";
  }
}

inline void set_stat_field(std::optional<CohortStats>& s, int which, const std::string& text) {
  if (text == "NA") {
    s.reset();
    return;
  }
  if (!s) s = CohortStats{};
  const double v = *parse_score(text);
  switch (which) {
    case 0: s->n = static_cast<std::int64_t>(v); break;
    case 1: s->median = v; break;
    case 2: s->iqr = v; break;
    case 3: s->mean = v; break;
    case 4: s->std = v; break;
    default: s->std_defined = v != 0; break;
  }
}

}  // namespace detail

/// The report as it reads back from disk: every float rounded to 6
/// significant digits.
inline DiceReport rounded(DiceReport r) {
  auto rs = [](Score& s) {
    if (s) s = detail::round6(*s);
  };
  auto rc = [](std::optional<CohortStats>& s) {
    if (!s) return;
    s->median = detail::round6(s->median);
    s->iqr = detail::round6(s->iqr);
    s->mean = detail::round6(s->mean);
    s->std = detail::round6(s->std);
  };
  for (auto& row : r.rows) {
    for (auto& s : row.per_class) rs(s);
    rs(row.mean);
  }
  for (auto& s : r.stats.per_class) rc(s);
  rc(r.stats.mean);
  for (auto& t : r.tests) {
    t.statistic = detail::round6(t.statistic);
    t.p = detail::round6(t.p);
  }
  return r;
}

/// CSV: header "subject,<codes>,mean"; one row per subject; then
/// "# <stat>,..." rows and "# test,..." rows.
inline std::string report_csv(const DiceReport& r) {
  std::ostringstream os;
  os << "subject";
  for (int c : r.classes) os << "," << c;
  os << ",mean\n";
  for (const auto& row : r.rows) {
    os << row.subject;
    for (const auto& s : row.per_class) os << "," << detail::fmt_score(s);
    os << "," << detail::fmt_score(row.mean) << "\n";
  }
  if (!r.rows.empty() && !r.stats.per_class.empty()) {
    for (int which = 0; which < 6; ++which) {
      os << "# " << detail::kStatNames[which];
      for (const auto& s : r.stats.per_class) os << "," << detail::stat_field(s, which);
      os << "," << detail::stat_field(r.stats.mean, which) << "\n";
    }
  }
  for (const auto& t : r.tests)
    os << "# test," << t.name << "," << t.comparison << "," << detail::fmt6(t.statistic) << "," << detail::fmt6(t.p)
       << "," << t.n << "," << t.method << "," << (t.degenerate ? 1 : 0) << "\n";
  return os.str();
}

inline DiceReport parse_report_csv(const std::string& text) {
  DiceReport r;
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw FormatError("empty report");
  auto head = detail::split(line, ',');
  if (head.size() < 2 || head.front() != "subject" || head.back() != "mean") throw FormatError("bad report header");
  r.classes.clear();
  for (std::size_t i = 1; i + 1 < head.size(); ++i) r.classes.push_back(std::stoi(head[i]));
  const auto C = r.classes.size();
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = detail::split(line, ',');
    if (line.rfind("# test,", 0) == 0) {
      if (f.size() != 8) throw FormatError("bad test row: " + line);
      TestResult t{f[1], f[2], *detail::parse_score(f[3]), *detail::parse_score(f[4]), std::stoll(f[5]), f[6],
                   f[7] == "1"};
      r.tests.push_back(t);
    } else if (line.rfind("# ", 0) == 0) {
      const auto name = f[0].substr(2);
      const auto it = std::find(std::begin(detail::kStatNames), std::end(detail::kStatNames), name);
      if (it == std::end(detail::kStatNames) || f.size() != C + 2) throw FormatError("bad stat row: " + line);
      const int which = static_cast<int>(it - std::begin(detail::kStatNames));
      r.stats.per_class.resize(C);
      for (std::size_t c = 0; c < C; ++c) detail::set_stat_field(r.stats.per_class[c], which, f[c + 1]);
      detail::set_stat_field(r.stats.mean, which, f[C + 1]);
    } else {
      if (f.size() != C + 2) throw FormatError("bad subject row: " + line);
      SubjectRow row{f[0], {}, detail::parse_score(f[C + 1])};
      for (std::size_t c = 0; c < C; ++c) row.per_class.push_back(detail::parse_score(f[c + 1]));
      r.rows.push_back(std::move(row));
    }
  }
  return r;
}

/// Structured text: "[section]" headers followed by "key = value" lines.
inline std::string report_text(const DiceReport& r) {
  std::ostringstream os;
  auto join = [](const auto& xs, auto fmt) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + fmt(xs[i]);
    return s;
  };
  os << "[report]\nclasses = " << join(r.classes, [](int c) { return std::to_string(c); }) << "\n";
  for (const auto& row : r.rows)
    os << "\n[subject " << row.subject << "]\ndice = " << join(row.per_class, detail::fmt_score)
       << "\nmean = " << detail::fmt_score(row.mean) << "\n";
  if (!r.rows.empty() && !r.stats.per_class.empty()) {
    os << "\n[stats]\n";
    for (int which = 0; which < 6; ++which) {
      std::vector<std::string> cells;
      for (const auto& s : r.stats.per_class) cells.push_back(detail::stat_field(s, which));
      cells.push_back(detail::stat_field(r.stats.mean, which));
      os << detail::kStatNames[which] << " = " << join(cells, [](const std::string& s) { return s; }) << "\n";
    }
  }
  for (const auto& t : r.tests)
    os << "\n[test " << t.name << "]\ncomparison = " << t.comparison << "\nstatistic = " << detail::fmt6(t.statistic)
       << "\np = " << detail::fmt6(t.p) << "\nn = " << t.n << "\nmethod = " << t.method
       << "\ndegenerate = " << (t.degenerate ? 1 : 0) << "\n";
  return os.str();
}

inline DiceReport parse_report_text(const std::string& text) {
  DiceReport r;
  std::istringstream is(text);
  std::string line, section;
  SubjectRow* row = nullptr;
  TestResult* test = nullptr;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw FormatError("bad section header: " + line);
      section = line.substr(1, line.size() - 2);
      row = nullptr;
      test = nullptr;
      if (section.rfind("subject ", 0) == 0) {
        r.rows.push_back({section.substr(8), {}, std::nullopt});
        row = &r.rows.back();
      } else if (section.rfind("test ", 0) == 0) {
        r.tests.push_back({section.substr(5)});
        test = &r.tests.back();
      }
      continue;
    }
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw FormatError("expected 'key = value': " + line);
    const auto key = line.substr(0, eq), value = line.substr(eq + 3);
    if (section == "report" && key == "classes") {
      r.classes.clear();
      for (const auto& c : detail::split(value, ',')) r.classes.push_back(std::stoi(c));
    } else if (row && key == "dice") {
      for (const auto& c : detail::split(value, ',')) row->per_class.push_back(detail::parse_score(c));
    } else if (row && key == "mean") {
      row->mean = detail::parse_score(value);
    } else if (section == "stats") {
      const auto it = std::find(std::begin(detail::kStatNames), std::end(detail::kStatNames), key);
      if (it == std::end(detail::kStatNames)) throw FormatError("unknown statistic " + key);
      const auto cells = detail::split(value, ',');
      if (cells.size() != r.classes.size() + 1) throw FormatError("bad stats row: " + line);
      r.stats.per_class.resize(r.classes.size());
      const int which = static_cast<int>(it - std::begin(detail::kStatNames));
      for (std::size_t c = 0; c < r.classes.size(); ++c) detail::set_stat_field(r.stats.per_class[c], which, cells[c]);
      detail::set_stat_field(r.stats.mean, which, cells.back());
    } else if (test) {
      if (key == "comparison") test->comparison = value;
      else if (key == "statistic") test->statistic = *detail::parse_score(value);
      else if (key == "p") test->p = *detail::parse_score(value);
      else if (key == "n") test->n = std::stoll(value);
      else if (key == "method") test->method = value;
      else if (key == "degenerate") test->degenerate = value == "1";
      else throw FormatError("unknown test field " + key);
    } else {
      throw FormatError("unexpected line: " + line);
    }
  }
  return r;
}

enum class ReportFormat { kCsv, kText };

inline void emit_report(const DiceReport& r, const std::filesystem::path& path, ReportFormat format) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write report " + path.string());
  os << (format == ReportFormat::kCsv ? report_csv(r) : report_text(r));
  if (!os) throw IoError("write error in " + path.string());
}

inline DiceReport read_report(const std::filesystem::path& path, ReportFormat format) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open report " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return format == ReportFormat::kCsv ? parse_report_csv(ss.str()) : parse_report_text(ss.str());
}

}  // namespace multiaxial::eval
