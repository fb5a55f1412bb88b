#pragma once

// Static report from run records: SVG plots and a per-class CSV.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "duda/error.hpp"
#include "duda/metrics.hpp"
#include "duda/run_record.hpp"

namespace duda {

namespace svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct BarSeries {
  std::string name;
  std::vector<double> values;  // one per category; NaN draws nothing
};

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return palette[i % 10];
}

inline std::string num(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '<') out += "&lt;";
    else if (ch == '>') out += "&gt;";
    else if (ch == '&') out += "&amp;";
    else out += ch;
  }
  return out;
}

struct Frame {
  double width = 720, height = 420, left = 70, right = 200, top = 40, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

inline void header(std::ostringstream& os, const Frame& f, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << f.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
     << "</text>\n";
}

inline void axes(std::ostringstream& os, const Frame& f, const std::string& xl, const std::string& yl) {
  os << "<line x1=\"" << f.left << "\" y1=\"" << f.py(f.y0) << "\" x2=\"" << f.width - f.right << "\" y2=\""
     << f.py(f.y0) << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << f.left << "\" y1=\"" << f.top << "\" x2=\"" << f.left << "\" y2=\"" << f.height - f.bottom
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<text x=\"" << f.left - 6 << "\" y=\"" << f.py(v) + 4 << "\" text-anchor=\"end\">" << num(v)
       << "</text>\n";
    os << "<line x1=\"" << f.left << "\" y1=\"" << f.py(v) << "\" x2=\"" << f.width - f.right << "\" y2=\""
       << f.py(v) << "\" stroke=\"#ddd\"/>\n";
  }
  os << "<text x=\"" << (f.left + f.width - f.right) / 2 << "\" y=\"" << f.height - 12
     << "\" text-anchor=\"middle\">" << escape(xl) << "</text>\n";
  os << "<text transform=\"translate(16," << (f.top + f.height - f.bottom) / 2
     << ") rotate(-90)\" text-anchor=\"middle\">" << escape(yl) << "</text>\n";
}

inline void legend(std::ostringstream& os, const Frame& f, const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const double y = f.top + 16.0 * i;
    os << "<rect x=\"" << f.width - f.right + 12 << "\" y=\"" << y << "\" width=\"10\" height=\"10\" fill=\""
       << color(i) << "\"/>\n";
    os << "<text x=\"" << f.width - f.right + 27 << "\" y=\"" << y + 9 << "\">" << escape(names[i]) << "</text>\n";
  }
}

inline std::string line_chart(const std::string& title, const std::string& xl, const std::string& yl,
                              const std::vector<Series>& series) {
  Frame f;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  f.x0 = xmin;
  f.x1 = xmax > xmin ? xmax : xmin + 1;
  f.y0 = std::floor(std::min(ymin, 0.0));
  f.y1 = ymax > f.y0 ? ymax : f.y0 + 1;
  std::ostringstream os;
  header(os, f, title);
  axes(os, f, xl, yl);
  os << "<text x=\"" << f.left << "\" y=\"" << f.height - 30 << "\" text-anchor=\"middle\">" << num(f.x0)
     << "</text>\n<text x=\"" << f.width - f.right << "\" y=\"" << f.height - 30 << "\" text-anchor=\"middle\">"
     << num(f.x1) << "</text>\n";
  std::vector<std::string> names;
  for (std::size_t k = 0; k < series.size(); ++k) {
    names.push_back(series[k].name);
    os << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << color(k) << "\" points=\"";
    for (std::size_t i = 0; i < series[k].x.size(); ++i)
      os << num(f.px(series[k].x[i])) << ',' << num(f.py(series[k].y[i])) << ' ';
    os << "\"/>\n";
  }
  legend(os, f, names);
  os << "</svg>\n";
  return os.str();
}

inline std::string bar_chart(const std::string& title, const std::string& yl, const std::vector<std::string>& cats,
                             const std::vector<BarSeries>& series) {
  Frame f;
  double lo = 0.0, hi = 0.0;
  for (const auto& s : series)
    for (double v : s.values)
      if (!std::isnan(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  f.y0 = lo;
  f.y1 = hi > lo ? hi : lo + 1;
  f.x0 = 0;
  f.x1 = static_cast<double>(std::max<std::size_t>(cats.size(), 1));
  std::ostringstream os;
  header(os, f, title);
  axes(os, f, "class", yl);
  const double slot = f.px(1) - f.px(0);
  const double bw = slot * 0.8 / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  os << "<line x1=\"" << f.left << "\" y1=\"" << f.py(0) << "\" x2=\"" << f.width - f.right << "\" y2=\"" << f.py(0)
     << "\" stroke=\"black\"/>\n";
  for (std::size_t c = 0; c < cats.size(); ++c) {
    os << "<text x=\"" << f.px(c + 0.5) << "\" y=\"" << f.height - 30 << "\" text-anchor=\"middle\">"
       << escape(cats[c]) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
      const double v = c < series[k].values.size() ? series[k].values[c] : std::nan("");
      if (std::isnan(v)) continue;
      const double x = f.px(static_cast<double>(c)) + slot * 0.1 + bw * k;
      const double ya = f.py(std::max(v, 0.0)), yb = f.py(std::min(v, 0.0));
      os << "<rect x=\"" << num(x) << "\" y=\"" << num(ya) << "\" width=\"" << num(bw) << "\" height=\""
         << num(std::max(yb - ya, 0.5)) << "\" fill=\"" << color(k) << "\"/>\n";
    }
  }
  std::vector<std::string> names;
  for (const auto& s : series) names.push_back(s.name);
  legend(os, f, names);
  os << "</svg>\n";
  return os.str();
}

}  // namespace svg

inline std::string record_label(const RunRecord& r) { return r.preset + " seed " + std::to_string(r.seed); }

inline std::string miou_plot(const std::vector<RunRecord>& records) {
  std::vector<svg::Series> series;
  for (const auto& r : records)
    for (auto n : {Network::LT, Network::LS, Network::SS}) {
      svg::Series s{records.size() > 1 ? record_label(r) + " " + to_string(n) : to_string(n), {}, {}};
      for (const auto& row : r.trace(n)) {
        s.x.push_back(row.iteration);
        s.y.push_back(row.miou * 100.0);
      }
      if (!s.x.empty()) series.push_back(std::move(s));
    }
  return svg::line_chart("mIoU on held-out target images", "iteration", "mIoU (%)", series);
}

inline std::string disparity_plot(const RunRecord& r) {
  std::vector<std::string> cats;
  svg::BarSeries inc{"normalized inconsistency", {}}, disp{"IoU disparity LT - SS (x10)", {}};
  for (const auto& row : r.disparity->report.rows) {
    cats.push_back(std::to_string(row.class_id));
    inc.values.push_back(row.normalized_inconsistency);
    disp.values.push_back(row.disparity * 10.0);
  }
  std::string title = "Per-class inconsistency vs teacher-student IoU gap, " + record_label(r);
  if (r.disparity->report.spearman) title += " (Spearman " + svg::num(*r.disparity->report.spearman) + ")";
  return svg::bar_chart(title, "value", cats, {inc, disp});
}

namespace detail {

// Per-class mean of the final SS IoU over a set of records (NaN-aware).
inline std::vector<double> mean_student_iou(const std::vector<const RunRecord*>& rs, int c) {
  std::vector<double> sum(c, 0.0), cnt(c, 0.0);
  for (const auto* r : rs) {
    const auto iou = iou_per_class(r->final_confusion.at(Network::SS)).iou;
    for (int k = 0; k < c; ++k)
      if (!std::isnan(iou[k])) sum[k] += iou[k], cnt[k] += 1.0;
  }
  for (int k = 0; k < c; ++k) sum[k] = cnt[k] > 0 ? sum[k] / cnt[k] : std::nan("");
  return sum;
}

}  // namespace detail

// Per-class change in final SS IoU when inconsistency weighting is added on
// top of pre-adaptation with uniform weights.
inline std::string weighting_delta_plot(const std::vector<const RunRecord*>& weighted,
                                        const std::vector<const RunRecord*>& uniform, int c) {
  const auto a = detail::mean_student_iou(weighted, c), b = detail::mean_student_iou(uniform, c);
  std::vector<std::string> cats;
  svg::BarSeries d{"IoU change (points)", {}};
  for (int k = 0; k < c; ++k) {
    cats.push_back(std::to_string(k));
    d.values.push_back((a[k] - b[k]) * 100.0);
  }
  return svg::bar_chart("Per-class SS IoU change from inconsistency weighting", "IoU change (points)", cats, {d});
}

inline std::string report_csv(const std::vector<RunRecord>& records) {
  std::ostringstream os;
  os << "preset,seed,class,iou,recall,normalized_inconsistency\n";
  for (const auto& r : records) {
    const auto& cm = r.final_confusion.at(Network::SS);
    const auto iou = iou_per_class(cm);
    const auto rec = recall_per_class(cm);
    for (int k = 0; k < cm.num_classes(); ++k)
      os << r.preset << ',' << r.seed << ',' << k << ',' << format_fixed(iou.iou[k]) << ','
         << format_fixed(rec[k]) << ',' << (r.profile ? format_fixed(r.profile->normalized[k]) : "") << '\n';
    const auto s = miou_macc(cm);
    os << r.preset << ',' << r.seed << ",mean," << format_fixed(s.miou) << ',' << format_fixed(s.macc) << ",\n";
  }
  return os.str();
}

// Writes the report files into `dir` and returns their paths.
inline std::vector<std::string> write_report(const std::vector<RunRecord>& records, const std::string& dir) {
  if (records.empty()) throw ReportError("report needs at least one run record");
  std::vector<std::string> missing;
  const RunRecord* with_profile = nullptr;
  for (const auto& r : records) {
    if (r.rows.empty()) missing.push_back("metric rows (" + record_label(r) + ")");
    if (!r.final_confusion.count(Network::SS)) missing.push_back("final SS confusion (" + record_label(r) + ")");
    if (!with_profile && r.profile && r.disparity) with_profile = &r;
  }
  if (!with_profile) missing.push_back("inconsistency profile and IoU disparity (no record has them)");
  if (!missing.empty()) {
    std::string msg = "missing series:";
    for (const auto& m : missing) msg += " " + m + ";";
    throw ReportError(msg);
  }
  std::filesystem::create_directories(dir);
  std::vector<std::string> written;
  auto put = [&](const std::string& name, const std::string& text) {
    const auto path = (std::filesystem::path(dir) / name).string();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    os << text;
    written.push_back(path);
  };
  put("miou_vs_iteration.svg", miou_plot(records));
  put("inconsistency_vs_disparity.svg", disparity_plot(*with_profile));
  std::vector<const RunRecord*> weighted, uniform;
  for (const auto& r : records) {
    if (!r.flags.pre_adaptation || !r.flags.kl || r.num_classes != records.front().num_classes) continue;
    (r.flags.inconsistency ? weighted : uniform).push_back(&r);
  }
  if (!weighted.empty() && !uniform.empty())
    put("weighting_delta.svg", weighting_delta_plot(weighted, uniform, records.front().num_classes));
  put("classes.csv", report_csv(records));
  return written;
}

}  // namespace duda
