#pragma once

// Metric reports: one row per (axis, setting, metric, dimension, seed),
// serialized to CSV, summarized to JSON and drawn as a grouped bar chart.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowalign/checkpoint.hpp"
#include "flowalign/error.hpp"

namespace flowalign {

struct ReportRow {
  std::string axis;
  std::string setting;
  std::string metric;
  std::string dimension;
  std::uint64_t seed = 0;
  double value = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;

  bool operator==(const ReportRow&) const = default;
};

struct Report {
  std::string config_hash;
  std::vector<ReportRow> rows;

  bool empty() const { return rows.empty(); }
};

inline const char* kReportCsvHeader = "axis,setting,metric,dimension,seed,value,ci_low,ci_high";

namespace detail {

inline std::string csv_num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double csv_parse_num(const std::string& s) {
  if (s == "nan") return std::nan("");
  std::size_t pos = 0;
  const double d = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument(s);
  return d;
}

// Text fields never contain commas or quotes; settings such as "0:0:1" or
// "bt@0.25" are written verbatim.
inline void check_csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") != std::string::npos) {
    throw InputError("report field '" + s + "' contains a CSV delimiter");
  }
}

}  // namespace detail

inline std::string report_to_csv(const Report& r) {
  std::string out = std::string(kReportCsvHeader) + "\n";
  for (const auto& row : r.rows) {
    for (const auto* f : {&row.axis, &row.setting, &row.metric, &row.dimension}) detail::check_csv_field(*f);
    out += row.axis + "," + row.setting + "," + row.metric + "," + row.dimension + "," + std::to_string(row.seed) +
           "," + detail::csv_num(row.value) + "," + detail::csv_num(row.ci_low) + "," + detail::csv_num(row.ci_high) +
           "\n";
  }
  return out;
}

inline Report report_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kReportCsvHeader) throw InputError("report CSV has an unexpected header");
  Report r;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw InputError("report CSV line " + std::to_string(lineno) + ": expected 8 fields");
    try {
      r.rows.push_back({f[0], f[1], f[2], f[3], std::stoull(f[4]), detail::csv_parse_num(f[5]),
                        detail::csv_parse_num(f[6]), detail::csv_parse_num(f[7])});
    } catch (const std::exception&) {
      throw InputError("report CSV line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return r;
}

// Median over seeds of each (axis, setting, metric, dimension) group, in
// first-appearance order.
struct SummaryCell {
  std::string axis, setting, metric, dimension;
  double median = 0.0;
  std::size_t n = 0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw InputError("median of an empty set");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::vector<SummaryCell> summarize(const Report& r) {
  std::vector<SummaryCell> cells;
  std::vector<std::vector<double>> values;
  for (const auto& row : r.rows) {
    auto it = std::find_if(cells.begin(), cells.end(), [&](const SummaryCell& c) {
      return c.axis == row.axis && c.setting == row.setting && c.metric == row.metric && c.dimension == row.dimension;
    });
    if (it == cells.end()) {
      cells.push_back({row.axis, row.setting, row.metric, row.dimension, 0.0, 0});
      values.emplace_back();
      it = cells.end() - 1;
    }
    values[static_cast<std::size_t>(it - cells.begin())].push_back(row.value);
  }
  for (std::size_t i = 0; i < cells.size(); ++i) {
    cells[i].median = median_of(values[i]);
    cells[i].n = values[i].size();
  }
  return cells;
}

// Looks up the seed-median of one cell; throws when absent.
inline double summary_value(const Report& r, const std::string& setting, const std::string& metric,
                            const std::string& dimension) {
  for (const auto& c : summarize(r)) {
    if (c.setting == setting && c.metric == metric && c.dimension == dimension) return c.median;
  }
  throw InputError("report has no cell " + setting + "/" + metric + "/" + dimension);
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json report_to_json(const Report& r, const std::string& generated_at) {
  nlohmann::json j;
  j["generated_at"] = generated_at;
  j["config_hash"] = r.config_hash;
  j["n_rows"] = r.rows.size();
  auto& s = j["summary"] = nlohmann::json::array();
  for (const auto& c : summarize(r)) {
    s.push_back({{"axis", c.axis},
                 {"setting", c.setting},
                 {"metric", c.metric},
                 {"dimension", c.dimension},
                 {"median", c.median},
                 {"n_seeds", c.n}});
  }
  return j;
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace detail

// Grouped bar chart of seed medians.  Groups are (metric, dimension) pairs;
// each grid setting is one series (a <g class="series"> element) with one bar
// per group.  Layout depends only on the data.
inline std::string report_to_svg(const Report& r) {
  if (r.empty()) throw InputError("cannot plot an empty report");
  const auto cells = summarize(r);
  std::vector<std::string> settings, groups;
  auto add = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  double lo = 0.0, hi = 0.0;
  for (const auto& c : cells) {
    add(settings, c.setting);
    add(groups, c.metric + "/" + c.dimension);
    if (std::isfinite(c.median)) {
      lo = std::min(lo, c.median);
      hi = std::max(hi, c.median);
    }
  }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  static const char* palette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3",
                                  "#937860", "#da8bc3", "#8c8c8c", "#ccb974", "#64b5cd"};
  const double left = 60, top = 30, plot_h = 260, bar_w = 14, gap = 18;
  const double group_w = bar_w * static_cast<double>(settings.size()) + gap;
  const double plot_w = std::max(200.0, group_w * static_cast<double>(groups.size()));
  const double legend_h = 18.0 * static_cast<double>(settings.size());
  const double width = left + plot_w + 20, height = top + plot_h + 90 + legend_h;
  auto y_of = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::svg_num(width) << "\" height=\""
    << detail::svg_num(height) << "\" viewBox=\"0 0 " << detail::svg_num(width) << " " << detail::svg_num(height)
    << "\">\n";
  s << "<metadata>config_hash=" << detail::xml_escape(r.config_hash) << "</metadata>\n";
  s << "<rect x=\"0\" y=\"0\" width=\"" << detail::svg_num(width) << "\" height=\"" << detail::svg_num(height)
    << "\" fill=\"white\"/>\n";
  s << "<text x=\"" << left << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"12\">"
    << detail::xml_escape(r.rows.front().axis) << " (median over seeds)</text>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << detail::svg_num(y_of(0.0)) << "\" x2=\"" << detail::svg_num(left + plot_w)
    << "\" y2=\"" << detail::svg_num(y_of(0.0)) << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    s << "<text x=\"" << left - 6 << "\" y=\"" << detail::svg_num(y_of(v) + 4)
      << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" << detail::svg_num(v) << "</text>\n";
  }
  for (std::size_t si = 0; si < settings.size(); ++si) {
    const char* color = palette[si % (sizeof palette / sizeof *palette)];
    s << "<g class=\"series\" data-setting=\"" << detail::xml_escape(settings[si]) << "\" fill=\"" << color << "\">\n";
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const auto it = std::find_if(cells.begin(), cells.end(), [&](const SummaryCell& c) {
        return c.setting == settings[si] && c.metric + "/" + c.dimension == groups[gi];
      });
      if (it == cells.end() || !std::isfinite(it->median)) continue;
      const double x = left + gap / 2 + group_w * static_cast<double>(gi) + bar_w * static_cast<double>(si);
      const double y0 = y_of(0.0), y1 = y_of(it->median);
      s << "<rect x=\"" << detail::svg_num(x) << "\" y=\"" << detail::svg_num(std::min(y0, y1)) << "\" width=\""
        << detail::svg_num(bar_w - 2) << "\" height=\"" << detail::svg_num(std::abs(y1 - y0)) << "\"><title>"
        << detail::xml_escape(groups[gi]) << " = " << detail::csv_num(it->median) << "</title></rect>\n";
    }
    s << "</g>\n";
    const double ly = top + plot_h + 70 + 18.0 * static_cast<double>(si);
    s << "<rect x=\"" << left << "\" y=\"" << detail::svg_num(ly - 10) << "\" width=\"10\" height=\"10\" fill=\""
      << color << "\"/><text x=\"" << left + 16 << "\" y=\"" << detail::svg_num(ly)
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << detail::xml_escape(settings[si]) << "</text>\n";
  }
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const double x = left + group_w * (static_cast<double>(gi) + 0.5);
    s << "<text x=\"" << detail::svg_num(x) << "\" y=\"" << detail::svg_num(top + plot_h + 16)
      << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\" transform=\"rotate(-30 "
      << detail::svg_num(x) << " " << detail::svg_num(top + plot_h + 16) << ")\">" << detail::xml_escape(groups[gi])
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

struct ReportPaths {
  std::string csv, json, svg;
};

inline ReportPaths report_paths(const std::string& dir, const std::string& stem) {
  const auto base = (std::filesystem::path(dir) / stem).string();
  return {base + ".csv", base + ".json", base + ".svg"};
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
  const auto tmp = path + ".tmp";
  write_file(tmp, text);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path, "rename failed: " + ec.message());
}

inline void emit_report(const Report& r, const ReportPaths& paths) {
  if (r.empty()) throw InputError("refusing to emit an empty report");
  write_text_atomic(paths.csv, report_to_csv(r));
  write_text_atomic(paths.json, report_to_json(r, utc_timestamp()).dump(2) + "\n");
  write_text_atomic(paths.svg, report_to_svg(r));
}

}  // namespace flowalign
