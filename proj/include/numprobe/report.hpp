#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "numprobe/errors.hpp"
#include "numprobe/matrix.hpp"

namespace numprobe {

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string fmt_num(double v) {
    if (!std::isfinite(v)) {
        return "";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

    void add(std::vector<std::string> row) {
        if (row.size() != header_.size()) {
            throw ReportError("csv row has " + std::to_string(row.size()) + " fields, header has " +
                              std::to_string(header_.size()));
        }
        rows_.push_back(std::move(row));
    }

    std::string str() const {
        std::string out;
        auto line = [&](const std::vector<std::string>& r) {
            for (std::size_t i = 0; i < r.size(); ++i) {
                out += (i ? "," : "") + csv_field(r[i]);
            }
            out += "\n";
        };
        line(header_);
        for (const auto& r : rows_) {
            line(r);
        }
        return out;
    }

    void write(const std::filesystem::path& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) {
            throw StoreError("cannot write " + path.string());
        }
        f << str();
    }

private:
    static std::string csv_field(const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) {
            return s;
        }
        std::string q = "\"";
        for (char c : s) {
            q += c == '"' ? std::string("\"\"") : std::string(1, c);
        }
        return q + "\"";
    }

    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

inline std::optional<double> json_number(const nlohmann::json& j) {
    return j.is_number() ? std::optional(j.get<double>()) : std::nullopt;
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

namespace svg {

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string n(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

// Sequential blue-yellow ramp sampled at t in [0, 1].
inline std::string color(double t) {
    if (!std::isfinite(t)) {
        return "#cccccc";
    }
    t = std::clamp(t, 0.0, 1.0);
    static const double stops[5][3] = {
        {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
    const double x = t * 4.0;
    const int i = std::min(3, static_cast<int>(x));
    const double f = x - i;
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(stops[i][0] + f * (stops[i + 1][0] - stops[i][0]))),
                  static_cast<int>(std::lround(stops[i][1] + f * (stops[i + 1][1] - stops[i][1]))),
                  static_cast<int>(std::lround(stops[i][2] + f * (stops[i + 1][2] - stops[i][2]))));
    return buf;
}

inline std::string text(double x, double y, const std::string& s, const std::string& extra = "") {
    return "<text x=\"" + n(x) + "\" y=\"" + n(y) + "\" " + extra + ">" + escape(s) + "</text>\n";
}

}  // namespace svg

struct HeatmapSpec {
    std::string title;
    std::string x_label;  // columns
    std::string y_label;  // rows
    std::vector<std::string> col_names;
    std::vector<std::string> row_names;
    double vmin = 0.0;
    double vmax = 1.0;
};

// One <rect class="cell"> per entry plus a colorbar group. Non-finite cells are grey.
inline std::string heatmap_svg(const Matrix& m, const HeatmapSpec& spec) {
    if (m.rows() == 0 || m.cols() == 0) {
        throw ReportError("heatmap needs a non-empty matrix");
    }
    if ((!spec.row_names.empty() && spec.row_names.size() != m.rows()) ||
        (!spec.col_names.empty() && spec.col_names.size() != m.cols())) {
        throw ReportError("heatmap label count does not match matrix shape");
    }
    const double cell = std::clamp(400.0 / static_cast<double>(std::max(m.rows(), m.cols())), 4.0, 60.0);
    const double left = 90, top = 50;
    const double w = cell * static_cast<double>(m.cols()), h = cell * static_cast<double>(m.rows());
    const double width = left + w + 110, height = top + h + 70;
    const double span = spec.vmax > spec.vmin ? spec.vmax - spec.vmin : 1.0;
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << svg::n(width) << "\" height=\"" << svg::n(height)
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o << svg::text(width / 2, 20, spec.title, "text-anchor=\"middle\" font-size=\"14\"");
    o << "<g class=\"cells\">\n";
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            const double v = m(r, c);
            o << "<rect class=\"cell\" x=\"" << svg::n(left + cell * static_cast<double>(c)) << "\" y=\""
              << svg::n(top + cell * static_cast<double>(r)) << "\" width=\"" << svg::n(cell) << "\" height=\""
              << svg::n(cell) << "\" fill=\"" << svg::color((v - spec.vmin) / span) << "\"><title>"
              << svg::escape(fmt_num(v)) << "</title></rect>\n";
        }
    }
    o << "</g>\n";
    if (cell >= 14) {
        for (std::size_t c = 0; c < spec.col_names.size(); ++c) {
            o << svg::text(left + cell * (static_cast<double>(c) + 0.5), top + h + 14, spec.col_names[c],
                           "text-anchor=\"middle\"");
        }
        for (std::size_t r = 0; r < spec.row_names.size(); ++r) {
            o << svg::text(left - 6, top + cell * (static_cast<double>(r) + 0.5) + 4, spec.row_names[r],
                           "text-anchor=\"end\"");
        }
    }
    o << svg::text(left + w / 2, top + h + 40, spec.x_label, "class=\"x-label\" text-anchor=\"middle\"");
    o << svg::text(24, top + h / 2, spec.y_label,
                   "class=\"y-label\" text-anchor=\"middle\" transform=\"rotate(-90 24 " + svg::n(top + h / 2) + ")\"");
    // Colorbar: 20 swatches from vmin (bottom) to vmax (top).
    const double bx = left + w + 30, bh = h / 20.0;
    o << "<g class=\"colorbar\">\n";
    for (int i = 0; i < 20; ++i) {
        o << "<rect x=\"" << svg::n(bx) << "\" y=\"" << svg::n(top + h - bh * (i + 1)) << "\" width=\"14\" height=\""
          << svg::n(bh) << "\" fill=\"" << svg::color((i + 0.5) / 20.0) << "\"/>\n";
    }
    o << svg::text(bx + 20, top + h, fmt_num(spec.vmin));
    o << svg::text(bx + 20, top + 10, fmt_num(spec.vmax));
    o << "</g>\n</svg>\n";
    return o.str();
}

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;  // NaN marks a missing point
};

struct LineChartSpec {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::optional<double> y_min;
    std::optional<double> y_max;
};

inline std::string line_chart_svg(const std::vector<Series>& series, const LineChartSpec& spec) {
    if (series.empty()) {
        throw ReportError("line chart has no series");
    }
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series) {
        if (s.x.empty() || s.x.size() != s.y.size()) {
            throw ReportError("series '" + s.name + "' is empty or has mismatched x/y lengths");
        }
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            if (std::isfinite(s.y[i])) {
                y0 = std::min(y0, s.y[i]);
                y1 = std::max(y1, s.y[i]);
            }
        }
    }
    if (!std::isfinite(y0)) {
        y0 = 0;
        y1 = 1;
    }
    y0 = spec.y_min.value_or(y0);
    y1 = spec.y_max.value_or(y1);
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    const double left = 70, top = 40, w = 480, h = 300;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * w; };
    auto py = [&](double y) { return top + h - (y - y0) / (y1 - y0) * h; };
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << svg::n(left + w + 170) << "\" height=\""
      << svg::n(top + h + 60) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    o << svg::text(left + w / 2, 20, spec.title, "text-anchor=\"middle\" font-size=\"14\"");
    o << "<rect x=\"" << svg::n(left) << "\" y=\"" << svg::n(top) << "\" width=\"" << svg::n(w) << "\" height=\""
      << svg::n(h) << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double yv = y0 + (y1 - y0) * i / 4.0, xv = x0 + (x1 - x0) * i / 4.0;
        o << svg::text(left - 6, py(yv) + 4, fmt_num(std::round(yv * 1000) / 1000), "text-anchor=\"end\"");
        o << svg::text(px(xv), top + h + 14, fmt_num(std::round(xv * 1000) / 1000), "text-anchor=\"middle\"");
    }
    o << svg::text(left + w / 2, top + h + 38, spec.x_label, "class=\"x-label\" text-anchor=\"middle\"");
    o << svg::text(20, top + h / 2, spec.y_label,
                   "class=\"y-label\" text-anchor=\"middle\" transform=\"rotate(-90 20 " + svg::n(top + h / 2) + ")\"");
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* col = palette[k % 7];
        std::string pts;
        auto flush = [&] {
            if (!pts.empty()) {
                o << "<polyline class=\"series\" fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\""
                  << pts << "\"/>\n";
                pts.clear();
            }
        };
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) {
                flush();
                continue;
            }
            pts += (pts.empty() ? "" : " ") + svg::n(px(s.x[i])) + "," + svg::n(py(s.y[i]));
            o << "<circle cx=\"" << svg::n(px(s.x[i])) << "\" cy=\"" << svg::n(py(s.y[i])) << "\" r=\"2.5\" fill=\""
              << col << "\"/>\n";
        }
        flush();
        o << "<line x1=\"" << svg::n(left + w + 12) << "\" y1=\"" << svg::n(top + 10 + 16.0 * k) << "\" x2=\""
          << svg::n(left + w + 30) << "\" y2=\"" << svg::n(top + 10 + 16.0 * k) << "\" stroke=\"" << col
          << "\" stroke-width=\"2\"/>\n";
        o << svg::text(left + w + 34, top + 14 + 16.0 * k, s.name);
    }
    o << "</svg>\n";
    return o.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& s) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw StoreError("cannot write " + path.string());
    }
    f << s;
}

// ---------------------------------------------------------------------------
// Figures from results.json
// ---------------------------------------------------------------------------

namespace detail {

inline Matrix json_matrix(const nlohmann::json& j) {
    if (!j.is_array() || j.empty() || !j[0].is_array()) {
        throw ReportError("expected a non-empty matrix");
    }
    Matrix m(j.size(), j[0].size());
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (j[r].size() != m.cols()) {
            throw ReportError("ragged matrix");
        }
        for (std::size_t c = 0; c < m.cols(); ++c) {
            m(r, c) = json_number(j[r][c]).value_or(NAN);
        }
    }
    return m;
}

inline std::vector<std::string> json_labels(const nlohmann::json& j) {
    std::vector<std::string> out;
    for (const auto& v : j) {
        out.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    }
    return out;
}

inline Series json_series(const std::string& name, const nlohmann::json& rows, const std::string& xk,
                          const std::string& yk) {
    Series s{name, {}, {}};
    for (const auto& r : rows) {
        s.x.push_back(r.at(xk).get<double>());
        s.y.push_back(json_number(r.at(yk)).value_or(NAN));
    }
    return s;
}

}  // namespace detail

// Renders the figures for one results.json into `dir`; returns the written file names.
inline std::vector<std::string> render_report(const std::filesystem::path& dir) {
    const auto path = dir / "results.json";
    std::ifstream f(path);
    if (!f) {
        throw ReportError("no results.json in " + dir.string());
    }
    nlohmann::json res;
    try {
        res = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ReportError(path.string() + ": " + e.what());
    }
    const std::string kind = res.value("kind", "");
    std::vector<std::pair<std::string, std::string>> out;
    try {
        const auto& r = res.at("results");
        if (kind == "train-toy") {
            Series s{"loss", {}, {}};
            for (const auto& p : r.at("loss_curve")) {
                s.x.push_back(p.at("step").get<double>());
                s.y.push_back(p.at("loss").get<double>());
            }
            out.emplace_back("loss_curve.svg", line_chart_svg({s}, {"Toy model training loss", "step", "loss", 0.0, {}}));
        } else if (kind == "probe-train") {
            out.emplace_back("probe_accuracy.svg",
                             line_chart_svg({detail::json_series("test", r.at("layers"), "layer", "test_accuracy"),
                                             detail::json_series("train", r.at("layers"), "layer", "train_accuracy")},
                                            {"Probe accuracy per layer", "layer", "accuracy", 0.0, 1.0}));
        } else if (kind == "cross-layer") {
            const auto names = detail::json_labels(r.at("layers"));
            out.emplace_back("cross_layer.svg",
                             heatmap_svg(detail::json_matrix(r.at("accuracy")),
                                         {"Probe accuracy on other layers", "evaluated on layer", "trained on layer",
                                          names, names, 0.0, 1.0}));
        } else if (kind == "loo") {
            out.emplace_back("loo.svg",
                             line_chart_svg({detail::json_series("held-out layer", r.at("layers"), "layer", "accuracy")},
                                            {"Leave-one-layer-out probe accuracy", "held-out layer", "accuracy", 0.0,
                                             1.0}));
        } else if (kind == "rsa") {
            const auto names = detail::json_labels(r.at("tables"));
            out.emplace_back("rsa.svg", heatmap_svg(detail::json_matrix(r.at("scores")),
                                                    {"RSA between embedding tables", "table", "table", names, names,
                                                     -1.0, 1.0}));
        } else if (kind == "fft-iou") {
            const auto names = detail::json_labels(r.at("tables"));
            out.emplace_back("fft_iou.svg", heatmap_svg(detail::json_matrix(r.at("iou")),
                                                        {"Top-k frequency IoU", "table", "table", names, names, 0.0,
                                                         1.0}));
            out.emplace_back("iou_sweep.svg",
                             line_chart_svg({detail::json_series("min IoU", r.at("sweep"), "k", "min_iou"),
                                             detail::json_series("mean IoU", r.at("sweep"), "k", "mean_iou")},
                                            {"IoU over k", "k", "IoU", 0.0, 1.0}));
        } else if (kind == "multitok") {
            std::vector<Series> s{detail::json_series("probe", r.at("offsets"), "offset", "accuracy")};
            if (r.contains("lens_offsets")) {
                s.push_back(detail::json_series("tuned lens", r.at("lens_offsets"), "offset", "accuracy"));
            }
            out.emplace_back("multitok.svg",
                             line_chart_svg(s, {"Recovery of preceding number pieces", "offset", "accuracy", 0.0, 1.0}));
        } else if (kind == "trace-errors") {
            const auto& layers = r.at("trace").at("layers");
            out.emplace_back("trace_accuracy.svg",
                             line_chart_svg({detail::json_series("model correct", layers, "layer", "accuracy_correct"),
                                             detail::json_series("model incorrect", layers, "layer",
                                                                 "accuracy_incorrect")},
                                            {"Probed value vs model answer", "layer", "accuracy", 0.0, 1.0}));
            out.emplace_back("trace_abs_error.svg",
                             line_chart_svg({detail::json_series("mean |probed - truth|", layers, "layer",
                                                                 "mean_abs_error")},
                                            {"Absolute error of probed result", "layer", "mean absolute error", 0.0,
                                             {}}));
            out.emplace_back("trace_breaks.svg",
                             line_chart_svg({detail::json_series("break fraction", layers, "layer", "break_fraction")},
                                            {"Layers breaking a correct result", "layer", "fraction of samples", 0.0,
                                             {}}));
        } else if (kind == "ablate") {
            Series s{"accuracy after skip", {}, {}};
            for (const auto& a : r.at("ablations")) {
                s.x.push_back(a.at("skipped").at(0).get<double>());
                s.y.push_back(a.at("accuracy_after").get<double>());
            }
            out.emplace_back("ablation.svg",
                             line_chart_svg({s}, {"Answer accuracy with one layer skipped", "skipped layer", "accuracy",
                                                  0.0, 1.0}));
        } else if (kind == "dump-toy" || kind == "probe-eval") {
            // Tabular only.
        } else {
            throw ReportError("unknown result kind '" + kind + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ReportError(path.string() + ": " + e.what());
    }
    std::vector<std::string> names;
    for (const auto& [name, body] : out) {
        write_text(dir / name, body);
        names.push_back(name);
    }
    return names;
}

}  // namespace numprobe
