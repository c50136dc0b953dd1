#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "eastnet/io.hpp"
#include "eastnet/train_eval.hpp"

namespace eastnet {

inline std::string fmt_fixed(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

struct MetricsRow {
    std::string name;
    MetricValues values;
};

// metrics.csv, header exactly "variant,rmse,mae,mape"
inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "variant,rmse,mae,mape\n";
    for (const MetricsRow& r : rows) {
        os << r.name << ',' << fmt_fixed(r.values.rmse) << ',' << fmt_fixed(r.values.mae) << ',';
        if (r.values.mape_pct)
            os << fmt_fixed(*r.values.mape_pct);
        else
            os << "na";
        os << '\n';
    }
    if (!os) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Dependency-free SVG emitters
// ---------------------------------------------------------------------------

namespace svg {

inline const char* series_color(int i) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
    return palette[i % 8];
}

inline std::string polyline(const std::vector<double>& ys, double x0, double y0, double w,
                            double h, double ymin, double ymax, const char* color,
                            const char* dash = nullptr) {
    std::string pts;
    const double span = ymax - ymin > 1e-12 ? ymax - ymin : 1.0;
    for (size_t i = 0; i < ys.size(); ++i) {
        const double px = x0 + w * static_cast<double>(i) / std::max<size_t>(ys.size() - 1, 1);
        const double py = y0 + h - h * (ys[i] - ymin) / span;
        pts += fmt_fixed(px, 2) + "," + fmt_fixed(py, 2) + " ";
    }
    std::string out = "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\"";
    if (dash) out += " stroke-dasharray=\"" + std::string(dash) + "\"";
    out += " stroke-width=\"1.2\" points=\"" + pts + "\"/>\n";
    return out;
}

}  // namespace svg

struct SeriesPanel {
    std::string title;
    std::vector<double> truth;
    std::vector<double> prediction;
};

// One panel per channel: citywide truth vs prediction polylines.
inline void write_timeseries_svg(const std::string& path, const std::vector<SeriesPanel>& panels) {
    const double W = 900, PH = 150, pad = 40;
    const double H = pad + panels.size() * (PH + pad);
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << W << " " << H
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    double y = pad;
    for (size_t p = 0; p < panels.size(); ++p) {
        const SeriesPanel& panel = panels[p];
        double ymin = 0.0, ymax = 1.0;
        bool first = true;
        for (const std::vector<double>* s : {&panel.truth, &panel.prediction})
            for (double v : *s) {
                if (first) {
                    ymin = ymax = v;
                    first = false;
                } else {
                    ymin = std::min(ymin, v);
                    ymax = std::max(ymax, v);
                }
            }
        os << "<text x=\"" << pad << "\" y=\"" << y - 8 << "\">" << panel.title
           << " (min " << fmt_fixed(ymin, 1) << ", max " << fmt_fixed(ymax, 1) << ")</text>\n";
        os << "<rect x=\"" << pad << "\" y=\"" << y << "\" width=\"" << W - 2 * pad
           << "\" height=\"" << PH << "\" fill=\"none\" stroke=\"#cccccc\"/>\n";
        os << svg::polyline(panel.truth, pad, y, W - 2 * pad, PH, ymin, ymax,
                            svg::series_color(0));
        os << svg::polyline(panel.prediction, pad, y, W - 2 * pad, PH, ymin, ymax,
                            svg::series_color(1), "4,3");
        y += PH + pad;
    }
    os << "<text x=\"" << W - 260 << "\" y=\"16\" fill=\"" << svg::series_color(0)
       << "\">truth</text>\n";
    os << "<text x=\"" << W - 200 << "\" y=\"16\" fill=\"" << svg::series_color(1)
       << "\">prediction</text>\n";
    os << "</svg>\n";
    if (!os) throw IoError("write failed for " + path);
}

// m x time heatmap of attention scores; one column per window, columns sum
// to 1.
inline void write_attention_svg(const std::string& path,
                                const std::vector<std::vector<double>>& phi_rows,
                                const std::vector<int>& event_marks = {}) {
    if (phi_rows.empty()) throw ContractError("attention heatmap: no attention rows");
    const int m = static_cast<int>(phi_rows.front().size());
    const int T = static_cast<int>(phi_rows.size());
    const double cell_h = 24, pad = 40;
    const double W = std::max(300.0, pad * 2 + T * 2.0);
    const double cw = (W - 2 * pad) / T;
    const double H = pad * 2 + m * cell_h + 14;
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << W << " " << H
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << pad << "\" y=\"" << pad - 16
       << "\">memory attention over test windows (rows: records, columns: windows)</text>\n";
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < m; ++j) {
            const double v = phi_rows[static_cast<size_t>(t)][static_cast<size_t>(j)];
            const int shade = static_cast<int>(255.0 * (1.0 - std::min(1.0, std::max(0.0, v))));
            char color[8];
            std::snprintf(color, sizeof(color), "#%02x%02xff", shade, shade);
            os << "<rect x=\"" << fmt_fixed(pad + t * cw, 2) << "\" y=\""
               << fmt_fixed(pad + j * cell_h, 2) << "\" width=\"" << fmt_fixed(cw + 0.5, 2)
               << "\" height=\"" << cell_h << "\" fill=\"" << color << "\"/>\n";
        }
    }
    for (int t : event_marks) {
        os << "<line x1=\"" << fmt_fixed(pad + t * cw, 2) << "\" y1=\"" << pad << "\" x2=\""
           << fmt_fixed(pad + t * cw, 2) << "\" y2=\"" << pad + m * cell_h
           << "\" stroke=\"#d62728\" stroke-width=\"1\"/>\n";
    }
    for (int j = 0; j < m; ++j)
        os << "<text x=\"6\" y=\"" << pad + j * cell_h + cell_h * 0.7 << "\">" << j << "</text>\n";
    os << "</svg>\n";
    if (!os) throw IoError("write failed for " + path);
}

}  // namespace eastnet
