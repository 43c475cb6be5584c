#include "upass/svg.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>

namespace upass {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          std::span<const PlotSeries> series) {
    constexpr double width = 640, height = 420, left = 60, right = 150, top = 40, bottom = 50;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        for (double v : s.x) { x0 = std::min(x0, v); x1 = std::max(x1, v); }
        for (double v : s.y) { y0 = std::min(y0, v); y1 = std::max(y1, v); }
    }
    if (!(x1 > x0)) { x0 -= 0.5; x1 += 0.5; }
    if (!(y1 > y0)) { y0 -= 0.5; y1 += 0.5; }
    const double pw = width - left - right, ph = height - top - bottom;
    auto sx = [&](double v) { return left + (v - x0) / (x1 - x0) * pw; };
    auto sy = [&](double v) { return top + ph - (v - y0) / (y1 - y0) * ph; };

    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" viewBox=\"0 0 640 420\">\n";
    out += "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n";
    out += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" + escape(title) + "</text>\n";
    out += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
           "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double xv = x0 + (x1 - x0) * t / 4.0;
        const double yv = y0 + (y1 - y0) * t / 4.0;
        out += "<text x=\"" + num(sx(xv)) + "\" y=\"" + num(top + ph + 16) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + num(xv) + "</text>\n";
        out += "<text x=\"" + num(left - 6) + "\" y=\"" + num(sy(yv) + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + num(yv) + "</text>\n";
    }
    out += "<text x=\"" + num(left + pw / 2) + "\" y=\"" + num(height - 12) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + escape(x_label) + "</text>\n";
    out += "<text x=\"16\" y=\"" + num(top + ph / 2) + "\" transform=\"rotate(-90 16 " + num(top + ph / 2) +
           ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + escape(y_label) + "</text>\n";
    std::size_t k = 0;
    for (const auto& s : series) {
        const char* colour = kPalette[k % std::size(kPalette)];
        const std::size_t count = std::min(s.x.size(), s.y.size());
        if (s.scatter) {
            out += "<g fill=\"" + std::string(colour) + "\" fill-opacity=\"0.6\">\n";
            for (std::size_t i = 0; i < count; ++i)
                out += "<circle cx=\"" + num(sx(s.x[i])) + "\" cy=\"" + num(sy(s.y[i])) + "\" r=\"1.6\"/>\n";
            out += "</g>\n";
        } else {
            out += "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"1.8\" points=\"";
            for (std::size_t i = 0; i < count; ++i) {
                if (i) out += ' ';
                out += num(sx(s.x[i])) + ',' + num(sy(s.y[i]));
            }
            out += "\"/>\n";
        }
        const double ly = top + 14 + 18.0 * static_cast<double>(k);
        out += "<line x1=\"" + num(width - right + 10) + "\" y1=\"" + num(ly) + "\" x2=\"" + num(width - right + 30) +
               "\" y2=\"" + num(ly) + "\" stroke=\"" + colour + "\" stroke-width=\"2\"/>\n";
        out += "<text x=\"" + num(width - right + 34) + "\" y=\"" + num(ly + 4) +
               "\" font-family=\"sans-serif\" font-size=\"11\">" + escape(s.name) + "</text>\n";
        ++k;
    }
    out += "</svg>\n";
    return out;
}

}  // namespace upass
