#pragma once

#include <span>
#include <string>
#include <vector>

namespace upass {

struct PlotSeries {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
    /// Draw unconnected dots instead of a polyline.
    bool scatter = false;
};

/// Minimal standalone SVG chart; axes span the data range.
std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          std::span<const PlotSeries> series);

}  // namespace upass
