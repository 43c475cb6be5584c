#include "upass/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "upass/error.hpp"

namespace upass {

std::vector<double> average_ranks(std::span<const double> values) {
    const auto n = values.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw ValidationError("pearson needs two equal-length series, n >= 2");
    const double mx = mean(x);
    const double my = mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double correlation_p_value(double r, std::size_t n) {
    if (n < 3) return 1.0;
    if (std::abs(r) >= 1.0) return 0.0;
    const double dof = static_cast<double>(n - 2);
    const double t = r * std::sqrt(dof / (1.0 - r * r));
    boost::math::students_t dist(dof);
    return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

Correlation spearman(std::span<const double> x, std::span<const double> y, PValueMethod method) {
    if (x.size() != y.size()) throw ValidationError("spearman needs equal-length series");
    if (x.size() < 3) throw ValidationError("spearman needs at least 3 observations");
    const auto rx = average_ranks(x);
    auto ry = average_ranks(y);
    Correlation c;
    c.n = x.size();
    c.r = pearson(rx, ry);
    if (method == PValueMethod::t_approximation) {
        c.p_value = correlation_p_value(c.r, c.n);
        return c;
    }
    if (c.n > 10) throw ValidationError("exact permutation p-value is limited to n <= 10");
    std::sort(ry.begin(), ry.end());
    std::size_t extreme = 0;
    std::size_t total = 0;
    const double observed = std::abs(c.r) - 1e-12;
    do {
        ++total;
        if (std::abs(pearson(rx, ry)) >= observed) ++extreme;
    } while (std::next_permutation(ry.begin(), ry.end()));
    c.p_value = static_cast<double>(extreme) / static_cast<double>(total);
    return c;
}

double auroc(std::span<const double> scores, const std::vector<bool>& positive) {
    if (scores.size() != positive.size()) throw ValidationError("auroc needs one label per score");
    const auto ranks = average_ranks(scores);
    double pos_rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (positive[i]) {
            pos_rank_sum += ranks[i];
            ++n_pos;
        }
    }
    const auto n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw ValidationError("auroc needs both classes present");
    const double u = pos_rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double mean(std::span<const double> values) {
    if (values.empty()) throw ValidationError("mean of an empty set");
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

}  // namespace upass
