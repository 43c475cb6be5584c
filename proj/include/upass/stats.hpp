#pragma once

#include <span>
#include <vector>

namespace upass {

/// 1-based ranks with ties sharing their average rank.
std::vector<double> average_ranks(std::span<const double> values);

double pearson(std::span<const double> x, std::span<const double> y);

struct Correlation {
    double r = 0.0;
    double p_value = 1.0;
    std::size_t n = 0;
};

enum class PValueMethod {
    t_approximation,  ///< t = r sqrt((n-2)/(1-r^2)) against Student t with n-2 dof
    exact_permutation ///< enumerates all n! orderings of y; n <= 10
};

/// Spearman rank correlation with a two-sided p-value. Needs n >= 3.
Correlation spearman(std::span<const double> x, std::span<const double> y,
                     PValueMethod method = PValueMethod::t_approximation);

/// Two-sided p-value of a correlation coefficient under the t approximation.
double correlation_p_value(double r, std::size_t n);

/// Area under the ROC curve of `scores` for detecting `positive` (ties count 1/2).
double auroc(std::span<const double> scores, const std::vector<bool>& positive);

double mean(std::span<const double> values);

}  // namespace upass
