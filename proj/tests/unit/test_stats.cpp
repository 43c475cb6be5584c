#include <doctest.h>

#include <cmath>
#include <numeric>

#include "upass/error.hpp"
#include "upass/rng.hpp"
#include "upass/stats.hpp"

using namespace upass;

TEST_CASE("average ranks share ties") {
    const std::vector<double> v = {3.0, 1.0, 3.0, 2.0};
    CHECK(average_ranks(v) == std::vector<double>{3.5, 1.0, 3.5, 2.0});
}

TEST_CASE("spearman: monotone series") {
    const std::vector<double> x = {1, 2, 3, 4, 5, 6};
    const std::vector<double> down = {9, 7, 6, 3, 2, 1};
    const auto c = spearman(x, down);
    CHECK(c.r == doctest::Approx(-1.0));
    CHECK(c.p_value == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(spearman(x, x).r == doctest::Approx(1.0));
    CHECK_THROWS_AS(spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2}), ValidationError);
}

TEST_CASE("t approximation against an independent evaluation") {
    // r = -0.40 with 43 degrees of freedom; Student t tail by numerical integration of the density
    const double r = -0.40, dof = 43.0;
    const double t = std::abs(r) * std::sqrt(dof / (1 - r * r));
    const double norm = std::tgamma((dof + 1) / 2) / (std::sqrt(dof * M_PI) * std::tgamma(dof / 2));
    double tail = 0.0;
    const double step = 1e-4;
    for (double u = t; u < 60.0; u += step) {
        const double a = norm * std::pow(1 + u * u / dof, -(dof + 1) / 2);
        const double b = norm * std::pow(1 + (u + step) * (u + step) / dof, -(dof + 1) / 2);
        tail += 0.5 * (a + b) * step;
    }
    CHECK(correlation_p_value(r, 45) == doctest::Approx(2 * tail).epsilon(1e-6));
    CHECK(correlation_p_value(r, 45) == doctest::Approx(0.0065).epsilon(0.05));
    CHECK(correlation_p_value(0.51, 45) < 0.001);
}

TEST_CASE("exact permutation p-value by brute force") {
    const std::vector<double> x = {1, 2, 3, 4, 5};
    const std::vector<double> y = {2, 1, 4, 3, 5};
    const auto c = spearman(x, y, PValueMethod::exact_permutation);
    std::vector<double> perm = y;
    std::sort(perm.begin(), perm.end());
    int extreme = 0, total = 0;
    do {
        ++total;
        if (std::abs(spearman(x, perm).r) >= std::abs(c.r) - 1e-12) ++extreme;
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(c.p_value == doctest::Approx(static_cast<double>(extreme) / total));
    std::vector<double> big(11);
    std::iota(big.begin(), big.end(), 0.0);
    CHECK_THROWS_AS(spearman(big, big, PValueMethod::exact_permutation), ValidationError);
}

TEST_CASE("permuted accuracies decorrelate") {
    Rng rng(31);
    std::vector<double> distance(45), acc(45);
    for (std::size_t i = 0; i < 45; ++i) {
        distance[i] = static_cast<double>(i);
        acc[i] = 1.0 - 0.01 * static_cast<double>(i);
    }
    double mean_abs_r = 0.0, mean_p = 0.0;
    for (int t = 0; t < 200; ++t) {
        rng.shuffle(acc);
        const auto c = spearman(distance, acc);
        mean_abs_r += std::abs(c.r) / 200;
        mean_p += c.p_value / 200;
    }
    CHECK(mean_abs_r < 0.2);
    CHECK(mean_p > 0.3);
}

TEST_CASE("auroc via pair counting") {
    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        std::vector<double> s(30);
        std::vector<bool> pos(30);
        for (std::size_t i = 0; i < 30; ++i) {
            s[i] = static_cast<double>(rng.below(8));
            pos[i] = i % 3 == 0;
        }
        double wins = 0, pairs = 0;
        for (std::size_t i = 0; i < 30; ++i)
            for (std::size_t j = 0; j < 30; ++j)
                if (pos[i] && !pos[j]) {
                    pairs += 1;
                    wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
                }
        CHECK(auroc(s, pos) == doctest::Approx(wins / pairs).epsilon(1e-12));
    }
    CHECK_THROWS_AS(auroc(std::vector<double>{1, 2}, std::vector<bool>{true, true}), ValidationError);
}
