#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace ieti {

/// One-dimensional quadrature rule on the reference interval [0,1].
struct GaussRule {
    Eigen::VectorXd nodes;    ///< abscissae in (0,1)
    Eigen::VectorXd weights;  ///< positive weights, sum to 1

    int size() const { return static_cast<int>(nodes.size()); }
};

/// @brief Gauss-Legendre rule with n points, mapped to [0,1]; exact for
/// polynomials of degree <= 2n-1. Nodes found by Newton iteration on P_n.
inline GaussRule gaussLegendre(int n)
{
    if (n < 1)
        throw std::invalid_argument("gaussLegendre: need at least one point");

    GaussRule rule;
    rule.nodes.resize(n);
    rule.weights.resize(n);

    for (int i = 0; i < n; ++i) {
        // Chebyshev-based initial guess on [-1,1], then Newton on P_n.
        double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
        double dp = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            // Three-term recurrence for P_n(x) and P_{n-1}(x).
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= n; ++k) {
                double p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n * (x * p1 - p0) / (x * x - 1.0);
            double dx = p1 / dp;
            x -= dx;
            if (std::abs(dx) < 1e-15)
                break;
        }
        // Map from [-1,1] to [0,1]; nodes come out in descending x order.
        rule.nodes[n - 1 - i] = 0.5 * (x + 1.0);
        rule.weights[n - 1 - i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    return rule;
}

/// @brief Nodes/weights of `rule` affinely mapped onto [a,b].
inline void mapRule(const GaussRule& rule, double a, double b,
                    std::vector<double>& nodes, std::vector<double>& weights)
{
    const double len = b - a;
    nodes.resize(rule.size());
    weights.resize(rule.size());
    for (int i = 0; i < rule.size(); ++i) {
        nodes[i] = a + len * rule.nodes[i];
        weights[i] = len * rule.weights[i];
    }
}

} // namespace ieti
