#include <catch2/catch_amalgamated.hpp>

#include <random>

#include <ieti/quadrature.hpp>
#include <ieti/splines.hpp>

#include "support/oracles.hpp"

using namespace ieti;

TEST_CASE("openUniform produces the documented knot layouts")
{
    auto kv11 = KnotVector::openUniform(1, 1);
    CHECK(kv11.knots() == std::vector<double>{0, 0, 1, 1});
    CHECK(kv11.numBasis() == 2);

    auto kv22 = KnotVector::openUniform(2, 2);
    CHECK(kv22.knots() == std::vector<double>{0, 0, 0, 0.5, 1, 1, 1});
    CHECK(kv22.numBasis() == 4);

    CHECK(KnotVector::openUniform(3, 4).numBasis() == 7);

    CHECK_THROWS_AS(KnotVector::openUniform(0, 1), std::invalid_argument);
    CHECK_THROWS_AS(KnotVector::openUniform(2, 0), std::invalid_argument);
}

TEST_CASE("evalBasis matches hat functions on a single linear element")
{
    auto kv = KnotVector::openUniform(1, 1);
    double vals[2];
    int first = kv.evalBasis(0.25, vals);
    CHECK(first == 0);
    CHECK(vals[0] == Catch::Approx(0.75));
    CHECK(vals[1] == Catch::Approx(0.25));
}

TEST_CASE("evalBasis agrees with the recursive oracle everywhere")
{
    // Values frozen from the recursive oracle: interior functions take 0.5
    // at the interior knot, boundary functions vanish there.
    auto kv = KnotVector::openUniform(2, 2);
    const auto& U = kv.knots();
    CHECK(oracle::bsplineRecursive(U, 1, 2, 0.5) == Catch::Approx(0.5));
    CHECK(oracle::bsplineRecursive(U, 2, 2, 0.5) == Catch::Approx(0.5));
    CHECK(oracle::bsplineRecursive(U, 0, 2, 0.5) == Catch::Approx(0.0).margin(1e-15));
    CHECK(oracle::bsplineRecursive(U, 3, 2, 0.5) == Catch::Approx(0.0).margin(1e-15));

    double vals[3];
    int first = kv.evalBasis(0.5, vals);
    for (int j = 0; j < 3; ++j)
        CHECK(vals[j] == Catch::Approx(oracle::bsplineRecursive(U, first + j, 2, 0.5))
                             .margin(1e-14));

    // Dense sweep over several knot vectors and points.
    std::mt19937 gen(7);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (int p = 1; p <= 4; ++p)
        for (int elements : {1, 2, 5}) {
            auto k = KnotVector::openUniform(p, elements);
            std::vector<double> v(p + 1);
            for (int trial = 0; trial < 50; ++trial) {
                double x = (trial == 0) ? 1.0 : dist(gen);
                int f = k.evalBasis(x, v.data());
                for (int j = 0; j < p + 1; ++j)
                    CHECK(v[j] ==
                          Catch::Approx(oracle::bsplineRecursive(k.knots(), f + j, p, x))
                              .margin(1e-13));
            }
        }
}

TEST_CASE("partition of unity holds to 1e-12 over 10^4 random points")
{
    std::mt19937 gen(42);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    auto kv = KnotVector::openUniform(3, 7);
    std::vector<double> v(4);
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
        kv.evalBasis(dist(gen), v.data());
        worst = std::max(worst, std::abs(v[0] + v[1] + v[2] + v[3] - 1.0));
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("basis functions have local support")
{
    auto kv = KnotVector::openUniform(2, 5);
    const auto& U = kv.knots();
    const int p = kv.degree();
    std::mt19937 gen(3);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(p + 1);
    for (int trial = 0; trial < 200; ++trial) {
        double x = dist(gen);
        int first = kv.evalBasis(x, v.data());
        for (int i = 0; i < kv.numBasis(); ++i) {
            const bool reported = (i >= first && i <= first + p);
            if (!reported) {
                // Everything outside the reported window must vanish.
                CHECK(oracle::bsplineRecursive(U, i, p, x) == 0.0);
            }
            if (x < U[i] || x > U[i + p + 1])
                CHECK(oracle::bsplineRecursive(U, i, p, x) == 0.0);
        }
    }
}

TEST_CASE("derivatives: linear hats, zero-sum, finite-difference oracle")
{
    auto kv1 = KnotVector::openUniform(1, 1);
    Eigen::MatrixXd ders;
    kv1.evalDerivs(0.37, 1, ders);
    CHECK(ders(1, 0) == Catch::Approx(-1.0));
    CHECK(ders(1, 1) == Catch::Approx(1.0));

    // FD truncation is only clean away from breakpoints (kinks of N'').
    auto kv = KnotVector::openUniform(2, 2);
    std::mt19937 gen(11);
    std::uniform_real_distribution<double> dist(0.01, 0.99);
    auto nearBreak = [&](double x) {
        for (double b : kv.breakpoints())
            if (std::abs(x - b) < 1e-3)
                return true;
        return false;
    };
    for (int trial = 0; trial < 30; ++trial) {
        double x = (trial == 0) ? 0.25 : dist(gen);
        while (nearBreak(x))
            x = dist(gen);
        int first = kv.evalDerivs(x, 1, ders);
        CHECK(std::abs(ders.row(1).sum()) < 1e-10);
        for (int j = 0; j < 3; ++j) {
            const int i = first + j;
            auto f = [&](double t) { return oracle::bsplineRecursive(kv.knots(), i, 2, t); };
            CHECK(ders(1, j) == Catch::Approx(oracle::centralDiff(f, x)).margin(1e-6));
        }
    }
}

TEST_CASE("second derivatives match finite differences of first derivatives")
{
    auto kv = KnotVector::openUniform(3, 3);
    Eigen::MatrixXd ders, dplus, dminus;
    const double x = 0.41, h = 1e-6;
    int first = kv.evalDerivs(x, 2, ders);
    int fp = kv.evalDerivs(x + h, 1, dplus);
    int fm = kv.evalDerivs(x - h, 1, dminus);
    REQUIRE(first == fp);
    REQUIRE(first == fm);
    for (int j = 0; j < 4; ++j)
        CHECK(ders(2, j) == Catch::Approx((dplus(1, j) - dminus(1, j)) / (2 * h)).margin(1e-4));
}

TEST_CASE("greville abscissae")
{
    auto kv = KnotVector::openUniform(2, 2);
    auto g = kv.greville();
    REQUIRE(g.size() == 4);
    CHECK(g[0] == Catch::Approx(0.0));
    CHECK(g[1] == Catch::Approx(0.25));
    CHECK(g[2] == Catch::Approx(0.75));
    CHECK(g[3] == Catch::Approx(1.0));
}

TEST_CASE("findSpan assigns x=1 to the last span and rejects out-of-domain x")
{
    auto kv = KnotVector::openUniform(2, 4);
    CHECK(kv.findSpan(1.0) == kv.numBasis() - 1);
    CHECK(kv.findSpan(0.0) == kv.degree());
    CHECK_THROWS_AS(kv.findSpan(-0.01), std::out_of_range);
    CHECK_THROWS_AS(kv.findSpan(1.01), std::out_of_range);
}

TEST_CASE("tensor basis dimension and lexicographic flattening")
{
    TensorBasis basis({KnotVector::openUniform(2, 3), KnotVector::openUniform(1, 4)});
    CHECK(basis.numBasis() == 5 * 5);
    CHECK(basis.flatten({1, 2, 0}) == 1 + 5 * 2);
    auto idx = basis.unflatten(13);
    CHECK(idx[0] == 3);
    CHECK(idx[1] == 2);

    for (int p : {1, 2, 3})
        for (int e : {1, 2, 4}) {
            TensorBasis b3({KnotVector::openUniform(p, e), KnotVector::openUniform(p, e),
                            KnotVector::openUniform(p, e)});
            CHECK(b3.numBasis() == (e + p) * (e + p) * (e + p));
        }
}

TEST_CASE("map_eval: identity, affine, perturbed-bilinear oracle")
{
    Eigen::VectorXd lo(2), hi(2);
    lo << 0, 0;
    hi << 1, 1;
    auto identity = GeometryMap::box(lo, hi);

    Eigen::VectorXd x;
    Eigen::MatrixXd J;
    double xi[2] = {0.3, 0.7};
    identity.eval(xi, x, &J);
    CHECK(x[0] == Catch::Approx(0.3));
    CHECK(x[1] == Catch::Approx(0.7));
    CHECK((J - Eigen::MatrixXd::Identity(2, 2)).norm() < 1e-14);

    hi << 2, 1;
    auto affine = GeometryMap::box(lo, hi);
    double mid[2] = {0.5, 0.5};
    affine.eval(mid, x, &J);
    CHECK(x[0] == Catch::Approx(1.0));
    CHECK(x[1] == Catch::Approx(0.5));
    CHECK(J.determinant() == Catch::Approx(2.0));

    // Perturbed bilinear patch: Jacobian against finite differences.
    TensorBasis basis({KnotVector::openUniform(1, 1), KnotVector::openUniform(1, 1)});
    Eigen::MatrixXd controls(4, 2);
    controls << 0.0, 0.0, 1.1, 0.2, -0.1, 0.9, 1.0, 1.3;
    GeometryMap warped(basis, controls);
    warped.eval(mid, x, &J);
    const double h = 1e-6;
    for (int b = 0; b < 2; ++b) {
        double xiP[2] = {mid[0], mid[1]}, xiM[2] = {mid[0], mid[1]};
        xiP[b] += h;
        xiM[b] -= h;
        Eigen::VectorXd xp, xm;
        warped.eval(xiP, xp);
        warped.eval(xiM, xm);
        Eigen::VectorXd fd = (xp - xm) / (2 * h);
        for (int a = 0; a < 2; ++a)
            CHECK(J(a, b) == Catch::Approx(fd[a]).margin(1e-6));
    }
}

TEST_CASE("patch mesh: h, H and element counts")
{
    Eigen::VectorXd lo(2), hi(2);
    lo << 0, 0;
    hi << 1, 1;
    auto geo = GeometryMap::box(lo, hi);
    TensorBasis sol({KnotVector::openUniform(2, 4), KnotVector::openUniform(2, 4)});
    auto mesh = makePatchMesh(sol, geo);
    CHECK(mesh.numElements() == 16);
    CHECK(mesh.h == Catch::Approx(std::sqrt(2.0) / 4));
    CHECK(mesh.H == Catch::Approx(std::sqrt(2.0)));
    CHECK(mesh.h <= mesh.H);
}

TEST_CASE("gauss rules integrate polynomials exactly and weights sum to one")
{
    for (int n = 1; n <= 8; ++n) {
        auto rule = gaussLegendre(n);
        CHECK(rule.weights.sum() == Catch::Approx(1.0).margin(1e-14));
        for (int k = 0; k <= 2 * n - 1; ++k) {
            double integral = 0.0;
            for (int i = 0; i < n; ++i)
                integral += rule.weights[i] * std::pow(rule.nodes[i], k);
            CHECK(integral == Catch::Approx(1.0 / (k + 1)).margin(1e-13));
        }
    }
    CHECK_THROWS_AS(gaussLegendre(0), std::invalid_argument);
}
