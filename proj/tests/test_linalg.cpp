#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include <ieti/linalg.hpp>

#include "support/oracles.hpp"

using namespace ieti;

namespace {

SparseMatrix sparseFromDense(const Matrix& D)
{
    std::vector<Triplet> ts;
    for (int i = 0; i < D.rows(); ++i)
        for (int j = 0; j < D.cols(); ++j)
            if (D(i, j) != 0.0)
                ts.emplace_back(i, j, D(i, j));
    return fromTriplets(static_cast<int>(D.rows()), static_cast<int>(D.cols()), ts);
}

} // namespace

TEST_CASE("fromTriplets sums duplicates and keeps rows sorted")
{
    std::vector<Triplet> ts{{0, 2, 1.0}, {0, 0, 2.0}, {0, 2, 3.0}, {1, 1, 5.0}};
    auto A = fromTriplets(2, 3, ts);
    CHECK(A.coeff(0, 2) == 4.0);
    CHECK(A.coeff(0, 0) == 2.0);
    CHECK(A.nonZeros() == 3);
    for (int r = 0; r < A.outerSize(); ++r) {
        int last = -1;
        for (SparseMatrix::InnerIterator it(A, r); it; ++it) {
            CHECK(it.col() > last);
            last = it.col();
        }
    }
}

TEST_CASE("triplet text round-trip")
{
    Matrix D = oracle::randomSpd(7, 123);
    D(0, 6) = 0.0;
    D(6, 0) = 0.0;
    auto A = sparseFromDense(D);
    std::stringstream ss;
    writeTriplets(ss, A);
    auto B = readTriplets(ss);
    REQUIRE(B.rows() == A.rows());
    REQUIRE(B.cols() == A.cols());
    CHECK((Matrix(B) - Matrix(A)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("factorize: identity, 2x2, random SPD")
{
    auto I5 = sparseFromDense(Matrix::Identity(5, 5));
    Factorization fI(I5, FactorKind::Spd);
    Vector b = oracle::randomVector(5, 1);
    CHECK((fI.solve(b) - b).norm() < 1e-14);

    Matrix A2(2, 2);
    A2 << 2, 1, 1, 2;
    Factorization f2(sparseFromDense(A2), FactorKind::Spd);
    Vector rhs(2);
    rhs << 3, 3;
    Vector x = f2.solve(rhs);
    CHECK(x[0] == Catch::Approx(1.0));
    CHECK(x[1] == Catch::Approx(1.0));

    Matrix D = oracle::randomSpd(50, 77);
    auto A = sparseFromDense(D);
    Factorization f(A, FactorKind::Spd);
    Vector bb = oracle::randomVector(50, 2);
    CHECK((A * f.solve(bb) - bb).norm() / bb.norm() < 1e-10);

    // Multi-RHS path.
    Matrix B(50, 3);
    B << oracle::randomVector(50, 3), oracle::randomVector(50, 4), oracle::randomVector(50, 5);
    Matrix X = f.solve(B);
    CHECK((A * X - B).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("factorization round-trip on 100 random sparse SPD systems")
{
    for (unsigned seed = 0; seed < 100; ++seed) {
        const int n = 5 + static_cast<int>(seed % 23);
        Matrix D = oracle::randomSpd(n, 1000 + seed);
        // Sparsify off-diagonal entries while keeping diagonal dominance.
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (i != j && std::abs(D(i, j)) < 0.5) {
                    D(i, i) += std::abs(D(i, j));
                    D(i, j) = 0.0;
                }
        // Re-symmetrize after the asymmetric drop.
        D = ((D + D.transpose()) / 2.0).eval();
        auto A = sparseFromDense(D);
        Factorization f(A, FactorKind::Spd);
        Vector b = oracle::randomVector(n, 2000 + seed);
        CHECK((A * f.solve(b) - b).norm() / b.norm() < 1e-10);
    }
}

TEST_CASE("factorize rejects singular matrices, handles indefinite saddle kind")
{
    Matrix S(2, 2);
    S << 1, 0, 0, 0;
    CHECK_THROWS_AS(Factorization(sparseFromDense(S), FactorKind::Spd), SingularMatrixError);

    Matrix saddle(2, 2);
    saddle << 0, 1, 1, 0;  // symmetric, indefinite, nonsingular
    Factorization f(sparseFromDense(saddle), FactorKind::SymmetricIndefinite);
    Vector b(2);
    b << 3, 4;
    Vector x = f.solve(b);
    CHECK(x[0] == Catch::Approx(4.0));
    CHECK(x[1] == Catch::Approx(3.0));

    Matrix Z = Matrix::Zero(3, 3);
    CHECK_THROWS_AS(Factorization(sparseFromDense(Matrix(Z)), FactorKind::SymmetricIndefinite),
                    SingularMatrixError);
}

TEST_CASE("empty factorization is the identity on empty vectors")
{
    SparseMatrix A(0, 0);
    Factorization f(A, FactorKind::Spd);
    CHECK(f.dim() == 0);
    CHECK(f.solve(Vector()).size() == 0);
}

namespace {

auto matOp(const Matrix& A)
{
    return [A](const Vector& v) { return Vector(A * v); };
}

auto identityOp()
{
    return [](const Vector& v) { return v; };
}

double plainDot(const Vector& a, const Vector& b) { return a.dot(b); }

} // namespace

TEST_CASE("pcg: identity operator converges in one iteration")
{
    Vector d = oracle::randomVector(8, 9);
    auto [lambda, rep] = pcg(identityOp(), identityOp(), d, 1e-10, 10, plainDot);
    CHECK(rep.iterations == 1);
    CHECK(rep.converged);
    CHECK((lambda - d).norm() < 1e-14);
}

TEST_CASE("pcg: diag(1,4) gives kappa estimate 4 after 2 iterations")
{
    Matrix F(2, 2);
    F << 1, 0, 0, 4;
    Vector d(2);
    d << 1, 1;
    auto [lambda, rep] = pcg(matOp(F), identityOp(), d, 1e-10, 10, plainDot);
    CHECK(rep.iterations == 2);
    CHECK(rep.kappa == Catch::Approx(4.0).epsilon(1e-8));
    CHECK(rep.ritzMin == Catch::Approx(1.0).epsilon(1e-8));
    CHECK(rep.ritzMax == Catch::Approx(4.0).epsilon(1e-8));
    CHECK((lambda - Vector(F.partialPivLu().solve(d))).norm() < 1e-10);
}

TEST_CASE("pcg: dense solve oracle on [[4,1],[1,3]]")
{
    Matrix F(2, 2);
    F << 4, 1, 1, 3;
    Vector d(2);
    d << 1, 2;
    auto [lambda, rep] = pcg(matOp(F), identityOp(), d, 1e-12, 10, plainDot);
    CHECK(lambda[0] == Catch::Approx(1.0 / 11).margin(1e-10));
    CHECK(lambda[1] == Catch::Approx(7.0 / 11).margin(1e-10));
    CHECK((lambda - oracle::denseSolve(F, d)).norm() < 1e-10);
    CHECK(rep.residualNorms.back() <= 1e-12 * rep.residualNorms.front());
}

TEST_CASE("pcg terminates within n iterations on dense random SPD systems")
{
    // Exact arithmetic terminates in <= n steps; in floating point that only
    // survives at moderate conditioning, so the spectrum is shifted.
    for (int n : {5, 12, 30}) {
        Matrix A = oracle::randomSpd(n, 50 + n);
        A += Matrix::Identity(n, n) * n;
        Vector d = oracle::randomVector(n, 60 + n);
        auto [lambda, rep] = pcg(matOp(A), identityOp(), d, 1e-10, n, plainDot);
        CHECK(rep.converged);
        CHECK(rep.iterations <= n);
        CHECK((A * lambda - d).norm() / d.norm() < 1e-8);
    }
}

TEST_CASE("pcg finishes in #distinct-eigenvalues iterations")
{
    Vector diag(9);
    diag << 1, 1, 1, 2, 2, 2, 5, 5, 5;
    Matrix A = diag.asDiagonal();
    Vector d = oracle::randomVector(9, 31);
    auto [lambda, rep] = pcg(matOp(A), identityOp(), d, 1e-10, 9, plainDot);
    CHECK(rep.iterations <= 3);
}

TEST_CASE("lanczos estimate within 5% of the dense kappa for diagonal operators")
{
    for (int n : {20, 100}) {
        Vector diag(n);
        for (int i = 0; i < n; ++i)
            diag[i] = 1.0 + 9.0 * i / (n - 1);  // spectrum [1,10]
        Matrix A = diag.asDiagonal();
        Vector d = Vector::Ones(n);
        auto [lambda, rep] = pcg(matOp(A), identityOp(), d, 1e-13, 2 * n, plainDot);
        CHECK(rep.kappa == Catch::Approx(10.0).epsilon(0.05));
    }
}

TEST_CASE("pcg with a preconditioner uses the preconditioned norm")
{
    Matrix A = oracle::randomSpd(12, 5);
    Matrix Minv = A.inverse();  // perfect preconditioner: one iteration
    Vector d = oracle::randomVector(12, 6);
    auto [lambda, rep] = pcg(matOp(A), matOp(Minv), d, 1e-10, 12, plainDot);
    CHECK(rep.iterations <= 2);
    CHECK((A * lambda - d).norm() / d.norm() < 1e-9);
}

TEST_CASE("pcg reports non-convergence with the report attached")
{
    Matrix A = oracle::randomSpd(20, 8);
    A += Matrix::Identity(20, 20) * 1e-6;
    Vector d = oracle::randomVector(20, 9);
    try {
        pcg(matOp(A), identityOp(), d, 1e-14, 2, plainDot);
        FAIL("expected NonConvergenceError");
    } catch (const NonConvergenceError& e) {
        CHECK(e.report.iterations == 2);
        CHECK_FALSE(e.report.converged);
        CHECK(e.report.kappa >= 1.0);
    }
}

TEST_CASE("schur helpers match the dense block-elimination oracle")
{
    const int nB = 5, nI = 7, n = nB + nI;
    Matrix K = oracle::randomSpd(n, 99);
    Matrix Kbb = K.topLeftCorner(nB, nB), Kbi = K.topRightCorner(nB, nI);
    Matrix Kib = K.bottomLeftCorner(nI, nB), Kii = K.bottomRightCorner(nI, nI);
    Factorization fKii(sparseFromDense(Kii), FactorKind::Spd);

    Vector fB = oracle::randomVector(nB, 100), fI = oracle::randomVector(nI, 101);
    Vector g = schurRhs(sparseFromDense(Kbi), fKii, fB, fI);
    Vector gOracle = fB - Kbi * Kii.inverse() * fI;
    CHECK((g - gOracle).norm() < 1e-12);

    // f_I = 0 -> g = f_B; f_B = 0 and K_BI = 0 -> g = 0.
    CHECK((schurRhs(sparseFromDense(Kbi), fKii, fB, Vector::Zero(nI)) - fB).norm() == 0.0);
    CHECK(schurRhs(sparseFromDense(Matrix(Matrix::Zero(nB, nI))), fKii,
                   Vector::Zero(nB), fI)
              .norm() == 0.0);

    Vector w = oracle::randomVector(nB, 102);
    Vector Sw = applySchur(sparseFromDense(Kbb), sparseFromDense(Kbi), sparseFromDense(Kib),
                           fKii, w);
    Matrix Sdense = Kbb - Kbi * Kii.inverse() * Kib;
    CHECK((Sw - Sdense * w).norm() < 1e-12);
    CHECK(applySchur(sparseFromDense(Kbb), sparseFromDense(Kbi), sparseFromDense(Kib), fKii,
                     Vector::Zero(nB))
              .norm() == 0.0);

    // K_BI = 0 -> S_e w = K_BB w.
    auto zeroBI = sparseFromDense(Matrix(Matrix::Zero(nB, nI)));
    auto zeroIB = sparseFromDense(Matrix(Matrix::Zero(nI, nB)));
    Vector SwNoCoupling = applySchur(sparseFromDense(Kbb), zeroBI, zeroIB, fKii, w);
    CHECK((SwNoCoupling - Kbb * w).norm() < 1e-13);
}
