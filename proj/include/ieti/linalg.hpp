#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

namespace ieti {

/// Compressed-row sparse matrix (row offsets, column indices, values).
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Triplet = Eigen::Triplet<double>;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct SingularMatrixError : std::runtime_error {
    explicit SingularMatrixError(const std::string& what, int pivot = -1)
        : std::runtime_error(what), pivotIndex(pivot)
    {
    }
    int pivotIndex;  ///< offending pivot when known, -1 otherwise
};

/// @brief Builds a compressed matrix from triplets; duplicates are summed,
/// columns within each row end up strictly increasing.
inline SparseMatrix fromTriplets(int rows, int cols, const std::vector<Triplet>& ts)
{
    SparseMatrix A(rows, cols);
    A.setFromTriplets(ts.begin(), ts.end());
    A.makeCompressed();
    return A;
}

/// Plain-text triplet export: header "rows cols nnz", then "row col value".
inline void writeTriplets(std::ostream& os, const SparseMatrix& A)
{
    os << A.rows() << ' ' << A.cols() << ' ' << A.nonZeros() << '\n';
    os.precision(17);
    for (int r = 0; r < A.outerSize(); ++r)
        for (SparseMatrix::InnerIterator it(A, r); it; ++it)
            os << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
}

inline SparseMatrix readTriplets(std::istream& is)
{
    int rows = 0, cols = 0;
    long long nnz = 0;
    if (!(is >> rows >> cols >> nnz))
        throw std::runtime_error("readTriplets: malformed header");
    std::vector<Triplet> ts;
    ts.reserve(static_cast<size_t>(nnz));
    for (long long k = 0; k < nnz; ++k) {
        int r, c;
        double v;
        if (!(is >> r >> c >> v))
            throw std::runtime_error("readTriplets: truncated entry list");
        ts.emplace_back(r, c, v);
    }
    return fromTriplets(rows, cols, ts);
}

enum class FactorKind { Spd, SymmetricIndefinite };

/// Direct factorization of a square sparse matrix, reusable for many
/// right-hand sides. SPD matrices use LDL^T with AMD ordering; indefinite
/// saddle systems use sparse LU with partial pivoting (COLAMD ordering).
/// Both orderings are deterministic. Immutable after construction.
class Factorization {
public:
    Factorization(const SparseMatrix& A, FactorKind kind)
        : m_kind(kind), m_dim(static_cast<int>(A.rows()))
    {
        if (A.rows() != A.cols())
            throw std::invalid_argument("Factorization: matrix must be square");
        if (m_dim == 0)
            return;  // empty block: solve() is the identity on empty vectors
        Eigen::SparseMatrix<double> Acol(A);
        if (kind == FactorKind::Spd) {
            m_ldlt = std::make_shared<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>>();
            m_ldlt->compute(Acol);
            if (m_ldlt->info() != Eigen::Success)
                throw SingularMatrixError("Factorization: LDL^T failed (matrix singular or not SPD)");
            int pivot = -1;
            if (m_ldlt->vectorD().minCoeff(&pivot) <= 0.0)
                throw SingularMatrixError(
                    "Factorization: nonpositive pivot in SPD factorization at index " +
                        std::to_string(pivot),
                    pivot);
        } else {
            m_lu = std::make_shared<Eigen::SparseLU<Eigen::SparseMatrix<double>>>();
            m_lu->compute(Acol);
            if (m_lu->info() != Eigen::Success)
                throw SingularMatrixError("Factorization: LU failed: " + m_lu->lastErrorMessage());
            // numerically rank-deficient matrices pass the structural checks;
            // a probe solve whose norm explodes exposes them (condition lower
            // bound ||A|| ||x|| / ||b|| against 1e13)
            double anorm = 0.0;
            for (int r = 0; r < A.outerSize(); ++r) {
                double rowSum = 0.0;
                for (SparseMatrix::InnerIterator it(A, r); it; ++it)
                    rowSum += std::abs(it.value());
                anorm = std::max(anorm, rowSum);
            }
            Vector probe(m_dim);
            std::uint64_t s = 0x9e3779b97f4a7c15ull;
            for (int i = 0; i < m_dim; ++i) {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                probe[i] = 1.0 + static_cast<double>(s % 1024) / 1024.0;
            }
            const Vector x = m_lu->solve(probe);
            if (!x.allFinite() ||
                anorm * x.lpNorm<Eigen::Infinity>() > 1e13 * probe.lpNorm<Eigen::Infinity>())
                throw SingularMatrixError("Factorization: matrix is numerically singular");
        }
    }

    int dim() const { return m_dim; }
    FactorKind kind() const { return m_kind; }

    Vector solve(const Vector& b) const
    {
        checkSize(static_cast<int>(b.size()));
        if (m_dim == 0)
            return Vector();
        return m_ldlt ? Vector(m_ldlt->solve(b)) : Vector(m_lu->solve(b));
    }

    /// Multi right-hand-side solve, one column per RHS.
    Matrix solve(const Matrix& B) const
    {
        checkSize(static_cast<int>(B.rows()));
        if (m_dim == 0)
            return Matrix(0, B.cols());
        return m_ldlt ? Matrix(m_ldlt->solve(B)) : Matrix(m_lu->solve(B));
    }

private:
    void checkSize(int n) const
    {
        if (n != m_dim)
            throw std::invalid_argument("Factorization::solve: RHS size mismatch");
    }

    FactorKind m_kind;
    int m_dim;
    std::shared_ptr<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>> m_ldlt;
    std::shared_ptr<Eigen::SparseLU<Eigen::SparseMatrix<double>>> m_lu;
};

/// @brief Condensed boundary RHS g = f_B - K_BI K_II^{-1} f_I.
inline Vector schurRhs(const SparseMatrix& Kbi, const Factorization& Kii,
                       const Vector& fB, const Vector& fI)
{
    if (Kii.dim() == 0)
        return fB;
    return fB - Kbi * Kii.solve(fI);
}

/// @brief S_e w = K_BB w - K_BI K_II^{-1} K_IB w, applied without forming
/// S_e: solve K_II x = -K_IB w, then v = K_BB w + K_BI x.
inline Vector applySchur(const SparseMatrix& Kbb, const SparseMatrix& Kbi,
                         const SparseMatrix& Kib, const Factorization& Kii,
                         const Vector& w)
{
    Vector v = Kbb * w;
    if (Kii.dim() > 0) {
        Vector x = Kii.solve(Vector(-(Kib * w)));
        v += Kbi * x;
    }
    return v;
}

struct PcgReport {
    int iterations = 0;
    bool converged = false;
    std::vector<double> residualNorms;  ///< preconditioned norms, [0] = initial
    double ritzMin = 1.0;
    double ritzMax = 1.0;
    double kappa = 1.0;  ///< Lanczos estimate ritzMax/ritzMin
};

struct NonConvergenceError : std::runtime_error {
    NonConvergenceError(const std::string& what, PcgReport rep)
        : std::runtime_error(what), report(std::move(rep))
    {
    }
    PcgReport report;
};

// Vector-space shims used by pcg(); overloads for other vector types (the
// runtime's DVector) are found in namespace ieti at instantiation time.
inline Vector pcgZeroLike(const Vector& v) { return Vector::Zero(v.size()); }
inline void pcgAxpy(Vector& y, double a, const Vector& x) { y += a * x; }
/// p = s + beta p
inline void pcgScaleAdd(Vector& p, double beta, const Vector& s) { p = s + beta * p; }

namespace detail {

/// Extreme eigenvalues of the CG-Lanczos tridiagonal built from the alpha
/// and beta coefficient histories.
inline void lanczosRitz(const std::vector<double>& alphas, const std::vector<double>& betas,
                        PcgReport& report)
{
    const int m = static_cast<int>(alphas.size());
    if (m == 0)
        return;
    Vector diag(m), subdiag(std::max(m - 1, 0));
    diag[0] = 1.0 / alphas[0];
    for (int j = 1; j < m; ++j) {
        diag[j] = 1.0 / alphas[j] + betas[j - 1] / alphas[j - 1];
        subdiag[j - 1] = std::sqrt(betas[j - 1]) / alphas[j - 1];
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es;
    es.computeFromTridiagonal(diag, subdiag, Eigen::EigenvaluesOnly);
    report.ritzMin = es.eigenvalues().minCoeff();
    report.ritzMax = es.eigenvalues().maxCoeff();
    report.kappa = (report.ritzMin > 0.0)
                       ? report.ritzMax / report.ritzMin
                       : std::numeric_limits<double>::infinity();
}

} // namespace detail

/// Preconditioned conjugate gradients with zero initial guess.
///
/// Convergence: relative reduction of the preconditioned residual norm
/// sqrt(r^T M r) below tol, where M is the applied preconditioner operator.
/// The scalar product is delegated to `dot(a, b)`; in distributed settings
/// the first argument is the distributed-representation operand.
///
/// applyF: v -> F v. applyM: r -> M r (must also map the residual's
/// representation to the search direction's, in distributed settings).
template <class Vec, class OpF, class OpM, class DotFn>
std::pair<Vec, PcgReport> pcg(OpF&& applyF, OpM&& applyM, const Vec& d, double tol,
                              int maxit, DotFn&& dot)
{
    if (tol <= 0.0 || tol >= 1.0)
        throw std::invalid_argument("pcg: tol must lie in (0,1)");
    if (maxit < 1)
        throw std::invalid_argument("pcg: maxit must be >= 1");

    PcgReport report;
    Vec lambda = pcgZeroLike(d);
    Vec r = d;
    Vec s = applyM(r);
    double rho = dot(r, s);
    if (rho < 0.0)
        throw std::runtime_error("pcg: preconditioner not positive definite");
    report.residualNorms.push_back(std::sqrt(rho));
    if (report.residualNorms[0] == 0.0) {
        report.converged = true;
        return {lambda, report};
    }
    const double target = tol * report.residualNorms[0];

    Vec p = s;
    std::vector<double> alphas, betas;
    for (int it = 1; it <= maxit; ++it) {
        Vec q = applyF(p);
        const double gamma = dot(q, p);
        if (gamma <= 0.0)
            throw std::runtime_error("pcg: operator not positive definite");
        const double alpha = rho / gamma;
        alphas.push_back(alpha);
        pcgAxpy(lambda, alpha, p);
        pcgAxpy(r, -alpha, q);
        s = applyM(r);
        const double rhoNew = dot(r, s);
        if (rhoNew < 0.0)
            throw std::runtime_error("pcg: preconditioner not positive definite");
        report.iterations = it;
        report.residualNorms.push_back(std::sqrt(rhoNew));
        if (report.residualNorms.back() <= target) {
            report.converged = true;
            break;
        }
        const double beta = rhoNew / rho;
        betas.push_back(beta);
        rho = rhoNew;
        pcgScaleAdd(p, beta, s);
    }
    detail::lanczosRitz(alphas, betas, report);
    if (!report.converged)
        throw NonConvergenceError("pcg: no convergence within " + std::to_string(maxit) +
                                      " iterations",
                                  report);
    return {lambda, report};
}

} // namespace ieti
