#pragma once

#include <ostream>
#include <stdexcept>
#include <utility>
#include <vector>

#include <ieti/assembly.hpp>
#include <ieti/jump.hpp>
#include <ieti/linalg.hpp>

namespace ieti {

struct IetiError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// @brief Per-patch dual-primal pieces: the augmented saddle factorization
/// [K C^T; C 0], the energy-minimal primal basis Phi with C Phi = I, the
/// local coarse block S_PiPi = -mu, and the interior elimination. All
/// factorizations are retained for repeated solves.
class PatchIeti {
public:
    PatchIeti(PatchSystem sys, SparseMatrix C, std::vector<int> globalIds)
        : m_sys(std::move(sys)),
          m_C(std::move(C)),
          m_gids(std::move(globalIds)),
          m_Kii(m_sys.Kii, FactorKind::Spd),
          m_aug(augmented(m_sys, m_C), FactorKind::SymmetricIndefinite)
    {
        const int nb = m_sys.numBoundary;
        const int n = m_sys.size();
        const int np = static_cast<int>(m_C.rows());
        if (static_cast<int>(m_gids.size()) != np)
            throw IetiError("PatchIeti: one global id per constraint row required");
        if (static_cast<int>(m_C.cols()) != nb)
            throw IetiError("PatchIeti: constraint columns must match boundary dofs");

        m_phi.resize(nb, np);
        Eigen::MatrixXd mu(np, np);
        Vector rhs = Vector::Zero(n + np);
        for (int j = 0; j < np; ++j) {
            rhs[n + j] = 1.0;
            const Vector sol = m_aug.solve(rhs);
            rhs[n + j] = 0.0;
            m_phi.col(j) = sol.head(nb);
            mu.col(j) = sol.tail(np);
        }
        m_spipi = -0.5 * (mu + mu.transpose());

        if (np > 0) {
            const double muScale = 1.0 + mu.cwiseAbs().maxCoeff();
            if ((mu - mu.transpose()).cwiseAbs().maxCoeff() > 1e-10 * muScale)
                throw IetiError("PatchIeti: coarse block is not symmetric");
            const Eigen::MatrixXd cphi = Eigen::MatrixXd(m_C) * m_phi;
            if ((cphi - Eigen::MatrixXd::Identity(np, np)).cwiseAbs().maxCoeff() > 1e-10)
                throw IetiError("PatchIeti: C Phi deviates from identity");
        }
    }

    int numPrimal() const { return static_cast<int>(m_C.rows()); }
    int numBoundary() const { return m_sys.numBoundary; }
    int numInterior() const { return m_sys.numInterior; }
    const std::vector<int>& globalIds() const { return m_gids; }
    const SparseMatrix& constraints() const { return m_C; }
    const PatchSystem& system() const { return m_sys; }
    /// energy-minimal primal basis at the interface, boundary x numPrimal
    const Eigen::MatrixXd& basis() const { return m_phi; }
    /// local coarse block Phi^T S Phi
    const Eigen::MatrixXd& coarseBlock() const { return m_spipi; }

    /// y = S v on interface coefficients
    Vector applySchurOp(const Vector& vB) const
    {
        return applySchur(m_sys.Kbb, m_sys.Kbi, m_sys.Kib, m_Kii, vB);
    }

    /// interface load g = f_B - K_BI K_II^{-1} f_I
    Vector schurLoad() const { return schurRhs(m_sys.Kbi, m_Kii, m_sys.fB, m_sys.fI); }

    /// w = S_DeltaDelta^{-1} f: energy-minimal w with C w = 0 and
    /// S w - f orthogonal to ker(C)
    Vector solveDelta(const Vector& fB) const
    {
        const int n = m_sys.size();
        Vector rhs = Vector::Zero(n + numPrimal());
        rhs.head(m_sys.numBoundary) = fB;
        return m_aug.solve(rhs).head(m_sys.numBoundary);
    }

    /// Phi^T f, the local primal components of an interface functional
    Vector primalComponents(const Vector& fB) const { return m_phi.transpose() * fB; }

    /// interior coefficients from solved interface values
    Vector interiorSolve(const Vector& uB) const
    {
        if (m_sys.numInterior == 0)
            return Vector();
        const Vector rhs = m_sys.fI - m_sys.Kib * uB;
        return m_Kii.solve(rhs);
    }

    /// debug dump of Phi and the coarse block in triplet text
    void dumpPrimalDebug(std::ostream& os) const
    {
        os.precision(17);
        os << "phi " << m_phi.rows() << ' ' << m_phi.cols() << '\n';
        for (int i = 0; i < m_phi.rows(); ++i)
            for (int j = 0; j < m_phi.cols(); ++j)
                if (m_phi(i, j) != 0.0)
                    os << i << ' ' << j << ' ' << m_phi(i, j) << '\n';
        os << "spipi " << m_spipi.rows() << ' ' << m_spipi.cols() << '\n';
        for (int i = 0; i < m_spipi.rows(); ++i)
            for (int j = 0; j < m_spipi.cols(); ++j)
                if (m_spipi(i, j) != 0.0)
                    os << i << ' ' << j << ' ' << m_spipi(i, j) << '\n';
    }

private:
    static SparseMatrix augmented(const PatchSystem& sys, const SparseMatrix& C)
    {
        const int n = sys.size();
        const int np = static_cast<int>(C.rows());
        const SparseMatrix K = sys.full();
        std::vector<Triplet> ts;
        ts.reserve(K.nonZeros() + 2 * C.nonZeros());
        for (int r = 0; r < K.outerSize(); ++r)
            for (SparseMatrix::InnerIterator it(K, r); it; ++it)
                ts.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                                it.value());
        for (int r = 0; r < C.outerSize(); ++r)
            for (SparseMatrix::InnerIterator it(C, r); it; ++it) {
                ts.emplace_back(n + static_cast<int>(it.row()), static_cast<int>(it.col()),
                                it.value());
                ts.emplace_back(static_cast<int>(it.col()), n + static_cast<int>(it.row()),
                                it.value());
            }
        return fromTriplets(n + np, n + np, ts);
    }

    PatchSystem m_sys;
    SparseMatrix m_C;
    std::vector<int> m_gids;
    Factorization m_Kii;
    Factorization m_aug;
    Eigen::MatrixXd m_phi;
    Eigen::MatrixXd m_spipi;
};

/// @brief The assembled primal Schur complement and its Cholesky solve.
/// Assembly is additive over patch-local blocks through the shared global
/// slots; a non-SPD result signals an inadequate primal set.
class CoarseProblem {
public:
    CoarseProblem() = default;

    explicit CoarseProblem(Eigen::MatrixXd S) : m_S(std::move(S))
    {
        m_llt.compute(m_S);
        if (m_llt.info() != Eigen::Success)
            throw IetiError("CoarseProblem: assembled primal matrix is not SPD");
    }

    static Eigen::MatrixXd assemble(const std::vector<PatchIeti>& patches, int numPrimal)
    {
        Eigen::MatrixXd S = Eigen::MatrixXd::Zero(numPrimal, numPrimal);
        for (const auto& p : patches) {
            const auto& g = p.globalIds();
            const auto& block = p.coarseBlock();
            for (int i = 0; i < block.rows(); ++i)
                for (int j = 0; j < block.cols(); ++j)
                    S(g[i], g[j]) += block(i, j);
        }
        return S;
    }

    int dim() const { return static_cast<int>(m_S.rows()); }
    const Eigen::MatrixXd& matrix() const { return m_S; }
    Vector solve(const Vector& b) const { return m_llt.solve(b); }

private:
    Eigen::MatrixXd m_S;
    Eigen::LLT<Eigen::MatrixXd> m_llt;
};

/// @brief Serial composition of the dual-primal pieces: the dual operator
/// F = B Stilde^{-1} B^T, the scaled Dirichlet preconditioner
/// M^{-1} = B_D S B_D^T, and solution recovery. The distributed runtime
/// performs the same algebra with explicit communication; this operator is
/// the single-process reference.
class IetiOperator {
public:
    IetiOperator(std::vector<PatchIeti> patches, JumpOperators jump, int numPrimal)
        : m_patches(std::move(patches)), m_jump(std::move(jump)), m_numPrimal(numPrimal)
    {
        for (const auto& p : m_patches)
            m_boundarySizes.push_back(p.numBoundary());
        m_coarse = CoarseProblem(CoarseProblem::assemble(m_patches, numPrimal));
    }

    int numPatches() const { return static_cast<int>(m_patches.size()); }
    int numPrimal() const { return m_numPrimal; }
    int numMultipliers() const { return m_jump.numMultipliers(); }
    const PatchIeti& patch(int k) const { return m_patches[k]; }
    const JumpOperators& jump() const { return m_jump; }
    const CoarseProblem& coarse() const { return m_coarse; }

    /// w = Phi wPi + wDelta on interface coefficients
    std::vector<Vector> embed(const Vector& wPi, const std::vector<Vector>& wDelta) const
    {
        std::vector<Vector> w;
        w.reserve(m_patches.size());
        for (size_t k = 0; k < m_patches.size(); ++k) {
            const auto& p = m_patches[k];
            Vector local = wDelta[k];
            const auto& g = p.globalIds();
            Vector wp(p.numPrimal());
            for (int j = 0; j < wp.size(); ++j)
                wp[j] = wPi[g[j]];
            local += p.basis() * wp;
            w.push_back(std::move(local));
        }
        return w;
    }

    /// fPi = sum_k A^T Phi^T f^(k), fDelta = f - C^T Phi^T f
    std::pair<Vector, std::vector<Vector>> embedAdjoint(const std::vector<Vector>& f) const
    {
        Vector fPi = Vector::Zero(m_numPrimal);
        std::vector<Vector> fDelta;
        fDelta.reserve(m_patches.size());
        for (size_t k = 0; k < m_patches.size(); ++k) {
            const auto& p = m_patches[k];
            const Vector comp = p.primalComponents(f[k]);
            const auto& g = p.globalIds();
            for (int j = 0; j < comp.size(); ++j)
                fPi[g[j]] += comp[j];
            fDelta.push_back(f[k] - p.constraints().transpose() * comp);
        }
        return {std::move(fPi), std::move(fDelta)};
    }

    /// w = Stilde^{-1} f over interface coefficients; Stilde is block
    /// diagonal in the Pi/Delta splitting because Phi is S-orthogonal to
    /// ker(C)
    std::vector<Vector> solveTilde(const std::vector<Vector>& f) const
    {
        Vector fPi = Vector::Zero(m_numPrimal);
        std::vector<Vector> wDelta;
        wDelta.reserve(m_patches.size());
        for (size_t k = 0; k < m_patches.size(); ++k) {
            const auto& p = m_patches[k];
            const Vector comp = p.primalComponents(f[k]);
            const auto& g = p.globalIds();
            for (int j = 0; j < comp.size(); ++j)
                fPi[g[j]] += comp[j];
            wDelta.push_back(p.solveDelta(f[k]));
        }
        return embed(m_coarse.solve(fPi), wDelta);
    }

    /// y = F lambda = B Stilde^{-1} B^T lambda
    Vector applyF(const Vector& lambda) const
    {
        return m_jump.apply(solveTilde(m_jump.applyTranspose(lambda, m_boundarySizes)));
    }

    /// y = B_D S B_D^T r, the scaled Dirichlet preconditioner
    Vector applyMsD(const Vector& r) const
    {
        std::vector<Vector> v = m_jump.applyScaledTranspose(r, m_boundarySizes);
        for (size_t k = 0; k < m_patches.size(); ++k)
            v[k] = m_patches[k].applySchurOp(v[k]);
        return m_jump.applyScaled(v);
    }

    /// d = B Stilde^{-1} gtilde
    Vector dualRhs() const
    {
        std::vector<Vector> g;
        g.reserve(m_patches.size());
        for (const auto& p : m_patches)
            g.push_back(p.schurLoad());
        return m_jump.apply(solveTilde(g));
    }

    /// full patch-local coefficients from converged multipliers:
    /// w = Stilde^{-1}(gtilde - B^T lambda), interior by back-substitution
    std::vector<Vector> recover(const Vector& lambda) const
    {
        std::vector<Vector> f = m_jump.applyTranspose(lambda, m_boundarySizes);
        for (size_t k = 0; k < m_patches.size(); ++k)
            f[k] = m_patches[k].schurLoad() - f[k];
        const std::vector<Vector> wB = solveTilde(f);
        std::vector<Vector> u;
        u.reserve(m_patches.size());
        for (size_t k = 0; k < m_patches.size(); ++k) {
            const auto& p = m_patches[k];
            Vector full(p.numBoundary() + p.numInterior());
            full.head(p.numBoundary()) = wB[k];
            full.tail(p.numInterior()) = p.interiorSolve(wB[k]);
            u.push_back(std::move(full));
        }
        return u;
    }

private:
    std::vector<PatchIeti> m_patches;
    JumpOperators m_jump;
    int m_numPrimal = 0;
    CoarseProblem m_coarse;
    std::vector<int> m_boundarySizes;
};

} // namespace ieti
