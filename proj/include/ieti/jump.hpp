#pragma once

#include <set>
#include <stdexcept>
#include <vector>

#include <ieti/dofmap.hpp>
#include <ieti/linalg.hpp>

namespace ieti {

struct JumpError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// One multiplier row: exactly two coupled dofs in patch-local coordinates.
struct JumpRow {
    int patchA = -1, localA = -1;
    int patchB = -1, localB = -1;
    double valueA = 1.0, valueB = -1.0;
};

/// @brief The jump operator B and its scaled companion B_D over decoupled
/// patch-local vectors. Every constraint couples exactly two dofs;
/// multipliers are ordered deterministically by construction.
class JumpOperators {
public:
    JumpOperators(std::vector<JumpRow> b, std::vector<JumpRow> bd)
        : m_b(std::move(b)), m_bd(std::move(bd))
    {
        if (m_b.size() != m_bd.size())
            throw JumpError("JumpOperators: B and B_D must pair rows");
    }

    int numMultipliers() const { return static_cast<int>(m_b.size()); }
    const std::vector<JumpRow>& rows() const { return m_b; }
    const std::vector<JumpRow>& scaledRows() const { return m_bd; }

    /// y = B w
    Vector apply(const std::vector<Vector>& w) const { return applyRows(m_b, w); }
    /// y = B_D w
    Vector applyScaled(const std::vector<Vector>& w) const { return applyRows(m_bd, w); }

    /// w = B^T lambda, with given per-patch vector sizes
    std::vector<Vector> applyTranspose(const Vector& lambda, const std::vector<int>& sizes) const
    {
        return applyRowsTranspose(m_b, lambda, sizes);
    }
    /// w = B_D^T lambda
    std::vector<Vector> applyScaledTranspose(const Vector& lambda,
                                             const std::vector<int>& sizes) const
    {
        return applyRowsTranspose(m_bd, lambda, sizes);
    }

private:
    static Vector applyRows(const std::vector<JumpRow>& rows, const std::vector<Vector>& w)
    {
        Vector y(rows.size());
        for (size_t r = 0; r < rows.size(); ++r)
            y[r] = rows[r].valueA * w[rows[r].patchA][rows[r].localA] +
                   rows[r].valueB * w[rows[r].patchB][rows[r].localB];
        return y;
    }
    static std::vector<Vector> applyRowsTranspose(const std::vector<JumpRow>& rows,
                                                  const Vector& lambda,
                                                  const std::vector<int>& sizes)
    {
        std::vector<Vector> w;
        w.reserve(sizes.size());
        for (int n : sizes)
            w.push_back(Vector::Zero(n));
        for (size_t r = 0; r < rows.size(); ++r) {
            w[rows[r].patchA][rows[r].localA] += rows[r].valueA * lambda[r];
            w[rows[r].patchB][rows[r].localB] += rows[r].valueB * lambda[r];
        }
        return w;
    }

    std::vector<JumpRow> m_b, m_bd;
};

/// @brief cG jump operators: for every free shared dof class, pointwise
/// constraints chain the members in (patch, flat) order. Classes in
/// `vertexPrimal` or `dropped` carry no multipliers at all. The scaled rows
/// use delta-dagger weights rho_k / sum_over_sharing(rho).
inline JumpOperators buildJumpOperatorsCg(const CgDofmap& dm, const std::vector<double>& rho,
                                          const std::set<int>& vertexPrimal = {},
                                          const std::set<int>& dropped = {})
{
    if (static_cast<int>(rho.size()) != dm.numPatches())
        throw JumpError("buildJumpOperatorsCg: one rho per patch required");
    std::vector<JumpRow> b, bd;
    for (int c = 0; c < dm.numClasses(); ++c) {
        if (dm.classDirichlet(c))
            continue;
        const auto& members = dm.classMembers(c);
        if (members.size() < 2)
            continue;
        if (vertexPrimal.count(c) || dropped.count(c))
            continue;
        double rhoSum = 0;
        for (const auto& [p, flat] : members)
            rhoSum += rho[p];
        for (size_t i = 0; i + 1 < members.size(); ++i) {
            const auto& [pa, fa] = members[i];
            const auto& [pb, fb] = members[i + 1];
            JumpRow row;
            row.patchA = pa;
            row.localA = dm.layout(pa).flatToLocal[fa];
            row.patchB = pb;
            row.localB = dm.layout(pb).flatToLocal[fb];
            if (row.localA < 0 || row.localB < 0)
                throw JumpError("buildJumpOperatorsCg: constraint on eliminated dof");
            b.push_back(row);
            JumpRow scaled = row;
            scaled.valueA = rho[pb] / rhoSum;
            scaled.valueB = -rho[pa] / rhoSum;
            bd.push_back(scaled);
        }
    }
    return JumpOperators(std::move(b), std::move(bd));
}

/// @brief dG jump operators: one constraint per extra dof, +1 at the extra
/// and -1 at the neighbor's own dof it mirrors. The sharing set of a row is
/// the interface's two patches. Extras listed per patch in `excludedExtras`
/// (vertex-primal mirror copies, by local index) carry no multipliers.
inline JumpOperators buildJumpOperatorsDg(const DgDofmap& dm, const std::vector<double>& rho,
                                          const std::vector<std::set<int>>& excludedExtras = {})
{
    if (static_cast<int>(rho.size()) != dm.numPatches())
        throw JumpError("buildJumpOperatorsDg: one rho per patch required");
    if (!excludedExtras.empty() && static_cast<int>(excludedExtras.size()) != dm.numPatches())
        throw JumpError("buildJumpOperatorsDg: exclusion sets must match patch count");
    std::vector<JumpRow> b, bd;
    for (int k = 0; k < dm.numPatches(); ++k) {
        const auto& lay = dm.layout(k);
        for (int e = 0; e < lay.numExtras(); ++e) {
            if (!excludedExtras.empty() && excludedExtras[k].count(lay.localOfExtra(e)))
                continue;
            const auto& ex = lay.extras[e];
            JumpRow row;
            row.patchA = k;
            row.localA = lay.localOfExtra(e);
            row.patchB = ex.neighborPatch;
            row.localB = dm.layout(ex.neighborPatch).flatToLocal[ex.neighborFlat];
            if (row.localB < 0)
                throw JumpError("buildJumpOperatorsDg: extra mirrors an eliminated dof");
            b.push_back(row);
            const double rhoSum = rho[k] + rho[ex.neighborPatch];
            JumpRow scaled = row;
            scaled.valueA = rho[ex.neighborPatch] / rhoSum;
            scaled.valueB = -rho[k] / rhoSum;
            bd.push_back(scaled);
        }
    }
    return JumpOperators(std::move(b), std::move(bd));
}

/// Dense realization of B over the concatenated patch-local spaces (tests
/// and small studies; the solver itself stays matrix-free).
inline Eigen::MatrixXd denseJump(const std::vector<JumpRow>& rows, const std::vector<int>& sizes)
{
    std::vector<int> offset(sizes.size() + 1, 0);
    for (size_t k = 0; k < sizes.size(); ++k)
        offset[k + 1] = offset[k] + sizes[k];
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(static_cast<int>(rows.size()), offset.back());
    for (size_t r = 0; r < rows.size(); ++r) {
        B(r, offset[rows[r].patchA] + rows[r].localA) = rows[r].valueA;
        B(r, offset[rows[r].patchB] + rows[r].localB) = rows[r].valueB;
    }
    return B;
}

} // namespace ieti
