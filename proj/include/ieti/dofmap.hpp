#pragma once

#include <algorithm>
#include <array>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <ieti/splines.hpp>
#include <ieti/topology.hpp>

namespace ieti {

struct DofmapError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Trace dofs of a tensor basis on one patch side, in face-lexicographic
/// order (ascending face axes, axis 0 fastest).
struct SideDofs {
    std::vector<int> flat;
    std::array<int, 2> faceSizes{1, 1};
    int faceDims = 0;
};

inline SideDofs sideDofs(const TensorBasis& basis, int side)
{
    const int dim = basis.dim();
    const int dir = sideDirection(side);
    if (dir >= dim)
        throw std::invalid_argument("sideDofs: side out of range");
    const auto sizes = basis.sizes();
    const int fixed = sideEnd(side) ? sizes[dir] - 1 : 0;

    SideDofs out;
    out.faceDims = dim - 1;
    std::array<int, 2> faceAxes{-1, -1};
    int j = 0;
    for (int a = 0; a < dim; ++a)
        if (a != dir) {
            faceAxes[j] = a;
            out.faceSizes[j] = sizes[a];
            ++j;
        }
    const int count = out.faceSizes[0] * out.faceSizes[1];
    out.flat.reserve(count);
    for (int i1 = 0; i1 < out.faceSizes[1]; ++i1)
        for (int i0 = 0; i0 < out.faceSizes[0]; ++i0) {
            std::array<int, 3> idx{0, 0, 0};
            idx[dir] = fixed;
            idx[faceAxes[0]] = i0;
            if (out.faceDims > 1)
                idx[faceAxes[1]] = i1;
            out.flat.push_back(basis.flatten(idx));
        }
    return out;
}

/// Flat index of the basis function at a patch corner (bits per direction).
inline int cornerFlat(const TensorBasis& basis, int bits)
{
    const auto sizes = basis.sizes();
    std::array<int, 3> idx{0, 0, 0};
    for (int a = 0; a < basis.dim(); ++a)
        idx[a] = ((bits >> a) & 1) ? sizes[a] - 1 : 0;
    return basis.flatten(idx);
}

/// Flat indices along a 3D patch edge (direction `dir`, other directions
/// fixed by `bits` in ascending direction order), ascending along the edge.
inline std::vector<int> edgeFlats(const TensorBasis& basis, int dir, int bits)
{
    if (basis.dim() != 3)
        throw std::invalid_argument("edgeFlats: requires a 3D basis");
    const auto sizes = basis.sizes();
    std::array<int, 3> idx{0, 0, 0};
    int j = 0;
    for (int a = 0; a < 3; ++a) {
        if (a == dir)
            continue;
        idx[a] = ((bits >> j) & 1) ? sizes[a] - 1 : 0;
        ++j;
    }
    std::vector<int> out;
    out.reserve(sizes[dir]);
    for (int i = 0; i < sizes[dir]; ++i) {
        idx[dir] = i;
        out.push_back(basis.flatten(idx));
    }
    return out;
}

inline Orientation inverseOrientation(const Orientation& o, int faceDims)
{
    Orientation inv;
    for (int j = 0; j < faceDims; ++j) {
        inv.axisMap[o.axisMap[j]] = j;
        inv.flip[o.axisMap[j]] = o.flip[j];
    }
    return inv;
}

/// Matched (ownFlat, neighborFlat) trace dof pairs across an interface, in
/// the own side's face-lexicographic order. `o` maps neighbor face indices
/// onto own face indices. Throws if the trace discretizations differ.
inline std::vector<std::pair<int, int>> matchedSideDofs(const TensorBasis& own, int ownSide,
                                                        const TensorBasis& nbr, int nbrSide,
                                                        const Orientation& o)
{
    const SideDofs sOwn = sideDofs(own, ownSide);
    const SideDofs sNbr = sideDofs(nbr, nbrSide);
    for (int j = 0; j < sNbr.faceDims; ++j)
        if (sNbr.faceSizes[j] != sOwn.faceSizes[o.axisMap[j]])
            throw DofmapError("matchedSideDofs: interface discretizations do not match");

    const Orientation inv = inverseOrientation(o, sOwn.faceDims);
    std::vector<std::pair<int, int>> pairs;
    pairs.reserve(sOwn.flat.size());
    std::array<int, 2> idxOwn{0, 0};
    for (int i1 = 0; i1 < (sOwn.faceDims > 1 ? sOwn.faceSizes[1] : 1); ++i1)
        for (int i0 = 0; i0 < sOwn.faceSizes[0]; ++i0) {
            idxOwn = {i0, i1};
            std::array<int, 2> idxNbr{0, 0};
            for (int a = 0; a < sOwn.faceDims; ++a) {
                const int j = inv.axisMap[a];
                idxNbr[j] = inv.flip[a] ? sOwn.faceSizes[a] - 1 - idxOwn[a] : idxOwn[a];
            }
            const int linOwn = idxOwn[0] + sOwn.faceSizes[0] * idxOwn[1];
            const int linNbr = idxNbr[0] + sNbr.faceSizes[0] * idxNbr[1];
            pairs.emplace_back(sOwn.flat[linOwn], sNbr.flat[linNbr]);
        }
    return pairs;
}

/// One mirrored neighbor-trace coefficient (dG extra dof).
struct ExtraDof {
    int interfaceId = -1;
    int neighborPatch = -1;
    int neighborFlat = -1;  ///< neighbor's own flat index being mirrored
    int ownSideFlat = -1;   ///< geometrically coincident own trace flat
};

/// Per-patch local ordering: interface-boundary dofs first (own trace
/// ascending by flat, then extra dofs grouped by interface), interior last.
struct PatchLayout {
    int numOwnBoundary = 0;
    int numInterior = 0;
    std::vector<int> localToFlat;   ///< local position -> own flat (-1 for extras)
    std::vector<int> flatToLocal;   ///< own flat -> local position (-1 if eliminated)
    std::vector<ExtraDof> extras;   ///< extras[e] sits at local numOwnBoundary + e
    std::vector<int> dirichletFlat; ///< eliminated own flats, ascending

    int numExtras() const { return static_cast<int>(extras.size()); }
    int numBoundary() const { return numOwnBoundary + numExtras(); }
    int size() const { return numBoundary() + numInterior; }
    int localOfExtra(int e) const { return numOwnBoundary + e; }
};

namespace detail {

struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int x)
    {
        while (parent[x] != x)
            x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(int a, int b)
    {
        a = find(a);
        b = find(b);
        if (a != b)
            parent[std::max(a, b)] = std::min(a, b);
    }
};

inline std::vector<bool> ownDirichletFlags(const MultiPatchTopology& topo, int patch,
                                           const TensorBasis& basis)
{
    std::vector<bool> flags(basis.numBasis(), false);
    for (const auto& [p, s] : topo.dirichletSides) {
        if (p != patch)
            continue;
        for (int flat : sideDofs(basis, s).flat)
            flags[flat] = true;
    }
    return flags;
}

inline std::vector<bool> interfaceBoundaryFlags(const MultiPatchTopology& topo, int patch,
                                                const TensorBasis& basis)
{
    std::vector<bool> flags(basis.numBasis(), false);
    for (int f : topo.patchInterfaces[patch]) {
        const auto& iface = topo.interfaces[f];
        const int side = iface.k == patch ? iface.sideK : iface.sideL;
        for (int flat : sideDofs(basis, side).flat)
            flags[flat] = true;
    }
    return flags;
}

inline PatchLayout makeLayout(const TensorBasis& basis, const std::vector<bool>& dirichlet,
                              const std::vector<bool>& boundary, std::vector<ExtraDof> extras)
{
    PatchLayout lay;
    const int n = basis.numBasis();
    lay.flatToLocal.assign(n, -1);
    for (int flat = 0; flat < n; ++flat) {
        if (dirichlet[flat]) {
            lay.dirichletFlat.push_back(flat);
            continue;
        }
        if (boundary[flat]) {
            lay.flatToLocal[flat] = static_cast<int>(lay.localToFlat.size());
            lay.localToFlat.push_back(flat);
        }
    }
    lay.numOwnBoundary = static_cast<int>(lay.localToFlat.size());
    lay.extras = std::move(extras);
    for (size_t e = 0; e < lay.extras.size(); ++e)
        lay.localToFlat.push_back(-1);
    for (int flat = 0; flat < n; ++flat) {
        if (dirichlet[flat] || boundary[flat])
            continue;
        lay.flatToLocal[flat] = static_cast<int>(lay.localToFlat.size());
        lay.localToFlat.push_back(flat);
        ++lay.numInterior;
    }
    return lay;
}

} // namespace detail

/// @brief cG dof identification: matched interface dofs of adjacent patches
/// share one global class; a class is Dirichlet if any member lies on a
/// Dirichlet side of its own patch.
class CgDofmap {
public:
    CgDofmap(const MultiPatchTopology& topo, const std::vector<TensorBasis>& bases)
    {
        if (static_cast<int>(bases.size()) != topo.numPatches)
            throw DofmapError("CgDofmap: one basis per patch required");
        m_offset.resize(bases.size() + 1, 0);
        for (size_t k = 0; k < bases.size(); ++k)
            m_offset[k + 1] = m_offset[k] + bases[k].numBasis();

        detail::UnionFind uf(m_offset.back());
        for (const auto& f : topo.interfaces) {
            auto pairs = matchedSideDofs(bases[f.k], f.sideK, bases[f.l], f.sideL, f.orientation);
            for (const auto& [kFlat, lFlat] : pairs)
                uf.unite(m_offset[f.k] + kFlat, m_offset[f.l] + lFlat);
        }

        // compact class ids in first-visit order (patch ascending, flat ascending)
        m_classOf.assign(m_offset.back(), -1);
        for (int node = 0; node < m_offset.back(); ++node) {
            const int root = uf.find(node);
            if (m_classOf[root] < 0) {
                m_classOf[root] = static_cast<int>(m_members.size());
                m_members.emplace_back();
            }
            m_classOf[node] = m_classOf[root];
            m_members[m_classOf[node]].emplace_back(patchOfNode(node), node - m_offset[patchOfNode(node)]);
        }

        m_classDirichlet.assign(m_members.size(), false);
        std::vector<std::vector<bool>> ownDir(bases.size());
        for (int k = 0; k < topo.numPatches; ++k)
            ownDir[k] = detail::ownDirichletFlags(topo, k, bases[k]);
        for (size_t c = 0; c < m_members.size(); ++c)
            for (const auto& [p, flat] : m_members[c])
                if (ownDir[p][flat])
                    m_classDirichlet[c] = true;

        m_freeId.assign(m_members.size(), -1);
        for (size_t c = 0; c < m_members.size(); ++c)
            if (!m_classDirichlet[c])
                m_freeId[c] = m_numFree++;

        // per-patch layouts; Dirichlet status comes from the class (a dof
        // matched to a neighbor's Dirichlet dof is eliminated everywhere)
        for (int k = 0; k < topo.numPatches; ++k) {
            std::vector<bool> dir(bases[k].numBasis());
            for (int flat = 0; flat < bases[k].numBasis(); ++flat)
                dir[flat] = m_classDirichlet[classOf(k, flat)];
            auto bnd = detail::interfaceBoundaryFlags(topo, k, bases[k]);
            m_layouts.push_back(detail::makeLayout(bases[k], dir, bnd, {}));
        }
    }

    int numPatches() const { return static_cast<int>(m_layouts.size()); }
    int numClasses() const { return static_cast<int>(m_members.size()); }
    int numFree() const { return m_numFree; }

    int classOf(int patch, int flat) const { return m_classOf[m_offset[patch] + flat]; }
    const std::vector<std::pair<int, int>>& classMembers(int c) const { return m_members[c]; }
    bool classDirichlet(int c) const { return m_classDirichlet[c]; }
    int freeIdOf(int c) const { return m_freeId[c]; }
    const PatchLayout& layout(int k) const { return m_layouts[k]; }

private:
    int patchOfNode(int node) const
    {
        const auto it = std::upper_bound(m_offset.begin(), m_offset.end(), node);
        return static_cast<int>(it - m_offset.begin()) - 1;
    }

    std::vector<int> m_offset;
    std::vector<int> m_classOf;
    std::vector<std::vector<std::pair<int, int>>> m_members;
    std::vector<bool> m_classDirichlet;
    std::vector<int> m_freeId;
    int m_numFree = 0;
    std::vector<PatchLayout> m_layouts;
};

/// @brief dG dof bookkeeping: no cross-patch identification; each patch
/// mirrors the neighbor trace on every interface as extra dofs. Extras whose
/// source dof is Dirichlet on the neighbor are eliminated alongside it.
class DgDofmap {
public:
    DgDofmap(const MultiPatchTopology& topo, const std::vector<TensorBasis>& bases)
    {
        if (static_cast<int>(bases.size()) != topo.numPatches)
            throw DofmapError("DgDofmap: one basis per patch required");
        m_mirrors.resize(topo.interfaces.size());
        std::vector<std::vector<bool>> ownDir(bases.size());
        for (int k = 0; k < topo.numPatches; ++k)
            ownDir[k] = detail::ownDirichletFlags(topo, k, bases[k]);

        // full mirror pair lists per interface, for both endpoint patches
        for (size_t f = 0; f < topo.interfaces.size(); ++f) {
            const auto& iface = topo.interfaces[f];
            m_mirrors[f].first = matchedSideDofs(bases[iface.k], iface.sideK, bases[iface.l],
                                                 iface.sideL, iface.orientation);
            m_mirrors[f].second =
                matchedSideDofs(bases[iface.l], iface.sideL, bases[iface.k], iface.sideK,
                                inverseOrientation(iface.orientation, topo.dim - 1));
        }

        for (int k = 0; k < topo.numPatches; ++k) {
            std::vector<ExtraDof> extras;
            for (int f : topo.patchInterfaces[k]) {
                const auto& iface = topo.interfaces[f];
                const int nbr = iface.k == k ? iface.l : iface.k;
                const auto& pairs = iface.k == k ? m_mirrors[f].first : m_mirrors[f].second;
                for (const auto& [ownFlat, nbrFlat] : pairs) {
                    if (ownDir[nbr][nbrFlat])
                        continue;  // mirrors a known boundary value
                    extras.push_back({f, nbr, nbrFlat, ownFlat});
                }
            }
            auto bnd = detail::interfaceBoundaryFlags(topo, k, bases[k]);
            m_layouts.push_back(detail::makeLayout(bases[k], ownDir[k], bnd, std::move(extras)));
        }

        // global numbering over own free dofs only (patch-major)
        m_globalOf.resize(bases.size());
        for (int k = 0; k < topo.numPatches; ++k) {
            m_globalOf[k].assign(bases[k].numBasis(), -1);
            for (int flat = 0; flat < bases[k].numBasis(); ++flat)
                if (!ownDir[k][flat])
                    m_globalOf[k][flat] = m_numGlobal++;
        }
    }

    int numPatches() const { return static_cast<int>(m_layouts.size()); }
    const PatchLayout& layout(int k) const { return m_layouts[k]; }
    int numGlobal() const { return m_numGlobal; }
    int globalOf(int patch, int flat) const { return m_globalOf[patch][flat]; }

    /// Full pre-elimination mirror list of interface f as seen from `patch`:
    /// (ownFlat, neighborFlat) in the own side's face-lex order.
    const std::vector<std::pair<int, int>>& mirrorPairs(int f, int patch,
                                                        const MultiPatchTopology& topo) const
    {
        const auto& iface = topo.interfaces[f];
        if (patch == iface.k)
            return m_mirrors[f].first;
        if (patch == iface.l)
            return m_mirrors[f].second;
        throw DofmapError("mirrorPairs: patch not on interface");
    }

private:
    std::vector<PatchLayout> m_layouts;
    std::vector<std::pair<std::vector<std::pair<int, int>>, std::vector<std::pair<int, int>>>>
        m_mirrors;
    std::vector<std::vector<int>> m_globalOf;
    int m_numGlobal = 0;
};

} // namespace ieti
