#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include <ieti/assembly.hpp>
#include <ieti/dofmap.hpp>
#include <ieti/linalg.hpp>
#include <ieti/topology.hpp>

namespace ieti {

struct PrimalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class PrimalStrategy { Default, VerticesOnly, AveragesOnly };
enum class PrimalKind { VertexValue, EdgeAverage, FaceAverage };

/// Primal constraint realization: per-patch functional rows C^(k) over local
/// boundary coordinates, the shared global slot of each row, and the
/// multiplier exclusions the primal choice implies.
struct PrimalSpace {
    int numPrimal = 0;
    std::vector<PrimalKind> kinds;            ///< per global primal variable
    std::vector<SparseMatrix> C;              ///< per patch: rows x numBoundary
    std::vector<std::vector<int>> globalIds;  ///< per patch, per row of C

    std::set<int> vertexClasses;  ///< cG: dof classes pinned by vertex primals
    std::vector<std::set<int>> excludedExtraLocals;  ///< dG: per patch, extras in vertex groups

    int numLocalPrimal(int k) const { return static_cast<int>(globalIds[k].size()); }
};

/// @brief Integral of each trace basis function over one side (face-lex
/// order, aligned with sideDofs).
inline std::vector<double> sideAverageWeights(const GeometryMap& G, const TensorBasis& basis,
                                              int side, int quadOrder = 0)
{
    const int nq = quadOrder > 0 ? quadOrder : detail::defaultQuadOrder(basis);
    const SideDofs sd = sideDofs(basis, side);
    std::vector<int> posOfFlat(basis.numBasis(), -1);
    for (size_t i = 0; i < sd.flat.size(); ++i)
        posOfFlat[sd.flat[i]] = static_cast<int>(i);

    std::vector<double> w(sd.flat.size(), 0.0);
    detail::forEachSideQuadPoint(
        G, basis, side, nq,
        [&](const std::array<double, 2>&, const Eigen::VectorXd&, double ds,
            const Eigen::VectorXd&, const std::vector<detail::WindowFunc>& win,
            const std::vector<Eigen::VectorXd>&) {
            for (const auto& fn : win) {
                const int pos = posOfFlat[fn.flat];
                if (pos >= 0)
                    w[pos] += ds * fn.value;
            }
        });
    return w;
}

/// @brief Integral of each basis function along a patch edge (3D), aligned
/// with edgeFlats: ascending along the edge direction.
inline std::vector<double> edgeAverageWeights(const GeometryMap& G, const TensorBasis& basis,
                                              int dir, int bits, int quadOrder = 0)
{
    if (basis.dim() != 3)
        throw PrimalError("edgeAverageWeights: only defined in 3D");
    const int nq = quadOrder > 0 ? quadOrder : detail::defaultQuadOrder(basis);
    const KnotVector& kv = basis.direction(dir);
    const auto table = detail::tabulate(kv, nq);

    double xi[3] = {0, 0, 0};
    int j = 0;
    for (int a = 0; a < 3; ++a) {
        if (a == dir)
            continue;
        xi[a] = ((bits >> j) & 1) ? 1.0 : 0.0;
        ++j;
    }

    std::vector<double> w(kv.numBasis(), 0.0);
    Eigen::VectorXd x(3);
    Eigen::MatrixXd J(3, 3);
    for (const auto& el : table.elements)
        for (size_t q = 0; q < el.nodes.size(); ++q) {
            xi[dir] = el.nodes[q];
            G.eval(xi, x, &J);
            const double measure = J.col(dir).norm();
            for (int m = 0; m <= kv.degree(); ++m)
                w[el.first + m] += el.weights[q] * measure * el.values(q, m);
        }
    return w;
}

namespace detail {

struct PrimalBuilder {
    int numPatches;
    PrimalSpace out;
    std::vector<std::vector<Triplet>> triplets;
    std::vector<int> rowCount;

    explicit PrimalBuilder(int n) : numPatches(n), triplets(n), rowCount(n, 0)
    {
        out.globalIds.resize(n);
        out.excludedExtraLocals.resize(n);
    }

    int allocate(PrimalKind kind)
    {
        out.kinds.push_back(kind);
        return out.numPrimal++;
    }

    void addRow(int patch, int gid, const std::vector<std::pair<int, double>>& entries)
    {
        const int row = rowCount[patch]++;
        for (const auto& [local, w] : entries)
            triplets[patch].emplace_back(row, local, w);
        out.globalIds[patch].push_back(gid);
    }

    PrimalSpace finish(const std::vector<int>& numBoundary)
    {
        if (out.numPrimal == 0)
            throw PrimalError("empty primal set would make the coarse problem singular");
        for (int k = 0; k < numPatches; ++k)
            out.C.push_back(fromTriplets(rowCount[k], numBoundary[k], triplets[k]));
        return std::move(out);
    }
};

/// Free positions and the interior subset of a 1D dof line; interior
/// excludes the two endpoints.
struct LineSelection {
    std::vector<int> freePos;
    std::vector<int> freeInteriorPos;
};

template <class FreePred>
LineSelection selectLine(int count, FreePred&& isFree)
{
    LineSelection sel;
    for (int i = 0; i < count; ++i) {
        if (!isFree(i))
            continue;
        sel.freePos.push_back(i);
        if (i != 0 && i != count - 1)
            sel.freeInteriorPos.push_back(i);
    }
    return sel;
}

inline std::vector<std::pair<int, double>> normalizedEntries(
    const std::vector<int>& freePos, const std::vector<double>& weights,
    const std::vector<int>& locals)
{
    double sum = 0;
    for (int pos : freePos)
        sum += weights[pos];
    std::vector<std::pair<int, double>> entries;
    entries.reserve(freePos.size());
    for (int pos : freePos)
        entries.emplace_back(locals[pos], weights[pos] / sum);
    return entries;
}

} // namespace detail

/// @brief cG primal variables. 2D default: vertex values at free shared
/// patch corners plus one trace integral mean per interface; 3D default:
/// one integral mean per interior patch edge. Vertex classes keep no
/// multipliers (their jump vanishes identically on the primal-continuous
/// space); average constraints stay redundant with the dof-chain
/// multipliers, so the dual operator is positive semidefinite with a
/// consistent right-hand side.
inline PrimalSpace selectPrimalsCg(const MultiPatchTopology& topo,
                                   const std::vector<GeometryMap>& patches,
                                   const std::vector<TensorBasis>& bases, const CgDofmap& dm,
                                   PrimalStrategy strategy = PrimalStrategy::Default,
                                   int quadOrder = 0)
{
    if (topo.numPatches < 2)
        throw PrimalError("primal selection requires a multipatch decomposition");
    if (topo.dim == 3 && strategy == PrimalStrategy::VerticesOnly)
        throw PrimalError("vertex-only primal sets are not supported in 3D");

    detail::PrimalBuilder b(topo.numPatches);
    const bool wantVertices = topo.dim == 2 && strategy != PrimalStrategy::AveragesOnly;
    const bool wantAverages = strategy != PrimalStrategy::VerticesOnly;

    if (wantVertices)
        for (const auto& v : enumerateVertices(patches, topo)) {
            if (v.onDirichlet || v.members.size() < 2)
                continue;
            // all member corners must form one shared dof class; corner-only
            // contact without an interface stays uncoupled
            const auto& [p0, bits0] = v.members[0];
            const int cls = dm.classOf(p0, cornerFlat(bases[p0], bits0));
            bool oneClass = true;
            for (const auto& [p, bits] : v.members)
                oneClass = oneClass && dm.classOf(p, cornerFlat(bases[p], bits)) == cls;
            if (!oneClass || dm.classDirichlet(cls))
                continue;

            const int gid = b.allocate(PrimalKind::VertexValue);
            for (const auto& [p, bits] : v.members) {
                const int local = dm.layout(p).flatToLocal[cornerFlat(bases[p], bits)];
                if (local < 0 || local >= dm.layout(p).numOwnBoundary)
                    throw PrimalError("vertex primal dof is not an interface boundary dof");
                b.addRow(p, gid, {{local, 1.0}});
            }
            b.out.vertexClasses.insert(cls);
        }

    if (wantAverages && topo.dim == 2)
        for (const auto& iface : topo.interfaces) {
            const std::array<std::pair<int, int>, 2> sides{
                std::make_pair(iface.k, iface.sideK), std::make_pair(iface.l, iface.sideL)};

            // one shared functional; both patches integrate their own trace
            const auto& flatsK = sideDofs(bases[iface.k], iface.sideK).flat;
            const auto selK = detail::selectLine(static_cast<int>(flatsK.size()), [&](int i) {
                return !dm.classDirichlet(dm.classOf(iface.k, flatsK[i]));
            });
            if (selK.freeInteriorPos.empty())
                continue;

            const int gid = b.allocate(PrimalKind::EdgeAverage);
            for (const auto& [p, side] : sides) {
                const auto& flats = sideDofs(bases[p], side).flat;
                const auto w = sideAverageWeights(patches[p], bases[p], side, quadOrder);
                const auto sel = detail::selectLine(static_cast<int>(flats.size()), [&](int i) {
                    return !dm.classDirichlet(dm.classOf(p, flats[i]));
                });
                std::vector<int> locals(flats.size(), -1);
                for (int pos : sel.freePos)
                    locals[pos] = dm.layout(p).flatToLocal[flats[pos]];
                b.addRow(p, gid, detail::normalizedEntries(sel.freePos, w, locals));
            }
        }

    if (wantAverages && topo.dim == 3)
        for (const auto& e : enumerateEdges(patches, topo)) {
            if (e.onDirichlet || e.members.size() < 2)
                continue;
            // hinge contact without face coupling leaves distinct classes
            std::set<int> classes0;
            {
                const auto& [p, dir, bits] = e.members[0];
                for (int flat : edgeFlats(bases[p], dir, bits))
                    classes0.insert(dm.classOf(p, flat));
            }
            bool consistent = true;
            for (const auto& [p, dir, bits] : e.members) {
                std::set<int> classes;
                for (int flat : edgeFlats(bases[p], dir, bits))
                    classes.insert(dm.classOf(p, flat));
                consistent = consistent && classes == classes0;
            }
            if (!consistent)
                continue;

            const auto& [p0, dir0, bits0] = e.members[0];
            const auto flats0 = edgeFlats(bases[p0], dir0, bits0);
            const auto sel0 = detail::selectLine(static_cast<int>(flats0.size()), [&](int i) {
                return !dm.classDirichlet(dm.classOf(p0, flats0[i]));
            });
            if (sel0.freeInteriorPos.empty())
                continue;

            const int gid = b.allocate(PrimalKind::EdgeAverage);
            for (const auto& [p, dir, bits] : e.members) {
                const auto flats = edgeFlats(bases[p], dir, bits);
                const auto w = edgeAverageWeights(patches[p], bases[p], dir, bits, quadOrder);
                const auto sel = detail::selectLine(static_cast<int>(flats.size()), [&](int i) {
                    return !dm.classDirichlet(dm.classOf(p, flats[i]));
                });
                std::vector<int> locals(flats.size(), -1);
                for (int pos : sel.freePos)
                    locals[pos] = dm.layout(p).flatToLocal[flats[pos]];
                b.addRow(p, gid, detail::normalizedEntries(sel.freePos, w, locals));
            }
        }

    std::vector<int> nb(topo.numPatches);
    for (int k = 0; k < topo.numPatches; ++k)
        nb[k] = dm.layout(k).numBoundary();
    return b.finish(nb);
}

namespace detail {

/// dG: extra local index of patch `p` mirroring (interface f, neighbor flat).
struct ExtraLookup {
    std::vector<std::map<std::pair<int, int>, int>> byPatch;

    ExtraLookup(const DgDofmap& dm, int numPatches)
    {
        byPatch.resize(numPatches);
        for (int p = 0; p < numPatches; ++p) {
            const auto& lay = dm.layout(p);
            for (int e = 0; e < lay.numExtras(); ++e)
                byPatch[p][{lay.extras[e].interfaceId, lay.extras[e].neighborFlat}] =
                    lay.localOfExtra(e);
        }
    }

    int find(int patch, int interfaceId, int neighborFlat) const
    {
        const auto it = byPatch[patch].find({interfaceId, neighborFlat});
        return it == byPatch[patch].end() ? -1 : it->second;
    }
};

} // namespace detail

/// @brief dG primal variables. Every functional is continuous on the coupled
/// space: a vertex variable ties one patch-own corner dof to its mirror
/// extras on face-neighbors; an average variable ties one side's own trace
/// mean to the mirrored mean on the opposite patch (two per interface).
/// 3D default: one such group per (interior patch edge, member patch).
/// Extras inside vertex groups lose their multiplier rows; average
/// constraints stay redundant with the mirror multipliers, so the dual
/// operator is positive semidefinite with a consistent right-hand side.
inline PrimalSpace selectPrimalsDg(const MultiPatchTopology& topo,
                                   const std::vector<GeometryMap>& patches,
                                   const std::vector<TensorBasis>& bases, const DgDofmap& dm,
                                   PrimalStrategy strategy = PrimalStrategy::Default,
                                   int quadOrder = 0)
{
    if (topo.numPatches < 2)
        throw PrimalError("primal selection requires a multipatch decomposition");
    if (topo.dim == 3 && strategy == PrimalStrategy::VerticesOnly)
        throw PrimalError("vertex-only primal sets are not supported in 3D");

    detail::PrimalBuilder b(topo.numPatches);
    const detail::ExtraLookup lookup(dm, topo.numPatches);
    const bool wantVertices = topo.dim == 2 && strategy != PrimalStrategy::AveragesOnly;
    const bool wantAverages = strategy != PrimalStrategy::VerticesOnly;

    if (wantVertices)
        for (const auto& v : enumerateVertices(patches, topo)) {
            if (v.onDirichlet || v.members.size() < 2)
                continue;
            for (const auto& [k, bits] : v.members) {
                const int corner = cornerFlat(bases[k], bits);
                const int ownLocal = dm.layout(k).flatToLocal[corner];
                if (ownLocal < 0)
                    continue;
                // mirrors of this own dof on the face-neighbors
                std::vector<std::pair<int, int>> mirrors;  // (patch, extra local)
                for (int f : topo.patchInterfaces[k]) {
                    const auto& iface = topo.interfaces[f];
                    const int other = iface.k == k ? iface.l : iface.k;
                    const int local = lookup.find(other, f, corner);
                    if (local >= 0)
                        mirrors.emplace_back(other, local);
                }
                if (mirrors.empty())
                    continue;
                const int gid = b.allocate(PrimalKind::VertexValue);
                b.addRow(k, gid, {{ownLocal, 1.0}});
                for (const auto& [other, local] : mirrors) {
                    b.addRow(other, gid, {{local, 1.0}});
                    b.out.excludedExtraLocals[other].insert(local);
                }
            }
        }

    if (wantAverages && topo.dim == 2)
        for (size_t f = 0; f < topo.interfaces.size(); ++f) {
            const auto& iface = topo.interfaces[f];
            const std::array<std::tuple<int, int, int>, 2> views{
                std::make_tuple(iface.k, iface.sideK, iface.l),
                std::make_tuple(iface.l, iface.sideL, iface.k)};
            for (const auto& [p, side, q] : views) {
                const auto& flats = sideDofs(bases[p], side).flat;
                const auto sel = detail::selectLine(static_cast<int>(flats.size()), [&](int i) {
                    return dm.layout(p).flatToLocal[flats[i]] >= 0;
                });
                if (sel.freeInteriorPos.empty())
                    continue;
                const auto w = sideAverageWeights(patches[p], bases[p], side, quadOrder);

                std::vector<int> ownLocals(flats.size(), -1), mirrorLocals(flats.size(), -1);
                for (int pos : sel.freePos) {
                    ownLocals[pos] = dm.layout(p).flatToLocal[flats[pos]];
                    mirrorLocals[pos] = lookup.find(q, static_cast<int>(f), flats[pos]);
                    if (mirrorLocals[pos] < 0)
                        throw PrimalError("free trace dof without a mirror extra");
                }
                const int gid = b.allocate(PrimalKind::EdgeAverage);
                b.addRow(p, gid, detail::normalizedEntries(sel.freePos, w, ownLocals));
                b.addRow(q, gid, detail::normalizedEntries(sel.freePos, w, mirrorLocals));
            }
        }

    if (wantAverages && topo.dim == 3)
        for (const auto& e : enumerateEdges(patches, topo)) {
            if (e.onDirichlet || e.members.size() < 2)
                continue;
            for (const auto& [p, dir, bits] : e.members) {
                const auto flats = edgeFlats(bases[p], dir, bits);
                const auto sel = detail::selectLine(static_cast<int>(flats.size()), [&](int i) {
                    return dm.layout(p).flatToLocal[flats[i]] >= 0;
                });
                if (sel.freeInteriorPos.empty())
                    continue;
                const auto w = edgeAverageWeights(patches[p], bases[p], dir, bits, quadOrder);

                std::vector<int> ownLocals(flats.size(), -1);
                for (int pos : sel.freePos)
                    ownLocals[pos] = dm.layout(p).flatToLocal[flats[pos]];

                // mirror rows grouped by face-neighbor
                std::map<int, std::vector<int>> mirrorLocals;  // q -> locals aligned by pos
                for (int f : topo.patchInterfaces[p]) {
                    const auto& iface = topo.interfaces[f];
                    const int q = iface.k == p ? iface.l : iface.k;
                    std::vector<int> locals(flats.size(), -1);
                    bool all = true;
                    for (int pos : sel.freePos) {
                        locals[pos] = lookup.find(q, f, flats[pos]);
                        all = all && locals[pos] >= 0;
                    }
                    if (all)
                        mirrorLocals[q] = std::move(locals);
                }
                if (mirrorLocals.empty())
                    continue;

                const int gid = b.allocate(PrimalKind::EdgeAverage);
                b.addRow(p, gid, detail::normalizedEntries(sel.freePos, w, ownLocals));
                for (const auto& [q, locals] : mirrorLocals)
                    b.addRow(q, gid, detail::normalizedEntries(sel.freePos, w, locals));
            }
        }

    std::vector<int> nb(topo.numPatches);
    for (int k = 0; k < topo.numPatches; ++k)
        nb[k] = dm.layout(k).numBoundary();
    return b.finish(nb);
}

} // namespace ieti
