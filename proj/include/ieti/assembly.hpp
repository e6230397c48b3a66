#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include <ieti/dofmap.hpp>
#include <ieti/linalg.hpp>
#include <ieti/quadrature.hpp>
#include <ieti/splines.hpp>
#include <ieti/topology.hpp>

namespace ieti {

struct AssemblyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using ScalarField = std::function<double(const Eigen::VectorXd&)>;

inline double harmonicMean(double a, double b) { return 2.0 * a * b / (a + b); }

/// Patch-local system in B-then-I block order, Dirichlet dofs eliminated.
struct PatchSystem {
    SparseMatrix Kbb, Kbi, Kib, Kii;
    Vector fB, fI;
    int numBoundary = 0;
    int numInterior = 0;
    double h = 0, H = 0;
    double alpha = 1;

    int size() const { return numBoundary + numInterior; }

    SparseMatrix full() const
    {
        std::vector<Triplet> ts;
        auto push = [&ts](const SparseMatrix& M, int r0, int c0) {
            for (int r = 0; r < M.outerSize(); ++r)
                for (SparseMatrix::InnerIterator it(M, r); it; ++it)
                    ts.emplace_back(r0 + static_cast<int>(it.row()), c0 + static_cast<int>(it.col()),
                                    it.value());
        };
        push(Kbb, 0, 0);
        push(Kbi, 0, numBoundary);
        push(Kib, numBoundary, 0);
        push(Kii, numBoundary, numBoundary);
        return fromTriplets(size(), size(), ts);
    }

    Vector load() const
    {
        Vector f(size());
        f.head(numBoundary) = fB;
        f.tail(numInterior) = fI;
        return f;
    }
};

namespace detail {

/// Per-direction basis tabulation at Gauss points of every element.
struct DirectionTable {
    struct Element {
        std::vector<double> nodes, weights;
        Eigen::MatrixXd values, derivs;  // (node, local basis index)
        int first = 0;
    };
    std::vector<Element> elements;
    int degree = 0;
};

inline DirectionTable tabulate(const KnotVector& kv, int nq)
{
    const GaussRule rule = gaussLegendre(nq);
    const auto& bp = kv.breakpoints();
    DirectionTable table;
    table.degree = kv.degree();
    Eigen::MatrixXd ders;
    for (size_t e = 0; e + 1 < bp.size(); ++e) {
        DirectionTable::Element el;
        mapRule(rule, bp[e], bp[e + 1], el.nodes, el.weights);
        el.values.resize(nq, kv.degree() + 1);
        el.derivs.resize(nq, kv.degree() + 1);
        for (int q = 0; q < nq; ++q) {
            const int first = kv.evalDerivs(el.nodes[q], 1, ders);
            if (q == 0)
                el.first = first;
            el.values.row(q) = ders.row(0);
            el.derivs.row(q) = ders.row(1);
        }
        table.elements.push_back(std::move(el));
    }
    return table;
}

inline int defaultQuadOrder(const TensorBasis& basis)
{
    int q = 0;
    for (int a = 0; a < basis.dim(); ++a)
        q = std::max(q, basis.direction(a).degree() + 1);
    return q;
}

/// One evaluated basis function in the active window at a quadrature point.
struct WindowFunc {
    int flat;
    double value;
    Eigen::Vector3d gradParam;
};

} // namespace detail

/// @brief Accumulates ∫ α ∇u·∇v and ∫ f v over the patch volume into
/// triplets/rhs indexed by own flat dof indices.
inline void accumulateVolume(const GeometryMap& G, const TensorBasis& basis, double alpha,
                             const ScalarField& f, int nq, std::vector<Triplet>& K, Vector& rhs)
{
    if (nq < 1)
        throw std::invalid_argument("accumulateVolume: quadrature order must be >= 1");
    const int dim = basis.dim();
    std::vector<detail::DirectionTable> tables;
    for (int a = 0; a < dim; ++a)
        tables.push_back(detail::tabulate(basis.direction(a), nq));

    std::array<int, 3> numElems{1, 1, 1};
    std::array<int, 3> counts{1, 1, 1};
    for (int a = 0; a < dim; ++a) {
        numElems[a] = static_cast<int>(tables[a].elements.size());
        counts[a] = tables[a].degree + 1;
    }
    const int nWin = counts[0] * counts[1] * counts[2];
    std::vector<detail::WindowFunc> win(nWin);
    const int nqTotal = [&] {
        int n = 1;
        for (int a = 0; a < dim; ++a)
            n *= nq;
        return n;
    }();

    double xi[3] = {0, 0, 0};
    Eigen::VectorXd x(dim);
    Eigen::MatrixXd J(dim, dim);
    Eigen::MatrixXd elemMat(nWin, nWin);
    Eigen::VectorXd elemRhs(nWin);
    Eigen::MatrixXd grads(dim, nWin);
    std::vector<int> flats(nWin);
    std::array<int, 3> e{0, 0, 0};
    for (e[2] = 0; e[2] < numElems[2]; ++e[2])
        for (e[1] = 0; e[1] < numElems[1]; ++e[1])
            for (e[0] = 0; e[0] < numElems[0]; ++e[0]) {
                std::array<const detail::DirectionTable::Element*, 3> el{nullptr, nullptr, nullptr};
                for (int a = 0; a < dim; ++a)
                    el[a] = &tables[a].elements[e[a]];
                elemMat.setZero();
                elemRhs.setZero();
                for (int q = 0; q < nqTotal; ++q) {
                    std::array<int, 3> qi{0, 0, 0};
                    int rem = q;
                    double w = 1.0;
                    for (int a = 0; a < dim; ++a) {
                        qi[a] = rem % nq;
                        rem /= nq;
                        xi[a] = el[a]->nodes[qi[a]];
                        w *= el[a]->weights[qi[a]];
                    }
                    G.eval(xi, x, &J);
                    const double detJ = J.determinant();
                    if (detJ <= 0.0)
                        throw AssemblyError("accumulateVolume: non-positive jacobian determinant");
                    const Eigen::MatrixXd JinvT = J.inverse().transpose();

                    int m = 0;
                    std::array<int, 3> li{0, 0, 0};
                    for (li[2] = 0; li[2] < counts[2]; ++li[2])
                        for (li[1] = 0; li[1] < counts[1]; ++li[1])
                            for (li[0] = 0; li[0] < counts[0]; ++li[0], ++m) {
                                double v = 1.0;
                                Eigen::Vector3d g = Eigen::Vector3d::Zero();
                                for (int a = 0; a < dim; ++a) {
                                    double part = 1.0;
                                    for (int b = 0; b < dim; ++b)
                                        if (b != a)
                                            part *= el[b]->values(qi[b], li[b]);
                                    g[a] = part * el[a]->derivs(qi[a], li[a]);
                                    v *= el[a]->values(qi[a], li[a]);
                                }
                                std::array<int, 3> idx{0, 0, 0};
                                for (int a = 0; a < dim; ++a)
                                    idx[a] = el[a]->first + li[a];
                                win[m] = {basis.flatten(idx), v, g};
                            }
                    for (int i = 0; i < nWin; ++i) {
                        flats[i] = win[i].flat;
                        grads.col(i) = JinvT * win[i].gradParam.head(dim);
                    }

                    const double ws = w * detJ;
                    if (f) {
                        const double fv = f(x);
                        for (int i = 0; i < nWin; ++i)
                            elemRhs[i] += ws * fv * win[i].value;
                    }
                    elemMat.noalias() += (alpha * ws) * grads.transpose() * grads;
                }
                for (int i = 0; i < nWin; ++i) {
                    rhs[flats[i]] += elemRhs[i];
                    for (int j = 0; j < nWin; ++j)
                        K.emplace_back(flats[i], flats[j], elemMat(i, j));
                }
            }
}

namespace detail {

/// Face axes of a side and a quadrature pass over its elements. The callback
/// receives the face parameter, physical point, jacobian, surface measure
/// factor, and the own full-dim basis window (values and physical gradients).
template <class Fn>
void forEachSideQuadPoint(const GeometryMap& G, const TensorBasis& basis, int side, int nq, Fn&& fn)
{
    const int dim = basis.dim();
    const int dir = sideDirection(side);
    const double fixed = sideEnd(side) ? 1.0 : 0.0;
    std::array<int, 2> faceAxes{-1, -1};
    int nf = 0;
    for (int a = 0; a < dim; ++a)
        if (a != dir)
            faceAxes[nf++] = a;

    std::vector<DirectionTable> tables(dim);
    for (int a = 0; a < dim; ++a)
        tables[a] = tabulate(basis.direction(a), nq);

    // the fixed direction is evaluated once at the side end
    Eigen::MatrixXd dersFixed;
    const int firstFixed = basis.direction(dir).evalDerivs(fixed, 1, dersFixed);

    std::array<int, 2> numElems{1, 1};
    for (int j = 0; j < nf; ++j)
        numElems[j] = static_cast<int>(tables[faceAxes[j]].elements.size());

    std::array<int, 3> counts{1, 1, 1};
    for (int a = 0; a < dim; ++a)
        counts[a] = basis.direction(a).degree() + 1;
    const int nWin = counts[0] * counts[1] * counts[2];
    std::vector<WindowFunc> win(nWin);

    double xi[3] = {0, 0, 0};
    xi[dir] = fixed;
    Eigen::VectorXd x(dim);
    Eigen::MatrixXd J(dim, dim);
    std::array<int, 2> e{0, 0};
    const int nqFace = nf == 2 ? nq * nq : nq;
    for (e[1] = 0; e[1] < numElems[1]; ++e[1])
        for (e[0] = 0; e[0] < numElems[0]; ++e[0]) {
            std::array<const DirectionTable::Element*, 2> el{nullptr, nullptr};
            for (int j = 0; j < nf; ++j)
                el[j] = &tables[faceAxes[j]].elements[e[j]];
            for (int q = 0; q < nqFace; ++q) {
                std::array<int, 2> qi{0, 0};
                qi[0] = q % nq;
                qi[1] = q / nq;
                double w = 1.0;
                std::array<double, 2> t{0, 0};
                for (int j = 0; j < nf; ++j) {
                    xi[faceAxes[j]] = el[j]->nodes[qi[j]];
                    t[j] = xi[faceAxes[j]];
                    w *= el[j]->weights[qi[j]];
                }
                G.eval(xi, x, &J);
                const double detJ = J.determinant();
                if (detJ <= 0.0)
                    throw AssemblyError("side quadrature: non-positive jacobian determinant");
                const Eigen::MatrixXd Jinv = J.inverse();
                const Eigen::VectorXd a = Jinv.row(dir).transpose();
                const double ds = w * a.norm() * detJ;
                Eigen::VectorXd normal = (sideEnd(side) ? 1.0 : -1.0) * a / a.norm();

                int m = 0;
                std::array<int, 3> li{0, 0, 0};
                for (li[2] = 0; li[2] < counts[2]; ++li[2])
                    for (li[1] = 0; li[1] < counts[1]; ++li[1])
                        for (li[0] = 0; li[0] < counts[0]; ++li[0], ++m) {
                            double v = 1.0;
                            Eigen::Vector3d g = Eigen::Vector3d::Zero();
                            std::array<int, 3> idx{0, 0, 0};
                            auto valueOf = [&](int b) {
                                if (b == dir)
                                    return dersFixed(0, li[b]);
                                const int jb = b == faceAxes[0] ? 0 : 1;
                                return el[jb]->values(qi[jb], li[b]);
                            };
                            auto derivOf = [&](int b) {
                                if (b == dir)
                                    return dersFixed(1, li[b]);
                                const int jb = b == faceAxes[0] ? 0 : 1;
                                return el[jb]->derivs(qi[jb], li[b]);
                            };
                            for (int a2 = 0; a2 < dim; ++a2) {
                                idx[a2] = a2 == dir ? firstFixed + li[a2]
                                                    : el[a2 == faceAxes[0] ? 0 : 1]->first + li[a2];
                                double part = derivOf(a2);
                                for (int b = 0; b < dim; ++b)
                                    if (b != a2)
                                        part *= valueOf(b);
                                g[a2] = part;
                                v *= valueOf(a2);
                            }
                            win[m] = {basis.flatten(idx), v, g};
                        }
                std::vector<Eigen::VectorXd> gradPhys(nWin);
                for (int i = 0; i < nWin; ++i)
                    gradPhys[i] = Jinv.transpose() * win[i].gradParam.head(dim);
                fn(t, x, ds, normal, win, gradPhys);
            }
        }
}

} // namespace detail

/// @brief Adds the Neumann boundary term ∫ g_N v ds of one side to rhs.
inline void accumulateNeumann(const GeometryMap& G, const TensorBasis& basis, int side,
                              const ScalarField& gN, int nq, Vector& rhs)
{
    detail::forEachSideQuadPoint(
        G, basis, side, nq,
        [&](const std::array<double, 2>&, const Eigen::VectorXd& x, double ds,
            const Eigen::VectorXd&, const std::vector<detail::WindowFunc>& win,
            const std::vector<Eigen::VectorXd>&) {
            const double g = gN(x);
            for (const auto& wfn : win)
                rhs[wfn.flat] += ds * g * wfn.value;
        });
}

/// @brief Boundary coefficients by Greville collocation: for every Dirichlet
/// side of the patch, the trace of g_D is interpolated at the side's Greville
/// points; returns values per own flat index (0 where not Dirichlet).
inline std::vector<double> dirichletValues(const GeometryMap& G, const TensorBasis& basis,
                                           const MultiPatchTopology& topo, int patch,
                                           const ScalarField& gD)
{
    const int dim = basis.dim();
    std::vector<double> out(basis.numBasis(), 0.0);
    if (!gD)
        return out;

    for (const auto& [p, side] : topo.dirichletSides) {
        if (p != patch)
            continue;
        const int dir = sideDirection(side);
        const double fixed = sideEnd(side) ? 1.0 : 0.0;
        std::array<int, 2> faceAxes{-1, -1};
        int nf = 0;
        for (int a = 0; a < dim; ++a)
            if (a != dir)
                faceAxes[nf++] = a;

        std::array<std::vector<double>, 2> grev;
        std::array<int, 2> sizes{1, 1};
        std::array<Eigen::PartialPivLU<Eigen::MatrixXd>, 2> colloc;
        for (int j = 0; j < nf; ++j) {
            const KnotVector& kv = basis.direction(faceAxes[j]);
            grev[j] = kv.greville();
            sizes[j] = kv.numBasis();
            Eigen::MatrixXd A = Eigen::MatrixXd::Zero(sizes[j], sizes[j]);
            std::vector<double> vals(kv.degree() + 1);
            for (int i = 0; i < sizes[j]; ++i) {
                const int first = kv.evalBasis(grev[j][i], vals.data());
                for (int c = 0; c <= kv.degree(); ++c)
                    A(i, first + c) = vals[c];
            }
            colloc[j] = Eigen::PartialPivLU<Eigen::MatrixXd>(A);
        }

        // sample g_D at the tensor Greville grid of the side
        Eigen::MatrixXd V(sizes[0], sizes[1]);
        double xi[3] = {0, 0, 0};
        xi[dir] = fixed;
        Eigen::VectorXd x(dim);
        for (int i1 = 0; i1 < sizes[1]; ++i1)
            for (int i0 = 0; i0 < sizes[0]; ++i0) {
                xi[faceAxes[0]] = grev[0][i0];
                if (nf > 1)
                    xi[faceAxes[1]] = grev[1][i1];
                G.eval(xi, x);
                V(i0, i1) = gD(x);
            }

        // tensor collocation solves, one direction at a time
        V = colloc[0].solve(V);
        if (nf > 1)
            V = colloc[1].solve(V.transpose()).transpose();

        const SideDofs sd = sideDofs(basis, side);
        for (int i1 = 0; i1 < sizes[1]; ++i1)
            for (int i0 = 0; i0 < sizes[0]; ++i0)
                out[sd.flat[i0 + sizes[0] * i1]] = V(i0, i1);
    }
    return out;
}

/// Data about one neighbor side needed for dG interface assembly; in the
/// distributed runtime this is the payload exchanged between workers.
struct DgNeighborData {
    std::vector<KnotVector> faceKnots;   ///< neighbor side's face-direction knots, neighbor order
    double h = 0;                        ///< neighbor patch mesh size
    std::vector<double> traceDirichlet;  ///< per neighbor side dof (face-lex); NaN = free
};

inline DgNeighborData makeDgNeighborData(const MultiPatchTopology& topo, int nbrPatch, int nbrSide,
                                         const GeometryMap& Gn, const TensorBasis& basisN,
                                         const ScalarField& gD)
{
    DgNeighborData data;
    const int dir = sideDirection(nbrSide);
    for (int a = 0; a < basisN.dim(); ++a)
        if (a != dir)
            data.faceKnots.push_back(basisN.direction(a));
    data.h = makePatchMesh(basisN, Gn).h;

    const auto dirFlags = detail::ownDirichletFlags(topo, nbrPatch, basisN);
    const auto values = dirichletValues(Gn, basisN, topo, nbrPatch, gD);
    const SideDofs sd = sideDofs(basisN, nbrSide);
    data.traceDirichlet.resize(sd.flat.size());
    for (size_t i = 0; i < sd.flat.size(); ++i)
        data.traceDirichlet[i] =
            dirFlags[sd.flat[i]] ? values[sd.flat[i]] : std::numeric_limits<double>::quiet_NaN();
    return data;
}

namespace detail {

inline bool knotsMatch(const KnotVector& own, const KnotVector& nbr, bool flip)
{
    if (own.degree() != nbr.degree() || own.knots().size() != nbr.knots().size())
        return false;
    const auto& a = own.knots();
    const auto& b = nbr.knots();
    const size_t m = a.size();
    for (size_t i = 0; i < m; ++i) {
        const double expect = flip ? 1.0 - b[m - 1 - i] : b[i];
        if (std::abs(a[i] - expect) > 1e-12)
            return false;
    }
    return true;
}

} // namespace detail

/// @brief Adds the SIP interface terms s^(k) + p^(k) of one interface to
/// patch k's extended triplets. Extended indices: own flats, then extras at
/// extBase + (own side face-lex position). Extras represent the neighbor
/// trace; `o` maps neighbor face indices onto own face indices.
inline void accumulateDgInterface(const GeometryMap& G, const TensorBasis& basis, int side,
                                  const Orientation& o, const DgNeighborData& nbr, double alphaK,
                                  double delta, double hK, int extBase, int nq,
                                  std::vector<Triplet>& K)
{
    const int dim = basis.dim();
    const int dir = sideDirection(side);
    const int nf = dim - 1;
    std::array<int, 2> faceAxes{-1, -1};
    int j = 0;
    for (int a = 0; a < dim; ++a)
        if (a != dir)
            faceAxes[j++] = a;

    if (static_cast<int>(nbr.faceKnots.size()) != nf)
        throw AssemblyError("accumulateDgInterface: neighbor face dimension mismatch");
    for (int jn = 0; jn < nf; ++jn)
        if (!detail::knotsMatch(basis.direction(faceAxes[o.axisMap[jn]]), nbr.faceKnots[jn],
                                o.flip[jn]))
            throw AssemblyError("accumulateDgInterface: non-matching interface knots");

    std::array<int, 2> ownFaceSizes{1, 1};
    for (int jo = 0; jo < nf; ++jo)
        ownFaceSizes[jo] = basis.direction(faceAxes[jo]).numBasis();
    std::array<int, 2> nbrSizes{1, 1};
    for (int jn = 0; jn < nf; ++jn)
        nbrSizes[jn] = nbr.faceKnots[jn].numBasis();

    const double hkl = harmonicMean(hK, nbr.h);
    const double pen = delta * alphaK / hkl;

    detail::forEachSideQuadPoint(
        G, basis, side, nq,
        [&](const std::array<double, 2>& t, const Eigen::VectorXd&, double ds,
            const Eigen::VectorXd& normal, const std::vector<detail::WindowFunc>& win,
            const std::vector<Eigen::VectorXd>& gradPhys) {
            // neighbor face parameters via the inverse orientation map
            std::array<double, 2> s{0, 0};
            for (int jn = 0; jn < nf; ++jn)
                s[jn] = o.flip[jn] ? 1.0 - t[o.axisMap[jn]] : t[o.axisMap[jn]];

            // neighbor trace window (values only; fluxes are one-sided)
            std::array<std::vector<double>, 2> nv;
            std::array<int, 2> nFirst{0, 0};
            std::array<int, 2> nCount{1, 1};
            for (int jn = 0; jn < nf; ++jn) {
                nCount[jn] = nbr.faceKnots[jn].degree() + 1;
                nv[jn].resize(nCount[jn]);
                nFirst[jn] = nbr.faceKnots[jn].evalBasis(s[jn], nv[jn].data());
            }
            struct NbrFunc {
                int ext;
                double value;
            };
            std::vector<NbrFunc> nbrWin;
            nbrWin.reserve(nCount[0] * nCount[1]);
            for (int m1 = 0; m1 < nCount[1]; ++m1)
                for (int m0 = 0; m0 < nCount[0]; ++m0) {
                    std::array<int, 2> nIdx{nFirst[0] + m0, nf > 1 ? nFirst[1] + m1 : 0};
                    // own face index receiving this neighbor index
                    std::array<int, 2> kIdx{0, 0};
                    for (int jn = 0; jn < nf; ++jn)
                        kIdx[o.axisMap[jn]] =
                            o.flip[jn] ? nbrSizes[jn] - 1 - nIdx[jn] : nIdx[jn];
                    const int ownLin = kIdx[0] + ownFaceSizes[0] * kIdx[1];
                    const double val = nv[0][m0] * (nf > 1 ? nv[1][m1] : 1.0);
                    nbrWin.push_back({extBase + ownLin, val});
                }

            const double half = 0.5 * alphaK * ds;
            for (size_t i = 0; i < win.size(); ++i) {
                const double dni = gradPhys[i].dot(normal);
                const double vi = win[i].value;
                for (size_t jw = 0; jw < win.size(); ++jw) {
                    const double dnj = gradPhys[jw].dot(normal);
                    const double vj = win[jw].value;
                    // s^(k): -(α/2)(∂n u_k v_k + ∂n v_k u_k); p^(k): +c u_k v_k
                    K.emplace_back(win[jw].flat, win[i].flat,
                                   -half * (dni * vj + dnj * vi) + pen * ds * vi * vj);
                }
                for (const auto& nb : nbrWin) {
                    // s^(k): +(α/2) ∂n u_k v_l and symmetric; p^(k): -c u_k v_l
                    K.emplace_back(nb.ext, win[i].flat, half * dni * nb.value - pen * ds * vi * nb.value);
                    K.emplace_back(win[i].flat, nb.ext, half * dni * nb.value - pen * ds * vi * nb.value);
                }
            }
            for (const auto& na : nbrWin)
                for (const auto& nb : nbrWin)
                    K.emplace_back(na.ext, nb.ext, pen * ds * na.value * nb.value);
        });
}

/// Pre-elimination extended dG patch operator: own dofs then mirror extras.
struct DgPatchExtended {
    SparseMatrix K;
    Vector rhs;
    int numOwn = 0;
    std::vector<int> mirrorBase;          ///< per entry of topo.patchInterfaces[patch]
    std::vector<double> mirrorDirichlet;  ///< aligned with extended index − numOwn; NaN = free
};

/// @brief Assembles a^(k) + s^(k) + p^(k) and the load over the extended
/// index space of one dG patch. `neighborData` is ordered like
/// topo.patchInterfaces[patch].
inline DgPatchExtended assembleDgExtended(const MultiPatchTopology& topo, int patch,
                                          const GeometryMap& G, const TensorBasis& basis,
                                          double alpha, double delta, const ScalarField& f,
                                          const ScalarField& gN,
                                          const std::vector<DgNeighborData>& neighborData,
                                          int quadOrder = 0)
{
    const int nq = quadOrder > 0 ? quadOrder : detail::defaultQuadOrder(basis);
    DgPatchExtended out;
    out.numOwn = basis.numBasis();

    const auto& ifaceIds = topo.patchInterfaces[patch];
    if (neighborData.size() != ifaceIds.size())
        throw AssemblyError("assembleDgExtended: one neighbor data block per interface required");

    int ext = out.numOwn;
    for (size_t i = 0; i < ifaceIds.size(); ++i) {
        out.mirrorBase.push_back(ext);
        const auto& iface = topo.interfaces[ifaceIds[i]];
        const int side = iface.k == patch ? iface.sideK : iface.sideL;
        ext += static_cast<int>(sideDofs(basis, side).flat.size());
    }
    const int extSize = ext;
    out.mirrorDirichlet.assign(extSize - out.numOwn, 0.0);

    std::vector<Triplet> K;
    out.rhs = Vector::Zero(extSize);
    Vector rhsOwn = Vector::Zero(out.numOwn);
    accumulateVolume(G, basis, alpha, f, nq, K, rhsOwn);
    if (gN)
        for (const auto& [p, s] : topo.neumannSides)
            if (p == patch)
                accumulateNeumann(G, basis, s, gN, nq, rhsOwn);
    out.rhs.head(out.numOwn) = rhsOwn;

    const double hK = makePatchMesh(basis, G).h;
    for (size_t i = 0; i < ifaceIds.size(); ++i) {
        const auto& iface = topo.interfaces[ifaceIds[i]];
        const bool isK = iface.k == patch;
        const int side = isK ? iface.sideK : iface.sideL;
        const Orientation o = isK ? iface.orientation
                                  : inverseOrientation(iface.orientation, topo.dim - 1);
        const auto& nbr = neighborData[i];

        // mirror Dirichlet markers arrive in the neighbor's face-lex order;
        // translate to the own-side order used by the extra block
        const int count = static_cast<int>(sideDofs(basis, side).flat.size());
        if (static_cast<int>(nbr.traceDirichlet.size()) != count)
            throw AssemblyError("assembleDgExtended: neighbor trace size mismatch");
        std::array<int, 2> nbrSizes{1, 1};
        for (size_t jn = 0; jn < nbr.faceKnots.size(); ++jn)
            nbrSizes[jn] = nbr.faceKnots[jn].numBasis();
        std::array<int, 2> ownFaceSizes{1, 1};
        {
            const SideDofs sdOwn = sideDofs(basis, side);
            ownFaceSizes = sdOwn.faceSizes;
        }
        const int nf = topo.dim - 1;
        for (int lin = 0; lin < count; ++lin) {
            std::array<int, 2> nIdx{lin % nbrSizes[0], lin / nbrSizes[0]};
            std::array<int, 2> kIdx{0, 0};
            for (int jn = 0; jn < nf; ++jn)
                kIdx[o.axisMap[jn]] = o.flip[jn] ? nbrSizes[jn] - 1 - nIdx[jn] : nIdx[jn];
            const int ownLin = kIdx[0] + ownFaceSizes[0] * kIdx[1];
            out.mirrorDirichlet[out.mirrorBase[i] - out.numOwn + ownLin] = nbr.traceDirichlet[lin];
        }

        accumulateDgInterface(G, basis, side, o, nbr, alpha, delta, hK, out.mirrorBase[i], nq, K);
    }

    out.K = fromTriplets(extSize, extSize, K);
    return out;
}

namespace detail {

/// Shared elimination/splitting: extended triplets + rhs -> PatchSystem.
inline PatchSystem buildSystem(const SparseMatrix& Kext, const Vector& rhsExt,
                               const std::vector<int>& extToLocal,
                               const std::vector<double>& extDirichlet, const PatchLayout& layout,
                               double h, double H, double alpha)
{
    PatchSystem sys;
    sys.numBoundary = layout.numBoundary();
    sys.numInterior = layout.numInterior;
    sys.h = h;
    sys.H = H;
    sys.alpha = alpha;

    const int nb = sys.numBoundary;
    Vector rhs = Vector::Zero(layout.size());
    for (int i = 0; i < static_cast<int>(extToLocal.size()); ++i)
        if (extToLocal[i] >= 0)
            rhs[extToLocal[i]] = rhsExt[i];

    std::vector<Triplet> bb, bi, ib, ii;
    for (int r = 0; r < Kext.outerSize(); ++r)
        for (SparseMatrix::InnerIterator it(Kext, r); it; ++it) {
            const int lr = extToLocal[it.row()];
            const int lc = extToLocal[it.col()];
            if (lr < 0)
                continue;
            if (lc < 0) {
                rhs[lr] -= it.value() * extDirichlet[it.col()];
                continue;
            }
            if (lr < nb && lc < nb)
                bb.emplace_back(lr, lc, it.value());
            else if (lr < nb)
                bi.emplace_back(lr, lc - nb, it.value());
            else if (lc < nb)
                ib.emplace_back(lr - nb, lc, it.value());
            else
                ii.emplace_back(lr - nb, lc - nb, it.value());
        }
    sys.Kbb = fromTriplets(nb, nb, bb);
    sys.Kbi = fromTriplets(nb, sys.numInterior, bi);
    sys.Kib = fromTriplets(sys.numInterior, nb, ib);
    sys.Kii = fromTriplets(sys.numInterior, sys.numInterior, ii);
    sys.fB = rhs.head(nb);
    sys.fI = rhs.tail(sys.numInterior);
    return sys;
}

} // namespace detail

/// @brief Full cG patch assembly: volume + Neumann terms, Dirichlet
/// elimination with Greville lifting, B-then-I block split.
inline PatchSystem assemblePatchCg(const GeometryMap& G, const TensorBasis& basis, double alpha,
                                   const ScalarField& f, const ScalarField& gN,
                                   const ScalarField& gD, const MultiPatchTopology& topo,
                                   int patch, const PatchLayout& layout, int quadOrder = 0)
{
    const int nq = quadOrder > 0 ? quadOrder : detail::defaultQuadOrder(basis);
    std::vector<Triplet> K;
    Vector rhs = Vector::Zero(basis.numBasis());
    accumulateVolume(G, basis, alpha, f, nq, K, rhs);
    if (gN)
        for (const auto& [p, s] : topo.neumannSides)
            if (p == patch)
                accumulateNeumann(G, basis, s, gN, nq, rhs);

    const auto dirVals = dirichletValues(G, basis, topo, patch, gD);
    const auto mesh = makePatchMesh(basis, G);
    return detail::buildSystem(fromTriplets(basis.numBasis(), basis.numBasis(), K), rhs,
                               layout.flatToLocal, dirVals, layout, mesh.h, mesh.H, alpha);
}

/// @brief Full dG patch assembly over the extended space, with Dirichlet
/// elimination of own dofs and of extras mirroring neighbor Dirichlet dofs.
inline PatchSystem assemblePatchDg(const MultiPatchTopology& topo, int patch,
                                   const GeometryMap& G, const TensorBasis& basis, double alpha,
                                   double delta, const ScalarField& f, const ScalarField& gN,
                                   const ScalarField& gD, const PatchLayout& layout,
                                   const std::vector<DgNeighborData>& neighborData,
                                   int quadOrder = 0)
{
    DgPatchExtended ext =
        assembleDgExtended(topo, patch, G, basis, alpha, delta, f, gN, neighborData, quadOrder);

    const auto ownDir = dirichletValues(G, basis, topo, patch, gD);
    const int extSize = ext.numOwn + static_cast<int>(ext.mirrorDirichlet.size());
    std::vector<int> extToLocal(extSize, -1);
    std::vector<double> extDirichlet(extSize, 0.0);
    for (int flat = 0; flat < ext.numOwn; ++flat) {
        extToLocal[flat] = layout.flatToLocal[flat];
        extDirichlet[flat] = ownDir[flat];
    }
    int freeExtra = 0;
    for (int m = 0; m < static_cast<int>(ext.mirrorDirichlet.size()); ++m) {
        if (std::isnan(ext.mirrorDirichlet[m]))
            extToLocal[ext.numOwn + m] = layout.localOfExtra(freeExtra++);
        else
            extDirichlet[ext.numOwn + m] = ext.mirrorDirichlet[m];
    }
    if (freeExtra != layout.numExtras())
        throw AssemblyError("assemblePatchDg: extra dof count mismatch with layout");

    const auto mesh = makePatchMesh(basis, G);
    return detail::buildSystem(ext.K, ext.rhs, extToLocal, extDirichlet, layout, mesh.h, mesh.H,
                               alpha);
}

namespace detail {

/// Σ_l (δα_k/h_kl) ∫ (own trace - mirrored extras trace)² over the
/// interfaces of patch k; `u` is extended (own then extras, pre-elimination).
inline double patchPenaltySquared(const MultiPatchTopology& topo, int k,
                                  const std::vector<GeometryMap>& patches,
                                  const std::vector<TensorBasis>& bases,
                                  const std::vector<double>& alphas, double delta, const Vector& u,
                                  int nq)
{
    const TensorBasis& basis = bases[k];
    double total = 0.0;
    const double hK = makePatchMesh(basis, patches[k]).h;
    int extBase = basis.numBasis();
    for (int fid : topo.patchInterfaces[k]) {
        const auto& iface = topo.interfaces[fid];
        const bool isK = iface.k == k;
        const int side = isK ? iface.sideK : iface.sideL;
        const int nbrPatch = isK ? iface.l : iface.k;
        const Orientation o =
            isK ? iface.orientation : inverseOrientation(iface.orientation, topo.dim - 1);
        const int nbrSide = isK ? iface.sideL : iface.sideK;
        const double hL = makePatchMesh(bases[nbrPatch], patches[nbrPatch]).h;
        const double pen = delta * alphas[k] / harmonicMean(hK, hL);
        const SideDofs sd = sideDofs(basis, side);

        double jumpSq = 0.0;
        detail::forEachSideQuadPoint(
            patches[k], basis, side, nq,
            [&](const std::array<double, 2>& t, const Eigen::VectorXd&, double ds,
                const Eigen::VectorXd&, const std::vector<detail::WindowFunc>& win,
                const std::vector<Eigen::VectorXd>&) {
                double own = 0.0;
                for (const auto& wfn : win)
                    own += wfn.value * u[wfn.flat];

                // extras trace at the mapped neighbor parameter
                const int nf = topo.dim - 1;
                std::array<double, 2> s{0, 0};
                for (int jn = 0; jn < nf; ++jn)
                    s[jn] = o.flip[jn] ? 1.0 - t[o.axisMap[jn]] : t[o.axisMap[jn]];
                double other = 0.0;
                std::array<std::vector<double>, 2> nv;
                std::array<int, 2> nFirst{0, 0};
                std::array<int, 2> nCount{1, 1};
                std::array<int, 2> nbrSizes{1, 1};
                const TensorBasis& bn = bases[nbrPatch];
                const int nbrDir = sideDirection(nbrSide);
                int jn2 = 0;
                std::array<const KnotVector*, 2> nbrKv{nullptr, nullptr};
                for (int a = 0; a < topo.dim; ++a)
                    if (a != nbrDir)
                        nbrKv[jn2++] = &bn.direction(a);
                for (int jn = 0; jn < nf; ++jn) {
                    nbrSizes[jn] = nbrKv[jn]->numBasis();
                    nCount[jn] = nbrKv[jn]->degree() + 1;
                    nv[jn].resize(nCount[jn]);
                    nFirst[jn] = nbrKv[jn]->evalBasis(s[jn], nv[jn].data());
                }
                for (int m1 = 0; m1 < nCount[1]; ++m1)
                    for (int m0 = 0; m0 < nCount[0]; ++m0) {
                        std::array<int, 2> nIdx{nFirst[0] + m0, nf > 1 ? nFirst[1] + m1 : 0};
                        std::array<int, 2> kIdx{0, 0};
                        for (int jn = 0; jn < nf; ++jn)
                            kIdx[o.axisMap[jn]] =
                                o.flip[jn] ? nbrSizes[jn] - 1 - nIdx[jn] : nIdx[jn];
                        const int ownLin = kIdx[0] + sd.faceSizes[0] * kIdx[1];
                        other += nv[0][m0] * (nf > 1 ? nv[1][m1] : 1.0) * u[extBase + ownLin];
                    }
                jumpSq += ds * (own - other) * (own - other);
            });
        total += pen * jumpSq;
        extBase += static_cast<int>(sd.flat.size());
    }
    return total;
}

} // namespace detail

/// @brief ‖u‖²_dG over decoupled extended patch vectors (own + extras per
/// patch, pre-elimination): Σ_k [α_k |u^(k)|²_H1 + Σ_l (δα_k/h_kl) ∫ (jump)²].
inline double dgNormSquared(const MultiPatchTopology& topo,
                            const std::vector<GeometryMap>& patches,
                            const std::vector<TensorBasis>& bases,
                            const std::vector<double>& alphas, double delta,
                            const std::vector<Vector>& extended, int quadOrder = 0)
{
    double total = 0.0;
    for (int k = 0; k < topo.numPatches; ++k) {
        const TensorBasis& basis = bases[k];
        const int nq = quadOrder > 0 ? quadOrder : detail::defaultQuadOrder(basis);
        const int nOwn = basis.numBasis();
        const Vector& u = extended[k];

        // α |u|²_H1 via the raw stiffness
        std::vector<Triplet> K;
        Vector dummy = Vector::Zero(nOwn);
        accumulateVolume(patches[k], basis, alphas[k], {}, nq, K, dummy);
        SparseMatrix A = fromTriplets(nOwn, nOwn, K);
        total += u.head(nOwn).dot(A * u.head(nOwn));

        total += detail::patchPenaltySquared(topo, k, patches, bases, alphas, delta, u, nq);
    }
    return total;
}

} // namespace ieti
