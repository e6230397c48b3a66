#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include <ieti/splines.hpp>

namespace ieti {

constexpr double kGeomTol = 1e-10;

struct TopologyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Side index convention: side s fixes parametric direction s/2 at the low
/// end (s even) or high end (s odd). 2D: 0=west, 1=east, 2=south, 3=north.
inline int sideDirection(int side) { return side / 2; }
inline int sideEnd(int side) { return side % 2; }

/// How the neighbor side's face-index grid maps onto the owner side's grid.
/// Face axes are the patch's parametric directions other than the side's
/// fixed one, in ascending order; 2D sides have a single face axis.
struct Orientation {
    std::array<int, 2> axisMap{0, 1};      ///< l-face axis j lands on k-face axis axisMap[j]
    std::array<bool, 2> flip{false, false};  ///< l-face axis j runs backwards on k

    bool identity(int faceDims) const
    {
        for (int j = 0; j < faceDims; ++j)
            if (axisMap[j] != j || flip[j])
                return false;
        return true;
    }
};

/// One matched interface F^(kl); canonically k < l.
struct Interface {
    int k = -1, l = -1;
    int sideK = -1, sideL = -1;
    Orientation orientation;  ///< maps side-l face indices onto side-k face indices
};

struct MultiPatchTopology {
    int numPatches = 0;
    int dim = 0;
    std::vector<Interface> interfaces;
    std::vector<std::vector<int>> patchInterfaces;  ///< interface ids per patch
    std::vector<std::vector<int>> neighbors;        ///< I_F^(k): neighbor patch ids
    std::vector<std::pair<int, int>> dirichletSides;  ///< (patch, side)
    std::vector<std::pair<int, int>> neumannSides;

    bool isDirichletSide(int patch, int side) const
    {
        for (const auto& [p, s] : dirichletSides)
            if (p == patch && s == side)
                return true;
        return false;
    }
};

namespace detail {

/// Full-dimension corner bit pattern of a face corner: face bits fb spread
/// over the non-fixed directions, the side's direction pinned to its end.
inline int faceCornerBits(int dim, int side, int fb)
{
    const int dir = sideDirection(side);
    int bits = sideEnd(side) << dir;
    int j = 0;
    for (int a = 0; a < dim; ++a) {
        if (a == dir)
            continue;
        if ((fb >> j) & 1)
            bits |= 1 << a;
        ++j;
    }
    return bits;
}

inline bool samePoint(const Eigen::VectorXd& a, const Eigen::VectorXd& b)
{
    return (a - b).lpNorm<Eigen::Infinity>() <= kGeomTol;
}

struct SideGeometry {
    int patch, side;
    std::vector<Eigen::VectorXd> corners;  // indexed by face bits
    Eigen::VectorXd lo, hi;                // bounding box over corners
};

inline SideGeometry makeSideGeometry(const std::vector<GeometryMap>& patches, int p, int s)
{
    const int dim = patches[p].dim();
    SideGeometry g;
    g.patch = p;
    g.side = s;
    const int faceCorners = 1 << (dim - 1);
    for (int fb = 0; fb < faceCorners; ++fb)
        g.corners.push_back(patches[p].corner(faceCornerBits(dim, s, fb)));
    g.lo = g.corners[0];
    g.hi = g.corners[0];
    for (const auto& c : g.corners) {
        g.lo = g.lo.cwiseMin(c);
        g.hi = g.hi.cwiseMax(c);
    }
    return g;
}

/// Matches the corner sets of two sides; fills `orientation` (side-b face
/// bits onto side-a face bits) when they coincide as point sets.
inline bool matchSides(const SideGeometry& a, const SideGeometry& b, int dim,
                       Orientation& orientation)
{
    const int faceCorners = 1 << (dim - 1);
    std::array<int, 4> map{};  // b-face bits -> a-face bits
    for (int fb = 0; fb < faceCorners; ++fb) {
        int found = -1;
        for (int fa = 0; fa < faceCorners; ++fa)
            if (samePoint(b.corners[fb], a.corners[fa])) {
                if (found >= 0)
                    throw TopologyError("ambiguous side matching: degenerate side between patch " +
                                        std::to_string(a.patch) + " and patch " +
                                        std::to_string(b.patch));
                found = fa;
            }
        if (found < 0)
            return false;
        map[fb] = found;
    }
    // The bit map must be affine over GF(2): map[x] = perm(x) ^ map[0].
    const int faceDims = dim - 1;
    Orientation o;
    for (int j = 0; j < faceDims; ++j) {
        const int delta = map[1 << j] ^ map[0];
        // delta must be a single bit, consistent across all corners
        if (delta == 0 || (delta & (delta - 1)) != 0)
            throw TopologyError("ambiguous side matching between patch " +
                                std::to_string(a.patch) + " and patch " +
                                std::to_string(b.patch));
        o.axisMap[j] = (delta == 1) ? 0 : ((delta == 2) ? 1 : -1);
        o.flip[j] = ((map[0] >> o.axisMap[j]) & 1) != 0;
    }
    for (int fb = 0; fb < faceCorners; ++fb) {
        int expect = map[0];
        for (int j = 0; j < faceDims; ++j)
            if ((fb >> j) & 1)
                expect ^= 1 << o.axisMap[j];
        if (expect != map[fb])
            throw TopologyError("ambiguous side matching between patch " +
                                std::to_string(a.patch) + " and patch " +
                                std::to_string(b.patch));
    }
    orientation = o;
    return true;
}

/// Positive-measure bounding-box overlap of two unmatched sides signals a
/// partial side contact (T-junction), which is unsupported.
inline bool overlapsPositively(const SideGeometry& a, const SideGeometry& b, int dim)
{
    double minExtent = std::numeric_limits<double>::infinity();
    int degenerate = 0;
    for (int c = 0; c < dim; ++c) {
        const double lo = std::max(a.lo[c], b.lo[c]);
        const double hi = std::min(a.hi[c], b.hi[c]);
        if (hi - lo < -kGeomTol)
            return false;
        const double extent = hi - lo;
        if (extent <= kGeomTol)
            ++degenerate;
        minExtent = std::min(minExtent, extent);
    }
    // Sides are (dim-1)-dimensional: exactly one degenerate overlap direction
    // is expected for coplanar contact with positive measure.
    return degenerate <= 1;
}

} // namespace detail

/// Boundary classification hook: returns true if an unmatched (boundary)
/// side is Neumann; sides default to Dirichlet.
using NeumannPredicate = std::function<bool(int patch, int side, const Eigen::VectorXd& center)>;

/// @brief Detects all geometrically matching patch sides (corner coordinates
/// within 1e-10), derives orientations, and labels unmatched sides.
/// Throws TopologyError on ambiguous matches or partial overlaps.
inline MultiPatchTopology buildTopology(const std::vector<GeometryMap>& patches,
                                        const NeumannPredicate& isNeumann = {})
{
    if (patches.empty())
        throw TopologyError("buildTopology: no patches");
    const int dim = patches[0].dim();
    for (const auto& p : patches)
        if (p.dim() != dim)
            throw TopologyError("buildTopology: mixed patch dimensions");

    MultiPatchTopology topo;
    topo.numPatches = static_cast<int>(patches.size());
    topo.dim = dim;
    topo.patchInterfaces.resize(patches.size());
    topo.neighbors.resize(patches.size());

    std::vector<detail::SideGeometry> sides;
    for (int p = 0; p < topo.numPatches; ++p)
        for (int s = 0; s < 2 * dim; ++s)
            sides.push_back(detail::makeSideGeometry(patches, p, s));

    std::vector<int> matchOf(sides.size(), -1);
    for (size_t i = 0; i < sides.size(); ++i)
        for (size_t j = i + 1; j < sides.size(); ++j) {
            if (sides[i].patch == sides[j].patch)
                continue;
            if ((sides[i].lo - sides[j].lo).lpNorm<Eigen::Infinity>() > kGeomTol ||
                (sides[i].hi - sides[j].hi).lpNorm<Eigen::Infinity>() > kGeomTol)
                continue;
            Orientation o;
            if (!detail::matchSides(sides[i], sides[j], dim, o))
                continue;
            if (matchOf[i] >= 0 || matchOf[j] >= 0)
                throw TopologyError("ambiguous side matching: a side of patch " +
                                    std::to_string(sides[i].patch) + " or " +
                                    std::to_string(sides[j].patch) +
                                    " matches more than one partner");
            matchOf[i] = static_cast<int>(j);
            matchOf[j] = static_cast<int>(i);

            Interface f;
            f.k = sides[i].patch;
            f.l = sides[j].patch;
            f.sideK = sides[i].side;
            f.sideL = sides[j].side;
            f.orientation = o;
            const int id = static_cast<int>(topo.interfaces.size());
            topo.interfaces.push_back(f);
            topo.patchInterfaces[f.k].push_back(id);
            topo.patchInterfaces[f.l].push_back(id);
            topo.neighbors[f.k].push_back(f.l);
            topo.neighbors[f.l].push_back(f.k);
        }

    // Partial overlaps between remaining unmatched sides are T-junctions.
    for (size_t i = 0; i < sides.size(); ++i)
        for (size_t j = i + 1; j < sides.size(); ++j) {
            if (matchOf[i] >= 0 || matchOf[j] >= 0 || sides[i].patch == sides[j].patch)
                continue;
            if (detail::overlapsPositively(sides[i], sides[j], dim))
                throw TopologyError("T-junction or partial side contact between patch " +
                                    std::to_string(sides[i].patch) + " and patch " +
                                    std::to_string(sides[j].patch) + " (unsupported)");
        }

    for (size_t i = 0; i < sides.size(); ++i) {
        if (matchOf[i] >= 0)
            continue;
        Eigen::VectorXd center = Eigen::VectorXd::Zero(dim);
        for (const auto& c : sides[i].corners)
            center += c;
        center /= static_cast<double>(sides[i].corners.size());
        if (isNeumann && isNeumann(sides[i].patch, sides[i].side, center))
            topo.neumannSides.emplace_back(sides[i].patch, sides[i].side);
        else
            topo.dirichletSides.emplace_back(sides[i].patch, sides[i].side);
    }
    return topo;
}

/// A geometric patch-corner equivalence class.
struct VertexEntity {
    Eigen::VectorXd position;
    std::vector<std::pair<int, int>> members;  ///< (patch, corner bits), patch ascending
    bool onDirichlet = false;
};

/// A geometric patch-edge equivalence class (3D).
struct EdgeEntity {
    Eigen::VectorXd endA, endB;
    /// (patch, edge direction, fixed-direction bits), patch ascending; the
    /// bits order the non-edge directions ascending.
    std::vector<std::tuple<int, int, int>> members;
    bool onDirichlet = false;
};

/// @brief Groups patch corners by coordinates; marks classes lying on
/// Dirichlet sides.
inline std::vector<VertexEntity> enumerateVertices(const std::vector<GeometryMap>& patches,
                                                   const MultiPatchTopology& topo)
{
    const int dim = topo.dim;
    std::vector<VertexEntity> out;
    for (int p = 0; p < topo.numPatches; ++p)
        for (int bits = 0; bits < (1 << dim); ++bits) {
            Eigen::VectorXd pos = patches[p].corner(bits);
            VertexEntity* home = nullptr;
            for (auto& v : out)
                if (detail::samePoint(v.position, pos)) {
                    home = &v;
                    break;
                }
            if (!home) {
                out.push_back({pos, {}, false});
                home = &out.back();
            }
            home->members.emplace_back(p, bits);
        }
    // A vertex lies on Gamma_D if it is a corner of any Dirichlet side.
    for (auto& v : out)
        for (const auto& [p, bits] : v.members)
            for (const auto& [dp, ds] : topo.dirichletSides) {
                if (dp != p)
                    continue;
                const int dir = sideDirection(ds);
                if (((bits >> dir) & 1) == sideEnd(ds))
                    v.onDirichlet = true;
            }
    return out;
}

/// @brief Groups 3D patch edges by their endpoint coordinates; marks classes
/// lying on Dirichlet sides.
inline std::vector<EdgeEntity> enumerateEdges(const std::vector<GeometryMap>& patches,
                                              const MultiPatchTopology& topo)
{
    if (topo.dim != 3)
        throw TopologyError("enumerateEdges: only defined for 3D topologies");
    std::vector<EdgeEntity> out;
    for (int p = 0; p < topo.numPatches; ++p)
        for (int dir = 0; dir < 3; ++dir)
            for (int bits = 0; bits < 4; ++bits) {
                // Edge along `dir`; bits fix the two other directions.
                int lowBits = 0;
                int j = 0;
                for (int a = 0; a < 3; ++a) {
                    if (a == dir)
                        continue;
                    if ((bits >> j) & 1)
                        lowBits |= 1 << a;
                    ++j;
                }
                Eigen::VectorXd ea = patches[p].corner(lowBits);
                Eigen::VectorXd eb = patches[p].corner(lowBits | (1 << dir));
                EdgeEntity* home = nullptr;
                for (auto& e : out) {
                    if ((detail::samePoint(e.endA, ea) && detail::samePoint(e.endB, eb)) ||
                        (detail::samePoint(e.endA, eb) && detail::samePoint(e.endB, ea))) {
                        home = &e;
                        break;
                    }
                }
                if (!home) {
                    out.push_back({ea, eb, {}, false});
                    home = &out.back();
                }
                home->members.emplace_back(p, dir, bits);
            }
    // An edge lies on Gamma_D if some Dirichlet side contains it.
    for (auto& e : out)
        for (const auto& [p, dir, bits] : e.members) {
            int j = 0;
            for (int a = 0; a < 3; ++a) {
                if (a == dir)
                    continue;
                const int end = (bits >> j) & 1;
                ++j;
                if (topo.isDirichletSide(p, 2 * a + end))
                    e.onDirichlet = true;
            }
        }
    return out;
}

/// @brief Uniform n1 x n2 (x n3) grid of axis-aligned box patches covering
/// the unit square/cube, as degree-1 geometry maps.
inline std::vector<GeometryMap> makePatchGrid(int dim, const std::array<int, 3>& counts)
{
    if (dim < 2 || dim > 3)
        throw std::invalid_argument("makePatchGrid: dim must be 2 or 3");
    for (int a = 0; a < dim; ++a)
        if (counts[a] < 1)
            throw std::invalid_argument("makePatchGrid: patch counts must be positive");
    std::vector<GeometryMap> patches;
    const int n3 = (dim == 3) ? counts[2] : 1;
    for (int k = 0; k < n3; ++k)
        for (int j = 0; j < counts[1]; ++j)
            for (int i = 0; i < counts[0]; ++i) {
                Eigen::VectorXd lo(dim), hi(dim);
                lo[0] = static_cast<double>(i) / counts[0];
                hi[0] = static_cast<double>(i + 1) / counts[0];
                lo[1] = static_cast<double>(j) / counts[1];
                hi[1] = static_cast<double>(j + 1) / counts[1];
                if (dim == 3) {
                    lo[2] = static_cast<double>(k) / counts[2];
                    hi[2] = static_cast<double>(k + 1) / counts[2];
                }
                patches.push_back(GeometryMap::box(lo, hi));
            }
    return patches;
}

/// @brief Reads a multipatch geometry description. Format (text, `#` starts
/// a comment): `dim D`, `patches N`, then per patch `patch`, `degrees` (D
/// ints), `elements` (D ints), `controls` followed by the control net rows
/// in lexicographic order (direction 0 fastest).
inline std::vector<GeometryMap> loadGeometry(std::istream& in)
{
    auto nextToken = [&in](std::string& tok) -> bool {
        while (in >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            return true;
        }
        return false;
    };
    auto expect = [&](const std::string& want) {
        std::string tok;
        if (!nextToken(tok) || tok != want)
            throw std::runtime_error("loadGeometry: expected '" + want + "', got '" + tok + "'");
    };

    expect("dim");
    int dim = 0;
    if (!(in >> dim) || dim < 1 || dim > 3)
        throw std::runtime_error("loadGeometry: bad dimension");
    expect("patches");
    int n = 0;
    if (!(in >> n) || n < 1)
        throw std::runtime_error("loadGeometry: bad patch count");

    std::vector<GeometryMap> out;
    for (int p = 0; p < n; ++p) {
        expect("patch");
        expect("degrees");
        std::vector<int> degrees(dim);
        for (int& d : degrees)
            if (!(in >> d))
                throw std::runtime_error("loadGeometry: bad degrees");
        expect("elements");
        std::vector<int> elements(dim);
        for (int& e : elements)
            if (!(in >> e))
                throw std::runtime_error("loadGeometry: bad element counts");
        std::vector<KnotVector> kvs;
        for (int a = 0; a < dim; ++a)
            kvs.emplace_back(KnotVector::openUniform(degrees[a], elements[a]));
        TensorBasis basis(std::move(kvs));
        expect("controls");
        Eigen::MatrixXd controls(basis.numBasis(), dim);
        for (int r = 0; r < controls.rows(); ++r)
            for (int c = 0; c < dim; ++c)
                if (!(in >> controls(r, c)))
                    throw std::runtime_error("loadGeometry: truncated control net in patch " +
                                             std::to_string(p));
        out.emplace_back(std::move(basis), std::move(controls));
    }
    return out;
}

inline void saveGeometry(std::ostream& os, const std::vector<GeometryMap>& patches)
{
    if (patches.empty())
        throw std::invalid_argument("saveGeometry: no patches");
    const int dim = patches[0].dim();
    os << "dim " << dim << "\npatches " << patches.size() << "\n";
    os.precision(17);
    for (const auto& p : patches) {
        os << "patch\ndegrees";
        for (int a = 0; a < dim; ++a)
            os << ' ' << p.basis().direction(a).degree();
        os << "\nelements";
        for (int a = 0; a < dim; ++a)
            os << ' ' << p.basis().direction(a).numElements();
        os << "\ncontrols\n";
        for (int r = 0; r < p.controls().rows(); ++r) {
            for (int c = 0; c < dim; ++c)
                os << (c ? " " : "") << p.controls()(r, c);
            os << '\n';
        }
    }
}

} // namespace ieti
