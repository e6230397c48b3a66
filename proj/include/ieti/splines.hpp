#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ieti {

/// Univariate B-spline basis on an open knot vector.
///
/// Convention: #knots = M + p + 1 with M basis functions of degree p; the
/// first and last knots carry multiplicity p+1. Spans are half-open with the
/// right endpoint closed (x = b belongs to the last span).
class KnotVector {
public:
    KnotVector(int degree, std::vector<double> knots)
        : m_degree(degree), m_knots(std::move(knots))
    {
        if (m_degree < 1)
            throw std::invalid_argument("KnotVector: degree must be >= 1");
        if (m_degree > 15)
            throw std::invalid_argument("KnotVector: degree above supported limit 15");
        if (static_cast<int>(m_knots.size()) < 2 * (m_degree + 1))
            throw std::invalid_argument("KnotVector: too few knots for degree");
        if (!std::is_sorted(m_knots.begin(), m_knots.end()))
            throw std::invalid_argument("KnotVector: knots must be nondecreasing");
        const int n = static_cast<int>(m_knots.size());
        for (int i = 0; i <= m_degree; ++i)
            if (m_knots[i] != m_knots.front() || m_knots[n - 1 - i] != m_knots.back())
                throw std::invalid_argument("KnotVector: knot vector must be open");
        if (m_knots.front() >= m_knots.back())
            throw std::invalid_argument("KnotVector: empty parameter domain");
    }

    /// @brief Uniform open knot vector on [0,1]: single interior knots at
    /// i/elements, boundary multiplicity p+1; M = elements + p.
    static KnotVector openUniform(int degree, int elements)
    {
        if (degree < 1)
            throw std::invalid_argument("openUniform: degree must be >= 1");
        if (elements < 1)
            throw std::invalid_argument("openUniform: need at least one element");
        std::vector<double> knots;
        knots.reserve(elements + 2 * degree + 1);
        for (int i = 0; i <= degree; ++i)
            knots.push_back(0.0);
        for (int i = 1; i < elements; ++i)
            knots.push_back(static_cast<double>(i) / elements);
        for (int i = 0; i <= degree; ++i)
            knots.push_back(1.0);
        return KnotVector(degree, std::move(knots));
    }

    int degree() const { return m_degree; }
    const std::vector<double>& knots() const { return m_knots; }

    /// Number of basis functions M = #knots - p - 1.
    int numBasis() const { return static_cast<int>(m_knots.size()) - m_degree - 1; }

    double domainBegin() const { return m_knots.front(); }
    double domainEnd() const { return m_knots.back(); }

    /// Unique knots (element boundaries).
    std::vector<double> breakpoints() const
    {
        std::vector<double> b;
        for (double t : m_knots)
            if (b.empty() || t > b.back())
                b.push_back(t);
        return b;
    }

    int numElements() const { return static_cast<int>(breakpoints().size()) - 1; }

    /// @brief Index s of the span [knots_s, knots_{s+1}) containing x; x at the
    /// right domain end is assigned to the last nonempty span.
    int findSpan(double x) const
    {
        checkDomain(x);
        const int n = numBasis() - 1;
        if (x >= m_knots[n + 1])
            return n;
        // Binary search over [degree, n].
        int lo = m_degree, hi = n + 1;
        int mid = (lo + hi) / 2;
        while (x < m_knots[mid] || x >= m_knots[mid + 1]) {
            if (x < m_knots[mid])
                hi = mid;
            else
                lo = mid;
            mid = (lo + hi) / 2;
        }
        return mid;
    }

    /// @brief Values of the p+1 basis functions nonzero at x.
    /// @return index of the first nonzero function; values[j] = N_{first+j}(x).
    int evalBasis(double x, double* values) const
    {
        const int span = findSpan(x);
        basisFuns(span, x, values);
        return span - m_degree;
    }

    /// @brief Values and derivatives up to order nders of the nonzero
    /// functions at x: ders(r, j) = d^r/dx^r N_{first+j}(x).
    int evalDerivs(double x, int nders, Eigen::MatrixXd& ders) const
    {
        const int span = findSpan(x);
        dersBasisFuns(span, x, nders, ders);
        return span - m_degree;
    }

    /// Greville abscissae g_i = (knots_{i+1} + ... + knots_{i+p}) / p.
    std::vector<double> greville() const
    {
        std::vector<double> g(numBasis());
        for (int i = 0; i < numBasis(); ++i) {
            double s = 0.0;
            for (int j = 1; j <= m_degree; ++j)
                s += m_knots[i + j];
            g[i] = s / m_degree;
        }
        return g;
    }

    bool operator==(const KnotVector& other) const
    {
        return m_degree == other.m_degree && m_knots == other.m_knots;
    }

private:
    void checkDomain(double x) const
    {
        if (x < domainBegin() || x > domainEnd())
            throw std::out_of_range("KnotVector: evaluation point outside [" +
                                    std::to_string(domainBegin()) + "," +
                                    std::to_string(domainEnd()) + "]");
    }

    // Cox-de Boor recursion in its triangular-table form.
    void basisFuns(int span, double x, double* N) const
    {
        const int p = m_degree;
        double left[16], right[16];
        N[0] = 1.0;
        for (int j = 1; j <= p; ++j) {
            left[j] = x - m_knots[span + 1 - j];
            right[j] = m_knots[span + j] - x;
            double saved = 0.0;
            for (int r = 0; r < j; ++r) {
                const double temp = N[r] / (right[r + 1] + left[j - r]);
                N[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            N[j] = saved;
        }
    }

    void dersBasisFuns(int span, double x, int nders, Eigen::MatrixXd& ders) const
    {
        const int p = m_degree;
        const int nd = std::min(nders, p);
        Eigen::MatrixXd ndu(p + 1, p + 1);
        double left[16], right[16];
        ndu(0, 0) = 1.0;
        for (int j = 1; j <= p; ++j) {
            left[j] = x - m_knots[span + 1 - j];
            right[j] = m_knots[span + j] - x;
            double saved = 0.0;
            for (int r = 0; r < j; ++r) {
                ndu(j, r) = right[r + 1] + left[j - r];
                const double temp = ndu(r, j - 1) / ndu(j, r);
                ndu(r, j) = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu(j, j) = saved;
        }
        ders.setZero(nders + 1, p + 1);
        for (int j = 0; j <= p; ++j)
            ders(0, j) = ndu(j, p);
        Eigen::MatrixXd a(2, p + 1);
        for (int r = 0; r <= p; ++r) {
            int s1 = 0, s2 = 1;
            a(0, 0) = 1.0;
            for (int k = 1; k <= nd; ++k) {
                double d = 0.0;
                const int rk = r - k, pk = p - k;
                if (r >= k) {
                    a(s2, 0) = a(s1, 0) / ndu(pk + 1, rk);
                    d = a(s2, 0) * ndu(rk, pk);
                }
                const int j1 = (rk >= -1) ? 1 : -rk;
                const int j2 = (r - 1 <= pk) ? k - 1 : p - r;
                for (int j = j1; j <= j2; ++j) {
                    a(s2, j) = (a(s1, j) - a(s1, j - 1)) / ndu(pk + 1, rk + j);
                    d += a(s2, j) * ndu(rk + j, pk);
                }
                if (r <= pk) {
                    a(s2, k) = -a(s1, k - 1) / ndu(pk + 1, r);
                    d += a(s2, k) * ndu(r, pk);
                }
                ders(k, r) = d;
                std::swap(s1, s2);
            }
        }
        double factor = p;
        for (int k = 1; k <= nd; ++k) {
            for (int j = 0; j <= p; ++j)
                ders(k, j) *= factor;
            factor *= (p - k);
        }
    }

    int m_degree;
    std::vector<double> m_knots;
};

/// Tensor-product basis; multi-indices flattened with direction 0 fastest.
class TensorBasis {
public:
    explicit TensorBasis(std::vector<KnotVector> directions)
        : m_directions(std::move(directions))
    {
        if (m_directions.size() < 1 || m_directions.size() > 3)
            throw std::invalid_argument("TensorBasis: dimension must be 1, 2 or 3");
    }

    int dim() const { return static_cast<int>(m_directions.size()); }
    const KnotVector& direction(int d) const { return m_directions.at(d); }

    /// Per-direction basis counts, padded with 1 beyond dim().
    std::array<int, 3> sizes() const
    {
        std::array<int, 3> s{1, 1, 1};
        for (int d = 0; d < dim(); ++d)
            s[d] = m_directions[d].numBasis();
        return s;
    }

    int numBasis() const
    {
        int n = 1;
        for (const auto& kv : m_directions)
            n *= kv.numBasis();
        return n;
    }

    int flatten(const std::array<int, 3>& idx) const
    {
        const auto s = sizes();
        return idx[0] + s[0] * (idx[1] + s[1] * idx[2]);
    }

    std::array<int, 3> unflatten(int flat) const
    {
        const auto s = sizes();
        std::array<int, 3> idx{0, 0, 0};
        idx[0] = flat % s[0];
        flat /= s[0];
        idx[1] = flat % s[1];
        idx[2] = flat / s[1];
        return idx;
    }

private:
    std::vector<KnotVector> m_directions;
};

/// Tensor-product B-spline parametrization of one patch.
class GeometryMap {
public:
    /// @param controls numBasis x dim control net, rows in lexicographic order.
    GeometryMap(TensorBasis basis, Eigen::MatrixXd controls)
        : m_basis(std::move(basis)), m_controls(std::move(controls))
    {
        if (m_controls.rows() != m_basis.numBasis() || m_controls.cols() != m_basis.dim())
            throw std::invalid_argument("GeometryMap: control net shape mismatch");
    }

    /// @brief Axis-aligned box [lo, hi] as a degree-1 single-element patch
    /// (controls at the Greville points, i.e. the corners).
    static GeometryMap box(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi)
    {
        const int d = static_cast<int>(lo.size());
        if (hi.size() != d || d < 1 || d > 3)
            throw std::invalid_argument("GeometryMap::box: bad corner dimensions");
        std::vector<KnotVector> kvs;
        for (int i = 0; i < d; ++i)
            kvs.emplace_back(KnotVector::openUniform(1, 1));
        TensorBasis basis(std::move(kvs));
        Eigen::MatrixXd controls(1 << d, d);
        for (int corner = 0; corner < (1 << d); ++corner)
            for (int a = 0; a < d; ++a)
                controls(corner, a) = ((corner >> a) & 1) ? hi[a] : lo[a];
        return GeometryMap(TensorBasis(basis), std::move(controls));
    }

    int dim() const { return m_basis.dim(); }
    const TensorBasis& basis() const { return m_basis; }
    const Eigen::MatrixXd& controls() const { return m_controls; }

    /// @brief Point and (optionally) Jacobian J_ab = dx_a/dxi_b at xi.
    void eval(const double* xi, Eigen::VectorXd& x, Eigen::MatrixXd* jac = nullptr) const
    {
        const int d = dim();
        std::array<Eigen::MatrixXd, 3> ders;
        std::array<int, 3> first{0, 0, 0};
        std::array<int, 3> counts{1, 1, 1};
        for (int a = 0; a < d; ++a) {
            first[a] = m_basis.direction(a).evalDerivs(xi[a], jac ? 1 : 0, ders[a]);
            counts[a] = m_basis.direction(a).degree() + 1;
        }
        x.setZero(d);
        if (jac)
            jac->setZero(d, d);
        std::array<int, 3> it{0, 0, 0};
        for (it[2] = 0; it[2] < counts[2]; ++it[2])
            for (it[1] = 0; it[1] < counts[1]; ++it[1])
                for (it[0] = 0; it[0] < counts[0]; ++it[0]) {
                    std::array<int, 3> gi{first[0] + it[0], first[1] + it[1],
                                          first[2] + it[2]};
                    const auto row = m_controls.row(m_basis.flatten(gi));
                    double val = 1.0;
                    for (int a = 0; a < d; ++a)
                        val *= ders[a](0, it[a]);
                    x += val * row.transpose();
                    if (jac) {
                        for (int b = 0; b < d; ++b) {
                            double dv = 1.0;
                            for (int a = 0; a < d; ++a)
                                dv *= (a == b) ? ders[a](1, it[a]) : ders[a](0, it[a]);
                            jac->col(b) += dv * row.transpose();
                        }
                    }
                }
    }

    /// Image of the patch corner selected by the bit pattern (bit a = 1 means
    /// xi_a = 1); exact corner-control lookup for open knot vectors.
    Eigen::VectorXd corner(int bits) const
    {
        std::array<int, 3> idx{0, 0, 0};
        const auto s = m_basis.sizes();
        for (int a = 0; a < dim(); ++a)
            idx[a] = ((bits >> a) & 1) ? s[a] - 1 : 0;
        return m_controls.row(m_basis.flatten(idx)).transpose();
    }

private:
    TensorBasis m_basis;
    Eigen::MatrixXd m_controls;
};

/// Mesh sizes of one patch under a given (solution) basis.
struct PatchMesh {
    std::vector<std::vector<double>> breakpoints;  ///< per direction
    double h = 0.0;  ///< max element diameter in physical space
    double H = 0.0;  ///< patch diameter

    int numElements() const
    {
        int n = 1;
        for (const auto& b : breakpoints)
            n *= static_cast<int>(b.size()) - 1;
        return n;
    }
};

/// @brief Mesh metadata for `solution` on the patch parametrized by G;
/// element diameters measured between mapped element corners (exact for
/// affine patches, a proxy otherwise).
inline PatchMesh makePatchMesh(const TensorBasis& solution, const GeometryMap& G)
{
    const int d = solution.dim();
    if (d != G.dim())
        throw std::invalid_argument("makePatchMesh: basis/geometry dimension mismatch");
    PatchMesh mesh;
    for (int a = 0; a < d; ++a)
        mesh.breakpoints.push_back(solution.direction(a).breakpoints());

    std::array<int, 3> counts{1, 1, 1};
    for (int a = 0; a < d; ++a)
        counts[a] = static_cast<int>(mesh.breakpoints[a].size()) - 1;
    std::array<int, 3> it{0, 0, 0};
    Eigen::VectorXd lo, hi;
    for (it[2] = 0; it[2] < counts[2]; ++it[2])
        for (it[1] = 0; it[1] < counts[1]; ++it[1])
            for (it[0] = 0; it[0] < counts[0]; ++it[0]) {
                double a[3] = {0, 0, 0}, b[3] = {0, 0, 0};
                for (int dir = 0; dir < d; ++dir) {
                    a[dir] = mesh.breakpoints[dir][it[dir]];
                    b[dir] = mesh.breakpoints[dir][it[dir] + 1];
                }
                G.eval(a, lo);
                G.eval(b, hi);
                mesh.h = std::max(mesh.h, (hi - lo).norm());
            }
    for (int c1 = 0; c1 < (1 << d); ++c1)
        for (int c2 = c1 + 1; c2 < (1 << d); ++c2)
            mesh.H = std::max(mesh.H, (G.corner(c1) - G.corner(c2)).norm());
    return mesh;
}

} // namespace ieti
