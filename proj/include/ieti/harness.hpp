#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <istream>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include <ieti/assembly.hpp>
#include <ieti/dofmap.hpp>
#include <ieti/ieti.hpp>
#include <ieti/jump.hpp>
#include <ieti/primal.hpp>
#include <ieti/runtime.hpp>
#include <ieti/splines.hpp>
#include <ieti/topology.hpp>

namespace ieti {

struct HarnessError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Formulation { Cg, Dg };

/// Manufactured solutions on the unit square/cube, alpha = 1.
enum class ExactKind { Sine2d, ShiftedSine2d, Sine3d };

/// Outer boundary handling: full Dirichlet, or Neumann on the x = 1 face.
enum class BoundaryKind { Dirichlet, MixedNeumann };

/// @brief One benchmark case: geometry, discretization, solver and runtime
/// settings. Patch grids tile the unit square/cube; every patch carries
/// 2^refine elements per direction.
struct CaseConfig {
    int dim = 2;
    std::array<int, 3> patchGrid{2, 2, 1};
    int degree = 2;
    int refine = 1;
    Formulation form = Formulation::Cg;
    double delta = 0.0;  ///< <= 0 selects 4 (p+1)^2
    PrimalStrategy primal = PrimalStrategy::Default;
    ExactKind exact = ExactKind::ShiftedSine2d;
    BoundaryKind boundary = BoundaryKind::Dirichlet;
    int workers = 1;
    int holders = 1;
    double tol = 1e-8;
    int maxIterations = 400;
    int quadOrder = 0;
    bool deterministic = true;
    bool validate = false;

    int elementsPerSide() const { return 1 << refine; }
    double deltaValue() const { return delta > 0 ? delta : 4.0 * (degree + 1) * (degree + 1); }

    int numPatches() const
    {
        int n = 1;
        for (int a = 0; a < dim; ++a)
            n *= patchGrid[a];
        return n;
    }

    void check() const
    {
        if (dim != 2 && dim != 3)
            throw HarnessError("CaseConfig: dim must be 2 or 3");
        for (int a = 0; a < dim; ++a)
            if (patchGrid[a] < 1)
                throw HarnessError("CaseConfig: patch counts must be positive");
        if (numPatches() < 2)
            throw HarnessError("CaseConfig: at least two patches required");
        if (degree < 1 || degree > 15)
            throw HarnessError("CaseConfig: degree must be in [1, 15]");
        if (refine < 0 || refine > 12)
            throw HarnessError("CaseConfig: refine must be in [0, 12]");
        if (workers < 1)
            throw HarnessError("CaseConfig: workers must be positive");
        if (holders < 1 || holders > workers)
            throw HarnessError("CaseConfig: holders must be in [1, workers]");
        if (!(tol > 0.0) || !(tol < 1.0))
            throw HarnessError("CaseConfig: tol must be in (0, 1)");
        if (maxIterations < 1)
            throw HarnessError("CaseConfig: maxIterations must be positive");
        if (quadOrder < 0)
            throw HarnessError("CaseConfig: quadOrder must be non-negative");
        if ((exact == ExactKind::Sine3d) != (dim == 3))
            throw HarnessError("CaseConfig: exact solution dimension mismatch");
    }
};

/// Analytic solution, its gradient, and the matching load f = -div(grad u).
struct ExactSolution {
    ScalarField value;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
    ScalarField load;
};

inline ExactSolution makeExact(ExactKind kind)
{
    const double pi = std::numbers::pi;
    switch (kind) {
    case ExactKind::Sine2d:
        return {[pi](const Eigen::VectorXd& x) {
                    return std::sin(2 * pi * x[0]) * std::sin(2 * pi * x[1]);
                },
                [pi](const Eigen::VectorXd& x) {
                    Eigen::VectorXd g(2);
                    g[0] = 2 * pi * std::cos(2 * pi * x[0]) * std::sin(2 * pi * x[1]);
                    g[1] = 2 * pi * std::sin(2 * pi * x[0]) * std::cos(2 * pi * x[1]);
                    return g;
                },
                [pi](const Eigen::VectorXd& x) {
                    return 8 * pi * pi * std::sin(2 * pi * x[0]) * std::sin(2 * pi * x[1]);
                }};
    case ExactKind::ShiftedSine2d:
        return {[pi](const Eigen::VectorXd& x) {
                    return std::sin(4 * pi * (x[0] + 0.4)) * std::sin(2 * pi * (x[1] + 0.3)) +
                           x[0] + x[1];
                },
                [pi](const Eigen::VectorXd& x) {
                    Eigen::VectorXd g(2);
                    g[0] = 4 * pi * std::cos(4 * pi * (x[0] + 0.4)) *
                               std::sin(2 * pi * (x[1] + 0.3)) +
                           1.0;
                    g[1] = 2 * pi * std::sin(4 * pi * (x[0] + 0.4)) *
                               std::cos(2 * pi * (x[1] + 0.3)) +
                           1.0;
                    return g;
                },
                [pi](const Eigen::VectorXd& x) {
                    return 20 * pi * pi * std::sin(4 * pi * (x[0] + 0.4)) *
                           std::sin(2 * pi * (x[1] + 0.3));
                }};
    case ExactKind::Sine3d:
        return {[pi](const Eigen::VectorXd& x) {
                    return std::sin(2 * pi * x[0]) * std::sin(2 * pi * x[1]) *
                           std::sin(pi * x[2]);
                },
                [pi](const Eigen::VectorXd& x) {
                    Eigen::VectorXd g(3);
                    const double s0 = std::sin(2 * pi * x[0]), c0 = std::cos(2 * pi * x[0]);
                    const double s1 = std::sin(2 * pi * x[1]), c1 = std::cos(2 * pi * x[1]);
                    const double s2 = std::sin(pi * x[2]), c2 = std::cos(pi * x[2]);
                    g[0] = 2 * pi * c0 * s1 * s2;
                    g[1] = 2 * pi * s0 * c1 * s2;
                    g[2] = pi * s0 * s1 * c2;
                    return g;
                },
                [pi](const Eigen::VectorXd& x) {
                    return 9 * pi * pi * std::sin(2 * pi * x[0]) * std::sin(2 * pi * x[1]) *
                           std::sin(pi * x[2]);
                }};
    }
    throw HarnessError("makeExact: unknown kind");
}

/// @brief Flat result record of one case. The emitted schema is exactly the
/// field order below and is stable.
struct SolveReport {
    int dim = 0;
    int degree = 0;
    int refine = 0;
    std::string formulation;  ///< "cg" | "dg"
    int numPatches = 0;
    int workers = 0;
    int holders = 0;
    int dofs = 0;  ///< coupled global space dimension
    int numPrimal = 0;
    int numMultipliers = 0;
    int iterations = 0;
    bool converged = false;
    double kappa = 1.0;
    double tol = 0.0;
    double l2Error = 0.0;
    double dgError = 0.0;  ///< dG-norm error; 0 for continuous runs
    double assemblingSeconds = 0.0;
    double solvingSeconds = 0.0;
    double totalSeconds = 0.0;
    std::size_t assemblingMessages = 0;
    std::size_t assemblingBytes = 0;
    std::size_t solvingMessages = 0;
    std::size_t solvingBytes = 0;
};

/// Full solve output: the report plus per-patch coefficients in flat tensor
/// order (Dirichlet values included), the converged multipliers, and the
/// residual history, for exact cross-run comparisons.
struct CaseResult {
    SolveReport report;
    std::vector<Vector> coefficients;
    Vector multipliers;
    std::vector<double> residualHistory;
};

namespace detail {

/// Immutable problem metadata every worker shares read-only; mirrors the
/// replicated setup each process performs identically.
struct CaseSetup {
    CaseConfig cfg;
    ExactSolution exact;
    ScalarField f, gD, gN;  ///< gN empty when all sides are Dirichlet
    std::vector<GeometryMap> patches;
    std::vector<TensorBasis> bases;
    MultiPatchTopology topo;
    std::optional<CgDofmap> cg;
    std::optional<DgDofmap> dg;
    PrimalSpace ps;
    std::optional<JumpOperators> jump;
    std::optional<MultiplierLayout> layout;
    std::vector<double> alphas;
    double delta = 0.0;
    int coupledDofs = 0;
};

inline CaseSetup makeSetup(const CaseConfig& cfg)
{
    cfg.check();
    CaseSetup s;
    s.cfg = cfg;
    s.exact = makeExact(cfg.exact);
    s.f = s.exact.load;
    s.gD = s.exact.value;
    NeumannPredicate isNeumann;
    if (cfg.boundary == BoundaryKind::MixedNeumann) {
        const auto grad = s.exact.gradient;
        s.gN = [grad](const Eigen::VectorXd& x) { return grad(x)[0]; };
        isNeumann = [](int, int side, const Eigen::VectorXd& c) {
            return sideDirection(side) == 0 && sideEnd(side) == 1 &&
                   std::abs(c[0] - 1.0) < 1e-9;
        };
    }
    s.patches = makePatchGrid(cfg.dim, cfg.patchGrid);
    s.topo = buildTopology(s.patches, isNeumann);
    for (int k = 0; k < s.topo.numPatches; ++k) {
        std::vector<KnotVector> kvs;
        for (int a = 0; a < cfg.dim; ++a)
            kvs.push_back(KnotVector::openUniform(cfg.degree, cfg.elementsPerSide()));
        s.bases.emplace_back(std::move(kvs));
    }
    s.alphas.assign(s.topo.numPatches, 1.0);
    s.delta = cfg.deltaValue();
    if (cfg.form == Formulation::Cg) {
        s.cg.emplace(s.topo, s.bases);
        s.ps = selectPrimalsCg(s.topo, s.patches, s.bases, *s.cg, cfg.primal, cfg.quadOrder);
        s.jump.emplace(buildJumpOperatorsCg(*s.cg, s.alphas, s.ps.vertexClasses));
        s.coupledDofs = s.cg->numFree();
    } else {
        s.dg.emplace(s.topo, s.bases);
        s.ps = selectPrimalsDg(s.topo, s.patches, s.bases, *s.dg, cfg.primal, cfg.quadOrder);
        s.jump.emplace(buildJumpOperatorsDg(*s.dg, s.alphas, s.ps.excludedExtraLocals));
        s.coupledDofs = s.dg->numGlobal();
    }
    s.layout.emplace(*s.jump, s.topo.numPatches);
    return s;
}

inline std::vector<double> packNeighborData(const DgNeighborData& d)
{
    std::vector<double> buf;
    buf.push_back(d.h);
    buf.push_back(static_cast<double>(d.faceKnots.size()));
    for (const KnotVector& kv : d.faceKnots) {
        buf.push_back(static_cast<double>(kv.degree()));
        buf.push_back(static_cast<double>(kv.knots().size()));
        buf.insert(buf.end(), kv.knots().begin(), kv.knots().end());
    }
    buf.push_back(static_cast<double>(d.traceDirichlet.size()));
    buf.insert(buf.end(), d.traceDirichlet.begin(), d.traceDirichlet.end());
    return buf;
}

inline DgNeighborData unpackNeighborData(const std::vector<double>& buf)
{
    std::size_t at = 0;
    const auto next = [&]() {
        if (at >= buf.size())
            throw HarnessError("unpackNeighborData: truncated message");
        return buf[at++];
    };
    DgNeighborData d;
    d.h = next();
    const int nkv = static_cast<int>(next());
    for (int i = 0; i < nkv; ++i) {
        const int degree = static_cast<int>(next());
        const int nk = static_cast<int>(next());
        std::vector<double> knots(nk);
        for (int j = 0; j < nk; ++j)
            knots[j] = next();
        d.faceKnots.emplace_back(degree, std::move(knots));
    }
    const int nt = static_cast<int>(next());
    d.traceDirichlet.resize(nt);
    for (int i = 0; i < nt; ++i)
        d.traceDirichlet[i] = next();
    if (at != buf.size())
        throw HarnessError("unpackNeighborData: trailing data");
    return d;
}

/// dG pre-assembly exchange: each interface endpoint needs the neighbor
/// side's knots, mesh size and Dirichlet trace. Local endpoints are filled
/// directly; remote ones send one message per direction, ordered by global
/// interface id so the per-pair streams match. Collective.
inline std::vector<std::vector<DgNeighborData>> exchangeNeighborData(WorkerContext& ctx,
                                                                     const CaseSetup& s)
{
    WorkerGroup& g = ctx.group();
    const int me = ctx.rank();
    const auto& owned = ctx.ownedPatches();

    const auto forEachDirection = [&](auto&& fn) {
        for (std::size_t fid = 0; fid < s.topo.interfaces.size(); ++fid) {
            const auto& iface = s.topo.interfaces[fid];
            fn(static_cast<int>(fid), iface.k, iface.l, iface.sideL);
            fn(static_cast<int>(fid), iface.l, iface.k, iface.sideK);
        }
    };

    // send pass: my endpoint's data serves the other endpoint's owner
    forEachDirection([&](int, int dst, int src, int srcSide) {
        if (g.ownerOf(src) == me && g.ownerOf(dst) != me)
            ctx.send(g.ownerOf(dst), msg::knotData,
                     packNeighborData(makeDgNeighborData(s.topo, src, srcSide, s.patches[src],
                                                         s.bases[src], s.gD)));
    });

    std::map<std::pair<int, int>, DgNeighborData> got;  // (fid, receiving patch)
    forEachDirection([&](int fid, int dst, int src, int srcSide) {
        if (g.ownerOf(dst) != me)
            return;
        if (g.ownerOf(src) == me)
            got[{fid, dst}] = makeDgNeighborData(s.topo, src, srcSide, s.patches[src],
                                                 s.bases[src], s.gD);
        else
            got[{fid, dst}] = unpackNeighborData(ctx.recv(g.ownerOf(src), msg::knotData));
    });

    std::vector<std::vector<DgNeighborData>> out(owned.size());
    for (std::size_t i = 0; i < owned.size(); ++i)
        for (int fid : s.topo.patchInterfaces[owned[i]])
            out[i].push_back(std::move(got.at({fid, owned[i]})));
    return out;
}

/// Slots rank 0 fills during the reporting phase.
struct GatherOut {
    std::vector<Vector> coefficients;  ///< per patch, flat tensor order
    std::vector<Vector> lambdaSegs;    ///< per patch multiplier segments
    std::vector<double> residualHistory;
    int iterations = 0;
    double kappa = 1.0;
    double assemblingSeconds = 0.0;
    double solvingSeconds = 0.0;
};

/// The per-worker solve: assemble own patches, build the coarse problem,
/// run PCG on the dual system, recover coefficients, gather at rank 0.
inline void caseWorker(WorkerContext& ctx, const CaseSetup& s, const HaloPlan& plan,
                       GatherOut& out)
{
    using Clock = std::chrono::steady_clock;
    const auto seconds = [](Clock::duration d) {
        return std::chrono::duration<double>(d).count();
    };
    const auto& owned = ctx.ownedPatches();
    const MultiplierLayout& layout = *s.layout;
    const bool isCg = s.cfg.form == Formulation::Cg;

    ctx.setPhase("assembling");
    ctx.barrier();
    const auto t0 = Clock::now();

    std::vector<std::vector<DgNeighborData>> nbr(owned.size());
    if (!isCg)
        nbr = exchangeNeighborData(ctx, s);

    std::vector<PatchIeti> pieces;
    std::vector<Vector> g;  // interface loads
    pieces.reserve(owned.size());
    for (std::size_t i = 0; i < owned.size(); ++i) {
        const int k = owned[i];
        PatchSystem sys =
            isCg ? assemblePatchCg(s.patches[k], s.bases[k], s.alphas[k], s.f, s.gN, s.gD,
                                   s.topo, k, s.cg->layout(k), s.cfg.quadOrder)
                 : assemblePatchDg(s.topo, k, s.patches[k], s.bases[k], s.alphas[k], s.delta,
                                   s.f, s.gN, s.gD, s.dg->layout(k), nbr[i], s.cfg.quadOrder);
        pieces.emplace_back(std::move(sys), s.ps.C[k], s.ps.globalIds[k]);
        g.push_back(pieces.back().schurLoad());
    }

    std::vector<Matrix> blocks;
    blocks.reserve(pieces.size());
    for (const PatchIeti& p : pieces)
        blocks.push_back(p.coarseBlock());
    const Matrix S = reduceCoarseMatrix(ctx, s.ps.globalIds, blocks, s.ps.numPrimal);
    std::optional<CoarseProblem> coarse;
    if (S.rows() > 0)
        coarse.emplace(S);

    // w = Stilde^{-1} f: primal reduce + coarse solve on holders, scatter,
    // per-patch dual solves. Collective.
    const auto tildeSolve = [&](const std::vector<Vector>& fB) {
        std::vector<Vector> fulls;
        fulls.reserve(owned.size());
        for (std::size_t i = 0; i < owned.size(); ++i) {
            const Vector comp = pieces[i].primalComponents(fB[i]);
            Vector full = Vector::Zero(s.ps.numPrimal);
            const auto& ids = s.ps.globalIds[owned[i]];
            for (int j = 0; j < comp.size(); ++j)
                full[ids[j]] += comp[j];
            fulls.push_back(std::move(full));
        }
        const Vector fPi = reducePrimal(ctx, fulls, s.ps.numPrimal);
        Vector wPi;
        if (coarse)
            wPi = coarse->solve(fPi);
        const std::vector<Vector> sub = scatterPrimal(ctx, s.ps.globalIds, wPi);
        std::vector<Vector> w;
        w.reserve(owned.size());
        for (std::size_t i = 0; i < owned.size(); ++i) {
            Vector wk = pieces[i].solveDelta(fB[i]);
            wk += pieces[i].basis() * sub[i];
            w.push_back(std::move(wk));
        }
        return w;
    };

    const auto jumpOf = [&](const std::vector<Vector>& w) {
        DVector d = DVector::zeros(Rep::Distributed, layout, owned);
        for (std::size_t i = 0; i < owned.size(); ++i)
            layout.addB(owned[i], w[i], d.seg(static_cast<int>(i)));
        return d;
    };

    ctx.barrier();
    const auto t1 = Clock::now();
    const double myAssembling = seconds(t1 - t0);
    ctx.setPhase("solving");

    const DVector d = jumpOf(tildeSolve(g));

    const auto applyF = [&](const DVector& lambda) {
        std::vector<Vector> fB;
        fB.reserve(owned.size());
        for (std::size_t i = 0; i < owned.size(); ++i) {
            Vector f = Vector::Zero(pieces[i].numBoundary());
            layout.addBT(owned[i], lambda.seg(static_cast<int>(i)), f);
            fB.push_back(std::move(f));
        }
        return jumpOf(tildeSolve(fB));
    };

    const auto applyM = [&](const DVector& r) {
        const DVector rAcc = accumulate(ctx, plan, r);
        DVector v = DVector::zeros(Rep::Distributed, layout, owned);
        for (std::size_t i = 0; i < owned.size(); ++i) {
            Vector w = Vector::Zero(pieces[i].numBoundary());
            layout.addBT(owned[i], rAcc.seg(static_cast<int>(i)), w, true);
            w = pieces[i].applySchurOp(w);
            layout.addB(owned[i], w, v.seg(static_cast<int>(i)), true);
        }
        return accumulate(ctx, plan, v);
    };

    const auto [lambda, pcgRep] =
        parallelPcg(ctx, applyF, applyM, d, s.cfg.tol, s.cfg.maxIterations);

    // recovery: w = Stilde^{-1}(g - B^T lambda), interior by back-substitution
    std::vector<Vector> fB;
    fB.reserve(owned.size());
    for (std::size_t i = 0; i < owned.size(); ++i) {
        Vector f = Vector::Zero(pieces[i].numBoundary());
        layout.addBT(owned[i], lambda.seg(static_cast<int>(i)), f);
        fB.push_back(g[i] - f);
    }
    const std::vector<Vector> wB = tildeSolve(fB);
    std::vector<Vector> flats;
    flats.reserve(owned.size());
    for (std::size_t i = 0; i < owned.size(); ++i) {
        const int k = owned[i];
        const PatchIeti& p = pieces[i];
        Vector local(p.numBoundary() + p.numInterior());
        local.head(p.numBoundary()) = wB[i];
        if (p.numInterior() > 0)
            local.tail(p.numInterior()) = p.interiorSolve(wB[i]);
        const PatchLayout& lay = isCg ? s.cg->layout(k) : s.dg->layout(k);
        const std::vector<double> dir =
            dirichletValues(s.patches[k], s.bases[k], s.topo, k, s.gD);
        Vector flat(s.bases[k].numBasis());
        for (int fl = 0; fl < flat.size(); ++fl) {
            const int loc = lay.flatToLocal[fl];
            flat[fl] = loc >= 0 ? local[loc] : dir[fl];
        }
        flats.push_back(std::move(flat));
    }

    ctx.barrier();
    const auto t2 = Clock::now();
    const double mySolving = seconds(t2 - t1);
    ctx.setPhase("reporting");

    if (ctx.rank() == 0) {
        WorkerGroup& grp = ctx.group();
        out.coefficients.assign(s.topo.numPatches, Vector());
        out.lambdaSegs.assign(s.topo.numPatches, Vector());
        for (int k = 0; k < s.topo.numPatches; ++k) {
            const int owner = grp.ownerOf(k);
            if (owner == 0) {
                const auto it = std::find(owned.begin(), owned.end(), k);
                const std::size_t i = static_cast<std::size_t>(it - owned.begin());
                out.coefficients[k] = flats[i];
                out.lambdaSegs[k] = lambda.seg(static_cast<int>(i));
            } else {
                const std::vector<double> buf = ctx.recv(owner, msg::general);
                const std::size_t nf = static_cast<std::size_t>(buf.at(0));
                if (buf.size() < 1 + nf)
                    throw HarnessError("caseWorker: malformed patch message");
                out.coefficients[k] =
                    Eigen::Map<const Vector>(buf.data() + 1, static_cast<int>(nf));
                out.lambdaSegs[k] = Eigen::Map<const Vector>(
                    buf.data() + 1 + nf, static_cast<int>(buf.size() - 1 - nf));
            }
        }
        out.assemblingSeconds = myAssembling;
        out.solvingSeconds = mySolving;
        for (int q = 1; q < ctx.workerCount(); ++q) {
            const std::vector<double> t = ctx.recv(q, msg::general);
            out.assemblingSeconds = std::max(out.assemblingSeconds, t.at(0));
            out.solvingSeconds = std::max(out.solvingSeconds, t.at(1));
        }
        out.iterations = pcgRep.iterations;
        out.kappa = pcgRep.kappa;
        out.residualHistory = pcgRep.residualNorms;
    } else {
        for (std::size_t i = 0; i < owned.size(); ++i) {
            const Vector& seg = lambda.seg(static_cast<int>(i));
            std::vector<double> buf;
            buf.reserve(1 + flats[i].size() + seg.size());
            buf.push_back(static_cast<double>(flats[i].size()));
            buf.insert(buf.end(), flats[i].data(), flats[i].data() + flats[i].size());
            buf.insert(buf.end(), seg.data(), seg.data() + seg.size());
            ctx.send(0, msg::general, std::move(buf));
        }
        ctx.send(0, msg::general, {myAssembling, mySolving});
    }
}

/// Per-patch ∫ (u_h - u)² and ∫ |grad u_h - grad u|² by element-wise Gauss
/// quadrature over the flat coefficient vector.
inline std::pair<double, double> patchErrorSquared(const GeometryMap& G,
                                                   const TensorBasis& basis,
                                                   const Vector& coeffs,
                                                   const ExactSolution& exact, int nq)
{
    const int dim = basis.dim();
    std::vector<DirectionTable> tables;
    for (int a = 0; a < dim; ++a)
        tables.push_back(tabulate(basis.direction(a), nq));

    std::array<int, 3> numElems{1, 1, 1};
    std::array<int, 3> counts{1, 1, 1};
    for (int a = 0; a < dim; ++a) {
        numElems[a] = static_cast<int>(tables[a].elements.size());
        counts[a] = tables[a].degree + 1;
    }
    int nqTotal = 1;
    for (int a = 0; a < dim; ++a)
        nqTotal *= nq;

    double l2 = 0.0, h1 = 0.0;
    double xi[3] = {0, 0, 0};
    Eigen::VectorXd x(dim);
    Eigen::MatrixXd J(dim, dim);
    std::array<int, 3> e{0, 0, 0};
    for (e[2] = 0; e[2] < numElems[2]; ++e[2])
        for (e[1] = 0; e[1] < numElems[1]; ++e[1])
            for (e[0] = 0; e[0] < numElems[0]; ++e[0]) {
                std::array<const DirectionTable::Element*, 3> el{nullptr, nullptr, nullptr};
                for (int a = 0; a < dim; ++a)
                    el[a] = &tables[a].elements[e[a]];
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
                        throw HarnessError("patchErrorSquared: non-positive jacobian");
                    const Eigen::MatrixXd JinvT = J.inverse().transpose();

                    double uh = 0.0;
                    Eigen::Vector3d gp = Eigen::Vector3d::Zero();
                    std::array<int, 3> li{0, 0, 0};
                    for (li[2] = 0; li[2] < counts[2]; ++li[2])
                        for (li[1] = 0; li[1] < counts[1]; ++li[1])
                            for (li[0] = 0; li[0] < counts[0]; ++li[0]) {
                                double v = 1.0;
                                Eigen::Vector3d gr = Eigen::Vector3d::Zero();
                                for (int a = 0; a < dim; ++a) {
                                    double part = 1.0;
                                    for (int b = 0; b < dim; ++b)
                                        if (b != a)
                                            part *= el[b]->values(qi[b], li[b]);
                                    gr[a] = part * el[a]->derivs(qi[a], li[a]);
                                    v *= el[a]->values(qi[a], li[a]);
                                }
                                std::array<int, 3> idx{0, 0, 0};
                                for (int a = 0; a < dim; ++a)
                                    idx[a] = el[a]->first + li[a];
                                const double c = coeffs[basis.flatten(idx)];
                                uh += c * v;
                                gp += c * gr;
                            }
                    const Eigen::VectorXd gh = JinvT * gp.head(dim);
                    const double du = uh - exact.value(x);
                    const Eigen::VectorXd dg = gh - exact.gradient(x);
                    l2 += w * detJ * du * du;
                    h1 += w * detJ * dg.squaredNorm();
                }
            }
    return {l2, h1};
}

/// Extended per-patch vectors (own coefficients then mirrored neighbor
/// values per interface) for jump evaluation.
inline std::vector<Vector> extendCoefficients(const MultiPatchTopology& topo,
                                              const DgDofmap& dm,
                                              const std::vector<Vector>& coeffs)
{
    std::vector<Vector> ext;
    ext.reserve(topo.numPatches);
    for (int k = 0; k < topo.numPatches; ++k) {
        std::vector<double> vals(coeffs[k].data(), coeffs[k].data() + coeffs[k].size());
        for (int fid : topo.patchInterfaces[k]) {
            const auto& iface = topo.interfaces[fid];
            const int nbrPatch = iface.k == k ? iface.l : iface.k;
            for (const auto& [ownFlat, nbrFlat] : dm.mirrorPairs(fid, k, topo))
                vals.push_back(coeffs[nbrPatch][nbrFlat]);
        }
        ext.push_back(Eigen::Map<const Vector>(vals.data(), static_cast<int>(vals.size())));
    }
    return ext;
}

}  // namespace detail

/// Discretization errors against the exact solution.
struct ErrorNorms {
    double l2 = 0.0;
    double dg = 0.0;  ///< broken-H1 + jump-penalty norm; 0 for continuous runs
};

/// @brief L2 error of per-patch solutions in flat coefficient order.
inline ErrorNorms errorNorms(const MultiPatchTopology& topo,
                             const std::vector<GeometryMap>& patches,
                             const std::vector<TensorBasis>& bases,
                             const std::vector<Vector>& coeffs, const ExactSolution& exact,
                             int quadOrder = 0)
{
    double l2 = 0.0;
    for (int k = 0; k < topo.numPatches; ++k) {
        const int nq = quadOrder > 0 ? quadOrder : bases[k].direction(0).degree() + 3;
        l2 += detail::patchErrorSquared(patches[k], bases[k], coeffs[k], exact, nq).first;
    }
    return {std::sqrt(l2), 0.0};
}

/// @brief L2 and dG-norm errors for discontinuous runs. The exact solution
/// is continuous, so the u_h jumps carry the whole jump error.
inline ErrorNorms errorNorms(const MultiPatchTopology& topo,
                             const std::vector<GeometryMap>& patches,
                             const std::vector<TensorBasis>& bases, const DgDofmap& dm,
                             const std::vector<double>& alphas, double delta,
                             const std::vector<Vector>& coeffs, const ExactSolution& exact,
                             int quadOrder = 0)
{
    const std::vector<Vector> ext = detail::extendCoefficients(topo, dm, coeffs);
    double l2 = 0.0, dg = 0.0;
    for (int k = 0; k < topo.numPatches; ++k) {
        const int nq = quadOrder > 0 ? quadOrder : bases[k].direction(0).degree() + 3;
        const auto [l2k, h1k] =
            detail::patchErrorSquared(patches[k], bases[k], coeffs[k], exact, nq);
        l2 += l2k;
        dg += alphas[k] * h1k +
              detail::patchPenaltySquared(topo, k, patches, bases, alphas, delta, ext[k], nq);
    }
    return {std::sqrt(l2), std::sqrt(dg)};
}

/// @brief Runs one case on the simulated distributed runtime and returns the
/// report plus the exact solution data. `msgLog` receives the line-delimited
/// message records when given.
inline CaseResult runCase(const CaseConfig& cfg, std::ostream* msgLog = nullptr)
{
    using Clock = std::chrono::steady_clock;
    const auto tStart = Clock::now();
    const detail::CaseSetup s = detail::makeSetup(cfg);

    WorkerGroup group(RuntimeConfig{cfg.workers, cfg.holders, cfg.deterministic, cfg.validate},
                      s.topo.numPatches);
    const HaloPlan plan(*s.layout, group);

    detail::GatherOut out;
    group.run([&](WorkerContext ctx) { detail::caseWorker(ctx, s, plan, out); });

    CaseResult res;
    res.coefficients = std::move(out.coefficients);
    res.residualHistory = std::move(out.residualHistory);
    const int nLam = s.jump->numMultipliers();
    res.multipliers.resize(nLam);
    for (int m = 0; m < nLam; ++m) {
        const auto& touch = s.layout->touches(m)[0];
        res.multipliers[m] = out.lambdaSegs[touch.patch][touch.pos];
    }

    SolveReport& r = res.report;
    r.dim = cfg.dim;
    r.degree = cfg.degree;
    r.refine = cfg.refine;
    r.formulation = cfg.form == Formulation::Cg ? "cg" : "dg";
    r.numPatches = s.topo.numPatches;
    r.workers = cfg.workers;
    r.holders = cfg.holders;
    r.dofs = s.coupledDofs;
    r.numPrimal = s.ps.numPrimal;
    r.numMultipliers = nLam;
    r.iterations = out.iterations;
    r.converged = true;
    r.kappa = out.kappa;
    r.tol = cfg.tol;

    const ErrorNorms err =
        cfg.form == Formulation::Cg
            ? errorNorms(s.topo, s.patches, s.bases, res.coefficients, s.exact, cfg.quadOrder)
            : errorNorms(s.topo, s.patches, s.bases, *s.dg, s.alphas, s.delta,
                         res.coefficients, s.exact, cfg.quadOrder);
    r.l2Error = err.l2;
    r.dgError = err.dg;

    const auto stats = group.board().phaseStats();
    const auto of = [&stats](const char* phase) {
        const auto it = stats.find(phase);
        return it == stats.end() ? MessageBoard::PhaseStats{} : it->second;
    };
    r.assemblingMessages = of("assembling").count;
    r.assemblingBytes = of("assembling").bytes;
    r.solvingMessages = of("solving").count;
    r.solvingBytes = of("solving").bytes;
    r.assemblingSeconds = out.assemblingSeconds;
    r.solvingSeconds = out.solvingSeconds;

    if (msgLog)
        group.board().dump(*msgLog);

    r.totalSeconds = std::chrono::duration<double>(Clock::now() - tStart).count();
    return res;
}

enum class StudyKind { Strong, Weak, Holders };

struct StudyRow {
    SolveReport report;
    double speedup = 1.0;
    double efficiency = 1.0;
};

struct StudyResult {
    StudyKind kind = StudyKind::Strong;
    std::vector<StudyRow> rows;
};

/// @brief Runs a case family over worker or holder counts. Strong: fixed
/// problem, workers from `counts`. Weak: the direction-0 patch count scales
/// with the workers, fixing the per-worker problem size. Holders: fixed
/// problem and workers, holder counts from `counts`. Speedup and efficiency
/// columns compare solving times against the first row.
inline StudyResult scalingStudy(StudyKind kind, const CaseConfig& base,
                                const std::vector<int>& counts)
{
    if (counts.empty())
        throw HarnessError("scalingStudy: counts must not be empty");
    StudyResult out;
    out.kind = kind;
    for (const int c : counts) {
        if (c < 1)
            throw HarnessError("scalingStudy: counts must be positive");
        CaseConfig cfg = base;
        switch (kind) {
        case StudyKind::Strong:
            cfg.workers = c;
            cfg.holders = std::min(base.holders, c);
            break;
        case StudyKind::Weak:
            cfg.workers = c;
            cfg.patchGrid[0] = base.patchGrid[0] * c;
            cfg.holders = std::min(base.holders, c);
            break;
        case StudyKind::Holders:
            cfg.holders = c;
            break;
        }
        StudyRow row;
        row.report = runCase(cfg).report;
        out.rows.push_back(std::move(row));
    }
    const double t0 = out.rows.front().report.solvingSeconds;
    const double c0 = counts.front();
    for (std::size_t i = 0; i < out.rows.size(); ++i) {
        const double ti = out.rows[i].report.solvingSeconds;
        const double ratio = ti > 0.0 ? t0 / ti : 1.0;
        switch (kind) {
        case StudyKind::Strong:
            out.rows[i].speedup = ratio;
            out.rows[i].efficiency = ratio * c0 / counts[i];
            break;
        case StudyKind::Weak:
            out.rows[i].speedup = ratio * counts[i] / c0;
            out.rows[i].efficiency = ratio;
            break;
        case StudyKind::Holders:
            out.rows[i].speedup = ratio;
            out.rows[i].efficiency = ratio;
            break;
        }
    }
    return out;
}

enum class ReportFormat { Json, Csv };

namespace detail {

/// Single stable schema walk shared by all writers and readers.
template <class Report, class Visitor>
void visitReport(Report& r, Visitor&& v)
{
    v("dim", r.dim);
    v("degree", r.degree);
    v("refine", r.refine);
    v("formulation", r.formulation);
    v("numPatches", r.numPatches);
    v("workers", r.workers);
    v("holders", r.holders);
    v("dofs", r.dofs);
    v("numPrimal", r.numPrimal);
    v("numMultipliers", r.numMultipliers);
    v("iterations", r.iterations);
    v("converged", r.converged);
    v("kappa", r.kappa);
    v("tol", r.tol);
    v("l2Error", r.l2Error);
    v("dgError", r.dgError);
    v("assemblingSeconds", r.assemblingSeconds);
    v("solvingSeconds", r.solvingSeconds);
    v("totalSeconds", r.totalSeconds);
    v("assemblingMessages", r.assemblingMessages);
    v("assemblingBytes", r.assemblingBytes);
    v("solvingMessages", r.solvingMessages);
    v("solvingBytes", r.solvingBytes);
}

template <class T>
std::string fieldToString(const T& v)
{
    if constexpr (std::is_same_v<T, std::string>)
        return v;
    else if constexpr (std::is_same_v<T, bool>)
        return v ? "true" : "false";
    else if constexpr (std::is_same_v<T, double>) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    } else {
        return std::to_string(v);
    }
}

template <class T>
void fieldFromString(const std::string& s, T& v)
{
    try {
        if constexpr (std::is_same_v<T, std::string>)
            v = s;
        else if constexpr (std::is_same_v<T, bool>) {
            if (s != "true" && s != "false")
                throw HarnessError("readReports: bad boolean '" + s + "'");
            v = s == "true";
        } else if constexpr (std::is_same_v<T, double>) {
            std::size_t used = 0;
            v = std::stod(s, &used);
            if (used != s.size())
                throw HarnessError("readReports: bad number '" + s + "'");
        } else if constexpr (std::is_same_v<T, std::size_t>) {
            v = static_cast<std::size_t>(std::stoull(s));
        } else {
            v = static_cast<T>(std::stoll(s));
        }
    } catch (const std::invalid_argument&) {
        throw HarnessError("readReports: bad value '" + s + "'");
    } catch (const std::out_of_range&) {
        throw HarnessError("readReports: value out of range '" + s + "'");
    }
}

inline SolveReport reportFromFields(const std::map<std::string, std::string>& fields)
{
    SolveReport r;
    visitReport(r, [&fields](const char* name, auto& field) {
        const auto it = fields.find(name);
        if (it == fields.end())
            throw HarnessError(std::string("readReports: missing field '") + name + "'");
        fieldFromString(it->second, field);
    });
    return r;
}

/// Minimal scanner for the flat report arrays this module emits.
struct JsonScanner {
    std::istream& in;

    char peek()
    {
        int ch = in.peek();
        while (ch != EOF && std::isspace(static_cast<unsigned char>(ch))) {
            in.get();
            ch = in.peek();
        }
        if (ch == EOF)
            throw HarnessError("readReports: unexpected end of input");
        return static_cast<char>(ch);
    }

    void expect(char c)
    {
        if (peek() != c)
            throw HarnessError(std::string("readReports: expected '") + c + "'");
        in.get();
    }

    std::string quoted()
    {
        expect('"');
        std::string s;
        int ch = 0;
        while ((ch = in.get()) != '"') {
            if (ch == EOF || ch == '\\')
                throw HarnessError("readReports: unterminated string");
            s.push_back(static_cast<char>(ch));
        }
        return s;
    }

    std::string scalar()
    {
        if (peek() == '"')
            return quoted();
        std::string s;
        while (true) {
            const int ch = in.peek();
            if (ch == EOF || ch == ',' || ch == '}' || ch == ']' ||
                std::isspace(static_cast<unsigned char>(ch)))
                break;
            s.push_back(static_cast<char>(in.get()));
        }
        if (s.empty())
            throw HarnessError("readReports: empty value");
        return s;
    }
};

}  // namespace detail

/// @brief Writes reports in the stable schema, as a JSON array of flat
/// objects or as CSV with a header row. Doubles round-trip exactly.
inline void writeReports(std::ostream& os, const std::vector<SolveReport>& reports,
                         ReportFormat format)
{
    if (format == ReportFormat::Json) {
        os << "[\n";
        for (std::size_t i = 0; i < reports.size(); ++i) {
            os << "  {";
            bool first = true;
            SolveReport r = reports[i];
            detail::visitReport(r, [&](const char* name, auto& field) {
                os << (first ? "" : ",") << "\n    \"" << name << "\": ";
                if constexpr (std::is_same_v<std::decay_t<decltype(field)>, std::string>)
                    os << '"' << field << '"';
                else
                    os << detail::fieldToString(field);
                first = false;
            });
            os << "\n  }" << (i + 1 < reports.size() ? "," : "") << "\n";
        }
        os << "]\n";
        return;
    }
    bool first = true;
    SolveReport header;
    detail::visitReport(header, [&](const char* name, auto&) {
        os << (first ? "" : ",") << name;
        first = false;
    });
    os << "\n";
    for (const SolveReport& report : reports) {
        first = true;
        SolveReport r = report;
        detail::visitReport(r, [&](const char*, auto& field) {
            os << (first ? "" : ",") << detail::fieldToString(field);
            first = false;
        });
        os << "\n";
    }
}

inline void writeReport(std::ostream& os, const SolveReport& report, ReportFormat format)
{
    writeReports(os, {report}, format);
}

/// @brief Reads reports previously written by writeReports.
inline std::vector<SolveReport> readReports(std::istream& in, ReportFormat format)
{
    std::vector<SolveReport> out;
    if (format == ReportFormat::Json) {
        detail::JsonScanner sc{in};
        sc.expect('[');
        if (sc.peek() == ']') {
            sc.expect(']');
            return out;
        }
        while (true) {
            sc.expect('{');
            std::map<std::string, std::string> fields;
            if (sc.peek() != '}')
                while (true) {
                    const std::string name = sc.quoted();
                    sc.expect(':');
                    fields[name] = sc.scalar();
                    if (sc.peek() != ',')
                        break;
                    sc.expect(',');
                }
            sc.expect('}');
            out.push_back(detail::reportFromFields(fields));
            if (sc.peek() != ',')
                break;
            sc.expect(',');
        }
        sc.expect(']');
        return out;
    }

    std::string line;
    if (!std::getline(in, line))
        throw HarnessError("readReports: missing csv header");
    const auto split = [](const std::string& text) {
        std::vector<std::string> parts;
        std::string cur;
        for (const char c : text) {
            if (c == ',') {
                parts.push_back(cur);
                cur.clear();
            } else if (c != '\r') {
                cur.push_back(c);
            }
        }
        parts.push_back(cur);
        return parts;
    };
    const std::vector<std::string> names = split(line);
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r")
            continue;
        const std::vector<std::string> values = split(line);
        if (values.size() != names.size())
            throw HarnessError("readReports: csv row width mismatch");
        std::map<std::string, std::string> fields;
        for (std::size_t i = 0; i < names.size(); ++i)
            fields[names[i]] = values[i];
        out.push_back(detail::reportFromFields(fields));
    }
    return out;
}

}  // namespace ieti
