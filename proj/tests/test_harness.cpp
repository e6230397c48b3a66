#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include <ieti/harness.hpp>

using namespace ieti;

namespace {

bool bitwiseEqual(const Vector& a, const Vector& b)
{
    return a.size() == b.size() &&
           (a.size() == 0 ||
            std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

double relErr(const Vector& a, const Vector& b)
{
    return (a - b).norm() / std::max(1.0, b.norm());
}

CaseConfig baseConfig(int dim, std::array<int, 3> grid, int degree, int refine,
                      Formulation form)
{
    CaseConfig cfg;
    cfg.dim = dim;
    cfg.patchGrid = grid;
    cfg.degree = degree;
    cfg.refine = refine;
    cfg.form = form;
    cfg.exact = dim == 3 ? ExactKind::Sine3d : ExactKind::ShiftedSine2d;
    return cfg;
}

std::vector<DgNeighborData> localNeighborData(const detail::CaseSetup& s, int k)
{
    std::vector<DgNeighborData> data;
    for (int fi : s.topo.patchInterfaces[k]) {
        const auto& iface = s.topo.interfaces[fi];
        const int nbr = iface.k == k ? iface.l : iface.k;
        const int nbrSide = iface.k == k ? iface.sideL : iface.sideK;
        data.push_back(
            makeDgNeighborData(s.topo, nbr, nbrSide, s.patches[nbr], s.bases[nbr], s.gD));
    }
    return data;
}

Vector toFlat(const detail::CaseSetup& s, int k, const Vector& local)
{
    const PatchLayout& lay =
        s.cfg.form == Formulation::Cg ? s.cg->layout(k) : s.dg->layout(k);
    const std::vector<double> dir =
        dirichletValues(s.patches[k], s.bases[k], s.topo, k, s.gD);
    Vector flat(s.bases[k].numBasis());
    for (int fl = 0; fl < flat.size(); ++fl) {
        const int loc = lay.flatToLocal[fl];
        flat[fl] = loc >= 0 ? local[loc] : dir[fl];
    }
    return flat;
}

struct SerialRun {
    std::vector<Vector> coefficients;
    Vector multipliers;
    std::vector<double> residualHistory;
    int iterations = 0;
    double kappa = 1.0;
};

/// single-process dual-primal reference built from the same setup
SerialRun serialSolve(const CaseConfig& cfg)
{
    const detail::CaseSetup s = detail::makeSetup(cfg);
    std::vector<PatchIeti> pieces;
    for (int k = 0; k < s.topo.numPatches; ++k) {
        PatchSystem sys =
            cfg.form == Formulation::Cg
                ? assemblePatchCg(s.patches[k], s.bases[k], s.alphas[k], s.f, s.gN, s.gD,
                                  s.topo, k, s.cg->layout(k), cfg.quadOrder)
                : assemblePatchDg(s.topo, k, s.patches[k], s.bases[k], s.alphas[k], s.delta,
                                  s.f, s.gN, s.gD, s.dg->layout(k), localNeighborData(s, k),
                                  cfg.quadOrder);
        pieces.emplace_back(std::move(sys), s.ps.C[k], s.ps.globalIds[k]);
    }
    IetiOperator op(std::move(pieces), *s.jump, s.ps.numPrimal);
    const Vector d = op.dualRhs();
    const auto [lam, rep] = pcg<Vector>(
        [&](const Vector& v) { return op.applyF(v); },
        [&](const Vector& v) { return op.applyMsD(v); }, d, cfg.tol, cfg.maxIterations,
        [](const Vector& a, const Vector& b) { return a.dot(b); });
    const std::vector<Vector> locals = op.recover(lam);

    SerialRun out;
    for (int k = 0; k < s.topo.numPatches; ++k)
        out.coefficients.push_back(toFlat(s, k, locals[k]));
    out.multipliers = lam;
    out.residualHistory = rep.residualNorms;
    out.iterations = rep.iterations;
    out.kappa = rep.kappa;
    return out;
}

Vector interpolateAtGreville(const GeometryMap& G, const TensorBasis& basis,
                             const ScalarField& u)
{
    const int dim = basis.dim();
    std::array<std::vector<double>, 3> gr;
    std::array<int, 3> sizes{1, 1, 1};
    for (int a = 0; a < dim; ++a) {
        gr[a] = basis.direction(a).greville();
        sizes[a] = static_cast<int>(gr[a].size());
    }
    Vector c(basis.numBasis());
    Eigen::VectorXd x(dim);
    double xi[3] = {0, 0, 0};
    std::array<int, 3> idx{0, 0, 0};
    for (idx[2] = 0; idx[2] < sizes[2]; ++idx[2])
        for (idx[1] = 0; idx[1] < sizes[1]; ++idx[1])
            for (idx[0] = 0; idx[0] < sizes[0]; ++idx[0]) {
                for (int a = 0; a < dim; ++a)
                    xi[a] = gr[a][idx[a]];
                G.eval(xi, x);
                c[basis.flatten(idx)] = u(x);
            }
    return c;
}

void checkSameAsSerial(const CaseResult& par, const SerialRun& ser, double tolCoeff)
{
    // dot products fold in a different order, so the stopping test may move by one
    CHECK(std::abs(par.report.iterations - ser.iterations) <= 1);
    REQUIRE(par.residualHistory.size() ==
            static_cast<std::size_t>(par.report.iterations) + 1);
    REQUIRE(ser.residualHistory.size() == static_cast<std::size_t>(ser.iterations) + 1);
    CHECK(relErr(par.multipliers, ser.multipliers) < tolCoeff);
    REQUIRE(par.coefficients.size() == ser.coefficients.size());
    for (std::size_t k = 0; k < par.coefficients.size(); ++k)
        CHECK(relErr(par.coefficients[k], ser.coefficients[k]) < tolCoeff);
    const double kappaEps = par.report.iterations == ser.iterations ? 1e-6 : 5e-2;
    CHECK(par.report.kappa == Catch::Approx(ser.kappa).epsilon(kappaEps));
}

void checkBitwiseSame(const CaseResult& a, const CaseResult& b)
{
    REQUIRE(a.coefficients.size() == b.coefficients.size());
    for (std::size_t k = 0; k < a.coefficients.size(); ++k)
        CHECK(bitwiseEqual(a.coefficients[k], b.coefficients[k]));
    CHECK(bitwiseEqual(a.multipliers, b.multipliers));
    CHECK(a.residualHistory == b.residualHistory);
    CHECK(a.report.iterations == b.report.iterations);
    CHECK(a.report.kappa == b.report.kappa);
    CHECK(a.report.l2Error == b.report.l2Error);
    CHECK(a.report.dgError == b.report.dgError);
}

}  // namespace

TEST_CASE("config validation rejects inconsistent settings", "[harness]")
{
    CaseConfig ok = baseConfig(2, {2, 2, 1}, 2, 1, Formulation::Cg);
    CHECK_NOTHROW(ok.check());

    auto bad = ok;
    bad.dim = 4;
    CHECK_THROWS_AS(bad.check(), HarnessError);
    bad = ok;
    bad.patchGrid = {1, 1, 1};
    CHECK_THROWS_AS(bad.check(), HarnessError);
    bad = ok;
    bad.degree = 0;
    CHECK_THROWS_AS(bad.check(), HarnessError);
    bad = ok;
    bad.tol = 1.0;
    CHECK_THROWS_AS(bad.check(), HarnessError);
    bad = ok;
    bad.tol = 0.0;
    CHECK_THROWS_AS(bad.check(), HarnessError);
    bad = ok;
    bad.holders = 3;
    CHECK_THROWS_AS(bad.check(), HarnessError);
    bad = ok;
    bad.workers = 0;
    CHECK_THROWS_AS(bad.check(), HarnessError);
    bad = ok;
    bad.exact = ExactKind::Sine3d;
    CHECK_THROWS_AS(bad.check(), HarnessError);
    bad = baseConfig(3, {2, 2, 2}, 2, 1, Formulation::Cg);
    bad.exact = ExactKind::Sine2d;
    CHECK_THROWS_AS(bad.check(), HarnessError);
    bad = ok;
    bad.maxIterations = 0;
    CHECK_THROWS_AS(bad.check(), HarnessError);
}

TEST_CASE("manufactured solutions satisfy their loads", "[harness]")
{
    const double h = 1e-4;
    const auto fdCheck = [&](ExactKind kind, const Eigen::VectorXd& x) {
        const ExactSolution ex = makeExact(kind);
        const int dim = static_cast<int>(x.size());
        double lap = 0.0;
        for (int a = 0; a < dim; ++a) {
            Eigen::VectorXd xp = x, xm = x;
            xp[a] += h;
            xm[a] -= h;
            lap += (ex.value(xp) - 2.0 * ex.value(x) + ex.value(xm)) / (h * h);
        }
        CHECK(ex.load(x) == Catch::Approx(-lap).margin(1e-3));
        const Eigen::VectorXd g = ex.gradient(x);
        for (int a = 0; a < dim; ++a) {
            Eigen::VectorXd xp = x, xm = x;
            xp[a] += h;
            xm[a] -= h;
            CHECK(g[a] ==
                  Catch::Approx((ex.value(xp) - ex.value(xm)) / (2 * h)).margin(1e-4));
        }
    };

    Eigen::VectorXd p2(2);
    p2 << 0.3, 0.7;
    fdCheck(ExactKind::Sine2d, p2);
    fdCheck(ExactKind::ShiftedSine2d, p2);
    p2 << 0.55, 0.15;
    fdCheck(ExactKind::Sine2d, p2);
    fdCheck(ExactKind::ShiftedSine2d, p2);
    Eigen::VectorXd p3(3);
    p3 << 0.3, 0.6, 0.45;
    fdCheck(ExactKind::Sine3d, p3);
}

TEST_CASE("zero coefficients reproduce the exact L2 norm", "[harness]")
{
    // |sin(2 pi x) sin(2 pi y)|_L2([0,1]^2) = 1/2
    CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 2, Formulation::Cg);
    cfg.exact = ExactKind::Sine2d;
    const detail::CaseSetup s = detail::makeSetup(cfg);
    std::vector<Vector> zeros;
    for (int k = 0; k < s.topo.numPatches; ++k)
        zeros.push_back(Vector::Zero(s.bases[k].numBasis()));
    const ErrorNorms err = errorNorms(s.topo, s.patches, s.bases, zeros, s.exact);
    CHECK(err.l2 == Catch::Approx(0.5).margin(1e-10));
    CHECK(err.dg == 0.0);

    // |sin(2 pi x) sin(2 pi y) sin(pi z)|_L2([0,1]^3) = sqrt(1/8)
    CaseConfig c3 = baseConfig(3, {2, 2, 2}, 2, 1, Formulation::Cg);
    const detail::CaseSetup s3 = detail::makeSetup(c3);
    std::vector<Vector> zeros3;
    for (int k = 0; k < s3.topo.numPatches; ++k)
        zeros3.push_back(Vector::Zero(s3.bases[k].numBasis()));
    const ErrorNorms err3 = errorNorms(s3.topo, s3.patches, s3.bases, zeros3, s3.exact);
    CHECK(err3.l2 == Catch::Approx(std::sqrt(0.125)).margin(1e-9));
}

TEST_CASE("greville interpolation of a linear field is exact", "[harness]")
{
    const ScalarField lin = [](const Eigen::VectorXd& x) { return x[0] + x[1]; };
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)> grad =
        [](const Eigen::VectorXd& x) {
            Eigen::VectorXd g(x.size());
            g.setZero();
            g[0] = 1.0;
            g[1] = 1.0;
            return g;
        };
    const ExactSolution exact{lin, grad, {}};

    CaseConfig cfg = baseConfig(2, {2, 2, 1}, 3, 2, Formulation::Dg);
    const detail::CaseSetup s = detail::makeSetup(cfg);
    std::vector<Vector> coeffs;
    for (int k = 0; k < s.topo.numPatches; ++k)
        coeffs.push_back(interpolateAtGreville(s.patches[k], s.bases[k], lin));

    const ErrorNorms cgErr = errorNorms(s.topo, s.patches, s.bases, coeffs, exact);
    CHECK(cgErr.l2 < 1e-12);

    // the interpolant is globally continuous, so the jump penalty vanishes
    const ErrorNorms dgErr =
        errorNorms(s.topo, s.patches, s.bases, *s.dg, s.alphas, s.delta, coeffs, exact);
    CHECK(dgErr.l2 < 1e-12);
    CHECK(dgErr.dg < 1e-10);
}

TEST_CASE("runCase matches the serial operator", "[harness]")
{
    const CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 2, Formulation::Cg);
    const SerialRun ser = serialSolve(cfg);
    const CaseResult par = runCase(cfg);

    checkSameAsSerial(par, ser, 1e-8);
    CHECK(par.report.converged);
    CHECK(par.report.iterations >= 3);
    CHECK(par.report.iterations <= 30);
    CHECK(par.report.kappa >= 1.0);
    CHECK(par.report.dofs > 0);
    CHECK(par.report.numPrimal > 0);
    CHECK(par.report.formulation == "cg");
    CHECK(par.report.l2Error < 0.05);
    CHECK(par.report.dgError == 0.0);
    REQUIRE(par.residualHistory.size() ==
            static_cast<std::size_t>(par.report.iterations) + 1);
    CHECK(par.residualHistory.back() <= cfg.tol * par.residualHistory.front());

    // a single worker exchanges nothing
    CHECK(par.report.assemblingMessages == 0);
    CHECK(par.report.solvingMessages == 0);
}

TEST_CASE("runCase dg matches the serial operator", "[harness]")
{
    const CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 2, Formulation::Dg);
    const SerialRun ser = serialSolve(cfg);
    const CaseResult par = runCase(cfg);

    checkSameAsSerial(par, ser, 1e-8);
    CHECK(par.report.formulation == "dg");
    CHECK(par.report.dgError > 0.0);
    CHECK(par.report.l2Error < 0.05);
}

TEST_CASE("runCase matches the serial operator in 3d", "[harness]")
{
    // the 3d vertex-primal runs take ~50-70 iterations, so agreement between the
    // two routes is limited by the convergence tolerance, not roundoff
    const CaseConfig cg = baseConfig(3, {2, 2, 2}, 2, 1, Formulation::Cg);
    checkSameAsSerial(runCase(cg), serialSolve(cg), 2e-6);

    const CaseConfig dg = baseConfig(3, {2, 2, 2}, 2, 1, Formulation::Dg);
    checkSameAsSerial(runCase(dg), serialSolve(dg), 2e-6);
}

TEST_CASE("runCase matches the serial operator with neumann sides", "[harness]")
{
    CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 2, Formulation::Cg);
    cfg.boundary = BoundaryKind::MixedNeumann;
    const SerialRun ser = serialSolve(cfg);
    const CaseResult par = runCase(cfg);
    checkSameAsSerial(par, ser, 1e-8);
    CHECK(par.report.l2Error < 0.05);
}

TEST_CASE("solves are bitwise invariant across workers and holders", "[harness]")
{
    CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 2, Formulation::Cg);
    const CaseResult ref = runCase(cfg);
    REQUIRE(ref.report.iterations > 0);

    for (const auto& [q, h] : std::vector<std::pair<int, int>>{
             {2, 1}, {2, 2}, {4, 1}, {4, 2}, {4, 4}, {8, 1}, {8, 8}}) {
        INFO("workers " << q << " holders " << h);
        cfg.workers = q;
        cfg.holders = h;
        checkBitwiseSame(runCase(cfg), ref);
    }

    CaseConfig dgc = baseConfig(2, {2, 2, 1}, 2, 1, Formulation::Dg);
    const CaseResult dgRef = runCase(dgc);
    for (const auto& [q, h] :
         std::vector<std::pair<int, int>>{{2, 1}, {4, 2}, {4, 4}, {8, 1}}) {
        INFO("workers " << q << " holders " << h);
        dgc.workers = q;
        dgc.holders = h;
        checkBitwiseSame(runCase(dgc), dgRef);
    }
}

TEST_CASE("l2 convergence order matches degree plus one", "[harness]")
{
    CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 2, Formulation::Cg);
    cfg.exact = ExactKind::Sine2d;

    std::vector<double> errs;
    for (int r = 2; r <= 4; ++r) {
        cfg.refine = r;
        errs.push_back(runCase(cfg).report.l2Error);
    }
    for (std::size_t i = 0; i + 1 < errs.size(); ++i) {
        const double order = std::log2(errs[i] / errs[i + 1]);
        CHECK(order > 2.6);
        CHECK(order < 3.4);
    }

    cfg.form = Formulation::Dg;
    errs.clear();
    for (int r = 2; r <= 4; ++r) {
        cfg.refine = r;
        errs.push_back(runCase(cfg).report.l2Error);
    }
    for (std::size_t i = 0; i + 1 < errs.size(); ++i) {
        const double order = std::log2(errs[i] / errs[i + 1]);
        CHECK(order > 2.6);
        CHECK(order < 3.4);
    }
}

TEST_CASE("dg error norm decreases at the gradient order", "[harness]")
{
    CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 2, Formulation::Dg);
    cfg.exact = ExactKind::Sine2d;
    cfg.refine = 2;
    const double e2 = runCase(cfg).report.dgError;
    cfg.refine = 3;
    const double e3 = runCase(cfg).report.dgError;
    const double order = std::log2(e2 / e3);
    CHECK(order > 1.6);
    CHECK(order < 2.4);
}

TEST_CASE("knot exchange sends one message per remote interface direction", "[harness]")
{
    CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 1, Formulation::Dg);
    cfg.workers = 4;

    std::ostringstream log;
    const CaseResult par = runCase(cfg, &log);
    const std::string text = log.str();
    std::size_t count = 0;
    for (std::size_t at = text.find("\"tag\":1,"); at != std::string::npos;
         at = text.find("\"tag\":1,", at + 1))
        ++count;
    // 4 interfaces, both endpoints remote from each other
    CHECK(count == 8);
    CHECK(par.report.assemblingMessages >= 8);

    cfg.workers = 1;
    std::ostringstream quiet;
    const CaseResult one = runCase(cfg, &quiet);
    CHECK(quiet.str().find("\"tag\":1,") == std::string::npos);
    checkBitwiseSame(one, par);
}

TEST_CASE("worker counts beyond the patch count stay consistent", "[harness]")
{
    CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 1, Formulation::Cg);
    const CaseResult ref = runCase(cfg);
    cfg.workers = 7;
    cfg.holders = 3;
    checkBitwiseSame(runCase(cfg), ref);
}

TEST_CASE("message stats split by phase", "[harness]")
{
    CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 1, Formulation::Cg);
    cfg.workers = 2;
    const SolveReport r = runCase(cfg).report;
    CHECK(r.assemblingMessages > 0);
    CHECK(r.assemblingBytes > 0);
    CHECK(r.solvingMessages > 0);
    CHECK(r.solvingBytes > 0);
    CHECK(r.assemblingSeconds >= 0.0);
    CHECK(r.solvingSeconds > 0.0);
    CHECK(r.totalSeconds >= r.solvingSeconds);
}

TEST_CASE("report roundtrips through json and csv", "[harness]")
{
    CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 1, Formulation::Cg);
    cfg.workers = 2;
    SolveReport a = runCase(cfg).report;
    SolveReport b = a;
    b.formulation = "dg";
    b.kappa = 3141.5926535897932;
    b.l2Error = 1e-8;
    b.solvingBytes = 123456789012ull;

    for (const ReportFormat fmt : {ReportFormat::Json, ReportFormat::Csv}) {
        std::ostringstream os;
        writeReports(os, {a, b}, fmt);
        std::istringstream in(os.str());
        const std::vector<SolveReport> back = readReports(in, fmt);
        REQUIRE(back.size() == 2);
        std::ostringstream os2;
        writeReports(os2, back, fmt);
        CHECK(os.str() == os2.str());
        CHECK(back[1].kappa == b.kappa);
        CHECK(back[1].l2Error == b.l2Error);
        CHECK(back[1].solvingBytes == b.solvingBytes);
        CHECK(back[0].formulation == "cg");
        CHECK(back[0].converged == a.converged);
        CHECK(back[0].iterations == a.iterations);
    }

    std::ostringstream empty;
    writeReports(empty, {}, ReportFormat::Json);
    std::istringstream emptyIn(empty.str());
    CHECK(readReports(emptyIn, ReportFormat::Json).empty());
}

TEST_CASE("report reader rejects malformed input", "[harness]")
{
    std::istringstream missing("[{\"dim\": 2}]");
    CHECK_THROWS_AS(readReports(missing, ReportFormat::Json), HarnessError);

    std::istringstream badHeader("dim,degree\n2\n");
    CHECK_THROWS_AS(readReports(badHeader, ReportFormat::Csv), HarnessError);

    SolveReport r;
    std::ostringstream os;
    writeReport(os, r, ReportFormat::Csv);
    std::string text = os.str();
    const auto at = text.find("true");
    if (at != std::string::npos)
        text.replace(at, 4, "tres");
    const auto atFalse = text.find("false");
    if (atFalse != std::string::npos)
        text.replace(atFalse, 5, "falsy");
    std::istringstream badBool(text);
    CHECK_THROWS_AS(readReports(badBool, ReportFormat::Csv), HarnessError);
}

TEST_CASE("scaling studies vary the intended dimension", "[harness]")
{
    CaseConfig base = baseConfig(2, {2, 2, 1}, 2, 1, Formulation::Cg);
    base.workers = 2;
    base.holders = 2;

    const StudyResult holders = scalingStudy(StudyKind::Holders, base, {1, 2});
    REQUIRE(holders.rows.size() == 2);
    CHECK(holders.rows[0].report.holders == 1);
    CHECK(holders.rows[1].report.holders == 2);
    CHECK(holders.rows[0].report.workers == 2);
    CHECK(holders.rows[0].report.l2Error == holders.rows[1].report.l2Error);

    const StudyResult strong = scalingStudy(StudyKind::Strong, base, {1, 2, 4});
    REQUIRE(strong.rows.size() == 3);
    CHECK(strong.rows[0].report.workers == 1);
    CHECK(strong.rows[2].report.workers == 4);
    CHECK(strong.rows[0].report.l2Error == strong.rows[2].report.l2Error);
    CHECK(strong.rows[0].speedup == 1.0);
    for (const StudyRow& row : strong.rows) {
        CHECK(row.speedup > 0.0);
        CHECK(row.efficiency > 0.0);
    }

    const StudyResult weak = scalingStudy(StudyKind::Weak, base, {1, 2});
    REQUIRE(weak.rows.size() == 2);
    CHECK(weak.rows[1].report.numPatches == 2 * weak.rows[0].report.numPatches);
    CHECK(weak.rows[1].report.dofs > weak.rows[0].report.dofs);

    CHECK_THROWS_AS(scalingStudy(StudyKind::Strong, base, {}), HarnessError);
    CHECK_THROWS_AS(scalingStudy(StudyKind::Holders, base, {4}), HarnessError);
}

TEST_CASE("non convergence propagates out of the worker group", "[harness]")
{
    CaseConfig cfg = baseConfig(2, {2, 2, 1}, 2, 1, Formulation::Cg);
    cfg.maxIterations = 1;
    cfg.tol = 1e-14;
    CHECK_THROWS_AS(runCase(cfg), NonConvergenceError);
    cfg.workers = 2;
    CHECK_THROWS_AS(runCase(cfg), NonConvergenceError);
}
