#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "support/ipm_oracle.hpp"
#include "vessmpc/qp_solver.hpp"

using namespace vessmpc;

namespace {

Eigen::SparseMatrix<double> sparse(const Eigen::MatrixXd& d) {
    return d.sparseView(1.0, 0.0);
}

QuadraticProgram make_qp(const Eigen::MatrixXd& P, const Eigen::VectorXd& q,
                         const Eigen::MatrixXd& A, const Eigen::VectorXd& l,
                         const Eigen::VectorXd& u) {
    QuadraticProgram qp;
    qp.P = sparse(P);
    qp.P.makeCompressed();
    if (A.rows() > 0) {
        qp.A = sparse(A);
    } else {
        qp.A.resize(0, P.rows());
    }
    qp.A.makeCompressed();
    qp.q = q;
    qp.l = l;
    qp.u = u;
    return qp;
}

// deterministic random dense matrix via our own generator, not Eigen's
Eigen::MatrixXd rand_mat(std::mt19937_64& g, Eigen::Index r, Eigen::Index c) {
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = U(g);
    return m;
}

}  // namespace

TEST_CASE("active bound: minimize x^2 subject to x >= 1") {
    Eigen::MatrixXd P(1, 1), A(1, 1);
    P << 2.0;
    A << 1.0;
    Eigen::VectorXd q(1), l(1), u(1);
    q << 0.0;
    l << 1.0;
    u << kQpInfinity;
    auto sol = solve_qp(make_qp(P, q, A, l, u));
    REQUIRE(sol.status == QpStatus::Solved);
    CHECK(sol.x[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(sol.obj == doctest::Approx(1.0).epsilon(1e-6));
    // stationarity 2x + y = 0 at the lower bound
    CHECK(sol.y[0] == doctest::Approx(-2.0).epsilon(1e-5));
}

TEST_CASE("hand-solved KKT: equality-coupled pair") {
    Eigen::MatrixXd P = Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd A(1, 2);
    A << 1.0, 1.0;
    Eigen::VectorXd q(2), l(1), u(1);
    q << -1.0, 0.0;
    l << 1.0;
    u << 1.0;
    auto sol = solve_qp(make_qp(P, q, A, l, u));
    REQUIRE(sol.status == QpStatus::Solved);
    CHECK(sol.x[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(sol.x[1] == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
    CHECK(sol.y[0] == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
    CHECK(sol.obj == doctest::Approx(-0.5).epsilon(1e-8));
}

TEST_CASE("a row with l > u is reported infeasible with its indicator") {
    Eigen::MatrixXd P = Eigen::MatrixXd::Identity(2, 2);
    Eigen::MatrixXd A(2, 2);
    A << 1.0, 0.0, 0.0, 1.0;
    Eigen::VectorXd q = Eigen::VectorXd::Zero(2), l(2), u(2);
    l << 0.0, 1.0;
    u << 5.0, 0.0;
    auto sol = solve_qp(make_qp(P, q, A, l, u));
    REQUIRE(sol.status == QpStatus::PrimalInfeasible);
    REQUIRE(sol.certificate.size() == 2);
    CHECK(sol.certificate[0] == 0.0);
    CHECK(sol.certificate[1] == 1.0);
}

TEST_CASE("KKT factorization handle") {
    SUBCASE("unconstrained 1x1 exposes P + sigma on the diagonal") {
        Eigen::SparseMatrix<double> P(1, 1), A(0, 1);
        P.insert(0, 0) = 2.0;
        KktSolver kkt(P, A, 1e-6, Eigen::VectorXd());
        REQUIRE(kkt.diagonal().size() == 1);
        CHECK(kkt.diagonal()[0] == doctest::Approx(2.0 + 1e-6).epsilon(1e-12));
    }
    SUBCASE("one equality row matches a dense factorization oracle") {
        Eigen::SparseMatrix<double> P(1, 1), A(1, 1);
        P.insert(0, 0) = 1.0;
        A.insert(0, 0) = 1.0;
        Eigen::VectorXd rho(1);
        rho << 0.1;
        KktSolver kkt(P, A, 1e-6, rho);
        auto [pos, neg] = kkt.inertia();
        CHECK(pos == 1);
        CHECK(neg == 1);
        Eigen::MatrixXd Kd(2, 2);
        Kd << 1.0 + 1e-6, 1.0, 1.0, -10.0;
        // determinant is permutation-invariant; so is the solve
        CHECK(kkt.diagonal().prod() == doctest::Approx(Kd.determinant()).epsilon(1e-12));
        Eigen::VectorXd rhs(2);
        rhs << 0.3, -1.7;
        Eigen::VectorXd wd = Kd.fullPivLu().solve(rhs);
        Eigen::VectorXd ws = kkt.solve(rhs);
        CHECK((wd - ws).lpNorm<Eigen::Infinity>() < 1e-12);
    }
    SUBCASE("zero constraint row factorizes; infeasibility surfaces at solve") {
        Eigen::MatrixXd P = Eigen::MatrixXd::Identity(2, 2);
        Eigen::MatrixXd A(1, 2);
        A << 0.0, 0.0;
        Eigen::VectorXd q = Eigen::VectorXd::Zero(2), l(1), u(1);
        l << 1.0;
        u << 1.0;
        auto qp = make_qp(P, q, A, l, u);
        QpSolver solver(qp);  // factorization succeeds
        auto sol = solver.solve();
        REQUIRE(sol.status == QpStatus::PrimalInfeasible);
        // certificate t: A't = 0 and u'(t)+ + l'(t)- < 0, here t ~ -e0
        REQUIRE(sol.certificate.size() == 1);
        CHECK(sol.certificate[0] < -0.9);
    }
}

TEST_CASE("random feasible programs match the interior-point oracle") {
    std::mt19937_64 g(7151);
    std::uniform_int_distribution<int> Nn(2, 20), Nm(1, 40);
    std::uniform_real_distribution<double> W(0.1, 2.0);
    int solved = 0;
    for (int trial = 0; trial < 200; ++trial) {
        Eigen::Index n = Nn(g), m = Nm(g);
        Eigen::MatrixXd M = rand_mat(g, n, n);
        Eigen::MatrixXd P = M.transpose() * M + 1e-3 * Eigen::MatrixXd::Identity(n, n);
        Eigen::VectorXd q = rand_mat(g, n, 1);
        Eigen::MatrixXd A = rand_mat(g, m, n);
        Eigen::VectorXd x0 = rand_mat(g, n, 1);
        Eigen::VectorXd l = A * x0, u = A * x0;
        for (Eigen::Index i = 0; i < m; ++i) {
            l[i] -= W(g);
            u[i] += W(g);
        }
        auto sol = solve_qp(make_qp(P, q, A, l, u));
        auto ref = oracle::ipm_solve(P, q, A, l, u);
        REQUIRE(ref.converged);
        REQUIRE(sol.status == QpStatus::Solved);
        CHECK(std::abs(sol.obj - ref.obj) <= 1e-4 * std::max(1.0, std::abs(ref.obj)));
        ++solved;
    }
    CHECK(solved == 200);
}

TEST_CASE("equality-constrained programs match a dense KKT oracle") {
    std::mt19937_64 g(40923);
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::Index n = 6, m = 3;
        Eigen::MatrixXd M = rand_mat(g, n, n);
        Eigen::MatrixXd P = M.transpose() * M + 0.1 * Eigen::MatrixXd::Identity(n, n);
        Eigen::VectorXd q = rand_mat(g, n, 1);
        Eigen::MatrixXd A = rand_mat(g, m, n);
        Eigen::VectorXd b = rand_mat(g, m, 1);

        Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + m, n + m);
        K.topLeftCorner(n, n) = P;
        K.topRightCorner(n, m) = A.transpose();
        K.bottomLeftCorner(m, n) = A;
        Eigen::VectorXd rhs(n + m);
        rhs.head(n) = -q;
        rhs.tail(m) = b;
        Eigen::VectorXd w = K.fullPivLu().solve(rhs);

        auto sol = solve_qp(make_qp(P, q, A, b, b));
        REQUIRE(sol.status == QpStatus::Solved);
        CHECK((sol.x - w.head(n)).lpNorm<Eigen::Infinity>() < 1e-5);
    }
}

TEST_CASE("scaling the cost does not move the minimizer") {
    std::mt19937_64 g(99);
    Eigen::MatrixXd M = rand_mat(g, 8, 8);
    Eigen::MatrixXd P = M.transpose() * M + 1e-3 * Eigen::MatrixXd::Identity(8, 8);
    Eigen::VectorXd q = rand_mat(g, 8, 1);
    Eigen::MatrixXd A = rand_mat(g, 12, 8);
    Eigen::VectorXd x0 = rand_mat(g, 8, 1);
    Eigen::VectorXd l = A * x0 - Eigen::VectorXd::Constant(12, 0.5);
    Eigen::VectorXd u = A * x0 + Eigen::VectorXd::Constant(12, 0.5);

    auto s1 = solve_qp(make_qp(P, q, A, l, u));
    auto s2 = solve_qp(make_qp(1e3 * P, 1e3 * q, A, l, u));
    REQUIRE(s1.status == QpStatus::Solved);
    REQUIRE(s2.status == QpStatus::Solved);
    CHECK((s1.x - s2.x).lpNorm<Eigen::Infinity>() < 1e-6);
}

TEST_CASE("unbounded descent is flagged dual infeasible with a ray") {
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(1, 1);
    Eigen::MatrixXd A(1, 1);
    A << 1.0;
    Eigen::VectorXd q(1), l(1), u(1);
    q << -1.0;
    l << 0.0;
    u << kQpInfinity;
    auto sol = solve_qp(make_qp(P, q, A, l, u));
    REQUIRE(sol.status == QpStatus::DualInfeasible);
    CHECK(sol.certificate[0] > 0.9);
}

TEST_CASE("iteration cap returns MaxIter with residuals populated") {
    Eigen::MatrixXd P = Eigen::MatrixXd::Identity(3, 3);
    std::mt19937_64 g(5);
    Eigen::MatrixXd A = rand_mat(g, 4, 3);
    Eigen::VectorXd q = rand_mat(g, 3, 1);
    Eigen::VectorXd l = Eigen::VectorXd::Constant(4, -1.0);
    Eigen::VectorXd u = Eigen::VectorXd::Constant(4, 1.0);
    SolverSettings st;
    st.max_iter = 1;
    st.polish = false;
    auto sol = solve_qp(make_qp(P, q, A, l, u), st);
    CHECK(sol.status == QpStatus::MaxIter);
    CHECK(sol.iters == 1);
    CHECK(std::isfinite(sol.prim_res));
    CHECK(std::isfinite(sol.dual_res));
}

TEST_CASE("malformed programs are rejected") {
    SUBCASE("dimension mismatch") {
        Eigen::MatrixXd P = Eigen::MatrixXd::Identity(2, 2);
        Eigen::MatrixXd A(1, 2);
        A << 1.0, 1.0;
        Eigen::VectorXd q(3);
        q << 0, 0, 0;
        Eigen::VectorXd l(1), u(1);
        l << 0.0;
        u << 1.0;
        CHECK_THROWS_AS(solve_qp(make_qp(P, q, A, l, u)), QpError);
    }
    SUBCASE("negative diagonal") {
        Eigen::MatrixXd P(1, 1);
        P << -1.0;
        auto qp = make_qp(P, Eigen::VectorXd::Zero(1), Eigen::MatrixXd(0, 1),
                          Eigen::VectorXd(), Eigen::VectorXd());
        CHECK_THROWS_AS(solve_qp(qp), QpError);
    }
    SUBCASE("indefinite cost caught by factorization inertia") {
        Eigen::MatrixXd P(2, 2);
        P << 1.0, 2.0, 2.0, 1.0;
        auto qp = make_qp(P, Eigen::VectorXd::Zero(2), Eigen::MatrixXd(0, 2),
                          Eigen::VectorXd(), Eigen::VectorXd());
        CHECK_THROWS_AS(solve_qp(qp), QpError);
    }
    SUBCASE("asymmetric cost") {
        Eigen::MatrixXd P(2, 2);
        P << 1.0, 0.5, 0.0, 1.0;
        auto qp = make_qp(P, Eigen::VectorXd::Zero(2), Eigen::MatrixXd(0, 2),
                          Eigen::VectorXd(), Eigen::VectorXd());
        CHECK_THROWS_AS(solve_qp(qp), QpError);
    }
}

TEST_CASE("warm starts do not cost iterations on re-solves") {
    std::mt19937_64 g(2222);
    long warm_total = 0, cold_total = 0;
    for (int trial = 0; trial < 20; ++trial) {
        Eigen::Index n = 10, m = 16;
        Eigen::MatrixXd M = rand_mat(g, n, n);
        Eigen::MatrixXd P = M.transpose() * M + 1e-3 * Eigen::MatrixXd::Identity(n, n);
        Eigen::VectorXd q = rand_mat(g, n, 1);
        Eigen::MatrixXd A = rand_mat(g, m, n);
        Eigen::VectorXd x0 = rand_mat(g, n, 1);
        Eigen::VectorXd l = A * x0 - Eigen::VectorXd::Constant(m, 1.0);
        Eigen::VectorXd u = A * x0 + Eigen::VectorXd::Constant(m, 1.0);
        auto qp = make_qp(P, q, A, l, u);

        QpSolver persistent(qp);
        auto first = persistent.solve();
        REQUIRE(first.status == QpStatus::Solved);

        Eigen::VectorXd q2 = q + 0.02 * rand_mat(g, n, 1);
        persistent.update_linear_cost(q2);
        auto warm = persistent.solve();  // carries the previous iterate

        auto qp2 = qp;
        qp2.q = q2;
        QpSolver fresh(qp2);
        auto cold = fresh.solve();

        REQUIRE(warm.status == QpStatus::Solved);
        REQUIRE(cold.status == QpStatus::Solved);
        CHECK(std::abs(warm.obj - cold.obj) < 1e-5 * std::max(1.0, std::abs(cold.obj)));
        warm_total += warm.iters;
        cold_total += cold.iters;
    }
    CHECK(warm_total <= cold_total);
}

TEST_CASE("bound updates keep the factorization usable") {
    Eigen::MatrixXd P(1, 1), A(1, 1);
    P << 2.0;
    A << 1.0;
    Eigen::VectorXd q(1), l(1), u(1);
    q << 0.0;
    l << 1.0;
    u << kQpInfinity;
    QpSolver solver(make_qp(P, q, A, l, u));
    auto s1 = solver.solve();
    REQUIRE(s1.status == QpStatus::Solved);
    CHECK(s1.x[0] == doctest::Approx(1.0).epsilon(1e-6));

    // tighten the row into an equality at 2 (changes the step weighting too)
    Eigen::VectorXd l2(1), u2(1);
    l2 << 2.0;
    u2 << 2.0;
    solver.update_bounds(l2, u2);
    auto s2 = solver.solve();
    REQUIRE(s2.status == QpStatus::Solved);
    CHECK(s2.x[0] == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("triplet dump round-trips through a text parser") {
    Eigen::MatrixXd P(2, 2);
    P << 2.0, 0.5, 0.5, 1.0;
    Eigen::MatrixXd A(1, 2);
    A << 1.0, -1.0;
    Eigen::VectorXd q(2), l(1), u(1);
    q << -0.25, 3.0;
    l << -kQpInfinity;
    u << 7.5;
    auto qp = make_qp(P, q, A, l, u);
    std::istringstream in(to_triplet_text(qp));

    std::string tag;
    Eigen::Index n, m;
    in >> tag >> n >> m;
    REQUIRE(tag == "qp");
    REQUIRE(n == 2);
    REQUIRE(m == 1);
    Eigen::Index nnz;
    in >> tag >> nnz;
    REQUIRE(tag == "P");
    Eigen::MatrixXd Pr = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index k = 0; k < nnz; ++k) {
        Eigen::Index i, j;
        double v;
        in >> i >> j >> v;
        Pr(i, j) = v;
    }
    in >> tag;
    REQUIRE(tag == "q");
    Eigen::VectorXd qr(n);
    for (Eigen::Index i = 0; i < n; ++i) in >> qr[i];
    in >> tag >> nnz;
    REQUIRE(tag == "A");
    Eigen::MatrixXd Ar = Eigen::MatrixXd::Zero(m, n);
    for (Eigen::Index k = 0; k < nnz; ++k) {
        Eigen::Index i, j;
        double v;
        in >> i >> j >> v;
        Ar(i, j) = v;
    }
    in >> tag;
    REQUIRE(tag == "bounds");
    Eigen::VectorXd lr(m), ur(m);
    for (Eigen::Index i = 0; i < m; ++i) in >> lr[i] >> ur[i];

    CHECK(Pr == P);
    CHECK(Ar == A);
    CHECK(qr == q);
    CHECK(lr == l);
    CHECK(ur == u);
}
