#pragma once

// Dense primal-dual interior-point oracle for small box-constrained QPs:
//   minimize 0.5 x'Px + q'x   subject to   l <= Ax <= u,
// all bounds finite, P positive definite. Mehrotra predictor-corrector with
// slacks on both sides. Deliberately a different algorithm family from the
// operator-splitting solver under test.

#include <cmath>

#include <Eigen/Dense>

namespace oracle {

struct IpmResult {
    Eigen::VectorXd x;
    double obj = 0.0;
    bool converged = false;
    int iters = 0;
};

inline IpmResult ipm_solve(const Eigen::MatrixXd& P, const Eigen::VectorXd& q,
                           const Eigen::MatrixXd& A, const Eigen::VectorXd& l,
                           const Eigen::VectorXd& u) {
    const Eigen::Index n = P.rows(), m = A.rows();
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd Ax = A * x;
    Eigen::VectorXd s1 = (Ax - l).cwiseMax(1.0);
    Eigen::VectorXd s2 = (u - Ax).cwiseMax(1.0);
    Eigen::VectorXd m1 = Eigen::VectorXd::Ones(m);
    Eigen::VectorXd m2 = Eigen::VectorXd::Ones(m);

    IpmResult out;
    // 1e-9 is the practical floor here: the normal-equations reduction loses
    // digits as the barrier weights diverge near the solution
    const double tol = 1e-9;
    const double scale = std::max({1.0, q.lpNorm<Eigen::Infinity>(),
                                   l.lpNorm<Eigen::Infinity>(), u.lpNorm<Eigen::Infinity>()});

    auto max_step = [](const Eigen::VectorXd& v, const Eigen::VectorXd& dv) {
        double a = 1.0;
        for (Eigen::Index i = 0; i < v.size(); ++i)
            if (dv[i] < 0.0) a = std::min(a, -v[i] / dv[i]);
        return a;
    };

    for (int it = 0; it < 100; ++it) {
        Ax = A * x;
        Eigen::VectorXd rd = P * x + q - A.transpose() * m1 + A.transpose() * m2;
        Eigen::VectorXd rp1 = Ax - l - s1;
        Eigen::VectorXd rp2 = u - Ax - s2;
        double gap = (s1.dot(m1) + s2.dot(m2)) / static_cast<double>(2 * m);

        if (rd.lpNorm<Eigen::Infinity>() < tol * scale &&
            rp1.lpNorm<Eigen::Infinity>() < tol * scale &&
            rp2.lpNorm<Eigen::Infinity>() < tol * scale && gap < tol * scale) {
            out.converged = true;
            out.iters = it;
            break;
        }

        Eigen::VectorXd d1 = m1.cwiseQuotient(s1);
        Eigen::VectorXd d2 = m2.cwiseQuotient(s2);
        Eigen::MatrixXd H = P;
        H.noalias() += A.transpose() * (d1 + d2).asDiagonal() * A;
        Eigen::LLT<Eigen::MatrixXd> llt(H);
        if (llt.info() != Eigen::Success) break;  // barrier blow-up past the floor

        // affine predictor
        Eigen::VectorXd rc1 = s1.cwiseProduct(m1);
        Eigen::VectorXd rc2 = s2.cwiseProduct(m2);
        auto solve_step = [&](const Eigen::VectorXd& c1, const Eigen::VectorXd& c2,
                              Eigen::VectorXd& dx, Eigen::VectorXd& ds1,
                              Eigen::VectorXd& ds2, Eigen::VectorXd& dm1,
                              Eigen::VectorXd& dm2) {
            Eigen::VectorXd rhs = -rd;
            rhs.noalias() -= A.transpose() * ((c1 + m1.cwiseProduct(rp1)).cwiseQuotient(s1));
            rhs.noalias() += A.transpose() * ((c2 + m2.cwiseProduct(rp2)).cwiseQuotient(s2));
            dx = llt.solve(rhs);
            Eigen::VectorXd Adx = A * dx;
            ds1 = Adx + rp1;
            ds2 = -Adx + rp2;
            dm1 = -(c1 + m1.cwiseProduct(ds1)).cwiseQuotient(s1);
            dm2 = -(c2 + m2.cwiseProduct(ds2)).cwiseQuotient(s2);
        };

        Eigen::VectorXd dx, ds1, ds2, dm1, dm2;
        solve_step(rc1, rc2, dx, ds1, ds2, dm1, dm2);
        double ap = std::min(max_step(s1, ds1), max_step(s2, ds2));
        double ad = std::min(max_step(m1, dm1), max_step(m2, dm2));
        double gap_aff = ((s1 + ap * ds1).dot(m1 + ad * dm1) +
                          (s2 + ap * ds2).dot(m2 + ad * dm2)) /
                         static_cast<double>(2 * m);
        double sigma = gap > 0 ? std::pow(gap_aff / gap, 3.0) : 0.0;

        // corrector with centering
        Eigen::VectorXd cc1 = rc1 + ds1.cwiseProduct(dm1) -
                              Eigen::VectorXd::Constant(m, sigma * gap);
        Eigen::VectorXd cc2 = rc2 + ds2.cwiseProduct(dm2) -
                              Eigen::VectorXd::Constant(m, sigma * gap);
        solve_step(cc1, cc2, dx, ds1, ds2, dm1, dm2);
        ap = 0.99 * std::min(max_step(s1, ds1), max_step(s2, ds2));
        ad = 0.99 * std::min(max_step(m1, dm1), max_step(m2, dm2));

        x += ap * dx;
        s1 += ap * ds1;
        s2 += ap * ds2;
        m1 += ad * dm1;
        m2 += ad * dm2;
        out.iters = it + 1;
    }

    out.x = x;
    out.obj = 0.5 * x.dot(P * x) + q.dot(x);
    return out;
}

}  // namespace oracle
