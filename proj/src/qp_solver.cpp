#include "vessmpc/qp_solver.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <vector>

#include <fmt/core.h>

namespace vessmpc {

namespace {

double inf_norm(const Eigen::VectorXd& v) {
    return v.size() > 0 ? v.cwiseAbs().maxCoeff() : 0.0;
}

bool is_neg_inf(double v) { return v <= -kQpInfinity; }
bool is_pos_inf(double v) { return v >= kQpInfinity; }

Eigen::VectorXd clamp_box(const Eigen::VectorXd& v, const Eigen::VectorXd& l,
                          const Eigen::VectorXd& u) {
    return v.cwiseMax(l).cwiseMin(u);
}

}  // namespace

std::string to_string(QpStatus s) {
    switch (s) {
        case QpStatus::Solved: return "solved";
        case QpStatus::MaxIter: return "max_iter";
        case QpStatus::PrimalInfeasible: return "primal_infeasible";
        case QpStatus::DualInfeasible: return "dual_infeasible";
    }
    return "?";
}

void QuadraticProgram::validate() const {
    if (P.rows() != P.cols()) throw QpError("P must be square");
    if (q.size() != P.rows())
        throw QpError(fmt::format("q has {} entries for {} variables", q.size(), P.rows()));
    if (A.rows() > 0 && A.cols() != P.rows())
        throw QpError(fmt::format("A has {} columns for {} variables", A.cols(), P.rows()));
    if (l.size() != A.rows() || u.size() != A.rows())
        throw QpError(fmt::format("bounds have {}/{} entries for {} constraints", l.size(),
                                  u.size(), A.rows()));
    if (!q.allFinite()) throw QpError("q contains non-finite entries");
    for (Eigen::Index i = 0; i < l.size(); ++i)
        if (std::isnan(l[i]) || std::isnan(u[i]))
            throw QpError(fmt::format("constraint {}: NaN bound", i));

    // symmetry and PSD-necessary diagonal
    Eigen::SparseMatrix<double> diff = Eigen::SparseMatrix<double>(P.transpose()) - P;
    double scale = 0.0;
    for (int k = 0; k < P.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(P, k); it; ++it)
            scale = std::max(scale, std::abs(it.value()));
    for (int k = 0; k < diff.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(diff, k); it; ++it)
            if (std::abs(it.value()) > 1e-10 * std::max(1.0, scale))
                throw QpError(fmt::format("P is not symmetric at ({}, {})", it.row(), it.col()));
    for (Eigen::Index i = 0; i < P.rows(); ++i)
        if (P.coeff(i, i) < -1e-12 * std::max(1.0, scale))
            throw QpError(fmt::format("P has negative diagonal at {}", i));
}

void SolverSettings::validate() const {
    if (!(eps_abs > 0.0) || !(eps_rel > 0.0)) throw QpError("tolerances must be positive");
    if (eps_accept < 0.0) throw QpError("acceptance tolerance must be non-negative");
    if (stall_checks < 1) throw QpError("stall_checks must be at least 1");
    if (max_iter < 1) throw QpError("max_iter must be at least 1");
    if (!(step_rho > 0.0) || !(sigma > 0.0)) throw QpError("step parameters must be positive");
    if (!(alpha > 0.0 && alpha < 2.0)) throw QpError("relaxation must lie in (0, 2)");
    if (check_interval < 1) throw QpError("check_interval must be at least 1");
}

// ---------------------------------------------------------------------------
// KktSolver

KktSolver::KktSolver(const Eigen::SparseMatrix<double>& P,
                     const Eigen::SparseMatrix<double>& A, double sigma,
                     const Eigen::VectorXd& rho)
    : n_(P.rows()), m_(A.rows()), sigma_(sigma), rho_(rho) {
    if (rho_.size() != m_) throw QpError("rho vector does not match constraint count");
    if ((rho_.array() <= 0.0).any()) throw QpError("rho entries must be positive");
    assemble(P, A);
    ldlt_.analyzePattern(kkt_);
    analyzed_ = true;
    factorize();
}

void KktSolver::assemble(const Eigen::SparseMatrix<double>& P,
                         const Eigen::SparseMatrix<double>& A) {
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(P.nonZeros() + 2 * A.nonZeros() + n_ + m_));
    for (int k = 0; k < P.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(P, k); it; ++it)
            trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                               it.value());
    for (Eigen::Index i = 0; i < n_; ++i)
        trips.emplace_back(static_cast<int>(i), static_cast<int>(i), sigma_);
    for (int k = 0; k < A.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(A, k); it; ++it) {
            int r = static_cast<int>(n_ + it.row());
            int c = static_cast<int>(it.col());
            trips.emplace_back(r, c, it.value());
            trips.emplace_back(c, r, it.value());
        }
    for (Eigen::Index i = 0; i < m_; ++i) {
        int d = static_cast<int>(n_ + i);
        trips.emplace_back(d, d, -1.0 / rho_[i]);
    }
    kkt_.resize(n_ + m_, n_ + m_);
    kkt_.setFromTriplets(trips.begin(), trips.end());
    kkt_.makeCompressed();
}

void KktSolver::factorize() {
    ldlt_.factorize(kkt_);
    if (ldlt_.info() != Eigen::Success)
        throw QpError("KKT factorization failed (singular after regularization)");
}

void KktSolver::update_rho(const Eigen::VectorXd& rho) {
    if (rho.size() != m_) throw QpError("rho vector does not match constraint count");
    rho_ = rho;
    for (Eigen::Index i = 0; i < m_; ++i)
        kkt_.coeffRef(n_ + i, n_ + i) = -1.0 / rho_[i];
    factorize();
}

Eigen::VectorXd KktSolver::solve(const Eigen::VectorXd& rhs) const {
    if (rhs.size() != n_ + m_) throw QpError("KKT rhs has wrong dimension");
    return ldlt_.solve(rhs);
}

std::pair<int, int> KktSolver::inertia() const {
    Eigen::VectorXd d = ldlt_.vectorD();
    int pos = 0, neg = 0;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
        if (d[i] > 0.0) ++pos;
        else if (d[i] < 0.0) ++neg;
    }
    return {pos, neg};
}

// ---------------------------------------------------------------------------
// QpSolver

QpSolver::QpSolver(QuadraticProgram qp, SolverSettings settings)
    : qp_(std::move(qp)), settings_(settings) {
    settings_.validate();
    if (qp_.A.rows() == 0 && qp_.A.cols() != qp_.n()) qp_.A.resize(0, qp_.n());
    qp_.validate();
    qp_.P.makeCompressed();
    qp_.A.makeCompressed();
    rho_base_ = settings_.step_rho;
    compute_scaling();
    build_kkt();
}

void QpSolver::compute_scaling() {
    const Eigen::Index n = qp_.n(), m = qp_.m();
    scal_.d = Eigen::VectorXd::Ones(n);
    scal_.e = Eigen::VectorXd::Ones(m);
    scal_.c = 1.0;
    Ps_ = qp_.P;
    As_ = qp_.A;
    qs_ = qp_.q;

    if (settings_.scaling) {
        for (int round = 0; round < settings_.scaling_iters; ++round) {
            // column norms over the stacked [P; A]
            Eigen::VectorXd cn = Eigen::VectorXd::Zero(n);
            for (int k = 0; k < Ps_.outerSize(); ++k)
                for (Eigen::SparseMatrix<double>::InnerIterator it(Ps_, k); it; ++it)
                    cn[it.col()] = std::max(cn[it.col()], std::abs(it.value()));
            for (int k = 0; k < As_.outerSize(); ++k)
                for (Eigen::SparseMatrix<double>::InnerIterator it(As_, k); it; ++it)
                    cn[it.col()] = std::max(cn[it.col()], std::abs(it.value()));
            Eigen::VectorXd rn = Eigen::VectorXd::Zero(m);
            for (int k = 0; k < As_.outerSize(); ++k)
                for (Eigen::SparseMatrix<double>::InnerIterator it(As_, k); it; ++it)
                    rn[it.row()] = std::max(rn[it.row()], std::abs(it.value()));

            Eigen::VectorXd dc(n), er(m);
            for (Eigen::Index j = 0; j < n; ++j)
                dc[j] = cn[j] > 1e-12 ? 1.0 / std::sqrt(cn[j]) : 1.0;
            for (Eigen::Index i = 0; i < m; ++i)
                er[i] = rn[i] > 1e-12 ? 1.0 / std::sqrt(rn[i]) : 1.0;

            Eigen::SparseMatrix<double> pt = dc.asDiagonal() * Ps_ * dc.asDiagonal();
            Ps_ = std::move(pt);
            Eigen::SparseMatrix<double> at = er.asDiagonal() * As_ * dc.asDiagonal();
            As_ = std::move(at);
            qs_ = dc.cwiseProduct(qs_);
            scal_.d = scal_.d.cwiseProduct(dc);
            scal_.e = scal_.e.cwiseProduct(er);

            // cost normalization toward unit curvature
            double pmean = 0.0;
            if (n > 0) {
                Eigen::VectorXd pc = Eigen::VectorXd::Zero(n);
                for (int k = 0; k < Ps_.outerSize(); ++k)
                    for (Eigen::SparseMatrix<double>::InnerIterator it(Ps_, k); it; ++it)
                        pc[it.col()] = std::max(pc[it.col()], std::abs(it.value()));
                pmean = pc.mean();
            }
            double denom = std::max(pmean, inf_norm(qs_));
            double gamma = denom > 1e-12 ? 1.0 / denom : 1.0;
            Ps_ *= gamma;
            qs_ *= gamma;
            scal_.c *= gamma;
        }
    }

    ls_.resize(m);
    us_.resize(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        ls_[i] = is_neg_inf(qp_.l[i]) ? -kQpInfinity
                                      : std::max(-kQpInfinity, scal_.e[i] * qp_.l[i]);
        us_[i] = is_pos_inf(qp_.u[i]) ? kQpInfinity
                                      : std::min(kQpInfinity, scal_.e[i] * qp_.u[i]);
    }
}

Eigen::VectorXd QpSolver::rho_vector(double base) const {
    const Eigen::Index m = qp_.m();
    Eigen::VectorXd rho(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        bool equality = !is_neg_inf(qp_.l[i]) && !is_pos_inf(qp_.u[i]) &&
                        qp_.u[i] - qp_.l[i] <= 1e-12 * std::max(1.0, std::abs(qp_.u[i]));
        double r = equality ? 1e3 * base : base;
        rho[i] = std::clamp(r, 1e-6, 1e6);
    }
    return rho;
}

void QpSolver::build_kkt() {
    kkt_ = std::make_unique<KktSolver>(Ps_, As_, settings_.sigma, rho_vector(rho_base_));
    auto [pos, neg] = kkt_->inertia();
    if (pos != qp_.n() || neg != qp_.m())
        throw QpError(fmt::format(
            "cost matrix is not positive semidefinite (KKT inertia {}/{}, expected {}/{})",
            pos, neg, qp_.n(), qp_.m()));
}

void QpSolver::update_linear_cost(const Eigen::VectorXd& q) {
    if (q.size() != qp_.n()) throw QpError("linear cost has wrong dimension");
    if (!q.allFinite()) throw QpError("q contains non-finite entries");
    qp_.q = q;
    qs_ = scal_.c * scal_.d.cwiseProduct(q);
}

void QpSolver::update_bounds(const Eigen::VectorXd& l, const Eigen::VectorXd& u) {
    if (l.size() != qp_.m() || u.size() != qp_.m())
        throw QpError("bounds have wrong dimension");
    Eigen::VectorXd old_rho = rho_vector(rho_base_);
    qp_.l = l;
    qp_.u = u;
    for (Eigen::Index i = 0; i < qp_.m(); ++i) {
        ls_[i] = is_neg_inf(l[i]) ? -kQpInfinity : std::max(-kQpInfinity, scal_.e[i] * l[i]);
        us_[i] = is_pos_inf(u[i]) ? kQpInfinity : std::min(kQpInfinity, scal_.e[i] * u[i]);
    }
    Eigen::VectorXd new_rho = rho_vector(rho_base_);
    if (old_rho.size() > 0 && (old_rho - new_rho).cwiseAbs().maxCoeff() > 0.0)
        kkt_->update_rho(new_rho);
}

void QpSolver::warm_start(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    if (x.size() != qp_.n() || y.size() != qp_.m()) throw QpError("warm start has wrong dimension");
    xw_ = x.cwiseQuotient(scal_.d);
    yw_ = scal_.c * y.cwiseQuotient(scal_.e);
    zw_ = clamp_box(As_ * xw_, ls_, us_);
    have_warm_ = true;
}

void QpSolver::reset_start() { have_warm_ = false; }

bool QpSolver::check_empty_box(QpSolution& out) const {
    for (Eigen::Index i = 0; i < qp_.m(); ++i) {
        if (qp_.l[i] > qp_.u[i]) {
            out.status = QpStatus::PrimalInfeasible;
            out.x = Eigen::VectorXd::Zero(qp_.n());
            out.y = Eigen::VectorXd::Zero(qp_.m());
            out.z = Eigen::VectorXd::Zero(qp_.m());
            out.certificate = Eigen::VectorXd::Zero(qp_.m());
            out.certificate[i] = 1.0;
            out.obj = std::numeric_limits<double>::quiet_NaN();
            out.prim_res = std::numeric_limits<double>::infinity();
            out.dual_res = std::numeric_limits<double>::infinity();
            return true;
        }
    }
    return false;
}

QpSolution QpSolver::solve() {
    const auto t0 = std::chrono::steady_clock::now();
    const Eigen::Index n = qp_.n(), m = qp_.m();
    QpSolution out;
    if (check_empty_box(out)) {
        out.solve_time =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return out;
    }

    Eigen::VectorXd rho = rho_vector(rho_base_);
    Eigen::VectorXd rho_inv = rho.cwiseInverse();

    Eigen::VectorXd x, z, y;
    if (have_warm_) {
        x = xw_;
        z = zw_;
        y = yw_;
    } else {
        x = Eigen::VectorXd::Zero(n);
        z = clamp_box(Eigen::VectorXd::Zero(m), ls_, us_);
        y = Eigen::VectorXd::Zero(m);
    }

    const Eigen::VectorXd dinv = scal_.d.cwiseInverse();
    const Eigen::VectorXd einv = scal_.e.cwiseInverse();
    const double cinv = 1.0 / scal_.c;
    const double qnorm_u = inf_norm(qp_.q);

    Eigen::VectorXd rhs(n + m), xt(n), zt(m), v(m);
    Eigen::VectorXd x_prev(n), y_prev(m);
    bool done = false;
    int k = 0;
    double best_gap = std::numeric_limits<double>::infinity();
    int stalled = 0;

    while (k < settings_.max_iter && !done) {
        ++k;
        x_prev = x;
        y_prev = y;

        rhs.head(n) = settings_.sigma * x - qs_;
        rhs.tail(m) = z - rho_inv.cwiseProduct(y);
        Eigen::VectorXd w = kkt_->solve(rhs);
        xt = w.head(n);
        zt = z + rho_inv.cwiseProduct(w.tail(m) - y);

        x = settings_.alpha * xt + (1.0 - settings_.alpha) * x;
        v = settings_.alpha * zt + (1.0 - settings_.alpha) * z + rho_inv.cwiseProduct(y);
        z = clamp_box(v, ls_, us_);
        y = rho.cwiseProduct(v - z);

        if (k % settings_.check_interval != 0 && k != settings_.max_iter) continue;

        // unscaled iterates and residuals
        Eigen::VectorXd xu = scal_.d.cwiseProduct(x);
        Eigen::VectorXd yu = cinv * scal_.e.cwiseProduct(y);
        Eigen::VectorXd zu = einv.cwiseProduct(z);
        Eigen::VectorXd Axu = einv.cwiseProduct(As_ * x);
        Eigen::VectorXd Pxu = cinv * dinv.cwiseProduct(Ps_ * x);
        Eigen::VectorXd Atyu = cinv * dinv.cwiseProduct(As_.transpose() * y);

        double rp = inf_norm(Axu - zu);
        double rd = inf_norm(Pxu + qp_.q + Atyu);
        double ep = settings_.eps_abs +
                    settings_.eps_rel * std::max(inf_norm(Axu), inf_norm(zu));
        double ed = settings_.eps_abs +
                    settings_.eps_rel *
                        std::max({inf_norm(Pxu), inf_norm(Atyu), qnorm_u});
        out.prim_res = rp;
        out.dual_res = rd;
        out.iters = k;

        if (rp <= ep && rd <= ed) {
            out.status = QpStatus::Solved;
            done = true;
            break;
        }

        // stall fallback: once the iterate is within the acceptance tolerance
        // and the residuals have stopped improving, take it
        if (settings_.eps_accept > 0.0) {
            const double epa = settings_.eps_accept *
                               (1.0 + std::max(inf_norm(Axu), inf_norm(zu)));
            const double eda = settings_.eps_accept *
                               (1.0 + std::max({inf_norm(Pxu), inf_norm(Atyu), qnorm_u}));
            const double gap = std::max(rp / epa, rd / eda);
            if (gap < 0.99 * best_gap) {
                best_gap = gap;
                stalled = 0;
            } else {
                ++stalled;
            }
            if (gap <= 1.0 && (stalled >= settings_.stall_checks || k == settings_.max_iter)) {
                out.status = QpStatus::Solved;
                out.inaccurate = true;
                done = true;
                break;
            }
        }

        // primal infeasibility: does the dual step direction separate the box?
        // The support test uses a much larger threshold than the A't residual:
        // on a feasible but thin problem the dual step can drift along a
        // near-singular direction with A't ~ eps and support barely negative,
        // which is not a certificate. A genuine certificate's support converges
        // to the (strictly negative) separation gap, so demanding it clear
        // sqrt(eps) rejects the drift without masking real infeasibility.
        Eigen::VectorXd dy_u = cinv * scal_.e.cwiseProduct(y - y_prev);
        double dy_norm = inf_norm(dy_u);
        if (dy_norm > settings_.eps_infeasible) {
            Eigen::VectorXd t = dy_u / dy_norm;
            const double support_gap = std::sqrt(settings_.eps_infeasible);
            if (inf_norm(qp_.A.transpose() * t) <= settings_.eps_infeasible) {
                double support = 0.0;
                bool valid = true;
                for (Eigen::Index i = 0; i < m && valid; ++i) {
                    if (t[i] > settings_.eps_infeasible) {
                        if (is_pos_inf(qp_.u[i])) valid = false;
                        else support += qp_.u[i] * t[i];
                    } else if (t[i] < -settings_.eps_infeasible) {
                        if (is_neg_inf(qp_.l[i])) valid = false;
                        else support += qp_.l[i] * t[i];
                    }
                }
                if (valid && support < -support_gap) {
                    out.status = QpStatus::PrimalInfeasible;
                    out.certificate = t;
                    out.x = scal_.d.cwiseProduct(x);
                    out.y = yu;
                    out.z = zu;
                    out.obj = std::numeric_limits<double>::quiet_NaN();
                    done = true;
                    break;
                }
            }
        }

        // dual infeasibility: unbounded descent ray. Same asymmetry as the
        // primal test: the descent rate must clear sqrt(eps), not just eps,
        // so primal drift along a flat direction is not mistaken for a ray.
        Eigen::VectorXd dx_u = scal_.d.cwiseProduct(x - x_prev);
        double dx_norm = inf_norm(dx_u);
        if (dx_norm > settings_.eps_infeasible) {
            Eigen::VectorXd t = dx_u / dx_norm;
            double eps = settings_.eps_infeasible;
            if (inf_norm(qp_.P * t) <= eps && qp_.q.dot(t) < -std::sqrt(eps)) {
                Eigen::VectorXd At = qp_.A * t;
                bool valid = true;
                for (Eigen::Index i = 0; i < m && valid; ++i) {
                    bool lo = !is_neg_inf(qp_.l[i]), hi = !is_pos_inf(qp_.u[i]);
                    if (lo && hi && std::abs(At[i]) > eps) valid = false;
                    else if (hi && At[i] > eps) valid = false;
                    else if (lo && At[i] < -eps) valid = false;
                }
                if (valid) {
                    out.status = QpStatus::DualInfeasible;
                    out.certificate = t;
                    out.x = t;
                    out.y = yu;
                    out.z = zu;
                    out.obj = -std::numeric_limits<double>::infinity();
                    done = true;
                    break;
                }
            }
        }

        // adaptive step: rebalance primal and dual progress
        if (settings_.adaptive_rho && k < settings_.max_iter) {
            double rp_s = inf_norm(As_ * x - z) /
                          std::max({inf_norm(As_ * x), inf_norm(z), 1e-10});
            double rd_s = inf_norm(Ps_ * x + qs_ + As_.transpose() * y) /
                          std::max({inf_norm(Ps_ * x), inf_norm(As_.transpose() * y),
                                    inf_norm(qs_), 1e-10});
            double ratio = std::sqrt(rp_s / std::max(rd_s, 1e-16));
            double nb = std::clamp(rho_base_ * ratio, 1e-6, 1e6);
            if (nb > 5.0 * rho_base_ || nb < rho_base_ / 5.0) {
                rho_base_ = nb;
                rho = rho_vector(rho_base_);
                rho_inv = rho.cwiseInverse();
                kkt_->update_rho(rho);
            }
        }
    }

    if (!done) out.status = QpStatus::MaxIter;

    if (out.status == QpStatus::Solved || out.status == QpStatus::MaxIter) {
        out.x = scal_.d.cwiseProduct(x);
        out.y = cinv * scal_.e.cwiseProduct(y);
        out.z = einv.cwiseProduct(z);
        out.obj = 0.5 * out.x.dot(qp_.P * out.x) + qp_.q.dot(out.x);
        if (out.status == QpStatus::Solved && settings_.polish) polish(out);
    }

    // carry the (scaled) iterate into the next solve
    xw_ = x;
    yw_ = y;
    zw_ = z;
    have_warm_ = true;

    out.solve_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

void QpSolver::polish(QpSolution& out) const {
    const Eigen::Index n = qp_.n(), m = qp_.m();
    std::vector<Eigen::Index> act;
    std::vector<double> bval;
    for (Eigen::Index i = 0; i < m; ++i) {
        bool eq = !is_neg_inf(qp_.l[i]) && !is_pos_inf(qp_.u[i]) &&
                  qp_.u[i] - qp_.l[i] <= 1e-12 * std::max(1.0, std::abs(qp_.u[i]));
        if (eq) {
            act.push_back(i);
            bval.push_back(qp_.l[i]);
        } else if (out.y[i] < 0.0 && !is_neg_inf(qp_.l[i])) {
            act.push_back(i);
            bval.push_back(qp_.l[i]);
        } else if (out.y[i] > 0.0 && !is_pos_inf(qp_.u[i])) {
            act.push_back(i);
            bval.push_back(qp_.u[i]);
        }
    }
    const auto ma = static_cast<Eigen::Index>(act.size());

    // [[P + dI, Aact'], [Aact, -dI]] with refinement against the exact system
    const double delta = 1e-7;
    std::vector<Eigen::Triplet<double>> trips;
    for (int k = 0; k < qp_.P.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(qp_.P, k); it; ++it)
            trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(it.col()),
                               it.value());
    for (Eigen::Index i = 0; i < n; ++i)
        trips.emplace_back(static_cast<int>(i), static_cast<int>(i), delta);
    Eigen::SparseMatrix<double> Aact(ma, n);
    {
        Eigen::SparseMatrix<double, Eigen::RowMajor> arow(qp_.A);
        std::vector<Eigen::Index> row_of(static_cast<std::size_t>(m),
                                         static_cast<Eigen::Index>(-1));
        for (Eigen::Index r = 0; r < ma; ++r) row_of[static_cast<std::size_t>(act[static_cast<std::size_t>(r)])] = r;
        std::vector<Eigen::Triplet<double>> at;
        for (Eigen::Index src = 0; src < m; ++src) {
            Eigen::Index r = row_of[static_cast<std::size_t>(src)];
            if (r < 0) continue;
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(arow, src);
                 it; ++it)
                at.emplace_back(static_cast<int>(r), static_cast<int>(it.col()), it.value());
        }
        Aact.setFromTriplets(at.begin(), at.end());
    }
    for (int k = 0; k < Aact.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(Aact, k); it; ++it) {
            trips.emplace_back(static_cast<int>(n + it.row()), static_cast<int>(it.col()),
                               it.value());
            trips.emplace_back(static_cast<int>(it.col()), static_cast<int>(n + it.row()),
                               it.value());
        }
    for (Eigen::Index i = 0; i < ma; ++i)
        trips.emplace_back(static_cast<int>(n + i), static_cast<int>(n + i), -delta);

    Eigen::SparseMatrix<double> K(n + ma, n + ma);
    K.setFromTriplets(trips.begin(), trips.end());
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(K);
    if (ldlt.info() != Eigen::Success) return;

    Eigen::VectorXd rhs(n + ma);
    rhs.head(n) = -qp_.q;
    for (Eigen::Index i = 0; i < ma; ++i) rhs[n + i] = bval[static_cast<std::size_t>(i)];

    Eigen::VectorXd w = ldlt.solve(rhs);
    for (int it = 0; it < 3; ++it) {
        // residual of the unregularized KKT system
        Eigen::VectorXd r(n + ma);
        r.head(n) = rhs.head(n) - qp_.P * w.head(n) - Aact.transpose() * w.tail(ma);
        r.tail(ma) = rhs.tail(ma) - Aact * w.head(n);
        w += ldlt.solve(r);
    }

    Eigen::VectorXd xp = w.head(n);
    Eigen::VectorXd yp = Eigen::VectorXd::Zero(m);
    for (Eigen::Index i = 0; i < ma; ++i) yp[act[static_cast<std::size_t>(i)]] = w[n + i];

    Eigen::VectorXd Ax = qp_.A * xp;
    Eigen::VectorXd zp = Ax;
    double rp = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) {
        double viol = 0.0;
        if (!is_neg_inf(qp_.l[i])) viol = std::max(viol, qp_.l[i] - Ax[i]);
        if (!is_pos_inf(qp_.u[i])) viol = std::max(viol, Ax[i] - qp_.u[i]);
        rp = std::max(rp, viol);
        zp[i] = std::min(std::max(Ax[i], is_neg_inf(qp_.l[i]) ? Ax[i] : qp_.l[i]),
                         is_pos_inf(qp_.u[i]) ? Ax[i] : qp_.u[i]);
    }
    double rd = inf_norm(qp_.P * xp + qp_.q + qp_.A.transpose() * yp);

    if (std::max(rp, rd) < std::max(out.prim_res, out.dual_res)) {
        out.x = xp;
        out.y = yp;
        out.z = zp;
        out.prim_res = rp;
        out.dual_res = rd;
        out.obj = 0.5 * xp.dot(qp_.P * xp) + qp_.q.dot(xp);
    }
}

QpSolution solve_qp(const QuadraticProgram& qp, const SolverSettings& settings) {
    QpSolver solver(qp, settings);
    return solver.solve();
}

std::string to_triplet_text(const QuadraticProgram& qp) {
    std::string s = fmt::format("qp {} {}\n", qp.n(), qp.m());
    s += fmt::format("P {}\n", qp.P.nonZeros());
    for (int k = 0; k < qp.P.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(qp.P, k); it; ++it)
            s += fmt::format("{} {} {:.17g}\n", it.row(), it.col(), it.value());
    s += "q\n";
    for (Eigen::Index i = 0; i < qp.n(); ++i) s += fmt::format("{:.17g}\n", qp.q[i]);
    s += fmt::format("A {}\n", qp.A.nonZeros());
    for (int k = 0; k < qp.A.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(qp.A, k); it; ++it)
            s += fmt::format("{} {} {:.17g}\n", it.row(), it.col(), it.value());
    s += "bounds\n";
    for (Eigen::Index i = 0; i < qp.m(); ++i)
        s += fmt::format("{:.17g} {:.17g}\n", qp.l[i], qp.u[i]);
    return s;
}

}  // namespace vessmpc
