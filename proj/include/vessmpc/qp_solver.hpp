#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

namespace vessmpc {

class QpError : public std::runtime_error {
public:
    explicit QpError(const std::string& what) : std::runtime_error(what) {}
};

/// Bound magnitudes at or beyond this sentinel are treated as infinite.
inline constexpr double kQpInfinity = 1e30;

enum class QpStatus { Solved, MaxIter, PrimalInfeasible, DualInfeasible };
std::string to_string(QpStatus s);

/// minimize 0.5 x'Px + q'x  subject to  l <= Ax <= u.
/// P is stored fully symmetric; rows with l=u are equalities; bound entries at
/// +-kQpInfinity are unbounded. A row with l > u is an empty box and makes the
/// program trivially infeasible (reported by solve, not by validate).
struct QuadraticProgram {
    Eigen::SparseMatrix<double> P;
    Eigen::VectorXd q;
    Eigen::SparseMatrix<double> A;
    Eigen::VectorXd l, u;

    Eigen::Index n() const { return P.rows(); }
    Eigen::Index m() const { return A.rows(); }

    /// Dimension consistency, P symmetry, nonnegative P diagonal, finite q.
    void validate() const;
};

struct SolverSettings {
    double eps_abs = 1e-6;
    double eps_rel = 1e-6;
    /// Fallback tolerance (absolute and relative) accepted once progress
    /// stalls or the iteration budget runs out. Degenerate optimal faces make
    /// the splitting iteration orbit the optimum: the objective settles while
    /// the residuals stop shrinking around 1e-3 relative, and no iteration
    /// budget reaches eps_abs. Accepting the stalled iterate at this looser
    /// tolerance is the standard way out; 0 disables the fallback.
    double eps_accept = 1e-3;
    /// Consecutive residual checks without 1% progress that declare a stall.
    int stall_checks = 12;
    int max_iter = 20000;
    double step_rho = 0.1;  ///< base splitting step; equalities get 1e3x
    double sigma = 1e-6;    ///< primal regularization in the KKT matrix
    double alpha = 1.6;     ///< over-relaxation
    bool polish = true;     ///< active-set KKT refinement after convergence
    bool adaptive_rho = true;
    bool scaling = true;
    int scaling_iters = 10;
    int check_interval = 25;       ///< residual/termination cadence, iterations
    double eps_infeasible = 1e-6;  ///< certificate tolerance

    void validate() const;
};

struct QpSolution {
    QpStatus status = QpStatus::MaxIter;
    Eigen::VectorXd x;  ///< primal solution (or dual-infeasibility ray)
    Eigen::VectorXd y;  ///< constraint duals
    Eigen::VectorXd z;  ///< constraint values Ax at the solution
    double obj = 0.0;
    int iters = 0;
    double solve_time = 0.0;  ///< seconds
    double prim_res = 0.0;
    double dual_res = 0.0;
    /// Solved at the eps_accept fallback after a stall, not at eps_abs/eps_rel.
    bool inaccurate = false;
    /// Infeasibility certificate: for PrimalInfeasible a dual direction dy
    /// with A'dy ~ 0 and u'(dy)+ + l'(dy)- < 0 (for an empty-box row, the
    /// indicator of that row, certifying u_i < l_i in split form); for
    /// DualInfeasible a primal ray dx with Pdx ~ 0, q'dx < 0, Adx in the
    /// recession cone of the box.
    Eigen::VectorXd certificate;
};

/// Sparse LDL' factorization of the quasi-definite KKT matrix
///   [[P + sigma I, A'], [A, -diag(1/rho)]].
/// The symbolic analysis is done once; rho updates refactorize numerically.
class KktSolver {
public:
    KktSolver(const Eigen::SparseMatrix<double>& P, const Eigen::SparseMatrix<double>& A,
              double sigma, const Eigen::VectorXd& rho);

    void update_rho(const Eigen::VectorXd& rho);
    Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const;
    /// Diagonal D of the factorization (permuted order).
    Eigen::VectorXd diagonal() const { return ldlt_.vectorD(); }
    /// (positive, negative) pivot counts; quasi-definite systems give (n, m).
    std::pair<int, int> inertia() const;

    Eigen::Index n() const { return n_; }
    Eigen::Index m() const { return m_; }

private:
    void assemble(const Eigen::SparseMatrix<double>& P,
                  const Eigen::SparseMatrix<double>& A);
    void factorize();

    Eigen::Index n_ = 0, m_ = 0;
    double sigma_ = 0.0;
    Eigen::VectorXd rho_;
    Eigen::SparseMatrix<double> kkt_;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt_;
    bool analyzed_ = false;
};

/// Operator-splitting QP solver with a reusable factorization. One instance
/// per thread; repeated solves with updated q/l/u reuse the KKT factors and
/// warm-start from the previous solution unless told otherwise.
class QpSolver {
public:
    explicit QpSolver(QuadraticProgram qp, SolverSettings settings = {});

    /// Replace the linear cost (same dimension; rescaled internally).
    void update_linear_cost(const Eigen::VectorXd& q);
    /// Replace the bounds (same dimensions).
    void update_bounds(const Eigen::VectorXd& l, const Eigen::VectorXd& u);
    /// Seed the next solve with an unscaled primal/dual guess.
    void warm_start(const Eigen::VectorXd& x, const Eigen::VectorXd& y);
    /// Forget the previous iterate (next solve starts cold).
    void reset_start();

    QpSolution solve();

    const QuadraticProgram& program() const { return qp_; }
    const SolverSettings& settings() const { return settings_; }

private:
    struct Scaling {
        Eigen::VectorXd d, e;  ///< variable and constraint equilibration
        double c = 1.0;        ///< cost normalization
    };

    void compute_scaling();
    void build_kkt();
    Eigen::VectorXd rho_vector(double base) const;
    bool check_empty_box(QpSolution& out) const;
    void polish(QpSolution& out) const;

    QuadraticProgram qp_;       ///< original (unscaled) program
    SolverSettings settings_;
    Scaling scal_;
    // scaled working copies
    Eigen::SparseMatrix<double> Ps_, As_;
    Eigen::VectorXd qs_, ls_, us_;
    double rho_base_ = 0.1;
    std::unique_ptr<KktSolver> kkt_;
    // iterate carried between solves (scaled)
    Eigen::VectorXd xw_, yw_, zw_;
    bool have_warm_ = false;
};

/// One-shot convenience wrapper.
QpSolution solve_qp(const QuadraticProgram& qp, const SolverSettings& settings = {});

/// Plain-text sparse-triplet dump (matrices in coordinate form) so a program
/// can be inspected or re-solved outside the process.
std::string to_triplet_text(const QuadraticProgram& qp);

}  // namespace vessmpc
