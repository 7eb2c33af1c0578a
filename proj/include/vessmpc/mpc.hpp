#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "vessmpc/case.hpp"
#include "vessmpc/qp_solver.hpp"
#include "vessmpc/uncertainty.hpp"

namespace vessmpc {

class MpcError : public std::runtime_error {
public:
    explicit MpcError(const std::string& what) : std::runtime_error(what) {}
};

enum class Strategy { Deterministic, Robust, RiskBased, FullInformation };
Strategy parse_strategy(const std::string& name);
std::string to_string(Strategy s);

/// Controller tuning. Cost vectors may be left empty to take defaults:
/// c_gen from the case's per-generator tracking cost, c_temp 100 per line,
/// c_risk 10 per VESS.
struct MpcConfig {
    int horizon = 20;          ///< steps
    double ts_seconds = 60.0;  ///< step length
    Strategy strategy = Strategy::Deterministic;
    Eigen::VectorXd c_gen;   ///< tracking weight per generator
    Eigen::VectorXd c_temp;  ///< overload weight per line
    Eigen::VectorXd c_risk;  ///< risk weight per VESS (RiskBased only)
    int loss_cuts = 15;      ///< tangent cuts approximating the loss parabola
    double loss_tiebreak = 1e-7;  ///< linear nudge keeping losses on the envelope
    double margin_growth = 1.0;   ///< per-step growth of the robust margins
    double epsilon = 0.05;
    DistributionClass dist = DistributionClass::Unimodal;

    /// Fills empty cost vectors with defaults and checks invariants.
    void finalize(const NetworkCase& cs);
};

/// Controller-visible state at the start of a planning step. Powers in p.u.,
/// energies in p.u.-h, temperatures in degC relative to each line's limit.
struct MpcState {
    Eigen::VectorXd gen_power;  ///< current generator outputs
    Eigen::VectorXd soc_est;    ///< SOC estimates (true values for FullInformation)
    Eigen::VectorXd cap_est;    ///< capacity estimates (true for FullInformation)
    Eigen::VectorXd temp_dev;   ///< line temperature minus limit
    Eigen::VectorXd loss_est;   ///< per-line loss feedback, p.u.
    Eigen::VectorXd pch_prev;   ///< previous applied charge powers
    Eigen::VectorXd pdis_prev;  ///< previous applied discharge powers
    /// Net-load preview over the horizon: (step, bus) in p.u.
    Eigen::MatrixXd load_forecast;

    void validate(const NetworkCase& cs, int horizon) const;
};

/// Per-generator setpoints over the horizon: (step, generator) in p.u.
struct ReferenceTrajectory {
    Eigen::MatrixXd setpoints;
};

/// Sparse dispatch schedule: (time seconds, per-generator setpoints p.u.).
using EdSchedule = std::vector<std::pair<double, Eigen::VectorXd>>;

/// Samples the schedule at Ts over [now, now + M*Ts) by linear interpolation,
/// holding the first value before the first point and the last value after
/// the last point.
ReferenceTrajectory build_reference(const EdSchedule& schedule, double ts_seconds,
                                    int horizon, double now_seconds);

/// Effective SOC bounds per VESS in the same units as the supplied capacity
/// estimates. robust_upper/robust_lower carry the chance-constraint limits
/// used by the RiskBased risk terms; for other strategies they equal the
/// effective bounds.
struct StrategyBounds {
    Eigen::VectorXd lower;         ///< hard lower bound fed to the QP
    Eigen::VectorXd upper;         ///< hard upper bound fed to the QP
    Eigen::VectorXd robust_lower;  ///< chance-constraint lower limit
    Eigen::VectorXd robust_upper;  ///< chance-constraint upper limit
};

/// Maps strategy to SOC bounds. Deterministic trusts the estimates; Robust
/// shrinks both ends by the safety margin f_inv * sqrt(ds^2 + dc^2 +
/// rho*dc*ds) (cross term doubled when the spec asks for it); RiskBased keeps
/// the estimate bounds hard and reports the robust limits for its risk terms;
/// FullInformation trusts the supplied (true) capacities. cap_est shares
/// units with the uncertainty spec's error stds.
StrategyBounds strategy_bounds(Strategy strategy, const NetworkCase& cs,
                               const Eigen::VectorXd& cap_est, const UncertaintySpec& u);

/// Variable indexing for the horizon QP. Per step the blocks are: generator
/// outputs, bus angles, line flows, line losses, temperature deviations,
/// overload magnitudes, charge powers, discharge powers, SOCs, and (for
/// RiskBased) risk variables.
class VariableLayout {
public:
    VariableLayout() = default;
    VariableLayout(int horizon, Eigen::Index n_gen, Eigen::Index n_bus, Eigen::Index n_line,
                   Eigen::Index n_vess, bool with_risk);

    Eigen::Index gen(int l, Eigen::Index g) const { return base(l) + g; }
    Eigen::Index theta(int l, Eigen::Index b) const { return base(l) + ng_ + b; }
    Eigen::Index flow(int l, Eigen::Index e) const { return base(l) + ng_ + nb_ + e; }
    Eigen::Index loss(int l, Eigen::Index e) const { return base(l) + ng_ + nb_ + nl_ + e; }
    Eigen::Index dtemp(int l, Eigen::Index e) const {
        return base(l) + ng_ + nb_ + 2 * nl_ + e;
    }
    Eigen::Index dhat(int l, Eigen::Index e) const {
        return base(l) + ng_ + nb_ + 3 * nl_ + e;
    }
    Eigen::Index pch(int l, Eigen::Index v) const { return base(l) + ng_ + nb_ + 4 * nl_ + v; }
    Eigen::Index pdis(int l, Eigen::Index v) const {
        return base(l) + ng_ + nb_ + 4 * nl_ + nv_ + v;
    }
    Eigen::Index soc(int l, Eigen::Index v) const {
        return base(l) + ng_ + nb_ + 4 * nl_ + 2 * nv_ + v;
    }
    Eigen::Index risk(int l, Eigen::Index v) const;

    Eigen::Index per_step() const { return stride_; }
    Eigen::Index count() const { return stride_ * horizon_; }
    int horizon() const { return horizon_; }
    bool with_risk() const { return risk_; }

    /// Human-readable index map for debugging.
    std::string report() const;

private:
    Eigen::Index base(int l) const { return stride_ * l; }
    int horizon_ = 0;
    Eigen::Index ng_ = 0, nb_ = 0, nl_ = 0, nv_ = 0, stride_ = 0;
    bool risk_ = false;
};

/// Row-block offsets of the assembled constraint matrix (step-major dynamic
/// rows first, then grouped variable boxes).
struct RowMap {
    Eigen::Index balance = 0, flowdef = 0, cuts = 0, thermal = 0, split = 0;
    Eigen::Index gen_ramp = 0, ch_ramp = 0, dis_ramp = 0, soc_dyn = 0, ref_angle = 0;
    Eigen::Index risk_upper = 0, risk_lower = 0;
    Eigen::Index per_step = 0;   ///< stride of the dynamic block
    Eigen::Index box_gen = 0, box_loss = 0, box_dhat = 0, box_pch = 0, box_pdis = 0,
                 box_soc = 0, box_risk = 0;
    Eigen::Index total = 0;

    Eigen::Index soc_box_row(int l, Eigen::Index v, Eigen::Index n_vess) const {
        return box_soc + static_cast<Eigen::Index>(l) * n_vess + v;
    }
};

struct AssembledQp {
    QuadraticProgram qp;
    VariableLayout layout;
    RowMap rows;
    MpcConfig config;  ///< finalized copy used for refresh and extraction
};

/// Builds the horizon QP. The sparsity pattern and quadratic cost depend only
/// on the case and config; the state, reference, and bounds enter through q,
/// l, u, so a persistent solver can be refreshed cheaply via refresh().
AssembledQp assemble(const MpcState& state, const ReferenceTrajectory& ref,
                     const NetworkCase& cs, const MpcConfig& config,
                     const StrategyBounds& bounds);

/// Rewrites q, l, u of a previously assembled program for new state data.
void refresh(AssembledQp& prog, const MpcState& state, const ReferenceTrajectory& ref,
             const NetworkCase& cs, const StrategyBounds& bounds);

/// First-step actions read from a solved program.
struct DispatchPlan {
    Eigen::VectorXd delta_gen;  ///< generator change vs current output, p.u.
    Eigen::VectorXd gen_power;  ///< absolute first-step outputs, p.u.
    Eigen::VectorXd p_ch;       ///< first-step charge powers, p.u.
    Eigen::VectorXd p_dis;      ///< first-step discharge powers, p.u.
    Eigen::MatrixXd risk;       ///< predicted risk trace (step, vess); empty otherwise
    double j_tracking = 0.0;    ///< predicted tracking + overload cost
    double j_risk = 0.0;        ///< predicted risk cost
    int clamp_count = 0;        ///< entries nudged back inside exact limits
    double clamp_max = 0.0;     ///< largest such nudge, p.u.
};

/// Reads the first-step plan, clamping solver-tolerance violations back to
/// the exact case limits (count and magnitude recorded in the plan). Throws
/// MpcError when the solution status is not Solved.
DispatchPlan extract_plan(const QpSolution& sol, const AssembledQp& prog,
                          const MpcState& state, const NetworkCase& cs,
                          const ReferenceTrajectory& ref);

}  // namespace vessmpc
