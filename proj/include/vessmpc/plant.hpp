#pragma once
// Ground-truth simulator: realizes dispatch actions on the nonlinear network,
// storage, and conductor thermal models, and produces the measurements and
// noisy estimates that drive the next planning window.

#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "vessmpc/case.hpp"
#include "vessmpc/mpc.hpp"
#include "vessmpc/uncertainty.hpp"

namespace vessmpc {

class PlantError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Converged network solution, per-unit on the system base.
struct FlowSolution {
    Eigen::VectorXd theta;  ///< bus angles, rad; reference bus pinned at zero
    Eigen::VectorXd flow;   ///< sending-end real power per branch, p.u.
    Eigen::VectorXd loss;   ///< series loss per branch, p.u., nonnegative
    double slack = 0.0;     ///< extra injection absorbed at the reference bus, p.u.
    int iters = 0;
};

/// DC angles with exact quadratic losses reattached half at each branch end,
/// iterated to a fixed point (loss change below 1e-9 p.u.). The reference bus
/// acts as the slack. Throws PlantError on non-convergence or a singular
/// network.
FlowSolution solve_lossy_dc(const NetworkCase& cs, const Eigen::VectorXd& injections);

/// Full Newton power flow in polar form. Generator buses hold |V| = v_set,
/// other buses are PQ with unity power factor; branch reactance is taken as
/// the reciprocal of the DC susceptance. Tolerance 1e-8 p.u. mismatch.
FlowSolution solve_ac(const NetworkCase& cs, const Eigen::VectorXd& injections,
                      double v_set = 1.0);

/// Calibrated heat-balance constants for one conductor:
///   c_th dT/dt = p_loss k_w - h (T - t_amb) - k_r ((T+273.15)^4 - (t_amb+273.15)^4)
/// so that the steady state at loss_at_ampacity sits exactly at the temperature
/// limit and the small-signal time constant there equals the branch value.
struct ThermalConstants {
    double k_w = 1.0;  ///< p.u. loss to thermal power scale
    double h = 0.0;    ///< convective coefficient, per degC
    double c_th = 0.0; ///< heat capacity, seconds scaled
    double k_r = 0.0;  ///< radiative coefficient, per K^4
    double t_amb = 0.0;
    double t_lim = 0.0;
};

/// radiation_share is the fraction of equilibrium dissipation carried by the
/// quartic term; the remainder is convective.
ThermalConstants calibrate_thermal(const Branch& br, double radiation_share = 0.1);

/// One RK4 step of the heat balance. The Branch overload calibrates in place.
double thermal_step(double line_temp, double p_loss, const ThermalConstants& tc, double dt);
double thermal_step(double line_temp, double p_loss, const Branch& br, double dt);

/// Temperature at which dissipation balances the given loss (Newton, exact).
double thermal_equilibrium(const ThermalConstants& tc, double p_loss);

/// Piecewise-constant per-bus net-load delta, held past the last breakpoint
/// and zero before the first.
struct Disturbance {
    std::vector<std::pair<double, Eigen::VectorXd>> deltas;  ///< (seconds, p.u. per bus)

    Eigen::VectorXd at(double time, Eigen::Index n_bus) const;
};

///// The standard event: at t seconds every bus load drops by the given fraction
/// of its nominal value (net-load decrease spread proportionally to load).
Disturbance step_net_load_drop(const NetworkCase& cs, double at_seconds, double fraction);

/// Merit-proportional economic dispatch meeting the given bus loads plus
/// network losses. Generators are loaded at a common scaling of their merit
/// base points, clamped into unit limits; the scaling is solved so production
/// matches demand plus the converged lossy-DC losses.
Eigen::VectorXd ed_dispatch(const NetworkCase& cs, const Eigen::VectorXd& bus_load);

struct PlantState {
    Eigen::VectorXd gen_power;  ///< p.u. per generator
    Eigen::VectorXd soc_act;    ///< p.u.-h per VESS
    Eigen::VectorXd cap_act;    ///< realized upper capacity, p.u.-h, fixed per trial
    Eigen::VectorXd line_temp;  ///< degC per line
    Eigen::VectorXd pch_real;   ///< last realized charge powers, p.u.
    Eigen::VectorXd pdis_real;
    double time = 0.0;          ///< seconds
};

/// One storage saturation: the commanded exchange would have pushed the SOC
/// past a realized bound, so the excess energy was truncated.
struct DcsEvent {
    double time = 0.0;
    int vess = 0;
    bool upper = true;     ///< true at capacity, false at the floor
    double energy = 0.0;   ///< p.u.-h truncated
};

struct StepMeasurements {
    Eigen::VectorXd gen_power;  ///< post-compensation outputs, p.u.
    Eigen::VectorXd loss;       ///< realized per-line losses, p.u.
    Eigen::VectorXd temp_dev;   ///< line temperature minus limit, degC
    Eigen::VectorXd soc_act;    ///< p.u.-h
    Eigen::VectorXd p_ch;       ///< realized charge powers, p.u.
    Eigen::VectorXd p_dis;
    double slack = 0.0;         ///< power-flow slack injection, p.u.
    double dcs_comp = 0.0;      ///< generator compensation applied, p.u. (signed)
    double dcs_residual = 0.0;  ///< compensation left to the slack bus, p.u.
    std::vector<DcsEvent> events;
};

struct PlantConfig {
    bool ac = false;              ///< full power flow instead of lossy DC
    double ts_seconds = 60.0;
    double radiation_share = 0.1;
};

/// Owns one trial's ground truth. Stepping advances storage (with dynamic
/// capacity saturation against the realized bounds and ramp-clamped generator
/// compensation), generator outputs, the network solution, and conductor
/// temperatures, in that order, and emits the realized measurements.
class Plant {
public:
    Plant(NetworkCase cs, PlantConfig cfg);

    /// Start of a trial: generators on the given schedule, stores at their
    /// nominal initial SOC clamped into the realized capacities, conductors at
    /// thermal equilibrium with the resulting flows. Returns the initial
    /// measurements (loss feedback and temperatures for the first window).
    StepMeasurements init_steady(const Eigen::VectorXd& gen_power,
                                 const Eigen::VectorXd& cap_act,
                                 const Eigen::VectorXd& bus_load);

    StepMeasurements step(const DispatchPlan& plan, const Eigen::VectorXd& bus_load);

    const PlantState& state() const { return state_; }
    const PlantConfig& config() const { return cfg_; }
    const std::vector<ThermalConstants>& thermal() const { return thermal_; }

private:
    FlowSolution solve(const Eigen::VectorXd& injections) const;
    Eigen::VectorXd bus_injections(const Eigen::VectorXd& gen, const Eigen::VectorXd& pch,
                                   const Eigen::VectorXd& pdis,
                                   const Eigen::VectorXd& bus_load) const;

    NetworkCase cs_;
    PlantConfig cfg_;
    std::vector<ThermalConstants> thermal_;
    std::vector<std::vector<Eigen::Index>> gens_at_;  ///< generator ids per bus
    std::vector<std::vector<Eigen::Index>> vess_at_;
    PlantState state_;
    bool ready_ = false;
};

/// Controller-visible state fragment, per-unit hours.
struct EstimateFragment {
    Eigen::VectorXd soc_est;
    Eigen::VectorXd cap_est;
};

/// Measurement model: the capacity estimate is the actual plus the trial's
/// fixed error; the SOC estimate adds a fresh draw each step, clamped into
/// [0, cap_est]. xi_cap is in case energy units (MWh) as drawn by the sampler.
EstimateFragment estimate_state(const PlantState& plant, ErrorSampler& sampler,
                                const Eigen::VectorXd& xi_cap, const NetworkCase& cs);

}  // namespace vessmpc
