#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "vessmpc/case.hpp"
#include "vessmpc/mpc.hpp"
#include "vessmpc/plant.hpp"
#include "vessmpc/qp_solver.hpp"
#include "vessmpc/uncertainty.hpp"

namespace vessmpc {

class HarnessError : public std::runtime_error {
public:
    explicit HarnessError(const std::string& what) : std::runtime_error(what) {}
};

/// Everything a closed-loop trial needs besides the strategy and the seed.
/// The MPC step length is the single clock: the plant step is forced to match.
struct ScenarioConfig {
    NetworkCase cs;
    MpcConfig mpc;          ///< strategy field is overwritten per run
    UncertaintySpec unc;    ///< sized to the case VESS fleet
    PlantConfig plant;
    SolverSettings solver;
    EdSchedule schedule;    ///< generator reference breakpoints (seconds, p.u.)
    Disturbance disturbance;
    int steps = 60;         ///< closed-loop length in MPC steps
    /// Redraw the SOC estimation error every step (the default); otherwise a
    /// single error drawn at the start persists for the whole trial.
    bool reestimate_each_step = true;

    /// Validates cross-references and fills the schedule with the nominal
    /// economic dispatch when empty.
    void finalize();
};

/// Reference schedule: economic dispatch at nominal load held until
/// ramp_start, linear transition to the post-disturbance dispatch by
/// ramp_end, held afterwards.
EdSchedule redispatch_schedule(const NetworkCase& cs, const Disturbance& d,
                               double ramp_start, double ramp_end);

enum class TrialStatus { Completed, Failed };

struct TrialResult {
    Strategy strategy = Strategy::Deterministic;
    std::uint64_t seed = 0;
    TrialStatus status = TrialStatus::Completed;
    std::string failure;             ///< reason when Failed
    int steps = 0;                   ///< steps actually completed
    double ts_seconds = 60.0;        ///< step length the trial ran with
    double j_gen_mw2 = 0.0;          ///< sum over steps/generators of (P - P_ref)^2, MW^2
    double j_gen_pu2 = 0.0;          ///< the same in p.u.^2
    int dcs_count = 0;               ///< saturation events across the trial
    double dcs_energy = 0.0;         ///< truncated energy, p.u.-h
    double total_risk = 0.0;         ///< sum of risk_trace, p.u.-h
    Eigen::VectorXd risk_trace;      ///< per-step fleet estimate excursion past the robust band
    Eigen::MatrixXd soc_trace;       ///< (step, vess) realized SOC, p.u.-h
    Eigen::MatrixXd temp_trace;      ///< (step, line) conductor temperature minus limit, degC
    Eigen::MatrixXd gen_trace;       ///< (step, gen) realized outputs, p.u.
    Eigen::MatrixXd ref_trace;       ///< (step, gen) tracked reference, p.u.
    Eigen::VectorXi dcs_step_count;  ///< events per step
    std::vector<double> solve_times; ///< per-step QP wall time, seconds
    std::vector<int> solve_iters;    ///< per-step ADMM iterations (retry included)
    int clamp_count = 0;             ///< solver-tolerance nudges during extraction
    int cold_restarts = 0;           ///< solves retried from a cold start
    int inaccurate_solves = 0;       ///< steps accepted at the stall tolerance
};

/// One receding-horizon trial: steady-state start, estimate -> bounds ->
/// refresh -> solve -> apply, for the configured number of steps. Any error
/// marks the trial Failed with the reason; it never throws for per-trial
/// faults. Deterministic for a fixed seed.
TrialResult run_closed_loop(const ScenarioConfig& sc, Strategy strategy,
                            std::uint64_t seed);

struct StrategySummary {
    Strategy strategy = Strategy::Deterministic;
    int trials = 0;
    int failures = 0;
    double mean_mw2 = 0.0;
    double std_mw2 = 0.0;
    double mean_pu2 = 0.0;
    double std_pu2 = 0.0;
    /// mean j_gen over the Robust batch's mean; NaN when Robust was not run.
    double ratio_to_robust = 0.0;
    double mean_dcs_count = 0.0;
    double mean_dcs_energy = 0.0;
    double mean_total_risk = 0.0;
};

struct McSummary {
    std::uint64_t base_seed = 0;
    int n_trials = 0;
    std::vector<StrategySummary> strategies;
};

struct McBatch {
    std::vector<Strategy> strategies;
    std::vector<std::vector<TrialResult>> results;  ///< [strategy][trial]
    McSummary summary;
};

/// Paired Monte-Carlo battery: trial t uses seed base_seed + t for every
/// strategy, so all strategies face identical error realizations. Trials run
/// on a bounded worker pool (jobs < 1 selects the hardware concurrency);
/// results and statistics are identical regardless of the worker count.
/// Throws HarnessError when a strategy completes no trial at all.
McBatch run_monte_carlo(const ScenarioConfig& sc, const std::vector<Strategy>& strategies,
                        int n_trials, std::uint64_t base_seed, int jobs = 0);

struct FrontierPoint {
    double c_risk = 0.0;
    int trials = 0;
    int failures = 0;
    double mean_mw2 = 0.0;
    double mean_pu2 = 0.0;
    double mean_total_risk = 0.0;
};

/// Risk-cost sweep: one paired RiskBased batch per grid value, emitted in
/// grid order. Grid values must be non-negative.
std::vector<FrontierPoint> sweep_risk_cost(const ScenarioConfig& sc,
                                           const std::vector<double>& grid, int n_trials,
                                           std::uint64_t base_seed, int jobs = 0);

/// Histogram of j_gen (MW^2) per strategy; everything above last_edge pools
/// into the final [last_edge, inf) bin.
struct HistogramRow {
    double lo = 0.0;
    double hi = 0.0;  ///< +inf on the last row
    std::vector<int> counts;
};
std::vector<HistogramRow> histogram_j_gen(const McBatch& batch, double bin_width = 200.0,
                                          double last_edge = 2000.0);

// CSV emission. Schemas are documented in the README; all numeric fields are
// printed with fixed shortest-roundtrip formatting so identical batches byte-
// compare equal. summary.csv and frontier.csv carry no wall-clock columns.
void write_trials_csv(const std::string& path, const McBatch& batch);
void write_summary_csv(const std::string& path, const McSummary& summary);
void write_frontier_csv(const std::string& path, const std::vector<FrontierPoint>& points);
void write_trace_csv(const std::string& path, const TrialResult& trial,
                     const NetworkCase& cs);
void write_histogram_csv(const std::string& path, const McBatch& batch,
                         double bin_width = 200.0, double last_edge = 2000.0);

}  // namespace vessmpc
