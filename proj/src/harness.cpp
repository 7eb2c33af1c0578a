#include "vessmpc/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <memory>
#include <thread>
#include <utility>

#include <fmt/format.h>
#include <fmt/ostream.h>

namespace vessmpc {

namespace {

using Eigen::Index;

Eigen::VectorXd nominal_load_pu(const NetworkCase& cs) {
    Eigen::VectorXd load(static_cast<Index>(cs.buses.size()));
    for (Index n = 0; n < load.size(); ++n)
        load(n) = cs.to_pu(cs.buses[static_cast<std::size_t>(n)].load_mw);
    return load;
}

StrategyBounds scale_bounds(StrategyBounds b, double factor) {
    b.lower *= factor;
    b.upper *= factor;
    b.robust_lower *= factor;
    b.robust_upper *= factor;
    return b;
}

std::ofstream open_csv(const std::string& path) {
    std::ofstream out(path, std::ios::binary);  // byte-stable newlines everywhere
    if (!out) throw HarnessError(fmt::format("cannot open '{}' for writing", path));
    return out;
}

std::string csv_quote(const std::string& s) {
    std::string quoted = "\"";
    for (char c : s) {
        if (c == '"') quoted += '"';  // doubled per RFC 4180
        quoted += c;
    }
    quoted += '"';
    return quoted;
}

}  // namespace

void ScenarioConfig::finalize() {
    cs.validate();
    unc.validate();
    if (unc.size() != cs.vess.size())
        throw HarnessError("uncertainty spec does not cover the VESS fleet");
    if (steps < 1) throw HarnessError("a trial needs at least one step");
    solver.validate();
    MpcConfig probe = mpc;
    probe.finalize(cs);  // surfaces config errors before any trial starts
    if (schedule.empty())
        schedule = {{0.0, ed_dispatch(cs, nominal_load_pu(cs))}};
    for (const auto& [when, setpoint] : schedule)
        if (setpoint.size() != static_cast<Index>(cs.generators.size()))
            throw HarnessError(
                fmt::format("schedule entry at {} s does not match the generator count", when));
}

EdSchedule redispatch_schedule(const NetworkCase& cs, const Disturbance& d,
                               double ramp_start, double ramp_end) {
    if (!(ramp_end > ramp_start) || ramp_start < 0.0)
        throw HarnessError("re-dispatch window must satisfy 0 <= start < end");
    const Eigen::VectorXd base = nominal_load_pu(cs);
    const Eigen::VectorXd after = base + d.at(std::numeric_limits<double>::max(), base.size());
    return {{ramp_start, ed_dispatch(cs, base)}, {ramp_end, ed_dispatch(cs, after)}};
}

TrialResult run_closed_loop(const ScenarioConfig& sc, Strategy strategy,
                            std::uint64_t seed) {
    TrialResult out;
    out.strategy = strategy;
    out.seed = seed;

    try {
        const NetworkCase& cs = sc.cs;
        const Index ng = static_cast<Index>(cs.generators.size());
        const Index nb = static_cast<Index>(cs.buses.size());
        const Index nl = static_cast<Index>(cs.branches.size());
        const Index nv = static_cast<Index>(cs.vess.size());
        const double base = cs.base_mva;

        MpcConfig cfg = sc.mpc;
        cfg.strategy = strategy;
        cfg.finalize(cs);
        out.ts_seconds = cfg.ts_seconds;
        UncertaintySpec unc = sc.unc;
        unc.validate();
        if (unc.size() != cs.vess.size())
            throw HarnessError("uncertainty spec does not cover the VESS fleet");
        if (sc.steps < 1) throw HarnessError("a trial needs at least one step");
        if (sc.schedule.empty()) throw HarnessError("reference schedule is empty");

        PlantConfig pc = sc.plant;
        pc.ts_seconds = cfg.ts_seconds;  // one clock for controller and plant

        const Eigen::VectorXd load0 = nominal_load_pu(cs);
        const Eigen::VectorXd gen0 = ed_dispatch(cs, load0);

        ErrorSampler sampler(unc, seed);
        const Eigen::VectorXd xi_cap = sampler.draw_capacity_errors();  // MWh

        // The operator's book value is the nameplate capacity; the realized
        // bound deviates from it by the drawn error, kept above the floor so
        // the store stays physically meaningful.
        Eigen::VectorXd cap_act(nv);
        for (Index v = 0; v < nv; ++v) {
            const auto& vs = cs.vess[static_cast<std::size_t>(v)];
            cap_act(v) = std::max(cs.to_pu(vs.cap_max - xi_cap(v)),
                                  cs.to_pu(vs.cap_min) + 1e-9);
        }

        Plant plant(cs, pc);
        StepMeasurements meas = plant.init_steady(gen0, cap_act, load0);

        // The reference-bus generator is the balancing machine: whatever
        // residual the power flow absorbs there is real generation moving off
        // schedule, so the tracking metric charges it to that unit.
        const int ref_bus = cs.reference_bus_index();
        Index ref_gen = 0;
        for (Index g = 0; g < ng; ++g) {
            if (cs.bus_index(cs.generators[static_cast<std::size_t>(g)].bus) == ref_bus) {
                ref_gen = g;
                break;
            }
        }

        Eigen::VectorXd fixed_xi_soc;  // used when re-estimation is disabled

        MpcState st;
        st.gen_power = gen0;
        st.temp_dev = meas.temp_dev;
        st.loss_est = meas.loss;
        st.pch_prev = Eigen::VectorXd::Zero(nv);
        st.pdis_prev = Eigen::VectorXd::Zero(nv);

        out.risk_trace = Eigen::VectorXd::Zero(sc.steps);
        out.soc_trace.resize(sc.steps, nv);
        out.temp_trace.resize(sc.steps, nl);
        out.gen_trace.resize(sc.steps, ng);
        out.ref_trace.resize(sc.steps, ng);
        out.dcs_step_count = Eigen::VectorXi::Zero(sc.steps);
        out.solve_times.reserve(static_cast<std::size_t>(sc.steps));
        out.solve_iters.reserve(static_cast<std::size_t>(sc.steps));

        AssembledQp prog;
        std::unique_ptr<QpSolver> solver;

        for (int k = 0; k < sc.steps; ++k) {
            const double now = k * cfg.ts_seconds;
            const Eigen::VectorXd load_now = load0 + sc.disturbance.at(now, nb);

            // The net-load trajectory is a forecast quantity: the controller
            // previews it over the horizon. What it cannot see is the realized
            // storage state, which is the uncertainty the strategies differ on.
            st.load_forecast.resize(cfg.horizon, nb);
            for (int l = 0; l < cfg.horizon; ++l)
                st.load_forecast.row(l) =
                    (load0 + sc.disturbance.at(now + l * cfg.ts_seconds, nb)).transpose();

            if (strategy == Strategy::FullInformation) {
                st.soc_est = plant.state().soc_act;
                st.cap_est = plant.state().cap_act;
            } else if (sc.reestimate_each_step) {
                EstimateFragment frag = estimate_state(plant.state(), sampler, xi_cap, cs);
                st.soc_est = frag.soc_est;
                st.cap_est = frag.cap_est;
            } else {
                if (fixed_xi_soc.size() == 0) fixed_xi_soc = sampler.draw_soc_errors(xi_cap);
                Eigen::VectorXd floors(nv);
                for (Index v = 0; v < nv; ++v)
                    floors(v) = cs.to_pu(cs.vess[static_cast<std::size_t>(v)].cap_min) + 1e-9;
                st.cap_est = (plant.state().cap_act + xi_cap / base).cwiseMax(floors);
                st.soc_est = (plant.state().soc_act + fixed_xi_soc / base)
                                 .cwiseMax(0.0)
                                 .cwiseMin(st.cap_est);
            }

            const Eigen::VectorXd cap_mwh = st.cap_est * base;
            const StrategyBounds bounds =
                scale_bounds(strategy_bounds(strategy, cs, cap_mwh, unc), 1.0 / base);

            // Strategy-independent diagnostic: how far the current estimates
            // sit outside the chance-constraint band.
            const StrategyBounds rob =
                strategy == Strategy::Robust
                    ? bounds
                    : scale_bounds(strategy_bounds(Strategy::Robust, cs, cap_mwh, unc),
                                   1.0 / base);
            double risk = 0.0;
            for (Index v = 0; v < nv; ++v)
                risk += std::max(0.0, st.soc_est(v) - rob.upper(v)) +
                        std::max(0.0, rob.lower(v) - st.soc_est(v));
            out.risk_trace(k) = risk;

            const ReferenceTrajectory ref =
                build_reference(sc.schedule, cfg.ts_seconds, cfg.horizon, now);

            if (!solver) {
                prog = assemble(st, ref, cs, cfg, bounds);
                solver = std::make_unique<QpSolver>(prog.qp, sc.solver);
            } else {
                refresh(prog, st, ref, cs, bounds);
                solver->update_linear_cost(prog.qp.q);
                solver->update_bounds(prog.qp.l, prog.qp.u);
            }

            QpSolution sol = solver->solve();
            double step_time = sol.solve_time;
            int step_iters = sol.iters;
            if (sol.status != QpStatus::Solved) {
                solver->reset_start();  // one cold retry before giving up
                sol = solver->solve();
                step_time += sol.solve_time;
                step_iters += sol.iters;
                ++out.cold_restarts;
            }
            out.solve_times.push_back(step_time);
            out.solve_iters.push_back(step_iters);
            if (sol.inaccurate) ++out.inaccurate_solves;

            const DispatchPlan plan = extract_plan(sol, prog, st, cs, ref);
            out.clamp_count += plan.clamp_count;

            meas = plant.step(plan, load_now);

            Eigen::VectorXd dev =
                meas.gen_power - ref.setpoints.row(0).transpose();
            dev(ref_gen) += meas.slack;
            out.j_gen_pu2 += dev.squaredNorm();
            out.slack_trace(k) = meas.slack;
            out.dcs_count += static_cast<int>(meas.events.size());
            for (const DcsEvent& ev : meas.events) out.dcs_energy += ev.energy;
            out.dcs_step_count(k) = static_cast<int>(meas.events.size());
            out.soc_trace.row(k) = meas.soc_act.transpose();
            out.temp_trace.row(k) = meas.temp_dev.transpose();
            out.gen_trace.row(k) = meas.gen_power.transpose();
            out.ref_trace.row(k) = ref.setpoints.row(0);
            out.steps = k + 1;

            st.gen_power = meas.gen_power;
            st.temp_dev = meas.temp_dev;
            st.loss_est = meas.loss;
            st.pch_prev = meas.p_ch;
            st.pdis_prev = meas.p_dis;
        }

        out.j_gen_mw2 = out.j_gen_pu2 * base * base;
        out.total_risk = out.risk_trace.sum();
    } catch (const std::exception& e) {
        out.status = TrialStatus::Failed;
        out.failure = e.what();
        const Index done = out.steps;
        out.risk_trace.conservativeResize(done);
        out.soc_trace.conservativeResize(done, Eigen::NoChange);
        out.temp_trace.conservativeResize(done, Eigen::NoChange);
        out.gen_trace.conservativeResize(done, Eigen::NoChange);
        out.ref_trace.conservativeResize(done, Eigen::NoChange);
        out.dcs_step_count.conservativeResize(done);
        out.j_gen_mw2 = out.j_gen_pu2 * sc.cs.base_mva * sc.cs.base_mva;
        out.total_risk = done > 0 ? out.risk_trace.sum() : 0.0;
    }
    return out;
}

namespace {

McSummary summarize(const std::vector<Strategy>& strategies,
                    const std::vector<std::vector<TrialResult>>& results,
                    std::uint64_t base_seed, int n_trials) {
    McSummary summary;
    summary.base_seed = base_seed;
    summary.n_trials = n_trials;

    for (std::size_t s = 0; s < strategies.size(); ++s) {
        StrategySummary row;
        row.strategy = strategies[s];
        row.trials = n_trials;
        double sum_mw = 0.0, sum_pu = 0.0, sum_dcs = 0.0, sum_dcs_e = 0.0, sum_risk = 0.0;
        int done = 0;
        for (const TrialResult& tr : results[s]) {
            if (tr.status != TrialStatus::Completed) {
                ++row.failures;
                continue;
            }
            ++done;
            sum_mw += tr.j_gen_mw2;
            sum_pu += tr.j_gen_pu2;
            sum_dcs += tr.dcs_count;
            sum_dcs_e += tr.dcs_energy;
            sum_risk += tr.total_risk;
        }
        if (done == 0) {
            const std::string reason =
                results[s].empty() ? "no trials" : results[s].front().failure;
            throw HarnessError(fmt::format("every {} trial failed; first reason: {}",
                                           to_string(strategies[s]), reason));
        }
        row.mean_mw2 = sum_mw / done;
        row.mean_pu2 = sum_pu / done;
        row.mean_dcs_count = sum_dcs / done;
        row.mean_dcs_energy = sum_dcs_e / done;
        row.mean_total_risk = sum_risk / done;
        double var_mw = 0.0, var_pu = 0.0;
        for (const TrialResult& tr : results[s]) {
            if (tr.status != TrialStatus::Completed) continue;
            var_mw += (tr.j_gen_mw2 - row.mean_mw2) * (tr.j_gen_mw2 - row.mean_mw2);
            var_pu += (tr.j_gen_pu2 - row.mean_pu2) * (tr.j_gen_pu2 - row.mean_pu2);
        }
        row.std_mw2 = std::sqrt(var_mw / done);
        row.std_pu2 = std::sqrt(var_pu / done);
        summary.strategies.push_back(row);
    }

    double robust_mean = std::numeric_limits<double>::quiet_NaN();
    for (const StrategySummary& row : summary.strategies)
        if (row.strategy == Strategy::Robust) robust_mean = row.mean_mw2;
    for (StrategySummary& row : summary.strategies)
        row.ratio_to_robust = row.mean_mw2 / robust_mean;  // NaN when absent

    return summary;
}

}  // namespace

McBatch run_monte_carlo(const ScenarioConfig& sc, const std::vector<Strategy>& strategies,
                        int n_trials, std::uint64_t base_seed, int jobs) {
    if (strategies.empty()) throw HarnessError("no strategies requested");
    if (n_trials < 1) throw HarnessError("need at least one trial");
    ScenarioConfig scenario = sc;
    scenario.finalize();

    McBatch batch;
    batch.strategies = strategies;
    batch.results.assign(strategies.size(), std::vector<TrialResult>(
                                                static_cast<std::size_t>(n_trials)));

    const std::size_t total = strategies.size() * static_cast<std::size_t>(n_trials);
    if (jobs < 1) jobs = static_cast<int>(std::thread::hardware_concurrency());
    if (jobs < 1) jobs = 1;
    jobs = static_cast<int>(std::min(static_cast<std::size_t>(jobs), total));

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t i = next.fetch_add(1); i < total; i = next.fetch_add(1)) {
            const std::size_t s = i / static_cast<std::size_t>(n_trials);
            const std::size_t t = i % static_cast<std::size_t>(n_trials);
            batch.results[s][t] =
                run_closed_loop(scenario, strategies[s], base_seed + t);
        }
    };

    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(jobs));
        for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (std::thread& th : pool) th.join();
    }

    batch.summary = summarize(strategies, batch.results, base_seed, n_trials);
    return batch;
}

std::vector<FrontierPoint> sweep_risk_cost(const ScenarioConfig& sc,
                                           const std::vector<double>& grid, int n_trials,
                                           std::uint64_t base_seed, int jobs) {
    if (grid.empty()) throw HarnessError("risk-cost grid is empty");
    for (double c : grid)
        if (!(c >= 0.0)) throw HarnessError("risk-cost grid values must be non-negative");

    std::vector<FrontierPoint> points;
    points.reserve(grid.size());
    for (double c : grid) {
        ScenarioConfig scenario = sc;
        scenario.mpc.c_risk =
            Eigen::VectorXd::Constant(static_cast<Index>(sc.cs.vess.size()), c);
        const McBatch batch =
            run_monte_carlo(scenario, {Strategy::RiskBased}, n_trials, base_seed, jobs);
        const StrategySummary& row = batch.summary.strategies.front();
        FrontierPoint pt;
        pt.c_risk = c;
        pt.trials = row.trials;
        pt.failures = row.failures;
        pt.mean_mw2 = row.mean_mw2;
        pt.mean_pu2 = row.mean_pu2;
        pt.mean_total_risk = row.mean_total_risk;
        points.push_back(pt);
    }
    return points;
}

std::vector<HistogramRow> histogram_j_gen(const McBatch& batch, double bin_width,
                                          double last_edge) {
    if (!(bin_width > 0.0) || !(last_edge > 0.0))
        throw HarnessError("histogram bins must have positive width and edge");
    const int regular = static_cast<int>(std::ceil(last_edge / bin_width));
    std::vector<HistogramRow> rows(static_cast<std::size_t>(regular) + 1);
    for (int b = 0; b < regular; ++b) {
        rows[static_cast<std::size_t>(b)].lo = b * bin_width;
        rows[static_cast<std::size_t>(b)].hi = std::min((b + 1) * bin_width, last_edge);
        rows[static_cast<std::size_t>(b)].counts.assign(batch.strategies.size(), 0);
    }
    rows.back().lo = last_edge;
    rows.back().hi = std::numeric_limits<double>::infinity();
    rows.back().counts.assign(batch.strategies.size(), 0);

    for (std::size_t s = 0; s < batch.strategies.size(); ++s) {
        for (const TrialResult& tr : batch.results[s]) {
            if (tr.status != TrialStatus::Completed) continue;
            std::size_t b;
            if (tr.j_gen_mw2 >= last_edge)
                b = rows.size() - 1;
            else
                b = static_cast<std::size_t>(tr.j_gen_mw2 / bin_width);
            ++rows[b].counts[s];
        }
    }
    return rows;
}

void write_trials_csv(const std::string& path, const McBatch& batch) {
    auto out = open_csv(path);
    fmt::print(out,
               "strategy,trial,seed,status,failure,steps,j_gen_mw2,j_gen_pu2,"
               "dcs_count,dcs_energy_puh,total_risk_puh,clamp_count,cold_restarts,"
               "mean_solve_time_s\n");
    for (std::size_t s = 0; s < batch.strategies.size(); ++s) {
        for (std::size_t t = 0; t < batch.results[s].size(); ++t) {
            const TrialResult& tr = batch.results[s][t];
            double mean_time = 0.0;
            for (double v : tr.solve_times) mean_time += v;
            if (!tr.solve_times.empty())
                mean_time /= static_cast<double>(tr.solve_times.size());
            fmt::print(out, "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                       to_string(batch.strategies[s]), t, tr.seed,
                       tr.status == TrialStatus::Completed ? "completed" : "failed",
                       csv_quote(tr.failure), tr.steps, tr.j_gen_mw2, tr.j_gen_pu2,
                       tr.dcs_count, tr.dcs_energy, tr.total_risk, tr.clamp_count,
                       tr.cold_restarts, mean_time);
        }
    }
}

void write_summary_csv(const std::string& path, const McSummary& summary) {
    auto out = open_csv(path);
    fmt::print(out,
               "strategy,trials,failures,mean_j_mw2,std_j_mw2,mean_j_pu2,std_j_pu2,"
               "ratio_to_robust_pct,mean_dcs_count,mean_dcs_energy_puh,mean_total_risk_puh\n");
    for (const StrategySummary& row : summary.strategies) {
        const std::string ratio = std::isnan(row.ratio_to_robust)
                                      ? std::string()
                                      : fmt::format("{}", 100.0 * row.ratio_to_robust);
        fmt::print(out, "{},{},{},{},{},{},{},{},{},{},{}\n", to_string(row.strategy),
                   row.trials, row.failures, row.mean_mw2, row.std_mw2, row.mean_pu2,
                   row.std_pu2, ratio, row.mean_dcs_count, row.mean_dcs_energy,
                   row.mean_total_risk);
    }
}

void write_frontier_csv(const std::string& path, const std::vector<FrontierPoint>& points) {
    auto out = open_csv(path);
    fmt::print(out, "c_risk,trials,failures,mean_j_mw2,mean_j_pu2,mean_total_risk_puh\n");
    for (const FrontierPoint& pt : points)
        fmt::print(out, "{},{},{},{},{},{}\n", pt.c_risk, pt.trials, pt.failures,
                   pt.mean_mw2, pt.mean_pu2, pt.mean_total_risk);
}

void write_trace_csv(const std::string& path, const TrialResult& trial,
                     const NetworkCase& cs) {
    auto out = open_csv(path);
    const double base = cs.base_mva;
    fmt::print(out, "step,time_s,dcs_events,risk_puh");
    for (Index g = 0; g < trial.gen_trace.cols(); ++g) fmt::print(out, ",gen{}_mw", g);
    for (Index g = 0; g < trial.ref_trace.cols(); ++g) fmt::print(out, ",ref{}_mw", g);
    for (Index v = 0; v < trial.soc_trace.cols(); ++v) fmt::print(out, ",soc{}_mwh", v);
    for (Index e = 0; e < trial.temp_trace.cols(); ++e) fmt::print(out, ",tdev{}_c", e);
    fmt::print(out, "\n");
    for (int k = 0; k < trial.steps; ++k) {
        fmt::print(out, "{},{},{},{}", k, (k + 1) * trial.ts_seconds,
                   trial.dcs_step_count(k), trial.risk_trace(k));
        for (Index g = 0; g < trial.gen_trace.cols(); ++g)
            fmt::print(out, ",{}", trial.gen_trace(k, g) * base);
        for (Index g = 0; g < trial.ref_trace.cols(); ++g)
            fmt::print(out, ",{}", trial.ref_trace(k, g) * base);
        for (Index v = 0; v < trial.soc_trace.cols(); ++v)
            fmt::print(out, ",{}", trial.soc_trace(k, v) * base);
        for (Index e = 0; e < trial.temp_trace.cols(); ++e)
            fmt::print(out, ",{}", trial.temp_trace(k, e));
        fmt::print(out, "\n");
    }
}

void write_histogram_csv(const std::string& path, const McBatch& batch, double bin_width,
                         double last_edge) {
    const auto rows = histogram_j_gen(batch, bin_width, last_edge);
    auto out = open_csv(path);
    fmt::print(out, "lo,hi");
    for (Strategy s : batch.strategies) fmt::print(out, ",{}", to_string(s));
    fmt::print(out, "\n");
    for (const HistogramRow& row : rows) {
        if (std::isinf(row.hi))
            fmt::print(out, "{},inf", row.lo);
        else
            fmt::print(out, "{},{}", row.lo, row.hi);
        for (int c : row.counts) fmt::print(out, ",{}", c);
        fmt::print(out, "\n");
    }
}

}  // namespace vessmpc
