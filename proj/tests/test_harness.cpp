#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "vessmpc/harness.hpp"

using namespace vessmpc;

namespace {

/// Two buses joined by one comfortable line, two generators, one small store.
/// Big enough to exercise every harness path, small enough that a closed-loop
/// trial costs milliseconds.
NetworkCase small_case() {
    NetworkCase cs;
    cs.base_mva = 100.0;
    cs.buses = {{1, 50.0, "A"}, {2, 70.0, "A"}};
    Branch br;
    br.from_bus = 1;
    br.to_bus = 2;
    br.susceptance = 10.0;
    br.resistance = 0.01;
    br.ampacity = 2.0;
    br.temp_limit = 80.0;
    br.thermal_time_constant = 600.0;
    br.thermal_resistance = 50.0;
    br.ambient = 40.0;
    cs.branches = {br};
    cs.generators = {{1, 0.0, 200.0, 100.0, 1.0, 0.6}, {2, 0.0, 150.0, 80.0, 1.0, 0.4}};
    cs.vess = {{2, 20.0, 0.0, 10.0, 10.0, 30.0, 30.0, 0.95, 0.95, 0.5, 0.05, 0.10, 0.0}};
    cs.validate();
    return cs;
}

ScenarioConfig small_scenario(int steps = 4, int horizon = 6) {
    ScenarioConfig sc;
    sc.cs = small_case();
    sc.mpc.horizon = horizon;
    sc.unc = UncertaintySpec::from_case(sc.cs, 0.05, DistributionClass::Unimodal, 0.5);
    sc.steps = steps;
    return sc;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace

TEST_CASE("redispatch schedule brackets the transition") {
    const NetworkCase cs = small_case();
    const Disturbance d = step_net_load_drop(cs, 60.0, 0.10);
    const EdSchedule sched = redispatch_schedule(cs, d, 120.0, 240.0);
    REQUIRE(sched.size() == 2);
    CHECK(sched[0].first == 120.0);
    CHECK(sched[1].first == 240.0);
    REQUIRE(sched[0].second.size() == 2);
    REQUIRE(sched[1].second.size() == 2);
    // the post-drop dispatch serves less demand than the nominal one
    CHECK(sched[1].second.sum() < sched[0].second.sum());

    CHECK_THROWS_AS(redispatch_schedule(cs, d, -1.0, 10.0), HarnessError);
    CHECK_THROWS_AS(redispatch_schedule(cs, d, 100.0, 100.0), HarnessError);
}

TEST_CASE("scenario finalize fills the nominal schedule and validates") {
    ScenarioConfig sc = small_scenario();
    sc.finalize();
    REQUIRE(sc.schedule.size() == 1);
    CHECK(sc.schedule[0].first == 0.0);
    REQUIRE(sc.schedule[0].second.size() == 2);
    // nominal dispatch covers the 1.2 p.u. load plus losses
    CHECK(sc.schedule[0].second.sum() > 1.2);

    ScenarioConfig no_steps = small_scenario();
    no_steps.steps = 0;
    CHECK_THROWS_AS(no_steps.finalize(), HarnessError);

    ScenarioConfig wrong_fleet = small_scenario();
    wrong_fleet.unc.delta_s.assign(2, 0.0);
    wrong_fleet.unc.delta_c.assign(2, 0.0);
    wrong_fleet.unc.rho_cs.assign(2, 0.0);
    CHECK_THROWS_AS(wrong_fleet.finalize(), HarnessError);

    ScenarioConfig wrong_schedule = small_scenario();
    wrong_schedule.schedule = {{0.0, Eigen::VectorXd::Zero(5)}};
    CHECK_THROWS_AS(wrong_schedule.finalize(), HarnessError);
}

TEST_CASE("full information with no disturbance tracks the reference exactly") {
    ScenarioConfig sc = small_scenario(5);
    sc.finalize();
    const TrialResult tr = run_closed_loop(sc, Strategy::FullInformation, 3);
    REQUIRE(tr.status == TrialStatus::Completed);
    REQUIRE(tr.steps == 5);
    CHECK(tr.j_gen_pu2 < 1e-8);
    CHECK(tr.dcs_count == 0);
    CHECK(tr.dcs_energy == 0.0);
    CHECK(tr.total_risk == 0.0);  // true state never leaves the band at rest
    CHECK(tr.solve_times.size() == 5);
    CHECK(tr.solve_iters.size() == 5);
}

TEST_CASE("closed loop is deterministic for a fixed seed") {
    ScenarioConfig sc = small_scenario(4);
    sc.disturbance = step_net_load_drop(sc.cs, 60.0, 0.10);
    sc.finalize();

    const TrialResult a = run_closed_loop(sc, Strategy::Deterministic, 42);
    const TrialResult b = run_closed_loop(sc, Strategy::Deterministic, 42);
    REQUIRE(a.status == TrialStatus::Completed);
    CHECK(a.j_gen_pu2 == b.j_gen_pu2);  // bitwise, not approximate
    CHECK(a.dcs_count == b.dcs_count);
    CHECK(a.dcs_energy == b.dcs_energy);
    CHECK((a.soc_trace - b.soc_trace).norm() == 0.0);
    CHECK((a.gen_trace - b.gen_trace).norm() == 0.0);
    CHECK((a.risk_trace - b.risk_trace).norm() == 0.0);
    CHECK(a.solve_iters == b.solve_iters);

    // a persistent estimation error instead of fresh draws still replays
    sc.reestimate_each_step = false;
    const TrialResult c = run_closed_loop(sc, Strategy::Deterministic, 42);
    const TrialResult d = run_closed_loop(sc, Strategy::Deterministic, 42);
    REQUIRE(c.status == TrialStatus::Completed);
    CHECK(c.j_gen_pu2 == d.j_gen_pu2);
    CHECK(c.j_gen_pu2 != a.j_gen_pu2);  // a different error stream
}

TEST_CASE("a trial that cannot solve is captured, not thrown") {
    ScenarioConfig sc = small_scenario(3);
    sc.finalize();
    sc.solver.max_iter = 1;
    sc.solver.eps_accept = 0.0;  // no stall fallback either
    sc.solver.eps_abs = 1e-12;
    sc.solver.eps_rel = 1e-12;

    const TrialResult tr = run_closed_loop(sc, Strategy::Robust, 1);
    CHECK(tr.status == TrialStatus::Failed);
    CHECK(tr.failure.find("not solved") != std::string::npos);
    CHECK(tr.steps == 0);
    CHECK(tr.soc_trace.rows() == 0);
    CHECK(tr.cold_restarts == 1);  // it tried once more from scratch

    // and when every trial of a strategy fails, the batch refuses to summarize
    CHECK_THROWS_AS(run_monte_carlo(sc, {Strategy::Robust}, 2, 1, 1), HarnessError);
}

TEST_CASE("batch argument validation") {
    const ScenarioConfig sc = small_scenario();
    CHECK_THROWS_AS(run_monte_carlo(sc, {}, 2, 1, 1), HarnessError);
    CHECK_THROWS_AS(run_monte_carlo(sc, {Strategy::Robust}, 0, 1, 1), HarnessError);
}

TEST_CASE("worker count changes neither results nor the summary bytes") {
    ScenarioConfig sc = small_scenario(3);
    sc.disturbance = step_net_load_drop(sc.cs, 60.0, 0.10);
    const std::vector<Strategy> strats = {Strategy::Deterministic,
                                          Strategy::FullInformation};

    const McBatch b1 = run_monte_carlo(sc, strats, 3, 7, 1);
    const McBatch b2 = run_monte_carlo(sc, strats, 3, 7, 2);
    for (std::size_t s = 0; s < strats.size(); ++s) {
        for (std::size_t t = 0; t < 3; ++t) {
            CHECK(b1.results[s][t].seed == 7 + t);  // paired across strategies
            CHECK(b1.results[s][t].j_gen_pu2 == b2.results[s][t].j_gen_pu2);
            CHECK(b1.results[s][t].dcs_count == b2.results[s][t].dcs_count);
        }
    }
    write_summary_csv("tmp_harness_sum1.csv", b1.summary);
    write_summary_csv("tmp_harness_sum2.csv", b2.summary);
    CHECK(slurp("tmp_harness_sum1.csv") == slurp("tmp_harness_sum2.csv"));
}

TEST_CASE("single-trial batches have zero spread and a clean ratio") {
    ScenarioConfig sc = small_scenario(2);
    const McBatch rb = run_monte_carlo(sc, {Strategy::Robust}, 1, 3, 1);
    const StrategySummary& row = rb.summary.strategies.front();
    CHECK(row.trials == 1);
    CHECK(row.failures == 0);
    CHECK(row.std_mw2 == 0.0);
    CHECK(row.std_pu2 == 0.0);
    CHECK(row.ratio_to_robust == 1.0);
    CHECK(row.mean_mw2 == rb.results[0][0].j_gen_mw2);

    const McBatch det = run_monte_carlo(sc, {Strategy::Deterministic}, 1, 3, 1);
    CHECK(std::isnan(det.summary.strategies.front().ratio_to_robust));
}

TEST_CASE("all four strategies complete a disturbed scenario") {
    ScenarioConfig sc = small_scenario(4);
    sc.disturbance = step_net_load_drop(sc.cs, 60.0, 0.10);
    sc.schedule = redispatch_schedule(sc.cs, sc.disturbance, 120.0, 180.0);
    const std::vector<Strategy> strats = {Strategy::Deterministic, Strategy::Robust,
                                          Strategy::RiskBased,
                                          Strategy::FullInformation};

    const McBatch batch = run_monte_carlo(sc, strats, 2, 5, 2);
    REQUIRE(batch.summary.strategies.size() == 4);
    for (const StrategySummary& row : batch.summary.strategies) {
        CHECK(row.failures == 0);
        CHECK(std::isfinite(row.mean_mw2));
        CHECK(row.mean_mw2 >= 0.0);
        // the MW^2 and p.u.^2 figures are the same number on the 100 MVA base
        CHECK(row.mean_mw2 == doctest::Approx(row.mean_pu2 * 1e4).epsilon(1e-12));
        if (row.strategy == Strategy::Robust) CHECK(row.ratio_to_robust == 1.0);
    }

    // every completed trial lands in exactly one histogram bin
    const auto rows = histogram_j_gen(batch, 200.0, 2000.0);
    for (std::size_t s = 0; s < strats.size(); ++s) {
        int total = 0;
        for (const HistogramRow& r : rows) total += r.counts[s];
        CHECK(total == 2);
    }
}

TEST_CASE("risk-cost sweep emits the grid in order") {
    ScenarioConfig sc = small_scenario(2);
    sc.disturbance = step_net_load_drop(sc.cs, 60.0, 0.10);
    const auto pts = sweep_risk_cost(sc, {0.0, 5.0}, 1, 11, 1);
    REQUIRE(pts.size() == 2);
    CHECK(pts[0].c_risk == 0.0);
    CHECK(pts[1].c_risk == 5.0);
    for (const FrontierPoint& pt : pts) {
        CHECK(pt.trials == 1);
        CHECK(pt.failures == 0);
        CHECK(std::isfinite(pt.mean_mw2));
    }
    CHECK_THROWS_AS(sweep_risk_cost(sc, {}, 1, 1, 1), HarnessError);
    CHECK_THROWS_AS(sweep_risk_cost(sc, {-1.0}, 1, 1, 1), HarnessError);
}

TEST_CASE("histogram bins pool the tail and respect the last edge") {
    McBatch batch;
    batch.strategies = {Strategy::Deterministic};
    batch.results.resize(1);
    for (double j : {0.0, 300.0, 499.99, 500.0, 2500.0}) {
        TrialResult tr;
        tr.j_gen_mw2 = j;
        batch.results[0].push_back(tr);
    }
    TrialResult failed;
    failed.status = TrialStatus::Failed;
    failed.j_gen_mw2 = 100.0;  // must not be counted
    batch.results[0].push_back(failed);

    const auto rows = histogram_j_gen(batch, 300.0, 500.0);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].lo == 0.0);
    CHECK(rows[0].hi == 300.0);
    CHECK(rows[1].lo == 300.0);
    CHECK(rows[1].hi == 500.0);  // capped at the edge, not 600
    CHECK(rows[2].lo == 500.0);
    CHECK(std::isinf(rows[2].hi));
    CHECK(rows[0].counts[0] == 1);
    CHECK(rows[1].counts[0] == 2);
    CHECK(rows[2].counts[0] == 2);

    CHECK_THROWS_AS(histogram_j_gen(batch, 0.0, 500.0), HarnessError);
    CHECK_THROWS_AS(histogram_j_gen(batch, 300.0, -1.0), HarnessError);
}

TEST_CASE("trials csv golden") {
    McBatch batch;
    batch.strategies = {Strategy::Deterministic, Strategy::Robust};
    batch.results.resize(2);

    TrialResult t00;
    t00.strategy = Strategy::Deterministic;
    t00.seed = 11;
    t00.steps = 2;
    t00.j_gen_mw2 = 50.0;
    t00.j_gen_pu2 = 0.005;
    t00.dcs_count = 1;
    t00.dcs_energy = 0.25;
    t00.total_risk = 1.5;
    t00.clamp_count = 3;
    t00.solve_times = {0.5, 1.5};
    batch.results[0].push_back(t00);

    TrialResult t01;
    t01.strategy = Strategy::Deterministic;
    t01.seed = 12;
    t01.status = TrialStatus::Failed;
    t01.failure = "bad, \"thing\"";
    t01.steps = 1;
    batch.results[0].push_back(t01);

    TrialResult t10;
    t10.strategy = Strategy::Robust;
    t10.seed = 11;
    t10.steps = 2;
    t10.j_gen_mw2 = 250.0;
    t10.j_gen_pu2 = 0.025;
    t10.total_risk = 0.5;
    t10.cold_restarts = 1;
    t10.solve_times = {2.0};
    batch.results[1].push_back(t10);

    write_trials_csv("tmp_harness_trials.csv", batch);
    CHECK(slurp("tmp_harness_trials.csv") ==
          "strategy,trial,seed,status,failure,steps,j_gen_mw2,j_gen_pu2,"
          "dcs_count,dcs_energy_puh,total_risk_puh,clamp_count,cold_restarts,"
          "mean_solve_time_s\n"
          "deterministic,0,11,completed,\"\",2,50,0.005,1,0.25,1.5,3,0,1\n"
          "deterministic,1,12,failed,\"bad, \"\"thing\"\"\",1,0,0,0,0,0,0,0,0\n"
          "robust,0,11,completed,\"\",2,250,0.025,0,0,0.5,0,1,2\n");

    write_histogram_csv("tmp_harness_hist.csv", batch, 200.0, 400.0);
    CHECK(slurp("tmp_harness_hist.csv") == "lo,hi,deterministic,robust\n"
                                           "0,200,1,0\n"
                                           "200,400,0,1\n"
                                           "400,inf,0,0\n");

    CHECK_THROWS_AS(write_trials_csv("/nonexistent-dir-xyz/out.csv", batch),
                    HarnessError);
}

TEST_CASE("summary and frontier csv goldens") {
    McSummary sum;
    sum.base_seed = 5;
    sum.n_trials = 2;
    StrategySummary rob;
    rob.strategy = Strategy::Robust;
    rob.trials = 2;
    rob.mean_mw2 = 400.0;
    rob.std_mw2 = 25.0;
    rob.mean_pu2 = 0.04;
    rob.std_pu2 = 0.0025;
    rob.ratio_to_robust = 1.0;
    rob.mean_dcs_count = 0.5;
    rob.mean_dcs_energy = 0.125;
    rob.mean_total_risk = 2.5;
    StrategySummary det;
    det.strategy = Strategy::Deterministic;
    det.trials = 2;
    det.failures = 1;
    det.mean_mw2 = 500.0;
    det.mean_pu2 = 0.05;
    det.ratio_to_robust = 1.25;
    det.mean_dcs_count = 1.5;
    det.mean_total_risk = 3.0;
    sum.strategies = {rob, det};

    write_summary_csv("tmp_harness_summary.csv", sum);
    CHECK(slurp("tmp_harness_summary.csv") ==
          "strategy,trials,failures,mean_j_mw2,std_j_mw2,mean_j_pu2,std_j_pu2,"
          "ratio_to_robust_pct,mean_dcs_count,mean_dcs_energy_puh,mean_total_risk_puh\n"
          "robust,2,0,400,25,0.04,0.0025,100,0.5,0.125,2.5\n"
          "deterministic,2,1,500,0,0.05,0,125,1.5,0,3\n");

    // without a Robust batch the ratio column is left empty
    McSummary lone;
    lone.n_trials = 1;
    StrategySummary only;
    only.strategy = Strategy::Deterministic;
    only.trials = 1;
    only.mean_mw2 = 7.0;
    only.mean_pu2 = 0.0007;
    only.ratio_to_robust = std::numeric_limits<double>::quiet_NaN();
    lone.strategies = {only};
    write_summary_csv("tmp_harness_summary_lone.csv", lone);
    CHECK(slurp("tmp_harness_summary_lone.csv") ==
          "strategy,trials,failures,mean_j_mw2,std_j_mw2,mean_j_pu2,std_j_pu2,"
          "ratio_to_robust_pct,mean_dcs_count,mean_dcs_energy_puh,mean_total_risk_puh\n"
          "deterministic,1,0,7,0,0.0007,0,,0,0,0\n");

    std::vector<FrontierPoint> pts(2);
    pts[0].c_risk = 1.5;
    pts[0].trials = 2;
    pts[0].mean_mw2 = 10.25;
    pts[0].mean_pu2 = 0.001025;
    pts[0].mean_total_risk = 0.75;
    pts[1].trials = 1;
    pts[1].failures = 1;
    pts[1].mean_mw2 = 2.0;
    pts[1].mean_pu2 = 0.0002;
    write_frontier_csv("tmp_harness_frontier.csv", pts);
    CHECK(slurp("tmp_harness_frontier.csv") ==
          "c_risk,trials,failures,mean_j_mw2,mean_j_pu2,mean_total_risk_puh\n"
          "1.5,2,0,10.25,0.001025,0.75\n"
          "0,1,1,2,0.0002,0\n");
}

TEST_CASE("trace csv golden") {
    const NetworkCase cs = small_case();
    TrialResult tr;
    tr.steps = 1;
    tr.ts_seconds = 60.0;
    tr.risk_trace = Eigen::VectorXd::Constant(1, 0.5);
    tr.dcs_step_count = Eigen::VectorXi::Constant(1, 2);
    tr.gen_trace.resize(1, 2);
    tr.gen_trace << 1.5, 0.25;
    tr.ref_trace.resize(1, 2);
    tr.ref_trace << 1.4, 0.35;
    tr.soc_trace = Eigen::MatrixXd::Constant(1, 1, 0.1);
    tr.temp_trace = Eigen::MatrixXd::Constant(1, 1, -5.0);

    write_trace_csv("tmp_harness_trace.csv", tr, cs);
    CHECK(slurp("tmp_harness_trace.csv") ==
          "step,time_s,dcs_events,risk_puh,gen0_mw,gen1_mw,ref0_mw,ref1_mw,"
          "soc0_mwh,tdev0_c\n"
          "0,60,2,0.5,150,25,140,35,10,-5\n");
}
