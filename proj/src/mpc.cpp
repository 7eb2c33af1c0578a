#include "vessmpc/mpc.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/SparseCore>
#include <fmt/format.h>

namespace vessmpc {

namespace {

using Eigen::Index;

std::string lower_dashed(std::string s) {
    for (char& c : s) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (c == '_') c = '-';
    }
    return s;
}

/// Case ratings converted to p.u. (powers) and p.u. per step (ramps).
struct PuRatings {
    Eigen::VectorXd gen_min, gen_max, gen_ramp;
    Eigen::VectorXd pch_max, pdis_max, rch, rdis;
    Eigen::VectorXd cap_min;  // p.u.-h
    Eigen::VectorXd eta_ch, eta_dis;
};

PuRatings pu_ratings(const NetworkCase& cs, double ts_seconds) {
    const double ts_min = ts_seconds / 60.0;
    const Index ng = static_cast<Index>(cs.generators.size());
    const Index nv = static_cast<Index>(cs.vess.size());
    PuRatings r;
    r.gen_min.resize(ng);
    r.gen_max.resize(ng);
    r.gen_ramp.resize(ng);
    for (Index g = 0; g < ng; ++g) {
        const Generator& gen = cs.generators[static_cast<std::size_t>(g)];
        r.gen_min(g) = cs.to_pu(gen.p_min);
        r.gen_max(g) = cs.to_pu(gen.p_max);
        r.gen_ramp(g) = cs.to_pu(gen.ramp_limit * ts_min);
    }
    r.pch_max.resize(nv);
    r.pdis_max.resize(nv);
    r.rch.resize(nv);
    r.rdis.resize(nv);
    r.cap_min.resize(nv);
    r.eta_ch.resize(nv);
    r.eta_dis.resize(nv);
    for (Index v = 0; v < nv; ++v) {
        const VessSpec& vs = cs.vess[static_cast<std::size_t>(v)];
        r.pch_max(v) = cs.to_pu(vs.p_ch_max);
        r.pdis_max(v) = cs.to_pu(vs.p_dis_max);
        r.rch(v) = cs.to_pu(vs.ramp_ch * ts_min);
        r.rdis(v) = cs.to_pu(vs.ramp_dis * ts_min);
        r.cap_min(v) = cs.to_pu(vs.cap_min);
        r.eta_ch(v) = vs.eff_ch;
        r.eta_dis(v) = vs.eff_dis;
    }
    return r;
}

/// Reachable SOC paths from the current estimate given the committed powers,
/// used to widen the SOC boxes when a noisy estimate lands outside its band:
/// the lowest path (charging ramping off, discharge ramping up) and the
/// highest path (the mirror image). The unwind uses half of the feasible
/// effort, not the extreme rates: a box pinned to the extreme path leaves the
/// extreme trajectory as the only feasible one, and such zero-interior
/// programs stall the splitting solver. With the half-effort path as the
/// bound, the faster unwinds remain strictly interior while the store is
/// still forced back to its band in finitely many steps. Momentum already
/// beyond the half-effort target is held, never cut discontinuously.
struct ReachEnvelope {
    Eigen::VectorXd lowest, highest;
};

ReachEnvelope reach_envelope(double soc0, double pch0, double pdis0, const PuRatings& r,
                             Index v, double ts_h, Index horizon) {
    constexpr double kGentle = 0.5;
    const double rch = kGentle * r.rch(v), rdis = kGentle * r.rdis(v);
    const double ch_cap = std::max(kGentle * r.pch_max(v), std::min(pch0, r.pch_max(v)));
    const double dis_cap =
        std::max(kGentle * r.pdis_max(v), std::min(pdis0, r.pdis_max(v)));
    const double eta_c = r.eta_ch(v), eta_d = r.eta_dis(v);
    ReachEnvelope env;
    env.lowest.resize(horizon);
    env.highest.resize(horizon);
    double pc_dn = pch0, pd_up = pdis0, s_lo = soc0;
    double pc_up = pch0, pd_dn = pdis0, s_hi = soc0;
    for (Index l = 0; l < horizon; ++l) {
        pc_dn = std::max(0.0, pc_dn - rch);
        pd_up = std::min(dis_cap, pd_up + rdis);
        s_lo += ts_h * (eta_c * pc_dn - pd_up / eta_d);
        env.lowest(l) = s_lo;
        pc_up = std::min(ch_cap, pc_up + rch);
        pd_dn = std::max(0.0, pd_dn - rdis);
        s_hi += ts_h * (eta_c * pc_up - pd_dn / eta_d);
        env.highest(l) = s_hi;
    }
    return env;
}

}  // namespace

Strategy parse_strategy(const std::string& name) {
    const std::string s = lower_dashed(name);
    if (s == "deterministic" || s == "det") return Strategy::Deterministic;
    if (s == "robust") return Strategy::Robust;
    if (s == "risk-based" || s == "riskbased" || s == "rb" || s == "rb-cc" || s == "rbcc")
        return Strategy::RiskBased;
    if (s == "full-information" || s == "fullinformation" || s == "full-info" ||
        s == "fullinfo" || s == "fi")
        return Strategy::FullInformation;
    throw MpcError(fmt::format("unknown strategy '{}'", name));
}

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::Deterministic: return "deterministic";
        case Strategy::Robust: return "robust";
        case Strategy::RiskBased: return "risk-based";
        case Strategy::FullInformation: return "full-information";
    }
    return "unknown";
}

void MpcConfig::finalize(const NetworkCase& cs) {
    const Index ng = static_cast<Index>(cs.generators.size());
    const Index nl = static_cast<Index>(cs.branches.size());
    const Index nv = static_cast<Index>(cs.vess.size());
    if (horizon < 1) throw MpcError("horizon must be at least 1 step");
    if (!(ts_seconds > 0.0)) throw MpcError("step length must be positive");
    if (loss_cuts < 1) throw MpcError("need at least one loss cut");
    if (loss_tiebreak < 0.0) throw MpcError("loss tie-break weight must be non-negative");
    if (!(margin_growth > 0.0)) throw MpcError("margin growth must be positive");
    if (!(epsilon > 0.0) || epsilon > 0.5)
        throw MpcError("epsilon must lie in (0, 0.5]");
    if (c_gen.size() == 0) {
        c_gen.resize(ng);
        for (Index g = 0; g < ng; ++g)
            c_gen(g) = cs.generators[static_cast<std::size_t>(g)].tracking_cost;
    }
    if (c_temp.size() == 0) c_temp = Eigen::VectorXd::Constant(nl, 100.0);
    if (c_risk.size() == 0) c_risk = Eigen::VectorXd::Constant(nv, 10.0);
    if (c_gen.size() != ng || c_temp.size() != nl || c_risk.size() != nv)
        throw MpcError("cost vector sizes do not match the case");
    if ((c_gen.array() < 0).any() || (c_temp.array() < 0).any() || (c_risk.array() < 0).any())
        throw MpcError("cost weights must be non-negative");
}

void MpcState::validate(const NetworkCase& cs, int horizon) const {
    const Index ng = static_cast<Index>(cs.generators.size());
    const Index nb = static_cast<Index>(cs.buses.size());
    const Index nl = static_cast<Index>(cs.branches.size());
    const Index nv = static_cast<Index>(cs.vess.size());
    if (gen_power.size() != ng) throw MpcError("gen_power size does not match the case");
    if (soc_est.size() != nv || cap_est.size() != nv || pch_prev.size() != nv ||
        pdis_prev.size() != nv)
        throw MpcError("VESS state vector size does not match the case");
    if (temp_dev.size() != nl || loss_est.size() != nl)
        throw MpcError("line state vector size does not match the case");
    if (load_forecast.rows() != horizon || load_forecast.cols() != nb)
        throw MpcError(fmt::format("load forecast must be {} x {}", horizon, nb));
    if (!gen_power.allFinite() || !soc_est.allFinite() || !cap_est.allFinite() ||
        !temp_dev.allFinite() || !loss_est.allFinite() || !pch_prev.allFinite() ||
        !pdis_prev.allFinite() || !load_forecast.allFinite())
        throw MpcError("state contains non-finite values");
    if ((loss_est.array() < -1e-12).any()) throw MpcError("loss feedback must be non-negative");
    if ((cap_est.array() <= 0).any()) throw MpcError("capacity estimates must be positive");
}

ReferenceTrajectory build_reference(const EdSchedule& schedule, double ts_seconds,
                                    int horizon, double now_seconds) {
    if (schedule.empty()) throw MpcError("dispatch schedule is empty");
    if (horizon < 1) throw MpcError("horizon must be at least 1 step");
    if (!(ts_seconds > 0.0)) throw MpcError("step length must be positive");
    EdSchedule sched = schedule;
    std::stable_sort(sched.begin(), sched.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    const Index ng = sched.front().second.size();
    for (const auto& [t, p] : sched) {
        (void)t;
        if (p.size() != ng) throw MpcError("schedule setpoint sizes differ");
    }
    ReferenceTrajectory ref;
    ref.setpoints.resize(horizon, ng);
    for (int l = 0; l < horizon; ++l) {
        const double t = now_seconds + l * ts_seconds;
        if (t <= sched.front().first) {
            ref.setpoints.row(l) = sched.front().second.transpose();
            continue;
        }
        if (t >= sched.back().first) {
            ref.setpoints.row(l) = sched.back().second.transpose();
            continue;
        }
        std::size_t i = 0;
        while (i + 1 < sched.size() && sched[i + 1].first <= t) ++i;
        const double t0 = sched[i].first, t1 = sched[i + 1].first;
        if (t1 - t0 <= 0.0) {
            ref.setpoints.row(l) = sched[i + 1].second.transpose();
        } else {
            const double w = (t - t0) / (t1 - t0);
            ref.setpoints.row(l) =
                ((1.0 - w) * sched[i].second + w * sched[i + 1].second).transpose();
        }
    }
    return ref;
}

StrategyBounds strategy_bounds(Strategy strategy, const NetworkCase& cs,
                               const Eigen::VectorXd& cap_est, const UncertaintySpec& u) {
    const Index nv = static_cast<Index>(cs.vess.size());
    if (cap_est.size() != nv) throw MpcError("capacity estimate size does not match the case");
    if (static_cast<Index>(u.size()) != nv)
        throw MpcError("uncertainty spec size does not match the case");
    const double f_inv = safety_factor(u.dist, u.epsilon);
    StrategyBounds b;
    b.lower.resize(nv);
    b.upper.resize(nv);
    b.robust_lower.resize(nv);
    b.robust_upper.resize(nv);
    for (Index v = 0; v < nv; ++v) {
        const std::size_t vi = static_cast<std::size_t>(v);
        const VessSpec& vs = cs.vess[vi];
        const double cap_lo = vs.cap_min;
        const double rho = u.correlation_factor_two ? 2.0 * u.rho_cs[vi] : u.rho_cs[vi];
        const double rob_up = robust_bound(cap_est(v), u.delta_s[vi], u.delta_c[vi], rho, f_inv);
        const double margin = cap_est(v) - rob_up;
        const double rob_lo = cap_lo + margin;
        switch (strategy) {
            case Strategy::Deterministic:
            case Strategy::FullInformation:
                b.lower(v) = cap_lo;
                b.upper(v) = cap_est(v);
                b.robust_lower(v) = cap_lo;
                b.robust_upper(v) = cap_est(v);
                break;
            case Strategy::Robust:
                b.lower(v) = rob_lo;
                b.upper(v) = rob_up;
                b.robust_lower(v) = rob_lo;
                b.robust_upper(v) = rob_up;
                break;
            case Strategy::RiskBased:
                b.lower(v) = cap_lo;
                b.upper(v) = cap_est(v);
                b.robust_lower(v) = rob_lo;
                b.robust_upper(v) = rob_up;
                break;
        }
    }
    return b;
}

VariableLayout::VariableLayout(int horizon, Index n_gen, Index n_bus, Index n_line,
                               Index n_vess, bool with_risk)
    : horizon_(horizon), ng_(n_gen), nb_(n_bus), nl_(n_line), nv_(n_vess), risk_(with_risk) {
    if (horizon < 1) throw MpcError("horizon must be at least 1 step");
    if (n_gen < 1 || n_bus < 1) throw MpcError("layout needs at least one generator and bus");
    if (n_line < 0 || n_vess < 0) throw MpcError("entity counts must be non-negative");
    stride_ = ng_ + nb_ + 4 * nl_ + 3 * nv_ + (risk_ ? nv_ : 0);
}

Eigen::Index VariableLayout::risk(int l, Index v) const {
    if (!risk_) throw MpcError("layout has no risk variables");
    return base(l) + ng_ + nb_ + 4 * nl_ + 3 * nv_ + v;
}

std::string VariableLayout::report() const {
    std::string out = fmt::format("horizon {} steps, {} variables per step, {} total\n",
                                  horizon_, stride_, count());
    Index at = 0;
    auto block = [&](const char* name, Index width) {
        out += fmt::format("  {:<6} [{:>6}, {:>6})  width {}\n", name, at, at + width, width);
        at += width;
    };
    block("gen", ng_);
    block("theta", nb_);
    block("flow", nl_);
    block("loss", nl_);
    block("dtemp", nl_);
    block("dhat", nl_);
    block("pch", nv_);
    block("pdis", nv_);
    block("soc", nv_);
    if (risk_) block("risk", nv_);
    return out;
}

AssembledQp assemble(const MpcState& state, const ReferenceTrajectory& ref,
                     const NetworkCase& cs, const MpcConfig& config,
                     const StrategyBounds& bounds) {
    AssembledQp out;
    out.config = config;
    out.config.finalize(cs);
    const MpcConfig& cfg = out.config;
    state.validate(cs, cfg.horizon);

    const Index ng = static_cast<Index>(cs.generators.size());
    const Index nb = static_cast<Index>(cs.buses.size());
    const Index nl = static_cast<Index>(cs.branches.size());
    const Index nv = static_cast<Index>(cs.vess.size());
    const int M = cfg.horizon;
    const int K = cfg.loss_cuts;
    const bool rb = cfg.strategy == Strategy::RiskBased;
    out.layout = VariableLayout(M, ng, nb, nl, nv, rb);
    const VariableLayout& L = out.layout;

    RowMap& rm = out.rows;
    rm.balance = 0;
    rm.flowdef = rm.balance + nb;
    rm.cuts = rm.flowdef + nl;
    rm.thermal = rm.cuts + static_cast<Index>(K) * nl;
    rm.split = rm.thermal + nl;
    rm.gen_ramp = rm.split + nl;
    rm.ch_ramp = rm.gen_ramp + ng;
    rm.dis_ramp = rm.ch_ramp + nv;
    rm.soc_dyn = rm.dis_ramp + nv;
    rm.ref_angle = rm.soc_dyn + nv;
    rm.risk_upper = rm.ref_angle + 1;
    rm.risk_lower = rm.risk_upper + (rb ? nv : 0);
    rm.per_step = rm.risk_lower + (rb ? nv : 0);
    const Index dyn_rows = rm.per_step * M;
    rm.box_gen = dyn_rows;
    rm.box_loss = rm.box_gen + static_cast<Index>(M) * ng;
    rm.box_dhat = rm.box_loss + static_cast<Index>(M) * nl;
    rm.box_pch = rm.box_dhat + static_cast<Index>(M) * nl;
    rm.box_pdis = rm.box_pch + static_cast<Index>(M) * nv;
    rm.box_soc = rm.box_pdis + static_cast<Index>(M) * nv;
    rm.box_risk = rm.box_soc + static_cast<Index>(M) * nv;
    rm.total = rm.box_risk + (rb ? static_cast<Index>(M) * nv : 0);

    const PuRatings pr = pu_ratings(cs, cfg.ts_seconds);
    const double ts_h = cfg.ts_seconds / 3600.0;
    const int ref_bus = cs.reference_bus_index();

    std::vector<std::vector<Index>> gens_at(static_cast<std::size_t>(nb));
    std::vector<std::vector<Index>> vess_at(static_cast<std::size_t>(nb));
    for (Index g = 0; g < ng; ++g)
        gens_at[static_cast<std::size_t>(cs.bus_index(cs.generators[static_cast<std::size_t>(g)].bus))]
            .push_back(g);
    for (Index v = 0; v < nv; ++v)
        vess_at[static_cast<std::size_t>(cs.bus_index(cs.vess[static_cast<std::size_t>(v)].bus))]
            .push_back(v);

    struct LineInfo {
        Index i, j;
        double b, r;
        LineEquilibrium eq;
        std::vector<double> grid;  // tangent points of the loss parabola in dtheta
    };
    std::vector<LineInfo> lines(static_cast<std::size_t>(nl));
    for (Index e = 0; e < nl; ++e) {
        const Branch& br = cs.branches[static_cast<std::size_t>(e)];
        LineInfo& li = lines[static_cast<std::size_t>(e)];
        li.i = cs.bus_index(br.from_bus);
        li.j = cs.bus_index(br.to_bus);
        li.b = br.susceptance;
        li.r = br.resistance;
        li.eq = line_equilibrium(br, cfg.ts_seconds);
        const double span = 2.0 * br.ampacity / br.susceptance;
        li.grid.resize(static_cast<std::size_t>(K));
        if (K == 1) {
            li.grid[0] = 0.0;
        } else {
            for (int k = 0; k < K; ++k)
                li.grid[static_cast<std::size_t>(k)] = -span + 2.0 * span * k / (K - 1);
        }
    }

    std::vector<Eigen::Triplet<double>> tp;  // quadratic cost, diagonal
    std::vector<Eigen::Triplet<double>> ta;  // constraints
    tp.reserve(static_cast<std::size_t>(M) * static_cast<std::size_t>(ng + nl + nv));
    ta.reserve(static_cast<std::size_t>(rm.total) * 3);

    for (int l = 0; l < M; ++l) {
        const Index row0 = rm.per_step * l;
        for (Index g = 0; g < ng; ++g)
            if (cfg.c_gen(g) > 0.0)
                tp.emplace_back(L.gen(l, g), L.gen(l, g), 2.0 * cfg.c_gen(g));
        for (Index e = 0; e < nl; ++e)
            if (cfg.c_temp(e) > 0.0)
                tp.emplace_back(L.dhat(l, e), L.dhat(l, e), 2.0 * cfg.c_temp(e));
        if (rb)
            for (Index v = 0; v < nv; ++v)
                if (cfg.c_risk(v) > 0.0)
                    tp.emplace_back(L.risk(l, v), L.risk(l, v), 2.0 * cfg.c_risk(v));

        for (Index n = 0; n < nb; ++n) {
            const Index row = row0 + rm.balance + n;
            for (Index g : gens_at[static_cast<std::size_t>(n)])
                ta.emplace_back(row, L.gen(l, g), 1.0);
            for (Index v : vess_at[static_cast<std::size_t>(n)]) {
                ta.emplace_back(row, L.pdis(l, v), 1.0);
                ta.emplace_back(row, L.pch(l, v), -1.0);
            }
        }
        for (Index e = 0; e < nl; ++e) {
            const LineInfo& li = lines[static_cast<std::size_t>(e)];
            ta.emplace_back(row0 + rm.balance + li.i, L.theta(l, li.i), -li.b);
            ta.emplace_back(row0 + rm.balance + li.i, L.theta(l, li.j), li.b);
            ta.emplace_back(row0 + rm.balance + li.j, L.theta(l, li.j), -li.b);
            ta.emplace_back(row0 + rm.balance + li.j, L.theta(l, li.i), li.b);

            const Index frow = row0 + rm.flowdef + e;
            ta.emplace_back(frow, L.flow(l, e), 1.0);
            ta.emplace_back(frow, L.theta(l, li.i), -li.b);
            ta.emplace_back(frow, L.theta(l, li.j), li.b);

            const double rb2 = li.r * li.b * li.b;
            for (int k = 0; k < K; ++k) {
                const Index crow = row0 + rm.cuts + e * K + k;
                ta.emplace_back(crow, L.loss(l, e), 1.0);
                const double slope = 2.0 * rb2 * li.grid[static_cast<std::size_t>(k)];
                if (slope != 0.0) {
                    ta.emplace_back(crow, L.theta(l, li.i), -slope);
                    ta.emplace_back(crow, L.theta(l, li.j), slope);
                }
            }

            const Index trow = row0 + rm.thermal + e;
            ta.emplace_back(trow, L.dtemp(l, e), 1.0);
            ta.emplace_back(trow, L.loss(l, e), -li.eq.rho);
            if (l > 0) ta.emplace_back(trow, L.dtemp(l - 1, e), -li.eq.tau);

            const Index srow = row0 + rm.split + e;
            ta.emplace_back(srow, L.dtemp(l, e), 1.0);
            ta.emplace_back(srow, L.dhat(l, e), -1.0);
        }
        for (Index g = 0; g < ng; ++g) {
            const Index row = row0 + rm.gen_ramp + g;
            ta.emplace_back(row, L.gen(l, g), 1.0);
            if (l > 0) ta.emplace_back(row, L.gen(l - 1, g), -1.0);
        }
        for (Index v = 0; v < nv; ++v) {
            const Index crow = row0 + rm.ch_ramp + v;
            ta.emplace_back(crow, L.pch(l, v), 1.0);
            if (l > 0) ta.emplace_back(crow, L.pch(l - 1, v), -1.0);
            const Index drow = row0 + rm.dis_ramp + v;
            ta.emplace_back(drow, L.pdis(l, v), 1.0);
            if (l > 0) ta.emplace_back(drow, L.pdis(l - 1, v), -1.0);

            const Index srow = row0 + rm.soc_dyn + v;
            ta.emplace_back(srow, L.soc(l, v), 1.0);
            if (l > 0) ta.emplace_back(srow, L.soc(l - 1, v), -1.0);
            ta.emplace_back(srow, L.pch(l, v), -ts_h * pr.eta_ch(v));
            ta.emplace_back(srow, L.pdis(l, v), ts_h / pr.eta_dis(v));
        }
        ta.emplace_back(row0 + rm.ref_angle, L.theta(l, ref_bus), 1.0);
        if (rb) {
            for (Index v = 0; v < nv; ++v) {
                const Index urow = row0 + rm.risk_upper + v;
                ta.emplace_back(urow, L.soc(l, v), 1.0);
                ta.emplace_back(urow, L.risk(l, v), -1.0);
                const Index lrow = row0 + rm.risk_lower + v;
                ta.emplace_back(lrow, L.soc(l, v), -1.0);
                ta.emplace_back(lrow, L.risk(l, v), -1.0);
            }
        }
        for (Index g = 0; g < ng; ++g)
            ta.emplace_back(rm.box_gen + static_cast<Index>(l) * ng + g, L.gen(l, g), 1.0);
        for (Index e = 0; e < nl; ++e) {
            ta.emplace_back(rm.box_loss + static_cast<Index>(l) * nl + e, L.loss(l, e), 1.0);
            ta.emplace_back(rm.box_dhat + static_cast<Index>(l) * nl + e, L.dhat(l, e), 1.0);
        }
        for (Index v = 0; v < nv; ++v) {
            ta.emplace_back(rm.box_pch + static_cast<Index>(l) * nv + v, L.pch(l, v), 1.0);
            ta.emplace_back(rm.box_pdis + static_cast<Index>(l) * nv + v, L.pdis(l, v), 1.0);
            ta.emplace_back(rm.soc_box_row(l, v, nv), L.soc(l, v), 1.0);
            if (rb)
                ta.emplace_back(rm.box_risk + static_cast<Index>(l) * nv + v, L.risk(l, v), 1.0);
        }
    }

    const Index n = L.count();
    out.qp.P.resize(n, n);
    out.qp.P.setFromTriplets(tp.begin(), tp.end());
    out.qp.A.resize(rm.total, n);
    out.qp.A.setFromTriplets(ta.begin(), ta.end());
    out.qp.q = Eigen::VectorXd::Zero(n);
    out.qp.l = Eigen::VectorXd::Zero(rm.total);
    out.qp.u = Eigen::VectorXd::Zero(rm.total);
    refresh(out, state, ref, cs, bounds);
    out.qp.validate();
    return out;
}

void refresh(AssembledQp& prog, const MpcState& state, const ReferenceTrajectory& ref,
             const NetworkCase& cs, const StrategyBounds& bounds) {
    const MpcConfig& cfg = prog.config;
    const VariableLayout& L = prog.layout;
    const RowMap& rm = prog.rows;
    state.validate(cs, cfg.horizon);

    const Index ng = static_cast<Index>(cs.generators.size());
    const Index nb = static_cast<Index>(cs.buses.size());
    const Index nl = static_cast<Index>(cs.branches.size());
    const Index nv = static_cast<Index>(cs.vess.size());
    const int M = cfg.horizon;
    const int K = cfg.loss_cuts;
    const bool rb = cfg.strategy == Strategy::RiskBased;
    if (ref.setpoints.rows() != M || ref.setpoints.cols() != ng)
        throw MpcError(fmt::format("reference must be {} x {}", M, ng));
    if (bounds.lower.size() != nv || bounds.upper.size() != nv ||
        bounds.robust_lower.size() != nv || bounds.robust_upper.size() != nv)
        throw MpcError("strategy bounds size does not match the case");

    const PuRatings pr = pu_ratings(cs, cfg.ts_seconds);
    const double ts_h = cfg.ts_seconds / 3600.0;
    const double inf = kQpInfinity;
    Eigen::VectorXd& q = prog.qp.q;
    Eigen::VectorXd& lo = prog.qp.l;
    Eigen::VectorXd& up = prog.qp.u;
    q.setZero();

    // per-bus share of the loss feedback entering the balance right-hand side
    Eigen::VectorXd bus_loss = Eigen::VectorXd::Zero(nb);
    for (Index e = 0; e < nl; ++e) {
        const Branch& br = cs.branches[static_cast<std::size_t>(e)];
        bus_loss(cs.bus_index(br.from_bus)) += 0.5 * state.loss_est(e);
        bus_loss(cs.bus_index(br.to_bus)) += 0.5 * state.loss_est(e);
    }

    std::vector<LineEquilibrium> eq(static_cast<std::size_t>(nl));
    for (Index e = 0; e < nl; ++e)
        eq[static_cast<std::size_t>(e)] =
            line_equilibrium(cs.branches[static_cast<std::size_t>(e)], cfg.ts_seconds);

    for (int l = 0; l < M; ++l) {
        const Index row0 = rm.per_step * l;
        for (Index g = 0; g < ng; ++g)
            q(L.gen(l, g)) = -2.0 * cfg.c_gen(g) * ref.setpoints(l, g);
        for (Index e = 0; e < nl; ++e) q(L.loss(l, e)) = cfg.loss_tiebreak;

        for (Index n = 0; n < nb; ++n) {
            const double rhs = state.load_forecast(l, n) + bus_loss(n);
            lo(row0 + rm.balance + n) = rhs;
            up(row0 + rm.balance + n) = rhs;
        }
        for (Index e = 0; e < nl; ++e) {
            const Branch& br = cs.branches[static_cast<std::size_t>(e)];
            lo(row0 + rm.flowdef + e) = 0.5 * state.loss_est(e);
            up(row0 + rm.flowdef + e) = 0.5 * state.loss_est(e);
            const double rb2 = br.resistance * br.susceptance * br.susceptance;
            const double span = 2.0 * br.ampacity / br.susceptance;
            for (int k = 0; k < K; ++k) {
                const double a =
                    (K == 1) ? 0.0 : -span + 2.0 * span * k / (K - 1);
                lo(row0 + rm.cuts + e * K + k) = -rb2 * a * a;
                up(row0 + rm.cuts + e * K + k) = inf;
            }
            const LineEquilibrium& le = eq[static_cast<std::size_t>(e)];
            const double trhs = (l == 0 ? le.tau * state.temp_dev(e) : 0.0) -
                                le.rho * le.p_loss_star;
            lo(row0 + rm.thermal + e) = trhs;
            up(row0 + rm.thermal + e) = trhs;
            lo(row0 + rm.split + e) = -inf;
            up(row0 + rm.split + e) = 0.0;
        }
        for (Index g = 0; g < ng; ++g) {
            const double base = (l == 0) ? state.gen_power(g) : 0.0;
            lo(row0 + rm.gen_ramp + g) = base - pr.gen_ramp(g);
            up(row0 + rm.gen_ramp + g) = base + pr.gen_ramp(g);
        }
        for (Index v = 0; v < nv; ++v) {
            const double cbase = (l == 0) ? state.pch_prev(v) : 0.0;
            lo(row0 + rm.ch_ramp + v) = cbase - pr.rch(v);
            up(row0 + rm.ch_ramp + v) = cbase + pr.rch(v);
            const double dbase = (l == 0) ? state.pdis_prev(v) : 0.0;
            lo(row0 + rm.dis_ramp + v) = dbase - pr.rdis(v);
            up(row0 + rm.dis_ramp + v) = dbase + pr.rdis(v);
            const double srhs = (l == 0) ? state.soc_est(v) : 0.0;
            lo(row0 + rm.soc_dyn + v) = srhs;
            up(row0 + rm.soc_dyn + v) = srhs;
        }
        lo(row0 + rm.ref_angle) = 0.0;
        up(row0 + rm.ref_angle) = 0.0;

        for (Index g = 0; g < ng; ++g) {
            lo(rm.box_gen + static_cast<Index>(l) * ng + g) = pr.gen_min(g);
            up(rm.box_gen + static_cast<Index>(l) * ng + g) = pr.gen_max(g);
        }
        for (Index e = 0; e < nl; ++e) {
            lo(rm.box_loss + static_cast<Index>(l) * nl + e) = 0.0;
            up(rm.box_loss + static_cast<Index>(l) * nl + e) = inf;
            lo(rm.box_dhat + static_cast<Index>(l) * nl + e) = 0.0;
            up(rm.box_dhat + static_cast<Index>(l) * nl + e) = inf;
        }
        for (Index v = 0; v < nv; ++v) {
            lo(rm.box_pch + static_cast<Index>(l) * nv + v) = 0.0;
            up(rm.box_pch + static_cast<Index>(l) * nv + v) = pr.pch_max(v);
            lo(rm.box_pdis + static_cast<Index>(l) * nv + v) = 0.0;
            up(rm.box_pdis + static_cast<Index>(l) * nv + v) = pr.pdis_max(v);
        }
    }

    for (Index v = 0; v < nv; ++v) {
        if (bounds.lower(v) > bounds.upper(v) + 1e-12)
            throw MpcError(fmt::format("SOC bounds cross for VESS {}", v));
        const double mu = state.cap_est(v) - bounds.robust_upper(v);
        const double ml = bounds.robust_lower(v) - pr.cap_min(v);
        if (mu < -1e-9 || ml < -1e-9)
            throw MpcError(fmt::format("robust limits lie outside the capacity interval "
                                       "for VESS {}",
                                       v));
        Eigen::VectorXd hard_lo(M), hard_up(M), rob_lo(M), rob_up(M);
        double growth = 1.0;
        for (int l = 0; l < M; ++l) {
            rob_up(l) = state.cap_est(v) - mu * growth;
            rob_lo(l) = pr.cap_min(v) + ml * growth;
            if (cfg.strategy == Strategy::Robust) {
                hard_lo(l) = rob_lo(l);
                hard_up(l) = rob_up(l);
                if (hard_lo(l) > hard_up(l) + 1e-12)
                    throw MpcError(fmt::format(
                        "margins leave no feasible SOC band for VESS {} at step {} "
                        "(lower {:.6g} > upper {:.6g})",
                        v, l, hard_lo(l), hard_up(l)));
            } else {
                hard_lo(l) = bounds.lower(v);
                hard_up(l) = bounds.upper(v);
            }
            growth *= cfg.margin_growth;
        }
        const ReachEnvelope env = reach_envelope(state.soc_est(v), state.pch_prev(v),
                                                 state.pdis_prev(v), pr, v, ts_h, M);
        growth = 1.0;
        for (int l = 0; l < M; ++l) {
            const Index row = rm.soc_box_row(l, v, nv);
            lo(row) = std::min(hard_lo(l), env.highest(l));
            up(row) = std::max(hard_up(l), env.lowest(l));
            if (rb) {
                const Index row0 = rm.per_step * l;
                lo(row0 + rm.risk_upper + v) = -inf;
                up(row0 + rm.risk_upper + v) = rob_up(l);
                lo(row0 + rm.risk_lower + v) = -inf;
                up(row0 + rm.risk_lower + v) = -rob_lo(l);
                lo(rm.box_risk + static_cast<Index>(l) * nv + v) = 0.0;
                up(rm.box_risk + static_cast<Index>(l) * nv + v) = std::max(mu, ml) * growth;
            }
            growth *= cfg.margin_growth;
        }
    }
}

DispatchPlan extract_plan(const QpSolution& sol, const AssembledQp& prog,
                          const MpcState& state, const NetworkCase& cs,
                          const ReferenceTrajectory& ref) {
    if (sol.status != QpStatus::Solved)
        throw MpcError(fmt::format("dispatch QP not solved: status {}", to_string(sol.status)));
    const VariableLayout& L = prog.layout;
    const MpcConfig& cfg = prog.config;
    if (sol.x.size() != L.count()) throw MpcError("solution size does not match the layout");
    const Index ng = static_cast<Index>(cs.generators.size());
    const Index nv = static_cast<Index>(cs.vess.size());
    const int M = cfg.horizon;
    const PuRatings pr = pu_ratings(cs, cfg.ts_seconds);

    DispatchPlan plan;
    plan.gen_power.resize(ng);
    plan.delta_gen.resize(ng);
    plan.p_ch.resize(nv);
    plan.p_dis.resize(nv);
    auto clamp_into = [&plan](double x, double a, double b) {
        if (a > b) b = a;
        const double c = std::clamp(x, a, b);
        const double move = std::abs(c - x);
        if (move > 1e-12) {
            ++plan.clamp_count;
            plan.clamp_max = std::max(plan.clamp_max, move);
        }
        return c;
    };
    for (Index g = 0; g < ng; ++g) {
        const double x = sol.x(L.gen(0, g));
        const double a = std::max(pr.gen_min(g), state.gen_power(g) - pr.gen_ramp(g));
        const double b = std::min(pr.gen_max(g), state.gen_power(g) + pr.gen_ramp(g));
        plan.gen_power(g) = clamp_into(x, a, b);
        plan.delta_gen(g) = plan.gen_power(g) - state.gen_power(g);
    }
    for (Index v = 0; v < nv; ++v) {
        plan.p_ch(v) = clamp_into(sol.x(L.pch(0, v)),
                                  std::max(0.0, state.pch_prev(v) - pr.rch(v)),
                                  std::min(pr.pch_max(v), state.pch_prev(v) + pr.rch(v)));
        plan.p_dis(v) = clamp_into(sol.x(L.pdis(0, v)),
                                   std::max(0.0, state.pdis_prev(v) - pr.rdis(v)),
                                   std::min(pr.pdis_max(v), state.pdis_prev(v) + pr.rdis(v)));
    }
    if (L.with_risk()) {
        plan.risk.resize(M, nv);
        for (int l = 0; l < M; ++l)
            for (Index v = 0; v < nv; ++v) plan.risk(l, v) = sol.x(L.risk(l, v));
    }
    double jt = 0.0, jr = 0.0;
    for (int l = 0; l < M; ++l) {
        for (Index g = 0; g < ng; ++g) {
            const double d = sol.x(L.gen(l, g)) - ref.setpoints(l, g);
            jt += cfg.c_gen(g) * d * d;
        }
        for (Index e = 0; e < static_cast<Index>(cs.branches.size()); ++e) {
            const double d = sol.x(L.dhat(l, e));
            jt += cfg.c_temp(e) * d * d;
        }
        if (L.with_risk())
            for (Index v = 0; v < nv; ++v) {
                const double d = sol.x(L.risk(l, v));
                jr += cfg.c_risk(v) * d * d;
            }
    }
    plan.j_tracking = jt;
    plan.j_risk = jr;
    return plan;
}

}  // namespace vessmpc
