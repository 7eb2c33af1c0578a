#include "vessmpc/plant.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>
#include <fmt/format.h>

namespace vessmpc {

namespace {

using Index = Eigen::Index;

constexpr double kKelvin = 273.15;
/// Truncations below this energy (p.u.-h) still clamp the SOC but are not
/// recorded as saturation events; they are solver-tolerance dust.
constexpr double kDcsEventFloor = 1e-7;

}  // namespace

FlowSolution solve_lossy_dc(const NetworkCase& cs, const Eigen::VectorXd& injections) {
    const Index nb = static_cast<Index>(cs.buses.size());
    const Index nl = static_cast<Index>(cs.branches.size());
    if (injections.size() != nb)
        throw PlantError("injection vector size does not match the bus count");

    FlowSolution out;
    out.theta = Eigen::VectorXd::Zero(nb);
    out.flow = Eigen::VectorXd::Zero(nl);
    out.loss = Eigen::VectorXd::Zero(nl);
    if (nb == 1) {
        out.slack = -injections(0);
        out.iters = 1;
        return out;
    }

    const Index ref = cs.reference_bus_index();
    auto red = [&](Index n) { return n < ref ? n : n - 1; };

    std::vector<Index> from(static_cast<std::size_t>(nl));
    std::vector<Index> to(static_cast<std::size_t>(nl));
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(4 * nl));
    for (Index e = 0; e < nl; ++e) {
        const Branch& br = cs.branches[static_cast<std::size_t>(e)];
        const Index i = cs.bus_index(br.from_bus);
        const Index j = cs.bus_index(br.to_bus);
        from[static_cast<std::size_t>(e)] = i;
        to[static_cast<std::size_t>(e)] = j;
        const double b = br.susceptance;
        if (i != ref) trips.emplace_back(red(i), red(i), b);
        if (j != ref) trips.emplace_back(red(j), red(j), b);
        if (i != ref && j != ref) {
            trips.emplace_back(red(i), red(j), -b);
            trips.emplace_back(red(j), red(i), -b);
        }
    }
    Eigen::SparseMatrix<double> B(nb - 1, nb - 1);
    B.setFromTriplets(trips.begin(), trips.end());
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
    solver.compute(B);
    if (solver.info() != Eigen::Success)
        throw PlantError("susceptance system is singular");

    double resid = 0.0;
    bool converged = false;
    for (int it = 1; it <= 100; ++it) {
        out.iters = it;
        Eigen::VectorXd p = injections;
        for (Index e = 0; e < nl; ++e) {
            const double half = 0.5 * out.loss(e);
            p(from[static_cast<std::size_t>(e)]) -= half;
            p(to[static_cast<std::size_t>(e)]) -= half;
        }
        Eigen::VectorXd rhs(nb - 1);
        for (Index n = 0; n < nb; ++n)
            if (n != ref) rhs(red(n)) = p(n);
        const Eigen::VectorXd th = solver.solve(rhs);
        for (Index n = 0; n < nb; ++n) out.theta(n) = n == ref ? 0.0 : th(red(n));

        resid = 0.0;
        for (Index e = 0; e < nl; ++e) {
            const Branch& br = cs.branches[static_cast<std::size_t>(e)];
            const double f = br.susceptance * (out.theta(from[static_cast<std::size_t>(e)]) -
                                               out.theta(to[static_cast<std::size_t>(e)]));
            const double fresh = br.resistance * f * f;
            resid = std::max(resid, std::abs(fresh - out.loss(e)));
            out.loss(e) = fresh;
            out.flow(e) = f;
        }
        if (resid < 1e-9) {
            converged = true;
            break;
        }
    }
    if (!converged)
        throw PlantError(fmt::format(
            "lossy DC flow did not converge in 100 iterations (last loss change {:.3e})", resid));

    // sending-end power carries half the branch loss
    for (Index e = 0; e < nl; ++e) out.flow(e) += 0.5 * out.loss(e);
    double ref_out = 0.0;
    for (Index e = 0; e < nl; ++e) {
        if (from[static_cast<std::size_t>(e)] == ref) ref_out += out.flow(e);
        if (to[static_cast<std::size_t>(e)] == ref)
            ref_out += -(out.flow(e) - out.loss(e));  // receiving end
    }
    out.slack = ref_out - injections(ref);
    return out;
}

FlowSolution solve_ac(const NetworkCase& cs, const Eigen::VectorXd& injections, double v_set) {
    const Index nb = static_cast<Index>(cs.buses.size());
    const Index nl = static_cast<Index>(cs.branches.size());
    if (injections.size() != nb)
        throw PlantError("injection vector size does not match the bus count");
    if (v_set <= 0.0) throw PlantError("voltage setpoint must be positive");

    const Index ref = cs.reference_bus_index();
    std::vector<bool> is_pv(static_cast<std::size_t>(nb), false);
    for (const auto& g : cs.generators) is_pv[static_cast<std::size_t>(cs.bus_index(g.bus))] = true;

    using Cplx = std::complex<double>;
    Eigen::MatrixXcd Y = Eigen::MatrixXcd::Zero(nb, nb);
    std::vector<Index> from(static_cast<std::size_t>(nl)), to(static_cast<std::size_t>(nl));
    std::vector<Cplx> yser(static_cast<std::size_t>(nl));
    for (Index e = 0; e < nl; ++e) {
        const Branch& br = cs.branches[static_cast<std::size_t>(e)];
        const Index i = cs.bus_index(br.from_bus);
        const Index j = cs.bus_index(br.to_bus);
        const Cplx y = 1.0 / Cplx(br.resistance, 1.0 / br.susceptance);
        from[static_cast<std::size_t>(e)] = i;
        to[static_cast<std::size_t>(e)] = j;
        yser[static_cast<std::size_t>(e)] = y;
        Y(i, i) += y;
        Y(j, j) += y;
        Y(i, j) -= y;
        Y(j, i) -= y;
    }
    const Eigen::MatrixXd G = Y.real();
    const Eigen::MatrixXd Bm = Y.imag();

    // unknowns: angles at every non-slack bus, magnitudes at PQ buses
    std::vector<Index> ang_of, mag_of;
    for (Index n = 0; n < nb; ++n) {
        if (n != ref) ang_of.push_back(n);
        if (n != ref && !is_pv[static_cast<std::size_t>(n)]) mag_of.push_back(n);
    }
    const Index na = static_cast<Index>(ang_of.size());
    const Index nm = static_cast<Index>(mag_of.size());

    Eigen::VectorXd va = Eigen::VectorXd::Zero(nb);
    Eigen::VectorXd vm = Eigen::VectorXd::Constant(nb, v_set);
    Eigen::VectorXd pcal(nb), qcal(nb);
    auto calculate = [&]() {
        for (Index i = 0; i < nb; ++i) {
            double p = 0.0, q = 0.0;
            for (Index k = 0; k < nb; ++k) {
                if (G(i, k) == 0.0 && Bm(i, k) == 0.0) continue;
                const double th = va(i) - va(k);
                const double c = std::cos(th), s = std::sin(th);
                p += vm(i) * vm(k) * (G(i, k) * c + Bm(i, k) * s);
                q += vm(i) * vm(k) * (G(i, k) * s - Bm(i, k) * c);
            }
            pcal(i) = p;
            qcal(i) = q;
        }
    };

    FlowSolution out;
    bool converged = false;
    double mis_norm = 0.0;
    for (int it = 1; it <= 50; ++it) {
        out.iters = it;
        calculate();
        Eigen::VectorXd mis(na + nm);
        for (Index a = 0; a < na; ++a) mis(a) = injections(ang_of[static_cast<std::size_t>(a)]) -
                                                pcal(ang_of[static_cast<std::size_t>(a)]);
        for (Index m = 0; m < nm; ++m)
            mis(na + m) = 0.0 - qcal(mag_of[static_cast<std::size_t>(m)]);
        mis_norm = mis.lpNorm<Eigen::Infinity>();
        if (!std::isfinite(mis_norm)) break;
        if (mis_norm < 1e-8) {
            converged = true;
            break;
        }

        Eigen::MatrixXd J(na + nm, na + nm);
        for (Index r = 0; r < na; ++r) {
            const Index i = ang_of[static_cast<std::size_t>(r)];
            for (Index c = 0; c < na; ++c) {
                const Index k = ang_of[static_cast<std::size_t>(c)];
                if (i == k) {
                    J(r, c) = -qcal(i) - Bm(i, i) * vm(i) * vm(i);
                } else {
                    const double th = va(i) - va(k);
                    J(r, c) = vm(i) * vm(k) * (G(i, k) * std::sin(th) - Bm(i, k) * std::cos(th));
                }
            }
            for (Index c = 0; c < nm; ++c) {
                const Index k = mag_of[static_cast<std::size_t>(c)];
                if (i == k) {
                    J(r, na + c) = pcal(i) / vm(i) + G(i, i) * vm(i);
                } else {
                    const double th = va(i) - va(k);
                    J(r, na + c) = vm(i) * (G(i, k) * std::cos(th) + Bm(i, k) * std::sin(th));
                }
            }
        }
        for (Index r = 0; r < nm; ++r) {
            const Index i = mag_of[static_cast<std::size_t>(r)];
            for (Index c = 0; c < na; ++c) {
                const Index k = ang_of[static_cast<std::size_t>(c)];
                if (i == k) {
                    J(na + r, c) = pcal(i) - G(i, i) * vm(i) * vm(i);
                } else {
                    const double th = va(i) - va(k);
                    J(na + r, c) =
                        -vm(i) * vm(k) * (G(i, k) * std::cos(th) + Bm(i, k) * std::sin(th));
                }
            }
            for (Index c = 0; c < nm; ++c) {
                const Index k = mag_of[static_cast<std::size_t>(c)];
                if (i == k) {
                    J(na + r, na + c) = qcal(i) / vm(i) - Bm(i, i) * vm(i);
                } else {
                    const double th = va(i) - va(k);
                    J(na + r, na + c) =
                        vm(i) * (G(i, k) * std::sin(th) - Bm(i, k) * std::cos(th));
                }
            }
        }
        const Eigen::VectorXd dx = J.partialPivLu().solve(mis);
        if (!dx.allFinite()) break;
        for (Index a = 0; a < na; ++a) va(ang_of[static_cast<std::size_t>(a)]) += dx(a);
        for (Index m = 0; m < nm; ++m) vm(mag_of[static_cast<std::size_t>(m)]) += dx(na + m);
        if (vm.minCoeff() < 0.05) break;  // voltage collapse, no point continuing
    }
    if (!converged)
        throw PlantError(fmt::format(
            "AC power flow diverged after {} iterations (mismatch {:.3e})", out.iters, mis_norm));

    calculate();
    out.theta = va;
    out.flow.resize(nl);
    out.loss.resize(nl);
    for (Index e = 0; e < nl; ++e) {
        const Index i = from[static_cast<std::size_t>(e)];
        const Index j = to[static_cast<std::size_t>(e)];
        const Cplx vi = std::polar(vm(i), va(i));
        const Cplx vj = std::polar(vm(j), va(j));
        const Cplx cur = (vi - vj) * yser[static_cast<std::size_t>(e)];
        const double pij = (vi * std::conj(cur)).real();
        const double pji = (vj * std::conj(-cur)).real();
        out.flow(e) = pij;
        out.loss(e) = pij + pji;
    }
    out.slack = pcal(ref) - injections(ref);
    return out;
}

ThermalConstants calibrate_thermal(const Branch& br, double radiation_share) {
    if (radiation_share < 0.0 || radiation_share >= 1.0)
        throw PlantError("radiation share outside [0, 1)");
    ThermalConstants tc;
    tc.t_amb = br.ambient;
    tc.t_lim = br.temp_limit;
    tc.k_w = 1.0;
    const double rise = br.temp_limit - br.ambient;
    const double p_star = br.loss_at_ampacity();
    if (p_star <= 0.0) {
        // lossless branch: nothing ever heats it, keep a plain decay to ambient
        tc.h = tc.k_w / rise;
        tc.k_r = 0.0;
        tc.c_th = br.thermal_time_constant * tc.h;
        return tc;
    }
    const double tk = br.temp_limit + kKelvin;
    const double ak = br.ambient + kKelvin;
    const double quartic = tk * tk * tk * tk - ak * ak * ak * ak;
    tc.k_r = radiation_share * p_star * tc.k_w / quartic;
    tc.h = (1.0 - radiation_share) * p_star * tc.k_w / rise;
    tc.c_th = br.thermal_time_constant * (tc.h + 4.0 * tc.k_r * tk * tk * tk);
    return tc;
}

double thermal_step(double line_temp, double p_loss, const ThermalConstants& tc, double dt) {
    if (dt <= 0.0) throw PlantError("thermal step requires dt > 0");
    const double ak = tc.t_amb + kKelvin;
    const double a4 = ak * ak * ak * ak;
    auto rate = [&](double t) {
        const double k = t + kKelvin;
        return (p_loss * tc.k_w - tc.h * (t - tc.t_amb) - tc.k_r * (k * k * k * k - a4)) /
               tc.c_th;
    };
    const double k1 = rate(line_temp);
    const double k2 = rate(line_temp + 0.5 * dt * k1);
    const double k3 = rate(line_temp + 0.5 * dt * k2);
    const double k4 = rate(line_temp + dt * k3);
    return line_temp + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

double thermal_step(double line_temp, double p_loss, const Branch& br, double dt) {
    return thermal_step(line_temp, p_loss, calibrate_thermal(br), dt);
}

double thermal_equilibrium(const ThermalConstants& tc, double p_loss) {
    if (p_loss < 0.0) throw PlantError("negative loss has no equilibrium");
    const double ak = tc.t_amb + kKelvin;
    const double a4 = ak * ak * ak * ak;
    double t = tc.t_amb;
    for (int it = 0; it < 200; ++it) {
        const double k = t + kKelvin;
        const double g = tc.h * (t - tc.t_amb) + tc.k_r * (k * k * k * k - a4) -
                         p_loss * tc.k_w;
        const double dg = tc.h + 4.0 * tc.k_r * k * k * k;
        const double dt = g / dg;
        t -= dt;
        if (std::abs(dt) < 1e-12) return t;
    }
    throw PlantError("thermal equilibrium search did not converge");
}

Eigen::VectorXd Disturbance::at(double time, Eigen::Index n_bus) const {
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(n_bus);
    for (const auto& [when, vec] : deltas) {
        if (when > time) break;
        if (vec.size() != n_bus)
            throw PlantError("disturbance entry size does not match the bus count");
        delta = vec;
    }
    return delta;
}

Disturbance step_net_load_drop(const NetworkCase& cs, double at_seconds, double fraction) {
    const Index nb = static_cast<Index>(cs.buses.size());
    Eigen::VectorXd delta(nb);
    for (Index n = 0; n < nb; ++n)
        delta(n) = -fraction * cs.to_pu(cs.buses[static_cast<std::size_t>(n)].load_mw);
    Disturbance d;
    d.deltas.emplace_back(at_seconds, std::move(delta));
    return d;
}

namespace {

/// Nameplate-keyed merit fractions: roughly how hard each unit class runs in
/// the preferred order (hydro and large thermal first, peakers last).
double merit_weight(double p_max_mw) {
    switch (std::lround(p_max_mw)) {
        case 12: return 0.70;
        case 20: return 0.40;
        case 50: return 0.90;
        case 76: return 0.95;
        case 100: return 0.70;
        case 155: return 0.70;
        case 197: return 0.95;
        case 350: return 0.85;
        case 400: return 0.85;
        default: return 0.80;
    }
}

}  // namespace

Eigen::VectorXd ed_dispatch(const NetworkCase& cs, const Eigen::VectorXd& bus_load) {
    const Index nb = static_cast<Index>(cs.buses.size());
    const Index ng = static_cast<Index>(cs.generators.size());
    const Index nl = static_cast<Index>(cs.branches.size());
    if (bus_load.size() != nb)
        throw PlantError("load vector size does not match the bus count");

    Eigen::VectorXd base(ng), pmin(ng), pmax(ng);
    for (Index g = 0; g < ng; ++g) {
        const Generator& gen = cs.generators[static_cast<std::size_t>(g)];
        base(g) = cs.to_pu(merit_weight(gen.p_max) * gen.p_max);
        pmin(g) = cs.to_pu(gen.p_min);
        pmax(g) = cs.to_pu(gen.p_max);
    }
    auto dispatch = [&](double gamma) {
        return (gamma * base).cwiseMax(pmin).cwiseMin(pmax).eval();
    };

    const double load_total = bus_load.sum();
    Eigen::VectorXd loss = Eigen::VectorXd::Zero(nl);
    Eigen::VectorXd gen = Eigen::VectorXd::Zero(ng);
    for (int outer = 0; outer < 50; ++outer) {
        const double target = load_total + loss.sum();
        if (pmin.sum() > target)
            throw PlantError("demand sits below the fleet's minimum generation");
        if (pmax.sum() < target)
            throw PlantError("demand exceeds dispatchable capacity");
        double hi = 1.0;
        while (dispatch(hi).sum() < target && hi < 1e9) hi *= 2.0;
        double lo = 0.0;
        for (int it = 0; it < 100; ++it) {
            const double mid = 0.5 * (lo + hi);
            (dispatch(mid).sum() < target ? lo : hi) = mid;
        }
        gen = dispatch(hi);

        Eigen::VectorXd inj = -bus_load;
        for (Index g = 0; g < ng; ++g)
            inj(cs.bus_index(cs.generators[static_cast<std::size_t>(g)].bus)) += gen(g);
        const FlowSolution flow = solve_lossy_dc(cs, inj);
        const double change =
            nl == 0 ? 0.0 : (flow.loss - loss).lpNorm<Eigen::Infinity>();
        loss = flow.loss;
        if (change < 1e-10) return gen;
    }
    throw PlantError("economic dispatch loss iteration did not converge");
}

Plant::Plant(NetworkCase cs, PlantConfig cfg) : cs_(std::move(cs)), cfg_(cfg) {
    cs_.validate();
    if (cfg_.ts_seconds <= 0.0) throw PlantError("plant step size must be positive");
    thermal_.reserve(cs_.branches.size());
    for (const auto& br : cs_.branches)
        thermal_.push_back(calibrate_thermal(br, cfg_.radiation_share));
    gens_at_.assign(cs_.buses.size(), {});
    vess_at_.assign(cs_.buses.size(), {});
    for (std::size_t g = 0; g < cs_.generators.size(); ++g)
        gens_at_[static_cast<std::size_t>(cs_.bus_index(cs_.generators[g].bus))].push_back(
            static_cast<Index>(g));
    for (std::size_t v = 0; v < cs_.vess.size(); ++v)
        vess_at_[static_cast<std::size_t>(cs_.bus_index(cs_.vess[v].bus))].push_back(
            static_cast<Index>(v));
}

FlowSolution Plant::solve(const Eigen::VectorXd& injections) const {
    return cfg_.ac ? solve_ac(cs_, injections) : solve_lossy_dc(cs_, injections);
}

Eigen::VectorXd Plant::bus_injections(const Eigen::VectorXd& gen, const Eigen::VectorXd& pch,
                                      const Eigen::VectorXd& pdis,
                                      const Eigen::VectorXd& bus_load) const {
    Eigen::VectorXd inj = -bus_load;
    for (std::size_t n = 0; n < gens_at_.size(); ++n) {
        for (Index g : gens_at_[n]) inj(static_cast<Index>(n)) += gen(g);
        for (Index v : vess_at_[n]) inj(static_cast<Index>(n)) += pdis(v) - pch(v);
    }
    return inj;
}

StepMeasurements Plant::init_steady(const Eigen::VectorXd& gen_power,
                                    const Eigen::VectorXd& cap_act,
                                    const Eigen::VectorXd& bus_load) {
    const Index ng = static_cast<Index>(cs_.generators.size());
    const Index nv = static_cast<Index>(cs_.vess.size());
    const Index nb = static_cast<Index>(cs_.buses.size());
    const Index nl = static_cast<Index>(cs_.branches.size());
    if (gen_power.size() != ng || cap_act.size() != nv || bus_load.size() != nb)
        throw PlantError("initial state dimensions do not match the case");

    state_.gen_power = gen_power;
    state_.cap_act = cap_act;
    state_.soc_act.resize(nv);
    for (Index v = 0; v < nv; ++v) {
        const VessSpec& vs = cs_.vess[static_cast<std::size_t>(v)];
        const double floor = cs_.to_pu(vs.cap_min);
        if (cap_act(v) <= floor)
            throw PlantError(fmt::format("realized capacity of VESS {} sits at or below its floor", v));
        state_.soc_act(v) =
            std::clamp(cs_.to_pu(vs.soc_init_frac * vs.cap_max), floor, cap_act(v));
    }
    state_.pch_real = Eigen::VectorXd::Zero(nv);
    state_.pdis_real = Eigen::VectorXd::Zero(nv);
    state_.time = 0.0;

    const FlowSolution flow =
        solve(bus_injections(gen_power, state_.pch_real, state_.pdis_real, bus_load));
    state_.line_temp.resize(nl);
    for (Index e = 0; e < nl; ++e)
        state_.line_temp(e) =
            thermal_equilibrium(thermal_[static_cast<std::size_t>(e)], flow.loss(e));
    ready_ = true;

    StepMeasurements m;
    m.gen_power = state_.gen_power;
    m.loss = flow.loss;
    m.temp_dev.resize(nl);
    for (Index e = 0; e < nl; ++e)
        m.temp_dev(e) = state_.line_temp(e) - cs_.branches[static_cast<std::size_t>(e)].temp_limit;
    m.soc_act = state_.soc_act;
    m.p_ch = state_.pch_real;
    m.p_dis = state_.pdis_real;
    m.slack = flow.slack;
    return m;
}

StepMeasurements Plant::step(const DispatchPlan& plan, const Eigen::VectorXd& bus_load) {
    if (!ready_) throw PlantError("plant stepped before initialization");
    const Index ng = static_cast<Index>(cs_.generators.size());
    const Index nv = static_cast<Index>(cs_.vess.size());
    const Index nb = static_cast<Index>(cs_.buses.size());
    const Index nl = static_cast<Index>(cs_.branches.size());
    if (plan.gen_power.size() != ng || plan.p_ch.size() != nv || plan.p_dis.size() != nv)
        throw PlantError("plan dimensions do not match the case");
    if (bus_load.size() != nb) throw PlantError("load vector size does not match the bus count");

    const double ts_h = cfg_.ts_seconds / 3600.0;
    StepMeasurements m;

    // storage first: integrate, clamp against the realized bounds, truncate
    Eigen::VectorXd pch = plan.p_ch.cwiseMax(0.0);
    Eigen::VectorXd pdis = plan.p_dis.cwiseMax(0.0);
    Eigen::VectorXd soc_next(nv);
    double over = 0.0, under = 0.0;
    for (Index v = 0; v < nv; ++v) {
        const VessSpec& vs = cs_.vess[static_cast<std::size_t>(v)];
        const double floor = cs_.to_pu(vs.cap_min);
        const double raw = state_.soc_act(v) +
                           ts_h * (vs.eff_ch * pch(v) - pdis(v) / vs.eff_dis);
        if (raw > state_.cap_act(v)) {
            const double trunc = raw - state_.cap_act(v);
            pch(v) -= trunc / (ts_h * vs.eff_ch);
            soc_next(v) = state_.cap_act(v);
            over += trunc;
            if (trunc > kDcsEventFloor)
                m.events.push_back({state_.time + cfg_.ts_seconds, static_cast<int>(v), true, trunc});
        } else if (raw < floor) {
            const double trunc = floor - raw;
            pdis(v) -= trunc * vs.eff_dis / ts_h;
            soc_next(v) = floor;
            under += trunc;
            if (trunc > kDcsEventFloor)
                m.events.push_back({state_.time + cfg_.ts_seconds, static_cast<int>(v), false, trunc});
        } else {
            soc_next(v) = raw;
        }
    }

    // generators advance by the plan, then compensate the truncated energy in
    // proportion to their participation factors, inside what ramps allow
    const double comp_target = (under - over) / ts_h;
    Eigen::VectorXd gen_next(ng);
    double comp_applied = 0.0;
    for (Index g = 0; g < ng; ++g) {
        const Generator& gen = cs_.generators[static_cast<std::size_t>(g)];
        const double r = cs_.to_pu(gen.ramp_limit) * (cfg_.ts_seconds / 60.0);
        const double lo = std::max(cs_.to_pu(gen.p_min), state_.gen_power(g) - r);
        const double hi = std::min(cs_.to_pu(gen.p_max), state_.gen_power(g) + r);
        const double planned = std::clamp(plan.gen_power(g), lo, hi);
        const double comp = std::clamp(gen.participation * comp_target, lo - planned,
                                       hi - planned);
        gen_next(g) = planned + comp;
        comp_applied += comp;
    }
    m.dcs_comp = comp_applied;
    m.dcs_residual = comp_target - comp_applied;

    // network and conductor temperatures see the realized quantities
    const FlowSolution flow = solve(bus_injections(gen_next, pch, pdis, bus_load));
    for (Index e = 0; e < nl; ++e)
        state_.line_temp(e) = thermal_step(state_.line_temp(e), flow.loss(e),
                                           thermal_[static_cast<std::size_t>(e)],
                                           cfg_.ts_seconds);

    state_.gen_power = gen_next;
    state_.soc_act = soc_next;
    state_.pch_real = pch;
    state_.pdis_real = pdis;
    state_.time += cfg_.ts_seconds;

    m.gen_power = gen_next;
    m.loss = flow.loss;
    m.temp_dev.resize(nl);
    for (Index e = 0; e < nl; ++e)
        m.temp_dev(e) = state_.line_temp(e) - cs_.branches[static_cast<std::size_t>(e)].temp_limit;
    m.soc_act = soc_next;
    m.p_ch = pch;
    m.p_dis = pdis;
    m.slack = flow.slack;
    return m;
}

EstimateFragment estimate_state(const PlantState& plant, ErrorSampler& sampler,
                                const Eigen::VectorXd& xi_cap, const NetworkCase& cs) {
    const Index nv = plant.soc_act.size();
    if (xi_cap.size() != nv)
        throw PlantError("capacity error vector size does not match the state");
    const Eigen::VectorXd xi_soc = sampler.draw_soc_errors(xi_cap);
    EstimateFragment out;
    out.cap_est.resize(nv);
    out.soc_est.resize(nv);
    for (Index v = 0; v < nv; ++v) {
        const double floor = cs.to_pu(cs.vess[static_cast<std::size_t>(v)].cap_min);
        // a capacity estimate at or below the floor would leave the controller
        // no band at all; keep a hair of room
        out.cap_est(v) = std::max(plant.cap_act(v) + cs.to_pu(xi_cap(v)), floor + 1e-9);
        out.soc_est(v) =
            std::clamp(plant.soc_act(v) + cs.to_pu(xi_soc(v)), 0.0, out.cap_est(v));
    }
    return out;
}

}  // namespace vessmpc
