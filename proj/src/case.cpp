#include "vessmpc/case.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <queue>
#include <unordered_map>
#include <unordered_set>

#include <fmt/core.h>

namespace vessmpc {

using nlohmann::json;

int NetworkCase::bus_index(int bus_id) const {
    for (std::size_t i = 0; i < buses.size(); ++i)
        if (buses[i].id == bus_id) return static_cast<int>(i);
    throw CaseError(fmt::format("unknown bus id {}", bus_id));
}

int NetworkCase::reference_bus_index() const {
    int best = -1;
    for (const auto& g : generators) {
        if (best < 0 || g.bus < buses[best].id) best = bus_index(g.bus);
    }
    if (best < 0) throw CaseError("case has no generators");
    return best;
}

double NetworkCase::total_load_mw() const {
    double s = 0.0;
    for (const auto& b : buses) s += b.load_mw;
    return s;
}

void NetworkCase::validate() const {
    if (!(base_mva > 0.0)) throw CaseError("base_mva must be positive");
    if (buses.empty()) throw CaseError("case has no buses");
    if (generators.empty()) throw CaseError("case has no generators");

    std::unordered_set<int> ids;
    for (const auto& b : buses) {
        if (!ids.insert(b.id).second)
            throw CaseError(fmt::format("duplicate bus id {}", b.id));
        if (b.load_mw < 0.0)
            throw CaseError(fmt::format("bus {}: negative load", b.id));
    }
    auto need_bus = [&](int id, const std::string& what) {
        if (!ids.count(id))
            throw CaseError(fmt::format("{} references missing bus {}", what, id));
    };

    for (std::size_t k = 0; k < branches.size(); ++k) {
        const auto& br = branches[k];
        auto tag = fmt::format("branch {} ({}-{})", k, br.from_bus, br.to_bus);
        need_bus(br.from_bus, tag);
        need_bus(br.to_bus, tag);
        if (br.from_bus == br.to_bus) throw CaseError(tag + ": self loop");
        if (!(br.susceptance > 0.0)) throw CaseError(tag + ": susceptance must be positive");
        if (br.resistance < 0.0) throw CaseError(tag + ": negative resistance");
        if (!(br.ampacity > 0.0)) throw CaseError(tag + ": ampacity must be positive");
        if (!(br.temp_limit > br.ambient))
            throw CaseError(tag + ": temp_limit must exceed ambient");
        if (!(br.thermal_time_constant > 0.0))
            throw CaseError(tag + ": thermal_time_constant must be positive");
        if (!(br.thermal_resistance > 0.0))
            throw CaseError(tag + ": thermal_resistance must be positive");
    }

    double dsum = 0.0;
    for (std::size_t k = 0; k < generators.size(); ++k) {
        const auto& g = generators[k];
        auto tag = fmt::format("generator {} (bus {})", k, g.bus);
        need_bus(g.bus, tag);
        if (g.p_min > g.p_max) throw CaseError(tag + ": p_min exceeds p_max");
        if (g.ramp_limit < 0.0) throw CaseError(tag + ": negative ramp_limit");
        if (g.tracking_cost < 0.0) throw CaseError(tag + ": negative tracking_cost");
        if (g.participation < 0.0) throw CaseError(tag + ": negative participation");
        dsum += g.participation;
    }
    if (std::abs(dsum - 1.0) > 1e-9)
        throw CaseError(fmt::format("generator participation sums to {} (expected 1)", dsum));

    for (std::size_t k = 0; k < vess.size(); ++k) {
        const auto& v = vess[k];
        auto tag = fmt::format("vess {} (bus {})", k, v.bus);
        need_bus(v.bus, tag);
        if (!(v.cap_max > v.cap_min) || v.cap_min < 0.0)
            throw CaseError(tag + ": requires 0 <= cap_min < cap_max");
        if (!(v.p_ch_max >= 0.0) || !(v.p_dis_max >= 0.0))
            throw CaseError(tag + ": negative power limit");
        if (v.ramp_ch < 0.0 || v.ramp_dis < 0.0) throw CaseError(tag + ": negative ramp");
        if (!(v.eff_ch > 0.0 && v.eff_ch <= 1.0 && v.eff_dis > 0.0 && v.eff_dis <= 1.0))
            throw CaseError(tag + ": efficiencies must lie in (0, 1]");
        double s0 = v.soc_init_frac * v.cap_max;
        if (s0 < v.cap_min - 1e-12 || s0 > v.cap_max + 1e-12)
            throw CaseError(tag + ": initial SOC outside [cap_min, cap_max]");
        if (v.sigma_soc < 0.0 || v.sigma_cap < 0.0)
            throw CaseError(tag + ": negative error std");
        if (std::abs(v.rho_cs) > 1.0) throw CaseError(tag + ": |rho_cs| must be <= 1");
    }

    // single connected component
    std::unordered_map<int, std::vector<int>> adj;
    for (const auto& br : branches) {
        adj[br.from_bus].push_back(br.to_bus);
        adj[br.to_bus].push_back(br.from_bus);
    }
    std::unordered_set<int> seen;
    std::queue<int> q;
    q.push(buses.front().id);
    seen.insert(buses.front().id);
    while (!q.empty()) {
        int u = q.front();
        q.pop();
        for (int w : adj[u])
            if (seen.insert(w).second) q.push(w);
    }
    if (seen.size() != buses.size())
        throw CaseError(fmt::format("network is not connected ({} of {} buses reachable)",
                                    seen.size(), buses.size()));
}

namespace {

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end())
        throw CaseError(fmt::format("{}: missing field '{}'", where, key));
    try {
        return it->get<T>();
    } catch (const json::exception& e) {
        throw CaseError(fmt::format("{}: field '{}': {}", where, key, e.what()));
    }
}

}  // namespace

NetworkCase load_case(const json& doc) {
    if (!doc.is_object()) throw CaseError("case document must be a JSON object");
    NetworkCase cs;
    cs.base_mva = field<double>(doc, "base_mva", "case");
    for (const char* key : {"buses", "branches", "generators", "vess"})
        if (!doc.contains(key) || !doc.at(key).is_array())
            throw CaseError(fmt::format("case: missing array '{}'", key));

    int n = 0;
    for (const auto& j : doc.at("buses")) {
        auto where = fmt::format("buses[{}]", n++);
        Bus b;
        b.id = field<int>(j, "id", where);
        b.load_mw = field<double>(j, "load_mw", where);
        b.region = j.value("region", std::string{});
        cs.buses.push_back(std::move(b));
    }
    n = 0;
    for (const auto& j : doc.at("branches")) {
        auto where = fmt::format("branches[{}]", n++);
        Branch br;
        br.from_bus = field<int>(j, "from_bus", where);
        br.to_bus = field<int>(j, "to_bus", where);
        br.susceptance = field<double>(j, "susceptance", where);
        br.resistance = field<double>(j, "resistance", where);
        br.ampacity = field<double>(j, "ampacity", where);
        br.temp_limit = field<double>(j, "temp_limit", where);
        br.thermal_time_constant = field<double>(j, "thermal_time_constant", where);
        br.thermal_resistance = field<double>(j, "thermal_resistance", where);
        br.ambient = field<double>(j, "ambient", where);
        cs.branches.push_back(std::move(br));
    }
    n = 0;
    for (const auto& j : doc.at("generators")) {
        auto where = fmt::format("generators[{}]", n++);
        Generator g;
        g.bus = field<int>(j, "bus", where);
        g.p_min = field<double>(j, "p_min", where);
        g.p_max = field<double>(j, "p_max", where);
        g.ramp_limit = field<double>(j, "ramp_limit", where);
        g.tracking_cost = field<double>(j, "tracking_cost", where);
        g.participation = field<double>(j, "participation", where);
        cs.generators.push_back(std::move(g));
    }
    n = 0;
    for (const auto& j : doc.at("vess")) {
        auto where = fmt::format("vess[{}]", n++);
        VessSpec v;
        v.bus = field<int>(j, "bus", where);
        v.cap_max = field<double>(j, "cap_max", where);
        v.cap_min = field<double>(j, "cap_min", where);
        v.p_ch_max = field<double>(j, "p_ch_max", where);
        v.p_dis_max = field<double>(j, "p_dis_max", where);
        v.ramp_ch = field<double>(j, "ramp_ch", where);
        v.ramp_dis = field<double>(j, "ramp_dis", where);
        v.eff_ch = field<double>(j, "eff_ch", where);
        v.eff_dis = field<double>(j, "eff_dis", where);
        v.soc_init_frac = field<double>(j, "soc_init_frac", where);
        v.sigma_soc = field<double>(j, "sigma_soc", where);
        v.sigma_cap = field<double>(j, "sigma_cap", where);
        v.rho_cs = field<double>(j, "rho_cs", where);
        cs.vess.push_back(std::move(v));
    }
    cs.validate();
    return cs;
}

NetworkCase load_case_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CaseError(fmt::format("cannot open case file '{}'", path));
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw CaseError(fmt::format("'{}': {}", path, e.what()));
    }
    return load_case(doc);
}

json serialize(const NetworkCase& cs) {
    json doc;
    doc["base_mva"] = cs.base_mva;
    auto& jb = doc["buses"] = json::array();
    for (const auto& b : cs.buses)
        jb.push_back({{"id", b.id}, {"load_mw", b.load_mw}, {"region", b.region}});
    auto& jr = doc["branches"] = json::array();
    for (const auto& br : cs.branches)
        jr.push_back({{"from_bus", br.from_bus},
                      {"to_bus", br.to_bus},
                      {"susceptance", br.susceptance},
                      {"resistance", br.resistance},
                      {"ampacity", br.ampacity},
                      {"temp_limit", br.temp_limit},
                      {"thermal_time_constant", br.thermal_time_constant},
                      {"thermal_resistance", br.thermal_resistance},
                      {"ambient", br.ambient}});
    auto& jg = doc["generators"] = json::array();
    for (const auto& g : cs.generators)
        jg.push_back({{"bus", g.bus},
                      {"p_min", g.p_min},
                      {"p_max", g.p_max},
                      {"ramp_limit", g.ramp_limit},
                      {"tracking_cost", g.tracking_cost},
                      {"participation", g.participation}});
    auto& jv = doc["vess"] = json::array();
    for (const auto& v : cs.vess)
        jv.push_back({{"bus", v.bus},
                      {"cap_max", v.cap_max},
                      {"cap_min", v.cap_min},
                      {"p_ch_max", v.p_ch_max},
                      {"p_dis_max", v.p_dis_max},
                      {"ramp_ch", v.ramp_ch},
                      {"ramp_dis", v.ramp_dis},
                      {"eff_ch", v.eff_ch},
                      {"eff_dis", v.eff_dis},
                      {"soc_init_frac", v.soc_init_frac},
                      {"sigma_soc", v.sigma_soc},
                      {"sigma_cap", v.sigma_cap},
                      {"rho_cs", v.rho_cs}});
    return doc;
}

NetworkCase derate_thermal_limits(const NetworkCase& cs, double factor) {
    if (factor < 0.0 || factor >= 1.0)
        throw CaseError(fmt::format("derate factor {} outside [0, 1)", factor));
    NetworkCase out = cs;
    if (factor == 0.0) return out;
    double keep = 1.0 - factor;
    for (auto& br : out.branches) {
        br.ampacity *= keep;
        br.temp_limit = br.ambient + (br.temp_limit - br.ambient) * keep * keep;
    }
    out.validate();
    return out;
}

LineEquilibrium line_equilibrium(const Branch& br, double ts_seconds) {
    if (!(ts_seconds > 0.0)) throw CaseError("line_equilibrium: Ts must be positive");
    LineEquilibrium eq;
    eq.p_loss_star = br.loss_at_ampacity();
    eq.tau = std::exp(-ts_seconds / br.thermal_time_constant);
    eq.rho = br.thermal_resistance * (1.0 - eq.tau);
    return eq;
}

}  // namespace vessmpc
