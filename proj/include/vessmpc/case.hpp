#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace vessmpc {

/// Raised by case loading/validation with a message naming the offending entity.
class CaseError : public std::runtime_error {
public:
    explicit CaseError(const std::string& what) : std::runtime_error(what) {}
};

struct Bus {
    int id = 0;
    double load_mw = 0.0;   ///< nominal real-power demand, MW
    std::string region;
};

/// Transmission branch with electro-thermal data. Electrical quantities are in
/// p.u. on the system base; temperatures in degC, time constants in seconds.
struct Branch {
    int from_bus = 0;
    int to_bus = 0;
    double susceptance = 0.0;             ///< b_ij = 1/x, p.u.
    double resistance = 0.0;              ///< series r, p.u.
    double ampacity = 0.0;                ///< current limit, p.u.
    double temp_limit = 0.0;              ///< conductor temperature limit, degC
    double thermal_time_constant = 0.0;   ///< tau_th, s
    double thermal_resistance = 0.0;      ///< R_th, degC per p.u. loss
    double ambient = 0.0;                 ///< T_amb, degC

    /// Losses at ampacity, p.u. (the rating-equilibrium operating point).
    double loss_at_ampacity() const { return ampacity * ampacity * resistance; }
};

struct Generator {
    int bus = 0;
    double p_min = 0.0;          ///< MW
    double p_max = 0.0;          ///< MW
    double ramp_limit = 0.0;     ///< MW per minute
    double tracking_cost = 1.0;  ///< weight on squared reference deviation
    double participation = 0.0;  ///< imbalance-compensation share, sums to 1
};

struct VessSpec {
    int bus = 0;
    double cap_max = 0.0;        ///< estimated energy capacity, MWh
    double cap_min = 0.0;        ///< MWh
    double p_ch_max = 0.0;       ///< MW
    double p_dis_max = 0.0;      ///< MW
    double ramp_ch = 0.0;        ///< MW per minute
    double ramp_dis = 0.0;       ///< MW per minute
    double eff_ch = 1.0;
    double eff_dis = 1.0;
    double soc_init_frac = 0.0;  ///< initial SOC as fraction of cap_max
    double sigma_soc = 0.0;      ///< SOC estimate error std, fraction of cap_max
    double sigma_cap = 0.0;      ///< capacity estimate error std, fraction of cap_max
    double rho_cs = 0.0;         ///< correlation between the two errors
};

/// Discrete-time linearization of one line's thermal dynamics at step Ts.
struct LineEquilibrium {
    double p_loss_star = 0.0;  ///< losses at ampacity, p.u.
    double tau = 0.0;          ///< exp(-Ts/tau_th)
    double rho = 0.0;          ///< R_th * (1 - tau), degC per p.u. loss
};

struct NetworkCase {
    double base_mva = 100.0;
    std::vector<Bus> buses;
    std::vector<Branch> branches;
    std::vector<Generator> generators;
    std::vector<VessSpec> vess;

    int bus_index(int bus_id) const;          ///< throws CaseError on unknown id
    int reference_bus_index() const;          ///< lowest-numbered bus with a generator
    double total_load_mw() const;
    double to_pu(double mw) const { return mw / base_mva; }

    /// Structural and numeric validation; throws CaseError naming the entity.
    void validate() const;
};

/// Parse and validate a case document.
NetworkCase load_case(const nlohmann::json& doc);
NetworkCase load_case_file(const std::string& path);

/// Emit the case as a document that reparses to an identical case.
nlohmann::json serialize(const NetworkCase& cs);

/// Scale every ampacity by (1 - factor) and move temperature limits to the new
/// rating equilibrium, ambient + (T_lim - T_amb)*(1-factor)^2. factor in [0, 1).
NetworkCase derate_thermal_limits(const NetworkCase& cs, double factor);

/// Rating-point losses and discrete-time thermal coefficients for step Ts (s).
LineEquilibrium line_equilibrium(const Branch& br, double ts_seconds);

}  // namespace vessmpc
