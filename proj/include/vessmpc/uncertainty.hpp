#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "vessmpc/case.hpp"

namespace vessmpc {

class UncertaintyError : public std::runtime_error {
public:
    explicit UncertaintyError(const std::string& what) : std::runtime_error(what) {}
};

/// Distributional assumption behind the chance-constraint reformulation.
enum class DistributionClass { Arbitrary, Unimodal, Gaussian };

DistributionClass parse_distribution(const std::string& name);
std::string to_string(DistributionClass d);

/// Inverse standard normal CDF. Rational initial guess refined by Newton steps
/// on Phi; accurate to ~1e-13 over (0, 1).
double inverse_std_normal_cdf(double p);

/// Safety factor f^-1(eps) scaling the error std into a robust margin:
///   Arbitrary: sqrt((1-eps)/eps)
///   Unimodal:  ((1-eps)/(e*eps))^(1/1.95)
///   Gaussian:  sqrt(2)*erfinv(1-2*eps)
/// eps must lie in (0, 0.5].
double safety_factor(DistributionClass dist, double eps);

/// Robust SOC bound: cap_est - f_inv*sqrt(ds^2 + dc^2 + rho_cs*dc*ds).
/// All inputs in energy units (consistent with cap_est).
double robust_bound(double cap_est, double delta_s, double delta_c, double rho_cs,
                    double f_inv);

/// Per-VESS error model with cross-VESS capacity-error correlation.
struct UncertaintySpec {
    double epsilon = 0.05;
    DistributionClass dist = DistributionClass::Unimodal;
    std::vector<double> delta_s;  ///< SOC-error std, MWh per VESS
    std::vector<double> delta_c;  ///< capacity-error std, MWh per VESS
    std::vector<double> rho_cs;   ///< per-VESS SOC/capacity error correlation
    double cross_cap_corr = 0.0;  ///< equicorrelation of capacity errors across VESS
    double growth = 1.0;          ///< optional per-step std growth over the horizon
    bool correlation_factor_two = false;  ///< doubles the cross term in the margin

    /// Builds the spec from case VESS rows (sigma fractions times cap_max).
    static UncertaintySpec from_case(const NetworkCase& cs, double epsilon,
                                     DistributionClass dist, double cross_cap_corr);
    std::size_t size() const { return delta_s.size(); }
    void validate() const;
};

/// One realization of the estimation errors (MWh).
struct ErrorRealization {
    Eigen::VectorXd xi_soc;  ///< per-VESS SOC estimate error
    Eigen::VectorXd xi_cap;  ///< per-VESS capacity estimate error
};

/// Deterministic Gaussian sampler: mt19937_64 mapped through the inverse
/// normal CDF, so streams are identical across platforms for a given seed.
class ErrorSampler {
public:
    ErrorSampler(const UncertaintySpec& spec, std::uint64_t seed);

    /// Capacity errors, drawn once per trial (correlated across VESS).
    Eigen::VectorXd draw_capacity_errors();
    /// SOC errors conditioned on the given capacity errors (fresh each call).
    Eigen::VectorXd draw_soc_errors(const Eigen::VectorXd& xi_cap);
    /// Convenience joint draw.
    ErrorRealization sample();

    double standard_normal();

private:
    UncertaintySpec spec_;
    std::mt19937_64 rng_;
    Eigen::MatrixXd chol_;  ///< Cholesky factor of the capacity equicorrelation
};

}  // namespace vessmpc
