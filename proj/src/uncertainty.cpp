#include "vessmpc/uncertainty.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>
#include <fmt/core.h>

namespace vessmpc {

DistributionClass parse_distribution(const std::string& name) {
    if (name == "arbitrary") return DistributionClass::Arbitrary;
    if (name == "unimodal") return DistributionClass::Unimodal;
    if (name == "gaussian") return DistributionClass::Gaussian;
    throw UncertaintyError(fmt::format("unknown distribution class '{}'", name));
}

std::string to_string(DistributionClass d) {
    switch (d) {
        case DistributionClass::Arbitrary: return "arbitrary";
        case DistributionClass::Unimodal: return "unimodal";
        case DistributionClass::Gaussian: return "gaussian";
    }
    return "?";
}

namespace {

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double std_normal_pdf(double x) {
    static const double inv_sqrt_2pi = 0.3989422804014326779;
    return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

// Acklam's rational approximation, |error| < 1.15e-9 before refinement.
double inverse_normal_initial(double p) {
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    if (p < plow) {
        double q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p > 1.0 - plow) {
        double q = std::sqrt(-2.0 * std::log(1.0 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    double q = p - 0.5, r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

}  // namespace

double inverse_std_normal_cdf(double p) {
    if (!(p > 0.0 && p < 1.0))
        throw UncertaintyError(fmt::format("inverse_std_normal_cdf: p={} outside (0,1)", p));
    double x = inverse_normal_initial(p);
    for (int it = 0; it < 3; ++it) {
        double err = std_normal_cdf(x) - p;
        double dp = std_normal_pdf(x);
        if (dp <= 0.0) break;
        x -= err / dp;
    }
    return x;
}

double safety_factor(DistributionClass dist, double eps) {
    if (!(eps > 0.0 && eps <= 0.5))
        throw UncertaintyError(fmt::format("safety_factor: eps={} outside (0, 0.5]", eps));
    switch (dist) {
        case DistributionClass::Arbitrary:
            return std::sqrt((1.0 - eps) / eps);
        case DistributionClass::Unimodal:
            return std::pow((1.0 - eps) / (std::numbers::e * eps), 1.0 / 1.95);
        case DistributionClass::Gaussian:
            return inverse_std_normal_cdf(1.0 - eps);
    }
    throw UncertaintyError("safety_factor: bad distribution class");
}

double robust_bound(double cap_est, double delta_s, double delta_c, double rho_cs,
                    double f_inv) {
    if (delta_s < 0.0 || delta_c < 0.0)
        throw UncertaintyError("robust_bound: negative error std");
    // up to 2 so a doubled cross-term coefficient can be passed through
    if (std::abs(rho_cs) > 2.0) throw UncertaintyError("robust_bound: |rho_cs| > 2");
    double var = delta_s * delta_s + delta_c * delta_c + rho_cs * delta_c * delta_s;
    if (var < 0.0) var = 0.0;
    return cap_est - f_inv * std::sqrt(var);
}

UncertaintySpec UncertaintySpec::from_case(const NetworkCase& cs, double epsilon,
                                           DistributionClass dist, double cross_cap_corr) {
    UncertaintySpec s;
    s.epsilon = epsilon;
    s.dist = dist;
    s.cross_cap_corr = cross_cap_corr;
    for (const auto& v : cs.vess) {
        s.delta_s.push_back(v.sigma_soc * v.cap_max);
        s.delta_c.push_back(v.sigma_cap * v.cap_max);
        s.rho_cs.push_back(v.rho_cs);
    }
    s.validate();
    return s;
}

void UncertaintySpec::validate() const {
    if (!(epsilon > 0.0 && epsilon <= 0.5))
        throw UncertaintyError(fmt::format("epsilon={} outside (0, 0.5]", epsilon));
    if (delta_s.size() != delta_c.size() || delta_s.size() != rho_cs.size())
        throw UncertaintyError("uncertainty spec arrays disagree in length");
    for (std::size_t i = 0; i < delta_s.size(); ++i) {
        if (delta_s[i] < 0.0 || delta_c[i] < 0.0)
            throw UncertaintyError(fmt::format("vess {}: negative error std", i));
        if (std::abs(rho_cs[i]) > 1.0)
            throw UncertaintyError(fmt::format("vess {}: |rho_cs| > 1", i));
    }
    if (cross_cap_corr < 0.0 || cross_cap_corr >= 1.0)
        throw UncertaintyError(fmt::format("cross_cap_corr={} outside [0, 1)", cross_cap_corr));
    if (!(growth > 0.0)) throw UncertaintyError("growth must be positive");
}

ErrorSampler::ErrorSampler(const UncertaintySpec& spec, std::uint64_t seed)
    : spec_(spec), rng_(seed) {
    spec_.validate();
    const auto n = static_cast<Eigen::Index>(spec_.size());
    Eigen::MatrixXd corr = Eigen::MatrixXd::Constant(n, n, spec_.cross_cap_corr);
    corr.diagonal().setOnes();
    Eigen::LLT<Eigen::MatrixXd> llt(corr);
    if (llt.info() != Eigen::Success)
        throw UncertaintyError("capacity correlation matrix is not positive definite");
    chol_ = llt.matrixL();
}

double ErrorSampler::standard_normal() {
    // 53-bit uniform in (0,1), then the inverse CDF; avoids the
    // implementation-defined std::normal_distribution.
    double u = (static_cast<double>(rng_() >> 11) + 0.5) * 0x1.0p-53;
    return inverse_std_normal_cdf(u);
}

Eigen::VectorXd ErrorSampler::draw_capacity_errors() {
    const auto n = static_cast<Eigen::Index>(spec_.size());
    Eigen::VectorXd w(n);
    for (Eigen::Index i = 0; i < n; ++i) w[i] = standard_normal();
    Eigen::VectorXd z = chol_ * w;
    for (Eigen::Index i = 0; i < n; ++i) z[i] *= spec_.delta_c[i];
    return z;
}

Eigen::VectorXd ErrorSampler::draw_soc_errors(const Eigen::VectorXd& xi_cap) {
    const auto n = static_cast<Eigen::Index>(spec_.size());
    Eigen::VectorXd xs(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double rho = spec_.rho_cs[i];
        double w = standard_normal();
        double zc = spec_.delta_c[i] > 0.0 ? xi_cap[i] / spec_.delta_c[i] : 0.0;
        xs[i] = spec_.delta_s[i] * (rho * zc + std::sqrt(std::max(0.0, 1.0 - rho * rho)) * w);
    }
    return xs;
}

ErrorRealization ErrorSampler::sample() {
    ErrorRealization r;
    r.xi_cap = draw_capacity_errors();
    r.xi_soc = draw_soc_errors(r.xi_cap);
    return r;
}

}  // namespace vessmpc
