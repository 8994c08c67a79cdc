#include "gridcascade/devices.hpp"

#include <algorithm>
#include <cmath>

namespace gridcascade {

double avr_response(const AvrModel& avr, double v, double s_base) {
    const double lim = avr.q_lim * s_base;
    if (avr.mode == AvrMode::droop) {
        return std::clamp(-(v - avr.v_ref) / avr.k_q * s_base, -lim, lim);
    }
    if (v > avr.band_hi) {
        return -lim;
    }
    if (v < avr.band_lo) {
        return lim;
    }
    return 0.0;
}

double reactor_injection(const ShuntReactor& reactor, double v) {
    return reactor.connected ? -reactor.b_sh * v * v : 0.0;
}

double reactor_injection_slope(const ShuntReactor& reactor, double v) {
    return reactor.connected ? -2.0 * reactor.b_sh * v : 0.0;
}

double hvdc_rate(const HvdcLink& link, double delta_a, double delta_b) {
    if (link.mode == HvdcMode::pmode1) {
        return 0.0;
    }
    return (link.p0 + link.k * (delta_a - delta_b) - link.p_set) / link.t;
}

double hvdc_step(const HvdcLink& link, double delta_a, double delta_b, double dt) {
    if (link.mode == HvdcMode::pmode1) {
        return link.p_ref;
    }
    const double k1 = hvdc_rate(link, delta_a, delta_b);
    HvdcLink mid = link;
    mid.p_set += dt * k1;
    const double k2 = hvdc_rate(mid, delta_a, delta_b);
    return link.p_set + 0.5 * dt * (k1 + k2);
}

SwingState swing_rate(const SyncGenerator& gen, const SwingState& s, double p_e) {
    return {kOmega0 * s.omega, (gen.p - p_e - gen.d * s.omega) / (2.0 * gen.h)};
}

SwingState swing_step(const SyncGenerator& gen, const SwingState& s, const std::function<double(double)>& p_e,
                      double dt) {
    const SwingState k1 = swing_rate(gen, s, p_e(s.delta));
    const SwingState mid{s.delta + dt * k1.delta, s.omega + dt * k1.omega};
    const SwingState k2 = swing_rate(gen, mid, p_e(mid.delta));
    return {s.delta + 0.5 * dt * (k1.delta + k2.delta), s.omega + 0.5 * dt * (k1.omega + k2.omega)};
}

SwingState swing_step(const SyncGenerator& gen, const SwingState& s, double p_e, double dt) {
    return swing_step(gen, s, [p_e](double) { return p_e; }, dt);
}

double electrical_power(const std::vector<double>& v, const std::vector<double>& theta, std::size_t k,
                        const Eigen::SparseMatrix<Complex>& y) {
    // Y is symmetric in every case this library builds, so column k serves as row k.
    double p = 0.0;
    for (Eigen::SparseMatrix<Complex>::InnerIterator it(y, static_cast<long>(k)); it; ++it) {
        const auto j = static_cast<std::size_t>(it.row());
        const double th = theta[k] - theta[j];
        p += v[k] * v[j] * (it.value().real() * std::cos(th) + it.value().imag() * std::sin(th));
    }
    return p;
}

std::pair<double, double> zip_injection(const ZipLoad& load, double v) {
    const auto eval = [v](const ZipCoeffs& c) { return (c.z * v + c.i) * v + c.p; };
    return {load.p_nom * eval(load.zip_p), load.q_nom * eval(load.zip_q)};
}

MachineTerminal machine_terminal(double e, double delta, double x, double v, double theta) {
    const double a = delta - theta;
    return {e * v * std::sin(a) / x, (e * v * std::cos(a) - v * v) / x};
}

}  // namespace gridcascade
