#pragma once

#include <functional>
#include <numbers>
#include <utility>
#include <vector>

#include <Eigen/SparseCore>

#include "gridcascade/netmodel.hpp"

namespace gridcascade {

inline constexpr double kNominalHz = 50.0;
inline constexpr double kOmega0 = 2.0 * std::numbers::pi * kNominalHz;

/// Reactive command of an AVR at terminal voltage v, MVAr (positive =
/// inject). The engine applies lag and ramp limits on top of this.
double avr_response(const AvrModel& avr, double v, double s_base);

/// Injected reactive power of a shunt reactor, pu (negative = absorbed).
double reactor_injection(const ShuntReactor& reactor, double v);
double reactor_injection_slope(const ShuntReactor& reactor, double v);

/// Time derivative of the HVDC transfer setpoint for the given terminal
/// angles; zero in PMODE1.
double hvdc_rate(const HvdcLink& link, double delta_a, double delta_b);

/// Advances p_set one step with terminal angles held over the step.
double hvdc_step(const HvdcLink& link, double delta_a, double delta_b, double dt);

struct SwingState {
    double delta = 0.0;  // rad
    double omega = 0.0;  // pu speed deviation
};

/// Right-hand side of the swing equation with p_m taken from gen.p.
SwingState swing_rate(const SyncGenerator& gen, const SwingState& s, double p_e);

/// One Heun step; p_e is re-evaluated at the stage angle.
SwingState swing_step(const SyncGenerator& gen, const SwingState& s, const std::function<double(double)>& p_e,
                      double dt);
SwingState swing_step(const SyncGenerator& gen, const SwingState& s, double p_e, double dt);

/// Active power leaving node k into the network: sum over j of
/// v_k v_j (G_kj cos th_kj + B_kj sin th_kj).
double electrical_power(const std::vector<double>& v, const std::vector<double>& theta, std::size_t k,
                        const Eigen::SparseMatrix<Complex>& y);

/// Consumption (P, Q) of a ZIP load at voltage v, pu.
std::pair<double, double> zip_injection(const ZipLoad& load, double v);

/// Power delivered at the terminal by a classical machine with internal
/// EMF e at angle delta behind reactance x.
struct MachineTerminal {
    double p_e;     // out of the internal node
    double q_term;  // into the terminal bus
};
MachineTerminal machine_terminal(double e, double delta, double x, double v, double theta);

}  // namespace gridcascade
