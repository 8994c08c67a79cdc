#pragma once

// Linearization of the engine's differential-algebraic system about its
// present point:
//
//   E dx/dt = A x + B_u du + B_w dw,   x = (x_d, x_a)
//
// x_d are the machine and HVDC states, x_a the network angles and
// magnitudes in solver ordering, u the machine reactive schedules and HVDC
// setpoints, w per-bus P and Q injection changes.

#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "gridcascade/simengine.hpp"

namespace gridcascade {

struct LinearDae {
    Eigen::SparseMatrix<double> e;
    Eigen::MatrixXd a_dd;
    Eigen::MatrixXd a_da;
    Eigen::MatrixXd a_ad;
    Eigen::SparseMatrix<double> a_aa;
    Eigen::MatrixXd b_u;  // rows: x_d then x_a
    Eigen::MatrixXd b_w;
    std::vector<std::string> x_d;
    std::vector<std::string> x_a;
    std::vector<std::string> u;
    std::vector<std::string> w;

    [[nodiscard]] std::size_t nd() const { return x_d.size(); }
    [[nodiscard]] std::size_t na() const { return x_a.size(); }

    /// Full A = [A_dd A_da; A_ad A_aa].
    [[nodiscard]] Eigen::MatrixXd a() const;

    /// State matrix of the differential states with the network eliminated,
    /// A_dd - A_da A_aa^-1 A_ad.
    [[nodiscard]] Eigen::MatrixXd reduced() const;
    /// Matching input matrix for u.
    [[nodiscard]] Eigen::MatrixXd reduced_b_u() const;
};

/// Central differences of step `eps` for the device blocks; A_aa is the
/// analytic network Jacobian. The simulation is left untouched.
LinearDae linearize_dae(const Simulation& sim, double eps = 1e-6);

}  // namespace gridcascade
