#pragma once

// Small dense linear programs: maximize c'x subject to A x <= b and
// lo <= x <= hi. Two-phase tableau simplex with Bland's rule; meant for a
// few dozen variables.

#include <Eigen/Dense>

namespace gridcascade {

struct LpProblem {
    Eigen::MatrixXd a;
    Eigen::VectorXd b;
    Eigen::VectorXd c;
    Eigen::VectorXd lo;  // finite
    Eigen::VectorXd hi;  // finite, >= lo
};

enum class LpStatus { optimal, infeasible };

struct LpResult {
    LpStatus status = LpStatus::infeasible;
    Eigen::VectorXd x;
    double objective = 0.0;
    int pivots = 0;
};

LpResult solve_lp(const LpProblem& problem, double tol = 1e-9);

}  // namespace gridcascade
