#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "gridcascade/netmodel.hpp"

namespace gridcascade {

enum class NodeType : std::uint8_t { pq, pv, ref, dead };

/// Newton failed to reach tolerance within the iteration cap, or the
/// Jacobian could not be factorized.
class PowerFlowError : public std::runtime_error {
public:
    PowerFlowError(const std::string& what, int iterations, double mismatch)
        : std::runtime_error(what), iterations_(iterations), mismatch_(mismatch) {}
    [[nodiscard]] int iterations() const { return iterations_; }
    [[nodiscard]] double mismatch() const { return mismatch_; }

private:
    int iterations_;
    double mismatch_;
};

/// J_QV is singular or its condition estimate exceeds the threshold.
class ConditioningError : public std::runtime_error {
public:
    ConditioningError(const std::string& what, double estimate)
        : std::runtime_error(what), estimate_(estimate) {}
    [[nodiscard]] double estimate() const { return estimate_; }

private:
    double estimate_;
};

/// Polynomial consumption a2*v^2 + a1*v + a0 aggregated per node.
struct ZipPoly {
    double a2 = 0.0;
    double a1 = 0.0;
    double a0 = 0.0;

    [[nodiscard]] double at(double v) const { return (a2 * v + a1) * v + a0; }
    [[nodiscard]] double slope(double v) const { return 2.0 * a2 * v + a1; }
};

/// One set of network balance equations: node types, constant injections,
/// voltage-dependent consumption and the admittance matrix. Both the static
/// power flow and the dynamic engine (machines as internal reference nodes)
/// are instances of this.
struct NetworkProblem {
    Eigen::SparseMatrix<Complex> y;
    std::vector<NodeType> type;
    std::vector<double> p_inj;
    std::vector<double> q_inj;
    std::vector<ZipPoly> p_load;
    std::vector<ZipPoly> q_load;

    [[nodiscard]] std::size_t size() const { return type.size(); }

    /// Unknown ordering: theta for pq+pv nodes, then v for pq nodes.
    [[nodiscard]] std::vector<int> theta_nodes() const;
    [[nodiscard]] std::vector<int> v_nodes() const;

    /// Complex power leaving each node into the network, S = V conj(Y V).
    [[nodiscard]] Eigen::VectorXcd power(const std::vector<double>& v, const std::vector<double>& theta) const;

    /// Balance residual (calculated minus specified) at every node; zero at
    /// ref and dead nodes.
    void residual(const std::vector<double>& v, const std::vector<double>& theta,
                  Eigen::VectorXd& dp, Eigen::VectorXd& dq) const;

    /// Stacked residual in unknown ordering.
    [[nodiscard]] Eigen::VectorXd stacked_residual(const std::vector<double>& v, const std::vector<double>& theta) const;

    /// Analytic Jacobian of stacked_residual with respect to the unknowns.
    [[nodiscard]] Eigen::SparseMatrix<double> jacobian(const std::vector<double>& v,
                                                       const std::vector<double>& theta) const;
};

struct NewtonOptions {
    double tol = 1e-8;
    int max_iter = 20;
};

struct NewtonResult {
    int iterations = 0;
    double max_mismatch = 0.0;
};

/// Solves the problem in place starting from (v, theta). Throws
/// PowerFlowError on failure, leaving v and theta at the last iterate.
NewtonResult newton_solve(const NetworkProblem& problem, std::vector<double>& v, std::vector<double>& theta,
                          const NewtonOptions& options = {});

/// Marks every node of an island without a reference node as dead.
void mark_dead_islands(NetworkProblem& problem);

// ---------------------------------------------------------------------------

struct PowerFlowSolution {
    std::vector<BusId> buses;    // case bus order
    std::vector<double> v;
    std::vector<double> theta;
    std::vector<double> p;       // net injection into the network, pu
    std::vector<double> q;
    std::vector<NodeType> type;  // after any PV -> PQ switching
    int iterations = 0;
    double max_mismatch = 0.0;
    std::vector<int> limited_generators;  // ids pinned at a reactive limit

    [[nodiscard]] double v_at(const GridCase& grid, BusId id) const { return v[grid.bus_index(id)]; }
    [[nodiscard]] double theta_at(const GridCase& grid, BusId id) const { return theta[grid.bus_index(id)]; }
};

struct PowerFlowOptions {
    std::optional<PowerFlowSolution> warm_start;
    bool enforce_q_limits = true;
    bool generators_as_pq = false;  // fix every generator at its recorded q
    NewtonOptions newton;
};

/// Static network problem of a case: slack is ref, buses with online
/// generators are pv, the rest pq. Extra per-bus Q injections (pu) may be
/// supplied in case bus order.
NetworkProblem static_problem(const GridCase& grid, bool generators_as_pq = false,
                              const std::vector<double>* extra_q = nullptr);

PowerFlowSolution solve_pf(const GridCase& grid, const PowerFlowOptions& options = {});

/// Copy of the case with generator p/q and bus v/theta taken from a
/// solution (slack generator absorbs the balance).
GridCase with_solution(const GridCase& grid, const PowerFlowSolution& solution);

/// Largest absolute P or Q balance residual over all buses of a solution.
double balance_residual(const GridCase& grid, const PowerFlowSolution& solution);

// ---------------------------------------------------------------------------

struct JacobianBlocks {
    Eigen::SparseMatrix<double> j_ptheta;
    Eigen::SparseMatrix<double> j_pv;
    Eigen::SparseMatrix<double> j_qtheta;
    Eigen::SparseMatrix<double> j_qv;
    std::vector<int> theta_nodes;  // node index per theta column / P row
    std::vector<int> v_nodes;      // node index per V column / Q row
    std::vector<BusId> theta_buses;
    std::vector<BusId> v_buses;

    [[nodiscard]] Eigen::SparseMatrix<double> full() const;
};

JacobianBlocks jacobian_blocks(const NetworkProblem& problem, const std::vector<double>& v,
                               const std::vector<double>& theta);
JacobianBlocks jacobian_blocks(const GridCase& grid, const PowerFlowSolution& solution,
                               bool generators_as_pq = false);

struct Sensitivity {
    Eigen::VectorXd dv;  // per v_buses entry
    double condition_estimate = 0.0;
};

inline constexpr double kConditionLimit = 1e8;

/// dv = -J_QV^{-1} dq, where dq is the change in reactive absorption at each
/// v_buses entry (negative = absorption lost). Angles held fixed.
Sensitivity voltage_sensitivity(const JacobianBlocks& blocks, const Eigen::VectorXd& dq);

/// One-norm condition estimate of a sparse square matrix (Hager's method).
/// Returns +inf when the matrix is singular.
double condition_estimate(const Eigen::SparseMatrix<double>& a);

// ---------------------------------------------------------------------------

struct ScadaView {
    std::vector<BusId> observed;  // transmission buses only
    double noise_sigma = 0.0;
};

ScadaView make_scada_view(const GridCase& grid, double noise_sigma = 0.0);

/// Measured voltage magnitudes for the observed buses, from voltages in case
/// bus order.
std::vector<double> observe(const ScadaView& view, const GridCase& grid, const std::vector<double>& v,
                            std::uint64_t seed);

}  // namespace gridcascade
