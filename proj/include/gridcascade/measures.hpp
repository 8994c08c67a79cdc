#pragma once

// Operator decision support: reactive margin verification of a topology
// change, simulation-based recovery margins for meshing, and paired UFLS
// policy runs.

#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gridcascade/simengine.hpp"

namespace gridcascade {

// ---------------------------------------------------------------------------
// Margin verification

/// Change of reactive absorption per bus, MVAr. Negative = absorption lost,
/// which raises local voltage.
struct QDisturbance {
    std::vector<std::pair<BusId, double>> mvar;
};

struct VoltageBounds {
    double lo = 0.9;
    double hi = 1.12;
};

struct MarginOptions {
    double horizon_s = 2.0;  // response window for the ramp cap
    double transmission_lo = 0.9;
    double transmission_hi = 1.12;
    double collector_lo = 0.9;  // upper bound at collectors is the relay threshold
    std::map<BusId, VoltageBounds> overrides;
    bool nonlinear_check = true;
};

struct DisturbanceVerdict {
    bool feasible = false;
    double slack = 0.0;                                  // pu, linear prediction under the best dispatch
    std::vector<std::pair<int, double>> dispatch_mvar;   // generator id, extra absorption
    std::vector<std::string> binding;
    std::vector<BusId> buses;                            // bounded buses
    std::vector<double> v_linear;                        // predicted, per bounded bus
    std::vector<double> v_nonlinear;                     // re-solved, empty when the re-solve failed
    double nonlinear_slack = std::numeric_limits<double>::quiet_NaN();
};

struct MarginVerdict {
    bool feasible = false;
    double slack = 0.0;
    std::vector<std::string> binding;  // "bus:<id>" or "gen:<id>"
    double condition = 0.0;            // J_QV estimate at the post-action point
    double condition_pre = 0.0;        // same before the action, 0 when not available
    bool ill_conditioned = false;      // verdict is advisory only
    std::string cause;
    std::vector<DisturbanceVerdict> disturbances;
};

/// Applies the action (if any) to a copy of the case and checks, for each
/// disturbance, whether generator reactive dispatch within capability and
/// response limits keeps every bounded bus inside its interval on the
/// linearized Q-V map. Generators enter the linearization at fixed Q.
MarginVerdict verify_margin(const GridCase& grid, const std::optional<TopologyAction>& action,
                            const std::vector<QDisturbance>& disturbances, const MarginOptions& options = {});

/// One disturbance per collector group: `mvar` of absorption lost at its
/// transmission host bus.
std::vector<QDisturbance> standard_disturbances(const GridCase& grid, double mvar = 150.0);

ojson verdict_json(const MarginVerdict& verdict);

// ---------------------------------------------------------------------------
// Meshing screen

struct ScreenOptions {
    double horizon_s = 2.0;
    double upper_mvar = 1000.0;
    double resolution_mvar = 5.0;
    int max_iter = 12;
};

struct RecoveryMargin {
    std::optional<int> candidate;  // mesh branch id, none = present topology
    BusId probe = 0;
    double margin_mvar = 0.0;
    double horizon_s = 0.0;
    double lo = 0.0;  // largest probed magnitude that survived
    double hi = 0.0;  // smallest probed magnitude that tripped
    int iterations = 0;
    bool saturated = false;  // survived the upper bracket
    std::string cause;
};

/// Runs `horizon` seconds from the case's power-flow point with an `mvar`
/// step loss of absorption at the probe bus, after closing `mesh` at t=0
/// when given; true when a collector relay trips.
bool disturbance_trips(const GridCase& grid, BusId probe, double mvar, const SimConfig& config, double horizon_s,
                       const std::optional<MeshLine>& mesh = std::nullopt);

/// Recovery margin of the running system once `candidate` is closed: the
/// largest step loss of absorption at `probe` that trips no collector
/// relay within the horizon, by bisection.
RecoveryMargin meshing_screen(const GridCase& grid, const std::optional<MeshLine>& candidate, BusId probe,
                              const SimConfig& config, const ScreenOptions& options = {});

/// Every (candidate, probe) pair, fanned out over `workers` threads; results
/// in candidate-major, probe-minor order.
std::vector<RecoveryMargin> screen_table(const GridCase& grid, const std::vector<int>& candidates,
                                         const std::vector<BusId>& probes, const SimConfig& config,
                                         const ScreenOptions& options = {}, int workers = 1);

/// Columns candidate_id, probe_bus, margin_mvar, horizon_s.
std::string margin_table_csv(const std::vector<RecoveryMargin>& rows);

ojson margin_json(const RecoveryMargin& margin);

/// Transmission buses hosting a collector group, in group order.
std::vector<BusId> collector_hosts(const GridCase& grid);

// ---------------------------------------------------------------------------
// UFLS policies

struct PolicyOutcome {
    UflsPolicy policy = UflsPolicy::conventional;
    SimTrace trace;
    std::optional<double> first_shed_t;
    double peak_post_shed_pu = 0.0;  // max transmission voltage from the first shed on, 0 without shedding
    double peak_tx_pu = 0.0;
    double shed_mw = 0.0;
    std::vector<double> shed_mw_per_stage;
};

struct PolicyComparison {
    PolicyOutcome conventional;
    PolicyOutcome voltage_aware;
};

PolicyOutcome summarize_policy(UflsPolicy policy, SimTrace trace);

PolicyComparison compare_ufls_policies(const GridCase& grid, const std::vector<ScenarioEvent>& events,
                                       const SimConfig& config);

}  // namespace gridcascade
