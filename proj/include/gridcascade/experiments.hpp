#pragma once

// Paired and swept runs of the built-in scenario behind the comparison
// figures: AVR compliance, renewable share, meshing and UFLS policy.

#include <optional>
#include <string>
#include <vector>

#include "gridcascade/simengine.hpp"

namespace gridcascade {

struct RunSummary {
    std::string name;
    SimTrace trace;
    double peak_tx_pu = 0.0;
    double corridor_peak_pu = 0.0;  // mesh corridor buses, up to the first collector trip
    std::optional<double> first_trip_t;
    double post_shed_peak_pu = 0.0;
    double shed_mw = 0.0;
};

/// Buses at either end of a mesh candidate, ascending.
std::vector<BusId> mesh_corridor_buses(const GridCase& grid);

RunSummary summarize_run(std::string name, const SimTrace& trace, const std::vector<BusId>& corridor);

RunSummary run_builtin(const std::string& name, const CaseConfig& cfg,
                       bool (*keep)(const ScenarioEvent&) = nullptr, std::optional<UflsPolicy> policy = {});

inline const std::vector<std::string>& counterfactual_names() {
    static const std::vector<std::string> names{"avr_compliance", "renewable_sweep", "meshing", "ufls_policy"};
    return names;
}

/// Runs in a fixed order, fanned out over `workers` threads.
std::vector<RunSummary> run_counterfactual(const std::string& name, int workers = 1);

/// Columns run, status, terminal_t, peak_tx_pu, corridor_peak_pu,
/// first_trip_t, post_shed_peak_pu, shed_mw.
std::string summary_csv(const std::vector<RunSummary>& runs);

}  // namespace gridcascade
