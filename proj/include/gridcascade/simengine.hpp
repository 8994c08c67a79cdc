#pragma once

// Partitioned time stepping: machine, AVR and HVDC states advance with
// Heun's method while the network is re-solved at every stage. Classical
// machines enter the network as internal EMF nodes behind x'd.

#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "gridcascade/case_io.hpp"
#include "gridcascade/netmodel.hpp"
#include "gridcascade/powerflow.hpp"
#include "gridcascade/protection.hpp"

namespace gridcascade {

// ---------------------------------------------------------------------------
// Scenario vocabulary

struct SetHvdcMode {
    int link = 1;
    HvdcMode mode = HvdcMode::pmode1;
    std::optional<double> p_ref_mw;  // PMODE1; defaults to the present transfer
};
struct SetHvdcPower {
    int link = 1;
    double p_mw = 0.0;
};
/// Scales northern load by `factor` and takes the same MW off southern IBR.
struct ScaleExport {
    double factor = 1.0;
};
enum class DeviceKind { ibr, generator, line, transformer, hvdc };
struct TripDevice {
    DeviceKind kind = DeviceKind::ibr;
    int id = 0;
};
struct SetAvrMode {
    AvrMode mode = AvrMode::droop;
    std::vector<int> generators;  // empty: every machine
};
/// Step change of reactive injection at a bus; positive = absorption lost.
struct InjectQDisturbance {
    BusId bus = 0;
    double mvar = 0.0;
};

using ScenarioAction = std::variant<MeshLine, OpenLine, OpenReactor, CloseReactor, SetHvdcMode, SetHvdcPower,
                                    ScaleExport, TripDevice, SetAvrMode, InjectQDisturbance>;

struct ScenarioEvent {
    double t = 0.0;
    ScenarioAction action;
};

std::string action_name(const ScenarioAction& action);
ojson action_params(const ScenarioAction& action);
ScenarioAction action_from_json(const std::string& name, const nlohmann::json& params, const std::string& path);

// ---------------------------------------------------------------------------
// Configuration

struct CollapseCriteria {
    int pf_failures = 3;
    double freq_floor_hz = 47.5;
    double v_floor_pu = 0.7;
};

struct SimConfig {
    double dt = 0.01;
    double t_end = 20.0;
    double pf_tol = 1e-8;
    CollapseCriteria collapse;
    int decimation = 1;
    std::uint64_t seed = 0;
    UflsScheme ufls;
    double delta_crit = std::numbers::pi / 2.0;
    double transmission_limit = 1.12;  // pu, SCADA alarm and relay limit
    double machine_q_tau = 0.05;       // s, EMF tracking of the reactive target
    double scada_noise = 0.0;

    void validate() const;
};

ojson config_to_json(const SimConfig& config);
/// Overlays the keys present in `doc` onto `config`.
void apply_config_json(SimConfig& config, const nlohmann::json& doc, const std::string& path = "");
/// Applies one "key=value" override (dotted keys for nested fields).
void apply_config_override(SimConfig& config, const std::string& assignment);

struct Scenario {
    std::vector<ScenarioEvent> events;
    nlohmann::json config = nlohmann::json::object();  // overrides as written in the file
};

inline constexpr std::string_view kScenarioSchema = "scenario-v1";

ojson scenario_to_json(const Scenario& scenario);
Scenario scenario_from_json(const nlohmann::json& doc);
Scenario load_scenario_file(const std::string& path);

// ---------------------------------------------------------------------------
// State

struct MachineState {
    int gen = 0;
    double delta = 0.0;
    double omega = 0.0;
    double e = 1.0;
    double q_cmd = 0.0;    // AVR output after lag/ramp, pu
    double q_sched = 0.0;  // reactive schedule around which the AVR acts, pu
};

struct SystemState {
    double t = 0.0;
    std::vector<MachineState> machines;
    std::vector<double> hvdc_p;  // per link
    std::vector<double> v;       // case bus order
    std::vector<double> theta;
    double freq_hz = 50.0;
    double q_lost_mvar = 0.0;
};

enum class RunStatus { running, completed, collapsed };
std::string to_string(RunStatus status);

struct Terminal {
    RunStatus status = RunStatus::running;
    double t = 0.0;
    std::string reason;
};

struct TraceRecord {
    double t = 0.0;
    std::vector<double> v;
    double freq_hz = 50.0;
    double q_lost_mvar = 0.0;
    double v_max_tx = 0.0;
    std::vector<double> collector_v;  // per relay, relay order
    std::vector<double> relay_timer;
};

/// An executed scenario action or a protection event, in execution order.
struct TraceEvent {
    double t = 0.0;
    std::optional<ScenarioAction> action;
    std::optional<TripEvent> trip;
    std::string rejected;  // non-empty when the action did not apply
};

struct SimTrace {
    ojson header;
    std::vector<BusId> bus_ids;
    std::vector<BusKind> bus_kinds;
    std::vector<TraceRecord> records;
    std::vector<TraceEvent> events;
    Terminal terminal;
};

// ---------------------------------------------------------------------------

class Simulation {
public:
    Simulation(GridCase grid, SimConfig config);

    /// Queues an action; it executes at the first step starting at or after
    /// t - dt/2. Equal times keep insertion order.
    void schedule(const ScenarioEvent& event);

    /// Throws CaseError when the action does not apply to the current case
    /// once the actions already due at the next step have run.
    void check_action(const ScenarioAction& action) const;

    /// Advances one step. Returns the events executed during it.
    std::vector<TraceEvent> step();

    /// Steps until t_end or a terminal state.
    void run();

    [[nodiscard]] bool finished() const { return terminal_.status != RunStatus::running; }
    [[nodiscard]] double time() const { return state_.t; }
    [[nodiscard]] long step_index() const { return step_; }
    [[nodiscard]] const SystemState& state() const { return state_; }
    [[nodiscard]] const GridCase& grid() const { return grid_; }
    [[nodiscard]] const SimConfig& config() const { return config_; }
    [[nodiscard]] const std::vector<OvervoltageRelay>& relays() const { return relays_; }
    [[nodiscard]] const SimTrace& trace() const { return trace_; }
    [[nodiscard]] const Terminal& terminal() const { return terminal_; }
    [[nodiscard]] const std::vector<ScenarioEvent>& pending() const { return pending_; }

    /// Case whose static power flow reproduces the present operating point:
    /// machines dispatched at their electrical output with terminal voltage
    /// setpoints, HVDC at its present transfer.
    [[nodiscard]] GridCase snapshot_case() const;

    /// Record of the present state in trace form.
    [[nodiscard]] TraceRecord current_record() const;

    /// Largest P/Q balance residual of the present network solution over
    /// every node except the machine EMF references.
    [[nodiscard]] double balance_residual() const;

    /// Machine-readable digest of the full dynamic state.
    [[nodiscard]] ojson state_json() const;

    // Access for linearization. Differential layout: per machine
    // (delta, omega, e, q_cmd), then one HVDC transfer per link.
    [[nodiscard]] std::vector<double> differential() const;
    [[nodiscard]] std::vector<double> derivatives() const;
    /// Sets the differential states and re-solves the network; false when
    /// the network solve fails.
    bool set_differential_and_solve(const std::vector<double>& x);
    /// Network unknowns in solver ordering (angles, then magnitudes).
    [[nodiscard]] std::vector<double> algebraic() const;
    /// Network balance residual at the present point, solver ordering.
    [[nodiscard]] Eigen::VectorXd algebraic_residual() const;
    /// Places the state at (x, x_a) without solving the network.
    void set_point(const std::vector<double>& x, const std::vector<double>& x_a);
    // Inputs: reactive schedule per machine, then the HVDC setpoint per link
    // (p_ref in PMODE1, p0 in PMODE3).
    [[nodiscard]] std::vector<double> inputs() const;
    void set_inputs(const std::vector<double>& u);
    [[nodiscard]] const NetworkProblem& network() const { return problem_; }
    [[nodiscard]] const std::vector<double>& node_v() const { return node_v_; }
    [[nodiscard]] const std::vector<double>& node_theta() const { return node_theta_; }
    [[nodiscard]] const std::vector<int>& machine_nodes() const { return machine_node_; }

private:
    void build_network();
    bool solve_network(double tol);
    void set_differential(const std::vector<double>& x);
    void refresh_derived();
    void apply_action(const ScenarioAction& action);
    void record();
    void solve_or_count(double tol);
    void update_injections();
    void add_hvdc_injections(NetworkProblem& pb) const;
    MachineState* machine(int gen);

    GridCase grid_;
    SimConfig config_;
    SystemState state_;
    std::vector<OvervoltageRelay> relays_;
    std::vector<double> extra_q_;  // pu per bus, case order
    std::vector<ScenarioEvent> pending_;
    std::vector<double> node_v_;
    std::vector<double> node_theta_;
    std::vector<int> machine_node_;  // node index per state_.machines entry, -1 when offline
    NetworkProblem problem_;
    std::vector<double> base_p_inj_;
    bool dirty_ = true;
    int pf_failures_ = 0;
    bool step_failed_ = false;
    std::optional<TripEvent> action_trip_;  // trip caused by the last applied action
    bool desync_seen_ = false;
    long step_ = 0;
    SimTrace trace_;
    Terminal terminal_;
};

SimTrace run_scenario(const GridCase& grid, const Scenario& scenario, const SimConfig& config);

struct BuiltinScenario {
    GridCase grid;
    std::vector<ScenarioEvent> events;
    SimConfig config;
};

/// Case configuration used by the built-in scenario.
CaseConfig iberian_case_config();

/// The calibrated collector case and the scripted operator timeline.
BuiltinScenario builtin_iberian_scenario(const CaseConfig& cfg = iberian_case_config());

/// Terminal status from the present state; `running` when healthy.
Terminal detect_collapse(const SystemState& state, const GridCase& grid, const std::vector<NodeType>& types,
                         int pf_failures, const SimConfig& config);

}  // namespace gridcascade
