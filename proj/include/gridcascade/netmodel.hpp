#pragma once

// Static grid description: buses, branches, GSU transformers, shunt reactors,
// devices, and the Y-bus assembled from them. A GridCase is a value; every
// edit returns a new case.

#include <complex>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <Eigen/SparseCore>

namespace gridcascade {

using BusId = int;
using Complex = std::complex<double>;

/// Raised when a case, action or trip references something that does not
/// exist or is already in the requested state.
class CaseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class BusKind : std::uint8_t { transmission, collector };

struct Bus {
    BusId id = 0;
    BusKind kind = BusKind::transmission;
    double nominal_kv = 345.0;
    std::string area;
    double v = 1.0;      // pu
    double theta = 0.0;  // rad
};

enum class BranchStatus : std::uint8_t { in_service, open };

struct Branch {
    int id = 0;
    BusId from = 0;
    BusId to = 0;
    double r = 0.0;
    double x = 0.0;
    double b_charging = 0.0;  // total line charging, split half per end
    double tap = 1.0;         // off-nominal ratio on the from side
    BranchStatus status = BranchStatus::in_service;
    bool mesh_candidate = false;

    [[nodiscard]] bool in_service() const { return status == BranchStatus::in_service; }
};

enum class TapMode : std::uint8_t { fixed, lagged_oltc };

struct GsuTransformer {
    int id = 0;
    BusId hv_bus = 0;
    BusId lv_bus = 0;
    double r = 0.0;
    double x = 0.0;
    double n_nom = 1.0;
    double alpha = 0.0125;
    int k_tap = 0;
    int k_min = -10;
    int k_max = 10;
    TapMode tap_mode = TapMode::fixed;
    double oltc_delay = 30.0;  // s
    double band_lo = 0.98;     // lv-side target band, pu
    double band_hi = 1.02;
    bool in_service = true;

    [[nodiscard]] double n_tap() const { return n_nom * (1.0 + alpha * k_tap); }
};

struct ShuntReactor {
    int id = 0;
    BusId bus = 0;
    double b_sh = 0.0;  // pu, absorbing
    bool connected = true;
    std::string name;
};

enum class AvrMode : std::uint8_t { droop, deadband };

struct AvrModel {
    AvrMode mode = AvrMode::deadband;
    double v_ref = 1.0;
    double k_q = 0.05;         // pu V per pu Q
    double band_lo = 1.0125;   // deadband mode
    double band_hi = 1.025;
    double q_lim = 0.5;        // pu on system base
    double lag_tau = 0.0;      // s
    double ramp_mvar_s = 0.0;  // 0 = unlimited
};

struct SyncGenerator {
    int id = 0;
    BusId bus = 0;
    double p = 0.0;       // dispatch, pu
    double q = 0.0;       // last solved output, pu
    double v_set = 1.0;   // pu
    double q_min = -9.99;
    double q_max = 9.99;
    double h = 3.0;       // s, on system base
    double d = 2.0;       // pu
    double x_d_prime = 0.05;
    double rating_mva = 100.0;
    AvrModel avr;
    bool online = true;
};

/// Aggregate inverter-based collector group together with its overvoltage
/// relay settings. Reactive output is constant while online.
struct IbrGroup {
    int id = 0;
    std::string name;
    BusId collector_bus = 0;
    double p = 0.0;
    double q = 0.0;
    bool online = true;
    int transformer_id = 0;
    std::vector<int> reactor_ids;
    double relay_threshold = 1.10;  // pu on collector base
    double relay_dwell = 0.2;       // s
};

enum class HvdcMode : std::uint8_t { pmode1, pmode3 };

struct HvdcLink {
    int id = 0;
    BusId terminal_a = 0;  // sending (exporting) end
    BusId terminal_b = 0;
    HvdcMode mode = HvdcMode::pmode3;
    double p_ref = 0.0;  // PMODE1 setpoint, pu
    double p0 = 0.0;
    double k = 0.0;      // pu per rad
    double t = 1.0;      // s
    double p_set = 0.0;  // current transfer a -> b, pu
    bool online = true;
};

struct ZipCoeffs {
    double z = 0.0;
    double i = 0.0;
    double p = 1.0;
};

struct ZipLoad {
    int id = 0;
    BusId bus = 0;
    double p_nom = 0.0;
    double q_nom = 0.0;
    ZipCoeffs zip_p;
    ZipCoeffs zip_q;
    bool sheddable = true;
    std::optional<int> ufls_stage;
};

struct GridCase {
    std::string name;
    double s_base = 100.0;
    BusId slack_bus = 0;
    std::vector<Bus> buses;
    std::vector<Branch> branches;
    std::vector<GsuTransformer> transformers;
    std::vector<ShuntReactor> reactors;
    std::vector<SyncGenerator> generators;
    std::vector<IbrGroup> ibr_groups;
    std::vector<HvdcLink> hvdc;
    std::vector<ZipLoad> loads;

    [[nodiscard]] std::size_t bus_index(BusId id) const;
    [[nodiscard]] bool has_bus(BusId id) const;
    [[nodiscard]] const Bus& bus(BusId id) const { return buses[bus_index(id)]; }

    [[nodiscard]] const Branch& branch(int id) const;
    [[nodiscard]] const GsuTransformer& transformer(int id) const;
    [[nodiscard]] const ShuntReactor& reactor(int id) const;
    [[nodiscard]] const IbrGroup& ibr_group(int id) const;
    [[nodiscard]] const HvdcLink& hvdc_link(int id) const;
    [[nodiscard]] const SyncGenerator& generator(int id) const;

    Branch& branch(int id);
    GsuTransformer& transformer(int id);
    ShuntReactor& reactor(int id);
    IbrGroup& ibr_group(int id);
    HvdcLink& hvdc_link(int id);
    SyncGenerator& generator(int id);
    ZipLoad& load(int id);

    /// Throws CaseError when any device refers to a missing bus or an
    /// in-service branch has zero reactance.
    void validate() const;
};

// ---------------------------------------------------------------------------
// Built-in augmented 39-bus case

struct CaseConfig {
    double renewable_share = 0.80;
    double load_scale = 0.58;
    int n_collectors = 5;
    std::vector<BusId> collector_hosts;  // machine buses per group; empty = attachment order
    double threshold_lo = 1.04;
    double threshold_hi = 1.10;
    double relay_dwell = 0.2;

    // Device-rating calibration.
    std::vector<double> collector_reactor_mvar{150.0, 160.0, 170.0, 180.0, 190.0};
    double collector_ibr_q = 1.0;            // pu per group
    double operator_reactor_mvar = 100.0;    // each of the two switchable reactors
    double mesh_x_scale = 1.0;               // parallel corridor reactance factor
    double mesh_b_scale = 1.0;               // parallel corridor charging factor
    double gsu_x = 0.02;                     // pu on system base
    double gen_v_set = 1.02;
    double gen_q_lim_fraction = 0.5;         // of machine rating
    AvrMode avr_mode = AvrMode::deadband;
    double gen_ramp_mvar_s = 0.0;            // deadband ramp outside the band, 0 = unlimited
    double gen_droop_kq = 0.05;              // pu V per pu Q, used in droop mode
    double gen_damping = 2.0;                // pu power per pu speed
    double external_h = 0.0;                 // s, inertia of the bus-39 interconnection equivalent, 0 = stock
    double hvdc_export_mw = 1000.0;
    ZipCoeffs load_zip_p{0.2, 0.3, 0.5};
    ZipCoeffs load_zip_q{0.5, 0.3, 0.2};
};

GridCase build_case39(const CaseConfig& cfg = {});

/// Transmission buses a collector group may attach to, in preference order.
const std::vector<BusId>& collector_attachment_order();

// ---------------------------------------------------------------------------
// Topology edits

struct MeshLine { int branch = 0; };
struct OpenLine { int branch = 0; };
struct OpenReactor { int reactor = 0; };
struct CloseReactor { int reactor = 0; };

using TopologyAction = std::variant<MeshLine, OpenLine, OpenReactor, CloseReactor>;

std::string describe(const TopologyAction& action);

/// Returns the edited case. Throws CaseError when the target is missing or
/// already in the requested state.
GridCase apply_topology_action(const GridCase& grid, const TopologyAction& action);

/// Equivalent series reactance of two parallel branches.
double parallel_reactance(double x1, double x2);

// ---------------------------------------------------------------------------
// Admittance

struct AdmittanceMatrix {
    std::vector<BusId> order;  // row/column i corresponds to bus order[i]
    Eigen::SparseMatrix<Complex> y;
    std::vector<std::vector<int>> islands;    // row indices per island
    std::vector<bool> island_has_source;      // generator, IBR or slack present

    [[nodiscard]] Complex at(std::size_t i, std::size_t j) const { return y.coeff(static_cast<long>(i), static_cast<long>(j)); }
    [[nodiscard]] bool has_dead_island() const;
};

/// Y-bus over every bus of the case, in case bus order, with branch
/// pi-models, off-nominal transformer ratios and connected shunts.
AdmittanceMatrix assemble_admittance(const GridCase& grid);

/// Adds the stamp of a series element (with optional off-nominal tap on the
/// from side and total charging b) to a triplet list.
void stamp_branch(std::vector<Eigen::Triplet<Complex>>& triplets, long from, long to,
                  double r, double x, double b_charging, double tap);

/// Low-side voltage of a GSU: v_trans / n_tap, in whatever unit class
/// the ratio is expressed in.
double collector_voltage(const GsuTransformer& transformer, double v_trans);

/// Per-unit collector voltages for every collector group with an energized
/// transformer, taken from a voltage vector in case bus order.
std::vector<double> collector_voltages(const GridCase& grid, const std::vector<double>& v);

/// Total connected shunt-reactor absorption at the given voltages, MVAr.
double reactor_absorption_mvar(const GridCase& grid, const std::vector<double>& v);

}  // namespace gridcascade
