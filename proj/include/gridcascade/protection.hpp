#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gridcascade/netmodel.hpp"

namespace gridcascade {

enum class TripKind { collector, generator, transformer, line, ufls, desync, hvdc };

std::string to_string(TripKind kind);

struct TripEvent {
    double time = 0.0;
    TripKind kind = TripKind::collector;
    int target = 0;               // device id, or UFLS stage index
    double removed_p_mw = 0.0;
    double removed_q_mvar = 0.0;  // reactive absorption removed
    std::string cause;
    std::vector<std::pair<int, double>> shed;  // UFLS: (load id, fraction of its current size)
    std::optional<double> max_dv_pu;          // UFLS: largest transmission voltage change on re-solve
};

struct OvervoltageRelay {
    int group = 0;  // IBR group id; relays are scanned in this order
    BusId monitored_bus = 0;
    double threshold = 1.10;
    double dwell = 0.2;
    double timer = 0.0;
    bool tripped = false;
};

/// One relay per IBR group, ordered by group id.
std::vector<OvervoltageRelay> make_relays(const GridCase& grid);

/// Trip record of a collector group with the quantities it carries at
/// voltages v (case bus order).
TripEvent collector_trip(const GridCase& grid, int group, const std::vector<double>& v, double time,
                         std::string cause);

/// Advances dwell timers by dt from collector voltages v (case bus order) and
/// returns a trip for every relay whose timer reached its dwell.
std::vector<TripEvent> relay_scan(std::vector<OvervoltageRelay>& relays, const GridCase& grid,
                                  const std::vector<double>& v, double time, double dt);

/// Disconnects the devices named by a trip. Throws CaseError when the target
/// is already out of service.
GridCase apply_trip(const GridCase& grid, const TripEvent& event);

enum class UflsPolicy { conventional, voltage_aware };

struct UflsStage {
    double hz = 49.0;
    double fraction = 0.1;  // of remaining sheddable load
};

struct UflsScheme {
    std::vector<UflsStage> stages{{49.0, 0.10}, {48.7, 0.10}, {48.4, 0.15}};
    UflsPolicy policy = UflsPolicy::conventional;
    double overvoltage_pu = 1.12;  // transmission level that switches on Q/P ranking
    std::size_t armed = 0;

    /// Throws std::invalid_argument unless thresholds strictly decrease and
    /// fractions lie in (0, 1].
    void validate() const;
};

/// Sheds the armed stage when frequency is below its threshold. Returns an
/// event with an empty shed list otherwise. v is in case bus order.
TripEvent ufls_step(UflsScheme& scheme, double freq_hz, const GridCase& grid, const std::vector<double>& v,
                    double time);

/// True when any two angles differ by more than delta_crit after removing
/// their mean.
bool desync_check(const std::vector<double>& angles, double delta_crit);

}  // namespace gridcascade
