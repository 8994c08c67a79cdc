#include "gridcascade/protection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "gridcascade/devices.hpp"

namespace gridcascade {

std::string to_string(TripKind kind) {
    switch (kind) {
        case TripKind::collector: return "collector";
        case TripKind::generator: return "generator";
        case TripKind::transformer: return "transformer";
        case TripKind::line: return "line";
        case TripKind::ufls: return "ufls";
        case TripKind::desync: return "desync";
        case TripKind::hvdc: return "hvdc";
    }
    return "unknown";
}

std::vector<OvervoltageRelay> make_relays(const GridCase& grid) {
    std::vector<OvervoltageRelay> relays;
    for (const auto& g : grid.ibr_groups) {
        OvervoltageRelay r;
        r.group = g.id;
        r.monitored_bus = g.collector_bus;
        r.threshold = g.relay_threshold;
        r.dwell = g.relay_dwell;
        r.tripped = !g.online;
        relays.push_back(r);
    }
    std::sort(relays.begin(), relays.end(), [](const auto& a, const auto& b) { return a.group < b.group; });
    return relays;
}

TripEvent collector_trip(const GridCase& grid, int group, const std::vector<double>& v, double time,
                         std::string cause) {
    const IbrGroup& g = grid.ibr_group(group);
    TripEvent e;
    e.time = time;
    e.kind = TripKind::collector;
    e.target = group;
    e.cause = std::move(cause);
    e.removed_p_mw = g.online ? g.p * grid.s_base : 0.0;
    double absorbed = g.online ? std::max(0.0, -g.q) : 0.0;
    for (int id : g.reactor_ids) {
        const ShuntReactor& r = grid.reactor(id);
        absorbed -= reactor_injection(r, v[grid.bus_index(r.bus)]);
    }
    e.removed_q_mvar = absorbed * grid.s_base;
    return e;
}

std::vector<TripEvent> relay_scan(std::vector<OvervoltageRelay>& relays, const GridCase& grid,
                                  const std::vector<double>& v, double time, double dt) {
    std::vector<TripEvent> trips;
    for (auto& r : relays) {
        if (r.tripped) {
            continue;
        }
        const double vc = v[grid.bus_index(r.monitored_bus)];
        if (vc > r.threshold) {
            r.timer += dt;
        } else {
            r.timer = 0.0;
        }
        if (r.timer >= r.dwell - 1e-9) {
            r.tripped = true;
            char cause[96];
            std::snprintf(cause, sizeof cause, "overvoltage %.4f pu > %.4f pu for %.3f s", vc, r.threshold, r.timer);
            trips.push_back(collector_trip(grid, r.group, v, time, cause));
        }
    }
    return trips;
}

GridCase apply_trip(const GridCase& grid, const TripEvent& event) {
    GridCase out = grid;
    switch (event.kind) {
        case TripKind::collector: {
            IbrGroup& g = out.ibr_group(event.target);
            if (!g.online) {
                throw CaseError("collector group " + std::to_string(g.id) + " already tripped");
            }
            g.online = false;
            for (int id : g.reactor_ids) {
                out.reactor(id).connected = false;
            }
            if (g.transformer_id != 0) {
                out.transformer(g.transformer_id).in_service = false;
            }
            break;
        }
        case TripKind::generator: {
            SyncGenerator& s = out.generator(event.target);
            if (!s.online) {
                throw CaseError("generator " + std::to_string(s.id) + " already tripped");
            }
            s.online = false;
            break;
        }
        case TripKind::transformer: {
            GsuTransformer& t = out.transformer(event.target);
            if (!t.in_service) {
                throw CaseError("transformer " + std::to_string(t.id) + " already open");
            }
            t.in_service = false;
            break;
        }
        case TripKind::line: {
            Branch& b = out.branch(event.target);
            if (!b.in_service()) {
                throw CaseError("branch " + std::to_string(b.id) + " already open");
            }
            b.status = BranchStatus::open;
            break;
        }
        case TripKind::hvdc: {
            HvdcLink& h = out.hvdc_link(event.target);
            if (!h.online) {
                throw CaseError("hvdc link " + std::to_string(h.id) + " already blocked");
            }
            h.online = false;
            break;
        }
        case TripKind::ufls:
            for (const auto& [id, fraction] : event.shed) {
                ZipLoad& l = out.load(id);
                l.p_nom *= 1.0 - fraction;
                l.q_nom *= 1.0 - fraction;
            }
            break;
        case TripKind::desync:
            break;
    }
    return out;
}

void UflsScheme::validate() const {
    for (std::size_t k = 0; k < stages.size(); ++k) {
        if (!(stages[k].fraction > 0.0 && stages[k].fraction <= 1.0)) {
            throw std::invalid_argument("UFLS stage fraction must lie in (0, 1]");
        }
        if (k > 0 && !(stages[k].hz < stages[k - 1].hz)) {
            throw std::invalid_argument("UFLS stage thresholds must strictly decrease");
        }
    }
}

TripEvent ufls_step(UflsScheme& scheme, double freq_hz, const GridCase& grid, const std::vector<double>& v,
                    double time) {
    TripEvent e;
    e.time = time;
    e.kind = TripKind::ufls;
    if (scheme.armed >= scheme.stages.size() || !(freq_hz < scheme.stages[scheme.armed].hz)) {
        return e;
    }
    const UflsStage stage = scheme.stages[scheme.armed];
    e.target = static_cast<int>(scheme.armed) + 1;
    ++scheme.armed;

    std::vector<const ZipLoad*> pool;
    double remaining = 0.0;
    for (const auto& l : grid.loads) {
        if (l.sheddable && l.p_nom > 0.0) {
            pool.push_back(&l);
            remaining += l.p_nom;
        }
    }
    bool overvoltage = false;
    for (std::size_t k = 0; k < grid.buses.size(); ++k) {
        overvoltage = overvoltage || (grid.buses[k].kind == BusKind::transmission && v[k] > scheme.overvoltage_pu);
    }
    const double target = stage.fraction * remaining;
    if (scheme.policy == UflsPolicy::voltage_aware && overvoltage) {
        std::stable_sort(pool.begin(), pool.end(),
                         [](const ZipLoad* a, const ZipLoad* b) { return a->q_nom / a->p_nom < b->q_nom / b->p_nom; });
        // Equal ratios degenerate to pro-rata shedding within the tie.
        double left = target;
        for (std::size_t i = 0; i < pool.size() && left > 1e-12;) {
            std::size_t j = i;
            double tie_p = 0.0;
            const double ratio = pool[i]->q_nom / pool[i]->p_nom;
            while (j < pool.size() && std::abs(pool[j]->q_nom / pool[j]->p_nom - ratio) <= 1e-12) {
                tie_p += pool[j]->p_nom;
                ++j;
            }
            const double fraction = std::min(1.0, left / tie_p);
            for (std::size_t k = i; k < j; ++k) {
                e.shed.emplace_back(pool[k]->id, fraction);
            }
            left -= fraction * tie_p;
            i = j;
        }
        e.cause = "stage " + std::to_string(e.target) + ", low Q/P first";
    } else {
        for (const ZipLoad* l : pool) {
            e.shed.emplace_back(l->id, stage.fraction);
        }
        e.cause = "stage " + std::to_string(e.target) + ", pro-rata";
    }
    for (const auto& [id, fraction] : e.shed) {
        const ZipLoad* l = *std::find_if(pool.begin(), pool.end(), [id = id](const ZipLoad* x) { return x->id == id; });
        const auto [p, q] = zip_injection(*l, v[grid.bus_index(l->bus)]);
        e.removed_p_mw += fraction * p * grid.s_base;
        e.removed_q_mvar += fraction * q * grid.s_base;
    }
    char buf[48];
    std::snprintf(buf, sizeof buf, " at %.3f Hz", freq_hz);
    e.cause += buf;
    std::sort(e.shed.begin(), e.shed.end());
    return e;
}

bool desync_check(const std::vector<double>& angles, double delta_crit) {
    if (angles.size() < 2) {
        return false;
    }
    const double mean = std::accumulate(angles.begin(), angles.end(), 0.0) / static_cast<double>(angles.size());
    double lo = angles.front() - mean;
    double hi = lo;
    for (double a : angles) {
        lo = std::min(lo, a - mean);
        hi = std::max(hi, a - mean);
    }
    return hi - lo > delta_crit;
}

}  // namespace gridcascade
