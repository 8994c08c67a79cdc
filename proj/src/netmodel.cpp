#include "gridcascade/netmodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace gridcascade {

namespace {

template <typename Vec>
auto find_by_id(Vec& items, int id, const char* what) -> decltype(&items.front()) {
    auto it = std::find_if(items.begin(), items.end(), [id](const auto& item) { return item.id == id; });
    if (it == items.end()) {
        throw CaseError(std::string("unknown ") + what + " id " + std::to_string(id));
    }
    return &*it;
}

}  // namespace

std::size_t GridCase::bus_index(BusId id) const {
    for (std::size_t i = 0; i < buses.size(); ++i) {
        if (buses[i].id == id) {
            return i;
        }
    }
    throw CaseError("unknown bus id " + std::to_string(id));
}

bool GridCase::has_bus(BusId id) const {
    return std::any_of(buses.begin(), buses.end(), [id](const Bus& b) { return b.id == id; });
}

const Branch& GridCase::branch(int id) const { return *find_by_id(branches, id, "branch"); }
const GsuTransformer& GridCase::transformer(int id) const { return *find_by_id(transformers, id, "transformer"); }
const ShuntReactor& GridCase::reactor(int id) const { return *find_by_id(reactors, id, "reactor"); }
const IbrGroup& GridCase::ibr_group(int id) const { return *find_by_id(ibr_groups, id, "ibr group"); }
const HvdcLink& GridCase::hvdc_link(int id) const { return *find_by_id(hvdc, id, "hvdc link"); }
const SyncGenerator& GridCase::generator(int id) const { return *find_by_id(generators, id, "generator"); }
Branch& GridCase::branch(int id) { return *find_by_id(branches, id, "branch"); }
GsuTransformer& GridCase::transformer(int id) { return *find_by_id(transformers, id, "transformer"); }
ShuntReactor& GridCase::reactor(int id) { return *find_by_id(reactors, id, "reactor"); }
IbrGroup& GridCase::ibr_group(int id) { return *find_by_id(ibr_groups, id, "ibr group"); }
HvdcLink& GridCase::hvdc_link(int id) { return *find_by_id(hvdc, id, "hvdc link"); }
SyncGenerator& GridCase::generator(int id) { return *find_by_id(generators, id, "generator"); }
ZipLoad& GridCase::load(int id) { return *find_by_id(loads, id, "load"); }

void GridCase::validate() const {
    if (s_base <= 0.0) {
        throw CaseError("s_base must be positive");
    }
    auto check_bus = [this](BusId id, const std::string& who) {
        if (!has_bus(id)) {
            throw CaseError(who + " references missing bus " + std::to_string(id));
        }
    };
    for (const auto& b : buses) {
        if (b.nominal_kv <= 0.0) {
            throw CaseError("bus " + std::to_string(b.id) + " has non-positive nominal_kv");
        }
    }
    if (slack_bus != 0) {
        check_bus(slack_bus, "slack designation");
    }
    for (const auto& br : branches) {
        check_bus(br.from, "branch " + std::to_string(br.id));
        check_bus(br.to, "branch " + std::to_string(br.id));
        if (br.from == br.to) {
            throw CaseError("branch " + std::to_string(br.id) + " is a self-loop");
        }
        if (br.in_service() && br.x == 0.0 && br.r == 0.0) {
            throw CaseError("branch " + std::to_string(br.id) + " has zero impedance");
        }
    }
    for (const auto& t : transformers) {
        check_bus(t.hv_bus, "transformer " + std::to_string(t.id));
        check_bus(t.lv_bus, "transformer " + std::to_string(t.id));
        if (t.n_tap() <= 0.0) {
            throw CaseError("transformer " + std::to_string(t.id) + " has non-positive ratio");
        }
    }
    for (const auto& r : reactors) {
        check_bus(r.bus, "reactor " + std::to_string(r.id));
        if (r.b_sh <= 0.0) {
            throw CaseError("reactor " + std::to_string(r.id) + " must have b_sh > 0");
        }
    }
    for (const auto& g : generators) {
        check_bus(g.bus, "generator " + std::to_string(g.id));
        if (g.h <= 0.0) {
            throw CaseError("generator " + std::to_string(g.id) + " must have h > 0");
        }
    }
    for (const auto& g : ibr_groups) {
        check_bus(g.collector_bus, "ibr group " + std::to_string(g.id));
        (void)transformer(g.transformer_id);
        for (int r : g.reactor_ids) {
            (void)reactor(r);
        }
    }
    for (const auto& h : hvdc) {
        check_bus(h.terminal_a, "hvdc " + std::to_string(h.id));
        check_bus(h.terminal_b, "hvdc " + std::to_string(h.id));
    }
    for (const auto& l : loads) {
        check_bus(l.bus, "load " + std::to_string(l.id));
        for (const ZipCoeffs& c : {l.zip_p, l.zip_q}) {
            if (std::abs(c.z + c.i + c.p - 1.0) > 1e-9) {
                throw CaseError("load " + std::to_string(l.id) + " ZIP coefficients must sum to 1");
            }
        }
    }
}

// ---------------------------------------------------------------------------

std::string describe(const TopologyAction& action) {
    return std::visit(
        [](const auto& a) -> std::string {
            using T = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<T, MeshLine>) {
                return "MeshLine(" + std::to_string(a.branch) + ")";
            } else if constexpr (std::is_same_v<T, OpenLine>) {
                return "OpenLine(" + std::to_string(a.branch) + ")";
            } else if constexpr (std::is_same_v<T, OpenReactor>) {
                return "OpenReactor(" + std::to_string(a.reactor) + ")";
            } else {
                return "CloseReactor(" + std::to_string(a.reactor) + ")";
            }
        },
        action);
}

GridCase apply_topology_action(const GridCase& grid, const TopologyAction& action) {
    GridCase out = grid;
    std::visit(
        [&out](const auto& a) {
            using T = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<T, MeshLine>) {
                Branch& br = out.branch(a.branch);
                if (!br.mesh_candidate) {
                    throw CaseError("branch " + std::to_string(a.branch) + " is not a mesh candidate");
                }
                if (br.in_service()) {
                    throw CaseError("branch " + std::to_string(a.branch) + " is already closed");
                }
                if (br.x == 0.0) {
                    throw CaseError("branch " + std::to_string(a.branch) + " has zero reactance");
                }
                br.status = BranchStatus::in_service;
            } else if constexpr (std::is_same_v<T, OpenLine>) {
                Branch& br = out.branch(a.branch);
                if (!br.in_service()) {
                    throw CaseError("branch " + std::to_string(a.branch) + " is already open");
                }
                br.status = BranchStatus::open;
            } else if constexpr (std::is_same_v<T, OpenReactor>) {
                ShuntReactor& r = out.reactor(a.reactor);
                if (!r.connected) {
                    throw CaseError("reactor " + std::to_string(a.reactor) + " is already disconnected");
                }
                r.connected = false;
            } else {
                ShuntReactor& r = out.reactor(a.reactor);
                if (r.connected) {
                    throw CaseError("reactor " + std::to_string(a.reactor) + " is already connected");
                }
                r.connected = true;
            }
        },
        action);
    return out;
}

double parallel_reactance(double x1, double x2) { return x1 * x2 / (x1 + x2); }

// ---------------------------------------------------------------------------

void stamp_branch(std::vector<Eigen::Triplet<Complex>>& triplets, long from, long to,
                  double r, double x, double b_charging, double tap) {
    const Complex y = 1.0 / Complex(r, x);
    const Complex half_b(0.0, b_charging / 2.0);
    triplets.emplace_back(from, from, (y + half_b) / (tap * tap));
    triplets.emplace_back(to, to, y + half_b);
    triplets.emplace_back(from, to, -y / tap);
    triplets.emplace_back(to, from, -y / tap);
}

bool AdmittanceMatrix::has_dead_island() const {
    return std::any_of(island_has_source.begin(), island_has_source.end(), [](bool s) { return !s; });
}

AdmittanceMatrix assemble_admittance(const GridCase& grid) {
    const auto n = static_cast<long>(grid.buses.size());
    std::unordered_map<BusId, long> index;
    for (long i = 0; i < n; ++i) {
        index.emplace(grid.buses[static_cast<std::size_t>(i)].id, i);
    }
    auto idx = [&index](BusId id) {
        auto it = index.find(id);
        if (it == index.end()) {
            throw CaseError("unknown bus id " + std::to_string(id));
        }
        return it->second;
    };

    std::vector<Eigen::Triplet<Complex>> triplets;
    std::vector<std::vector<long>> adjacency(static_cast<std::size_t>(n));
    auto link = [&adjacency](long a, long b) {
        adjacency[static_cast<std::size_t>(a)].push_back(b);
        adjacency[static_cast<std::size_t>(b)].push_back(a);
    };

    for (const auto& br : grid.branches) {
        if (!br.in_service()) {
            continue;
        }
        const long f = idx(br.from);
        const long t = idx(br.to);
        stamp_branch(triplets, f, t, br.r, br.x, br.b_charging, br.tap);
        link(f, t);
    }
    for (const auto& tr : grid.transformers) {
        if (!tr.in_service) {
            continue;
        }
        const long f = idx(tr.hv_bus);
        const long t = idx(tr.lv_bus);
        stamp_branch(triplets, f, t, tr.r, tr.x, 0.0, tr.n_tap());
        link(f, t);
    }
    for (const auto& r : grid.reactors) {
        if (r.connected) {
            const long k = idx(r.bus);
            triplets.emplace_back(k, k, Complex(0.0, -r.b_sh));
        }
    }

    AdmittanceMatrix out;
    out.order.reserve(static_cast<std::size_t>(n));
    for (const auto& b : grid.buses) {
        out.order.push_back(b.id);
    }
    out.y.resize(n, n);
    out.y.setFromTriplets(triplets.begin(), triplets.end());
    out.y.makeCompressed();

    std::vector<bool> source(static_cast<std::size_t>(n), false);
    if (grid.slack_bus != 0 && grid.has_bus(grid.slack_bus)) {
        source[static_cast<std::size_t>(idx(grid.slack_bus))] = true;
    }
    for (const auto& g : grid.generators) {
        if (g.online) {
            source[static_cast<std::size_t>(idx(g.bus))] = true;
        }
    }
    for (const auto& g : grid.ibr_groups) {
        if (g.online) {
            source[static_cast<std::size_t>(idx(g.collector_bus))] = true;
        }
    }

    std::vector<int> label(static_cast<std::size_t>(n), -1);
    for (long s = 0; s < n; ++s) {
        if (label[static_cast<std::size_t>(s)] >= 0) {
            continue;
        }
        const int id = static_cast<int>(out.islands.size());
        std::vector<int> members;
        std::vector<long> stack{s};
        label[static_cast<std::size_t>(s)] = id;
        bool has_source = false;
        while (!stack.empty()) {
            const long k = stack.back();
            stack.pop_back();
            members.push_back(static_cast<int>(k));
            has_source = has_source || source[static_cast<std::size_t>(k)];
            for (long m : adjacency[static_cast<std::size_t>(k)]) {
                if (label[static_cast<std::size_t>(m)] < 0) {
                    label[static_cast<std::size_t>(m)] = id;
                    stack.push_back(m);
                }
            }
        }
        std::sort(members.begin(), members.end());
        out.islands.push_back(std::move(members));
        out.island_has_source.push_back(has_source);
    }
    return out;
}

double collector_voltage(const GsuTransformer& transformer, double v_trans) {
    const double n = transformer.n_tap();
    if (n <= 0.0) {
        throw CaseError("transformer ratio must be positive");
    }
    return v_trans / n;
}

std::vector<double> collector_voltages(const GridCase& grid, const std::vector<double>& v) {
    std::vector<double> out;
    out.reserve(grid.ibr_groups.size());
    for (const auto& g : grid.ibr_groups) {
        out.push_back(v[grid.bus_index(g.collector_bus)]);
    }
    return out;
}

double reactor_absorption_mvar(const GridCase& grid, const std::vector<double>& v) {
    double total = 0.0;
    for (const auto& r : grid.reactors) {
        if (r.connected) {
            const double vk = v[grid.bus_index(r.bus)];
            total += r.b_sh * vk * vk * grid.s_base;
        }
    }
    return total;
}

}  // namespace gridcascade
