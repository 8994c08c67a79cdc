#include "gridcascade/case_io.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "json_read.hpp"

namespace gridcascade {

namespace {

const char* to_string(BusKind k) { return k == BusKind::collector ? "collector" : "transmission"; }
const char* to_string(TapMode m) { return m == TapMode::fixed ? "fixed" : "lagged_oltc"; }
const char* to_string(AvrMode m) { return m == AvrMode::droop ? "droop" : "deadband"; }
const char* to_string(HvdcMode m) { return m == HvdcMode::pmode1 ? "PMODE1" : "PMODE3"; }

ojson zip_json(const ZipCoeffs& c) { return ojson::array({c.z, c.i, c.p}); }

ZipCoeffs zip_from(const detail::Reader& r) {
    const auto& arr = r.value();
    if (!arr.is_array() || arr.size() != 3) {
        throw FormatError(r.path(), "expected [z, i, p]");
    }
    ZipCoeffs c;
    c.z = r.at(0).number();
    c.i = r.at(1).number();
    c.p = r.at(2).number();
    return c;
}

}  // namespace

ojson case_to_json(const GridCase& grid) {
    ojson doc;
    doc["schema"] = kCaseSchema;
    doc["name"] = grid.name;
    doc["s_base"] = grid.s_base;
    doc["slack_bus"] = grid.slack_bus;

    ojson buses = ojson::array();
    for (const auto& b : grid.buses) {
        buses.push_back(ojson{{"id", b.id}, {"kind", to_string(b.kind)}, {"nominal_kv", b.nominal_kv},
                              {"area", b.area}, {"v", b.v}, {"theta", b.theta}});
    }
    doc["buses"] = std::move(buses);

    ojson branches = ojson::array();
    for (const auto& br : grid.branches) {
        branches.push_back(ojson{{"id", br.id}, {"from", br.from}, {"to", br.to}, {"r", br.r}, {"x", br.x},
                                 {"b_charging", br.b_charging}, {"tap", br.tap},
                                 {"status", br.in_service() ? "in_service" : "open"},
                                 {"mesh_candidate", br.mesh_candidate}});
    }
    doc["branches"] = std::move(branches);

    ojson transformers = ojson::array();
    for (const auto& t : grid.transformers) {
        transformers.push_back(ojson{{"id", t.id}, {"hv_bus", t.hv_bus}, {"lv_bus", t.lv_bus}, {"r", t.r},
                                     {"x", t.x}, {"n_nom", t.n_nom}, {"alpha", t.alpha}, {"k_tap", t.k_tap},
                                     {"k_min", t.k_min}, {"k_max", t.k_max}, {"tap_mode", to_string(t.tap_mode)},
                                     {"oltc_delay", t.oltc_delay},
                                     {"oltc_target_band", ojson::array({t.band_lo, t.band_hi})},
                                     {"in_service", t.in_service}});
    }
    doc["transformers"] = std::move(transformers);

    ojson reactors = ojson::array();
    for (const auto& r : grid.reactors) {
        reactors.push_back(ojson{{"id", r.id}, {"name", r.name}, {"bus", r.bus}, {"b_sh", r.b_sh},
                                 {"status", r.connected ? "connected" : "disconnected"}});
    }
    doc["reactors"] = std::move(reactors);

    ojson gens = ojson::array();
    for (const auto& g : grid.generators) {
        const auto& a = g.avr;
        gens.push_back(ojson{
            {"id", g.id}, {"bus", g.bus}, {"p", g.p}, {"q", g.q}, {"v_set", g.v_set},
            {"q_limits", ojson::array({g.q_min, g.q_max})}, {"h", g.h}, {"d", g.d},
            {"x_d_prime", g.x_d_prime}, {"rating_mva", g.rating_mva}, {"online", g.online},
            {"avr", ojson{{"mode", to_string(a.mode)}, {"v_ref", a.v_ref}, {"k_q", a.k_q},
                          {"band", ojson::array({a.band_lo, a.band_hi})}, {"q_lim", a.q_lim},
                          {"lag_tau", a.lag_tau}, {"ramp_mvar_s", a.ramp_mvar_s}}}});
    }
    doc["generators"] = std::move(gens);

    ojson ibrs = ojson::array();
    for (const auto& g : grid.ibr_groups) {
        ibrs.push_back(ojson{{"id", g.id}, {"name", g.name}, {"collector_bus", g.collector_bus}, {"p", g.p},
                             {"q", g.q}, {"online", g.online}, {"transformer", g.transformer_id},
                             {"reactors", g.reactor_ids}, {"relay_threshold", g.relay_threshold},
                             {"relay_dwell", g.relay_dwell}});
    }
    doc["ibr_groups"] = std::move(ibrs);

    ojson links = ojson::array();
    for (const auto& h : grid.hvdc) {
        links.push_back(ojson{{"id", h.id}, {"terminal_a", h.terminal_a}, {"terminal_b", h.terminal_b},
                              {"mode", to_string(h.mode)}, {"p_ref", h.p_ref}, {"p0", h.p0}, {"k", h.k},
                              {"t", h.t}, {"p_set", h.p_set}, {"online", h.online}});
    }
    doc["hvdc"] = std::move(links);

    ojson loads = ojson::array();
    for (const auto& l : grid.loads) {
        ojson item{{"id", l.id}, {"bus", l.bus}, {"p_nom", l.p_nom}, {"q_nom", l.q_nom},
                   {"zip_p", zip_json(l.zip_p)}, {"zip_q", zip_json(l.zip_q)}, {"sheddable", l.sheddable}};
        item["ufls_stage"] = l.ufls_stage ? ojson(*l.ufls_stage) : ojson(nullptr);
        loads.push_back(std::move(item));
    }
    doc["loads"] = std::move(loads);
    return doc;
}

GridCase case_from_json(const nlohmann::json& doc) {
    detail::Reader root(doc, "");
    if (!doc.is_object()) {
        throw FormatError("", "case document must be an object");
    }
    const std::string schema = root.field("schema").string();
    if (schema != kCaseSchema) {
        throw FormatError("/schema", "unsupported schema '" + schema + "'");
    }
    GridCase g;
    g.name = root.optional("name") ? root.field("name").string() : std::string{};
    g.s_base = root.field("s_base").number();
    g.slack_bus = root.optional("slack_bus") ? root.field("slack_bus").integer() : 0;

    root.field("buses").each([&g](const detail::Reader& r) {
        Bus b;
        b.id = r.field("id").integer();
        b.kind = r.field("kind").choice<BusKind>({{"transmission", BusKind::transmission},
                                                   {"collector", BusKind::collector}});
        b.nominal_kv = r.field("nominal_kv").number();
        b.area = r.optional("area") ? r.field("area").string() : std::string{};
        b.v = r.optional("v") ? r.field("v").number() : 1.0;
        b.theta = r.optional("theta") ? r.field("theta").number() : 0.0;
        g.buses.push_back(b);
    });
    root.field("branches").each([&g](const detail::Reader& r) {
        Branch br;
        br.id = r.field("id").integer();
        br.from = r.field("from").integer();
        br.to = r.field("to").integer();
        br.r = r.field("r").number();
        br.x = r.field("x").number();
        br.b_charging = r.optional("b_charging") ? r.field("b_charging").number() : 0.0;
        br.tap = r.optional("tap") ? r.field("tap").number() : 1.0;
        br.status = r.field("status").choice<BranchStatus>({{"in_service", BranchStatus::in_service},
                                                            {"open", BranchStatus::open}});
        br.mesh_candidate = r.optional("mesh_candidate") && r.field("mesh_candidate").boolean();
        g.branches.push_back(br);
    });
    root.field("transformers").each([&g](const detail::Reader& r) {
        GsuTransformer t;
        t.id = r.field("id").integer();
        t.hv_bus = r.field("hv_bus").integer();
        t.lv_bus = r.field("lv_bus").integer();
        t.r = r.optional("r") ? r.field("r").number() : 0.0;
        t.x = r.field("x").number();
        t.n_nom = r.field("n_nom").number();
        t.alpha = r.field("alpha").number();
        t.k_tap = r.field("k_tap").integer();
        t.k_min = r.optional("k_min") ? r.field("k_min").integer() : -10;
        t.k_max = r.optional("k_max") ? r.field("k_max").integer() : 10;
        t.tap_mode = r.field("tap_mode").choice<TapMode>({{"fixed", TapMode::fixed},
                                                          {"lagged_oltc", TapMode::lagged_oltc}});
        t.oltc_delay = r.optional("oltc_delay") ? r.field("oltc_delay").number() : 30.0;
        if (r.optional("oltc_target_band")) {
            const auto band = r.field("oltc_target_band");
            t.band_lo = band.at(0).number();
            t.band_hi = band.at(1).number();
        }
        t.in_service = !r.optional("in_service") || r.field("in_service").boolean();
        g.transformers.push_back(t);
    });
    root.field("reactors").each([&g](const detail::Reader& r) {
        ShuntReactor s;
        s.id = r.field("id").integer();
        s.name = r.optional("name") ? r.field("name").string() : std::string{};
        s.bus = r.field("bus").integer();
        s.b_sh = r.field("b_sh").number();
        s.connected = r.field("status").choice<bool>({{"connected", true}, {"disconnected", false}});
        g.reactors.push_back(s);
    });
    root.field("generators").each([&g](const detail::Reader& r) {
        SyncGenerator s;
        s.id = r.field("id").integer();
        s.bus = r.field("bus").integer();
        s.p = r.field("p").number();
        s.q = r.optional("q") ? r.field("q").number() : 0.0;
        s.v_set = r.field("v_set").number();
        const auto lim = r.field("q_limits");
        s.q_min = lim.at(0).number();
        s.q_max = lim.at(1).number();
        s.h = r.field("h").number();
        s.d = r.field("d").number();
        s.x_d_prime = r.field("x_d_prime").number();
        s.rating_mva = r.field("rating_mva").number();
        s.online = !r.optional("online") || r.field("online").boolean();
        const auto avr = r.field("avr");
        s.avr.mode = avr.field("mode").choice<AvrMode>({{"droop", AvrMode::droop}, {"deadband", AvrMode::deadband}});
        s.avr.v_ref = avr.field("v_ref").number();
        s.avr.k_q = avr.field("k_q").number();
        const auto band = avr.field("band");
        s.avr.band_lo = band.at(0).number();
        s.avr.band_hi = band.at(1).number();
        s.avr.q_lim = avr.field("q_lim").number();
        s.avr.lag_tau = avr.field("lag_tau").number();
        s.avr.ramp_mvar_s = avr.optional("ramp_mvar_s") ? avr.field("ramp_mvar_s").number() : 0.0;
        g.generators.push_back(s);
    });
    root.field("ibr_groups").each([&g](const detail::Reader& r) {
        IbrGroup s;
        s.id = r.field("id").integer();
        s.name = r.optional("name") ? r.field("name").string() : std::string{};
        s.collector_bus = r.field("collector_bus").integer();
        s.p = r.field("p").number();
        s.q = r.field("q").number();
        s.online = r.field("online").boolean();
        s.transformer_id = r.field("transformer").integer();
        r.field("reactors").each([&s](const detail::Reader& x) { s.reactor_ids.push_back(x.integer()); });
        s.relay_threshold = r.field("relay_threshold").number();
        s.relay_dwell = r.field("relay_dwell").number();
        g.ibr_groups.push_back(s);
    });
    root.field("hvdc").each([&g](const detail::Reader& r) {
        HvdcLink h;
        h.id = r.field("id").integer();
        h.terminal_a = r.field("terminal_a").integer();
        h.terminal_b = r.field("terminal_b").integer();
        h.mode = r.field("mode").choice<HvdcMode>({{"PMODE1", HvdcMode::pmode1}, {"PMODE3", HvdcMode::pmode3}});
        h.p_ref = r.field("p_ref").number();
        h.p0 = r.field("p0").number();
        h.k = r.field("k").number();
        h.t = r.field("t").number();
        h.p_set = r.field("p_set").number();
        h.online = !r.optional("online") || r.field("online").boolean();
        g.hvdc.push_back(h);
    });
    root.field("loads").each([&g](const detail::Reader& r) {
        ZipLoad l;
        l.id = r.field("id").integer();
        l.bus = r.field("bus").integer();
        l.p_nom = r.field("p_nom").number();
        l.q_nom = r.field("q_nom").number();
        l.zip_p = r.optional("zip_p") ? zip_from(r.field("zip_p")) : ZipCoeffs{};
        l.zip_q = r.optional("zip_q") ? zip_from(r.field("zip_q")) : ZipCoeffs{};
        l.sheddable = !r.optional("sheddable") || r.field("sheddable").boolean();
        if (r.optional("ufls_stage") && !r.field("ufls_stage").value().is_null()) {
            l.ufls_stage = r.field("ufls_stage").integer();
        }
        g.loads.push_back(l);
    });

    try {
        g.validate();
    } catch (const CaseError& e) {
        throw FormatError("", e.what());
    }
    return g;
}

std::string serialize_case(const GridCase& grid) { return case_to_json(grid).dump(2) + "\n"; }

GridCase parse_case(std::string_view text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text.begin(), text.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("", std::string("malformed JSON: ") + e.what());
    }
    return case_from_json(doc);
}

GridCase load_case_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read case file " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_case(ss.str());
}

void save_case_file(const GridCase& grid, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write case file " + path);
    }
    out << serialize_case(grid);
}

// ---------------------------------------------------------------------------
// MATPOWER

namespace {

std::vector<std::vector<double>> matpower_matrix(std::string_view text, std::string_view name) {
    const std::string key = "mpc." + std::string(name);
    auto pos = text.find(key);
    while (pos != std::string_view::npos) {
        auto after = text.find_first_not_of(" \t", pos + key.size());
        if (after != std::string_view::npos && text[after] == '=') {
            break;
        }
        pos = text.find(key, pos + key.size());
    }
    if (pos == std::string_view::npos) {
        throw FormatError("/" + std::string(name), "matrix not found in MATPOWER text");
    }
    const auto open = text.find('[', pos);
    const auto close = text.find(']', open);
    if (open == std::string_view::npos || close == std::string_view::npos) {
        throw FormatError("/" + std::string(name), "unterminated matrix");
    }
    std::vector<std::vector<double>> rows;
    std::vector<double> row;
    std::string_view body = text.substr(open + 1, close - open - 1);
    std::size_t i = 0;
    while (i < body.size()) {
        const char c = body[i];
        if (c == '%') {
            i = body.find('\n', i);
            if (i == std::string_view::npos) {
                break;
            }
            continue;
        }
        if (c == ';' || c == '\n') {
            if (!row.empty()) {
                rows.push_back(std::move(row));
                row.clear();
            }
            ++i;
            continue;
        }
        if (c == ' ' || c == '\t' || c == '\r' || c == ',') {
            ++i;
            continue;
        }
        std::size_t end = i;
        while (end < body.size() && std::string_view(" \t\r\n;,%").find(body[end]) == std::string_view::npos) {
            ++end;
        }
        const std::string token(body.substr(i, end - i));
        try {
            std::size_t used = 0;
            row.push_back(std::stod(token, &used));
            if (used != token.size()) {
                throw std::invalid_argument(token);
            }
        } catch (const std::exception&) {
            throw FormatError("/" + std::string(name) + "/" + std::to_string(rows.size()),
                              "bad number '" + token + "'");
        }
        i = end;
    }
    if (!row.empty()) {
        rows.push_back(std::move(row));
    }
    return rows;
}

double matpower_scalar(std::string_view text, std::string_view name, double fallback) {
    const std::string key = "mpc." + std::string(name);
    const auto pos = text.find(key);
    if (pos == std::string_view::npos) {
        return fallback;
    }
    const auto eq = text.find('=', pos);
    const auto semi = text.find(';', eq);
    return std::stod(std::string(text.substr(eq + 1, semi - eq - 1)));
}

}  // namespace

GridCase parse_matpower(std::string_view text) {
    GridCase g;
    g.name = "matpower";
    g.s_base = matpower_scalar(text, "baseMVA", 100.0);

    const auto bus_rows = matpower_matrix(text, "bus");
    int load_id = 1;
    for (std::size_t k = 0; k < bus_rows.size(); ++k) {
        const auto& r = bus_rows[k];
        if (r.size() < 13) {
            throw FormatError("/bus/" + std::to_string(k), "expected 13 columns");
        }
        Bus b;
        b.id = static_cast<BusId>(r[0]);
        b.kind = BusKind::transmission;
        b.nominal_kv = r[9];
        b.area = std::to_string(static_cast<int>(r[6]));
        b.v = r[7];
        b.theta = r[8] * 3.14159265358979323846 / 180.0;
        g.buses.push_back(b);
        if (static_cast<int>(r[1]) == 3) {
            g.slack_bus = b.id;
        }
        if (r[2] != 0.0 || r[3] != 0.0) {
            ZipLoad l;
            l.id = load_id++;
            l.bus = b.id;
            l.p_nom = r[2] / g.s_base;
            l.q_nom = r[3] / g.s_base;
            l.sheddable = true;
            g.loads.push_back(l);
        }
        if (r[4] != 0.0 || r[5] != 0.0) {
            throw FormatError("/bus/" + std::to_string(k), "fixed bus shunts are not supported");
        }
    }

    const auto gen_rows = matpower_matrix(text, "gen");
    int gen_id = 1;
    for (std::size_t k = 0; k < gen_rows.size(); ++k) {
        const auto& r = gen_rows[k];
        if (r.size() < 10) {
            throw FormatError("/gen/" + std::to_string(k), "expected at least 10 columns");
        }
        SyncGenerator s;
        s.id = gen_id++;
        s.bus = static_cast<BusId>(r[0]);
        s.p = r[1] / g.s_base;
        s.q = r[2] / g.s_base;
        s.q_max = r[3] / g.s_base;
        s.q_min = r[4] / g.s_base;
        s.v_set = r[5];
        s.online = r[7] > 0.0;
        s.rating_mva = r[8];
        s.avr.v_ref = s.v_set;
        g.generators.push_back(s);
    }

    const auto branch_rows = matpower_matrix(text, "branch");
    int branch_id = 1;
    for (std::size_t k = 0; k < branch_rows.size(); ++k) {
        const auto& r = branch_rows[k];
        if (r.size() < 11) {
            throw FormatError("/branch/" + std::to_string(k), "expected at least 11 columns");
        }
        if (r[9] != 0.0) {
            throw FormatError("/branch/" + std::to_string(k), "phase shifters are not supported");
        }
        Branch br;
        br.id = branch_id++;
        br.from = static_cast<BusId>(r[0]);
        br.to = static_cast<BusId>(r[1]);
        br.r = r[2];
        br.x = r[3];
        br.b_charging = r[4];
        br.tap = r[8] == 0.0 ? 1.0 : r[8];
        br.status = r[10] > 0.0 ? BranchStatus::in_service : BranchStatus::open;
        g.branches.push_back(br);
    }
    try {
        g.validate();
    } catch (const CaseError& e) {
        throw FormatError("", e.what());
    }
    return g;
}

}  // namespace gridcascade
