#include <fstream>
#include <sstream>

#include "gridcascade/simengine.hpp"
#include "json_read.hpp"

namespace gridcascade {

namespace {

const char* device_kind_name(DeviceKind k) {
    switch (k) {
        case DeviceKind::ibr: return "ibr";
        case DeviceKind::generator: return "generator";
        case DeviceKind::line: return "line";
        case DeviceKind::transformer: return "transformer";
        case DeviceKind::hvdc: return "hvdc";
    }
    return "ibr";
}

const char* hvdc_mode_name(HvdcMode m) { return m == HvdcMode::pmode1 ? "PMODE1" : "PMODE3"; }
const char* avr_mode_name(AvrMode m) { return m == AvrMode::droop ? "droop" : "deadband"; }
const char* policy_name(UflsPolicy p) { return p == UflsPolicy::conventional ? "conventional" : "voltage_aware"; }

}  // namespace

std::string action_name(const ScenarioAction& action) {
    static const char* names[] = {"MeshLine",    "OpenLine",    "OpenReactor", "CloseReactor", "SetHvdcMode",
                                  "SetHvdcPower", "ScaleExport", "TripDevice",  "SetAvrMode",   "InjectQDisturbance"};
    return names[action.index()];
}

ojson action_params(const ScenarioAction& action) {
    return std::visit(
        [](const auto& a) -> ojson {
            using T = std::decay_t<decltype(a)>;
            ojson p = ojson::object();
            if constexpr (std::is_same_v<T, MeshLine> || std::is_same_v<T, OpenLine>) {
                p["branch"] = a.branch;
            } else if constexpr (std::is_same_v<T, OpenReactor> || std::is_same_v<T, CloseReactor>) {
                p["reactor"] = a.reactor;
            } else if constexpr (std::is_same_v<T, SetHvdcMode>) {
                p["link"] = a.link;
                p["mode"] = hvdc_mode_name(a.mode);
                if (a.p_ref_mw) {
                    p["p_ref_mw"] = *a.p_ref_mw;
                }
            } else if constexpr (std::is_same_v<T, SetHvdcPower>) {
                p["link"] = a.link;
                p["p_mw"] = a.p_mw;
            } else if constexpr (std::is_same_v<T, ScaleExport>) {
                p["factor"] = a.factor;
            } else if constexpr (std::is_same_v<T, TripDevice>) {
                p["kind"] = device_kind_name(a.kind);
                p["id"] = a.id;
            } else if constexpr (std::is_same_v<T, SetAvrMode>) {
                p["mode"] = avr_mode_name(a.mode);
                if (!a.generators.empty()) {
                    p["generators"] = a.generators;
                }
            } else if constexpr (std::is_same_v<T, InjectQDisturbance>) {
                p["bus"] = a.bus;
                p["mvar"] = a.mvar;
            }
            return p;
        },
        action);
}

ScenarioAction action_from_json(const std::string& name, const nlohmann::json& params, const std::string& path) {
    const detail::Reader r(params, path);
    if (!params.is_object()) {
        throw FormatError(path, "expected object");
    }
    if (name == "MeshLine") return MeshLine{r.field("branch").integer()};
    if (name == "OpenLine") return OpenLine{r.field("branch").integer()};
    if (name == "OpenReactor") return OpenReactor{r.field("reactor").integer()};
    if (name == "CloseReactor") return CloseReactor{r.field("reactor").integer()};
    if (name == "SetHvdcMode") {
        SetHvdcMode a;
        a.link = r.optional("link") ? r.field("link").integer() : 1;
        a.mode = r.field("mode").choice<HvdcMode>({{"PMODE1", HvdcMode::pmode1}, {"PMODE3", HvdcMode::pmode3}});
        if (r.optional("p_ref_mw")) {
            a.p_ref_mw = r.field("p_ref_mw").number();
        }
        return a;
    }
    if (name == "SetHvdcPower") {
        SetHvdcPower a;
        a.link = r.optional("link") ? r.field("link").integer() : 1;
        a.p_mw = r.field("p_mw").number();
        return a;
    }
    if (name == "ScaleExport") return ScaleExport{r.field("factor").number()};
    if (name == "TripDevice") {
        TripDevice a;
        a.kind = r.field("kind").choice<DeviceKind>({{"ibr", DeviceKind::ibr},
                                                    {"generator", DeviceKind::generator},
                                                    {"line", DeviceKind::line},
                                                    {"transformer", DeviceKind::transformer},
                                                    {"hvdc", DeviceKind::hvdc}});
        a.id = r.field("id").integer();
        return a;
    }
    if (name == "SetAvrMode") {
        SetAvrMode a;
        a.mode = r.field("mode").choice<AvrMode>({{"droop", AvrMode::droop}, {"deadband", AvrMode::deadband}});
        if (r.optional("generators")) {
            r.field("generators").each([&a](const detail::Reader& g) { a.generators.push_back(g.integer()); });
        }
        return a;
    }
    if (name == "InjectQDisturbance") {
        InjectQDisturbance a;
        a.bus = r.field("bus").integer();
        a.mvar = r.field("mvar").number();
        return a;
    }
    throw FormatError(path, "unknown action '" + name + "'");
}

// ---------------------------------------------------------------------------

ojson config_to_json(const SimConfig& c) {
    ojson j;
    j["dt"] = c.dt;
    j["t_end"] = c.t_end;
    j["pf_tol"] = c.pf_tol;
    j["collapse"] = {{"pf_failures", c.collapse.pf_failures},
                     {"freq_floor_hz", c.collapse.freq_floor_hz},
                     {"v_floor_pu", c.collapse.v_floor_pu}};
    j["decimation"] = c.decimation;
    j["seed"] = c.seed;
    ojson stages = ojson::array();
    for (const auto& s : c.ufls.stages) {
        stages.push_back({{"hz", s.hz}, {"fraction", s.fraction}});
    }
    j["ufls"] = {{"policy", policy_name(c.ufls.policy)}, {"overvoltage_pu", c.ufls.overvoltage_pu}, {"stages", stages}};
    j["delta_crit"] = c.delta_crit;
    j["transmission_limit"] = c.transmission_limit;
    j["machine_q_tau"] = c.machine_q_tau;
    j["scada_noise"] = c.scada_noise;
    return j;
}

void apply_config_json(SimConfig& c, const nlohmann::json& doc, const std::string& path) {
    const detail::Reader r(doc, path);
    if (!doc.is_object()) {
        throw FormatError(path, "expected object");
    }
    static const char* known[] = {"dt",   "t_end",      "pf_tol",     "collapse",           "decimation",    "seed",
                                  "ufls", "delta_crit", "transmission_limit", "machine_q_tau", "scada_noise"};
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        if (std::find(std::begin(known), std::end(known), it.key()) == std::end(known)) {
            throw FormatError(path + "/" + it.key(), "unknown config key");
        }
    }
    if (r.optional("dt")) c.dt = r.field("dt").number();
    if (r.optional("t_end")) c.t_end = r.field("t_end").number();
    if (r.optional("pf_tol")) c.pf_tol = r.field("pf_tol").number();
    if (r.optional("decimation")) c.decimation = r.field("decimation").integer();
    if (r.optional("seed")) {
        const auto s = r.field("seed");
        if (!s.value().is_number_unsigned() && !(s.value().is_number_integer() && s.value().get<long long>() >= 0)) {
            throw FormatError(s.path(), "expected non-negative integer");
        }
        c.seed = s.value().get<std::uint64_t>();
    }
    if (r.optional("delta_crit")) c.delta_crit = r.field("delta_crit").number();
    if (r.optional("transmission_limit")) c.transmission_limit = r.field("transmission_limit").number();
    if (r.optional("machine_q_tau")) c.machine_q_tau = r.field("machine_q_tau").number();
    if (r.optional("scada_noise")) c.scada_noise = r.field("scada_noise").number();
    if (r.optional("collapse")) {
        const auto k = r.field("collapse");
        if (k.optional("pf_failures")) c.collapse.pf_failures = k.field("pf_failures").integer();
        if (k.optional("freq_floor_hz")) c.collapse.freq_floor_hz = k.field("freq_floor_hz").number();
        if (k.optional("v_floor_pu")) c.collapse.v_floor_pu = k.field("v_floor_pu").number();
    }
    if (r.optional("ufls")) {
        const auto u = r.field("ufls");
        if (u.optional("policy")) {
            c.ufls.policy = u.field("policy").choice<UflsPolicy>(
                {{"conventional", UflsPolicy::conventional}, {"voltage_aware", UflsPolicy::voltage_aware}});
        }
        if (u.optional("overvoltage_pu")) c.ufls.overvoltage_pu = u.field("overvoltage_pu").number();
        if (u.optional("stages")) {
            c.ufls.stages.clear();
            u.field("stages").each([&c](const detail::Reader& s) {
                c.ufls.stages.push_back({s.field("hz").number(), s.field("fraction").number()});
            });
        }
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(path, e.what());
    }
}

void apply_config_override(SimConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw FormatError("--set", "expected key=value, got '" + assignment + "'");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
        value = text;
    }
    nlohmann::json doc = nlohmann::json::object();
    nlohmann::json* cur = &doc;
    std::size_t start = 0;
    for (;;) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (dot == std::string::npos) {
            (*cur)[part] = value;
            break;
        }
        cur = &(*cur)[part];
        start = dot + 1;
    }
    apply_config_json(c, doc, "--set");
}

// ---------------------------------------------------------------------------

ojson scenario_to_json(const Scenario& s) {
    ojson j;
    j["schema"] = kScenarioSchema;
    ojson events = ojson::array();
    for (const auto& e : s.events) {
        events.push_back({{"t", e.t}, {"action", action_name(e.action)}, {"params", action_params(e.action)}});
    }
    j["events"] = events;
    j["config"] = ojson::parse(s.config.dump());
    return j;
}

Scenario scenario_from_json(const nlohmann::json& doc) {
    const detail::Reader r(doc, "");
    if (!doc.is_object()) {
        throw FormatError("", "expected object");
    }
    if (r.optional("schema") && r.field("schema").string() != kScenarioSchema) {
        throw FormatError("/schema", "unsupported schema");
    }
    Scenario s;
    r.field("events").each([&s](const detail::Reader& e) {
        ScenarioEvent ev;
        ev.t = e.field("t").number();
        if (!(ev.t >= 0.0)) {
            throw FormatError(e.path() + "/t", "event time must be non-negative");
        }
        static const nlohmann::json empty = nlohmann::json::object();
        const nlohmann::json& params = e.optional("params") ? e.field("params").value() : empty;
        ev.action = action_from_json(e.field("action").string(), params, e.path() + "/params");
        s.events.push_back(std::move(ev));
    });
    std::stable_sort(s.events.begin(), s.events.end(), [](const auto& a, const auto& b) { return a.t < b.t; });
    if (r.optional("config")) {
        s.config = r.field("config").value();
        SimConfig probe;
        apply_config_json(probe, s.config, "/config");
    }
    return s;
}

Scenario load_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("", "cannot open " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("", std::string("malformed JSON: ") + e.what());
    }
    return scenario_from_json(doc);
}

}  // namespace gridcascade
