#include "cli.hpp"

#include <csignal>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "gridcascade/experiments.hpp"
#include "gridcascade/fingerprint.hpp"
#include "gridcascade/measures.hpp"
#include "gridcascade/opserver.hpp"
#include "gridcascade/trace_io.hpp"

namespace fs = std::filesystem;

namespace gridcascade::cli {

namespace {

struct Inputs {
    std::string case_path;
    std::string scenario_path;
    std::string builtin;
    std::optional<double> dt;
    std::optional<double> t_end;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> sets;
};

void add_input_flags(CLI::App* app, Inputs& in) {
    app->add_option("--case", in.case_path, "case file (gridcase-v1 JSON or MATPOWER .m)");
    app->add_option("--scenario", in.scenario_path, "scenario-v1 JSON");
    app->add_option("--builtin", in.builtin, "built-in scenario")->check(CLI::IsMember({"iberian"}));
    app->add_option("--dt", in.dt, "time step, s");
    app->add_option("--t-end", in.t_end, "end time, s");
    app->add_option("--seed", in.seed, "random seed");
    app->add_option("--set", in.sets, "config override key=value (dotted keys nest)");
}

struct Resolved {
    GridCase grid;
    std::vector<ScenarioEvent> events;
    SimConfig config;
    ojson scenario_doc;
};

GridCase read_case(const std::string& path) {
    if (fs::path(path).extension() == ".m") {
        std::ifstream f(path);
        if (!f) throw FormatError("", "cannot open " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        return parse_matpower(ss.str());
    }
    return load_case_file(path);
}

Resolved resolve(const Inputs& in) {
    Resolved r;
    if (!in.builtin.empty() && !in.case_path.empty()) {
        throw FormatError("", "--builtin and --case are exclusive");
    }
    if (!in.builtin.empty()) {
        BuiltinScenario b = builtin_iberian_scenario();
        r.grid = std::move(b.grid);
        r.events = std::move(b.events);
        r.config = b.config;
    } else if (!in.case_path.empty()) {
        r.grid = read_case(in.case_path);
    } else {
        throw FormatError("", "one of --case or --builtin is required");
    }
    if (!in.scenario_path.empty()) {
        const Scenario s = load_scenario_file(in.scenario_path);
        r.events = s.events;
        apply_config_json(r.config, s.config, "/config");
    }
    if (in.dt) r.config.dt = *in.dt;
    if (in.t_end) r.config.t_end = *in.t_end;
    if (in.seed) r.config.seed = *in.seed;
    for (const auto& s : in.sets) apply_config_override(r.config, s);
    try {
        r.config.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError("/config", e.what());
    }
    r.grid.validate();
    Scenario sc{r.events, nlohmann::json::parse(config_to_json(r.config).dump())};
    r.scenario_doc = scenario_to_json(sc);
    return r;
}

void write_text(const fs::path& p, const std::string& text) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + p.string());
        f << text;
    }
    fs::rename(tmp, p);
}

ojson manifest(const Resolved& r, const std::vector<std::string>& outputs, const std::string& command) {
    ojson m;
    m["schema"] = "manifest-v1";
    m["tool"] = "gridcascade";
    m["version"] = kToolVersion;
    m["command"] = command;
    m["case"] = r.grid.name;
    m["case_fingerprint"] = sha256_hex(serialize_case(r.grid));
    m["scenario_fingerprint"] = sha256_hex(r.scenario_doc.dump());
    m["seed"] = r.config.seed;
    m["config"] = config_to_json(r.config);
    m["outputs"] = outputs;
    return m;
}

int cmd_run(const Inputs& in, const std::string& out_dir, std::ostream& out) {
    const Resolved r = resolve(in);
    Simulation sim(r.grid, r.config);
    for (const auto& e : r.events) sim.schedule(e);
    sim.run();
    const SimTrace& trace = sim.trace();
    fs::create_directories(out_dir);
    write_trace_files(trace, out_dir);
    ojson m = manifest(r, {"trace.jsonl", "trace.csv", "manifest.json"}, "run");
    m["terminal"] = terminal_json(trace.terminal);
    write_text(fs::path(out_dir) / "manifest.json", m.dump(2) + "\n");
    out << to_string(trace.terminal.status) << " at t=" << trace.terminal.t;
    if (!trace.terminal.reason.empty()) out << " (" << trace.terminal.reason << ")";
    out << '\n';
    return trace.terminal.status == RunStatus::collapsed ? kCollapsed : kCompleted;
}

int cmd_counterfactual(const std::string& name, const std::string& out_dir, int workers, std::ostream& out) {
    const auto runs = run_counterfactual(name, workers);
    fs::create_directories(out_dir);
    for (const auto& r : runs) {
        const fs::path d = fs::path(out_dir) / r.name;
        fs::create_directories(d);
        write_trace_files(r.trace, d);
    }
    const std::string csv = summary_csv(runs);
    write_text(fs::path(out_dir) / "summary.csv", csv);
    out << csv;
    return kCompleted;
}

std::vector<int> mesh_candidates(const GridCase& g) {
    std::vector<int> ids;
    for (const auto& b : g.branches) {
        if (b.mesh_candidate && !b.in_service()) ids.push_back(b.id);
    }
    return ids;
}

int cmd_screen(const Inputs& in, std::vector<int> candidates, std::vector<BusId> probes, double horizon,
               const std::string& out_dir, int workers, std::ostream& out) {
    const Resolved r = resolve(in);
    const std::vector<int> all = mesh_candidates(r.grid);
    if (candidates.empty()) candidates = all;
    for (int c : candidates) {
        if (std::find(all.begin(), all.end(), c) == all.end()) {
            throw CaseError("unknown mesh candidate " + std::to_string(c));
        }
    }
    if (probes.empty()) probes = collector_hosts(r.grid);
    for (BusId p : probes) {
        if (!r.grid.has_bus(p)) throw CaseError("unknown probe bus " + std::to_string(p));
    }
    ScreenOptions opt;
    opt.horizon_s = horizon;
    const auto rows = screen_table(r.grid, candidates, probes, r.config, opt, workers);
    fs::create_directories(out_dir);
    const std::string csv = margin_table_csv(rows);
    write_text(fs::path(out_dir) / "margins.csv", csv);
    ojson j = ojson::array();
    for (const auto& row : rows) j.push_back(margin_json(row));
    write_text(fs::path(out_dir) / "margins.json", j.dump(2) + "\n");
    write_text(fs::path(out_dir) / "manifest.json",
               manifest(r, {"margins.csv", "margins.json", "manifest.json"}, "screen").dump(2) + "\n");
    out << csv;
    return kCompleted;
}

int cmd_verify(const Inputs& in, std::optional<double> at, const std::string& action, const std::string& params,
               const std::vector<std::string>& disturbances, std::optional<double> standard, double horizon,
               const std::string& out_dir, std::ostream& out) {
    const Resolved r = resolve(in);
    GridCase grid = r.grid;
    if (at) {
        Simulation sim(r.grid, r.config);
        for (const auto& e : r.events) sim.schedule(e);
        while (!sim.finished() && sim.time() < *at - 0.5 * r.config.dt) sim.step();
        grid = sim.snapshot_case();
    }
    std::optional<TopologyAction> topo;
    if (!action.empty()) {
        const ScenarioAction a = action_from_json(action, nlohmann::json::parse(params.empty() ? "{}" : params), "--params");
        if (auto* p = std::get_if<MeshLine>(&a)) topo = *p;
        else if (auto* p = std::get_if<OpenLine>(&a)) topo = *p;
        else if (auto* p = std::get_if<OpenReactor>(&a)) topo = *p;
        else if (auto* p = std::get_if<CloseReactor>(&a)) topo = *p;
        else throw FormatError("--action", "verify takes a topology action");
    }
    std::vector<QDisturbance> dist;
    if (standard) dist = standard_disturbances(grid, *standard);
    for (const auto& d : disturbances) {
        const auto colon = d.find(':');
        if (colon == std::string::npos) throw FormatError("--disturbance", "expected bus:mvar, got '" + d + "'");
        dist.push_back({{{std::stoi(d.substr(0, colon)), std::stod(d.substr(colon + 1))}}});
    }
    MarginOptions opt;
    opt.horizon_s = horizon;
    const MarginVerdict v = verify_margin(grid, topo, dist, opt);
    const ojson j = verdict_json(v);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "verdict.json", j.dump(2) + "\n");
    }
    out << j.dump(2) << '\n';
    return v.feasible ? kCompleted : kInfeasible;
}

std::atomic<bool> g_interrupted{false};

int cmd_serve(const std::string& host, int port, int http_port, std::ostream& out) {
    OpsServer server;
    const int p = server.serve_tcp(host, port);
    out << "ops-v1 on " << host << ':' << p;
    if (http_port >= 0) out << ", http on " << host << ':' << server.serve_http(host, http_port);
    out << std::endl;
    std::signal(SIGINT, [](int) { g_interrupted = true; });
    std::signal(SIGTERM, [](int) { g_interrupted = true; });
    while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    return kCompleted;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"gridcascade: cascade simulation and operator decision support"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    Inputs in;
    std::string out_dir;
    int workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

    auto* run = app.add_subcommand("run", "run a scenario and write its trace");
    add_input_flags(run, in);
    run->add_option("--out", out_dir, "output directory")->required();

    std::string cf_name;
    auto* cf = app.add_subcommand("counterfactual", "paired runs behind the comparison figures");
    cf->add_option("name", cf_name, "experiment")->required()->check(CLI::IsMember(counterfactual_names()));
    cf->add_option("--out", out_dir, "output directory")->required();
    cf->add_option("--workers", workers, "parallel runs");

    std::vector<int> candidates;
    std::vector<BusId> probes;
    double horizon = 2.0;
    auto* screen = app.add_subcommand("screen", "recovery-margin table over mesh candidates and probe buses");
    add_input_flags(screen, in);
    screen->add_option("--candidates", candidates, "mesh branch ids (default: all)");
    screen->add_option("--probes", probes, "probe buses (default: collector hosts)");
    screen->add_option("--horizon", horizon, "simulated horizon per probe, s");
    screen->add_option("--out", out_dir, "output directory")->required();
    screen->add_option("--workers", workers, "parallel simulations");

    std::optional<double> at;
    std::string action;
    std::string params;
    std::vector<std::string> disturbances;
    std::optional<double> standard;
    auto* verify = app.add_subcommand("verify", "reactive margin verdict for a topology action");
    add_input_flags(verify, in);
    verify->add_option("--at", at, "verify at this time of the scenario run instead of t=0");
    verify->add_option("--action", action, "topology action name");
    verify->add_option("--params", params, "action parameters as JSON");
    verify->add_option("--disturbance", disturbances, "bus:mvar absorption change, negative = absorption lost");
    verify->add_option("--standard", standard, "one loss of this many MVAr at each collector host");
    verify->add_option("--horizon", horizon, "device response window, s");
    verify->add_option("--out", out_dir, "output directory");

    std::string host = "127.0.0.1";
    int port = 7410;
    int http_port = 7411;
    auto* serve = app.add_subcommand("serve", "session server (ops-v1 over TCP, read-only HTTP)");
    serve->add_option("--host", host);
    serve->add_option("--port", port);
    serve->add_option("--http-port", http_port, "-1 disables");

    std::vector<std::string> argv(args.rbegin(), args.rend());
    try {
        app.parse(argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, out, err);
        return rc == 0 ? kCompleted : kInputError;
    }

    try {
        if (*run) return cmd_run(in, out_dir, out);
        if (*cf) return cmd_counterfactual(cf_name, out_dir, workers, out);
        if (*screen) return cmd_screen(in, candidates, probes, horizon, out_dir, workers, out);
        if (*verify) return cmd_verify(in, at, action, params, disturbances, standard, horizon, out_dir, out);
        if (*serve) return cmd_serve(host, port, http_port, out);
    } catch (const FormatError& e) {
        err << "input error at " << (e.pointer().empty() ? "/" : e.pointer()) << ": " << e.what() << '\n';
        return kInputError;
    } catch (const CaseError& e) {
        err << "case error: " << e.what() << '\n';
        return kInputError;
    } catch (const nlohmann::json::exception& e) {
        err << "input error: " << e.what() << '\n';
        return kInputError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kInputError;
    }
    return kInputError;
}

}  // namespace gridcascade::cli
