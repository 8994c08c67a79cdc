#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "gridcascade/opserver.hpp"
#include "gridcascade/trace_io.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <httplib.h>

using namespace gridcascade;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// In-process client: records everything the server sends it.
struct Client {
    OpsServer& server;
    int id;
    std::vector<json> inbox;
    int next = 0;

    explicit Client(OpsServer& s) : server(s), id(s.connect([this](const std::string& l) { inbox.push_back(json::parse(l)); })) {}

    json call(json msg) {
        msg["id"] = ++next;
        server.handle(id, msg.dump());
        for (auto it = inbox.rbegin(); it != inbox.rend(); ++it) {
            if (it->contains("re") && (*it)["re"] == next) return *it;
        }
        return {};
    }

    std::vector<json> broadcasts(const std::string& type) const {
        std::vector<json> out;
        for (const auto& m : inbox) {
            if (m.value("type", "") == type) out.push_back(m);
        }
        return out;
    }
};

std::string create_builtin(Client& c) {
    const json r = c.call({{"type", "create"}, {"case", {{"builtin", "iberian"}}}});
    return r.value("session", "");
}

// Steps one at a time until the session clock reaches t.
void step_to(Client& c, const std::string& sid, double t) {
    for (int guard = 0; guard < 100000; ++guard) {
        const json r = c.call({{"type", "step"}, {"session", sid}, {"n", 0}});
        if (r.value("t", 1e300) >= t - 0.005 || r.value("status", "") != "paused") return;
        c.call({{"type", "step"}, {"session", sid}, {"n", 1}});
    }
}

json inject(Client& c, const std::string& sid, const ScenarioAction& a) {
    return c.call({{"type", "inject"},
                   {"session", sid},
                   {"action", action_name(a)},
                   {"params", json::parse(action_params(a).dump())}});
}

std::string hash_of(const OpsServer& s, const std::string& sid) { return s.state_hash(sid).value_or(""); }

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("gridcascade-test-" + std::to_string(::getpid()) + "-" +
                                            ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

int cli_run(const std::vector<std::string>& args, std::string* out_text = nullptr) {
    std::ostringstream out, err;
    const int code = cli::run_cli(args, out, err);
    if (out_text) *out_text = out.str();
    return code;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Protocol

TEST(Ops, CreateAssignsDistinctIds) {
    OpsServer s;
    Client c(s);
    const json r = c.call({{"type", "create"}, {"case", {{"builtin", "iberian"}}}});
    EXPECT_EQ(r["type"], "ack");
    EXPECT_EQ(r["schema"], "ops-v1");
    EXPECT_EQ(r["status"], "paused");
    const std::string a = r["session"];
    const std::string b = create_builtin(c);
    EXPECT_EQ(a.size(), 16u);
    EXPECT_NE(a, b);
    EXPECT_EQ(s.sessions_json().size(), 2u);
}

TEST(Ops, EveryLineGetsOneReply) {
    OpsServer s;
    Client c(s);
    s.handle(c.id, "not json");
    ASSERT_EQ(c.inbox.size(), 1u);
    EXPECT_EQ(c.inbox[0]["type"], "error");
    const json bad = c.call({{"type", "create"}, {"case", {{"builtin", "atlantis"}}}});
    EXPECT_EQ(bad["type"], "error");
    EXPECT_EQ(c.call({{"type", "warp"}, {"session", "x"}})["type"], "error");
    EXPECT_EQ(c.call({{"type", "state"}, {"session", "0000000000000000"}})["type"], "error");
    EXPECT_EQ(c.call({{"type", "create"}, {"schema", "ops-v0"}, {"case", {{"builtin", "iberian"}}}})["type"], "error");
    EXPECT_EQ(c.inbox.size(), 5u);
}

TEST(Ops, RejectedInjectLeavesStateAlone) {
    OpsServer s;
    Client c(s);
    const std::string sid = create_builtin(c);
    EXPECT_EQ(inject(c, sid, MeshLine{47})["type"], "ack");
    const std::string h = hash_of(s, sid);
    const json dup = inject(c, sid, MeshLine{47});
    EXPECT_EQ(dup["type"], "error");
    EXPECT_EQ(hash_of(s, sid), h);
    EXPECT_EQ(s.committed_log(sid)->events.size(), 1u);
}

TEST(Ops, OnlyControllerMutates) {
    OpsServer s;
    Client a(s);
    Client b(s);
    const std::string sid = create_builtin(a);
    EXPECT_EQ(b.call({{"type", "step"}, {"session", sid}, {"n", 1}})["type"], "error");
    EXPECT_EQ(b.call({{"type", "subscribe"}, {"session", sid}})["type"], "ack");
    a.call({{"type", "step"}, {"session", sid}, {"n", 2}});
    EXPECT_EQ(b.broadcasts("snapshot").size(), 2u);
    // Control passes on when the controller leaves.
    s.disconnect(a.id);
    EXPECT_EQ(b.call({{"type", "step"}, {"session", sid}, {"n", 1}})["type"], "ack");
}

TEST(Ops, PreviewIsPure) {
    OpsServer s;
    Client c(s);
    const std::string sid = create_builtin(c);
    c.call({{"type", "step"}, {"session", sid}, {"n", 3}});
    const std::string h = hash_of(s, sid);
    const auto before = c.inbox.size();
    const json v = c.call({{"type", "preview"}, {"session", sid}, {"action", "MeshLine"}, {"params", {{"branch", 47}}}});
    EXPECT_EQ(v["type"], "verdict");
    EXPECT_TRUE(v["verdict"]["feasible"].get<bool>());
    EXPECT_EQ(hash_of(s, sid), h);
    EXPECT_EQ(c.inbox.size(), before + 1);
    EXPECT_TRUE(s.committed_log(sid)->events.empty());
    EXPECT_EQ(c.call({{"type", "preview"}, {"session", sid}, {"action", "ScaleExport"}, {"params", {{"factor", 0.9}}}})["type"],
              "error");
}

TEST(Ops, LatePreviewIsInfeasible) {
    OpsServer s;
    Client c(s);
    const std::string sid = create_builtin(c);
    const auto b = builtin_iberian_scenario();
    for (const auto& ev : b.events) {
        if (const auto* m = std::get_if<MeshLine>(&ev.action); m && m->branch == 50) continue;
        step_to(c, sid, ev.t);
        ASSERT_EQ(inject(c, sid, ev.action)["type"], "ack");
    }
    step_to(c, sid, 9.85);
    const json v = c.call({{"type", "preview"}, {"session", sid}, {"action", "MeshLine"}, {"params", {{"branch", 50}}}});
    ASSERT_EQ(v["type"], "verdict");
    EXPECT_FALSE(v["verdict"]["feasible"].get<bool>());
}

TEST(Ops, OpenReactorRaisesVoltageInNextSnapshot) {
    OpsServer s;
    Client c(s);
    const std::string sid = create_builtin(c);
    c.call({{"type", "step"}, {"session", sid}, {"n", 1}});
    const auto b = builtin_iberian_scenario();
    const auto k = b.grid.bus_index(b.grid.reactor(6).bus);
    const double before = c.broadcasts("snapshot").back()["v"][k];
    inject(c, sid, OpenReactor{6});
    c.call({{"type", "step"}, {"session", sid}, {"n", 1}});
    const auto snaps = c.broadcasts("snapshot");
    EXPECT_GT(snaps.back()["v"][k].get<double>(), before);
    EXPECT_EQ(c.broadcasts("event").back()["action"], "OpenReactor");
}

TEST(Ops, ReplayMatchesBatchRunAndSeqIsMonotone) {
    OpsServer s;
    Client c(s);
    const std::string sid = create_builtin(c);
    const auto b = builtin_iberian_scenario();
    for (const auto& ev : b.events) {
        step_to(c, sid, ev.t);
        inject(c, sid, ev.action);
    }
    json last;
    do {
        last = c.call({{"type", "step"}, {"session", sid}, {"n", 200}});
    } while (last.value("status", "") == "paused");
    EXPECT_EQ(last["status"], "collapsed");

    // Event sourcing: the committed log reproduces the session.
    const auto log = s.committed_log(sid);
    ASSERT_TRUE(log);
    EXPECT_EQ(log->events.size(), b.events.size());
    const std::string batch = trace_to_jsonl(run_scenario(b.grid, *log, b.config));
    EXPECT_EQ(*s.trace_jsonl(sid), batch);
    EXPECT_EQ(batch, trace_to_jsonl(run_scenario(b.grid, Scenario{b.events, json::object()}, b.config)));

    std::uint64_t seq = 0;
    int terminals = 0;
    for (const auto& m : c.inbox) {
        if (!m.contains("seq")) continue;
        EXPECT_EQ(m["seq"].get<std::uint64_t>(), seq + 1);
        seq = m["seq"];
        terminals += m["type"] == "terminal";
    }
    EXPECT_EQ(terminals, 1);
    EXPECT_EQ(c.call({{"type", "step"}, {"session", sid}, {"n", 1}})["status"], "collapsed");
    EXPECT_EQ(inject(c, sid, OpenReactor{6})["type"], "error");
}

TEST(Ops, TcpAndHttpTransports) {
    OpsServer s;
    const int port = s.serve_tcp("127.0.0.1", 0);
    const int http_port = s.serve_http("127.0.0.1", 0);
    ASSERT_GT(port, 0);
    ASSERT_GT(http_port, 0);

    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
    const std::string line = R"({"type":"create","id":"a","case":{"builtin":"iberian"}})" "\n";
    ASSERT_EQ(::send(fd, line.data(), line.size(), 0), static_cast<ssize_t>(line.size()));
    std::string got;
    char buf[4096];
    while (got.find('\n') == std::string::npos) {
        const ssize_t n = ::recv(fd, buf, sizeof buf, 0);
        ASSERT_GT(n, 0);
        got.append(buf, static_cast<std::size_t>(n));
    }
    const json reply = json::parse(got.substr(0, got.find('\n')));
    EXPECT_EQ(reply["re"], "a");
    const std::string sid = reply["session"];

    httplib::Client http("127.0.0.1", http_port);
    const auto sessions = http.Get("/sessions");
    ASSERT_TRUE(sessions);
    EXPECT_EQ(sessions->status, 200);
    EXPECT_NE(sessions->body.find(sid), std::string::npos);
    const auto trace = http.Get("/sessions/" + sid + "/trace");
    ASSERT_TRUE(trace);
    EXPECT_EQ(trace->status, 200);
    EXPECT_EQ(trace->body.rfind(R"({"type":"header")", 0), 0u);
    EXPECT_EQ(http.Get("/sessions/ffffffffffffffff/trace")->status, 404);
    ::close(fd);
    s.stop();
}

// ---------------------------------------------------------------------------
// Command line

TEST(Cli, RunWritesTraceAndManifest) {
    TempDir tmp;
    const fs::path out = tmp.path / "run";
    EXPECT_EQ(cli_run({"run", "--builtin", "iberian", "--t-end", "3", "--out", out.string()}), cli::kCompleted);
    for (const char* f : {"trace.jsonl", "trace.csv", "manifest.json"}) EXPECT_TRUE(fs::exists(out / f)) << f;
    const json m = json::parse(slurp(out / "manifest.json"));
    EXPECT_EQ(m["schema"], "manifest-v1");
    EXPECT_EQ(m["terminal"]["status"], "completed");
}

TEST(Cli, CollapseExitCode) {
    TempDir tmp;
    EXPECT_EQ(cli_run({"run", "--builtin", "iberian", "--out", (tmp.path / "r").string()}), cli::kCollapsed);
}

TEST(Cli, BadInputWritesNothing) {
    TempDir tmp;
    const fs::path scen = tmp.path / "bad.json";
    std::ofstream(scen) << R"({"events":[{"t":1,"action":"MeshLine","params":{"branch":"x"}}]})";
    const fs::path out = tmp.path / "out";
    EXPECT_EQ(cli_run({"run", "--builtin", "iberian", "--scenario", scen.string(), "--out", out.string()}),
              cli::kInputError);
    EXPECT_FALSE(fs::exists(out));
    EXPECT_EQ(cli_run({"run", "--out", out.string()}), cli::kInputError);
    EXPECT_EQ(cli_run({"run", "--builtin", "iberian", "--set", "dt=-1", "--out", out.string()}), cli::kInputError);
    EXPECT_EQ(cli_run({"bogus"}), cli::kInputError);
    EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, VerifyExitCodes) {
    std::string text;
    EXPECT_EQ(cli_run({"verify", "--builtin", "iberian", "--action", "MeshLine", "--params", R"({"branch":47})"}, &text),
              cli::kCompleted);
    EXPECT_TRUE(json::parse(text)["feasible"].get<bool>());
    EXPECT_EQ(cli_run({"verify", "--builtin", "iberian", "--at", "9.85", "--standard", "150"}, &text),
              cli::kInfeasible);
    EXPECT_FALSE(json::parse(text)["feasible"].get<bool>());
}

TEST(Cli, ScreenTableCoversEveryPair) {
    TempDir tmp;
    const fs::path out = tmp.path / "screen";
    EXPECT_EQ(cli_run({"screen", "--builtin", "iberian", "--workers", "4", "--out", out.string()}), cli::kCompleted);
    const std::string csv = slurp(out / "margins.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4 * 5);
    EXPECT_TRUE(fs::exists(out / "margins.json"));
    EXPECT_TRUE(fs::exists(out / "manifest.json"));
}

TEST(Cli, CounterfactualSummary) {
    TempDir tmp;
    const fs::path out = tmp.path / "cf";
    EXPECT_EQ(cli_run({"counterfactual", "avr_compliance", "--workers", "2", "--out", out.string()}), cli::kCompleted);
    const std::string csv = slurp(out / "summary.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
    EXPECT_NE(csv.find("deadband"), std::string::npos);
    EXPECT_NE(csv.find("droop"), std::string::npos);
}

TEST(Cli, OutputsStayInsideOutDir) {
    TempDir tmp;
    const auto cwd = fs::current_path();
    fs::current_path(tmp.path);
    const fs::path out = tmp.path / "a";
    cli_run({"run", "--builtin", "iberian", "--t-end", "1", "--out", out.string()});
    fs::current_path(cwd);
    std::vector<std::string> entries;
    for (const auto& e : fs::directory_iterator(tmp.path)) entries.push_back(e.path().filename().string());
    EXPECT_EQ(entries, std::vector<std::string>{"a"});
}
