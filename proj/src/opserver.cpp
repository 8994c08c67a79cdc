#include "gridcascade/opserver.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <condition_variable>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "gridcascade/fingerprint.hpp"
#include "gridcascade/trace_io.hpp"

namespace gridcascade {

namespace {

class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string status_name(const Simulation& sim, bool running) {
    if (sim.finished()) {
        return to_string(sim.terminal().status);
    }
    return running ? "running" : "paused";
}

const nlohmann::json& need(const nlohmann::json& msg, const char* key) {
    if (!msg.contains(key)) {
        throw ProtocolError(std::string("missing field '") + key + "'");
    }
    return msg[key];
}

std::optional<TopologyAction> as_topology(const ScenarioAction& a) {
    if (auto* p = std::get_if<MeshLine>(&a)) return *p;
    if (auto* p = std::get_if<OpenLine>(&a)) return *p;
    if (auto* p = std::get_if<OpenReactor>(&a)) return *p;
    if (auto* p = std::get_if<CloseReactor>(&a)) return *p;
    return std::nullopt;
}

}  // namespace

GridCase resolve_case_ref(const nlohmann::json& ref, SimConfig& config) {
    if (!ref.is_object()) {
        throw FormatError("/case", "expected object");
    }
    if (ref.contains("builtin")) {
        if (ref["builtin"] != "iberian") {
            throw FormatError("/case/builtin", "unknown builtin case");
        }
        BuiltinScenario b = builtin_iberian_scenario();
        config = b.config;
        return b.grid;
    }
    if (ref.contains("path")) {
        if (!ref["path"].is_string()) {
            throw FormatError("/case/path", "expected string");
        }
        return load_case_file(ref["path"].get<std::string>());
    }
    if (ref.contains("case")) {
        return case_from_json(ref["case"]);
    }
    throw FormatError("/case", "expected one of builtin, path, case");
}

struct OpsServer::Client {
    Sink sink;
    std::mutex write_mu;
};

struct OpsServer::Session {
    std::string id;
    SimConfig config;
    GridCase grid;
    Simulation sim;
    std::vector<ScenarioEvent> log;
    bool running = false;
    double pace = 50.0;  // steps per second while running
    std::uint64_t seq = 0;
    int controller = -1;
    std::set<int> subscribers;
    std::mutex mu;
    std::thread runner;
    std::atomic<bool> halt{false};

    Session(std::string id_, GridCase g, SimConfig c)
        : id(std::move(id_)), config(c), grid(g), sim(std::move(g), std::move(c)) {}
};

struct OpsServer::Http {
    httplib::Server server;
    std::thread thread;
};

OpsServer::OpsServer() = default;

OpsServer::~OpsServer() { stop(); }

int OpsServer::connect(Sink sink) {
    const std::lock_guard lock(mu_);
    const int id = next_client_++;
    auto c = std::make_shared<Client>();
    c->sink = std::move(sink);
    clients_[id] = c;
    return id;
}

void OpsServer::disconnect(int client) {
    std::vector<std::shared_ptr<Session>> all;
    {
        const std::lock_guard lock(mu_);
        clients_.erase(client);
        for (auto& [id, s] : sessions_) all.push_back(s);
    }
    for (auto& s : all) {
        const std::lock_guard lock(s->mu);
        s->subscribers.erase(client);
        if (s->controller == client) s->controller = -1;
    }
}

std::shared_ptr<OpsServer::Session> OpsServer::find(const std::string& id) const {
    const std::lock_guard lock(mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
}

void OpsServer::send(int client, const ojson& msg) {
    std::shared_ptr<Client> c;
    {
        const std::lock_guard lock(mu_);
        auto it = clients_.find(client);
        if (it == clients_.end()) return;
        c = it->second;
    }
    const std::string line = msg.dump();
    const std::lock_guard lock(c->write_mu);
    c->sink(line);
}

// Caller holds s.mu.
void OpsServer::broadcast(Session& s, ojson msg) {
    ojson out = {{"schema", kOpsSchema}, {"type", msg["type"]}, {"session", s.id}, {"seq", ++s.seq}};
    for (auto& [k, v] : msg.items()) {
        if (k != "type") out[k] = v;
    }
    for (int c : s.subscribers) send(c, out);
}

// Caller holds s.mu.
void OpsServer::step_locked(Session& s, long n) {
    for (long i = 0; i < n && !s.sim.finished(); ++i) {
        const auto events = s.sim.step();
        for (const auto& e : events) {
            ojson ev = trace_event_json(e);
            ev["kind_of_event"] = ev["type"];
            ev["type"] = "event";
            broadcast(s, ev);
        }
        ojson snap = trace_record_json(s.sim.current_record());
        snap["type"] = "snapshot";
        snap["status"] = status_name(s.sim, s.running);
        ojson margins = ojson::array();
        for (const auto& r : s.sim.relays()) {
            const double v = s.sim.state().v[s.sim.grid().bus_index(r.monitored_bus)];
            margins.push_back({{"group", r.group}, {"threshold", r.threshold}, {"v", v}, {"margin", r.threshold - v}});
        }
        snap["collector_margins"] = margins;
        broadcast(s, snap);
        if (s.sim.finished()) {
            s.running = false;
            broadcast(s, terminal_json(s.sim.terminal()));
        }
    }
}

void OpsServer::run_loop(const std::shared_ptr<Session>& s) {
    using clock = std::chrono::steady_clock;
    auto next = clock::now();
    while (!s->halt) {
        {
            const std::lock_guard lock(s->mu);
            if (!s->running || s->sim.finished()) break;
            step_locked(*s, 1);
            if (s->pace <= 0.0) continue;
            next += std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(1.0 / s->pace));
        }
        std::this_thread::sleep_until(next);
    }
}

// Caller must not hold s.mu.
void OpsServer::stop_runner(Session& s) {
    s.halt = true;
    if (s.runner.joinable()) s.runner.join();
    s.halt = false;
}

ojson OpsServer::dispatch(int client, const nlohmann::json& msg) {
    const std::string type = need(msg, "type").get<std::string>();
    ojson reply = {{"type", "ack"}};

    if (type == "create") {
        SimConfig cfg;
        GridCase grid = resolve_case_ref(need(msg, "case"), cfg);
        if (msg.contains("config")) apply_config_json(cfg, msg["config"], "/config");
        std::string id;
        {
            const std::lock_guard lock(mu_);
            id = sha256_hex("session:" + std::to_string(next_session_++)).substr(0, 16);
        }
        auto s = std::make_shared<Session>(id, std::move(grid), cfg);
        s->controller = client;
        s->subscribers.insert(client);
        {
            const std::lock_guard lock(mu_);
            sessions_[id] = s;
        }
        reply["session"] = id;
        reply["status"] = "paused";
        reply["t"] = 0.0;
        return reply;
    }

    const std::string sid = need(msg, "session").get<std::string>();
    auto s = find(sid);
    if (!s) throw ProtocolError("unknown session " + sid);
    reply["session"] = sid;

    const bool mutating = type == "start" || type == "pause" || type == "step" || type == "inject";
    if (mutating) {
        const std::lock_guard lock(s->mu);
        if (s->controller < 0) s->controller = client;
        if (s->controller != client) throw ProtocolError("session is controlled by another client");
    }

    if (type == "subscribe") {
        const std::lock_guard lock(s->mu);
        s->subscribers.insert(client);
        reply["status"] = status_name(s->sim, s->running);
        reply["t"] = s->sim.time();
        return reply;
    }
    if (type == "start") {
        stop_runner(*s);
        const std::lock_guard lock(s->mu);
        if (s->sim.finished()) throw ProtocolError("session has finished");
        if (msg.contains("pace")) s->pace = msg["pace"].get<double>();
        s->running = true;
        s->runner = std::thread([this, s] { run_loop(s); });
        reply["status"] = "running";
        return reply;
    }
    if (type == "pause") {
        {
            const std::lock_guard lock(s->mu);
            s->running = false;
        }
        stop_runner(*s);
        const std::lock_guard lock(s->mu);
        reply["status"] = status_name(s->sim, false);
        reply["t"] = s->sim.time();
        return reply;
    }
    if (type == "step") {
        const long n = msg.value("n", 1L);
        if (n < 0) throw ProtocolError("step count must be non-negative");
        const std::lock_guard lock(s->mu);
        if (s->running) throw ProtocolError("session is running; pause first");
        step_locked(*s, n);
        reply["t"] = s->sim.time();
        reply["step"] = s->sim.step_index();
        reply["status"] = status_name(s->sim, false);
        return reply;
    }
    if (type == "inject") {
        const ScenarioAction action = action_from_json(need(msg, "action").get<std::string>(),
                                                       msg.value("params", nlohmann::json::object()), "/params");
        const std::lock_guard lock(s->mu);
        if (s->sim.finished()) throw ProtocolError("session has finished");
        s->sim.check_action(action);
        const ScenarioEvent ev{s->sim.time(), action};
        s->sim.schedule(ev);
        s->log.push_back(ev);
        reply["t"] = ev.t;
        reply["log_size"] = s->log.size();
        return reply;
    }
    if (type == "preview") {
        const ScenarioAction action = action_from_json(need(msg, "action").get<std::string>(),
                                                       msg.value("params", nlohmann::json::object()), "/params");
        const auto topo = as_topology(action);
        if (!topo) throw ProtocolError("preview supports topology actions only");
        GridCase snap;
        {
            const std::lock_guard lock(s->mu);
            if (s->running) throw ProtocolError("session is running; pause first");
            snap = s->sim.snapshot_case();
        }
        std::vector<QDisturbance> dist;
        if (msg.contains("disturbances")) {
            for (const auto& d : msg["disturbances"]) {
                QDisturbance q;
                for (const auto& e : d) q.mvar.emplace_back(e.at("bus").get<int>(), e.at("mvar").get<double>());
                dist.push_back(std::move(q));
            }
        } else {
            dist = standard_disturbances(snap, msg.value("mvar", 150.0));
        }
        reply["type"] = "verdict";
        reply["verdict"] = verdict_json(verify_margin(snap, topo, dist));
        return reply;
    }
    if (type == "state") {
        const std::lock_guard lock(s->mu);
        reply["t"] = s->sim.time();
        reply["status"] = status_name(s->sim, s->running);
        reply["hash"] = sha256_hex(s->sim.state_json().dump());
        reply["log"] = scenario_to_json(Scenario{s->log, nlohmann::json::object()})["events"];
        return reply;
    }
    throw ProtocolError("unknown message type '" + type + "'");
}

void OpsServer::handle(int client, const std::string& line) {
    nlohmann::json msg;
    ojson reply;
    try {
        msg = nlohmann::json::parse(line);
        if (!msg.is_object()) throw ProtocolError("message must be an object");
        if (msg.contains("schema") && msg["schema"] != kOpsSchema) throw ProtocolError("unsupported schema");
        reply = dispatch(client, msg);
    } catch (const nlohmann::json::exception& e) {
        reply = {{"type", "error"}, {"message", std::string("bad message: ") + e.what()}};
    } catch (const std::exception& e) {
        reply = {{"type", "error"}, {"message", e.what()}};
    }
    ojson out = {{"schema", kOpsSchema}, {"type", reply["type"]}};
    out["re"] = msg.is_object() && msg.contains("id") ? ojson::parse(msg["id"].dump()) : ojson(nullptr);
    for (auto& [k, v] : reply.items()) {
        if (k != "type") out[k] = v;
    }
    send(client, out);
}

ojson OpsServer::sessions_json() const {
    std::vector<std::shared_ptr<Session>> all;
    {
        const std::lock_guard lock(mu_);
        for (const auto& [id, s] : sessions_) all.push_back(s);
    }
    ojson out = ojson::array();
    for (const auto& s : all) {
        const std::lock_guard lock(s->mu);
        out.push_back({{"id", s->id},
                       {"status", status_name(s->sim, s->running)},
                       {"t", s->sim.time()},
                       {"log_size", s->log.size()}});
    }
    return out;
}

std::optional<std::string> OpsServer::trace_jsonl(const std::string& session) const {
    auto s = find(session);
    if (!s) return std::nullopt;
    const std::lock_guard lock(s->mu);
    return trace_to_jsonl(s->sim.trace());
}

std::optional<std::string> OpsServer::state_hash(const std::string& session) const {
    auto s = find(session);
    if (!s) return std::nullopt;
    const std::lock_guard lock(s->mu);
    return sha256_hex(s->sim.state_json().dump());
}

std::optional<Scenario> OpsServer::committed_log(const std::string& session) const {
    auto s = find(session);
    if (!s) return std::nullopt;
    const std::lock_guard lock(s->mu);
    return Scenario{s->log, nlohmann::json::object()};
}

// ---------------------------------------------------------------------------
// Transports

int OpsServer::serve_tcp(const std::string& host, int port) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw std::runtime_error("socket() failed");
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) throw std::runtime_error("bad host " + host);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 16) != 0) {
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    const int bound = ntohs(addr.sin_port);

    accept_thread_ = std::thread([this] {
        while (!stopping_) {
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) {
                if (stopping_) break;
                continue;
            }
            const std::lock_guard lock(threads_mu_);
            client_fds_.insert(fd);
            client_threads_.emplace_back([this, fd] {
                const int id = connect([fd](const std::string& line) {
                    const std::string out = line + "\n";
                    std::size_t off = 0;
                    while (off < out.size()) {
                        const ssize_t n = ::send(fd, out.data() + off, out.size() - off, MSG_NOSIGNAL);
                        if (n <= 0) return;
                        off += static_cast<std::size_t>(n);
                    }
                });
                std::string buf;
                char chunk[4096];
                for (;;) {
                    const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
                    if (n <= 0) break;
                    buf.append(chunk, static_cast<std::size_t>(n));
                    for (auto nl = buf.find('\n'); nl != std::string::npos; nl = buf.find('\n')) {
                        const std::string line = buf.substr(0, nl);
                        buf.erase(0, nl + 1);
                        if (!line.empty()) handle(id, line);
                    }
                }
                disconnect(id);
                const std::lock_guard lock(threads_mu_);
                client_fds_.erase(fd);
                ::close(fd);
            });
        }
    });
    spdlog::info("ops-v1 listening on {}:{}", host, bound);
    return bound;
}

int OpsServer::serve_http(const std::string& host, int port) {
    http_ = std::make_unique<Http>();
    http_->server.Get("/sessions", [this](const httplib::Request&, httplib::Response& res) {
        res.set_content(sessions_json().dump(), "application/json");
    });
    http_->server.Get(R"(/sessions/([0-9a-f]+)/trace)", [this](const httplib::Request& req, httplib::Response& res) {
        const auto trace = trace_jsonl(req.matches[1]);
        if (!trace) {
            res.status = 404;
            res.set_content("unknown session\n", "text/plain");
            return;
        }
        res.set_content(*trace, "application/x-ndjson");
    });
    int bound = port;
    if (port == 0) {
        bound = http_->server.bind_to_any_port(host);
    } else if (!http_->server.bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound < 0) throw std::runtime_error("cannot bind http on " + host + ":" + std::to_string(port));
    http_->thread = std::thread([this] { http_->server.listen_after_bind(); });
    spdlog::info("session listing on http://{}:{}/sessions", host, bound);
    return bound;
}

void OpsServer::stop() {
    if (stopping_.exchange(true)) return;
    if (listen_fd_ >= 0) {
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    std::vector<std::thread> threads;
    {
        const std::lock_guard lock(threads_mu_);
        for (int fd : client_fds_) ::shutdown(fd, SHUT_RDWR);
        threads.swap(client_threads_);
    }
    for (auto& t : threads) t.join();
    if (http_) {
        http_->server.stop();
        if (http_->thread.joinable()) http_->thread.join();
    }
    std::vector<std::shared_ptr<Session>> all;
    {
        const std::lock_guard lock(mu_);
        for (auto& [id, s] : sessions_) all.push_back(s);
    }
    for (auto& s : all) {
        {
            const std::lock_guard lock(s->mu);
            s->running = false;
        }
        stop_runner(*s);
    }
}

}  // namespace gridcascade
