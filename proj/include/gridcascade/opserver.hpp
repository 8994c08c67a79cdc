#pragma once

// Steerable simulation sessions behind a newline-delimited JSON protocol
// ("ops-v1"). The protocol core is transport independent: a client is a
// sink for outgoing messages plus calls to handle() with incoming lines.
// serve_tcp() and serve_http() put it on sockets.

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "gridcascade/measures.hpp"
#include "gridcascade/simengine.hpp"

namespace gridcascade {

inline constexpr std::string_view kOpsSchema = "ops-v1";

/// Resolves {"builtin": "iberian"}, {"path": file} or {"case": document}.
GridCase resolve_case_ref(const nlohmann::json& ref, SimConfig& config);

class OpsServer {
public:
    using Sink = std::function<void(const std::string& line)>;

    OpsServer();
    ~OpsServer();
    OpsServer(const OpsServer&) = delete;
    OpsServer& operator=(const OpsServer&) = delete;

    int connect(Sink sink);
    void disconnect(int client);
    /// Handles one client line; every line gets exactly one ack, verdict or
    /// error reply carrying its "id" as "re".
    void handle(int client, const std::string& line);

    [[nodiscard]] ojson sessions_json() const;
    [[nodiscard]] std::optional<std::string> trace_jsonl(const std::string& session) const;
    [[nodiscard]] std::optional<std::string> state_hash(const std::string& session) const;
    [[nodiscard]] std::optional<Scenario> committed_log(const std::string& session) const;

    /// Listens for NDJSON clients; returns the bound port (0 picks one).
    int serve_tcp(const std::string& host, int port);
    /// Read-only HTTP: GET /sessions, GET /sessions/<id>/trace.
    int serve_http(const std::string& host, int port);
    void stop();

private:
    struct Session;
    struct Client;

    std::shared_ptr<Session> find(const std::string& id) const;
    void send(int client, const ojson& msg);
    void broadcast(Session& s, ojson msg);
    void step_locked(Session& s, long n);
    void run_loop(const std::shared_ptr<Session>& s);
    void stop_runner(Session& s);
    ojson dispatch(int client, const nlohmann::json& msg);

    mutable std::mutex mu_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::map<int, std::shared_ptr<Client>> clients_;
    int next_client_ = 1;
    std::uint64_t next_session_ = 1;

    std::atomic<bool> stopping_{false};
    int listen_fd_ = -1;
    std::thread accept_thread_;
    std::vector<std::thread> client_threads_;
    std::set<int> client_fds_;
    std::mutex threads_mu_;
    struct Http;
    std::unique_ptr<Http> http_;
};

}  // namespace gridcascade
