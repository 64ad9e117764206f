#pragma once

// Session API behind the what-if console: a session is one simulated day for
// one subject and one policy. The manager owns sessions and their JSONL logs;
// HttpServer maps the JSON API onto it.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "guide/agents.hpp"
#include "guide/data.hpp"
#include "guide/env.hpp"

namespace guide::service {

inline constexpr int kSchemaVersion = 1;

/// Error with an HTTP status and a machine-readable code.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message, nlohmann::json detail = nullptr);

  int status() const { return status_; }
  const std::string& code() const { return code_; }
  const nlohmann::json& detail() const { return detail_; }
  nlohmann::json body() const;

 private:
  int status_;
  std::string code_;
  nlohmann::json detail_;
};

struct SubjectContext {
  std::string id;
  std::shared_ptr<const env::Environment> env;
  std::vector<data::InitialState> initial_states;
};

struct PolicyHandle {
  std::string name;
  std::string description;
  std::shared_ptr<const agents::Policy> policy;
};

using Clock = std::chrono::steady_clock;

struct ServiceOptions {
  std::filesystem::path session_dir;          // empty: sessions live in memory only
  std::chrono::seconds idle_timeout{6 * 3600};
  std::function<Clock::time_point()> clock;   // defaults to steady_clock::now
};

class SessionManager {
 public:
  SessionManager(std::vector<SubjectContext> subjects, std::vector<PolicyHandle> policies, ServiceOptions options = {});
  ~SessionManager();

  SessionManager(const SessionManager&) = delete;
  SessionManager& operator=(const SessionManager&) = delete;

  /// {subject, seed, policy, initial_state_index} -> state summary.
  nlohmann::json create(const nlohmann::json& request);
  /// Pure read: the policy's action for the current hour plus a discarded
  /// preview of its reward breakdown.
  nlohmann::json recommendation(const std::string& id);
  /// {"mode":"accept"} or {"mode":"override","type","magnitude","slot"}.
  nlohmann::json step(const std::string& id, const nlohmann::json& request);
  nlohmann::json trajectory(const std::string& id);
  nlohmann::json summary(const std::string& id);
  nlohmann::json policies() const;
  nlohmann::json health() const;

  /// Drops sessions idle for longer than the timeout; returns how many.
  std::size_t expire_idle();
  /// Rebuilds sessions from the logs in session_dir; returns how many.
  std::size_t resume();
  std::size_t session_count() const;

  /// Hash of a session's episode state and history, for checking that reads do not mutate.
  std::uint64_t state_hash(const std::string& id);

 private:
  struct Session;

  std::shared_ptr<Session> find(const std::string& id);
  const SubjectContext& subject(const std::string& id) const;
  const PolicyHandle& policy(const std::string& name) const;
  Clock::time_point now() const;
  void append_log(const Session& s, const nlohmann::json& line) const;
  nlohmann::json summary_locked(const Session& s) const;

  std::vector<SubjectContext> subjects_;
  std::vector<PolicyHandle> policies_;
  ServiceOptions options_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

/// Validates an override body and builds the action; throws ServiceError 422.
BehavioralAction parse_override(const nlohmann::json& request);

class HttpServer {
 public:
  explicit HttpServer(SessionManager& manager);
  ~HttpServer();

  /// Binds without serving; port 0 picks a free port. Returns false when the
  /// address is unavailable.
  bool bind(const std::string& host, int port);
  int port() const { return port_; }
  /// Blocks until stop().
  void serve();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = -1;
};

}  // namespace guide::service
