#pragma once

// Live trial sessions behind a small JSON API. TrialService holds the logic
// and returns (status, body) pairs; register_routes wires it into httplib.
// Each session persists as <id>.config.json plus an append-only
// <id>.events.jsonl in the trial event format, fsynced before acknowledging.

#include "shrinkalloc/covmodel.hpp"
#include "shrinkalloc/estimators.hpp"
#include "shrinkalloc/trial.hpp"
#include "shrinkalloc/types.hpp"

#include "httplib.h"
#include "json.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

namespace shrinkalloc {

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

namespace detail {

inline ApiResponse api_error(int status, const std::string& message) {
  return {status, {{"error", message}}};
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Writes a whole file durably: temp file, fsync, rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw Error("cannot open " + tmp);
  const char* p = content.data();
  std::size_t left = content.size();
  while (left > 0) {
    const ssize_t w = ::write(fd, p, left);
    if (w < 0) {
      ::close(fd);
      throw Error("write failed for " + tmp);
    }
    p += w;
    left -= static_cast<std::size_t>(w);
  }
  if (::fsync(fd) != 0) {
    ::close(fd);
    throw Error("fsync failed for " + tmp);
  }
  ::close(fd);
  std::filesystem::rename(tmp, path);
}

inline void append_line_durable(const std::filesystem::path& path, const std::string& line) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw Error("cannot open " + path.string());
  const std::string data = line + "\n";
  const ssize_t w = ::write(fd, data.data(), data.size());
  const bool ok = w == static_cast<ssize_t>(data.size()) && ::fsync(fd) == 0;
  ::close(fd);
  if (!ok) throw Error("append failed for " + path.string());
}

inline nlohmann::json vector_json(const Vector& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

}  // namespace detail

class TrialService {
 public:
  /// Without a data directory sessions live in memory only.
  explicit TrialService(std::optional<std::filesystem::path> data_dir = std::nullopt)
      : data_dir_(std::move(data_dir)) {
    if (data_dir_) {
      std::filesystem::create_directories(*data_dir_);
      load();
    }
  }

  std::size_t session_count() const {
    std::shared_lock lock(sessions_mu_);
    return sessions_.size();
  }

  /// Body is {"config": {...}} or the config object itself.
  ApiResponse create(const nlohmann::json& body) {
    TrialConfig config;
    try {
      const nlohmann::json& cj = body.is_object() && body.contains("config") ? body.at("config") : body;
      if (body.is_object() && body.contains("config") && body.size() != 1) {
        throw InvalidArgument("unexpected fields next to 'config'");
      }
      config = trial_config_from_json(cj);
    } catch (const Error& ex) {
      return detail::api_error(400, ex.what());
    }
    auto s = std::make_shared<Session>(new_id(), config, detail::utc_now());
    if (data_dir_) {
      const nlohmann::json sidecar = {{"id", s->id}, {"createdAt", s->created_at}, {"config", to_json(config)}};
      detail::write_file_atomic(config_path(s->id), sidecar.dump(2) + "\n");
      detail::write_file_atomic(events_path(s->id), "");
    }
    {
      std::unique_lock lock(sessions_mu_);
      sessions_.emplace(s->id, s);
    }
    nlohmann::json schedule = burn_in_schedule(config);
    return {201, {{"id", s->id}, {"burnInSchedule", schedule}, {"createdAt", s->created_at}}};
  }

  ApiResponse next(const std::string& id) const {
    auto s = find(id);
    if (!s) return detail::api_error(404, "unknown trial '" + id + "'");
    std::lock_guard lock(s->mu);
    return {200, next_body(*s)};
  }

  /// Body: {expectedVersion, arm, y, override?}.
  ApiResponse post_outcome(const std::string& id, const nlohmann::json& body) {
    auto s = find(id);
    if (!s) return detail::api_error(404, "unknown trial '" + id + "'");
    long expected = 0;
    int arm = 0;
    double y = 0.0;
    bool override_arm = false;
    try {
      detail::reject_unknown_keys(body, {"expectedVersion", "arm", "y", "override"}, "outcome");
      expected = body.at("expectedVersion").get<long>();
      arm = body.at("arm").get<int>();
      if (!body.at("y").is_number()) throw InvalidArgument("y must be a finite number");
      y = body.at("y").get<double>();
      override_arm = body.value("override", false);
    } catch (const nlohmann::json::exception& ex) {
      return detail::api_error(400, std::string("malformed outcome: ") + ex.what());
    } catch (const Error& ex) {
      return detail::api_error(400, ex.what());
    }
    if (!std::isfinite(y)) return detail::api_error(400, "y must be a finite number");

    std::lock_guard lock(s->mu);
    if (arm < 0 || arm > s->config.k) return detail::api_error(400, "arm out of range");
    const long version = s->state.arrivals();
    if (expected != version) {
      ApiResponse r = detail::api_error(409, "version conflict");
      r.body["version"] = version;
      return r;
    }
    const int recommended = next_assignment(s->state, s->config);
    if (arm != recommended && !override_arm) {
      ApiResponse r = detail::api_error(422, "arm differs from the recommended arm; set override to deviate");
      r.body["recommendedArm"] = recommended;
      return r;
    }
    const bool deviation = arm != recommended;
    TrialState updated = s->state;
    const TrialEvent& e = updated.record_outcome(arm, y, deviation);
    if (data_dir_) detail::append_line_durable(events_path(id), to_json(e).dump());
    s->state = std::move(updated);

    nlohmann::json out = estimates(*s);
    out["version"] = s->state.arrivals();
    out["deviation"] = deviation;
    return {200, out};
  }

  ApiResponse state(const std::string& id) const {
    auto s = find(id);
    if (!s) return detail::api_error(404, "unknown trial '" + id + "'");
    std::lock_guard lock(s->mu);
    const TrialState& st = s->state;
    nlohmann::json out = estimates(*s);
    out["id"] = s->id;
    out["createdAt"] = s->created_at;
    out["config"] = to_json(s->config);
    out["version"] = st.arrivals();
    out["counts"] = st.counts();
    out["means"] = detail::vector_json(st.means());
    out["phase"] = in_burn_in(st, s->config) ? "burnin" : "adaptive";
    out["sigma"] = nullptr;
    out["dominanceChecks"] = nullptr;
    if (st.min_count() >= 1) {
      const auto sigma = build_covariance(st.counts(), st.variances(s->config.variance_floor));
      out["sigma"] = {{"trace", sigma.trace()},
                      {"lambdaMax", sigma.lambda_max()},
                      {"effectiveDim", sigma.trace() / sigma.lambda_max()},
                      {"sigmaSq", detail::vector_json(sigma.diagonal())},
                      {"offDiagonal", sigma.off()}};
      const auto dc = dominance_checks(sigma);
      out["dominanceChecks"] = {{"bock", dc.bock}, {"sureMin", dc.sure_min}, {"dimmery", dc.dimmery}};
    }
    nlohmann::json traj = nlohmann::json::array();
    for (const auto& v : sure_trajectory(st, s->config)) {
      if (v) {
        traj.push_back(*v);
      } else {
        traj.push_back(nullptr);
      }
    }
    out["sureTrajectory"] = traj;
    out["sureEstimator"] = std::string(to_string(scoring_kind(s->config.target)));
    return {200, out};
  }

 private:
  struct Session {
    Session(std::string id_, TrialConfig config_, std::string created)
        : id(std::move(id_)), config(config_), state(config_.k), created_at(std::move(created)) {}
    std::string id;
    TrialConfig config;
    TrialState state;
    std::string created_at;
    mutable std::mutex mu;
  };

  std::shared_ptr<Session> find(const std::string& id) const {
    std::shared_lock lock(sessions_mu_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  std::string new_id() {
    std::lock_guard lock(id_mu_);
    for (;;) {
      std::ostringstream os;
      os << std::hex << id_rng_() << id_rng_();
      std::string id = os.str();
      std::shared_lock slock(sessions_mu_);
      if (!sessions_.count(id)) return id;
    }
  }

  std::filesystem::path config_path(const std::string& id) const { return *data_dir_ / (id + ".config.json"); }
  std::filesystem::path events_path(const std::string& id) const { return *data_dir_ / (id + ".events.jsonl"); }

  static nlohmann::json next_body(const Session& s) {
    nlohmann::json out;
    out["arm"] = next_assignment(s.state, s.config);
    out["version"] = s.state.arrivals();
    if (in_burn_in(s.state, s.config)) {
      out["phase"] = "burnin";
      out["candidateRisks"] = nlohmann::json::array();
    } else {
      out["phase"] = "adaptive";
      out["candidateRisks"] = detail::vector_json(snapshot(s.state, s.config).candidate_risks);
    }
    return out;
  }

  /// τ̂ and V̂ with nulls where an arm lacks the data to define them.
  static nlohmann::json estimates(const Session& s) {
    const TrialState& st = s.state;
    const Vector means = st.means();
    const auto& arms = st.arms();
    nlohmann::json tau = nlohmann::json::array();
    nlohmann::json vhat = nlohmann::json::array();
    for (int k = 1; k <= st.k(); ++k) {
      if (arms[0].n > 0 && arms[static_cast<std::size_t>(k)].n > 0) {
        tau.push_back(means(k) - means(0));
      } else {
        tau.push_back(nullptr);
      }
    }
    for (const auto& a : arms) {
      if (a.n >= 2) {
        vhat.push_back(a.variance(s.config.variance_floor));
      } else {
        vhat.push_back(nullptr);
      }
    }
    return {{"tauHat", tau}, {"Vhat", vhat}};
  }

  /// Rebuilds sessions from disk. A trailing line without a newline was
  /// never acknowledged and is dropped.
  void load() {
    for (const auto& entry : std::filesystem::directory_iterator(*data_dir_)) {
      const std::string name = entry.path().filename().string();
      const std::string suffix = ".config.json";
      if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
        continue;
      }
      std::ifstream in(entry.path());
      const auto sidecar = nlohmann::json::parse(in);
      const std::string id = sidecar.at("id").get<std::string>();
      auto s = std::make_shared<Session>(id, trial_config_from_json(sidecar.at("config")),
                                         sidecar.at("createdAt").get<std::string>());
      const auto log = events_path(id);
      if (std::filesystem::exists(log)) {
        std::ifstream ev(log, std::ios::binary);
        std::string content((std::istreambuf_iterator<char>(ev)), std::istreambuf_iterator<char>());
        const auto cut = content.rfind('\n');
        const std::string complete = cut == std::string::npos ? std::string() : content.substr(0, cut + 1);
        if (complete.size() != content.size()) std::filesystem::resize_file(log, complete.size());
        std::istringstream lines(complete);
        s->state = replay(s->config, read_events_jsonl(lines));
      }
      sessions_.emplace(id, s);
    }
  }

  std::optional<std::filesystem::path> data_dir_;
  mutable std::shared_mutex sessions_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mutex id_mu_;
  std::mt19937_64 id_rng_{std::random_device{}()};
};

/// Mounts the API under /v1. A non-empty token requires
/// "Authorization: Bearer <token>" on every request.
inline void register_routes(httplib::Server& server, TrialService& svc, const std::string& token = "") {
  auto send = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  if (!token.empty()) {
    server.set_pre_routing_handler([token, send](const httplib::Request& req, httplib::Response& res) {
      if (req.get_header_value("Authorization") != "Bearer " + token) {
        send(res, detail::api_error(401, "missing or invalid bearer token"));
        return httplib::Server::HandlerResponse::Handled;
      }
      return httplib::Server::HandlerResponse::Unhandled;
    });
  }
  auto parse = [](const httplib::Request& req) -> std::optional<nlohmann::json> {
    try {
      return nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
      return std::nullopt;
    }
  };
  server.Post("/v1/trials", [&svc, send, parse](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse(req);
    send(res, body ? svc.create(*body) : detail::api_error(400, "body is not valid JSON"));
  });
  server.Get(R"(/v1/trials/([^/]+)/next)", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.next(req.matches[1]));
  });
  server.Get(R"(/v1/trials/([^/]+)/state)", [&svc, send](const httplib::Request& req, httplib::Response& res) {
    send(res, svc.state(req.matches[1]));
  });
  server.Post(R"(/v1/trials/([^/]+)/outcomes)",
              [&svc, send, parse](const httplib::Request& req, httplib::Response& res) {
                const auto body = parse(req);
                send(res, body ? svc.post_outcome(req.matches[1], *body)
                               : detail::api_error(400, "body is not valid JSON"));
              });
  server.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& ex) {
      send(res, detail::api_error(500, ex.what()));
    } catch (...) {
      send(res, detail::api_error(500, "internal error"));
    }
  });
}

}  // namespace shrinkalloc
