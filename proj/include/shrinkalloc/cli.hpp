#pragma once

// Command-line front end: oracle tables, adaptive simulations, single risk
// queries, timing benchmarks, and the trial service. Config files are JSON;
// flags override file values. Exit codes: 0 ok, 1 runtime error, 2 usage or
// config error.

#include "shrinkalloc/covmodel.hpp"
#include "shrinkalloc/design.hpp"
#include "shrinkalloc/quadform.hpp"
#include "shrinkalloc/random.hpp"
#include "shrinkalloc/risk.hpp"
#include "shrinkalloc/service.hpp"
#include "shrinkalloc/simkit.hpp"
#include "shrinkalloc/trial.hpp"
#include "shrinkalloc/types.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace shrinkalloc::cli {

inline constexpr int kSchemaVersion = 1;

class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

// Output staging ------------------------------------------------------------

/// Collects files in memory and publishes them together: every file is
/// written to a temp name first, then all are renamed. On failure the temps
/// are removed and nothing is published.
class OutputSet {
 public:
  explicit OutputSet(std::filesystem::path dir) : dir_(std::move(dir)) {}

  void add(const std::string& name, std::string content) { files_.emplace_back(name, std::move(content)); }

  std::vector<std::filesystem::path> commit() {
    std::filesystem::create_directories(dir_);
    std::vector<std::filesystem::path> temps;
    std::vector<std::filesystem::path> finals;
    try {
      for (const auto& [name, content] : files_) {
        const auto tmp = dir_ / ("." + name + ".tmp");
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        temps.push_back(tmp);
        f << content;
        f.flush();
        if (!f) throw Error("failed to write " + tmp.string());
      }
      for (std::size_t i = 0; i < files_.size(); ++i) {
        finals.push_back(dir_ / files_[i].first);
        std::filesystem::rename(temps[i], finals.back());
      }
    } catch (...) {
      std::error_code ec;
      for (const auto& t : temps) std::filesystem::remove(t, ec);
      throw;
    }
    return finals;
  }

 private:
  std::filesystem::path dir_;
  std::vector<std::pair<std::string, std::string>> files_;
};

// Helpers -------------------------------------------------------------------

inline std::string fmt(double x) {
  if (std::isnan(x)) return "";
  std::ostringstream os;
  os << std::setprecision(10) << x;
  return os.str();
}

inline nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError("config file " + path + " is not valid JSON: " + ex.what());
  }
}

/// Runs a config-reading step and reports any failure as a config error.
template <class F>
auto as_config(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(ex.what());
  } catch (const Error& ex) {
    throw ConfigError(ex.what());
  }
}

inline void check_schema(const nlohmann::json& j) {
  if (j.contains("schemaVersion") && j.at("schemaVersion").get<int>() != kSchemaVersion) {
    throw ConfigError("unsupported schemaVersion (expected " + std::to_string(kSchemaVersion) + ")");
  }
}

inline std::vector<EstimatorKind> parse_kinds(const nlohmann::json& j) {
  std::vector<EstimatorKind> out;
  for (const auto& x : j) out.push_back(parse_estimator_kind(x.get<std::string>()));
  return out;
}

inline nlohmann::json kinds_json(const std::vector<EstimatorKind>& kinds) {
  nlohmann::json out = nlohmann::json::array();
  for (auto k : kinds) out.push_back(std::string(to_string(k)));
  return out;
}

// Oracle --------------------------------------------------------------------

struct OracleCell {
  V0Regime regime = V0Regime::Low;
  TauShape shape = TauShape::Zero;
  double kappa = 0.0;
};

struct OracleJob {
  int k = 6;
  int n_total = 1000;
  int draws = 20;
  std::uint64_t seed = 1;
  OracleOptions options;
  std::vector<OracleCell> grid;
};

inline OracleJob oracle_job_from_json(const nlohmann::json& j) {
  return as_config([&] {
    detail::reject_unknown_keys(
        j, {"schemaVersion", "K", "N", "draws", "seed", "minPerArm", "estimators", "grid", "threads", "quadrature"},
        "oracle config");
    check_schema(j);
    OracleJob job;
    job.k = j.value("K", job.k);
    job.n_total = j.value("N", job.n_total);
    job.draws = j.value("draws", job.draws);
    job.seed = j.value("seed", job.seed);
    job.options.min_per_arm = j.value("minPerArm", job.options.min_per_arm);
    job.options.greedy.threads = j.value("threads", 1);
    if (j.contains("quadrature")) job.options.greedy.quadrature = quadrature_from_json(j.at("quadrature"));
    if (j.contains("estimators")) job.options.kinds = parse_kinds(j.at("estimators"));
    for (const auto& c : j.at("grid")) {
      detail::reject_unknown_keys(c, {"v0", "shape", "kappa"}, "grid cell");
      OracleCell cell;
      cell.regime = parse_v0_regime(c.at("v0").get<std::string>());
      cell.kappa = c.at("kappa").get<double>();
      cell.shape = c.contains("shape") ? parse_tau_shape(c.at("shape").get<std::string>())
                                       : (cell.kappa == 0.0 ? TauShape::Zero : TauShape::Dense);
      validate_signal(cell.shape, cell.kappa);
      job.grid.push_back(cell);
    }
    return job;
  });
}

inline void validate(const OracleJob& job) {
  as_config([&] {
    if (job.grid.empty()) throw ConfigError("oracle grid is empty");
    if (job.draws < 1) throw ConfigError("draws must be at least 1");
    if (job.options.greedy.threads < 1) throw ConfigError("threads must be at least 1");
    for (auto kind : job.options.kinds) {
      DesignProblem p{job.k, job.n_total, Vector::Ones(job.k + 1), Vector::Zero(job.k), kind,
                      job.options.min_per_arm};
      p.validate();
    }
    return 0;
  });
}

/// Cells with the same V₀ regime share a seed, so they see the same
/// variance draws and differ only in τ.
inline std::uint64_t oracle_cell_seed(std::uint64_t seed, V0Regime regime) {
  return derive_seed(seed, regime == V0Regime::Low ? 0 : 1);
}

inline std::string shape_label(const OracleCell& c) { return c.kappa == 0.0 ? "-" : to_string(c.shape); }

inline int cmd_oracle(const OracleJob& job, const std::filesystem::path& out_dir, std::ostream& log, int verbosity) {
  std::ostringstream table;
  table << "K,N,v0_regime,tau_shape,kappa,draws,neyman_n0_share,estimator,delta_n0,delta_n1,delta_nK,"
           "share_draws_n0_up\n";
  std::ostringstream alloc;
  alloc << "K,N,v0_regime,tau_shape,kappa,design,arm,mean_n,mean_share\n";
  nlohmann::json rows = nlohmann::json::array();

  for (const auto& cell : job.grid) {
    if (verbosity > 0) {
      log << "oracle: v0=" << to_string(cell.regime) << " shape=" << shape_label(cell) << " kappa=" << cell.kappa
          << '\n';
    }
    const auto t = oracle_table(job.k, cell.regime, cell.shape, cell.kappa, job.n_total, job.draws,
                                oracle_cell_seed(job.seed, cell.regime), job.options);
    const std::string prefix = std::to_string(job.k) + "," + std::to_string(job.n_total) + "," +
                               to_string(cell.regime) + "," + shape_label(cell) + "," + fmt(cell.kappa);
    nlohmann::json jr = {{"v0", to_string(cell.regime)},
                         {"shape", shape_label(cell)},
                         {"kappa", cell.kappa},
                         {"neymanN0Share", t.neyman_share},
                         {"estimators", nlohmann::json::object()}};
    for (const auto& r : t.rows) {
      const std::string name(to_string(r.kind));
      table << prefix << "," << job.draws << "," << fmt(t.neyman_share) << "," << name << "," << fmt(r.delta_n0)
            << "," << fmt(r.delta_n1) << "," << fmt(r.delta_nk) << "," << fmt(r.positive_n0_fraction) << "\n";
      jr["estimators"][name] = {{"deltaN0", r.delta_n0},
                                {"deltaN1", r.delta_n1},
                                {"deltaNK", r.delta_nk},
                                {"shareDrawsN0Up", r.positive_n0_fraction}};
    }
    auto emit_alloc = [&](const std::string& design, const Vector& mean) {
      for (int a = 0; a <= job.k; ++a) {
        alloc << prefix << "," << design << "," << a << "," << fmt(mean(a)) << "," << fmt(mean(a) / job.n_total)
              << "\n";
      }
    };
    emit_alloc("neyman", t.neyman_mean_allocation);
    for (const auto& r : t.rows) emit_alloc(std::string(to_string(r.kind)), r.mean_allocation);
    rows.push_back(jr);
  }

  nlohmann::json summary = {{"schemaVersion", kSchemaVersion},
                            {"command", "oracle"},
                            {"K", job.k},
                            {"N", job.n_total},
                            {"draws", job.draws},
                            {"seed", job.seed},
                            {"minPerArm", job.options.min_per_arm},
                            {"estimators", kinds_json(job.options.kinds)},
                            {"rows", rows}};
  OutputSet files(out_dir);
  files.add("oracle_table.csv", table.str());
  files.add("oracle_allocations.csv", alloc.str());
  files.add("oracle_summary.json", summary.dump(2) + "\n");
  for (const auto& p : files.commit()) log << "wrote " << p.string() << '\n';
  return 0;
}

// Simulate ------------------------------------------------------------------

inline SimConfig sim_config_from_json(const nlohmann::json& j) {
  return as_config([&] {
    detail::reject_unknown_keys(j,
                                {"schemaVersion", "K", "N", "iterations", "seed", "v0", "shape", "kappa", "mu0",
                                 "allocators", "estimators", "burnInPerArm", "varianceFloor", "metricUnit", "threads",
                                 "quadrature"},
                                "simulate config");
    check_schema(j);
    SimConfig c;
    c.k = j.value("K", c.k);
    c.n_total = j.value("N", c.n_total);
    c.iterations = j.value("iterations", c.iterations);
    c.seed = j.value("seed", c.seed);
    c.regime = parse_v0_regime(j.value("v0", std::string("high")));
    c.kappa = j.value("kappa", 0.0);
    c.shape = j.contains("shape") ? parse_tau_shape(j.at("shape").get<std::string>())
                                  : (c.kappa == 0.0 ? TauShape::Zero : TauShape::Dense);
    c.mu0 = j.value("mu0", c.mu0);
    c.burn_in_per_arm = j.value("burnInPerArm", c.burn_in_per_arm);
    c.variance_floor = j.value("varianceFloor", c.variance_floor);
    c.metric_unit = j.value("metricUnit", c.metric_unit);
    c.threads = j.value("threads", c.threads);
    if (j.contains("quadrature")) c.quadrature = quadrature_from_json(j.at("quadrature"));
    if (j.contains("allocators")) {
      for (const auto& a : j.at("allocators")) {
        detail::reject_unknown_keys(a, {"label", "target"}, "allocator");
        const Target t = parse_target(a.at("target").get<std::string>());
        c.allocators.push_back({a.value("label", to_string(t)), t});
      }
    } else {
      c.allocators = standard_allocators();
    }
    if (j.contains("estimators")) {
      c.estimators = parse_kinds(j.at("estimators"));
    } else {
      c.estimators.assign(std::begin(kAllEstimators), std::end(kAllEstimators));
    }
    return c;
  });
}

inline nlohmann::json to_json(const SimConfig& c) {
  nlohmann::json allocs = nlohmann::json::array();
  for (const auto& a : c.allocators) allocs.push_back({{"label", a.label}, {"target", to_string(a.target)}});
  return {{"K", c.k},
          {"N", c.n_total},
          {"iterations", c.iterations},
          {"seed", c.seed},
          {"v0", to_string(c.regime)},
          {"shape", to_string(c.shape)},
          {"kappa", c.kappa},
          {"mu0", c.mu0},
          {"allocators", allocs},
          {"estimators", kinds_json(c.estimators)},
          {"burnInPerArm", c.burn_in_per_arm},
          {"varianceFloor", c.variance_floor},
          {"metricUnit", c.metric_unit},
          {"threads", c.threads},
          {"quadrature", shrinkalloc::to_json(c.quadrature)}};
}

inline int cmd_simulate(const SimConfig& c, const std::filesystem::path& out_dir, std::ostream& log, int verbosity) {
  if (verbosity > 0) log << "simulate: " << c.iterations << " iterations of N=" << c.n_total << '\n';
  const auto r = run_experiment(c);
  std::ostringstream traj;
  traj << "allocator,target,estimator,unit,mse\n";
  nlohmann::json series = nlohmann::json::array();
  for (const auto& s : r.series) {
    const std::string head = s.allocator + "," + to_string(s.target) + "," + std::string(to_string(s.estimator)) + ",";
    for (std::size_t i = 0; i < s.mean.size(); ++i) traj << head << (i + 1) << "," << fmt(s.mean[i]) << "\n";
    nlohmann::json js = {{"allocator", s.allocator},
                         {"target", to_string(s.target)},
                         {"estimator", std::string(to_string(s.estimator))},
                         {"mseAt", nullptr},
                         {"meanMseFrom", nullptr}};
    if (s.mse_at) js["mseAt"] = *s.mse_at;
    if (s.mean_mse_from) js["meanMseFrom"] = *s.mean_mse_from;
    series.push_back(js);
  }
  nlohmann::json counts = nlohmann::json::object();
  for (std::size_t a = 0; a < c.allocators.size(); ++a) {
    counts[c.allocators[a].label] = detail::vector_json(r.mean_final_counts[a]);
  }
  nlohmann::json summary = {{"schemaVersion", kSchemaVersion},
                            {"command", "simulate"},
                            {"config", to_json(c)},
                            {"dgp", {{"V", detail::vector_json(r.dgp.v)}, {"tau", detail::vector_json(r.dgp.tau)}}},
                            {"metricUnit", c.metric_unit},
                            {"series", series},
                            {"meanFinalCounts", counts}};
  OutputSet files(out_dir);
  files.add("trajectories.csv", traj.str());
  files.add("simulate_summary.json", summary.dump(2) + "\n");
  for (const auto& p : files.commit()) log << "wrote " << p.string() << '\n';
  return 0;
}

// Risk ----------------------------------------------------------------------

struct RiskJob {
  RiskQuery query;
  long draws = 100000;
  std::uint64_t seed = 1;
  int threads = 1;
  QuadratureSettings quadrature;
};

inline void print_risk(const RiskJob& job, std::ostream& out) {
  const CovarianceSummary sigma(build_covariance(job.query.n, job.query.v));
  const auto calls_before = quad::call_count.load();
  const double exact = risk_exact(job.query.kind, sigma, job.query.tau, job.quadrature);
  const auto calls = quad::call_count.load() - calls_before;
  const auto mc = risk_mc(job.query.kind, sigma, job.query.tau, job.draws, job.seed, job.threads);
  out << std::setprecision(10);
  out << "kind:             " << to_string(job.query.kind) << '\n';
  out << "trace(Sigma):     " << sigma.trace() << '\n';
  out << "risk_exact:       " << exact << '\n';
  out << "risk_mc:          " << mc.mean << " +/- " << mc.se << " (" << mc.draws << " draws)\n";
  out << "z:                " << (mc.se > 0 ? (exact - mc.mean) / mc.se : 0.0) << '\n';
  out << "quadrature_calls: " << calls << '\n';
}

// Bench ---------------------------------------------------------------------

struct BenchRow {
  int k = 0;
  double bock_ms = 0.0;
  double sure_min_ms = 0.0;
  double dimmery_ms = 0.0;
};

/// Mean milliseconds per risk_exact call over `reps` random (n, V, τ).
inline std::vector<BenchRow> benchmark_risk(const std::vector<int>& ks, int reps, std::uint64_t seed,
                                            const QuadratureSettings& settings = {}) {
  if (reps < 1) throw InvalidArgument("reps must be at least 1");
  std::vector<BenchRow> rows;
  for (int k : ks) {
    if (k < 3) throw InvalidArgument("benchmark K must be at least 3");
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
    std::uniform_int_distribution<int> count(20, 200);
    std::lognormal_distribution<double> var(kLogVarianceLocation, kLogVarianceScale);
    std::normal_distribution<double> z;
    std::vector<std::pair<CovarianceSummary, Vector>> cases;
    cases.reserve(static_cast<std::size_t>(reps));
    for (int r = 0; r < reps; ++r) {
      ArmCounts n(static_cast<std::size_t>(k + 1));
      ArmVariances v(k + 1);
      for (int a = 0; a <= k; ++a) {
        n[static_cast<std::size_t>(a)] = count(rng);
        v(a) = var(rng);
      }
      Vector tau(k);
      for (int a = 0; a < k; ++a) tau(a) = 2.0 * z(rng);
      cases.emplace_back(CovarianceSummary(build_covariance(n, v)), tau);
    }
    BenchRow row{k, 0, 0, 0};
    volatile double sink = 0.0;
    for (auto kind : kShrinkers) {
      const auto t0 = std::chrono::steady_clock::now();
      for (const auto& [sigma, tau] : cases) sink = sink + risk_exact(kind, sigma, tau, settings);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / reps;
      if (kind == EstimatorKind::Bock) row.bock_ms = ms;
      if (kind == EstimatorKind::SureMin) row.sure_min_ms = ms;
      if (kind == EstimatorKind::Dimmery) row.dimmery_ms = ms;
    }
    rows.push_back(row);
  }
  return rows;
}

// Entry point ---------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Shrinkage-aware treatment allocation: oracle designs, simulations, risk and trial service"};
  app.require_subcommand(1);
  int verbosity = 0;
  app.add_flag("-v,--verbose", verbosity, "More log output on stderr");

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;

  auto* oracle = app.add_subcommand("oracle", "Oracle allocations relative to Neyman over a config grid");
  std::optional<int> draws;
  oracle->add_option("-c,--config", config_path, "JSON config")->required()->check(CLI::ExistingFile);
  oracle->add_option("-o,--out", out_dir, "Output directory")->required();
  oracle->add_option("--seed", seed, "Seed override");
  oracle->add_option("--draws", draws, "DGP draws per cell override");

  auto* simulate = app.add_subcommand("simulate", "Adaptive trial simulations with MSE trajectories");
  std::optional<int> iterations;
  std::optional<int> sim_threads;
  simulate->add_option("-c,--config", config_path, "JSON config")->required()->check(CLI::ExistingFile);
  simulate->add_option("-o,--out", out_dir, "Output directory")->required();
  simulate->add_option("--seed", seed, "Seed override");
  simulate->add_option("--iterations", iterations, "Iterations override");
  simulate->add_option("--threads", sim_threads, "Worker threads");

  auto* risk = app.add_subcommand("risk", "Exact risk next to a Monte Carlo estimate for one query");
  std::string risk_config;
  std::optional<std::string> kind_name;
  std::vector<int> q_n;
  std::vector<double> q_v;
  std::vector<double> q_tau;
  std::optional<long> risk_draws;
  int risk_threads = 1;
  risk->add_option("-c,--config", risk_config, "JSON query {kind, n, V, tau, draws, seed, quadrature}")
      ->check(CLI::ExistingFile);
  risk->add_option("--kind", kind_name, "diff_in_means | bock | sure_min | dimmery");
  risk->add_option("--n", q_n, "Per-arm counts, control first")->delimiter(',');
  risk->add_option("--v", q_v, "Per-arm variances, control first")->delimiter(',');
  risk->add_option("--tau", q_tau, "Treatment effects (K entries)")->delimiter(',');
  risk->add_option("--draws", risk_draws, "Monte Carlo draws (default 100000)");
  risk->add_option("--seed", seed, "Seed override");
  risk->add_option("--threads", risk_threads, "Monte Carlo threads")->check(CLI::PositiveNumber);

  auto* bench = app.add_subcommand("bench", "Milliseconds per risk_exact call by K and shrinker");
  std::vector<int> ks{4, 6, 8, 12, 16};
  int reps = 1000;
  std::string bench_out;
  bench->add_option("--k", ks, "Arm counts to time")->delimiter(',');
  bench->add_option("--reps", reps, "Repetitions per cell")->check(CLI::PositiveNumber);
  bench->add_option("--seed", seed, "Seed for the random instances");
  bench->add_option("-o,--out", bench_out, "Also write the table as CSV here");

  auto* serve = app.add_subcommand("serve", "Run the trial HTTP service");
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string data_dir = "trials";
  std::string token;
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port")->check(CLI::Range(1, 65535));
  serve->add_option("--data-dir", data_dir, "Session logs directory");
  serve->add_option("--token", token, "Bearer token (default: $SHRINKALLOC_TOKEN)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*oracle) {
      OracleJob job = oracle_job_from_json(load_json(config_path));
      if (seed) job.seed = *seed;
      if (draws) job.draws = *draws;
      validate(job);
      return cmd_oracle(job, out_dir, err, verbosity);
    }
    if (*simulate) {
      SimConfig c = sim_config_from_json(load_json(config_path));
      if (seed) c.seed = *seed;
      if (iterations) c.iterations = *iterations;
      if (sim_threads) c.threads = *sim_threads;
      as_config([&] {
        c.validate();
        return 0;
      });
      return cmd_simulate(c, out_dir, err, verbosity);
    }
    if (*risk) {
      RiskJob job;
      job.threads = risk_threads;
      as_config([&] {
        nlohmann::json j = risk_config.empty() ? nlohmann::json::object() : load_json(risk_config);
        detail::reject_unknown_keys(j, {"schemaVersion", "kind", "n", "V", "tau", "draws", "seed", "quadrature"},
                                    "risk query");
        check_schema(j);
        job.query.kind = parse_estimator_kind(kind_name ? *kind_name : j.at("kind").get<std::string>());
        const auto n = q_n.empty() ? j.at("n").get<std::vector<int>>() : q_n;
        const auto v = q_v.empty() ? j.at("V").get<std::vector<double>>() : q_v;
        const auto tau = q_tau.empty() ? j.at("tau").get<std::vector<double>>() : q_tau;
        job.query.n = n;
        job.query.v = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
        job.query.tau = Eigen::Map<const Vector>(tau.data(), static_cast<Eigen::Index>(tau.size()));
        job.draws = risk_draws ? *risk_draws : j.value("draws", job.draws);
        job.seed = seed ? *seed : j.value("seed", job.seed);
        if (j.contains("quadrature")) job.quadrature = quadrature_from_json(j.at("quadrature"));
        detail::check_risk_inputs(job.query.kind, CovarianceSummary(build_covariance(job.query.n, job.query.v)),
                          job.query.tau);
        if (job.draws < 10000) throw ConfigError("draws must be at least 10000");
        return 0;
      });
      print_risk(job, out);
      return 0;
    }
    if (*bench) {
      for (int k : ks) {
        if (k < 3) throw ConfigError("bench needs K >= 3, got " + std::to_string(k));
      }
      const auto table = benchmark_risk(ks, reps, seed.value_or(1));
      std::ostringstream csv;
      csv << "K,bock_ms,sure_min_ms,dimmery_ms\n";
      out << std::left << std::setw(6) << "K" << std::setw(14) << "Bock" << std::setw(14) << "SURE-min"
          << "Dimmery\n";
      out << std::fixed << std::setprecision(4);
      for (const auto& r : table) {
        out << std::setw(6) << r.k << std::setw(14) << r.bock_ms << std::setw(14) << r.sure_min_ms << r.dimmery_ms
            << '\n';
        csv << r.k << "," << fmt(r.bock_ms) << "," << fmt(r.sure_min_ms) << "," << fmt(r.dimmery_ms) << "\n";
      }
      out << "(mean ms per call over " << reps << " repetitions)\n";
      if (!bench_out.empty()) {
        const std::filesystem::path p(bench_out);
        OutputSet files(p.has_parent_path() ? p.parent_path() : std::filesystem::path("."));
        files.add(p.filename().string(), csv.str());
        files.commit();
      }
      return 0;
    }
    if (*serve) {
      if (token.empty()) {
        if (const char* env = std::getenv("SHRINKALLOC_TOKEN")) token = env;
      }
      TrialService svc{std::filesystem::path(data_dir)};
      httplib::Server server;
      register_routes(server, svc, token);
      err << "serving /v1 on " << host << ":" << port << " (" << svc.session_count() << " sessions loaded)\n";
      if (!server.listen(host, port)) {
        err << "error: cannot listen on " << host << ":" << port << '\n';
        return 1;
      }
      return 0;
    }
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << '\n';
    return 2;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace shrinkalloc::cli
