// aaren_cli: verification suites, the streaming benchmark, a scan table
// printer and toy training.
//
// Exit codes: 0 success, 1 a check failed or training diverged, 2 usage,
// configuration or I/O error.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aaren/bench.hpp"
#include "aaren/error.hpp"
#include "aaren/scan.hpp"
#include "aaren/toy.hpp"
#include "aaren/verify.hpp"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitUsage = 2;

const char* const kFooter = R"(Outputs
  bench --out CSV, LF line endings, one row per model per token:
    model,t,state_scalars,madds_step,madds_cumulative,wall_ns_step,wall_ns_cumulative
    model is aaren or transformer_kv; t counts from 1; state_scalars is the
    number of scalars the model holds after token t; madds are counted
    multiply-adds; wall_ns columns are advisory.
  train-toy --log JSON lines, one object per logged step:
    {"step":N,"loss":X,"seed":S,"config_hash":"<16 hex digits>"}
  followed by one summary object:
    {"summary":true,"eval_metric":X,"metric":"mse|accuracy","initial_loss":X,
     "final_loss":X,"seed":S,"config_hash":"..."}
  verify --grad prints one JSON object per checked model:
    {"model":..,"step":h,"precision":"double","max_rel_error":X,
     "params":[{"name":..,"count":N,"max_rel_error":X,"worst_index":I}]}

Config files (JSON) use the field names below; flags override file values.
  bench:     d_model n_heads n_layers max_tokens seed precision("single"|"double")
  train-toy: kind seq_len d_input n_train n_eval seed model steps lr momentum batch_size

Exit codes: 0 success, 1 check failure or diverged training, 2 usage/config/IO error.)";

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) aaren::fail(aaren::Errc::io_error, "cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    aaren::fail(aaren::Errc::io_error, "config '" + path + "' is not valid JSON: " + e.what());
  }
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known, const std::string& path) {
  if (!j.is_object()) aaren::fail(aaren::Errc::invalid_config, "config '" + path + "' must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) aaren::fail(aaren::Errc::invalid_config, "unknown config key '" + key + "'");
  }
}

template <class T>
void read_key(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    aaren::fail(aaren::Errc::invalid_config, std::string("config key '") + key + "' has the wrong type");
  }
}

// ---------------------------------------------------------------------------

void print_check(const aaren::CheckResult& c) {
  std::printf("%s %s.%s value=%.3e tol=%.1e\n", c.passed ? "PASS" : "FAIL", c.suite.c_str(), c.name.c_str(),
              c.value, c.tolerance);
}

json grad_report_json(const std::string& model, const aaren::ad::GradReport& r) {
  json params = json::array();
  for (const auto& e : r.entries) {
    params.push_back({{"name", e.name},
                      {"count", e.count},
                      {"max_rel_error", e.max_rel_error},
                      {"worst_index", e.worst_index}});
  }
  return {{"model", model},
          {"step", r.step},
          {"precision", aaren::precision_name(r.precision)},
          {"max_rel_error", r.max_rel_error},
          {"params", params}};
}

int run_verify(bool grad, bool scan, bool kernels, bool aaren_suite, std::uint64_t seed) {
  if (!grad && !scan && !kernels && !aaren_suite) grad = scan = kernels = aaren_suite = true;
  std::vector<aaren::CheckResult> checks;
  const auto run = [&](const std::vector<aaren::CheckResult>& suite) {
    for (const auto& c : suite) {
      print_check(c);
      checks.push_back(c);
    }
  };
  if (kernels) run(aaren::verify_kernels(seed));
  if (scan) run(aaren::verify_scan(seed));
  if (aaren_suite) run(aaren::verify_aaren(seed));
  if (grad) {
    const auto suite = aaren::verify_grad(seed);
    std::cout << grad_report_json("aaren", suite.aaren).dump() << '\n'
              << grad_report_json("transformer", suite.transformer).dump() << '\n';
    run(suite.checks);
  }
  std::size_t failed = 0;
  for (const auto& c : checks) failed += c.passed ? 0 : 1;
  std::printf("%zu checks, %zu failed\n", checks.size(), failed);
  return failed == 0 ? kExitOk : kExitFailed;
}

// ---------------------------------------------------------------------------

struct BenchOverrides {
  std::optional<std::size_t> d_model, n_heads, n_layers, max_tokens;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
};

int run_bench(const std::string& config_path, const std::string& out_path, const BenchOverrides& o) {
  aaren::BenchConfig config;
  if (!config_path.empty()) {
    const json j = load_json(config_path);
    reject_unknown_keys(j, {"d_model", "n_heads", "n_layers", "max_tokens", "seed", "precision"}, config_path);
    read_key(j, "d_model", config.d_model);
    read_key(j, "n_heads", config.n_heads);
    read_key(j, "n_layers", config.n_layers);
    read_key(j, "max_tokens", config.max_tokens);
    read_key(j, "seed", config.seed);
    std::string precision(aaren::precision_name(config.precision));
    read_key(j, "precision", precision);
    config.precision = aaren::parse_precision(precision);
  }
  if (o.d_model) config.d_model = *o.d_model;
  if (o.n_heads) config.n_heads = *o.n_heads;
  if (o.n_layers) config.n_layers = *o.n_layers;
  if (o.max_tokens) config.max_tokens = *o.max_tokens;
  if (o.seed) config.seed = *o.seed;
  if (o.precision) config.precision = aaren::parse_precision(*o.precision);

  const auto records = aaren::run_streaming_bench(config);
  aaren::write_csv(records, out_path);

  const auto aaren_records = aaren::records_for(records, aaren::BenchModel::aaren);
  const auto kv_records = aaren::records_for(records, aaren::BenchModel::transformer_kv);
  std::printf("wrote %zu rows to %s\n", records.size(), out_path.c_str());
  std::printf("state scalars at t=%zu: aaren %llu, transformer_kv %llu\n", config.max_tokens,
              static_cast<unsigned long long>(aaren_records.back().state_scalars),
              static_cast<unsigned long long>(kv_records.back().state_scalars));
  for (std::uint64_t n = 64; 2 * n <= config.max_tokens; n *= 2) {
    std::printf("cumulative madds ratio t=%llu/%llu: aaren %.3f, transformer_kv %.3f\n",
                static_cast<unsigned long long>(2 * n), static_cast<unsigned long long>(n),
                aaren::cumulative_ratio(aaren_records, n), aaren::cumulative_ratio(kv_records, n));
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

template <class E, class Op, class Show>
void print_scan_table(const std::vector<E>& leaves, Op op, Show show) {
  const auto plan = aaren::ScanPlan::for_length(leaves.size());
  std::vector<E> current = leaves;
  const auto row = [&](const std::string& label, const std::vector<E>& xs) {
    std::printf("%-12s", label.c_str());
    for (const auto& x : xs) std::printf(" %s", show(x).c_str());
    std::printf("\n");
  };
  std::printf("n=%zu rounds=%zu\n", plan.n, plan.rounds);
  row("leaves", current);
  for (std::size_t r = 0; r < plan.offsets.size(); ++r) {
    const std::size_t offset = plan.offsets[r];
    std::vector<E> next(current.size());
    for (std::size_t j = 0; j < current.size(); ++j) {
      next[j] = j < offset ? current[j] : op(current[j - offset], current[j]);
    }
    current = std::move(next);
    row("offset " + std::to_string(offset), current);
  }
}

std::string fmt(double x, const char* spec = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

int run_scan_demo(std::size_t n, const std::string& op, std::uint64_t seed) {
  aaren::SeededRng rng(seed);
  if (op == "sum") {
    std::vector<long long> leaves(n);
    for (auto& x : leaves) x = static_cast<long long>(rng.below(10));
    print_scan_table(leaves, [](long long a, long long b) { return a + b; },
                     [](long long x) { return std::to_string(x); });
  } else if (op == "max") {
    std::vector<long long> leaves(n);
    for (auto& x : leaves) x = static_cast<long long>(rng.below(100));
    print_scan_table(leaves, [](long long a, long long b) { return std::max(a, b); },
                     [](long long x) { return std::to_string(x); });
  } else {
    // one-dimensional values so each cell fits as (m, u, w)
    std::vector<aaren::ScanElement<double>> leaves;
    std::vector<double> scores(n), values(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = 2.0 * rng.normal();
      values[i] = rng.normal();
      leaves.push_back(aaren::scan_leaf<double>(scores[i], std::span<const double>(&values[i], 1)));
    }
    print_scan_table(leaves, aaren::AttentionCombine{}, [](const aaren::ScanElement<double>& e) {
      return "(" + fmt(e.m) + "," + fmt(e.u) + "," + fmt(e.w[0]) + ")";
    });
    const auto outputs =
        aaren::many_to_many_scored<double>(scores, aaren::Mat<double>(n, 1, std::vector<double>(values)));
    auto carry = aaren::AttentionCarry<double>::empty(1);
    std::printf("%-12s", "o = w/u");
    for (const auto& o : outputs) std::printf(" %s", fmt(o[0]).c_str());
    std::printf("\n%-12s", "recurrence");
    for (std::size_t i = 0; i < n; ++i) {
      aaren::rnn_cell_update<double>(carry, scores[i], std::span<const double>(&values[i], 1));
      std::printf(" %s", fmt(carry.output()[0]).c_str());
    }
    std::printf("\n");
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainFlags {
  std::optional<std::string> task, model;
  std::optional<std::size_t> steps, seq_len, d_input, n_train, n_eval, batch_size;
  std::optional<double> lr, momentum;
  std::optional<std::uint64_t> seed;
};

int run_train(const std::string& config_path, const std::string& log_path, const TrainFlags& f) {
  aaren::TrainOptions opts;
  if (!config_path.empty()) {
    const json j = load_json(config_path);
    reject_unknown_keys(j,
                        {"kind", "seq_len", "d_input", "n_train", "n_eval", "seed", "model", "steps", "lr",
                         "momentum", "batch_size"},
                        config_path);
    std::string kind = aaren::task_name(opts.task.kind);
    std::string model = aaren::model_kind_name(opts.model);
    read_key(j, "kind", kind);
    read_key(j, "model", model);
    opts.task.kind = aaren::parse_task(kind);
    opts.model = aaren::parse_model_kind(model);
    read_key(j, "seq_len", opts.task.seq_len);
    read_key(j, "d_input", opts.task.d_input);
    read_key(j, "n_train", opts.task.n_train);
    read_key(j, "n_eval", opts.task.n_eval);
    read_key(j, "seed", opts.task.seed);
    read_key(j, "steps", opts.steps);
    read_key(j, "lr", opts.lr);
    read_key(j, "momentum", opts.momentum);
    read_key(j, "batch_size", opts.batch_size);
  }
  if (f.task) opts.task.kind = aaren::parse_task(*f.task);
  if (f.model) opts.model = aaren::parse_model_kind(*f.model);
  if (f.steps) opts.steps = *f.steps;
  if (f.seq_len) opts.task.seq_len = *f.seq_len;
  if (f.d_input) opts.task.d_input = *f.d_input;
  if (f.n_train) opts.task.n_train = *f.n_train;
  if (f.n_eval) opts.task.n_eval = *f.n_eval;
  if (f.batch_size) opts.batch_size = *f.batch_size;
  if (f.lr) opts.lr = *f.lr;
  if (f.momentum) opts.momentum = *f.momentum;
  if (f.seed) opts.task.seed = *f.seed;
  opts.validate();

  // Fail on an unwritable log before spending time on training.
  aaren::write_train_log({}, log_path, false);
  try {
    const auto log = aaren::train(opts);
    aaren::write_train_log(log, log_path);
    std::printf("%s on %s: loss %.6g -> %.6g over %zu steps; eval %s %.6g\n", aaren::model_kind_name(opts.model),
                aaren::task_name(opts.task.kind), log.initial_loss(), log.final_loss(), opts.steps,
                log.metric.c_str(), log.eval_metric);
    return kExitOk;
  } catch (const aaren::DivergedError& e) {
    aaren::write_train_log(e.log(), log_path, false);
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailed;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Aaren attention-as-RNN toolkit"};
  app.footer(kFooter);
  app.require_subcommand(1);

  std::uint64_t seed = 1;

  auto* verify = app.add_subcommand("verify", "Run property suites; no selector runs all of them");
  bool grad = false, scan = false, kernels = false, aaren_suite = false;
  verify->add_flag("--grad", grad, "Finite-difference gradient checks (prints GradReport JSON lines)");
  verify->add_flag("--scan", scan, "Combine operator, prefix scan and many-to-many checks");
  verify->add_flag("--kernels", kernels, "Sequential / block / oracle attention agreement");
  verify->add_flag("--aaren", aaren_suite, "Aaren and KV-cache streaming checks");
  verify->add_option("--seed", seed, "Seed for the generated instances")->capture_default_str();

  auto* bench = app.add_subcommand("bench", "Streaming memory/compute benchmark, Aaren vs KV-cache transformer");
  std::string bench_config, bench_out;
  BenchOverrides bench_flags;
  bench->add_option("--config", bench_config, "JSON config file with BenchConfig fields");
  bench->add_option("--out", bench_out, "Output CSV path")->required();
  bench->add_option("--d-model", bench_flags.d_model, "Model width (default 4)");
  bench->add_option("--n-heads", bench_flags.n_heads, "Attention heads (default 2)");
  bench->add_option("--n-layers", bench_flags.n_layers, "Layers (default 2)");
  bench->add_option("--max-tokens", bench_flags.max_tokens, "Stream length, at least 64 (default 1024)");
  bench->add_option("--seed", bench_flags.seed, "Seed (default 0)");
  bench->add_option("--precision", bench_flags.precision, "single or double (default double)")
      ->check(CLI::IsMember({"single", "double"}));

  auto* demo = app.add_subcommand("scan-demo", "Print every round of a prefix scan");
  std::size_t demo_n = 8;
  std::string demo_op = "sum";
  demo->add_option("--n", demo_n, "Number of leaves")->capture_default_str()->check(CLI::Range(1, 64));
  demo->add_option("--op", demo_op, "Operator")
      ->capture_default_str()
      ->check(CLI::IsMember({"sum", "max", "attention"}));
  demo->add_option("--seed", seed, "Seed for the leaves")->capture_default_str();

  auto* train = app.add_subcommand("train-toy", "Train a toy model by gradient descent and log the loss");
  std::string train_config, train_log;
  TrainFlags train_flags;
  train->add_option("--config", train_config, "JSON config file with TaskSpec and training fields");
  train->add_option("--task", train_flags.task, "prefix_sum_regression, selective_copy or majority_classify")
      ->check(CLI::IsMember({"prefix_sum_regression", "selective_copy", "majority_classify"}));
  train->add_option("--model", train_flags.model, "aaren or transformer (default aaren)")
      ->check(CLI::IsMember({"aaren", "transformer"}));
  train->add_option("--steps", train_flags.steps, "Gradient steps (default 2000)");
  train->add_option("--lr", train_flags.lr, "Learning rate (default 0.1)");
  train->add_option("--momentum", train_flags.momentum, "Heavy-ball momentum in [0, 1) (default 0: plain SGD)");
  train->add_option("--seed", train_flags.seed, "Seed for data, init and batches (default 0)");
  train->add_option("--seq-len", train_flags.seq_len, "Sequence length (default 32)");
  train->add_option("--d-input", train_flags.d_input, "Token width (default 8)");
  train->add_option("--n-train", train_flags.n_train, "Training sequences (default 64)");
  train->add_option("--n-eval", train_flags.n_eval, "Evaluation sequences (default 32)");
  train->add_option("--batch-size", train_flags.batch_size, "Sequences per step (default 8)");
  train->add_option("--log", train_log, "Output JSON-lines log path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*verify) return run_verify(grad, scan, kernels, aaren_suite, seed);
    if (*bench) return run_bench(bench_config, bench_out, bench_flags);
    if (*demo) return run_scan_demo(demo_n, demo_op, seed);
    if (*train) return run_train(train_config, train_log, train_flags);
  } catch (const aaren::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    switch (e.code()) {
      case aaren::Errc::io_error:
      case aaren::Errc::invalid_config:
      case aaren::Errc::usage_error:
        return kExitUsage;
      default:
        return kExitFailed;
    }
  }
  return kExitUsage;
}
