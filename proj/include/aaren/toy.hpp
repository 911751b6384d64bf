#pragma once

// Small synthetic sequence tasks and a gradient-descent loop that trains an
// Aaren stack (or the baseline transformer) end to end through the taped
// scan. Every task has a target at each position, so the objective is a
// masked mean of per-token losses.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aaren/aaren.hpp"
#include "aaren/autodiff.hpp"
#include "aaren/error.hpp"
#include "aaren/layers.hpp"
#include "aaren/numeric.hpp"
#include "aaren/transformer.hpp"

namespace aaren {

enum class TaskKind { prefix_sum_regression, selective_copy, majority_classify };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::prefix_sum_regression: return "prefix_sum_regression";
    case TaskKind::selective_copy: return "selective_copy";
    case TaskKind::majority_classify: return "majority_classify";
  }
  return "?";
}

inline TaskKind parse_task(std::string_view name) {
  if (name == "prefix_sum_regression") return TaskKind::prefix_sum_regression;
  if (name == "selective_copy") return TaskKind::selective_copy;
  if (name == "majority_classify") return TaskKind::majority_classify;
  fail(Errc::invalid_config, "unknown task '" + std::string(name) + "'");
}

enum class ModelKind { aaren, transformer };

inline const char* model_kind_name(ModelKind k) { return k == ModelKind::aaren ? "aaren" : "transformer"; }

inline ModelKind parse_model_kind(std::string_view name) {
  if (name == "aaren") return ModelKind::aaren;
  if (name == "transformer") return ModelKind::transformer;
  fail(Errc::invalid_config, "unknown model '" + std::string(name) + "'");
}

struct TaskSpec {
  TaskKind kind = TaskKind::prefix_sum_regression;
  std::size_t seq_len = 32;
  std::size_t d_input = 8;
  std::size_t n_train = 64;
  std::size_t n_eval = 32;
  std::uint64_t seed = 0;

  void validate() const {
    require(seq_len > 0 && d_input > 0 && n_train > 0 && n_eval > 0, Errc::invalid_config,
            "task sizes must be positive");
    require(kind != TaskKind::selective_copy || d_input >= 2, Errc::invalid_config,
            "selective_copy needs a marker channel and at least one content channel");
  }

  // Width of the per-position target.
  std::size_t d_output() const noexcept {
    switch (kind) {
      case TaskKind::prefix_sum_regression: return d_input;
      case TaskKind::selective_copy: return d_input - 1;
      case TaskKind::majority_classify: return 1;
    }
    return 0;
  }
};

// mask[k] = 1 where position k carries a target, 0 where it is ignored.
struct Example {
  HiddenSeq<double> inputs;
  std::vector<std::vector<double>> targets;
  std::vector<double> mask;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> eval;
};

namespace detail {

// prefix_sum_regression: x ~ N(0, 1); y_k = mean(x_1..x_k).
// selective_copy: channel 0 is 1 at one random position p and 0 elsewhere;
//   y_k = x_p[1..] for k >= p, no target before p.
// majority_classify: channel 0 is a +-1 vote, the rest N(0, 1) noise;
//   y_k = [sum of votes 1..k > 0], targets only at odd prefix lengths so
//   there are no ties.
inline Example make_example(const TaskSpec& spec, SeededRng& rng) {
  const std::size_t n = spec.seq_len, d = spec.d_input;
  Example ex;
  ex.targets.resize(n);
  ex.mask.assign(n, 1.0);
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  switch (spec.kind) {
    case TaskKind::prefix_sum_regression: {
      std::vector<double> sum(d, 0.0);
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t j = 0; j < d; ++j) {
          x[k][j] = rng.normal();
          sum[j] += x[k][j];
        }
        ex.targets[k].resize(d);
        for (std::size_t j = 0; j < d; ++j) ex.targets[k][j] = sum[j] / double(k + 1);
      }
      break;
    }
    case TaskKind::selective_copy: {
      const std::size_t p = static_cast<std::size_t>(rng.below(n));
      for (std::size_t k = 0; k < n; ++k) {
        x[k][0] = k == p ? 1.0 : 0.0;
        for (std::size_t j = 1; j < d; ++j) x[k][j] = rng.normal();
      }
      for (std::size_t k = 0; k < n; ++k) {
        ex.targets[k].assign(x[p].begin() + 1, x[p].end());
        if (k < p) ex.mask[k] = 0.0;
      }
      break;
    }
    case TaskKind::majority_classify: {
      double votes = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        x[k][0] = rng.below(2) ? 1.0 : -1.0;
        for (std::size_t j = 1; j < d; ++j) x[k][j] = rng.normal();
        votes += x[k][0];
        ex.targets[k] = {votes > 0.0 ? 1.0 : 0.0};
        if (k % 2 == 1) ex.mask[k] = 0.0;
      }
      break;
    }
  }
  for (auto& row : x) ex.inputs.push_back(Vec<double>(std::move(row)));
  return ex;
}

}  // namespace detail

// Train and eval sets come from different forks of the seed, so they never
// share a generator stream.
inline Dataset gen_task(const TaskSpec& spec) {
  spec.validate();
  const SeededRng root(spec.seed);
  SeededRng train_rng = root.fork(0);
  SeededRng eval_rng = root.fork(1);
  Dataset ds;
  for (std::size_t i = 0; i < spec.n_train; ++i) ds.train.push_back(detail::make_example(spec, train_rng));
  for (std::size_t i = 0; i < spec.n_eval; ++i) ds.eval.push_back(detail::make_example(spec, eval_rng));
  return ds;
}

// ---------------------------------------------------------------------------
// Model: a stack followed by a per-position linear readout.

template <class Stack>
struct scalar_of;
template <class T>
struct scalar_of<AarenModel<T>> {
  using type = T;
};
template <class T>
struct scalar_of<TransformerModel<T>> {
  using type = T;
};
template <class Stack>
using scalar_of_t = typename scalar_of<Stack>::type;

template <class Stack>
struct ToyNet {
  Stack stack;
  Mat<scalar_of_t<Stack>> readout;
  Vec<scalar_of_t<Stack>> readout_bias;
};

template <class M, class F>
  requires requires(M& m) { m.readout_bias; }
void visit_params(M& net, F&& f) {
  visit_params(net.stack, f);
  f(std::string("readout.w"), net.readout.flat());
  f(std::string("readout.b"), net.readout_bias.span());
}

// Defaults used for training: one layer, one head, width of the input and
// no residual, so the attention output feeds the readout directly.
inline AarenConfig toy_model_config(const TaskSpec& spec) {
  AarenConfig c;
  c.d_model = spec.d_input;
  c.n_heads = 1;
  c.n_layers = 1;
  c.use_residual = false;
  return c;
}

template <class Stack>
ToyNet<Stack> init_toy_net(Stack stack, std::size_t d_output, SeededRng rng) {
  const std::size_t d = stack.config.d_model;
  auto readout = rng.normal_mat<scalar_of_t<Stack>>(d_output, d, 1.0 / std::sqrt(double(d)));
  return {std::move(stack), std::move(readout), Vec<scalar_of_t<Stack>>::zeros(d_output)};
}

template <class U, class Stack>
auto cast_net(const ToyNet<Stack>& net) {
  auto stack = cast_model<U>(net.stack);
  return ToyNet<decltype(stack)>{std::move(stack), cast_mat<U>(net.readout), cast_vec<U>(net.readout_bias)};
}

template <class Stack>
std::vector<Vec<scalar_of_t<Stack>>> toy_forward(const ToyNet<Stack>& net,
                                                 const HiddenSeq<scalar_of_t<Stack>>& inputs) {
  using T = scalar_of_t<Stack>;
  const auto hidden = model_forward(net.stack, inputs);
  std::vector<Vec<T>> out;
  out.reserve(hidden.size());
  for (const auto& h : hidden) {
    Vec<T> y = matvec<T>(net.readout, h.span());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] + net.readout_bias[i];
    out.push_back(std::move(y));
  }
  return out;
}

// Loss of one position: mean squared error for the regression tasks, binary
// cross-entropy on the logit for majority_classify.
template <class T>
T token_loss(TaskKind kind, const Vec<T>& prediction, const std::vector<double>& target) {
  using std::exp;
  using std::log;
  using std::max;
  if (kind == TaskKind::majority_classify) {
    const T z = prediction[0];
    const T abs_z = max(z, -z);
    return max(z, T(0)) - T(target[0]) * z + log(T(1) + exp(-abs_z));
  }
  T sum = T(0);
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T diff = prediction[i] - T(target[i]);
    sum += diff * diff;
  }
  return sum / T(double(target.size()));
}

template <class T>
HiddenSeq<T> lift_inputs(const HiddenSeq<double>& inputs) {
  HiddenSeq<T> out;
  out.reserve(inputs.size());
  for (const auto& x : inputs) out.push_back(cast_vec<T>(x));
  return out;
}

// Masked mean of per-token losses over a set of examples.
template <class Stack>
scalar_of_t<Stack> batch_loss(const ToyNet<Stack>& net, TaskKind kind, const std::vector<const Example*>& batch) {
  using T = scalar_of_t<Stack>;
  T total = T(0);
  double weight = 0.0;
  for (const Example* ex : batch) {
    const auto preds = toy_forward(net, lift_inputs<T>(ex->inputs));
    for (std::size_t k = 0; k < preds.size(); ++k) {
      if (ex->mask[k] == 0.0) continue;
      total += token_loss<T>(kind, preds[k], ex->targets[k]);
      weight += 1.0;
    }
  }
  require(weight > 0.0, Errc::empty_input, "batch has no targets");
  return total / T(weight);
}

template <class Stack>
double dataset_loss(const ToyNet<Stack>& net, TaskKind kind, const std::vector<Example>& examples) {
  std::vector<const Example*> all;
  for (const auto& ex : examples) all.push_back(&ex);
  return value_of(batch_loss(net, kind, all));
}

// Loss at each position k, computed from the prefix x_1..x_k alone.
template <class Stack>
std::vector<double> per_position_losses(const ToyNet<Stack>& net, TaskKind kind, const Example& ex) {
  std::vector<double> out(ex.inputs.size());
  for (std::size_t k = 0; k < ex.inputs.size(); ++k) {
    const HiddenSeq<double> prefix(ex.inputs.begin(), ex.inputs.begin() + k + 1);
    const auto preds = toy_forward(net, prefix);
    out[k] = token_loss<double>(kind, preds.back(), ex.targets[k]);
  }
  return out;
}

// Mean-squared error for the regression tasks, accuracy for majority_classify.
template <class Stack>
double eval_metric(const ToyNet<Stack>& net, TaskKind kind, const std::vector<Example>& examples) {
  if (kind != TaskKind::majority_classify) return dataset_loss(net, kind, examples);
  double correct = 0.0, total = 0.0;
  for (const auto& ex : examples) {
    const auto preds = toy_forward(net, ex.inputs);
    for (std::size_t k = 0; k < preds.size(); ++k) {
      if (ex.mask[k] == 0.0) continue;
      correct += ((preds[k][0] > 0.0) == (ex.targets[k][0] > 0.5)) ? 1.0 : 0.0;
      total += 1.0;
    }
  }
  return correct / total;
}

inline const char* metric_name(TaskKind kind) {
  return kind == TaskKind::majority_classify ? "accuracy" : "mse";
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  ModelKind model = ModelKind::aaren;
  TaskSpec task;
  std::size_t steps = 2000;
  double lr = 0.1;
  double momentum = 0.0;  // 0 = plain SGD; heavy-ball otherwise
  std::size_t batch_size = 8;
  std::size_t log_every = 10;

  void validate() const {
    task.validate();
    require(lr >= 0.0 && std::isfinite(lr), Errc::invalid_config, "lr must be finite and non-negative");
    require(momentum >= 0.0 && momentum < 1.0, Errc::invalid_config, "momentum must lie in [0, 1)");
    require(batch_size > 0 && log_every > 0, Errc::invalid_config, "batch_size and log_every must be positive");
  }
};

struct LogEntry {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainLog {
  std::vector<LogEntry> entries;  // full training-set loss; step 0 is before any update
  double eval_metric = 0.0;
  std::string metric;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;

  double initial_loss() const { return entries.front().loss; }
  double final_loss() const { return entries.back().loss; }
};

class DivergedError : public Error {
 public:
  DivergedError(const std::string& what, TrainLog log) : Error(Errc::diverged_loss, what), log_(std::move(log)) {}
  const TrainLog& log() const noexcept { return log_; }

 private:
  TrainLog log_;
};

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string canonical_string(const TrainOptions& o) {
  const auto& t = o.task;
  const auto num = [](double x) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
  };
  return std::string("model=") + model_kind_name(o.model) + ";task=" + task_name(t.kind) +
         ";seq_len=" + std::to_string(t.seq_len) + ";d_input=" + std::to_string(t.d_input) +
         ";n_train=" + std::to_string(t.n_train) + ";n_eval=" + std::to_string(t.n_eval) +
         ";seed=" + std::to_string(t.seed) + ";steps=" + std::to_string(o.steps) + ";lr=" + num(o.lr) +
         ";momentum=" + num(o.momentum) + ";batch_size=" + std::to_string(o.batch_size);
}

namespace detail {

template <class Stack>
TrainLog train_net(ToyNet<Stack> net, const TrainOptions& opts, const Dataset& data) {
  const TaskKind kind = opts.task.kind;
  TrainLog log;
  log.metric = metric_name(kind);
  log.config_hash = fnv1a(canonical_string(opts));
  log.seed = opts.task.seed;

  std::vector<double> params = flatten(net);
  std::vector<double> velocity(params.size(), 0.0);
  SeededRng batch_rng = SeededRng(opts.task.seed).fork(3);

  const auto record = [&](std::size_t step) {
    assign_flat(net, std::span<const double>(params));
    const double loss = dataset_loss(net, kind, data.train);
    log.entries.push_back({step, loss});
    if (!std::isfinite(loss)) {
      throw DivergedError("training loss became non-finite at step " + std::to_string(step), log);
    }
  };

  // Overflowing parameters surface as non-finite scores or activations deep
  // in the forward pass; report those as divergence too.
  std::size_t step = 0;
  try {
    record(0);
    for (step = 1; step <= opts.steps; ++step) {
      std::vector<const Example*> batch;
      for (std::size_t i = 0; i < opts.batch_size; ++i) {
        batch.push_back(&data.train[static_cast<std::size_t>(batch_rng.below(data.train.size()))]);
      }
      auto taped = ad::forward_with_tape(
          [&](std::span<const ad::Var> flat) {
            auto lifted = cast_net<ad::Var>(net);
            assign_flat(lifted, flat);
            return batch_loss(lifted, kind, batch);
          },
          params);
      const auto grads = ad::backward(taped);
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (!std::isfinite(grads[i])) {
          throw DivergedError("non-finite gradient at step " + std::to_string(step), log);
        }
        velocity[i] = opts.momentum * velocity[i] + grads[i];
        params[i] -= opts.lr * velocity[i];
      }
      if (step % opts.log_every == 0 || step == opts.steps) record(step);
    }
  } catch (const DivergedError&) {
    throw;
  } catch (const Error& e) {
    if (e.code() != Errc::non_finite_input) throw;
    throw DivergedError("non-finite values at step " + std::to_string(step) + " (" + e.what() + ")", log);
  }
  assign_flat(net, std::span<const double>(params));
  log.eval_metric = eval_metric(net, kind, data.eval);
  return log;
}

}  // namespace detail

template <class Stack>
TrainLog train_net(ToyNet<Stack> net, const TrainOptions& opts) {
  opts.validate();
  return detail::train_net(std::move(net), opts, gen_task(opts.task));
}

// Builds the default toy model for `opts.model` from the task seed and trains it.
inline TrainLog train(const TrainOptions& opts) {
  opts.validate();
  const AarenConfig config = toy_model_config(opts.task);
  const SeededRng root(opts.task.seed);
  const std::size_t d_out = opts.task.d_output();
  const Dataset data = gen_task(opts.task);
  if (opts.model == ModelKind::aaren) {
    return detail::train_net(init_toy_net(init_aaren<double>(config, root.fork(10)), d_out, root.fork(11)), opts,
                             data);
  }
  return detail::train_net(init_toy_net(init_transformer<double>(config, root.fork(10)), d_out, root.fork(11)),
                           opts, data);
}

// ---------------------------------------------------------------------------
// JSON lines: one object per logged step, then a summary object.
//   {"step":10,"loss":0.25,"seed":0,"config_hash":"a1b2..."}
//   {"summary":true,"eval_metric":0.01,"metric":"mse","final_loss":...,...}

namespace detail {

inline std::string json_number(double x) {
  if (!std::isfinite(x)) return "null";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, 16);
  std::string s(buf, res.ptr);
  return std::string(16 - s.size(), '0') + s;
}

}  // namespace detail

inline std::string train_log_jsonl(const TrainLog& log, bool include_summary = true) {
  std::string out;
  const std::string tail = ",\"seed\":" + std::to_string(log.seed) + ",\"config_hash\":\"" +
                           detail::hex64(log.config_hash) + "\"}\n";
  for (const auto& e : log.entries) {
    out += "{\"step\":" + std::to_string(e.step) + ",\"loss\":" + detail::json_number(e.loss) + tail;
  }
  if (include_summary && !log.entries.empty()) {
    out += "{\"summary\":true,\"eval_metric\":" + detail::json_number(log.eval_metric) + ",\"metric\":\"" +
           log.metric + "\",\"initial_loss\":" + detail::json_number(log.initial_loss()) +
           ",\"final_loss\":" + detail::json_number(log.final_loss()) + tail;
  }
  return out;
}

inline void write_train_log(const TrainLog& log, const std::string& path, bool include_summary = true) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out << train_log_jsonl(log, include_summary);
  if (!out) fail(Errc::io_error, "write failed for '" + path + "'");
}

}  // namespace aaren
