#pragma once

// Streaming benchmark: the same seeded token stream is fed one token at a
// time to an Aaren stack and to a KV-cache transformer. Memory is reported
// as the number of scalars each model holds between tokens and compute as
// counted multiply-adds; both are exact and reproducible. Wall-clock columns
// are recorded alongside but are advisory.

#include <charconv>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "aaren/aaren.hpp"
#include "aaren/error.hpp"
#include "aaren/numeric.hpp"
#include "aaren/transformer.hpp"

namespace aaren {

struct BenchConfig {
  std::size_t d_model = 4;
  std::size_t n_heads = 2;
  std::size_t n_layers = 2;
  std::size_t max_tokens = 1024;
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;

  // Both models are built from this: attention sublayers with residuals,
  // no MLP or layer norm.
  AarenConfig model_config() const {
    AarenConfig c;
    c.d_model = d_model;
    c.n_heads = n_heads;
    c.n_layers = n_layers;
    return c;
  }

  void validate() const {
    require(d_model > 0 && n_heads > 0 && n_layers > 0, Errc::invalid_config, "bench sizes must be positive");
    require(max_tokens >= 64, Errc::invalid_config, "max_tokens must be at least 64");
    model_config().validate();
  }
};

enum class BenchModel { aaren, transformer_kv };

inline const char* bench_model_name(BenchModel m) { return m == BenchModel::aaren ? "aaren" : "transformer_kv"; }

struct BenchRecord {
  BenchModel model = BenchModel::aaren;
  std::uint64_t t = 0;
  std::uint64_t state_scalars = 0;
  std::uint64_t madds_step = 0;
  std::uint64_t madds_cumulative = 0;
  std::uint64_t wall_ns_step = 0;
  std::uint64_t wall_ns_cumulative = 0;

  // Wall-clock fields are not part of equality.
  bool same_counters(const BenchRecord& o) const noexcept {
    return model == o.model && t == o.t && state_scalars == o.state_scalars && madds_step == o.madds_step &&
           madds_cumulative == o.madds_cumulative;
  }
  friend bool operator==(const BenchRecord&, const BenchRecord&) = default;
};

namespace detail {

template <class Step, class Scalars>
void bench_model(BenchModel model, const std::vector<std::vector<double>>& stream, Step&& step, Scalars&& scalars,
                 std::vector<BenchRecord>& out) {
  using clock = std::chrono::steady_clock;
  std::uint64_t madds_total = 0;
  std::uint64_t wall_total = 0;
  for (std::size_t t = 0; t < stream.size(); ++t) {
    OpCounter counter;
    const auto start = clock::now();
    {
      CountingScope scope(counter);
      step(stream[t]);
    }
    const auto ns = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(clock::now() - start).count());
    madds_total += counter.madds;
    wall_total += ns;
    out.push_back({model, t + 1, scalars(), counter.madds, madds_total, ns, wall_total});
  }
}

template <class T>
std::vector<BenchRecord> run_streaming_bench_as(const BenchConfig& config) {
  const AarenConfig mc = config.model_config();
  const SeededRng root(config.seed);

  SeededRng token_rng = root.fork(0);
  std::vector<std::vector<double>> stream(config.max_tokens);
  for (auto& x : stream) {
    x.resize(config.d_model);
    for (double& v : x) v = token_rng.normal();
  }
  const auto to_vec = [](const std::vector<double>& x) {
    return Vec<T>(std::vector<T>(x.begin(), x.end()));
  };

  std::vector<BenchRecord> records;
  records.reserve(2 * config.max_tokens);

  const auto aaren = init_aaren<T>(mc, root.fork(1));
  auto state = AarenState<T>::fresh(mc);
  bench_model(
      BenchModel::aaren, stream, [&](const std::vector<double>& x) { model_step(aaren, state, to_vec(x)); },
      [&] { return std::uint64_t(state.scalar_count()); }, records);

  const auto transformer = init_transformer<T>(mc, root.fork(2));
  auto cache = KvCache<T>::fresh(mc);
  bench_model(
      BenchModel::transformer_kv, stream,
      [&](const std::vector<double>& x) { kv_cache_step(transformer, cache, to_vec(x)); },
      [&] { return std::uint64_t(cache.scalar_count()); }, records);
  return records;
}

}  // namespace detail

// Aaren records for t = 1..max_tokens, then the transformer's.
inline std::vector<BenchRecord> run_streaming_bench(const BenchConfig& config) {
  config.validate();
  return config.precision == Precision::f32 ? detail::run_streaming_bench_as<float>(config)
                                            : detail::run_streaming_bench_as<double>(config);
}

inline std::vector<BenchRecord> records_for(const std::vector<BenchRecord>& records, BenchModel model) {
  std::vector<BenchRecord> out;
  for (const auto& r : records) {
    if (r.model == model) out.push_back(r);
  }
  return out;
}

// madds_cumulative at 2N over that at N. Records must cover t = 2N.
inline double cumulative_ratio(const std::vector<BenchRecord>& model_records, std::uint64_t n) {
  std::uint64_t at_n = 0, at_2n = 0;
  for (const auto& r : model_records) {
    if (r.t == n) at_n = r.madds_cumulative;
    if (r.t == 2 * n) at_2n = r.madds_cumulative;
  }
  require(at_n > 0 && at_2n > 0, Errc::invalid_config, "ratio requested outside the recorded range");
  return double(at_2n) / double(at_n);
}

// ---------------------------------------------------------------------------
// CSV

inline constexpr std::string_view kBenchCsvHeader =
    "model,t,state_scalars,madds_step,madds_cumulative,wall_ns_step,wall_ns_cumulative";

inline void write_csv(const std::vector<BenchRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out << kBenchCsvHeader << '\n';
  for (const auto& r : records) {
    out << bench_model_name(r.model) << ',' << r.t << ',' << r.state_scalars << ',' << r.madds_step << ','
        << r.madds_cumulative << ',' << r.wall_ns_step << ',' << r.wall_ns_cumulative << '\n';
  }
  out.flush();
  if (!out) fail(Errc::io_error, "write failed for '" + path + "'");
}

namespace detail {

inline std::uint64_t parse_u64_field(std::string_view field) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    fail(Errc::io_error, "malformed CSV field '" + std::string(field) + "'");
  }
  return v;
}

}  // namespace detail

inline std::vector<BenchRecord> read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open '" + path + "'");
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == kBenchCsvHeader, Errc::io_error,
          "unexpected CSV header");
  std::vector<BenchRecord> records;
  while (std::getline(in, line)) {
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1)) {
      fields.push_back(rest.substr(0, pos));
    }
    fields.push_back(rest);
    require(fields.size() == 7, Errc::io_error, "CSV row must have 7 fields");
    BenchRecord r;
    if (fields[0] == "aaren") {
      r.model = BenchModel::aaren;
    } else if (fields[0] == "transformer_kv") {
      r.model = BenchModel::transformer_kv;
    } else {
      fail(Errc::io_error, "unknown model '" + std::string(fields[0]) + "'");
    }
    r.t = detail::parse_u64_field(fields[1]);
    r.state_scalars = detail::parse_u64_field(fields[2]);
    r.madds_step = detail::parse_u64_field(fields[3]);
    r.madds_cumulative = detail::parse_u64_field(fields[4]);
    r.wall_ns_step = detail::parse_u64_field(fields[5]);
    r.wall_ns_cumulative = detail::parse_u64_field(fields[6]);
    records.push_back(r);
  }
  return records;
}

}  // namespace aaren
