#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "aaren/bench.hpp"

namespace aaren {
namespace {

BenchConfig small_bench() {
  BenchConfig c;
  c.d_model = 4;
  c.n_heads = 2;
  c.n_layers = 2;
  c.max_tokens = 256;
  c.seed = 11;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TEST(Bench, RejectsShortStreams) {
  auto c = small_bench();
  c.max_tokens = 63;
  EXPECT_THROW(run_streaming_bench(c), Error);
  c.max_tokens = 64;
  c.n_heads = 3;
  EXPECT_THROW(run_streaming_bench(c), Error);
}

TEST(Bench, AarenStateIsConstant) {
  const auto c = small_bench();
  const auto aaren = records_for(run_streaming_bench(c), BenchModel::aaren);
  ASSERT_EQ(aaren.size(), c.max_tokens);
  // (d_head + 2) per head per layer
  const std::uint64_t expected = c.n_layers * c.n_heads * (c.d_model / c.n_heads + 2);
  EXPECT_EQ(aaren.front().state_scalars, expected);
  EXPECT_EQ(aaren.back().state_scalars, expected);
  for (const auto& r : aaren) EXPECT_EQ(r.madds_step, aaren.front().madds_step);
}

TEST(Bench, KvCacheGrowsByExactCount) {
  const auto c = small_bench();
  const auto kv = records_for(run_streaming_bench(c), BenchModel::transformer_kv);
  ASSERT_EQ(kv.size(), c.max_tokens);
  const std::uint64_t dh = c.d_model / c.n_heads;
  for (const auto& r : kv) EXPECT_EQ(r.state_scalars, r.t * c.n_layers * c.n_heads * 2 * dh);
}

TEST(Bench, CumulativeFieldsAreRunningSums) {
  const auto records = run_streaming_bench(small_bench());
  std::uint64_t madds = 0, wall = 0;
  BenchModel current = records.front().model;
  for (const auto& r : records) {
    if (r.model != current) {
      madds = wall = 0;
      current = r.model;
    }
    madds += r.madds_step;
    wall += r.wall_ns_step;
    EXPECT_EQ(r.madds_cumulative, madds);
    EXPECT_EQ(r.wall_ns_cumulative, wall);
  }
}

TEST(Bench, CumulativeCostRatios) {
  const auto records = run_streaming_bench(small_bench());
  const auto aaren = records_for(records, BenchModel::aaren);
  const auto kv = records_for(records, BenchModel::transformer_kv);
  EXPECT_DOUBLE_EQ(cumulative_ratio(aaren, 128), 2.0);
  const double kv_ratio = cumulative_ratio(kv, 128);
  EXPECT_GE(kv_ratio, 3.6);
  EXPECT_LE(kv_ratio, 4.4);
  EXPECT_THROW(cumulative_ratio(aaren, 200), Error);
}

TEST(Bench, CountersAreDeterministic) {
  const auto a = run_streaming_bench(small_bench());
  const auto b = run_streaming_bench(small_bench());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].same_counters(b[i])) << i;
}

TEST(Bench, SinglePrecisionCountsMatchDouble) {
  auto c = small_bench();
  const auto d = run_streaming_bench(c);
  c.precision = Precision::f32;
  const auto f = run_streaming_bench(c);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_TRUE(d[i].same_counters(f[i]));
}

TEST(Bench, KvOvertakesAarenByTheEnd) {
  const auto c = small_bench();
  const auto records = run_streaming_bench(c);
  EXPECT_GT(records_for(records, BenchModel::transformer_kv).back().state_scalars,
            records_for(records, BenchModel::aaren).back().state_scalars);
}

TEST(BenchCsv, EmptyRecordsWriteHeaderOnly) {
  const auto path = temp_path("aaren_bench_empty.csv");
  write_csv({}, path);
  std::ifstream in(path, std::ios::binary);
  const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(content, "model,t,state_scalars,madds_step,madds_cumulative,wall_ns_step,wall_ns_cumulative\n");
  EXPECT_TRUE(read_csv(path).empty());
  std::filesystem::remove(path);
}

TEST(BenchCsv, RoundTripAndRowCount) {
  auto c = small_bench();
  c.max_tokens = 64;
  const auto records = run_streaming_bench(c);
  const auto path = temp_path("aaren_bench_rt.csv");
  write_csv(records, path);
  EXPECT_EQ(read_csv(path), records);

  std::ifstream in(path, std::ios::binary);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    EXPECT_FALSE(line.empty());
    EXPECT_NE(line.back(), ',');
    EXPECT_NE(line.back(), '\r');
  }
  EXPECT_EQ(lines, 2 * c.max_tokens + 1);
  std::filesystem::remove(path);
}

TEST(BenchCsv, UnwritablePathIsIoError) {
  try {
    write_csv({}, "/nonexistent/dir/out.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::io_error);
  }
}

TEST(BenchCsv, MalformedRowIsIoError) {
  const auto path = temp_path("aaren_bench_bad.csv");
  {
    std::ofstream out(path);
    out << kBenchCsvHeader << "\naaren,1,2,3\n";
  }
  EXPECT_THROW(read_csv(path), Error);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace aaren
