#pragma once

// Versioned little-endian binary layout for parameters and streaming state.
//
//   offset  size  field
//   0       4     magic "AARN"
//   4       4     u32 format version (1)
//   8       4     u32 payload kind (PayloadKind)
//   12      4     u32 precision (0 = f32, 1 = f64)
//   16      4     u32 d_model
//   20      4     u32 n_heads
//   24      4     u32 n_layers
//   28      4     u32 ffn_mult
//   32      4     u32 flags: bit0 use_ffn, bit1 use_layernorm,
//                        bit2 scaled_scores, bit3 use_residual
//   36      8     u64 tokens: tokens seen (Aaren state), cache length (KV
//                     cache), 0 for parameters
//   44      8     u64 scalar count
//   52      ...   scalars, IEEE-754 little-endian, 4 or 8 bytes each
//
// Parameter payloads follow visit_params order. Aaren state payloads are
// (a[0..d_head), c, m) per head, heads inner, layers outer. KV cache payloads
// are keys then values per head, heads inner, layers outer.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "aaren/aaren.hpp"
#include "aaren/error.hpp"
#include "aaren/layers.hpp"
#include "aaren/numeric.hpp"
#include "aaren/transformer.hpp"

namespace aaren {

enum class PayloadKind : std::uint32_t {
  aaren_model = 1,
  transformer_model = 2,
  aaren_state = 3,
  kv_cache = 4,
};

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderBytes = 52;

struct PayloadHeader {
  PayloadKind kind = PayloadKind::aaren_model;
  Precision precision = Precision::f64;
  AarenConfig config;
  std::uint64_t tokens = 0;
  std::uint64_t scalar_count = 0;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <class T>
void put_scalar(std::vector<std::uint8_t>& out, T x) {
  if constexpr (sizeof(T) == 4) {
    put_u32(out, std::bit_cast<std::uint32_t>(x));
  } else {
    put_u64(out, std::bit_cast<std::uint64_t>(x));
  }
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(take(4)); }
  std::uint64_t u64() { return take(8); }

  template <class T>
  T scalar() {
    if constexpr (sizeof(T) == 4) {
      return std::bit_cast<T>(u32());
    } else {
      return std::bit_cast<T>(u64());
    }
  }

  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  std::uint64_t take(std::size_t n) {
    require(pos_ + n <= bytes_.size(), Errc::io_error, "payload truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= std::uint64_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += n;
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t config_flags(const AarenConfig& c) {
  return (c.use_ffn ? 1u : 0u) | (c.use_layernorm ? 2u : 0u) | (c.scaled_scores ? 4u : 0u) |
         (c.use_residual ? 8u : 0u);
}

inline void put_header(std::vector<std::uint8_t>& out, const PayloadHeader& h) {
  out.insert(out.end(), {'A', 'A', 'R', 'N'});
  put_u32(out, kFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(h.kind));
  put_u32(out, static_cast<std::uint32_t>(h.precision));
  put_u32(out, static_cast<std::uint32_t>(h.config.d_model));
  put_u32(out, static_cast<std::uint32_t>(h.config.n_heads));
  put_u32(out, static_cast<std::uint32_t>(h.config.n_layers));
  put_u32(out, static_cast<std::uint32_t>(h.config.ffn_mult));
  put_u32(out, config_flags(h.config));
  put_u64(out, h.tokens);
  put_u64(out, h.scalar_count);
}

template <class T>
void check_precision(const PayloadHeader& h) {
  require(h.precision == precision_of<T>(), Errc::invalid_config, "payload precision differs from requested type");
}

inline void check_kind(const PayloadHeader& h, PayloadKind kind) {
  require(h.kind == kind, Errc::invalid_config, "unexpected payload kind");
}

}  // namespace detail

inline PayloadHeader read_header(detail::Reader& r) {
  const std::uint32_t magic = r.u32();
  require(magic == 0x4E524141u, Errc::io_error, "bad magic (expected AARN)");
  require(r.u32() == kFormatVersion, Errc::io_error, "unsupported format version");
  PayloadHeader h;
  const std::uint32_t kind = r.u32();
  require(kind >= 1 && kind <= 4, Errc::io_error, "unknown payload kind");
  h.kind = static_cast<PayloadKind>(kind);
  const std::uint32_t precision = r.u32();
  require(precision <= 1, Errc::io_error, "unknown precision tag");
  h.precision = static_cast<Precision>(precision);
  h.config.d_model = r.u32();
  h.config.n_heads = r.u32();
  h.config.n_layers = r.u32();
  h.config.ffn_mult = r.u32();
  const std::uint32_t flags = r.u32();
  h.config.use_ffn = flags & 1u;
  h.config.use_layernorm = flags & 2u;
  h.config.scaled_scores = flags & 4u;
  h.config.use_residual = flags & 8u;
  h.tokens = r.u64();
  h.scalar_count = r.u64();
  h.config.validate();
  return h;
}

inline PayloadHeader peek_header(std::span<const std::uint8_t> bytes) {
  detail::Reader r(bytes);
  return read_header(r);
}

// ---------------------------------------------------------------------------

template <class Model>
std::vector<std::uint8_t> encode_model(const Model& model) {
  using T = std::remove_cvref_t<decltype(model.layers.front().w_k.flat()[0])>;
  constexpr bool is_aaren = requires { model.layers.front().query; };
  PayloadHeader h{is_aaren ? PayloadKind::aaren_model : PayloadKind::transformer_model, precision_of<T>(),
                  model.config, 0, flat_size(model)};
  std::vector<std::uint8_t> out;
  detail::put_header(out, h);
  visit_params(model, [&](const std::string&, auto span) {
    for (const auto& x : span) detail::put_scalar<T>(out, x);
  });
  return out;
}

template <class T>
AarenModel<T> decode_aaren_model(std::span<const std::uint8_t> bytes) {
  detail::Reader r(bytes);
  const auto h = read_header(r);
  detail::check_kind(h, PayloadKind::aaren_model);
  detail::check_precision<T>(h);
  auto model = init_aaren<T>(h.config, SeededRng(0));
  require(h.scalar_count == flat_size(model), Errc::io_error, "scalar count does not match config");
  visit_params(model, [&](const std::string&, auto span) {
    for (auto& x : span) x = r.template scalar<T>();
  });
  require(r.done(), Errc::io_error, "trailing bytes after payload");
  return model;
}

template <class T>
TransformerModel<T> decode_transformer_model(std::span<const std::uint8_t> bytes) {
  detail::Reader r(bytes);
  const auto h = read_header(r);
  detail::check_kind(h, PayloadKind::transformer_model);
  detail::check_precision<T>(h);
  auto model = init_transformer<T>(h.config, SeededRng(0));
  require(h.scalar_count == flat_size(model), Errc::io_error, "scalar count does not match config");
  visit_params(model, [&](const std::string&, auto span) {
    for (auto& x : span) x = r.template scalar<T>();
  });
  require(r.done(), Errc::io_error, "trailing bytes after payload");
  return model;
}

template <class T>
std::vector<std::uint8_t> encode_state(const AarenConfig& config, const AarenState<T>& state) {
  PayloadHeader h{PayloadKind::aaren_state, precision_of<T>(), config, state.tokens_seen, state.scalar_count()};
  std::vector<std::uint8_t> out;
  detail::put_header(out, h);
  for (const auto& layer : state.layers) {
    for (const auto& head : layer) {
      for (T x : head.a) detail::put_scalar<T>(out, x);
      detail::put_scalar<T>(out, head.c);
      detail::put_scalar<T>(out, head.m);
    }
  }
  return out;
}

template <class T>
AarenState<T> decode_state(std::span<const std::uint8_t> bytes, AarenConfig* config_out = nullptr) {
  detail::Reader r(bytes);
  const auto h = read_header(r);
  detail::check_kind(h, PayloadKind::aaren_state);
  detail::check_precision<T>(h);
  auto state = AarenState<T>::fresh(h.config);
  require(h.scalar_count == state.scalar_count(), Errc::io_error, "scalar count does not match config");
  for (auto& layer : state.layers) {
    for (auto& head : layer) {
      for (T& x : head.a) x = r.template scalar<T>();
      head.c = r.template scalar<T>();
      head.m = r.template scalar<T>();
    }
  }
  require(r.done(), Errc::io_error, "trailing bytes after payload");
  state.tokens_seen = h.tokens;
  if (config_out) *config_out = h.config;
  return state;
}

template <class T>
std::vector<std::uint8_t> encode_cache(const TransformerConfig& config, const KvCache<T>& cache) {
  PayloadHeader h{PayloadKind::kv_cache, precision_of<T>(), config, cache.length(), cache.scalar_count()};
  std::vector<std::uint8_t> out;
  detail::put_header(out, h);
  for (const auto& layer : cache.layers) {
    for (const auto& head : layer) {
      for (T x : head.keys) detail::put_scalar<T>(out, x);
      for (T x : head.values) detail::put_scalar<T>(out, x);
    }
  }
  return out;
}

template <class T>
KvCache<T> decode_cache(std::span<const std::uint8_t> bytes) {
  detail::Reader r(bytes);
  const auto h = read_header(r);
  detail::check_kind(h, PayloadKind::kv_cache);
  detail::check_precision<T>(h);
  auto cache = KvCache<T>::fresh(h.config);
  const std::size_t per_head = static_cast<std::size_t>(h.tokens) * cache.d_head;
  require(h.scalar_count == 2 * per_head * h.config.n_layers * h.config.n_heads, Errc::io_error,
          "scalar count does not match cache length");
  for (auto& layer : cache.layers) {
    for (auto& head : layer) {
      head.keys.resize(per_head);
      head.values.resize(per_head);
      for (T& x : head.keys) x = r.template scalar<T>();
      for (T& x : head.values) x = r.template scalar<T>();
      head.length = static_cast<std::size_t>(h.tokens);
    }
  }
  require(r.done(), Errc::io_error, "trailing bytes after payload");
  return cache;
}

inline void write_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_error, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::io_error, "write failed for '" + path + "'");
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_error, "cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace aaren
