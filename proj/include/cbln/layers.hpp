#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "cbln/params.hpp"
#include "cbln/tensor.hpp"

namespace cbln {

// Training flag plus the generator that drives dropout masks.
struct ForwardMode {
  bool training = false;
  std::mt19937_64* rng = nullptr;

  [[nodiscard]] std::mt19937_64& generator() const {
    if (rng == nullptr) throw ContractError("training-mode forward needs a random generator");
    return *rng;
  }
};

// Independent stream for (seed, a, b, c); used to split one run seed into
// per-purpose generators without sequential coupling.
inline std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a),    static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b),    static_cast<std::uint32_t>(b >> 32),
                    static_cast<std::uint32_t>(c),    static_cast<std::uint32_t>(c >> 32)};
  return std::mt19937_64(seq);
}

inline void add_linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                       std::mt19937_64& rng) {
  store.add_weight(prefix + ".W", in, out, rng);
  store.add_constant(prefix + ".b", 1, out, 0.0);
}

// x * W + b with the parameters registered by add_linear.
inline Tensor linear(const Tensor& x, ParamBinder& params, const std::string& prefix) {
  return matmul(x, params(prefix + ".W")) + params(prefix + ".b");
}

}  // namespace cbln
