#pragma once

#include "pmt/container.hpp"
#include "pmt/rng.hpp"
#include "pmt/tensor.hpp"

#include <string>
#include <vector>

namespace pmt {

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

template <typename S>
using ParamList = std::vector<NamedParam<S>>;

template <typename S>
inline void fill_normal(Tensor<S>& t, Rng& rng, double sd) {
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(rng.normal() * sd);
}

/// FNV-1a over the raw value bytes of every parameter in list order; the
/// freeze-contract fingerprint.
template <typename S>
inline std::uint64_t param_checksum(const ParamList<S>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& np : params) {
    mix(reinterpret_cast<const unsigned char*>(np.name.data()), np.name.size());
    mix(reinterpret_cast<const unsigned char*>(np.tensor.data()),
        sizeof(S) * static_cast<std::size_t>(np.tensor.size()));
  }
  return h;
}

template <typename S>
inline void save_params(Container& c, const ParamList<S>& params) {
  for (const auto& np : params) c.put(np.name, np.tensor);
}

/// Loads values in place, validating that every parameter exists with the
/// exact recorded shape.
inline void load_params(const Container& c, ParamList<float>& params) {
  for (auto& np : params) {
    Tensor<float> stored = c.get_f32(np.name);
    if (stored.shape() != np.tensor.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + np.name + ": file has " +
                               shape_str(stored.shape()) + ", model expects " +
                               shape_str(np.tensor.shape()));
    np.tensor.value() = stored.value();
  }
}

inline void load_params(const Container& c, ParamList<double>& params) {
  for (auto& np : params) {
    Tensor<double> stored = c.get_f64(np.name);
    if (stored.shape() != np.tensor.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + np.name + ": file has " +
                               shape_str(stored.shape()) + ", model expects " +
                               shape_str(np.tensor.shape()));
    np.tensor.value() = stored.value();
  }
}

}  // namespace pmt
