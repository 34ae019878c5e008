#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "gcm/checkpoint.hpp"
#include "gcm/data.hpp"
#include "gcm/model.hpp"
#include "reference_model.hpp"

namespace testutil {

inline gcm::ModelConfig tiny_config() {
  gcm::ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_head = 8;
  cfg.d_mlp = 32;
  return cfg;
}

inline gcm::ModelParams tiny_params(std::uint64_t seed = 3, float stddev = 0.3f) {
  return gcm::ModelParams::random_init(tiny_config(), seed, stddev);
}

// Same weights, widened to double by the oracle's own checkpoint reader.
inline ref::Model to_ref(const gcm::ModelParams& params) {
  std::ostringstream out(std::ios::binary);
  gcm::write_checkpoint(params, out);
  return ref::from_bytes(out.str());
}

inline ref::Pair to_ref(const gcm::ContrastivePair& p) { return {p.p_orig, p.r_orig, p.p_contrast, p.r_contrast}; }

inline std::vector<int> concat(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// Upstream gradient of log p(response | prompt) with respect to the logits of
// a forward over prompt ++ response[:-1].
inline gcm::Tensor2D logprob_dlogits(const gcm::Trace& trace, std::size_t prompt_len, const std::vector<int>& response) {
  gcm::Tensor2D d(trace.logits.rows(), trace.logits.cols());
  for (std::size_t i = 0; i < response.size(); ++i) {
    const std::size_t row = prompt_len - 1 + i;
    const auto g = gcm::softmax_cross_entropy_backward(trace.logits.row(row), static_cast<std::size_t>(response[i]));
    for (std::size_t v = 0; v < g.size(); ++v) d(row, v) = -g[v];
  }
  return d;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testutil
