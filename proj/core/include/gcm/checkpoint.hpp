#pragma once

#include <filesystem>
#include <iosfwd>

#include "gcm/model.hpp"

namespace gcm {

// Binary checkpoint: "GCM1", seven little-endian uint32 config fields
// (n_layers, n_heads, d_model, d_head, d_mlp, vocab_size, max_seq_len), then
// every parameter block in ParamLayout order as little-endian float32,
// row-major. See docs/checkpoint_format.md.
void write_checkpoint(const ModelParams& params, std::ostream& out);
ModelParams read_checkpoint(std::istream& in);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace gcm
