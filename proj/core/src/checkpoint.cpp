#include "gcm/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "gcm/errors.hpp"

namespace gcm {

namespace {

constexpr std::array<char, 4> kMagic{'G', 'C', 'M', '1'};

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(sizeof(T) == 4);
  std::uint32_t bits;
  std::memcpy(&bits, &value, 4);
  const std::array<char, 4> b{static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                              static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
  out.write(b.data(), 4);
}

template <typename T>
T get_le(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw ParseError("checkpoint: truncated file");
  const std::uint32_t bits = std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
                             (std::uint32_t{b[3]} << 24);
  T value;
  std::memcpy(&value, &bits, 4);
  return value;
}

}  // namespace

void write_checkpoint(const ModelParams& params, std::ostream& out) {
  const ModelConfig& c = params.config();
  out.write(kMagic.data(), kMagic.size());
  for (std::uint32_t v : {c.n_layers, c.n_heads, c.d_model, c.d_head, c.d_mlp, c.vocab_size, c.max_seq_len}) {
    put_le(out, v);
  }
  for (float v : params.flat()) put_le(out, v);
  if (!out) throw Error("checkpoint: write failed");
}

ModelParams read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kMagic) throw ParseError("checkpoint: bad magic (expected GCM1)");
  ModelConfig c;
  c.n_layers = get_le<std::uint32_t>(in);
  c.n_heads = get_le<std::uint32_t>(in);
  c.d_model = get_le<std::uint32_t>(in);
  c.d_head = get_le<std::uint32_t>(in);
  c.d_mlp = get_le<std::uint32_t>(in);
  c.vocab_size = get_le<std::uint32_t>(in);
  c.max_seq_len = get_le<std::uint32_t>(in);
  try {
    c.validate();
  } catch (const InputError& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
  ModelParams params(c);
  for (auto& v : params.flat()) v = get_le<float>(in);
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError("checkpoint: trailing bytes");
  if (!params.all_finite()) throw ValidationError("checkpoint: non-finite weights");
  return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("checkpoint: cannot open " + path.string() + " for writing");
  write_checkpoint(params, out);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace gcm
