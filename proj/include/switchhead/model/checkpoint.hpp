#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "switchhead/errors.hpp"
#include "switchhead/model/config_io.hpp"
#include "switchhead/model/transformer.hpp"

namespace switchhead::model {

// Layout:
//   switchhead-checkpoint v1\n
//   spec <n_bytes>\n<spec text>
//   tensors <count>\n
//   <name> <rank> <dim>... <offset>\n      (offset in doubles into the data block)
//   data <n_doubles>\n
//   <n_doubles little-endian IEEE-754 binary64>
inline constexpr const char* kCheckpointMagic = "switchhead-checkpoint v1";

namespace detail {

inline void put_le(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

inline double get_le(std::istream& is) {
  std::uint64_t bits;
  is.read(reinterpret_cast<char*>(&bits), sizeof bits);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  const std::string spec = config::write_model_spec(m.spec);
  const auto named = m.named();
  os << kCheckpointMagic << "\n" << "spec " << spec.size() << "\n" << spec;
  os << "tensors " << named.size() << "\n";
  std::size_t offset = 0;
  for (const auto& [name, t] : named) {
    os << name << ' ' << t.rank();
    for (std::size_t d : t.shape()) os << ' ' << d;
    os << ' ' << offset << "\n";
    offset += t.numel();
  }
  os << "data " << offset << "\n";
  for (const auto& [name, t] : named)
    for (double v : t.values()) detail::put_le(os, v);
  if (!os) throw std::runtime_error("write failed for checkpoint '" + path + "'");
}

// Rebuilds the model from the embedded spec, then overwrites every tensor.
inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  auto bad = [&](const std::string& why) { return std::runtime_error("checkpoint '" + path + "': " + why); };
  std::string line;
  std::getline(is, line);
  if (line != kCheckpointMagic) throw bad("not a v1 checkpoint");
  std::string word;
  std::size_t n = 0;
  is >> word >> n;
  if (word != "spec") throw bad("missing spec block");
  is.get();
  std::string spec_text(n, '\0');
  is.read(spec_text.data(), static_cast<std::streamsize>(n));
  Model m = build(config::read_model_spec(config::Document::parse(spec_text, path + "#spec")), 0);
  std::size_t count = 0;
  is >> word >> count;
  if (word != "tensors") throw bad("missing tensor index");
  auto named = m.named();
  if (count != named.size()) throw bad("tensor count does not match spec");
  std::vector<std::size_t> offsets(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t rank = 0;
    is >> word >> rank;
    Shape shape(rank);
    for (auto& d : shape) is >> d;
    is >> offsets[i];
    if (!is || word != named[i].first || shape != named[i].second.shape()) {
      throw bad("index entry " + std::to_string(i) + " ('" + word + "') does not match the model");
    }
  }
  std::size_t total = 0;
  is >> word >> total;
  if (word != "data") throw bad("missing data block");
  is.get();
  for (std::size_t i = 0; i < count; ++i) {
    auto v = named[i].second.mutable_values();
    for (double& x : v) x = detail::get_le(is);
  }
  if (!is) throw bad("truncated data block");
  return m;
}

}  // namespace switchhead::model
