#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "switchhead/errors.hpp"

namespace switchhead::tasks {

// Raw bytes with a train/valid split; the vocabulary is the set of observed
// bytes, mapped to dense ids in byte order.
struct CharCorpus {
  std::string bytes;
  std::size_t train_end = 0;
  std::vector<unsigned char> vocab;
  std::array<std::int32_t, 256> id_of{};

  static CharCorpus from_text(std::string text, double valid_fraction = 0.1) {
    if (text.size() < 2) throw ContractError("corpus: need at least two bytes");
    if (valid_fraction < 0.0 || valid_fraction >= 1.0) throw ContractError("corpus: valid fraction in [0, 1)");
    CharCorpus c;
    c.bytes = std::move(text);
    c.train_end = c.bytes.size() - static_cast<std::size_t>(static_cast<double>(c.bytes.size()) * valid_fraction);
    std::array<bool, 256> seen{};
    for (unsigned char b : c.bytes) seen[b] = true;
    c.id_of.fill(-1);
    for (std::size_t b = 0; b < 256; ++b) {
      if (!seen[b]) continue;
      c.id_of[b] = static_cast<std::int32_t>(c.vocab.size());
      c.vocab.push_back(static_cast<unsigned char>(b));
    }
    return c;
  }

  static CharCorpus from_file(const std::string& path, double valid_fraction = 0.1) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open corpus '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return from_text(ss.str(), valid_fraction);
  }

  std::size_t vocab_size() const { return vocab.size(); }

  std::vector<std::size_t> ids(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> out;
    out.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) out.push_back(static_cast<std::size_t>(id_of[static_cast<unsigned char>(bytes[i])]));
    return out;
  }
  std::vector<std::size_t> train_ids() const { return ids(0, train_end); }
  std::vector<std::size_t> valid_ids() const { return ids(train_end, bytes.size()); }
};

// Splits a token stream into `streams` contiguous parallel streams and
// yields consecutive T-token chunks of each, with next-token targets.
class ChunkStreamer {
 public:
  ChunkStreamer(const std::vector<std::size_t>& ids, std::size_t streams, std::size_t T)
      : ids_(ids), streams_(streams), T_(T) {
    if (streams == 0 || T == 0) throw ContractError("streamer: streams and T must be positive");
    stream_len_ = (ids.size() - 1) / streams;
    if (stream_len_ < T) throw ContractError("streamer: sequence too short for " + std::to_string(streams) +
                                             " streams of chunk " + std::to_string(T));
  }

  std::size_t chunks_per_epoch() const { return stream_len_ / T_; }

  // Fills tokens/targets (row b*T + t); returns true when this chunk starts a
  // new pass, i.e. caches must be dropped.
  bool next(std::vector<std::size_t>& tokens, std::vector<std::size_t>& targets) {
    bool restart = false;
    if (pos_ + T_ > chunks_per_epoch() * T_) {
      pos_ = 0;
      restart = true;
    }
    if (pos_ == 0) restart = true;
    tokens.resize(streams_ * T_);
    targets.resize(streams_ * T_);
    for (std::size_t b = 0; b < streams_; ++b)
      for (std::size_t t = 0; t < T_; ++t) {
        const std::size_t i = b * stream_len_ + pos_ + t;
        tokens[b * T_ + t] = ids_[i];
        targets[b * T_ + t] = ids_[i + 1];
      }
    pos_ += T_;
    return restart;
  }

 private:
  const std::vector<std::size_t>& ids_;
  std::size_t streams_, T_;
  std::size_t stream_len_ = 0;
  std::size_t pos_ = 0;
};

}  // namespace switchhead::tasks
