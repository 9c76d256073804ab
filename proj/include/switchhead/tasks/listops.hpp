#pragma once

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "switchhead/errors.hpp"
#include "switchhead/numerics/rng.hpp"

namespace switchhead::tasks {

// Token ids: 0 pad, 1..10 digits 0..9, then operators and brackets.
namespace listops_vocab {
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kDigit0 = 1;
inline constexpr std::size_t kMax = 11;
inline constexpr std::size_t kMin = 12;
inline constexpr std::size_t kMed = 13;
inline constexpr std::size_t kSm = 14;
inline constexpr std::size_t kOpen = 15;
inline constexpr std::size_t kClose = 16;
inline constexpr std::size_t kSize = 17;
inline constexpr std::size_t kClasses = 10;
}  // namespace listops_vocab

struct ListOpsExample {
  std::vector<std::size_t> tokens;
  std::size_t label = 0;
  std::size_t depth = 0;
  std::size_t length() const { return tokens.size(); }
};

struct ListOpsParams {
  std::size_t max_depth = 4;
  std::size_t max_args = 5;  // arity is uniform in [2, max_args]
  std::size_t max_len = 64;
  double leaf_prob = 0.3;  // chance an argument below the root is a digit

  void validate() const {
    if (max_depth < 1) throw ContractError("listops: max_depth must be >= 1");
    if (max_args < 2) throw ContractError("listops: max_args must be >= 2");
    if (max_len < 5) throw ContractError("listops: max_len must be >= 5 (shortest expression)");
    if (leaf_prob < 0.0 || leaf_prob > 1.0) throw ContractError("listops: leaf_prob must be in [0, 1]");
  }
};

inline std::string token_text(std::size_t id) {
  using namespace listops_vocab;
  if (id >= kDigit0 && id < kDigit0 + 10) return std::string(1, static_cast<char>('0' + (id - kDigit0)));
  switch (id) {
    case kMax: return "MAX";
    case kMin: return "MIN";
    case kMed: return "MED";
    case kSm: return "SM";
    case kOpen: return "(";
    case kClose: return ")";
    case kPad: return "_";
  }
  throw ContractError("listops: unknown token id " + std::to_string(id));
}

// "(MAX 2 (MIN 3 4))" -> ids. Brackets need no surrounding spaces.
inline std::vector<std::size_t> tokenize_listops(const std::string& text) {
  using namespace listops_vocab;
  std::vector<std::size_t> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == ' ' || c == '\t') {
      ++i;
    } else if (c == '(' || c == '[') {
      out.push_back(kOpen);
      ++i;
    } else if (c == ')' || c == ']') {
      out.push_back(kClose);
      ++i;
    } else if (c >= '0' && c <= '9') {
      out.push_back(kDigit0 + static_cast<std::size_t>(c - '0'));
      ++i;
    } else {
      std::size_t j = i;
      while (j < text.size() && std::isalpha(static_cast<unsigned char>(text[j]))) ++j;
      const std::string w = text.substr(i, j - i);
      if (w == "MAX") out.push_back(kMax);
      else if (w == "MIN") out.push_back(kMin);
      else if (w == "MED") out.push_back(kMed);
      else if (w == "SM") out.push_back(kSm);
      else throw ContractError("listops: unknown token '" + text.substr(i, std::max<std::size_t>(1, j - i)) + "'");
      i = j;
    }
  }
  return out;
}

inline std::string listops_text(const std::vector<std::size_t>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) s += (i ? " " : "") + token_text(tokens[i]);
  return s;
}

namespace detail {

inline std::size_t apply_op(std::size_t op, std::vector<std::size_t> args) {
  using namespace listops_vocab;
  if (args.empty()) throw ContractError("listops: operator without arguments");
  switch (op) {
    case kMax: return *std::max_element(args.begin(), args.end());
    case kMin: return *std::min_element(args.begin(), args.end());
    case kMed:
      std::sort(args.begin(), args.end());
      return args[(args.size() - 1) / 2];  // lower median
    case kSm: {
      std::size_t s = 0;
      for (std::size_t a : args) s += a;
      return s % 10;
    }
  }
  throw ContractError("listops: expected an operator after '('");
}

inline std::size_t eval_at(const std::vector<std::size_t>& t, std::size_t& pos) {
  using namespace listops_vocab;
  if (pos >= t.size()) throw ContractError("listops: unexpected end of expression");
  const std::size_t tok = t[pos++];
  if (tok >= kDigit0 && tok < kDigit0 + 10) return tok - kDigit0;
  if (tok != kOpen) throw ContractError("listops: unexpected token '" + token_text(tok) + "'");
  if (pos >= t.size()) throw ContractError("listops: unexpected end after '('");
  const std::size_t op = t[pos++];
  std::vector<std::size_t> args;
  while (pos < t.size() && t[pos] != kClose) args.push_back(eval_at(t, pos));
  if (pos >= t.size()) throw ContractError("listops: unbalanced brackets");
  ++pos;
  return apply_op(op, std::move(args));
}

}  // namespace detail

// Value of a well-formed expression; malformed input -> ContractError.
inline std::size_t eval_listops(const std::vector<std::size_t>& tokens) {
  std::size_t pos = 0;
  const std::size_t v = detail::eval_at(tokens, pos);
  if (pos != tokens.size()) throw ContractError("listops: trailing tokens after expression");
  return v;
}

namespace detail {

inline std::size_t gen_expr(Rng& rng, const ListOpsParams& p, std::size_t depth, bool root,
                            std::vector<std::size_t>& out) {
  using namespace listops_vocab;
  if (!root && (depth >= p.max_depth || rng.bernoulli(p.leaf_prob))) {
    out.push_back(kDigit0 + rng.below(10));
    return depth - 1;
  }
  static constexpr std::size_t ops[] = {kMax, kMin, kMed, kSm};
  out.push_back(kOpen);
  out.push_back(ops[rng.below(4)]);
  const std::size_t arity = 2 + rng.below(p.max_args - 1);
  std::size_t deepest = depth;
  for (std::size_t a = 0; a < arity; ++a) deepest = std::max(deepest, gen_expr(rng, p, depth + 1, false, out));
  out.push_back(kClose);
  return deepest;
}

}  // namespace detail

// Rejection sampling on length: expressions over max_len tokens are redrawn.
inline std::vector<ListOpsExample> gen_listops(std::size_t n, const ListOpsParams& p, std::uint64_t seed) {
  p.validate();
  Rng rng(seed);
  std::vector<ListOpsExample> out;
  out.reserve(n);
  while (out.size() < n) {
    ListOpsExample ex;
    ex.depth = detail::gen_expr(rng, p, 1, true, ex.tokens);
    if (ex.tokens.size() > p.max_len) continue;
    ex.label = eval_listops(ex.tokens);
    out.push_back(std::move(ex));
  }
  return out;
}

// One example per line: "<label>\t<space-separated tokens>".
inline void save_listops(const std::vector<ListOpsExample>& data, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write dataset '" + path + "'");
  for (const auto& ex : data) os << ex.label << '\t' << listops_text(ex.tokens) << '\n';
}

inline std::vector<ListOpsExample> load_listops(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open dataset '" + path + "'");
  std::vector<ListOpsExample> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ConfigError(path + ":" + std::to_string(n) + ": missing tab");
    ListOpsExample ex;
    ex.tokens = tokenize_listops(line.substr(tab + 1));
    ex.label = eval_listops(ex.tokens);
    if (std::to_string(ex.label) != line.substr(0, tab)) {
      throw ConfigError(path + ":" + std::to_string(n) + ": stored label disagrees with the evaluator");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace switchhead::tasks
