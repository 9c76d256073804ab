#pragma once

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "switchhead/errors.hpp"
#include "switchhead/model/spec.hpp"

namespace switchhead::config {

// Plain-text key-value files:
//
//   # comment
//   [section]
//   key = value
//
// Sections may repeat (e.g. one [cost] per table row). Values are scalars
// or bare strings; everything after the first '=' is the value.
struct Entry {
  std::string key, value;
  std::string where;  // "file:line" or "--set"
};

struct Section {
  std::string name;
  std::string where;
  std::vector<Entry> entries;

  const Entry* find(const std::string& key) const {
    for (auto it = entries.rbegin(); it != entries.rend(); ++it)
      if (it->key == key) return &*it;
    return nullptr;
  }
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Document {
  std::vector<Section> sections;

  static Document parse(const std::string& text, const std::string& source = "<config>") {
    Document d;
    std::istringstream in(text);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
      ++n;
      const std::string where = source + ":" + std::to_string(n);
      const auto hash = line.find('#');
      const std::string s = trim(hash == std::string::npos ? line : line.substr(0, hash));
      if (s.empty()) continue;
      if (s.front() == '[') {
        if (s.back() != ']' || s.size() < 3) throw ConfigError(where + ": malformed section header '" + s + "'");
        d.sections.push_back({trim(s.substr(1, s.size() - 2)), where, {}});
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + s + "'");
      if (d.sections.empty()) throw ConfigError(where + ": key outside of any [section]");
      const std::string key = trim(s.substr(0, eq));
      if (key.empty()) throw ConfigError(where + ": empty key");
      d.sections.back().entries.push_back({key, trim(s.substr(eq + 1)), where});
    }
    return d;
  }

  static Document load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path);
  }

  const Section* first(const std::string& name) const {
    for (const auto& s : sections)
      if (s.name == name) return &s;
    return nullptr;
  }

  std::vector<const Section*> all(const std::string& name) const {
    std::vector<const Section*> out;
    for (const auto& s : sections)
      if (s.name == name) out.push_back(&s);
    return out;
  }

  // Applies "section.key=value"; the value replaces the key in the first
  // section of that name (created when absent). Type checks happen when the
  // section is read.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ConfigError("--set " + assignment + ": expected section.key=value");
    }
    const std::string sec = trim(assignment.substr(0, dot));
    const std::string key = trim(assignment.substr(dot + 1, eq - dot - 1));
    if (sec.empty() || key.empty()) throw ConfigError("--set " + assignment + ": empty section or key");
    Section* target = nullptr;
    for (auto& s : sections)
      if (s.name == sec) {
        target = &s;
        break;
      }
    if (!target) {
      sections.push_back({sec, "--set", {}});
      target = &sections.back();
    }
    target->entries.push_back({key, trim(assignment.substr(eq + 1)), "--set " + assignment});
  }
};

// Typed access to one section; `finish` rejects keys nobody asked for.
class Reader {
 public:
  explicit Reader(const Section* s) : s_(s) {}

  bool has(const std::string& key) const { return s_ && s_->find(key); }

  std::size_t size(const std::string& key, std::size_t def) {
    const Entry* e = get(key);
    if (!e) return def;
    const std::string& v = e->value;
    if (v.empty() || !std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      fail(*e, "expected a non-negative integer");
    }
    errno = 0;
    const unsigned long long n = std::strtoull(v.c_str(), nullptr, 10);
    if (errno == ERANGE) fail(*e, "integer out of range");
    return static_cast<std::size_t>(n);
  }

  double real(const std::string& key, double def) {
    const Entry* e = get(key);
    if (!e) return def;
    char* end = nullptr;
    const double v = std::strtod(e->value.c_str(), &end);
    if (e->value.empty() || *end != '\0' || !std::isfinite(v)) fail(*e, "expected a finite real number");
    return v;
  }

  bool boolean(const std::string& key, bool def) {
    const Entry* e = get(key);
    if (!e) return def;
    if (e->value == "true") return true;
    if (e->value == "false") return false;
    fail(*e, "expected true or false");
  }

  std::string str(const std::string& key, const std::string& def) {
    const Entry* e = get(key);
    return e ? e->value : def;
  }

  // Value restricted to `choices`.
  std::string choice(const std::string& key, const std::string& def, const std::vector<std::string>& choices) {
    const Entry* e = get(key);
    if (!e) return def;
    if (std::find(choices.begin(), choices.end(), e->value) == choices.end()) {
      std::string list;
      for (const auto& c : choices) list += (list.empty() ? "" : "|") + c;
      fail(*e, "expected one of " + list);
    }
    return e->value;
  }

  void finish() const {
    if (!s_) return;
    for (const auto& e : s_->entries) {
      if (!used_.count(e.key)) {
        throw ConfigError(e.where + ": unknown key '" + e.key + "' in [" + s_->name + "]");
      }
    }
  }

 private:
  const Entry* get(const std::string& key) {
    used_.insert(key);
    return s_ ? s_->find(key) : nullptr;
  }

  [[noreturn]] void fail(const Entry& e, const std::string& msg) const {
    throw ConfigError(e.where + ": [" + s_->name + "] " + e.key + " = '" + e.value + "': " + msg);
  }

  const Section* s_;
  std::set<std::string> used_;
};

inline attention::ExpertFlags parse_flags(const std::string& s) {
  attention::ExpertFlags f;
  if (s == "none") return f;
  for (char c : s) {
    switch (c) {
      case 'V': f.v = true; break;
      case 'K': f.k = true; break;
      case 'Q': f.q = true; break;
      case 'O': f.o = true; break;
      default: throw ConfigError("expert flags '" + s + "': use letters from VKQO, or none");
    }
  }
  return f;
}

inline std::string flags_str(const attention::ExpertFlags& f) {
  std::string s;
  if (f.v) s += 'V';
  if (f.k) s += 'K';
  if (f.q) s += 'Q';
  if (f.o) s += 'O';
  return s.empty() ? "none" : s;
}

// Reads [attention] into `a` (d_model is set by the caller).
inline void read_attention(Reader& r, attention::AttentionConfig& a) {
  using namespace attention;
  const std::string variant = r.choice("variant", to_string(a.variant), {"dense", "head_gated", "switchhead", "moa"});
  a.variant = variant == "dense" ? Variant::dense
              : variant == "head_gated" ? Variant::head_gated
              : variant == "switchhead" ? Variant::switchhead
                                        : Variant::moa;
  a.position = r.choice("position", to_string(a.position), {"xl", "rope"}) == "xl" ? Position::xl_relative
                                                                                 : Position::rope;
  a.n_heads = r.size("n_heads", a.n_heads);
  a.d_head = r.size("d_head", a.d_head);
  a.n_experts = r.size("n_experts", a.n_experts);
  a.k_active = r.size("k_active", a.k_active);
  // SwitchHead defaults: V and O experts, one shared position projection.
  const bool sh = a.variant == Variant::switchhead;
  if (sh && !r.has("experts") && !a.experts.any()) a.experts = {true, false, false, true};
  if (sh && !r.has("shared_pos")) a.shared_pos = true;
  const std::string flags = r.str("experts", flags_str(a.experts));
  try {
    a.experts = parse_flags(flags);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("[attention] ") + e.what());
  }
  a.context_mult = r.size("context_mult", a.context_mult);
  a.causal = r.boolean("causal", a.causal);
  a.scale = r.choice("scale", to_string(a.scale), {"d_model", "d_head"}) == "d_model" ? ScoreScale::d_model
                                                                                     : ScoreScale::d_head;
  a.selection = r.choice("selection", moe::to_string(a.selection), {"sigmoid", "softmax"}) == "sigmoid"
                    ? moe::Activation::sigmoid
                    : moe::Activation::softmax;
  a.shared_pos = r.boolean("shared_pos", a.shared_pos);
}

inline model::ModelSpec read_model_spec(const Document& d) {
  using namespace model;
  ModelSpec s;
  {
    Reader r(d.first("model"));
    s.n_layers = r.size("n_layers", 0);
    s.d_model = r.size("d_model", 0);
    s.vocab = r.size("vocab", 0);
    s.tied = r.boolean("tied", false);
    s.dropout = r.real("dropout", 0.0);
    s.T = r.size("T", 0);
    s.head = r.choice("head", "lm", {"lm", "classify"}) == "lm" ? HeadKind::lm : HeadKind::classify;
    s.n_classes = r.size("n_classes", 0);
    r.finish();
  }
  {
    Reader r(d.first("attention"));
    read_attention(r, s.attention);
    s.attention.d_model = s.d_model;
    r.finish();
  }
  {
    Reader r(d.first("mlp"));
    s.mlp.kind = r.choice("kind", "dense", {"dense", "sigma_moe"}) == "dense" ? MlpKind::dense : MlpKind::sigma_moe;
    s.mlp.d_ff = r.size("d_ff", 0);
    s.mlp.n_experts = r.size("n_experts", 1);
    s.mlp.k_active = r.size("k_active", 1);
    s.mlp.d_expert = r.size("d_expert", 0);
    r.finish();
  }
  s.validate();
  return s;
}

inline std::string write_model_spec(const model::ModelSpec& s) {
  using namespace model;
  const auto& a = s.attention;
  std::ostringstream os;
  os << "[model]\n"
     << "n_layers = " << s.n_layers << "\n"
     << "d_model = " << s.d_model << "\n"
     << "vocab = " << s.vocab << "\n"
     << "tied = " << (s.tied ? "true" : "false") << "\n";
  os.precision(17);
  os << "dropout = " << s.dropout << "\n"
     << "T = " << s.T << "\n"
     << "head = " << to_string(s.head) << "\n"
     << "n_classes = " << s.n_classes << "\n\n"
     << "[attention]\n"
     << "variant = " << attention::to_string(a.variant) << "\n"
     << "position = " << attention::to_string(a.position) << "\n"
     << "n_heads = " << a.n_heads << "\n"
     << "d_head = " << a.d_head << "\n"
     << "n_experts = " << a.n_experts << "\n"
     << "k_active = " << a.k_active << "\n"
     << "experts = " << flags_str(a.experts) << "\n"
     << "context_mult = " << a.context_mult << "\n"
     << "causal = " << (a.causal ? "true" : "false") << "\n"
     << "scale = " << attention::to_string(a.scale) << "\n"
     << "selection = " << moe::to_string(a.selection) << "\n"
     << "shared_pos = " << (a.shared_pos ? "true" : "false") << "\n\n"
     << "[mlp]\n"
     << "kind = " << to_string(s.mlp.kind) << "\n"
     << "d_ff = " << s.mlp.d_ff << "\n"
     << "n_experts = " << s.mlp.n_experts << "\n"
     << "k_active = " << s.mlp.k_active << "\n"
     << "d_expert = " << s.mlp.d_expert << "\n";
  return os.str();
}

}  // namespace switchhead::config
