#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "switchhead/cli/run_config.hpp"
#include "switchhead/costmodel/measure.hpp"
#include "switchhead/diagnostics/gradcheck_suite.hpp"
#include "switchhead/model/checkpoint.hpp"
#include "switchhead/model/matcher.hpp"
#include "switchhead/tasks/train.hpp"

namespace switchhead::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

inline config::Document load_document(const Common& c) {
  auto d = c.config.empty() ? config::Document{} : config::Document::load(c.config);
  for (const auto& s : c.sets) d.apply_override(s);
  return d;
}

inline void allow_sections(const config::Document& d, const std::set<std::string>& allowed) {
  for (const auto& s : d.sections) {
    if (!allowed.count(s.name)) throw ConfigError(s.where + ": unknown section [" + s.name + "]");
  }
}

inline std::filesystem::path out_dir(const Common& c) {
  std::filesystem::path p(c.out);
  std::filesystem::create_directories(p);
  return p;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  f << text;
}

// ---- cost ---------------------------------------------------------------

inline int cmd_cost(const Common& c, std::uint64_t layers, std::uint64_t batch, bool timing, std::ostream& out) {
  const auto d = load_document(c);
  const auto rows = read_cost_rows(d);
  std::ostringstream table, csv;
  table << std::left << std::setw(28) << "name" << std::setw(12) << "variant" << std::setw(7) << "heads"
        << std::setw(16) << "macs" << std::setw(9) << "" << std::setw(14) << "mem_floats" << "\n";
  csv << "name,variant,position,heads,T,d_head,d_model,C,E,K,experts,shared_pos,macs,mem_floats,extra_macs\n";
  for (const auto& row : rows) {
    auto r = cost::closed_form(row.in);
    const std::uint64_t scale = layers * batch;
    const std::uint64_t macs = r.macs * scale, mem = r.mem_floats * scale;
    table << std::left << std::setw(28) << row.name << std::setw(12) << attention::to_string(row.in.variant)
          << std::setw(7) << row.in.H << std::setw(16) << macs << std::setw(9) << cost::human(macs)
          << std::setw(14) << mem << cost::human(mem) << "\n";
    csv << row.name << ',' << attention::to_string(row.in.variant) << ',' << attention::to_string(row.in.position)
        << ',' << row.in.H << ',' << row.in.T << ',' << row.in.d_head << ',' << row.in.d_model << ',' << row.in.C
        << ',' << row.in.E << ',' << row.in.k_active << ',' << config::flags_str(row.in.experts) << ','
        << (row.in.shared_pos ? "true" : "false") << ',' << macs << ',' << mem << ',' << r.extra_macs() * scale
        << "\n";
  }
  out << table.str();
  if (timing) {
    out << "\ntiming (one layer forward, float64, single process; not comparable to GPU wall-clock)\n";
    for (const auto& row : rows) {
      attention::AttentionConfig a;
      a.variant = row.in.variant;
      a.position = row.in.position;
      a.d_model = row.in.d_model;
      a.n_heads = row.in.H;
      a.d_head = row.in.d_head;
      a.n_experts = row.in.E;
      a.k_active = row.in.k_active;
      a.experts = row.in.variant == attention::Variant::switchhead ? row.in.experts : attention::ExpertFlags{};
      a.context_mult = row.in.C;
      a.shared_pos = row.in.shared_pos;
      if (const auto v = a.violations(); !v.empty()) {
        out << "  " << row.name << ": skipped (" << v.front() << ")\n";
        continue;
      }
      const auto t0 = std::chrono::steady_clock::now();
      cost::measure(a, row.in.T, c.seed);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      out << "  " << row.name << ": " << std::fixed << std::setprecision(1) << ms << " ms\n" << std::defaultfloat;
    }
  }
  if (!c.out.empty()) {
    const auto dir = out_dir(c);
    write_file(dir / "cost.txt", table.str());
    write_file(dir / "cost.csv", csv.str());
  }
  return kExitOk;
}

// ---- match --------------------------------------------------------------

inline int cmd_match(const Common& c, const std::string& template_path, std::uint64_t target_params,
                     const std::string& rule, std::ostream& out) {
  std::uint64_t target = target_params;
  if (target == 0) {
    if (c.config.empty()) throw ConfigError("match: give --config (dense target) or --target-params");
    const auto d = load_document(c);
    allow_sections(d, {"model", "attention", "mlp", "train", "task"});
    target = model::count_params(config::read_model_spec(d));
  }
  auto td = config::Document::load(template_path);
  allow_sections(td, {"model", "attention", "mlp", "reference"});
  const auto tmpl = config::read_model_spec(td);
  model::MatchOptions opt;
  opt.rule = rule == "fill" ? model::DffRule::fill : model::DffRule::first_within_band;
  const auto res = model::match_params(target, tmpl, opt);
  std::ostringstream os;
  os << model::describe(res) << "rule " << model::to_string(opt.rule) << "\n\nsearch trace\n";
  os << "stage,d_head,width,params\n";
  for (const auto& s : res.trace) os << s.stage << ',' << s.d_head << ',' << s.width << ',' << s.params << "\n";
  if (const auto* ref = td.first("reference")) {
    config::Reader r(ref);
    const std::size_t rd = r.size("d_head", 0);
    const std::size_t rw = r.size(tmpl.mlp.kind == model::MlpKind::dense ? "d_ff" : "d_expert", 0);
    r.finish();
    os << "\nreference comparison (published d_head " << rd << ", width " << rw
       << "; depends on the unpublished counting convention)\n"
       << model::calibration_report(target, tmpl, rd, rw);
  }
  out << os.str();
  if (!c.out.empty()) {
    const auto dir = out_dir(c);
    write_file(dir / "match.txt", os.str());
    write_file(dir / "matched.cfg", config::write_model_spec(res.spec));
  }
  return kExitOk;
}

// ---- train / eval -------------------------------------------------------

struct TaskData {
  std::vector<tasks::ListOpsExample> train, valid;
  std::vector<std::size_t> train_ids, valid_ids;
};

inline TaskData load_task(const TaskConfig& t) {
  TaskData d;
  if (t.kind == TaskKind::listops) {
    if (!t.path.empty()) {
      auto all = tasks::load_listops(t.path);
      if (all.size() < 2) throw ConfigError("listops dataset '" + t.path + "' needs at least two examples");
      const std::size_t n_valid = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(all.size()) * t.valid_fraction));
      d.train.assign(all.begin(), all.end() - static_cast<std::ptrdiff_t>(n_valid));
      d.valid.assign(all.end() - static_cast<std::ptrdiff_t>(n_valid), all.end());
    } else {
      const Rng r(t.data_seed);
      d.train = tasks::gen_listops(t.n_train, t.listops, r.split(0).next_u64());
      d.valid = tasks::gen_listops(t.n_valid, t.listops, r.split(1).next_u64());
    }
  } else {
    const auto corpus = tasks::CharCorpus::from_file(t.path, t.valid_fraction);
    d.train_ids = corpus.train_ids();
    d.valid_ids = corpus.valid_ids();
  }
  return d;
}

inline std::string summary(const TaskConfig& t, const tasks::EvalResult& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "task " << (t.kind == TaskKind::listops ? "listops" : "chars") << "\n"
     << "split valid\n"
     << "count " << r.count << "\n";
  if (t.kind == TaskKind::listops) os << "accuracy " << r.accuracy << "\n";
  os << "mean_nll " << r.mean_nll << "\n"
     << "perplexity " << r.perplexity << "\n"
     << "bpc " << r.bpc << "\n";
  return os.str();
}

inline tasks::EvalResult evaluate_task(const model::Model& m, const TaskConfig& t, const TaskData& d) {
  if (t.kind == TaskKind::listops) return tasks::evaluate_listops(m, d.valid);
  return tasks::evaluate_lm(m, d.valid_ids, t.eval_streams);
}

inline int cmd_train(const Common& c, std::ostream& out) {
  if (c.out.empty()) throw ConfigError("train: --out <dir> is required");
  const auto d = load_document(c);
  allow_sections(d, {"model", "attention", "mlp", "train", "task"});
  auto rc = read_run(d);
  if (c.seed_given) rc.train.seed = c.seed;
  const auto data = load_task(rc.task);
  auto m = model::build(rc.spec, rc.train.seed);
  tasks::MetricsLog log;
  if (rc.task.kind == TaskKind::listops) {
    log = tasks::train_listops(m, data.train, rc.train);
  } else {
    log = tasks::train_lm(m, data.train_ids, rc.train);
  }
  const auto dir = out_dir(c);
  log.write((dir / "metrics.csv").string());
  model::save_checkpoint(m, (dir / "checkpoint.bin").string());
  const std::string s = summary(rc.task, evaluate_task(m, rc.task, data));
  write_file(dir / "summary.txt", s);
  out << s;
  return kExitOk;
}

inline int cmd_eval(const Common& c, const std::string& checkpoint, std::ostream& out) {
  const auto d = load_document(c);
  allow_sections(d, {"model", "attention", "mlp", "train", "task"});
  const auto task = read_task(d);
  const auto m = model::load_checkpoint(checkpoint);
  const std::string s = summary(task, evaluate_task(m, task, load_task(task)));
  if (!c.out.empty()) write_file(out_dir(c) / "eval.txt", s);
  out << s;
  return kExitOk;
}

// ---- export-attn --------------------------------------------------------

inline std::string grid_csv(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  std::ostringstream os;
  os << std::setprecision(12);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) os << (j ? "," : "") << v[r * cols + j];
    os << "\n";
  }
  return os.str();
}

inline std::vector<std::size_t> parse_input(const model::Model& m, const std::string& input) {
  std::vector<std::size_t> ids;
  if (m.spec.head == model::HeadKind::classify && m.spec.vocab == tasks::listops_vocab::kSize) {
    ids = tasks::tokenize_listops(input);
  } else {
    std::istringstream is(input);
    std::string w;
    while (is >> w) {
      if (!std::all_of(w.begin(), w.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
        throw ConfigError("export-attn: input must be whitespace-separated token ids for this model");
      }
      ids.push_back(std::stoull(w));
    }
  }
  if (ids.empty()) throw ConfigError("export-attn: empty input");
  return ids;
}

inline std::string token_label(const model::Model& m, std::size_t id) {
  if (m.spec.head == model::HeadKind::classify && m.spec.vocab == tasks::listops_vocab::kSize) {
    return tasks::token_text(id);
  }
  return std::to_string(id);
}

inline int cmd_export_attn(const Common& c, const std::string& checkpoint, const std::string& input, int layer_sel,
                           int head_sel, std::ostream& out) {
  if (c.out.empty()) throw ConfigError("export-attn: --out <dir> is required");
  const auto m = model::load_checkpoint(checkpoint);
  const auto ids = parse_input(m, input);
  const std::size_t T = ids.size();
  model::ModelForwardOptions fo;
  fo.record_trace = true;
  model::ModelOutput res;
  {
    NoGradGuard ng;
    res = model::forward(m, ids, attention::SeqLayout::single(T), {}, fo);
  }
  const std::size_t n_layers = res.traces.size();
  if (layer_sel >= 0 && static_cast<std::size_t>(layer_sel) >= n_layers) {
    throw ContractError("export-attn: layer " + std::to_string(layer_sel) + " out of range (" +
                        std::to_string(n_layers) + " layers)");
  }
  const auto dir = out_dir(c);
  std::ostringstream labels;
  for (std::size_t id : ids) labels << token_label(m, id) << "\n";
  write_file(dir / "tokens.txt", labels.str());
  std::size_t files = 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (layer_sel >= 0 && static_cast<std::size_t>(layer_sel) != l) continue;
    const auto& tr = res.traces[l];
    const std::size_t n_heads = tr.maps.size();
    if (head_sel >= 0 && static_cast<std::size_t>(head_sel) >= n_heads) {
      throw ContractError("export-attn: head " + std::to_string(head_sel) + " out of range (" +
                          std::to_string(n_heads) + " heads)");
    }
    const std::string p = "layer" + std::to_string(l);
    const std::size_t rows = tr.maps.front().rows, cols = tr.maps.front().cols;
    std::vector<double> mx(rows * cols, 0.0);
    for (const auto& map : tr.maps) {
      for (std::size_t i = 0; i < mx.size(); ++i) mx[i] = std::max(mx[i], map.values[i]);
      if (head_sel >= 0 && static_cast<std::size_t>(head_sel) != map.head) continue;
      write_file(dir / (p + "_head" + std::to_string(map.head) + ".csv"), grid_csv(map.values, rows, cols));
      ++files;
    }
    write_file(dir / (p + "_max.csv"), grid_csv(mx, rows, cols));
    ++files;
    const bool moa = m.spec.attention.variant == attention::Variant::moa;
    const bool gated = m.spec.attention.variant == attention::Variant::head_gated;
    for (const auto& s : tr.source) {
      if (head_sel >= 0 && static_cast<std::size_t>(head_sel) != s.head) continue;
      write_file(dir / (p + "_head" + std::to_string(s.head) + "_sel_v.csv"), grid_csv(s.weights, s.tokens, s.n_experts));
      ++files;
    }
    for (const auto& s : tr.destination) {
      const std::string name = moa ? p + "_router.csv"
                               : gated ? p + "_head_gates.csv"
                                       : p + "_head" + std::to_string(s.head) + "_sel_o.csv";
      if (!moa && !gated && head_sel >= 0 && static_cast<std::size_t>(head_sel) != s.head) continue;
      write_file(dir / name, grid_csv(s.weights, s.tokens, s.n_experts));
      ++files;
    }
  }
  out << "wrote " << files << " files to " << dir.string() << "\n";
  return kExitOk;
}

// ---- gradcheck ----------------------------------------------------------

inline int cmd_gradcheck(const Common& c, std::size_t seeds, double tol, std::ostream& out) {
  bool ok = true;
  out << "seed,case,max_rel_error,checked,worst\n";
  for (std::size_t k = 0; k < seeds; ++k) {
    const std::uint64_t seed = c.seed + k;
    for (const auto& e : diagnostics::run_gradcheck_suite(seed)) {
      out << seed << ',' << e.name << ',' << e.result.max_rel_error << ',' << e.result.checked << ','
          << e.result.worst << "\n";
      ok = ok && e.result.max_rel_error < tol;
    }
  }
  out << (ok ? "PASS" : "FAIL") << " (tolerance " << tol << ")\n";
  return ok ? kExitOk : kExitFailure;
}

// ---- entry --------------------------------------------------------------

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"SwitchHead attention lab: cost tables, parameter matching, training and attention exports"};
  app.require_subcommand(1);
  Common c;
  auto common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", c.config, "key-value config file")->check(CLI::ExistingFile);
    if (needs_config) opt->required();
    sub->add_option("--set", c.sets, "override, section.key=value (repeatable)");
    sub->add_option("--out", c.out, "output directory");
    sub->add_option("--seed", c.seed, "seed");
  };

  auto* cost = app.add_subcommand("cost", "per-layer MACs and stored floats from the closed-form model");
  common(cost, false);
  std::uint64_t layers = 1, batch = 1;
  bool timing = false;
  cost->add_option("--layers", layers, "multiply by this many layers")->check(CLI::PositiveNumber);
  cost->add_option("--batch", batch, "multiply by this many sequences")->check(CLI::PositiveNumber);
  cost->add_flag("--timing", timing, "also time one forward pass per row");

  auto* match = app.add_subcommand("match", "size d_head and d_ff to a dense parameter target");
  common(match, false);
  std::string tmpl, rule = "first_within_band";
  std::uint64_t target_params = 0;
  match->add_option("--template", tmpl, "template model config")->required()->check(CLI::ExistingFile);
  match->add_option("--target-params", target_params, "explicit target instead of --config");
  match->add_option("--rule", rule, "d_ff rule")->check(CLI::IsMember({"first_within_band", "fill"}));

  auto* train = app.add_subcommand("train", "train a model and write metrics, checkpoint and summary");
  common(train, true);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the config's validation split");
  common(eval, true);
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);

  auto* exp = app.add_subcommand("export-attn", "dump attention maps and expert selections as CSV grids");
  common(exp, false);
  std::string input;
  int layer_sel = -1, head_sel = -1;
  exp->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  exp->add_option("--input", input, "ListOps expression or token ids")->required();
  exp->add_option("--layer", layer_sel, "only this layer");
  exp->add_option("--head", head_sel, "only this head");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite over every variant");
  common(grad, false);
  std::size_t seeds = 3;
  double tol = 1e-5;
  grad->add_option("--seeds", seeds, "number of consecutive seeds");
  grad->add_option("--tolerance", tol, "max relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  for (auto* sub : {cost, match, train, eval, exp, grad}) {
    if (sub->count("--seed")) c.seed_given = true;
  }
  try {
    if (cost->parsed()) return cmd_cost(c, layers, batch, timing, out);
    if (match->parsed()) return cmd_match(c, tmpl, target_params, rule, out);
    if (train->parsed()) return cmd_train(c, out);
    if (eval->parsed()) return cmd_eval(c, checkpoint, out);
    if (exp->parsed()) return cmd_export_attn(c, checkpoint, input, layer_sel, head_sel, out);
    if (grad->parsed()) return cmd_gradcheck(c, seeds, tol, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const MatchError& e) {
    err << "matching error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace switchhead::cli
