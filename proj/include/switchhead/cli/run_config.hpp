#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "switchhead/costmodel/cost.hpp"
#include "switchhead/model/config_io.hpp"
#include "switchhead/tasks/listops.hpp"
#include "switchhead/tasks/train.hpp"

namespace switchhead::cli {

enum class TaskKind { listops, chars };

struct TaskConfig {
  TaskKind kind = TaskKind::listops;
  std::string path;  // listops: optional dataset file; chars: required corpus
  std::size_t n_train = 2000;
  std::size_t n_valid = 500;
  tasks::ListOpsParams listops;
  double valid_fraction = 0.1;
  std::uint64_t data_seed = 1;
  std::size_t eval_streams = 1;
};

struct RunConfig {
  model::ModelSpec spec;
  tasks::TrainConfig train;
  TaskConfig task;
};

inline tasks::TrainConfig read_train(const config::Document& d) {
  tasks::TrainConfig t;
  config::Reader r(d.first("train"));
  t.steps = r.size("steps", t.steps);
  t.batch = r.size("batch", t.batch);
  t.adam.base_lr = r.real("lr", t.adam.base_lr);
  t.adam.warmup_steps = r.size("warmup", t.adam.warmup_steps);
  t.adam.clip_norm = r.real("clip", t.adam.clip_norm);
  t.log_every = r.size("log_every", t.log_every);
  t.seed = r.size("seed", t.seed);
  r.finish();
  if (t.batch == 0 || t.log_every == 0) throw ConfigError("[train] batch and log_every must be positive");
  if (t.adam.base_lr < 0.0) throw ConfigError("[train] lr must be non-negative");
  return t;
}

inline TaskConfig read_task(const config::Document& d) {
  TaskConfig t;
  config::Reader r(d.first("task"));
  t.kind = r.choice("kind", "listops", {"listops", "chars"}) == "listops" ? TaskKind::listops : TaskKind::chars;
  t.path = r.str("path", "");
  t.n_train = r.size("n_train", t.n_train);
  t.n_valid = r.size("n_valid", t.n_valid);
  t.listops.max_depth = r.size("max_depth", t.listops.max_depth);
  t.listops.max_args = r.size("max_args", t.listops.max_args);
  t.listops.max_len = r.size("max_len", t.listops.max_len);
  t.listops.leaf_prob = r.real("leaf_prob", t.listops.leaf_prob);
  t.valid_fraction = r.real("valid_fraction", t.valid_fraction);
  t.data_seed = r.size("data_seed", t.data_seed);
  t.eval_streams = r.size("eval_streams", t.eval_streams);
  r.finish();
  if (t.kind == TaskKind::chars && t.path.empty()) {
    throw ConfigError("[task] kind = chars needs path = <corpus file>");
  }
  return t;
}

inline RunConfig read_run(const config::Document& d) {
  RunConfig rc;
  rc.spec = config::read_model_spec(d);
  rc.train = read_train(d);
  rc.task = read_task(d);
  return rc;
}

// One [cost] section per table row.
struct CostRow {
  std::string name;
  cost::CostInputs in;
};

inline std::vector<CostRow> read_cost_rows(const config::Document& d) {
  std::vector<CostRow> rows;
  for (const auto* s : d.all("cost")) {
    config::Reader r(s);
    CostRow row;
    attention::AttentionConfig a;
    row.name = r.str("name", "row" + std::to_string(rows.size() + 1));
    config::read_attention(r, a);
    a.d_model = r.size("d_model", 0);
    row.in = cost::CostInputs::from_config(a, r.size("T", 0));
    r.finish();
    try {
      // Cost rows only need the closed-form inputs; an odd rotary d_head
      // (published for the RoPE baseline) is fine here.
      row.in.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(s->where + ": [cost] " + row.name + ": " + e.what());
    }
    rows.push_back(row);
  }
  for (const auto& s : d.sections) {
    if (s.name != "cost") throw ConfigError(s.where + ": unexpected section [" + s.name + "] in a cost table");
  }
  return rows;
}

}  // namespace switchhead::cli
