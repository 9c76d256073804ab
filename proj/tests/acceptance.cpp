// Acceptance checks: one PASS/FAIL line per criterion.
//   acceptance --core      cost, gradient, reduction, sparsity and matching checks
//   acceptance --listops   desk-scale ListOps comparison (see kListOpsBudgetSeconds)

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "switchhead/cli/app.hpp"
#include "switchhead/costmodel/measure.hpp"
#include "switchhead/diagnostics/gradcheck_suite.hpp"
#include "switchhead/model/matcher.hpp"

using namespace switchhead;
using attention::AttentionConfig;
using attention::ExpertFlags;
using attention::Variant;

namespace {

constexpr double kGradTolerance = 1e-5;
constexpr std::size_t kGradSeeds = 3;
constexpr double kReductionTolerance = 1e-12;
constexpr double kReadoutTolerance = 1e-10;
constexpr int kCounterTrials = 20;
constexpr std::uint64_t kMatchBand = 100000;
constexpr double kListOpsGapPoints = 0.05;
constexpr std::size_t kListOpsSeeds = 3;
constexpr double kListOpsBudgetSeconds = 3600.0;

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  if (!ok) ++failures;
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string src(const std::string& rel) { return std::string(SWITCHHEAD_SOURCE_DIR) + "/" + rel; }

double max_diff(const Tensor& a, const Tensor& b) {
  return oracle::max_abs_diff({a.values().begin(), a.values().end()}, {b.values().begin(), b.values().end()});
}

attention::AttentionParams random_params(const AttentionConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Rng wr = rng.split(0), br = rng.split(1);
  auto p = attention::init_params(cfg, wr);
  for (auto* group : {&p.u, &p.w})
    for (auto& t : *group)
      for (double& v : t.mutable_values()) v = br.uniform(-0.5, 0.5);
  return p;
}

// ---- memory column -------------------------------------------------------------

void memory_column() {
  struct Row {
    Variant v;
    std::uint64_t H, T, dh, dm, E, K, want;
    const char* display;
  };
  const std::vector<Row> rows{
      {Variant::dense, 10, 256, 41, 412, 1, 1, 3461120, "3.5M"},
      {Variant::dense, 16, 512, 64, 1024, 1, 1, 20971520, "21.0M"},
      {Variant::dense, 8, 512, 64, 512, 1, 1, 10485760, "10.5M"},
      {Variant::switchhead, 2, 256, 76, 412, 5, 2, 757760, "0.8M"},
      {Variant::switchhead, 2, 512, 112, 512, 4, 2, 2785280, "2.8M"},
      {Variant::switchhead, 2, 512, 132, 1024, 8, 4, 2908160, "2.9M"},
  };
  bool ok = true;
  std::ostringstream detail;
  for (const auto& r : rows) {
    cost::CostInputs in;
    in.variant = r.v;
    in.H = r.H;
    in.T = r.T;
    in.d_head = r.dh;
    in.d_model = r.dm;
    in.C = 2;
    in.E = r.E;
    in.k_active = r.K;
    in.shared_pos = r.v == Variant::switchhead;
    const auto mem = cost::closed_form(in).mem_floats;
    const bool hit = mem == r.want && cost::human(mem) == r.display;
    ok = ok && hit;
    detail << (detail.tellp() ? " " : "") << mem << "=" << cost::human(mem);
  }
  report(ok, "memory-column", detail.str() + " (exact)");
}

// ---- counter against closed form --------------------------------------------------

bool reports_equal(const cost::CostReport& a, const cost::CostReport& b) {
  if (a.macs != b.macs || a.mem_floats != b.mem_floats || a.extra_macs() != b.extra_macs()) return false;
  if (a.terms.size() != b.terms.size() || a.extras.size() != b.extras.size()) return false;
  for (const auto& [n, t] : a.terms)
    if (!b.terms.count(n) || b.terms.at(n).macs != t.macs || b.terms.at(n).mem_floats != t.mem_floats) return false;
  for (const auto& [n, t] : a.extras)
    if (!b.extras.count(n) || b.extras.at(n).macs != t.macs) return false;
  return true;
}

void counter_vs_formula() {
  Rng rng(101);
  int checked = 0, bad = 0, selection_itemized = 0, selection_expected = 0;
  auto check = [&](const AttentionConfig& cfg, std::size_t T, std::uint64_t seed) {
    const auto m = cost::measure(cfg, T, seed);
    const auto c = cost::closed_form(cost::CostInputs::from_config(cfg, T));
    ++checked;
    if (!reports_equal(m, c)) ++bad;
    if (cfg.variant == Variant::moa || (cfg.variant == Variant::switchhead && cfg.experts.any())) {
      ++selection_expected;
      if (m.extras.count("selection") && !m.terms.count("selection")) ++selection_itemized;
    }
  };
  auto tiny = [&](std::size_t& H, std::size_t& dh, std::size_t& dm, std::size_t& T, std::size_t& C) {
    H = 1 + rng.below(3);
    dh = 2 * (1 + rng.below(4));
    dm = 2 * (1 + rng.below(8));
    T = 1 + rng.below(8);
    C = 1 + rng.below(3);
  };
  std::size_t H, dh, dm, T, C;
  for (int t = 0; t < kCounterTrials; ++t) {
    tiny(H, dh, dm, T, C);
    auto cfg = AttentionConfig::dense(dm, H, dh);
    cfg.context_mult = C;
    check(cfg, T, t);
  }
  for (unsigned bits = 0; bits < 16; ++bits)
    for (int t = 0; t < kCounterTrials; ++t) {
      tiny(H, dh, dm, T, C);
      const auto flags = ExpertFlags::from_bits(bits);
      const std::size_t E = flags.any() ? 1 + rng.below(5) : 1;
      auto cfg = AttentionConfig::switchhead(dm, H, dh, E, 1 + rng.below(E));
      cfg.experts = flags;
      cfg.context_mult = C;
      cfg.shared_pos = rng.bernoulli(0.5);
      check(cfg, T, bits * 1000 + t);
    }
  for (int t = 0; t < kCounterTrials; ++t) {
    tiny(H, dh, dm, T, C);
    AttentionConfig cfg;
    cfg.variant = Variant::moa;
    cfg.d_model = dm;
    cfg.d_head = dh;
    cfg.n_experts = 1 + rng.below(6);
    cfg.k_active = cfg.n_heads = 1 + rng.below(cfg.n_experts);
    cfg.context_mult = C;
    check(cfg, T, 50000 + t);
  }
  std::ostringstream d;
  d << checked << " configs (dense " << kCounterTrials << ", switchhead 16 layouts x " << kCounterTrials << ", moa "
    << kCounterTrials << "), " << bad << " mismatches, selection itemized in " << selection_itemized << "/"
    << selection_expected;
  report(bad == 0 && selection_itemized == selection_expected, "counter-vs-formula", d.str());
}

// ---- gradients ------------------------------------------------------------------------

void gradient_suite() {
  double worst = 0.0;
  std::string worst_name;
  std::size_t cases = 0;
  for (std::size_t s = 0; s < kGradSeeds; ++s)
    for (const auto& e : diagnostics::run_gradcheck_suite(s + 1)) {
      ++cases;
      if (e.result.max_rel_error >= worst) {
        worst = e.result.max_rel_error;
        worst_name = e.name;
      }
    }
  std::ostringstream d;
  d << cases << " cases over " << kGradSeeds << " seeds, worst " << std::setprecision(3) << worst << " ("
    << worst_name << "), tolerance " << kGradTolerance;
  report(worst < kGradTolerance, "gradient-suite", d.str());
}

// ---- reductions -----------------------------------------------------------------------

void reduction_oracles() {
  Rng xr(7);
  const Tensor x = oracle::random_tensor({5, 8}, xr);
  const auto layout = attention::SeqLayout::single(5);
  attention::ForwardOptions unit;
  unit.force_unit_gates = true;

  auto sh = AttentionConfig::switchhead(8, 2, 4, 1, 1);
  sh.experts = {true, true, true, true};
  sh.shared_pos = false;
  const auto sp = random_params(sh, 11);
  attention::AttentionParams d;
  auto flat = [](const Tensor& bank) {
    return Tensor::from({bank.dim(1), bank.dim(2)}, {bank.values().begin(), bank.values().end()});
  };
  for (std::size_t h = 0; h < 2; ++h) {
    d.q.push_back(flat(sp.q[h]));
    d.k.push_back(flat(sp.k[h]));
    d.v.push_back(flat(sp.v[h]));
    d.o.push_back(flat(sp.o[h]));
  }
  d.pos = sp.pos;
  d.u = sp.u;
  d.w = sp.w;
  const auto dense_cfg = AttentionConfig::dense(8, 2, 4);
  const double e_sh = max_diff(attention::switchhead_attention(x, sp, sh, layout, nullptr, nullptr, unit).y,
                               attention::dense_attention(x, d, dense_cfg, layout).y);

  auto hg = AttentionConfig::dense(8, 3, 4);
  hg.variant = Variant::head_gated;
  hg.k_active = 3;
  const auto hp = random_params(hg, 12);
  const double e_hg = max_diff(attention::head_gated_attention(x, hp, hg, layout, nullptr, nullptr, unit).y,
                               attention::dense_attention(x, hp, AttentionConfig::dense(8, 3, 4), layout).y);

  const auto rc = AttentionConfig::dense(8, 3, 4);
  const auto rp = random_params(rc, 13);
  attention::ForwardOptions cat;
  cat.concat_readout = true;
  const double e_ro = max_diff(attention::dense_attention(x, rp, rc, layout).y,
                               attention::dense_attention(x, rp, rc, layout, nullptr, nullptr, cat).y);

  std::ostringstream s;
  s << std::setprecision(3) << "switchhead(E=1) vs dense " << e_sh << ", head_gated(K=H) vs dense " << e_hg
    << " (tol " << kReductionTolerance << "), per-head vs concatenated readout " << e_ro << " (tol "
    << kReadoutTolerance << ")";
  report(e_sh < kReductionTolerance && e_hg < kReductionTolerance && e_ro < kReadoutTolerance, "reduction-oracles",
         s.str());
}

// ---- structural sparsity ----------------------------------------------------------------

void structural_sparsity() {
  bool ok = true;
  int n = 0;
  for (std::size_t H : {1, 2, 4})
    for (std::size_t E : {1, 3, 8})
      for (std::size_t k = 1; k <= E; k += 2) {
        ok = ok && cost::measure(AttentionConfig::switchhead(8, H, 4, E, k), 4, H + E + k).score_matrices == H;
        ++n;
      }
  for (std::size_t E : {2, 5})
    for (std::size_t k = 1; k <= E; ++k) {
      AttentionConfig cfg;
      cfg.variant = Variant::moa;
      cfg.d_model = 8;
      cfg.d_head = 4;
      cfg.n_experts = E;
      cfg.k_active = cfg.n_heads = k;
      ok = ok && cost::measure(cfg, 5, E * 10 + k).score_matrices == k;
      ++n;
    }
  report(ok, "structural-sparsity",
         std::to_string(n) + " configs: switchhead computes H score matrices for every (E, k), moa computes k");
}

// ---- matching ----------------------------------------------------------------------------

model::ModelSpec load_spec(const std::string& rel) {
  return config::read_model_spec(config::Document::load(src(rel)));
}

void matching() {
  const std::uint64_t target = model::count_params(load_spec("configs/wt103_47m_dense.cfg"));
  bool ok = true;
  int n = 0;
  auto check = [&](std::uint64_t t, const model::ModelSpec& tmpl, model::DffRule rule) {
    model::MatchOptions o;
    o.rule = rule;
    const auto r = model::match_params(t, tmpl, o);
    ok = ok && r.param_count <= t && r.param_count == model::count_params(r.spec) && t - r.param_count <= kMatchBand &&
         r.spec.attention.d_head % 4 == 0;
    ++n;
  };
  const auto sh = load_spec("configs/wt103_47m_switchhead.cfg");
  const auto d2 = load_spec("configs/wt103_47m_dense2.cfg");
  for (auto rule : {model::DffRule::first_within_band, model::DffRule::fill}) {
    check(target, sh, rule);
    check(target, d2, rule);
    for (std::uint64_t t = 36000000; t <= 60000000; t += 4000000) check(t, sh, rule);
  }
  const std::string rep = model::calibration_report(target, sh, 76, 2080);
  const auto lines = static_cast<std::size_t>(std::count(rep.begin(), rep.end(), '\n'));
  const bool hit = rep.find(",yes") != std::string::npos;
  ok = ok && lines == 5;
  std::ostringstream d;
  d << n << " matches at or below target, slack <= " << kMatchBand << ", d_head % 4 == 0; calibration report "
    << lines - 1 << " rows, reference (76, 2080) " << (hit ? "reproduced by one convention" : "not reproduced")
    << " (informational)";
  report(ok, "matching-invariants", d.str());
}

void excluded() {
  std::cout << "PASS excluded-targets: perplexity/bpc columns and wall-clock/GPU-memory ratios are documented "
               "targets only, not tested"
            << std::endl;
}

// ---- ListOps ------------------------------------------------------------------------------

struct ListOpsRun {
  std::string name;
  cli::RunConfig rc;
  cli::TaskData data;
};

ListOpsRun load_run(const std::string& name) {
  ListOpsRun r;
  r.name = name;
  r.rc = cli::read_run(config::Document::load(src("configs/" + name + ".cfg")));
  r.data = cli::load_task(r.rc.task);
  return r;
}

double seconds_per_step(const ListOpsRun& run) {
  auto cfg = run.rc.train;
  cfg.steps = 3;
  auto m = model::build(run.rc.spec, 0);
  const auto t0 = std::chrono::steady_clock::now();
  tasks::train_listops(m, run.data.train, cfg);
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 3.0;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

void listops() {
  std::vector<ListOpsRun> runs;
  for (const char* n : {"listops_switchhead", "listops_dense2", "listops_dense8"}) runs.push_back(load_run(n));
  double projected = 0.0;
  std::ostringstream timing;
  for (const auto& r : runs) {
    const double s = seconds_per_step(r);
    projected += s * static_cast<double>(r.rc.train.steps * kListOpsSeeds);
    timing << " " << r.name << " " << std::fixed << std::setprecision(2) << s << "s/step";
  }
  const bool forced = std::getenv("SWITCHHEAD_LISTOPS_FULL") != nullptr;
  if (projected > kListOpsBudgetSeconds && !forced) {
    std::ostringstream d;
    d << "not run: projected " << std::fixed << std::setprecision(0) << projected << " s for " << kListOpsSeeds
      << " seeds x 3 configs exceeds the " << kListOpsBudgetSeconds << " s budget on this machine (" << timing.str().substr(1)
      << "); set SWITCHHEAD_LISTOPS_FULL=1 to run anyway";
    report(false, "listops-desk-scale", d.str());
    return;
  }
  std::vector<double> med;
  std::ostringstream d;
  for (const auto& r : runs) {
    std::vector<double> acc;
    for (std::size_t s = 0; s < kListOpsSeeds; ++s) {
      auto cfg = r.rc.train;
      cfg.seed = s + 1;
      auto m = model::build(r.rc.spec, s + 1);
      tasks::train_listops(m, r.data.train, cfg);
      acc.push_back(tasks::evaluate_listops(m, r.data.valid).accuracy);
    }
    med.push_back(median(acc));
    d << r.name << " median " << std::fixed << std::setprecision(3) << med.back() << "; ";
  }
  const bool ok = med[0] >= med[1] && med[0] >= med[2] - kListOpsGapPoints;
  d << "need switchhead >= dense2 and switchhead >= dense8 - " << kListOpsGapPoints;
  report(ok, "listops-desk-scale", d.str());
}

}  // namespace

int main(int argc, char** argv) {
  bool core = false, lo = false;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--core")) core = true;
    else if (!std::strcmp(argv[i], "--listops")) lo = true;
    else {
      std::cerr << "usage: acceptance [--core] [--listops]\n";
      return 2;
    }
  }
  if (!core && !lo) core = lo = true;
  try {
    if (core) {
      memory_column();
      counter_vs_formula();
      gradient_suite();
      reduction_oracles();
      structural_sparsity();
      matching();
      excluded();
    }
    if (lo) listops();
  } catch (const std::exception& e) {
    std::cout << "FAIL error: " << e.what() << std::endl;
    return 1;
  }
  return failures == 0 ? 0 : 1;
}
