#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "switchhead/errors.hpp"

namespace switchhead::tasks {

inline double accuracy(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& label) {
  if (pred.size() != label.size()) throw ContractError("accuracy: size mismatch");
  if (pred.empty()) throw ContractError("accuracy: empty split");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == label[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline double perplexity(double mean_nll) { return std::exp(mean_nll); }
inline double bits_per_char(double mean_nll) { return mean_nll / std::log(2.0); }

struct MetricRow {
  std::size_t step = 0;
  std::string name;
  double value = 0.0;
};

// Rows "step,name,value"; steps never decrease.
class MetricsLog {
 public:
  void add(std::size_t step, const std::string& name, double value) {
    if (!rows_.empty() && step < rows_.back().step) throw ContractError("metrics: step went backwards");
    rows_.push_back({step, name, value});
  }
  const std::vector<MetricRow>& rows() const { return rows_; }

  double last(const std::string& name) const {
    for (auto it = rows_.rbegin(); it != rows_.rend(); ++it)
      if (it->name == name) return it->value;
    throw ContractError("metrics: no value for '" + name + "'");
  }

  std::string csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "step,name,value\n";
    for (const auto& r : rows_) os << r.step << ',' << r.name << ',' << r.value << '\n';
    return os.str();
  }

  void write(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write metrics '" + path + "'");
    f << csv();
  }

 private:
  std::vector<MetricRow> rows_;
};

}  // namespace switchhead::tasks
