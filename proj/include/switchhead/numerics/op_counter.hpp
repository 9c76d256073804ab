#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>

namespace switchhead {

struct CostTerm {
  std::uint64_t macs = 0;
  std::uint64_t mem_floats = 0;

  friend bool operator==(const CostTerm&, const CostTerm&) = default;
};

// Instrumented multiply-accumulate and stored-activation counter.
//
// Every counted primitive is attributed to the currently active term (see
// Scope). Storage is only accumulated inside a scope that enables it: the
// accounting convention decides which activations count as "stored for the
// backward pass", not the primitive.
class OpCounter {
 public:
  OpCounter() = default;
  explicit OpCounter(bool enabled) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }

  std::uint64_t macs() const { return macs_; }
  std::uint64_t mem_floats() const { return mem_floats_; }
  std::uint64_t score_rows() const { return score_rows_; }
  const std::map<std::string, CostTerm>& terms() const { return terms_; }

  const std::string& current_term() const { return term_; }
  bool tracking_storage() const { return storage_; }

  void add_macs(std::uint64_t n) {
    if (!enabled_) return;
    macs_ += n;
    terms_[term_].macs += n;
  }

  void add_storage(std::uint64_t n) {
    if (!enabled_) return;
    mem_floats_ += n;
    terms_[term_].mem_floats += n;
  }

  // Called by matmul: stores its output only when the active scope says so.
  void add_output(std::uint64_t n) {
    if (storage_) add_storage(n);
  }

  // One call per block of attention-score rows computed (a T x CT matrix
  // contributes T rows).
  void add_score_rows(std::uint64_t rows) {
    if (enabled_) score_rows_ += rows;
  }

  void reset() {
    macs_ = mem_floats_ = score_rows_ = 0;
    terms_.clear();
  }

  class Scope {
   public:
    Scope(OpCounter* c, std::string term, bool storage) : c_(c) {
      if (!c_) return;
      prev_term_ = std::exchange(c_->term_, std::move(term));
      prev_storage_ = std::exchange(c_->storage_, storage);
    }
    ~Scope() {
      if (!c_) return;
      c_->term_ = std::move(prev_term_);
      c_->storage_ = prev_storage_;
    }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    OpCounter* c_;
    std::string prev_term_;
    bool prev_storage_ = false;
  };

 private:
  bool enabled_ = true;
  bool storage_ = false;
  std::string term_ = "other";
  std::uint64_t macs_ = 0;
  std::uint64_t mem_floats_ = 0;
  std::uint64_t score_rows_ = 0;
  std::map<std::string, CostTerm> terms_;
};

// Null-safe scope helper: `auto s = count_as(counter, "projections", true);`
[[nodiscard]] inline OpCounter::Scope count_as(OpCounter* c, std::string term,
                                               bool storage = false) {
  return OpCounter::Scope(c, std::move(term), storage);
}

}  // namespace switchhead
