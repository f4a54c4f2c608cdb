#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "devolve/data_io.hpp"
#include "devolve/divergence.hpp"
#include "devolve/network.hpp"
#include "devolve/sparsity.hpp"

namespace devolve {

/// Directed-evolution settings.
struct DEConfig {
  std::size_t trials_per_cycle = 120;
  double step_fraction = 0.05;  // nominal candidate size as a fraction of a layer's prunable parameters
  double target_sparsity = 0.8;
  std::map<std::size_t, double> layer_targets;  // per-layer overrides of target_sparsity
  std::optional<double> divergence_budget;
  std::size_t retrain_epochs = 0;
  double retrain_lr = 0.05;
  std::size_t retrain_batch = 32;
  std::uint64_t master_seed = 0;
  std::vector<std::size_t> scope;  // layers under evolution; empty means every parametric layer
  bool include_bias = false;
  std::size_t workers = 1;
  std::size_t max_cycles = 100000;
  std::size_t stall_limit = 50;  // consecutive commits adding no new zero before a layer counts as saturated

  void validate() const;
  double target_for(std::size_t layer) const;
  std::vector<std::size_t> scope_for(const Network& net) const;
};

/// Statistics of one cycle: one layer, `trials_per_cycle` trials, one commit.
struct CycleRecord {
  std::size_t cycle = 0;
  std::size_t layer = 0;
  std::vector<double> trial_divergences;
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t best_index = 0;
  double best_divergence = 0.0;
  CandidateSet committed;
  std::size_t new_zeros = 0;
  double sparsity_before = 0.0;  // prunable sparsity of the layer
  double sparsity_after = 0.0;
  double retrain_divergence = 0.0;  // divergence at the end of the cycle, after retraining if any

  friend bool operator==(const CycleRecord&, const CycleRecord&) = default;
};

/// Number of positions sampled per candidate for a layer.
std::size_t nominal_candidate_size(std::size_t prunable, double step_fraction);

/// Candidates for one cycle of one layer. Indices are drawn uniformly
/// without replacement from all prunable positions, zeroed or not; trial t
/// uses the stream keyed by (master_seed, cycle, layer, t).
std::vector<CandidateSet> propose_candidates(const Network& net, std::size_t layer, const DEConfig& cfg,
                                             std::size_t cycle);
CandidateSet propose_candidate(const Network& net, std::size_t layer, const DEConfig& cfg, std::size_t cycle,
                               std::size_t trial);

/// Divergence of the student with mask plus candidate zeroed, computed on a
/// scratch copy by a full forward pass.
double evaluate_candidate(const Network& student, const SparsityMask& mask, const CandidateSet& cand,
                          const Tensor& teacher_outputs, const Tensor& probe_inputs, const DivergenceSpec& spec);

/// Fast trial scoring for one layer. Caches the layer's input and output
/// activations and applies each candidate as a sparse update of the output
/// before running the remaining layers. The student must already have the
/// mask applied.
class TrialEvaluator {
 public:
  TrialEvaluator(const Network& student, std::size_t layer, const Tensor& probe_inputs, const Tensor& teacher_outputs,
                 const DivergenceSpec& spec);

  double base_divergence() const { return base_divergence_; }
  double evaluate(const CandidateSet& cand) const;

  /// Scores every candidate, splitting trials over `workers` threads.
  /// Results are identical for any worker count.
  std::vector<double> evaluate_all(std::span<const CandidateSet> cands, std::size_t workers) const;

 private:
  const Network& net_;
  std::size_t layer_;
  Tensor teacher_;
  DivergenceSpec spec_;
  Tensor layer_in_;
  Tensor layer_out_;
  double base_divergence_ = 0.0;
};

/// Mean, population standard deviation and argmin (lowest index on ties).
CycleRecord summarize_trials(std::span<const double> divergences);

struct Commit {
  CandidateSet candidate;
  CycleRecord record;
  SparsityMask mask;
};

/// Picks the least-divergent trial and merges it into the mask.
Commit select_and_commit(const SparsityMask& mask, std::span<const CandidateSet> candidates,
                         std::span<const double> divergences);

struct RetrainResult {
  Network student;
  double divergence_before = 0.0;
  double divergence = 0.0;  // of the returned network
};

/// SGD on the divergence to the teacher outputs. Returns the lowest
/// divergence weights seen, including the starting point.
RetrainResult retrain(const Network& student, const SparsityMask& mask, const Tensor& teacher_outputs,
                      const Tensor& probe_inputs, const DEConfig& cfg, const DivergenceSpec& spec,
                      std::size_t cycle = 0);

enum class RunStatus { TargetReached, BudgetExceeded, Saturated, CycleLimit };
std::string to_string(RunStatus status);

struct RunResult {
  Network student;
  SparsityMask mask;
  std::vector<CycleRecord> history;
  RunStatus status = RunStatus::TargetReached;
  double final_divergence = 0.0;
};

/// Full directed-evolution run: propose, evaluate, commit, retrain until
/// every in-scope layer reaches its target or a stop condition fires.
/// Layers are visited round-robin; retraining happens once per sweep.
RunResult run(const Network& teacher, const Tensor& probe_inputs, const DEConfig& cfg, const DivergenceSpec& spec);

/// Exact binomial coefficient.
boost::multiprecision::cpp_int combinations_count(std::uint64_t n, std::uint64_t k);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;

  std::size_t total() const;
  std::size_t bin_of(double v) const;
  std::size_t mode() const;
  bool unimodal() const;
};

/// Equal-width histogram over [min, max] of the values.
Histogram histogram(std::span<const double> values, std::size_t bins);

/// Values of unmasked weights (the first tensor) of `layer`, or of every parametric layer.
std::vector<double> surviving_weights(const Network& net, const SparsityMask& mask, std::optional<std::size_t> layer);
Histogram weight_histogram(const Network& net, const SparsityMask& mask, std::optional<std::size_t> layer,
                           std::size_t bins);

/// Mask with exactly `zeros` uniformly random prunable positions of `layer`
/// zeroed; the single-shot random baseline.
SparsityMask random_mask(const Network& net, std::size_t layer, std::size_t zeros, bool include_bias, std::uint64_t seed);

// History CSV: cycle,layer,sparsity_before,sparsity_after,trials,mean,std,best,committed_size,retrain_divergence
std::string history_csv(std::span<const CycleRecord> history);
// Per-trial divergences: cycle,trial,divergence
std::string trials_csv(std::span<const CycleRecord> history);

struct HistoryRow {
  std::size_t cycle = 0;
  std::size_t layer = 0;
  double sparsity_before = 0.0;
  double sparsity_after = 0.0;
  std::size_t trials = 0;
  double mean = 0.0;
  double std = 0.0;
  double best = 0.0;
  std::size_t committed_size = 0;
  double retrain_divergence = 0.0;
};
std::vector<HistoryRow> parse_history_csv(const std::string& text);

}  // namespace devolve
