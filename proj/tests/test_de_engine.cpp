#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "devolve/de_engine.hpp"
#include "devolve/random.hpp"

using namespace devolve;
using boost::multiprecision::cpp_int;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

Network mlp(std::uint64_t seed, std::size_t in = 20, std::size_t hidden = 12, std::size_t out = 5) {
  Network net({in});
  net.add_dense(hidden).add_relu().add_dense(out);
  net.initialize(seed);
  Rng rng(seed + 99);
  for (auto& l : net.layers())
    if (l.has_params())
      for (double& b : l.params[1].values()) b = 0.1 * rng.normal();
  return net;
}

Network conv_net(std::uint64_t seed, Padding pad, std::size_t stride) {
  Network net({7, 7, 2});
  net.add_conv2d(3, 3, 4, stride, pad).add_leaky_relu(0.1).add_conv2d(2, 2, 3, 1, Padding::Same).add_relu().add_flatten().add_dense(4);
  net.initialize(seed);
  Rng rng(seed + 5);
  for (auto& l : net.layers())
    if (l.has_params())
      for (double& b : l.params[1].values()) b = 0.1 * rng.normal();
  return net;
}

DEConfig small_config() {
  DEConfig cfg;
  cfg.trials_per_cycle = 16;
  cfg.step_fraction = 0.05;
  cfg.target_sparsity = 0.6;
  cfg.master_seed = 77;
  return cfg;
}

}  // namespace

TEST_CASE("nominal candidate size") {
  CHECK(nominal_candidate_size(100, 0.05) == 5);
  CHECK(nominal_candidate_size(101, 0.05) == 6);
  CHECK(nominal_candidate_size(1000, 0.01) == 10);
  CHECK(nominal_candidate_size(3, 0.05) == 1);
  CHECK(nominal_candidate_size(100, 1.0) == 100);
}

TEST_CASE("candidates for a 100-weight layer have 5 sorted unique indices") {
  Network net({10});
  net.add_dense(10);
  DEConfig cfg;
  const auto cands = propose_candidates(net, 0, cfg, 0);
  CHECK(cands.size() == 120);
  for (const auto& c : cands) {
    CHECK(c.size() == 5);
    CHECK(std::is_sorted(c.indices.begin(), c.indices.end()));
    CHECK(std::adjacent_find(c.indices.begin(), c.indices.end()) == c.indices.end());
    CHECK(c.indices.back() < 100);
  }
  cfg.include_bias = true;
  CHECK(propose_candidate(net, 0, cfg, 0, 0).size() == 6);
}

TEST_CASE("candidates are reproducible per (seed, cycle, layer, trial)") {
  const Network net = mlp(1);
  DEConfig cfg = small_config();
  CHECK(propose_candidate(net, 0, cfg, 3, 7) == propose_candidate(net, 0, cfg, 3, 7));
  CHECK_FALSE(propose_candidate(net, 0, cfg, 3, 7) == propose_candidate(net, 0, cfg, 3, 8));
  CHECK_FALSE(propose_candidate(net, 0, cfg, 3, 7) == propose_candidate(net, 0, cfg, 4, 7));
  const auto all = propose_candidates(net, 0, cfg, 3);
  CHECK(all[7] == propose_candidate(net, 0, cfg, 3, 7));
  cfg.master_seed = 78;
  CHECK_FALSE(propose_candidate(net, 0, cfg, 3, 7) == all[7]);
}

TEST_CASE("candidate sampling is uniform over prunable positions") {
  Network net({10});
  net.add_dense(10);
  DEConfig cfg;
  cfg.trials_per_cycle = 4000;
  std::vector<int> hits(100, 0);
  for (const auto& c : propose_candidates(net, 0, cfg, 0))
    for (auto i : c.indices) ++hits[i];
  // 4000 * 5 draws over 100 positions: 200 expected, sd ~14.
  for (int h : hits) CHECK(std::abs(h - 200) < 70);
}

TEST_CASE("at 90% sparsity a candidate adds about a tenth of its size") {
  Network net({100});
  net.add_dense(20);
  SparsityMask mask(net);
  for (std::size_t i = 0; i < 2000; ++i)
    if (i % 10 != 0) mask.zero(0, i);
  DEConfig cfg;
  cfg.trials_per_cycle = 2000;
  double total = 0.0;
  for (const auto& c : propose_candidates(net, 0, cfg, 1)) total += static_cast<double>(new_zero_count(mask, c));
  const double mean = total / 2000;
  // Hypergeometric: mean 0.1 * 100 = 10, sd per draw ~2.9, sd of mean ~0.065.
  CHECK(mean == doctest::Approx(10.0).epsilon(0.03));
}

TEST_CASE("oversized steps and parameterless layers are rejected") {
  const Network net = mlp(1);
  DEConfig cfg;
  cfg.step_fraction = 1.5;
  CHECK_THROWS_AS(propose_candidate(net, 0, cfg, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.step_fraction = 0.05;
  CHECK_THROWS_AS(propose_candidate(net, 1, cfg, 0, 0), std::invalid_argument);
  cfg.trials_per_cycle = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("evaluating an empty candidate on the teacher itself gives zero") {
  const Network net = mlp(2);
  const Tensor probe = random_tensor({8, 20}, 3);
  const Tensor out = forward(net, probe);
  CHECK(evaluate_candidate(net, SparsityMask(net), CandidateSet{0, {}}, out, probe, {}) == 0.0);
  CHECK_THROWS_AS(evaluate_candidate(net, SparsityMask(net), CandidateSet{0, {}}, Tensor({8, 4}), probe, {}),
                  std::invalid_argument);
}

TEST_CASE("evaluation does not modify the student") {
  const Network net = mlp(2);
  const Network copy = net;
  const Tensor probe = random_tensor({8, 20}, 3);
  const Tensor out = forward(net, probe);
  const CandidateSet c{0, {1, 2, 3, 50}};
  const double d = evaluate_candidate(net, SparsityMask(net), c, out, probe, {});
  CHECK(d > 0.0);
  CHECK(net == copy);
  const TrialEvaluator ev(net, 0, probe, out, {});
  CHECK(ev.evaluate(c) == doctest::Approx(d).epsilon(1e-10));
  CHECK(net == copy);
}

TEST_CASE("fast trial evaluation matches a full forward pass") {
  const Tensor dense_probe = random_tensor({9, 20}, 4);
  const Tensor conv_probe = random_tensor({5, 7, 7, 2}, 4);
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    CAPTURE(seed);
    std::vector<std::pair<Network, const Tensor*>> cases;
    cases.emplace_back(mlp(seed), &dense_probe);
    cases.emplace_back(conv_net(seed, Padding::Valid, 1), &conv_probe);
    cases.emplace_back(conv_net(seed, Padding::Same, 2), &conv_probe);
    cases.emplace_back(conv_net(seed, Padding::Same, 1), &conv_probe);
    for (auto& [net, probe] : cases) {
      const Tensor teacher_out = forward(net, *probe);
      SparsityMask mask(net);
      Rng rng(seed);
      for (std::size_t l : net.parametric_layers())
        for (int i = 0; i < 5; ++i) mask.zero(l, rng.below(mask.layer_size(l)));
      Network student = apply_mask(net, mask);
      for (std::size_t l : net.parametric_layers()) {
        DEConfig cfg = small_config();
        cfg.include_bias = true;
        cfg.step_fraction = 0.2;
        cfg.master_seed = seed;
        const TrialEvaluator ev(student, l, *probe, teacher_out, {});
        CHECK(ev.base_divergence() == doctest::Approx(evaluate_candidate(student, mask, {l, {}}, teacher_out, *probe, {})).epsilon(1e-12));
        for (const auto& c : propose_candidates(student, l, cfg, 0)) {
          const double ref = evaluate_candidate(student, mask, c, teacher_out, *probe, {});
          CHECK(std::abs(ev.evaluate(c) - ref) <= 1e-10 * std::max(1.0, ref));
        }
      }
    }
  }
}

TEST_CASE("parallel evaluation is bit-identical to sequential") {
  const Network net = mlp(3, 40, 30, 6);
  const Tensor probe = random_tensor({32, 40}, 5);
  const Tensor out = forward(mlp(4, 40, 30, 6), probe);
  DEConfig cfg = small_config();
  cfg.trials_per_cycle = 37;
  const auto cands = propose_candidates(net, 0, cfg, 2);
  const TrialEvaluator ev(net, 0, probe, out, {});
  const auto one = ev.evaluate_all(cands, 1);
  for (std::size_t w : {2, 3, 8, 64}) CHECK(ev.evaluate_all(cands, w) == one);
}

TEST_CASE("selection picks the argmin with lowest-index ties") {
  const Network net = mlp(1);
  const SparsityMask mask(net);
  const std::vector<CandidateSet> cands{{0, {1}}, {0, {2}}, {0, {3}}};
  const std::vector<double> d1{0.3, 0.1, 0.2};
  Commit c = select_and_commit(mask, cands, d1);
  CHECK(c.record.best_index == 1);
  CHECK(c.candidate == cands[1]);
  CHECK(c.mask.is_zeroed(0, 2));
  CHECK(c.mask.zeroed_total() == 1);
  CHECK(c.record.new_zeros == 1);
  const std::vector<double> tie{0.2, 0.2};
  CHECK(select_and_commit(mask, std::span(cands).first(2), tie).record.best_index == 0);
}

TEST_CASE("trial statistics use the population deviation") {
  const std::vector<double> d{1, 2, 3};
  const CycleRecord r = summarize_trials(d);
  CHECK(r.mean == 2.0);
  CHECK(r.std == doctest::Approx(std::sqrt(2.0 / 3)).epsilon(1e-15));
  CHECK(r.best_divergence == 1.0);
  CHECK(r.trial_divergences == d);
}

TEST_CASE("retraining") {
  const Network teacher = mlp(6, 20, 16, 5);
  const Tensor probe = random_tensor({64, 20}, 7);
  const Tensor out = forward(teacher, probe);
  DEConfig cfg = small_config();

  SUBCASE("zero epochs leaves the network unchanged") {
    cfg.retrain_epochs = 0;
    const RetrainResult r = retrain(teacher, SparsityMask(teacher), out, probe, cfg, {});
    CHECK(r.student == teacher);
    CHECK(r.divergence == 0.0);
  }
  SUBCASE("an exact student stays exact") {
    cfg.retrain_epochs = 3;
    const RetrainResult r = retrain(teacher, SparsityMask(teacher), out, probe, cfg, {});
    CHECK(r.divergence == 0.0);
  }
  SUBCASE("an 80% masked student recovers and keeps zeros") {
    SparsityMask mask(teacher);
    Rng rng(1);
    while (prunable_sparsity(mask, teacher, 0, false) < 0.8) mask.zero(0, rng.below(320));
    const Network student = apply_mask(teacher, mask);
    cfg.retrain_epochs = 20;
    cfg.retrain_lr = 0.05;
    const RetrainResult r = retrain(student, mask, out, probe, cfg, {});
    CHECK(r.divergence < r.divergence_before);
    CHECK(r.divergence == doctest::Approx(divergence(forward(r.student, probe), out, {})).epsilon(1e-12));
    CHECK(apply_mask(r.student, mask) == r.student);
  }
}

TEST_CASE("a zero target runs no cycles") {
  const Network teacher = mlp(8);
  DEConfig cfg = small_config();
  cfg.target_sparsity = 0.0;
  const RunResult r = run(teacher, random_tensor({16, 20}, 1), cfg, {});
  CHECK(r.history.empty());
  CHECK(r.student == teacher);
  CHECK(r.status == RunStatus::TargetReached);
}

TEST_CASE("a run satisfies the cycle invariants") {
  // Layer 2 needs enough weights that a candidate rarely lands entirely on
  // zeroed positions, or the run saturates before the target.
  const Network teacher = mlp(9, 20, 24, 5);
  const Tensor probe = random_tensor({32, 20}, 2);
  DEConfig cfg = small_config();
  cfg.retrain_epochs = 1;
  const RunResult r = run(teacher, probe, cfg, {});
  CHECK(r.status == RunStatus::TargetReached);
  REQUIRE_FALSE(r.history.empty());
  std::map<std::size_t, double> last;
  for (const auto& rec : r.history) {
    CHECK(rec.trial_divergences.size() == cfg.trials_per_cycle);
    CHECK(rec.best_divergence == *std::min_element(rec.trial_divergences.begin(), rec.trial_divergences.end()));
    const CycleRecord again = summarize_trials(rec.trial_divergences);
    CHECK(std::abs(again.mean - rec.mean) <= 1e-12);
    CHECK(std::abs(again.std - rec.std) <= 1e-12);
    CHECK(rec.best_divergence <= rec.mean);
    CHECK(rec.sparsity_after >= rec.sparsity_before);
    CHECK(rec.sparsity_before >= last[rec.layer]);
    last[rec.layer] = rec.sparsity_after;
    CHECK(rec.new_zeros <= nominal_candidate_size(prunable_count(teacher, rec.layer, false), cfg.step_fraction));
    CHECK(rec.committed.size() == nominal_candidate_size(prunable_count(teacher, rec.layer, false), cfg.step_fraction));
  }
  for (std::size_t l : {0, 2}) CHECK(prunable_sparsity(r.mask, r.student, l, false) >= 0.6);
  CHECK(apply_mask(r.student, r.mask) == r.student);
  // layers alternate round-robin while both are active
  CHECK(r.history[0].layer == 0);
  CHECK(r.history[1].layer == 2);
}

TEST_CASE("runs replay exactly, with any worker count") {
  const Network teacher = mlp(10);
  const Tensor probe = random_tensor({24, 20}, 3);
  DEConfig cfg = small_config();
  cfg.retrain_epochs = 1;
  cfg.scope = {0};
  const RunResult a = run(teacher, probe, cfg, {});
  const RunResult b = run(teacher, probe, cfg, {});
  cfg.workers = 5;
  const RunResult c = run(teacher, probe, cfg, {});
  CHECK(a.history == b.history);
  CHECK(a.history == c.history);
  CHECK(a.student == c.student);
  CHECK(history_csv(a.history) == history_csv(c.history));
  CHECK(trials_csv(a.history) == trials_csv(c.history));
  for (const auto& rec : a.history) CHECK(rec.layer == 0);
}

TEST_CASE("stop conditions") {
  const Network teacher = mlp(11);
  const Tensor probe = random_tensor({16, 20}, 4);
  DEConfig cfg = small_config();

  SUBCASE("divergence budget reverts the violating sweep") {
    cfg.scope = {0};
    cfg.target_sparsity = 0.9;
    const RunResult free_run = run(teacher, probe, cfg, {});
    REQUIRE(free_run.history.size() > 4);
    const double budget = free_run.history[3].retrain_divergence;
    cfg.divergence_budget = budget;
    const RunResult r = run(teacher, probe, cfg, {});
    CHECK(r.status == RunStatus::BudgetExceeded);
    for (const auto& rec : r.history) CHECK(rec.retrain_divergence <= budget);
    CHECK(r.history.size() >= 4);
    CHECK(r.final_divergence <= budget);
    CHECK(std::equal(r.history.begin(), r.history.end(), free_run.history.begin()));
  }
  SUBCASE("cycle limit") {
    cfg.max_cycles = 3;
    const RunResult r = run(teacher, probe, cfg, {});
    CHECK(r.status == RunStatus::CycleLimit);
    CHECK(r.history.size() == 3);
  }
  SUBCASE("saturation when commits stop adding zeros") {
    cfg.scope = {2};
    cfg.target_sparsity = 1.0;
    cfg.stall_limit = 1;
    cfg.trials_per_cycle = 1;
    const RunResult r = run(teacher, probe, cfg, {});
    CHECK(r.status == RunStatus::Saturated);
    CHECK(r.history.back().new_zeros == 0);
    CHECK(prunable_sparsity(r.mask, r.student, 2, false) < 1.0);
  }
}

TEST_CASE("binomial coefficients") {
  CHECK(combinations_count(4, 2) == 6);
  CHECK(combinations_count(9, 0) == 1);
  CHECK(combinations_count(0, 0) == 1);
  CHECK(combinations_count(52, 5) == 2598960);
  CHECK_THROWS_AS(combinations_count(3, 4), std::invalid_argument);
  // Pascal's rule oracle.
  std::vector<cpp_int> row{1};
  for (std::uint64_t n = 1; n <= 120; ++n) {
    std::vector<cpp_int> next(n + 1, 1);
    for (std::uint64_t k = 1; k < n; ++k) next[k] = row[k - 1] + row[k];
    row = std::move(next);
  }
  for (std::uint64_t k = 0; k <= 120; ++k) CHECK(combinations_count(120, k) == row[k]);
  const std::string big = combinations_count(1000, 500).str();
  CHECK(big.size() == 300);
  CHECK(big.substr(0, 6) == "270288");
  const double log10c = (std::lgamma(1001.0) - 2 * std::lgamma(501.0)) / std::log(10.0);
  CHECK(log10c == doctest::Approx(299.0 + std::log10(2.70288)).epsilon(1e-6));
}

TEST_CASE("histograms") {
  const std::vector<double> constant(10, 0.5);
  const Histogram h = histogram(constant, 8);
  CHECK(h.total() == 10);
  CHECK(std::count_if(h.counts.begin(), h.counts.end(), [](std::size_t c) { return c > 0; }) == 1);
  CHECK_THROWS_AS(histogram(constant, 1), std::invalid_argument);
  CHECK_THROWS_AS(histogram(std::vector<double>{}, 4), std::invalid_argument);

  const std::vector<double> v{-1, -0.5, 0, 0.1, 0.2, 1};
  const Histogram g = histogram(v, 4);
  CHECK(g.total() == 6);
  CHECK(g.lo == -1);
  CHECK(g.hi == 1);
  CHECK(g.counts == std::vector<std::size_t>{1, 1, 3, 1});
  CHECK(g.mode() == 2);
  CHECK(g.bin_of(1.0) == 3);

  const Network net = mlp(12);
  SparsityMask mask(net);
  for (std::size_t i = 0; i < 100; ++i) mask.zero(0, i);
  const Histogram w = weight_histogram(apply_mask(net, mask), mask, 0, 16);
  CHECK(w.total() == 140);
  CHECK(surviving_weights(net, mask, std::nullopt).size() == 140 + 60);
  CHECK_THROWS(weight_histogram(net, SparsityMask::full(net), 0, 16));
}

TEST_CASE("random baseline masks zero exactly k prunable positions") {
  const Network net = mlp(13);
  const SparsityMask m = random_mask(net, 0, 77, false, 5);
  CHECK(m.zeroed(0) == 77);
  CHECK(prunable_sparsity(m, net, 0, false) == doctest::Approx(77.0 / 240));
  for (std::size_t i = 240; i < 252; ++i) CHECK_FALSE(m.is_zeroed(0, i));
  CHECK(random_mask(net, 0, 77, false, 5) == m);
  CHECK_FALSE(random_mask(net, 0, 77, false, 6) == m);
  CHECK_THROWS(random_mask(net, 0, 241, false, 1));
}

TEST_CASE("history csv round trips") {
  const Network teacher = mlp(14);
  DEConfig cfg = small_config();
  cfg.target_sparsity = 0.2;
  const RunResult r = run(teacher, random_tensor({8, 20}, 6), cfg, {});
  const std::string csv = history_csv(r.history);
  CHECK(csv.rfind("cycle,layer,sparsity_before,sparsity_after,trials,mean,std,best,committed_size,retrain_divergence\n", 0) == 0);
  const auto rows = parse_history_csv(csv);
  REQUIRE(rows.size() == r.history.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].cycle == r.history[i].cycle);
    CHECK(rows[i].layer == r.history[i].layer);
    CHECK(rows[i].mean == r.history[i].mean);
    CHECK(rows[i].std == r.history[i].std);
    CHECK(rows[i].best == r.history[i].best_divergence);
    CHECK(rows[i].trials == cfg.trials_per_cycle);
    CHECK(rows[i].sparsity_after == r.history[i].sparsity_after);
  }
  const std::string trials = trials_csv(r.history);
  CHECK(std::count(trials.begin(), trials.end(), '\n') == static_cast<long>(1 + r.history.size() * cfg.trials_per_cycle));
  CHECK_THROWS(parse_history_csv("cycle,layer\n1,2\n"));
}
