#include "devolve/de_engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_set>

#include "devolve/random.hpp"

namespace devolve {

// ---------------------------------------------------------------------------
// Configuration

void DEConfig::validate() const {
  if (trials_per_cycle < 1) throw std::invalid_argument("trials_per_cycle must be at least 1");
  if (!(step_fraction > 0.0 && step_fraction <= 1.0)) throw std::invalid_argument("step_fraction must lie in (0,1]");
  auto check_target = [](double t) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("target sparsity must lie in [0,1]");
  };
  check_target(target_sparsity);
  for (const auto& [layer, t] : layer_targets) check_target(t);
  if (divergence_budget && !(*divergence_budget >= 0.0)) throw std::invalid_argument("divergence_budget must be nonnegative");
  if (retrain_epochs > 0 && !(retrain_lr > 0.0)) throw std::invalid_argument("retrain_lr must be positive");
  if (retrain_batch == 0) throw std::invalid_argument("retrain_batch must be positive");
  if (workers == 0) throw std::invalid_argument("workers must be at least 1");
  if (stall_limit == 0) throw std::invalid_argument("stall_limit must be at least 1");
}

double DEConfig::target_for(std::size_t layer) const {
  auto it = layer_targets.find(layer);
  return it == layer_targets.end() ? target_sparsity : it->second;
}

std::vector<std::size_t> DEConfig::scope_for(const Network& net) const {
  if (scope.empty()) return net.parametric_layers();
  for (std::size_t l : scope) {
    if (l >= net.layer_count() || !net.layers()[l].has_params()) {
      throw std::invalid_argument("layer " + std::to_string(l) + " in scope has no parameters");
    }
  }
  return scope;
}

// ---------------------------------------------------------------------------
// Stage 1: candidates

std::size_t nominal_candidate_size(std::size_t prunable, double step_fraction) {
  const double raw = step_fraction * static_cast<double>(prunable);
  // Absorb representation error such as 0.05 * 100 landing a hair above 5.
  const auto m = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::max<std::size_t>(m, 1);
}

namespace {

// Floyd's algorithm: `count` distinct values from [0, n), returned sorted.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count, Rng& rng) {
  std::unordered_set<std::size_t> chosen;
  chosen.reserve(count * 2);
  std::vector<std::size_t> out;
  out.reserve(count);
  for (std::size_t j = n - count; j < n; ++j) {
    const std::size_t t = rng.below(j + 1);
    const std::size_t pick = chosen.insert(t).second ? t : j;
    if (pick == j) chosen.insert(j);
    out.push_back(pick);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

CandidateSet propose_candidate(const Network& net, std::size_t layer, const DEConfig& cfg, std::size_t cycle,
                               std::size_t trial) {
  const std::size_t prunable = prunable_count(net, layer, cfg.include_bias);
  if (prunable == 0) throw std::invalid_argument("layer " + std::to_string(layer) + " has no prunable parameters");
  const std::size_t m = nominal_candidate_size(prunable, cfg.step_fraction);
  if (m > prunable) throw std::invalid_argument("candidate step larger than layer " + std::to_string(layer));
  Rng rng(stream_seed(cfg.master_seed, {cycle, layer, trial}));
  return CandidateSet{layer, sample_without_replacement(prunable, m, rng)};
}

std::vector<CandidateSet> propose_candidates(const Network& net, std::size_t layer, const DEConfig& cfg,
                                             std::size_t cycle) {
  std::vector<CandidateSet> out;
  out.reserve(cfg.trials_per_cycle);
  for (std::size_t t = 0; t < cfg.trials_per_cycle; ++t) out.push_back(propose_candidate(net, layer, cfg, cycle, t));
  return out;
}

// ---------------------------------------------------------------------------
// Stage 2: evaluation

double evaluate_candidate(const Network& student, const SparsityMask& mask, const CandidateSet& cand,
                          const Tensor& teacher_outputs, const Tensor& probe_inputs, const DivergenceSpec& spec) {
  const Network scratch = apply_mask(student, merge(mask, cand));
  return divergence(forward(scratch, probe_inputs), teacher_outputs, spec);
}

TrialEvaluator::TrialEvaluator(const Network& student, std::size_t layer, const Tensor& probe_inputs,
                               const Tensor& teacher_outputs, const DivergenceSpec& spec)
    : net_(student), layer_(layer), teacher_(teacher_outputs), spec_(spec) {
  const Layer& l = student.layers().at(layer);
  if (l.kind != LayerKind::Dense && l.kind != LayerKind::Conv2D) {
    throw std::invalid_argument("trial evaluation needs a dense or conv2d layer, got " + l.name(layer));
  }
  ForwardTrace trace = forward_trace(student, probe_inputs);
  const Tensor& last = trace.activations.back();
  base_divergence_ = divergence(last.reshaped({last.dim(0), last.row_size()}), teacher_outputs, spec);
  layer_in_ = std::move(trace.activations[layer]);
  layer_out_ = std::move(trace.activations[layer + 1]);
}

double TrialEvaluator::evaluate(const CandidateSet& cand) const {
  const Layer& l = net_.layers()[layer_];
  if (cand.layer != layer_) throw std::invalid_argument("candidate addresses a different layer");
  Tensor z = layer_out_;
  const std::size_t n = z.dim(0);
  const double* x = layer_in_.data().data();
  double* y = z.data().data();
  for (std::size_t idx : cand.indices) {
    const ParamLocation at = locate(l, idx);
    const double w = l.params[at.tensor][at.offset];
    if (w == 0.0) continue;
    if (l.kind == LayerKind::Dense) {
      const std::size_t ni = l.input_shape[0], no = l.units;
      if (at.tensor == 0) {
        const std::size_t i = at.offset / no, o = at.offset % no;
        for (std::size_t s = 0; s < n; ++s) y[s * no + o] -= x[s * ni + i] * w;
      } else {
        for (std::size_t s = 0; s < n; ++s) y[s * no + at.offset] -= w;
      }
      continue;
    }
    // Conv2D, NHWC with kernel [kh, kw, cin, cout].
    const std::size_t in_h = l.input_shape[0], in_w = l.input_shape[1], cin = l.input_shape[2];
    const std::size_t out_h = l.output_shape[0], out_w = l.output_shape[1], cout = l.filters;
    if (at.tensor == 1) {
      for (std::size_t p = 0; p < n * out_h * out_w; ++p) y[p * cout + at.offset] -= w;
      continue;
    }
    const std::size_t co = at.offset % cout;
    const std::size_t ci = (at.offset / cout) % cin;
    const std::size_t kx = (at.offset / (cout * cin)) % l.kernel_w;
    const std::size_t ky = at.offset / (cout * cin * l.kernel_w);
    std::size_t pad_top = 0, pad_left = 0;
    if (l.padding == Padding::Same) {
      const std::size_t need_h = (out_h - 1) * l.stride + l.kernel_h;
      const std::size_t need_w = (out_w - 1) * l.stride + l.kernel_w;
      pad_top = need_h > in_h ? (need_h - in_h) / 2 : 0;
      pad_left = need_w > in_w ? (need_w - in_w) / 2 : 0;
    }
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * l.stride + ky) - static_cast<std::ptrdiff_t>(pad_top);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_h)) continue;
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const std::ptrdiff_t ix =
              static_cast<std::ptrdiff_t>(ox * l.stride + kx) - static_cast<std::ptrdiff_t>(pad_left);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in_w)) continue;
          const double xv = x[((s * in_h + static_cast<std::size_t>(iy)) * in_w + static_cast<std::size_t>(ix)) * cin + ci];
          y[((s * out_h + oy) * out_w + ox) * cout + co] -= xv * w;
        }
      }
  }
  return divergence(forward_from(net_, layer_ + 1, z), teacher_, spec_);
}

std::vector<double> TrialEvaluator::evaluate_all(std::span<const CandidateSet> cands, std::size_t workers) const {
  std::vector<double> out(cands.size());
  workers = std::max<std::size_t>(1, std::min(workers, cands.size()));
  if (workers == 1) {
    for (std::size_t t = 0; t < cands.size(); ++t) out[t] = evaluate(cands[t]);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t t = w; t < cands.size(); t += workers) out[t] = evaluate(cands[t]);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---------------------------------------------------------------------------
// Stage 2: selection

CycleRecord summarize_trials(std::span<const double> divergences) {
  if (divergences.empty()) throw std::invalid_argument("no trials to summarize");
  CycleRecord r;
  r.trial_divergences.assign(divergences.begin(), divergences.end());
  const double n = static_cast<double>(divergences.size());
  r.mean = std::accumulate(divergences.begin(), divergences.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : divergences) ss += (d - r.mean) * (d - r.mean);
  r.std = std::sqrt(ss / n);
  r.best_index = static_cast<std::size_t>(std::min_element(divergences.begin(), divergences.end()) - divergences.begin());
  r.best_divergence = divergences[r.best_index];
  return r;
}

Commit select_and_commit(const SparsityMask& mask, std::span<const CandidateSet> candidates,
                         std::span<const double> divergences) {
  if (candidates.size() != divergences.size()) throw std::invalid_argument("candidate and divergence counts differ");
  Commit c;
  c.record = summarize_trials(divergences);
  c.candidate = candidates[c.record.best_index];
  c.record.committed = c.candidate;
  c.record.new_zeros = new_zero_count(mask, c.candidate);
  c.mask = merge(mask, c.candidate);
  return c;
}

// ---------------------------------------------------------------------------
// Stage 3: retraining

RetrainResult retrain(const Network& student, const SparsityMask& mask, const Tensor& teacher_outputs,
                      const Tensor& probe_inputs, const DEConfig& cfg, const DivergenceSpec& spec, std::size_t cycle) {
  RetrainResult r{apply_mask(student, mask), 0.0, 0.0};
  r.divergence_before = divergence(forward(r.student, probe_inputs), teacher_outputs, spec);
  r.divergence = r.divergence_before;
  if (cfg.retrain_epochs == 0) return r;

  Network net = r.student;
  const std::size_t n = probe_inputs.dim(0);
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < cfg.retrain_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(stream_seed(cfg.master_seed, {0x2e7a1, cycle, epoch}));
    for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
    for (std::size_t b = 0; b < n; b += cfg.retrain_batch) {
      std::span<const std::size_t> rows(order.data() + b, std::min(n, b + cfg.retrain_batch) - b);
      const ForwardTrace trace = forward_trace(net, gather_rows(probe_inputs, rows));
      const Tensor& last = trace.activations.back();
      const Tensor out = last.reshaped({last.dim(0), last.row_size()});
      const Tensor grad = divergence_gradient(out, gather_rows(teacher_outputs, rows), spec);
      sgd_step(net, backward_from_output(net, trace, grad), cfg.retrain_lr, &mask);
    }
    const double d = divergence(forward(net, probe_inputs), teacher_outputs, spec);
    if (d < r.divergence) {
      r.divergence = d;
      r.student = net;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Full run

std::string to_string(RunStatus status) {
  switch (status) {
    case RunStatus::TargetReached: return "target_reached";
    case RunStatus::BudgetExceeded: return "budget_exceeded";
    case RunStatus::Saturated: return "saturated";
    case RunStatus::CycleLimit: return "cycle_limit";
  }
  return "unknown";
}

RunResult run(const Network& teacher, const Tensor& probe_inputs, const DEConfig& cfg, const DivergenceSpec& spec) {
  cfg.validate();
  if (probe_inputs.rank() == 0 || probe_inputs.dim(0) == 0) throw std::invalid_argument("probe set is empty");
  const Tensor teacher_out = forward(teacher, probe_inputs);
  spec.validate(teacher_out.dim(1));
  const std::vector<std::size_t> scope = cfg.scope_for(teacher);

  RunResult result{teacher, SparsityMask(teacher), {}, RunStatus::TargetReached, 0.0};
  Network& student = result.student;
  SparsityMask& mask = result.mask;
  std::vector<std::size_t> stalls(teacher.layer_count(), 0);
  std::vector<bool> saturated(teacher.layer_count(), false);

  auto layer_done = [&](std::size_t l) {
    return prunable_sparsity(mask, student, l, cfg.include_bias) >= cfg.target_for(l) - 1e-12;
  };

  std::size_t cycle = 0;
  bool stop = false;
  while (!stop) {
    std::vector<std::size_t> active;
    for (std::size_t l : scope)
      if (!layer_done(l) && !saturated[l]) active.push_back(l);
    if (active.empty()) {
      const bool any_saturated = std::any_of(scope.begin(), scope.end(), [&](std::size_t l) { return saturated[l]; });
      result.status = any_saturated ? RunStatus::Saturated : RunStatus::TargetReached;
      break;
    }

    const Network sweep_student = student;
    const SparsityMask sweep_mask = mask;
    const std::size_t sweep_first = result.history.size();

    for (std::size_t l : active) {
      if (cycle >= cfg.max_cycles) {
        result.status = RunStatus::CycleLimit;
        stop = true;
        break;
      }
      const double before = prunable_sparsity(mask, student, l, cfg.include_bias);
      const auto cands = propose_candidates(student, l, cfg, cycle);
      const TrialEvaluator evaluator(student, l, probe_inputs, teacher_out, spec);
      const auto divs = evaluator.evaluate_all(cands, cfg.workers);
      Commit commit = select_and_commit(mask, cands, divs);
      mask = std::move(commit.mask);
      apply_mask_in_place(student, mask);

      CycleRecord rec = std::move(commit.record);
      rec.cycle = cycle;
      rec.layer = l;
      rec.sparsity_before = before;
      rec.sparsity_after = prunable_sparsity(mask, student, l, cfg.include_bias);
      rec.retrain_divergence = divergence(forward(student, probe_inputs), teacher_out, spec);
      stalls[l] = rec.new_zeros == 0 ? stalls[l] + 1 : 0;
      if (stalls[l] >= cfg.stall_limit) saturated[l] = true;
      result.history.push_back(std::move(rec));
      ++cycle;
    }
    if (result.history.size() == sweep_first) break;

    if (cfg.retrain_epochs > 0) {
      RetrainResult r = retrain(student, mask, teacher_out, probe_inputs, cfg, spec, cycle - 1);
      student = std::move(r.student);
      result.history.back().retrain_divergence = r.divergence;
    }
    if (cfg.divergence_budget && result.history.back().retrain_divergence > *cfg.divergence_budget) {
      student = sweep_student;
      mask = sweep_mask;
      result.history.resize(sweep_first);
      result.status = RunStatus::BudgetExceeded;
      break;
    }
  }
  result.final_divergence = divergence(forward(student, probe_inputs), teacher_out, spec);
  return result;
}

// ---------------------------------------------------------------------------
// Reporting helpers

boost::multiprecision::cpp_int combinations_count(std::uint64_t n, std::uint64_t k) {
  if (k > n) throw std::invalid_argument("combinations_count: k > n");
  k = std::min(k, n - k);
  boost::multiprecision::cpp_int c = 1;
  // c_i = c_{i-1} * (n - k + i) / i stays integral at every step.
  for (std::uint64_t i = 1; i <= k; ++i) {
    c *= n - k + i;
    c /= i;
  }
  return c;
}

std::size_t Histogram::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

std::size_t Histogram::bin_of(double v) const {
  if (hi <= lo) return 0;
  const double f = (v - lo) / (hi - lo) * static_cast<double>(counts.size());
  if (f <= 0.0) return 0;
  return std::min(counts.size() - 1, static_cast<std::size_t>(f));
}

std::size_t Histogram::mode() const {
  return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

bool Histogram::unimodal() const {
  const std::size_t m = mode();
  for (std::size_t i = 1; i <= m; ++i)
    if (counts[i] < counts[i - 1]) return false;
  for (std::size_t i = m + 1; i < counts.size(); ++i)
    if (counts[i] > counts[i - 1]) return false;
  return true;
}

Histogram histogram(std::span<const double> values, std::size_t bins) {
  if (bins < 2) throw std::invalid_argument("histogram needs at least 2 bins");
  if (values.empty()) throw std::invalid_argument("histogram: no surviving weights");
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  Histogram h{*mn, *mx, std::vector<std::size_t>(bins, 0)};
  for (double v : values) ++h.counts[h.bin_of(v)];
  return h;
}

std::vector<double> surviving_weights(const Network& net, const SparsityMask& mask, std::optional<std::size_t> layer) {
  mask.check_matches(net);
  std::vector<std::size_t> layers = layer ? std::vector<std::size_t>{*layer} : net.parametric_layers();
  std::vector<double> out;
  for (std::size_t l : layers) {
    const auto& params = net.layers().at(l).params;
    if (params.empty()) throw std::invalid_argument("layer " + std::to_string(l) + " has no parameters");
    const auto& bits = mask.bits(l, 0);
    for (std::size_t i = 0; i < params[0].size(); ++i)
      if (!bits[i]) out.push_back(params[0][i]);
  }
  return out;
}

Histogram weight_histogram(const Network& net, const SparsityMask& mask, std::optional<std::size_t> layer,
                           std::size_t bins) {
  return histogram(surviving_weights(net, mask, layer), bins);
}

SparsityMask random_mask(const Network& net, std::size_t layer, std::size_t zeros, bool include_bias,
                         std::uint64_t seed) {
  const std::size_t prunable = prunable_count(net, layer, include_bias);
  if (zeros > prunable) throw std::invalid_argument("random_mask: more zeros than prunable positions");
  Rng rng(stream_seed(seed, {0xba5e, layer}));
  CandidateSet c{layer, sample_without_replacement(prunable, zeros, rng)};
  return merge(SparsityMask(net), c);
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string history_csv(std::span<const CycleRecord> history) {
  std::string out = "cycle,layer,sparsity_before,sparsity_after,trials,mean,std,best,committed_size,retrain_divergence\n";
  for (const auto& r : history) {
    out += std::to_string(r.cycle) + "," + std::to_string(r.layer) + "," + fmt_double(r.sparsity_before) + "," +
           fmt_double(r.sparsity_after) + "," + std::to_string(r.trial_divergences.size()) + "," + fmt_double(r.mean) +
           "," + fmt_double(r.std) + "," + fmt_double(r.best_divergence) + "," + std::to_string(r.new_zeros) + "," +
           fmt_double(r.retrain_divergence) + "\n";
  }
  return out;
}

std::string trials_csv(std::span<const CycleRecord> history) {
  std::string out = "cycle,trial,divergence\n";
  for (const auto& r : history)
    for (std::size_t t = 0; t < r.trial_divergences.size(); ++t)
      out += std::to_string(r.cycle) + "," + std::to_string(t) + "," + fmt_double(r.trial_divergences[t]) + "\n";
  return out;
}

std::vector<HistoryRow> parse_history_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("cycle,layer,sparsity_before", 0) != 0) {
    throw std::invalid_argument("history CSV: missing header");
  }
  std::vector<HistoryRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw std::invalid_argument("history CSV line " + std::to_string(lineno) + ": expected 10 fields");
    try {
      rows.push_back(HistoryRow{std::stoull(f[0]), std::stoull(f[1]), std::stod(f[2]), std::stod(f[3]),
                                std::stoull(f[4]), std::stod(f[5]), std::stod(f[6]), std::stod(f[7]),
                                std::stoull(f[8]), std::stod(f[9])});
    } catch (const std::logic_error&) {
      throw std::invalid_argument("history CSV line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

}  // namespace devolve
