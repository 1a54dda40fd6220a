#include "stp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "stp/rng.hpp"

namespace stp {

namespace {

double evaluate(const LossClosure& loss) {
  Tape tape;
  tape.set_recording(false);
  Tensor l = loss(tape);
  if (l.numel() != 1) throw ShapeError("finite_diff_check: loss is not scalar " + shape_str(l.shape()));
  return l.item();
}

}  // namespace

CheckReport finite_diff_check(const LossClosure& loss, std::span<Parameter* const> params,
                              const GradCheckOptions& opts) {
  CheckReport report;
  report.tolerance = opts.tolerance;

  const double base = evaluate(loss);
  const double again = evaluate(loss);
  if (std::memcmp(&base, &again, sizeof(double)) != 0) {
    throw NonDeterministicError("finite_diff_check: two evaluations at the same point differ (" +
                                std::to_string(base) + " vs " + std::to_string(again) + ")");
  }

  std::vector<Parameter*> live;
  for (auto* p : params) {
    if (!p->frozen) live.push_back(p);
  }
  if (live.empty()) return report;

  Tape tape;
  Tensor l = loss(tape);
  GradientMap grads;
  if (l.node()) grads = backward(tape, *l.node()).grads;

  // (param slot, coordinate) pairs to probe.
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  std::size_t total = 0;
  for (auto* p : live) total += p->value.numel();
  if (opts.samples == 0 || opts.samples >= total) {
    for (std::size_t s = 0; s < live.size(); ++s) {
      for (std::size_t i = 0; i < live[s]->value.numel(); ++i) picks.emplace_back(s, i);
    }
  } else {
    Rng rng(opts.seed);
    std::unordered_set<std::size_t> seen;
    while (picks.size() < opts.samples) {
      std::size_t flat = rng.below(total);
      if (!seen.insert(flat).second) continue;
      std::size_t s = 0;
      while (flat >= live[s]->value.numel()) flat -= live[s++]->value.numel();
      picks.emplace_back(s, flat);
    }
  }

  std::vector<ParamCheck> per(live.size());
  for (std::size_t s = 0; s < live.size(); ++s) per[s].name = live[s]->name;

  for (auto [s, i] : picks) {
    Parameter& p = *live[s];
    const double orig = p.value[i];
    p.value.mutable_data()[i] = orig + opts.step;
    const double up = evaluate(loss);
    p.value.mutable_data()[i] = orig - opts.step;
    const double down = evaluate(loss);
    p.value.mutable_data()[i] = orig;

    CoordCheck c;
    c.param = p.name;
    c.index = i;
    auto it = grads.find(p.name);
    c.analytic = it == grads.end() ? 0.0 : it->second[i];
    c.numeric = (up - down) / (2.0 * opts.step);
    const double denom = std::max({std::abs(c.analytic), std::abs(c.numeric), opts.denominator_floor});
    c.rel_error = std::abs(c.analytic - c.numeric) / denom;
    per[s].coords++;
    per[s].max_rel_error = std::max(per[s].max_rel_error, c.rel_error);
    report.max_rel_error = std::max(report.max_rel_error, c.rel_error);
    report.coords.push_back(c);
  }
  for (auto& pc : per) {
    if (pc.coords) report.params.push_back(pc);
  }
  report.passed = report.max_rel_error <= opts.tolerance;
  return report;
}

}  // namespace stp
