// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/invariance.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include <boost/multiprecision/cpp_int.hpp>

#include "smn/model.hpp"
#include "smn/rng.hpp"
#include "smn/training.hpp"

namespace smn {

ConfigTransform ConfigTransform::inverse() const {
  if (kind == TransformKind::translate) return translate(-value);
  return {kind, 1.0 / value};
}

std::string ConfigTransform::describe() const {
  std::ostringstream os;
  switch (kind) {
    case TransformKind::translate: os << "translate(" << value << ")"; break;
    case TransformKind::scale: os << "scale(" << value << ")"; break;
    case TransformKind::scale_with_decay: os << "scale_with_decay(" << value << ")"; break;
  }
  return os.str();
}

AffineScoreMap score_map(const std::vector<ConfigTransform>& chain) {
  AffineScoreMap m;
  for (const auto& t : chain) {
    if (t.kind == TransformKind::translate) {
      m.add += t.value;
    } else {
      m.mult *= t.value;
      m.add *= t.value;
    }
  }
  return m;
}

TrainConfig translated_unchecked(const TrainConfig& config, double a) {
  TrainConfig out = config;
  out.score_init += a;
  out.threshold += a;
  return out;
}

TrainConfig equivalent_config(const TrainConfig& config, const ConfigTransform& t) {
  TrainConfig out = config;
  switch (t.kind) {
    case TransformKind::translate:
      if (config.weight_decay != 0.0) {
        throw ConfigError("translate is not mask-preserving with weight decay (weight_decay = " +
                          std::to_string(config.weight_decay) + "): decay pulls scores toward 0, not toward the "
                          "shifted threshold");
      }
      return translated_unchecked(config, t.value);
    case TransformKind::scale:
    case TransformKind::scale_with_decay:
      if (!(t.value > 0.0)) throw ConfigError("scale factor must be > 0");
      out.score_init *= t.value;
      out.threshold *= t.value;
      out.lr *= t.value;
      if (t.kind == TransformKind::scale_with_decay) out.weight_decay /= t.value;
      return out;
  }
  return out;
}

TrainConfig equivalent_config(const TrainConfig& config, const std::vector<ConfigTransform>& chain) {
  TrainConfig out = config;
  for (const auto& t : chain) out = equivalent_config(out, t);
  return out;
}

namespace {

using Q = boost::multiprecision::cpp_rational;

// The rational whose decimal expansion is the shortest round-trip form of x
// (0.9 -> 9/10), so config values mean what they print as.
Q decimal_rational(double x) {
  if (!std::isfinite(x)) throw std::invalid_argument("rational_oracle: non-finite config value");
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x, std::chars_format::scientific);
  const std::string s(buf, res.ptr);
  const auto e = s.find('e');
  std::string digits;
  bool negative = false;
  int frac = 0;
  bool after_point = false;
  for (std::size_t i = 0; i < e; ++i) {
    if (s[i] == '-') {
      negative = true;
    } else if (s[i] == '.') {
      after_point = true;
    } else {
      digits += s[i];
      frac += after_point;
    }
  }
  const int exp10 = std::stoi(s.substr(e + 1)) - frac;
  boost::multiprecision::cpp_int num(digits);
  boost::multiprecision::cpp_int scale = boost::multiprecision::pow(boost::multiprecision::cpp_int(10), std::abs(exp10));
  Q q = exp10 >= 0 ? Q(num * scale) : Q(num, scale);
  return negative ? -q : q;
}

std::size_t bits_of(const Q& q) {
  using boost::multiprecision::msb;
  // Concrete types: `auto` would bind expression templates to dead temporaries.
  const boost::multiprecision::cpp_int num = boost::multiprecision::abs(boost::multiprecision::numerator(q));
  const boost::multiprecision::cpp_int den = boost::multiprecision::denominator(q);
  const std::size_t nb = num == 0 ? 0 : msb(num) + 1;
  const std::size_t db = msb(den) + 1;
  return std::max(nb, db);
}

struct ToyData {
  std::vector<std::vector<Q>> x;  // samples x params
  std::vector<Q> theta;
  std::vector<Q> y;
};

ToyData make_toy(const ToyProblem& toy) {
  if (toy.params < 1 || toy.params > 32) throw std::invalid_argument("toy problem: params must be in [1, 32]");
  if (toy.samples < 1 || toy.batch < 1 || toy.denominator < 1) throw std::invalid_argument("toy problem: bad sizes");
  Rng rng(derive_seed(toy.seed, 0x7011));
  const Q d(toy.denominator);
  ToyData t;
  std::vector<int> target(toy.params);
  for (std::size_t j = 0; j < toy.params; ++j) {
    int v = 0;
    while (v == 0) v = static_cast<int>(rng.below(11)) - 5;
    t.theta.push_back(Q(v) / d);
    target[j] = static_cast<int>(rng.below(2));
  }
  for (std::size_t i = 0; i < toy.samples; ++i) {
    std::vector<Q> row;
    Q y = 0;
    for (std::size_t j = 0; j < toy.params; ++j) {
      row.push_back(Q(static_cast<int>(rng.below(11)) - 5) / d);
      if (target[j]) y += row.back() * t.theta[j];
    }
    y += Q(static_cast<int>(rng.below(5)) - 2) / (d * d);
    t.x.push_back(std::move(row));
    t.y.push_back(y);
  }
  return t;
}

struct ToyRun {
  Q lr, mu, gamma, momentum;
  std::vector<Q> s, v;

  ToyRun(const TrainConfig& c, std::size_t n, bool use_momentum)
      : lr(decimal_rational(c.lr)),
        mu(decimal_rational(c.threshold)),
        gamma(decimal_rational(c.weight_decay)),
        momentum(use_momentum ? decimal_rational(c.momentum) : Q(0)),
        s(n, decimal_rational(c.score_init)),
        v(n, Q(0)) {}

  std::vector<std::uint8_t> mask() const {
    std::vector<std::uint8_t> m(s.size());
    for (std::size_t j = 0; j < s.size(); ++j) m[j] = s[j] > mu;
    return m;
  }

  void step(const ToyData& d, std::size_t t, std::size_t batch) {
    const std::size_t p = s.size();
    const auto m = mask();
    std::vector<Q> g(p, Q(0));
    for (std::size_t r = 0; r < batch; ++r) {
      const std::size_t i = (t * batch + r) % d.x.size();
      Q pred = 0;
      for (std::size_t j = 0; j < p; ++j) {
        if (m[j]) pred += d.x[i][j] * d.theta[j];
      }
      const Q resid = pred - d.y[i];
      for (std::size_t j = 0; j < p; ++j) g[j] += resid * d.x[i][j] * d.theta[j];
    }
    const Q inv_b = Q(1) / Q(static_cast<long long>(batch));
    for (std::size_t j = 0; j < p; ++j) {
      Q gj = g[j] * inv_b;
      if (gamma != 0) gj += gamma * s[j];
      v[j] = momentum * v[j] + gj;
      s[j] -= lr * v[j];
    }
  }
};

}  // namespace

OracleVerdict rational_oracle(const ToyProblem& toy, const TrainConfig& a, const TrainConfig& b, std::size_t steps,
                              const OracleOptions& options) {
  const ToyData data = make_toy(toy);
  ToyRun ra(a, toy.params, options.momentum);
  ToyRun rb(b, toy.params, options.momentum);
  if (ra.lr == 0) throw std::invalid_argument("rational_oracle: lr must be nonzero");
  const Q mult = rb.lr / ra.lr;
  const Q add = decimal_rational(b.score_init) - mult * decimal_rational(a.score_init);

  OracleVerdict v;
  v.map = {static_cast<double>(mult), static_cast<double>(add)};
  v.masks_identical = true;
  v.scores_exact = true;
  auto check = [&](std::size_t t) {
    v.masks_a.push_back(ra.mask());
    v.masks_b.push_back(rb.mask());
    if (v.masks_a.back() != v.masks_b.back() && v.masks_identical) {
      v.masks_identical = false;
      v.first_mismatch = t;
    }
    if (t > 0) {
      const auto& prev = v.masks_a[v.masks_a.size() - 2];
      for (std::size_t j = 0; j < prev.size(); ++j) v.mask_changes += prev[j] != v.masks_a.back()[j];
    }
    for (std::size_t j = 0; j < toy.params; ++j) {
      if (rb.s[j] != mult * ra.s[j] + add) v.scores_exact = false;
      const std::size_t bits = std::max({bits_of(ra.s[j]), bits_of(rb.s[j]), bits_of(ra.v[j]), bits_of(rb.v[j])});
      v.max_bits_seen = std::max(v.max_bits_seen, bits);
    }
    if (v.max_bits_seen > options.max_bits) {
      throw RationalOverflow("rational_oracle: operands exceeded " + std::to_string(options.max_bits) +
                             " bits at step " + std::to_string(t));
    }
  };
  check(0);
  for (std::size_t t = 0; t < steps; ++t) {
    ra.step(data, t, toy.batch);
    rb.step(data, t, toy.batch);
    check(t + 1);
  }
  v.steps = steps;
  return v;
}

nlohmann::json OracleVerdict::to_json() const {
  return {{"steps", steps},
          {"masks_identical", masks_identical},
          {"first_mismatch_step", first_mismatch ? nlohmann::json(*first_mismatch) : nlohmann::json(nullptr)},
          {"scores_exact", scores_exact},
          {"score_map", {{"mult", map.mult}, {"add", map.add}}},
          {"mask_changes", mask_changes},
          {"max_bits", max_bits_seen}};
}

double PairedRunResult::final_loss_rel_diff() const {
  if (loss_a.empty() || loss_b.empty()) return 0.0;
  const double la = loss_a.back();
  const double lb = loss_b.back();
  return std::abs(la - lb) / std::max(std::abs(la), 1e-300);
}

double PairedRunResult::agreement_at_epoch(std::size_t epoch) const {
  const std::size_t idx = std::min(epoch * steps_per_epoch, agreement.size() - 1);
  return agreement[idx];
}

nlohmann::json PairedRunResult::to_json() const {
  return {{"transform", transform},
          {"steps", steps},
          {"min_agreement", min_agreement},
          {"first_divergence_step", first_divergence_step ? nlohmann::json(*first_divergence_step)
                                                          : nlohmann::json(nullptr)},
          {"final_loss_rel_diff", final_loss_rel_diff()},
          {"sparsity", {sparsity_a, sparsity_b}},
          {"loss_curves", {{"a", loss_a}, {"b", loss_b}}}};
}

void PairedRunResult::write_loss_csv(std::ostream& os) const {
  os << "epoch,loss_a,loss_b\n";
  for (std::size_t e = 0; e < std::min(loss_a.size(), loss_b.size()); ++e) {
    os << e << ',' << loss_a[e] << ',' << loss_b[e] << '\n';
  }
}

namespace {

double full_agreement(const std::vector<BinaryMask>& a, const std::vector<BinaryMask>& b) {
  std::size_t agree = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    agree += mask_agreement(a[i], b[i]);
    total += a[i].size();
  }
  return total ? static_cast<double>(agree) / static_cast<double>(total) : 1.0;
}

}  // namespace

PairedRunResult run_paired(const TrainConfig& a, const TrainConfig& b, const PairedProblem& problem,
                           const std::string& label) {
  TrainConfig ca = a;
  TrainConfig cb = b;
  ca.precision = cb.precision = Precision::f64;
  const auto base = SmallModel<double>::mlp(problem.dims, problem.model_seed);
  SmallModel<double> ma = base;
  SmallModel<double> mb = base;
  SupervisedTrainer<double> ta(ma, problem.features, problem.labels, problem.classes, ca, AdaptMode::mask);
  SupervisedTrainer<double> tb(mb, problem.features, problem.labels, problem.classes, cb, AdaptMode::mask);
  if (ta.total_steps() != tb.total_steps()) throw std::invalid_argument("run_paired: step counts differ");

  PairedRunResult r;
  r.transform = label;
  r.steps = ta.total_steps();
  r.steps_per_epoch = ta.steps_per_epoch();
  auto record = [&](std::size_t step) {
    const double ag = full_agreement(ma.masks(), mb.masks());
    r.agreement.push_back(ag);
    r.min_agreement = std::min(r.min_agreement, ag);
    if (ag < 1.0 && !r.first_divergence_step) r.first_divergence_step = step;
  };
  record(0);
  for (std::size_t s = 0; s < r.steps; ++s) {
    ta.step();
    tb.step();
    record(s + 1);
  }
  for (const auto& e : ta.epochs()) r.loss_a.push_back(e.loss);
  for (const auto& e : tb.epochs()) r.loss_b.push_back(e.loss);
  r.sparsity_a = 1.0 - active_fraction(ma);
  r.sparsity_b = 1.0 - active_fraction(mb);
  return r;
}

PairedRunResult weight_decay_counterexample(const TrainConfig& config, double gamma, double a,
                                            const PairedProblem& problem) {
  if (!(gamma >= 0.0)) throw std::invalid_argument("weight_decay_counterexample: gamma must be >= 0");
  TrainConfig base = config;
  base.weight_decay = gamma;
  std::ostringstream label;
  label << "translate(" << a << ") with weight_decay " << gamma;
  return run_paired(base, translated_unchecked(base, a), problem, label.str());
}

}  // namespace smn
