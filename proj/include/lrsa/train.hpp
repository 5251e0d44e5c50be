#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "lrsa/errors.hpp"
#include "lrsa/model.hpp"
#include "lrsa/rng.hpp"
#include "lrsa/tasks.hpp"
#include "lrsa/tensor.hpp"

// Training under the sparse mask: AdamW with decoupled weight decay, a
// cosine-to-zero schedule with no warm-up, and finite-difference gradient
// checking with frozen retention sets.

namespace lrsa::train {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double adam_eps = 1e-8;
  i64 steps = 2000;
  i64 batch = 1;
  std::uint64_t seed = 1;

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (!(beta1 > 0.0 && beta1 < 1.0))
      errs.push_back("train.beta1 must be in (0,1), got " + std::to_string(beta1));
    if (!(beta2 > 0.0 && beta2 < 1.0))
      errs.push_back("train.beta2 must be in (0,1), got " + std::to_string(beta2));
    if (lr < 0.0) errs.push_back("train.lr must be >= 0");
    if (weight_decay < 0.0) errs.push_back("train.weight_decay must be >= 0");
    if (!(adam_eps > 0.0)) errs.push_back("train.adam_eps must be > 0");
    if (steps < 0) errs.push_back("train.steps must be >= 0");
    if (batch < 1) errs.push_back("train.batch must be >= 1");
    return errs;
  }
};

// Cosine decay to zero over `total` steps, no warm-up; step is 1-based.
inline double cosine_lr(double lr0, i64 step, i64 total) {
  if (total <= 1) return lr0;
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step - 1) /
                         static_cast<double>(total)));
}

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>*> params, const TrainConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<std::size_t>(params_[i]->numel()), T(0));
      v_[i].assign(static_cast<std::size_t>(params_[i]->numel()), T(0));
    }
  }

  i64 step_count() const { return t_; }

  // One update at learning rate lr_t. Decoupled decay is applied first and
  // scales with lr_t, separately from the bias-corrected moment update.
  void step(double lr_t) {
    ++t_;
    const T lr = static_cast<T>(lr_t);
    const T b1 = static_cast<T>(cfg_.beta1);
    const T b2 = static_cast<T>(cfg_.beta2);
    const T eps = static_cast<T>(cfg_.adam_eps);
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T bc1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T bc2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(t_)));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = *params_[i];
      const i64 n = p.numel();
      for (i64 j = 0; j < n; ++j) {
        const T g = (*p.grad)[static_cast<std::size_t>(j)];
        T& pj = p.at(j);
        pj -= lr * wd * pj;
        T& mj = m_[i][static_cast<std::size_t>(j)];
        T& vj = v_[i][static_cast<std::size_t>(j)];
        mj = b1 * mj + (T(1) - b1) * g;
        vj = b2 * vj + (T(1) - b2) * g * g;
        const T mhat = mj / bc1;
        const T vhat = vj / bc2;
        pj -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  std::vector<Tensor<T>*> params_;
  TrainConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  i64 t_ = 0;
};

struct StepRecord {
  i64 step;
  double lr;
  double loss;
};

struct TrainResult {
  std::vector<StepRecord> curve;
  bool diverged = false;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
};

// forward / loss / backward / AdamW over sampled task instances. Batch items
// are evaluated and their losses reduced in fixed order. Aborts (with the
// partial curve kept) as soon as the loss stops being finite.
template <typename T>
TrainResult train(model::ModelParams<T>& m,
                  const std::function<tasks::TaskInstance(Rng&)>& sample, const TrainConfig& cfg,
                  model::AttnMode mode, const lagkv::LagkvParams& params) {
  TrainResult result;
  Rng data_rng(cfg.seed);
  AdamW<T> opt(m.parameters(), cfg);
  for (i64 t = 1; t <= cfg.steps; ++t) {
    const double lr_t = cosine_lr(cfg.lr, t, cfg.steps);
    Tensor<T> loss;
    for (i64 b = 0; b < cfg.batch; ++b) {
      tasks::TaskInstance inst = sample(data_rng);
      Tensor<T> logits = model::forward(m, inst.tokens, mode, params);
      Tensor<T> li = cross_entropy(logits, inst.targets);
      loss = b == 0 ? li : add(loss, li);
    }
    if (cfg.batch > 1) loss = scale(loss, T(1) / static_cast<T>(cfg.batch));
    const double lv = static_cast<double>(loss.item());
    result.curve.push_back({t, lr_t, lv});
    if (!std::isfinite(lv)) {
      result.diverged = true;
      break;
    }
    backward(loss);
    opt.step(lr_t);
    m.zero_grad();
  }
  if (!result.curve.empty()) result.final_loss = result.curve.back().loss;
  return result;
}

// Relative error with an absolute floor: coordinates where both the analytic
// and numeric gradients sit below `floor` are compared absolutely, which is
// what keeps finite-difference roundoff from masquerading as a failure.
inline double rel_err(double a, double b, double floor_) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor_});
}

// Central finite differences against the analytic gradients on a random
// subsample of parameter coordinates. Retention sets are computed once from
// the unperturbed model and frozen across every evaluation, so both sides
// differentiate the same masked function.
template <typename T>
double grad_check(model::ModelParams<T>& m, const std::vector<std::int32_t>& tokens,
                  model::AttnMode mode, const lagkv::LagkvParams& params, double h,
                  i64 min_coords, std::uint64_t seed, double floor_ = 1e-2) {
  std::vector<std::int32_t> targets(tokens.begin() + 1, tokens.end());
  targets.push_back(-1);

  model::VisibilityPlan plan;
  const model::VisibilityPlan* frozen = nullptr;
  if (mode == model::AttnMode::kLrsa) {
    NoGradGuard ng;
    (void)model::forward(m, tokens, mode, params, nullptr, nullptr, &plan);
    frozen = &plan;
  }

  m.zero_grad();
  {
    Tensor<T> logits = model::forward(m, tokens, mode, params, nullptr, frozen);
    Tensor<T> loss = cross_entropy(logits, targets);
    backward(loss);
  }

  auto eval_loss = [&]() {
    NoGradGuard ng;
    Tensor<T> logits = model::forward(m, tokens, mode, params, nullptr, frozen);
    return static_cast<double>(cross_entropy(logits, targets).item());
  };

  std::vector<Tensor<T>*> ps = m.parameters();
  i64 total = 0;
  for (auto* p : ps) total += p->numel();
  Rng rng(seed);
  std::set<i64> chosen;
  while (static_cast<i64>(chosen.size()) < std::min(min_coords, total))
    chosen.insert(rng.uniform_int(total));

  double max_err = 0.0;
  for (i64 flat : chosen) {
    i64 off = flat;
    std::size_t pi = 0;
    while (off >= ps[pi]->numel()) {
      off -= ps[pi]->numel();
      ++pi;
    }
    Tensor<T>& p = *ps[pi];
    const T orig = p.at(off);
    p.at(off) = orig + static_cast<T>(h);
    const double lp = eval_loss();
    p.at(off) = orig - static_cast<T>(h);
    const double lm = eval_loss();
    p.at(off) = orig;
    const double fd = (lp - lm) / (2.0 * h);
    const double analytic = static_cast<double>((*p.grad)[static_cast<std::size_t>(off)]);
    max_err = std::max(max_err, rel_err(analytic, fd, floor_));
  }
  return max_err;
}

}  // namespace lrsa::train
