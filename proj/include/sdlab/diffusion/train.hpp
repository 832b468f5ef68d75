#pragma once

#include <sdlab/core/rng.hpp>
#include <sdlab/diffusion/denoiser.hpp>
#include <sdlab/diffusion/schedule.hpp>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdlab::diffusion {

struct TrainConfig {
  int steps = 3000;
  int batch = 16;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  int log_every = 100;
};

struct TrainLog {
  std::vector<double> loss;  // per-step mean loss over the batch

  double mean_over(std::size_t begin, std::size_t end) const {
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += loss[i];
    return s / double(end - begin);
  }
};

/// One denoising-objective training run, generic over the model
/// (image U-Net or vector MLP share the interface). `draw` fills a clean
/// batch and its condition codes; rows per sample are inferred from the
/// batch shape. Throws on non-finite loss.
template <class S, class Model, class BatchFn>
TrainLog train_denoiser(Model& model, BatchFn&& draw, const NoiseScheduleT<S>& sched,
                        const TrainConfig& cfg) {
  Rng rng(cfg.seed);
  Rng noise_rng = rng.fork(1);
  Adam<S> opt(model.params().size());
  auto ws = model.make_workspace();
  TrainLog log;
  log.loss.reserve(std::size_t(cfg.steps));

  MatX<S> x0, xt, eps, pred, dpred;
  std::vector<int> cond;
  std::vector<int> t(std::size_t(cfg.batch));
  std::vector<double> w(std::size_t(cfg.batch));

  for (int step = 0; step < cfg.steps; ++step) {
    draw(rng, x0, cond);
    const int n = int(cond.size());
    const Index rows = x0.rows() / n;
    xt.resize(x0.rows(), x0.cols());
    eps.resize(x0.rows(), x0.cols());
    for (int b = 0; b < n; ++b) {
      t[std::size_t(b)] = noise_rng.uniform_int(sched.T);
      const auto co = schedule_coefficients(sched, t[std::size_t(b)]);
      w[std::size_t(b)] = double(co.weight);
      for (Index j = 0; j < x0.cols(); ++j)
        for (Index i = 0; i < rows; ++i) eps(Index(b) * rows + i, j) = S(noise_rng.normal());
      xt.middleRows(Index(b) * rows, rows) = S(co.alpha) * x0.middleRows(Index(b) * rows, rows) +
                                             S(co.sigma) * eps.middleRows(Index(b) * rows, rows);
    }
    pred = model.forward(xt, t, cond, ws);
    const double loss = diffusion_loss(pred, eps, w, n, &dpred) / n;
    if (!std::isfinite(loss))
      throw std::runtime_error("train_denoiser: non-finite loss at step " +
                               std::to_string(step));
    log.loss.push_back(loss);
    model.params().zero_grad();
    dpred /= S(n);
    model.backward(dpred, ws, &model.params());
    opt.step(model.params().data, model.params().grad, cfg.lr);
  }
  return log;
}

/// Convenience form of the training objective for a single clean batch;
/// used by oracle and contract tests.
template <class S, class Model>
double diffusion_loss_on(Model& model, const MatX<S>& x0, int t, const MatX<S>& eps,
                         const std::vector<int>& cond, const NoiseScheduleT<S>& sched) {
  const int n = int(cond.size());
  const auto co = schedule_coefficients(sched, t);
  MatX<S> xt = S(co.alpha) * x0 + S(co.sigma) * eps;
  auto ws = model.make_workspace();
  std::vector<int> tv(std::size_t(n), t);
  MatX<S> pred = model.forward(xt, tv, cond, ws);
  std::vector<double> w(std::size_t(n), double(co.weight));
  return diffusion_loss(pred, eps, w, n);
}

}  // namespace sdlab::diffusion
