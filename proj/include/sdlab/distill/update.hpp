#pragma once

#include <sdlab/core/rng.hpp>
#include <sdlab/distill/fields.hpp>

#include <cmath>
#include <stdexcept>
#include <utility>

namespace sdlab::distill {

/// Optimizer bundle for the two online adapters.
template <class S>
struct AdapterOptimizers {
  diffusion::Adam<S> psi;
  diffusion::Adam<S> phi;
  double lr = 1e-4;

  AdapterOptimizers(Index n_psi, Index n_phi, double lr_ = 1e-4)
      : psi(n_psi), phi(n_phi), lr(lr_) {}
};

/// One diffusion-loss step for a single adapter on a single image; base
/// weights receive no gradient and are never written.
template <class S>
double adapter_loss_step(const ConditionedDenoiser<S>& den, const NoiseScheduleT<S>& sched,
                         AdapterStack<S>& adapter, diffusion::Adam<S>& opt, double lr,
                         const ImageT<S>& x0, int t, int cond, Rng& rng,
                         DenoiserWorkspace<S>& ws, const ImageT<S>* spatial) {
  ImageT<S> eps = x0;
  eps.data = rng.normal_vec<S>(x0.size());
  DistillStepT<S> step;
  step.t = t;
  step.eps = eps;
  MatX<S> act = detail::latent_act(den, x0, step, sched, spatial);
  MatX<S> pred = den.forward(act, {t}, {cond}, ws, &adapter);
  const double w = double(sched.weight(t));
  auto eps_act = Eigen::Map<const MatX<S>>(eps.data.data(), pred.rows(), pred.cols());
  const double loss = w * double((pred - eps_act).squaredNorm());
  if (!std::isfinite(loss)) throw std::runtime_error("adapter update: non-finite loss");
  adapter.arena.zero_grad();
  MatX<S> dpred = S(2.0 * w) * (pred - eps_act);
  den.backward(dpred, ws, nullptr, &adapter, &adapter);
  opt.step(adapter.arena.data, adapter.arena.grad, lr);
  return loss;
}

/// Online fine-tuning of the source-anchored and target adapters: psi fits
/// the denoising objective on the frozen source render, phi on the current
/// edited render, each with its own fresh noise draw at the shared t.
template <class S>
std::pair<double, double> update_adapters(const ConditionedDenoiser<S>& den,
                                          const NoiseScheduleT<S>& sched, AdapterStack<S>& psi,
                                          AdapterStack<S>& phi, AdapterOptimizers<S>& opt,
                                          const ImageT<S>& x_src, const ImageT<S>& x_edited,
                                          int t, int c_src, int c_tgt, Rng& rng,
                                          DenoiserWorkspace<S>& ws,
                                          const ImageT<S>* spatial = nullptr) {
  const double psi_loss =
      adapter_loss_step(den, sched, psi, opt.psi, opt.lr, x_src, t, c_src, rng, ws, spatial);
  const double phi_loss =
      adapter_loss_step(den, sched, phi, opt.phi, opt.lr, x_edited, t, c_tgt, rng, ws, spatial);
  return {psi_loss, phi_loss};
}

}  // namespace sdlab::distill
