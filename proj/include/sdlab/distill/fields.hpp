#pragma once

#include <sdlab/core/image.hpp>
#include <sdlab/diffusion/denoiser.hpp>
#include <sdlab/diffusion/schedule.hpp>
#include <sdlab/scenes/pose.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace sdlab::distill {

using diffusion::AdapterStack;
using diffusion::ConditionedDenoiser;
using diffusion::DenoiserWorkspace;
using diffusion::NoiseScheduleT;

struct GuidanceConfig {
  double scale = 7.5;
};

/// Everything one distillation iteration shares: a single (t, eps, pose)
/// triple reused by every noise prediction inside the step.
template <class S>
struct DistillStepT {
  int t = 0;
  ImageT<S> eps;
  scenes::ViewPose pose;
  int c_src = 0;
  int c_tgt = 0;
  GuidanceConfig guidance_base{7.5};
  GuidanceConfig guidance_adapter{1.0};
  double lambda = 0.4;
};

/// Per-pixel update direction with provenance metadata.
template <class S>
struct GradientFieldT {
  ImageT<S> delta;
  std::string method;
  int t = 0;
  double weight = 0.0;  // omega(t)
};

namespace detail {

template <class S>
void check_cfg_allowed(const ConditionedDenoiser<S>& den, double scale) {
  if (scale != 1.0 && !den.config().uses_null_condition)
    throw std::invalid_argument("cfg: guidance != 1 requires null-condition support");
}

/// x_t as an activation matrix, with the spatial-condition channel appended
/// when the model expects one.
template <class S>
MatX<S> latent_act(const ConditionedDenoiser<S>& den, const ImageT<S>& x,
                   const DistillStepT<S>& step, const NoiseScheduleT<S>& sched,
                   const ImageT<S>* spatial) {
  ImageT<S> x_t = diffusion::forward_noise(x, step.t, step.eps, sched);
  auto act = diffusion::image_to_act(x_t);
  if (!den.config().spatial_cond) return act;
  if (!spatial)
    throw std::invalid_argument("distill: model expects a spatial condition channel");
  MatX<S> with_sp(act.rows(), act.cols() + 1);
  with_sp << act, diffusion::image_to_act(*spatial);
  return with_sp;
}

/// Guided prediction with the conditional/unconditional pair evaluated in
/// one batched forward pass.
template <class S>
MatX<S> eps_cfg(const ConditionedDenoiser<S>& den, const MatX<S>& act, int t, int cond,
                double scale, DenoiserWorkspace<S>& ws,
                const AdapterStack<S>* adapters = nullptr) {
  check_cfg_allowed(den, scale);
  if (scale == 1.0)
    return den.forward(act, {t}, {cond}, ws, adapters);
  if (scale == 0.0)
    return den.forward(act, {t}, {den.config().null_code()}, ws, adapters);
  MatX<S> two(act.rows() * 2, act.cols());
  two << act, act;
  MatX<S> pred = den.forward(two, {t, t}, {cond, den.config().null_code()}, ws, adapters);
  MatX<S> ec = pred.topRows(act.rows());
  MatX<S> eu = pred.bottomRows(act.rows());
  return eu + S(scale) * (ec - eu);
}

/// Difference of two same-latent guided predictions. The unconditional
/// branch cancels algebraically, leaving s * (eps_c1 - eps_c2).
template <class S>
MatX<S> eps_cfg_diff(const ConditionedDenoiser<S>& den, const MatX<S>& act, int t, int c1,
                     int c2, double scale, DenoiserWorkspace<S>& ws) {
  check_cfg_allowed(den, scale);
  // Identical conditions cancel identically; skip the forward pass so the
  // fixed point is exact rather than accurate to batched rounding.
  if (c1 == c2) return MatX<S>::Zero(act.rows(), den.config().img_channels);
  MatX<S> two(act.rows() * 2, act.cols());
  two << act, act;
  MatX<S> pred = den.forward(two, {t, t}, {c1, c2}, ws);
  return S(scale) * (pred.topRows(act.rows()) - pred.bottomRows(act.rows()));
}

template <class S>
GradientFieldT<S> wrap_field(MatX<S> delta_act, const char* method,
                             const DistillStepT<S>& step, const NoiseScheduleT<S>& sched,
                             int res, int channels) {
  GradientFieldT<S> f;
  f.delta = diffusion::act_to_image(MatX<S>(delta_act.leftCols(channels)), res, res);
  f.method = method;
  f.t = step.t;
  f.weight = double(sched.weight(step.t));
  return f;
}

}  // namespace detail

/// Score distillation: omega(t) * (eps_cfg(x_t, c_tgt) - eps).
template <class S>
GradientFieldT<S> sds_gradient(const ConditionedDenoiser<S>& den, const NoiseScheduleT<S>& sched,
                               const ImageT<S>& x, const DistillStepT<S>& step,
                               DenoiserWorkspace<S>& ws, const ImageT<S>* spatial = nullptr) {
  MatX<S> act = detail::latent_act(den, x, step, sched, spatial);
  MatX<S> pred =
      detail::eps_cfg(den, act, step.t, step.c_tgt, step.guidance_base.scale, ws);
  const S w = sched.weight(step.t);
  MatX<S> delta = w * (pred - Eigen::Map<const MatX<S>>(step.eps.data.data(), pred.rows(),
                                                        pred.cols()));
  return detail::wrap_field(std::move(delta), "sds", step, sched, x.h, x.c);
}

/// Variational form: the injected noise is replaced by the target adapter's
/// own prediction of the render distribution's score.
template <class S>
GradientFieldT<S> vsd_gradient(const ConditionedDenoiser<S>& den, const NoiseScheduleT<S>& sched,
                               const AdapterStack<S>& phi, const ImageT<S>& x,
                               const DistillStepT<S>& step, DenoiserWorkspace<S>& ws,
                               const ImageT<S>* spatial = nullptr) {
  MatX<S> act = detail::latent_act(den, x, step, sched, spatial);
  MatX<S> base =
      detail::eps_cfg(den, act, step.t, step.c_tgt, step.guidance_base.scale, ws);
  MatX<S> own =
      detail::eps_cfg(den, act, step.t, step.c_tgt, step.guidance_adapter.scale, ws, &phi);
  MatX<S> delta = S(sched.weight(step.t)) * (base - own);
  return detail::wrap_field(std::move(delta), "vsd", step, sched, x.h, x.c);
}

/// Two-latent delta denoising score: target prediction on the edited render
/// against source prediction on the source render, sharing (t, eps).
template <class S>
GradientFieldT<S> dds_gradient(const ConditionedDenoiser<S>& den, const NoiseScheduleT<S>& sched,
                               const ImageT<S>& x, const ImageT<S>& x_src,
                               const DistillStepT<S>& step, DenoiserWorkspace<S>& ws,
                               const ImageT<S>* spatial = nullptr) {
  require_same_shape(x, x_src, "dds_gradient");
  MatX<S> act = detail::latent_act(den, x, step, sched, spatial);
  MatX<S> act_src = detail::latent_act(den, x_src, step, sched, spatial);
  MatX<S> pred_t =
      detail::eps_cfg(den, act, step.t, step.c_tgt, step.guidance_base.scale, ws);
  MatX<S> pred_s =
      detail::eps_cfg(den, act_src, step.t, step.c_src, step.guidance_base.scale, ws);
  MatX<S> delta = S(sched.weight(step.t)) * (pred_t - pred_s);
  return detail::wrap_field(std::move(delta), "dds", step, sched, x.h, x.c);
}

/// Shared-latent variant: both conditions see the same noisy latent, so the
/// unconditional branch cancels inside the guided difference.
template <class S>
GradientFieldT<S> dds_shared_gradient(const ConditionedDenoiser<S>& den,
                                      const NoiseScheduleT<S>& sched, const ImageT<S>& x,
                                      const DistillStepT<S>& step, DenoiserWorkspace<S>& ws,
                                      const ImageT<S>* spatial = nullptr) {
  MatX<S> act = detail::latent_act(den, x, step, sched, spatial);
  MatX<S> diff = detail::eps_cfg_diff(den, act, step.t, step.c_tgt, step.c_src,
                                      step.guidance_base.scale, ws);
  MatX<S> delta = S(sched.weight(step.t)) * diff;
  return detail::wrap_field(std::move(delta), "dds_shared", step, sched, x.h, x.c);
}

/// Identity term: difference between the source-anchored and target adapter
/// predictions at the same latent. Unweighted; the combiner applies omega
/// and lambda.
template <class S>
GradientFieldT<S> identity_regularizer(const ConditionedDenoiser<S>& den,
                                       const NoiseScheduleT<S>& sched,
                                       const AdapterStack<S>& psi, const AdapterStack<S>& phi,
                                       const ImageT<S>& x, const DistillStepT<S>& step,
                                       DenoiserWorkspace<S>& ws,
                                       const ImageT<S>* spatial = nullptr) {
  MatX<S> act = detail::latent_act(den, x, step, sched, spatial);
  MatX<S> e_psi =
      detail::eps_cfg(den, act, step.t, step.c_src, step.guidance_adapter.scale, ws, &psi);
  MatX<S> e_phi =
      detail::eps_cfg(den, act, step.t, step.c_tgt, step.guidance_adapter.scale, ws, &phi);
  MatX<S> delta = e_psi - e_phi;
  GradientFieldT<S> f = detail::wrap_field(std::move(delta), "regularizer", step, sched, x.h, x.c);
  f.weight = 1.0;  // deliberately unweighted
  return f;
}

/// Combined update: shared-latent delta score plus lambda-weighted identity
/// regularizer, all four predictions on the same noisy latent. At lambda=0
/// the regularizer term is skipped entirely, making the reduction to the
/// shared-latent delta score exact.
template <class S>
GradientFieldT<S> piva_gradient(const ConditionedDenoiser<S>& den, const NoiseScheduleT<S>& sched,
                                const AdapterStack<S>& psi, const AdapterStack<S>& phi,
                                const ImageT<S>& x, const DistillStepT<S>& step,
                                DenoiserWorkspace<S>& ws, const ImageT<S>* spatial = nullptr) {
  if (step.lambda < 0.0) throw std::invalid_argument("piva_gradient: lambda must be >= 0");
  GradientFieldT<S> f = dds_shared_gradient(den, sched, x, step, ws, spatial);
  if (step.lambda > 0.0) {
    GradientFieldT<S> reg = identity_regularizer(den, sched, psi, phi, x, step, ws, spatial);
    f.delta.data += S(step.lambda * sched.weight(step.t)) * reg.delta.data;
  }
  f.method = "piva";
  return f;
}

/// Distillation-time sampling window: fixed floor, ceiling decaying
/// linearly from 0.98T to 0.50T over the first half of the run.
inline std::pair<int, int> anneal_time(double progress, int T) {
  if (progress < 0.0 || progress > 1.0)
    throw std::invalid_argument("anneal_time: progress outside [0,1]");
  const double hi_frac = progress < 0.5 ? 0.98 - 0.96 * progress : 0.50;
  int t_min = int(std::lround(0.02 * T));
  int t_max = std::min(int(std::lround(hi_frac * T)), T - 1);
  if (t_max <= t_min) t_max = t_min + 1;
  return {t_min, t_max};
}

}  // namespace sdlab::distill
