#pragma once

#include <sdlab/diffusion/schedule.hpp>

namespace sdlab::diffusion {

/// Closed-form optimal noise prediction when the data distribution is a
/// diagonal Gaussian N(mu, diag(sigma_data^2)). The marginal at step t is
/// N(alpha_t mu, (alpha_t^2 sigma_data^2 + sigma_t^2) I), so
///   eps*(x_t, t) = sigma_t (x_t - alpha_t mu) / (alpha_t^2 sigma_data^2 + sigma_t^2)
/// which equals -sigma_t * grad log p_t(x_t). Serves as the ground-truth
/// score oracle for trained-denoiser checks.
template <class S>
ImageT<S> analytic_gaussian_denoiser(const VecX<S>& mu, const VecX<S>& sigma_data,
                                     const ImageT<S>& x_t, int t,
                                     const NoiseScheduleT<S>& sched) {
  if (mu.size() != x_t.size() || sigma_data.size() != x_t.size())
    throw std::invalid_argument("analytic_gaussian_denoiser: parameter size mismatch");
  const S a = sched.alpha(t);
  const S s = sched.sigma(t);
  ImageT<S> out = x_t;
  out.data = s * (x_t.data - a * mu) / (a * a * sigma_data.square() + s * s);
  return out;
}

/// Log marginal density of the same diagonal-Gaussian world at step t; the
/// finite-difference score check differentiates this directly.
template <class S>
double gaussian_marginal_logpdf(const VecX<S>& mu, const VecX<S>& sigma_data,
                                const ImageT<S>& x_t, int t, const NoiseScheduleT<S>& sched) {
  const double a = double(sched.alpha(t));
  const double s = double(sched.sigma(t));
  double logp = 0.0;
  for (Index i = 0; i < x_t.size(); ++i) {
    const double var = a * a * double(sigma_data[i]) * double(sigma_data[i]) + s * s;
    const double d = double(x_t.data[i]) - a * double(mu[i]);
    logp += -0.5 * (d * d / var + std::log(2.0 * M_PI * var));
  }
  return logp;
}

}  // namespace sdlab::diffusion
