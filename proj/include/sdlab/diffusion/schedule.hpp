#pragma once

#include <sdlab/core/image.hpp>
#include <sdlab/core/types.hpp>

#include <cmath>
#include <stdexcept>

namespace sdlab::diffusion {

/// Variance-preserving discretization of the forward process
/// q(x_t | x) = N(alpha_t x, sigma_t^2 I).
///
/// alpha follows a cosine profile with the usual small offset; the angular
/// argument is mapped onto [u0, u1] with u1 < 1 so the terminal signal scale
/// stays at a positive floor. alpha_t^2 + sigma_t^2 = 1 holds by
/// construction, alpha is strictly decreasing and sigma strictly increasing.
template <class S>
struct NoiseScheduleT {
  int T = 1000;
  double cosine_offset = 0.008;
  double terminal_alpha = 0.05;
  VecX<S> alphas;
  VecX<S> sigmas;

  explicit NoiseScheduleT(int steps = 1000, double offset = 0.008, double alpha_end = 0.05)
      : T(steps), cosine_offset(offset), terminal_alpha(alpha_end) {
    if (T < 2) throw std::invalid_argument("NoiseSchedule: need at least 2 steps");
    if (!(alpha_end > 0.0 && alpha_end < 1.0))
      throw std::invalid_argument("NoiseSchedule: terminal alpha must be in (0,1)");
    alphas.resize(T);
    sigmas.resize(T);
    const double u0 = offset / (1.0 + offset);
    const double u1 = 2.0 / M_PI * std::acos(alpha_end);
    for (int t = 0; t < T; ++t) {
      const double u = u0 + (u1 - u0) * double(t) / double(T - 1);
      alphas[t] = S(std::cos(M_PI / 2.0 * u));
      sigmas[t] = S(std::sin(M_PI / 2.0 * u));
    }
  }

  void check_step(int t) const {
    if (t < 0 || t >= T) throw std::out_of_range("schedule step out of range");
  }

  S alpha(int t) const {
    check_step(t);
    return alphas[t];
  }
  S sigma(int t) const {
    check_step(t);
    return sigmas[t];
  }
  /// Loss weighting omega(t) = sigma_t^2.
  S weight(int t) const {
    check_step(t);
    return sigmas[t] * sigmas[t];
  }
};

template <class S>
struct ScheduleCoeffs {
  S alpha;
  S sigma;
  S weight;
};

template <class S>
ScheduleCoeffs<S> schedule_coefficients(const NoiseScheduleT<S>& sched, int t) {
  return {sched.alpha(t), sched.sigma(t), sched.weight(t)};
}

/// x_t = alpha_t x + sigma_t eps, elementwise.
template <class S>
ImageT<S> forward_noise(const ImageT<S>& x, int t, const ImageT<S>& eps,
                        const NoiseScheduleT<S>& sched) {
  require_same_shape(x, eps, "forward_noise");
  ImageT<S> out = x;
  out.data = sched.alpha(t) * x.data + sched.sigma(t) * eps.data;
  return out;
}

}  // namespace sdlab::diffusion
