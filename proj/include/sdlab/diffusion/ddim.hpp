#pragma once

#include <sdlab/core/image.hpp>
#include <sdlab/core/rng.hpp>
#include <sdlab/diffusion/denoiser.hpp>
#include <sdlab/diffusion/schedule.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace sdlab::diffusion {

/// Evenly spaced time subgrid covering [0, T-1], ascending.
inline std::vector<int> ddim_time_grid(int n_steps, int T) {
  if (n_steps <= 0) throw std::invalid_argument("ddim: n_steps must be positive");
  if (n_steps > T) throw std::invalid_argument("ddim: n_steps exceeds schedule length");
  std::vector<int> grid(static_cast<std::size_t>(n_steps));
  if (n_steps == 1) {
    grid[0] = T - 1;
    return grid;
  }
  for (int i = 0; i < n_steps; ++i)
    grid[std::size_t(i)] = int(std::llround(double(i) * double(T - 1) / double(n_steps - 1)));
  return grid;
}

/// Deterministic reverse process on a flat state: at each grid time predict
/// the clean signal from the noise estimate, then re-noise to the next grid
/// time. `eps(x, t)` supplies the noise prediction. No clamping here.
template <class S, class EpsFn>
MatX<S> ddim_reverse(EpsFn&& eps, MatX<S> x, const NoiseScheduleT<S>& sched, int n_steps) {
  std::vector<int> grid = ddim_time_grid(n_steps, sched.T);
  for (int i = n_steps - 1; i >= 0; --i) {
    const int t = grid[std::size_t(i)];
    const auto co = schedule_coefficients(sched, t);
    MatX<S> e = eps(x, t);
    MatX<S> x0 = (x - S(co.sigma) * e) / S(co.alpha);
    if (i == 0) {
      x = x0;
    } else {
      const auto cn = schedule_coefficients(sched, grid[std::size_t(i - 1)]);
      x = S(cn.alpha) * x0 + S(cn.sigma) * e;
    }
  }
  return x;
}

/// Samples a batch of images from the conditioned denoiser under
/// classifier-free guidance. Deterministic given (seed, weights); the final
/// image is clamped to [0,1], intermediate states are not.
template <class S>
std::vector<ImageT<S>> ddim_sample_batch(const ConditionedDenoiser<S>& den,
                                         const std::vector<int>& cond, int n_steps,
                                         double guidance, const NoiseScheduleT<S>& sched,
                                         std::uint64_t seed,
                                         const std::vector<ImageT<S>>* spatial = nullptr,
                                         const AdapterStack<S>* adapters = nullptr,
                                         const MatX<S>* init = nullptr) {
  const int n = int(cond.size());
  const int res = den.config().res;
  const Index hw = Index(res) * res;
  Rng rng(seed);
  MatX<S> x(hw * n, den.config().img_channels);
  if (init) {
    if (init->rows() != x.rows() || init->cols() != x.cols())
      throw std::invalid_argument("ddim: initial state shape mismatch");
    x = *init;
  } else {
    for (Index j = 0; j < x.cols(); ++j)
      for (Index i = 0; i < x.rows(); ++i) x(i, j) = S(rng.normal());
  }
  MatX<S> sp;
  if (den.config().spatial_cond) {
    if (!spatial || int(spatial->size()) != n)
      throw std::invalid_argument("ddim: spatial condition required by this model");
    std::vector<ImageT<S>> maps(spatial->begin(), spatial->end());
    sp = stack_images(maps);
  }
  auto ws = den.make_workspace();
  std::vector<int> t_batch(static_cast<std::size_t>(n));
  auto eps = [&](const MatX<S>& state, int t) {
    std::fill(t_batch.begin(), t_batch.end(), t);
    if (den.config().spatial_cond) {
      MatX<S> with_sp(state.rows(), state.cols() + 1);
      with_sp << state, sp;
      return den.predict_cfg(with_sp, t_batch, cond, guidance, ws, adapters);
    }
    return den.predict_cfg(state, t_batch, cond, guidance, ws, adapters);
  };
  x = ddim_reverse(eps, std::move(x), sched, n_steps);
  std::vector<ImageT<S>> out;
  out.reserve(std::size_t(n));
  for (int b = 0; b < n; ++b) out.push_back(clamp01(act_to_image(x, res, res, b)));
  return out;
}

template <class S>
ImageT<S> ddim_sample(const ConditionedDenoiser<S>& den, int cond, int n_steps, double guidance,
                      const NoiseScheduleT<S>& sched, std::uint64_t seed,
                      const ImageT<S>* spatial = nullptr,
                      const AdapterStack<S>* adapters = nullptr) {
  std::vector<ImageT<S>> sp;
  if (spatial) sp.push_back(*spatial);
  auto out = ddim_sample_batch(den, std::vector<int>{cond}, n_steps, guidance, sched, seed,
                               spatial ? &sp : nullptr, adapters);
  return out[0];
}

}  // namespace sdlab::diffusion
