#pragma once

#include <sdlab/core/image.hpp>
#include <sdlab/core/rng.hpp>
#include <sdlab/distill/fields.hpp>
#include <sdlab/distill/update.hpp>
#include <sdlab/eval/metrics.hpp>
#include <sdlab/eval/probe.hpp>
#include <sdlab/scenes/depth.hpp>
#include <sdlab/scenes/generators.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace sdlab::edit {

using diffusion::AdapterStack;
using diffusion::ConditionedDenoiser;
using diffusion::NoiseScheduleT;

enum class Method { sds, vsd, dds, dds_shared, piva };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::sds: return "sds";
    case Method::vsd: return "vsd";
    case Method::dds: return "dds";
    case Method::dds_shared: return "dds-shared";
    case Method::piva: return "piva";
  }
  return "?";
}

inline Method method_from_name(const std::string& s) {
  if (s == "sds") return Method::sds;
  if (s == "vsd") return Method::vsd;
  if (s == "dds") return Method::dds;
  if (s == "dds-shared" || s == "dds_shared") return Method::dds_shared;
  if (s == "piva") return Method::piva;
  throw std::invalid_argument("unknown edit method: " + s);
}

struct EditConfig {
  Method method = Method::piva;
  double lambda = 0.4;
  int steps = 800;
  double guidance_base = 7.5;
  double guidance_adapter = 1.0;
  double gen_lr = 0.01;  // cosine-decayed over the run
  double adapter_lr = 1e-4;
  int adapter_rank = 4;
  std::uint64_t seed = 0;
  int log_every = 25;
  double divergence_threshold = 0.15;  // MSE-to-source flag level
  double field_clip = 10.0;            // per-element field magnitude cap

  void validate() const {
    if (lambda < 0) throw std::invalid_argument("edit: lambda must be >= 0");
    if (steps < 0) throw std::invalid_argument("edit: steps must be >= 0");
    if (gen_lr <= 0 || adapter_lr <= 0)
      throw std::invalid_argument("edit: learning rates must be > 0");
    if (log_every < 1) throw std::invalid_argument("edit: log_every must be >= 1");
  }
};

struct TrajectoryRow {
  int step = 0;
  double mse_to_source = 0;
  double alignment = 0;
  double field_norm = 0;
  double psi_loss = 0;
  double phi_loss = 0;
};

inline constexpr const char* kTrajectoryHeader =
    "step,mse_to_source,alignment,field_norm,psi_loss,phi_loss";

inline void write_trajectory_csv(const std::string& path,
                                 const std::vector<TrajectoryRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write trajectory: " + path);
  out << kTrajectoryHeader << "\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.mse_to_source,
                  r.alignment, r.field_norm, r.psi_loss, r.phi_loss);
    out << buf;
  }
}

/// Which optimizer drives the generator parameters: plain gradient descent
/// for the raw pixel canvas, adaptive moments for the coordinate network.
template <class Gen>
struct GenTraits;

template <class S>
struct GenTraits<scenes::PixelCanvas<S>> {
  static constexpr bool kUsesAdam = false;
  static constexpr const char* kKind = "pixel";
};

template <class S>
struct GenTraits<scenes::NeuralCanvas<S>> {
  static constexpr bool kUsesAdam = true;
  static constexpr const char* kKind = "neural";
};

/// Full mutable state of one edit run; everything needed to resume it
/// bit-exactly lives here (parameters, adapters, optimizer moments, RNG
/// streams, trajectory so far).
template <class S, class Gen>
struct EditStateT {
  EditConfig cfg;
  int c_src = 0;
  int c_tgt = 0;
  Gen source;  // frozen for the whole run
  Gen edited;
  std::optional<AdapterStack<S>> psi, phi;
  std::optional<distill::AdapterOptimizers<S>> adapter_opt;
  std::optional<diffusion::Adam<S>> gen_opt;
  Rng main_rng{0};
  Rng adapter_rng{0};
  int step = 0;  // completed iterations
  bool diverged = false;
  bool aborted = false;
  std::string abort_reason;
  std::vector<TrajectoryRow> trajectory;
};

namespace detail {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <class S, class Gen>
ImageT<S> render_view(const Gen& g, const scenes::ViewPose& pose, int res,
                      scenes::NeuralCanvasWorkspace<S>& ws) {
  if constexpr (GenTraits<Gen>::kUsesAdam)
    return g.render(pose, res, ws);
  else
    return g.render(pose, res);
}

template <class S, class Gen>
void render_view_backward(const Gen& g, const ImageT<S>& dimg, const scenes::ViewPose& pose,
                          const scenes::NeuralCanvasWorkspace<S>& ws, VecX<S>& grad) {
  if constexpr (GenTraits<Gen>::kUsesAdam)
    g.render_backward(dimg, ws, grad);
  else
    g.render_backward(dimg, pose, grad);
}

}  // namespace detail

/// Builds a fresh run state: edited generator initialized from the source,
/// adapters allocated only for the methods that use them, two decoupled RNG
/// streams (the adapter stream never perturbs the main trajectory draws).
template <class S, class Gen>
EditStateT<S, Gen> init_edit(const Gen& source, int c_src, int c_tgt,
                             const ConditionedDenoiser<S>& den, const EditConfig& cfg) {
  cfg.validate();
  EditStateT<S, Gen> st;
  st.cfg = cfg;
  st.c_src = c_src;
  st.c_tgt = c_tgt;
  st.source = source;
  st.edited = source;
  Rng root(cfg.seed);
  st.main_rng = root.fork(1);
  st.adapter_rng = root.fork(2);
  Rng adapter_init = root.fork(3);
  const bool wants_psi = cfg.method == Method::piva;
  const bool wants_phi = cfg.method == Method::piva || cfg.method == Method::vsd;
  if (wants_psi) st.psi = den.make_adapters(adapter_init, cfg.adapter_rank);
  if (wants_phi) st.phi = den.make_adapters(adapter_init, cfg.adapter_rank);
  if (wants_psi || wants_phi)
    st.adapter_opt.emplace(wants_psi ? st.psi->size() : Index(0), st.phi->size(),
                           cfg.adapter_lr);
  if constexpr (GenTraits<Gen>::kUsesAdam) st.gen_opt.emplace(source.params().size());
  return st;
}

/// Advances the run until `until_step` iterations have completed. Loop body
/// per iteration: sample a pose, render the edited (and when needed, source)
/// view under it, draw (t, eps) from the annealed window, evaluate the
/// configured gradient field, clip it, take one generator step, then update
/// any adapters from their own noise stream. NaN anywhere rolls the state
/// back to the last logged snapshot and aborts; crossing the divergence
/// threshold only sets a sticky flag.
template <class S, class Gen>
void continue_edit(EditStateT<S, Gen>& st, const ConditionedDenoiser<S>& den,
                   const NoiseScheduleT<S>& sched, int until_step,
                   const eval::AttributeProbe<S>* probe = nullptr) {
  const EditConfig& cfg = st.cfg;
  const int res = den.config().res;
  const bool spatial_on = den.config().spatial_cond;
  const scenes::ViewPose id_pose = scenes::ViewPose::identity();

  auto ws = den.make_workspace();
  scenes::NeuralCanvasWorkspace<S> gen_ws;
  scenes::NeuralCanvasWorkspace<S> scratch_ws;
  VecX<S> grad(st.edited.params().size());

  double last_psi = detail::kNaN, last_phi = detail::kNaN;

  auto log_row = [&](int at_step) {
    TrajectoryRow row;
    row.step = at_step;
    ImageT<S> cur = detail::render_view<S>(st.edited, id_pose, res, scratch_ws);
    ImageT<S> src = detail::render_view<S>(st.source, id_pose, res, scratch_ws);
    row.mse_to_source = eval::mse(cur, src);
    row.alignment = probe ? eval::alignment(*probe, cur, scenes::PromptCode{st.c_tgt})
                          : detail::kNaN;
    row.field_norm = st.trajectory.empty() ? 0.0 : st.trajectory.back().field_norm;
    row.psi_loss = last_psi;
    row.phi_loss = last_phi;
    if (row.mse_to_source > cfg.divergence_threshold) st.diverged = true;
    return row;
  };

  if (st.step == 0 && st.trajectory.empty()) st.trajectory.push_back(log_row(0));

  EditStateT<S, Gen> last_good = st;

  while (st.step < until_step) {
    const int i = st.step;
    const double progress = cfg.steps > 0 ? double(i) / double(cfg.steps) : 0.0;
    const double lr_i = cfg.gen_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(progress, 1.0)));

    distill::DistillStepT<S> ds;
    ds.pose = scenes::sample_pose(st.main_rng);
    ds.c_src = st.c_src;
    ds.c_tgt = st.c_tgt;
    ds.guidance_base.scale = cfg.guidance_base;
    ds.guidance_adapter.scale = cfg.guidance_adapter;
    ds.lambda = cfg.lambda;

    ImageT<S> x = detail::render_view<S>(st.edited, ds.pose, res, gen_ws);

    const bool needs_source_view =
        spatial_on || cfg.method == Method::dds || cfg.method == Method::piva;
    ImageT<S> x_src;
    if (needs_source_view) x_src = detail::render_view<S>(st.source, ds.pose, res, scratch_ws);
    ImageT<S> spatial;
    if (spatial_on) spatial = scenes::depth_proxy(x_src);
    const ImageT<S>* sp = spatial_on ? &spatial : nullptr;

    auto [t_min, t_max] = distill::anneal_time(std::min(progress, 1.0), sched.T);
    ds.t = st.main_rng.uniform_int(t_min, t_max);
    ds.eps = x;
    ds.eps.data = st.main_rng.template normal_vec<S>(x.size());

    distill::GradientFieldT<S> field;
    try {
      switch (cfg.method) {
        case Method::sds:
          field = distill::sds_gradient(den, sched, x, ds, ws, sp);
          break;
        case Method::vsd:
          field = distill::vsd_gradient(den, sched, *st.phi, x, ds, ws, sp);
          break;
        case Method::dds:
          field = distill::dds_gradient(den, sched, x, x_src, ds, ws, sp);
          break;
        case Method::dds_shared:
          field = distill::dds_shared_gradient(den, sched, x, ds, ws, sp);
          break;
        case Method::piva:
          field = distill::piva_gradient(den, sched, *st.psi, *st.phi, x, ds, ws, sp);
          break;
      }
    } catch (const std::runtime_error& e) {
      st = last_good;
      st.aborted = true;
      st.abort_reason = e.what();
      return;
    }

    const double field_norm = double(field.delta.data.abs().maxCoeff());
    if (!std::isfinite(field_norm)) {
      st = last_good;
      st.aborted = true;
      st.abort_reason = "non-finite gradient field at step " + std::to_string(i);
      return;
    }
    field.delta.data =
        field.delta.data.max(S(-cfg.field_clip)).min(S(cfg.field_clip));

    grad.setZero();
    detail::render_view_backward<S>(st.edited, field.delta, ds.pose, gen_ws, grad);
    if constexpr (GenTraits<Gen>::kUsesAdam)
      st.gen_opt->step(st.edited.params(), grad, lr_i);
    else
      st.edited.params() -= S(lr_i) * grad;

    if (!st.edited.params().isFinite().all()) {
      st = last_good;
      st.aborted = true;
      st.abort_reason = "non-finite generator parameters at step " + std::to_string(i);
      return;
    }

    if (cfg.method == Method::piva || cfg.method == Method::vsd) {
      try {
        if (cfg.method == Method::piva) {
          auto [pl, fl] = distill::update_adapters(den, sched, *st.psi, *st.phi,
                                                   *st.adapter_opt, x_src, x, ds.t, st.c_src,
                                                   st.c_tgt, st.adapter_rng, ws, sp);
          last_psi = pl;
          last_phi = fl;
        } else {
          last_phi = distill::adapter_loss_step(den, sched, *st.phi, st.adapter_opt->phi,
                                                st.adapter_opt->lr, x, ds.t, st.c_tgt,
                                                st.adapter_rng, ws, sp);
        }
      } catch (const std::runtime_error& e) {
        st = last_good;
        st.aborted = true;
        st.abort_reason = e.what();
        return;
      }
    }

    st.step = i + 1;
    if (st.step % cfg.log_every == 0 || st.step == until_step) {
      TrajectoryRow row = log_row(st.step);
      row.field_norm = field_norm;
      st.trajectory.push_back(row);
      last_good = st;
    }
  }
}

/// One-call entry point: fresh state, run to cfg.steps.
template <class S, class Gen>
EditStateT<S, Gen> run_edit(const Gen& source, int c_src, int c_tgt,
                            const ConditionedDenoiser<S>& den, const NoiseScheduleT<S>& sched,
                            const EditConfig& cfg,
                            const eval::AttributeProbe<S>* probe = nullptr) {
  EditStateT<S, Gen> st = init_edit<S>(source, c_src, c_tgt, den, cfg);
  continue_edit(st, den, sched, cfg.steps, probe);
  return st;
}

/// Per-lambda medians over a shared seed set.
struct LambdaSummary {
  double lambda = 0;
  double median_mse_to_source = 0;
  double median_alignment = 0;
  int runs = 0;
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Runs the same edit at each lambda with a shared seed set and reports the
/// preservation / alignment medians, tracing the identity-strength trade-off.
template <class S, class Gen>
std::vector<LambdaSummary> ablate_lambda(const Gen& source, int c_src, int c_tgt,
                                         const ConditionedDenoiser<S>& den,
                                         const NoiseScheduleT<S>& sched,
                                         const std::vector<double>& lambdas,
                                         const std::vector<std::uint64_t>& seeds,
                                         EditConfig cfg,
                                         const eval::AttributeProbe<S>* probe = nullptr) {
  if (lambdas.size() < 2)
    throw std::invalid_argument("ablate_lambda: need at least two lambda values");
  if (seeds.empty()) throw std::invalid_argument("ablate_lambda: need at least one seed");
  cfg.method = Method::piva;
  std::vector<LambdaSummary> out;
  for (double lam : lambdas) {
    cfg.lambda = lam;
    std::vector<double> mses, aligns;
    for (std::uint64_t seed : seeds) {
      cfg.seed = seed;
      auto st = run_edit<S>(source, c_src, c_tgt, den, sched, cfg, probe);
      const TrajectoryRow& last = st.trajectory.back();
      mses.push_back(last.mse_to_source);
      aligns.push_back(last.alignment);
    }
    LambdaSummary s;
    s.lambda = lam;
    s.median_mse_to_source = detail::median(mses);
    s.median_alignment = detail::median(aligns);
    s.runs = int(seeds.size());
    out.push_back(s);
  }
  return out;
}

}  // namespace sdlab::edit
