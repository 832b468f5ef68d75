#pragma once

#include <sdlab/core/blob.hpp>
#include <sdlab/edit/run.hpp>

#include <cmath>
#include <string>
#include <vector>

namespace sdlab::edit {

inline constexpr int kEditCheckpointVersion = 1;

namespace detail {

// JSON has no NaN literal; absent measurements round-trip through null.
inline ojson num_or_null(double v) {
  if (std::isnan(v)) return nullptr;
  return v;
}

inline double null_or_num(const ojson& v) {
  return v.is_null() ? kNaN : v.get<double>();
}

template <class S>
void add_adam(BlobWriter& w, const std::string& prefix, const diffusion::Adam<S>& a, ojson& m) {
  w.add(prefix + ".m", a.m);
  w.add(prefix + ".v", a.v);
  m[prefix + "_steps"] = a.steps;
}

template <class S>
void load_adam(const BlobReader& r, const std::string& prefix, diffusion::Adam<S>& a,
               const ojson& m) {
  a.m = r.template tensor<S>(prefix + ".m");
  a.v = r.template tensor<S>(prefix + ".v");
  a.steps = m.at(prefix + "_steps").get<long>();
}

inline ojson config_to_json(const EditConfig& c) {
  ojson j;
  j["method"] = method_name(c.method);
  j["lambda"] = c.lambda;
  j["steps"] = c.steps;
  j["guidance_base"] = c.guidance_base;
  j["guidance_adapter"] = c.guidance_adapter;
  j["gen_lr"] = c.gen_lr;
  j["adapter_lr"] = c.adapter_lr;
  j["adapter_rank"] = c.adapter_rank;
  j["seed"] = c.seed;
  j["log_every"] = c.log_every;
  j["divergence_threshold"] = c.divergence_threshold;
  j["field_clip"] = c.field_clip;
  return j;
}

inline EditConfig config_from_json(const ojson& j) {
  EditConfig c;
  c.method = method_from_name(j.at("method").get<std::string>());
  c.lambda = j.at("lambda").get<double>();
  c.steps = j.at("steps").get<int>();
  c.guidance_base = j.at("guidance_base").get<double>();
  c.guidance_adapter = j.at("guidance_adapter").get<double>();
  c.gen_lr = j.at("gen_lr").get<double>();
  c.adapter_lr = j.at("adapter_lr").get<double>();
  c.adapter_rank = j.at("adapter_rank").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.log_every = j.at("log_every").get<int>();
  c.divergence_threshold = j.at("divergence_threshold").get<double>();
  c.field_clip = j.at("field_clip").get<double>();
  return c;
}

template <class S>
ojson gen_to_json(const scenes::PixelCanvas<S>& g) {
  ojson j;
  j["kind"] = "pixel";
  j["res"] = g.res;
  return j;
}

template <class S>
ojson gen_to_json(const scenes::NeuralCanvas<S>& g) {
  ojson j;
  j["kind"] = "neural";
  j["hidden"] = g.config().hidden;
  j["depth"] = g.config().depth;
  j["octaves"] = g.config().octaves;
  return j;
}

template <class S>
scenes::PixelCanvas<S> gen_from_json(const ojson& j, const scenes::PixelCanvas<S>*) {
  if (j.at("kind").get<std::string>() != "pixel")
    throw BlobError("checkpoint generator kind is not 'pixel'");
  return scenes::PixelCanvas<S>(j.at("res").get<int>());
}

template <class S>
scenes::NeuralCanvas<S> gen_from_json(const ojson& j, const scenes::NeuralCanvas<S>*) {
  if (j.at("kind").get<std::string>() != "neural")
    throw BlobError("checkpoint generator kind is not 'neural'");
  scenes::NeuralCanvasConfig cfg;
  cfg.hidden = j.at("hidden").get<int>();
  cfg.depth = j.at("depth").get<int>();
  cfg.octaves = j.at("octaves").get<int>();
  return scenes::NeuralCanvas<S>(cfg);
}

}  // namespace detail

/// Serializes a full run state; restore + continue matches an uninterrupted
/// run step-for-step, so every tensor is stored at native precision.
template <class S, class Gen>
void checkpoint(const EditStateT<S, Gen>& st, const std::string& path) {
  BlobWriter w;
  w.add("theta_source", st.source.params());
  w.add("theta_edited", st.edited.params());
  ojson m;
  m["kind"] = "edit-state";
  m["version"] = kEditCheckpointVersion;
  m["generator"] = detail::gen_to_json(st.source);
  m["config"] = detail::config_to_json(st.cfg);
  m["c_src"] = st.c_src;
  m["c_tgt"] = st.c_tgt;
  m["step"] = st.step;
  m["diverged"] = st.diverged;
  m["aborted"] = st.aborted;
  m["abort_reason"] = st.abort_reason;
  m["rng_main"] = st.main_rng.save_state();
  m["rng_adapter"] = st.adapter_rng.save_state();
  if (st.psi) {
    w.add("psi.data", st.psi->arena.data);
    detail::add_adam(w, "opt_psi", st.adapter_opt->psi, m);
  }
  if (st.phi) {
    w.add("phi.data", st.phi->arena.data);
    detail::add_adam(w, "opt_phi", st.adapter_opt->phi, m);
  }
  if (st.gen_opt) detail::add_adam(w, "opt_gen", *st.gen_opt, m);
  ojson rows = ojson::array();
  for (const auto& r : st.trajectory)
    rows.push_back(ojson::array({r.step, detail::num_or_null(r.mse_to_source),
                                 detail::num_or_null(r.alignment),
                                 detail::num_or_null(r.field_norm),
                                 detail::num_or_null(r.psi_loss),
                                 detail::num_or_null(r.phi_loss)}));
  m["trajectory"] = std::move(rows);
  w.write(path, m);
}

template <class S, class Gen>
EditStateT<S, Gen> restore(const std::string& path, const ConditionedDenoiser<S>& den) {
  BlobReader r(path);
  const ojson& m = r.manifest();
  if (m.value("kind", "") != std::string("edit-state"))
    throw BlobError("not an edit checkpoint: " + path);
  if (m.at("version").get<int>() != kEditCheckpointVersion)
    throw BlobError("edit checkpoint version mismatch: refusing to load " + path);
  EditStateT<S, Gen> st;
  st.cfg = detail::config_from_json(m.at("config"));
  st.c_src = m.at("c_src").get<int>();
  st.c_tgt = m.at("c_tgt").get<int>();
  st.step = m.at("step").get<int>();
  st.diverged = m.at("diverged").get<bool>();
  st.aborted = m.at("aborted").get<bool>();
  st.abort_reason = m.at("abort_reason").get<std::string>();
  st.source = detail::gen_from_json<S>(m.at("generator"), static_cast<const Gen*>(nullptr));
  st.edited = st.source;
  st.source.params() = r.template tensor<S>("theta_source");
  st.edited.params() = r.template tensor<S>("theta_edited");
  st.main_rng.restore_state(m.at("rng_main").get<std::string>());
  st.adapter_rng.restore_state(m.at("rng_adapter").get<std::string>());
  Rng scratch(0);
  const bool has_psi = r.has_tensor("psi.data");
  const bool has_phi = r.has_tensor("phi.data");
  if (has_psi) {
    st.psi = den.make_adapters(scratch, st.cfg.adapter_rank);
    st.psi->arena.data = r.template tensor<S>("psi.data");
  }
  if (has_phi) {
    st.phi = den.make_adapters(scratch, st.cfg.adapter_rank);
    st.phi->arena.data = r.template tensor<S>("phi.data");
  }
  if (has_psi || has_phi) {
    st.adapter_opt.emplace(has_psi ? st.psi->size() : Index(0),
                           has_phi ? st.phi->size() : Index(0), st.cfg.adapter_lr);
    if (has_psi) detail::load_adam(r, "opt_psi", st.adapter_opt->psi, m);
    if (has_phi) detail::load_adam(r, "opt_phi", st.adapter_opt->phi, m);
  }
  if (r.has_tensor("opt_gen.m")) {
    st.gen_opt.emplace(st.edited.params().size());
    detail::load_adam(r, "opt_gen", *st.gen_opt, m);
  }
  for (const auto& row : m.at("trajectory")) {
    TrajectoryRow t;
    t.step = row.at(0).get<int>();
    t.mse_to_source = detail::null_or_num(row.at(1));
    t.alignment = detail::null_or_num(row.at(2));
    t.field_norm = detail::null_or_num(row.at(3));
    t.psi_loss = detail::null_or_num(row.at(4));
    t.phi_loss = detail::null_or_num(row.at(5));
    st.trajectory.push_back(t);
  }
  return st;
}

}  // namespace sdlab::edit
