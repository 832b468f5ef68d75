#pragma once

#include <sdlab/core/blob.hpp>
#include <sdlab/diffusion/denoiser.hpp>
#include <sdlab/diffusion/schedule.hpp>

#include <string>

namespace sdlab::diffusion {

template <class S>
ojson schedule_manifest(const NoiseScheduleT<S>& sched) {
  ojson j;
  j["T"] = sched.T;
  j["cosine_offset"] = sched.cosine_offset;
  j["terminal_alpha"] = sched.terminal_alpha;
  return j;
}

template <class S>
NoiseScheduleT<S> schedule_from_manifest(const json& j) {
  return NoiseScheduleT<S>(j.at("T").get<int>(), j.at("cosine_offset").get<double>(),
                           j.at("terminal_alpha").get<double>());
}

inline ojson unet_manifest(const UNetConfig& cfg) {
  ojson j;
  j["res"] = cfg.res;
  j["img_channels"] = cfg.img_channels;
  j["spatial_cond"] = cfg.spatial_cond;
  j["base_width"] = cfg.base_width;
  j["mult"] = cfg.mult;
  j["emb_dim"] = cfg.emb_dim;
  j["time_feat_dim"] = cfg.time_feat_dim;
  j["groups"] = cfg.groups;
  j["vocab"] = cfg.vocab;
  j["uses_null_condition"] = cfg.uses_null_condition;
  return j;
}

inline UNetConfig unet_from_manifest(const json& j) {
  UNetConfig cfg;
  cfg.res = j.at("res").get<int>();
  cfg.img_channels = j.at("img_channels").get<int>();
  cfg.spatial_cond = j.at("spatial_cond").get<bool>();
  cfg.base_width = j.at("base_width").get<int>();
  cfg.mult = j.at("mult").get<std::array<int, 3>>();
  cfg.emb_dim = j.at("emb_dim").get<int>();
  cfg.time_feat_dim = j.at("time_feat_dim").get<int>();
  cfg.groups = j.at("groups").get<int>();
  cfg.vocab = j.at("vocab").get<int>();
  cfg.uses_null_condition = j.at("uses_null_condition").get<bool>();
  return cfg;
}

/// Denoiser checkpoint: weight blob plus an authoritative manifest
/// describing schedule, architecture and provenance.
template <class S>
void save_denoiser(const std::string& path, const ConditionedDenoiser<S>& den,
                   const NoiseScheduleT<S>& sched, std::uint64_t seed, int train_steps) {
  BlobWriter w;
  w.add("params", den.params().data);
  ojson m;
  m["kind"] = "denoiser";
  m["schedule"] = schedule_manifest(sched);
  m["unet"] = unet_manifest(den.config());
  m["seed"] = seed;
  m["train_steps"] = train_steps;
  w.write(path, m);
}

template <class S>
struct LoadedDenoiser {
  ConditionedDenoiser<S> model;
  NoiseScheduleT<S> sched;
  json manifest;
};

template <class S>
LoadedDenoiser<S> load_denoiser(const std::string& path) {
  BlobReader r(path);
  const json& m = r.manifest();
  if (!m.contains("kind") || m["kind"] != "denoiser")
    throw BlobError("not a denoiser checkpoint: " + path);
  UNetConfig cfg = unet_from_manifest(m.at("unet"));
  LoadedDenoiser<S> out{ConditionedDenoiser<S>(cfg),
                        schedule_from_manifest<S>(m.at("schedule")), m};
  VecX<S> params = r.tensor<S>("params");
  if (params.size() != out.model.params().size())
    throw BlobError("parameter count does not match architecture manifest");
  out.model.params().data = params;
  return out;
}

}  // namespace sdlab::diffusion
