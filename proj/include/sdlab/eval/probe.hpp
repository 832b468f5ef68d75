#pragma once

#include <sdlab/core/blob.hpp>
#include <sdlab/core/image.hpp>
#include <sdlab/core/rng.hpp>
#include <sdlab/diffusion/denoiser.hpp>
#include <sdlab/diffusion/nn.hpp>
#include <sdlab/scenes/pose.hpp>
#include <sdlab/scenes/rasterize.hpp>
#include <sdlab/scenes/scene.hpp>

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdlab::eval {

using diffusion::GroupNormCache;

struct ProbeConfig {
  int res = 32;
  std::array<int, 3> widths = {16, 32, 64};
  int groups = 4;
  int steps = 2000;
  int batch = 32;
  double lr = 2e-3;
  double noise_max = 0.08;  // augmentation range for robustness to samples
  double holdout_frac = 0.1;
  double certify_threshold = 0.95;
  std::uint64_t seed = 17;
};

struct ProbeHeads {
  VecX<double> shape;  // per-class probabilities
  VecX<double> color;
  VecX<double> accessory;
};

/// Three-headed convolutional attribute classifier. Its probabilities stand
/// in for prompt-alignment scores and its pooled features for perceptual
/// distance.
template <class S>
class AttributeProbe {
 public:
  struct Workspace {
    std::vector<MatX<S>> conv_P, conv_in;
    std::vector<GroupNormCache<S>> gn;
    std::vector<MatX<S>> silu_in;
    MatX<S> feats;  // pooled penultimate features, n x widths[2]
    int n = 0;
  };

  explicit AttributeProbe(const ProbeConfig& cfg = {}) : cfg_(cfg) {
    int cin = 3;
    for (int i = 0; i < 3; ++i) {
      const int cout = cfg.widths[std::size_t(i)];
      const std::string nm = "conv" + std::to_string(i);
      w_.push_back(arena_.allocate(nm + ".w", Index(cin) * 9 * cout));
      b_.push_back(arena_.allocate(nm + ".b", cout));
      g_.push_back(arena_.allocate(nm + ".gamma", cout));
      be_.push_back(arena_.allocate(nm + ".beta", cout));
      cin = cout;
    }
    const int f = cfg.widths[2];
    head_w_ = {arena_.allocate("head_shape.w", Index(f) * scenes::kNumShapes),
               arena_.allocate("head_color.w", Index(f) * scenes::kNumColors),
               arena_.allocate("head_acc.w", Index(f) * scenes::kNumAccessories)};
    head_b_ = {arena_.allocate("head_shape.b", scenes::kNumShapes),
               arena_.allocate("head_color.b", scenes::kNumColors),
               arena_.allocate("head_acc.b", scenes::kNumAccessories)};
    arena_.finalize();
  }

  const ProbeConfig& config() const { return cfg_; }
  diffusion::ParamArena<S>& params() { return arena_; }
  const diffusion::ParamArena<S>& params() const { return arena_; }
  bool certified() const { return certified_; }
  const std::array<double, 3>& holdout_accuracy() const { return holdout_acc_; }
  void set_certified(const std::array<double, 3>& acc, bool ok) {
    holdout_acc_ = acc;
    certified_ = ok;
  }

  void init_params(Rng& rng) {
    int cin = 3;
    for (int i = 0; i < 3; ++i) {
      const int cout = cfg_.widths[std::size_t(i)];
      const double std = std::sqrt(2.0 / (cin * 9.0));
      auto w = arena_.data.segment(w_[std::size_t(i)], Index(cin) * 9 * cout);
      for (Index k = 0; k < w.size(); ++k) w[k] = S(std * rng.normal());
      arena_.data.segment(g_[std::size_t(i)], cout).setConstant(S(1));
      cin = cout;
    }
    const int f = cfg_.widths[2];
    const int outs[3] = {scenes::kNumShapes, scenes::kNumColors, scenes::kNumAccessories};
    for (int h = 0; h < 3; ++h) {
      auto w = arena_.data.segment(head_w_[std::size_t(h)], Index(f) * outs[h]);
      const double std = std::sqrt(1.0 / f);
      for (Index k = 0; k < w.size(); ++k) w[k] = S(std * rng.normal());
    }
  }

  Workspace make_workspace() const {
    Workspace ws;
    ws.conv_P.resize(3);
    ws.conv_in.resize(3);
    ws.gn.resize(3);
    ws.silu_in.resize(3);
    return ws;
  }

  /// Logits for each head; x is (n*res^2 x 3).
  std::array<MatX<S>, 3> forward(const MatX<S>& x, int n, Workspace& ws) const {
    if (x.rows() != Index(n) * cfg_.res * cfg_.res)
      throw std::invalid_argument("probe: activation rows do not match batch");
    ws.n = n;
    MatX<S> h = x;
    int size = cfg_.res, cin = 3;
    for (int i = 0; i < 3; ++i) {
      const int cout = cfg_.widths[std::size_t(i)];
      auto& P = ws.conv_P[std::size_t(i)];
      ws.conv_in[std::size_t(i)] = h;
      diffusion::im2col(h, n, size, size, 3, 2, 1, P);
      Eigen::Map<const MatX<S>> W(arena_.data.data() + w_[std::size_t(i)], Index(cin) * 9, cout);
      Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> bb(
          arena_.data.data() + b_[std::size_t(i)], cout);
      h = P * W;
      h.rowwise() += bb;
      auto gamma = arena_.data.segment(g_[std::size_t(i)], cout);
      auto beta = arena_.data.segment(be_[std::size_t(i)], cout);
      h = diffusion::groupnorm_forward(h, n, cfg_.groups, gamma, beta, ws.gn[std::size_t(i)]);
      ws.silu_in[std::size_t(i)] = h;
      h = diffusion::silu(h);
      size /= 2;
      cin = cout;
    }
    // Global average pool over the remaining grid.
    const Index hw = Index(size) * size;
    ws.feats.resize(n, cin);
    for (int b = 0; b < n; ++b)
      ws.feats.row(b) = h.middleRows(Index(b) * hw, hw).colwise().mean();
    const int outs[3] = {scenes::kNumShapes, scenes::kNumColors, scenes::kNumAccessories};
    std::array<MatX<S>, 3> logits;
    for (int hd = 0; hd < 3; ++hd) {
      Eigen::Map<const MatX<S>> W(arena_.data.data() + head_w_[std::size_t(hd)], cin, outs[hd]);
      Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> bb(
          arena_.data.data() + head_b_[std::size_t(hd)], outs[hd]);
      logits[std::size_t(hd)] = ws.feats * W;
      logits[std::size_t(hd)].rowwise() += bb;
    }
    return logits;
  }

  /// Backward from per-head logit gradients; accumulates into arena.grad.
  void backward(const std::array<MatX<S>, 3>& dlogits, Workspace& ws) {
    const int n = ws.n;
    int cin = cfg_.widths[2];
    MatX<S> dfeat = MatX<S>::Zero(n, cin);
    const int outs[3] = {scenes::kNumShapes, scenes::kNumColors, scenes::kNumAccessories};
    for (int hd = 0; hd < 3; ++hd) {
      Eigen::Map<const MatX<S>> W(arena_.data.data() + head_w_[std::size_t(hd)], cin, outs[hd]);
      Eigen::Map<MatX<S>> dW(arena_.grad.data() + head_w_[std::size_t(hd)], cin, outs[hd]);
      dW.noalias() += ws.feats.transpose() * dlogits[std::size_t(hd)];
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> db(
          arena_.grad.data() + head_b_[std::size_t(hd)], outs[hd]);
      db += dlogits[std::size_t(hd)].colwise().sum();
      dfeat.noalias() += dlogits[std::size_t(hd)] * W.transpose();
    }
    int size = cfg_.res / 8;
    const Index hw = Index(size) * size;
    MatX<S> d(Index(n) * hw, cin);
    for (int b = 0; b < n; ++b)
      d.middleRows(Index(b) * hw, hw) = (MatX<S>::Ones(hw, 1) / S(hw)) * dfeat.row(b);
    for (int i = 2; i >= 0; --i) {
      const int cout = cfg_.widths[std::size_t(i)];
      const int cprev = i == 0 ? 3 : cfg_.widths[std::size_t(i - 1)];
      d = diffusion::silu_backward(d, ws.silu_in[std::size_t(i)]);
      auto gamma = arena_.data.segment(g_[std::size_t(i)], cout);
      auto dgamma = arena_.grad.segment(g_[std::size_t(i)], cout);
      auto dbeta = arena_.grad.segment(be_[std::size_t(i)], cout);
      d = diffusion::groupnorm_backward(d, n, cfg_.groups, gamma, ws.gn[std::size_t(i)],
                                        [&](Index k) -> S& { return dgamma[k]; },
                                        [&](Index k) -> S& { return dbeta[k]; });
      const auto& P = ws.conv_P[std::size_t(i)];
      Eigen::Map<MatX<S>> dW(arena_.grad.data() + w_[std::size_t(i)], Index(cprev) * 9, cout);
      dW.noalias() += P.transpose() * d;
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> db(arena_.grad.data() + b_[std::size_t(i)],
                                                         cout);
      db += d.colwise().sum();
      Eigen::Map<const MatX<S>> W(arena_.data.data() + w_[std::size_t(i)], Index(cprev) * 9,
                                  cout);
      MatX<S> dP = d * W.transpose();
      size *= 2;
      MatX<S> dh = MatX<S>::Zero(Index(n) * size * size, cprev);
      diffusion::col2im(dP, n, size, size, 3, 2, 1, dh);
      d = std::move(dh);
    }
  }

  /// Per-head class probabilities for one image.
  ProbeHeads predict(const ImageT<S>& img) const {
    Workspace ws = make_workspace();
    auto logits = forward(diffusion::image_to_act(img), 1, ws);
    ProbeHeads out;
    out.shape = softmax_row(logits[0]);
    out.color = softmax_row(logits[1]);
    out.accessory = softmax_row(logits[2]);
    return out;
  }

  /// Pooled penultimate features of one image.
  VecX<double> features(const ImageT<S>& img) const {
    Workspace ws = make_workspace();
    forward(diffusion::image_to_act(img), 1, ws);
    return ws.feats.row(0).transpose().array().template cast<double>();
  }

 private:
  ProbeConfig cfg_;
  diffusion::ParamArena<S> arena_;
  std::vector<Index> w_, b_, g_, be_;
  std::array<Index, 3> head_w_{}, head_b_{};
  bool certified_ = false;
  std::array<double, 3> holdout_acc_{};

  static VecX<double> softmax_row(const MatX<S>& logits) {
    VecX<double> v = logits.row(0).transpose().array().template cast<double>();
    const double m = v.maxCoeff();
    v = (v - m).exp();
    return v / v.sum();
  }
};

/// Certification-gated scores -------------------------------------------------

struct ProbeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class S>
void require_certified(const AttributeProbe<S>& probe) {
  if (!probe.certified())
    throw ProbeError("probe is not certified: train to >= 95% held-out accuracy first");
}

/// Geometric mean of the probe's probabilities of the target attributes.
template <class S>
double alignment(const AttributeProbe<S>& probe, const ImageT<S>& img,
                 const scenes::SceneSpec& target) {
  require_certified(probe);
  ProbeHeads p = probe.predict(img);
  const double ps = p.shape[int(target.shape)];
  const double pc = p.color[target.color_id];
  const double pa = p.accessory[int(target.accessory)];
  return std::cbrt(ps * pc * pa);
}

template <class S>
double alignment(const AttributeProbe<S>& probe, const ImageT<S>& img,
                 scenes::PromptCode code) {
  scenes::SceneSpec spec;
  spec.shape = code.shape();
  spec.color_id = code.color_id();
  spec.accessory = code.accessory();
  return alignment(probe, img, spec);
}

/// Mean squared distance between pooled features; the perceptual-distance
/// stand-in.
template <class S>
double feature_distance(const AttributeProbe<S>& probe, const ImageT<S>& a, const ImageT<S>& b) {
  require_certified(probe);
  VecX<double> fa = probe.features(a);
  VecX<double> fb = probe.features(b);
  return (fa - fb).square().mean();
}

/// Training --------------------------------------------------------------------

namespace detail {

template <class S>
MatX<S> cross_entropy_backward(const MatX<S>& logits, const std::vector<int>& labels,
                               double* loss_acc) {
  MatX<S> d(logits.rows(), logits.cols());
  for (Index b = 0; b < logits.rows(); ++b) {
    VecX<double> row = logits.row(b).transpose().array().template cast<double>();
    const double m = row.maxCoeff();
    VecX<double> e = (row - m).exp();
    const double z = e.sum();
    if (loss_acc) *loss_acc += std::log(z) + m - row[labels[std::size_t(b)]];
    for (Index k = 0; k < logits.cols(); ++k) d(b, k) = S(e[k] / z);
    d(b, labels[std::size_t(b)]) -= S(1);
  }
  return d;
}

}  // namespace detail

/// Trains the probe on renders of the given scene specs with pose and noise
/// augmentation, then certifies it on a held-out slice. Throws ProbeError if
/// any head falls below the certification threshold.
template <class S>
AttributeProbe<S> train_probe(const std::vector<scenes::SceneSpec>& specs,
                              const ProbeConfig& cfg = {}) {
  if (specs.size() < 20) throw std::invalid_argument("train_probe: need at least 20 scenes");
  AttributeProbe<S> probe(cfg);
  Rng rng(cfg.seed);
  probe.init_params(rng);
  Rng aug_rng = rng.fork(1);

  const std::size_t holdout = std::max<std::size_t>(
      8, std::size_t(std::llround(double(specs.size()) * cfg.holdout_frac)));
  const std::size_t n_train = specs.size() - holdout;

  auto render_aug = [&](const scenes::SceneSpec& spec, bool augment) {
    ImageT<S> img = scenes::rasterize(spec, cfg.res).template cast<S>();
    if (!augment) return img;
    scenes::ViewPose pose = scenes::sample_pose(aug_rng);
    img = scenes::pose_sample(img, pose, cfg.res);
    const double sd = aug_rng.uniform(0.0, cfg.noise_max);
    if (sd > 0)
      for (auto& v : img.data) v += S(sd * aug_rng.normal());
    return img;
  };

  diffusion::Adam<S> opt(probe.params().data.size());
  auto ws = probe.make_workspace();
  const Index hw = Index(cfg.res) * cfg.res;
  for (int step = 0; step < cfg.steps; ++step) {
    MatX<S> x(Index(cfg.batch) * hw, 3);
    std::vector<int> y_shape, y_color, y_acc;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& spec = specs[aug_rng.uniform_int(n_train)];
      ImageT<S> img = render_aug(spec, true);
      x.middleRows(Index(b) * hw, hw) = diffusion::image_to_act(img);
      y_shape.push_back(int(spec.shape));
      y_color.push_back(spec.color_id);
      y_acc.push_back(int(spec.accessory));
    }
    auto logits = probe.forward(x, cfg.batch, ws);
    double loss = 0;
    std::array<MatX<S>, 3> d = {
        detail::cross_entropy_backward(logits[0], y_shape, &loss),
        detail::cross_entropy_backward(logits[1], y_color, &loss),
        detail::cross_entropy_backward(logits[2], y_acc, &loss)};
    if (!std::isfinite(loss))
      throw std::runtime_error("train_probe: non-finite loss at step " + std::to_string(step));
    for (auto& m : d) m /= S(cfg.batch);
    probe.params().zero_grad();
    probe.backward(d, ws);
    opt.step(probe.params().data, probe.params().grad, S(cfg.lr));
  }

  // Certify on renders the trainer never saw (clean and augmented views).
  std::array<int, 3> correct{}, total{};
  for (std::size_t i = n_train; i < specs.size(); ++i) {
    for (int rep = 0; rep < 4; ++rep) {
      ImageT<S> img = render_aug(specs[i], rep > 0);
      ProbeHeads p = probe.predict(img);
      Index am;
      p.shape.maxCoeff(&am);
      correct[0] += int(am) == int(specs[i].shape);
      p.color.maxCoeff(&am);
      correct[1] += int(am) == specs[i].color_id;
      p.accessory.maxCoeff(&am);
      correct[2] += int(am) == int(specs[i].accessory);
      for (auto& t : total) ++t;
    }
  }
  std::array<double, 3> acc{};
  bool ok = true;
  for (int h = 0; h < 3; ++h) {
    acc[std::size_t(h)] = double(correct[std::size_t(h)]) / total[std::size_t(h)];
    ok = ok && acc[std::size_t(h)] >= cfg.certify_threshold;
  }
  probe.set_certified(acc, ok);
  if (!ok)
    throw ProbeError("probe certification failed: held-out accuracy " +
                     std::to_string(acc[0]) + "/" + std::to_string(acc[1]) + "/" +
                     std::to_string(acc[2]) + " (need >= " +
                     std::to_string(cfg.certify_threshold) + " per head)");
  return probe;
}

/// Serialization ---------------------------------------------------------------

template <class S>
void save_probe(const std::string& path, const AttributeProbe<S>& probe) {
  BlobWriter w;
  w.add("params", probe.params().data.template cast<double>());
  ojson m;
  m["kind"] = "probe";
  m["res"] = probe.config().res;
  m["widths"] = probe.config().widths;
  m["groups"] = probe.config().groups;
  m["certified"] = probe.certified();
  m["holdout_accuracy"] = probe.holdout_accuracy();
  w.write(path, m);
}

template <class S>
AttributeProbe<S> load_probe(const std::string& path) {
  BlobReader r(path);
  const ojson& m = r.manifest();
  if (m.value("kind", "") != std::string("probe"))
    throw BlobError("not a probe checkpoint: " + path);
  ProbeConfig cfg;
  cfg.res = m.at("res").get<int>();
  cfg.widths = m.at("widths").get<std::array<int, 3>>();
  cfg.groups = m.at("groups").get<int>();
  AttributeProbe<S> probe(cfg);
  VecX<S> p = r.template tensor<S>("params");
  if (p.size() != probe.params().data.size())
    throw BlobError("probe checkpoint parameter count mismatch");
  probe.params().data = p;
  std::array<double, 3> acc = m.at("holdout_accuracy").get<std::array<double, 3>>();
  probe.set_certified(acc, m.at("certified").get<bool>());
  return probe;
}

}  // namespace sdlab::eval
