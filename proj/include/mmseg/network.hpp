#ifndef MMSEG_NETWORK_HPP
#define MMSEG_NETWORK_HPP

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmseg/attention.hpp"
#include "mmseg/correlation.hpp"
#include "mmseg/layers.hpp"
#include "mmseg/tensor.hpp"
#include "mmseg/volume.hpp"

namespace mmseg {

struct NetworkConfig {
  Index modalities = 4;
  Index classes = kNumClasses;
  Index base_filters = 8;
  Index levels = 4;
  Index dilation_a = 2;
  Index dilation_b = 4;
  double lambda = 0.1;
  Grid3 input{128, 128, 128};
  bool use_fusion = true;
  bool use_correlation = true;
  ModalityPairing pairing = ModalityPairing::chain(4);

  Index channels(Index level) const { return base_filters << level; }
  Index bottleneck_channels() const { return channels(levels - 1); }
  /// Spatial dims must be divisible by this.
  Index granularity() const { return Index{1} << (levels - 1); }
  std::vector<std::string> modality_names() const;

  /// Throws CONFIG_ERROR.
  void validate() const;
  void validate_grid(const Grid3& g) const;

  /// key=value lines; parse() accepts what serialize() writes.
  std::string serialize() const;
  static NetworkConfig parse(const std::string& text);
  friend bool operator==(const NetworkConfig& a, const NetworkConfig& b) {
    return a.serialize() == b.serialize();
  }
};

template <typename Scalar>
struct EncoderLevel {
  ConvBlock<Scalar> entry; // stride 2 on every level but the first
  ResDilBlock<Scalar> res;
};

template <typename Scalar>
struct Encoder {
  std::vector<EncoderLevel<Scalar>> levels;
};

template <typename Scalar>
struct DecoderLevel {
  std::optional<ConvBlock<Scalar>> up;      // absent at the bottleneck
  std::optional<DualFusion<Scalar>> fusion; // absent without fusion
  ResDilBlock<Scalar> res;
  std::optional<Conv3d<Scalar>> head;       // deep-supervision logits
};

/// All trainable state of the network. Structure is a pure function of the
/// config; values come from initialize() or a checkpoint.
template <typename Scalar>
class Model {
public:
  NetworkConfig config;
  std::vector<Encoder<Scalar>> encoders;
  std::vector<DecoderLevel<Scalar>> decoder; // indexed by level
  std::vector<CorrelationMlp<Scalar>> correlation; // one per pair

  Model() = default;
  explicit Model(const NetworkConfig& cfg);

  static Model create(const NetworkConfig& cfg, std::uint64_t seed) {
    Model m(cfg);
    m.initialize(seed);
    return m;
  }

  /// He-uniform weights, zero biases, unit norm gains.
  void initialize(std::uint64_t seed);

  template <class F>
  void for_each_param(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    visit(*this, f);
  }

  Index parameter_count() const {
    Index n = 0;
    for_each_param([&n](const std::string&, const Param<Scalar>& p) { n += p.size(); });
    return n;
  }

  void zero_grad() {
    for_each_param([](const std::string&, Param<Scalar>& p) { p.zero_grad(); });
  }

  template <typename Other>
  Model<Other> cast() const {
    Model<Other> out(config);
    std::vector<const Param<Scalar>*> src;
    for_each_param([&src](const std::string&, const Param<Scalar>& p) { src.push_back(&p); });
    std::size_t i = 0;
    out.for_each_param([&](const std::string&, Param<Other>& p) {
      p.value = src[i++]->value.template cast<Other>();
    });
    return out;
  }

private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    const auto names = self.config.modality_names();
    for (std::size_t m = 0; m < self.encoders.size(); ++m)
      for (std::size_t l = 0; l < self.encoders[m].levels.size(); ++l) {
        const std::string p =
            "encoder." + names[m] + ".level" + std::to_string(l);
        self.encoders[m].levels[l].entry.for_each_param(p + ".entry", f);
        self.encoders[m].levels[l].res.for_each_param(p + ".res", f);
      }
    for (std::size_t l = 0; l < self.decoder.size(); ++l) {
      auto& lvl = self.decoder[l];
      const std::string p = "decoder.level" + std::to_string(l);
      if (lvl.up) lvl.up->for_each_param(p + ".up", f);
      if (lvl.fusion) lvl.fusion->for_each_param(p + ".fusion", f);
      lvl.res.for_each_param(p + ".res", f);
      if (lvl.head) lvl.head->for_each_param(p + ".head", f);
    }
    for (std::size_t k = 0; k < self.correlation.size(); ++k)
      self.correlation[k].for_each_param("correlation.pair" + std::to_string(k), f);
  }
};

template <typename Scalar>
Model<Scalar>::Model(const NetworkConfig& cfg) : config(cfg) {
  config.validate();
  const Index L = cfg.levels;
  const Index M = cfg.modalities;
  encoders.resize(static_cast<std::size_t>(M));
  for (auto& enc : encoders)
    for (Index l = 0; l < L; ++l) {
      const Index in = l == 0 ? 1 : cfg.channels(l - 1);
      const Index out = cfg.channels(l);
      enc.levels.push_back({ConvBlock<Scalar>(in, out, l == 0 ? 1 : 2),
                            ResDilBlock<Scalar>(out, out, cfg.dilation_a, cfg.dilation_b)});
    }
  decoder.resize(static_cast<std::size_t>(L));
  for (Index l = 0; l < L; ++l) {
    auto& lvl = decoder[static_cast<std::size_t>(l)];
    const Index c = cfg.channels(l);
    const bool bottom = l == L - 1;
    const Index units = bottom ? M : M + 1;
    if (!bottom) lvl.up.emplace(cfg.channels(l + 1), c);
    if (cfg.use_fusion) lvl.fusion.emplace(units, c);
    lvl.res = ResDilBlock<Scalar>(units * c, c, cfg.dilation_a, cfg.dilation_b);
    if (!bottom) lvl.head.emplace(c, cfg.classes, 1);
  }
  if (cfg.use_correlation)
    for (Index k = 0; k < cfg.pairing.size(); ++k)
      correlation.emplace_back(cfg.bottleneck_channels());
}

template <typename Scalar>
void Model<Scalar>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& enc : encoders)
    for (auto& lvl : enc.levels) {
      lvl.entry.init(rng);
      lvl.res.init(rng);
    }
  for (auto& lvl : decoder) {
    if (lvl.up) lvl.up->init(rng);
    if (lvl.fusion) lvl.fusion->init(rng);
    lvl.res.init(rng);
    if (lvl.head) lvl.head->init_he_uniform(rng);
  }
  for (auto& mlp : correlation) mlp.init(rng);
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <typename Scalar>
struct EncoderTape {
  std::vector<ConvBlockCache<Scalar>> entry;
  std::vector<ResDilCache<Scalar>> res;
};

template <typename Scalar>
struct DecoderLevelTape {
  ConvBlockCache<Scalar> up;
  FusionCache<Scalar> fusion;
  ResDilCache<Scalar> res;
};

template <typename Scalar>
struct ModelTape {
  std::vector<EncoderTape<Scalar>> encoders;
  std::vector<DecoderLevelTape<Scalar>> decoder;
  std::vector<EstimateCache<Scalar>> estimate;
  std::vector<CorrelationParams<Scalar>> gamma;
  std::vector<Tensor5<Scalar>> bottleneck;
};

template <typename Scalar>
struct ForwardOutput {
  Tensor5<Scalar> logits;
  std::vector<Tensor5<Scalar>> bottleneck; // Z_i, one per modality
  std::vector<Tensor5<Scalar>> estimates;  // F_j, one per pair
  std::vector<AttentionWeights<Scalar>> attention; // per level, with fusion
};

/// Level features, shallow to deep. Level l has base * 2^l channels at
/// input / 2^l resolution.
template <typename Scalar>
std::vector<Tensor5<Scalar>> encoder_forward(const Encoder<Scalar>& enc,
                                             const Tensor5<Scalar>& x,
                                             EncoderTape<Scalar>* tape = nullptr) {
  std::vector<Tensor5<Scalar>> feats;
  if (tape) {
    tape->entry.resize(enc.levels.size());
    tape->res.resize(enc.levels.size());
  }
  const Tensor5<Scalar>* cur = &x;
  for (std::size_t l = 0; l < enc.levels.size(); ++l) {
    auto h = conv_block_forward(enc.levels[l].entry, *cur,
                                tape ? &tape->entry[l] : nullptr);
    feats.push_back(res_dil_forward(enc.levels[l].res, h,
                                    tape ? &tape->res[l] : nullptr));
    cur = &feats.back();
  }
  return feats;
}

/// Gradient w.r.t. each level output in, parameter gradients accumulated.
template <typename Scalar>
void encoder_backward(Encoder<Scalar>& enc, const EncoderTape<Scalar>& tape,
                      std::vector<Tensor5<Scalar>> d_feats) {
  for (std::size_t l = enc.levels.size(); l-- > 0;) {
    auto d = res_dil_backward(enc.levels[l].res, tape.res[l], d_feats[l]);
    d = conv_block_backward(enc.levels[l].entry, tape.entry[l], d);
    if (l > 0) d_feats[l - 1] += d;
  }
}

/// Decoder over per-modality encoder features (features[m][level]). At each
/// level the modality features, plus the upsampled decoder path above the
/// bottleneck, are fused and passed through a res_dil block; every
/// non-bottleneck level emits logits that are upsampled and summed.
template <typename Scalar>
Tensor5<Scalar> decoder_forward(const Model<Scalar>& model,
                                const std::vector<std::vector<Tensor5<Scalar>>>& features,
                                ModelTape<Scalar>* tape = nullptr,
                                std::vector<AttentionWeights<Scalar>>* attention = nullptr) {
  const auto& cfg = model.config;
  const Index L = cfg.levels;
  if (static_cast<Index>(features.size()) != cfg.modalities)
    throw Error(ErrorCode::ShapeMismatch, "decoder needs one feature list per modality");
  for (const auto& f : features)
    if (static_cast<Index>(f.size()) != L)
      throw Error(ErrorCode::ShapeMismatch, "decoder needs features for every level");
  if (tape) tape->decoder.resize(static_cast<std::size_t>(L));
  if (attention) attention->assign(static_cast<std::size_t>(L), {});

  Tensor5<Scalar> logits;
  Tensor5<Scalar> path;
  for (Index l = L - 1; l >= 0; --l) {
    const auto& lvl = model.decoder[static_cast<std::size_t>(l)];
    auto* lt = tape ? &tape->decoder[static_cast<std::size_t>(l)] : nullptr;
    std::vector<Tensor5<Scalar>> units;
    for (const auto& f : features) units.push_back(f[static_cast<std::size_t>(l)]);
    if (lvl.up)
      units.push_back(conv_block_forward(*lvl.up, upsample_nearest(path, 2),
                                         lt ? &lt->up : nullptr));
    auto cat = concat_channels(units);
    if (lvl.fusion)
      cat = dual_fusion_forward(*lvl.fusion, cat, lt ? &lt->fusion : nullptr,
                                attention ? &(*attention)[static_cast<std::size_t>(l)]
                                          : nullptr);
    path = res_dil_forward(lvl.res, cat, lt ? &lt->res : nullptr);
    if (lvl.head) {
      auto head = upsample_nearest(conv3d_forward(*lvl.head, path), Index{1} << l);
      if (logits.size() == 0)
        logits = std::move(head);
      else
        logits += head;
    }
  }
  return logits;
}

template <typename Scalar>
ForwardOutput<Scalar> model_forward(const Model<Scalar>& model,
                                    const std::vector<Tensor5<Scalar>>& inputs,
                                    ModelTape<Scalar>* tape = nullptr) {
  const auto& cfg = model.config;
  if (static_cast<Index>(inputs.size()) != cfg.modalities)
    throw Error(ErrorCode::ShapeMismatch,
                "expected " + std::to_string(cfg.modalities) + " modality inputs");
  for (const auto& x : inputs) {
    if (x.channels() != 1 || !(x.shape() == inputs.front().shape()))
      throw Error(ErrorCode::ShapeMismatch, "modality input " + to_string(x.shape()));
    const Index g = cfg.granularity();
    if (x.shape().depth % g || x.shape().height % g || x.shape().width % g)
      throw Error(ErrorCode::ShapeMismatch,
                  "input " + to_string(x.shape()) + " not divisible by " +
                      std::to_string(g));
  }
  if (tape) {
    tape->encoders.resize(inputs.size());
    tape->estimate.assign(cfg.pairing.pairs.size(), {});
    tape->gamma.assign(cfg.pairing.pairs.size(), {});
  }

  ForwardOutput<Scalar> out;
  std::vector<std::vector<Tensor5<Scalar>>> features;
  for (std::size_t m = 0; m < inputs.size(); ++m) {
    features.push_back(encoder_forward(model.encoders[m], inputs[m],
                                       tape ? &tape->encoders[m] : nullptr));
    out.bottleneck.push_back(features.back().back());
  }
  if (cfg.use_correlation)
    for (std::size_t k = 0; k < cfg.pairing.pairs.size(); ++k) {
      const auto& z = out.bottleneck[static_cast<std::size_t>(cfg.pairing.pairs[k].first)];
      EstimateCache<Scalar> ec;
      auto gamma = estimate_params(model.correlation[k], z, &ec);
      out.estimates.push_back(linear_correlate(z, gamma));
      if (tape) {
        tape->estimate[k] = std::move(ec);
        tape->gamma[k] = std::move(gamma);
      }
    }
  out.logits = decoder_forward(model, features, tape,
                               cfg.use_fusion ? &out.attention : nullptr);
  if (tape) tape->bottleneck = out.bottleneck;
  return out;
}

/// Back-propagate dL/dlogits plus optional direct gradients on the bottleneck
/// representations and on the correlation estimates.
template <typename Scalar>
void model_backward(Model<Scalar>& model, const ModelTape<Scalar>& tape,
                    const Tensor5<Scalar>& d_logits,
                    const std::vector<Tensor5<Scalar>>* d_bottleneck = nullptr,
                    const std::vector<Tensor5<Scalar>>* d_estimates = nullptr) {
  const auto& cfg = model.config;
  const Index L = cfg.levels;
  const auto M = static_cast<std::size_t>(cfg.modalities);

  std::vector<std::vector<Tensor5<Scalar>>> d_feats(M);
  for (std::size_t m = 0; m < M; ++m)
    for (const auto& c : tape.encoders[m].res)
      d_feats[m].emplace_back(c.output.shape());

  Tensor5<Scalar> d_path; // gradient flowing into level l's res output
  for (Index l = 0; l < L; ++l) {
    auto& lvl = model.decoder[static_cast<std::size_t>(l)];
    const auto& lt = tape.decoder[static_cast<std::size_t>(l)];
    Tensor5<Scalar> d(lt.res.output.shape());
    if (d_path.size() > 0) d += d_path;
    if (lvl.head)
      d += conv3d_backward(*lvl.head, lt.res.output,
                           upsample_nearest_backward(d_logits, Index{1} << l));
    auto d_cat = res_dil_backward(lvl.res, lt.res, d);
    if (lvl.fusion) d_cat = dual_fusion_backward(*lvl.fusion, lt.fusion, d_cat);
    const Index units = lvl.up ? cfg.modalities + 1 : cfg.modalities;
    auto parts = split_channels(d_cat, units);
    for (std::size_t m = 0; m < M; ++m) d_feats[m][static_cast<std::size_t>(l)] += parts[m];
    if (lvl.up)
      d_path = upsample_nearest_backward(
          conv_block_backward(*lvl.up, lt.up, parts[M]), 2);
  }

  const auto bottom = static_cast<std::size_t>(L - 1);
  if (d_bottleneck)
    for (std::size_t m = 0; m < M; ++m) d_feats[m][bottom] += (*d_bottleneck)[m];
  if (d_estimates && cfg.use_correlation)
    for (std::size_t k = 0; k < cfg.pairing.pairs.size(); ++k) {
      const auto src = static_cast<std::size_t>(cfg.pairing.pairs[k].first);
      d_feats[src][bottom] += correlation_block_backward(
          model.correlation[k], tape.estimate[k], tape.gamma[k],
          tape.bottleneck[src], (*d_estimates)[k]);
    }

  for (std::size_t m = 0; m < M; ++m)
    encoder_backward(model.encoders[m], tape.encoders[m], std::move(d_feats[m]));
}

} // namespace mmseg

#endif
