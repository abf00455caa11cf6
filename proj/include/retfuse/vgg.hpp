#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "retfuse/autodiff.hpp"

namespace retfuse::nn {

// Frozen VGG-16 feature backbone, blocks 1-4 (conv1_1 .. relu4_3). Taps sit on
// the last activation of each block:
//   k=1 relu1_2  64ch  full res      k=3 relu3_3  256ch  1/4 res
//   k=2 relu2_2 128ch  1/2 res       k=4 relu4_3  512ch  1/8 res
// Inputs are replicated 1->3 channels if needed and normalized with the
// backbone's training-corpus statistics. Weights never enter the tape as
// trainable leaves, so their gradient is structurally zero.
template <typename T>
class VggFeatures {
 public:
  static constexpr int kNumConvs = 10;
  static constexpr std::array<int, 4> kTapChannels{64, 128, 256, 512};
  // Convolution layout: {in, out, block} per conv, pools after convs 1,3,6.
  struct ConvDef {
    const char* name;
    int in, out;
    bool pool_before;  // 2x2 maxpool applied before this conv
    int tap_after;     // 1-based tap index emitted after this conv's ReLU, 0 = none
  };
  static const std::array<ConvDef, kNumConvs>& conv_defs() {
    static const std::array<ConvDef, kNumConvs> defs{{
        {"conv1_1", 3, 64, false, 0},
        {"conv1_2", 64, 64, false, 1},
        {"conv2_1", 64, 128, true, 0},
        {"conv2_2", 128, 128, false, 2},
        {"conv3_1", 128, 256, true, 0},
        {"conv3_2", 256, 256, false, 0},
        {"conv3_3", 256, 256, false, 3},
        {"conv4_1", 256, 512, true, 0},
        {"conv4_2", 512, 512, false, 0},
        {"conv4_3", 512, 512, false, 4},
    }};
    return defs;
  }

  // Weights from the published pretrained archive, converted by
  // scripts/fetch_vgg16_weights.py into the project checkpoint format.
  static VggFeatures load(const std::filesystem::path& archive);

  // Seeded random-init backbone: same architecture and code path, hermetic for
  // tests, smoke configs and no-pretraining ablations.
  static VggFeatures random(std::uint64_t seed) {
    VggFeatures v;
    for (const auto& def : conv_defs()) {
      Rng rng(derive_seed(seed, std::string("vgg16.") + def.name));
      const double bound = std::sqrt(6.0 / (static_cast<double>(def.in) * 9));
      v.weights_.push_back(Tensor<T>::uniform(def.out, def.in, 3, 3, rng,
                                              static_cast<T>(-bound),
                                              static_cast<T>(bound)));
      v.biases_.push_back(Tensor<T>(1, def.out, 1, 1, T(0)));
    }
    return v;
  }

  bool loaded() const { return !weights_.empty(); }

  // Taps 1..max_tap on the graph; gradients flow into x only.
  std::array<Var<T>, 4> forward(Graph<T>& g, Var<T> x, int max_tap = 4) const {
    require(loaded(), ErrorKind::WeightsUnavailable,
            "backbone weights not loaded; fetch them with "
            "scripts/fetch_vgg16_weights.py or pass vgg_weights=random:<seed>");
    require(max_tap >= 1 && max_tap <= 4, ErrorKind::InvalidArgument,
            "forward: tap index out of range");
    const Tensor<T>& xt = x.value();
    const int need = 1 << (max_tap - 1);
    require(xt.h >= need && xt.w >= need, ErrorKind::ShapeError,
            "backbone input " + xt.shape_str() + " too small for tap " +
                std::to_string(max_tap));
    Var<T> h = x;
    if (xt.c == 1) h = replicate_channels(h, 3);
    require(h.value().c == 3, ErrorKind::ShapeError,
            "backbone input must have 1 or 3 channels");
    h = normalize_channels(h, std::vector<T>(kMean.begin(), kMean.end()),
                           inv_std());
    std::array<Var<T>, 4> taps{};
    const auto& defs = conv_defs();
    for (int i = 0; i < kNumConvs; ++i) {
      if (defs[i].pool_before) h = maxpool2(h);
      h = relu(conv2d(h, g.constant(weights_[i]), g.constant(biases_[i]), Pad::Zero));
      if (defs[i].tap_after > 0) {
        taps[defs[i].tap_after - 1] = h;
        if (defs[i].tap_after == max_tap) break;
      }
    }
    return taps;
  }

  // No-grad convenience: activation tensor at tap k (spec operation).
  Tensor<T> extract(const Tensor<T>& batch, int k) const {
    Graph<T> g;
    auto taps = forward(g, g.constant(batch), k);
    return taps[k - 1].value();
  }

  // FNV over raw parameter bytes; the frozen-backbone audit.
  std::uint64_t weight_checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const Tensor<T>& t) {
      for (T x : t.v) {
        const auto* p = reinterpret_cast<const unsigned char*>(&x);
        for (std::size_t i = 0; i < sizeof(T); ++i) {
          h ^= p[i];
          h *= 1099511628211ull;
        }
      }
    };
    for (const auto& w : weights_) mix(w);
    for (const auto& b : biases_) mix(b);
    return h;
  }

  const std::vector<Tensor<T>>& weights() const { return weights_; }
  const std::vector<Tensor<T>>& biases() const { return biases_; }
  void set_params(std::vector<Tensor<T>> w, std::vector<Tensor<T>> b) {
    weights_ = std::move(w);
    biases_ = std::move(b);
  }

  template <typename U>
  VggFeatures<U> cast() const {
    VggFeatures<U> o;
    std::vector<Tensor<U>> w, b;
    for (const auto& t : weights_) w.push_back(t.template cast<U>());
    for (const auto& t : biases_) b.push_back(t.template cast<U>());
    o.set_params(std::move(w), std::move(b));
    return o;
  }

 private:
  static constexpr std::array<double, 3> kMean{0.485, 0.456, 0.406};
  static constexpr std::array<double, 3> kStd{0.229, 0.224, 0.225};
  static std::vector<T> inv_std() {
    return {static_cast<T>(1.0 / kStd[0]), static_cast<T>(1.0 / kStd[1]),
            static_cast<T>(1.0 / kStd[2])};
  }

  std::vector<Tensor<T>> weights_, biases_;
};

}  // namespace retfuse::nn
