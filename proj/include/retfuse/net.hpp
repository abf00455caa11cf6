#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "retfuse/autodiff.hpp"

namespace retfuse::nn {

// Resolution-preserving stack of same-size convolutions: ReLU between layers,
// sigmoid on the last one, stride 1, replicate padding. No layer changes H x W.
struct PlainCnnSpec {
  int in_channels = 1;
  int out_channels = 1;
  int hidden_channels = 64;
  int num_layers = 5;
  int kernel = 3;
  Pad padding = Pad::Replicate;

  void validate() const {
    require(in_channels >= 1 && out_channels >= 1, ErrorKind::InvalidArgument,
            "PlainCnnSpec: channel counts must be >= 1");
    require(hidden_channels >= 1, ErrorKind::InvalidArgument,
            "PlainCnnSpec: hidden width must be >= 1");
    require(num_layers >= 2, ErrorKind::InvalidArgument,
            "PlainCnnSpec: need at least 2 layers");
    require(kernel % 2 == 1 && kernel >= 1, ErrorKind::InvalidArgument,
            "PlainCnnSpec: kernel must be odd");
  }

  int layer_in(int layer) const { return layer == 0 ? in_channels : hidden_channels; }
  int layer_out(int layer) const {
    return layer == num_layers - 1 ? out_channels : hidden_channels;
  }

  std::size_t param_count() const {
    std::size_t total = 0;
    for (int l = 0; l < num_layers; ++l) {
      total += static_cast<std::size_t>(layer_out(l)) * layer_in(l) * kernel * kernel;
      total += static_cast<std::size_t>(layer_out(l));  // bias
    }
    return total;
  }
};

// Parameter vars of one net registered on a graph.
template <typename T>
struct NetVars {
  std::vector<Var<T>> w, b;
};

template <typename T>
struct PlainCnn {
  PlainCnnSpec spec;
  std::string name;  // parameter prefix, e.g. "ill_vis"
  std::vector<Tensor<T>> weights, biases;

  void init(Rng& rng) {
    spec.validate();
    weights.clear();
    biases.clear();
    for (int l = 0; l < spec.num_layers; ++l) {
      const int ci = spec.layer_in(l), co = spec.layer_out(l);
      const double bound =
          1.0 / std::sqrt(static_cast<double>(ci) * spec.kernel * spec.kernel);
      weights.push_back(Tensor<T>::uniform(co, ci, spec.kernel, spec.kernel, rng,
                                           static_cast<T>(-bound),
                                           static_cast<T>(bound)));
      biases.push_back(Tensor<T>::uniform(1, co, 1, 1, rng,
                                          static_cast<T>(-bound),
                                          static_cast<T>(bound)));
    }
  }

  NetVars<T> register_params(Graph<T>& g, bool trainable) const {
    NetVars<T> p;
    for (int l = 0; l < spec.num_layers; ++l) {
      p.w.push_back(g.leaf(weights[l], trainable));
      p.b.push_back(g.leaf(biases[l], trainable));
    }
    return p;
  }

  Var<T> forward(Graph<T>& g, const NetVars<T>& p, Var<T> x) const {
    require(x.g == &g, ErrorKind::InvalidArgument, "forward: var from another graph");
    require(x.value().c == spec.in_channels, ErrorKind::ShapeError,
            "forward(" + name + "): input has " + std::to_string(x.value().c) +
                " channels, spec wants " + std::to_string(spec.in_channels));
    Var<T> h = x;
    for (int l = 0; l < spec.num_layers; ++l) {
      h = conv2d(h, p.w[l], p.b[l], spec.padding);
      h = (l == spec.num_layers - 1) ? sigmoid(h) : relu(h);
    }
    return h;
  }

  // Inference-only forward: parameters enter the graph as constants.
  Var<T> forward(Graph<T>& g, Var<T> x) const {
    return forward(g, register_params(g, false), x);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Graph<T> g;
    return forward(g, g.constant(x)).value();
  }

  std::size_t param_count() const { return spec.param_count(); }

  // name -> tensor in a fixed order.
  void visit_params(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
    for (int l = 0; l < spec.num_layers; ++l) {
      const std::string base = name + ".conv" + std::to_string(l + 1);
      fn(base + ".weight", weights[l]);
      fn(base + ".bias", biases[l]);
    }
  }
  void visit_params_mut(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    for (int l = 0; l < spec.num_layers; ++l) {
      const std::string base = name + ".conv" + std::to_string(l + 1);
      fn(base + ".weight", weights[l]);
      fn(base + ".bias", biases[l]);
    }
  }
};

// spec knobs shared by the five nets.
struct BundleSpec {
  int channels = 1;  // pipeline channel count C
  int hidden = 64;
  int num_layers = 5;
  int kernel = 3;

  void validate() const {
    require(channels == 1 || channels == 3, ErrorKind::InvalidArgument,
            "BundleSpec: channels must be 1 or 3");
    require(hidden >= 1, ErrorKind::InvalidArgument,
            "BundleSpec: hidden must be >= 1");
  }

  // Identifies an architecture; checkpoints refuse to load across hashes.
  std::uint64_t config_hash() const {
    const std::string s = "c=" + std::to_string(channels) +
                          ";h=" + std::to_string(hidden) +
                          ";l=" + std::to_string(num_layers) +
                          ";k=" + std::to_string(kernel) + ";pad=replicate";
    return derive_seed(0, s);
  }
};

// The five trainable networks: visible projection, visible/infrared
// illumination heads (1 channel out) and reflectance heads (C channels out).
template <typename T>
struct ModelBundle {
  BundleSpec spec;
  PlainCnn<T> p_vis, ill_vis, ref_vis, ill_ir, ref_ir;

  std::vector<PlainCnn<T>*> nets() { return {&p_vis, &ill_vis, &ref_vis, &ill_ir, &ref_ir}; }
  std::vector<const PlainCnn<T>*> nets() const {
    return {&p_vis, &ill_vis, &ref_vis, &ill_ir, &ref_ir};
  }

  std::size_t param_count() const {
    std::size_t t = 0;
    for (auto* n : nets()) t += n->param_count();
    return t;
  }

  void visit_params(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
    for (auto* n : nets()) n->visit_params(fn);
  }
  void visit_params_mut(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    for (auto* n : nets()) n->visit_params_mut(fn);
  }

  template <typename U>
  ModelBundle<U> cast() const {
    ModelBundle<U> o;
    o.spec = spec;
    auto src = nets();
    auto dst = o.nets();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i]->spec = src[i]->spec;
      dst[i]->name = src[i]->name;
      for (const auto& w : src[i]->weights) dst[i]->weights.push_back(w.template cast<U>());
      for (const auto& b : src[i]->biases) dst[i]->biases.push_back(b.template cast<U>());
    }
    return o;
  }
};

// Deterministic construction: identical (spec, seed) gives bit-identical
// parameters. The infrared illumination head sees a 1-channel input and the
// reflectance heads emit the pipeline channel count.
template <typename T>
ModelBundle<T> build_bundle(const BundleSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelBundle<T> b;
  b.spec = spec;
  auto conf = [&](PlainCnn<T>& net, const std::string& name, int ci, int co) {
    net.name = name;
    net.spec = PlainCnnSpec{ci, co, spec.hidden, spec.num_layers, spec.kernel,
                            Pad::Replicate};
    Rng rng(derive_seed(seed, name));
    net.init(rng);
  };
  const int C = spec.channels;
  conf(b.p_vis, "p_vis", C, C);
  conf(b.ill_vis, "ill_vis", C, 1);
  conf(b.ref_vis, "ref_vis", C, C);
  conf(b.ill_ir, "ill_ir", 1, 1);
  conf(b.ref_ir, "ref_ir", 1, C);
  return b;
}

template <typename T>
ModelBundle<T> build_bundle(int channels, int hidden, std::uint64_t seed) {
  BundleSpec s;
  s.channels = channels;
  s.hidden = hidden;
  return build_bundle<T>(s, seed);
}

// All five nets registered on one graph (training mode shares one tape).
template <typename T>
struct BundleVars {
  NetVars<T> p_vis, ill_vis, ref_vis, ill_ir, ref_ir;
};

template <typename T>
BundleVars<T> register_bundle(Graph<T>& g, const ModelBundle<T>& b, bool trainable) {
  BundleVars<T> v;
  v.p_vis = b.p_vis.register_params(g, trainable);
  v.ill_vis = b.ill_vis.register_params(g, trainable);
  v.ref_vis = b.ref_vis.register_params(g, trainable);
  v.ill_ir = b.ill_ir.register_params(g, trainable);
  v.ref_ir = b.ref_ir.register_params(g, trainable);
  return v;
}

}  // namespace retfuse::nn
