// SPDX-License-Identifier: Apache-2.0
//
// Block-structured feed-forward networks. A network is a sequence of N blocks
// (each a stack of affine layers with optional ReLU) followed by an affine
// classifier; every block output is exposed as a feature tap. Parameters are
// plain tensors, so the same forward code serves constant evaluation and taped
// training depending on whether the parameters were bound to a tape.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "sakd/errors.hpp"
#include "sakd/ops.hpp"
#include "sakd/random.hpp"
#include "sakd/tensor.hpp"

namespace sakd {

enum class Activation { relu, none };

struct LayerSpec {
  std::size_t width = 0;
  Activation activation = Activation::relu;
  bool operator==(const LayerSpec&) const = default;
};

struct BlockSpec {
  std::vector<LayerSpec> layers;
  bool operator==(const BlockSpec&) const = default;
};

struct NetworkSpec {
  std::size_t input_dim = 0;
  std::vector<BlockSpec> blocks;
  std::size_t classifier_dim = 0;

  bool operator==(const NetworkSpec&) const = default;

  std::size_t block_count() const { return blocks.size(); }

  /// Output width of block `i` (0-based).
  std::size_t block_width(std::size_t i) const { return blocks.at(i).layers.back().width; }

  std::size_t block_input_width(std::size_t i) const {
    return i == 0 ? input_dim : block_width(i - 1);
  }

  void validate() const {
    if (input_dim == 0) throw ConfigError("network: input_dim must be positive");
    if (blocks.empty()) throw ConfigError("network: at least one block is required");
    if (classifier_dim < 2) throw ConfigError("network: classifier_dim must be >= 2");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (blocks[b].layers.empty()) {
        throw ConfigError("network: block " + std::to_string(b + 1) + " has no layers");
      }
      for (const LayerSpec& layer : blocks[b].layers) {
        if (layer.width == 0) {
          throw ConfigError("network: block " + std::to_string(b + 1) + " has a zero-width layer");
        }
      }
    }
  }
};

/// Uniform-width spec: `blocks` blocks of `layers_per_block` ReLU layers.
inline NetworkSpec uniform_spec(std::size_t input_dim, std::size_t blocks, std::size_t width,
                                std::size_t classes, std::size_t layers_per_block = 1) {
  NetworkSpec spec{input_dim, {}, classes};
  for (std::size_t b = 0; b < blocks; ++b) {
    spec.blocks.push_back(BlockSpec{std::vector<LayerSpec>(layers_per_block, {width})});
  }
  return spec;
}

// ---------------------------------------------------------------------------

/// y = x W + b, W is [in x out].
struct Affine {
  Tensor weight;
  Tensor bias;

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
};

inline Tensor apply(const Affine& layer, const Tensor& x) {
  return add_row_bias(matmul(x, layer.weight), layer.bias);
}

/// Weights uniform on +-sqrt(gain / fan_in), zero bias. gain = 6 is the
/// He-uniform rule used for network layers.
inline Affine make_affine(std::size_t in, std::size_t out, Rng& rng, double gain = 6.0) {
  const double bound = std::sqrt(gain / static_cast<double>(in));
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  return Affine{Tensor({in, out}, std::move(w)), Tensor::zeros({out})};
}

inline Affine identity_affine(std::size_t n) {
  std::vector<double> w(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) w[i * n + i] = 1.0;
  return Affine{Tensor({n, n}, std::move(w)), Tensor::zeros({n})};
}

template <class A, class F>
  requires std::is_same_v<std::remove_const_t<A>, Affine>
void visit_params(A& layer, const std::string& prefix, F&& f) {
  f(prefix + ".weight", layer.weight);
  f(prefix + ".bias", layer.bias);
}

// ---------------------------------------------------------------------------

enum class Mode { train, eval };

struct Network {
  NetworkSpec spec;
  std::vector<std::vector<Affine>> blocks;
  Affine classifier;
  Mode mode = Mode::train;
  bool frozen = false;
};

/// Visits parameters in canonical order with canonical names
/// (block<i>.layer<j>.{weight,bias}, classifier.{weight,bias}; 1-based).
template <class N, class F>
  requires std::is_same_v<std::remove_const_t<N>, Network>
void visit_params(N& net, F&& f) {
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    for (std::size_t l = 0; l < net.blocks[b].size(); ++l) {
      visit_params(net.blocks[b][l],
                   "block" + std::to_string(b + 1) + ".layer" + std::to_string(l + 1), f);
    }
  }
  visit_params(net.classifier, "classifier", f);
}

/// Pointers to every parameter of a module, in visit order.
template <class M>
std::vector<Tensor*> param_refs(M& module) {
  std::vector<Tensor*> out;
  visit_params(module, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

template <class M>
std::vector<const Tensor*> param_list(const M& module) {
  std::vector<const Tensor*> out;
  visit_params(module, [&](const std::string&, const Tensor& t) { out.push_back(&t); });
  return out;
}

/// Copy of `module` whose parameters are leaves on `tape`.
template <class M>
M bind_params(Tape& tape, const M& module) {
  M out = module;
  visit_params(out, [&](const std::string&, Tensor& t) { t = tape.leaf(t); });
  return out;
}

/// Copy of `module` whose parameters carry no tape handles.
template <class M>
M detach_params(const M& module) {
  M out = module;
  visit_params(out, [](const std::string&, Tensor& t) { t = t.detached(); });
  return out;
}

/// FNV-1a over parameter bytes in canonical order.
template <class M>
std::uint64_t param_hash(const M& module) {
  std::uint64_t h = 1469598103934665603ull;
  visit_params(module, [&](const std::string&, const Tensor& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  });
  return h;
}

inline Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed, 0x6e6574);
  Network net{spec, {}, {}, Mode::train, false};
  std::size_t width = spec.input_dim;
  for (const BlockSpec& block : spec.blocks) {
    std::vector<Affine> layers;
    for (const LayerSpec& layer : block.layers) {
      layers.push_back(make_affine(width, layer.width, rng));
      width = layer.width;
    }
    net.blocks.push_back(std::move(layers));
  }
  net.classifier = make_affine(width, spec.classifier_dim, rng);
  return net;
}

/// Marks the network frozen: bind() leaves its parameters constant, so no
/// tape node ever references them.
inline Network freeze(Network net) {
  net = detach_params(net);
  net.frozen = true;
  return net;
}

/// Trainable view of `net` on `tape`; frozen networks come back unchanged.
inline Network bind(Tape& tape, const Network& net) {
  return net.frozen ? net : bind_params(tape, net);
}

inline Tensor forward_block(const Network& net, std::size_t block, const Tensor& x) {
  if (block >= net.blocks.size()) {
    throw IndexError("forward_block: block " + std::to_string(block + 1) + " of " +
                     std::to_string(net.blocks.size()));
  }
  Tensor h = x;
  const auto& specs = net.spec.blocks[block].layers;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    h = apply(net.blocks[block][l], h);
    if (specs[l].activation == Activation::relu) h = relu(h);
  }
  return h;
}

inline Tensor forward_classifier(const Network& net, const Tensor& x) {
  return apply(net.classifier, x);
}

struct FeatureBundle {
  std::vector<Tensor> block_features;
  Tensor logits;
};

inline FeatureBundle forward_features(const Network& net, const Tensor& x) {
  if (x.ndim() != 2 || x.dim(1) != net.spec.input_dim) {
    throw ShapeError("forward_features: input " + to_string(x.shape()) + " for input_dim " +
                     std::to_string(net.spec.input_dim));
  }
  FeatureBundle bundle;
  Tensor h = x;
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    h = forward_block(net, b, h);
    bundle.block_features.push_back(h);
  }
  bundle.logits = forward_classifier(net, h);
  return bundle;
}

// ---------------------------------------------------------------------------

enum class AdaptDirection { ts, st };

/// Per spot i: ts maps teacher width -> student width, st the reverse.
struct AdaptionSet {
  std::vector<Affine> ts;
  std::vector<Affine> st;
};

template <class A, class F>
  requires std::is_same_v<std::remove_const_t<A>, AdaptionSet>
void visit_params(A& set, F&& f) {
  for (std::size_t i = 0; i < set.ts.size(); ++i) {
    visit_params(set.ts[i], "adapt" + std::to_string(i + 1) + ".ts", f);
    visit_params(set.st[i], "adapt" + std::to_string(i + 1) + ".st", f);
  }
}

/// One map per direction per spot. Equal widths start at identity, mismatched
/// widths from the fan-in uniform rule.
inline AdaptionSet make_adaptions(const NetworkSpec& teacher, const NetworkSpec& student,
                                  std::uint64_t seed) {
  if (teacher.block_count() != student.block_count()) {
    throw ConfigError("adaptions: teacher has " + std::to_string(teacher.block_count()) +
                      " blocks, student " + std::to_string(student.block_count()));
  }
  Rng rng(seed, 0x616461);
  AdaptionSet set;
  for (std::size_t i = 0; i < teacher.block_count(); ++i) {
    const std::size_t dt = teacher.block_width(i), ds = student.block_width(i);
    set.ts.push_back(dt == ds ? identity_affine(dt) : make_affine(dt, ds, rng, 3.0));
    set.st.push_back(dt == ds ? identity_affine(ds) : make_affine(ds, dt, rng, 3.0));
  }
  return set;
}

/// Applies the spot-`spot` (1-based) map in the given direction.
inline Tensor adapt(const AdaptionSet& set, std::size_t spot, AdaptDirection dir,
                    const Tensor& feat) {
  if (spot == 0 || spot > set.ts.size()) {
    throw ConfigError("adapt: unknown spot " + std::to_string(spot) + " (have " +
                      std::to_string(set.ts.size()) + ")");
  }
  const Affine& map = dir == AdaptDirection::ts ? set.ts[spot - 1] : set.st[spot - 1];
  if (feat.ndim() != 2 || feat.dim(1) != map.in()) {
    throw ShapeError("adapt: feature " + to_string(feat.shape()) + " for map " +
                     std::to_string(map.in()) + " -> " + std::to_string(map.out()));
  }
  return apply(map, feat);
}

}  // namespace sakd
