#pragma once

// Toy-scale sub-networks: local guidance U-Net, constraint network M,
// W-AdaIN generator G and a PatchGAN-style critic D, plus checkpoints.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "depthfuse/fusion.hpp"
#include "depthfuse/losses.hpp"
#include "depthfuse/tensor.hpp"

namespace depthfuse {

struct NetConfig {
  std::size_t base_channels = 16;
  std::size_t encoder_levels = 3;
  std::size_t latent_channels = 64;
  std::size_t guidance_channels = 8;  ///< width of the guidance U-Net
  std::size_t critic_channels = 16;
  std::size_t critic_layers = 3;
  std::size_t height = 48;
  std::size_t width = 64;
  double leaky_slope = 0.2;
  double eps = 1e-5;
  /// Depths are divided by this before entering a network and the depth
  /// heads are scaled by it.
  double depth_scale = 10.0;
  std::uint64_t seed = 0;

  /// Throws ValidationError on zero counts or indivisible sizes.
  void validate() const;
  std::string to_json() const;
  static NetConfig from_json(const std::string& text);
};

/// A convolution and its parameters.
struct Conv {
  Tensor weight;  ///< Cout x Cin x k x k
  Tensor bias;    ///< Cout
  std::size_t stride = 1;
  std::size_t padding = 0;

  /// Kaiming-uniform weights for a leaky-ReLU successor, zero bias.
  static Conv create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                     std::size_t padding, double slope, Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
};

/// Stem at full resolution, then one stride-2 conv per level.
struct Encoder {
  Conv stem;
  std::vector<Conv> down;
};

/// One conv per level on the way back up; `stages[i]` maps level i+1 to
/// level i before the 2x upsample and skip addition.
struct Decoder {
  std::vector<Conv> stages;
  Conv head;  ///< full resolution, two output channels
};

struct GuidanceNet {
  Encoder encoder;
  Decoder decoder;
};

struct ConstraintNet {
  Encoder encoder;
  Decoder decoder;
};

struct GeneratorNet {
  Encoder encoder;
  Decoder decoder;
  std::vector<WAdaInParams> modulation;  ///< one per decoder stage, deepest first
};

struct CriticNet {
  std::vector<Conv> layers;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct NetworkBundle {
  NetConfig config;
  GuidanceNet guidance;
  ConstraintNet constraint;
  GeneratorNet generator;
  CriticNet critic;
  LossWeights weights;

  /// Fresh parameters drawn from config.seed.
  static NetworkBundle create(const NetConfig& config, const LossWeights& weights = {});

  /// Guidance, M and G parameters, in a fixed order.
  std::vector<NamedTensor> generator_side_parameters() const;
  std::vector<NamedTensor> critic_parameters() const;
  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;
  /// Slot holding the named parameter, for swapping in another tensor.
  Tensor& parameter(const std::string& name);
};

// Depth tensors are in meters; RGB tensors hold values in [0, 1].

struct GuidanceMap {
  Tensor map;  ///< N x 2 x H x W; channel 0 is a probability
};

struct ConstraintOutputs {
  Tensor d_l;
  Tensor c_l;
  Tensor z;
  std::vector<Tensor> skips;  ///< encoder features, full resolution first
};

struct GeneratorOutputs {
  Tensor d_f;
  Tensor c_f;
};

struct ForwardOutputs {
  GuidanceMap guidance;
  Tensor z;
  Tensor d_l;
  Tensor c_l;
  Tensor d_f;
  Tensor c_f;
  Tensor d_pred;
};

GuidanceMap guidance_forward(const NetworkBundle& net, const Tensor& rgb);
ConstraintOutputs constraint_forward(const NetworkBundle& net, const Tensor& d_in, const GuidanceMap& g);
/// z alone, skipping the decoder.
Tensor constraint_latent(const NetworkBundle& net, const Tensor& d_in, const GuidanceMap& g);
GeneratorOutputs generator_forward(const NetworkBundle& net, const Tensor& z, const Tensor& rgb);
/// One unbounded score per patch, N x 1 x H/2^L x W/2^L.
Tensor discriminator_forward(const NetworkBundle& net, const Tensor& depth, const Tensor& rgb);
ForwardOutputs full_forward(const NetworkBundle& net, const Tensor& d_pseudo, const Tensor& rgb);
/// The generator branch of full_forward (d_f, c_f) without M's decoder.
GeneratorOutputs fused_forward(const NetworkBundle& net, const Tensor& d_pseudo, const Tensor& rgb);

// ---- conversions ----

/// Batch of depth maps as N x 1 x H x W meters (invalid -> 0).
Tensor depth_tensor(std::span<const DepthMap> maps);
/// Batch of RGB images as N x 3 x H x W in [0, 1].
Tensor rgb_tensor(std::span<const RgbImage> images);
/// Sample `n` of an N x 1 x H x W tensor as a depth map. Non-positive
/// values become invalid; large ones are capped at kMaxDepthMeters.
DepthMap to_depth_map(const Tensor& t, std::size_t n, DepthRole role);

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkBundle bundle;
  std::uint64_t step = 0;
  /// Extra state stored alongside the networks (optimizer moments).
  std::vector<NamedTensor> extra;
  /// Free-form JSON object carried through unchanged.
  std::string extra_json = "{}";
};

/// Binary file: magic, version, JSON header (config, weights, step, tensor
/// table), then raw little-endian doubles. Round trips are exact.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace depthfuse
