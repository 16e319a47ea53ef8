#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fairprune/tensor.hpp"

namespace fairprune {

enum class LayerKind : std::uint8_t { dense = 0, conv2d = 1 };
enum class Activation : std::uint8_t { none = 0, relu = 1 };

struct Conv2dDims {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t in_h = 0;
  std::size_t in_w = 0;
  std::size_t out_h() const { return in_h - kernel_h + 1; }
  std::size_t out_w() const { return in_w - kernel_w + 1; }
};

// A weight tensor paired with a binary keep-mask. Wherever mask is 0 the
// stored weight is exactly 0. Biases are never masked.
struct MaskedLayer {
  LayerKind kind = LayerKind::dense;
  Tensor weights;  // dense: [in x out]; conv2d: [out_ch x in_ch x kh x kw]
  Tensor bias;     // dense: [out]; conv2d: [out_ch]
  std::vector<std::uint8_t> mask;  // one byte per weight
  Activation activation = Activation::none;
  Conv2dDims conv;
  int layer_id = 0;

  std::size_t weight_count() const { return weights.size(); }
  std::size_t kept_count() const;
  void apply_mask();  // zero every weight whose mask is 0
};

// Feed-forward classifier built from masked dense/conv layers. Forward treats
// input as a [batch x input_dim] matrix; conv layers view each row as a
// (channels, h, w) image.
class Model {
 public:
  static Model make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                        std::size_t classes, std::uint64_t seed);
  // Two valid conv layers followed by one dense readout.
  static Model make_conv(const Conv2dDims& image, std::size_t conv1_channels,
                         std::size_t conv2_channels, std::size_t kernel,
                         std::size_t classes, std::uint64_t seed);

  Tensor forward(Graph& g, const Tensor& batch) const;
  // Also exposes the activations feeding the final layer (the embedding).
  Tensor forward(Graph& g, const Tensor& batch, Tensor* penultimate) const;

  std::vector<MaskedLayer>& layers() { return layers_; }
  const std::vector<MaskedLayer>& layers() const { return layers_; }

  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_classes() const { return output_classes_; }
  std::size_t penultimate_width() const;

  // Total prunable parameter count m (weights only; biases excluded).
  std::size_t parameter_count() const;
  std::size_t kept_count() const;

  void apply_masks();
  void zero_grads();

  void snapshot_init();
  bool has_snapshot() const { return snapshot_.has_value(); }
  // Restore all weights/biases from the snapshot, then re-apply masks.
  void reset_to_snapshot();

  Model clone() const;

 private:
  std::vector<MaskedLayer> layers_;
  std::size_t input_dim_ = 0;
  std::size_t output_classes_ = 0;

  struct Snapshot {
    std::vector<std::vector<double>> weights;
    std::vector<std::vector<double>> biases;
  };
  std::optional<Snapshot> snapshot_;

  friend Model load_checkpoint(const std::string& path);
};

// Mean over the batch of -log softmax probability of the true class,
// computed with a stable log-sum-exp. Gradient is (softmax - onehot)/batch.
Tensor cross_entropy(Graph& g, const Tensor& logits, std::span<const int> labels);

// Valid (no padding, stride 1) 2-D convolution as a fused graph op.
Tensor conv2d(Graph& g, const Tensor& input, const Tensor& kernel,
              const Tensor& bias, const Conv2dDims& dims);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction over every weight and bias tensor. step() reads
// the gradients stored on the model's tensors and re-applies masks afterwards
// so pruned weights stay exactly zero.
class AdamState {
 public:
  AdamState(const Model& model, AdamConfig config);
  void step(Model& model);
  std::int64_t step_count() const { return step_count_; }

 private:
  AdamConfig config_;
  std::int64_t step_count_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

class GroupedDataset;
enum class Partition : std::uint8_t;

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  AdamConfig adam;
  std::uint64_t seed = 0;
};

// Mini-batch cross-entropy training with seeded shuffling; masks are enforced
// after every optimizer step. Returns the per-epoch mean training loss.
std::vector<double> train(Model& model, const GroupedDataset& data,
                          Partition partition, const TrainOptions& options);

// Checkpoint I/O. Binary layout: magic "FGPK1", little-endian u64 layer count,
// u64 output classes, u64 input dim, then per layer: kind byte, activation
// byte, conv dims when conv, u64 rank + extents, f64 weights, u64 bias length,
// f64 bias, one mask byte per weight. A JSON sidecar (path + ".json") mirrors
// shapes and metadata for inspection.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace fairprune
