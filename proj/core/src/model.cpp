#include "fairprune/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fairprune/dataset.hpp"
#include "fairprune/rng.hpp"

#include "json.hpp"

namespace fairprune {

namespace {

Tensor kaiming_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                       Rng& rng, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

std::size_t MaskedLayer::kept_count() const {
  std::size_t n = 0;
  for (std::uint8_t m : mask) n += m;
  return n;
}

void MaskedLayer::apply_mask() {
  auto w = weights.values();
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!mask[i]) w[i] = 0.0;
  }
}

Model Model::make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                      std::size_t classes, std::uint64_t seed) {
  if (input_dim == 0 || classes == 0) {
    throw ContractError("make_mlp: input_dim and classes must be positive");
  }
  Model model;
  model.input_dim_ = input_dim;
  model.output_classes_ = classes;
  Rng rng(seed);
  std::size_t in = input_dim;
  std::vector<std::size_t> widths = hidden;
  widths.push_back(classes);
  for (std::size_t li = 0; li < widths.size(); ++li) {
    const std::size_t out = widths[li];
    MaskedLayer layer;
    layer.kind = LayerKind::dense;
    layer.weights = kaiming_uniform({in, out}, in, rng, true);
    layer.bias = Tensor::zeros({out}, true);
    layer.mask.assign(in * out, 1);
    layer.activation = li + 1 < widths.size() ? Activation::relu : Activation::none;
    layer.layer_id = static_cast<int>(li);
    model.layers_.push_back(std::move(layer));
    in = out;
  }
  return model;
}

Model Model::make_conv(const Conv2dDims& image, std::size_t conv1_channels,
                       std::size_t conv2_channels, std::size_t kernel,
                       std::size_t classes, std::uint64_t seed) {
  if (image.in_channels == 0 || image.in_h < kernel || image.in_w < kernel) {
    throw ContractError("make_conv: image too small for kernel");
  }
  Model model;
  model.input_dim_ = image.in_channels * image.in_h * image.in_w;
  model.output_classes_ = classes;
  Rng rng(seed);

  Conv2dDims c1{image.in_channels, conv1_channels, kernel, kernel,
                image.in_h, image.in_w};
  Conv2dDims c2{conv1_channels, conv2_channels, kernel, kernel,
                c1.out_h(), c1.out_w()};
  if (c2.in_h < kernel || c2.in_w < kernel) {
    throw ContractError("make_conv: second conv does not fit");
  }

  auto push_conv = [&](const Conv2dDims& dims, int id) {
    MaskedLayer layer;
    layer.kind = LayerKind::conv2d;
    layer.conv = dims;
    const std::size_t fan_in = dims.in_channels * dims.kernel_h * dims.kernel_w;
    layer.weights = kaiming_uniform(
        {dims.out_channels, dims.in_channels, dims.kernel_h, dims.kernel_w},
        fan_in, rng, true);
    layer.bias = Tensor::zeros({dims.out_channels}, true);
    layer.mask.assign(layer.weights.size(), 1);
    layer.activation = Activation::relu;
    layer.layer_id = id;
    model.layers_.push_back(std::move(layer));
  };
  push_conv(c1, 0);
  push_conv(c2, 1);

  const std::size_t flat = conv2_channels * c2.out_h() * c2.out_w();
  MaskedLayer readout;
  readout.kind = LayerKind::dense;
  readout.weights = kaiming_uniform({flat, classes}, flat, rng, true);
  readout.bias = Tensor::zeros({classes}, true);
  readout.mask.assign(flat * classes, 1);
  readout.activation = Activation::none;
  readout.layer_id = 2;
  model.layers_.push_back(std::move(readout));
  return model;
}

Tensor Model::forward(Graph& g, const Tensor& batch) const {
  return forward(g, batch, nullptr);
}

Tensor Model::forward(Graph& g, const Tensor& batch, Tensor* penultimate) const {
  if (batch.shape().size() != 2 || batch.cols() != input_dim_) {
    throw DimensionError("Model::forward: batch " + shape_to_string(batch.shape()) +
                         " does not match input dim " + std::to_string(input_dim_));
  }
  Tensor x = batch;
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const MaskedLayer& layer = layers_[li];
    if (penultimate && li + 1 == layers_.size()) *penultimate = x;
    if (layer.kind == LayerKind::dense) {
      x = g.add_bias_rows(g.matmul(x, layer.weights), layer.bias);
    } else {
      x = conv2d(g, x, layer.weights, layer.bias, layer.conv);
    }
    if (layer.activation == Activation::relu) x = g.relu(x);
  }
  return x;
}

std::size_t Model::penultimate_width() const {
  if (layers_.size() <= 1) return input_dim_;
  const MaskedLayer& last = layers_.back();
  if (last.kind == LayerKind::dense) return last.weights.shape()[0];
  return last.conv.in_channels * last.conv.in_h * last.conv.in_w;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const MaskedLayer& layer : layers_) n += layer.weight_count();
  return n;
}

std::size_t Model::kept_count() const {
  std::size_t n = 0;
  for (const MaskedLayer& layer : layers_) n += layer.kept_count();
  return n;
}

void Model::apply_masks() {
  for (MaskedLayer& layer : layers_) layer.apply_mask();
}

void Model::zero_grads() {
  for (MaskedLayer& layer : layers_) {
    layer.weights.zero_grad();
    layer.bias.zero_grad();
  }
}

void Model::snapshot_init() {
  Snapshot snap;
  for (const MaskedLayer& layer : layers_) {
    auto w = layer.weights.values();
    auto b = layer.bias.values();
    snap.weights.emplace_back(w.begin(), w.end());
    snap.biases.emplace_back(b.begin(), b.end());
  }
  snapshot_ = std::move(snap);
}

void Model::reset_to_snapshot() {
  if (!snapshot_) {
    throw ContractError("reset_to_snapshot: no snapshot stored");
  }
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    auto w = layers_[li].weights.values();
    auto b = layers_[li].bias.values();
    std::copy(snapshot_->weights[li].begin(), snapshot_->weights[li].end(), w.begin());
    std::copy(snapshot_->biases[li].begin(), snapshot_->biases[li].end(), b.begin());
  }
  apply_masks();
}

Model Model::clone() const {
  Model copy;
  copy.input_dim_ = input_dim_;
  copy.output_classes_ = output_classes_;
  copy.snapshot_ = snapshot_;
  for (const MaskedLayer& layer : layers_) {
    MaskedLayer c = layer;
    c.weights = layer.weights.clone();
    c.bias = layer.bias.clone();
    copy.layers_.push_back(std::move(c));
  }
  return copy;
}

// ---------------------------------------------------------------------------
// Fused ops

Tensor cross_entropy(Graph& g, const Tensor& logits, std::span<const int> labels) {
  if (logits.shape().size() != 2) {
    throw DimensionError("cross_entropy: logits must be [batch x classes], got " +
                         shape_to_string(logits.shape()));
  }
  const std::size_t batch = logits.rows(), classes = logits.cols();
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DomainError("cross_entropy: label " + std::to_string(y) +
                        " outside [0, " + std::to_string(classes) + ")");
    }
  }

  auto lv = logits.values();
  std::vector<double> probs(batch * classes);
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const double* row = lv.data() + i * classes;
    double peak = row[0];
    for (std::size_t c = 1; c < classes; ++c) peak = std::max(peak, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - peak);
    const double log_z = peak + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) {
      probs[i * classes + c] = std::exp(row[c] - log_z);
    }
    total += log_z - row[labels[i]];
  }

  Tensor out = g.make_output({1});
  out.values()[0] = total / static_cast<double>(batch);
  ensure_finite(out.values(), "cross_entropy");
  g.note_input(logits);
  std::vector<int> labels_copy(labels.begin(), labels.end());
  g.record([logits, out, probs = std::move(probs),
            labels_copy = std::move(labels_copy), batch, classes](Graph& gr) {
    auto oa = gr.adjoint_view(out);
    if (oa.empty() || !gr.wants_adjoint(logits)) return;
    auto buf = gr.adjoint_buffer(logits);
    const double s = oa[0] / static_cast<double>(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double onehot = static_cast<std::size_t>(labels_copy[i]) == c ? 1.0 : 0.0;
        buf[i * classes + c] += s * (probs[i * classes + c] - onehot);
      }
    }
  });
  return out;
}

Tensor conv2d(Graph& g, const Tensor& input, const Tensor& kernel,
              const Tensor& bias, const Conv2dDims& dims) {
  const std::size_t in_plane = dims.in_channels * dims.in_h * dims.in_w;
  if (input.shape().size() != 2 || input.cols() != in_plane) {
    throw DimensionError("conv2d: input " + shape_to_string(input.shape()) +
                         " does not match " + std::to_string(in_plane) +
                         " image values");
  }
  const std::size_t batch = input.rows();
  const std::size_t oh = dims.out_h(), ow = dims.out_w();
  const std::size_t out_plane = dims.out_channels * oh * ow;

  Tensor out = g.make_output({batch, out_plane});
  auto xv = input.values();
  auto kv = kernel.values();
  auto bv = bias.values();
  auto ov = out.values();

  auto x_at = [&](std::size_t b, std::size_t c, std::size_t y, std::size_t x) {
    return xv[b * in_plane + (c * dims.in_h + y) * dims.in_w + x];
  };
  auto k_at = [&](std::size_t co, std::size_t ci, std::size_t ky, std::size_t kx) {
    return kv[((co * dims.in_channels + ci) * dims.kernel_h + ky) * dims.kernel_w + kx];
  };

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t co = 0; co < dims.out_channels; ++co) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = bv[co];
          for (std::size_t ci = 0; ci < dims.in_channels; ++ci) {
            for (std::size_t ky = 0; ky < dims.kernel_h; ++ky) {
              for (std::size_t kx = 0; kx < dims.kernel_w; ++kx) {
                acc += x_at(b, ci, y + ky, x + kx) * k_at(co, ci, ky, kx);
              }
            }
          }
          ov[b * out_plane + (co * oh + y) * ow + x] = acc;
        }
      }
    }
  }
  ensure_finite(ov, "conv2d");

  g.note_input(input);
  g.note_input(kernel);
  g.note_input(bias);
  g.record([input, kernel, bias, out, dims, batch, oh, ow, in_plane,
            out_plane](Graph& gr) {
    auto oa = gr.adjoint_view(out);
    if (oa.empty()) return;
    auto xv2 = input.values();
    auto kv2 = kernel.values();
    const bool want_x = gr.wants_adjoint(input);
    const bool want_k = gr.wants_adjoint(kernel);
    const bool want_b = gr.wants_adjoint(bias);
    std::span<double> dx = want_x ? gr.adjoint_buffer(input) : std::span<double>{};
    std::span<double> dk = want_k ? gr.adjoint_buffer(kernel) : std::span<double>{};
    std::span<double> db = want_b ? gr.adjoint_buffer(bias) : std::span<double>{};

    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t co = 0; co < dims.out_channels; ++co) {
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t x = 0; x < ow; ++x) {
            const double go = oa[b * out_plane + (co * oh + y) * ow + x];
            if (go == 0.0) continue;
            if (want_b) db[co] += go;
            for (std::size_t ci = 0; ci < dims.in_channels; ++ci) {
              for (std::size_t ky = 0; ky < dims.kernel_h; ++ky) {
                for (std::size_t kx = 0; kx < dims.kernel_w; ++kx) {
                  const std::size_t xi =
                      b * in_plane + (ci * dims.in_h + y + ky) * dims.in_w + x + kx;
                  const std::size_t ki =
                      ((co * dims.in_channels + ci) * dims.kernel_h + ky) *
                          dims.kernel_w + kx;
                  if (want_k) dk[ki] += go * xv2[xi];
                  if (want_x) dx[xi] += go * kv2[ki];
                }
              }
            }
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Adam

AdamState::AdamState(const Model& model, AdamConfig config) : config_(config) {
  for (const MaskedLayer& layer : model.layers()) {
    m_.emplace_back(layer.weights.size() + layer.bias.size(), 0.0);
    v_.emplace_back(layer.weights.size() + layer.bias.size(), 0.0);
  }
}

void AdamState::step(Model& model) {
  if (m_.size() != model.layers().size()) {
    throw ContractError("AdamState::step: optimizer built for a different model");
  }
  ++step_count_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
  for (std::size_t li = 0; li < model.layers().size(); ++li) {
    MaskedLayer& layer = model.layers()[li];
    auto update = [&](std::span<double> param, std::span<const double> grad,
                      std::size_t offset) {
      auto& m = m_[li];
      auto& v = v_[li];
      for (std::size_t i = 0; i < param.size(); ++i) {
        const double gi = grad[i];
        m[offset + i] = config_.beta1 * m[offset + i] + (1.0 - config_.beta1) * gi;
        v[offset + i] = config_.beta2 * v[offset + i] + (1.0 - config_.beta2) * gi * gi;
        const double m_hat = m[offset + i] / bc1;
        const double v_hat = v[offset + i] / bc2;
        param[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      }
    };
    update(layer.weights.values(), layer.weights.grad(), 0);
    update(layer.bias.values(), layer.bias.grad(), layer.weights.size());
    ensure_finite(layer.weights.values(), "adam_step");
    ensure_finite(layer.bias.values(), "adam_step");
  }
  model.apply_masks();
}

// ---------------------------------------------------------------------------
// Training loop

std::vector<double> train(Model& model, const GroupedDataset& data,
                          Partition partition, const TrainOptions& options) {
  std::vector<std::size_t> rows = data.rows_in(partition);
  if (rows.empty()) throw DataError("train: empty dataset partition");
  if (options.batch_size == 0) throw ContractError("train: batch_size must be > 0");

  std::vector<double> epoch_losses;
  if (options.epochs == 0) return epoch_losses;

  Rng rng(options.seed);
  AdamState adam(model, options.adam);
  const std::size_t dim = data.feature_dim();

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(rows);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < rows.size(); start += options.batch_size) {
      const std::size_t stop = std::min(start + options.batch_size, rows.size());
      const std::size_t bsize = stop - start;
      std::vector<double> feats(bsize * dim);
      std::vector<int> labels(bsize);
      for (std::size_t i = 0; i < bsize; ++i) {
        auto r = data.row(rows[start + i]);
        std::copy(r.begin(), r.end(), feats.begin() + i * dim);
        labels[i] = data.labels()[rows[start + i]];
      }
      Graph g;
      Tensor x = Tensor::from({bsize, dim}, std::move(feats));
      Tensor logits = model.forward(g, x);
      Tensor loss = cross_entropy(g, logits, labels);
      model.zero_grads();
      g.backward(loss);
      adam.step(model);
      loss_sum += loss.value() * static_cast<double>(bsize);
    }
    epoch_losses.push_back(loss_sum / static_cast<double>(rows.size()));
  }
  return epoch_losses;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[5] = {'F', 'G', 'P', 'K', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

void put_f64(std::ostream& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw DataError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_checkpoint: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  put_u64(out, model.layers().size());
  put_u64(out, model.output_classes());
  put_u64(out, model.input_dim());
  for (const MaskedLayer& layer : model.layers()) {
    out.put(static_cast<char>(layer.kind));
    out.put(static_cast<char>(layer.activation));
    if (layer.kind == LayerKind::conv2d) {
      put_u64(out, layer.conv.in_channels);
      put_u64(out, layer.conv.out_channels);
      put_u64(out, layer.conv.kernel_h);
      put_u64(out, layer.conv.kernel_w);
      put_u64(out, layer.conv.in_h);
      put_u64(out, layer.conv.in_w);
    }
    put_u64(out, layer.weights.shape().size());
    for (std::size_t extent : layer.weights.shape()) put_u64(out, extent);
    for (double v : layer.weights.values()) put_f64(out, v);
    put_u64(out, layer.bias.size());
    for (double v : layer.bias.values()) put_f64(out, v);
    out.write(reinterpret_cast<const char*>(layer.mask.data()),
              static_cast<std::streamsize>(layer.mask.size()));
  }
  if (!out) throw DataError("save_checkpoint: write failed for " + path);
  out.close();

  nlohmann::json side;
  side["format"] = "FGPK1";
  side["output_classes"] = model.output_classes();
  side["input_dim"] = model.input_dim();
  side["parameter_count"] = model.parameter_count();
  side["kept_count"] = model.kept_count();
  nlohmann::json layers = nlohmann::json::array();
  for (const MaskedLayer& layer : model.layers()) {
    nlohmann::json j;
    j["layer_id"] = layer.layer_id;
    j["kind"] = layer.kind == LayerKind::dense ? "dense" : "conv2d";
    j["activation"] = layer.activation == Activation::relu ? "relu" : "none";
    j["shape"] = layer.weights.shape();
    j["kept"] = layer.kept_count();
    layers.push_back(j);
  }
  side["layers"] = layers;
  std::ofstream sidecar(path + ".json");
  sidecar << side.dump(2) << "\n";
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_checkpoint: cannot open " + path);
  char magic[5];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError("load_checkpoint: bad magic in " + path);
  }
  const std::uint64_t layer_count = get_u64(in);
  const std::uint64_t classes = get_u64(in);
  const std::uint64_t input_dim = get_u64(in);

  Model model;
  for (std::uint64_t li = 0; li < layer_count; ++li) {
    MaskedLayer layer;
    layer.layer_id = static_cast<int>(li);
    const int kind = in.get();
    const int act = in.get();
    if (kind < 0 || act < 0) throw DataError("load_checkpoint: truncated header");
    layer.kind = static_cast<LayerKind>(kind);
    layer.activation = static_cast<Activation>(act);
    if (layer.kind == LayerKind::conv2d) {
      layer.conv.in_channels = get_u64(in);
      layer.conv.out_channels = get_u64(in);
      layer.conv.kernel_h = get_u64(in);
      layer.conv.kernel_w = get_u64(in);
      layer.conv.in_h = get_u64(in);
      layer.conv.in_w = get_u64(in);
    }
    const std::uint64_t rank = get_u64(in);
    std::vector<std::size_t> shape(rank);
    for (auto& extent : shape) extent = get_u64(in);
    layer.weights = Tensor::zeros(shape, true);
    for (double& v : layer.weights.values()) v = get_f64(in);
    const std::uint64_t bias_len = get_u64(in);
    layer.bias = Tensor::zeros({bias_len}, true);
    for (double& v : layer.bias.values()) v = get_f64(in);
    layer.mask.resize(layer.weights.size());
    in.read(reinterpret_cast<char*>(layer.mask.data()),
            static_cast<std::streamsize>(layer.mask.size()));
    if (!in) throw DataError("load_checkpoint: truncated layer in " + path);
    model.layers_.push_back(std::move(layer));
  }
  model.input_dim_ = input_dim;
  model.output_classes_ = classes;
  return model;
}

}  // namespace fairprune
