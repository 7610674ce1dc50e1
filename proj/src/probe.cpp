#include "lyaprobe/probe.hpp"

#include <cmath>
#include <cstring>

#include "lyaprobe/binio.hpp"
#include "lyaprobe/error.hpp"
#include "lyaprobe/random.hpp"

namespace lyaprobe {

using ad::Tensor;

void ProbeConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("probe config: " + key + " " + why);
  };
  if (num_layers == 0) fail("num_layers", "must be positive");
  if (hidden_dim == 0) fail("hidden_dim", "must be positive");
  if (probe_dim == 0) fail("probe_dim", "must be positive");
  if (attention_heads == 0) fail("attention_heads", "must be positive");
  if (probe_dim % attention_heads != 0) {
    fail("probe_dim", std::to_string(probe_dim) + " is not divisible by attention_heads " +
                          std::to_string(attention_heads));
  }
  if (classifier_widths[0] == 0 || classifier_widths[1] == 0) {
    fail("classifier_widths", "must be positive");
  }
  if (classifier_widths[2] != 1) fail("classifier_widths", "must end in a single output unit");
}

std::vector<ad::NamedParam> ProbeParams::named() const {
  std::vector<ad::NamedParam> out;
  for (std::size_t l = 0; l < input_weight.size(); ++l) {
    const auto s = std::to_string(l);
    out.push_back({"input_weight." + s, input_weight[l]});
    out.push_back({"input_bias." + s, input_bias[l]});
    out.push_back({"layer_embedding." + s, layer_embedding[l]});
  }
  out.push_back({"delta_direction", delta_direction});
  out.push_back({"delta_bias", delta_bias});
  out.push_back({"query_weight", query_weight});
  out.push_back({"query_bias", query_bias});
  out.push_back({"key_weight", key_weight});
  out.push_back({"key_bias", key_bias});
  out.push_back({"value_weight", value_weight});
  out.push_back({"value_bias", value_bias});
  out.push_back({"output_weight", output_weight});
  out.push_back({"output_bias", output_bias});
  out.push_back({"norm_gain", norm_gain});
  out.push_back({"norm_bias", norm_bias});
  for (std::size_t i = 0; i < 2; ++i) {
    out.push_back({"projector_weight." + std::to_string(i), projector_weight[i]});
    out.push_back({"projector_bias." + std::to_string(i), projector_bias[i]});
  }
  for (std::size_t i = 0; i < 3; ++i) {
    out.push_back({"classifier_weight." + std::to_string(i), classifier_weight[i]});
    out.push_back({"classifier_bias." + std::to_string(i), classifier_bias[i]});
  }
  return out;
}

namespace {

// Rebuilds a ProbeParams from tensors listed in named() order.
ProbeParams assemble(std::size_t layers, std::vector<Tensor> t) {
  ProbeParams p;
  std::size_t i = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    p.input_weight.push_back(t[i++]);
    p.input_bias.push_back(t[i++]);
    p.layer_embedding.push_back(t[i++]);
  }
  p.delta_direction = t[i++];
  p.delta_bias = t[i++];
  p.query_weight = t[i++];
  p.query_bias = t[i++];
  p.key_weight = t[i++];
  p.key_bias = t[i++];
  p.value_weight = t[i++];
  p.value_bias = t[i++];
  p.output_weight = t[i++];
  p.output_bias = t[i++];
  p.norm_gain = t[i++];
  p.norm_bias = t[i++];
  for (std::size_t k = 0; k < 2; ++k) {
    p.projector_weight[k] = t[i++];
    p.projector_bias[k] = t[i++];
  }
  for (std::size_t k = 0; k < 3; ++k) {
    p.classifier_weight[k] = t[i++];
    p.classifier_bias[k] = t[i++];
  }
  return p;
}

Tensor uniform(Rng& rng, ad::Shape shape, double limit) {
  std::vector<double> v(ad::shape_numel(shape));
  for (double& x : v) x = rng.uniform(-limit, limit);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor affine_weight(Rng& rng, std::size_t in, std::size_t out) {
  return uniform(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
}

Tensor zero_bias(std::size_t n) { return Tensor::zeros({1, n}); }

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return ad::add(ad::matmul(x, w), ad::repeat_rows(b, x.dim(0)));
}

}  // namespace

ProbeParams ProbeParams::clone(bool requires_grad) const {
  std::vector<Tensor> t;
  for (const auto& np : named()) t.push_back(np.tensor.detach(requires_grad));
  return assemble(input_weight.size(), std::move(t));
}

void ProbeParams::set_requires_grad(bool on) {
  for (auto& np : named()) np.tensor.node()->requires_grad = on;
}

ProbeParams init_probe(const ProbeConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t P = config.probe_dim;
  const double embed_limit = 1.0 / std::sqrt(static_cast<double>(P));
  ProbeParams p;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    p.input_weight.push_back(affine_weight(rng, config.hidden_dim, P));
    p.input_bias.push_back(zero_bias(P));
    p.layer_embedding.push_back(uniform(rng, {1, P}, embed_limit));
  }
  p.delta_direction = uniform(rng, {1, P}, embed_limit);
  p.delta_bias = zero_bias(P);
  p.query_weight = affine_weight(rng, P, P);
  p.query_bias = zero_bias(P);
  p.key_weight = affine_weight(rng, P, P);
  p.key_bias = zero_bias(P);
  p.value_weight = affine_weight(rng, P, P);
  p.value_bias = zero_bias(P);
  p.output_weight = affine_weight(rng, P, P);
  p.output_bias = zero_bias(P);
  p.norm_gain = Tensor::full({P}, 1.0);
  p.norm_bias = Tensor::zeros({P});
  for (std::size_t k = 0; k < 2; ++k) {
    p.projector_weight[k] = affine_weight(rng, P, P);
    p.projector_bias[k] = zero_bias(P);
  }
  std::size_t in = P;
  for (std::size_t k = 0; k < 3; ++k) {
    p.classifier_weight[k] = affine_weight(rng, in, config.classifier_widths[k]);
    p.classifier_bias[k] = zero_bias(config.classifier_widths[k]);
    in = config.classifier_widths[k];
  }
  return p;
}

ProbeBatch make_batch(std::span<const LayerStates* const> states, std::span<const double> deltas,
                      bool delta_requires_grad) {
  if (states.size() != deltas.size()) {
    throw DimensionError("make_batch: " + std::to_string(states.size()) + " states vs " +
                         std::to_string(deltas.size()) + " deltas");
  }
  if (states.empty()) throw DimensionError("make_batch: empty batch");
  const std::size_t B = states.size();
  const std::size_t L = states[0]->size();
  const std::size_t d = L ? (*states[0])[0].size() : 0;
  ProbeBatch batch;
  batch.size = B;
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<double> rows(B * d);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& s = *states[b];
      if (s.size() != L || s[l].size() != d) {
        throw DimensionError("make_batch: inconsistent layer shapes in batch row " +
                             std::to_string(b));
      }
      std::copy(s[l].begin(), s[l].end(), rows.begin() + static_cast<std::ptrdiff_t>(b * d));
    }
    batch.layers.push_back(Tensor::from({B, d}, std::move(rows)));
  }
  for (double x : deltas) {
    if (!(x >= 0.0)) throw DimensionError("make_batch: delta must be >= 0");
  }
  batch.delta = Tensor::from({B, 1}, std::vector<double>(deltas.begin(), deltas.end()),
                             delta_requires_grad);
  return batch;
}

ad::Tensor classifier_logits(const ProbeParams& params, const ad::Tensor& features) {
  Tensor h = ad::relu(affine(features, params.classifier_weight[0], params.classifier_bias[0]));
  h = ad::relu(affine(h, params.classifier_weight[1], params.classifier_bias[1]));
  return affine(h, params.classifier_weight[2], params.classifier_bias[2]);
}

ad::Tensor forward_logits(const ProbeParams& params, const ProbeConfig& config,
                          const ProbeBatch& batch) {
  const std::size_t L = config.num_layers;
  if (batch.layers.size() != L) {
    throw DimensionError("probe forward: got " + std::to_string(batch.layers.size()) +
                         " layers, probe expects " + std::to_string(L));
  }
  const std::size_t B = batch.size;
  const std::size_t P = config.probe_dim;
  const std::size_t T = L + 1;

  std::vector<Tensor> tokens;
  tokens.reserve(T);
  tokens.push_back(affine(batch.delta, params.delta_direction, params.delta_bias));
  for (std::size_t l = 0; l < L; ++l) {
    if (batch.layers[l].dim(1) != config.hidden_dim) {
      throw DimensionError("probe forward: layer " + std::to_string(l) + " has width " +
                           std::to_string(batch.layers[l].dim(1)) + ", probe expects " +
                           std::to_string(config.hidden_dim));
    }
    tokens.push_back(affine(batch.layers[l], params.input_weight[l],
                            ad::add(params.input_bias[l], params.layer_embedding[l])));
  }
  const Tensor seq = ad::reshape(ad::concat(tokens, 1), {B * T, P});

  const Tensor q = affine(seq, params.query_weight, params.query_bias);
  const Tensor k = affine(seq, params.key_weight, params.key_bias);
  const Tensor v = affine(seq, params.value_weight, params.value_bias);
  const Tensor attended = ad::softmax_attention(q, k, v, config.attention_heads, T);
  const Tensor mixed = affine(attended, params.output_weight, params.output_bias);
  const Tensor normed = ad::layernorm(ad::add(seq, mixed), params.norm_gain, params.norm_bias);
  const Tensor pooled = ad::mean(ad::reshape(normed, {B, T, P}), 1);

  Tensor h = ad::tanh(affine(pooled, params.projector_weight[0], params.projector_bias[0]));
  h = ad::tanh(affine(h, params.projector_weight[1], params.projector_bias[1]));
  return classifier_logits(params, h);
}

ad::Tensor forward(const ProbeParams& params, const ProbeConfig& config, const ProbeBatch& batch) {
  return ad::sigmoid(forward_logits(params, config, batch));
}

double forward_V(const ProbeParams& params, const ProbeConfig& config, const LayerStates& states,
                 double delta) {
  if (states.size() != config.num_layers) {
    throw DimensionError("forward_V: got " + std::to_string(states.size()) +
                         " layers, probe expects " + std::to_string(config.num_layers));
  }
  const LayerStates* ptr = &states;
  const auto batch = make_batch(std::span(&ptr, 1), std::span(&delta, 1));
  return forward(params, config, batch).item();
}

// ---------------------------------------------------------------------------
// checkpoint

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ck.config.validate();
  if (ck.stats.layer_count != ck.config.num_layers || ck.stats.hidden_dim != ck.config.hidden_dim) {
    throw ContractError("checkpoint: normalization stats do not match the probe config");
  }
  binio::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const auto& c = ck.config;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.num_layers));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.hidden_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.probe_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.attention_heads));
  for (auto width : c.classifier_widths) w.put<std::uint32_t>(static_cast<std::uint32_t>(width));
  w.put<std::uint64_t>(c.seed);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.stats.layer_count));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.stats.hidden_dim));
  for (double m : ck.stats.mean) w.put<double>(m);
  for (double s : ck.stats.stddev) w.put<double>(s);
  const auto tensors = ck.params.named();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& np : tensors) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(np.tensor.rank()));
    for (auto d : np.tensor.shape()) w.put<std::uint64_t>(d);
    for (double x : np.tensor.data()) w.put<double>(x);
  }
  w.seal();
  return w.buffer();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) {
    throw TruncatedError("checkpoint: " + std::to_string(bytes.size()) +
                         " bytes is too short to hold a header");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw BadMagicError("checkpoint: bad magic, not an LYPR file");
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, sizeof(version));
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint: unsupported version " + std::to_string(version) +
                       " (supported: " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto payload = binio::verify_sealed(bytes, 16, "checkpoint");
  binio::Reader r(payload);
  r.skip(8);
  Checkpoint ck;
  auto& c = ck.config;
  c.num_layers = r.get<std::uint32_t>();
  c.hidden_dim = r.get<std::uint32_t>();
  c.probe_dim = r.get<std::uint32_t>();
  c.attention_heads = r.get<std::uint32_t>();
  for (auto& width : c.classifier_widths) width = r.get<std::uint32_t>();
  c.seed = r.get<std::uint64_t>();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw MalformedError(std::string("checkpoint: ") + e.what());
  }
  ck.stats.layer_count = r.get<std::uint32_t>();
  ck.stats.hidden_dim = r.get<std::uint32_t>();
  if (ck.stats.layer_count != c.num_layers || ck.stats.hidden_dim != c.hidden_dim) {
    throw MalformedError("checkpoint: normalization stats do not match the probe config");
  }
  const std::size_t n = c.num_layers * c.hidden_dim;
  r.need(2 * n * sizeof(double));
  ck.stats.mean.resize(n);
  ck.stats.stddev.resize(n);
  for (double& m : ck.stats.mean) m = r.get<double>();
  for (double& s : ck.stats.stddev) s = r.get<double>();

  // Shapes are fixed by the config; compare against a freshly built template.
  {
    const double L = c.num_layers, d = c.hidden_dim, P = c.probe_dim;
    // Lower bound: input projections plus the four attention matrices.
    const double values = L * d * P + 4 * P * P;
    if (values * sizeof(double) > static_cast<double>(r.remaining())) {
      throw MalformedError("checkpoint: config implies more parameters than the file holds");
    }
  }
  const auto templ = init_probe(c).named();
  const auto count = r.get<std::uint32_t>();
  if (count != templ.size()) {
    throw MalformedError("checkpoint: " + std::to_string(count) + " tensors, expected " +
                         std::to_string(templ.size()));
  }
  std::vector<Tensor> tensors;
  for (const auto& t : templ) {
    const auto rank = r.get<std::uint32_t>();
    ad::Shape shape;
    if (rank != t.tensor.rank()) {
      throw MalformedError("checkpoint: tensor '" + t.name + "' has rank " + std::to_string(rank));
    }
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.get<std::uint64_t>());
    if (shape != t.tensor.shape()) {
      throw MalformedError("checkpoint: tensor '" + t.name + "' has shape " +
                           ad::shape_str(shape) + ", expected " + ad::shape_str(t.tensor.shape()));
    }
    std::vector<double> data(t.tensor.numel());
    r.need(data.size() * sizeof(double));
    for (double& x : data) {
      x = r.get<double>();
      if (!std::isfinite(x)) throw MalformedError("checkpoint: non-finite value in '" + t.name + "'");
    }
    tensors.push_back(Tensor::from(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw MalformedError("checkpoint: trailing bytes after tensors");
  ck.params = assemble(c.num_layers, std::move(tensors));
  return ck;
}

void save_probe(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  binio::write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_probe(const std::filesystem::path& path) {
  return decode_checkpoint(binio::read_file(path));
}

}  // namespace lyaprobe
