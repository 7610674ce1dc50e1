#include "lyaprobe/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lyaprobe/error.hpp"
#include "lyaprobe/random.hpp"

namespace lyaprobe {

using ad::Tensor;

namespace {

// Probe points for the derivative mode when a record carries no series.
constexpr double kDefaultProbePoints[] = {0.05, 0.1, 0.2, 0.4, 0.8};

// One finite-difference slope (V[hi] - V[lo]) * inv_step, weighted in the mean.
struct Slope {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double inv_step = 0.0;
  double weight = 0.0;
};

// Rows to push through the probe plus the slopes over them.
struct RowPlan {
  std::vector<const LayerStates*> states;
  std::vector<double> deltas;
  std::vector<Slope> slopes;

  std::size_t add(const LayerStates* s, double delta) {
    states.push_back(s);
    deltas.push_back(delta);
    return states.size() - 1;
  }
};

// sum_s weight_s * max(0, slope_s) as a differentiable scalar.
Tensor weighted_hinge(const Tensor& v, const RowPlan& plan) {
  const std::size_t n = plan.states.size();
  const std::size_t m = plan.slopes.size();
  std::vector<double> diff(m * n, 0.0);
  std::vector<double> weights(m);
  for (std::size_t s = 0; s < m; ++s) {
    const auto& sl = plan.slopes[s];
    diff[s * n + sl.hi] += sl.inv_step;
    diff[s * n + sl.lo] -= sl.inv_step;
    weights[s] = sl.weight;
  }
  const Tensor slopes = ad::matmul(Tensor::from({m, n}, std::move(diff)), v);
  return ad::sum(ad::mul(ad::max_with_zero(slopes), Tensor::from({m, 1}, std::move(weights))));
}

std::vector<const HiddenRecord*> with_series(std::span<const HiddenRecord* const> records) {
  std::vector<const HiddenRecord*> out;
  for (const auto* r : records) {
    if (!r->series.empty()) out.push_back(r);
  }
  return out;
}

// Adds pairwise slopes for `records`, whose base rows are already at base_rows[i].
void plan_pairwise(RowPlan& plan, std::span<const HiddenRecord* const> records,
                   std::span<const std::size_t> base_rows, std::size_t contributing) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& series = records[i]->series;
    if (series.empty()) continue;
    const double w = 1.0 / (static_cast<double>(series.size()) * static_cast<double>(contributing));
    std::size_t prev_row = base_rows[i];
    double prev_delta = 0.0;
    for (const auto& e : series.entries) {
      const std::size_t row = plan.add(&e.states, e.delta);
      const double step = e.delta - prev_delta;
      if (!(step > 0.0)) throw ContractError("series deltas must be strictly increasing");
      plan.slopes.push_back({prev_row, row, 1.0 / step, w});
      prev_row = row;
      prev_delta = e.delta;
    }
  }
}

void plan_derivative(RowPlan& plan, const LayerStates& states, std::span<const double> points,
                     double eta, double weight_scale) {
  const double w = weight_scale / static_cast<double>(points.size());
  for (double d : points) {
    const std::size_t hi = plan.add(&states, d + eta);
    if (d - eta < 0.0) {
      const std::size_t lo = plan.add(&states, d);
      plan.slopes.push_back({lo, hi, 1.0 / eta, w});
    } else {
      const std::size_t lo = plan.add(&states, d - eta);
      plan.slopes.push_back({lo, hi, 1.0 / (2.0 * eta), w});
    }
  }
}

std::vector<double> probe_points_of(const HiddenRecord& record) {
  if (record.series.empty()) {
    return {std::begin(kDefaultProbePoints), std::end(kDefaultProbePoints)};
  }
  std::vector<double> pts;
  for (const auto& e : record.series.entries) pts.push_back(e.delta);
  return pts;
}

void add_derivative_rows(RowPlan& plan, std::span<const HiddenRecord* const> records,
                         double eta) {
  const double scale = 1.0 / static_cast<double>(records.size());
  for (const auto* r : records) {
    const auto pts = probe_points_of(*r);
    plan_derivative(plan, r->states, pts, eta, scale);
  }
}

Tensor run(const ProbeParams& params, const ProbeConfig& config, const RowPlan& plan) {
  return forward(params, config, make_batch(plan.states, plan.deltas));
}

std::optional<double> validation_auprc(const ProbeParams& params, const ProbeConfig& config,
                                       std::span<const HiddenRecord> validation) {
  if (validation.empty()) return std::nullopt;
  const Checkpoint ck{config, NormStats::identity(config.num_layers, config.hidden_dim),
                      params.clone(false)};
  return score_auprc(probe_scorer(ck), validation);
}

void check_shapes(std::span<const HiddenRecord> records, const ProbeConfig& config,
                  const char* what) {
  for (const auto& r : records) {
    if (r.states.size() != config.num_layers) {
      std::ostringstream os;
      os << what << " record " << r.id << " has " << r.states.size() << " layers, probe expects "
         << config.num_layers;
      throw DimensionError(os.str());
    }
    for (const auto& layer : r.states) {
      if (layer.size() != config.hidden_dim) {
        std::ostringstream os;
        os << what << " record " << r.id << " has hidden width " << layer.size()
           << ", probe expects " << config.hidden_dim;
        throw DimensionError(os.str());
      }
    }
  }
}

std::string epoch_context(std::size_t epoch, std::size_t batch) {
  std::ostringstream os;
  os << "epoch " << epoch << ", batch " << batch;
  return os.str();
}

}  // namespace

std::string_view to_string(LyapunovMode mode) {
  switch (mode) {
    case LyapunovMode::PairwiseHinge:
      return "pairwise_hinge";
    case LyapunovMode::InputDerivative:
      return "input_derivative";
  }
  return "unknown";
}

LyapunovMode lyapunov_mode_from_string(std::string_view text) {
  if (text == "pairwise_hinge") return LyapunovMode::PairwiseHinge;
  if (text == "input_derivative") return LyapunovMode::InputDerivative;
  throw ConfigError("unknown lyapunov_mode '" + std::string(text) +
                    "' (expected pairwise_hinge or input_derivative)");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be a positive finite number");
  }
  if (!(lambda_max >= 0.0) || !std::isfinite(lambda_max)) {
    throw ConfigError("lambda_max must be >= 0");
  }
  if (epochs_stage2 > 0 && warmup_epochs > epochs_stage2) {
    throw ConfigError("warmup_epochs must not exceed epochs_stage2");
  }
  if (epochs_stage1 + epochs_stage2 == 0) throw ConfigError("at least one epoch is required");
  if (!(derivative_step > 0.0) || !std::isfinite(derivative_step)) {
    throw ConfigError("derivative_step must be positive");
  }
  if (regenerate_series) {
    if (regen_series_length == 0) throw ConfigError("regen_series_length must be positive");
    if (!(regen_sigma_min > 0.0) || !(regen_sigma_max >= regen_sigma_min)) {
      throw ConfigError("regen sigma range must satisfy 0 < min <= max");
    }
  }
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "epoch,stage,lambda,bce,lyapunov,val_auprc\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.stage << ',' << format_real(e.lambda) << ',' << format_real(e.bce)
       << ',' << (e.lyapunov ? format_real(*e.lyapunov) : "NA") << ','
       << (e.val_auprc ? format_real(*e.val_auprc) : "NA") << '\n';
  }
  return os.str();
}

double loss_bce(double v0, std::uint8_t y) {
  if (!(v0 > 0.0 && v0 < 1.0)) throw DimensionError("V0 must lie strictly inside (0, 1)");
  return y ? -std::log(v0) : -std::log1p(-v0);
}

double loss_lyapunov_pairwise(std::span<const double> series_v,
                              std::span<const double> series_delta, double v0) {
  if (series_v.empty()) throw ContractError("series must hold at least one point");
  if (series_v.size() != series_delta.size()) {
    throw DimensionError("series V and delta lengths differ");
  }
  double prev_v = v0;
  double prev_d = 0.0;
  double total = 0.0;
  for (std::size_t k = 0; k < series_v.size(); ++k) {
    const double step = series_delta[k] - prev_d;
    if (!(step > 0.0)) throw ContractError("series deltas must be strictly increasing");
    total += std::max(0.0, (series_v[k] - prev_v) / step);
    prev_v = series_v[k];
    prev_d = series_delta[k];
  }
  return total / static_cast<double>(series_v.size());
}

double loss_lyapunov_derivative(const ProbeParams& params, const ProbeConfig& config,
                                const LayerStates& states, std::span<const double> probe_points,
                                double eta) {
  if (probe_points.empty()) throw ContractError("at least one probe point is required");
  if (!(eta > 0.0)) throw ContractError("eta must be positive");
  RowPlan plan;
  plan_derivative(plan, states, probe_points, eta, 1.0);
  return weighted_hinge(run(params, config, plan), plan).item();
}

double lambda_at(std::size_t stage2_epoch, const TrainConfig& config) {
  if (stage2_epoch == 0) return 0.0;
  if (config.warmup_epochs == 0) return config.lambda_max;
  const double ramp = static_cast<double>(stage2_epoch) / static_cast<double>(config.warmup_epochs);
  return config.lambda_max * std::min(1.0, ramp);
}

std::optional<Tensor> lyapunov_pairwise_term(const ProbeParams& params, const ProbeConfig& config,
                                             std::span<const HiddenRecord* const> records) {
  const auto used = with_series(records);
  if (used.empty()) return std::nullopt;
  RowPlan plan;
  std::vector<std::size_t> base_rows;
  for (const auto* r : used) base_rows.push_back(plan.add(&r->states, 0.0));
  plan_pairwise(plan, used, base_rows, used.size());
  return weighted_hinge(run(params, config, plan), plan);
}

std::optional<Tensor> lyapunov_derivative_term(const ProbeParams& params,
                                               const ProbeConfig& config,
                                               std::span<const HiddenRecord* const> records,
                                               double eta) {
  if (records.empty()) return std::nullopt;
  RowPlan plan;
  add_derivative_rows(plan, records, eta);
  return weighted_hinge(run(params, config, plan), plan);
}

TrainResult train(std::span<const HiddenRecord> train_records,
                  std::span<const HiddenRecord> validation, const ProbeConfig& probe_config,
                  const TrainConfig& config) {
  probe_config.validate();
  config.validate();
  if (train_records.empty()) throw ContractError("training split is empty");
  check_shapes(train_records, probe_config, "training");
  check_shapes(validation, probe_config, "validation");

  TrainResult result;
  const bool penalized = config.epochs_stage2 > 0 && config.lambda_max > 0.0;
  if (penalized && config.lyapunov_mode == LyapunovMode::PairwiseHinge &&
      !config.regenerate_series) {
    const bool any = std::any_of(train_records.begin(), train_records.end(),
                                 [](const HiddenRecord& r) { return !r.series.empty(); });
    if (!any) {
      throw ContractError(
          "pairwise_hinge training needs perturbation series; rebuild the dataset with "
          "series_length > 0 or enable regenerate_series");
    }
  }

  const std::size_t positives = static_cast<std::size_t>(std::count_if(
      train_records.begin(), train_records.end(), [](const HiddenRecord& r) { return r.label; }));
  if (positives == 0 || positives == train_records.size()) {
    result.warnings.push_back("all training labels belong to one class");
  }

  result.stats = normalize_fit(train_records);
  std::vector<HiddenRecord> tr = normalize_apply(train_records, result.stats);
  const std::vector<HiddenRecord> va = normalize_apply(validation, result.stats);

  ProbeParams params = init_probe(probe_config);
  params.set_requires_grad(true);
  auto named = params.named();
  auto adam = ad::AdamState::for_params(named, config.learning_rate);

  const auto regen_grid =
      config.regenerate_series
          ? log_spaced(config.regen_sigma_min, config.regen_sigma_max, config.regen_series_length)
          : std::vector<double>{};

  const std::size_t total = config.epochs_stage1 + config.epochs_stage2;
  const std::size_t n = tr.size();
  for (std::size_t epoch = 1; epoch <= total; ++epoch) {
    const int stage = epoch <= config.epochs_stage1 ? 1 : 2;
    const double lambda = stage == 1 ? 0.0 : lambda_at(epoch - config.epochs_stage1, config);
    const bool active = lambda > 0.0;

    if (active && config.regenerate_series) {
      for (std::size_t i = 0; i < n; ++i) {
        auto series = build_series(train_records[i].states, config.regen_series_length,
                                   regen_grid,
                                   derive_seed(config.seed ^ train_records[i].id, epoch));
        for (auto& e : series.entries) result.stats.apply(e.states);
        tr[i].series = std::move(series);
      }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng(derive_seed(config.seed, epoch)).shuffle(std::span<std::size_t>(order));

    double bce_sum = 0.0;
    double lyap_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      std::vector<const HiddenRecord*> batch;
      std::vector<double> targets;
      for (std::size_t j = start; j < end; ++j) {
        batch.push_back(&tr[order[j]]);
        targets.push_back(static_cast<double>(tr[order[j]].label));
      }

      RowPlan plan;
      std::vector<std::size_t> base_rows;
      for (const auto* r : batch) base_rows.push_back(plan.add(&r->states, 0.0));

      Tensor loss;
      double bce_value = 0.0;
      double lyap_value = 0.0;
      if (!active) {
        const Tensor logits =
            forward_logits(params, probe_config, make_batch(plan.states, plan.deltas));
        loss = ad::bce_with_logits(logits, targets);
        bce_value = loss.item();
      } else {
        if (config.lyapunov_mode == LyapunovMode::PairwiseHinge) {
          const auto used = with_series(batch);
          plan_pairwise(plan, batch, base_rows, std::max<std::size_t>(1, used.size()));
        } else {
          add_derivative_rows(plan, batch, config.derivative_step);
        }
        const Tensor logits =
            forward_logits(params, probe_config, make_batch(plan.states, plan.deltas));
        const Tensor bce = ad::bce_with_logits(ad::gather_rows(logits, base_rows), targets);
        bce_value = bce.item();
        if (plan.slopes.empty()) {
          loss = bce;
        } else {
          const Tensor penalty = weighted_hinge(ad::sigmoid(logits), plan);
          lyap_value = penalty.item();
          loss = ad::add(bce, ad::scale(penalty, lambda));
        }
      }

      if (!std::isfinite(loss.item())) {
        throw NumericalError("non-finite loss at " + epoch_context(epoch, batches + 1));
      }
      ad::backward(loss);
      try {
        ad::adam_step(named, adam);
      } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " at " + epoch_context(epoch, batches + 1));
      }
      for (auto& p : named) p.tensor.zero_grad();

      bce_sum += bce_value;
      lyap_sum += lyap_value;
      ++batches;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.stage = stage;
    entry.lambda = lambda;
    entry.bce = bce_sum / static_cast<double>(batches);
    if (active) entry.lyapunov = lyap_sum / static_cast<double>(batches);
    entry.val_auprc = validation_auprc(params, probe_config, va);
    result.log.epochs.push_back(entry);
  }

  if (!validation.empty() && !result.log.epochs.back().val_auprc) {
    result.warnings.push_back("validation split has no positive labels; AUPRC reported as NA");
  }
  params.set_requires_grad(false);
  result.params = params.clone(false);
  return result;
}

std::vector<LayerScore> ablate_layers(std::span<const HiddenRecord> train_records,
                                      std::span<const HiddenRecord> validation,
                                      const ProbeConfig& probe_config,
                                      const TrainConfig& train_config,
                                      std::span<const std::vector<std::size_t>> subsets) {
  std::vector<std::vector<std::size_t>> runs(subsets.begin(), subsets.end());
  std::vector<std::size_t> all(probe_config.num_layers);
  std::iota(all.begin(), all.end(), std::size_t{0});
  runs.push_back(all);

  std::vector<LayerScore> out;
  for (const auto& layers : runs) {
    if (layers.empty()) throw ConfigError("layer subsets must not be empty");
    for (std::size_t l : layers) {
      if (l >= probe_config.num_layers) {
        throw ConfigError("layer index " + std::to_string(l) + " out of range");
      }
    }
    const auto tr = select_layers(train_records, layers);
    const auto va = select_layers(validation, layers);
    ProbeConfig cfg = probe_config;
    cfg.num_layers = layers.size();
    const auto result = train(tr, va, cfg, train_config);
    out.push_back({layers, result.log.epochs.back().val_auprc});
  }
  return out;
}

}  // namespace lyaprobe
