#pragma once

// Optimization loops: per-domain prefix tuning, ERM over pooled sources,
// and the labeled-target regimes. Adam with a constant learning rate,
// early stopping on dev ROUGE-L with best-checkpoint retention.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapa/backbone.hpp"
#include "dapa/decoding.hpp"
#include "dapa/error.hpp"
#include "dapa/metrics.hpp"
#include "dapa/numcore.hpp"
#include "dapa/prefixgen.hpp"
#include "dapa/rng.hpp"
#include "dapa/textproc.hpp"

namespace dapa {

struct Example {
  TokenizedDoc document;
  TokenizedDoc summary;
};

struct DomainCorpus {
  std::string domain_id;
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
};

enum class TrainMode { PrefixTune, ErmPrefix, ErmFinetune, FinetuneTarget, PrefixTarget, FullFinetune, FullPrefix };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::PrefixTune: return "prefix-tune";
    case TrainMode::ErmPrefix: return "erm-prefix";
    case TrainMode::ErmFinetune: return "erm-finetune";
    case TrainMode::FinetuneTarget: return "finetune-target";
    case TrainMode::PrefixTarget: return "prefix-target";
    case TrainMode::FullFinetune: return "full-finetune";
    case TrainMode::FullPrefix: return "full-prefix";
  }
  return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  for (TrainMode m : {TrainMode::PrefixTune, TrainMode::ErmPrefix, TrainMode::ErmFinetune, TrainMode::FinetuneTarget,
                      TrainMode::PrefixTarget, TrainMode::FullFinetune, TrainMode::FullPrefix})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown training mode '" + s + "'");
}

/// Prefix modes keep the backbone frozen; the rest update it.
inline bool is_prefix_mode(TrainMode m) {
  return m == TrainMode::PrefixTune || m == TrainMode::ErmPrefix || m == TrainMode::PrefixTarget ||
         m == TrainMode::FullPrefix;
}

inline double default_learning_rate(TrainMode m) { return is_prefix_mode(m) ? 5e-3 : 5e-4; }

struct TrainConfig {
  TrainMode mode = TrainMode::PrefixTune;
  std::optional<double> learning_rate;  // unset: mode default
  std::size_t batch_size = 5;
  std::size_t max_epochs = 10;
  std::size_t patience = 1;
  std::uint64_t seed = 0;
  std::size_t prefix_length = kDefaultPrefixLength;
  DecodeConfig dev_decode = DecodeConfig::greedy(kSummaryLenCap);

  double lr() const { return learning_rate.value_or(default_learning_rate(mode)); }

  void validate() const {
    if (!(lr() > 0.0) || !std::isfinite(lr())) throw ConfigError("train config: learning_rate must be > 0");
    if (batch_size == 0) throw ConfigError("train config: batch_size must be at least 1");
    if (max_epochs == 0) throw ConfigError("train config: max_epochs must be at least 1");
    if (patience == 0) throw ConfigError("train config: patience must be at least 1");
    if (is_prefix_mode(mode) && prefix_length == 0) throw ConfigError("train config: prefix_length must be at least 1");
    if (dev_decode.beam_size != 1) throw ConfigError("train config: dev decoding is greedy (beam_size 1)");
    dev_decode.validate();
  }
};

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;

  bool operator==(const AdamState& o) const {
    if (step != o.step || m.size() != o.m.size()) return false;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (!bitwise_equal(m[i], o.m[i]) || !bitwise_equal(v[i], o.v[i])) return false;
    return true;
  }
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient. Frozen parameters are skipped.
inline void sgd_adam_step(std::span<Parameter* const> params, AdamState& state, double lr) {
  if (state.m.empty()) {
    for (Parameter* p : params) {
      state.m.emplace_back(p->value().shape());
      state.v.emplace_back(p->value().shape());
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam: parameter list changed between steps");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(kAdamBeta1, t);
  const double c2 = 1.0 - std::pow(kAdamBeta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.trainable()) continue;
    Tensor& val = p.value();
    const Tensor& g = p.grad();
    if (g.shape() != val.shape() || state.m[i].shape() != val.shape()) {
      throw DimensionError("adam: gradient shape " + g.shape_str() + " differs from parameter " + val.shape_str());
    }
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t k = 0; k < val.size(); ++k) {
      m[k] = kAdamBeta1 * m[k] + (1.0 - kAdamBeta1) * g[k];
      v[k] = kAdamBeta2 * v[k] + (1.0 - kAdamBeta2) * g[k] * g[k];
      val[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + kAdamEps);
    }
  }
}

// ---------------------------------------------------------------------------
// Reports

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  RougeTriple dev;                   // mean over dev domains
  std::vector<double> dev_rouge_l;   // per dev domain, F1
};

struct TrainReport {
  std::string mode;
  std::vector<std::string> domains;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::size_t stop_epoch = 0;
  std::size_t best_epoch = 0;
  double wall_time_s = 0.0;

  std::string text() const {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(6);
    os << "mode " << mode << " seed " << seed << " domains";
    for (const auto& d : domains) os << ' ' << d;
    os << '\n';
    for (const auto& e : epochs) {
      os << "epoch " << e.epoch << " loss " << e.train_loss << " dev_r1 " << e.dev.rouge1.f1 << " dev_r2 "
         << e.dev.rouge2.f1 << " dev_rl " << e.dev.rougeL.f1 << '\n';
    }
    os << "stop_epoch " << stop_epoch << " best_epoch " << best_epoch << '\n';
    os.precision(3);
    os << "wall_time_s " << wall_time_s << '\n';
    return os.str();
  }

  nlohmann::json to_json(bool include_wall_time = true) const {
    nlohmann::json j;
    j["mode"] = mode;
    j["domains"] = domains;
    j["seed"] = seed;
    j["stop_epoch"] = stop_epoch;
    j["best_epoch"] = best_epoch;
    j["epochs"] = nlohmann::json::array();
    for (const auto& e : epochs) {
      j["epochs"].push_back({{"epoch", e.epoch},
                             {"train_loss", e.train_loss},
                             {"dev_rouge1", e.dev.rouge1.f1},
                             {"dev_rouge2", e.dev.rouge2.f1},
                             {"dev_rougeL", e.dev.rougeL.f1},
                             {"dev_rougeL_per_domain", e.dev_rouge_l}});
    }
    if (include_wall_time) j["wall_time_s"] = wall_time_s;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Evaluation

/// Mean ROUGE F1 of greedy generations over a labeled split.
inline RougeTriple evaluate_dev(const BackboneWeights& backbone, const PrefixTensors& prefixes,
                                std::span<const Example> split, const DecodeConfig& cfg) {
  if (split.empty()) throw DegenerateInputError("evaluate_dev: empty split");
  DecodeConfig greedy = cfg;
  greedy.beam_size = 1;
  std::vector<ScoredPair> pairs;
  pairs.reserve(split.size());
  for (const auto& ex : split) {
    const TokenizedDoc doc = truncated(ex.document, backbone.config().max_src_len);
    pairs.push_back({greedy_decode(backbone, doc, prefixes, greedy).summary, ex.summary});
  }
  return corpus_rouge(pairs);
}

/// Per-example mean token cross-entropy under teacher forcing.
inline Var example_loss(const BackboneWeights& w, const Example& ex, const SitePrefixes& prefixes) {
  const TokenizedDoc doc = truncated(ex.document, w.config().max_src_len);
  auto [in, out] = teacher_forcing_pair(ex.summary, w.config().max_tgt_len);
  return cross_entropy(forward(w, doc.ids, in, prefixes), out, -1);
}

inline Var batch_loss(const BackboneWeights& w, std::span<const Example* const> batch, const SitePrefixes& prefixes) {
  std::vector<Var> losses;
  losses.reserve(batch.size());
  for (const Example* ex : batch) losses.push_back(example_loss(w, *ex, prefixes));
  return scale(add_scalars(losses), 1.0 / static_cast<double>(batch.size()));
}

// ---------------------------------------------------------------------------
// Generic loop

struct DevSet {
  std::string domain_id;
  std::span<const Example> examples;
};

/// Pieces a training regime plugs into the shared loop.
struct LoopSpec {
  std::vector<Parameter*> params;                                          // updated by Adam
  std::function<Var(std::span<const Example* const>)> loss;                // graph for one batch
  std::function<RougeTriple(std::span<const Example>)> evaluate;           // current model on a dev split
};

namespace detail {

inline std::vector<Tensor> snapshot(std::span<Parameter* const> params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(p->value());
  return out;
}

inline void restore(std::span<Parameter* const> params, const std::vector<Tensor>& saved) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value() = saved[i];
}

}  // namespace detail

/// Shuffled mini-batch Adam over `train`. After each epoch every dev set is
/// scored; training stops once any dev domain fails to beat its own best
/// ROUGE-L for `patience` consecutive epochs (with one domain: fails to
/// improve). Parameters end at the epoch with the highest mean dev ROUGE-L,
/// earliest on ties.
inline TrainReport run_training(const LoopSpec& spec, std::span<const Example> train, std::span<const DevSet> dev,
                                const TrainConfig& cfg, TrainReport report) {
  cfg.validate();
  if (train.empty()) throw DegenerateInputError("training: empty train split");
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(mix_seed(cfg.seed, 0x7472616eULL));
  AdamState adam;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<double> best_per_domain(dev.size(), -1.0);
  std::vector<std::size_t> stale(dev.size(), 0);
  double best_mean = -1.0;
  std::vector<Tensor> best_params;
  report.seed = cfg.seed;
  report.mode = to_string(cfg.mode);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const Example*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&train[order[i]]);
      zero_grad(spec.params);
      Var loss = spec.loss(batch);
      if (!std::isfinite(loss.value().item())) throw InvariantError("training: non-finite loss");
      backward(loss);
      sgd_adam_step(spec.params, adam, cfg.lr());
      loss_sum += loss.value().item();
      ++batches;
    }
    zero_grad(spec.params);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    report.stop_epoch = epoch;
    if (dev.empty()) {
      report.epochs.push_back(rec);
      report.best_epoch = epoch;
      continue;
    }
    bool stop = false;
    for (std::size_t d = 0; d < dev.size(); ++d) {
      const RougeTriple r = spec.evaluate(dev[d].examples);
      for (auto [into, from] : {std::pair{&rec.dev.rouge1, &r.rouge1}, std::pair{&rec.dev.rouge2, &r.rouge2},
                                std::pair{&rec.dev.rougeL, &r.rougeL}}) {
        into->precision += from->precision / static_cast<double>(dev.size());
        into->recall += from->recall / static_cast<double>(dev.size());
        into->f1 += from->f1 / static_cast<double>(dev.size());
      }
      rec.dev_rouge_l.push_back(r.rougeL.f1);
      if (r.rougeL.f1 > best_per_domain[d]) {
        best_per_domain[d] = r.rougeL.f1;
        stale[d] = 0;
      } else if (++stale[d] >= cfg.patience) {
        stop = true;
      }
    }
    report.epochs.push_back(rec);
    if (rec.dev.rougeL.f1 > best_mean) {
      best_mean = rec.dev.rougeL.f1;
      report.best_epoch = epoch;
      best_params = detail::snapshot(spec.params);
    }
    if (stop) break;
  }
  if (!best_params.empty()) detail::restore(spec.params, best_params);
  report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// Regimes

struct TrainOutcome {
  std::optional<PrefixGenerator> prefix;    // prefix modes
  std::optional<BackboneWeights> backbone;  // finetune modes
  TrainReport report;
};

namespace detail {

inline std::vector<TokenizedDoc> documents_of(std::span<const Example> examples) {
  std::vector<TokenizedDoc> docs;
  docs.reserve(examples.size());
  for (const auto& ex : examples) docs.push_back(ex.document);
  return docs;
}

inline std::vector<std::string> dev_domain_ids(std::span<const DevSet> dev) {
  std::vector<std::string> out;
  for (const auto& d : dev) out.push_back(d.domain_id);
  return out;
}

}  // namespace detail

/// Trains a new prefix on `train` against a frozen backbone. E starts from
/// the backbone embeddings of the C most frequent document tokens.
inline std::pair<PrefixGenerator, TrainReport> train_prefix(const BackboneWeights& backbone,
                                                            std::span<const Example> train,
                                                            std::span<const DevSet> dev, const TrainConfig& cfg,
                                                            const std::string& domain_id) {
  cfg.validate();
  if (!is_prefix_mode(cfg.mode)) throw UsageError("train_prefix: " + to_string(cfg.mode) + " is not a prefix mode");
  if (!backbone.frozen()) throw UsageError("train_prefix: backbone must be frozen");
  if (train.empty()) throw DegenerateInputError("train_prefix: empty train split for '" + domain_id + "'");
  const auto docs = detail::documents_of(train);
  const auto frequent = top_c_tokens(docs, cfg.prefix_length);
  PrefixGenerator gen =
      init_prefix_generator(backbone.config(), frequent, backbone.embedding.value(), cfg.seed, domain_id);

  LoopSpec spec;
  spec.params = gen.parameters();
  spec.loss = [&](std::span<const Example* const> batch) { return batch_loss(backbone, batch, materialize_vars(gen)); };
  spec.evaluate = [&](std::span<const Example> split) {
    return evaluate_dev(backbone, materialize(gen), split, cfg.dev_decode);
  };
  TrainReport report;
  report.domains = detail::dev_domain_ids(dev);
  if (report.domains.empty()) report.domains.push_back(domain_id);
  report = run_training(spec, train, dev, cfg, std::move(report));
  return {std::move(gen), std::move(report)};
}

/// Updates a copy of the backbone on `train`; no prefix involved.
inline std::pair<BackboneWeights, TrainReport> train_finetune(const BackboneWeights& backbone,
                                                              std::span<const Example> train,
                                                              std::span<const DevSet> dev, const TrainConfig& cfg) {
  cfg.validate();
  if (is_prefix_mode(cfg.mode)) throw UsageError("train_finetune: " + to_string(cfg.mode) + " is a prefix mode");
  if (train.empty()) throw DegenerateInputError("train_finetune: empty train split");
  BackboneWeights model = backbone;
  model.set_frozen(false);
  LoopSpec spec;
  spec.params = model.parameters();
  spec.loss = [&](std::span<const Example* const> batch) { return batch_loss(model, batch, {}); };
  spec.evaluate = [&](std::span<const Example> split) { return evaluate_dev(model, {}, split, cfg.dev_decode); };
  TrainReport report;
  report.domains = detail::dev_domain_ids(dev);
  report = run_training(spec, train, dev, cfg, std::move(report));
  model.set_frozen(true);
  return {std::move(model), std::move(report)};
}

/// One prefix per source domain, early-stopped on that domain's dev split.
inline std::pair<PrefixGenerator, TrainReport> train_source_prefix(const DomainCorpus& domain,
                                                                   const BackboneWeights& backbone,
                                                                   TrainConfig cfg) {
  cfg.mode = TrainMode::PrefixTune;
  if (domain.train.empty()) throw DegenerateInputError("train_source_prefix: domain '" + domain.domain_id + "' has no training pairs");
  std::vector<DevSet> dev;
  if (!domain.dev.empty()) dev.push_back({domain.domain_id, domain.dev});
  return train_prefix(backbone, domain.train, dev, cfg, domain.domain_id);
}

inline constexpr const char* kErmDomainId = "erm";

/// Pooled training over the union of source train splits; stops when any
/// domain's dev ROUGE-L stops improving.
inline TrainOutcome train_erm(std::span<const DomainCorpus> domains, const BackboneWeights& backbone,
                              const TrainConfig& cfg) {
  if (cfg.mode != TrainMode::ErmPrefix && cfg.mode != TrainMode::ErmFinetune) {
    throw UsageError("train_erm: mode must be erm-prefix or erm-finetune");
  }
  if (domains.empty()) throw DegenerateInputError("train_erm: no source domains");
  std::vector<Example> pooled;
  std::vector<DevSet> dev;
  for (const auto& d : domains) {
    if (d.train.empty()) throw DegenerateInputError("train_erm: domain '" + d.domain_id + "' has no training pairs");
    pooled.insert(pooled.end(), d.train.begin(), d.train.end());
    if (!d.dev.empty()) dev.push_back({d.domain_id, d.dev});
  }
  TrainOutcome out;
  if (cfg.mode == TrainMode::ErmPrefix) {
    auto [gen, report] = train_prefix(backbone, pooled, dev, cfg, kErmDomainId);
    out.prefix = std::move(gen);
    out.report = std::move(report);
  } else {
    auto [model, report] = train_finetune(backbone, pooled, dev, cfg);
    out.backbone = std::move(model);
    out.report = std::move(report);
  }
  return out;
}

/// Labeled-target regimes: finetune-target and prefix-target train on the
/// first m target pairs, full-finetune and full-prefix on the whole target
/// train split. All early-stop on the target dev split.
inline TrainOutcome train_target(const DomainCorpus& target, std::size_t m, const BackboneWeights& backbone,
                                 const TrainConfig& cfg) {
  std::span<const Example> train = target.train;
  switch (cfg.mode) {
    case TrainMode::FinetuneTarget:
    case TrainMode::PrefixTarget:
      if (m == 0) throw ConfigError("train_target: m must be at least 1");
      train = train.subspan(0, std::min(m, train.size()));
      break;
    case TrainMode::FullFinetune:
    case TrainMode::FullPrefix:
      break;
    default:
      throw UsageError("train_target: " + to_string(cfg.mode) + " is not a labeled-target mode");
  }
  if (train.empty()) throw DegenerateInputError("train_target: target '" + target.domain_id + "' has no training pairs");
  std::vector<DevSet> dev;
  if (!target.dev.empty()) dev.push_back({target.domain_id, target.dev});
  TrainOutcome out;
  if (is_prefix_mode(cfg.mode)) {
    auto [gen, report] = train_prefix(backbone, train, dev, cfg, target.domain_id);
    out.prefix = std::move(gen);
    out.report = std::move(report);
  } else {
    auto [model, report] = train_finetune(backbone, train, dev, cfg);
    out.backbone = std::move(model);
    out.report = std::move(report);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckSpec {
  std::size_t d_model = 16;
  std::size_t n_heads = 2;
  std::size_t layers = 1;        // encoder and decoder each
  std::size_t prefix_length = 4;
  std::size_t vocab_size = 32;
  std::size_t src_len = 6;
  std::size_t tgt_len = 4;
  std::uint64_t seed = 1;
  bool include_backbone = false;  // also check backbone parameters
  double perturb = 0.6;           // spread added to the prefix parameters
};

/// Central-difference check of the prefix-tuning loss on one random pair.
inline double prefix_tuning_grad_check(const GradCheckSpec& g, double eps = 3e-4) {
  BackboneConfig cfg;
  cfg.d_model = g.d_model;
  cfg.n_heads = g.n_heads;
  cfg.n_enc_layers = g.layers;
  cfg.n_dec_layers = g.layers;
  cfg.d_ff = 2 * g.d_model;
  cfg.vocab_size = g.vocab_size;
  BackboneWeights w = BackboneWeights::init(cfg, mix_seed(g.seed, 1));
  w.set_frozen(!g.include_backbone);
  Rng rng(mix_seed(g.seed, 2));
  auto draw = [&](std::size_t n) {
    std::vector<TokenId> ids;
    for (std::size_t i = 0; i < n; ++i)
      ids.push_back(static_cast<TokenId>(kFirstRegular + rng.below(g.vocab_size - kFirstRegular)));
    return ids;
  };
  Example ex;
  ex.document.ids = draw(g.src_len);
  ex.summary.ids = draw(g.tgt_len);
  const auto frequent = draw(g.prefix_length);
  PrefixGenerator gen = init_prefix_generator(cfg, frequent, w.embedding.value(), mix_seed(g.seed, 3), "check");
  // Spread the prefix parameters so every element carries a gradient well
  // above the float64 finite-difference noise floor (~1e-12).
  std::vector<Parameter*> params = gen.parameters();
  for (Parameter* p : params)
    for (double& x : p->value().values()) x += rng.uniform(-g.perturb, g.perturb);
  if (g.include_backbone) {
    auto bp = w.parameters();
    params.insert(params.end(), bp.begin(), bp.end());
  }
  return grad_check([&] { return example_loss(w, ex, materialize_vars(gen)); }, params, eps);
}

}  // namespace dapa
