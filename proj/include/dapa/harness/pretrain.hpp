#pragma once

// Generic backbone pretraining. Stands in for a pretrained seq2seq model:
// the backbone is trained jointly with one prefix per generic task
// (positional extraction, keyword detection, fixed templates) so that a
// frozen copy can later be steered by a fresh prefix. Documents are
// unstructured draws over the whole lexicon, so no domain layout is seen.
// A prefix-free copy task gives the bare backbone a default behavior.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapa/backbone.hpp"
#include "dapa/harness/synthetic.hpp"
#include "dapa/numcore.hpp"
#include "dapa/prefixgen.hpp"
#include "dapa/rng.hpp"
#include "dapa/training.hpp"

namespace dapa::harness {

struct PretrainConfig {
  std::uint64_t seed = 1;
  std::size_t steps = 3000;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  std::size_t prefix_length = 10;

  bool operator==(const PretrainConfig&) const = default;

  void validate() const {
    if (steps == 0 || batch_size == 0 || prefix_length == 0) throw ConfigError("pretrain config: sizes must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("pretrain config: learning_rate must be > 0");
  }
};

inline nlohmann::json to_json(const PretrainConfig& c) {
  return {{"seed", c.seed}, {"steps", c.steps}, {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"prefix_length", c.prefix_length}};
}

inline PretrainConfig pretrain_config_from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.seed = j.value("seed", c.seed);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.prefix_length = j.value("prefix_length", c.prefix_length);
  c.validate();
  return c;
}

struct PretrainTask {
  Rule rule = Rule::LeadK;
  std::size_t k = 1;
  std::optional<TokenId> marker;   // none for the prefix-free copy task
  std::vector<TokenId> templ;
  bool copy_all = false;
  std::size_t weight = 1;          // draws per pass over the task list
};

inline std::vector<PretrainTask> pretraining_tasks() {
  std::vector<PretrainTask> tasks;
  std::size_t next_marker = 0;
  auto marker = [&] { return Lexicon::id(Lexicon::marker(next_marker++)); };
  for (std::size_t k = 1; k <= 4; ++k) tasks.push_back({Rule::LeadK, k, marker(), {}, false});
  for (std::size_t k = 1; k <= 4; ++k) tasks.push_back({Rule::TailK, k, marker(), {}, false});
  for (std::size_t k = 1; k <= 3; ++k) tasks.push_back({Rule::RepeatedKeyword, k, marker(), {}, false, 2});
  for (std::size_t t = 0; t < 4; ++t) {
    tasks.push_back({Rule::MarkerTemplate, 0, marker(),
                     {Lexicon::id(Lexicon::templ(4 + 2 * t)), Lexicon::id(Lexicon::templ(5 + 2 * t))}, false});
  }
  tasks.push_back({Rule::LeadK, 0, std::nullopt, {}, true});
  return tasks;
}

inline Example sample_pretraining_example(const PretrainTask& task, Rng& rng) {
  std::vector<TokenId> pool = Lexicon::filler_ids();
  const auto content = Lexicon::all_content_ids();
  pool.insert(pool.end(), content.begin(), content.end());
  const std::size_t len = 12 + rng.below(13);
  rng.shuffle(pool);
  std::vector<TokenId> doc;
  if (task.rule == Rule::RepeatedKeyword && !task.copy_all) {
    doc.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(len - task.k));
    for (std::size_t i = 0; i < task.k; ++i) doc.push_back(doc[i]);
    rng.shuffle(doc);
  } else {
    doc.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(len));
  }
  Example ex;
  if (task.copy_all) {
    ex.summary.ids = doc;
  } else {
    ex.summary.ids.push_back(*task.marker);
    const auto body = apply_rule(task.rule, task.k, task.templ, doc);
    ex.summary.ids.insert(ex.summary.ids.end(), body.begin(), body.end());
  }
  ex.document.ids = std::move(doc);
  return ex;
}

struct PretrainResult {
  BackboneWeights backbone;           // frozen
  std::vector<double> loss_trace;     // mean loss per 100 steps
};

inline PretrainResult pretrain_backbone(const BackboneConfig& cfg, const PretrainConfig& pc) {
  cfg.validate();
  pc.validate();
  BackboneWeights w = BackboneWeights::init(cfg, mix_seed(pc.seed, 1));
  const auto tasks = pretraining_tasks();
  std::vector<PrefixGenerator> prefixes;
  Rng rng(mix_seed(pc.seed, 2));
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    std::vector<TokenId> ids;
    for (std::size_t i = 0; i < pc.prefix_length; ++i)
      ids.push_back(static_cast<TokenId>(kFirstRegular + rng.below(cfg.vocab_size - kFirstRegular)));
    prefixes.push_back(init_prefix_generator(cfg, ids, w.embedding.value(), mix_seed(pc.seed, 100 + t),
                                             "task" + std::to_string(t)));
  }
  std::vector<Parameter*> params = w.parameters();
  for (auto& p : prefixes) {
    auto ps = p.parameters();
    params.insert(params.end(), ps.begin(), ps.end());
  }
  AdamState adam;
  PretrainResult out;
  double window = 0.0;
  std::vector<std::size_t> order;
  for (std::size_t step = 0; step < pc.steps; ++step) {
    if (order.empty()) {
      for (std::size_t t = 0; t < tasks.size(); ++t) order.insert(order.end(), tasks[t].weight, t);
      rng.shuffle(order);
    }
    const std::size_t t = order.back();
    order.pop_back();
    std::vector<Example> batch;
    for (std::size_t b = 0; b < pc.batch_size; ++b) batch.push_back(sample_pretraining_example(tasks[t], rng));
    std::vector<const Example*> ptrs;
    for (const auto& ex : batch) ptrs.push_back(&ex);
    zero_grad(params);
    const SitePrefixes site_prefixes = tasks[t].copy_all ? SitePrefixes{} : materialize_vars(prefixes[t]);
    Var loss = batch_loss(w, ptrs, site_prefixes);
    backward(loss);
    sgd_adam_step(params, adam, pc.learning_rate);
    window += loss.value().item();
    if ((step + 1) % 100 == 0) {
      out.loss_trace.push_back(window / 100.0);
      window = 0.0;
    }
  }
  zero_grad(params);
  w.set_frozen(true);
  out.backbone = std::move(w);
  return out;
}

}  // namespace dapa::harness
