#pragma once

// End-to-end experiments on synthetic domains: pretrain (or load) the
// backbone, train or load per-domain prefixes, compute weights on the
// unlabeled target sample, merge, and score the target test split.
//
// Run directory layout:
//   run.json          experiment config plus the cache location
//   result.json       RunResult (no wall time; byte-stable)
//   result.txt        one-row table
//   timing.json       wall time
//   encoder.json      IDF table of the sentence encoder
//   similarity.json   m x n similarity matrix (DAPA family)
//   weights.json      DomainWeights
// Cache directory (shared by sweeps and seeds):
//   backbone/<hash>.bkb, prefixes/<domain>-<hash>.pfx (+ .log/.json train reports),
//   models/<mode>-<hash>.bkb

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapa/backbone.hpp"
#include "dapa/backbone_io.hpp"
#include "dapa/container.hpp"
#include "dapa/decoding.hpp"
#include "dapa/error.hpp"
#include "dapa/harness/pretrain.hpp"
#include "dapa/harness/synthetic.hpp"
#include "dapa/merging.hpp"
#include "dapa/metrics.hpp"
#include "dapa/prefixgen.hpp"
#include "dapa/training.hpp"

namespace dapa::harness {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kConfigSchema = 1;

enum class Method {
  Dapa,
  DapaAverage,
  DapaMax,
  DapaInst,
  DapaEmbed,
  DapaAlt,
  ErmPrefix,
  ErmFinetune,
  FinetuneTarget,
  PrefixTarget,
  FullFinetune,
  FullPrefix
};

inline constexpr Method kAllMethods[] = {Method::Dapa,         Method::DapaAverage,    Method::DapaMax,
                                         Method::DapaInst,     Method::DapaEmbed,      Method::DapaAlt,
                                         Method::ErmPrefix,    Method::ErmFinetune,    Method::FinetuneTarget,
                                         Method::PrefixTarget, Method::FullFinetune,   Method::FullPrefix};

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Dapa: return "dapa";
    case Method::DapaAverage: return "dapa-average";
    case Method::DapaMax: return "dapa-max";
    case Method::DapaInst: return "dapa-inst";
    case Method::DapaEmbed: return "dapa-embed";
    case Method::DapaAlt: return "dapa-alt";
    case Method::ErmPrefix: return "erm-prefix";
    case Method::ErmFinetune: return "erm-finetune";
    case Method::FinetuneTarget: return "finetune-target";
    case Method::PrefixTarget: return "prefix-target";
    case Method::FullFinetune: return "full-finetune";
    case Method::FullPrefix: return "full-prefix";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : kAllMethods)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "'");
}

/// Methods that average or pool per-source prefixes.
inline bool is_dapa_family(Method m) {
  return m == Method::Dapa || m == Method::DapaAverage || m == Method::DapaMax || m == Method::DapaInst ||
         m == Method::DapaEmbed || m == Method::DapaAlt;
}

/// Regimes that read labeled target pairs before the final evaluation.
inline bool uses_target_labels(Method m) {
  return m == Method::FinetuneTarget || m == Method::PrefixTarget || m == Method::FullFinetune ||
         m == Method::FullPrefix;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainSettings {
  std::size_t batch_size = 5;
  std::size_t max_epochs = 10;
  std::size_t patience = 1;
  double prefix_learning_rate = 5e-3;
  double finetune_learning_rate = 5e-4;
  std::size_t dev_max_len = 32;

  bool operator==(const TrainSettings&) const = default;
};

inline BackboneConfig default_backbone_config() {
  BackboneConfig c;
  c.d_model = 32;
  c.n_heads = 2;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.d_ff = 64;
  c.vocab_size = Lexicon::vocabulary().size();
  return c;
}

inline PretrainConfig default_pretrain_config() {
  PretrainConfig p;
  p.steps = 10000;
  return p;
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  Method method = Method::Dapa;
  std::vector<SyntheticDomainSpec> sources;
  SyntheticDomainSpec target;
  std::size_t prefix_length = kDefaultPrefixLength;
  std::size_t m = 50;
  BackboneConfig backbone = default_backbone_config();
  PretrainConfig pretrain = default_pretrain_config();
  TrainSettings train;
  DecodeConfig decode{10, 2.5, 32, true, 1.0};
  bool idf = true;

  void validate() const {
    if (sources.empty()) throw ConfigError("experiment: at least one source domain is required");
    std::set<std::string> ids, markers;
    for (const auto& s : sources) {
      s.validate();
      if (!ids.insert(s.domain_id).second) throw ConfigError("experiment: duplicate domain id '" + s.domain_id + "'");
      if (!markers.insert(s.marker).second) throw ConfigError("experiment: marker '" + s.marker + "' used twice");
    }
    target.validate();
    if (ids.contains(target.domain_id)) throw ConfigError("experiment: target id '" + target.domain_id + "' is also a source");
    if (markers.contains(target.marker)) throw ConfigError("experiment: target marker '" + target.marker + "' is used by a source");
    if (prefix_length == 0) throw ConfigError("experiment: prefix length C must be at least 1");
    if (m == 0) throw ConfigError("experiment: m must be at least 1");
    if (m > target.n_train) throw ConfigError("experiment: m exceeds the target document pool (n_train)");
    backbone.validate();
    if (backbone.vocab_size != Lexicon::vocabulary().size()) {
      throw ConfigMismatchError("experiment: backbone vocab_size " + std::to_string(backbone.vocab_size) +
                                " differs from the lexicon size " + std::to_string(Lexicon::vocabulary().size()));
    }
    pretrain.validate();
    decode.validate();
    if (train.batch_size == 0 || train.max_epochs == 0 || train.patience == 0 || train.dev_max_len == 0) {
      throw ConfigError("experiment: training sizes must be at least 1");
    }
    if (!(train.prefix_learning_rate > 0.0) || !(train.finetune_learning_rate > 0.0)) {
      throw ConfigError("experiment: learning rates must be > 0");
    }
  }
};

inline json to_json(const BackboneConfig& c) {
  return {{"d_model", c.d_model},         {"n_heads", c.n_heads}, {"n_enc_layers", c.n_enc_layers},
          {"n_dec_layers", c.n_dec_layers}, {"d_ff", c.d_ff},     {"vocab_size", c.vocab_size},
          {"max_src_len", c.max_src_len}, {"max_tgt_len", c.max_tgt_len}};
}

inline json to_json(const TrainSettings& t) {
  return {{"batch_size", t.batch_size},
          {"max_epochs", t.max_epochs},
          {"patience", t.patience},
          {"prefix_learning_rate", t.prefix_learning_rate},
          {"finetune_learning_rate", t.finetune_learning_rate},
          {"dev_max_len", t.dev_max_len}};
}

inline json to_json(const DecodeConfig& d) {
  return {{"beam_size", d.beam_size},
          {"repetition_penalty", d.repetition_penalty},
          {"max_len", d.max_len},
          {"length_normalization", d.length_normalization},
          {"length_exponent", d.length_exponent}};
}

inline json to_json(const ExperimentConfig& c) {
  json sources = json::array();
  for (const auto& s : c.sources) sources.push_back(to_json(s));
  return {{"schema", kConfigSchema},  {"seed", c.seed},         {"method", to_string(c.method)},
          {"sources", sources},       {"target", to_json(c.target)}, {"prefix_length", c.prefix_length},
          {"m", c.m},                 {"backbone", to_json(c.backbone)}, {"pretrain", to_json(c.pretrain)},
          {"train", to_json(c.train)}, {"decode", to_json(c.decode)},   {"idf", c.idf}};
}

namespace detail {

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const json& j) {
  detail::reject_unknown_keys(j,
                              {"schema", "seed", "method", "sources", "target", "prefix_length", "m", "backbone",
                               "pretrain", "train", "decode", "idf"},
                              "experiment config");
  if (!j.contains("schema") || j.at("schema") != kConfigSchema) {
    throw ConfigError("experiment config: expected \"schema\": " + std::to_string(kConfigSchema));
  }
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.method = method_from_string(j.value("method", to_string(c.method)));
    for (const auto& s : j.at("sources")) c.sources.push_back(domain_spec_from_json(s));
    c.target = domain_spec_from_json(j.at("target"));
    c.prefix_length = j.value("prefix_length", c.prefix_length);
    c.m = j.value("m", c.m);
    if (j.contains("backbone")) {
      const json& b = j.at("backbone");
      detail::reject_unknown_keys(b, {"d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "vocab_size",
                                      "max_src_len", "max_tgt_len"},
                                  "backbone");
      c.backbone.d_model = b.value("d_model", c.backbone.d_model);
      c.backbone.n_heads = b.value("n_heads", c.backbone.n_heads);
      c.backbone.n_enc_layers = b.value("n_enc_layers", c.backbone.n_enc_layers);
      c.backbone.n_dec_layers = b.value("n_dec_layers", c.backbone.n_dec_layers);
      c.backbone.d_ff = b.value("d_ff", c.backbone.d_ff);
      c.backbone.vocab_size = b.value("vocab_size", c.backbone.vocab_size);
      c.backbone.max_src_len = b.value("max_src_len", c.backbone.max_src_len);
      c.backbone.max_tgt_len = b.value("max_tgt_len", c.backbone.max_tgt_len);
    }
    if (j.contains("pretrain")) {
      detail::reject_unknown_keys(j.at("pretrain"), {"seed", "steps", "batch_size", "learning_rate", "prefix_length"},
                                  "pretrain");
      c.pretrain = pretrain_config_from_json(j.at("pretrain"));
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      detail::reject_unknown_keys(t, {"batch_size", "max_epochs", "patience", "prefix_learning_rate",
                                      "finetune_learning_rate", "dev_max_len"},
                                  "train");
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.max_epochs = t.value("max_epochs", c.train.max_epochs);
      c.train.patience = t.value("patience", c.train.patience);
      c.train.prefix_learning_rate = t.value("prefix_learning_rate", c.train.prefix_learning_rate);
      c.train.finetune_learning_rate = t.value("finetune_learning_rate", c.train.finetune_learning_rate);
      c.train.dev_max_len = t.value("dev_max_len", c.train.dev_max_len);
    }
    if (j.contains("decode")) {
      const json& d = j.at("decode");
      detail::reject_unknown_keys(d, {"beam_size", "repetition_penalty", "max_len", "length_normalization",
                                      "length_exponent"},
                                  "decode");
      c.decode.beam_size = d.value("beam_size", c.decode.beam_size);
      c.decode.repetition_penalty = d.value("repetition_penalty", c.decode.repetition_penalty);
      c.decode.max_len = d.value("max_len", c.decode.max_len);
      c.decode.length_normalization = d.value("length_normalization", c.decode.length_normalization);
      c.decode.length_exponent = d.value("length_exponent", c.decode.length_exponent);
    }
    c.idf = j.value("idf", c.idf);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

/// Three sources (lead-3, tail-3, repeated-keyword) and a target that
/// shares the rule of source `seed % 3` but has its own marker and content
/// slice.
inline ExperimentConfig matched_benchmark_config(std::uint64_t seed, Method method = Method::Dapa) {
  ExperimentConfig c;
  c.seed = seed;
  c.method = method;
  c.sources = {
      {"lead", Rule::LeadK, 3, "mk00", {}, 0, 12, 24, 500, 50, 100},
      {"tail", Rule::TailK, 3, "mk01", {}, 1, 12, 24, 500, 50, 100},
      {"keyword", Rule::RepeatedKeyword, 3, "mk02", {}, 2, 12, 24, 500, 50, 100},
  };
  c.target = c.sources[seed % 3];
  c.target.domain_id = "target";
  c.target.marker = "mk05";
  c.target.slice = 4;
  return c;
}

/// A fourth source with a constant template summary.
inline SyntheticDomainSpec template_domain_spec() {
  return {"template", Rule::MarkerTemplate, 1, "mk03", {"tp00", "tp01"}, 3, 12, 24, 500, 50, 100};
}

// ---------------------------------------------------------------------------
// Results

struct RunResult {
  std::string method;
  std::string target;
  std::vector<std::string> sources;
  std::uint64_t seed = 0;
  std::size_t prefix_length = 0;
  std::size_t m = 0;
  RougeTriple rouge;
  std::optional<DomainWeights> weights;
  std::vector<double> contribution;  // dapa-max: share of elements per source
  double wall_time_s = 0.0;          // kept out of the JSON record

  bool operator==(const RunResult& o) const {
    auto same_w = [](const std::optional<DomainWeights>& a, const std::optional<DomainWeights>& b) {
      if (a.has_value() != b.has_value()) return false;
      return !a || (a->w == b->w && a->rule == b->rule);
    };
    return method == o.method && target == o.target && sources == o.sources && seed == o.seed &&
           prefix_length == o.prefix_length && m == o.m && rouge == o.rouge && same_w(weights, o.weights) &&
           contribution == o.contribution;
  }
};

inline json to_json(const RougeScore& s) { return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}}; }

inline RougeScore rouge_score_from_json(const json& j) {
  return {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>()};
}

inline json to_json(const RunResult& r) {
  json j{{"method", r.method},
         {"target", r.target},
         {"sources", r.sources},
         {"seed", r.seed},
         {"prefix_length", r.prefix_length},
         {"m", r.m},
         {"rouge", {{"rouge1", to_json(r.rouge.rouge1)}, {"rouge2", to_json(r.rouge.rouge2)}, {"rougeL", to_json(r.rouge.rougeL)}}}};
  if (r.weights) j["weights"] = weights_to_json(*r.weights, r.sources, r.m);
  if (!r.contribution.empty()) j["contribution"] = r.contribution;
  return j;
}

inline RunResult run_result_from_json(const json& j) {
  RunResult r;
  try {
    r.method = j.at("method").get<std::string>();
    r.target = j.at("target").get<std::string>();
    r.sources = j.at("sources").get<std::vector<std::string>>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.prefix_length = j.at("prefix_length").get<std::size_t>();
    r.m = j.at("m").get<std::size_t>();
    const json& g = j.at("rouge");
    r.rouge = {rouge_score_from_json(g.at("rouge1")), rouge_score_from_json(g.at("rouge2")),
               rouge_score_from_json(g.at("rougeL"))};
    if (j.contains("weights")) r.weights = weights_from_json(j.at("weights"));
    if (j.contains("contribution")) r.contribution = j.at("contribution").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("run result: ") + e.what());
  }
  return r;
}

inline std::string result_json_text(const RunResult& r) { return to_json(r).dump(2) + "\n"; }

/// Rows sorted by (target, method), then seed, C and m.
inline std::vector<RunResult> sorted_results(std::vector<RunResult> results) {
  std::stable_sort(results.begin(), results.end(), [](const RunResult& a, const RunResult& b) {
    return std::tie(a.target, a.method, a.seed, a.prefix_length, a.m) <
           std::tie(b.target, b.method, b.seed, b.prefix_length, b.m);
  });
  return results;
}

enum class ReportFormat { Text, Json };

inline std::string report(const std::vector<RunResult>& results, ReportFormat format) {
  if (results.empty()) throw DegenerateInputError("report: no results");
  const auto rows = sorted_results(results);
  if (format == ReportFormat::Json) {
    json arr = json::array();
    for (const auto& r : rows) arr.push_back(to_json(r));
    return json{{"results", arr}}.dump(2) + "\n";
  }
  auto pct = [](double x) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << 100.0 * x;
    return os.str();
  };
  std::vector<std::vector<std::string>> cells{{"target", "method", "seed", "C", "m", "R-1", "R-2", "R-L", "weights"}};
  for (const auto& r : rows) {
    std::string w = "-";
    if (r.weights) {
      std::ostringstream os;
      os << std::fixed << std::setprecision(3);
      for (std::size_t i = 0; i < r.weights->w.size(); ++i) os << (i ? " " : "") << r.weights->w[i];
      w = os.str();
    }
    cells.push_back({r.target, r.method, std::to_string(r.seed), std::to_string(r.prefix_length),
                     std::to_string(r.m), pct(r.rouge.rouge1.f1), pct(r.rouge.rouge2.f1), pct(r.rouge.rougeL.f1), w});
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (const auto& row : cells) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      const bool numeric = c >= 2 && c <= 7;
      const std::string pad(width[c] - row[c].size(), ' ');
      line += (c ? "  " : "") + (numeric ? pad + row[c] : row[c] + pad);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    os << line << '\n';
  }
  return os.str();
}

inline std::vector<RunResult> results_from_json(const json& j) {
  std::vector<RunResult> out;
  if (j.is_object() && j.contains("results")) {
    for (const auto& r : j.at("results")) out.push_back(run_result_from_json(r));
  } else if (j.is_array()) {
    for (const auto& r : j) out.push_back(run_result_from_json(r));
  } else {
    out.push_back(run_result_from_json(j));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Target access tracking

/// Ordered record of every read of the target corpus.
struct AccessLog {
  std::vector<std::string> events;
  void record(std::string e) { events.push_back(std::move(e)); }
};

/// Hands out the target corpus by purpose. Unlabeled reads return documents
/// only; labeled reads are logged so tests can check that summaries are
/// touched only by the final evaluation outside the labeled-target regimes.
class GuardedCorpus {
 public:
  GuardedCorpus(DomainCorpus corpus, AccessLog* log) : corpus_(std::move(corpus)), log_(log) {}

  const std::string& domain_id() const { return corpus_.domain_id; }

  TargetSample unlabeled_sample(std::size_t m) const {
    note("documents:train[0," + std::to_string(m) + ")");
    if (m > corpus_.train.size()) throw DataError("target sample: m exceeds the target document pool");
    TargetSample s;
    for (std::size_t i = 0; i < m; ++i) s.docs.push_back(corpus_.train[i].document);
    return s;
  }

  TargetSample test_documents() const {
    note("documents:test");
    TargetSample s;
    for (const auto& ex : corpus_.test) s.docs.push_back(ex.document);
    return s;
  }

  /// Labeled train/dev access for the labeled-target regimes.
  const DomainCorpus& labeled_for_training() const {
    note("labels:train+dev");
    return corpus_;
  }

  /// Test pairs for the final score.
  std::span<const Example> final_evaluation() const {
    note("labels:test");
    return corpus_.test;
  }

 private:
  void note(std::string e) const {
    if (log_) log_->record(std::move(e));
  }
  DomainCorpus corpus_;
  AccessLog* log_;
};

// ---------------------------------------------------------------------------
// Artifacts

struct RunContext {
  fs::path run_dir;
  fs::path cache_dir;
  AccessLog* access = nullptr;
  std::ostream* progress = nullptr;
};

inline std::string content_hash(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) h = (h ^ c) * 1099511628211ULL;
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

namespace detail {

inline void say(const RunContext& ctx, const std::string& msg) {
  if (ctx.progress) *ctx.progress << msg << std::endl;
}

inline TrainConfig make_train_config(const ExperimentConfig& cfg, TrainMode mode, std::uint64_t seed) {
  TrainConfig t;
  t.mode = mode;
  t.learning_rate = is_prefix_mode(mode) ? cfg.train.prefix_learning_rate : cfg.train.finetune_learning_rate;
  t.batch_size = cfg.train.batch_size;
  t.max_epochs = cfg.train.max_epochs;
  t.patience = cfg.train.patience;
  t.seed = seed;
  t.prefix_length = cfg.prefix_length;
  t.dev_decode = DecodeConfig::greedy(cfg.train.dev_max_len, cfg.decode.repetition_penalty);
  return t;
}

inline std::string backbone_key(const ExperimentConfig& cfg) {
  return content_hash(json{{"backbone", to_json(cfg.backbone)}, {"pretrain", to_json(cfg.pretrain)}}.dump());
}

inline std::string training_key(const ExperimentConfig& cfg, const json& what) {
  return content_hash(json{{"backbone", backbone_key(cfg)},
                           {"seed", cfg.seed},
                           {"prefix_length", cfg.prefix_length},
                           {"train", to_json(cfg.train)},
                           {"repetition_penalty", cfg.decode.repetition_penalty},
                           {"what", what}}
                          .dump());
}

inline void save_report(const TrainReport& report, const fs::path& stem) {
  write_file_atomic(fs::path(stem).concat(".log"), report.text());
  write_file_atomic(fs::path(stem).concat(".json"), report.to_json().dump(2) + "\n");
}

}  // namespace detail

/// Pretrains once per (backbone, pretrain) configuration; later calls load
/// the checkpoint. The returned weights always come from disk so that a
/// fresh run and a cached run see identical values.
inline BackboneWeights obtain_backbone(const ExperimentConfig& cfg, const RunContext& ctx) {
  const fs::path path = ctx.cache_dir / "backbone" / (detail::backbone_key(cfg) + ".bkb");
  if (!fs::exists(path)) {
    detail::say(ctx, "pretraining backbone (" + std::to_string(cfg.pretrain.steps) + " steps)");
    PretrainResult r = pretrain_backbone(cfg.backbone, cfg.pretrain);
    std::ostringstream trace;
    for (std::size_t i = 0; i < r.loss_trace.size(); ++i) trace << "step " << 100 * (i + 1) << " loss " << r.loss_trace[i] << '\n';
    write_file_atomic(fs::path(path).replace_extension(".log"), trace.str());
    save_backbone(r.backbone, path);
  }
  return load_backbone(path);
}

inline fs::path source_prefix_path(const ExperimentConfig& cfg, const SyntheticDomainSpec& spec, const fs::path& cache) {
  return cache / "prefixes" / (spec.domain_id + "-" + detail::training_key(cfg, {{"source", to_json(spec)}}) + ".pfx");
}

/// Loads the cached prefix for `spec` or trains and caches it. `trained`
/// reports whether training happened.
inline PrefixGenerator obtain_source_prefix(const ExperimentConfig& cfg, const SyntheticDomainSpec& spec,
                                            const BackboneWeights& backbone, const RunContext& ctx,
                                            bool* trained = nullptr) {
  const fs::path path = source_prefix_path(cfg, spec, ctx.cache_dir);
  if (trained) *trained = false;
  if (!fs::exists(path)) {
    detail::say(ctx, "training prefix for source '" + spec.domain_id + "'");
    const DomainCorpus corpus = generate_domain(spec, cfg.seed);
    auto [gen, report] = train_source_prefix(
        corpus, backbone, detail::make_train_config(cfg, TrainMode::PrefixTune, mix_seed(cfg.seed, domain_tag(spec.domain_id))));
    detail::save_report(report, fs::path(path).replace_extension(""));
    save_prefix(gen, path);
    if (trained) *trained = true;
  }
  return load_prefix(path, backbone.config());
}

/// Sentence encoder with IDF from the source training documents.
inline BagOfTokensEncoder make_encoder(const ExperimentConfig& cfg) {
  const std::size_t v = cfg.backbone.vocab_size;
  if (!cfg.idf) return BagOfTokensEncoder(v);
  std::vector<TokenizedDoc> docs;
  for (const auto& s : cfg.sources) {
    const DomainCorpus c = generate_domain(s, cfg.seed);
    for (const auto& ex : c.train) docs.push_back(ex.document);
  }
  return BagOfTokensEncoder::with_idf(v, docs);
}

inline json encoder_to_json(const BagOfTokensEncoder& e) { return {{"dims", e.dims()}, {"idf", e.idf()}}; }

inline BagOfTokensEncoder encoder_from_json(const json& j) {
  return BagOfTokensEncoder(j.at("dims").get<std::size_t>(), j.at("idf").get<std::vector<double>>());
}

/// Mean ROUGE of beam-search summaries over the test pairs.
inline RougeTriple evaluate_target(const BackboneWeights& backbone,
                                   const std::function<PrefixTensors(std::size_t)>& prefixes_for,
                                   std::span<const Example> test, const DecodeConfig& decode) {
  std::vector<ScoredPair> pairs;
  pairs.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const TokenizedDoc doc = truncated(test[i].document, backbone.config().max_src_len);
    pairs.push_back({generate(backbone, doc, prefixes_for(i), decode), test[i].summary});
  }
  return corpus_rouge(pairs);
}

// ---------------------------------------------------------------------------
// DAPA family

namespace detail {

inline bool needs_sample_similarity(Method m) {
  return m == Method::Dapa || m == Method::DapaAlt || m == Method::DapaEmbed;
}

inline void write_run_state(const ExperimentConfig& cfg, const RunContext& ctx) {
  write_file_atomic(ctx.run_dir / "run.json",
                    json{{"config", to_json(cfg)}, {"cache_dir", fs::absolute(ctx.cache_dir).string()}}.dump(2) + "\n");
}

inline void write_result(const RunResult& r, const RunContext& ctx) {
  write_file_atomic(ctx.run_dir / "result.json", result_json_text(r));
  write_file_atomic(ctx.run_dir / "result.txt", report({r}, ReportFormat::Text));
  write_file_atomic(ctx.run_dir / "timing.json", json{{"wall_time_s", r.wall_time_s}}.dump(2) + "\n");
}

inline std::vector<std::string> domain_ids(std::span<const SyntheticDomainSpec> specs) {
  std::vector<std::string> out;
  for (const auto& s : specs) out.push_back(s.domain_id);
  return out;
}

/// Weights, merge and evaluation given the trained source prefixes and the
/// similarity matrix the method needs (sample rows, or one row per test
/// document for dapa-inst).
inline RunResult finish_dapa(const ExperimentConfig& cfg, std::span<const PrefixGenerator> gens,
                             const std::optional<SimilarityMatrix>& sim, const BackboneWeights& backbone,
                             const GuardedCorpus& target, const RunContext& ctx) {
  RunResult r;
  r.sources = domain_ids(cfg.sources);
  const std::size_t c = cfg.prefix_length;
  if (cfg.method == Method::DapaInst) {
    const TargetSample test_docs = target.test_documents();
    if (!sim || sim->m != test_docs.size()) throw InvariantError("dapa-inst: similarity rows differ from test documents");
    std::vector<PrefixTensors> per_doc;
    std::vector<double> mean_w(gens.size(), 0.0);
    for (std::size_t i = 0; i < sim->m; ++i) {
      const SimilarityMatrix row = SimilarityMatrix::from_rows({std::vector<double>(sim->entries.begin() + static_cast<std::ptrdiff_t>(i * sim->n),
                                                             sim->entries.begin() + static_cast<std::ptrdiff_t>((i + 1) * sim->n))});
      DomainWeights w = dapa_weights(row);
      w.rule = WeightRule::Inst;
      for (std::size_t j = 0; j < w.size(); ++j) mean_w[j] += w.w[j] / static_cast<double>(sim->m);
      const TokenizedDoc doc = truncated(test_docs.docs[i], backbone.config().max_src_len);
      per_doc.push_back(merge_prefixes(gens, w, target_embedding(std::span<const TokenizedDoc>(&doc, 1), c, backbone)));
    }
    r.weights = DomainWeights{mean_w, WeightRule::Inst};
    write_file_atomic(ctx.run_dir / "weights.json", weights_to_json(*r.weights, r.sources, sim->m).dump(2) + "\n");
    r.rouge = evaluate_target(backbone, [&](std::size_t i) { return per_doc[i]; }, target.final_evaluation(), cfg.decode);
    return r;
  }

  const TargetSample sample = target.unlabeled_sample(cfg.m);
  Tensor e_target = target_embedding(sample.docs, c, backbone);
  PrefixTensors merged;
  switch (cfg.method) {
    case Method::Dapa:
      r.weights = dapa_weights(*sim);
      break;
    case Method::DapaAlt:
      r.weights = dapa_alt_weights(*sim);
      break;
    case Method::DapaEmbed:
      r.weights = dapa_weights(*sim);
      e_target = merge_embed(gens, *r.weights);
      break;
    case Method::DapaAverage:
      r.weights = uniform_weights(gens.size());
      break;
    case Method::DapaMax: {
      MaxMerge mm = merge_prefixes_max(gens, e_target);
      merged = std::move(mm.prefixes);
      r.contribution = std::move(mm.contribution);
      break;
    }
    default:
      throw UsageError("finish_dapa: not a DAPA-family method");
  }
  if (r.weights) {
    merged = merge_prefixes(gens, *r.weights, e_target);
    write_file_atomic(ctx.run_dir / "weights.json", weights_to_json(*r.weights, r.sources, cfg.m).dump(2) + "\n");
  }
  save_prefix_tensors(merged, ctx.run_dir / "merged.pts");
  r.rouge = evaluate_target(backbone, [&](std::size_t) { return merged; }, target.final_evaluation(), cfg.decode);
  return r;
}

inline std::optional<SimilarityMatrix> compute_similarity(const ExperimentConfig& cfg,
                                                          std::span<const PrefixGenerator> gens,
                                                          const BackboneWeights& backbone, const GuardedCorpus& target,
                                                          const SentenceEncoder& enc) {
  if (cfg.method == Method::DapaInst) return build_similarity_matrix(target.test_documents(), gens, backbone, cfg.decode, enc);
  if (needs_sample_similarity(cfg.method)) {
    return build_similarity_matrix(target.unlabeled_sample(cfg.m), gens, backbone, cfg.decode, enc);
  }
  return std::nullopt;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Experiments

inline RunResult run_experiment(const ExperimentConfig& cfg, const RunContext& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  const std::string label = to_string(cfg.method) + " on '" + cfg.target.domain_id + "' (seed " + std::to_string(cfg.seed) + ")";
  RunResult r;
  try {
    fs::create_directories(ctx.run_dir);
    detail::write_run_state(cfg, ctx);
    const BackboneWeights backbone = obtain_backbone(cfg, ctx);
    const GuardedCorpus target(generate_domain(cfg.target, cfg.seed), ctx.access);

    if (is_dapa_family(cfg.method)) {
      std::vector<PrefixGenerator> gens;
      for (const auto& s : cfg.sources) gens.push_back(obtain_source_prefix(cfg, s, backbone, ctx));
      const BagOfTokensEncoder enc = make_encoder(cfg);
      write_file_atomic(ctx.run_dir / "encoder.json", encoder_to_json(enc).dump() + "\n");
      detail::say(ctx, "scoring source prefixes on the target sample");
      const auto sim = detail::compute_similarity(cfg, gens, backbone, target, enc);
      if (sim) {
        write_file_atomic(ctx.run_dir / "similarity.json",
                          similarity_to_json(*sim, detail::domain_ids(cfg.sources)).dump(2) + "\n");
      }
      r = detail::finish_dapa(cfg, gens, sim, backbone, target, ctx);
    } else if (cfg.method == Method::ErmPrefix || cfg.method == Method::ErmFinetune) {
      const TrainMode mode = cfg.method == Method::ErmPrefix ? TrainMode::ErmPrefix : TrainMode::ErmFinetune;
      json sources = json::array();
      for (const auto& s : cfg.sources) sources.push_back(to_json(s));
      const std::string key = detail::training_key(cfg, {{"mode", to_string(mode)}, {"sources", sources}});
      const fs::path path = ctx.cache_dir / (mode == TrainMode::ErmPrefix ? "prefixes" : "models") /
                            (to_string(mode) + "-" + key + (mode == TrainMode::ErmPrefix ? ".pfx" : ".bkb"));
      if (!fs::exists(path)) {
        detail::say(ctx, "training " + to_string(mode));
        std::vector<DomainCorpus> corpora;
        for (const auto& s : cfg.sources) corpora.push_back(generate_domain(s, cfg.seed));
        TrainOutcome out = train_erm(corpora, backbone, detail::make_train_config(cfg, mode, mix_seed(cfg.seed, 0x65726dULL)));
        detail::save_report(out.report, fs::path(path).replace_extension(""));
        if (out.prefix) save_prefix(*out.prefix, path);
        else save_backbone(*out.backbone, path);
      }
      r.sources = detail::domain_ids(cfg.sources);
      if (mode == TrainMode::ErmPrefix) {
        const PrefixTensors p = materialize(load_prefix(path, backbone.config()));
        r.rouge = evaluate_target(backbone, [&](std::size_t) { return p; }, target.final_evaluation(), cfg.decode);
      } else {
        const BackboneWeights model = load_backbone(path);
        r.rouge = evaluate_target(model, [](std::size_t) { return PrefixTensors{}; }, target.final_evaluation(), cfg.decode);
      }
    } else {
      const TrainMode mode = cfg.method == Method::FinetuneTarget ? TrainMode::FinetuneTarget
                             : cfg.method == Method::PrefixTarget ? TrainMode::PrefixTarget
                             : cfg.method == Method::FullFinetune ? TrainMode::FullFinetune
                                                                  : TrainMode::FullPrefix;
      const bool uses_m = mode == TrainMode::FinetuneTarget || mode == TrainMode::PrefixTarget;
      const std::string key = detail::training_key(
          cfg, {{"mode", to_string(mode)}, {"target", to_json(cfg.target)}, {"m", uses_m ? cfg.m : 0}});
      const bool prefix = is_prefix_mode(mode);
      const fs::path path = ctx.cache_dir / (prefix ? "prefixes" : "models") /
                            (cfg.target.domain_id + "-" + to_string(mode) + "-" + key + (prefix ? ".pfx" : ".bkb"));
      if (!fs::exists(path)) {
        detail::say(ctx, "training " + to_string(mode) + " on labeled target pairs");
        TrainOutcome out = train_target(target.labeled_for_training(), cfg.m, backbone,
                                        detail::make_train_config(cfg, mode, mix_seed(cfg.seed, domain_tag(cfg.target.domain_id))));
        detail::save_report(out.report, fs::path(path).replace_extension(""));
        if (out.prefix) save_prefix(*out.prefix, path);
        else save_backbone(*out.backbone, path);
      }
      if (prefix) {
        const PrefixTensors p = materialize(load_prefix(path, backbone.config()));
        r.rouge = evaluate_target(backbone, [&](std::size_t) { return p; }, target.final_evaluation(), cfg.decode);
      } else {
        const BackboneWeights model = load_backbone(path);
        r.rouge = evaluate_target(model, [](std::size_t) { return PrefixTensors{}; }, target.final_evaluation(), cfg.decode);
      }
    }
  } catch (...) {
    rethrow_with_context("run " + label);
  }
  r.method = to_string(cfg.method);
  r.target = cfg.target.domain_id;
  r.seed = cfg.seed;
  r.prefix_length = cfg.prefix_length;
  r.m = cfg.m;
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  detail::write_result(r, ctx);
  return r;
}

enum class SweepAxis { C, M };

inline SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "C" || s == "c") return SweepAxis::C;
  if (s == "m") return SweepAxis::M;
  throw ConfigError("sweep axis must be C or m, got '" + s + "'");
}

/// Reruns the experiment for every value on one axis. All points share the
/// cache, so an m-sweep reuses the trained source prefixes.
inline std::vector<RunResult> sweep(const ExperimentConfig& cfg, SweepAxis axis, std::span<const std::size_t> values,
                                    const fs::path& out_dir, std::ostream* progress = nullptr,
                                    AccessLog* access = nullptr) {
  if (values.empty()) throw ConfigError("sweep: no values");
  std::vector<RunResult> results;
  for (std::size_t v : values) {
    ExperimentConfig point = cfg;
    (axis == SweepAxis::C ? point.prefix_length : point.m) = v;
    RunContext ctx{out_dir / ((axis == SweepAxis::C ? "C-" : "m-") + std::to_string(v)), out_dir / "cache", access,
                   progress};
    results.push_back(run_experiment(point, ctx));
  }
  return results;
}

/// One configuration per ordered (source, target) pair: single-source
/// prefix applied to each other domain.
inline std::vector<ExperimentConfig> single_source_grid(const ExperimentConfig& base,
                                                        std::span<const SyntheticDomainSpec> domains) {
  std::vector<ExperimentConfig> out;
  for (std::size_t t = 0; t < domains.size(); ++t)
    for (std::size_t s = 0; s < domains.size(); ++s) {
      if (s == t) continue;
      ExperimentConfig c = base;
      c.method = Method::Dapa;
      c.sources = {domains[s]};
      c.target = domains[t];
      out.push_back(std::move(c));
    }
  return out;
}

struct AddDomainResult {
  RunResult result;
  std::vector<std::string> trained;  // domains whose prefix was trained by this call
};

inline std::pair<ExperimentConfig, fs::path> load_run_state(const fs::path& run_dir) {
  const fs::path state = run_dir / "run.json";
  if (!fs::exists(state)) throw DataError(run_dir.string() + ": no run.json; not a run directory");
  json j;
  try {
    j = json::parse(read_file(state));
  } catch (const json::parse_error& e) {
    throw FormatError(state.string() + ": " + e.what());
  }
  return {experiment_config_from_json(j.at("config")), fs::path(j.at("cache_dir").get<std::string>())};
}

/// Adds one source to an existing DAPA-family run: trains only the new
/// prefix, appends its similarity column, recomputes the weights and
/// re-merges. Prior checkpoints are read, never rewritten.
inline AddDomainResult add_source_domain(const fs::path& run_dir, const SyntheticDomainSpec& spec,
                                         std::ostream* progress = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  auto [cfg, cache] = load_run_state(run_dir);
  spec.validate();
  if (!is_dapa_family(cfg.method)) throw ConfigError("add-domain: method " + to_string(cfg.method) + " does not use source prefixes");
  if (spec.domain_id == cfg.target.domain_id) throw ConfigError("add-domain: '" + spec.domain_id + "' is the target domain");
  for (const auto& s : cfg.sources)
    if (s.domain_id == spec.domain_id) throw ConfigError("add-domain: domain id '" + spec.domain_id + "' already exists");

  const RunContext ctx{run_dir, cache, nullptr, progress};
  AddDomainResult out;
  const ExperimentConfig before = cfg;
  cfg.sources.push_back(spec);
  cfg.validate();
  try {
    const BackboneWeights backbone = obtain_backbone(cfg, ctx);
    std::vector<PrefixGenerator> gens;
    for (const auto& s : before.sources) {
      const fs::path p = source_prefix_path(before, s, cache);
      if (!fs::exists(p)) throw DataError("add-domain: missing prefix checkpoint " + p.string());
      gens.push_back(load_prefix(p, backbone.config()));
    }
    bool trained = false;
    gens.push_back(obtain_source_prefix(cfg, spec, backbone, ctx, &trained));
    if (trained) out.trained.push_back(spec.domain_id);

    const GuardedCorpus target(generate_domain(cfg.target, cfg.seed), nullptr);
    std::optional<SimilarityMatrix> sim;
    if (cfg.method == Method::DapaInst || detail::needs_sample_similarity(cfg.method)) {
      const BagOfTokensEncoder enc = encoder_from_json(json::parse(read_file(run_dir / "encoder.json")));
      sim = similarity_from_json(json::parse(read_file(run_dir / "similarity.json")));
      if (sim->n != before.sources.size()) throw DataError("add-domain: stored similarity matrix has the wrong width");
      const TargetSample rows =
          cfg.method == Method::DapaInst ? target.test_documents() : target.unlabeled_sample(cfg.m);
      sim->append_column(similarity_column(rows, gens.back(), backbone, cfg.decode, enc, &sim->empty_generations));
      write_file_atomic(run_dir / "similarity.json",
                        similarity_to_json(*sim, detail::domain_ids(cfg.sources)).dump(2) + "\n");
    }
    out.result = detail::finish_dapa(cfg, gens, sim, backbone, target, ctx);
  } catch (...) {
    rethrow_with_context("add-domain '" + spec.domain_id + "'");
  }
  detail::write_run_state(cfg, ctx);
  RunResult& r = out.result;
  r.method = to_string(cfg.method);
  r.target = cfg.target.domain_id;
  r.seed = cfg.seed;
  r.prefix_length = cfg.prefix_length;
  r.m = cfg.m;
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  detail::write_result(r, ctx);
  return out;
}

}  // namespace dapa::harness
