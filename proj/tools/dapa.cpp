// Command-line front end for the synthetic-domain experiments.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "dapa/harness/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dapa;
using namespace dapa::harness;

namespace {

struct Common {
  std::string config;
  std::string cache = "cache";
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool need_cache = true) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON, schema 1)")->required();
  if (need_cache) cmd->add_option("--cache", c.cache, "artifact cache directory")->capture_default_str();
  cmd->add_flag("-q,--quiet", c.quiet, "suppress progress messages");
}

RunContext context(const Common& c, const fs::path& run_dir) {
  return RunContext{run_dir, c.cache, nullptr, c.quiet ? nullptr : &std::cerr};
}

const SyntheticDomainSpec& find_domain(const ExperimentConfig& cfg, const std::string& id) {
  for (const auto& s : cfg.sources)
    if (s.domain_id == id) return s;
  if (cfg.target.domain_id == id) return cfg.target;
  throw ConfigError("no domain named '" + id + "' in the config");
}

std::vector<PrefixGenerator> source_prefixes(const ExperimentConfig& cfg, const BackboneWeights& backbone,
                                             const RunContext& ctx) {
  std::vector<PrefixGenerator> gens;
  for (const auto& s : cfg.sources) gens.push_back(obtain_source_prefix(cfg, s, backbone, ctx));
  return gens;
}

std::vector<std::string> source_ids(const ExperimentConfig& cfg) {
  std::vector<std::string> ids;
  for (const auto& s : cfg.sources) ids.push_back(s.domain_id);
  return ids;
}

std::string rouge_json(const RougeTriple& r) {
  return json{{"rouge1", to_json(r.rouge1)}, {"rouge2", to_json(r.rouge2)}, {"rougeL", to_json(r.rougeL)}}.dump(2);
}

std::vector<std::size_t> parse_values(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("--values: '" + item + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ConfigError("--values: empty list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-aware prefix averaging on synthetic summarization domains"};
  app.require_subcommand(1);

  // gen-data
  Common gen_c;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "write the vocabulary and every domain split as JSONL");
  add_common(gen, gen_c, false);
  gen->add_option("-o,--out", gen_out, "output directory")->required();

  // train-prefix
  Common tp_c;
  std::string tp_domain;
  auto* tp = app.add_subcommand("train-prefix", "train (or load cached) source prefixes");
  add_common(tp, tp_c);
  tp->add_option("-d,--domain", tp_domain, "single source domain id (default: all sources)");

  // train-erm
  Common erm_c;
  std::string erm_mode = "erm-prefix";
  auto* erm = app.add_subcommand("train-erm", "train the pooled-source baseline");
  add_common(erm, erm_c);
  erm->add_option("--mode", erm_mode, "erm-prefix or erm-finetune")->capture_default_str();

  // weights
  Common w_c;
  std::string w_rule = "dapa", w_out = ".";
  auto* wcmd = app.add_subcommand("weights", "score sources on the unlabeled target sample and compute weights");
  add_common(wcmd, w_c);
  wcmd->add_option("--rule", w_rule, "dapa, alt or uniform")->capture_default_str();
  wcmd->add_option("-o,--out", w_out, "directory for similarity.json and weights.json")->capture_default_str();

  // merge
  Common mg_c;
  std::string mg_weights, mg_out = "merged.pts", mg_mode = "weighted";
  auto* mg = app.add_subcommand("merge", "merge source prefixes for the target");
  add_common(mg, mg_c);
  mg->add_option("-w,--weights", mg_weights, "weights.json (required for weighted/embed)");
  mg->add_option("--mode", mg_mode, "weighted, embed or max")->capture_default_str();
  mg->add_option("-o,--out", mg_out, "merged prefix tensors")->capture_default_str();

  // eval
  Common ev_c;
  std::string ev_prefix, ev_tensors, ev_model;
  auto* ev = app.add_subcommand("eval", "score a prefix or model on the target test split");
  add_common(ev, ev_c);
  ev->add_option("--prefix", ev_prefix, "prefix checkpoint (.pfx)");
  ev->add_option("--tensors", ev_tensors, "merged prefix tensors (.pts)");
  ev->add_option("--model", ev_model, "backbone checkpoint (.bkb); defaults to the cached pretrained one");

  // run
  Common run_c;
  std::string run_out;
  std::string run_cache;
  auto* run = app.add_subcommand("run", "run one experiment end to end");
  run->add_option("-c,--config", run_c.config, "experiment config (JSON, schema 1)")->required();
  run->add_option("-o,--out", run_out, "run directory")->required();
  run->add_option("--cache", run_cache, "artifact cache directory (default: <out>/cache)");
  run->add_flag("-q,--quiet", run_c.quiet, "suppress progress messages");

  // sweep
  Common sw_c;
  std::string sw_axis, sw_values, sw_out;
  auto* sw = app.add_subcommand("sweep", "rerun one experiment over C or m");
  sw->add_option("-c,--config", sw_c.config, "experiment config (JSON, schema 1)")->required();
  sw->add_option("--axis", sw_axis, "C or m")->required();
  sw->add_option("--values", sw_values, "comma-separated values")->required();
  sw->add_option("-o,--out", sw_out, "sweep directory")->required();
  sw->add_flag("-q,--quiet", sw_c.quiet, "suppress progress messages");

  // add-domain
  std::string ad_run, ad_spec;
  bool ad_quiet = false;
  auto* ad = app.add_subcommand("add-domain", "add a source domain to an existing run");
  ad->add_option("-r,--run", ad_run, "existing run directory")->required();
  ad->add_option("-s,--spec", ad_spec, "domain spec (JSON)")->required();
  ad->add_flag("-q,--quiet", ad_quiet, "suppress progress messages");

  // grad-check
  GradCheckSpec gc;
  double gc_eps = 3e-4;
  double gc_tol = 1e-5;
  auto* gcc = app.add_subcommand("grad-check", "finite-difference check of the prefix-tuning loss");
  gcc->add_option("--seed", gc.seed)->capture_default_str();
  gcc->add_option("--eps", gc_eps)->capture_default_str();
  gcc->add_option("--tolerance", gc_tol)->capture_default_str();
  gcc->add_flag("--backbone", gc.include_backbone, "also check backbone parameters");

  // report
  std::vector<std::string> rp_files;
  std::string rp_format = "text";
  auto* rp = app.add_subcommand("report", "render result.json files as a table");
  rp->add_option("files", rp_files, "result JSON files or run directories")->required();
  rp->add_option("--format", rp_format, "text or json")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      const ExperimentConfig cfg = load_experiment_config(gen_c.config);
      fs::create_directories(gen_out);
      Lexicon::vocabulary().save((fs::path(gen_out) / "vocab.txt").string());
      std::vector<SyntheticDomainSpec> all = cfg.sources;
      all.push_back(cfg.target);
      for (const auto& spec : all) {
        const DomainCorpus c = generate_domain(spec, cfg.seed);
        const fs::path dir = fs::path(gen_out) / spec.domain_id;
        fs::create_directories(dir);
        write_file_atomic(dir / "train.jsonl", corpus_split_jsonl(c.train));
        write_file_atomic(dir / "dev.jsonl", corpus_split_jsonl(c.dev));
        write_file_atomic(dir / "test.jsonl", corpus_split_jsonl(c.test));
        write_file_atomic(dir / "spec.json", to_json(spec).dump(2) + "\n");
      }
      std::cout << "wrote " << all.size() << " domains to " << gen_out << "\n";
    } else if (*tp) {
      const ExperimentConfig cfg = load_experiment_config(tp_c.config);
      if (!tp_domain.empty() && find_domain(cfg, tp_domain).domain_id == cfg.target.domain_id) {
        throw ConfigError("train-prefix: '" + tp_domain + "' is the target");
      }
      const RunContext ctx = context(tp_c, ".");
      const BackboneWeights backbone = obtain_backbone(cfg, ctx);
      for (const auto& s : cfg.sources) {
        if (!tp_domain.empty() && s.domain_id != tp_domain) continue;
        obtain_source_prefix(cfg, s, backbone, ctx);
        std::cout << s.domain_id << " " << source_prefix_path(cfg, s, ctx.cache_dir).string() << "\n";
      }
    } else if (*erm) {
      ExperimentConfig cfg = load_experiment_config(erm_c.config);
      cfg.method = method_from_string(erm_mode);
      if (cfg.method != Method::ErmPrefix && cfg.method != Method::ErmFinetune) {
        throw ConfigError("train-erm: --mode must be erm-prefix or erm-finetune");
      }
      const fs::path run_dir = fs::path(erm_c.cache) / "runs" / erm_mode;
      const RunResult r = run_experiment(cfg, context(erm_c, run_dir));
      std::cout << report({r}, ReportFormat::Text);
    } else if (*wcmd) {
      const ExperimentConfig cfg = load_experiment_config(w_c.config);
      const RunContext ctx = context(w_c, w_out);
      const WeightRule rule = weight_rule_from_string(w_rule);
      if (rule == WeightRule::Inst) throw ConfigError("weights: per-document weights are produced by `run` with dapa-inst");
      const BackboneWeights backbone = obtain_backbone(cfg, ctx);
      const auto gens = source_prefixes(cfg, backbone, ctx);
      fs::create_directories(w_out);
      DomainWeights w;
      if (rule == WeightRule::Uniform) {
        w = uniform_weights(gens.size());
      } else {
        const GuardedCorpus target(generate_domain(cfg.target, cfg.seed), nullptr);
        const BagOfTokensEncoder enc = make_encoder(cfg);
        const SimilarityMatrix sim =
            build_similarity_matrix(target.unlabeled_sample(cfg.m), gens, backbone, cfg.decode, enc);
        write_file_atomic(fs::path(w_out) / "similarity.json", similarity_to_json(sim, source_ids(cfg)).dump(2) + "\n");
        w = rule == WeightRule::Dapa ? dapa_weights(sim) : dapa_alt_weights(sim);
      }
      const std::string text = weights_to_json(w, source_ids(cfg), cfg.m).dump(2) + "\n";
      write_file_atomic(fs::path(w_out) / "weights.json", text);
      std::cout << text;
    } else if (*mg) {
      const ExperimentConfig cfg = load_experiment_config(mg_c.config);
      const RunContext ctx = context(mg_c, ".");
      const BackboneWeights backbone = obtain_backbone(cfg, ctx);
      const auto gens = source_prefixes(cfg, backbone, ctx);
      const GuardedCorpus target(generate_domain(cfg.target, cfg.seed), nullptr);
      const Tensor e_target = target_embedding(target.unlabeled_sample(cfg.m).docs, cfg.prefix_length, backbone);
      PrefixTensors merged;
      if (mg_mode == "max") {
        MaxMerge mm = merge_prefixes_max(gens, e_target);
        merged = std::move(mm.prefixes);
        std::cout << json{{"contribution", mm.contribution}}.dump() << "\n";
      } else if (mg_mode == "weighted" || mg_mode == "embed") {
        if (mg_weights.empty()) throw ConfigError("merge: --weights is required for mode " + mg_mode);
        if (!fs::exists(mg_weights)) throw DataError("merge: " + mg_weights + " does not exist");
        const DomainWeights w = weights_from_json(json::parse(read_file(mg_weights)));
        merged = merge_prefixes(gens, w, mg_mode == "embed" ? merge_embed(gens, w) : e_target);
      } else {
        throw ConfigError("merge: --mode must be weighted, embed or max");
      }
      save_prefix_tensors(merged, mg_out);
      std::cout << "wrote " << mg_out << "\n";
    } else if (*ev) {
      const ExperimentConfig cfg = load_experiment_config(ev_c.config);
      const RunContext ctx = context(ev_c, ".");
      if (!ev_prefix.empty() && !ev_tensors.empty()) throw ConfigError("eval: pass at most one of --prefix and --tensors");
      const BackboneWeights backbone = ev_model.empty() ? obtain_backbone(cfg, ctx) : load_backbone(ev_model);
      PrefixTensors p;
      if (!ev_prefix.empty()) p = materialize(load_prefix(ev_prefix, backbone.config()));
      if (!ev_tensors.empty()) p = load_prefix_tensors(ev_tensors);
      const GuardedCorpus target(generate_domain(cfg.target, cfg.seed), nullptr);
      const RougeTriple r =
          evaluate_target(backbone, [&](std::size_t) { return p; }, target.final_evaluation(), cfg.decode);
      std::cout << rouge_json(r) << "\n";
    } else if (*run) {
      const ExperimentConfig cfg = load_experiment_config(run_c.config);
      const fs::path cache = run_cache.empty() ? fs::path(run_out) / "cache" : fs::path(run_cache);
      const RunResult r = run_experiment(cfg, RunContext{run_out, cache, nullptr, run_c.quiet ? nullptr : &std::cerr});
      std::cout << report({r}, ReportFormat::Text);
    } else if (*sw) {
      const ExperimentConfig cfg = load_experiment_config(sw_c.config);
      const auto values = parse_values(sw_values);
      const auto results = sweep(cfg, sweep_axis_from_string(sw_axis), values, sw_out, sw_c.quiet ? nullptr : &std::cerr);
      write_file_atomic(fs::path(sw_out) / "results.json", report(results, ReportFormat::Json));
      std::cout << report(results, ReportFormat::Text);
    } else if (*ad) {
      if (!fs::exists(ad_spec)) throw ConfigError("add-domain: spec file " + ad_spec + " does not exist");
      json j;
      try {
        j = json::parse(read_file(ad_spec));
      } catch (const json::parse_error& e) {
        throw ConfigError(ad_spec + ": " + e.what());
      }
      const AddDomainResult r = add_source_domain(ad_run, domain_spec_from_json(j), ad_quiet ? nullptr : &std::cerr);
      std::cout << "trained:";
      for (const auto& t : r.trained) std::cout << " " << t;
      std::cout << "\n" << report({r.result}, ReportFormat::Text);
    } else if (*gcc) {
      const double err = prefix_tuning_grad_check(gc, gc_eps);
      std::cout << "max relative error " << err << (err <= gc_tol ? " ok" : " exceeds tolerance") << "\n";
      return err <= gc_tol ? 0 : 4;
    } else if (*rp) {
      std::vector<RunResult> results;
      for (const auto& f : rp_files) {
        fs::path p(f);
        if (fs::is_directory(p)) p /= "result.json";
        if (!fs::exists(p)) throw DataError("report: " + p.string() + " does not exist");
        json j;
        try {
          j = json::parse(read_file(p));
        } catch (const json::parse_error& e) {
          throw FormatError(p.string() + ": " + e.what());
        }
        for (auto& r : results_from_json(j)) results.push_back(std::move(r));
      }
      if (rp_format != "text" && rp_format != "json") throw ConfigError("report: --format must be text or json");
      std::cout << report(results, rp_format == "json" ? ReportFormat::Json : ReportFormat::Text);
    }
  } catch (const json::exception& e) {
    std::cerr << "error: malformed JSON input: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
