#include "cllm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cllm/errors.hpp"
#include "cllm/rng.hpp"

namespace cllm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* name_of(ConsistencyKind k) { return k == ConsistencyKind::Global ? "global" : "local"; }
const char* name_of(Reduction r) { return r == Reduction::Mean ? "mean" : "sum"; }
const char* name_of(InitMode m) { return m == InitMode::PromptTokens ? "prompt" : "vocabulary"; }
const char* name_of(Divergence d) {
  switch (d) {
    case Divergence::ForwardKL: return "forward_kl";
    case Divergence::ReverseKL: return "reverse_kl";
    case Divergence::JensenShannon: return "jensen_shannon";
  }
  return "?";
}
const char* name_of(OptimizerConfig::Kind k) { return k == OptimizerConfig::Kind::Adam ? "adam" : "sgd"; }
const char* name_of(OptimizerConfig::Schedule s) {
  return s == OptimizerConfig::Schedule::Cosine ? "cosine" : "constant";
}

template <typename E>
E parse_enum(const std::string& value, std::initializer_list<E> options, const char* what) {
  for (E e : options)
    if (value == name_of(e)) return e;
  std::string valid;
  for (E e : options) valid += std::string(valid.empty() ? "" : ", ") + name_of(e);
  throw ConfigError(std::string("invalid ") + what + " '" + value + "' (expected one of " + valid + ")");
}

json optimizer_json(const OptimizerConfig& o) {
  return {{"kind", name_of(o.kind)}, {"learning_rate", o.learning_rate}, {"beta1", o.beta1},
          {"beta2", o.beta2},        {"epsilon", o.epsilon},             {"clip_norm", o.clip_norm},
          {"schedule", name_of(o.schedule)}, {"warmup_steps", o.warmup_steps},
          {"min_rate_fraction", o.min_rate_fraction}};
}

OptimizerConfig optimizer_from(const json& j) {
  OptimizerConfig o;
  o.kind = parse_enum(j.at("kind").get<std::string>(), {OptimizerConfig::Kind::Adam, OptimizerConfig::Kind::GradientDescent},
                      "optimizer");
  o.learning_rate = j.at("learning_rate").get<double>();
  o.beta1 = j.at("beta1").get<double>();
  o.beta2 = j.at("beta2").get<double>();
  o.epsilon = j.at("epsilon").get<double>();
  o.clip_norm = j.at("clip_norm").get<double>();
  o.schedule = parse_enum(j.at("schedule").get<std::string>(),
                          {OptimizerConfig::Schedule::Constant, OptimizerConfig::Schedule::Cosine}, "schedule");
  o.warmup_steps = j.at("warmup_steps").get<std::size_t>();
  o.min_rate_fraction = j.at("min_rate_fraction").get<double>();
  return o;
}

// Every key of `given` must exist in `known`; the grammar is free-form.
void check_keys(const json& given, const json& known, const std::string& where) {
  if (!given.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!known.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (key == "grammar" || key == "paths") continue;
    if (value.is_object()) check_keys(value, known.at(key), path);
  }
}

void log_line(const LogFn& log, const std::string& s) {
  if (log) log(s);
}

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw ConfigError(std::string(what) + " not found: " + path + " (run the earlier stage first)");
}

}  // namespace

// ---- RunConfig ----------------------------------------------------------------

void RunConfig::resolve() {
  const fs::path dir(work_dir);
  auto fill = [&](std::string& p, const char* name) {
    if (p.empty()) p = (dir / name).string();
  };
  fill(paths.corpus, "corpus.jsonl");
  fill(paths.base_checkpoint, "base.ckpt");
  fill(paths.dataset, "trajectories.jsonl");
  fill(paths.cllm_checkpoint, "cllm.ckpt");
  fill(paths.reports, "reports");
  grammar.seed = derive_seed(seed, "corpus");
  grammar.vocab_size = model.vocab_size;
  grammar.max_seq_len = model.max_seq_len;
  model.seed = derive_seed(seed, "model_init");
  base.seed = derive_seed(seed, "base_train");
  distill.seed = derive_seed(seed, "distill");
}

void RunConfig::validate() const {
  model.validate();
  grammar.validate();
  base.validate();
  distill.validate();
  filter.validate();
  AugmentationPolicy{p_fix, 0}.validate();
  if (n == 0) throw ConfigError("n must be positive");
  if (n > max_new) throw ConfigError("n (" + std::to_string(n) + ") must not exceed N (" + std::to_string(max_new) + ")");
  if (collect_prompts == 0 || eval_prompts == 0 || eval_heldout == 0) throw ConfigError("sample counts must be positive");
  if (workers < 1) throw ConfigError("workers must be at least 1");
  split_sizes(grammar, corpus_count);
  // The longest prompt plus a full generation must fit the context.
  std::size_t longest_prompt = 0;
  for (const auto& t : grammar.templates) {
    GrammarSpec one = grammar;
    one.templates = {Template{t.name, t.prompt, ";"}};
    longest_prompt = std::max(longest_prompt, one.longest_expansion() - 2);
  }
  if (longest_prompt + max_new > model.max_seq_len) {
    throw ConfigError("prompts of up to " + std::to_string(longest_prompt) + " tokens plus N = " +
                      std::to_string(max_new) + " exceed max_seq_len " + std::to_string(model.max_seq_len));
  }
  for (std::size_t v : ablate_n) {
    if (v == 0) throw ConfigError("ablate.n values must be positive");
  }
  for (double f : ablate_fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("ablate.fractions must lie in (0, 1]");
  }
}

json RunConfig::to_json() const {
  return {
      {"seed", seed},
      {"work_dir", work_dir},
      {"workers", workers},
      {"paths",
       {{"corpus", paths.corpus},
        {"base_checkpoint", paths.base_checkpoint},
        {"dataset", paths.dataset},
        {"cllm_checkpoint", paths.cllm_checkpoint},
        {"reports", paths.reports}}},
      {"model",
       {{"vocab_size", model.vocab_size},
        {"d_model", model.d_model},
        {"n_layers", model.n_layers},
        {"n_heads", model.n_heads},
        {"max_seq_len", model.max_seq_len}}},
      {"corpus", {{"count", corpus_count}, {"grammar", grammar.to_json()}}},
      {"base_training",
       {{"steps", base.steps},
        {"batch_size", base.batch_size},
        {"ppl_gate", base.ppl_gate},
        {"exact_match_gate", base.exact_match_gate},
        {"optimizer", optimizer_json(base.optimizer)}}},
      {"decode", {{"n", n}, {"N", max_new}, {"init", name_of(init)}}},
      {"collect", {{"prompts", collect_prompts}, {"augment", augment}, {"p_fix", p_fix}}},
      {"filter", {{"max_run", filter.max_run}, {"ngram", filter.ngram}, {"ngram_threshold", filter.ngram_threshold}}},
      {"distill",
       {{"consistency", name_of(distill.consistency)},
        {"divergence", name_of(distill.divergence)},
        {"ar_weight", distill.ar_weight},
        {"reduction", name_of(distill.reduction)},
        {"batch_size", distill.batch_size},
        {"steps", distill.steps},
        {"plateau_window", distill.plateau_window},
        {"plateau_tolerance", distill.plateau_tolerance},
        {"optimizer", optimizer_json(distill.optimizer)}}},
      {"eval", {{"prompts", eval_prompts}, {"heldout", eval_heldout}}},
      {"ablate", {{"n", ablate_n}, {"fractions", ablate_fractions}}},
      {"derived_seeds",
       {{"corpus", grammar.seed},
        {"model_init", model.seed},
        {"base_train", base.seed},
        {"collect", derive_seed(seed, "collect")},
        {"augment", derive_seed(seed, "augment")},
        {"distill", distill.seed},
        {"eval", derive_seed(seed, "eval")}}},
  };
}

RunConfig RunConfig::from_json(const json& given) {
  const json defaults_json = RunConfig{}.to_json();
  check_keys(given, defaults_json, "");
  json j = defaults_json;
  j.merge_patch(given);
  RunConfig c;
  try {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.work_dir = j.at("work_dir").get<std::string>();
    c.workers = j.at("workers").get<int>();
    const json& p = j.at("paths");
    c.paths = {p.value("corpus", ""), p.value("base_checkpoint", ""), p.value("dataset", ""),
               p.value("cllm_checkpoint", ""), p.value("reports", "")};
    const json& m = j.at("model");
    c.model.vocab_size = m.at("vocab_size").get<std::size_t>();
    c.model.d_model = m.at("d_model").get<std::size_t>();
    c.model.n_layers = m.at("n_layers").get<std::size_t>();
    c.model.n_heads = m.at("n_heads").get<std::size_t>();
    c.model.max_seq_len = m.at("max_seq_len").get<std::size_t>();
    c.corpus_count = j.at("corpus").at("count").get<std::size_t>();
    c.grammar = GrammarSpec::from_json(j.at("corpus").at("grammar"));
    const json& b = j.at("base_training");
    c.base.steps = b.at("steps").get<std::size_t>();
    c.base.batch_size = b.at("batch_size").get<std::size_t>();
    c.base.ppl_gate = b.at("ppl_gate").get<double>();
    c.base.exact_match_gate = b.at("exact_match_gate").get<double>();
    c.base.optimizer = optimizer_from(b.at("optimizer"));
    const json& d = j.at("decode");
    c.n = d.at("n").get<std::size_t>();
    c.max_new = d.at("N").get<std::size_t>();
    c.init = parse_enum(d.at("init").get<std::string>(), {InitMode::PromptTokens, InitMode::Vocabulary}, "decode.init");
    const json& col = j.at("collect");
    c.collect_prompts = col.at("prompts").get<std::size_t>();
    c.augment = col.at("augment").get<bool>();
    c.p_fix = col.at("p_fix").get<double>();
    const json& f = j.at("filter");
    c.filter.max_run = f.at("max_run").get<std::size_t>();
    c.filter.ngram = f.at("ngram").get<std::size_t>();
    c.filter.ngram_threshold = f.at("ngram_threshold").get<std::size_t>();
    const json& t = j.at("distill");
    c.distill.consistency = parse_enum(t.at("consistency").get<std::string>(),
                                       {ConsistencyKind::Global, ConsistencyKind::Local}, "distill.consistency");
    c.distill.divergence =
        parse_enum(t.at("divergence").get<std::string>(),
                   {Divergence::ForwardKL, Divergence::ReverseKL, Divergence::JensenShannon}, "distill.divergence");
    c.distill.ar_weight = t.at("ar_weight").get<double>();
    c.distill.reduction =
        parse_enum(t.at("reduction").get<std::string>(), {Reduction::Mean, Reduction::Sum}, "distill.reduction");
    c.distill.batch_size = t.at("batch_size").get<std::size_t>();
    c.distill.steps = t.at("steps").get<std::size_t>();
    c.distill.plateau_window = t.at("plateau_window").get<std::size_t>();
    c.distill.plateau_tolerance = t.at("plateau_tolerance").get<double>();
    c.distill.optimizer = optimizer_from(t.at("optimizer"));
    c.eval_prompts = j.at("eval").at("prompts").get<std::size_t>();
    c.eval_heldout = j.at("eval").at("heldout").get<std::size_t>();
    c.ablate_n = j.at("ablate").at("n").get<std::vector<std::size_t>>();
    c.ablate_fractions = j.at("ablate").at("fractions").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  return c;
}

std::string RunConfig::report_path(const std::string& name) const { return (fs::path(paths.reports) / name).string(); }

DecodeOptions RunConfig::decode_options(std::uint64_t stream_seed) const {
  DecodeOptions o;
  o.n = n;
  o.max_new = max_new;
  o.eos = kEosToken;
  o.seed = stream_seed;
  o.init = init;
  o.workers = workers;
  return o;
}

json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

RunConfig load_run_config(const json& file, const json& overrides) {
  json merged = file.is_null() ? json::object() : file;
  if (!merged.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(overrides, RunConfig{}.to_json(), "");
  merged.merge_patch(overrides);
  // Derived seeds are outputs, so a config echoed from an artifact can be fed back in.
  merged.erase("derived_seeds");
  RunConfig c = RunConfig::from_json(merged);
  c.resolve();
  c.validate();
  return c;
}

// ---- reports ------------------------------------------------------------------

void write_report(const std::string& path, const std::string& kind, const json& config,
                  const std::vector<json>& entries) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write report: " + path);
  out << json{{"kind", kind}, {"config", config}}.dump() << '\n';
  for (const auto& e : entries) out << e.dump() << '\n';
  if (!out) throw Error("failed writing report: " + path);
}

json strip_timing(const json& j) {
  if (j.is_object()) {
    json out = json::object();
    for (const auto& [k, v] : j.items()) {
      if (k.rfind("wall_", 0) == 0) continue;
      out[k] = strip_timing(v);
    }
    return out;
  }
  if (j.is_array()) {
    json out = json::array();
    for (const auto& v : j) out.push_back(strip_timing(v));
    return out;
  }
  return j;
}

namespace {

// Checkpoints are binary; their resolved config goes to a sidecar file.
void write_checkpoint(const RunConfig& cfg, const Model& model, const std::string& path, const json& extra) {
  fs::create_directories(fs::path(path).parent_path());
  save_checkpoint(model, path);
  std::ofstream side(path + ".json", std::ios::trunc);
  side << json{{"checkpoint", fs::path(path).filename().string()},
               {"model_config_hash", model.config().hash()},
               {"config", cfg.to_json()},
               {"info", extra}}
              .dump(2)
       << '\n';
}

LoadedCorpus read_corpus(const RunConfig& cfg) {
  require_file(cfg.paths.corpus, "corpus");
  return load_corpus(cfg.paths.corpus);
}

Model read_model(const RunConfig& cfg, const std::string& path, const char* what) {
  require_file(path, what);
  return load_checkpoint(path, &cfg.model);
}

std::vector<TokenSequence> train_prompts(const LoadedCorpus& lc, std::size_t count) {
  if (count > lc.corpus.train.size()) {
    throw ConfigError("collect.prompts (" + std::to_string(count) + ") exceeds the training split (" +
                      std::to_string(lc.corpus.train.size()) + ")");
  }
  const Tokenizer tok(lc.grammar.alphabet);
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(encode_prompt(tok, lc.corpus.train[i]));
  return out;
}

}  // namespace

std::vector<TokenSequence> eval_prompt_set(const RunConfig& cfg, const LoadedCorpus& lc) {
  if (cfg.eval_prompts > lc.corpus.prompts.size()) {
    throw ConfigError("eval.prompts exceeds the prompt split (" + std::to_string(lc.corpus.prompts.size()) + ")");
  }
  const Tokenizer tok(lc.grammar.alphabet);
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < cfg.eval_prompts; ++i) out.push_back(encode_prompt(tok, lc.corpus.prompts[i]));
  return out;
}

std::vector<HeldoutSample> heldout_set(const RunConfig& cfg, const LoadedCorpus& lc) {
  if (cfg.eval_heldout > lc.corpus.heldout.size()) {
    throw ConfigError("eval.heldout exceeds the heldout split (" + std::to_string(lc.corpus.heldout.size()) + ")");
  }
  const Tokenizer tok(lc.grammar.alphabet);
  std::vector<HeldoutSample> out;
  for (std::size_t i = 0; i < cfg.eval_heldout; ++i) {
    out.push_back({encode_prompt(tok, lc.corpus.heldout[i]), encode_continuation(tok, lc.corpus.heldout[i])});
  }
  return out;
}

// ---- stages -------------------------------------------------------------------

void stage_gen_corpus(const RunConfig& cfg, const LogFn& log) {
  const Corpus corpus = generate_corpus(cfg.grammar, cfg.corpus_count);
  fs::create_directories(fs::path(cfg.paths.corpus).parent_path());
  save_corpus(corpus, cfg.grammar, cfg.to_json(), cfg.paths.corpus);
  log_line(log, "corpus: " + std::to_string(corpus.train.size()) + " train / " + std::to_string(corpus.heldout.size()) +
                    " heldout / " + std::to_string(corpus.prompts.size()) + " prompts -> " + cfg.paths.corpus);
}

BaseTrainSummary stage_train_base(const RunConfig& cfg, const LogFn& log) {
  const LoadedCorpus lc = read_corpus(cfg);
  const Tokenizer tok(lc.grammar.alphabet);
  std::vector<json> steps;
  const std::size_t every = std::max<std::size_t>(1, cfg.base.steps / 20);
  BaseTrainResult r = train_base_model(lc.corpus, tok, cfg.model, cfg.base, [&](const BaseTrainStep& s) {
    steps.push_back(s.to_json());
    if (s.step % every == 0) log_line(log, "base step " + std::to_string(s.step) + " loss " + std::to_string(s.loss));
  });

  const std::vector<HeldoutSample> heldout = heldout_set(cfg, lc);
  const QualityReport q = quality_eval(r.model, heldout, cfg.decode_options(derive_seed(cfg.seed, "eval")));
  std::size_t exact = 0;
  for (const auto& h : heldout) exact += ar_decode(r.model, h.prompt, cfg.max_new, kEosToken) == h.continuation ? 1 : 0;
  BaseTrainSummary summary{q.perplexity, static_cast<double>(exact) / static_cast<double>(heldout.size())};
  log_line(log, "base heldout ppl " + std::to_string(summary.heldout_ppl) + ", template exact match " +
                    std::to_string(summary.template_exact_match));
  if (cfg.base.ppl_gate > 0.0 && !(summary.heldout_ppl <= cfg.base.ppl_gate)) {
    throw TrainingError("base model heldout perplexity " + std::to_string(summary.heldout_ppl) + " misses the gate " +
                        std::to_string(cfg.base.ppl_gate));
  }
  if (summary.template_exact_match < cfg.base.exact_match_gate) {
    throw TrainingError("base model exact match " + std::to_string(summary.template_exact_match) +
                        " misses the gate " + std::to_string(cfg.base.exact_match_gate));
  }
  const json info = {{"heldout_ppl", summary.heldout_ppl}, {"template_exact_match", summary.template_exact_match}};
  write_checkpoint(cfg, r.model, cfg.paths.base_checkpoint, info);
  write_report(cfg.report_path("base_metrics.jsonl"), "base_training", cfg.to_json(), steps);
  write_report(cfg.report_path("base_summary.jsonl"), "base_summary", cfg.to_json(), {info});
  return summary;
}

void stage_collect(const RunConfig& cfg, const LogFn& log) {
  const LoadedCorpus lc = read_corpus(cfg);
  const Model base = read_model(cfg, cfg.paths.base_checkpoint, "base checkpoint");
  const std::vector<TokenSequence> prompts = train_prompts(lc, cfg.collect_prompts);

  CollectOptions opt;
  opt.n = cfg.n;
  opt.max_new = cfg.max_new;
  opt.seed = derive_seed(cfg.seed, "collect");
  opt.init = cfg.init;
  opt.workers = cfg.workers;
  if (cfg.augment) opt.augmentation = AugmentationPolicy{cfg.p_fix, derive_seed(cfg.seed, "augment")};
  CollectReport cr;
  TrajectoryDataset raw = collect(base, prompts, opt, &cr);
  for (const auto& w : cr.warnings) log_line(log, "warning: " + w);

  FilterReport fr;
  TrajectoryDataset ds = post_process(raw, cfg.filter, &fr);
  ds.config = cfg.to_json();
  fs::create_directories(fs::path(cfg.paths.dataset).parent_path());
  serialize(ds, cfg.paths.dataset);
  json summary = fr.to_json();
  summary["collected"] = cr.records;
  summary["skipped"] = cr.skipped;
  write_report(cfg.report_path("collect_report.jsonl"), "collect", cfg.to_json(), {summary});
  log_line(log, "collected " + std::to_string(cr.records) + " records, kept " + std::to_string(fr.kept) + ", dropped " +
                    std::to_string(fr.dropped) + " -> " + cfg.paths.dataset);
}

void stage_distill(const RunConfig& cfg, const LogFn& log) {
  require_file(cfg.paths.dataset, "trajectory dataset");
  const TrajectoryDataset ds = deserialize(cfg.paths.dataset);
  const Model base = read_model(cfg, cfg.paths.base_checkpoint, "base checkpoint");
  if (ds.model_config_hash != base.config().hash()) {
    throw ConfigError("dataset was collected with a different model configuration");
  }
  std::vector<json> steps;
  const std::size_t every = std::max<std::size_t>(1, cfg.distill.steps / 20);
  TrainResult r = train(ds, base, cfg.distill, [&](const TrainStep& s) {
    steps.push_back(s.to_json());
    if (s.step % every == 0) {
      log_line(log, "distill step " + std::to_string(s.step) + " consistency " + std::to_string(s.consistency) +
                        " ar " + std::to_string(s.ar));
    }
  });
  write_checkpoint(cfg, r.model, cfg.paths.cllm_checkpoint,
                   {{"steps_run", r.steps_run}, {"early_stopped", r.early_stopped}});
  write_report(cfg.report_path("distill_metrics.jsonl"), "distill", cfg.to_json(), steps);
  log_line(log, "distilled for " + std::to_string(r.steps_run) + " steps" + (r.early_stopped ? " (plateau)" : "") +
                    " -> " + cfg.paths.cllm_checkpoint);
}

json stage_evaluate(const RunConfig& cfg, const LogFn& log) {
  const LoadedCorpus lc = read_corpus(cfg);
  const Model base = read_model(cfg, cfg.paths.base_checkpoint, "base checkpoint");
  const Model cllm = read_model(cfg, cfg.paths.cllm_checkpoint, "distilled checkpoint");
  const std::vector<HeldoutSample> heldout = heldout_set(cfg, lc);
  const DecodeOptions opt = cfg.decode_options(derive_seed(cfg.seed, "eval"));
  const QualityReport qb = quality_eval(base, heldout, opt);
  const QualityReport qc = quality_eval(cllm, heldout, opt);
  const json result = {{"base", qb.to_json()},
                       {"cllm", qc.to_json()},
                       {"ppl_relative_change", (qc.perplexity - qb.perplexity) / qb.perplexity}};
  write_report(cfg.report_path("evaluate.jsonl"), "evaluate", cfg.to_json(), {result});
  log_line(log, "heldout ppl base " + std::to_string(qb.perplexity) + " -> cllm " + std::to_string(qc.perplexity) +
                    ", exact match " + std::to_string(qb.exact_match) + " / " + std::to_string(qc.exact_match));
  return result;
}

json stage_profile(const RunConfig& cfg, const LogFn& log) {
  const LoadedCorpus lc = read_corpus(cfg);
  const Model base = read_model(cfg, cfg.paths.base_checkpoint, "base checkpoint");
  const Model cllm = read_model(cfg, cfg.paths.cllm_checkpoint, "distilled checkpoint");
  const std::vector<TokenSequence> prompts = eval_prompt_set(cfg, lc);
  const SpeedupReport r = speedup(base, cllm, prompts, cfg.decode_options(derive_seed(cfg.seed, "eval")));
  json result = r.to_json();
  result["pass_reduction"] = 1.0 - r.b.avg_iterations / r.a.avg_iterations;
  write_report(cfg.report_path("profile.jsonl"), "profile", cfg.to_json(), {result});
  log_line(log, "passes per window " + std::to_string(r.a.avg_iterations) + " -> " + std::to_string(r.b.avg_iterations) +
                    ", fast-forward " + std::to_string(r.a.avg_fast_forward) + " -> " +
                    std::to_string(r.b.avg_fast_forward) + ", stationary " + std::to_string(r.a.avg_stationary) +
                    " -> " + std::to_string(r.b.avg_stationary));
  return result;
}

void stage_visualize(const RunConfig& cfg, const std::string& which, std::size_t prompt_index, std::size_t window,
                     ExportFormat format, const std::string& out_path, const LogFn& log) {
  const LoadedCorpus lc = read_corpus(cfg);
  if (which != "base" && which != "cllm") throw ConfigError("model must be 'base' or 'cllm'");
  const Model model = which == "base" ? read_model(cfg, cfg.paths.base_checkpoint, "base checkpoint")
                                      : read_model(cfg, cfg.paths.cllm_checkpoint, "distilled checkpoint");
  const std::vector<TokenSequence> prompts = eval_prompt_set(cfg, lc);
  if (prompt_index >= prompts.size()) throw ConfigError("prompt index out of range");
  const LongGeneration gen = generate_long(model, prompts[prompt_index], cfg.n, cfg.max_new, kEosToken,
                                           derive_seed(derive_seed(cfg.seed, "eval"), "profile", prompt_index), cfg.init);
  if (window >= gen.windows.size()) {
    throw ConfigError("window index out of range (" + std::to_string(gen.windows.size()) + " windows)");
  }
  const Tokenizer tok(lc.grammar.alphabet);
  const JacobiTrajectory& t = gen.windows[window];
  fs::create_directories(fs::path(out_path).parent_path());
  export_trajectory(t, t.fixed_point, out_path, format, [&](Token id) { return tok.render(id); });
  log_line(log, "wrote " + std::to_string(t.states.size()) + " states -> " + out_path);
}

json stage_ablate(const RunConfig& cfg, const LogFn& log) {
  std::vector<json> rows;
  const LoadedCorpus lc = read_corpus(cfg);
  const Model base = read_model(cfg, cfg.paths.base_checkpoint, "base checkpoint");
  const std::vector<TokenSequence> eval_prompts = eval_prompt_set(cfg, lc);
  for (std::size_t n : cfg.ablate_n) {
    if (n > cfg.max_new) throw ConfigError("ablate.n value " + std::to_string(n) + " exceeds N");
  }
  for (std::size_t n : cfg.ablate_n) {
    for (double fraction : cfg.ablate_fractions) {
      RunConfig c = cfg;
      c.n = n;
      const auto count = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(cfg.collect_prompts))));
      CollectOptions opt;
      opt.n = n;
      opt.max_new = cfg.max_new;
      opt.seed = derive_seed(cfg.seed, "collect");
      opt.init = cfg.init;
      opt.workers = cfg.workers;
      if (cfg.augment) opt.augmentation = AugmentationPolicy{cfg.p_fix, derive_seed(cfg.seed, "augment")};
      const TrajectoryDataset ds = post_process(collect(base, train_prompts(lc, count), opt), cfg.filter);
      if (ds.records.empty()) throw TrainingError("ablation cell left no records after filtering");
      const TrainResult tr = train(ds, base, cfg.distill);
      const SpeedupReport sr = speedup(base, tr.model, eval_prompts, c.decode_options(derive_seed(cfg.seed, "eval")));
      json row = {{"n", n},
                  {"fraction", fraction},
                  {"records", ds.records.size()},
                  {"steps_run", tr.steps_run},
                  {"base_avg_iterations", sr.a.avg_iterations},
                  {"cllm_avg_iterations", sr.b.avg_iterations},
                  {"base_avg_fast_forward", sr.a.avg_fast_forward},
                  {"cllm_avg_fast_forward", sr.b.avg_fast_forward},
                  {"base_avg_stationary", sr.a.avg_stationary},
                  {"cllm_avg_stationary", sr.b.avg_stationary},
                  {"iteration_ratio_gain", sr.iteration_ratio_gain},
                  {"wall_speedup", sr.wall_speedup_b}};
      log_line(log, "ablate n=" + std::to_string(n) + " fraction=" + std::to_string(fraction) + ": passes/window " +
                        std::to_string(sr.a.avg_iterations) + " -> " + std::to_string(sr.b.avg_iterations));
      rows.push_back(std::move(row));
    }
  }
  write_report(cfg.report_path("ablate.jsonl"), "ablate", cfg.to_json(), rows);
  return rows;
}

void run_pipeline(const RunConfig& cfg, const LogFn& log) {
  stage_gen_corpus(cfg, log);
  stage_train_base(cfg, log);
  stage_collect(cfg, log);
  stage_distill(cfg, log);
  stage_evaluate(cfg, log);
  stage_profile(cfg, log);
}

}  // namespace cllm
