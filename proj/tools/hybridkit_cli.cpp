// Copyright 2026 The hybridkit Authors
// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hybridkit/bench.hpp"
#include "hybridkit/checkpoint.hpp"
#include "hybridkit/config.hpp"
#include "hybridkit/eval.hpp"
#include "hybridkit/halo.hpp"

namespace fs = std::filesystem;
using namespace hybridkit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string precision = "standard";
  std::size_t threads = 1;
  bool dry_run = false;
};

struct Args {
  std::string config, out, report, teacher, student, ckpt, stage1_dir, scores, task = "niah", mode = "decode",
      stage = "all";
  std::vector<std::size_t> lengths;
  std::optional<std::size_t> k, samples, stage2_context;
  std::size_t reps = 5, tokens = 8;
  bool no_scaling = false, fit_scale = false;
  std::optional<double> constant_scaling, scale_base;
};

RunConfig resolve_config(const Args& a, const Globals& g) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.config.empty()) rc.corpus.vocab = rc.model.vocab;
  if (g.seed) {
    rc.train.seed = *g.seed;
    rc.halo.seed = *g.seed;
    rc.halo.stage1.seed = *g.seed + 1;
    rc.halo.stage2.seed = *g.seed + 2;
    rc.halo.stage3.seed = *g.seed + 3;
  }
  rc.halo.rc = rc.rc_spec(g.threads);
  rc.halo.threads = g.threads;
  return rc;
}

std::uint64_t init_seed(const RunConfig& rc) { return rc.train.seed * 0x9e3779b97f4a7c15ull + 1; }

void write_report(const std::string& path, const std::vector<const StageReport*>& reps) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  for (const auto* r : reps) r->write_jsonl(os);
}

void print_warnings(const StageReport& r) {
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
}

std::size_t meta_size(const Json& meta, const char* key, std::size_t fallback) {
  return meta.contains(key) && meta.at(key).is_number_unsigned() ? meta.at(key).get<std::size_t>() : fallback;
}

NiahSpec niah_base(const RunConfig& rc, const Args& a) {
  NiahSpec s;
  s.n_samples = a.samples.value_or(rc.eval.niah_samples);
  s.seed = rc.eval.niah_seed;
  s.key_len = rc.corpus.key_len;
  s.value_len = rc.corpus.value_len;
  s.separator = rc.corpus.separator;
  s.vocab = rc.model.vocab;
  s.grammar_seed = rc.corpus.grammar_seed;
  return s;
}

/// Held-out documents of n tokens from the training corpus (cached when
/// HYBRIDKIT_CACHE is set).
std::vector<std::vector<int>> corpus_docs(const Corpus& corpus, std::size_t count, std::size_t n, std::uint64_t seed) {
  const auto& cs = corpus.spec();
  std::ostringstream key;
  key << "docs_v" << cs.vocab << "_g" << cs.grammar_seed << "_f" << cs.niah_fraction << "_n" << cs.needles << "_k"
      << cs.key_len << "_v" << cs.value_len << (cs.separator ? "" : "_nosep") << "_s" << seed << "_c" << count << "_l" << n;
  return cached_sequences(key.str(), [&] {
    Rng rng(seed ^ 0xd0c5d0c5ull);
    std::vector<std::vector<int>> docs;
    for (std::size_t i = 0; i < count; ++i) docs.push_back(corpus.sequence(n, rng));
    return docs;
  });
}

void print_layer_table(std::ostream& os, const std::vector<LayerScore>& scores, const std::vector<std::size_t>& chosen) {
  std::vector<double> s;
  for (const auto& x : scores) s.push_back(x.s);
  os << "layer\tR\tC\ts\n";
  for (std::size_t i : importance_order(s)) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.9g\n", scores[i].layer, scores[i].R, scores[i].C, scores[i].s);
    os << buf;
  }
  os << "I_attn\t";
  for (std::size_t i = 0; i < chosen.size(); ++i) os << (i ? "," : "") << chosen[i];
  os << "\n";
}

std::vector<std::size_t> read_selection(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("missing " + p.string() + "; run the selection stage first");
  std::stringstream ss;
  ss << in.rdbuf();
  const Json j = parse_json_text(ss.str(), p.string());
  return j.at("attn_layers").get<std::vector<std::size_t>>();
}

// ----------------------------------------------------------------- commands

template <class T>
int cmd_train(const Args& a, const Globals& g) {
  const RunConfig rc = resolve_config(a, g);
  if (g.dry_run) {
    Json j = run_config_to_json(rc);
    j["parameter_count"] = parameter_count_formula(rc.model);
    j["steps"] = rc.train.total_steps();
    j["precision"] = g.precision;
    std::cout << j.dump(2) << "\n";
    return kExitOk;
  }
  if (a.out.empty()) throw ConfigError("train: --out is required");
  Rng rng(init_seed(rc));
  Model<T> m = Model<T>::random(rc.model, rng);
  const Corpus corpus(rc.corpus);
  StageReport rep;
  const std::string rpath = a.report.empty() ? a.out + ".report.jsonl" : a.report;
  try {
    train_lm(m, corpus, rc.train, "train", &rep);
  } catch (const DivergenceError&) {
    write_report(rpath, {&rep});
    throw;
  }
  const Json meta{{"stage", "train"}, {"seed", rc.train.seed}, {"train_context", rc.train.context_len},
                  {"steps", rc.train.total_steps()}};
  save_checkpoint(a.out, m, meta);
  write_report(rpath, {&rep});
  std::cerr << "trained " << rep.steps.size() << " steps, final loss " << rep.summary["final_loss"] << "\n";
  return kExitOk;
}

template <class T>
int cmd_halo(const Args& a, const Globals& g) {
  const RunConfig rc = resolve_config(a, g);
  const HaloConfig& hc = rc.halo;
  const std::string& st = a.stage;
  if (st != "all" && st != "1" && st != "select" && st != "2" && st != "3")
    throw ConfigError("halo: --stage must be one of all, 1, select, 2, 3");
  if (a.teacher.empty()) throw ConfigError("halo: --teacher is required");
  if (a.out.empty()) throw ConfigError("halo: --out is required");
  const auto tck = load_checkpoint<T>(a.teacher);
  const Model<T>& teacher = tck.model;
  if (!teacher.config().is_transformer()) throw ConfigError("halo: the teacher checkpoint is not attention-only");
  const std::size_t L = teacher.config().n_layers;
  const std::size_t k = a.k.value_or(hc.k ? hc.k : default_attention_count(L));
  if (g.dry_run) {
    Json j = run_config_to_json(rc);
    j["teacher_parameters"] = teacher.parameter_count();
    j["k"] = k;
    std::cout << j.dump(2) << "\n";
    return kExitOk;
  }
  fs::create_directories(a.out);
  const fs::path dir(a.out);
  CorpusSpec cs = rc.corpus;
  cs.vocab = teacher.config().vocab;
  const Corpus corpus(cs);
  const bool all = st == "all";

  if (all || st == "1") {
    Rng rng(hc.seed + 101);
    Model<T> cand = init_hybrid_from_teacher(teacher, {}, rng, hc.rnn_kind);
    std::vector<std::size_t> layers(L);
    for (std::size_t l = 0; l < L; ++l) layers[l] = l;
    const auto res = stage1_align(teacher, cand, layers, corpus, hc.stage1, hc.threads);
    std::vector<const StageReport*> reps;
    for (const auto& r : res.reports) reps.push_back(&r);
    write_report((dir / "stage1.report.jsonl").string(), reps);
    save_checkpoint((dir / "stage1.ckpt").string(), cand, Json{{"stage", "stage1"}});
    for (std::size_t i = 0; i < L; ++i)
      std::cerr << "stage1 layer " << i << ": mse " << res.initial_mse[i] << " -> " << res.final_mse[i] << "\n";
  }
  if (all || st == "select") {
    const auto cand = load_checkpoint<T>((dir / "stage1.ckpt").string());
    std::vector<LayerScore> scores = score_layers(teacher, cand.model, hc.rc);
    std::vector<double> s;
    for (const auto& x : scores) s.push_back(x.s);
    const auto chosen = select_attention_layers(s, static_cast<long long>(k));
    std::ofstream tsv(dir / "layer_scores.tsv");
    print_layer_table(tsv, scores, chosen);
    print_layer_table(std::cout, scores, chosen);
    Json sel{{"attn_layers", chosen}, {"k", k}, {"scores", Json::array()}};
    for (const auto& x : scores) sel["scores"].push_back(Json{{"layer", x.layer}, {"R", x.R}, {"C", x.C}, {"s", x.s}});
    std::ofstream(dir / "selection.json") << sel.dump(2) << "\n";
  }
  if (all || st == "2") {
    const auto cand = load_checkpoint<T>((dir / "stage1.ckpt").string());
    const auto chosen = read_selection(dir / "selection.json");
    Rng rng(hc.seed + 202);
    Model<T> h = prepare_stage2(assemble_hybrid(teacher, cand.model, chosen), rng);
    StageReport rep;
    try {
      stage2_distill(teacher, h, corpus, hc.stage2, &rep);
    } catch (const DivergenceError&) {
      write_report((dir / "stage2.report.jsonl").string(), {&rep});
      throw;
    }
    write_report((dir / "stage2.report.jsonl").string(), {&rep});
    save_checkpoint((dir / "stage2.ckpt").string(), h,
                    Json{{"stage", "stage2"}, {"train_context", hc.stage2.context_len}, {"attn_layers", chosen}});
    std::cerr << "stage2 kl " << rep.summary["initial_kl"] << " -> " << rep.summary["final_kl"] << "\n";
  }
  if (all || st == "3") {
    auto ck = load_checkpoint<T>((dir / "stage2.ckpt").string());
    StageReport rep;
    try {
      stage3_finetune(ck.model, corpus, hc.stage3, meta_size(ck.meta, "train_context", hc.stage2.context_len), &rep);
    } catch (const DivergenceError&) {
      write_report((dir / "stage3.report.jsonl").string(), {&rep});
      throw;
    }
    print_warnings(rep);
    write_report((dir / "stage3.report.jsonl").string(), {&rep});
    save_checkpoint((dir / "final.ckpt").string(), ck.model,
                    Json{{"stage", "stage3"}, {"train_context", hc.stage3.context_len},
                         {"attn_layers", ck.model.config().attn_layers}});
  }
  return kExitOk;
}

std::vector<std::pair<double, double>> read_injected_scores(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scores file " + path);
  std::vector<std::pair<double, double>> rc;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t layer;
    double r, c;
    if (!(ls >> layer >> r >> c)) {
      if (lineno == 1) continue;  // header
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'layer R C'");
    }
    if (layer != rc.size()) throw ConfigError(path + ":" + std::to_string(lineno) + ": layers must be listed in order");
    rc.emplace_back(r, c);
  }
  return rc;
}

template <class T>
int cmd_select(const Args& a, const Globals& g) {
  const RunConfig rc = resolve_config(a, g);
  std::vector<LayerScore> scores;
  if (!a.scores.empty()) {
    scores = make_layer_scores(read_injected_scores(a.scores));
  } else {
    if (a.teacher.empty() || a.stage1_dir.empty())
      throw ConfigError("select-layers: give --teacher and --stage1, or --scores");
    const auto teacher = load_checkpoint<T>(a.teacher);
    const fs::path p = fs::path(a.stage1_dir) / "stage1.ckpt";
    if (!fs::exists(p)) throw Error("stage-1 weights not found: " + p.string());
    const auto cand = load_checkpoint<T>(p.string());
    if (cand.model.config().n_layers != teacher.model.config().n_layers)
      throw Error("candidate weights missing for layer " + std::to_string(cand.model.config().n_layers));
    if (g.dry_run) return kExitOk;
    scores = score_layers(teacher.model, cand.model, rc.halo.rc);
  }
  const std::size_t k = a.k.value_or(rc.halo.k ? rc.halo.k : default_attention_count(scores.size()));
  std::vector<double> s;
  for (const auto& x : scores) s.push_back(x.s);
  print_layer_table(std::cout, scores, select_attention_layers(s, static_cast<long long>(k)));
  return kExitOk;
}

template <class T>
int cmd_distill(const Args& a, const Globals& g) {
  const RunConfig rc = resolve_config(a, g);
  if (a.teacher.empty() || a.student.empty() || a.out.empty())
    throw ConfigError("distill: --teacher, --student and --out are required");
  const auto teacher = load_checkpoint<T>(a.teacher);
  auto student = load_checkpoint<T>(a.student);
  if (g.dry_run) return kExitOk;
  CorpusSpec cs = rc.corpus;
  cs.vocab = teacher.model.config().vocab;
  StageReport rep;
  const std::string rpath = a.report.empty() ? a.out + ".report.jsonl" : a.report;
  try {
    stage2_distill(teacher.model, student.model, Corpus(cs), rc.halo.stage2, &rep);
  } catch (const DivergenceError&) {
    write_report(rpath, {&rep});
    throw;
  }
  write_report(rpath, {&rep});
  save_checkpoint(a.out, student.model, Json{{"stage", "stage2"}, {"train_context", rc.halo.stage2.context_len}});
  return kExitOk;
}

template <class T>
int cmd_finetune(const Args& a, const Globals& g) {
  const RunConfig rc = resolve_config(a, g);
  if (a.ckpt.empty() || a.out.empty()) throw ConfigError("finetune: --ckpt and --out are required");
  auto ck = load_checkpoint<T>(a.ckpt);
  if (g.dry_run) return kExitOk;
  CorpusSpec cs = rc.corpus;
  cs.vocab = ck.model.config().vocab;
  StageReport rep;
  const std::string rpath = a.report.empty() ? a.out + ".report.jsonl" : a.report;
  const std::size_t prev = a.stage2_context.value_or(meta_size(ck.meta, "train_context", rc.halo.stage2.context_len));
  try {
    stage3_finetune(ck.model, Corpus(cs), rc.halo.stage3, prev, &rep);
  } catch (const DivergenceError&) {
    write_report(rpath, {&rep});
    throw;
  }
  print_warnings(rep);
  write_report(rpath, {&rep});
  save_checkpoint(a.out, ck.model, Json{{"stage", "stage3"}, {"train_context", rc.halo.stage3.context_len}});
  return kExitOk;
}

template <class T>
int cmd_eval(const Args& a, const Globals& g) {
  RunConfig rc = resolve_config(a, g);
  if (a.task != "niah" && a.task != "ppl" && a.task != "csr")
    throw CLI::ValidationError("--task", "unknown task '" + a.task + "' (expected niah, ppl or csr)");
  if (a.ckpt.empty()) throw ConfigError("eval: --ckpt is required");
  const int modes = int(a.no_scaling) + int(a.fit_scale) + int(a.constant_scaling.has_value()) +
                    int(a.scale_base.has_value());
  if (modes > 1) throw ConfigError("eval: choose at most one of --no-scaling, --constant-scaling, --scale-base, --fit-scale");
  const auto ck = load_checkpoint<T>(a.ckpt);
  const Model<T>& m = ck.model;
  rc.model = m.config();
  rc.corpus.vocab = m.config().vocab;
  const std::size_t train_ctx = meta_size(ck.meta, "train_context", rc.train.context_len);
  std::vector<std::size_t> lengths = a.lengths;
  if (lengths.empty() && a.task == "ppl") lengths = {rc.eval.ppl_length ? rc.eval.ppl_length : train_ctx};
  if (lengths.empty()) lengths = rc.eval.lengths;
  if (g.dry_run) return kExitOk;
  LogitsScaling scaling = m.config().scaling;
  if (a.no_scaling) scaling = LogitsScaling::none();
  if (a.constant_scaling) scaling = LogitsScaling::constant(*a.constant_scaling);
  if (a.scale_base) scaling = LogitsScaling::log_base(*a.scale_base);
  const Corpus corpus(rc.corpus);
  if (a.fit_scale) {
    const auto docs = corpus_docs(corpus, rc.eval.fit_docs, rc.eval.fit_length_factor * train_ctx, rc.eval.niah_seed + 1);
    const ScaleBase b = fit_model_scale_base(m, docs, train_ctx, rc.eval.scale_candidates, g.threads);
    scaling = LogitsScaling::log_base(b.a);
    std::cerr << "fitted scale base a = " << b.a << "\n";
  }
  const ModelScorer<T> scorer(m, scaling);
  std::vector<EvalResult> rows;
  if (a.task == "niah") {
    rows = length_sweep(scorer, lengths, niah_base(rc, a), g.threads);
  } else if (a.task == "csr") {
    CsrSpec cs;
    cs.n_samples = a.samples.value_or(rc.eval.csr_samples);
    cs.seed = rc.eval.csr_seed;
    cs.grammar_seed = rc.corpus.grammar_seed;
    rows.push_back(score_csr(scorer, cs, g.threads));
  } else {
    if (!std::is_sorted(lengths.begin(), lengths.end())) throw ConfigError("eval: lengths must be ascending");
    for (std::size_t L : lengths) {
      const auto docs = corpus_docs(corpus, a.samples.value_or(rc.eval.ppl_docs), L, rc.eval.niah_seed + 2);
      EvalResult r;
      r.task = "ppl";
      r.context_len = L;
      r.n_samples = docs.size();
      r.seed = rc.eval.niah_seed + 2;
      r.value = perplexity(scorer, docs, 0, g.threads);
      rows.push_back(r);
    }
  }
  if (a.out.empty()) {
    write_tsv(std::cout, rows);
  } else {
    std::ofstream os(a.out);
    if (!os) throw Error("cannot write " + a.out);
    write_tsv(os, rows);
  }
  return kExitOk;
}

template <class T>
int cmd_bench(const Args& a, const Globals& g) {
  if (a.mode != "prefill" && a.mode != "decode")
    throw CLI::ValidationError("--mode", "expected prefill or decode, got '" + a.mode + "'");
  if (a.ckpt.empty()) throw ConfigError("bench: --ckpt is required");
  const auto ck = load_checkpoint<T>(a.ckpt);
  const std::vector<std::size_t> lengths = a.lengths.empty() ? std::vector<std::size_t>{1024, 4096} : a.lengths;
  if (g.dry_run) return kExitOk;
  BenchOptions o;
  o.reps = a.reps;
  o.decode_tokens = a.tokens;
  o.seed = g.seed.value_or(0);
  std::vector<BenchRow> rows;
  for (std::size_t L : lengths)
    rows.push_back(a.mode == "decode" ? bench_decode(ck.model, L, o) : bench_prefill(ck.model, L, o));
  if (a.out.empty()) {
    write_bench_tsv(std::cout, rows);
  } else {
    std::ofstream os(a.out);
    write_bench_tsv(os, rows);
  }
  return kExitOk;
}

int cmd_inspect(const Args& a) {
  if (a.ckpt.empty()) throw ConfigError("inspect: --ckpt is required");
  const CheckpointHeader h = read_checkpoint_header(a.ckpt);
  const ModelConfig& c = h.config;
  std::size_t total = 0;
  for (const auto& t : h.tensors) total += shape_numel(t.shape);
  std::cout << "config " << model_config_to_json(c).dump() << "\n";
  std::cout << "pattern " << c.pattern() << "\n";
  std::cout << "I_attn ";
  for (std::size_t i = 0; i < c.attn_layers.size(); ++i) std::cout << (i ? "," : "") << c.attn_layers[i];
  std::cout << "\n";
  std::cout << "meta " << h.meta.dump() << "\n";
  std::cout << "tensors " << h.tensors.size() << "\n";
  for (const auto& t : h.tensors)
    std::cout << "  " << t.name << " " << t.dtype << " " << shape_str(t.shape) << " @" << t.offset << " +" << t.length
              << "\n";
  std::cout << "parameters " << total << "\n";
  std::cout << "parameters_formula " << parameter_count_formula(c) << "\n";
  return kExitOk;
}

template <class T>
int dispatch(const std::string& cmd, const Args& a, const Globals& g) {
  if (cmd == "train") return cmd_train<T>(a, g);
  if (cmd == "halo") return cmd_halo<T>(a, g);
  if (cmd == "select-layers") return cmd_select<T>(a, g);
  if (cmd == "distill") return cmd_distill<T>(a, g);
  if (cmd == "finetune") return cmd_finetune<T>(a, g);
  if (cmd == "eval") return cmd_eval<T>(a, g);
  if (cmd == "bench") return cmd_bench<T>(a, g);
  return cmd_inspect(a);
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"hybridkit: hybrid attention/RNN language model laboratory"};
  app.require_subcommand(1);
  Globals g;
  Args a;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "seed for every random source")->capture_default_str();
  app.add_option("--precision", g.precision, "arithmetic precision")
      ->check(CLI::IsMember({"extended", "standard"}))
      ->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads for evaluation and stage 1")->check(CLI::PositiveNumber);
  app.add_flag("--dry-run", g.dry_run, "resolve and print the configuration without running");
  app.fallthrough();

  auto* train = app.add_subcommand("train", "train a Transformer or HypeNet from scratch");
  train->add_option("--config", a.config, "RunConfig JSON");
  train->add_option("--out", a.out, "checkpoint path");
  train->add_option("--report", a.report, "JSONL report path (default <out>.report.jsonl)");

  auto* halo = app.add_subcommand("halo", "convert an attention-only teacher into a hybrid");
  halo->add_option("--teacher", a.teacher, "teacher checkpoint")->required();
  halo->add_option("--config", a.config, "RunConfig JSON");
  halo->add_option("--out", a.out, "output directory")->required();
  halo->add_option("--stage", a.stage, "all, 1, select, 2 or 3");
  halo->add_option("--k", a.k, "attention layers to keep (default floor(L/4))");

  auto* sel = app.add_subcommand("select-layers", "score layers and choose the attention set");
  sel->add_option("--teacher", a.teacher, "teacher checkpoint");
  sel->add_option("--stage1", a.stage1_dir, "directory holding stage1.ckpt");
  sel->add_option("--scores", a.scores, "TSV of 'layer R C' rows instead of model scoring");
  sel->add_option("--config", a.config, "RunConfig JSON");
  sel->add_option("--k", a.k, "attention layers to keep (default floor(L/4))");

  auto* distill = app.add_subcommand("distill", "stage 2: KL distillation of a hybrid");
  distill->add_option("--teacher", a.teacher, "teacher checkpoint")->required();
  distill->add_option("--student", a.student, "hybrid checkpoint")->required();
  distill->add_option("--config", a.config, "RunConfig JSON");
  distill->add_option("--out", a.out, "checkpoint path")->required();
  distill->add_option("--report", a.report, "JSONL report path");

  auto* ft = app.add_subcommand("finetune", "stage 3: long-context finetuning");
  ft->add_option("--ckpt", a.ckpt, "hybrid checkpoint")->required();
  ft->add_option("--config", a.config, "RunConfig JSON");
  ft->add_option("--out", a.out, "checkpoint path")->required();
  ft->add_option("--report", a.report, "JSONL report path");
  ft->add_option("--stage2-context", a.stage2_context, "context length of the previous stage");

  auto* ev = app.add_subcommand("eval", "NIAH length sweep, CSR proxy or perplexity");
  ev->add_option("--ckpt", a.ckpt, "checkpoint")->required();
  ev->add_option("--task", a.task, "niah, csr or ppl")->capture_default_str();
  ev->add_option("--lengths", a.lengths, "context lengths, ascending")->delimiter(',');
  ev->add_option("--samples", a.samples, "samples (niah, csr) or documents (ppl) per length");
  ev->add_option("--config", a.config, "RunConfig JSON");
  ev->add_option("--out", a.out, "TSV path (default stdout)");
  ev->add_flag("--no-scaling", a.no_scaling, "disable attention logits scaling");
  ev->add_option("--constant-scaling", a.constant_scaling, "scale attention logits by a constant");
  ev->add_option("--scale-base", a.scale_base, "position-dependent scaling with base a");
  ev->add_flag("--fit-scale", a.fit_scale, "fit the scaling base on long held-out documents");

  auto* bench = app.add_subcommand("bench", "prefill or decode timing");
  bench->add_option("--ckpt", a.ckpt, "checkpoint")->required();
  bench->add_option("--mode", a.mode, "prefill or decode")->capture_default_str();
  bench->add_option("--lengths", a.lengths, "context lengths")->delimiter(',');
  bench->add_option("--reps", a.reps, "timed repetitions after one warmup")->check(CLI::Range(5, 1000));
  bench->add_option("--tokens", a.tokens, "decode tokens per repetition")->check(CLI::PositiveNumber);
  bench->add_option("--out", a.out, "TSV path (default stdout)");

  auto* inspect = app.add_subcommand("inspect", "summarize a checkpoint");
  inspect->add_option("--ckpt", a.ckpt, "checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  if (seed_opt->count()) g.seed = seed;
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return g.precision == "extended" ? dispatch<double>(cmd, a, g) : dispatch<float>(cmd, a, g);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const DivergenceError& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
