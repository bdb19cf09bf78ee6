// Command-line driver: data generation, training, sampling, infilling,
// evaluation and the exhaustive oracle check.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "ilm/checkpoint.hpp"
#include "ilm/config.hpp"
#include "ilm/decoding.hpp"
#include "ilm/metrics.hpp"
#include "ilm/oracle.hpp"
#include "ilm/tasks.hpp"
#include "ilm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ilm;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3, kValidation = 4, kNumerical = 5 };

void log(const std::string& msg) { std::cerr << "[ilm] " << msg << '\n'; }

fs::path run_root() {
  const char* env = std::getenv("ILM_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

/// Refuses to write into a non-empty directory unless forced; forcing
/// clears it first.
void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) {
      throw UsageError("output directory " + dir.string() + " is not empty (use --force to overwrite)");
    }
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void write_json(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("unreadable json in " + path.string() + ": " + e.what());
  }
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!split_whitespace(line).empty()) out.push_back(line);
  }
  return out;
}

/// Output sink: a file when a path is given, stdout otherwise.
class Sink {
 public:
  explicit Sink(const std::string& path) {
    if (!path.empty()) {
      file_.open(path);
      if (!file_) throw IoError("cannot write " + path);
    }
  }
  std::ostream& os() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

// ---------------------------------------------------------------------------
// Training configuration: flag > config file > default.

struct TrainOptions {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  bool force = false;
  bool resume = false;
  std::optional<std::string> variant;
  std::optional<double> lr, grad_clip, weight_decay;
  std::optional<std::uint64_t> steps, batch_size, seed, eval_every, checkpoint_every, eval_limit;
  std::optional<std::uint64_t> d_model, n_layers, n_heads, d_ff, time_bins, max_seq_len, log_every;
  bool no_clip = false;
};

struct Resolved {
  std::string variant_name;  // includes "armo"
  TrainConfig train;
  std::size_t d_model = 128, n_layers = 2, n_heads = 4, d_ff = 512, time_bins = 16, max_seq_len = 0;
  std::size_t eval_limit = 200;
  std::size_t log_every = 1;
  json snapshot;
};

template <typename T>
T pick(const std::optional<T>& flag, const std::optional<T>& file, T fallback, json& snap, const std::string& key) {
  T v = flag ? *flag : file ? *file : fallback;
  snap[key] = {{"value", v}, {"source", flag ? "flag" : file ? "file" : "default"}};
  return v;
}

Resolved resolve(const TrainOptions& o) {
  KeyValues kv;
  if (!o.config_path.empty()) kv = KeyValues::load(o.config_path);
  static const std::set<std::string> known{"variant",     "lr",         "steps",        "batch_size", "seed",
                                           "grad_clip",   "weight_decay", "eval_every", "checkpoint_every",
                                           "eval_limit",  "d_model",    "n_layers",     "n_heads",    "d_ff",
                                           "time_bins",   "max_seq_len", "log_every"};
  for (const auto& [k, _] : kv.entries()) {
    if (!known.count(k)) throw UsageError("unknown config key '" + k + "' in " + o.config_path);
  }
  Resolved r;
  json& s = r.snapshot;
  auto u = [&](const std::optional<std::uint64_t>& flag, const std::string& key, std::uint64_t def) {
    return static_cast<std::size_t>(pick<std::uint64_t>(flag, kv.get_uint(key), def, s, key));
  };
  r.variant_name = pick<std::string>(o.variant, kv.get("variant"), "ilm", s, "variant");
  const Variant base = r.variant_name == "armo" ? Variant::Arm : parse_variant(r.variant_name);
  r.train.variant = base;
  r.train.lr = pick<double>(o.lr, kv.get_double("lr"), 1e-4, s, "lr");
  r.train.max_steps = u(o.steps, "steps", 10000);
  r.train.batch_size = u(o.batch_size, "batch_size", 64);
  r.train.seed = pick<std::uint64_t>(o.seed, kv.get_uint("seed"), 0, s, "seed");
  r.train.weight_decay = pick<double>(o.weight_decay, kv.get_double("weight_decay"), 0.01, s, "weight_decay");
  const double clip = pick<double>(o.grad_clip, kv.get_double("grad_clip"), 1.0, s, "grad_clip");
  r.train.grad_clip = o.no_clip ? std::nullopt : std::optional<double>(clip);
  if (o.no_clip) s["grad_clip"] = {{"value", nullptr}, {"source", "flag"}};
  r.train.eval_every = u(o.eval_every, "eval_every", 1000);
  r.train.checkpoint_every = u(o.checkpoint_every, "checkpoint_every", 1000);
  r.eval_limit = u(o.eval_limit, "eval_limit", 200);
  r.log_every = std::max<std::size_t>(1, u(o.log_every, "log_every", 1));
  r.d_model = u(o.d_model, "d_model", 128);
  r.n_layers = u(o.n_layers, "n_layers", 2);
  r.n_heads = u(o.n_heads, "n_heads", 4);
  r.d_ff = u(o.d_ff, "d_ff", 4 * r.d_model);
  r.time_bins = u(o.time_bins, "time_bins", 16);
  r.max_seq_len = u(o.max_seq_len, "max_seq_len", 0);
  r.train.validate();
  return r;
}

std::string fmt_ckpt(std::size_t step) {
  std::ostringstream os;
  os << "ckpt-" << std::setw(7) << std::setfill('0') << step << ".bin";
  return os.str();
}

DecodeOptions greedy_options(const Checkpoint& ck) {
  return greedy_decode_options(ck.weights.config, ck.meta.value("reverse_output", false));
}

/// Held-out loss on a fixed noised batch plus, for task corpora, greedy
/// sequence/token accuracy.
json evaluate_during_training(const TrainConfig& tcfg, const ModelWeights<float>& w, const TaskFiles& data,
                              std::size_t limit, bool reverse) {
  json out;
  if (data.test.empty()) return out;
  const std::size_t n = std::min(limit, data.test.size());
  const std::span<const CleanSequence> subset(data.test.data(), n);
  TrainConfig ec = tcfg;
  ec.batch_size = n;
  ec.seed = tcfg.seed ^ 0x7E57;
  const auto targets = reverse ? reverse_solutions(subset) : std::vector<CleanSequence>(subset.begin(), subset.end());
  const auto batch = make_batch(ec, w.config, targets, 0);
  out["test_loss"] = batch_loss<float>(w, batch, nullptr).total;
  if (data.format == CorpusFormat::Task) {
    Checkpoint view;
    view.meta["reverse_output"] = reverse;
    view.weights.config = w.config;
    const auto r = accuracy_suite(w, subset, greedy_options(view), tcfg.seed);
    out["seq_acc"] = r.seq_acc;
    out["tok_acc"] = r.tok_acc;
  }
  return out;
}

int cmd_train(const TrainOptions& o) {
  const Resolved r = resolve(o);
  if (o.data_dir.empty()) throw UsageError("--data is required");
  const TaskFiles data = load_task_data(o.data_dir);
  const bool reverse = r.variant_name == "armo";
  const std::vector<CleanSequence> corpus = reverse ? reverse_solutions(data.train) : data.train;

  ModelConfig mc = default_model_config(r.train.variant, data.vocab, {data.train, data.test});
  mc.d_model = r.d_model;
  mc.n_layers = r.n_layers;
  mc.n_heads = r.n_heads;
  mc.d_ff = r.d_ff;
  if (mc.variant == Variant::Mdm) mc.time_bins = r.time_bins;
  if (r.max_seq_len) {
    if (r.max_seq_len < mc.max_seq_len) {
      throw ValidationError("max_seq_len " + std::to_string(r.max_seq_len) + " is shorter than the data needs (" +
                            std::to_string(mc.max_seq_len) + ")");
    }
    if (mc.variant != Variant::Mdm) mc.max_seq_len = r.max_seq_len;
  }
  mc.validate();

  json snapshot = r.snapshot;
  snapshot["model"] = to_json(mc);
  const std::string run_id = data.manifest.value("task", std::string("data")) + "-" + r.variant_name + "-s" +
                             std::to_string(r.train.seed) + "-" + hex64(fnv1a(snapshot.dump())).substr(8);
  const fs::path out = o.out_dir.empty() ? run_root() / run_id : fs::path(o.out_dir);

  TrainState state;
  const fs::path manifest_path = out / "run.json";
  json manifest;
  if (o.resume && fs::exists(manifest_path)) {
    manifest = read_json(manifest_path);
    if (manifest.value("corpus_manifest_hash", std::string()) != data.manifest_hash) {
      throw ValidationError("resume: data differs from the run's corpus manifest");
    }
    const auto& ckpts = manifest["checkpoints"];
    if (ckpts.empty()) throw ValidationError("resume: run has no checkpoint");
    const Checkpoint ck = load_checkpoint(out / ckpts.back().get<std::string>(), mc);
    if (ck.vocab != data.vocab.tokens()) throw ValidationError("resume: checkpoint vocabulary differs from the data");
    if (!ck.optimizer) throw ValidationError("resume: checkpoint has no optimizer state");
    state.weights = ck.weights;
    state.optimizer = *ck.optimizer;
    // Drop metric lines past the checkpoint so the stream matches an
    // uninterrupted run.
    std::vector<std::string> kept;
    for (const auto& line : read_lines(out / "metrics.jsonl")) {
      if (json::parse(line).value("step", std::size_t{0}) <= state.optimizer.step) kept.push_back(line);
    }
    std::ofstream m(out / "metrics.jsonl", std::ios::trunc);
    for (const auto& l : kept) m << l << '\n';
    log("resuming " + out.string() + " at step " + std::to_string(state.optimizer.step));
  } else {
    prepare_out_dir(out, o.force);
    state = TrainState::fresh(init_weights(mc, derive_seed(r.train.seed, {0x1A17})));
    manifest = {{"run_id", run_id},
                {"seed", r.train.seed},
                {"variant", r.variant_name},
                {"config", snapshot},
                {"data_dir", fs::absolute(o.data_dir).string()},
                {"corpus_manifest_hash", data.manifest_hash},
                {"checkpoints", json::array()},
                {"metrics", "metrics.jsonl"}};
    write_json(manifest_path, manifest);
    std::ofstream(out / "metrics.jsonl", std::ios::trunc);
  }
  for (const auto& [k, v] : snapshot.items()) {
    if (v.contains("source")) log("config " + k + " = " + v["value"].dump() + " (" + v["source"].get<std::string>() + ")");
  }
  log("run " + out.string() + ", " + std::to_string(corpus.size()) + " training sequences, " +
      std::to_string(state.weights.parameter_count()) + " parameters");

  std::ofstream metrics(out / "metrics.jsonl", std::ios::app);
  TrainConfig tcfg = r.train;
  tcfg.dump_dir = out / "diagnostics";
  auto save = [&](std::size_t step, const TrainState& s) {
    Checkpoint ck{s.weights, data.vocab.tokens(), s.optimizer,
                  {{"run_id", run_id}, {"reverse_output", reverse}, {"variant", r.variant_name},
                   {"task", data.manifest.value("task", std::string())}}};
    const std::string name = fmt_ckpt(step);
    save_checkpoint(ck, out / name);
    auto& list = manifest["checkpoints"];
    if (list.empty() || list.back() != name) list.push_back(name);
    metrics.flush();
    write_json(manifest_path, manifest);
  };
  TrainHooks hooks;
  hooks.on_step = [&](const LossReport& rep) {
    if (rep.step % r.log_every != 0) return;
    metrics << json{{"kind", "train"}, {"step", rep.step}, {"loss", rep.total}, {"tok", rep.tok_component},
                    {"stop", rep.stop_component}, {"grad_norm", rep.grad_norm}}
                   .dump()
            << '\n';
  };
  hooks.on_eval = [&](std::size_t step, const ModelWeights<float>& w) {
    json e = evaluate_during_training(tcfg, w, data, r.eval_limit, reverse);
    if (e.empty()) return;
    e["kind"] = "eval";
    e["step"] = step;
    metrics << e.dump() << '\n';
    log("step " + std::to_string(step) + " " + e.dump());
  };
  hooks.on_checkpoint = save;
  train(tcfg, corpus, state, hooks);
  save(state.optimizer.step, state);
  log("finished at step " + std::to_string(state.optimizer.step) + "; checkpoint " +
      (out / manifest["checkpoints"].back().get<std::string>()).string());
  std::cout << json{{"run_dir", out.string()}, {"checkpoint", manifest["checkpoints"].back()}}.dump() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct GenDataOptions {
  std::string task;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::vector<std::string> overrides;
  bool force = false;
};

int cmd_gen_data(const GenDataOptions& o) {
  KeyValues kv;
  for (const auto& ov : o.overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) throw UsageError("override '" + ov + "' is not key=value");
    kv.set(ov.substr(0, eq), ov.substr(eq + 1));
  }
  const TaskData data = generate_task(o.task, o.seed, kv);
  const fs::path out = o.out_dir.empty() ? run_root() / "data" / (o.task + "-s" + std::to_string(o.seed)) : fs::path(o.out_dir);
  prepare_out_dir(out, o.force);
  const json manifest = write_task_data(data, out);
  log("wrote " + std::to_string(data.train.size()) + " train / " + std::to_string(data.test.size()) +
      " test records to " + out.string());
  std::cout << manifest.dump() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

struct SampleOptions {
  std::string ckpt;
  std::size_t n = 1;
  std::string prompt;
  std::optional<std::string> mode;
  std::optional<std::size_t> top_k;
  std::optional<double> nucleus_p;
  std::optional<double> tau;
  std::optional<std::size_t> max_insertions;
  std::vector<std::size_t> steps;
  std::optional<std::string> decoder;
  std::uint64_t seed = 0;
  std::string out;
  std::string trajectories;
};

void check_decoder_flags(const SampleOptions& o, Variant v) {
  if (o.decoder && parse_variant(*o.decoder) != v) {
    throw ValidationError("decoder '" + *o.decoder + "' does not match the checkpoint's " + std::string(variant_name(v)) +
                          " model");
  }
  const bool insertion = v == Variant::Ilm || v == Variant::It;
  if (!insertion && (o.mode || o.top_k || o.tau || o.max_insertions)) {
    throw ValidationError("--mode/--top-k/--tau/--max-insertions apply to insertion models only");
  }
  if (v != Variant::Mdm && !o.steps.empty()) {
    throw ValidationError("--steps applies to mdm models only");
  }
}

SamplerConfig insertion_config(const SampleOptions& o) {
  SamplerConfig c;
  if (o.mode) c.mode = parse_sample_mode(*o.mode);
  c.top_k = o.top_k;
  c.nucleus_p = o.nucleus_p;
  if (o.tau) c.stop_threshold = *o.tau;
  c.max_insertions = o.max_insertions;
  c.validate();
  return c;
}

std::vector<TokenId> prompt_ids(const std::string& prompt, const Vocab& vocab) {
  std::vector<TokenId> ids = vocab.encode_line(prompt.empty() ? std::string(Vocab::kBos) : prompt);
  if (ids.empty() || ids.back() != vocab.bos()) ids.push_back(vocab.bos());
  if (std::count(ids.begin(), ids.end(), vocab.bos()) != 1) throw ValidationError("prompt must contain one <s>");
  return ids;
}

int cmd_sample(const SampleOptions& o) {
  const Checkpoint ck = load_checkpoint(o.ckpt);
  const Vocab vocab(ck.vocab);
  const ModelConfig& c = ck.weights.config;
  check_decoder_flags(o, c.variant);
  const auto prompt = prompt_ids(o.prompt, vocab);
  const std::size_t cond = prompt.size() - 1;
  const bool reverse = ck.meta.value("reverse_output", false);
  Sink out(o.out);
  std::optional<Sink> traj;
  if (!o.trajectories.empty()) traj.emplace(o.trajectories);

  // Timing goes to stderr so that the sample file is a pure function of
  // the seed.
  using clock = std::chrono::steady_clock;
  double total_secs = 0;
  std::size_t total_tokens = 0;
  auto emit = [&](std::size_t i, std::vector<TokenId> content, clock::time_point t0, const json& extra) {
    total_secs += std::chrono::duration<double>(clock::now() - t0).count();
    total_tokens += content.size();
    if (reverse) std::reverse(content.begin(), content.end());
    json rec = {{"index", i}, {"text", vocab.decode(content)}, {"length", content.size()}};
    rec.update(extra);
    out.os() << rec.dump() << '\n';
  };
  auto timing = [&](const json& extra) {
    json t = {{"kind", "timing"},
              {"samples", o.n},
              {"seconds", total_secs},
              {"seconds_per_token", total_tokens ? total_secs / static_cast<double>(total_tokens) : 0.0}};
    t.update(extra);
    std::cerr << t.dump() << '\n';
    total_secs = 0;
    total_tokens = 0;
  };
  if (c.variant == Variant::Mdm) {
    const std::vector<std::size_t> settings = o.steps.empty() ? std::vector<std::size_t>{c.mdm_span} : o.steps;
    for (std::size_t steps : settings) {
      MdmSamplerConfig mcfg;
      mcfg.steps = steps;
      mcfg.nucleus_p = o.nucleus_p;
      for (std::size_t i = 0; i < o.n; ++i) {
        Rng rng(derive_seed(o.seed, {i, steps}));
        const auto t0 = clock::now();
        const auto res = mdm_generate(mdm_initial_canvas(prompt, c), model_denoiser(ck.weights), mcfg, rng, c.specials.mask);
        emit(i, mdm_content(res.canvas, cond, c.specials), t0, {{"steps", steps}});
      }
      timing({{"steps", steps}});
    }
    return kOk;
  }
  const SamplerConfig scfg = insertion_config(o);
  for (std::size_t i = 0; i < o.n; ++i) {
    Rng rng(derive_seed(o.seed, {i}));
    const auto t0 = clock::now();
    if (c.variant == Variant::Arm) {
      const auto res = arm_generate(prompt, ck.weights, o.nucleus_p, c.max_seq_len - prompt.size(), rng);
      emit(i, res.continuation, t0, {{"truncated", res.truncated}});
      continue;
    }
    std::vector<TokenId> seq = prompt;
    seq.push_back(c.specials.eos);
    auto state = InsertionState::from_sequence(seq, cond);
    const auto res = c.variant == Variant::Ilm ? ilm_generate(std::move(state), ck.weights, scfg, rng)
                                               : it_generate(std::move(state), ck.weights, scfg, rng);
    emit(i, {res.tokens.begin() + static_cast<std::ptrdiff_t>(cond + 1), res.tokens.end() - 1}, t0,
         {{"truncated", res.truncated}, {"steps", res.trajectory.size()}});
    if (traj) {
      json steps = json::array();
      for (const auto& t : res.trajectory) {
        steps.push_back({{"step", t.step}, {"slot", t.slot}, {"token", vocab.token(t.token)}, {"position", t.position}});
      }
      traj->os() << json{{"index", i}, {"trajectory", steps}}.dump() << '\n';
    }
  }
  timing(json::object());
  return kOk;
}

// ---------------------------------------------------------------------------

struct InfillOptions {
  std::string ckpt;
  std::string input;
  std::string text;
  std::optional<double> nucleus_p;
  std::optional<double> tau;
  std::optional<std::size_t> top_k;
  std::optional<std::size_t> steps;
  bool anywhere = false;
  std::uint64_t seed = 0;
  std::string out;
};

/// `_` marks a blank. For the insertion models consecutive blanks form one
/// gap of unknown length; for the mdm each `_` is one masked position.
InfillExample parse_blanks(const std::string& line, const Vocab& vocab) {
  InfillExample ex;
  std::size_t span_begin = 0;
  bool in_span = false;
  for (const auto& w : split_whitespace(line)) {
    if (w == "_") {
      if (ex.inp.empty()) throw ValidationError("a blank cannot precede the first token: " + line);
      if (!in_span) {
        span_begin = ex.gt.size();
        in_span = true;
        ex.gap_after.back() = 1;
      }
      ex.gt.push_back(vocab.mask());
      continue;
    }
    if (in_span) {
      ex.spans.emplace_back(span_begin, ex.gt.size());
      in_span = false;
    }
    const TokenId id = vocab.id(w);
    ex.gt.push_back(id);
    ex.inp.push_back(id);
    ex.gap_after.push_back(0);
  }
  if (in_span) throw ValidationError("a blank cannot follow the last token: " + line);
  if (ex.spans.empty()) throw ValidationError("no blank ('_') in: " + line);
  return ex;
}

int cmd_infill(const InfillOptions& o) {
  const Checkpoint ck = load_checkpoint(o.ckpt);
  const Vocab vocab(ck.vocab);
  const ModelConfig& c = ck.weights.config;
  if (c.variant == Variant::Arm) throw ValidationError("infilling needs an ilm, it or mdm model");
  std::vector<std::string> lines;
  if (!o.text.empty()) lines.push_back(o.text);
  if (!o.input.empty()) {
    auto more = read_lines(o.input);
    lines.insert(lines.end(), more.begin(), more.end());
  }
  if (lines.empty()) throw UsageError("give --text or --input");
  DecodeOptions opts;
  opts.insertion.nucleus_p = o.nucleus_p;
  opts.insertion.top_k = o.top_k;
  if (o.tau) opts.insertion.stop_threshold = *o.tau;
  opts.insertion.validate();
  opts.mdm.nucleus_p = o.nucleus_p;
  opts.mdm.steps = o.steps.value_or(c.mdm_span);
  opts.infill_anywhere = o.anywhere;
  Sink out(o.out);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const InfillExample ex = parse_blanks(lines[i], vocab);
    Rng rng(derive_seed(o.seed, {i}));
    const auto filled = infill(ck.weights, ex, opts, rng);
    out.os() << json{{"index", i}, {"input", lines[i]}, {"text", vocab.decode(filled)}}.dump() << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalOptions {
  std::string ckpt;
  std::string samples;
  std::string testset;
  std::string evaluator;
  std::string mode = "accuracy";
  std::string infill_mode = "single";
  std::size_t n = 100;
  std::size_t limit = 0;
  std::uint64_t seed = 0;
  std::optional<double> nucleus_p;
  std::string out;
};

std::vector<CleanSequence> load_testset(const std::string& path, const Vocab& vocab, std::size_t limit) {
  if (path.empty()) throw UsageError("--testset is required");
  // A data directory or a record file; the format comes from the manifest
  // when there is one.
  fs::path file = path;
  CorpusFormat format = CorpusFormat::Task;
  fs::path manifest = fs::path(path).parent_path() / "manifest.json";
  if (fs::is_directory(path)) {
    file = fs::path(path) / "test.txt";
    manifest = fs::path(path) / "manifest.json";
  }
  if (fs::exists(manifest)) format = parse_corpus_format(read_json(manifest).value("format", std::string("task")));
  auto set = load_corpus(file, vocab, format);
  if (limit && set.size() > limit) set.resize(limit);
  if (set.empty()) throw ValidationError("test set " + file.string() + " is empty");
  return set;
}

int cmd_eval(const EvalOptions& o) {
  json report = {{"mode", o.mode}};
  if (o.mode == "accuracy") {
    if (o.ckpt.empty()) throw UsageError("--ckpt is required for accuracy mode");
    const Checkpoint ck = load_checkpoint(o.ckpt);
    const Vocab vocab(ck.vocab);
    const auto test = load_testset(o.testset, vocab, o.limit);
    const auto r = accuracy_suite(ck.weights, test, greedy_options(ck), o.seed);
    report.update({{"seq_acc", r.seq_acc}, {"tok_acc", r.tok_acc}, {"n", r.n}});
  } else if (o.mode == "generation" || o.mode == "infill") {
    if (o.evaluator.empty()) throw UsageError("--evaluator is required for " + o.mode + " mode");
    const Checkpoint ev = load_checkpoint(o.evaluator);
    const Vocab vocab(ev.vocab);
    if (o.mode == "generation") {
      std::vector<std::vector<TokenId>> samples;
      if (!o.samples.empty()) {
        for (const auto& line : read_lines(o.samples)) {
          // JSON-lines from `sample` or plain token lines.
          const std::string text = line.front() == '{' ? json::parse(line).value("text", std::string()) : line;
          samples.push_back(vocab.encode_line(text));
        }
      } else {
        if (o.ckpt.empty()) throw UsageError("give --samples or --ckpt");
        const Checkpoint ck = load_checkpoint(o.ckpt);
        if (ck.vocab != ev.vocab) throw ValidationError("model and evaluator vocabularies differ");
        DecodeOptions d;
        d.insertion.nucleus_p = o.nucleus_p;
        d.mdm.nucleus_p = o.nucleus_p;
        d.mdm.steps = ck.weights.config.mdm_span;
        d.arm_nucleus_p = o.nucleus_p;
        d.arm_max_new = ck.weights.config.max_seq_len - 1;
        const std::vector<TokenId> prompt{vocab.bos()};
        for (std::size_t i = 0; i < o.n; ++i) {
          Rng rng(derive_seed(o.seed, {i}));
          samples.push_back(decode_solution(ck.weights, prompt, d, rng));
        }
      }
      if (samples.empty()) throw ValidationError("no samples to score");
      const auto m = generation_metrics(ev.weights, samples);
      report.update({{"nll", m.nll}, {"entropy", m.entropy}, {"mean_len", m.mean_len}, {"n", m.n_samples}});
    } else {
      if (o.ckpt.empty()) throw UsageError("--ckpt is required for infill mode");
      const Checkpoint ck = load_checkpoint(o.ckpt);
      if (ck.vocab != ev.vocab) throw ValidationError("model and evaluator vocabularies differ");
      const auto test = load_testset(o.testset, vocab, o.limit);
      Rng rng(o.seed);
      const InfillSet set = build_infill_set(test, parse_infill_mode(o.infill_mode), rng);
      if (set.examples.empty()) throw ValidationError("no usable infill examples");
      DecodeOptions d;
      d.insertion.nucleus_p = o.nucleus_p;
      d.mdm.nucleus_p = o.nucleus_p;
      d.mdm.steps = ck.weights.config.mdm_span;
      std::vector<InfillMetrics> recs;
      for (std::size_t i = 0; i < set.examples.size(); ++i) {
        Rng r(derive_seed(o.seed, {i}));
        const auto filled = infill(ck.weights, set.examples[i], d, r);
        recs.push_back(infill_deltas(filled, set.examples[i].gt, set.examples[i].inp, ev.weights));
      }
      const auto m = average_infill(recs);
      report.update({{"d_nll_gt", m.d_nll_gt},
                     {"d_ent_gt", m.d_ent_gt},
                     {"d_nll_inp", m.d_nll_inp},
                     {"d_ent_inp", m.d_ent_inp},
                     {"n_used", m.n_used},
                     {"n_excluded", m.n_excluded},
                     {"n_skipped", set.skipped}});
    }
  } else {
    throw UsageError("unknown eval mode '" + o.mode + "' (accuracy|generation|infill)");
  }
  Sink out(o.out);
  out.os() << report.dump() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------

int cmd_oracle_check(std::size_t max_len, std::size_t vocab_size, bool inject_fault) {
  TargetBuilder builder = [](const CleanSequence& x, const DropMask& b) { return build_noised_example(x, b, 1); };
  if (inject_fault) {
    // Self-test of the checker: credit every target one slot too far right.
    builder = [](const CleanSequence& x, const DropMask& b) {
      NoisedExample ex = build_noised_example(x, b, 1);
      for (auto& t : ex.slot_targets) {
        if (t.slot + 2 < ex.visible.size()) ++t.slot;
      }
      return ex;
    };
  }
  const auto t0 = std::chrono::steady_clock::now();
  const OracleSweep s = oracle_sweep(max_len, vocab_size, builder);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "L  pairs      mismatches  result\n";
  for (std::size_t L = 1; L < s.pairs_by_length.size(); ++L) {
    std::cout << std::left << std::setw(3) << L << std::setw(11) << s.pairs_by_length[L] << std::setw(12)
              << s.mismatches_by_length[L] << (s.mismatches_by_length[L] == 0 ? "PASS" : "FAIL") << '\n';
  }
  std::cout << "total sequences " << s.sequences << ", pairs " << s.pairs << ", mismatches " << s.mismatches << " ("
            << secs << " s)\n";
  return s.mismatches == 0 ? kOk : kValidation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Insertion language models: data, training, decoding and evaluation"};
  app.require_subcommand(1);

  GenDataOptions gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a task dataset");
  gen->add_option("--task", gd.task, "star-easy|star-medium|star-hard|star-desk|star-desk-fixed|zebra|stories")
      ->required();
  gen->add_option("--out", gd.out_dir, "Output directory (default $ILM_RUN_ROOT/data/<task>-s<seed>)");
  gen->add_option("--seed", gd.seed, "Generator seed");
  gen->add_option("--set", gd.overrides, "Generator override key=value (n_train, n_test, max_tokens, m, n)");
  gen->add_flag("--force", gd.force, "Overwrite a non-empty output directory");

  TrainOptions to;
  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", to.config_path, "key = value config file");
  tr->add_option("--data", to.data_dir, "Directory written by gen-data")->required();
  tr->add_option("--out", to.out_dir, "Run directory (default $ILM_RUN_ROOT/<run id>)");
  tr->add_flag("--force", to.force, "Overwrite a non-empty run directory");
  tr->add_flag("--resume", to.resume, "Continue from the run's latest checkpoint");
  tr->add_option("--variant", to.variant, "ilm|arm|armo|mdm|it");
  tr->add_option("--lr", to.lr);
  tr->add_option("--steps", to.steps);
  tr->add_option("--batch-size", to.batch_size);
  tr->add_option("--seed", to.seed);
  tr->add_option("--grad-clip", to.grad_clip, "Global norm clip (must be > 0)");
  tr->add_flag("--no-clip", to.no_clip, "Disable gradient clipping");
  tr->add_option("--weight-decay", to.weight_decay);
  tr->add_option("--eval-every", to.eval_every, "Steps between held-out evaluations (0 disables)");
  tr->add_option("--eval-limit", to.eval_limit, "Test examples used by periodic evaluation");
  tr->add_option("--checkpoint-every", to.checkpoint_every, "Steps between checkpoints (0: final only)");
  tr->add_option("--log-every", to.log_every, "Steps between training metric lines");
  tr->add_option("--d-model", to.d_model);
  tr->add_option("--n-layers", to.n_layers);
  tr->add_option("--n-heads", to.n_heads);
  tr->add_option("--d-ff", to.d_ff);
  tr->add_option("--time-bins", to.time_bins, "mdm noise-level embedding size");
  tr->add_option("--max-seq-len", to.max_seq_len);

  SampleOptions so;
  auto* sa = app.add_subcommand("sample", "Decode sequences from a checkpoint");
  sa->add_option("--ckpt", so.ckpt)->required();
  sa->add_option("-n,--n", so.n, "Number of samples");
  sa->add_option("--prompt", so.prompt, "Prompt tokens ending with <s>");
  sa->add_option("--decoder", so.decoder, "Expected decoder family (ilm|it|mdm|arm)");
  sa->add_option("--mode", so.mode, "joint|two-step");
  sa->add_option("--top-k", so.top_k, "Slot-stage top-k");
  sa->add_option("--nucleus-p", so.nucleus_p, "Token-stage nucleus mass");
  sa->add_option("--tau", so.tau, "Stop threshold");
  sa->add_option("--max-insertions", so.max_insertions);
  sa->add_option("--steps", so.steps, "mdm unmasking steps; several values run a sweep")->delimiter(',');
  sa->add_option("--seed", so.seed);
  sa->add_option("--out", so.out, "Samples (JSON lines; default stdout)");
  sa->add_option("--trajectories", so.trajectories, "Insertion trajectories (JSON lines)");

  InfillOptions io;
  auto* in = app.add_subcommand("infill", "Fill blanks ('_') in token sequences");
  in->add_option("--ckpt", io.ckpt)->required();
  in->add_option("--input", io.input, "File with one template per line");
  in->add_option("--text", io.text, "A single template");
  in->add_option("--nucleus-p", io.nucleus_p);
  in->add_option("--top-k", io.top_k);
  in->add_option("--tau", io.tau);
  in->add_option("--steps", io.steps, "mdm unmasking steps");
  in->add_flag("--anywhere", io.anywhere, "Let the ilm insert outside the blanks");
  in->add_option("--seed", io.seed);
  in->add_option("--out", io.out);

  EvalOptions eo;
  auto* ev = app.add_subcommand("eval", "Accuracy, generation or infill metrics");
  ev->add_option("--mode", eo.mode, "accuracy|generation|infill");
  ev->add_option("--ckpt", eo.ckpt);
  ev->add_option("--samples", eo.samples, "Sample file for generation mode");
  ev->add_option("--testset", eo.testset, "Data directory or record file");
  ev->add_option("--evaluator", eo.evaluator, "Causal evaluator checkpoint");
  ev->add_option("--infill-mode", eo.infill_mode, "single|multi");
  ev->add_option("-n,--n", eo.n, "Samples to draw when --samples is absent");
  ev->add_option("--limit", eo.limit, "Use at most this many test records");
  ev->add_option("--nucleus-p", eo.nucleus_p);
  ev->add_option("--seed", eo.seed);
  ev->add_option("--out", eo.out);

  std::size_t oracle_len = 6, oracle_vocab = 8;
  bool inject = false;
  auto* oc = app.add_subcommand("oracle-check", "Exhaustive target-vs-posterior equality sweep");
  oc->add_option("--max-len", oracle_len);
  oc->add_option("--vocab-size", oracle_vocab, "Alphabet size; sequences never repeat a symbol");
  oc->add_flag("--inject-fault", inject, "Shift every target by one slot (checker self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  try {
    if (*gen) return cmd_gen_data(gd);
    if (*tr) return cmd_train(to);
    if (*sa) return cmd_sample(so);
    if (*in) return cmd_infill(io);
    if (*ev) return cmd_eval(eo);
    if (*oc) return cmd_oracle_check(oracle_len, oracle_vocab, inject);
  } catch (const UsageError& e) {
    log(std::string("usage error: ") + e.what());
    return kUsage;
  } catch (const IoError& e) {
    log(std::string("io error: ") + e.what());
    return kIo;
  } catch (const ValidationError& e) {
    log(std::string("validation error: ") + e.what());
    return kValidation;
  } catch (const NumericalError& e) {
    log(std::string("numerical error: ") + e.what());
    return kNumerical;
  } catch (const fs::filesystem_error& e) {
    log(std::string("io error: ") + e.what());
    return kIo;
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return kFailure;
  }
  return kUsage;
}
