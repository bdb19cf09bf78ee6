#include "ilm/tasks.hpp"

#include <fstream>

#include "ilm/star.hpp"
#include "ilm/stories.hpp"
#include "ilm/zebra.hpp"

namespace ilm {

namespace {

std::size_t override_or(const KeyValues& kv, const std::string& key, std::size_t fallback) {
  const auto v = kv.get_uint(key);
  return v ? static_cast<std::size_t>(*v) : fallback;
}

void write_lines(const std::filesystem::path& path, std::span<const std::string> lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot write " + path.string());
  }
  for (const auto& l : lines) out << l << '\n';
  if (!out) {
    throw IoError("failed writing " + path.string());
  }
}

}  // namespace

std::vector<std::string> task_names() {
  return {"star-easy", "star-medium", "star-hard", "star-desk", "star-desk-fixed", "zebra", "stories"};
}

TaskData generate_task(const std::string& task, std::uint64_t seed, const KeyValues& overrides) {
  TaskData d;
  d.task = task;
  if (task.rfind("star-", 0) == 0) {
    StarSpec s = star_preset(task);
    s.seed = seed;
    s.n_train = override_or(overrides, "n_train", s.n_train);
    s.n_test = override_or(overrides, "n_test", s.n_test);
    s.validate();
    for (std::size_t split : {0u, 1u}) {
      auto& out = split == 0 ? d.train : d.test;
      for (const auto& inst : gen_star_split(s, split)) out.push_back(serialize_star(inst));
    }
    d.vocab = star_vocab(s.vocab_size);
    d.spec = {{"degree", s.degree},       {"min_arm", s.min_arm},       {"min_path", s.min_path},
              {"max_path", s.max_path},   {"vocab_size", s.vocab_size}, {"n_train", s.n_train},
              {"n_test", s.n_test},       {"symmetric", s.symmetric},   {"seed", s.seed}};
  } else if (task == "zebra") {
    ZebraSpec s;
    s.seed = seed;
    s.m = override_or(overrides, "m", s.m);
    s.n = override_or(overrides, "n", s.n);
    s.n_train = override_or(overrides, "n_train", s.n_train);
    s.n_test = override_or(overrides, "n_test", s.n_test);
    s.validate();
    for (std::size_t split : {0u, 1u}) {
      auto& out = split == 0 ? d.train : d.test;
      for (const auto& inst : gen_zebra_split(s, split)) out.push_back(serialize_zebra(inst));
    }
    d.vocab = zebra_vocab();
    d.spec = {{"m", s.m}, {"n", s.n}, {"n_train", s.n_train}, {"n_test", s.n_test}, {"seed", s.seed}};
  } else if (task == "stories") {
    StoriesSpec s;
    s.seed = seed;
    s.n_train = override_or(overrides, "n_train", s.n_train);
    s.n_test = override_or(overrides, "n_test", s.n_test);
    s.max_tokens = override_or(overrides, "max_tokens", s.max_tokens);
    d.train = gen_stories_split(s, 0);
    d.test = gen_stories_split(s, 1);
    d.vocab = stories_vocab();
    d.format = CorpusFormat::Lines;
    d.spec = {{"n_train", s.n_train}, {"n_test", s.n_test}, {"max_tokens", s.max_tokens}, {"seed", s.seed}};
  } else {
    throw UsageError("unknown task '" + task + "'");
  }
  return d;
}

nlohmann::json write_task_data(const TaskData& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_lines(dir / "train.txt", data.train);
  write_lines(dir / "test.txt", data.test);
  data.vocab.save(dir / "vocab.txt");
  nlohmann::json files = nlohmann::json::object();
  for (const char* name : {"train.txt", "test.txt", "vocab.txt"}) {
    files[name] = {{"fnv1a", hex64(fnv1a_file(dir / name))}};
  }
  files["train.txt"]["lines"] = data.train.size();
  files["test.txt"]["lines"] = data.test.size();
  nlohmann::json manifest = {{"task", data.task},
                             {"format", data.format == CorpusFormat::Lines ? "lines" : "task"},
                             {"spec", data.spec},
                             {"files", files}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) {
    throw IoError("failed writing " + (dir / "manifest.json").string());
  }
  return manifest;
}

TaskFiles load_task_data(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw IoError("data directory not found: " + dir.string());
  }
  TaskFiles f;
  const auto mpath = dir / "manifest.json";
  std::ifstream in(mpath);
  if (!in) {
    throw IoError("missing data manifest " + mpath.string());
  }
  try {
    f.manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("unreadable data manifest " + mpath.string() + ": " + e.what());
  }
  f.manifest_hash = hex64(fnv1a_file(mpath));
  f.format = parse_corpus_format(f.manifest.value("format", std::string("task")));
  f.vocab = Vocab::load(dir / "vocab.txt");
  const auto expected_vocab = f.manifest["files"]["vocab.txt"].value("fnv1a", std::string());
  if (!expected_vocab.empty() && expected_vocab != hex64(fnv1a_file(dir / "vocab.txt"))) {
    throw ValidationError("vocab.txt does not match the data manifest in " + dir.string());
  }
  f.train = load_corpus(dir / "train.txt", f.vocab, f.format);
  if (std::filesystem::exists(dir / "test.txt")) {
    f.test = load_corpus(dir / "test.txt", f.vocab, f.format);
  }
  return f;
}

std::vector<CleanSequence> parse_lines(std::span<const std::string> lines, const Vocab& vocab, CorpusFormat format) {
  std::vector<CleanSequence> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(parse_corpus_line(l, vocab, format));
  return out;
}

std::vector<CleanSequence> reverse_solutions(std::span<const CleanSequence> corpus) {
  std::vector<CleanSequence> out(corpus.begin(), corpus.end());
  for (auto& x : out) {
    std::reverse(x.ids.begin() + static_cast<std::ptrdiff_t>(x.droppable_begin()), x.ids.end() - 1);
  }
  return out;
}

ModelConfig default_model_config(Variant variant, const Vocab& vocab,
                                 std::initializer_list<std::span<const CleanSequence>> corpora, std::size_t headroom) {
  ModelConfig c;
  c.variant = variant;
  c.vocab_size = vocab.size();
  c.specials = SpecialIds::from(vocab);
  c.d_ff = 4 * c.d_model;
  std::size_t longest = 0, longest_content = 0, longest_prompt = 0;
  for (const auto& corpus : corpora) {
    for (const auto& x : corpus) {
      longest = std::max(longest, x.ids.size());
      longest_content = std::max(longest_content, x.droppable());
      longest_prompt = std::max(longest_prompt, x.condition_len);
    }
  }
  if (variant == Variant::Mdm) {
    c.time_bins = 16;
    c.mdm_span = longest_content + 1;
    c.max_seq_len = longest_prompt + 1 + c.mdm_span;
  } else {
    // ILM/IT inputs carry `<stp>`; the arm sees the sequence minus its last token.
    c.max_seq_len = longest + 1 + headroom;
  }
  return c;
}

}  // namespace ilm
