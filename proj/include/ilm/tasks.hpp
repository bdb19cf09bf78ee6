#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ilm/config.hpp"
#include "ilm/corpus.hpp"
#include "ilm/model.hpp"
#include "ilm/vocab.hpp"

namespace ilm {

/// A generated dataset: record lines for both splits plus what is needed to
/// parse them back.
struct TaskData {
  std::string task;
  CorpusFormat format = CorpusFormat::Task;
  Vocab vocab;
  std::vector<std::string> train;
  std::vector<std::string> test;
  nlohmann::json spec;  // generator parameters, echoed into manifests
};

/// Tasks: the star tiers, `zebra` and `stories`. Recognized overrides:
/// n_train, n_test, plus per-generator keys (max_tokens, m, n, ...).
TaskData generate_task(const std::string& task, std::uint64_t seed, const KeyValues& overrides = {});

std::vector<std::string> task_names();

/// train.txt, test.txt, vocab.txt and manifest.json; returns the manifest.
nlohmann::json write_task_data(const TaskData& data, const std::filesystem::path& dir);

/// Loaded view of a directory written by write_task_data.
struct TaskFiles {
  nlohmann::json manifest;
  std::string manifest_hash;
  CorpusFormat format = CorpusFormat::Task;
  Vocab vocab;
  std::vector<CleanSequence> train;
  std::vector<CleanSequence> test;  // empty when test.txt is absent
};

TaskFiles load_task_data(const std::filesystem::path& dir);

std::vector<CleanSequence> parse_lines(std::span<const std::string> lines, const Vocab& vocab, CorpusFormat format);

/// Reverses each solution between `<s>` and `</s>` (the ARMO targets).
std::vector<CleanSequence> reverse_solutions(std::span<const CleanSequence> corpus);

/// Shape defaults used across the tools: 2 layers, 4 heads, d_model 128,
/// d_ff 4 d_model; lengths sized to fit every sequence of `corpora` with
/// `headroom` spare positions.
ModelConfig default_model_config(Variant variant, const Vocab& vocab,
                                 std::initializer_list<std::span<const CleanSequence>> corpora,
                                 std::size_t headroom = 4);

}  // namespace ilm
