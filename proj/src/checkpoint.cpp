#include "ilm/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace ilm {

namespace {

constexpr std::array<char, 8> kMagic = {'I', 'L', 'M', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void write_pod(std::ostream& out, U value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
U read_pod(std::istream& in, const std::string& what) {
  U value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(U));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(U))) {
    throw CheckpointTruncatedError("checkpoint truncated while reading " + what);
  }
  return value;
}

struct Entry {
  std::string name;
  const Mat<float>* tensor;
};

void collect(const ModelWeights<float>& w, const std::string& prefix, std::vector<Entry>& out) {
  w.for_each([&](const std::string& name, const Mat<float>& m) { out.push_back({prefix + name, &m}); });
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{
      {"n_layers", c.n_layers},
      {"n_heads", c.n_heads},
      {"d_model", c.d_model},
      {"d_ff", c.d_ff},
      {"max_seq_len", c.max_seq_len},
      {"vocab_size", c.vocab_size},
      {"rope_base", c.rope_base},
      {"variant", std::string(variant_name(c.variant))},
      {"time_bins", c.time_bins},
      {"mdm_span", c.mdm_span},
      {"specials",
       {{"pad", c.specials.pad},
        {"stp", c.specials.stp},
        {"bos", c.specials.bos},
        {"eos", c.specials.eos},
        {"mask", c.specials.mask}}},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.rope_base = j.at("rope_base").get<double>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.time_bins = j.at("time_bins").get<std::size_t>();
    c.mdm_span = j.at("mdm_span").get<std::size_t>();
    const auto& s = j.at("specials");
    c.specials = SpecialIds{s.at("pad").get<TokenId>(), s.at("stp").get<TokenId>(), s.at("bos").get<TokenId>(),
                            s.at("eos").get<TokenId>(), s.at("mask").get<TokenId>()};
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointFormatError(std::string("malformed model config: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::vector<Entry> entries;
  collect(ckpt.weights, "", entries);
  if (ckpt.optimizer) {
    collect(ckpt.optimizer->m, "adam.m.", entries);
    collect(ckpt.optimizer->v, "adam.v.", entries);
  }
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    const auto bytes = static_cast<std::uint64_t>(e.tensor->size()) * sizeof(float);
    tensors.push_back({{"name", e.name},
                       {"shape", {e.tensor->rows(), e.tensor->cols()}},
                       {"offset", offset},
                       {"bytes", bytes}});
    offset += bytes;
  }
  nlohmann::json manifest{
      {"version", kCheckpointVersion},
      {"byte_order", "little"},
      {"dtype", "f32"},
      {"config", to_json(ckpt.weights.config)},
      {"vocab", ckpt.vocab},
      {"meta", ckpt.meta},
      {"tensors", tensors},
  };
  if (ckpt.optimizer) {
    manifest["optimizer_step"] = ckpt.optimizer->step;
  }
  const std::string header = manifest.dump();

  // Write to a sibling file first so a crash never leaves a half-written
  // checkpoint under the final name.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IoError("cannot open checkpoint for writing: " + path.string());
    }
    out.write(kMagic.data(), kMagic.size());
    write_pod<std::uint32_t>(out, kCheckpointVersion);
    write_pod<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& e : entries) {
      out.write(reinterpret_cast<const char*>(e.tensor->data()),
                static_cast<std::streamsize>(e.tensor->size() * sizeof(float)));
    }
    if (!out) {
      throw IoError("failed writing checkpoint: " + path.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expect) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open checkpoint: " + path.string());
  }
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != static_cast<std::streamsize>(magic.size())) {
    throw CheckpointTruncatedError("checkpoint truncated in header: " + path.string());
  }
  if (magic != kMagic) {
    throw CheckpointFormatError("not a checkpoint file (bad magic): " + path.string());
  }
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = read_pod<std::uint64_t>(in, "manifest length");
  if (header_len > (std::uint64_t{1} << 30)) {
    throw CheckpointFormatError("implausible manifest length in " + path.string());
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (in.gcount() != static_cast<std::streamsize>(header_len)) {
    throw CheckpointTruncatedError("checkpoint truncated in manifest: " + path.string());
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointFormatError(std::string("unreadable checkpoint manifest: ") + e.what());
  }
  if (manifest.value("version", 0u) != kCheckpointVersion) {
    throw CheckpointVersionError("manifest version does not match container version");
  }
  if (manifest.value("dtype", "") != "f32" || manifest.value("byte_order", "") != "little") {
    throw CheckpointFormatError("checkpoint must hold little-endian f32 tensors");
  }

  const ModelConfig config = model_config_from_json(manifest.at("config"));
  if (expect) {
    if (expect->variant != config.variant) {
      throw CheckpointShapeError("checkpoint holds a " + std::string(variant_name(config.variant)) +
                                 " model but a " + std::string(variant_name(expect->variant)) + " model was expected");
    }
    if (!(*expect == config)) {
      throw CheckpointShapeError("checkpoint model config differs from the expected config");
    }
  }
  try {
    config.validate();
  } catch (const ValidationError& e) {
    throw CheckpointFormatError(std::string("invalid model config in checkpoint: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.weights = ModelWeights<float>::zeros(config);
  ckpt.vocab = manifest.value("vocab", std::vector<std::string>{});
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  if (manifest.contains("optimizer_step")) {
    ckpt.optimizer = OptimizerState{manifest["optimizer_step"].get<std::uint64_t>(),
                                    ModelWeights<float>::zeros(config), ModelWeights<float>::zeros(config)};
  }

  std::map<std::string, Mat<float>*> slots;
  auto bind = [&](ModelWeights<float>& w, const std::string& prefix) {
    w.for_each([&](const std::string& name, Mat<float>& m) { slots[prefix + name] = &m; });
  };
  bind(ckpt.weights, "");
  if (ckpt.optimizer) {
    bind(ckpt.optimizer->m, "adam.m.");
    bind(ckpt.optimizer->v, "adam.v.");
  }

  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != slots.size()) {
    throw CheckpointShapeError("checkpoint has " + std::to_string(tensors.size()) + " tensors, expected " +
                               std::to_string(slots.size()));
  }
  const std::streamoff data_start = in.tellg();
  for (const auto& t : tensors) {
    const auto name = t.at("name").get<std::string>();
    auto it = slots.find(name);
    if (it == slots.end()) {
      throw CheckpointShapeError("unexpected tensor '" + name + "' in checkpoint");
    }
    Mat<float>& m = *it->second;
    const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
    if (shape.size() != 2 || shape[0] != m.rows() || shape[1] != m.cols()) {
      throw CheckpointShapeError("tensor '" + name + "' has a shape that does not match the config");
    }
    const auto offset = t.at("offset").get<std::uint64_t>();
    in.seekg(data_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!in || in.gcount() != static_cast<std::streamsize>(m.size() * sizeof(float))) {
      throw CheckpointTruncatedError("checkpoint truncated in tensor '" + name + "'");
    }
    slots.erase(it);
  }
  return ckpt;
}

}  // namespace ilm
