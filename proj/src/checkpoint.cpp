#include "flns/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include "flns/binary_io.hpp"

namespace flns {

namespace {
constexpr std::string_view kModelMagic = "FLNSMODL";
}

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIoError, "short write to " + path);
}

std::vector<char> serialize_model(const TransformerModel& model) {
  BinaryWriter w;
  w.magic(kModelMagic);
  w.scalar(kModelFormatVersion);
  w.string(config_to_json(model.config));
  const auto& entries = model.tokenizer.entries();
  w.scalar(static_cast<std::uint32_t>(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    w.scalar(static_cast<std::uint8_t>(model.tokenizer.special_flags()[i] ? 1 : 0));
    w.string(entries[i]);
  }
  model.weights.visit([&](const std::string&, const Matrix<float>& m) {
    w.floats(m.data(), static_cast<std::size_t>(m.size()));
  });
  return w.bytes();
}

TransformerModel deserialize_model(std::vector<char> bytes) {
  BinaryReader r(std::move(bytes));
  r.expect_magic(kModelMagic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != kModelFormatVersion) {
    throw Error(ErrorCode::kUnsupportedFormat, "model checkpoint version " + std::to_string(version) +
                                                   ", reader supports " + std::to_string(kModelFormatVersion));
  }
  ModelConfig config;
  try {
    config = config_from_json(r.string());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kCorruptCheckpoint) throw;
    throw Error(ErrorCode::kCorruptCheckpoint, e.what());
  }
  const auto count = r.scalar<std::uint32_t>();
  if (count != static_cast<std::uint32_t>(config.d_vocab)) {
    throw Error(ErrorCode::kCorruptCheckpoint, "tokenizer table size does not match d_vocab");
  }
  std::vector<std::string> entries;
  std::vector<bool> specials;
  for (std::uint32_t i = 0; i < count; ++i) {
    specials.push_back(r.scalar<std::uint8_t>() != 0);
    entries.push_back(r.string());
  }
  TransformerModel model;
  model.config = config;
  try {
    model.tokenizer = Tokenizer(std::move(entries), std::move(specials));
  } catch (const Error& e) {
    throw Error(ErrorCode::kCorruptCheckpoint, e.what());
  }
  model.weights = Weights<float>::zeros(config);
  model.weights.visit([&](const std::string&, Matrix<float>& m) {
    r.floats(m.data(), static_cast<std::size_t>(m.size()));
  });
  r.expect_end();
  return model;
}

void save_model(const TransformerModel& model, const std::string& path) {
  write_file(path, serialize_model(model));
}

TransformerModel load_model(const std::string& path) { return deserialize_model(read_file(path)); }

}  // namespace flns
