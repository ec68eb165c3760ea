#pragma once

#include <filesystem>
#include <stdexcept>

#include "json.hpp"
#include "octc/model.hpp"

namespace octc {

class CheckpointFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Contents of an OCKP file: a JSON header and named double tensors.
/// Model parameters are stored under their own names; optimizer state and
/// other extras use prefixed names chosen by the caller.
struct CheckpointData {
  ModelConfig config;
  Vocabulary vocab;
  nlohmann::json header_extra = nlohmann::json::object();
  ParameterSet tensors;
};

std::string serialize_checkpoint(const CheckpointData& data);
CheckpointData parse_checkpoint(std::string_view bytes);
void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Rebuilds a model from the parameter entries of a checkpoint.
SpeechModel model_from_checkpoint(const CheckpointData& data);

/// FNV-1a 64-bit digest of a file, hex encoded.
std::string file_digest(const std::filesystem::path& path);

}  // namespace octc
