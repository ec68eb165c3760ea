#include <algorithm>

#include "octc/model.hpp"

namespace octc {

void ModelConfig::validate() const {
  const auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (d_model < 1 || heads < 1 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if (prompt_dim < 1 || prompt_heads < 1 || prompt_dim % prompt_heads != 0) {
    fail("prompt_dim must be divisible by prompt_heads");
  }
  if (!std::is_sorted(inter_layers.begin(), inter_layers.end()) ||
      std::adjacent_find(inter_layers.begin(), inter_layers.end()) != inter_layers.end()) {
    fail("inter_layers must be strictly ascending");
  }
  for (int s : inter_layers)
    if (s < 1 || s > num_layers - 1) fail("inter_layers must lie in [1, N-1]");
  if (num_asr_layers < 0 || num_asr_layers > static_cast<int>(inter_layers.size())) {
    fail("num_asr_layers must be within [0, |S|]");
  }
  for (int t : inject_layers)
    if (t < 1 || t > num_layers) fail("inject_layers must lie in [1, N]");
  if (prompt_layers < 0) fail("prompt_layers must be >= 0");
  if (cg_hidden < 1 || prompt_ffn < 1) fail("hidden sizes must be positive");
  if (conv_kernel < 1 || conv_kernel % 2 == 0) fail("conv_kernel must be odd");
  if (downsample < 1 || (downsample & (downsample - 1)) != 0) fail("downsample must be a power of two");
  if (feature_dim < 1) fail("feature_dim must be positive");
  if (vocab_size < 2) fail("vocab_size must be set");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"num_layers", num_layers},
          {"d_model", d_model},
          {"heads", heads},
          {"inter_layers", inter_layers},
          {"num_asr_layers", num_asr_layers},
          {"inject_layers", inject_layers},
          {"prompt_layers", prompt_layers},
          {"prompt_dim", prompt_dim},
          {"prompt_heads", prompt_heads},
          {"prompt_ffn", prompt_ffn},
          {"cg_hidden", cg_hidden},
          {"conv_kernel", conv_kernel},
          {"downsample", downsample},
          {"feature_dim", feature_dim},
          {"vocab_size", vocab_size},
          {"self_conditioning", self_conditioning},
          {"asr_only_task", asr_only_task == AsrOnlyTaskToken::Echo ? "echo" : "asr"}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  const auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("num_layers", c.num_layers);
  get("d_model", c.d_model);
  get("heads", c.heads);
  get("inter_layers", c.inter_layers);
  get("num_asr_layers", c.num_asr_layers);
  get("inject_layers", c.inject_layers);
  get("prompt_layers", c.prompt_layers);
  get("prompt_dim", c.prompt_dim);
  get("prompt_heads", c.prompt_heads);
  get("prompt_ffn", c.prompt_ffn);
  get("cg_hidden", c.cg_hidden);
  get("conv_kernel", c.conv_kernel);
  get("downsample", c.downsample);
  get("feature_dim", c.feature_dim);
  get("vocab_size", c.vocab_size);
  get("self_conditioning", c.self_conditioning);
  if (j.contains("asr_only_task")) {
    const auto v = j.at("asr_only_task").get<std::string>();
    if (v == "echo") c.asr_only_task = AsrOnlyTaskToken::Echo;
    else if (v == "asr") c.asr_only_task = AsrOnlyTaskToken::ForceAsr;
    else throw std::invalid_argument("model config: asr_only_task must be 'echo' or 'asr'");
  }
  const auto known = c.to_json();
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument("unknown model field: " + key);
  }
  return c;
}

}  // namespace octc
