#include "octc/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace octc {

namespace {

constexpr char kMagic[4] = {'O', 'C', 'K', 'P'};
constexpr std::uint8_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  std::uint64_t bits = 0;
  if constexpr (std::is_floating_point_v<T>) {
    std::memcpy(&bits, &v, sizeof(T));
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Cursor {
 public:
  explicit Cursor(std::string_view s) : s_(s) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    if constexpr (std::is_floating_point_v<T>) {
      T v;
      std::memcpy(&v, &bits, sizeof(T));
      return v;
    } else {
      return static_cast<T>(bits);
    }
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto v = s_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) {
      throw CheckpointFormatError("truncated checkpoint at byte offset " + std::to_string(pos_));
    }
  }
  std::string_view s_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const CheckpointData& data) {
  std::string out(kMagic, 4);
  put(out, kVersion);
  nlohmann::json header = {{"config", data.config.to_json()}, {"vocabulary", data.vocab.to_json()}};
  for (const auto& [k, v] : data.header_extra.items()) header[k] = v;
  const std::string text = header.dump();
  put(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  put(out, static_cast<std::uint32_t>(data.tensors.size()));
  for (const auto& [name, t] : data.tensors) {
    put(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put(out, static_cast<std::uint64_t>(d));
    for (double v : t.values()) put(out, v);
  }
  return out;
}

CheckpointData parse_checkpoint(std::string_view bytes) {
  Cursor c(bytes);
  if (bytes.size() < 4 || c.take(4) != std::string_view(kMagic, 4)) {
    throw CheckpointFormatError("not a checkpoint: bad magic bytes");
  }
  if (const auto v = c.get<std::uint8_t>(); v != kVersion) {
    throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(v));
  }
  CheckpointData data;
  const auto hlen = c.get<std::uint32_t>();
  try {
    auto header = nlohmann::json::parse(c.take(hlen));
    data.config = ModelConfig::from_json(header.at("config"));
    data.vocab = Vocabulary::from_json(header.at("vocabulary"));
    header.erase("config");
    header.erase("vocabulary");
    data.header_extra = std::move(header);
  } catch (const CheckpointFormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointFormatError(std::string("bad checkpoint header: ") + e.what());
  }
  const auto count = c.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = c.get<std::uint32_t>();
    std::string name(c.take(nlen));
    const auto rank = c.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(c.get<std::uint64_t>());
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = c.get<double>();
    data.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!c.done()) throw CheckpointFormatError("trailing bytes in checkpoint");
  return data;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  const std::string bytes = serialize_checkpoint(data);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

SpeechModel model_from_checkpoint(const CheckpointData& data) {
  const ParameterSet shapes = init_parameters(data.config, 0);
  ParameterSet params;
  for (const auto& [name, _] : shapes) {
    auto it = data.tensors.find(name);
    if (it == data.tensors.end()) throw CheckpointFormatError("checkpoint lacks parameter " + name);
    params.emplace(name, it->second);
  }
  return SpeechModel(data.config, data.vocab, std::move(params));
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace octc
