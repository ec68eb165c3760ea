#include <cstring>
#include <fstream>
#include <sstream>

#include "octc/corpus.hpp"

namespace octc {

namespace {

constexpr char kMagic[4] = {'O', 'C', 'T', 'C'};
constexpr std::uint8_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    le(bits);
  }
  void ids(const std::vector<int>& v) {
    if (v.size() > 0xffff) throw std::length_error("token sequence too long for corpus format");
    le(static_cast<std::uint16_t>(v.size()));
    for (int id : v) le(static_cast<std::uint16_t>(id));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == in_.size(); }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  float f32(const char* what) {
    const auto bits = le<std::uint32_t>(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::vector<int> ids(const char* what) {
    const auto n = le<std::uint16_t>(what);
    std::vector<int> v(n);
    for (auto& id : v) id = le<std::uint16_t>(what);
    return v;
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw CorpusFormatError(std::string("truncated corpus while reading ") + what, pos_);
    }
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace

CorpusFormatError::CorpusFormatError(const std::string& what, std::size_t off)
    : std::runtime_error(what + " at byte offset " + std::to_string(off)), offset(off) {}

std::string serialize_corpus(const Corpus& corpus) {
  Writer w;
  w.bytes(kMagic, 4);
  w.le(kVersion);
  const nlohmann::json header{{"spec", corpus.spec.to_json()},
                              {"vocabulary", corpus.vocab.to_json()},
                              {"split", corpus.split}};
  const std::string text = header.dump();
  w.le(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.le(static_cast<std::uint32_t>(corpus.records.size()));
  for (const UtteranceRecord& r : corpus.records) {
    w.le(r.id);
    w.le(static_cast<std::uint8_t>(r.language));
    w.le(static_cast<std::uint32_t>(r.features.rows()));
    w.le(static_cast<std::uint16_t>(r.features.cols()));
    for (double v : r.features.values()) w.f32(static_cast<float>(v));
    w.ids(r.transcript);
    w.le(static_cast<std::uint8_t>(r.translations.size()));
    for (const auto& [lang, toks] : r.translations) {
      w.le(static_cast<std::uint8_t>(lang));
      w.ids(toks);
    }
    w.le(static_cast<std::uint8_t>(r.previous_transcript ? 1 : 0));
    if (r.previous_transcript) w.ids(*r.previous_transcript);
  }
  return w.take();
}

Corpus parse_corpus(std::string_view bytes) {
  Reader rd(bytes);
  const std::size_t magic_at = rd.offset();
  if (rd.bytes(4, "magic") != std::string_view(kMagic, 4)) {
    throw CorpusFormatError("bad corpus magic", magic_at);
  }
  const std::size_t version_at = rd.offset();
  if (const auto v = rd.le<std::uint8_t>("version"); v != kVersion) {
    throw CorpusFormatError("unsupported corpus version " + std::to_string(v), version_at);
  }
  const auto header_len = rd.le<std::uint32_t>("header length");
  const std::size_t header_at = rd.offset();
  const auto header_text = rd.bytes(header_len, "header");
  Corpus c;
  try {
    const auto header = nlohmann::json::parse(header_text);
    c.spec = CorpusSpec::from_json(header.at("spec"));
    c.vocab = Vocabulary::from_json(header.at("vocabulary"));
    c.split = header.value("split", "");
  } catch (const std::exception& e) {
    throw CorpusFormatError(std::string("bad corpus header: ") + e.what(), header_at);
  }
  const auto count = rd.le<std::uint32_t>("record count");
  c.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t rec_at = rd.offset();
    UtteranceRecord r;
    r.id = rd.le<std::uint32_t>("utterance id");
    r.language = rd.le<std::uint8_t>("language");
    const auto frames = rd.le<std::uint32_t>("frame count");
    const auto dim = rd.le<std::uint16_t>("feature dim");
    std::vector<double> feats(static_cast<std::size_t>(frames) * dim);
    for (double& v : feats) v = rd.f32("features");
    r.features = Tensor({frames, dim}, std::move(feats));
    r.transcript = rd.ids("transcript");
    const auto nt = rd.le<std::uint8_t>("translation count");
    for (int k = 0; k < nt; ++k) {
      const int lang = rd.le<std::uint8_t>("translation language");
      r.translations[lang] = rd.ids("translation");
    }
    if (rd.le<std::uint8_t>("previous flag")) r.previous_transcript = rd.ids("previous transcript");
    for (int tok : r.transcript) {
      if (tok <= 0 || tok >= c.vocab.size()) throw CorpusFormatError("token outside vocabulary", rec_at);
    }
    if (r.language >= c.vocab.num_languages()) throw CorpusFormatError("language outside vocabulary", rec_at);
    c.records.push_back(std::move(r));
  }
  if (!rd.at_end()) throw CorpusFormatError("trailing bytes after last record", rd.offset());
  return c;
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  const std::string bytes = serialize_corpus(corpus);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_corpus(ss.str());
}

}  // namespace octc
