#include "octc/vocabulary.hpp"

#include <stdexcept>

namespace octc {

Vocabulary::Vocabulary(int num_languages, int symbols_per_language)
    : num_languages_(num_languages), symbols_per_language_(symbols_per_language) {
  if (num_languages < 2) throw std::invalid_argument("vocabulary needs at least two languages");
  if (symbols_per_language < 1) throw std::invalid_argument("vocabulary needs symbols per language");
  if (num_languages > 255) throw std::invalid_argument("too many languages");
  if (size() > 65535) throw std::invalid_argument("vocabulary does not fit 16-bit ids");
}

void Vocabulary::check(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
}

int Vocabulary::symbol(int lang, int index) const {
  if (lang < 0 || lang >= num_languages_ || index < 0 || index >= symbols_per_language_) {
    throw std::out_of_range("symbol index out of range");
  }
  return symbol_begin(lang) + index;
}

int Vocabulary::lang_token(int lang) const {
  if (lang < 0 || lang >= num_languages_) throw std::out_of_range("language out of range");
  return 1 + num_languages_ * symbols_per_language_ + lang;
}

int Vocabulary::st_token(int lang) const {
  if (lang < 0 || lang >= num_languages_) throw std::out_of_range("language out of range");
  return asr() + 1 + lang;
}

TokenKind Vocabulary::kind(int id) const {
  check(id);
  if (id == 0) return TokenKind::Blank;
  if (id < lang_token(0)) return TokenKind::Symbol;
  if (id < nolang()) return TokenKind::Language;
  if (id == nolang()) return TokenKind::NoLanguage;
  if (id == asr()) return TokenKind::Asr;
  if (id < na()) return TokenKind::Translate;
  return TokenKind::NoPrompt;
}

int Vocabulary::language_of(int id) const {
  switch (kind(id)) {
    case TokenKind::Symbol: return (id - 1) / symbols_per_language_;
    case TokenKind::Language: return id - lang_token(0);
    case TokenKind::Translate: return id - st_token(0);
    default: return -1;
  }
}

bool Vocabulary::is_special(int id) const {
  const auto k = kind(id);
  return k != TokenKind::Blank && k != TokenKind::Symbol;
}

std::string Vocabulary::name(int id) const {
  switch (kind(id)) {
    case TokenKind::Blank: return "<blank>";
    case TokenKind::Symbol: {
      const int lang = language_of(id);
      return "s" + std::to_string(lang) + "_" + std::to_string(id - symbol_begin(lang));
    }
    case TokenKind::Language: return "<lang-" + std::to_string(language_of(id)) + ">";
    case TokenKind::NoLanguage: return "<nolang>";
    case TokenKind::Asr: return "<asr>";
    case TokenKind::Translate: return "<st-" + std::to_string(language_of(id)) + ">";
    case TokenKind::NoPrompt: return "<na>";
  }
  return "?";
}

nlohmann::json Vocabulary::to_json() const {
  return {{"num_languages", num_languages_},
          {"symbols_per_language", symbols_per_language_},
          {"size", size()},
          {"blank", blank()},
          {"nolang", nolang()},
          {"asr", asr()},
          {"na", na()}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v(j.at("num_languages").get<int>(), j.at("symbols_per_language").get<int>());
  if (j.contains("size") && j.at("size").get<int>() != v.size()) {
    throw std::invalid_argument("vocabulary size in header disagrees with layout");
  }
  return v;
}

}  // namespace octc
