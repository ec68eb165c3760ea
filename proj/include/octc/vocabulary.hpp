#pragma once

#include <string>

#include "json.hpp"

namespace octc {

enum class TokenKind { Blank, Symbol, Language, NoLanguage, Asr, Translate, NoPrompt };

/// Token inventory. Layout: blank = 0, then each language's symbols in a
/// contiguous block, then <lang-k> x K, <nolang>, <asr>, <st-k> x K, <na>.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(int num_languages, int symbols_per_language);

  int num_languages() const { return num_languages_; }
  int symbols_per_language() const { return symbols_per_language_; }
  int size() const { return 1 + num_languages_ * symbols_per_language_ + 2 * num_languages_ + 3; }

  static constexpr int blank() { return 0; }
  int symbol(int lang, int index) const;
  int symbol_begin(int lang) const { return 1 + lang * symbols_per_language_; }
  int symbol_end(int lang) const { return symbol_begin(lang) + symbols_per_language_; }
  int lang_token(int lang) const;
  int nolang() const { return 1 + num_languages_ * symbols_per_language_ + num_languages_; }
  int asr() const { return nolang() + 1; }
  int st_token(int lang) const;
  int na() const { return asr() + 1 + num_languages_; }

  TokenKind kind(int id) const;
  /// Language index of a symbol, <lang-k> or <st-k> token; -1 otherwise.
  int language_of(int id) const;
  bool is_symbol(int id) const { return kind(id) == TokenKind::Symbol; }
  bool is_special(int id) const;
  bool is_task(int id) const { auto k = kind(id); return k == TokenKind::Asr || k == TokenKind::Translate; }
  std::string name(int id) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  void check(int id) const;
  int num_languages_ = 0;
  int symbols_per_language_ = 0;
};

}  // namespace octc
