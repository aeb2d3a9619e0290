#include "qp/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include "qp/error.hpp"

namespace qp {

namespace {
const char* kReservedTokens[] = {"<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "<action>", "<desc>"};

bool is_punct(char c) {
  return c == ',' || c == '.' || c == '!' || c == '?' || c == ';' || c == ':';
}
}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (char raw : text) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (is_punct(raw)) {
      flush();
      out.push_back(std::string(1, raw));
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const std::string& t : tokens) {
    bool attach = t.size() == 1 && is_punct(t[0]);
    if (!out.empty() && !attach) out += ' ';
    out += t;
  }
  return out;
}

std::string normalize(const std::string& text) { return join_tokens(tokenize(text)); }

Vocabulary::Vocabulary() {
  for (const char* t : kReservedTokens) add(t);
}

void Vocabulary::add(const std::string& token) {
  if (index_.count(token)) return;
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  Vocabulary v;
  std::set<std::string> words;
  for (const std::string& text : texts)
    for (const std::string& tok : tokenize(text)) words.insert(tok);
  for (const std::string& w : words) v.add(w);
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const std::string& tok : tokenize(text)) ids.push_back(id(tok));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> toks;
  toks.reserve(ids.size());
  for (int id : ids) toks.push_back(token(id));
  return join_tokens(toks);
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("vocabulary: cannot write " + path);
  f << "# qplan vocabulary v1\n";
  for (const std::string& t : tokens_) f << t << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("vocabulary: cannot open " + path);
  std::string header;
  std::getline(f, header);
  if (header != "# qplan vocabulary v1") throw DataError("vocabulary: bad header in " + path);
  Vocabulary v;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    if (lineno < kReservedCount) {
      if (line != kReservedTokens[lineno])
        throw DataError("vocabulary: reserved token mismatch at line " + std::to_string(lineno));
    } else {
      v.add(line);
    }
    ++lineno;
  }
  if (lineno < kReservedCount) throw DataError("vocabulary: truncated file " + path);
  return v;
}

}  // namespace qp
