#include "trackletmr/query.hpp"

#include <algorithm>
#include <sstream>

#include "trackletmr/errors.hpp"

namespace tmr {

namespace {

bool is_word(const std::string& tok) {
  if (tok.empty() || tok[0] < 'a' || tok[0] > 'z') return false;
  return std::all_of(tok.begin(), tok.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
  });
}

bool is_stop_word(const std::string& tok) {
  return tok == "a" || tok == "an" || tok == "the";
}

}  // namespace

QueryGraph parse_query(const std::string& text) {
  // Tokens keep their original position so errors point into the input text.
  std::vector<std::pair<std::string, std::size_t>> tokens;
  {
    std::istringstream in(text);
    std::string tok;
    std::size_t pos = 0;
    while (in >> tok) {
      if (!is_word(tok)) throw GrammarError("token is not a lowercase word: '" + tok + "'", pos);
      if (!is_stop_word(tok)) tokens.emplace_back(tok, pos);
      ++pos;
    }
    if (tokens.empty()) throw GrammarError("query has no content tokens", pos);
  }

  QueryGraph graph;
  auto object_index = [&graph](const std::string& cls) -> std::size_t {
    for (std::size_t i = 0; i < graph.objects.size(); ++i)
      if (graph.objects[i] == cls) return i;
    graph.objects.push_back(cls);
    return graph.objects.size() - 1;
  };

  std::size_t i = 0;
  while (i < tokens.size()) {
    // Clause = tokens up to the next "and" or end of input.
    std::size_t end = i;
    while (end < tokens.size() && tokens[end].first != "and") ++end;
    const std::size_t len = end - i;
    if (len == 1) {
      object_index(tokens[i].first);
    } else if (len == 3) {
      const std::size_t subject = object_index(tokens[i].first);
      const std::size_t object = object_index(tokens[i + 2].first);
      QueryEdge edge{subject, tokens[i + 1].first, object};
      if (std::find(graph.edges.begin(), graph.edges.end(), edge) == graph.edges.end())
        graph.edges.push_back(edge);
    } else if (len == 0) {
      throw GrammarError("empty clause", tokens[i >= tokens.size() ? tokens.size() - 1 : i].second);
    } else {
      throw GrammarError("clause must have 1 or 3 tokens, got " + std::to_string(len),
                         tokens[i].second);
    }
    i = end;
    if (i < tokens.size()) {
      ++i;  // skip the "and"
      if (i == tokens.size())
        throw GrammarError("dangling 'and'", tokens[i - 1].second);
    }
  }
  return graph;
}

std::string canonical_text(const QueryGraph& graph) {
  std::string out;
  for (const auto& obj : graph.objects) {
    if (!out.empty()) out += " and ";
    out += obj;
  }
  for (const auto& e : graph.edges) {
    if (!out.empty()) out += " and ";
    out += graph.objects[e.subject] + " " + e.predicate + " " + graph.objects[e.object];
  }
  return out;
}

}  // namespace tmr
