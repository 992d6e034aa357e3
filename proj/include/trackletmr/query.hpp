#pragma once

#include <string>

#include "trackletmr/core.hpp"

namespace tmr {

// Grammar: CLAUSE ("and" CLAUSE)*, CLAUSE := SUBJECT PREDICATE OBJECT |
// SUBJECT. Tokens are lowercase words ([a-z0-9_], starting with a letter);
// multiword classes join with underscores. Stop-words {a, an, the} are
// stripped before parsing. Objects deduplicate in first-appearance order;
// identical edges deduplicate. Throws GrammarError with the offending token's
// position in the original text.
QueryGraph parse_query(const std::string& text);

// Every object as a single-token clause in graph order, then every edge.
// parse_query(canonical_text(g)) == g for any valid graph.
std::string canonical_text(const QueryGraph& graph);

}  // namespace tmr
