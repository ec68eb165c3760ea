#include <algorithm>
#include <stdexcept>

#include "octc/eval.hpp"

namespace octc {

EditCounts edit_distance(std::span<const int> ref, std::span<const int> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({sub, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  EditCounts e;
  e.distance = at(n, m);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++e.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++e.deletions;
      --i;
    } else {
      ++e.insertions;
      --j;
    }
  }
  return e;
}

void ErrorTally::add(const EditCounts& e, std::size_t ref_len) {
  errors += e.distance;
  ref_tokens += ref_len;
  ++utterances;
}

double ErrorTally::rate() const {
  return ref_tokens == 0 ? 0.0 : static_cast<double>(errors) / static_cast<double>(ref_tokens);
}

EvalTask parse_eval_task(const std::string& s) {
  if (s == "asr") return EvalTask::Asr;
  if (s == "st") return EvalTask::Translate;
  if (s == "all") return EvalTask::All;
  throw std::invalid_argument("unknown task '" + s + "' (expected asr, st or all)");
}

std::string to_string(EvalTask t) {
  switch (t) {
    case EvalTask::Asr: return "asr";
    case EvalTask::Translate: return "st";
    case EvalTask::All: return "all";
  }
  return "?";
}

}  // namespace octc
