#include "pother/vote/vote.hpp"

#include <algorithm>
#include <cmath>

namespace pother::vote {

Vote vote_from_logits(std::span<const float> logits, const patch::PatchSpec& spec) {
  if (logits.size() != core::kNumClasses) throw std::invalid_argument("expected 3 logits");
  for (float l : logits) {
    if (!std::isfinite(l)) throw std::runtime_error("non-finite logits");
  }
  Vote v;
  v.spec = spec;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (int i = 0; i < core::kNumClasses; ++i) {
    v.probs[i] = std::exp(static_cast<double>(logits[i]) - mx);
    z += v.probs[i];
  }
  int best = 0;
  for (int i = 0; i < core::kNumClasses; ++i) {
    v.probs[i] /= z;
    if (logits[i] > logits[best]) best = i;
  }
  v.predicted = core::label_from_index(best);
  return v;
}

VoteTally majority_vote(const std::vector<Vote>& votes) {
  if (votes.empty()) throw std::invalid_argument("majority_vote: no votes");
  VoteTally t;
  t.votes = votes;
  std::array<std::vector<double>, core::kNumClasses> per_class;
  for (const auto& v : votes) {
    ++t.counts[core::to_index(v.predicted)];
    for (int i = 0; i < core::kNumClasses; ++i) per_class[i].push_back(v.probs[i]);
  }
  // Summing in sorted order keeps the tie-break independent of vote order.
  for (int i = 0; i < core::kNumClasses; ++i) {
    std::sort(per_class[i].begin(), per_class[i].end());
    double s = 0.0;
    for (double p : per_class[i]) s += p;
    t.weighted_counts[i] = s;
    t.mean_probs[i] = s / static_cast<double>(votes.size());
  }

  const int top = *std::max_element(t.counts.begin(), t.counts.end());
  int best = -1;
  int n_tied = 0;
  for (int i = 0; i < core::kNumClasses; ++i) {
    if (t.counts[i] != top) continue;
    ++n_tied;
    if (best < 0 || t.mean_probs[i] > t.mean_probs[best]) best = i;
  }
  t.tie = n_tied > 1;
  t.final = core::label_from_index(best);
  return t;
}

nlohmann::ordered_json to_json(const VoteTally& tally) {
  nlohmann::ordered_json j;
  j["final"] = std::string(core::to_string(tally.final));
  j["final_index"] = core::to_index(tally.final);
  j["counts"] = tally.counts;
  j["tie"] = tally.tie;
  j["mean_probs"] = tally.mean_probs;
  j["weighted_counts"] = tally.weighted_counts;
  auto& arr = j["votes"] = nlohmann::ordered_json::array();
  for (const auto& v : tally.votes) {
    arr.push_back({{"center_row", v.spec.center_row},
                   {"center_col", v.spec.center_col},
                   {"side", v.spec.side},
                   {"predicted", std::string(core::to_string(v.predicted))},
                   {"probs", v.probs}});
  }
  return j;
}

}  // namespace pother::vote
