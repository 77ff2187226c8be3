#include "mtaf/evalpipe.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mtaf::evalpipe {

using nlohmann::json;

RatedAffect rated_affect_from_string(std::string_view s) {
  if (s == "excited") return RatedAffect::excited;
  if (s == "frustrated") return RatedAffect::frustrated;
  if (s == "indifferent") return RatedAffect::indifferent;
  throw DataError("unknown rated affect: " + std::string(s));
}

std::string to_string(RatedAffect a) {
  switch (a) {
    case RatedAffect::excited: return "excited";
    case RatedAffect::frustrated: return "frustrated";
    case RatedAffect::indifferent: return "indifferent";
  }
  throw UsageError("invalid rated affect");
}

namespace {

void check_scale(const std::optional<int>& v, int lo, int hi, const char* what) {
  if (v && (*v < lo || *v > hi))
    throw DataError(std::string(what) + " answer " + std::to_string(*v) + " outside [" +
                    std::to_string(lo) + ", " + std::to_string(hi) + "]");
}

}  // namespace

void RatingRecord::validate() const {
  if (stage != 1 && stage != 2) throw DataError("rating stage must be 1 or 2");
  if (stage == 1) {
    if (nonsensical) {
      if (typicality || offensiveness)
        throw DataError("nonsensical rating must skip typicality and offensiveness (utterance " +
                        utterance_id + ")");
    } else {
      if (!typicality || !offensiveness)
        throw DataError("stage-1 rating missing typicality or offensiveness (utterance " +
                        utterance_id + ")");
    }
    check_scale(typicality, 1, 5, "typicality");
    check_scale(offensiveness, 1, 5, "offensiveness");
    check_scale(forwardness, 1, 5, "forwardness");
    if (affect_class || strength)
      throw DataError("stage-1 rating carries stage-2 answers (utterance " + utterance_id + ")");
  } else {
    if (!affect_class) throw DataError("stage-2 rating missing affect class (utterance " +
                                       utterance_id + ")");
    if (*affect_class == RatedAffect::indifferent) {
      if (strength)
        throw DataError("indifferent rating must not carry a strength (utterance " +
                        utterance_id + ")");
    } else {
      if (!strength)
        throw DataError("excited/frustrated rating requires a strength (utterance " +
                        utterance_id + ")");
    }
    check_scale(strength, 1, 4, "strength");
    if (typicality || offensiveness || forwardness || nonsensical)
      throw DataError("stage-2 rating carries stage-1 answers (utterance " + utterance_id + ")");
  }
}

void RatingStore::add(RatingRecord r) {
  r.validate();
  records.push_back(std::move(r));
}

RatingStore RatingStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open rating file: " + path);
  RatingStore store;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw DataError("malformed rating record at line " + std::to_string(line_no));
    RatingRecord r;
    try {
      r.stage = j.at("stage").get<int>();
      r.task_id = j.at("task_id").get<std::string>();
      r.rater_id = j.at("rater_id").get<std::string>();
      r.utterance_id = j.at("utterance_id").get<std::string>();
      if (j.contains("nonsensical")) r.nonsensical = j.at("nonsensical").get<bool>();
      if (j.contains("typicality") && !j.at("typicality").is_null())
        r.typicality = j.at("typicality").get<int>();
      if (j.contains("offensiveness") && !j.at("offensiveness").is_null())
        r.offensiveness = j.at("offensiveness").get<int>();
      if (j.contains("forwardness") && !j.at("forwardness").is_null())
        r.forwardness = j.at("forwardness").get<int>();
      if (j.contains("affect_class") && !j.at("affect_class").is_null())
        r.affect_class = rated_affect_from_string(j.at("affect_class").get<std::string>());
      if (j.contains("strength") && !j.at("strength").is_null())
        r.strength = j.at("strength").get<int>();
    } catch (const json::exception& e) {
      throw DataError("bad rating record at line " + std::to_string(line_no) + ": " + e.what());
    }
    try {
      store.add(std::move(r));
    } catch (const DataError& e) {
      throw DataError(std::string(e.what()) + " at line " + std::to_string(line_no));
    }
  }
  return store;
}

void RatingStore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write rating file: " + path);
  for (const auto& r : records) {
    json j{{"stage", r.stage},
           {"task_id", r.task_id},
           {"rater_id", r.rater_id},
           {"utterance_id", r.utterance_id}};
    if (r.stage == 1) {
      j["nonsensical"] = r.nonsensical;
      if (r.typicality) j["typicality"] = *r.typicality;
      if (r.offensiveness) j["offensiveness"] = *r.offensiveness;
      if (r.forwardness) j["forwardness"] = *r.forwardness;
    } else {
      j["affect_class"] = to_string(*r.affect_class);
      if (r.strength) j["strength"] = *r.strength;
    }
    out << j.dump() << "\n";
  }
}

int combine_affect(RatedAffect affect, std::optional<int> strength) {
  if (affect == RatedAffect::indifferent) {
    if (strength) throw DataError("indifferent takes no strength");
    return 0;
  }
  if (!strength) throw DataError("strength required for " + to_string(affect));
  if (*strength < 1 || *strength > 4)
    throw DataError("strength " + std::to_string(*strength) + " outside [1, 4]");
  return affect == RatedAffect::excited ? *strength : -*strength;
}

std::vector<RatingTask> build_tasks(const std::vector<std::string>& utterance_ids, int stage) {
  std::vector<RatingTask> tasks;
  if (utterance_ids.empty()) return tasks;
  constexpr size_t kTaskSize = 5;
  for (size_t start = 0; start < utterance_ids.size(); start += kTaskSize) {
    RatingTask task;
    task.stage = stage;
    task.task_id = "s" + std::to_string(stage) + "_t" + std::to_string(start / kTaskSize);
    size_t end = std::min(utterance_ids.size(), start + kTaskSize);
    for (size_t i = start; i < end; ++i) task.utterance_ids.push_back(utterance_ids[i]);
    // cycle earlier utterances into the remaining slots, preferring ones not
    // already in this task
    size_t cursor = 0;
    while (task.utterance_ids.size() < kTaskSize) {
      const std::string& cand = utterance_ids[cursor % utterance_ids.size()];
      bool fresh = std::find(task.utterance_ids.begin(), task.utterance_ids.end(), cand) ==
                   task.utterance_ids.end();
      if (fresh || cursor >= utterance_ids.size()) task.utterance_ids.push_back(cand);
      ++cursor;
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

bool AggregateResult::is_deficient(const std::string& utterance_id) const {
  for (const auto& d : deficits)
    if (d.utterance_id == utterance_id) return true;
  return false;
}

AggregateResult aggregate(const RatingStore& store, const std::set<std::string>& exclusions) {
  constexpr size_t kQuorum = 5;

  // first five non-excluded raters per (utterance, stage), arrival order
  std::vector<std::string> utterance_order;
  std::map<std::string, std::vector<const RatingRecord*>> stage1, stage2;
  for (const auto& r : store.records) {
    if (exclusions.count(r.rater_id)) continue;
    auto& bucket = (r.stage == 1 ? stage1 : stage2)[r.utterance_id];
    bool seen = false;
    for (const auto* prev : bucket)
      if (prev->rater_id == r.rater_id) seen = true;
    if (seen) continue;  // one vote per rater per utterance and stage
    if (bucket.size() < kQuorum) bucket.push_back(&r);
    if (std::find(utterance_order.begin(), utterance_order.end(), r.utterance_id) ==
        utterance_order.end())
      utterance_order.push_back(r.utterance_id);
  }

  AggregateResult result;
  for (const auto& uid : utterance_order) {
    const auto& s1 = stage1[uid];
    const auto& s2 = stage2[uid];
    bool ok = true;
    if (s1.size() < kQuorum) {
      result.deficits.push_back({uid, 1, kQuorum - s1.size()});
      ok = false;
    }
    if (s2.size() < kQuorum) {
      result.deficits.push_back({uid, 2, kQuorum - s2.size()});
      ok = false;
    }
    if (!ok) continue;

    AggregatedRating agg;
    // typicality: nonsensical votes enter the mean as 0
    double typ_sum = 0.0;
    double off_sum = 0.0, fwd_sum = 0.0;
    size_t off_n = 0, fwd_n = 0;
    for (const auto* r : s1) {
      typ_sum += r->nonsensical ? 0.0 : static_cast<double>(*r->typicality);
      if (!r->nonsensical) {
        off_sum += static_cast<double>(*r->offensiveness);
        ++off_n;
        if (r->forwardness) {
          fwd_sum += static_cast<double>(*r->forwardness);
          ++fwd_n;
        }
      }
    }
    agg.typicality.mean = typ_sum / static_cast<double>(kQuorum);
    agg.typicality.n_valid = kQuorum;
    if (off_n > 0) agg.offensiveness.mean = off_sum / static_cast<double>(off_n);
    agg.offensiveness.n_valid = off_n;
    if (fwd_n > 0) agg.forwardness.mean = fwd_sum / static_cast<double>(fwd_n);
    agg.forwardness.n_valid = fwd_n;

    double aff_sum = 0.0;
    for (const auto* r : s2) aff_sum += combine_affect(*r->affect_class, r->strength);
    agg.affect.mean = aff_sum / static_cast<double>(kQuorum);
    agg.affect.n_valid = kQuorum;

    result.ratings.emplace(uid, std::move(agg));
  }
  return result;
}

namespace {

// The answer a rater gave for one question on one record, encoded so that
// "identical across utterances" is a plain string comparison. Empty means
// the question was not answered on that record.
std::string answer_key(const RatingRecord& r, Question q) {
  switch (q) {
    case Question::typicality:
      return r.stage == 1 && r.typicality ? std::to_string(*r.typicality) : "";
    case Question::offensiveness:
      return r.stage == 1 && r.offensiveness ? std::to_string(*r.offensiveness) : "";
    case Question::forwardness:
      return r.stage == 1 && r.forwardness ? std::to_string(*r.forwardness) : "";
    case Question::nonsensical:
      return r.stage == 1 ? (r.nonsensical ? "1" : "0") : "";
    case Question::affect:
      return r.stage == 2 && r.affect_class
                 ? std::to_string(combine_affect(*r.affect_class, r.strength))
                 : "";
  }
  return "";
}

int question_stage(Question q) { return q == Question::affect ? 2 : 1; }

}  // namespace

std::vector<std::string> flag_unreliable(const RatingStore& store, const FlagPolicy& policy) {
  if (policy.min_tasks < 2) throw UsageError("flag policy requires min_tasks >= 2");

  std::map<std::string, std::vector<const RatingRecord*>> by_rater;
  std::vector<std::string> rater_order;
  for (const auto& r : store.records) {
    if (!by_rater.count(r.rater_id)) rater_order.push_back(r.rater_id);
    by_rater[r.rater_id].push_back(&r);
  }

  std::vector<std::string> flagged;
  for (const auto& rater : rater_order) {
    const auto& records = by_rater[rater];
    bool repetitive = false;
    for (Question q : policy.questions) {
      int stage = question_stage(q);
      std::set<std::string> tasks;
      std::set<std::string> answers;
      bool answered_everywhere = true;
      for (const auto* r : records) {
        if (r->stage != stage) continue;
        tasks.insert(r->task_id);
        std::string key = answer_key(*r, q);
        if (key.empty()) {
          answered_everywhere = false;
          break;
        }
        answers.insert(key);
      }
      if (answered_everywhere && tasks.size() >= policy.min_tasks && answers.size() == 1) {
        repetitive = true;
        break;
      }
    }
    if (repetitive) flagged.push_back(rater);
  }
  return flagged;
}

RatingStore simulate_raters(const std::vector<UtteranceTruth>& truths, const NoiseModel& noise,
                            size_t n_raters, uint64_t seed) {
  if (noise.max_abs_dev < 0) throw UsageError("noise deviation must be >= 0");
  Rng rng(seed);

  std::map<std::string, const UtteranceTruth*> truth_of;
  std::vector<std::string> ids;
  for (const auto& t : truths) {
    truth_of[t.utterance_id] = &t;
    ids.push_back(t.utterance_id);
  }

  auto noisy = [&](int truth, int lo, int hi) {
    int delta = noise.max_abs_dev == 0 ? 0 : rng.uniform_int(-noise.max_abs_dev, noise.max_abs_dev);
    return std::clamp(truth + delta, lo, hi);
  };

  RatingStore store;
  for (int stage : {1, 2}) {
    for (const auto& task : build_tasks(ids, stage)) {
      for (size_t rater = 0; rater < n_raters; ++rater) {
        for (const auto& uid : task.utterance_ids) {
          const UtteranceTruth& t = *truth_of.at(uid);
          RatingRecord r;
          r.stage = stage;
          r.task_id = task.task_id;
          r.rater_id = "sim_r" + std::to_string(rater);
          r.utterance_id = uid;
          if (stage == 1) {
            r.nonsensical = false;
            r.typicality = noisy(t.typicality, 1, 5);
            r.offensiveness = noisy(t.offensiveness, 1, 5);
            if (t.forwardness) r.forwardness = noisy(*t.forwardness, 1, 5);
          } else {
            int combined = noisy(t.affect, -4, 4);
            if (combined == 0) {
              r.affect_class = RatedAffect::indifferent;
            } else if (combined > 0) {
              r.affect_class = RatedAffect::excited;
              r.strength = combined;
            } else {
              r.affect_class = RatedAffect::frustrated;
              r.strength = -combined;
            }
          }
          store.add(std::move(r));
        }
      }
    }
  }
  return store;
}

}  // namespace mtaf::evalpipe
