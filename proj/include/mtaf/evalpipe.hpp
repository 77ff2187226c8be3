#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mtaf/common.hpp"

namespace mtaf::evalpipe {

// Stage-2 affect judgment before combination.
enum class RatedAffect { excited, frustrated, indifferent };
RatedAffect rated_affect_from_string(std::string_view s);
std::string to_string(RatedAffect a);

// One rating row as ingested; stage 1 carries the typicality/offensiveness/
// forwardness answers (skipped when nonsensical), stage 2 the affect answer.
struct RatingRecord {
  int stage = 1;
  std::string task_id;
  std::string rater_id;
  std::string utterance_id;
  // stage 1
  bool nonsensical = false;
  std::optional<int> typicality;     // 1..5, absent iff nonsensical
  std::optional<int> offensiveness;  // 1..5, absent iff nonsensical
  std::optional<int> forwardness;    // optional 1..5
  // stage 2
  std::optional<RatedAffect> affect_class;
  std::optional<int> strength;  // 1..4, absent iff indifferent
  void validate() const;
};

// Arrival-ordered store; aggregation runs on a snapshot.
struct RatingStore {
  std::vector<RatingRecord> records;
  void add(RatingRecord r);
  static RatingStore load(const std::string& path);
  void save(const std::string& path) const;
};

struct RatingTask {
  std::string task_id;
  std::vector<std::string> utterance_ids;  // exactly 5 slots
  int stage = 1;
};

// Combines the stage-2 judgment into the single [-4, 4] scale: excited adds
// the strength, frustrated negates it, indifferent maps to 0.
int combine_affect(RatedAffect affect, std::optional<int> strength);

// Consecutive chunks of five in input order; a short final chunk is padded
// by cycling earlier utterances.
std::vector<RatingTask> build_tasks(const std::vector<std::string>& utterance_ids, int stage);

struct FieldMean {
  std::optional<double> mean;
  size_t n_valid = 0;
};

struct AggregatedRating {
  FieldMean typicality;     // in [0, 5]; nonsensical votes count as 0
  FieldMean offensiveness;  // in [1, 5] over non-nonsensical raters
  FieldMean forwardness;    // in [1, 5]
  FieldMean affect;         // in [-4, 4]
};

struct Deficit {
  std::string utterance_id;
  int stage = 1;
  size_t demand = 0;  // replacement ratings needed to reach five
};

struct AggregateResult {
  std::map<std::string, AggregatedRating> ratings;
  std::vector<Deficit> deficits;
  bool is_deficient(const std::string& utterance_id) const;
};

// Per utterance and stage, the first five non-excluded raters in arrival
// order feed the means; anything short of five in either stage lands on the
// deficit list instead.
AggregateResult aggregate(const RatingStore& store, const std::set<std::string>& exclusions = {});

enum class Question { typicality, offensiveness, forwardness, nonsensical, affect };

struct FlagPolicy {
  size_t min_tasks = 2;
  std::vector<Question> questions = {Question::typicality, Question::offensiveness,
                                     Question::forwardness, Question::affect};
};

// Raters who completed at least min_tasks tasks of a stage and answered some
// question identically on every utterance of those tasks.
std::vector<std::string> flag_unreliable(const RatingStore& store, const FlagPolicy& policy = {});

// Latent per-utterance truths for the simulator; integer-valued scales.
struct UtteranceTruth {
  std::string utterance_id;
  int typicality = 3;     // 1..5
  int offensiveness = 1;  // 1..5
  std::optional<int> forwardness;  // 1..5
  int affect = 0;  // -4..4
};

struct NoiseModel {
  int max_abs_dev = 0;  // answers drawn uniformly from truth +/- this, clamped
};

// Synthetic raters: n_raters per task, each drawing every answer as
// truth + symmetric discrete noise clamped to its scale. Deterministic per
// seed. Rater ids are "sim_r<i>"; every rater rates every task.
RatingStore simulate_raters(const std::vector<UtteranceTruth>& truths, const NoiseModel& noise,
                            size_t n_raters, uint64_t seed);

}  // namespace mtaf::evalpipe
