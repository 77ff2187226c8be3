#include "mtaf/model.hpp"

namespace mtaf::model {

Variant variant_from_string(std::string_view s) {
  if (s == "lm_only") return Variant::lm_only;
  if (s == "multitask") return Variant::multitask;
  throw DataError("unknown model variant: " + std::string(s));
}

std::string to_string(Variant v) {
  return v == Variant::lm_only ? "lm_only" : "multitask";
}

AffectMode affect_mode_from_string(std::string_view s) {
  if (s == "regression") return AffectMode::regression;
  if (s == "classification") return AffectMode::classification;
  throw DataError("unknown affect mode: " + std::string(s));
}

std::string to_string(AffectMode m) {
  return m == AffectMode::regression ? "regression" : "classification";
}

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0)
    throw UsageError("model dimensions must be positive");
  if (d_model % n_heads != 0)
    throw UsageError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                     std::to_string(n_heads) + ")");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw UsageError("dropout_rate must lie in [0, 1)");
  if (affect_mode == AffectMode::classification && affect_classes < 2)
    throw UsageError("classification affect head needs at least 2 classes");
}

}  // namespace mtaf::model
