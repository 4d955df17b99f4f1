#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "pfnl/objective.h"
#include "pfnl/params.h"

namespace pfnl {

enum class LrSchedule { kConstant, kCosine };

struct TrainConfig {
  int episodes = 300;
  int way = 5;
  int shot = 4;
  int query = 4;
  double lr_text = 1e-3;
  double lr_vision = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-2;
  std::uint64_t seed = 0;
  Hyperparams hyper;
  bool reweight = true;
  int reweight_rounds = 2;
  int styles = 8;
  int layers = 1;
  int hidden = 0;
  LrSchedule schedule = LrSchedule::kConstant;
  double train_noise = 0.0;

  void validate() const;
  ArchConfig arch(int dim) const;
};

using KeyValues = std::map<std::string, std::string>;

// `key=value` per line; blank lines and lines starting with '#' are skipped.
KeyValues parse_key_values(const std::string& text);

// Sorted `key=value` lines with round-trippable number formatting.
std::string to_canonical_text(const TrainConfig& config);
KeyValues to_key_values(const TrainConfig& config);
// Starts from defaults and applies `kv`. Unknown keys and malformed values
// throw ConfigError.
TrainConfig config_from_key_values(const KeyValues& kv);

std::string format_double(double v);

}  // namespace pfnl
