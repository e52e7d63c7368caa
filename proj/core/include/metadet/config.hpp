#pragma once

#include <map>
#include <string>
#include <vector>

#include "metadet/synth.hpp"
#include "metadet/training.hpp"

namespace metadet {

// Full experiment configuration: architecture, schedules, data recipe,
// evaluation protocol, and artifact paths. Every field is reachable as a
// dotted "key = value" line in a plain-text config file; unknown keys are
// hard errors so a typo can never silently fall back to a default.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth;
  std::vector<int> eval_shots = {1, 2, 3, 5, 10};
  std::vector<int> eval_budgets = {5, 50, 100, 500, 1000};
  int proposals_per_class = 100;  // per-class budget at test time
  int workers = 1;                // evaluation worker threads
  std::string data_dir = "data";
  std::string out_dir = "out";
};

// Config file syntax: one "key = value" per line; blank lines and lines
// starting with '#' are skipped, as is anything after " #" (comment must
// follow whitespace so '#' can appear inside values). Keys keep file order.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);

// Applies a single dotted key. Throws listing the key on unknown names or
// unparseable values.
void set_config_key(RunConfig& rc, const std::string& key, const std::string& value);

// Parses and applies a whole file in line order.
void apply_config_file(RunConfig& rc, const std::string& path);

// Serializes every key in sorted order. Numbers are emitted in shortest
// round-trip form, so applying the dump reproduces the config exactly.
std::string config_to_text(const RunConfig& rc);

// Cross-field consistency: anchor strides must equal the backbone stride,
// the support crop must be stride-divisible, counts positive, thresholds in
// range. Throws naming the offending keys.
void validate_config(const RunConfig& rc);

}  // namespace metadet
