#pragma once

// Synthetic multiple-choice tasks with known label distributions q_x.
//
// Token layout: 0..K-1 are answer labels; stub position i uses its own S
// tokens K + i*S .. K + i*S + S-1, so a bigram state always knows its
// position. Every response is stub_length stub tokens then one label token.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "calpo/errors.hpp"
#include "calpo/policy.hpp"
#include "calpo/preference.hpp"
#include "calpo/rng.hpp"

namespace calpo {

enum class Split { train, validation, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw InvalidInput("unknown split '" + s + "'");
}

struct TaskSpec {
  std::size_t num_prompts = 200;
  std::size_t num_options = 4;
  std::size_t stub_length = 3;
  std::size_t stub_vocab = 2;
  double ambiguity = 0.35;
  std::size_t sft_per_prompt = 20;
  std::size_t pairs_per_prompt = 10;
  // Fractions of each prompt's examples assigned to train and validation; the rest is test.
  double train_fraction = 0.6;
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;

  // Filled by generate_tasks: q_x per prompt and its argmax option.
  std::vector<std::vector<double>> label_distributions;
  std::vector<std::size_t> argmax_options;

  std::size_t vocab_size() const { return num_options + stub_length * stub_vocab; }
  std::size_t sequence_length() const { return stub_length + 1; }
  int stub_token(std::size_t position, std::size_t i) const {
    return static_cast<int>(num_options + position * stub_vocab + i);
  }
  bool is_label(int token) const { return token >= 0 && token < static_cast<int>(num_options); }
};

struct SftExample {
  std::size_t prompt = 0;
  std::vector<int> tokens;
  Split split = Split::train;

  bool operator==(const SftExample&) const = default;
};

struct PairExample {
  PreferencePair pair;
  Split split = Split::train;

  bool operator==(const PairExample&) const = default;
};

struct GeneratedDataset {
  TaskSpec spec;
  std::vector<SftExample> sft;
  std::vector<PairExample> pairs;

  std::vector<LabeledSequence> sft_split(Split s) const {
    std::vector<LabeledSequence> out;
    for (const auto& e : sft) {
      if (e.split == s) out.push_back(LabeledSequence{e.prompt, e.tokens});
    }
    return out;
  }

  std::vector<PreferencePair> pair_split(Split s) const {
    std::vector<PreferencePair> out;
    for (const auto& e : pairs) {
      if (e.split == s) out.push_back(e.pair);
    }
    return out;
  }
};

inline void validate_spec(const TaskSpec& spec) {
  require(spec.num_prompts >= 1, "task needs at least one prompt");
  require(spec.num_options >= 2, "task needs at least two options");
  require(spec.stub_length == 0 || spec.stub_vocab >= 1, "stub_length > 0 needs a stub vocabulary");
  require(spec.ambiguity >= 0.0 && spec.ambiguity <= 1.0, "ambiguity must lie in [0,1]");
  require(spec.train_fraction > 0.0 && spec.validation_fraction >= 0.0 &&
              spec.train_fraction + spec.validation_fraction <= 1.0,
          "split fractions must be non-negative and sum to at most 1");
}

/// q_x = (1 - a) one_hot(option) + a / K.
inline std::vector<double> mixture_distribution(std::size_t option, std::size_t k, double a) {
  std::vector<double> q(k, a / static_cast<double>(k));
  q[option] += 1.0 - a;
  return q;
}

inline std::vector<int> sample_stub(const TaskSpec& spec, Rng& rng) {
  std::vector<int> s;
  s.reserve(spec.sequence_length());
  for (std::size_t i = 0; i < spec.stub_length; ++i) {
    s.push_back(spec.stub_token(i, rng.uniform_index(spec.stub_vocab)));
  }
  return s;
}

namespace detail {

// Per prompt: shuffle example slots and cut into train / validation / test.
inline std::vector<Split> assign_splits(const TaskSpec& spec, std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  const auto n_train = static_cast<std::size_t>(spec.train_fraction * static_cast<double>(n) + 0.5);
  const auto n_val = static_cast<std::size_t>(spec.validation_fraction * static_cast<double>(n) + 0.5);
  std::vector<Split> tags(n, Split::test);
  for (std::size_t r = 0; r < n; ++r) {
    if (r < n_train) {
      tags[order[r]] = Split::train;
    } else if (r < n_train + n_val) {
      tags[order[r]] = Split::validation;
    }
  }
  return tags;
}

}  // namespace detail

/// Pairs for one prompt: chosen label is the q_x-argmax option, rejected is
/// uniform over the other K - 1; stubs drawn independently for both.
inline std::vector<PreferencePair> build_preference_pairs(const TaskSpec& spec, std::size_t prompt,
                                                          std::size_t count, Rng& rng) {
  require(spec.num_options >= 2, "preference pairs need K >= 2");
  require(prompt < spec.argmax_options.size(), "unknown prompt id");
  std::vector<PreferencePair> out;
  const std::size_t best = spec.argmax_options[prompt];
  for (std::size_t i = 0; i < count; ++i) {
    PreferencePair p;
    p.context_id = prompt;
    p.preferred = sample_stub(spec, rng);
    p.preferred.push_back(static_cast<int>(best));
    p.dispreferred = sample_stub(spec, rng);
    std::size_t other = rng.uniform_index(spec.num_options - 1);
    if (other >= best) ++other;
    p.dispreferred.push_back(static_cast<int>(other));
    out.push_back(std::move(p));
  }
  return out;
}

inline GeneratedDataset generate_tasks(TaskSpec spec) {
  validate_spec(spec);
  require(spec.pairs_per_prompt == 0 || spec.pairs_per_prompt >= 2,
          "pairs_per_prompt must be 0 or at least 2");
  const std::size_t k = spec.num_options;
  Rng label_rng = Rng::derive(spec.seed, "task/q");
  spec.label_distributions.clear();
  spec.argmax_options.clear();
  for (std::size_t x = 0; x < spec.num_prompts; ++x) {
    const std::size_t opt = label_rng.uniform_index(k);
    spec.argmax_options.push_back(opt);
    spec.label_distributions.push_back(mixture_distribution(opt, k, spec.ambiguity));
  }

  GeneratedDataset ds;
  for (std::size_t x = 0; x < spec.num_prompts; ++x) {
    Rng sft_rng = Rng::derive(spec.seed, "task/sft", x);
    const auto tags = detail::assign_splits(spec, spec.sft_per_prompt, sft_rng);
    for (std::size_t i = 0; i < spec.sft_per_prompt; ++i) {
      SftExample e;
      e.prompt = x;
      e.tokens = sample_stub(spec, sft_rng);
      e.tokens.push_back(static_cast<int>(sft_rng.categorical(spec.label_distributions[x])));
      e.split = tags[i];
      ds.sft.push_back(std::move(e));
    }
  }
  ds.spec = spec;
  for (std::size_t x = 0; x < spec.num_prompts; ++x) {
    Rng pair_rng = Rng::derive(spec.seed, "task/pairs", x);
    auto pairs = build_preference_pairs(spec, x, spec.pairs_per_prompt, pair_rng);
    const auto tags = detail::assign_splits(spec, pairs.size(), pair_rng);
    for (std::size_t i = 0; i < pairs.size(); ++i) ds.pairs.push_back(PairExample{pairs[i], tags[i]});
  }
  return ds;
}

/// Greedy response: argmax token at every step (lowest index on ties).
inline std::vector<int> greedy_decode(const TabularPolicy& policy, std::size_t prompt, std::size_t length) {
  require(length >= 1, "greedy_decode: length must be positive");
  std::vector<int> out;
  int prev = kStartToken;
  for (std::size_t t = 0; t < length; ++t) {
    prev = static_cast<int>(argmax(policy.logits(State{prompt, prev})));
    out.push_back(prev);
  }
  return out;
}

struct GreedyPrediction {
  std::vector<int> tokens;
  int label = 0;           // final token; may be a stub token
  double confidence = 0.0; // max probability at the final state
};

inline GreedyPrediction greedy_prediction(const TabularPolicy& policy, const TaskSpec& spec,
                                          std::size_t prompt) {
  GreedyPrediction g;
  g.tokens = greedy_decode(policy, prompt, spec.sequence_length());
  g.label = g.tokens.back();
  const int prev = spec.stub_length == 0 ? kStartToken : g.tokens[g.tokens.size() - 2];
  g.confidence = confidence(next_token_dist(policy, State{prompt, prev}));
  return g;
}

/// q_x(greedy label); zero when the greedy final token is not a label.
inline double oracle_z(const TabularPolicy& policy, std::size_t prompt, const TaskSpec& spec) {
  require(prompt < spec.label_distributions.size(), "oracle_z: unknown prompt");
  require(prompt < policy.num_prompts(), "oracle_z: policy has no such prompt");
  const int label = greedy_prediction(policy, spec, prompt).label;
  if (!spec.is_label(label)) return 0.0;
  return spec.label_distributions[prompt][static_cast<std::size_t>(label)];
}

// ---------------------------------------------------------------------------
// Dataset JSON: {"spec": {...}, "sft": [...], "pairs": [...], "splits": {...}}

inline nlohmann::json spec_to_json(const TaskSpec& s) {
  return nlohmann::json{{"num_prompts", s.num_prompts},
                        {"num_options", s.num_options},
                        {"stub_length", s.stub_length},
                        {"stub_vocab", s.stub_vocab},
                        {"ambiguity", s.ambiguity},
                        {"sft_per_prompt", s.sft_per_prompt},
                        {"pairs_per_prompt", s.pairs_per_prompt},
                        {"train_fraction", s.train_fraction},
                        {"validation_fraction", s.validation_fraction},
                        {"seed", s.seed},
                        {"label_distributions", s.label_distributions},
                        {"argmax_options", s.argmax_options}};
}

inline nlohmann::json dataset_to_json(const GeneratedDataset& ds) {
  nlohmann::json sft = nlohmann::json::array();
  nlohmann::json pairs = nlohmann::json::array();
  nlohmann::json splits = {{"train", {{"sft", nlohmann::json::array()}, {"pairs", nlohmann::json::array()}}},
                           {"validation", {{"sft", nlohmann::json::array()}, {"pairs", nlohmann::json::array()}}},
                           {"test", {{"sft", nlohmann::json::array()}, {"pairs", nlohmann::json::array()}}}};
  for (std::size_t i = 0; i < ds.sft.size(); ++i) {
    const auto& e = ds.sft[i];
    sft.push_back({{"prompt", e.prompt}, {"tokens", e.tokens}});
    splits[split_name(e.split)]["sft"].push_back(i);
  }
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    const auto& e = ds.pairs[i];
    pairs.push_back({{"context_id", e.pair.context_id},
                     {"preferred", e.pair.preferred},
                     {"dispreferred", e.pair.dispreferred}});
    splits[split_name(e.split)]["pairs"].push_back(i);
  }
  return nlohmann::json{{"spec", spec_to_json(ds.spec)}, {"sft", sft}, {"pairs", pairs}, {"splits", splits}};
}

inline GeneratedDataset dataset_from_json(const nlohmann::json& j) {
  try {
    GeneratedDataset ds;
    const auto& s = j.at("spec");
    ds.spec.num_prompts = s.at("num_prompts").get<std::size_t>();
    ds.spec.num_options = s.at("num_options").get<std::size_t>();
    ds.spec.stub_length = s.at("stub_length").get<std::size_t>();
    ds.spec.stub_vocab = s.at("stub_vocab").get<std::size_t>();
    ds.spec.ambiguity = s.at("ambiguity").get<double>();
    ds.spec.sft_per_prompt = s.at("sft_per_prompt").get<std::size_t>();
    ds.spec.pairs_per_prompt = s.at("pairs_per_prompt").get<std::size_t>();
    ds.spec.train_fraction = s.at("train_fraction").get<double>();
    ds.spec.validation_fraction = s.at("validation_fraction").get<double>();
    ds.spec.seed = s.at("seed").get<std::uint64_t>();
    ds.spec.label_distributions = s.at("label_distributions").get<std::vector<std::vector<double>>>();
    ds.spec.argmax_options = s.at("argmax_options").get<std::vector<std::size_t>>();
    validate_spec(ds.spec);
    for (const auto& e : j.at("sft")) {
      ds.sft.push_back(SftExample{e.at("prompt").get<std::size_t>(), e.at("tokens").get<std::vector<int>>(),
                                  Split::train});
    }
    for (const auto& e : j.at("pairs")) {
      PreferencePair p{e.at("context_id").get<std::size_t>(), e.at("preferred").get<std::vector<int>>(),
                       e.at("dispreferred").get<std::vector<int>>()};
      ds.pairs.push_back(PairExample{std::move(p), Split::train});
    }
    std::vector<int> seen_sft(ds.sft.size(), 0), seen_pairs(ds.pairs.size(), 0);
    for (const auto& [name, lists] : j.at("splits").items()) {
      const Split sp = split_from_name(name);
      for (std::size_t i : lists.at("sft").get<std::vector<std::size_t>>()) {
        require(i < ds.sft.size(), "split index out of range");
        ds.sft[i].split = sp;
        ++seen_sft[i];
      }
      for (std::size_t i : lists.at("pairs").get<std::vector<std::size_t>>()) {
        require(i < ds.pairs.size(), "split index out of range");
        ds.pairs[i].split = sp;
        ++seen_pairs[i];
      }
    }
    const auto once = [](int c) { return c == 1; };
    require(std::all_of(seen_sft.begin(), seen_sft.end(), once) &&
                std::all_of(seen_pairs.begin(), seen_pairs.end(), once),
            "splits must partition the examples");
    return ds;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("dataset JSON: ") + e.what());
  }
}

}  // namespace calpo
