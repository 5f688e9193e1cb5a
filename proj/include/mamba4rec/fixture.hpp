#pragma once

// Memorizable synthetic log: every user walks the item cycle
// i -> i+1 (mod |V|) from a random start, so the next item is a
// deterministic function of the current one.

#include <string>
#include <vector>

#include "mamba4rec/config.hpp"
#include "mamba4rec/data.hpp"
#include "mamba4rec/rng.hpp"

namespace m4r {

inline std::vector<InteractionRecord> markov_fixture(const FixtureConfig& f) {
  if (f.items < 2) throw ConfigError("fixture needs at least 2 items");
  if (f.min_length < 1 || f.min_length > f.max_length) throw ConfigError("bad fixture lengths");
  Rng rng(f.seed);
  std::vector<InteractionRecord> out;
  for (std::size_t u = 0; u < f.users; ++u) {
    const std::size_t start = rng.below(f.items);
    const std::size_t len = f.min_length + rng.below(f.max_length - f.min_length + 1);
    for (std::size_t t = 0; t < len; ++t) {
      out.push_back({"u" + std::to_string(u), "i" + std::to_string((start + t) % f.items),
                     static_cast<std::int64_t>(t)});
    }
  }
  return out;
}

}  // namespace m4r
