#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ace/trainer.hpp"

namespace ace {

struct GradCheckCase {
  std::string name;
  double worst = 0;  // max relative error over all seeds
};

struct GradCheckReport {
  std::size_t seeds = 0;
  std::vector<GradCheckCase> cases;
  double worst() const;
};

// Toy-shape configuration used by the full-loss check: 32 px images, T = 4,
// K = 8, one encoder block.
TrainConfig gradcheck_config();

// Central differences against reverse mode for every primitive op and for the
// weighted total loss of one crop pair, each over `seeds` random draws.
GradCheckReport gradcheck_suite(std::size_t seeds, std::uint64_t seed);

}  // namespace ace
