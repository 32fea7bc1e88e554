#pragma once

#include <cmath>
#include <string>

#include "fsda/core/errors.hpp"

namespace fsda {

struct TrainLogRow {
  int step;
  float loss;
};

inline void append_divergence_check(float loss, float initial, int& bad_streak, int step) {
  if (!(loss <= 10.f * initial) || !std::isfinite(loss)) {
    if (++bad_streak >= 100)
      throw TrainingFailure("training diverged: loss " + std::to_string(loss) + " vs initial " +
                            std::to_string(initial) + " at step " + std::to_string(step));
  } else {
    bad_streak = 0;
  }
}

}  // namespace fsda
