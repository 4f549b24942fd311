#pragma once

// A configuration small enough to train in a unit test.

#include "pcam.hpp"

namespace pcam::testing {

inline RunConfig tiny_config() {
  RunConfig c;
  c.model.matching.channels = {3, 8, 8};
  c.model.matching.k = 8;
  c.model.confidence = {2, 8, 8};
  c.data.synth.n_points = 128;
  c.data.synth.view_points = 64;
  c.data.train_pairs = 5;
  c.data.val_pairs = 4;
  c.data.test_pairs = 4;
  c.training.epochs = 1;
  return c;
}

}  // namespace pcam::testing
