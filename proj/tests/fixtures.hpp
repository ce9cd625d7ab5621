#pragma once

#include "robwe/config.hpp"

namespace fixture {

// A federation small enough to train in well under a second.
inline robwe::RunConfig tiny_config() {
  robwe::RunConfig cfg;
  cfg.clients = 4;
  cfg.rounds = 3;
  cfg.head_epochs = 2;
  cfg.rep_epochs = 1;
  cfg.rep_hidden = {12};
  cfg.head_hidden = {8};
  cfg.num_classes = 3;
  cfg.input_dim = 6;
  cfg.samples_per_class = 40;
  cfg.min_client_samples = 10;
  cfg.private_bits = 8;
  cfg.slice_bits = 4;
  cfg.learning_rate = 0.05;
  cfg.seed = 7;
  return cfg;
}

}  // namespace fixture
