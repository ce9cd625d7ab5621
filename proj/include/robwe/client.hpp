#pragma once

#include <optional>
#include <vector>

#include "robwe/data.hpp"
#include "robwe/nn.hpp"
#include "robwe/slicing.hpp"
#include "robwe/watermark.hpp"

namespace robwe {

struct ClientState {
  std::size_t id = 0;
  /// Private head; never leaves the client.
  std::vector<nn::LayerParams> head;
  data::Dataset train;
  data::Dataset test;
  std::optional<wm::PrivateWatermarkSpec> watermark;
  std::optional<slicing::SliceAssignment> slice;
  /// Regenerated from slice->matrix_seed once at setup.
  std::optional<wm::EmbeddingMatrix> slice_matrix;
  bool malicious = false;
  double tamper_rate = 0.0;
  /// Number of rounds this client has been sampled so far.
  std::size_t embedding_count = 0;
};

}  // namespace robwe
