#pragma once

#include <cstdint>
#include <vector>

#include "devolve/data_io.hpp"
#include "devolve/network.hpp"

namespace devolve {

struct TrainOptions {
  std::size_t epochs = 10;
  double lr = 0.05;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

/// Mini-batch SGD on cross entropy. Returns the mean training loss of each epoch.
std::vector<double> train_classifier(Network& net, const Dataset& data, const TrainOptions& opts);

}  // namespace devolve
