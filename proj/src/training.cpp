#include "devolve/training.hpp"

#include <numeric>
#include <stdexcept>

#include "devolve/random.hpp"

namespace devolve {

std::vector<double> train_classifier(Network& net, const Dataset& data, const TrainOptions& opts) {
  if (!data.has_labels()) throw std::invalid_argument("training requires labels");
  if (opts.batch_size == 0) throw std::invalid_argument("batch size must be positive");
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(stream_seed(opts.seed, {0x7a41, epoch}));
    for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
    double total = 0.0;
    for (std::size_t b = 0; b < n; b += opts.batch_size) {
      const std::size_t e = std::min(n, b + opts.batch_size);
      std::span<const std::size_t> rows(order.data() + b, e - b);
      Batch batch;
      batch.inputs = gather_rows(data.inputs, rows);
      std::vector<double> t;
      for (std::size_t r : rows) t.push_back(static_cast<double>(data.labels[r]));
      batch.targets = Tensor({rows.size()}, std::move(t));
      total += loss_value(net, batch, LossKind::CrossEntropy) * static_cast<double>(rows.size());
      sgd_step(net, backward(net, batch, LossKind::CrossEntropy), opts.lr);
    }
    losses.push_back(total / static_cast<double>(n));
  }
  return losses;
}

}  // namespace devolve
