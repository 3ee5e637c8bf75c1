#ifndef KELAB_TRAIN_HPP_
#define KELAB_TRAIN_HPP_

#include <cstdint>
#include <iosfwd>
#include <utility>
#include <vector>

#include "kelab/model.hpp"

namespace kelab {

struct TrainConfig {
  int steps = 6000;
  int batch_size = 16;
  double lr = 0.5;
  double clip_norm = 1.0;   // global-norm clip; <= 0 disables
  double init_std = 0.02;
  std::uint64_t seed = 0;
  int log_every = 200;          // 0 silences the log
  std::ostream* log_stream = nullptr;  // defaults to stderr when logging
};

struct TrainResult {
  TransformerWeights weights;
  // (step, mean cross-entropy over the window ending at step)
  std::vector<std::pair<int, double>> loss_log;
  double final_loss = 0.0;
};

// Plain minibatch gradient descent on next-token cross-entropy. Weights are
// initialized from the seed, then batches are drawn from the same stream, so
// a fixed seed fixes the whole trajectory. lr = 0 returns the init unchanged.
TrainResult train(const ModelConfig& cfg,
                  const std::vector<std::vector<int>>& corpus,
                  const TrainConfig& hyper);

// One minibatch gradient accumulation, two implementations. The fused path is
// what train() runs; the reference path goes through forward()/backward() one
// sequence at a time. Both add into grads and return the summed NLL. Exposed
// so tests can hold them against each other.
double train_step_fused(const TransformerWeights& w, const ModelConfig& cfg,
                        const std::vector<const std::vector<int>*>& batch,
                        int predictions, WeightGrads& grads);
double train_step_reference(const TransformerWeights& w, const ModelConfig& cfg,
                            const std::vector<const std::vector<int>*>& batch,
                            int predictions, WeightGrads& grads);

}  // namespace kelab

#endif  // KELAB_TRAIN_HPP_
