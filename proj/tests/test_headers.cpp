// The whole public surface must compile together in one translation unit,
// and the models must construct and run a forward pass.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "conunetr/cli/cli.hpp"
#include "conunetr/data/augment.hpp"
#include "conunetr/data/dataset_io.hpp"
#include "conunetr/data/phantom.hpp"
#include "conunetr/data/profiles.hpp"
#include "conunetr/data/sample.hpp"
#include "conunetr/data/sampling.hpp"
#include "conunetr/eval/dice.hpp"
#include "conunetr/eval/evaluate.hpp"
#include "conunetr/eval/study.hpp"
#include "conunetr/model/checkpoint.hpp"
#include "conunetr/model/config.hpp"
#include "conunetr/model/conunetr.hpp"
#include "conunetr/model/embeddings.hpp"
#include "conunetr/model/gradcheck_suite.hpp"
#include "conunetr/model/unet.hpp"
#include "conunetr/nn/attention.hpp"
#include "conunetr/nn/conv_blocks.hpp"
#include "conunetr/nn/linear.hpp"
#include "conunetr/nn/parameters.hpp"
#include "conunetr/nn/transformer.hpp"
#include "conunetr/tensor/conv.hpp"
#include "conunetr/tensor/gradcheck.hpp"
#include "conunetr/tensor/ops.hpp"
#include "conunetr/tensor/rng.hpp"
#include "conunetr/tensor/shape.hpp"
#include "conunetr/tensor/tape.hpp"
#include "conunetr/tensor/tensor.hpp"
#include "conunetr/train/adamw.hpp"
#include "conunetr/train/loss.hpp"
#include "conunetr/train/schedule.hpp"
#include "conunetr/train/trainer.hpp"

using namespace conunetr;

TEST_CASE("tiny transformer model constructs and predicts probabilities") {
  const ModelConfig cfg = model_preset("tiny");
  ConUNETR<float> model(cfg, 1);
  Rng rng(3);
  const Tensor<float> image = Tensor<float>::uniform(Shape{1, 1, 64, 64}, 0.0, 1.0, rng);
  const Tensor<float> probs = model.forward(image, 0, 50);
  CHECK(probs.shape() == Shape{1, 2, 64, 64});
  for (std::int64_t p = 0; p < 64 * 64; ++p) {
    const float total = probs.values()[static_cast<std::size_t>(p)] +
                        probs.values()[static_cast<std::size_t>(64 * 64 + p)];
    REQUIRE(total == doctest::Approx(1.0f).epsilon(1e-5));
  }
}

TEST_CASE("plain U-Net baseline constructs and keeps extents") {
  UNet<float> unet(1, 2, 8, 5);
  Rng rng(4);
  const Tensor<float> image = Tensor<float>::uniform(Shape{1, 1, 64, 64}, 0.0, 1.0, rng);
  CHECK(unet.forward_logits(image).shape() == Shape{1, 2, 64, 64});
}
