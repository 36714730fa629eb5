// Micro-benchmark for the training-critical paths: batched window forward and
// forward+backward through the policy transformer.
#include <chrono>
#include <cstdio>

#include "ht2/model.hpp"

using namespace ht2;

template <class F>
double time_ms(F f, int iters) {
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < iters; ++i) f();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / iters;
}

int main(int argc, char** argv) {
  int B = argc > 1 ? std::atoi(argv[1]) : 256;
  Rng rng(1);
  ModelConfig cfg;
  auto p = PolicyParams<float>::init(cfg, rng);
  auto obs = ag::Tensor<float>::randn({B, 16, cfg.obs_dim}, rng, 1.f);
  auto act = ag::Tensor<float>::randn({B, 16, cfg.act_dim}, rng, 1.f);
  auto present = ag::Tensor<float>::full({B, 16, 1}, 1.f);
  auto mask = causal_mask<float>(16, 16);

  double fwd = time_ms(
      [&] {
        ag::Tape<float> tp;
        tp.grad_enabled = false;
        auto pred = forward_predictions(tp, p, obs, act, present, mask);
        volatile float sink = pred.data()[0];
        (void)sink;
      },
      5);

  double fwdbwd = time_ms(
      [&] {
        ag::Tape<float> tp;
        auto pred = forward_predictions(tp, p, obs, act, present, mask);
        auto loss = ag::mean(tp, ag::mul(tp, pred, pred));
        tp.backward(loss);
      },
      5);

  // rough flop count per window: tokenizer + 4 blocks + head, fwd only
  double flops_fwd = B * (12.2e6 + 38.6e6 + 2.75e6);
  std::printf("batch %d: forward %.1f ms (%.1f GFLOPS), fwd+bwd %.1f ms (%.1f GFLOPS)\n", B,
              fwd, flops_fwd / fwd / 1e6, fwdbwd, 3 * flops_fwd / fwdbwd / 1e6);
  std::printf("per-sample: fwd %.3f ms, fwd+bwd %.3f ms\n", fwd / B, fwdbwd / B);
  return 0;
}
