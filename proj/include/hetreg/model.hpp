#pragma once

#include "hetreg/config.hpp"
#include "hetreg/decoder.hpp"
#include "hetreg/encoder.hpp"
#include "hetreg/losses.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace hetreg {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Dual-stream encoder plus pyramid decoder.
struct Model
{
  EncoderConfig encoder_config;
  DecoderConfig decoder_config;
  EncoderParams encoder;
  DecoderParams decoder;

  static Model create(const RunConfig &cfg);
  /// Deterministic order; names are unique.
  NamedTensors parameters() const;
  Index        parameter_count() const;
};

struct ForwardResult
{
  EncoderTrace moving_trace, fixed_trace;
  DecodeResult decoded;
  Volume       warped;
};

ForwardResult forward(const Model &model, const Volume &moving, const Volume &fixed, bool trace = false);

struct StepRecord
{
  double sim = 0.0, reg = 0.0, rc = 0.0, total = 0.0;
};

/// Adam with bias correction.
class Adam
{
public:
  Adam(NamedTensors params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step();
  void zero_grad();

private:
  NamedTensors                     params_;
  double                           lr_, beta1_, beta2_, eps_;
  long                             t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// One loss evaluation with routing-classification labels built from the
/// similarity gradient at each SHMoE output. Returns the loss terms; the
/// graph is live so `terms.total.backward()` may follow.
struct LossEvaluation
{
  LossTerms     terms;
  ForwardResult result;
};
LossEvaluation evaluate_loss(const Model &model, const Volume &moving, const Volume &fixed, const RunConfig &cfg);

/// Throws NumericError naming the first non-finite term.
void check_finite(const StepRecord &r, int iteration);

struct TrainingPair
{
  Volume moving, fixed;
};

/// `iterations` Adam steps cycling through `pairs`. `on_step` sees every
/// record as it is produced.
std::vector<StepRecord> train(Model &model, std::span<const TrainingPair> pairs, const RunConfig &cfg,
                              const std::function<void(int, const StepRecord &)> &on_step = {});

} // namespace hetreg
