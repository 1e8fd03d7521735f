#include <catch2/catch_amalgamated.hpp>

#include "thn/arch.hpp"
#include "thn/dataset.hpp"
#include "thn/quantize.hpp"

using namespace thn;

namespace {

const char* kTinyArch = R"(
name qtiny
input 1 8 6
classes 3
conv 4 k 3x3 s 2x2 p 1x1 spn r 6
avg_pool 4x3
flatten
head dense
)";

struct QuantFixture {
  HybridModel model;
  FeatureDataset calib;

  QuantFixture() {
    model = materialize(parse_arch(kTinyArch), 21);
    for (Layer& l : model.layers)
      if (auto* s = std::get_if<StrassenConvLayer>(&l))
        if (s->spn.shadow) collapse_layer(s->spn);
    GenConfig cfg;
    cfg.classes = 3;
    cfg.per_class = 20;
    cfg.height = 8;
    cfg.width = 6;
    cfg.seed = 55;
    calib = gen_data(cfg).val;
  }
};

}  // namespace

TEST_CASE("named policies pin every width") {
  QuantPolicy mixed = quant_policy("mixed");
  REQUIRE(mixed.weight_bits == 8);
  REQUIRE(mixed.a_hat_bits == 16);
  REQUIRE(mixed.act_bits == 8);
  REQUIRE(mixed.mid_bits == 16);
  REQUIRE(mixed.bias_bits == 16);

  QuantPolicy a8 = quant_policy("all8");
  for (int b : {a8.weight_bits, a8.a_hat_bits, a8.act_bits, a8.mid_bits, a8.bias_bits})
    REQUIRE(b == 8);
  QuantPolicy a16 = quant_policy("all16");
  for (int b : {a16.weight_bits, a16.a_hat_bits, a16.act_bits, a16.mid_bits, a16.bias_bits})
    REQUIRE(b == 16);

  REQUIRE_THROWS_AS(quant_policy("all4"), PolicyError);
  QuantPolicy bad;
  bad.act_bits = 12;
  REQUIRE_THROWS_AS(bad.validate(), PolicyError);
}

TEST_CASE("unit-range scalars share a format where one is exact") {
  QFormat pf = prob_format();
  REQUIRE(pf.total_bits == 16);
  REQUIRE(pf.frac_bits == 14);
  REQUIRE(fx_quantize_value(1.0, pf) == 16384);
  REQUIRE(fx_quantize_value(-1.0, pf) == -16384);
  QTensor one{pf, {1}, {16384}};
  REQUIRE(fx_dequantize(one)[0] == 1.0);
}

TEST_CASE("the covering fraction is the finest that avoids saturation") {
  Tensor t({4});
  t[0] = 3.0;
  t[1] = -1.0;
  t[2] = 0.25;
  REQUIRE(covering_frac(t, 8) == 5);   // 3 * 2^5 = 96 <= 127, 3 * 2^6 = 192 > 127
  REQUIRE(covering_frac(t, 16) == 13); // 3 * 2^13 = 24576 <= 32767

  Tensor small({2});
  small[0] = 0.4;
  REQUIRE(covering_frac(small, 8) == 7);  // 0.4 * 128 = 51.2, fits at the finest fraction
}

TEST_CASE("folding batch normalization preserves the float forward pass") {
  QuantFixture f;
  REQUIRE(has_batchnorm(f.model));

  int64_t n = f.calib.size();
  REQUIRE(n >= 6);
  std::vector<Tensor> scores_before;
  for (int64_t i = 0; i < n; ++i)
    scores_before.push_back(forward(f.model, f.calib.samples[static_cast<size_t>(i)]));

  fold_batchnorm(f.model);
  REQUIRE_FALSE(has_batchnorm(f.model));
  for (int64_t i = 0; i < n; ++i) {
    Tensor after = forward(f.model, f.calib.samples[static_cast<size_t>(i)]);
    for (int64_t j = 0; j < after.size(); ++j)
      REQUIRE(after[j] == Catch::Approx(scores_before[static_cast<size_t>(i)][j]).margin(1e-6));
  }

  REQUIRE_THROWS_AS(fold_batchnorm(f.model), StateError);
}

TEST_CASE("calibration refuses unfolded normalization") {
  QuantFixture f;
  REQUIRE_THROWS_AS(calibrate(f.model, f.calib, quant_policy("mixed")), StateError);
}

TEST_CASE("calibrated formats follow the policy widths") {
  QuantFixture f;
  fold_batchnorm(f.model);
  QuantPolicy pol = quant_policy("mixed");
  ModelQuant q = quantize_model(f.model, f.calib, pol);

  REQUIRE(f.model.quant);
  for (const auto& [name, fmt] : q.fmts) {
    CAPTURE(name);
    REQUIRE(fmt.total_bits == slot_bits(pol, name));
    fmt.validate();
  }
  // the expected slots for this architecture, nothing more
  std::vector<std::string> want = {"act.input",      "act.layer0.mid", "act.layer0.out",
                                   "act.head.scores", "layer0.a_hat",   "layer0.bias",
                                   "head.W",          "head.bias"};
  REQUIRE(q.fmts.size() == want.size());
  for (const std::string& n : want) REQUIRE(q.fmts.count(n) == 1);

  // weight codes exist for every weight slot
  REQUIRE(q.codes.count("layer0.a_hat") == 1);
  REQUIRE(q.codes.count("head.W") == 1);
}

TEST_CASE("quantization is deterministic") {
  QuantFixture f;
  fold_batchnorm(f.model);
  ModelQuant q1 = quantize_model(f.model, f.calib, quant_policy("mixed"));
  ModelQuant q2 = quantize_model(f.model, f.calib, quant_policy("mixed"));
  REQUIRE(q1.fmts.size() == q2.fmts.size());
  for (const auto& [name, fmt] : q1.fmts) {
    REQUIRE(q2.fmts.at(name).total_bits == fmt.total_bits);
    REQUIRE(q2.fmts.at(name).frac_bits == fmt.frac_bits);
  }
  for (const auto& [name, qt] : q1.codes) REQUIRE(q2.codes.at(name).code == qt.code);
}

TEST_CASE("scores dispatch through the fixed-point path once quantized") {
  QuantFixture f;
  fold_batchnorm(f.model);
  Tensor x = f.calib.samples[0];
  Tensor float_scores = model_scores(f.model, x, PredictMode::hard);

  quantize_model(f.model, f.calib, quant_policy("mixed"));
  Tensor q_scores = model_scores(f.model, x, PredictMode::hard);
  Tensor direct = run_quant(f.model, x, f.model.quant->fmts, &f.model.quant->codes,
                            PredictMode::hard);
  REQUIRE(q_scores.size() == direct.size());
  for (int64_t i = 0; i < q_scores.size(); ++i) REQUIRE(q_scores[i] == direct[i]);

  // fixed-point scores are close to float but not the float pipeline itself
  bool identical = true;
  for (int64_t i = 0; i < q_scores.size(); ++i)
    if (q_scores[i] != float_scores[i]) identical = false;
  REQUIRE_FALSE(identical);
}

TEST_CASE("a quantized model keeps most of its float accuracy here") {
  QuantFixture f;
  fold_batchnorm(f.model);
  double float_acc = evaluate_accuracy(f.model, f.calib, PredictMode::hard);
  quantize_model(f.model, f.calib, quant_policy("mixed"));
  double q_acc = evaluate_accuracy(f.model, f.calib, PredictMode::hard);
  // untrained weights: both are near chance; calibration must not collapse
  REQUIRE(q_acc >= float_acc - 0.35);
}

TEST_CASE("empty calibration data is rejected") {
  QuantFixture f;
  fold_batchnorm(f.model);
  FeatureDataset empty;
  empty.height = 8;
  empty.width = 6;
  empty.num_classes = 3;
  REQUIRE_THROWS_AS(calibrate(f.model, empty, quant_policy("mixed")), ConfigError);
}
