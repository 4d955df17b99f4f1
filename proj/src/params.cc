#include "pfnl/params.h"

#include "pfnl/error.h"
#include "pfnl/rng.h"

namespace pfnl {

namespace {

Matrix noisy_identity(std::size_t n, double stddev, Rng* rng) {
  Matrix m = Matrix::identity(n);
  if (rng != nullptr) {
    for (double& v : m.data()) v += rng->normal(0.0, stddev);
  }
  return m;
}

AdapterParams build(const ArchConfig& arch, Rng* rng) {
  if (arch.dim < 2 || arch.styles < 1 || arch.layers < 1 || arch.way < 1) {
    throw ConfigError("architecture needs dim >= 2, styles >= 1, layers >= 1, way >= 1");
  }
  const auto d = static_cast<std::size_t>(arch.dim);
  const auto s = static_cast<std::size_t>(arch.styles);
  const auto h = static_cast<std::size_t>(arch.hidden_width());
  const double sd = arch.init_noise;

  AdapterParams p;
  p.text.styles = Matrix(s, d);
  p.text.mlp_w1 = Matrix(h, d);
  p.text.mlp_b1 = Matrix(h, 1);
  p.text.mlp_w2 = Matrix(s, h);
  p.text.mlp_b2 = Matrix(s, 1);
  if (rng != nullptr) {
    for (double& v : p.text.styles.data()) v = rng->normal(0.0, sd);
    for (double& v : p.text.mlp_w1.data()) v = rng->truncated_normal(sd);
    for (double& v : p.text.mlp_w2.data()) v = rng->truncated_normal(sd);
  }
  for (int l = 0; l < arch.layers; ++l) {
    AttentionLayerT<Matrix> layer;
    layer.query = noisy_identity(d, sd, rng);
    layer.key = noisy_identity(d, sd, rng);
    layer.value = noisy_identity(d, sd, rng);
    layer.output = Matrix(d, d);
    layer.norm_gain = Matrix(d, 1, 1.0);
    layer.norm_bias = Matrix(d, 1);
    p.text.layers.push_back(std::move(layer));
  }
  p.vision.residual_tokens.assign(static_cast<std::size_t>(arch.way), Matrix(d, 1));
  p.vision.projection = noisy_identity(d, sd, rng);
  p.vision.norm_gain = Matrix(d, 1, 1.0);
  p.vision.norm_bias = Matrix(d, 1);
  return p;
}

}  // namespace

AdapterParams init_params(const ArchConfig& arch, Rng& rng) { return build(arch, &rng); }

AdapterParams identity_params(const ArchConfig& arch) { return build(arch, nullptr); }

AdapterVars bind_params(Tape& tape, const AdapterParams& p) {
  AdapterVars v;
  v.text.styles = tape.parameter(p.text.styles);
  v.text.mlp_w1 = tape.parameter(p.text.mlp_w1);
  v.text.mlp_b1 = tape.parameter(p.text.mlp_b1);
  v.text.mlp_w2 = tape.parameter(p.text.mlp_w2);
  v.text.mlp_b2 = tape.parameter(p.text.mlp_b2);
  for (const auto& layer : p.text.layers) {
    v.text.layers.push_back({tape.parameter(layer.query), tape.parameter(layer.key),
                             tape.parameter(layer.value), tape.parameter(layer.output),
                             tape.parameter(layer.norm_gain),
                             tape.parameter(layer.norm_bias)});
  }
  for (const Matrix& r : p.vision.residual_tokens) {
    v.vision.residual_tokens.push_back(tape.parameter(r));
  }
  v.vision.projection = tape.parameter(p.vision.projection);
  v.vision.norm_gain = tape.parameter(p.vision.norm_gain);
  v.vision.norm_bias = tape.parameter(p.vision.norm_bias);
  return v;
}

std::size_t parameter_count(const AdapterParams& params) {
  std::size_t n = 0;
  for_each_slot(params, [&](const std::string&, ParamGroup, RegSlot, const Matrix& m) {
    n += m.size();
  });
  return n;
}

}  // namespace pfnl
