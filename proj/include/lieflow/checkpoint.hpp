#pragma once

// Model and dataset conversions to and from TensorFile.

#include <string>

#include "lieflow/npca_joint_vem.hpp"
#include "lieflow/synth.hpp"
#include "lieflow/tensor_file.hpp"

namespace lieflow {

inline void store_dynamics(TensorFile& f, const DynamicsModel& m) {
  f.put_stack("G", m.basis.generators());
  f.put("Omega", m.trans_cov);
  f.put("Lambda", m.coeff_prior_cov);
}

inline DynamicsModel load_dynamics(const TensorFile& f) {
  DynamicsModel m{GeneratorBasis(f.stack("G")), f.matrix("Omega"), f.matrix("Lambda")};
  m.validate();
  return m;
}

inline TensorFile checkpoint_of(const DynamicsModel& m) {
  TensorFile f;
  f.attributes["estimator"] = "dynamics";
  store_dynamics(f, m);
  return f;
}

inline TensorFile checkpoint_of(const PpcaModel& m) {
  TensorFile f;
  f.attributes["estimator"] = "ppca";
  store_dynamics(f, m.dynamics);
  f.put("W", m.loading);
  f.put_vector("mu", m.data_mean);
  f.put_scalar("sigma2", m.noise_var);
  return f;
}

inline TensorFile checkpoint_of(const NpcaModel& m) {
  TensorFile f;
  f.attributes["estimator"] = "npca";
  f.attributes["encoder_layers"] = m.encoder.trunk.layers.size();
  f.attributes["decoder_layers"] = m.decoder.layers.size();
  store_dynamics(f, m.dynamics);
  for (size_t l = 0; l < m.encoder.trunk.layers.size(); ++l) {
    f.put(detail::concat("enc_", l, "_W"), m.encoder.trunk.layers[l].weight);
    f.put_vector(detail::concat("enc_", l, "_b"), m.encoder.trunk.layers[l].bias);
  }
  f.put("enc_mean_W", m.encoder.head_mean.weight);
  f.put_vector("enc_mean_b", m.encoder.head_mean.bias);
  f.put("enc_logvar_W", m.encoder.head_logvar.weight);
  f.put_vector("enc_logvar_b", m.encoder.head_logvar.bias);
  for (size_t l = 0; l < m.decoder.layers.size(); ++l) {
    f.put(detail::concat("dec_", l, "_W"), m.decoder.layers[l].weight);
    f.put_vector(detail::concat("dec_", l, "_b"), m.decoder.layers[l].bias);
  }
  f.put_scalar("sigma2", m.obs_noise_var);
  return f;
}

inline std::string estimator_of(const TensorFile& f) {
  if (!f.attributes.contains("estimator")) throw FormatError("checkpoint has no estimator attribute");
  return f.attributes["estimator"].get<std::string>();
}

inline PpcaModel load_ppca(const TensorFile& f) {
  PpcaModel m{f.matrix("W"), f.vector("mu"), f.scalar("sigma2"), load_dynamics(f)};
  m.validate();
  return m;
}

inline NpcaModel load_npca(const TensorFile& f) {
  NpcaModel m;
  const auto enc_layers = f.attributes.at("encoder_layers").get<size_t>();
  const auto dec_layers = f.attributes.at("decoder_layers").get<size_t>();
  m.encoder.trunk.linear_output = false;
  for (size_t l = 0; l < enc_layers; ++l)
    m.encoder.trunk.layers.push_back({f.matrix(detail::concat("enc_", l, "_W")), f.vector(detail::concat("enc_", l, "_b"))});
  m.encoder.head_mean = {f.matrix("enc_mean_W"), f.vector("enc_mean_b")};
  m.encoder.head_logvar = {f.matrix("enc_logvar_W"), f.vector("enc_logvar_b")};
  m.decoder.linear_output = true;
  for (size_t l = 0; l < dec_layers; ++l)
    m.decoder.layers.push_back({f.matrix(detail::concat("dec_", l, "_W")), f.vector(detail::concat("dec_", l, "_b"))});
  m.obs_noise_var = f.scalar("sigma2");
  m.dynamics = load_dynamics(f);
  m.validate();
  return m;
}

inline TensorFile dataset_file(const PairDataset& data, const GroundTruth& truth) {
  TensorFile f;
  f.put("z_i", data.z_i);
  f.put("z_next", data.z_next);
  f.put_stack("true_G", truth.generators.generators());
  return f;
}

inline TensorFile dataset_file(const ImagePairDataset& data, const GroundTruth& truth) {
  TensorFile f;
  f.put("x_i", data.x_i);
  f.put("x_next", data.x_next);
  f.put_stack("true_G", truth.generators.generators());
  f.attributes["height"] = data.height;
  f.attributes["width"] = data.width;
  return f;
}

inline TensorFile truth_file(const GroundTruth& truth) {
  TensorFile f;
  f.put_stack("true_G", truth.generators.generators());
  f.put("lambda", truth.lambda);
  f.put("latent_i", truth.latent_i);
  f.put("latent_next", truth.latent_next);
  if (truth.loading.size() > 0) {
    f.put("W", truth.loading);
    f.put_vector("mu", truth.data_mean);
  }
  return f;
}

inline bool is_image_dataset(const TensorFile& f) { return f.has("x_i") && f.has("x_next"); }
inline bool is_latent_dataset(const TensorFile& f) { return f.has("z_i") && f.has("z_next"); }

inline PairDataset load_pair_dataset(const TensorFile& f) {
  if (!is_latent_dataset(f)) throw DimensionError("dataset holds no latent pairs (z_i, z_next)");
  return PairDataset(f.matrix("z_i"), f.matrix("z_next"));
}

inline ImagePairDataset load_image_dataset(const TensorFile& f) {
  if (!is_image_dataset(f)) throw DimensionError("dataset holds no image pairs (x_i, x_next)");
  const Index h = f.attributes.value("height", Index{1});
  const Index w = f.attributes.value("width", Index{0});
  return ImagePairDataset(f.matrix("x_i"), f.matrix("x_next"), h, w);
}

}  // namespace lieflow
