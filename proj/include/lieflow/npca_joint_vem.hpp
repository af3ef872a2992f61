#pragma once

// Variational EM with a neural representation: a Gaussian encoder q(z | x)
// with diagonal covariance, an MLP decoder psi with x ~ N(psi(z), sigma^2 I),
// and the transition model of dynamics_em between the two latents of a pair.
// Network weights follow reparameterized gradients of the per-pair bound;
// G and Omega are updated in closed form from the variational moments.

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "lieflow/ppca_joint_em.hpp"

namespace lieflow {

struct AffineLayer {
  Matrix weight;  // out x in
  Vector bias;

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }
};

/// Affine layers with tanh between them; the last layer is linear when
/// linear_output is set (decoder), otherwise tanh as well (encoder trunk).
struct Mlp {
  std::vector<AffineLayer> layers;
  bool linear_output = true;

  struct Cache {
    std::vector<Vector> activations;  // input plus the output of every layer
  };

  Index depth() const { return static_cast<Index>(layers.size()); }
  Index in_dim(Index fallback) const { return layers.empty() ? fallback : layers.front().in_dim(); }
  Index out_dim(Index fallback) const { return layers.empty() ? fallback : layers.back().out_dim(); }

  void validate() const {
    for (size_t l = 0; l < layers.size(); ++l) {
      detail::require_dims(layers[l].bias.size() == layers[l].out_dim(), "Mlp: bias length must match layer output");
      if (l > 0)
        detail::require_dims(layers[l].in_dim() == layers[l - 1].out_dim(), "Mlp: consecutive layer dims must chain");
      if (!layers[l].weight.allFinite() || !layers[l].bias.allFinite()) throw NumericError("Mlp: non-finite parameters");
    }
  }

  bool is_tanh(size_t l) const { return !(linear_output && l + 1 == layers.size()); }

  Vector forward(const Vector& x, Cache* cache = nullptr) const {
    Vector a = x;
    if (cache) {
      cache->activations.clear();
      cache->activations.push_back(a);
    }
    for (size_t l = 0; l < layers.size(); ++l) {
      detail::require_dims(a.size() == layers[l].in_dim(), "Mlp: input has the wrong dimension");
      Vector pre = layers[l].weight * a + layers[l].bias;
      a = is_tanh(l) ? Vector(pre.array().tanh()) : pre;
      if (cache) cache->activations.push_back(a);
    }
    return a;
  }

  /// Accumulates parameter gradients into `grads` (same shapes) given the
  /// gradient at the output; returns the gradient at the input.
  Vector backward(const Cache& cache, Vector g, Mlp& grads) const {
    for (size_t l = layers.size(); l-- > 0;) {
      const Vector& out = cache.activations[l + 1];
      if (is_tanh(l)) g = g.cwiseProduct(Vector((1.0 - out.array().square()).matrix()));
      grads.layers[l].weight += g * cache.activations[l].transpose();
      grads.layers[l].bias += g;
      g = layers[l].weight.transpose() * g;
    }
    return g;
  }

  Mlp zeros_like() const {
    Mlp m = *this;
    for (auto& layer : m.layers) {
      layer.weight.setZero();
      layer.bias.setZero();
    }
    return m;
  }
};

struct Encoder {
  Mlp trunk{{}, false};
  AffineLayer head_mean;
  AffineLayer head_logvar;

  Encoder zeros_like() const {
    Encoder e = *this;
    e.trunk = trunk.zeros_like();
    e.head_mean.weight.setZero();
    e.head_mean.bias.setZero();
    e.head_logvar.weight.setZero();
    e.head_logvar.bias.setZero();
    return e;
  }
};

struct NpcaModel {
  Encoder encoder;
  Mlp decoder;
  double obs_noise_var = 0.01;
  DynamicsModel dynamics;

  Index latent_dim() const { return encoder.head_mean.out_dim(); }
  Index image_dim() const { return decoder.out_dim(latent_dim()); }

  void validate() const {
    encoder.trunk.validate();
    decoder.validate();
    const Index d = latent_dim();
    const Index feat = encoder.trunk.out_dim(encoder.head_mean.in_dim());
    detail::require_dims(encoder.head_mean.in_dim() == feat && encoder.head_logvar.in_dim() == feat &&
                             encoder.head_logvar.out_dim() == d,
                         "NpcaModel: encoder heads do not match the trunk");
    detail::require_dims(decoder.in_dim(d) == d, "NpcaModel: decoder input must be the latent dim");
    detail::require_dims(encoder.trunk.in_dim(encoder.head_mean.in_dim()) == image_dim(),
                         "NpcaModel: encoder input must be the image dim");
    detail::require_dims(dynamics.latent_dim() == d, "NpcaModel: dynamics act on a different latent dim");
    if (!(obs_noise_var > 0.0)) throw NumericError("NpcaModel: observation noise variance must be positive");
  }
};

/// Calls fn(matrix_or_vector&) on every network parameter in a fixed order:
/// trunk layers, mean head, log-variance head, decoder layers.
template <typename Fn>
void visit_parameters(Encoder& enc, Mlp& dec, Fn&& fn) {
  for (auto& l : enc.trunk.layers) {
    fn(l.weight);
    fn(l.bias);
  }
  fn(enc.head_mean.weight);
  fn(enc.head_mean.bias);
  fn(enc.head_logvar.weight);
  fn(enc.head_logvar.bias);
  for (auto& l : dec.layers) {
    fn(l.weight);
    fn(l.bias);
  }
}

namespace detail {

template <typename M>
Index flat_size(M& enc, Mlp& dec) {
  Index n = 0;
  visit_parameters(enc, dec, [&](auto& p) { n += p.size(); });
  return n;
}

inline Vector gather(Encoder enc, Mlp dec) {
  Vector out(flat_size(enc, dec));
  Index o = 0;
  visit_parameters(enc, dec, [&](auto& p) {
    out.segment(o, p.size()) = Eigen::Map<const Vector>(p.data(), p.size());
    o += p.size();
  });
  return out;
}

}  // namespace detail

struct ObjectiveTerms {
  double recon_i = 0.0, recon_next = 0.0, transition = 0.0, coeff_prior = 0.0, kl_i = 0.0, kl_next = 0.0;

  double total() const { return recon_i + recon_next + transition + coeff_prior - kl_i - kl_next; }
};

/// Gradients with the shapes of the encoder and decoder parameters.
struct GradientBundle {
  Encoder encoder;
  Mlp decoder;
  double objective = 0.0;
  ObjectiveTerms terms;

  Vector flat() const { return detail::gather(encoder, decoder); }

  GradientBundle& operator+=(const GradientBundle& o) {
    Encoder oe = o.encoder;
    Mlp od = o.decoder;
    std::vector<Eigen::Map<const Vector>> src;
    visit_parameters(oe, od, [&](auto& p) { src.emplace_back(p.data(), p.size()); });
    size_t k = 0;
    visit_parameters(encoder, decoder, [&](auto& p) { Eigen::Map<Vector>(p.data(), p.size()) += src[k++]; });
    objective += o.objective;
    return *this;
  }
};

inline Vector flatten_parameters(const NpcaModel& model) { return detail::gather(model.encoder, model.decoder); }

inline void assign_parameters(NpcaModel& model, const Vector& flat) {
  Index o = 0;
  const Index n = detail::flat_size(model.encoder, model.decoder);
  detail::require_dims(flat.size() == n, detail::concat("assign_parameters: expected ", n, " values, got ", flat.size()));
  visit_parameters(model.encoder, model.decoder, [&](auto& p) {
    Eigen::Map<Vector>(p.data(), p.size()) = flat.segment(o, p.size());
    o += p.size();
  });
}

/// Mean and log-variance of q(z | x).
struct DiagGaussian {
  Vector mean;
  Vector logvar;

  Vector stddev() const { return (0.5 * logvar.array()).exp().matrix(); }
  Vector variance() const { return logvar.array().exp().matrix(); }
};

namespace detail {

struct EncoderCache {
  Mlp::Cache trunk;
  Vector feature;
};

inline DiagGaussian encode_impl(const Encoder& enc, const Vector& x, EncoderCache* cache) {
  Mlp::Cache local;
  const Vector h = enc.trunk.forward(x, cache ? &cache->trunk : &local);
  detail::require_dims(h.size() == enc.head_mean.in_dim(), "encode: input has the wrong dimension");
  if (cache) cache->feature = h;
  DiagGaussian q{enc.head_mean.weight * h + enc.head_mean.bias, enc.head_logvar.weight * h + enc.head_logvar.bias};
  if (!q.mean.allFinite() || !q.logvar.allFinite()) throw NumericError("encode: non-finite encoder output");
  return q;
}

}  // namespace detail

inline DiagGaussian encode_diag(const NpcaModel& model, const Vector& x) {
  return detail::encode_impl(model.encoder, x, nullptr);
}

/// q(z | x) = N(phi_mu(x), diag exp(phi_logvar(x))).
inline Gaussian encode(const NpcaModel& model, const Vector& x) {
  const auto q = encode_diag(model, x);
  return {q.mean, Matrix(q.variance().asDiagonal())};
}

inline Vector decode(const NpcaModel& model, const Vector& z) {
  detail::require_dims(z.size() == model.latent_dim(), "decode: latent has the wrong dimension");
  Vector out = model.decoder.forward(z);
  if (!out.allFinite()) throw NumericError("decode: non-finite decoder output");
  return out;
}

/// z = mean + std * noise.
inline Vector reparam_sample(const Vector& mean, const Vector& stddev, const Vector& noise) {
  detail::require_dims(mean.size() == stddev.size() && mean.size() == noise.size(),
                       "reparam_sample: dimension mismatch");
  return mean + stddev.cwiseProduct(noise);
}

inline Vector reparam_sample(const Gaussian& q, const Vector& noise) {
  return reparam_sample(q.mean(), q.cov().diagonal().cwiseSqrt(), noise);
}

/// KL(N(m, diag e^lv) || N(0, I)).
inline double kl_standard_normal(const DiagGaussian& q) {
  return 0.5 * (q.logvar.array().exp() + q.mean.array().square() - 1.0 - q.logvar.array()).sum();
}

enum class CoeffMode { map_plugin, sample };

/// Standard-normal noise for one reparameterized evaluation of a pair.
struct PairNoise {
  Vector z_i;
  Vector z_next;
  Vector lambda;  // used in sample mode only
};

inline PairNoise draw_pair_noise(Index d, Index J, std::uint64_t seed, std::uint64_t stream) {
  CounterRng rng(seed, stream);
  PairNoise n;
  n.z_i = rng.normal_vector(d);
  n.z_next = rng.normal_vector(d);
  n.lambda = rng.normal_vector(J);
  return n;
}

/// Log-likelihood of x under N(psi, sigma^2 I).
inline double gaussian_recon_ll(const Vector& x, const Vector& psi, double var) {
  return -0.5 * (static_cast<double>(x.size()) * (kLog2Pi + std::log(var)) + (x - psi).squaredNorm() / var);
}

/// Per-pair bound recon(x_i) + recon(x_next) + log N(z_next | z_i + A lambda, Omega)
/// + log N(lambda | 0, Lambda) - KL_i - KL_next at the reparameterized latents,
/// with reverse-mode gradients for every encoder and decoder parameter.
/// lambda is the posterior mean given the sampled latents (map_plugin) or a
/// posterior draw (sample); in both cases it is held constant when differentiating.
/// With frozen_coefficients lambda is zero and the coefficient prior is dropped.
inline GradientBundle elbo_objective(const NpcaModel& model, const Vector& x_i, const Vector& x_next,
                                     const PairNoise& noise, CoeffMode mode = CoeffMode::map_plugin,
                                     bool frozen_coefficients = false, const FactorPolicy& policy = {}) {
  const Index d = model.latent_dim(), J = model.dynamics.count();
  detail::require_dims(noise.z_i.size() == d && noise.z_next.size() == d, "elbo_objective: noise has the wrong dimension");
  GradientBundle g{model.encoder.zeros_like(), model.decoder.zeros_like(), 0.0, {}};

  detail::EncoderCache ci, cn;
  const DiagGaussian qi = detail::encode_impl(model.encoder, x_i, &ci);
  const DiagGaussian qn = detail::encode_impl(model.encoder, x_next, &cn);
  const Vector si = qi.stddev(), sn = qn.stddev();
  const Vector zi = reparam_sample(qi.mean, si, noise.z_i);
  const Vector zn = reparam_sample(qn.mean, sn, noise.z_next);

  Mlp::Cache di, dn;
  const Vector psi_i = model.decoder.forward(zi, &di);
  const Vector psi_n = model.decoder.forward(zn, &dn);
  const double s2 = model.obs_noise_var;

  Vector lambda = Vector::Zero(J);
  const SpdFactor lam_factor(model.dynamics.coeff_prior_cov, policy);
  if (!frozen_coefficients) {
    const CoeffPosterior post = e_step_lambda(model.dynamics, zi, zn, policy);
    lambda = post.mean;
    if (mode == CoeffMode::sample) {
      detail::require_dims(noise.lambda.size() == J, "elbo_objective: lambda noise has the wrong dimension");
      lambda += SpdFactor(post.cov, FactorPolicy{1e300}).llt().matrixL() * noise.lambda;
    }
  }
  const SpdFactor omega(model.dynamics.trans_cov, policy);
  const Matrix b = Matrix::Identity(d, d) + model.dynamics.basis.combine(lambda);
  const Vector r = zn - b * zi;
  const Vector oir = omega.solve_vec(r);

  ObjectiveTerms& t = g.terms;
  t.recon_i = gaussian_recon_ll(x_i, psi_i, s2);
  t.recon_next = gaussian_recon_ll(x_next, psi_n, s2);
  t.transition = -0.5 * (static_cast<double>(d) * kLog2Pi + omega.log_det() + r.dot(oir));
  t.coeff_prior = frozen_coefficients
                      ? 0.0
                      : -0.5 * (static_cast<double>(J) * kLog2Pi + lam_factor.log_det() + lam_factor.quad_form(lambda));
  t.kl_i = kl_standard_normal(qi);
  t.kl_next = kl_standard_normal(qn);
  const std::pair<const char*, double> named[] = {{"recon_i", t.recon_i},     {"recon_next", t.recon_next},
                                                  {"transition", t.transition}, {"coeff_prior", t.coeff_prior},
                                                  {"kl_i", t.kl_i},           {"kl_next", t.kl_next}};
  for (const auto& [name, value] : named)
    if (!std::isfinite(value)) throw NumericError(std::string("elbo_objective: non-finite term ") + name);
  g.objective = t.total();

  // latents
  Vector gzi = model.decoder.backward(di, (x_i - psi_i) / s2, g.decoder) + b.transpose() * oir;
  Vector gzn = model.decoder.backward(dn, (x_next - psi_n) / s2, g.decoder) - oir;

  auto back_encoder = [&](const detail::EncoderCache& cache, const DiagGaussian& q, const Vector& s, const Vector& eps,
                          const Vector& gz) {
    const Vector gm = gz - q.mean;
    const Vector glv = 0.5 * gz.cwiseProduct(s).cwiseProduct(eps) - 0.5 * (q.logvar.array().exp() - 1.0).matrix();
    g.encoder.head_mean.weight += gm * cache.feature.transpose();
    g.encoder.head_mean.bias += gm;
    g.encoder.head_logvar.weight += glv * cache.feature.transpose();
    g.encoder.head_logvar.bias += glv;
    const Vector gh = model.encoder.head_mean.weight.transpose() * gm + model.encoder.head_logvar.weight.transpose() * glv;
    model.encoder.trunk.backward(cache.trunk, gh, g.encoder.trunk);
  };
  back_encoder(ci, qi, si, noise.z_i, gzi);
  back_encoder(cn, qn, sn, noise.z_next, gzn);
  return g;
}

/// Moments of the variational posterior for one pair: independent diagonal
/// Gaussians over the two latents and the coefficient posterior at their means,
/// combined with the same factorization as the mean-field joint E-step.
inline LatentMoments variational_moments(const NpcaModel& model, const Vector& x_i, const Vector& x_next,
                                         bool frozen_coefficients = false, const FactorPolicy& policy = {}) {
  const Index d = model.latent_dim(), J = model.dynamics.count();
  const DiagGaussian qi = encode_diag(model, x_i), qn = encode_diag(model, x_next);
  detail::MeanField mf;
  mf.mean_zz.resize(2 * d);
  mf.mean_zz << qi.mean, qn.mean;
  mf.cov_zz = Matrix::Zero(2 * d, 2 * d);
  mf.cov_zz.diagonal() << qi.variance(), qn.variance();
  if (frozen_coefficients) {
    mf.mean_lam = Vector::Zero(J);
    mf.cov_lam = Matrix::Zero(J, J);
  } else {
    const CoeffPosterior post = e_step_lambda(model.dynamics, qi.mean, qn.mean, policy);
    mf.mean_lam = post.mean;
    mf.cov_lam = post.cov;
  }
  return detail::mean_field_moments(mf, d);
}

/// Closed-form G and Omega from the variational moments of every pair.
inline std::pair<GeneratorBasis, Matrix> m_step_dynamics_vem(const std::vector<LatentMoments>& moments,
                                                             const FactorPolicy& policy = {}) {
  return m_step_dynamics(moments, policy);
}

struct NpcaConfig {
  Index latent_dim = 2;
  Index initial_generators = 1;
  std::vector<Index> encoder_hidden{};
  std::vector<Index> decoder_hidden{};
  double step_size = 1e-3;
  bool momentum = false;
  Index batch_size = 32;
  int epochs = 50;
  Index samples_per_pair = 1;
  std::uint64_t seed = 0;
  double obs_noise_var = 0.01;
  CoeffMode coeff_mode = CoeffMode::map_plugin;
  bool freeze_coefficients = false;
  bool update_dynamics = true;
  bool estimate_lambda = false;
  bool orthogonalize = true;
  double variance_threshold = 0.99;
  double cov_floor = 1e-10;
  /// Initial log-variance bias of the encoder.
  double initial_logvar = -4.0;
  unsigned threads = 1;
  FactorPolicy policy{};
};

struct NpcaFitResult {
  NpcaModel model;
  /// Mean per-pair bound at the end of each epoch, evaluated with a fixed
  /// noise stream.
  std::vector<double> trace;
  int epochs = 0;
};

namespace detail {

inline AffineLayer glorot_layer(Index in, Index out, CounterRng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  AffineLayer l{Matrix(out, in), Vector::Zero(out)};
  for (Index r = 0; r < out; ++r)
    for (Index c = 0; c < in; ++c) l.weight(r, c) = bound * (2.0 * rng.uniform() - 1.0);
  return l;
}

}  // namespace detail

/// Uniform +-sqrt(6 / (fan_in + fan_out)) weights and zero biases.
inline NpcaModel initial_npca(Index D, const NpcaConfig& cfg) {
  const Index d = cfg.latent_dim;
  detail::require_dims(D >= 1 && d >= 1, "initial_npca: dims must be positive");
  CounterRng rng(cfg.seed, stream_id({0x6e6e6574ull, static_cast<std::uint64_t>(D), static_cast<std::uint64_t>(d)}));
  NpcaModel m;
  Index prev = D;
  for (Index h : cfg.encoder_hidden) {
    m.encoder.trunk.layers.push_back(detail::glorot_layer(prev, h, rng));
    prev = h;
  }
  m.encoder.trunk.linear_output = false;
  m.encoder.head_mean = detail::glorot_layer(prev, d, rng);
  m.encoder.head_logvar = detail::glorot_layer(prev, d, rng);
  m.encoder.head_logvar.bias.setConstant(cfg.initial_logvar);
  prev = d;
  for (Index h : cfg.decoder_hidden) {
    m.decoder.layers.push_back(detail::glorot_layer(prev, h, rng));
    prev = h;
  }
  m.decoder.layers.push_back(detail::glorot_layer(prev, D, rng));
  m.decoder.linear_output = true;
  m.obs_noise_var = cfg.obs_noise_var;
  m.dynamics = initial_dynamics(d, cfg.initial_generators, cfg.seed);
  return m;
}

/// Linear encoder/decoder matching a PPCA model: the encoder mean is the PPCA
/// posterior mean map, its variance the PPCA posterior variance diagonal, and
/// the decoder is W z + mu.
inline NpcaModel npca_from_ppca(const PpcaModel& ppca, double obs_noise_var) {
  const Index d = ppca.latent_dim();
  SpdFactor m(ppca.loading.transpose() * ppca.loading + ppca.noise_var * Matrix::Identity(d, d));
  NpcaModel out;
  out.encoder.trunk.linear_output = false;
  const Matrix enc = m.solve(ppca.loading.transpose());
  out.encoder.head_mean = {enc, -enc * ppca.data_mean};
  const Vector var = (ppca.noise_var * m.inverse()).diagonal();
  out.encoder.head_logvar = {Matrix::Zero(d, ppca.image_dim()), var.array().log().matrix()};
  out.decoder.layers = {{ppca.loading, ppca.data_mean}};
  out.decoder.linear_output = true;
  out.obs_noise_var = obs_noise_var;
  out.dynamics = ppca.dynamics;
  return out;
}

/// Mean bound over all pairs with noise from the given stream family.
inline double npca_mean_objective(const NpcaModel& model, const ImagePairDataset& data, const NpcaConfig& cfg,
                                  std::uint64_t stream_tag) {
  const Index d = model.latent_dim(), J = model.dynamics.count();
  std::vector<double> values(static_cast<size_t>(data.count()));
  parallel_for(values.size(), cfg.threads, [&](size_t i) {
    double acc = 0.0;
    for (Index s = 0; s < cfg.samples_per_pair; ++s) {
      const auto noise = draw_pair_noise(d, J, cfg.seed, stream_id({stream_tag, i, static_cast<std::uint64_t>(s)}));
      acc += elbo_objective(model, data.first(static_cast<Index>(i)), data.second(static_cast<Index>(i)), noise,
                            cfg.coeff_mode, cfg.freeze_coefficients, cfg.policy)
                 .objective;
    }
    values[i] = acc / static_cast<double>(cfg.samples_per_pair);
  });
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

inline NpcaFitResult fit_npca(const ImagePairDataset& data, const NpcaConfig& cfg,
                              std::optional<NpcaModel> initial = std::nullopt) {
  if (cfg.batch_size < 1 || cfg.samples_per_pair < 1) throw DimensionError("fit_npca: batch and sample counts must be >= 1");
  NpcaFitResult result;
  result.model = initial ? *initial : initial_npca(data.image_dim(), cfg);
  NpcaModel& model = result.model;
  model.validate();
  detail::require_dims(model.image_dim() == data.image_dim(), "fit_npca: model and dataset image dims differ");
  const auto N = static_cast<size_t>(data.count());
  Vector velocity = Vector::Zero(flatten_parameters(model).size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch);
    // deterministic shuffle
    std::vector<size_t> order(N);
    std::iota(order.begin(), order.end(), size_t{0});
    CounterRng shuffle(cfg.seed, stream_id({0x73687566ull, e}));
    for (size_t i = N; i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(shuffle.below(i))]);

    const Index d = model.latent_dim(), J = model.dynamics.count();
    for (size_t start = 0; start < N; start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(N, start + static_cast<size_t>(cfg.batch_size));
      std::vector<GradientBundle> grads(stop - start);
      parallel_for(grads.size(), cfg.threads, [&](size_t k) {
        const size_t pair = order[start + k];
        GradientBundle acc{model.encoder.zeros_like(), model.decoder.zeros_like(), 0.0, {}};
        for (Index s = 0; s < cfg.samples_per_pair; ++s) {
          const auto noise = draw_pair_noise(d, J, cfg.seed, stream_id({e, pair, static_cast<std::uint64_t>(s)}));
          acc += elbo_objective(model, data.first(static_cast<Index>(pair)), data.second(static_cast<Index>(pair)),
                                noise, cfg.coeff_mode, cfg.freeze_coefficients, cfg.policy);
        }
        grads[k] = std::move(acc);
      });
      GradientBundle total = std::move(grads.front());
      for (size_t k = 1; k < grads.size(); ++k) total += grads[k];
      const Vector step =
          total.flat() / static_cast<double>((stop - start) * static_cast<size_t>(cfg.samples_per_pair));
      if (!step.allFinite()) throw NumericError(detail::concat("fit_npca: non-finite gradient in epoch ", epoch));
      if (cfg.momentum) {
        velocity = 0.9 * velocity + step;
        assign_parameters(model, flatten_parameters(model) + cfg.step_size * velocity);
      } else {
        assign_parameters(model, flatten_parameters(model) + cfg.step_size * step);
      }
    }

    if (cfg.update_dynamics) {
      std::vector<LatentMoments> moments(N);
      parallel_for(N, cfg.threads, [&](size_t i) {
        moments[i] = variational_moments(model, data.first(static_cast<Index>(i)), data.second(static_cast<Index>(i)),
                                         cfg.freeze_coefficients, cfg.policy);
      });
      if (!cfg.freeze_coefficients) {
        auto [basis, omega] = m_step_dynamics_vem(moments, cfg.policy);
        model.dynamics.basis = std::move(basis);
        model.dynamics.trans_cov = clip_eigenvalues(omega, cfg.cov_floor);
        if (cfg.estimate_lambda)
          model.dynamics.coeff_prior_cov = clip_eigenvalues(update_Lambda(moments), cfg.cov_floor);
        if (cfg.orthogonalize)
          orthogonalize_model(model.dynamics, cfg.variance_threshold, cfg.cov_floor);
      } else {
        model.dynamics.trans_cov =
            clip_eigenvalues(m_step_omega_given(moments, model.dynamics.basis), cfg.cov_floor);
      }
    }

    const double objective = npca_mean_objective(model, data, cfg, 0x6576616cull);
    if (!std::isfinite(objective)) throw NumericError(detail::concat("fit_npca: objective diverged in epoch ", epoch));
    result.trace.push_back(objective);
    result.epochs = epoch + 1;
  }
  return result;
}

}  // namespace lieflow
