#include "kla/layer.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "kla/error.hpp"
#include "kla/rng.hpp"

namespace kla::layer {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

template <typename T>
T softplus(T x) {
  return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
void check_params(const LayerParams<T>& p) {
  const std::size_t d = p.d_model;
  const std::size_t n = p.d_state;
  if (d == 0 || n == 0) throw std::invalid_argument("LayerParams: d_model and d_state must be >= 1");
  const bool ok = p.w_k.size() == d * n && p.w_q.size() == d * n && p.w_v.size() == d * d &&
                  p.w_lv.size() == d * d && p.b_lv.size() == d && p.k_norm.size() == n && p.q_norm.size() == n &&
                  p.a_log.size() == n * d && p.p.size() == n * d && p.dt_raw.size() == n * d;
  if (!ok) throw std::invalid_argument("LayerParams: tensor shapes inconsistent with (D, N)");
}

// In-place RMS normalization of each row of a (rows, width) block.
template <typename T>
void rms_rows(std::vector<T>& x, std::size_t width, const std::vector<T>& scale) {
  const std::size_t rows = x.size() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = x.data() + r * width;
    T ss{0};
    for (std::size_t j = 0; j < width; ++j) ss += row[j] * row[j];
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(width) + static_cast<T>(kNormEps));
    for (std::size_t j = 0; j < width; ++j) row[j] *= inv * scale[j];
  }
}

// y[b,t,d] = sum_n q[b,t,n] z[t, (b N + n) D + d]; optional variance readout.
template <typename T>
void readout(const std::vector<T>& z, const std::vector<T>* lambda, std::span<const T> q, std::size_t batch,
             std::size_t steps, std::size_t slots, std::size_t channels, std::vector<T>& y,
             std::vector<T>* y_var) {
  const std::size_t lanes = batch * slots * channels;
  y.assign(batch * steps * channels, T{0});
  if (y_var) y_var->assign(batch * steps * channels, T{0});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      T* yr = y.data() + (b * steps + t) * channels;
      T* vr = y_var ? y_var->data() + (b * steps + t) * channels : nullptr;
      for (std::size_t n = 0; n < slots; ++n) {
        const T qn = q[(b * steps + t) * slots + n];
        const std::size_t base = t * lanes + (b * slots + n) * channels;
        const T* zr = z.data() + base;
        for (std::size_t d = 0; d < channels; ++d) yr[d] += qn * zr[d];
        if (vr) {
          const T* lr = lambda->data() + base;
          for (std::size_t d = 0; d < channels; ++d) vr[d] += qn * qn / lr[d];
        }
      }
    }
  }
}

template <typename T>
void evidence_terms(const Projections<T>& proj, std::vector<T>& phi, std::vector<T>& drive) {
  const std::size_t batch = proj.batch, steps = proj.steps, slots = proj.slots, channels = proj.channels;
  const std::size_t lanes = batch * slots * channels;
  phi.resize(steps * lanes);
  drive.resize(steps * lanes);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) {
      const T* lv = proj.lambda_v.data() + (b * steps + t) * channels;
      const T* v = proj.v.data() + (b * steps + t) * channels;
      for (std::size_t d = 0; d < channels; ++d) {
        if (!(lv[d] > T{0})) throw std::invalid_argument("filter_readout: value precision must be > 0");
      }
      for (std::size_t n = 0; n < slots; ++n) {
        const T k = proj.k[(b * steps + t) * slots + n];
        const std::size_t base = t * lanes + (b * slots + n) * channels;
        for (std::size_t d = 0; d < channels; ++d) {
          phi[base + d] = k * k * lv[d];
          drive[base + d] = k * lv[d] * v[d];
        }
      }
    }
  }
}

}  // namespace

double delta_from_raw(double raw) { return filter::kDeltaMin + (filter::kDeltaMax - filter::kDeltaMin) * sigmoid(raw); }

double raw_from_delta(double delta) {
  const double u = std::clamp((delta - filter::kDeltaMin) / (filter::kDeltaMax - filter::kDeltaMin), 1e-4, 1.0 - 1e-4);
  return std::log(u / (1.0 - u));
}

LayerParams<double> init_layer_params(std::size_t d_model, std::size_t d_state, std::uint64_t seed) {
  LayerParams<double> p;
  p.d_model = d_model;
  p.d_state = d_state;
  auto gen = rng::engine({seed, 0x6c61796572ULL});
  const auto glorot = [&](std::size_t fan_in, std::size_t fan_out) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
    std::vector<double> w(fan_in * fan_out);
    for (double& x : w) x = dist(gen);
    return w;
  };
  p.w_k = glorot(d_model, d_state);
  p.w_q = glorot(d_model, d_state);
  p.w_v = glorot(d_model, d_model);
  p.w_lv = glorot(d_model, d_model);
  p.b_lv.assign(d_model, 0.0);
  p.k_norm.assign(d_state, 1.0);
  p.q_norm.assign(d_state, 1.0);
  p.a_log.resize(d_state * d_model);
  p.p.assign(d_state * d_model, kInitP);
  p.dt_raw.resize(d_state * d_model);
  std::uniform_real_distribution<double> log_dt(std::log(filter::kDeltaMin), std::log(filter::kDeltaMax));
  for (std::size_t n = 0; n < d_state; ++n) {
    const double frac = d_state > 1 ? static_cast<double>(n) / static_cast<double>(d_state - 1) : 0.0;
    const double a = std::exp(std::log(kInitAMin) + frac * (std::log(kInitAMax) - std::log(kInitAMin)));
    for (std::size_t d = 0; d < d_model; ++d) {
      p.a_log[n * d_model + d] = std::log(a);
      p.dt_raw[n * d_model + d] = raw_from_delta(std::exp(log_dt(gen)));
    }
  }
  return p;
}

template <std::floating_point T>
filter::OUParams<T> ou_params(const LayerParams<T>& params, const LayerOptions& options) {
  check_params(params);
  filter::OUParams<T> ou;
  const std::size_t size = params.a_log.size();
  ou.a.resize(size);
  ou.p.resize(size);
  ou.delta.resize(size);
  for (std::size_t i = 0; i < size; ++i) {
    ou.a[i] = std::exp(params.a_log[i]);
    ou.p[i] = options.zero_process_noise ? T{0} : params.p[i];
    ou.delta[i] = static_cast<T>(delta_from_raw(static_cast<double>(params.dt_raw[i])));
  }
  return ou;
}

template <std::floating_point T>
filter::Dynamics<T> layer_dynamics(const LayerParams<T>& params, const LayerOptions& options) {
  const auto ou = ou_params(params, options);
  return options.discretization == ad::Discretization::euler ? filter::euler_discretize(ou)
                                                            : filter::ou_discretize(ou);
}

template <std::floating_point T>
Projections<T> project_inputs(std::span<const T> x, std::size_t batch, std::size_t steps,
                              const LayerParams<T>& params) {
  check_params(params);
  const std::size_t d = params.d_model;
  const std::size_t n = params.d_state;
  const std::size_t rows = batch * steps;
  if (x.size() != rows * d) throw std::invalid_argument("project_inputs: x must be (B, T, D)");
  Projections<T> out;
  out.batch = batch;
  out.steps = steps;
  out.slots = n;
  out.channels = d;
  out.k.resize(rows * n);
  out.q.resize(rows * n);
  out.v.resize(rows * d);
  out.lambda_v.resize(rows * d);
  const auto r = static_cast<Eigen::Index>(rows);
  const auto ed = static_cast<Eigen::Index>(d);
  const auto en = static_cast<Eigen::Index>(n);
  const ConstMap<T> xm(x.data(), r, ed);
  Map<T>(out.k.data(), r, en).noalias() = xm * ConstMap<T>(params.w_k.data(), ed, en);
  Map<T>(out.q.data(), r, en).noalias() = xm * ConstMap<T>(params.w_q.data(), ed, en);
  Map<T>(out.v.data(), r, ed).noalias() = xm * ConstMap<T>(params.w_v.data(), ed, ed);
  Map<T>(out.lambda_v.data(), r, ed).noalias() = xm * ConstMap<T>(params.w_lv.data(), ed, ed);
  rms_rows(out.k, n, params.k_norm);
  rms_rows(out.q, n, params.q_norm);
  for (std::size_t i = 0; i < out.lambda_v.size(); ++i) {
    out.lambda_v[i] = softplus(out.lambda_v[i] + params.b_lv[i % d]) + static_cast<T>(kLambdaVFloor);
  }
  return out;
}

template <std::floating_point T>
LayerOutput<T> filter_readout(const Projections<T>& proj, const filter::Dynamics<T>& dyn, scan::ScanMode mode,
                              bool want_variance) {
  const std::size_t lanes = proj.batch * proj.slots * proj.channels;
  if (proj.steps == 0 || lanes == 0) throw std::invalid_argument("filter_readout: empty input");
  if (dyn.size() != proj.slots * proj.channels) {
    throw std::invalid_argument("filter_readout: dynamics must be (N, D)");
  }
  std::vector<T> phi, drive;
  evidence_terms(proj, phi, drive);
  const std::vector<T> lambda0(lanes, static_cast<T>(kLambda0));
  const std::vector<T> eta0(lanes, static_cast<T>(kEta0));
  const scan::ScanPlan plan{proj.steps, lanes, mode, 0};

  LayerOutput<T> out;
  out.batch = proj.batch;
  out.steps = proj.steps;
  out.channels = proj.channels;
  auto& belief = out.belief;
  if (mode == scan::ScanMode::sequential) {
    belief = filter::recurrent_filter<T>(dyn, phi, drive, lambda0, eta0);
  } else {
    belief.steps = proj.steps;
    belief.lanes = lanes;
    belief.lambda = filter::precision_path<T>(dyn, phi, lambda0, plan);
    phi = {};
    const auto elements = filter::build_affine_elements<T>(dyn, belief.lambda, lambda0, drive);
    drive = {};
    auto mean = filter::mean_path<T>(elements, eta0, belief.lambda, plan);
    belief.eta = std::move(mean.eta);
    belief.mu = std::move(mean.mu);
    belief.gate.resize(elements.size());
    for (std::size_t i = 0; i < elements.size(); ++i) belief.gate[i] = elements[i].f;
  }
  readout<T>(belief.mu, &belief.lambda, proj.q, proj.batch, proj.steps, proj.slots, proj.channels, out.y_mu,
             want_variance ? &out.y_sigma : nullptr);
  return out;
}

template <std::floating_point T>
LayerOutput<T> kla_forward(std::span<const T> x, std::size_t batch, std::size_t steps, const LayerParams<T>& params,
                           bool want_variance, const LayerOptions& options) {
  const auto proj = project_inputs(x, batch, steps, params);
  return filter_readout(proj, layer_dynamics(params, options), options.mode, want_variance);
}

double posterior_noise(std::uint64_t seed, std::size_t sample, std::size_t index) {
  return rng::normal(rng::derive_key({seed, 0x6e6f697365ULL, sample}), index);
}

template <std::floating_point T>
std::vector<T> sample_posterior(const filter::BeliefPath<T>& belief, std::span<const T> q, std::size_t batch,
                                std::size_t slots, std::size_t channels, std::size_t samples, std::uint64_t seed,
                                T variance_scale) {
  if (samples < 1) throw std::invalid_argument("sample_posterior: sample count must be >= 1");
  const std::size_t lanes = batch * slots * channels;
  if (belief.lanes != lanes || q.size() != batch * belief.steps * slots) {
    throw std::invalid_argument("sample_posterior: belief and query shapes do not match");
  }
  const std::size_t per_sample = batch * belief.steps * channels;
  std::vector<T> out(samples * per_sample);
  std::vector<T> z(belief.mu.size());
  std::vector<T> y;
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (!(belief.lambda[i] > T{0})) throw DomainError("sample_posterior: precision must be > 0");
      const T sd = std::sqrt(variance_scale / belief.lambda[i]);
      z[i] = belief.mu[i] + sd * static_cast<T>(posterior_noise(seed, s, i));
    }
    readout<T>(z, nullptr, q, batch, belief.steps, slots, channels, y, nullptr);
    std::copy(y.begin(), y.end(), out.begin() + static_cast<std::ptrdiff_t>(s * per_sample));
  }
  return out;
}

AttentionMatrices materialize_attention_matrix(const LayerParams<double>& params, std::span<const double> x,
                                               std::size_t steps, std::span<const std::size_t> channels,
                                               const LayerOptions& options, std::size_t cap,
                                               bool keep_kernels) {
  if (steps > cap) {
    throw std::invalid_argument("materialize_attention_matrix: T=" + std::to_string(steps) +
                                " exceeds diagnostic cap " + std::to_string(cap));
  }
  const std::size_t d_model = params.d_model;
  const std::size_t slots = params.d_state;
  for (const std::size_t c : channels) {
    if (c >= d_model) throw std::invalid_argument("materialize_attention_matrix: channel out of range");
  }
  const auto proj = project_inputs<double>(x, 1, steps, params);
  const auto out = filter_readout(proj, layer_dynamics(params, options), options.mode, false);
  const auto& belief = out.belief;
  const std::size_t lanes = belief.lanes;

  AttentionMatrices am;
  am.steps = steps;
  am.channels.assign(channels.begin(), channels.end());
  am.matrices.assign(channels.size() * steps * steps, 0.0);
  am.init_term.assign(channels.size() * steps, 0.0);
  am.values.resize(channels.size() * steps);
  if (keep_kernels) am.kernels.assign(channels.size() * slots * steps * steps, 0.0);
  for (std::size_t ci = 0; ci < channels.size(); ++ci) {
    const std::size_t d = channels[ci];
    double* m = am.matrices.data() + ci * steps * steps;
    for (std::size_t t = 0; t < steps; ++t) am.values[ci * steps + t] = proj.v[t * d_model + d];
    for (std::size_t n = 0; n < slots; ++n) {
      const std::size_t l = n * d_model + d;
      for (std::size_t t = 0; t < steps; ++t) {
        const double w = proj.q[t * slots + n] / belief.lambda[t * lanes + l];
        double* kern = keep_kernels ? am.kernels.data() + ((ci * slots + n) * steps + t) * steps : nullptr;
        // prod = prod_{r=s+1..t} f_r, built right to left.
        double prod = 1.0;
        for (std::size_t s = t + 1; s-- > 0;) {
          const double entry = prod * proj.k[s * slots + n] * proj.lambda_v[s * d_model + d];
          m[t * steps + s] += w * entry;
          if (kern) kern[s] = entry;
          prod *= belief.gate[s * lanes + l];
        }
        am.init_term[ci * steps + t] += w * prod * kEta0;
      }
    }
  }
  return am;
}

namespace {

struct MixerSaved {
  MixerConfig config;
  filter::Dynamics<double> dyn;
  std::vector<double> a, p, delta;
  std::vector<double> lambda, eta, gate, z, noise;
};

}  // namespace

ad::Var kla_mixer(ad::Tape& tape, ad::Var q, ad::Var k, ad::Var v, ad::Var lambda_v, ad::Var a_log, ad::Var p,
                  ad::Var dt_raw, const MixerConfig& config) {
  const std::size_t batch = config.batch, steps = config.steps, slots = config.slots, channels = config.channels;
  const std::size_t lanes = batch * slots * channels;
  const std::size_t dyn_size = slots * channels;
  const Tensor& qv = tape.value(q);
  const Tensor& kv = tape.value(k);
  if (qv.size() != batch * steps * slots || kv.size() != qv.size() || tape.value(v).size() != batch * steps * channels ||
      tape.value(lambda_v).size() != batch * steps * channels || tape.value(a_log).size() != dyn_size ||
      tape.value(p).size() != dyn_size || tape.value(dt_raw).size() != dyn_size) {
    throw std::invalid_argument("kla_mixer: input shapes do not match config");
  }
  auto saved = std::make_shared<MixerSaved>();
  saved->config = config;
  filter::OUParams<double> ou;
  ou.a.resize(dyn_size);
  ou.p.resize(dyn_size);
  ou.delta.resize(dyn_size);
  for (std::size_t i = 0; i < dyn_size; ++i) {
    ou.a[i] = std::exp(tape.value(a_log).data[i]);
    ou.p[i] = config.options.zero_process_noise ? 0.0 : tape.value(p).data[i];
    ou.delta[i] = delta_from_raw(tape.value(dt_raw).data[i]);
  }
  saved->dyn = config.options.discretization == ad::Discretization::euler ? filter::euler_discretize(ou)
                                                                          : filter::ou_discretize(ou);
  saved->a = ou.a;
  saved->p = ou.p;
  saved->delta = ou.delta;

  Projections<double> proj;
  proj.batch = batch;
  proj.steps = steps;
  proj.slots = slots;
  proj.channels = channels;
  proj.q = qv.data;
  proj.k = kv.data;
  proj.v = tape.value(v).data;
  proj.lambda_v = tape.value(lambda_v).data;
  auto out = filter_readout(proj, saved->dyn, config.options.mode, false);
  auto& belief = out.belief;
  if (config.sample) {
    saved->noise.resize(belief.mu.size());
    saved->z.resize(belief.mu.size());
    for (std::size_t i = 0; i < belief.mu.size(); ++i) {
      saved->noise[i] = posterior_noise(config.noise_seed, 0, i);
      saved->z[i] = belief.mu[i] + saved->noise[i] / std::sqrt(belief.lambda[i]);
    }
    readout<double>(saved->z, nullptr, proj.q, batch, steps, slots, channels, out.y_mu, nullptr);
  } else {
    saved->z = std::move(belief.mu);
  }
  saved->lambda = std::move(belief.lambda);
  saved->eta = std::move(belief.eta);
  saved->gate = std::move(belief.gate);

  Tensor y({batch, steps, channels}, std::move(out.y_mu));
  return tape.record(std::move(y), {q, k, v, lambda_v, a_log, p, dt_raw}, [=](ad::Tape& t, const Tensor& gy) {
    const MixerSaved& s = *saved;
    const std::size_t total = steps * lanes;
    const Tensor& qv = t.value(q);
    const Tensor& kv = t.value(k);
    const Tensor& vv = t.value(v);
    const Tensor& lvv = t.value(lambda_v);

    // Readout: y[b,t,d] = sum_n q z.
    Tensor dq({batch, steps, slots});
    std::vector<double> d_eta(total), d_lambda(total);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t ti = 0; ti < steps; ++ti) {
        const double* g = gy.data.data() + (b * steps + ti) * channels;
        for (std::size_t n = 0; n < slots; ++n) {
          const std::size_t qi = (b * steps + ti) * slots + n;
          const double qn = qv.data[qi];
          const std::size_t base = ti * lanes + (b * slots + n) * channels;
          double acc = 0;
          for (std::size_t d = 0; d < channels; ++d) {
            const std::size_t i = base + d;
            acc += g[d] * s.z[i];
            const double gz = g[d] * qn;
            const double inv = 1.0 / s.lambda[i];
            d_eta[i] = gz * inv;
            d_lambda[i] = -gz * s.eta[i] * inv * inv;
            if (s.config.sample) d_lambda[i] -= 0.5 * gz * s.noise[i] * inv * std::sqrt(inv);
          }
          dq.data[qi] = acc;
        }
      }
    }

    const std::vector<double> lambda0(lanes, kLambda0);
    const std::vector<double> eta0(lanes, kEta0);
    std::vector<double> da_bar, dp_bar, d_drive, d_phi;
    if (s.config.options.mode == scan::ScanMode::sequential) {
      auto adj = ad::recurrent_filter_adjoint(s.dyn, s.lambda, s.eta, s.gate, lambda0, eta0, d_eta, d_lambda);
      da_bar = std::move(adj.da_bar);
      dp_bar = std::move(adj.dp_bar);
      d_drive = std::move(adj.ddrive);
      d_phi = std::move(adj.dphi);
    } else {
      std::vector<scan::Affine<double>> elements(total);
      for (std::size_t i = 0; i < total; ++i) elements[i].f = s.gate[i];
      const scan::ScanPlan plan{steps, lanes, s.config.options.mode, 0};
      auto affine = ad::affine_scan_adjoint(elements, s.eta, eta0, d_eta, plan);
      elements = {};
      da_bar.assign(dyn_size, 0.0);
      dp_bar.assign(dyn_size, 0.0);
      std::vector<double> dlambda0(lanes, 0.0);
      ad::gate_gradients(s.dyn, s.lambda, lambda0, affine.df, da_bar, dp_bar, d_lambda, dlambda0);
      auto mobius = ad::mobius_path_gradients(s.dyn, s.lambda, lambda0, d_lambda);
      for (std::size_t j = 0; j < dyn_size; ++j) {
        da_bar[j] += mobius.da_bar[j];
        dp_bar[j] += mobius.dp_bar[j];
      }
      d_drive = std::move(affine.db);
      d_phi = std::move(mobius.dphi);
    }
    d_eta = {};
    d_lambda = {};

    // Evidence: phi = k^2 lv, drive = k lv v.
    Tensor dk({batch, steps, slots}), dv({batch, steps, channels}), dlv({batch, steps, channels});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t ti = 0; ti < steps; ++ti) {
        const std::size_t row = (b * steps + ti) * channels;
        for (std::size_t n = 0; n < slots; ++n) {
          const std::size_t ki = (b * steps + ti) * slots + n;
          const double kn = kv.data[ki];
          const std::size_t base = ti * lanes + (b * slots + n) * channels;
          double acc = 0;
          for (std::size_t d = 0; d < channels; ++d) {
            const double db = d_drive[base + d];
            const double dphi = d_phi[base + d];
            const double lv = lvv.data[row + d];
            const double vd = vv.data[row + d];
            acc += db * lv * vd + 2.0 * dphi * kn * lv;
            dv.data[row + d] += db * kn * lv;
            dlv.data[row + d] += db * kn * vd + dphi * kn * kn;
          }
          dk.data[ki] = acc;
        }
      }
    }

    Tensor da_log({slots, channels}), dp({slots, channels}), ddt({slots, channels});
    for (std::size_t j = 0; j < dyn_size; ++j) {
      const auto jac = ad::discretization_jacobian(s.a[j], s.p[j], s.delta[j], s.config.options.discretization);
      const double da = da_bar[j] * jac.da_bar_da + dp_bar[j] * jac.dp_bar_da;
      const double ddelta = da_bar[j] * jac.da_bar_ddelta + dp_bar[j] * jac.dp_bar_ddelta;
      da_log.data[j] = da * s.a[j];
      dp.data[j] = s.config.options.zero_process_noise ? 0.0 : dp_bar[j] * jac.dp_bar_dp;
      const double sg = sigmoid(t.value(dt_raw).data[j]);
      ddt.data[j] = ddelta * (filter::kDeltaMax - filter::kDeltaMin) * sg * (1.0 - sg);
    }

    t.accumulate(q, dq);
    t.accumulate(k, dk);
    t.accumulate(v, dv);
    t.accumulate(lambda_v, dlv);
    t.accumulate(a_log, da_log);
    t.accumulate(p, dp);
    t.accumulate(dt_raw, ddt);
  });
}

#define KLA_INSTANTIATE_LAYER(T)                                                                                     \
  template filter::OUParams<T> ou_params<T>(const LayerParams<T>&, const LayerOptions&);                             \
  template filter::Dynamics<T> layer_dynamics<T>(const LayerParams<T>&, const LayerOptions&);                        \
  template Projections<T> project_inputs<T>(std::span<const T>, std::size_t, std::size_t, const LayerParams<T>&);    \
  template LayerOutput<T> filter_readout<T>(const Projections<T>&, const filter::Dynamics<T>&, scan::ScanMode, bool); \
  template LayerOutput<T> kla_forward<T>(std::span<const T>, std::size_t, std::size_t, const LayerParams<T>&, bool,  \
                                         const LayerOptions&);                                                        \
  template std::vector<T> sample_posterior<T>(const filter::BeliefPath<T>&, std::span<const T>, std::size_t,         \
                                              std::size_t, std::size_t, std::size_t, std::uint64_t, T);

KLA_INSTANTIATE_LAYER(float)
KLA_INSTANTIATE_LAYER(double)

#undef KLA_INSTANTIATE_LAYER

}  // namespace kla::layer
