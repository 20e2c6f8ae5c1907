#include "disdyn/neural.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "disdyn/errors.hpp"

namespace disdyn::neural {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Family f) {
  switch (f) {
    case Family::MlpAe: return "mlp";
    case Family::MlpSd: return "mlp_sd";
    case Family::Vae: return "vae";
    case Family::VaeSd: return "vae_sd";
    case Family::VaeSsd: return "vae_ssd";
    case Family::Lstm: return "lstm";
  }
  return "unknown";
}

Family parse_family(std::string_view name) {
  for (Family f : {Family::MlpAe, Family::MlpSd, Family::Vae, Family::VaeSd, Family::VaeSsd, Family::Lstm}) {
    if (to_string(f) == name) return f;
  }
  if (name == "mlp_ae") return Family::MlpAe;
  throw ConfigError("unknown model family '" + std::string(name) + "'");
}

std::string_view to_string(SupScaling s) { return s == SupScaling::Linear ? "linear" : "none"; }

SupScaling parse_scaling(std::string_view name) {
  if (name == "linear") return SupScaling::Linear;
  if (name == "none") return SupScaling::None;
  throw ConfigError("unknown supervision scaling '" + std::string(name) + "'");
}

std::string_view to_string(TeacherForcing t) {
  switch (t) {
    case TeacherForcing::Full: return "full";
    case TeacherForcing::Partial: return "partial";
    case TeacherForcing::None: return "none";
  }
  return "unknown";
}

TeacherForcing parse_teacher_forcing(std::string_view name) {
  if (name == "full") return TeacherForcing::Full;
  if (name == "partial") return TeacherForcing::Partial;
  if (name == "none" || name == "no") return TeacherForcing::None;
  throw ConfigError("unknown teacher forcing mode '" + std::string(name) + "'");
}

bool is_vae(Family f) { return f == Family::Vae || f == Family::VaeSd || f == Family::VaeSsd; }

bool is_supervised(Family f) { return f == Family::MlpSd || f == Family::VaeSd || f == Family::VaeSsd; }

void ModelSpec::validate() const {
  if (input_steps == 0 || output_steps == 0) throw ConfigError("input and output steps must be positive");
  if (output_steps > input_steps) {
    throw ConfigError("output_steps (" + std::to_string(output_steps) + ") may not exceed input_steps (" +
                      std::to_string(input_steps) + ")");
  }
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must lie in [0, 1)");
  if (family == Family::Lstm) {
    if (lstm.num_layers == 0 || lstm.hidden_size == 0) throw ConfigError("LSTM needs at least one layer and unit");
    return;
  }
  if (hidden.empty()) throw ConfigError("hidden layer list may not be empty");
  for (auto h : hidden) {
    if (h == 0) throw ConfigError("hidden layers need at least one unit");
  }
  if (latent_size == 0) throw ConfigError("latent_size must be positive");
  if (is_vae(family) && !(decoder_gamma > 0.0)) throw ConfigError("decoder_gamma must be positive");
  if (!(supervision_delta >= 0.0)) throw ConfigError("supervision_delta must be non-negative");
  if (!is_supervised(family) && supervision_delta != 0.0) {
    throw ConfigError("supervision_delta only applies to supervised families, not " +
                      std::string(to_string(family)));
  }
  if (is_supervised(family)) {
    if (latent_size < factor_count()) {
      throw ConfigError("latent_size " + std::to_string(latent_size) + " is smaller than the " +
                        std::to_string(factor_count()) + " supervised factors");
    }
    if (sup_scaling == SupScaling::Linear) {
      if (factor_ranges.size() != factor_count()) throw ConfigError("linear scaling needs one range per factor");
      for (const auto& r : factor_ranges) {
        if (!(r.min < r.max)) throw ConfigError("linear scaling needs min < max for every factor");
      }
    }
  }
}

ModelSpec default_spec(Family family, SystemKind system) {
  ModelSpec s;
  s.family = family;
  s.system = system;
  s.sup_scaling = (family == Family::MlpSd || family == Family::VaeSsd) ? SupScaling::Linear : SupScaling::None;
  s.supervision_delta = is_supervised(family) ? 0.1 : 0.0;
  if (is_supervised(family)) s.factor_ranges = datagen::training_ranges(system);
  return s;
}

void to_json(json& j, const ModelSpec& s) {
  json ranges = json::array();
  for (const auto& r : s.factor_ranges) ranges.push_back({r.min, r.max});
  j = json{
      {"family", std::string(to_string(s.family))},
      {"system", std::string(dynsys::to_string(s.system))},
      {"input_steps", s.input_steps},
      {"output_steps", s.output_steps},
      {"hidden", s.hidden},
      {"latent_size", s.latent_size},
      {"layer_norm_latent", s.layer_norm_latent},
      {"decoder_gamma", s.decoder_gamma},
      {"supervision_delta", s.supervision_delta},
      {"sup_scaling", std::string(to_string(s.sup_scaling))},
      {"factor_ranges", ranges},
      {"leaky_slope", s.leaky_slope},
      {"lstm",
       {{"num_layers", s.lstm.num_layers},
        {"hidden_size", s.lstm.hidden_size},
        {"teacher_forcing", std::string(to_string(s.lstm.teacher_forcing))}}},
      {"seed", s.seed},
  };
}

void from_json(const json& j, ModelSpec& s) {
  static const std::vector<std::string> known = {
      "family",      "system",          "input_steps",   "output_steps", "hidden",
      "latent_size", "layer_norm_latent", "decoder_gamma", "supervision_delta", "sup_scaling",
      "factor_ranges", "leaky_slope",   "lstm",          "seed"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown model spec key '" + key + "'");
    }
  }
  if (!j.contains("family") || !j.contains("system")) throw ConfigError("model spec needs 'family' and 'system'");
  try {
    const Family family = parse_family(j.at("family").get<std::string>());
    const SystemKind system = dynsys::parse_system(j.at("system").get<std::string>());
    s = default_spec(family, system);
    if (j.contains("input_steps")) s.input_steps = j["input_steps"].get<std::size_t>();
    if (j.contains("output_steps")) s.output_steps = j["output_steps"].get<std::size_t>();
    if (j.contains("hidden")) s.hidden = j["hidden"].get<std::vector<std::size_t>>();
    if (j.contains("latent_size")) s.latent_size = j["latent_size"].get<std::size_t>();
    if (j.contains("layer_norm_latent")) s.layer_norm_latent = j["layer_norm_latent"].get<bool>();
    if (j.contains("decoder_gamma")) s.decoder_gamma = j["decoder_gamma"].get<double>();
    if (j.contains("supervision_delta")) s.supervision_delta = j["supervision_delta"].get<double>();
    if (j.contains("sup_scaling")) s.sup_scaling = parse_scaling(j["sup_scaling"].get<std::string>());
    if (j.contains("factor_ranges")) {
      s.factor_ranges.clear();
      for (const auto& r : j["factor_ranges"]) s.factor_ranges.push_back({r.at(0).get<double>(), r.at(1).get<double>()});
    }
    if (j.contains("leaky_slope")) s.leaky_slope = j["leaky_slope"].get<double>();
    if (j.contains("lstm")) {
      const auto& l = j["lstm"];
      for (const auto& [key, _] : l.items()) {
        if (key != "num_layers" && key != "hidden_size" && key != "teacher_forcing") {
          throw ConfigError("unknown lstm key '" + key + "'");
        }
      }
      if (l.contains("num_layers")) s.lstm.num_layers = l["num_layers"].get<std::size_t>();
      if (l.contains("hidden_size")) s.lstm.hidden_size = l["hidden_size"].get<std::size_t>();
      if (l.contains("teacher_forcing")) s.lstm.teacher_forcing = parse_teacher_forcing(l["teacher_forcing"].get<std::string>());
    }
    if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model spec: ") + e.what());
  }
}

std::vector<double> scale_latent(std::span<const double> mu, std::span<const Range> ranges) {
  if (mu.size() != ranges.size()) {
    throw ShapeError("scale_latent: " + std::to_string(mu.size()) + " latents but " + std::to_string(ranges.size()) +
                     " ranges");
  }
  std::vector<double> out(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    if (!(ranges[i].min < ranges[i].max)) throw ConfigError("scale_latent: degenerate factor range");
    out[i] = mu[i] * (ranges[i].max - ranges[i].min) + ranges[i].min;
  }
  return out;
}

std::vector<double> reparameterize(const GaussianLatent& latent, std::span<const double> eps) {
  if (eps.size() != latent.mu.size() || latent.log_sigma.size() != latent.mu.size()) {
    throw ShapeError("reparameterize: noise length " + std::to_string(eps.size()) + " vs latent size " +
                     std::to_string(latent.mu.size()));
  }
  std::vector<double> z(eps.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = latent.mu[i] + std::exp(latent.log_sigma[i]) * eps[i];
  return z;
}

ad::Var reparameterize(ad::Var mu, ad::Var log_sigma, ad::Var eps) {
  return ad::add(mu, ad::mul(ad::exp(log_sigma), eps));
}

ad::Tensor Predictor::predict_batch(const ad::Tensor& windows) const {
  const std::size_t width = output_steps() * state_dim();
  ad::Tensor out(windows.rows(), width);
  for (std::size_t r = 0; r < windows.rows(); ++r) {
    const auto y = predict(windows.row_span(r));
    if (y.size() != width) throw ShapeError("predictor returned " + std::to_string(y.size()) + " values, expected " + std::to_string(width));
    std::copy(y.begin(), y.end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  build();
  initialize();
}

std::size_t Model::add_param(std::string name, std::size_t rows, std::size_t cols) {
  params_.push_back({std::move(name), ad::Tensor(rows, cols)});
  is_head_.push_back(false);
  return params_.size() - 1;
}

Model::Dense Model::add_dense(const std::string& name, std::size_t in, std::size_t out) {
  const std::size_t w = add_param(name + ".weight", in, out);
  const std::size_t b = add_param(name + ".bias", 1, out);
  return {w, b};
}

void Model::build() {
  const std::size_t sd = spec_.state_dim();
  if (spec_.family == Family::Lstm) {
    const std::size_t h = spec_.lstm.hidden_size;
    for (std::size_t l = 0; l < spec_.lstm.num_layers; ++l) {
      const std::string p = "lstm." + std::to_string(l);
      const std::size_t in = l == 0 ? sd : h;
      LstmLayer layer{};
      layer.w_ih = add_param(p + ".w_ih", in, 4 * h);
      layer.w_hh = add_param(p + ".w_hh", h, 4 * h);
      layer.bias = add_param(p + ".bias", 1, 4 * h);
      is_head_[layer.w_ih] = is_head_[layer.w_hh] = true;
      lstm_layers_.push_back(layer);
    }
    out_head_ = add_dense("lstm.out", h, sd);
    is_head_[out_head_.weight] = true;
    return;
  }

  std::size_t width = spec_.input_size();
  for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
    encoder_.push_back(add_dense("enc." + std::to_string(i), width, spec_.hidden[i]));
    width = spec_.hidden[i];
  }
  if (spec_.layer_norm_latent) {
    ln_gain_ = add_param("enc.ln.gain", 1, width);
    ln_bias_ = add_param("enc.ln.bias", 1, width);
  }
  mu_head_ = add_dense(is_vae(spec_.family) ? "enc.mu" : "enc.latent", width, spec_.latent_size);
  is_head_[mu_head_.weight] = true;
  if (is_vae(spec_.family)) {
    log_sigma_head_ = add_dense("enc.log_sigma", width, spec_.latent_size);
    is_head_[log_sigma_head_.weight] = true;
  }
  width = spec_.latent_size;
  for (std::size_t i = spec_.hidden.size(); i-- > 0;) {
    decoder_.push_back(add_dense("dec." + std::to_string(decoder_.size()), width, spec_.hidden[i]));
    width = spec_.hidden[i];
  }
  out_head_ = add_dense("dec.out", width, spec_.output_size());
  is_head_[out_head_.weight] = true;
}

void Model::initialize() {
  Rng rng(spec_.seed);
  const double slope = spec_.leaky_slope;
  const double kaiming_gain = std::sqrt(2.0 / (1.0 + slope * slope));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.name.ends_with(".gain")) {
      p.value.fill(1.0);
      continue;
    }
    if (p.value.rows() == 1 && (p.name.ends_with(".bias"))) continue;  // zero biases
    const double fan_in = static_cast<double>(p.value.rows());
    const double fan_out = static_cast<double>(p.value.cols());
    const double bound = is_head_[i] ? std::sqrt(6.0 / (fan_in + fan_out))
                                     : kaiming_gain * std::sqrt(3.0 / fan_in);
    for (double& w : p.value.data()) w = rng.uniform(-bound, bound);
  }
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

ad::Parameter& Model::parameter(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw ConfigError("model has no parameter '" + std::string(name) + "'");
}

Bindings Model::bind(ad::Tape& tape) const {
  Bindings b;
  b.reserve(params_.size());
  for (const auto& p : params_) b.push_back(tape.parameter(p.value));
  return b;
}

ad::Var Model::apply(const Bindings& b, Dense d, ad::Var x) const {
  return ad::add(ad::matmul(x, b[d.weight]), b[d.bias]);
}

Encoding Model::encode(const Bindings& b, ad::Var x) const {
  if (spec_.family == Family::Lstm) throw ConfigError("encode() is not defined for the LSTM family");
  if (x.shape().cols != spec_.input_size()) {
    throw ShapeError("encode: expected input width " + std::to_string(spec_.input_size()) + ", got " +
                     std::to_string(x.shape().cols));
  }
  ad::Var h = x;
  for (const auto& layer : encoder_) h = ad::leaky_relu(apply(b, layer, h), spec_.leaky_slope);
  if (ln_gain_) h = ad::layer_norm(h, b[*ln_gain_], b[*ln_bias_]);
  Encoding e;
  e.mu = apply(b, mu_head_, h);
  if (is_vae(spec_.family)) e.log_sigma = apply(b, log_sigma_head_, h);
  return e;
}

ad::Var Model::decode(const Bindings& b, ad::Var z) const {
  if (spec_.family == Family::Lstm) throw ConfigError("decode() is not defined for the LSTM family");
  if (z.shape().cols != spec_.latent_size) {
    throw ShapeError("decode: expected latent width " + std::to_string(spec_.latent_size) + ", got " +
                     std::to_string(z.shape().cols));
  }
  ad::Var h = z;
  for (const auto& layer : decoder_) h = ad::leaky_relu(apply(b, layer, h), spec_.leaky_slope);
  return apply(b, out_head_, h);
}

ad::Var Model::lstm_forward(const Bindings& b, ad::Var context, std::size_t horizon, const ad::Tensor* teacher,
                            TeacherForcing mode, Rng* rng) const {
  if (spec_.family != Family::Lstm) throw ConfigError("lstm_forward() on a non-LSTM model");
  ad::Tape& tape = *context.tape();
  const std::size_t sd = spec_.state_dim();
  const std::size_t batch = context.shape().rows;
  if (context.shape().cols == 0 || context.shape().cols % sd != 0) {
    throw ShapeError("lstm_forward: context width " + std::to_string(context.shape().cols) +
                     " is not a positive multiple of the state size");
  }
  if (horizon == 0) return tape.constant(ad::Tensor(batch, 0));
  if (mode != TeacherForcing::None) {
    if (teacher == nullptr) throw ConfigError("lstm_forward: teacher forcing requested without ground truth");
    if (teacher->rows() != batch || teacher->cols() < (horizon - 1) * sd) {
      throw ShapeError("lstm_forward: teacher tensor " + ad::to_string(teacher->shape()) + " too small");
    }
    if (mode == TeacherForcing::Partial && rng == nullptr) throw ConfigError("lstm_forward: partial forcing needs an rng");
  }

  const std::size_t hs = spec_.lstm.hidden_size;
  std::vector<ad::Var> h(lstm_layers_.size()), c(lstm_layers_.size());
  for (std::size_t l = 0; l < lstm_layers_.size(); ++l) {
    h[l] = tape.constant(ad::Tensor(batch, hs));
    c[l] = tape.constant(ad::Tensor(batch, hs));
  }
  auto step = [&](ad::Var x) {
    for (std::size_t l = 0; l < lstm_layers_.size(); ++l) {
      const auto& L = lstm_layers_[l];
      ad::Var pre = ad::add(ad::add(ad::matmul(x, b[L.w_ih]), ad::matmul(h[l], b[L.w_hh])), b[L.bias]);
      ad::Var i_gate = ad::sigmoid(ad::slice(pre, 0, hs));
      ad::Var f_gate = ad::sigmoid(ad::slice(pre, hs, 2 * hs));
      ad::Var g_gate = ad::tanh(ad::slice(pre, 2 * hs, 3 * hs));
      ad::Var o_gate = ad::sigmoid(ad::slice(pre, 3 * hs, 4 * hs));
      c[l] = ad::add(ad::mul(f_gate, c[l]), ad::mul(i_gate, g_gate));
      h[l] = ad::mul(o_gate, ad::tanh(c[l]));
      x = h[l];
    }
    return apply(b, out_head_, h.back());
  };

  const std::size_t n_ctx = context.shape().cols / sd;
  ad::Var y;
  for (std::size_t t = 0; t < n_ctx; ++t) y = step(ad::slice(context, t * sd, (t + 1) * sd));

  std::vector<ad::Var> outputs{y};
  for (std::size_t j = 1; j < horizon; ++j) {
    bool use_truth = mode == TeacherForcing::Full;
    if (mode == TeacherForcing::Partial) use_truth = rng->bernoulli(kPartialTeacherProbability);
    ad::Var x = outputs.back();
    if (use_truth) {
      ad::Tensor truth(batch, sd);
      for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t k = 0; k < sd; ++k) truth(r, k) = (*teacher)(r, (j - 1) * sd + k);
      }
      x = tape.constant(std::move(truth));
    }
    outputs.push_back(step(x));
  }
  return ad::concat(outputs);
}

GaussianLatent Model::encode(std::span<const double> x) const {
  ad::Tape tape(false);
  const Bindings b = bind(tape);
  ad::Var xv = tape.constant(ad::Tensor(1, x.size(), std::vector<double>(x.begin(), x.end())));
  const Encoding e = encode(b, xv);
  GaussianLatent out;
  out.mu = e.mu.value().vector();
  if (e.log_sigma.valid()) out.log_sigma = e.log_sigma.value().vector();
  return out;
}

std::vector<double> Model::decode(std::span<const double> z) const {
  ad::Tape tape(false);
  const Bindings b = bind(tape);
  ad::Var zv = tape.constant(ad::Tensor(1, z.size(), std::vector<double>(z.begin(), z.end())));
  return decode(b, zv).value().vector();
}

ad::Tensor Model::predict_batch(const ad::Tensor& windows) const {
  if (windows.cols() != spec_.input_size()) {
    throw ShapeError("predict: expected window width " + std::to_string(spec_.input_size()) + ", got " +
                     std::to_string(windows.cols()));
  }
  ad::Tape tape(false);
  const Bindings b = bind(tape);
  ad::Var x = tape.constant_view(windows);
  if (spec_.family == Family::Lstm) {
    return lstm_forward(b, x, spec_.output_steps, nullptr, TeacherForcing::None, nullptr).value();
  }
  return decode(b, encode(b, x).mu).value();
}

std::vector<double> Model::predict(std::span<const double> window) const {
  return predict_batch(ad::Tensor(1, window.size(), std::vector<double>(window.begin(), window.end()))).vector();
}

void Model::save(const fs::path& dir, const json& training_state) const {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<double> flat;
  flat.reserve(parameter_count());
  json table = json::array();
  for (const auto& p : params_) {
    table.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
    flat.insert(flat.end(), p.value.data().begin(), p.value.data().end());
  }
  datagen::write_f64_file(dir / "params.bin", flat);
  json meta = {
      {"format", "DISDYN-CHECKPOINT"},
      {"format_version", 1},
      {"model_spec", spec_},
      {"parameters", table},
      {"params_bytes", flat.size() * 8},
      {"params_crc32", datagen::crc32_of(flat)},
      {"training_state", training_state.is_null() ? json::object() : training_state},
  };
  std::ofstream out(dir / "meta.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << "\n";
}

Model Model::load(const fs::path& dir, json* training_state) {
  json meta;
  {
    std::ifstream in(dir / "meta.json");
    if (!in) throw IoError("missing checkpoint meta.json in " + dir.string());
    try {
      meta = json::parse(in);
    } catch (const json::exception& e) {
      throw IoError("checkpoint meta.json is not valid JSON: " + std::string(e.what()));
    }
  }
  try {
    if (meta.at("format").get<std::string>() != "DISDYN-CHECKPOINT" || meta.at("format_version").get<int>() != 1) {
      throw IoError("unsupported checkpoint format in " + dir.string());
    }
    Model model(meta.at("model_spec").get<ModelSpec>());
    const auto& table = meta.at("parameters");
    if (table.size() != model.params_.size()) throw IoError("checkpoint parameter table does not match the model");
    for (std::size_t i = 0; i < table.size(); ++i) {
      const auto& p = model.params_[i];
      if (table[i].at("name").get<std::string>() != p.name || table[i].at("rows").get<std::size_t>() != p.value.rows() ||
          table[i].at("cols").get<std::size_t>() != p.value.cols()) {
        throw IoError("checkpoint parameter " + std::to_string(i) + " does not match '" + p.name + "'");
      }
    }
    const auto flat = datagen::read_f64_file(dir / "params.bin", model.parameter_count());
    if (datagen::crc32_of(flat) != meta.at("params_crc32").get<std::uint32_t>()) {
      throw IoError("params.bin: checksum mismatch");
    }
    std::size_t offset = 0;
    for (auto& p : model.params_) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), p.value.size(), p.value.data().begin());
      offset += p.value.size();
    }
    if (training_state != nullptr) *training_state = meta.value("training_state", json::object());
    return model;
  } catch (const json::exception& e) {
    throw IoError("checkpoint meta.json: " + std::string(e.what()));
  }
}

std::size_t expected_parameter_count(const ModelSpec& spec) {
  const std::size_t sd = spec.state_dim();
  if (spec.family == Family::Lstm) {
    const std::size_t h = spec.lstm.hidden_size;
    std::size_t n = 0;
    for (std::size_t l = 0; l < spec.lstm.num_layers; ++l) {
      const std::size_t in = l == 0 ? sd : h;
      n += in * 4 * h + h * 4 * h + 4 * h;
    }
    return n + h * sd + sd;
  }
  auto dense = [](std::size_t in, std::size_t out) { return in * out + out; };
  std::size_t n = 0;
  std::size_t width = spec.input_size();
  for (auto h : spec.hidden) {
    n += dense(width, h);
    width = h;
  }
  if (spec.layer_norm_latent) n += 2 * width;
  n += dense(width, spec.latent_size) * (is_vae(spec.family) ? 2 : 1);
  width = spec.latent_size;
  for (auto it = spec.hidden.rbegin(); it != spec.hidden.rend(); ++it) {
    n += dense(width, *it);
    width = *it;
  }
  return n + dense(width, spec.output_size());
}

}  // namespace disdyn::neural
