// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/training.hpp"

#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "xtal2dos/error.hpp"
#include "xtal2dos/log.hpp"

namespace xtal2dos {

using json = nlohmann::ordered_json;

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  try {
    out = j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type: " + j.dump());
  }
}

// One entry per TrainConfig member, for both directions.
template <typename Fn>
void for_each_field(TrainConfig& c, Fn&& fn) {
  fn("encoder", c.encoder);
  fn("d_atom", c.d_atom);
  fn("d_edge", c.d_edge);
  fn("d_hid", c.d_hid);
  fn("encoder_layers", c.encoder_layers);
  fn("encoder_heads", c.encoder_heads);
  fn("n_max_nbr", c.n_max_nbr);
  fn("r_cut", c.r_cut);
  fn("decoder", c.decoder);
  fn("l_y", c.l_y);
  fn("chunk", c.chunk);
  fn("decoder_layers", c.decoder_layers);
  fn("decoder_heads", c.decoder_heads);
  fn("ff", c.ff);
  fn("activation", c.activation);
  fn("leaky_slope", c.leaky_slope);
  fn("head", c.head);
  fn("loss", c.loss);
  fn("batch_size", c.batch_size);
  fn("epochs", c.epochs);
  fn("lr", c.lr);
  fn("beta1", c.beta1);
  fn("beta2", c.beta2);
  fn("adam_eps", c.adam_eps);
  fn("clip_norm", c.clip_norm);
  fn("seed", c.seed);
  fn("train_data", c.train_data);
  fn("val_data", c.val_data);
  fn("grid", c.grid);
  fn("bin_width", c.bin_width);
  fn("split_train", c.split_train);
  fn("split_val", c.split_val);
  fn("split_test", c.split_test);
}

json config_json(const TrainConfig& config) {
  json j = json::object();
  TrainConfig copy = config;
  for_each_field(copy, [&](const char* key, auto& value) { j[key] = value; });
  return j;
}

TrainConfig config_from(const json& j, const TrainConfig& base) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c = base;
  std::map<std::string, bool> seen;
  for (auto it = j.begin(); it != j.end(); ++it) seen[it.key()] = false;
  for_each_field(c, [&](const char* key, auto& value) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    read_field(*it, key, value);
    seen[key] = true;
  });
  std::string unknown;
  for (const auto& [key, used] : seen) {
    if (!used) unknown += (unknown.empty() ? "" : ", ") + key;
  }
  if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
  return c;
}

template <typename Fn>
void try_parse(std::vector<std::string>& problems, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    problems.emplace_back(e.what());
  }
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_uint(const std::string& in, std::size_t& pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw FormatError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += static_cast<std::size_t>(bytes);
  return v;
}

constexpr char kMagic[8] = {'X', '2', 'D', 'O', 'S', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

std::string TrainConfig::to_json(int indent) const { return config_json(*this).dump(indent); }

TrainConfig TrainConfig::from_json(const std::string& text, const TrainConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from(j, base);
}

TrainConfig TrainConfig::from_json(const std::string& text) { return from_json(text, TrainConfig{}); }

std::vector<std::string> TrainConfig::problems() const {
  std::vector<std::string> out;
  if (encoder != "unimp" && encoder != "gcn") out.push_back("encoder must be unimp or gcn, got '" + encoder + "'");
  if (d_atom == 0) out.emplace_back("d_atom must be positive");
  if (d_edge < 2) out.emplace_back("d_edge must be at least 2");
  if (d_hid == 0) out.emplace_back("d_hid must be positive");
  if (encoder_layers == 0) out.emplace_back("encoder_layers must be at least 1");
  if (encoder == "unimp" && (encoder_heads == 0 || (d_hid != 0 && d_hid % encoder_heads != 0))) {
    out.push_back("d_hid " + std::to_string(d_hid) + " is not divisible by encoder_heads " +
                  std::to_string(encoder_heads));
  }
  if (n_max_nbr == 0) out.emplace_back("n_max_nbr must be positive");
  if (!(r_cut > 0.0)) out.emplace_back("r_cut must be positive");
  try_parse(out, [&] { (void)ad::parse_activation(activation, leaky_slope); });
  try_parse(out, [&] { (void)parse_grid_kind(grid); });
  bool decoder_ok = true;
  try_parse(out, [&] {
    try {
      (void)parse_decoder_kind(decoder);
    } catch (...) {
      decoder_ok = false;
      throw;
    }
  });
  if (decoder_ok) {
    for (auto& p : model_config().decoder.problems()) out.push_back(std::move(p));
  }
  bool pairing_ok = true;
  try_parse(out, [&] {
    try {
      (void)parse_head_norm(head);
      (void)parse_loss_kind(loss);
    } catch (...) {
      pairing_ok = false;
      throw;
    }
  });
  if (pairing_ok) {
    const LossKind lk = parse_loss_kind(loss);
    const HeadNorm hn = parse_head_norm(head);
    if (lk == LossKind::kKl && hn != HeadNorm::kSoftmax) out.push_back("loss kl requires head softmax, got " + head);
    if (lk == LossKind::kGeneralizedKl && hn != HeadNorm::kSoftplus) {
      out.push_back("loss generalized_kl requires head softplus, got " + head);
    }
  }
  if (batch_size == 0) out.emplace_back("batch_size must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) out.emplace_back("lr must be a finite non-negative number");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) out.emplace_back("beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) out.emplace_back("beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) out.emplace_back("adam_eps must be positive");
  if (!(clip_norm >= 0.0)) out.emplace_back("clip_norm must be non-negative (0 disables)");
  if (!(bin_width > 0.0)) out.emplace_back("bin_width must be positive");
  const double ratio_sum = split_train + split_val + split_test;
  if (split_train < 0.0 || split_val < 0.0 || split_test < 0.0 || std::abs(ratio_sum - 1.0) > 1e-9) {
    out.emplace_back("split ratios must be non-negative and sum to 1");
  }
  return out;
}

void TrainConfig::validate() const {
  const auto list = problems();
  if (list.empty()) return;
  std::string message = "invalid config:";
  for (const auto& p : list) message += "\n  - " + p;
  throw ConfigError(message);
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  const ad::Activation act = ad::parse_activation(activation, leaky_slope);
  m.encoder.kind = encoder;
  m.encoder.d_atom = d_atom;
  m.encoder.d_edge = d_edge;
  m.encoder.d_hid = d_hid;
  m.encoder.layers = encoder_layers;
  m.encoder.heads = encoder_heads;
  m.encoder.activation = act;
  m.decoder.kind = parse_decoder_kind(decoder);
  m.decoder.l_y = l_y;
  m.decoder.d_hid = d_hid;
  m.decoder.chunk = chunk;
  m.decoder.layers = decoder_layers;
  m.decoder.heads = decoder_heads;
  m.decoder.ff = ff;
  m.decoder.activation = act;
  m.head = parse_head_norm(head);
  return m;
}

GaussianBasis TrainConfig::basis() const {
  GaussianBasis b;
  b.count = d_edge;
  b.r_cut = r_cut;
  return b;
}

void AdamState::reset(std::span<Parameter* const> params) {
  m.clear();
  v.clear();
  for (const Parameter* p : params) {
    m.emplace_back(p->size(), 0.0);
    v.emplace_back(p->size(), 0.0);
  }
  t = 0;
}

void adam_step(std::span<Parameter* const> params, AdamState& state, const AdamOptions& options) {
  if (state.m.size() != params.size()) state.reset(params);
  for (const Parameter* p : params) {
    for (double g : p->grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p->name);
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(options.beta1, t);
  const double c2 = 1.0 - std::pow(options.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.size()) throw DimensionError("adam_step: state size mismatch for " + p.name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i];
      m[i] = options.beta1 * m[i] + (1.0 - options.beta1) * g;
      v[i] = options.beta2 * v[i] + (1.0 - options.beta2) * g * g;
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p.value[i] -= options.lr * m_hat / (std::sqrt(v_hat) + options.eps);
    }
  }
}

double clip_gradient_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Parameter* p : params) {
      for (double& g : p->grad) g *= s;
    }
  }
  return norm;
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

Trainer::Trainer(const TrainConfig& config) : config_(config), rng_(mix64(config.seed) ^ 0x5348554646ULL) {
  config_.validate();
  model_ = std::make_unique<Model>(config_.model_config(), config_.seed);
  adam_.reset(model_->parameters());
}

void Trainer::set_bin_width(double bin_width) {
  if (!(bin_width > 0.0) || !std::isfinite(bin_width)) throw ConfigError("bin_width must be positive and finite");
  config_.bin_width = bin_width;
}

void Trainer::set_epochs(std::size_t epochs) {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  config_.epochs = epochs;
}

GraphBatch Trainer::batch_of(const Dataset& data, std::span<const std::size_t> indices) const {
  std::vector<const CrystalGraph*> graphs;
  graphs.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= data.size()) throw InvalidArgumentError("sample index " + std::to_string(i) + " out of range");
    const Sample& s = data.samples[i];
    if (s.target.values.size() != config_.l_y) {
      throw ValidationError("sample " + s.graph.id + " has " + std::to_string(s.target.values.size()) +
                            " target bins, config l_y is " + std::to_string(config_.l_y));
    }
    graphs.push_back(&s.graph);
  }
  return make_batch(graphs, config_.basis(), config_.d_atom);
}

EpochStats Trainer::train_epoch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ValidationError("training split is empty");
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(indices.begin(), indices.end());
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_.below(i)]);

  const LossKind loss_kind = parse_loss_kind(config_.loss);
  const AdamOptions options{config_.lr, config_.beta1, config_.beta2, config_.adam_eps};
  const auto& params = model_->parameters();
  double loss_sum = 0.0;
  const auto batches = make_batches(order, config_.batch_size);
  for (const auto& batch_indices : batches) {
    GraphBatch batch = batch_of(data, batch_indices);
    std::vector<double> target;
    target.reserve(batch_indices.size() * config_.l_y);
    for (std::size_t i : batch_indices) {
      const auto& v = data.samples[i].target.values;
      target.insert(target.end(), v.begin(), v.end());
    }
    for (Parameter* p : params) p->zero_grad();
    Tape tape;
    ModelOutput out = model_->forward(tape, batch, ad::Mode::kTrain);
    Var l = loss(loss_kind, out.prediction, target);
    const double value = l.item();
    if (!std::isfinite(value)) throw NumericError("non-finite loss in epoch " + std::to_string(epoch_ + 1));
    tape.backward(l);
    clip_gradient_norm(params, config_.clip_norm);
    adam_step(params, adam_, options);
    loss_sum += value;
  }
  ++epoch_;
  EpochStats stats;
  stats.epoch = epoch_;
  stats.loss = loss_sum / static_cast<double>(batches.size());
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  logger().info("epoch {} loss {:.6g} ({:.3f} s)", stats.epoch, stats.loss, stats.seconds);
  return stats;
}

std::vector<std::vector<double>> Trainer::predict(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<std::vector<double>> rows;
  rows.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); i += config_.batch_size) {
    const std::size_t end = std::min(indices.size(), i + config_.batch_size);
    const auto chunk = indices.subspan(i, end - i);
    GraphBatch batch = batch_of(data, chunk);
    Tape tape;
    ModelOutput out = model_->forward(tape, batch, ad::Mode::kEval);
    const auto values = out.prediction.values();
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      rows.emplace_back(values.begin() + static_cast<std::ptrdiff_t>(r * config_.l_y),
                        values.begin() + static_cast<std::ptrdiff_t>((r + 1) * config_.l_y));
    }
  }
  return rows;
}

MetricReport Trainer::evaluate(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ValidationError("evaluation split is empty");
  const auto predictions = predict(data, indices);
  std::vector<SampleMetrics> samples;
  samples.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Sample& s = data.samples[indices[r]];
    samples.push_back(sample_metrics(s.graph.id, s.target.values, predictions[r], config_.bin_width));
  }
  return make_report(std::move(samples));
}

std::string Trainer::predict_csv(const Dataset& data, std::span<const std::size_t> indices) {
  const auto predictions = predict(data, indices);
  std::string out = "id,position,prediction,target\n";
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Sample& s = data.samples[indices[r]];
    for (std::size_t k = 0; k < config_.l_y; ++k) {
      out += s.graph.id;
      out += ',';
      out += std::to_string(k);
      out += ',';
      out += format_double(predictions[r][k]);
      out += ',';
      out += format_double(s.target.values[k]);
      out += '\n';
    }
  }
  return out;
}

namespace {

struct TensorRef {
  std::string name;
  ad::Shape shape;
  std::vector<double>* data;
};

std::vector<TensorRef> checkpoint_tensors(Model& model, AdamState& adam) {
  std::vector<TensorRef> out;
  const auto& params = model.parameters();
  for (Parameter* p : params) out.push_back({p->name, p->shape, &p->value});
  for (std::size_t k = 0; k < params.size(); ++k) {
    out.push_back({"adam.m:" + params[k]->name, params[k]->shape, &adam.m[k]});
    out.push_back({"adam.v:" + params[k]->name, params[k]->shape, &adam.v[k]});
  }
  for (auto& [name, state] : model.batch_norm_states()) {
    const ad::Shape shape{state->running_mean.size()};
    out.push_back({name + ".running_mean", shape, &state->running_mean});
    out.push_back({name + ".running_var", shape, &state->running_var});
  }
  return out;
}

}  // namespace

std::string Trainer::serialize() const {
  auto& self = const_cast<Trainer&>(*this);
  const auto tensors = checkpoint_tensors(*self.model_, self.adam_);
  json header;
  header["format"] = "xtal2dos-checkpoint";
  header["config"] = config_json(config_);
  header["epoch"] = epoch_;
  header["adam_t"] = adam_.t;
  header["rng"] = rng_.state();
  auto manifest = json::array();
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    manifest.push_back(json{{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.data->size();
  }
  header["tensors"] = std::move(manifest);
  const std::string text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out += text;
  put_u64(out, offset);
  out.reserve(out.size() + offset * 8);
  for (const auto& t : tensors) {
    for (double v : *t.data) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

std::unique_ptr<Trainer> Trainer::deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw FormatError("not a checkpoint file (bad magic bytes)");
  }
  std::size_t pos = sizeof kMagic;
  const auto version = static_cast<std::uint32_t>(get_uint(bytes, pos, 4));
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t header_len = get_uint(bytes, pos, 8);
  if (header_len > bytes.size() - pos) throw FormatError("checkpoint truncated in header");
  json header;
  try {
    header = json::parse(bytes.substr(pos, header_len));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  pos += header_len;
  const std::uint64_t count = get_uint(bytes, pos, 8);
  if (count > (bytes.size() - pos) / 8 || bytes.size() - pos != count * 8) {
    throw FormatError("checkpoint blob size does not match its header");
  }

  std::unique_ptr<Trainer> trainer;
  try {
    if (header.value("format", "") != "xtal2dos-checkpoint") throw FormatError("checkpoint header has no format tag");
    trainer = std::make_unique<Trainer>(config_from(header.at("config"), TrainConfig{}));
    trainer->epoch_ = header.at("epoch").get<std::size_t>();
    trainer->adam_.t = header.at("adam_t").get<std::uint64_t>();
    trainer->rng_.set_state(header.at("rng").get<std::string>());
    auto tensors = checkpoint_tensors(*trainer->model_, trainer->adam_);
    std::map<std::string, TensorRef*> by_name;
    for (auto& t : tensors) by_name[t.name] = &t;
    const auto& manifest = header.at("tensors");
    if (manifest.size() != tensors.size()) {
      throw FormatError("checkpoint has " + std::to_string(manifest.size()) + " tensors, model expects " +
                        std::to_string(tensors.size()));
    }
    for (const auto& entry : manifest) {
      const std::string name = entry.at("name").get<std::string>();
      const auto it = by_name.find(name);
      if (it == by_name.end()) throw FormatError("checkpoint tensor '" + name + "' is not part of the model");
      TensorRef& ref = *it->second;
      const auto shape = entry.at("shape").get<ad::Shape>();
      if (shape != ref.shape) {
        throw FormatError("checkpoint tensor '" + name + "' has shape " + ad::to_string(shape) + ", model expects " +
                          ad::to_string(ref.shape));
      }
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (offset + ref.data->size() > count) throw FormatError("checkpoint tensor '" + name + "' overruns the blob");
      std::size_t p = pos + offset * 8;
      for (double& v : *ref.data) v = std::bit_cast<double>(get_uint(bytes, p, 8));
      by_name.erase(it);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  return trainer;
}

void Trainer::save(const std::filesystem::path& path) const {
  const std::string bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::unique_ptr<Trainer> Trainer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

std::string train_log_row(const EpochStats& stats, const MetricReport* val) {
  std::string row = std::to_string(stats.epoch) + "," + format_double(stats.loss) + ",";
  if (val && val->r2) row += format_double(*val->r2);
  row += ",";
  if (val && val->wd) row += format_double(*val->wd);
  row += "," + format_double(stats.seconds);
  return row;
}

}  // namespace xtal2dos
