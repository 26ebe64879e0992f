#include "tstok/io.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tstok {

namespace {

template <class T>
void read_field(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(const std::string& s, std::mt19937_64& rng) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw std::runtime_error("checkpoint: malformed rng_state");
}

Json parameters_json(const ParameterList& params) {
  Json j = Json::object();
  for (const auto* p : params) j[p->name] = tensor_to_json(p->value);
  return j;
}

void load_parameters(const Json& j, const ParameterList& params, const std::string& section) {
  if (!j.is_object()) throw std::runtime_error("checkpoint: section '" + section + "' must be an object");
  if (j.size() != params.size()) {
    throw std::runtime_error("checkpoint: section '" + section + "' has " + std::to_string(j.size()) +
                             " tensors, model expects " + std::to_string(params.size()));
  }
  for (auto* p : params) {
    if (!j.contains(p->name)) {
      throw std::runtime_error("checkpoint: section '" + section + "' lacks '" + p->name + "'");
    }
    Tensor t = tensor_from_json(j.at(p->name));
    if (t.shape() != p->value.shape()) {
      throw std::runtime_error("checkpoint: '" + p->name + "' has shape " + shape_string(t.shape()) +
                               ", model expects " + shape_string(p->value.shape()));
    }
    p->value = std::move(t);
  }
}

Json range_json(const TimeRange& r) { return Json::array({r.begin, r.end}); }

TimeRange range_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 2) throw std::runtime_error("split range must be [begin, end]");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>()};
}

}  // namespace

Json to_json(const VqVaeConfig& c) {
  return Json{{"codebook_size", c.codebook_size},
              {"code_dim", c.code_dim},
              {"compression", c.compression},
              {"num_residual_layers", c.num_residual_layers},
              {"residual_hidden", c.residual_hidden},
              {"block_hidden", c.block_hidden},
              {"commitment_weight", c.commitment_weight},
              {"learning_rate", c.learning_rate},
              {"iterations", c.iterations},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"instance_norm", c.instance_norm}};
}

VqVaeConfig vqvae_config_from_json(const Json& j, VqVaeConfig c) {
  read_field(j, "codebook_size", c.codebook_size);
  read_field(j, "code_dim", c.code_dim);
  read_field(j, "compression", c.compression);
  read_field(j, "num_residual_layers", c.num_residual_layers);
  read_field(j, "residual_hidden", c.residual_hidden);
  read_field(j, "block_hidden", c.block_hidden);
  read_field(j, "commitment_weight", c.commitment_weight);
  read_field(j, "learning_rate", c.learning_rate);
  read_field(j, "iterations", c.iterations);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "seed", c.seed);
  read_field(j, "instance_norm", c.instance_norm);
  c.validate();
  return c;
}

Json to_json(const ForecasterConfig& c) {
  return Json{{"model_dim", c.model_dim},
              {"hidden_dim", c.hidden_dim},
              {"num_heads", c.num_heads},
              {"num_layers", c.num_layers},
              {"dropout", c.dropout},
              {"lookback", c.lookback},
              {"horizon", c.horizon},
              {"learning_rate", c.learning_rate},
              {"scheduler", "one-cycle"},
              {"iterations", c.iterations},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"architecture", to_string(c.architecture)},
              {"representation", to_string(c.representation)},
              {"mlp_hidden", c.mlp_hidden},
              {"mlp_dropout", c.mlp_dropout},
              {"stats_hidden", c.stats_hidden}};
}

ForecasterConfig forecaster_config_from_json(const Json& j, ForecasterConfig c) {
  read_field(j, "model_dim", c.model_dim);
  read_field(j, "hidden_dim", c.hidden_dim);
  read_field(j, "num_heads", c.num_heads);
  read_field(j, "num_layers", c.num_layers);
  read_field(j, "dropout", c.dropout);
  read_field(j, "lookback", c.lookback);
  read_field(j, "horizon", c.horizon);
  read_field(j, "learning_rate", c.learning_rate);
  read_field(j, "iterations", c.iterations);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "seed", c.seed);
  read_field(j, "mlp_hidden", c.mlp_hidden);
  read_field(j, "mlp_dropout", c.mlp_dropout);
  read_field(j, "stats_hidden", c.stats_hidden);
  if (j.contains("scheduler") && j.at("scheduler") != "one-cycle") {
    throw std::invalid_argument("forecaster config: only the one-cycle scheduler is supported");
  }
  if (j.contains("architecture")) c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  if (j.contains("representation")) c.representation = parse_representation(j.at("representation").get<std::string>());
  c.validate();
  return c;
}

Json to_json(const SyntheticSpec& s) {
  return Json{{"kind", to_string(s.kind)},
              {"sensors", s.sensors},
              {"steps", s.steps},
              {"examples", s.examples},
              {"noise_std", s.noise_std},
              {"min_components", s.min_components},
              {"max_components", s.max_components},
              {"min_period", s.min_period},
              {"max_period", s.max_period},
              {"spike_ratio", s.spike_ratio},
              {"spike_amplitude", s.spike_amplitude},
              {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const Json& j, SyntheticSpec s) {
  if (j.contains("kind")) s.kind = parse_synthetic_kind(j.at("kind").get<std::string>());
  read_field(j, "sensors", s.sensors);
  read_field(j, "steps", s.steps);
  read_field(j, "examples", s.examples);
  read_field(j, "noise_std", s.noise_std);
  read_field(j, "min_components", s.min_components);
  read_field(j, "max_components", s.max_components);
  read_field(j, "min_period", s.min_period);
  read_field(j, "max_period", s.max_period);
  read_field(j, "spike_ratio", s.spike_ratio);
  read_field(j, "spike_amplitude", s.spike_amplitude);
  read_field(j, "seed", s.seed);
  s.validate();
  return s;
}

Json to_json(const MaskSpec& m) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < m.rows; ++i) {
    Json r = Json::array();
    for (std::size_t t = 0; t < m.steps; ++t) r.push_back(m.observed(i, t) ? 1 : 0);
    rows.push_back(std::move(r));
  }
  return Json{{"mask", std::move(rows)}, {"ratio", m.ratio}};
}

MaskSpec mask_from_json(const Json& j) {
  MaskSpec m;
  const Json& rows = j.at("mask");
  if (!rows.is_array()) throw std::runtime_error("mask must be an array of rows");
  m.rows = rows.size();
  m.steps = m.rows ? rows[0].size() : 0;
  m.ratio = j.value("ratio", 0.0);
  for (const auto& r : rows) {
    if (!r.is_array() || r.size() != m.steps) throw std::runtime_error("mask rows must have equal length");
    for (const auto& v : r) {
      const int f = v.get<int>();
      if (f != 0 && f != 1) throw std::runtime_error("mask entries must be 0 or 1");
      m.observed_flags.push_back(static_cast<std::uint8_t>(f));
    }
  }
  return m;
}

Json to_json(const SplitSpec& s) {
  return Json{{"train", range_json(s.train)},
              {"val", range_json(s.val)},
              {"test", range_json(s.test)},
              {"window_length", s.window_length},
              {"stride", s.stride}};
}

SplitSpec split_from_json(const Json& j) {
  SplitSpec s;
  s.train = range_from_json(j.at("train"));
  s.val = range_from_json(j.at("val"));
  s.test = range_from_json(j.at("test"));
  s.window_length = j.at("window_length").get<std::size_t>();
  s.stride = j.at("stride").get<std::size_t>();
  s.validate();
  return s;
}

Json tensor_to_json(const Tensor& t) {
  return Json{{"shape", t.shape()}, {"data", t.values()}};
}

Tensor tensor_from_json(const Json& j) {
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> data = j.at("data").get<std::vector<double>>();
  if (shape_size(shape) != data.size()) {
    throw std::runtime_error("tensor of shape " + shape_string(shape) + " has " +
                             std::to_string(data.size()) + " values");
  }
  return Tensor(std::move(shape), std::move(data));
}

Json checkpoint_json(const VqVae& model, const Forecaster* forecaster) {
  // Parameter lists are only read here.
  auto& m = const_cast<VqVae&>(model);
  Json j{{"format_version", kCheckpointFormatVersion},
         {"config", to_json(model.config())},
         {"codebook", tensor_to_json(model.codebook().value)},
         {"encoder", parameters_json(m.encoder_parameters())},
         {"decoder", parameters_json(m.decoder_parameters())},
         {"rng_state", rng_to_string(model.rng())}};
  if (forecaster != nullptr) {
    auto& f = const_cast<Forecaster&>(*forecaster);
    j["forecaster"] = Json{{"config", to_json(forecaster->config())},
                           {"code_dim", forecaster->code_dim()},
                           {"compression", forecaster->compression()},
                           {"parameters", parameters_json(f.parameters())},
                           {"rng_state", rng_to_string(forecaster->rng())}};
  }
  return j;
}

Checkpoint checkpoint_from_json(const Json& j) {
  for (const char* key : {"format_version", "config", "codebook", "encoder", "decoder", "rng_state"}) {
    if (!j.contains(key)) throw std::runtime_error(std::string("checkpoint: missing field '") + key + "'");
  }
  if (j.at("format_version").get<int>() != kCheckpointFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported format_version " + j.at("format_version").dump());
  }
  Checkpoint c;
  c.tokenizer = std::make_unique<VqVae>(vqvae_config_from_json(j.at("config")));
  load_parameters(j.at("encoder"), c.tokenizer->encoder_parameters(), "encoder");
  load_parameters(j.at("decoder"), c.tokenizer->decoder_parameters(), "decoder");
  Tensor cb = tensor_from_json(j.at("codebook"));
  if (cb.shape() != c.tokenizer->codebook().value.shape()) {
    throw std::runtime_error("checkpoint: codebook shape " + shape_string(cb.shape()) +
                             " does not match config");
  }
  c.tokenizer->codebook().value = std::move(cb);
  rng_from_string(j.at("rng_state").get<std::string>(), c.tokenizer->rng());
  if (j.contains("forecaster")) {
    const Json& f = j.at("forecaster");
    c.forecaster = std::make_unique<Forecaster>(forecaster_config_from_json(f.at("config")),
                                                f.at("code_dim").get<std::size_t>(),
                                                f.at("compression").get<std::size_t>());
    load_parameters(f.at("parameters"), c.forecaster->parameters(), "forecaster.parameters");
    rng_from_string(f.at("rng_state").get<std::string>(), c.forecaster->rng());
  }
  return c;
}

std::string dump_json(const Json& j) { return j.dump(1) + "\n"; }
std::string dump_json_compact(const Json& j) { return j.dump() + "\n"; }

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const VqVae& model, const Forecaster* forecaster) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << dump_json_compact(checkpoint_json(model, forecaster));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(read_json_file(path));
}

}  // namespace tstok
