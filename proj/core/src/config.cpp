#include "cosynorm/config.hpp"

#include <json.hpp>
#include <set>
#include <type_traits>

#include "cosynorm/io.hpp"

namespace cosynorm {

using json = nlohmann::ordered_json;

namespace {

template <typename V>
void visit(V& v, DatagenConfig& c) {
  v("n_speakers", c.n_speakers);
  v("n_l2_speakers", c.n_l2_speakers);
  v("n_sentences", c.n_sentences);
  v("vocab_size", c.vocab_size);
  v("feature_dim", c.feature_dim);
  v("speaker_dim", c.speaker_dim);
  v("accent_dim", c.accent_dim);
  v("min_label_len", c.min_label_len);
  v("max_label_len", c.max_label_len);
  v("min_symbol_frames", c.min_symbol_frames);
  v("max_symbol_frames", c.max_symbol_frames);
  v("symbol_scale", c.symbol_scale);
  v("timbre_gain", c.timbre_gain);
  v("noise_std", c.noise_std);
  v("stretch", c.stretch);
  v("jitter", c.jitter);
  v("substitutions_per_accent", c.substitutions_per_accent);
  v("substitution_strength", c.substitution_strength);
  v("accent_colour", c.accent_colour);
  v("min_prompt_intensity", c.min_prompt_intensity);
  v("max_prompt_intensity", c.max_prompt_intensity);
  v("n_val", c.n_val);
  v("n_test", c.n_test);
  v("accent_threshold", c.accent_threshold);
  v("min_per_speaker", c.min_per_speaker);
}

template <typename V>
void visit(V& v, EncoderConfig& c) {
  v("model_dim", c.model_dim);
  v("n_layers", c.n_layers);
  v("n_heads", c.n_heads);
  v("frontend_stride", c.frontend_stride);
  v("ffn_mult", c.ffn_mult);
  v("kernel", c.kernel);
}

template <typename V>
void visit(V& v, DecoderConfig& c) {
  v("model_dim", c.model_dim);
  v("n_layers", c.n_layers);
  v("n_heads", c.n_heads);
  v("time_emb_dim", c.time_emb_dim);
  v("ffn_mult", c.ffn_mult);
  v("position_scaling", c.position_scaling);
  v("use_speaker", c.use_speaker);
}

template <typename V>
void visit(V& v, DurationConfig& c) {
  v("model_dim", c.model_dim);
  v("n_layers", c.n_layers);
  v("n_heads", c.n_heads);
  v("time_emb_dim", c.time_emb_dim);
  v("ffn_mult", c.ffn_mult);
  v("use_speaker", c.use_speaker);
}

template <typename V>
void visit(V& v, TrainConfig& c) {
  v("lambda_ctc", c.lambda_ctc);
  v("lambda_dur", c.lambda_dur);
  v("optimizer", c.optimizer);
  v("learning_rate", c.learning_rate);
  v("momentum", c.momentum);
  v("beta2", c.beta2);
  v("grad_clip", c.grad_clip);
  v("n_steps", c.n_steps);
  v("batch_size", c.batch_size);
  v("seed", c.seed);
  v("p_uncond", c.p_uncond);
  v("p_content_drop", c.p_content_drop);
  v("log_every", c.log_every);
  v("val_every", c.val_every);
  v("val_draws", c.val_draws);
  v("train_judge", c.train_judge);
}

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void operator()(const char* key, T& field) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const json& value = j_.at(key);
    const std::string where = path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!value.is_boolean()) throw ConfigError(where + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!value.is_number_integer() || (value.is_number_integer() && !value.is_number_unsigned() &&
                                         value.get<long long>() < 0)) {
        throw ConfigError(where + ": expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!value.is_number()) throw ConfigError(where + ": expected a number");
    } else {
      if (!value.is_string()) throw ConfigError(where + ": expected a string");
    }
    field = value.get<T>();
  }

  const json& child(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  bool has(const char* key) const { return j_.contains(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(path_ + ": unknown key \"" + key + "\"");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

struct Writer {
  json j = json::object();
  template <typename T>
  void operator()(const char* key, T& field) {
    j[key] = field;
  }
};

template <typename C>
void read_section(Reader& parent, const char* key, const std::string& path, C& config) {
  if (!parent.has(key)) return;
  Reader r(parent.child(key), path + "." + key);
  visit(r, config);
  r.finish();
}

template <typename C>
json write_section(C config) {
  Writer w;
  visit(w, config);
  return w.j;
}

json parse_text(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (lambda_ctc < 0.0 || lambda_dur < 0.0) throw ConfigError("train: loss weights must be >= 0");
  if (optimizer != "adam" && optimizer != "sgd") {
    throw ConfigError("train: optimizer must be \"adam\" or \"sgd\"");
  }
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("train: momentum and beta2 must lie in [0, 1)");
  }
  if (grad_clip < 0.0) throw ConfigError("train: grad_clip must be >= 0");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (p_uncond < 0.0 || p_content_drop < 0.0 || p_uncond + p_content_drop > 1.0) {
    throw ConfigError("train: dropout probabilities must be >= 0 and sum to at most 1");
  }
  if (val_draws == 0) throw ConfigError("train: val_draws must be positive");
}

void AppConfig::resolve() {
  data.validate();
  model.encoder.input_dim = data.feature_dim;
  model.encoder.vocab_size = data.vocab_size;
  model.decoder.feature_dim = data.feature_dim;
  model.decoder.content_dim = model.encoder.model_dim;
  model.decoder.speaker_dim = data.speaker_dim;
  model.duration.content_dim = model.encoder.model_dim;
  model.duration.speaker_dim = data.speaker_dim;
  model.encoder.validate();
  model.decoder.validate();
  model.duration.validate();
  train.validate();
}

AppConfig parse_config(const std::string& json_text) {
  const json j = parse_text(json_text);
  AppConfig c;
  Reader root(j, "config");
  read_section(root, "data", "config", c.data);
  if (root.has("model")) {
    Reader model(root.child("model"), "config.model");
    read_section(model, "encoder", "config.model", c.model.encoder);
    read_section(model, "decoder", "config.model", c.model.decoder);
    read_section(model, "duration", "config.model", c.model.duration);
    model.finish();
  }
  read_section(root, "train", "config", c.train);
  root.finish();
  c.resolve();
  return c;
}

AppConfig load_config(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return parse_config(std::string(bytes.begin(), bytes.end()));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string dump_config(const AppConfig& config) {
  json j;
  j["data"] = write_section(config.data);
  j["model"]["encoder"] = write_section(config.model.encoder);
  j["model"]["decoder"] = write_section(config.model.decoder);
  j["model"]["duration"] = write_section(config.model.duration);
  j["train"] = write_section(config.train);
  return j.dump(2) + "\n";
}

DatagenConfig parse_datagen_config(const std::string& json_text) {
  const json j = parse_text(json_text);
  DatagenConfig c;
  Reader r(j, "data");
  visit(r, c);
  r.finish();
  c.validate();
  return c;
}

std::string dump_datagen_config(const DatagenConfig& config) { return write_section(config).dump(); }

}  // namespace cosynorm
