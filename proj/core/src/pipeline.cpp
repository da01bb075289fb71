#include "cosynorm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "cosynorm/io.hpp"

namespace cosynorm {

using json = nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kBatchStream = 0xba7c4;
constexpr std::uint64_t kSampleStream = 0x5a3e1;
constexpr std::uint64_t kValStream = 0x7a11d;

std::vector<float> to_vec(std::span<const float> s) { return {s.begin(), s.end()}; }

bool is_judge(const std::string& name) { return name.starts_with(CosyModel::kJudgePrefix); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

std::string_view ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kCtc: return "ctc";
    case Ablation::kSpeaker: return "speaker";
    case Ablation::kPosScale: return "posscale";
  }
  return "none";
}

Ablation parse_ablation(std::string_view name) {
  for (const Ablation a : {Ablation::kNone, Ablation::kCtc, Ablation::kSpeaker, Ablation::kPosScale}) {
    if (ablation_name(a) == name) return a;
  }
  throw ConfigError("unknown ablation \"" + std::string(name) + "\" (expected ctc|speaker|posscale)");
}

void apply_ablation(AppConfig& config, Ablation ablation) {
  switch (ablation) {
    case Ablation::kNone: break;
    case Ablation::kCtc: config.train.lambda_ctc = 0.0; break;
    case Ablation::kSpeaker:
      config.model.decoder.use_speaker = false;
      config.model.duration.use_speaker = false;
      break;
    case Ablation::kPosScale: config.model.decoder.position_scaling = false; break;
  }
}

std::vector<const Utterance*> Dataset::split(std::string_view name) const {
  std::vector<const Utterance*> out;
  for (const auto& r : rows)
    if (r.split == name) out.push_back(&r);
  return out;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d{ToyWorld::load(dir / kWorldFile), {}};
  for (const auto& e : read_manifest(dir / kManifestFile)) {
    Utterance u;
    u.utt_id = e.utt_id;
    u.speaker_id = e.speaker_id;
    u.accent_id = e.accent_id;
    u.split = e.split;
    u.labels = read_labels(dir / e.label_file);
    u.source = read_features(dir / e.source_feature_file);
    u.target = read_features(dir / e.target_feature_file);
    u.signature = d.world.speaker(e.speaker_id).signature;
    d.rows.push_back(std::move(u));
  }
  if (d.rows.empty()) throw IoError(dir.string() + ": manifest has no rows");
  return d;
}

CosyModel::CosyModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config),
      encoder(store, "encoder", config.encoder, seed),
      decoder(store, "decoder", config.decoder, seed),
      duration(store, "duration", config.duration, seed),
      judge(store, "judge", config.encoder, seed) {}

Tensor<float> CosyModel::encode(const FeatureSeq& source) const {
  Tape<float> tape(false);
  return encoder.encode(tape, source).to_tensor();
}

LabelSeq CosyModel::recognize(const FeatureSeq& features) const {
  Tape<float> tape(false);
  const Var<float> lp = judge.ctc_head(tape, judge.encode(tape, features));
  return ctc_greedy_decode<float>(lp.value(), lp.rows(), lp.cols());
}

LossParts accumulate_gradients(CosyModel& model, const TrainConfig& config,
                               std::span<const Utterance* const> batch, std::uint64_t step) {
  LossParts parts;
  if (batch.empty()) return parts;
  const float inv_b = 1.0f / static_cast<float>(batch.size());
  const Rng base(config.seed, kSampleStream);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Utterance& u = *batch[i];
    Rng rng = base.split(step * batch.size() + i);
    Tape<float> tape;
    const Var<float> content = model.encoder.encode(tape, u.source);

    const ConditionMask mask = sample_condition_mask(rng, config.p_uncond, config.p_content_drop);
    const FlowDraw<float> draw = draw_flow<float>(rng, u.target.rows(), u.target.cols());
    const TapeVelocity<float> velocity = [&](Tape<float>& t, Var<float> x, double time) {
      return model.decoder.forward(t, x, time, content, u.signature, mask);
    };
    const Var<float> l_cfm = cfm_loss(tape, velocity, u.target, draw);
    Var<float> total = l_cfm;
    const double cfm = l_cfm.item();
    double ctc = 0.0, dur = 0.0, judge = 0.0;

    if (config.lambda_ctc > 0.0) {
      bool feasible = true;
      const Var<float> l = ctc_loss(model.encoder.ctc_head(tape, content), u.labels, &feasible);
      if (feasible) {
        ctc = l.item();
        total = add(total, scale(l, static_cast<float>(config.lambda_ctc)));
      } else {
        ++parts.ctc_skipped;
      }
    }
    if (config.lambda_dur > 0.0) {
      const Var<float> l = model.duration.cfm_loss(tape, detach(content), u.signature, u.true_ratio(), rng);
      dur = l.item();
      total = add(total, scale(l, static_cast<float>(config.lambda_dur)));
    }
    const double total_value = total.item();
    if (config.train_judge) {
      bool feasible = true;
      const Var<float> l =
          ctc_loss(model.judge.ctc_head(tape, model.judge.encode(tape, u.target)), u.labels, &feasible);
      if (feasible) {
        judge = l.item();
        total = add(total, l);
      }
    }
    if (!std::isfinite(total_value) || !std::isfinite(judge)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << " on " << u.utt_id << ": cfm=" << cfm
          << " ctc=" << ctc << " dur=" << dur << " judge=" << judge;
      throw std::runtime_error(msg.str());
    }
    tape.backward(scale(total, inv_b));
    tape.accumulate_param_grads();

    parts.cfm += cfm * inv_b;
    parts.ctc += ctc * inv_b;
    parts.dur += dur * inv_b;
    parts.judge += judge * inv_b;
    parts.total += total_value * inv_b;
  }
  return parts;
}

Optimizer::Optimizer(const TrainConfig& config, ParameterStore<float>& store)
    : config_(config), store_(store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_.emplace_back(store[i].value.size(), 0.0f);
    if (config.optimizer == "adam") v_.emplace_back(store[i].value.size(), 0.0f);
  }
}

void Optimizer::step() {
  ++t_;
  // Per-group global-norm clipping.
  double norm_sq[2] = {0.0, 0.0};
  for (std::size_t i = 0; i < store_.size(); ++i) {
    const auto& p = store_[i];
    double s = 0.0;
    for (const float g : p.grad) s += static_cast<double>(g) * g;
    norm_sq[is_judge(p.name) ? 1 : 0] += s;
  }
  double factor[2] = {1.0, 1.0};
  for (int g = 0; g < 2; ++g) {
    const double n = std::sqrt(norm_sq[g]);
    if (config_.grad_clip > 0.0 && n > config_.grad_clip) factor[g] = config_.grad_clip / n;
  }

  const double lr = config_.learning_rate;
  const double b1 = config_.momentum, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < store_.size(); ++i) {
    auto& p = store_[i];
    const double f = factor[is_judge(p.name) ? 1 : 0];
    auto& m = m_[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = f * p.grad[k];
      if (config_.optimizer == "adam") {
        auto& v = v_[i];
        m[k] = static_cast<float>(b1 * m[k] + (1.0 - b1) * g);
        v[k] = static_cast<float>(b2 * v[k] + (1.0 - b2) * g * g);
        const double mh = m[k] / c1, vh = v[k] / c2;
        p.value.data[k] -= static_cast<float>(lr * mh / (std::sqrt(vh) + 1e-8));
      } else {
        m[k] = static_cast<float>(b1 * m[k] + g);
        p.value.data[k] -= static_cast<float>(lr * m[k]);
      }
    }
  }
}

double validation_cfm_loss(const CosyModel& model, const TrainConfig& config,
                           std::span<const Utterance* const> rows) {
  if (rows.empty()) throw ConfigError("validation: no rows");
  double sum = 0.0;
  std::size_t n = 0;
  for (const Utterance* u : rows) {
    const Tensor<float> content = model.encode(u->source);
    Rng rng = Rng::for_id(config.seed ^ kValStream, u->utt_id);
    for (std::size_t k = 0; k < config.val_draws; ++k) {
      Tape<float> tape(false);
      const Var<float> c = tape.constant(content);
      const FlowDraw<float> draw = draw_flow<float>(rng, u->target.rows(), u->target.cols());
      const TapeVelocity<float> velocity = [&](Tape<float>& t, Var<float> x, double time) {
        return model.decoder.forward(t, x, time, c, u->signature, ConditionMask{});
      };
      sum += cfm_loss(tape, velocity, u->target, draw).item();
      ++n;
    }
  }
  return sum / static_cast<double>(n);
}

TrainResult train(CosyModel& model, const AppConfig& config, const Dataset& data,
                  const std::function<void(const TrainLogEntry&)>& on_log) {
  const TrainConfig& tc = config.train;
  const auto train_rows = data.split("train");
  if (train_rows.empty()) throw ConfigError("train: manifest has no train rows");
  auto val_rows = data.split("val");
  if (val_rows.empty()) val_rows = train_rows;

  Optimizer opt(tc, model.store);
  Rng batch_rng(tc.seed, kBatchStream);
  TrainResult result;
  std::vector<const Utterance*> batch(tc.batch_size);
  for (std::size_t step = 1; step <= tc.n_steps; ++step) {
    for (auto& b : batch) b = train_rows[batch_rng.below(train_rows.size())];
    model.store.zero_grad();
    TrainLogEntry entry;
    entry.step = step;
    entry.loss = accumulate_gradients(model, tc, batch, step);
    opt.step();
    if (tc.val_every > 0 && step % tc.val_every == 0 && step != tc.n_steps) {
      entry.val_cfm = validation_cfm_loss(model, tc, val_rows);
    }
    if (step == tc.n_steps) entry.val_cfm = validation_cfm_loss(model, tc, val_rows);
    if (on_log && (entry.val_cfm || (tc.log_every > 0 && step % tc.log_every == 0) || step == 1)) {
      on_log(entry);
    }
    result.history.push_back(entry);
  }
  result.val_cfm = tc.n_steps > 0 ? *result.history.back().val_cfm
                                  : validation_cfm_loss(model, tc, val_rows);
  return result;
}

void save_model(const CosyModel& model, const AppConfig& config, Ablation ablation,
                double val_cfm, const std::filesystem::path& path) {
  save_checkpoint(model.store, path);
  json side;
  side["ablation"] = ablation_name(ablation);
  side["val_cfm"] = val_cfm;
  side["parameters"] = model.store.scalar_count();
  side["config"] = json::parse(dump_config(config));
  const std::string text = side.dump(2) + "\n";
  write_bytes(std::vector<unsigned char>(text.begin(), text.end()), path.string() + ".json");
}

LoadedModel load_model(const std::filesystem::path& path) {
  const std::filesystem::path side_path = path.string() + ".json";
  const auto bytes = read_bytes(side_path);
  LoadedModel out;
  try {
    const json side = json::parse(bytes.begin(), bytes.end());
    out.config = parse_config(side.at("config").dump());
    out.ablation = parse_ablation(side.at("ablation").get<std::string>());
    out.val_cfm = side.at("val_cfm").get<double>();
  } catch (const json::exception& e) {
    throw IoError(side_path.string() + ": " + e.what());
  }
  out.model = std::make_unique<CosyModel>(out.config.model, out.config.train.seed);
  load_checkpoint(out.model->store, path);
  return out;
}

std::string_view duration_mode_name(DurationMode m) {
  switch (m) {
    case DurationMode::kInherit: return "inherit";
    case DurationMode::kPredict: return "predict";
    case DurationMode::kFixed: return "fixed";
  }
  return "inherit";
}

DurationMode parse_duration_mode(std::string_view name) {
  for (const DurationMode m : {DurationMode::kInherit, DurationMode::kPredict, DurationMode::kFixed}) {
    if (duration_mode_name(m) == name) return m;
  }
  throw ConfigError("unknown mode \"" + std::string(name) + "\" (expected inherit|predict|fixed)");
}

ConversionResult convert(const CosyModel& model, const FeatureSeq& source,
                         std::span<const float> speaker, const ConvertOptions& options) {
  if (source.rows() == 0) throw ConfigError("convert: empty source");
  if (options.mode == DurationMode::kFixed && options.fixed_len < 1) {
    throw ConfigError("convert: fixed length must be >= 1");
  }
  ConversionResult r;
  r.mode = options.mode;
  r.source_len = source.rows();
  r.seed = options.sampler.seed;

  const Tensor<float> content = model.encode(source);
  const DurationRatio predicted = model.duration.predict(content, speaker, options.sampler);
  r.predicted_ratio = predicted.value;
  switch (options.mode) {
    case DurationMode::kInherit: r.target_len = r.source_len; break;
    case DurationMode::kPredict: r.target_len = predicted.target_length(r.source_len); break;
    case DurationMode::kFixed: r.target_len = options.fixed_len; break;
  }
  r.ratio = static_cast<double>(r.target_len) / static_cast<double>(r.source_len);

  const std::vector<float> spk = to_vec(speaker);
  const BranchVelocity velocity = [&](const Tensor<float>& x, double t, ConditionMask mask) {
    Tape<float> tape(false);
    const Var<float> v =
        model.decoder.forward(tape, tape.constant(x), t, tape.constant(content), spk, mask);
    return to_vec(v.value());
  };
  r.features = euler_sample(velocity, r.target_len, model.config().decoder.feature_dim,
                            options.weights, options.sampler);
  return r;
}

std::string conversion_metadata(const ConversionResult& r) {
  json j;
  j["mode"] = duration_mode_name(r.mode);
  j["source_len"] = r.source_len;
  j["target_len"] = r.target_len;
  j["ratio"] = r.ratio;
  j["predicted_ratio"] = r.predicted_ratio;
  j["seed"] = r.seed;
  return j.dump(2) + "\n";
}

std::size_t edit_distance(const LabelSeq& ref, const LabelSeq& hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

double wer(const LabelSeq& ref, const LabelSeq& hyp) {
  if (ref.empty()) throw std::invalid_argument("wer: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ConfigError("cosine: size mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

EvalReport evaluate(const CosyModel& model, const Dataset& data, std::string_view split,
                    const ConvertOptions& options) {
  const auto rows = data.split(split);
  if (rows.empty()) throw ConfigError("evaluate: split \"" + std::string(split) + "\" is empty");
  EvalReport rep;
  rep.split = split;
  rep.mode = duration_mode_name(options.mode);
  std::size_t ref_total = 0, src_edits = 0, tgt_edits = 0, conv_edits = 0;
  for (const Utterance* u : rows) {
    ConvertOptions opt = options;
    opt.sampler.seed = Rng::for_id(options.sampler.seed, u->utt_id).next_u64();
    const ConversionResult c = convert(model, u->source, u->signature, opt);

    EvalRow row;
    row.utt_id = u->utt_id;
    row.speaker_id = u->speaker_id;
    row.ref_len = u->labels.size();
    row.source_edits = edit_distance(u->labels, model.recognize(u->source));
    row.target_edits = edit_distance(u->labels, model.recognize(u->target));
    row.converted_edits = edit_distance(u->labels, model.recognize(c.features));
    row.speaker_cos = cosine(data.world.extract_signature(c.features), u->signature);
    row.predicted_ratio = c.predicted_ratio;
    row.true_ratio = u->true_ratio();
    row.source_len = u->source.rows();
    row.target_len = u->target.rows();
    row.output_len = c.target_len;

    ref_total += row.ref_len;
    src_edits += row.source_edits;
    tgt_edits += row.target_edits;
    conv_edits += row.converted_edits;
    rep.speaker_cos += row.speaker_cos;
    rep.dur_ratio_mae += std::abs(row.predicted_ratio - row.true_ratio);
    rep.mean_predicted_ratio += row.predicted_ratio;
    rep.mean_true_ratio += row.true_ratio;
    rep.length_ratio += static_cast<double>(row.output_len) / static_cast<double>(row.target_len);
    rep.rows.push_back(std::move(row));
  }
  const double n = static_cast<double>(rep.rows.size());
  rep.wer = static_cast<double>(conv_edits) / static_cast<double>(ref_total);
  rep.source_wer = static_cast<double>(src_edits) / static_cast<double>(ref_total);
  rep.target_wer = static_cast<double>(tgt_edits) / static_cast<double>(ref_total);
  rep.speaker_cos /= n;
  rep.dur_ratio_mae /= n;
  rep.mean_predicted_ratio /= n;
  rep.mean_true_ratio /= n;
  rep.length_ratio /= n;
  return rep;
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
  std::string text;
  for (const auto& r : report.rows) {
    json j;
    j["utt_id"] = r.utt_id;
    j["speaker_id"] = r.speaker_id;
    j["ref_len"] = r.ref_len;
    j["source_edits"] = r.source_edits;
    j["target_edits"] = r.target_edits;
    j["converted_edits"] = r.converted_edits;
    j["speaker_cos"] = r.speaker_cos;
    j["predicted_ratio"] = r.predicted_ratio;
    j["true_ratio"] = r.true_ratio;
    j["source_len"] = r.source_len;
    j["target_len"] = r.target_len;
    j["output_len"] = r.output_len;
    text += j.dump() + "\n";
  }
  json s;
  s["summary"] = {{"split", report.split},           {"mode", report.mode},
                  {"wer", report.wer},               {"source_wer", report.source_wer},
                  {"target_wer", report.target_wer}, {"speaker_cos", report.speaker_cos},
                  {"dur_ratio_mae", report.dur_ratio_mae},
                  {"mean_predicted_ratio", report.mean_predicted_ratio},
                  {"mean_true_ratio", report.mean_true_ratio}, {"length_ratio", report.length_ratio},
                  {"rows", report.rows.size()}};
  text += s.dump() + "\n";
  write_bytes(std::vector<unsigned char>(text.begin(), text.end()), path);
}

std::string summary_table(const EvalReport& r) {
  std::ostringstream out;
  out << "split " << r.split << ", mode " << r.mode << ", " << r.rows.size() << " utterances\n";
  out << "  metric          value\n";
  out << "  WER source      " << fmt("%7.2f%%", 100.0 * r.source_wer) << "\n";
  out << "  WER converted   " << fmt("%7.2f%%", 100.0 * r.wer) << "\n";
  out << "  WER target      " << fmt("%7.2f%%", 100.0 * r.target_wer) << "\n";
  out << "  speaker cos     " << fmt("%8.4f", r.speaker_cos) << "\n";
  out << "  ratio MAE       " << fmt("%8.4f", r.dur_ratio_mae) << "\n";
  out << "  ratio pred/true " << fmt("%8.4f", r.mean_predicted_ratio) << " /"
      << fmt("%7.4f", r.mean_true_ratio) << "\n";
  out << "  out/tgt length  " << fmt("%8.4f", r.length_ratio) << "\n";
  return out.str();
}

}  // namespace cosynorm
