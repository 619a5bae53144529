#include "mmseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mmseg/checkpoint.hpp"

namespace mmseg {

std::string to_string(StopReason r) {
  switch (r) {
  case StopReason::None: return "NONE";
  case StopReason::EarlyStop: return "EARLY_STOP";
  case StopReason::MaxEpochs: return "MAX_EPOCHS";
  case StopReason::Requested: return "REQUESTED";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (!(adam.lr > 0)) throw Error(ErrorCode::ConfigError, "lr must be > 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1))
    throw Error(ErrorCode::ConfigError, "Adam betas must lie in [0,1)");
  if (!(adam.eps > 0)) throw Error(ErrorCode::ConfigError, "adam_eps must be > 0");
  if (!(lr_decay_factor > 0 && lr_decay_factor <= 1))
    throw Error(ErrorCode::ConfigError, "lr_decay_factor must lie in (0,1]");
  if (lr_patience < 1 || early_stop_patience < 1)
    throw Error(ErrorCode::ConfigError, "patience values must be >= 1");
  if (!(min_delta >= 0)) throw Error(ErrorCode::ConfigError, "min_delta must be >= 0");
  if (max_epochs < 1) throw Error(ErrorCode::ConfigError, "max_epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorCode::ConfigError, "batch_size must be >= 1");
  if (!(train_ratio > 0 && train_ratio <= 1))
    throw Error(ErrorCode::ConfigError, "train_ratio must lie in (0,1]");
}

namespace {

const std::set<std::string> kNetworkKeys = {
    "modalities", "classes", "base_filters", "levels", "dilation_a", "dilation_b",
    "lambda", "input", "use_fusion", "use_correlation", "pairs"};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

template <typename T>
T convert(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  in >> v;
  if (in.fail() || !in.eof())
    throw Error(ErrorCode::ConfigError, "bad value '" + text + "' for " + key);
  return v;
}

} // namespace

std::string RunConfig::serialize() const {
  std::ostringstream out;
  out.precision(17);
  out << network.serialize() << "lr=" << train.adam.lr << '\n'
      << "beta1=" << train.adam.beta1 << '\n'
      << "beta2=" << train.adam.beta2 << '\n'
      << "adam_eps=" << train.adam.eps << '\n'
      << "lr_decay_factor=" << train.lr_decay_factor << '\n'
      << "lr_patience=" << train.lr_patience << '\n'
      << "early_stop_patience=" << train.early_stop_patience << '\n'
      << "min_delta=" << train.min_delta << '\n'
      << "max_epochs=" << train.max_epochs << '\n'
      << "batch_size=" << train.batch_size << '\n'
      << "seed=" << train.seed << '\n'
      << "train_ratio=" << train.train_ratio << '\n';
  return out.str();
}

RunConfig RunConfig::parse(const std::string& text) {
  std::string network_text;
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorCode::ConfigError, "malformed config line '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (kNetworkKeys.count(key))
      network_text += line + '\n';
    else
      kv[key] = trim(line.substr(eq + 1));
  }
  RunConfig rc;
  rc.network = NetworkConfig::parse(network_text);
  auto& t = rc.train;
  for (const auto& [key, value] : kv) {
    if (key == "lr") t.adam.lr = convert<double>(key, value);
    else if (key == "beta1") t.adam.beta1 = convert<double>(key, value);
    else if (key == "beta2") t.adam.beta2 = convert<double>(key, value);
    else if (key == "adam_eps") t.adam.eps = convert<double>(key, value);
    else if (key == "lr_decay_factor") t.lr_decay_factor = convert<double>(key, value);
    else if (key == "lr_patience") t.lr_patience = convert<int>(key, value);
    else if (key == "early_stop_patience") t.early_stop_patience = convert<int>(key, value);
    else if (key == "min_delta") t.min_delta = convert<double>(key, value);
    else if (key == "max_epochs") t.max_epochs = convert<int>(key, value);
    else if (key == "batch_size") t.batch_size = convert<int>(key, value);
    else if (key == "seed") t.seed = convert<std::uint64_t>(key, value);
    else if (key == "train_ratio") t.train_ratio = convert<double>(key, value);
    else throw Error(ErrorCode::ConfigError, "unknown config key '" + key + "'");
  }
  t.validate();
  return rc;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::IoError, "cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << std::setprecision(10) << "epoch,train_loss,dice_component,corr_component,val_loss,lr\n";
  for (const auto& r : history)
    out << r.epoch << ',' << r.train_loss << ',' << r.dice_component << ','
        << r.corr_component << ',' << r.val_loss << ',' << r.lr << '\n';
  return out.str();
}

MultiModalCase prepare_case(const MultiModalCase& c, const Grid3& input) {
  MultiModalCase out = crop_resize(c, input);
  for (auto& m : out.modalities) m = znormalize(m);
  return out;
}

std::vector<Tensor5<float>> make_inputs(const std::vector<const MultiModalCase*>& cases) {
  if (cases.empty()) throw Error(ErrorCode::EmptyCase, "empty batch");
  const Grid3 g = cases.front()->grid();
  const std::size_t nm = cases.front()->modalities.size();
  const Shape5 shape{static_cast<Index>(cases.size()), 1, g.depth, g.height, g.width};
  std::vector<Tensor5<float>> inputs(nm, Tensor5<float>(shape));
  for (std::size_t n = 0; n < cases.size(); ++n) {
    const auto& c = *cases[n];
    if (c.modalities.size() != nm || !(c.grid() == g))
      throw Error(ErrorCode::ShapeMismatch, c.case_id + ": batch members differ in shape");
    for (std::size_t m = 0; m < nm; ++m)
      inputs[m].sample(static_cast<Index>(n)).row(0) =
          c.modalities[m].data.matrix().transpose();
  }
  return inputs;
}

Tensor5<float> make_target(const std::vector<const MultiModalCase*>& cases, Index classes) {
  std::vector<const LabelVolume*> labels;
  for (const auto* c : cases) {
    if (!c->labels) throw Error(ErrorCode::IoError, c->case_id + ": labels required");
    labels.push_back(&*c->labels);
  }
  return one_hot<float>(labels, classes);
}

namespace {

struct LossTerms {
  LossBreakdown breakdown;
  Tensor5<float> probs;
  DiceLossResult<float> dice;
  CorrelationLossResult<float> corr;
};

LossTerms loss_terms(const Model<float>& model, const std::vector<const MultiModalCase*>& batch,
                     ModelTape<float>* tape) {
  const auto& cfg = model.config;
  const bool grad = tape != nullptr;
  const auto out = model_forward(model, make_inputs(batch), tape);
  LossTerms t;
  t.probs = softmax_channels(out.logits);
  t.dice = dice_loss(t.probs, make_target(batch, cfg.classes), static_cast<float>(kDiceEpsilon), grad);
  t.breakdown.dice = t.dice.value;
  if (cfg.use_correlation) {
    t.corr = correlation_loss(out.bottleneck, out.estimates, cfg.pairing, grad);
    t.breakdown.correlation = t.corr.value;
  }
  t.breakdown.total = total_loss(t.breakdown.dice, t.breakdown.correlation, cfg.lambda);
  return t;
}

} // namespace

LossBreakdown batch_loss(Model<float>& model, const std::vector<const MultiModalCase*>& batch,
                         bool backward) {
  if (!backward) return loss_terms(model, batch, nullptr).breakdown;
  ModelTape<float> tape;
  auto t = loss_terms(model, batch, &tape);
  const auto d_logits = softmax_channels_backward(t.probs, t.dice.grad);
  if (model.config.use_correlation) {
    const auto lambda = static_cast<float>(model.config.lambda);
    for (auto& d : t.corr.d_bottleneck) d.data() *= lambda;
    for (auto& d : t.corr.d_estimates) d.data() *= lambda;
    model_backward(model, tape, d_logits, &t.corr.d_bottleneck, &t.corr.d_estimates);
  } else {
    model_backward(model, tape, d_logits);
  }
  return t.breakdown;
}

double dataset_loss(const Model<float>& model, const std::vector<MultiModalCase>& cases) {
  double sum = 0;
  for (const auto& c : cases) sum += loss_terms(model, {&c}, nullptr).breakdown.total;
  return cases.empty() ? 0.0 : sum / static_cast<double>(cases.size());
}

TrainResult train(Model<float>& model, const TrainConfig& config,
                  const std::vector<MultiModalCase>& training,
                  const std::vector<MultiModalCase>& validation,
                  const std::optional<std::filesystem::path>& out_dir,
                  const TrainHooks& hooks) {
  config.validate();
  if (training.empty()) throw Error(ErrorCode::EmptyCase, "training set is empty");
  for (const auto& c : training) model.config.validate_grid(c.grid());
  const auto& val_set = validation.empty() ? training : validation;

  TrainResult result;
  auto& state = result.state;
  state.schedule.lr = config.adam.lr;
  state.schedule.decay_factor = config.lr_decay_factor;
  state.schedule.lr_patience = config.lr_patience;
  state.schedule.stop_patience = config.early_stop_patience;
  state.schedule.min_delta = config.min_delta;
  Adam<float> adam(config.adam);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(training.size());
  result.best = model;

  auto write_history = [&]() {
    if (!out_dir) return;
    std::filesystem::create_directories(*out_dir);
    std::ofstream f(*out_dir / "history.csv", std::ios::trunc);
    if (!f) throw Error(ErrorCode::IoError, "cannot write history.csv");
    f << history_csv(state.history);
  };

  while (result.reason == StopReason::None) {
    const int epoch = ++state.epoch;
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    adam.set_lr(state.schedule.lr);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = state.schedule.lr;
    std::size_t batches = 0;
    for (std::size_t first = 0; first < order.size();
         first += static_cast<std::size_t>(config.batch_size)) {
      std::vector<const MultiModalCase*> batch;
      for (std::size_t i = first;
           i < std::min(order.size(), first + static_cast<std::size_t>(config.batch_size)); ++i)
        batch.push_back(&training[order[i]]);
      model.zero_grad();
      const auto loss = batch_loss(model, batch, true);
      if (!std::isfinite(loss.total)) {
        state.history.push_back(rec);
        write_history();
        std::ostringstream msg;
        msg << "non-finite loss " << loss.total << " at epoch " << epoch;
        throw Error(ErrorCode::Divergence, msg.str());
      }
      adam.step(model);
      rec.train_loss += loss.total;
      rec.dice_component += loss.dice;
      rec.corr_component += loss.correlation;
      ++batches;
    }
    rec.train_loss /= static_cast<double>(batches);
    rec.dice_component /= static_cast<double>(batches);
    rec.corr_component /= static_cast<double>(batches);

    rec.val_loss = dataset_loss(model, val_set);
    if (hooks.validation_loss) rec.val_loss = hooks.validation_loss(epoch, rec.val_loss);
    if (!std::isfinite(rec.val_loss)) {
      state.history.push_back(rec);
      write_history();
      std::ostringstream msg;
      msg << "non-finite validation loss " << rec.val_loss << " at epoch " << epoch;
      throw Error(ErrorCode::Divergence, msg.str());
    }
    state.history.push_back(rec);

    const auto event = state.schedule.observe(rec.val_loss);
    if (event.improved) {
      result.best = model;
      result.best_epoch = epoch;
      if (out_dir) save_checkpoint(*out_dir / "best.ckpt", model);
    }
    write_history();
    if (hooks.on_epoch_end && !hooks.on_epoch_end(rec, model))
      result.reason = StopReason::Requested;
    else if (event.stop)
      result.reason = StopReason::EarlyStop;
    else if (epoch >= config.max_epochs)
      result.reason = StopReason::MaxEpochs;
  }
  return result;
}

std::vector<LabelVolume> argmax_labels(const Tensor5<float>& logits) {
  const Shape5& s = logits.shape();
  const Grid3 g{s.depth, s.height, s.width};
  std::vector<LabelVolume> out;
  for (Index n = 0; n < s.batch; ++n) {
    const auto x = logits.sample(n);
    LabelVolume l;
    l.grid = g;
    l.classes.resize(g.numel());
    for (Index v = 0; v < g.numel(); ++v) {
      Index best = 0;
      for (Index c = 1; c < s.channels; ++c)
        if (x(c, v) > x(best, v)) best = c;
      l.classes[v] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(l));
  }
  return out;
}

LabelVolume predict(const Model<float>& model, const MultiModalCase& prepared) {
  const Grid3& g = prepared.grid();
  if (static_cast<Index>(prepared.modalities.size()) != model.config.modalities)
    throw Error(ErrorCode::ShapeMismatch, prepared.case_id + ": wrong modality count");
  const Index q = model.config.granularity();
  if (g.depth % q || g.height % q || g.width % q)
    throw Error(ErrorCode::ShapeMismatch,
                prepared.case_id + ": grid " + to_string(g) + " not divisible by " +
                    std::to_string(q));
  const auto out = model_forward(model, make_inputs({&prepared}));
  auto labels = argmax_labels(out.logits).front();
  labels.spacing = prepared.modalities.front().spacing;
  return labels;
}

MetricsReport evaluate(const Model<float>& model, const std::vector<MultiModalCase>& prepared) {
  MetricsReport report;
  for (const auto& c : prepared) {
    if (!c.labels) throw Error(ErrorCode::IoError, c.case_id + ": labels required");
    report.cases.push_back(evaluate_case(c.case_id, predict(model, c), *c.labels));
  }
  return report;
}

std::string attention_csv(const Model<float>& model, const MultiModalCase& prepared) {
  const auto out = model_forward(model, make_inputs({&prepared}));
  std::ostringstream csv;
  csv << std::setprecision(8) << "level,unit,gate\n";
  const auto names = model.config.modality_names();
  for (std::size_t l = 0; l < out.attention.size(); ++l) {
    const auto& gates = out.attention[l].modality;
    for (Index u = 0; u < gates.cols(); ++u) {
      const std::string unit =
          u < static_cast<Index>(names.size()) ? names[static_cast<std::size_t>(u)] : "decoder";
      csv << l << ',' << unit << ',' << gates(0, u) << '\n';
    }
  }
  return csv.str();
}

} // namespace mmseg
