#ifndef MMSEG_TRAINER_HPP
#define MMSEG_TRAINER_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmseg/losses.hpp"
#include "mmseg/metrics.hpp"
#include "mmseg/network.hpp"
#include "mmseg/optim.hpp"
#include "mmseg/volume.hpp"

namespace mmseg {

struct TrainConfig {
  AdamOptions adam;
  double lr_decay_factor = 0.5;
  int lr_patience = 10;
  int early_stop_patience = 50;
  double min_delta = 1e-4;
  int max_epochs = 300;
  int batch_size = 1;
  std::uint64_t seed = 0;
  double train_ratio = 0.8;

  /// Throws CONFIG_ERROR.
  void validate() const;
};

/// Network and training settings read from one key=value file. Keys:
///   modalities classes base_filters levels dilation_a dilation_b lambda
///   input use_fusion use_correlation pairs
///   lr beta1 beta2 adam_eps lr_decay_factor lr_patience early_stop_patience
///   min_delta max_epochs batch_size seed train_ratio
/// Unknown keys are a CONFIG_ERROR.
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;

  std::string serialize() const;
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double dice_component = 0;
  double corr_component = 0;
  double val_loss = 0;
  double lr = 0;
};

struct TrainState {
  int epoch = 0;
  PlateauSchedule schedule;
  std::vector<EpochRecord> history;
};

/// history.csv: epoch,train_loss,dice_component,corr_component,val_loss,lr
std::string history_csv(const std::vector<EpochRecord>& history);

struct TrainHooks {
  /// Replaces the measured validation loss (schedule harnesses).
  std::function<double(int epoch, double measured)> validation_loss;
  /// Called after each epoch; returning false stops with reason Requested.
  std::function<bool(const EpochRecord&, const Model<float>&)> on_epoch_end;
};

struct TrainResult {
  TrainState state;
  StopReason reason = StopReason::None;
  int best_epoch = 0;
  Model<float> best;
};

/// Inputs for a batch of prepared cases: one (batch,1,D,H,W) tensor per modality.
std::vector<Tensor5<float>> make_inputs(const std::vector<const MultiModalCase*>& cases);
Tensor5<float> make_target(const std::vector<const MultiModalCase*>& cases, Index classes);

/// Crop to the joint nonzero box, resize to the network input and
/// z-normalise every modality.
MultiModalCase prepare_case(const MultiModalCase& c, const Grid3& input);

struct LossBreakdown {
  double total = 0;
  double dice = 0;
  double correlation = 0;
};

/// Loss of one batch; with a tape and `backward`, parameter gradients are
/// accumulated into the model.
LossBreakdown batch_loss(Model<float>& model, const std::vector<const MultiModalCase*>& batch,
                         bool backward);

/// Mean total loss over cases without touching gradients.
double dataset_loss(const Model<float>& model, const std::vector<MultiModalCase>& cases);

/// Train `model` in place on prepared cases. `validation` empty means the
/// training cases double as validation. The best-validation weights are
/// kept in the result and, with `out_dir`, persisted as best.ckpt alongside
/// history.csv. Non-finite losses raise DIVERGENCE.
TrainResult train(Model<float>& model, const TrainConfig& config,
                  const std::vector<MultiModalCase>& training,
                  const std::vector<MultiModalCase>& validation,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const TrainHooks& hooks = {});

/// Per-voxel argmax over class logits, lowest index winning ties.
std::vector<LabelVolume> argmax_labels(const Tensor5<float>& logits);

LabelVolume predict(const Model<float>& model, const MultiModalCase& prepared);

/// Per-case region metrics of predictions against the case labels.
MetricsReport evaluate(const Model<float>& model, const std::vector<MultiModalCase>& prepared);

/// level,unit,gate rows of the modality attention for one prepared case.
std::string attention_csv(const Model<float>& model, const MultiModalCase& prepared);

} // namespace mmseg

#endif
