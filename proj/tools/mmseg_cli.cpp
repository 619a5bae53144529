#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "mmseg/checkpoint.hpp"
#include "mmseg/image.hpp"
#include "mmseg/phantom.hpp"
#include "mmseg/trainer.hpp"
#include "mmseg/volume_io.hpp"

namespace fs = std::filesystem;
using namespace mmseg;

namespace {

Grid3 parse_shape(const std::string& text) {
  std::vector<Index> dims;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) dims.push_back(std::stoll(item));
  if (dims.size() == 1) return {dims[0], dims[0], dims[0]};
  if (dims.size() == 3) return {dims[0], dims[1], dims[2]};
  throw CLI::ValidationError("--shape", "expected N or D,H,W");
}

fs::path manifest_path(const fs::path& data) {
  return fs::is_directory(data) ? data / "manifest.csv" : data;
}

std::vector<MultiModalCase> load_cases(const fs::path& data, std::size_t modalities) {
  std::vector<MultiModalCase> cases;
  for (const auto& e : read_manifest(manifest_path(data), modalities)) cases.push_back(load_case(e));
  if (cases.empty()) throw Error(ErrorCode::EmptyCase, "no cases in " + data.string());
  return cases;
}

std::vector<MultiModalCase> prepare_all(const std::vector<MultiModalCase>& cases,
                                        const Grid3& input) {
  std::vector<MultiModalCase> out;
  for (const auto& c : cases) out.push_back(prepare_case(c, input));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  f << text;
}

struct PhantomArgs {
  fs::path out;
  std::uint64_t seed = 0;
  int cases = 4;
  std::string shape = "32";
  double noise = 0.05;
};

int make_phantom(const PhantomArgs& a) {
  PhantomConfig cfg;
  cfg.seed = a.seed;
  cfg.n_cases = a.cases;
  cfg.shape = parse_shape(a.shape);
  cfg.noise_std = a.noise;
  const auto manifest = write_dataset(a.out, generate_phantom(cfg));
  std::cout << "wrote " << cfg.n_cases << " cases, manifest " << manifest.string() << '\n';
  return 0;
}

struct AnalyzeArgs {
  fs::path data;
  fs::path out;
  int bins = 32;
};

int analyze_correlation(const AnalyzeArgs& a) {
  const auto cases = load_cases(a.data, 4);
  fs::create_directories(a.out);
  std::ostringstream csv;
  csv << std::setprecision(10) << "case_id,modality_a,modality_b,pearson,off_diagonal_fraction\n";
  for (const auto& c : cases)
    for (std::size_t i = 0; i < c.modalities.size(); ++i)
      for (std::size_t j = i + 1; j < c.modalities.size(); ++j) {
        const auto& ma = c.modalities[i];
        const auto& mb = c.modalities[j];
        const auto h = joint_histogram(ma, mb, a.bins);
        const std::string stem = c.case_id + "_" + ma.tag + "_" + mb.tag;
        write_pgm(a.out / (stem + ".pgm"), histogram_image(h));
        write_histogram_text(a.out / (stem + ".txt"), h);
        csv << c.case_id << ',' << ma.tag << ',' << mb.tag << ',' << pearson(ma, mb) << ','
            << h.off_diagonal_fraction() << '\n';
      }
  write_text(a.out / "pearson.csv", csv.str());
  std::cout << csv.str();
  return 0;
}

struct TrainArgs {
  std::optional<fs::path> config;
  fs::path data;
  fs::path out;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  bool no_fusion = false;
  bool no_correlation = false;
  std::optional<std::string> pairs;
  std::optional<int> epochs;
  std::optional<std::string> input;
};

int train_command(const TrainArgs& a) {
  RunConfig rc = a.config ? RunConfig::load(*a.config) : RunConfig{};
  if (!a.config) rc.network.input = {32, 32, 32};
  if (a.seed) rc.train.seed = *a.seed;
  if (a.lambda) rc.network.lambda = *a.lambda;
  if (a.no_fusion) rc.network.use_fusion = false;
  if (a.no_correlation) rc.network.use_correlation = false;
  if (a.pairs) rc.network.pairing = ModalityPairing::parse(*a.pairs, rc.network.modality_names());
  if (a.epochs) rc.train.max_epochs = *a.epochs;
  if (a.input) rc.network.input = parse_shape(*a.input);
  rc.network.validate();
  rc.train.validate();

  const auto cases =
      prepare_all(load_cases(a.data, static_cast<std::size_t>(rc.network.modalities)),
                  rc.network.input);
  std::vector<std::string> ids;
  for (const auto& c : cases) ids.push_back(c.case_id);
  const auto split = split_dataset(ids, rc.train.train_ratio, rc.train.seed);
  auto pick = [&cases](const std::vector<std::string>& want) {
    std::vector<MultiModalCase> out;
    for (const auto& id : want)
      for (const auto& c : cases)
        if (c.case_id == id) out.push_back(c);
    return out;
  };
  const auto training = pick(split.train);
  const auto validation = pick(split.test);
  if (training.empty()) throw Error(ErrorCode::EmptyCase, "training split is empty");

  fs::create_directories(a.out);
  write_text(a.out / "config.txt", rc.serialize());
  auto model = Model<float>::create(rc.network, rc.train.seed);
  TrainHooks hooks;
  hooks.on_epoch_end = [](const EpochRecord& r, const Model<float>&) {
    std::cout << "epoch " << r.epoch << " train " << r.train_loss << " val " << r.val_loss
              << " lr " << r.lr << std::endl;
    return true;
  };
  const auto result = train(model, rc.train, training, validation, a.out, hooks);
  save_checkpoint(a.out / "last.ckpt", model);
  write_text(a.out / "attention.csv", attention_csv(result.best, training.front()));
  std::cout << "stopped: " << to_string(result.reason) << " after " << result.state.epoch
            << " epochs; best epoch " << result.best_epoch << '\n';
  return 0;
}

struct PredictArgs {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  bool overlay = false;
};

int predict_command(const PredictArgs& a) {
  const auto model = load_checkpoint(a.checkpoint);
  const auto cases = prepare_all(
      load_cases(a.data, static_cast<std::size_t>(model.config.modalities)), model.config.input);
  fs::create_directories(a.out);
  for (const auto& c : cases) {
    const auto labels = predict(model, c);
    write_labels(a.out / (c.case_id + "_pred.mmsv"), labels);
    if (!a.overlay) continue;
    const Index mid = labels.grid.depth / 2;
    const auto masks = region_masks(labels);
    for (Region r : kRegions)
      write_pgm(a.out / (c.case_id + "_" + to_string(r) + ".pgm"), mask_slice(masks.get(r), mid));
    write_ppm(a.out / (c.case_id + "_overlay.ppm"),
              label_overlay(c.modalities.front(), labels, mid));
  }
  std::cout << "predicted " << cases.size() << " cases into " << a.out.string() << '\n';
  return 0;
}

struct EvaluateArgs {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
};

int evaluate_command(const EvaluateArgs& a) {
  const auto model = load_checkpoint(a.checkpoint);
  const auto cases = prepare_all(
      load_cases(a.data, static_cast<std::size_t>(model.config.modalities)), model.config.input);
  const auto report = evaluate(model, cases);
  report.write_csv(a.out / "metrics.csv");
  std::cout << report.to_csv();
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal brain tumour segmentation toolkit"};
  app.require_subcommand(1);

  PhantomArgs pa;
  auto* phantom = app.add_subcommand("make-phantom", "Generate a synthetic dataset");
  phantom->add_option("--out", pa.out, "Output directory")->required();
  phantom->add_option("--seed", pa.seed, "Random seed");
  phantom->add_option("--cases", pa.cases, "Number of cases");
  phantom->add_option("--shape", pa.shape, "N or D,H,W");
  phantom->add_option("--noise", pa.noise, "Gaussian noise std");

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze-correlation", "Joint histograms and Pearson r");
  analyze->add_option("--data", aa.data, "Manifest or dataset directory")->required();
  analyze->add_option("--out", aa.out, "Output directory")->required();
  analyze->add_option("--bins", aa.bins, "Histogram bins")->check(CLI::Range(2, 4096));

  TrainArgs ta;
  auto* trainer = app.add_subcommand("train", "Train a model");
  trainer->add_option("--config", ta.config, "Run config (key=value)");
  trainer->add_option("--data", ta.data, "Manifest or dataset directory")->required();
  trainer->add_option("--out", ta.out, "Output directory")->required();
  trainer->add_option("--seed", ta.seed, "Random seed");
  trainer->add_option("--lambda", ta.lambda, "Correlation loss weight");
  trainer->add_flag("--no-fusion", ta.no_fusion, "Disable attention fusion");
  trainer->add_flag("--no-correlation", ta.no_correlation, "Disable the correlation block");
  trainer->add_option("--pairs", ta.pairs, "Pairs such as FLAIR>T1,T1>T1c,T1c>T2");
  trainer->add_option("--epochs", ta.epochs, "Maximum epochs");
  trainer->add_option("--input", ta.input, "Network input N or D,H,W");

  PredictArgs pr;
  auto* predictor = app.add_subcommand("predict", "Write predicted label volumes");
  predictor->add_option("--checkpoint", pr.checkpoint)->required();
  predictor->add_option("--data", pr.data, "Manifest or dataset directory")->required();
  predictor->add_option("--out", pr.out, "Output directory")->required();
  predictor->add_flag("--overlay", pr.overlay, "Mid-slice region PGMs and colour PPM");

  EvaluateArgs ea;
  auto* evaluator = app.add_subcommand("evaluate", "Region Dice and Hausdorff report");
  evaluator->add_option("--checkpoint", ea.checkpoint)->required();
  evaluator->add_option("--data", ea.data, "Manifest or dataset directory")->required();
  evaluator->add_option("--out", ea.out, "Output directory")->required();

  fs::path inspect_path;
  auto* inspect = app.add_subcommand("inspect-checkpoint", "Print checkpoint contents");
  inspect->add_option("--checkpoint", inspect_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*phantom) return make_phantom(pa);
    if (*analyze) return analyze_correlation(aa);
    if (*trainer) return train_command(ta);
    if (*predictor) return predict_command(pr);
    if (*evaluator) return evaluate_command(ea);
    if (*inspect) {
      std::cout << inspect_checkpoint(inspect_path);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
