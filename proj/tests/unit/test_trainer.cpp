#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mmseg/checkpoint.hpp"
#include "mmseg/phantom.hpp"
#include "mmseg/trainer.hpp"

using namespace mmseg;
namespace fs = std::filesystem;

namespace {

NetworkConfig tiny_config(Index side = 8) {
  NetworkConfig c;
  c.base_filters = 2;
  c.levels = 2;
  c.input = {side, side, side};
  return c;
}

std::vector<MultiModalCase> tiny_cases(int n, Index side = 8, std::uint64_t seed = 1) {
  PhantomConfig p;
  p.seed = seed;
  p.n_cases = n;
  p.shape = {side, side, side};
  std::vector<MultiModalCase> out;
  for (const auto& c : generate_phantom(p)) out.push_back(prepare_case(c, p.shape));
  return out;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mmseg_trainer_" + name);
  fs::remove_all(dir);
  return dir;
}

} // namespace

TEST_CASE("plateau schedule in isolation") {
  PlateauSchedule s;
  CHECK(s.observe(1.0).improved);
  for (int e = 2; e <= 10; ++e) CHECK_FALSE(s.observe(1.0).decayed);
  const auto at11 = s.observe(1.0);
  CHECK(at11.decayed);
  CHECK(s.lr == 2.5e-4);
  CHECK_FALSE(s.observe(1.0 - 1e-4).improved);
  CHECK(s.observe(1.0 - 1.5e-4).improved);
  CHECK(s.epochs_since_improvement == 0);
}

TEST_CASE("stagnant validation harness: decay after 10, stop after 50") {
  const auto cases = tiny_cases(1);
  auto model = Model<float>::create(tiny_config(), 1);
  TrainConfig cfg;
  cfg.max_epochs = 300;
  TrainHooks hooks;
  hooks.validation_loss = [](int, double) { return 1.0; };
  const auto r = train(model, cfg, cases, {}, std::nullopt, hooks);
  CHECK(r.reason == StopReason::EarlyStop);
  CHECK(r.state.epoch == 51);
  const auto& h = r.state.history;
  REQUIRE(h.size() == 51);
  for (int e = 1; e <= 11; ++e) CHECK(h[static_cast<std::size_t>(e - 1)].lr == 5e-4);
  CHECK(h[11].lr == 2.5e-4);
  CHECK(r.state.schedule.decays == 5);
  CHECK(r.best_epoch == 1);
}

TEST_CASE("max epochs stop") {
  const auto cases = tiny_cases(1);
  auto model = Model<float>::create(tiny_config(), 1);
  TrainConfig cfg;
  cfg.max_epochs = 3;
  const auto r = train(model, cfg, cases, {});
  CHECK(r.reason == StopReason::MaxEpochs);
  CHECK(r.state.history.size() == 3);
}

TEST_CASE("one Adam step at lr 1e-5 lowers the loss") {
  const auto cases = tiny_cases(2, 16, 3);
  std::vector<const MultiModalCase*> batch{&cases[0], &cases[1]};
  NetworkConfig net = tiny_config(16);
  net.base_filters = 4;
  net.levels = 3;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto model = Model<float>::create(net, seed);
    model.zero_grad();
    const double before = batch_loss(model, batch, true).total;
    Adam<float> adam({1e-5, 0.9, 0.999, 1e-8});
    adam.step(model);
    const double after = batch_loss(model, batch, false).total;
    CHECK_MESSAGE(after < before, "seed " << seed);
  }
}

TEST_CASE("fixed-seed runs reproduce loss histories bit for bit") {
  const auto cases = tiny_cases(3);
  TrainConfig cfg;
  cfg.max_epochs = 4;
  cfg.seed = 42;
  auto run = [&]() {
    auto model = Model<float>::create(tiny_config(), cfg.seed);
    return train(model, cfg, {cases[0], cases[1]}, {cases[2]}).state.history;
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].train_loss == b[i].train_loss);
    CHECK(a[i].val_loss == b[i].val_loss);
    CHECK(a[i].corr_component == b[i].corr_component);
  }
  CHECK(history_csv(a) == history_csv(b));
}

TEST_CASE("training artifacts and best checkpoint") {
  const auto dir = scratch("artifacts");
  const auto cases = tiny_cases(2);
  auto model = Model<float>::create(tiny_config(), 3);
  TrainConfig cfg;
  cfg.max_epochs = 3;
  const auto r = train(model, cfg, cases, {}, dir);
  CHECK(fs::exists(dir / "best.ckpt"));
  std::ifstream f(dir / "history.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header == "epoch,train_loss,dice_component,corr_component,val_loss,lr");
  const auto best = load_checkpoint(dir / "best.ckpt");
  const auto x = make_inputs({&cases[0]});
  CHECK((model_forward(best, x).logits.data().array() ==
         model_forward(r.best, x).logits.data().array()).all());
}

TEST_CASE("non-finite loss raises DIVERGENCE") {
  auto cases = tiny_cases(1);
  cases[0].modalities[0].data[0] = std::numeric_limits<float>::quiet_NaN();
  auto model = Model<float>::create(tiny_config(), 1);
  TrainConfig cfg;
  try {
    train(model, cfg, cases, {});
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Divergence);
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip is bit identical") {
  const auto dir = scratch("ckpt");
  const auto cases = tiny_cases(1, 16);
  auto cfg = tiny_config(16);
  cfg.pairing = ModalityPairing::parse("T2>FLAIR,T1>T1c", cfg.modality_names());
  const auto model = Model<float>::create(cfg, 8);
  save_checkpoint(dir / "m.ckpt", model);
  CHECK_FALSE(fs::exists(dir / "m.ckpt.tmp"));
  const auto back = load_checkpoint(dir / "m.ckpt", cfg);
  const auto x = make_inputs({&cases[0]});
  const auto a = model_forward(model, x);
  const auto b = model_forward(back, x);
  CHECK((a.logits.data().array() == b.logits.data().array()).all());
  for (std::size_t k = 0; k < a.estimates.size(); ++k)
    CHECK((a.estimates[k].data().array() == b.estimates[k].data().array()).all());

  auto other = cfg;
  other.use_fusion = false;
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "m.ckpt", other), doctest::Contains("CHECKPOINT_MISMATCH"),
                       Error);
  const auto text = inspect_checkpoint(dir / "m.ckpt");
  CHECK(text.find("pairs=T2>FLAIR,T1>T1c") != std::string::npos);
  CHECK(text.find("total: " + std::to_string(model.parameter_count())) != std::string::npos);

  fs::resize_file(dir / "m.ckpt", fs::file_size(dir / "m.ckpt") - 7);
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt"), Error);
}

TEST_CASE("argmax: constant winner and ties") {
  Tensor5<float> logits({1, 4, 1, 2, 2});
  logits.sample(0).row(2).setConstant(3.0f);
  auto l = argmax_labels(logits).front();
  CHECK((l.classes == 2).all());
  CHECK((l.values() == 2).all());
  logits.sample(0).row(3).setConstant(3.0f);
  logits.sample(0)(1, 0) = 3.0f;
  l = argmax_labels(logits).front();
  CHECK(l.classes[0] == 1);
  CHECK(l.classes[1] == 2);
  logits.sample(0).row(3).setConstant(4.0f);
  CHECK((argmax_labels(logits).front().values() == 4).all());
}

TEST_CASE("predict and evaluate an untrained model") {
  const auto cases = tiny_cases(2, 16);
  const auto model = Model<float>::create(tiny_config(16), 2);
  const auto labels = predict(model, cases[0]);
  CHECK(labels.grid == cases[0].grid());
  const auto report = evaluate(model, cases);
  REQUIRE(report.cases.size() == 2);
  for (const auto& c : report.cases)
    for (const auto& r : c.regions) {
      CHECK(r.dice >= 0);
      CHECK(r.dice <= 1);
      if (r.hausdorff_mm) CHECK(std::isfinite(*r.hausdorff_mm));
    }
  CHECK(report.to_csv() == evaluate(model, cases).to_csv());
  auto wrong = cases[0];
  wrong = prepare_case(wrong, {12, 12, 12});
  CHECK_THROWS_AS(predict(Model<float>::create(NetworkConfig{}, 1), wrong), Error);
}

TEST_CASE("run config") {
  const auto rc = RunConfig::parse(
      "# comment\nlevels=3\nbase_filters=4\ninput=16,16,16\nlr=0.001\nmax_epochs=7\nseed=9\n"
      "use_correlation=0\n");
  CHECK(rc.network.levels == 3);
  CHECK_FALSE(rc.network.use_correlation);
  CHECK(rc.train.adam.lr == 0.001);
  CHECK(rc.train.max_epochs == 7);
  CHECK(rc.train.seed == 9);
  const auto back = RunConfig::parse(rc.serialize());
  CHECK(back.serialize() == rc.serialize());
  CHECK_THROWS_AS(RunConfig::parse("learning_rate=1\n"), Error);
  CHECK_THROWS_AS(RunConfig::parse("lr_patience=0\n"), Error);
  CHECK_THROWS_AS(RunConfig::parse("lr=abc\n"), Error);
  const TrainConfig defaults;
  CHECK(defaults.adam.lr == 5e-4);
  CHECK(defaults.adam.beta1 == 0.9);
  CHECK(defaults.adam.beta2 == 0.999);
  CHECK(defaults.adam.eps == 1e-8);
  CHECK(defaults.lr_decay_factor == 0.5);
  CHECK(defaults.lr_patience == 10);
  CHECK(defaults.early_stop_patience == 50);
  CHECK(defaults.batch_size == 1);
  CHECK(defaults.max_epochs == 300);
}
