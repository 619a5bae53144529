#ifndef MMSEG_OPTIM_HPP
#define MMSEG_OPTIM_HPP

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mmseg/network.hpp"

namespace mmseg {

struct AdamOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction; moment buffers follow the model's parameter
/// order.
template <typename Scalar>
class Adam {
public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  double lr() const { return opt_.lr; }
  void set_lr(double lr) { opt_.lr = lr; }
  long steps() const { return t_; }

  void step(Model<Scalar>& model) {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<Scalar>(opt_.beta1);
    const auto b2 = static_cast<Scalar>(opt_.beta2);
    const auto step = static_cast<Scalar>(opt_.lr / c1);
    const auto root_c2 = static_cast<Scalar>(std::sqrt(c2));
    const auto eps = static_cast<Scalar>(opt_.eps);
    std::size_t i = 0;
    model.for_each_param([&](const std::string&, Param<Scalar>& p) {
      if (i == m_.size()) {
        m_.push_back(Vector<Scalar>::Zero(p.size()));
        v_.push_back(Vector<Scalar>::Zero(p.size()));
      }
      auto& m = m_[i];
      auto& v = v_[i];
      ++i;
      m = b1 * m + (Scalar(1) - b1) * p.grad;
      v = b2 * v + (Scalar(1) - b2) * p.grad.cwiseAbs2();
      p.value.array() -= step * m.array() / (v.array().sqrt() / root_c2 + eps);
    });
  }

private:
  AdamOptions opt_;
  long t_ = 0;
  std::vector<Vector<Scalar>> m_;
  std::vector<Vector<Scalar>> v_;
};

enum class StopReason { None, EarlyStop, MaxEpochs, Requested };
std::string to_string(StopReason r);

/// Validation-driven learning-rate decay and early stopping. An epoch
/// improves when its loss beats the best so far by more than min_delta.
/// After lr_patience consecutive non-improving epochs the rate is scaled by
/// decay_factor and that counter restarts; after stop_patience non-improving
/// epochs training stops.
struct PlateauSchedule {
  double lr = 5e-4;
  double decay_factor = 0.5;
  int lr_patience = 10;
  int stop_patience = 50;
  double min_delta = 1e-4;

  double best = std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;
  int epochs_since_decay = 0;
  int decays = 0;

  struct Event {
    bool improved = false;
    bool decayed = false;
    bool stop = false;
  };

  Event observe(double val_loss) {
    Event e;
    if (val_loss < best - min_delta) {
      best = val_loss;
      epochs_since_improvement = 0;
      epochs_since_decay = 0;
      e.improved = true;
      return e;
    }
    ++epochs_since_improvement;
    if (++epochs_since_decay >= lr_patience) {
      lr *= decay_factor;
      ++decays;
      epochs_since_decay = 0;
      e.decayed = true;
    }
    e.stop = epochs_since_improvement >= stop_patience;
    return e;
  }
};

} // namespace mmseg

#endif
