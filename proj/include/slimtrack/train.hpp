#pragma once

#include <map>
#include <string>
#include <vector>

#include "slimtrack/tracking.hpp"
#include "slimtrack/zoo.hpp"

namespace slimtrack {

struct TrainConfig {
  enum class Mode { SparsityTrain, Finetune } mode = Mode::SparsityTrain;
  double lambda = 0.0;     // weight of the L1 gate penalty
  double lr = 0.05;
  double momentum = 0.9;
  int64_t epochs = 5;
  int64_t batch_size = 8;
  uint64_t seed = 0;

  void validate() const {
    if (lambda < 0) throw ConfigError("train: lambda must be non-negative");
    if (mode == Mode::Finetune && lambda != 0.0)
      throw ConfigError("train: finetune mode requires lambda = 0");
    if (lr < 0 || momentum < 0) throw ConfigError("train: rates must be non-negative");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  }
};

struct TrainHistory {
  std::vector<double> task_loss;         // mean per epoch
  std::vector<double> penalty;           // L1 norm of all gates at epoch end
  std::vector<double> sparsity_fraction; // fraction of gates with |gamma| < 0.01
};

// Deterministic synthetic pair source shared by training and fine-tuning.
struct PairStreamConfig {
  int64_t pairs_per_epoch = 64;
  int64_t frame_size = 64;
  int64_t template_size = 32;
  int64_t search_size = 64;
  int64_t obj_min = 16;
  int64_t obj_max = 16;
  int64_t motion = 3;
  int complexity = 4;
};

// task_loss + lambda * sum over all gate entries |gamma|.
inline Value total_loss(Tape& tape, Value task_loss, const std::vector<Value>& gates,
                        double lambda) {
  if (lambda < 0) throw ConfigError("total_loss: lambda must be non-negative");
  Value out = task_loss;
  if (lambda == 0.0 || gates.empty()) return out;
  Value pen;
  for (auto& g : gates) {
    Value l = l1_norm(tape, g);
    pen = pen ? add(tape, pen, l) : l;
  }
  return add(tape, out, scalar_mul(tape, pen, lambda));
}

// +1 inside radius `r` (response cells) of the target cell, -1 elsewhere.
inline Tensor make_label_map(const Shape& response_shape, double cell_i, double cell_j,
                             double radius = 2.0) {
  int64_t h = response_shape[response_shape.size() - 2];
  int64_t w = response_shape[response_shape.size() - 1];
  Tensor labels = Tensor::zeros(response_shape);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      double di = double(i) - cell_i, dj = double(j) - cell_j;
      labels.data[size_t(i * w + j)] = (di * di + dj * dj <= radius * radius) ? 1.0 : -1.0;
    }
  return labels;
}

// Class-balanced BCE over the response map against a +/-1 label map.
inline Value tracking_task_loss(Tape& tape, Value response, const Tensor& labels) {
  return balanced_bce_with_logits(tape, response, labels);
}

namespace detail {

struct TrainingPair {
  Tensor templ;
  Tensor search;
  double cell_i, cell_j;  // target cell in response coordinates (set later)
  double gt_cx, gt_cy;    // target center in search-crop pixels
  int64_t search_left, search_top;
};

inline TrainingPair make_pair(uint64_t pair_seed, const PairStreamConfig& sc) {
  auto seq = gen_sequence(pair_seed, 2, sc.frame_size, sc.obj_min, sc.obj_max, sc.motion,
                          sc.complexity);
  const Box& b0 = seq.gt_boxes[0];
  const Box& b1 = seq.gt_boxes[1];
  TrainingPair p;
  p.templ = crop(seq.frames[0], int64_t(std::lround(b0.cx())) - sc.template_size / 2,
                 int64_t(std::lround(b0.cy())) - sc.template_size / 2, sc.template_size,
                 sc.template_size);
  int64_t left = int64_t(std::lround(b0.cx())) - sc.search_size / 2;
  int64_t top = int64_t(std::lround(b0.cy())) - sc.search_size / 2;
  left = std::clamp(left, int64_t(0), std::max(int64_t(0), sc.frame_size - sc.search_size));
  top = std::clamp(top, int64_t(0), std::max(int64_t(0), sc.frame_size - sc.search_size));
  p.search = crop(seq.frames[1], left, top, sc.search_size, sc.search_size);
  p.search_left = left;
  p.search_top = top;
  p.gt_cx = b1.cx() - double(left);
  p.gt_cy = b1.cy() - double(top);
  return p;
}

}  // namespace detail

// SGD-with-momentum over all weights and gates of the model; history records
// the task loss, the gate penalty and the near-zero gate fraction per epoch.
// The model is mutated in place.
inline TrainHistory train(ModelGraph& model, const PairStreamConfig& stream, const TrainConfig& cfg) {
  cfg.validate();
  TrainHistory hist;
  std::map<std::string, Tensor> velocity;
  // lr = 0 must leave the model untouched, including BN running statistics,
  // so the whole pass runs in eval mode in that case.
  bool training_mode = cfg.lr > 0.0;
  int64_t steps_per_epoch = std::max(int64_t(1), stream.pairs_per_epoch / cfg.batch_size);
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_task = 0.0;
    int64_t epoch_pairs = 0;
    for (int64_t step = 0; step < steps_per_epoch; ++step) {
      std::map<std::string, Tensor> grad_accum;
      for (int64_t b = 0; b < cfg.batch_size; ++b) {
        uint64_t pair_seed = Rng(cfg.seed ^ (uint64_t(epoch) << 42) ^ (uint64_t(step) << 21) ^
                                 uint64_t(b))
                                 .next_u64();
        auto pair = detail::make_pair(pair_seed, stream);
        Tape tape;
        GraphRunner runner(model, tape, training_mode);
        Value resp;
        try {
          resp = siamese_response(runner, tape, pair.templ, pair.search);
        } catch (const NumericError& e) {
          throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " +
                             e.what());
        }
        double stride = double(stream.search_size) / double(runner.activation(model.output_id)
                                                                ->value.shape[3]);
        double ci = (pair.gt_cy - double(stream.template_size) / 2.0) / stride;
        double cj = (pair.gt_cx - double(stream.template_size) / 2.0) / stride;
        Tensor labels = make_label_map(resp->value.shape, ci, cj);
        Value task = tracking_task_loss(tape, resp, labels);
        std::vector<Value> gate_vals;
        for (auto& [gid, gv] : runner.all_gates()) gate_vals.push_back(gv);
        Value loss = total_loss(tape, task, gate_vals, cfg.lambda);
        if (!std::isfinite(loss->value[0]))
          throw NumericError("training diverged at epoch " + std::to_string(epoch));
        epoch_task += task->value[0];
        ++epoch_pairs;
        tape.backward(loss);
        for (auto& [key, val] : runner.all_params()) {
          auto it = grad_accum.find(key);
          if (it == grad_accum.end())
            grad_accum.emplace(key, val->grad);
          else
            for (size_t i = 0; i < it->second.data.size(); ++i)
              it->second.data[i] += val->grad.data[i];
        }
        for (auto& [gid, val] : runner.all_gates()) {
          std::string key = "gate:" + gid;
          auto it = grad_accum.find(key);
          if (it == grad_accum.end())
            grad_accum.emplace(key, val->grad);
          else
            for (size_t i = 0; i < it->second.data.size(); ++i)
              it->second.data[i] += val->grad.data[i];
        }
      }
      // momentum update: v = mu*v + g/batch; p -= lr*v
      auto update = [&](const std::string& key, Tensor& param) {
        const Tensor& g = grad_accum.at(key);
        auto vit = velocity.find(key);
        if (vit == velocity.end()) vit = velocity.emplace(key, Tensor::zeros(param.shape)).first;
        Tensor& v = vit->second;
        for (size_t i = 0; i < param.data.size(); ++i) {
          v.data[i] = cfg.momentum * v.data[i] + g.data[i] / double(cfg.batch_size);
          param.data[i] -= cfg.lr * v.data[i];
        }
      };
      for (auto& n : model.nodes)
        for (auto& [name, tensor] : n.params) update(n.id + "/" + name, tensor);
      for (auto& [gid, gv] : model.gates) update("gate:" + gid, gv.values);
    }
    double pen = 0.0;
    int64_t near_zero = 0, total = 0;
    for (auto& [gid, gv] : model.gates)
      for (double v : gv.values.data) {
        pen += std::abs(v);
        if (std::abs(v) < 0.01) ++near_zero;
        ++total;
      }
    hist.task_loss.push_back(epoch_pairs ? epoch_task / double(epoch_pairs) : 0.0);
    hist.penalty.push_back(pen);
    hist.sparsity_fraction.push_back(total ? double(near_zero) / double(total) : 0.0);
  }
  return hist;
}

// Stage-3 loop: identical to train but with the penalty off; gates remain
// trainable as ordinary scale parameters.
inline TrainHistory finetune(ModelGraph& model, const PairStreamConfig& stream, TrainConfig cfg) {
  cfg.mode = TrainConfig::Mode::Finetune;
  cfg.lambda = 0.0;
  return train(model, stream, cfg);
}

inline void write_history_csv(const TrainHistory& h, const std::string& path) {
  std::ofstream os(path);
  os << "epoch,task_loss,penalty,sparsity_fraction\n";
  for (size_t e = 0; e < h.task_loss.size(); ++e)
    os << e << "," << h.task_loss[e] << "," << h.penalty[e] << "," << h.sparsity_fraction[e]
       << "\n";
}

}  // namespace slimtrack
