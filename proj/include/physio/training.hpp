#pragma once

#include "physio/dataset_io.hpp"
#include "physio/pearson_loss.hpp"
#include "physio/window_models.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace physio {

enum class Task { rv, hr, joint };

std::string to_string(Task t);
Task task_from_string(const std::string& s);
int task_outputs(Task t);
/// Target columns of a scan for a task: [T x 1] or [T x 2] (RV, HR).
Eigen::MatrixXd target_matrix(const Scan& scan, Task task);

enum class Precision { f32, f64 };

struct TrainConfig {
  Task task = Task::rv;
  int batch_size = 16;
  double lr_init = 1e-4;
  double lr_finetune = 5e-5;
  double lr_decay = 0.5;
  int lr_patience = 2;
  int early_stop_patience = 5;
  double improvement_threshold = 1e-6;
  int max_epochs = 100;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double val_fraction = 0.15;
  int folds = 5;
  Precision precision = Precision::f32;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Optimizer and schedules

template <typename Scalar>
struct AdamState {
  std::map<std::string, ad::Matrix<Scalar>> m;
  std::map<std::string, ad::Matrix<Scalar>> v;
  long t = 0;
};

/// Bias-corrected Adam on every parameter's accumulated gradient.
/// A non-finite gradient aborts before any parameter is touched.
template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, AdamState<Scalar>& state, double lr, const TrainConfig& cfg) {
  for (const auto& [name, p] : params) {
    const auto& g = p.node()->grad;
    if (g.size() != 0 && !g.allFinite()) {
      fail(ErrorKind::numeric, "adam: non-finite gradient in parameter '" + name + "'");
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.t));
  const auto b1 = static_cast<Scalar>(cfg.beta1);
  const auto b2 = static_cast<Scalar>(cfg.beta2);
  for (auto& [name, p] : params) {
    const ad::Matrix<Scalar> g = p.grad();
    auto& m = state.m.try_emplace(name, ad::Matrix<Scalar>::Zero(p.rows(), p.cols())).first->second;
    auto& v = state.v.try_emplace(name, ad::Matrix<Scalar>::Zero(p.rows(), p.cols())).first->second;
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    if (lr == 0.0) continue;
    const auto step = static_cast<Scalar>(lr / c1);
    const auto inv_c2 = static_cast<Scalar>(1.0 / c2);
    const auto eps = static_cast<Scalar>(cfg.epsilon);
    p.mutable_value().array() -= step * m.array() / ((v.array() * inv_c2).sqrt() + eps);
  }
}

/// Reduce-on-plateau: once more than `patience` consecutive epochs fail to
/// beat the best loss by `threshold`, the rate is multiplied by `factor`
/// and the count restarts.
struct PlateauScheduler {
  double lr;
  double factor = 0.5;
  int patience = 2;
  double threshold = 1e-6;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  double step(double val_loss);
};

/// Stops after `patience` consecutive epochs without improving on the best.
struct EarlyStopping {
  int patience = 5;
  double threshold = 1e-6;
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int bad_epochs = 0;

  /// Returns true when training should stop. `improved()` tells whether the
  /// epoch just recorded became the new best.
  bool update(double val_loss, int epoch);
  bool improved() const { return bad_epochs == 0; }
};

// ---------------------------------------------------------------------------
// Checkpoints

using StoredMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Provenance {
  std::string strategy;
  std::string dataset;
  std::uint64_t seed = 0;
  int epochs_run = 0;
  int best_epoch = 0;
  double final_val_loss = std::numeric_limits<double>::quiet_NaN();
  double initial_lr = 0.0;
  std::string initial_param_hash;
  std::string train_manifest_hash;
  std::string preprocessing_hash;
  std::string created_at;  // the only wall-clock field
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  std::map<std::string, StoredMatrix> params;
  struct Optimizer {
    long t = 0;
    std::map<std::string, StoredMatrix> m, v;
  };
  std::optional<Optimizer> optimizer;
  Provenance provenance;

  /// Hash of parameter names, shapes and float bytes.
  std::string param_hash() const;
};

void save_checkpoint(const Checkpoint& ck, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path);

template <typename Scalar>
std::map<std::string, StoredMatrix> store_params(const ModelParams<Scalar>& p) {
  std::map<std::string, StoredMatrix> out;
  for (const auto& [name, t] : p) out.emplace(name, t.value().template cast<float>());
  return out;
}

template <typename Scalar>
std::map<std::string, StoredMatrix> store_matrices(const std::map<std::string, ad::Matrix<Scalar>>& p) {
  std::map<std::string, StoredMatrix> out;
  for (const auto& [name, m] : p) out.emplace(name, m.template cast<float>());
  return out;
}

/// Trainable parameters from a checkpoint, shape-checked against its config.
template <typename Scalar>
ModelParams<Scalar> load_params(const Checkpoint& ck) {
  ModelParams<Scalar> p = init_params<Scalar>(ck.model);
  if (p.size() != ck.params.size()) {
    fail("checkpoint: holds " + std::to_string(ck.params.size()) + " tensors, config expects " +
         std::to_string(p.size()));
  }
  for (auto& [name, t] : p) {
    const auto it = ck.params.find(name);
    if (it == ck.params.end()) fail("checkpoint: missing tensor '" + name + "'");
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      fail("checkpoint: tensor '" + name + "' has shape " + ad::shape_str(it->second.rows(), it->second.cols()) +
           ", config expects " + ad::shape_str(t));
    }
    t.mutable_value() = it->second.template cast<Scalar>();
  }
  return p;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainOutcome {
  Checkpoint checkpoint;  // best validation epoch
  std::vector<EpochRecord> log;
  int degenerate_predictions = 0;
};

struct TrainRequest {
  ModelConfig model;
  TrainConfig train;
  /// Starting parameters; freshly initialised from model.init_seed when absent.
  const Checkpoint* init = nullptr;
  double initial_lr = 0.0;  // 0 selects train.lr_init
  std::vector<const Scan*> train_scans;
  std::vector<const Scan*> val_scans;
  Provenance provenance;  // copied into the result; epoch fields are filled in
};

/// Epoch 0 records the initial model. Each later epoch shuffles the training
/// scans, steps Adam once per batch of scans on the mean per-scan loss, then
/// applies the plateau schedule and early stopping to the validation loss.
TrainOutcome train_model(const TrainRequest& req);

/// Mean per-scan loss of a model over scans, dropout off.
double mean_loss(const Checkpoint& ck, const std::vector<const Scan*>& scans, Task task);

void write_epoch_log(const std::vector<EpochRecord>& log, const fs::path& path);

}  // namespace physio
