#pragma once

#include "physio/evaluation.hpp"
#include "physio/training.hpp"

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace physio {

enum class StrategyKind { pretrain_only, scratch, joint_scratch, finetune };

std::string to_string(StrategyKind k);
StrategyKind strategy_from_string(const std::string& s);

struct StrategySpec {
  StrategyKind kind = StrategyKind::scratch;
  std::string source;  // required by pretrain_only, joint_scratch and finetune
  std::string target;

  /// Usage error when a required dataset name is missing.
  void validate() const;
};

enum class Purpose { train, validation, test };

/// Loaded scans of one dataset. Every scan handed to training or evaluation
/// goes through read(), which counts accesses per purpose.
class Dataset {
 public:
  Dataset(std::string name, std::vector<Scan> scans, std::string preprocessing_hash = {},
          std::string manifest_hash = {});

  const std::string& name() const { return name_; }
  const std::string& preprocessing_hash() const { return preprocessing_hash_; }
  const std::string& manifest_hash() const { return manifest_hash_; }
  std::size_t size() const { return scans_.size(); }
  Eigen::Index n_roi() const;

  /// Identity and age only; does not count as a read.
  struct Meta {
    std::string scan_id;
    std::string subject_id;
    double age;
  };
  Meta meta(std::size_t i) const;

  const Scan& read(std::size_t i, Purpose p) const;
  std::size_t reads(std::size_t i, Purpose p) const;
  std::size_t reads(Purpose p) const;

 private:
  std::string name_;
  std::vector<Scan> scans_;
  std::string preprocessing_hash_;
  std::string manifest_hash_;
  std::unique_ptr<std::atomic<std::size_t>[]> counts_;  // 3 per scan
};

struct FoldRun {
  int fold = 0;
  std::vector<std::size_t> test_indices;   // into the target dataset
  std::vector<std::size_t> train_indices;  // target scans outside the test fold
  TrainOutcome outcome;  // for pretrain_only, a copy of the shared pretrain run
  std::vector<ScanResult> results;
};

struct StrategyOptions {
  ModelConfig model;  // n_roi and n_outputs are taken from the data and task
  TrainConfig train;
  int threads = 1;    // folds trained concurrently
  std::function<void(const std::string&)> log;
};

struct StrategyResult {
  std::optional<TrainOutcome> pretrain;
  std::vector<FoldRun> folds;
  EvalReport report;
};

/// pretrain_only: train once on the source, test on every target fold.
/// scratch: per fold, train on the target training subjects.
/// joint_scratch: per fold, train on all source scans plus target training subjects.
/// finetune: train once on the source, then per fold continue from those
///   weights on the target training subjects at lr_finetune.
/// Validation scans are carved from each training pool at subject level.
StrategyResult run_strategy(const StrategySpec& spec, const std::map<std::string, const Dataset*>& datasets,
                            const StrategyOptions& options);

/// Parses PHYSIO_RECON_THREADS; unset or invalid gives `fallback`.
int thread_cap_from_env(int fallback = 1);

}  // namespace physio
