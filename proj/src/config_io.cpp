#include "physio/config_io.hpp"

#include "physio/error.hpp"

#include <set>

namespace physio {

namespace {

[[noreturn]] void bad(const std::string& where, const std::string& what) {
  fail(ErrorKind::usage, "config: " + where + ": " + what);
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) bad(where, "expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) bad(where, "unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    bad(where + "." + key, e.what());
  }
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"architecture", to_string(c.architecture)},
              {"n_roi", c.n_roi},
              {"n_outputs", c.n_outputs},
              {"n_heads", c.attention.n_heads},
              {"head_dim", c.attention.head_dim},
              {"dropout", c.attention.dropout},
              {"model_dim", c.attention.model_dim},
              {"positional_encoding", c.positional_encoding},
              {"layer_norm_eps", c.layer_norm_eps},
              {"init_seed", c.init_seed},
              {"window", c.window},
              {"ffn_expansion", c.ffn_expansion},
              {"block_windows", c.block_windows},
              {"seq2seq_ffn", c.seq2seq_ffn}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  const std::string w = "model";
  reject_unknown(j, {"architecture", "n_roi", "n_outputs", "n_heads", "head_dim", "dropout", "model_dim",
                     "positional_encoding", "layer_norm_eps", "init_seed", "window", "ffn_expansion",
                     "block_windows", "seq2seq_ffn"},
                 w);
  if (j.contains("architecture")) {
    std::string a;
    read(j, "architecture", a, w);
    try {
      c.architecture = architecture_from_string(a);
    } catch (const Error& e) {
      bad(w + ".architecture", e.what());
    }
  }
  read(j, "n_roi", c.n_roi, w);
  read(j, "n_outputs", c.n_outputs, w);
  read(j, "n_heads", c.attention.n_heads, w);
  read(j, "head_dim", c.attention.head_dim, w);
  read(j, "dropout", c.attention.dropout, w);
  read(j, "model_dim", c.attention.model_dim, w);
  read(j, "positional_encoding", c.positional_encoding, w);
  read(j, "layer_norm_eps", c.layer_norm_eps, w);
  read(j, "init_seed", c.init_seed, w);
  read(j, "window", c.window, w);
  read(j, "ffn_expansion", c.ffn_expansion, w);
  read(j, "block_windows", c.block_windows, w);
  read(j, "seq2seq_ffn", c.seq2seq_ffn, w);
  return c;
}

json to_json(const TrainConfig& c) {
  return json{{"task", to_string(c.task)},
              {"batch_size", c.batch_size},
              {"lr_init", c.lr_init},
              {"lr_finetune", c.lr_finetune},
              {"lr_decay", c.lr_decay},
              {"lr_patience", c.lr_patience},
              {"early_stop_patience", c.early_stop_patience},
              {"improvement_threshold", c.improvement_threshold},
              {"max_epochs", c.max_epochs},
              {"seed", c.seed},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"val_fraction", c.val_fraction},
              {"folds", c.folds},
              {"precision", c.precision == Precision::f32 ? "float32" : "float64"}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  const std::string w = "train";
  reject_unknown(j, {"task", "batch_size", "lr_init", "lr_finetune", "lr_decay", "lr_patience",
                     "early_stop_patience", "improvement_threshold", "max_epochs", "seed", "beta1", "beta2",
                     "epsilon", "val_fraction", "folds", "precision"},
                 w);
  if (j.contains("task")) {
    std::string t;
    read(j, "task", t, w);
    try {
      c.task = task_from_string(t);
    } catch (const Error& e) {
      bad(w + ".task", e.what());
    }
  }
  read(j, "batch_size", c.batch_size, w);
  read(j, "lr_init", c.lr_init, w);
  read(j, "lr_finetune", c.lr_finetune, w);
  read(j, "lr_decay", c.lr_decay, w);
  read(j, "lr_patience", c.lr_patience, w);
  read(j, "early_stop_patience", c.early_stop_patience, w);
  read(j, "improvement_threshold", c.improvement_threshold, w);
  read(j, "max_epochs", c.max_epochs, w);
  read(j, "seed", c.seed, w);
  read(j, "beta1", c.beta1, w);
  read(j, "beta2", c.beta2, w);
  read(j, "epsilon", c.epsilon, w);
  read(j, "val_fraction", c.val_fraction, w);
  read(j, "folds", c.folds, w);
  if (j.contains("precision")) {
    std::string p;
    read(j, "precision", p, w);
    if (p == "float32") {
      c.precision = Precision::f32;
    } else if (p == "float64") {
      c.precision = Precision::f64;
    } else {
      bad(w + ".precision", "expected float32 or float64, got '" + p + "'");
    }
  }
  return c;
}

json to_json(const SynthConfig& c) {
  json j{{"dataset_name", c.dataset_name},
         {"n_subjects", c.n_subjects},
         {"scans_per_subject", c.scans_per_subject},
         {"n_roi", c.n_roi},
         {"T", c.T},
         {"dt", c.dt},
         {"snr", c.snr},
         {"lag_max", c.lag_max},
         {"age_range", {c.age_min, c.age_max}},
         {"seed", c.seed},
         {"kernel_shift", c.kernel_shift},
         {"raw_mode", c.raw_mode},
         {"raw_tr", c.raw_tr},
         {"physio_hz", c.physio_hz}};
  if (c.encoding_seed) j["encoding_seed"] = *c.encoding_seed;
  return j;
}

SynthConfig synth_config_from_json(const json& j, SynthConfig c) {
  const std::string w = "synth";
  reject_unknown(j, {"dataset_name", "n_subjects", "scans_per_subject", "n_roi", "T", "dt", "snr", "lag_max",
                     "age_range", "seed", "encoding_seed", "kernel_shift", "raw_mode", "raw_tr", "physio_hz"},
                 w);
  read(j, "dataset_name", c.dataset_name, w);
  read(j, "n_subjects", c.n_subjects, w);
  read(j, "scans_per_subject", c.scans_per_subject, w);
  read(j, "n_roi", c.n_roi, w);
  read(j, "T", c.T, w);
  read(j, "dt", c.dt, w);
  read(j, "snr", c.snr, w);
  read(j, "lag_max", c.lag_max, w);
  if (j.contains("age_range")) {
    std::vector<double> r;
    read(j, "age_range", r, w);
    if (r.size() != 2) bad(w + ".age_range", "expected [min, max]");
    c.age_min = r[0];
    c.age_max = r[1];
  }
  read(j, "seed", c.seed, w);
  if (j.contains("encoding_seed")) {
    std::uint64_t s = 0;
    read(j, "encoding_seed", s, w);
    c.encoding_seed = s;
  }
  read(j, "kernel_shift", c.kernel_shift, w);
  read(j, "raw_mode", c.raw_mode, w);
  read(j, "raw_tr", c.raw_tr, w);
  read(j, "physio_hz", c.physio_hz, w);
  return c;
}

json to_json(const PrepSettings& c) {
  return json{{"low_hz", c.filter.low_hz},   {"high_hz", c.filter.high_hz},
              {"order", c.filter.order},     {"target_dt", c.target_dt},
              {"rv_window_s", c.rv_window_s}, {"hr_window_s", c.hr_window_s}};
}

PrepSettings prep_settings_from_json(const json& j, PrepSettings c) {
  const std::string w = "preprocessing";
  reject_unknown(j, {"low_hz", "high_hz", "order", "target_dt", "rv_window_s", "hr_window_s"}, w);
  read(j, "low_hz", c.filter.low_hz, w);
  read(j, "high_hz", c.filter.high_hz, w);
  read(j, "order", c.filter.order, w);
  read(j, "target_dt", c.target_dt, w);
  read(j, "rv_window_s", c.rv_window_s, w);
  read(j, "hr_window_s", c.hr_window_s, w);
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    fail(ErrorKind::usage, "--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) fail(ErrorKind::usage, "--set: empty path component in '" + key + "'");
    if (!node->is_object()) {
      if (!node->is_null()) fail(ErrorKind::usage, "--set: '" + key + "' descends into a non-object");
      *node = json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace physio
