#include "physio/window_models.hpp"

#include <cmath>

namespace physio {

std::vector<Index> slide_windows(Index length, const WindowSpec& spec) {
  if (spec.window < 1 || spec.step < 1 || spec.step > spec.window) {
    fail("slide_windows: need 1 <= step <= window, got window " + std::to_string(spec.window) +
         ", step " + std::to_string(spec.step));
  }
  if (length < spec.window) {
    fail("slide_windows: length " + std::to_string(length) + " is shorter than window " +
         std::to_string(spec.window));
  }
  std::vector<Index> starts;
  const Index last = length - spec.window;
  for (Index s = 0; s <= last; s += spec.step) starts.push_back(s);
  if (starts.back() != last) starts.push_back(last);
  return starts;
}

std::string to_string(Architecture a) { return a == Architecture::seq2one ? "seq2one" : "seq2seq"; }

Architecture architecture_from_string(const std::string& s) {
  if (s == "seq2one") return Architecture::seq2one;
  if (s == "seq2seq") return Architecture::seq2seq;
  fail(ErrorKind::usage, "unknown architecture '" + s + "' (expected seq2one or seq2seq)");
}

ModelConfig ModelConfig::seq2one_default(int n_roi) {
  ModelConfig c;
  c.architecture = Architecture::seq2one;
  c.n_roi = n_roi;
  c.attention = {8, 60, 0.3, 480};
  c.window = 32;
  c.ffn_expansion = 1.0;
  return c;
}

ModelConfig ModelConfig::seq2seq_default(int n_roi) {
  ModelConfig c;
  c.architecture = Architecture::seq2seq;
  c.n_roi = n_roi;
  c.attention = {20, 100, 0.3, 500};
  c.block_windows = {4, 8, 12, 16, 20};
  c.seq2seq_ffn = false;
  return c;
}

int ModelConfig::ffn_hidden() const {
  const double expansion = architecture == Architecture::seq2one ? ffn_expansion : 1.0;
  return std::max(1, static_cast<int>(std::lround(expansion * attention.model_dim)));
}

Index ModelConfig::min_length() const {
  if (architecture == Architecture::seq2one) return window;
  Index widest = 0;
  for (int w : block_windows) widest = std::max<Index>(widest, w);
  return widest;
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorKind::usage, "model config: " + what); };
  if (n_roi < 1) bad("n_roi must be positive");
  if (n_outputs != 1 && n_outputs != 2) bad("n_outputs must be 1 or 2");
  if (attention.n_heads < 1 || attention.head_dim < 1 || attention.model_dim < 1) {
    bad("attention dimensions must be positive");
  }
  if (!(attention.dropout >= 0 && attention.dropout < 1)) bad("dropout must lie in [0, 1)");
  if (architecture == Architecture::seq2one) {
    if (window < 2 || window % 2 != 0) bad("seq2one window must be even and >= 2");
    if (ffn_expansion < 0) bad("ffn_expansion must be non-negative");
  } else {
    if (block_windows.empty()) bad("seq2seq needs at least one block");
    for (int w : block_windows)
      if (w < 1) bad("block windows must be positive");
  }
}

}  // namespace physio
