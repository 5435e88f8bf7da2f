#include "doctest.h"

#include "physio/pearson_loss.hpp"
#include "physio/window_models.hpp"

#include <algorithm>
#include <random>
#include <set>

using namespace physio;
using M = ad::Matrix<double>;
using T = ad::Tensor<double>;

namespace {

M random_matrix(Index r, Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  M m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

ModelConfig small_seq2one(int n_roi = 6) {
  ModelConfig c = ModelConfig::seq2one_default(n_roi);
  c.attention = {2, 3, 0.0, 6};
  c.window = 8;
  c.init_seed = 3;
  return c;
}

ModelConfig small_seq2seq(int n_roi = 6) {
  ModelConfig c = ModelConfig::seq2seq_default(n_roi);
  c.attention = {2, 3, 0.0, 5};
  c.init_seed = 4;
  return c;
}

void zero_projections(ModelParams<double>& p) {
  for (auto& [name, t] : p) {
    if (name.find("attn.") != std::string::npos || name.find("ffn.") != std::string::npos) {
      t.mutable_value().setZero();
    }
  }
}

// Randomise every parameter (including biases and layer-norm terms) so the
// gradient check exercises all of them.
void perturb(ModelParams<double>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& [name, t] : p) {
    for (Index i = 0; i < t.size(); ++i) t.mutable_value().data()[i] += n(rng);
  }
}

}  // namespace

TEST_CASE("slide_windows") {
  CHECK(slide_windows(266, {32, 1}).size() == 235);
  const auto s = slide_windows(10, {4, 1});
  CHECK(s == std::vector<Index>{0, 1, 2, 3, 4, 5, 6});
  CHECK(slide_windows(11, {4, 2}) == std::vector<Index>{0, 2, 4, 6, 7});
  CHECK_THROWS_AS(slide_windows(3, {4, 1}), Error);
  CHECK_THROWS_AS(slide_windows(10, {4, 5}), Error);

  // Coverage: the union of windows is exactly [0, T).
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Index w = std::uniform_int_distribution<Index>(1, 24)(rng);
    const Index step = std::uniform_int_distribution<Index>(1, w)(rng);
    const Index len = std::uniform_int_distribution<Index>(w, 300)(rng);
    std::vector<int> covered(static_cast<std::size_t>(len), 0);
    for (Index st : slide_windows(len, {w, step}))
      for (Index p = 0; p < w; ++p) covered[static_cast<std::size_t>(st + p)] = 1;
    CHECK(std::all_of(covered.begin(), covered.end(), [](int c) { return c == 1; }));
  }
}

TEST_CASE("overlap_average against brute force") {
  // T = 10, W = 4, s = 1, each window emits its start index.
  const auto starts = slide_windows(10, {4, 1});
  M stacked(static_cast<Index>(starts.size()) * 4, 1);
  for (std::size_t k = 0; k < starts.size(); ++k) stacked.middleRows(Index(k) * 4, 4).setConstant(double(starts[k]));
  const M avg = ad::overlap_average(T::constant(stacked), starts, 4, 10).value();
  // t = 0 is covered only by window 0; t = 3 by windows 0..3 (mean 1.5).
  CHECK(avg(0, 0) == 0.0);
  CHECK(avg(3, 0) == 1.5);
  CHECK(avg(9, 0) == 6.0);

  // Single full-length window is the identity; constant windows stay constant.
  const M x = random_matrix(7, 3, 1);
  CHECK(ad::overlap_average(T::constant(x), {0}, 7, 7).value() == x);
  const M c = M::Constant(5 * 4, 2, 0.625);
  CHECK(ad::overlap_average(T::constant(c), slide_windows(8, {4, 1}), 4, 8).value() == M::Constant(8, 2, 0.625));
}

TEST_CASE("encoder layer") {
  const ModelConfig cfg = small_seq2one();
  auto params = init_params<double>(cfg);
  const auto p = EncoderParams<double>::view(params, "layer0.", true);
  Rng rng(1);
  const M x = random_matrix(3 * 8, 6, 2);
  const M pe = sinusoidal_encoding<double>(8, 6);

  M weights;
  const T y = encoder_layer(T::constant(x), 3, p, cfg.attention, &pe, false, rng, 1e-5, &weights);
  CHECK(y.rows() == x.rows());
  CHECK(y.cols() == x.cols());
  CHECK(weights.rows() == 3 * 2 * 8);
  for (Index i = 0; i < weights.rows(); ++i) CHECK(std::abs(weights.row(i).sum() - 1.0) < 1e-9);

  SUBCASE("zero projections with identity layer norm is the identity") {
    zero_projections(params);
    const auto pz = EncoderParams<double>::view(params, "layer0.", true);
    CHECK(encoder_layer(T::constant(x), 3, pz, cfg.attention, &pe, false, rng).value() == x);
  }
  SUBCASE("within-window permutation equivariance without positional encoding") {
    std::vector<Index> perm{3, 0, 7, 1, 6, 2, 5, 4};
    const M w = random_matrix(8, 6, 9);
    M wp(8, 6);
    for (Index i = 0; i < 8; ++i) wp.row(i) = w.row(perm[static_cast<std::size_t>(i)]);
    const M y0 = encoder_layer(T::constant(w), 1, p, cfg.attention, static_cast<const M*>(nullptr), false, rng).value();
    const M y1 = encoder_layer(T::constant(wp), 1, p, cfg.attention, static_cast<const M*>(nullptr), false, rng).value();
    for (Index i = 0; i < 8; ++i) CHECK((y1.row(i) - y0.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() < 1e-12);
    // With the encoding the same permutation is not equivariant.
    const M z0 = encoder_layer(T::constant(w), 1, p, cfg.attention, &pe, false, rng).value();
    const M z1 = encoder_layer(T::constant(wp), 1, p, cfg.attention, &pe, false, rng).value();
    double worst = 0;
    for (Index i = 0; i < 8; ++i) worst = std::max(worst, (z1.row(i) - z0.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff());
    CHECK(worst > 1e-6);
  }
  CHECK_THROWS_AS(encoder_layer(T::constant(random_matrix(8, 5, 1)), 1, p, cfg.attention, static_cast<const M*>(nullptr), false, rng), Error);
}

TEST_CASE("seq2one forward") {
  ModelConfig cfg = small_seq2one();
  cfg.window = 32;
  const auto params = init_params<double>(cfg);
  Rng rng(0);
  CHECK(seq2one_forward(random_matrix(266, 6, 1), params, cfg, false, rng).rows() == 235);
  CHECK(seq2one_forward(random_matrix(32, 6, 1), params, cfg, false, rng).rows() == 1);
  CHECK_THROWS_AS(seq2one_forward(random_matrix(31, 6, 1), params, cfg, false, rng), Error);
  CHECK_THROWS_AS(seq2one_forward(random_matrix(40, 5, 1), params, cfg, false, rng), Error);

  SUBCASE("fast path equals per-window reference") {
    for (bool pe : {true, false}) {
      ModelConfig c = small_seq2one();
      c.positional_encoding = pe;
      auto ps = init_params<double>(c);
      perturb(ps, 17);
      const M roi = random_matrix(30, 6, 7);
      const M fast = seq2one_forward(roi, ps, c, false, rng).value();
      const M ref = seq2one_forward_reference(roi, ps, c).value();
      CHECK(fast.rows() == 23);
      CHECK((fast - ref).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
  SUBCASE("windows are processed independently") {
    const ModelConfig c = small_seq2one();
    const auto ps = init_params<double>(c);
    const M roi = random_matrix(30, 6, 8);
    const M base = seq2one_forward(roi, ps, c, false, rng).value();
    M changed_roi = roi;
    changed_roi.row(15).array() += 1.0;
    const M changed = seq2one_forward(changed_roi, ps, c, false, rng).value();
    for (Index k = 0; k < base.rows(); ++k) {
      const bool inside = k <= 15 && 15 < k + c.window;
      CHECK((base(k, 0) != changed(k, 0)) == inside);
    }
  }
  SUBCASE("deterministic without dropout, reproducible with seeded dropout") {
    ModelConfig c = small_seq2one();
    c.attention.dropout = 0.3;
    const auto ps = init_params<double>(c);
    const M roi = random_matrix(20, 6, 9);
    Rng a(1), b(1);
    CHECK(seq2one_forward(roi, ps, c, false, a).value() == seq2one_forward(roi, ps, c, false, b).value());
    CHECK(seq2one_forward(roi, ps, c, true, a).value() == seq2one_forward(roi, ps, c, true, b).value());
  }
}

TEST_CASE("seq2seq forward") {
  const ModelConfig cfg = small_seq2seq();
  const auto params = init_params<double>(cfg);
  Rng rng(0);
  for (Index len = 20; len <= 300; len += 7) {
    CAPTURE(len);
    CHECK(seq2seq_forward(random_matrix(len, 6, Index(len)), params, cfg, false, rng).rows() == len);
  }
  CHECK(seq2seq_forward(random_matrix(300, 6, 1), params, cfg, false, rng).rows() == 300);
  CHECK_NOTHROW(seq2seq_forward(random_matrix(20, 6, 1), params, cfg, false, rng));
  CHECK_THROWS_AS(seq2seq_forward(random_matrix(19, 6, 1), params, cfg, false, rng), Error);

  // Steps are a quarter of each block window.
  for (int w : cfg.block_windows) {
    const auto starts = slide_windows(100, {w, w / 4});
    CHECK(starts[1] - starts[0] == w / 4);
  }
  CHECK(slide_windows(100, {8, 8 / 4})[1] == 2);
  CHECK(slide_windows(100, {20, 20 / 4})[1] == 5);

  SUBCASE("fast block equals per-window reference") {
    for (bool pe : {true, false}) {
      ModelConfig c = cfg;
      c.positional_encoding = pe;
      auto p = init_params<double>(c);
      perturb(p, 5);
      const auto ep = EncoderParams<double>::view(p, "block1.", false);
      const M x = random_matrix(37, 5, 11);
      for (Index w : {4, 8, 20}) {
        const M fast = seq2seq_block(T::constant(x), w, ep, c, false, rng).value();
        const M ref = seq2seq_block_reference(T::constant(x), w, ep, c, false, rng).value();
        CHECK((fast - ref).cwiseAbs().maxCoeff() < 1e-10);
      }
    }
  }
  SUBCASE("zero-weight block is the identity map") {
    auto p = init_params<double>(cfg);
    zero_projections(p);
    const auto ep = EncoderParams<double>::view(p, "block0.", false);
    const M x = random_matrix(23, 5, 3);
    const M y = seq2seq_block(T::constant(x), 8, ep, cfg, false, rng).value();
    CHECK((y - x).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("feature width changes parameter count, not output shape") {
    ModelConfig wide = cfg;
    wide.attention.model_dim = 10;
    const auto wp = init_params<double>(wide);
    CHECK(count_params(wp) > count_params(params));
    const M roi = random_matrix(40, 6, 2);
    const auto y0 = seq2seq_forward(roi, params, cfg, false, rng);
    const auto y1 = seq2seq_forward(roi, wp, wide, false, rng);
    CHECK(y0.rows() == y1.rows());
    CHECK(y0.cols() == y1.cols());
  }
}

TEST_CASE("parameter budgets") {
  const auto one = count_params(init_params<float>(ModelConfig::seq2one_default()));
  const auto seq = count_params(init_params<float>(ModelConfig::seq2seq_default()));
  MESSAGE("seq2one default params: " << one << ", seq2seq default params: " << seq);
  CHECK(one >= 1'200'000);
  CHECK(one <= 1'800'000);
  CHECK(seq >= 18'000'000);
  CHECK(seq <= 26'000'000);

  ModelParams<double> lin;
  Rng rng(0);
  detail::add_linear(lin, "head", 480, 1, rng);
  CHECK(count_params(lin) == 481);
}

TEST_CASE("end-to-end gradient check through both models") {
  const M roi = random_matrix(24, 6, 12);
  Eigen::VectorXd target(24);
  for (Index i = 0; i < 24; ++i) target[i] = std::sin(0.4 * double(i)) + 0.1 * double(i % 3);

  for (auto cfg : {small_seq2one(), small_seq2seq()}) {
    CAPTURE(to_string(cfg.architecture));
    auto params = init_params<double>(cfg);
    perturb(params, 99);
    std::vector<std::string> names;
    std::vector<M> values;
    for (const auto& [name, t] : params) {
      names.push_back(name);
      values.push_back(t.value());
    }
    const Index offset = cfg.architecture == Architecture::seq2one ? cfg.window / 2 : 0;
    auto loss = [&](std::span<const T> xs) {
      ModelParams<double> p;
      for (std::size_t i = 0; i < names.size(); ++i) p.emplace(names[i], xs[i]);
      Rng rng(0);
      const T pred = cfg.architecture == Architecture::seq2one
                         ? seq2one_forward(roi, p, cfg, false, rng)
                         : seq2seq_forward(roi, p, cfg, false, rng);
      return pearson_loss(pred, target.segment(offset, pred.rows()));
    };
    // The loss is shift invariant, so head.bias has an exactly zero gradient
    // and its finite difference is pure round-off (about 1e-11).
    CHECK(ad::grad_check(loss, values, 1e-5, 1e-6) < 1e-3);
  }
}
