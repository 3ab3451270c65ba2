// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/cascade.hpp"

#include <algorithm>
#include <optional>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <spdlog/spdlog.h>

#include "smn/bytes.hpp"
#include "smn/rng.hpp"
#include "smn/swav.hpp"

namespace smn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMat> view(const Matrix& m) { return {m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())}; }

Matrix from_eigen(const RowMat& m) {
  Matrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  std::copy(m.data(), m.data() + m.size(), out.data());
  return out;
}

double sqdist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

Matrix PCAModel::project(const Matrix& x) const {
  if (x.cols() != input_dim()) throw DimensionError("pca: input dimension mismatch");
  RowMat c = view(x);
  c.rowwise() -= Eigen::Map<const Eigen::RowVectorXd>(mean.data(), Eigen::Index(mean.size()));
  return from_eigen(c * view(components));
}

PCAModel pca_fit(const Matrix& x, std::size_t n_components) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (n < 2 || n_components < 1 || n_components > std::min(n - 1, d)) {
    throw std::invalid_argument("pca_fit: n_components must be in [1, min(rows-1, cols)] = [1, " +
                                std::to_string(n < 2 ? 0 : std::min(n - 1, d)) + "]");
  }
  PCAModel pca;
  RowMat c = view(x);
  const Eigen::RowVectorXd mu = c.colwise().mean();
  c.rowwise() -= mu;
  pca.mean.assign(mu.data(), mu.data() + mu.size());
  Eigen::BDCSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const double tol = s.size() ? s(0) * static_cast<double>(std::max(n, d)) * std::numeric_limits<double>::epsilon()
                              : 0.0;
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) rank += s(i) > tol;
  if (rank < n_components) {
    throw RankError("pca_fit: centered data has rank " + std::to_string(rank) + ", fewer than the " +
                        std::to_string(n_components) + " requested components",
                    rank);
  }
  Eigen::MatrixXd v = svd.matrixV().leftCols(Eigen::Index(n_components));
  // Sign convention: the largest-magnitude entry of every component is positive.
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    Eigen::Index arg = 0;
    v.col(j).cwiseAbs().maxCoeff(&arg);
    if (v(arg, j) < 0) v.col(j) = -v.col(j);
  }
  pca.components = from_eigen(v);
  pca.singular.assign(s.data(), s.data() + n_components);
  return pca;
}

Matrix whiten_reduce(const PCAModel& pca, const Matrix& e_bar) {
  const Matrix p = pca.project(e_bar);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < pca.output_dim(); ++i) {
    if (pca.singular[i] >= 1e-10) {
      keep.push_back(i);
    } else {
      spdlog::warn("whiten_reduce: dropping component {} (singular value {:.3g} below 1e-10)", i, pca.singular[i]);
    }
  }
  Matrix out(p.rows(), keep.size());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    for (std::size_t j = 0; j < keep.size(); ++j) out(r, j) = p(r, keep[j]) / pca.singular[keep[j]];
  }
  return out;
}

std::vector<double> GaussianMixture::log_joint(std::span<const double> x) const {
  const std::size_t k = components();
  const std::size_t p = means.cols();
  std::vector<double> out(k);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  for (std::size_t c = 0; c < k; ++c) {
    double acc = std::log(weights[c]);
    for (std::size_t j = 0; j < p; ++j) {
      const double v = variances(c, j);
      const double diff = x[j] - means(c, j);
      acc -= 0.5 * (log2pi + std::log(v) + diff * diff / v);
    }
    out[c] = acc;
  }
  return out;
}

namespace {

double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// k-means++ seeding on the rows of y.
Matrix kmeanspp(const Matrix& y, std::size_t k, Rng& rng) {
  const std::size_t n = y.rows();
  Matrix centers(k, y.cols());
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.below(static_cast<std::uint32_t>(n));
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(y.row(pick).begin(), y.row(pick).end(), centers.row(c).begin());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sqdist(y.row(i), centers.row(c)));
      total += d2[i];
    }
    if (c + 1 == k) break;
    if (total <= 0.0) {
      pick = rng.below(static_cast<std::uint32_t>(n));
      continue;
    }
    double u = rng.uniform() * total;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      u -= d2[i];
      if (u < 0.0) {
        pick = i;
        break;
      }
    }
  }
  return centers;
}

struct EmFit {
  GaussianMixture gmm;
  double log_likelihood = -std::numeric_limits<double>::infinity();
  std::size_t iterations = 0;
};

EmFit fit_gmm_once(const Matrix& y, std::size_t k, Rng& rng, const RouterOptions& options) {
  const std::size_t n = y.rows();
  const std::size_t p = y.cols();
  EmFit fit;
  auto& g = fit.gmm;
  g.means = kmeanspp(y, k, rng);
  g.variances = Matrix(k, p);
  g.weights.assign(k, 1.0 / static_cast<double>(k));
  {
    std::vector<double> gv(p, 0.0);
    for (std::size_t j = 0; j < p; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += y(i, j);
      m /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) gv[j] += (y(i, j) - m) * (y(i, j) - m);
      gv[j] = gv[j] / static_cast<double>(n) + options.var_floor;
    }
    for (std::size_t c = 0; c < k; ++c) std::copy(gv.begin(), gv.end(), g.variances.row(c).begin());
  }

  Matrix resp(n, k);
  double prev = -std::numeric_limits<double>::infinity();
  int retries = 0;
  std::size_t it = 0;
  for (; it < options.max_iters; ++it) {
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      auto lj = g.log_joint(y.row(i));
      const double lse = log_sum_exp(lj);
      ll += lse;
      for (std::size_t c = 0; c < k; ++c) resp(i, c) = std::exp(lj[c] - lse);
    }
    ll /= static_cast<double>(n);

    std::vector<double> nk(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < k; ++c) nk[c] += resp(i, c);
    }
    bool reseeded = false;
    for (std::size_t c = 0; c < k; ++c) {
      if (nk[c] >= 1e-8) continue;
      if (++retries > 3) throw NumericError("fit_router: component emptied more than 3 times");
      // Re-seed at the point farthest from the mean of its most responsible component.
      std::size_t far = 0;
      double best = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto r = resp.row(i);
        const auto owner = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
        const double dd = sqdist(y.row(i), g.means.row(owner));
        if (dd > best) {
          best = dd;
          far = i;
        }
      }
      spdlog::warn("fit_router: component {} emptied at EM iteration {}; re-seeding (retry {})", c, it, retries);
      std::copy(y.row(far).begin(), y.row(far).end(), g.means.row(c).begin());
      reseeded = true;
    }
    if (reseeded) {
      prev = -std::numeric_limits<double>::infinity();
      continue;
    }

    for (std::size_t c = 0; c < k; ++c) {
      auto mu = g.means.row(c);
      std::fill(mu.begin(), mu.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp(i, c);
        for (std::size_t j = 0; j < p; ++j) mu[j] += r * y(i, j);
      }
      for (auto& v : mu) v /= nk[c];
      auto var = g.variances.row(c);
      std::fill(var.begin(), var.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp(i, c);
        for (std::size_t j = 0; j < p; ++j) var[j] += r * (y(i, j) - mu[j]) * (y(i, j) - mu[j]);
      }
      for (auto& v : var) v = v / nk[c] + options.var_floor;
      g.weights[c] = nk[c] / static_cast<double>(n);
    }
    fit.log_likelihood = ll;
    if (ll - prev < options.tol) {
      ++it;
      break;
    }
    prev = ll;
  }
  fit.iterations = it;
  return fit;
}

}  // namespace

RouterModel fit_router(const Matrix& embeddings, std::size_t k, std::size_t pca_dims, std::uint64_t seed,
                       const RouterOptions& options) {
  const std::size_t n = embeddings.rows();
  if (k < 1) throw std::invalid_argument("fit_router: k must be >= 1");
  if (n < std::max<std::size_t>(k, 2)) throw std::invalid_argument("fit_router: fewer samples than components");
  RouterModel router;
  router.rule = options.rule;
  std::size_t dims = std::min({pca_dims, n - 1, embeddings.cols()});
  try {
    router.pca = pca_fit(embeddings, dims);
  } catch (const RankError& e) {
    spdlog::warn("fit_router: {}; using {} components", e.what(), e.achievable_rank());
    if (e.achievable_rank() == 0) throw;
    router.pca = pca_fit(embeddings, e.achievable_rank());
  }
  const Matrix y = router.pca.project(embeddings);
  const std::size_t restarts = std::max<std::size_t>(options.restarts, 1);
  bool have = false;
  std::optional<NumericError> last_error;
  for (std::size_t r = 0; r < restarts; ++r) {
    Rng rng(r == 0 ? seed : derive_seed(seed, 0x4e57, r));
    EmFit fit;
    try {
      fit = fit_gmm_once(y, k, rng, options);
    } catch (const NumericError& e) {
      spdlog::warn("fit_router: restart {} abandoned: {}", r, e.what());
      last_error = e;
      continue;
    }
    // Strict improvement keeps the earliest restart on ties.
    if (!have || fit.log_likelihood > router.log_likelihood) {
      have = true;
      router.gmm = std::move(fit.gmm);
      router.log_likelihood = fit.log_likelihood;
      router.em_iterations = fit.iterations;
    }
  }
  if (!have) throw *last_error;
  return router;
}

namespace {

std::size_t route_projected(const RouterModel& router, std::span<const double> y) {
  const auto& g = router.gmm;
  if (router.rule == RouteRule::euclidean) {
    std::size_t best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < g.components(); ++c) {
      const double dd = sqdist(y, g.means.row(c));
      if (dd < bd) {
        bd = dd;
        best = c;
      }
    }
    return best;
  }
  const auto lj = g.log_joint(y);
  std::size_t best = 0;
  for (std::size_t c = 1; c < lj.size(); ++c) {
    if (lj[c] > lj[best]) best = c;
  }
  return best;
}

}  // namespace

std::size_t route(const RouterModel& router, std::span<const double> embedding) {
  Matrix one(1, embedding.size());
  std::copy(embedding.begin(), embedding.end(), one.data());
  const Matrix y = router.pca.project(one);
  return route_projected(router, y.row(0));
}

std::vector<std::size_t> route_all(const RouterModel& router, const Matrix& embeddings) {
  const Matrix y = router.pca.project(embeddings);
  std::vector<std::size_t> out(y.rows());
  for (std::size_t i = 0; i < y.rows(); ++i) out[i] = route_projected(router, y.row(i));
  return out;
}

Matrix responsibilities(const RouterModel& router, const Matrix& embeddings) {
  const Matrix y = router.pca.project(embeddings);
  Matrix out(y.rows(), router.gmm.components());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const auto lj = router.gmm.log_joint(y.row(i));
    const double lse = log_sum_exp(lj);
    for (std::size_t c = 0; c < lj.size(); ++c) out(i, c) = std::exp(lj[c] - lse);
  }
  return out;
}

std::size_t expert_epochs(std::size_t dataset_size, std::size_t ref_size, std::size_t ref_epochs) {
  if (dataset_size < 1) throw std::invalid_argument("expert_epochs: dataset_size must be >= 1");
  // Integer half-up rounding of ref_size * ref_epochs / dataset_size.
  const std::uint64_t num = static_cast<std::uint64_t>(ref_size) * ref_epochs;
  return static_cast<std::size_t>((2 * num + dataset_size) / (2 * static_cast<std::uint64_t>(dataset_size)));
}

std::vector<double> concat_unconditional(std::span<const double> dispatcher,
                                         const std::vector<std::span<const double>>& experts) {
  std::vector<double> out(dispatcher.begin(), dispatcher.end());
  for (const auto& e : experts) {
    if (e.size() != dispatcher.size()) throw DimensionError("concat_unconditional: expert dimension mismatch");
    out.insert(out.end(), e.begin(), e.end());
  }
  return out;
}

std::vector<double> concat_conditional(std::span<const double> dispatcher, std::span<const double> expert,
                                       std::size_t index, std::size_t k) {
  if (index >= k) throw std::out_of_range("concat_conditional: expert index out of range");
  if (expert.size() != dispatcher.size()) throw DimensionError("concat_conditional: expert dimension mismatch");
  const std::size_t f = dispatcher.size();
  std::vector<double> out((k + 1) * f, 0.0);
  std::copy(dispatcher.begin(), dispatcher.end(), out.begin());
  std::copy(expert.begin(), expert.end(), out.begin() + static_cast<std::ptrdiff_t>((index + 1) * f));
  return out;
}

void CascadeConfig::validate() const {
  smn.validate();
  if (k < 1) throw ConfigError("cascade.k must be >= 1");
  if (pca_dims < 1) throw ConfigError("cascade.pca_dims must be >= 1");
}

void to_json(nlohmann::json& j, const CascadeConfig& c) {
  j = {{"smn", c.smn},
       {"k", c.k},
       {"pca_dims", c.pca_dims},
       {"route_rule", c.route_rule == RouteRule::posterior ? "posterior" : "euclidean"},
       {"ref_size", c.ref_size},
       {"ref_epochs", c.ref_epochs},
       {"max_expert_epochs", c.max_expert_epochs}};
}

void from_json(const nlohmann::json& j, CascadeConfig& c) {
  if (!j.is_object()) throw ConfigError("cascade config must be a JSON object");
  if (auto it = j.find("smn"); it != j.end()) it->get_to(c.smn);
  if (auto it = j.find("k"); it != j.end()) c.k = it->get<std::size_t>();
  if (auto it = j.find("pca_dims"); it != j.end()) c.pca_dims = it->get<std::size_t>();
  if (auto it = j.find("route_rule"); it != j.end()) {
    const auto s = it->get<std::string>();
    if (s == "posterior") {
      c.route_rule = RouteRule::posterior;
    } else if (s == "euclidean") {
      c.route_rule = RouteRule::euclidean;
    } else {
      throw ConfigError("route_rule must be posterior or euclidean, got '" + s + "'");
    }
  }
  if (auto it = j.find("ref_size"); it != j.end()) c.ref_size = it->get<std::size_t>();
  if (auto it = j.find("ref_epochs"); it != j.end()) c.ref_epochs = it->get<std::size_t>();
  if (auto it = j.find("max_expert_epochs"); it != j.end()) c.max_expert_epochs = it->get<std::size_t>();
}

template <class Real>
Tensor<Real> masked_embed(const SmallModel<Real>& backbone, const MaskSet& masks, const Tensor<Real>& x) {
  SmallModel<Real> m = backbone;
  m.apply_mask_set(masks);
  return embed(m, x);
}

namespace {

template <class Real>
Matrix unconditional_bar(SmallModel<Real>& work, const CascadeBundle& b, const Tensor<Real>& x) {
  const std::size_t f = b.embedding_dim;
  Matrix out(x.rows(), (b.k() + 1) * f);
  auto put_block = [&](const Tensor<Real>& e, std::size_t block) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t j = 0; j < f; ++j) out(r, block * f + j) = static_cast<double>(e(r, j));
    }
  };
  work.apply_mask_set(b.dispatcher);
  put_block(embed(work, x), 0);
  for (std::size_t k = 0; k < b.k(); ++k) {
    work.apply_mask_set(b.experts[k]);
    put_block(embed(work, x), k + 1);
  }
  return out;
}

}  // namespace

template <class Real>
CascadeBundle train_cascade(const SmallModel<Real>& backbone, const Tensor<Real>& data, const CascadeConfig& config) {
  config.validate();
  const std::size_t n = data.rows();
  CascadeBundle b;
  b.embedding_dim = backbone.embedding_dim();

  SmallModel<Real> dispatcher = backbone;
  dispatcher.detach_masks();
  dispatcher.head().reset();
  {
    SmnTrainer<Real> trainer(dispatcher, data, config.smn);
    trainer.run();
    if (trainer.diverged()) spdlog::warn("train_cascade: dispatcher training diverged; using last good state");
  }
  b.dispatcher = dispatcher.masks();

  const Matrix emb = embed(dispatcher, data).template cast<double>();
  RouterOptions ro;
  ro.rule = config.route_rule;
  b.router = fit_router(emb, config.k, config.pca_dims, derive_seed(config.smn.seed, 0xc1a5), ro);
  const auto routes = route_all(b.router, emb);
  const std::size_t k = config.k;
  b.cluster_sizes.assign(k, 0);
  for (auto r : routes) ++b.cluster_sizes[r];

  // Small clusters train with (and reuse the expert of) the nearest large one.
  b.trained_from.resize(k);
  std::iota(b.trained_from.begin(), b.trained_from.end(), std::size_t{0});
  std::vector<std::size_t> big;
  for (std::size_t c = 0; c < k; ++c) {
    if (b.cluster_sizes[c] >= config.smn.batch_size) big.push_back(c);
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (b.cluster_sizes[c] >= config.smn.batch_size) continue;
    if (big.empty()) {
      b.trained_from[c] = 0;
    } else {
      std::size_t best = big.front();
      for (auto o : big) {
        if (sqdist(b.router.gmm.means.row(c), b.router.gmm.means.row(o)) <
            sqdist(b.router.gmm.means.row(c), b.router.gmm.means.row(best))) {
          best = o;
        }
      }
      b.trained_from[c] = best;
    }
    spdlog::warn("train_cascade: cluster {} has {} samples (< batch size {}); merged into cluster {}", c,
                 b.cluster_sizes[c], config.smn.batch_size, b.trained_from[c]);
  }
  if (big.empty()) std::fill(b.trained_from.begin(), b.trained_from.end(), std::size_t{0});

  const std::size_t ref_size = config.ref_size ? config.ref_size : n;
  const std::size_t ref_epochs = config.ref_epochs ? config.ref_epochs : config.smn.epochs;
  b.experts.assign(k, {});
  for (std::size_t c = 0; c < k; ++c) {
    if (b.trained_from[c] != c) continue;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i) {
      if (big.empty() || b.trained_from[routes[i]] == c) idx.push_back(i);
    }
    TrainConfig ec = config.smn;
    ec.epochs = expert_epochs(idx.size(), ref_size, ref_epochs);
    if (config.max_expert_epochs) ec.epochs = std::min(ec.epochs, config.max_expert_epochs);
    ec.epochs = std::max<std::size_t>(ec.epochs, 1);
    ec.seed = derive_seed(config.smn.seed, 0xe4e7, c);
    if (ec.queue_length > 0) ec.queue_start_epoch = static_cast<int>(ec.epochs / 5);
    SmallModel<Real> expert = dispatcher;
    SmnTrainer<Real> trainer(expert, data.gather_rows(idx), ec);
    trainer.run();
    if (trainer.diverged()) spdlog::warn("train_cascade: expert {} diverged; using last good state", c);
    b.experts[c] = expert.masks();
    spdlog::info("train_cascade: expert {} trained on {} samples for {} epochs", c, idx.size(), ec.epochs);
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (b.trained_from[c] != c) b.experts[c] = b.experts[b.trained_from[c]];
  }

  SmallModel<Real> work = backbone;
  work.head().reset();
  const Matrix bar = unconditional_bar(work, b, data);
  std::size_t f = std::min({b.embedding_dim, n - 1, bar.cols()});
  try {
    b.whitening = pca_fit(bar, f);
  } catch (const RankError& e) {
    spdlog::warn("train_cascade: {}; whitening to {} dimensions", e.what(), e.achievable_rank());
    b.whitening = pca_fit(bar, e.achievable_rank());
  }
  return b;
}

template <class Real>
CascadeEmbedding cascade_embed(const CascadeBundle& bundle, const SmallModel<Real>& backbone, const Tensor<Real>& x,
                               CascadeMode mode) {
  SmallModel<Real> work = backbone;
  work.head().reset();
  const std::uint64_t start = work.rows_forwarded();
  CascadeEmbedding out;
  const std::size_t f = bundle.embedding_dim;
  const std::size_t k = bundle.k();
  if (mode == CascadeMode::unconditional) {
    out.e_bar = unconditional_bar(work, bundle, x);
    Matrix d(x.rows(), f);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t j = 0; j < f; ++j) d(r, j) = out.e_bar(r, j);
    }
    out.routes = route_all(bundle.router, d);
  } else {
    work.apply_mask_set(bundle.dispatcher);
    const Matrix d = embed(work, x).template cast<double>();
    out.routes = route_all(bundle.router, d);
    out.e_bar = Matrix(x.rows(), (k + 1) * f);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t j = 0; j < f; ++j) out.e_bar(r, j) = d(r, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < x.rows(); ++i) {
        if (out.routes[i] == c) idx.push_back(i);
      }
      if (idx.empty()) continue;
      work.apply_mask_set(bundle.experts[c]);
      const auto e = embed(work, x.gather_rows(idx));
      for (std::size_t t = 0; t < idx.size(); ++t) {
        for (std::size_t j = 0; j < f; ++j) out.e_bar(idx[t], (c + 1) * f + j) = static_cast<double>(e(t, j));
      }
    }
  }
  out.e_star = whiten_reduce(bundle.whitening, out.e_bar);
  out.backbone_rows_forwarded = work.rows_forwarded() - start;
  return out;
}

std::vector<ClusterCurve> cluster_homogeneity(std::span<const std::size_t> assignments, std::span<const int> labels) {
  if (assignments.size() != labels.size()) throw DimensionError("cluster_homogeneity: size mismatch");
  std::map<std::size_t, std::map<int, std::size_t>> counts;
  for (std::size_t i = 0; i < labels.size(); ++i) ++counts[assignments[i]][labels[i]];
  std::vector<ClusterCurve> out;
  for (const auto& [cluster, by_label] : counts) {
    ClusterCurve cc;
    cc.cluster = cluster;
    std::vector<std::size_t> cnt;
    for (const auto& [lab, n] : by_label) {
      cnt.push_back(n);
      cc.size += n;
    }
    std::sort(cnt.rbegin(), cnt.rend());
    std::size_t run = 0;
    for (auto n : cnt) {
      run += n;
      cc.shares.push_back(static_cast<double>(n) / static_cast<double>(cc.size));
      cc.cumulative.push_back(static_cast<double>(run) / static_cast<double>(cc.size));
    }
    out.push_back(std::move(cc));
  }
  return out;
}

void write_homogeneity_csv(std::ostream& os, const std::vector<ClusterCurve>& curves) {
  os << "cluster,rank,share,cumulative\n";
  for (const auto& c : curves) {
    for (std::size_t i = 0; i < c.shares.size(); ++i) {
      os << c.cluster << ',' << i + 1 << ',' << c.shares[i] << ',' << c.cumulative[i] << '\n';
    }
  }
}

std::vector<std::uint8_t> encode_whitening(const PCAModel& pca) {
  ByteWriter w;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pca.input_dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pca.output_dim()));
  for (double v : pca.mean) w.put<double>(v);
  for (double v : pca.components.values()) w.put<double>(v);
  for (double v : pca.singular) w.put<double>(v);
  return w.take();
}

PCAModel decode_whitening(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const std::size_t d = r.get<std::uint32_t>();
  const std::size_t f = r.get<std::uint32_t>();
  PCAModel p;
  p.mean.resize(d);
  for (auto& v : p.mean) v = r.get<double>();
  p.components = Matrix(d, f);
  for (auto& v : p.components.values()) v = r.get<double>();
  p.singular.resize(f);
  for (auto& v : p.singular) v = r.get<double>();
  if (r.remaining() != 0) throw std::runtime_error("whitening.bin: trailing bytes");
  return p;
}

namespace {

nlohmann::json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  return Matrix({j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>()},
                j.at("data").get<std::vector<double>>());
}

}  // namespace

void save_bundle(const std::filesystem::path& dir, const CascadeBundle& b) {
  std::filesystem::create_directories(dir);
  write_mask_file(dir / "dispatcher.mask", b.dispatcher);
  for (std::size_t k = 0; k < b.k(); ++k) write_mask_file(dir / ("expert_" + std::to_string(k) + ".mask"), b.experts[k]);
  nlohmann::json j;
  j["k"] = b.k();
  j["embedding_dim"] = b.embedding_dim;
  j["route_rule"] = b.router.rule == RouteRule::posterior ? "posterior" : "euclidean";
  j["em_iterations"] = b.router.em_iterations;
  j["log_likelihood"] = b.router.log_likelihood;
  j["gmm"] = {{"means", matrix_json(b.router.gmm.means)},
              {"variances", matrix_json(b.router.gmm.variances)},
              {"weights", b.router.gmm.weights}};
  j["pca"] = {{"mean", b.router.pca.mean},
              {"components", matrix_json(b.router.pca.components)},
              {"singular", b.router.pca.singular}};
  j["cluster_sizes"] = b.cluster_sizes;
  j["trained_from"] = b.trained_from;
  const std::string text = j.dump(2) + "\n";
  write_file_bytes(dir / "router.json", {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
  write_file_bytes(dir / "whitening.bin", encode_whitening(b.whitening));
}

CascadeBundle load_bundle(const std::filesystem::path& dir) {
  CascadeBundle b;
  const auto raw = read_file_bytes(dir / "router.json");
  const auto j = nlohmann::json::parse(raw.begin(), raw.end());
  const std::size_t k = j.at("k").get<std::size_t>();
  b.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  b.router.rule = j.at("route_rule").get<std::string>() == "euclidean" ? RouteRule::euclidean : RouteRule::posterior;
  b.router.em_iterations = j.at("em_iterations").get<std::size_t>();
  b.router.log_likelihood = j.at("log_likelihood").get<double>();
  b.router.gmm.means = matrix_from_json(j.at("gmm").at("means"));
  b.router.gmm.variances = matrix_from_json(j.at("gmm").at("variances"));
  b.router.gmm.weights = j.at("gmm").at("weights").get<std::vector<double>>();
  b.router.pca.mean = j.at("pca").at("mean").get<std::vector<double>>();
  b.router.pca.components = matrix_from_json(j.at("pca").at("components"));
  b.router.pca.singular = j.at("pca").at("singular").get<std::vector<double>>();
  b.cluster_sizes = j.at("cluster_sizes").get<std::vector<std::size_t>>();
  b.trained_from = j.at("trained_from").get<std::vector<std::size_t>>();
  b.dispatcher = read_mask_file(dir / "dispatcher.mask");
  for (std::size_t c = 0; c < k; ++c) b.experts.push_back(read_mask_file(dir / ("expert_" + std::to_string(c) + ".mask")));
  b.whitening = decode_whitening(read_file_bytes(dir / "whitening.bin"));
  return b;
}

std::size_t bundle_mask_bits(const CascadeBundle& b) {
  std::size_t bits = 0;
  auto add = [&](const MaskSet& s) {
    for (const auto& m : s) bits += m.size();
  };
  add(b.dispatcher);
  for (const auto& e : b.experts) add(e);
  return bits;
}

#define SMN_INSTANTIATE(Real)                                                                                  \
  template Tensor<Real> masked_embed<Real>(const SmallModel<Real>&, const MaskSet&, const Tensor<Real>&);     \
  template CascadeBundle train_cascade<Real>(const SmallModel<Real>&, const Tensor<Real>&, const CascadeConfig&); \
  template CascadeEmbedding cascade_embed<Real>(const CascadeBundle&, const SmallModel<Real>&, const Tensor<Real>&, \
                                                CascadeMode);

SMN_INSTANTIATE(float)
SMN_INSTANTIATE(double)
#undef SMN_INSTANTIATE

}  // namespace smn
