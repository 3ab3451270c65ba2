// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include "smn/kernels.hpp"
#include "smn/rng.hpp"

namespace smn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMat> view(const Matrix& m) { return {m.data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())}; }

Matrix normalized_rows(const Matrix& x) {
  Matrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double n = std::sqrt(kernels::dot<double>(row, row));
    if (n > 0.0) {
      for (auto& v : row) v /= n;
    }
  }
  return out;
}

int label_count(const std::vector<int>& labels) {
  int mx = -1;
  for (int y : labels) {
    if (y < 0) throw std::invalid_argument("labels must be non-negative");
    mx = std::max(mx, y);
  }
  return mx + 1;
}

}  // namespace

void EmbeddingSet::validate() const {
  if (embeddings.rows() != labels.size()) {
    throw DimensionError("EmbeddingSet: " + std::to_string(embeddings.rows()) + " rows but " +
                         std::to_string(labels.size()) + " labels");
  }
  if (!embeddings.all_finite()) throw NumericError("EmbeddingSet: non-finite embedding");
}

std::size_t default_knn_k(std::size_t train_size) { return std::max<std::size_t>(1, std::min<std::size_t>(200, train_size / 5)); }

std::vector<int> knn_classify(const EmbeddingSet& train, const Matrix& queries, std::size_t k, double tau) {
  if (train.size() == 0) throw std::invalid_argument("knn_classify: empty training set");
  if (k < 1) throw std::invalid_argument("knn_classify: k must be >= 1");
  if (!(tau > 0.0)) throw std::invalid_argument("knn_classify: tau must be > 0");
  if (queries.cols() != train.dim()) throw DimensionError("knn_classify: query dimension mismatch");
  k = std::min(k, train.size());
  const Matrix tn = normalized_rows(train.embeddings);
  const Matrix qn = normalized_rows(queries);
  const int classes = label_count(train.labels);

  std::vector<int> out(qn.rows());
  std::vector<double> sim(tn.rows());
  std::vector<std::size_t> idx(tn.rows());
  std::vector<double> votes(static_cast<std::size_t>(classes));
  for (std::size_t q = 0; q < qn.rows(); ++q) {
    for (std::size_t i = 0; i < tn.rows(); ++i) sim[i] = kernels::dot<double>(qn.row(q), tn.row(i));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto closer = [&](std::size_t a, std::size_t b) { return sim[a] > sim[b] || (sim[a] == sim[b] && a < b); };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), closer);
    std::fill(votes.begin(), votes.end(), 0.0);
    // Sum in rank order so the result does not depend on nth_element's layout.
    std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), closer);
    for (std::size_t j = 0; j < k; ++j) {
      votes[static_cast<std::size_t>(train.labels[idx[j]])] += std::exp(sim[idx[j]] / tau);
    }
    out[q] = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return out;
}

double knn_accuracy(const EmbeddingSet& train, const EmbeddingSet& test, std::size_t k, double tau) {
  const auto pred = knn_classify(train, test.embeddings, k, tau);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == test.labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

Matrix ProbeModel::logits(const Matrix& x) const {
  if (x.cols() != weight.cols()) throw DimensionError("probe: feature dimension mismatch");
  RowMat xs = view(x);
  if (!feature_mean.empty()) {
    for (Eigen::Index c = 0; c < xs.cols(); ++c) {
      xs.col(c).array() = (xs.col(c).array() - feature_mean[c]) * feature_scale[c];
    }
  }
  RowMat z = xs * view(weight).transpose();
  z.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data(), Eigen::Index(bias.size()));
  Matrix out(x.rows(), num_classes());
  std::copy(z.data(), z.data() + z.size(), out.data());
  return out;
}

std::vector<int> ProbeModel::predict(const Matrix& x) const {
  const Matrix z = logits(x);
  std::vector<int> out(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const auto row = z.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

namespace {

struct ProbeObjective {
  const RowMat& x;
  const std::vector<int>& y;
  double l2;

  // Returns the loss; fills softmax-minus-onehot residual when asked.
  double eval(const RowMat& w, const Eigen::RowVectorXd& b, RowMat* resid) const {
    RowMat z = x * w.transpose();
    z.rowwise() += b;
    const auto n = static_cast<double>(x.rows());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double m = z.row(i).maxCoeff();
      const double lse = m + std::log((z.row(i).array() - m).exp().sum());
      loss += lse - z(i, y[static_cast<std::size_t>(i)]);
      if (resid) {
        resid->row(i) = (z.row(i).array() - lse).exp();
        (*resid)(i, y[static_cast<std::size_t>(i)]) -= 1.0;
      }
    }
    return loss / n + 0.5 * l2 * w.squaredNorm();
  }
};

}  // namespace

ProbeResult linear_probe(const EmbeddingSet& train, const EmbeddingSet* test, const ProbeConfig& config) {
  train.validate();
  const int classes = label_count(train.labels);
  {
    std::vector<int> seen(train.labels);
    std::sort(seen.begin(), seen.end());
    if (std::unique(seen.begin(), seen.end()) - seen.begin() < 2) {
      throw std::invalid_argument("linear_probe: need at least two classes in the training set");
    }
  }
  const std::size_t d = train.dim();
  ProbeResult res;
  ProbeModel& m = res.model;
  RowMat x = view(train.embeddings);
  if (config.standardize) {
    m.feature_mean.resize(d);
    m.feature_scale.resize(d);
    for (std::size_t c = 0; c < d; ++c) {
      auto col = x.col(Eigen::Index(c));
      const double mean = col.mean();
      const double var = (col.array() - mean).square().mean();
      const double sd = std::sqrt(var);
      m.feature_mean[c] = mean;
      m.feature_scale[c] = sd > 1e-12 ? 1.0 / sd : 1.0;
      col.array() = (col.array() - mean) * m.feature_scale[c];
    }
  }

  const ProbeObjective obj{x, train.labels, config.l2};
  RowMat w = RowMat::Zero(classes, Eigen::Index(d));
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(classes);
  RowMat resid(x.rows(), classes);
  const auto n = static_cast<double>(x.rows());
  double t = 1.0;
  double f = obj.eval(w, b, &resid);
  std::size_t it = 0;
  double gnorm = 0.0;
  for (; it < config.max_iters; ++it) {
    const RowMat gw = resid.transpose() * x / n + config.l2 * w;
    const Eigen::RowVectorXd gb = resid.colwise().sum() / n;
    const double g2 = gw.squaredNorm() + gb.squaredNorm();
    gnorm = std::sqrt(g2);
    if (gnorm < config.grad_tol) break;
    t = std::min(t * 2.0, 1e4);
    bool moved = false;
    for (int tries = 0; tries < 60; ++tries) {
      const RowMat w2 = w - t * gw;
      const Eigen::RowVectorXd b2 = b - t * gb;
      const double f2 = obj.eval(w2, b2, nullptr);
      if (f2 <= f - 0.5 * t * g2) {
        w = w2;
        b = b2;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) break;
    f = obj.eval(w, b, &resid);
  }
  res.iterations = it;
  res.grad_norm = gnorm;
  res.loss = f;
  m.weight = Matrix(static_cast<std::size_t>(classes), d);
  std::copy(w.data(), w.data() + w.size(), m.weight.data());
  m.bias.assign(b.data(), b.data() + b.size());

  auto acc = [&](const EmbeddingSet& s) {
    const auto p = m.predict(s.embeddings);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < p.size(); ++i) hit += p[i] == s.labels[i];
    return p.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(p.size());
  };
  res.train_accuracy = acc(train);
  if (test) {
    test->validate();
    res.test_accuracy = acc(*test);
  }
  return res;
}

std::optional<std::vector<std::size_t>> stratified_subsample(const std::vector<int>& labels, double fraction,
                                                             std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("stratified_subsample: fraction not in (0,1]");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<std::size_t> out;
  for (auto& [cls, idx] : by_class) {
    const auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size()) + 0.5));
    if (take == 0) return std::nullopt;
    Rng rng(derive_seed(seed, 0x10a5, static_cast<std::uint64_t>(cls)));
    rng.shuffle(std::span(idx));
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<AccuracyRow> lowshot_eval(const std::vector<LowshotVariant>& variants,
                                      const std::vector<double>& fractions, std::uint64_t seed,
                                      const ProbeConfig& config) {
  if (variants.empty()) return {};
  const auto& labels = variants.front().train.labels;
  for (const auto& v : variants) {
    if (v.train.labels != labels) throw std::invalid_argument("lowshot_eval: variants disagree on training labels");
  }
  std::vector<AccuracyRow> rows;
  for (double f : fractions) {
    const auto subset = stratified_subsample(labels, f, seed);
    if (!subset) {
      spdlog::warn("lowshot_eval: fraction {} leaves some class without labels; skipped", f);
      continue;
    }
    for (const auto& v : variants) {
      EmbeddingSet sub{v.train.embeddings.gather_rows(*subset), {}, "train"};
      for (std::size_t i : *subset) sub.labels.push_back(v.train.labels[i]);
      const auto r = linear_probe(sub, &v.test, config);
      rows.push_back({v.name, f, seed, *r.test_accuracy});
    }
  }
  return rows;
}

void write_accuracy_csv(std::ostream& os, const std::vector<AccuracyRow>& rows) {
  os << "method,fraction,seed,accuracy\n";
  for (const auto& r : rows) {
    os << r.method << ',' << r.fraction << ',' << r.seed << ',' << r.accuracy << '\n';
  }
}

}  // namespace smn
