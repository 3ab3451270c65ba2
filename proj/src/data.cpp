// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>

#include "smn/config.hpp"
#include "smn/rng.hpp"

namespace smn {

namespace {

constexpr std::uint64_t kMeansTag = 0xda7a;
constexpr std::uint64_t kSampleTag = 0x5a3e;
constexpr std::uint64_t kSplitTag = 0x5b17;

// Random vector whose pairwise differences have expected norm `scale`.
std::vector<double> random_mean(Rng& rng, std::size_t n, double scale) {
  std::vector<double> m(n);
  const double sd = scale / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(n, 1)));
  for (auto& v : m) v = sd * rng.normal();
  return m;
}

std::uint64_t domain_id(const DatasetSpec& s) { return s.kind == "shifted-blobs" && s.domain == "target" ? 1 : 0; }

void split(Dataset& d) {
  Rng rng(derive_seed(d.spec.seed, kSplitTag, domain_id(d.spec)));
  for (std::size_t c = 0; c < d.classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < d.y.size(); ++i) {
      if (d.y[i] == static_cast<int>(c)) idx.push_back(i);
    }
    rng.shuffle(std::span(idx));
    const auto n_test =
        static_cast<std::size_t>(std::floor(d.spec.test_fraction * static_cast<double>(idx.size()) + 0.5));
    d.test.insert(d.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    d.train.insert(d.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(d.train.begin(), d.train.end());
  std::sort(d.test.begin(), d.test.end());
}

void gen_blobs(Dataset& d) {
  const auto& s = d.spec;
  Rng mrng(derive_seed(s.seed, kMeansTag));
  std::vector<std::vector<double>> means;
  for (std::size_t c = 0; c < s.classes; ++c) means.push_back(random_mean(mrng, s.dim, s.separation * s.noise));
  Rng rng(derive_seed(s.seed, kSampleTag, 0));
  d.x = Matrix(s.classes * s.per_class, s.dim);
  for (std::size_t c = 0, r = 0; c < s.classes; ++c) {
    for (std::size_t i = 0; i < s.per_class; ++i, ++r) {
      for (std::size_t j = 0; j < s.dim; ++j) d.x(r, j) = means[c][j] + s.noise * rng.normal();
      d.y.push_back(static_cast<int>(c));
    }
  }
}

void gen_shifted(Dataset& d) {
  const auto& s = d.spec;
  const std::size_t na = s.shift_dims;
  const std::size_t nb = s.dim - na;
  Rng mrng(derive_seed(s.seed, kMeansTag));
  std::vector<std::vector<double>> super;
  for (std::size_t g = 0; g < s.groups; ++g) super.push_back(random_mean(mrng, s.dim, s.group_separation * s.noise));
  std::vector<std::vector<double>> ma, mb;
  for (std::size_t c = 0; c < s.classes; ++c) {
    ma.push_back(random_mean(mrng, na, s.separation * s.noise));
    mb.push_back(random_mean(mrng, nb, s.separation * s.noise));
  }
  const bool target = s.domain == "target";
  const double keep = target ? 1.0 - s.shift : 1.0;
  const double nuis = target ? s.shift * s.nuisance * s.noise : 0.0;
  const std::size_t per_group = s.groups ? s.classes / s.groups : s.classes;
  Rng rng(derive_seed(s.seed, kSampleTag, domain_id(s)));
  d.x = Matrix(s.classes * s.per_class, s.dim);
  for (std::size_t c = 0, r = 0; c < s.classes; ++c) {
    const std::size_t g = s.groups ? c / per_group : 0;
    for (std::size_t i = 0; i < s.per_class; ++i, ++r) {
      for (std::size_t j = 0; j < s.dim; ++j) {
        const double base = s.groups ? super[g][j] : 0.0;
        double v;
        if (j < na) {
          v = base + keep * ma[c][j] + s.noise * rng.normal();
          if (nuis != 0.0) v += nuis * rng.normal();
        } else {
          v = base + mb[c][j - na] + s.noise * rng.normal();
        }
        d.x(r, j) = v;
      }
      d.y.push_back(static_cast<int>(c));
      if (s.groups) d.group.push_back(static_cast<int>(g));
    }
  }
}

void gen_moons(Dataset& d) {
  const auto& s = d.spec;
  Rng mrng(derive_seed(s.seed, kMeansTag));
  // Orthonormal 2-frame in R^dim by Gram-Schmidt.
  std::vector<double> u(s.dim), v(s.dim);
  for (auto& x : u) x = mrng.normal();
  for (auto& x : v) x = mrng.normal();
  auto normalize = [](std::vector<double>& a) {
    double n = 0.0;
    for (double x : a) n += x * x;
    n = std::sqrt(n);
    for (auto& x : a) x /= n;
  };
  normalize(u);
  double uv = 0.0;
  for (std::size_t j = 0; j < s.dim; ++j) uv += u[j] * v[j];
  for (std::size_t j = 0; j < s.dim; ++j) v[j] -= uv * u[j];
  normalize(v);
  Rng rng(derive_seed(s.seed, kSampleTag, 0));
  d.x = Matrix(2 * s.per_class, s.dim);
  for (std::size_t c = 0, r = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < s.per_class; ++i, ++r) {
      const double t = rng.uniform(0.0, std::numbers::pi);
      const double px = c == 0 ? std::cos(t) : 1.0 - std::cos(t);
      const double py = c == 0 ? std::sin(t) : 0.5 - std::sin(t);
      for (std::size_t j = 0; j < s.dim; ++j) {
        d.x(r, j) = s.separation * (px * u[j] + py * v[j]) + s.noise * rng.normal();
      }
      d.y.push_back(static_cast<int>(c));
    }
  }
}

void gen_glyphs(Dataset& d) {
  const auto& s = d.spec;
  const std::size_t n = s.image_side;
  Rng mrng(derive_seed(s.seed, kMeansTag));
  std::vector<std::vector<double>> templates;
  for (std::size_t c = 0; c < s.classes; ++c) {
    std::vector<double> img(n * n, 0.0);
    for (int stroke = 0; stroke < 3; ++stroke) {
      const double x0 = mrng.uniform(0, n - 1.0), y0 = mrng.uniform(0, n - 1.0);
      const double x1 = mrng.uniform(0, n - 1.0), y1 = mrng.uniform(0, n - 1.0);
      for (std::size_t k = 0; k <= 2 * n; ++k) {
        const double t = static_cast<double>(k) / static_cast<double>(2 * n);
        const auto px = static_cast<std::size_t>(std::lround(x0 + t * (x1 - x0)));
        const auto py = static_cast<std::size_t>(std::lround(y0 + t * (y1 - y0)));
        img[py * n + px] = 1.0;
      }
    }
    templates.push_back(std::move(img));
  }
  Rng rng(derive_seed(s.seed, kSampleTag, 0));
  d.x = Matrix(s.classes * s.per_class, n * n);
  for (std::size_t c = 0, r = 0; c < s.classes; ++c) {
    for (std::size_t i = 0; i < s.per_class; ++i, ++r) {
      const int dx = static_cast<int>(rng.below(3)) - 1;
      const int dy = static_cast<int>(rng.below(3)) - 1;
      for (std::size_t py = 0; py < n; ++py) {
        for (std::size_t px = 0; px < n; ++px) {
          const long sx = static_cast<long>(px) - dx;
          const long sy = static_cast<long>(py) - dy;
          double v = 0.0;
          if (sx >= 0 && sy >= 0 && sx < static_cast<long>(n) && sy < static_cast<long>(n)) {
            v = templates[c][static_cast<std::size_t>(sy) * n + static_cast<std::size_t>(sx)];
          }
          d.x(r, py * n + px) = v + s.noise * rng.normal();
        }
      }
      d.y.push_back(static_cast<int>(c));
    }
  }
}

}  // namespace

void DatasetSpec::validate() const {
  if (kind != "blobs" && kind != "moons" && kind != "glyphs" && kind != "shifted-blobs") {
    throw ConfigError("dataset kind must be blobs, moons, glyphs or shifted-blobs, got '" + kind + "'");
  }
  if (classes < 1) throw ConfigError("dataset.classes must be >= 1");
  if (kind == "moons" && classes != 2) throw ConfigError("moons has exactly 2 classes");
  if (per_class < 1) throw ConfigError("dataset.per_class must be >= 1");
  if (kind != "glyphs" && dim < 1) throw ConfigError("dataset.dim must be >= 1");
  if (kind == "moons" && dim < 2) throw ConfigError("moons needs dim >= 2");
  if (kind == "glyphs" && image_side < 2) throw ConfigError("glyphs needs image_side >= 2");
  if (!(noise >= 0.0)) throw ConfigError("dataset.noise must be >= 0");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("dataset.test_fraction must be in [0, 1)");
  if (kind == "shifted-blobs") {
    if (domain != "source" && domain != "target") throw ConfigError("dataset.domain must be source or target");
    if (shift_dims > dim) throw ConfigError("dataset.shift_dims exceeds dim");
    if (shift < 0.0 || shift > 1.0) throw ConfigError("dataset.shift must be in [0, 1]");
    if (groups > 0 && classes % groups != 0) throw ConfigError("dataset.classes must be a multiple of groups");
  }
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"kind", s.kind},
       {"classes", s.classes},
       {"per_class", s.per_class},
       {"dim", s.dim},
       {"separation", s.separation},
       {"noise", s.noise},
       {"test_fraction", s.test_fraction},
       {"domain", s.domain},
       {"shift_dims", s.shift_dims},
       {"shift", s.shift},
       {"nuisance", s.nuisance},
       {"groups", s.groups},
       {"group_separation", s.group_separation},
       {"image_side", s.image_side},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  if (!j.is_object()) throw ConfigError("dataset spec must be a JSON object");
  read_json_field(j, "kind", s.kind);
  read_json_field(j, "classes", s.classes);
  read_json_field(j, "per_class", s.per_class);
  read_json_field(j, "dim", s.dim);
  read_json_field(j, "separation", s.separation);
  read_json_field(j, "noise", s.noise);
  read_json_field(j, "test_fraction", s.test_fraction);
  read_json_field(j, "domain", s.domain);
  read_json_field(j, "shift_dims", s.shift_dims);
  read_json_field(j, "shift", s.shift);
  read_json_field(j, "nuisance", s.nuisance);
  read_json_field(j, "groups", s.groups);
  read_json_field(j, "group_separation", s.group_separation);
  read_json_field(j, "image_side", s.image_side);
  read_json_field(j, "seed", s.seed);
}

std::vector<int> Dataset::train_y() const {
  std::vector<int> out;
  for (auto i : train) out.push_back(y[i]);
  return out;
}

std::vector<int> Dataset::test_y() const {
  std::vector<int> out;
  for (auto i : test) out.push_back(y[i]);
  return out;
}

Dataset gen_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  d.classes = spec.kind == "moons" ? 2 : spec.classes;
  if (spec.kind == "blobs") {
    gen_blobs(d);
  } else if (spec.kind == "shifted-blobs") {
    gen_shifted(d);
  } else if (spec.kind == "moons") {
    gen_moons(d);
  } else {
    d.spec.dim = spec.image_side * spec.image_side;
    gen_glyphs(d);
  }
  split(d);
  return d;
}

void write_dataset_csv(std::ostream& os, const Dataset& d) {
  os << "split,label,group";
  for (std::size_t j = 0; j < d.dim(); ++j) os << ",f" << j;
  os << '\n';
  std::vector<char> is_test(d.y.size(), 0);
  for (auto i : d.test) is_test[i] = 1;
  const auto old = os.precision(17);
  for (std::size_t i = 0; i < d.y.size(); ++i) {
    os << (is_test[i] ? "test" : "train") << ',' << d.y[i] << ',' << (d.group.empty() ? -1 : d.group[i]);
    for (std::size_t j = 0; j < d.dim(); ++j) os << ',' << d.x(i, j);
    os << '\n';
  }
  os.precision(old);
}

}  // namespace smn
