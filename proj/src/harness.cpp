// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "smn/harness.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "smn/mask_io.hpp"
#include "smn/swav.hpp"

namespace smn {

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  write_file_bytes(p, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace

TrainConfig BackboneSpec::default_pretrain_config() {
  TrainConfig c;
  c.lr = 0.05;
  c.momentum = 0.9;
  c.epochs = 40;
  c.batch_size = 64;
  c.head_lr = 0.05;
  c.schedule = LrSchedule::cosine;
  return c;
}

void to_json(nlohmann::json& j, const BackboneSpec& s) {
  j = {{"hidden", s.hidden}, {"embedding_dim", s.embedding_dim}, {"pretrain", s.pretrain}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, BackboneSpec& s) {
  read_json_field(j, "hidden", s.hidden);
  read_json_field(j, "embedding_dim", s.embedding_dim);
  if (auto it = j.find("pretrain"); it != j.end()) it->get_to(s.pretrain);
  read_json_field(j, "seed", s.seed);
}

template <class Real>
SmallModel<Real> pretrain_backbone(const Dataset& source, const BackboneSpec& spec, double* train_accuracy) {
  std::vector<std::size_t> dims{source.dim()};
  dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
  dims.push_back(spec.embedding_dim);
  auto model = SmallModel<Real>::mlp(dims, derive_seed(spec.seed, 0xbb0e));
  const Tensor<Real> x = source.train_x().template cast<Real>();
  const auto y = source.train_y();
  TrainConfig cfg = spec.pretrain;
  cfg.seed = derive_seed(spec.seed, 0x9e7a);
  SupervisedTrainer<Real> trainer(model, x, y, source.classes, cfg, AdaptMode::fft);
  trainer.run();
  for (const auto& e : trainer.epochs()) {
    if (!std::isfinite(e.loss)) throw NumericError("pretrain_backbone: diverged at epoch " + std::to_string(e.epoch));
  }
  if (train_accuracy) *train_accuracy = accuracy(predict_classes(model, x), y);
  model.head().reset();
  model.freeze_backbone();
  model.touch();
  return model;
}

Method parse_method(const std::string& s) {
  if (s == "knn") return Method::knn;
  if (s == "fft") return Method::fft;
  if (s == "mask-supervised") return Method::mask_supervised;
  if (s == "smn") return Method::smn;
  if (s == "smn+cascade") return Method::smn_cascade;
  if (s == "topk") return Method::topk;
  if (s == "progressive-topk") return Method::progressive_topk;
  throw ConfigError("unknown method '" + s +
                    "' (knn, fft, mask-supervised, smn, smn+cascade, topk, progressive-topk)");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::knn: return "knn";
    case Method::fft: return "fft";
    case Method::mask_supervised: return "mask-supervised";
    case Method::smn: return "smn";
    case Method::smn_cascade: return "smn+cascade";
    case Method::topk: return "topk";
    case Method::progressive_topk: return "progressive-topk";
  }
  return "?";
}

void to_json(nlohmann::json& j, const EvalSpec& s) {
  j = {{"knn_k", s.knn_k},
       {"knn_tau", s.knn_tau},
       {"probe",
        {{"max_iters", s.probe.max_iters},
         {"grad_tol", s.probe.grad_tol},
         {"l2", s.probe.l2},
         {"standardize", s.probe.standardize}}},
       {"lowshot_fractions", s.lowshot_fractions}};
}

void from_json(const nlohmann::json& j, EvalSpec& s) {
  read_json_field(j, "knn_k", s.knn_k);
  read_json_field(j, "knn_tau", s.knn_tau);
  if (auto it = j.find("probe"); it != j.end()) {
    read_json_field(*it, "max_iters", s.probe.max_iters);
    read_json_field(*it, "grad_tol", s.probe.grad_tol);
    read_json_field(*it, "l2", s.probe.l2);
    read_json_field(*it, "standardize", s.probe.standardize);
  }
  read_json_field(j, "lowshot_fractions", s.lowshot_fractions);
}

void ExperimentConfig::validate() const {
  source.validate();
  target.validate();
  train.validate();
  if (target.kind == "glyphs" || source.kind == "glyphs") {
    if (source.image_side != target.image_side) throw ConfigError("source and target image sizes differ");
  } else if (source.dim != target.dim) {
    throw ConfigError("source and target feature dimensions differ");
  }
  if (method == Method::topk || method == Method::progressive_topk) {
    if (!(topk_fraction > 0.0 && topk_fraction <= 1.0)) throw ConfigError("topk_fraction must be in (0, 1]");
  }
  if (method == Method::smn_cascade) cascade.validate();
  if (!(eval.knn_tau > 0.0)) throw ConfigError("eval.knn_tau must be > 0");
  for (double f : eval.lowshot_fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("eval.lowshot_fractions must lie in (0, 1]");
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"source", c.source},   {"target", c.target},   {"backbone", c.backbone},
       {"method", to_string(c.method)}, {"train", c.train}, {"topk_fraction", c.topk_fraction},
       {"cascade", c.cascade}, {"eval", c.eval},       {"out_dir", c.out_dir.string()}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  if (auto it = j.find("source"); it != j.end()) it->get_to(c.source);
  if (auto it = j.find("target"); it != j.end()) it->get_to(c.target);
  if (auto it = j.find("backbone"); it != j.end()) it->get_to(c.backbone);
  if (auto it = j.find("method"); it != j.end()) c.method = parse_method(it->get<std::string>());
  if (auto it = j.find("train"); it != j.end()) it->get_to(c.train);
  read_json_field(j, "topk_fraction", c.topk_fraction);
  if (auto it = j.find("cascade"); it != j.end()) it->get_to(c.cascade);
  if (auto it = j.find("eval"); it != j.end()) it->get_to(c.eval);
  if (auto it = j.find("out_dir"); it != j.end()) c.out_dir = it->get<std::string>();
}

nlohmann::json apply_overrides(nlohmann::json j, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not of the form a.b=value");
    const std::string path = o.substr(0, eq);
    const std::string text = o.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    std::string ptr = "/";
    for (char ch : path) ptr += ch == '.' ? '/' : ch;
    j[nlohmann::json::json_pointer(ptr)] = value;
  }
  return j;
}

nlohmann::json ExperimentReport::to_json() const {
  auto opt = [](const auto& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"method", method},
          {"knn_accuracy", opt(knn_accuracy)},
          {"probe_accuracy", opt(probe_accuracy)},
          {"classifier_accuracy", opt(classifier_accuracy)},
          {"found_sparsity", opt(found_sparsity)},
          {"conditional_knn_accuracy", opt(conditional_knn_accuracy)},
          {"dispatcher_knn_accuracy", opt(dispatcher_knn_accuracy)},
          {"conditional_rows_forwarded", opt(conditional_rows_forwarded)},
          {"artifacts", artifacts},
          {"errors", errors}};
}

void write_sparsity_csv(std::ostream& os, const std::vector<BinaryMask>& masks) {
  os << "layer,id,n_params,n_active,fraction\n";
  std::size_t total = 0;
  std::size_t active = 0;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const std::size_t a = masks[i].active_count();
    os << "layer" << i << ',' << i << ',' << masks[i].size() << ',' << a << ','
       << (masks[i].size() ? static_cast<double>(a) / static_cast<double>(masks[i].size()) : 1.0) << '\n';
    total += masks[i].size();
    active += a;
  }
  os << "all,-1," << total << ',' << active << ','
     << (total ? static_cast<double>(active) / static_cast<double>(total) : 1.0) << '\n';
}

template <class Real>
EmbeddingSet split_embeddings(const SmallModel<Real>& model, const Dataset& d, bool test) {
  const Tensor<Real> x = (test ? d.test_x() : d.train_x()).template cast<Real>();
  return make_embedding_set(embed(model, x), test ? d.test_y() : d.train_y(), test ? "test" : "train");
}

std::filesystem::path default_out_root() {
  if (const char* env = std::getenv("SMN_OUT_DIR"); env && *env) return env;
  return "smn_out";
}

namespace {

template <class Real>
struct Runner {
  const ExperimentConfig& cfg;
  ExperimentReport& rep;
  Dataset target;
  std::filesystem::path out;

  bool writing() const { return !out.empty(); }

  void artifact(const std::string& name, const std::string& text) {
    if (!writing()) return;
    write_text(out / name, text);
    rep.artifacts.push_back(name);
  }

  void artifact_bytes(const std::string& name, std::span<const std::uint8_t> bytes) {
    if (!writing()) return;
    write_file_bytes(out / name, bytes);
    rep.artifacts.push_back(name);
  }

  std::size_t knn_k(std::size_t n) const { return cfg.eval.knn_k ? cfg.eval.knn_k : default_knn_k(n); }

  void evaluate_embeddings(const SmallModel<Real>& m) {
    const auto tr = split_embeddings(m, target, false);
    const auto te = split_embeddings(m, target, true);
    rep.knn_accuracy = knn_accuracy(tr, te, knn_k(tr.size()), cfg.eval.knn_tau);
    rep.probe_accuracy = *linear_probe(tr, &te, cfg.eval.probe).test_accuracy;
  }

  void masks_out(const SmallModel<Real>& m) {
    const auto masks = m.masks();
    rep.found_sparsity = 1.0 - active_fraction(m);
    artifact_bytes("masks.mask", pack_masks(masks));
    std::ostringstream os;
    write_sparsity_csv(os, masks);
    artifact("sparsity.csv", os.str());
    StorageCounts counts{m.backbone_weight_count(), 0, 0, 0};
    auto rep_s = storage_report(counts, StorageMethod::mask);
    const auto bytes = pack_masks(masks);
    const auto codec = make_deflate_codec();
    const auto bench = compression_benchmark("mask", bytes, {codec.get()});
    rep_s.codecs = bench.codecs;
    rep_s.payload_bits = mask_payload(masks).size() * 8;
    artifact("storage.json", rep_s.to_json().dump(2) + "\n");
  }
};

}  // namespace

template <class Real>
ExperimentReport run_experiment(const ExperimentConfig& config, const SmallModel<Real>* pretrained) {
  config.validate();
  ExperimentReport rep;
  rep.method = to_string(config.method);
  Runner<Real> run{config, rep, {}, config.out_dir};
  std::string stage = "config";
  try {
    if (run.writing()) std::filesystem::create_directories(run.out);
    nlohmann::json cj = config;
    run.artifact("config.json", cj.dump(2) + "\n");

    stage = "data";
    run.target = gen_dataset(config.target);

    stage = "pretrain";
    SmallModel<Real> backbone;
    if (pretrained) {
      backbone = *pretrained;
    } else {
      backbone = pretrain_backbone<Real>(gen_dataset(config.source), config.backbone);
    }

    const Tensor<Real> xtr = run.target.train_x().template cast<Real>();
    const Tensor<Real> xte = run.target.test_x().template cast<Real>();
    const auto ytr = run.target.train_y();
    const auto yte = run.target.test_y();
    TrainConfig tc = config.train;

    switch (config.method) {
      case Method::knn: {
        stage = "eval";
        run.evaluate_embeddings(backbone);
        break;
      }
      case Method::fft:
      case Method::mask_supervised:
      case Method::topk:
      case Method::progressive_topk: {
        stage = "train";
        SmallModel<Real> m = backbone;
        const AdaptMode mode = config.method == Method::fft ? AdaptMode::fft : AdaptMode::mask;
        MaskSchedule sched;
        if (config.method == Method::topk || config.method == Method::progressive_topk) {
          sched.rule = MaskRule::topk;
          sched.topk_fraction = config.topk_fraction;
          sched.progressive = config.method == Method::progressive_topk;
        }
        SupervisedTrainer<Real> trainer(m, xtr, ytr, run.target.classes, tc, mode, sched);
        trainer.run();
        std::ostringstream log;
        write_training_log(log, trainer.epochs());
        run.artifact("training_log.jsonl", log.str());
        stage = "eval";
        rep.classifier_accuracy = accuracy(predict_classes(m, xte), yte);
        run.evaluate_embeddings(m);
        stage = "artifacts";
        if (mode == AdaptMode::mask) {
          run.masks_out(m);
        } else {
          StorageCounts counts{m.backbone_weight_count(), m.maskable_parameter_count(), 0, 0};
          std::size_t params = 0;
          for (const auto& l : m.layers()) params += l.weight.size() + l.bias.size();
          counts.finetuned_params = params;
          auto sr = storage_report(counts, StorageMethod::fft);
          m.head().reset();
          const auto ckpt = save_checkpoint(m);
          const auto codec = make_deflate_codec();
          sr.codecs = compression_benchmark("fft", ckpt, {codec.get()}).codecs;
          run.artifact("storage.json", sr.to_json().dump(2) + "\n");
          run.artifact_bytes("model.smnw", ckpt);
        }
        break;
      }
      case Method::smn: {
        stage = "train";
        SmallModel<Real> m = backbone;
        auto res = train_smn(m, xtr, tc);
        if (res.diverged) rep.errors.push_back("train: diverged; last good state kept");
        std::ostringstream log;
        write_training_log(log, res.log);
        run.artifact("training_log.jsonl", log.str());
        stage = "eval";
        m.head().reset();
        run.evaluate_embeddings(m);
        stage = "artifacts";
        run.masks_out(m);
        break;
      }
      case Method::smn_cascade: {
        stage = "train";
        CascadeConfig cc = config.cascade;
        cc.smn = tc;
        const auto bundle = train_cascade(backbone, xtr, cc);
        stage = "eval";
        const auto ktr = run.knn_k(ytr.size());
        auto knn_of = [&](const Matrix& tr, const Matrix& te) {
          return knn_accuracy(EmbeddingSet{tr, ytr, "train"}, EmbeddingSet{te, yte, "test"}, ktr,
                              config.eval.knn_tau);
        };
        const auto utr = cascade_embed(bundle, backbone, xtr, CascadeMode::unconditional);
        const auto ute = cascade_embed(bundle, backbone, xte, CascadeMode::unconditional);
        const auto ctr = cascade_embed(bundle, backbone, xtr, CascadeMode::conditional);
        const auto cte = cascade_embed(bundle, backbone, xte, CascadeMode::conditional);
        rep.knn_accuracy = knn_of(utr.e_star, ute.e_star);
        rep.conditional_knn_accuracy = knn_of(ctr.e_star, cte.e_star);
        rep.conditional_rows_forwarded = cte.backbone_rows_forwarded;
        const auto dtr = masked_embed(backbone, bundle.dispatcher, xtr).template cast<double>();
        const auto dte = masked_embed(backbone, bundle.dispatcher, xte).template cast<double>();
        rep.dispatcher_knn_accuracy = knn_of(dtr, dte);
        {
          EmbeddingSet tr{utr.e_star, ytr, "train"}, te{ute.e_star, yte, "test"};
          rep.probe_accuracy = *linear_probe(tr, &te, config.eval.probe).test_accuracy;
        }
        stage = "artifacts";
        if (run.writing()) {
          save_bundle(run.out / "bundle", bundle);
          rep.artifacts.push_back("bundle/");
          std::ostringstream hs;
          write_homogeneity_csv(hs, cluster_homogeneity(utr.routes, ytr));
          run.artifact("homogeneity.csv", hs.str());
        }
        StorageCounts counts{backbone.backbone_weight_count(), 0, 0, 0};
        const auto& g = bundle.router.gmm;
        counts.router_params = g.means.size() + g.variances.size() + g.weights.size() +
                               bundle.router.pca.mean.size() + bundle.router.pca.components.size() +
                               bundle.router.pca.singular.size();
        counts.whitening_params = bundle.whitening.mean.size() + bundle.whitening.components.size() +
                                  bundle.whitening.singular.size();
        run.artifact("storage.json", storage_report(counts, StorageMethod::cascade, bundle.k()).to_json().dump(2) + "\n");
        rep.found_sparsity = 0.0;
        {
          std::size_t act = 0, tot = 0;
          for (const auto& m : bundle.dispatcher) {
            act += m.active_count();
            tot += m.size();
          }
          rep.found_sparsity = tot ? 1.0 - static_cast<double>(act) / static_cast<double>(tot) : 0.0;
        }
        break;
      }
    }
  } catch (const std::exception& e) {
    rep.errors.push_back(stage + ": " + e.what());
    spdlog::error("run_experiment: stage {} failed: {}", stage, e.what());
  }
  try {
    if (rep.knn_accuracy || rep.classifier_accuracy) {
      std::ostringstream acc;
      std::vector<AccuracyRow> rows;
      if (rep.knn_accuracy) rows.push_back({rep.method + ":knn", 1.0, config.train.seed, *rep.knn_accuracy});
      if (rep.probe_accuracy) rows.push_back({rep.method + ":probe", 1.0, config.train.seed, *rep.probe_accuracy});
      if (rep.classifier_accuracy) {
        rows.push_back({rep.method + ":classifier", 1.0, config.train.seed, *rep.classifier_accuracy});
      }
      if (rep.conditional_knn_accuracy) {
        rows.push_back({rep.method + ":conditional-knn", 1.0, config.train.seed, *rep.conditional_knn_accuracy});
      }
      if (rep.dispatcher_knn_accuracy) {
        rows.push_back({rep.method + ":dispatcher-knn", 1.0, config.train.seed, *rep.dispatcher_knn_accuracy});
      }
      write_accuracy_csv(acc, rows);
      run.artifact("accuracy.csv", acc.str());
    }
    run.artifact("summary.json", rep.to_json().dump(2) + "\n");
  } catch (const std::exception& e) {
    rep.errors.push_back(std::string("report: ") + e.what());
  }
  return rep;
}

template <class Real>
LowshotReport run_lowshot(const ExperimentConfig& config, const SmallModel<Real>* pretrained) {
  config.validate();
  LowshotReport rep;
  std::string stage = "data";
  try {
    const Dataset target = gen_dataset(config.target);
    stage = "pretrain";
    SmallModel<Real> backbone =
        pretrained ? *pretrained : pretrain_backbone<Real>(gen_dataset(config.source), config.backbone);
    stage = "train";
    SmallModel<Real> m = backbone;
    auto res = train_smn(m, target.train_x().template cast<Real>(), config.train);
    if (res.diverged) rep.errors.push_back("train: diverged; last good state kept");
    m.head().reset();
    stage = "eval";
    std::vector<LowshotVariant> variants{
        {"probe", split_embeddings(backbone, target, false), split_embeddings(backbone, target, true)},
        {"smn+probe", split_embeddings(m, target, false), split_embeddings(m, target, true)}};
    rep.rows = lowshot_eval(variants, config.eval.lowshot_fractions, config.train.seed, config.eval.probe);
    if (!config.out_dir.empty()) {
      stage = "artifacts";
      std::ostringstream acc;
      write_accuracy_csv(acc, rep.rows);
      write_text(config.out_dir / "accuracy.csv", acc.str());
      std::ostringstream log;
      write_training_log(log, res.log);
      write_text(config.out_dir / "training_log.jsonl", log.str());
    }
  } catch (const std::exception& e) {
    rep.errors.push_back(stage + ": " + e.what());
    spdlog::error("run_lowshot: stage {} failed: {}", stage, e.what());
  }
  return rep;
}

#define SMN_INSTANTIATE(Real)                                                                              \
  template SmallModel<Real> pretrain_backbone<Real>(const Dataset&, const BackboneSpec&, double*);        \
  template EmbeddingSet split_embeddings<Real>(const SmallModel<Real>&, const Dataset&, bool);            \
  template ExperimentReport run_experiment<Real>(const ExperimentConfig&, const SmallModel<Real>*);       \
  template LowshotReport run_lowshot<Real>(const ExperimentConfig&, const SmallModel<Real>*);

SMN_INSTANTIATE(float)
SMN_INSTANTIATE(double)
#undef SMN_INSTANTIATE

}  // namespace smn
