// Copyright 2026 The SMN Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <sstream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "smn/harness.hpp"
#include "smn/invariance.hpp"
#include "smn/mask_io.hpp"

namespace smn::cli {

namespace {

using nlohmann::json;

// Raised for anything detected before work starts: exit 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

json load_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open config file '" + path + "'");
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ValidationError("config file '" + path + "': " + e.what());
  }
}

// Shared flags of every config-driven subcommand.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string precision;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool with_out = true) {
  sub->add_option("--config", c.config, "JSON config file");
  sub->add_option("--set", c.sets, "override a config field: a.b=value (repeatable)");
  sub->add_option("--precision", c.precision, "floating-point width")->check(CLI::IsMember({"f32", "f64"}));
  if (with_out) sub->add_option("--out", c.out, "output directory (default $SMN_OUT_DIR/<subcommand>)");
}

json merged(const Common& c) {
  try {
    return apply_overrides(load_json(c.config), c.sets);
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
}

ExperimentConfig experiment_config(const Common& c, const std::string& sub, std::optional<Method> method) {
  ExperimentConfig cfg;
  try {
    json j = merged(c);
    if (method) j["method"] = to_string(*method);
    cfg = j.get<ExperimentConfig>();
    if (!c.precision.empty()) {
      cfg.train.precision = parse_precision(c.precision);
      cfg.backbone.pretrain.precision = cfg.train.precision;
    }
    if (!c.out.empty()) {
      cfg.out_dir = c.out;
    } else if (cfg.out_dir.empty()) {
      cfg.out_dir = default_out_root() / sub;
    }
    cfg.validate();
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
  return cfg;
}

template <class Real>
SmallModel<Real> load_model(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  SmallModel<Real> m = checkpoint_precision(bytes) == Precision::f64
                           ? convert_model<Real>(load_checkpoint<double>(bytes))
                           : convert_model<Real>(load_checkpoint<float>(bytes));
  m.head().reset();
  m.freeze_backbone();
  m.touch();
  return m;
}

template <class Real>
std::optional<SmallModel<Real>> maybe_backbone(const std::string& path, const std::string& masks) {
  if (path.empty()) return std::nullopt;
  SmallModel<Real> m = load_model<Real>(path);
  if (!masks.empty()) m.apply_mask_set(read_mask_file(masks));
  return m;
}

int report_exit(const ExperimentReport& rep, std::ostream& out, std::ostream& err) {
  out << rep.to_json().dump(2) << '\n';
  for (const auto& e : rep.errors) err << "error: " << e << '\n';
  return rep.errors.empty() ? kOk : kRuntimeError;
}

template <class Real>
int run_method(const ExperimentConfig& cfg, const std::string& backbone, const std::string& masks, std::ostream& out,
               std::ostream& err) {
  const auto pre = maybe_backbone<Real>(backbone, masks);
  return report_exit(run_experiment<Real>(cfg, pre ? &*pre : nullptr), out, err);
}

int dispatch_method(const ExperimentConfig& cfg, const std::string& backbone, const std::string& masks,
                    std::ostream& out, std::ostream& err) {
  return cfg.train.precision == Precision::f64 ? run_method<double>(cfg, backbone, masks, out, err)
                                               : run_method<float>(cfg, backbone, masks, out, err);
}

template <class Real>
int run_pretrain(const ExperimentConfig& cfg, std::ostream& out) {
  double acc = 0.0;
  const auto model = pretrain_backbone<Real>(gen_dataset(cfg.source), cfg.backbone, &acc);
  const auto path = cfg.out_dir / "backbone.smnw";
  write_file_bytes(path, save_checkpoint(model));
  out << json{{"train_accuracy", acc}, {"checkpoint", path.string()}}.dump(2) << '\n';
  return kOk;
}

template <class Real>
int run_lowshot_cmd(const ExperimentConfig& cfg, const std::string& backbone, std::ostream& out, std::ostream& err) {
  const auto pre = maybe_backbone<Real>(backbone, "");
  const auto rep = run_lowshot<Real>(cfg, pre ? &*pre : nullptr);
  std::ostringstream csv;
  write_accuracy_csv(csv, rep.rows);
  out << csv.str();
  for (const auto& e : rep.errors) err << "error: " << e << '\n';
  return rep.errors.empty() ? kOk : kRuntimeError;
}

struct TheoremArgs {
  std::string transform = "translate";
  std::optional<double> a;
  bool rational = false;
  bool unchecked = false;
  std::size_t steps = 200;
};

std::vector<ConfigTransform> transform_chain(const TheoremArgs& t) {
  if (t.transform == "translate") return {ConfigTransform::translate(t.a.value_or(0.5))};
  if (t.transform == "scale") return {ConfigTransform::scale(t.a.value_or(2.0))};
  if (t.transform == "scale-with-decay") return {ConfigTransform::scale_with_decay(t.a.value_or(2.0))};
  // (lr, S0, mu) = (50, 1, 0) -> (100, 2.5, 0.5)
  return {ConfigTransform::translate(0.25), ConfigTransform::scale(2.0)};
}

int run_theorems(const Common& c, const TheoremArgs& t, std::ostream& out) {
  TrainConfig base;
  DatasetSpec data;
  data.kind = "blobs";
  data.per_class = 100;
  std::vector<std::size_t> hidden = {128, 128};
  std::uint64_t model_seed = 11;
  TrainConfig b;
  try {
    const json j = merged(c);
    if (auto it = j.find("train"); it != j.end()) it->get_to(base);
    if (auto it = j.find("data"); it != j.end()) it->get_to(data);
    if (auto it = j.find("hidden"); it != j.end()) it->get_to(hidden);
    if (auto it = j.find("model_seed"); it != j.end()) it->get_to(model_seed);
    base.validate();
    data.validate();
    const auto chain = transform_chain(t);
    if (t.unchecked) {
      if (chain.size() != 1 || chain[0].kind != TransformKind::translate) {
        throw ConfigError("--unchecked applies to translate only");
      }
      b = translated_unchecked(base, chain[0].value);
    } else {
      b = equivalent_config(base, chain);
    }
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }

  json result;
  if (t.rational) {
    result = rational_oracle(ToyProblem{}, base, b, t.steps).to_json();
  } else {
    const Dataset d = gen_dataset(data);
    std::vector<std::size_t> dims{d.dim()};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    const PairedProblem problem{d.train_x(), d.train_y(), d.classes, dims, model_seed};
    const auto r = run_paired(base, b, problem, t.transform);
    result = r.to_json();
    if (!c.out.empty()) {
      std::ostringstream csv;
      r.write_loss_csv(csv);
      const std::string s = csv.str();
      write_file_bytes(std::filesystem::path(c.out) / "loss.csv", {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
    }
  }
  result["config_a"] = base;
  result["config_b"] = b;
  out << result.dump(2) << '\n';
  return kOk;
}

int run_compress(const std::string& masks, const std::string& model, const std::string& codec, std::ostream& out) {
  if (masks.empty() == model.empty()) throw ValidationError("compress: give exactly one of --masks or --model");
  std::vector<std::unique_ptr<Codec>> owned;
  try {
    if (codec == "all") {
      for (const auto& name : available_codecs()) owned.push_back(make_codec(name));
    } else {
      owned.push_back(make_codec(codec));
    }
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
  std::vector<const Codec*> codecs;
  for (const auto& p : owned) codecs.push_back(p.get());

  const auto bytes = read_file_bytes(masks.empty() ? model : masks);
  StorageReport rep;
  if (!masks.empty()) {
    const auto set = unpack_masks(bytes);
    std::size_t weights = 0;
    for (const auto& m : set) weights += m.size();
    rep = storage_report({weights, 0, 0, 0}, StorageMethod::mask);
    rep.payload_bits = mask_payload(set).size() * 8;
  } else {
    const auto m = load_model<double>(model);
    std::size_t params = 0;
    for (const auto& l : m.layers()) params += l.weight.size() + l.bias.size();
    rep = storage_report({m.backbone_weight_count(), params, 0, 0}, StorageMethod::fft);
  }
  rep.codecs = compression_benchmark(rep.method, bytes, codecs).codecs;
  out << rep.to_json().dump(2) << '\n';
  return kOk;
}

int run_gen_data(const Common& c, std::ostream& out) {
  DatasetSpec spec;
  try {
    merged(c).get_to(spec);
    spec.validate();
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
  const Dataset d = gen_dataset(spec);
  if (c.out.empty()) {
    write_dataset_csv(out, d);
  } else {
    std::ostringstream os;
    write_dataset_csv(os, d);
    const std::string s = os.str();
    write_file_bytes(c.out, {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  return kOk;
}

void setup_logging(const std::string& level) {
  auto logger = spdlog::get("smn");
  if (!logger) logger = spdlog::stderr_color_mt("smn");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::from_str(level));
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-masking network adaptation toolkit"};
  app.require_subcommand(1);
  std::string log_level = "warn";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  Common gen, pre, mask, smn_c, casc, eval, low, theo;
  std::string backbone, masks_file, model_file, codec = "deflate", rule = "threshold";
  std::optional<double> fraction;
  TheoremArgs targs;

  auto* s_gen = app.add_subcommand("gen-data", "write a synthetic dataset as CSV");
  add_common(s_gen, gen);
  auto* s_pre = app.add_subcommand("pretrain", "supervised backbone pretraining on the source domain");
  add_common(s_pre, pre);
  auto* s_mask = app.add_subcommand("mask", "supervised mask learning on the target domain");
  add_common(s_mask, mask);
  s_mask->add_option("--rule", rule, "masking rule")->check(CLI::IsMember({"threshold", "topk", "progressive-topk"}));
  s_mask->add_option("--fraction", fraction, "active fraction for topk rules");
  auto* s_smn = app.add_subcommand("smn", "label-free mask learning on the target domain");
  add_common(s_smn, smn_c);
  auto* s_casc = app.add_subcommand("cascade", "dispatcher + per-cluster expert masks");
  add_common(s_casc, casc);
  auto* s_eval = app.add_subcommand("eval", "k-NN and linear-probe evaluation of a (masked) backbone");
  add_common(s_eval, eval);
  s_eval->add_option("--masks", masks_file, "mask file applied to the backbone");
  auto* s_low = app.add_subcommand("lowshot", "probe accuracy over labeled fractions, frozen vs masked");
  add_common(s_low, low);
  for (auto* s : {s_pre, s_mask, s_smn, s_casc, s_eval, s_low}) {
    s->add_option("--backbone", backbone, "pretrained checkpoint (skips pretraining)");
  }
  auto* s_comp = app.add_subcommand("compress", "storage and codec report for a mask file or checkpoint");
  s_comp->add_option("--masks", masks_file, "mask file");
  s_comp->add_option("--model", model_file, "checkpoint file");
  s_comp->add_option("--codec", codec, "codec name or 'all'");
  auto* s_sp = app.add_subcommand("report-sparsity", "per-layer sparsity CSV of a mask file");
  s_sp->add_option("--masks", masks_file, "mask file")->required();
  auto* s_theo = app.add_subcommand("verify-theorems", "paired runs under equivalent hyperparameters");
  add_common(s_theo, theo);
  s_theo->add_option("--transform", targs.transform, "translate, scale, scale-with-decay or composed")
      ->check(CLI::IsMember({"translate", "scale", "scale-with-decay", "composed"}));
  s_theo->add_option("--a", targs.a, "shift (translate) or factor (scale)");
  s_theo->add_flag("--rational", targs.rational, "exact rational oracle on a toy problem instead of float runs");
  s_theo->add_flag("--unchecked", targs.unchecked, "allow translate with weight decay (counterexample)");
  s_theo->add_option("--steps", targs.steps, "oracle steps");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kValidationError;
  }
  setup_logging(log_level);

  try {
    if (s_gen->parsed()) return run_gen_data(gen, out);
    if (s_pre->parsed()) {
      const auto cfg = experiment_config(pre, "pretrain", std::nullopt);
      return cfg.backbone.pretrain.precision == Precision::f64 ? run_pretrain<double>(cfg, out)
                                                               : run_pretrain<float>(cfg, out);
    }
    if (s_mask->parsed()) {
      const Method m = rule == "topk"               ? Method::topk
                       : rule == "progressive-topk" ? Method::progressive_topk
                                                    : Method::mask_supervised;
      if (fraction) mask.sets.push_back("topk_fraction=" + std::to_string(*fraction));
      return dispatch_method(experiment_config(mask, "mask", m), backbone, "", out, err);
    }
    if (s_smn->parsed()) return dispatch_method(experiment_config(smn_c, "smn", Method::smn), backbone, "", out, err);
    if (s_casc->parsed()) {
      return dispatch_method(experiment_config(casc, "cascade", Method::smn_cascade), backbone, "", out, err);
    }
    if (s_eval->parsed()) {
      if (!masks_file.empty() && backbone.empty()) throw ValidationError("eval: --masks requires --backbone");
      return dispatch_method(experiment_config(eval, "eval", Method::knn), backbone, masks_file, out, err);
    }
    if (s_low->parsed()) {
      const auto cfg = experiment_config(low, "lowshot", Method::smn);
      return cfg.train.precision == Precision::f64 ? run_lowshot_cmd<double>(cfg, backbone, out, err)
                                                   : run_lowshot_cmd<float>(cfg, backbone, out, err);
    }
    if (s_comp->parsed()) return run_compress(masks_file, model_file, codec, out);
    if (s_sp->parsed()) {
      write_sparsity_csv(out, read_mask_file(masks_file));
      return kOk;
    }
    if (s_theo->parsed()) return run_theorems(theo, targs, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kValidationError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  err << app.help();
  return kValidationError;
}

}  // namespace smn::cli
