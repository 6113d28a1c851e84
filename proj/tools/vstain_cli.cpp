// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "vstain/errors.hpp"
#include "vstain/evaluation.hpp"
#include "vstain/failure.hpp"
#include "vstain/image_io.hpp"
#include "vstain/model.hpp"
#include "vstain/render.hpp"
#include "vstain/synth.hpp"
#include "vstain/training.hpp"

using namespace vstain;
namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kExitOther = 1, kExitConfig = 2, kExitData = 3, kExitNumeric = 4;

struct Globals {
  std::string config;
  std::optional<int64_t> seed, workers;
  std::optional<std::string> device;
  std::vector<std::string> sets;
};

Config effective_config(const Globals& g) {
  Config c = g.config.empty() ? Config() : Config::load(g.config);
  c.apply_env();
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    c.set_from_string(s.substr(0, eq), s.substr(eq + 1));
  }
  if (g.seed) c.set_from_string("run.seed", std::to_string(*g.seed));
  if (g.workers) c.set_from_string("run.workers", std::to_string(*g.workers));
  if (g.device) c.set_from_string("run.device", *g.device);
  if (c.get_string("run.device") != "cpu")
    throw ConfigError("run.device '" + c.get_string("run.device") + "' is unavailable; this build runs on cpu");
  return c;
}

/// Record of one command's inputs and outputs, written next to its outputs.
class Provenance {
 public:
  Provenance(std::string command, const std::vector<std::string>& argv, const Config& cfg) : command_(std::move(command)) {
    j_["command"] = command_;
    j_["argv"] = argv;
    j_["seed"] = cfg.get_int("run.seed");
    j_["config"] = cfg.to_json();
    j_["inputs"] = ojson::array();
    j_["outputs"] = ojson::array();
  }
  void input(const fs::path& p) { j_["inputs"].push_back(entry(p)); }
  void output(const fs::path& p) { j_["outputs"].push_back(entry(p)); }
  void set(const std::string& key, ojson v) { j_[key] = std::move(v); }
  fs::path write(const fs::path& dir) const {
    fs::create_directories(dir);
    const fs::path p = dir / ("provenance_" + command_ + ".json");
    std::ofstream(p) << j_.dump(2) << "\n";
    return p;
  }

 private:
  static ojson entry(const fs::path& p) {
    ojson e;
    e["path"] = fs::absolute(p).lexically_normal().string();
    std::error_code ec;
    if (fs::is_regular_file(p, ec)) e["bytes"] = fs::file_size(p);
    return e;
  }
  std::string command_;
  ojson j_;
};

std::vector<PairedSample> load_samples(const Config& cfg, const fs::path& manifest, const std::string& split,
                                       bool require_files) {
  auto s = read_manifest(manifest, cfg.get_string_list("data.tokens"), cfg.get_string("data.token_field"), require_files);
  if (!split.empty()) s = filter_split(s, split);
  if (s.empty())
    throw DataError("manifest " + manifest.string() + " has no samples" + (split.empty() ? "" : " in split '" + split + "'"));
  return s;
}

Tensor as_batch(const Tensor& img) { return img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}); }

std::string valid_tokens(const std::vector<std::string>& names, int64_t n) {
  std::string s;
  for (int64_t i = 0; i < n; ++i) {
    if (i) s += ", ";
    s += (static_cast<size_t>(i) < names.size() ? names[static_cast<size_t>(i)] : std::string("#")) + " (" +
         std::to_string(i) + ")";
  }
  return s;
}

int resolve_token(const std::string& text, const std::vector<std::string>& names, int64_t n) {
  for (size_t i = 0; i < names.size() && static_cast<int64_t>(i) < n; ++i)
    if (names[i] == text) return static_cast<int>(i);
  try {
    size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used == text.size() && v >= 0 && v < n) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("invalid stain token '" + text + "'; valid tokens: " + valid_tokens(names, n));
}

std::string token_name(int t, const std::vector<std::string>& names) {
  return static_cast<size_t>(t) < names.size() ? names[static_cast<size_t>(t)] : std::to_string(t);
}

// ---- commands ----

int cmd_print_config(const Config& cfg) {
  std::cout << cfg.to_json().dump(2) << "\n";
  return 0;
}

struct SynthArgs {
  std::string out;
  int64_t count = 8, side = 128, test_count = 0, max_shift = 2;
};

int cmd_synth(const Config& cfg, const SynthArgs& a, Provenance& prov) {
  SynthOptions opt;
  opt.count = a.count;
  opt.side = a.side;
  opt.test_count = a.test_count;
  opt.max_shift = a.max_shift;
  opt.seed = static_cast<uint64_t>(cfg.get_int("run.seed"));
  opt.stains = cfg.get_string_list("data.tokens");
  const fs::path manifest = write_synthetic_dataset(a.out, opt);
  prov.output(manifest);
  prov.write(a.out);
  std::cout << "wrote " << a.count << " pairs and " << manifest.string() << "\n";
  return 0;
}

struct ExtractArgs {
  std::string manifest, out, split;
};

int cmd_extract(const Config& cfg, const ExtractArgs& a, Provenance& prov) {
  const auto samples = load_samples(cfg, a.manifest, a.split, false);
  const auto backbone = make_backbone(cfg);
  const int64_t grid = cfg.get_int("backbone.grid");
  fs::create_directories(a.out);
  prov.input(a.manifest);
  std::ofstream cls(fs::path(a.out) / "cls.jsonl");
  for (const auto& s : samples) {
    const Tensor img = as_batch(read_png(s.hne));
    FeatureRecord rec{s.source_id, extract_subcrop_tokens(img, *backbone, grid).reshaped(
                                       {backbone->token_dim(), grid, grid})};
    const fs::path p = fs::path(a.out) / (s.source_id + ".feat");
    write_feature_cache(p, rec);
    prov.output(p);
    const Tensor c = extract_cls(img, *backbone);
    cls << ojson{{"image_id", s.source_id}, {"cls", std::vector<float>(c.data(), c.data() + c.numel())}}.dump() << "\n";
  }
  prov.output(fs::path(a.out) / "cls.jsonl");
  prov.write(a.out);
  std::cout << "extracted " << samples.size() << " token grids (" << grid << "x" << grid << "x" << backbone->token_dim()
            << ") into " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string manifest, out, resume, split = "train";
  std::optional<int64_t> steps;
};

int cmd_train(const Config& cfg, const TrainArgs& a, Provenance& prov) {
  const auto samples = load_samples(cfg, a.manifest, a.split, true);
  Trainer t(cfg);
  if (!a.resume.empty()) {
    t.load_checkpoint(a.resume);
    prov.input(a.resume);
    std::cout << "resumed at step " << t.current_step() << "\n";
  }
  const int64_t steps = a.steps.value_or(cfg.get_int("train.steps"));
  const PairStore store(samples);
  t.run(store, a.out, steps);
  prov.input(a.manifest);
  prov.output(fs::path(a.out) / "loss_log.jsonl");
  prov.output(fs::path(a.out) / "final.ckpt");
  prov.set("steps", steps);
  prov.write(a.out);
  std::cout << "trained " << samples.size() << " pairs to step " << t.current_step() << "; checkpoint "
            << (fs::path(a.out) / "final.ckpt").string() << "\n";
  return 0;
}

struct InferArgs {
  std::string checkpoint, manifest, image, token, out, split;
};

int cmd_infer(const Config&, const InferArgs& a, Provenance& prov) {
  if (a.manifest.empty() == a.image.empty()) throw ConfigError("infer needs exactly one of --manifest or --image");
  if (!fs::exists(a.checkpoint)) throw DataError("checkpoint not found: " + a.checkpoint);
  const InferenceModel im = load_inference_model(a.checkpoint);
  const auto names = im.config.get_string_list("data.tokens");
  const int64_t n = im.net->config().generator.num_classes;
  std::optional<int> fixed;
  if (!a.token.empty()) fixed = resolve_token(a.token, names, n);
  std::cout << "using EMA generator weights (" << im.weights << ", step " << im.step << ")\n";

  std::vector<std::pair<std::string, fs::path>> inputs;
  std::vector<int> tokens;
  if (!a.image.empty()) {
    if (!fixed) throw ConfigError("--token is required with --image; valid tokens: " + valid_tokens(names, n));
    inputs.emplace_back(fs::path(a.image).stem().string(), a.image);
    tokens.push_back(*fixed);
  } else {
    for (const auto& s : load_samples(im.config, a.manifest, a.split, false)) {
      inputs.emplace_back(s.source_id, s.hne);
      tokens.push_back(fixed.value_or(s.token));
    }
    prov.input(a.manifest);
  }
  const StainConfig stain = stain_config_from(im.config);
  fs::create_directories(a.out);
  const fs::path sidecar = fs::path(a.out) / "dab_scores.jsonl";
  std::ofstream side(sidecar);
  for (size_t i = 0; i < inputs.size(); ++i) {
    const int t = tokens[i];
    if (t < 0 || t >= n) throw ConfigError("invalid stain token index " + std::to_string(t) + "; valid tokens: " + valid_tokens(names, n));
    const Tensor gen = translate_image(im, read_png(inputs[i].second), t);
    const std::string name = token_name(t, names);
    const fs::path p = fs::path(a.out) / (inputs[i].first + "_" + name + ".png");
    write_png(p, gen);
    const double score = dab_intensity_score(dab_channel(gen, stain), stain.top_fraction);
    side << ojson{{"image", p.filename().string()}, {"source", inputs[i].first}, {"token", name}, {"dab_score", score}}.dump()
         << "\n";
    prov.input(inputs[i].second);
    prov.output(p);
  }
  prov.input(a.checkpoint);
  prov.output(sidecar);
  prov.set("weights", im.weights);
  prov.write(a.out);
  std::cout << "wrote " << inputs.size() << " images and " << sidecar.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, manifest, out, split = "test";
  bool save_images = false;
};

int cmd_evaluate(const Config&, const EvalArgs& a, Provenance& prov) {
  if (!fs::exists(a.checkpoint)) throw DataError("checkpoint not found: " + a.checkpoint);
  const Config ck = Config::from_echo(read_checkpoint_header(a.checkpoint).at("config"));
  const auto samples = load_samples(ck, a.manifest, a.split, false);
  EvalOptions opt;
  opt.crop = ck.get_int("eval.crop");
  opt.fid_shrinkage = ck.get_double("eval.fid_shrinkage");
  if (a.save_images) opt.image_dir = fs::path(a.out) / "images";
  std::vector<CropResult> crops;
  const MetricReport r = evaluate_run(a.checkpoint, samples, opt, &crops);
  fs::create_directories(a.out);
  const fs::path mj = fs::path(a.out) / "metrics.json", mt = fs::path(a.out) / "metrics.txt",
                 cj = fs::path(a.out) / "crops.jsonl";
  std::ofstream(mj) << report_json(r).dump(2) << "\n";
  const std::string text = report_text(r);
  std::ofstream(mt) << text;
  std::ofstream co(cj);
  for (const auto& c : crops)
    co << ojson{{"source_id", c.source_id}, {"stain", c.stain},         {"crop", c.crop},
                {"ssim", c.ssim},           {"lpips", c.lpips},         {"dab_kl", c.dab_kl},
                {"score_gen", c.score_gen}, {"score_real", c.score_real}}
              .dump()
       << "\n";
  for (const auto& p : {mj, mt, cj}) prov.output(p);
  prov.input(a.checkpoint);
  prov.input(a.manifest);
  prov.write(a.out);
  std::cout << text;
  return 0;
}

struct StratifyArgs {
  std::string checkpoint, manifest, out, split = "test";
};

int cmd_stratify(const Config& cli_cfg, const StratifyArgs& a, Provenance& prov) {
  if (!fs::exists(a.checkpoint)) throw DataError("checkpoint not found: " + a.checkpoint);
  const InferenceModel im = load_inference_model(a.checkpoint);
  const auto samples = load_samples(im.config, a.manifest, a.split, true);
  // Analysis settings come from the invocation; the model from the checkpoint.
  const auto labels = cli_cfg.get_string_list("failure.labels");
  const double threshold = cli_cfg.get_double("failure.threshold");
  const int64_t side = cli_cfg.get_int("failure.classifier_side");
  std::unique_ptr<TissueClassifier> classifier;
  if (cli_cfg.get_string("failure.external_command").empty())
    classifier = std::make_unique<StubTissueClassifier>(labels.size(), side);
  else
    classifier = std::make_unique<ExternalTissueClassifier>(cli_cfg.get_string("failure.external_command"), labels.size(), side);
  const StainConfig stain = stain_config_from(im.config);

  std::vector<FailureRecord> records;
  std::map<std::string, std::vector<size_t>> by_stain;
  std::vector<std::array<Tensor, 3>> triplets;
  Eigen::MatrixXd emb(static_cast<Eigen::Index>(samples.size()), im.backbone->token_dim());
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const Tensor hne = read_png(s.hne), ihc = read_png(s.ihc);
    const Tensor gen = translate_image(im, hne, s.token);
    const double kl = dab_kl(dab_channel(gen, stain), dab_channel(ihc, stain), stain);
    records.push_back(make_failure_record(s.source_id, s.stain, classify_tissue(hne, *classifier), kl, threshold));
    by_stain[s.stain].push_back(i);
    triplets.push_back({hne, ihc, gen});
    const Tensor c = extract_cls(as_batch(hne), *im.backbone);
    for (int64_t j = 0; j < c.numel(); ++j) emb(static_cast<Eigen::Index>(i), j) = c[j];
  }

  ojson out;
  out["threshold"] = threshold;
  out["labels"] = labels;
  out["records"] = ojson::array();
  for (const auto& r : records)
    out["records"].push_back({{"image_id", r.image_id}, {"stain", r.stain}, {"tissue", labels.at(static_cast<size_t>(r.tissue))},
                              {"dab_kl", r.dab_kl}, {"failed", r.failed}});
  out["per_tissue"] = ojson::array();
  std::cout << "tissue                      n  failure_rate  mean_dab_kl\n";
  for (const auto& t : stratify(records)) {
    const std::string& name = labels.at(static_cast<size_t>(t.tissue));
    out["per_tissue"].push_back({{"tissue", name}, {"n", t.n}, {"failure_rate", t.failure_rate}, {"mean_dab_kl", t.mean_dab_kl}});
    char line[160];
    std::snprintf(line, sizeof(line), "%-24s %5ld  %12.4f  %11.4f\n", name.c_str(), static_cast<long>(t.n), t.failure_rate,
                  t.mean_dab_kl);
    std::cout << line;
  }

  fs::create_directories(a.out);
  const auto k = static_cast<size_t>(cli_cfg.get_int("failure.worst_k"));
  for (const auto& [name, idx] : by_stain) {
    std::vector<FailureRecord> rs;
    std::vector<std::array<Tensor, 3>> ts;
    for (size_t i : idx) {
      rs.push_back(records[i]);
      ts.push_back(triplets[i]);
    }
    if (rs.size() < k)
      std::cerr << "warning: stain " << name << " has " << rs.size() << " records, fewer than " << k << "; using all\n";
    const fs::path p = fs::path(a.out) / ("worst_" + name + ".png");
    write_png(p, worst_case_grid(rs, ts, k));
    prov.output(p);
  }

  std::vector<int> failed;
  for (const auto& r : records) failed.push_back(r.failed ? 1 : 0);
  const auto npos = std::count(failed.begin(), failed.end(), 1);
  const auto nneg = static_cast<int64_t>(failed.size()) - npos;
  if (npos >= 2 && nneg >= 2) {
    const FailurePredictor fp = train_failure_predictor(
        emb, failed, cli_cfg.get_double("failure.logistic_l2"), static_cast<int>(cli_cfg.get_int("failure.logistic_steps")),
        cli_cfg.get_double("failure.logistic_lr"), cli_cfg.get_double("failure.test_fraction"),
        static_cast<uint64_t>(cli_cfg.get_int("run.seed")));
    out["failure_predictor"] = {{"auc", fp.auc}, {"n_train", fp.n_train}, {"n_test", fp.n_test}};
    std::cout << "failure predictor held-out AUC " << fp.auc << " (" << fp.n_test << " test records)\n";
  } else {
    out["failure_predictor"] = {{"skipped", "needs at least two failed and two non-failed records"},
                                {"failed", npos}, {"not_failed", nneg}};
    std::cout << "failure predictor skipped: " << npos << " failed, " << nneg << " not failed\n";
  }
  const fs::path fj = fs::path(a.out) / "failures.json";
  std::ofstream(fj) << out.dump(2) << "\n";
  prov.output(fj);
  prov.input(a.checkpoint);
  prov.input(a.manifest);
  prov.write(a.out);
  return 0;
}

struct GridArgs {
  std::vector<std::string> dirs;
  std::string manifest, out;
};

std::set<std::string> png_names(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::set<std::string> s;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") s.insert(e.path().filename().string());
  return s;
}

int cmd_export_grids(const Config& cfg, const GridArgs& a, Provenance& prov) {
  if (a.dirs.empty()) throw ConfigError("export-grids needs at least one --dir");
  const auto names = png_names(a.dirs[0]);
  if (names.empty()) throw DataError("no PNG files in " + a.dirs[0]);
  for (size_t d = 1; d < a.dirs.size(); ++d) {
    const auto other = png_names(a.dirs[d]);
    if (other == names) continue;
    std::string diff;
    for (const auto& n : names)
      if (!other.count(n)) diff += "\n  missing from " + a.dirs[d] + ": " + n;
    for (const auto& n : other)
      if (!names.count(n)) diff += "\n  only in " + a.dirs[d] + ": " + n;
    throw DataError("filename sets differ between " + a.dirs[0] + " and " + a.dirs[d] + ":" + diff);
  }
  // Row order and labels: manifest order when given (file stems start with the
  // source id), else lexicographic with the stem as label.
  std::vector<std::pair<std::string, std::string>> rows;  // file, label
  if (!a.manifest.empty()) {
    std::set<std::string> used;
    for (const auto& s : load_samples(cfg, a.manifest, "", false))
      for (const auto& n : names)
        if (!used.count(n) && n.rfind(s.source_id, 0) == 0 &&
            (n.size() == s.source_id.size() + 4 || n[s.source_id.size()] == '_' || n[s.source_id.size()] == '.')) {
          rows.emplace_back(n, s.stain);
          used.insert(n);
        }
    for (const auto& n : names)
      if (!used.count(n)) throw DataError("file " + n + " matches no manifest source id");
    prov.input(a.manifest);
  } else {
    for (const auto& n : names) rows.emplace_back(n, fs::path(n).stem().string());
  }
  std::vector<std::vector<Tensor>> tiles;
  std::vector<std::string> labels;
  int64_t label_width = 0;
  for (const auto& [file, label] : rows) {
    std::vector<Tensor> row;
    for (const auto& d : a.dirs) row.push_back(read_png(fs::path(d) / file));
    tiles.push_back(std::move(row));
    labels.push_back(label);
    label_width = std::max(label_width, text_width(label) + 8);
  }
  const Tensor grid = compose_grid(tiles, labels, label_width);
  fs::create_directories(fs::path(a.out).parent_path().empty() ? fs::path(".") : fs::path(a.out).parent_path());
  write_png(a.out, grid);
  for (const auto& d : a.dirs) prov.input(d);
  prov.output(a.out);
  prov.set("rows", rows.size());
  prov.write(fs::path(a.out).parent_path().empty() ? fs::path(".") : fs::path(a.out).parent_path());
  std::cout << "wrote " << rows.size() << "x" << a.dirs.size() << " grid " << a.out << "\n";
  return 0;
}

struct PlotArgs {
  std::string loss_log, failures, out;
};

int cmd_plot(const Config&, const PlotArgs& a, Provenance& prov) {
  if (a.loss_log.empty() && a.failures.empty()) throw ConfigError("plot needs --loss-log and/or --failures");
  fs::create_directories(a.out);
  if (!a.loss_log.empty()) {
    const auto log = read_loss_log(a.loss_log);
    if (log.empty()) throw DataError("loss log " + a.loss_log + " has no records");
    std::map<std::string, Series> series;
    std::vector<std::string> order;
    for (const auto& r : log)
      for (const auto& [name, v] : r.values) {
        if (name.rfind("lr_", 0) == 0 || !std::isfinite(v) || v <= 0.0) continue;
        if (!series.count(name)) {
          order.push_back(name);
          series[name].name = name;
        }
        series[name].x.push_back(static_cast<double>(r.step));
        series[name].y.push_back(v);
      }
    std::vector<Series> s;
    for (const auto& n : order) s.push_back(series[n]);
    const fs::path p = fs::path(a.out) / "loss_curves.png";
    write_png(p, plot_lines(s, "training losses (log scale)", 360, 640, true));
    prov.input(a.loss_log);
    prov.output(p);
  }
  if (!a.failures.empty()) {
    std::ifstream in(a.failures);
    if (!in) throw DataError("cannot read " + a.failures);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(a.failures + ": " + e.what());
    }
    std::vector<std::string> names;
    std::vector<double> rate, kl;
    for (const auto& t : j.at("per_tissue")) {
      names.push_back(t.at("tissue").get<std::string>());
      rate.push_back(t.at("failure_rate").get<double>());
      kl.push_back(t.at("mean_dab_kl").get<double>());
    }
    const fs::path pr = fs::path(a.out) / "failure_rate.png", pk = fs::path(a.out) / "mean_dab_kl.png";
    write_png(pr, plot_bars(names, rate, "failure rate by tissue"));
    write_png(pk, plot_bars(names, kl, "mean DAB KL by tissue"));
    prov.input(a.failures);
    prov.output(pr);
    prov.output(pk);
  }
  prov.write(a.out);
  std::cout << "wrote plots to " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Virtual IHC staining from H&E: training, inference and analysis"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--seed", g.seed, "root seed (run.seed)");
  app.add_option("--device", g.device, "compute device (run.device); only cpu is available");
  app.add_option("--workers", g.workers, "data loader threads (run.workers)");
  app.add_option("--set", g.sets, "config override key=value, repeatable");
  const std::vector<std::string> args(argv, argv + argc);

  std::function<int(const Config&, Provenance&)> run;
  auto sub = [&](const std::string& name, const std::string& help) { return app.add_subcommand(name, help); };

  auto* pc = sub("print-config", "print the effective configuration");
  pc->callback([&] { run = [](const Config& c, Provenance&) { return cmd_print_config(c); }; });

  SynthArgs sa;
  auto* sy = sub("synth-data", "write a synthetic paired dataset and manifest");
  sy->add_option("--out", sa.out, "output directory")->required();
  sy->add_option("--count", sa.count, "number of pairs");
  sy->add_option("--side", sa.side, "image side in pixels");
  sy->add_option("--test-count", sa.test_count, "trailing pairs assigned to the test split");
  sy->add_option("--max-shift", sa.max_shift, "largest simulated misregistration in pixels");
  sy->callback([&] { run = [&](const Config& c, Provenance& p) { return cmd_synth(c, sa, p); }; });

  ExtractArgs ea;
  auto* ex = sub("extract-features", "cache backbone token grids and global embeddings");
  ex->add_option("--manifest", ea.manifest, "pair manifest (jsonl)")->required();
  ex->add_option("--out", ea.out, "output directory")->required();
  ex->add_option("--split", ea.split, "restrict to one split");
  ex->callback([&] { run = [&](const Config& c, Provenance& p) { return cmd_extract(c, ea, p); }; });

  TrainArgs ta;
  auto* tr = sub("train", "train the unified model");
  tr->add_option("--manifest", ta.manifest, "pair manifest (jsonl)")->required();
  tr->add_option("--out", ta.out, "run directory")->required();
  tr->add_option("--steps", ta.steps, "total generator steps (train.steps)");
  tr->add_option("--resume", ta.resume, "checkpoint to resume from");
  tr->add_option("--split", ta.split, "training split name");
  tr->callback([&] { run = [&](const Config& c, Provenance& p) { return cmd_train(c, ta, p); }; });

  InferArgs ia;
  auto* in = sub("infer", "translate H&E images with the EMA generator");
  in->add_option("--checkpoint", ia.checkpoint, "checkpoint file")->required();
  in->add_option("--manifest", ia.manifest, "pair manifest (jsonl)");
  in->add_option("--image", ia.image, "single H&E image");
  in->add_option("--token", ia.token, "stain token name or index; defaults to each sample's own stain");
  in->add_option("--split", ia.split, "restrict the manifest to one split");
  in->add_option("--out", ia.out, "output directory")->required();
  in->callback([&] { run = [&](const Config& c, Provenance& p) { return cmd_infer(c, ia, p); }; });

  EvalArgs va;
  auto* ev = sub("evaluate", "compute image and stain metrics on quadrant crops");
  ev->add_option("--checkpoint", va.checkpoint, "checkpoint file")->required();
  ev->add_option("--manifest", va.manifest, "pair manifest (jsonl)")->required();
  ev->add_option("--out", va.out, "output directory")->required();
  ev->add_option("--split", va.split, "evaluation split name");
  ev->add_flag("--save-images", va.save_images, "write generated crops");
  ev->callback([&] { run = [&](const Config& c, Provenance& p) { return cmd_evaluate(c, va, p); }; });

  StratifyArgs st;
  auto* sf = sub("stratify-failures", "failure rates by tissue, worst cases and failure predictor");
  sf->add_option("--checkpoint", st.checkpoint, "checkpoint file")->required();
  sf->add_option("--manifest", st.manifest, "pair manifest (jsonl)")->required();
  sf->add_option("--out", st.out, "output directory")->required();
  sf->add_option("--split", st.split, "split name");
  sf->callback([&] { run = [&](const Config& c, Provenance& p) { return cmd_stratify(c, st, p); }; });

  GridArgs ga;
  auto* eg = sub("export-grids", "compose same-named images from several directories into one grid");
  eg->add_option("--dir", ga.dirs, "source directory, one column each, repeatable")->required();
  eg->add_option("--manifest", ga.manifest, "manifest giving row order and stain labels");
  eg->add_option("--out", ga.out, "output PNG")->required();
  eg->callback([&] { run = [&](const Config& c, Provenance& p) { return cmd_export_grids(c, ga, p); }; });

  PlotArgs pa;
  auto* pl = sub("plot", "render loss curves and failure bars as PNG");
  pl->add_option("--loss-log", pa.loss_log, "loss_log.jsonl from a run");
  pl->add_option("--failures", pa.failures, "failures.json from stratify-failures");
  pl->add_option("--out", pa.out, "output directory")->required();
  pl->callback([&] { run = [&](const Config& c, Provenance& p) { return cmd_plot(c, pa, p); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  try {
    const Config cfg = effective_config(g);
    Provenance prov(app.get_subcommands().front()->get_name(), args, cfg);
    return run(cfg, prov);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}
