// SPDX-License-Identifier: Apache-2.0
#include "vstain/evaluation.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "vstain/errors.hpp"
#include "vstain/image_io.hpp"
#include "vstain/kernels.hpp"

namespace vstain {

namespace fs = std::filesystem;

std::array<std::pair<int64_t, int64_t>, 4> quadrant_origins(int64_t crop) {
  return {{{0, 0}, {0, crop}, {crop, 0}, {crop, crop}}};
}

std::vector<Tensor> deterministic_test_crops(const Tensor& img, int64_t side) {
  if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != 2 * side || img.dim(2) != 2 * side)
    throw DataError("test image must be [3," + std::to_string(2 * side) + "," + std::to_string(2 * side) + "], got " +
                    shape_str(img.shape()));
  std::vector<Tensor> out;
  for (auto [y, x] : quadrant_origins(side)) out.push_back(crop(img, y, x, side, side));
  return out;
}

double ssim(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 3) throw std::invalid_argument("ssim: inputs must share a [C,H,W] shape");
  const int64_t c = a.dim(0), h = a.dim(1), w = a.dim(2), k = 11;
  if (h < k || w < k) throw std::invalid_argument("ssim: images must be at least 11x11");
  std::array<double, 11> g{};
  double gs = 0.0;
  for (int i = 0; i < k; ++i) gs += g[static_cast<size_t>(i)] = std::exp(-((i - 5) * (i - 5)) / (2.0 * 1.5 * 1.5));
  for (auto& v : g) v /= gs;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int64_t oh = h - k + 1, ow = w - k + 1;
  // Separable filtering of x, y, x^2, y^2, xy: horizontal pass then vertical.
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> tmp(static_cast<size_t>(h * ow)), out(static_cast<size_t>(oh * ow));
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int64_t i = 0; i < k; ++i) s += g[static_cast<size_t>(i)] * src[static_cast<size_t>(y * w + x + i)];
        tmp[static_cast<size_t>(y * ow + x)] = s;
      }
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int64_t i = 0; i < k; ++i) s += g[static_cast<size_t>(i)] * tmp[static_cast<size_t>((y + i) * ow + x)];
        out[static_cast<size_t>(y * ow + x)] = s;
      }
    return out;
  };
  double total = 0.0;
  const int64_t n = h * w;
  for (int64_t ch = 0; ch < c; ++ch) {
    std::vector<double> x(static_cast<size_t>(n)), y(x.size()), xx(x.size()), yy(x.size()), xy(x.size());
    for (int64_t i = 0; i < n; ++i) {
      const double p = a[ch * n + i], q = b[ch * n + i];
      x[static_cast<size_t>(i)] = p;
      y[static_cast<size_t>(i)] = q;
      xx[static_cast<size_t>(i)] = p * p;
      yy[static_cast<size_t>(i)] = q * q;
      xy[static_cast<size_t>(i)] = p * q;
    }
    const auto mx = filter(x), my = filter(y), mxx = filter(xx), myy = filter(yy), mxy = filter(xy);
    double acc = 0.0;
    for (size_t i = 0; i < mx.size(); ++i) {
      const double vx = mxx[i] - mx[i] * mx[i], vy = myy[i] - my[i] * my[i], cxy = mxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / static_cast<double>(mx.size());
  }
  return total / static_cast<double>(c);
}

namespace {

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, Eigen::VectorXd& mean) {
  mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake, double shrinkage) {
  if (real.cols() != fake.cols()) throw std::invalid_argument("fid: feature widths differ");
  if (real.rows() < 2 || fake.rows() < 2) throw std::invalid_argument("fid needs at least two samples per set");
  const int64_t d = real.cols();
  Eigen::VectorXd mr, mf;
  Eigen::MatrixXd sr = covariance(real, mr), sf = covariance(fake, mf);
  if (real.rows() <= d || fake.rows() <= d) {
    if (!(shrinkage > 0.0))
      throw NumericError("fid: covariance is singular (n=" + std::to_string(std::min(real.rows(), fake.rows())) +
                         " <= dim=" + std::to_string(d) + ") and shrinkage is disabled");
    sr.diagonal().array() += shrinkage;
    sf.diagonal().array() += shrinkage;
  }
  // Tr((Sr Sf)^1/2) = Tr((Sr^1/2 Sf Sr^1/2)^1/2), the latter symmetric PSD.
  const Eigen::MatrixXd a = sqrt_psd(sr);
  Eigen::MatrixXd inner = a * sf * a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return (mr - mf).squaredNorm() + sr.trace() + sf.trace() - 2.0 * tr_sqrt;
}

double kid(const Eigen::MatrixXd& real, const Eigen::MatrixXd& fake) {
  if (real.cols() != fake.cols()) throw std::invalid_argument("kid: feature widths differ");
  const double m = static_cast<double>(real.rows()), n = static_cast<double>(fake.rows());
  if (m < 2 || n < 2) throw std::invalid_argument("kid needs at least two samples per set");
  const double d = static_cast<double>(real.cols());
  auto kernel = [&](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    return ((a * b.transpose()).array() / d + 1.0).cube().matrix().eval();
  };
  const Eigen::MatrixXd kxx = kernel(real, real), kyy = kernel(fake, fake), kxy = kernel(real, fake);
  const double sxx = (kxx.sum() - kxx.trace()) / (m * (m - 1));
  const double syy = (kyy.sum() - kyy.trace()) / (n * (n - 1));
  return sxx + syy - 2.0 * kxy.sum() / (m * n);
}

RandomProjectionFeatures::RandomProjectionFeatures(uint64_t seed, int64_t dim) : width_(dim / 2) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("eval.feature_dim must be a positive even number");
  Rng rng(seed);
  weight_ = Tensor(Shape{width_, 3, 4, 4});
  bias_ = Tensor(Shape{width_});
  init_tensor(weight_, Init::kNormal, 48, rng, std::sqrt(2.0 / 48.0));
  init_tensor(bias_, Init::kNormal, 1, rng, 0.1);
}

Eigen::VectorXd RandomProjectionFeatures::features(const Tensor& img) const {
  require_rank(img, 3, "RandomProjectionFeatures");
  Tensor x = resize_bilinear(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}), 64, 64);
  for (auto& v : x.span()) v -= 0.5f;
  const Tensor y = kernels::conv2d_forward(x, weight_, ConvGeom{4, 0});
  const int64_t hw = y.dim(2) * y.dim(3);
  Eigen::VectorXd f(2 * width_);
  for (int64_t c = 0; c < width_; ++c) {
    double s = 0.0, ss = 0.0;
    for (int64_t i = 0; i < hw; ++i) {
      const double v = std::max(0.0, static_cast<double>(y[c * hw + i]) + bias_[c]);
      s += v;
      ss += v * v;
    }
    const double mean = s / static_cast<double>(hw);
    f[c] = mean;
    f[width_ + c] = std::sqrt(std::max(0.0, ss / static_cast<double>(hw) - mean * mean));
  }
  return f;
}

MetricReport macro_average(MetricReport r) {
  StainMetrics m;
  double pr = 0.0;
  int64_t npr = 0;
  for (const auto& [name, s] : r.per_stain) {
    m.fid += s.fid;
    m.kid_x1000 += s.kid_x1000;
    m.ssim += s.ssim;
    m.lpips += s.lpips;
    m.dab_kl += s.dab_kl;
    m.n_images += s.n_images;
    m.n_crops += s.n_crops;
    if (s.pearson_r) {
      pr += *s.pearson_r;
      ++npr;
    }
  }
  const double k = static_cast<double>(std::max<size_t>(r.per_stain.size(), 1));
  m.fid /= k;
  m.kid_x1000 /= k;
  m.ssim /= k;
  m.lpips /= k;
  m.dab_kl /= k;
  if (npr > 0) m.pearson_r = pr / static_cast<double>(npr);
  r.macro = m;
  return r;
}

MetricReport evaluate_pairs(const std::vector<PairedSample>& samples, const Generate& generate,
                            const ImageFeatureExtractor& features, const PerceptualExtractor& perceptual,
                            const StainConfig& stain, const EvalOptions& opt, std::vector<CropResult>* crops_out) {
  struct Acc {
    std::vector<Eigen::VectorXd> real, fake;
    std::vector<double> ssim, lpips, kl, sg, sr;
    int64_t images = 0;
  };
  std::map<std::string, Acc> acc;
  MetricReport report;
  if (opt.image_dir) fs::create_directories(*opt.image_dir);
  for (const auto& s : samples) {
    if (!fs::exists(s.ihc)) {
      ++report.skipped;
      continue;
    }
    const auto hne = deterministic_test_crops(read_png(s.hne), opt.crop);
    const auto ihc = deterministic_test_crops(read_png(s.ihc), opt.crop);
    Acc& a = acc[s.stain];
    ++a.images;
    for (int k = 0; k < 4; ++k) {
      const Tensor gen = generate(hne[static_cast<size_t>(k)], s);
      const Tensor& real = ihc[static_cast<size_t>(k)];
      if (gen.shape() != real.shape()) throw std::logic_error("generator output shape differs from the test crop");
      if (opt.image_dir) write_png(*opt.image_dir / (s.source_id + "_crop" + std::to_string(k) + ".png"), gen);
      CropResult cr{s.source_id, s.stain, k};
      cr.ssim = ssim(gen, real);
      {
        NoGradGuard guard;
        const Shape s4{1, 3, opt.crop, opt.crop};
        cr.lpips = perceptual.distance(Var(to_signed(gen).reshaped(s4)), Var(to_signed(real).reshaped(s4))).item();
      }
      const auto dg = dab_channel(gen, stain), dr = dab_channel(real, stain);
      cr.dab_kl = dab_kl(dg, dr, stain);
      cr.score_gen = dab_intensity_score(dg, stain.top_fraction);
      cr.score_real = dab_intensity_score(dr, stain.top_fraction);
      a.real.push_back(features.features(real));
      a.fake.push_back(features.features(gen));
      a.ssim.push_back(cr.ssim);
      a.lpips.push_back(cr.lpips);
      a.kl.push_back(cr.dab_kl);
      a.sg.push_back(cr.score_gen);
      a.sr.push_back(cr.score_real);
      if (crops_out) crops_out->push_back(cr);
    }
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  for (auto& [name, a] : acc) {
    StainMetrics m;
    Eigen::MatrixXd r(static_cast<Eigen::Index>(a.real.size()), features.dim()), f(r.rows(), r.cols());
    for (size_t i = 0; i < a.real.size(); ++i) {
      r.row(static_cast<Eigen::Index>(i)) = a.real[i].transpose();
      f.row(static_cast<Eigen::Index>(i)) = a.fake[i].transpose();
    }
    m.fid = fid(r, f, opt.fid_shrinkage);
    m.kid_x1000 = 1000.0 * kid(r, f);
    m.ssim = mean(a.ssim);
    m.lpips = mean(a.lpips);
    m.dab_kl = mean(a.kl);
    try {
      m.pearson_r = pearson_r(a.sg, a.sr);
    } catch (const ConstantInputError&) {
    }
    m.n_images = a.images;
    m.n_crops = static_cast<int64_t>(a.ssim.size());
    report.per_stain[name] = m;
  }
  report.unified = report.per_stain.size() > 1;
  report.protocol = "four non-overlapping " + std::to_string(opt.crop) + "px quadrant crops per " +
                    std::to_string(2 * opt.crop) + "px pair, row-major; per-crop pairing for Pearson r, pooled per stain";
  return macro_average(std::move(report));
}

MetricReport evaluate_run(const fs::path& checkpoint, const std::vector<PairedSample>& test, const EvalOptions& opt,
                          std::vector<CropResult>* crops) {
  InferenceModel im = load_inference_model(checkpoint);
  const Config& cfg = im.config;
  const ModelConfig mc = im.net->config();
  if (opt.crop != mc.generator.resolution)
    throw ConfigError("eval.crop must equal the model resolution " + std::to_string(mc.generator.resolution));
  const RandomProjectionFeatures feats(static_cast<uint64_t>(cfg.get_int("eval.feature_seed")), cfg.get_int("eval.feature_dim"));
  const RandomConvExtractor perceptual(static_cast<uint64_t>(cfg.get_int("loss.extractor_seed")));
  Generate gen = [&](const Tensor& hne, const PairedSample& s) {
    if (s.token < 0 || s.token >= mc.generator.num_classes)
      throw ConfigError("token index " + std::to_string(s.token) + " outside the embedding table");
    const Shape s4{1, 3, hne.dim(1), hne.dim(2)};
    const Tensor tokens = extract_subcrop_tokens(hne.reshaped(s4), *im.backbone, mc.token_grid);
    const Tensor out = translate(*im.net, to_signed(hne).reshaped(s4), tokens, {s.token});
    return to_unit(out.reshaped({3, hne.dim(1), hne.dim(2)}));
  };
  MetricReport r = evaluate_pairs(test, gen, feats, perceptual, stain_config_from(cfg), opt, crops);
  r.params = im.net->num_parameters();
  r.resolution = mc.generator.resolution;
  r.step = im.step;
  return r;
}

int64_t generator_side_parameters(const ModelConfig& cfg) {
  Rng rng(0);
  StainNet net(cfg, rng);
  return net.num_parameters();
}

ParamReport parameter_overhead(const ModelConfig& cfg) {
  ParamReport p;
  p.base = generator_side_parameters(cfg);
  ModelConfig v = cfg;
  v.generator = build_1024_variant(cfg.generator);
  p.variant = generator_side_parameters(v);
  p.relative_increase = static_cast<double>(p.variant - p.base) / static_cast<double>(p.base);
  return p;
}

namespace {

nlohmann::ordered_json metrics_json(const StainMetrics& m) {
  nlohmann::ordered_json j;
  j["fid"] = m.fid;
  j["kid_x1000"] = m.kid_x1000;
  j["ssim"] = m.ssim;
  j["lpips"] = m.lpips;
  j["pearson_r"] = m.pearson_r ? nlohmann::ordered_json(*m.pearson_r) : nlohmann::ordered_json(nullptr);
  j["dab_kl"] = m.dab_kl;
  j["n_images"] = m.n_images;
  j["n_crops"] = m.n_crops;
  return j;
}

}  // namespace

nlohmann::ordered_json report_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["model"] = {{"n_models", r.n_models}, {"params", r.params},     {"resolution", r.resolution},
                {"unified", r.unified},   {"step", r.step},         {"skipped_pairs", r.skipped},
                {"protocol", r.protocol}};
  j["per_stain"] = nlohmann::ordered_json::object();
  for (const auto& [name, m] : r.per_stain) j["per_stain"][name] = metrics_json(m);
  j["macro"] = metrics_json(r.macro);
  j["summary"] = {{"n_models", r.n_models},
                  {"params", r.params},
                  {"avg_fid", r.macro.fid},
                  {"avg_pearson_r", r.macro.pearson_r ? nlohmann::ordered_json(*r.macro.pearson_r) : nlohmann::ordered_json(nullptr)},
                  {"avg_dab_kl", r.macro.dab_kl}};
  return j;
}

std::string report_text(const MetricReport& r) {
  std::ostringstream o;
  char line[256];
  std::snprintf(line, sizeof(line), "%-8s %10s %10s %8s %8s %10s %8s %6s\n", "stain", "FID", "KIDx1k", "SSIM", "LPIPS",
                "Pearson-r", "DAB-KL", "n");
  o << line;
  auto row = [&](const std::string& name, const StainMetrics& m) {
    char pr[32];
    if (m.pearson_r)
      std::snprintf(pr, sizeof(pr), "%.4f", *m.pearson_r);
    else
      std::snprintf(pr, sizeof(pr), "n/a");
    std::snprintf(line, sizeof(line), "%-8s %10.4f %10.4f %8.4f %8.4f %10s %8.4f %6ld\n", name.c_str(), m.fid, m.kid_x1000,
                  m.ssim, m.lpips, pr, m.dab_kl, static_cast<long>(m.n_images));
    o << line;
  };
  for (const auto& [name, m] : r.per_stain) row(name, m);
  row("macro", r.macro);
  o << "params " << r.params << ", resolution " << r.resolution << ", " << (r.unified ? "unified" : "specialist")
    << ", step " << r.step << ", skipped pairs " << r.skipped << "\n";
  o << "protocol: " << r.protocol << "\n";
  return o.str();
}

}  // namespace vstain
