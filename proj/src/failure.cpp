// SPDX-License-Identifier: Apache-2.0
#include "vstain/failure.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <unistd.h>

#include "vstain/errors.hpp"
#include "vstain/image_io.hpp"
#include "vstain/ops.hpp"
#include "vstain/render.hpp"

namespace vstain {

std::vector<double> StubTissueClassifier::scores(const Tensor& image) const {
  double m = 0.0;
  for (float v : image.span()) m += v;
  m /= static_cast<double>(image.numel());
  const size_t bucket = std::min(n_ - 1, static_cast<size_t>(std::max(0.0, std::floor(m * static_cast<double>(n_)))));
  std::vector<double> s(n_, 0.0);
  s[bucket] = 1.0;
  return s;
}

ExternalTissueClassifier::ExternalTissueClassifier(std::string command, size_t num_labels, int64_t side)
    : command_(std::move(command)), n_(num_labels), side_(side) {
  if (command_.empty())
    throw ConfigError("external tissue classifier unavailable: failure.external_command is not set");
}

std::vector<double> ExternalTissueClassifier::scores(const Tensor& image) const {
  const auto path = std::filesystem::temp_directory_path() / ("vstain_tissue_" + std::to_string(::getpid()) + ".png");
  write_png(path, image);
  const std::string cmd = command_ + " '" + path.string() + "'";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) throw DataError("external tissue classifier unavailable: cannot run '" + command_ + "'");
  std::string out;
  char buf[4096];
  while (size_t n = std::fread(buf, 1, sizeof(buf), pipe)) out.append(buf, n);
  const int status = ::pclose(pipe);
  std::filesystem::remove(path);
  if (status != 0) throw DataError("external tissue classifier '" + command_ + "' failed with status " + std::to_string(status));
  std::istringstream in(out);
  std::vector<double> s;
  for (double v; in >> v;) s.push_back(v);
  if (s.size() != n_)
    throw DataError("external tissue classifier returned " + std::to_string(s.size()) + " scores, expected " + std::to_string(n_));
  return s;
}

int classify_tissue(const Tensor& image, const TissueClassifier& classifier) {
  require_rank(image, 3, "classify_tissue");
  const int64_t side = classifier.input_side();
  const Tensor small =
      resize_bilinear(image.reshaped({1, 3, image.dim(1), image.dim(2)}), side, side).reshaped({3, side, side});
  const auto s = classifier.scores(small);
  if (s.empty()) throw DataError("tissue classifier returned no scores");
  return static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());  // first maximum
}

FailureRecord make_failure_record(std::string id, std::string stain, int tissue, double dab_kl, double threshold) {
  return {std::move(id), std::move(stain), tissue, dab_kl, dab_kl > threshold};
}

std::vector<TissueStats> stratify(const std::vector<FailureRecord>& records) {
  // tissue -> stain -> (n, failures, kl sum)
  std::map<int, std::map<std::string, std::array<double, 3>>> acc;
  for (const auto& r : records) {
    auto& a = acc[r.tissue][r.stain];
    a[0] += 1;
    a[1] += r.failed ? 1 : 0;
    a[2] += r.dab_kl;
  }
  std::vector<TissueStats> out;
  for (const auto& [tissue, stains] : acc) {
    TissueStats t;
    t.tissue = tissue;
    for (const auto& [stain, a] : stains) {
      t.n += static_cast<int64_t>(a[0]);
      t.failure_rate += a[1] / a[0];
      t.mean_dab_kl += a[2] / a[0];
    }
    t.failure_rate /= static_cast<double>(stains.size());
    t.mean_dab_kl /= static_cast<double>(stains.size());
    out.push_back(t);
  }
  return out;
}

std::vector<size_t> worst_cases(const std::vector<FailureRecord>& records, size_t k) {
  std::vector<size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    if (records[a].dab_kl != records[b].dab_kl) return records[a].dab_kl > records[b].dab_kl;
    return records[a].image_id < records[b].image_id;
  });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

Tensor worst_case_grid(const std::vector<FailureRecord>& records, const std::vector<std::array<Tensor, 3>>& triplets,
                       size_t k) {
  if (records.size() != triplets.size()) throw std::invalid_argument("worst_case_grid: records and images differ in count");
  std::vector<std::vector<Tensor>> rows;
  for (size_t i : worst_cases(records, k)) {
    std::vector<Tensor> row(triplets[i].begin(), triplets[i].end());
    char label[64];
    std::snprintf(label, sizeof(label), "KL %.3f", records[i].dab_kl);
    const int64_t w = std::min<int64_t>(text_width(label) + 4, row[2].dim(2));
    fill_rect(row[2], 0, 0, 11, w, {1, 1, 1});
    draw_text(row[2], 2, 2, label);
    rows.push_back(std::move(row));
  }
  return compose_grid(rows);
}

Eigen::VectorXd LogisticModel::predict(const Eigen::MatrixXd& x) const {
  const Eigen::MatrixXd z = (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  return ((-(z * w).array() - b).exp() + 1.0).inverse().matrix();
}

LogisticModel fit_logistic(const Eigen::MatrixXd& x, const std::vector<int>& y, double l2, int steps, double lr) {
  if (x.rows() != static_cast<Eigen::Index>(y.size()) || y.empty()) throw std::invalid_argument("fit_logistic: size mismatch");
  LogisticModel m;
  m.mean = x.colwise().mean().transpose();
  m.scale = ((x.rowwise() - m.mean.transpose()).array().square().colwise().mean().sqrt()).transpose();
  for (auto& s : m.scale) s = s > 1e-12 ? s : 1.0;
  const Eigen::MatrixXd z = (x.rowwise() - m.mean.transpose()).array().rowwise() / m.scale.transpose().array();
  Eigen::VectorXd t(static_cast<Eigen::Index>(y.size()));
  for (size_t i = 0; i < y.size(); ++i) t[static_cast<Eigen::Index>(i)] = y[i] ? 1.0 : 0.0;
  m.w = Eigen::VectorXd::Zero(x.cols());
  const double n = static_cast<double>(y.size());
  for (int it = 0; it < steps; ++it) {
    const Eigen::VectorXd p = ((-(z * m.w).array() - m.b).exp() + 1.0).inverse().matrix();
    const Eigen::VectorXd r = p - t;
    m.w -= lr * (z.transpose() * r / n + l2 * m.w);
    m.b -= lr * r.sum() / n;
  }
  return m;
}

double auc_rank(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: size mismatch");
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (size_t i = 0; i < n;) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double npos = 0, sum = 0;
  for (size_t i = 0; i < n; ++i)
    if (labels[i]) {
      ++npos;
      sum += rank[i];
    }
  const double nneg = static_cast<double>(n) - npos;
  if (npos == 0 || nneg == 0) throw DataError("AUC needs both failed and non-failed records");
  return (sum - npos * (npos + 1) / 2.0) / (npos * nneg);
}

FailurePredictor train_failure_predictor(const Eigen::MatrixXd& x, const std::vector<int>& failed, double l2, int steps,
                                         double lr, double test_fraction, uint64_t seed) {
  std::vector<size_t> pos, neg;
  for (size_t i = 0; i < failed.size(); ++i) (failed[i] ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) throw DataError("failure predictor needs both failed and non-failed records");
  std::mt19937_64 rng(seed);
  std::vector<size_t> train, test;
  for (auto* group : {&neg, &pos}) {
    std::shuffle(group->begin(), group->end(), rng);
    size_t nt = static_cast<size_t>(std::lround(test_fraction * static_cast<double>(group->size())));
    nt = std::clamp<size_t>(nt, 1, group->size() > 1 ? group->size() - 1 : 1);
    test.insert(test.end(), group->begin(), group->begin() + static_cast<std::ptrdiff_t>(nt));
    train.insert(train.end(), group->begin() + static_cast<std::ptrdiff_t>(nt), group->end());
  }
  auto rows = [&](const std::vector<size_t>& idx) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(idx.size()), x.cols());
    for (size_t i = 0; i < idx.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
    return m;
  };
  auto labels = [&](const std::vector<size_t>& idx) {
    std::vector<int> l;
    for (size_t i : idx) l.push_back(failed[i]);
    return l;
  };
  FailurePredictor fp;
  if (train.empty()) train = test;
  fp.model = fit_logistic(rows(train), labels(train), l2, steps, lr);
  const Eigen::VectorXd p = fp.model.predict(rows(test));
  fp.auc = auc_rank(std::vector<double>(p.data(), p.data() + p.size()), labels(test));
  fp.n_train = train.size();
  fp.n_test = test.size();
  return fp;
}

}  // namespace vstain
