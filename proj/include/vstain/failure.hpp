// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "vstain/tensor.hpp"

namespace vstain {

/// Zero-shot tissue classifier: scores one label per entry for a [3,s,s]
/// unit-range image with s == input_side().
class TissueClassifier {
 public:
  virtual ~TissueClassifier() = default;
  virtual int64_t input_side() const = 0;
  virtual std::vector<double> scores(const Tensor& image) const = 0;
};

/// Deterministic stand-in: one-hot score on the bucket floor(mean * n)
/// of the mean intensity, clamped to the last label.
class StubTissueClassifier : public TissueClassifier {
 public:
  StubTissueClassifier(size_t num_labels, int64_t side = 224) : n_(num_labels), side_(side) {}
  int64_t input_side() const override { return side_; }
  std::vector<double> scores(const Tensor& image) const override;

 private:
  size_t n_;
  int64_t side_;
};

/// Runs `command <png>` per image and reads whitespace-separated label scores
/// from its standard output.
class ExternalTissueClassifier : public TissueClassifier {
 public:
  ExternalTissueClassifier(std::string command, size_t num_labels, int64_t side = 224);
  int64_t input_side() const override { return side_; }
  std::vector<double> scores(const Tensor& image) const override;

 private:
  std::string command_;
  size_t n_;
  int64_t side_;
};

/// Resizes to the classifier side and returns the argmax label index; ties go
/// to the lowest index.
int classify_tissue(const Tensor& image, const TissueClassifier& classifier);

struct FailureRecord {
  std::string image_id, stain;
  int tissue = 0;
  double dab_kl = 0.0;
  bool failed = false;
};
/// failed is dab_kl > threshold (strict).
FailureRecord make_failure_record(std::string id, std::string stain, int tissue, double dab_kl, double threshold);

struct TissueStats {
  int tissue = 0;
  int64_t n = 0;
  double failure_rate = 0.0;
  double mean_dab_kl = 0.0;
};
/// Per-tissue counts and rates. When the tissue holds several stains, rate and
/// mean are macro-averaged over those stains. Only tissues present appear.
std::vector<TissueStats> stratify(const std::vector<FailureRecord>& records);

/// Indices of the k highest-KL records (ties by image id), or all if fewer.
std::vector<size_t> worst_cases(const std::vector<FailureRecord>& records, size_t k);

/// k rows of (H&E, real IHC, generated) tiles, the KL value drawn on each row.
Tensor worst_case_grid(const std::vector<FailureRecord>& records, const std::vector<std::array<Tensor, 3>>& triplets,
                       size_t k);

struct LogisticModel {
  Eigen::VectorXd w, mean, scale;
  double b = 0.0;
  /// P(failure) for each row of x.
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

/// Full-batch gradient descent on mean log loss + l2/2 |w|^2 over
/// standardized features.
LogisticModel fit_logistic(const Eigen::MatrixXd& x, const std::vector<int>& y, double l2, int steps, double lr);

/// Mann-Whitney AUC with midranks for ties. Throws if a class is absent.
double auc_rank(const std::vector<double>& scores, const std::vector<int>& labels);

struct FailurePredictor {
  LogisticModel model;
  double auc = 0.0;
  size_t n_train = 0, n_test = 0;
};
/// Stratified train/test split with a fixed seed, fit, and held-out AUC.
FailurePredictor train_failure_predictor(const Eigen::MatrixXd& embeddings, const std::vector<int>& failed, double l2,
                                         int steps, double lr, double test_fraction, uint64_t seed);

}  // namespace vstain
