#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pfedpf/model.hpp"
#include "pfedpf/numerics.hpp"
#include "pfedpf/rng.hpp"

namespace pfedpf {

struct PredictionBatch {
  Matrix probabilities;  // n x k, rows on the simplex
  std::vector<int> labels;
  std::optional<Matrix> logits;

  Eigen::Index size() const noexcept { return probabilities.rows(); }
  void validate() const;
};

double accuracy(const PredictionBatch& batch);
// Probabilities are clipped below at 1e-12 before the log.
double nll(const PredictionBatch& batch);

struct ReliabilityDiagram {
  std::vector<double> edges;       // bins + 1 equal-width edges on [0, 1]
  std::vector<double> confidence;  // mean max-probability per bin (0 if empty)
  std::vector<double> accuracy;
  std::vector<std::size_t> count;
};

// Bin b holds confidences in [b/B, (b+1)/B); confidence 1 falls in the last bin.
ReliabilityDiagram reliability_diagram(const PredictionBatch& batch, std::size_t bins = 15);
double ece(const PredictionBatch& batch, std::size_t bins = 15);

void write_reliability_csv(std::ostream& out, const ReliabilityDiagram& diagram);

enum class Orientation { higher_is_ood, higher_is_id };

// OOD scores normalized so that a higher score always means "more OOD".
class ScoreSet {
 public:
  ScoreSet(std::vector<double> id_scores, std::vector<double> ood_scores,
           Orientation orientation = Orientation::higher_is_ood);

  const std::vector<double>& id_scores() const noexcept { return id_; }
  const std::vector<double>& ood_scores() const noexcept { return ood_; }

 private:
  std::vector<double> id_;
  std::vector<double> ood_;
};

// OOD is the positive class throughout.
double auroc(const ScoreSet& scores);
double aupr(const ScoreSet& scores);
double fpr_at_95_tpr(const ScoreSet& scores);

struct DetectionMetrics {
  double auroc = 0.0;
  double aupr = 0.0;
  double fpr95 = 0.0;
};
DetectionMetrics detection_metrics(const ScoreSet& scores);

void write_scores_csv(std::ostream& out, const std::string& method, const ScoreSet& scores,
                      bool header);

// Raw score functions (natural orientation noted per function).
double msp(const Vector& logits);                          // higher = ID
double entropy(const Vector& probs);                       // higher = OOD
double maxlogit(const Vector& logits);                     // higher = ID
double energy(const Vector& logits, double temperature = 1.0);  // higher = OOD

struct OdinConfig {
  double temperature = 1000.0;
  double epsilon = 0.0014;
};

// Input moved against the sign of the temperature-scaled NLL gradient at
// the predicted label, then rescored by the tempered max softmax (higher = ID).
double odin(const MlpParams& params, const Vector& x, const OdinConfig& cfg = {});
Vector odin_perturbed_input(const MlpParams& params, const Vector& x, const OdinConfig& cfg);

// Dropout on the final hidden activations at inference; mean softmax over
// `samples` masks with inverted scaling.
Vector mc_dropout_predict(const MlpParams& params, const Vector& x, double rate,
                          std::size_t samples, RngStream& rng);

// Max of the posterior predictive (higher = ID).
double bayes_confidence(const Vector& predictive);

}  // namespace pfedpf
