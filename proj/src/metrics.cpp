#include "pfedpf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "pfedpf/errors.hpp"

namespace pfedpf {

void PredictionBatch::validate() const {
  if (probabilities.rows() == 0) throw Error("prediction batch is empty");
  if (static_cast<Eigen::Index>(labels.size()) != probabilities.rows())
    throw DimensionMismatch("prediction batch: labels/probabilities count");
  for (Eigen::Index i = 0; i < probabilities.rows(); ++i) {
    if (std::abs(probabilities.row(i).sum() - 1.0) > 1e-9 || probabilities.row(i).minCoeff() < 0.0)
      throw Error("prediction batch: row " + std::to_string(i) + " is not a distribution");
  }
}

double accuracy(const PredictionBatch& batch) {
  batch.validate();
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    Eigen::Index arg;
    batch.probabilities.row(i).maxCoeff(&arg);
    if (arg == batch.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(batch.size());
}

double nll(const PredictionBatch& batch) {
  batch.validate();
  double total = 0.0;
  for (Eigen::Index i = 0; i < batch.size(); ++i)
    total -= std::log(std::max(batch.probabilities(i, batch.labels[static_cast<std::size_t>(i)]), 1e-12));
  return total / static_cast<double>(batch.size());
}

ReliabilityDiagram reliability_diagram(const PredictionBatch& batch, std::size_t bins) {
  batch.validate();
  ReliabilityDiagram rd;
  rd.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) rd.edges[b] = static_cast<double>(b) / static_cast<double>(bins);
  rd.confidence.assign(bins, 0.0);
  rd.accuracy.assign(bins, 0.0);
  rd.count.assign(bins, 0);
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    Eigen::Index arg;
    const double conf = batch.probabilities.row(i).maxCoeff(&arg);
    const auto b = std::min(bins - 1, static_cast<std::size_t>(conf * static_cast<double>(bins)));
    rd.confidence[b] += conf;
    rd.accuracy[b] += arg == batch.labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    ++rd.count[b];
  }
  for (std::size_t b = 0; b < bins; ++b) {
    if (rd.count[b] == 0) continue;
    rd.confidence[b] /= static_cast<double>(rd.count[b]);
    rd.accuracy[b] /= static_cast<double>(rd.count[b]);
  }
  return rd;
}

double ece(const PredictionBatch& batch, std::size_t bins) {
  const ReliabilityDiagram rd = reliability_diagram(batch, bins);
  const double n = static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (rd.count[b] == 0) continue;
    total += static_cast<double>(rd.count[b]) / n * std::abs(rd.accuracy[b] - rd.confidence[b]);
  }
  return total;
}

void write_reliability_csv(std::ostream& out, const ReliabilityDiagram& rd) {
  out << "bin_lo,bin_hi,conf,acc,count\n";
  out.precision(17);
  for (std::size_t b = 0; b < rd.count.size(); ++b) {
    out << rd.edges[b] << ',' << rd.edges[b + 1] << ',' << rd.confidence[b] << ','
        << rd.accuracy[b] << ',' << rd.count[b] << '\n';
  }
}

ScoreSet::ScoreSet(std::vector<double> id_scores, std::vector<double> ood_scores,
                   Orientation orientation)
    : id_(std::move(id_scores)), ood_(std::move(ood_scores)) {
  if (id_.empty() || ood_.empty()) throw Error("ScoreSet: both score lists must be non-empty");
  for (auto* list : {&id_, &ood_}) {
    for (auto& s : *list) {
      if (!std::isfinite(s)) throw Error("ScoreSet: non-finite score");
      if (orientation == Orientation::higher_is_id) s = -s;
    }
  }
}

namespace {

struct Tagged {
  double score;
  bool ood;
};

// Distinct scores in descending order with the ID/OOD counts at each.
struct Level {
  double score;
  std::size_t ood = 0;
  std::size_t id = 0;
};

std::vector<Level> levels_descending(const ScoreSet& scores) {
  std::vector<Tagged> all;
  all.reserve(scores.id_scores().size() + scores.ood_scores().size());
  for (double s : scores.id_scores()) all.push_back({s, false});
  for (double s : scores.ood_scores()) all.push_back({s, true});
  std::sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) { return a.score > b.score; });
  std::vector<Level> levels;
  for (const auto& t : all) {
    if (levels.empty() || levels.back().score != t.score) levels.push_back({t.score});
    (t.ood ? levels.back().ood : levels.back().id) += 1;
  }
  return levels;
}

}  // namespace

double auroc(const ScoreSet& scores) {
  // Twice the Mann-Whitney count, kept integral so ties are exact.
  const auto levels = levels_descending(scores);
  std::size_t id_total = scores.id_scores().size();
  std::uint64_t twice = 0;
  std::size_t id_above = 0;
  for (const auto& level : levels) {
    const std::size_t id_below = id_total - id_above - level.id;
    twice += 2 * static_cast<std::uint64_t>(level.ood) * id_below +
             static_cast<std::uint64_t>(level.ood) * level.id;
    id_above += level.id;
  }
  const double pairs = static_cast<double>(scores.id_scores().size()) *
                       static_cast<double>(scores.ood_scores().size());
  return static_cast<double>(twice) / (2.0 * pairs);
}

double aupr(const ScoreSet& scores) {
  const auto levels = levels_descending(scores);
  const double positives = static_cast<double>(scores.ood_scores().size());
  std::size_t tp = 0;
  std::size_t fp = 0;
  double area = 0.0;
  for (const auto& level : levels) {
    tp += level.ood;
    fp += level.id;
    if (level.ood == 0) continue;
    const double recall_step = static_cast<double>(level.ood) / positives;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += recall_step * precision;
  }
  return area;
}

double fpr_at_95_tpr(const ScoreSet& scores) {
  const auto levels = levels_descending(scores);
  const std::size_t positives = scores.ood_scores().size();
  const std::size_t negatives = scores.id_scores().size();
  std::size_t tp = 0;
  std::size_t fp = 0;
  for (const auto& level : levels) {
    tp += level.ood;
    fp += level.id;
    // FPR is non-decreasing as the threshold drops, so the first threshold
    // reaching TPR >= 0.95 has the smallest FPR.
    if (100 * tp >= 95 * positives) return static_cast<double>(fp) / static_cast<double>(negatives);
  }
  return 1.0;
}

DetectionMetrics detection_metrics(const ScoreSet& scores) {
  return {auroc(scores), aupr(scores), fpr_at_95_tpr(scores)};
}

void write_scores_csv(std::ostream& out, const std::string& method, const ScoreSet& scores,
                      bool header) {
  if (header) out << "method,score,is_ood\n";
  out.precision(17);
  for (double s : scores.id_scores()) out << method << ',' << s << ",0\n";
  for (double s : scores.ood_scores()) out << method << ',' << s << ",1\n";
}

double msp(const Vector& logits) { return softmax(logits).maxCoeff(); }

double entropy(const Vector& probs) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i)
    if (probs(i) > 0.0) h -= probs(i) * std::log(probs(i));
  return h;
}

double maxlogit(const Vector& logits) { return logits.maxCoeff(); }

double energy(const Vector& logits, double temperature) {
  return -temperature * logsumexp(Vector(logits / temperature));
}

Vector odin_perturbed_input(const MlpParams& params, const Vector& x, const OdinConfig& cfg) {
  if (cfg.epsilon == 0.0) return x;
  const ForwardTrace trace = forward(params, x);
  Eigen::Index predicted;
  trace.logits.maxCoeff(&predicted);
  Vector dlogits = softmax(Vector(trace.logits / cfg.temperature));
  dlogits(predicted) -= 1.0;
  dlogits /= cfg.temperature;
  const Vector grad = backward_from_logits(params, trace, dlogits).input;
  const Vector sign = grad.unaryExpr([](double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); });
  return x - cfg.epsilon * sign;
}

double odin(const MlpParams& params, const Vector& x, const OdinConfig& cfg) {
  const Vector perturbed = odin_perturbed_input(params, x, cfg);
  const Vector out = forward(params, perturbed).logits;
  return softmax(Vector(out / cfg.temperature)).maxCoeff();
}

Vector mc_dropout_predict(const MlpParams& params, const Vector& x, double rate,
                          std::size_t samples, RngStream& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("mc_dropout: rate must lie in [0, 1)");
  if (samples < 1) throw Error("mc_dropout: need at least one sample");
  const ForwardTrace trace = forward(params, x);
  if (rate == 0.0) return softmax(trace.logits);
  const Vector& feats = trace.features();
  const double keep_scale = 1.0 / (1.0 - rate);
  Vector mean = Vector::Zero(params.class_count());
  Vector dropped(feats.size());
  for (std::size_t s = 0; s < samples; ++s) {
    for (Eigen::Index j = 0; j < feats.size(); ++j)
      dropped(j) = rng.uniform() < rate ? 0.0 : feats(j) * keep_scale;
    mean += softmax(Vector(params.classifier.weight * dropped + params.classifier.bias));
  }
  mean /= static_cast<double>(samples);
  return mean / mean.sum();
}

double bayes_confidence(const Vector& predictive) { return predictive.maxCoeff(); }

}  // namespace pfedpf
