#ifndef CONVREC_THEORY_HPP_
#define CONVREC_THEORY_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "convrec/dataset.hpp"
#include "convrec/model.hpp"
#include "convrec/training.hpp"

namespace convrec {

// Architecture-specific operator norms per decoder layer position: spectral
// norm for interior layers, max spectral norm over the n item slices at the
// expanding layer, max row Euclidean norm at the last layer.
enum class LayerPosition { interior_dense, boundary, interior_conv, last };

double layer_norm(const Matrix& w, LayerPosition position, std::int64_t n = 0);
LayerPosition decoder_layer_position(const DecoderSpec& spec, int layer_index);

struct DistanceReport {
  std::vector<double> arch_distance;  // per decoder layer, ||W - M|| in the layer norm
  double beta_sum = 0.0;              // empirical beta
  double nu = 0.0;                    // empirical nu: max(0, max_l ||M||_l - 1)
  std::vector<double> group_distance;  // row-norm sums of W - M; Frobenius at the last layer
  std::vector<double> operator_norm;   // ||W||_l, empirical s_l
  std::vector<double> init_norm;       // ||M||_l
};

DistanceReport distance_to_init(const ModelParams& params);

struct BoundInputs {
  double span = 0.0;         // largest rating gap
  double beta = 0.0;
  double nu = 0.0;
  double chi = 0.0;
  double delta = 0.05;
  double score_bound = 0.0;  // B, cap on |g|
  std::vector<double> group_distance;  // a_l
  std::vector<double> operator_norm;   // s_l
  std::int64_t sample_count = 0;       // N
  std::int64_t user_count = 0;         // m
  std::int64_t item_count = 0;         // n
  std::int64_t bottleneck = 0;         // r
  std::int64_t decoder_params = 0;     // D2
  int depth = 0;                       // L
};

// Generalization-gap estimate driven by the parameter count mr + D2.
double bound_param_count(const BoundInputs& in);

// Norm-based estimate driven by distances to initialization.
double bound_norm_based(const BoundInputs& in);

// Excess-risk budget for the distribution-recovery guarantee (reported up to
// the result's unstated leading constant).
double bound_tv_budget(const BoundInputs& in);

// Measures chi, beta, nu, a_l, s_l and the score cap from a trained model.
BoundInputs measure_bound_inputs(const ModelParams& params, const ObservedDataset& train,
                                 std::int64_t sample_count, double delta);

// Samples decoder inputs within the chi-ball and weights within the beta
// budget around initialization, and returns the largest observed ratio of
// output change to the theoretical Lipschitz cap (must stay <= 1).
double lipschitz_probe(const ModelParams& params, int trials, double chi, double beta,
                       std::uint64_t seed);

// Joint sampling distribution over (user, item, rating).
struct GroundTruthDistribution {
  std::int64_t m = 0;
  std::int64_t n = 0;
  int k = 0;
  RatingScale scale;
  bool noiseless = false;
  std::vector<double> p;  // m*n*k, sums to 1

  double& at(std::int64_t i, std::int64_t j, int kappa) {
    return p[(static_cast<std::size_t>(i - 1) * static_cast<std::size_t>(n) +
              static_cast<std::size_t>(j - 1)) *
                 static_cast<std::size_t>(k) +
             static_cast<std::size_t>(kappa - 1)];
  }
  double at(std::int64_t i, std::int64_t j, int kappa) const {
    return p[(static_cast<std::size_t>(i - 1) * static_cast<std::size_t>(n) +
              static_cast<std::size_t>(j - 1)) *
                 static_cast<std::size_t>(k) +
             static_cast<std::size_t>(kappa - 1)];
  }
  double cell_mass(std::int64_t i, std::int64_t j) const {
    double s = 0;
    for (int kappa = 1; kappa <= k; ++kappa) s += at(i, j, kappa);
    return s;
  }
  void validate() const;
};

// The population-loss minimizer: channel kappa carries N*p, channel 0 the
// remainder. Requires 1/N >= cell mass everywhere; the first offending cell
// is named on rejection. Layout: m*n*(k+1), channel-major within a cell.
std::vector<double> bayes_optimal_output(const GroundTruthDistribution& gt,
                                         std::int64_t sample_count);

// Sample-version implicit-feedback loss of a full probability tensor G
// (m*n*(k+1)), equal to (mn/N) times the reconstruction loss on
// duplicate-free data.
double implicit_loss(const std::vector<double>& probabilities, std::int64_t m, std::int64_t n,
                     int k, const ObservedDataset& observed, std::int64_t sample_count);

// Population version evaluated directly against the sampling distribution.
double implicit_loss_population(const std::vector<double>& probabilities,
                                const GroundTruthDistribution& gt, std::int64_t sample_count);

double kl_divergence(std::span<const double> p, std::span<const double> q);
double tv_distance(std::span<const double> p, std::span<const double> q);  // L1 distance
// Pinsker: half the L1 distance is at most sqrt(KL/2).
bool pinsker_holds(std::span<const double> p, std::span<const double> q, double slack = 1e-12);

// Realizable ground truth: a randomly initialized small decoder of this
// model family, its softmax outputs normalized into a joint distribution.
GroundTruthDistribution synth_generate(std::int64_t m, std::int64_t n, int rank, int k,
                                       std::uint64_t seed, bool noiseless = false,
                                       double weight_scale = 1.0);

// Draws N distinct cells (rejection on duplicates); requires N <= m*n.
ObservedDataset sample_duplicate_free(const GroundTruthDistribution& gt, std::int64_t sample_count,
                                      std::uint64_t seed);

// Pure i.i.d. sampling with duplicates kept as per-cell counts; the observed
// dataset deduplicates to the first-drawn rating per cell and `targets`
// carries the count-weighted training targets for callers that want the
// duplicate-aware objective.
struct SampledCounts {
  ObservedDataset observed;
  SoftTargets targets;
  std::int64_t sample_count = 0;
};

SampledCounts sample_iid_counts(const GroundTruthDistribution& gt, std::int64_t sample_count,
                                std::uint64_t seed);

struct TvExperimentRow {
  std::int64_t sample_count = 0;
  std::uint64_t seed = 0;
  double tv_joint = 0.0;
  double tv_marginal = 0.0;
  double mse = 0.0;        // population MSE of the predicted ratings (noiseless runs)
  double excess_loss = 0.0;  // population implicit loss minus the Bayes value (NaN if Bayes invalid)
  double tv_budget = 0.0;  // evaluated recovery budget for context
  bool diverged = false;
};

struct TvExperimentConfig {
  std::int64_t m = 50;
  std::int64_t n = 80;
  int rank = 2;
  int k = 5;
  bool noiseless = false;
  double weight_scale = 1.0;
  // Duplicate draws keep their first rating and train the standard one-hot
  // objective (the duplicate-free convention extended past N = m*n, where
  // resampling cannot terminate). The count-weighted objective is available
  // but unbounded below once cells are expected more than once.
  bool count_weighted = false;
  std::vector<std::int64_t> sample_counts = {1000, 10000, 100000};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  TrainConfig train;
};

std::vector<TvExperimentRow> tv_recovery_experiment(const TvExperimentConfig& config);
void write_tv_table(const std::string& path, const TvExperimentConfig& config,
                    const std::vector<TvExperimentRow>& rows);

struct BoundReportEntry {
  std::string name;
  double value;
};

void write_bound_report(const std::string& path, const BoundInputs& in);

}  // namespace convrec

#endif  // CONVREC_THEORY_HPP_
