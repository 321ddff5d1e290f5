#ifndef CONVREC_EVALUATION_HPP_
#define CONVREC_EVALUATION_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "convrec/dataset.hpp"
#include "convrec/training.hpp"

namespace convrec {

struct MetricReport {
  double rmse = 0.0;
  std::map<int, double> recall_at;            // K -> mean recall
  std::map<int, double> recall_at_warm_only;  // cold users excluded
  std::int64_t rmse_count = 0;
  std::int64_t recall_user_count = 0;
  std::int64_t recall_warm_user_count = 0;
};

// Square-root of the mean squared difference between held-out ratings and the
// checkpoint-averaged predicted rating. Per-user work may run on `threads`
// workers; aggregation stays in user order, so results do not depend on the
// thread count.
double rmse(const TrainState& state, const ObservedDataset& train, const ObservedDataset& test,
            int threads = 1);

// Mean over users with >=1 test interaction of
// |top-K by interaction probability  ∩  test items| / min(K, #test items).
// Candidates are all items absent from the user's training slice; ties break
// by ascending item index. `exclude_cold_users` drops users with no training
// interactions instead of ranking them from the zero-information slice.
double recall_at_k(const TrainState& state, const ObservedDataset& train,
                   const ObservedDataset& test, int top_k, bool exclude_cold_users = false,
                   int threads = 1);

MetricReport evaluate(const TrainState& state, const ObservedDataset& train,
                      const ObservedDataset& test, const std::vector<int>& recall_ks,
                      int threads = 1);

void write_metric_report(const std::string& path, const MetricReport& report);

// Blended ranking: interaction probability plus lambda times the predicted
// rating normalized to [0,1]. Returns candidate items in descending order.
std::vector<std::int32_t> rank_with_lambda(const TrainState& state, const ObservedDataset& train,
                                           std::int32_t user, double lambda);

// 0 followed by 99 geometrically spaced values from 1e-3 to 1e3.
std::vector<double> lambda_grid();

struct LambdaChoice {
  std::int32_t user = 0;
  double lambda = 0.0;
  double recall = 0.0;
};

// Per-user lambda maximizing validation recall@50 over the grid; ties resolve
// to the smallest grid value.
std::vector<LambdaChoice> tune_lambda_per_user(const TrainState& state,
                                               const ObservedDataset& train,
                                               const ObservedDataset& validation);

// (lambda, count) pairs over the grid for external plotting.
std::vector<std::pair<double, std::int64_t>> lambda_density(const std::vector<LambdaChoice>& choices);
void write_lambda_density(const std::string& path,
                          const std::vector<std::pair<double, std::int64_t>>& density);

struct SerendipityEntry {
  std::int32_t item = 0;
  double predicted_rating = 0.0;
  double interaction_probability = 0.0;
};

struct SerendipityReport {
  std::int32_t user = 0;
  double percentile = 0.0;
  double threshold = 0.0;  // interaction-probability cutoff actually applied
  std::vector<SerendipityEntry> items;  // descending predicted rating
};

// Candidate items below the user's interaction-probability quantile, ranked
// by predicted rating; training interactions never appear.
SerendipityReport serendipity_report(const TrainState& state, const ObservedDataset& train,
                                     std::int32_t user, double percentile,
                                     std::size_t max_items = 0);

}  // namespace convrec

#endif  // CONVREC_EVALUATION_HPP_
