#include "convrec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <thread>
#include <unordered_set>

#include "convrec/errors.hpp"

namespace convrec {

namespace {

// Runs fn(user_index_0based) on up to `threads` workers over [0, count).
// Each invocation writes only to its own slot, so results are independent of
// the schedule.
template <class Fn>
void for_each_user(std::int64_t count, int threads, Fn&& fn) {
  threads = std::max(1, threads);
  if (threads == 1 || count < 2 * threads) {
    for (std::int64_t u = 0; u < count; ++u) fn(u);
    return;
  }
  std::vector<std::thread> pool;
  std::int64_t chunk = (count + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const std::int64_t begin = t * chunk;
    const std::int64_t end = std::min(count, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] {
      for (std::int64_t u = begin; u < end; ++u) fn(u);
    });
  }
  for (auto& th : pool) th.join();
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

// Test triples grouped per user.
std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> by_user(
    const ObservedDataset& ds) {
  std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> out(
      static_cast<std::size_t>(ds.m));
  for (const Triple& t : ds.triples) {
    out[static_cast<std::size_t>(t.user - 1)].push_back({t.item, t.rating_index});
  }
  return out;
}

std::vector<std::int32_t> ranked_candidates(const UserSlice& slice, std::int64_t n,
                                            const std::vector<double>& score) {
  std::vector<std::int32_t> order;
  order.reserve(static_cast<std::size_t>(n));
  for (std::int32_t j = 1; j <= n; ++j) {
    if (slice.rating_index_of(j) == 0) order.push_back(j);
  }
  std::sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
    const double sa = score[static_cast<std::size_t>(a - 1)];
    const double sb = score[static_cast<std::size_t>(b - 1)];
    if (sa != sb) return sa > sb;
    return a < b;
  });
  return order;
}

}  // namespace

double rmse(const TrainState& state, const ObservedDataset& train, const ObservedDataset& test,
            int threads) {
  if (test.size() == 0) throw data_error("rmse: empty test set");
  const auto grouped = by_user(test);
  std::vector<double> per_user(static_cast<std::size_t>(test.m), 0.0);
  for_each_user(test.m, threads, [&](std::int64_t u) {
    const auto& items = grouped[static_cast<std::size_t>(u)];
    if (items.empty()) return;
    ForwardOutput out = averaged_predict(state, train.user_slice(static_cast<std::int32_t>(u + 1)));
    double acc = 0.0;
    for (const auto& [item, kappa] : items) {
      const double err =
          test.scale.value(kappa) - out.predicted_rating[static_cast<std::size_t>(item - 1)];
      acc += err * err;
    }
    per_user[static_cast<std::size_t>(u)] = acc;
  });
  double acc = 0.0;
  for (double v : per_user) acc += v;
  return std::sqrt(acc / static_cast<double>(test.size()));
}

double recall_at_k(const TrainState& state, const ObservedDataset& train,
                   const ObservedDataset& test, int top_k, bool exclude_cold_users, int threads) {
  if (top_k < 1) throw usage_error("recall_at_k: K must be >= 1");
  const auto grouped = by_user(test);
  std::vector<double> per_user(static_cast<std::size_t>(test.m), -1.0);  // -1 = not qualifying
  for_each_user(test.m, threads, [&](std::int64_t u) {
    const auto& items = grouped[static_cast<std::size_t>(u)];
    if (items.empty()) return;
    const UserSlice slice = train.user_slice(static_cast<std::int32_t>(u + 1));
    if (exclude_cold_users && slice.entries.empty()) return;
    ForwardOutput out = averaged_predict(state, slice);
    const auto order = ranked_candidates(slice, train.n, out.interaction_probability);
    const std::size_t top = std::min<std::size_t>(static_cast<std::size_t>(top_k), order.size());
    std::unordered_set<std::int32_t> wanted;
    for (const auto& [item, kappa] : items) wanted.insert(item);
    std::int64_t hits = 0;
    for (std::size_t r = 0; r < top; ++r) {
      if (wanted.count(order[r])) ++hits;
    }
    const double denom =
        static_cast<double>(std::min<std::size_t>(static_cast<std::size_t>(top_k), wanted.size()));
    per_user[static_cast<std::size_t>(u)] = static_cast<double>(hits) / denom;
  });
  double acc = 0.0;
  std::int64_t users = 0;
  for (double v : per_user) {
    if (v >= 0.0) {
      acc += v;
      ++users;
    }
  }
  if (users == 0) throw data_error("recall_at_k: no users with test interactions");
  return acc / static_cast<double>(users);
}

MetricReport evaluate(const TrainState& state, const ObservedDataset& train,
                      const ObservedDataset& test, const std::vector<int>& recall_ks,
                      int threads) {
  MetricReport report;
  report.rmse = rmse(state, train, test, threads);
  report.rmse_count = test.size();
  const auto grouped = by_user(test);
  for (std::int64_t u = 0; u < test.m; ++u) {
    if (grouped[static_cast<std::size_t>(u)].empty()) continue;
    ++report.recall_user_count;
    if (train.user_has_observations(static_cast<std::int32_t>(u + 1))) {
      ++report.recall_warm_user_count;
    }
  }
  for (int k : recall_ks) {
    report.recall_at[k] = recall_at_k(state, train, test, k, false, threads);
    report.recall_at_warm_only[k] = recall_at_k(state, train, test, k, true, threads);
  }
  return report;
}

void write_metric_report(const std::string& path, const MetricReport& report) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw data_error("cannot write metric report: " + path);
  std::fprintf(f.get(), "#metric\tvalue\n");
  std::fprintf(f.get(), "rmse\t%.17g\n", report.rmse);
  std::fprintf(f.get(), "rmse_count\t%lld\n", static_cast<long long>(report.rmse_count));
  for (const auto& [k, v] : report.recall_at) {
    std::fprintf(f.get(), "recall@%d\t%.17g\n", k, v);
  }
  for (const auto& [k, v] : report.recall_at_warm_only) {
    std::fprintf(f.get(), "recall@%d_warm_only\t%.17g\n", k, v);
  }
  std::fprintf(f.get(), "recall_users\t%lld\n", static_cast<long long>(report.recall_user_count));
  std::fprintf(f.get(), "recall_warm_users\t%lld\n",
               static_cast<long long>(report.recall_warm_user_count));
}

std::vector<std::int32_t> rank_with_lambda(const TrainState& state, const ObservedDataset& train,
                                           std::int32_t user, double lambda) {
  if (lambda < 0.0) throw usage_error("rank_with_lambda: lambda must be >= 0");
  const UserSlice slice = train.user_slice(user);
  ForwardOutput out = averaged_predict(state, slice);
  const RatingScale& scale = state.params.scale;
  const double span = scale.span();
  std::vector<double> score(static_cast<std::size_t>(train.n), 0.0);
  for (std::int64_t j = 0; j < train.n; ++j) {
    const double explicit_part =
        span > 0.0 ? (out.predicted_rating[static_cast<std::size_t>(j)] - scale.values.front()) / span
                   : 0.0;
    score[static_cast<std::size_t>(j)] =
        out.interaction_probability[static_cast<std::size_t>(j)] + lambda * explicit_part;
  }
  return ranked_candidates(slice, train.n, score);
}

std::vector<double> lambda_grid() {
  std::vector<double> grid;
  grid.push_back(0.0);
  const double lo = 1e-3, hi = 1e3;
  const int count = 99;
  for (int i = 0; i < count; ++i) {
    const double t = static_cast<double>(i) / (count - 1);
    grid.push_back(lo * std::pow(hi / lo, t));
  }
  return grid;
}

std::vector<LambdaChoice> tune_lambda_per_user(const TrainState& state,
                                               const ObservedDataset& train,
                                               const ObservedDataset& validation) {
  if (validation.size() == 0) throw data_error("tune_lambda_per_user: empty validation set");
  const auto grouped = by_user(validation);
  const auto grid = lambda_grid();
  std::vector<LambdaChoice> out;
  const RatingScale& scale = state.params.scale;
  const double span = scale.span();
  for (std::int64_t u = 0; u < validation.m; ++u) {
    const auto& items = grouped[static_cast<std::size_t>(u)];
    if (items.empty()) continue;
    const UserSlice slice = train.user_slice(static_cast<std::int32_t>(u + 1));
    ForwardOutput pred = averaged_predict(state, slice);
    std::unordered_set<std::int32_t> wanted;
    for (const auto& [item, kappa] : items) wanted.insert(item);

    std::vector<double> score(static_cast<std::size_t>(train.n));
    LambdaChoice best{static_cast<std::int32_t>(u + 1), grid.front(), -1.0};
    for (double lam : grid) {
      for (std::int64_t j = 0; j < train.n; ++j) {
        const double explicit_part =
            span > 0.0
                ? (pred.predicted_rating[static_cast<std::size_t>(j)] - scale.values.front()) / span
                : 0.0;
        score[static_cast<std::size_t>(j)] =
            pred.interaction_probability[static_cast<std::size_t>(j)] + lam * explicit_part;
      }
      const auto order = ranked_candidates(slice, train.n, score);
      const std::size_t top = std::min<std::size_t>(50, order.size());
      std::int64_t hits = 0;
      for (std::size_t r = 0; r < top; ++r) {
        if (wanted.count(order[r])) ++hits;
      }
      const double recall = static_cast<double>(hits) /
                            static_cast<double>(std::min<std::size_t>(50, wanted.size()));
      if (recall > best.recall) {  // strict: ties keep the smaller lambda
        best.recall = recall;
        best.lambda = lam;
      }
    }
    out.push_back(best);
  }
  return out;
}

std::vector<std::pair<double, std::int64_t>> lambda_density(
    const std::vector<LambdaChoice>& choices) {
  const auto grid = lambda_grid();
  std::vector<std::pair<double, std::int64_t>> density;
  density.reserve(grid.size());
  for (double g : grid) density.push_back({g, 0});
  for (const LambdaChoice& c : choices) {
    for (auto& [g, count] : density) {
      if (g == c.lambda) {
        ++count;
        break;
      }
    }
  }
  return density;
}

void write_lambda_density(const std::string& path,
                          const std::vector<std::pair<double, std::int64_t>>& density) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw data_error("cannot write lambda density: " + path);
  std::fprintf(f.get(), "#lambda\tcount\n");
  for (const auto& [g, count] : density) {
    std::fprintf(f.get(), "%.17g\t%lld\n", g, static_cast<long long>(count));
  }
}

SerendipityReport serendipity_report(const TrainState& state, const ObservedDataset& train,
                                     std::int32_t user, double percentile,
                                     std::size_t max_items) {
  if (!(percentile > 0.0 && percentile < 1.0)) {
    throw usage_error("serendipity_report: percentile must lie in (0,1)");
  }
  const UserSlice slice = train.user_slice(user);
  ForwardOutput out = averaged_predict(state, slice);

  std::vector<std::int32_t> candidates;
  for (std::int32_t j = 1; j <= train.n; ++j) {
    if (slice.rating_index_of(j) == 0) candidates.push_back(j);
  }
  SerendipityReport report;
  report.user = user;
  report.percentile = percentile;
  if (candidates.empty()) return report;

  // Nearest-rank quantile of the candidate interaction probabilities.
  std::vector<double> probs;
  probs.reserve(candidates.size());
  for (std::int32_t j : candidates) {
    probs.push_back(out.interaction_probability[static_cast<std::size_t>(j - 1)]);
  }
  std::vector<double> sorted = probs;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t rank = static_cast<std::size_t>(
      std::min<double>(static_cast<double>(sorted.size()) - 1.0,
                       std::max(0.0, std::ceil(percentile * static_cast<double>(sorted.size())) - 1.0)));
  report.threshold = sorted[rank];

  std::vector<SerendipityEntry> entries;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    if (probs[c] <= report.threshold) {
      entries.push_back({candidates[c],
                         out.predicted_rating[static_cast<std::size_t>(candidates[c] - 1)],
                         probs[c]});
    }
  }
  std::sort(entries.begin(), entries.end(), [](const SerendipityEntry& a, const SerendipityEntry& b) {
    if (a.predicted_rating != b.predicted_rating) return a.predicted_rating > b.predicted_rating;
    return a.item < b.item;
  });
  if (max_items > 0 && entries.size() > max_items) entries.resize(max_items);
  report.items = std::move(entries);
  return report;
}

}  // namespace convrec
