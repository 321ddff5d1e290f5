#ifndef CONVREC_DATASET_HPP_
#define CONVREC_DATASET_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace convrec {

// Ordered rating values u_1 < ... < u_k.
struct RatingScale {
  std::vector<double> values;

  int rating_count() const { return static_cast<int>(values.size()); }
  double span() const { return values.empty() ? 0.0 : values.back() - values.front(); }
  double value(int kappa) const { return values.at(static_cast<std::size_t>(kappa - 1)); }

  // 1-based index of a rating value, 0 when not on the scale.
  int index_of(double v) const;
  void validate() const;

  static RatingScale integers(int k);
};

struct Triple {
  std::int32_t user = 0;          // 1..m
  std::int32_t item = 0;          // 1..n
  std::int32_t rating_index = 0;  // 1..k
};

struct SplitSpec {
  double train_fraction = 0.9;
  double validation_fraction = 0.05;
  double test_fraction = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

// Sparse view of one user's row: (item, rating-index) pairs sorted by item.
// Absent items carry the implicit "unobserved" index 0.
struct UserSlice {
  std::int32_t user = 0;
  std::vector<std::pair<std::int32_t, std::int32_t>> entries;

  int rating_index_of(std::int32_t item) const;
};

// Immutable after load/finalize. Indices are contiguous and 1-based; external
// IDs from the source file are kept for reporting and prediction lookups.
struct ObservedDataset {
  std::int64_t m = 0;
  std::int64_t n = 0;
  RatingScale scale;
  std::vector<Triple> triples;
  std::vector<std::string> user_ids;  // index i-1 -> external id
  std::vector<std::string> item_ids;

  std::int64_t size() const { return static_cast<std::int64_t>(triples.size()); }

  // Builds the per-user index; loaders call this, call it again after manual edits.
  void finalize();

  UserSlice user_slice(std::int32_t user) const;
  bool user_has_observations(std::int32_t user) const;
  std::int32_t user_index_of(const std::string& external_id) const;  // 0 if unknown
  std::int32_t item_index_of(const std::string& external_id) const;

 private:
  std::vector<std::int64_t> user_start_;                           // size m+1
  std::vector<std::pair<std::int32_t, std::int32_t>> user_items_;  // sorted (item, kappa)
};

// Parses delimited rating files (tab, comma or "::"), lines of
// user, item, rating[, timestamp]. A non-numeric first line is skipped.
// External IDs are remapped to contiguous 1-based indices in order of first
// appearance. With an empty `scale`, the scale is the sorted set of distinct
// rating values found in the file.
ObservedDataset load_ratings(const std::string& path, const RatingScale& scale = {});

struct SplitResult {
  ObservedDataset train;
  ObservedDataset validation;
  ObservedDataset test;
};

SplitResult split(const ObservedDataset& data, const SplitSpec& spec);

// Split manifests: delimited text with the triple format plus a part tag,
// preserving internal indices and ID maps so experiments replay exactly.
void save_split_manifest(const std::string& path, const SplitResult& parts);
SplitResult load_split_manifest(const std::string& path);

void save_dataset_manifest(const std::string& path, const ObservedDataset& data,
                           const std::string& part_tag);

}  // namespace convrec

#endif  // CONVREC_DATASET_HPP_
