#include "convrec.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "doctest.h"

namespace {

std::string write_ratings(const std::string& name) {
  const std::string path = "/tmp/convrec_capi_" + name;
  std::ofstream out(path);
  // 8 users x 10 items grid with a block pattern, every cell observed.
  for (int u = 1; u <= 8; ++u) {
    for (int i = 1; i <= 10; ++i) {
      const bool group = (u <= 4) == (i <= 5);
      out << u << "," << i << "," << (group ? 5 : 1) << "\n";
    }
  }
  return path;
}

}  // namespace

TEST_CASE("dataset load, dims, split and manifest round-trip") {
  const auto path = write_ratings("basic.csv");
  const double scale[5] = {1, 2, 3, 4, 5};
  cvr_dataset* ds = nullptr;
  REQUIRE(cvr_dataset_load(path.c_str(), scale, 5, &ds) == CVR_OK);
  int64_t m = 0, n = 0, count = 0;
  int32_t k = 0;
  REQUIRE(cvr_dataset_dims(ds, &m, &n, &count, &k) == CVR_OK);
  CHECK(m == 8);
  CHECK(n == 10);
  CHECK(count == 80);
  CHECK(k == 5);

  cvr_dataset *train = nullptr, *validation = nullptr, *test = nullptr;
  REQUIRE(cvr_dataset_split(ds, 0.8, 0.1, 0.1, 42, &train, &validation, &test) == CVR_OK);
  int64_t tc = 0, vc = 0, sc = 0;
  cvr_dataset_dims(train, nullptr, nullptr, &tc, nullptr);
  cvr_dataset_dims(validation, nullptr, nullptr, &vc, nullptr);
  cvr_dataset_dims(test, nullptr, nullptr, &sc, nullptr);
  CHECK(tc == 64);
  CHECK(vc == 8);
  CHECK(sc == 8);

  REQUIRE(cvr_split_save(train, validation, test, "/tmp/convrec_capi_manifest.tsv") == CVR_OK);
  cvr_dataset *t2 = nullptr, *v2 = nullptr, *s2 = nullptr;
  REQUIRE(cvr_split_load("/tmp/convrec_capi_manifest.tsv", &t2, &v2, &s2) == CVR_OK);
  int64_t tc2 = 0;
  cvr_dataset_dims(t2, nullptr, nullptr, &tc2, nullptr);
  CHECK(tc2 == tc);

  cvr_dataset_free(ds);
  cvr_dataset_free(train);
  cvr_dataset_free(validation);
  cvr_dataset_free(test);
  cvr_dataset_free(t2);
  cvr_dataset_free(v2);
  cvr_dataset_free(s2);
}

TEST_CASE("error paths return codes and messages") {
  cvr_dataset* ds = nullptr;
  CHECK(cvr_dataset_load("/nonexistent/file.csv", nullptr, 0, &ds) == CVR_ERR_DATA);
  CHECK(std::string(cvr_last_error()).find("file.csv") != std::string::npos);

  cvr_model* model = nullptr;
  CHECK(cvr_model_load("/nonexistent/run", &model) == CVR_ERR_DATA);

  const auto path = write_ratings("err.csv");
  REQUIRE(cvr_dataset_load(path.c_str(), nullptr, 0, &ds) == CVR_OK);
  CHECK(cvr_train(ds, nullptr, "definitely_not_a_key=1\n", nullptr, &model) == CVR_ERR_USAGE);
  CHECK(std::string(cvr_last_error()).find("definitely_not_a_key") != std::string::npos);
  cvr_dataset_free(ds);
}

TEST_CASE("train, reload, predict and evaluate through the shared library") {
  const auto path = write_ratings("train.csv");
  cvr_dataset* ds = nullptr;
  REQUIRE(cvr_dataset_load(path.c_str(), nullptr, 0, &ds) == CVR_OK);
  cvr_dataset *train = nullptr, *validation = nullptr, *test = nullptr;
  REQUIRE(cvr_dataset_split(ds, 0.8, 0.1, 0.1, 7, &train, &validation, &test) == CVR_OK);

  const char* config =
      "learning_rate=0.005\nbatch_size=8\nepoch_block=5\nmax_blocks=2\ndepth=2\n"
      "bottleneck=4\nconv_width=6\nseed=11\n";
  cvr_model* model = nullptr;
  REQUIRE(cvr_train(train, validation, config, "/tmp/convrec_capi_run", &model) == CVR_OK);
  int32_t checkpoints = 0;
  REQUIRE(cvr_model_checkpoint_count(model, &checkpoints) == CVR_OK);
  CHECK(checkpoints >= 1);

  cvr_model* reloaded = nullptr;
  REQUIRE(cvr_model_load("/tmp/convrec_capi_run", &reloaded) == CVR_OK);
  int32_t reloaded_count = 0;
  cvr_model_checkpoint_count(reloaded, &reloaded_count);
  CHECK(reloaded_count == checkpoints);

  double probabilities[6], conditional[5], rating = 0, interaction = 0, quantile = 0;
  int32_t serendipity = -1;
  REQUIRE(cvr_predict(reloaded, train, "1", "3", probabilities, conditional, &rating, &interaction,
                      &quantile, &serendipity) == CVR_OK);
  double sum = 0;
  for (double p : probabilities) {
    CHECK(p >= 0.0);
    sum += p;
  }
  CHECK(std::abs(sum - 1.0) <= 1e-12);
  double csum = 0;
  for (double c : conditional) csum += c;
  CHECK(std::abs(csum - 1.0) <= 1e-12);
  CHECK(rating >= 1.0);
  CHECK(rating <= 5.0);
  CHECK(std::abs(interaction - (1.0 - probabilities[0])) <= 1e-12);
  CHECK(quantile >= 0.0);
  CHECK(quantile <= 1.0);
  CHECK((serendipity == 0 || serendipity == 1));

  CHECK(cvr_predict(reloaded, train, "no-such-user", "3", nullptr, nullptr, nullptr, nullptr,
                    nullptr, nullptr) == CVR_ERR_DATA);

  const int32_t ks[2] = {3, 5};
  double recalls[2] = {0, 0};
  double rmse_value = 0;
  REQUIRE(cvr_evaluate(reloaded, train, test, ks, 2, 2, "/tmp/convrec_capi_metrics.tsv",
                       &rmse_value, recalls) == CVR_OK);
  CHECK(rmse_value >= 0.0);
  CHECK(recalls[0] >= 0.0);
  CHECK(recalls[0] <= 1.0);
  CHECK(recalls[1] >= recalls[0] - 1e-12);  // larger K can only help

  // Thread count must not change results.
  double rmse_single = 0;
  double recalls_single[2] = {0, 0};
  REQUIRE(cvr_evaluate(reloaded, train, test, ks, 2, 1, nullptr, &rmse_single, recalls_single) ==
          CVR_OK);
  CHECK(rmse_single == rmse_value);
  CHECK(recalls_single[0] == recalls[0]);
  CHECK(recalls_single[1] == recalls[1]);

  REQUIRE(cvr_lambda_density(reloaded, train, validation, "/tmp/convrec_capi_lambda.tsv") ==
          CVR_OK);
  REQUIRE(cvr_bounds(reloaded, train, 0, 0.05, "/tmp/convrec_capi_bounds.tsv") == CVR_OK);

  cvr_model_free(model);
  cvr_model_free(reloaded);
  cvr_dataset_free(ds);
  cvr_dataset_free(train);
  cvr_dataset_free(validation);
  cvr_dataset_free(test);
}

TEST_CASE("gradcheck and synth-tv entry points") {
  double max_rel = 1.0;
  REQUIRE(cvr_gradcheck(5, 8, 5, 3, 2, 6, 9, &max_rel) == CVR_OK);
  CHECK(max_rel <= 1e-4);

  const char* config =
      "m=6\nn=8\nrank=2\nk=3\nsample_counts=100,400\nseeds=4\nepoch_block=5\nmax_blocks=1\n"
      "batch_size=6\nlearning_rate=0.005\ndepth=2\nbottleneck=3\nconv_width=6\n";
  REQUIRE(cvr_synth_tv(config, "/tmp/convrec_capi_tv.tsv") == CVR_OK);
  std::ifstream table("/tmp/convrec_capi_tv.tsv");
  std::string line;
  int rows = 0;
  while (std::getline(table, line)) {
    if (!line.empty() && line[0] != '#') ++rows;
  }
  CHECK(rows == 2);
}
