/* convrec: convolutional autoencoder recommender, C API.
 *
 * All functions return CVR_OK on success; on failure they return an error
 * code matching the CLI exit-code convention and leave a message retrievable
 * through cvr_last_error() (thread-local). Output handles are owned by the
 * caller and released with the matching *_free function.
 */
#ifndef CONVREC_H_
#define CONVREC_H_

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cvr_status {
  CVR_OK = 0,
  CVR_ERR_USAGE = 1,
  CVR_ERR_DATA = 2,
  CVR_ERR_NUMERIC = 3
} cvr_status;

typedef struct cvr_dataset cvr_dataset;
typedef struct cvr_model cvr_model;

const char* cvr_last_error(void);

/* ---- datasets ---- */

/* Loads a delimited rating file (tab, comma or "::"). `scale` may be NULL to
 * derive the rating scale from the file's distinct values. */
cvr_status cvr_dataset_load(const char* path, const double* scale, int32_t scale_len,
                            cvr_dataset** out);

cvr_status cvr_dataset_dims(const cvr_dataset* data, int64_t* users, int64_t* items,
                            int64_t* observations, int32_t* ratings);

/* Seeded shuffle split into three disjoint parts covering the input. */
cvr_status cvr_dataset_split(const cvr_dataset* data, double train_fraction,
                             double validation_fraction, double test_fraction, uint64_t seed,
                             cvr_dataset** train, cvr_dataset** validation, cvr_dataset** test);

/* Split manifests (delimited text) replay exactly: indices, scale and the
 * external-ID maps round-trip byte-for-byte. */
cvr_status cvr_split_save(const cvr_dataset* train, const cvr_dataset* validation,
                          const cvr_dataset* test, const char* path);
cvr_status cvr_split_load(const char* path, cvr_dataset** train, cvr_dataset** validation,
                          cvr_dataset** test);
cvr_status cvr_dataset_save(const cvr_dataset* data, const char* path, const char* part_tag);

void cvr_dataset_free(cvr_dataset* data);

/* ---- training ---- */

/* `config` is newline-separated key=value text (unknown keys are rejected):
 *   learning_rate, batch_size, epoch_block, max_blocks, stop_metric
 *   (validation_loss|rmse|recall50), seed, depth, bottleneck, conv_width,
 *   encoder_conv_width, weight_decay, with_bias.
 * When out_dir is non-NULL, checkpoints/block-NNN.ckpt and history.tsv are
 * written under it (directories are created). */
cvr_status cvr_train(const cvr_dataset* train, const cvr_dataset* validation, const char* config,
                     const char* out_dir, cvr_model** out);

/* Loads every checkpoints/block-*.ckpt under a training output directory. */
cvr_status cvr_model_load(const char* run_dir, cvr_model** out);
cvr_status cvr_model_checkpoint_count(const cvr_model* model, int32_t* count);
void cvr_model_free(cvr_model* model);

/* ---- prediction and evaluation ---- */

/* Checkpoint-averaged distributional record for one (user, item) pair,
 * addressed by external IDs. `probabilities` needs k+1 slots, `conditional`
 * k slots. `interaction_quantile` is the fraction of items whose interaction
 * probability does not exceed this item's. The serendipity flag is set when
 * the item sits below the user's median interaction probability but above
 * the median predicted rating (over non-training items). Any output pointer
 * may be NULL. */
cvr_status cvr_predict(const cvr_model* model, const cvr_dataset* train, const char* user_id,
                       const char* item_id, double* probabilities, double* conditional,
                       double* predicted_rating, double* interaction_probability,
                       double* interaction_quantile, int32_t* serendipity_flag);

/* RMSE plus Recall@K for each requested K (recalls_out needs one slot per K).
 * A metric report is written to report_path when non-NULL. */
cvr_status cvr_evaluate(const cvr_model* model, const cvr_dataset* train, const cvr_dataset* test,
                        const int32_t* recall_ks, int32_t recall_k_count, int32_t threads,
                        const char* report_path, double* rmse_out, double* recalls_out);

/* Per-user blended-ranking weights tuned on validation recall@50; writes the
 * (lambda, count) density table. */
cvr_status cvr_lambda_density(const cvr_model* model, const cvr_dataset* train,
                              const cvr_dataset* validation, const char* out_path);

/* ---- theory tooling ---- */

/* Measures chi, the distances to initialization and the score cap from the
 * final checkpoint, evaluates the bound formulas, writes a report. */
cvr_status cvr_bounds(const cvr_model* model, const cvr_dataset* train, int64_t sample_count,
                      double delta, const char* report_path);

/* Central-difference gradient verification on a random model; writes the
 * largest relative error over all parameters. */
cvr_status cvr_gradcheck(int64_t users, int64_t items, int32_t ratings, int32_t bottleneck,
                         int32_t depth, int32_t conv_width, uint64_t seed,
                         double* max_relative_error);

/* Distribution-recovery experiment on realizable synthetic data. `config`
 * keys: m, n, rank, k, noiseless, weight_scale, sample_counts (comma list),
 * seeds (comma list), learning_rate, batch_size, epoch_block, max_blocks,
 * depth, bottleneck, conv_width. Writes the per-N table to out_path. */
cvr_status cvr_synth_tv(const char* config, const char* out_path);

#ifdef __cplusplus
}
#endif

#endif /* CONVREC_H_ */
