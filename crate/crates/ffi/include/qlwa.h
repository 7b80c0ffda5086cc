#ifndef QLWA_H
#define QLWA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QlwaStatus {
  QLWA_STATUS_OK = 0,
  QLWA_STATUS_NULL_POINTER = 1,
  QLWA_STATUS_INVALID_ARGUMENT = 2,
  QLWA_STATUS_IO = 3,
  QLWA_STATUS_PARSE = 4,
  QLWA_STATUS_GRAPH = 5,
  QLWA_STATUS_QUANT = 6,
  QLWA_STATUS_DATA = 7,
  QLWA_STATUS_ANALYSIS = 8,
  QLWA_STATUS_PANIC = 9,
} QlwaStatus;

typedef struct QlwaCalibration QlwaCalibration;

typedef struct QlwaDataset QlwaDataset;

typedef struct QlwaGraph QlwaGraph;

typedef struct QlwaReport QlwaReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next `qlwa_*` call on the same thread.
 */
const char *qlwa_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qlwa_version(void);

void qlwa_string_free(char *s);

/**
 * Builds a synthetic fixture (`mlp_small`, `conv_small`, `resnet_tiny`,
 * `outlier_resnet_tiny`; dashes are accepted).
 */
enum QlwaStatus qlwa_graph_gen_fixture(const char *arch,
                                       uint64_t seed,
                                       struct QlwaGraph **out_graph);

/**
 * Loads `model.json` (or the directory holding it).
 */
enum QlwaStatus qlwa_graph_load(const char *path, struct QlwaGraph **out_graph);

enum QlwaStatus qlwa_graph_save(const struct QlwaGraph *graph, const char *path);

/**
 * New graph with every batch norm folded into its conv/dense.
 */
enum QlwaStatus qlwa_graph_fold(const struct QlwaGraph *graph, struct QlwaGraph **out_graph);

enum QlwaStatus qlwa_graph_compute_layer_count(const struct QlwaGraph *graph, size_t *out_count);

/**
 * 16-hex-digit content fingerprint.
 */
enum QlwaStatus qlwa_graph_fingerprint(const struct QlwaGraph *graph, char **out_str);

/**
 * Full-precision forward pass of one sample. `input_len` must equal the
 * element count of the graph's input; `output` receives up to
 * `output_cap` values and `out_len` the full output length.
 */
enum QlwaStatus qlwa_graph_forward(const struct QlwaGraph *graph,
                                   const float *input,
                                   size_t input_len,
                                   float *output,
                                   size_t output_cap,
                                   size_t *out_len);

void qlwa_graph_free(struct QlwaGraph *graph);

/**
 * Uniform samples labelled by the graph's own argmax.
 */
enum QlwaStatus qlwa_dataset_generate(const struct QlwaGraph *graph,
                                      size_t n,
                                      uint64_t seed,
                                      struct QlwaDataset **out_dataset);

enum QlwaStatus qlwa_dataset_load(const char *dir, struct QlwaDataset **out_dataset);

enum QlwaStatus qlwa_dataset_save(const struct QlwaDataset *dataset, const char *dir);

enum QlwaStatus qlwa_dataset_len(const struct QlwaDataset *dataset, size_t *out_len);

void qlwa_dataset_free(struct QlwaDataset *dataset);

/**
 * Activation ranges over the first `n_samples` samples.
 */
enum QlwaStatus qlwa_calibrate(const struct QlwaGraph *graph,
                               const struct QlwaDataset *dataset,
                               size_t n_samples,
                               struct QlwaCalibration **out_calib);

void qlwa_calibration_free(struct QlwaCalibration *calib);

/**
 * Per-layer sensitivity at each of `weight_bits[0..n_bits]`, min/max
 * weight ranges, per-tensor granularity. The graph must be folded.
 */
enum QlwaStatus qlwa_sweep(const struct QlwaGraph *graph,
                           const struct QlwaDataset *dataset,
                           const struct QlwaCalibration *calib,
                           const uint32_t *weight_bits,
                           size_t n_bits,
                           uint32_t act_bits,
                           struct QlwaReport **out_report);

enum QlwaStatus qlwa_report_to_json(const struct QlwaReport *report, char **out_json);

/**
 * Degradation of one layer at one bit-width from a sweep.
 */
enum QlwaStatus qlwa_report_degradation(const struct QlwaReport *report,
                                        const char *layer_id,
                                        uint32_t weight_bits,
                                        double *out_degradation);

void qlwa_report_free(struct QlwaReport *report);

/**
 * Naive / global / local clipping comparison as JSON. `method` is
 * `minmax` or `mse_grid`.
 */
enum QlwaStatus qlwa_compare_fixes(const struct QlwaGraph *graph,
                                   const struct QlwaDataset *dataset,
                                   const struct QlwaCalibration *calib,
                                   const char *target_layer,
                                   uint32_t weight_bits,
                                   uint32_t act_bits,
                                   const char *method,
                                   char **out_json);

/**
 * Weight outlier summary of one layer as JSON.
 */
enum QlwaStatus qlwa_diagnose(const struct QlwaGraph *graph,
                              const char *layer_id,
                              double k_sigma,
                              char **out_json);

/**
 * Fake-quantizes `data[0..len]` with the per-tensor min/max range,
 * writing into `out` (may alias `data`).
 */
enum QlwaStatus qlwa_quantize_dequantize(const float *data,
                                         size_t len,
                                         uint32_t bits,
                                         float *out_values);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QLWA_H */
