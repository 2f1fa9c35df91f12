#ifndef PROTODETECT_H
#define PROTODETECT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible function.
 */
typedef enum PdStatus {
  PD_STATUS_OK = 0,
  PD_STATUS_NULL_POINTER = 1,
  PD_STATUS_INVALID_ARGUMENT = 2,
  PD_STATUS_IO = 3,
  PD_STATUS_FORMAT = 4,
  PD_STATUS_DIMENSION_MISMATCH = 5,
  PD_STATUS_DEGENERATE_BOX = 6,
  PD_STATUS_OUT_OF_RANGE = 7,
  PD_STATUS_PANIC = 8,
  PD_STATUS_OTHER = 9,
} PdStatus;

/**
 * Detections of one `pd_detect` call, in NMS kept order.
 */
typedef struct PdDetections PdDetections;

/**
 * Feature grid of one image.
 */
typedef struct PdFeatureMap PdFeatureMap;

/**
 * Object and background prototypes with their class names.
 */
typedef struct PdPrototypeSet PdPrototypeSet;

typedef struct PdFeatureMapInfo {
  uint32_t grid_h;
  uint32_t grid_w;
  uint32_t dim;
  uint32_t patch_size;
  uint32_t image_h;
  uint32_t image_w;
} PdFeatureMapInfo;

typedef struct PdPrototypeInfo {
  uint32_t num_rows;
  uint32_t num_objects;
  uint32_t num_background;
  uint32_t dim;
  double temperature;
} PdPrototypeInfo;

/**
 * Axis-aligned box in continuous pixel coordinates, half-open.
 */
typedef struct PdBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} PdBox;

typedef struct PdDetection {
  struct PdBox bbox;
  uint32_t class_id;
  double score;
} PdDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next `pd_*` call on the same thread.
 */
const char *pd_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pd_version(void);

enum PdStatus pd_feature_map_load(const char *path, struct PdFeatureMap **out);

/**
 * Builds a feature map from `grid_h * grid_w * dim` row-major floats.
 */
enum PdStatus pd_feature_map_new(const struct PdFeatureMapInfo *info,
                                 const float *data,
                                 size_t len,
                                 struct PdFeatureMap **out);

enum PdStatus pd_feature_map_info(const struct PdFeatureMap *fm, struct PdFeatureMapInfo *out);

void pd_feature_map_free(struct PdFeatureMap *fm);

enum PdStatus pd_prototypes_load(const char *path, struct PdPrototypeSet **out);

enum PdStatus pd_prototypes_info(const struct PdPrototypeSet *p, struct PdPrototypeInfo *out);

/**
 * Label of prototype row `row` (class name or `bg_<k>`), or null when out
 * of range. Owned by the prototype set.
 */
const char *pd_prototypes_row_label(const struct PdPrototypeSet *p, uint32_t row);

void pd_prototypes_free(struct PdPrototypeSet *p);

/**
 * Box-averaged cosine similarity against every prototype row; writes
 * `num_rows` values into `scores`.
 */
enum PdStatus pd_score_box(const struct PdFeatureMap *fm,
                           const struct PdPrototypeSet *p,
                           const struct PdBox *bbox,
                           double *scores,
                           size_t scores_len);

/**
 * Classifies `num_proposals` boxes, drops background verdicts and applies
 * per-class NMS (class-agnostic when `class_agnostic_nms` is non-zero).
 * `margin_score` non-zero subtracts the best background score.
 */
enum PdStatus pd_detect(const struct PdFeatureMap *fm,
                        const struct PdPrototypeSet *p,
                        const struct PdBox *proposals,
                        size_t num_proposals,
                        double nms_iou,
                        int32_t margin_score,
                        int32_t class_agnostic_nms,
                        struct PdDetections **out);

/**
 * Number of detections; 0 for a null handle.
 */
size_t pd_detections_len(const struct PdDetections *d);

enum PdStatus pd_detections_get(const struct PdDetections *d,
                                size_t index,
                                struct PdDetection *out);

void pd_detections_free(struct PdDetections *d);

/**
 * Intersection over union; 0 when either pointer is null.
 */
double pd_iou(const struct PdBox *a, const struct PdBox *b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTODETECT_H */
