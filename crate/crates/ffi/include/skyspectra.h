#ifndef SKYSPECTRA_H
#define SKYSPECTRA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum SkyStatus {
  SKY_STATUS_OK = 0,
  SKY_STATUS_NULL_POINTER = 1,
  SKY_STATUS_INVALID_ARGUMENT = 2,
  SKY_STATUS_CONFIG = 3,
  SKY_STATUS_IO = 4,
  SKY_STATUS_FORMAT = 5,
  SKY_STATUS_MODEL_MISMATCH = 6,
  SKY_STATUS_PANIC = 7,
} SkyStatus;

typedef enum SkyAttackMode {
  SKY_ATTACK_MODE_GROUND = 0,
  SKY_ATTACK_MODE_AIRBORNE = 1,
} SkyAttackMode;

// Map generator for one scenario configuration.
typedef struct SkyGenerator SkyGenerator;

// Row-major grid of `f32`.
typedef struct SkyGrid SkyGrid;

// Trained noise predictor.
typedef struct SkyModel SkyModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *sky_last_error(void);

// Library version as a static NUL-terminated string.
const char *sky_version(void);

// Creates a generator from a TOML config file, or the defaults when `path`
// is NULL.
//
// # Safety
// `path` must be NULL or a NUL-terminated string; `out` must be writable.
enum SkyStatus sky_generator_new(const char *path, struct SkyGenerator **out);

// # Safety
// `g` must be NULL or a handle from [`sky_generator_new`], freed once.
void sky_generator_free(struct SkyGenerator *g);

// Normalized clean map for `seed`.
//
// # Safety
// `g` must be a live generator and `out` writable.
enum SkyStatus sky_generator_clean(const struct SkyGenerator *g,
                                   uint64_t seed,
                                   struct SkyGrid **out);

// Normalized attacked map and 0/1 mask for the clean map of `seed`.
// `out_mask` may be NULL.
//
// # Safety
// `g` must be a live generator and `out_attacked` writable.
enum SkyStatus sky_generator_attack(const struct SkyGenerator *g,
                                    uint64_t seed,
                                    enum SkyAttackMode mode,
                                    double p,
                                    struct SkyGrid **out_attacked,
                                    struct SkyGrid **out_mask);

// Copies `rows * cols` values into a new grid.
//
// # Safety
// `data` must point to `rows * cols` readable floats.
enum SkyStatus sky_grid_new(uintptr_t rows,
                            uintptr_t cols,
                            const float *data,
                            struct SkyGrid **out);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum SkyStatus sky_grid_read(const char *path, struct SkyGrid **out);

// # Safety
// `grid` must be live and `path` a NUL-terminated string.
enum SkyStatus sky_grid_write(const struct SkyGrid *grid, const char *path);

// Rows of `grid`, 0 for NULL.
//
// # Safety
// `grid` must be NULL or live.
uintptr_t sky_grid_rows(const struct SkyGrid *grid);

// Columns of `grid`, 0 for NULL.
//
// # Safety
// `grid` must be NULL or live.
uintptr_t sky_grid_cols(const struct SkyGrid *grid);

// Borrowed row-major values, valid while the grid lives.
//
// # Safety
// `grid` must be NULL or live.
const float *sky_grid_data(const struct SkyGrid *grid);

// # Safety
// `grid` must be NULL or a grid handle, freed once.
void sky_grid_free(struct SkyGrid *grid);

// Loads a checkpoint and checks it against the default noise schedule.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum SkyStatus sky_model_load(const char *path, struct SkyModel **out);

// # Safety
// `model` must be NULL or a model handle, freed once.
void sky_model_free(struct SkyModel *model);

// Guided multi-round reconstruction of the attacked unit grid `y`.
//
// # Safety
// `model` and `y` must be live and `out` writable.
enum SkyStatus sky_reconstruct(const struct SkyModel *model,
                               const struct SkyGrid *y,
                               uintptr_t t_star,
                               uintptr_t rounds,
                               uintptr_t lowpass_factor,
                               bool guidance_enabled,
                               uint64_t seed,
                               struct SkyGrid **out);

// SSIM of two equally sized unit grids.
//
// # Safety
// `a` and `b` must be live and `out` writable.
enum SkyStatus sky_ssim(const struct SkyGrid *a, const struct SkyGrid *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKYSPECTRA_H */
