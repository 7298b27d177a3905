#ifndef METAVIM_H
#define METAVIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Width of one observation: 12 lane occupancies then a phase one-hot.
#define MV_OBS_DIM 16

#define MV_NUM_PHASES 4

typedef enum MvStatus {
  MV_STATUS_OK = 0,
  MV_STATUS_NULL_POINTER = 1,
  // Malformed roadnet, flow or config input.
  MV_STATUS_CONFIG = 2,
  // NaN or infinity in a computation.
  MV_STATUS_NUMERIC = 3,
  MV_STATUS_INVALID_ARGUMENT = 4,
  // Travel time requested before any vehicle entered.
  MV_STATUS_NO_VEHICLES = 5,
  MV_STATUS_CHECKPOINT = 6,
  MV_STATUS_IO = 7,
  // A Rust panic was caught at the boundary.
  MV_STATUS_PANIC = 8,
} MvStatus;

typedef enum MvProfile {
  MV_PROFILE_MIXED_LOW = 0,
  MV_PROFILE_MIXED_HIGH = 1,
  // No arrivals at all.
  MV_PROFILE_EMPTY = 2,
} MvProfile;

// Trained policy handle with its per-episode beliefs.
typedef struct MvPolicy MvPolicy;

// Simulator handle.
typedef struct MvSim MvSim;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *mv_last_error_message(void);

// Static name of a status code.
const char *mv_status_name(enum MvStatus status);

// Grid network of `rows` x `cols` intersections with a synthetic one-hour
// demand profile.
//
// # Safety
// `out` must be a valid pointer to write the handle into.
enum MvStatus mv_sim_new_grid(size_t rows,
                              size_t cols,
                              enum MvProfile profile,
                              uint64_t seed,
                              struct MvSim **out);

// Network and demand from JSON documents (roadnet and flow formats).
//
// # Safety
// `roadnet_json` and `flow_json` must be NUL-terminated strings; `out`
// must be a valid pointer.
enum MvStatus mv_sim_new_from_json(const char *roadnet_json,
                                   const char *flow_json,
                                   uint32_t horizon_s,
                                   uint64_t seed,
                                   struct MvSim **out);

// # Safety
// `sim` must come from an `mv_sim_new_*` call and not be used afterwards.
void mv_sim_free(struct MvSim *sim);

// # Safety
// `sim` must be a live handle and `out` a valid pointer.
enum MvStatus mv_sim_num_intersections(const struct MvSim *sim, size_t *out);

// Simulation clock in seconds.
//
// # Safety
// `sim` must be a live handle and `out` a valid pointer.
enum MvStatus mv_sim_clock(const struct MvSim *sim, uint32_t *out);

// Hold phase `actions[i]` at intersection `i` for `dt_s` seconds.
//
// # Safety
// `sim` must be a live handle; `actions` must point to `n` values.
enum MvStatus mv_sim_step(struct MvSim *sim, const uint32_t *actions, size_t n, uint32_t dt_s);

// Normalized observation of intersection `id` into `out[0..MV_OBS_DIM]`.
//
// # Safety
// `sim` must be a live handle; `out` must have room for `len` doubles.
enum MvStatus mv_sim_observe(const struct MvSim *sim, size_t id, double *out, size_t len);

// Stopped vehicles on the incoming lanes of intersection `id`.
//
// # Safety
// `sim` must be a live handle and `out` a valid pointer.
enum MvStatus mv_sim_queue_length(const struct MvSim *sim, size_t id, uint32_t *out);

// Vehicle counters; any output pointer may be NULL.
//
// # Safety
// `sim` must be a live handle; non-NULL outputs must be valid pointers.
enum MvStatus mv_sim_counts(const struct MvSim *sim,
                            uint64_t *entered,
                            uint64_t *exited,
                            uint64_t *on_network);

// Mean travel time in seconds; unfinished vehicles count up to the clock.
//
// # Safety
// `sim` must be a live handle and `out` a valid pointer.
enum MvStatus mv_sim_average_travel_time(const struct MvSim *sim, double *out);

// Max-pressure phase for intersection `id` (lowest index on ties).
//
// # Safety
// `sim` must be a live handle and `out` a valid pointer.
enum MvStatus mv_maxpressure_phase(const struct MvSim *sim, size_t id, uint32_t *out);

// Load a trained checkpoint for greedy deployment. `config_json` may be
// NULL for the default experiment config (reward weight and scaling).
//
// # Safety
// `path` must be a NUL-terminated string, `config_json` NULL or one, and
// `out` a valid pointer.
enum MvStatus mv_policy_load(const char *path, const char *config_json, struct MvPolicy **out);

// # Safety
// `policy` must come from `mv_policy_load` and not be used afterwards.
void mv_policy_free(struct MvPolicy *policy);

// Start a new episode: beliefs return to the prior.
//
// # Safety
// `policy` must be a live handle.
enum MvStatus mv_policy_reset(struct MvPolicy *policy);

// Choose phases for every intersection of `sim`, advance it by `dt_s`
// seconds and write the phases to `actions_out` (NULL to skip).
//
// # Safety
// `policy` and `sim` must be live handles; `actions_out` NULL or room for
// `n` values.
enum MvStatus mv_policy_step(struct MvPolicy *policy,
                             struct MvSim *sim,
                             uint32_t dt_s,
                             uint32_t *actions_out,
                             size_t n);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METAVIM_H */
