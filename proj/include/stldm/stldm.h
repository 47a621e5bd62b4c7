#ifndef STLDM_STLDM_H
#define STLDM_STLDM_H

#include <stddef.h>

#if defined(_WIN32)
#  if defined(STLDM_BUILDING)
#    define STLDM_API __declspec(dllexport)
#  else
#    define STLDM_API __declspec(dllimport)
#  endif
#else
#  define STLDM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum stldm_status {
    STLDM_OK = 0,
    STLDM_ERR_CONFIG = 1,
    STLDM_ERR_SHAPE = 2,
    STLDM_ERR_DIMENSION = 3,
    STLDM_ERR_CONSTRAINT = 4,
    STLDM_ERR_UNSUPPORTED = 5,
    STLDM_ERR_VOCABULARY = 6,
    STLDM_ERR_PLACEMENT = 7,
    STLDM_ERR_GUIDANCE_EMPTY = 8,
    STLDM_ERR_DATA = 9,
    STLDM_ERR_IO = 10,
    STLDM_ERR_NUMERIC = 11,
    STLDM_ERR_INTERNAL = 12
} stldm_status;

typedef struct stldm_config stldm_config;

/* Message of the last failed call on this thread; empty after success. */
STLDM_API const char* stldm_last_error(void);
STLDM_API const char* stldm_status_name(stldm_status status);
/* 0 success, 1 usage/config, 2 data, 3 numeric failure. */
STLDM_API int stldm_exit_code(stldm_status status);

STLDM_API stldm_status stldm_config_create(stldm_config** out);
STLDM_API void stldm_config_destroy(stldm_config* config);
/* Applies a key = value file on top of the current values. */
STLDM_API stldm_status stldm_config_load(stldm_config* config, const char* path);
STLDM_API stldm_status stldm_config_set(stldm_config* config, const char* key, const char* value);
/* Copies the value (NUL-terminated) into buf; *needed gets the full length + 1. */
STLDM_API stldm_status stldm_config_get(const stldm_config* config, const char* key, char* buf, size_t len,
                                        size_t* needed);

typedef void (*stldm_epoch_fn)(size_t epoch, double loss, void* user);

typedef struct stldm_run_summary {
    size_t guide_height;
    size_t guide_width;
    size_t image_height;
    size_t image_width;
    size_t guided_steps;
    double final_energy;
    double final_in_mask;
} stldm_run_summary;

typedef struct stldm_eval_summary {
    size_t scenes;
    double mean_iou;
    double mean_size;
    double mean_dist;
} stldm_eval_summary;

STLDM_API stldm_status stldm_gen_data(const stldm_config* config, size_t* scenes_written);
STLDM_API stldm_status stldm_train(const stldm_config* config, stldm_epoch_fn on_epoch, void* user);
STLDM_API stldm_status stldm_run(const stldm_config* config, stldm_run_summary* summary);
STLDM_API stldm_status stldm_eval(const stldm_config* config, stldm_eval_summary* summary);
STLDM_API stldm_status stldm_dump_attention(const stldm_config* config, size_t* files_written);

#ifdef __cplusplus
}
#endif

#endif
