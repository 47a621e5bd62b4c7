#include "stldm/stldm.h"

#include <exception>
#include <new>
#include <string>

#include "app/pipeline.hpp"
#include "data/image_io.hpp"
#include "common/error.hpp"

struct stldm_config {
    stldm::RunConfig value;
};

namespace {

thread_local std::string g_last_error;

stldm_status status_of(stldm::ErrorKind kind) {
    using stldm::ErrorKind;
    switch (kind) {
        case ErrorKind::Config: return STLDM_ERR_CONFIG;
        case ErrorKind::Shape: return STLDM_ERR_SHAPE;
        case ErrorKind::Dimension: return STLDM_ERR_DIMENSION;
        case ErrorKind::Constraint: return STLDM_ERR_CONSTRAINT;
        case ErrorKind::UnsupportedOp: return STLDM_ERR_UNSUPPORTED;
        case ErrorKind::Vocabulary: return STLDM_ERR_VOCABULARY;
        case ErrorKind::Placement: return STLDM_ERR_PLACEMENT;
        case ErrorKind::GuidanceEmpty: return STLDM_ERR_GUIDANCE_EMPTY;
        case ErrorKind::Data: return STLDM_ERR_DATA;
        case ErrorKind::Io: return STLDM_ERR_IO;
        case ErrorKind::Numeric: return STLDM_ERR_NUMERIC;
    }
    return STLDM_ERR_INTERNAL;
}

template <class F>
stldm_status guarded(F&& body) {
    try {
        body();
        g_last_error.clear();
        return STLDM_OK;
    } catch (const stldm::Error& e) {
        g_last_error = e.what();
        return status_of(e.kind());
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
        return STLDM_ERR_INTERNAL;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return STLDM_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown failure";
        return STLDM_ERR_INTERNAL;
    }
}

stldm_status null_argument(const char* what) {
    g_last_error = std::string("null argument: ") + what;
    return STLDM_ERR_CONFIG;
}

}  // namespace

extern "C" {

const char* stldm_last_error(void) { return g_last_error.c_str(); }

const char* stldm_status_name(stldm_status status) {
    switch (status) {
        case STLDM_OK: return "ok";
        case STLDM_ERR_CONFIG: return "config error";
        case STLDM_ERR_SHAPE: return "shape error";
        case STLDM_ERR_DIMENSION: return "dimension error";
        case STLDM_ERR_CONSTRAINT: return "constraint error";
        case STLDM_ERR_UNSUPPORTED: return "unsupported operation";
        case STLDM_ERR_VOCABULARY: return "vocabulary error";
        case STLDM_ERR_PLACEMENT: return "placement error";
        case STLDM_ERR_GUIDANCE_EMPTY: return "empty guidance";
        case STLDM_ERR_DATA: return "data error";
        case STLDM_ERR_IO: return "i/o error";
        case STLDM_ERR_NUMERIC: return "numeric failure";
        case STLDM_ERR_INTERNAL: return "internal error";
    }
    return "unknown status";
}

int stldm_exit_code(stldm_status status) {
    switch (status) {
        case STLDM_OK: return 0;
        case STLDM_ERR_CONFIG:
        case STLDM_ERR_SHAPE:
        case STLDM_ERR_DIMENSION:
        case STLDM_ERR_CONSTRAINT:
        case STLDM_ERR_UNSUPPORTED: return 1;
        case STLDM_ERR_NUMERIC: return 3;
        default: return 2;
    }
}

stldm_status stldm_config_create(stldm_config** out) {
    if (!out) return null_argument("out");
    return guarded([&] { *out = new stldm_config{}; });
}

void stldm_config_destroy(stldm_config* config) { delete config; }

stldm_status stldm_config_load(stldm_config* config, const char* path) {
    if (!config || !path) return null_argument("config/path");
    return guarded([&] {
        std::string text;
        try {
            text = stldm::read_file(path);
        } catch (const stldm::Error& e) {
            stldm::fail(stldm::ErrorKind::Config, std::string("config: ") + e.what());
        }
        stldm::RunConfig next = config->value;
        stldm::apply_config_text(next, text, path);
        config->value = next;
    });
}

stldm_status stldm_config_set(stldm_config* config, const char* key, const char* value) {
    if (!config || !key || !value) return null_argument("config/key/value");
    return guarded([&] { stldm::set_config_value(config->value, key, value); });
}

stldm_status stldm_config_get(const stldm_config* config, const char* key, char* buf, size_t len, size_t* needed) {
    if (!config || !key) return null_argument("config/key");
    return guarded([&] {
        const std::string v = stldm::get_config_value(config->value, key);
        if (needed) *needed = v.size() + 1;
        if (buf && len > 0) {
            const size_t n = v.size() < len - 1 ? v.size() : len - 1;
            v.copy(buf, n);
            buf[n] = '\0';
        }
    });
}

stldm_status stldm_gen_data(const stldm_config* config, size_t* scenes_written) {
    if (!config) return null_argument("config");
    return guarded([&] {
        const size_t n = stldm::cmd_gen_data(config->value);
        if (scenes_written) *scenes_written = n;
    });
}

stldm_status stldm_train(const stldm_config* config, stldm_epoch_fn on_epoch, void* user) {
    if (!config) return null_argument("config");
    return guarded([&] {
        stldm::cmd_train(config->value, [&](size_t epoch, double loss) {
            if (on_epoch) on_epoch(epoch, loss, user);
        });
    });
}

stldm_status stldm_run(const stldm_config* config, stldm_run_summary* summary) {
    if (!config) return null_argument("config");
    return guarded([&] {
        const auto s = stldm::cmd_run(config->value);
        if (summary) {
            *summary = stldm_run_summary{s.guide_height, s.guide_width, s.image_height, s.image_width,
                                         s.guided_steps, s.final_energy, s.final_in_mask};
        }
    });
}

stldm_status stldm_eval(const stldm_config* config, stldm_eval_summary* summary) {
    if (!config) return null_argument("config");
    return guarded([&] {
        const auto r = stldm::cmd_eval(config->value);
        if (summary) *summary = stldm_eval_summary{r.rows.size(), r.mean_iou, r.mean_size, r.mean_dist};
    });
}

stldm_status stldm_dump_attention(const stldm_config* config, size_t* files_written) {
    if (!config) return null_argument("config");
    return guarded([&] {
        const size_t n = stldm::cmd_dump_attention(config->value);
        if (files_written) *files_written = n;
    });
}

}  // extern "C"
