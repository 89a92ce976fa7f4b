#ifndef LINERWKV_H
#define LINERWKV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LrwStatus {
  LRW_STATUS_OK = 0,
  LRW_STATUS_NULL_POINTER = 1,
  LRW_STATUS_INVALID_ARGUMENT = 2,
  LRW_STATUS_IO = 3,
  LRW_STATUS_FORMAT = 4,
  LRW_STATUS_CHECKSUM = 5,
  LRW_STATUS_WEIGHTS_MISMATCH = 6,
  LRW_STATUS_NUMERIC = 7,
  /**
   * The decoder has produced every line.
   */
  LRW_STATUS_FINISHED = 8,
  LRW_STATUS_PANIC = 9,
} LrwStatus;

typedef struct LrwDecoder LrwDecoder;

typedef struct LrwEncoder LrwEncoder;

/**
 * Loaded weights. May be shared by any number of encoders and decoders
 * and freed before them.
 */
typedef struct LrwModel LrwModel;

/**
 * Byte buffer allocated by the library; release with [`lrw_buffer_free`].
 */
typedef struct LrwBuffer {
  uint8_t *data;
  size_t len;
} LrwBuffer;

typedef struct LrwDims {
  size_t nx;
  size_t ny;
  size_t nz;
} LrwDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *lrw_last_error(void);

/**
 * Static, NUL-terminated name of a status code.
 */
const char *lrw_status_name(enum LrwStatus status);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum LrwStatus lrw_model_load(const char *path, struct LrwModel **out);

/**
 * Load weights from an in-memory weight file image.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be writable.
 */
enum LrwStatus lrw_model_from_bytes(const uint8_t *data, size_t len, struct LrwModel **out);

/**
 * Checksum of the weight file, as recorded in streams.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uint64_t lrw_model_checksum(const struct LrwModel *model);

/**
 * # Safety
 * `model` must come from `lrw_model_load`/`lrw_model_from_bytes` and not be
 * used afterwards. Null is ignored.
 */
void lrw_model_free(struct LrwModel *model);

/**
 * # Safety
 * `buf` must come from this library; it is reset to empty.
 */
void lrw_buffer_free(struct LrwBuffer *buf);

/**
 * Compress a whole cube in one call. `threads = 0` uses every core.
 *
 * # Safety
 * `samples` must hold `nx * ny * nz` values and `out` be writable.
 */
enum LrwStatus lrw_compress(const struct LrwModel *model,
                            const uint16_t *samples,
                            struct LrwDims dims_in,
                            uint32_t max_error,
                            size_t threads,
                            struct LrwBuffer *out);

/**
 * Dimensions recorded in a stream header.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be writable.
 */
enum LrwStatus lrw_stream_dims(const uint8_t *data, size_t len, struct LrwDims *out);

/**
 * Decompress a whole stream into `samples`, which must hold exactly the
 * number of samples reported by [`lrw_stream_dims`].
 *
 * # Safety
 * `data` must point to `len` readable bytes, `samples` to `samples_len`
 * writable values.
 */
enum LrwStatus lrw_decompress(const struct LrwModel *model,
                              const uint8_t *data,
                              size_t len,
                              size_t threads,
                              uint16_t *samples,
                              size_t samples_len);

/**
 * Start a line-by-line encoder.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum LrwStatus lrw_encoder_new(const struct LrwModel *model,
                               struct LrwDims dims_in,
                               uint32_t max_error,
                               struct LrwEncoder **out);

/**
 * Encode the next line, `nx * nz` samples in `(x, z)` order.
 *
 * # Safety
 * `enc` must be a live encoder and `line` hold `len` values.
 */
enum LrwStatus lrw_encoder_push_line(struct LrwEncoder *enc, const uint16_t *line, size_t len);

/**
 * Finish the stream and release the encoder, whatever the outcome.
 *
 * # Safety
 * `enc` must be a live encoder; it is invalid after this call.
 */
enum LrwStatus lrw_encoder_finish(struct LrwEncoder *enc, struct LrwBuffer *out);

/**
 * # Safety
 * `enc` must be a live encoder or null.
 */
void lrw_encoder_free(struct LrwEncoder *enc);

/**
 * Start a line-by-line decoder. The stream bytes are copied.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be writable.
 */
enum LrwStatus lrw_decoder_new(const struct LrwModel *model,
                               const uint8_t *data,
                               size_t len,
                               struct LrwDecoder **out);

/**
 * # Safety
 * `dec` must be a live decoder and `out` writable.
 */
enum LrwStatus lrw_decoder_dims(const struct LrwDecoder *dec, struct LrwDims *out);

/**
 * Reconstruct the next line into `line` (`nx * nz` values, `(x, z)` order).
 * Returns `FINISHED` once every line has been produced.
 *
 * # Safety
 * `dec` must be a live decoder and `line` hold `len` writable values.
 */
enum LrwStatus lrw_decoder_next_line(struct LrwDecoder *dec, uint16_t *line, size_t len);

/**
 * Verify that the stream was consumed exactly and its checksum matches,
 * then release the decoder.
 *
 * # Safety
 * `dec` must be a live decoder; it is invalid after this call.
 */
enum LrwStatus lrw_decoder_finish(struct LrwDecoder *dec);

/**
 * # Safety
 * `dec` must be a live decoder or null.
 */
void lrw_decoder_free(struct LrwDecoder *dec);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LINERWKV_H */
