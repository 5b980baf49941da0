#ifndef SOAGUARD_H
#define SOAGUARD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_ARGUMENT = 1,
  SG_STATUS_INVALID_UTF8 = 2,
  SG_STATUS_CONFIG = 3,
  SG_STATUS_AUTH_FAILED = 4,
  SG_STATUS_BANNED = 5,
  SG_STATUS_UNAUTHORIZED = 6,
  SG_STATUS_ADMIN_FAILED = 7,
  SG_STATUS_IO = 8,
  SG_STATUS_INVALID_ARGUMENT = 9,
  SG_STATUS_PANIC = 99,
} SgStatus;

/**
 * Opaque gateway handle.
 */
typedef struct SgGateway SgGateway;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call into this library from the same thread.
 */
const char *sg_last_error(void);

/**
 * Library version as a static string.
 */
const char *sg_version(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void sg_string_free(char *s);

/**
 * Writes a fresh deployment (keys, credentials, rules, config) into
 * `dir` and returns the config path in `*out_config_path`.
 * `admin_token` may be NULL for a random token.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings; `out_config_path`
 * must be writable.
 */
enum SgStatus sg_provision(const char *dir, const char *admin_token, char **out_config_path);

/**
 * Opens a gateway from a config file.
 *
 * # Safety
 * `config_path` must be a valid string and `out` writable.
 */
enum SgStatus sg_gateway_open(const char *config_path, uint64_t now_s, struct SgGateway **out);

/**
 * Releases a gateway. NULL is ignored.
 *
 * # Safety
 * `gw` must come from `sg_gateway_open` and not be used afterwards.
 */
void sg_gateway_free(struct SgGateway *gw);

/**
 * Checks credentials and returns a certificate token. `source_ip` is an
 * IPv4 address in host byte order.
 *
 * # Safety
 * Pointers must be valid; `out_token` must be writable.
 */
enum SgStatus sg_gateway_authenticate(const struct SgGateway *gw,
                                      const char *client_id,
                                      const char *password,
                                      uint32_t source_ip,
                                      uint64_t now_s,
                                      char **out_token);

/**
 * Runs one encoded request envelope through the pipeline and returns
 * the response as JSON. A denied or failed request still yields
 * `SG_STATUS_OK`; inspect the JSON `status` field.
 *
 * # Safety
 * `body` must point to `len` readable bytes; `out_json` must be writable.
 */
enum SgStatus sg_gateway_handle(const struct SgGateway *gw,
                                const uint8_t *body,
                                size_t len,
                                uint32_t source_ip,
                                uint16_t source_port,
                                uint64_t now_us,
                                char **out_json);

/**
 * Runs an admin verb (`status`, `restore-link`, `reload-rules`,
 * `revoke`, `reset`). `body` may be NULL.
 *
 * # Safety
 * String pointers must be valid; `out` must be writable.
 */
enum SgStatus sg_gateway_admin(const struct SgGateway *gw,
                               const char *verb,
                               const char *token,
                               const char *body,
                               uint64_t now_s,
                               char **out);

/**
 * Builds a request envelope with a fresh random nonce. `cert_token` may
 * be NULL for an unauthenticated request. The envelope is text and can
 * be passed to `sg_gateway_handle` with `strlen` as its length.
 *
 * # Safety
 * String pointers must be valid; `out_envelope` must be writable.
 */
enum SgStatus sg_encode_request(const char *client_id,
                                const char *service,
                                const char *action,
                                const char *payload,
                                const char *cert_token,
                                uint32_t source_ip,
                                uint64_t timestamp_s,
                                char **out_envelope);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOAGUARD_H */
