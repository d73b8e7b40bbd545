/* SPDX-License-Identifier: Apache-2.0 */

#ifndef IMGFORGE_H
#define IMGFORGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ImgforgeStatus {
  IMGFORGE_STATUS_OK = 0,
  IMGFORGE_STATUS_NULL_ARGUMENT = 1,
  IMGFORGE_STATUS_INVALID_UTF8 = 2,
  IMGFORGE_STATUS_PARSE = 3,
  IMGFORGE_STATUS_PLAN = 4,
  IMGFORGE_STATUS_IMAGE = 5,
  IMGFORGE_STATUS_IO = 6,
  IMGFORGE_STATUS_EXECUTION = 7,
  IMGFORGE_STATUS_PANIC = 99,
} ImgforgeStatus;

/**
 * A parsed Pifile.
 */
typedef struct ImgforgePifile ImgforgePifile;

/**
 * A validated execution plan.
 */
typedef struct ImgforgePlan ImgforgePlan;

/**
 * A partition table slot. `type_code` 0 means the slot is empty.
 */
typedef struct ImgforgePartition {
  uint8_t index;
  bool bootable;
  uint8_t type_code;
  uint32_t lba_start;
  uint32_t lba_size;
} ImgforgePartition;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *imgforge_last_error(void);

/**
 * Parses a size such as `100M` into bytes.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum ImgforgeStatus imgforge_parse_size(const char *text, uint64_t *out);

/**
 * Reads and parses the Pifile at `path`, expanding variables from the
 * process environment.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum ImgforgeStatus imgforge_pifile_parse(const char *path, struct ImgforgePifile **out);

/**
 * Parses Pifile text as if read from `path` (used for relative paths and
 * error messages).
 *
 * # Safety
 * `text` and `path` must be NUL-terminated strings; `out` must be writable.
 */
enum ImgforgeStatus imgforge_pifile_parse_str(const char *text,
                                              const char *path,
                                              struct ImgforgePifile **out);

/**
 * Number of commands after includes are spliced in; 0 for NULL.
 *
 * # Safety
 * `pifile` must be NULL or a live handle.
 */
size_t imgforge_pifile_command_count(const struct ImgforgePifile *pifile);

/**
 * # Safety
 * `pifile` must be NULL or a handle not yet freed.
 */
void imgforge_pifile_free(struct ImgforgePifile *pifile);

/**
 * Builds an execution plan, checking the source against the host.
 *
 * # Safety
 * `pifile` must be a live handle; `out` must be writable.
 */
enum ImgforgeStatus imgforge_plan_build(const struct ImgforgePifile *pifile,
                                        struct ImgforgePlan **out);

/**
 * Total bytes requested by `PUMP`; 0 for NULL.
 *
 * # Safety
 * `plan` must be NULL or a live handle.
 */
uint64_t imgforge_plan_pump_bytes(const struct ImgforgePlan *plan);

/**
 * Records the plan with the dry-run backend and returns the action log.
 * URL sources are not fetched; the log names the URL's locator instead.
 * `guest_fstab` may be NULL. `mount_root` may be NULL for `/mnt/imgforge`.
 *
 * # Safety
 * `plan` must be a live handle; string arguments must be NULL or
 * NUL-terminated; `out` must be writable. Free the result with
 * [`imgforge_string_free`].
 */
enum ImgforgeStatus imgforge_plan_dry_run(const struct ImgforgePlan *plan,
                                          const char *guest_fstab,
                                          const char *mount_root,
                                          char **out);

/**
 * # Safety
 * `plan` must be NULL or a handle not yet freed.
 */
void imgforge_plan_free(struct ImgforgePlan *plan);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void imgforge_string_free(char *s);

/**
 * Reads the MBR of `image` into `entries[0..4]` and `disk_id`.
 *
 * # Safety
 * `image` must be NUL-terminated; `entries` must point to 4 writable
 * elements; `disk_id` must be writable.
 */
enum ImgforgeStatus imgforge_partition_table_read(const char *image,
                                                  struct ImgforgePartition *entries,
                                                  uint32_t *disk_id);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMGFORGE_H */
