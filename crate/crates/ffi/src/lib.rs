// Copyright 2026 The imgforge Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! C ABI for imgforge.
//!
//! Every function returns an [`ImgforgeStatus`]. On anything but
//! `IMGFORGE_STATUS_OK`, [`imgforge_last_error`] describes the failure.
//! Objects are opaque handles released with their `_free` function;
//! strings returned to the caller are released with [`imgforge_string_free`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use imgforge::executor::{execute, render_log_lines, DryRunExecutor, ExecuteOptions, Executor};
use imgforge::image::{parse_size, read_partition_table};
use imgforge::parser::{parse_pifile, parse_str, Pifile};
use imgforge::plan::{build_plan, ExecutionPlan, PlanDefaults};
use imgforge::source::{HostProbe, ResolvedSource};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImgforgeStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Plan = 4,
    Image = 5,
    Io = 6,
    Execution = 7,
    Panic = 99,
}

/// A partition table slot. `type_code` 0 means the slot is empty.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ImgforgePartition {
    pub index: u8,
    pub bootable: bool,
    pub type_code: u8,
    pub lba_start: u32,
    pub lba_size: u32,
}

/// A parsed Pifile.
pub struct ImgforgePifile(Pifile);

/// A validated execution plan.
pub struct ImgforgePlan(ExecutionPlan);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

type Failure = (ImgforgeStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ImgforgeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ImgforgeStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ImgforgeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((ImgforgeStatus::NullArgument, format!("`{what}` is NULL")));
    }
    // SAFETY: the caller passes a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        (
            ImgforgeStatus::InvalidUtf8,
            format!("`{what}` is not UTF-8"),
        )
    })
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err((ImgforgeStatus::NullArgument, format!("`{what}` is NULL")))
    } else {
        Ok(())
    }
}

fn process_env() -> HashMap<String, String> {
    std::env::vars().collect()
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn imgforge_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Parses a size such as `100M` into bytes.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imgforge_parse_size(text: *const c_char, out: *mut u64) -> ImgforgeStatus {
    guard(|| {
        let text = unsafe { str_arg(text, "text") }?;
        non_null(out, "out")?;
        let size = parse_size(text).map_err(|e| (ImgforgeStatus::Parse, e.to_string()))?;
        unsafe { *out = size.0 };
        Ok(())
    })
}

/// Reads and parses the Pifile at `path`, expanding variables from the
/// process environment.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imgforge_pifile_parse(
    path: *const c_char,
    out: *mut *mut ImgforgePifile,
) -> ImgforgeStatus {
    guard(|| {
        let path = unsafe { str_arg(path, "path") }?;
        non_null(out, "out")?;
        let pifile = parse_pifile(Path::new(path), &process_env(), 0)
            .map_err(|e| (ImgforgeStatus::Parse, e.to_string()))?;
        unsafe { *out = Box::into_raw(Box::new(ImgforgePifile(pifile))) };
        Ok(())
    })
}

/// Parses Pifile text as if read from `path` (used for relative paths and
/// error messages).
///
/// # Safety
/// `text` and `path` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imgforge_pifile_parse_str(
    text: *const c_char,
    path: *const c_char,
    out: *mut *mut ImgforgePifile,
) -> ImgforgeStatus {
    guard(|| {
        let text = unsafe { str_arg(text, "text") }?;
        let path = unsafe { str_arg(path, "path") }?;
        non_null(out, "out")?;
        let pifile = parse_str(text, Path::new(path), &process_env())
            .map_err(|e| (ImgforgeStatus::Parse, e.to_string()))?;
        unsafe { *out = Box::into_raw(Box::new(ImgforgePifile(pifile))) };
        Ok(())
    })
}

/// Number of commands after includes are spliced in; 0 for NULL.
///
/// # Safety
/// `pifile` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn imgforge_pifile_command_count(pifile: *const ImgforgePifile) -> usize {
    unsafe { pifile.as_ref() }.map_or(0, |p| p.0.commands.len())
}

/// # Safety
/// `pifile` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn imgforge_pifile_free(pifile: *mut ImgforgePifile) {
    if !pifile.is_null() {
        drop(unsafe { Box::from_raw(pifile) });
    }
}

/// Builds an execution plan, checking the source against the host.
///
/// # Safety
/// `pifile` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imgforge_plan_build(
    pifile: *const ImgforgePifile,
    out: *mut *mut ImgforgePlan,
) -> ImgforgeStatus {
    guard(|| {
        non_null(pifile, "pifile")?;
        non_null(out, "out")?;
        let pifile = unsafe { &(*pifile).0 };
        let plan = build_plan(pifile, &PlanDefaults::new(&HostProbe))
            .map_err(|e| (ImgforgeStatus::Plan, e.to_string()))?;
        unsafe { *out = Box::into_raw(Box::new(ImgforgePlan(plan))) };
        Ok(())
    })
}

/// Total bytes requested by `PUMP`; 0 for NULL.
///
/// # Safety
/// `plan` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn imgforge_plan_pump_bytes(plan: *const ImgforgePlan) -> u64 {
    unsafe { plan.as_ref() }.map_or(0, |p| p.0.pump_bytes)
}

/// Records the plan with the dry-run backend and returns the action log.
/// URL sources are not fetched; the log names the URL's locator instead.
/// `guest_fstab` may be NULL. `mount_root` may be NULL for `/mnt/imgforge`.
///
/// # Safety
/// `plan` must be a live handle; string arguments must be NULL or
/// NUL-terminated; `out` must be writable. Free the result with
/// [`imgforge_string_free`].
#[no_mangle]
pub unsafe extern "C" fn imgforge_plan_dry_run(
    plan: *const ImgforgePlan,
    guest_fstab: *const c_char,
    mount_root: *const c_char,
    out: *mut *mut c_char,
) -> ImgforgeStatus {
    guard(|| {
        non_null(plan, "plan")?;
        non_null(out, "out")?;
        let plan = unsafe { &(*plan).0 };
        let mut backend = DryRunExecutor::new();
        if !guest_fstab.is_null() {
            let text = unsafe { str_arg(guest_fstab, "guest_fstab") }?;
            backend = backend.with_guest_file("/etc/fstab", text);
        }
        let root = if mount_root.is_null() {
            PathBuf::from(imgforge::cli::DRY_RUN_MOUNT_ROOT)
        } else {
            PathBuf::from(unsafe { str_arg(mount_root, "mount_root") }?)
        };
        let source = ResolvedSource {
            path: PathBuf::from(&plan.source.locator),
            fetched: None,
        };
        let result = execute(
            plan,
            &source,
            &mut backend,
            &ExecuteOptions::new(root),
            &mut |_| {},
        );
        let log = render_log_lines(backend.actions());
        let log = CString::new(log)
            .map_err(|_| (ImgforgeStatus::Execution, "log contains NUL".into()))?;
        unsafe { *out = log.into_raw() };
        result
            .map(drop)
            .map_err(|f| (ImgforgeStatus::Execution, f.to_string()))
    })
}

/// # Safety
/// `plan` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn imgforge_plan_free(plan: *mut ImgforgePlan) {
    if !plan.is_null() {
        drop(unsafe { Box::from_raw(plan) });
    }
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn imgforge_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Reads the MBR of `image` into `entries[0..4]` and `disk_id`.
///
/// # Safety
/// `image` must be NUL-terminated; `entries` must point to 4 writable
/// elements; `disk_id` must be writable.
#[no_mangle]
pub unsafe extern "C" fn imgforge_partition_table_read(
    image: *const c_char,
    entries: *mut ImgforgePartition,
    disk_id: *mut u32,
) -> ImgforgeStatus {
    guard(|| {
        let image = unsafe { str_arg(image, "image") }?;
        non_null(entries, "entries")?;
        non_null(disk_id, "disk_id")?;
        let mut file =
            File::open(image).map_err(|e| (ImgforgeStatus::Io, format!("{image}: {e}")))?;
        let table =
            read_partition_table(&mut file).map_err(|e| (ImgforgeStatus::Image, e.to_string()))?;
        let out = unsafe { std::slice::from_raw_parts_mut(entries, 4) };
        for (slot, e) in out.iter_mut().zip(table.entries.iter()) {
            *slot = ImgforgePartition {
                index: e.index,
                bootable: e.bootable,
                type_code: e.type_code,
                lba_start: e.lba_start,
                lba_size: e.lba_size,
            };
        }
        unsafe { *disk_id = table.disk_id };
        Ok(())
    })
}
