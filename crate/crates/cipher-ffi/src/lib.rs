//! C ABI for the cipher synthesis library.
//!
//! Conventions: every fallible function returns an int32 status code
//! (`CIPHER_OK` on success) and records a message for the most recent
//! failure on the current thread, readable via [`cipher_last_error`].
//! String outputs fill a caller-supplied buffer and report the size
//! they need (including the NUL) through a `written` out-parameter;
//! pass a null buffer to query the size first. Synthesis results live
//! behind an opaque handle that the caller frees exactly once.
//!
//! The hand-maintained header lives at include/cipher.h; a test keeps
//! the two in sync.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use cipher_core::cli::synthesize_from_config;
use cipher_core::error::CipherError;
use cipher_core::io::{microdata_to_string, schema_from_str};
use cipher_core::tables::{cell_count, k_subsets, TableSelection};

pub const CIPHER_OK: i32 = 0;
/// Invalid input: malformed JSON, unknown attributes, bad parameters.
pub const CIPHER_ERR_INVALID: i32 = 2;
/// Numerical failure inside the pipeline.
pub const CIPHER_ERR_NUMERICAL: i32 = 3;
/// API misuse: null pointer where one is not allowed, bad index.
pub const CIPHER_ERR_USAGE: i32 = 4;
/// The caller's buffer is too small; retry with the reported size.
pub const CIPHER_ERR_BUFFER: i32 = 5;
/// A panic was caught at the boundary.
pub const CIPHER_ERR_PANIC: i32 = 6;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<Vec<u8>>) {
    let stored = CString::new(message).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = stored);
}

fn fail(code: i32, message: impl Into<Vec<u8>>) -> i32 {
    set_error(message);
    code
}

fn fail_with(err: &CipherError) -> i32 {
    fail(err.exit_code(), err.to_string())
}

/// Synthesis results: rendered replicate CSVs plus the report JSON.
pub struct CipherSynthesis {
    replicates: Vec<String>,
    report: String,
}

/// Reads a NUL-terminated UTF-8 argument.
unsafe fn utf8_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, i32> {
    if ptr.is_null() {
        return Err(fail(CIPHER_ERR_USAGE, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(CIPHER_ERR_INVALID, format!("{what} is not valid UTF-8")))
}

/// Copies `text` plus a NUL into the caller's buffer, reporting the
/// needed size through `written`. A null `buf` only sizes.
unsafe fn fill_buffer(text: &str, buf: *mut c_char, len: usize, written: *mut usize) -> i32 {
    if written.is_null() {
        return fail(CIPHER_ERR_USAGE, "written is null");
    }
    let needed = text.len() + 1;
    *written = needed;
    if buf.is_null() {
        return CIPHER_OK;
    }
    if len < needed {
        return fail(CIPHER_ERR_BUFFER, format!("buffer holds {len} bytes, need {needed}"));
    }
    std::ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
    *buf.add(text.len()) = 0;
    CIPHER_OK
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cipher_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the message of the most recent failure on this thread, or
/// an empty string. The pointer stays valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn cipher_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Runs the synthesize pipeline from a JSON config document (the same
/// one the CLI's --config flag accepts: data/schema paths, epsilon,
/// method, and so on) and stores the result behind `*out`.
///
/// # Safety
/// `config_json` must be NUL-terminated and `out` must point to
/// writable memory. On success the caller owns the handle and must
/// release it with [`cipher_synthesis_free`].
#[no_mangle]
pub unsafe extern "C" fn cipher_synthesize(
    config_json: *const c_char,
    out: *mut *mut CipherSynthesis,
) -> i32 {
    if out.is_null() {
        return fail(CIPHER_ERR_USAGE, "out is null");
    }
    let config = match utf8_arg(config_json, "config_json") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let result = catch_unwind(AssertUnwindSafe(|| synthesize_from_config(config)));
    match result {
        Ok(Ok(product)) => {
            let mut replicates = Vec::with_capacity(product.replicates.len());
            for dataset in &product.replicates {
                match microdata_to_string(dataset) {
                    Ok(csv) => replicates.push(csv),
                    Err(e) => return fail_with(&e),
                }
            }
            let handle =
                Box::new(CipherSynthesis { replicates, report: product.report_json });
            *out = Box::into_raw(handle);
            CIPHER_OK
        }
        Ok(Err(e)) => fail_with(&e),
        Err(_) => fail(CIPHER_ERR_PANIC, "panic during synthesis"),
    }
}

/// Number of replicates in the handle; 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live handle from [`cipher_synthesize`].
#[no_mangle]
pub unsafe extern "C" fn cipher_synthesis_replicate_count(
    handle: *const CipherSynthesis,
) -> usize {
    if handle.is_null() {
        return 0;
    }
    (*handle).replicates.len()
}

/// Copies the report JSON into `buf`.
///
/// # Safety
/// `handle` must be a live handle; buffer arguments follow the sizing
/// convention described in the crate docs.
#[no_mangle]
pub unsafe extern "C" fn cipher_synthesis_report(
    handle: *const CipherSynthesis,
    buf: *mut c_char,
    len: usize,
    written: *mut usize,
) -> i32 {
    if handle.is_null() {
        return fail(CIPHER_ERR_USAGE, "handle is null");
    }
    fill_buffer(&(*handle).report, buf, len, written)
}

/// Copies replicate `index` (0-based) as CSV into `buf`.
///
/// # Safety
/// `handle` must be a live handle; buffer arguments follow the sizing
/// convention described in the crate docs.
#[no_mangle]
pub unsafe extern "C" fn cipher_synthesis_replicate_csv(
    handle: *const CipherSynthesis,
    index: usize,
    buf: *mut c_char,
    len: usize,
    written: *mut usize,
) -> i32 {
    if handle.is_null() {
        return fail(CIPHER_ERR_USAGE, "handle is null");
    }
    let replicates = &(*handle).replicates;
    let Some(csv) = replicates.get(index) else {
        return fail(
            CIPHER_ERR_USAGE,
            format!("replicate index {index} out of range ({} replicates)", replicates.len()),
        );
    };
    fill_buffer(csv, buf, len, written)
}

/// Releases a handle. A null handle is a no-op.
///
/// # Safety
/// `handle` must be null or a live handle, and must not be used again.
#[no_mangle]
pub unsafe extern "C" fn cipher_synthesis_free(handle: *mut CipherSynthesis) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Storage calculator: counts the tables and total cells a selection
/// stores over the given schema JSON. `kway` 0 means the single full
/// table; `kway` k > 0 means all k-way marginal tables. The cell total
/// is written as a decimal string (it can exceed 64 bits).
///
/// # Safety
/// `schema_json` must be NUL-terminated; `tables_out` must point to a
/// u64; the cells buffer follows the sizing convention.
#[no_mangle]
pub unsafe extern "C" fn cipher_cellcount(
    schema_json: *const c_char,
    kway: u32,
    tables_out: *mut u64,
    cells_buf: *mut c_char,
    cells_len: usize,
    cells_written: *mut usize,
) -> i32 {
    if tables_out.is_null() {
        return fail(CIPHER_ERR_USAGE, "tables_out is null");
    }
    let text = match utf8_arg(schema_json, "schema_json") {
        Ok(s) => s,
        Err(code) => return code,
    };
    let counted = catch_unwind(AssertUnwindSafe(|| -> Result<(u64, String), CipherError> {
        let schema = schema_from_str(text)?;
        let selection = if kway == 0 {
            TableSelection::Full
        } else {
            TableSelection::KWay(kway as usize)
        };
        let tables = match selection {
            TableSelection::Full => 1,
            TableSelection::KWay(k) => k_subsets(schema.len(), k)?.len() as u64,
            TableSelection::Queries(_) => unreachable!(),
        };
        let cells = cell_count(&schema, &selection)?;
        Ok((tables, cells.to_string()))
    }));
    match counted {
        Ok(Ok((tables, cells))) => {
            *tables_out = tables;
            fill_buffer(&cells, cells_buf, cells_len, cells_written)
        }
        Ok(Err(e)) => fail_with(&e),
        Err(_) => fail(CIPHER_ERR_PANIC, "panic during cell counting"),
    }
}
