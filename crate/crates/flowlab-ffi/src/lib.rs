//! C ABI over the core crate: load a checkpoint, draw samples from it, and
//! score sample sets, from any language with a C FFI.
//!
//! Conventions:
//!
//! * Handles (`FlCheckpoint`, `FlSamples`) are opaque; create them through
//!   `fl_*` calls and release them with the matching `fl_*_free`. Freeing
//!   NULL is a no-op. Handles are not thread-safe; share them only with
//!   external synchronization.
//! * Fallible calls return an [`FlStatus`]. Anything but `Ok` leaves a
//!   human-readable message readable via [`fl_last_error`] on the calling
//!   thread.
//! * Buffers returned by getters stay owned by the handle and are valid
//!   until it is freed.
//!
//! The generated header lands in `include/flowlab.h` at build time.

use flowlab::metrics::{mmd2, KernelSpec};
use flowlab::models::{load_checkpoint, CheckpointMeta, ConditionBatch, ConditionedModel};
use flowlab::numerics::Tensor;
use flowlab::samplers::{initial_noise, run_sampler, SamplerConfig, SamplerFamily};
use flowlab::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;

/// Result of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlStatus {
    /// The call succeeded.
    Ok = 0,
    /// The inputs were rejected: bad flag value, missing file, shape or
    /// conditioning mismatch. See `fl_last_error`.
    InvalidInput = 1,
    /// The computation itself failed (I/O, non-finite numbers, panic).
    Runtime = 2,
    /// A required pointer argument was NULL.
    NullPointer = 3,
}

/// A loaded checkpoint: the network plus the path and conditioning metadata
/// it was trained with.
pub struct FlCheckpoint {
    model: ConditionedModel,
    meta: CheckpointMeta,
}

/// A batch of generated samples, stored row-major as `count` rows of `dim`
/// doubles.
pub struct FlSamples {
    count: usize,
    dim: usize,
    data: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let clean = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(clean));
}

fn status_of(err: &Error) -> FlStatus {
    if err.exit_code() == 1 {
        FlStatus::InvalidInput
    } else {
        FlStatus::Runtime
    }
}

/// Runs a fallible body with panics contained at the boundary.
fn guarded(body: impl FnOnce() -> Result<(), (FlStatus, String)>) -> FlStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => FlStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            FlStatus::Runtime
        }
    }
}

fn fail<T>(status: FlStatus, msg: impl Into<String>) -> Result<T, (FlStatus, String)> {
    Err((status, msg.into()))
}

fn lift<T>(r: flowlab::Result<T>) -> Result<T, (FlStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

unsafe fn required<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, (FlStatus, String)> {
    match ptr.as_ref() {
        Some(r) => Ok(r),
        None => fail(FlStatus::NullPointer, format!("{name} is NULL")),
    }
}

unsafe fn required_str<'a>(
    ptr: *const c_char,
    name: &str,
) -> Result<&'a str, (FlStatus, String)> {
    if ptr.is_null() {
        return fail(FlStatus::NullPointer, format!("{name} is NULL"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| (FlStatus::InvalidInput, format!("{name} is not valid UTF-8")))
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fl_version() -> *const c_char {
    static VERSION: OnceLock<CString> = OnceLock::new();
    VERSION
        .get_or_init(|| CString::new(flowlab::config::CODE_VERSION).unwrap())
        .as_ptr()
}

/// Copies the calling thread's last error message into `buf` (truncated to
/// `cap` bytes, always NUL-terminated when `cap > 0`) and returns the size
/// the full message needs, terminator included. Returns 0 when no error has
/// been recorded. `buf` may be NULL to query the size.
#[no_mangle]
pub unsafe extern "C" fn fl_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let guard = e.borrow();
        let Some(msg) = guard.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            // Guarantee termination even after truncation.
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint file written by the `flowlab` trainer into a fresh
/// handle. On success `*out` owns the handle; release it with
/// [`fl_checkpoint_free`].
#[no_mangle]
pub unsafe extern "C" fn fl_checkpoint_load(
    path: *const c_char,
    out: *mut *mut FlCheckpoint,
) -> FlStatus {
    guarded(|| {
        let path = required_str(path, "path")?;
        if out.is_null() {
            return fail(FlStatus::NullPointer, "out is NULL");
        }
        let loaded = lift(load_checkpoint(std::path::Path::new(path)))?;
        let handle = Box::new(FlCheckpoint {
            model: loaded.model,
            meta: loaded.meta,
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Releases a checkpoint handle. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fl_checkpoint_free(ckpt: *mut FlCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Writes the number of axes of one data sample (1 for vector data, 3 for
/// channel-height-width images) to `*out_rank`.
#[no_mangle]
pub unsafe extern "C" fn fl_checkpoint_rank(
    ckpt: *const FlCheckpoint,
    out_rank: *mut usize,
) -> FlStatus {
    guarded(|| {
        let ckpt = required(ckpt, "ckpt")?;
        if out_rank.is_null() {
            return fail(FlStatus::NullPointer, "out_rank is NULL");
        }
        *out_rank = ckpt.meta.model.data_shape.len();
        Ok(())
    })
}

/// Copies the per-sample data shape into `out` (`cap` elements available).
/// Fails with `InvalidInput` when `cap` is too small; query the needed size
/// with [`fl_checkpoint_rank`].
#[no_mangle]
pub unsafe extern "C" fn fl_checkpoint_shape(
    ckpt: *const FlCheckpoint,
    out: *mut usize,
    cap: usize,
) -> FlStatus {
    guarded(|| {
        let ckpt = required(ckpt, "ckpt")?;
        if out.is_null() {
            return fail(FlStatus::NullPointer, "out is NULL");
        }
        let shape = &ckpt.meta.model.data_shape;
        if cap < shape.len() {
            return fail(
                FlStatus::InvalidInput,
                format!("shape needs {} elements, buffer holds {cap}", shape.len()),
            );
        }
        std::ptr::copy_nonoverlapping(shape.as_ptr(), out, shape.len());
        Ok(())
    })
}

/// Writes the number of classes the checkpoint was trained to condition on,
/// or -1 when it is unconditional.
#[no_mangle]
pub unsafe extern "C" fn fl_checkpoint_num_classes(
    ckpt: *const FlCheckpoint,
    out: *mut i64,
) -> FlStatus {
    guarded(|| {
        let ckpt = required(ckpt, "ckpt")?;
        if out.is_null() {
            return fail(FlStatus::NullPointer, "out is NULL");
        }
        *out = match ckpt.meta.model.num_classes {
            Some(k) => k as i64,
            None => -1,
        };
        Ok(())
    })
}

/// Draws `count` samples from a checkpoint.
///
/// `family` picks the solver: "euler" or "heun" for flow checkpoints,
/// "ddpm_ancestral" or "ddim" for diffusion checkpoints. `class_index`
/// conditions every sample on that class; pass a negative value for
/// unconditional sampling. The same seed always reproduces the same batch.
/// On success `*out` owns the result; release it with [`fl_samples_free`].
#[no_mangle]
pub unsafe extern "C" fn fl_sample(
    ckpt: *const FlCheckpoint,
    family: *const c_char,
    steps: usize,
    count: usize,
    seed: u64,
    class_index: i64,
    out: *mut *mut FlSamples,
) -> FlStatus {
    guarded(|| {
        let ckpt = required(ckpt, "ckpt")?;
        let family = required_str(family, "family")?;
        if out.is_null() {
            return fail(FlStatus::NullPointer, "out is NULL");
        }
        if count == 0 {
            return fail(FlStatus::InvalidInput, "count must be at least 1");
        }

        let family = lift(SamplerFamily::from_name(family))?;
        let sampler = SamplerConfig::new(family, steps, seed);
        lift(sampler.validate())?;

        let class = if class_index < 0 {
            None
        } else {
            let class = class_index as usize;
            match ckpt.meta.model.num_classes {
                None => {
                    return fail(
                        FlStatus::InvalidInput,
                        "class conditioning requested, but the checkpoint is unconditional",
                    )
                }
                Some(k) if class >= k => {
                    return fail(
                        FlStatus::InvalidInput,
                        format!("class {class} out of range, checkpoint has {k} classes"),
                    )
                }
                Some(_) => Some(class),
            }
        };
        let cond = match class {
            Some(c) => ConditionBatch::repeat_class(c, count),
            None => ConditionBatch::unconditional(count),
        };

        let shape = &ckpt.meta.model.data_shape;
        let x_init = lift(initial_noise(shape, count, seed))?;
        let result = lift(run_sampler(
            &ckpt.model,
            &ckpt.meta.path,
            &sampler,
            &x_init,
            &cond,
        ))?;

        let dim: usize = shape.iter().product();
        let handle = Box::new(FlSamples {
            count,
            dim,
            data: result.samples.data().to_vec(),
        });
        *out = Box::into_raw(handle);
        Ok(())
    })
}

/// Number of samples in the batch; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn fl_samples_count(samples: *const FlSamples) -> usize {
    samples.as_ref().map_or(0, |s| s.count)
}

/// Elements per sample (the data shape, flattened); 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn fl_samples_dim(samples: *const FlSamples) -> usize {
    samples.as_ref().map_or(0, |s| s.dim)
}

/// Borrow of the sample buffer: `count * dim` doubles, row-major, valid
/// until the handle is freed. NULL for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn fl_samples_data(samples: *const FlSamples) -> *const f64 {
    samples.as_ref().map_or(std::ptr::null(), |s| s.data.as_ptr())
}

/// Releases a sample batch. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fl_samples_free(samples: *mut FlSamples) {
    if !samples.is_null() {
        drop(Box::from_raw(samples));
    }
}

/// Unbiased squared maximum mean discrepancy between two sample sets, with
/// the kernel bandwidth chosen by the median heuristic. `x` holds `n`
/// rows and `y` holds `m` rows of `dim` doubles each; both need at least
/// two rows. Identical sets score (numerically) zero.
#[no_mangle]
pub unsafe extern "C" fn fl_mmd2(
    x: *const f64,
    n: usize,
    y: *const f64,
    m: usize,
    dim: usize,
    out: *mut f64,
) -> FlStatus {
    guarded(|| {
        if x.is_null() || y.is_null() {
            return fail(FlStatus::NullPointer, "x or y is NULL");
        }
        if out.is_null() {
            return fail(FlStatus::NullPointer, "out is NULL");
        }
        if dim == 0 {
            return fail(FlStatus::InvalidInput, "dim must be at least 1");
        }
        if n < 2 || m < 2 {
            return fail(
                FlStatus::InvalidInput,
                "each sample set needs at least 2 rows",
            );
        }
        let xs = std::slice::from_raw_parts(x, n * dim);
        let ys = std::slice::from_raw_parts(y, m * dim);
        let xt = lift(Tensor::new(vec![n, dim], xs.to_vec()))?;
        let yt = lift(Tensor::new(vec![m, dim], ys.to_vec()))?;
        let kernel = lift(KernelSpec::median_heuristic(&xt, &yt))?;
        *out = lift(mmd2(&xt, &yt, &kernel))?;
        Ok(())
    })
}
