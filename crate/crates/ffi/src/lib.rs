//! C ABI over the filtnorm normalization layers.
//!
//! Layers are opaque handles created with [`filtnorm_layer_new`] and released
//! with [`filtnorm_layer_free`]. Every fallible call returns a
//! [`FiltnormStatus`]; on failure [`filtnorm_last_error`] describes the cause
//! for the calling thread. All tensors are contiguous `double` arrays in
//! `[N, C, spatial...]` order.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use filtnorm::norm::{
    self, AffineParams, GradMode, NormCache, NormConfig, RunningStats,
};
use filtnorm::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiltnormStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    DegenerateSlice = 4,
    /// `backward` was called before a training forward.
    NoForward = 5,
    Internal = 6,
}

/// Normalization variant of a layer.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiltnormKind {
    Bn = 0,
    Fbn = 1,
    Gn = 2,
    Fgn = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiltnormGradMode {
    Exact = 0,
    Paper = 1,
}

/// Opaque layer state: configuration, affine parameters, running statistics
/// and the cache of the latest training forward.
pub struct FiltnormLayer {
    cfg: NormConfig,
    affine: AffineParams,
    stats: RunningStats,
    cache: Option<NormCache>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FiltnormStatus {
    match e {
        Error::ShapeMismatch { .. } => FiltnormStatus::ShapeMismatch,
        Error::DegenerateSlice { .. } | Error::DegenerateMask { .. } => FiltnormStatus::DegenerateSlice,
        Error::Config(_) | Error::InvalidInput(_) => FiltnormStatus::InvalidArgument,
        _ => FiltnormStatus::Internal,
    }
}

struct Fail(FiltnormStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FiltnormStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FiltnormStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FiltnormStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            FiltnormStatus::Internal
        }
    }
}

unsafe fn layer_mut<'a>(h: *mut FiltnormLayer) -> Result<&'a mut FiltnormLayer, Fail> {
    h.as_mut().ok_or_else(|| null("layer"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn input(x: *const f64, shape: *const usize, rank: usize) -> Result<Tensor, Fail> {
    let shape = slice(shape, rank, "shape")?.to_vec();
    let len = shape.iter().product();
    let data = slice(x, len, "x")?.to_vec();
    Ok(Tensor::new(shape, data)?)
}

/// Creates a layer over `channels` channels with unit scale and zero shift.
///
/// `t_sigma` is ignored by the unfiltered kinds and `num_groups` by the batch
/// kinds. A non-positive `epsilon` selects the default.
///
/// # Safety
/// `out` must be valid for writing one pointer.
#[no_mangle]
pub unsafe extern "C" fn filtnorm_layer_new(
    kind: FiltnormKind,
    channels: usize,
    t_sigma: f64,
    num_groups: usize,
    epsilon: f64,
    out: *mut *mut FiltnormLayer,
) -> FiltnormStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = match kind {
            FiltnormKind::Bn => NormConfig::bn(),
            FiltnormKind::Fbn => NormConfig::fbn(t_sigma),
            FiltnormKind::Gn => NormConfig::gn(num_groups),
            FiltnormKind::Fgn => NormConfig::fgn(num_groups, t_sigma),
        };
        if epsilon > 0.0 {
            cfg = cfg.with_epsilon(epsilon);
        }
        cfg.validate(Some(channels))?;
        if channels == 0 {
            return Err(Fail(FiltnormStatus::InvalidArgument, "channels must be positive".into()));
        }
        let layer = FiltnormLayer {
            cfg,
            affine: AffineParams::new(channels),
            stats: RunningStats::new(channels),
            cache: None,
        };
        *out = Box::into_raw(Box::new(layer));
        Ok(())
    })
}

/// Releases a layer. Null is ignored.
///
/// # Safety
/// `layer` must come from [`filtnorm_layer_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn filtnorm_layer_free(layer: *mut FiltnormLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// # Safety
/// `layer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn filtnorm_layer_set_grad_mode(
    layer: *mut FiltnormLayer,
    mode: FiltnormGradMode,
) -> FiltnormStatus {
    guard(|| {
        let l = layer_mut(layer)?;
        l.cfg.grad_mode = match mode {
            FiltnormGradMode::Exact => GradMode::Exact,
            FiltnormGradMode::Paper => GradMode::Paper,
        };
        Ok(())
    })
}

/// Replaces the scale and shift; both arrays hold `channels` values.
///
/// # Safety
/// `layer` must be a live handle; `gamma` and `beta` must be readable for
/// `channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn filtnorm_layer_set_affine(
    layer: *mut FiltnormLayer,
    gamma: *const f64,
    beta: *const f64,
    channels: usize,
) -> FiltnormStatus {
    guard(|| {
        let l = layer_mut(layer)?;
        let g = slice(gamma, channels, "gamma")?;
        let b = slice(beta, channels, "beta")?;
        if channels != l.affine.channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![l.affine.channels()],
                actual: vec![channels],
            }
            .into());
        }
        l.affine = AffineParams::from_values(g, b)?;
        Ok(())
    })
}

/// Training-mode forward. Updates the running statistics of batch kinds and
/// keeps the cache for [`filtnorm_layer_backward`].
///
/// # Safety
/// `shape` must be readable for `rank` values; `x` and `y` must hold the
/// product of `shape` doubles.
#[no_mangle]
pub unsafe extern "C" fn filtnorm_layer_forward_train(
    layer: *mut FiltnormLayer,
    x: *const f64,
    shape: *const usize,
    rank: usize,
    y: *mut f64,
) -> FiltnormStatus {
    guard(|| {
        let l = layer_mut(layer)?;
        let x = input(x, shape, rank)?;
        let out = slice_mut(y, x.len(), "y")?;
        let (yt, cache) = norm::forward_train(&x, &l.affine, &l.cfg, Some(&mut l.stats))?;
        out.copy_from_slice(yt.data());
        l.cache = Some(cache);
        Ok(())
    })
}

/// Gradients of the latest training forward. `dy` and `dx` have its shape;
/// `dgamma` and `dbeta` hold one value per channel.
///
/// # Safety
/// All arrays must be valid for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn filtnorm_layer_backward(
    layer: *mut FiltnormLayer,
    dy: *const f64,
    dx: *mut f64,
    dgamma: *mut f64,
    dbeta: *mut f64,
) -> FiltnormStatus {
    guard(|| {
        let l = layer_mut(layer)?;
        let cache = l
            .cache
            .as_ref()
            .ok_or_else(|| Fail(FiltnormStatus::NoForward, "backward before a training forward".into()))?;
        let shape = cache.shape.clone();
        let len: usize = shape.iter().product();
        let c = l.affine.channels();
        let dy = Tensor::new(shape, slice(dy, len, "dy")?.to_vec())?;
        let (dx, dg, db) = (slice_mut(dx, len, "dx")?, slice_mut(dgamma, c, "dgamma")?, slice_mut(dbeta, c, "dbeta")?);
        let g = norm::norm_backward(&dy, cache, &l.affine, &l.cfg)?;
        dx.copy_from_slice(g.dx.data());
        dg.copy_from_slice(g.dgamma.data());
        db.copy_from_slice(g.dbeta.data());
        Ok(())
    })
}

/// Inference-mode forward using the running statistics.
///
/// # Safety
/// As for [`filtnorm_layer_forward_train`].
#[no_mangle]
pub unsafe extern "C" fn filtnorm_layer_forward_infer(
    layer: *mut FiltnormLayer,
    x: *const f64,
    shape: *const usize,
    rank: usize,
    y: *mut f64,
) -> FiltnormStatus {
    guard(|| {
        let l = layer_mut(layer)?;
        let x = input(x, shape, rank)?;
        let out = slice_mut(y, x.len(), "y")?;
        let r = norm::norm_forward_infer(&x, &l.affine, &l.cfg, &l.stats)?;
        out.copy_from_slice(r.y.data());
        Ok(())
    })
}

/// Copies the running mean and biased variance, `channels` values each.
///
/// # Safety
/// `mean` and `var` must be writable for `channels` doubles.
#[no_mangle]
pub unsafe extern "C" fn filtnorm_layer_running_stats(
    layer: *mut FiltnormLayer,
    mean: *mut f64,
    var: *mut f64,
    channels: usize,
) -> FiltnormStatus {
    guard(|| {
        let l = layer_mut(layer)?;
        if channels != l.stats.channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![l.stats.channels()],
                actual: vec![channels],
            }
            .into());
        }
        slice_mut(mean, channels, "mean")?.copy_from_slice(l.stats.mean.data());
        slice_mut(var, channels, "var")?.copy_from_slice(l.stats.var.data());
        Ok(())
    })
}

/// Number of elements excluded by the mask of the latest training forward.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn filtnorm_layer_num_masked(layer: *mut FiltnormLayer, out: *mut usize) -> FiltnormStatus {
    guard(|| {
        let l = layer_mut(layer)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cache = l
            .cache
            .as_ref()
            .ok_or_else(|| Fail(FiltnormStatus::NoForward, "no training forward yet".into()))?;
        *out = cache.num_masked();
        Ok(())
    })
}

/// Two-sided standard normal tail probability `P(|Z| > z)`.
#[no_mangle]
pub extern "C" fn filtnorm_gaussian_tail_probability(z: f64) -> f64 {
    filtnorm::stats::gaussian_tail_probability(z)
}

/// Message of the calling thread's most recent failure, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn filtnorm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Name of a layer kind as a static string.
#[no_mangle]
pub extern "C" fn filtnorm_kind_name(kind: FiltnormKind) -> *const c_char {
    let s: &'static [u8] = match kind {
        FiltnormKind::Bn => b"bn\0",
        FiltnormKind::Fbn => b"fbn\0",
        FiltnormKind::Gn => b"gn\0",
        FiltnormKind::Fgn => b"fgn\0",
    };
    s.as_ptr().cast()
}
