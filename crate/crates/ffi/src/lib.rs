//! C ABI over the tracker.
//!
//! Every entry point returns an [`StStatus`]; on failure the message is kept
//! per thread and read with [`st_last_error_message`]. Trackers are opaque
//! handles created by one of the `st_tracker_new*` functions and released
//! with [`st_tracker_free`]. Images are `H × W × 3` row-major interleaved
//! doubles in `[0, 255]`; boxes are normalized `(cx, cy, w, h)`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use sttrack_core::config::Config;
use sttrack_core::embedding::{Modality, MultiModalFrame};
use sttrack_core::harness::checkpoint;
use sttrack_core::harness::model::Model;
use sttrack_core::harness::tracker::{StepResult, Tracker};
use sttrack_core::numerics::Tensor;
use sttrack_core::{mcp, theory, Error};

/// Status codes. Zero is success; every failure is negative.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StStatus {
    Ok = 0,
    NullPointer = -1,
    InvalidArgument = -2,
    Dimension = -3,
    Numeric = -4,
    Validation = -5,
    Config = -6,
    State = -7,
    Domain = -8,
    Format = -9,
    Io = -10,
    Panic = -11,
}

impl From<&Error> for StStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => StStatus::Dimension,
            Error::Numeric(_) => StStatus::Numeric,
            Error::Validation(_) => StStatus::Validation,
            Error::Config(_) => StStatus::Config,
            Error::State(_) => StStatus::State,
            Error::Domain(_) => StStatus::Domain,
            Error::Format(_) => StStatus::Format,
            Error::Io(_) => StStatus::Io,
        }
    }
}

/// Opaque tracker handle.
pub struct StTracker {
    inner: Tracker,
}

/// One input frame. `aux` must be non-null exactly for the depth, thermal
/// and event modalities; `text` may be null.
#[repr(C)]
pub struct StFrame {
    pub rgb: *const f64,
    pub aux: *const f64,
    pub height: usize,
    pub width: usize,
    /// 0 rgb, 1 depth, 2 thermal, 3 event, 4 language.
    pub modality: u32,
    pub text: *const f64,
    pub text_len: usize,
}

/// Result of one frame.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct StStep {
    pub bbox: [f64; 4],
    pub score: f64,
    pub token_count: usize,
}

impl From<StepResult> for StStep {
    fn from(r: StepResult) -> Self {
        Self {
            bbox: r.bbox,
            score: r.score,
            token_count: r.token_count,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Fail {
    Status(StStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(StStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            StStatus::Ok
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            StStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            StStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(StStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn frame_arg(f: *const StFrame) -> Result<MultiModalFrame, Fail> {
    let f = f.as_ref().ok_or_else(|| null("frame"))?;
    if f.rgb.is_null() {
        return Err(null("frame.rgb"));
    }
    let n = f
        .height
        .checked_mul(f.width)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Fail::Status(StStatus::InvalidArgument, "frame size overflows".into()))?;
    let image = |p: *const f64| Tensor::new(vec![f.height, f.width, 3], std::slice::from_raw_parts(p, n).to_vec());
    let modality = Modality::from_code(f.modality as usize)?;
    let aux = if f.aux.is_null() { None } else { Some(image(f.aux)?) };
    let text = if f.text.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(f.text, f.text_len).to_vec())
    };
    let frame = MultiModalFrame {
        rgb: image(f.rgb)?,
        aux,
        modality,
        text,
    };
    frame.validate()?;
    Ok(frame)
}

unsafe fn tracker_arg<'a>(t: *mut StTracker) -> Result<&'a mut StTracker, Fail> {
    t.as_mut().ok_or_else(|| null("tracker"))
}

fn boxed(model: Model, out: *mut *mut StTracker) -> Result<(), Fail> {
    let inner = Tracker::new(Arc::new(model))?;
    // SAFETY: callers check `out` before building the model.
    unsafe { *out = Box::into_raw(Box::new(StTracker { inner })) };
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length in
/// bytes, so a caller can size a buffer with a first call on `len = 0`.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn st_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn st_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New tracker with freshly initialized weights. `config` holds config
/// text (`key = value` lines) or is null for the desk preset.
///
/// # Safety
/// `config` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn st_tracker_new(config: *const c_char, out: *mut *mut StTracker) -> StStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config.is_null() {
            Config::desk()
        } else {
            Config::parse(str_arg(config, "config")?)?
        };
        boxed(Model::new(&cfg)?, out)
    })
}

/// New tracker from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn st_tracker_from_checkpoint(path: *const c_char, out: *mut *mut StTracker) -> StStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        boxed(checkpoint::load(Path::new(path))?, out)
    })
}

/// Releases a tracker. Null is a no-op.
///
/// # Safety
/// `t` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn st_tracker_free(t: *mut StTracker) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Starts (or restarts) tracking from a frame and its target box.
///
/// # Safety
/// `t`, `frame` and `bbox` must be valid; `out` may be null.
#[no_mangle]
pub unsafe extern "C" fn st_tracker_init(
    t: *mut StTracker,
    frame: *const StFrame,
    bbox: *const f64,
    out: *mut StStep,
) -> StStatus {
    guard(|| {
        let t = tracker_arg(t)?;
        let frame = frame_arg(frame)?;
        if bbox.is_null() {
            return Err(null("bbox"));
        }
        let b = std::slice::from_raw_parts(bbox, 4);
        let r = t.inner.init(&frame, [b[0], b[1], b[2], b[3]])?;
        if let Some(o) = out.as_mut() {
            *o = r.into();
        }
        Ok(())
    })
}

/// Tracks one frame. Returns `State` before initialization.
///
/// # Safety
/// `t`, `frame` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn st_tracker_track(t: *mut StTracker, frame: *const StFrame, out: *mut StStep) -> StStatus {
    guard(|| {
        let t = tracker_arg(t)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let frame = frame_arg(frame)?;
        *out = t.inner.track(&frame)?.into();
        Ok(())
    })
}

/// Norm over every fusion hidden state.
///
/// # Safety
/// `t` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn st_tracker_state_norm(t: *const StTracker, out: *mut f64) -> StStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("tracker"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = t.inner.dsf_norm();
        Ok(())
    })
}

/// Slope magnitude of 1-based head `h`.
#[no_mangle]
pub extern "C" fn st_alibi_slope(h: usize) -> f64 {
    if h == 0 {
        return f64::NAN;
    }
    mcp::alibi_slope(h)
}

/// Geometric bound on the attention mass beyond `k` frames for slope `beta < 0`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn st_tail_bound(beta: f64, k: usize, out: *mut f64) -> StStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = theory::tail_bound(beta, k)?;
        Ok(())
    })
}

/// Effective horizon at tolerance `eta` for slope `beta < 0`.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn st_horizon(beta: f64, eta: f64, out: *mut f64) -> StStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = theory::horizon(beta, eta)?;
        Ok(())
    })
}
