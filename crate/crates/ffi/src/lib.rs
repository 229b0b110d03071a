//! C ABI over `vmae-core`.
//!
//! Objects cross the boundary as opaque heap handles that the caller frees
//! with the matching `*_free`. Every fallible call returns a [`VmaeStatus`];
//! on failure the message is kept per thread and read back with
//! [`vmae_last_error`]. Panics are caught at the boundary and reported as
//! `VMAE_STATUS_PANIC`.
//!
//! Buffers are caller-owned. A call that writes `n` values takes the
//! buffer capacity and fails with `VMAE_STATUS_BUFFER_TOO_SMALL` (writing
//! nothing) when it is short; query the size first.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use vmae::backbone::MaeModel;
use vmae::data::VideoClip;
use vmae::downstream::{classify_clip, compute_metrics, load_classifier, TrainedClassifier};
use vmae::masking::{sample_visible, visible_count, ProbabilityMap};
use vmae::numerics::{Float, ParamStore, Tape};
use vmae::Error;

/// Call outcome. Values 2–4 match the command-line tool's exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VmaeStatus {
    Ok = 0,
    /// Null pointer, non-UTF-8 path or out-of-range scalar.
    InvalidArgument = 1,
    /// Shape, config or data mismatch.
    Config = 2,
    Io = 3,
    /// Corrupt or unrecognised file.
    Format = 4,
    Numeric = 5,
    Contract = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Macro-averaged clip metrics.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VmaeMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

/// A `frames × channels × height × width` clip with values in [0, 1].
pub struct VmaeClip {
    clip: VideoClip,
}

/// A pretrained masked autoencoder (tokenizer, selection net, encoder, decoder).
pub struct VmaeModel {
    model: MaeModel,
    store: ParamStore,
}

/// A fine-tuned encoder plus classification head.
pub struct VmaeClassifier {
    clf: TrainedClassifier,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> VmaeStatus {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Index(_) | Error::Data(_) => VmaeStatus::Config,
        Error::Io { .. } => VmaeStatus::Io,
        Error::Format(_) => VmaeStatus::Format,
        Error::Numeric(_) => VmaeStatus::Numeric,
        Error::Contract(_) => VmaeStatus::Contract,
    }
}

enum Fail {
    Core(Error),
    Arg(String),
    Short { need: usize, cap: usize },
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VmaeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VmaeStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            VmaeStatus::InvalidArgument
        }
        Ok(Err(Fail::Short { need, cap })) => {
            set_error(format!("buffer holds {cap} values, {need} needed"));
            VmaeStatus::BufferTooSmall
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {m}"));
            VmaeStatus::Panic
        }
    }
}

unsafe fn arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::Arg(format!("{name} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(Fail::Arg("path is null".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail::Arg("path is not UTF-8".into()))
}

unsafe fn out_slice<'a, T>(p: *mut T, cap: usize, need: usize) -> Result<&'a mut [T], Fail> {
    if need > cap {
        return Err(Fail::Short { need, cap });
    }
    if p.is_null() && need > 0 {
        return Err(Fail::Arg("output buffer is null".into()));
    }
    if need == 0 {
        return Ok(&mut []);
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn in_slice<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Arg(format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn put<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Arg("output pointer is null".into()));
    }
    out.write(v);
    Ok(())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vmae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `cap > 0`). Returns the full message length
/// plus one, so a second call with that capacity gets all of it.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vmae_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

// ---- clips ---------------------------------------------------------------

/// Read a clip file written by the corpus generator.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vmae_clip_load(path: *const c_char, out: *mut *mut VmaeClip) -> VmaeStatus {
    guard(|| {
        let clip = vmae::data::load_raw_clip(path_arg(path)?, &Default::default())?;
        put(out, Box::into_raw(Box::new(VmaeClip { clip })))
    })
}

/// Build a clip from `frames * channels * height * width` floats in
/// frame, channel, row, column order.
///
/// # Safety
/// `pixels` must point to that many floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vmae_clip_from_pixels(
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    pixels: *const f32,
    out: *mut *mut VmaeClip,
) -> VmaeStatus {
    guard(|| {
        let n = frames
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(height))
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Fail::Arg("clip size overflows".into()))?;
        let px = in_slice(pixels, n, "pixels")?;
        let clip = VideoClip::new(frames, channels, height, width, px.iter().map(|&v| v as Float).collect())?;
        put(out, Box::into_raw(Box::new(VmaeClip { clip })))
    })
}

/// Write `[frames, channels, height, width]` into `shape`.
///
/// # Safety
/// `clip` must be a live handle; `shape` must hold 4 values.
#[no_mangle]
pub unsafe extern "C" fn vmae_clip_shape(clip: *const VmaeClip, shape: *mut usize) -> VmaeStatus {
    guard(|| {
        let c = &arg(clip, "clip")?.clip;
        out_slice(shape, 4, 4)?.copy_from_slice(&[c.frames, c.channels, c.height, c.width]);
        Ok(())
    })
}

/// # Safety
/// `clip` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn vmae_clip_free(clip: *mut VmaeClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

// ---- pretrained model ----------------------------------------------------

/// Load a pretraining checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vmae_model_load(path: *const c_char, out: *mut *mut VmaeModel) -> VmaeStatus {
    guard(|| {
        let (model, store, _) = vmae::training::load_model(path_arg(path)?)?;
        put(out, Box::into_raw(Box::new(VmaeModel { model, store })))
    })
}

/// Number of tokens the model cuts `clip` into.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vmae_model_num_tokens(model: *const VmaeModel, clip: *const VmaeClip, out: *mut usize) -> VmaeStatus {
    guard(|| {
        let m = arg(model, "model")?;
        let meta = m.model.grid(&arg(clip, "clip")?.clip)?;
        put(out, meta.num_tokens())
    })
}

/// The selection network's per-token visibility probabilities for `clip`.
///
/// # Safety
/// Handles must be live; `probs` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn vmae_model_selection_probs(
    model: *const VmaeModel,
    clip: *const VmaeClip,
    probs: *mut f64,
    cap: usize,
) -> VmaeStatus {
    guard(|| {
        let m = arg(model, "model")?;
        let clip = &arg(clip, "clip")?.clip;
        let n = m.model.grid(clip)?.num_tokens();
        let dst = out_slice(probs, cap, n)?;
        let mut tape = Tape::new();
        let (tokens, _) = m.model.embed_clip(&mut tape, &m.store, clip)?;
        let lp = m.model.selection_log_probs(&mut tape, &m.store, tokens)?;
        for (d, &v) in dst.iter_mut().zip(tape.value(lp).data()) {
            *d = (v as f64).exp();
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn vmae_model_free(model: *mut VmaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---- classifier ----------------------------------------------------------

/// Load a classifier saved by the fine-tuning command.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vmae_classifier_load(path: *const c_char, out: *mut *mut VmaeClassifier) -> VmaeStatus {
    guard(|| {
        let clf = load_classifier(path_arg(path)?)?;
        put(out, Box::into_raw(Box::new(VmaeClassifier { clf })))
    })
}

/// # Safety
/// `clf` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vmae_classifier_num_classes(clf: *const VmaeClassifier, out: *mut usize) -> VmaeStatus {
    guard(|| put(out, arg(clf, "classifier")?.clf.head.num_classes))
}

/// Class probabilities for `clip`; `predicted` (optional) receives the
/// arg-max, lowest index on ties.
///
/// # Safety
/// Handles must be live; `probs` must hold `cap` doubles; `predicted`
/// must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn vmae_classifier_predict(
    clf: *const VmaeClassifier,
    clip: *const VmaeClip,
    probs: *mut f64,
    cap: usize,
    predicted: *mut usize,
) -> VmaeStatus {
    guard(|| {
        let c = &arg(clf, "classifier")?.clf;
        let clip = &arg(clip, "clip")?.clip;
        let dst = out_slice(probs, cap, c.head.num_classes)?;
        let logits = classify_clip(&c.model, &c.store, &c.head, clip)?;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        let top = logits[best] as f64;
        for (d, &v) in dst.iter_mut().zip(&logits) {
            *d = (v as f64 - top).exp();
        }
        let z: f64 = dst.iter().sum();
        dst.iter_mut().for_each(|d| *d /= z);
        if !predicted.is_null() {
            predicted.write(best);
        }
        Ok(())
    })
}

/// # Safety
/// `clf` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn vmae_classifier_free(clf: *mut VmaeClassifier) {
    if !clf.is_null() {
        drop(Box::from_raw(clf));
    }
}

// ---- masking and metrics -------------------------------------------------

/// How many of `n` tokens stay visible at masking ratio `ratio`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vmae_visible_count(n: usize, ratio: f64, out: *mut usize) -> VmaeStatus {
    guard(|| {
        vmae::masking::check_ratio(ratio)?;
        if n == 0 {
            return Err(Fail::Arg("no tokens".into()));
        }
        put(out, visible_count(n, ratio))
    })
}

/// Draw a visible set without replacement from `probs` (positive, summing
/// to one). Ids are written sorted; `count` receives how many.
///
/// # Safety
/// `probs` must hold `n` doubles, `visible` `cap` values; `count` writable.
#[no_mangle]
pub unsafe extern "C" fn vmae_sample_visible(
    probs: *const f64,
    n: usize,
    ratio: f64,
    seed: u64,
    visible: *mut usize,
    cap: usize,
    count: *mut usize,
) -> VmaeStatus {
    guard(|| {
        let p: Vec<Float> = in_slice(probs, n, "probs")?.iter().map(|&v| v as Float).collect();
        let map = ProbabilityMap::from_probs(&p)?;
        let spec = sample_visible(&map, ratio, &mut vmae::rng::stream(seed, &[]))?;
        out_slice(visible, cap, spec.visible.len())?.copy_from_slice(&spec.visible);
        put(count, spec.visible.len())
    })
}

/// Accuracy and macro precision / recall / Jaccard of `n` predictions.
///
/// # Safety
/// `predicted` and `labels` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vmae_compute_metrics(
    predicted: *const usize,
    labels: *const usize,
    n: usize,
    num_classes: usize,
    out: *mut VmaeMetrics,
) -> VmaeStatus {
    guard(|| {
        let r = compute_metrics(in_slice(predicted, n, "predicted")?, in_slice(labels, n, "labels")?, num_classes)?;
        put(
            out,
            VmaeMetrics {
                accuracy: r.accuracy,
                precision: r.precision,
                recall: r.recall,
                jaccard: r.jaccard,
            },
        )
    })
}
