//! C interface to trained skill models.
//!
//! Every fallible function returns an [`SlfcStatus`]. On failure the
//! message is kept per thread and can be copied out with
//! [`slfc_last_error_message`]. Arrays are row-major `double` buffers with
//! explicit lengths; lengths that disagree with the model are rejected
//! rather than read past. Skill indices are 0-based.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use slfc::eval::frechet_distance;
use slfc::model::{layer_to_controller, ModelParams};
use slfc::numcore::{Matrix, PINV_RTOL};
use slfc::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlfcStatus {
    Ok = 0,
    NullPointer = 1,
    /// A length or argument disagrees with the model or the contract.
    InvalidArgument = 2,
    /// A computation produced a non-finite or degenerate value.
    Numeric = 3,
    Io = 4,
    /// A file or string is not a valid checkpoint.
    Parse = 5,
    /// An internal invariant failed; the message has details.
    Internal = 6,
}

/// A loaded model. Create with [`slfc_model_load`] or
/// [`slfc_model_from_json`], release with [`slfc_model_free`].
pub struct SlfcModel {
    params: ModelParams,
}

/// Sizes of a model's inputs and outputs.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SlfcDims {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub num_skills: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> SlfcStatus {
    match err {
        Error::Io { .. } => SlfcStatus::Io,
        Error::Parse(_) => SlfcStatus::Parse,
        Error::NonFinite(_) | Error::Degenerate(_) | Error::Domain(_) => SlfcStatus::Numeric,
        Error::Shape(_) | Error::Index { .. } | Error::Contract(_) | Error::Config(_) => SlfcStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (SlfcStatus, String)>) -> SlfcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SlfcStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SlfcStatus::Internal
        }
    }
}

fn lib(err: Error) -> (SlfcStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(name: &str) -> (SlfcStatus, String) {
    (SlfcStatus::NullPointer, format!("{name} is null"))
}

fn bad(msg: String) -> (SlfcStatus, String) {
    (SlfcStatus::InvalidArgument, msg)
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a>(ptr: *const f64, len: usize, name: &str) -> Result<&'a [f64], (SlfcStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], (SlfcStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn expect_len(name: &str, got: usize, want: usize) -> Result<(), (SlfcStatus, String)> {
    if got == want {
        Ok(())
    } else {
        Err(bad(format!("{name} has length {got}, expected {want}")))
    }
}

/// # Safety
/// `s` must be null or a NUL-terminated string.
unsafe fn text<'a>(s: *const c_char, name: &str) -> Result<&'a str, (SlfcStatus, String)> {
    if s.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| bad(format!("{name} is not UTF-8")))
}

/// # Safety
/// `model` must be null or a live handle.
unsafe fn model<'a>(model: *const SlfcModel) -> Result<&'a ModelParams, (SlfcStatus, String)> {
    model.as_ref().map(|m| &m.params).ok_or_else(|| null("model"))
}

fn publish(params: ModelParams, out: *mut *mut SlfcModel) {
    // SAFETY: callers check `out` before building the model.
    unsafe { *out = Box::into_raw(Box::new(SlfcModel { params })) };
}

/// Loads a model checkpoint from `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn slfc_model_load(path: *const c_char, out: *mut *mut SlfcModel) -> SlfcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = text(path, "path")?;
        publish(ModelParams::load(path).map_err(lib)?, out);
        Ok(())
    })
}

/// Parses a model checkpoint held in memory.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn slfc_model_from_json(json: *const c_char, out: *mut *mut SlfcModel) -> SlfcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = slfc::model::checkpoint::Checkpoint::from_json(text(json, "json")?).map_err(lib)?;
        publish(ModelParams::from_checkpoint(&ck).map_err(lib)?, out);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn slfc_model_free(model: *mut SlfcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn slfc_model_dims(model: *const SlfcModel, out: *mut SlfcDims) -> SlfcStatus {
    guard(|| {
        let p = self::model(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &p.config;
        *out = SlfcDims {
            obs_dim: c.obs_dim,
            action_dim: c.action_dim,
            latent_dim: c.latent_dim,
            num_skills: c.num_skills,
        };
        Ok(())
    })
}

/// Mean and variance of the latent state given one observation.
///
/// # Safety
/// Buffers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn slfc_model_encode(
    model: *const SlfcModel,
    obs: *const f64,
    obs_len: usize,
    mean_out: *mut f64,
    var_out: *mut f64,
    latent_len: usize,
) -> SlfcStatus {
    guard(|| {
        let p = self::model(model)?;
        expect_len("latent buffers", latent_len, p.config.latent_dim)?;
        let q = p.encode(slice(obs, obs_len, "obs")?).map_err(lib)?;
        slice_mut(mean_out, latent_len, "mean_out")?.copy_from_slice(q.mean());
        slice_mut(var_out, latent_len, "var_out")?.copy_from_slice(q.var());
        Ok(())
    })
}

/// One control step: encode, pick the most probable skill, apply its
/// feedback law. `noise` may be null to act on the latent mean; otherwise
/// it holds `latent_dim` standard-normal draws.
///
/// # Safety
/// Buffers must be valid for their stated lengths; `skill_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn slfc_model_act(
    model: *const SlfcModel,
    obs: *const f64,
    obs_len: usize,
    noise: *const f64,
    noise_len: usize,
    action_out: *mut f64,
    action_len: usize,
    skill_out: *mut usize,
) -> SlfcStatus {
    guard(|| {
        let p = self::model(model)?;
        expect_len("action_out", action_len, p.config.action_dim)?;
        let o = slice(obs, obs_len, "obs")?;
        let noise = if noise.is_null() { None } else { Some(slice(noise, noise_len, "noise")?) };
        let pred = p.act(o, noise).map_err(lib)?;
        slice_mut(action_out, action_len, "action_out")?.copy_from_slice(&pred.action);
        if let Some(s) = skill_out.as_mut() {
            *s = pred.skill;
        }
        Ok(())
    })
}

/// Posterior probability of every skill given a latent state and action.
///
/// # Safety
/// Buffers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn slfc_model_posterior_skill(
    model: *const SlfcModel,
    z: *const f64,
    z_len: usize,
    u: *const f64,
    u_len: usize,
    probs_out: *mut f64,
    probs_len: usize,
) -> SlfcStatus {
    guard(|| {
        let p = self::model(model)?;
        expect_len("probs_out", probs_len, p.config.num_skills)?;
        let q = p
            .posterior_skill(slice(z, z_len, "z")?, slice(u, u_len, "u")?)
            .map_err(lib)?;
        slice_mut(probs_out, probs_len, "probs_out")?.copy_from_slice(&q.probs());
        Ok(())
    })
}

/// Discrete Fréchet distance between two paths of `dim`-vectors stored as
/// `a_points x dim` and `b_points x dim` row-major arrays.
///
/// # Safety
/// Buffers must be valid for their stated lengths and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn slfc_frechet_distance(
    a: *const f64,
    a_points: usize,
    b: *const f64,
    b_points: usize,
    dim: usize,
    out: *mut f64,
) -> SlfcStatus {
    guard(|| {
        if dim == 0 {
            return Err(bad("dim must be at least 1".into()));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let path = |ptr, n, name| -> Result<Vec<Vec<f64>>, (SlfcStatus, String)> {
            let len = n * dim;
            Ok(slice(ptr, len, name)?.chunks(dim).map(<[f64]>::to_vec).collect())
        };
        *out = frechet_distance(&path(a, a_points, "a")?, &path(b, b_points, "b")?).map_err(lib)?;
        Ok(())
    })
}

/// Rewrites a linear layer `W z + b` (`W` is `action_dim x latent_dim`) as
/// the feedback law `K (g - z)`. Writes `K` (`action_dim x latent_dim`),
/// `g` (`latent_dim`) and the part of `b` outside the range of `W`
/// (`action_dim`, zero when exact).
///
/// # Safety
/// Buffers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn slfc_layer_to_controller(
    weight: *const f64,
    bias: *const f64,
    action_dim: usize,
    latent_dim: usize,
    gain_out: *mut f64,
    goal_out: *mut f64,
    residual_out: *mut f64,
) -> SlfcStatus {
    guard(|| {
        if action_dim == 0 || latent_dim == 0 {
            return Err(bad("dimensions must be at least 1".into()));
        }
        let w = Matrix::from_vec(action_dim, latent_dim, slice(weight, action_dim * latent_dim, "weight")?.to_vec())
            .map_err(lib)?;
        let form = layer_to_controller(&w, slice(bias, action_dim, "bias")?, PINV_RTOL).map_err(lib)?;
        slice_mut(gain_out, action_dim * latent_dim, "gain_out")?.copy_from_slice(form.gain.as_slice());
        slice_mut(goal_out, latent_dim, "goal_out")?.copy_from_slice(&form.goal);
        slice_mut(residual_out, action_dim, "residual_out")?.copy_from_slice(&form.residual);
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the full message
/// length in bytes, excluding the terminator. Empty after a successful call.
///
/// # Safety
/// `buf` must be null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn slfc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn slfc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
