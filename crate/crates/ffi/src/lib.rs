//! C ABI for the encoder, the behavior-cloning policy and the simulator.
//!
//! Every function returns an [`MvpStatus`]; on failure the message is kept
//! per thread and read with [`mvp_last_error`]. Handles are opaque and must
//! be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mvp::image::RgbImage;
use mvp::mae::EncoderCheckpoint;
use mvp::policy::{BcPolicy, PolicyCheckpoint};
use mvp::simworld::{self, Camera, SimState, TaskId, Variation};
use mvp::vit::{self, EncoderConfig};
use mvp::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvpStatus {
    MvpOk = 0,
    MvpErrNull = 1,
    MvpErrInvalidArgument = 2,
    MvpErrShape = 3,
    MvpErrConfig = 4,
    MvpErrIo = 5,
    MvpErrFormat = 6,
    MvpErrFingerprint = 7,
    MvpErrEmbodiment = 8,
    MvpErrNonFinite = 9,
    MvpErrBufferTooSmall = 10,
    MvpErrPanic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvpCamera {
    MvpCameraWrist = 0,
    MvpCameraThird = 1,
}

/// Opaque encoder handle.
pub struct MvpEncoder(EncoderCheckpoint);

/// Opaque policy handle, bound to its encoder.
pub struct MvpPolicy(BcPolicy);

/// Opaque simulator episode.
pub struct MvpSim(SimState);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> MvpStatus {
    match e {
        Error::Config(_) => MvpStatus::MvpErrConfig,
        Error::Shape(_) => MvpStatus::MvpErrShape,
        Error::Usage(_) | Error::InvalidArgument(_) => MvpStatus::MvpErrInvalidArgument,
        Error::NonFinite(_) => MvpStatus::MvpErrNonFinite,
        Error::Embodiment { .. } => MvpStatus::MvpErrEmbodiment,
        Error::Fingerprint { .. } => MvpStatus::MvpErrFingerprint,
        Error::Format { .. } | Error::CorruptStep { .. } | Error::Json(_) => MvpStatus::MvpErrFormat,
        Error::Io { .. } => MvpStatus::MvpErrIo,
    }
}

struct Fail(MvpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MvpStatus::MvpErrNull, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MvpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MvpStatus::MvpOk
        }
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            MvpStatus::MvpErrPanic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MvpStatus::MvpErrInvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn write_out<T: Copy>(src: &[T], out: *mut T, cap: usize, written: *mut usize) -> Result<(), Fail> {
    if !written.is_null() {
        *written = src.len();
    }
    if cap < src.len() {
        return Err(Fail(
            MvpStatus::MvpErrBufferTooSmall,
            format!("buffer holds {cap}, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

unsafe fn image_arg(rgb: *const u8, width: usize, height: usize, size: usize) -> Result<RgbImage, Fail> {
    let data = slice_arg(rgb, width * height * 3, "rgb")?;
    let img = RgbImage::new(width, height, data.to_vec())?;
    Ok(if width == size && height == size { img } else { img.center_crop_resize(size) })
}

/// Copies the calling thread's last error message (NUL-terminated) into
/// `buf` and returns its length without the terminator. Passing a null
/// `buf` only reports the length.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mvp_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = e.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(e.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        e.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mvp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Parameter count of an encoder tier (`"vit-s"`, `"vit-b"`, ...).
///
/// # Safety
/// `tier` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvp_count_params(tier: *const c_char, out: *mut u64) -> MvpStatus {
    guard(|| {
        let c = EncoderConfig::from_tier(str_arg(tier, "tier")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = vit::count_params(&c);
        Ok(())
    })
}

/// Multiply-add count of one forward pass at `image_size`.
///
/// # Safety
/// `tier` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvp_count_flops(tier: *const c_char, image_size: usize, out: *mut u64) -> MvpStatus {
    guard(|| {
        let c = EncoderConfig::from_tier(str_arg(tier, "tier")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = vit::count_flops(&c, image_size)?;
        Ok(())
    })
}

/// Loads an encoder checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvp_encoder_load(path: *const c_char, out: *mut *mut MvpEncoder) -> MvpStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = EncoderCheckpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(MvpEncoder(ck)));
        Ok(())
    })
}

/// A randomly initialized encoder of `tier`.
///
/// # Safety
/// `tier` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvp_encoder_random(tier: *const c_char, seed: u64, out: *mut *mut MvpEncoder) -> MvpStatus {
    guard(|| {
        let c = EncoderConfig::from_tier(str_arg(tier, "tier")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(MvpEncoder(EncoderCheckpoint::random(&c, seed)?)));
        Ok(())
    })
}

/// # Safety
/// `enc` must come from an `mvp_encoder_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvp_encoder_free(enc: *mut MvpEncoder) {
    if !enc.is_null() {
        drop(Box::from_raw(enc));
    }
}

/// Feature width and input image size of an encoder.
///
/// # Safety
/// `enc` must be a live handle; outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn mvp_encoder_dims(enc: *const MvpEncoder, width: *mut usize, image_size: *mut usize) -> MvpStatus {
    guard(|| {
        let e = enc.as_ref().ok_or_else(|| null("encoder"))?;
        if !width.is_null() {
            *width = e.0.config.width;
        }
        if !image_size.is_null() {
            *image_size = e.0.config.image_size;
        }
        Ok(())
    })
}

/// Hex fingerprint of the encoder parameters, NUL-terminated (65 bytes).
///
/// # Safety
/// `enc` must be a live handle; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn mvp_encoder_fingerprint(enc: *const MvpEncoder, buf: *mut c_char, cap: usize) -> MvpStatus {
    guard(|| {
        let e = enc.as_ref().ok_or_else(|| null("encoder"))?;
        let mut fp = e.0.fingerprint().into_bytes();
        fp.push(0);
        write_out(&fp, buf as *mut u8, cap, std::ptr::null_mut())
    })
}

/// Classification feature of an interleaved 8-bit RGB image of
/// `width` x `height` pixels. Non-square or differently sized images are
/// center-cropped and resized.
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes; `out` must hold `cap` floats;
/// `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn mvp_encoder_embed(
    enc: *const MvpEncoder,
    rgb: *const u8,
    width: usize,
    height: usize,
    out: *mut f32,
    cap: usize,
    written: *mut usize,
) -> MvpStatus {
    guard(|| {
        let e = &enc.as_ref().ok_or_else(|| null("encoder"))?.0;
        let img = image_arg(rgb, width, height, e.config.image_size)?;
        let f = vit::encode(&e.config, &e.params, &img.to_tensor())?.cls_feature;
        write_out(f.data(), out, cap, written)
    })
}

/// Loads a policy checkpoint and binds it to `enc`, which must be the
/// encoder it was trained on unless the policy carries a finetuned one.
///
/// # Safety
/// `path` must be a NUL-terminated string, `enc` a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mvp_policy_load(path: *const c_char, enc: *const MvpEncoder, out: *mut *mut MvpPolicy) -> MvpStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let e = &enc.as_ref().ok_or_else(|| null("encoder"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = PolicyCheckpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(MvpPolicy(BcPolicy::new("policy", ck, e)?)));
        Ok(())
    })
}

/// # Safety
/// `policy` must come from [`mvp_policy_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvp_policy_free(policy: *mut MvpPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Simulator action (joint deltas, then the gripper command for the arm)
/// for one observation.
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes, `proprio` `n_proprio` values,
/// `out` `cap` values; `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn mvp_policy_act(
    policy: *const MvpPolicy,
    rgb: *const u8,
    width: usize,
    height: usize,
    proprio: *const f64,
    n_proprio: usize,
    out: *mut f64,
    cap: usize,
    written: *mut usize,
) -> MvpStatus {
    guard(|| {
        let p = &policy.as_ref().ok_or_else(|| null("policy"))?.0;
        let size = p.encoder().config.image_size;
        let img = if p.checkpoint.config.modality.uses_image() {
            image_arg(rgb, width, height, size)?
        } else {
            RgbImage::filled(1, 1, [0, 0, 0])
        };
        let q = slice_arg(proprio, n_proprio, "proprio")?;
        let a = p.action_for(&img, q)?.to_sim();
        write_out(&a, out, cap, written)
    })
}

/// New episode of `task`; `variation` < 0 draws a random one.
///
/// # Safety
/// `task` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvp_sim_new(task: *const c_char, variation: i32, seed: u64, out: *mut *mut MvpSim) -> MvpStatus {
    guard(|| {
        let t: TaskId = str_arg(task, "task")?.parse()?;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = if variation < 0 { Variation::Random } else { Variation::Grid(variation as usize) };
        *out = Box::into_raw(Box::new(MvpSim(simworld::reset(t, v, seed)?)));
        Ok(())
    })
}

/// # Safety
/// `sim` must come from [`mvp_sim_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvp_sim_free(sim: *mut MvpSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Advances one control step.
///
/// # Safety
/// `sim` must be a live handle; `action` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn mvp_sim_step(sim: *mut MvpSim, action: *const f64, n: usize) -> MvpStatus {
    guard(|| {
        let s = sim.as_mut().ok_or_else(|| null("sim"))?;
        let a = slice_arg(action, n, "action")?;
        s.0 = simworld::step(&s.0, a)?;
        Ok(())
    })
}

/// Whether the task's success predicate holds.
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvp_sim_success(sim: *const MvpSim, out: *mut bool) -> MvpStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = simworld::success(&s.0);
        Ok(())
    })
}

/// Proprioceptive vector of the current state.
///
/// # Safety
/// `sim` must be a live handle; `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn mvp_sim_proprio(sim: *const MvpSim, out: *mut f64, cap: usize, written: *mut usize) -> MvpStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        write_out(&s.0.proprio(), out, cap, written)
    })
}

/// Noise-free scripted action for the current state.
///
/// # Safety
/// `sim` must be a live handle; `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn mvp_sim_expert_action(sim: *const MvpSim, out: *mut f64, cap: usize, written: *mut usize) -> MvpStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        write_out(&simworld::expert_action(&s.0)?, out, cap, written)
    })
}

/// Renders a camera view as interleaved 8-bit RGB (64 x 64 x 3 bytes).
///
/// # Safety
/// `sim` must be a live handle; `out` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn mvp_sim_render(sim: *const MvpSim, camera: MvpCamera, out: *mut u8, cap: usize, written: *mut usize) -> MvpStatus {
    guard(|| {
        let s = sim.as_ref().ok_or_else(|| null("sim"))?;
        let cam = match camera {
            MvpCamera::MvpCameraWrist => Camera::Wrist,
            MvpCamera::MvpCameraThird => Camera::Third,
        };
        write_out(&simworld::render(&s.0, cam).data, out, cap, written)
    })
}
