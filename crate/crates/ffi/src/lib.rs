//! C ABI over the savid pipeline and metrics.
//!
//! Every fallible call returns a [`SavidStatus`]; on failure the message is
//! available from [`savid_last_error`] on the same thread until the next
//! failing call. Handles are opaque and must be released with their `_free`
//! function. Variable-length outputs follow one pattern: the caller passes a
//! buffer and its capacity, the callee always writes the required length and
//! returns `SAVID_STATUS_BUFFER_TOO_SMALL` when the capacity is short.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use savid::corruption::{corrupt_image, corrupt_lidar, CorruptionKind, CorruptionSpec, SeverityTable};
use savid::metrics::{self, Box3D, RobustnessTable};
use savid::numerics::Tensor;
use savid::pipeline::{
    emit_report, generate_scene, run_forward, run_robustness_suite, ForwardOutput, Model, PipelineConfig,
    ProxyScorer, SyntheticScene,
};
use savid::pointcloud::PointCloud;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SavidStatus {
    Ok = 0,
    /// Bad argument, malformed config or unknown key.
    InvalidArgument = 1,
    /// Non-finite intermediate values or another numerical failure.
    Numerical = 2,
    Io = 3,
    NullPointer = 4,
    /// Output buffer shorter than the length written to the `len` out-param.
    BufferTooSmall = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Box with center, `(l, w, h)` size and yaw in `(-pi, pi]`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SavidBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u32,
    pub score: f64,
}

impl From<&Box3D> for SavidBox {
    fn from(b: &Box3D) -> Self {
        Self {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            class_id: b.class_id,
            score: b.score,
        }
    }
}

impl SavidBox {
    fn to_box(self) -> Result<Box3D, Fail> {
        Ok(Box3D::new(self.center, self.size, self.yaw, self.class_id, self.score)?)
    }
}

/// Implemented corruption kinds, LiDAR first.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SavidCorruption {
    DensityDecrease = 0,
    Cutout = 1,
    Crosstalk = 2,
    FovLost = 3,
    GaussianNoiseL = 4,
    UniformNoiseL = 5,
    ImpulseNoiseL = 6,
    GaussianNoiseI = 7,
    UniformNoiseI = 8,
    ImpulseNoiseI = 9,
}

fn corruption_kind(code: u32) -> Result<CorruptionKind, Fail> {
    CorruptionKind::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| savid::Error::invalid(format!("unknown corruption code {code}")).into())
}

/// Feature map selector for [`savid_forward_features`]: image, LiDAR, fused
/// and keypoint-refined maps.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SavidFeature {
    Image = 0,
    Lidar = 1,
    Fused = 2,
    Refined = 3,
}

/// Opaque pipeline configuration.
pub struct SavidConfig(PipelineConfig);

/// Opaque synthetic scene.
pub struct SavidScene(SyntheticScene);

/// Opaque forward-pass result.
pub struct SavidForward(ForwardOutput);

enum Fail {
    Core(savid::Error),
    Null(&'static str),
    TooSmall { need: usize, cap: usize },
    Panic(String),
}

impl From<savid::Error> for Fail {
    fn from(e: savid::Error) -> Self {
        Fail::Core(e)
    }
}

impl Fail {
    fn status(&self) -> SavidStatus {
        match self {
            Fail::Core(savid::Error::Io { .. }) => SavidStatus::Io,
            Fail::Core(e) if e.is_validation() => SavidStatus::InvalidArgument,
            Fail::Core(_) => SavidStatus::Numerical,
            Fail::Null(_) => SavidStatus::NullPointer,
            Fail::TooSmall { .. } => SavidStatus::BufferTooSmall,
            Fail::Panic(_) => SavidStatus::Panic,
        }
    }

    fn message(&self) -> String {
        match self {
            Fail::Core(e) => e.to_string(),
            Fail::Null(name) => format!("{name} is null"),
            Fail::TooSmall { need, cap } => format!("buffer holds {cap} elements, {need} needed"),
            Fail::Panic(msg) => format!("panic: {msg}"),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    // interior NULs would truncate the C string anyway
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SavidStatus {
    let fail = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return SavidStatus::Ok,
        Ok(Err(fail)) => fail,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown".into());
            Fail::Panic(msg)
        }
    };
    set_last_error(fail.message());
    fail.status()
}

fn arg<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: non-null pointers are required by every caller contract to
    // reference a live value of `T` for the duration of the call.
    unsafe { p.as_ref() }.ok_or(Fail::Null(name))
}

fn slice<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    // SAFETY: caller guarantees `p` points to `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn out<T>(p: *mut T, value: T, name: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    // SAFETY: caller guarantees `p` is valid for a write of `T`.
    unsafe { p.write(value) };
    Ok(())
}

/// Writes `len = data.len()` then copies when `cap` suffices.
fn fill<T: Copy>(data: &[T], buf: *mut T, cap: usize, len: *mut usize) -> Result<(), Fail> {
    out(len, data.len(), "len")?;
    if cap < data.len() {
        return Err(Fail::TooSmall { need: data.len(), cap });
    }
    if !data.is_empty() {
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        // SAFETY: caller guarantees `buf` holds `cap >= data.len()` elements.
        unsafe { ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len()) };
    }
    Ok(())
}

fn c_str<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    // SAFETY: caller guarantees a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str().map_err(|e| Fail::Core(savid::Error::invalid(format!("{name} is not UTF-8: {e}"))))
}

fn into_handle<T>(value: T, handle: *mut *mut T) -> Result<(), Fail> {
    if handle.is_null() {
        return Err(Fail::Null("out"));
    }
    // SAFETY: checked non-null; caller guarantees it is writable.
    unsafe { handle.write(Box::into_raw(Box::new(value))) };
    Ok(())
}

fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `into_handle` and is freed exactly once.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn savid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn savid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Default configuration. Never null.
#[no_mangle]
pub extern "C" fn savid_config_default() -> *mut SavidConfig {
    Box::into_raw(Box::new(SavidConfig(PipelineConfig::default())))
}

/// Parses and validates a TOML configuration; unset keys keep defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn savid_config_from_toml(toml: *const c_char, out: *mut *mut SavidConfig) -> SavidStatus {
    guard(|| {
        let c = PipelineConfig::from_toml_str(c_str(toml, "toml")?)?;
        into_handle(SavidConfig(c), out)
    })
}

/// Serializes the configuration as TOML including the trailing NUL; `len`
/// receives the required byte count.
///
/// # Safety
/// `config` must be a live handle; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn savid_config_to_toml(
    config: *const SavidConfig,
    buf: *mut c_char,
    cap: usize,
    len: *mut usize,
) -> SavidStatus {
    guard(|| {
        let text = CString::new(arg(config, "config")?.0.to_toml()).expect("toml has no nul");
        let bytes = text.as_bytes_with_nul();
        fill(bytes, buf.cast(), cap, len)
    })
}

/// Feature map height, width and channel count for this configuration.
///
/// # Safety
/// `config` must be a live handle; `shape` must hold 3 elements.
#[no_mangle]
pub unsafe extern "C" fn savid_config_shape(config: *const SavidConfig, shape: *mut usize) -> SavidStatus {
    guard(|| {
        let c = &arg(config, "config")?.0;
        let mut len = 0;
        fill(&[c.height, c.width, c.channels], shape, 3, &mut len)
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn savid_config_free(config: *mut SavidConfig) {
    free_handle(config)
}

/// Deterministic synthetic scene with `frames` frames.
///
/// # Safety
/// `config` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn savid_scene_generate(
    config: *const SavidConfig,
    seed: u64,
    frames: usize,
    out: *mut *mut SavidScene,
) -> SavidStatus {
    guard(|| {
        let c = &arg(config, "config")?.0;
        let scene = generate_scene(seed, &c.scene, &c.grid, &c.camera(), frames)?;
        into_handle(SavidScene(scene), out)
    })
}

/// Number of frames, or 0 for a null handle.
///
/// # Safety
/// `scene` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn savid_scene_frame_count(scene: *const SavidScene) -> usize {
    scene.as_ref().map_or(0, |s| s.0.frames.len())
}

/// Ground-truth boxes of one frame.
///
/// # Safety
/// `scene` must be a live handle; `buf` must hold `cap` boxes.
#[no_mangle]
pub unsafe extern "C" fn savid_scene_boxes(
    scene: *const SavidScene,
    frame: usize,
    buf: *mut SavidBox,
    cap: usize,
    len: *mut usize,
) -> SavidStatus {
    guard(|| {
        let s = &arg(scene, "scene")?.0;
        let f = s.frames.get(frame).ok_or_else(|| {
            savid::Error::invalid(format!("frame {frame} out of range for {} frames", s.frames.len()))
        })?;
        let boxes: Vec<SavidBox> = f.boxes.iter().map(SavidBox::from).collect();
        fill(&boxes, buf, cap, len)
    })
}

/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn savid_scene_free(scene: *mut SavidScene) {
    free_handle(scene)
}

/// Runs the first `sequence_length` frames of the scene through the pipeline.
///
/// # Safety
/// `config` and `scene` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn savid_forward(
    config: *const SavidConfig,
    scene: *const SavidScene,
    out: *mut *mut SavidForward,
) -> SavidStatus {
    guard(|| {
        let c = &arg(config, "config")?.0;
        let s = &arg(scene, "scene")?.0;
        let model = Model::new(c)?;
        let result = run_forward(c, &model, &s.frames)?;
        into_handle(SavidForward(result), out)
    })
}

/// Number of processed frames, or 0 for a null handle.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn savid_forward_frame_count(result: *const SavidForward) -> usize {
    result.as_ref().map_or(0, |r| r.0.frames.len())
}

/// Copies one `[H, W, C]` feature map, row-major, of one frame. `feature` is
/// a [`SavidFeature`] value.
///
/// # Safety
/// `result` must be a live handle; `buf` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn savid_forward_features(
    result: *const SavidForward,
    frame: usize,
    feature: u32,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> SavidStatus {
    guard(|| {
        let r = &arg(result, "result")?.0;
        let f = r.frames.get(frame).ok_or_else(|| {
            savid::Error::invalid(format!("frame {frame} out of range for {} frames", r.frames.len()))
        })?;
        let t = match feature {
            x if x == SavidFeature::Image as u32 => &f.f_i,
            x if x == SavidFeature::Lidar as u32 => &f.f_l,
            x if x == SavidFeature::Fused as u32 => &f.f_s,
            x if x == SavidFeature::Refined as u32 => &f.f_kgf,
            other => return Err(savid::Error::invalid(format!("unknown feature code {other}")).into()),
        };
        fill(t.data(), buf, cap, len)
    })
}

/// # Safety
/// `result` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn savid_forward_free(result: *mut SavidForward) {
    free_handle(result)
}

/// Runs the full corruption sweep with the built-in proxy scorer and writes
/// `report.json` and `rce.csv` into `out_dir`.
///
/// # Safety
/// `config` must be a live handle and `out_dir` a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn savid_robustness(config: *const SavidConfig, out_dir: *const c_char) -> SavidStatus {
    guard(|| {
        let c = &arg(config, "config")?.0;
        let dir = Path::new(c_str(out_dir, "out_dir")?);
        let table = match &c.severity_table {
            Some(path) => SeverityTable::load(path)?,
            None => SeverityTable::builtin().clone(),
        };
        let model = Model::new(c)?;
        let scene = generate_scene(c.seeds.scene, &c.scene, &c.grid, &model.camera, c.sequence_length)?;
        let report = run_robustness_suite(c, &model, &scene, &ProxyScorer::new(c), &table)?;
        Ok(emit_report(&report, dir)?)
    })
}

/// Bird's-eye IoU of two boxes.
///
/// # Safety
/// `a` and `b` must point to boxes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn savid_bev_iou(a: *const SavidBox, b: *const SavidBox, out_iou: *mut f64) -> SavidStatus {
    guard(|| {
        let (a, b) = (arg(a, "a")?.to_box()?, arg(b, "b")?.to_box()?);
        out(out_iou, metrics::bev_iou(&a, &b), "out_iou")
    })
}

/// Greedy NMS; writes kept indices in selection order.
///
/// # Safety
/// `boxes` must hold `n` boxes; `keep` must hold `cap` indices.
#[no_mangle]
pub unsafe extern "C" fn savid_nms(
    boxes: *const SavidBox,
    n: usize,
    iou_threshold: f64,
    keep: *mut usize,
    cap: usize,
    len: *mut usize,
) -> SavidStatus {
    guard(|| {
        let boxes = slice(boxes, n, "boxes")?
            .iter()
            .map(|b| b.to_box())
            .collect::<Result<Vec<_>, _>>()?;
        fill(&metrics::nms(&boxes, iou_threshold)?, keep, cap, len)
    })
}

/// Relative degradation `(ap_cln - x) / ap_cln`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn savid_rce(ap_cln: f64, x: f64, out_rce: *mut f64) -> SavidStatus {
    guard(|| out(out_rce, metrics::rce(ap_cln, x)?, "out_rce"))
}

/// Mean corrupted AP. `ap` is `kinds x 5`, row-major by severity, for the
/// first `kinds` entries of [`SavidCorruption`] in declaration order.
///
/// # Safety
/// `ap` must hold `kinds * 5` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn savid_ap_corr(ap: *const f64, kinds: usize, out_ap: *mut f64) -> SavidStatus {
    guard(|| {
        if kinds == 0 || kinds > CorruptionKind::ALL.len() {
            return Err(savid::Error::invalid(format!("kinds must be in 1..=10, got {kinds}")).into());
        }
        let values = slice(ap, kinds * 5, "ap")?;
        let mut table = RobustnessTable::new(1.0, &CorruptionKind::ALL[..kinds]);
        for (i, &kind) in CorruptionKind::ALL[..kinds].iter().enumerate() {
            for s in 1..=5u8 {
                table.insert(kind, s, values[i * 5 + s as usize - 1]);
            }
        }
        out(out_ap, metrics::ap_corr(&table)?, "out_ap")
    })
}

/// Applies a LiDAR corruption to `n` `(x, y, z, reflectance)` points. `kind`
/// is a [`SavidCorruption`] value; `len` receives the output point count.
///
/// # Safety
/// `points` must hold `4 * n` doubles; `buf` must hold `4 * cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn savid_corrupt_lidar(
    points: *const f64,
    n: usize,
    kind: u32,
    severity: u8,
    seed: u64,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> SavidStatus {
    guard(|| {
        let flat = slice(points, 4 * n, "points")?;
        let cloud = PointCloud::new(flat.chunks_exact(4).map(|p| [p[0], p[1], p[2], p[3]]).collect())?;
        let spec = CorruptionSpec::new(corruption_kind(kind)?, severity, seed)?;
        let result = corrupt_lidar(&cloud, &spec, SeverityTable::builtin())?;
        out(len, result.len(), "len")?;
        if cap < result.len() {
            return Err(Fail::TooSmall { need: result.len(), cap });
        }
        let flat: Vec<f64> = result.points.iter().flatten().copied().collect();
        let mut written = 0;
        fill(&flat, buf, 4 * cap, &mut written)
    })
}

/// Applies an image corruption to an `[h, w, 3]` image in `[0, 1]`;
/// `out_image` receives the same number of values. `kind` is a
/// [`SavidCorruption`] value.
///
/// # Safety
/// `image` and `out` must each hold `h * w * 3` doubles.
#[no_mangle]
pub unsafe extern "C" fn savid_corrupt_image(
    image: *const f64,
    h: usize,
    w: usize,
    kind: u32,
    severity: u8,
    seed: u64,
    out_image: *mut f64,
) -> SavidStatus {
    guard(|| {
        let n = h * w * 3;
        let t = Tensor::new(vec![h, w, 3], slice(image, n, "image")?.to_vec())?;
        let spec = CorruptionSpec::new(corruption_kind(kind)?, severity, seed)?;
        let result = corrupt_image(&t, &spec, SeverityTable::builtin())?;
        let mut written = 0;
        fill(result.data(), out_image, n, &mut written)
    })
}
