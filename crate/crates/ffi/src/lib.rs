//! C ABI over the `collis` crate.
//!
//! Every fallible function returns a [`CollisStatus`]; on failure the message
//! is available from [`collis_last_error`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_read` functions and released with the
//! matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use collis::cda::{CdaConfig, CdaController};
use collis::config::RunConfig;
use collis::data::{generate_scene, read_cloud, write_cloud, Point, PointCloud, SceneConfig};
use collis::reliability::{absolute_reliability, threshold};
use collis::repr::{project, ReprConfig};
use collis::rng::SeedStreams;
use collis::students::{read_checkpoint, write_checkpoint, StudentModel};
use collis::Error;
use num_rational::Ratio;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollisStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    LengthMismatch = 3,
    Config = 4,
    Format = 5,
    NonFinite = 6,
    Io = 7,
    Panic = 8,
}

/// Grid family with its default resolution.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollisRepr {
    Range = 0,
    Polar = 1,
    Voxel = 2,
}

impl CollisRepr {
    fn config(self) -> ReprConfig {
        match self {
            CollisRepr::Range => ReprConfig::default_range(),
            CollisRepr::Polar => ReprConfig::default_polar(),
            CollisRepr::Voxel => ReprConfig::default_voxel(),
        }
    }
}

/// Opaque point cloud.
pub struct CollisCloud(PointCloud);

/// Opaque student classifier.
pub struct CollisStudent(StudentModel);

/// Opaque mixing-probability controller.
pub struct CollisCda(CdaController);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> CollisStatus {
    match err {
        Error::Config(_) => CollisStatus::Config,
        Error::InvalidArgument(_) => CollisStatus::InvalidArgument,
        Error::LengthMismatch { .. } => CollisStatus::LengthMismatch,
        Error::Format(_) | Error::Json(_) => CollisStatus::Format,
        Error::NonFinite(_) => CollisStatus::NonFinite,
        Error::Io(_) => CollisStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CollisStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CollisStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            CollisStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            CollisStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    Ok(PathBuf::from(text(p, what)?))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidArgument(format!("{what} is not valid UTF-8"))))
}

fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    // SAFETY: checked non-null above; caller provides a writable slot.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn collis_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn collis_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a cloud from `n` interleaved (x, y, z, intensity) records.
///
/// # Safety
/// `xyzi` must point to `4 * n` floats and `out` to a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn collis_cloud_new(
    xyzi: *const f32,
    n: usize,
    num_classes: u16,
    out: *mut *mut CollisCloud,
) -> CollisStatus {
    guard(|| {
        let raw = slice(xyzi, n * 4, "xyzi")?;
        let points = raw.chunks_exact(4).map(|c| Point::new(c[0], c[1], c[2], c[3])).collect();
        put(out, CollisCloud(PointCloud::new(points, num_classes)?))
    })
}

/// Generates one synthetic scene with the default generator settings.
///
/// # Safety
/// `out` must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn collis_cloud_generate(seed: u64, out: *mut *mut CollisCloud) -> CollisStatus {
    guard(|| put(out, CollisCloud(generate_scene(seed, &SceneConfig::default())?)))
}

/// # Safety
/// `file` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn collis_cloud_read(file: *const c_char, out: *mut *mut CollisCloud) -> CollisStatus {
    guard(|| put(out, CollisCloud(read_cloud(path(file, "path")?)?)))
}

/// # Safety
/// `cloud` must be a live handle and `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn collis_cloud_write(cloud: *const CollisCloud, file: *const c_char) -> CollisStatus {
    guard(|| Ok(write_cloud(&as_ref(cloud, "cloud")?.0, path(file, "path")?)?))
}

/// Number of points, or 0 for NULL.
///
/// # Safety
/// `cloud` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn collis_cloud_len(cloud: *const CollisCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.0.len())
}

/// Attaches one label per point.
///
/// # Safety
/// `labels` must point to `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn collis_cloud_set_labels(cloud: *mut CollisCloud, labels: *const u8, n: usize) -> CollisStatus {
    guard(|| {
        let c = as_mut(cloud, "cloud")?;
        let labels = slice(labels, n, "labels")?.to_vec();
        c.0 = c.0.clone().with_labels(labels)?;
        Ok(())
    })
}

/// Copies the labels into `out`; fails when the cloud is unlabeled.
///
/// # Safety
/// `out` must point to `n` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn collis_cloud_labels(cloud: *const CollisCloud, out: *mut u8, n: usize) -> CollisStatus {
    guard(|| {
        let c = &as_ref(cloud, "cloud")?.0;
        let labels = c
            .labels()
            .ok_or_else(|| Error::InvalidArgument("cloud has no labels".into()))?;
        collis_len(c.len(), n)?;
        slice_mut(out, n, "out")?.copy_from_slice(labels);
        Ok(())
    })
}

/// # Safety
/// `cloud` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn collis_cloud_free(cloud: *mut CollisCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

fn collis_len(expected: usize, actual: usize) -> Result<(), Failure> {
    if expected == actual {
        Ok(())
    } else {
        Err(Failure::Lib(Error::LengthMismatch {
            what: "output buffer",
            expected,
            actual,
        }))
    }
}

/// Writes each point's cell index in the default grid of `repr`, or -1 for
/// points outside the grid.
///
/// # Safety
/// `out` must point to `n` writable integers, `n` equal to the cloud length.
#[no_mangle]
pub unsafe extern "C" fn collis_project(
    cloud: *const CollisCloud,
    repr: CollisRepr,
    out: *mut i64,
    n: usize,
) -> CollisStatus {
    guard(|| {
        let c = &as_ref(cloud, "cloud")?.0;
        collis_len(c.len(), n)?;
        let mapping = project(c, &repr.config())?;
        for (o, cell) in slice_mut(out, n, "out")?.iter_mut().zip(mapping.point_to_cell()) {
            *o = cell.map_or(-1, i64::from);
        }
        Ok(())
    })
}

/// Fresh randomly initialised student.
///
/// # Safety
/// `out` must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn collis_student_new(
    id: u32,
    repr: CollisRepr,
    hidden: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut CollisStudent,
) -> CollisStatus {
    guard(|| {
        let s = StudentModel::new(id, repr.config(), hidden, classes, &SeedStreams::new(seed))?;
        put(out, CollisStudent(s))
    })
}

/// # Safety
/// `file` must be a NUL-terminated string and `out` a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn collis_student_read(
    file: *const c_char,
    repr: CollisRepr,
    out: *mut *mut CollisStudent,
) -> CollisStatus {
    guard(|| {
        let (id, params) = read_checkpoint(path(file, "path")?)?;
        put(out, CollisStudent(StudentModel::from_params(id, repr.config(), params)))
    })
}

/// # Safety
/// `student` must be a live handle and `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn collis_student_write(student: *const CollisStudent, file: *const c_char) -> CollisStatus {
    guard(|| Ok(write_checkpoint(&as_ref(student, "student")?.0, path(file, "path")?)?))
}

/// Per-point predicted class and confidence. Either output may be NULL.
///
/// # Safety
/// Non-NULL outputs must point to `n` writable elements, `n` equal to the
/// cloud length.
#[no_mangle]
pub unsafe extern "C" fn collis_student_predict(
    student: *const CollisStudent,
    cloud: *const CollisCloud,
    labels: *mut u8,
    confidence: *mut f64,
    n: usize,
) -> CollisStatus {
    guard(|| {
        let s = &as_ref(student, "student")?.0;
        let c = &as_ref(cloud, "cloud")?.0;
        collis_len(c.len(), n)?;
        let out = s.predict(c)?;
        if !labels.is_null() {
            slice_mut(labels, n, "labels")?.copy_from_slice(&out.predictions);
        }
        if !confidence.is_null() {
            slice_mut(confidence, n, "confidence")?.copy_from_slice(&out.confidence);
        }
        Ok(())
    })
}

/// # Safety
/// `student` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn collis_student_free(student: *mut CollisStudent) {
    if !student.is_null() {
        drop(Box::from_raw(student));
    }
}

/// Consensus-driven controller starting at `q_init`, updating every `step_size` observations.
///
/// # Safety
/// `out` must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn collis_cda_new_consensus(q_init: f64, step_size: usize, out: *mut *mut CollisCda) -> CollisStatus {
    guard(|| put(out, CollisCda(CdaController::new(CdaConfig::Consensus { q_init, step_size })?)))
}

/// # Safety
/// `out` must be a writable handle slot.
#[no_mangle]
pub unsafe extern "C" fn collis_cda_new_constant(q: f64, out: *mut *mut CollisCda) -> CollisStatus {
    guard(|| put(out, CollisCda(CdaController::new(CdaConfig::Constant { q })?)))
}

/// Feeds one step's agreement; writes the current probability to `q_out` if non-NULL.
///
/// # Safety
/// `cda` must be a live handle; `q_out` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn collis_cda_observe(cda: *mut CollisCda, agreement: f64, mixed: bool, q_out: *mut f64) -> CollisStatus {
    guard(|| {
        let c = &mut as_mut(cda, "cda")?.0;
        c.observe(agreement, mixed);
        if let Some(q) = q_out.as_mut() {
            *q = c.q_m();
        }
        Ok(())
    })
}

/// Current mixing probability, or NaN for NULL.
///
/// # Safety
/// `cda` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn collis_cda_q(cda: *const CollisCda) -> f64 {
    cda.as_ref().map_or(f64::NAN, |c| c.0.q_m())
}

/// # Safety
/// `cda` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn collis_cda_free(cda: *mut CollisCda) {
    if !cda.is_null() {
        drop(Box::from_raw(cda));
    }
}

/// Epoch-linear reliability and unlabeled-loss weight.
///
/// # Safety
/// `beta` and `lambda_u` must be writable.
#[no_mangle]
pub unsafe extern "C" fn collis_absolute_reliability(
    epoch: usize,
    max_epochs: usize,
    lambda0: f64,
    beta: *mut f64,
    lambda_u: *mut f64,
) -> CollisStatus {
    guard(|| {
        let (b, l) = absolute_reliability(epoch, max_epochs, lambda0)?;
        *as_mut(beta, "beta")? = b;
        *as_mut(lambda_u, "lambda_u")? = l;
        Ok(())
    })
}

/// Pseudo-label threshold for a source whose relative reliability is
/// `gamma_num / gamma_den` (smoothed dominance counts).
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn collis_threshold(
    delta0: f64,
    beta: f64,
    gamma_num: u64,
    gamma_den: u64,
    out: *mut f64,
) -> CollisStatus {
    guard(|| {
        if gamma_num == 0 || gamma_den == 0 {
            return Err(Error::InvalidArgument("dominance counts must be positive".into()).into());
        }
        *as_mut(out, "out")? = threshold(delta0, beta, Ratio::new(gamma_num, gamma_den));
        Ok(())
    })
}

/// Runs a full training job from a JSON run configuration, writing the
/// metrics log and checkpoints to the configured output directory.
///
/// # Safety
/// `config_json` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn collis_train(config_json: *const c_char) -> CollisStatus {
    guard(|| {
        let config = RunConfig::from_json(text(config_json, "config_json")?)?;
        collis::cli::cmd_train(&config)?;
        Ok(())
    })
}
