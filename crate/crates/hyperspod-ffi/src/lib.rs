//! C ABI for the hyperspod toolkit.
//!
//! Conventions:
//! - Handles (`HspCube`, `HspScoreMap`, `HspDetections`) are opaque; create
//!   them through `hsp_*` constructors and release them with the matching
//!   `_free` function. `_free` accepts NULL.
//! - Every fallible call returns an `HspStatus`; on failure a thread-local
//!   message is available from `hsp_last_error_message` until the next
//!   failing call on the same thread.
//! - Panics never cross the boundary; they convert to `HSP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hyperspod::annotate::scores_to_detections;
use hyperspod::hsicube::{self, Detection, HyperCube, ScoreMap};
use hyperspod::htd::{self, DualWindow, Method, PriorSpectra};
use hyperspod::Error;

/// Status codes returned by every fallible `hsp_*` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HspStatus {
    /// Success.
    HspStatusOk = 0,
    /// A pointer argument was NULL.
    HspStatusNullPointer = 1,
    /// A string argument was not valid UTF-8.
    HspStatusInvalidUtf8 = 2,
    /// Invalid argument or configuration.
    HspStatusInvalidArgument = 3,
    /// File or serialization error.
    HspStatusIo = 4,
    /// Numerical failure (singular statistics, degenerate data).
    HspStatusNumeric = 5,
    /// An internal panic was caught.
    HspStatusPanic = 6,
}

use HspStatus::*;

/// Opaque hyperspectral cube handle.
pub struct HspCube {
    inner: HyperCube,
}

/// Opaque per-pixel score map handle.
pub struct HspScoreMap {
    inner: ScoreMap,
}

/// Opaque detection list handle.
pub struct HspDetections {
    inner: Vec<Detection>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: HspStatus, message: impl std::fmt::Display) -> HspStatus {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).unwrap_or_default();
    });
    status
}

fn fail_error(e: &Error) -> HspStatus {
    let status = match e {
        Error::Io { .. } | Error::Json { .. } => HspStatusIo,
        Error::SingularCorrelation | Error::DegenerateBand { .. } | Error::DegenerateGt => {
            HspStatusNumeric
        }
        _ => HspStatusInvalidArgument,
    };
    fail(status, e)
}

/// Message of the most recent failure on this thread; empty string when no
/// failure occurred. The pointer stays valid until the next failing call
/// on the same thread.
#[no_mangle]
pub extern "C" fn hsp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, HspStatus> {
    if ptr.is_null() {
        return Err(fail(HspStatusNullPointer, "path is NULL"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => Err(fail(HspStatusInvalidUtf8, "path is not valid UTF-8")),
    }
}

fn guarded(f: impl FnOnce() -> HspStatus) -> HspStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(HspStatusPanic, "internal panic"),
    }
}

// ---------------------------------------------------------------------------
// Cube
// ---------------------------------------------------------------------------

/// Read a cube from a `.hsc` file (with its sidecar header) into a new
/// handle stored in `*out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsp_cube_read(path: *const c_char, out: *mut *mut HspCube) -> HspStatus {
    guarded(|| {
        if out.is_null() {
            return fail(HspStatusNullPointer, "out is NULL");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match hsicube::read_cube(path) {
            Ok(cube) => {
                *out = Box::into_raw(Box::new(HspCube { inner: cube }));
                HspStatusOk
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Write a cube (data plus sidecar header) to `path`.
///
/// # Safety
/// `cube` must be a live handle and `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hsp_cube_write(cube: *const HspCube, path: *const c_char) -> HspStatus {
    guarded(|| {
        let Some(cube) = cube.as_ref() else {
            return fail(HspStatusNullPointer, "cube is NULL");
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match hsicube::write_cube(&cube.inner, path) {
            Ok(()) => HspStatusOk,
            Err(e) => fail_error(&e),
        }
    })
}

/// Fetch cube dimensions; any of the out pointers may be NULL to skip.
///
/// # Safety
/// `cube` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hsp_cube_dims(
    cube: *const HspCube,
    height: *mut usize,
    width: *mut usize,
    bands: *mut usize,
) -> HspStatus {
    guarded(|| {
        let Some(cube) = cube.as_ref() else {
            return fail(HspStatusNullPointer, "cube is NULL");
        };
        if !height.is_null() {
            *height = cube.inner.height();
        }
        if !width.is_null() {
            *width = cube.inner.width();
        }
        if !bands.is_null() {
            *bands = cube.inner.bands();
        }
        HspStatusOk
    })
}

/// Release a cube handle. NULL is allowed.
///
/// # Safety
/// `cube` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn hsp_cube_free(cube: *mut HspCube) {
    if !cube.is_null() {
        drop(Box::from_raw(cube));
    }
}

// ---------------------------------------------------------------------------
// Detection
// ---------------------------------------------------------------------------

/// Run one classic detector over `cube` for a single prior signature.
///
/// `method` is a NUL-terminated name: "cem", "smf", "osp", "asd", or
/// "tcimf" (OSP/TCIMF run with an empty undesired set here). `prior`
/// points to `prior_len` per-band values which must match the cube's band
/// count. `win_in`/`win_out` are the odd dual-window sizes.
///
/// # Safety
/// All pointers must be valid; `prior` must reference `prior_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hsp_detect(
    cube: *const HspCube,
    method: *const c_char,
    prior: *const f64,
    prior_len: usize,
    win_in: usize,
    win_out: usize,
    out: *mut *mut HspScoreMap,
) -> HspStatus {
    guarded(|| {
        let Some(cube) = cube.as_ref() else {
            return fail(HspStatusNullPointer, "cube is NULL");
        };
        if prior.is_null() || out.is_null() {
            return fail(HspStatusNullPointer, "prior or out is NULL");
        }
        let method = if method.is_null() {
            return fail(HspStatusNullPointer, "method is NULL");
        } else {
            match CStr::from_ptr(method).to_str() {
                Ok(s) => s,
                Err(_) => return fail(HspStatusInvalidUtf8, "method is not valid UTF-8"),
            }
        };
        let method: Method = match method.parse() {
            Ok(m) => m,
            Err(e) => return fail_error(&e),
        };
        let window = match DualWindow::new(win_in, win_out) {
            Ok(w) => w,
            Err(e) => return fail_error(&e),
        };
        let spectrum = std::slice::from_raw_parts(prior, prior_len).to_vec();
        let priors = [PriorSpectra { class_id: 0, spectra: vec![spectrum] }];
        match htd::detect_all(&cube.inner, &priors, method, &[window]) {
            Ok(mut maps) => {
                *out = Box::into_raw(Box::new(HspScoreMap { inner: maps.remove(0) }));
                HspStatusOk
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Fetch score-map dimensions; out pointers may be NULL to skip.
///
/// # Safety
/// `map` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hsp_score_map_dims(
    map: *const HspScoreMap,
    height: *mut usize,
    width: *mut usize,
) -> HspStatus {
    guarded(|| {
        let Some(map) = map.as_ref() else {
            return fail(HspStatusNullPointer, "map is NULL");
        };
        if !height.is_null() {
            *height = map.inner.height;
        }
        if !width.is_null() {
            *width = map.inner.width;
        }
        HspStatusOk
    })
}

/// Copy the row-major scores into `buffer` (`buffer_len` >= height*width).
///
/// # Safety
/// `buffer` must reference `buffer_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn hsp_score_map_copy(
    map: *const HspScoreMap,
    buffer: *mut f32,
    buffer_len: usize,
) -> HspStatus {
    guarded(|| {
        let Some(map) = map.as_ref() else {
            return fail(HspStatusNullPointer, "map is NULL");
        };
        if buffer.is_null() {
            return fail(HspStatusNullPointer, "buffer is NULL");
        }
        let n = map.inner.scores.len();
        if buffer_len < n {
            return fail(
                HspStatusInvalidArgument,
                format!("buffer holds {buffer_len} floats, need {n}"),
            );
        }
        std::slice::from_raw_parts_mut(buffer, n).copy_from_slice(&map.inner.scores);
        HspStatusOk
    })
}

/// Release a score-map handle. NULL is allowed.
///
/// # Safety
/// `map` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn hsp_score_map_free(map: *mut HspScoreMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

// ---------------------------------------------------------------------------
// Score map -> detections
// ---------------------------------------------------------------------------

/// Threshold a score map (after min-max normalization) and report one
/// detection per connected component.
///
/// # Safety
/// `map` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsp_scores_to_detections(
    map: *const HspScoreMap,
    threshold: f64,
    out: *mut *mut HspDetections,
) -> HspStatus {
    guarded(|| {
        let Some(map) = map.as_ref() else {
            return fail(HspStatusNullPointer, "map is NULL");
        };
        if out.is_null() {
            return fail(HspStatusNullPointer, "out is NULL");
        }
        if !(0.0..=1.0).contains(&threshold) {
            return fail(HspStatusInvalidArgument, format!("threshold {threshold} outside [0, 1]"));
        }
        let result = scores_to_detections(&map.inner, threshold);
        *out = Box::into_raw(Box::new(HspDetections { inner: result.detections }));
        HspStatusOk
    })
}

/// Number of detections in the list.
///
/// # Safety
/// `dets` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hsp_detections_count(
    dets: *const HspDetections,
    count: *mut usize,
) -> HspStatus {
    guarded(|| {
        let Some(dets) = dets.as_ref() else {
            return fail(HspStatusNullPointer, "dets is NULL");
        };
        if count.is_null() {
            return fail(HspStatusNullPointer, "count is NULL");
        }
        *count = dets.inner.len();
        HspStatusOk
    })
}

/// Fetch detection `index` as center-format box `[cx, cy, w, h]` (pixel
/// units), class id, and confidence. Out pointers may be NULL to skip.
///
/// # Safety
/// `dets` must be a live handle; `bbox`, when non-NULL, must reference
/// four writable doubles.
#[no_mangle]
pub unsafe extern "C" fn hsp_detections_get(
    dets: *const HspDetections,
    index: usize,
    bbox: *mut f64,
    class_id: *mut usize,
    confidence: *mut f64,
) -> HspStatus {
    guarded(|| {
        let Some(dets) = dets.as_ref() else {
            return fail(HspStatusNullPointer, "dets is NULL");
        };
        let Some(d) = dets.inner.get(index) else {
            return fail(
                HspStatusInvalidArgument,
                format!("index {index} out of range (len {})", dets.inner.len()),
            );
        };
        if !bbox.is_null() {
            let slice = std::slice::from_raw_parts_mut(bbox, 4);
            slice.copy_from_slice(&[d.box_.cx, d.box_.cy, d.box_.w, d.box_.h]);
        }
        if !class_id.is_null() {
            *class_id = d.class_id;
        }
        if !confidence.is_null() {
            *confidence = d.confidence;
        }
        HspStatusOk
    })
}

/// Release a detection-list handle. NULL is allowed.
///
/// # Safety
/// `dets` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn hsp_detections_free(dets: *mut HspDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hyperspod::hsicube::Unit;
    use std::ffi::CString;
    use std::ptr;

    fn write_test_cube(path: &Path) {
        // flat background with a bright 2x2 block spectrally aligned with
        // the prior
        let (h, w, bands) = (12, 12, 4);
        let mut data = vec![100.0f32; h * w * bands];
        for b in 0..bands {
            for y in 5..7 {
                for x in 5..7 {
                    data[b * h * w + y * w + x] = 100.0 + 500.0 * (b as f32 + 1.0);
                }
            }
        }
        // mild deterministic ripple so local statistics are non-singular
        for (i, v) in data.iter_mut().enumerate() {
            *v += ((i * 37 % 11) as f32) * 0.5;
        }
        let cube = HyperCube::new(h, w, bands, data, None, Unit::Radiance).unwrap();
        hsicube::write_cube(&cube, path).unwrap();
    }

    #[test]
    fn full_round_trip_through_the_c_abi() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.hsc");
        write_test_cube(&path);
        let c_path = CString::new(path.to_str().unwrap()).unwrap();

        unsafe {
            let mut cube: *mut HspCube = ptr::null_mut();
            assert_eq!(hsp_cube_read(c_path.as_ptr(), &mut cube), HspStatusOk);
            let (mut h, mut w, mut b) = (0usize, 0usize, 0usize);
            assert_eq!(hsp_cube_dims(cube, &mut h, &mut w, &mut b), HspStatusOk);
            assert_eq!((h, w, b), (12, 12, 4));

            let prior = [600.0f64, 1100.0, 1600.0, 2100.0];
            let method = CString::new("cem").unwrap();
            let mut map: *mut HspScoreMap = ptr::null_mut();
            assert_eq!(
                hsp_detect(cube, method.as_ptr(), prior.as_ptr(), 4, 3, 5, &mut map),
                HspStatusOk
            );
            let mut buf = vec![0.0f32; 144];
            assert_eq!(hsp_score_map_copy(map, buf.as_mut_ptr(), buf.len()), HspStatusOk);
            // the planted block scores highest
            let argmax = buf
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let (ax, ay) = (argmax % 12, argmax / 12);
            assert!((5..7).contains(&ax) && (5..7).contains(&ay), "argmax at ({ax}, {ay})");

            let mut dets: *mut HspDetections = ptr::null_mut();
            assert_eq!(hsp_scores_to_detections(map, 0.9, &mut dets), HspStatusOk);
            let mut count = 0usize;
            assert_eq!(hsp_detections_count(dets, &mut count), HspStatusOk);
            assert!(count >= 1);
            let mut bbox = [0.0f64; 4];
            let mut class = 42usize;
            let mut conf = 0.0f64;
            assert_eq!(
                hsp_detections_get(dets, 0, bbox.as_mut_ptr(), &mut class, &mut conf),
                HspStatusOk
            );
            assert_eq!(class, 0);
            assert!(conf > 0.0 && conf <= 1.0);
            assert!(bbox[0] > 4.0 && bbox[0] < 8.0);

            // write the cube back out and re-read it
            let out_path = dir.path().join("copy.hsc");
            let c_out = CString::new(out_path.to_str().unwrap()).unwrap();
            assert_eq!(hsp_cube_write(cube, c_out.as_ptr()), HspStatusOk);
            let mut cube2: *mut HspCube = ptr::null_mut();
            assert_eq!(hsp_cube_read(c_out.as_ptr(), &mut cube2), HspStatusOk);

            hsp_detections_free(dets);
            hsp_score_map_free(map);
            hsp_cube_free(cube);
            hsp_cube_free(cube2);
        }
    }

    #[test]
    fn errors_set_status_and_message() {
        unsafe {
            let mut cube: *mut HspCube = ptr::null_mut();
            let missing = CString::new("/nonexistent/file.hsc").unwrap();
            assert_eq!(hsp_cube_read(missing.as_ptr(), &mut cube), HspStatusIo);
            let msg = CStr::from_ptr(hsp_last_error_message()).to_str().unwrap();
            assert!(!msg.is_empty());

            assert_eq!(hsp_cube_read(ptr::null(), &mut cube), HspStatusNullPointer);
            assert_eq!(hsp_cube_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), HspStatusNullPointer);
            let mut count = 0usize;
            assert_eq!(hsp_detections_count(ptr::null(), &mut count), HspStatusNullPointer);

            // invalid window
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.hsc");
            write_test_cube(&path);
            let c_path = CString::new(path.to_str().unwrap()).unwrap();
            assert_eq!(hsp_cube_read(c_path.as_ptr(), &mut cube), HspStatusOk);
            let prior = [1.0f64; 4];
            let method = CString::new("cem").unwrap();
            let mut map: *mut HspScoreMap = ptr::null_mut();
            assert_eq!(
                hsp_detect(cube, method.as_ptr(), prior.as_ptr(), 4, 4, 6, &mut map),
                HspStatusInvalidArgument,
                "even window sizes must be rejected"
            );
            // free with NULL is a no-op
            hsp_cube_free(ptr::null_mut());
            hsp_score_map_free(ptr::null_mut());
            hsp_detections_free(ptr::null_mut());
            hsp_cube_free(cube);
        }
    }
}
