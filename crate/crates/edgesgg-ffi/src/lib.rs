//! C ABI for the edge dual scene graph library.
//!
//! The surface is JSON-in/JSON-out with opaque handles: scene and
//! checkpoint documents cross the boundary as UTF-8 C strings, loaded
//! models live behind an opaque pointer, and every fallible call returns
//! an [`EsggStatus`]. Strings returned through out-parameters are owned
//! by the caller and must be released with [`esgg_string_free`];
//! [`esgg_last_error_message`] describes the most recent failure on the
//! calling thread.
//!
//! The C header is generated into `include/edgesgg.h` at build time.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use libc::c_char;

use edgesgg::error::Error;
use edgesgg::graph::{build_edge_dual_graph, build_primitive_graph, SceneFile};
use edgesgg::metrics::{predict_scene, EvalOptions, Subtask};
use edgesgg::model::{checkpoint_from_json, DualMpnnConfig};
use edgesgg::scenes::{DetectorNoise, SceneSample, Split};
use edgesgg::tensor::ParamStore;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsggStatus {
    /// Success.
    Ok = 0,
    /// Invalid argument or configuration.
    InvalidArgument = 1,
    /// Malformed or inconsistent data.
    Data = 2,
    /// Non-finite values where finite math was required.
    Numerical = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// A string was not valid UTF-8.
    Utf8 = 5,
    /// An internal panic was caught at the boundary.
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> EsggStatus {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => EsggStatus::InvalidArgument,
        Error::Numerical(_) => EsggStatus::Numerical,
        _ => EsggStatus::Data,
    }
}

fn fail(err: &Error) -> EsggStatus {
    set_error(&err.to_string());
    status_of(err)
}

/// Message describing the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread;
/// do not free it.
#[no_mangle]
pub extern "C" fn esgg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string returned through an out-parameter.
///
/// # Safety
/// `s` must be a pointer previously returned by this library (or null).
#[no_mangle]
pub unsafe extern "C" fn esgg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn read_utf8<'a>(ptr: *const c_char) -> Result<&'a str, EsggStatus> {
    if ptr.is_null() {
        set_error("null pointer argument");
        return Err(EsggStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        EsggStatus::Utf8
    })
}

fn write_string(out: *mut *mut c_char, value: String) -> EsggStatus {
    match CString::new(value) {
        Ok(cstring) => {
            unsafe { *out = cstring.into_raw() };
            EsggStatus::Ok
        }
        Err(_) => {
            set_error("output contained an interior nul byte");
            EsggStatus::Data
        }
    }
}

fn guard(body: impl FnOnce() -> EsggStatus) -> EsggStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            EsggStatus::Panic
        }
    }
}

/// Closed-form dual counts of a complete graph on `n_nodes` nodes:
/// `n(n-1)/2` dual nodes and `[n(n-1)/2] * (n-2)` dual edges.
///
/// # Safety
/// The out-parameters must be valid writable pointers.
#[no_mangle]
pub unsafe extern "C" fn esgg_dual_counts(
    n_nodes: u64,
    dual_nodes_out: *mut u64,
    dual_edges_out: *mut u64,
) -> EsggStatus {
    guard(|| {
        if dual_nodes_out.is_null() || dual_edges_out.is_null() {
            set_error("null pointer argument");
            return EsggStatus::NullPointer;
        }
        match edgesgg::graph::validate_dual_counts(n_nodes) {
            Ok((nodes, edges)) => {
                unsafe {
                    *dual_nodes_out = nodes;
                    *dual_edges_out = edges;
                }
                EsggStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Weighted score on the 0-100 scale:
/// `0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr`.
#[no_mangle]
pub extern "C" fn esgg_score_wtd(r50: f64, wmap_rel: f64, wmap_phr: f64) -> f64 {
    edgesgg::metrics::score_wtd(r50, wmap_rel, wmap_phr)
}

/// Transform a scene JSON document (`{"nodes":[...],"edges":[...]}`; an
/// empty edge list means the complete candidate graph) into its edge
/// dual graph JSON. The result must be freed with [`esgg_string_free`].
///
/// # Safety
/// `scene_json` must be a valid nul-terminated string and `dual_json_out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esgg_transform_scene(
    scene_json: *const c_char,
    dual_json_out: *mut *mut c_char,
) -> EsggStatus {
    guard(|| {
        if dual_json_out.is_null() {
            set_error("null pointer argument");
            return EsggStatus::NullPointer;
        }
        let text = match read_utf8(scene_json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let result = (|| -> edgesgg::Result<String> {
            let scene: SceneFile = serde_json::from_str(text)?;
            let detections = scene.to_detections()?;
            let g = build_primitive_graph(&detections, &scene.graph_mode())?;
            let dual = build_edge_dual_graph(&g)?;
            Ok(serde_json::to_string(&dual)?)
        })();
        match result {
            Ok(json) => write_string(dual_json_out, json),
            Err(e) => fail(&e),
        }
    })
}

/// A loaded model behind the ABI: parameters plus configuration.
pub struct EsggModel {
    store: ParamStore,
    config: DualMpnnConfig,
}

/// Load a checkpoint JSON document
/// (`{"seed":..,"config":{..},"params":{..}}`) into an opaque model
/// handle. Free it with [`esgg_model_free`].
///
/// # Safety
/// `checkpoint_json` must be a valid nul-terminated string and
/// `model_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esgg_model_load(
    checkpoint_json: *const c_char,
    model_out: *mut *mut EsggModel,
) -> EsggStatus {
    guard(|| {
        if model_out.is_null() {
            set_error("null pointer argument");
            return EsggStatus::NullPointer;
        }
        let text = match read_utf8(checkpoint_json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let result = (|| -> edgesgg::Result<EsggModel> {
            let value: serde_json::Value = serde_json::from_str(text)?;
            let (store, config) = checkpoint_from_json(&value)?;
            Ok(EsggModel { store, config })
        })();
        match result {
            Ok(model) => {
                unsafe { *model_out = Box::into_raw(Box::new(model)) };
                EsggStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a model handle.
///
/// # Safety
/// `model` must come from [`esgg_model_load`] (or be null) and must not
/// be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn esgg_model_free(model: *mut EsggModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Relation vocabulary size of a loaded model (including the background
/// class), or 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle from [`esgg_model_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn esgg_model_n_rel_classes(model: *const EsggModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    (*model).config.n_rel_classes as u64
}

/// Run the model on one annotated scene (a dataset-line JSON document
/// with detection features) and return the ranked triplet predictions as
/// JSON. Labels and confidences come from the model's own object head;
/// ground-truth triplets in the document are ignored. The result must be
/// freed with [`esgg_string_free`].
///
/// # Safety
/// `model` must be a live handle, `scene_json` a valid nul-terminated
/// string, and `predictions_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esgg_model_predict(
    model: *const EsggModel,
    scene_json: *const c_char,
    predictions_out: *mut *mut c_char,
) -> EsggStatus {
    guard(|| {
        if model.is_null() || predictions_out.is_null() {
            set_error("null pointer argument");
            return EsggStatus::NullPointer;
        }
        let model = unsafe { &*model };
        let text = match read_utf8(scene_json) {
            Ok(t) => t,
            Err(status) => return status,
        };
        let result = (|| -> edgesgg::Result<String> {
            let mut scene: SceneSample = serde_json::from_str(text)?;
            scene.split = Split::Test;
            let preds = predict_scene(
                &model.store,
                &model.config,
                None,
                &scene,
                Subtask::SgCls,
                &DetectorNoise::NONE,
                0,
                &EvalOptions::default(),
            )?;
            Ok(serde_json::to_string(&preds)?)
        })();
        match result {
            Ok(json) => write_string(predictions_out, json),
            Err(e) => fail(&e),
        }
    })
}
