//! C ABI for the spankl library.
//!
//! Every fallible function returns a [`SpanklStatus`]; on failure the message
//! is kept per thread and can be fetched with [`spankl_last_error_message`].
//! Strings returned through out-pointers are owned by the caller and must be
//! released with [`spankl_string_free`]; models with [`spankl_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use spankl::cldata::{DatasetKind, Setup};
use spankl::clrunner::{LoadedModel, Mode};
use spankl::commands::{synthesize_cmd, train_cmd, SynthesizeArgs, TrainArgs};
use spankl::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanklStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Parse = 5,
    Data = 6,
    Io = 7,
    Shape = 8,
    Aborted = 9,
    Serialization = 10,
    Panic = 11,
}

/// Opaque handle to a trained model.
pub struct SpanklModel {
    inner: LoadedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> SpanklStatus {
    match e {
        Error::InvalidArgument(_) => SpanklStatus::InvalidArgument,
        Error::Config(_) => SpanklStatus::Config,
        Error::Parse { .. } => SpanklStatus::Parse,
        Error::Data(_) => SpanklStatus::Data,
        Error::Io { .. } => SpanklStatus::Io,
        Error::Shape { .. } => SpanklStatus::Shape,
        Error::Aborted { .. } => SpanklStatus::Aborted,
        Error::Json(_) => SpanklStatus::Serialization,
    }
}

struct Failure(SpanklStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpanklStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpanklStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SpanklStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(SpanklStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SpanklStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// # Safety
/// `out` must be null or a valid pointer to writable storage.
unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(SpanklStatus::NullPointer, "output pointer is null".into()));
    }
    let c = CString::new(s).map_err(|_| Failure(SpanklStatus::Serialization, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, Failure> {
    s.parse::<T>().map_err(|e| Failure(SpanklStatus::InvalidArgument, e))
}

/// Library version as a static NUL-terminated string; do not free.
#[no_mangle]
pub extern "C" fn spankl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the calling thread's last error message, or null if the last call
/// succeeded. Free with `spankl_string_free`.
#[no_mangle]
pub extern "C" fn spankl_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null_mut(), |c| c.clone().into_raw()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spankl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a model saved by a training step (a `step_{l}` directory).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn spankl_model_load(dir: *const c_char, out: *mut *mut SpanklModel) -> SpanklStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(SpanklStatus::NullPointer, "output pointer is null".into()));
        }
        let dir = read_str(dir, "dir")?;
        let inner = LoadedModel::load(std::path::Path::new(dir))?;
        *out = Box::into_raw(Box::new(SpanklModel { inner }));
        Ok(())
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from `spankl_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spankl_model_free(model: *mut SpanklModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Entity types the model has learned, as a JSON array of strings.
///
/// # Safety
/// `model` must be a live handle; `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn spankl_model_types(model: *const SpanklModel, out: *mut *mut c_char) -> SpanklStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| Failure(SpanklStatus::NullPointer, "model is null".into()))?;
        let json = serde_json::to_string(&m.inner.learned_types()).map_err(Error::from)?;
        write_string(out, json)
    })
}

/// Predict spans for one whitespace-tokenized sentence. The result is a JSON
/// array of `{"start","end","label","score"}` objects with inclusive token
/// offsets.
///
/// # Safety
/// `model` must be a live handle; `sentence` a NUL-terminated string; `out`
/// must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn spankl_model_predict(
    model: *const SpanklModel,
    sentence: *const c_char,
    out: *mut *mut c_char,
) -> SpanklStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| Failure(SpanklStatus::NullPointer, "model is null".into()))?;
        let text = read_str(sentence, "sentence")?;
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let spans = m.inner.predict_tokens(&tokens)?;
        let json = serde_json::to_string(&spans).map_err(Error::from)?;
        write_string(out, json)
    })
}

/// Build a benchmark directory from a corpus directory. `kind` is `toy`,
/// `ontonotes`, or `fewnerd`; `setup` one of `split-all`, `split-filter`,
/// `filter-all`, `filter-filter`. `tasks` and `orders` apply to the toy kind.
///
/// # Safety
/// All string arguments must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn spankl_synthesize(
    corpus_dir: *const c_char,
    kind: *const c_char,
    setup: *const c_char,
    seed: u64,
    permutation: u32,
    tasks: u32,
    orders: u32,
    out_dir: *const c_char,
) -> SpanklStatus {
    guard(|| {
        let args = SynthesizeArgs {
            corpus: PathBuf::from(read_str(corpus_dir, "corpus_dir")?),
            kind: parse::<DatasetKind>(read_str(kind, "kind")?)?,
            setup: parse::<Setup>(read_str(setup, "setup")?)?,
            seed,
            permutation: permutation as usize,
            tasks: tasks as usize,
            orders: orders as usize,
            out: PathBuf::from(read_str(out_dir, "out_dir")?),
        };
        synthesize_cmd(&args)?;
        Ok(())
    })
}

/// Train over a benchmark directory. `config_path` may be null for defaults;
/// `mode` is `cl` or `noncl`.
///
/// # Safety
/// String arguments must be NUL-terminated (`config_path` may be null).
#[no_mangle]
pub unsafe extern "C" fn spankl_train(
    benchmark_dir: *const c_char,
    config_path: *const c_char,
    mode: *const c_char,
    out_dir: *const c_char,
) -> SpanklStatus {
    guard(|| {
        let config = if config_path.is_null() {
            None
        } else {
            Some(PathBuf::from(read_str(config_path, "config_path")?))
        };
        let args = TrainArgs {
            benchmark: PathBuf::from(read_str(benchmark_dir, "benchmark_dir")?),
            config,
            mode: parse::<Mode>(read_str(mode, "mode")?)?,
            out: PathBuf::from(read_str(out_dir, "out_dir")?),
            model: None,
            epochs: None,
            alpha: None,
            beta: None,
            threshold: None,
            seeds: None,
            resume: false,
            stop_after: None,
        };
        train_cmd(&args)?;
        Ok(())
    })
}
