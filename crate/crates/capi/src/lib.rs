//! C ABI over the sensing, solver, and model surfaces. Every function
//! returns 0 on success or a negative code; `csamp_last_error` holds the
//! matching message for the calling thread. Handles are opaque and must be
//! released with their paired `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use csamp::amp::{amp_reconstruct_with_pinv, AmpConfig, PseudoInverse};
use csamp::checkpoint;
use csamp::dct::TransformD;
use csamp::error::CsError;
use csamp::eval::psnr;
use csamp::kernels;
use csamp::model::Network;
use csamp::sensing::{make_gaussian_phi, SensingSystem};
use csamp::tape::{Mode, Tape};
use csamp::tensor::Tensor;

pub const CSAMP_OK: i32 = 0;
pub const CSAMP_ERR_PARAMETER: i32 = -1;
pub const CSAMP_ERR_DIMENSION: i32 = -2;
pub const CSAMP_ERR_DATA: i32 = -3;
pub const CSAMP_ERR_IO: i32 = -4;
pub const CSAMP_ERR_SINGULAR: i32 = -5;
pub const CSAMP_ERR_DIVERGENCE: i32 = -6;
pub const CSAMP_ERR_NUMERIC: i32 = -7;
pub const CSAMP_ERR_CONTRACT: i32 = -8;
pub const CSAMP_ERR_NULL: i32 = -9;
pub const CSAMP_ERR_PANIC: i32 = -10;

pub const CSAMP_TRANSFORM_IDENTITY: i32 = 0;
pub const CSAMP_TRANSFORM_DCT: i32 = 1;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn store_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

fn code_for(err: &CsError) -> i32 {
    match err {
        CsError::Parameter(_) => CSAMP_ERR_PARAMETER,
        CsError::Dimension(_) => CSAMP_ERR_DIMENSION,
        CsError::Data(_) => CSAMP_ERR_DATA,
        CsError::Io(_) => CSAMP_ERR_IO,
        CsError::Singular(_) => CSAMP_ERR_SINGULAR,
        CsError::Divergence { .. } => CSAMP_ERR_DIVERGENCE,
        CsError::Numeric(_) => CSAMP_ERR_NUMERIC,
        CsError::Contract(_) => CSAMP_ERR_CONTRACT,
    }
}

fn fail(err: CsError) -> i32 {
    store_error(&err.to_string());
    code_for(&err)
}

fn fail_null(what: &str) -> i32 {
    store_error(&format!("null pointer: {what}"));
    CSAMP_ERR_NULL
}

/// Runs the body behind a panic guard so unwinding never crosses the ABI.
fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => {
            store_error("internal panic");
            CSAMP_ERR_PANIC
        }
    }
}

/// A Gaussian sensing operator with its prefactored pseudo-inverse.
pub struct CsampSensing {
    sys: SensingSystem,
    pinv: PseudoInverse,
}

/// A reconstruction network restored from an `.ampck` checkpoint.
pub struct CsampModel {
    net: Network,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn csamp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the last failure on this thread. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn csamp_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Creates a seeded Gaussian sensing operator with `round(ratio * n_p)`
/// rows. On success writes the handle to `out`.
#[no_mangle]
pub unsafe extern "C" fn csamp_sensing_new(
    ratio: f64,
    n_p: usize,
    seed: u64,
    out: *mut *mut CsampSensing,
) -> i32 {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let sys = match make_gaussian_phi(ratio, n_p, seed) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        let pinv = match PseudoInverse::new(&sys.phi) {
            Ok(p) => p,
            Err(e) => return fail(e),
        };
        *out = Box::into_raw(Box::new(CsampSensing { sys, pinv }));
        CSAMP_OK
    })
}

/// Releases a sensing handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn csamp_sensing_free(s: *mut CsampSensing) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Measurement count m_p, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn csamp_sensing_rows(s: *const CsampSensing) -> usize {
    if s.is_null() {
        0
    } else {
        (*s).sys.m_p
    }
}

/// Block length n_p, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn csamp_sensing_cols(s: *const CsampSensing) -> usize {
    if s.is_null() {
        0
    } else {
        (*s).sys.n_p
    }
}

/// y = Phi x for one block: `x` has `n` values, `y` receives `m` values.
#[no_mangle]
pub unsafe extern "C" fn csamp_sensing_measure(
    s: *const CsampSensing,
    x: *const f64,
    n: usize,
    y: *mut f64,
    m: usize,
) -> i32 {
    guarded(|| {
        if s.is_null() {
            return fail_null("sensing");
        }
        if x.is_null() {
            return fail_null("x");
        }
        if y.is_null() {
            return fail_null("y");
        }
        let handle = &*s;
        if m != handle.sys.m_p {
            return fail(CsError::dimension(format!(
                "output length {m} does not match measurement count {}",
                handle.sys.m_p
            )));
        }
        let xs = std::slice::from_raw_parts(x, n);
        let xt = match Tensor::from_vec(&[n], xs.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        match handle.sys.measure(&xt) {
            Ok(yt) => {
                std::slice::from_raw_parts_mut(y, m).copy_from_slice(yt.data());
                CSAMP_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Recovers one block from its measurements with the classical solver.
/// `transform` selects the sparsifying basis, `CSAMP_TRANSFORM_IDENTITY`
/// or `CSAMP_TRANSFORM_DCT` (block length must then be a perfect square).
/// `x_out` receives `n` values.
#[no_mangle]
pub unsafe extern "C" fn csamp_amp_reconstruct(
    s: *const CsampSensing,
    y: *const f64,
    m: usize,
    max_iters: u32,
    alpha: f64,
    transform: i32,
    x_out: *mut f64,
    n: usize,
) -> i32 {
    guarded(|| {
        if s.is_null() {
            return fail_null("sensing");
        }
        if y.is_null() {
            return fail_null("y");
        }
        if x_out.is_null() {
            return fail_null("x_out");
        }
        let handle = &*s;
        if n != handle.sys.n_p {
            return fail(CsError::dimension(format!(
                "output length {n} does not match block length {}",
                handle.sys.n_p
            )));
        }
        let d = match transform {
            CSAMP_TRANSFORM_IDENTITY => TransformD::identity(handle.sys.n_p),
            CSAMP_TRANSFORM_DCT => {
                let edge = (handle.sys.n_p as f64).sqrt().round() as usize;
                if edge * edge != handle.sys.n_p {
                    return fail(CsError::parameter(format!(
                        "2-D DCT needs a square block, got length {}",
                        handle.sys.n_p
                    )));
                }
                TransformD::dct2(edge)
            }
            other => {
                return fail(CsError::parameter(format!(
                    "transform must be 0 (identity) or 1 (DCT), got {other}"
                )))
            }
        };
        let ys = std::slice::from_raw_parts(y, m);
        let yt = match Tensor::from_vec(&[m], ys.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        let cfg = AmpConfig {
            max_iters: max_iters as usize,
            alpha,
            ..AmpConfig::default()
        };
        match amp_reconstruct_with_pinv(&yt, &handle.sys, &d, &handle.pinv, &cfg) {
            Ok(outcome) => {
                std::slice::from_raw_parts_mut(x_out, n).copy_from_slice(outcome.x_hat.data());
                CSAMP_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Restores a network from an `.ampck` checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn csamp_model_load(path: *const c_char, out: *mut *mut CsampModel) -> i32 {
    guarded(|| {
        if path.is_null() {
            return fail_null("path");
        }
        if out.is_null() {
            return fail_null("out");
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(p) => p,
            Err(_) => {
                store_error("path is not valid UTF-8");
                return CSAMP_ERR_NULL;
            }
        };
        match checkpoint::load(std::path::Path::new(path)) {
            Ok(loaded) => {
                *out = Box::into_raw(Box::new(CsampModel { net: loaded.net }));
                CSAMP_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a model handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn csamp_model_free(model: *mut CsampModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Block length n_p the model reconstructs, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn csamp_model_block_len(model: *const CsampModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).net.config.n_p()
    }
}

/// Measurement count m_p the model expects, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn csamp_model_measurements(model: *const CsampModel) -> usize {
    if model.is_null() {
        0
    } else {
        (*model).net.m_p
    }
}

/// y = W_phi x with the model's learned sensing matrix.
#[no_mangle]
pub unsafe extern "C" fn csamp_model_measure(
    model: *const CsampModel,
    x: *const f64,
    n: usize,
    y: *mut f64,
    m: usize,
) -> i32 {
    guarded(|| {
        if model.is_null() {
            return fail_null("model");
        }
        if x.is_null() {
            return fail_null("x");
        }
        if y.is_null() {
            return fail_null("y");
        }
        let net = &(*model).net;
        let (n_p, m_p) = (net.config.n_p(), net.m_p);
        if n != n_p || m != m_p {
            return fail(CsError::dimension(format!(
                "expected x[{n_p}] and y[{m_p}], got x[{n}] and y[{m}]"
            )));
        }
        let w_phi = net.param("w_phi").expect("sensing parameter").value.data();
        let xs = std::slice::from_raw_parts(x, n);
        let ys = kernels::mat_bt(xs, w_phi, 1, n_p, m_p);
        std::slice::from_raw_parts_mut(y, m).copy_from_slice(&ys);
        CSAMP_OK
    })
}

/// Reconstructs one block from its measurements with the loaded network.
/// `y` has `m` values, `x_out` receives `n` values.
#[no_mangle]
pub unsafe extern "C" fn csamp_model_reconstruct(
    model: *mut CsampModel,
    y: *const f64,
    m: usize,
    x_out: *mut f64,
    n: usize,
) -> i32 {
    guarded(|| {
        if model.is_null() {
            return fail_null("model");
        }
        if y.is_null() {
            return fail_null("y");
        }
        if x_out.is_null() {
            return fail_null("x_out");
        }
        let net = &mut (*model).net;
        let (n_p, m_p) = (net.config.n_p(), net.m_p);
        if m != m_p || n != n_p {
            return fail(CsError::dimension(format!(
                "expected y[{m_p}] and x_out[{n_p}], got y[{m}] and x_out[{n}]"
            )));
        }
        let ys = std::slice::from_raw_parts(y, m);
        let mut run = || -> Result<Vec<f64>, CsError> {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let yt = tape.constant(Tensor::from_vec(&[1, m_p], ys.to_vec())?);
            let f = net.forward_bound(&mut tape, &bound, yt, Mode::Eval, None)?;
            Ok(tape.value(f.x_hat).data().to_vec())
        };
        match run() {
            Ok(xs) => {
                std::slice::from_raw_parts_mut(x_out, n).copy_from_slice(&xs);
                CSAMP_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// PSNR in dB between two equal-length 8-bit buffers at the given peak.
/// Identical buffers yield +infinity.
#[no_mangle]
pub unsafe extern "C" fn csamp_psnr(
    a: *const u8,
    b: *const u8,
    len: usize,
    peak: f64,
    out_db: *mut f64,
) -> i32 {
    guarded(|| {
        if a.is_null() {
            return fail_null("a");
        }
        if b.is_null() {
            return fail_null("b");
        }
        if out_db.is_null() {
            return fail_null("out_db");
        }
        let av = std::slice::from_raw_parts(a, len);
        let bv = std::slice::from_raw_parts(b, len);
        match psnr(av, bv, peak) {
            Ok(db) => {
                *out_db = db;
                CSAMP_OK
            }
            Err(e) => fail(e),
        }
    })
}
