//! C ABI over `cc_hardy`: opaque handles, status codes, and a thread-local
//! last-error message.
//!
//! Every function returns a [`CchStatus`] and writes results through out
//! pointers. Handles come from the `cch_system_*` and `cch_domain_*`
//! constructors and must be released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use cc_hardy::capacity::{p_capacity, CapacityOptions, Condenser};
use cc_hardy::frames::VectorFieldSystem;
use cc_hardy::grid::{GridDomain, Shape};
use cc_hardy::hardy::{hardy_1d, maximize_ratio, MaximizeOptions, WeightSpec};
use cc_hardy::metric::default_oracle;
use cc_hardy::nsw::system_ball_volume;
use cc_hardy::Error;

/// Status codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CchStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownSystem = 3,
    Parse = 4,
    EmptyDomain = 5,
    NonConvergence = 6,
    BoundExceeded = 7,
    Numerical = 8,
    Panic = 9,
}

/// Vector-field system handle.
pub struct CchSystem(VectorFieldSystem);

/// Discretized domain handle.
pub struct CchDomain(GridDomain);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> CchStatus {
    match e {
        Error::Context { source, .. } => status_of(source),
        Error::UnknownSystem(_) => CchStatus::UnknownSystem,
        Error::Parse { .. } => CchStatus::Parse,
        Error::InvalidArgument(_) | Error::ExponentViolation { .. } | Error::Config(_) => CchStatus::InvalidArgument,
        Error::EmptyDomain | Error::DisconnectedDomain { .. } => CchStatus::EmptyDomain,
        Error::NonConvergence { .. } => CchStatus::NonConvergence,
        Error::AnomalousExcess { .. } => CchStatus::BoundExceeded,
        _ => CchStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), CchStatus>) -> CchStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CchStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            CchStatus::Panic
        }
    }
}

fn lift<T>(r: cc_hardy::Result<T>) -> Result<T, CchStatus> {
    r.map_err(|e| {
        let s = status_of(&e);
        set_error(e.to_string());
        s
    })
}

fn invalid(msg: &str) -> CchStatus {
    set_error(msg.into());
    CchStatus::InvalidArgument
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, CchStatus> {
    if p.is_null() {
        set_error("null string".into());
        return Err(CchStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid("string is not UTF-8"))
}

unsafe fn read_slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], CchStatus> {
    if p.is_null() {
        set_error("null array".into());
        return Err(CchStatus::NullPointer);
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn write<T>(out: *mut T, v: T) -> Result<(), CchStatus> {
    if out.is_null() {
        set_error("null output pointer".into());
        return Err(CchStatus::NullPointer);
    }
    out.write(v);
    Ok(())
}

unsafe fn system_ref<'a>(s: *const CchSystem) -> Result<&'a VectorFieldSystem, CchStatus> {
    s.as_ref().map(|s| &s.0).ok_or_else(|| {
        set_error("null system handle".into());
        CchStatus::NullPointer
    })
}

unsafe fn domain_ref<'a>(d: *const CchDomain) -> Result<&'a GridDomain, CchStatus> {
    d.as_ref().map(|d| &d.0).ok_or_else(|| {
        set_error("null domain handle".into());
        CchStatus::NullPointer
    })
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`) and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cch_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cch_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Built-in system by name (`euclidean3`, `heisenberg1`, `htype(k,q)`, ...).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cch_system_builtin(name: *const c_char, out: *mut *mut CchSystem) -> CchStatus {
    guard(|| {
        let name = read_str(name)?;
        let sys = lift(VectorFieldSystem::builtin(name))?;
        write(out, Box::into_raw(Box::new(CchSystem(sys))))
    })
}

/// System from text: one field per line, comma-separated polynomial
/// components in `x1..xn`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cch_system_parse(text: *const c_char, out: *mut *mut CchSystem) -> CchStatus {
    guard(|| {
        let text = read_str(text)?;
        let sys = lift(VectorFieldSystem::parse("custom", text))?;
        write(out, Box::into_raw(Box::new(CchSystem(sys))))
    })
}

/// # Safety
/// `sys` must be null or a handle from a `cch_system_*` constructor, not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn cch_system_free(sys: *mut CchSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Ambient dimension and number of fields.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cch_system_dims(sys: *const CchSystem, n: *mut usize, m: *mut usize) -> CchStatus {
    guard(|| {
        let s = system_ref(sys)?;
        write(n, s.ambient_dim())?;
        write(m, s.num_fields())
    })
}

/// Monte-Carlo volume of the CC ball `B(x, r)`.
///
/// # Safety
/// `x` must point to `n` doubles, `n` the system dimension.
#[no_mangle]
pub unsafe extern "C" fn cch_ball_volume(
    sys: *const CchSystem,
    x: *const f64,
    n: usize,
    r: f64,
    samples: usize,
    seed: u64,
    out: *mut f64,
) -> CchStatus {
    guard(|| {
        let s = system_ref(sys)?;
        let x = read_slice(x, n)?;
        if n != s.ambient_dim() {
            return Err(invalid("point dimension does not match the system"));
        }
        let v = lift(system_ball_volume(s, x, r, samples, seed))?;
        write(out, v.estimate)
    })
}

/// Euclidean ball domain `B(center, radius)` at spacing `h` with its
/// boundary distance computed.
///
/// # Safety
/// `center` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cch_domain_ball(
    sys: *const CchSystem,
    center: *const f64,
    n: usize,
    radius: f64,
    h: f64,
    out: *mut *mut CchDomain,
) -> CchStatus {
    guard(|| {
        let s = system_ref(sys)?;
        let c = read_slice(center, n)?.to_vec();
        if n != s.ambient_dim() {
            return Err(invalid("center dimension does not match the system"));
        }
        if !(radius > 0.0) {
            return Err(invalid("radius must be positive"));
        }
        let d = lift(GridDomain::discretize(&Shape::Ball { center: c, radius }, h, s))?;
        write(out, Box::into_raw(Box::new(CchDomain(d))))
    })
}

/// # Safety
/// `d` must be null or a live domain handle.
#[no_mangle]
pub unsafe extern "C" fn cch_domain_free(d: *mut CchDomain) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Number of inside cells.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cch_domain_inside_cells(d: *const CchDomain, out: *mut usize) -> CchStatus {
    guard(|| write(out, domain_ref(d)?.inside_cells().len()))
}

/// `cap_p(B̄(center, inner), Ω)` where `center` is any point of the domain.
///
/// # Safety
/// `center` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cch_capacity_ball(
    d: *const CchDomain,
    center: *const f64,
    n: usize,
    inner: f64,
    p: f64,
    out: *mut f64,
) -> CchStatus {
    guard(|| {
        let dom = domain_ref(d)?;
        let c = read_slice(center, n)?;
        if n != dom.lattice().ndim() {
            return Err(invalid("center dimension does not match the domain"));
        }
        let oracle = default_oracle(dom.system());
        let plate = Condenser::from_fn(dom, |x| oracle.midpoint(c, x) <= inner);
        let res = lift(p_capacity(dom, &plate, p, &CapacityOptions::default()))?;
        write(out, res.value)
    })
}

/// Best Hardy ratio for `V = d(·, x0)^{-p}` on the domain.
///
/// # Safety
/// `x0` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cch_point_hardy(
    d: *const CchDomain,
    x0: *const f64,
    n: usize,
    p: f64,
    out: *mut f64,
) -> CchStatus {
    guard(|| {
        let dom = domain_ref(d)?;
        let x0 = read_slice(x0, n)?.to_vec();
        if n != dom.lattice().ndim() {
            return Err(invalid("point dimension does not match the domain"));
        }
        let oracle = default_oracle(dom.system());
        let w = WeightSpec::PointPower { x0, exponent: p };
        let rep = lift(maximize_ratio(dom, &w, p, oracle.as_ref(), &MaximizeOptions::default()))?;
        write(out, rep.best_ratio)
    })
}

/// One-dimensional Hardy quotient supremum over power profiles.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cch_hardy_1d(p: f64, n_grid: usize, out: *mut f64) -> CchStatus {
    guard(|| write(out, lift(hardy_1d(p, n_grid))?))
}
