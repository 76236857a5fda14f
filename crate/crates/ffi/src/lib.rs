//! C ABI over `molrl`.
//!
//! Every fallible call returns a [`MolrlStatus`]; on failure the message is
//! kept per thread and read back with [`molrl_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use molrl::denoiser::checkpoint::Checkpoint;
use molrl::diffusion::{sample_molecule, RngNoise};
use molrl::schedule::NoiseSchedule;
use molrl::uncertainty::{self, Direction, NigParams, ObjectiveSpec, PropertyEstimate};
use molrl::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MolrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Io = 4,
    Checkpoint = 5,
    Model = 6,
    Numeric = 7,
    Panic = 99,
}

/// Which tail of the property distribution counts as success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MolrlDirection {
    Maximize = 0,
    Minimize = 1,
}

/// Direction arguments are plain integers so an out-of-range value from C
/// is an error rather than undefined behaviour.
fn direction(code: u32) -> Result<Direction, Fail> {
    match code {
        c if c == MolrlDirection::Maximize as u32 => Ok(Direction::Maximize),
        c if c == MolrlDirection::Minimize as u32 => Ok(Direction::Minimize),
        other => Err(invalid(format!("unknown direction {other}"))),
    }
}

/// Noise schedule handle.
pub struct MolrlSchedule(NoiseSchedule);

/// A loaded checkpoint ready for sampling.
pub struct MolrlModel {
    checkpoint: Checkpoint,
    schedule: NoiseSchedule,
    symbols: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> MolrlStatus {
    match err {
        Error::Domain(_) => MolrlStatus::Domain,
        Error::Io { .. } => MolrlStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => MolrlStatus::Checkpoint,
        Error::Model(_) | Error::Shape(_) => MolrlStatus::Model,
        Error::NonFinite { .. } | Error::Numeric(_) => MolrlStatus::Numeric,
        _ => MolrlStatus::InvalidArgument,
    }
}

enum Fail {
    Status(MolrlStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(MolrlStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail::Status(MolrlStatus::InvalidArgument, msg.into())
}

/// Runs `f`, turning errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MolrlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MolrlStatus::Ok,
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MolrlStatus::Panic
        }
    }
}

fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: caller promises a valid, writable pointer or null.
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller promises `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller promises `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn molrl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn molrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a schedule with `steps` steps and endpoint clamp `clamp`.
#[no_mangle]
pub extern "C" fn molrl_schedule_new(
    steps: usize,
    clamp: f64,
    out_handle: *mut *mut MolrlSchedule,
) -> MolrlStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        *slot = ptr::null_mut();
        let s = NoiseSchedule::new(steps, clamp)?;
        *slot = Box::into_raw(Box::new(MolrlSchedule(s)));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`molrl_schedule_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn molrl_schedule_free(handle: *mut MolrlSchedule) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

fn schedule_value(
    handle: *const MolrlSchedule,
    t: usize,
    value: *mut f64,
    f: fn(&NoiseSchedule, usize) -> f64,
) -> MolrlStatus {
    guard(|| {
        // SAFETY: caller passes a live handle or null.
        let s = unsafe { handle.as_ref() }.ok_or_else(|| null("schedule"))?;
        if t > s.0.steps() {
            return Err(invalid(format!(
                "t = {t} is past the last step {}",
                s.0.steps()
            )));
        }
        *out(value, "value")? = f(&s.0, t);
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn molrl_schedule_alpha(
    handle: *const MolrlSchedule,
    t: usize,
    value: *mut f64,
) -> MolrlStatus {
    schedule_value(handle, t, value, NoiseSchedule::alpha)
}

#[no_mangle]
pub extern "C" fn molrl_schedule_sigma(
    handle: *const MolrlSchedule,
    t: usize,
    value: *mut f64,
) -> MolrlStatus {
    schedule_value(handle, t, value, NoiseSchedule::sigma)
}

#[no_mangle]
pub extern "C" fn molrl_schedule_snr(
    handle: *const MolrlSchedule,
    t: usize,
    value: *mut f64,
) -> MolrlStatus {
    schedule_value(handle, t, value, NoiseSchedule::snr)
}

#[no_mangle]
pub extern "C" fn molrl_schedule_steps(
    handle: *const MolrlSchedule,
    steps: *mut usize,
) -> MolrlStatus {
    guard(|| {
        // SAFETY: caller passes a live handle or null.
        let s = unsafe { handle.as_ref() }.ok_or_else(|| null("schedule"))?;
        *out(steps, "steps")? = s.0.steps();
        Ok(())
    })
}

fn estimate(mean: f64, var_aleatoric: f64, var_epistemic: f64) -> Result<PropertyEstimate, Fail> {
    let e = PropertyEstimate {
        mean,
        var_aleatoric,
        var_epistemic,
    };
    if !mean.is_finite()
        || !(var_aleatoric >= 0.0)
        || !(var_epistemic >= 0.0)
        || !(e.total_variance() > 0.0)
    {
        return Err(Fail::Status(
            MolrlStatus::Domain,
            "need a finite mean and a positive total variance".into(),
        ));
    }
    Ok(e)
}

/// Probability that a property with the given mean and variances clears
/// `cutoff` in `dir` (a [`MolrlDirection`] value).
#[no_mangle]
pub extern "C" fn molrl_single_objective_prob(
    mean: f64,
    var_aleatoric: f64,
    var_epistemic: f64,
    cutoff: f64,
    dir: u32,
    prob: *mut f64,
) -> MolrlStatus {
    guard(|| {
        let e = estimate(mean, var_aleatoric, var_epistemic)?;
        let spec = ObjectiveSpec {
            name: String::new(),
            direction: direction(dir)?,
            cutoff,
        };
        *out(prob, "prob")? = uncertainty::single_objective_prob(&e, &spec);
        Ok(())
    })
}

/// Joint probability over `n` independent objectives; each array has `n` entries.
#[no_mangle]
pub extern "C" fn molrl_multi_objective_prob(
    n: usize,
    means: *const f64,
    var_aleatoric: *const f64,
    var_epistemic: *const f64,
    cutoffs: *const f64,
    directions: *const u32,
    prob: *mut f64,
) -> MolrlStatus {
    guard(|| {
        let (m, va, ve) = (
            slice(means, n, "means")?,
            slice(var_aleatoric, n, "var_aleatoric")?,
            slice(var_epistemic, n, "var_epistemic")?,
        );
        let (c, d) = (
            slice(cutoffs, n, "cutoffs")?,
            slice(directions, n, "directions")?,
        );
        let ests = (0..n)
            .map(|i| estimate(m[i], va[i], ve[i]))
            .collect::<Result<Vec<_>, _>>()?;
        let specs = (0..n)
            .map(|i| {
                Ok(ObjectiveSpec {
                    name: String::new(),
                    direction: direction(d[i])?,
                    cutoff: c[i],
                })
            })
            .collect::<Result<Vec<_>, Fail>>()?;
        *out(prob, "prob")? = uncertainty::multi_objective_prob(&ests, &specs)?;
        Ok(())
    })
}

/// Splits a Normal-Inverse-Gamma head into mean, aleatoric and epistemic variance.
#[no_mangle]
pub extern "C" fn molrl_nig_to_estimate(
    gamma: f64,
    nu: f64,
    alpha: f64,
    beta: f64,
    mean: *mut f64,
    var_aleatoric: *mut f64,
    var_epistemic: *mut f64,
) -> MolrlStatus {
    guard(|| {
        let e = uncertainty::nig_to_estimate(&NigParams {
            gamma_mean: gamma,
            nu,
            alpha,
            beta,
        })?;
        *out(mean, "mean")? = e.mean;
        *out(var_aleatoric, "var_aleatoric")? = e.var_aleatoric;
        *out(var_epistemic, "var_epistemic")? = e.var_epistemic;
        Ok(())
    })
}

/// Loads a checkpoint file written by the `molrl` CLI.
///
/// # Safety
/// `path` must be a nul-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn molrl_model_load(
    path: *const c_char,
    out_handle: *mut *mut MolrlModel,
) -> MolrlStatus {
    guard(|| {
        let slot = out(out_handle, "out_handle")?;
        *slot = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        let schedule = NoiseSchedule::new(checkpoint.schedule.steps, checkpoint.schedule.clamp)?;
        let symbols = checkpoint
            .vocabulary
            .symbols()
            .iter()
            .map(|s| CString::new(s.as_str()).map_err(|_| invalid("symbol contains a nul byte")))
            .collect::<Result<_, _>>()?;
        *slot = Box::into_raw(Box::new(MolrlModel {
            checkpoint,
            schedule,
            symbols,
        }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`molrl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn molrl_model_free(handle: *mut MolrlModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of atom types and length of the condition vector the model expects.
#[no_mangle]
pub extern "C" fn molrl_model_info(
    handle: *const MolrlModel,
    num_types: *mut usize,
    condition_dim: *mut usize,
) -> MolrlStatus {
    guard(|| {
        // SAFETY: caller passes a live handle or null.
        let m = unsafe { handle.as_ref() }.ok_or_else(|| null("model"))?;
        *out(num_types, "num_types")? = m.symbols.len();
        *out(condition_dim, "condition_dim")? = m.checkpoint.params.arch.condition_dim;
        Ok(())
    })
}

/// Element symbol of atom type `index`; owned by the handle.
#[no_mangle]
pub extern "C" fn molrl_model_symbol(handle: *const MolrlModel, index: usize) -> *const c_char {
    // SAFETY: caller passes a live handle or null.
    match unsafe { handle.as_ref() }.and_then(|m| m.symbols.get(index)) {
        Some(s) => s.as_ptr(),
        None => ptr::null(),
    }
}

/// Draws one molecule with `num_atoms` atoms. Writes `num_atoms * 3`
/// row-major coordinates and `num_atoms` atom-type indices. The same
/// (model, seed, num_atoms, condition) always gives the same molecule.
#[no_mangle]
pub extern "C" fn molrl_model_sample(
    handle: *const MolrlModel,
    seed: u64,
    num_atoms: usize,
    condition: *const f64,
    condition_len: usize,
    coords: *mut f64,
    types: *mut u32,
) -> MolrlStatus {
    guard(|| {
        // SAFETY: caller passes a live handle or null.
        let m = unsafe { handle.as_ref() }.ok_or_else(|| null("model"))?;
        if num_atoms == 0 {
            return Err(invalid("num_atoms must be at least 1"));
        }
        let cond = slice(condition, condition_len, "condition")?;
        let coords = slice_mut(coords, num_atoms * 3, "coords")?;
        let types = slice_mut(types, num_atoms, "types")?;
        let mut rng = molrl::rng::stream(seed, "sample", &[]);
        let vocab = &m.checkpoint.vocabulary;
        let (mol, _) = sample_molecule(
            &m.checkpoint.params,
            cond,
            num_atoms,
            vocab,
            &m.schedule,
            &mut RngNoise(&mut rng),
            false,
        )?;
        for (dst, src) in coords.iter_mut().zip(mol.coords.iter()) {
            *dst = *src;
        }
        for (dst, sym) in types.iter_mut().zip(&mol.atom_types) {
            *dst = vocab.index_of(sym)? as u32;
        }
        Ok(())
    })
}
