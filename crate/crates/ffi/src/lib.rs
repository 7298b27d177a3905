//! C ABI over the metavim simulator, the max-pressure controller and
//! trained checkpoints.
//!
//! Every function returns an [`MvStatus`]; on failure a message is kept per
//! thread and can be read with [`mv_last_error_message`]. Objects are opaque
//! handles created by `*_new`/`*_load` and released by the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use metavim::controllers::maxpressure_phase;
use metavim::demand::{self, ArrivalSchedule, MixedProfile};
use metavim::diffnet::Checkpoint;
use metavim::harness::{DeployedPolicy, ExperimentConfig, Learner};
use metavim::netsim::{load_network, IntersectionId, RoadNetwork, SimState, DEFAULT_HORIZON_S};
use metavim::Error;

/// Width of one observation: 12 lane occupancies then a phase one-hot.
pub const MV_OBS_DIM: usize = 16;
pub const MV_NUM_PHASES: usize = 4;

// Spelled out for cbindgen, which cannot follow paths into other crates.
const _: () = assert!(MV_OBS_DIM == metavim::OBS_DIM && MV_NUM_PHASES == metavim::NUM_PHASES);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvStatus {
    Ok = 0,
    NullPointer = 1,
    /// Malformed roadnet, flow or config input.
    Config = 2,
    /// NaN or infinity in a computation.
    Numeric = 3,
    InvalidArgument = 4,
    /// Travel time requested before any vehicle entered.
    NoVehicles = 5,
    Checkpoint = 6,
    Io = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvProfile {
    MixedLow = 0,
    MixedHigh = 1,
    /// No arrivals at all.
    Empty = 2,
}

/// Simulator handle.
pub struct MvSim {
    state: SimState,
}

/// Trained policy handle with its per-episode beliefs.
pub struct MvPolicy {
    policy: DeployedPolicy,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> MvStatus {
    match err {
        Error::Io { .. } => MvStatus::Io,
        Error::NonFinite(_) => MvStatus::Numeric,
        Error::NoVehicles => MvStatus::NoVehicles,
        Error::Checkpoint(_) => MvStatus::Checkpoint,
        e if e.is_config() => MvStatus::Config,
        _ => MvStatus::InvalidArgument,
    }
}

enum Failure {
    Status(MvStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(MvStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MvStatus::Ok,
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside metavim".into());
            MvStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(MvStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn sim_ref<'a>(sim: *const MvSim) -> Result<&'a MvSim, Failure> {
    sim.as_ref().ok_or_else(|| null("sim"))
}

unsafe fn sim_mut<'a>(sim: *mut MvSim) -> Result<&'a mut MvSim, Failure> {
    sim.as_mut().ok_or_else(|| null("sim"))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn intersection(sim: &MvSim, id: usize) -> Result<IntersectionId, Failure> {
    if id >= sim.state.network().num_intersections() {
        return Err(Error::UnknownIntersection(id).into());
    }
    Ok(IntersectionId(id))
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn mv_status_name(status: MvStatus) -> *const c_char {
    let s: &'static CStr = match status {
        MvStatus::Ok => c"ok",
        MvStatus::NullPointer => c"null pointer",
        MvStatus::Config => c"config error",
        MvStatus::Numeric => c"numeric failure",
        MvStatus::InvalidArgument => c"invalid argument",
        MvStatus::NoVehicles => c"no vehicles",
        MvStatus::Checkpoint => c"checkpoint error",
        MvStatus::Io => c"io error",
        MvStatus::Panic => c"panic",
    };
    s.as_ptr()
}

fn new_sim(network: RoadNetwork, schedule: ArrivalSchedule, seed: u64) -> *mut MvSim {
    Box::into_raw(Box::new(MvSim {
        state: SimState::reset(Arc::new(network), Arc::new(schedule), seed),
    }))
}

/// Grid network of `rows` x `cols` intersections with a synthetic one-hour
/// demand profile.
///
/// # Safety
/// `out` must be a valid pointer to write the handle into.
#[no_mangle]
pub unsafe extern "C" fn mv_sim_new_grid(
    rows: usize,
    cols: usize,
    profile: MvProfile,
    seed: u64,
    out: *mut *mut MvSim,
) -> MvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let network = RoadNetwork::grid(rows, cols)?;
        let schedule = match profile {
            MvProfile::MixedLow => demand::build_mixed(MixedProfile::Low, &network, DEFAULT_HORIZON_S, seed)?,
            MvProfile::MixedHigh => demand::build_mixed(MixedProfile::High, &network, DEFAULT_HORIZON_S, seed)?,
            MvProfile::Empty => ArrivalSchedule::empty(DEFAULT_HORIZON_S),
        };
        write_out(out, new_sim(network, schedule, seed), "out")
    })
}

/// Network and demand from JSON documents (roadnet and flow formats).
///
/// # Safety
/// `roadnet_json` and `flow_json` must be NUL-terminated strings; `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_sim_new_from_json(
    roadnet_json: *const c_char,
    flow_json: *const c_char,
    horizon_s: u32,
    seed: u64,
    out: *mut *mut MvSim,
) -> MvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let network = load_network(str_arg(roadnet_json, "roadnet_json")?)?;
        let doc = demand::parse_flow(str_arg(flow_json, "flow_json")?)?;
        let schedule = demand::build_flow(&doc, &network, horizon_s)?;
        write_out(out, new_sim(network, schedule, seed), "out")
    })
}

/// # Safety
/// `sim` must come from an `mv_sim_new_*` call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mv_sim_free(sim: *mut MvSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// # Safety
/// `sim` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_sim_num_intersections(sim: *const MvSim, out: *mut usize) -> MvStatus {
    guard(|| write_out(out, sim_ref(sim)?.state.network().num_intersections(), "out"))
}

/// Simulation clock in seconds.
///
/// # Safety
/// `sim` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_sim_clock(sim: *const MvSim, out: *mut u32) -> MvStatus {
    guard(|| write_out(out, sim_ref(sim)?.state.clock(), "out"))
}

/// Hold phase `actions[i]` at intersection `i` for `dt_s` seconds.
///
/// # Safety
/// `sim` must be a live handle; `actions` must point to `n` values.
#[no_mangle]
pub unsafe extern "C" fn mv_sim_step(sim: *mut MvSim, actions: *const u32, n: usize, dt_s: u32) -> MvStatus {
    guard(|| {
        let sim = sim_mut(sim)?;
        if actions.is_null() {
            return Err(null("actions"));
        }
        let acts: Vec<usize> = std::slice::from_raw_parts(actions, n).iter().map(|&a| a as usize).collect();
        sim.state.step_indices(&acts, dt_s)?;
        Ok(())
    })
}

/// Normalized observation of intersection `id` into `out[0..MV_OBS_DIM]`.
///
/// # Safety
/// `sim` must be a live handle; `out` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mv_sim_observe(sim: *const MvSim, id: usize, out: *mut f64, len: usize) -> MvStatus {
    guard(|| {
        let sim = sim_ref(sim)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if len < MV_OBS_DIM {
            return Err(Failure::Status(
                MvStatus::InvalidArgument,
                format!("observation buffer holds {len} values, need {MV_OBS_DIM}"),
            ));
        }
        let obs = sim.state.observe_normalized(intersection(sim, id)?)?;
        std::slice::from_raw_parts_mut(out, MV_OBS_DIM).copy_from_slice(&obs);
        Ok(())
    })
}

/// Stopped vehicles on the incoming lanes of intersection `id`.
///
/// # Safety
/// `sim` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_sim_queue_length(sim: *const MvSim, id: usize, out: *mut u32) -> MvStatus {
    guard(|| {
        let sim = sim_ref(sim)?;
        let q = sim.state.queue_length(intersection(sim, id)?)?;
        write_out(out, q as u32, "out")
    })
}

/// Vehicle counters; any output pointer may be NULL.
///
/// # Safety
/// `sim` must be a live handle; non-NULL outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mv_sim_counts(
    sim: *const MvSim,
    entered: *mut u64,
    exited: *mut u64,
    on_network: *mut u64,
) -> MvStatus {
    guard(|| {
        let s = &sim_ref(sim)?.state;
        for (p, v) in [(entered, s.entered()), (exited, s.exited()), (on_network, s.on_network())] {
            if !p.is_null() {
                p.write(v as u64);
            }
        }
        Ok(())
    })
}

/// Mean travel time in seconds; unfinished vehicles count up to the clock.
///
/// # Safety
/// `sim` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_sim_average_travel_time(sim: *const MvSim, out: *mut f64) -> MvStatus {
    guard(|| write_out(out, sim_ref(sim)?.state.average_travel_time()?, "out"))
}

/// Max-pressure phase for intersection `id` (lowest index on ties).
///
/// # Safety
/// `sim` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_maxpressure_phase(sim: *const MvSim, id: usize, out: *mut u32) -> MvStatus {
    guard(|| {
        let sim = sim_ref(sim)?;
        let phase = maxpressure_phase(&sim.state, intersection(sim, id)?)?;
        write_out(out, phase.index() as u32, "out")
    })
}

/// Load a trained checkpoint for greedy deployment. `config_json` may be
/// NULL for the default experiment config (reward weight and scaling).
///
/// # Safety
/// `path` must be a NUL-terminated string, `config_json` NULL or one, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mv_policy_load(
    path: *const c_char,
    config_json: *const c_char,
    out: *mut *mut MvPolicy,
) -> MvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        let config = if config_json.is_null() {
            ExperimentConfig::default()
        } else {
            ExperimentConfig::from_json(str_arg(config_json, "config_json")?)?
        };
        let learner = Learner::from_checkpoint(&ckpt)?;
        let handle = Box::new(MvPolicy {
            policy: DeployedPolicy::new(learner, &config),
        });
        write_out(out, Box::into_raw(handle), "out")
    })
}

/// # Safety
/// `policy` must come from `mv_policy_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mv_policy_free(policy: *mut MvPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Start a new episode: beliefs return to the prior.
///
/// # Safety
/// `policy` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mv_policy_reset(policy: *mut MvPolicy) -> MvStatus {
    guard(|| {
        policy.as_mut().ok_or_else(|| null("policy"))?.policy.reset();
        Ok(())
    })
}

/// Choose phases for every intersection of `sim`, advance it by `dt_s`
/// seconds and write the phases to `actions_out` (NULL to skip).
///
/// # Safety
/// `policy` and `sim` must be live handles; `actions_out` NULL or room for
/// `n` values.
#[no_mangle]
pub unsafe extern "C" fn mv_policy_step(
    policy: *mut MvPolicy,
    sim: *mut MvSim,
    dt_s: u32,
    actions_out: *mut u32,
    n: usize,
) -> MvStatus {
    guard(|| {
        let policy = policy.as_mut().ok_or_else(|| null("policy"))?;
        let sim = sim_mut(sim)?;
        let count = sim.state.network().num_intersections();
        if !actions_out.is_null() && n < count {
            return Err(Failure::Status(
                MvStatus::InvalidArgument,
                format!("action buffer holds {n} values, need {count}"),
            ));
        }
        let actions = policy.policy.step(&mut sim.state, dt_s)?;
        if !actions_out.is_null() {
            let out = std::slice::from_raw_parts_mut(actions_out, count);
            for (o, a) in out.iter_mut().zip(actions) {
                *o = a as u32;
            }
        }
        Ok(())
    })
}
