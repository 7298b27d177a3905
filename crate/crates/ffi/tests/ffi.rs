use std::ffi::{CStr, CString};
use std::ptr;

use metavim::harness::{ExperimentConfig, Learner, Variant};
use metavim_ffi::*;

fn last_error() -> String {
    let p = mv_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn grid(rows: usize, cols: usize, profile: MvProfile) -> *mut MvSim {
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { mv_sim_new_grid(rows, cols, profile, 0, &mut sim) }, MvStatus::Ok);
    assert!(!sim.is_null());
    sim
}

#[test]
fn grid_episode_under_max_pressure_conserves_vehicles() {
    let sim = grid(2, 2, MvProfile::MixedLow);
    let mut n = 0usize;
    unsafe {
        assert_eq!(mv_sim_num_intersections(sim, &mut n), MvStatus::Ok);
        assert_eq!(n, 4);
        let mut actions = vec![0u32; n];
        for _ in 0..720 {
            for (i, a) in actions.iter_mut().enumerate() {
                assert_eq!(mv_maxpressure_phase(sim, i, a), MvStatus::Ok);
            }
            assert_eq!(mv_sim_step(sim, actions.as_ptr(), n, 5), MvStatus::Ok);
        }
        let mut clock = 0;
        assert_eq!(mv_sim_clock(sim, &mut clock), MvStatus::Ok);
        assert_eq!(clock, 3600);
        let (mut entered, mut exited, mut on) = (0u64, 0u64, 0u64);
        assert_eq!(mv_sim_counts(sim, &mut entered, &mut exited, &mut on), MvStatus::Ok);
        assert_eq!(entered, exited + on);
        assert!(exited > 2000, "{exited}");
        let mut obs = [0.0; MV_OBS_DIM];
        assert_eq!(mv_sim_observe(sim, 0, obs.as_mut_ptr(), obs.len()), MvStatus::Ok);
        assert_eq!(obs[12..].iter().sum::<f64>(), 1.0);
        let mut q = 0;
        assert_eq!(mv_sim_queue_length(sim, 3, &mut q), MvStatus::Ok);
        let mut tt = 0.0;
        assert_eq!(mv_sim_average_travel_time(sim, &mut tt), MvStatus::Ok);
        assert!(tt > 20.0 && tt < 3600.0, "{tt}");
        mv_sim_free(sim);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    unsafe {
        let sim = grid(1, 1, MvProfile::Empty);
        let mut tt = 0.0;
        assert_eq!(mv_sim_average_travel_time(sim, &mut tt), MvStatus::NoVehicles);
        assert!(last_error().contains("no vehicles"));
        assert_eq!(mv_sim_step(sim, [7u32].as_ptr(), 1, 5), MvStatus::InvalidArgument);
        assert_eq!(mv_sim_step(sim, [0u32, 1].as_ptr(), 2, 5), MvStatus::InvalidArgument);
        assert_eq!(mv_sim_step(sim, ptr::null(), 1, 5), MvStatus::NullPointer);
        let mut short = [0.0; 4];
        assert_eq!(mv_sim_observe(sim, 0, short.as_mut_ptr(), 4), MvStatus::InvalidArgument);
        let mut q = 0;
        assert_eq!(mv_sim_queue_length(sim, 5, &mut q), MvStatus::Config);
        assert_eq!(mv_sim_num_intersections(ptr::null(), ptr::null_mut()), MvStatus::NullPointer);
        mv_sim_free(sim);
        mv_sim_free(ptr::null_mut());

        let bad = CString::new("{\"format\": \"nope\"}").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(mv_sim_new_from_json(bad.as_ptr(), bad.as_ptr(), 3600, 0, &mut out), MvStatus::Config);
        assert!(out.is_null());
        let missing = CString::new("/nonexistent/ckpt.json").unwrap();
        let mut policy = ptr::null_mut();
        assert_eq!(mv_policy_load(missing.as_ptr(), ptr::null(), &mut policy), MvStatus::Io);
        let name = CStr::from_ptr(mv_status_name(MvStatus::Numeric));
        assert_eq!(name.to_str().unwrap(), "numeric failure");
    }
}

#[test]
fn json_constructors_accept_documents() {
    let doc = metavim::netsim::RoadnetDocument::grid(1, 2, Default::default());
    let net = metavim::netsim::RoadNetwork::from_document(&doc).unwrap();
    let route: Vec<String> = net.boundary_routes()[0].iter().map(|&l| net.lane(l).name.clone()).collect();
    let roadnet = doc.to_json();
    let flow = serde_json::json!({
        "format": "metavim-flow-v1",
        "vehicles": [{"route": route, "entry_time_s": 3.0}],
    })
    .to_string();
    let (r, f) = (CString::new(roadnet).unwrap(), CString::new(flow).unwrap());
    let mut sim = ptr::null_mut();
    unsafe {
        let status = mv_sim_new_from_json(r.as_ptr(), f.as_ptr(), 600, 1, &mut sim);
        assert_eq!(status, MvStatus::Ok, "{}", last_error());
        let mut n = 0;
        mv_sim_num_intersections(sim, &mut n);
        assert_eq!(n, 2);
        mv_sim_free(sim);
    }
}

#[test]
fn policy_handle_drives_a_larger_grid() {
    let dir = tempfile_dir();
    let path = dir.join("ckpt.json");
    let learner = Learner::new(Variant::Full, &ExperimentConfig::default().hyperparameters, 1).unwrap();
    learner.to_checkpoint(serde_json::json!({})).unwrap().save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        let mut policy = ptr::null_mut();
        assert_eq!(mv_policy_load(cpath.as_ptr(), ptr::null(), &mut policy), MvStatus::Ok);
        let sim = grid(3, 3, MvProfile::MixedLow);
        let mut actions = [9u32; 9];
        for _ in 0..20 {
            assert_eq!(mv_policy_step(policy, sim, 5, actions.as_mut_ptr(), 9), MvStatus::Ok);
            assert!(actions.iter().all(|&a| a < 4));
        }
        assert_eq!(mv_policy_step(policy, sim, 5, actions.as_mut_ptr(), 3), MvStatus::InvalidArgument);
        assert_eq!(mv_policy_reset(policy), MvStatus::Ok);
        assert_eq!(mv_policy_step(policy, sim, 5, ptr::null_mut(), 0), MvStatus::Ok);
        mv_sim_free(sim);
        mv_policy_free(policy);
    }
    std::fs::remove_dir_all(dir).ok();
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("metavim-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/metavim.h")).unwrap();
    for name in [
        "typedef struct MvSim MvSim",
        "typedef struct MvPolicy MvPolicy",
        "MV_STATUS_NO_VEHICLES = 5",
        "mv_sim_new_grid",
        "mv_sim_step",
        "mv_policy_step",
        "mv_last_error_message",
        "#define MV_OBS_DIM 16",
    ] {
        assert!(header.contains(name), "header lacks `{name}`");
    }
}
