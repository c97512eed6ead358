use std::ffi::{CStr, CString};
use std::ptr;

use emgps_core::policy::{AdamConfig, GlobalPolicy, Layer, Mlp, PolicyNet};
use emgps_ffi::*;
use nalgebra::{DMatrix, DVector};

fn last_error() -> String {
    let p = emgps_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn saved_policy(dir: &std::path::Path) -> CString {
    let mut mlp = Mlp::zeros(&[4, 3, 2]).unwrap();
    mlp.layers[1] = Layer {
        weights: DMatrix::zeros(2, 3),
        bias: DVector::from_vec(vec![0.5, 9.8]),
    };
    let policy = GlobalPolicy::new(
        PolicyNet::new(mlp, AdamConfig::default()),
        vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]); 3],
    )
    .unwrap();
    let path = dir.join("policy.json");
    policy.save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(emgps_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_round_trips_through_json() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(emgps_config_default(&mut cfg), EmgpsStatus::Ok);
        assert_eq!(emgps_config_set_seed(cfg, 42), EmgpsStatus::Ok);
        let mut json = ptr::null_mut();
        assert_eq!(emgps_config_to_json(cfg, &mut json), EmgpsStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_string();
        assert!(text.contains("\"seed\":42"));

        let mut back = ptr::null_mut();
        assert_eq!(emgps_config_from_json(json, &mut back), EmgpsStatus::Ok);
        emgps_string_free(json);
        emgps_config_free(back);
        emgps_config_free(cfg);
    }
}

#[test]
fn bad_inputs_map_to_status_codes() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(
            emgps_config_from_json(ptr::null(), &mut cfg),
            EmgpsStatus::NullPointer
        );
        assert!(last_error().contains("null"));

        let broken = CString::new("{\"iterations\": ").unwrap();
        assert_eq!(
            emgps_config_from_json(broken.as_ptr(), &mut cfg),
            EmgpsStatus::Json
        );

        let invalid = CString::new("{\"initial_conditions\": []}").unwrap();
        assert_eq!(
            emgps_config_from_json(invalid.as_ptr(), &mut cfg),
            EmgpsStatus::Config
        );
        assert!(cfg.is_null());

        let missing = CString::new("/nonexistent/policy.json").unwrap();
        let mut policy = ptr::null_mut();
        assert_eq!(
            emgps_policy_load(missing.as_ptr(), &mut policy),
            EmgpsStatus::Io
        );
        assert_eq!(emgps_policy_horizon(ptr::null()), 0);
    }
}

#[test]
fn policy_handle_evaluates_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_policy(dir.path());
    unsafe {
        let mut policy = ptr::null_mut();
        assert_eq!(
            emgps_policy_load(path.as_ptr(), &mut policy),
            EmgpsStatus::Ok
        );
        assert_eq!(emgps_policy_horizon(policy), 3);
        assert_eq!(emgps_policy_state_dim(policy), 4);
        assert_eq!(emgps_policy_action_dim(policy), 2);

        let state = [1.0, 2.0, 3.0, 4.0];
        let mut action = [0.0; 2];
        assert_eq!(
            emgps_policy_action_mean(policy, state.as_ptr(), 4, action.as_mut_ptr(), 2),
            EmgpsStatus::Ok
        );
        assert_eq!(action, [0.5, 9.8]);
        assert_eq!(
            emgps_policy_action_mean(policy, state.as_ptr(), 3, action.as_mut_ptr(), 2),
            EmgpsStatus::Dimension
        );

        let mut cov = [0.0; 4];
        assert_eq!(
            emgps_policy_action_covariance(policy, 2, cov.as_mut_ptr(), 4),
            EmgpsStatus::Ok
        );
        assert_eq!(cov, [2.0, 0.5, 0.5, 1.0]);
        assert_eq!(
            emgps_policy_action_covariance(policy, 3, cov.as_mut_ptr(), 4),
            EmgpsStatus::Domain
        );
        emgps_policy_free(policy);
    }
}

#[test]
fn success_test_uses_the_configured_ellipses() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(emgps_config_default(&mut cfg), EmgpsStatus::Ok);
        let mut ok = false;
        let zero = [0.0, 0.0];
        assert_eq!(
            emgps_success_test(cfg, [5.8, 20.0].as_ptr(), zero.as_ptr(), &mut ok),
            EmgpsStatus::Ok
        );
        assert!(ok);
        assert_eq!(
            emgps_success_test(cfg, [6.0, 20.0].as_ptr(), zero.as_ptr(), &mut ok),
            EmgpsStatus::Ok
        );
        assert!(!ok);
        emgps_config_free(cfg);
    }
}

#[test]
fn compare_without_artifacts_reports_missing() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(emgps_config_default(&mut cfg), EmgpsStatus::Ok);
        let mut report = ptr::null_mut();
        assert_eq!(
            emgps_compare(cfg, out.as_ptr(), -1, &mut report),
            EmgpsStatus::Missing
        );
        assert!(report.is_null());
        assert!(last_error().contains("policy snapshot 0"));
        emgps_config_free(cfg);
    }
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/emgps.h")).unwrap();
    for name in [
        "emgps_version",
        "emgps_last_error_message",
        "emgps_string_free",
        "emgps_config_default",
        "emgps_config_from_json",
        "emgps_config_to_json",
        "emgps_config_set_seed",
        "emgps_config_free",
        "emgps_run_pipeline",
        "emgps_compare",
        "emgps_policy_load",
        "emgps_policy_horizon",
        "emgps_policy_state_dim",
        "emgps_policy_action_dim",
        "emgps_policy_action_mean",
        "emgps_policy_action_covariance",
        "emgps_policy_free",
        "emgps_success_test",
        "EMGPS_STATUS_OK = 0",
        "typedef struct EmgpsPolicy EmgpsPolicy",
    ] {
        assert!(header.contains(name), "{name} missing from the header");
    }
}
