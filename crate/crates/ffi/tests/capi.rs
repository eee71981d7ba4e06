use std::ffi::{CStr, CString};
use std::ptr;

use dmilo_ffi::*;

fn last_error() -> String {
    let p = dmilo_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fixture {
    schedule: *mut DmiloSchedule,
    prior: *mut DmiloPrior,
    op: *mut DmiloOperator,
}

impl Fixture {
    fn new(task: &str) -> Self {
        let mut f = Fixture {
            schedule: ptr::null_mut(),
            prior: ptr::null_mut(),
            op: ptr::null_mut(),
        };
        let task = CString::new(task).unwrap();
        unsafe {
            assert_eq!(dmilo_schedule_new(0.1, 20.0, 1e-3, 1.0, 3, &mut f.schedule), DmiloStatus::Ok);
            assert_eq!(dmilo_prior_new_toy(3, 8, 0.1, 7, &mut f.prior), DmiloStatus::Ok);
            assert_eq!(dmilo_operator_from_json(task.as_ptr(), 8, 11, &mut f.op), DmiloStatus::Ok);
        }
        f
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            dmilo_operator_free(self.op);
            dmilo_prior_free(self.prior);
            dmilo_schedule_free(self.schedule);
        }
    }
}

#[test]
fn schedule_level_matches_closed_form() {
    let f = Fixture::new(r#"{"kind": "identity"}"#);
    let (mut a, mut s) = (0.0, 0.0);
    let st = unsafe { dmilo_schedule_level(f.schedule, 1.0, &mut a, &mut s) };
    assert_eq!(st, DmiloStatus::Ok);
    let expect = (-0.5f64 * (0.1 + 0.5 * 19.9)).exp();
    assert!((a - expect).abs() < 1e-14);
    assert!((a * a + s * s - 1.0).abs() < 1e-12);
}

#[test]
fn out_of_range_time_is_a_domain_error() {
    let f = Fixture::new(r#"{"kind": "identity"}"#);
    let (mut a, mut s) = (0.0, 0.0);
    let st = unsafe { dmilo_schedule_level(f.schedule, 2.0, &mut a, &mut s) };
    assert_eq!(st, DmiloStatus::Domain);
    assert!(!last_error().is_empty());
}

#[test]
fn operator_dims_and_apply() {
    let f = Fixture::new(r#"{"kind": "downsample", "factor": 2}"#);
    unsafe {
        assert_eq!(dmilo_operator_in_dim(f.op), 8);
        assert_eq!(dmilo_operator_out_dim(f.op), 4);
        let x: Vec<f64> = (0..8).map(f64::from).collect();
        let mut y = [0.0; 4];
        assert_eq!(dmilo_operator_apply(f.op, x.as_ptr(), 8, y.as_mut_ptr(), 4), DmiloStatus::Ok);
        assert_eq!(y, [0.5, 2.5, 4.5, 6.5]);
        let mut short = [0.0; 3];
        assert_eq!(dmilo_operator_apply(f.op, x.as_ptr(), 8, short.as_mut_ptr(), 3), DmiloStatus::Shape);
        assert_eq!(dmilo_operator_apply(f.op, x.as_ptr(), 7, y.as_mut_ptr(), 4), DmiloStatus::Shape);
    }
}

#[test]
fn denoise_at_small_time_is_near_identity() {
    let f = Fixture::new(r#"{"kind": "identity"}"#);
    unsafe {
        assert_eq!(dmilo_prior_dim(f.prior), 8);
        let x = [0.05; 8];
        let mut out = [0.0; 8];
        let st = dmilo_prior_denoise(f.prior, f.schedule, x.as_ptr(), 8, 1e-3, out.as_mut_ptr());
        assert_eq!(st, DmiloStatus::Ok);
        for v in out {
            assert!((v - 0.05).abs() < 3e-2, "{v}");
        }
    }
}

#[test]
fn solve_reduces_the_residual() {
    let f = Fixture::new(r#"{"kind": "identity"}"#);
    let solver = CString::new(r#"{"kind": "dmilo", "outer_iters": 3, "seed": 1}"#).unwrap();
    let optim = CString::new(r#"{"inner_iters": 50, "inner_lr": 0.01}"#).unwrap();
    let y = [0.2, -0.1, 0.3, 0.0, 0.1, -0.2, 0.05, 0.15];
    unsafe {
        let mut r: *mut DmiloReport = ptr::null_mut();
        let st = dmilo_solve(y.as_ptr(), 8, f.op, f.schedule, f.prior, solver.as_ptr(), optim.as_ptr(), &mut r);
        assert_eq!(st, DmiloStatus::Ok, "{}", last_error());
        let (mut r0, mut r1, mut peak) = (0.0, 0.0, 0usize);
        assert_eq!(dmilo_report_summary(r, &mut r0, &mut r1, &mut peak), DmiloStatus::Ok);
        assert!(r1 < r0, "{r1} >= {r0}");
        assert_eq!(peak, 1);
        let len = dmilo_report_estimate_len(r);
        assert_eq!(len, 8);
        let mut est = vec![0.0; len];
        assert_eq!(dmilo_report_estimate(r, est.as_mut_ptr(), len), DmiloStatus::Ok);
        let mut json = ptr::null_mut();
        assert_eq!(dmilo_report_to_json(r, &mut json), DmiloStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        dmilo_string_free(json);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["solver"], "dmilo");
        assert_eq!(v["estimate"].as_array().unwrap().len(), 8);
        dmilo_report_free(r);
    }
}

#[test]
fn bad_json_and_null_pointers_are_reported() {
    unsafe {
        let mut p: *mut DmiloPrior = ptr::null_mut();
        let bad = CString::new(r#"{"n": 4, "bogus": 1}"#).unwrap();
        assert_eq!(dmilo_prior_from_json(bad.as_ptr(), &mut p), DmiloStatus::InvalidConfig);
        assert!(p.is_null());
        assert_eq!(dmilo_prior_from_json(ptr::null(), &mut p), DmiloStatus::NullPointer);
        assert!(last_error().contains("null"));
        let good = CString::new(r#"{"K": 2, "n": 4}"#).unwrap();
        assert_eq!(dmilo_prior_from_json(good.as_ptr(), &mut p), DmiloStatus::Ok);
        assert_eq!(dmilo_prior_dim(p), 4);
        dmilo_prior_free(p);
        assert_eq!(dmilo_prior_dim(ptr::null()), 0);
        // freeing null is a no-op
        dmilo_prior_free(ptr::null_mut());
        dmilo_string_free(ptr::null_mut());
    }
}

#[test]
fn experiment_round_trip() {
    let cfg = CString::new(
        r#"{"prior": {"K": 2, "n": 8}, "task": {"kind": "inpaint"},
            "solver": {"kind": "dmilo_pgd", "outer_iters": 2},
            "optim": {"inner_iters": 20}, "trials": 2, "seed": 3}"#,
    )
    .unwrap();
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(dmilo_run_experiment_json(cfg.as_ptr(), &mut out), DmiloStatus::Ok, "{}", last_error());
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
        dmilo_string_free(out);
        assert_eq!(v["trials"].as_array().unwrap().len(), 2);
        assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(dmilo_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dmilo.h")).unwrap();
    for name in [
        "DMILO_STATUS_OK",
        "DMILO_STATUS_PANIC",
        "typedef struct DmiloReport DmiloReport",
        "dmilo_last_error_message",
        "dmilo_schedule_new",
        "dmilo_prior_from_json",
        "dmilo_operator_apply",
        "dmilo_solve",
        "dmilo_report_to_json",
        "dmilo_run_experiment_json",
        "dmilo_string_free",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
