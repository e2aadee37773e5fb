use std::ffi::{CStr, CString};
use std::ptr;

use dpsgd_lab::accountant::epsilon_for;
use dpsgd_lab_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    unsafe {
        dl_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn ledger_matches_library() {
    unsafe {
        let mut l = ptr::null_mut();
        assert_eq!(dl_ledger_new(1e-5, &mut l), DlStatus::Ok);
        assert_eq!(dl_ledger_push_phase(l, 0.01, 1.1, 500), DlStatus::Ok);
        assert_eq!(dl_ledger_phase_count(l), 1);
        let (mut e, mut o) = (0.0, 0.0);
        assert_eq!(dl_ledger_epsilon(l, &mut e, &mut o), DlStatus::Ok);
        assert_eq!((e, o), epsilon_for(0.01, 1.1, 500, 1e-5).unwrap());
        dl_ledger_free(l);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    unsafe {
        let mut l = ptr::null_mut();
        assert_eq!(dl_ledger_new(0.0, &mut l), DlStatus::InvalidArgument);
        assert!(l.is_null());
        assert!(last_error().contains("delta"), "{}", last_error());

        assert_eq!(dl_ledger_new(1e-5, ptr::null_mut()), DlStatus::NullPointer);
        assert!(last_error().contains("`out`"));

        let mut e = 0.0;
        assert_eq!(dl_ledger_epsilon(ptr::null(), &mut e, &mut e), DlStatus::NullPointer);

        // A success clears the message.
        assert_eq!(dl_ledger_new(1e-5, &mut l), DlStatus::Ok);
        assert_eq!(dl_last_error_message(ptr::null_mut(), 0), 0);
        dl_ledger_free(l);
    }
}

#[test]
fn error_message_truncates_with_terminator() {
    unsafe {
        assert_eq!(dl_ledger_new(2.0, &mut ptr::null_mut()), DlStatus::InvalidArgument);
        let full = dl_last_error_message(ptr::null_mut(), 0);
        assert!(full > 4);
        let mut buf = [1 as std::ffi::c_char; 4];
        assert_eq!(dl_last_error_message(buf.as_mut_ptr(), 4), full);
        assert_eq!(buf[3], 0);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_bytes().len(), 3);
    }
}

#[test]
fn null_handles_are_tolerated() {
    unsafe {
        dl_ledger_free(ptr::null_mut());
        dl_rng_free(ptr::null_mut());
        dl_model_free(ptr::null_mut());
        assert_eq!(dl_model_num_params(ptr::null()), 0);
        assert!(dl_rng_next_f64(ptr::null_mut()).is_nan());
    }
}

#[test]
fn model_predicts_probability_rows() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(dl_model_new(DlArch::MnistCnn, DlActivation::Relu, 0.0, 1, &mut m), DlStatus::Ok);
        assert!(dl_model_num_params(m) > 0);
        let len = dl_model_input_len(m);
        let k = dl_model_num_classes(m);
        let x = vec![0.5; 3 * len];
        let mut p = vec![0.0; 3 * k];
        assert_eq!(dl_model_predict(m, x.as_ptr(), 3, p.as_mut_ptr()), DlStatus::Ok);
        for row in p.chunks(k) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert_eq!(dl_model_predict(m, ptr::null(), 3, p.as_mut_ptr()), DlStatus::NullPointer);
        dl_model_free(m);

        let mut bad = ptr::null_mut();
        let s = dl_model_new(DlArch::MnistCnn, DlActivation::BoundedRelu, -1.0, 1, &mut bad);
        assert_eq!(s, DlStatus::Config, "{}", last_error());
    }
}

#[test]
fn rng_is_seeded() {
    unsafe {
        let a = dl_rng_new(9);
        let b = dl_rng_new(9);
        for _ in 0..10 {
            assert_eq!(dl_rng_next_f64(a), dl_rng_next_f64(b));
        }
        assert!(dl_rng_standard_normal(a).is_finite());
        dl_rng_free(a);
        dl_rng_free(b);
    }
}

#[test]
fn clip_factor_scales_to_threshold() {
    assert_eq!(dl_clip_factor(0.5, 1.0), 1.0);
    assert!((dl_clip_factor(4.0, 1.0) * 4.0 - 1.0).abs() < 1e-15);
}

#[test]
fn run_config_reports_validation_errors() {
    let cfg = CString::new("mode = \"nope\"").unwrap();
    let dir = CString::new("data").unwrap();
    unsafe {
        assert_eq!(dl_run_config(cfg.as_ptr(), dir.as_ptr()), DlStatus::Config);
        assert!(last_error().contains("allowed modes"));
        assert_eq!(dl_run_config(ptr::null(), dir.as_ptr()), DlStatus::NullPointer);
    }
}

#[test]
fn run_config_executes_accountant_mode() {
    let out = tempfile::tempdir().unwrap();
    let text = format!(
        "mode = \"accountant\"\noutput = {:?}\n[accountant]\nq = 0.01\nsigma = 1.0\nsteps = 100\n",
        out.path().join("acct")
    );
    let cfg = CString::new(text).unwrap();
    let dir = CString::new("data").unwrap();
    unsafe {
        assert_eq!(dl_run_config(cfg.as_ptr(), dir.as_ptr()), DlStatus::Ok, "{}", last_error());
    }
    assert!(out.path().join("acct/accountant.csv").exists());
}
