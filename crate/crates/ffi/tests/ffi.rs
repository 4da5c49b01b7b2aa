use std::ffi::{c_char, CStr, CString};
use std::ptr;

use crowdcount_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        cc_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

const TINY: &str = r#"{"backbone_channels":[2,2],"backbone_dilations":[1,2],"branch_channels":[2,1],"num_aux_branches":2,
 "kernel_bank":[{"rows":3,"cols":3,"sigma":1.0},{"rows":5,"cols":5,"sigma":1.0}]}"#;

fn tiny_model() -> *mut CcModel {
    let cfg = CString::new(TINY).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cc_model_init(cfg.as_ptr(), 1, &mut m) }, CcStatus::Ok, "{}", last_error());
    m
}

#[test]
fn model_round_trip_and_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = tiny_model();
    let image: Vec<f64> = (0..64).map(|i| (i % 5) as f64 / 5.0).collect();
    unsafe {
        let mut k = 0;
        assert_eq!(cc_model_num_aux(m, &mut k), CcStatus::Ok);
        assert_eq!(k, 2);
        let mut count = 0.0;
        assert_eq!(cc_model_predict_count(m, image.as_ptr(), 8, 8, &mut count), CcStatus::Ok);
        let mut map = vec![0.0; 64];
        assert_eq!(
            cc_model_predict_density(m, image.as_ptr(), 8, 8, 0, map.as_mut_ptr(), 64),
            CcStatus::Ok
        );
        assert!((map.iter().sum::<f64>() - count).abs() < 1e-12);
        assert_eq!(
            cc_model_predict_density(m, image.as_ptr(), 8, 8, 3, map.as_mut_ptr(), 64),
            CcStatus::InvalidArgument
        );
        assert_eq!(cc_model_save(m, path.as_ptr(), 1, 0), CcStatus::Ok);
        cc_model_free(m);

        let mut loaded = ptr::null_mut();
        assert_eq!(cc_model_load(path.as_ptr(), &mut loaded), CcStatus::Ok);
        let mut again = 0.0;
        cc_model_predict_count(loaded, image.as_ptr(), 8, 8, &mut again);
        assert_eq!(again, count);
        cc_model_free(loaded);
    }
}

#[test]
fn errors_map_to_codes() {
    unsafe {
        let missing = CString::new("/nonexistent/x.ckpt").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(cc_model_load(missing.as_ptr(), &mut m), CcStatus::Io);
        assert!(m.is_null());
        assert!(last_error().contains("nonexistent"));
        assert_eq!(cc_model_load(ptr::null(), &mut m), CcStatus::NullPointer);
        let bad = CString::new(r#"{"colour": 1}"#).unwrap();
        assert_eq!(cc_model_init(bad.as_ptr(), 0, &mut m), CcStatus::Config);

        let mut out = CcMetrics::default();
        let gt = [0.0];
        assert_eq!(cc_metrics([1.0].as_ptr(), gt.as_ptr(), 1, &mut out), CcStatus::InvalidArgument);
        assert_eq!(cc_metrics(ptr::null(), gt.as_ptr(), 1, &mut out), CcStatus::NullPointer);
        cc_model_free(ptr::null_mut());
        cc_dataset_free(ptr::null_mut());
    }
}

#[test]
fn metrics_and_density() {
    unsafe {
        let mut out = CcMetrics::default();
        let (p, g) = ([990.0, 10.0], [1000.0, 20.0]);
        assert_eq!(cc_metrics(p.as_ptr(), g.as_ptr(), 2, &mut out), CcStatus::Ok);
        assert!((out.rer - 0.255).abs() < 1e-15);
        assert_eq!(out.mae, 10.0);

        let pts = [3.5, 4.5, 10.2, 2.0, 0.0, 0.0];
        let mut map = vec![0.0; 12 * 16];
        assert_eq!(
            cc_render_density(pts.as_ptr(), 3, 16, 12, 1.5, 3.0, map.as_mut_ptr(), map.len()),
            CcStatus::Ok
        );
        assert!((map.iter().sum::<f64>() - 3.0).abs() < 1e-9);
        let outside = [20.0, 1.0];
        assert_eq!(
            cc_render_density(outside.as_ptr(), 1, 16, 12, 1.5, 3.0, map.as_mut_ptr(), map.len()),
            CcStatus::InvalidArgument
        );
    }
}

#[test]
fn dataset_access() {
    use crowdcount::synth::{generate_dataset, SceneSpec, SequenceParams};
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        width: 16,
        height: 12,
        ..SceneSpec::default()
    };
    let params = SequenceParams {
        base_count: 6,
        levels: 2,
        shots_per_level: 3,
        delta_range: (-2, -1),
        test_images: 2,
        ..SequenceParams::default()
    };
    generate_dataset(&spec, &params, 4).unwrap().save(dir.path()).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(cc_dataset_load(path.as_ptr(), &mut ds), CcStatus::Ok, "{}", last_error());
        let (mut n, mut rows, mut cols) = (0, 0, 0);
        assert_eq!(cc_dataset_info(ds, CcSplit::Weak, &mut n, &mut rows, &mut cols), CcStatus::Ok);
        assert_eq!((n, rows, cols), (5, 12, 16));
        let mut img = vec![0.0; rows * cols];
        let mut count = 0.0;
        assert_eq!(
            cc_dataset_image(ds, CcSplit::Seed, 0, img.as_mut_ptr(), img.len(), &mut count),
            CcStatus::Ok
        );
        assert_eq!(count, 6.0);
        assert_eq!(
            cc_dataset_image(ds, CcSplit::Test, 9, img.as_mut_ptr(), img.len(), &mut count),
            CcStatus::InvalidArgument
        );
        cc_dataset_free(ds);
    }
}

/// Compiles the C example against the generated header and static library.
#[test]
fn c_program_links_and_runs() {
    let crate_dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe_dir = std::env::current_exe().unwrap();
    let profile_dir = exe_dir.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libcrowdcount_ffi.a");
    if !lib.exists() {
        panic!("static library not found at {}", lib.display());
    }
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let status = std::process::Command::new("cc")
        .arg(crate_dir.join("tests/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin)
        .arg(tmp.path().join("c.ckpt"))
        .output()
        .unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
