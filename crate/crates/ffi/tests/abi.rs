use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use rydberggpt_ffi::*;

fn last_error() -> String {
    let p = rgpt_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn init(seed: u64) -> *mut RgptModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { rgpt_model_init(seed, &mut m) }, RgptStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn enumeration_is_normalized() {
    let m = init(2);
    assert_eq!(unsafe { rgpt_model_parameter_count(m) }, 74_562);
    let configs: Vec<u8> = (0..16u32)
        .flat_map(|i| (0..4).map(move |b| ((i >> b) & 1) as u8))
        .collect();
    let mut lp = vec![0.0; 16];
    let s = unsafe { rgpt_model_log_probs(m, 2, 1.1, 1.15, 16.0, configs.as_ptr(), 16, lp.as_mut_ptr()) };
    assert_eq!(s, RgptStatus::Ok);
    assert!(rgpt_last_error_message().is_null());
    let total: f64 = lp.iter().map(|v| v.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    unsafe { rgpt_model_free(m) };
}

#[test]
fn samplers_agree_and_save_load_round_trips() {
    let m = init(3);
    let (mut a, mut b) = (vec![9u8; 50 * 9], vec![9u8; 50 * 9]);
    unsafe {
        assert_eq!(
            rgpt_model_sample(m, 3, 1.1, 1.15, 16.0, 50, 7, true, a.as_mut_ptr()),
            RgptStatus::Ok
        );
        assert_eq!(
            rgpt_model_sample(m, 3, 1.1, 1.15, 16.0, 50, 7, false, b.as_mut_ptr()),
            RgptStatus::Ok
        );
    }
    assert_eq!(a, b);
    assert!(a.iter().all(|&v| v <= 1));

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(rgpt_model_save(m, path.as_ptr()), RgptStatus::Ok);
        assert_eq!(rgpt_model_load(path.as_ptr(), &mut loaded), RgptStatus::Ok);
        assert_eq!(
            rgpt_model_sample(loaded, 3, 1.1, 1.15, 16.0, 50, 7, true, b.as_mut_ptr()),
            RgptStatus::Ok
        );
        rgpt_model_free(loaded);
        rgpt_model_free(m);
    }
    assert_eq!(a, b);
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut m = ptr::null_mut();
    let missing = CString::new("/nonexistent/x.ckpt").unwrap();
    assert_eq!(unsafe { rgpt_model_load(missing.as_ptr(), &mut m) }, RgptStatus::Io);
    assert!(last_error().contains("/nonexistent/x.ckpt"));
    assert!(m.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"{}\n").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    let s = unsafe { rgpt_model_load(junk.as_ptr(), &mut m) };
    assert!(matches!(s, RgptStatus::Parse | RgptStatus::ArtifactMismatch), "{s:?}");

    let mut lp = [0.0];
    let s = unsafe { rgpt_model_log_probs(ptr::null(), 2, 1.1, 1.15, 16.0, [0u8; 4].as_ptr(), 1, lp.as_mut_ptr()) };
    assert_eq!(s, RgptStatus::InvalidArgument);
    assert!(last_error().contains("model is null"));

    let h = init(1);
    let s = unsafe { rgpt_model_log_probs(h, 2, 1.1, 1.15, 16.0, [0u8, 2, 0, 0].as_ptr(), 1, lp.as_mut_ptr()) };
    assert_eq!(s, RgptStatus::InvalidArgument);
    let s = unsafe { rgpt_model_log_probs(h, 2, 1.1, -1.0, 16.0, [0u8; 4].as_ptr(), 1, lp.as_mut_ptr()) };
    assert_eq!(s, RgptStatus::InvalidArgument);
    let mut out = [0u8; 4];
    let s = unsafe { rgpt_model_sample(h, 2, 1.1, 1.15, 16.0, 0, 1, true, out.as_mut_ptr()) };
    assert_eq!(s, RgptStatus::InvalidArgument);
    unsafe { rgpt_model_free(h) };
    unsafe { rgpt_model_free(ptr::null_mut()) };
    assert_eq!(unsafe { rgpt_model_parameter_count(ptr::null()) }, 0);

    let mut obs = [0.0; 3];
    let s = unsafe { rgpt_exact_observables(4, 1.1, 1.15, 1.0, true, obs.as_mut_ptr()) };
    assert_eq!(s, RgptStatus::ResourceLimit);
}

#[test]
fn exact_observables_single_atom() {
    // One atom: H = -δ n - (Ω/2) σx, ground energy -(δ + sqrt(δ² + Ω²))/2.
    let mut obs = [0.0; 3];
    let s = unsafe { rgpt_exact_observables(1, 0.7, 1.15, 16.0, false, obs.as_mut_ptr()) };
    assert_eq!(s, RgptStatus::Ok);
    let e = -(0.7 + (0.49f64 + 1.0).sqrt()) / 2.0;
    assert!((obs[0] - e).abs() < 1e-10, "{obs:?}");
    assert!(obs[1] > 0.0 && obs[1] <= 1.0);
}

/// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_against_header() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler ({cc}); skipping");
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    let lib = lib_dir.join("librydberggpt_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout.trim(), "ok 74562");
}
