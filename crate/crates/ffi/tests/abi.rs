use std::ffi::{c_char, CStr, CString};
use std::ptr;

use sttrack_core::embedding::Modality;
use sttrack_core::harness::synthetic::{FrameSource, Scenario, SyntheticSequence};
use sttrack_ffi::*;

const TINY: &str = "preset = compact\nbackbone.depth = 2\nbackbone.d = 16\nbackbone.heads = 2\ndsf.count = 1\ndsf.inner = 16\ndsf.state = 4\nhead.hidden = 16\n";

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        st_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn new_tracker() -> *mut StTracker {
    let cfg = CString::new(TINY).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { st_tracker_new(cfg.as_ptr(), &mut t) }, StStatus::Ok);
    assert!(!t.is_null());
    t
}

fn view(rgb: &[f64], aux: Option<&[f64]>, h: usize, w: usize, m: Modality, text: Option<&[f64]>) -> StFrame {
    StFrame {
        rgb: rgb.as_ptr(),
        aux: aux.map_or(ptr::null(), <[f64]>::as_ptr),
        height: h,
        width: w,
        modality: m.code() as u32,
        text: text.map_or(ptr::null(), <[f64]>::as_ptr),
        text_len: text.map_or(0, <[f64]>::len),
    }
}

#[test]
fn tracks_a_sequence_through_the_c_api() {
    let seq = SyntheticSequence::generate(Scenario::Plain, Modality::Rgbd, 6, 3, 64, 8).unwrap();
    let t = new_tracker();
    let mut step = StStep::default();
    for i in 0..seq.len() {
        let f = seq.frame(i).unwrap();
        let aux = f.aux.as_ref().map(|a| a.data().to_vec());
        let frame = view(f.rgb.data(), aux.as_deref(), f.height(), f.width(), f.modality, None);
        let status = if i == 0 {
            let gt = seq.gt_box(0);
            unsafe { st_tracker_init(t, &frame, gt.as_ptr(), &mut step) }
        } else {
            unsafe { st_tracker_track(t, &frame, &mut step) }
        };
        assert_eq!(status, StStatus::Ok, "{}", last_error());
        assert!(step.bbox.iter().all(|v| v.is_finite()));
        assert!(step.token_count > 0);
    }
    let mut norm = f64::NAN;
    assert_eq!(unsafe { st_tracker_state_norm(t, &mut norm) }, StStatus::Ok);
    assert!(norm.is_finite() && norm > 0.0);
    unsafe { st_tracker_free(t) };
}

#[test]
fn errors_map_to_codes_with_messages() {
    let t = new_tracker();
    let rgb = vec![0.0; 32 * 32 * 3];
    let frame = view(&rgb, None, 32, 32, Modality::Rgb, None);
    let mut step = StStep::default();
    assert_eq!(unsafe { st_tracker_track(t, &frame, &mut step) }, StStatus::State);
    assert!(last_error().contains("state"));

    let thermal = view(&rgb, None, 32, 32, Modality::Rgbt, None);
    let b = [0.5, 0.5, 0.2, 0.2];
    assert_eq!(unsafe { st_tracker_init(t, &thermal, b.as_ptr(), ptr::null_mut()) }, StStatus::Validation);

    let bad = StFrame { modality: 9, ..view(&rgb, None, 32, 32, Modality::Rgb, None) };
    assert_eq!(unsafe { st_tracker_init(t, &bad, b.as_ptr(), ptr::null_mut()) }, StStatus::Validation);
    assert_eq!(unsafe { st_tracker_init(ptr::null_mut(), &frame, b.as_ptr(), ptr::null_mut()) }, StStatus::NullPointer);
    unsafe { st_tracker_free(t) };
    unsafe { st_tracker_free(ptr::null_mut()) };

    let cfg = CString::new("backbone.wobble = 1").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { st_tracker_new(cfg.as_ptr(), &mut out) }, StStatus::Config);
    assert!(out.is_null());
    let path = CString::new("/nonexistent/ckpt").unwrap();
    assert_eq!(unsafe { st_tracker_from_checkpoint(path.as_ptr(), &mut out) }, StStatus::Io);
    let needed = unsafe { st_last_error_message(ptr::null_mut(), 0) };
    assert!(needed > 0);
}

#[test]
fn checkpoint_handles_match_fresh_models() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = sttrack_core::config::Config::compact();
    for line in TINY.lines() {
        let (k, v) = line.split_once('=').unwrap();
        cfg.set(k.trim(), v.trim()).unwrap();
    }
    let model = sttrack_core::harness::model::Model::new(&cfg).unwrap();
    let path = dir.path().join("m.ckpt");
    sttrack_core::harness::checkpoint::save(&model, &path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { st_tracker_from_checkpoint(c.as_ptr(), &mut t) }, StStatus::Ok, "{}", last_error());
    unsafe { st_tracker_free(t) };
}

#[test]
fn theory_functions_agree_with_the_core() {
    let mut v = 0.0;
    assert_eq!(unsafe { st_tail_bound(-0.5, 10, &mut v) }, StStatus::Ok);
    assert_eq!(v, sttrack_core::theory::tail_bound(-0.5, 10).unwrap());
    assert_eq!(unsafe { st_horizon(-0.5, 0.01, &mut v) }, StStatus::Ok);
    assert!((v - ((100f64).ln() / 0.5 - 1.0)).abs() < 1e-12);
    assert_eq!(unsafe { st_horizon(0.5, 0.01, &mut v) }, StStatus::Domain);
    assert_eq!(st_alibi_slope(8), 0.5);
    assert!(st_alibi_slope(0).is_nan());
    let ver = unsafe { CStr::from_ptr(st_version()) };
    assert_eq!(ver.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sttrack.h")).unwrap();
    for name in [
        "st_tracker_new",
        "st_tracker_from_checkpoint",
        "st_tracker_init",
        "st_tracker_track",
        "st_tracker_free",
        "st_last_error_message",
        "typedef struct StTracker StTracker",
        "ST_STATUS_NULL_POINTER",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

/// Compiles a C program against the generated header and the static
/// library. Skipped when no C compiler is on the path.
#[test]
fn c_program_links_and_runs() {
    use std::path::PathBuf;
    use std::process::Command;

    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    // The test binary sits in target/<profile>/deps, next to the library
    // cargo built for it; a plain build puts another copy one level up.
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let lib = [deps, deps.parent().unwrap()]
        .iter()
        .map(|d| d.join("libsttrack_ffi.a"))
        .find(|p| p.exists())
        .expect("static library next to the test binary");
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let out = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "cc failed: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "smoke exited {:?}: {stdout}", run.status);
    assert!(stdout.starts_with(env!("CARGO_PKG_VERSION")), "{stdout}");
    assert!(stdout.contains("tracker is null"), "{stdout}");
}
