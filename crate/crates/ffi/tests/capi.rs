use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use voxmt::config::RunConfig;
use voxmt::io::{encode_checkpoint, write_file};
use voxmt::model::Model;
use voxmt::synth::{generate_scene, SceneSpec};
use voxmt_ffi::*;

const SMALL: &str =
    "[backbone]\nstem = 8\nwidths = [8, 8, 16, 16]\nextra = [16, 16]\nhfcm_width = 8\n";

fn last_error() -> String {
    let p = voxmt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_model() -> *mut VoxmtModel {
    let cfg = CString::new(SMALL).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { voxmt_model_from_config(cfg.as_ptr(), &mut m) },
        VoxmtStatus::Ok
    );
    m
}

#[test]
fn predict_through_handles() {
    let m = small_model();
    let mut ch = 0;
    assert_eq!(unsafe { voxmt_model_channels(m, &mut ch) }, VoxmtStatus::Ok);
    assert_eq!(ch, 4);

    let pc = generate_scene(5, &SceneSpec::default().scaled(0.2)).unwrap();
    let mut p = ptr::null_mut();
    let st = unsafe { voxmt_predict(m, pc.points.as_slice().as_ptr(), pc.len(), 4, &mut p) };
    assert_eq!(st, VoxmtStatus::Ok);
    let n = unsafe { voxmt_prediction_num_points(p) };
    assert_eq!(n, pc.len());
    let labels = unsafe { std::slice::from_raw_parts(voxmt_prediction_labels(p), n) };
    assert!(labels.iter().all(|&l| (1..=4).contains(&l)));

    // Same input through the library gives the same answer.
    let lib = Model::<f32>::new(RunConfig::from_toml(SMALL).unwrap()).unwrap();
    let expect = lib.predict(&lib.prepare(pc).unwrap()).unwrap();
    assert_eq!(labels, &expect.labels[..]);
    assert_eq!(unsafe { voxmt_prediction_num_boxes(p) }, expect.boxes.len());
    for (i, b) in expect.boxes.iter().enumerate() {
        let mut out = VoxmtBox::default();
        assert_eq!(
            unsafe { voxmt_prediction_box(p, i, &mut out) },
            VoxmtStatus::Ok
        );
        assert_eq!(out.class_id, b.class);
        assert_eq!(out.score, b.score as f32);
    }
    let mut out = VoxmtBox::default();
    let st = unsafe { voxmt_prediction_box(p, expect.boxes.len(), &mut out) };
    assert_eq!(st, VoxmtStatus::InvalidArgument);
    assert!(last_error().contains("out of range"));

    unsafe {
        voxmt_prediction_free(p);
        voxmt_model_free(m);
    }
}

#[test]
fn empty_scene_and_bad_shapes() {
    let m = small_model();
    let mut p = ptr::null_mut();
    assert_eq!(
        unsafe { voxmt_predict(m, ptr::null(), 0, 4, &mut p) },
        VoxmtStatus::Ok
    );
    assert_eq!(unsafe { voxmt_prediction_num_points(p) }, 0);
    assert_eq!(unsafe { voxmt_prediction_num_boxes(p) }, 0);
    unsafe { voxmt_prediction_free(p) };

    let pts = [0.0f32; 6];
    let mut p = ptr::null_mut();
    assert_eq!(
        unsafe { voxmt_predict(m, pts.as_ptr(), 2, 3, &mut p) },
        VoxmtStatus::Shape
    );
    assert!(last_error().contains("channels"));
    assert!(p.is_null());
    unsafe { voxmt_model_free(m) };
}

#[test]
fn null_and_missing_inputs() {
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { voxmt_model_load(ptr::null(), &mut m) },
        VoxmtStatus::NullArgument
    );
    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(
        unsafe { voxmt_model_load(path.as_ptr(), &mut m) },
        VoxmtStatus::Io
    );
    assert!(last_error().contains("/nonexistent/model.ckpt"));
    let bad = CString::new("bogus = 1").unwrap();
    assert_eq!(
        unsafe { voxmt_model_from_config(bad.as_ptr(), &mut m) },
        VoxmtStatus::Config
    );
    assert!(m.is_null());
    let mut ch = 0;
    assert_eq!(
        unsafe { voxmt_model_channels(ptr::null(), &mut ch) },
        VoxmtStatus::NullArgument
    );
    assert_eq!(unsafe { voxmt_prediction_num_points(ptr::null()) }, 0);
    assert!(unsafe { voxmt_prediction_labels(ptr::null()) }.is_null());
    unsafe {
        voxmt_model_free(ptr::null_mut());
        voxmt_prediction_free(ptr::null_mut());
    }
}

#[test]
fn load_checkpoint_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.ckpt");
    let model = Model::<f32>::new(RunConfig::from_toml(SMALL).unwrap()).unwrap();
    let mut bytes = encode_checkpoint(&model).unwrap();
    write_file(&file, &bytes).unwrap();
    let c = CString::new(file.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { voxmt_model_load(c.as_ptr(), &mut m) },
        VoxmtStatus::Ok
    );
    unsafe { voxmt_model_free(m) };

    bytes.truncate(bytes.len() - 1);
    write_file(&file, &bytes).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { voxmt_model_load(c.as_ptr(), &mut m) },
        VoxmtStatus::Format
    );
}

#[test]
fn header_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("voxmt.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "voxmt_model_load",
        "voxmt_predict",
        "voxmt_prediction_free",
        "VOXMT_STATUS_CONFIG_MISMATCH",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"voxmt.h\"\nint main(void) { VoxmtModel *m = 0; VoxmtBox b; (void)b;\n\
         return voxmt_model_channels(m, 0) == VOXMT_STATUS_NULL_ARGUMENT ? 0 : 1; }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler found; header syntax not checked");
        return;
    };
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
