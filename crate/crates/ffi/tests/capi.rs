use std::ffi::{CStr, CString};
use std::ptr;

use spectral_adapt_ffi::*;
use tempfile::TempDir;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sa_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn wavelengths(bands: usize) -> Vec<f64> {
    (0..bands).map(|i| 400.0 + 10.0 * i as f64).collect()
}

fn new_cube(h: usize, w: usize, data: &[f64]) -> *mut SaCube {
    let bands = data.len() / (h * w);
    let wl = wavelengths(bands);
    let mut cube = ptr::null_mut();
    let status = unsafe { sa_cube_new(h, w, bands, wl.as_ptr(), data.as_ptr(), &mut cube) };
    assert_eq!(status, SaStatus::Ok, "{}", last_error());
    cube
}

fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 37) % 101) as f64 / 128.0).collect()
}

#[test]
fn cube_round_trip_through_file() {
    let tmp = TempDir::new().unwrap();
    let path = CString::new(tmp.path().join("c.hsc").to_str().unwrap()).unwrap();
    // Quarter steps are exact in f32.
    let data: Vec<f64> = (0..2 * 3 * 4).map(|i| (i % 5) as f64 * 0.25).collect();
    let cube = new_cube(2, 3, &data);
    unsafe {
        assert_eq!(sa_cube_write(cube, path.as_ptr()), SaStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(sa_cube_read(path.as_ptr(), &mut back), SaStatus::Ok);
        let (mut h, mut w, mut c) = (0, 0, 0);
        assert_eq!(sa_cube_dims(back, &mut h, &mut w, &mut c), SaStatus::Ok);
        assert_eq!((h, w, c), (2, 3, 4));
        let mut values = vec![0.0; 24];
        assert_eq!(sa_cube_data(back, values.as_mut_ptr(), values.len()), SaStatus::Ok);
        assert_eq!(values, data);
        assert_eq!(sa_cube_data(back, values.as_mut_ptr(), 23), SaStatus::ShapeMismatch);
        sa_cube_free(back);
        sa_cube_free(cube);
    }
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        let mut cube = ptr::null_mut();
        assert_eq!(sa_cube_read(ptr::null(), &mut cube), SaStatus::NullPointer);
        assert!(cube.is_null());
        assert!(last_error().contains("path"));
        let mut m = SaMetrics::default();
        assert_eq!(sa_metrics(ptr::null(), ptr::null(), &mut m), SaStatus::NullPointer);
        let wl = wavelengths(2);
        assert_eq!(
            sa_cube_new(1, 1, 2, wl.as_ptr(), ptr::null(), &mut cube),
            SaStatus::NullPointer
        );
        sa_cube_free(ptr::null_mut());
        sa_model_free(ptr::null_mut());
    }
}

#[test]
fn io_and_format_errors_map_to_codes() {
    let tmp = TempDir::new().unwrap();
    let missing = CString::new(tmp.path().join("none.hsc").to_str().unwrap()).unwrap();
    let bogus_path = tmp.path().join("bogus.hsc");
    std::fs::write(&bogus_path, b"NOPE0000").unwrap();
    let bogus = CString::new(bogus_path.to_str().unwrap()).unwrap();
    let mut cube = ptr::null_mut();
    unsafe {
        assert_eq!(sa_cube_read(missing.as_ptr(), &mut cube), SaStatus::Io);
        assert_eq!(sa_cube_read(bogus.as_ptr(), &mut cube), SaStatus::Format);
        assert!(last_error().contains("NOPE"));
        let mut model = ptr::null_mut();
        assert_eq!(sa_model_load(bogus.as_ptr(), &mut model), SaStatus::Format);
        assert!(model.is_null());
    }
}

#[test]
fn error_message_clears_on_success() {
    unsafe {
        let mut cube = ptr::null_mut();
        assert_eq!(sa_cube_read(ptr::null(), &mut cube), SaStatus::NullPointer);
        assert!(!last_error().is_empty());
        let d = SaRegions {
            red: 0.3,
            green: 0.2,
            blue: 0.1,
        };
        let mut r = SaRegions::default();
        assert_eq!(sa_masking_ratios(&d, 0.5, 0.9, &mut r), SaStatus::Ok);
        assert!(last_error().is_empty());
        assert!((r.red - 0.9).abs() < 1e-12 && (r.green - 0.7).abs() < 1e-12 && (r.blue - 0.5).abs() < 1e-12);
        assert_eq!(sa_masking_ratios(&d, 0.9, 0.5, &mut r), SaStatus::InvalidArgument);
    }
}

#[test]
fn metrics_of_identical_cubes() {
    let data = ramp(4 * 4 * 31);
    let (a, b) = (new_cube(4, 4, &data), new_cube(4, 4, &data));
    let mut m = SaMetrics::default();
    unsafe {
        assert_eq!(sa_metrics(a, b, &mut m), SaStatus::Ok);
        assert_eq!(m.ssim, 1.0);
        assert!(m.sam < 1e-6);
        assert_eq!(m.l1, 0.0);
        let c = new_cube(2, 2, &ramp(2 * 2 * 31));
        assert_eq!(sa_metrics(a, c, &mut m), SaStatus::ShapeMismatch);
        sa_cube_free(a);
        sa_cube_free(b);
        sa_cube_free(c);
    }
}

#[test]
fn density_of_constant_cube_is_zero() {
    let spectrum = ramp(31);
    let mut data = Vec::new();
    for v in &spectrum {
        data.extend(std::iter::repeat_n(*v + 0.1, 9));
    }
    let cube = new_cube(3, 3, &data);
    let mut d = SaRegions::default();
    unsafe {
        assert_eq!(sa_spectral_density(cube, &mut d), SaStatus::Ok);
        sa_cube_free(cube);
    }
    assert!(d.red <= 1e-3 && d.green <= 1e-3 && d.blue <= 1e-3, "{d:?}");
}

#[test]
fn atgp_picks_largest_then_orthogonal() {
    let rows = [[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 0.1, 0.0], [0.0, 0.0, 2.0]];
    let flat: Vec<f64> = rows.concat();
    let mut idx = [usize::MAX; 2];
    unsafe {
        assert_eq!(sa_atgp(flat.as_ptr(), 4, 3, 2, idx.as_mut_ptr()), SaStatus::Ok);
        assert_eq!(idx, [0, 3]);
        assert_eq!(
            sa_atgp(flat.as_ptr(), 4, 3, 5, idx.as_mut_ptr()),
            SaStatus::InvalidArgument
        );
    }
}

#[test]
fn model_predicts_from_checkpoint() {
    use spectral_adapt::model::{save_checkpoint, Architecture, ModelParams};
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("m.spad");
    save_checkpoint(&path, &ModelParams::zeros(Architecture::standard(31))).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let rgb = ramp(3 * 5 * 4);
    let wl = wavelengths(31);
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(sa_model_load(cpath.as_ptr(), &mut model), SaStatus::Ok);
        let mut bands = 0;
        assert_eq!(sa_model_bands(model, &mut bands), SaStatus::Ok);
        assert_eq!(bands, 31);
        let mut cube = ptr::null_mut();
        assert_eq!(
            sa_model_predict(model, rgb.as_ptr(), 5, 4, wl.as_ptr(), 31, &mut cube),
            SaStatus::Ok
        );
        let mut out = vec![0.0; 5 * 4 * 31];
        assert_eq!(sa_cube_data(cube, out.as_mut_ptr(), out.len()), SaStatus::Ok);
        assert!(out.iter().all(|&v| v == 0.5));
        sa_cube_free(cube);
        assert_eq!(
            sa_model_predict(model, rgb.as_ptr(), 2, 2, wl.as_ptr(), 31, &mut cube),
            SaStatus::ShapeMismatch
        );
        assert_eq!(
            sa_model_predict(model, rgb.as_ptr(), 5, 4, wl.as_ptr(), 30, &mut cube),
            SaStatus::ShapeMismatch
        );
        sa_model_free(model);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/spectral_adapt.h")).unwrap();
    for name in [
        "SA_STATUS_OK",
        "SA_STATUS_PANIC",
        "typedef struct SaCube SaCube",
        "typedef struct SaModel SaModel",
        "sa_cube_read",
        "sa_cube_free",
        "sa_metrics",
        "sa_spectral_density",
        "sa_masking_ratios",
        "sa_model_predict",
        "sa_atgp",
        "sa_last_error_message",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "spectral_adapt.h"
int main(void) {
    SaCube *cube = NULL;
    SaRegions d = {0.3, 0.2, 0.1}, r;
    SaStatus s = sa_masking_ratios(&d, 0.5, 0.9, &r);
    sa_cube_free(cube);
    return s == SA_STATUS_OK ? 0 : 1;
}
"#,
    )
    .unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| {
            std::process::Command::new(c)
                .arg("--version")
                .output()
                .is_ok_and(|o| o.status.success())
        })
        .ok_or(())
}
