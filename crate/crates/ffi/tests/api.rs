use std::ffi::{CStr, CString};
use std::ptr;

use savid_ffi::*;

fn last_error() -> String {
    let p = savid_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_config() -> *mut SavidConfig {
    let toml = CString::new(
        "channels = 8\nheads = 2\nwindow = 3\nheight = 12\nwidth = 12\nkeypoints = 16\nsequence_length = 2\n\
         [scene]\nobjects = 2\n",
    )
    .unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { savid_config_from_toml(toml.as_ptr(), &mut cfg) }, SavidStatus::Ok, "{}", last_error());
    cfg
}

fn car(x: f64, y: f64, yaw: f64, score: f64) -> SavidBox {
    SavidBox {
        center: [x, y, 0.0],
        size: [4.0, 2.0, 1.5],
        yaw,
        class_id: 0,
        score,
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(savid_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_round_trips_and_rejects_bad_input() {
    let cfg = small_config();
    let mut shape = [0usize; 3];
    assert_eq!(unsafe { savid_config_shape(cfg, shape.as_mut_ptr()) }, SavidStatus::Ok);
    assert_eq!(shape, [12, 12, 8]);

    let mut len = 0;
    assert_eq!(unsafe { savid_config_to_toml(cfg, ptr::null_mut(), 0, &mut len) }, SavidStatus::BufferTooSmall);
    let mut buf = vec![0u8; len];
    assert_eq!(unsafe { savid_config_to_toml(cfg, buf.as_mut_ptr().cast(), len, &mut len) }, SavidStatus::Ok);
    let text = CStr::from_bytes_with_nul(&buf).unwrap();
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { savid_config_from_toml(text.as_ptr(), &mut again) }, SavidStatus::Ok);
    unsafe { savid_config_free(again) };
    unsafe { savid_config_free(cfg) };

    let bad = CString::new("channels = 10\nheads = 3\n").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { savid_config_from_toml(bad.as_ptr(), &mut out) }, SavidStatus::InvalidArgument);
    assert!(out.is_null());
    assert!(last_error().contains("divisible"));
    assert_eq!(unsafe { savid_config_from_toml(ptr::null(), &mut out) }, SavidStatus::NullPointer);
    unsafe { savid_config_free(ptr::null_mut()) };
}

#[test]
fn scene_and_forward_expose_boxes_and_features() {
    let cfg = small_config();
    let mut scene = ptr::null_mut();
    assert_eq!(unsafe { savid_scene_generate(cfg, 3, 2, &mut scene) }, SavidStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { savid_scene_frame_count(scene) }, 2);
    let mut boxes = [car(0.0, 0.0, 0.0, 1.0); 4];
    let mut n = 0;
    assert_eq!(unsafe { savid_scene_boxes(scene, 0, boxes.as_mut_ptr(), 4, &mut n) }, SavidStatus::Ok);
    assert_eq!(n, 2);
    assert_eq!(unsafe { savid_scene_boxes(scene, 5, boxes.as_mut_ptr(), 4, &mut n) }, SavidStatus::InvalidArgument);

    let mut result = ptr::null_mut();
    assert_eq!(unsafe { savid_forward(cfg, scene, &mut result) }, SavidStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { savid_forward_frame_count(result) }, 2);
    let mut features = vec![0.0; 12 * 12 * 8];
    let mut len = 0;
    let refined = SavidFeature::Refined as u32;
    let status = unsafe { savid_forward_features(result, 1, refined, features.as_mut_ptr(), features.len(), &mut len) };
    assert_eq!(status, SavidStatus::Ok);
    assert_eq!(len, features.len());
    assert!(features.iter().all(|v| v.is_finite()) && features.iter().any(|&v| v != 0.0));
    let status = unsafe { savid_forward_features(result, 1, refined, features.as_mut_ptr(), 10, &mut len) };
    assert_eq!(status, SavidStatus::BufferTooSmall);
    assert_eq!(len, 12 * 12 * 8);
    let status = unsafe { savid_forward_features(result, 0, 9, features.as_mut_ptr(), features.len(), &mut len) };
    assert_eq!(status, SavidStatus::InvalidArgument);

    unsafe {
        savid_forward_free(result);
        savid_scene_free(scene);
        savid_config_free(cfg);
    }
}

#[test]
fn metric_wrappers_match_the_library() {
    let (a, b) = (car(0.0, 0.0, 0.0, 0.9), car(2.0, 0.0, 0.0, 0.8));
    let mut iou = 0.0;
    assert_eq!(unsafe { savid_bev_iou(&a, &b, &mut iou) }, SavidStatus::Ok);
    assert!((iou - 1.0 / 3.0).abs() < 1e-12);

    let boxes = [a, b, car(20.0, 0.0, 1.0, 0.5)];
    let mut keep = [usize::MAX; 3];
    let mut n = 0;
    assert_eq!(unsafe { savid_nms(boxes.as_ptr(), 3, 0.3, keep.as_mut_ptr(), 3, &mut n) }, SavidStatus::Ok);
    assert_eq!(&keep[..n], [0, 2]);
    assert_eq!(unsafe { savid_nms(boxes.as_ptr(), 3, 1.5, keep.as_mut_ptr(), 3, &mut n) }, SavidStatus::InvalidArgument);

    let mut r = 0.0;
    assert_eq!(unsafe { savid_rce(0.8, 0.6, &mut r) }, SavidStatus::Ok);
    assert!((r - 0.25).abs() < 1e-12);
    assert_eq!(unsafe { savid_rce(0.0, 0.6, &mut r) }, SavidStatus::InvalidArgument);

    let ap: Vec<f64> = (0..50).map(|i| (i % 5) as f64 * 0.1).collect();
    let mut m = 0.0;
    assert_eq!(unsafe { savid_ap_corr(ap.as_ptr(), 10, &mut m) }, SavidStatus::Ok);
    assert!((m - 0.2).abs() < 1e-12);
    assert_eq!(unsafe { savid_ap_corr(ap.as_ptr(), 11, &mut m) }, SavidStatus::InvalidArgument);
}

#[test]
fn corruption_wrappers_validate_and_run() {
    let points: Vec<f64> = (0..100).flat_map(|i| [i as f64 * 0.3, 1.0, -1.0, 0.5]).collect();
    let mut out = vec![0.0; points.len() * 2];
    let mut n = 0;
    let density = SavidCorruption::DensityDecrease as u32;
    let status = unsafe { savid_corrupt_lidar(points.as_ptr(), 100, density, 3, 7, out.as_mut_ptr(), 200, &mut n) };
    assert_eq!(status, SavidStatus::Ok, "{}", last_error());
    assert!(n < 100);
    assert!(out[..4 * n].iter().all(|v| v.is_finite()));
    let status = unsafe { savid_corrupt_lidar(points.as_ptr(), 100, density, 6, 7, out.as_mut_ptr(), 200, &mut n) };
    assert_eq!(status, SavidStatus::InvalidArgument);
    let gauss_i = SavidCorruption::GaussianNoiseI as u32;
    let status = unsafe { savid_corrupt_lidar(points.as_ptr(), 100, gauss_i, 1, 7, out.as_mut_ptr(), 200, &mut n) };
    assert_eq!(status, SavidStatus::InvalidArgument);
    let status = unsafe { savid_corrupt_lidar(points.as_ptr(), 100, 42, 1, 7, out.as_mut_ptr(), 200, &mut n) };
    assert_eq!(status, SavidStatus::InvalidArgument);

    let image = vec![0.5; 6 * 5 * 3];
    let mut noisy = vec![0.0; image.len()];
    let status = unsafe { savid_corrupt_image(image.as_ptr(), 6, 5, gauss_i, 5, 1, noisy.as_mut_ptr()) };
    assert_eq!(status, SavidStatus::Ok, "{}", last_error());
    assert!(noisy.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(noisy, image);
}

#[test]
fn robustness_writes_a_report() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { savid_robustness(cfg, path.as_ptr()) }, SavidStatus::Ok, "{}", last_error());
    assert!(dir.path().join("report.json").exists());
    assert!(dir.path().join("rce.csv").exists());
    unsafe { savid_config_free(cfg) };
}
