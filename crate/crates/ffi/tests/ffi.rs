use std::ffi::{CStr, CString};
use std::ptr;

use skyspectra_ffi::*;

fn last_error() -> String {
    let p = sky_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn generate_attack_and_score() {
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(sky_generator_new(ptr::null(), &mut g), SkyStatus::Ok);
        let mut clean = ptr::null_mut();
        assert_eq!(sky_generator_clean(g, 7, &mut clean), SkyStatus::Ok);
        assert_eq!((sky_grid_rows(clean), sky_grid_cols(clean)), (128, 128));

        let (mut att, mut mask) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(
            sky_generator_attack(g, 7, SkyAttackMode::Airborne, 0.3, &mut att, &mut mask),
            SkyStatus::Ok
        );
        let m = std::slice::from_raw_parts(sky_grid_data(mask), 128 * 128);
        let frac = m.iter().sum::<f32>() / m.len() as f32;
        assert!((frac - 0.3).abs() < 0.02, "{frac}");

        let (mut s_self, mut s_att) = (0.0, 0.0);
        assert_eq!(sky_ssim(clean, clean, &mut s_self), SkyStatus::Ok);
        assert_eq!(sky_ssim(att, clean, &mut s_att), SkyStatus::Ok);
        assert_eq!(s_self, 1.0);
        assert!(s_att < 1.0);

        sky_grid_free(att);
        sky_grid_free(mask);
        sky_grid_free(clean);
        sky_generator_free(g);
    }
}

#[test]
fn grid_roundtrip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("g.grid").to_str().unwrap()).unwrap();
    let values: Vec<f32> = (0..6).map(|i| i as f32 / 5.0).collect();
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(sky_grid_new(2, 3, values.as_ptr(), &mut g), SkyStatus::Ok);
        assert_eq!(sky_grid_write(g, path.as_ptr()), SkyStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(sky_grid_read(path.as_ptr(), &mut back), SkyStatus::Ok);
        assert_eq!(std::slice::from_raw_parts(sky_grid_data(back), 6), &values[..]);
        sky_grid_free(g);
        sky_grid_free(back);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(
            sky_grid_new(0, 3, [0.0f32].as_ptr(), &mut g),
            SkyStatus::InvalidArgument
        );
        assert!(last_error().contains("0x3"));
        assert_eq!(sky_grid_new(1, 1, ptr::null(), &mut g), SkyStatus::NullPointer);
        assert!(last_error().contains("data"));

        let missing = CString::new("/nonexistent/x.grid").unwrap();
        assert_eq!(sky_grid_read(missing.as_ptr(), &mut g), SkyStatus::Io);

        let mut m = ptr::null_mut();
        assert_eq!(sky_model_load(missing.as_ptr(), &mut m), SkyStatus::Io);
        assert!(m.is_null());

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[grid]\nrows = -1\n").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        let mut gen = ptr::null_mut();
        assert_eq!(sky_generator_new(bad.as_ptr(), &mut gen), SkyStatus::Config);

        let mut out = 0.0;
        assert_eq!(sky_ssim(ptr::null(), ptr::null(), &mut out), SkyStatus::NullPointer);
        // free functions accept NULL
        sky_grid_free(ptr::null_mut());
        sky_model_free(ptr::null_mut());
        sky_generator_free(ptr::null_mut());
    }
}

#[test]
fn reconstruct_with_saved_model() {
    use skyspectra::dataset::NormalizationSpec;
    use skyspectra::denoiser::{DenoiserModel, UNetConfig};
    use skyspectra::diffusion::NoiseSchedule;

    let cfg = UNetConfig {
        rows: 16,
        cols: 16,
        base_channels: 8,
        res_blocks: 1,
        time_embed_dim: 16,
        ..UNetConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    DenoiserModel::new(cfg, &NoiseSchedule::default(), NormalizationSpec::default(), 0)
        .unwrap()
        .save(&path)
        .unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let y: Vec<f32> = (0..256).map(|i| (i % 16) as f32 / 16.0).collect();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(sky_model_load(cpath.as_ptr(), &mut m), SkyStatus::Ok);
        let mut yg = ptr::null_mut();
        assert_eq!(sky_grid_new(16, 16, y.as_ptr(), &mut yg), SkyStatus::Ok);
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(sky_reconstruct(m, yg, 5, 1, 4, true, 3, &mut a), SkyStatus::Ok);
        assert_eq!(sky_reconstruct(m, yg, 5, 1, 4, true, 3, &mut b), SkyStatus::Ok);
        let (da, db) = (
            std::slice::from_raw_parts(sky_grid_data(a), 256),
            std::slice::from_raw_parts(sky_grid_data(b), 256),
        );
        assert_eq!(da, db);
        assert!(da.iter().all(|v| (0.0..=1.0).contains(v)));

        let mut wrong = ptr::null_mut();
        let small = [0.5f32; 64];
        assert_eq!(sky_grid_new(8, 8, small.as_ptr(), &mut wrong), SkyStatus::Ok);
        let mut c = ptr::null_mut();
        assert_eq!(
            sky_reconstruct(m, wrong, 5, 1, 4, true, 3, &mut c),
            SkyStatus::InvalidArgument
        );
        assert!(c.is_null());

        for g in [a, b, yg, wrong] {
            sky_grid_free(g);
        }
        sky_model_free(m);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/skyspectra.h")).unwrap();
    for sym in [
        "sky_last_error",
        "sky_generator_new",
        "sky_generator_attack",
        "sky_grid_data",
        "sky_model_load",
        "sky_reconstruct",
        "sky_ssim",
        "SKY_STATUS_MODEL_MISMATCH",
        "typedef struct SkyGrid SkyGrid",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
    let v = unsafe { CStr::from_ptr(sky_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"skyspectra.h\"\nint main(void) { SkyGrid *g = 0; return (int)sky_grid_rows(g) + SKY_STATUS_OK; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
