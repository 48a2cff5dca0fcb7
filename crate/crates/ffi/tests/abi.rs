use std::ffi::{c_char, CStr, CString};
use std::ptr;

use mvp::mae::EncoderCheckpoint;
use mvp::policy::{init_policy, policy_forward, PolicyCheckpoint, PolicyConfig};
use mvp::simworld::{self, Camera, TaskId, Variation};
use mvp::vit::{self, EncoderConfig};
use mvp_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe { mvp_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn random_encoder(seed: u64) -> *mut MvpEncoder {
    let tier = CString::new("micro").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { mvp_encoder_random(tier.as_ptr(), seed, &mut h) }, MvpStatus::MvpOk);
    h
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(mvp_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn counts_match_library() {
    let tier = CString::new("vit-s").unwrap();
    let (mut p, mut f) = (0u64, 0u64);
    unsafe {
        assert_eq!(mvp_count_params(tier.as_ptr(), &mut p), MvpStatus::MvpOk);
        assert_eq!(mvp_count_flops(tier.as_ptr(), 224, &mut f), MvpStatus::MvpOk);
    }
    let c = EncoderConfig::from_tier("vit-s").unwrap();
    assert_eq!(p, vit::count_params(&c));
    assert_eq!(f, vit::count_flops(&c, 224).unwrap());
}

#[test]
fn errors_map_to_codes_and_messages() {
    let bad = CString::new("vit-zz").unwrap();
    let mut p = 0u64;
    assert_eq!(unsafe { mvp_count_params(bad.as_ptr(), &mut p) }, MvpStatus::MvpErrConfig);
    assert!(last_error().contains("vit-zz"));
    assert_eq!(unsafe { mvp_count_params(ptr::null(), &mut p) }, MvpStatus::MvpErrNull);
    assert_eq!(unsafe { mvp_last_error(ptr::null_mut(), 0) }, "tier is null".len());

    let missing = CString::new("/nonexistent/encoder.ckpt").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { mvp_encoder_load(missing.as_ptr(), &mut h) }, MvpStatus::MvpErrIo);
    assert!(h.is_null());

    let tier = CString::new("micro").unwrap();
    assert_eq!(unsafe { mvp_count_params(tier.as_ptr(), &mut p) }, MvpStatus::MvpOk);
    assert_eq!(last_error(), "");
}

#[test]
fn free_accepts_null() {
    unsafe {
        mvp_encoder_free(ptr::null_mut());
        mvp_policy_free(ptr::null_mut());
        mvp_sim_free(ptr::null_mut());
    }
}

#[test]
fn embed_matches_encoder() {
    let h = random_encoder(3);
    let ck = EncoderCheckpoint::random(&EncoderConfig::from_tier("micro").unwrap(), 3).unwrap();
    let (mut width, mut size) = (0, 0);
    assert_eq!(unsafe { mvp_encoder_dims(h, &mut width, &mut size) }, MvpStatus::MvpOk);
    assert_eq!((width, size), (ck.config.width, ck.config.image_size));

    let mut fp = vec![0 as c_char; 65];
    assert_eq!(unsafe { mvp_encoder_fingerprint(h, fp.as_mut_ptr(), fp.len()) }, MvpStatus::MvpOk);
    assert_eq!(unsafe { CStr::from_ptr(fp.as_ptr()) }.to_str().unwrap(), ck.fingerprint());
    assert_eq!(unsafe { mvp_encoder_fingerprint(h, fp.as_mut_ptr(), 64) }, MvpStatus::MvpErrBufferTooSmall);

    let s = simworld::reset(TaskId::Reach, Variation::Grid(2), 0).unwrap();
    let img = simworld::render(&s, Camera::Wrist);
    let want = vit::encode(&ck.config, &ck.params, &img.to_tensor()).unwrap().cls_feature;
    let mut out = vec![0f32; width];
    let mut n = 0;
    let st = unsafe { mvp_encoder_embed(h, img.data.as_ptr(), img.width, img.height, out.as_mut_ptr(), out.len(), &mut n) };
    assert_eq!(st, MvpStatus::MvpOk);
    assert_eq!(n, width);
    assert_eq!(out.as_slice(), want.data());

    let mut small = vec![0f32; width - 1];
    let st = unsafe { mvp_encoder_embed(h, img.data.as_ptr(), img.width, img.height, small.as_mut_ptr(), small.len(), &mut n) };
    assert_eq!(st, MvpStatus::MvpErrBufferTooSmall);
    assert_eq!(n, width);
    unsafe { mvp_encoder_free(h) };
}

#[test]
fn sim_follows_library_stepping() {
    let task = CString::new("reach").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { mvp_sim_new(task.as_ptr(), 5, 9, &mut h) }, MvpStatus::MvpOk);
    let mut s = simworld::reset(TaskId::Reach, Variation::Grid(5), 9).unwrap();
    let mut a = [0f64; 8];
    let mut q = [0f64; 8];
    let mut n = 0;
    let mut done = false;
    for _ in 0..TaskId::Reach.max_steps() {
        assert_eq!(unsafe { mvp_sim_expert_action(h, a.as_mut_ptr(), a.len(), &mut n) }, MvpStatus::MvpOk);
        assert_eq!(&a[..n], simworld::expert_action(&s).unwrap().as_slice());
        assert_eq!(unsafe { mvp_sim_step(h, a.as_ptr(), n) }, MvpStatus::MvpOk);
        s = simworld::step(&s, &a[..n]).unwrap();
        assert_eq!(unsafe { mvp_sim_proprio(h, q.as_mut_ptr(), q.len(), &mut n) }, MvpStatus::MvpOk);
        assert_eq!(&q[..n], s.proprio().as_slice());
        assert_eq!(unsafe { mvp_sim_success(h, &mut done) }, MvpStatus::MvpOk);
        assert_eq!(done, simworld::success(&s));
        if done {
            break;
        }
    }
    assert!(done);

    let mut rgb = vec![0u8; simworld::RENDER_SIZE * simworld::RENDER_SIZE * 3];
    let st = unsafe { mvp_sim_render(h, MvpCamera::MvpCameraThird, rgb.as_mut_ptr(), rgb.len(), &mut n) };
    assert_eq!(st, MvpStatus::MvpOk);
    assert_eq!(rgb, simworld::render(&s, Camera::Third).data);

    assert_eq!(unsafe { mvp_sim_step(h, a.as_ptr(), 2) }, MvpStatus::MvpErrShape);
    unsafe { mvp_sim_free(h) };

    let bad = CString::new("juggle").unwrap();
    assert_eq!(unsafe { mvp_sim_new(bad.as_ptr(), 0, 0, &mut h) }, MvpStatus::MvpErrConfig);
}

#[test]
fn policy_act_matches_forward_and_checks_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let enc = EncoderCheckpoint::random(&EncoderConfig::from_tier("micro").unwrap(), 1).unwrap();
    let config = PolicyConfig::for_task(TaskId::Reach, enc.config.width);
    let ck = PolicyCheckpoint {
        params: init_policy(&config, 4).unwrap(),
        config: config.clone(),
        encoder_fingerprint: enc.fingerprint(),
        encoder: None,
        seed: 4,
        loss_curve: Vec::new(),
    };
    let path = dir.path().join("policy.ckpt");
    ck.save(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let other = random_encoder(2);
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { mvp_policy_load(cpath.as_ptr(), other, &mut p) }, MvpStatus::MvpErrFingerprint);
    assert!(p.is_null());
    unsafe { mvp_encoder_free(other) };

    let h = random_encoder(1);
    assert_eq!(unsafe { mvp_policy_load(cpath.as_ptr(), h, &mut p) }, MvpStatus::MvpOk);

    let s = simworld::reset(TaskId::Reach, Variation::Grid(0), 0).unwrap();
    let img = simworld::render(&s, config.camera);
    let q = s.proprio();
    let feat = vit::encode(&enc.config, &enc.params, &img.to_tensor()).unwrap().cls_feature;
    let want = policy_forward(&config, &ck.params, Some(&feat), &q).unwrap().to_sim();

    let mut out = [0f64; 4];
    let mut n = 0;
    let st = unsafe {
        mvp_policy_act(p, img.data.as_ptr(), img.width, img.height, q.as_ptr(), q.len(), out.as_mut_ptr(), out.len(), &mut n)
    };
    assert_eq!(st, MvpStatus::MvpOk);
    assert_eq!(&out[..n], want.as_slice());

    let st = unsafe {
        mvp_policy_act(p, img.data.as_ptr(), img.width, img.height, q.as_ptr(), 2, out.as_mut_ptr(), out.len(), &mut n)
    };
    assert_ne!(st, MvpStatus::MvpOk);
    unsafe {
        mvp_policy_free(p);
        mvp_encoder_free(h);
    }
}

#[test]
fn header_declares_every_export_and_compiles() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let header = std::fs::read_to_string(format!("{dir}/include/mvp.h")).unwrap();
    let src = std::fs::read_to_string(format!("{dir}/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|l| l.split('(').next().unwrap())
        .collect();
    assert!(exports.len() > 15);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    for c in ["MVP_OK = 0", "MVP_ERR_PANIC", "typedef struct MvpEncoder MvpEncoder"] {
        assert!(header.contains(c), "{c}");
    }

    let Ok(cc) = which_cc() else { return };
    let tmp = tempfile::tempdir().unwrap();
    let prog = tmp.path().join("use.c");
    std::fs::write(
        &prog,
        "#include \"mvp.h\"\nint main(void) { MvpSim *s = 0; bool ok = false;\n\
         MvpStatus st = mvp_sim_new(\"reach\", 0, 0, &s);\n\
         st = mvp_sim_success(s, &ok); mvp_sim_free(s); return st == MVP_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(format!("{dir}/include"))
        .arg(&prog)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
