use proptest::prelude::*;
use sha2::{Digest, Sha256};

use super::*;

#[test]
fn one_fps_from_thirty() {
    let idx = sample_frames(10.0, 30.0, 1.0).unwrap();
    assert_eq!(idx, (0..=10).map(|k| 30 * k).collect::<Vec<_>>());
}

#[test]
fn fifth_fps_gives_three_frames() {
    assert_eq!(sample_frames(10.0, 30.0, 0.2).unwrap(), vec![0, 150, 300]);
}

#[test]
fn zero_length_gives_first_frame() {
    assert_eq!(sample_frames(0.0, 30.0, 0.3).unwrap(), vec![0]);
}

#[test]
fn sampling_rate_checks() {
    assert!(sample_frames(10.0, 30.0, 31.0).is_err());
    assert!(sample_frames(10.0, 0.0, 1.0).is_err());
    assert!(sample_frames(10.0, 30.0, 0.0).is_err());
    assert!(sample_frames(-1.0, 30.0, 1.0).is_err());
}

#[test]
fn native_rate_keeps_every_frame() {
    assert_eq!(sample_frames(1.0, 5.0, 5.0).unwrap(), vec![0, 1, 2, 3, 4, 5]);
}

fn three_sources() -> Vec<SourceSpec> {
    vec![
        SourceSpec::synthetic("ego", Generator::SimRenders, 1),
        SourceSpec::synthetic("stills", Generator::Shapes, 2),
        SourceSpec::synthetic("hoi", Generator::SimRenders, 3),
    ]
}

#[test]
fn default_mix_counts() {
    let m = build_corpus(&three_sources(), &DEFAULT_PROPORTIONS, 4500).unwrap();
    assert_eq!(m.counts["ego"], 2600);
    assert_eq!(m.counts["stills"], 1200);
    assert_eq!(m.counts["hoi"], 700);
    assert_eq!(m.len(), 4500);
    m.check().unwrap();
}

#[test]
fn default_proportions_normalized() {
    let want = [0.578, 0.267, 0.156];
    for (p, w) in DEFAULT_PROPORTIONS.iter().zip(want) {
        assert!((p - w).abs() < 1e-3);
    }
    assert!((DEFAULT_PROPORTIONS.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn single_source_is_whole_manifest() {
    let src = SourceSpec::synthetic("only", Generator::Shapes, 5);
    let m = build_corpus(&[src], &[1.0], 20).unwrap();
    assert!(m.entries.iter().all(|e| e.source == "only"));
    assert_eq!(m.entries.iter().map(|e| e.index.unwrap()).collect::<Vec<_>>(), (0..20).collect::<Vec<_>>());
}

#[test]
fn even_split_tie_goes_to_first_source() {
    let srcs = [
        SourceSpec::synthetic("a", Generator::Shapes, 0),
        SourceSpec::synthetic("b", Generator::Shapes, 1),
    ];
    let m = build_corpus(&srcs, &[0.5, 0.5], 7).unwrap();
    assert_eq!((m.counts["a"], m.counts["b"]), (4, 3));
}

#[test]
fn mixing_is_order_invariant() {
    let srcs = three_sources();
    let props = [0.5, 0.3, 0.2];
    let a = build_corpus(&srcs, &props, 41).unwrap();
    let rev: Vec<SourceSpec> = srcs.iter().rev().cloned().collect();
    let b = build_corpus(&rev, &[0.2, 0.3, 0.5], 41).unwrap();
    assert_eq!(a, b);
    let tie = [SourceSpec::synthetic("b", Generator::Shapes, 1), SourceSpec::synthetic("a", Generator::Shapes, 0)];
    assert_eq!(build_corpus(&tie, &[0.5, 0.5], 7).unwrap().counts["a"], 4);
}

#[test]
fn invalid_mixes_rejected() {
    let srcs = three_sources();
    assert!(build_corpus(&srcs, &[0.5, 0.5, 0.5], 10).is_err());
    assert!(build_corpus(&srcs, &[0.5, 0.5], 10).is_err());
    assert!(build_corpus(&[], &[], 10).is_err());
    let dup = [SourceSpec::synthetic("x", Generator::Shapes, 0), SourceSpec::synthetic("x", Generator::Shapes, 1)];
    assert!(build_corpus(&dup, &[0.5, 0.5], 4).is_err());
}

#[test]
fn fingerprint_is_stable_and_content_sensitive() {
    let a = build_corpus(&three_sources(), &DEFAULT_PROPORTIONS, 45).unwrap();
    let b = build_corpus(&three_sources(), &DEFAULT_PROPORTIONS, 45).unwrap();
    assert_eq!(a.fingerprint, b.fingerprint);
    let mut srcs = three_sources();
    srcs[1] = SourceSpec::synthetic("stills", Generator::Shapes, 99);
    let c = build_corpus(&srcs, &DEFAULT_PROPORTIONS, 45).unwrap();
    assert_ne!(a.fingerprint, c.fingerprint);
}

fn write_frames(dir: &Path, n: usize, shade: u8) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        RgbImage::filled(8, 6, [shade, (i * 7 % 256) as u8, 3]).save_png(&dir.join(format!("{i:04}.png"))).unwrap();
    }
}

#[test]
fn still_images_track_file_content() {
    let tmp = tempfile::tempdir().unwrap();
    write_frames(tmp.path(), 5, 10);
    let src = SourceSpec {
        name: "stills".into(),
        kind: SourceKind::StillImages { path: tmp.path().into() },
    };
    let a = build_corpus(std::slice::from_ref(&src), &[1.0], 5).unwrap();
    assert_eq!(a.entries[2].frame_id, "0002.png");
    assert_eq!(a.load_entry(&a.entries[2]).unwrap().pixel(0, 0), [10, 14, 3]);

    RgbImage::filled(8, 6, [200, 0, 0]).save_png(&tmp.path().join("0002.png")).unwrap();
    let b = build_corpus(&[src], &[1.0], 5).unwrap();
    assert_ne!(a.fingerprint, b.fingerprint);
    assert_eq!(a.entries[0].hash, b.entries[0].hash);
    assert!(a.load_entry(&a.entries[2]).is_err());
}

#[test]
fn frame_sequences_are_subsampled() {
    let tmp = tempfile::tempdir().unwrap();
    write_frames(&tmp.path().join("clip_a"), 31, 1);
    write_frames(&tmp.path().join("clip_b"), 31, 2);
    let src = SourceSpec {
        name: "video".into(),
        kind: SourceKind::FrameSequence { path: tmp.path().into(), fps: 1.0, native_rate: 10.0 },
    };
    let m = build_corpus(std::slice::from_ref(&src), &[1.0], 8).unwrap();
    let ids: Vec<&str> = m.entries.iter().map(|e| e.frame_id.as_str()).collect();
    assert_eq!(
        ids,
        [
            "clip_a/0000.png", "clip_a/0010.png", "clip_a/0020.png", "clip_a/0030.png",
            "clip_b/0000.png", "clip_b/0010.png", "clip_b/0020.png", "clip_b/0030.png"
        ]
    );
    assert!(build_corpus(&[src], &[1.0], 9).is_err());
    let fast = SourceSpec {
        name: "video".into(),
        kind: SourceKind::FrameSequence { path: tmp.path().into(), fps: 20.0, native_rate: 10.0 },
    };
    assert!(build_corpus(&[fast], &[1.0], 1).is_err());
}

#[test]
fn empty_source_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let src = SourceSpec {
        name: "nothing".into(),
        kind: SourceKind::StillImages { path: tmp.path().into() },
    };
    assert!(build_corpus(&[src], &[1.0], 0).is_err());
}

#[test]
fn manifest_round_trips() {
    let m = desk_corpus(30, 4).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("manifest.json");
    m.save(&path).unwrap();
    assert_eq!(CorpusManifest::load(&path).unwrap(), m);

    let mut bad = m.clone();
    bad.entries[0].hash = "00".repeat(32);
    bad.save(&path).unwrap();
    assert!(CorpusManifest::load(&path).is_err());
    let mut dup = m.clone();
    dup.entries[1] = dup.entries[0].clone();
    dup.save(&path).unwrap();
    assert!(CorpusManifest::load(&path).is_err());
}

#[test]
fn loaded_images_fit_the_encoder() {
    let m = desk_corpus(12, 0).unwrap();
    for size in [64, 32] {
        let imgs = m.load_images(size).unwrap();
        assert_eq!(imgs.len(), 12);
        for t in &imgs {
            assert_eq!(t.shape(), &[3, size, size]);
            assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}

fn digest(set: &SynthSet) -> String {
    let mut h = Sha256::new();
    for img in &set.images {
        h.update(&img.data);
    }
    hex::encode(h.finalize())
}

#[test]
fn synthetic_sets_are_deterministic() {
    for g in [Generator::Shapes, Generator::SimRenders] {
        let a = synth_corpus(100, 7, g).unwrap();
        let b = synth_corpus(100, 7, g).unwrap();
        assert_eq!(digest(&a), digest(&b));
        assert_ne!(digest(&a), digest(&synth_corpus(100, 8, g).unwrap()));
    }
    assert!(synth_corpus(0, 0, Generator::Shapes).is_err());
}

#[test]
fn saved_sets_are_byte_identical() {
    let set = synth_corpus(10, 3, Generator::Shapes).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    set.save(a.path()).unwrap();
    synth_corpus(10, 3, Generator::Shapes).unwrap().save(b.path()).unwrap();
    for name in ["000000.png", "000009.png", "labels.json"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
}

#[test]
fn shape_labels_are_balanced() {
    for n in [8, 100, 803] {
        let labels = synth_corpus(n, 1, Generator::Shapes).unwrap().labels.unwrap();
        for c in 0..SHAPE_CLASSES {
            let k = labels.iter().filter(|&&l| l == c).count() as f64;
            assert!((k - n as f64 / 8.0).abs() <= 1.0, "n={n} class {c}: {k}");
        }
    }
    assert!(synth_corpus(4, 1, Generator::SimRenders).unwrap().labels.is_none());
}

#[test]
fn shape_images_contain_the_shape() {
    let set = synth_corpus(16, 2, Generator::Shapes).unwrap();
    for img in &set.images {
        let colors: HashSet<[u8; 3]> = (0..img.height).flat_map(|y| (0..img.width).map(move |x| (x, y))).map(|(x, y)| img.pixel(x, y)).collect();
        assert!(colors.len() >= 2);
    }
}

#[test]
fn sim_cameras_differ_for_one_scene() {
    let set = synth_corpus(20, 9, Generator::SimRenders).unwrap();
    for pair in set.images.chunks(2) {
        assert_ne!(pair[0], pair[1]);
    }
}

proptest! {
    #[test]
    fn allocation_is_within_one_entry(raw in prop::collection::vec(0.01f64..1.0, 1..6), total in 0usize..5000) {
        let sum: f64 = raw.iter().sum();
        let props: Vec<f64> = raw.iter().map(|r| r / sum).collect();
        let names: Vec<String> = (0..props.len()).map(|i| format!("s{i}")).collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let counts = allocate(&refs, &props, total);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, p) in counts.iter().zip(&props) {
            prop_assert!((*c as f64 - p * total as f64).abs() < 1.0 + 1e-9);
        }
    }
}
