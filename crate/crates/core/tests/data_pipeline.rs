//! Dataset ingestion on real files in a temporary directory.

use std::path::Path;

use cevae_core::data::{
    augment, batch_indices, decode_image, load_all, load_manifest, load_sample, save_image,
    synthetic_pairs, Augmentation, DatasetManifest, Layout, DEGRADED_DIR, REFERENCE_DIR,
};
use cevae_core::CoreError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_png(path: &Path, w: u32, h: u32, shade: u8) {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([shade, (x % 256) as u8, (y % 256) as u8])
    });
    img.save(path).unwrap();
}

fn paired_root(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for sub in [DEGRADED_DIR, REFERENCE_DIR] {
        std::fs::create_dir(dir.path().join(sub)).unwrap();
    }
    for i in 0..n {
        write_png(
            &dir.path().join(DEGRADED_DIR).join(format!("s{i}.png")),
            20,
            16,
            10 * i as u8,
        );
        write_png(
            &dir.path().join(REFERENCE_DIR).join(format!("s{i}.png")),
            20,
            16,
            200,
        );
    }
    dir
}

#[test]
fn paired_directories_match_by_stem() {
    let dir = paired_root(5);
    std::fs::write(dir.path().join(DEGRADED_DIR).join("notes.txt"), "ignored").unwrap();
    let m = load_manifest(dir.path(), Layout::PairedDirs).unwrap();
    assert_eq!(m.len(), 5);
    assert_eq!(
        m.entries.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(),
        ["s0", "s1", "s2", "s3", "s4"]
    );
    let (samples, failed) = load_all(&m, 8);
    assert!(failed.is_empty());
    assert_eq!(samples.len(), 5);
    assert_eq!(
        (samples[2].degraded.height(), samples[2].degraded.width()),
        (8, 8)
    );
    assert!(samples.iter().all(|s| s
        .reference
        .plane(0)
        .iter()
        .all(|&v| (v - (200.0 / 127.5 - 1.0)).abs() < 1e-12)));

    let text = m.to_text();
    assert_eq!(
        DatasetManifest::from_text(dir.path(), &text)
            .unwrap()
            .entries,
        m.entries
    );
}

#[test]
fn orphans_and_empty_roots_are_manifest_errors() {
    let dir = paired_root(2);
    write_png(&dir.path().join(DEGRADED_DIR).join("lonely.png"), 4, 4, 0);
    let err = load_manifest(dir.path(), Layout::PairedDirs).unwrap_err();
    assert!(matches!(&err, CoreError::Manifest(m) if m.contains("lonely")));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_manifest(empty.path(), Layout::Identity),
        Err(CoreError::Manifest(_))
    ));
    assert!(matches!(
        load_manifest(&empty.path().join("nope"), Layout::Identity),
        Err(CoreError::Manifest(_))
    ));
    assert!(matches!(
        DatasetManifest::from_text(empty.path(), "a\tb\tc\na\tb\tc\n"),
        Err(CoreError::Manifest(_))
    ));
}

#[test]
fn identity_layout_pairs_each_image_with_itself() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..3 {
        write_png(&dir.path().join(format!("im{i}.png")), 12, 12, 50 * i as u8);
    }
    let m = load_manifest(dir.path(), Layout::Identity).unwrap();
    assert_eq!(m.len(), 3);
    let s = load_sample(&m.entries[1], 12).unwrap();
    assert_eq!(s.degraded, s.reference);
    assert_eq!("identity".parse::<Layout>().unwrap(), Layout::Identity);
    assert!("flat".parse::<Layout>().is_err());
}

#[test]
fn large_images_are_resized_to_the_model_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wide.png");
    write_png(&path, 512, 384, 128);
    let m = load_manifest(dir.path(), Layout::Identity).unwrap();
    let s = load_sample(&m.entries[0], 256).unwrap();
    assert_eq!((s.degraded.height(), s.degraded.width()), (256, 256));
    // a constant channel survives resampling
    assert!(s
        .degraded
        .plane(0)
        .iter()
        .all(|&v| (v - (128.0 / 127.5 - 1.0)).abs() < 1e-12));
}

#[test]
fn bytes_map_to_the_unit_interval_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ramp.png");
    let ramp = image::RgbImage::from_fn(256, 1, |x, _| image::Rgb([x as u8, 255 - x as u8, 0]));
    ramp.save(&path).unwrap();
    let img = decode_image(&path).unwrap();
    assert_eq!(img.get(0, 0, 0), -1.0);
    assert_eq!(img.get(0, 0, 255), 1.0);
    assert_eq!(img.get(1, 0, 0), 1.0);
    let out = dir.path().join("copy.png");
    save_image(&out, &img).unwrap();
    assert_eq!(image::open(&out).unwrap().to_rgb8(), ramp);
}

#[test]
fn undecodable_files_fail_only_their_sample() {
    let dir = paired_root(3);
    std::fs::write(dir.path().join(REFERENCE_DIR).join("s1.png"), b"not a png").unwrap();
    let m = load_manifest(dir.path(), Layout::PairedDirs).unwrap();
    let (ok, failed) = load_all(&m, 8);
    assert_eq!(ok.len(), 2);
    assert_eq!(failed.len(), 1);
    assert!(matches!(&failed[0], CoreError::Sample { id, .. } if id == "s1"));
}

#[test]
fn augmentation_is_shared_and_replayable() {
    let s = &synthetic_pairs(1, 24, 3)[0];
    let (a, aug) = augment(s, 11).unwrap();
    let (b, again) = augment(s, 11).unwrap();
    assert_eq!((a.clone(), aug), (b, again));
    assert_eq!(aug.apply(&s.degraded).unwrap(), a.degraded);
    assert_eq!(aug.apply(&s.reference).unwrap(), a.reference);
    assert!(aug.crop_height >= 19 && aug.crop_height <= 24);
    assert_eq!(
        Augmentation::identity(24, 24).apply(&s.degraded).unwrap(),
        s.degraded
    );

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let flips = (0..200)
        .filter(|_| Augmentation::sample(&mut rng, 10, 10).flip)
        .count();
    assert!((60..140).contains(&flips));
}

#[test]
fn batches_cover_every_sample_once() {
    let b = batch_indices(10, 4, 1, 0, true).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
    let mut all: Vec<usize> = b.concat();
    all.sort();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert_eq!(b, batch_indices(10, 4, 1, 0, true).unwrap());
    assert_ne!(b, batch_indices(10, 4, 1, 1, true).unwrap());
    assert_eq!(
        batch_indices(5, 2, 1, 0, false).unwrap(),
        vec![vec![0, 1], vec![2, 3], vec![4]]
    );
    assert!(matches!(
        batch_indices(5, 0, 1, 0, false),
        Err(CoreError::Config(_))
    ));
}

#[test]
fn synthetic_pairs_are_seeded_and_degraded() {
    let a = synthetic_pairs(3, 16, 9);
    assert_eq!(a, synthetic_pairs(3, 16, 9));
    assert_eq!(a[2].id, "synthetic_0002");
    for s in &a {
        assert_ne!(s.degraded, s.reference);
        assert!(s.degraded.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
