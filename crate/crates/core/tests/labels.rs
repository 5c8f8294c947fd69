use ltuda::labels::{generate_synthetic, load_manifest, sample_batch, save_manifest, Dataset, SynthConfig, UNKNOWN};
use ltuda::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::path::Path;

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SynthConfig::new(4, 1, 64, 7);
    generate_synthetic(&cfg, a.path()).unwrap();
    generate_synthetic(&cfg, b.path()).unwrap();
    assert_eq!(read_tree(a.path()), read_tree(b.path()));
}

#[test]
fn every_class_is_labeled_in_exactly_one_subset() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&SynthConfig::new(4, 10, 256, 1), dir.path()).unwrap();
    assert_eq!(m.subsets.len(), 4);
    assert!(m.subsets.iter().all(|s| s.samples.len() == 10));
    let classes: Vec<u8> = m.subsets.iter().map(|s| s.labeled_class).collect();
    assert_eq!(classes.iter().copied().collect::<BTreeSet<_>>(), (1..=4).collect());
    assert_eq!(classes.len(), 4);
}

#[test]
fn partial_labels_agree_with_full_labels() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&SynthConfig::new(3, 3, 64, 11), dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    for r in &ds.train {
        let full = r.full_label.as_ref().unwrap();
        let lc = r.partial_label.labeled_class as i16;
        for (i, &v) in r.partial_label.classes.data.iter().enumerate() {
            assert!(v == UNKNOWN || v == lc);
            if v != UNKNOWN {
                assert_eq!(v, full.classes.data[i] as i16);
            }
        }
        assert!(r.image.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&SynthConfig::new(2, 2, 32, 3), dir.path()).unwrap();
    let copy = dir.path().join("copy.json");
    save_manifest(&m, &copy).unwrap();
    std::fs::rename(&copy, dir.path().join("manifest.json")).unwrap();
    assert_eq!(load_manifest(dir.path()).unwrap(), m);
}

#[test]
fn missing_file_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&SynthConfig::new(2, 2, 32, 3), dir.path()).unwrap();
    let victim = dir.path().join(&m.subsets[1].samples[0].image);
    std::fs::remove_file(&victim).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains(&m.subsets[1].samples[0].image), "{err}");
}

#[test]
fn label_value_above_class_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&SynthConfig::new(2, 1, 32, 3), dir.path()).unwrap();
    let path = dir.path().join(m.subsets[0].samples[0].full_label.as_ref().unwrap());
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0..2].copy_from_slice(&3i16.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Validation(_))));
}

#[test]
fn batches_are_distinct_and_seeded() {
    let mut a = ChaCha8Rng::seed_from_u64(5);
    let mut b = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = sample_batch(7, 2, &mut a).unwrap();
        assert_eq!(x, sample_batch(7, 2, &mut b).unwrap());
        assert_ne!(x[0], x[1]);
    }
    assert!(sample_batch(7, 1, &mut a).is_err());
    assert!(sample_batch(0, 2, &mut a).is_err());
}

/// Subsets of 10, 10, 10 and 20 samples drawn in batches of 4: the
/// per-subset counts over 10k batches follow the pool shares. The chi-square
/// critical value for 3 degrees of freedom at p = 0.001 is 16.27.
#[test]
fn subset_frequencies_match_pool_shares() {
    let sizes = [10usize, 10, 10, 20];
    let owner: Vec<usize> = sizes.iter().enumerate().flat_map(|(s, &n)| std::iter::repeat_n(s, n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0f64; 4];
    let draws = 10_000;
    for _ in 0..draws {
        for i in sample_batch(owner.len(), 4, &mut rng).unwrap() {
            counts[owner[i]] += 1.0;
        }
    }
    let total = (draws * 4) as f64;
    let chi2: f64 = sizes
        .iter()
        .zip(counts)
        .map(|(&n, obs)| {
            let exp = total * n as f64 / owner.len() as f64;
            (obs - exp).powi(2) / exp
        })
        .sum();
    assert!(chi2 < 16.27, "chi-square {chi2}");
}
