use ltuda::augment::{
    cutmix, derangement, sample_mixspec, strong_views, warp_nearest, weak_augment, CutMix, MixSpec, Placement,
    WeakAugSpec, WeakView,
};
use ltuda::labels::{HardLabelMap, PartialLabelMap, SampleRecord};
use ltuda::Grid;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn view(h: usize, w: usize, tag: usize) -> WeakView {
    let n = h * w;
    WeakView {
        image: Grid::from_vec(h, w, (0..n).map(|i| (tag * 1000 + i) as f32).collect()),
        pseudo: HardLabelMap::new(Grid::from_vec(h, w, (0..n).map(|i| ((i + tag) % 5) as u8).collect())),
        partial: Grid::from_vec(h, w, (0..n).map(|i| if (i + tag) % 3 == 0 { tag as i16 } else { -1 }).collect()),
    }
}

fn batch(n: usize, h: usize, w: usize) -> Vec<WeakView> {
    (0..n).map(|t| view(h, w, t + 1)).collect()
}

proptest! {
    #[test]
    fn mixed_pixels_come_from_one_source(seed in any::<u64>(), h in 1usize..24, w in 1usize..24) {
        let (a, b) = (view(h, w, 1), view(h, w, 2));
        let spec = sample_mixspec(h, w, &mut ChaCha8Rng::seed_from_u64(seed));
        let m = cutmix(&a, &b, &spec).unwrap();
        for i in 0..h * w {
            let src = if spec.mask.data[i] { &b } else { &a };
            prop_assert_eq!(m.image.data[i], src.image.data[i]);
            prop_assert_eq!(m.pseudo.classes.data[i], src.pseudo.classes.data[i]);
            prop_assert_eq!(m.partial.data[i], src.partial.data[i]);
        }
    }

    #[test]
    fn mask_is_the_clipped_box(lam in 0.0f64..=1.0, h in 1usize..40, w in 1usize..40, fy in 0.0f64..1.0, fx in 0.0f64..1.0) {
        let (ry, rx) = ((fy * h as f64) as usize, (fx * w as f64) as usize);
        let spec = MixSpec::from_box(h, w, lam, rx, ry);
        let side = (1.0 - lam).sqrt();
        prop_assert_eq!(spec.r_w, (w as f64 * side).round() as usize);
        prop_assert_eq!(spec.r_h, (h as f64 * side).round() as usize);
        let expect = ((rx + spec.r_w).min(w) - rx) * ((ry + spec.r_h).min(h) - ry);
        prop_assert_eq!(spec.mask_count(), expect);
        prop_assert!(spec.mask_count() <= spec.r_w * spec.r_h);
        for y in 0..h {
            for x in 0..w {
                let inside = y >= ry && y < ry + spec.r_h && x >= rx && x < rx + spec.r_w;
                prop_assert_eq!(*spec.mask.get(y, x), inside);
            }
        }
    }

    #[test]
    fn pairing_has_no_fixed_points(seed in any::<u64>(), n in 2usize..12) {
        let p = derangement(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut sorted = p.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
    }

    #[test]
    fn weak_augment_keeps_label_alphabet(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = WeakAugSpec::sample(30.0, (0.8, 1.2), &mut rng);
        let (h, w) = (12, 10);
        let full: Vec<u8> = (0..h * w).map(|i| ((i / 3 + i % 7) % 3) as u8).collect();
        let classes = Grid::from_vec(h, w, full.iter().map(|&v| if v == 2 { 2 } else { -1 }).collect());
        let neg = Grid::from_vec(h, w, full.iter().enumerate().map(|(i, &v)| v != 2 && i % 2 == 0).collect());
        let rec = SampleRecord {
            image: Grid::from_vec(h, w, (0..h * w).map(|i| i as f32 / (h * w) as f32).collect()),
            partial_label: PartialLabelMap::new(classes, 2, Some(neg)).unwrap(),
            subset_id: 0,
            full_label: Some(HardLabelMap::new(Grid::from_vec(h, w, full))),
        };
        prop_assert!(rec.validate(3).is_ok());
        let out = weak_augment(&rec, spec);
        prop_assert!(out.partial_label.classes.data.iter().all(|v| [-1, 2].contains(v)));
        prop_assert!(out.full_label.as_ref().unwrap().classes.data.iter().all(|&v| v < 3));
        prop_assert!(out.validate(3).is_ok());
        let (lo, hi) = (0.0f32, 1.0f32);
        prop_assert!(out.image.data.iter().all(|&v| v >= lo && v <= hi));
    }
}

#[test]
fn lambda_limits_are_exact() {
    let full = MixSpec::from_box(16, 12, 0.0, 0, 0);
    assert_eq!((full.r_w, full.r_h, full.mask_count()), (12, 16, 192));
    let none = MixSpec::from_box(16, 12, 1.0, 5, 7);
    assert_eq!((none.r_w, none.r_h, none.mask_count()), (0, 0, 0));
    let a = view(16, 12, 1);
    let b = view(16, 12, 2);
    assert_eq!(cutmix(&a, &b, &full).unwrap().image, b.image);
    assert_eq!(cutmix(&a, &b, &none).unwrap().image, a.image);
}

#[test]
fn mean_unclipped_fraction_is_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 10_000;
    let mean: f64 = (0..n).map(|_| sample_mixspec(128, 128, &mut rng).unclipped_fraction()).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() <= 0.02, "mean {mean}");
}

#[test]
fn strong_views_are_reproducible_and_independent() {
    let b = batch(4, 20, 20);
    let mixer = CutMix::default();
    let run = |seed| strong_views(&b, 2, &mixer, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let (x, y) = (run(5), run(5));
    assert_eq!(x, y);
    assert_eq!(x.len(), 2);
    assert!(x.iter().all(|v| v.len() == 4));
    assert_ne!(x[0], x[1]);
    for v in &x {
        for (i, m) in v.iter().enumerate() {
            assert_ne!(m.spec.partner_index, i);
        }
    }
}

#[test]
fn strong_views_reject_degenerate_requests() {
    let mixer = CutMix::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(strong_views(&batch(1, 8, 8), 1, &mixer, &mut rng).is_err());
    assert!(strong_views(&batch(3, 8, 8), 0, &mixer, &mut rng).is_err());
    let random = CutMix { placement: Placement::Random };
    assert!(strong_views(&batch(3, 8, 8), 1, &random, &mut rng).is_err());
}

#[test]
fn half_turn_twice_is_identity() {
    let g = Grid::from_vec(7, 7, (0..49).collect::<Vec<i32>>());
    let half = WeakAugSpec { angle: 180.0, scale: 1.0 };
    let r = warp_nearest(&g, half, -1);
    assert_eq!(*r.get(0, 0), 48);
    assert_eq!(warp_nearest(&r, half, -1), g);
}
