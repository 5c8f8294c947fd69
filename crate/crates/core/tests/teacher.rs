use ltuda::backbone::{BackboneConfig, Tensor, UNet};
use ltuda::inference::ForegroundProbMaps;
use ltuda::labels::PartialLabelMap;
use ltuda::teacher::{make_masked_pseudo, teacher_step, ConflictRule};
use ltuda::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    probs: ForegroundProbMaps<f64>,
    partial: PartialLabelMap,
    full: Vec<u8>,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let c = rng.random_range(1..=5usize);
    let (h, w) = (rng.random_range(1..6usize), rng.random_range(1..6usize));
    let n = h * w;
    let labeled = rng.random_range(1..=c) as u8;
    let full: Vec<u8> = (0..n).map(|_| rng.random_range(0..=c) as u8).collect();
    let annotate: f64 = rng.random();
    let classes = full
        .iter()
        .map(|&v| if v == labeled && rng.random::<f64>() < annotate { labeled as i16 } else { -1 })
        .collect();
    let neg = full.iter().map(|&v| v != labeled && rng.random::<f64>() < 0.5).collect();
    let probs = (0..c * n).map(|_| rng.random::<f64>()).collect();
    Case {
        probs: ForegroundProbMaps::new(c, h, w, probs).unwrap(),
        partial: PartialLabelMap::new(Grid::from_vec(h, w, classes), labeled, Some(Grid::from_vec(h, w, neg))).unwrap(),
        full,
    }
}

#[test]
fn annotated_pixels_keep_their_label_over_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let Case { probs, partial, .. } = random_case(&mut rng);
        let tau = rng.random_range(0.05..0.95);
        for rule in [ConflictRule::NextBest, ConflictRule::Background] {
            let y = make_masked_pseudo(&probs, &partial, tau, rule).unwrap();
            for (i, &v) in partial.classes.data.iter().enumerate() {
                if v >= 0 {
                    assert_eq!(y.classes.data[i] as i16, v, "case {case} pixel {i}");
                }
                if partial.is_known_negative(i) {
                    assert_ne!(y.classes.data[i], partial.labeled_class, "case {case} pixel {i}");
                }
            }
        }
    }
}

#[test]
fn a_perfect_teacher_reproduces_the_full_label() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let Case { probs, partial, full } = random_case(&mut rng);
        let (c, n) = (probs.num_classes, full.len());
        let mut onehot = vec![0.0; c * n];
        for (i, &v) in full.iter().enumerate() {
            if v > 0 {
                onehot[(v as usize - 1) * n + i] = 0.97;
            }
        }
        let perfect = ForegroundProbMaps::new(c, probs.height, probs.width, onehot).unwrap();
        let y = make_masked_pseudo(&perfect, &partial, 0.5, ConflictRule::NextBest).unwrap();
        assert_eq!(y.classes.data, full);
    }
}

#[test]
fn background_rule_clears_conflicts() {
    let probs = ForegroundProbMaps::new(2, 1, 2, vec![0.9, 0.9, 0.8, 0.1]).unwrap();
    let partial = PartialLabelMap::new(Grid::from_vec(1, 2, vec![-1, -1]), 1, Some(Grid::from_vec(1, 2, vec![true, false]))).unwrap();
    let bg = make_masked_pseudo(&probs, &partial, 0.5, ConflictRule::Background).unwrap();
    assert_eq!(bg.classes.data, vec![0, 1]);
    let nb = make_masked_pseudo(&probs, &partial, 0.5, ConflictRule::NextBest).unwrap();
    assert_eq!(nb.classes.data, vec![2, 1]);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let probs = ForegroundProbMaps::new(2, 2, 2, vec![0.5; 8]).unwrap();
    let partial = PartialLabelMap::unknown(2, 3, 1);
    assert!(make_masked_pseudo(&probs, &partial, 0.5, ConflictRule::NextBest).is_err());
}

#[test]
fn pseudo_labels_carry_no_gradient_to_the_teacher() {
    let cfg = BackboneConfig { depth: 2, base_width: 4, embed_dim: 6, norm_groups: 2 };
    let teacher = UNet::<f64>::new(cfg, 3, 9).unwrap();
    let x = Tensor::from_vec(2, 1, 8, 8, (0..128).map(|i| ((i * 37 % 17) as f64 / 8.5) - 1.0).collect());
    let partials = [PartialLabelMap::unknown(8, 8, 1), PartialLabelMap::unknown(8, 8, 2)];
    let refs: Vec<&PartialLabelMap> = partials.iter().collect();
    let before = teacher.params.clone();
    let base = teacher_step(&teacher, &x, &refs, 0.5, ConflictRule::NextBest).unwrap();
    assert_eq!(teacher.params, before);
    // the labels are piecewise constant in the teacher weights: every
    // finite-difference derivative is exactly zero
    for j in (0..teacher.num_params()).step_by(97) {
        let mut moved = teacher.clone();
        moved.params[j] += 1e-9;
        assert_eq!(teacher_step(&moved, &x, &refs, 0.5, ConflictRule::NextBest).unwrap(), base, "param {j}");
    }
}
