use ltuda::prototypes::{dot, proto_predict, DualBanks, PrototypeBank, UnitEmbeddings};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn noisy_cluster(rng: &mut ChaCha8Rng, center: &[f64], n: usize, spread: f64) -> Vec<f64> {
    (0..n).flat_map(|_| center.iter().map(|c| c + rng.random_range(-spread..spread)).collect::<Vec<_>>()).collect()
}

proptest! {
    #[test]
    fn prototypes_stay_unit_norm(seed in any::<u64>(), mu in 0.0f64..1.0, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dim, n, c) = (5, 40, 2);
        let mut bank = PrototypeBank::new(c, k, dim, mu).unwrap();
        for _ in 0..4 {
            let raw: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let labels: Vec<Option<u8>> = (0..n).map(|i| Some((i % (c + 1)) as u8)).collect();
            bank.update(&UnitEmbeddings::from_pixel_major(&raw, dim), &labels, &mut rng).unwrap();
        }
        prop_assert!(bank.is_fully_initialized());
        for s in 0..bank.slots() {
            prop_assert!((dot(bank.slot(s), bank.slot(s)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_are_distributions_and_scale_free(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dim, n) = (4, 12);
        let mut bank = PrototypeBank::new(2, 2, dim, 0.5).unwrap();
        let raw: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<Option<u8>> = (0..n).map(|i| Some((i % 3) as u8)).collect();
        bank.update(&UnitEmbeddings::from_pixel_major(&raw, dim), &labels, &mut rng).unwrap();
        let a = proto_predict(&UnitEmbeddings::from_pixel_major(&raw, dim), &bank).unwrap();
        let scaled: Vec<f64> = raw.iter().map(|v| v * scale).collect();
        let b = proto_predict(&UnitEmbeddings::from_pixel_major(&scaled, dim), &bank).unwrap();
        for p in 0..n {
            prop_assert!((a.row(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in a.row(p).iter().zip(b.row(p)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

fn seeded_bank(mu: f64, k: usize) -> PrototypeBank {
    let mut bank = PrototypeBank::new(1, k, 2, mu).unwrap();
    let axes = [vec![1.0, 0.0], vec![0.0, 1.0]];
    bank.set_class(0, &vec![axes[0].clone(); k]);
    bank.set_class(1, &vec![axes[1].clone(); k]);
    bank
}

#[test]
fn full_momentum_is_a_no_op() {
    let mut bank = seeded_bank(1.0, 2);
    let before = bank.clone();
    let raw = [0.3, 0.7, -0.2, 0.9, 0.5, 0.5];
    let emb = UnitEmbeddings::from_pixel_major(&raw, 2);
    bank.update(&emb, &[Some(0), Some(1), Some(1)], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(bank, before);
}

#[test]
fn zero_momentum_single_prototype_is_the_class_mean() {
    let mut bank = seeded_bank(0.0, 1);
    let raw = [3.0, 1.0, 1.0, 3.0, 2.0, 2.0, -1.0, 0.5];
    let emb = UnitEmbeddings::from_pixel_major(&raw, 2);
    let labels = [Some(1), Some(1), Some(1), Some(0)];
    bank.update(&emb, &labels, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut mean = [0.0; 2];
    for p in 0..3 {
        mean[0] += emb.row(p)[0] / 3.0;
        mean[1] += emb.row(p)[1] / 3.0;
    }
    let expect = unit(&mean);
    for (a, b) in bank.proto(1, 0).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
    let bg = unit(&[-1.0, 0.5]);
    for (a, b) in bank.proto(0, 0).iter().zip(&bg) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn two_clusters_attract_two_prototypes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let centers = [unit(&[1.0, 1.0, 0.0]), unit(&[-1.0, 0.2, 1.0])];
    let mut bank = PrototypeBank::new(0, 2, 3, 0.8).unwrap();
    for _ in 0..30 {
        let mut raw = noisy_cluster(&mut rng, &centers[0], 20, 0.05);
        raw.extend(noisy_cluster(&mut rng, &centers[1], 20, 0.05));
        let emb = UnitEmbeddings::from_pixel_major(&raw, 3);
        bank.update(&emb, &vec![Some(0); 40], &mut rng).unwrap();
    }
    for c in &centers {
        let best = (0..2).map(|k| dot(bank.proto(0, k), c)).fold(f64::MIN, f64::max);
        assert!(best > 0.995, "best cosine {best}");
    }
}

#[test]
fn equidistant_prototypes_give_a_uniform_prediction() {
    let mut bank = PrototypeBank::new(2, 1, 3, 0.5).unwrap();
    for c in 0..3 {
        let mut axis = vec![0.0; 3];
        axis[c] = 1.0;
        bank.set_class(c, &[axis]);
    }
    let emb = UnitEmbeddings::from_pixel_major(&[1.0, 1.0, 1.0], 3);
    let d = proto_predict(&emb, &bank).unwrap();
    for &p in d.row(0) {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn background_is_shared_between_banks() {
    let mut banks = DualBanks::new(2, 2, 3, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw: Vec<f64> = (0..30 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let emb = UnitEmbeddings::from_pixel_major(&raw, 3);
    let partial: Vec<i16> = (0..30).map(|i| if i % 5 == 0 { 1 } else if i % 7 == 0 { 2 } else { -1 }).collect();
    let pseudo: Vec<u8> = (0..30).map(|i| (i % 3) as u8).collect();
    for _ in 0..3 {
        banks.update(&emb, &partial, &pseudo, &mut rng).unwrap();
        assert_eq!(banks.labeled.proto(0, 0), banks.unlabeled.proto(0, 0));
        assert_eq!(banks.labeled.proto(0, 1), banks.unlabeled.proto(0, 1));
    }
    assert!(banks.is_fully_initialized());
}

#[test]
fn bank_rejects_bad_configuration_and_inputs() {
    assert!(PrototypeBank::new(2, 0, 3, 0.5).is_err());
    assert!(PrototypeBank::new(2, 1, 3, 1.5).is_err());
    let mut bank = PrototypeBank::new(1, 1, 2, 0.5).unwrap();
    let emb = UnitEmbeddings::from_pixel_major(&[1.0, 0.0], 2);
    assert!(proto_predict(&emb, &bank).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(bank.update(&emb, &[Some(2)], &mut rng).is_err());
    assert!(bank.update(&emb, &[Some(0), Some(1)], &mut rng).is_err());
}
