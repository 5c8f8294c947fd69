use ltuda::backbone::{ema_copy, BackboneConfig, Tensor, UNet};

fn tiny() -> BackboneConfig {
    BackboneConfig {
        depth: 2,
        base_width: 4,
        embed_dim: 6,
        norm_groups: 2,
    }
}

fn input(n: usize, s: usize) -> Tensor<f64> {
    let data = (0..n * s * s).map(|i| ((i * 7919 % 23) as f64 / 11.5) - 1.0).collect();
    Tensor::from_vec(n, 1, s, s, data)
}

#[test]
fn output_shapes_follow_the_input() {
    let net = UNet::<f32>::new(BackboneConfig::default(), 3, 0).unwrap();
    let x = Tensor::from_vec(1, 1, 64, 64, vec![0.1f32; 64 * 64]);
    let tape = net.forward(&x).unwrap();
    assert_eq!((tape.embeddings.n, tape.embeddings.c, tape.embeddings.h, tape.embeddings.w), (1, 64, 64, 64));
    assert_eq!((tape.probs.c, tape.probs.h, tape.probs.w), (3, 64, 64));
    assert!(tape.probs.data.iter().all(|&p| p > 0.0 && p < 1.0));
    assert!(tape.logits.is_finite());
}

#[test]
fn forward_is_deterministic() {
    let net = UNet::<f64>::new(tiny(), 2, 4).unwrap();
    let x = input(2, 16);
    assert_eq!(net.forward(&x).unwrap().probs.data, net.forward(&x).unwrap().probs.data);
}

#[test]
fn indivisible_input_is_rejected() {
    let net = UNet::<f64>::new(tiny(), 2, 4).unwrap();
    assert!(net.forward(&input(1, 18)).is_err());
}

fn sum_probs(net: &UNet<f64>, x: &Tensor<f64>) -> f64 {
    net.forward(x).unwrap().probs.data.iter().sum()
}

/// d(sum of probabilities)/d(input pixel) and d/d(parameter) against
/// central differences.
#[test]
fn gradients_match_central_differences() {
    let net = UNet::<f64>::new(tiny(), 3, 11).unwrap();
    let x = input(2, 8);
    let tape = net.forward(&x).unwrap();
    let d_logits = Tensor::from_vec(
        tape.probs.n,
        tape.probs.c,
        tape.probs.h,
        tape.probs.w,
        tape.probs.data.iter().map(|p| p * (1.0 - p)).collect(),
    );
    let mut grads = vec![0.0; net.num_params()];
    let dx = net.backward(&tape, &d_logits, None, &mut grads);
    let h = 1e-5;
    for &i in &[0usize, 9, 27, 63, 64 + 18, 127] {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data[i] += h;
        xm.data[i] -= h;
        let fd = (sum_probs(&net, &xp) - sum_probs(&net, &xm)) / (2.0 * h);
        assert!((fd - dx.data[i]).abs() <= 1e-3 * fd.abs().max(1e-4), "pixel {i}: fd {fd} vs {}", dx.data[i]);
    }
    for e in net.param_entries() {
        for &j in &[e.offset, e.offset + e.len / 2, e.offset + e.len - 1] {
            let (mut np, mut nm) = (net.clone(), net.clone());
            np.params[j] += h;
            nm.params[j] -= h;
            let fd = (sum_probs(&np, &x) - sum_probs(&nm, &x)) / (2.0 * h);
            assert!(
                (fd - grads[j]).abs() <= 1e-3 * fd.abs().max(1e-4),
                "{} [{j}]: fd {fd} vs {}",
                e.name,
                grads[j]
            );
        }
    }
}

#[test]
fn embedding_gradient_reaches_the_input() {
    let net = UNet::<f64>::new(tiny(), 2, 2).unwrap();
    let x = input(1, 8);
    let tape = net.forward(&x).unwrap();
    let zero = Tensor::zeros(tape.logits.n, tape.logits.c, tape.logits.h, tape.logits.w);
    let ones = Tensor::from_vec(
        tape.embeddings.n,
        tape.embeddings.c,
        tape.embeddings.h,
        tape.embeddings.w,
        vec![1.0; tape.embeddings.data.len()],
    );
    let mut grads = vec![0.0; net.num_params()];
    let dx = net.backward(&tape, &zero, Some(&ones), &mut grads);
    let f = |x: &Tensor<f64>| net.forward(x).unwrap().embeddings.data.iter().sum::<f64>();
    let i = 21;
    let (mut xp, mut xm) = (x.clone(), x.clone());
    xp.data[i] += 1e-5;
    xm.data[i] -= 1e-5;
    let fd = (f(&xp) - f(&xm)) / 2e-5;
    assert!((fd - dx.data[i]).abs() <= 1e-3 * fd.abs().max(1e-4), "fd {fd} vs {}", dx.data[i]);
}

#[test]
fn ema_blends_elementwise() {
    let student = UNet::<f64>::new(tiny(), 2, 1).unwrap();
    let mut teacher = UNet::<f64>::new(tiny(), 2, 2).unwrap();
    let before = teacher.params.clone();
    ema_copy(&student, &mut teacher, 1.0).unwrap();
    assert_eq!(teacher.params, before);
    teacher.params.fill(2.0);
    let mut s = student.clone();
    s.params.fill(4.0);
    ema_copy(&s, &mut teacher, 0.5).unwrap();
    assert!(teacher.params.iter().all(|&v| v == 3.0));
    ema_copy(&student, &mut teacher, 0.0).unwrap();
    assert_eq!(teacher.params, student.params);
    let other = UNet::<f64>::new(BackboneConfig { embed_dim: 8, ..tiny() }, 2, 1).unwrap();
    assert!(ema_copy(&other, &mut teacher, 0.5).is_err());
    assert!(ema_copy(&student, &mut teacher, 1.5).is_err());
}
