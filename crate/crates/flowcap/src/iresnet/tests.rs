use super::*;
use crate::nn::Activation;

/// One-sided Jacobi SVD, the independent oracle for spectral-norm checks.
/// Rotates column pairs until all columns are mutually orthogonal; singular
/// values are then the column norms.
fn jacobi_max_singular_value(w: &Tensor) -> f64 {
    let (m, n) = (w.rows(), w.cols());
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| w.at(i, j)).collect()).collect();
    for _sweep in 0..60 {
        let mut rotated = false;
        for j in 0..n {
            for k in (j + 1)..n {
                let ajj: f64 = a[j].iter().map(|x| x * x).sum();
                let akk: f64 = a[k].iter().map(|x| x * x).sum();
                let ajk: f64 = a[j].iter().zip(&a[k]).map(|(x, y)| x * y).sum();
                if ajk.abs() <= 1e-15 * (ajj * akk).sqrt().max(1e-300) {
                    continue;
                }
                rotated = true;
                let zeta = (akk - ajj) / (2.0 * ajk);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..m {
                    let aij = a[j][i];
                    let aik = a[k][i];
                    a[j][i] = cs * aij - sn * aik;
                    a[k][i] = sn * aij + cs * aik;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    a.iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn random_matrix(rng: &mut Rng, m: usize, n: usize, scale: f64) -> Tensor {
    let data: Vec<f64> = (0..m * n).map(|_| rng.normal() * scale).collect();
    Tensor::new(vec![m, n], data).unwrap()
}

#[test]
fn jacobi_oracle_recovers_diagonal_singular_values() {
    let w = Tensor::matrix(&[vec![0.0, -3.0], vec![1.5, 0.0]]).unwrap();
    assert!((jacobi_max_singular_value(&w) - 3.0).abs() < 1e-12);
}

#[test]
fn spectral_norm_of_scalar_matrix() {
    let w = Tensor::matrix(&[vec![3.0]]).unwrap();
    assert!((spectral_norm(&w, 1) - 3.0).abs() < 1e-15);
}

#[test]
fn spectral_norm_of_diagonal_matrix() {
    let w = Tensor::matrix(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!((spectral_norm(&w, 50) - 2.0).abs() < 1e-6);
}

#[test]
fn spectral_norm_of_zero_matrix_is_zero() {
    let w = Tensor::zeros(&[3, 3]);
    assert_eq!(spectral_norm(&w, 10), 0.0);
}

#[test]
fn spectral_norm_matches_jacobi_oracle() {
    // Convergence rate is (sigma2/sigma1)^(2k), so nearly-tied top singular
    // values need many rounds; the estimate approaches the oracle from below.
    let mut rng = Rng::new(314);
    for trial in 0..20 {
        let w = random_matrix(&mut rng, 8, 8, 1.0);
        let estimated = spectral_norm(&w, 4000);
        let oracle = jacobi_max_singular_value(&w);
        assert!(
            (estimated - oracle).abs() <= 1e-4 * oracle.max(1.0),
            "trial {trial}: power {estimated} vs jacobi {oracle}"
        );
        assert!(estimated <= oracle * (1.0 + 1e-9));
    }
}

#[test]
fn normalize_scales_down_to_target() {
    let mlp = Mlp::new("b0", &[1, 1], Activation::Tanh, false);
    let mut store = ParamStore::new();
    store.insert("b0.l0.w", Tensor::matrix(&[vec![2.0]]).unwrap());
    let mut block = ResidualBlock::mlp(mlp);
    block.normalize(&mut store, 0.9, 50);
    assert!((store.get("b0.l0.w").data()[0] - 0.9).abs() < 1e-12);
}

#[test]
fn normalize_never_upscales() {
    let mlp = Mlp::new("b0", &[1, 1], Activation::Tanh, false);
    let mut store = ParamStore::new();
    store.insert("b0.l0.w", Tensor::matrix(&[vec![0.5]]).unwrap());
    let mut block = ResidualBlock::mlp(mlp);
    block.normalize(&mut store, 0.9, 50);
    assert_eq!(store.get("b0.l0.w").data()[0], 0.5);
}

#[test]
fn normalized_residual_is_contractive_on_samples() {
    let mut rng = Rng::new(2024);
    let mut net = IResNet::trainable(2, 1, &[8], Activation::Tanh, true, &mut rng);
    net.normalize(0.9, 50);
    let block = &net.blocks[0];

    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let a = [rng.range(-10.0, 10.0), rng.range(-10.0, 10.0)];
        let b = [rng.range(-10.0, 10.0), rng.range(-10.0, 10.0)];
        let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        if dist < 1e-9 {
            continue;
        }
        let fa = block.residual(&net.store, &Tensor::vector(&a)).unwrap();
        let fb = block.residual(&net.store, &Tensor::vector(&b)).unwrap();
        let fdist = fa
            .data()
            .iter()
            .zip(fb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(fdist / dist);
    }
    assert!(worst < 1.0, "sampled Lipschitz ratio {worst}");
}

#[test]
fn zero_residuals_make_the_identity() {
    let mut rng = Rng::new(3);
    let mut net = IResNet::trainable(2, 3, &[], Activation::Tanh, false, &mut rng);
    let zeros = vec![0.0; net.store.scalar_count()];
    net.store.unflatten(&zeros);
    let x = Tensor::vector(&[4.0, -7.0]);
    assert_eq!(net.forward(&x).unwrap().data(), x.data());
    let back = net.inverse(&x, 1e-12, 5).unwrap();
    assert_eq!(back.data(), x.data());
}

#[test]
fn two_sqrt2_blocks_double_the_input() {
    // Two blocks x -> x + (sqrt(2)-1) x compose to exactly 2x while each
    // residual stays contractive.
    let coeff = std::f64::consts::SQRT_2 - 1.0;
    let mut net = IResNet::new(1);
    for b in 0..2 {
        let mlp = Mlp::new(&format!("b{b}"), &[1, 1], Activation::Tanh, false);
        net.store
            .insert(&format!("b{b}.l0.w"), Tensor::matrix(&[vec![coeff]]).unwrap());
        net.blocks.push(ResidualBlock::mlp(mlp));
    }
    assert!(coeff < 1.0);
    let y = net.forward(&Tensor::vector(&[3.0])).unwrap();
    assert!((y.item() - 6.0).abs() < 1e-12);
}

#[test]
fn fixed_point_inverse_of_half_block() {
    // x + 0.5 x = 3 has the closed-form preimage x = 2.
    let mut net = IResNet::new(1);
    let mlp = Mlp::new("b0", &[1, 1], Activation::Tanh, false);
    net.store.insert("b0.l0.w", Tensor::matrix(&[vec![0.5]]).unwrap());
    net.blocks.push(ResidualBlock::mlp(mlp));
    let x = net.inverse(&Tensor::vector(&[3.0]), 1e-10, 100).unwrap();
    assert!((x.item() - 2.0).abs() < 1e-10);
}

#[test]
fn random_normalized_net_round_trips() {
    let mut rng = Rng::new(99);
    let mut net = IResNet::trainable(3, 3, &[6], Activation::Tanh, true, &mut rng);
    net.normalize(0.9, 50);
    for trial in 0..20 {
        let x = Tensor::vector(&[
            rng.range(-3.0, 3.0),
            rng.range(-3.0, 3.0),
            rng.range(-3.0, 3.0),
        ]);
        let y = net.forward(&x).unwrap();
        let back = net.inverse(&y, 1e-10, 100).unwrap();
        let err = tensor::sub(&back, &x).unwrap().max_abs();
        assert!(err <= 1e-8, "trial {trial}: round-trip error {err:e}");
    }
}

#[test]
fn unnormalized_block_fails_to_invert() {
    // Residual -2x has Lipschitz constant 2; the fixed point diverges.
    let mut net = IResNet::new(1);
    let mlp = Mlp::new("b0", &[1, 1], Activation::Tanh, false);
    net.store.insert("b0.l0.w", Tensor::matrix(&[vec![-2.0]]).unwrap());
    net.blocks.push(ResidualBlock::mlp(mlp));
    let err = net.inverse(&Tensor::vector(&[3.0]), 1e-10, 50).unwrap_err();
    assert!(matches!(err, Error::NoConvergence { .. }), "{err}");
}

#[test]
fn normalized_width1_nets_preserve_order() {
    let mut rng = Rng::new(555);
    for trial in 0..50 {
        let mut net = IResNet::trainable(1, 3, &[4], Activation::Tanh, true, &mut rng);
        net.normalize(0.9, 50);
        let pairs: Vec<(f64, f64)> = (0..100)
            .map(|_| {
                let a = rng.range(-10.0, 10.0);
                let mut b = rng.range(-10.0, 10.0);
                if (a - b).abs() < 1e-9 {
                    b += 1.0;
                }
                (a, b)
            })
            .collect();
        let violations = net.check_order_preservation(&pairs).unwrap();
        assert_eq!(violations, 0, "trial {trial}");
    }
}

#[test]
fn identity_net_has_no_order_violations() {
    let mut rng = Rng::new(4);
    let mut net = IResNet::trainable(1, 2, &[], Activation::Tanh, false, &mut rng);
    let zeros = vec![0.0; net.store.scalar_count()];
    net.store.unflatten(&zeros);
    let pairs = vec![(0.0, 1.0), (-3.0, 2.0), (5.0, -5.0)];
    assert_eq!(net.check_order_preservation(&pairs).unwrap(), 0);
}

#[test]
fn negating_block_violates_order() {
    // x -> x - 2x = -x flips every pair.
    let mut net = IResNet::new(1);
    let mlp = Mlp::new("b0", &[1, 1], Activation::Tanh, false);
    net.store.insert("b0.l0.w", Tensor::matrix(&[vec![-2.0]]).unwrap());
    net.blocks.push(ResidualBlock::mlp(mlp));
    let pairs = vec![(0.5, 1.0), (-1.0, 3.0)];
    assert!(net.check_order_preservation(&pairs).unwrap() > 0);
}

#[test]
fn single_block_gap_is_strictly_between_zero_and_two() {
    let mut rng = Rng::new(77);
    for _ in 0..20 {
        let mut net = IResNet::trainable(1, 1, &[5], Activation::Tanh, true, &mut rng);
        net.normalize(0.9, 50);
        for _ in 0..50 {
            let a = rng.range(-10.0, 10.0);
            let mut b = rng.range(-10.0, 10.0);
            if (a - b).abs() < 1e-6 {
                b += 0.5;
            }
            let fa = net.forward(&Tensor::vector(&[a])).unwrap().item();
            let fb = net.forward(&Tensor::vector(&[b])).unwrap().item();
            let ratio = (fb - fa) / (b - a);
            assert!(ratio > 0.0 && ratio < 2.0, "gap ratio {ratio}");
        }
    }
}

#[test]
fn cross_shift_residual_moves_mass_between_halves() {
    let block = ResidualBlock::cross_shift(2.0 / 3.0, 1);
    let store = ParamStore::new();
    let out = block
        .forward(&store, &Tensor::vector(&[3.0, -3.0]))
        .unwrap();
    assert_eq!(out.data(), &[1.0, -3.0]);
}
