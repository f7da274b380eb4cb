//! Library losses and forward passes against the plain-loop references in
//! `common`.

mod common;

use common::{naive_afcl, naive_encode, naive_simo, rows_of};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simo::afcl::{afcl_step, batch_rng, sample_batch, BatchSpec};
use simo::data::{generate_synthetic, SyntheticSpec};
use simo::diff::Tensor;
use simo::model::{encode, Architecture, ModelParams};
use simo::optim::{Optimizer, OptimizerKind};
use simo::simo::{grouped_loss, pair_terms, simo_loss, SimoConfig};

fn random_rows(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect()
}

#[test]
fn pair_terms_match_straight_loop_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let r = random_rows(&mut rng, 2, 8);
        let t = pair_terms(&r[0], &r[1]).unwrap();
        let (mut d, mut dot) = (0.0, 0.0);
        for k in 0..8 {
            d += (r[0][k] - r[1][k]) * (r[0][k] - r[1][k]);
            dot += r[0][k] * r[1][k];
        }
        assert_eq!(t.d, d);
        assert_eq!(t.o, dot * dot);
        let swapped = pair_terms(&r[1], &r[0]).unwrap();
        assert_eq!((swapped.d, swapped.o), (t.d, t.o));
    }
}

#[test]
fn simo_loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = SimoConfig::default();
    for m in 2..10 {
        for y in [0.0, 0.1, 0.5, 1.0] {
            let r = random_rows(&mut rng, m, 8);
            let got = simo_loss(&Tensor::from_rows(&r).unwrap(), y, &cfg).unwrap();
            let want = naive_simo(&r, y, cfg.epsilon);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "m={m} y={y}: {got} vs {want}");
        }
    }
}

#[test]
fn grouped_loss_equals_sum_of_independent_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cfg = SimoConfig::default();
    let groups: Vec<Vec<Vec<f64>>> = (0..3).map(|_| random_rows(&mut rng, 5, 4)).collect();
    let tensors: Vec<Tensor> = groups.iter().map(|g| Tensor::from_rows(g).unwrap()).collect();
    let got = grouped_loss(&tensors, 0.1, &cfg).unwrap();
    let want: f64 = groups.iter().map(|g| naive_simo(g, 0.1, cfg.epsilon)).sum();
    assert!((got - want).abs() <= 1e-12 * want.max(1.0));

    let single = grouped_loss(&tensors[..1], 0.1, &cfg).unwrap();
    assert_eq!(single, simo_loss(&tensors[0], 0.1, &cfg).unwrap());
    let doubled = grouped_loss(&[tensors[0].clone(), tensors[0].clone()], 0.1, &cfg).unwrap();
    assert_eq!(doubled, 2.0 * single);
}

#[test]
fn encoder_matches_plain_forward_pass() {
    let params = ModelParams::init(Architecture::new(12, vec![16, 8], 5), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = random_rows(&mut rng, 7, 12);
    let got = rows_of(&encode(&params, &Tensor::from_rows(&x).unwrap()).unwrap());
    let want = naive_encode(&params, &x);
    for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((g - w).abs() < 1e-13, "{g} vs {w}");
    }
}

#[test]
fn afcl_step_breakdown_matches_naive_loops_across_training() {
    let data = generate_synthetic(&SyntheticSpec {
        num_classes: 5,
        samples_per_class: 40,
        feature_dim: 10,
        ..SyntheticSpec::default()
    });
    let spec = BatchSpec::new(16, 8, 5, 0).unwrap();
    let mut params = ModelParams::init(Architecture::new(10, vec![32], 6), 5);
    let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2);
    let mut rng = batch_rng(5);
    let cfg = SimoConfig::default();
    for _ in 0..25 {
        let batch = sample_batch(&data, &spec, &mut rng).unwrap();
        let rows = rows_of(&encode(&params, &batch.inputs).unwrap());
        let (s, m, d, t) = naive_afcl(&rows, 2, 8, cfg.olean, cfg.epsilon);
        let got = afcl_step(&mut params, &mut opt, &batch, &cfg).unwrap();
        for (g, w) in [
            (got.l_similar, s),
            (got.l_mean_dissimilar, m),
            (got.l_dissimilar, d),
            (got.total, t),
        ] {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}
