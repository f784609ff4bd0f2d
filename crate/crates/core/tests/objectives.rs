use mapo_lab::diffusion::{
    make_schedule, Architecture, DenoiserParams, Network, OutputInit, ReferenceHandle, Schedule,
    ScheduleKind,
};
use mapo_lab::ndgrad::{finite_difference_check, GradError, Tensor};
use mapo_lab::objectives::{
    amplification_factor, dpo_loss_from_gap, dpo_objective, implicit_reward_gaps, link_phi,
    link_phi_log, margin_loss, mse_loss, objective, NoiseDraw, ObjectiveConfig, ObjectiveError,
    ObjectiveKind, PairBatch,
};
use mapo_lab::tasks::PreferenceTriple;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn arch() -> Architecture {
    Architecture::new(2, 4, vec![8])
}

/// Glorot weights with small random biases so no gradient entry is trivially zero.
fn random_params(seed: u64) -> DenoiserParams {
    let base = DenoiserParams::init(arch(), seed, OutputInit::Random);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let mut buffers = base.buffers().to_vec();
    for b in buffers.iter_mut().skip(1).step_by(2) {
        b.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    DenoiserParams::from_buffers(arch(), buffers).unwrap()
}

fn tensors(p: &DenoiserParams) -> Vec<Tensor> {
    arch()
        .buffer_shapes()
        .iter()
        .zip(p.buffers())
        .map(|(s, b)| Tensor::new(s, b.clone()).unwrap())
        .collect()
}

fn batch() -> PairBatch {
    let triples = [
        PreferenceTriple { c: vec![1.0, 0.0, 0.0, 0.0], x_w: vec![1.8, 0.2], x_l: vec![0.4, -0.9] },
        PreferenceTriple { c: vec![0.0, 1.0, 0.0, 0.0], x_w: vec![0.1, 2.1], x_l: vec![-0.6, 0.3] },
        PreferenceTriple { c: vec![0.0, 0.0, 0.0, 1.0], x_w: vec![-0.2, -1.7], x_l: vec![1.0, 1.0] },
    ];
    PairBatch::new(&triples.iter().collect::<Vec<_>>()).unwrap()
}

fn schedule() -> Schedule {
    make_schedule(ScheduleKind::Cosine, 16).unwrap()
}

fn grad_err(e: ObjectiveError) -> GradError {
    match e {
        ObjectiveError::Grad(g) => g,
        other => panic!("unexpected objective error: {other}"),
    }
}

fn fd_error(kind: ObjectiveKind, share_noise: bool, weighted: bool, seed: u64) -> f64 {
    let params = random_params(seed);
    assert!(params.num_params() <= 200);
    let reference = ReferenceHandle::snapshot(&random_params(seed + 100));
    let schedule = schedule();
    let batch = batch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = NoiseDraw::sample(&mut rng, &schedule, batch.len(), 2, share_noise).unwrap();
    let mut config = ObjectiveConfig::new(kind, 8.0);
    config.share_noise = share_noise;
    config.weighted_mse = weighted;
    // Keep the DPO sigmoid away from saturation so the check is informative.
    config.beta_dpo = 2.0;
    finite_difference_check(
        |p| {
            let net = Network::from_tensors(arch(), p.to_vec()).map_err(|e| match e {
                mapo_lab::diffusion::DiffusionError::Grad(g) => g,
                other => panic!("{other}"),
            })?;
            objective(&net, Some(&reference), &schedule, &batch, &noise, &config)
                .map(|o| o.loss)
                .map_err(grad_err)
        },
        &tensors(&params),
        1e-5,
    )
    .unwrap()
}

#[test]
fn every_objective_has_correct_gradients() {
    for kind in ObjectiveKind::ALL {
        for (share, weighted) in [(true, false), (false, false), (true, true)] {
            for seed in [1, 2] {
                let err = fd_error(kind, share, weighted, seed);
                assert!(err < 1e-5, "{kind} share={share} weighted={weighted} seed={seed}: {err}");
            }
        }
    }
}

#[test]
fn denoising_mse_has_correct_gradients() {
    let params = random_params(7);
    let schedule = schedule();
    let b = batch();
    let t = vec![1, 8, 16];
    let eps = Tensor::matrix(3, 2, vec![0.3, -1.1, 0.7, 0.2, -0.5, 1.4]).unwrap();
    let err = finite_difference_check(
        |p| {
            let net = Network::from_tensors(arch(), p.to_vec()).unwrap();
            mse_loss(&net, &schedule, &b.c, &b.x_w, &t, &eps).map_err(grad_err)
        },
        &tensors(&params),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[test]
fn link_is_bounded_decreasing_and_a_power_of_the_unit_link() {
    let grid = log_grid(1e-12, 700.0, 25_000);
    for beta in [1.0, 8.0, 64.0, 1024.0] {
        let mut prev = 0.0;
        for &ell in &grid {
            let log_phi = link_phi_log(ell, beta).unwrap();
            let phi = link_phi(ell, beta).unwrap();
            assert!(log_phi.is_finite() && log_phi < 0.0, "beta={beta} ell={ell}");
            assert!(phi.is_finite() && (0.0..1.0).contains(&phi));
            assert!(log_phi < prev, "not decreasing at beta={beta} ell={ell}");
            prev = log_phi;
            let unit = link_phi(ell, 1.0).unwrap();
            assert!((phi - unit.powf(beta)).abs() <= 1e-12);
        }
        assert!((link_phi(1e-12, beta).unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn amplification_is_a_decreasing_half_bounded_derivative() {
    assert!((amplification_factor(1e-8).unwrap() - 0.5).abs() < 1e-6);
    let grid = log_grid(1e-6, 50.0, 4000);
    let mut prev = 0.5;
    for &ell in &grid {
        let f = amplification_factor(ell).unwrap();
        assert!(f > 0.0 && f < 0.5 && f < prev, "ell={ell}");
        prev = f;
    }
    for &ell in &log_grid(1e-3, 30.0, 200) {
        let h = 1e-5 * ell.max(1e-2);
        let fd = -(link_phi(ell + h, 1.0).unwrap() - link_phi(ell - h, 1.0).unwrap()) / (2.0 * h);
        let f = amplification_factor(ell).unwrap();
        assert!(((f - fd) / f).abs() < 1e-6, "ell={ell}: {f} vs {fd}");
    }
}

#[test]
fn closed_form_identities() {
    let schedule = schedule();
    let batch = batch();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..5 {
        let params = random_params(seed);
        let same = ReferenceHandle::snapshot(&params);
        let other = ReferenceHandle::snapshot(&random_params(seed + 50));
        let noise = NoiseDraw::sample(&mut rng, &schedule, batch.len(), 2, seed % 2 == 0).unwrap();
        let config = ObjectiveConfig::new(ObjectiveKind::Dpo, 1.0);
        let net = params.constants();
        let at_ref = dpo_objective(&net, &same, &schedule, &batch, &noise, &config).unwrap();
        assert!((at_ref.loss.item().unwrap() - LN2).abs() < 1e-12);

        let out = dpo_objective(&net, &other, &schedule, &batch, &noise, &config).unwrap();
        let gaps = implicit_reward_gaps(&net, &other, &schedule, &batch, &noise, &config).unwrap();
        let mean = gaps.iter().map(|&g| dpo_loss_from_gap(g)).sum::<f64>() / gaps.len() as f64;
        assert!((out.loss.item().unwrap() - mean).abs() < 1e-12);
    }
    for ell in [0.0, 1e-9, 0.3, 4.0, 650.0, 900.0] {
        for beta in [1.0, 64.0] {
            let l = Tensor::scalar(ell);
            assert!((margin_loss(&l, &l, beta).unwrap().item().unwrap() - LN2).abs() < 1e-12);
        }
    }
}

#[test]
fn mapo_on_identical_pairs_reduces_to_mse_plus_constant() {
    // With x_w = x_l and shared noise the margin term is exactly ln 2.
    let schedule = schedule();
    let params = random_params(11);
    let triple = PreferenceTriple { c: vec![0.0, 0.0, 1.0, 0.0], x_w: vec![0.5, 1.5], x_l: vec![0.5, 1.5] };
    let batch = PairBatch::from_triple(&triple).unwrap();
    let noise = NoiseDraw::fixed(6, &[0.2, -0.8]).unwrap();
    for beta in [1.0, 8.0, 1024.0] {
        let config = ObjectiveConfig::new(ObjectiveKind::Mapo, beta);
        let out = objective(&params.constants(), None, &schedule, &batch, &noise, &config).unwrap();
        let b = out.breakdown;
        assert_eq!(b.mse_w, b.mse_l);
        assert!((out.loss.item().unwrap() - (b.mse_w + LN2 / beta)).abs() < 1e-12);
    }
}

#[test]
fn only_dpo_depends_on_the_reference() {
    let schedule = schedule();
    let batch = batch();
    let params = random_params(4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = NoiseDraw::sample(&mut rng, &schedule, batch.len(), 2, true).unwrap();
    let r1 = ReferenceHandle::snapshot(&random_params(20));
    let r2 = ReferenceHandle::snapshot(&random_params(21));
    for kind in ObjectiveKind::ALL {
        let config = ObjectiveConfig::new(kind, 8.0);
        let net = params.constants();
        let a = objective(&net, Some(&r1), &schedule, &batch, &noise, &config).unwrap();
        let b = objective(&net, Some(&r2), &schedule, &batch, &noise, &config).unwrap();
        let (a, b) = (a.loss.item().unwrap(), b.loss.item().unwrap());
        assert_eq!(a == b, kind != ObjectiveKind::Dpo, "{kind}");
    }
}
