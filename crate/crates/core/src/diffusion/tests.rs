use std::cell::Cell;

use super::*;
use crate::nn::gradcheck::check_gradients;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, normal_vec(&mut rng_from_seed(seed), n)).unwrap()
}

fn tiny() -> DiffusionConfig {
    DiffusionConfig {
        denoiser: DenoiserConfig {
            latent_channels: 2,
            base_width: 4,
            num_levels: 2,
            time_embedding_dim: 8,
            attention_levels: vec![],
        },
        timesteps: 20,
        beta_start: 1e-3,
        beta_end: 0.2,
        schedule_kind: ScheduleKind::Linear,
        variance: VarianceKind::Posterior,
    }
}

#[test]
fn loss_with_stub_predictors() {
    let s = build_schedule(10, 1e-3, 0.1, ScheduleKind::Linear).unwrap();
    let z0 = randn(&[2, 2, 2, 2, 2], 1);
    let noise = randn(&[2, 2, 2, 2, 2], 2);
    let ts = [3, 8];
    let exact = |_: &Tensor, _: &[usize]| Ok(noise.clone());
    assert_eq!(diffusion_loss(&exact, &z0, &ts, &noise, &s).unwrap(), 0.0);
    let offset = |_: &Tensor, _: &[usize]| Ok(noise.map(|e| e + 0.5));
    assert!((diffusion_loss(&offset, &z0, &ts, &noise, &s).unwrap() - 0.25).abs() < 1e-12);
}

#[test]
fn zero_predictor_loss_is_unit_in_expectation() {
    // E[ε²] = 1 with Var[ε²] = 2: over n elements the mean has std √(2/n).
    let s = build_schedule(10, 1e-3, 0.1, ScheduleKind::Linear).unwrap();
    let shape = [4, 1, 10, 20, 25];
    let n = 20_000.0;
    let zero = |z: &Tensor, _: &[usize]| Ok(Tensor::zeros(z.shape()));
    let loss = diffusion_loss(&zero, &randn(&shape, 3), &[1, 4, 7, 10], &randn(&shape, 4), &s).unwrap();
    assert!((loss - 1.0).abs() < 4.0 * (2.0f64 / n).sqrt(), "{loss}");
}

#[test]
fn q_sample_monte_carlo_moments() {
    let s = build_schedule(50, 1e-4, 0.05, ScheduleKind::Linear).unwrap();
    let t = 30;
    let z0 = Tensor::from_vec(&[1, 1, 1, 1, 3], vec![0.0, 1.5, -2.0]).unwrap();
    let draws = 10_000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut rng = rng_from_seed(77);
    for _ in 0..draws {
        let e = Tensor::from_vec(&[1, 1, 1, 1, 3], normal_vec(&mut rng, 3)).unwrap();
        let z = q_sample(&z0, t, &e, &s).unwrap();
        for i in 0..3 {
            sum[i] += z.data()[i];
            sq[i] += z.data()[i] * z.data()[i];
        }
    }
    let ab = s.alpha_bar(t);
    for i in 0..3 {
        let mean = sum[i] / draws as f64;
        let var = sq[i] / draws as f64 - mean * mean;
        let want_mean = ab.sqrt() * z0.data()[i];
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "variance {var} vs {}", 1.0 - ab);
        // mean error budget: 4 standard errors of the sample mean
        assert!((mean - want_mean).abs() < 4.0 * ((1.0 - ab) / draws as f64).sqrt());
    }
}

#[test]
fn ddpm_step_single_step_oracle() {
    let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
    let z2 = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![0.4, -1.2]).unwrap();
    let zero = |z: &Tensor, _: &[usize]| Ok(Tensor::zeros(z.shape()));
    let out = ddpm_step(&zero, &z2, 2, &s, 5).unwrap();
    let eta = normal_vec(&mut rng_from_seed(5), 2);
    let sigma = (0.2f64 * (1.0 - 0.9) / (1.0 - 0.72)).sqrt();
    for i in 0..2 {
        let want = z2.data()[i] / 0.8f64.sqrt() + sigma * eta[i];
        assert!((out.data()[i] - want).abs() < 1e-14);
    }
    let beta = ddpm_step_with(&zero, &z2, 2, &s, VarianceKind::Beta, 5).unwrap();
    assert!((beta.data()[0] - (0.4 / 0.8f64.sqrt() + 0.2f64.sqrt() * eta[0])).abs() < 1e-14);
}

#[test]
fn ddpm_final_step_is_noise_free() {
    let s = build_schedule(5, 1e-3, 0.1, ScheduleKind::Linear).unwrap();
    let z = randn(&[1, 2, 2, 2, 2], 1);
    let half = |z: &Tensor, _: &[usize]| Ok(z.scale(0.5));
    let a = ddpm_step(&half, &z, 1, &s, 1).unwrap();
    let b = ddpm_step(&half, &z, 1, &s, 2).unwrap();
    assert_eq!(a, b);
    let c = s.beta(1) / (1.0 - s.alpha_bar(1)).sqrt();
    for (o, zi) in a.data().iter().zip(z.data()) {
        assert!((o - (zi - c * 0.5 * zi) / s.alpha(1).sqrt()).abs() < 1e-14);
    }
    for t in 1..=5 {
        assert_eq!(ddpm_step(&half, &z, t, &s, 9).unwrap().shape(), z.shape());
    }
}

#[test]
fn sample_latent_contracts() {
    let s = build_schedule(7, 1e-3, 0.1, ScheduleKind::Linear).unwrap();
    let calls = Cell::new(0usize);
    let counting = |z: &Tensor, _: &[usize]| {
        calls.set(calls.get() + 1);
        Ok(z.scale(0.5))
    };
    let shape = [1, 2, 2, 2, 4];
    let a = sample_latent(&counting, &s, &shape, 3).unwrap();
    assert_eq!(calls.get(), 7);
    assert_eq!(a.shape(), &shape);
    assert_eq!(sample_latent(&counting, &s, &shape, 3).unwrap(), a);
    assert_ne!(sample_latent(&counting, &s, &shape, 4).unwrap(), a);

    // T = 1: the output is the posterior mean of z_1
    let one = NoiseSchedule::from_betas(vec![0.3]).unwrap();
    let out = sample_latent(&counting, &one, &shape, 11).unwrap();
    let z1 = normal_vec(&mut rng_from_seed(derive_seed(11, 0)), 16);
    let c = 0.3 / (1.0f64 - 0.7).sqrt();
    for (o, z) in out.data().iter().zip(&z1) {
        assert!((o - (z - c * 0.5 * z) / 0.7f64.sqrt()).abs() < 1e-14);
    }
}

#[test]
fn uniform_timestep_frequencies() {
    let t_max = 50;
    let n = 100_000;
    let mut counts = vec![0usize; t_max + 1];
    let ts = sample_timesteps(&mut rng_from_seed(1), n, t_max);
    for t in ts {
        counts[t] += 1;
    }
    assert_eq!(counts[0], 0);
    let p = 1.0 / t_max as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for c in &counts[1..] {
        assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sd + 1.0, "{c}");
    }
}

#[test]
fn diffusion_loss_gradients() {
    let cfg = tiny();
    let schedule = cfg.schedule().unwrap();
    let mut d = Denoiser::new(cfg.denoiser.clone(), 3).unwrap();
    let z0 = randn(&[2, 2, 2, 4, 4], 4);
    let noise = randn(&[2, 2, 2, 4, 4], 5);
    let ts = [4, 17];
    let z_t = q_sample_batch(&z0, &ts, &noise, &schedule).unwrap();
    let net = d.net.clone();
    let report = check_gradients(
        &mut d.store,
        |s, t| {
            let p = s.bind(t, true);
            let z = t.constant(z_t.clone());
            let pred = net.forward_on(t, &p, z, &ts, None)?;
            let target = t.constant(noise.clone());
            Ok((t.mse(pred, target)?, p))
        },
        100,
        1e-5,
        6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn tape_loss_matches_functional_loss() {
    let cfg = tiny();
    let schedule = cfg.schedule().unwrap();
    let latents: Vec<Tensor> = (0..3).map(|i| randn(&[1, 2, 2, 4, 4], i)).collect();
    let sched = TrainSchedule::new(4, 2, 9);
    let out = train_denoiser(&cfg, &latents, 1.0, &sched, &OptimizerSettings::with_lr(0.0)).unwrap();
    // replay the same draws against the untouched initial model
    let init = Denoiser::new(cfg.denoiser.clone(), derive_seed(9, 0xD1F)).unwrap();
    assert_eq!(init.store.digest(), out.model.denoiser.store.digest());
    let mut step = 0;
    for epoch in 0..4 {
        let mut total = 0.0;
        let batches = sched.batches(3, epoch);
        for b in &batches {
            let z0 = Tensor::stack(&b.iter().map(|&i| latents[i].clone()).collect::<Vec<_>>()).unwrap();
            let (ts, noise) = training_draw(&sched, step, z0.shape(), cfg.timesteps).unwrap();
            total += diffusion_loss(&init, &z0, &ts, &noise, &schedule).unwrap();
            step += 1;
        }
        let want = total / batches.len() as f64;
        assert!((out.history["loss"][epoch] - want).abs() < 1e-12);
    }
}

#[test]
fn training_deterministic_and_checkpointed() {
    let cfg = tiny();
    let latents: Vec<Tensor> = (0..2).map(|i| randn(&[1, 2, 2, 4, 4], i)).collect();
    let sched = TrainSchedule::new(3, 2, 1);
    let a = train_denoiser(&cfg, &latents, 0.7, &sched, &OptimizerSettings::with_lr(1e-3)).unwrap();
    let b = train_denoiser(&cfg, &latents, 0.7, &sched, &OptimizerSettings::with_lr(1e-3)).unwrap();
    assert_eq!(a.history, b.history);
    let c = a.model.to_checkpoint(a.history.clone()).unwrap();
    let back = DiffusionModel::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.scale_factor, 0.7);
    assert_eq!(back.schedule, a.model.schedule);
    assert_eq!(back.denoiser.store.digest(), a.model.denoiser.store.digest());
    assert_eq!(
        back.sample(&[1, 2, 2, 4, 4], 5).unwrap(),
        a.model.sample(&[1, 2, 2, 4, 4], 5).unwrap()
    );
}

#[test]
fn scale_factor_is_inverse_std() {
    let l = vec![
        Tensor::from_vec(&[1, 1, 1, 1, 2], vec![1.0, 3.0]).unwrap(),
        Tensor::from_vec(&[1, 1, 1, 1, 2], vec![-1.0, 1.0]).unwrap(),
    ];
    // mean 1, population variance (0 + 4 + 4 + 0)/4 = 2
    assert!((latent_scale_factor(&l).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    assert!(latent_scale_factor(&[Tensor::full(&[1, 1, 1, 1, 4], 2.0)]).is_err());
}
