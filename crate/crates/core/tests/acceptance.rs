//! Acceptance suite: nine criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the summary lines always reach the
//! output of `cargo test`. Exits non-zero when any criterion fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use duoseg_core::autoencoder::{Autoencoder, AutoencoderConfig, Stage};
use duoseg_core::controlnet::{
    conditional_sample, conditioned_predict_noise, controlnet_loss_on, ConditionTensor, ControlNet, ControlNetConfig,
};
use duoseg_core::diffusion::{
    build_schedule, q_sample, q_sample_batch, sample_latent_with, Denoiser, DenoiserConfig, ScheduleKind, VarianceKind,
};
use duoseg_core::error::{Error, FormatError};
use duoseg_core::experiment::{run_pipeline, ExperimentConfig, PipelineStage, Report, RunDir};
use duoseg_core::io::{read_fvol, write_fvol, FvolData, FvolField};
use duoseg_core::metrics::{frechet_distance, GaussianStats};
use duoseg_core::nn::gradcheck::check_gradients;
use duoseg_core::nn::{CrossEntropyMode, OptimizerSettings, ParamStore};
use duoseg_core::phantom::generate_phantom;
use duoseg_core::rng::{normal_vec, rng_from_seed};
use duoseg_core::segmentation::{
    cross_entropy_loss, dice_loss, segmentation_loss_on, train_segmenter, train_segmenter_with, DiceLossConfig,
    EarlyStopping, LossMix, PredictionVolume, SegTask, SegTrainSettings, SegmenterConfig, StopDecision, Variant,
};
use duoseg_core::train::TrainSchedule;
use duoseg_core::volume::{one_hot_encode, LabelMap, VolumeShape};
use duoseg_core::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::from_vec(shape, normal_vec(&mut rng_from_seed(seed), shape.iter().product())).unwrap()
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// ---------------------------------------------------------------- 1

/// Soft Dice on a hard two-class prediction is plain set overlap.
fn overlap_dice_loss(p: u16, g: u16, eps: f64) -> f64 {
    let inter = (p & g).count_ones() as f64;
    let sizes = (p.count_ones() + g.count_ones()) as f64;
    1.0 - (2.0 * inter + eps) / (sizes + eps)
}

fn hard_prediction(bits: u16) -> PredictionVolume {
    let fg: Vec<f64> = (0..9).map(|i| ((bits >> i) & 1) as f64).collect();
    let mut data: Vec<f64> = fg.iter().map(|v| 1.0 - v).collect();
    data.extend(&fg);
    PredictionVolume::new(Tensor::from_vec(&[2, 1, 3, 3], data).unwrap()).unwrap()
}

fn label_from_bits(bits: u16) -> LabelMap {
    LabelMap::new(
        VolumeShape::new(3, 3, 1),
        (0..9).map(|i| ((bits >> i) & 1) as u8).collect(),
        2,
    )
    .unwrap()
}

fn loss_oracles() -> Outcome {
    let cfg = DiceLossConfig::default();
    let preds: Vec<_> = (0..512u16).map(hard_prediction).collect();
    let labels: Vec<_> = (0..512u16).map(label_from_bits).collect();
    let mut worst = 0.0f64;
    for (pb, p) in preds.iter().enumerate() {
        for (gb, g) in labels.iter().enumerate() {
            let got = ok(dice_loss(p, g, &cfg))?;
            worst = worst.max((got - overlap_dice_loss(pb as u16, gb as u16, cfg.smoothing_epsilon)).abs());
        }
    }
    ensure!(worst <= 1e-9, "dice max deviation {worst:e}");

    // Uniform over five classes: −ln(1/5). Binary p = 0.5: ln 2.
    let shape = VolumeShape::new(2, 2, 1);
    let g5 = LabelMap::new(shape, vec![0, 1, 3, 4], 5).unwrap();
    let u5 = PredictionVolume::new(Tensor::from_vec(&[5, 1, 2, 2], vec![0.2; 20]).unwrap()).unwrap();
    let ce5 = ok(cross_entropy_loss(&u5, &g5, CrossEntropyMode::Categorical))?;
    let g2 = LabelMap::new(shape, vec![0, 1, 1, 0], 2).unwrap();
    let half = PredictionVolume::new(Tensor::from_vec(&[2, 1, 2, 2], vec![0.5; 8]).unwrap()).unwrap();
    let ce2b = ok(cross_entropy_loss(&half, &g2, CrossEntropyMode::Binary))?;
    let ce2c = ok(cross_entropy_loss(&half, &g2, CrossEntropyMode::Categorical))?;
    let ln5 = 5f64.ln();
    let ln2 = 2f64.ln();
    ensure!((ce5 - ln5).abs() < 1e-6, "CE uniform-5 {ce5} vs ln 5");
    ensure!(
        (ce2b - ln2).abs() < 1e-6 && (ce2c - ln2).abs() < 1e-6,
        "CE p=0.5 {ce2b}/{ce2c} vs ln 2"
    );
    Ok(format!(
        "2^18 Dice pairs, max dev {worst:.1e}; CE ln5/ln2 exact to 1e-6"
    ))
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Outcome {
    const SAMPLES: usize = 100;
    let mut lines = Vec::new();
    let mut check = |name: &str, r: duoseg_core::error::Result<duoseg_core::nn::gradcheck::GradCheckReport>| {
        let r = ok(r)?;
        ensure!(r.checked == SAMPLES, "{name}: only {} samples", r.checked);
        ensure!(
            r.max_rel_error < 1e-3,
            "{name}: rel error {:e} at {:?}",
            r.max_rel_error,
            r.worst
        );
        lines.push(format!("{name} {:.0e}", r.max_rel_error));
        Ok(())
    };

    for stage in [Stage::Image, Stage::Label] {
        let cfg = AutoencoderConfig {
            latent_channels: 2,
            downsample_factor: 2,
            base_width: 4,
            kl_weight: 0.1,
            ..AutoencoderConfig::for_stage(stage)
        };
        let mut ae = ok(Autoencoder::new(cfg, 11))?;
        ensure!(
            ae.store.num_scalars() <= 10_000,
            "vae too large: {}",
            ae.store.num_scalars()
        );
        let c = ae.config().in_channels;
        let x = randn(&[2, c, 4, 4, 4], 12).map(|v| 0.5 + 0.2 * v);
        let eta = randn(&[2, 2, 2, 2, 2], 13);
        let net = ae.net.clone();
        let r = check_gradients(
            &mut ae.store,
            |s, t| {
                let p = s.bind(t, true);
                Ok((net.loss_on(t, &p, &x, &eta)?.0, p))
            },
            SAMPLES,
            1e-5,
            14,
        );
        check(&format!("vae_{stage:?}").to_lowercase(), r)?;
    }

    let dcfg = DenoiserConfig {
        latent_channels: 2,
        base_width: 2,
        num_levels: 2,
        time_embedding_dim: 8,
        attention_levels: vec![],
    };
    let schedule = ok(build_schedule(20, 1e-3, 0.2, ScheduleKind::Linear))?;
    let mut d = ok(Denoiser::new(dcfg.clone(), 3))?;
    ensure!(
        d.store.num_scalars() <= 10_000,
        "denoiser too large: {}",
        d.store.num_scalars()
    );
    let z0 = randn(&[2, 2, 2, 4, 4], 4);
    let noise = randn(&[2, 2, 2, 4, 4], 5);
    let ts = [4usize, 17];
    let z_t = ok(q_sample_batch(&z0, &ts, &noise, &schedule))?;
    let net = d.net.clone();
    let r = check_gradients(
        &mut d.store,
        |s, t| {
            let p = s.bind(t, true);
            let z = t.constant(z_t.clone());
            let pred = net.forward_on(t, &p, z, &ts, None)?;
            let target = t.constant(noise.clone());
            Ok((t.mse(pred, target)?, p))
        },
        SAMPLES,
        1e-5,
        6,
    );
    check("diffusion", r)?;

    let ccfg = ControlNetConfig {
        base: dcfg,
        condition_channels: 2,
        zero_init: true,
    };
    let mut control = ok(ControlNet::from_base(ccfg, &d, 7))?;
    // leave the zero-initialized point so every control weight has a gradient
    let mut rng = rng_from_seed(8);
    for id in control.store.ids().collect::<Vec<_>>() {
        for v in control.store.get_mut(id).data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let cond = randn(&[2, 2, 2, 4, 4], 9);
    let cnet = control.net.clone();
    let base = &d;
    let r = check_gradients(
        &mut control.store,
        |s, t| {
            let pc = s.bind(t, true);
            Ok((controlnet_loss_on(t, base, &cnet, &pc, &z_t, &ts, &cond, &noise)?, pc))
        },
        SAMPLES,
        1e-5,
        10,
    );
    check("controlnet", r)?;

    let shape = [2, 3, 3, 4, 2];
    let n: usize = shape.iter().product();
    let g = LabelMap::new(
        VolumeShape::new(4, 2, 3),
        (0..n / 6).map(|i| (i * 7 % 3) as u8).collect(),
        3,
    )
    .unwrap();
    let oh = one_hot_encode(&g).unwrap().batched();
    let target = Tensor::stack(&[oh.clone(), oh]).unwrap();
    let mut store = ParamStore::new();
    store.add("logits", randn(&shape, 21));
    for (name, mix) in [("dice", LossMix::Dice), ("cross_entropy", LossMix::CrossEntropy)] {
        let dice = DiceLossConfig::default();
        let r = check_gradients(
            &mut store,
            |s, t| {
                let p = s.bind(t, true);
                let probs = t.softmax_channels(p.var(s.ids().next().unwrap()));
                Ok((
                    segmentation_loss_on(t, probs, &target, mix, &dice, CrossEntropyMode::Categorical)?,
                    p,
                ))
            },
            SAMPLES,
            1e-5,
            22,
        );
        check(name, r)?;
    }
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------- 3

fn diffusion_statistics() -> Outcome {
    let (t_max, b0, b1) = (1000, 1e-4, 0.02);
    let s = ok(build_schedule(t_max, b0, b1, ScheduleKind::Linear))?;
    // Identities, recomputed independently.
    let mut running = 1.0f64;
    for t in 1..=t_max {
        let beta = b0 + (b1 - b0) * (t - 1) as f64 / (t_max - 1) as f64;
        ensure!((s.beta(t) - beta).abs() <= 1e-15, "beta_{t} {} vs {beta}", s.beta(t));
        ensure!(s.alpha(t) == 1.0 - s.beta(t), "alpha_{t} != 1 - beta_{t}");
        running *= s.alpha(t);
        ensure!(s.alpha_bar(t) == running, "alpha_bar_{t} is not the running product");
        ensure!(
            t == 1 || s.alpha_bar(t) < s.alpha_bar(t - 1),
            "alpha_bar not decreasing at {t}"
        );
    }
    ensure!(s.alpha_bar(0) == 1.0, "alpha_bar_0 must be 1");

    let z0 = Tensor::from_vec(&[1, 1, 1, 1, 3], vec![2.0, -1.5, 1.0]).unwrap();
    let draws = 10_000;
    let mut rng = rng_from_seed(2024);
    let mut worst = (0.0f64, 0.0f64);
    for t in [1, 100, 500, 1000] {
        let (mut sum, mut sq) = ([0.0; 3], [0.0; 3]);
        for _ in 0..draws {
            let e = Tensor::from_vec(&[1, 1, 1, 1, 3], normal_vec(&mut rng, 3)).unwrap();
            let z = ok(q_sample(&z0, t, &e, &s))?;
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
            let want_var = 1.0 - ab;
            // 5% of the larger of |mean| and the standard deviation
            let mean_err = (mean - want_mean).abs() / want_mean.abs().max(want_var.sqrt());
            let var_err = (var / want_var - 1.0).abs();
            worst = (worst.0.max(mean_err), worst.1.max(var_err));
            ensure!(mean_err < 0.05, "t={t}: mean {mean} vs {want_mean}");
            ensure!(var_err < 0.05, "t={t}: variance {var} vs {want_var}");
        }
    }
    Ok(format!(
        "identities exact over T={t_max}; 1e4 draws, worst mean err {:.2}%, var err {:.2}%",
        100.0 * worst.0,
        100.0 * worst.1
    ))
}

// ---------------------------------------------------------------- 4

fn controlnet_identity() -> Outcome {
    let dcfg = DenoiserConfig {
        latent_channels: 2,
        base_width: 8,
        num_levels: 2,
        time_embedding_dim: 16,
        attention_levels: vec![],
    };
    let schedule = ok(build_schedule(25, 1e-3, 0.2, ScheduleKind::Linear))?;
    let base = ok(Denoiser::new(dcfg.clone(), 31))?;
    let control = ok(ControlNet::from_base(
        ControlNetConfig {
            base: dcfg,
            condition_channels: 3,
            zero_init: true,
        },
        &base,
        32,
    ))?;
    let mut rng = rng_from_seed(33);
    for i in 0..10u64 {
        let z = randn(&[1, 2, 4, 8, 8], 100 + i);
        let cond = ConditionTensor {
            data: randn(&[1, 3, 4, 8, 8], 200 + i),
        };
        let t = rng.random_range(1..=25);
        let c = ok(conditioned_predict_noise(&base, &control, &z, &[t], &cond))?;
        let u = ok(base.predict(&z, &[t]))?;
        ensure!(c.data() == u.data(), "triple {i} (t={t}) differs");
    }
    let cond = ConditionTensor {
        data: randn(&[1, 3, 4, 8, 8], 300),
    };
    for seed in [1u64, 77] {
        let c = ok(conditional_sample(&base, &control, &cond, &schedule, seed))?;
        let u = ok(sample_latent_with(
            &base,
            &schedule,
            &[1, 2, 4, 8, 8],
            VarianceKind::Posterior,
            seed,
        ))?;
        ensure!(c == u, "conditional sample with seed {seed} differs from unconditional");
    }
    Ok("10 random triples bit-equal; 2 full samplers bit-equal".into())
}

// ---------------------------------------------------------------- 5

fn stats(mean: Vec<f64>, cov: DMatrix<f64>) -> GaussianStats {
    GaussianStats {
        mean: DVector::from_vec(mean),
        covariance: cov,
        count: 2,
    }
}

/// Square root of a matrix with positive real spectrum by the Denman–Beavers
/// iteration.
fn sqrt_denman_beavers(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let (mut y, mut z) = (a.clone(), DMatrix::identity(n, n));
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible");
        let zi = z.clone().try_inverse().expect("invertible");
        let ny = (&y + zi) * 0.5;
        let nz = (&z + yi) * 0.5;
        let done = (&ny - &y).norm() < 1e-14 * ny.norm();
        y = ny;
        z = nz;
        if done {
            break;
        }
    }
    y
}

fn frechet_oracle_value(a: &GaussianStats, b: &GaussianStats) -> f64 {
    let d = &a.mean - &b.mean;
    let cross = sqrt_denman_beavers(&(&a.covariance * &b.covariance));
    d.dot(&d) + a.covariance.trace() + b.covariance.trace() - 2.0 * cross.trace()
}

fn random_psd(rng: &mut duoseg_core::rng::DetRng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.05
}

fn frechet_oracle() -> Outcome {
    let id3 = DMatrix::identity(3, 3);
    let same = stats(vec![0.3, -1.0, 2.0], id3.clone() * 1.7);
    let d0 = ok(frechet_distance(&same, &same))?;
    ensure!(d0.abs() < 1e-6, "identical Gaussians give {d0}");
    let shifted = stats(vec![1.3, 1.0, -0.5], id3.clone());
    let base = stats(vec![0.3, -1.0, 2.0], id3);
    let d1 = ok(frechet_distance(&base, &shifted))?;
    let want1 = 1.0 + 4.0 + 6.25;
    ensure!((d1 - want1).abs() < 1e-6, "shifted mean gives {d1}, want {want1}");
    let i2 = stats(vec![0.0; 2], DMatrix::identity(2, 2));
    let four = stats(vec![0.0; 2], DMatrix::identity(2, 2) * 4.0);
    let d2 = ok(frechet_distance(&i2, &four))?;
    ensure!((d2 - 2.0).abs() < 1e-6, "I vs 4I gives {d2}");

    let mut rng = rng_from_seed(55);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let n = 2 + k % 5;
        let a = stats(
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            random_psd(&mut rng, n),
        );
        let b = stats(
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            random_psd(&mut rng, n),
        );
        let ab = ok(frechet_distance(&a, &b))?;
        let ba = ok(frechet_distance(&b, &a))?;
        let want = frechet_oracle_value(&a, &b);
        ensure!(ab >= 0.0, "pair {k}: negative distance {ab}");
        ensure!((ab - ba).abs() < 1e-5, "pair {k}: asymmetric {ab} vs {ba}");
        ensure!((ab - want).abs() < 1e-5, "pair {k}: {ab} vs oracle {want}");
        worst = worst.max((ab - want).abs());
    }
    Ok(format!(
        "closed forms within 1e-6; 100 PSD pairs vs Denman–Beavers, max dev {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 6

const OVERFIT_MAX_EPOCHS: usize = 300;
const OVERFIT_MINUTES_PER_VARIANT: f64 = 15.0;

fn segmentation_overfit() -> Outcome {
    let c = ok(ExperimentConfig::load(&configs_dir().join("smoke.toml")))?;
    let params = c.phantom_params();
    let data: Vec<_> = (0..4)
        .map(|s| {
            let p = generate_phantom(s, &params).unwrap();
            (p.volume, p.label)
        })
        .collect();
    let settings = SegTrainSettings {
        task: SegTask::LiverOnly,
        loss_mix: LossMix::default(),
        dice: DiceLossConfig::default(),
        schedule: TrainSchedule::new(OVERFIT_MAX_EPOCHS, 1, 11),
        optimizer: OptimizerSettings {
            learning_rate: 3e-3,
            ..Default::default()
        },
        // reachability only; early stopping is checked below
        patience: OVERFIT_MAX_EPOCHS,
        target_dice: Some(0.96),
    };
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let start = Instant::now();
        let cfg = SegmenterConfig::for_variant(v, 2);
        let r = ok(train_segmenter(&cfg, &data, &data, &settings))?;
        let minutes = start.elapsed().as_secs_f64() / 60.0;
        ensure!(
            r.best_val_dice > 0.95,
            "{}: best Dice {:.4} after {} epochs",
            v.name(),
            r.best_val_dice,
            r.epochs_run
        );
        ensure!(minutes <= OVERFIT_MINUTES_PER_VARIANT, "{}: {minutes:.1} min", v.name());
        parts.push(format!("{} {:.3}@{}", v.name(), r.best_val_dice, r.best_epoch + 1));
    }

    // Early stopping with injected scores: rise to epoch 4, flat afterwards.
    let mut es = EarlyStopping::new(10);
    let scores = [0.1, 0.2, 0.3, 0.4, 0.5];
    for s in scores {
        ensure!(
            es.update(s) == StopDecision::Improved,
            "rising score not an improvement"
        );
    }
    for k in 0..10 {
        let d = es.update(0.5);
        let want = if k == 9 {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        ensure!(d == want, "plateau epoch {k}: {d:?}");
    }
    ensure!(es.best() == Some((4, 0.5)), "best {:?}", es.best());
    let small = vec![data[0].clone()];
    let mut epoch = 0;
    let injected = ok(train_segmenter_with(
        &SegmenterConfig::for_variant(Variant::Unet, 2),
        &small,
        &small,
        &SegTrainSettings {
            patience: 10,
            target_dice: None,
            schedule: TrainSchedule::new(100, 1, 3),
            ..settings
        },
        |_| {
            epoch += 1;
            Ok(if epoch <= 6 { epoch as f64 / 10.0 } else { 0.6 })
        },
    ))?;
    ensure!(
        injected.epochs_run == 16 && injected.best_epoch == 5,
        "injected plateau: ran {} epochs, best {}",
        injected.epochs_run,
        injected.best_epoch
    );
    Ok(format!("{}; early stop after plateau verified", parts.join(", ")))
}

// ---------------------------------------------------------------- 7 & 8

/// Frozen floors from the calibrated smoke run (observed: 8/8 non-degenerate,
/// synthetic organ − background contrast 0.41).
const NON_DEGENERATE_FLOOR: f64 = 0.9;
const ALIGNMENT_MARGIN: f64 = 0.2;
const SMOKE_MINUTES: f64 = 60.0;

fn smoke_run(dir: &Path) -> Result<(Report, f64), String> {
    let c = ok(ExperimentConfig::load(&configs_dir().join("smoke.toml")))?;
    let start = Instant::now();
    let run = ok(run_pipeline(&c, &PipelineStage::ALL, dir))?;
    ensure!(
        run.executed.len() == PipelineStage::ALL.len(),
        "not every stage executed: {:?}",
        run.executed
    );
    let text = ok(std::fs::read_to_string(
        RunDir::new(dir).artifact(PipelineStage::Report),
    ))?;
    Ok((ok(Report::from_json(&text))?, start.elapsed().as_secs_f64() / 60.0))
}

fn end_to_end(report: &Report, minutes: f64) -> Outcome {
    ok(report.validate())?;
    ensure!(minutes <= SMOKE_MINUTES, "smoke run took {minutes:.1} min");
    let g = &report.generation;
    ensure!(
        g.non_degenerate_fraction >= NON_DEGENERATE_FLOOR,
        "non-degenerate fraction {:.3}",
        g.non_degenerate_fraction
    );
    let contrast = g
        .synthetic_contrast
        .ok_or("no synthetic pair had both organ and background voxels")?;
    ensure!(
        contrast > ALIGNMENT_MARGIN,
        "conditional alignment {contrast:.3} ≤ margin {ALIGNMENT_MARGIN}"
    );
    ensure!(
        report.segmentation.len() == 10,
        "{} Dice rows, want 10",
        report.segmentation.len()
    );
    ensure!(report.overall.len() == 2, "{} overall rows", report.overall.len());
    let (hold, untrained) = (report.fid.real_holdout.average, report.fid.untrained.average);
    ensure!(hold < untrained, "FID holdout {hold:.4} ≥ untrained {untrained:.4}");
    let md = report.to_markdown();
    ensure!(
        md.contains("FID (Ax.)") && md.contains("Overall Mean DICE"),
        "markdown tables incomplete"
    );
    let overall: Vec<String> = report
        .overall
        .iter()
        .map(|r| format!("{:?} {:.3}→{:.3}", r.task, r.real, r.mixed))
        .collect();
    Ok(format!(
        "{minutes:.1} min; non-degenerate {:.0}%, contrast {:.3} (real {:.3}); FID holdout {hold:.4} < untrained {untrained:.4} (synthetic {:.4}); {}",
        100.0 * g.non_degenerate_fraction,
        contrast,
        g.real_contrast.unwrap_or(f64::NAN),
        report.fid.synthetic.average,
        overall.join(", ")
    ))
}

fn determinism(a: &Path, first: &Report) -> Outcome {
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (second, minutes) = smoke_run(b.path())?;
    ensure!(&second == first, "reports differ numerically");
    let (da, db) = (RunDir::new(a), RunDir::new(b.path()));
    for stage in [PipelineStage::Phantom, PipelineStage::Generate, PipelineStage::Report] {
        let x = ok(std::fs::read(da.artifact(stage)))?;
        let y = ok(std::fs::read(db.artifact(stage)))?;
        ensure!(x == y, "{} differs between runs", da.artifact(stage).display());
    }
    Ok(format!(
        "second run {minutes:.1} min; manifests and report byte-identical"
    ))
}

// ---------------------------------------------------------------- 9

fn format_error(r: duoseg_core::error::Result<FvolField>) -> Option<FormatError> {
    match r {
        Err(Error::Format { kind, .. }) => Some(kind),
        _ => None,
    }
}

fn fvol_round_trip() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = rng_from_seed(9);
    let mut n_checked = 0;
    for shape in [vec![3, 4, 5], vec![2, 3, 4, 5]] {
        let n: usize = shape.iter().product();
        let f32s: Vec<f32> = (0..n)
            .map(|_| rng.random_range(-1e6f32..1e6) * rng.random::<f32>())
            .collect();
        let u8s: Vec<u8> = (0..n).map(|_| rng.random()).collect();
        for data in [FvolData::F32(f32s), FvolData::U8(u8s)] {
            let field = FvolField {
                shape: shape.clone(),
                data,
                spacing: [0.7, 0.7, 2.5],
                extra: Default::default(),
            };
            let p = tmp.path().join(format!("f{n_checked}.fvol"));
            ok(write_fvol(&p, &field))?;
            let back = ok(read_fvol(&p))?;
            let bits = |d: &FvolData| match d {
                FvolData::F32(v) => v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                FvolData::U8(v) => v.iter().map(|&x| x as u32).collect(),
            };
            ensure!(
                back.shape == field.shape && back.spacing == field.spacing,
                "header changed"
            );
            ensure!(back.data.dtype() == field.data.dtype(), "dtype changed");
            ensure!(bits(&back.data) == bits(&field.data), "payload not bit-exact");
            n_checked += 1;
        }
    }

    let zeros = FvolField {
        shape: vec![2, 2, 2],
        data: FvolData::U8(vec![0; 8]),
        spacing: [1.0; 3],
        extra: Default::default(),
    };
    let p = tmp.path().join("zeros.fvol");
    ok(write_fvol(&p, &zeros))?;
    let bytes = ok(std::fs::read(&p))?;
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    ensure!(&bytes[..6] == b"FVOL1\n", "magic");
    ensure!(bytes.len() == 6 + 4 + hlen + 8, "file size {} vs layout", bytes.len());

    let write_raw = |name: &str, b: &[u8]| {
        let q = tmp.path().join(name);
        std::fs::write(&q, b).unwrap();
        read_fvol(&q)
    };
    let truncated = format_error(write_raw("trunc.fvol", &bytes[..bytes.len() - 1]));
    ensure!(
        matches!(
            truncated,
            Some(FormatError::PayloadSizeMismatch { expected: 8, found: 7 })
        ),
        "truncation: {truncated:?}"
    );
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let bad_magic = format_error(write_raw("magic.fvol", &magic));
    ensure!(bad_magic == Some(FormatError::BadMagic), "bad magic: {bad_magic:?}");
    let header = String::from_utf8(bytes[10..10 + hlen].to_vec()).unwrap();
    ensure!(header.contains("\"u8\""), "header lacks dtype: {header}");
    let mut dtype = bytes.clone();
    dtype.splice(10..10 + hlen, header.replace("\"u8\"", "\"i8\"").into_bytes());
    let bad_dtype = format_error(write_raw("dtype.fvol", &dtype));
    ensure!(
        bad_dtype == Some(FormatError::UnsupportedDtype("i8".into())),
        "bad dtype: {bad_dtype:?}"
    );
    let short = format_error(write_raw("short.fvol", &bytes[..8]));
    ensure!(short == Some(FormatError::TruncatedHeader), "short header: {short:?}");
    Ok(format!(
        "{n_checked} f32/u8 fields bit-exact; size arithmetic; truncation, magic, dtype, header errors distinct"
    ))
}

// ----------------------------------------------------------------

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(e) => ("FAIL", e),
    };
    println!("acceptance {n}: {tag} - {name} [{secs:.1}s] {detail}");
    outcome.is_ok()
}

fn main() {
    // Numeric arguments select criteria (`cargo test --test acceptance -- 2 9`);
    // libtest-style flags passed by cargo are ignored.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let only: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);

    let mut passed = Vec::new();
    let cheap: [(usize, &str, fn() -> Outcome); 6] = [
        (1, "loss oracles", loss_oracles),
        (2, "gradient suite", gradient_suite),
        (3, "diffusion statistics", diffusion_statistics),
        (4, "controlnet zero-init identity", controlnet_identity),
        (5, "frechet oracle", frechet_oracle),
        (6, "segmentation overfit", segmentation_overfit),
    ];
    for (n, name, f) in cheap {
        if wanted(n) {
            passed.push(run(n, name, f));
        }
    }
    if wanted(7) || wanted(8) {
        let first_dir = tempfile::tempdir().expect("tempdir");
        let first = smoke_run(first_dir.path());
        if wanted(7) {
            passed.push(run(7, "end-to-end smoke", || {
                let (report, minutes) = first.as_ref().map_err(Clone::clone)?;
                end_to_end(report, *minutes)
            }));
        }
        if wanted(8) {
            passed.push(run(8, "full-run determinism", || {
                let (report, _) = first.as_ref().map_err(Clone::clone)?;
                determinism(first_dir.path(), report)
            }));
        }
    }
    if wanted(9) {
        passed.push(run(9, "fvol round trip", fvol_round_trip));
    }

    let n_pass = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {n_pass}/{} criteria passed", passed.len());
    if n_pass != passed.len() {
        std::process::exit(1);
    }
}
