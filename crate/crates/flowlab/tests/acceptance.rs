//! Acceptance gate: eleven criteria covering gradient correctness, the
//! analytic velocity oracle, few-step trend claims, conditioning contracts,
//! denoising, determinism, and hand-computed metric oracles. Every test
//! prints one `ACCEPTANCE n PASS/FAIL` line before asserting, so a scan of
//! the output gives the verdict table. Tolerances and budgets are pinned
//! here, not read from anywhere else.
//!
//! Heavy fixtures (trained models) are built once per binary run through
//! `OnceLock` and shared between the criteria that need them.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use flowlab::datasets::{
    add_speckle, gen_phantoms, gen_toy2d, Dataset, Toy2d, PHANTOM_MASK_THRESHOLD,
};
use flowlab::metrics::{mmd2, psnr, sliced_wasserstein, ssim, KernelSpec};
use flowlab::models::{
    load_checkpoint, ConditionBatch, ConditionedModel, ModelConfig, Times,
};
use flowlab::numerics::{gradient_check, mix_seed, Tensor};
use flowlab::paths::{PathSpec, TrainMode};
use flowlab::samplers::{
    initial_noise, run_sampler, straightness, SamplerConfig, SamplerFamily,
};
use flowlab::training::{
    evaluate, resume, train, Conditioning, EvalOptions, MetricKind, TrainConfig,
    TrainOptions,
};

/// Training budget shared by the 2-D trend fixtures: enough optimization for
/// the few-step ordering to be a property of the models rather than of the
/// noise floor.
const TREND_N: usize = 4096;
const TREND_EPOCHS: usize = 60;
const TREND_LR: f64 = 2e-3;
/// Seeds for the monotonicity sweep; the first `DIFF_SEEDS` also get a
/// matched diffusion model for the cross-sampler comparisons.
const TREND_SEEDS: usize = 5;
const DIFF_SEEDS: usize = 3;
/// Sample count for distribution metrics. Deterministic samplers make the
/// initial draw the only sampling noise, so 1024 points pin the estimators
/// tightly enough for the orderings below.
const EVAL_N: usize = 1024;

fn verdict(n: usize, ok: bool) -> bool {
    println!("ACCEPTANCE {n} {}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn toy_train_config(path: PathSpec, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(path);
    cfg.lr = TREND_LR;
    cfg.epochs = TREND_EPOCHS;
    cfg.seed = seed;
    cfg
}

fn train_toy(dataset: &Dataset, cfg: &TrainConfig) -> ConditionedModel {
    let mut model_cfg = ModelConfig::for_data(dataset.data_shape.clone());
    match cfg.conditioning {
        Conditioning::Class => {
            model_cfg = model_cfg.with_classes(dataset.num_classes.expect("labels"));
        }
        Conditioning::Mask => model_cfg = model_cfg.with_mask_cond(),
        _ => {}
    }
    let model = ConditionedModel::init(model_cfg, mix_seed(cfg.seed, 0x1717)).expect("init");
    train(dataset, model, cfg, &TrainOptions::default())
        .expect("training")
        .model
}

/// Splits a stacked `[n, ...]` batch back into per-item tensors.
fn unstack(batch: &Tensor) -> Vec<Tensor> {
    let n = batch.shape()[0];
    let item_shape: Vec<usize> = batch.shape()[1..].to_vec();
    let item_len = batch.len() / n;
    (0..n)
        .map(|i| {
            Tensor::new(
                item_shape.clone(),
                batch.data()[i * item_len..(i + 1) * item_len].to_vec(),
            )
            .expect("item tensor")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Shared fixtures.

/// Per seed: one eight-Gaussians dataset, a flow model, and (for the first
/// `DIFF_SEEDS` seeds) a diffusion model trained on the same data, plus an
/// independently drawn reference set for the metrics.
struct Trend {
    otfm: Vec<ConditionedModel>,
    diffusion: Vec<ConditionedModel>,
    references: Vec<Tensor>,
    build: Duration,
}

fn trend() -> &'static Trend {
    static CELL: OnceLock<Trend> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let mut otfm = Vec::new();
        let mut diffusion = Vec::new();
        let mut references = Vec::new();
        for s in 0..TREND_SEEDS {
            let ds = gen_toy2d(Toy2d::EightGaussians, TREND_N, 100 + s as u64).expect("data");
            otfm.push(train_toy(&ds, &toy_train_config(PathSpec::linear_ot(), s as u64)));
            if s < DIFF_SEEDS {
                diffusion
                    .push(train_toy(&ds, &toy_train_config(PathSpec::vp_default(), s as u64)));
            }
            let reference = gen_toy2d(Toy2d::EightGaussians, EVAL_N, 900 + s as u64)
                .expect("reference")
                .stacked()
                .expect("stacked");
            references.push(reference);
        }
        Trend { otfm, diffusion, references, build: started.elapsed() }
    })
}

fn sample_toy(
    model: &ConditionedModel,
    path: &PathSpec,
    family: SamplerFamily,
    steps: usize,
    noise_seed: u64,
    record: bool,
) -> flowlab::samplers::SampleOutput {
    let mut cfg = SamplerConfig::new(family, steps, 0);
    if record {
        cfg = cfg.with_trajectory();
    }
    let x0 = initial_noise(&[2], EVAL_N, noise_seed).expect("noise");
    run_sampler(model, path, &cfg, &x0, &ConditionBatch::unconditional(EVAL_N))
        .expect("sampling")
}

/// Flow model trained to transport N(0,1)^2 onto N(0,1)^2, where the
/// conditional expectation of the velocity has a closed form.
struct Velocity {
    model: ConditionedModel,
    build: Duration,
}

fn velocity() -> &'static Velocity {
    static CELL: OnceLock<Velocity> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let n = 8192;
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let samples: Vec<Tensor> = (0..n)
            .map(|_| {
                Tensor::new(
                    vec![2],
                    vec![
                        rng.sample(rand_distr::StandardNormal),
                        rng.sample(rand_distr::StandardNormal),
                    ],
                )
                .expect("sample")
            })
            .collect();
        let ds = Dataset::new("std_normal".into(), vec![2], samples, None, None, None)
            .expect("dataset");
        let mut cfg = toy_train_config(PathSpec::linear_ot(), 9);
        cfg.epochs = 50;
        let model = train_toy(&ds, &cfg);
        Velocity { model, build: started.elapsed() }
    })
}

/// Mask-conditioned phantom model for the mask-fidelity criterion.
fn mask_model() -> &'static ConditionedModel {
    static CELL: OnceLock<ConditionedModel> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = gen_phantoms(256, 16, 50).expect("phantoms");
        let mut cfg = toy_train_config(PathSpec::linear_ot(), 7);
        cfg.epochs = 40;
        cfg.batch_size = Some(32);
        cfg.conditioning = Conditioning::Mask;
        train_toy(&ds, &cfg)
    })
}

/// Denoising transport on phantoms plus the dataset it was trained on.
struct Denoiser {
    model: ConditionedModel,
    dataset: Dataset,
    build: Duration,
}

fn denoiser() -> &'static Denoiser {
    static CELL: OnceLock<Denoiser> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let dataset = gen_phantoms(256, 16, 60).expect("phantoms");
        let mut cfg = toy_train_config(PathSpec::linear_ot(), 11);
        cfg.epochs = 40;
        cfg.batch_size = Some(32);
        cfg.mode = TrainMode::Denoise;
        cfg.noise_power = 0.1;
        let model = train_toy(&dataset, &cfg);
        Denoiser { model, dataset, build: started.elapsed() }
    })
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness.

#[test]
fn acceptance_01_gradient_correctness() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(0xAC, case));
        let rows = rng.gen_range(2..=4usize);
        let cols = rng.gen_range(2..=4usize);
        let mut draw = |shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect();
            Tensor::new(shape, data).expect("input")
        };
        // Three leaves: the running operand, a partner for binary ops, and a
        // right factor so half the cases end in a matmul.
        let inputs = vec![
            draw(vec![rows, cols]),
            draw(vec![rows, cols]),
            draw(vec![cols, rows]),
        ];
        // Smooth ops only; relu's kink would poison central differences.
        let depth = rng.gen_range(1..=4usize);
        let ops: Vec<u8> = (0..depth).map(|_| rng.gen_range(0..8u8)).collect();
        let with_matmul = rng.gen_bool(0.5);

        let report = gradient_check(
            |tape, vars| {
                let mut cur = vars[0];
                for &op in &ops {
                    cur = match op {
                        0 => tape.tanh(cur)?,
                        1 => tape.silu(cur)?,
                        2 => tape.neg(cur)?,
                        3 => tape.scale(cur, 0.7)?,
                        4 => {
                            let scaled = tape.scale(cur, 0.4)?;
                            tape.exp(scaled)?
                        }
                        5 => tape.add(cur, vars[1])?,
                        6 => tape.mul(cur, vars[1])?,
                        _ => tape.sub(cur, vars[1])?,
                    };
                }
                if with_matmul {
                    cur = tape.matmul(cur, vars[2])?;
                }
                tape.mean(cur, None)
            },
            &inputs,
            1e-5,
            1e-5,
        )
        .expect("gradient check");
        worst = worst.max(report.max_rel_error);
        assert!(
            report.pass,
            "case {case} (ops {ops:?}, matmul {with_matmul}): max rel error {}",
            report.max_rel_error
        );
    }
    let elapsed = started.elapsed();
    println!("gradcheck: 20 composites, worst rel error {worst:.3e}, {elapsed:?}");
    let ok = worst <= 1e-5 && elapsed < Duration::from_secs(10);
    assert!(verdict(1, ok), "worst {worst:.3e}, elapsed {elapsed:?}");
}

// ---------------------------------------------------------------------------
// 2. Analytic velocity-field oracle.

#[test]
fn acceptance_02_analytic_velocity_field() {
    let fx = velocity();
    let started = Instant::now();

    // With x0 and x1 both standard normal, x_t = t*x1 + (1-t)*x0 is Gaussian
    // and jointly Gaussian with v = x1 - x0, so the regression target is
    // E[v | x_t = x] = (2t - 1) / (2t^2 - 2t + 1) * x.
    let axis: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
    let grid: Vec<[f64; 2]> = axis
        .iter()
        .flat_map(|&x| axis.iter().map(move |&y| [x, y]))
        .collect();
    let flat: Vec<f64> = grid.iter().flatten().copied().collect();
    let x = Tensor::new(vec![grid.len(), 2], flat).expect("grid");

    let mut abs_err = 0.0;
    let mut count = 0usize;
    for k in 1..=9 {
        let t = k as f64 / 10.0;
        let coeff = (2.0 * t - 1.0) / (2.0 * t * t - 2.0 * t + 1.0);
        let v_hat = fx
            .model
            .forward_batch(
                &x,
                &Times::constant(t, grid.len()),
                &ConditionBatch::unconditional(grid.len()),
            )
            .expect("forward");
        for (row, point) in grid.iter().enumerate() {
            for d in 0..2 {
                abs_err += (v_hat.data()[row * 2 + d] - coeff * point[d]).abs();
                count += 1;
            }
        }
    }
    let mae = abs_err / count as f64;
    let elapsed = fx.build + started.elapsed();
    println!("velocity oracle: MAE {mae:.4} over 81 points x 9 times, {elapsed:?}");
    let ok = mae <= 0.1 && elapsed < Duration::from_secs(300);
    assert!(verdict(2, ok), "MAE {mae}, elapsed {elapsed:?}");
}

// ---------------------------------------------------------------------------
// 3. Few-step superiority: flow at 10 steps vs diffusion at 50.

#[test]
fn acceptance_03_few_step_superiority() {
    let fx = trend();
    let started = Instant::now();
    let flow_path = PathSpec::linear_ot();
    let diff_path = PathSpec::vp_default();

    let mut mmd_inversions = 0usize;
    let mut sw_inversions = 0usize;
    for s in 0..DIFF_SEEDS {
        let reference = &fx.references[s];
        let kernel = KernelSpec::median_heuristic(reference, reference).expect("kernel");
        let noise_seed = 1000 + s as u64;
        let flow = sample_toy(&fx.otfm[s], &flow_path, SamplerFamily::Euler, 10, noise_seed, false);
        let diff =
            sample_toy(&fx.diffusion[s], &diff_path, SamplerFamily::Ddim, 50, noise_seed, false);

        let mmd_flow = mmd2(reference, &flow.samples, &kernel).expect("mmd");
        let mmd_diff = mmd2(reference, &diff.samples, &kernel).expect("mmd");
        let sw_flow =
            sliced_wasserstein(reference, &flow.samples, 64, 40 + s as u64).expect("sw");
        let sw_diff =
            sliced_wasserstein(reference, &diff.samples, 64, 40 + s as u64).expect("sw");
        println!(
            "seed {s}: mmd2 flow@10 {mmd_flow:.5} vs ddim@50 {mmd_diff:.5}, \
             sw flow@10 {sw_flow:.5} vs ddim@50 {sw_diff:.5}"
        );
        if mmd_flow > mmd_diff {
            mmd_inversions += 1;
        }
        if sw_flow > sw_diff {
            sw_inversions += 1;
        }
    }
    let elapsed = fx.build + started.elapsed();
    println!(
        "few-step: {mmd_inversions} mmd2 and {sw_inversions} sw inversions \
         over {DIFF_SEEDS} seeds, {elapsed:?}"
    );
    let ok = mmd_inversions <= 1 && sw_inversions <= 1 && elapsed < Duration::from_secs(1200);
    assert!(
        verdict(3, ok),
        "{mmd_inversions} mmd2 / {sw_inversions} sw inversions, elapsed {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// 4. Step monotonicity of the flow sampler.

#[test]
fn acceptance_04_step_monotonicity() {
    let fx = trend();
    let path = PathSpec::linear_ot();
    let mut inverted_seeds = 0usize;
    for s in 0..TREND_SEEDS {
        let reference = &fx.references[s];
        let kernel = KernelSpec::median_heuristic(reference, reference).expect("kernel");
        let noise_seed = 1000 + s as u64;
        let scores: Vec<f64> = [1usize, 10, 50]
            .iter()
            .map(|&steps| {
                let out =
                    sample_toy(&fx.otfm[s], &path, SamplerFamily::Euler, steps, noise_seed, false);
                mmd2(reference, &out.samples, &kernel).expect("mmd")
            })
            .collect();
        let inverted = scores[1] > scores[0] || scores[2] > scores[1];
        println!(
            "seed {s}: mmd2 at 1/10/50 steps = {:.5} / {:.5} / {:.5}{}",
            scores[0],
            scores[1],
            scores[2],
            if inverted { "  (inversion)" } else { "" }
        );
        if inverted {
            inverted_seeds += 1;
        }
    }
    let ok = inverted_seeds <= 1;
    assert!(
        verdict(4, ok),
        "{inverted_seeds} of {TREND_SEEDS} seeds break 1 -> 10 -> 50 monotonicity"
    );
}

// ---------------------------------------------------------------------------
// 5. Trajectory straightness: flow paths straighter than diffusion paths.

#[test]
fn acceptance_05_straightness() {
    let fx = trend();
    let flow_path = PathSpec::linear_ot();
    let diff_path = PathSpec::vp_default();
    let mut ok = true;
    for s in 0..DIFF_SEEDS {
        let noise_seed = 2000 + s as u64;
        let flow =
            sample_toy(&fx.otfm[s], &flow_path, SamplerFamily::Euler, 50, noise_seed, true);
        let diff =
            sample_toy(&fx.diffusion[s], &diff_path, SamplerFamily::Ddim, 50, noise_seed, true);
        let flow_s = straightness(&flow.trajectory.expect("trajectory")).expect("straightness");
        let diff_s = straightness(&diff.trajectory.expect("trajectory")).expect("straightness");
        println!("seed {s}: straightness flow {flow_s:.5} vs ddim {diff_s:.5}");
        ok &= flow_s < diff_s;
    }
    assert!(verdict(5, ok), "flow trajectories must be strictly straighter on every seed");
}

// ---------------------------------------------------------------------------
// 6. Zero-convolution contract for the mask branch.

#[test]
fn acceptance_06_zero_convolution_contract() {
    let ds = gen_phantoms(16, 8, 31).expect("phantoms");
    let model_cfg = ModelConfig::for_data(ds.data_shape.clone()).with_mask_cond();
    let model = ConditionedModel::init(model_cfg, 77).expect("init");

    // Untrained, the fused mask branch must be exactly inert: identical
    // outputs for different masks and for no mask at all.
    let x = initial_noise(&ds.data_shape, 4, 5).expect("noise");
    let times = Times::constant(0.3, 4);
    let zero_mask = Tensor::zeros(ds.data_shape.clone()).expect("mask");
    let real_mask = ds.mask(0).expect("mask").clone();
    let out_zero = model
        .forward_batch(
            &x,
            &times,
            &ConditionBatch::from_masks(&vec![zero_mask; 4]).expect("cond"),
        )
        .expect("forward");
    let out_real = model
        .forward_batch(
            &x,
            &times,
            &ConditionBatch::from_masks(&vec![real_mask; 4]).expect("cond"),
        )
        .expect("forward");
    let out_none = model
        .forward_batch(&x, &times, &ConditionBatch::unconditional(4))
        .expect("forward");
    let invariant = out_zero.data() == out_real.data() && out_zero.data() == out_none.data();

    // One optimizer step later the encoder must have moved: zero-initialized
    // fusion weights sit downstream of live activations, so they get
    // gradients immediately even though their own output started at zero.
    let before: Vec<(String, Vec<f64>)> = model
        .parameters()
        .into_iter()
        .filter(|(name, _)| name.starts_with("cond_encoder"))
        .map(|(name, t)| (name, t.data().to_vec()))
        .collect();
    assert!(!before.is_empty(), "mask model exposes no cond_encoder parameters");
    let mut cfg = TrainConfig::new(PathSpec::linear_ot());
    cfg.lr = 1e-3;
    cfg.epochs = 1;
    cfg.batch_size = Some(ds.len());
    cfg.seed = 3;
    cfg.conditioning = Conditioning::Mask;
    let trained = train(&ds, model, &cfg, &TrainOptions::default()).expect("one step").model;
    let encoder_moved = trained
        .parameters()
        .into_iter()
        .filter(|(name, _)| name.starts_with("cond_encoder"))
        .any(|(name, t)| {
            let (_, old) = before.iter().find(|(n, _)| *n == name).expect("same params");
            t.data() != old.as_slice()
        });

    println!("zero-conv: init mask-invariant {invariant}, encoder moved after 1 step {encoder_moved}");
    let ok = invariant && encoder_moved;
    assert!(verdict(6, ok), "invariant {invariant}, encoder moved {encoder_moved}");
}

// ---------------------------------------------------------------------------
// 7. Class conditioning on the eight-Gaussians labels.

#[test]
fn acceptance_07_class_conditioning() {
    let ds = gen_toy2d(Toy2d::EightGaussians, TREND_N, 200).expect("data");
    let mut cfg = toy_train_config(PathSpec::linear_ot(), 3);
    cfg.conditioning = Conditioning::Class;
    let model = train_toy(&ds, &cfg);

    let per_class = 64;
    let mut hits = 0usize;
    let mut total = 0usize;
    for class in 0..8usize {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / 8.0;
        let (mx, my) = (2.0 * angle.cos(), 2.0 * angle.sin());
        let x0 = initial_noise(&[2], per_class, 500 + class as u64).expect("noise");
        let out = run_sampler(
            &model,
            &PathSpec::linear_ot(),
            &SamplerConfig::new(SamplerFamily::Euler, 10, 0),
            &x0,
            &ConditionBatch::repeat_class(class, per_class),
        )
        .expect("sampling");
        for point in out.samples.data().chunks(2) {
            // Components are isotropic with sigma 0.1, so 3 sigma is a
            // Euclidean ball of radius 0.3 around the requested mean.
            let dist = ((point[0] - mx).powi(2) + (point[1] - my).powi(2)).sqrt();
            hits += usize::from(dist <= 0.3);
            total += 1;
        }
    }
    let fraction = hits as f64 / total as f64;
    println!("class conditioning: {hits}/{total} samples within 3 sigma ({fraction:.4})");
    let ok = fraction >= 0.95;
    assert!(verdict(7, ok), "only {fraction:.4} of samples landed within 3 sigma");
}

// ---------------------------------------------------------------------------
// 8. Mask conditioning on phantoms.

#[test]
fn acceptance_08_mask_conditioning() {
    let model = mask_model();
    let probe = gen_phantoms(64, 16, 999).expect("phantoms");
    let masks: Vec<Tensor> = (0..probe.len())
        .map(|i| probe.mask(i).expect("mask").clone())
        .collect();
    let x0 = initial_noise(&probe.data_shape, masks.len(), 17).expect("noise");
    let out = run_sampler(
        model,
        &PathSpec::linear_ot(),
        &SamplerConfig::new(SamplerFamily::Euler, 10, 0),
        &x0,
        &ConditionBatch::from_masks(&masks).expect("cond"),
    )
    .expect("sampling");

    // Foreground extraction thresholds inside the intensity band the phantom
    // generator leaves empty, where a clean phantom reproduces its mask
    // exactly; the criterion is how closely generation follows suit.
    let mut total = 0.0;
    for (img, mask) in unstack(&out.samples).iter().zip(&masks) {
        let binary = Tensor::new(
            img.shape().to_vec(),
            img.data()
                .iter()
                .map(|&p| if p > PHANTOM_MASK_THRESHOLD { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("binary");
        total += ssim(&binary, mask, 7).expect("ssim");
    }
    let mean_ssim = total / masks.len() as f64;
    println!("mask conditioning: mean mask SSIM {mean_ssim:.4} over {} phantoms", masks.len());
    let ok = mean_ssim >= 0.6;
    assert!(verdict(8, ok), "mean mask SSIM {mean_ssim:.4} below 0.6");
}

// ---------------------------------------------------------------------------
// 9. Denoising beats the noisy baseline.

#[test]
fn acceptance_09_denoising() {
    let fx = denoiser();
    let started = Instant::now();
    let val = fx.dataset.val_split().expect("val split");

    let mut noisy_images = Vec::new();
    let mut clean_images = Vec::new();
    for i in 0..val.len() {
        let clean = val.sample(i).clone();
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(0xD0, i as u64));
        let pair = add_speckle(&clean, 0.1, &mut rng).expect("speckle");
        noisy_images.push(pair.noisy);
        clean_images.push(clean);
    }
    let flat: Vec<f64> = noisy_images.iter().flat_map(|t| t.data().iter().copied()).collect();
    let mut shape = vec![noisy_images.len()];
    shape.extend_from_slice(&fx.dataset.data_shape);
    let stacked = Tensor::new(shape, flat).expect("stacked noisy");

    let out = run_sampler(
        &fx.model,
        &PathSpec::linear_ot(),
        &SamplerConfig::new(SamplerFamily::Euler, 10, 0),
        &stacked,
        &ConditionBatch::unconditional(noisy_images.len()),
    )
    .expect("denoising");

    let mut gain_sum = 0.0;
    let mut ssim_improved = 0usize;
    for ((denoised, clean), noisy) in
        unstack(&out.samples).iter().zip(&clean_images).zip(&noisy_images)
    {
        let clamped = Tensor::new(
            denoised.shape().to_vec(),
            denoised.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
        .expect("clamped");
        let psnr_noisy = psnr(clean, noisy).expect("psnr");
        let psnr_denoised = psnr(clean, &clamped).expect("psnr");
        gain_sum += psnr_denoised - psnr_noisy;
        let ssim_noisy = ssim(clean, noisy, 7).expect("ssim");
        let ssim_denoised = ssim(clean, &clamped, 7).expect("ssim");
        ssim_improved += usize::from(ssim_denoised > ssim_noisy);
    }
    let mean_gain = gain_sum / clean_images.len() as f64;
    let improved_frac = ssim_improved as f64 / clean_images.len() as f64;
    let elapsed = fx.build + started.elapsed();
    println!(
        "denoising: mean PSNR gain {mean_gain:.2} dB, SSIM improved on \
         {ssim_improved}/{} images, {elapsed:?}",
        clean_images.len()
    );
    let ok = mean_gain >= 5.0 && improved_frac >= 0.9 && elapsed < Duration::from_secs(600);
    assert!(
        verdict(9, ok),
        "gain {mean_gain:.2} dB, ssim improved {improved_frac:.2}, elapsed {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// 10. Determinism and persistence.

#[test]
fn acceptance_10_determinism() {
    let ds = gen_toy2d(Toy2d::EightGaussians, 256, 70).expect("data");
    let scratch = tempfile::tempdir().expect("tempdir");
    let model_cfg = ModelConfig::for_data(ds.data_shape.clone());

    // Same config and seed twice: checkpoint files must match byte for byte.
    let mut cfg = TrainConfig::new(PathSpec::linear_ot());
    cfg.lr = 1e-3;
    cfg.epochs = 4;
    cfg.seed = 21;
    let run = |dir: &std::path::Path| {
        let model = ConditionedModel::init(model_cfg.clone(), 13).expect("init");
        let options =
            TrainOptions { out_dir: Some(dir.to_path_buf()), ..TrainOptions::default() };
        train(&ds, model, &cfg, &options).expect("training")
    };
    let first = run(&scratch.path().join("a"));
    let _second = run(&scratch.path().join("b"));
    let bytes_a =
        std::fs::read(scratch.path().join("a/checkpoint_0004.ckpt")).expect("checkpoint a");
    let bytes_b =
        std::fs::read(scratch.path().join("b/checkpoint_0004.ckpt")).expect("checkpoint b");
    let checkpoints_identical = bytes_a == bytes_b;

    // Same model evaluated twice must serialize the same report.
    let samplers = [SamplerConfig::new(SamplerFamily::Euler, 10, 4)];
    let metrics = [MetricKind::Mmd2, MetricKind::SlicedWasserstein];
    let opts = EvalOptions { num_samples: Some(64), ..EvalOptions::default() };
    let report_a = evaluate(&first.model, &cfg.path, &ds, &samplers, &metrics, "ckpt", &opts)
        .expect("eval")
        .to_json()
        .expect("json");
    let report_b = evaluate(&first.model, &cfg.path, &ds, &samplers, &metrics, "ckpt", &opts)
        .expect("eval")
        .to_json()
        .expect("json");
    let reports_identical = report_a == report_b;

    // Train 8 epochs straight vs 4 epochs, checkpoint, resume to 8: weights
    // and optimizer moments must agree bit for bit.
    let mut cfg8 = cfg.clone();
    cfg8.epochs = 8;
    let straight = {
        let model = ConditionedModel::init(model_cfg.clone(), 13).expect("init");
        train(&ds, model, &cfg8, &TrainOptions::default()).expect("training")
    };
    let loaded = load_checkpoint(&scratch.path().join("a/checkpoint_0004.ckpt")).expect("load");
    let resumed = resume(&ds, loaded, &cfg8, &TrainOptions::default()).expect("resume");
    let params_match = straight.model.flat_params() == resumed.model.flat_params();
    let moments_match = straight.adam.moments() == resumed.adam.moments()
        && straight.adam.step_count() == resumed.adam.step_count();

    println!(
        "determinism: checkpoints {checkpoints_identical}, reports {reports_identical}, \
         resume params {params_match}, resume moments {moments_match}"
    );
    let ok = checkpoints_identical && reports_identical && params_match && moments_match;
    assert!(
        verdict(10, ok),
        "checkpoints {checkpoints_identical}, reports {reports_identical}, \
         params {params_match}, moments {moments_match}"
    );
}

// ---------------------------------------------------------------------------
// 11. Hand-computed metric oracles.

#[test]
fn acceptance_11_metric_oracles() {
    // Paired MMD^2 with x = {0, 1}, y = {0.5, 1.5} and a unit-bandwidth
    // Gaussian kernel reduces to 2e^-0.5 - e^-1.125 - e^-0.125; the literal
    // below was computed by hand from those exponentials.
    let x = Tensor::new(vec![2, 1], vec![0.0, 1.0]).expect("x");
    let y = Tensor::new(vec![2, 1], vec![0.5, 1.5]).expect("y");
    let kernel = KernelSpec::rbf(vec![1.0]).expect("kernel");
    let got = mmd2(&x, &y, &kernel).expect("mmd");
    let expected = 0.0059119494823216545;
    let mmd_ok = (got - expected).abs() <= 1e-12;

    // SSIM of any image with itself is exactly 1.
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let img = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect())
        .expect("img");
    let self_ssim = ssim(&img, &img, 7).expect("ssim");
    let ssim_ok = self_ssim == 1.0;

    // Point masses at 0 and 1: every 1-D projection direction is +/-1, so the
    // sliced Wasserstein distance is exactly 1 regardless of the projections.
    let px = Tensor::new(vec![4, 1], vec![0.0; 4]).expect("px");
    let py = Tensor::new(vec![4, 1], vec![1.0; 4]).expect("py");
    let sw = sliced_wasserstein(&px, &py, 16, 123).expect("sw");
    let sw_ok = sw == 1.0;

    println!(
        "oracles: mmd2 {got:.16} (expected {expected:.16}), self-SSIM {self_ssim}, \
         point-mass SW {sw}"
    );
    let ok = mmd_ok && ssim_ok && sw_ok;
    assert!(verdict(11, ok), "mmd {mmd_ok}, ssim {ssim_ok}, sw {sw_ok}");
}
