//! Acceptance gate. Each test checks one release criterion end to end and
//! prints a single `ACCEPTANCE <nn> <PASS|SKIP> ...` line (run with
//! `--nocapture` to see them). Expensive artifacts (trained toy models,
//! synthesized batches) are built once and shared; tests serialize on a
//! global lock so the stated runtime budgets are measured honestly.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array2, Array4};
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use vitq_core::calib::{
    density_curves, evaluate_fp, evaluate_top1, mean_mode_count, noise_batch, quant_table_json,
    run_calibration, wrap_model,
};
use vitq_core::checkpoint::save_checkpoint;
use vitq_core::data::{generate_toy_dataset, ToyDataset};
use vitq_core::model::{
    activation_sites, forward, train_toy_model, ModelConfig, ParameterSet, SiteMode, TrainConfig,
};
use vitq_core::model::diff::{forward_tape, TapeParams};
use vitq_core::patchsim::{
    data_reduction_ratio, pse_loss, pse_loss_tape, DensityModel, EntropyOptions,
};
use vitq_core::priors::{
    one_hot_loss, one_hot_loss_tape, total_generation_loss, total_generation_loss_tape, tv_loss,
    tv_loss_tape, GenLossWeights,
};
use vitq_core::quant::{
    fake_quantize_scalar, params_from_range, ObserverConfig, ObserverState, QuantParams, Scheme,
    Strategy,
};
use vitq_core::synth::{generate_samples, GenConfig, GeneratedBatch};
use vitq_core::tape::Tape;

/// Tests run on one thread at a time so per-criterion wall-clock budgets
/// mean something.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------------------
// Shared fixtures: the trained toy models and their calibration batches.

const FIX_SEEDS: [u64; 3] = [0, 1, 2];
const FIX_PER_CLASS: usize = 100;
const FIX_TEST_FRAC: f64 = 0.2;
const FIX_EPOCHS: usize = 40;
const FIX_GEN_STEPS: usize = 200;
const FIX_ENTROPY_GRID: usize = 256;

struct SeedFixture {
    seed: u64,
    params: ParameterSet,
    train_top1: f64,
    heldout_top1: f64,
    generated: GeneratedBatch,
    noise: GeneratedBatch,
}

struct Fixtures {
    test: ToyDataset,
    seeds: Vec<SeedFixture>,
    /// Wall-clock seconds spent training + synthesizing everything above.
    build_seconds: f64,
}

static FIXTURES: Lazy<Fixtures> = Lazy::new(|| {
    let t0 = Instant::now();
    let cfg = ModelConfig::toy();
    let dataset = generate_toy_dataset(FIX_PER_CLASS, 0);
    let (train, test) = dataset.split(FIX_TEST_FRAC, 0).expect("valid split");
    let mut seeds = Vec::new();
    for &seed in &FIX_SEEDS {
        let tc = TrainConfig {
            epochs: FIX_EPOCHS,
            batch_size: 16,
            lr: 1e-3,
            seed,
        };
        let outcome = train_toy_model(&cfg, &train, &tc).expect("training succeeds");
        let train_top1 = evaluate_fp(&outcome.params, &train.images.view(), &train.labels, "train")
            .expect("train eval")
            .top1;
        let heldout_top1 = evaluate_fp(&outcome.params, &test.images.view(), &test.labels, "test")
            .expect("test eval")
            .top1;
        let mut gc = GenConfig::new(FIX_GEN_STEPS, seed ^ 0x9e37, cfg.num_classes);
        gc.entropy.grid_points = FIX_ENTROPY_GRID;
        let generated = generate_samples(&outcome.params, &gc).expect("generation succeeds");
        let noise = noise_batch(&gc, cfg.image_side);
        seeds.push(SeedFixture {
            seed,
            params: outcome.params,
            train_top1,
            heldout_top1,
            generated,
            noise,
        });
    }
    Fixtures {
        test,
        seeds,
        build_seconds: t0.elapsed().as_secs_f64(),
    }
});

/// Calibration protocol of the toy benchmark: percentile clipping with a 5%
/// tail fraction. Plain extremes are insensitive to where a calibration
/// batch puts its probability mass (layer norm bounds every site, and the
/// constant class-token/positional pathways anchor the extremes for any
/// input), so min-max cannot distinguish good calibration images from bad
/// ones at this scale. Quantile clipping reacts to the bulk shape of the
/// observed distribution, which is exactly what synthesized images improve.
fn headline_observer() -> ObserverConfig {
    let mut cfg = ObserverConfig::new(Strategy::Percentile);
    cfg.percentile = 0.05;
    cfg
}

fn calibrated_heldout_top1(
    fx: &Fixtures,
    params: &ParameterSet,
    samples: &GeneratedBatch,
    provenance: &str,
    k_w: u32,
    k_a: u32,
) -> f64 {
    let mut qm = wrap_model(params, k_w, k_a, headline_observer(), false).expect("wrap");
    run_calibration(&mut qm, samples, provenance).expect("calibration");
    evaluate_top1(&qm, &fx.test.images.view(), &fx.test.labels, "heldout")
        .expect("eval")
        .top1
}

// ---------------------------------------------------------------------------
// 1. Uniform quantizer: round-trip error bound and fixed points.

#[test]
fn c01_quantizer_round_trip_error_bound() {
    let _g = serial();
    let t0 = Instant::now();
    let cases = [
        (-1.3, 2.7, Scheme::Asymmetric),
        (-4.0, 4.0, Scheme::Symmetric),
        (0.1, 5.7, Scheme::Asymmetric),
    ];
    let mut worst_frac: f64 = 0.0;
    for k in [2u32, 4, 8] {
        for &(lo, hi, scheme) in &cases {
            let qp = params_from_range(lo, hi, k, scheme).expect("valid params");
            let n = 200_001;
            let span = qp.clip_hi - qp.clip_lo;
            for i in 0..n {
                let v = qp.clip_lo + span * i as f64 / (n - 1) as f64;
                let err = (v - fake_quantize_scalar(v, &qp)).abs();
                assert!(
                    err <= qp.step / 2.0 + 1e-12,
                    "k={k} scheme={scheme:?} v={v}: err {err} > step/2 {}",
                    qp.step / 2.0
                );
                worst_frac = worst_frac.max(err / qp.step);
            }
            let levels = (1u64 << k) - 1;
            for j in 0..=levels {
                let v = qp.clip_lo + qp.step * j as f64;
                let q = fake_quantize_scalar(v, &qp);
                assert_eq!(q, v, "grid point {j} of k={k} must be a fixed point");
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 10.0, "quantizer scan took {secs:.1}s (budget 10s)");
    println!(
        "ACCEPTANCE 01 PASS quantizer round-trip: worst |v-q(v)| = {worst_frac:.4}*step over k in {{2,4,8}}, grid points exact ({secs:.1}s < 10s)"
    );
}

// ---------------------------------------------------------------------------
// 2. KDE differential entropy against closed-form oracles.

#[test]
fn c02_entropy_matches_gaussian_oracles() {
    let _g = serial();
    let t0 = Instant::now();
    let grid = EntropyOptions::default().grid_points;
    let mut worst_single: f64 = 0.0;
    for h in [0.01, 0.1, 1.0] {
        let model = DensityModel::with_bandwidth(vec![0.37], h).expect("single point");
        let est = model.differential_entropy(grid);
        let oracle = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * h * h).ln();
        let err = (est - oracle).abs();
        assert!(err < 1e-3, "h={h}: entropy {est} vs oracle {oracle}");
        worst_single = worst_single.max(err);
    }
    // Two far-apart kernels: the mixture entropy exceeds one kernel's by ln 2.
    let mut worst_gap: f64 = 0.0;
    for h in [0.01, 0.1, 1.0] {
        let single = DensityModel::with_bandwidth(vec![0.0], h)
            .expect("single")
            .differential_entropy(grid);
        let pair = DensityModel::with_bandwidth(vec![0.0, 50.0 * h], h)
            .expect("pair")
            .differential_entropy(grid);
        let err = (pair - single - std::f64::consts::LN_2).abs();
        assert!(err < 5e-2, "h={h}: cluster gap {} vs ln2", pair - single);
        worst_gap = worst_gap.max(err);
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 10.0, "entropy oracle took {secs:.1}s (budget 10s)");
    println!(
        "ACCEPTANCE 02 PASS entropy oracles: single-kernel err <= {worst_single:.2e} (tol 1e-3), two-cluster ln2 err <= {worst_gap:.2e} (tol 5e-2) ({secs:.1}s < 10s)"
    );
}

// ---------------------------------------------------------------------------
// 3. Analytic pixel gradients of every generation loss vs central FD.

#[test]
fn c03_pixel_gradients_match_finite_differences() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = ModelConfig {
        num_layers: 2,
        num_heads: 2,
        head_dim: 4,
        hidden_size: 8,
        num_patches: 16,
        patch_size: 8,
        image_side: 32,
        num_classes: 10,
        mlp_hidden: 16,
    };
    let params = ParameterSet::init(&cfg, 11).expect("init");
    let targets = vec![3usize, 7];
    let weights = GenLossWeights::default();
    let opts = EntropyOptions {
        grid_points: 256,
        ..EntropyOptions::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let mut images = Array4::<f64>::zeros((2, 3, cfg.image_side, cfg.image_side));
    images.mapv_inplace(|_| rng.gen_range(-1.0..1.0));

    // Analytic gradients from the tape.
    let tape = Tape::new();
    let tp = TapeParams::from_parameter_set(&tape, &params);
    let pix = tape.leaf(images.clone().into_dyn());
    let (logits, trace) = forward_tape(&tape, &tp, &cfg, &pix, true).expect("tape forward");
    let pse_v = pse_loss_tape(&trace, &tape, &opts).expect("pse");
    let oh_v = one_hot_loss_tape(&logits, &targets).expect("oh");
    let tv_v = tv_loss_tape(&pix);
    let total_v = total_generation_loss_tape(Some(&pse_v), Some(&oh_v), Some(&tv_v), &weights)
        .expect("total");
    let grads: Vec<ndarray::ArrayD<f64>> = [&pse_v, &oh_v, &tv_v, &total_v]
        .iter()
        .map(|v| {
            tape.backward(v)
                .wrt(&pix)
                .expect("pixels reached")
                .clone()
        })
        .collect();

    // Independent scalar losses along the plain (tape-free) path.
    let plain = |imgs: &Array4<f64>| -> [f64; 4] {
        let res = forward(&params, &imgs.view(), true, &mut SiteMode::Plain).expect("forward");
        let tr = res.trace.expect("capture");
        let views: Vec<_> = tr.layers.iter().map(|l| l.view()).collect();
        let pse = pse_loss(&views, &opts).expect("pse");
        let oh = one_hot_loss(&res.logits.view(), &targets).expect("oh");
        let tv = tv_loss(&imgs.view());
        [pse, oh, tv, total_generation_loss(pse, oh, tv, &weights)]
    };

    let names = ["entropy", "one-hot", "smoothness", "combined"];
    let step = 1e-4;
    let mut worst = [0.0f64; 4];
    let total_px = images.len();
    for _ in 0..50 {
        let flat = rng.gen_range(0..total_px);
        let idx = {
            let (b, rem) = (flat / (3 * 32 * 32), flat % (3 * 32 * 32));
            let (c, rem2) = (rem / (32 * 32), rem % (32 * 32));
            (b, c, rem2 / 32, rem2 % 32)
        };
        let mut plus = images.clone();
        plus[idx] += step;
        let mut minus = images.clone();
        minus[idx] -= step;
        let lp = plain(&plus);
        let lm = plain(&minus);
        for li in 0..4 {
            let fd = (lp[li] - lm[li]) / (2.0 * step);
            let an = grads[li][[idx.0, idx.1, idx.2, idx.3]];
            if an.abs().max(fd.abs()) < 1e-8 {
                continue; // below central-difference resolution
            }
            let rel = (an - fd).abs() / an.abs().max(fd.abs());
            assert!(
                rel < 1e-3,
                "{} loss, pixel {idx:?}: analytic {an:.6e} vs fd {fd:.6e} (rel {rel:.2e})",
                names[li]
            );
            worst[li] = worst[li].max(rel);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient checks took {secs:.1}s (budget 2min)");
    println!(
        "ACCEPTANCE 03 PASS pixel gradients: max rel err entropy {:.2e} / one-hot {:.2e} / smoothness {:.2e} / combined {:.2e} over 50 pixels (tol 1e-3, {secs:.1}s < 120s)",
        worst[0], worst[1], worst[2], worst[3]
    );
}

// ---------------------------------------------------------------------------
// 4. Similarity-representation volume ratio for the reference geometry.

#[test]
fn c04_similarity_volume_ratio() {
    let _g = serial();
    let ratio = data_reduction_ratio(768, 196);
    assert!((ratio - 768.0 / 196.0).abs() < 1e-12);
    let rounded = (ratio * 100.0).round() / 100.0;
    assert_eq!(rounded, 3.92, "ratio {ratio} should round to 3.92");
    println!("ACCEPTANCE 04 PASS volume ratio 768/196 = {ratio:.4} -> {rounded:.2}");
}

// ---------------------------------------------------------------------------
// 5. Toy-scale headline comparison: W8/A8 calibrated on synthesized images
//    vs calibrated on raw noise.

#[test]
fn c05_generated_calibration_beats_noise_at_w8a8() {
    let _g = serial();
    let t0 = Instant::now();
    let fx = &*FIXTURES;
    let mut gaps = Vec::new();
    for sf in &fx.seeds {
        assert!(
            sf.train_top1 >= 0.90,
            "seed {}: train top-1 {:.3} below 0.90",
            sf.seed,
            sf.train_top1
        );
        assert!(
            sf.heldout_top1 >= 0.80,
            "seed {}: heldout top-1 {:.3} below 0.80",
            sf.seed,
            sf.heldout_top1
        );
        let acc_gen = calibrated_heldout_top1(fx, &sf.params, &sf.generated, "generated", 8, 8);
        let acc_noise = calibrated_heldout_top1(fx, &sf.params, &sf.noise, "noise", 8, 8);
        assert!(
            acc_gen >= acc_noise,
            "seed {}: generated-calibrated {acc_gen:.3} below noise-calibrated {acc_noise:.3}",
            sf.seed
        );
        gaps.push((acc_gen - acc_noise) * 100.0);
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let per_seed: Vec<String> = gaps.iter().map(|g| format!("{g:+.1}")).collect();
    assert!(
        mean_gap >= 2.0,
        "mean generated-vs-noise gap {mean_gap:.2} points < 2.0 (per seed: {per_seed:?})"
    );
    let secs = fx.build_seconds + t0.elapsed().as_secs_f64();
    assert!(
        secs < 900.0,
        "headline comparison took {secs:.0}s including fixture build (budget 15min)"
    );
    println!(
        "ACCEPTANCE 05 PASS W8/A8 generated vs noise: mean gap {mean_gap:.2} points over seeds {FIX_SEEDS:?} (per seed {}, {secs:.0}s < 900s)",
        per_seed.join(" / ")
    );
}

// ---------------------------------------------------------------------------
// 6. Loss-ablation ordering.

#[test]
fn c06_loss_ablation_ordering() {
    let _g = serial();
    let fx = &*FIXTURES;
    let mut holds = 0;
    let mut rows_dbg = Vec::new();
    for sf in &fx.seeds {
        let gen_with = |pse: bool, one_hot: bool, tv: bool| {
            let mut gc = GenConfig::new(FIX_GEN_STEPS, sf.seed ^ 0x9e37, 10);
            gc.entropy.grid_points = FIX_ENTROPY_GRID;
            gc.select = vitq_core::synth::LossSelection { pse, one_hot, tv };
            generate_samples(&sf.params, &gc).expect("generation")
        };
        let acc_full = calibrated_heldout_top1(fx, &sf.params, &sf.generated, "full", 8, 8);
        let acc_pse =
            calibrated_heldout_top1(fx, &sf.params, &gen_with(true, false, false), "pse", 8, 8);
        let acc_ohtv =
            calibrated_heldout_top1(fx, &sf.params, &gen_with(false, true, true), "oh+tv", 8, 8);
        let acc_none = calibrated_heldout_top1(fx, &sf.params, &sf.noise, "noise", 8, 8);
        let ok = acc_full >= acc_pse && acc_pse > acc_ohtv && acc_ohtv > acc_none;
        rows_dbg.push(format!(
            "seed {}: full {acc_full:.3} pse {acc_pse:.3} oh+tv {acc_ohtv:.3} none {acc_none:.3}{}",
            sf.seed,
            if ok { "" } else { " (ordering broken)" }
        ));
        if ok {
            holds += 1;
        }
    }
    assert!(
        holds >= 2,
        "ablation ordering held on {holds}/3 seeds:\n{}",
        rows_dbg.join("\n")
    );
    println!(
        "ACCEPTANCE 06 PASS ablation ordering full >= pse > oh+tv > none on {holds}/3 seeds ({})",
        rows_dbg.join("; ")
    );
}

// ---------------------------------------------------------------------------
// 7. Similarity-density qualitative shape: synthesized images produce more
//    modes than noise; exported curves are proper densities.

#[test]
fn c07_density_modes_and_normalization() {
    let _g = serial();
    let fx = &*FIXTURES;
    let mut worst_integral_err: f64 = 0.0;
    for sf in &fx.seeds {
        let curves_gen =
            density_curves(&sf.params, &sf.generated.images.view(), 0.01).expect("curves");
        let curves_noise =
            density_curves(&sf.params, &sf.noise.images.view(), 0.01).expect("curves");
        for c in curves_gen.iter().chain(curves_noise.iter()) {
            let integral = c.trapezoid();
            assert!(
                (integral - 1.0).abs() <= 1e-2,
                "seed {}: curve integral {integral} outside 1 +/- 1e-2",
                sf.seed
            );
            worst_integral_err = worst_integral_err.max((integral - 1.0).abs());
        }
        let modes_gen = mean_mode_count(&curves_gen, 0.05);
        let modes_noise = mean_mode_count(&curves_noise, 0.05);
        assert!(
            modes_gen > modes_noise,
            "seed {}: generated modes {modes_gen:.2} not above noise modes {modes_noise:.2}",
            sf.seed
        );
    }
    println!(
        "ACCEPTANCE 07 PASS density curves: generated mode count exceeds noise on all seeds; integrals within {worst_integral_err:.1e} of 1 (tol 1e-2)"
    );
}

// ---------------------------------------------------------------------------
// 8. Calibration-strategy sanity: percentile(0) == minmax, and the MSE
//    search never loses to plain extremes on its own buffer.

#[test]
fn c08_strategy_sanity() {
    let _g = serial();
    let fx = &*FIXTURES;
    let sf = &fx.seeds[0];
    let cfg = *sf.params.config();

    // (a) percentile with a zero tail fraction reproduces MinMax exactly.
    let mut qm_minmax = wrap_model(&sf.params, 8, 8, ObserverConfig::new(Strategy::MinMax), false)
        .expect("wrap");
    run_calibration(&mut qm_minmax, &sf.noise, "noise").expect("calibrate");
    let mut pcfg = ObserverConfig::new(Strategy::Percentile);
    pcfg.percentile = 0.0;
    let mut qm_pct = wrap_model(&sf.params, 8, 8, pcfg, false).expect("wrap");
    run_calibration(&mut qm_pct, &sf.noise, "noise").expect("calibrate");
    let table_minmax = quant_table_json(&qm_minmax).expect("table");
    let table_pct = quant_table_json(&qm_pct).expect("table");
    assert_eq!(table_minmax, table_pct, "percentile(0) table differs from minmax");
    let report_minmax = serde_json::to_string(
        &evaluate_top1(&qm_minmax, &fx.test.images.view(), &fx.test.labels, "heldout")
            .expect("eval"),
    )
    .unwrap();
    let report_pct = serde_json::to_string(
        &evaluate_top1(&qm_pct, &fx.test.images.view(), &fx.test.labels, "heldout").expect("eval"),
    )
    .unwrap();
    assert_eq!(report_minmax, report_pct);

    // (b) OMSE's buffer MSE is never worse than MinMax's, at any site.
    // Collect per-site buffers with buffering observers, then compare the
    // two strategies' quantization error on exactly those values.
    let mut observers: BTreeMap<String, ObserverState> = activation_sites(&cfg, false)
        .into_iter()
        .map(|name| {
            (
                name,
                ObserverState::new(ObserverConfig::new(Strategy::Percentile)).expect("observer"),
            )
        })
        .collect();
    let n = sf.noise.images.dim().0;
    for i in 0..n {
        let one = sf.noise.images.slice(ndarray::s![i..i + 1, .., .., ..]);
        let mut mode = SiteMode::Observe(&mut observers);
        forward(&sf.params, &one, false, &mut mode).expect("observe pass");
    }
    for k_a in [4u32, 8] {
        let mse_of = |qp: &QuantParams, values: &[f64]| -> f64 {
            values
                .iter()
                .map(|&v| {
                    let d = v - fake_quantize_scalar(v, qp);
                    d * d
                })
                .sum::<f64>()
                / values.len() as f64
        };
        let mut qm_omse = wrap_model(&sf.params, 8, k_a, ObserverConfig::new(Strategy::Omse), false)
            .expect("wrap");
        run_calibration(&mut qm_omse, &sf.noise, "noise").expect("calibrate");
        let mut qm_mm = wrap_model(&sf.params, 8, k_a, ObserverConfig::new(Strategy::MinMax), false)
            .expect("wrap");
        run_calibration(&mut qm_mm, &sf.noise, "noise").expect("calibrate");
        let omse_table = vitq_core::calib::quant_table(&qm_omse).expect("table").activations;
        let mm_table = vitq_core::calib::quant_table(&qm_mm).expect("table").activations;
        for (site, state) in &observers {
            let values = state.samples();
            assert!(!values.is_empty(), "site {site} never observed");
            let mse_omse = mse_of(&omse_table[site], values);
            let mse_mm = mse_of(&mm_table[site], values);
            assert!(
                mse_omse <= mse_mm + 1e-15,
                "k_a={k_a} site {site}: OMSE mse {mse_omse:.3e} exceeds MinMax mse {mse_mm:.3e}"
            );
        }
    }
    println!(
        "ACCEPTANCE 08 PASS strategy sanity: percentile(0) == minmax byte-identical; OMSE buffer MSE <= MinMax at all {} sites for k_a in {{4, 8}}",
        activation_sites(&cfg, false).len()
    );
}

// ---------------------------------------------------------------------------
// 9. Determinism: the full pipeline twice with the same seeds gives
//    byte-identical artifacts.

#[test]
fn c09_end_to_end_determinism() {
    let _g = serial();
    let cfg = ModelConfig::toy();
    let dataset = generate_toy_dataset(10, 3);
    let dir = tempfile::tempdir().expect("tempdir");

    let run = |tag: &str| -> (Vec<u8>, String, String) {
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 16,
            lr: 1e-3,
            seed: 5,
        };
        let outcome = train_toy_model(&cfg, &dataset, &tc).expect("train");
        let ckpt = dir.path().join(format!("{tag}.json"));
        save_checkpoint(&outcome.params, &ckpt).expect("save");
        let blob = std::fs::read(dir.path().join(format!("{tag}.bin"))).expect("blob");

        let mut gc = GenConfig::new(20, 17, cfg.num_classes);
        gc.entropy.grid_points = 128;
        let batch = generate_samples(&outcome.params, &gc).expect("generate");
        let mut qm = wrap_model(
            &outcome.params,
            8,
            8,
            ObserverConfig::new(Strategy::MinMax),
            false,
        )
        .expect("wrap");
        run_calibration(&mut qm, &batch, "generated").expect("calibrate");
        let table = quant_table_json(&qm).expect("table");
        let report = serde_json::to_string_pretty(
            &evaluate_top1(&qm, &dataset.images.view(), &dataset.labels, "train").expect("eval"),
        )
        .unwrap();
        (blob, table, report)
    };

    let (blob_a, table_a, report_a) = run("a");
    let (blob_b, table_b, report_b) = run("b");
    assert_eq!(blob_a, blob_b, "checkpoint blobs differ between identical runs");
    assert_eq!(table_a, table_b, "quant tables differ between identical runs");
    assert_eq!(report_a, report_b, "eval reports differ between identical runs");
    println!(
        "ACCEPTANCE 09 PASS determinism: checkpoint blob ({} bytes), quant table ({} bytes), and eval report byte-identical across two seeded runs",
        blob_a.len(),
        table_a.len()
    );
}

// ---------------------------------------------------------------------------
// 10. Optional, network-gated: published pretrained checkpoint at W8/A8.
//     Needs VITQ_DEIT_DIR pointing at a directory with `model.safetensors`
//     (DeiT-tiny, patch 16, 224px) and `val.json`/`val.bin` (a sample batch
//     in the native batch format with true labels). Skips cleanly otherwise.

#[test]
fn c10_pretrained_checkpoint_headline_number() {
    let _g = serial();
    let dir = match std::env::var("VITQ_DEIT_DIR") {
        Ok(d) => d,
        Err(_) => {
            println!(
                "ACCEPTANCE 10 SKIP network-gated pretrained check (set VITQ_DEIT_DIR to run)"
            );
            return;
        }
    };
    let dir = std::path::PathBuf::from(dir);
    let cfg = ModelConfig {
        num_layers: 12,
        num_heads: 3,
        head_dim: 64,
        hidden_size: 192,
        num_patches: 196,
        patch_size: 16,
        image_side: 224,
        num_classes: 1000,
        mlp_hidden: 768,
    };
    let params = vitq_core::checkpoint::import_safetensors(&dir.join("model.safetensors"), &cfg)
        .expect("import pretrained weights");
    let val = vitq_core::synth::load_batch(&dir.join("val.json")).expect("load val batch");
    assert!(
        val.images.dim().0 >= 5000,
        "need at least 5000 validation images, got {}",
        val.images.dim().0
    );

    let mut gc = GenConfig::new(500, 0, cfg.num_classes);
    gc.batch_size = 32;
    gc.targets = (0..32).map(|i| (i * 31) % cfg.num_classes).collect();
    let generated = generate_samples(&params, &gc).expect("synthesize calibration set");
    let noise = noise_batch(&gc, cfg.image_side);

    let eval_with = |samples: &GeneratedBatch, tag: &str| -> f64 {
        let mut qm = wrap_model(&params, 8, 8, ObserverConfig::new(Strategy::MinMax), false)
            .expect("wrap");
        run_calibration(&mut qm, samples, tag).expect("calibrate");
        let mut correct = 0usize;
        let n = val.images.dim().0;
        for i in 0..n {
            let one = val.images.slice(ndarray::s![i..i + 1, .., .., ..]);
            let logits = qm.logits(&one).expect("logits");
            let pred = argmax_row(&logits);
            if pred == val.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    };
    let top1_gen = eval_with(&generated, "generated") * 100.0;
    let top1_noise = eval_with(&noise, "noise") * 100.0;
    assert!(
        (top1_gen - 71.56).abs() <= 1.0,
        "W8/A8 top-1 {top1_gen:.2} outside 71.56 +/- 1.0"
    );
    assert!(
        top1_gen - top1_noise >= 50.0,
        "generated-vs-noise gap {:.2} below 50 points",
        top1_gen - top1_noise
    );
    println!(
        "ACCEPTANCE 10 PASS pretrained W8/A8 top-1 {top1_gen:.2} (target 71.56 +/- 1.0), noise baseline {top1_noise:.2}"
    );
}

fn argmax_row(logits: &Array2<f64>) -> usize {
    let row = logits.row(0);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
