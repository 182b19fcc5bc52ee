//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.
//!
//! `cargo test -p envdecode-core --test acceptance`; pass criterion names as
//! arguments to run a subset.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{pearson_oracle, LagRegression};
use envdecode::checkpoint::Checkpoint;
use envdecode::data::{generate_synthetic, Dataset, SignalFile, Split, SyntheticSpec};
use envdecode::gradcheck;
use envdecode::inference::{evaluate_split, infer_recording, plan_chunks, TailPolicy};
use envdecode::model::{DecoderModel, ModelConfig, PreLnFftBlock};
use envdecode::nn::{Graph, ParamStore};
use envdecode::objective::{pearson, pearson_r, total_loss, LossConfig};
use envdecode::training::{scheduler_lr, OptimConfig, Trainer};
use envdecode::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA_SEED: u64 = 7;
const EPS: f64 = 1e-8;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn synthetic() -> Dataset {
    let spec = SyntheticSpec {
        n_subjects: 4,
        recordings_per_subject: 2,
        duration_seconds: 60.0,
        noise_std: 0.1,
        seed: DATA_SEED,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).expect("valid spec").dataset()
}

fn small_model(use_conditioner: bool, n_subjects: usize, seed: u64) -> DecoderModel {
    let cfg = ModelConfig {
        hidden_dim: 32,
        n_blocks: 2,
        n_subjects: if use_conditioner { n_subjects } else { 0 },
        use_conditioner,
        ..ModelConfig::default()
    };
    DecoderModel::new(cfg, seed).expect("valid config")
}

/// Trains for `steps` epochs of one crop per recording; with four training
/// recordings and batch 64 that is one optimizer step per epoch.
fn train_steps(ds: &Dataset, use_conditioner: bool, seed: u64, steps: usize) -> Trainer {
    let model = small_model(use_conditioner, ds.n_subjects(), seed);
    let optim = OptimConfig {
        seed,
        ..OptimConfig::default()
    };
    let mut trainer = Trainer::new(model, optim, LossConfig::default()).expect("valid trainer");
    let train = ds.split(Split::Train);
    for _ in 0..steps {
        trainer.run_epoch(&train).expect("finite training");
    }
    assert_eq!(trainer.steps(), steps as u64);
    trainer
}

fn mean_r(model: &DecoderModel, ds: &Dataset, split: Split) -> f64 {
    let segment = model.config().segment_samples().unwrap();
    evaluate_split(model, ds, split, segment, TailPolicy::ProcessShortTail, EPS)
        .unwrap()
        .overall_mean
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let rows = gradcheck::suite(0).expect("suite runs");
    let elapsed = start.elapsed();
    let worst = rows.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let failing: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let has_model = rows.iter().any(|r| r.name == "model_2_blocks");
    outcome(
        failing.is_empty() && has_model && elapsed < Duration::from_secs(120),
        format!(
            "{} rows, worst rel err {worst:.2e} (< 1e-4), failing {failing:?}, {:.1}s (< 120s)",
            rows.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn pearson_agreement() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=500);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mix = rng.random_range(-1.0..1.0);
        let y: Vec<f64> = x.iter().map(|v| mix * v + rng.random_range(-2.0..2.0)).collect();
        let want = pearson_oracle(&x, &y, EPS);

        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(x.clone()));
        let b = tape.constant(Tensor::from_vec(y.clone()));
        let r = pearson_r(&mut tape, a, b, EPS).unwrap();
        let taped = tape.value(r).data()[0];
        let plain = pearson(&x, &y, EPS).unwrap();
        worst = worst.max((taped - want).abs()).max((plain - want).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && elapsed < Duration::from_secs(10),
        format!("1000 pairs, max |diff| {worst:.2e} (<= 1e-9), {:.2}s (< 10s)", elapsed.as_secs_f64()),
    )
}

fn learnability(ds: &Dataset) -> Outcome {
    let train = ds.split(Split::Train);
    let mut reference = Vec::new();
    for s in 0..ds.n_subjects() {
        let own: Vec<_> = train.iter().copied().filter(|r| r.subject_id == s).collect();
        let fit = LagRegression::fit(&own, -4..12, 1e-3);
        for rec in own {
            reference.push(pearson(&fit.predict(rec), rec.envelope.data(), EPS).unwrap());
        }
    }
    let reference = reference.iter().sum::<f64>() / reference.len() as f64;

    let start = Instant::now();
    let trainer = train_steps(ds, true, 0, 500);
    let r = mean_r(trainer.model(), ds, Split::Train);
    let elapsed = start.elapsed();
    outcome(
        r >= 0.80 && reference > 0.9 && elapsed < Duration::from_secs(600),
        format!(
            "train mean r {r:.4} (>= 0.80), least-squares reference {reference:.4} (> 0.9), {:.0}s (< 600s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn conditioner_ablation(ds: &Dataset) -> Outcome {
    const STEPS: usize = 300;
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in 0..3 {
        with.push(mean_r(train_steps(ds, true, seed, STEPS).model(), ds, Split::Val));
        without.push(mean_r(train_steps(ds, false, seed, STEPS).model(), ds, Split::Val));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&with), mean(&without));
    outcome(
        a > b,
        format!("val r with {a:.4} {with:.3?}, without {b:.4} {without:.3?}, {STEPS} steps, seeds 0-2"),
    )
}

fn pre_ln_identity() -> Outcome {
    let cfg = ModelConfig {
        in_channels: 3,
        hidden_dim: 8,
        n_heads: 2,
        n_blocks: 1,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let block = PreLnFftBlock::new(&mut store, "b", &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let a = &block.attn;
    let zeroed = [
        a.query.weight, a.query.bias, a.key.weight, a.key.bias,
        a.value.weight, a.value.bias, a.output.weight, a.output.bias,
        block.conv_a.weight, block.conv_a.bias, block.conv_b.weight, block.conv_b.bias,
    ];
    for id in zeroed {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = Tensor::new([2, 9, 8], (0..144).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let run = |pre: bool| {
        let mut g = Graph::new(&store);
        let x = g.tape.constant(h.clone());
        let y = block.forward(&mut g, x, pre, 0.0).unwrap();
        g.tape.value(y).max_abs_diff(&h)
    };
    let (pre, post) = (run(true), run(false));
    outcome(
        pre < 1e-12 && post > 1e-3,
        format!("pre-LN deviation {pre:.2e} (< 1e-12), post-LN deviation {post:.3} (clearly nonzero)"),
    )
}

fn chunk_identity(ds: &Dataset) -> Outcome {
    let model = small_model(true, ds.n_subjects(), 3);
    let chunk = model.config().segment_samples().unwrap();
    let rec = ds.split(Split::Val)[0];
    let channels = rec.channels();
    let direct = |off: usize, len: usize| {
        let x = rec.eeg.slice_axis(0, off, off + len).unwrap().reshape([1, len, channels]).unwrap();
        model.predict(&x, Some(&[rec.subject_id])).unwrap().into_data()
    };
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();

    let one_rec = envdecode::data::RecordingPair::new(
        rec.subject_id,
        rec.eeg.slice_axis(0, 0, chunk).unwrap(),
        rec.envelope.slice_axis(0, 0, chunk).unwrap(),
        rec.sample_rate_hz,
    )
    .unwrap();
    let plan = plan_chunks(chunk, chunk, TailPolicy::ProcessShortTail).unwrap();
    let one = infer_recording(&model, &one_rec, &plan).unwrap();
    let bitwise = bits(one.data()) == bits(&direct(0, chunk));

    let two_rec = envdecode::data::RecordingPair::new(
        rec.subject_id,
        rec.eeg.slice_axis(0, 0, 2 * chunk).unwrap(),
        rec.envelope.slice_axis(0, 0, 2 * chunk).unwrap(),
        rec.sample_rate_hz,
    )
    .unwrap();
    let plan = plan_chunks(2 * chunk, chunk, TailPolicy::ProcessShortTail).unwrap();
    let two = infer_recording(&model, &two_rec, &plan).unwrap();
    let mut expected = direct(0, chunk);
    expected.extend(direct(chunk, chunk));
    let diff = two.data().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(
        bitwise && two.numel() == 2 * chunk && diff <= 1e-12,
        format!("one chunk ({chunk} samples) bitwise {bitwise}, two chunks max |diff| {diff:.2e} (<= 1e-12)"),
    )
}

fn loss_value(pred: &[f64], target: &[f64], cfg: &LossConfig) -> f64 {
    let n = pred.len();
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::new([1, n], pred.to_vec()).unwrap());
    let t = tape.constant(Tensor::new([1, n], target.to_vec()).unwrap());
    let l = total_loss(&mut tape, p, t, cfg).unwrap();
    tape.value(l).data()[0]
}

fn loss_formula() -> Outcome {
    let target = [0.4, 1.7, -0.2, 0.9, 2.3, 0.1];
    let perfect = loss_value(&target, &target, &LossConfig::default());

    // pred = t̄ + 0.1 + t̃ + √3·u with u ⟂ t̃, ‖u‖ = ‖t̃‖, |√3·u| < 0.1:
    // R = 1/2 and pred − target = 0.1 + √3·u > 0, so mean|pred − target| = 0.1.
    let c = [0.01, -0.01, 0.01, -0.01];
    let u = [0.01, 0.01, -0.01, -0.01];
    let t: Vec<f64> = c.iter().map(|v| 2.0 + v).collect();
    let p: Vec<f64> = c.iter().zip(&u).map(|(c, u)| 2.1 + c + 3f64.sqrt() * u).collect();
    let cfg = LossConfig {
        epsilon_denominator: 1e-300,
        ..LossConfig::default()
    };
    let example = loss_value(&p, &t, &cfg);
    outcome(
        (perfect + 1.0).abs() <= 1e-6 && (example + 0.48).abs() <= 1e-12,
        format!(
            "pred == target gives {perfect:.9} (-1 ± 1e-6), R=0.5 L1=0.1 α=0.2 gives {example:.15} (|+0.48| {:.1e} <= 1e-12)",
            (example + 0.48).abs()
        ),
    )
}

fn determinism_and_round_trips(ds: &Dataset) -> Outcome {
    let run = || train_steps(ds, true, 5, 10);
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let trajectory = a.loss_history().len() == 10 && bits(a.loss_history()) == bits(b.loss_history());

    let rec = ds.split(Split::Train)[0];
    let file = SignalFile::from_time_major(rec.subject_id as u32, rec.sample_rate_hz, &rec.eeg).unwrap();
    let bytes = file.encode();
    let back = SignalFile::decode(&bytes).unwrap();
    let eegr = back.encode() == bytes && bits(back.to_time_major().data()) == bits(rec.eeg.data());

    let ck = a.checkpoint().unwrap().encode().unwrap();
    let restored = Trainer::from_checkpoint(&Checkpoint::decode(&ck).unwrap()).unwrap();
    let checkpoint = restored.checkpoint().unwrap().encode().unwrap() == ck;
    outcome(
        trajectory && eegr && checkpoint,
        format!("10-step loss trajectory bitwise {trajectory}, EEGR bitwise {eegr}, checkpoint bitwise {checkpoint}"),
    )
}

fn scheduler() -> Outcome {
    let cfg = OptimConfig::default();
    let first = scheduler_lr(&cfg, 0);
    let later = scheduler_lr(&cfg, cfg.decay_every_epochs);
    outcome(
        first == 0.0005 && later == 0.00045,
        format!("epoch 0 -> {first:e}, epoch {} -> {later:e}", cfg.decay_every_epochs),
    )
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let ds = synthetic();
    let criteria: Vec<Criterion> = vec![
        ("gradient_fidelity", Box::new(gradient_fidelity)),
        ("pearson_oracle", Box::new(pearson_agreement)),
        ("learnability", Box::new(|| learnability(&ds))),
        ("conditioner_ablation", Box::new(|| conditioner_ablation(&ds))),
        ("pre_ln_identity", Box::new(pre_ln_identity)),
        ("chunked_inference_identity", Box::new(|| chunk_identity(&ds))),
        ("loss_formula", Box::new(loss_formula)),
        ("determinism_and_round_trips", Box::new(|| determinism_and_round_trips(&ds))),
        ("scheduler", Box::new(scheduler)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = check();
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
