//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the tape's backward rules it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{DecoderModel, ModelConfig, PreLnFftBlock};
use crate::nn::{Conv1dLayer, EmbeddingTable, Graph, LayerNormLayer, Linear, MultiHeadAttention, ParamStore};
use crate::objective::{total_loss, LossConfig};
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// Step for central differences.
pub const STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute terms. Central
/// differences carry roundoff of about `ε·|L| / h` (≈ 1e-10 here), so exact
/// zeros such as attention key biases need a floor well above that.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

/// Paired analytic and numeric gradients, flattened over all checked inputs.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn len(&self) -> usize {
        self.analytic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.analytic.is_empty()
    }

    pub fn max_relative_error(&self) -> f64 {
        max_relative_error(self)
    }
}

/// `|a − n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

pub fn max_relative_error(r: &GradCheck) -> f64 {
    r.analytic
        .iter()
        .zip(&r.numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Reduces an arbitrary output to a scalar with fixed pseudo-random weights,
/// so every output element contributes a distinct sensitivity.
pub fn project_to_scalar(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).numel();
    if n == 1 {
        return Ok(tape.sum_all(out));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ n as u64);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum_all(p))
}

/// Checks `f` with respect to every element of every input.
#[allow(clippy::needless_range_loop)]
pub fn check<F>(inputs: &[Tensor], f: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| tape.leaf(x.clone().with_requires_grad(want_grad)))
            .collect();
        let out = f(&mut tape, &vars).expect("function under check failed");
        let loss = project_to_scalar(&mut tape, out).expect("projection");
        let value = tape.value(loss).data()[0];
        if !want_grad {
            return (value, Vec::new());
        }
        let g = tape.backward(loss).expect("scalar loss");
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| {
                g.get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; x.numel()])
            })
            .collect();
        (value, grads)
    };

    let (_, grads) = eval(inputs, true);
    let mut report = GradCheck::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let (up, _) = eval(&work, false);
            work[i].data_mut()[j] = orig - STEP;
            let (down, _) = eval(&work, false);
            work[i].data_mut()[j] = orig;
            report.analytic.push(g[j]);
            report.numeric.push((up - down) / (2.0 * STEP));
        }
    }
    report
}

/// Checks the gradient of a scalar loss with respect to every parameter in
/// `params`. `loss` must rebuild the graph from the store on each call and
/// return the tape with its loss node.
#[allow(clippy::needless_range_loop)]
pub fn check_params<F>(params: &mut ParamStore, loss: F) -> Result<GradCheck>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    params.zero_grad();
    let (tape, l) = loss(params)?;
    let g = tape.backward(l)?;
    params.accumulate_grads(&tape, &g)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let value = |p: &ParamStore| -> Result<f64> {
        let (tape, l) = loss(p)?;
        Ok(tape.value(l).data()[0])
    };
    let mut report = GradCheck::default();
    for (pi, ga) in analytic.iter().enumerate() {
        for j in 0..ga.len() {
            let orig = params.tensor_at(pi).data()[j];
            params.tensor_at_mut(pi).data_mut()[j] = orig + STEP;
            let up = value(params)?;
            params.tensor_at_mut(pi).data_mut()[j] = orig - STEP;
            let down = value(params)?;
            params.tensor_at_mut(pi).data_mut()[j] = orig;
            report.analytic.push(ga[j]);
            report.numeric.push((up - down) / (2.0 * STEP));
        }
    }
    params.zero_grad();
    Ok(report)
}

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Central differences are meaningless across a relu/abs kink, so suite
/// points are redrawn until every kink input is at least this far from 0.
pub const KINK_MARGIN: f64 = 1e-3;

const MAX_DRAWS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
    /// Points rejected for lying too close to a kink.
    pub redraws: usize,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

type Forward = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
type Case = (ParamStore, Tensor, Forward);

fn scalar_loss(p: &ParamStore, input: ParamId, f: &Forward) -> Result<(Tape, Var)> {
    let mut g = Graph::new(p);
    let x = g.param(input);
    let y = f(&mut g, x)?;
    let l = project_to_scalar(&mut g.tape, y)?;
    Ok((g.into_tape(), l))
}

// The input is registered as one more parameter so a single pass covers
// both parameter and input gradients.
fn layer_row(name: &str, rng: &mut ChaCha8Rng, build: impl Fn(&mut ChaCha8Rng) -> Result<Case>) -> Result<SuiteRow> {
    for redraws in 0..MAX_DRAWS {
        let (mut store, input, f) = build(rng)?;
        let input_id = store.register("input", input)?;
        let (tape, _) = scalar_loss(&store, input_id, &f)?;
        if tape.kink_margin().is_some_and(|m| m < KINK_MARGIN) {
            continue;
        }
        let report = check_params(&mut store, |p| scalar_loss(p, input_id, &f))?;
        return Ok(SuiteRow {
            name: name.to_string(),
            checked: report.len(),
            max_relative_error: report.max_relative_error(),
            redraws,
        });
    }
    Err(crate::Error::contract(format!(
        "{name}: no point at least {KINK_MARGIN} from a kink in {MAX_DRAWS} draws"
    )))
}

/// Finite-difference check of every layer, both block variants, the full
/// model (2 blocks, hidden 16, 2 heads, conditioner on) and the loss.
pub fn suite(seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut rows = Vec::new();

    rows.push(layer_row("linear", rng, |r| {
        let mut s = ParamStore::new();
        let l = Linear::new(&mut s, "linear", 4, 3, r)?;
        Ok((s, random_tensor(&[2, 5, 4], r), Box::new(move |g, x| l.forward(g, x))))
    })?);

    rows.push(layer_row("conv1d", rng, |r| {
        let mut s = ParamStore::new();
        let l = Conv1dLayer::new(&mut s, "conv1d", 4, 5, 3, r)?;
        Ok((s, random_tensor(&[2, 6, 4], r), Box::new(move |g, x| l.forward(g, x))))
    })?);

    rows.push(layer_row("layer_norm", rng, |r| {
        let mut s = ParamStore::new();
        let l = LayerNormLayer::new(&mut s, "layer_norm", 4)?;
        for (_, t) in s.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.5..0.5));
        }
        Ok((s, random_tensor(&[2, 5, 4], r), Box::new(move |g, x| l.forward(g, x))))
    })?);

    rows.push(layer_row("attention", rng, |r| {
        let mut s = ParamStore::new();
        let l = MultiHeadAttention::new(&mut s, "attention", 4, 2, r)?;
        Ok((s, random_tensor(&[2, 5, 4], r), Box::new(move |g, x| l.forward(g, x))))
    })?);

    rows.push(layer_row("embedding", rng, |r| {
        let mut s = ParamStore::new();
        let l = EmbeddingTable::new(&mut s, "embedding", 3, 4, r)?;
        let f: Forward = Box::new(move |g, x| {
            let e = l.lookup(g, &[2, 0, 2])?;
            g.tape.mul(e, x)
        });
        Ok((s, random_tensor(&[3, 4], r), f))
    })?);

    let block_cfg = ModelConfig {
        hidden_dim: 8,
        n_heads: 2,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    };
    for (name, pre_ln) in [("fft_block_pre_ln", true), ("fft_block_post_ln", false)] {
        rows.push(layer_row(name, rng, |r| {
            let mut s = ParamStore::new();
            let b = PreLnFftBlock::new(&mut s, "block", &block_cfg, r)?;
            let f: Forward = Box::new(move |g, x| b.forward(g, x, pre_ln, 0.0));
            Ok((s, random_tensor(&[2, 5, 8], r), f))
        })?);
    }

    let model_cfg = ModelConfig {
        in_channels: 4,
        hidden_dim: 16,
        n_blocks: 2,
        n_heads: 2,
        dropout_rate: 0.0,
        n_subjects: 3,
        use_conditioner: true,
        ..ModelConfig::default()
    };
    rows.push(layer_row("model_2_blocks", rng, |r| {
        let model = DecoderModel::with_rng(model_cfg.clone(), r)?;
        let s = model.params().clone();
        let f: Forward = Box::new(move |g, x| model.forward(g, x, Some(&[1, 2])));
        Ok((s, random_tensor(&[2, 6, 4], r), f))
    })?);

    rows.push(layer_row("loss", rng, |r| {
        let target = random_tensor(&[2, 8], r);
        let f: Forward = Box::new(move |g, x| {
            let t = g.tape.constant(target.clone());
            total_loss(&mut g.tape, x, t, &LossConfig::default())
        });
        Ok((ParamStore::new(), random_tensor(&[2, 8], r), f))
    })?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sqrt's backward is correct; a mismatched function is not: compare
        // d/dx x² evaluated through mul against a deliberately offset value.
        let x = Tensor::from_vec(vec![1.5]);
        let mut r = check(&[x], |t, v| t.mul(v[0], v[0]));
        assert!(r.max_relative_error() < 1e-8);
        r.analytic[0] += 1e-2;
        assert!(r.max_relative_error() > 1e-4);
    }

    #[test]
    fn suite_covers_every_layer_and_passes() {
        let rows = suite(0).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        for want in ["linear", "conv1d", "layer_norm", "attention", "embedding", "model_2_blocks", "loss"] {
            assert!(names.contains(&want), "{want}");
        }
        for r in &rows {
            assert!(r.checked > 0);
            assert!(r.passed(), "{r:?}");
        }
    }
}
