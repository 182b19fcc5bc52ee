//! Reference implementations used as independent oracles.

#![allow(dead_code)]

use std::ops::Range;

use envdecode::data::RecordingPair;
use nalgebra::{DMatrix, DVector};

/// Ridge-regularized least-squares decoder over EEG lags:
/// `y[t] = b + Σ_{lag ∈ lags, c} w[lag, c] · eeg[t + lag, c]`, zero outside the recording.
pub struct LagRegression {
    pub lags: Range<isize>,
    pub coef: DVector<f64>,
}

fn design(rec: &RecordingPair, lags: &Range<isize>) -> DMatrix<f64> {
    let (t_len, c) = (rec.len() as isize, rec.channels());
    let n_lags = lags.len();
    let eeg = rec.eeg.data();
    DMatrix::from_fn(t_len as usize, n_lags * c + 1, |t, j| {
        if j == n_lags * c {
            return 1.0;
        }
        let (lag, ch) = (lags.start + (j / c) as isize, j % c);
        let src = t as isize + lag;
        if (0..t_len).contains(&src) {
            eeg[src as usize * c + ch]
        } else {
            0.0
        }
    })
}

impl LagRegression {
    pub fn fit(recs: &[&RecordingPair], lags: Range<isize>, ridge: f64) -> Self {
        let p = lags.len() * recs[0].channels() + 1;
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        for rec in recs {
            let x = design(rec, &lags);
            let y = DVector::from_column_slice(rec.envelope.data());
            xtx += x.transpose() * &x;
            xty += x.transpose() * y;
        }
        for i in 0..p - 1 {
            xtx[(i, i)] += ridge;
        }
        let coef = xtx.cholesky().expect("normal equations are SPD").solve(&xty);
        LagRegression { lags, coef }
    }

    pub fn predict(&self, rec: &RecordingPair) -> Vec<f64> {
        (design(rec, &self.lags) * &self.coef).as_slice().to_vec()
    }
}

/// Pearson correlation from nalgebra vector algebra with the library's
/// denominator guard: `⟨x̃, ỹ⟩ / sqrt(‖x̃‖²‖ỹ‖² + eps)` on centered vectors.
pub fn pearson_oracle(x: &[f64], y: &[f64], eps: f64) -> f64 {
    let x = DVector::from_column_slice(x);
    let y = DVector::from_column_slice(y);
    let xc = x.add_scalar(-x.mean());
    let yc = y.add_scalar(-y.mean());
    xc.dot(&yc) / (xc.norm_squared() * yc.norm_squared() + eps).sqrt()
}
