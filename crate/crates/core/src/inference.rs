//! Chunked whole-recording inference and per-subject evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RecordingPair, Split};
use crate::error::{Error, Result};
use crate::model::DecoderModel;
use crate::objective::{aggregate_report, pearson, EvalReport};
use crate::tensor::Tensor;

/// Anything mapping `[batch, time, channels]` EEG to `[batch, time]` envelopes.
pub trait Decoder {
    fn decode(&self, eeg: &Tensor, subject_ids: &[usize]) -> Result<Tensor>;
}

impl Decoder for DecoderModel {
    fn decode(&self, eeg: &Tensor, subject_ids: &[usize]) -> Result<Tensor> {
        let ids = self.config().use_conditioner.then_some(subject_ids);
        self.predict(eeg, ids)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailPolicy {
    #[default]
    ProcessShortTail,
    DropTail,
}

impl std::str::FromStr for TailPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "process_short_tail" => Ok(TailPolicy::ProcessShortTail),
            "drop_tail" => Ok(TailPolicy::DropTail),
            other => Err(Error::config(format!("unknown tail policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunk_samples: usize,
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
    pub tail_policy: TailPolicy,
}

impl ChunkPlan {
    pub fn covered(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Back-to-back chunks from offset 0. A short final chunk is kept only under
/// [`TailPolicy::ProcessShortTail`] and only if it has at least 2 samples.
pub fn plan_chunks(total_samples: usize, chunk_samples: usize, tail_policy: TailPolicy) -> Result<ChunkPlan> {
    if chunk_samples < 2 {
        return Err(Error::config(format!("chunk_samples must be >= 2, got {chunk_samples}")));
    }
    if total_samples < 2 {
        return Err(Error::TooShort {
            len: total_samples,
            needed: 2,
        });
    }
    let full = total_samples / chunk_samples;
    let mut offsets: Vec<usize> = (0..full).map(|i| i * chunk_samples).collect();
    let mut lengths = vec![chunk_samples; full];
    let tail = total_samples - full * chunk_samples;
    if tail_policy == TailPolicy::ProcessShortTail && tail >= 2 {
        offsets.push(full * chunk_samples);
        lengths.push(tail);
    }
    Ok(ChunkPlan {
        chunk_samples,
        offsets,
        lengths,
        tail_policy,
    })
}

/// Runs each chunk of `eeg: [time, channels]` independently and
/// concatenates the outputs. Output length is [`ChunkPlan::covered`].
pub fn infer_eeg<D: Decoder + ?Sized>(decoder: &D, eeg: &Tensor, subject_id: usize, plan: &ChunkPlan) -> Result<Tensor> {
    if eeg.rank() != 2 {
        return Err(Error::dim(format!("expected [time, channels], got {:?}", eeg.shape())));
    }
    if plan.offsets.is_empty() {
        return Err(Error::contract("empty chunk plan"));
    }
    let (time, channels) = (eeg.shape()[0], eeg.shape()[1]);
    let end = plan.offsets.last().unwrap() + plan.lengths.last().unwrap();
    if end > time {
        return Err(Error::contract(format!("plan covers {end} samples, signal has {time}")));
    }
    let mut out = Vec::with_capacity(plan.covered());
    for (&off, &len) in plan.offsets.iter().zip(&plan.lengths) {
        let batch = eeg.slice_axis(0, off, off + len)?.reshape([1, len, channels])?;
        let pred = decoder.decode(&batch, &[subject_id])?;
        out.extend_from_slice(pred.data());
    }
    Ok(Tensor::from_vec(out))
}

pub fn infer_recording<D: Decoder + ?Sized>(decoder: &D, rec: &RecordingPair, plan: &ChunkPlan) -> Result<Tensor> {
    infer_eeg(decoder, &rec.eeg, rec.subject_id, plan)
}

/// Pearson r of each recording's whole predicted envelope against the
/// truth over the covered region, aggregated per subject.
pub fn evaluate_recordings<D: Decoder + ?Sized>(
    decoder: &D,
    recs: &[&RecordingPair],
    chunk_samples: usize,
    tail_policy: TailPolicy,
    eps: f64,
) -> Result<EvalReport> {
    if recs.is_empty() {
        return Err(Error::contract("nothing to evaluate"));
    }
    let mut per_recording = Vec::with_capacity(recs.len());
    for rec in recs {
        let plan = plan_chunks(rec.len(), chunk_samples, tail_policy)?;
        let pred = infer_recording(decoder, rec, &plan)?;
        let truth = &rec.envelope.data()[..pred.numel()];
        per_recording.push((rec.subject_id, pearson(pred.data(), truth, eps)?));
    }
    aggregate_report(&per_recording)
}

pub fn evaluate_split<D: Decoder + ?Sized>(
    decoder: &D,
    dataset: &Dataset,
    split: Split,
    chunk_samples: usize,
    tail_policy: TailPolicy,
    eps: f64,
) -> Result<EvalReport> {
    let recs = dataset.split(split);
    if recs.is_empty() {
        return Err(Error::contract(format!("split {split:?} is empty")));
    }
    evaluate_recordings(decoder, &recs, chunk_samples, tail_policy, eps)
}
