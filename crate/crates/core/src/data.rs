//! Recording files, dataset manifests, random cropping and synthetic data.
//!
//! # EEGR layout
//!
//! All integers little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "EEGR"
//!      4     4  version (u32, = 1)
//!      8     4  subject_id (u32)
//!     12     4  sample_rate (u32)
//!     16     4  n_channels (u32)
//!     20     4  n_samples (u32)
//!     24     …  n_channels · n_samples f32, channel-major
//! ```
//!
//! Envelopes are stored as single-channel files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EEGR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// One EEGR file: `n_channels` signals of `n_samples` each.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalFile {
    pub subject_id: u32,
    pub sample_rate_hz: u32,
    pub n_channels: usize,
    pub n_samples: usize,
    /// Channel-major samples.
    pub data: Vec<f32>,
}

impl SignalFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.subject_id,
            self.sample_rate_hz,
            self.n_channels as u32,
            self.n_samples as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            offset: offset as u64,
            message,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fail(
                bytes.len(),
                format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let version = word(1);
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let (subject_id, sample_rate_hz) = (word(2), word(3));
        let (n_channels, n_samples) = (word(4) as usize, word(5) as usize);
        if n_channels == 0 || n_samples == 0 {
            return Err(fail(16, "zero channels or samples".into()));
        }
        let payload = n_channels as u64 * n_samples as u64 * 4;
        let have = (bytes.len() - HEADER_LEN) as u64;
        if have < payload {
            return Err(fail(
                bytes.len(),
                format!("truncated payload: header declares {payload} bytes, found {have}"),
            ));
        }
        if have > payload {
            return Err(fail(
                HEADER_LEN + payload as usize,
                format!("{} trailing bytes after payload", have - payload),
            ));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(SignalFile {
            subject_id,
            sample_rate_hz,
            n_channels,
            n_samples,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Time-major `[n_samples, n_channels]` tensor.
    pub fn to_time_major(&self) -> Tensor {
        let (c, t) = (self.n_channels, self.n_samples);
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            for s in 0..t {
                out[s * c + ch] = self.data[ch * t + s] as f64;
            }
        }
        Tensor::new([t, c], out).expect("shape matches data")
    }

    /// From a time-major `[time, channels]` (or `[time]`) tensor; values are
    /// rounded to f32.
    pub fn from_time_major(subject_id: u32, sample_rate_hz: u32, x: &Tensor) -> Result<Self> {
        let (t, c) = match x.shape() {
            [t] => (*t, 1),
            [t, c] => (*t, *c),
            s => return Err(Error::dim(format!("expected [time] or [time, channels], got {s:?}"))),
        };
        let src = x.data();
        let mut data = vec![0f32; c * t];
        for s in 0..t {
            for ch in 0..c {
                data[ch * t + s] = src[s * c + ch] as f32;
            }
        }
        Ok(SignalFile {
            subject_id,
            sample_rate_hz,
            n_channels: c,
            n_samples: t,
            data,
        })
    }
}

/// EEG `[time, channels]` paired with its envelope `[time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordingPair {
    pub subject_id: usize,
    pub eeg: Tensor,
    pub envelope: Tensor,
    pub sample_rate_hz: u32,
}

impl RecordingPair {
    pub fn new(subject_id: usize, eeg: Tensor, envelope: Tensor, sample_rate_hz: u32) -> Result<Self> {
        if eeg.rank() != 2 || envelope.rank() != 1 || eeg.shape()[0] != envelope.shape()[0] {
            return Err(Error::dim(format!(
                "eeg {:?} and envelope {:?} are not time-aligned",
                eeg.shape(),
                envelope.shape()
            )));
        }
        Ok(RecordingPair {
            subject_id,
            eeg,
            envelope,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.envelope.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.eeg.shape()[1]
    }
}

pub fn write_recording(eeg_path: &Path, envelope_path: &Path, rec: &RecordingPair) -> Result<()> {
    let sid = rec.subject_id as u32;
    SignalFile::from_time_major(sid, rec.sample_rate_hz, &rec.eeg)?.write(eeg_path)?;
    SignalFile::from_time_major(sid, rec.sample_rate_hz, &rec.envelope)?.write(envelope_path)
}

pub fn read_recording(eeg_path: &Path, envelope_path: &Path) -> Result<RecordingPair> {
    let eeg = SignalFile::read(eeg_path)?;
    let env = SignalFile::read(envelope_path)?;
    if env.n_channels != 1 {
        return Err(Error::Format {
            offset: 16,
            message: format!(
                "{}: envelope file has {} channels",
                envelope_path.display(),
                env.n_channels
            ),
        });
    }
    if eeg.subject_id != env.subject_id || eeg.sample_rate_hz != env.sample_rate_hz {
        return Err(Error::config(format!(
            "{} and {} disagree on subject or sample rate",
            eeg_path.display(),
            envelope_path.display()
        )));
    }
    let envelope = env.to_time_major().reshape([env.n_samples])?;
    RecordingPair::new(
        eeg.subject_id as usize,
        eeg.to_time_major(),
        envelope,
        eeg.sample_rate_hz,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Cycle used for generated data: recordings 0, 1, 2 of a subject go to
    /// train, val, test, then repeat.
    pub fn for_index(i: usize) -> Split {
        [Split::Train, Split::Val, Split::Test][i % 3]
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub eeg_path: PathBuf,
    pub envelope_path: PathBuf,
    pub subject_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Recordings loaded from a manifest, tagged with their splits.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub recordings: Vec<(RecordingPair, Split)>,
}

impl Dataset {
    /// Loads every entry; relative paths resolve against the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut recordings = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let rec = read_recording(&base.join(&e.eeg_path), &base.join(&e.envelope_path))?;
            if rec.subject_id != e.subject_id {
                return Err(Error::config(format!(
                    "{}: file says subject {}, manifest says {}",
                    e.eeg_path.display(),
                    rec.subject_id,
                    e.subject_id
                )));
            }
            recordings.push((rec, e.split));
        }
        let ds = Dataset { recordings };
        ds.check_dense_subjects()?;
        Ok(ds)
    }

    pub fn from_recordings(recordings: Vec<(RecordingPair, Split)>) -> Result<Self> {
        let ds = Dataset { recordings };
        ds.check_dense_subjects()?;
        Ok(ds)
    }

    fn check_dense_subjects(&self) -> Result<()> {
        let n = self.n_subjects();
        let mut seen = vec![false; n];
        for (r, _) in &self.recordings {
            seen[r.subject_id] = true;
        }
        match seen.iter().position(|s| !s) {
            Some(missing) => Err(Error::config(format!(
                "subject ids must be dense 0..{n}; {missing} is missing"
            ))),
            None => Ok(()),
        }
    }

    /// One more than the largest subject id.
    pub fn n_subjects(&self) -> usize {
        self.recordings
            .iter()
            .map(|(r, _)| r.subject_id + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> Vec<&RecordingPair> {
        self.recordings
            .iter()
            .filter(|(_, s)| *s == split)
            .map(|(r, _)| r)
            .collect()
    }
}

/// Aligned EEG and envelope windows cut at the same offset.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub offset: usize,
    pub eeg: Tensor,
    pub envelope: Tensor,
}

/// Cuts `segment` samples starting at a uniformly drawn offset.
pub fn random_crop(rec: &RecordingPair, segment: usize, rng: &mut ChaCha8Rng) -> Result<Crop> {
    if segment == 0 || rec.len() < segment {
        return Err(Error::TooShort {
            len: rec.len(),
            needed: segment.max(1),
        });
    }
    let offset = rng.random_range(0..=rec.len() - segment);
    crop_at(rec, offset, segment)
}

pub fn crop_at(rec: &RecordingPair, offset: usize, segment: usize) -> Result<Crop> {
    Ok(Crop {
        offset,
        eeg: rec.eeg.slice_axis(0, offset, offset + segment)?,
        envelope: rec.envelope.slice_axis(0, offset, offset + segment)?,
    })
}

/// Parameters of the synthetic generator. Weights and filters are drawn
/// from the seed unless given explicitly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub recordings_per_subject: usize,
    pub duration_seconds: f64,
    pub channels: usize,
    pub sample_rate_hz: u32,
    pub noise_std: f64,
    pub fir_len: usize,
    /// Share of each subject's spatial pattern common to all subjects, in [0, 1].
    pub shared_pattern: f64,
    pub seed: u64,
    /// `[n_subjects][channels]` mixing weights.
    pub subject_weights: Option<Vec<Vec<f64>>>,
    /// `[n_subjects][fir_len]` causal filters applied to the envelope.
    pub subject_firs: Option<Vec<Vec<f64>>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 4,
            recordings_per_subject: 2,
            duration_seconds: 60.0,
            channels: 64,
            sample_rate_hz: 64,
            noise_std: 0.1,
            fir_len: 8,
            shared_pattern: 1.0,
            seed: 0,
            subject_weights: None,
            subject_firs: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.recordings_per_subject == 0 || self.channels == 0 {
            return Err(Error::config("subjects, recordings and channels must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.shared_pattern) {
            return Err(Error::config("shared_pattern must be in [0, 1]"));
        }
        if self.fir_len == 0 {
            return Err(Error::config("fir_len must be >= 1"));
        }
        self.n_samples()?;
        if let Some(w) = &self.subject_weights {
            if w.len() != self.n_subjects || w.iter().any(|r| r.len() != self.channels) {
                return Err(Error::config("subject_weights must be [n_subjects][channels]"));
            }
        }
        if let Some(f) = &self.subject_firs {
            if f.len() != self.n_subjects || f.iter().any(|r| r.is_empty()) {
                return Err(Error::config("subject_firs must be [n_subjects][>= 1 taps]"));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> Result<usize> {
        let n = (self.duration_seconds * self.sample_rate_hz as f64).round();
        if !(n >= 2.0) {
            return Err(Error::config(format!(
                "{} s at {} Hz gives fewer than 2 samples",
                self.duration_seconds, self.sample_rate_hz
            )));
        }
        Ok(n as usize)
    }
}

/// Generated recordings with the mixing that produced them.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub weights: Vec<Vec<f64>>,
    pub firs: Vec<Vec<f64>>,
    /// Subject-major: recording `r` of subject `s` is at `s · recordings_per_subject + r`.
    pub recordings: Vec<RecordingPair>,
}

/// Echo of the generating spec with the realized weights and filters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub spec: SyntheticSpec,
    pub weights: Vec<Vec<f64>>,
    pub firs: Vec<Vec<f64>>,
}

// Hann window, scaled to unit energy so filtered white noise keeps unit variance.
fn smoothing_kernel(len: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..len)
        .map(|i| {
            let x = std::f64::consts::PI * (i + 1) as f64 / (len + 1) as f64;
            x.sin().powi(2)
        })
        .collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.into_iter().map(|v| v / norm).collect()
}

const SMOOTHING_LEN: usize = 9;

/// Nonnegative band-limited envelope: rectified low-passed white noise.
fn synth_envelope(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = smoothing_kernel(SMOOTHING_LEN);
    let raw: Vec<f64> = (0..n + k.len())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    (0..n)
        .map(|t| {
            let s: f64 = k.iter().enumerate().map(|(j, w)| w * raw[t + j]).sum();
            s.abs()
        })
        .collect()
}

// Unit tap at a random delay plus small random taps, unit energy.
fn random_fir(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut f: Vec<f64> = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            0.15 * z
        })
        .collect();
    let main = rng.random_range(0..len);
    f[main] = 1.0;
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    f.into_iter().map(|v| v / norm).collect()
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates subject-specific EEG from synthetic envelopes:
/// `eeg[t, c] = w_s[c] · (fir_s ∗ env)[t] + noise`.
///
/// Values are rounded to f32 so recordings survive an EEGR round trip unchanged.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Data);
    let n = spec.n_samples()?;
    let weights = match &spec.subject_weights {
        Some(w) => w.clone(),
        None => {
            let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..spec.channels).map(|_| StandardNormal.sample(rng)).collect()
            };
            let common = gaussian(&mut rng);
            let (a, b) = (spec.shared_pattern, (1.0 - spec.shared_pattern.powi(2)).sqrt());
            (0..spec.n_subjects)
                .map(|_| {
                    let own = gaussian(&mut rng);
                    common.iter().zip(own).map(|(c, o)| a * c + b * o).collect()
                })
                .collect()
        }
    };
    let firs = match &spec.subject_firs {
        Some(f) => f.clone(),
        None => (0..spec.n_subjects)
            .map(|_| random_fir(spec.fir_len, &mut rng))
            .collect(),
    };
    let mut recordings = Vec::with_capacity(spec.n_subjects * spec.recordings_per_subject);
    for s in 0..spec.n_subjects {
        let fir = &firs[s];
        for _ in 0..spec.recordings_per_subject {
            // warm-up so the causal filter has history at t = 0
            let warm = fir.len() - 1;
            let env_full = synth_envelope(n + warm, &mut rng);
            let filtered: Vec<f64> = (0..n)
                .map(|t| {
                    fir.iter()
                        .enumerate()
                        .map(|(k, h)| h * env_full[t + warm - k])
                        .sum()
                })
                .collect();
            let mut eeg = Vec::with_capacity(n * spec.channels);
            for &f in &filtered {
                for &w in &weights[s] {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    eeg.push(round_f32(w * f + spec.noise_std * noise));
                }
            }
            let envelope: Vec<f64> = env_full[warm..].iter().map(|&v| round_f32(v)).collect();
            recordings.push(RecordingPair::new(
                s,
                Tensor::new([n, spec.channels], eeg)?,
                Tensor::from_vec(envelope),
                spec.sample_rate_hz,
            )?);
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        weights,
        firs,
        recordings,
    })
}

impl SyntheticDataset {
    pub fn truth(&self) -> SyntheticTruth {
        SyntheticTruth {
            spec: self.spec.clone(),
            weights: self.weights.clone(),
            firs: self.firs.clone(),
        }
    }

    /// Split assignment cycling train, val, test over each subject's recordings.
    pub fn dataset(&self) -> Dataset {
        let per = self.spec.recordings_per_subject;
        Dataset {
            recordings: self
                .recordings
                .iter()
                .enumerate()
                .map(|(i, r)| (r.clone(), Split::for_index(i % per)))
                .collect(),
        }
    }

    /// Writes EEGR files, `manifest.json` and `synthetic_spec.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let per = self.spec.recordings_per_subject;
        let mut manifest = Manifest::default();
        for (i, rec) in self.recordings.iter().enumerate() {
            let (s, r) = (i / per, i % per);
            let eeg = PathBuf::from(format!("s{s:03}_r{r:03}_eeg.eegr"));
            let env = PathBuf::from(format!("s{s:03}_r{r:03}_env.eegr"));
            write_recording(&dir.join(&eeg), &dir.join(&env), rec)?;
            manifest.entries.push(ManifestEntry {
                eeg_path: eeg,
                envelope_path: env,
                subject_id: s,
                split: Split::for_index(r),
            });
        }
        manifest.save(&dir.join("manifest.json"))?;
        let truth = serde_json::to_string_pretty(&self.truth())?;
        let path = dir.join("synthetic_spec.json");
        fs::write(&path, truth).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_subjects: 2,
            recordings_per_subject: 2,
            duration_seconds: 2.0,
            channels: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn signal_round_trip_is_bitwise() {
        let sig = SignalFile {
            subject_id: 3,
            sample_rate_hz: 64,
            n_channels: 2,
            n_samples: 3,
            data: vec![1.5, -0.0, f32::MIN_POSITIVE, 7.25, 1e-30, -3.0],
        };
        let bytes = sig.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 24);
        let back = SignalFile::decode(&bytes).unwrap();
        assert_eq!(back.subject_id, 3);
        let bits = |s: &SignalFile| s.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&sig));
    }

    #[test]
    fn header_layout_is_fixed() {
        let sig = SignalFile {
            subject_id: 0x0102_0304,
            sample_rate_hz: 64,
            n_channels: 1,
            n_samples: 1,
            data: vec![1.0],
        };
        let b = sig.encode();
        assert_eq!(&b[..4], b"EEGR");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[4, 3, 2, 1]);
        assert_eq!(&b[12..16], &[64, 0, 0, 0]);
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
    }

    #[test]
    fn format_errors() {
        let sig = SignalFile {
            subject_id: 0,
            sample_rate_hz: 64,
            n_channels: 64,
            n_samples: 320,
            data: vec![0.5; 64 * 320],
        };
        let mut b = sig.encode();
        // 64 · 320 · 4
        assert_eq!(b.len() - HEADER_LEN, 81920);

        let mut bad = b.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(SignalFile::decode(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(SignalFile::decode(&bad), Err(Error::Format { offset: 4, .. })));

        b.truncate(b.len() - 1);
        let err = SignalFile::decode(&b).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == (HEADER_LEN + 81919) as u64));
        assert!(err.to_string().contains("81920"));

        assert!(matches!(SignalFile::decode(&b[..10]), Err(Error::Format { offset: 10, .. })));
    }

    #[test]
    fn crop_examples() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let rec = &ds.recordings[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let whole = random_crop(rec, rec.len(), &mut rng).unwrap();
        assert_eq!(whole.offset, 0);
        assert_eq!(whole.eeg, rec.eeg);

        for _ in 0..50 {
            let c = random_crop(rec, 40, &mut rng).unwrap();
            assert_eq!(c.eeg.shape(), &[40, 4]);
            for i in 0..40 {
                assert_eq!(c.envelope.data()[i], rec.envelope.data()[c.offset + i]);
                assert_eq!(c.eeg.at(&[i, 2]), rec.eeg.at(&[c.offset + i, 2]));
            }
        }
        assert!(matches!(
            random_crop(rec, rec.len() + 1, &mut rng),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // chi-square over 11 possible offsets, 10^4 draws; 10 dof, p = 0.001 → 29.6
        let spec = SyntheticSpec { duration_seconds: 1.0, ..small_spec() };
        let ds = generate_synthetic(&spec).unwrap();
        let rec = &ds.recordings[0];
        let seg = rec.len() - 10;
        let mut counts = [0usize; 11];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        for _ in 0..draws {
            counts[random_crop(rec, seg, &mut rng).unwrap().offset] += 1;
        }
        let expected = draws as f64 / 11.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 29.6, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn noiseless_identity_mixing_copies_envelope() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            subject_weights: Some(vec![vec![1.0; 4]; 2]),
            subject_firs: Some(vec![vec![1.0]; 2]),
            ..small_spec()
        };
        let ds = generate_synthetic(&spec).unwrap();
        for rec in &ds.recordings {
            for t in 0..rec.len() {
                for c in 0..4 {
                    assert_eq!(rec.eeg.at(&[t, c]), rec.envelope.data()[t]);
                }
            }
            let ch0: Vec<f64> = (0..rec.len()).map(|t| rec.eeg.at(&[t, 0])).collect();
            let r = crate::objective::pearson(&ch0, rec.envelope.data(), 1e-8).unwrap();
            assert!((r - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic_and_nonnegative() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a.recordings, b.recordings);
        assert_eq!(a.firs, b.firs);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small_spec() }).unwrap();
        assert_ne!(a.recordings, c.recordings);
        for r in &a.recordings {
            assert!(r.envelope.data().iter().all(|&v| v >= 0.0));
        }
        for f in &a.firs {
            assert_eq!(f.len(), 8);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(generate_synthetic(&SyntheticSpec { noise_std: -1.0, ..small_spec() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { fir_len: 0, ..small_spec() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            subject_weights: Some(vec![vec![1.0; 3]; 2]),
            ..small_spec()
        })
        .is_err());
    }

    #[test]
    fn dataset_write_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small_spec()).unwrap();
        let manifest = ds.write(dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        assert_eq!(manifest.entries[1].split, Split::Val);
        let loaded = Dataset::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.n_subjects(), 2);
        for ((rec, split), (orig, want)) in loaded.recordings.iter().zip(&ds.dataset().recordings) {
            assert_eq!(rec, orig);
            assert_eq!(split, want);
        }
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        let e = &json["entries"][0];
        for key in ["eeg_path", "envelope_path", "subject_id", "split"] {
            assert!(e.get(key).is_some(), "{key}");
        }
        assert_eq!(e["split"], "train");
    }

    #[test]
    fn sparse_subject_ids_rejected() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let mut rec = ds.recordings[0].clone();
        rec.subject_id = 2;
        assert!(Dataset::from_recordings(vec![(rec, Split::Train)]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn recording_round_trip(t in 1usize..50, c in 1usize..6, sid in 0usize..1000, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eeg: Vec<f64> = (0..t * c).map(|_| (rng.random::<f32>() * 10.0 - 5.0) as f64).collect();
            let env: Vec<f64> = (0..t).map(|_| rng.random::<f32>() as f64).collect();
            let rec = RecordingPair::new(sid, Tensor::new([t, c], eeg).unwrap(), Tensor::from_vec(env), 64).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let (a, b) = (dir.path().join("e.eegr"), dir.path().join("v.eegr"));
            write_recording(&a, &b, &rec).unwrap();
            prop_assert_eq!(read_recording(&a, &b).unwrap(), rec);
        }
    }
}
