//! Recording ingestion, surrogate-signal synthesis, and sliding-window
//! segmentation.
//!
//! A [`Recording`] is a T×C matrix of normalized amplitudes; [`window`] cuts
//! it into fixed-length, possibly overlapping [`Segment`]s that the encoder
//! consumes. [`synthesize`] produces labeled surrogate recordings whose burst
//! structure differs per class, which is what the desk-scale benchmarks and
//! the residual-allocation checks run on.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("window length {t} exceeds recording length {total}")]
    WindowTooLong { t: usize, total: usize },
    #[error("stride {stride} out of range 1..={t}")]
    BadStride { stride: usize, t: usize },
    #[error("slice count {s} does not divide segment length {t}")]
    SlicesDontDivide { s: usize, t: usize },
    #[error("non-finite sample at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: String, reason: String },
    #[error("{path}: row {row}, column {col}: {reason}")]
    BadValue {
        path: String,
        row: usize,
        col: usize,
        reason: String,
    },
    #[error("{path}: row {row}: expected {expected} channels, found {found}")]
    ChannelMismatch {
        path: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid synthesis config: {0}")]
    BadConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// On-disk encodings understood by [`load_recordings`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    F32Binary,
}

impl fmt::Display for FileFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FileFormat::Csv => write!(f, "csv"),
            FileFormat::F32Binary => write!(f, "f32-binary"),
        }
    }
}

/// A raw multi-channel recording: `samples[t * channels + c]`, row-major T×C.
#[derive(Debug, Clone)]
pub struct Recording {
    pub id: String,
    pub subject_id: String,
    pub samples: Vec<f64>,
    pub steps: usize,
    pub channels: usize,
    pub sample_rate_hz: f64,
    pub label: u32,
}

impl Recording {
    pub fn new(
        id: impl Into<String>,
        subject_id: impl Into<String>,
        samples: Vec<f64>,
        steps: usize,
        channels: usize,
        sample_rate_hz: f64,
        label: u32,
    ) -> Result<Self, SignalError> {
        assert_eq!(samples.len(), steps * channels, "sample buffer size");
        for (i, v) in samples.iter().enumerate() {
            if !v.is_finite() {
                return Err(SignalError::NonFinite {
                    row: i / channels,
                    col: i % channels,
                });
            }
        }
        Ok(Self {
            id: id.into(),
            subject_id: subject_id.into(),
            samples,
            steps,
            channels,
            sample_rate_hz,
            label,
        })
    }

    pub fn sample(&self, t: usize, c: usize) -> f64 {
        self.samples[t * self.channels + c]
    }
}

/// A windowed view of a recording: `values` is row-major t×C, partitioned
/// into `slices` equal temporal slices.
#[derive(Debug, Clone)]
pub struct Segment {
    pub values: Vec<f64>,
    pub len: usize,
    pub channels: usize,
    pub recording_id: String,
    pub start: usize,
    pub label: u32,
    pub slices: usize,
}

impl Segment {
    pub fn slice_len(&self) -> usize {
        self.len / self.slices
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }

    /// Origin string used in token dumps: `<recording id>:<start index>`.
    pub fn origin(&self) -> String {
        format!("{}:{}", self.recording_id, self.start)
    }
}

/// Cut a recording into overlapping windows of length `t` at the given
/// stride. Every window inherits the recording label and records where it
/// came from; `s` fixes the number of temporal slices each window is later
/// split into.
pub fn window(
    recording: &Recording,
    t: usize,
    stride: usize,
    s: usize,
) -> Result<Vec<Segment>, SignalError> {
    if t > recording.steps {
        return Err(SignalError::WindowTooLong {
            t,
            total: recording.steps,
        });
    }
    if stride == 0 || stride > t {
        return Err(SignalError::BadStride { stride, t });
    }
    if s == 0 || t % s != 0 {
        return Err(SignalError::SlicesDontDivide { s, t });
    }
    let count = (recording.steps - t) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * stride;
        let mut values = Vec::with_capacity(t * recording.channels);
        values.extend_from_slice(
            &recording.samples[start * recording.channels..(start + t) * recording.channels],
        );
        out.push(Segment {
            values,
            len: t,
            channels: recording.channels,
            recording_id: recording.id.clone(),
            start,
            label: recording.label,
            slices: s,
        });
    }
    Ok(out)
}

/// Configuration for the labeled surrogate generator. Classes are told apart
/// by burst rate, burst width, and the phase lag each channel sees.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub channels: usize,
    /// Bursts per second, one entry per class.
    pub burst_rates: Vec<f64>,
    pub burst_amp: f64,
    pub noise_std: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            channels: 8,
            burst_rates: vec![3.0, 6.0, 10.0, 16.0],
            burst_amp: 1.0,
            noise_std: 0.05,
            sample_rate_hz: 1000.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SignalError> {
        if self.num_classes < 2 {
            return Err(SignalError::BadConfig(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.channels == 0 {
            return Err(SignalError::BadConfig("zero channels".into()));
        }
        if self.burst_rates.len() != self.num_classes {
            return Err(SignalError::BadConfig(format!(
                "{} burst rates for {} classes",
                self.burst_rates.len(),
                self.num_classes
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(SignalError::BadConfig("negative noise_std".into()));
        }
        if !(self.burst_amp >= 0.0) {
            return Err(SignalError::BadConfig("negative burst_amp".into()));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(SignalError::BadConfig("non-positive sample rate".into()));
        }
        Ok(())
    }
}

/// Generate `num_classes * per_class` surrogate recordings of length `t_len`.
/// Pure in (config, per_class, t_len): the same arguments always produce the
/// same samples.
pub fn synthesize(
    config: &SynthConfig,
    per_class: usize,
    t_len: usize,
) -> Result<Vec<Recording>, SignalError> {
    config.validate()?;
    if per_class == 0 {
        return Err(SignalError::BadConfig("per_class must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(config.num_classes * per_class);
    for class in 0..config.num_classes {
        for rec_idx in 0..per_class {
            let mut rng = seeds::rng(
                config.seed,
                "synth",
                (class as u64) << 32 | rec_idx as u64,
            );
            // Inter-trial variability: each recording draws its own gain,
            // rate multiplier, and per-channel sensitivity around the class
            // template.
            let trial_gain: f64 = rng.gen_range(0.6..1.4);
            let rate_jitter: f64 = rng.gen_range(0.92..1.08);
            let channel_gain: Vec<f64> = (0..config.channels)
                .map(|_| rng.gen_range(0.7..1.3))
                .collect();

            let rate = config.burst_rates[class] * rate_jitter;
            let n_bursts =
                ((rate * t_len as f64 / config.sample_rate_hz).round() as usize).max(1);
            // Class geometry: wider bursts and larger inter-channel lag for
            // higher class ids.
            let width = (t_len as f64 / (n_bursts as f64 * 4.0))
                .max(4.0)
                .min(t_len as f64 / 2.0)
                * (1.0 + 0.35 * class as f64);
            let chan_lag = 1.5 * class as f64;
            let period = t_len as f64 / n_bursts as f64;
            // Spatial activation: each class centers its burst energy on a
            // different electrode, falling off over its neighbors.
            let focus = if config.num_classes > 1 {
                class as f64 * (config.channels - 1) as f64
                    / (config.num_classes - 1) as f64
            } else {
                0.0
            };
            let spatial: Vec<f64> = (0..config.channels)
                .map(|ch| {
                    let d = ch as f64 - focus;
                    0.25 + 0.75 * (-d * d / 2.0).exp()
                })
                .collect();

            // Burst centers with timing jitter, plus per-burst amplitude and
            // width variation so that burst intensity forms a continuum
            // rather than a single level.
            let bursts: Vec<(f64, f64, f64)> = (0..n_bursts)
                .map(|b| {
                    let jitter: f64 = rng.gen_range(-0.15..0.15) * period;
                    let center = (b as f64 + 0.5) * period + jitter;
                    // Log-uniform intensity: many weak bursts, few strong
                    // ones, matching the graded contraction levels seen in
                    // real recordings.
                    let amp_scale: f64 =
                        (rng.gen_range(0.2f64.ln()..1.7f64.ln())).exp();
                    let width_scale: f64 = rng.gen_range(0.85..1.18);
                    (center, amp_scale, width * width_scale)
                })
                .collect();

            let mut samples = vec![0.0f64; t_len * config.channels];
            for t in 0..t_len {
                for c in 0..config.channels {
                    let carrier: f64 = StandardNormal.sample(&mut rng);
                    let mut env = 0.0f64;
                    for &(ctr, amp_scale, w) in &bursts {
                        let d = (t as f64 - chan_lag * c as f64 - ctr).abs();
                        if d < w {
                            // Hann-style envelope over the burst span.
                            let x = std::f64::consts::PI * d / w;
                            env += amp_scale * 0.5 * (1.0 + x.cos());
                        }
                    }
                    let burst_noise: f64 = StandardNormal.sample(&mut rng);
                    samples[t * config.channels + c] = trial_gain
                        * channel_gain[c]
                        * (config.noise_std * carrier
                            + config.burst_amp * spatial[c] * env.min(1.5) * burst_noise);
                }
            }
            out.push(Recording::new(
                format!("c{class}r{rec_idx}"),
                format!("synth{class}"),
                samples,
                t_len,
                config.channels,
                config.sample_rate_hz,
                class as u32,
            )?);
        }
    }
    Ok(out)
}

const CSV_MAGIC: &str = "#semg v1";
const BIN_MAGIC: &[u8; 5] = b"SEMG1";

/// Load recordings from a file in the declared format. Each file carries one
/// recording; when the header sets `normalize=1` every channel is shifted to
/// zero mean and scaled to unit variance on load.
pub fn load_recordings(path: &Path, format: FileFormat) -> Result<Vec<Recording>, SignalError> {
    match format {
        FileFormat::Csv => load_csv(path),
        FileFormat::F32Binary => load_binary(path),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SignalError {
    SignalError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_csv(path: &Path) -> Result<Vec<Recording>, SignalError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let pstr = path.display().to_string();
    let header = lines
        .next()
        .ok_or_else(|| SignalError::MalformedHeader {
            path: pstr.clone(),
            reason: "empty file".into(),
        })?
        .map_err(|e| io_err(path, e))?;
    let (channels, rate, label, normalize) = parse_csv_header(&pstr, &header)?;

    let mut samples = Vec::new();
    let mut rows = 0usize;
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != channels {
            return Err(SignalError::ChannelMismatch {
                path: pstr,
                row: i + 1,
                expected: channels,
                found: fields.len(),
            });
        }
        for (c, field) in fields.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|e| SignalError::BadValue {
                    path: pstr.clone(),
                    row: i + 1,
                    col: c,
                    reason: format!("{e}"),
                })?;
            if !v.is_finite() {
                return Err(SignalError::BadValue {
                    path: pstr,
                    row: i + 1,
                    col: c,
                    reason: "non-finite sample".into(),
                });
            }
            samples.push(v);
        }
        rows += 1;
    }
    if normalize {
        normalize_per_channel(&mut samples, rows, channels);
    }
    let stem = file_stem(path);
    Ok(vec![Recording::new(
        stem.clone(),
        stem,
        samples,
        rows,
        channels,
        rate,
        label,
    )?])
}

fn parse_csv_header(path: &str, header: &str) -> Result<(usize, f64, u32, bool), SignalError> {
    let bad = |reason: &str| SignalError::MalformedHeader {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    if !header.starts_with(CSV_MAGIC) {
        return Err(bad(&format!("missing `{CSV_MAGIC}` marker")));
    }
    let mut channels = None;
    let mut rate = None;
    let mut label = None;
    let mut normalize = None;
    for part in header[CSV_MAGIC.len()..].split_whitespace() {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| bad(&format!("bad key=value pair `{part}`")))?;
        match key {
            "channels" => {
                channels = Some(value.parse::<usize>().map_err(|_| bad("bad channels"))?)
            }
            "rate" => rate = Some(value.parse::<f64>().map_err(|_| bad("bad rate"))?),
            "label" => label = Some(value.parse::<u32>().map_err(|_| bad("bad label"))?),
            "normalize" => match value {
                "0" => normalize = Some(false),
                "1" => normalize = Some(true),
                _ => return Err(bad("normalize must be 0 or 1")),
            },
            other => return Err(bad(&format!("unknown header key `{other}`"))),
        }
    }
    match (channels, rate, label, normalize) {
        (Some(c), Some(r), Some(l), Some(n)) if c > 0 => Ok((c, r, l, n)),
        (Some(0), ..) => Err(bad("channels must be positive")),
        _ => Err(bad("header must set channels, rate, label, normalize")),
    }
}

fn load_binary(path: &Path) -> Result<Vec<Recording>, SignalError> {
    let pstr = path.display().to_string();
    let mut file = BufReader::new(fs::File::open(path).map_err(|e| io_err(path, e))?);
    let bad = |reason: &str| SignalError::MalformedHeader {
        path: pstr.clone(),
        reason: reason.to_string(),
    };

    let mut magic = [0u8; 5];
    file.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != BIN_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |f: &mut BufReader<fs::File>| -> Result<u32, SignalError> {
        f.read_exact(&mut u32buf).map_err(|e| io_err(path, e))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let steps = read_u32(&mut file)? as usize;
    let channels = read_u32(&mut file)? as usize;
    let label = read_u32(&mut file)?;
    let mut f32buf = [0u8; 4];
    file.read_exact(&mut f32buf).map_err(|e| io_err(path, e))?;
    let rate = f32::from_le_bytes(f32buf) as f64;
    let mut nbuf = [0u8; 1];
    file.read_exact(&mut nbuf).map_err(|e| io_err(path, e))?;
    let normalize = match nbuf[0] {
        0 => false,
        1 => true,
        _ => return Err(bad("normalize flag must be 0 or 1")),
    };
    if channels == 0 {
        return Err(bad("channels must be positive"));
    }

    let mut samples = Vec::with_capacity(steps * channels);
    for i in 0..steps * channels {
        file.read_exact(&mut f32buf).map_err(|e| io_err(path, e))?;
        let v = f32::from_le_bytes(f32buf) as f64;
        if !v.is_finite() {
            return Err(SignalError::BadValue {
                path: pstr,
                row: i / channels,
                col: i % channels,
                reason: "non-finite sample".into(),
            });
        }
        samples.push(v);
    }
    if normalize {
        normalize_per_channel(&mut samples, steps, channels);
    }
    let stem = file_stem(path);
    Ok(vec![Recording::new(
        stem.clone(),
        stem,
        samples,
        steps,
        channels,
        rate,
        label,
    )?])
}

fn normalize_per_channel(samples: &mut [f64], rows: usize, channels: usize) {
    if rows == 0 {
        return;
    }
    for c in 0..channels {
        let mut mean = 0.0;
        for t in 0..rows {
            mean += samples[t * channels + c];
        }
        mean /= rows as f64;
        let mut var = 0.0;
        for t in 0..rows {
            let d = samples[t * channels + c] - mean;
            var += d * d;
        }
        var /= rows as f64;
        let std = var.sqrt();
        for t in 0..rows {
            let v = &mut samples[t * channels + c];
            *v -= mean;
            if std > 1e-12 {
                *v /= std;
            }
        }
    }
}

/// Write a recording in the binary container format (the inverse of
/// [`load_recordings`] with [`FileFormat::F32Binary`]).
pub fn save_binary(path: &Path, rec: &Recording, normalize: bool) -> Result<(), SignalError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    write(BIN_MAGIC)?;
    write(&(rec.steps as u32).to_le_bytes())?;
    write(&(rec.channels as u32).to_le_bytes())?;
    write(&rec.label.to_le_bytes())?;
    write(&(rec.sample_rate_hz as f32).to_le_bytes())?;
    write(&[u8::from(normalize)])?;
    for v in &rec.samples {
        write(&(*v as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Write a recording as the CSV flavor of the container.
pub fn save_csv(path: &Path, rec: &Recording, normalize: bool) -> Result<(), SignalError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "{CSV_MAGIC} channels={} rate={} label={} normalize={}",
        rec.channels,
        rec.sample_rate_hz,
        rec.label,
        u8::from(normalize)
    )
    .map_err(|e| io_err(path, e))?;
    for t in 0..rec.steps {
        let row: Vec<String> = (0..rec.channels)
            .map(|c| format!("{}", rec.sample(t, c)))
            .collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
