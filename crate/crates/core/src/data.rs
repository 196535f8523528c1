//! CSV ingestion, chronological splits, sliding windows, per-window
//! instance normalization, and patching.

use std::ops::Range;
use std::path::Path;

use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use crate::Real;

/// Epsilon floor for the per-channel standard deviation.
pub const SIGMA_FLOOR: Real = 1e-5;

/// A fully ingested multivariate series, time-major, no gaps.
pub struct Dataset {
    pub name: String,
    pub channel_names: Vec<String>,
    /// Informational sampling tag, e.g. "1h" or "15min".
    pub frequency_tag: String,
    values: Vec<Real>, // rows * channels, row-major
    rows: usize,
    channels: usize,
}

impl Dataset {
    pub fn from_values(
        name: &str,
        channel_names: Vec<String>,
        rows: Vec<Vec<Real>>,
        frequency_tag: &str,
    ) -> Result<Dataset> {
        let channels = channel_names.len();
        let n_rows = rows.len();
        let mut values = Vec::with_capacity(n_rows * channels);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != channels {
                return Err(Error::CsvStructure {
                    path: name.to_string(),
                    message: format!("row {i} has {} values, expected {channels}", row.len()),
                });
            }
            values.extend_from_slice(row);
        }
        Ok(Dataset {
            name: name.to_string(),
            channel_names,
            frequency_tag: frequency_tag.to_string(),
            values,
            rows: n_rows,
            channels,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn value(&self, t: usize, c: usize) -> Real {
        self.values[t * self.channels + c]
    }

    /// Copy `len` consecutive values of channel `c` starting at row `start`.
    fn copy_channel(&self, c: usize, start: usize, len: usize, out: &mut [Real]) {
        for (i, slot) in out.iter_mut().enumerate().take(len) {
            *slot = self.value(start + i, c);
        }
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

fn frequency_tag(step_seconds: i64) -> String {
    match step_seconds {
        3600 => "1h".to_string(),
        900 => "15min".to_string(),
        60 => "1min".to_string(),
        86400 => "1d".to_string(),
        s => format!("{s}s"),
    }
}

/// Ingest a CSV file: first column a timestamp, remaining columns numeric.
/// Timestamps must be strictly increasing and uniformly spaced (no gaps).
/// When `expected_channels` is given, the header must match it exactly.
pub fn ingest_csv(path: &Path, expected_channels: Option<&[&str]>) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::DatasetNotFound(path.display().to_string()));
    }
    let path_str = path.display().to_string();
    let structure = |message: String| Error::CsvStructure {
        path: path_str.clone(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| structure(e.to_string()))?;

    let headers = reader.headers().map_err(|e| structure(e.to_string()))?.clone();
    if headers.len() < 2 {
        return Err(structure(
            "need a timestamp column plus at least one channel".to_string(),
        ));
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    if let Some(expected) = expected_channels {
        if channel_names != expected {
            return Err(structure(format!(
                "channel header {channel_names:?} does not match expected {expected:?}"
            )));
        }
    }

    let channels = channel_names.len();
    let mut values: Vec<Real> = Vec::new();
    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1; // 1-based data row; the header is row 0
        let record = record.map_err(|e| structure(format!("row {row}: {e}")))?;
        if record.len() != channels + 1 {
            return Err(structure(format!(
                "row {row} has {} fields, expected {}",
                record.len(),
                channels + 1
            )));
        }
        let ts = parse_timestamp(&record[0]).ok_or_else(|| Error::CsvCell {
            path: path_str.clone(),
            row,
            column: 0,
            message: format!("unparseable timestamp {:?}", &record[0]),
        })?;
        timestamps.push(ts);
        for c in 0..channels {
            let v: f64 = record[c + 1].parse().map_err(|_| Error::CsvCell {
                path: path_str.clone(),
                row,
                column: c + 1,
                message: format!("non-numeric cell {:?}", &record[c + 1]),
            })?;
            values.push(v as Real);
        }
    }

    // Strict chronology plus uniform spacing.
    let mut step: Option<i64> = None;
    for i in 1..timestamps.len() {
        let delta = (timestamps[i] - timestamps[i - 1]).num_seconds();
        if delta <= 0 {
            return Err(Error::TimestampOrder {
                path: path_str,
                row: i + 1,
            });
        }
        match step {
            None => step = Some(delta),
            Some(expected) if expected != delta => {
                return Err(Error::TimestampGap {
                    path: path_str,
                    row: i + 1,
                    expected_s: expected,
                    found_s: delta,
                });
            }
            _ => {}
        }
    }

    let rows = timestamps.len();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| path_str.clone());
    Ok(Dataset {
        name,
        channel_names,
        frequency_tag: step.map(frequency_tag).unwrap_or_default(),
        values,
        rows,
        channels,
    })
}

/// Write a dataset in the same CSV format ingestion accepts, with hourly
/// timestamps starting at 2016-01-01 00:00:00.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let mut header = vec!["date".to_string()];
    header.extend(ds.channel_names.iter().cloned());
    w.write_record(&header).map_err(io_err)?;
    let start = chrono::NaiveDate::from_ymd_opt(2016, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    for t in 0..ds.rows() {
        let ts = start + chrono::Duration::hours(t as i64);
        let mut record = vec![ts.format("%Y-%m-%d %H:%M:%S").to_string()];
        for c in 0..ds.channels() {
            record.push(format!("{:?}", ds.value(t, c)));
        }
        w.write_record(&record).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// How to carve a dataset into train/validation/test ranges.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitPolicy {
    /// Pick by dataset name: `etth*` -> EttHours, `ettm*` -> EttMinutes,
    /// anything else -> Ratio 0.7/0.1/0.2.
    Auto,
    /// 12/4/4 months of 30 days at hourly sampling: 8640/2880/2880 rows.
    EttHours,
    /// 12/4/4 months of 30 days at 15-minute sampling: 34560/11520/11520.
    EttMinutes,
    Ratio {
        train: f64,
        val: f64,
        test: f64,
    },
}

impl SplitPolicy {
    pub fn parse(s: &str) -> Result<SplitPolicy> {
        match s {
            "auto" => Ok(SplitPolicy::Auto),
            "ett-hours" => Ok(SplitPolicy::EttHours),
            "ett-minutes" => Ok(SplitPolicy::EttMinutes),
            "ratio" => Ok(SplitPolicy::Ratio {
                train: 0.7,
                val: 0.1,
                test: 0.2,
            }),
            other => Err(Error::InvalidConfig(format!(
                "unknown split policy {other:?} (expected auto|ett-hours|ett-minutes|ratio)"
            ))),
        }
    }
}

/// Chronologically contiguous, non-overlapping row ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Carve the dataset. Every range must admit at least one
/// (lookback, horizon) window; windows never cross a range boundary.
pub fn split(
    ds: &Dataset,
    policy: &SplitPolicy,
    lookback: usize,
    horizon: usize,
) -> Result<SplitRanges> {
    let policy = match policy {
        SplitPolicy::Auto => {
            let lower = ds.name.to_lowercase();
            if lower.starts_with("etth") {
                SplitPolicy::EttHours
            } else if lower.starts_with("ettm") {
                SplitPolicy::EttMinutes
            } else {
                SplitPolicy::Ratio {
                    train: 0.7,
                    val: 0.1,
                    test: 0.2,
                }
            }
        }
        p => p.clone(),
    };
    let rows = ds.rows();
    let (a, b, c) = match policy {
        SplitPolicy::EttHours => {
            let month = 30 * 24;
            (12 * month, 16 * month, 20 * month)
        }
        SplitPolicy::EttMinutes => {
            let month = 30 * 24 * 4;
            (12 * month, 16 * month, 20 * month)
        }
        SplitPolicy::Ratio { train, val, test } => {
            let sum = train + val + test;
            if !(train > 0.0 && val > 0.0 && test > 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "split ratios {train}/{val}/{test} must be positive and sum to 1"
                )));
            }
            let a = (rows as f64 * train).floor() as usize;
            let b = a + (rows as f64 * val).floor() as usize;
            (a, b, rows)
        }
        SplitPolicy::Auto => unreachable!(),
    };
    if c > rows {
        return Err(Error::DatasetTooShort(format!(
            "{} has {rows} rows, policy needs {c}",
            ds.name
        )));
    }
    let ranges = SplitRanges {
        train: 0..a,
        val: a..b,
        test: b..c,
    };
    let min = lookback + horizon;
    for (label, r) in [
        ("train", &ranges.train),
        ("val", &ranges.val),
        ("test", &ranges.test),
    ] {
        if r.len() < min {
            return Err(Error::DatasetTooShort(format!(
                "{label} range has {} rows, need at least lookback+horizon = {min}",
                r.len()
            )));
        }
    }
    Ok(ranges)
}

/// Number of stride-1 windows that fit entirely inside `range`.
pub fn window_count(range: &Range<usize>, lookback: usize, horizon: usize) -> usize {
    (range.len() + 1).saturating_sub(lookback + horizon)
}

/// Origins (lookback start rows) of every window inside `range`.
pub fn window_origins(range: &Range<usize>, lookback: usize, horizon: usize) -> Vec<usize> {
    (range.start..range.start + window_count(range, lookback, horizon)).collect()
}

/// One training/evaluation sample: raw lookback and target plus the
/// normalization statistics computed from the lookback alone.
pub struct SeriesWindow {
    pub lookback: Vec<Real>, // channels * l, channel-major
    pub target: Vec<Real>,   // channels * t, channel-major
    pub mu: Vec<Real>,
    pub sigma: Vec<Real>,
    pub origin: usize,
    pub channels: usize,
    pub lookback_len: usize,
    pub horizon: usize,
}

impl SeriesWindow {
    pub fn from_raw(
        lookback: Vec<Real>,
        target: Vec<Real>,
        channels: usize,
        lookback_len: usize,
        horizon: usize,
        origin: usize,
    ) -> SeriesWindow {
        let (_, mu, sigma) = normalize_window(&lookback, channels, lookback_len);
        SeriesWindow {
            lookback,
            target,
            mu,
            sigma,
            origin,
            channels,
            lookback_len,
            horizon,
        }
    }

    pub fn normalized_lookback(&self) -> Vec<Real> {
        apply_normalization(
            &self.lookback,
            self.channels,
            self.lookback_len,
            &self.mu,
            &self.sigma,
        )
    }

    pub fn normalized_target(&self) -> Vec<Real> {
        apply_normalization(&self.target, self.channels, self.horizon, &self.mu, &self.sigma)
    }
}

/// Extract the window whose lookback starts at `origin`.
pub fn extract_window(ds: &Dataset, origin: usize, lookback: usize, horizon: usize) -> SeriesWindow {
    let channels = ds.channels();
    let mut lb = vec![0.0; channels * lookback];
    let mut tg = vec![0.0; channels * horizon];
    for c in 0..channels {
        ds.copy_channel(c, origin, lookback, &mut lb[c * lookback..(c + 1) * lookback]);
        ds.copy_channel(
            c,
            origin + lookback,
            horizon,
            &mut tg[c * horizon..(c + 1) * horizon],
        );
    }
    SeriesWindow::from_raw(lb, tg, channels, lookback, horizon, origin)
}

/// Per-channel z-scoring with population standard deviation floored at
/// [`SIGMA_FLOOR`]. Returns (normalized, mu, sigma).
pub fn normalize_window(raw: &[Real], channels: usize, len: usize) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let mut mu = vec![0.0; channels];
    let mut sigma = vec![0.0; channels];
    for c in 0..channels {
        let ch = &raw[c * len..(c + 1) * len];
        let mean = ch.iter().sum::<Real>() / len as Real;
        let var = ch.iter().map(|&x| (x - mean) * (x - mean)).sum::<Real>() / len as Real;
        mu[c] = mean;
        sigma[c] = var.sqrt().max(SIGMA_FLOOR);
    }
    let norm = apply_normalization(raw, channels, len, &mu, &sigma);
    (norm, mu, sigma)
}

fn apply_normalization(
    raw: &[Real],
    channels: usize,
    len: usize,
    mu: &[Real],
    sigma: &[Real],
) -> Vec<Real> {
    let mut out = vec![0.0; raw.len()];
    for c in 0..channels {
        for i in 0..len {
            out[c * len + i] = (raw[c * len + i] - mu[c]) / sigma[c];
        }
    }
    out
}

/// Invert [`normalize_window`]: `pred * sigma + mu` per channel.
pub fn denormalize(pred: &[Real], channels: usize, len: usize, mu: &[Real], sigma: &[Real]) -> Vec<Real> {
    let mut out = vec![0.0; pred.len()];
    for c in 0..channels {
        for i in 0..len {
            out[c * len + i] = pred[c * len + i] * sigma[c] + mu[c];
        }
    }
    out
}

/// Patches cut from a normalized lookback, channel-major
/// (channels * count * patch_len), tail replication-padded.
pub struct PatchSequence {
    pub patches: Vec<Real>,
    pub channels: usize,
    pub count: usize,
    pub patch_len: usize,
    pub padded_tail_len: usize,
}

/// Cut `ceil(len / patch_len)` non-overlapping patches per channel,
/// repeating the final observed value to fill the last patch.
pub fn patchify(normalized: &[Real], channels: usize, len: usize, patch_len: usize) -> Result<PatchSequence> {
    if patch_len == 0 {
        return Err(Error::InvalidConfig("patch length must be >= 1".to_string()));
    }
    if len == 0 {
        return Err(Error::InvalidConfig("lookback must be >= 1".to_string()));
    }
    let count = len.div_ceil(patch_len);
    let padded = count * patch_len;
    let mut patches = vec![0.0; channels * padded];
    for c in 0..channels {
        let ch = &normalized[c * len..(c + 1) * len];
        let dst = &mut patches[c * padded..(c + 1) * padded];
        dst[..len].copy_from_slice(ch);
        let last = ch[len - 1];
        for slot in dst[len..].iter_mut() {
            *slot = last;
        }
    }
    Ok(PatchSequence {
        patches,
        channels,
        count,
        patch_len,
        padded_tail_len: padded - len,
    })
}

/// Concatenate patches and truncate the padding; inverse of [`patchify`]
/// on the first `len` values.
pub fn unpatchify(seq: &PatchSequence, len: usize) -> Vec<Real> {
    let padded = seq.count * seq.patch_len;
    let mut out = vec![0.0; seq.channels * len];
    for c in 0..seq.channels {
        out[c * len..(c + 1) * len].copy_from_slice(&seq.patches[c * padded..c * padded + len]);
    }
    out
}
