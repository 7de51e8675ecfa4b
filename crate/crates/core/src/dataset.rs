//! Training data: aligned, differentiated, normalized oscillation cycles.
//!
//! The pipeline order is fixed: phase alignment against a reference cycle,
//! first-order differencing, per-element statistics, normalization.

use std::path::Path;

use rayon::prelude::*;

use crate::format::{self, F32Reader, F32Writer, FormatError, Manifest};
use crate::waveguide::{
    self, BowedParams, DynamicSchedule, WaveguideError, BOWED_F0, BOWED_SAMPLE_RATE, CONTROL_MAX,
};

/// Standard deviations below this are clamped before division.
pub const STD_FLOOR: f64 = 1e-8;

const FILE_KIND: &str = "dataset";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("cycle too short to differentiate ({0} samples)")]
    TooShort(usize),
    #[error("empty dataset")]
    Empty,
    #[error("parameter value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("implausible f0: period of {period:.1} samples for {len} samples of audio")]
    ImplausibleF0 { period: f64, len: usize },
    #[error(transparent)]
    Waveguide(#[from] WaveguideError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Raw range of one conditional parameter, mapped linearly onto [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const BOWED: ParamRange = ParamRange {
        lo: 0.0,
        hi: CONTROL_MAX,
    };

    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(hi > lo, "empty parameter range {lo}..{hi}");
        Self { lo, hi }
    }

    pub fn scale(&self, raw: f64) -> Result<f64> {
        if !(self.lo..=self.hi).contains(&raw) {
            return Err(DatasetError::OutOfRange {
                value: raw,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(2.0 * (raw - self.lo) / (self.hi - self.lo) - 1.0)
    }

    pub fn unscale(&self, scaled: f64) -> f64 {
        (scaled + 1.0) * 0.5 * (self.hi - self.lo) + self.lo
    }
}

/// Scales raw parameter values into [-1, 1].
pub fn scale_params(raw: &[f64], ranges: &[ParamRange]) -> Result<Vec<f64>> {
    if raw.len() != ranges.len() {
        return Err(DatasetError::LengthMismatch {
            expected: ranges.len(),
            found: raw.len(),
        });
    }
    raw.iter().zip(ranges).map(|(v, r)| r.scale(*v)).collect()
}

pub fn unscale_params(scaled: &[f64], ranges: &[ParamRange]) -> Vec<f64> {
    scaled.iter().zip(ranges).map(|(v, r)| r.unscale(*v)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    /// Normalized differential cycle.
    pub data: Vec<f32>,
    /// Conditional parameters scaled to [-1, 1].
    pub params: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub param_lo: Vec<f32>,
    pub param_hi: Vec<f32>,
}

impl NormStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn ranges(&self) -> Vec<ParamRange> {
        self.param_lo
            .iter()
            .zip(&self.param_hi)
            .map(|(lo, hi)| ParamRange::new(*lo as f64, *hi as f64))
            .collect()
    }

    pub fn normalize(&self, raw: &[f64]) -> Result<Vec<f32>> {
        self.check_len(raw.len())?;
        Ok(raw
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| ((x - *m as f64) / *s as f64) as f32)
            .collect())
    }

    pub fn denormalize(&self, normalized: &[f32]) -> Result<Vec<f64>> {
        self.check_len(normalized.len())?;
        Ok(normalized
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| *x as f64 * *s as f64 + *m as f64)
            .collect())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(DatasetError::LengthMismatch {
                expected: self.len(),
                found: n,
            });
        }
        Ok(())
    }
}

/// Per-element mean and population standard deviation (floored).
pub fn compute_norm_stats(data: &[Vec<f64>], ranges: &[ParamRange]) -> Result<NormStats> {
    let first = data.first().ok_or(DatasetError::Empty)?;
    let len = first.len();
    let n = data.len() as f64;
    let mut mean = vec![0.0f64; len];
    for row in data {
        if row.len() != len {
            return Err(DatasetError::LengthMismatch {
                expected: len,
                found: row.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    // store the mean at f32 first so the variance is taken about the value
    // that normalize will actually subtract
    let mean32: Vec<f32> = mean.iter().map(|m| *m as f32).collect();
    let mut var = vec![0.0f64; len];
    for row in data {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean32) {
            let d = x - *m as f64;
            *v += d * d;
        }
    }
    let std = var
        .iter()
        .map(|v| ((v / n).sqrt().max(STD_FLOOR)) as f32)
        .collect();
    Ok(NormStats {
        mean: mean32,
        std,
        param_lo: ranges.iter().map(|r| r.lo as f32).collect(),
        param_hi: ranges.iter().map(|r| r.hi as f32).collect(),
    })
}

/// Circular shift `k` maximizing `sum_i cycle[(i + k) % n] * reference[i]`.
/// Ties resolve to the smallest shift.
pub fn best_shift(cycle: &[f64], reference: &[f64]) -> Result<usize> {
    let n = reference.len();
    if cycle.len() != n {
        return Err(DatasetError::LengthMismatch {
            expected: n,
            found: cycle.len(),
        });
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 0..n {
        let (head, tail) = cycle.split_at(k);
        let c: f64 = tail
            .iter()
            .chain(head)
            .zip(reference)
            .map(|(a, b)| a * b)
            .sum();
        if c > best.0 {
            best = (c, k);
        }
    }
    Ok(best.1)
}

pub fn rotate(cycle: &[f64], shift: usize) -> Vec<f64> {
    let mut out = cycle.to_vec();
    out.rotate_left(shift % cycle.len().max(1));
    out
}

/// Rotates every cycle to its best circular match with `reference`.
pub fn phase_align(raw_cycles: &[Vec<f64>], reference: &[f64]) -> Result<Vec<Vec<f64>>> {
    raw_cycles
        .par_iter()
        .map(|c| Ok(rotate(c, best_shift(c, reference)?)))
        .collect()
}

/// Aligns a raw window to `reference`, differentiates and normalizes it.
pub fn prepare_window_with(window: &[f64], reference: &[f32], stats: &NormStats) -> Result<Vec<f32>> {
    let reference: Vec<f64> = reference.iter().map(|v| *v as f64).collect();
    let aligned = rotate(window, best_shift(window, &reference)?);
    stats.normalize(&differentiate(&aligned)?)
}

/// First-order difference: `out[i] = cycle[i + 1] - cycle[i]`.
pub fn differentiate(cycle: &[f64]) -> Result<Vec<f64>> {
    if cycle.len() < 2 {
        return Err(DatasetError::TooShort(cycle.len()));
    }
    Ok(cycle.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Index of the cycle whose RMS is the median (ties: lowest index).
pub fn median_rms_index(cycles: &[Vec<f64>]) -> Result<usize> {
    if cycles.is_empty() {
        return Err(DatasetError::Empty);
    }
    let mut order: Vec<(f64, usize)> = cycles
        .iter()
        .enumerate()
        .map(|(i, c)| (waveguide::rms(c), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order[(order.len() - 1) / 2].1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub source: String,
    pub sample_rate: f64,
    pub f0: f64,
    /// Raw window length (differential length + 1).
    pub cycle_len: usize,
    pub seed: u64,
    pub param_names: Vec<String>,
    /// Free-form provenance (grid step, hold range, ...).
    pub extra: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleDataset {
    pub records: Vec<CycleRecord>,
    pub stats: NormStats,
    pub meta: DatasetMeta,
    /// Raw reference window all cycles were aligned against.
    pub reference: Vec<f32>,
}

/// A captured raw window with its raw parameter values.
#[derive(Debug, Clone)]
pub struct RawCapture {
    pub window: Vec<f64>,
    pub params: Vec<f64>,
}

impl CycleDataset {
    /// Runs the full pipeline over raw captures: reference selection,
    /// alignment, differencing, statistics, normalization.
    pub fn assemble(
        captures: Vec<RawCapture>,
        ranges: &[ParamRange],
        meta: DatasetMeta,
    ) -> Result<Self> {
        let windows: Vec<Vec<f64>> = captures.iter().map(|c| c.window.clone()).collect();
        let reference = windows[median_rms_index(&windows)?].clone();
        Self::assemble_with_reference(captures, ranges, meta, reference)
    }

    pub fn assemble_with_reference(
        captures: Vec<RawCapture>,
        ranges: &[ParamRange],
        meta: DatasetMeta,
        reference: Vec<f64>,
    ) -> Result<Self> {
        if captures.is_empty() {
            return Err(DatasetError::Empty);
        }
        let windows: Vec<Vec<f64>> = captures.iter().map(|c| c.window.clone()).collect();
        let aligned = phase_align(&windows, &reference)?;
        let diffs = aligned
            .iter()
            .map(|c| differentiate(c))
            .collect::<Result<Vec<_>>>()?;
        let params = captures
            .iter()
            .map(|c| scale_params(&c.params, ranges))
            .collect::<Result<Vec<_>>>()?;
        Self::from_differential(diffs, params, ranges, meta, reference)
    }

    /// Builds a dataset from already aligned differential cycles and scaled
    /// parameters.
    pub fn from_differential(
        diffs: Vec<Vec<f64>>,
        scaled_params: Vec<Vec<f64>>,
        ranges: &[ParamRange],
        meta: DatasetMeta,
        reference: Vec<f64>,
    ) -> Result<Self> {
        let stats = compute_norm_stats(&diffs, ranges)?;
        let records = diffs
            .iter()
            .zip(scaled_params)
            .map(|(d, p)| {
                if p.len() != ranges.len() {
                    return Err(DatasetError::LengthMismatch {
                        expected: ranges.len(),
                        found: p.len(),
                    });
                }
                Ok(CycleRecord {
                    data: stats.normalize(d)?,
                    params: p.iter().map(|v| *v as f32).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            records,
            stats,
            meta,
            reference: reference.iter().map(|v| *v as f32).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Differential record length `L`.
    pub fn data_len(&self) -> usize {
        self.stats.len()
    }

    /// Number of conditional parameters `m`.
    pub fn param_count(&self) -> usize {
        self.stats.param_lo.len()
    }

    pub fn ranges(&self) -> Vec<ParamRange> {
        self.stats.ranges()
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.meta
            .param_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DatasetError::UnknownParam(name.to_string()))
    }

    pub fn raw_data(&self, index: usize) -> Vec<f64> {
        self.stats
            .denormalize(&self.records[index].data)
            .expect("records share the stats length")
    }

    /// Applies the training-time alignment, differencing and normalization
    /// to a fresh raw window.
    pub fn prepare_window(&self, window: &[f64]) -> Result<Vec<f32>> {
        prepare_window_with(window, &self.reference, &self.stats)
    }

    /// Keeps only records whose `name` parameter passes `keep` (raw units)
    /// and recomputes the statistics.
    pub fn filter(&self, name: &str, keep: impl Fn(f64) -> bool) -> Result<Self> {
        let idx = self.param_index(name)?;
        let range = self.ranges()[idx];
        let kept: Vec<usize> = (0..self.len())
            .filter(|&i| keep(range.unscale(self.records[i].params[idx] as f64)))
            .collect();
        if kept.is_empty() {
            return Err(DatasetError::Empty);
        }
        if kept.len() == self.len() {
            return Ok(self.clone());
        }
        let diffs = kept.iter().map(|&i| self.raw_data(i)).collect();
        let params = kept
            .iter()
            .map(|&i| self.records[i].params.iter().map(|v| *v as f64).collect())
            .collect();
        let mut meta = self.meta.clone();
        meta.source = format!("{}-filtered", self.meta.source);
        Self::from_differential(
            diffs,
            params,
            &self.ranges(),
            meta,
            self.reference.iter().map(|v| *v as f64).collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_file(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&format::read_file(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let l = self.data_len();
        let m = self.param_count();
        let mut man = Manifest::new();
        man.set("source", &self.meta.source)
            .set("L", l)
            .set("m", m)
            .set("count", self.len())
            .set("f0", self.meta.f0)
            .set("sample_rate", self.meta.sample_rate)
            .set("cycle_len", self.meta.cycle_len)
            .set("seed", self.meta.seed)
            .set("param_names", self.meta.param_names.join(","))
            .set("reference_len", self.reference.len());
        for (k, v) in &self.meta.extra {
            man.set(&format!("x-{k}"), v);
        }
        let mut w = F32Writer::default();
        w.extend(&self.stats.mean);
        w.extend(&self.stats.param_lo);
        w.extend(&self.stats.std);
        w.extend(&self.stats.param_hi);
        for r in &self.records {
            w.extend(&r.data);
            w.extend(&r.params);
        }
        w.extend(&self.reference);
        format::encode(FILE_KIND, &man, &w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (man, payload) = format::decode(FILE_KIND, bytes, |m| {
            let l: usize = m.parse("L")?;
            let p: usize = m.parse("m")?;
            let count: usize = m.parse("count")?;
            let refl: usize = m.parse("reference_len")?;
            Ok(4 * ((count + 2) * (l + p) + refl))
        })?;
        let l: usize = man.parse("L")?;
        let m: usize = man.parse("m")?;
        let count: usize = man.parse("count")?;
        let mut r = F32Reader::new(&payload);
        let mean = r.take(l)?;
        let param_lo = r.take(m)?;
        let std = r.take(l)?;
        let param_hi = r.take(m)?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            records.push(CycleRecord {
                data: r.take(l)?,
                params: r.take(m)?,
            });
        }
        let reference = r.take(man.parse("reference_len")?)?;
        let extra = man
            .entries()
            .filter_map(|(k, v)| k.strip_prefix("x-").map(|k| (k.to_string(), v.to_string())))
            .collect();
        let names: String = man.parse("param_names")?;
        Ok(Self {
            records,
            stats: NormStats {
                mean,
                std,
                param_lo,
                param_hi,
            },
            meta: DatasetMeta {
                source: man.parse("source")?,
                sample_rate: man.parse("sample_rate")?,
                f0: man.parse("f0")?,
                cycle_len: man.parse("cycle_len")?,
                seed: man.parse("seed")?,
                param_names: if names.is_empty() {
                    Vec::new()
                } else {
                    names.split(',').map(str::to_string).collect()
                },
                extra,
            },
            reference,
        })
    }
}

pub const BOWED_PARAM_NAMES: [&str; 2] = ["pressure", "position"];

/// Result of a steady-state grid sweep before the pipeline runs.
#[derive(Debug, Clone)]
pub struct GridCapture {
    pub cells: usize,
    pub captures: Vec<RawCapture>,
}

/// Captures the steady state for every (pressure, position) grid cell,
/// ordered pressure-major. Silent cells are dropped.
pub fn capture_bowed_grid(grid_step: usize) -> Result<GridCapture> {
    let step = grid_step.max(1);
    let axis: Vec<f64> = (0..=CONTROL_MAX as usize).step_by(step).map(|v| v as f64).collect();
    let cells: Vec<(f64, f64)> = axis
        .iter()
        .flat_map(|&p| axis.iter().map(move |&q| (p, q)))
        .collect();
    let cycle_len = waveguide::two_period_len(BOWED_SAMPLE_RATE, BOWED_F0);
    let captured = cells
        .par_iter()
        .map(|&(pressure, position)| {
            let params = BowedParams::bowed(pressure, position);
            let w = waveguide::capture_steady(&params, cycle_len, BOWED_SAMPLE_RATE)?;
            Ok(w.map(|window| RawCapture {
                window,
                params: vec![pressure, position],
            }))
        })
        .collect::<std::result::Result<Vec<_>, WaveguideError>>()?;
    Ok(GridCapture {
        cells: cells.len(),
        captures: captured.into_iter().flatten().collect(),
    })
}

fn bowed_meta(source: &str, seed: u64, extra: Vec<(String, String)>) -> DatasetMeta {
    DatasetMeta {
        source: source.to_string(),
        sample_rate: BOWED_SAMPLE_RATE,
        f0: BOWED_F0,
        cycle_len: waveguide::two_period_len(BOWED_SAMPLE_RATE, BOWED_F0),
        seed,
        param_names: BOWED_PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
        extra,
    }
}

/// Steady-state grid dataset over pressure x position.
pub fn build_bowed1(grid_step: usize) -> Result<CycleDataset> {
    let grid = capture_bowed_grid(grid_step)?;
    let extra = vec![
        ("grid_step".to_string(), grid_step.max(1).to_string()),
        ("grid_cells".to_string(), grid.cells.to_string()),
    ];
    CycleDataset::assemble(
        grid.captures,
        &[ParamRange::BOWED; 2],
        bowed_meta("bowed1", 0, extra),
    )
}

/// Dynamic dataset captured while parameters jump at random intervals.
pub fn build_bowed2(n_records: usize, seed: u64) -> Result<CycleDataset> {
    let schedule = DynamicSchedule::bowed(seed);
    let cycles = waveguide::capture_dynamic(&schedule, n_records, BOWED_SAMPLE_RATE)?;
    let captures = cycles
        .into_iter()
        .map(|c| RawCapture {
            window: c.cycle,
            params: vec![c.params.pressure, c.params.position],
        })
        .collect();
    let extra = vec![(
        "hold_seconds".to_string(),
        format!("{}..{}", schedule.hold_range.0, schedule.hold_range.1),
    )];
    CycleDataset::assemble(
        captures,
        &[ParamRange::BOWED; 2],
        bowed_meta("bowed2", seed, extra),
    )
}

/// Keeps the records with raw bow position below 64.
pub fn filter_half(ds: &CycleDataset) -> Result<CycleDataset> {
    ds.filter("position", |p| p < CONTROL_MAX / 2.0)
}

/// Cuts consecutive two-period windows from a periodic recording and
/// rotates each so its peak sits at index 0. Returns the raw windows.
pub fn extract_periodic_windows(audio: &[f64], sample_rate: f64, f0: f64) -> Result<Vec<Vec<f64>>> {
    let period = sample_rate / f0;
    if !(period >= 8.0) || period > audio.len() as f64 / 4.0 {
        return Err(DatasetError::ImplausibleF0 {
            period,
            len: audio.len(),
        });
    }
    let window = waveguide::two_period_len(sample_rate, f0);
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let start = (k as f64 * 2.0 * period).round() as usize;
        if start + window > audio.len() {
            break;
        }
        let w = &audio[start..start + window];
        let peak = w
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                if *v > best.1 {
                    (i, *v)
                } else {
                    best
                }
            })
            .0;
        out.push(rotate(w, peak));
        k += 1;
    }
    Ok(out)
}

/// Imports one periodic take labeled with a single conditional value.
/// Returned records hold raw (unnormalized) differential data.
pub fn import_periodic_recording(
    audio: &[f64],
    sample_rate: f64,
    f0: f64,
    label: f64,
    label_range: ParamRange,
) -> Result<Vec<CycleRecord>> {
    let scaled = label_range.scale(label)? as f32;
    extract_periodic_windows(audio, sample_rate, f0)?
        .iter()
        .map(|w| {
            Ok(CycleRecord {
                data: differentiate(w)?.iter().map(|v| *v as f32).collect(),
                params: vec![scaled],
            })
        })
        .collect()
}

/// Builds a normalized dataset from several labeled takes.
pub fn build_imported(
    source: &str,
    takes: &[(Vec<f64>, f64)],
    sample_rate: f64,
    f0: f64,
    label_range: ParamRange,
) -> Result<CycleDataset> {
    let mut diffs = Vec::new();
    let mut params = Vec::new();
    let mut reference = None;
    for (audio, label) in takes {
        for w in extract_periodic_windows(audio, sample_rate, f0)? {
            diffs.push(differentiate(&w)?);
            params.push(vec![label_range.scale(*label)?]);
            reference.get_or_insert(w);
        }
    }
    let reference = reference.ok_or(DatasetError::Empty)?;
    let meta = DatasetMeta {
        source: source.to_string(),
        sample_rate,
        f0,
        cycle_len: reference.len(),
        seed: 0,
        param_names: vec!["label".to_string()],
        extra: vec![(
            "label_range".to_string(),
            format!("{}..{}", label_range.lo, label_range.hi),
        )],
    };
    CycleDataset::from_differential(diffs, params, &[label_range], meta, reference)
}
