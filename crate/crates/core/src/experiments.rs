//! Training loop, evaluation metrics and the condition suite.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{self, CycleDataset, DatasetError, NormStats, BOWED_PARAM_NAMES};
use crate::format::{self, FormatError, Manifest};
use crate::model::{Autoencoder, ConditionError, ExperimentCondition, Provenance};
use crate::neural::{
    ae_loss_grads, discriminator_loss_grads, generator_loss_grads, Activation, AdamState, Mlp,
    NeuralError, OutputKind,
};
use crate::stats;
use crate::waveguide::{self, BowedParams, Waveguide, WaveguideError, BOWED_SAMPLE_RATE, CONTROL_MAX};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Waveguide(#[from] WaveguideError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training collapsed at batch {batch}: non-finite {what}")]
    Collapsed { batch: usize, what: &'static str },
    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// How the two terms of the autoencoder loss are reduced before `lambda`
/// weighs them against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReduction {
    /// Plain sums over elements and batch.
    Sum,
    /// Each term averaged over its own elements, so `lambda` compares a
    /// per-element data error with a per-element parameter error.
    Mean,
}

impl LossReduction {
    pub fn name(self) -> &'static str {
        match self {
            LossReduction::Sum => "sum",
            LossReduction::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(LossReduction::Sum),
            "mean" => Some(LossReduction::Mean),
            _ => None,
        }
    }

    /// Weight on the summed parameter term giving the same minimizer (and,
    /// under Adam, the same updates) as this reduction with `lambda`.
    pub fn effective_lambda(self, lambda: f64, data_len: usize, m: usize) -> f64 {
        match self {
            LossReduction::Sum => lambda,
            LossReduction::Mean if m > 0 => lambda * data_len as f64 / m as f64,
            LossReduction::Mean => lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_batches: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub reduction: LossReduction,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            n_batches: 4000,
            learning_rate: 1e-3,
            lambda: 0.5,
            reduction: LossReduction::Mean,
            hidden: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ExperimentError::Config(msg.to_string()));
        if self.batch_size == 0 || self.n_batches == 0 || self.hidden == 0 {
            return bad("batch size, batch count and hidden size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        Ok(())
    }
}

/// Per-batch losses. `e_loss` is the mean squared data error of the batch
/// (normalized units); the adversarial columns are per-sample means and
/// stay empty without a discriminator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub e_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
    pub d_loss: Vec<f64>,
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
}

const HISTORY_KIND: &str = "history";

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.e_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e_loss.is_empty()
    }

    pub fn adversarial(&self) -> bool {
        !self.g_loss.is_empty()
    }

    pub fn initial_e_loss(&self) -> f64 {
        self.e_loss.first().copied().unwrap_or(f64::NAN)
    }

    /// Mean over the last `window` batches (all batches if fewer).
    pub fn tail_mean(series: &[f64], window: usize) -> f64 {
        let start = series.len().saturating_sub(window);
        stats::mean(&series[start..])
    }

    pub fn final_e_loss(&self) -> f64 {
        Self::tail_mean(&self.e_loss, 100)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut man = Manifest::new();
        man.set("batches", self.len()).set("adversarial", self.adversarial());
        let mut payload = Vec::new();
        for col in [&self.e_loss, &self.g_loss, &self.d_loss, &self.d_real, &self.d_fake] {
            for v in col {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        format::encode(HISTORY_KIND, &man, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let cols = |m: &Manifest| -> std::result::Result<(usize, usize), FormatError> {
            let adv: bool = m.parse("adversarial")?;
            Ok((m.parse("batches")?, if adv { 5 } else { 1 }))
        };
        let (man, payload) = format::decode(HISTORY_KIND, bytes, |m| {
            let (n, c) = cols(m)?;
            Ok(8 * n * c)
        })?;
        let (n, c) = cols(&man)?;
        let mut cols = payload
            .chunks_exact(8 * n.max(1))
            .map(|col| col.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect());
        let mut take = |k: usize| -> Vec<f64> {
            if k < c && n > 0 {
                cols.next().unwrap_or_default()
            } else {
                Vec::new()
            }
        };
        Ok(Self {
            e_loss: take(0),
            g_loss: take(1),
            d_loss: take(2),
            d_real: take(3),
            d_fake: take(4),
        })
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), FormatError> {
        format::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> std::result::Result<Self, FormatError> {
        Self::from_bytes(&format::read_file(path)?)
    }
}

/// Dataset records as dense matrices: data rows and the first `m`
/// conditional columns.
fn record_matrices(ds: &CycleDataset, m: usize) -> (Array2<f32>, Array2<f32>) {
    let l = ds.data_len();
    let x = Array2::from_shape_fn((ds.len(), l), |(i, j)| ds.records[i].data[j]);
    let y = Array2::from_shape_fn((ds.len(), m), |(i, j)| ds.records[i].params[j]);
    (x, y)
}

fn sample_batch(
    x: &Array2<f32>,
    y: &Array2<f32>,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> (Array2<f32>, Array2<f32>) {
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..x.nrows())).collect();
    (x.select(ndarray::Axis(0), &idx), y.select(ndarray::Axis(0), &idx))
}

fn collapse(batch: usize, what: &'static str) -> impl Fn(NeuralError) -> ExperimentError {
    move |e| match e {
        NeuralError::NonFinite(_) => ExperimentError::Collapsed { batch, what },
        other => other.into(),
    }
}

/// Trains one condition. Per batch: the autoencoder step on (x, y); then,
/// with a discriminator, the generator step on a fresh data batch and the
/// discriminator step on fresh prior samples and a fresh data batch.
pub fn train(
    cond: ExperimentCondition,
    ds: &CycleDataset,
    cfg: &TrainConfig,
) -> Result<(Autoencoder, TrainHistory)> {
    cond.validate()?;
    cfg.validate()?;
    if ds.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    if cond.m_cond != 0 && cond.m_cond != ds.param_count() {
        return Err(ExperimentError::Unsupported(format!(
            "{cond} needs {} conditional parameters, dataset has {}",
            cond.m_cond,
            ds.param_count()
        )));
    }
    let (n, c, l, h, s) = (cond.n_latent, cond.code_dim(), ds.data_len(), cfg.hidden, cfg.batch_size);
    let (x_all, y_all) = record_matrices(ds, cond.m_cond);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let act = cond.activation;
    let code_out = match act {
        Activation::Tanh => OutputKind::Tanh,
        Activation::Relu => OutputKind::Linear,
    };
    let mut enc = Mlp::<f32>::new(l, h, c, act, &mut rng).with_output(code_out);
    let mut dec = Mlp::<f32>::new(c, h, l, act, &mut rng);
    let mut disc = cond
        .has_discriminator()
        .then(|| Mlp::<f32>::new(n, h, 1, act, &mut rng));

    let mut adam_enc = AdamState::for_mlp(&enc);
    let mut adam_dec = AdamState::for_mlp(&dec);
    let mut adam_gen = AdamState::for_mlp(&enc);
    let mut adam_disc = disc.as_ref().map(AdamState::for_mlp);
    let lr = cfg.learning_rate as f32;
    let lambda = cfg.reduction.effective_lambda(cfg.lambda, l, cond.m_cond) as f32;
    let mut hist = TrainHistory::default();

    for batch in 0..cfg.n_batches {
        let (x, y) = sample_batch(&x_all, &y_all, s, &mut rng);
        let ae = ae_loss_grads(&enc, &dec, x.view(), y.view(), n, lambda)
            .map_err(collapse(batch, "autoencoder loss"))?;
        adam_enc.step(&mut enc, &ae.encoder, lr)?;
        adam_dec.step(&mut dec, &ae.decoder, lr)?;
        hist.e_loss.push(ae.data_sq_err as f64 / (s * l) as f64);

        if let (Some(d), Some(adam_d)) = (disc.as_mut(), adam_disc.as_mut()) {
            let (x, _) = sample_batch(&x_all, &y_all, s, &mut rng);
            let g = generator_loss_grads(&enc, d, x.view(), n)?;
            if !g.loss.is_finite() {
                return Err(ExperimentError::Collapsed { batch, what: "generator loss" });
            }
            adam_gen.step(&mut enc, &g.encoder, lr)?;

            let z_real = Array2::from_shape_fn((s, n), |_| rng.random_range(-1.0f32..=1.0));
            let (x, _) = sample_batch(&x_all, &y_all, s, &mut rng);
            let z_fake = enc.predict(x.view())?.slice(s![.., ..n]).to_owned();
            let de = discriminator_loss_grads(d, z_real.view(), z_fake.view())?;
            if !de.loss.is_finite() {
                return Err(ExperimentError::Collapsed { batch, what: "discriminator loss" });
            }
            adam_d.step(d, &de.grads, lr)?;
            hist.g_loss.push(g.loss as f64 / s as f64);
            hist.d_loss.push(de.loss as f64 / s as f64);
            hist.d_real.push(de.mean_real as f64);
            hist.d_fake.push(de.mean_fake as f64);
        }
    }
    if !(enc.is_finite() && dec.is_finite() && disc.as_ref().is_none_or(|d| d.is_finite())) {
        return Err(ExperimentError::Collapsed {
            batch: cfg.n_batches,
            what: "weights",
        });
    }
    let model = Autoencoder {
        condition: cond,
        encoder: enc,
        decoder: dec,
        discriminator: disc,
        stats: NormStats {
            param_lo: ds.stats.param_lo[..cond.m_cond].to_vec(),
            param_hi: ds.stats.param_hi[..cond.m_cond].to_vec(),
            ..ds.stats.clone()
        },
        param_names: ds.meta.param_names[..cond.m_cond].to_vec(),
        reference: ds.reference.clone(),
        provenance: Provenance {
            lambda: cfg.lambda,
            seed: cfg.seed,
            batches: cfg.n_batches,
            dataset_digest: format::sha256_hex(&ds.to_bytes()),
        },
    };
    Ok((model, hist))
}

const EVAL_CHUNK: usize = 512;

fn encode_all(model: &Autoencoder, x: ArrayView2<f32>) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((x.nrows(), model.condition.code_dim()));
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let code = model.encode(x.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&code);
    }
    Ok(out)
}

/// Mean over records of the mean squared element error of `g(f(x))`.
pub fn eval_reconstruction(model: &Autoencoder, ds: &CycleDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let (x, _) = record_matrices(ds, 0);
    let mut sq = 0.0f64;
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let xb = x.slice(s![start..end, ..]);
        let rec = model.decode(model.encode(xb)?.view())?;
        sq += xb
            .iter()
            .zip(rec.iter())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
    }
    Ok(sq / x.len() as f64)
}

/// Distribution of the encoded latent code over a random sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    /// KS statistic against U(-1, 1), one per latent dimension.
    pub ks: Vec<f64>,
    /// Pearson correlation for every latent pair `(i, j)`, `i < j`.
    pub correlations: Vec<(usize, usize, f64)>,
    /// Fraction of occupied cells of a 10x10 grid over [-1, 1]^2 (first
    /// two dimensions), or of 10 bins for a single dimension.
    pub occupancy: f64,
    /// Fraction of samples with every coordinate in [-1, 1].
    pub within_unit: f64,
    pub samples: Vec<Vec<f64>>,
}

pub const LATENT_SAMPLE: usize = 3000;
pub const OCCUPANCY_BINS: usize = 10;

impl LatentStats {
    pub fn from_samples(z: Vec<Vec<f64>>) -> Self {
        let n = z.first().map_or(0, Vec::len);
        let column = |k: usize| -> Vec<f64> { z.iter().map(|r| r[k]).collect() };
        let cols: Vec<Vec<f64>> = (0..n).map(column).collect();
        let ks = cols.iter().map(|c| stats::ks_uniform(c, -1.0, 1.0)).collect();
        let mut correlations = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                correlations.push((i, j, stats::pearson(&cols[i], &cols[j])));
            }
        }
        let occupancy = match n {
            0 => 0.0,
            1 => stats::occupancy_1d(&cols[0], OCCUPANCY_BINS, -1.0, 1.0),
            _ => stats::occupancy_2d(&cols[0], &cols[1], OCCUPANCY_BINS, -1.0, 1.0),
        };
        let inside = z
            .iter()
            .filter(|r| r.iter().all(|v| (-1.0..=1.0).contains(v)))
            .count();
        Self {
            ks,
            correlations,
            occupancy,
            within_unit: inside as f64 / z.len().max(1) as f64,
            samples: z,
        }
    }

    pub fn mean_ks(&self) -> f64 {
        stats::mean(&self.ks)
    }

    pub fn max_abs_correlation(&self) -> f64 {
        self.correlations.iter().map(|c| c.2.abs()).fold(0.0, f64::max)
    }
}

/// Encodes a random sample of `sample_n` records (all of them if the
/// dataset is smaller) and summarizes the latent part of the code.
pub fn latent_stats(
    model: &Autoencoder,
    ds: &CycleDataset,
    sample_n: usize,
    seed: u64,
) -> Result<LatentStats> {
    let n = model.condition.n_latent;
    if n == 0 {
        return Err(ExperimentError::Unsupported(format!(
            "{} has no latent dimensions",
            model.condition
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, ds.len(), sample_n.min(ds.len())).into_vec();
    idx.sort_unstable();
    let (x, _) = record_matrices(ds, 0);
    let code = encode_all(model, x.select(ndarray::Axis(0), &idx).view())?;
    let z = code
        .outer_iter()
        .map(|r| r.iter().take(n).map(|v| *v as f64).collect())
        .collect();
    Ok(LatentStats::from_samples(z))
}

pub const TRAJECTORY_SEGMENT_SECONDS: f64 = 2.0;
pub const DEFAULT_TRAJECTORY_STEPS: usize = 3 * (TRAJECTORY_SEGMENT_SECONDS * BOWED_SAMPLE_RATE) as usize;

/// Three smooth segments over the control range: pressure alone rises
/// 0 -> 128 at the middle position, then position alone swings through
/// its full range at full pressure, then pressure falls back while
/// position swings again.
pub fn make_eval_trajectory(n_steps: usize) -> Result<Vec<BowedParams>> {
    make_eval_trajectory_range(n_steps, CONTROL_MAX)
}

/// Same trajectory with the position axis compressed to `[0, position_max)`.
pub fn make_eval_trajectory_range(n_steps: usize, position_max: f64) -> Result<Vec<BowedParams>> {
    if n_steps < 3 {
        return Err(ExperimentError::Config(format!(
            "trajectory needs at least 3 steps, got {n_steps}"
        )));
    }
    if !(0.0..=CONTROL_MAX).contains(&position_max) {
        return Err(ExperimentError::Config(format!("position max {position_max}")));
    }
    use std::f64::consts::PI;
    let half = CONTROL_MAX / 2.0;
    let pos_scale = position_max / CONTROL_MAX;
    let bounds = [0, n_steps / 3, 2 * n_steps / 3, n_steps];
    Ok((0..n_steps)
        .map(|i| {
            let k = (0..3).rfind(|&k| i >= bounds[k]).unwrap_or(0);
            let u = (i - bounds[k]) as f64 / (bounds[k + 1] - bounds[k]) as f64;
            let swing = half + half * (2.0 * PI * u).sin();
            let (pressure, position) = match k {
                0 => (half - half * (PI * u).cos(), half),
                1 => (CONTROL_MAX, swing),
                _ => (half + half * (PI * u).cos(), swing),
            };
            BowedParams::bowed(pressure, position * pos_scale)
        })
        .collect())
}

/// A non-silent window cut from trajectory audio and the parameters in
/// force when its last sample was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    pub step: usize,
    pub window: Vec<f64>,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCapture {
    pub windows: Vec<TrajectoryWindow>,
    pub skipped: usize,
}

impl TrajectoryCapture {
    pub fn skipped_fraction(&self) -> f64 {
        self.skipped as f64 / (self.skipped + self.windows.len()).max(1) as f64
    }
}

/// Plays the trajectory through one continuously running waveguide and
/// cuts consecutive two-period windows; silent windows are skipped.
pub fn capture_trajectory(trajectory: &[BowedParams]) -> Result<TrajectoryCapture> {
    let first = trajectory
        .first()
        .ok_or_else(|| ExperimentError::Config("empty trajectory".into()))?;
    let len = waveguide::two_period_len(BOWED_SAMPLE_RATE, first.frequency);
    let mut wg = Waveguide::new(BOWED_SAMPLE_RATE, first.frequency)?;
    let mut windows = Vec::new();
    let mut skipped = 0;
    let mut buf = Vec::with_capacity(len);
    for (i, p) in trajectory.iter().enumerate() {
        buf.push(wg.step(p)?);
        if buf.len() == len {
            if waveguide::rms(&buf) >= waveguide::REJECT_RMS {
                windows.push(TrajectoryWindow {
                    step: i,
                    window: buf.clone(),
                    params: vec![p.pressure, p.position],
                });
            } else {
                skipped += 1;
            }
            buf.clear();
        }
    }
    Ok(TrajectoryCapture { windows, skipped })
}

/// Anything that can map raw trajectory windows to raw (0-128) parameter
/// estimates ordered as pressure, position.
pub trait ParamEstimator {
    fn estimate(&self, windows: &[TrajectoryWindow]) -> Result<Vec<Vec<f64>>>;
}

/// Returns the true parameters; the zero-error baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleEstimator;

impl ParamEstimator for OracleEstimator {
    fn estimate(&self, windows: &[TrajectoryWindow]) -> Result<Vec<Vec<f64>>> {
        Ok(windows.iter().map(|w| w.params.clone()).collect())
    }
}

impl ParamEstimator for Autoencoder {
    /// Aligns each window to the training reference, applies the training
    /// statistics, and reads the conditional head of the code.
    fn estimate(&self, windows: &[TrajectoryWindow]) -> Result<Vec<Vec<f64>>> {
        if self.param_names != BOWED_PARAM_NAMES {
            return Err(ExperimentError::Unsupported(format!(
                "{} does not estimate pressure and position",
                self.condition
            )));
        }
        let rows = windows
            .par_iter()
            .map(|w| dataset::prepare_window_with(&w.window, &self.reference, &self.stats))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let l = self.stats.len();
        let x = Array2::from_shape_fn((rows.len(), l), |(i, j)| rows[i][j]);
        let code = encode_all(self, x.view())?;
        let ranges = self.stats.ranges();
        let n = self.condition.n_latent;
        Ok(code
            .outer_iter()
            .map(|r| {
                let y: Vec<f64> = r.iter().skip(n).map(|v| *v as f64).collect();
                dataset::unscale_params(&y, &ranges)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationReport {
    /// RMS over all windows and both parameters, 0-128 units.
    pub rms: f64,
    pub per_param_rms: Vec<f64>,
    pub skipped_fraction: f64,
    pub steps: Vec<usize>,
    pub truth: Vec<Vec<f64>>,
    pub estimates: Vec<Vec<f64>>,
}

pub fn estimation_report(
    estimator: &dyn ParamEstimator,
    capture: &TrajectoryCapture,
) -> Result<EstimationReport> {
    if capture.windows.is_empty() {
        return Err(ExperimentError::Config("trajectory produced no usable windows".into()));
    }
    let estimates = estimator.estimate(&capture.windows)?;
    let truth: Vec<Vec<f64>> = capture.windows.iter().map(|w| w.params.clone()).collect();
    let k = truth[0].len();
    let mut per = vec![0.0; k];
    for (t, e) in truth.iter().zip(&estimates) {
        for j in 0..k {
            per[j] += (e[j] - t[j]).powi(2);
        }
    }
    let total: f64 = per.iter().sum();
    let n = truth.len() as f64;
    Ok(EstimationReport {
        rms: (total / (n * k as f64)).sqrt(),
        per_param_rms: per.iter().map(|v| (v / n).sqrt()).collect(),
        skipped_fraction: capture.skipped_fraction(),
        steps: capture.windows.iter().map(|w| w.step).collect(),
        truth,
        estimates,
    })
}

/// Synthesizes fresh audio along `trajectory` and scores the estimator.
pub fn eval_param_estimation(
    estimator: &dyn ParamEstimator,
    trajectory: &[BowedParams],
) -> Result<EstimationReport> {
    estimation_report(estimator, &capture_trajectory(trajectory)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub condition: ExperimentCondition,
    pub mse: f64,
}

/// Trains one model per (latent count, adversarial flag) with the
/// dataset's conditional parameters and reports reconstruction error.
pub fn latent_sweep(
    ds: &CycleDataset,
    latent_counts: &[usize],
    adversarial: &[bool],
    cfg: &TrainConfig,
) -> Result<Vec<SweepCell>> {
    let conds = latent_counts
        .iter()
        .flat_map(|&n| adversarial.iter().map(move |&a| (n, a)))
        .map(|(n, a)| Ok(ExperimentCondition::new(n, ds.param_count(), a, Activation::Relu)?))
        .collect::<Result<Vec<_>>>()?;
    conds
        .into_par_iter()
        .map(|condition| {
            let (model, _) = train(condition, ds, cfg)?;
            Ok(SweepCell {
                condition,
                mse: eval_reconstruction(&model, ds)?,
            })
        })
        .collect()
}

/// Spearman correlation between latent count and MSE for one flag.
pub fn sweep_trend(cells: &[SweepCell], adversarial: bool) -> f64 {
    let (n, mse): (Vec<f64>, Vec<f64>) = cells
        .iter()
        .filter(|c| c.condition.adversarial == adversarial)
        .map(|c| (c.condition.n_latent as f64, c.mse))
        .unzip();
    stats::spearman(&n, &mse)
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub train: TrainConfig,
    pub conditions: Vec<ExperimentCondition>,
    pub trajectory_steps: usize,
    pub latent_sample: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            conditions: ExperimentCondition::paper_suite(),
            trajectory_steps: DEFAULT_TRAJECTORY_STEPS,
            latent_sample: LATENT_SAMPLE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellMetrics {
    pub history: TrainHistory,
    pub recon_mse: f64,
    pub latent: Option<LatentStats>,
    pub estimation: Option<EstimationReport>,
}

impl CellMetrics {
    /// Mean discriminator outputs over the last 500 batches.
    pub fn late_discriminator(&self) -> Option<(f64, f64)> {
        self.history.adversarial().then(|| {
            (
                TrainHistory::tail_mean(&self.history.d_real, 500),
                TrainHistory::tail_mean(&self.history.d_fake, 500),
            )
        })
    }
}

#[derive(Debug, Clone)]
pub struct CellReport {
    pub label: String,
    pub condition: ExperimentCondition,
    pub dataset: String,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub cells: Vec<CellReport>,
}

const REPORT_KIND: &str = "report";

struct CellJob<'a> {
    label: String,
    condition: ExperimentCondition,
    ds: &'a CycleDataset,
    dataset: String,
    position_max: f64,
}

fn run_cell(job: &CellJob, cfg: &SuiteConfig) -> Result<CellMetrics> {
    let (model, history) = train(job.condition, job.ds, &cfg.train)?;
    let latent = if job.condition.n_latent > 0 {
        Some(latent_stats(&model, job.ds, cfg.latent_sample, cfg.train.seed)?)
    } else {
        None
    };
    let estimation = if job.condition.m_cond == BOWED_PARAM_NAMES.len()
        && model.param_names == BOWED_PARAM_NAMES
    {
        let traj = make_eval_trajectory_range(cfg.trajectory_steps, job.position_max)?;
        Some(eval_param_estimation(&model, &traj)?)
    } else {
        None
    };
    Ok(CellMetrics {
        recon_mse: eval_reconstruction(&model, job.ds)?,
        history,
        latent,
        estimation,
    })
}

/// Runs every configured condition on `ds1`, plus the parameter-estimation
/// comparison of D1_Z2_Y trained on the full and half (position < 64)
/// versions of both datasets. Failed cells are reported, not fatal.
pub fn run_condition_suite(
    ds1: &CycleDataset,
    ds2: &CycleDataset,
    cfg: &SuiteConfig,
) -> Result<SuiteReport> {
    let half1 = dataset::filter_half(ds1)?;
    let half2 = dataset::filter_half(ds2)?;
    let estimator: ExperimentCondition = "D1_Z2_Y".parse()?;
    let half_max = CONTROL_MAX / 2.0 - 1.0;
    let mut jobs: Vec<CellJob> = cfg
        .conditions
        .iter()
        .map(|&condition| CellJob {
            label: condition.to_string(),
            condition,
            ds: ds1,
            dataset: ds1.meta.source.clone(),
            position_max: CONTROL_MAX,
        })
        .collect();
    for (ds, source, name, pmax) in [
        (ds1, &ds1.meta.source, "full", CONTROL_MAX),
        (&half1, &ds1.meta.source, "half", half_max),
        (ds2, &ds2.meta.source, "full", CONTROL_MAX),
        (&half2, &ds2.meta.source, "half", half_max),
    ] {
        jobs.push(CellJob {
            label: format!("estimate/{source}-{name}"),
            condition: estimator,
            ds,
            dataset: format!("{source}-{name}"),
            position_max: pmax,
        });
    }
    let cells = jobs
        .par_iter()
        .map(|job| CellReport {
            label: job.label.clone(),
            condition: job.condition,
            dataset: job.dataset.clone(),
            outcome: run_cell(job, cfg).map_err(|e| e.to_string()),
        })
        .collect();
    Ok(SuiteReport { cells })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl SuiteReport {
    pub fn cell(&self, label: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.label == label)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<26} {:<14} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8} {:>8}",
            "cell", "dataset", "E_init", "E_final", "mse", "KS", "|corr|", "occup", "RMS"
        );
        for c in &self.cells {
            match &c.outcome {
                Ok(m) => {
                    let _ = writeln!(
                        out,
                        "{:<26} {:<14} {:>9.4} {:>9.4} {:>9.4} {:>8} {:>8} {:>8} {:>8}",
                        c.label,
                        c.dataset,
                        m.history.initial_e_loss(),
                        m.history.final_e_loss(),
                        m.recon_mse,
                        opt(m.latent.as_ref().map(LatentStats::mean_ks)),
                        opt(m.latent.as_ref().map(LatentStats::max_abs_correlation)),
                        opt(m.latent.as_ref().map(|l| l.occupancy)),
                        opt(m.estimation.as_ref().map(|e| e.rms)),
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{:<26} {:<14} failed: {e}", c.label, c.dataset);
                }
            }
        }
        out
    }

    pub fn to_manifest(&self) -> Manifest {
        let mut man = Manifest::new();
        man.set("cells", format::join_list(&self.cells.iter().map(|c| c.label.clone()).collect::<Vec<_>>()));
        for c in &self.cells {
            let key = |k: &str| format!("{}.{k}", c.label);
            man.set(&key("dataset"), &c.dataset);
            match &c.outcome {
                Err(e) => {
                    man.set(&key("error"), e.replace('\n', " "));
                }
                Ok(m) => {
                    man.set(&key("e_loss_initial"), m.history.initial_e_loss())
                        .set(&key("e_loss_final"), m.history.final_e_loss())
                        .set(&key("recon_mse"), m.recon_mse);
                    if m.history.adversarial() {
                        man.set(&key("g_loss_final"), TrainHistory::tail_mean(&m.history.g_loss, 100))
                            .set(&key("d_loss_final"), TrainHistory::tail_mean(&m.history.d_loss, 100));
                    }
                    if let Some((real, fake)) = m.late_discriminator() {
                        man.set(&key("d_real_late"), real).set(&key("d_fake_late"), fake);
                    }
                    if let Some(l) = &m.latent {
                        man.set(&key("ks"), format::join_list(&l.ks))
                            .set(&key("occupancy"), l.occupancy)
                            .set(&key("within_unit"), l.within_unit);
                        for (i, j, r) in &l.correlations {
                            man.set(&key(&format!("corr_{i}_{j}")), r);
                        }
                    }
                    if let Some(e) = &m.estimation {
                        man.set(&key("estimation_rms"), e.rms)
                            .set(&key("estimation_rms_per_param"), format::join_list(&e.per_param_rms))
                            .set(&key("estimation_skipped"), e.skipped_fraction);
                    }
                }
            }
        }
        man
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), FormatError> {
        format::write_file(path, &format::encode(REPORT_KIND, &self.to_manifest(), &[]))
    }

    /// Reads back the manifest of a saved report.
    pub fn load_manifest(path: &Path) -> std::result::Result<Manifest, FormatError> {
        let bytes = format::read_file(path)?;
        Ok(format::decode(REPORT_KIND, &bytes, |_| Ok(0))?.0)
    }
}
