//! Digital waveguide bowed string.
//!
//! Two fractional delay lines meet at the bow point. The bridge side
//! reflects through a one-pole lowpass, the nut side inverts, and the bow
//! injects velocity through a friction table. A resonant biquad colours the
//! bridge output. All control values use the 0..=128 range of the original
//! instrument controls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sample rate used for every bowed-string dataset.
pub const BOWED_SAMPLE_RATE: f64 = 48_000.0;

/// Frequency chosen so that two periods span 201 samples at 48 kHz.
pub const BOWED_F0: f64 = 476.5;

/// Upper end of the control range.
pub const CONTROL_MAX: f64 = 128.0;

/// Captures whose RMS falls below this are treated as silent.
pub const REJECT_RMS: f64 = 1e-5;

/// Loop delay consumed by the reflection filter and the two read latencies.
const DELAY_COMPENSATION: f64 = 3.79;

const MIN_LOOP_DELAY: f64 = 8.0;
const BOW_TABLE_OFFSET: f64 = 0.001;
const BODY_GAIN: f64 = 0.2;
const BODY_FREQ: f64 = 500.0;
const BODY_RADIUS: f64 = 0.85;
const STRING_FILTER_GAIN: f64 = 0.95;
const MAX_BOW_VELOCITY: f64 = 0.25;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum WaveguideError {
    #[error("invalid bowed-string parameters: {0}")]
    InvalidParams(String),
    #[error("simulation diverged at sample {0}")]
    Diverged(u64),
}

pub type Result<T> = std::result::Result<T, WaveguideError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BowedParams {
    pub pressure: f64,
    pub position: f64,
    pub velocity: f64,
    pub frequency: f64,
    pub volume: f64,
}

impl BowedParams {
    /// Grid-capture parameters: velocity and volume held at 100, f0 = 476.5 Hz.
    pub fn bowed(pressure: f64, position: f64) -> Self {
        Self {
            pressure,
            position,
            velocity: 100.0,
            frequency: BOWED_F0,
            volume: 100.0,
        }
    }

    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        for (name, v) in [
            ("pressure", self.pressure),
            ("position", self.position),
            ("velocity", self.velocity),
            ("volume", self.volume),
        ] {
            if !(0.0..=CONTROL_MAX).contains(&v) {
                return Err(WaveguideError::InvalidParams(format!(
                    "{name}={v} outside [0, 128]"
                )));
            }
        }
        if !(self.frequency > 0.0) || sample_rate / self.frequency < MIN_LOOP_DELAY {
            return Err(WaveguideError::InvalidParams(format!(
                "frequency {} Hz gives a loop shorter than {MIN_LOOP_DELAY} samples",
                self.frequency
            )));
        }
        Ok(())
    }
}

/// Linearly interpolated delay line.
#[derive(Debug, Clone)]
struct DelayLine {
    buf: Vec<f64>,
    write: usize,
    delay_int: usize,
    frac: f64,
    last: f64,
}

impl DelayLine {
    fn new(max_delay: usize) -> Self {
        Self {
            buf: vec![0.0; max_delay + 2],
            write: 0,
            delay_int: 0,
            frac: 0.0,
            last: 0.0,
        }
    }

    fn set_delay(&mut self, delay: f64) {
        let max = (self.buf.len() - 2) as f64;
        let delay = delay.clamp(0.0, max);
        self.delay_int = delay.floor() as usize;
        self.frac = delay - delay.floor();
    }

    fn tick(&mut self, input: f64) -> f64 {
        let n = self.buf.len();
        self.buf[self.write] = input;
        let a = (self.write + n - self.delay_int) % n;
        let b = (a + n - 1) % n;
        self.last = self.buf[a] * (1.0 - self.frac) + self.buf[b] * self.frac;
        self.write = (self.write + 1) % n;
        self.last
    }
}

#[derive(Debug, Clone, Copy)]
struct OnePole {
    b0: f64,
    a1: f64,
    gain: f64,
    y1: f64,
}

impl OnePole {
    fn lowpass(pole: f64, gain: f64) -> Self {
        Self {
            b0: 1.0 - pole.abs(),
            a1: -pole,
            gain,
            y1: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        self.y1 = self.gain * self.b0 * x - self.a1 * self.y1;
        self.y1
    }
}

/// Two-pole resonator with zeros at DC and Nyquist.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Biquad {
    fn resonance(freq: f64, radius: f64, sample_rate: f64) -> Self {
        let a2 = radius * radius;
        let a1 = -2.0 * radius * (std::f64::consts::TAU * freq / sample_rate).cos();
        let b0 = 0.5 - 0.5 * a2;
        Self {
            b0,
            b2: -b0,
            a1,
            a2,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Friction curve mapping relative bow/string velocity to reflection mix.
pub fn bow_table(delta_v: f64, slope: f64) -> f64 {
    let s = ((delta_v + BOW_TABLE_OFFSET) * slope).abs() + 0.75;
    s.powi(-4).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy)]
struct Derived {
    slope: f64,
    bow_down: bool,
    bow_velocity: f64,
}

/// Complete state of one bowed string.
#[derive(Debug, Clone)]
pub struct Waveguide {
    bridge: DelayLine,
    neck: DelayLine,
    string_filter: OnePole,
    body: Biquad,
    sample_rate: f64,
    lowest_frequency: f64,
    current: Option<BowedParams>,
    derived: Derived,
    samples: u64,
}

impl Waveguide {
    /// A silent string able to play down to `lowest_frequency`.
    pub fn new(sample_rate: f64, lowest_frequency: f64) -> Result<Self> {
        if !(sample_rate > 0.0) || !(lowest_frequency > 0.0) {
            return Err(WaveguideError::InvalidParams(format!(
                "sample rate {sample_rate} / lowest frequency {lowest_frequency}"
            )));
        }
        let max_delay = (sample_rate / lowest_frequency).ceil() as usize + 1;
        let pole = 0.75 - 0.2 * 22_050.0 / sample_rate;
        Ok(Self {
            bridge: DelayLine::new(max_delay),
            neck: DelayLine::new(max_delay),
            string_filter: OnePole::lowpass(pole, STRING_FILTER_GAIN),
            body: Biquad::resonance(BODY_FREQ, BODY_RADIUS, sample_rate),
            sample_rate,
            lowest_frequency,
            current: None,
            derived: Derived {
                slope: 5.0,
                bow_down: false,
                bow_velocity: 0.0,
            },
            samples: 0,
        })
    }

    /// A fresh string at the bowed dataset rate.
    pub fn bowed() -> Self {
        Self::new(BOWED_SAMPLE_RATE, BOWED_F0 / 2.0).expect("constant configuration")
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    fn apply(&mut self, params: &BowedParams) -> Result<()> {
        params.validate(self.sample_rate)?;
        if params.frequency < self.lowest_frequency {
            return Err(WaveguideError::InvalidParams(format!(
                "frequency {} below the allocated minimum {}",
                params.frequency, self.lowest_frequency
            )));
        }
        let p = params.pressure / CONTROL_MAX;
        let beta = 0.027236 + 0.2 * (params.position / CONTROL_MAX);
        let total = (self.sample_rate / params.frequency - DELAY_COMPENSATION).max(0.3);
        self.bridge.set_delay(total * beta);
        self.neck.set_delay(total * (1.0 - beta));
        self.derived = Derived {
            slope: 5.0 - 4.0 * p,
            bow_down: p >= 0.01,
            bow_velocity: MAX_BOW_VELOCITY
                * (params.velocity / CONTROL_MAX)
                * (params.volume / CONTROL_MAX),
        };
        self.current = Some(*params);
        Ok(())
    }

    /// Advances the string by one sample.
    pub fn step(&mut self, params: &BowedParams) -> Result<f64> {
        if self.current.as_ref() != Some(params) {
            self.apply(params)?;
        }
        let d = self.derived;
        let bridge_refl = -self.string_filter.tick(self.bridge.last);
        let nut_refl = -self.neck.last;
        let string_v = bridge_refl + nut_refl;
        let delta_v = d.bow_velocity - string_v;
        let injected = if d.bow_down {
            delta_v * bow_table(delta_v, d.slope)
        } else {
            0.0
        };
        self.neck.tick(bridge_refl + injected);
        let bridge_out = self.bridge.tick(nut_refl + injected);
        let out = BODY_GAIN * self.body.tick(bridge_out);
        self.samples += 1;
        if !(out.is_finite() && bridge_out.is_finite() && self.neck.last.is_finite()) {
            return Err(WaveguideError::Diverged(self.samples));
        }
        Ok(out)
    }

    /// Runs `n` steps with fixed parameters, appending to `out`.
    pub fn run_into(&mut self, params: &BowedParams, n: usize, out: &mut Vec<f64>) -> Result<()> {
        out.reserve(n);
        for _ in 0..n {
            out.push(self.step(params)?);
        }
        Ok(())
    }
}

/// Renders `n_samples` from a fresh string.
pub fn run(params: &BowedParams, n_samples: usize, sample_rate: f64) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(WaveguideError::InvalidParams("n_samples must be > 0".into()));
    }
    params.validate(sample_rate)?;
    let mut wg = Waveguide::new(sample_rate, params.frequency)?;
    let mut out = Vec::with_capacity(n_samples);
    wg.run_into(params, n_samples, &mut out)?;
    Ok(out)
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Number of samples spanning two periods of `f0`.
pub fn two_period_len(sample_rate: f64, f0: f64) -> usize {
    (2.0 * sample_rate / f0).round() as usize
}

/// Runs one second at `params` and keeps the final `cycle_len` samples,
/// or `None` when they are silent.
pub fn capture_steady(
    params: &BowedParams,
    cycle_len: usize,
    sample_rate: f64,
) -> Result<Option<Vec<f64>>> {
    let n = (sample_rate.round() as usize).max(cycle_len);
    let signal = run(params, n, sample_rate)?;
    let tail = signal[n - cycle_len..].to_vec();
    Ok((rms(&tail) >= REJECT_RMS).then_some(tail))
}

/// Random piecewise-constant parameter schedule for dynamic capture.
#[derive(Debug, Clone)]
pub struct DynamicSchedule {
    pub seed: u64,
    /// Hold duration bounds in seconds.
    pub hold_range: (f64, f64),
    pub velocity: f64,
    pub volume: f64,
    pub frequency: f64,
}

impl DynamicSchedule {
    pub fn bowed(seed: u64) -> Self {
        Self {
            seed,
            hold_range: (0.05, 0.5),
            velocity: 100.0,
            volume: 100.0,
            frequency: BOWED_F0,
        }
    }
}

/// One captured cycle with the parameters in force at capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCycle {
    pub cycle: Vec<f64>,
    pub params: BowedParams,
}

/// Runs the string continuously while pressure and position jump to
/// uniformly drawn values at random intervals, capturing consecutive
/// two-period windows until `n_cycles` non-silent ones are collected.
pub fn capture_dynamic(
    schedule: &DynamicSchedule,
    n_cycles: usize,
    sample_rate: f64,
) -> Result<Vec<LabeledCycle>> {
    let (lo, hi) = schedule.hold_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(WaveguideError::InvalidParams(format!(
            "hold range {lo}..{hi}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let cycle_len = two_period_len(sample_rate, schedule.frequency);
    let draw = |rng: &mut ChaCha8Rng| BowedParams {
        pressure: rng.random_range(0.0..=CONTROL_MAX),
        position: rng.random_range(0.0..=CONTROL_MAX),
        velocity: schedule.velocity,
        frequency: schedule.frequency,
        volume: schedule.volume,
    };
    let hold = |rng: &mut ChaCha8Rng| {
        let secs = if hi > lo { rng.random_range(lo..hi) } else { lo };
        ((secs * sample_rate).round() as u64).max(1)
    };

    let mut wg = Waveguide::new(sample_rate, schedule.frequency)?;
    let mut params = draw(&mut rng);
    let mut remaining = hold(&mut rng);
    // settle on the first draw before capturing
    for _ in 0..sample_rate.round() as usize {
        wg.step(&params)?;
    }

    let mut window = vec![0.0; cycle_len];
    let mut out = Vec::with_capacity(n_cycles);
    while out.len() < n_cycles {
        for slot in window.iter_mut() {
            if remaining == 0 {
                params = draw(&mut rng);
                remaining = hold(&mut rng);
            }
            *slot = wg.step(&params)?;
            remaining -= 1;
        }
        if rms(&window) >= REJECT_RMS {
            out.push(LabeledCycle {
                cycle: window.clone(),
                params,
            });
        }
    }
    Ok(out)
}

/// Measures the mean period from upward zero crossings (linear
/// interpolation), skipping the first `skip` samples.
pub fn zero_crossing_period(signal: &[f64], skip: usize) -> Option<f64> {
    let mean = signal[skip..].iter().sum::<f64>() / (signal.len() - skip) as f64;
    let mut crossings = Vec::new();
    for i in skip.max(1)..signal.len() {
        let (a, b) = (signal[i - 1] - mean, signal[i] - mean);
        if a < 0.0 && b >= 0.0 {
            crossings.push((i - 1) as f64 + a / (a - b));
        }
    }
    if crossings.len() < 2 {
        return None;
    }
    Some((crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bow_table_is_bounded() {
        for i in -100..=100 {
            let v = bow_table(i as f64 * 0.05, 3.0);
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(bow_table(-0.001, 5.0), 0.75f64.powi(-4).min(1.0));
    }

    #[test]
    fn zero_velocity_is_silent() {
        let p = BowedParams {
            velocity: 0.0,
            ..BowedParams::bowed(64.0, 64.0)
        };
        let s = run(&p, 48_000, BOWED_SAMPLE_RATE).unwrap();
        assert!(rms(&s) < 1e-5);
    }

    #[test]
    fn run_has_requested_length_and_is_deterministic() {
        let p = BowedParams::bowed(64.0, 64.0);
        let a = run(&p, 48_000, BOWED_SAMPLE_RATE).unwrap();
        let b = run(&p, 48_000, BOWED_SAMPLE_RATE).unwrap();
        assert_eq!(a.len(), 48_000);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_out_of_range_controls() {
        let p = BowedParams::bowed(129.0, 64.0);
        assert!(matches!(
            run(&p, 10, BOWED_SAMPLE_RATE),
            Err(WaveguideError::InvalidParams(_))
        ));
        let p = BowedParams {
            frequency: 10_000.0,
            ..BowedParams::bowed(64.0, 64.0)
        };
        assert!(p.validate(BOWED_SAMPLE_RATE).is_err());
        assert!(run(&BowedParams::bowed(64.0, 64.0), 0, BOWED_SAMPLE_RATE).is_err());
    }

    #[test]
    fn two_period_window_at_bowed_f0() {
        assert_eq!(two_period_len(BOWED_SAMPLE_RATE, BOWED_F0), 201);
        assert_eq!(two_period_len(44_100.0, 44_100.0 / 400.5), 801);
    }

    #[test]
    fn zero_pressure_is_rejected() {
        let p = BowedParams::bowed(0.0, 128.0);
        assert_eq!(capture_steady(&p, 201, BOWED_SAMPLE_RATE).unwrap(), None);
    }

    #[test]
    fn dynamic_capture_is_deterministic() {
        let s = DynamicSchedule::bowed(3);
        let a = capture_dynamic(&s, 50, BOWED_SAMPLE_RATE).unwrap();
        let b = capture_dynamic(&s, 50, BOWED_SAMPLE_RATE).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
        assert!(a.iter().all(|c| c.cycle.len() == 201 && rms(&c.cycle) >= REJECT_RMS));
    }
}
