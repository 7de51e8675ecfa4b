//! Live engine: one audio thread renders the decoder (and a waveguide for
//! A/B comparison) and publishes snapshots for the frame sampler.
//!
//! Network → audio goes through a triple buffer of parameter snapshots;
//! audio → sampler through another. Neither side ever blocks the other.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use sounderfeit::model::DecoderModel;
use sounderfeit::synth::{ParamSlot, SynthParams, SynthState};
use sounderfeit::waveguide::{BowedParams, Waveguide, BOWED_SAMPLE_RATE};
use triple_buffer::{triple_buffer, Input, Output};

use crate::protocol::{Frame, ParamInfo, Source};

/// Selects the audio sink: `null` (default) paces rendering in real time
/// and discards the samples.
pub const AUDIO_DEVICE_ENV: &str = "SOUNDERFEIT_AUDIO_DEVICE";

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Synth(#[from] sounderfeit::synth::SynthError),
    #[error("parameter `{name}`: value {value} is not a finite number")]
    Value { name: String, value: f64 },
    #[error("audio device `{0}` is not available (supported: null)")]
    Device(String),
    #[error("failed to start the audio thread: {0}")]
    Thread(std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioDevice {
    /// Real-time paced, output discarded.
    Null,
}

impl AudioDevice {
    pub fn parse(name: &str) -> Result<Self, EngineError> {
        match name {
            "" | "null" | "default" => Ok(AudioDevice::Null),
            other => Err(EngineError::Device(other.to_string())),
        }
    }

    pub fn from_env() -> Result<Self, EngineError> {
        Self::parse(&std::env::var(AUDIO_DEVICE_ENV).unwrap_or_default())
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub sample_rate: f64,
    pub device: AudioDevice,
    /// Audio queued ahead of the playback clock.
    pub buffer: Duration,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            sample_rate: BOWED_SAMPLE_RATE,
            device: AudioDevice::Null,
            buffer: Duration::from_millis(50),
        }
    }
}

#[derive(Debug, Clone)]
struct ControlSnapshot {
    params: SynthParams,
    source: Source,
    bowed: BowedParams,
}

/// What the audio thread last rendered.
#[derive(Debug, Clone)]
struct FrameSnapshot {
    sample_index: u64,
    source: Source,
    /// Latched parameters in user units, `frame_params` order minus the flag.
    params: Vec<f32>,
    cycle: Vec<f32>,
}

#[derive(Debug, Default)]
struct Counters {
    samples: AtomicU64,
    blocks: AtomicU64,
    underruns: AtomicU64,
    max_lag_us: AtomicU64,
    errors: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineStats {
    pub samples: u64,
    pub blocks: u64,
    pub underruns: u64,
    pub max_lag_us: u64,
    pub errors: u64,
}

struct ControlState {
    snapshot: ControlSnapshot,
    input: Input<ControlSnapshot>,
}

pub struct Engine {
    model: Arc<DecoderModel>,
    slots: Vec<(String, ParamSlot)>,
    sample_rate: f64,
    hop: usize,
    control: Mutex<ControlState>,
    frames: Mutex<Option<Output<FrameSnapshot>>>,
    counters: Arc<Counters>,
    running: Arc<AtomicBool>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

fn param_slots(model: &DecoderModel) -> Vec<(String, ParamSlot)> {
    let cond = (0..model.m_cond).map(|i| (model.param_names[i].clone(), ParamSlot::Conditional(i)));
    let lat = (0..model.n_latent).map(|i| (format!("z{i}"), ParamSlot::Latent(i)));
    cond.chain(lat).collect()
}

/// Waveguide settings mirroring the decoder's conditional parameters
/// (only meaningful for bowed models).
fn bowed_from(model: &DecoderModel, slots: &[(String, ParamSlot)], params: &SynthParams) -> BowedParams {
    let get = |name: &str| {
        slots
            .iter()
            .find(|(n, _)| n == name)
            .map_or(64.0, |(_, s)| s.read(model, params))
    };
    BowedParams::bowed(get("pressure"), get("position"))
}

impl Engine {
    pub fn start(model: DecoderModel, config: EngineConfig) -> Result<Self, EngineError> {
        let slots = param_slots(&model);
        let synth = SynthState::new(model.clone())?;
        let hop = synth.hop();
        let l = synth.cycle_len();
        let params = SynthParams::neutral(&model);
        let snapshot = ControlSnapshot {
            bowed: bowed_from(&model, &slots, &params),
            params,
            source: Source::Neural,
        };
        let (control_in, control_out) = triple_buffer(&snapshot);
        let (frame_in, frame_out) = triple_buffer(&FrameSnapshot {
            sample_index: 0,
            source: Source::Neural,
            params: vec![0.0; slots.len()],
            cycle: vec![0.0; l],
        });
        let counters = Arc::new(Counters::default());
        let running = Arc::new(AtomicBool::new(true));
        let model = Arc::new(model);
        let mut audio = AudioThread {
            synth,
            waveguide: Waveguide::bowed(),
            model: model.clone(),
            slots: slots.clone(),
            control: control_out,
            frames: frame_in,
            counters: counters.clone(),
            running: running.clone(),
            neural: vec![0.0; hop],
            physical: vec![0.0; hop],
            history: vec![0.0; l + 1],
            head: 0,
            sample_rate: config.sample_rate,
            buffer: config.buffer,
        };
        let thread = std::thread::Builder::new()
            .name("audio".into())
            .spawn(move || audio.run())
            .map_err(EngineError::Thread)?;
        Ok(Self {
            model,
            slots,
            sample_rate: config.sample_rate,
            hop,
            control: Mutex::new(ControlState {
                snapshot,
                input: control_in,
            }),
            frames: Mutex::new(Some(frame_out)),
            counters,
            running,
            thread: Mutex::new(Some(thread)),
        })
    }

    pub fn model(&self) -> &DecoderModel {
        &self.model
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn cycle_len(&self) -> usize {
        self.model.cycle_len()
    }

    /// Names of the frame parameter block; entry 0 is the source flag.
    pub fn frame_params(&self) -> Vec<String> {
        std::iter::once("source".to_string())
            .chain(self.slots.iter().map(|(n, _)| n.clone()))
            .collect()
    }

    fn publish(state: &mut ControlState) {
        state.input.write(state.snapshot.clone());
    }

    /// Clamps and applies one parameter; returns the applied value.
    pub fn set_param(&self, name: &str, value: f64) -> Result<f64, EngineError> {
        if !value.is_finite() {
            return Err(EngineError::Value {
                name: name.to_string(),
                value,
            });
        }
        let (_, slot) = self
            .slots
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| sounderfeit::synth::SynthError::UnknownParam(name.to_string()))?;
        let mut state = self.control.lock().unwrap_or_else(|e| e.into_inner());
        let applied = slot.apply(&self.model, &mut state.snapshot.params, value);
        state.snapshot.bowed = bowed_from(&self.model, &self.slots, &state.snapshot.params);
        Self::publish(&mut state);
        Ok(applied)
    }

    pub fn select_source(&self, source: Source) {
        let mut state = self.control.lock().unwrap_or_else(|e| e.into_inner());
        state.snapshot.source = source;
        Self::publish(&mut state);
    }

    /// Requested (not necessarily latched yet) control state.
    pub fn state(&self) -> (Source, Vec<ParamInfo>) {
        let state = self.control.lock().unwrap_or_else(|e| e.into_inner());
        let params = self
            .slots
            .iter()
            .map(|(name, slot)| {
                let (lo, hi) = slot.range(&self.model);
                ParamInfo {
                    name: name.clone(),
                    value: slot.read(&self.model, &state.snapshot.params),
                    lo,
                    hi,
                    latent: matches!(slot, ParamSlot::Latent(_)),
                }
            })
            .collect();
        (state.snapshot.source, params)
    }

    /// The single reader of audio-thread snapshots; `None` once taken.
    pub fn take_frame_reader(&self) -> Option<FrameReader> {
        let out = self.frames.lock().unwrap_or_else(|e| e.into_inner()).take()?;
        Some(FrameReader::new(out, self.cycle_len(), self.sample_rate))
    }

    pub fn stats(&self) -> EngineStats {
        let c = &self.counters;
        EngineStats {
            samples: c.samples.load(Ordering::Acquire),
            blocks: c.blocks.load(Ordering::Acquire),
            underruns: c.underruns.load(Ordering::Acquire),
            max_lag_us: c.max_lag_us.load(Ordering::Acquire),
            errors: c.errors.load(Ordering::Acquire),
        }
    }

    pub fn shutdown(&self) {
        self.running.store(false, Ordering::Release);
        if let Some(t) = self.thread.lock().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = t.join();
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct AudioThread {
    synth: SynthState,
    waveguide: Waveguide,
    model: Arc<DecoderModel>,
    slots: Vec<(String, ParamSlot)>,
    control: Output<ControlSnapshot>,
    frames: Input<FrameSnapshot>,
    counters: Arc<Counters>,
    running: Arc<AtomicBool>,
    neural: Vec<f64>,
    physical: Vec<f64>,
    /// Ring of the last L+1 waveguide samples.
    history: Vec<f64>,
    head: usize,
    sample_rate: f64,
    buffer: Duration,
}

impl AudioThread {
    fn run(&mut self) {
        let hop = self.neural.len();
        let mut clock = PacedClock::new(self.sample_rate, self.buffer);
        let mut samples = 0u64;
        while self.running.load(Ordering::Acquire) {
            let (source, bowed) = {
                let c = self.control.read();
                if self.synth.set_params(&c.params).is_err() {
                    self.counters.errors.fetch_add(1, Ordering::Relaxed);
                }
                (c.source, c.bowed)
            };
            if self.synth.render_block(&mut self.neural).is_err() {
                self.counters.errors.fetch_add(1, Ordering::Relaxed);
                self.neural.fill(0.0);
            }
            for i in 0..hop {
                let s = match self.waveguide.step(&bowed) {
                    Ok(s) => s,
                    Err(_) => {
                        self.counters.errors.fetch_add(1, Ordering::Relaxed);
                        self.waveguide = Waveguide::bowed();
                        0.0
                    }
                };
                self.physical[i] = s;
                self.history[self.head] = s;
                self.head = (self.head + 1) % self.history.len();
            }
            samples += hop as u64;
            self.snapshot(samples, source);
            // The rendered block would be handed to the device here.
            let _out = match source {
                Source::Neural => &self.neural,
                Source::Waveguide => &self.physical,
            };
            let lag = clock.wait(hop as u64);
            let c = &self.counters;
            if let Some(lag) = lag {
                c.underruns.fetch_add(1, Ordering::Relaxed);
                c.max_lag_us.fetch_max(lag.as_micros() as u64, Ordering::Relaxed);
            }
            c.blocks.fetch_add(1, Ordering::Relaxed);
            c.samples.store(samples, Ordering::Release);
        }
    }

    fn snapshot(&mut self, sample_index: u64, source: Source) {
        let latched = self.synth.params();
        let snap = self.frames.input_buffer_mut();
        snap.sample_index = sample_index;
        snap.source = source;
        for (dst, (_, slot)) in snap.params.iter_mut().zip(&self.slots) {
            *dst = slot.read(&self.model, latched) as f32;
        }
        match source {
            Source::Neural => {
                for (d, s) in snap.cycle.iter_mut().zip(self.synth.last_cycle()) {
                    *d = *s as f32;
                }
            }
            Source::Waveguide => {
                let n = self.history.len();
                for (i, d) in snap.cycle.iter_mut().enumerate() {
                    let a = self.history[(self.head + i) % n];
                    let b = self.history[(self.head + i + 1) % n];
                    *d = (b - a) as f32;
                }
            }
        }
        self.frames.publish();
    }
}

/// Keeps rendering at most `buffer` ahead of a virtual playback clock and
/// reports how late a block was when the clock caught up with it.
struct PacedClock {
    start: Instant,
    written: u64,
    sample_rate: f64,
    buffer: Duration,
}

impl PacedClock {
    fn new(sample_rate: f64, buffer: Duration) -> Self {
        Self {
            start: Instant::now() + buffer,
            written: 0,
            sample_rate,
            buffer,
        }
    }

    fn at(&self, samples: u64) -> Instant {
        self.start + Duration::from_secs_f64(samples as f64 / self.sample_rate)
    }

    fn wait(&mut self, n: u64) -> Option<Duration> {
        let now = Instant::now();
        let due = self.at(self.written);
        let late = (now > due).then(|| {
            let lag = now - due;
            self.start += lag;
            lag
        });
        self.written += n;
        let resume = self.at(self.written) - self.buffer;
        if resume > now {
            std::thread::sleep(resume - now);
        }
        late
    }
}

/// Turns audio-thread snapshots into wire frames.
pub struct FrameReader {
    out: Output<FrameSnapshot>,
    fft: Arc<dyn Fft<f32>>,
    scratch: Vec<Complex<f32>>,
    sample_rate: f64,
}

impl FrameReader {
    fn new(out: Output<FrameSnapshot>, cycle_len: usize, sample_rate: f64) -> Self {
        Self {
            out,
            fft: FftPlanner::new().plan_fft_forward(cycle_len),
            scratch: vec![Complex::default(); cycle_len],
            sample_rate,
        }
    }

    /// The most recent snapshot as a frame.
    pub fn latest(&mut self) -> Frame {
        let snap = self.out.read();
        for (c, v) in self.scratch.iter_mut().zip(&snap.cycle) {
            *c = Complex::new(*v, 0.0);
        }
        self.fft.process(&mut self.scratch);
        let l = snap.cycle.len();
        Frame {
            timestamp_us: (snap.sample_index as f64 * 1e6 / self.sample_rate) as u64,
            params: std::iter::once(snap.source.flag()).chain(snap.params.iter().copied()).collect(),
            waveform: snap.cycle.clone(),
            spectrum: self.scratch[..l / 2 + 1].iter().map(|c| c.norm()).collect(),
        }
    }
}
