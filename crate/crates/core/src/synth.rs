//! Decoder-driven wavetable synthesis: generated differential cycles are
//! Hann-windowed, overlap-added at half-cycle hops and integrated.

use crate::model::DecoderModel;
use crate::neural::NeuralError;

/// Leak of the output integrator `y[t] = LEAK * y[t-1] + x[t]`.
pub const LEAK: f64 = 0.995;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("window length must be even and positive, got {0}")]
    OddWindow(usize),
    #[error("{what}: expected {expected} values, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("script line {line}: {msg}")]
    Script { line: usize, msg: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Periodic Hann window; shifted by `n/2` it sums to exactly one.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(SynthError::OddWindow(n));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (std::f64::consts::TAU * k as f64 / n as f64).cos()))
        .collect())
}

/// Decoder inputs: latent `z` in [-1, 1] and conditional `y` scaled to
/// [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub z: Vec<f32>,
    pub y: Vec<f32>,
}

impl SynthParams {
    pub fn neutral(model: &DecoderModel) -> Self {
        Self {
            z: vec![0.0; model.n_latent],
            y: vec![0.0; model.m_cond],
        }
    }

    fn copy_from(&mut self, other: &SynthParams) {
        self.z.copy_from_slice(&other.z);
        self.y.copy_from_slice(&other.y);
    }

    fn check(&self, model: &DecoderModel) -> Result<()> {
        if self.z.len() != model.n_latent {
            return Err(SynthError::Dimension {
                what: "latent values",
                expected: model.n_latent,
                found: self.z.len(),
            });
        }
        if self.y.len() != model.m_cond {
            return Err(SynthError::Dimension {
                what: "conditional values",
                expected: model.m_cond,
                found: self.y.len(),
            });
        }
        Ok(())
    }
}

/// One parameter addressed by name: a conditional parameter (raw units)
/// or a latent `z{i}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Conditional(usize),
    Latent(usize),
}

impl ParamSlot {
    pub fn resolve(model: &DecoderModel, name: &str) -> Result<Self> {
        if let Some(i) = model.param_names.iter().position(|p| p == name) {
            return Ok(ParamSlot::Conditional(i));
        }
        match name.strip_prefix('z').and_then(|i| i.parse::<usize>().ok()) {
            Some(i) if i < model.n_latent => Ok(ParamSlot::Latent(i)),
            _ => Err(SynthError::UnknownParam(name.to_string())),
        }
    }

    /// Declared range of the user-facing value.
    pub fn range(self, model: &DecoderModel) -> (f64, f64) {
        match self {
            ParamSlot::Conditional(i) => (model.stats.param_lo[i] as f64, model.stats.param_hi[i] as f64),
            ParamSlot::Latent(_) => (-1.0, 1.0),
        }
    }

    /// Clamps `value` to the declared range and writes it, scaled, into
    /// `params`. Returns the clamped value.
    pub fn apply(self, model: &DecoderModel, params: &mut SynthParams, value: f64) -> f64 {
        let (lo, hi) = self.range(model);
        let v = value.clamp(lo, hi);
        match self {
            ParamSlot::Conditional(i) => params.y[i] = (2.0 * (v - lo) / (hi - lo) - 1.0) as f32,
            ParamSlot::Latent(i) => params.z[i] = v as f32,
        }
        v
    }

    /// Reads the user-facing value back out of `params`.
    pub fn read(self, model: &DecoderModel, params: &SynthParams) -> f64 {
        let (lo, hi) = self.range(model);
        match self {
            ParamSlot::Conditional(i) => lo + (params.y[i] as f64 + 1.0) * (hi - lo) / 2.0,
            ParamSlot::Latent(i) => params.z[i] as f64,
        }
    }
}

/// Renders a decoder into audio. Parameter requests are latched at window
/// boundaries; the render path does not allocate.
#[derive(Debug, Clone)]
pub struct SynthState {
    model: DecoderModel,
    window: Vec<f64>,
    hop: usize,
    leak: f64,
    current: SynthParams,
    pending: SynthParams,
    code: Vec<f32>,
    hidden: Vec<f32>,
    frame: Vec<f32>,
    cycle: Vec<f64>,
    tail: Vec<f64>,
    block: Vec<f64>,
    pos: usize,
    integ: f64,
    frames: u64,
}

impl SynthState {
    pub fn new(model: DecoderModel) -> Result<Self> {
        Self::with_leak(model, LEAK)
    }

    pub fn with_leak(model: DecoderModel, leak: f64) -> Result<Self> {
        let l = model.cycle_len();
        let window = hann_window(l)?;
        let hop = l / 2;
        let params = SynthParams::neutral(&model);
        Ok(Self {
            code: vec![0.0; model.n_latent + model.m_cond],
            hidden: vec![0.0; model.net.hidden_dim()],
            frame: vec![0.0; l],
            cycle: vec![0.0; l],
            tail: vec![0.0; hop],
            block: vec![0.0; hop],
            pos: hop,
            integ: 0.0,
            frames: 0,
            window,
            hop,
            leak,
            current: params.clone(),
            pending: params,
            model,
        })
    }

    pub fn model(&self) -> &DecoderModel {
        &self.model
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn cycle_len(&self) -> usize {
        self.window.len()
    }

    /// Parameters of the frame currently sounding.
    pub fn params(&self) -> &SynthParams {
        &self.current
    }

    /// Requests new parameters; they take effect at the next window.
    pub fn set_params(&mut self, params: &SynthParams) -> Result<()> {
        params.check(&self.model)?;
        self.pending.copy_from(params);
        Ok(())
    }

    /// Number of frames started so far.
    pub fn frames(&self) -> u64 {
        self.frames
    }

    /// Denormalized differential cycle of the frame currently sounding.
    pub fn last_cycle(&self) -> &[f64] {
        &self.cycle
    }

    /// Decodes `params` into a denormalized differential cycle.
    pub fn decode_cycle(&self, params: &SynthParams) -> Result<Vec<f64>> {
        params.check(&self.model)?;
        let mut code: Vec<f32> = params.z.iter().chain(&params.y).copied().collect();
        let mut hidden = vec![0.0; self.hidden.len()];
        let mut frame = vec![0.0; self.frame.len()];
        let mut out = vec![0.0; self.frame.len()];
        decode_into(&self.model, &mut code, params, &mut hidden, &mut frame, &mut out)?;
        Ok(out)
    }

    fn start_frame(&mut self) -> Result<()> {
        self.current.copy_from(&self.pending);
        decode_into(
            &self.model,
            &mut self.code,
            &self.current,
            &mut self.hidden,
            &mut self.frame,
            &mut self.cycle,
        )?;
        let h = self.hop;
        for i in 0..h {
            self.block[i] = self.tail[i] + self.window[i] * self.cycle[i];
            self.tail[i] = self.window[h + i] * self.cycle[h + i];
        }
        self.pos = 0;
        self.frames += 1;
        Ok(())
    }

    /// Fills `out` with the next samples of the integrated OLA stream.
    pub fn render_block(&mut self, out: &mut [f64]) -> Result<()> {
        for o in out.iter_mut() {
            if self.pos == self.hop {
                self.start_frame()?;
            }
            self.integ = self.leak * self.integ + self.block[self.pos];
            *o = self.integ;
            self.pos += 1;
        }
        Ok(())
    }
}

fn decode_into(
    model: &DecoderModel,
    code: &mut [f32],
    params: &SynthParams,
    hidden: &mut [f32],
    frame: &mut [f32],
    cycle: &mut [f64],
) -> Result<()> {
    let n = params.z.len();
    code[..n].copy_from_slice(&params.z);
    code[n..].copy_from_slice(&params.y);
    model.net.forward_into(code, hidden, frame)?;
    for (((c, f), m), s) in cycle
        .iter_mut()
        .zip(frame.iter())
        .zip(&model.stats.mean)
        .zip(&model.stats.std)
    {
        *c = *f as f64 * *s as f64 + *m as f64;
    }
    Ok(())
}

/// Renders `n_samples` from a fresh start of `state`, taking one parameter
/// set per hop (the last one is held once the stream runs out).
pub fn ola_render(state: &mut SynthState, stream: &[SynthParams], n_samples: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n_samples];
    for (k, chunk) in out.chunks_mut(state.hop()).enumerate() {
        if let Some(p) = stream.get(k).or(stream.last()) {
            state.set_params(p)?;
        }
        state.render_block(chunk)?;
    }
    Ok(out)
}

/// Keyframed parameter automation:
///
/// ```text
/// # time name=value ...
/// 0   pressure=64 position=64 z0=0
/// 1.5 pressure=110
/// end 3
/// ```
///
/// Each parameter moves linearly between its own keyframes and holds
/// outside them. Conditional values are raw (0-128 for bowed models),
/// latent values are in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamScript {
    pub keys: Vec<(f64, Vec<(String, f64)>)>,
    pub end: f64,
}

impl ParamScript {
    pub fn parse(text: &str) -> Result<Self> {
        let mut keys: Vec<(f64, Vec<(String, f64)>)> = Vec::new();
        let mut end = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| SynthError::Script { line: i + 1, msg };
            let mut parts = line.split_whitespace();
            let head = parts.next().expect("non-empty line");
            let time = |s: &str| -> Result<f64> {
                match s.parse::<f64>() {
                    Ok(t) if t.is_finite() && t >= 0.0 => Ok(t),
                    _ => Err(err(format!("bad time `{s}`"))),
                }
            };
            if head == "end" {
                let t = parts.next().ok_or_else(|| err("`end` needs a time".into()))?;
                end = Some(time(t)?);
                continue;
            }
            let t = time(head)?;
            if keys.last().is_some_and(|k| k.0 > t) {
                return Err(err("keyframe times must not decrease".into()));
            }
            let mut sets = Vec::new();
            for kv in parts {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected name=value, got `{kv}`")))?;
                let v: f64 = v
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| err(format!("bad value `{v}`")))?;
                sets.push((k.to_string(), v));
            }
            keys.push((t, sets));
        }
        let last = keys.last().map_or(0.0, |k| k.0);
        let end = end.unwrap_or(last);
        if end < last {
            return Err(SynthError::Script {
                line: 0,
                msg: format!("end {end} precedes the last keyframe at {last}"),
            });
        }
        Ok(Self { keys, end })
    }

    pub fn n_samples(&self, sample_rate: f64) -> usize {
        (self.end * sample_rate).round() as usize
    }

    /// Parameter sets sampled at every hop boundary of the render.
    pub fn stream(&self, model: &DecoderModel, sample_rate: f64, hop: usize) -> Result<Vec<SynthParams>> {
        let mut tracks: Vec<(ParamSlot, Vec<(f64, f64)>)> = Vec::new();
        for (t, sets) in &self.keys {
            for (name, v) in sets {
                let slot = ParamSlot::resolve(model, name)?;
                match tracks.iter_mut().find(|(s, _)| *s == slot) {
                    Some((_, pts)) => pts.push((*t, *v)),
                    None => tracks.push((slot, vec![(*t, *v)])),
                }
            }
        }
        let hops = self.n_samples(sample_rate).div_ceil(hop.max(1));
        Ok((0..hops)
            .map(|k| {
                let t = (k * hop) as f64 / sample_rate;
                let mut p = SynthParams::neutral(model);
                for (slot, pts) in &tracks {
                    slot.apply(model, &mut p, interpolate(pts, t));
                }
                p
            })
            .collect())
    }
}

fn interpolate(pts: &[(f64, f64)], t: f64) -> f64 {
    let after = pts.partition_point(|p| p.0 <= t);
    match (after.checked_sub(1).map(|i| pts[i]), pts.get(after)) {
        (Some(a), Some(b)) if b.0 > a.0 => a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0),
        (Some(a), _) => a.1,
        (None, Some(b)) => b.1,
        (None, None) => 0.0,
    }
}

/// Offline render of a script from a fresh synth.
pub fn render_script(model: &DecoderModel, script: &ParamScript, sample_rate: f64) -> Result<Vec<f64>> {
    let mut state = SynthState::new(model.clone())?;
    let stream = script.stream(model, sample_rate, state.hop())?;
    ola_render(&mut state, &stream, script.n_samples(sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_closed_form_and_errors() {
        let w = hann_window(4).unwrap();
        for (a, b) in w.iter().zip([0.0, 0.5, 1.0, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(hann_window(5).is_err());
        assert!(hann_window(0).is_err());
    }

    #[test]
    fn interpolation_holds_outside_keys() {
        let pts = [(1.0, 10.0), (3.0, 30.0)];
        assert_eq!(interpolate(&pts, 0.0), 10.0);
        assert_eq!(interpolate(&pts, 2.0), 20.0);
        assert_eq!(interpolate(&pts, 5.0), 30.0);
        assert_eq!(interpolate(&[(1.0, 1.0), (1.0, 2.0)], 1.0), 2.0);
    }

    #[test]
    fn script_parsing() {
        let s = ParamScript::parse("# sweep\n0 pressure=64 z0=0.5\n1.5 pressure=100 # up\nend 3\n").unwrap();
        assert_eq!(s.keys.len(), 2);
        assert_eq!(s.end, 3.0);
        assert_eq!(s.n_samples(48000.0), 144000);
        assert!(ParamScript::parse("1 a=1\n0 a=2").is_err());
        assert!(ParamScript::parse("0 a").is_err());
        assert!(ParamScript::parse("x a=1").is_err());
        assert!(ParamScript::parse("2 a=1\nend 1").is_err());
    }
}
