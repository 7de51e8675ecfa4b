//! Wire protocol: JSON control/state messages tagged by `kind`, binary
//! frame messages.
//!
//! Frame layout (all little-endian): u64 timestamp in microseconds of
//! audio time, u32 parameter count `k`, `k` f32 parameters, then the
//! `L` f32 waveform samples and `L/2+1` f32 spectrum magnitudes. `L`
//! follows from the remaining length. Parameter 0 is the source flag
//! (0 neural, 1 waveguide); the rest follow `State::frame_params`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Neural,
    Waveguide,
}

impl Source {
    pub fn flag(self) -> f32 {
        match self {
            Source::Neural => 0.0,
            Source::Waveguide => 1.0,
        }
    }

    pub fn from_flag(flag: f32) -> Option<Self> {
        match flag {
            0.0 => Some(Source::Neural),
            1.0 => Some(Source::Waveguide),
            _ => None,
        }
    }
}

/// Client → server. Conditional parameters take raw units, latent `z{i}`
/// take [-1, 1]; out-of-range values are clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlMessage {
    SetParam { name: String, value: f64 },
    SelectSource { source: Source },
    GetState,
    SubscribeFrames {
        #[serde(default = "yes")]
        enabled: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub latent: bool,
}

/// Server → client text messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    State {
        source: Source,
        params: Vec<ParamInfo>,
        frame_params: Vec<String>,
        cycle_len: usize,
        sample_rate: f64,
        frame_rate: f64,
    },
    /// Acknowledges a `set_param` with the value actually applied.
    Param { name: String, value: f64 },
    Source { source: Source },
    Subscribed { enabled: bool },
    Error { message: String },
}

impl ControlMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("control messages always serialize")
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }

    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp_us: u64,
    pub params: Vec<f32>,
    pub waveform: Vec<f32>,
    pub spectrum: Vec<f32>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame too short: {0} bytes")]
    Short(usize),
    #[error("frame body of {0} floats does not split into L + L/2 + 1")]
    Body(usize),
}

impl Frame {
    pub fn source(&self) -> Option<Source> {
        self.params.first().and_then(|f| Source::from_flag(*f))
    }

    pub fn encoded_len(&self) -> usize {
        12 + 4 * (self.params.len() + self.waveform.len() + self.spectrum.len())
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.clear();
        out.reserve(self.encoded_len());
        out.extend_from_slice(&self.timestamp_us.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for v in self.params.iter().chain(&self.waveform).chain(&self.spectrum) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < 12 || !(bytes.len() - 12).is_multiple_of(4) {
            return Err(FrameError::Short(bytes.len()));
        }
        let timestamp_us = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let floats: Vec<f32> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if floats.len() < k {
            return Err(FrameError::Short(bytes.len()));
        }
        // rest = L + L/2 + 1 with L even
        let rest = floats.len() - k;
        if rest < 1 || !(rest - 1).is_multiple_of(3) || (rest - 1) / 3 == 0 {
            return Err(FrameError::Body(rest));
        }
        let l = 2 * (rest - 1) / 3;
        Ok(Self {
            timestamp_us,
            params: floats[..k].to_vec(),
            waveform: floats[k..k + l].to_vec(),
            spectrum: floats[k + l..].to_vec(),
        })
    }
}
