//! Trained autoencoder bundles and their checkpoint files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2};

use crate::dataset::NormStats;
use crate::format::{self, F32Reader, F32Writer, FormatError, Manifest};
use crate::neural::{Activation, Mlp, NeuralError, OutputKind};

const CHECKPOINT_KIND: &str = "checkpoint";
const DECODER_KIND: &str = "decoder";

/// Latent/conditional layout of one experiment, e.g. `D1_Z2_Y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExperimentCondition {
    pub n_latent: usize,
    pub m_cond: usize,
    pub adversarial: bool,
    pub activation: Activation,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConditionError {
    #[error("cannot parse condition label `{0}`")]
    Label(String),
    #[error("condition needs at least one code dimension")]
    EmptyCode,
}

impl ExperimentCondition {
    pub fn new(
        n_latent: usize,
        m_cond: usize,
        adversarial: bool,
        activation: Activation,
    ) -> Result<Self, ConditionError> {
        let c = Self {
            n_latent,
            m_cond,
            adversarial,
            activation,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConditionError> {
        if self.n_latent + self.m_cond == 0 {
            return Err(ConditionError::EmptyCode);
        }
        Ok(())
    }

    /// `D0_*` keeps its label but has nothing for a discriminator to shape.
    pub fn has_discriminator(&self) -> bool {
        self.adversarial && self.n_latent > 0
    }

    pub fn code_dim(&self) -> usize {
        self.n_latent + self.m_cond
    }

    /// The five bowed conditions with ReLU, plus the two tanh variants.
    pub fn paper_suite() -> Vec<Self> {
        let relu = Activation::Relu;
        let tanh = Activation::Tanh;
        [
            (1, 2, true, relu),
            (0, 2, true, relu),
            (1, 2, false, relu),
            (2, 0, true, relu),
            (2, 0, false, relu),
            (2, 0, true, tanh),
            (2, 0, false, tanh),
        ]
        .into_iter()
        .map(|(n, m, d, a)| Self::new(n, m, d, a).expect("valid constant conditions"))
        .collect()
    }
}

impl fmt::Display for ExperimentCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = if self.adversarial { 'D' } else { 'N' };
        write!(f, "{d}{}_Z{}_Y", self.n_latent, self.m_cond)?;
        if self.activation == Activation::Tanh {
            write!(f, "_tanh")?;
        }
        Ok(())
    }
}

impl FromStr for ExperimentCondition {
    type Err = ConditionError;

    /// Parses `D{n}_Z{m}_Y` / `N{n}_Z{m}_Y`, optionally suffixed `_tanh`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConditionError::Label(s.to_string());
        let (body, activation) = match s.strip_suffix("_tanh") {
            Some(b) => (b, Activation::Tanh),
            None => (s, Activation::Relu),
        };
        let adversarial = match body.chars().next() {
            Some('D') => true,
            Some('N') => false,
            _ => return Err(bad()),
        };
        let rest = body[1..].strip_suffix("_Y").ok_or_else(bad)?;
        let (n, m) = rest.split_once("_Z").ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        let m: usize = m.parse().map_err(|_| bad())?;
        Self::new(n, m, adversarial, activation)
    }
}

/// Encoder, decoder and optional discriminator trained together, with the
/// dataset statistics needed to run them on raw audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub condition: ExperimentCondition,
    pub encoder: Mlp<f32>,
    pub decoder: Mlp<f32>,
    pub discriminator: Option<Mlp<f32>>,
    pub stats: NormStats,
    pub param_names: Vec<String>,
    /// Raw reference window used for phase alignment.
    pub reference: Vec<f32>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub lambda: f64,
    pub seed: u64,
    pub batches: usize,
    pub dataset_digest: String,
}

impl Autoencoder {
    pub fn encode(&self, x: ArrayView2<f32>) -> Result<Array2<f32>, NeuralError> {
        self.encoder.predict(x)
    }

    pub fn decode(&self, code: ArrayView2<f32>) -> Result<Array2<f32>, NeuralError> {
        self.decoder.predict(code)
    }

    pub fn decoder_only(&self) -> DecoderModel {
        DecoderModel {
            n_latent: self.condition.n_latent,
            m_cond: self.condition.m_cond,
            net: self.decoder.clone(),
            stats: self.stats.clone(),
            param_names: self.param_names.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        format::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&format::read_file(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.condition;
        let mut man = Manifest::new();
        man.set("condition", c)
            .set("n", c.n_latent)
            .set("m", c.m_cond)
            .set("L", self.stats.len())
            .set("hidden_encoder", self.encoder.hidden_dim())
            .set("hidden_decoder", self.decoder.hidden_dim())
            .set(
                "hidden_discriminator",
                self.discriminator.as_ref().map_or(0, |d| d.hidden_dim()),
            )
            .set("activation", c.activation.name())
            .set("code_output", output_name(self.encoder.output))
            .set("lambda", self.provenance.lambda)
            .set("seed", self.provenance.seed)
            .set("batches", self.provenance.batches)
            .set("dataset_sha256", &self.provenance.dataset_digest)
            .set("param_names", self.param_names.join(","))
            .set("reference_len", self.reference.len());
        let mut w = F32Writer::default();
        write_net(&mut w, &self.encoder);
        write_net(&mut w, &self.decoder);
        if let Some(d) = &self.discriminator {
            write_net(&mut w, d);
        }
        write_stats(&mut w, &self.stats);
        w.extend(&self.reference);
        format::encode(CHECKPOINT_KIND, &man, &w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (man, payload) = format::decode(CHECKPOINT_KIND, bytes, |m| {
            let n: usize = m.parse("n")?;
            let c: usize = n + m.parse::<usize>("m")?;
            let l: usize = m.parse("L")?;
            let he: usize = m.parse("hidden_encoder")?;
            let hd: usize = m.parse("hidden_decoder")?;
            let hz: usize = m.parse("hidden_discriminator")?;
            let disc = if hz > 0 { net_len(n, hz, 1) } else { 0 };
            Ok(4 * (net_len(l, he, c)
                + net_len(c, hd, l)
                + disc
                + 2 * (l + c - n)
                + m.parse::<usize>("reference_len")?))
        })?;
        let condition: ExperimentCondition =
            man.parse::<String>("condition")?
                .parse()
                .map_err(|e: ConditionError| FormatError::Malformed(e.to_string()))?;
        let n = condition.n_latent;
        let c = condition.code_dim();
        let l: usize = man.parse("L")?;
        let act = condition.activation;
        let code_output = parse_output(man.require("code_output")?)?;
        let mut r = F32Reader::new(&payload);
        let encoder = read_net(&mut r, l, man.parse("hidden_encoder")?, c, act)?.with_output(code_output);
        let decoder = read_net(&mut r, c, man.parse("hidden_decoder")?, l, act)?;
        let hz: usize = man.parse("hidden_discriminator")?;
        let discriminator = if hz > 0 {
            Some(read_net(&mut r, n, hz, 1, act)?)
        } else {
            None
        };
        let stats = read_stats(&mut r, l, condition.m_cond)?;
        let reference = r.take(man.parse("reference_len")?)?;
        Ok(Self {
            condition,
            encoder,
            decoder,
            discriminator,
            stats,
            param_names: man.parse_list("param_names")?,
            reference,
            provenance: Provenance {
                lambda: man.parse("lambda")?,
                seed: man.parse("seed")?,
                batches: man.parse("batches")?,
                dataset_digest: man.parse("dataset_sha256")?,
            },
        })
    }
}

/// Decoder plus the statistics needed to denormalize its output.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub n_latent: usize,
    pub m_cond: usize,
    pub net: Mlp<f32>,
    pub stats: NormStats,
    pub param_names: Vec<String>,
}

impl DecoderModel {
    pub fn cycle_len(&self) -> usize {
        self.net.out_dim()
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        format::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&format::read_file(path)?)
    }

    /// Accepts either a decoder export or a full checkpoint.
    pub fn load_any(path: &Path) -> Result<Self, FormatError> {
        let bytes = format::read_file(path)?;
        match Self::from_bytes(&bytes) {
            Err(FormatError::WrongKind { .. }) => Ok(Autoencoder::from_bytes(&bytes)?.decoder_only()),
            other => other,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut man = Manifest::new();
        man.set("n", self.n_latent)
            .set("m", self.m_cond)
            .set("L", self.cycle_len())
            .set("hidden_decoder", self.net.hidden_dim())
            .set("activation", self.net.activation.name())
            .set("param_names", self.param_names.join(","));
        let mut w = F32Writer::default();
        write_net(&mut w, &self.net);
        write_stats(&mut w, &self.stats);
        format::encode(DECODER_KIND, &man, &w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let (man, payload) = format::decode(DECODER_KIND, bytes, |m| {
            let c = m.parse::<usize>("n")? + m.parse::<usize>("m")?;
            let l: usize = m.parse("L")?;
            Ok(4 * (net_len(c, m.parse("hidden_decoder")?, l) + 2 * (l + m.parse::<usize>("m")?)))
        })?;
        let n: usize = man.parse("n")?;
        let m: usize = man.parse("m")?;
        let l: usize = man.parse("L")?;
        let act = Activation::parse(man.require("activation")?).ok_or_else(|| FormatError::BadValue {
            key: "activation".into(),
            value: man.require("activation").unwrap_or_default().into(),
        })?;
        let mut r = F32Reader::new(&payload);
        let net = read_net(&mut r, n + m, man.parse("hidden_decoder")?, l, act)?;
        let stats = read_stats(&mut r, l, m)?;
        Ok(Self {
            n_latent: n,
            m_cond: m,
            net,
            stats,
            param_names: man.parse_list("param_names")?,
        })
    }
}

fn output_name(o: OutputKind) -> &'static str {
    match o {
        OutputKind::Linear => "linear",
        OutputKind::Tanh => "tanh",
    }
}

fn parse_output(s: &str) -> Result<OutputKind, FormatError> {
    match s {
        "linear" => Ok(OutputKind::Linear),
        "tanh" => Ok(OutputKind::Tanh),
        other => Err(FormatError::BadValue {
            key: "code_output".into(),
            value: other.into(),
        }),
    }
}

fn net_len(i: usize, h: usize, o: usize) -> usize {
    i * h + h + h * o + o
}

fn write_net(w: &mut F32Writer, net: &Mlp<f32>) {
    for t in net.tensors() {
        w.extend(t);
    }
}

fn read_net(
    r: &mut F32Reader,
    i: usize,
    h: usize,
    o: usize,
    act: Activation,
) -> Result<Mlp<f32>, FormatError> {
    let shape = |v: Vec<f32>, rows, cols| {
        Array2::from_shape_vec((rows, cols), v).map_err(|e| FormatError::Malformed(e.to_string()))
    };
    let w_in = shape(r.take(i * h)?, i, h)?;
    let b_in = Array1::from(r.take(h)?);
    let w_out = shape(r.take(h * o)?, h, o)?;
    let b_out = Array1::from(r.take(o)?);
    Ok(Mlp {
        w_in,
        b_in,
        w_out,
        b_out,
        activation: act,
        output: OutputKind::Linear,
    })
}

fn write_stats(w: &mut F32Writer, s: &NormStats) {
    w.extend(&s.mean);
    w.extend(&s.std);
    w.extend(&s.param_lo);
    w.extend(&s.param_hi);
}

fn read_stats(r: &mut F32Reader, l: usize, m: usize) -> Result<NormStats, FormatError> {
    Ok(NormStats {
        mean: r.take(l)?,
        std: r.take(l)?,
        param_lo: r.take(m)?,
        param_hi: r.take(m)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn condition_labels_round_trip() {
        for c in ExperimentCondition::paper_suite() {
            let label = c.to_string();
            assert_eq!(label.parse::<ExperimentCondition>().unwrap(), c, "{label}");
        }
        let c: ExperimentCondition = "D1_Z2_Y".parse().unwrap();
        assert_eq!((c.n_latent, c.m_cond, c.adversarial), (1, 2, true));
        assert!("X1_Z2_Y".parse::<ExperimentCondition>().is_err());
        assert!("D1Z2Y".parse::<ExperimentCondition>().is_err());
        assert!("N0_Z0_Y".parse::<ExperimentCondition>().is_err());
        let d0: ExperimentCondition = "D0_Z2_Y".parse().unwrap();
        assert!(d0.adversarial && !d0.has_discriminator());
    }

    fn tiny_model(adversarial: bool) -> Autoencoder {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cond = ExperimentCondition::new(1, 2, adversarial, Activation::Tanh).unwrap();
        Autoencoder {
            condition: cond,
            encoder: Mlp::new(6, 4, 3, Activation::Tanh, &mut rng).with_output(OutputKind::Tanh),
            decoder: Mlp::new(3, 5, 6, Activation::Tanh, &mut rng),
            discriminator: adversarial.then(|| Mlp::new(1, 3, 1, Activation::Tanh, &mut rng)),
            stats: NormStats {
                mean: vec![0.1; 6],
                std: vec![2.0; 6],
                param_lo: vec![0.0, 0.0],
                param_hi: vec![128.0, 128.0],
            },
            param_names: vec!["pressure".into(), "position".into()],
            reference: vec![0.5; 7],
            provenance: Provenance {
                lambda: 0.5,
                seed: 3,
                batches: 10,
                dataset_digest: "abc".into(),
            },
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for adv in [true, false] {
            let model = tiny_model(adv);
            assert_eq!(Autoencoder::from_bytes(&model.to_bytes()).unwrap(), model);
            let dec = model.decoder_only();
            assert_eq!(DecoderModel::from_bytes(&dec.to_bytes()).unwrap(), dec);
        }
    }

    #[test]
    fn decoder_export_holds_only_decoder_tensors() {
        let model = tiny_model(true);
        let bytes = model.decoder_only().to_bytes();
        let (w, b) = model.decoder.param_count();
        let header_end = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        assert_eq!(bytes.len() - header_end, 4 * (w + b + 2 * 6 + 2 * 2));
        assert!(matches!(
            Autoencoder::from_bytes(&bytes),
            Err(FormatError::WrongKind { .. })
        ));
    }
}
