//! One-hidden-layer networks with hand-written gradients, Adam, and the
//! autoencoder / generator / discriminator losses.
//!
//! Every network computes `act(x . w_in + b_in) . w_out + b_out`, optionally
//! squashing the output with `tanh`. Inputs are row-major batches.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub trait Float:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
}

impl Float for f32 {}
impl Float for f64 {}

#[inline]
fn cst<F: Float>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(NeuralError::Dimension {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply<F: Float>(self, x: F) -> F {
        match self {
            Activation::Relu => x.max(F::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and its image.
    #[inline]
    fn derivative<F: Float>(self, pre: F, post: F) -> F {
        match self {
            Activation::Relu => {
                if pre > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => F::one() - post * post,
        }
    }
}

/// Output nonlinearity of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Linear,
    /// Bounds every output to (-1, 1).
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub w_in: Array2<F>,
    pub b_in: Array1<F>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
    pub activation: Activation,
    pub output: OutputKind,
}

/// Intermediate values kept by `forward` for `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub input: Array2<F>,
    pub pre: Array2<F>,
    pub hidden: Array2<F>,
    pub output: Array2<F>,
}

/// Gradients for the four tensors plus the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<F> {
    pub w_in: Array2<F>,
    pub b_in: Array1<F>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
    pub input: Array2<F>,
}

impl<F: Float> MlpGrads<F> {
    pub fn tensors(&self) -> [&[F]; 4] {
        [
            self.w_in.as_slice().expect("standard layout"),
            self.b_in.as_slice().expect("standard layout"),
            self.w_out.as_slice().expect("standard layout"),
            self.b_out.as_slice().expect("standard layout"),
        ]
    }

    pub fn is_zero(&self) -> bool {
        self.tensors()
            .iter()
            .chain(std::iter::once(&self.input.as_slice().unwrap()))
            .all(|t| t.iter().all(|v| *v == F::zero()))
    }
}

impl<F: Float> Mlp<F> {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            w_in: Array2::zeros((in_dim, hidden)),
            b_in: Array1::zeros(hidden),
            w_out: Array2::zeros((hidden, out_dim)),
            b_out: Array1::zeros(out_dim),
            activation,
            output: OutputKind::Linear,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(in_dim, hidden, out_dim, activation);
        let mut fill = |w: &mut Array2<F>| {
            let (fan_in, fan_out) = w.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| cst(rng.random_range(-bound..=bound)));
        };
        fill(&mut net.w_in);
        fill(&mut net.w_out);
        net
    }

    pub fn with_output(mut self, output: OutputKind) -> Self {
        self.output = output;
        self
    }

    pub fn in_dim(&self) -> usize {
        self.w_in.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w_out.ncols()
    }

    pub fn param_count(&self) -> (usize, usize) {
        (
            self.w_in.len() + self.w_out.len(),
            self.b_in.len() + self.b_out.len(),
        )
    }

    pub fn tensors(&self) -> [&[F]; 4] {
        [
            self.w_in.as_slice().expect("standard layout"),
            self.b_in.as_slice().expect("standard layout"),
            self.w_out.as_slice().expect("standard layout"),
            self.b_out.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [F]; 4] {
        [
            self.w_in.as_slice_mut().expect("standard layout"),
            self.b_in.as_slice_mut().expect("standard layout"),
            self.w_out.as_slice_mut().expect("standard layout"),
            self.b_out.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn cast<G: Float>(&self) -> Mlp<G> {
        let c = |v: &F| cst::<G>(v.to_f64().expect("finite"));
        Mlp {
            w_in: self.w_in.map(c),
            b_in: self.b_in.map(c),
            w_out: self.w_out.map(c),
            b_out: self.b_out.map(c),
            activation: self.activation,
            output: self.output,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Result<(Array2<F>, ForwardCache<F>)> {
        check_dim("forward input columns", self.in_dim(), x.ncols())?;
        let mut pre = x.dot(&self.w_in);
        pre += &self.b_in;
        let act = self.activation;
        let hidden = pre.mapv(|v| act.apply(v));
        let mut out = hidden.dot(&self.w_out);
        out += &self.b_out;
        if self.output == OutputKind::Tanh {
            out.mapv_inplace(|v| v.tanh());
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(NeuralError::NonFinite("forward output"));
        }
        let cache = ForwardCache {
            input: x.to_owned(),
            pre,
            hidden,
            output: out.clone(),
        };
        Ok((out, cache))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        check_dim("forward input columns", self.in_dim(), x.ncols())?;
        let act = self.activation;
        let mut hidden = x.dot(&self.w_in);
        hidden += &self.b_in;
        hidden.mapv_inplace(|v| act.apply(v));
        let mut out = hidden.dot(&self.w_out);
        out += &self.b_out;
        if self.output == OutputKind::Tanh {
            out.mapv_inplace(|v| v.tanh());
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(NeuralError::NonFinite("forward output"));
        }
        Ok(out)
    }

    /// Single-row forward pass into caller-owned buffers; never allocates.
    pub fn forward_into(&self, x: &[F], hidden: &mut [F], out: &mut [F]) -> Result<()> {
        check_dim("forward input", self.in_dim(), x.len())?;
        check_dim("hidden buffer", self.hidden_dim(), hidden.len())?;
        check_dim("output buffer", self.out_dim(), out.len())?;
        let act = self.activation;
        hidden.copy_from_slice(self.b_in.as_slice().expect("standard layout"));
        for (xi, row) in x.iter().zip(self.w_in.outer_iter()) {
            for (h, w) in hidden.iter_mut().zip(row.iter()) {
                *h += *xi * *w;
            }
        }
        for h in hidden.iter_mut() {
            *h = act.apply(*h);
        }
        out.copy_from_slice(self.b_out.as_slice().expect("standard layout"));
        for (hi, row) in hidden.iter().zip(self.w_out.outer_iter()) {
            if *hi == F::zero() {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row.iter()) {
                *o += *hi * *w;
            }
        }
        if self.output == OutputKind::Tanh {
            for o in out.iter_mut() {
                *o = o.tanh();
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(NeuralError::NonFinite("forward output"));
        }
        Ok(())
    }

    pub fn backward(&self, cache: &ForwardCache<F>, grad_out: ArrayView2<F>) -> Result<MlpGrads<F>> {
        let batch = cache.input.nrows();
        check_dim("cache input columns", self.in_dim(), cache.input.ncols())?;
        check_dim("cache hidden columns", self.hidden_dim(), cache.pre.ncols())?;
        check_dim("grad_out rows", batch, grad_out.nrows())?;
        check_dim("grad_out columns", self.out_dim(), grad_out.ncols())?;

        let d_out: Array2<F> = match self.output {
            OutputKind::Linear => grad_out.to_owned(),
            OutputKind::Tanh => {
                let mut d = grad_out.to_owned();
                d.zip_mut_with(&cache.output, |g, y| *g = *g * (F::one() - *y * *y));
                d
            }
        };
        let w_out = standard(cache.hidden.t().dot(&d_out));
        let b_out = d_out.sum_axis(Axis(0));
        let mut d_hidden = d_out.dot(&self.w_out.t());
        let act = self.activation;
        ndarray::Zip::from(&mut d_hidden)
            .and(&cache.pre)
            .and(&cache.hidden)
            .for_each(|g, &p, &h| *g = *g * act.derivative(p, h));
        let w_in = standard(cache.input.t().dot(&d_hidden));
        let b_in = d_hidden.sum_axis(Axis(0));
        let input = standard(d_hidden.dot(&self.w_in.t()));
        Ok(MlpGrads {
            w_in,
            b_in,
            w_out,
            b_out,
            input,
        })
    }
}

fn standard<F: Float>(a: Array2<F>) -> Array2<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Adam moments for the four tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub first: [Vec<F>; 4],
    pub second: [Vec<F>; 4],
    pub step: u64,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Float> AdamState<F> {
    pub fn for_mlp(net: &Mlp<F>) -> Self {
        let zeros = |i: usize| vec![F::zero(); net.tensors()[i].len()];
        Self {
            first: std::array::from_fn(zeros),
            second: std::array::from_fn(zeros),
            step: 0,
            beta1: cst(0.9),
            beta2: cst(0.999),
            eps: cst(1e-8),
        }
    }

    /// Bias-corrected Adam update of `net` along `grads`.
    pub fn step(&mut self, net: &mut Mlp<F>, grads: &MlpGrads<F>, lr: F) -> Result<()> {
        let g = grads.tensors();
        for (i, t) in net.tensors().iter().enumerate() {
            check_dim("adam gradient", t.len(), g[i].len())?;
            check_dim("adam moments", t.len(), self.first[i].len())?;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = F::one() - self.beta1.powi(t);
        let c2 = F::one() - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, params) in net.tensors_mut().into_iter().enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (((p, &gi), mi), vi) in params.iter_mut().zip(g[i]).zip(m).zip(v) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn logistic<F: Float>(a: F) -> F {
    F::one() / (F::one() + (-a).exp())
}

pub fn clamp_prob<F: Float>(p: F) -> F {
    let floor: F = cst(PROB_FLOOR);
    p.max(floor).min(F::one() - floor)
}

fn prob_clamped<F: Float>(p: F) -> bool {
    clamp_prob(p) != p
}

/// `sum (x - x_hat)^2 + lambda * sum (y - y_hat)^2` over the batch.
pub fn loss_ae<F: Float>(
    x: ArrayView2<F>,
    x_hat: ArrayView2<F>,
    y: ArrayView2<F>,
    y_hat: ArrayView2<F>,
    lambda: F,
) -> Result<F> {
    check_dim("loss_ae data", x.len(), x_hat.len())?;
    check_dim("loss_ae params", y.len(), y_hat.len())?;
    let sq = |a: ArrayView2<F>, b: ArrayView2<F>| -> F {
        a.iter().zip(b.iter()).map(|(u, v)| (*u - *v) * (*u - *v)).sum()
    };
    Ok(sq(x, x_hat) + lambda * sq(y, y_hat))
}

/// `-sum log D_E`.
pub fn loss_g<F: Float>(d_e: &[F]) -> F {
    -d_e.iter().map(|p| clamp_prob(*p).ln()).sum::<F>()
}

/// `-sum (log D_z + log(1 - D_E))`.
pub fn loss_d<F: Float>(d_z: &[F], d_e: &[F]) -> F {
    let real: F = d_z.iter().map(|p| clamp_prob(*p).ln()).sum();
    let fake: F = d_e.iter().map(|p| (F::one() - clamp_prob(*p)).ln()).sum();
    -(real + fake)
}

/// Probability that each row of `z` was drawn from the prior.
pub fn discriminate<F: Float>(disc: &Mlp<F>, z: ArrayView2<F>) -> Result<Vec<F>> {
    check_dim("discriminator output", 1, disc.out_dim())?;
    let logits = disc.predict(z)?;
    Ok(logits.iter().map(|a| logistic(*a)).collect())
}

/// Splits an encoder code batch into latent `z` (first `n`) and
/// conditional `y` (remaining) columns.
pub fn split_code<F: Float>(code: &Array2<F>, n_latent: usize) -> (Array2<F>, Array2<F>) {
    (
        code.slice(s![.., ..n_latent]).to_owned(),
        code.slice(s![.., n_latent..]).to_owned(),
    )
}

/// Result of one autoencoder loss evaluation.
#[derive(Debug, Clone)]
pub struct AeEval<F> {
    pub loss: F,
    /// Sum of squared data errors (no parameter term).
    pub data_sq_err: F,
    pub encoder: MlpGrads<F>,
    pub decoder: MlpGrads<F>,
}

/// `L_AE` and its gradients for encoder and decoder. The parameter term
/// compares `y` with the encoder's conditional head.
pub fn ae_loss_grads<F: Float>(
    encoder: &Mlp<F>,
    decoder: &Mlp<F>,
    x: ArrayView2<F>,
    y: ArrayView2<F>,
    n_latent: usize,
    lambda: F,
) -> Result<AeEval<F>> {
    let m = encoder.out_dim() - n_latent.min(encoder.out_dim());
    check_dim("conditional columns", m, y.ncols())?;
    check_dim("decoder input", encoder.out_dim(), decoder.in_dim())?;
    check_dim("decoder output", x.ncols(), decoder.out_dim())?;
    let (code, enc_cache) = encoder.forward(x)?;
    let (x_hat, dec_cache) = decoder.forward(code.view())?;
    let y_hat = code.slice(s![.., n_latent..]);
    let two: F = cst(2.0);
    let data_sq_err: F = x.iter().zip(x_hat.iter()).map(|(a, b)| (*a - *b) * (*a - *b)).sum();
    let loss = loss_ae(x, x_hat.view(), y, y_hat, lambda)?;

    let d_x_hat = (&x_hat - &x) * two;
    let dec_grads = decoder.backward(&dec_cache, d_x_hat.view())?;
    let mut d_code = dec_grads.input.clone();
    {
        let mut d_y = d_code.slice_mut(s![.., n_latent..]);
        ndarray::Zip::from(&mut d_y)
            .and(&y_hat)
            .and(&y)
            .for_each(|g, &yh, &yt| *g = *g + two * lambda * (yh - yt));
    }
    let enc_grads = encoder.backward(&enc_cache, d_code.view())?;
    if !loss.is_finite() {
        return Err(NeuralError::NonFinite("autoencoder loss"));
    }
    Ok(AeEval {
        loss,
        data_sq_err,
        encoder: enc_grads,
        decoder: dec_grads,
    })
}

#[derive(Debug, Clone)]
pub struct GeneratorEval<F> {
    pub loss: F,
    pub mean_prob: F,
    pub encoder: MlpGrads<F>,
}

/// `L_G` for a batch of data, with gradients for the encoder only.
pub fn generator_loss_grads<F: Float>(
    encoder: &Mlp<F>,
    disc: &Mlp<F>,
    x: ArrayView2<F>,
    n_latent: usize,
) -> Result<GeneratorEval<F>> {
    check_dim("discriminator input", n_latent, disc.in_dim())?;
    let (code, enc_cache) = encoder.forward(x)?;
    let z = code.slice(s![.., ..n_latent]);
    let (logits, disc_cache) = disc.forward(z)?;
    let probs: Vec<F> = logits.iter().map(|a| logistic(*a)).collect();
    let loss = loss_g(&probs);
    let d_logits = Array2::from_shape_fn((probs.len(), 1), |(i, _)| {
        let p = probs[i];
        if prob_clamped(p) {
            F::zero()
        } else {
            p - F::one()
        }
    });
    let disc_grads = disc.backward(&disc_cache, d_logits.view())?;
    let mut d_code = Array2::zeros(code.dim());
    d_code
        .slice_mut(s![.., ..n_latent])
        .assign(&disc_grads.input);
    let enc_grads = encoder.backward(&enc_cache, d_code.view())?;
    let n = cst::<F>(probs.len().max(1) as f64);
    Ok(GeneratorEval {
        loss,
        mean_prob: probs.iter().copied().sum::<F>() / n,
        encoder: enc_grads,
    })
}

#[derive(Debug, Clone)]
pub struct DiscriminatorEval<F> {
    pub loss: F,
    pub mean_real: F,
    pub mean_fake: F,
    pub grads: MlpGrads<F>,
}

/// `L_D` for prior samples `z_real` and encoded samples `z_fake`.
pub fn discriminator_loss_grads<F: Float>(
    disc: &Mlp<F>,
    z_real: ArrayView2<F>,
    z_fake: ArrayView2<F>,
) -> Result<DiscriminatorEval<F>> {
    check_dim("discriminator output", 1, disc.out_dim())?;
    check_dim("latent columns", z_real.ncols(), z_fake.ncols())?;
    let z = ndarray::concatenate(Axis(0), &[z_real, z_fake]).expect("matching columns");
    let (logits, cache) = disc.forward(z.view())?;
    let n_real = z_real.nrows();
    let probs: Vec<F> = logits.iter().map(|a| logistic(*a)).collect();
    let (real, fake) = probs.split_at(n_real);
    let loss = loss_d(real, fake);
    let d_logits = Array2::from_shape_fn((probs.len(), 1), |(i, _)| {
        let p = probs[i];
        if prob_clamped(p) {
            F::zero()
        } else if i < n_real {
            p - F::one()
        } else {
            p
        }
    });
    let grads = disc.backward(&cache, d_logits.view())?;
    let mean = |v: &[F]| v.iter().copied().sum::<F>() / cst::<F>(v.len().max(1) as f64);
    Ok(DiscriminatorEval {
        loss,
        mean_real: mean(real),
        mean_fake: mean(fake),
        grads,
    })
}
