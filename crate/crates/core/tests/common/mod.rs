//! Finite-difference gradient oracle shared by the gradient tests and the
//! acceptance suite. Uses forward passes only.
#![allow(dead_code)]

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sounderfeit::neural::{
    ae_loss_grads, discriminate, discriminator_loss_grads, generator_loss_grads, loss_ae, loss_d,
    loss_g, Activation, Mlp, MlpGrads, OutputKind,
};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn central_at(net: &Mlp<f64>, tensor: usize, index: usize, h: f64, loss: &impl Fn(&Mlp<f64>) -> f64) -> [f64; 3] {
    let mut plus = net.clone();
    plus.tensors_mut()[tensor][index] += h;
    let mut minus = net.clone();
    minus.tensors_mut()[tensor][index] -= h;
    [loss(&plus), loss(net), loss(&minus)]
}

/// Central difference of `loss` wrt coordinate (`tensor`, `index`) of `net`,
/// or `None` when a ReLU kink lies within one step of the point: either the
/// one-sided slopes disagree, or a ten times smaller step changes the
/// estimate by more than smooth truncation error could.
pub fn central_diff(
    net: &Mlp<f64>,
    tensor: usize,
    index: usize,
    loss: impl Fn(&Mlp<f64>) -> f64,
) -> Option<f64> {
    let [lp, l0, lm] = central_at(net, tensor, index, FD_STEP, &loss);
    let right = (lp - l0) / FD_STEP;
    let left = (l0 - lm) / FD_STEP;
    if (right - left).abs() > 1e-2 * right.abs().max(left.abs()).max(1.0) {
        return None;
    }
    let coarse = (lp - lm) / (2.0 * FD_STEP);
    let h = FD_STEP / 10.0;
    let [fp, _, fm] = central_at(net, tensor, index, h, &loss);
    let fine = (fp - fm) / (2.0 * h);
    if rel_err(coarse, fine) > REL_TOL / 10.0 {
        return None;
    }
    Some(coarse)
}

/// Worst relative error over `samples` random coordinates of `net`.
pub fn check_net(
    net: &Mlp<f64>,
    grads: &MlpGrads<f64>,
    samples: usize,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&Mlp<f64>) -> f64,
) -> f64 {
    let sizes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut attempts = 0;
    // tiny networks can have a whole hidden unit on a kink; give up on
    // resampling after a bounded number of tries
    while checked < samples && attempts < 20 * samples {
        attempts += 1;
        let mut flat = rng.random_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let Some(numeric) = central_diff(net, tensor, flat, &loss) else {
            continue;
        };
        let analytic = grads.tensors()[tensor][flat];
        worst = worst.max(rel_err(analytic, numeric));
        checked += 1;
    }
    assert!(checked >= samples / 2, "only {checked} differentiable coordinates");
    worst
}

pub struct Instance {
    pub encoder: Mlp<f64>,
    pub decoder: Mlp<f64>,
    pub disc: Mlp<f64>,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub z_prior: Array2<f64>,
    pub n: usize,
    pub lambda: f64,
}

/// Random small problem with every dimension at most 8.
pub fn instance(seed: u64, activation: Activation, tanh_code: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.random_range(2..=8);
    let hidden = rng.random_range(2..=8);
    let n = rng.random_range(1..=3);
    let m = rng.random_range(0..=2);
    let batch = rng.random_range(1..=8);
    let mut encoder = Mlp::new(l, hidden, n + m, activation, &mut rng);
    if tanh_code {
        encoder = encoder.with_output(OutputKind::Tanh);
    }
    let mut decoder = Mlp::new(n + m, hidden, l, activation, &mut rng);
    let mut disc = Mlp::new(n, hidden, 1, activation, &mut rng);
    for net in [&mut encoder, &mut decoder, &mut disc] {
        for b in [&mut net.b_in, &mut net.b_out] {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
    let x = Array2::from_shape_fn((batch, l), |_| rng.random_range(-2.0..2.0));
    let y = Array2::from_shape_fn((batch, m), |_| rng.random_range(-1.0..1.0));
    let z_prior = Array2::from_shape_fn((batch, n), |_| rng.random_range(-1.0..=1.0));
    Instance {
        encoder,
        decoder,
        disc,
        x,
        y,
        z_prior,
        n,
        lambda: rng.random_range(0.0..1.0),
    }
}

fn ae_loss_fd(inst: &Instance, enc: &Mlp<f64>, dec: &Mlp<f64>) -> f64 {
    let code = enc.predict(inst.x.view()).unwrap();
    let x_hat = dec.predict(code.view()).unwrap();
    loss_ae(
        inst.x.view(),
        x_hat.view(),
        inst.y.view(),
        code.slice(s![.., inst.n..]),
        inst.lambda,
    )
    .unwrap()
}

/// Worst relative errors for (L_AE, L_G, L_D) on one instance.
pub fn worst_errors(inst: &Instance, samples: usize, seed: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ae = ae_loss_grads(
        &inst.encoder,
        &inst.decoder,
        inst.x.view(),
        inst.y.view(),
        inst.n,
        inst.lambda,
    )
    .unwrap();
    let e_enc = check_net(&inst.encoder, &ae.encoder, samples / 2, &mut rng, |e| {
        ae_loss_fd(inst, e, &inst.decoder)
    });
    let e_dec = check_net(&inst.decoder, &ae.decoder, samples / 2, &mut rng, |d| {
        ae_loss_fd(inst, &inst.encoder, d)
    });

    let gen = generator_loss_grads(&inst.encoder, &inst.disc, inst.x.view(), inst.n).unwrap();
    let e_gen = check_net(&inst.encoder, &gen.encoder, samples, &mut rng, |e| {
        let code = e.predict(inst.x.view()).unwrap();
        loss_g(&discriminate(&inst.disc, code.slice(s![.., ..inst.n])).unwrap())
    });

    let code = inst.encoder.predict(inst.x.view()).unwrap();
    let z_fake = code.slice(s![.., ..inst.n]).to_owned();
    let d = discriminator_loss_grads(&inst.disc, inst.z_prior.view(), z_fake.view()).unwrap();
    let e_disc = check_net(&inst.disc, &d.grads, samples, &mut rng, |h| {
        loss_d(
            &discriminate(h, inst.z_prior.view()).unwrap(),
            &discriminate(h, z_fake.view()).unwrap(),
        )
    });
    [e_enc.max(e_dec), e_gen, e_disc]
}
