//! Finite-difference gradient cases shared by the gradient and acceptance suites.

use mmbc::autodiff::{Tape, Var};
use mmbc::gradcheck::grad_check;
use mmbc::latent::{gaussian_latent, gumbel_softmax, kl_categorical_uniform, sample_gumbel, LatentConfig};
use mmbc::model::{
    elbo_loss_and_grad, elbo_on_tape, encode_on_tape, reconstruction_on_tape, ArchConfig, BoundModel,
    LatentNoise, LossConfig, ModelDims, ModelParams, Posterior, Trajectory,
};
use mmbc::nn::{
    attention_pool, bilstm_encode, lstm_cell_step, Attention, AttentionParams, Dense, DenseParams, Lstm,
    LstmParams,
};
use mmbc::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
/// Largest accepted relative error.
pub const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Projects a vector output onto fixed random weights so every coordinate
/// contributes to the scalar loss.
fn project(tape: &mut Tape<'_>, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.constant(random(&mut rng(seed), &shape, 1.0));
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

pub fn dense_layer() -> f64 {
    let mut r = rng(1);
    let p = DenseParams::init(&mut r, 5, 3);
    let x = random(&mut r, &[5], 1.0);
    let check = grad_check(&[p.weight.clone(), p.bias.clone(), x], H, |tape, v| {
        let layer = Dense { weight: v[0], bias: v[1] };
        let y = layer.forward(tape, v[2])?;
        Ok(project(tape, y, 2))
    })
    .unwrap();
    assert_eq!(check.coordinates, 15 + 3 + 5);
    check.max_rel_error
}

pub fn dense_layer_on_rows() -> f64 {
    let mut r = rng(3);
    let p = DenseParams::init(&mut r, 4, 2);
    let x = random(&mut r, &[3, 4], 1.0);
    let check = grad_check(&[p.weight.clone(), p.bias.clone(), x], H, |tape, v| {
        let layer = Dense { weight: v[0], bias: v[1] };
        let y = layer.forward(tape, v[2])?;
        let t = tape.tanh(y)?;
        Ok(project(tape, t, 4))
    })
    .unwrap();
    check.max_rel_error
}

pub fn lstm_cell() -> f64 {
    let mut r = rng(5);
    let p = LstmParams::init(&mut r, 3, 4);
    let x = random(&mut r, &[3], 1.0);
    let h0 = random(&mut r, &[4], 0.5);
    let c0 = random(&mut r, &[4], 0.5);
    let check = grad_check(&[p.weight.clone(), p.bias.clone(), x, h0, c0], H, |tape, v| {
        let cell = Lstm { weight: v[0], bias: v[1], input_dim: 3, hidden: 4 };
        let (h, c) = lstm_cell_step(tape, v[2], v[3], v[4], &cell)?;
        let a = project(tape, h, 6);
        let b = project(tape, c, 7);
        tape.add(a, b)
    })
    .unwrap();
    check.max_rel_error
}

pub fn bilstm() -> f64 {
    let mut r = rng(8);
    let fwd = LstmParams::init(&mut r, 2, 3);
    let bwd = LstmParams::init(&mut r, 2, 3);
    let xs: Vec<Tensor> = (0..4).map(|_| random(&mut r, &[2], 1.0)).collect();
    let mut params = vec![fwd.weight.clone(), fwd.bias.clone(), bwd.weight.clone(), bwd.bias.clone()];
    params.extend(xs);
    let check = grad_check(&params, H, |tape, v| {
        let f = Lstm { weight: v[0], bias: v[1], input_dim: 2, hidden: 3 };
        let b = Lstm { weight: v[2], bias: v[3], input_dim: 2, hidden: 3 };
        let hs = bilstm_encode(tape, &v[4..], &f, &b)?;
        let stacked = tape.stack_rows(&hs)?;
        Ok(project(tape, stacked, 9))
    })
    .unwrap();
    check.max_rel_error
}

pub fn attention() -> f64 {
    let mut r = rng(10);
    let p = AttentionParams::init(&mut r, 3, 4);
    let hs: Vec<Tensor> = (0..5).map(|_| random(&mut r, &[3], 1.0)).collect();
    let mut params = vec![p.projection.weight.clone(), p.projection.bias.clone(), p.query.clone()];
    params.extend(hs);
    let check = grad_check(&params, H, |tape, v| {
        let att = Attention {
            projection: Dense { weight: v[0], bias: v[1] },
            query: v[2],
        };
        let (pooled, alpha) = attention_pool(tape, &v[3..], &att)?;
        let a = project(tape, pooled, 11);
        let b = project(tape, alpha, 12);
        tape.add(a, b)
    })
    .unwrap();
    check.max_rel_error
}

pub fn gumbel_softmax_relaxation() -> f64 {
    let mut r = rng(13);
    let logits = random(&mut r, &[4], 1.0);
    let noise = sample_gumbel(&mut r, 4);
    let mut worst = 0.0f64;
    for tau in [0.5, 1.0, 2.0] {
        let check = grad_check(std::slice::from_ref(&logits), H, |tape, v| {
            let probs = tape.softmax(v[0])?;
            let y = gumbel_softmax(tape, probs, &noise, tau)?;
            Ok(project(tape, y, 14))
        })
        .unwrap();
        worst = worst.max(check.max_rel_error);
    }
    worst
}

pub fn categorical_kl() -> f64 {
    let mut r = rng(15);
    let logits = random(&mut r, &[5], 2.0);
    let check = grad_check(&[logits], H, |tape, v| {
        let probs = tape.softmax(v[0])?;
        kl_categorical_uniform(tape, probs)
    })
    .unwrap();
    check.max_rel_error
}

pub fn gaussian_kl_and_sample() -> f64 {
    let mut r = rng(16);
    let mean = random(&mut r, &[3], 1.0);
    let logvar = random(&mut r, &[3], 1.0);
    let eps = random(&mut r, &[3], 1.0);
    let check = grad_check(&[mean, logvar], H, |tape, v| {
        let (z, kl) = gaussian_latent(tape, v[0], v[1], &eps)?;
        let zp = project(tape, z, 17);
        tape.add(zp, kl)
    })
    .unwrap();
    check.max_rel_error
}

fn small_model(latent: &LatentConfig, seed: u64) -> ModelParams {
    let arch = ArchConfig {
        hidden: 3,
        attention_dim: 2,
        policy_hidden: vec![4],
    };
    ModelParams::init(ModelDims::new(2, 1, latent, arch), seed)
}

fn small_traj(seed: u64) -> Trajectory {
    let mut r = rng(seed);
    let states: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let actions: Vec<Vec<f64>> = (0..3).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
    Trajectory::from_rows(&states, &actions, None).unwrap()
}

fn owned(params: &ModelParams) -> Vec<Tensor> {
    params.tensors().into_iter().cloned().collect()
}

pub fn full_elbo_soft_relaxation() -> f64 {
    let params = small_model(&LatentConfig::categorical(3), 18);
    let traj = small_traj(19);
    let noise = LatentNoise::Gumbel(sample_gumbel(&mut rng(20), 3));
    let cfg = LossConfig {
        kl_weight: 0.7,
        tau: 0.8,
        straight_through: false,
    };
    let dims = params.dims.clone();
    let check = grad_check(&owned(&params), H, |tape, v| {
        let model = BoundModel::from_vars(&dims, v)?;
        Ok(elbo_on_tape(tape, &model, &dims, &traj, &cfg, &noise)?.loss)
    })
    .unwrap();
    check.max_rel_error
}

pub fn full_elbo_gaussian() -> f64 {
    let params = small_model(&LatentConfig::gaussian(2), 21);
    let traj = small_traj(22);
    let noise = LatentNoise::Gaussian(Tensor::vector(vec![0.3, -1.1]));
    let cfg = LossConfig::default();
    let dims = params.dims.clone();
    let check = grad_check(&owned(&params), H, |tape, v| {
        let model = BoundModel::from_vars(&dims, v)?;
        Ok(elbo_on_tape(tape, &model, &dims, &traj, &cfg, &noise)?.loss)
    })
    .unwrap();
    check.max_rel_error
}

/// The straight-through estimator is the exact gradient of
/// `recon(z_hard0 + y(φ) − y(φ0)) + β·kl(φ)` at `φ = φ0`, where `y` is the
/// relaxed sample. Finite differences of that surrogate check the
/// straight-through gradients end to end.
pub fn full_elbo_straight_through_matches_surrogate() -> f64 {
    let params = small_model(&LatentConfig::categorical(3), 23);
    let traj = small_traj(24);
    let g = sample_gumbel(&mut rng(25), 3);
    let noise = LatentNoise::Gumbel(g.clone());
    let cfg = LossConfig {
        kl_weight: 0.5,
        tau: 0.9,
        straight_through: true,
    };
    let dims = params.dims.clone();
    let base = owned(&params);

    let relaxed_at = |ps: &[Tensor]| -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let model = BoundModel::from_vars(&dims, &vars).unwrap();
        let Posterior::Categorical { probs } = encode_on_tape(&mut tape, &model, dims.family, &traj).unwrap() else {
            unreachable!()
        };
        let y = gumbel_softmax(&mut tape, probs, &g, cfg.tau).unwrap();
        tape.value(y).clone()
    };
    let y0 = relaxed_at(&base);
    let hard0 = Tensor::one_hot(3, y0.argmax());
    let offset = Tensor::vector(hard0.data().iter().zip(y0.data()).map(|(h, y)| h - y).collect());

    let surrogate = |ps: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let model = BoundModel::from_vars(&dims, &vars).unwrap();
        let Posterior::Categorical { probs } = encode_on_tape(&mut tape, &model, dims.family, &traj).unwrap() else {
            unreachable!()
        };
        let y = gumbel_softmax(&mut tape, probs, &g, cfg.tau).unwrap();
        let shift = tape.constant(offset.clone());
        let z = tape.add(y, shift).unwrap();
        let recon = reconstruction_on_tape(&mut tape, &model.decoder, &traj, z).unwrap();
        let kl = kl_categorical_uniform(&mut tape, probs).unwrap();
        let weighted = tape.scale(kl, cfg.kl_weight).unwrap();
        let loss = tape.add(recon, weighted).unwrap();
        tape.value(loss).item()
    };

    let (parts, analytic) = elbo_loss_and_grad(&traj, &params, &cfg, &noise).unwrap();
    if (surrogate(&base) - parts.loss).abs() > 1e-9 {
        return f64::INFINITY;
    }

    let mut work = base.clone();
    let mut worst = 0.0f64;
    let mut encoder_signal = 0.0f64;
    for pi in 0..base.len() {
        for ci in 0..base[pi].len() {
            let orig = base[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + H;
            let plus = surrogate(&work);
            work[pi].data_mut()[ci] = orig - H;
            let minus = surrogate(&work);
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic[pi].data()[ci];
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
            if pi < 9 {
                encoder_signal = encoder_signal.max(a.abs());
            }
        }
    }
    // A vanishing encoder gradient would make the comparison vacuous.
    if encoder_signal > 1e-6 {
        worst
    } else {
        f64::INFINITY
    }
}

pub type Case = (&'static str, fn() -> f64);

pub const CASES: &[Case] = &[
    ("dense", dense_layer),
    ("dense rows", dense_layer_on_rows),
    ("lstm cell", lstm_cell),
    ("bi-lstm", bilstm),
    ("attention pool", attention),
    ("gumbel-softmax", gumbel_softmax_relaxation),
    ("categorical kl", categorical_kl),
    ("gaussian kl", gaussian_kl_and_sample),
    ("elbo soft relaxation", full_elbo_soft_relaxation),
    ("elbo gaussian", full_elbo_gaussian),
    ("elbo straight-through", full_elbo_straight_through_matches_surrogate),
];
