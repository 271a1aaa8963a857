#![allow(dead_code)]

pub mod ops;

use dva::ica::{AdapterConfig, AdapterSet, Projector};
use dva::image::Image;
use dva::losses::{self, LossConfig, ProxyBank};
use dva::rng;
use dva::tensor::{Scalar, Tape, Tensor, Var};
use dva::vit::{self, EncoderConfig, EncoderWeights};
use rand::Rng;

pub const FD_STEP: f64 = 1e-3;

pub fn randn64(shape: &[usize], seed: u64, std: f64) -> Tensor<f64> {
    rng::normal_tensor(&mut rng::seeded(seed), shape, std as f32).cast()
}

pub fn random_image(size: usize, seed: u64) -> Image {
    let mut r = rng::seeded(seed);
    let data = (0..size * size * 3).map(|_| r.random::<f32>()).collect();
    Image::new(size, size, data).unwrap()
}

/// Normwise relative error `max |a - b| / max |b|`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_grads(inputs: &[Tensor<f64>], f: &dyn Fn(&[Tensor<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[t].numel());
        for j in 0..inputs[t].numel() {
            let x = work[t].data()[j];
            work[t].data_mut()[j] = x + FD_STEP;
            let up = f(&work);
            work[t].data_mut()[j] = x - FD_STEP;
            let down = f(&work);
            work[t].data_mut()[j] = x;
            g.push((up - down) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    out
}

/// Tape gradients of `build` with respect to every input, checked against
/// central differences. Returns the worst normwise relative error.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> dva::Result<Var>,
{
    let value = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; tape.value(v).numel()], |g| g.data().to_vec())
        })
        .collect();
    let numeric = numeric_grads(inputs, &value);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// `sum(out * w)` for a fixed random `w`, turning any output into a scalar
/// with a non-uniform upstream gradient.
pub fn weighted_sum(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> dva::Result<Var> {
    let w = randn64(tape.shape(out), seed, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Toy setup for checking the full joint objective in f64.
pub struct ToyProblem {
    pub cfg: EncoderConfig,
    pub weights: EncoderWeights<f64>,
    pub adapters: AdapterSet<f64>,
    pub bank: ProxyBank<f64>,
    pub views: Vec<Image>,
    pub view_labels: Vec<usize>,
    pub origs: Vec<Image>,
    pub orig_labels: Vec<usize>,
    pub loss: LossConfig,
}

impl ToyProblem {
    pub fn new(seed: u64) -> Self {
        let cfg = EncoderConfig::toy();
        let weights = EncoderWeights::init(&cfg, seed).unwrap();
        let ad_cfg = AdapterConfig {
            d: 4,
            projectors: vec![Projector::Q, Projector::K],
            layers: None,
        };
        let mut adapters = AdapterSet::attach(&ad_cfg, &cfg, seed).unwrap();
        // nonzero up-projections so both factors receive gradient
        for (i, t) in adapters.tensors_mut().into_iter().enumerate() {
            *t = rng::normal_tensor(&mut rng::seeded(seed + 100 + i as u64), t.shape(), 0.3);
        }
        // three original classes plus background
        let bank = ProxyBank::from_tensor(rng::normal_tensor(
            &mut rng::seeded(seed + 7),
            &[4, cfg.dim],
            1.0,
        ))
        .unwrap();
        ToyProblem {
            weights: weights.cast(),
            adapters: adapters.cast(),
            bank: bank.cast(),
            views: (0..3).map(|i| random_image(32, seed * 10 + i)).collect(),
            view_labels: vec![0, 2, 3],
            origs: (0..2)
                .map(|i| random_image(32, seed * 10 + 50 + i))
                .collect(),
            orig_labels: vec![1, 2],
            loss: LossConfig::default(),
            cfg,
        }
    }

    fn stack<'a>(
        &self,
        tape: &mut Tape<'a, f64>,
        enc: &vit::BoundEncoder,
        ad: &dva::ica::BoundAdapters,
        imgs: &[Image],
    ) -> Var {
        let rows: Vec<Var> = imgs
            .iter()
            .map(|im| vit::encode_on_tape(tape, &self.cfg, enc, Some(ad), im).unwrap())
            .collect();
        tape.concat_rows(&rows).unwrap()
    }

    /// Total loss with the given adapters and bank; trainable leaves when
    /// `grad` is set.
    pub fn eval<'a>(
        &'a self,
        tape: &mut Tape<'a, f64>,
        adapters: &'a AdapterSet<f64>,
        bank: &'a ProxyBank<f64>,
        grad: bool,
    ) -> (losses::TotalLoss, dva::ica::BoundAdapters, Var) {
        let enc = self.weights.bind(tape);
        let ad = if grad {
            adapters.bind(tape)
        } else {
            adapters.bind_frozen(tape)
        };
        let b = if grad {
            tape.param_ref(bank.tensor())
        } else {
            tape.constant_ref(bank.tensor())
        };
        let ve = self.stack(tape, &enc, &ad, &self.views);
        let oe = self.stack(tape, &enc, &ad, &self.origs);
        let t = losses::total_loss_on_tape(
            tape,
            ve,
            &self.view_labels,
            oe,
            &self.orig_labels,
            b,
            &self.loss,
        )
        .unwrap();
        (t, ad, b)
    }

    /// Worst relative error over the adapter tensors and the bank.
    pub fn check_total_loss(&self) -> f64 {
        let mut tape = Tape::new();
        let (t, ad, b) = self.eval(&mut tape, &self.adapters, &self.bank, true);
        tape.backward(t.total).unwrap();
        let mut analytic: Vec<Vec<f64>> = ad
            .vars()
            .iter()
            .map(|&v| tape.grad(v).unwrap().data().to_vec())
            .collect();
        analytic.push(tape.grad(b).unwrap().data().to_vec());

        let mut inputs: Vec<Tensor<f64>> = self
            .adapters
            .to_named()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        inputs.push(self.bank.tensor().clone());
        let f = |xs: &[Tensor<f64>]| {
            let mut a = self.adapters.clone();
            for (dst, src) in a.tensors_mut().into_iter().zip(xs) {
                *dst = src.clone();
            }
            let bank = ProxyBank::from_tensor(xs.last().unwrap().clone()).unwrap();
            let mut tape = Tape::new();
            let (t, _, _) = self.eval(&mut tape, &a, &bank, false);
            tape.value(t.total).item()
        };
        let numeric = numeric_grads(&inputs, &f);
        analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| rel_err(a, n))
            .fold(0.0, f64::max)
    }
}

pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (Scalar::to_f64(*x) - Scalar::to_f64(*y)).abs())
        .fold(0.0, f64::max)
}
