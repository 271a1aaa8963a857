//! Proxy bank and the softmax-over-distances losses built on it.
//!
//! Distances are squared Euclidean between L2-normalized vectors, i.e.
//! `2 - 2 cos(e, c)`. For an embedding `e` with label `y` and an active
//! proxy set `A`, the per-sample loss is
//! `-log( exp(-d(e, c_y)) / sum_{c in A} exp(-d(e, c)) )`, averaged over
//! the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ntw::NamedTensor;
use crate::rng::{self, stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const PROXY_INIT_STD: f32 = 0.02;
pub const PROXY_TENSOR_NAME: &str = "proxies.all";

/// One learnable proxy per original class plus a final background proxy.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyBank<T: Scalar = f32> {
    proxies: Tensor<T>,
}

impl ProxyBank {
    pub fn init(num_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::Degenerate(format!(
                "proxy bank with {num_classes} classes of width {dim}"
            )));
        }
        let mut r = rng::seeded(rng::derive_seed(seed, &[stream::PROXIES]));
        Ok(ProxyBank {
            proxies: rng::normal_tensor(&mut r, &[num_classes + 1, dim], PROXY_INIT_STD),
        })
    }

    pub fn from_named(entries: &[NamedTensor]) -> Result<Self> {
        let (_, t) = entries
            .iter()
            .find(|(n, _)| n == PROXY_TENSOR_NAME)
            .ok_or_else(|| Error::Format(format!("missing tensor {PROXY_TENSOR_NAME}")))?;
        ProxyBank::from_tensor(t.clone())
    }
}

impl<T: Scalar> ProxyBank<T> {
    /// Wraps a `[classes + 1, D]` matrix whose last row is the background proxy.
    pub fn from_tensor(proxies: Tensor<T>) -> Result<Self> {
        if proxies.shape().len() != 2 || proxies.shape()[0] < 2 {
            return Err(Error::dim(
                "proxy_bank",
                format!(
                    "expected [classes + 1, D] with classes >= 1, got {:?}",
                    proxies.shape()
                ),
            ));
        }
        Ok(ProxyBank { proxies })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.proxies
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.proxies
    }

    /// Number of original classes.
    pub fn num_classes(&self) -> usize {
        self.proxies.shape()[0] - 1
    }

    pub fn background_id(&self) -> usize {
        self.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.proxies.shape()[1]
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        vec![(PROXY_TENSOR_NAME.to_string(), self.proxies.clone())]
    }

    pub fn cast<U: Scalar>(&self) -> ProxyBank<U> {
        ProxyBank {
            proxies: self.proxies.cast(),
        }
    }

    /// Row indices of the original classes.
    pub fn original_set(&self) -> Vec<usize> {
        (0..self.num_classes()).collect()
    }

    /// Row indices of every proxy including the background one.
    pub fn full_set(&self) -> Vec<usize> {
        (0..=self.num_classes()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the transfer term on original images.
    pub beta: f64,
    /// Treat proxies as constants inside the transfer term.
    pub detach_proxies_in_dpt: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 3.0,
            detach_proxies_in_dpt: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "beta {} must be finite and >= 0",
                self.beta
            )));
        }
        Ok(())
    }
}

/// `|e/|e| - c/|c||^2` for two nonzero vectors.
pub fn proxy_distance(e: &[f32], c: &[f32]) -> Result<f64> {
    if e.len() != c.len() {
        return Err(Error::dim(
            "proxy_distance",
            format!("lengths {} and {}", e.len(), c.len()),
        ));
    }
    let norm = |v: &[f32]| {
        v.iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    };
    let (ne, nc) = (norm(e), norm(c));
    if ne == 0.0 || nc == 0.0 {
        return Err(Error::Degenerate("proxy distance of a zero vector".into()));
    }
    Ok(e.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let d = a as f64 / ne - b as f64 / nc;
            d * d
        })
        .sum())
}

/// Maps labels to their column in `active`.
fn positions(labels: &[usize], active: &[usize], what: &str) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            active.iter().position(|a| a == l).ok_or_else(|| {
                Error::Contract(format!("{what}: label {l} is not in the active proxy set"))
            })
        })
        .collect()
}

fn softmax_distance_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    emb: Var,
    labels: &[usize],
    bank: Var,
    active: &[usize],
    what: &str,
) -> Result<Var> {
    let rows = tape.shape(emb).first().copied().unwrap_or(0);
    if tape.shape(emb).len() != 2 || rows != labels.len() {
        return Err(Error::dim(
            "proxy_loss",
            format!(
                "embeddings {:?} with {} labels",
                tape.shape(emb),
                labels.len()
            ),
        ));
    }
    if active.is_empty() {
        return Err(Error::Contract(format!("{what}: empty active proxy set")));
    }
    let n_bank = tape.shape(bank)[0];
    if let Some(bad) = active.iter().find(|&&a| a >= n_bank) {
        return Err(Error::Contract(format!(
            "{what}: proxy row {bad} outside bank of {n_bank}"
        )));
    }
    let cols = positions(labels, active, what)?;
    let e = tape.l2_normalize(emb)?;
    let c = tape.gather_rows(bank, active)?;
    let c = tape.l2_normalize(c)?;
    let d = tape.pairwise_sq_dist(e, c)?;
    let logits = tape.neg(d);
    let logp = tape.log_softmax(logits);
    let picked = tape.pick_per_row(logp, &cols)?;
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

/// Proxy loss of a batch `[B, D]` over the `active` rows of the bank.
pub fn proxy_loss_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    emb: Var,
    labels: &[usize],
    bank: Var,
    active: &[usize],
) -> Result<Var> {
    softmax_distance_loss(tape, emb, labels, bank, active, "proxy_loss")
}

/// Transfer loss of original-image embeddings against the original class
/// proxies only. A background label is a contract error.
pub fn dpt_loss_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    emb: Var,
    labels: &[usize],
    bank: Var,
    num_classes: usize,
) -> Result<Var> {
    if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Contract(format!(
            "dpt_loss: label {bad} is not an original class (< {num_classes})"
        )));
    }
    let active: Vec<usize> = (0..num_classes).collect();
    softmax_distance_loss(tape, emb, labels, bank, &active, "dpt_loss")
}

/// The three scalars of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub proxy: Var,
    pub dpt: Var,
}

/// `L = L_proxy(views over all proxies) + beta * L_dpt(originals over the
/// original proxies)`.
///
/// With `beta == 0` the total is the proxy term itself, so no gradient
/// reaches the transfer branch.
pub fn total_loss_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    view_emb: Var,
    view_labels: &[usize],
    orig_emb: Var,
    orig_labels: &[usize],
    bank: Var,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let n_rows = tape.shape(bank)[0];
    let num_classes = n_rows - 1;
    let full: Vec<usize> = (0..n_rows).collect();
    let proxy = proxy_loss_on_tape(tape, view_emb, view_labels, bank, &full)?;
    let dpt_bank = if cfg.detach_proxies_in_dpt {
        let v = tape.value(bank).clone();
        tape.constant(v)
    } else {
        bank
    };
    let dpt = dpt_loss_on_tape(tape, orig_emb, orig_labels, dpt_bank, num_classes)?;
    let total = if cfg.beta == 0.0 {
        proxy
    } else {
        let weighted = tape.scale(dpt, T::of(cfg.beta));
        tape.add(proxy, weighted)?
    };
    Ok(TotalLoss { total, proxy, dpt })
}

fn eval_loss(
    emb: &Tensor,
    f: impl FnOnce(&mut Tape<'_, f64>, Var, Var) -> Result<Var>,
    bank: &ProxyBank,
) -> Result<f64> {
    let emb = emb.cast::<f64>();
    let b = bank.tensor().cast::<f64>();
    let mut tape = Tape::new();
    let e = tape.constant(emb);
    let p = tape.constant(b);
    let l = f(&mut tape, e, p)?;
    Ok(tape.value(l).item())
}

/// Value of the proxy loss for embeddings `[B, D]`, evaluated in f64.
pub fn proxy_loss(
    emb: &Tensor,
    labels: &[usize],
    bank: &ProxyBank,
    active: &[usize],
) -> Result<f64> {
    eval_loss(
        emb,
        |t, e, p| proxy_loss_on_tape(t, e, labels, p, active),
        bank,
    )
}

/// Value of the transfer loss for original-image embeddings `[B, D]`.
pub fn dpt_loss(emb: &Tensor, labels: &[usize], bank: &ProxyBank) -> Result<f64> {
    let n = bank.num_classes();
    eval_loss(emb, |t, e, p| dpt_loss_on_tape(t, e, labels, p, n), bank)
}

/// Joint objective from sub-loss values.
pub fn combine(proxy: f64, dpt: f64, cfg: &LossConfig) -> f64 {
    if cfg.beta == 0.0 {
        proxy
    } else {
        proxy + cfg.beta * dpt
    }
}
