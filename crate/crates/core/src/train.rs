//! Training loop: only adapters and proxies move, the backbone stays fixed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::ica::AdapterSet;
use crate::image::Image;
use crate::losses::{self, LossConfig, ProxyBank};
use crate::manifest::{Manifest, Role};
use crate::rng::{self, stream};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{self, BoundEncoder, EncoderConfig, EncoderWeights};

/// Which objective to optimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Proxy loss on original images over the original classes.
    Ica,
    /// Proxy loss on object views over all proxies plus the weighted
    /// transfer loss on originals.
    Dva,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Images are first resized to `resize x resize`...
    pub resize: usize,
    /// ...then cropped to `crop x crop` (random + flip in training, center in eval).
    pub crop: usize,
    pub objective: Objective,
    /// Include background views (and so the background proxy) in the proxy term.
    pub use_background: bool,
    /// Drop the transfer term entirely (no forward pass on originals).
    pub ablate_dpt: bool,
    /// Learning-rate multiplier for the proxy bank.
    pub proxy_lr_mult: f64,
    /// Stop after this many optimizer steps; the schedule spans them.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            weight_decay: 1e-4,
            epochs: 10,
            batch_size: 32,
            resize: 256,
            crop: 224,
            objective: Objective::Dva,
            use_background: true,
            ablate_dpt: false,
            proxy_lr_mult: 1.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.crop > self.resize {
            return bad(format!(
                "crop {} larger than resize {}",
                self.crop, self.resize
            ));
        }
        if self.crop != enc.image_size {
            return bad(format!(
                "crop {} must equal the encoder image_size {}",
                self.crop, enc.image_size
            ));
        }
        if !(self.lr0 >= 0.0) || !(self.weight_decay >= 0.0) || !(self.proxy_lr_mult >= 0.0) {
            return bad("lr0, weight_decay and proxy_lr_mult must be non-negative".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        Ok(())
    }
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Contract(format!(
            "cosine_lr step {step} outside 0..={total_steps}"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("adam_step: parameter {i} has no gradient")))?;
        if g.shape() != p.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "param {:?}, grad {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    state.m[i].shape()
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref().expect("checked above").data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = ADAM_BETA1 * m[j] as f64 + (1.0 - ADAM_BETA1) * gj;
            let vj = ADAM_BETA2 * v[j] as f64 + (1.0 - ADAM_BETA2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let mut x = *w as f64;
            x -= lr * weight_decay * x;
            x -= lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
            *w = x as f32;
        }
    }
    Ok(())
}

/// Original training images and their object views, resized once.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub originals: Vec<Sample>,
    /// Views of `originals[i]`, disc before bg.
    pub views: Vec<Vec<(Role, Sample)>>,
    pub num_classes: usize,
}

impl TrainData {
    pub fn new(
        originals: Vec<Sample>,
        views: Vec<Vec<(Role, Sample)>>,
        num_classes: usize,
    ) -> Result<Self> {
        if originals.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        if views.len() != originals.len() {
            return Err(Error::Contract(format!(
                "{} view lists for {} originals",
                views.len(),
                originals.len()
            )));
        }
        if let Some(s) = originals.iter().find(|s| s.label >= num_classes) {
            return Err(Error::Contract(format!(
                "label {} of {} outside {num_classes} training classes",
                s.label, s.id
            )));
        }
        Ok(TrainData {
            originals,
            views,
            num_classes,
        })
    }

    /// Loads originals from `train` and, if given, their views from `opa`.
    /// View ids are `{original id}.{role}`.
    pub fn load(
        train: &Manifest,
        opa: Option<&Manifest>,
        num_classes: usize,
        resize: usize,
    ) -> Result<Self> {
        let train = train.filter(|r| r.role == Role::Orig);
        let originals = data::load_samples(&train, resize)?;
        let index: BTreeMap<&str, usize> = originals
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut views: Vec<Vec<(Role, Sample)>> = vec![Vec::new(); originals.len()];
        if let Some(opa) = opa {
            for row in &opa.rows {
                if row.role == Role::Orig {
                    continue;
                }
                let id = row.id();
                let base = id.rsplit_once('.').map_or(id.as_str(), |(b, _)| b);
                let Some(&i) = index.get(base) else {
                    return Err(Error::Contract(format!(
                        "view {id} has no original image in the training manifest"
                    )));
                };
                let image = Image::read_ppm(&opa.resolve(row))?.resize(resize, resize)?;
                views[i].push((
                    row.role,
                    Sample {
                        id: id.clone(),
                        label: row.label_id,
                        image,
                    },
                ));
            }
            for v in &mut views {
                v.sort_by_key(|(r, _)| *r);
            }
        }
        TrainData::new(originals, views, num_classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_proxy: f64,
    pub loss_dpt: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss_proxy: f64,
    pub mean_loss_dpt: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss_proxy,mean_loss_dpt,lr\n");
        for e in &self.epochs {
            let dpt = e.mean_loss_dpt.map(|d| d.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.mean_loss_proxy, dpt, e.lr
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Total optimizer steps implied by the config and data size.
pub fn total_steps(cfg: &TrainConfig, n: usize) -> usize {
    let full = cfg.epochs * n.div_ceil(cfg.batch_size);
    cfg.max_steps.map_or(full, |m| m.min(full))
}

/// Encodes augmented views on the tape and stacks them into `[B, D]`.
fn encode_batch(
    tape: &mut Tape<'_, f32>,
    enc_cfg: &EncoderConfig,
    enc: &BoundEncoder,
    ad: &crate::ica::BoundAdapters,
    items: &[(&Image, rng::SeededRng)],
    crop: usize,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(items.len());
    for (img, r) in items {
        let mut r = r.clone();
        let view = data::random_crop_flip(img, crop, &mut r)?;
        rows.push(vit::encode_on_tape(tape, enc_cfg, enc, Some(ad), &view)?);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat_rows(&rows)
    }
}

struct StepLosses {
    total: f64,
    proxy: f64,
    dpt: Option<f64>,
    grads_adapters: Vec<Option<Tensor>>,
    grad_bank: Option<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn forward_backward(
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    enc_cfg: &EncoderConfig,
    weights: &EncoderWeights,
    adapters: &AdapterSet,
    bank: &ProxyBank,
    data: &TrainData,
    batch: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let enc = weights.bind(&mut tape);
    let ad = adapters.bind(&mut tape);
    let bank_var = tape.param_ref(bank.tensor());
    let aug = |i: usize, role: Role| data::augment_rng(seed, epoch, i, data::branch_of(role));

    let orig_items = || -> Vec<(&Image, rng::SeededRng)> {
        batch
            .iter()
            .map(|&i| (&data.originals[i].image, aug(i, Role::Orig)))
            .collect()
    };
    let orig_labels: Vec<usize> = batch.iter().map(|&i| data.originals[i].label).collect();

    let (total, proxy, dpt) = match cfg.objective {
        Objective::Ica => {
            let e = encode_batch(&mut tape, enc_cfg, &enc, &ad, &orig_items(), cfg.crop)?;
            let l = losses::proxy_loss_on_tape(
                &mut tape,
                e,
                &orig_labels,
                bank_var,
                &bank.original_set(),
            )?;
            (l, l, None)
        }
        Objective::Dva => {
            let mut items = Vec::new();
            let mut labels = Vec::new();
            for &i in batch {
                for (role, s) in &data.views[i] {
                    if *role == Role::Bg && !cfg.use_background {
                        continue;
                    }
                    items.push((&s.image, aug(i, *role)));
                    labels.push(s.label);
                }
            }
            if items.is_empty() {
                return Err(Error::Contract(
                    "batch has no object views; run OPA preparation first".into(),
                ));
            }
            let ve = encode_batch(&mut tape, enc_cfg, &enc, &ad, &items, cfg.crop)?;
            if cfg.ablate_dpt {
                let l =
                    losses::proxy_loss_on_tape(&mut tape, ve, &labels, bank_var, &bank.full_set())?;
                (l, l, None)
            } else {
                let oe = encode_batch(&mut tape, enc_cfg, &enc, &ad, &orig_items(), cfg.crop)?;
                let t = losses::total_loss_on_tape(
                    &mut tape,
                    ve,
                    &labels,
                    oe,
                    &orig_labels,
                    bank_var,
                    loss_cfg,
                )?;
                (t.total, t.proxy, Some(t.dpt))
            }
        }
    };
    let total_v = tape.value(total).item() as f64;
    let proxy_v = tape.value(proxy).item() as f64;
    let dpt_v = dpt.map(|d| tape.value(d).item() as f64);
    if !total_v.is_finite() || !proxy_v.is_finite() || dpt_v.is_some_and(|d| !d.is_finite()) {
        return Err(Error::NonFinite(format!(
            "epoch {epoch}: loss total={total_v} proxy={proxy_v} dpt={dpt_v:?} on batch {batch:?}"
        )));
    }
    tape.backward(total)?;
    let grads_adapters: Vec<Option<Tensor>> =
        ad.vars().iter().map(|&v| tape.grad(v).cloned()).collect();
    let grad_bank = tape.grad(bank_var).cloned();
    let finite = grads_adapters
        .iter()
        .chain(std::iter::once(&grad_bank))
        .all(|g| g.as_ref().is_none_or(Tensor::is_finite));
    if !finite {
        return Err(Error::NonFinite(format!(
            "epoch {epoch}: non-finite gradient at loss {total_v} on batch {batch:?}"
        )));
    }
    Ok(StepLosses {
        total: total_v,
        proxy: proxy_v,
        dpt: dpt_v,
        grads_adapters,
        grad_bank,
    })
}

/// Runs the configured number of epochs (or `max_steps`), updating
/// `adapters` and `bank` in place.
#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    enc_cfg: &EncoderConfig,
    weights: &EncoderWeights,
    adapters: &mut AdapterSet,
    bank: &mut ProxyBank,
    data: &TrainData,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate(enc_cfg)?;
    loss_cfg.validate()?;
    if bank.num_classes() != data.num_classes {
        return Err(Error::Contract(format!(
            "proxy bank has {} classes, data has {}",
            bank.num_classes(),
            data.num_classes
        )));
    }
    let n = data.originals.len();
    let total = total_steps(cfg, n);
    let mut adam_a = AdamState::new(adapters.tensors_mut().into_iter().map(|t| &*t));
    let mut adam_p = AdamState::new([bank.tensor()]);
    let mut report = TrainReport::default();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        if step >= total {
            break;
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::seeded(rng::derive_seed(seed, &[stream::SHUFFLE, epoch as u64]));
        order.shuffle(&mut r);
        let first = report.steps.len();
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let lr = cosine_lr(step, total, cfg.lr0)?;
            let out = forward_backward(
                cfg, loss_cfg, enc_cfg, weights, adapters, bank, data, batch, seed, epoch,
            )?;
            adam_step(
                &mut adapters.tensors_mut(),
                &out.grads_adapters,
                &mut adam_a,
                lr,
                cfg.weight_decay,
            )?;
            adam_step(
                &mut [bank.tensor_mut()],
                &[out.grad_bank],
                &mut adam_p,
                lr * cfg.proxy_lr_mult,
                cfg.weight_decay,
            )?;
            report.steps.push(StepRecord {
                epoch,
                step,
                lr,
                loss_total: out.total,
                loss_proxy: out.proxy,
                loss_dpt: out.dpt,
            });
            step += 1;
        }
        let steps = &report.steps[first..];
        if steps.is_empty() {
            break 'epochs;
        }
        let k = steps.len() as f64;
        let mean_dpt = if steps.iter().all(|s| s.loss_dpt.is_some()) {
            Some(steps.iter().filter_map(|s| s.loss_dpt).sum::<f64>() / k)
        } else {
            None
        };
        report.epochs.push(EpochRecord {
            epoch,
            mean_loss_proxy: steps.iter().map(|s| s.loss_proxy).sum::<f64>() / k,
            mean_loss_dpt: mean_dpt,
            lr: steps.last().expect("non-empty").lr,
        });
    }
    Ok(report)
}
