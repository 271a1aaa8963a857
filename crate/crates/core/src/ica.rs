//! In-context adaptation: bottleneck adapters in parallel to the frozen
//! attention projectors.
//!
//! For a projector `p` with an adapter, the block computes
//! `p(LN1(E)) + LN1(E) · W_down · W_up`. The adapter reuses the block's
//! frozen LN1 output and has no biases, so each adapter holds exactly
//! `2 · D · d` parameters.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ntw::NamedTensor;
use crate::rng::{self, stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::vit::EncoderConfig;

/// Init std for `W_down`. `W_up` starts at exactly zero.
pub const ADAPTER_INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projector {
    Q,
    K,
    V,
}

impl Projector {
    pub const ALL: [Projector; 3] = [Projector::Q, Projector::K, Projector::V];

    pub fn name(self) -> &'static str {
        match self {
            Projector::Q => "q",
            Projector::K => "k",
            Projector::V => "v",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Projector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Bottleneck width.
    pub d: usize,
    pub projectors: Vec<Projector>,
    /// Encoder layers that get adapters; `None` means every layer.
    pub layers: Option<Vec<usize>>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            d: 16,
            projectors: vec![Projector::Q, Projector::K],
            layers: None,
        }
    }
}

impl AdapterConfig {
    pub fn with_projectors(mut self, projectors: &[Projector]) -> Self {
        self.projectors = projectors.to_vec();
        self
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.projectors.is_empty() {
            return Err(Error::Config("adapter.projectors must not be empty".into()));
        }
        let mut p = self.projectors.clone();
        p.sort();
        p.dedup();
        if p.len() != self.projectors.len() {
            return Err(Error::Config("adapter.projectors has duplicates".into()));
        }
        if self.d == 0 || self.d >= enc.dim {
            return Err(Error::Config(format!(
                "adapter.d = {} must satisfy 0 < d < D = {}",
                self.d, enc.dim
            )));
        }
        if let Some(layers) = &self.layers {
            let mut l = layers.clone();
            l.sort();
            l.dedup();
            if l.len() != layers.len() || l.iter().any(|&i| i >= enc.depth) {
                return Err(Error::Config(format!(
                    "adapter.layers {layers:?} must be distinct indices below depth {}",
                    enc.depth
                )));
            }
        }
        Ok(())
    }

    pub fn layer_indices(&self, depth: usize) -> Vec<usize> {
        match &self.layers {
            Some(l) => {
                let mut l = l.clone();
                l.sort();
                l
            }
            None => (0..depth).collect(),
        }
    }

    fn projector_set(&self) -> Vec<Projector> {
        let mut p = self.projectors.clone();
        p.sort();
        p
    }
}

/// `|layers| x |projectors| x 2 D d`.
pub fn adapter_param_count(cfg: &AdapterConfig, enc: &EncoderConfig) -> usize {
    cfg.layer_indices(enc.depth).len() * cfg.projectors.len() * 2 * enc.dim * cfg.d
}

/// One `(W_down, W_up)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer<T: Scalar = f32> {
    pub down: Tensor<T>,
    pub up: Tensor<T>,
}

impl<T: Scalar> AdapterLayer<T> {
    pub fn new(down: Tensor<T>, up: Tensor<T>) -> Result<Self> {
        let ok = match (down.shape(), up.shape()) {
            ([dim, d], [d2, dim2]) => d == d2 && dim == dim2 && d < dim,
            _ => false,
        };
        if !ok {
            return Err(Error::dim(
                "adapter",
                format!(
                    "W_down {:?} / W_up {:?} do not form a D x d, d x D bottleneck",
                    down.shape(),
                    up.shape()
                ),
            ));
        }
        Ok(AdapterLayer { down, up })
    }

    pub fn dim(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn bottleneck(&self) -> usize {
        self.down.shape()[1]
    }
}

/// Value-level `x_ln · W_down · W_up` for `x_ln: [T, D]`.
pub fn adapter_forward(x_ln: &Tensor, a: &AdapterLayer) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant_ref(x_ln);
    let down = tape.constant_ref(&a.down);
    let up = tape.constant_ref(&a.up);
    let y = apply(&mut tape, x, BoundAdapter { down, up })?;
    Ok(tape.value(y).clone())
}

/// Tape handles of one adapter.
#[derive(Clone, Copy, Debug)]
pub struct BoundAdapter {
    pub down: Var,
    pub up: Var,
}

pub(crate) fn apply<T: Scalar>(tape: &mut Tape<'_, T>, x_ln: Var, a: BoundAdapter) -> Result<Var> {
    let h = tape.matmul(x_ln, a.down)?;
    tape.matmul(h, a.up)
}

/// Adapters for every layer of one encoder, indexed by layer then projector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<T: Scalar = f32> {
    cfg: AdapterConfig,
    layers: Vec<[Option<AdapterLayer<T>>; 3]>,
}

#[derive(Clone, Debug)]
pub struct BoundAdapters {
    layers: Vec<[Option<BoundAdapter>; 3]>,
}

impl BoundAdapters {
    pub fn get(&self, layer: usize, p: Projector) -> Option<BoundAdapter> {
        self.layers.get(layer).and_then(|l| l[p.slot()])
    }

    /// `(down, up)` handles in the same order as [`AdapterSet::to_named`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| l.iter().flatten().flat_map(|a| [a.down, a.up]))
            .collect()
    }
}

pub(crate) fn param_name(layer: usize, p: Projector, part: &str) -> String {
    format!("ica.layer{layer}.{p}.{part}")
}

impl AdapterSet {
    /// Fresh adapters: `W_down ~ N(0, 0.02^2)` from the seed, `W_up = 0`.
    pub fn attach(cfg: &AdapterConfig, enc: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate(enc)?;
        let mut r = rng::seeded(rng::derive_seed(seed, &[stream::ADAPTERS]));
        let mut layers: Vec<[Option<AdapterLayer>; 3]> = vec![[None, None, None]; enc.depth];
        for l in cfg.layer_indices(enc.depth) {
            for p in cfg.projector_set() {
                let down = rng::normal_tensor(&mut r, &[enc.dim, cfg.d], ADAPTER_INIT_STD);
                let up = Tensor::zeros(&[cfg.d, enc.dim]);
                layers[l][p.slot()] = Some(AdapterLayer::new(down, up)?);
            }
        }
        Ok(AdapterSet {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn from_named(
        cfg: &AdapterConfig,
        enc: &EncoderConfig,
        entries: &[NamedTensor],
    ) -> Result<Self> {
        cfg.validate(enc)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("missing adapter tensor {name}")))
        };
        let mut layers: Vec<[Option<AdapterLayer>; 3]> = vec![[None, None, None]; enc.depth];
        let mut expected = 0;
        for l in cfg.layer_indices(enc.depth) {
            for p in cfg.projector_set() {
                let down = find(&param_name(l, p, "down"))?;
                let up = find(&param_name(l, p, "up"))?;
                if down.shape() != [enc.dim, cfg.d] || up.shape() != [cfg.d, enc.dim] {
                    return Err(Error::Format(format!(
                        "adapter layer{l}.{p} has shapes {:?}/{:?}, expected [{}, {}]/[{}, {}]",
                        down.shape(),
                        up.shape(),
                        enc.dim,
                        cfg.d,
                        cfg.d,
                        enc.dim
                    )));
                }
                layers[l][p.slot()] = Some(AdapterLayer::new(down, up)?);
                expected += 2;
            }
        }
        let ica_entries = entries
            .iter()
            .filter(|(n, _)| n.starts_with("ica."))
            .count();
        if ica_entries != expected {
            return Err(Error::Format(format!(
                "adapter file has {ica_entries} ica.* tensors, config implies {expected}"
            )));
        }
        Ok(AdapterSet {
            cfg: cfg.clone(),
            layers,
        })
    }
}

impl<T: Scalar> AdapterSet<T> {
    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn get(&self, layer: usize, p: Projector) -> Option<&AdapterLayer<T>> {
        self.layers.get(layer).and_then(|l| l[p.slot()].as_ref())
    }

    pub fn get_mut(&mut self, layer: usize, p: Projector) -> Option<&mut AdapterLayer<T>> {
        self.layers
            .get_mut(layer)
            .and_then(|l| l[p.slot()].as_mut())
    }

    /// Number of `(W_down, W_up)` pairs.
    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.iter().flatten().count()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.iter().flatten())
            .map(|a| a.down.numel() + a.up.numel())
            .sum()
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (l, slots) in self.layers.iter().enumerate() {
            for p in Projector::ALL {
                if let Some(a) = &slots[p.slot()] {
                    out.push((param_name(l, p, "down"), a.down.clone()));
                    out.push((param_name(l, p, "up"), a.up.clone()));
                }
            }
        }
        out
    }

    /// Mutable tensors in [`AdapterSet::to_named`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.iter_mut().flatten())
            .flat_map(|a| [&mut a.down, &mut a.up])
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> AdapterSet<U> {
        AdapterSet {
            cfg: self.cfg.clone(),
            layers: self
                .layers
                .iter()
                .map(|slots| {
                    slots.clone().map(|a| {
                        a.map(|a| AdapterLayer {
                            down: a.down.cast(),
                            up: a.up.cast(),
                        })
                    })
                })
                .collect(),
        }
    }

    /// Registers every adapter tensor on the tape as a trainable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> BoundAdapters {
        self.bind_with(tape, true)
    }

    /// Registers adapters as constants (evaluation).
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a, T>) -> BoundAdapters {
        self.bind_with(tape, false)
    }

    fn bind_with<'a>(&'a self, tape: &mut Tape<'a, T>, trainable: bool) -> BoundAdapters {
        let layers = self
            .layers
            .iter()
            .map(|slots| {
                let mut out = [None; 3];
                for p in Projector::ALL {
                    if let Some(a) = &slots[p.slot()] {
                        let (down, up) = if trainable {
                            (tape.param_ref(&a.down), tape.param_ref(&a.up))
                        } else {
                            (tape.constant_ref(&a.down), tape.constant_ref(&a.up))
                        };
                        out[p.slot()] = Some(BoundAdapter { down, up });
                    }
                }
                out
            })
            .collect();
        BoundAdapters { layers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn zero_up_gives_zero_output() {
        let a = AdapterLayer::new(
            rng::normal_tensor(&mut rng::seeded(3), &[8, 2], 1.0),
            Tensor::zeros(&[2, 8]),
        )
        .unwrap();
        let x = rng::normal_tensor(&mut rng::seeded(4), &[3, 8], 1.0);
        let y = adapter_forward(&x, &a).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_sized_bottleneck() {
        let a = AdapterLayer::new(t(&[2, 1], &[1., 0.]), t(&[1, 2], &[2., 3.])).unwrap();
        let y = adapter_forward(&t(&[1, 2], &[4., 5.]), &a).unwrap();
        assert_eq!(y.data(), &[8., 12.]);
    }

    #[test]
    fn equals_two_explicit_matmuls() {
        let down = rng::normal_tensor(&mut rng::seeded(5), &[8, 2], 1.0);
        let up = rng::normal_tensor(&mut rng::seeded(6), &[2, 8], 1.0);
        let x = rng::normal_tensor(&mut rng::seeded(7), &[3, 8], 1.0);
        let a = AdapterLayer::new(down.clone(), up.clone()).unwrap();
        let y = adapter_forward(&x, &a).unwrap();
        // oracle: two separate hand-written products
        let mut h = vec![0.0f32; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..8 {
                    h[i * 2 + j] += x.data()[i * 8 + k] * down.data()[k * 2 + j];
                }
            }
        }
        let mut want = vec![0.0f32; 3 * 8];
        for i in 0..3 {
            for j in 0..8 {
                for k in 0..2 {
                    want[i * 8 + j] += h[i * 2 + k] * up.data()[k * 8 + j];
                }
            }
        }
        assert_eq!(y.data(), want.as_slice());
    }

    #[test]
    fn rejects_non_bottleneck_shapes() {
        assert!(AdapterLayer::new(Tensor::<f32>::zeros(&[4, 4]), Tensor::zeros(&[4, 4])).is_err());
        assert!(AdapterLayer::new(Tensor::<f32>::zeros(&[4, 2]), Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn attach_counts_and_determinism() {
        let enc = EncoderConfig::vit_b16();
        let cfg = AdapterConfig::default();
        let a = AdapterSet::attach(&cfg, &enc, 11).unwrap();
        assert_eq!(a.len(), 24);
        assert_eq!(a.param_count(), 589_824);
        let b = AdapterSet::attach(&cfg, &enc, 11).unwrap();
        assert!(a == b);
        for (name, t) in a.to_named() {
            if name.ends_with(".up") {
                assert!(t.data().iter().all(|v| v.to_bits() == 0), "{name}");
            }
        }
    }

    #[test]
    fn param_count_formula() {
        let enc = EncoderConfig::vit_b16();
        let count = |ps: &[Projector]| {
            adapter_param_count(&AdapterConfig::default().with_projectors(ps), &enc)
        };
        assert_eq!(count(&[Projector::Q]), 294_912);
        assert_eq!(count(&[Projector::Q, Projector::K]), 589_824);
        assert_eq!(count(&Projector::ALL), 884_736);
        let toy = EncoderConfig::toy();
        let cfg = AdapterConfig {
            d: 4,
            ..AdapterConfig::default()
        };
        assert_eq!(adapter_param_count(&cfg, &toy), 1_024);
    }

    #[test]
    fn named_round_trip_and_validation() {
        let enc = EncoderConfig::toy();
        let cfg = AdapterConfig {
            d: 4,
            projectors: vec![Projector::K, Projector::V],
            layers: Some(vec![1]),
        };
        let a = AdapterSet::attach(&cfg, &enc, 2).unwrap();
        let named = a.to_named();
        let names: Vec<_> = named.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            [
                "ica.layer1.k.down",
                "ica.layer1.k.up",
                "ica.layer1.v.down",
                "ica.layer1.v.up"
            ]
        );
        let back = AdapterSet::from_named(&cfg, &enc, &named).unwrap();
        assert!(back == a);
        assert!(AdapterSet::from_named(
            &AdapterConfig {
                d: 4,
                ..Default::default()
            },
            &enc,
            &named
        )
        .is_err());
    }

    #[test]
    fn config_validation() {
        let enc = EncoderConfig::toy();
        let bad = AdapterConfig {
            projectors: vec![],
            ..Default::default()
        };
        assert!(bad.validate(&enc).is_err());
        let wide = AdapterConfig {
            d: 32,
            ..Default::default()
        };
        assert!(wide.validate(&enc).is_err());
        let layers = AdapterConfig {
            d: 4,
            layers: Some(vec![2]),
            ..Default::default()
        };
        assert!(layers.validate(&enc).is_err());
    }
}
