//! Frozen ViT-style encoder: patch embedding, pre-LN transformer blocks
//! with adapter hooks on the Q/K/V projections, CLS readout.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ica::{self, AdapterSet, BoundAdapters, Projector};
use crate::image::Image;
use crate::ntw::NamedTensor;
use crate::rng::{self, stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Std of the truncated-normal backbone init.
pub const BACKBONE_INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub ln_eps: f64,
    /// Per-channel normalization applied to `[0, 1]` pixels.
    pub pixel_mean: [f32; 3],
    pub pixel_std: [f32; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::vit_b16()
    }
}

impl EncoderConfig {
    /// ViT-B/16 at 224 px.
    pub fn vit_b16() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
            ln_eps: 1e-6,
            pixel_mean: [0.5; 3],
            pixel_std: [0.5; 3],
        }
    }

    /// 32 px images, 8 px patches, D = 32, two layers.
    pub fn toy() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            dim: 32,
            depth: 2,
            heads: 4,
            ..Self::vit_b16()
        }
    }

    /// 64 px images on an 8 x 8 patch grid, D = 32, two layers.
    pub fn desk() -> Self {
        EncoderConfig {
            image_size: 64,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps {} must be positive", self.ln_eps));
        }
        if self.pixel_std.iter().any(|&s| !(s > 0.0)) {
            return bad("pixel_std entries must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the CLS token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Parameter groups of the backbone used for fine-tuning accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    AttentionProjector,
    OutputProjector,
    Mlp,
    All,
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention_projector" => Ok(ParamGroup::AttentionProjector),
            "output_projector" => Ok(ParamGroup::OutputProjector),
            "mlp" => Ok(ParamGroup::Mlp),
            "all" => Ok(ParamGroup::All),
            other => Err(Error::Contract(format!(
                "unknown parameter group {other:?} (expected attention_projector, output_projector, mlp or all)"
            ))),
        }
    }
}

/// Exact parameter count of a backbone group, weights plus biases.
///
/// With `L` layers, width `D`, MLP hidden `H`, patch `P`, `N` patches:
/// - attention projector: `L * 3 * (D^2 + D)`  (Q, K, V)
/// - output projector:    `L * (D^2 + D)`
/// - mlp:                 `L * (D H + H + H D + D)`
/// - all: the above plus `L * 4D` (two LayerNorms per block),
///   patch projection `3 P^2 D + D`, positions `(N + 1) D`, CLS `D`,
///   and the final LayerNorm `2D`.
pub fn backbone_param_count(cfg: &EncoderConfig, group: ParamGroup) -> usize {
    let (l, d, h) = (cfg.depth, cfg.dim, cfg.mlp_hidden());
    let attn = l * 3 * (d * d + d);
    let out = l * (d * d + d);
    let mlp = l * (d * h + h + h * d + d);
    match group {
        ParamGroup::AttentionProjector => attn,
        ParamGroup::OutputProjector => out,
        ParamGroup::Mlp => mlp,
        ParamGroup::All => {
            let patch = cfg.patch_dim() * d + d;
            let pos = cfg.num_tokens() * d;
            attn + out + mlp + l * 4 * d + patch + pos + d + 2 * d
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T: Scalar = f32> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub q_weight: Tensor<T>,
    pub q_bias: Tensor<T>,
    pub k_weight: Tensor<T>,
    pub k_bias: Tensor<T>,
    pub v_weight: Tensor<T>,
    pub v_bias: Tensor<T>,
    pub out_weight: Tensor<T>,
    pub out_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gain",
    "ln1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl<T: Scalar> BlockWeights<T> {
    fn fields(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.q_weight,
            &self.q_bias,
            &self.k_weight,
            &self.k_bias,
            &self.v_weight,
            &self.v_bias,
            &self.out_weight,
            &self.out_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    fn from_fields(mut f: Vec<Tensor<T>>) -> Self {
        let mut next = || f.remove(0);
        BlockWeights {
            ln1_gain: next(),
            ln1_bias: next(),
            q_weight: next(),
            q_bias: next(),
            k_weight: next(),
            k_bias: next(),
            v_weight: next(),
            v_bias: next(),
            out_weight: next(),
            out_bias: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            fc1_weight: next(),
            fc1_bias: next(),
            fc2_weight: next(),
            fc2_bias: next(),
        }
    }

    pub fn projector(&self, p: Projector) -> (&Tensor<T>, &Tensor<T>) {
        match p {
            Projector::Q => (&self.q_weight, &self.q_bias),
            Projector::K => (&self.k_weight, &self.k_bias),
            Projector::V => (&self.v_weight, &self.v_bias),
        }
    }
}

/// Named backbone parameters. Linear weights are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T: Scalar = f32> {
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub cls_token: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
}

/// Names and shapes every backbone weight file must contain, in file order.
pub fn weight_schema(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, h) = (cfg.dim, cfg.mlp_hidden());
    let mut s = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![cfg.num_tokens(), d]),
        ("cls_token".to_string(), vec![1, d]),
    ];
    let block_shapes = [
        vec![d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, h],
        vec![h],
        vec![h, d],
        vec![d],
    ];
    for l in 0..cfg.depth {
        for (f, shape) in BLOCK_FIELDS.iter().zip(&block_shapes) {
            s.push((format!("blocks.{l}.{f}"), shape.clone()));
        }
    }
    s.push(("final_ln.gain".to_string(), vec![d]));
    s.push(("final_ln.bias".to_string(), vec![d]));
    s
}

fn is_gain(name: &str) -> bool {
    name.ends_with(".gain")
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

impl EncoderWeights {
    /// Seeded init: truncated normal (std 0.02) for projections, positions
    /// and CLS; zero biases; unit LayerNorm gains.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(rng::derive_seed(seed, &[stream::BACKBONE]));
        let entries: Vec<NamedTensor> = weight_schema(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = if is_gain(&name) {
                    Tensor::ones(&shape)
                } else if is_bias(&name) {
                    Tensor::zeros(&shape)
                } else {
                    rng::truncated_normal_tensor(&mut r, &shape, BACKBONE_INIT_STD)
                };
                (name, t)
            })
            .collect();
        Self::from_named(cfg, &entries)
    }

    /// Validates entry names and shapes against [`weight_schema`].
    pub fn from_named(cfg: &EncoderConfig, entries: &[NamedTensor]) -> Result<Self> {
        cfg.validate()?;
        let schema = weight_schema(cfg);
        let backbone: Vec<&NamedTensor> = entries
            .iter()
            .filter(|(n, _)| !n.starts_with("ica.") && !n.starts_with("proxies."))
            .collect();
        if backbone.len() != schema.len() {
            return Err(Error::Format(format!(
                "backbone has {} tensors, config implies {}",
                backbone.len(),
                schema.len()
            )));
        }
        let mut ordered = Vec::with_capacity(schema.len());
        for (name, shape) in &schema {
            let (_, t) = backbone
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing backbone tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            ordered.push(t.clone());
        }
        let mut it = ordered.into_iter();
        let mut next = || it.next().expect("schema length checked");
        let patch_weight = next();
        let patch_bias = next();
        let pos_embed = next();
        let cls_token = next();
        let blocks = (0..cfg.depth)
            .map(|_| BlockWeights::from_fields((0..BLOCK_FIELDS.len()).map(|_| next()).collect()))
            .collect();
        let final_gain = next();
        let final_bias = next();
        Ok(EncoderWeights {
            patch_weight,
            patch_bias,
            pos_embed,
            cls_token,
            blocks,
            final_gain,
            final_bias,
        })
    }
}

impl<T: Scalar> EncoderWeights<T> {
    /// Borrowing view in schema order.
    pub fn named_refs(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_embed.weight".into(), &self.patch_weight),
            ("patch_embed.bias".into(), &self.patch_bias),
            ("pos_embed".into(), &self.pos_embed),
            ("cls_token".into(), &self.cls_token),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (f, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{l}.{f}"), t));
            }
        }
        out.push(("final_ln.gain".into(), &self.final_gain));
        out.push(("final_ln.bias".into(), &self.final_bias));
        out
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        self.named_refs()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_refs().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        EncoderWeights {
            patch_weight: self.patch_weight.cast(),
            patch_bias: self.patch_bias.cast(),
            pos_embed: self.pos_embed.cast(),
            cls_token: self.cls_token.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights::from_fields(b.fields().iter().map(|t| t.cast()).collect()))
                .collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
        }
    }

    /// Registers every weight on the tape as a borrowed constant.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> BoundEncoder {
        let blocks = self.blocks.iter().map(|b| bind_block(tape, b)).collect();
        BoundEncoder {
            patch_weight: tape.constant_ref(&self.patch_weight),
            patch_bias: tape.constant_ref(&self.patch_bias),
            pos_embed: tape.constant_ref(&self.pos_embed),
            cls_token: tape.constant_ref(&self.cls_token),
            blocks,
            final_gain: tape.constant_ref(&self.final_gain),
            final_bias: tape.constant_ref(&self.final_bias),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    ln1_gain: Var,
    ln1_bias: Var,
    /// `(weight, bias)` for Q, K, V.
    proj: [(Var, Var); 3],
    out_weight: Var,
    out_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    fc1_weight: Var,
    fc1_bias: Var,
    fc2_weight: Var,
    fc2_bias: Var,
}

#[derive(Clone, Debug)]
pub struct BoundEncoder {
    patch_weight: Var,
    patch_bias: Var,
    pos_embed: Var,
    cls_token: Var,
    pub blocks: Vec<BoundBlock>,
    final_gain: Var,
    final_bias: Var,
}

/// Normalized, flattened patches `[N, P * P * 3]`; each row is one patch in
/// raster order, pixels `(row, col, channel)` within the patch.
pub fn patch_matrix<T: Scalar>(image: &Image, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    if image.width() != cfg.image_size || image.height() != cfg.image_size {
        return Err(Error::dim(
            "patchify",
            format!(
                "image is {}x{}, encoder expects {}x{}",
                image.width(),
                image.height(),
                cfg.image_size,
                cfg.image_size
            ),
        ));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for y in 0..p {
                for x in 0..p {
                    let px = image.get(gx * p + x, gy * p + y);
                    for c in 0..3 {
                        let v = (px[c] - cfg.pixel_mean[c]) / cfg.pixel_std[c];
                        data.push(T::of(v as f64));
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], data)
}

/// `[CLS; patches · W + b] + pos`, shape `[N + 1, D]`.
pub fn embed_tokens<T: Scalar>(
    tape: &mut Tape<'_, T>,
    enc: &BoundEncoder,
    patches: Var,
) -> Result<Var> {
    let proj = tape.matmul(patches, enc.patch_weight)?;
    let proj = tape.add_row(proj, enc.patch_bias)?;
    let tokens = tape.concat_rows(&[enc.cls_token, proj])?;
    if tape.shape(tokens) != tape.shape(enc.pos_embed) {
        return Err(Error::dim(
            "embed_tokens",
            format!(
                "tokens {:?} vs positions {:?}",
                tape.shape(tokens),
                tape.shape(enc.pos_embed)
            ),
        ));
    }
    tape.add(tokens, enc.pos_embed)
}

fn check_adapters<T: Scalar>(
    tape: &Tape<'_, T>,
    dim: usize,
    layer: usize,
    adapters: Option<&BoundAdapters>,
) -> Result<()> {
    let Some(ad) = adapters else { return Ok(()) };
    for p in Projector::ALL {
        if let Some(a) = ad.get(layer, p) {
            let (ds, us) = (tape.shape(a.down), tape.shape(a.up));
            if ds.len() != 2 || ds[0] != dim || us.len() != 2 || us[1] != dim || ds[1] != us[0] {
                return Err(Error::dim(
                    "attention_block",
                    format!(
                        "adapter layer{layer}.{p} shapes {ds:?}/{us:?} incompatible with D = {dim}"
                    ),
                ));
            }
        }
    }
    Ok(())
}

/// One pre-LN transformer block. For each projector with an adapter the
/// projection becomes `W_p LN1(x) + b_p + LN1(x) W_down W_up`.
pub fn attention_block_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &EncoderConfig,
    block: &BoundBlock,
    layer: usize,
    adapters: Option<&BoundAdapters>,
    x: Var,
) -> Result<Var> {
    check_adapters(tape, cfg.dim, layer, adapters)?;
    let eps = T::of(cfg.ln_eps);
    let h = tape.layer_norm(x, block.ln1_gain, block.ln1_bias, eps)?;

    let mut qkv = [h; 3];
    for (i, p) in Projector::ALL.into_iter().enumerate() {
        let (w, b) = block.proj[i];
        let y = tape.matmul(h, w)?;
        let mut y = tape.add_row(y, b)?;
        if let Some(a) = adapters.and_then(|ad| ad.get(layer, p)) {
            let ic = ica::apply(tape, h, a)?;
            y = tape.add(y, ic)?;
        }
        qkv[i] = y;
    }
    let [q, k, v] = qkv;

    let dh = cfg.head_dim();
    let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, hd * dh, dh)?,
                tape.slice_cols(k, hd * dh, dh)?,
                tape.slice_cols(v, hd * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, inv_sqrt);
        let attn = tape.softmax(scores);
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let o = tape.matmul(merged, block.out_weight)?;
    let o = tape.add_row(o, block.out_bias)?;
    let x = tape.add(x, o)?;

    let h2 = tape.layer_norm(x, block.ln2_gain, block.ln2_bias, eps)?;
    let m = tape.matmul(h2, block.fc1_weight)?;
    let m = tape.add_row(m, block.fc1_bias)?;
    let m = tape.gelu(m);
    let m = tape.matmul(m, block.fc2_weight)?;
    let m = tape.add_row(m, block.fc2_bias)?;
    tape.add(x, m)
}

/// Runs every block on a token sequence and returns the final-LN CLS row `[1, D]`.
pub fn encode_tokens_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &EncoderConfig,
    enc: &BoundEncoder,
    adapters: Option<&BoundAdapters>,
    tokens: Var,
) -> Result<Var> {
    let mut x = tokens;
    for (l, block) in enc.blocks.iter().enumerate() {
        x = attention_block_on_tape(tape, cfg, block, l, adapters, x)?;
    }
    let cls = tape.gather_rows(x, &[0])?;
    tape.layer_norm(cls, enc.final_gain, enc.final_bias, T::of(cfg.ln_eps))
}

/// Retrieval embedding `[1, D]` of an image: CLS after the final LayerNorm,
/// not normalized.
pub fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &EncoderConfig,
    enc: &BoundEncoder,
    adapters: Option<&BoundAdapters>,
    image: &Image,
) -> Result<Var> {
    let patches = tape.constant(patch_matrix(image, cfg)?);
    let tokens = embed_tokens(tape, enc, patches)?;
    encode_tokens_on_tape(tape, cfg, enc, adapters, tokens)
}

/// Token sequence `[N + 1, D]` with CLS at row 0 and positions added.
pub fn patchify(image: &Image, cfg: &EncoderConfig, weights: &EncoderWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let enc = weights.bind(&mut tape);
    let patches = tape.constant(patch_matrix(image, cfg)?);
    let tokens = embed_tokens(&mut tape, &enc, patches)?;
    Ok(tape.value(tokens).clone())
}

/// Value-level single block, for inspection and tests.
pub fn attention_block(
    tokens: &Tensor,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    layer: usize,
    adapters: Option<&AdapterSet>,
) -> Result<Tensor> {
    let block = weights
        .blocks
        .get(layer)
        .ok_or_else(|| Error::Contract(format!("layer {layer} out of range")))?;
    let mut tape = Tape::new();
    let x = tape.constant_ref(tokens);
    let bound = bind_block(&mut tape, block);
    let ad = adapters.map(|a| a.bind_frozen(&mut tape));
    let y = attention_block_on_tape(&mut tape, cfg, &bound, layer, ad.as_ref(), x)?;
    Ok(tape.value(y).clone())
}

fn bind_block<'a, T: Scalar>(tape: &mut Tape<'a, T>, b: &'a BlockWeights<T>) -> BoundBlock {
    let f = b.fields().map(|t| tape.constant_ref(t));
    BoundBlock {
        ln1_gain: f[0],
        ln1_bias: f[1],
        proj: [(f[2], f[3]), (f[4], f[5]), (f[6], f[7])],
        out_weight: f[8],
        out_bias: f[9],
        ln2_gain: f[10],
        ln2_bias: f[11],
        fc1_weight: f[12],
        fc1_bias: f[13],
        fc2_weight: f[14],
        fc2_bias: f[15],
    }
}

/// Retrieval embedding `[D]` of one image.
pub fn encode(
    image: &Image,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    adapters: Option<&AdapterSet>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let enc = weights.bind(&mut tape);
    let ad = adapters.map(|a| a.bind_frozen(&mut tape));
    let e = encode_on_tape(&mut tape, cfg, &enc, ad.as_ref(), image)?;
    tape.value(e).clone().reshaped(vec![cfg.dim])
}
