//! Gallery embedding, Recall@K and class splits.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, Sample};
use crate::error::{Error, Result};
use crate::ica::AdapterSet;
use crate::manifest::{Manifest, Role, Split};
use crate::tensor::{Tape, Tensor};
use crate::vit::{self, EncoderConfig, EncoderWeights};

/// L2-normalized embeddings with parallel labels and ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    matrix: Tensor,
    labels: Vec<usize>,
    ids: Vec<String>,
}

impl EmbeddingSet {
    /// Normalizes every row of `matrix` `[N, D]`.
    pub fn new(matrix: Tensor, labels: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::dim(
                "embedding_set",
                format!(
                    "matrix {:?}, {} labels, {} ids",
                    matrix.shape(),
                    labels.len(),
                    ids.len()
                ),
            ));
        }
        let d = matrix.cols();
        let mut data = matrix.into_data();
        for (i, row) in data.chunks_exact_mut(d).enumerate() {
            let n = row
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if !n.is_finite() {
                return Err(Error::NonFinite(format!(
                    "embedding {} has norm {n}",
                    ids[i]
                )));
            }
            if n == 0.0 {
                return Err(Error::Degenerate(format!(
                    "embedding {} is all zeros",
                    ids[i]
                )));
            }
            for v in row {
                *v = (*v as f64 / n) as f32;
            }
        }
        Ok(EmbeddingSet {
            matrix: Tensor::new(vec![labels.len(), d], data)?,
            labels,
            ids,
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    /// Cosine similarity of rows `i` and `j`, accumulated in f64.
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        self.matrix
            .row(i)
            .iter()
            .zip(self.matrix.row(j))
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    /// CSV with header `id,label,e0,...`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.dim()).map(|j| format!("e{j}")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].clone(), self.labels[i].to_string()];
            // shortest round-trip formatting keeps the file bit-exact
            rec.extend(self.matrix.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`EmbeddingSet::write_csv`]. Rows are used
    /// as stored.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let (mut labels, mut ids, mut data) = (Vec::new(), Vec::new(), Vec::new());
        let mut dim = None;
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let perr = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            };
            let rec = rec.map_err(|e| perr(e.to_string()))?;
            if rec.len() < 3 {
                return Err(perr("expected id, label and at least one value".into()));
            }
            if *dim.get_or_insert(rec.len() - 2) != rec.len() - 2 {
                return Err(perr("ragged embedding row".into()));
            }
            ids.push(rec[0].to_string());
            labels.push(rec[1].parse().map_err(|e| perr(format!("label: {e}")))?);
            for v in rec.iter().skip(2) {
                data.push(
                    v.parse::<f32>()
                        .map_err(|e| perr(format!("value {v:?}: {e}")))?,
                );
            }
        }
        let d = dim.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "no embeddings".into(),
        })?;
        Ok(EmbeddingSet {
            matrix: Tensor::new(vec![labels.len(), d], data)?,
            labels,
            ids,
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Embeds the `orig` rows of `manifest` with the eval pipeline
/// (resize, center crop).
pub fn embed_gallery(
    manifest: &Manifest,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    adapters: Option<&AdapterSet>,
    resize: usize,
) -> Result<EmbeddingSet> {
    let rows = manifest.filter(|r| r.role == Role::Orig);
    if rows.is_empty() {
        return Err(Error::Contract(
            "gallery manifest has no original images".into(),
        ));
    }
    let samples = data::load_samples(&rows, resize)?;
    embed_samples(&samples, cfg, weights, adapters)
}

/// Embeds already-resized samples with center crops.
pub fn embed_samples(
    samples: &[Sample],
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    adapters: Option<&AdapterSet>,
) -> Result<EmbeddingSet> {
    let mut data = Vec::with_capacity(samples.len() * cfg.dim);
    for s in samples {
        let view = data::center_crop(&s.image, cfg.image_size)?;
        data.extend_from_slice(vit::encode(&view, cfg, weights, adapters)?.data());
    }
    EmbeddingSet::new(
        Tensor::new(vec![samples.len(), cfg.dim], data)?,
        samples.iter().map(|s| s.label).collect(),
        samples.iter().map(|s| s.id.clone()).collect(),
    )
}

/// Number of tape nodes used to embed one image; equal for any two models
/// sharing encoder and adapter configs.
pub fn eval_node_count(
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    adapters: Option<&AdapterSet>,
    image: &crate::image::Image,
) -> Result<usize> {
    let mut tape = Tape::new();
    let enc = weights.bind(&mut tape);
    let ad = adapters.map(|a| a.bind_frozen(&mut tape));
    vit::encode_on_tape(&mut tape, cfg, &enc, ad.as_ref(), image)?;
    Ok(tape.len())
}

/// Ranking order: higher similarity first, then ascending id.
fn rank_cmp(set: &EmbeddingSet, sims: &[f64], a: usize, b: usize) -> Ordering {
    sims[b]
        .total_cmp(&sims[a])
        .then_with(|| set.ids[a].cmp(&set.ids[b]))
}

/// Recall@K with every item as a query against all other items.
pub fn recall_at_k(set: &EmbeddingSet, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = set.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "recall needs at least 2 items, got {n}"
        )));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::Contract(format!(
            "K = {k} must satisfy 1 <= K < N = {n}"
        )));
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut sims = vec![0.0; n];
    for q in 0..n {
        for (j, s) in sims.iter_mut().enumerate() {
            *s = if j == q {
                f64::NEG_INFINITY
            } else {
                set.similarity(q, j)
            };
        }
        // the best-ranked positive decides every K at once
        let best = (0..n)
            .filter(|&j| j != q && set.labels[j] == set.labels[q])
            .min_by(|&a, &b| rank_cmp(set, &sims, a, b));
        let Some(best) = best else { continue };
        let rank = (0..n)
            .filter(|&j| j != q && rank_cmp(set, &sims, j, best) == Ordering::Less)
            .count();
        for (&k, h) in hits.iter_mut() {
            if rank < k {
                *h += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|(k, h)| (k, h as f64 / n as f64))
        .collect())
}

pub fn write_recall_csv(path: &Path, recall: &BTreeMap<usize, f64>) -> Result<()> {
    let mut text = String::from("K,recall\n");
    for (k, r) in recall {
        text.push_str(&format!("{k},{r}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn format_recall_table(recall: &BTreeMap<usize, f64>) -> String {
    let mut s = String::from("  K  Recall@K\n");
    for (k, r) in recall {
        s.push_str(&format!("{k:>3}  {:>7.2}%\n", r * 100.0));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Disjoint classes: the first half trains, the second half is tested.
    Open,
    /// All classes; samples follow the manifest's split column.
    Closed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: SplitMode,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: SplitMode::Open,
            ks: vec![1, 2, 4, 8],
        }
    }
}

/// Number of training classes under `mode`: `floor(n / 2)` for open splits.
pub fn train_class_count(mode: SplitMode, class_count: usize) -> usize {
    match mode {
        SplitMode::Open => class_count / 2,
        SplitMode::Closed => class_count,
    }
}

/// Splits the `orig` rows of a manifest into train and test.
pub fn build_split(
    manifest: &Manifest,
    mode: SplitMode,
    class_count: usize,
) -> Result<(Manifest, Manifest)> {
    let orig = manifest.filter(|r| r.role == Role::Orig);
    if let Some(r) = orig.rows.iter().find(|r| r.label_id >= class_count) {
        return Err(Error::Contract(format!(
            "label {} of {} outside {class_count} classes",
            r.label_id, r.image_path
        )));
    }
    Ok(match mode {
        SplitMode::Open => {
            let cut = train_class_count(mode, class_count);
            (
                orig.filter(|r| r.label_id < cut),
                orig.filter(|r| r.label_id >= cut),
            )
        }
        SplitMode::Closed => (
            orig.filter(|r| r.split == Split::Train),
            orig.filter(|r| r.split == Split::Test),
        ),
    })
}
