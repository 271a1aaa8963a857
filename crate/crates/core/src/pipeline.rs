//! The staged pipeline behind the command-line tool.
//!
//! Every stage reads the previous stage's artifacts from the output tree
//! and writes its own:
//!
//! ```text
//! out/
//!   config.effective.json
//!   data/   images/  manifest.csv  detections.jsonl
//!   opa/    images/  manifest.csv  fallbacks.txt
//!   model/  backbone.ntw  adapters.ntw  proxies.ntw  report.csv
//!   eval/   embeddings.csv  recall.csv
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ica::{adapter_param_count, AdapterConfig, AdapterSet, Projector};
use crate::losses::ProxyBank;
use crate::manifest::Manifest;
use crate::ntw;
use crate::opa::{self, OpaDataset};
use crate::retrieval::{self, EmbeddingSet};
use crate::synth::{self, GenOutput};
use crate::train::{self, TrainData, TrainReport};
use crate::vit::{backbone_param_count, EncoderConfig, EncoderWeights, ParamGroup};

/// Resolved stage directories.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
    pub data: PathBuf,
    pub opa: PathBuf,
    pub model: PathBuf,
    pub eval: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig, out: &Path) -> Self {
        let pick = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| out.join(name));
        Layout {
            root: out.to_path_buf(),
            data: pick(&cfg.paths.data, "data"),
            opa: pick(&cfg.paths.opa, "opa"),
            model: pick(&cfg.paths.model, "model"),
            eval: pick(&cfg.paths.eval, "eval"),
        }
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.data.join("manifest.csv")
    }

    pub fn detections(&self) -> PathBuf {
        self.data.join("detections.jsonl")
    }

    pub fn opa_manifest(&self) -> PathBuf {
        self.opa.join("manifest.csv")
    }

    pub fn backbone(&self) -> PathBuf {
        self.model.join("backbone.ntw")
    }

    pub fn adapters(&self) -> PathBuf {
        self.model.join("adapters.ntw")
    }

    pub fn proxies(&self) -> PathBuf {
        self.model.join("proxies.ntw")
    }

    pub fn report(&self) -> PathBuf {
        self.model.join("report.csv")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.eval.join("embeddings.csv")
    }

    pub fn recall(&self) -> PathBuf {
        self.eval.join("recall.csv")
    }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "missing prerequisite {} (run `{stage}` first)",
            path.display()
        )))
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Validates the config and echoes it into the output root.
pub fn prepare(cfg: &RunConfig, out: &Path) -> Result<Layout> {
    cfg.validate()?;
    mkdir(out)?;
    let p = out.join("config.effective.json");
    std::fs::write(&p, cfg.to_json() + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(Layout::new(cfg, out))
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<GenOutput> {
    let l = prepare(cfg, out)?;
    synth::gen_dataset(&cfg.data, &l.data)
}

/// The data manifest, the number of classes in it and the training split.
fn training_split(cfg: &RunConfig, l: &Layout) -> Result<(Manifest, Manifest, usize)> {
    require(&l.data_manifest(), "gen-data")?;
    let m = Manifest::read(&l.data_manifest())?;
    let n = m.num_classes();
    let (tr, te) = retrieval::build_split(&m, cfg.eval.mode, n)?;
    let n_train = retrieval::train_class_count(cfg.eval.mode, n);
    Ok((tr, te, n_train))
}

pub fn cmd_prep_opa(cfg: &RunConfig, out: &Path) -> Result<OpaDataset> {
    let l = prepare(cfg, out)?;
    let (train, _, n_train) = training_split(cfg, &l)?;
    require(&l.detections(), "gen-data")?;
    let dets = opa::load_detections(&l.detections(), &cfg.opa)?;
    opa::build_opa_dataset(&train, &dets, n_train, &cfg.opa, &l.opa)
}

pub fn cmd_init_weights(cfg: &RunConfig, out: &Path) -> Result<EncoderWeights> {
    let l = prepare(cfg, out)?;
    mkdir(&l.model)?;
    let w = EncoderWeights::init(&cfg.encoder, cfg.seed)?;
    ntw::write(&l.backbone(), &w.to_named())?;
    Ok(w)
}

pub fn load_backbone(cfg: &RunConfig, l: &Layout) -> Result<EncoderWeights> {
    require(&l.backbone(), "init-weights")?;
    EncoderWeights::from_named(&cfg.encoder, &ntw::read(&l.backbone())?)
}

/// Trained adapters if present, otherwise fresh ones (an identity
/// perturbation of the backbone).
pub fn load_adapters(cfg: &RunConfig, l: &Layout) -> Result<(AdapterSet, bool)> {
    if l.adapters().is_file() {
        let named = ntw::read(&l.adapters())?;
        Ok((
            AdapterSet::from_named(&cfg.adapter, &cfg.encoder, &named)?,
            true,
        ))
    } else {
        Ok((
            AdapterSet::attach(&cfg.adapter, &cfg.encoder, cfg.seed)?,
            false,
        ))
    }
}

pub struct TrainOutput {
    pub report: TrainReport,
    pub adapters: AdapterSet,
    pub bank: ProxyBank,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutput> {
    let l = prepare(cfg, out)?;
    let weights = load_backbone(cfg, &l)?;
    let (train_m, _, n_train) = training_split(cfg, &l)?;
    let opa_m = match cfg.train.objective {
        train::Objective::Dva => {
            require(&l.opa_manifest(), "prep-opa")?;
            Some(Manifest::read(&l.opa_manifest())?)
        }
        train::Objective::Ica => None,
    };
    let data = TrainData::load(&train_m, opa_m.as_ref(), n_train, cfg.train.resize)?;
    let mut adapters = AdapterSet::attach(&cfg.adapter, &cfg.encoder, cfg.seed)?;
    let mut bank = ProxyBank::init(n_train, cfg.encoder.dim, cfg.seed)?;
    let report = train::train(
        &cfg.train,
        &cfg.loss,
        &cfg.encoder,
        &weights,
        &mut adapters,
        &mut bank,
        &data,
        cfg.seed,
    )?;
    mkdir(&l.model)?;
    ntw::write(&l.adapters(), &adapters.to_named())?;
    ntw::write(&l.proxies(), &bank.to_named())?;
    report.write_csv(&l.report())?;
    Ok(TrainOutput {
        report,
        adapters,
        bank,
    })
}

pub fn cmd_embed(cfg: &RunConfig, out: &Path) -> Result<EmbeddingSet> {
    let l = prepare(cfg, out)?;
    let weights = load_backbone(cfg, &l)?;
    let (adapters, _) = load_adapters(cfg, &l)?;
    let (_, test, _) = training_split(cfg, &l)?;
    let set = retrieval::embed_gallery(
        &test,
        &cfg.encoder,
        &weights,
        Some(&adapters),
        cfg.train.resize,
    )?;
    mkdir(&l.eval)?;
    set.write_csv(&l.embeddings())?;
    Ok(set)
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<BTreeMap<usize, f64>> {
    let l = prepare(cfg, out)?;
    require(&l.embeddings(), "embed")?;
    let set = EmbeddingSet::read_csv(&l.embeddings())?;
    let recall = retrieval::recall_at_k(&set, &cfg.eval.ks)?;
    retrieval::write_recall_csv(&l.recall(), &recall)?;
    Ok(recall)
}

/// One seed of the frozen / proxy-only / full-objective comparison.
pub struct AblationRun {
    pub frozen: BTreeMap<usize, f64>,
    pub ica: BTreeMap<usize, f64>,
    pub dva: BTreeMap<usize, f64>,
    pub ica_model: TrainOutput,
    pub dva_model: TrainOutput,
}

/// Runs every stage for the three variants under `root/{frozen,ica,dva}`,
/// sharing `root/data` and `root/opa`. The dataset is generated only if
/// `root/data/manifest.csv` is absent.
///
/// `frozen` evaluates the backbone with fresh adapters, `ica` trains on
/// originals with the proxy loss, `dva` trains with object views and the
/// transfer term. All three use the same seeded backbone.
pub fn run_ablation(base: &RunConfig, root: &Path) -> Result<AblationRun> {
    let mut base = base.clone();
    base.paths.data = Some(root.join("data"));
    base.paths.opa = Some(root.join("opa"));
    let variant = |name: &str| {
        let mut c = base.clone();
        c.paths.model = Some(root.join(name).join("model"));
        c.paths.eval = Some(root.join(name).join("eval"));
        c
    };
    if !root.join("data").join("manifest.csv").is_file() {
        cmd_gen_data(&base, root)?;
    }
    cmd_prep_opa(&base, root)?;

    let evaluate = |cfg: &RunConfig| -> Result<BTreeMap<usize, f64>> {
        cmd_embed(cfg, root)?;
        cmd_eval(cfg, root)
    };
    let frozen_cfg = variant("frozen");
    cmd_init_weights(&frozen_cfg, root)?;
    let frozen = evaluate(&frozen_cfg)?;

    let mut ica_cfg = variant("ica");
    ica_cfg.train.objective = train::Objective::Ica;
    cmd_init_weights(&ica_cfg, root)?;
    let ica_model = cmd_train(&ica_cfg, root)?;
    let ica = evaluate(&ica_cfg)?;

    let mut dva_cfg = variant("dva");
    dva_cfg.train.objective = train::Objective::Dva;
    cmd_init_weights(&dva_cfg, root)?;
    let dva_model = cmd_train(&dva_cfg, root)?;
    let dva = evaluate(&dva_cfg)?;

    Ok(AblationRun {
        frozen,
        ica,
        dva,
        ica_model,
        dva_model,
    })
}

/// Parameter accounting for one encoder and adapter config.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub attention_projector: usize,
    pub output_projector: usize,
    pub mlp: usize,
    pub backbone_total: usize,
    pub adapters: usize,
    /// Adapter count for each projector subset `{q}`, `{q,k}`, `{q,k,v}`.
    pub adapter_subsets: Vec<(String, usize)>,
}

impl ParamReport {
    pub fn ratio_pct(&self) -> f64 {
        100.0 * self.adapters as f64 / self.backbone_total as f64
    }
}

pub fn param_report(enc: &EncoderConfig, ad: &AdapterConfig) -> ParamReport {
    let subsets = [
        vec![Projector::Q],
        vec![Projector::Q, Projector::K],
        vec![Projector::Q, Projector::K, Projector::V],
    ];
    ParamReport {
        attention_projector: backbone_param_count(enc, ParamGroup::AttentionProjector),
        output_projector: backbone_param_count(enc, ParamGroup::OutputProjector),
        mlp: backbone_param_count(enc, ParamGroup::Mlp),
        backbone_total: backbone_param_count(enc, ParamGroup::All),
        adapters: adapter_param_count(ad, enc),
        adapter_subsets: subsets
            .iter()
            .map(|s| {
                let name = s.iter().map(|p| p.name()).collect::<Vec<_>>().join(",");
                (
                    format!("{{{name}}}"),
                    adapter_param_count(&ad.clone().with_projectors(s), enc),
                )
            })
            .collect(),
    }
}

pub fn cmd_params(cfg: &RunConfig) -> Result<ParamReport> {
    cfg.encoder.validate()?;
    cfg.adapter.validate(&cfg.encoder)?;
    Ok(param_report(&cfg.encoder, &cfg.adapter))
}

/// `1234567` → `1,234,567`.
pub fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = |n: usize| n as f64 / 1e6;
        writeln!(f, "backbone parameter groups")?;
        for (name, n) in [
            ("attention_projector", self.attention_projector),
            ("output_projector", self.output_projector),
            ("mlp", self.mlp),
            ("all", self.backbone_total),
        ] {
            writeln!(f, "  {name:<20} {:>14}  ({:.2} M)", group_digits(n), m(n))?;
        }
        writeln!(f, "adapter parameters by projector set")?;
        for (name, n) in &self.adapter_subsets {
            writeln!(f, "  {name:<20} {:>14}  ({:.3} M)", group_digits(*n), m(*n))?;
        }
        writeln!(
            f,
            "configured adapters      {:>14}",
            group_digits(self.adapters)
        )?;
        write!(f, "adapter / backbone       {:>13.2}%", self.ratio_pct())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits() {
        assert_eq!(group_digits(589_824), "589,824");
        assert_eq!(group_digits(85_798_656), "85,798,656");
        assert_eq!(group_digits(12), "12");
    }

    #[test]
    fn vit_b_report() {
        let r = param_report(&EncoderConfig::vit_b16(), &AdapterConfig::default());
        assert_eq!(r.adapters, 589_824);
        assert_eq!(r.adapter_subsets[2].1, 884_736);
        assert!((r.ratio_pct() - 0.69).abs() < 0.005);
        assert!(r.to_string().contains("0.69%"));
    }

    #[test]
    fn missing_stage_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_embed(&RunConfig::desk(), dir.path()).err().unwrap();
        assert!(err.to_string().contains("backbone.ntw"), "{err}");
    }
}
