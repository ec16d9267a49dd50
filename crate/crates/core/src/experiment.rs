//! End-to-end runs on a synthetic domain pair: data splits, the component
//! variants of the ablation grid, and target-domain evaluation.

use std::collections::BTreeSet;

use crate::backbone::{Backbone, BackboneConfig};
use crate::datagen::{generate_domain_pair, patch_labels_from_boxes, DomainSpec, LabeledScene, NUM_CLASSES};
use crate::detect::{detect_images, encode_images, train_head, train_head_from, DetectionHead, HeadConfig, HeadMetricsRow, HeadTrainConfig};
use crate::error::{Error, Result};
use crate::evalkit::{corrupt, few_shot_subset, map_suite, Corruption, CorruptionSpec, MapSuite, MAX_SEVERITY};
use crate::image::Raster;
use crate::numcore::Tensor;
use crate::pretrain::{pretrain_loop, LossWeights, PretrainConfig, PretrainState};
use crate::rng::{indexed_seed, sub_seed};
use crate::spem::{cluster_purity, fit_pca, harvest_patch_embeddings, kmeans, SpemConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub image_size: usize,
    pub shift_knob: f64,
    /// Unlabeled images per domain for pretraining.
    pub unlabeled: usize,
    pub source_labeled: usize,
    pub target_test: usize,
    /// Labeled target scenes few-shot subsets are drawn from.
    pub target_pool: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            shift_knob: 0.7,
            unlabeled: 64,
            source_labeled: 1000,
            target_test: 100,
            target_pool: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub source_unlabeled: Vec<LabeledScene>,
    pub target_unlabeled: Vec<LabeledScene>,
    pub source_labeled: Vec<LabeledScene>,
    pub target_test: Vec<LabeledScene>,
    pub target_pool: Vec<LabeledScene>,
}

impl DataConfig {
    pub fn source_count(&self) -> usize {
        self.unlabeled + self.source_labeled
    }

    pub fn target_count(&self) -> usize {
        self.unlabeled + self.target_test + self.target_pool
    }
}

/// Generates the domain pair sized for `cfg`, both domains equally long.
pub fn generate_pair(cfg: &DataConfig, seed: u64) -> Result<(Vec<LabeledScene>, Vec<LabeledScene>)> {
    let n = cfg.source_count().max(cfg.target_count());
    generate_domain_pair(&DomainSpec::source(cfg.image_size), cfg.shift_knob, n, sub_seed(seed, "data"))
}

/// Disjoint splits carved from one generated pair.
pub fn make_splits(cfg: &DataConfig, seed: u64) -> Result<Splits> {
    let (src, tgt) = generate_pair(cfg, seed)?;
    splits_from(src, tgt, cfg)
}

/// Splits in a fixed order: unlabeled first, then labeled source; unlabeled,
/// test and few-shot pool on the target side.
pub fn splits_from(mut src: Vec<LabeledScene>, mut tgt: Vec<LabeledScene>, cfg: &DataConfig) -> Result<Splits> {
    let (n_src, n_tgt) = (cfg.source_count(), cfg.target_count());
    if src.len() < n_src || tgt.len() < n_tgt {
        return Err(Error::InsufficientData(format!(
            "splits need {n_src} source and {n_tgt} target scenes, found {} and {}",
            src.len(),
            tgt.len()
        )));
    }
    src.truncate(n_src);
    tgt.truncate(n_tgt);
    let source_labeled = src.split_off(cfg.unlabeled);
    let mut rest = tgt.split_off(cfg.unlabeled);
    let target_pool = rest.split_off(cfg.target_test);
    Ok(Splits {
        source_unlabeled: src,
        target_unlabeled: tgt,
        source_labeled,
        target_test: rest,
        target_pool,
    })
}

pub fn images(scenes: &[LabeledScene]) -> Vec<&Raster> {
    scenes.iter().map(|s| &s.image).collect()
}

/// Rows of the component ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SourceOnly,
    SslOnly,
    SslSpem,
    SslDapa,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::SourceOnly, Variant::SslOnly, Variant::SslSpem, Variant::SslDapa, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::SslOnly => "ssl",
            Variant::SslSpem => "ssl+spem",
            Variant::SslDapa => "ssl+dapa",
            Variant::Full => "full",
        }
    }

    /// `(use_spem, use_dapa)`, `None` when nothing is pretrained.
    pub fn components(self) -> Option<(bool, bool)> {
        match self {
            Variant::SourceOnly => None,
            Variant::SslOnly => Some((false, false)),
            Variant::SslSpem => Some((true, false)),
            Variant::SslDapa => Some((false, true)),
            Variant::Full => Some((true, true)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub head: HeadTrainConfig,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            head: HeadTrainConfig::desk(),
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

impl ExperimentConfig {
    /// Same settings with every stage seeded from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = sub_seed(seed, "pretrain");
        c.head.seed = sub_seed(seed, "head");
        c
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig::for_backbone(&self.backbone, NUM_CLASSES)
    }
}

/// Pretrained prompts (if any) plus a trained head.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub pretrain: Option<PretrainState>,
    pub head: DetectionHead,
    pub head_metrics: Vec<HeadMetricsRow>,
}

impl TrainedModel {
    pub fn prompts(&self) -> Option<&Tensor> {
        self.pretrain.as_ref().map(|p| p.prompts())
    }
}

pub fn backbone_for(cfg: &ExperimentConfig, seed: u64) -> Result<Backbone> {
    Backbone::new(cfg.backbone.clone(), sub_seed(seed, "backbone"))
}

pub fn pretrain_variant(backbone: &Backbone, splits: &Splits, cfg: &ExperimentConfig, variant: Variant) -> Result<Option<PretrainState>> {
    let Some((use_spem, use_dapa)) = variant.components() else {
        return Ok(None);
    };
    let pc = PretrainConfig {
        use_spem,
        use_dapa,
        ..cfg.pretrain.clone()
    };
    let st = pretrain_loop(
        backbone,
        &images(&splits.source_unlabeled),
        &images(&splits.target_unlabeled),
        &pc,
        None,
        None,
        &mut |_| Ok(()),
    )?;
    Ok(Some(st))
}

pub fn fit_head(backbone: &Backbone, prompts: Option<&Tensor>, scenes: &[LabeledScene], cfg: &ExperimentConfig) -> Result<(DetectionHead, Vec<HeadMetricsRow>)> {
    let feats = encode_images(backbone, prompts, &images(scenes))?;
    train_head(cfg.head_config(), &feats, scenes, &cfg.head)
}

pub fn evaluate(backbone: &Backbone, prompts: Option<&Tensor>, head: &DetectionHead, scenes: &[LabeledScene], cfg: &ExperimentConfig) -> Result<MapSuite> {
    let preds = detect_images(backbone, prompts, head, &images(scenes), cfg.score_threshold, cfg.nms_iou)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
    map_suite(&preds, &gts, head.cfg.num_classes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub variant: Variant,
    pub seed: u64,
    pub target: MapSuite,
    pub model: TrainedModel,
}

/// Pretrain (per variant), train the head on labeled source scenes and
/// evaluate on the target test split.
pub fn run_variant(backbone: &Backbone, splits: &Splits, cfg: &ExperimentConfig, variant: Variant, seed: u64) -> Result<VariantResult> {
    let pretrain = pretrain_variant(backbone, splits, cfg, variant)?;
    let prompts = pretrain.as_ref().map(|p| p.prompts());
    let (head, head_metrics) = fit_head(backbone, prompts, &splits.source_labeled, cfg)?;
    let target = evaluate(backbone, prompts, &head, &splits.target_test, cfg)?;
    Ok(VariantResult {
        variant,
        seed,
        target,
        model: TrainedModel {
            pretrain,
            head,
            head_metrics,
        },
    })
}

/// Labeled target scenes used at `fraction`; none at fraction 0.
pub fn few_shot_scenes(splits: &Splits, fraction: f64, seed: u64) -> Result<Vec<LabeledScene>> {
    if fraction == 0.0 {
        return Ok(Vec::new());
    }
    few_shot_subset(&splits.target_pool, fraction, seed)
}

/// Fine-tunes a source head on source scenes plus a labeled target subset;
/// fraction 0 returns the head unchanged with no new metrics.
pub fn few_shot_head(
    backbone: &Backbone,
    model: &TrainedModel,
    splits: &Splits,
    fraction: f64,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(DetectionHead, Vec<HeadMetricsRow>)> {
    if fraction == 0.0 {
        return Ok((model.head.clone(), Vec::new()));
    }
    let subset = few_shot_scenes(splits, fraction, seed)?;
    let mut scenes = splits.source_labeled.clone();
    scenes.extend(subset);
    let feats = encode_images(backbone, model.prompts(), &images(&scenes))?;
    let hc = HeadTrainConfig {
        seed: indexed_seed(cfg.head.seed, "few_shot", (fraction * 1e6) as u64),
        ..cfg.head.clone()
    };
    train_head_from(model.head.clone(), &feats, &scenes, &hc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionRow {
    pub category: Corruption,
    pub severity: u32,
    pub map50: f64,
    pub drop: f64,
}

pub const CORRUPTION_HEADER: &str = "category,severity,map50,drop";

/// mAP@50 on the corrupted test split for every category and severity.
pub fn corruption_grid(backbone: &Backbone, model: &TrainedModel, scenes: &[LabeledScene], cfg: &ExperimentConfig, seed: u64) -> Result<Vec<CorruptionRow>> {
    let clean = evaluate(backbone, model.prompts(), &model.head, scenes, cfg)?.map50;
    let mut rows = Vec::new();
    for category in Corruption::ALL {
        for severity in 0..=MAX_SEVERITY {
            let spec = CorruptionSpec { category, severity };
            let corrupted = scenes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut c = s.clone();
                    c.image = corrupt(&s.image, spec, indexed_seed(seed, category.name(), i as u64))?;
                    Ok(c)
                })
                .collect::<Result<Vec<_>>>()?;
            let map50 = if severity == 0 {
                clean
            } else {
                evaluate(backbone, model.prompts(), &model.head, &corrupted, cfg)?.map50
            };
            rows.push(CorruptionRow {
                category,
                severity,
                map50,
                drop: clean - map50,
            });
        }
    }
    Ok(rows)
}

pub fn corruption_csv(rows: &[CorruptionRow]) -> String {
    let mut s = format!("{CORRUPTION_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.category.name(), r.severity, r.map50, r.drop));
    }
    s
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::InsufficientData("no values to aggregate".into()));
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    Ok((m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()))
}

/// k-means over target patch embeddings together with per-cluster defect
/// purity.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    pub inertia: f64,
    pub restarts: Vec<f64>,
    /// `(size, defect fraction)` per cluster.
    pub purity: Vec<(usize, f64)>,
}

impl ClusterReport {
    pub fn best_purity(&self) -> f64 {
        self.purity.iter().filter(|p| p.0 > 0).map(|p| p.1).fold(0.0, f64::max)
    }

    pub fn purity_csv(&self) -> String {
        let mut s = String::from("cluster,size,defect_purity\n");
        for (i, (n, p)) in self.purity.iter().enumerate() {
            s.push_str(&format!("{i},{n},{p}\n"));
        }
        s
    }
}

/// Clusters the patch embeddings of `scenes` as prompt discovery does and
/// scores each cluster against `labels` (one flag per patch, scene-major).
pub fn cluster_study(backbone: &Backbone, scenes: &[LabeledScene], labels: &[bool], cfg: &SpemConfig, seed: u64) -> Result<ClusterReport> {
    cfg.validate()?;
    let x = harvest_patch_embeddings(backbone, &images(scenes))?;
    let z = fit_pca(&x, cfg.reduced_dim)?.transform(&x)?;
    let km = kmeans(&z, cfg.num_prompts, sub_seed(seed, "kmeans"), cfg.n_init, cfg.max_iter)?;
    Ok(ClusterReport {
        inertia: km.inertia,
        restarts: km.run_inertias.clone(),
        purity: cluster_purity(&km.assignments, labels, cfg.num_prompts)?,
    })
}

/// Patch labels for stored scenes, where only boxes are known.
pub fn box_patch_labels(scenes: &[LabeledScene], patch: usize, min_fraction: f64) -> Vec<bool> {
    scenes.iter().flat_map(|s| patch_labels_from_boxes(s, patch, min_fraction)).collect()
}

/// One configuration of an ablation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub sweep: &'static str,
    pub label: String,
    pub num_prompts: usize,
    pub injection_layers: BTreeSet<usize>,
    pub weights: LossWeights,
}

pub const ABLATION_K: [usize; 4] = [1, 5, 10, 15];
pub const ABLATION_LAMBDAS: [(f64, f64); 5] = [(0.1, 0.5), (1.0, 0.5), (2.0, 0.5), (1.0, 0.1), (1.0, 1.0)];
pub const ABLATION_HEADER: &str = "sweep,label,k,layers,lambda1,lambda2,seed,status,map50,map5095";

fn layer_list(l: &BTreeSet<usize>) -> String {
    l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// The K, injection-depth and loss-weight sweeps around `base`.
pub fn ablation_cells(base: &ExperimentConfig) -> Vec<AblationCell> {
    let k0 = base.pretrain.spem.num_prompts;
    let layers0 = base.backbone.injection_layers.clone();
    let w0 = base.pretrain.weights;
    let mid = base.backbone.num_layers / 2;
    let mut cells: Vec<AblationCell> = ABLATION_K
        .iter()
        .map(|&k| AblationCell {
            sweep: "k",
            label: format!("K={k}"),
            num_prompts: k,
            injection_layers: layers0.clone(),
            weights: w0,
        })
        .collect();
    for (label, layers) in [("shallow", vec![0]), ("mid", vec![mid]), ("shallow+mid", vec![0, mid])] {
        cells.push(AblationCell {
            sweep: "depth",
            label: label.into(),
            num_prompts: k0,
            injection_layers: layers.into_iter().collect(),
            weights: w0,
        });
    }
    for (l1, l2) in ABLATION_LAMBDAS {
        cells.push(AblationCell {
            sweep: "lambda",
            label: format!("l1={l1} l2={l2}"),
            num_prompts: k0,
            injection_layers: layers0.clone(),
            weights: LossWeights { prompt: l1, dapa: l2 },
        });
    }
    cells
}

impl AblationCell {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.pretrain.spem.num_prompts = self.num_prompts;
        c.backbone.injection_layers = self.injection_layers.clone();
        c.pretrain.weights = self.weights;
        c
    }

    /// Directory-safe cell name.
    pub fn slug(&self) -> String {
        let raw = format!("{}-{}", self.sweep, self.label);
        raw.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
    }

    /// CSV row; `outcome` is the target suite or the error that stopped it.
    pub fn csv_row(&self, seed: u64, outcome: &std::result::Result<MapSuite, String>) -> String {
        let head = format!(
            "{},{},{},{},{},{},{}",
            self.sweep,
            self.label,
            self.num_prompts,
            layer_list(&self.injection_layers),
            self.weights.prompt,
            self.weights.dapa,
            seed
        );
        match outcome {
            Ok(m) => format!("{head},ok,{},{}", m.map50, m.map5095),
            Err(e) => format!("{head},failed: {},,", e.replace([',', '\n'], ";")),
        }
    }
}
