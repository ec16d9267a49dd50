use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protoprompt::backbone::Backbone;
use protoprompt::checkpoint::{
    backbone_section, head_sections, pretrain_sections, restore_backbone, restore_head, restore_pretrain, Checkpoint, Section,
};
use protoprompt::config::{RunConfig, CONFIG_ENV};
use protoprompt::datagen::{load_dataset, save_dataset, LabeledScene};
use protoprompt::detect::{detect_images, head_metrics_csv, predictions_csv, HeadMetricsRow};
use protoprompt::evalkit::{suite_csv, Corruption, MapSuite};
use protoprompt::experiment::{
    ablation_cells, backbone_for, box_patch_labels, cluster_study, corruption_csv, corruption_grid, evaluate, few_shot_head, few_shot_scenes, fit_head, generate_pair, images,
    mean_std, run_variant, splits_from, ExperimentConfig, Splits, TrainedModel, Variant, ABLATION_HEADER,
};
use protoprompt::plot::{line_chart, Series};
use protoprompt::pretrain::{metrics_csv, pretrain_loop, PretrainState};
use protoprompt::{Error, Result};

const SOURCE_FILE: &str = "source.ds";
const TARGET_FILE: &str = "target.ds";
const PRETRAIN_CKPT: &str = "pretrain.ckpt";
const MODEL_CKPT: &str = "model.ckpt";
/// Patch counts as defect for `cluster` when half of it lies in a box.
const BOX_LABEL_FRACTION: f64 = 0.5;

#[derive(Parser)]
#[command(name = "protoprompt", version, about = "Prompt discovery, feature alignment and detection on a frozen transformer")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set spem.k=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; repeat to run several seeds. Defaults to the config seed.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target datasets.
    Gen,
    /// Cluster target patch embeddings and report per-cluster defect purity.
    Cluster,
    /// Self-supervised pretraining of prompts and alignment heads.
    Pretrain(PretrainArgs),
    /// Train the detection head on labeled source scenes.
    TrainHead(HeadArgs),
    /// Evaluate a trained head on the source and target splits.
    Eval(EvalArgs),
    /// Sweep prompt count, injection depth and loss weights.
    Ablate(AblateArgs),
    /// Fine-tune a trained head with growing labeled target fractions and evaluate each.
    FewShot(FewShotArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Drop the prompt consistency term and use random prompt anchors.
    #[arg(long)]
    no_spem: bool,
    /// Drop the alignment term.
    #[arg(long)]
    no_dapa: bool,
    /// Continue from the run's last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop once this many epochs are done.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct HeadArgs {
    /// Skip pretraining: no prompts, untouched backbone.
    #[arg(long)]
    source_only: bool,
    /// Fine-tune the trained head with this fraction of the labeled target pool.
    #[arg(long)]
    few_shot_fraction: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Head run to evaluate (`head`, `head-source-only`, `head-fs0.05`, ...).
    #[arg(long, default_value = "head")]
    model: String,
    /// Also run the corruption grid on the target test split.
    #[arg(long)]
    corrupt: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Which sweep to run: k, depth, lambda or all.
    #[arg(long, default_value = "all")]
    sweep: String,
}

#[derive(Args)]
struct FewShotArgs {
    /// Labeled target fractions.
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.25")]
    fractions: Vec<f64>,
    /// Head run to fine-tune.
    #[arg(long, default_value = "head")]
    model: String,
}

/// One seed's view of the configuration and its directories.
struct Ctx {
    run: RunConfig,
    exp: ExperimentConfig,
    seed: u64,
}

impl Ctx {
    fn new(base: &RunConfig, seed: u64) -> Self {
        let mut run = base.clone();
        run.seed = seed;
        let exp = run.resolved();
        Self { run, exp, seed }
    }

    fn data_dir(&self) -> PathBuf {
        self.run.data_dir.join(format!("seed-{}", self.seed))
    }

    fn run_dir(&self) -> PathBuf {
        self.run.run_dir.join(format!("seed-{}", self.seed))
    }

    fn splits(&self) -> Result<Splits> {
        let dir = self.data_dir();
        let (src, tgt) = (load_dataset(&dir.join(SOURCE_FILE))?, load_dataset(&dir.join(TARGET_FILE))?);
        let size = self.exp.data.image_size;
        if let Some(s) = src.iter().chain(&tgt).find(|s| s.image.width() != size || s.image.height() != size) {
            return Err(Error::Config(format!(
                "dataset scene {} is {}x{} but the config expects {size}",
                s.id,
                s.image.width(),
                s.image.height()
            )));
        }
        splits_from(src, tgt, &self.exp.data)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn echo_config(dir: &Path, run: &RunConfig) -> Result<()> {
    write(&dir.join("config.txt"), run.to_text())
}

fn chart(path: &Path, title: &str, x: &str, y: &str, series: &[Series]) -> Result<()> {
    write(path, line_chart(title, x, y, series)?)
}

fn check_classes(scenes: &[LabeledScene], num_classes: usize) -> Result<()> {
    match scenes.iter().flat_map(|s| &s.boxes).find(|a| a.class_id >= num_classes) {
        Some(a) => Err(Error::Config(format!("dataset class {} but the head predicts {num_classes} classes", a.class_id))),
        None => Ok(()),
    }
}

fn cmd_gen(ctx: &Ctx) -> Result<()> {
    let (src, tgt) = generate_pair(&ctx.exp.data, ctx.seed)?;
    let dir = ctx.data_dir();
    save_dataset(&src, &dir.join(SOURCE_FILE))?;
    save_dataset(&tgt, &dir.join(TARGET_FILE))?;
    let d = &ctx.exp.data;
    let boxes = |v: &[LabeledScene]| v.iter().map(|s| s.boxes.len()).sum::<usize>();
    let manifest = format!(
        "seed {}\nimage_size {}\nshift_knob {}\n{SOURCE_FILE} {} scenes {} boxes\n{TARGET_FILE} {} scenes {} boxes\n",
        ctx.seed,
        d.image_size,
        d.shift_knob,
        src.len(),
        boxes(&src),
        tgt.len(),
        boxes(&tgt)
    );
    write(&dir.join("manifest.txt"), manifest)?;
    println!("wrote {} and {} scenes to {}", src.len(), tgt.len(), dir.display());
    Ok(())
}

fn cmd_cluster(ctx: &Ctx) -> Result<()> {
    let splits = ctx.splits()?;
    let backbone = backbone_for(&ctx.exp, ctx.seed)?;
    let scenes = &splits.target_unlabeled;
    let labels = box_patch_labels(scenes, ctx.exp.backbone.patch_size, BOX_LABEL_FRACTION);
    let spem = &ctx.exp.pretrain.spem;
    let report = cluster_study(&backbone, scenes, &labels, spem, ctx.exp.pretrain.seed)?;
    let dir = ctx.run_dir().join("cluster");
    echo_config(&dir, &ctx.run)?;
    let mut inertia = String::from("restart,inertia\n");
    for (i, v) in report.restarts.iter().enumerate() {
        inertia.push_str(&format!("{i},{v}\n"));
    }
    inertia.push_str(&format!("best,{}\n", report.inertia));
    write(&dir.join("inertia.csv"), inertia)?;
    write(&dir.join("purity.csv"), report.purity_csv())?;
    println!("inertia {} best defect purity {:.3}", report.inertia, report.best_purity());
    Ok(())
}

fn cmd_pretrain(base: &Ctx, a: &PretrainArgs) -> Result<()> {
    let mut run = base.run.clone();
    if a.no_spem {
        run.set("pretrain.use_spem", "false")?;
    }
    if a.no_dapa {
        run.set("pretrain.use_dapa", "false")?;
    }
    run.validate()?;
    let ctx = Ctx::new(&run, base.seed);
    let cfg = &ctx.exp.pretrain;
    let dir = ctx.run_dir().join("pretrain");
    let ckpt_path = dir.join(PRETRAIN_CKPT);
    let config_text = ctx.run.to_text();

    let (backbone, resume) = if a.resume {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.config != config_text || ck.seed != ctx.seed {
            return Err(Error::State(format!("{} was written with a different config or seed", ckpt_path.display())));
        }
        (restore_backbone(ctx.exp.backbone.clone(), &ck)?, Some(restore_pretrain(&ck, cfg)?))
    } else {
        (backbone_for(&ctx.exp, ctx.seed)?, None)
    };
    let splits = ctx.splits()?;
    echo_config(&dir, &ctx.run)?;
    let save = |st: &PretrainState| -> Result<()> {
        let mut ck = Checkpoint::new(ctx.seed, config_text.clone());
        ck.put(backbone_section(&backbone));
        for s in pretrain_sections(st) {
            ck.put(s);
        }
        ck.save(&ckpt_path)?;
        write(&dir.join("metrics.csv"), metrics_csv(&st.metrics))
    };
    let st = pretrain_loop(
        &backbone,
        &images(&splits.source_unlabeled),
        &images(&splits.target_unlabeled),
        cfg,
        resume,
        a.stop_after,
        &mut |st| save(st),
    )?;
    save(&st)?;
    let w = cfg.effective_weights();
    let pick = |f: &dyn Fn(&protoprompt::pretrain::MetricsRow) -> f64| st.metrics.iter().map(|m| (m.epoch as f64, f(m))).collect::<Vec<_>>();
    chart(
        &dir.join("loss.svg"),
        "weighted loss components",
        "epoch",
        "loss",
        &[
            Series::new("ssl", pick(&|m| m.loss_ssl)),
            Series::new("l1 * prompt", pick(&|m| w.prompt * m.loss_prompt)),
            Series::new("l2 * dapa", pick(&|m| w.dapa * m.loss_dapa)),
            Series::new("total", pick(&|m| m.loss_total)),
        ],
    )?;
    chart(&dir.join("mmd.svg"), "cross-domain MMD", "epoch", "mmd", &[Series::new("mmd", pick(&|m| m.mmd_eval))])?;
    let last = st.metrics.last().expect("epoch 0 row");
    println!("pretrained {} epochs, total loss {:.4}, mmd {:.4}", st.epochs_done, last.loss_total, last.mmd_eval);
    Ok(())
}

/// The frozen parts a head trains on top of: backbone, pretrain sections
/// (copied verbatim) and prompts.
struct Base {
    backbone: Backbone,
    sections: Vec<Section>,
    pretrain: Option<PretrainState>,
}

fn load_base(ctx: &Ctx, source_only: bool) -> Result<Base> {
    if source_only {
        return Ok(Base {
            backbone: backbone_for(&ctx.exp, ctx.seed)?,
            sections: Vec::new(),
            pretrain: None,
        });
    }
    let path = ctx.run_dir().join("pretrain").join(PRETRAIN_CKPT);
    let ck = Checkpoint::load(&path).map_err(|e| match e {
        Error::Io { path, .. } => Error::State(format!("no pretrain checkpoint at {}; run pretrain or pass --source-only", path.display())),
        e => e,
    })?;
    let pre_run = RunConfig::parse(&ck.config)?;
    let pre = pre_run.resolved();
    if pre.backbone != ctx.exp.backbone {
        return Err(Error::State(format!("{} uses a different backbone config", path.display())));
    }
    Ok(Base {
        backbone: restore_backbone(pre.backbone.clone(), &ck)?,
        pretrain: Some(restore_pretrain(&ck, &pre.pretrain)?),
        sections: ck.sections.into_iter().filter(|s| s.name != "backbone").collect(),
    })
}

fn model_checkpoint(ctx: &Ctx, base: &Base, model: &TrainedModel, extra: &[(&str, Vec<f64>)]) -> Checkpoint {
    let mut ck = Checkpoint::new(ctx.seed, ctx.run.to_text());
    ck.put(backbone_section(&base.backbone));
    for s in &base.sections {
        ck.put(s.clone());
    }
    for s in head_sections(&model.head, &model.head_metrics) {
        ck.put(s);
    }
    for (name, v) in extra {
        ck.put(Section::new(name, vec![protoprompt::numcore::Tensor::new(&[1, v.len()], v.clone()).expect("non-empty row")]));
    }
    ck
}

fn head_charts(dir: &Path, rows: &[HeadMetricsRow]) -> Result<()> {
    write(&dir.join("metrics.csv"), head_metrics_csv(rows))?;
    if rows.is_empty() {
        return Ok(());
    }
    let pick = |f: fn(&HeadMetricsRow) -> f64| rows.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>();
    chart(
        &dir.join("loss.svg"),
        "detection head loss",
        "epoch",
        "loss",
        &[
            Series::new("focal", pick(|r| r.loss_focal)),
            Series::new("giou", pick(|r| r.loss_giou)),
            Series::new("total", pick(|r| r.loss_det)),
        ],
    )
}

fn head_dir_name(source_only: bool, fraction: Option<f64>) -> String {
    let stem = if source_only { "head-source-only" } else { "head" };
    match fraction {
        Some(f) => format!("{stem}-fs{f}"),
        None => stem.to_string(),
    }
}

fn load_model(ctx: &Ctx, name: &str) -> Result<(Base, TrainedModel)> {
    let path = ctx.run_dir().join(name).join(MODEL_CKPT);
    let ck = Checkpoint::load(&path)?;
    let (head, head_metrics) = restore_head(&ck)?;
    let cfg = RunConfig::parse(&ck.config)?.resolved();
    let pretrain = if ck.has("prompt_bank") { Some(restore_pretrain(&ck, &cfg.pretrain)?) } else { None };
    let base = Base {
        backbone: restore_backbone(ctx.exp.backbone.clone(), &ck)?,
        sections: ck
            .sections
            .into_iter()
            .filter(|s| !matches!(s.name.as_str(), "backbone" | "det_head" | "head_progress"))
            .collect(),
        pretrain: pretrain.clone(),
    };
    Ok((
        base,
        TrainedModel {
            pretrain,
            head,
            head_metrics,
        },
    ))
}

fn cmd_train_head(ctx: &Ctx, a: &HeadArgs) -> Result<()> {
    let splits = ctx.splits()?;
    let nc = ctx.exp.head_config().num_classes;
    check_classes(&splits.source_labeled, nc)?;
    let (base, model, extra) = match a.few_shot_fraction {
        None => {
            let base = load_base(ctx, a.source_only)?;
            let prompts = base.pretrain.as_ref().map(|p| p.prompts());
            let (head, head_metrics) = fit_head(&base.backbone, prompts, &splits.source_labeled, &ctx.exp)?;
            let pretrain = base.pretrain.clone();
            (base, TrainedModel { pretrain, head, head_metrics }, Vec::new())
        }
        Some(f) => {
            let (base, source_model) = load_model(ctx, &head_dir_name(a.source_only, None)).map_err(|e| match e {
                Error::Io { path, .. } => Error::State(format!("few-shot tuning needs a trained head at {}", path.display())),
                e => e,
            })?;
            let subset = few_shot_scenes(&splits, f, ctx.exp.head.seed)?;
            check_classes(&subset, nc)?;
            let (head, head_metrics) = few_shot_head(&base.backbone, &source_model, &splits, f, &ctx.exp, ctx.exp.head.seed)?;
            println!("few-shot fraction {f}: {} of {} target scenes", subset.len(), splits.target_pool.len());
            let model = TrainedModel {
                head,
                head_metrics,
                ..source_model
            };
            (base, model, vec![("few_shot", vec![f, subset.len() as f64])])
        }
    };
    let dir = ctx.run_dir().join(head_dir_name(a.source_only, a.few_shot_fraction));
    echo_config(&dir, &ctx.run)?;
    model_checkpoint(ctx, &base, &model, &extra).save(&dir.join(MODEL_CKPT))?;
    head_charts(&dir, &model.head_metrics)?;
    println!("trained head: {} weights, {} bias/affine", model.head.weight_count(), model.head.bias_count());
    Ok(())
}

fn eval_model(ctx: &Ctx, a: &EvalArgs) -> Result<MapSuite> {
    let splits = ctx.splits()?;
    let (base, model) = load_model(ctx, &a.model)?;
    let nc = model.head.cfg.num_classes;
    check_classes(&splits.source_labeled, nc)?;
    check_classes(&splits.target_test, nc)?;
    let dir = ctx.run_dir().join("eval").join(&a.model);
    echo_config(&dir, &ctx.run)?;
    let prompts = model.prompts();
    let mut target = None;
    for (name, scenes) in [("source", &splits.source_labeled), ("target", &splits.target_test)] {
        let suite = evaluate(&base.backbone, prompts, &model.head, scenes, &ctx.exp)?;
        write(&dir.join(format!("{name}_metrics.csv")), suite_csv(&suite))?;
        println!("{name}: mAP@50 {:.4} mAP@[.5:.95] {:.4}", suite.map50, suite.map5095);
        if name == "target" {
            let preds = detect_images(&base.backbone, prompts, &model.head, &images(scenes), ctx.exp.score_threshold, ctx.exp.nms_iou)?;
            let ids: Vec<usize> = scenes.iter().map(|s| s.id).collect();
            write(&dir.join("target_predictions.csv"), predictions_csv(&ids, &preds))?;
            target = Some(suite);
        }
    }
    if a.corrupt {
        let rows = corruption_grid(&base.backbone, &model, &splits.target_test, &ctx.exp, sub_seed_corrupt(ctx))?;
        write(&dir.join("corruption.csv"), corruption_csv(&rows))?;
        let series: Vec<Series> = Corruption::ALL
            .iter()
            .map(|&c| Series::new(c.name(), rows.iter().filter(|r| r.category == c).map(|r| (r.severity as f64, r.map50)).collect()))
            .collect();
        chart(&dir.join("corruption.svg"), "target mAP@50 under corruption", "severity", "mAP@50", &series)?;
    }
    Ok(target.expect("target evaluated"))
}

fn sub_seed_corrupt(ctx: &Ctx) -> u64 {
    protoprompt::rng::sub_seed(ctx.seed, "corrupt")
}

fn summary_rows(header: &str, rows: &[(u64, Vec<f64>)]) -> Result<String> {
    let mut s = format!("seed,{header}\n");
    for (seed, v) in rows {
        let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        s.push_str(&format!("{seed},{}\n", vals.join(",")));
    }
    if rows.len() > 1 {
        let cols = rows[0].1.len();
        let mut stats = Vec::new();
        for c in 0..cols {
            let col: Vec<f64> = rows.iter().map(|r| r.1[c]).collect();
            stats.push(mean_std(&col)?);
        }
        let means: Vec<String> = stats.iter().map(|p| p.0.to_string()).collect();
        let stds: Vec<String> = stats.iter().map(|p| p.1.to_string()).collect();
        s.push_str(&format!("mean,{}\nstd,{}\n", means.join(","), stds.join(",")));
    }
    Ok(s)
}

fn cmd_ablate(ctx: &Ctx, a: &AblateArgs) -> Result<Vec<String>> {
    let sweeps: &[&str] = match a.sweep.as_str() {
        "all" => &["k", "depth", "lambda"],
        "k" => &["k"],
        "depth" => &["depth"],
        "lambda" => &["lambda"],
        other => return Err(Error::Config(format!("unknown sweep {other:?}; use k, depth, lambda or all"))),
    };
    let splits = ctx.splits()?;
    let dir = ctx.run_dir().join("ablate");
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for cell in ablation_cells(&ctx.run.experiment).into_iter().filter(|c| sweeps.contains(&c.sweep)) {
        let mut run = ctx.run.clone();
        run.experiment = cell.apply(&ctx.run.experiment);
        let cell_dir = dir.join(cell.slug());
        let outcome = (|| -> Result<MapSuite> {
            run.validate()?;
            echo_config(&cell_dir, &run)?;
            let exp = run.resolved();
            let bb = backbone_for(&exp, ctx.seed)?;
            let r = run_variant(&bb, &splits, &exp, Variant::Full, ctx.seed)?;
            write(&cell_dir.join("target_metrics.csv"), suite_csv(&r.target))?;
            if let Some(p) = &r.model.pretrain {
                write(&cell_dir.join("pretrain_metrics.csv"), metrics_csv(&p.metrics))?;
            }
            write(&cell_dir.join("head_metrics.csv"), head_metrics_csv(&r.model.head_metrics))?;
            Ok(r.target)
        })()
        .map_err(|e| {
            eprintln!("cell {} failed: {e}", cell.slug());
            format!("{}: {e}", e.kind())
        });
        println!("{} {}", cell.label, outcome.as_ref().map_or("failed".to_string(), |m| format!("mAP@50 {:.4}", m.map50)));
        rows.push(cell.csv_row(ctx.seed, &outcome));
        results.push((cell, outcome.ok().map(|m| m.map50)));
    }
    let mut csv = format!("{ABLATION_HEADER}\n");
    rows.iter().for_each(|r| {
        csv.push_str(r);
        csv.push('\n');
    });
    write(&dir.join("sweep.csv"), csv)?;
    for sweep in sweeps {
        let pts: Vec<(f64, f64)> = results
            .iter()
            .filter(|(c, _)| c.sweep == *sweep)
            .enumerate()
            .filter_map(|(i, (c, m))| m.map(|m| (if *sweep == "k" { c.num_prompts as f64 } else { i as f64 }, m)))
            .collect();
        if !pts.is_empty() {
            let x = match *sweep {
                "k" => "K",
                "depth" => "strategy (shallow, mid, shallow+mid)",
                _ => "weight setting (row order of sweep.csv)",
            };
            chart(&dir.join(format!("{sweep}.svg")), &format!("target mAP@50, {sweep} sweep"), x, "mAP@50", &[Series::new(*sweep, pts)])?;
        }
    }
    Ok(rows)
}

fn cmd_few_shot(ctx: &Ctx, a: &FewShotArgs) -> Result<Vec<f64>> {
    let splits = ctx.splits()?;
    let (base, model) = load_model(ctx, &a.model)?;
    let dir = ctx.run_dir().join("few-shot").join(&a.model);
    echo_config(&dir, &ctx.run)?;
    let mut csv = String::from("fraction,scenes,map50,map5095\n");
    let mut out = Vec::new();
    for &f in &a.fractions {
        let n = few_shot_scenes(&splits, f, ctx.exp.head.seed)?.len();
        let (head, _) = few_shot_head(&base.backbone, &model, &splits, f, &ctx.exp, ctx.exp.head.seed)?;
        let suite = evaluate(&base.backbone, model.prompts(), &head, &splits.target_test, &ctx.exp)?;
        println!("fraction {f}: {n} scenes, target mAP@50 {:.4}", suite.map50);
        csv.push_str(&format!("{f},{n},{},{}\n", suite.map50, suite.map5095));
        out.push(suite.map50);
    }
    write(&dir.join("few_shot.csv"), csv)?;
    let pts = a.fractions.iter().copied().zip(out.iter().copied()).collect();
    chart(&dir.join("few_shot.svg"), "target mAP@50 by labeled fraction", "fraction", "mAP@50", &[Series::new("mAP@50", pts)])?;
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let mut base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.apply_overrides(&cli.overrides)?;
    base.validate()?;
    let seeds = if cli.seeds.is_empty() { vec![base.seed] } else { cli.seeds.clone() };
    let ctxs: Vec<Ctx> = seeds.iter().map(|&s| Ctx::new(&base, s)).collect();
    match &cli.command {
        Command::Gen => ctxs.iter().try_for_each(cmd_gen),
        Command::Cluster => ctxs.iter().try_for_each(cmd_cluster),
        Command::Pretrain(a) => ctxs.iter().try_for_each(|c| cmd_pretrain(c, a)),
        Command::TrainHead(a) => ctxs.iter().try_for_each(|c| cmd_train_head(c, a)),
        Command::Eval(a) => {
            let mut rows = Vec::new();
            for c in &ctxs {
                let m = eval_model(c, a)?;
                rows.push((c.seed, vec![m.map50, m.map5095, m.ar]));
            }
            let s = summary_rows("map50,map5095,ar", &rows)?;
            write(&base.run_dir.join(format!("eval-{}.csv", a.model)), &s)?;
            print!("{s}");
            Ok(())
        }
        Command::Ablate(a) => {
            let mut all = Vec::new();
            for c in &ctxs {
                all.extend(cmd_ablate(c, a)?);
            }
            let mut csv = format!("{ABLATION_HEADER}\n");
            all.iter().for_each(|r| {
                csv.push_str(r);
                csv.push('\n');
            });
            write(&base.run_dir.join("ablate.csv"), csv)
        }
        Command::FewShot(a) => {
            let mut rows = Vec::new();
            for c in &ctxs {
                rows.push((c.seed, cmd_few_shot(c, a)?));
            }
            let header: Vec<String> = a.fractions.iter().map(|f| format!("map50@{f}")).collect();
            let s = summary_rows(&header.join(","), &rows)?;
            write(&base.run_dir.join(format!("few-shot-{}.csv", a.model)), &s)?;
            print!("{s}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}
