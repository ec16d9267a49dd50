use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protoprompt::checkpoint::Checkpoint;
use protoprompt::datagen::{load_dataset, save_dataset};

const TINY: &str = "\
# tiny run
data.image_size = 32
data.unlabeled = 8
data.source_labeled = 12
data.target_test = 6
data.target_pool = 20
backbone.embed_dim = 16
backbone.num_layers = 2
backbone.num_heads = 2
backbone.injection_layers = 0,1
spem.k = 3
spem.reduced_dim = 4
pretrain.epochs = 3
pretrain.warmup_epochs = 1
pretrain.batch_size = 4
pretrain.eval_size = 4
head.epochs = 3
head.warmup_epochs = 1
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_protoprompt"))
            .current_dir(self.dir.path())
            .env("PROTOPROMPT_CONFIG", "tiny.cfg")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str], kind: &str) {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} should fail");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(&format!("error kind={kind} ")), "{err}");
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        fs::read(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }

    fn text(&self, rel: &str) -> String {
        String::from_utf8(self.read(rel)).unwrap()
    }
}

fn section_bytes(path: &Path, name: &str) -> Vec<Vec<u8>> {
    let ck = Checkpoint::load(path).unwrap();
    ck.section(name).unwrap().iter().map(|t| t.to_le_bytes()).collect()
}

#[test]
fn gen_writes_datasets_and_manifest_reproducibly() {
    let w = Workspace::new();
    w.ok(&["gen", "--set", "paths.data_dir=deep/nested/data"]);
    let manifest = w.text("deep/nested/data/seed-0/manifest.txt");
    assert!(manifest.contains("shift_knob 0.7"), "{manifest}");
    assert!(manifest.contains("source.ds 34 scenes"), "{manifest}");
    let first = w.read("deep/nested/data/seed-0/target.ds");
    w.ok(&["gen", "--set", "paths.data_dir=deep/nested/data"]);
    assert_eq!(w.read("deep/nested/data/seed-0/target.ds"), first);
}

#[test]
fn bad_configs_fail_before_any_work() {
    let w = Workspace::new();
    w.fails(&["gen", "--set", "spem.kk=3"], "parse");
    w.fails(&["gen", "--set", "data.shift_knob=2"], "config");
    w.fails(&["pretrain"], "io");
    assert!(!w.path("runs").exists());
    w.fails(&["ablate", "--sweep", "nope"], "config");
}

#[test]
fn interrupted_pretraining_resumes_to_the_same_artifacts() {
    let w = Workspace::new();
    w.ok(&["gen"]);
    w.ok(&["pretrain", "--set", "paths.run_dir=straight"]);
    w.ok(&["pretrain", "--set", "paths.run_dir=split", "--stop-after", "1"]);
    assert_eq!(w.text("split/seed-0/pretrain/metrics.csv").lines().count(), 3);
    w.ok(&["pretrain", "--set", "paths.run_dir=split", "--resume"]);
    let csv = w.text("straight/seed-0/pretrain/metrics.csv");
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(w.text("split/seed-0/pretrain/metrics.csv"), csv);
    for f in ["loss.svg", "mmd.svg", "config.txt"] {
        assert!(w.path(&format!("straight/seed-0/pretrain/{f}")).exists(), "{f}");
    }
    let a = Checkpoint::load(&w.path("straight/seed-0/pretrain/pretrain.ckpt")).unwrap();
    let b = Checkpoint::load(&w.path("split/seed-0/pretrain/pretrain.ckpt")).unwrap();
    assert_eq!(a.sections, b.sections);

    w.fails(&["pretrain", "--set", "paths.run_dir=split", "--set", "spem.k=4", "--resume"], "state");
}

#[test]
fn component_flags_are_echoed_and_skip_clustering() {
    let w = Workspace::new();
    w.ok(&["gen"]);
    w.ok(&["pretrain", "--no-spem", "--no-dapa"]);
    let cfg = w.text("runs/seed-0/pretrain/config.txt");
    assert!(cfg.contains("pretrain.use_spem = false") && cfg.contains("pretrain.use_dapa = false"));
    assert!(section_bytes(&w.path("runs/seed-0/pretrain/pretrain.ckpt"), "pca").is_empty());
    let csv = w.text("runs/seed-0/pretrain/metrics.csv");
    let last: Vec<f64> = csv.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(last[5], last[2], "total equals the ssl term when both weights are off");
}

#[test]
fn head_training_keeps_frozen_sections_and_counts_few_shot_scenes() {
    let w = Workspace::new();
    w.ok(&["gen"]);
    w.fails(&["train-head"], "state");
    w.fails(&["train-head", "--few-shot-fraction", "0.05"], "state");
    w.ok(&["pretrain"]);
    w.ok(&["train-head"]);
    let pre = w.path("runs/seed-0/pretrain/pretrain.ckpt");
    let model = w.path("runs/seed-0/head/model.ckpt");
    for s in ["backbone", "pca", "prompt_bank", "ssl_heads", "dapa_head", "optimizer"] {
        assert_eq!(section_bytes(&pre, s), section_bytes(&model, s), "{s}");
    }
    let out = w.ok(&["train-head", "--few-shot-fraction", "0.05"]);
    assert!(out.contains("1 of 20 target scenes"), "{out}");
    let fs = Checkpoint::load(&w.path("runs/seed-0/head-fs0.05/model.ckpt")).unwrap();
    assert_eq!(fs.section("few_shot").unwrap()[0].data(), &[0.05, 1.0]);
    w.ok(&["train-head", "--source-only"]);
    assert!(!Checkpoint::load(&w.path("runs/seed-0/head-source-only/model.ckpt")).unwrap().has("prompt_bank"));
}

#[test]
fn eval_reports_corruption_grid_and_seed_summary() {
    let w = Workspace::new();
    for s in ["0", "1", "2"] {
        w.ok(&["gen", "--seed", s]);
        w.ok(&["train-head", "--source-only", "--seed", s]);
    }
    w.ok(&["eval", "--model", "head-source-only", "--corrupt"]);
    let grid = w.text("runs/seed-0/eval/head-source-only/corruption.csv");
    // severities 1..=5 for each category plus the clean severity-0 column
    assert_eq!(grid.lines().count(), 1 + 4 * 6);
    let clean: f64 = w
        .text("runs/seed-0/eval/head-source-only/target_metrics.csv")
        .lines()
        .find(|l| l.starts_with("all,"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    for l in grid.lines().filter(|l| l.split(',').nth(1) == Some("0")) {
        assert_eq!(l.split(',').nth(2).unwrap().parse::<f64>().unwrap(), clean, "{l}");
    }
    assert!(w.path("runs/seed-0/eval/head-source-only/corruption.svg").exists());
    assert!(w.text("runs/seed-0/eval/head-source-only/target_predictions.csv").starts_with("image_id,class,score,"));

    w.ok(&["eval", "--model", "head-source-only", "--seed", "0", "--seed", "1", "--seed", "2"]);
    let summary = w.text("runs/eval-head-source-only.csv");
    let firsts: Vec<&str> = summary.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(firsts, ["seed", "0", "1", "2", "mean", "std"]);
}

#[test]
fn eval_rejects_datasets_with_unknown_classes() {
    let w = Workspace::new();
    w.ok(&["gen"]);
    w.ok(&["train-head", "--source-only"]);
    let path = w.path("data/seed-0/target.ds");
    let mut scenes = load_dataset(&path).unwrap();
    scenes.iter_mut().flat_map(|s| s.boxes.iter_mut()).for_each(|b| b.class_id = 9);
    save_dataset(&scenes, &path).unwrap();
    w.fails(&["eval", "--model", "head-source-only"], "config");
}

#[test]
fn ablation_sweeps_write_one_row_per_cell() {
    let w = Workspace::new();
    w.ok(&["gen"]);
    w.ok(&["ablate", "--set", "pretrain.epochs=2"]);
    let csv = w.text("runs/seed-0/ablate/sweep.csv");
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let ks: Vec<&str> = rows.iter().filter(|r| r[0] == "k").map(|r| r[2]).collect();
    assert_eq!(ks, ["1", "5", "10", "15"]);
    let depth: Vec<&str> = rows.iter().filter(|r| r[0] == "depth").map(|r| r[1]).collect();
    assert_eq!(depth, ["shallow", "mid", "shallow+mid"]);
    assert_eq!(rows.iter().filter(|r| r[0] == "lambda").count(), 5);
    assert!(rows.iter().all(|r| r[7] == "ok"));
    for f in ["k.svg", "depth.svg", "lambda.svg", "k-K_1/config.txt", "depth-shallow/target_metrics.csv"] {
        assert!(w.path(&format!("runs/seed-0/ablate/{f}")).exists(), "{f}");
    }
    // a cell's echoed config reruns on its own
    let cell_cfg = w.path("runs/seed-0/ablate/depth-shallow/config.txt");
    let out = Command::new(env!("CARGO_BIN_EXE_protoprompt"))
        .current_dir(w.dir.path())
        .args(["--config", cell_cfg.to_str().unwrap(), "train-head", "--source-only"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn failing_cells_are_recorded_and_the_sweep_continues() {
    let w = Workspace::new();
    // two 16-pixel images give 8 patches, too few for K=10 and K=15
    let small = ["--set", "data.image_size=16", "--set", "data.unlabeled=2", "--set", "data.source_labeled=18"];
    w.ok(&[&["gen"][..], &small].concat());
    w.ok(&[&["ablate", "--sweep", "k"][..], &small].concat());
    let csv = w.text("runs/seed-0/ablate/sweep.csv");
    let status: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(7).unwrap()).collect();
    assert_eq!(status.len(), 4);
    assert_eq!(&status[..2], ["ok", "ok"], "{csv}");
    assert!(status[2..].iter().all(|s| s.starts_with("failed: insufficient_data")), "{csv}");
}

#[test]
fn few_shot_sweep_writes_csv_per_fraction() {
    let w = Workspace::new();
    w.ok(&["gen"]);
    w.ok(&["train-head", "--source-only"]);
    w.ok(&["few-shot", "--model", "head-source-only", "--fractions", "0,0.05,0.25"]);
    let csv = w.text("runs/seed-0/few-shot/head-source-only/few_shot.csv");
    let n: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(n, ["0", "1", "5"]);
}

#[test]
fn cluster_writes_inertia_and_purity() {
    let w = Workspace::new();
    w.ok(&["gen"]);
    w.ok(&["cluster"]);
    assert_eq!(w.text("runs/seed-0/cluster/purity.csv").lines().count(), 4);
    assert!(w.text("runs/seed-0/cluster/inertia.csv").contains("\nbest,"));
}

#[test]
fn every_command_is_byte_deterministic() {
    let a = Workspace::new();
    let b = Workspace::new();
    let steps: &[&[&str]] = &[
        &["gen"],
        &["cluster"],
        &["pretrain"],
        &["train-head"],
        &["train-head", "--few-shot-fraction", "0.25"],
        &["eval", "--corrupt"],
        &["few-shot"],
        &["ablate", "--sweep", "depth", "--set", "pretrain.epochs=2"],
    ];
    for s in steps {
        a.ok(s);
        b.ok(s);
    }
    let files = |w: &Workspace| {
        let mut out = Vec::new();
        let mut stack = vec![w.dir.path().to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(w.dir.path()).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    };
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() > 30);
    assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((p, x), (_, y)) in fa.iter().zip(&fb) {
        assert!(x == y, "{} differs", p.display());
    }
}
