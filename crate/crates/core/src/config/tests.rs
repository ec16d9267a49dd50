use super::*;

#[test]
fn echo_parses_back_to_the_same_config() {
    let mut c = RunConfig::default();
    c.apply_overrides(&[
        "spem.k = 5".into(),
        "pretrain.lambda2=0.25".into(),
        "backbone.injection_layers = 1,4".into(),
        "pretrain.align_dim = 8".into(),
        "paths.run_dir = out/x".into(),
    ])
    .unwrap();
    let back = RunConfig::parse(&c.to_text()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.experiment.pretrain.spem.num_prompts, 5);
    assert_eq!(back.experiment.backbone.injection_layers, [1, 4].into());
    for k in KEYS {
        assert!(c.to_text().contains(&format!("\n{k} = ")), "{k}");
    }
}

#[test]
fn comments_and_blank_lines_are_ignored() {
    let c = RunConfig::parse("# header\n\nseed = 7 # trailing\n  head.lr = 0.01\n").unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.experiment.head.optim.base_lr, 0.01);
}

#[test]
fn unknown_keys_and_bad_values_are_rejected_with_location() {
    let e = RunConfig::parse("seed = 1\nspem.kk = 3\n").unwrap_err();
    assert_eq!(e.kind(), "parse");
    let msg = e.to_string();
    assert!(msg.contains(":2") && msg.contains("spem.kk"), "{msg}");
    assert_eq!(RunConfig::parse("pretrain.use_dapa = yes").unwrap_err().kind(), "parse");
    assert_eq!(RunConfig::parse("just words").unwrap_err().kind(), "parse");
}

#[test]
fn semantic_validation_runs_after_parsing() {
    assert_eq!(RunConfig::parse("data.shift_knob = 1.5").unwrap_err().kind(), "config");
    assert_eq!(RunConfig::parse("backbone.num_heads = 5").unwrap_err().kind(), "config");
    assert_eq!(RunConfig::parse("spem.tau = 0").unwrap_err().kind(), "config");
}

#[test]
fn epochs_keep_the_schedule_in_step() {
    let c = RunConfig::parse("pretrain.epochs = 12\nhead.epochs = 5").unwrap();
    assert_eq!(c.experiment.pretrain.optim.total_epochs, 12);
    assert_eq!(c.experiment.head.optim.total_epochs, 5);
}

#[test]
fn profile_applies_before_other_backbone_keys() {
    let c = RunConfig::parse("backbone.num_heads = 6\nbackbone.profile = full\n").unwrap();
    assert_eq!(c.experiment.backbone.embed_dim, 768);
    assert_eq!(c.experiment.backbone.num_heads, 6);
    assert_eq!(c.experiment.data.image_size, 224);
}

#[test]
fn resolved_seeds_stages_from_the_master_seed() {
    let a = RunConfig::parse("seed = 1").unwrap().resolved();
    let b = RunConfig::parse("seed = 2").unwrap().resolved();
    assert_ne!(a.pretrain.seed, b.pretrain.seed);
    assert_ne!(a.head.seed, a.pretrain.seed);
}
