use super::*;
use crate::detect::HeadConfig;
use crate::pretrain::pretrain_loop;
use crate::testutil::{noise_images, small_pretrain, tiny_backbone};

fn trained_state(epochs: usize) -> (Backbone, PretrainConfig, PretrainState) {
    let bb = tiny_backbone();
    let cfg = small_pretrain(3);
    let (s, t) = (noise_images(6, 1, 0.1), noise_images(6, 2, 0.4));
    let st = pretrain_loop(&bb, &s.iter().collect::<Vec<_>>(), &t.iter().collect::<Vec<_>>(), &cfg, None, Some(epochs), &mut |_| Ok(())).unwrap();
    (bb, cfg, st)
}

fn full_checkpoint(bb: &Backbone, st: &PretrainState) -> Checkpoint {
    let mut ck = Checkpoint::new(9, "seed = 9\n".into());
    ck.put(backbone_section(bb));
    for s in pretrain_sections(st) {
        ck.put(s);
    }
    ck
}

fn values(ts: Vec<&Tensor>) -> Vec<Vec<f64>> {
    ts.into_iter().map(|t| t.data().to_vec()).collect()
}

#[test]
fn encode_decode_encode_is_byte_identical() {
    let (bb, _, st) = trained_state(1);
    let bytes = full_checkpoint(&bb, &st).encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.encode(), bytes);
    assert_eq!(back.seed, 9);
    assert_eq!(back.config, "seed = 9\n");
}

#[test]
fn pretrain_state_survives_the_roundtrip_and_resumes_identically() {
    let (bb, cfg, st) = trained_state(1);
    let ck = Checkpoint::decode(&full_checkpoint(&bb, &st).encode()).unwrap();
    let back = restore_pretrain(&ck, &cfg).unwrap();
    assert_eq!(values(back.params()), values(st.params()));
    assert_eq!(back.prompts().data(), st.prompts().data());
    assert_eq!((back.epochs_done, &back.metrics), (st.epochs_done, &st.metrics));
    let restored = restore_backbone(bb.config().clone(), &ck).unwrap();
    assert_eq!(values(restored.params()), values(bb.params()));

    let (s, t) = (noise_images(6, 1, 0.1), noise_images(6, 2, 0.4));
    let (s, t): (Vec<_>, Vec<_>) = (s.iter().collect(), t.iter().collect());
    let a = pretrain_loop(&bb, &s, &t, &cfg, Some(st), None, &mut |_| Ok(())).unwrap();
    let b = pretrain_loop(&bb, &s, &t, &cfg, Some(back), None, &mut |_| Ok(())).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.prompts().data(), b.prompts().data());
}

#[test]
fn head_roundtrip_keeps_predictions() {
    let cfg = HeadConfig {
        grid: 4,
        in_dim: 16,
        mid1: 8,
        mid2: 4,
        num_classes: 3,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    };
    let mut head = DetectionHead::new(cfg, 4).unwrap();
    head.running_mean.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
    let rows = vec![HeadMetricsRow { epoch: 0, lr: 0.0, loss_focal: 1.0, loss_giou: 0.5, loss_det: 1.5 }];
    let mut ck = Checkpoint::new(0, String::new());
    for s in head_sections(&head, &rows) {
        ck.put(s);
    }
    let (back, m) = restore_head(&Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
    assert_eq!(m, rows);
    let img = &noise_images(1, 3, 0.0)[0];
    let tokens = Tensor::new(&[16, 16], img.data().to_vec()).unwrap();
    assert_eq!(back.predict(&tokens).unwrap().data(), head.predict(&tokens).unwrap().data());
}

#[test]
fn version_truncation_and_missing_sections_are_rejected() {
    let (bb, _, st) = trained_state(1);
    let bytes = full_checkpoint(&bb, &st).encode();
    let mut bumped = bytes.clone();
    bumped[5] = b'7';
    assert_eq!(Checkpoint::decode(&bumped).unwrap_err().kind(), "state");
    assert_eq!(Checkpoint::decode(&bytes[..bytes.len() - 20]).unwrap_err().kind(), "parse");
    assert_eq!(Checkpoint::decode(b"nope").unwrap_err().kind(), "parse");
    let ck = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(restore_head(&ck).unwrap_err().kind(), "state");
}

#[test]
fn put_replaces_sections_by_name() {
    let mut ck = Checkpoint::new(0, String::new());
    ck.put(Section::new("a", vec![Tensor::scalar(1.0)]));
    ck.put(Section::new("b", vec![]));
    ck.put(Section::new("a", vec![Tensor::scalar(2.0)]));
    assert_eq!(ck.sections.len(), 2);
    assert_eq!(ck.section("a").unwrap()[0].data(), &[2.0]);
    assert!(ck.has("b") && !ck.has("c"));
}

#[test]
fn save_and_load_go_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/run.ckpt");
    let mut ck = Checkpoint::new(5, "x = 1\n".into());
    ck.put(Section::new("t", vec![Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, f64::MAX]).unwrap()]));
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().encode(), ck.encode());
    assert_eq!(Checkpoint::load(&dir.path().join("missing")).unwrap_err().kind(), "io");
}
