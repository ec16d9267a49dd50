use protoprompt_demo::Scene;

#[test]
fn scene_renders_and_reports_boxes() {
    let s = Scene::new(0.7, 2, 5).unwrap();
    assert_eq!(s.rgba().len(), s.size() * s.size() * 4);
    let b = s.boxes();
    assert_eq!(b.len() % 5, 0);
    assert!(b.chunks(5).all(|r| r[1] < r[3] && r[2] < r[4]));
}

#[test]
fn corruption_changes_pixels_and_severity_zero_does_not() {
    let s = Scene::new(0.0, 1, 1).unwrap();
    assert_eq!(s.corrupted_rgba("noise", 0, 3).unwrap(), s.rgba());
    assert_ne!(s.corrupted_rgba("blur", 4, 3).unwrap(), s.rgba());
}

#[test]
fn clustering_covers_every_patch() {
    let s = Scene::new(0.5, 3, 9).unwrap();
    let c = s.cluster(4, 2).unwrap();
    let n = (s.size() / s.patch_size()).pow(2);
    assert_eq!(c.ids().len(), n);
    assert_eq!(c.defect_mask().len(), n);
    assert_eq!(c.sizes().iter().sum::<u32>() as usize, n);
    assert!(c.ids().iter().all(|&i| i < 4));
    assert!(c.purity().iter().all(|p| (0.0..=1.0).contains(p)));
}
