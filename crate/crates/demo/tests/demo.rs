use ferfuse_demo::{breakdown, scene, TinyTrainer};

#[test]
fn scene_pixels_and_landmarks() {
    let s = scene(3, 7, 0.0, 16).unwrap();
    assert_eq!(s.image.height(), 64);
    let occ = scene(3, 7, 0.3, 16).unwrap();
    assert!(occ.occlusion_ratio > 0.25 && occ.occlusion_ratio < 0.35);
    assert_eq!(s.landmarks, occ.landmarks);
    assert!(scene(8, 7, 0.0, 16).is_err());
}

#[test]
fn breakdown_terms_add_up() {
    let v = breakdown(&[2.0, 0.5, -1.0], 0, 1.0, 0.1).unwrap();
    let ce = v["ce"].as_f64().unwrap();
    let dare = v["dare"].as_f64().unwrap();
    assert!((v["total"].as_f64().unwrap() - (ce + 0.1 * dare)).abs() < 1e-12);
    assert_eq!(v["hardest"].as_u64(), Some(1));
    assert!(breakdown(&[1.0], 0, 1.0, 0.1).is_err());
}

#[test]
fn tiny_trainer_reduces_loss() {
    let mut t = TinyTrainer::build(1, false).unwrap();
    let first = t.step_native(1).unwrap();
    t.step_native(80).unwrap();
    assert_eq!(t.steps_done(), 81);
    let tail = t.losses();
    let late = tail[71..].iter().sum::<f64>() / 10.0;
    assert!(late < first, "{first} -> {late}");
}
