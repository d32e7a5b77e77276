use robad_core::losses::{cross_entropy, info_nce, total_loss};
use robad_core::Error;

#[test]
fn info_nce_orthogonal_pairs() {
    // positives identical, every cross-user similarity 0
    let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let l = info_nce(&z, &z, 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((l - (1.0 + 2.0 / e).ln()).abs() < 1e-12);
    assert!((l - 0.551444).abs() < 1e-6);
}

#[test]
fn info_nce_uniform_similarities() {
    let z = vec![vec![0.3, 0.4]; 2];
    let l = info_nce(&z, &z, 1.0).unwrap();
    assert!((l - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn info_nce_scale_invariant() {
    let a = vec![vec![0.2, -1.0, 0.5], vec![1.5, 0.1, -0.3], vec![-0.7, 0.9, 0.4]];
    let b = vec![vec![0.1, -0.8, 0.9], vec![1.1, 0.6, -0.2], vec![-0.2, 0.3, 1.4]];
    let base = info_nce(&a, &b, 1.0).unwrap();
    let scale = |z: &[Vec<f64>], s: f64| {
        z.iter()
            .map(|r| r.iter().map(|v| v * s).collect())
            .collect::<Vec<Vec<f64>>>()
    };
    let scaled = info_nce(&scale(&a, 3.5), &scale(&b, 0.02), 1.0).unwrap();
    assert!((base - scaled).abs() < 1e-12);
}

#[test]
fn info_nce_falls_as_positive_aligns() {
    let anchors = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let t = step as f64 / 10.0;
        let views = vec![vec![t, 1.0 - t, 0.0], vec![0.0, 0.0, 1.0]];
        let l = info_nce(&anchors, &views, 1.0).unwrap();
        assert!(l < last);
        last = l;
    }
}

#[test]
fn cross_entropy_oracles() {
    assert!((cross_entropy(&[[0.5, 0.5]], &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
    assert!((cross_entropy(&[[0.5, 0.5]], &[0]).unwrap() - 2f64.ln()).abs() < 1e-12);
    // a confidently wrong prediction is bounded by the clamp
    let worst = cross_entropy(&[[1.0, 0.0]], &[1]).unwrap();
    assert!((worst - (1e12f64).ln()).abs() < 1e-6);
}

#[test]
fn total_loss_endpoints_are_exact() {
    for (clf, nce) in [(0.37, 1.9), (2.0, 1.0)] {
        assert_eq!(total_loss(clf, nce, 0.0).unwrap(), clf);
        assert_eq!(total_loss(clf, nce, 1.0).unwrap(), nce);
    }
    assert!(matches!(total_loss(1.0, 1.0, 1.5), Err(Error::Config(_))));
}
