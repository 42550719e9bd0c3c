//! Measures and losses checked against small independent calculators.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use reid_core::adversary::{Discriminator, DiscriminatorConfig, MergeMode};
use reid_core::data::{generate_synthetic, DiagnosticIds, SyntheticSpec};
use reid_core::embedding::Branch;
use reid_core::evaluation::{
    cluster_quality, entropy, jsd_multi, mutual_information, pca_projection,
};
use reid_core::objectives::{camera_adv_loss, conditional_camera_adv_loss};
use reid_core::pseudo::PseudoLabeling;

fn plogp_sum(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}

#[test]
fn mi_matches_joint_count_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.random_range(5..200);
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<u8> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut joint = [[0.0f64; 3]; 4];
        for (x, y) in a.iter().zip(&b) {
            joint[*x as usize][*y as usize] += 1.0 / n as f64;
        }
        let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let pb: Vec<f64> = (0..3).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                if joint[i][j] > 0.0 {
                    oracle += joint[i][j] * (joint[i][j] / (pa[i] * pb[j])).ln();
                }
            }
        }
        let got = mutual_information(&a, &b).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }
}

#[test]
fn jsd_of_three_matches_entropy_arithmetic() {
    let d = [vec![0.5, 0.5, 0.0], vec![0.1, 0.2, 0.7], vec![1.0 / 3.0; 3]];
    let mix: Vec<f64> = (0..3)
        .map(|j| d.iter().map(|p| p[j]).sum::<f64>() / 3.0)
        .collect();
    let oracle = plogp_sum(&mix) - d.iter().map(|p| plogp_sum(p)).sum::<f64>() / 3.0;
    assert!((jsd_multi(&d).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn purity_matches_exhaustive_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Array2::zeros((40, 1));
    for _ in 0..20 {
        let ids: Vec<u32> = (0..40).map(|i| (i % 2) as u32).collect();
        let clusters: Vec<usize> = (0..40).map(|_| rng.random_range(0..2)).collect();
        let mut oracle = 0usize;
        for c in 0..2 {
            let counts: Vec<usize> = (0..2u32)
                .map(|id| {
                    (0..40)
                        .filter(|&i| clusters[i] == c && ids[i] == id)
                        .count()
                })
                .collect();
            oracle += counts.into_iter().max().unwrap();
        }
        let labeling = PseudoLabeling::from_assignments(
            &x,
            clusters.iter().map(|&c| Some(c)).collect(),
            0,
            Branch::Full,
            false,
        )
        .unwrap();
        let q = cluster_quality(
            &labeling,
            &DiagnosticIds::new(ids.iter().map(|&i| Some(i)).collect()),
        )
        .unwrap();
        assert_eq!(q.purity, oracle as f64 / 40.0);
    }
}

#[test]
fn isotropic_cloud_spreads_variance_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d) = (20_000, 4);
    let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    let p = pca_projection(&x, &vec![0; n], d).unwrap();
    for r in &p.explained_variance_ratio {
        assert!((r - 0.25).abs() < 0.02, "{:?}", p.explained_variance_ratio);
    }
}

#[test]
fn uncorrelated_synthetic_cameras_carry_little_identity() {
    let spec = SyntheticSpec {
        num_identities: 10,
        num_cameras: 4,
        samples_per_id: 8,
        correlation: 0.0,
        ..SyntheticSpec::default()
    };
    let s = generate_synthetic(&spec).unwrap();
    let ids: Vec<u32> = s
        .target_train
        .samples()
        .iter()
        .map(|x| x.person_id.unwrap())
        .collect();
    let mi = mutual_information(&ids, &s.target_train.cameras()).unwrap();
    assert!(mi < 0.1, "{mi}");
    let full = SyntheticSpec {
        correlation: 1.0,
        ..spec
    };
    let s = generate_synthetic(&full).unwrap();
    let mut cams: BTreeMap<u32, std::collections::BTreeSet<usize>> = BTreeMap::new();
    for x in s.target_train.samples() {
        cams.entry(x.person_id.unwrap())
            .or_default()
            .insert(x.camera);
    }
    assert!(cams.values().all(|c| c.len() == 1));
    let ids: Vec<u32> = s
        .target_train
        .samples()
        .iter()
        .map(|x| x.person_id.unwrap())
        .collect();
    let mi = mutual_information(&ids, &s.target_train.cameras()).unwrap();
    assert!((mi - entropy(&s.target_train.cameras()).unwrap()).abs() < 1e-12);
}

#[test]
fn zeroed_conditioning_reduces_to_plain_camera_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut disc = Discriminator::new(
        DiscriminatorConfig {
            feature_dim: 6,
            hidden: 10,
            num_cameras: 3,
            conditional: true,
            merge: MergeMode::Sum,
            head_gain: 1.0,
        },
        8,
    )
    .unwrap();
    disc.zero_conditioning();
    let f = Array2::from_shape_fn((9, 6), |_| rng.sample::<f64, _>(StandardNormal));
    let cams: Vec<usize> = (0..9).map(|i| i % 3).collect();
    let c1: Vec<Option<Vec<f64>>> = (0..9)
        .map(|_| Some((0..6).map(|_| rng.random()).collect()))
        .collect();
    let c2: Vec<Option<Vec<f64>>> = (0..9)
        .map(|_| Some((0..6).map(|_| rng.random()).collect()))
        .collect();
    let l1 = conditional_camera_adv_loss(&f, &c1, &cams, &disc, false)
        .unwrap()
        .value;
    let l2 = conditional_camera_adv_loss(&f, &c2, &cams, &disc, false)
        .unwrap()
        .value;
    assert_eq!(l1, l2);
    let zero = Array2::zeros((9, 6));
    let probs = disc.discriminate(&f, Some(&zero), false).unwrap();
    assert_eq!(camera_adv_loss(&probs, &cams).unwrap().value, l1);
}
