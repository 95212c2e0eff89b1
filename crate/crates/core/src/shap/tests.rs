use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::ImageType;
use crate::tabular::{gbt_fit, rf_fit, DecisionTree, Node};

fn grow(rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>, p: usize, depth: usize, max_depth: usize, cover: f64) -> usize {
    let idx = nodes.len();
    if depth == max_depth || rng.random_bool(0.25) {
        nodes.push(Node::leaf(rng.random_range(-5.0..5.0), cover));
        return idx;
    }
    nodes.push(Node::leaf(0.0, cover));
    let f = rng.random_range(0..p);
    let t = rng.random_range(-1.0..1.0);
    let share = rng.random_range(0.05..0.95);
    let l = grow(rng, nodes, p, depth + 1, max_depth, cover * share);
    let r = grow(rng, nodes, p, depth + 1, max_depth, cover * (1.0 - share));
    nodes[idx] = Node::split(f, t, l, r, cover);
    idx
}

fn random_tree(seed: u64, p: usize, max_depth: usize) -> DecisionTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::new();
    let cover = rng.random_range(10.0..100.0);
    grow(&mut rng, &mut nodes, p, 0, max_depth, cover);
    DecisionTree { nodes }
}

fn random_x(seed: u64, p: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    (0..p).map(|_| rng.random_range(-1.2..1.2)).collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < tol, "feature {i}: {x} vs {y}");
    }
}

#[test]
fn stump_matches_closed_form() {
    let (a, b, na, nb) = (3.0, -1.0, 30.0, 10.0);
    let tree = DecisionTree {
        nodes: vec![Node::split(1, 0.5, 1, 2, na + nb), Node::leaf(a, na), Node::leaf(b, nb)],
    };
    let (phi0, phi) = treeshap_tree(&tree, &[9.0, 0.0, 9.0]).unwrap();
    let mean = (na * a + nb * b) / (na + nb);
    assert!((phi0 - mean).abs() < 1e-14);
    assert!((phi[1] - (a - mean)).abs() < 1e-14);
    assert_eq!(phi[0], 0.0);
    assert_eq!(phi[2], 0.0);
}

#[test]
fn matches_brute_force_on_random_trees() {
    for seed in 0..60 {
        let p = 1 + (seed as usize % 8);
        let tree = random_tree(seed, p, 5);
        let x = random_x(seed, p);
        let (e0, fast) = treeshap_tree(&tree, &x).unwrap();
        let (b0, slow) = brute_force_shap(&TreeSum::single(&tree), &x).unwrap();
        assert!((e0 - b0).abs() < 1e-10);
        assert_close(&fast, &slow, 1e-10);
    }
}

#[test]
fn repeated_feature_on_path() {
    let tree = DecisionTree {
        nodes: vec![
            Node::split(0, 0.0, 1, 2, 10.0),
            Node::split(0, -0.5, 3, 4, 6.0),
            Node::split(1, 0.0, 5, 6, 4.0),
            Node::leaf(1.0, 2.0),
            Node::split(1, 0.3, 7, 8, 4.0),
            Node::leaf(-2.0, 1.0),
            Node::leaf(4.0, 3.0),
            Node::leaf(0.5, 1.0),
            Node::leaf(7.0, 3.0),
        ],
    };
    for x in [[-0.7, 0.1], [-0.2, 0.5], [0.4, -0.1], [0.4, 0.2]] {
        let (_, fast) = treeshap_tree(&tree, &x).unwrap();
        let (_, slow) = brute_force_shap(&TreeSum::single(&tree), &x).unwrap();
        assert_close(&fast, &slow, 1e-12);
    }
}

#[test]
fn fitted_ensembles_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = DMatrix::from_fn(80, 5, |_, _| rng.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..80).map(|i| x[(i, 0)] * 2.0 - x[(i, 3)] + (x[(i, 1)] > 0.0) as u8 as f64).collect();
    let rf = FittedModel::RandomForest(rf_fit(&x, &y, 6, 3, 2, Some(4), true, 9).unwrap());
    let gbt = FittedModel::Gbt(gbt_fit(&x, &y, 4, 0.3, 1.0, 0.0, 3, 0).unwrap());
    for model in [&rf, &gbt] {
        let sum = TreeSum::from_model(model).unwrap();
        for i in 0..10 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let s = treeshap_ensemble(model, &row, "h").unwrap();
            let (b0, slow) = brute_force_shap(&sum, &row).unwrap();
            assert!((s.base_value - b0).abs() < 1e-10);
            assert_close(&s.phi, &slow, 1e-10);
            let total = s.base_value + s.phi.iter().sum::<f64>();
            let pred = model.predict(&DMatrix::from_row_slice(1, 5, &row))[0];
            assert!((total - pred).abs() < 1e-8);
        }
    }
}

#[test]
fn elastic_net_is_rejected() {
    let x = DMatrix::from_fn(10, 2, |i, j| (i * (j + 1)) as f64);
    let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let en = FittedModel::ElasticNet(crate::tabular::elasticnet_fit(&x, &y, 0.1, 0.5, 1e-8, 1000).unwrap());
    assert!(matches!(treeshap_ensemble(&en, &[0.0, 0.0], "h"), Err(Error::Unsupported(_))));
}

#[test]
fn brute_force_refuses_wide_universes() {
    let tree = random_tree(1, 3, 2);
    assert!(brute_force_shap(&TreeSum::single(&tree), &[0.0; 16]).is_err());
}

#[test]
fn symmetric_features_share_credit() {
    // y = 1 iff x0 > 0 and x1 > 0, balanced covers
    let tree = DecisionTree {
        nodes: vec![
            Node::split(0, 0.0, 1, 2, 4.0),
            Node::leaf(0.0, 2.0),
            Node::split(1, 0.0, 3, 4, 2.0),
            Node::leaf(0.0, 1.0),
            Node::leaf(1.0, 1.0),
        ],
    };
    let (_, phi) = treeshap_tree(&tree, &[1.0, 1.0]).unwrap();
    assert!((phi[0] - phi[1]).abs() < 1e-14);
    assert!((phi[0] - 0.375).abs() < 1e-14);
}

#[test]
fn scaling_targets_scales_attributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = DMatrix::from_fn(60, 4, |_, _| rng.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..60).map(|i| x[(i, 0)] - 0.5 * x[(i, 2)]).collect();
    let c = 4.0;
    let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
    let a = FittedModel::RandomForest(rf_fit(&x, &y, 5, 2, 1, Some(5), true, 3).unwrap());
    let b = FittedModel::RandomForest(rf_fit(&x, &yc, 5, 2, 1, Some(5), true, 3).unwrap());
    let row: Vec<f64> = x.row(7).iter().copied().collect();
    let sa = treeshap_ensemble(&a, &row, "h").unwrap();
    let sb = treeshap_ensemble(&b, &row, "h").unwrap();
    let scaled: Vec<f64> = sa.phi.iter().map(|v| v * c).collect();
    assert_close(&sb.phi, &scaled, 1e-10);
}

fn cols(types: &[(ImageType, usize)]) -> Vec<ColumnSource> {
    types.iter().map(|&(image_type, index)| ColumnSource { image_type, index }).collect()
}

#[test]
fn grouping_sums_by_provenance() {
    let s = ShapVector { household_id: "h".into(), base_value: 1.0, phi: vec![1.0, 2.0, -4.0], model: "gbt".into() };
    let c = cols(&[(ImageType::Roof, 0), (ImageType::Kitchen, 0), (ImageType::Roof, 1)]);
    let g = group_by_image(&s, &c, &[ImageType::Roof, ImageType::Kitchen, ImageType::Latrine]).unwrap();
    assert_eq!(g.len(), 3);
    assert_eq!(g[&ImageType::Roof], -3.0);
    assert_eq!(g[&ImageType::Kitchen], 2.0);
    assert_eq!(g[&ImageType::Latrine], 0.0);
    assert!(group_by_image(&s, &c[..2], &[ImageType::Roof]).is_err());
    assert!(group_by_image(&s, &c, &[ImageType::Roof]).is_err());
}

#[test]
fn ranking_uses_median_absolute_value_with_stable_ties() {
    let rows: Vec<BTreeMap<ImageType, f64>> = vec![
        [(ImageType::Roof, 1.0), (ImageType::Kitchen, -5.0), (ImageType::Latrine, 1.0)].into(),
        [(ImageType::Roof, -1.0), (ImageType::Kitchen, 0.0), (ImageType::Latrine, -1.0)].into(),
        [(ImageType::Roof, 1.0), (ImageType::Kitchen, 6.0), (ImageType::Latrine, 3.0)].into(),
    ];
    let r = rank_image_types(&rows);
    let order: Vec<ImageType> = r.iter().map(|x| x.0).collect();
    assert_eq!(order[0], ImageType::Kitchen);
    assert_eq!(r[0].1, 5.0);
    assert_eq!(order[1..3], [ImageType::Roof, ImageType::Latrine]);
    assert_eq!(reduced_predictor_set(&r).unwrap(), PredictorSet::reduced(ImageType::Kitchen).unwrap());
}

#[test]
fn reduced_set_needs_an_indoor_type() {
    let r = vec![(ImageType::Satellite25m, 3.0), (ImageType::Wall, 1.0)];
    assert!(reduced_predictor_set(&r).is_err());
}

#[test]
fn top_bottom_orders_by_average_rank() {
    let mut m: [BTreeMap<String, BTreeMap<ImageType, f64>>; 3] = Default::default();
    for (k, map) in m.iter_mut().enumerate() {
        for i in 0..8 {
            let v = i as f64 + if k == 1 { 0.5 * (i % 2) as f64 } else { 0.0 };
            map.insert(format!("h{i}"), [(ImageType::Kitchen, v)].into());
        }
    }
    m[2].remove("h0");
    let e = top_bottom_images(&m, 2);
    let top: Vec<&str> = e.iter().filter(|x| x.rank_direction == "top").map(|x| x.id.as_str()).collect();
    let bottom: Vec<&str> = e.iter().filter(|x| x.rank_direction == "bottom").map(|x| x.id.as_str()).collect();
    assert_eq!(top, ["h7", "h6"]);
    assert_eq!(bottom, ["h1", "h2"]);
    assert!(e.iter().all(|x| x.image_type == ImageType::Kitchen));
}

#[test]
fn shap_csv_has_one_row_per_type() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("shap.csv");
    let g = GroupedShap {
        household_id: "h1".into(),
        split: "test".into(),
        measure: crate::dataset::SepMeasure::Income,
        base_value: 0.0,
        prediction: 0.0,
        groups: [(ImageType::Roof, 0.25), (ImageType::Kitchen, -1.0)].into(),
    };
    write_shap_csv(&p, &[g]).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("id,split,image_type,grouped_phi,measure\n"));
    assert!(text.contains("h1,test,roof,0.25,income") || text.contains(",0.25,income"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn efficiency_holds(seed in 0u64..10_000, p in 1usize..10, depth in 1usize..6) {
        let tree = random_tree(seed, p, depth);
        let x = random_x(seed, p);
        let (phi0, phi) = treeshap_tree(&tree, &x).unwrap();
        let pred = tree.predict_with(|f| x[f]);
        prop_assert!((phi0 + phi.iter().sum::<f64>() - pred).abs() < 1e-9);
    }

    #[test]
    fn unused_features_get_nothing(seed in 0u64..10_000, depth in 1usize..5) {
        let tree = random_tree(seed, 4, depth);
        let x = random_x(seed, 7);
        let (_, phi) = treeshap_tree(&tree, &x).unwrap();
        for v in &phi[4..] {
            prop_assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn ranking_is_a_permutation(vals in proptest::collection::vec(-5.0f64..5.0, 13 * 4)) {
        let rows: Vec<BTreeMap<ImageType, f64>> = vals
            .chunks(13)
            .map(|c| ImageType::ALL.iter().copied().zip(c.iter().copied()).collect())
            .collect();
        let r = rank_image_types(&rows);
        let mut seen: Vec<ImageType> = r.iter().map(|x| x.0).collect();
        seen.sort();
        prop_assert_eq!(seen, ImageType::ALL.to_vec());
        prop_assert!(r.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}
