//! Acceptance suite. Run with `cargo test -p sep-core --test acceptance`.
//! Prints one PASS/FAIL line per criterion and exits non-zero on failure.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sep_core::dataset::{ImageGroup, ImageType, SepMeasure};
use sep_core::extractor::{backward, build_network, forward, ConvBlock, NetworkParams, NetworkSpec, PenultimateActivation};
use sep_core::imagery::NormImage;
use sep_core::mca::{fit_mca, indicator_matrix, CategoricalTable};
use sep_core::pipeline::{run, PipelineConfig, Report, Stage};
use sep_core::shap::{brute_force_shap, treeshap_sum, TreeSum};
use sep_core::stats;
use sep_core::tabular::{elasticnet_fit, gbt_fit, Algorithm, DecisionTree, FittedModel, Node, PredictorSet};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1: MCA

fn random_table(rng: &mut ChaCha8Rng) -> CategoricalTable {
    loop {
        let n = rng.random_range(3..=10);
        let q = rng.random_range(2..=3);
        let mut budget = 8;
        let mut sizes = Vec::new();
        for k in 0..q {
            let left = q - k - 1;
            let c = rng.random_range(2..=(budget - 2 * left).min(4));
            budget -= c;
            sizes.push(c);
        }
        let rows: Vec<Vec<String>> =
            (0..n).map(|_| sizes.iter().map(|&c| format!("c{}", rng.random_range(0..c))).collect()).collect();
        let informative = (0..q).all(|v| rows.iter().map(|r| &r[v]).collect::<BTreeSet<_>>().len() >= 2);
        if informative {
            return CategoricalTable {
                ids: (0..n).map(|i| format!("r{i}")).collect(),
                variables: (0..q).map(|v| format!("v{v}")).collect(),
                rows,
            };
        }
    }
}

/// Indicator matrix built directly from the labels, then the eigenvalues of
/// `S^T S` for `S = D_r^-1/2 (P - r c^T) D_c^-1/2`, descending.
fn mca_eigen_oracle(t: &CategoricalTable) -> Vec<f64> {
    let mut cols: Vec<(usize, String)> = Vec::new();
    for v in 0..t.variables.len() {
        let cats: BTreeSet<&String> = t.rows.iter().map(|r| &r[v]).collect();
        cols.extend(cats.into_iter().map(|c| (v, c.clone())));
    }
    let n = t.rows.len();
    let z = DMatrix::from_fn(n, cols.len(), |i, j| f64::from(t.rows[i][cols[j].0] == cols[j].1));
    let p = &z / z.sum();
    let r: Vec<f64> = p.row_iter().map(|row| row.sum()).collect();
    let c: Vec<f64> = p.column_iter().map(|col| col.sum()).collect();
    let s = DMatrix::from_fn(n, cols.len(), |i, j| (p[(i, j)] - r[i] * c[j]) / (r[i] * c[j]).sqrt());
    let mut ev: Vec<f64> = SymmetricEigen::new(s.transpose() * &s).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let table = random_table(&mut rng);
        let model = fit_mca(&indicator_matrix(&table).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let ev = mca_eigen_oracle(&table);
        let kept = model.singular_values.len();
        for (d, s) in model.singular_values.iter().enumerate() {
            worst = worst.max((s - ev[d].max(0.0).sqrt()).abs());
        }
        ensure(ev[kept..].iter().all(|l| l.abs() < 1e-10), || format!("table {k}: dimension missed"))?;
        let share_sum: f64 = model.inertia_shares.iter().sum();
        ensure((share_sum - 1.0).abs() < 1e-10, || format!("table {k}: shares sum to {share_sum}"))?;
    }
    ensure(worst < 1e-10, || format!("max singular value error {worst:e}"))?;
    Ok(format!("50 tables, max |sigma - sqrt(lambda)| = {worst:.1e}"))
}

// ---------------------------------------------------------------- 2: CNN gradients

fn bce(params: &NetworkParams, images: &[NormImage], labels: &[[bool; 3]]) -> f64 {
    let probs = forward(params, images).unwrap().probabilities;
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        for k in 0..3 {
            let q = p[k].clamp(1e-7, 1.0 - 1e-7);
            total -= if y[k] { q.ln() } else { (1.0 - q).ln() };
        }
    }
    total / (3 * probs.len()) as f64
}

fn gradient_case(spec: &NetworkSpec, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = build_network(spec).unwrap();
    for b in params.biases.iter_mut().flatten() {
        *b = rng.random_range(-0.1..0.1);
    }
    let images: Vec<NormImage> = (0..3)
        .map(|_| NormImage {
            width: spec.width,
            height: spec.height,
            data: (0..spec.width * spec.height * 3).map(|_| rng.random()).collect(),
        })
        .collect();
    let labels: Vec<[bool; 3]> = (0..3).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let grads = backward(&params, &images, &labels).unwrap();
    let h = 1e-5;
    let (mut worst, mut count) = (0.0f64, 0);
    for layer in 0..params.layers.len() {
        for bias in [false, true] {
            let len = if bias { params.biases[layer].len() } else { params.weights[layer].len() };
            for i in 0..len {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    if bias {
                        p.biases[layer][i] += delta;
                    } else {
                        p.weights[layer][i] += delta;
                    }
                    bce(&p, &images, &labels)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let analytic = if bias { grads.biases[layer][i] } else { grads.weights[layer][i] };
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
                count += 1;
            }
        }
    }
    (worst, count)
}

fn criterion_2() -> Outcome {
    let net = |h, w, conv: &[(usize, usize)], dense: &[usize], penultimate| NetworkSpec {
        height: h,
        width: w,
        conv: conv.iter().map(|&(filters, kernel)| ConvBlock { filters, kernel }).collect(),
        dense: dense.to_vec(),
        penultimate,
        seed: h as u64 * 31 + w as u64,
    };
    let cases = [
        net(6, 6, &[(2, 3)], &[4], PenultimateActivation::PostRelu),
        net(8, 8, &[(3, 3), (2, 1)], &[5, 3], PenultimateActivation::PostRelu),
        net(5, 7, &[(2, 3)], &[3], PenultimateActivation::PreRelu),
        net(4, 4, &[], &[6], PenultimateActivation::PostRelu),
    ];
    let (mut worst, mut total) = (0.0f64, 0);
    for (i, spec) in cases.iter().enumerate() {
        let (w, n) = gradient_case(spec, 900 + i as u64);
        worst = worst.max(w);
        total += n;
    }
    ensure(total >= 200, || format!("only {total} parameters checked"))?;
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("{total} parameters, max relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- 3: TreeSHAP

fn grow(rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>, p: usize, depth: usize, max_depth: usize, cover: f64) -> usize {
    let idx = nodes.len();
    if depth == max_depth || (depth > 0 && rng.random_bool(0.2)) {
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

/// Cover-weighted expectation of the tree given the features in `known`.
fn conditional(tree: &DecisionTree, node: usize, x: &[f64], known: &[bool]) -> f64 {
    let n = &tree.nodes[node];
    match n.feature {
        None => n.value,
        Some(f) if known[f] => conditional(tree, if x[f] <= n.threshold { n.left } else { n.right }, x, known),
        Some(_) => {
            let (l, r) = (&tree.nodes[n.left], &tree.nodes[n.right]);
            (l.cover * conditional(tree, n.left, x, known) + r.cover * conditional(tree, n.right, x, known)) / n.cover
        }
    }
}

/// Shapley values by enumerating every coalition.
fn shapley_oracle(trees: &[(&DecisionTree, f64)], base: f64, x: &[f64]) -> (f64, Vec<f64>) {
    let p = x.len();
    let value = |mask: usize| {
        let known: Vec<bool> = (0..p).map(|j| mask >> j & 1 == 1).collect();
        base + trees.iter().map(|(t, w)| w * conditional(t, 0, x, &known)).sum::<f64>()
    };
    let values: Vec<f64> = (0..1usize << p).map(value).collect();
    let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
    let mut phi = vec![0.0; p];
    for (j, out) in phi.iter_mut().enumerate() {
        for mask in 0..1usize << p {
            if mask >> j & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            *out += fact(s) * fact(p - s - 1) / fact(p) * (values[mask | 1 << j] - values[mask]);
        }
    }
    (values[0], phi)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst, mut worst_acc) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let p = rng.random_range(1..=12);
        let depth = rng.random_range(1..=4);
        let mut nodes = Vec::new();
        let cover = rng.random_range(10.0..100.0);
        grow(&mut rng, &mut nodes, p, 0, depth, cover);
        let tree = DecisionTree { nodes };
        let x: Vec<f64> = (0..p).map(|_| rng.random_range(-1.2..1.2)).collect();
        let sum = TreeSum::single(&tree);
        let (phi0, phi) = treeshap_sum(&sum, &x).map_err(|e| e.to_string())?;
        let (o0, ophi) = shapley_oracle(&[(&tree, 1.0)], 0.0, &x);
        let (b0, bphi) = brute_force_shap(&sum, &x).map_err(|e| e.to_string())?;
        worst = worst.max(max_diff(&phi, &ophi)).max(max_diff(&bphi, &ophi)).max((phi0 - o0).abs()).max((b0 - o0).abs());
        let pred = tree.predict_with(|f| x[f]);
        worst_acc = worst_acc.max((phi0 + phi.iter().sum::<f64>() - pred).abs());
    }
    for k in 0..20 {
        let p = rng.random_range(1..=5);
        let n = 40;
        let xs: DMatrix<f64> = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n).map(|i| xs[(i, 0)] * 2.0 - xs[(i, p - 1)].powi(2) + rng.random_range(-0.1..0.1)).collect();
        let model = gbt_fit(&xs, &y, 3, 0.3, 1.0, 0.0, 3, k).map_err(|e| e.to_string())?;
        let fitted = FittedModel::Gbt(model.clone());
        let sum = TreeSum::from_model(&fitted).map_err(|e| e.to_string())?;
        let trees: Vec<(&DecisionTree, f64)> = model.trees.iter().map(|t| (t, model.learning_rate)).collect();
        let preds = fitted.predict(&xs);
        for i in 0..5 {
            let x: Vec<f64> = xs.row(i).iter().copied().collect();
            let (phi0, phi) = treeshap_sum(&sum, &x).map_err(|e| e.to_string())?;
            let (o0, ophi) = shapley_oracle(&trees, model.base_score, &x);
            worst = worst.max(max_diff(&phi, &ophi)).max((phi0 - o0).abs());
            worst_acc = worst_acc.max((phi0 + phi.iter().sum::<f64>() - preds[i]).abs());
        }
    }
    ensure(worst < 1e-10, || format!("max |treeshap - oracle| = {worst:e}"))?;
    ensure(worst_acc < 1e-8, || format!("local accuracy off by {worst_acc:e}"))?;
    Ok(format!("100 trees + 20 GBT ensembles, max |dphi| = {worst:.1e}, local accuracy {worst_acc:.1e}"))
}

// ---------------------------------------------------------------- 4: elastic net

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (n, p) = (60, 6);
    let x = DMatrix::from_fn(n, p, |_, j| rng.random_range(-1.0..1.0) * (1.0 + j as f64));
    let y: Vec<f64> =
        (0..n).map(|i| 1.5 + (0..p).map(|j| x[(i, j)] * (j as f64 - 2.0)).sum::<f64>() + rng.random_range(-0.5..0.5)).collect();

    let a = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let beta = (a.transpose() * &a).cholesky().ok_or("singular design")?.solve(&(a.transpose() * DVector::from_vec(y.clone())));
    let ols = elasticnet_fit(&x, &y, 0.0, 0.5, 1e-13, 100_000).map_err(|e| e.to_string())?;
    let mut ols_err = (ols.intercept - beta[0]).abs();
    for j in 0..p {
        ols_err = ols_err.max((ols.coef[j] - beta[j + 1]).abs());
    }
    ensure(ols_err < 1e-6, || format!("alpha = 0 differs from OLS by {ols_err:e}"))?;

    let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n as f64).collect();
    let sd: Vec<f64> =
        x.column_iter().zip(&mean).map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt()).collect();
    let tol = 1e-6;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..20 {
        let alpha = 10f64.powf(rng.random_range(-3.0..0.5));
        let l1 = rng.random_range(0.0..=1.0);
        let m = elasticnet_fit(&x, &y, alpha, l1, tol, 100_000).map_err(|e| e.to_string())?;
        let pred = m.predict(&x);
        let ybar = stats::mean(&y);
        let pbar = stats::mean(&pred);
        let r: Vec<f64> = (0..n).map(|i| (y[i] - ybar) - (pred[i] - pbar)).collect();
        let mut kkt: f64 = 0.0;
        for j in 0..p {
            let b = m.coef[j] * sd[j];
            let g = (0..n).map(|i| (x[(i, j)] - mean[j]) / sd[j] * r[i]).sum::<f64>() / n as f64 - alpha * (1.0 - l1) * b;
            let v = if b != 0.0 { (g - alpha * l1 * b.signum()).abs() } else { (g.abs() - alpha * l1).max(0.0) };
            kkt = kkt.max(v);
        }
        worst_ratio = worst_ratio.max(kkt / tol);
    }
    ensure(worst_ratio <= 10.0, || format!("KKT residual reached {worst_ratio:.2} x tol"))?;
    Ok(format!("OLS error {ols_err:.1e}; worst KKT residual {worst_ratio:.2} x tol over 20 settings"))
}

// ---------------------------------------------------------------- 5-7: end to end

fn planted_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(dir, 2024);
    cfg.synth.default_signal = 0.3;
    for (t, s) in [
        (ImageType::Satellite25m, 0.25),
        (ImageType::Satellite100m, 0.2),
        (ImageType::FrontDoor, 0.45),
        (ImageType::Wall, 0.45),
        (ImageType::StreetView, 0.4),
        (ImageType::Kitchen, 0.95),
    ] {
        cfg.synth.signal.insert(t, s);
    }
    cfg.extractor.train.epochs = 3;
    cfg.offtheshelf.enabled = true;
    cfg.offtheshelf.width = 64;
    cfg.search.n_iter = 3;
    cfg.search.space.rf_n_trees = [60, 100];
    cfg.search.space.gbt_n_rounds = [50, 120];
    cfg
}

fn find<'a>(
    list: &'a [sep_core::tabular::EvaluationReport],
    m: SepMeasure,
    set: PredictorSet,
    alg: Algorithm,
) -> Result<&'a sep_core::tabular::EvaluationReport, String> {
    list.iter()
        .find(|e| e.measure == m.name() && e.predictor_set == set.name() && e.algorithm == alg)
        .ok_or_else(|| format!("no {m} {set} {alg} evaluation"))
}

fn read_report(dir: &Path) -> Result<Report, String> {
    let text = std::fs::read_to_string(dir.join("report/report.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn criterion_5(report: &Report) -> Outcome {
    let defaults = PipelineConfig::new("unused", 0);
    let c = &report.constants;
    let got = [
        ("image types", ImageType::ALL.len(), 13),
        ("image types in report", c.n_image_types, 13),
        ("complete width", c.complete_width, 390),
        ("default train split", defaults.split.n_train, 800),
        ("default test split", defaults.split.n_test, 175),
        ("train split", c.n_train, 800),
        ("test split", c.n_test, 175),
        ("fitted models", c.n_fitted_models, 27),
        ("default k_folds", defaults.search.k_folds, 10),
        ("k_folds", c.k_folds, 10),
        ("grouped SHAP per household", c.grouped_shap_per_household, 13),
    ];
    let wrong: Vec<String> =
        got.iter().filter(|(_, a, b)| a != b).map(|(name, a, b)| format!("{name}: {a} != {b}")).collect();
    ensure(wrong.is_empty(), || wrong.join("; "))?;
    Ok("13 types, width 390, 800/175, 27 models, 10 folds, 13 groups".into())
}

fn criterion_6(report: &Report) -> Outcome {
    let ev = &report.evaluations;
    let rf = Algorithm::RandomForest;
    let m = SepMeasure::Assets;
    let complete = find(ev, m, PredictorSet::Complete, rf)?;
    let r = complete.pearson.ok_or("undefined r")?;
    ensure(r >= 0.75, || format!("(a) complete RF r = {r:.3}"))?;
    let sat = find(ev, m, PredictorSet::Satellite, rf)?.rmse;
    let out = find(ev, m, PredictorSet::Outdoor, rf)?.rmse;
    ensure(sat > out && out > complete.rmse, || {
        format!("(b) RMSE satellite {sat:.4}, outdoor {out:.4}, complete {:.4}", complete.rmse)
    })?;
    let reduced = report.reduced.iter().find(|r| r.measure == m).ok_or("no reduced model")?;
    let red = reduced.reduced.report.rmse;
    ensure(red <= 1.05 * complete.rmse, || format!("(b) reduced RMSE {red:.4} vs complete {:.4}", complete.rmse))?;
    let ranking = &report.shap.get(&m).ok_or("no ranking")?.train;
    let first_indoor = ranking.iter().find(|e| e.image_type.group() == ImageGroup::Indoor).ok_or("no indoor type")?;
    ensure(first_indoor.image_type == ImageType::Kitchen, || {
        format!("(c) first indoor type is {}", first_indoor.image_type)
    })?;
    Ok(format!(
        "r = {r:.3}; RMSE sat {sat:.3} > out {out:.3} > complete {:.3}; reduced {red:.3} ({}); top indoor {}",
        complete.rmse, reduced.reduced.report.predictor_set, first_indoor.image_type
    ))
}

fn criterion_7(report: &Report) -> Outcome {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for m in SepMeasure::ALL {
        let tuned = find(&report.evaluations, m, PredictorSet::Complete, Algorithm::RandomForest)?.pearson.ok_or("undefined r")?;
        let ots = find(&report.offtheshelf, m, PredictorSet::Complete, Algorithm::RandomForest)?.pearson.ok_or("undefined r")?;
        parts.push(format!("{m} {ots:.3} vs {tuned:.3}"));
        if (ots - tuned).abs() > 0.1 {
            failures.push(m.name());
        }
    }
    ensure(failures.is_empty(), || format!("off by more than 0.1 for {failures:?}: {}", parts.join(", ")))?;
    Ok(format!("off-the-shelf vs fine-tuned r: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 8: determinism

fn criterion_8() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = PipelineConfig::new(root.path().join(name), 5);
        cfg.synth.n_households = 120;
        cfg.synth.image_size = 24;
        cfg.split.n_train = 80;
        cfg.split.n_test = 30;
        cfg.preprocess.image_size = 24;
        cfg.extractor.train.epochs = 2;
        cfg.extractor.train.batch_size = 16;
        cfg.search.n_iter = 2;
        cfg.search.k_folds = 3;
        cfg.search.space.rf_n_trees = [20, 30];
        cfg.search.space.gbt_n_rounds = [20, 30];
        run(Stage::All, &cfg, false).map_err(|e| e.to_string())?;
        reports.push(std::fs::read(root.path().join(name).join("report/report.json")).map_err(|e| e.to_string())?);
    }
    ensure(reports[0] == reports[1], || "report JSON differs between runs".into())?;
    Ok(format!("two runs in separate directories, {} identical bytes", reports[0].len()))
}

// ---------------------------------------------------------------- 9: metrics

fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - sx / n) * (b - sy / n)).sum();
    let sxx: f64 = x.iter().map(|a| (a - sx / n).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - sy / n).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|a| {
            let below = x.iter().filter(|b| *b < a).count() as f64;
            let equal = x.iter().filter(|b| *b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (mut worst, mut tied) = (0.0f64, 0);
    for k in 0..1000 {
        let n = rng.random_range(2..60);
        let coarse = k % 3 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if coarse {
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(-10.0..10.0)
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|a| 0.5 * a + draw(&mut rng)).collect();
        let rmse = (x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64).sqrt();
        worst = worst.max((stats::rmse(&x, &y) - rmse).abs());
        let pairs = [
            (stats::pearson(&x, &y), oracle_pearson(&x, &y)),
            (stats::spearman(&x, &y), oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y))),
        ];
        for (got, want) in pairs {
            match (got, want) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return Err(format!("pair {k}: defined-ness differs ({got:?} vs {want:?})")),
            }
        }
        if x.iter().map(|v| v.to_bits()).collect::<BTreeSet<_>>().len() < n {
            tied += 1;
        }
    }
    ensure(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 pairs ({tied} with ties), max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- driver

fn attempt(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let mut results: BTreeMap<u32, (Outcome, f64)> = BTreeMap::new();
    let timed = |f: fn() -> Outcome| {
        let start = Instant::now();
        let out = attempt(f);
        (out, start.elapsed().as_secs_f64())
    };
    for (k, f) in [(1, criterion_1 as fn() -> Outcome), (2, criterion_2), (3, criterion_3), (4, criterion_4), (9, criterion_9)] {
        results.insert(k, timed(f));
    }

    let dir = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let planted = attempt(|| {
        run(Stage::All, &planted_config(dir.path()), false).map_err(|e| e.to_string())?;
        Ok(String::new())
    })
    .and_then(|_| read_report(dir.path()));
    let run_time = start.elapsed().as_secs_f64();
    for (k, check) in [(5, criterion_5 as fn(&Report) -> Outcome), (6, criterion_6), (7, criterion_7)] {
        let out = match &planted {
            Ok(report) => attempt(|| check(report)),
            Err(e) => Err(format!("planted run failed: {e}")),
        };
        results.insert(k, (out, run_time));
    }
    results.insert(8, timed(criterion_8));

    let mut failed = 0;
    for (k, (out, secs)) in &results {
        match out {
            Ok(msg) => println!("criterion {k}: PASS ({secs:.1}s) {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {k}: FAIL ({secs:.1}s) {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
