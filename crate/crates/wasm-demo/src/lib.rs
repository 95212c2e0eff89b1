//! Browser bindings for a few pieces of `sep-core`.

use std::cell::RefCell;

use nalgebra::DMatrix;
use rand::Rng;
use sep_core::dataset::synth::render_photo;
use sep_core::dataset::ImageType;
use sep_core::mca::{fit_mca, indicator_matrix, CategoricalTable};
use sep_core::rng;
use sep_core::shap::{treeshap_sum, TreeSum};
use sep_core::tabular::{gbt_fit, FittedModel, GradientBoosting};
use serde_json::json;
use wasm_bindgen::prelude::*;

pub const FEATURES: usize = 4;

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// RGBA pixels of a synthetic photograph for latent position `u` in (0, 1).
#[wasm_bindgen]
pub fn render(image_type: &str, u: f64, size: usize, seed: u64) -> Result<Vec<u8>, JsValue> {
    let t: ImageType = image_type.parse().map_err(err)?;
    if !(0.0..=1.0).contains(&u) || !(8..=256).contains(&size) {
        return Err(err("u must lie in [0, 1] and size in 8..=256"));
    }
    let mut g = rng::stream(seed, "demo-photo", t.index() as u64);
    let img = render_photo(&mut g, t, u, size);
    Ok(img.pixels.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
}

#[wasm_bindgen]
pub fn image_types() -> Vec<String> {
    ImageType::photos().map(|t| t.name().to_string()).collect()
}

/// `y = 2 x0 - x1^2 + 0.5 x2 x3 + noise` on `[-1, 1]^4`.
pub fn demo_model(rounds: usize) -> GradientBoosting {
    let mut g = rng::stream(17, "demo-data", 0);
    let n = 400;
    let x: DMatrix<f64> = DMatrix::from_fn(n, FEATURES, |_, _| g.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..n)
        .map(|i| 2.0 * x[(i, 0)] - x[(i, 1)].powi(2) + 0.5 * x[(i, 2)] * x[(i, 3)] + g.random_range(-0.1..0.1))
        .collect();
    gbt_fit(&x, &y, rounds, 0.3, 1.0, 0.0, 3, 0).expect("fixed demo data")
}

thread_local! {
    static MODEL: RefCell<Option<FittedModel>> = const { RefCell::new(None) };
}

/// Exact SHAP values of the boosted demo model at `x`, as JSON
/// `{prediction, base, phi}`.
#[wasm_bindgen]
pub fn explain(x: Vec<f64>) -> Result<String, JsValue> {
    if x.len() != FEATURES {
        return Err(err(format!("expected {FEATURES} values")));
    }
    MODEL.with(|m| {
        let mut m = m.borrow_mut();
        let model = m.get_or_insert_with(|| FittedModel::Gbt(demo_model(40)));
        let sum = TreeSum::from_model(model).map_err(err)?;
        let (base, phi) = treeshap_sum(&sum, &x).map_err(err)?;
        Ok(json!({ "prediction": sum.predict(&x), "base": base, "phi": phi }).to_string())
    })
}

/// MCA of a CSV table (`id,var,...` header, one household per line). Returns
/// JSON with singular values, inertia shares and first-dimension scores.
#[wasm_bindgen]
pub fn mca(csv_text: &str) -> Result<String, JsValue> {
    let mut lines = csv_text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header: Vec<String> = lines.next().ok_or_else(|| err("empty table"))?.split(',').map(|s| s.trim().to_string()).collect();
    if header.len() < 2 {
        return Err(err("need an id column and at least one variable"));
    }
    let (mut ids, mut rows) = (Vec::new(), Vec::new());
    for (k, line) in lines.enumerate() {
        let cells: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if cells.len() != header.len() {
            return Err(err(format!("line {}: {} cells, header has {}", k + 2, cells.len(), header.len())));
        }
        ids.push(cells[0].clone());
        rows.push(cells[1..].to_vec());
    }
    let table = CategoricalTable { ids, variables: header[1..].to_vec(), rows };
    let model = fit_mca(&indicator_matrix(&table).map_err(err)?).map_err(err)?;
    let scores: Vec<f64> = (0..model.ids.len()).map(|i| model.row_principal[(i, 0)]).collect();
    Ok(json!({
        "singular_values": model.singular_values,
        "inertia_shares": model.inertia_shares,
        "ids": model.ids,
        "scores": scores,
    })
    .to_string())
}
