//! Model artifacts: a JSON document plus, for tree ensembles, a binary
//! node-array file.
//!
//! Tree file layout (little-endian): `u32` tree count, then per tree a `u32`
//! node count followed by nodes of `i32 feature (-1 = leaf), f64 threshold,
//! u32 left, u32 right, f64 value, f64 cover`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ColumnSource, DecisionTree, ElasticNet, FittedModel, FittedPipeline, GradientBoosting, ModelParams, Node,
    RandomForest,
};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct PipelineDoc {
    params: ModelParams,
    means: Vec<f64>,
    selected: Option<Vec<usize>>,
    columns: Vec<ColumnSource>,
    seed: u64,
    cv_rmse: f64,
    cv_scores: Vec<f64>,
    linear: Option<ElasticNet>,
    base_score: Option<f64>,
    learning_rate: Option<f64>,
    n_trees: usize,
}

pub fn write_trees(path: &Path, trees: &[DecisionTree]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(trees.len() as u32).to_le_bytes());
    for t in trees {
        buf.extend_from_slice(&(t.nodes.len() as u32).to_le_bytes());
        for n in &t.nodes {
            let feature = n.feature.map_or(-1, |f| f as i32);
            buf.extend_from_slice(&feature.to_le_bytes());
            buf.extend_from_slice(&n.threshold.to_le_bytes());
            buf.extend_from_slice(&(n.left as u32).to_le_bytes());
            buf.extend_from_slice(&(n.right as u32).to_le_bytes());
            buf.extend_from_slice(&n.value.to_le_bytes());
            buf.extend_from_slice(&n.cover.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + N)
            .ok_or_else(|| Error::validation(format!("{}: truncated tree file", self.path.display())))?;
        self.pos += N;
        Ok(out.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn read_trees(path: &Path) -> Result<Vec<DecisionTree>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path };
    let n_trees = c.u32()?;
    let mut trees = Vec::with_capacity(n_trees as usize);
    for _ in 0..n_trees {
        let n_nodes = c.u32()?;
        let mut nodes = Vec::with_capacity(n_nodes as usize);
        for _ in 0..n_nodes {
            let feature = i32::from_le_bytes(c.take()?);
            let threshold = c.f64()?;
            let left = c.u32()? as usize;
            let right = c.u32()? as usize;
            let value = c.f64()?;
            let cover = c.f64()?;
            nodes.push(Node {
                feature: (feature >= 0).then_some(feature as usize),
                threshold,
                left,
                right,
                value,
                cover,
            });
        }
        let tree = DecisionTree { nodes };
        tree.validate()?;
        trees.push(tree);
    }
    if c.pos != bytes.len() {
        return Err(Error::validation(format!("{}: trailing bytes in tree file", path.display())));
    }
    Ok(trees)
}

/// Write `json_path` and, for tree ensembles, `trees_path`.
pub fn save_pipeline(json_path: &Path, trees_path: &Path, p: &FittedPipeline) -> Result<()> {
    let (linear, base_score, learning_rate, trees) = match &p.model {
        FittedModel::ElasticNet(m) => (Some(m.clone()), None, None, None),
        FittedModel::RandomForest(m) => (None, None, None, Some(&m.trees)),
        FittedModel::Gbt(m) => (None, Some(m.base_score), Some(m.learning_rate), Some(&m.trees)),
    };
    let doc = PipelineDoc {
        params: p.params.clone(),
        means: p.means.clone(),
        selected: p.selected.clone(),
        columns: p.columns.clone(),
        seed: p.seed,
        cv_rmse: p.cv_rmse,
        cv_scores: p.cv_scores.clone(),
        linear,
        base_score,
        learning_rate,
        n_trees: trees.map_or(0, Vec::len),
    };
    let json = serde_json::to_string_pretty(&doc)?;
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
    if let Some(trees) = trees {
        write_trees(trees_path, trees)?;
    }
    Ok(())
}

pub fn load_pipeline(json_path: &Path, trees_path: &Path) -> Result<FittedPipeline> {
    let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
    let doc: PipelineDoc = serde_json::from_str(&text)?;
    let model = match (&doc.params, doc.linear) {
        (ModelParams::ElasticNet { .. }, Some(m)) => FittedModel::ElasticNet(m),
        (ModelParams::ElasticNet { .. }, None) => {
            return Err(Error::validation(format!("{}: linear model missing", json_path.display())))
        }
        (ModelParams::RandomForest { .. }, _) => FittedModel::RandomForest(RandomForest { trees: read_trees(trees_path)? }),
        (ModelParams::Gbt { .. }, _) => FittedModel::Gbt(GradientBoosting {
            base_score: doc.base_score.unwrap_or_default(),
            learning_rate: doc.learning_rate.unwrap_or(1.0),
            trees: read_trees(trees_path)?,
        }),
    };
    Ok(FittedPipeline {
        params: doc.params,
        means: doc.means,
        selected: doc.selected,
        columns: doc.columns,
        model,
        seed: doc.seed,
        cv_rmse: doc.cv_rmse,
        cv_scores: doc.cv_scores,
    })
}
