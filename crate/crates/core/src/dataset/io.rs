//! Survey CSV, image manifest (JSON lines) and split file formats.
//!
//! Survey columns are `id`, `x`, `y`, then one column per asset variable and
//! one per money source. Money columns carry an `income.` or `expenditure.`
//! prefix; every other column is an asset variable. Empty cells are missing.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CohortSplit, Geocode, HouseholdRecord, ImageRef, ImageType};
use crate::error::{Error, Result};

const INCOME_PREFIX: &str = "income.";
const EXPENDITURE_PREFIX: &str = "expenditure.";

pub fn write_survey_csv(path: &Path, cohort: &[HouseholdRecord]) -> Result<()> {
    let assets: Vec<&String> = cohort
        .iter()
        .flat_map(|r| r.assets.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let income: Vec<&String> = cohort
        .iter()
        .flat_map(|r| r.income_sources.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let expenditure: Vec<&String> = cohort
        .iter()
        .flat_map(|r| r.expenditure_sources.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "x".into(), "y".into()];
    header.extend(assets.iter().map(|a| a.to_string()));
    header.extend(income.iter().map(|s| format!("{INCOME_PREFIX}{s}")));
    header.extend(expenditure.iter().map(|s| format!("{EXPENDITURE_PREFIX}{s}")));
    w.write_record(&header)?;
    for r in cohort {
        let mut row = vec![r.id.clone(), r.geocode.x.to_string(), r.geocode.y.to_string()];
        for a in &assets {
            row.push(r.assets.get(*a).cloned().flatten().unwrap_or_default());
        }
        for s in &income {
            row.push(r.income_sources.get(*s).map(|v| v.to_string()).unwrap_or_default());
        }
        for s in &expenditure {
            row.push(r.expenditure_sources.get(*s).map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_number(path: &Path, id: &str, column: &str, cell: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| {
        Error::validation(format!(
            "{}: household {id}, column `{column}`: `{cell}` is not a number",
            path.display()
        ))
    })
}

/// Parse a survey CSV. Images are attached separately from the manifest.
/// Missing money cells are read as zero.
pub fn read_survey_csv(path: &Path) -> Result<Vec<HouseholdRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    for required in ["id", "x", "y"] {
        if !header.iter().any(|h| h == required) {
            return Err(Error::validation(format!(
                "{}: missing column `{required}`",
                path.display()
            )));
        }
    }
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for row in rdr.records() {
        let row = row?;
        let mut rec = HouseholdRecord {
            id: String::new(),
            geocode: Geocode { x: 0.0, y: 0.0 },
            assets: BTreeMap::new(),
            income_sources: BTreeMap::new(),
            expenditure_sources: BTreeMap::new(),
            images: BTreeMap::new(),
        };
        let id_col = header.iter().position(|h| h == "id").unwrap();
        rec.id = row.get(id_col).unwrap_or_default().to_string();
        if !seen.insert(rec.id.clone()) {
            return Err(Error::validation(format!("duplicate household id `{}`", rec.id)));
        }
        for (col, cell) in header.iter().zip(row.iter()) {
            match col.as_str() {
                "id" => {}
                "x" => rec.geocode.x = parse_number(path, &rec.id, col, cell)?,
                "y" => rec.geocode.y = parse_number(path, &rec.id, col, cell)?,
                c if c.starts_with(INCOME_PREFIX) => {
                    let v = if cell.is_empty() { 0.0 } else { parse_number(path, &rec.id, c, cell)? };
                    rec.income_sources.insert(c[INCOME_PREFIX.len()..].to_string(), v);
                }
                c if c.starts_with(EXPENDITURE_PREFIX) => {
                    let v = if cell.is_empty() { 0.0 } else { parse_number(path, &rec.id, c, cell)? };
                    rec.expenditure_sources.insert(c[EXPENDITURE_PREFIX.len()..].to_string(), v);
                }
                c => {
                    let v = (!cell.is_empty()).then(|| cell.to_string());
                    rec.assets.insert(c.to_string(), v);
                }
            }
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_type: ImageType,
    pub path: Option<PathBuf>,
    pub missing: bool,
}

impl ManifestEntry {
    pub fn image_ref(&self) -> ImageRef {
        match (&self.path, self.missing) {
            (Some(p), false) => ImageRef::Path(p.clone()),
            _ => ImageRef::Missing,
        }
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::validation(format!("{} line {}: {e}", path.display(), n + 1))
        })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn write_split(path: &Path, split: &CohortSplit) -> Result<()> {
    let text = serde_json::to_string_pretty(split)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<CohortSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split: CohortSplit = serde_json::from_str(&text)?;
    let train: std::collections::BTreeSet<_> = split.train_ids.iter().collect();
    if split.test_ids.iter().any(|id| train.contains(id)) {
        return Err(Error::validation(format!(
            "{}: train and test ids overlap",
            path.display()
        )));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<HouseholdRecord> {
        let mk = |id: &str, floor: Option<&str>, salary: f64| HouseholdRecord {
            id: id.into(),
            geocode: Geocode { x: 10.5, y: -3.0 },
            assets: [("floor".to_string(), floor.map(str::to_string))].into_iter().collect(),
            income_sources: [("salary".to_string(), salary)].into_iter().collect(),
            expenditure_sources: [("food".to_string(), 12.25)].into_iter().collect(),
            images: BTreeMap::new(),
        };
        vec![mk("a", Some("cement"), 100.0), mk("b", None, 0.0)]
    }

    #[test]
    fn survey_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("survey.csv");
        let cohort = sample();
        write_survey_csv(&path, &cohort).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,x,y,floor,income.salary,expenditure.food"));
        assert_eq!(read_survey_csv(&path).unwrap(), cohort);
    }

    #[test]
    fn empty_money_cell_reads_as_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("survey.csv");
        fs::write(&path, "id,x,y,tv,income.salary\nh1,0,0,yes,\n").unwrap();
        let r = read_survey_csv(&path).unwrap();
        assert_eq!(r[0].income_sources["salary"], 0.0);
        assert_eq!(r[0].assets["tv"].as_deref(), Some("yes"));
    }

    #[test]
    fn manifest_and_split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry {
                id: "a".into(),
                image_type: ImageType::LightSource,
                path: Some("img/a.png".into()),
                missing: false,
            },
            ManifestEntry { id: "b".into(), image_type: ImageType::Kitchen, path: None, missing: true },
        ];
        let p = dir.path().join("manifest.jsonl");
        write_manifest(&p, &entries).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains(r#""image_type":"light_source""#));
        assert_eq!(read_manifest(&p).unwrap(), entries);
        assert!(entries[1].image_ref().is_missing());

        let split = CohortSplit { seed: 4, train_ids: vec!["a".into()], test_ids: vec!["b".into()] };
        let p = dir.path().join("split.json");
        write_split(&p, &split).unwrap();
        assert_eq!(read_split(&p).unwrap(), split);
    }
}
