use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::config::{PipelineConfig, Split};
use super::report::*;
use super::Stage;
use crate::dataset::synth::{generate_synthetic_cohort, SyntheticCohort};
use crate::dataset::{
    binarize_labels, compute_sep_measures, read_manifest, read_split, read_survey_csv, train_test_split, write_manifest,
    write_split, write_survey_csv, BinaryLabels, CohortSplit, ImageGroup, ImageType, ManifestEntry, SepMeasure,
    SepMeasures,
};
use crate::error::{Error, Result};
use crate::extractor::{
    forward, load_checkpoint, offtheshelf_network, save_checkpoint, train_extractor, write_training_log, FeatureVector,
    NetworkParams,
};
use crate::imagery::{crop_buffer, percentile_clip, read_png, read_raster, resize, write_png, write_raster, NormImage};
use crate::mca::column_principal_coordinates;
use crate::rng::derive_seed;
use crate::shap::{
    group_by_image, rank_image_types, reduced_predictor_set, shap_for_table, top_bottom_images, write_shap_csv,
    GroupedShap,
};
use crate::tabular::{
    assemble_feature_table, evaluate, load_pipeline, randomized_search_cv, save_pipeline, write_feature_table_csv,
    write_outcome_csv, write_predictions_csv, Algorithm, FeatureStore, FeatureTable, FittedPipeline, PredictorSet,
};
use crate::par;

/// Where every artifact lives under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir_name())
    }

    fn at(&self, stage: Stage, file: &str) -> PathBuf {
        self.stage_dir(stage).join(file)
    }

    pub fn survey(&self, cfg: &PipelineConfig) -> PathBuf {
        cfg.inputs.cohort.clone().unwrap_or_else(|| self.at(Stage::Synth, "survey.csv"))
    }

    pub fn image_manifest(&self, cfg: &PipelineConfig) -> PathBuf {
        cfg.inputs.manifest.clone().unwrap_or_else(|| self.at(Stage::Synth, "manifest.jsonl"))
    }

    pub fn raster(&self, cfg: &PipelineConfig) -> PathBuf {
        cfg.inputs.raster.clone().unwrap_or_else(|| self.at(Stage::Synth, "scene.png"))
    }

    pub fn measures(&self) -> PathBuf {
        self.at(Stage::Sep, "measures.csv")
    }

    pub fn exploratory(&self) -> PathBuf {
        self.at(Stage::Sep, "exploratory.json")
    }

    pub fn split(&self) -> PathBuf {
        self.at(Stage::Split, "split.json")
    }

    pub fn train_labels(&self) -> PathBuf {
        self.at(Stage::Split, "labels_train.json")
    }

    pub fn preprocessed_manifest(&self) -> PathBuf {
        self.at(Stage::Preprocess, "manifest.jsonl")
    }

    pub fn checkpoint(&self, t: ImageType) -> PathBuf {
        self.at(Stage::TrainExtractor, &format!("{t}.ckpt"))
    }

    pub fn extractor_summary(&self) -> PathBuf {
        self.at(Stage::TrainExtractor, "summary.json")
    }

    pub fn features(&self, t: ImageType, offtheshelf: bool) -> PathBuf {
        let dir = self.stage_dir(Stage::Extract);
        if offtheshelf {
            dir.join("offtheshelf").join(format!("{t}.csv"))
        } else {
            dir.join(format!("{t}.csv"))
        }
    }

    pub fn fit_summary(&self) -> PathBuf {
        self.at(Stage::Fit, "summary.json")
    }

    pub fn ranking(&self) -> PathBuf {
        self.at(Stage::Explain, "ranking.json")
    }

    pub fn shap_csv(&self) -> PathBuf {
        self.at(Stage::Explain, "shap.csv")
    }

    pub fn top_bottom(&self) -> PathBuf {
        self.at(Stage::Explain, "top_bottom.jsonl")
    }

    pub fn reduce_summary(&self) -> PathBuf {
        self.at(Stage::Reduce, "summary.json")
    }

    pub fn report(&self) -> PathBuf {
        self.at(Stage::Report, "report.json")
    }

    fn relative(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }
}

/// An artifact a stage reads, and the stage that produces it (`None` for
/// external inputs).
pub struct Input {
    pub path: PathBuf,
    pub producer: Option<Stage>,
}

fn input(path: PathBuf, producer: Stage, cfg: &PipelineConfig) -> Input {
    let external = producer == Stage::Synth && !cfg.uses_synthetic_inputs();
    Input { path, producer: (!external).then_some(producer) }
}

pub fn stage_inputs(stage: Stage, cfg: &PipelineConfig, l: &Layout) -> Vec<Input> {
    let i = |path, producer| input(path, producer, cfg);
    match stage {
        Stage::Synth => vec![],
        Stage::Sep => vec![i(l.survey(cfg), Stage::Synth)],
        Stage::Split => vec![i(l.measures(), Stage::Sep)],
        Stage::Preprocess => {
            let raster = l.raster(cfg);
            let mut v = vec![
                i(l.survey(cfg), Stage::Synth),
                i(l.image_manifest(cfg), Stage::Synth),
                i(raster.with_extension("json"), Stage::Synth),
                i(raster, Stage::Synth),
            ];
            if cfg.uses_synthetic_inputs() {
                v.push(i(l.stage_dir(Stage::Synth).join("images"), Stage::Synth));
            }
            v
        }
        Stage::TrainExtractor => vec![
            i(l.stage_dir(Stage::Preprocess), Stage::Preprocess),
            i(l.split(), Stage::Split),
            i(l.train_labels(), Stage::Split),
        ],
        Stage::Extract => {
            vec![i(l.stage_dir(Stage::Preprocess), Stage::Preprocess), i(l.stage_dir(Stage::TrainExtractor), Stage::TrainExtractor)]
        }
        Stage::Fit => vec![i(l.stage_dir(Stage::Extract), Stage::Extract), i(l.measures(), Stage::Sep), i(l.split(), Stage::Split)],
        Stage::Explain => vec![
            i(l.stage_dir(Stage::Fit), Stage::Fit),
            i(l.stage_dir(Stage::Extract), Stage::Extract),
            i(l.measures(), Stage::Sep),
            i(l.split(), Stage::Split),
            i(l.preprocessed_manifest(), Stage::Preprocess),
        ],
        Stage::Reduce => vec![
            i(l.ranking(), Stage::Explain),
            i(l.fit_summary(), Stage::Fit),
            i(l.stage_dir(Stage::Extract), Stage::Extract),
            i(l.measures(), Stage::Sep),
            i(l.split(), Stage::Split),
        ],
        Stage::Report => vec![
            i(l.exploratory(), Stage::Sep),
            i(l.split(), Stage::Split),
            i(l.extractor_summary(), Stage::TrainExtractor),
            i(l.stage_dir(Stage::Extract), Stage::Extract),
            i(l.fit_summary(), Stage::Fit),
            i(l.ranking(), Stage::Explain),
            i(l.reduce_summary(), Stage::Reduce),
        ],
        Stage::All => vec![],
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

pub fn write_measures_csv(path: &Path, sep: &BTreeMap<String, SepMeasures>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "assets", "expenditure", "income"])?;
    for (id, m) in sep {
        w.write_record([id.clone(), m.assets.to_string(), m.expenditure.to_string(), m.income.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_measures_csv(path: &Path) -> Result<BTreeMap<String, SepMeasures>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        let num = |k: usize| -> Result<f64> {
            row.get(k)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::validation(format!("{}: bad row {:?}", path.display(), row)))
        };
        out.insert(row[0].to_string(), SepMeasures { assets: num(1)?, expenditure: num(2)?, income: num(3)? });
    }
    Ok(out)
}

/// `id,missing,f0,...`; missing rows leave the values empty.
pub fn write_features_csv(path: &Path, features: &[FeatureVector]) -> Result<()> {
    let width = features.iter().find(|f| !f.missing).map_or(0, |f| f.values.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "missing".into()];
    header.extend((0..width).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for f in features {
        let mut row = vec![f.household_id.clone(), f.missing.to_string()];
        if f.missing {
            row.extend(std::iter::repeat_n(String::new(), width));
        } else {
            row.extend(f.values.iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features_csv(path: &Path, image_type: ImageType) -> Result<Vec<FeatureVector>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let missing = &row[1] == "true";
        let values = if missing {
            Vec::new()
        } else {
            row.iter()
                .skip(2)
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?
        };
        out.push(FeatureVector { household_id: row[0].to_string(), image_type, values, missing });
    }
    Ok(out)
}

fn load_store(l: &Layout, offtheshelf: bool) -> Result<FeatureStore> {
    let mut store = FeatureStore::new();
    for t in ImageType::ALL {
        for f in read_features_csv(&l.features(t, offtheshelf), t)? {
            store.entry(f.household_id.clone()).or_default().insert(t, f);
        }
    }
    Ok(store)
}

fn outcome(sep: &BTreeMap<String, SepMeasures>, m: SepMeasure) -> BTreeMap<String, f64> {
    sep.iter().map(|(id, s)| (id.clone(), s.get(m))).collect()
}

fn by_key(entries: Vec<ManifestEntry>) -> BTreeMap<(String, ImageType), ManifestEntry> {
    entries.into_iter().map(|e| ((e.id.clone(), e.image_type), e)).collect()
}

pub struct Context<'a> {
    pub cfg: &'a PipelineConfig,
    pub layout: Layout,
}

impl Context<'_> {
    fn seed(&self, purpose: &str, index: u64) -> u64 {
        derive_seed(self.cfg.seed, purpose, index)
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Synth => self.synth(),
            Stage::Sep => self.sep(),
            Stage::Split => self.split(),
            Stage::Preprocess => self.preprocess(),
            Stage::TrainExtractor => self.train_extractors(),
            Stage::Extract => self.extract(),
            Stage::Fit => self.fit(),
            Stage::Explain => self.explain(),
            Stage::Reduce => self.reduce(),
            Stage::Report => self.report(),
            Stage::All => unreachable!("`all` is expanded by the driver"),
        }
    }

    fn synth(&self) -> Result<()> {
        if !self.cfg.uses_synthetic_inputs() {
            return Err(Error::validation("external inputs are configured; the synth stage does not apply"));
        }
        let dir = self.layout.stage_dir(Stage::Synth);
        let cohort = generate_synthetic_cohort(&self.cfg.synth, self.seed("synth", 0))?;
        write_survey_csv(&dir.join("survey.csv"), &cohort.households)?;
        for t in ImageType::photos() {
            mkdir(&dir.join("images").join(t.name()))?;
        }
        let jobs: Vec<usize> = (0..cohort.households.len()).collect();
        par::map(jobs, |i| -> Result<()> {
            let id = &cohort.households[i].id;
            for (t, img) in &cohort.photos[i] {
                write_png(&dir.join(SyntheticCohort::photo_path(*t, id)), img)?;
            }
            Ok(())
        })
        .into_iter()
        .collect::<Result<()>>()?;
        let mut entries = Vec::new();
        for (h, photos) in cohort.households.iter().zip(&cohort.photos) {
            for t in ImageType::photos() {
                let present = photos.contains_key(&t);
                entries.push(ManifestEntry {
                    id: h.id.clone(),
                    image_type: t,
                    path: present.then(|| SyntheticCohort::photo_path(t, &h.id)),
                    missing: !present,
                });
            }
        }
        write_manifest(&dir.join("manifest.jsonl"), &entries)?;
        write_raster(&dir.join("scene.png"), &cohort.scene)?;
        let mut w = csv::Writer::from_path(dir.join("latent.csv"))?;
        w.write_record(["id", "latent"])?;
        for (h, z) in cohort.households.iter().zip(&cohort.latent) {
            w.write_record([h.id.clone(), z.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir.join("latent.csv"), e))
    }

    fn sep(&self) -> Result<()> {
        let dir = self.layout.stage_dir(Stage::Sep);
        let cohort = read_survey_csv(&self.layout.survey(self.cfg))?;
        let anchor = (self.cfg.sep.anchor_variable.as_str(), self.cfg.sep.anchor_category.as_str());
        let (sep, model) = compute_sep_measures(&cohort, anchor)?;
        write_measures_csv(&self.layout.measures(), &sep)?;
        let columns = column_principal_coordinates(&model, Some(anchor))?;
        columns.write_csv(&dir.join("mca_columns.csv"), 2)?;
        write_json(
            &dir.join("mca_inertia.json"),
            &serde_json::json!({
                "singular_values": model.singular_values,
                "raw": columns.inertia_shares,
                "benzecri": columns.benzecri_shares,
                "greenacre": columns.greenacre_shares,
                "orientation_sign": columns.orientation_sign,
            }),
        )?;
        write_json(&self.layout.exploratory(), &exploratory_report(&sep, self.cfg.sep.histogram_bins))
    }

    fn split(&self) -> Result<()> {
        let sep = read_measures_csv(&self.layout.measures())?;
        let ids: Vec<String> = sep.keys().cloned().collect();
        let s = &self.cfg.split;
        let split = train_test_split(&ids, s.n_train, s.n_test, self.seed("split", 0))?;
        write_split(&self.layout.split(), &split)?;
        let all = binarize_labels(&sep, &split.train_ids)?;
        let train: BTreeSet<&String> = split.train_ids.iter().collect();
        let labels = BinaryLabels {
            thresholds: all.thresholds,
            labels: all.labels.into_iter().filter(|(id, _)| train.contains(id)).collect(),
        };
        write_json(&self.layout.train_labels(), &labels)
    }

    fn preprocess(&self) -> Result<()> {
        let cfg = &self.cfg.preprocess;
        let dir = self.layout.stage_dir(Stage::Preprocess);
        let cohort = read_survey_csv(&self.layout.survey(self.cfg))?;
        let manifest_path = self.layout.image_manifest(self.cfg);
        let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let photos = by_key(read_manifest(&manifest_path)?);
        let raster = percentile_clip(&read_raster(&self.layout.raster(self.cfg))?, cfg.clip_low, cfg.clip_high, true)?;
        for t in ImageType::ALL {
            mkdir(&dir.join("images").join(t.name()))?;
        }
        let size = cfg.image_size;
        let rows = par::map(cohort.iter().collect(), |h| -> Result<Vec<ManifestEntry>> {
            let mut out = Vec::new();
            for t in ImageType::ALL {
                let image = match t {
                    ImageType::Satellite25m | ImageType::Satellite100m => {
                        let buffer = if t == ImageType::Satellite25m { cfg.buffer_small_m } else { cfg.buffer_large_m };
                        match crop_buffer(&raster, (h.geocode.x, h.geocode.y), buffer) {
                            Ok(img) => Some(img),
                            Err(e) => {
                                log::warn!("household {}: {t} unavailable: {e}", h.id);
                                None
                            }
                        }
                    }
                    _ => match photos.get(&(h.id.clone(), t)) {
                        Some(ManifestEntry { path: Some(p), missing: false, .. }) => Some(read_png(&base.join(p))?),
                        _ => None,
                    },
                };
                let rel = PathBuf::from("images").join(t.name()).join(format!("{}.png", h.id));
                if let Some(img) = &image {
                    write_png(&dir.join(&rel), &resize(img, size, size))?;
                }
                out.push(ManifestEntry {
                    id: h.id.clone(),
                    image_type: t,
                    missing: image.is_none(),
                    path: image.is_some().then_some(rel),
                });
            }
            Ok(out)
        });
        let entries: Vec<ManifestEntry> = rows.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
        write_manifest(&self.layout.preprocessed_manifest(), &entries)
    }

    fn load_image(&self, e: &ManifestEntry) -> Result<Option<NormImage>> {
        match (&e.path, e.missing) {
            (Some(p), false) => Ok(Some(read_png(&self.layout.stage_dir(Stage::Preprocess).join(p))?.normalized())),
            _ => Ok(None),
        }
    }

    fn train_extractors(&self) -> Result<()> {
        let split = read_split(&self.layout.split())?;
        let labels: BinaryLabels = read_json(&self.layout.train_labels())?;
        let entries = by_key(read_manifest(&self.layout.preprocessed_manifest())?);
        let mut summary = BTreeMap::new();
        for t in ImageType::ALL {
            let mut train = Vec::new();
            for id in &split.train_ids {
                let label = labels
                    .labels
                    .get(id)
                    .ok_or_else(|| Error::validation(format!("no training label for `{id}`")))?;
                if let Some(e) = entries.get(&(id.clone(), t)) {
                    if let Some(img) = self.load_image(e)? {
                        train.push((img, *label));
                    }
                }
            }
            let spec = self.cfg.network_spec(self.seed("extractor-init", t.index() as u64));
            let mut tc = self.cfg.extractor.train.clone();
            if t.is_satellite() && self.cfg.extractor.satellite_right_angles {
                tc.augment.right_angle_rotations = true;
            }
            let seed = self.seed("extractor-train", t.index() as u64);
            log::info!("training {t} extractor on {} images", train.len());
            let (params, log) = train_extractor(&spec, &train, None, &tc, seed)?;
            save_checkpoint(&self.layout.checkpoint(t), &params, seed, tc.epochs)?;
            write_training_log(&self.layout.stage_dir(Stage::TrainExtractor).join(format!("{t}_log.csv")), &log)?;
            let final_epoch = log.last().cloned().ok_or_else(|| Error::validation("empty training log"))?;
            summary.insert(t, ExtractorSummary { n_train_images: train.len(), final_epoch });
        }
        write_json(&self.layout.extractor_summary(), &summary)
    }

    fn features_for(&self, params: &NetworkParams, t: ImageType, items: &[(String, Option<NormImage>)]) -> Result<Vec<FeatureVector>> {
        let chunks: Vec<&[(String, Option<NormImage>)]> = items.chunks(64).collect();
        let done = par::map(chunks, |chunk| -> Result<Vec<FeatureVector>> {
            let images: Vec<NormImage> = chunk.iter().filter_map(|(_, img)| img.clone()).collect();
            let mut pen = if images.is_empty() { Vec::new() } else { forward(params, &images)?.penultimate }.into_iter();
            Ok(chunk
                .iter()
                .map(|(id, img)| FeatureVector {
                    household_id: id.clone(),
                    image_type: t,
                    missing: img.is_none(),
                    values: if img.is_some() { pen.next().unwrap_or_default() } else { Vec::new() },
                })
                .collect())
        });
        Ok(done.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
    }

    fn extract(&self) -> Result<()> {
        let entries = read_manifest(&self.layout.preprocessed_manifest())?;
        let ots = &self.cfg.offtheshelf;
        if ots.enabled {
            mkdir(&self.layout.stage_dir(Stage::Extract).join("offtheshelf"))?;
        }
        for t in ImageType::ALL {
            let items: Vec<(String, Option<NormImage>)> = entries
                .iter()
                .filter(|e| e.image_type == t)
                .map(|e| Ok((e.id.clone(), self.load_image(e)?)))
                .collect::<Result<_>>()?;
            let (params, _) = load_checkpoint(&self.layout.checkpoint(t))?;
            write_features_csv(&self.layout.features(t, false), &self.features_for(&params, t, &items)?)?;
            if ots.enabled {
                let size = self.cfg.preprocess.image_size;
                let frozen = offtheshelf_network(size, size, &ots.conv, ots.width, self.seed("offtheshelf", t.index() as u64))?;
                write_features_csv(&self.layout.features(t, true), &self.features_for(&frozen, t, &items)?)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn fit_one(
        &self,
        dir: &Path,
        stem: &str,
        train: &FeatureTable,
        test: &FeatureTable,
        m: SepMeasure,
        set: PredictorSet,
        alg: Algorithm,
        select: bool,
        seed: u64,
    ) -> Result<ModelRecord> {
        let p = randomized_search_cv(train, alg, &self.cfg.search.space, &self.cfg.search.options(select), seed)?;
        let ev = evaluate(&p, test)?;
        let json = dir.join(format!("{stem}.json"));
        save_pipeline(&json, &dir.join(format!("{stem}.trees")), &p)?;
        write_predictions_csv(&dir.join(format!("{stem}_predictions.csv")), &ev)?;
        log::info!("{m} {set} {alg}: test rmse {:.5}, r {:?}", ev.rmse, ev.pearson);
        Ok(ModelRecord {
            report: crate::tabular::EvaluationReport {
                measure: m.name().into(),
                predictor_set: set.name(),
                algorithm: alg,
                rmse: ev.rmse,
                pearson: ev.pearson,
                spearman: ev.spearman,
                n_test: test.n_rows(),
            },
            cv_rmse: p.cv_rmse,
            params: p.params.clone(),
            selected_features: p.selected.as_ref().map(Vec::len),
            model_path: self.layout.relative(&json),
        })
    }

    fn tables(
        &self,
        store: &FeatureStore,
        split: &CohortSplit,
        set: PredictorSet,
        y: &BTreeMap<String, f64>,
    ) -> Result<(FeatureTable, FeatureTable)> {
        Ok((
            assemble_feature_table(store, &split.train_ids, set, y)?,
            assemble_feature_table(store, &split.test_ids, set, y)?,
        ))
    }

    fn fit(&self) -> Result<()> {
        let dir = self.layout.stage_dir(Stage::Fit);
        let store = load_store(&self.layout, false)?;
        let sep = read_measures_csv(&self.layout.measures())?;
        let split = read_split(&self.layout.split())?;
        let tables_dir = dir.join("tables");
        mkdir(&tables_dir)?;
        let models_dir = dir.join("models");
        mkdir(&models_dir)?;
        let sets = &self.cfg.models.predictor_sets;
        for set in sets {
            let (train, test) = self.tables(&store, &split, *set, &outcome(&sep, SepMeasure::Assets))?;
            write_feature_table_csv(&tables_dir.join(format!("{set}_train.csv")), &train)?;
            write_feature_table_csv(&tables_dir.join(format!("{set}_test.csv")), &test)?;
        }
        let mut summary = FitSummary { models: Vec::new(), offtheshelf: Vec::new() };
        for m in SepMeasure::ALL {
            let y = outcome(&sep, m);
            let ids: Vec<String> = split.train_ids.iter().chain(&split.test_ids).cloned().collect();
            let values: Vec<f64> = ids.iter().map(|id| y[id]).collect();
            write_outcome_csv(&tables_dir.join(format!("outcome_{m}.csv")), &ids, &values)?;
            for set in sets {
                let (train, test) = self.tables(&store, &split, *set, &y)?;
                for alg in &self.cfg.models.algorithms {
                    let seed = derive_seed(self.cfg.seed, &format!("fit/{m}/{set}/{alg}"), 0);
                    let stem = format!("{m}_{set}_{alg}");
                    summary.models.push(self.fit_one(&models_dir, &stem, &train, &test, m, *set, *alg, false, seed)?);
                }
            }
        }
        if self.cfg.offtheshelf.enabled {
            let ots_dir = dir.join("offtheshelf");
            mkdir(&ots_dir)?;
            let store = load_store(&self.layout, true)?;
            let alg = self.cfg.offtheshelf.algorithm;
            for m in SepMeasure::ALL {
                let (train, test) = self.tables(&store, &split, PredictorSet::Complete, &outcome(&sep, m))?;
                let seed = derive_seed(self.cfg.seed, &format!("fit-offtheshelf/{m}/{alg}"), 0);
                let stem = format!("{m}_complete_{alg}");
                summary.offtheshelf.push(self.fit_one(&ots_dir, &stem, &train, &test, m, PredictorSet::Complete, alg, true, seed)?);
            }
        }
        write_json(&self.layout.fit_summary(), &summary)
    }

    fn load_model(&self, record: &ModelRecord) -> Result<FittedPipeline> {
        let json = self.layout.root.join(&record.model_path);
        load_pipeline(&json, &json.with_extension("trees"))
    }

    fn explained_model<'s>(&self, summary: &'s FitSummary, m: SepMeasure) -> Result<&'s ModelRecord> {
        let complete = PredictorSet::Complete.name();
        let candidates = summary.models.iter().filter(|r| {
            r.report.measure == m.name()
                && r.report.predictor_set == complete
                && match self.cfg.shap.algorithm {
                    Some(a) => r.report.algorithm == a,
                    None => r.report.algorithm.is_tree_based(),
                }
        });
        let mut best: Option<&ModelRecord> = None;
        for r in candidates {
            if best.is_none_or(|b| r.report.rmse < b.report.rmse) {
                best = Some(r);
            }
        }
        best.ok_or_else(|| Error::validation(format!("no tree-based complete model was fitted for {m}")))
    }

    fn explain(&self) -> Result<()> {
        let summary: FitSummary = read_json(&self.layout.fit_summary())?;
        let store = load_store(&self.layout, false)?;
        let sep = read_measures_csv(&self.layout.measures())?;
        let split = read_split(&self.layout.split())?;
        let entries = by_key(read_manifest(&self.layout.preprocessed_manifest())?);
        let types = PredictorSet::Complete.image_types();
        let mut rows = Vec::new();
        let mut rankings = BTreeMap::new();
        let mut for_top_bottom: [BTreeMap<String, BTreeMap<ImageType, f64>>; 3] = Default::default();
        for m in SepMeasure::ALL {
            let record = self.explained_model(&summary, m)?;
            let model = self.load_model(record)?;
            let columns = model.input_columns();
            let y = outcome(&sep, m);
            let mut per_split: BTreeMap<Split, Vec<BTreeMap<ImageType, f64>>> = BTreeMap::new();
            for (which, ids) in [(Split::Train, &split.train_ids), (Split::Test, &split.test_ids)] {
                let table = assemble_feature_table(&store, ids, PredictorSet::Complete, &y)?;
                for (sv, prediction) in shap_for_table(&model, &table)? {
                    let total = sv.base_value + sv.phi.iter().sum::<f64>();
                    if (total - prediction).abs() > 1e-8 * prediction.abs().max(1.0) {
                        return Err(Error::Numerical(format!(
                            "{m}: SHAP values of {} sum to {total}, prediction is {prediction}",
                            sv.household_id
                        )));
                    }
                    let groups = group_by_image(&sv, &columns, &types)?;
                    if which == self.cfg.shap.top_bottom_split {
                        for_top_bottom[m.index()].insert(sv.household_id.clone(), groups.clone());
                    }
                    per_split.entry(which).or_default().push(groups.clone());
                    rows.push(GroupedShap {
                        household_id: sv.household_id,
                        split: which.name().into(),
                        measure: m,
                        base_value: sv.base_value,
                        prediction,
                        groups,
                    });
                }
            }
            let rank = |s: Split| -> Vec<RankEntry> {
                rank_image_types(per_split.get(&s).into_iter().flatten())
                    .into_iter()
                    .map(|(image_type, median_abs_shap)| RankEntry { image_type, median_abs_shap })
                    .collect()
            };
            let (train, test) = (rank(Split::Train), rank(Split::Test));
            let chosen = if self.cfg.shap.ranking_split == Split::Train { &train } else { &test };
            let pairs: Vec<(ImageType, f64)> = chosen.iter().map(|e| (e.image_type, e.median_abs_shap)).collect();
            let reduced = reduced_predictor_set(&pairs)?;
            rankings.insert(
                m,
                MeasureRanking {
                    algorithm: record.report.algorithm,
                    predictor_set: record.report.predictor_set.clone(),
                    n_train: split.train_ids.len(),
                    n_test: split.test_ids.len(),
                    groups_per_household: types.len(),
                    train,
                    test,
                    reduced_set: reduced.name(),
                },
            );
        }
        write_shap_csv(&self.layout.shap_csv(), &rows)?;
        write_json(&self.layout.ranking(), &rankings)?;
        let mut text = String::new();
        for mut e in top_bottom_images(&for_top_bottom, self.cfg.shap.top_n) {
            e.image_path = entries
                .get(&(e.id.clone(), e.image_type))
                .and_then(|x| x.path.as_ref())
                .map(|p| self.layout.relative(&self.layout.stage_dir(Stage::Preprocess).join(p)));
            text.push_str(&serde_json::to_string(&e)?);
            text.push('\n');
        }
        let path = self.layout.top_bottom();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn reduce(&self) -> Result<()> {
        let dir = self.layout.stage_dir(Stage::Reduce);
        let rankings: BTreeMap<SepMeasure, MeasureRanking> = read_json(&self.layout.ranking())?;
        let summary: FitSummary = read_json(&self.layout.fit_summary())?;
        let store = load_store(&self.layout, false)?;
        let sep = read_measures_csv(&self.layout.measures())?;
        let split = read_split(&self.layout.split())?;
        let alg = self.cfg.reduce.algorithm;
        let find = |m: SepMeasure, set: PredictorSet| {
            summary
                .models
                .iter()
                .find(|r| r.report.measure == m.name() && r.report.predictor_set == set.name() && r.report.algorithm == alg)
                .map(|r| r.report.clone())
        };
        let mut out = Vec::new();
        for m in SepMeasure::ALL {
            let ranking = rankings.get(&m).ok_or_else(|| Error::validation(format!("no ranking for {m}")))?;
            let set: PredictorSet = ranking.reduced_set.parse()?;
            let PredictorSet::Reduced(indoor) = set else {
                return Err(Error::validation(format!("`{set}` is not a reduced set")));
            };
            debug_assert_eq!(indoor.group(), ImageGroup::Indoor);
            let (train, test) = self.tables(&store, &split, set, &outcome(&sep, m))?;
            let seed = derive_seed(self.cfg.seed, &format!("reduce/{m}/{alg}"), 0);
            let reduced = self.fit_one(&dir, &format!("{m}_{set}_{alg}"), &train, &test, m, set, alg, false, seed)?;
            out.push(ReducedRecord {
                measure: m,
                indoor_type: indoor,
                reduced,
                outdoor: find(m, PredictorSet::Outdoor),
                complete: find(m, PredictorSet::Complete),
            });
        }
        write_json(&self.layout.reduce_summary(), &out)
    }

    fn report(&self) -> Result<()> {
        let dir = self.layout.stage_dir(Stage::Report);
        let split = read_split(&self.layout.split())?;
        let fit: FitSummary = read_json(&self.layout.fit_summary())?;
        let shap: BTreeMap<SepMeasure, MeasureRanking> = read_json(&self.layout.ranking())?;
        let reduced: Vec<ReducedRecord> = read_json(&self.layout.reduce_summary())?;
        let mut complete_width = 0;
        for t in ImageType::ALL {
            let mut r = csv::Reader::from_path(self.layout.features(t, false))?;
            complete_width += r.headers()?.len().saturating_sub(2);
        }
        let report = Report {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: super::config_hash(self.cfg)?,
            seed: self.cfg.seed,
            constants: StructuralConstants {
                n_image_types: ImageType::ALL.len(),
                complete_width,
                n_train: split.train_ids.len(),
                n_test: split.test_ids.len(),
                n_fitted_models: fit.models.len(),
                k_folds: self.cfg.search.k_folds,
                grouped_shap_per_household: shap.values().map(|r| r.groups_per_household).max().unwrap_or(0),
            },
            exploratory: read_json(&self.layout.exploratory())?,
            extractor: read_json(&self.layout.extractor_summary())?,
            evaluations: fit.models.iter().map(|r| r.report.clone()).collect(),
            offtheshelf: fit.offtheshelf.iter().map(|r| r.report.clone()).collect(),
            shap,
            reduced,
        };
        write_json(&self.layout.report(), &report)?;
        let path = dir.join("evaluations.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["measure", "predictor_set", "algorithm", "features", "rmse", "pearson", "spearman", "n_test"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let rows = report
            .evaluations
            .iter()
            .map(|e| ("finetuned", e))
            .chain(report.offtheshelf.iter().map(|e| ("offtheshelf", e)))
            .chain(report.reduced.iter().map(|r| ("finetuned", &r.reduced.report)));
        for (features, e) in rows {
            w.write_record([
                e.measure.clone(),
                e.predictor_set.clone(),
                e.algorithm.to_string(),
                features.into(),
                e.rmse.to_string(),
                opt(e.pearson),
                opt(e.spearman),
                e.n_test.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let stats_path = dir.join("shap_medians.csv");
        let mut w = csv::Writer::from_path(&stats_path)?;
        w.write_record(["measure", "split", "rank", "image_type", "median_abs_shap"])?;
        for (m, r) in &report.shap {
            for (s, list) in [("train", &r.train), ("test", &r.test)] {
                for (k, e) in list.iter().enumerate() {
                    w.write_record([m.name(), s, &(k + 1).to_string(), e.image_type.name(), &e.median_abs_shap.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&stats_path, e))?;
        Ok(())
    }
}
