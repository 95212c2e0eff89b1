//! Household records, ground-truth SEP measures, sampling and splits.

mod io;
mod sampling;
mod sep;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use io::{
    read_manifest, read_split, read_survey_csv, write_manifest, write_split, write_survey_csv,
    ManifestEntry,
};
pub use sampling::{quartile_of, quartile_stratified_sample, train_test_split};
pub use sep::{
    binarize_labels, compute_expenditure_sep, compute_income_sep, compute_sep_measures, impute_assets,
    modal_category,
};

/// The thirteen image sources collected per household.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageType {
    #[serde(rename = "satellite_25m")]
    Satellite25m,
    #[serde(rename = "satellite_100m")]
    Satellite100m,
    FrontDoor,
    Wall,
    StreetView,
    Roof,
    Floor,
    LightSource,
    Kitchen,
    Stove,
    Bathroom,
    Latrine,
    WaterSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageGroup {
    Satellite,
    Outdoor,
    Indoor,
}

impl ImageType {
    pub const ALL: [ImageType; 13] = [
        ImageType::Satellite25m,
        ImageType::Satellite100m,
        ImageType::FrontDoor,
        ImageType::Wall,
        ImageType::StreetView,
        ImageType::Roof,
        ImageType::Floor,
        ImageType::LightSource,
        ImageType::Kitchen,
        ImageType::Stove,
        ImageType::Bathroom,
        ImageType::Latrine,
        ImageType::WaterSource,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ImageType::Satellite25m => "satellite_25m",
            ImageType::Satellite100m => "satellite_100m",
            ImageType::FrontDoor => "front_door",
            ImageType::Wall => "wall",
            ImageType::StreetView => "street_view",
            ImageType::Roof => "roof",
            ImageType::Floor => "floor",
            ImageType::LightSource => "light_source",
            ImageType::Kitchen => "kitchen",
            ImageType::Stove => "stove",
            ImageType::Bathroom => "bathroom",
            ImageType::Latrine => "latrine",
            ImageType::WaterSource => "water_source",
        }
    }

    pub fn group(self) -> ImageGroup {
        match self {
            ImageType::Satellite25m | ImageType::Satellite100m => ImageGroup::Satellite,
            ImageType::FrontDoor | ImageType::Wall | ImageType::StreetView => ImageGroup::Outdoor,
            _ => ImageGroup::Indoor,
        }
    }

    pub fn is_satellite(self) -> bool {
        self.group() == ImageGroup::Satellite
    }

    /// Position in [`ImageType::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Satellite crops come from the raster; every other type is a photograph.
    pub fn photos() -> impl Iterator<Item = ImageType> {
        Self::ALL.into_iter().filter(|t| !t.is_satellite())
    }
}

impl fmt::Display for ImageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImageType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ImageType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown image type `{s}`")))
    }
}

/// Projected planar coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geocode {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ImageRef {
    Path(PathBuf),
    Missing,
}

impl ImageRef {
    pub fn is_missing(&self) -> bool {
        matches!(self, ImageRef::Missing)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdRecord {
    pub id: String,
    pub geocode: Geocode,
    /// Asset variable -> category label, `None` when unanswered.
    pub assets: BTreeMap<String, Option<String>>,
    /// Monthly income per source (metical).
    pub income_sources: BTreeMap<String, f64>,
    /// Monthly expenditure per source (metical).
    pub expenditure_sources: BTreeMap<String, f64>,
    pub images: BTreeMap<ImageType, ImageRef>,
}

/// One of the three ground-truth outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SepMeasure {
    Assets,
    Expenditure,
    Income,
}

impl SepMeasure {
    pub const ALL: [SepMeasure; 3] = [SepMeasure::Assets, SepMeasure::Expenditure, SepMeasure::Income];

    pub fn name(self) -> &'static str {
        match self {
            SepMeasure::Assets => "assets",
            SepMeasure::Expenditure => "expenditure",
            SepMeasure::Income => "income",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SepMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SepMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SepMeasure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown SEP measure `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SepMeasures {
    /// MCA first-dimension score.
    pub assets: f64,
    pub expenditure: f64,
    pub income: f64,
}

impl SepMeasures {
    pub fn get(&self, m: SepMeasure) -> f64 {
        match m {
            SepMeasure::Assets => self.assets,
            SepMeasure::Expenditure => self.expenditure,
            SepMeasure::Income => self.income,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.assets, self.expenditure, self.income]
    }
}

/// Above-median flags per household, thresholds from training households.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryLabels {
    /// Median of assets, expenditure, income over the training ids.
    pub thresholds: [f64; 3],
    pub labels: BTreeMap<String, [bool; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}
