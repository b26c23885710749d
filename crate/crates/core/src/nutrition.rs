//! Nutrient scaling: map estimated volumes to nutritional content through
//! per-food-code reference profiles.
//!
//! Scaling is linear in volume, which assumes constant density and
//! composition within a food code.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::PredictionSet;

/// Nutritional content of one food code at `reference_volume_ml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NutrientProfile {
    pub food_code: String,
    pub energy_kcal: f64,
    pub protein_g: f64,
    pub carbohydrate_g: f64,
    pub fat_g: f64,
    pub reference_volume_ml: f64,
}

impl NutrientProfile {
    pub fn validate(&self) -> Result<()> {
        if self.food_code.trim().is_empty() {
            return Err(Error::InvalidArgument("food_code must be non-empty".into()));
        }
        let nutrients = [
            (self.energy_kcal, "energy_kcal"),
            (self.protein_g, "protein_g"),
            (self.carbohydrate_g, "carbohydrate_g"),
            (self.fat_g, "fat_g"),
        ];
        for (v, name) in nutrients {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} of `{}` must be finite and >= 0, got {v}",
                    self.food_code
                )));
            }
        }
        if !(self.reference_volume_ml.is_finite() && self.reference_volume_ml > 0.0) {
            return Err(Error::NonPositiveVolume(self.reference_volume_ml));
        }
        Ok(())
    }
}

/// One row's nutrient amounts, estimated or ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NutrientValues {
    pub energy_kcal: f64,
    pub protein_g: f64,
    pub carbohydrate_g: f64,
    pub fat_g: f64,
}

/// Scales the profile's nutrients by `volume_ml / reference_volume_ml`.
pub fn scale_nutrients(profile: &NutrientProfile, volume_ml: f64) -> Result<NutrientValues> {
    profile.validate()?;
    if !(volume_ml.is_finite() && volume_ml > 0.0) {
        return Err(Error::NonPositiveVolume(volume_ml));
    }
    let factor = volume_ml / profile.reference_volume_ml;
    Ok(NutrientValues {
        energy_kcal: profile.energy_kcal * factor,
        protein_g: profile.protein_g * factor,
        carbohydrate_g: profile.carbohydrate_g * factor,
        fat_g: profile.fat_g * factor,
    })
}

/// Per-nutrient mean absolute error between matched estimate/truth rows.
pub fn nutrient_mae(estimates: &[NutrientValues], truths: &[NutrientValues]) -> Result<NutrientValues> {
    if estimates.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: estimates.len(),
            right: truths.len(),
            context: "nutrient rows".into(),
        });
    }
    if estimates.is_empty() {
        return Err(Error::DataEmpty);
    }
    let n = estimates.len() as f64;
    let mut sums = [0.0f64; 4];
    for (e, t) in estimates.iter().zip(truths) {
        sums[0] += (e.energy_kcal - t.energy_kcal).abs();
        sums[1] += (e.protein_g - t.protein_g).abs();
        sums[2] += (e.carbohydrate_g - t.carbohydrate_g).abs();
        sums[3] += (e.fat_g - t.fat_g).abs();
    }
    Ok(NutrientValues {
        energy_kcal: sums[0] / n,
        protein_g: sums[1] / n,
        carbohydrate_g: sums[2] / n,
        fat_g: sums[3] / n,
    })
}

/// Profiles keyed by food code, loaded from a JSON array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NutrientDb {
    profiles: BTreeMap<String, NutrientProfile>,
}

impl NutrientDb {
    pub fn from_profiles(profiles: Vec<NutrientProfile>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for profile in profiles {
            profile.validate()?;
            let code = profile.food_code.clone();
            if map.insert(code.clone(), profile).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate food code `{code}` in nutrient database"
                )));
            }
        }
        Ok(NutrientDb { profiles: map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let profiles: Vec<NutrientProfile> =
            serde_json::from_str(&text).map_err(|e| Error::serde(path, e))?;
        Self::from_profiles(profiles)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let profiles: Vec<&NutrientProfile> = self.profiles.values().collect();
        let text = serde_json::to_string_pretty(&profiles).map_err(|e| Error::serde(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, food_code: &str) -> Result<&NutrientProfile> {
        self.profiles
            .get(food_code)
            .ok_or_else(|| Error::UnknownFoodCode(food_code.to_string()))
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

/// Nutrient estimates for one scored item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NutritionRow {
    pub item_id: String,
    pub food_code: String,
    pub volume_est_ml: f64,
    pub estimate: NutrientValues,
    /// Profile scaled by the ground-truth volume.
    pub truth: NutrientValues,
}

/// Summary the nutrition pipeline writes: per-item rows plus column MAEs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NutritionReport {
    pub rows: Vec<NutritionRow>,
    pub mae: NutrientValues,
    pub volume_mae_ml: f64,
}

/// Scales every prediction through the database, treating each row's class
/// label as its food code. Rows with non-positive estimates (including
/// clip-flagged zeros) fail loudly rather than silently skewing the report.
pub fn scale_prediction_set(preds: &PredictionSet, db: &NutrientDb) -> Result<NutritionReport> {
    let mut rows = Vec::with_capacity(preds.len());
    let mut estimates = Vec::with_capacity(preds.len());
    let mut truths = Vec::with_capacity(preds.len());
    let mut volume_abs_sum = 0.0;
    for p in preds.rows() {
        let profile = db.get(&p.class_label)?;
        let estimate = scale_nutrients(profile, p.volume_est_ml).map_err(|e| match e {
            Error::NonPositiveVolume(v) => Error::InvalidArgument(format!(
                "estimate for `{}` is {v} mL; nutrition scaling needs positive volumes",
                p.item_id
            )),
            other => other,
        })?;
        let truth = scale_nutrients(profile, p.volume_gt_ml)?;
        estimates.push(estimate);
        truths.push(truth);
        volume_abs_sum += (p.volume_est_ml - p.volume_gt_ml).abs();
        rows.push(NutritionRow {
            item_id: p.item_id.clone(),
            food_code: p.class_label.clone(),
            volume_est_ml: p.volume_est_ml,
            estimate,
            truth,
        });
    }
    let mae = nutrient_mae(&estimates, &truths)?;
    Ok(NutritionReport { rows, mae, volume_mae_ml: volume_abs_sum / preds.len() as f64 })
}

impl NutritionReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::serde(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::serde(path, e))
    }
}
