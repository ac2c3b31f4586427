//! JSON persistence for trained models.
//!
//! Archives carry everything a fresh process needs to reproduce forward
//! passes bit for bit: the head description, layer weights in row-major
//! order with activation tags, input layout and standardization constants,
//! the dropout keep probability, the training seed, and the loss trace.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::outcome::OutcomeModel;
use crate::treatment::TreatmentModel;

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelArchive {
    Treatment(TreatmentModel),
    Outcome(OutcomeModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    #[serde(flatten)]
    pub model: ModelArchive,
}

pub fn save_model(model: &ModelArchive, path: &Path) -> Result<()> {
    let file = ModelFile {
        version: ARCHIVE_VERSION,
        model: model.clone(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelArchive> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if file.version != ARCHIVE_VERSION {
        return Err(Error::Schema(format!(
            "unsupported archive version {}",
            file.version
        )));
    }
    Ok(file.model)
}

pub fn load_treatment(path: &Path) -> Result<TreatmentModel> {
    match load_model(path)? {
        ModelArchive::Treatment(m) => Ok(m),
        ModelArchive::Outcome(_) => Err(Error::Domain(format!(
            "{} holds an outcome model, expected a treatment model",
            path.display()
        ))),
    }
}

pub fn load_outcome(path: &Path) -> Result<OutcomeModel> {
    match load_model(path)? {
        ModelArchive::Outcome(m) => Ok(m),
        ModelArchive::Treatment(_) => Err(Error::Domain(format!(
            "{} holds a treatment model, expected an outcome model",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treatment::test_support::synthetic_dataset;
    use crate::treatment::{train_first_stage, FirstStageConfig, HeadSpec};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("deepiv-archive-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn treatment_round_trip_is_bit_exact() {
        let data = synthetic_dataset(400, 600, |s| {
            let z = s.normal();
            (s.normal(), z, z + s.normal(), s.normal())
        });
        let config = FirstStageConfig {
            head: HeadSpec::Mixture { components: 3 },
            hidden: vec![6],
            epochs: 5,
            seed: Some(61),
            ..FirstStageConfig::default()
        };
        let model = train_first_stage(&data, &config).unwrap();
        let path = tmp("treatment.json");
        save_model(&ModelArchive::Treatment(model.clone()), &path).unwrap();
        let loaded = load_treatment(&path).unwrap();
        assert_eq!(loaded, model);

        // identical log densities at probe points, bit for bit
        for (x, z, p) in [(0.0, 0.0, 0.5), (1.0, -1.0, 2.0), (-0.3, 0.7, -1.0)] {
            let a = model.log_density(&[x], &[z], p).unwrap();
            let b = loaded.log_density(&[x], &[z], p).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }

        // saving the loaded model reproduces the bytes
        let path2 = tmp("treatment2.json");
        save_model(&ModelArchive::Treatment(loaded), &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

        // wrong-kind loads are domain errors
        assert!(matches!(load_outcome(&path), Err(Error::Domain(_))));
    }

    #[test]
    fn outcome_round_trip_preserves_predictions() {
        use crate::outcome::{train_second_stage, SecondStageConfig};
        let data = synthetic_dataset(400, 601, |s| {
            let z = s.normal();
            let p = z + s.normal();
            (s.normal(), z, p, 2.0 * p + s.normal())
        });
        let fs_cfg = FirstStageConfig {
            head: HeadSpec::Mixture { components: 2 },
            hidden: vec![4],
            epochs: 5,
            seed: Some(62),
            ..FirstStageConfig::default()
        };
        let tmodel = train_first_stage(&data, &fs_cfg).unwrap();
        let ss_cfg = SecondStageConfig {
            hidden: vec![4],
            epochs: 5,
            seed: Some(63),
            ..SecondStageConfig::default()
        };
        let model = train_second_stage(&data, &tmodel, &ss_cfg).unwrap();
        let path = tmp("outcome.json");
        save_model(&ModelArchive::Outcome(model.clone()), &path).unwrap();
        let loaded = load_outcome(&path).unwrap();
        assert_eq!(loaded, model);
        for (p, x) in [(0.0, 0.0), (1.5, -0.5)] {
            assert_eq!(
                model.predict(p, &[x]).unwrap().to_bits(),
                loaded.predict(p, &[x]).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let path = tmp("versioned.json");
        fs::write(&path, r#"{"version": 99, "kind": "treatment"}"#).unwrap();
        assert!(load_model(&path).is_err());
    }
}
