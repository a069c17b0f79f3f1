//! On-disk registry of datasets and trained models.
//!
//! Layout under the registry root:
//!
//! ```text
//! registry.json          manifest (datasets + models)
//! datasets/<id>.csv      filled, validated frames
//! models/<id>.ccfm       model files
//! models/<id>.log.jsonl  training history
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ccforecast_core::architectures::{param_count, Architecture, TrainedModel};
use ccforecast_core::ingest::{fill_missing, load_csv, write_csv, DatasetEntry, DatasetManifest, PlantSchema, TimeSeriesFrame};
use ccforecast_core::training::MetricsReport;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

pub const MANIFEST_FILE: &str = "registry.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    /// Relative to the registry root.
    pub path: PathBuf,
    pub target: String,
    pub architecture: Architecture,
    pub dataset: Option<String>,
    pub feature_fingerprint: String,
    pub parameters: usize,
    pub created: DateTime<Utc>,
    #[serde(default)]
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub datasets: DatasetManifest,
    #[serde(default)]
    pub models: BTreeMap<String, ModelEntry>,
    /// Most recently added dataset.
    #[serde(default)]
    pub latest_dataset: Option<String>,
}

pub struct Registry {
    root: PathBuf,
    manifest: Manifest,
    frames: Mutex<HashMap<String, Arc<TimeSeriesFrame>>>,
    models: Mutex<HashMap<String, Arc<TrainedModel>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.')
}

impl Registry {
    /// Opens (creating if needed) the registry rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> ServiceResult<Self> {
        let root = root.into();
        for dir in [root.clone(), root.join("datasets"), root.join("models")] {
            std::fs::create_dir_all(&dir)
                .map_err(|e| ServiceError::Registry(format!("cannot create {}: {e}", dir.display())))?;
        }
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| ServiceError::Registry(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| ServiceError::Registry(format!("bad manifest {}: {e}", path.display())))?
        } else {
            Manifest::default()
        };
        let reg = Self {
            root,
            manifest,
            frames: Mutex::new(HashMap::new()),
            models: Mutex::new(HashMap::new()),
        };
        reg.verify()?;
        Ok(reg)
    }

    /// Every referenced file must exist and every model must pass its
    /// checksum. Models are cached as a side effect.
    fn verify(&self) -> ServiceResult<()> {
        for d in self.manifest.datasets.datasets.values() {
            let p = self.root.join(&d.path);
            if !p.is_file() {
                return Err(ServiceError::Registry(format!("dataset `{}`: missing file {}", d.id, p.display())));
            }
        }
        for id in self.manifest.models.keys() {
            self.model(id)?;
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn save(&self) -> ServiceResult<()> {
        let path = self.root.join(MANIFEST_FILE);
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&tmp, text)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| ServiceError::Registry(format!("cannot write {}: {e}", path.display())))
    }

    pub fn datasets(&self) -> Vec<DatasetEntry> {
        self.manifest.datasets.datasets.values().cloned().collect()
    }

    pub fn models(&self) -> Vec<ModelEntry> {
        self.manifest.models.values().cloned().collect()
    }

    pub fn dataset_entry(&self, id: &str) -> ServiceResult<&DatasetEntry> {
        self.manifest.datasets.datasets.get(id).ok_or_else(|| ServiceError::NotFound {
            kind: "dataset",
            id: id.to_string(),
        })
    }

    pub fn model_entry(&self, id: &str) -> ServiceResult<&ModelEntry> {
        self.manifest.models.get(id).ok_or_else(|| ServiceError::NotFound {
            kind: "model",
            id: id.to_string(),
        })
    }

    /// The dataset frame, loaded once and cached.
    pub fn dataset(&self, id: &str) -> ServiceResult<Arc<TimeSeriesFrame>> {
        let entry = self.dataset_entry(id)?;
        if let Some(f) = self.frames.lock().unwrap().get(id) {
            return Ok(Arc::clone(f));
        }
        let frame = load_csv(self.root.join(&entry.path), &PlantSchema::cesar1())?;
        let (frame, _) = fill_missing(&frame)?;
        let frame = Arc::new(frame.with_provenance(entry.provenance.clone()));
        self.frames.lock().unwrap().insert(id.to_string(), Arc::clone(&frame));
        Ok(frame)
    }

    /// The model, loaded (with checksum verification) once and cached.
    pub fn model(&self, id: &str) -> ServiceResult<Arc<TrainedModel>> {
        let entry = self.model_entry(id)?;
        if let Some(m) = self.models.lock().unwrap().get(id) {
            return Ok(Arc::clone(m));
        }
        let model = Arc::new(TrainedModel::load(self.root.join(&entry.path))?);
        self.models.lock().unwrap().insert(id.to_string(), Arc::clone(&model));
        Ok(model)
    }

    pub fn add_dataset(&mut self, id: &str, frame: TimeSeriesFrame) -> ServiceResult<DatasetEntry> {
        if !valid_id(id) {
            return Err(ServiceError::invalid("id", format!("`{id}` is not a valid id")));
        }
        if self.manifest.datasets.datasets.contains_key(id) {
            return Err(ServiceError::invalid("id", format!("dataset `{id}` already exists")));
        }
        let rel = PathBuf::from("datasets").join(format!("{id}.csv"));
        write_csv(&frame, self.root.join(&rel))?;
        let entry = DatasetEntry::describe(id, rel, &frame)?;
        self.manifest.datasets.insert(entry.clone())?;
        self.manifest.latest_dataset = Some(id.to_string());
        self.save()?;
        self.frames.lock().unwrap().insert(id.to_string(), Arc::new(frame));
        Ok(entry)
    }

    pub fn add_model(&mut self, id: &str, model: TrainedModel, metrics: Option<MetricsReport>) -> ServiceResult<ModelEntry> {
        if !valid_id(id) {
            return Err(ServiceError::invalid("id", format!("`{id}` is not a valid id")));
        }
        if self.manifest.models.contains_key(id) {
            return Err(ServiceError::invalid("id", format!("model `{id}` already exists")));
        }
        let rel = PathBuf::from("models").join(format!("{id}.ccfm"));
        model.save(self.root.join(&rel))?;
        let d = &model.descriptor;
        let entry = ModelEntry {
            id: id.to_string(),
            path: rel,
            target: d.target.clone(),
            architecture: d.network.architecture,
            dataset: model.metadata.dataset_id.clone(),
            feature_fingerprint: d.feature_fingerprint.clone(),
            parameters: param_count(&d.network),
            created: Utc::now(),
            metrics,
        };
        self.manifest.models.insert(id.to_string(), entry.clone());
        self.save()?;
        self.models.lock().unwrap().insert(id.to_string(), Arc::new(model));
        Ok(entry)
    }

    pub fn set_metrics(&mut self, id: &str, metrics: MetricsReport) -> ServiceResult<()> {
        let entry = self.manifest.models.get_mut(id).ok_or_else(|| ServiceError::NotFound {
            kind: "model",
            id: id.to_string(),
        })?;
        entry.metrics = Some(metrics);
        self.save()
    }

    /// `<stem>`, or `<stem>-<n>` with the smallest free `n`.
    pub fn fresh_model_id(&self, stem: &str) -> String {
        fresh(stem, |id| self.manifest.models.contains_key(id))
    }

    pub fn fresh_dataset_id(&self, stem: &str) -> String {
        fresh(stem, |id| self.manifest.datasets.datasets.contains_key(id))
    }

    pub fn path_of(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }
}

fn fresh(stem: &str, taken: impl Fn(&str) -> bool) -> String {
    if !taken(stem) {
        return stem.to_string();
    }
    (2..).map(|n| format!("{stem}-{n}")).find(|id| !taken(id)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ccforecast_core::synthplant::{generate, GeneratorConfig};

    #[test]
    fn datasets_persist_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let frame = generate(&GeneratorConfig::cesar1(1, 0.5)).unwrap();
        {
            let mut reg = Registry::open(dir.path()).unwrap();
            reg.add_dataset("d1", frame.clone()).unwrap();
            assert!(reg.add_dataset("d1", frame.clone()).is_err());
            assert!(reg.add_dataset("../x", frame.clone()).is_err());
        }
        let reg = Registry::open(dir.path()).unwrap();
        assert_eq!(reg.datasets().len(), 1);
        let back = reg.dataset("d1").unwrap();
        assert_eq!(back.len(), frame.len());
        assert_eq!(back.column("amp_ftir"), frame.column("amp_ftir"));
        assert!(matches!(reg.dataset("nope"), Err(ServiceError::NotFound { .. })));
        assert_eq!(reg.fresh_dataset_id("d1"), "d1-2");
    }
}
