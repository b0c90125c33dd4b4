//! Domain types shared by every role: GPUs, context recipes, tasks and resources.
//!
//! Everything here is an immutable value once constructed, so it can be cloned
//! freely across threads and connections.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Decimal gigabyte, the unit used for every declared blob size.
pub const GB: u64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkerId(pub String);

impl WorkerId {
    pub fn new(id: impl Into<String>) -> Self {
        WorkerId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Hex SHA-256 digest identifying a context recipe.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextId(pub String);

impl fmt::Display for ContextId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // short form is enough to tell contexts apart in logs
        f.write_str(&self.0[..self.0.len().min(12)])
    }
}

/// Hex SHA-256 digest naming a cached blob.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlobKey(pub String);

fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuModel {
    pub name: String,
    pub release_year: i32,
    /// Relative inference throughput; the NVIDIA A10 is 1.0.
    pub speed_factor: f64,
    /// Host memory to GPU memory rate, bytes per second.
    pub gpu_load_bandwidth: f64,
}

impl GpuModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.speed_factor > 0.0) || !self.speed_factor.is_finite() {
            return Err(ModelError::NonPositive("speed_factor"));
        }
        if !(self.gpu_load_bandwidth > 0.0) || !self.gpu_load_bandwidth.is_finite() {
            return Err(ModelError::NonPositive("gpu_load_bandwidth"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    #[serde(flatten)]
    pub model: GpuModel,
    /// How many of these the cluster owns; caps arrivals of this model in a trace.
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuCatalog {
    pub entries: Vec<CatalogEntry>,
}

pub const A10: &str = "NVIDIA A10";
pub const TITAN_X_PASCAL: &str = "NVIDIA TITAN X (Pascal)";

/// Host to GPU load rate used for every catalog model: 3.7 GB in 13.5 s.
pub const DEFAULT_GPU_LOAD_BANDWIDTH: f64 = 3.7e9 / 13.5;

/// Speed factor by release year, linear through the TITAN X Pascal (2016, 0.5)
/// and the A10 (2021, 1.0).
pub fn interpolated_speed_factor(release_year: i32) -> f64 {
    let f = 0.5 + 0.1 * f64::from(release_year - 2016);
    // keep ancient cards strictly positive
    f.max(0.05)
}

impl GpuCatalog {
    /// The eight major GPU models of the reference cluster.
    pub fn standard() -> Self {
        let rows: [(&str, i32, u32); 8] = [
            ("NVIDIA Quadro RTX 6000", 2018, 106),
            (A10, 2021, 78),
            (TITAN_X_PASCAL, 2016, 69),
            ("NVIDIA GeForce GTX 1080 Ti", 2017, 63),
            ("NVIDIA RTX 6000 Ada Generation", 2022, 36),
            ("NVIDIA GeForce GTX TITAN X", 2015, 34),
            ("NVIDIA A40", 2020, 26),
            ("NVIDIA H100 80GB HBM3", 2023, 15),
        ];
        let entries = rows
            .iter()
            .map(|&(name, year, count)| CatalogEntry {
                model: GpuModel {
                    name: name.to_string(),
                    release_year: year,
                    speed_factor: interpolated_speed_factor(year),
                    gpu_load_bandwidth: DEFAULT_GPU_LOAD_BANDWIDTH,
                },
                count,
            })
            .collect();
        GpuCatalog { entries }
    }

    /// Looks a model up by exact name, falling back to a case-insensitive
    /// match that tolerates a missing "NVIDIA " prefix.
    pub fn get(&self, name: &str) -> Option<&GpuModel> {
        if let Some(e) = self.entries.iter().find(|e| e.model.name == name) {
            return Some(&e.model);
        }
        let wanted = normalize_gpu_name(name);
        self.entries
            .iter()
            .find(|e| normalize_gpu_name(&e.model.name) == wanted)
            .map(|e| &e.model)
    }

    pub fn count_of(&self, name: &str) -> Option<u32> {
        self.entries.iter().find(|e| e.model.name == name).map(|e| e.count)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.entries.is_empty() {
            return Err(ModelError::EmptyCatalog);
        }
        for e in &self.entries {
            e.model.validate()?;
        }
        Ok(())
    }
}

impl Default for GpuCatalog {
    fn default() -> Self {
        Self::standard()
    }
}

fn normalize_gpu_name(name: &str) -> String {
    let lower = name.trim().to_ascii_lowercase();
    lower.strip_prefix("nvidia ").unwrap_or(&lower).to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Awareness {
    Agnostic,
    Partial,
    Full,
}

impl fmt::Display for Awareness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Awareness::Agnostic => "agnostic",
            Awareness::Partial => "partial",
            Awareness::Full => "full",
        })
    }
}

impl FromStr for Awareness {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "agnostic" => Ok(Awareness::Agnostic),
            "partial" => Ok(Awareness::Partial),
            "full" => Ok(Awareness::Full),
            _ => Err(ModelError::UnknownAwareness(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub cores: u32,
    pub memory_bytes: u64,
    pub disk_bytes: u64,
    pub gpus: u32,
}

impl ResourceRequest {
    /// Per-task allocation of the reference runs.
    pub fn default_task() -> Self {
        ResourceRequest {
            cores: 2,
            memory_bytes: 10 * GB,
            disk_bytes: 20 * GB,
            gpus: 1,
        }
    }

    /// Per-worker capacity of the reference runs.
    pub fn default_worker() -> Self {
        ResourceRequest {
            cores: 2,
            memory_bytes: 10 * GB,
            disk_bytes: 70 * GB,
            gpus: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.gpus > 1 {
            return Err(ModelError::MultiGpu(self.gpus));
        }
        Ok(())
    }

    pub fn fits_within(&self, capacity: &ResourceRequest) -> bool {
        self.cores <= capacity.cores
            && self.memory_bytes <= capacity.memory_bytes
            && self.disk_bytes <= capacity.disk_bytes
            && self.gpus <= capacity.gpus
    }
}

/// Which emulated stages a fresh context build performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BuildCostDescriptor {
    pub disk_load: bool,
    pub gpu_load: bool,
}

impl Default for BuildCostDescriptor {
    fn default() -> Self {
        BuildCostDescriptor {
            disk_load: true,
            gpu_load: true,
        }
    }
}

/// Recipe fields without the id. Deserializing from any key order and
/// hashing yields the same id, since the digest runs over a sorted rendering.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecipeDraft {
    pub code_ref: String,
    pub dependency_bytes: u64,
    pub model_bytes: u64,
    pub host_memory_bytes: u64,
    #[serde(default)]
    pub builder: BuildCostDescriptor,
}

impl RecipeDraft {
    fn canonical_fields(&self) -> Vec<(&'static str, String)> {
        let mut fields = vec![
            ("model_bytes", self.model_bytes.to_string()),
            ("code_ref", self.code_ref.clone()),
            ("builder.gpu_load", self.builder.gpu_load.to_string()),
            ("dependency_bytes", self.dependency_bytes.to_string()),
            ("host_memory_bytes", self.host_memory_bytes.to_string()),
            ("builder.disk_load", self.builder.disk_load.to_string()),
        ];
        fields.sort_by(|a, b| a.0.cmp(b.0));
        fields
    }

    /// Canonical text the digest is computed over: `key=value` lines sorted by key.
    /// Values are length-prefixed so a code_ref containing newlines cannot alias
    /// another recipe.
    pub fn canonical_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.canonical_fields() {
            out.push_str(k);
            out.push('=');
            out.push_str(&v.len().to_string());
            out.push(':');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> ContextId {
        recipe_hash(self)
    }

    pub fn into_recipe(self) -> ContextRecipe {
        let context_id = recipe_hash(&self);
        ContextRecipe {
            context_id,
            code_ref: self.code_ref,
            dependency_bytes: self.dependency_bytes,
            model_bytes: self.model_bytes,
            host_memory_bytes: self.host_memory_bytes,
            builder: self.builder,
        }
    }
}

/// Content hash of a recipe.
pub fn recipe_hash(draft: &RecipeDraft) -> ContextId {
    ContextId(sha256_hex(draft.canonical_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextRecipe {
    pub context_id: ContextId,
    pub code_ref: String,
    pub dependency_bytes: u64,
    pub model_bytes: u64,
    pub host_memory_bytes: u64,
    pub builder: BuildCostDescriptor,
}

impl ContextRecipe {
    /// The lightweight-LLM recipe used by every experiment: a 3.7 GB model
    /// that occupies 7.4 GB of memory, plus a 10.5 GB software environment.
    pub fn default_llm() -> Self {
        RecipeDraft {
            code_ref: "pff.infer_model".to_string(),
            dependency_bytes: 10_500_000_000,
            model_bytes: 3_700_000_000,
            host_memory_bytes: 7_400_000_000,
            builder: BuildCostDescriptor::default(),
        }
        .into_recipe()
    }

    pub fn draft(&self) -> RecipeDraft {
        RecipeDraft {
            code_ref: self.code_ref.clone(),
            dependency_bytes: self.dependency_bytes,
            model_bytes: self.model_bytes,
            host_memory_bytes: self.host_memory_bytes,
            builder: self.builder,
        }
    }

    /// True when `context_id` matches the recipe contents.
    pub fn verify_id(&self) -> bool {
        recipe_hash(&self.draft()) == self.context_id
    }

    /// Blobs that make up the context template, in fetch order.
    pub fn blobs(&self) -> Vec<BlobRef> {
        let mut blobs = Vec::with_capacity(2);
        if self.dependency_bytes > 0 {
            blobs.push(BlobRef {
                key: BlobKey(sha256_hex(
                    format!("dependencies/{}/{}", self.code_ref, self.dependency_bytes).as_bytes(),
                )),
                bytes: self.dependency_bytes,
                kind: BlobKind::Dependencies,
            });
        }
        if self.model_bytes > 0 {
            blobs.push(BlobRef {
                key: BlobKey(sha256_hex(format!("model/{}", self.model_bytes).as_bytes())),
                bytes: self.model_bytes,
                kind: BlobKind::ModelBlob,
            });
        }
        blobs
    }

    pub fn template_bytes(&self) -> u64 {
        self.dependency_bytes + self.model_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BlobKind {
    Dependencies,
    ModelBlob,
    Code,
    InvocationInput,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlobRef {
    pub key: BlobKey,
    pub bytes: u64,
    pub kind: BlobKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceItem {
    pub item_id: ItemId,
    pub payload_bytes: u64,
    pub cost_units: f64,
}

impl InferenceItem {
    pub fn new(item_id: u64) -> Self {
        InferenceItem {
            item_id: ItemId(item_id),
            payload_bytes: 256,
            cost_units: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub awareness: Awareness,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_id: Option<ContextId>,
    /// Files the function reads when it does not rely on a hosted context.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<BlobRef>,
    pub items: Vec<InferenceItem>,
    pub resources: ResourceRequest,
    #[serde(default)]
    pub attempt: u32,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.items.is_empty() {
            return Err(ModelError::EmptyBatch(self.task_id));
        }
        if self.awareness == Awareness::Full && self.context_id.is_none() {
            return Err(ModelError::MissingContext(self.task_id));
        }
        if let Some(bad) = self
            .items
            .iter()
            .find(|i| !(i.cost_units > 0.0) || !i.cost_units.is_finite())
        {
            return Err(ModelError::NonPositiveCost(bad.item_id));
        }
        self.resources.validate()
    }

    pub fn batch_size(&self) -> usize {
        self.items.len()
    }

    pub fn total_units(&self) -> f64 {
        self.items.iter().map(|i| i.cost_units).sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("gpu catalog is empty")]
    EmptyCatalog,
    #[error("unknown awareness level {0:?}")]
    UnknownAwareness(String),
    #[error("tasks may request at most one gpu, got {0}")]
    MultiGpu(u32),
    #[error("task {0} has no inference items")]
    EmptyBatch(TaskId),
    #[error("task {0} is context-aware but names no context")]
    MissingContext(TaskId),
    #[error("item {0:?} has non-positive cost_units")]
    NonPositiveCost(ItemId),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_has_eight_models_with_release_years() {
        let cat = GpuCatalog::standard();
        assert_eq!(cat.entries.len(), 8);
        let years: Vec<_> = cat
            .entries
            .iter()
            .map(|e| (e.model.name.as_str(), e.model.release_year))
            .collect();
        assert!(years.contains(&("NVIDIA A10", 2021)));
        assert!(years.contains(&("NVIDIA TITAN X (Pascal)", 2016)));
        assert!(years.contains(&("NVIDIA H100 80GB HBM3", 2023)));
        assert_eq!(cat.entries.iter().map(|e| e.count).sum::<u32>(), 427);
        cat.validate().unwrap();
    }

    #[test]
    fn reference_speed_factors() {
        let cat = GpuCatalog::standard();
        assert_eq!(cat.get(A10).unwrap().speed_factor, 1.0);
        assert_eq!(cat.get(TITAN_X_PASCAL).unwrap().speed_factor, 0.5);
        let gtx = cat.get("NVIDIA GeForce GTX TITAN X").unwrap();
        assert!((gtx.speed_factor - 0.4).abs() < 1e-12);
    }

    #[test]
    fn catalog_lookup_is_forgiving() {
        let cat = GpuCatalog::standard();
        assert_eq!(cat.get("a10").unwrap().name, A10);
        assert_eq!(cat.get("titan x (pascal)").unwrap().name, TITAN_X_PASCAL);
        assert!(cat.get("Voodoo 2").is_none());
    }

    #[test]
    fn default_recipe_sizes() {
        let r = ContextRecipe::default_llm();
        assert_eq!(r.template_bytes(), 14_200_000_000);
        assert!(r.verify_id());
        assert_eq!(r.blobs().len(), 2);
    }

    #[test]
    fn recipes_differing_in_model_bytes_hash_differently() {
        let a = ContextRecipe::default_llm();
        let mut d = a.draft();
        d.model_bytes += 1;
        assert_ne!(a.context_id, d.hash());
        assert_eq!(a.context_id, a.draft().hash());
    }

    #[test]
    fn task_validation() {
        let mut t = TaskSpec {
            task_id: TaskId(1),
            awareness: Awareness::Full,
            context_id: None,
            inputs: vec![],
            items: vec![InferenceItem::new(0)],
            resources: ResourceRequest::default_task(),
            attempt: 0,
        };
        assert_eq!(t.validate(), Err(ModelError::MissingContext(TaskId(1))));
        t.awareness = Awareness::Partial;
        t.validate().unwrap();
        t.items.clear();
        assert_eq!(t.validate(), Err(ModelError::EmptyBatch(TaskId(1))));
        t.items.push(InferenceItem {
            item_id: ItemId(3),
            payload_bytes: 1,
            cost_units: 0.0,
        });
        assert_eq!(t.validate(), Err(ModelError::NonPositiveCost(ItemId(3))));
        t.items[0].cost_units = 1.0;
        t.resources.gpus = 2;
        assert_eq!(t.validate(), Err(ModelError::MultiGpu(2)));
    }

    #[test]
    fn default_task_fits_default_worker() {
        assert!(ResourceRequest::default_task().fits_within(&ResourceRequest::default_worker()));
        let mut big = ResourceRequest::default_task();
        big.memory_bytes = 11 * GB;
        assert!(!big.fits_within(&ResourceRequest::default_worker()));
    }
}
