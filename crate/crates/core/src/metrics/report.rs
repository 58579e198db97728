//! One-stop evaluation of a trained model into a serializable report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::diagnostics::{
    cross_class_similar_count, per_class_consistency_vs_accuracy, sdfa_similarity, ClassBreakdown, CrossClassCounts,
};
use crate::metrics::parts::{BoxSize, DEFAULT_BOX_RATIO};
use crate::metrics::perturb::{Noise, PgdConfig};
use crate::metrics::scores::{observe, ConsistencyResult, StabilityResult};
use crate::model::{HeadKind, ModelConfig, ProtoNet};
use crate::synthdata::Dataset;
use crate::trainer;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub mu: f64,
    pub box_ratio: f64,
    pub noises: Vec<Noise>,
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub threads: usize,
    pub similar_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            mu: 0.8,
            box_ratio: DEFAULT_BOX_RATIO,
            noises: vec![Noise::Gauss { sigma: 0.2 }, Noise::Pgd(PgdConfig::default())],
            seed: 0,
            threads: 0,
            similar_threshold: 0.6,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::InvalidConfig(format!("mu {} outside [0, 1]", self.mu)));
        }
        if !(-1.0..=1.0).contains(&self.similar_threshold) {
            return Err(Error::InvalidConfig(format!(
                "similarity threshold {} outside [-1, 1]",
                self.similar_threshold
            )));
        }
        for n in &self.noises {
            n.validate()?;
        }
        BoxSize::from_ratio(64, self.box_ratio).map(|_| ())
    }
}

/// Ablation label of a head / alignment combination.
pub fn method_name(head: HeadKind, sdfa: bool) -> &'static str {
    match (head, sdfa) {
        (HeadKind::Fc, false) => "base",
        (HeadKind::Fc, true) => "base+SDFA",
        (HeadKind::Sa, false) => "base+SA",
        (HeadKind::Sa, true) => "base+SA+SDFA",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: MetricsConfig,
    pub model: ModelConfig,
    pub model_provenance: serde_json::Value,
    /// [`method_name`] when the provenance records how the model was trained.
    pub method: Option<String>,
    pub train_seed: Option<u64>,
    pub images: usize,
    pub consistency: ConsistencyResult,
    pub stability: Vec<StabilityResult>,
    pub accuracy: f64,
    pub per_class: Vec<ClassBreakdown>,
    pub sdfa_similarity: f64,
    pub cross_class: CrossClassCounts,
    /// Negative on-class weights of a fully connected head.
    pub negative_on_class_weights: Option<usize>,
    pub warnings: Vec<String>,
}

pub const CSV_HEADER: &str = "method,train_seed,consistency,stability_gauss,stability_pgd,accuracy,sdfa_similarity,cross_class_mean,negative_on_class_weights";

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        CSV_HEADER
    }

    pub fn stability_of(&self, kind: &str) -> Option<f64> {
        self.stability.iter().find(|s| s.noise.name() == kind).map(|s| s.score)
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method.as_deref().unwrap_or(""),
            self.train_seed.map(|s| s.to_string()).unwrap_or_default(),
            self.consistency.score,
            opt(self.stability_of("gauss")),
            opt(self.stability_of("pgd")),
            self.accuracy,
            self.sdfa_similarity,
            self.cross_class.mean,
            self.negative_on_class_weights.map(|n| n.to_string()).unwrap_or_default(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "report schema {} (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

fn trained_as(model: &ProtoNet) -> (Option<String>, Option<u64>) {
    let train = &model.provenance["train"];
    let sdfa = train["sdfa"].as_bool();
    let method = sdfa.map(|s| method_name(model.config().head, s).to_string());
    (method, train["seed"].as_u64())
}

/// Every metric on the test split of `dataset`.
pub fn evaluate(model: &ProtoNet, dataset: &Dataset, cfg: &MetricsConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    if dataset.num_classes != model.config().num_classes || dataset.image_size != model.config().image_size {
        return Err(Error::InvalidConfig(format!(
            "dataset ({} classes, {} px) does not match the model ({} classes, {} px)",
            dataset.num_classes,
            dataset.image_size,
            model.config().num_classes,
            model.config().image_size
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let images = dataset.test();
    let size = BoxSize::from_ratio(dataset.image_size, cfg.box_ratio)?;
    pool.install(|| {
        let obs = observe(model, images, dataset.num_parts, size, &cfg.noises, cfg.seed)?;
        let consistency = obs.consistency(cfg.mu)?;
        let stability = (0..cfg.noises.len()).map(|k| obs.stability(k)).collect::<Result<Vec<_>>>()?;
        let per_class = per_class_consistency_vs_accuracy(model, images, &consistency)?;
        let mut warnings = Vec::new();
        if !consistency.undefined_classes.is_empty() {
            warnings.push(format!(
                "{} class(es) without test images; their prototypes are excluded: {:?}",
                consistency.undefined_classes.len(),
                consistency.undefined_classes
            ));
        }
        let (method, train_seed) = trained_as(model);
        Ok(MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            tool_version: crate::TOOL_VERSION.to_string(),
            config: cfg.clone(),
            model: model.config().clone(),
            model_provenance: model.provenance.clone(),
            method,
            train_seed,
            images: images.len(),
            consistency,
            stability,
            accuracy: trainer::accuracy(model, images)?,
            per_class,
            sdfa_similarity: sdfa_similarity(model, images)?,
            cross_class: cross_class_similar_count(&model.bank(), cfg.similar_threshold),
            negative_on_class_weights: model.fc_head().map(|h| h.negative_on_class(model.allocation())),
            warnings,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names() {
        assert_eq!(method_name(HeadKind::Fc, false), "base");
        assert_eq!(method_name(HeadKind::Sa, true), "base+SA+SDFA");
    }

    #[test]
    fn config_rejects_bad_mu() {
        let cfg = MetricsConfig { mu: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(MetricsConfig::default().validate().is_ok());
    }
}
