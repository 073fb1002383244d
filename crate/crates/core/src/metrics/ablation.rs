use std::collections::HashMap;

use serde::Serialize;

use super::{analyze_pairs, summarize, EvalPair, Evaluation};
use crate::backends::BackendBundle;
use crate::error::{Error, Result};
use crate::maskgen::ThresholdStrategy;
use crate::pipeline::{InitVariant, PipelineConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Intermediate mask M′ against final mask M.
    Denoise,
    /// Initialization and constraint of the alignment.
    Init,
    /// Mask binarization threshold.
    Threshold,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [AblationAxis::Denoise, AblationAxis::Init, AblationAxis::Threshold];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "denoise" => Ok(AblationAxis::Denoise),
            "init" => Ok(AblationAxis::Init),
            "threshold" => Ok(AblationAxis::Threshold),
            other => Err(Error::UnknownAxis(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Denoise => "denoise",
            AblationAxis::Init => "init",
            AblationAxis::Threshold => "threshold",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid<T> {
    pub axes: Vec<AblationAxis>,
    pub inits: Vec<InitVariant>,
    pub thresholds: Vec<ThresholdStrategy<T>>,
}

impl<T: Scalar> Default for AblationGrid<T> {
    fn default() -> Self {
        Self {
            axes: AblationAxis::ALL.to_vec(),
            inits: InitVariant::ALL.to_vec(),
            thresholds: [0.1, 0.2, 0.3, 0.4]
                .into_iter()
                .map(|v| ThresholdStrategy::Fixed(T::lit(v)))
                .chain([ThresholdStrategy::Mean])
                .collect(),
        }
    }
}

impl<T: Scalar> AblationGrid<T> {
    /// Grid over the named axes (comma separated) with default variants.
    pub fn parse_axes(spec: &str) -> Result<Self> {
        let axes = spec
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(AblationAxis::parse)
            .collect::<Result<Vec<_>>>()?;
        if axes.is_empty() {
            return Err(Error::UnknownAxis(spec.to_string()));
        }
        Ok(Self {
            axes,
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    /// Configurations of the rows, in row order.
    pub configs: Vec<serde_json::Value>,
}

impl AblationTable {
    pub fn get(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.miou)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub tables: Vec<AblationTable>,
    /// Ids of the inconsistent pairs scored.
    pub subset: Vec<String>,
    pub seed: u64,
    pub backend_id: String,
}

impl AblationReport {
    pub fn table(&self, axis: AblationAxis) -> Option<&AblationTable> {
        self.tables.iter().find(|t| t.axis == axis)
    }
}

/// Scores mask mIoU over the inconsistent pairs for every variant of each
/// requested axis. Identical configurations are analyzed once.
pub fn run_ablations<T: Scalar>(
    pairs: &[EvalPair<T>],
    bundle: &BackendBundle<T>,
    base: &PipelineConfig<T>,
    grid: &AblationGrid<T>,
    global_seed: u64,
    parallelism: usize,
) -> Result<AblationReport> {
    let subset: Vec<EvalPair<T>> = pairs
        .iter()
        .filter(|p| p.gt_mask.is_some() && p.label == crate::dataset::Label::Inconsistent)
        .cloned()
        .collect();
    if subset.is_empty() {
        return Err(Error::Precondition("ablation needs inconsistent pairs with ground-truth masks".into()));
    }
    base.validate()?;
    let mut cache: HashMap<String, Evaluation> = HashMap::new();
    let mut run = |cfg: &PipelineConfig<T>| -> Result<(Evaluation, serde_json::Value)> {
        let json = cfg.to_json();
        let key = json.to_string();
        if let Some(e) = cache.get(&key) {
            return Ok((e.clone(), json));
        }
        let results = analyze_pairs(&subset, bundle, cfg, global_seed, parallelism)?;
        let e = summarize(&subset, &results)?;
        cache.insert(key, e.clone());
        Ok((e, json))
    };
    let mut tables = Vec::new();
    for &axis in &grid.axes {
        let mut rows = Vec::new();
        let mut configs = Vec::new();
        match axis {
            AblationAxis::Denoise => {
                let (e, json) = run(base)?;
                rows.push(AblationRow {
                    variant: "intermediate".into(),
                    miou: e.miou_intermediate.unwrap_or(0.0),
                });
                rows.push(AblationRow {
                    variant: "final".into(),
                    miou: e.miou.unwrap_or(0.0),
                });
                configs.push(json.clone());
                configs.push(json);
            }
            AblationAxis::Init => {
                for &init in &grid.inits {
                    let cfg = PipelineConfig { init, ..base.clone() };
                    let (e, json) = run(&cfg)?;
                    rows.push(AblationRow {
                        variant: init.label().into(),
                        miou: e.miou.unwrap_or(0.0),
                    });
                    configs.push(json);
                }
            }
            AblationAxis::Threshold => {
                for &t in &grid.thresholds {
                    let mut cfg = base.clone();
                    cfg.mask.threshold = t;
                    let (e, json) = run(&cfg)?;
                    rows.push(AblationRow {
                        variant: t.label(),
                        miou: e.miou.unwrap_or(0.0),
                    });
                    configs.push(json);
                }
            }
        }
        tables.push(AblationTable { axis, rows, configs });
    }
    Ok(AblationReport {
        tables,
        subset: subset.iter().map(|p| p.id.clone()).collect(),
        seed: global_seed,
        backend_id: bundle.id.clone(),
    })
}
