//! Experiment specifications, command-line overrides and the named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vulnlab_core::losses::{PartitionWeights, Reduction};
use vulnlab_core::model::ModelConfig;
use vulnlab_core::packing::Regime;
use vulnlab_core::trainer::TrainConfig;

/// One training run: configuration plus where its data lives and where its
/// artifacts go. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Directory holding `train.jsonl`, `validation.jsonl` and `test.jsonl`.
    pub data: PathBuf,
    pub out: PathBuf,
    /// Seed for the base model weights.
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let spec = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text)?,
        };
        Ok(spec)
    }

    /// Every configuration problem, including missing data files.
    pub fn validate(&self) -> Vec<String> {
        let mut problems: Vec<String> = self.model.validate();
        problems.extend(self.train.validate());
        if self.model.context_size != self.train.context_size {
            problems.push(format!(
                "model.context_size ({}) differs from train.context_size ({})",
                self.model.context_size, self.train.context_size
            ));
        }
        for split in SPLITS {
            let p = self.data.join(format!("{split}.jsonl"));
            if !p.is_file() {
                problems.push(format!("missing dataset file {}", p.display()));
            }
        }
        problems
    }
}

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

/// Command-line overrides applied on top of a config file or preset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub context_size: Option<usize>,
    pub max_funcs_per_batch: Option<usize>,
    pub gamma: Option<f64>,
    pub weights: Option<PartitionWeights>,
    pub reduction: Option<Reduction>,
    pub regime: Option<Regime>,
    pub epochs: Option<usize>,
    pub lr_max: Option<f64>,
    /// Train every weight instead of LoRA adapters.
    pub full_finetune: bool,
}

impl Overrides {
    pub fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(d) = &self.data {
            spec.data = d.clone();
        }
        if let Some(s) = self.seed {
            spec.train.seed = s;
            spec.model_seed = s;
        }
        if let Some(c) = self.context_size {
            spec.train.context_size = c;
            spec.model.context_size = c;
        }
        if let Some(m) = self.max_funcs_per_batch {
            spec.train.max_funcs_per_batch = Some(m);
        }
        if let Some(g) = self.gamma {
            spec.train.loss.focal_gamma = g;
        }
        if let Some(w) = self.weights {
            spec.train.loss.partition_weights = w;
        }
        if let Some(r) = self.reduction {
            spec.train.loss.reduction = r;
        }
        if let Some(r) = self.regime {
            spec.train.loss.objective = r;
        }
        if let Some(e) = self.epochs {
            spec.train.epochs = e;
        }
        if let Some(lr) = self.lr_max {
            spec.train.lr_max = lr;
        }
        if self.full_finetune {
            spec.train.lora = None;
        }
    }
}

/// How a sweep's summary table is laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `Variant | ROC AUC | F1`.
    Scores,
    /// `<header> | Validation ROC AUC`.
    Validation,
    /// `<header> | Test ROC AUC`.
    Test,
    /// One column per variant; rows ROC AUC, F1, best epoch, threshold.
    Transposed,
    /// `Weight | Best val. AUC | Best epoch | Test AUC | Test F1 | Threshold`.
    Weights,
    /// `Weight | γ | Val. AUC | Test AUC | Test F1`.
    Combined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    /// Row or column label in the summary table.
    pub label: String,
    /// Directory name under the sweep output.
    pub slug: String,
    pub spec: ExperimentSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub name: String,
    pub header: String,
    pub layout: Layout,
    pub variants: Vec<Variant>,
}

pub const PRESETS: [&str; 9] = [
    "rq1",
    "rq2",
    "rq3",
    "rq4",
    "rq5",
    "rq6",
    "rq7-focal",
    "rq7-weights",
    "rq7-combo",
];

pub const BALANCED_DATA: &str = "data/x1";
pub const IMBALANCED_DATA: &str = "data/x1-p3";

fn base(name: &str, data: &str) -> ExperimentSpec {
    ExperimentSpec {
        name: name.into(),
        data: data.into(),
        out: PathBuf::from("runs").join(name),
        model_seed: 1,
        model: ModelConfig::default(),
        train: TrainConfig {
            lr_max: 1e-3,
            epochs: 10,
            seed: 1,
            ..TrainConfig::default()
        },
    }
}

fn variant(label: &str, slug: &str, spec: ExperimentSpec, edit: impl FnOnce(&mut ExperimentSpec)) -> Variant {
    let mut spec = spec;
    edit(&mut spec);
    Variant {
        label: label.into(),
        slug: slug.into(),
        spec,
    }
}

/// Builds a named preset. Every variant carries explicit seeds.
pub fn preset(name: &str) -> anyhow::Result<Sweep> {
    let sweep = |header: &str, layout, variants| Sweep {
        name: name.into(),
        header: header.into(),
        layout,
        variants,
    };
    Ok(match name {
        "rq1" => sweep(
            "Model",
            Layout::Scores,
            vec![variant("toy decoder + LoRA", "lora", base(name, BALANCED_DATA), |_| {})],
        ),
        "rq2" => sweep(
            "Model",
            Layout::Scores,
            vec![variant("toy decoder + LoRA", "lora", base(name, IMBALANCED_DATA), |_| {})],
        ),
        "rq3" => {
            let b = base(name, IMBALANCED_DATA);
            sweep(
                "Objective",
                Layout::Test,
                vec![
                    variant("Next token prediction", "ntp", b.clone(), |s| s.train.loss.objective = Regime::Ntp),
                    variant("Classification", "classification", b, |_| {}),
                ],
            )
        }
        "rq4" => {
            let b = base(name, BALANCED_DATA);
            sweep(
                "Max. functions per batch",
                Layout::Validation,
                vec![
                    variant("No limit", "no-limit", b.clone(), |_| {}),
                    variant("50", "cap-50", b.clone(), |s| s.train.max_funcs_per_batch = Some(50)),
                    variant("100", "cap-100", b, |s| s.train.max_funcs_per_batch = Some(100)),
                ],
            )
        }
        "rq5" => {
            let b = base(name, BALANCED_DATA);
            sweep(
                "Loss reduction",
                Layout::Validation,
                vec![
                    variant("Mean", "mean", b.clone(), |s| s.train.loss.reduction = Reduction::Mean),
                    variant("Sum", "sum", b, |s| s.train.loss.reduction = Reduction::Sum),
                ],
            )
        }
        "rq6" => {
            let b = base(name, BALANCED_DATA);
            let ctx = |c: usize| {
                move |s: &mut ExperimentSpec| {
                    s.model.context_size = c;
                    s.train.context_size = c;
                }
            };
            sweep(
                "Context size",
                Layout::Test,
                vec![
                    variant("512 Tokens", "ctx-512", b.clone(), ctx(512)),
                    variant("2048 Tokens", "ctx-2048", b, ctx(2048)),
                ],
            )
        }
        "rq7-focal" => {
            let b = base(name, IMBALANCED_DATA);
            let variants = [0.0, 1.0, 3.0, 5.0]
                .iter()
                .map(|&g| {
                    variant(&format!("γ={g}"), &format!("gamma-{g}"), b.clone(), |s| {
                        s.train.loss.focal_gamma = g
                    })
                })
                .collect();
            sweep("", Layout::Transposed, variants)
        }
        "rq7-weights" => {
            let b = base(name, IMBALANCED_DATA);
            let variants = [30.0, 10.0, 3.0, 1.0]
                .iter()
                .map(|&w| {
                    let label = if w == 1.0 { "1.0 (base)".to_string() } else { format!("{w}") };
                    variant(&label, &format!("weight-{w}"), b.clone(), |s| {
                        s.train.loss.partition_weights = PartitionWeights::emphasize_changed(w)
                    })
                })
                .collect();
            sweep("Weight", Layout::Weights, variants)
        }
        "rq7-combo" => {
            let b = base(name, IMBALANCED_DATA);
            let grid: [(Option<f64>, f64); 6] = [
                (Some(3.0), 1.0),
                (Some(10.0), 3.0),
                (Some(10.0), 1.0),
                (Some(3.0), 3.0),
                (None, 1.0),
                (None, 3.0),
            ];
            let variants = grid
                .iter()
                .map(|&(w, g)| {
                    let wl = w.map_or("None".to_string(), |w| format!("{w}"));
                    variant(&format!("{wl}|{g}"), &format!("weight-{wl}-gamma-{g}"), b.clone(), |s| {
                        s.train.loss.focal_gamma = g;
                        s.train.loss.partition_weights =
                            w.map_or_else(PartitionWeights::uniform, PartitionWeights::emphasize_changed);
                    })
                })
                .collect();
            sweep("Weight", Layout::Combined, variants)
        }
        other => anyhow::bail!("unknown preset `{other}`; available: {}", PRESETS.join(", ")),
    })
}

/// A single config file is a one-variant sweep.
pub fn single(spec: ExperimentSpec) -> Sweep {
    Sweep {
        name: spec.name.clone(),
        header: "Run".into(),
        layout: Layout::Scores,
        variants: vec![Variant {
            label: spec.name.clone(),
            slug: "run".into(),
            spec,
        }],
    }
}
