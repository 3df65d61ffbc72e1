use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fv::{default_top_k, SweepConfig};
use crate::model::{InjectionSite, LossPositions, ModelConfig, TrainHyper};
use crate::tasks::{PositionalSetting, EXAMPLE_LEN};
use crate::theory::{DiscreteTaskPair, TheoryHyper};

fn bad(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub n_symbols: u32,
    pub x_size: usize,
    pub y_size: usize,
    pub normal_seeds: Vec<u64>,
    pub ambiguous_seeds: Vec<u64>,
    pub overlap_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub shot_min: usize,
    pub shot_max: usize,
    pub grad_clip: f64,
    pub min_lr_frac: f64,
    pub loss_positions: LossPositions,
    pub precision: Precision,
    /// Held-out prompts per task and shot count.
    pub eval_prompts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvSection {
    /// `null` selects 10% of all heads.
    pub top_k: Option<usize>,
    pub aie_prompts: usize,
    pub aie_shots: usize,
    pub fv_shots: usize,
    pub fv_prompts_per_task: usize,
    pub ablation_draws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// `null` selects `n_layers / 3`.
    pub l_prime: Option<usize>,
    pub alpha_grid: Vec<f64>,
    pub site: InjectionSite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub lambda: f64,
    pub superposition_shots: usize,
    pub superposition_prompts_per_task: usize,
    pub attention_prompts: usize,
    pub factorial_prompts: usize,
    pub factorial_shots: usize,
    pub qinfo_prompts: usize,
    pub qinfo_shots: usize,
    pub pca_prompts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    pub resamples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    pub n_inputs: usize,
    pub overlap_fraction: f64,
    pub max_shots: usize,
    pub tau: f64,
    pub eta: f64,
    pub d: usize,
    pub init_scale: f64,
    pub steps: usize,
    pub lr: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub tasks: TaskSection,
    pub train: TrainSection,
    pub shots: Vec<usize>,
    pub positional_settings: Vec<PositionalSetting>,
    pub fv: FvSection,
    pub sweep: SweepSection,
    pub analysis: AnalysisSection,
    pub bootstrap: BootstrapSection,
    pub theory: TheorySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 20240601,
            out_dir: PathBuf::from("runs/default"),
            model: ModelSection {
                n_layers: 4,
                n_heads: 4,
                d_model: 128,
                d_head: 32,
                d_ff: 256,
            },
            tasks: TaskSection {
                n_symbols: 20,
                x_size: 12,
                y_size: 8,
                normal_seeds: (100..108).collect(),
                ambiguous_seeds: vec![200, 201],
                overlap_fraction: 1.0 / 3.0,
            },
            train: TrainSection {
                steps: 6000,
                batch: 16,
                lr: 1e-3,
                warmup: 600,
                weight_decay: 0.01,
                shot_min: 1,
                shot_max: 10,
                grad_clip: 1.0,
                min_lr_frac: 0.1,
                loss_positions: LossPositions::ContextSeparators,
                precision: Precision::F32,
                eval_prompts: 50,
            },
            shots: vec![3, 5, 10],
            positional_settings: vec![PositionalSetting::Setting1, PositionalSetting::Setting2],
            fv: FvSection {
                top_k: None,
                aie_prompts: 20,
                aie_shots: 5,
                fv_shots: 5,
                fv_prompts_per_task: 5,
                ablation_draws: 20,
            },
            sweep: SweepSection {
                l_prime: None,
                alpha_grid: vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
                site: InjectionSite::LayerInput,
            },
            analysis: AnalysisSection {
                lambda: 1e-6,
                superposition_shots: 5,
                superposition_prompts_per_task: 5,
                attention_prompts: 20,
                factorial_prompts: 10,
                factorial_shots: 5,
                qinfo_prompts: 10,
                qinfo_shots: 5,
                pca_prompts: 5,
            },
            bootstrap: BootstrapSection { resamples: 1000 },
            theory: TheorySection {
                n_inputs: 6,
                overlap_fraction: 1.0 / 3.0,
                max_shots: 3,
                tau: 0.01,
                eta: 0.01,
                d: 4,
                init_scale: 0.1,
                steps: 6000,
                lr: 0.02,
                beta_start: 20.0,
                beta_end: 2000.0,
                tol: 0.05,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| bad("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Longest prompt the pipeline builds.
    pub fn max_shots(&self) -> usize {
        let a = &self.analysis;
        self.shots
            .iter()
            .copied()
            .chain([
                self.train.shot_max,
                self.fv.aie_shots,
                self.fv.fv_shots,
                a.superposition_shots,
                a.factorial_shots,
                a.qinfo_shots,
            ])
            .max()
            .unwrap_or(1)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_head: m.d_head,
            d_ff: m.d_ff,
            vocab_size: self.tasks.n_symbols as usize + 3,
            max_seq: EXAMPLE_LEN * self.max_shots() + 2,
            seed: derive_seed(self.master_seed, "model-init"),
        }
    }

    pub fn train_hyper(&self) -> TrainHyper {
        let t = &self.train;
        TrainHyper {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            warmup: t.warmup,
            weight_decay: t.weight_decay,
            shot_min: t.shot_min,
            shot_max: t.shot_max,
            seed: derive_seed(self.master_seed, "train"),
            grad_clip: t.grad_clip,
            min_lr_frac: t.min_lr_frac,
            loss_positions: t.loss_positions,
        }
    }

    pub fn top_k(&self) -> usize {
        self.fv
            .top_k
            .unwrap_or_else(|| default_top_k(self.model.n_layers, self.model.n_heads))
    }

    pub fn sweep_config(&self) -> SweepConfig {
        let mut s = SweepConfig::default_for(self.model.n_layers);
        if let Some(l) = self.sweep.l_prime {
            s.l_prime = l;
        }
        s.alpha_grid = self.sweep.alpha_grid.clone();
        s.site = self.sweep.site;
        s
    }

    pub fn theory_hyper(&self) -> TheoryHyper {
        let t = &self.theory;
        TheoryHyper {
            steps: t.steps,
            lr: t.lr,
            beta_start: t.beta_start,
            beta_end: t.beta_end,
            n: t.max_shots,
            seed: derive_seed(self.master_seed, "theory-train"),
        }
    }

    /// SHA-256 of the canonical JSON encoding, with `out_dir` blanked so
    /// the same experiment hashes equally wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate().map_err(|e| bad("model", e.to_string()))?;
        let t = &self.tasks;
        if t.x_size < 4 || t.y_size < 2 {
            return Err(bad("tasks.x_size", "need x_size >= 4 and y_size >= 2"));
        }
        if t.x_size.max(t.y_size) > t.n_symbols as usize {
            return Err(bad("tasks.n_symbols", "must cover x_size and y_size"));
        }
        if t.normal_seeds.is_empty() {
            return Err(bad("tasks.normal_seeds", "need at least one normal task"));
        }
        let k = (t.overlap_fraction * t.x_size as f64 + 1e-9).floor() as usize;
        if !t.ambiguous_seeds.is_empty() && (k < 1 || k >= t.x_size) {
            return Err(bad("tasks.overlap_fraction", "must leave 1..x_size-1 agreement inputs"));
        }
        let tr = &self.train;
        if tr.steps == 0 || tr.batch == 0 {
            return Err(bad("train.steps", "steps and batch must be positive"));
        }
        if !(tr.lr >= 0.0 && tr.lr.is_finite()) {
            return Err(bad("train.lr", "must be a finite nonnegative number"));
        }
        if tr.shot_min == 0 || tr.shot_min > tr.shot_max {
            return Err(bad("train.shot_min", "need 1 <= shot_min <= shot_max"));
        }
        if tr.eval_prompts == 0 {
            return Err(bad("train.eval_prompts", "must be positive"));
        }
        if self.shots.is_empty() {
            return Err(bad("shots", "must be nonempty"));
        }
        if let Some(i) = self.shots.iter().position(|&s| s == 0) {
            return Err(bad(&format!("shots[{i}]"), "shot count must be at least 1"));
        }
        let a = &self.analysis;
        for (field, v, min) in [
            ("fv.aie_prompts", self.fv.aie_prompts, 10),
            ("fv.aie_shots", self.fv.aie_shots, 1),
            ("fv.fv_shots", self.fv.fv_shots, 1),
            ("fv.fv_prompts_per_task", self.fv.fv_prompts_per_task, 1),
            ("fv.ablation_draws", self.fv.ablation_draws, 1),
            ("analysis.superposition_shots", a.superposition_shots, 1),
            ("analysis.superposition_prompts_per_task", a.superposition_prompts_per_task, 1),
            ("analysis.attention_prompts", a.attention_prompts, 1),
            ("analysis.factorial_prompts", a.factorial_prompts, 1),
            ("analysis.factorial_shots", a.factorial_shots, 2),
            ("analysis.qinfo_prompts", a.qinfo_prompts, 1),
            ("analysis.qinfo_shots", a.qinfo_shots, 2),
            ("analysis.pca_prompts", a.pca_prompts, 3),
            ("bootstrap.resamples", self.bootstrap.resamples, 1),
        ] {
            if v < min {
                return Err(bad(field, format!("must be at least {min}")));
            }
        }
        if self.shots.iter().any(|&s| s < 2) && !self.tasks.ambiguous_seeds.is_empty() {
            return Err(bad("shots", "attention statistics need at least 2 shots"));
        }
        let heads = self.model.n_layers * self.model.n_heads;
        if self.top_k() == 0 || self.top_k() > heads {
            return Err(bad("fv.top_k", format!("must lie in 1..={heads}")));
        }
        if self.sweep_config().l_prime >= self.model.n_layers {
            return Err(bad("sweep.l_prime", "must be below n_layers"));
        }
        if self.sweep.alpha_grid.is_empty() || self.sweep.alpha_grid.iter().any(|a| !a.is_finite()) {
            return Err(bad("sweep.alpha_grid", "must be nonempty and finite"));
        }
        if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
            return Err(bad("analysis.lambda", "must be finite and nonnegative"));
        }
        let th = &self.theory;
        if th.max_shots < 2 {
            return Err(bad("theory.max_shots", "must exceed 1"));
        }
        if !(th.tau > 0.0 && th.eta > 0.0) {
            return Err(bad("theory.tau", "tau and eta must be positive"));
        }
        if th.d == 0 || th.n_inputs < 2 {
            return Err(bad("theory.d", "need d >= 1 and n_inputs >= 2"));
        }
        if !(th.beta_start > 0.0 && th.beta_end > 0.0) {
            return Err(bad("theory.beta_start", "smoothing temperatures must be positive"));
        }
        DiscreteTaskPair::standard(th.n_inputs, th.overlap_fraction).map_err(|e| bad("theory.overlap_fraction", e.to_string()))?;
        Ok(())
    }
}

/// First eight bytes of `sha256(master_seed_le ‖ label)`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
