//! Run configuration: every tunable in one strict, human-editable TOML
//! document. Unknown keys are rejected so hyperparameter typos fail loudly.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use bridgevq_core::mat::Matrix;
use bridgevq_core::noise_model::{NetArch, NoisePredictor};
use bridgevq_core::ou_bridge::DiffusionSchedule;
use bridgevq_core::quantizer::{Codebook, TemperatureSchedule};
use bridgevq_core::toy_domain::ToyConfig;
use bridgevq_core::training::{DecoderModel, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub codebook: CodebookConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub temperatures: TemperatureConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub inpaint: InpaintConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Scalar fill or explicit per-step list of time increments.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum DeltaSpec {
    Uniform(f64),
    PerStep(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub delta: DeltaSpec,
    pub theta: f64,
    pub eta: f64,
    pub z_star: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 50,
            delta: DeltaSpec::Uniform(0.1),
            theta: 2.0,
            eta: 0.1,
            z_star: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    pub k: usize,
    pub dim: usize,
    /// "ring" places embeddings at regular angles; "random" draws them.
    pub init: String,
    pub radius: f64,
    pub init_scale: f64,
    pub trainable: bool,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            k: 8,
            dim: 2,
            init: "ring".to_string(),
            radius: 1.0,
            init_scale: 0.3,
            trainable: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub positions: usize,
    pub noise_std: f64,
    /// Rows of the frozen evaluation dataset written by `train`.
    pub export_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            positions: 5,
            noise_std: 0.1,
            export_count: 10_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureConfig {
    pub tau: f64,
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        TemperatureConfig {
            tau: 1.0,
            tau_start: 1.0,
            tau_end: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub step_count: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub end_to_end: bool,
    pub reg_sign: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Every this many steps, probe the sampler on held-out draws and keep
    /// the parameters with the best walk-validity seen so far; the final
    /// checkpoint carries that snapshot. 0 disables selection.
    pub select_every: u64,
    /// Held-out draws per selection probe.
    pub select_draws: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 128,
            step_count: 10_000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            end_to_end: false,
            reg_sign: 1.0,
            checkpoint_every: 5_000,
            log_every: 100,
            select_every: 0,
            select_draws: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub stochastic_reverse: bool,
    pub record_stride: usize,
    pub svg_count: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            stochastic_reverse: true,
            record_stride: 10,
            svg_count: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintConfig {
    /// Known positions: comma-separated indices, or "all" / "none".
    pub mask: String,
    /// Codebook index pinned at each known position, in mask order.
    pub pin_indices: Vec<usize>,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            mask: "0,4".to_string(),
            pin_indices: vec![0, 4],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Positions hidden from the conditional likelihood.
    pub nll_masked: Vec<usize>,
    /// Monte Carlo draws per evaluated sample.
    pub mc_draws: usize,
    /// Unconditional samples for validity and histogram metrics.
    pub sample_count: usize,
    /// Dataset rows scored by the conditional likelihoods.
    pub nll_sample_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nll_masked: vec![2, 3, 4],
            mc_draws: 64,
            sample_count: 10_000,
            nll_sample_count: 50,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            schedule: Default::default(),
            codebook: Default::default(),
            data: Default::default(),
            temperatures: Default::default(),
            training: Default::default(),
            sampling: Default::default(),
            inpaint: Default::default(),
            eval: Default::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook.k < 1 || self.codebook.dim < 1 {
            bail!("codebook needs k >= 1 and dim >= 1");
        }
        if self.codebook.init != "ring" && self.codebook.init != "random" {
            bail!("codebook.init must be \"ring\" or \"random\"");
        }
        if self.codebook.init == "ring" && self.codebook.dim != 2 {
            bail!("ring initialization requires dim = 2");
        }
        if self.data.positions == 0 {
            bail!("data.positions must be >= 1");
        }
        if !(self.data.noise_std > 0.0) {
            bail!("data.noise_std must be positive");
        }
        if let DeltaSpec::PerStep(list) = &self.schedule.delta {
            if list.len() != self.schedule.steps {
                bail!(
                    "schedule.delta lists {} entries for {} steps",
                    list.len(),
                    self.schedule.steps
                );
            }
        }
        for &p in &self.eval.nll_masked {
            if p >= self.data.positions {
                bail!("eval.nll_masked position {p} outside the latent");
            }
        }
        let known = self.known_positions()?;
        if known.len() != self.inpaint.pin_indices.len() {
            bail!(
                "inpaint.pin_indices must list one codebook index per known position ({} vs {})",
                self.inpaint.pin_indices.len(),
                known.len()
            );
        }
        for &k in &self.inpaint.pin_indices {
            if k >= self.codebook.k {
                bail!("inpaint pin index {k} outside the codebook");
            }
        }
        Ok(())
    }

    pub fn known_positions(&self) -> Result<Vec<usize>> {
        parse_mask_spec(&self.inpaint.mask, self.data.positions)
    }

    pub fn delta_list(&self) -> Vec<f64> {
        match &self.schedule.delta {
            DeltaSpec::Uniform(dt) => vec![*dt; self.schedule.steps],
            DeltaSpec::PerStep(list) => list.clone(),
        }
    }

    pub fn build_schedule(&self) -> Result<DiffusionSchedule> {
        let z_star = Matrix::filled(self.codebook.dim, self.data.positions, self.schedule.z_star);
        Ok(DiffusionSchedule::new(
            self.delta_list(),
            self.schedule.theta,
            self.schedule.eta,
            z_star,
        )?)
    }

    pub fn build_codebook(&self, rng: &mut impl rand::Rng) -> Result<Codebook> {
        let vectors = match self.codebook.init.as_str() {
            "ring" => Matrix::from_fn(self.codebook.k, 2, |j, i| {
                let angle = 2.0 * std::f64::consts::PI * j as f64 / self.codebook.k as f64;
                self.codebook.radius * if i == 0 { angle.cos() } else { angle.sin() }
            }),
            _ => Matrix::randn(self.codebook.k, self.codebook.dim, rng)
                .scale(self.codebook.init_scale),
        };
        Ok(Codebook::new(vectors, self.codebook.trainable)?)
    }

    pub fn build_predictor(
        &self,
        schedule: &DiffusionSchedule,
        rng: &mut impl rand::Rng,
    ) -> NoisePredictor {
        NoisePredictor::init(
            NetArch::toy_for_schedule(self.codebook.dim, schedule, self.codebook.radius),
            rng,
        )
    }

    pub fn build_decoder(&self) -> Result<DecoderModel> {
        Ok(DecoderModel::new(self.data.noise_std)?)
    }

    pub fn build_temperatures(&self) -> Result<TemperatureSchedule> {
        Ok(TemperatureSchedule::geometric(
            self.temperatures.tau,
            self.temperatures.tau_start,
            self.temperatures.tau_end,
            self.schedule.steps,
        )?)
    }

    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            centroids: self.codebook.k,
            positions: self.data.positions,
            radius: self.codebook.radius,
            noise_std: self.data.noise_std,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.training.batch_size,
            step_count: self.training.step_count,
            learning_rate: self.training.learning_rate,
            adam_beta1: self.training.adam_beta1,
            adam_beta2: self.training.adam_beta2,
            adam_eps: self.training.adam_eps,
            end_to_end: self.training.end_to_end,
            reg_sign: self.training.reg_sign,
            seed: self.seed,
        }
    }
}

/// Mask grammar: comma-separated position indices, or "all" / "none".
pub fn parse_mask_spec(spec: &str, positions: usize) -> Result<Vec<usize>> {
    let trimmed = spec.trim();
    match trimmed {
        "all" => Ok((0..positions).collect()),
        "none" | "" => Ok(Vec::new()),
        _ => {
            let mut out = Vec::new();
            for part in trimmed.split(',') {
                let idx: usize = part
                    .trim()
                    .parse()
                    .with_context(|| format!("malformed mask entry {part:?}"))?;
                if idx >= positions {
                    bail!("mask position {idx} outside 0..{positions}");
                }
                if out.contains(&idx) {
                    bail!("duplicate mask position {idx}");
                }
                out.push(idx);
            }
            Ok(out)
        }
    }
}

/// FNV-1a over bytes, hex-encoded; used for config and dataset fingerprints.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    format!("{hash:016x}")
}
