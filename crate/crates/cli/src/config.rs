use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use diffrouter::datagen::{Family, InstanceSpec, TopologyKind};
use diffrouter::netcore::{Activation, AdamWConfig};
use diffrouter::router::{RouterConfig, Variant};
use diffrouter::schedules::{build_bridge_schedule_scaled, build_diffusion_schedule, Schedule, ScheduleProfile};
use diffrouter::train::{Regime, TrainConfig};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub family: String,
    pub topology: String,
    pub k: usize,
    pub d: usize,
    pub latent_dim: usize,
    /// Pairs per edge.
    pub n: usize,
    /// Evaluation tuples.
    pub m: usize,
    pub shift: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            family: "gaussian-affine".into(),
            topology: "star".into(),
            k: 3,
            d: 2,
            latent_dim: 2,
            n: 20_000,
            m: 5000,
            shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub variant: String,
    pub profile: String,
    pub steps: usize,
    pub bridge_scale: f64,
    pub eta: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            variant: "diffusion".into(),
            profile: "linear".into(),
            steps: 100,
            bridge_scale: 1.0,
            eta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
    pub activation: String,
    pub time_dim: usize,
    pub embed_dim: usize,
    pub embed_init_std: f64,
    pub zero_output: bool,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            hidden: vec![64, 64, 64],
            activation: "silu".into(),
            time_dim: 16,
            embed_dim: 8,
            embed_init_std: 0.1,
            zero_output: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub finetune_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub lambda_unpaired: f64,
    pub lambda_paired: f64,
    pub n_refine: usize,
    pub curriculum: bool,
    pub log_window: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 20_000,
            finetune_steps: 10_000,
            batch_size: 128,
            lr: 1e-3,
            finetune_lr: 5e-5,
            warmup_steps: 500,
            weight_decay: AdamWConfig::default().weight_decay,
            lambda_unpaired: 1.0,
            lambda_paired: 1.0,
            n_refine: 5,
            curriculum: true,
            log_window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub projections: usize,
    pub mmd_points: usize,
    /// Sources per direction; 0 uses every evaluation tuple.
    pub samples: usize,
    /// Reverse steps per hop; 0 uses the full schedule.
    pub steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            projections: 128,
            mmd_points: 1000,
            samples: 2000,
            steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub refine_steps: Vec<usize>,
    pub lambda2: Vec<f64>,
    pub lr_scales: Vec<f64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            refine_steps: vec![0, 1, 3, 5],
            lambda2: vec![0.0, 0.3, 1.0, 3.0],
            lr_scales: vec![0.1, 1.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub outdir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            outdir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub run: RunSection,
}

fn parse_field<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Failure::invalid_config(format!("{field}: unrecognised value '{value}'")).into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Failure::invalid_config(e.message().to_string()).into())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::missing_input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of SHA-256 over the canonical JSON form. Object
    /// keys are sorted, and the output directory is left out so the same
    /// experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(run) = value.get_mut("run").and_then(|v| v.as_object_mut()) {
            run.remove("outdir");
        }
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn family(&self) -> Result<Family> {
        parse_field("data.family", &self.data.family)
    }

    pub fn variant(&self) -> Result<Variant> {
        parse_field("schedule.variant", &self.schedule.variant)
    }

    pub fn instance_spec(&self) -> Result<InstanceSpec> {
        let d = &self.data;
        let topology: TopologyKind = parse_field("data.topology", &d.topology)?;
        Ok(InstanceSpec {
            family: self.family()?,
            topology,
            k: d.k,
            d: d.d,
            latent_dim: d.latent_dim,
            n: d.n,
            m: d.m,
            seed: diffrouter::seed::derive_seed(self.run.seed, "datagen"),
            shift: d.shift,
        })
    }

    pub fn schedule(&self) -> Result<Schedule> {
        self.schedule_for(self.variant()?)
    }

    pub fn schedule_for(&self, variant: Variant) -> Result<Schedule> {
        let s = &self.schedule;
        let sch = match variant {
            Variant::Diffusion => {
                let profile: ScheduleProfile = s.profile.parse()?;
                Schedule::Diffusion(build_diffusion_schedule(s.steps, profile)?)
            }
            Variant::Bridge => Schedule::Bridge(build_bridge_schedule_scaled(s.steps, s.bridge_scale)?),
        };
        Ok(sch.with_eta(s.eta)?)
    }

    pub fn router_config(&self, variant: Variant) -> Result<RouterConfig> {
        let n = &self.network;
        let cfg = RouterConfig {
            time_dim: n.time_dim,
            embed_dim: n.embed_dim,
            hidden: n.hidden.clone(),
            activation: parse_field::<Activation>("network.activation", &n.activation)?,
            embed_init_std: n.embed_init_std,
            zero_output: n.zero_output,
            variant,
            ..RouterConfig::new(self.data.d, self.data.k, self.schedule.steps)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training settings for one regime; `component` names the seed stream.
    pub fn train_config(&self, regime: Regime, variant: Variant, component: &str) -> TrainConfig {
        let t = &self.train;
        let (steps, lr) = match regime {
            Regime::Finetune => (t.finetune_steps, t.finetune_lr),
            _ => (t.steps, t.lr),
        };
        TrainConfig {
            lambda_unpaired: t.lambda_unpaired,
            lambda_paired: t.lambda_paired,
            n_refine: t.n_refine,
            regime,
            variant,
            steps,
            batch_size: t.batch_size,
            seed: diffrouter::seed::derive_seed(self.run.seed, component),
            optimizer: AdamWConfig {
                lr,
                warmup_steps: t.warmup_steps,
                weight_decay: t.weight_decay,
                ..AdamWConfig::default()
            },
            curriculum: t.curriculum,
            log_window: t.log_window,
        }
    }

    /// Checks every field up front so that bad values fail before any
    /// data generation or training starts.
    pub fn validate(&self) -> Result<()> {
        self.instance_spec()?.validate()?;
        let variant = self.variant()?;
        self.schedule()?;
        self.router_config(variant)?;
        for regime in [Regime::PairedOnly, Regime::Finetune, Regime::FromScratch] {
            let cfg = self.train_config(regime, Variant::Diffusion, "validate");
            cfg.validate()?;
            if !(cfg.optimizer.lr.is_finite() && cfg.optimizer.lr > 0.0) {
                return Err(Failure::invalid_config(format!("learning rate must be positive, got {}", cfg.optimizer.lr)).into());
            }
        }
        if self.eval.projections == 0 || self.eval.mmd_points < 2 {
            return Err(Failure::invalid_config("eval needs projections > 0 and mmd_points >= 2").into());
        }
        if self.eval.steps > self.schedule.steps {
            return Err(Failure::invalid_config(format!(
                "eval.steps {} exceeds schedule.steps {}",
                self.eval.steps, self.schedule.steps
            ))
            .into());
        }
        let a = &self.ablate;
        if a.lambda2.iter().chain(&a.lr_scales).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Failure::invalid_config("ablation values must be finite and nonnegative").into());
        }
        if self.run.outdir.is_empty() {
            return Err(Failure::invalid_config("run.outdir is empty").into());
        }
        Ok(())
    }

    pub fn outdir(&self) -> PathBuf {
        PathBuf::from(&self.run.outdir)
    }
}
