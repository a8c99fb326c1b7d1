use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use diffrouter::datagen::{Instance, Topology};
use diffrouter::io::{self, CheckpointMeta};
use diffrouter::router::RouterParams;
use diffrouter::schedules::Schedule;

use crate::config::ExperimentConfig;
use crate::failure::Failure;

pub const OUT_ENV: &str = "DIFFROUTER_OUT";
pub const SUBDIRS: [&str; 5] = ["datasets", "checkpoints", "logs", "reports", "plots"];
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    /// Paths relative to the run directory, grouped by their top folder.
    pub artifacts: BTreeMap<String, Vec<String>>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// One experiment's output tree: `<outdir>/<config hash>/...`.
pub struct RunDir {
    pub config: ExperimentConfig,
    pub hash: String,
    pub root: PathBuf,
}

impl RunDir {
    /// Validates the config, creates the layout and stores the resolved
    /// config next to the results.
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let root = config.outdir().join(&hash);
        Self::create(config, hash, root)
    }

    /// Layout rooted at an explicit directory, used for ablation cells.
    pub fn nested(config: ExperimentConfig, root: PathBuf) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        Self::create(config, hash, root)
    }

    fn create(config: ExperimentConfig, hash: String, root: PathBuf) -> Result<Self> {
        for sub in SUBDIRS {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(root.join("config.toml"), config.to_toml())?;
        Ok(RunDir { config, hash, root })
    }

    pub fn path(&self, sub: &str, file: &str) -> PathBuf {
        self.root.join(sub).join(file)
    }

    pub fn edge_path(&self, edge: usize) -> PathBuf {
        self.path("datasets", &format!("edge-{edge}.bin"))
    }

    pub fn eval_path(&self) -> PathBuf {
        self.path("datasets", "eval.bin")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.path("checkpoints", &format!("{name}.ckpt"))
    }

    pub fn load_instance(&self) -> Result<Instance> {
        let eval = self.eval_path();
        if !eval.exists() {
            return Err(Failure::missing_input(format!("{} not found; run gen-data first", eval.display())).into());
        }
        let header = io::read_header(&eval, io::DATASET_MAGIC)?;
        let topology = header
            .get("topology")
            .ok_or_else(|| Failure::new("format", format!("{} has no topology field", eval.display())))?;
        let edges = Topology::parse(topology)?.edges().len();
        let paths: Vec<PathBuf> = (0..edges).map(|i| self.edge_path(i)).collect();
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return Err(Failure::missing_input(format!("{} not found; run gen-data first", missing.display())).into());
        }
        let inst = io::load_instance(&paths, &eval)?;
        let expected = self.config.instance_spec()?;
        if inst.spec != expected {
            return Err(Failure::invalid_config("datasets on disk were generated from a different [data] section").into());
        }
        Ok(inst)
    }

    /// Checkpoint by short name (`idr`, `ddr`, `scratch`) or by path.
    pub fn resolve_checkpoint(&self, name: &str) -> PathBuf {
        let as_path = Path::new(name);
        if name.contains(std::path::MAIN_SEPARATOR) || as_path.extension().is_some() {
            as_path.to_path_buf()
        } else {
            self.checkpoint_path(name)
        }
    }

    pub fn save_checkpoint(&self, path: &Path, params: &RouterParams, schedule: &Schedule, topology: &Topology) -> Result<()> {
        let meta = CheckpointMeta {
            schedule_hash: schedule.fingerprint(),
            topology_hash: topology.fingerprint(),
        };
        io::save_checkpoint(path, params, &meta).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Loads a checkpoint and checks it was trained for this schedule and
    /// topology.
    pub fn load_checkpoint(&self, path: &Path, schedule: &Schedule, topology: &Topology) -> Result<RouterParams> {
        if !path.exists() {
            return Err(Failure::missing_input(format!("checkpoint {} not found", path.display())).into());
        }
        let (params, meta) = io::load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
        if meta.schedule_hash != schedule.fingerprint() {
            return Err(Failure::new(
                "checkpoint_mismatch",
                format!("{} was trained for schedule {}, config gives {}", path.display(), meta.schedule_hash, schedule.fingerprint()),
            )
            .into());
        }
        if meta.topology_hash != topology.fingerprint() {
            return Err(Failure::new(
                "checkpoint_mismatch",
                format!("{} was trained for topology {}, config gives {}", path.display(), meta.topology_hash, topology.fingerprint()),
            )
            .into());
        }
        Ok(params)
    }

    /// Adds files to `manifest.json`. Entries whose files have since been
    /// removed are dropped; newly recorded files must exist.
    pub fn record(&self, files: &[PathBuf]) -> Result<RunManifest> {
        let path = self.root.join(MANIFEST);
        let time = now();
        let mut manifest = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Failure::new("format", format!("{}: {e}", path.display())))?,
            Err(_) => RunManifest {
                config_hash: self.hash.clone(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                created_unix: time,
                updated_unix: time,
                artifacts: BTreeMap::new(),
            },
        };
        manifest.updated_unix = time;
        manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
        for f in files {
            if !f.exists() {
                return Err(Failure::new("internal", format!("artifact {} was not written", f.display())).into());
            }
            let rel = f.strip_prefix(&self.root).unwrap_or(f);
            let group = match rel.parent().and_then(|p| p.components().next()) {
                Some(c) => c.as_os_str().to_string_lossy().into_owned(),
                None => "run".to_string(),
            };
            let entry = manifest.artifacts.entry(group).or_default();
            let rel = rel.to_string_lossy().into_owned();
            if !entry.contains(&rel) {
                entry.push(rel);
                entry.sort();
            }
        }
        for list in manifest.artifacts.values_mut() {
            list.retain(|rel| self.root.join(rel).exists());
        }
        manifest.artifacts.retain(|_, list| !list.is_empty());
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}
