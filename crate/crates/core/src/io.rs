//! On-disk formats for checkpoints and generated datasets.
//!
//! Both share one layout: a text header of `key=value` lines opened by a
//! magic line and closed by `end`, then a `u64` little-endian value count and
//! that many little-endian `f32` values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::datagen::{EvalTuples, Family, Instance, InstanceSpec, PairedDataset, Topology};
use crate::error::{Error, Result};
use crate::netcore::{Activation, ParamSet};
use crate::router::{DomainId, RouterConfig, RouterParams, Variant};

pub const CHECKPOINT_MAGIC: &str = "diffrouter-checkpoint";
pub const DATASET_MAGIC: &str = "diffrouter-dataset";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_END: &str = "end";

/// Ordered header fields. Values may not contain newlines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header {
    fields: Vec<(String, String)>,
}

impl Header {
    pub fn new() -> Self {
        Header::default()
    }

    pub fn push(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("header is missing '{key}'")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("header field '{key}' has unreadable value '{raw}'")))
    }

    fn write<W: Write>(&self, magic: &str, w: &mut W) -> Result<()> {
        writeln!(w, "{magic}")?;
        for (k, v) in &self.fields {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Format(format!("header field '{k}' cannot be encoded")));
            }
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "{HEADER_END}")?;
        Ok(())
    }

    fn read<R: BufRead>(magic: &str, r: &mut R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != magic {
            return Err(Error::Format(format!("expected a {magic} file")));
        }
        let mut header = Header::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("header ended without an end marker".into()));
            }
            let text = line.trim_end_matches(['\n', '\r']);
            if text == HEADER_END {
                break;
            }
            let (k, v) = text
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header line '{text}'")))?;
            header.fields.push((k.to_string(), v.to_string()));
        }
        let version: u32 = header.parse("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        Ok(header)
    }
}

fn write_blob<'a, W: Write>(w: &mut W, parts: impl IntoIterator<Item = &'a [f64]> + Clone) -> Result<()> {
    let count: usize = parts.clone().into_iter().map(|p| p.len()).sum();
    w.write_all(&(count as u64).to_le_bytes())?;
    for part in parts {
        for v in part {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_blob<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let count = u64::from_le_bytes(len) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 4 * count {
        return Err(Error::Format(format!(
            "parameter blob holds {} bytes, header promises {} values",
            bytes.len(),
            count
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Format(format!("bad list entry '{s}'"))))
        .collect()
}

fn parse_pairs(raw: &str) -> Result<Vec<(usize, usize)>> {
    raw.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (a, b) = s.split_once('-').ok_or_else(|| Error::Format(format!("bad pair '{s}'")))?;
            let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::Format(format!("bad pair '{s}'")));
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

/// Context stored next to the parameters so a checkpoint can be matched
/// with the schedule and topology it was trained for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub schedule_hash: String,
    pub topology_hash: String,
}

pub fn write_checkpoint<W: Write>(w: &mut W, params: &RouterParams, meta: &CheckpointMeta) -> Result<()> {
    let cfg = params.config();
    let mut h = Header::new();
    h.push("version", FORMAT_VERSION)
        .push("widths", join(cfg.widths()))
        .push("activation", cfg.activation)
        .push("domains", cfg.num_domains)
        .push("embed_dim", cfg.embed_dim)
        .push("data_dim", cfg.data_dim)
        .push("time_dim", cfg.time_dim)
        .push("steps", cfg.steps)
        .push("variant", cfg.variant)
        .push("embed_init_std", cfg.embed_init_std)
        .push("zero_output", cfg.zero_output)
        .push("direct_pairs", join(params.direct_pairs().iter().map(|(a, b)| format!("{a}-{b}"))))
        .push("schedule_hash", &meta.schedule_hash)
        .push("topology_hash", &meta.topology_hash);
    h.write(CHECKPOINT_MAGIC, w)?;
    write_blob(w, params.param_slices())
}

pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<(RouterParams, CheckpointMeta)> {
    let h = Header::read(CHECKPOINT_MAGIC, r)?;
    let widths = parse_list(h.get("widths")?)?;
    if widths.len() < 2 {
        return Err(Error::Format("a checkpoint needs at least one layer".into()));
    }
    let activation: Activation = h.get("activation")?.parse().map_err(|_| {
        Error::Format(format!("unknown activation '{}'", h.get("activation").unwrap_or_default()))
    })?;
    let variant: Variant = h.get("variant")?.parse()?;
    let mut config = RouterConfig::new(h.parse("data_dim")?, h.parse("domains")?, h.parse("steps")?);
    config.time_dim = h.parse("time_dim")?;
    config.embed_dim = h.parse("embed_dim")?;
    config.hidden = widths[1..widths.len() - 1].to_vec();
    config.activation = activation;
    config.variant = variant;
    config.embed_init_std = h.parse("embed_init_std")?;
    config.zero_output = h.parse("zero_output")?;
    if config.widths() != widths {
        return Err(Error::Format(format!(
            "layer widths {widths:?} do not fit d={}, time_dim={}, embed_dim={}",
            config.data_dim, config.time_dim, config.embed_dim
        )));
    }
    let mut params = RouterParams::zeros(config)?;
    let values = read_blob(r)?;
    if values.len() != params.param_count() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, layout needs {}",
            values.len(),
            params.param_count()
        )));
    }
    let mut offset = 0;
    for slice in params.param_slices_mut() {
        slice.copy_from_slice(&values[offset..offset + slice.len()]);
        offset += slice.len();
    }
    let k = params.config().num_domains;
    for (a, b) in parse_pairs(h.get("direct_pairs")?)? {
        params.mark_direct(DomainId::checked(a, k)?, DomainId::checked(b, k)?);
    }
    let meta = CheckpointMeta {
        schedule_hash: h.get("schedule_hash")?.to_string(),
        topology_hash: h.get("topology_hash")?.to_string(),
    };
    Ok((params, meta))
}

pub fn save_checkpoint(path: &Path, params: &RouterParams, meta: &CheckpointMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, params, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(RouterParams, CheckpointMeta)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

fn dataset_header(spec: &InstanceSpec, topology: &Topology, kind: &str, rows: usize, ids: &std::ops::Range<usize>) -> Header {
    let mut h = Header::new();
    h.push("version", FORMAT_VERSION)
        .push("kind", kind)
        .push("family", spec.family)
        .push("k", spec.k)
        .push("d", spec.d)
        .push("latent_dim", spec.latent_dim)
        .push("n", spec.n)
        .push("m", spec.m)
        .push("seed", spec.seed)
        .push("shift", spec.shift)
        .push("topology", topology.describe())
        .push("rows", rows)
        .push("latent_ids", format!("{}..{}", ids.start, ids.end));
    h
}

fn parse_range(raw: &str) -> Result<std::ops::Range<usize>> {
    let bad = || Error::Format(format!("bad latent range '{raw}'"));
    let (a, b) = raw.split_once("..").ok_or_else(bad)?;
    Ok(a.parse().map_err(|_| bad())?..b.parse().map_err(|_| bad())?)
}

fn spec_from_header(h: &Header) -> Result<(InstanceSpec, Topology)> {
    let topology = Topology::parse(h.get("topology")?)?;
    let family: Family = h.get("family")?.parse()?;
    let kind = if topology.central().is_some() {
        crate::datagen::TopologyKind::Star
    } else {
        crate::datagen::TopologyKind::Chain
    };
    let spec = InstanceSpec {
        family,
        topology: kind,
        k: h.parse("k")?,
        d: h.parse("d")?,
        latent_dim: h.parse("latent_dim")?,
        n: h.parse("n")?,
        m: h.parse("m")?,
        seed: h.parse("seed")?,
        shift: h.parse("shift")?,
    };
    Ok((spec, topology))
}

fn take_rows(values: &[f64], offset: &mut usize, rows: usize, d: usize) -> Result<Array2<f64>> {
    let end = *offset + rows * d;
    let part = values
        .get(*offset..end)
        .ok_or_else(|| Error::Format("array data is shorter than its header".into()))?;
    *offset = end;
    Ok(Array2::from_shape_vec((rows, d), part.to_vec()).expect("length checked"))
}

/// One paired dataset: both sides, `first` then `second`, row-major.
pub fn write_edge_file<W: Write>(w: &mut W, instance: &Instance, edge: usize) -> Result<()> {
    let ds = instance
        .datasets
        .get(edge)
        .ok_or_else(|| Error::InvalidConfig(format!("no edge with index {edge}")))?;
    let mut h = dataset_header(&instance.spec, &instance.topology, "edge", ds.len(), &ds.latent_ids);
    h.push("edge", format!("{}-{}", ds.edge.0, ds.edge.1));
    h.write(DATASET_MAGIC, w)?;
    write_blob(
        w,
        [
            ds.first.as_slice().expect("standard layout"),
            ds.second.as_slice().expect("standard layout"),
        ],
    )
}

/// Aligned evaluation tuples: one array per domain, in domain order.
pub fn write_eval_file<W: Write>(w: &mut W, instance: &Instance) -> Result<()> {
    let eval = &instance.eval;
    let h = dataset_header(&instance.spec, &instance.topology, "eval", eval.len(), &eval.latent_ids);
    h.write(DATASET_MAGIC, w)?;
    write_blob(w, eval.domains.iter().map(|a| a.as_slice().expect("standard layout")).collect::<Vec<_>>())
}

/// Decoded dataset file of either kind.
#[derive(Debug, Clone)]
pub enum DatasetFile {
    Edge {
        spec: InstanceSpec,
        topology: Topology,
        dataset: PairedDataset,
    },
    Eval {
        spec: InstanceSpec,
        topology: Topology,
        tuples: EvalTuples,
    },
}

pub fn read_dataset_file<R: BufRead>(r: &mut R) -> Result<DatasetFile> {
    let h = Header::read(DATASET_MAGIC, r)?;
    let (spec, topology) = spec_from_header(&h)?;
    let rows: usize = h.parse("rows")?;
    let ids = parse_range(h.get("latent_ids")?)?;
    let values = read_blob(r)?;
    let mut offset = 0;
    let file = match h.get("kind")? {
        "edge" => {
            let pair = parse_pairs(h.get("edge")?)?;
            let &[(a, b)] = pair.as_slice() else {
                return Err(Error::Format("edge files hold exactly one edge".into()));
            };
            let edge = (DomainId::checked(a, spec.k)?, DomainId::checked(b, spec.k)?);
            if !topology.has_edge(edge.0, edge.1) {
                return Err(Error::Format(format!("{a}-{b} is not an edge of the stored topology")));
            }
            let first = take_rows(&values, &mut offset, rows, spec.d)?;
            let second = take_rows(&values, &mut offset, rows, spec.d)?;
            DatasetFile::Edge {
                spec,
                topology,
                dataset: PairedDataset {
                    edge,
                    first,
                    second,
                    latent_ids: ids,
                },
            }
        }
        "eval" => {
            let domains = (0..spec.k)
                .map(|_| take_rows(&values, &mut offset, rows, spec.d))
                .collect::<Result<Vec<_>>>()?;
            DatasetFile::Eval {
                spec,
                topology,
                tuples: EvalTuples {
                    domains,
                    latent_ids: ids,
                },
            }
        }
        other => return Err(Error::Format(format!("unknown dataset kind '{other}'"))),
    };
    if offset != values.len() {
        return Err(Error::Format("array data is longer than its header".into()));
    }
    Ok(file)
}

pub fn save_edge_file(path: &Path, instance: &Instance, edge: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_edge_file(&mut w, instance, edge)?;
    w.flush()?;
    Ok(())
}

pub fn save_eval_file(path: &Path, instance: &Instance) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_eval_file(&mut w, instance)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset_file(path: &Path) -> Result<DatasetFile> {
    read_dataset_file(&mut BufReader::new(File::open(path)?))
}

/// Reassembles an instance from its edge files and eval file. All files must
/// come from the same generation run; gaussian parameters are rebuilt from
/// the stored spec.
pub fn load_instance(edge_paths: &[impl AsRef<Path>], eval_path: &Path) -> Result<Instance> {
    let DatasetFile::Eval { spec, topology, tuples } = load_dataset_file(eval_path)? else {
        return Err(Error::Format(format!("{} is not an eval file", eval_path.display())));
    };
    let mut slots: Vec<Option<PairedDataset>> = vec![None; topology.edges().len()];
    for p in edge_paths {
        let p = p.as_ref();
        let DatasetFile::Edge {
            spec: s,
            topology: t,
            dataset,
        } = load_dataset_file(p)?
        else {
            return Err(Error::Format(format!("{} is not an edge file", p.display())));
        };
        if s != spec || t != topology {
            return Err(Error::Format(format!("{} comes from a different generation run", p.display())));
        }
        let idx = topology
            .edge_index(dataset.edge.0, dataset.edge.1)
            .expect("checked when reading");
        slots[idx] = Some(dataset);
    }
    let datasets = slots
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or_else(|| Error::Format(format!("no file for edge {i}"))))
        .collect::<Result<Vec<_>>>()?;
    let gaussian = match spec.family {
        Family::GaussianAffine => Some(crate::datagen::GaussianInstance::standard(spec.k, spec.d, spec.latent_dim)?),
        _ => None,
    };
    Ok(Instance {
        spec,
        topology,
        datasets,
        eval: tuples,
        gaussian,
    })
}

/// Reads a header without the data, e.g. to list what a file holds.
pub fn read_header(path: &Path, magic: &str) -> Result<BTreeMap<String, String>> {
    let h = Header::read(magic, &mut BufReader::new(File::open(path)?))?;
    Ok(h.fields.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_star_instance;
    use crate::seed::rng_from_seed;

    fn small_router() -> RouterParams {
        let mut cfg = RouterConfig::new(2, 3, 10);
        cfg.hidden = vec![5, 4];
        cfg.zero_output = false;
        RouterParams::new(cfg, &mut rng_from_seed(3)).unwrap()
    }

    #[test]
    fn checkpoint_round_trips_at_f32_precision() {
        let mut p = small_router();
        p.mark_direct(DomainId(1), DomainId(2));
        let meta = CheckpointMeta {
            schedule_hash: "abc".into(),
            topology_hash: "def".into(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, &meta).unwrap();
        let (q, m) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(q.config(), p.config());
        assert!(q.supports_direct(DomainId(1), DomainId(2)));
        assert!(!q.supports_direct(DomainId(2), DomainId(1)));
        for (a, b) in p.param_slices().iter().zip(q.param_slices()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
    }

    #[test]
    fn truncated_or_foreign_checkpoints_are_rejected() {
        let p = small_router();
        let meta = CheckpointMeta {
            schedule_hash: String::new(),
            topology_hash: String::new(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, &meta).unwrap();
        let cut = &buf[..buf.len() - 4];
        assert!(matches!(read_checkpoint(&mut &cut[..]), Err(Error::Format(_))));
        let text = String::from_utf8_lossy(&buf).replacen("version=1", "version=9", 1);
        assert!(read_checkpoint(&mut text.as_bytes()).is_err());
        assert!(matches!(read_checkpoint(&mut &b"hello\n"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_files_round_trip() {
        let inst = make_star_instance(3, 2, 40, 9, Family::GaussianAffine).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut edges = Vec::new();
        for e in 0..inst.datasets.len() {
            let p = dir.path().join(format!("edge{e}.bin"));
            save_edge_file(&p, &inst, e).unwrap();
            edges.push(p);
        }
        let eval = dir.path().join("eval.bin");
        save_eval_file(&eval, &inst).unwrap();
        edges.reverse();
        let back = load_instance(&edges, &eval).unwrap();
        assert_eq!(back.spec, inst.spec);
        assert_eq!(back.topology, inst.topology);
        assert_eq!(back.gaussian, inst.gaussian);
        for (a, b) in inst.datasets.iter().zip(&back.datasets) {
            assert_eq!(a.edge, b.edge);
            assert_eq!(a.latent_ids, b.latent_ids);
            assert_eq!(b.first, a.first.mapv(|v| v as f32 as f64));
            assert_eq!(b.second, a.second.mapv(|v| v as f32 as f64));
        }
        assert_eq!(back.eval.domains[2], inst.eval.domains[2].mapv(|v| v as f32 as f64));
        assert!(load_instance(&edges[..1], &eval).is_err());
    }
}
