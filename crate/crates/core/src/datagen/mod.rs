//! Synthetic multi-domain problems: a tree of domains, one paired dataset
//! per tree edge, and held-out aligned tuples for evaluation.
//!
//! All samples come from a single stream of latents. Latent indices are
//! assigned in contiguous blocks (edge 0, edge 1, ..., then evaluation), so
//! no latent is shared between two datasets.

pub mod gaussian;
pub mod glyphs;
pub mod moons;
mod topology;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub use gaussian::{AffineMap, GaussianConditional, GaussianInstance, GaussianOracle};
pub use topology::Topology;

use crate::error::{Error, Result};
use crate::router::DomainId;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    GaussianAffine,
    MoonsWarp,
    Glyphs,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianAffine => "gaussian-affine",
            Family::MoonsWarp => "moons-warp",
            Family::Glyphs => "glyphs",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-affine" => Ok(Family::GaussianAffine),
            "moons-warp" => Ok(Family::MoonsWarp),
            "glyphs" => Ok(Family::Glyphs),
            other => Err(Error::InvalidConfig(format!(
                "unknown instance family '{other}' (expected gaussian-affine, moons-warp or glyphs)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopologyKind {
    Star,
    Chain,
}

impl TopologyKind {
    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Star => "star",
            TopologyKind::Chain => "chain",
        }
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "star" => Ok(TopologyKind::Star),
            "chain" => Ok(TopologyKind::Chain),
            other => Err(Error::InvalidConfig(format!("unknown topology '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    pub family: Family,
    pub topology: TopologyKind,
    pub k: usize,
    pub d: usize,
    pub latent_dim: usize,
    /// Pairs per edge.
    pub n: usize,
    /// Evaluation tuples.
    pub m: usize,
    pub seed: u64,
    /// Latent mean offset added per edge index. Zero means every edge draws
    /// from the same latent distribution.
    pub shift: f64,
}

impl InstanceSpec {
    pub fn star(family: Family, k: usize, d: usize, n: usize, seed: u64) -> Self {
        InstanceSpec {
            family,
            topology: TopologyKind::Star,
            k,
            d,
            latent_dim: 2,
            n,
            m: 5000,
            seed,
            shift: 0.0,
        }
    }

    pub fn chain(family: Family, k: usize, d: usize, n: usize, seed: u64) -> Self {
        InstanceSpec {
            topology: TopologyKind::Chain,
            ..Self::star(family, k, d, n, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("need K >= 2 domains, got {}", self.k)));
        }
        if self.topology == TopologyKind::Chain && self.k < 3 {
            return Err(Error::InvalidConfig(format!("a chain needs K >= 3, got {}", self.k)));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("need at least one pair per edge".into()));
        }
        if !self.shift.is_finite() {
            return Err(Error::InvalidConfig("shift must be finite".into()));
        }
        match self.family {
            Family::GaussianAffine if self.d == 0 || self.latent_dim == 0 => {
                Err(Error::InvalidConfig("gaussian-affine needs positive d and latent_dim".into()))
            }
            Family::MoonsWarp if self.d != 2 => {
                Err(Error::InvalidConfig(format!("moons-warp is two-dimensional, got d={}", self.d)))
            }
            Family::Glyphs if self.d != glyphs::PIXELS => Err(Error::InvalidConfig(format!(
                "glyphs are {} pixels, got d={}",
                glyphs::PIXELS,
                self.d
            ))),
            Family::Glyphs if self.k > glyphs::MAX_DOMAINS => Err(Error::InvalidConfig(format!(
                "glyphs support at most {} domains",
                glyphs::MAX_DOMAINS
            ))),
            _ => Ok(()),
        }
    }
}

/// Aligned pairs for one tree edge `(first, second)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub edge: (DomainId, DomainId),
    pub first: Array2<f64>,
    pub second: Array2<f64>,
    pub latent_ids: Range<usize>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.first.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.first.ncols()
    }

    /// Samples of domain `k`, which must be one of the edge endpoints.
    pub fn side(&self, k: DomainId) -> Option<&Array2<f64>> {
        if k == self.edge.0 {
            Some(&self.first)
        } else if k == self.edge.1 {
            Some(&self.second)
        } else {
            None
        }
    }
}

/// Aligned tuples across every domain. Only evaluation code reads these.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTuples {
    pub domains: Vec<Array2<f64>>,
    pub latent_ids: Range<usize>,
}

impl EvalTuples {
    pub fn len(&self) -> usize {
        self.domains.first().map_or(0, |a| a.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain(&self, k: DomainId) -> Result<&Array2<f64>> {
        self.domains.get(k.0).ok_or(Error::InvalidLabel {
            label: k.0,
            domains: self.domains.len(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: InstanceSpec,
    pub topology: Topology,
    pub datasets: Vec<PairedDataset>,
    pub eval: EvalTuples,
    /// Present for the gaussian-affine family only.
    pub gaussian: Option<GaussianInstance>,
}

impl Instance {
    pub fn dataset_for(&self, a: DomainId, b: DomainId) -> Option<&PairedDataset> {
        self.topology.edge_index(a, b).map(|i| &self.datasets[i])
    }
}

enum Model {
    Gaussian(GaussianInstance),
    Moons,
    Glyphs,
}

impl Model {
    fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R, shift: f64) -> Vec<f64> {
        match self {
            Model::Gaussian(g) => (0..g.latent_dim())
                .map(|_| shift + rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Model::Moons => moons::sample_latent(rng, shift),
            Model::Glyphs => glyphs::sample_latent(rng, shift),
        }
    }

    fn render<R: Rng + ?Sized>(&self, k: DomainId, z: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        match self {
            Model::Gaussian(g) => g.render(k, z, rng),
            Model::Moons => Ok(moons::render(k, z, rng)),
            Model::Glyphs => Ok(glyphs::render(k, z)),
        }
    }
}

pub fn generate(spec: &InstanceSpec) -> Result<Instance> {
    spec.validate()?;
    let topology = match spec.topology {
        TopologyKind::Star => Topology::star(spec.k)?,
        TopologyKind::Chain => Topology::chain(spec.k)?,
    };
    let gaussian = match spec.family {
        Family::GaussianAffine => Some(GaussianInstance::standard(spec.k, spec.d, spec.latent_dim)?),
        _ => None,
    };
    let model = match (&gaussian, spec.family) {
        (Some(g), _) => Model::Gaussian(g.clone()),
        (None, Family::MoonsWarp) => Model::Moons,
        _ => Model::Glyphs,
    };

    let mut latent_rng = rng_for(spec.seed, "datagen/latent");
    let mut noise_rng = rng_for(spec.seed, "datagen/observation");
    let mut next_id = 0usize;

    let mut datasets = Vec::with_capacity(topology.edges().len());
    for (e, &(a, b)) in topology.edges().iter().enumerate() {
        let shift = spec.shift * e as f64;
        let mut first = Array2::zeros((spec.n, spec.d));
        let mut second = Array2::zeros((spec.n, spec.d));
        for r in 0..spec.n {
            let z = model.sample_latent(&mut latent_rng, shift);
            let xa = model.render(a, &z, &mut noise_rng)?;
            let xb = model.render(b, &z, &mut noise_rng)?;
            first.row_mut(r).as_slice_mut().unwrap().copy_from_slice(&xa);
            second.row_mut(r).as_slice_mut().unwrap().copy_from_slice(&xb);
        }
        datasets.push(PairedDataset {
            edge: (a, b),
            first,
            second,
            latent_ids: next_id..next_id + spec.n,
        });
        next_id += spec.n;
    }

    let mut domains = vec![Array2::zeros((spec.m, spec.d)); spec.k];
    for r in 0..spec.m {
        let z = model.sample_latent(&mut latent_rng, 0.0);
        for (k, arr) in domains.iter_mut().enumerate() {
            let x = model.render(DomainId(k), &z, &mut noise_rng)?;
            arr.row_mut(r).as_slice_mut().unwrap().copy_from_slice(&x);
        }
    }
    let eval = EvalTuples {
        domains,
        latent_ids: next_id..next_id + spec.m,
    };

    Ok(Instance {
        spec: spec.clone(),
        topology,
        datasets,
        eval,
        gaussian,
    })
}

pub fn make_star_instance(k: usize, d: usize, n: usize, seed: u64, family: Family) -> Result<Instance> {
    generate(&InstanceSpec::star(family, k, d, n, seed))
}

pub fn make_chain_instance(k: usize, d: usize, n: usize, seed: u64) -> Result<Instance> {
    generate(&InstanceSpec::chain(Family::GaussianAffine, k, d, n, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_domain_star_has_a_single_edge() {
        let inst = make_star_instance(2, 2, 50, 1, Family::GaussianAffine).unwrap();
        assert_eq!(inst.datasets.len(), 1);
        assert!(inst.topology.non_edge_pairs().is_empty());
    }

    #[test]
    fn invalid_requests_are_rejected() {
        assert!(make_star_instance(1, 2, 10, 0, Family::GaussianAffine).is_err());
        assert!(make_star_instance(3, 3, 10, 0, Family::MoonsWarp).is_err());
        assert!(make_star_instance(3, 2, 10, 0, Family::Glyphs).is_err());
        assert!(make_chain_instance(2, 2, 10, 0).is_err());
        assert!("voronoi".parse::<Family>().is_err());
    }

    #[test]
    fn latent_blocks_are_disjoint() {
        let mut spec = InstanceSpec::chain(Family::GaussianAffine, 4, 2, 30, 5);
        spec.m = 20;
        let inst = generate(&spec).unwrap();
        let mut ranges: Vec<Range<usize>> = inst.datasets.iter().map(|d| d.latent_ids.clone()).collect();
        ranges.push(inst.eval.latent_ids.clone());
        for i in 0..ranges.len() {
            for j in i + 1..ranges.len() {
                assert!(ranges[i].end <= ranges[j].start || ranges[j].end <= ranges[i].start);
            }
        }
        assert_eq!(inst.eval.domains.len(), 4);
        assert!(inst.eval.domains.iter().all(|a| a.nrows() == 20));
    }

    #[test]
    fn glyph_star_renders_in_range() {
        let mut spec = InstanceSpec::star(Family::Glyphs, 3, 64, 20, 2);
        spec.m = 10;
        let inst = generate(&spec).unwrap();
        for ds in &inst.datasets {
            assert!(ds.first.iter().chain(ds.second.iter()).all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
