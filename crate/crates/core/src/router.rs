//! The label-conditioned noise predictor. One network serves every
//! (source, target) direction; the direction is chosen by the two domain
//! embeddings concatenated to the backbone input.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_dim, Error, Result};
use crate::netcore::{Activation, DenseNet, ForwardTrace, GradBuffer, ParamSet};

static NEXT_INSTANCE: AtomicU64 = AtomicU64::new(1);

/// Domain label in `[0, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainId(pub usize);

impl DomainId {
    pub fn checked(label: usize, domains: usize) -> Result<Self> {
        if label >= domains {
            return Err(Error::InvalidLabel { label, domains });
        }
        Ok(DomainId(label))
    }

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Diffusion,
    Bridge,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Diffusion => "diffusion",
            Variant::Bridge => "bridge",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Variant::Diffusion),
            "bridge" => Ok(Variant::Bridge),
            other => Err(Error::InvalidConfig(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterConfig {
    pub data_dim: usize,
    pub num_domains: usize,
    /// Number of diffusion steps T; time inputs are normalised by it.
    pub steps: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embed_init_std: f64,
    /// Start from an all-zero output layer so the untrained predictor is exactly zero.
    pub zero_output: bool,
    pub variant: Variant,
}

impl RouterConfig {
    pub fn new(data_dim: usize, num_domains: usize, steps: usize) -> Self {
        RouterConfig {
            data_dim,
            num_domains,
            steps,
            time_dim: 16,
            embed_dim: 8,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            embed_init_std: 0.1,
            zero_output: true,
            variant: Variant::Diffusion,
        }
    }

    pub fn input_width(&self) -> usize {
        2 * self.data_dim + self.time_dim + 2 * self.embed_dim
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(&self.hidden);
        w.push(self.data_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::InvalidConfig("data dimension must be positive".into()));
        }
        if self.num_domains < 2 {
            return Err(Error::InvalidConfig("at least two domains are required".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("step count must be positive".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::InvalidConfig("time embedding width must be even".into()));
        }
        if !(self.embed_init_std >= 0.0) {
            return Err(Error::InvalidConfig("embedding init std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Sinusoidal features of `t / T`, scaled so that the lowest frequency spans
/// the unit interval about a thousand times.
pub fn time_embedding(t: usize, steps: usize, width: usize, out: &mut [f64]) {
    let half = width / 2;
    let pos = 1000.0 * t as f64 / steps as f64;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
}

/// A batched noise predictor `eps(x_t, t, x_src, tgt, src)`. Each row may
/// carry its own step and labels.
pub trait NoisePredictor {
    fn data_dim(&self) -> usize;
    fn num_domains(&self) -> usize;

    fn predict_batch(
        &self,
        x_t: ArrayView2<'_, f64>,
        t: &[usize],
        x_src: ArrayView2<'_, f64>,
        tgt: &[DomainId],
        src: &[DomainId],
    ) -> Result<Array2<f64>>;

    fn predict_noise(&self, x_t: &[f64], t: usize, x_src: &[f64], tgt: DomainId, src: DomainId) -> Result<Vec<f64>> {
        let d = self.data_dim();
        check_dim("noisy sample", d, x_t.len())?;
        check_dim("source sample", d, x_src.len())?;
        let xt = ArrayView2::from_shape((1, d), x_t).expect("row view");
        let xs = ArrayView2::from_shape((1, d), x_src).expect("row view");
        let out = self.predict_batch(xt, &[t], xs, &[tgt], &[src])?;
        Ok(out.into_raw_vec_and_offset().0)
    }
}

/// Validates a batch against the predictor's dimensions and label range.
pub fn check_batch(
    data_dim: usize,
    num_domains: usize,
    steps: usize,
    x_t: ArrayView2<'_, f64>,
    t: &[usize],
    x_src: ArrayView2<'_, f64>,
    tgt: &[DomainId],
    src: &[DomainId],
) -> Result<()> {
    let n = x_t.nrows();
    check_dim("noisy sample width", data_dim, x_t.ncols())?;
    check_dim("source sample width", data_dim, x_src.ncols())?;
    check_dim("source batch rows", n, x_src.nrows())?;
    check_dim("time batch length", n, t.len())?;
    check_dim("target label batch length", n, tgt.len())?;
    check_dim("source label batch length", n, src.len())?;
    for &step in t {
        if step == 0 || step > steps {
            return Err(Error::StepOutOfRange {
                t: step,
                min: 1,
                max: steps,
            });
        }
    }
    for label in tgt.iter().chain(src) {
        if label.0 >= num_domains {
            return Err(Error::InvalidLabel {
                label: label.0,
                domains: num_domains,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    config: RouterConfig,
    backbone: DenseNet,
    /// `K x E` learned label embeddings.
    embeddings: Array2<f64>,
    /// Non-edge directions trained with the distillation objective.
    direct_pairs: BTreeSet<(usize, usize)>,
    instance: u64,
}

/// Gradient of a scalar loss with respect to every router parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterGrad {
    pub backbone: GradBuffer,
    pub embeddings: Array2<f64>,
}

/// Cached forward state needed for a backward pass.
pub struct RouterTrace {
    net: ForwardTrace,
    tgt: Vec<DomainId>,
    src: Vec<DomainId>,
}

impl RouterTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.net.output()
    }
}

impl RouterParams {
    pub fn new<R: Rng + ?Sized>(config: RouterConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut backbone = DenseNet::random(&config.widths(), config.activation, rng)?;
        if config.zero_output {
            backbone.zero_output_layer();
        }
        let normal = Normal::new(0.0, config.embed_init_std.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let embeddings =
            Array2::from_shape_fn((config.num_domains, config.embed_dim), |_| normal.sample(rng));
        Ok(Self::assemble(config, backbone, embeddings))
    }

    pub fn zeros(config: RouterConfig) -> Result<Self> {
        config.validate()?;
        let backbone = DenseNet::zeros(&config.widths(), config.activation)?;
        let embeddings = Array2::zeros((config.num_domains, config.embed_dim));
        Ok(Self::assemble(config, backbone, embeddings))
    }

    /// Rebuilds parameters from stored parts, e.g. a checkpoint.
    pub fn from_parts(
        config: RouterConfig,
        backbone: DenseNet,
        embeddings: Array2<f64>,
        direct_pairs: BTreeSet<(usize, usize)>,
    ) -> Result<Self> {
        config.validate()?;
        if backbone.widths() != config.widths().as_slice() {
            return Err(Error::InvalidConfig(format!(
                "backbone widths {:?} do not match router layout {:?}",
                backbone.widths(),
                config.widths()
            )));
        }
        check_dim("embedding rows", config.num_domains, embeddings.nrows())?;
        check_dim("embedding width", config.embed_dim, embeddings.ncols())?;
        let mut p = Self::assemble(config, backbone, embeddings);
        p.direct_pairs = direct_pairs;
        Ok(p)
    }

    fn assemble(config: RouterConfig, backbone: DenseNet, embeddings: Array2<f64>) -> Self {
        RouterParams {
            config,
            backbone,
            embeddings,
            direct_pairs: BTreeSet::new(),
            instance: NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn config(&self) -> &RouterConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn backbone(&self) -> &DenseNet {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut DenseNet {
        &mut self.backbone
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Array2<f64> {
        &mut self.embeddings
    }

    /// Identity of this parameter instance within the process. Stable across
    /// in-place updates, fresh for every constructed or cloned-and-frozen copy.
    pub fn instance_id(&self) -> u64 {
        self.instance
    }

    pub fn direct_pairs(&self) -> &BTreeSet<(usize, usize)> {
        &self.direct_pairs
    }

    pub fn mark_direct(&mut self, src: DomainId, tgt: DomainId) {
        self.direct_pairs.insert((src.0, tgt.0));
    }

    pub fn supports_direct(&self, src: DomainId, tgt: DomainId) -> bool {
        self.direct_pairs.contains(&(src.0, tgt.0))
    }

    pub fn zero_grad(&self) -> RouterGrad {
        RouterGrad {
            backbone: GradBuffer::zeros_like(&self.backbone),
            embeddings: Array2::zeros(self.embeddings.raw_dim()),
        }
    }

    /// Assembles the backbone input `[x_t | x_src | time | emb(tgt) | emb(src)]`.
    pub fn backbone_input(
        &self,
        x_t: ArrayView2<'_, f64>,
        t: &[usize],
        x_src: ArrayView2<'_, f64>,
        tgt: &[DomainId],
        src: &[DomainId],
    ) -> Result<Array2<f64>> {
        let c = &self.config;
        check_batch(c.data_dim, c.num_domains, c.steps, x_t, t, x_src, tgt, src)?;
        let n = x_t.nrows();
        let d = c.data_dim;
        let e = c.embed_dim;
        let off_time = 2 * d;
        let off_tgt = off_time + c.time_dim;
        let off_src = off_tgt + e;
        let mut input = Array2::zeros((n, c.input_width()));
        input.slice_mut(s![.., 0..d]).assign(&x_t);
        input.slice_mut(s![.., d..2 * d]).assign(&x_src);
        for r in 0..n {
            let mut row = input.row_mut(r);
            let row = row.as_slice_mut().expect("standard layout");
            time_embedding(t[r], c.steps, c.time_dim, &mut row[off_time..off_tgt]);
            row[off_tgt..off_src].copy_from_slice(self.embeddings.row(tgt[r].0).as_slice().unwrap());
            row[off_src..off_src + e].copy_from_slice(self.embeddings.row(src[r].0).as_slice().unwrap());
        }
        Ok(input)
    }

    pub fn forward_trace(
        &self,
        x_t: ArrayView2<'_, f64>,
        t: &[usize],
        x_src: ArrayView2<'_, f64>,
        tgt: &[DomainId],
        src: &[DomainId],
    ) -> Result<RouterTrace> {
        let input = self.backbone_input(x_t, t, x_src, tgt, src)?;
        let net = self.backbone.forward_trace(input.view())?;
        Ok(RouterTrace {
            net,
            tgt: tgt.to_vec(),
            src: src.to_vec(),
        })
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the predictor output is `output_grad`.
    pub fn backward(&self, trace: &RouterTrace, output_grad: ArrayView2<'_, f64>, grads: &mut RouterGrad) -> Result<()> {
        let (g, input_grad) = self.backbone.backward_trace(&trace.net, output_grad)?;
        grads.backbone.add_scaled(&g, 1.0)?;
        let c = &self.config;
        let off_tgt = 2 * c.data_dim + c.time_dim;
        let off_src = off_tgt + c.embed_dim;
        for r in 0..input_grad.nrows() {
            let row = input_grad.row(r);
            let mut et = grads.embeddings.row_mut(trace.tgt[r].0);
            et += &row.slice(s![off_tgt..off_src]);
            let mut es = grads.embeddings.row_mut(trace.src[r].0);
            es += &row.slice(s![off_src..off_src + c.embed_dim]);
        }
        Ok(())
    }

    pub fn freeze(&self) -> FrozenRouter {
        let mut copy = self.clone();
        copy.instance = NEXT_INSTANCE.fetch_add(1, Ordering::Relaxed);
        FrozenRouter(Arc::new(copy))
    }
}

impl NoisePredictor for RouterParams {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn num_domains(&self) -> usize {
        self.config.num_domains
    }

    fn predict_batch(
        &self,
        x_t: ArrayView2<'_, f64>,
        t: &[usize],
        x_src: ArrayView2<'_, f64>,
        tgt: &[DomainId],
        src: &[DomainId],
    ) -> Result<Array2<f64>> {
        let input = self.backbone_input(x_t, t, x_src, tgt, src)?;
        self.backbone.forward_batch(input.view())
    }
}

impl ParamSet for RouterParams {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.backbone.param_slices();
        v.push(self.embeddings.as_slice().expect("standard layout"));
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.backbone.param_slices_mut();
        v.push(self.embeddings.as_slice_mut().expect("standard layout"));
        v
    }
}

impl RouterGrad {
    pub fn scale(&mut self, factor: f64) {
        self.backbone.scale(factor);
        self.embeddings *= factor;
    }

    pub fn add_scaled(&mut self, other: &RouterGrad, factor: f64) -> Result<()> {
        self.backbone.add_scaled(&other.backbone, factor)?;
        check_dim("embedding gradient", self.embeddings.len(), other.embeddings.len())?;
        self.embeddings.scaled_add(factor, &other.embeddings);
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.backbone.is_zero() && self.embeddings.iter().all(|&v| v == 0.0)
    }
}

impl ParamSet for RouterGrad {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.backbone.param_slices();
        v.push(self.embeddings.as_slice().expect("standard layout"));
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.backbone.param_slices_mut();
        v.push(self.embeddings.as_slice_mut().expect("standard layout"));
        v
    }
}

/// Read-only snapshot of a router. Cheap to clone and share across threads.
#[derive(Debug, Clone)]
pub struct FrozenRouter(Arc<RouterParams>);

impl FrozenRouter {
    pub fn params(&self) -> &RouterParams {
        &self.0
    }
}

impl NoisePredictor for FrozenRouter {
    fn data_dim(&self) -> usize {
        self.0.data_dim()
    }

    fn num_domains(&self) -> usize {
        self.0.num_domains()
    }

    fn predict_batch(
        &self,
        x_t: ArrayView2<'_, f64>,
        t: &[usize],
        x_src: ArrayView2<'_, f64>,
        tgt: &[DomainId],
        src: &[DomainId],
    ) -> Result<Array2<f64>> {
        self.0.predict_batch(x_t, t, x_src, tgt, src)
    }
}

/// Predicts zero noise everywhere. Useful as a baseline and in tests.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor {
    pub data_dim: usize,
    pub num_domains: usize,
}

impl NoisePredictor for ZeroPredictor {
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn num_domains(&self) -> usize {
        self.num_domains
    }

    fn predict_batch(
        &self,
        x_t: ArrayView2<'_, f64>,
        t: &[usize],
        x_src: ArrayView2<'_, f64>,
        tgt: &[DomainId],
        src: &[DomainId],
    ) -> Result<Array2<f64>> {
        check_batch(self.data_dim, self.num_domains, usize::MAX, x_t, t, x_src, tgt, src)?;
        Ok(Array2::zeros(x_t.raw_dim()))
    }
}
