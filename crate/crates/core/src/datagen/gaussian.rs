//! Linear-Gaussian instance: every domain is an affine image of one shared
//! latent plus independent noise, so all conditionals are available in
//! closed form.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::router::{check_batch, DomainId, NoisePredictor};
use crate::schedules::DiffusionSchedule;
use crate::seed::rng_for;

/// `x = A z + b + noise * xi` with `z ~ N(0, I)` and `xi ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise: f64,
}

/// Exact conditional `x_tgt | x_src ~ N(offset + gain (x_src - src_mean), cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianConditional {
    pub gain: DMatrix<f64>,
    pub src_mean: DVector<f64>,
    pub tgt_mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianConditional {
    pub fn mean(&self, x_src: &[f64]) -> DVector<f64> {
        let x = DVector::from_column_slice(x_src);
        &self.tgt_mean + &self.gain * (x - &self.src_mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianInstance {
    latent_dim: usize,
    data_dim: usize,
    maps: Vec<AffineMap>,
}

fn rotation(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

impl GaussianInstance {
    pub fn new(latent_dim: usize, maps: Vec<AffineMap>) -> Result<Self> {
        if maps.len() < 2 {
            return Err(Error::InvalidConfig("need at least two domain maps".into()));
        }
        let data_dim = maps[0].offset.len();
        for m in &maps {
            check_dim("affine map rows", data_dim, m.matrix.nrows())?;
            check_dim("affine map columns", latent_dim, m.matrix.ncols())?;
            check_dim("affine offset", data_dim, m.offset.len())?;
            if !(m.noise >= 0.0) || !m.noise.is_finite() {
                return Err(Error::InvalidConfig(format!("bad noise scale {}", m.noise)));
            }
        }
        Ok(GaussianInstance {
            latent_dim,
            data_dim,
            maps,
        })
    }

    /// The default instance. Domain 0 is a near-noiseless view of the latent,
    /// domain 1 is heavily noised (so its conditionals are broad), the rest
    /// are moderately noised affine views.
    pub fn standard(k: usize, data_dim: usize, latent_dim: usize) -> Result<Self> {
        if k < 2 || data_dim == 0 || latent_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "bad gaussian instance shape k={k} d={data_dim} d_z={latent_dim}"
            )));
        }
        let noise = |i: usize| match i {
            0 => 0.01,
            1 => 0.6,
            2 => 0.15,
            _ => 0.2,
        };
        let maps = if data_dim == 2 && latent_dim == 2 {
            (0..k)
                .map(|i| {
                    let (matrix, offset) = match i {
                        0 => (DMatrix::identity(2, 2), DVector::zeros(2)),
                        1 => (rotation(0.6) * 1.2, DVector::from_column_slice(&[1.0, -0.5])),
                        2 => (
                            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 0.8]),
                            DVector::from_column_slice(&[-1.0, 0.5]),
                        ),
                        _ => {
                            let f = i as f64;
                            (
                                rotation(0.9 * f) * (1.0 + 0.1 * f),
                                DVector::from_column_slice(&[0.5 * f.cos(), 0.5 * f.sin()]),
                            )
                        }
                    };
                    AffineMap {
                        matrix,
                        offset,
                        noise: noise(i),
                    }
                })
                .collect()
        } else {
            let mut rng = rng_for(0, "gaussian-instance-maps");
            let scale = 1.0 / (latent_dim as f64).sqrt();
            (0..k)
                .map(|i| AffineMap {
                    matrix: DMatrix::from_fn(data_dim, latent_dim, |_, _| {
                        scale * rng.sample::<f64, _>(StandardNormal)
                    }),
                    offset: DVector::zeros(data_dim),
                    noise: noise(i),
                })
                .collect()
        };
        Self::new(latent_dim, maps)
    }

    pub fn num_domains(&self) -> usize {
        self.maps.len()
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn maps(&self) -> &[AffineMap] {
        &self.maps
    }

    fn map(&self, k: DomainId) -> Result<&AffineMap> {
        self.maps.get(k.0).ok_or(Error::InvalidLabel {
            label: k.0,
            domains: self.maps.len(),
        })
    }

    pub fn render<R: Rng + ?Sized>(&self, k: DomainId, z: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let m = self.map(k)?;
        check_dim("latent", self.latent_dim, z.len())?;
        let z = DVector::from_column_slice(z);
        let mut x = &m.matrix * z + &m.offset;
        for v in x.iter_mut() {
            *v += m.noise * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(x.as_slice().to_vec())
    }

    pub fn marginal_cov(&self, k: DomainId) -> Result<DMatrix<f64>> {
        let m = self.map(k)?;
        Ok(&m.matrix * m.matrix.transpose() + DMatrix::identity(self.data_dim, self.data_dim) * m.noise.powi(2))
    }

    /// Exact `p(x_tgt | x_src)`. Marginalising the shared latent gives the same
    /// result as chaining Gaussian conditionals through any intermediate domain.
    pub fn analytic_conditional(&self, src: DomainId, tgt: DomainId) -> Result<GaussianConditional> {
        if src == tgt {
            return Err(Error::InvalidConfig("conditional needs distinct domains".into()));
        }
        let ms = self.map(src)?;
        let mt = self.map(tgt)?;
        let cov_ss = self.marginal_cov(src)?;
        let cov_tt = self.marginal_cov(tgt)?;
        let cov_ts = &mt.matrix * ms.matrix.transpose();
        let chol = cov_ss
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("marginal covariance of domain {src}")))?;
        // gain = cov_ts cov_ss^-1, via cov_ss^-1 cov_st transposed.
        let gain = chol.solve(&cov_ts.transpose()).transpose();
        let mut cov = cov_tt - &gain * cov_ts.transpose();
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(GaussianConditional {
            gain,
            src_mean: ms.offset.clone(),
            tgt_mean: mt.offset.clone(),
            cov,
        })
    }

    /// Convenience wrapper returning `(mean, covariance)` for one source value.
    pub fn conditional_at(&self, src: DomainId, tgt: DomainId, x_src: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        check_dim("source sample", self.data_dim, x_src.len())?;
        let c = self.analytic_conditional(src, tgt)?;
        Ok((c.mean(x_src).as_slice().to_vec(), c.cov))
    }

    /// Fresh aligned tuples drawn from the generative model, one array per domain.
    pub fn sample_tuples<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<Array2<f64>> {
        let mut out = vec![Array2::zeros((m, self.data_dim)); self.maps.len()];
        for r in 0..m {
            let z: Vec<f64> = (0..self.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
            for (k, arr) in out.iter_mut().enumerate() {
                let x = self.render(DomainId(k), &z, rng).expect("shapes fixed at construction");
                arr.row_mut(r).as_slice_mut().unwrap().copy_from_slice(&x);
            }
        }
        out
    }

    /// Draws `x_tgt ~ p(x_tgt | x_src)` for each row of `x_src`.
    pub fn sample_conditional<R: Rng + ?Sized>(
        &self,
        src: DomainId,
        tgt: DomainId,
        x_src: ArrayView2<'_, f64>,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        check_dim("source width", self.data_dim, x_src.ncols())?;
        let c = self.analytic_conditional(src, tgt)?;
        let l = cholesky_factor(&c.cov)?;
        let mut out = Array2::zeros((x_src.nrows(), self.data_dim));
        for r in 0..x_src.nrows() {
            let mean = c.mean(x_src.row(r).to_vec().as_slice());
            let xi = DVector::from_fn(self.data_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = mean + &l * xi;
            out.row_mut(r).as_slice_mut().unwrap().copy_from_slice(x.as_slice());
        }
        Ok(out)
    }
}

/// Lower-triangular factor of a positive semi-definite matrix. A tiny jitter
/// is added when the matrix is singular (e.g. noiseless copies).
pub fn cholesky_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let n = cov.nrows();
    let jitter = 1e-12 * (1.0 + cov.diagonal().amax());
    (cov + DMatrix::identity(n, n) * jitter)
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite("conditional covariance".into()))
}

/// Exact noise predictor for the linear-Gaussian instance. Given the source,
/// the noisy target at step t is Gaussian with mean `a_t m` and covariance
/// `S_t = a_t^2 C + sigma_t^2 I`, so the optimal prediction is
/// `sigma_t S_t^-1 (x_t - a_t m)`.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    instance: GaussianInstance,
    schedule: DiffusionSchedule,
    /// `conditionals[src][tgt]`; `None` on the diagonal.
    conditionals: Vec<Vec<Option<GaussianConditional>>>,
    /// `precisions[src][tgt][t]` = `sigma_t S_t^-1`.
    scaled_precisions: Vec<Vec<Vec<DMatrix<f64>>>>,
}

impl GaussianOracle {
    pub fn new(instance: GaussianInstance, schedule: DiffusionSchedule) -> Result<Self> {
        let k = instance.num_domains();
        let d = instance.data_dim();
        let mut conditionals = vec![vec![None; k]; k];
        let mut scaled_precisions = vec![vec![Vec::new(); k]; k];
        for s in 0..k {
            for t in 0..k {
                if s == t {
                    continue;
                }
                let c = instance.analytic_conditional(DomainId(s), DomainId(t))?;
                let mut table = vec![DMatrix::zeros(d, d)];
                for step in 1..=schedule.steps() {
                    let a = schedule.a(step);
                    let sig = schedule.sigma(step);
                    let cov = &c.cov * (a * a) + DMatrix::identity(d, d) * (sig * sig);
                    let inv = cov
                        .cholesky()
                        .ok_or_else(|| Error::NotPositiveDefinite(format!("noisy marginal at step {step}")))?
                        .inverse();
                    table.push(inv * sig);
                }
                scaled_precisions[s][t] = table;
                conditionals[s][t] = Some(c);
            }
        }
        Ok(GaussianOracle {
            instance,
            schedule,
            conditionals,
            scaled_precisions,
        })
    }

    pub fn instance(&self) -> &GaussianInstance {
        &self.instance
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn conditional(&self, src: DomainId, tgt: DomainId) -> Option<&GaussianConditional> {
        self.conditionals.get(src.0)?.get(tgt.0)?.as_ref()
    }
}

impl NoisePredictor for GaussianOracle {
    fn data_dim(&self) -> usize {
        self.instance.data_dim()
    }

    fn num_domains(&self) -> usize {
        self.instance.num_domains()
    }

    fn predict_batch(
        &self,
        x_t: ArrayView2<'_, f64>,
        t: &[usize],
        x_src: ArrayView2<'_, f64>,
        tgt: &[DomainId],
        src: &[DomainId],
    ) -> Result<Array2<f64>> {
        let d = self.data_dim();
        check_batch(d, self.num_domains(), self.schedule.steps(), x_t, t, x_src, tgt, src)?;
        let mut out = Array2::zeros(x_t.raw_dim());
        for r in 0..x_t.nrows() {
            let c = self.conditionals[src[r].0][tgt[r].0].as_ref().ok_or_else(|| {
                Error::InvalidConfig("oracle needs distinct source and target domains".into())
            })?;
            let mean = c.mean(x_src.row(r).to_vec().as_slice());
            let a = self.schedule.a(t[r]);
            let resid = DVector::from_iterator(d, x_t.row(r).iter().copied()) - mean * a;
            let eps = &self.scaled_precisions[src[r].0][tgt[r].0][t[r]] * resid;
            out.row_mut(r).as_slice_mut().unwrap().copy_from_slice(eps.as_slice());
        }
        Ok(out)
    }
}
