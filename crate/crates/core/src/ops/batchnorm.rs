//! Per-channel batch normalization over `(n, h, w)`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    /// Weight on the old running statistic: `running = m * running + (1 - m) * batch`.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }
}

/// Borrowed view of one BN layer's tensors, each of length `c`.
#[derive(Clone, Copy, Debug)]
pub struct BnParams<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
}

/// Batch statistics from a train-mode forward; the caller folds them into
/// the running buffers with [`BnStats::update_running`].
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n·h·w − 1 denominator).
    pub var: Vec<T>,
}

impl<T: Element> BnStats<T> {
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], cfg: BnConfig) {
        let m = T::of(cfg.momentum);
        let one_m = T::one() - m;
        for (r, &b) in running_mean.iter_mut().zip(&self.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in running_var.iter_mut().zip(&self.var) {
            *r = m * *r + one_m * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

fn check(shape: Shape, p: &BnParams<'_, impl Element>) -> Result<()> {
    let c = shape.c;
    if [
        p.gamma.len(),
        p.beta.len(),
        p.running_mean.len(),
        p.running_var.len(),
    ]
    .iter()
    .any(|&l| l != c)
    {
        return Err(Error::shape(format!(
            "batchnorm parameters do not match {c} channels"
        )));
    }
    Ok(())
}

pub fn batchnorm_forward<T: Element>(
    x: &Tensor<T>,
    p: BnParams<'_, T>,
    cfg: BnConfig,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>, Option<BnStats<T>>)> {
    let s = x.shape();
    check(s, &p)?;
    let count = s.n * s.plane();
    let plane = s.plane();
    let eps = T::of(cfg.eps);

    let (mean, biased_var, stats) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::shape(format!(
                    "batchnorm in train mode needs n*h*w >= 2, got {s}"
                )));
            }
            let cnt = T::from_usize(count).expect("count fits");
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for c in 0..s.c {
                let mut acc = T::zero();
                for n in 0..s.n {
                    let base = x.index(n, c, 0, 0);
                    for &v in &x.data()[base..base + plane] {
                        acc = acc + v;
                    }
                }
                let mu = acc / cnt;
                let mut sq = T::zero();
                for n in 0..s.n {
                    let base = x.index(n, c, 0, 0);
                    for &v in &x.data()[base..base + plane] {
                        let d = v - mu;
                        sq = sq + d * d;
                    }
                }
                mean[c] = mu;
                var[c] = sq / cnt;
            }
            let unbiased_scale = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
            let stats = BnStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * unbiased_scale).collect(),
            };
            (mean, var, Some(stats))
        }
        Mode::Infer => (p.running_mean.to_vec(), p.running_var.to_vec(), None),
    };

    let inv_std: Vec<T> = biased_var
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let mut xhat = x.clone();
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = x.index(n, c, 0, 0);
            let (mu, is, g, b) = (mean[c], inv_std[c], p.gamma[c], p.beta[c]);
            for i in base..base + plane {
                let h = (x.data()[i] - mu) * is;
                xhat.data_mut()[i] = h;
                out.data_mut()[i] = g * h + b;
            }
        }
    }
    Ok((
        out,
        BnCache {
            xhat,
            inv_std,
            mode,
        },
        stats,
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Element>(
    cache: &BnCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let s = cache.xhat.shape();
    if grad_out.shape() != s || gamma.len() != s.c {
        return Err(Error::shape(format!(
            "batchnorm backward: grad {} vs cached {s}",
            grad_out.shape()
        )));
    }
    let plane = s.plane();
    let cnt = T::from_usize(s.n * plane).expect("count fits");
    let (xh, dy) = (cache.xhat.data(), grad_out.data());
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for n in 0..s.n {
            let base = cache.xhat.index(n, c, 0, 0);
            for i in base..base + plane {
                sg = sg + dy[i] * xh[i];
                sb = sb + dy[i];
            }
        }
        dgamma[c] = sg;
        dbeta[c] = sb;
    }

    let mut dx = grad_out.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = cache.xhat.index(n, c, 0, 0);
            let k = gamma[c] * cache.inv_std[c];
            match cache.mode {
                Mode::Infer => {
                    for i in base..base + plane {
                        dx.data_mut()[i] = k * dy[i];
                    }
                }
                Mode::Train => {
                    let mean_dy = dbeta[c] / cnt;
                    let mean_dy_xh = dgamma[c] / cnt;
                    for i in base..base + plane {
                        dx.data_mut()[i] = k * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
                    }
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Owned BN layer state, for standalone use outside a parameter store.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub cfg: BnConfig,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cfg: BnConfig::default(),
        }
    }

    pub fn params(&self) -> BnParams<'_, T> {
        BnParams {
            gamma: &self.gamma,
            beta: &self.beta,
            running_mean: &self.running_mean,
            running_var: &self.running_var,
        }
    }

    /// Forward pass; in train mode the running buffers are updated in place.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (out, cache, stats) = batchnorm_forward(x, self.params(), self.cfg, mode)?;
        if let Some(stats) = stats {
            stats.update_running(&mut self.running_mean, &mut self.running_var, self.cfg);
        }
        Ok((out, cache))
    }
}
