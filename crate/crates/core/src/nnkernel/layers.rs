//! Differentiable layers with manual backpropagation. Forward passes cache
//! what backward needs; gradients accumulate into per-layer buffers until
//! `zero_grad`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer: y = xW + b.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub gw: Matrix,
    pub gb: Vec<f64>,
    cache_x: Option<Matrix>,
}

impl Dense {
    /// He-style fan-in init: w ~ N(0, 2/fan_in), b = 0.
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / input as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect();
        Dense {
            w: Matrix {
                rows: input,
                cols: output,
                data,
            },
            b: vec![0.0; output],
            gw: Matrix::zeros(input, output),
            gb: vec![0.0; output],
            cache_x: None,
        }
    }

    pub fn in_width(&self) -> usize {
        self.w.rows
    }

    pub fn out_width(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix, NnError> {
        if x.cols != self.w.rows {
            return Err(NnError::Shape(format!(
                "dense expects {} input columns, got {}",
                self.w.rows, x.cols
            )));
        }
        let mut y = x.matmul(&self.w)?;
        y.add_row_vector(&self.b)?;
        self.cache_x = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix, NnError> {
        let x = self
            .cache_x
            .as_ref()
            .ok_or_else(|| NnError::Invalid("dense backward before forward".into()))?;
        self.gw.add_assign(&x.matmul_at_b(upstream)?)?;
        for (g, u) in self.gb.iter_mut().zip(upstream.col_sums()) {
            *g += u;
        }
        upstream.matmul_a_bt(&self.w)
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.iter_mut().for_each(|g| *g = 0.0);
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.99;

struct BnCache {
    centered: Matrix,
    x_hat: Matrix,
    inv_std: Vec<f64>,
    mode: Mode,
}

/// Batch normalization with learnable affine (gamma, beta) and running
/// statistics for eval mode. Backward in train mode is exact through the
/// batch mean and variance.
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub g_gamma: Vec<f64>,
    pub g_beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache: Option<BnCache>,
}

impl Clone for BatchNorm {
    fn clone(&self) -> Self {
        BatchNorm {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            g_gamma: self.g_gamma.clone(),
            g_beta: self.g_beta.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            cache: None,
        }
    }
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            g_gamma: vec![0.0; width],
            g_beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            cache: None,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix, NnError> {
        if x.cols != self.width() {
            return Err(NnError::Shape(format!(
                "batchnorm expects {} columns, got {}",
                self.width(),
                x.cols
            )));
        }
        let m = x.rows;
        match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(NnError::SmallBatch(m));
                }
                let mut mean = x.col_sums();
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut centered = x.clone();
                for r in 0..m {
                    for c in 0..x.cols {
                        centered.data[r * x.cols + c] -= mean[c];
                    }
                }
                let mut var = vec![0.0; x.cols];
                for r in 0..m {
                    for (v, &cv) in var.iter_mut().zip(centered.row(r)) {
                        *v += cv * cv;
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();

                let mut x_hat = centered.clone();
                for r in 0..m {
                    for (c, xh) in x_hat.data[r * x.cols..(r + 1) * x.cols]
                        .iter_mut()
                        .enumerate()
                    {
                        *xh *= inv_std[c];
                    }
                }
                let mut y = x_hat.clone();
                for r in 0..m {
                    for (c, v) in y.data[r * x.cols..(r + 1) * x.cols].iter_mut().enumerate() {
                        *v = self.gamma[c] * *v + self.beta[c];
                    }
                }
                for c in 0..x.cols {
                    self.running_mean[c] =
                        BN_MOMENTUM * self.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
                    self.running_var[c] =
                        BN_MOMENTUM * self.running_var[c] + (1.0 - BN_MOMENTUM) * var[c];
                }
                self.cache = Some(BnCache {
                    centered,
                    x_hat,
                    inv_std,
                    mode,
                });
                Ok(y)
            }
            Mode::Eval => {
                let inv_std: Vec<f64> = self
                    .running_var
                    .iter()
                    .map(|&v| 1.0 / (v + BN_EPS).sqrt())
                    .collect();
                let mut centered = x.clone();
                for r in 0..m {
                    for (c, v) in centered.data[r * x.cols..(r + 1) * x.cols]
                        .iter_mut()
                        .enumerate()
                    {
                        *v -= self.running_mean[c];
                    }
                }
                let mut x_hat = centered.clone();
                for r in 0..m {
                    for (c, v) in x_hat.data[r * x.cols..(r + 1) * x.cols]
                        .iter_mut()
                        .enumerate()
                    {
                        *v *= inv_std[c];
                    }
                }
                let mut y = x_hat.clone();
                for r in 0..m {
                    for (c, v) in y.data[r * x.cols..(r + 1) * x.cols].iter_mut().enumerate() {
                        *v = self.gamma[c] * *v + self.beta[c];
                    }
                }
                self.cache = Some(BnCache {
                    centered,
                    x_hat,
                    inv_std,
                    mode,
                });
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix, NnError> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| NnError::Invalid("batchnorm backward before forward".into()))?;
        let m = upstream.rows;
        let cols = upstream.cols;

        for r in 0..m {
            for c in 0..cols {
                let u = upstream.get(r, c);
                self.g_beta[c] += u;
                self.g_gamma[c] += u * cache.x_hat.get(r, c);
            }
        }

        match cache.mode {
            Mode::Eval => {
                let mut gx = Matrix::zeros(m, cols);
                for r in 0..m {
                    for c in 0..cols {
                        gx.set(
                            r,
                            c,
                            upstream.get(r, c) * self.gamma[c] * cache.inv_std[c],
                        );
                    }
                }
                Ok(gx)
            }
            Mode::Train => {
                // d_xhat = upstream * gamma
                // d_var  = sum(d_xhat * centered) * (-1/2) inv_std^3
                // d_mean = -sum(d_xhat) inv_std + d_var * (-2/m) sum(centered)
                // d_x    = d_xhat inv_std + d_var 2 centered / m + d_mean / m
                let mf = m as f64;
                let mut d_var = vec![0.0; cols];
                let mut sum_dxhat = vec![0.0; cols];
                let mut sum_centered = vec![0.0; cols];
                for r in 0..m {
                    for c in 0..cols {
                        let dxh = upstream.get(r, c) * self.gamma[c];
                        sum_dxhat[c] += dxh;
                        d_var[c] += dxh * cache.centered.get(r, c);
                        sum_centered[c] += cache.centered.get(r, c);
                    }
                }
                for c in 0..cols {
                    let s = cache.inv_std[c];
                    d_var[c] *= -0.5 * s * s * s;
                }
                let d_mean: Vec<f64> = (0..cols)
                    .map(|c| {
                        -sum_dxhat[c] * cache.inv_std[c] + d_var[c] * (-2.0 / mf) * sum_centered[c]
                    })
                    .collect();
                let mut gx = Matrix::zeros(m, cols);
                for r in 0..m {
                    for c in 0..cols {
                        let dxh = upstream.get(r, c) * self.gamma[c];
                        let v = dxh * cache.inv_std[c]
                            + d_var[c] * 2.0 * cache.centered.get(r, c) / mf
                            + d_mean[c] / mf;
                        gx.set(r, c, v);
                    }
                }
                Ok(gx)
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.g_gamma.iter_mut().for_each(|g| *g = 0.0);
        self.g_beta.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Elementwise max(0, x). The subgradient at 0 is taken as 0.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward(&mut self, x: &Matrix) -> Matrix {
        let mask: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
        let mut y = x.clone();
        for (v, &keep) in y.data.iter_mut().zip(&mask) {
            if !keep {
                *v = 0.0;
            }
        }
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<Matrix, NnError> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| NnError::Invalid("relu backward before forward".into()))?;
        let mut gx = upstream.clone();
        for (g, &keep) in gx.data.iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        Ok(gx)
    }
}

/// Lookup table mapping integer indices to learned vectors.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Matrix,
    pub gtable: Matrix,
    cache_idx: Option<Vec<usize>>,
}

impl Embedding {
    /// Rows init uniform in [-0.05, 0.05].
    pub fn new(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * dim).map(|_| rng.gen_range(-0.05..0.05)).collect();
        Embedding {
            table: Matrix { rows, cols: dim, data },
            gtable: Matrix::zeros(rows, dim),
            cache_idx: None,
        }
    }

    pub fn forward(&mut self, indices: &[usize]) -> Result<Matrix, NnError> {
        let mut out = Matrix::zeros(indices.len(), self.table.cols);
        for (r, &i) in indices.iter().enumerate() {
            if i >= self.table.rows {
                return Err(NnError::EmbedIndex {
                    idx: i,
                    rows: self.table.rows,
                });
            }
            out.data[r * out.cols..(r + 1) * out.cols].copy_from_slice(self.table.row(i));
        }
        self.cache_idx = Some(indices.to_vec());
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Result<(), NnError> {
        let idx = self
            .cache_idx
            .as_ref()
            .ok_or_else(|| NnError::Invalid("embedding backward before forward".into()))?;
        for (r, &i) in idx.iter().enumerate() {
            let dst = &mut self.gtable.data[i * self.gtable.cols..(i + 1) * self.gtable.cols];
            for (d, &u) in dst.iter_mut().zip(upstream.row(r)) {
                *d += u;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.gtable.fill(0.0);
    }
}

/// Inverted dropout: units are zeroed with probability tau during training and
/// survivors are scaled by 1/(1-tau), so eval mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub tau: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(tau: f64) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&tau) {
            return Err(NnError::Invalid(format!(
                "dropout rate must be in [0,1), got {tau}"
            )));
        }
        Ok(Dropout { tau, mask: None })
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode, rng: &mut ChaCha8Rng) -> Matrix {
        match mode {
            Mode::Eval => {
                self.mask = None;
                x.clone()
            }
            Mode::Train => {
                let scale = 1.0 / (1.0 - self.tau);
                let mask: Vec<f64> = x
                    .data
                    .iter()
                    .map(|_| if rng.gen::<f64>() >= self.tau { scale } else { 0.0 })
                    .collect();
                let y = Self::apply_mask(x, &mask);
                self.mask = Some(mask);
                y
            }
        }
    }

    /// Elementwise multiply by a fixed mask of scale factors. Exposed so tests
    /// can check the train-mode backward against a frozen mask.
    pub fn apply_mask(x: &Matrix, mask: &[f64]) -> Matrix {
        let mut y = x.clone();
        for (v, &m) in y.data.iter_mut().zip(mask) {
            *v *= m;
        }
        y
    }

    pub fn backward(&mut self, upstream: &Matrix) -> Matrix {
        match &self.mask {
            None => upstream.clone(),
            Some(mask) => Self::apply_mask(upstream, mask),
        }
    }

    pub fn last_mask(&self) -> Option<&[f64]> {
        self.mask.as_deref()
    }
}

/// Identity in the forward pass; multiplies the upstream gradient by -eta in
/// the backward pass. No parameters.
#[derive(Debug, Clone, Copy)]
pub struct GradRev {
    pub eta: f64,
}

impl GradRev {
    pub fn new(eta: f64) -> Result<Self, NnError> {
        if eta < 0.0 {
            return Err(NnError::Invalid(format!(
                "gradient reversal scale must be >= 0, got {eta}"
            )));
        }
        Ok(GradRev { eta })
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        x.clone()
    }

    pub fn backward(&self, upstream: &Matrix) -> Matrix {
        let mut gx = upstream.clone();
        for g in gx.data.iter_mut() {
            *g *= -self.eta;
        }
        gx
    }
}
