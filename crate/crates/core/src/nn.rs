//! Dense numerical core: row-major matrices, perceptrons with hand-written
//! backward passes, softmax cross-entropy, SGD with heavy-ball momentum,
//! EMA parameter copies, and a central-difference gradient checker.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix data", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks equal-length rows. An empty slice yields a `0 × 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("matrix row", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul inner dimension", self.cols, other.rows));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            (self.rows, self.cols, other.cols),
            (&self.data, self.cols, 1),
            (&other.data, other.cols, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("t_matmul shared rows", self.rows, other.rows));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            (self.cols, self.rows, other.cols),
            (&self.data, 1, self.cols),
            (&other.data, other.cols, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("matmul_t shared columns", self.cols, other.cols));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            (self.rows, self.cols, other.rows),
            (&self.data, self.cols, 1),
            (&other.data, 1, other.cols),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Row-major `c = a · b` for an `m × k` by `k × n` product. Each operand is
/// given with its row and column strides, so transposes cost nothing.
pub(crate) fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() == m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dot product with four independent accumulators; the summation order is fixed.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Result of [`l2_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    /// Norm of the input.
    pub norm: f64,
    /// The input norm was `<= eps` and the vector was returned unchanged.
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64], eps: f64) -> Normalized {
    let n = norm(v);
    if n > eps {
        Normalized {
            vector: v.iter().map(|x| x / n).collect(),
            norm: n,
            degenerate: false,
        }
    } else {
        Normalized {
            vector: v.to_vec(),
            norm: n,
            degenerate: true,
        }
    }
}

/// Pulls a gradient w.r.t. `q = z / ‖z‖` back to `z`: `(g − q (q·g)) / ‖z‖`.
pub fn l2_normalize_backward(q: &[f64], z_norm: f64, grad_q: &[f64]) -> Vec<f64> {
    let qg = dot(q, grad_q);
    q.iter()
        .zip(grad_q)
        .map(|(qi, gi)| (gi - qi * qg) / z_norm)
        .collect()
}

/// One fully connected layer, `y = x · w + b`, with `w` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Multi-layer perceptron: ReLU after every hidden layer, identity output.
///
/// The same type doubles as the gradient container returned by
/// [`Mlp::backward`], since gradients share the parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations kept by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer (post-ReLU output of the previous one).
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
}

impl MlpCache {
    pub fn batch(&self) -> usize {
        self.inputs.first().map_or(0, |m| m.rows())
    }
}

impl Mlp {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Usage(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Dense {
                    w: Matrix {
                        rows: fan_in,
                        cols: fan_out,
                        data,
                    },
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Usage("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.len() != l.out_dim() {
                return Err(Error::dim(format!("layer {i} bias"), l.out_dim(), l.b.len()));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::dim(
                    format!("layer {i} input"),
                    layers[i - 1].out_dim(),
                    l.in_dim(),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Dense::out_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    w: Matrix::zeros(l.in_dim(), l.out_dim()),
                    b: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.data.len() + l.b.len()).sum()
    }

    /// Parameter blocks in the order `w0, b0, w1, b1, …`.
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.data.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }

    pub fn block_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.{i}.w"), format!("{prefix}.{i}.b")])
            .collect()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("mlp layer 0 input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(layer, &cur);
            let next = if i < last { relu(&z) } else { z.clone() };
            inputs.push(cur);
            pre.push(z);
            cur = next;
        }
        Ok((cur, MlpCache { inputs, pre }))
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut cur = affine(&self.layers[0], x);
        for layer in &self.layers[1..] {
            relu_in_place(&mut cur);
            cur = affine(layer, &cur);
        }
        Ok(cur)
    }

    /// Returns `(parameter gradients, gradient w.r.t. the input)`.
    pub fn backward(&self, cache: &MlpCache, grad_output: &Matrix) -> Result<(Mlp, Matrix)> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "cache has {} layers, network has {}",
                cache.pre.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, z)) in self.layers.iter().zip(&cache.pre).enumerate() {
            if z.cols() != layer.out_dim() || cache.inputs[i].cols() != layer.in_dim() {
                return Err(Error::Usage(format!("cache does not match layer {i}")));
            }
        }
        let batch = cache.batch();
        if grad_output.rows() != batch || grad_output.cols() != self.output_dim() {
            return Err(Error::Usage(format!(
                "grad_output is {}x{}, expected {}x{}",
                grad_output.rows(),
                grad_output.cols(),
                batch,
                self.output_dim()
            )));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let gw = cache.inputs[i].t_matmul(&g)?;
            let mut gb = vec![0.0; layer.out_dim()];
            for r in 0..g.rows() {
                axpy(1.0, g.row(r), &mut gb);
            }
            grads.push(Dense { w: gw, b: gb });
            let mut gx = g.matmul_t(&layer.w)?;
            if i > 0 {
                // ReLU derivative of the previous layer's pre-activation.
                for (gv, zv) in gx.data.iter_mut().zip(&cache.pre[i - 1].data) {
                    if *zv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            g = gx;
        }
        grads.reverse();
        Ok((Mlp { layers: grads }, g))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
    }
}

fn affine(layer: &Dense, x: &Matrix) -> Matrix {
    let mut z = x.matmul(&layer.w).expect("shape checked by caller");
    for r in 0..z.rows() {
        axpy(1.0, &layer.b, z.row_mut(r));
    }
    z
}

fn relu(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    relu_in_place(&mut out);
    out
}

fn relu_in_place(z: &mut Matrix) {
    for v in &mut z.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean soft-target cross-entropy `−Σ_c s_c log softmax(x)_c` over the batch,
/// with gradient `(softmax(x) − s) / batch`.
pub fn softmax_xent(logits: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if logits.rows() != target.rows() || logits.cols() != target.cols() {
        return Err(Error::dim("softmax_xent target", logits.rows() * logits.cols(), target.rows() * target.cols()));
    }
    let batch = logits.rows();
    if batch == 0 {
        return Ok((0.0, Matrix::zeros(0, logits.cols())));
    }
    for r in 0..batch {
        let s = target.row(r);
        let sum: f64 = s.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || s.iter().any(|&v| v < -1e-9) {
            return Err(Error::Validation(format!("target row {r} {s:?} is not on the simplex")));
        }
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(batch, logits.cols());
    let inv = 1.0 / batch as f64;
    for r in 0..batch {
        let x = logits.row(r);
        let s = target.row(r);
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let g = grad.row_mut(r);
        for c in 0..x.len() {
            let logp = x[c] - lse;
            if s[c] != 0.0 {
                loss -= s[c] * logp;
            }
            g[c] = (logp.exp() - s[c]) * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// SGD with classic heavy-ball momentum: `v ← μ v + g`, `p ← p − lr v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::config("lr", format!("must be > 0, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("sgd_momentum", format!("must lie in [0, 1), got {momentum}")));
        }
        Ok(SgdMomentum {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Velocity buffers are created, zeroed, on the first step.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("sgd parameter blocks", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::dim("sgd velocity blocks", self.velocity.len(), params.len()));
        }
        for (i, ((p, g), v)) in params.iter().zip(grads).zip(&self.velocity).enumerate() {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::dim(format!("sgd block {i}"), p.len(), g.len().min(v.len())));
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.learning_rate * *vi;
            }
        }
        Ok(())
    }
}

/// `shadow ← m · shadow + (1 − m) · online`, elementwise.
pub fn ema_update(online: &[&[f64]], shadow: &mut [&mut [f64]], m: f64) -> Result<()> {
    if online.len() != shadow.len() {
        return Err(Error::dim("ema blocks", online.len(), shadow.len()));
    }
    for (i, (o, s)) in online.iter().zip(shadow.iter()).enumerate() {
        if o.len() != s.len() {
            return Err(Error::dim(format!("ema block {i}"), o.len(), s.len()));
        }
    }
    for (o, s) in online.iter().zip(shadow.iter_mut()) {
        for (oi, si) in o.iter().zip(s.iter_mut()) {
            *si = m * *si + (1.0 - m) * oi;
        }
    }
    Ok(())
}

/// [`ema_update`] over two networks of identical shape.
pub fn ema_update_mlp(online: &Mlp, shadow: &mut Mlp, m: f64) -> Result<()> {
    if online.dims() != shadow.dims() {
        return Err(Error::Usage(format!(
            "EMA shapes differ: {:?} vs {:?}",
            online.dims(),
            shadow.dims()
        )));
    }
    ema_update(&online.blocks(), &mut shadow.blocks_mut(), m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedBlock {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared on an absolute scale.
    pub abs_floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            epsilon: 1e-6,
            tolerance: 1e-5,
            abs_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockError {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_block: String,
    pub blocks: Vec<BlockError>,
    pub n_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss_fn` at `params`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, abs_floor)`.
/// `params` are perturbed in place and restored.
pub fn gradcheck<F>(
    mut loss_fn: F,
    params: &mut [NamedBlock],
    analytic: &[Vec<f64>],
    cfg: GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: FnMut(&[NamedBlock]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::dim("gradcheck blocks", params.len(), analytic.len()));
    }
    let mut blocks = Vec::with_capacity(params.len());
    let mut n_checked = 0;
    for b in 0..params.len() {
        if params[b].values.len() != analytic[b].len() {
            return Err(Error::dim(
                format!("gradcheck block {}", params[b].name),
                params[b].values.len(),
                analytic[b].len(),
            ));
        }
        let mut worst = (0.0f64, 0usize);
        for (i, &a) in analytic[b].iter().enumerate() {
            let orig = params[b].values[i];
            params[b].values[i] = orig + cfg.epsilon;
            let up = loss_fn(params)?;
            params[b].values[i] = orig - cfg.epsilon;
            let down = loss_fn(params)?;
            params[b].values[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss while perturbing {}[{i}]",
                    params[b].name
                )));
            }
            let numeric = (up - down) / (2.0 * cfg.epsilon);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            if rel > worst.0 || rel.is_nan() {
                worst = (rel, i);
            }
            n_checked += 1;
        }
        blocks.push(BlockError {
            name: params[b].name.clone(),
            max_rel_err: worst.0,
            worst_index: worst.1,
        });
    }
    let (max_rel_err, worst_block) = blocks
        .iter()
        .fold((0.0f64, String::new()), |acc, b| {
            if b.max_rel_err > acc.0 || acc.1.is_empty() {
                (b.max_rel_err, b.name.clone())
            } else {
                acc
            }
        });
    Ok(GradcheckReport {
        max_rel_err,
        worst_block,
        blocks,
        n_checked,
        tolerance: cfg.tolerance,
        passed: max_rel_err < cfg.tolerance,
    })
}
