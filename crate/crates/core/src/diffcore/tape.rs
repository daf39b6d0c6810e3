use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::math::{sigmoid, softplus};
use crate::reparam;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Batch normalisation mode.
#[derive(Clone, Debug)]
pub enum BnMode {
    /// Normalise with the statistics of the current batch.
    Train { eps: f64 },
    /// Frozen running statistics; the op is a fixed affine map.
    Eval { mean: Vec<f64>, var: Vec<f64>, eps: f64 },
}

/// Per-feature statistics of the batch seen by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Clamp { x: Var, lo: f64, hi: f64 },
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    BernoulliLogLik { logits: Var, target: Vec<f64> },
    SpikeExp { q: Var, rho: Vec<f64>, beta: f64 },
    BinaryEntropy(Var),
    BernoulliCrossEntropy { q: Var, logits: Var },
    PriorEnergy { z: Vec<u8>, h: Var, w: Var, q: Option<Var>, left: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `c = a · b + beta · c` for strided row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || (a.len() > (m - 1) * rsa + (k - 1) * csa && b.len() > (k - 1) * rsb + (n - 1) * csb));
    // SAFETY: the assertions above bound every strided access inside the slices.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable input; its gradient is added to the store on backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut value = store.get(id).clone();
        value.zero_grad();
        self.push(value, Op::Param(id))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[x.0].value;
        let out = Tensor::new(src.shape().to_vec(), src.values().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        self.push(out, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let out: Vec<f64> = self.vals(a).iter().zip(self.vals(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(Tensor::new(shape, out).expect("shape preserved"), op)
    }

    /// `x · w + b` for `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(shape_err("affine", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (rows, inp, out) = (xs[0], ws[0], ws[1]);
        let mut y = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            y.extend_from_slice(self.vals(b));
        }
        gemm(rows, inp, out, self.vals(x), (inp, 1), self.vals(w), (out, 1), &mut y, 1.0);
        Ok(self.push(Tensor::new(vec![rows, out], y)?, Op::Affine { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return Err(shape_err("mul_const", format!("{:?} vs {} values", self.shape(x), c.len())));
        }
        let shape = self.shape(x).to_vec();
        let out = self.vals(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::MulConst(x, c)))
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) if self.shape(p).len() == 2 => self.shape(p)[0],
            _ => return Err(shape_err("concat", "needs at least one 2-D input")),
        };
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat", format!("expected [{rows}, _], got {s:?}")));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.vals(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start > end || end > s[1] {
            return Err(shape_err("slice_cols", format!("{s:?}[.., {start}..{end}]")));
        }
        let (rows, cols) = (s[0], s[1]);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&self.vals(x)[r * cols + start..r * cols + end]);
        }
        Ok(self.push(Tensor::new(vec![rows, w], out)?, Op::SliceCols { x, start, end }))
    }

    /// Per-feature batch normalisation of `x: [B, F]` with scale and shift `[F]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: &BnMode) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(shape_err(
                "batch_norm",
                format!("x {s:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (rows, f) = (s[0], s[1]);
        let xv = self.vals(x);
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                if rows < 2 {
                    return Err(shape_err("batch_norm", "training mode needs at least two rows"));
                }
                let mut mean = vec![0.0; f];
                for r in 0..rows {
                    for j in 0..f {
                        mean[j] += xv[r * f + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; f];
                for r in 0..rows {
                    for j in 0..f {
                        var[j] += (xv[r * f + j] - mean[j]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var, *eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != f || var.len() != f {
                    return Err(shape_err("batch_norm", "running statistics do not match features"));
                }
                (mean.clone(), var.clone(), *eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.vals(gamma), self.vals(beta));
        let mut xhat = vec![0.0; rows * f];
        let mut y = vec![0.0; rows * f];
        for r in 0..rows {
            for j in 0..f {
                let k = r * f + j;
                xhat[k] = (xv[k] - mean[j]) * inv_std[j];
                y[k] = g[j] * xhat[k] + b[j];
            }
        }
        let out = self.push(
            Tensor::new(vec![rows, f], y)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
        );
        Ok((out, train.then_some(BatchStats { mean, var })))
    }

    /// Sum over the columns of a 2-D tensor, giving `[B]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("row_sum", format!("expected 2-D input, got {s:?}")));
        }
        let out = self.vals(x).chunks(s[1].max(1)).take(s[0]).map(|r| r.iter().sum()).collect();
        Ok(self.push(Tensor::vector(out), Op::RowSum(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.vals(x).iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let v = self.vals(x).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(v), Op::Mean(x))
    }

    /// Per-row Bernoulli log-likelihood `Σ_j t_j l_j − softplus(l_j)` of
    /// binary targets under logits `l`.
    pub fn bernoulli_log_lik(&mut self, logits: Var, target: Vec<f64>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || target.len() != s[0] * s[1] {
            return Err(shape_err("bernoulli_log_lik", format!("logits {s:?}, {} targets", target.len())));
        }
        let out = self
            .vals(logits)
            .chunks(s[1].max(1))
            .zip(target.chunks(s[1].max(1)))
            .take(s[0])
            .map(|(l, t)| l.iter().zip(t).map(|(&l, &t)| t * l - softplus(l)).sum())
            .collect();
        Ok(self.push(Tensor::vector(out), Op::BernoulliLogLik { logits, target }))
    }

    /// Spike-and-exponential smoothing `ζ(ρ, q)` with the closed-form
    /// derivative on the exponential branch.
    pub fn spike_exp(&mut self, q: Var, rho: Vec<f64>, beta: f64) -> Result<Var> {
        if rho.len() != self.value(q).numel() {
            return Err(shape_err("spike_exp", format!("q {:?}, {} noise values", self.shape(q), rho.len())));
        }
        let shape = self.shape(q).to_vec();
        let out = self
            .vals(q)
            .iter()
            .zip(&rho)
            .map(|(&q, &r)| reparam::spike_exp_inverse_cdf(r, q, beta))
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::SpikeExp { q, rho, beta }))
    }

    /// Per-row sum of binary entropies of `q: [B, L]`.
    pub fn binary_entropy(&mut self, q: Var) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 {
            return Err(shape_err("binary_entropy", format!("expected 2-D input, got {s:?}")));
        }
        let out = self
            .vals(q)
            .chunks(s[1].max(1))
            .take(s[0])
            .map(|r| r.iter().map(|&v| reparam::binary_entropy(v)).sum())
            .collect();
        Ok(self.push(Tensor::vector(out), Op::BinaryEntropy(q)))
    }

    /// Per-row cross-entropy of Bernoulli(`q: [B, L]`) against a factorial
    /// prior with logits `a: [L]`: `Σ_l softplus(a_l) − q_l a_l`.
    pub fn bernoulli_cross_entropy(&mut self, q: Var, logits: Var) -> Result<Var> {
        let (qs, ls) = (self.shape(q).to_vec(), self.shape(logits).to_vec());
        if qs.len() != 2 || ls != [qs[1]] {
            return Err(shape_err("bernoulli_cross_entropy", format!("q {qs:?}, logits {ls:?}")));
        }
        let a = self.vals(logits);
        let out = self
            .vals(q)
            .chunks(qs[1].max(1))
            .take(qs[0])
            .map(|r| r.iter().zip(a).map(|(&q, &a)| softplus(a) - q * a).sum())
            .collect();
        Ok(self.push(Tensor::vector(out), Op::BernoulliCrossEntropy { q, logits }))
    }

    /// Per-row bipartite energy `Σ h_l z_l + Σ_{ij} W_ij z_i z_{left+j}` of
    /// binary rows `z: [B, L]`.
    ///
    /// With `q` given, the backward pass also routes `∂E/∂z_l · (1 − z_l)/(1 − q_l)`
    /// into `q_l`, the discrete-latent gradient through `z = Θ(ρ + q − 1)`.
    pub fn prior_energy(&mut self, z: Vec<u8>, h: Var, w: Var, q: Option<Var>) -> Result<Var> {
        let (hs, ws) = (self.shape(h).to_vec(), self.shape(w).to_vec());
        if hs.len() != 1 || ws.len() != 2 || ws[0] + ws[1] != hs[0] {
            return Err(shape_err("prior_energy", format!("h {hs:?}, W {ws:?}")));
        }
        let l = hs[0];
        let left = ws[0];
        if !z.len().is_multiple_of(l.max(1)) {
            return Err(shape_err("prior_energy", format!("{} latent values for L = {l}", z.len())));
        }
        let rows = z.len() / l.max(1);
        if let Some(q) = q {
            if self.shape(q) != [rows, l] {
                return Err(shape_err("prior_energy", format!("q {:?}, expected [{rows}, {l}]", self.shape(q))));
            }
        }
        let (hv, wv) = (self.vals(h), self.vals(w));
        let out = z
            .chunks(l.max(1))
            .take(rows)
            .map(|zr| crate::rbm::bipartite_energy(hv, wv, left, zr))
            .collect();
        Ok(self.push(Tensor::vector(out), Op::PriorEnergy { z, h, w, q, left }))
    }

    /// Reverse sweep from the scalar `loss`; parameter gradients are added to
    /// `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.values();
        let mut acc = |v: Var, f: &dyn Fn(usize) -> f64| {
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            for (k, s) in slot.iter_mut().enumerate() {
                *s += f(k);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Relu(x) => acc(*x, &|k| if out[k] > 0.0 { g[k] } else { 0.0 }),
            Op::Sigmoid(x) => acc(*x, &|k| g[k] * out[k] * (1.0 - out[k])),
            Op::Log(x) => {
                let xv = self.vals(*x);
                acc(*x, &|k| g[k] / xv[k])
            }
            Op::Exp(x) => acc(*x, &|k| g[k] * out[k]),
            Op::Scale(x, c) => acc(*x, &|k| g[k] * c),
            Op::AddScalar(x) => acc(*x, &|k| g[k]),
            Op::MulConst(x, c) => acc(*x, &|k| g[k] * c[k]),
            Op::Clamp { x, lo, hi } => {
                let xv = self.vals(*x);
                acc(*x, &|k| if xv[k] >= *lo && xv[k] <= *hi { g[k] } else { 0.0 })
            }
            Op::Add(a, b) => {
                acc(*a, &|k| g[k]);
                acc(*b, &|k| g[k]);
            }
            Op::Sub(a, b) => {
                acc(*a, &|k| g[k]);
                acc(*b, &|k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                acc(*a, &|k| g[k] * bv[k]);
                acc(*b, &|k| g[k] * av[k]);
            }
            Op::Sum(x) => acc(*x, &|_| g[0]),
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                acc(*x, &|_| g[0] / n)
            }
            Op::RowSum(x) => {
                let cols = self.shape(*x)[1].max(1);
                acc(*x, &|k| g[k / cols])
            }
            Op::Concat(parts) => {
                let rows = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let o = off;
                    acc(p, &|k| g[(k / c) * total + o + k % c]);
                    off += c;
                }
                debug_assert_eq!(rows * total, g.len());
            }
            Op::SliceCols { x, start, end } => {
                let cols = self.shape(*x)[1];
                let w = end - start;
                acc(*x, &|k| {
                    let (r, c) = (k / cols, k % cols);
                    if c >= *start && c < *end {
                        g[r * w + c - start]
                    } else {
                        0.0
                    }
                })
            }
            Op::Affine { x, w, b } => {
                let (rows, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let outd = self.shape(*w)[1];
                let mut dx = vec![0.0; rows * inp];
                gemm(rows, outd, inp, g, (outd, 1), self.vals(*w), (1, outd), &mut dx, 0.0);
                let mut dw = vec![0.0; inp * outd];
                gemm(inp, rows, outd, self.vals(*x), (1, inp), g, (outd, 1), &mut dw, 0.0);
                let mut db = vec![0.0; outd];
                for r in 0..rows {
                    for j in 0..outd {
                        db[j] += g[r * outd + j];
                    }
                }
                acc(*x, &|k| dx[k]);
                acc(*w, &|k| dw[k]);
                acc(*b, &|k| db[k]);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let f = inv_std.len();
                let rows = xhat.len() / f.max(1);
                let gv = self.vals(*gamma);
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for r in 0..rows {
                    for j in 0..f {
                        dgamma[j] += g[r * f + j] * xhat[r * f + j];
                        dbeta[j] += g[r * f + j];
                    }
                }
                let dx: Vec<f64> = if *train {
                    // dx = inv_std/B · (B·dxhat − Σ dxhat − xhat·Σ dxhat·xhat)
                    let nb = rows as f64;
                    let mut sum_d = vec![0.0; f];
                    let mut sum_dx = vec![0.0; f];
                    for r in 0..rows {
                        for j in 0..f {
                            let d = g[r * f + j] * gv[j];
                            sum_d[j] += d;
                            sum_dx[j] += d * xhat[r * f + j];
                        }
                    }
                    (0..rows * f)
                        .map(|k| {
                            let j = k % f;
                            let d = g[k] * gv[j];
                            inv_std[j] / nb * (nb * d - sum_d[j] - xhat[k] * sum_dx[j])
                        })
                        .collect()
                } else {
                    (0..rows * f).map(|k| g[k] * gv[k % f] * inv_std[k % f]).collect()
                };
                acc(*x, &|k| dx[k]);
                acc(*gamma, &|k| dgamma[k]);
                acc(*beta, &|k| dbeta[k]);
            }
            Op::BernoulliLogLik { logits, target } => {
                let cols = self.shape(*logits)[1].max(1);
                let lv = self.vals(*logits);
                acc(*logits, &|k| g[k / cols] * (target[k] - sigmoid(lv[k])))
            }
            Op::SpikeExp { q, rho, beta } => {
                let qv = self.vals(*q);
                acc(*q, &|k| g[k] * reparam::spike_exp_dzeta_dq(rho[k], qv[k], *beta))
            }
            Op::BinaryEntropy(q) => {
                let cols = self.shape(*q)[1].max(1);
                let qv = self.vals(*q);
                acc(*q, &|k| {
                    let p = crate::math::clip_prob(qv[k]);
                    if p != qv[k] {
                        0.0
                    } else {
                        g[k / cols] * ((1.0 - p).ln() - p.ln())
                    }
                })
            }
            Op::BernoulliCrossEntropy { q, logits } => {
                let cols = self.shape(*q)[1].max(1);
                let rows = self.shape(*q)[0];
                let (qv, av) = (self.vals(*q), self.vals(*logits));
                acc(*q, &|k| -g[k / cols] * av[k % cols]);
                let mut da = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        da[j] += g[r] * (sigmoid(av[j]) - qv[r * cols + j]);
                    }
                }
                acc(*logits, &|k| da[k]);
            }
            Op::PriorEnergy { z, h, w, q, left } => {
                let l = self.shape(*h)[0];
                let right = l - left;
                let rows = z.len() / l.max(1);
                let mut dh = vec![0.0; l];
                let mut dw = vec![0.0; left * right];
                for r in 0..rows {
                    let zr = &z[r * l..(r + 1) * l];
                    for k in 0..l {
                        dh[k] += g[r] * zr[k] as f64;
                    }
                    for i in 0..*left {
                        if zr[i] == 1 {
                            for j in 0..right {
                                dw[i * right + j] += g[r] * zr[left + j] as f64;
                            }
                        }
                    }
                }
                acc(*h, &|k| dh[k]);
                acc(*w, &|k| dw[k]);
                if let Some(q) = q {
                    let (hv, wv, qv) = (self.vals(*h), self.vals(*w), self.vals(*q));
                    let mut dq = vec![0.0; rows * l];
                    for r in 0..rows {
                        let zr = &z[r * l..(r + 1) * l];
                        for k in 0..l {
                            let weight = reparam::discrete_grad_weight(zr[k], qv[r * l + k]);
                            if weight == 0.0 {
                                continue;
                            }
                            let field = crate::rbm::unit_field(hv, wv, *left, zr, k);
                            dq[r * l + k] = g[r] * field * weight;
                        }
                    }
                    acc(*q, &|k| dq[k]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng as _;

    fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Compares tape gradients of `f` with central differences over every
    /// parameter entry.
    fn check<F>(store: &mut ParamStore, f: F, tol: f64)
    where
        F: Fn(&mut Tape, &ParamStore) -> Var,
    {
        store.zero_grads();
        let mut tape = Tape::new();
        let loss = f(&mut tape, store);
        tape.backward(loss, store).unwrap();
        let analytic = store.flatten_grads();
        let base = store.flatten();
        let eval = |store: &mut ParamStore, flat: &[f64]| {
            store.assign_flat(flat).unwrap();
            let mut t = Tape::new();
            let v = f(&mut t, store);
            t.value(v).values()[0]
        };
        let step = 1e-5;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += step;
            let up = eval(store, &p);
            p[k] -= 2.0 * step;
            let down = eval(store, &p);
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-2);
            assert!(err <= tol, "entry {k}: analytic {} numeric {numeric}", analytic[k]);
        }
        store.assign_flat(&base).unwrap();
    }

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
        let w = t.leaf(Tensor::zeros(&[3, 2]));
        let b = t.leaf(Tensor::zeros(&[2]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y).values(), &[0.0, 0.0]);
        let s = t.sigmoid(y);
        assert_eq!(t.value(s).values(), &[0.5, 0.5]);
        let r = t.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let r = t.relu(r);
        assert_eq!(t.value(r).values(), &[0.0, 2.0]);
    }

    #[test]
    fn backward_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(0.7));
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(wv, x).unwrap();
        t.backward(y, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[3.0]);
        t.backward(y, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[6.0]);

        store.zero_grads();
        store.get_mut(w).values_mut()[0] = 0.0;
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let s = t.sigmoid(wv);
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_and_shape_errors() {
        let mut store = ParamStore::new();
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(a, &mut store), Err(Error::NonScalarLoss(_))));
        let b = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, b), Err(Error::Shape { op: "add", .. })));
        let x = t.leaf(Tensor::zeros(&[2, 3]));
        let w = t.leaf(Tensor::zeros(&[2, 3]));
        let bias = t.leaf(Tensor::zeros(&[3]));
        assert!(matches!(t.affine(x, w, bias), Err(Error::Shape { op: "affine", .. })));
    }

    #[test]
    fn two_layer_network_gradients() {
        let mut rng = substream(1, 0);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", Tensor::glorot(5, 7, &mut rng));
        let b1 = store.add("b1", uniform(&[7], -0.5, 0.5, &mut rng));
        let w2 = store.add("w2", Tensor::glorot(7, 3, &mut rng));
        let b2 = store.add("b2", uniform(&[3], -0.5, 0.5, &mut rng));
        let x = uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let target: Vec<f64> = (0..12).map(|_| f64::from(rng.random::<bool>())).collect();
        check(
            &mut store,
            |t, s| {
                let xv = t.leaf(x.clone());
                let (w1, b1, w2, b2) = (t.param(s, w1), t.param(s, b1), t.param(s, w2), t.param(s, b2));
                let h = t.affine(xv, w1, b1).unwrap();
                let h = t.relu(h);
                let o = t.affine(h, w2, b2).unwrap();
                let ll = t.bernoulli_log_lik(o, target.clone()).unwrap();
                t.mean(ll)
            },
            1e-5,
        );
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = substream(2, 0);
        let mut store = ParamStore::new();
        let a = store.add("a", uniform(&[2, 3], 0.2, 2.0, &mut rng));
        let b = store.add("b", uniform(&[2, 3], -1.0, 1.0, &mut rng));
        let c: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        check(
            &mut store,
            |t, s| {
                let (a, b) = (t.param(s, a), t.param(s, b));
                let la = t.log(a);
                let eb = t.exp(b);
                let m = t.mul(la, eb).unwrap();
                let sg = t.sigmoid(b);
                let d = t.sub(m, sg).unwrap();
                let k = t.mul_const(d, c.clone()).unwrap();
                let k = t.scale(k, 1.7);
                let k = t.add_scalar(k, 0.3);
                let cl = t.clamp(a, 0.1, 5.0);
                let k = t.add(k, cl).unwrap();
                let rs = t.row_sum(k).unwrap();
                t.sum(rs)
            },
            1e-5,
        );
    }

    #[test]
    fn structural_gradients() {
        let mut rng = substream(3, 0);
        let mut store = ParamStore::new();
        let a = store.add("a", uniform(&[3, 2], -1.0, 1.0, &mut rng));
        let b = store.add("b", uniform(&[3, 4], -1.0, 1.0, &mut rng));
        let weights = uniform(&[3, 3], -1.0, 1.0, &mut rng).into_values();
        check(
            &mut store,
            |t, s| {
                let (a, b) = (t.param(s, a), t.param(s, b));
                let c = t.concat(&[a, b, a]).unwrap();
                let sl = t.slice_cols(c, 1, 4).unwrap();
                let e = t.exp(sl);
                let k = t.mul_const(e, weights.clone()).unwrap();
                t.mean(k)
            },
            1e-5,
        );
    }

    #[test]
    fn batch_norm_gradients_and_eval_mode() {
        let mut rng = substream(4, 0);
        let mut store = ParamStore::new();
        let x = store.add("x", uniform(&[5, 3], -2.0, 2.0, &mut rng));
        let g = store.add("g", uniform(&[3], 0.5, 1.5, &mut rng));
        let b = store.add("b", uniform(&[3], -0.5, 0.5, &mut rng));
        let weights = uniform(&[5, 3], -1.0, 1.0, &mut rng).into_values();
        for mode in [
            BnMode::Train { eps: 1e-5 },
            BnMode::Eval { mean: vec![0.1, -0.2, 0.3], var: vec![1.5, 0.5, 2.0], eps: 1e-5 },
        ] {
            check(
                &mut store,
                |t, s| {
                    let (x, g, b) = (t.param(s, x), t.param(s, g), t.param(s, b));
                    let (y, _) = t.batch_norm(x, g, b, &mode).unwrap();
                    let y = t.sigmoid(y);
                    let k = t.mul_const(y, weights.clone()).unwrap();
                    t.sum(k)
                },
                1e-5,
            );
        }
        let mut t = Tape::new();
        let xv = t.param(&store, x);
        let gv = t.param(&store, g);
        let bv = t.param(&store, b);
        let (_, stats) = t.batch_norm(xv, gv, bv, &BnMode::Train { eps: 1e-5 }).unwrap();
        let stats = stats.unwrap();
        let mode = BnMode::Eval { mean: stats.mean.clone(), var: stats.var.clone(), eps: 1e-5 };
        let single = t.slice_cols(xv, 0, 3).unwrap();
        let (y, none) = t.batch_norm(single, gv, bv, &mode).unwrap();
        assert!(none.is_none());
        let (xs, gs, bs) = (store.get(x).values(), store.get(g).values(), store.get(b).values());
        for (k, &xk) in xs.iter().enumerate().take(15) {
            let j = k % 3;
            let expect = gs[j] * (xk - stats.mean[j]) / (stats.var[j] + 1e-5).sqrt() + bs[j];
            assert!((t.value(y).values()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_op_gradients() {
        let mut rng = substream(5, 0);
        let mut store = ParamStore::new();
        let q = store.add("q", uniform(&[3, 4], 0.2, 0.8, &mut rng));
        let a = store.add("a", uniform(&[4], -1.0, 1.0, &mut rng));
        let h = store.add("h", uniform(&[4], -1.0, 1.0, &mut rng));
        let w = store.add("w", uniform(&[2, 2], -1.0, 1.0, &mut rng));
        // Noise kept away from the spike boundary so the finite difference does
        // not straddle it.
        let rho: Vec<f64> = store
            .get(q)
            .values()
            .iter()
            .map(|&qv| if rng.random::<bool>() { 1.0 - qv + 0.1 } else { (1.0 - qv) * 0.5 })
            .collect();
        let z: Vec<u8> = rho.iter().zip(store.get(q).values()).map(|(&r, &qv)| reparam::discrete_from_noise(r, qv)).collect();
        let target: Vec<f64> = (0..12).map(|_| f64::from(rng.random::<bool>())).collect();
        check(
            &mut store,
            |t, s| {
                let (q, a, h, w) = (t.param(s, q), t.param(s, a), t.param(s, h), t.param(s, w));
                let zeta = t.spike_exp(q, rho.clone(), 4.0).unwrap();
                let ll = t.bernoulli_log_lik(zeta, target.clone()).unwrap();
                let ent = t.binary_entropy(q).unwrap();
                let ce = t.bernoulli_cross_entropy(q, a).unwrap();
                let e = t.prior_energy(z.clone(), h, w, None).unwrap();
                let x = t.add(ll, ent).unwrap();
                let x = t.sub(x, ce).unwrap();
                let x = t.sub(x, e).unwrap();
                t.mean(x)
            },
            1e-5,
        );
    }

    #[test]
    fn prior_energy_routes_discrete_gradient() {
        let mut store = ParamStore::new();
        let h = store.add("h", Tensor::vector(vec![0.5, -1.0, 0.25, 2.0]));
        let w = store.add("w", Tensor::matrix(2, 2, vec![1.0, -0.5, 0.3, 0.7]).unwrap());
        let q = store.add("q", Tensor::matrix(1, 4, vec![0.4, 0.6, 0.2, 0.9]).unwrap());
        let z = vec![0u8, 1, 0, 1];
        let mut t = Tape::new();
        let (hv, wv, qv) = (t.param(&store, h), t.param(&store, w), t.param(&store, q));
        let e = t.prior_energy(z.clone(), hv, wv, Some(qv)).unwrap();
        assert!((t.value(e).values()[0] - 1.7).abs() < 1e-15);
        let s = t.sum(e);
        t.backward(s, &mut store).unwrap();
        let dq = store.get(q).grad().unwrap();
        // unit 0: field h0 + W01 (z3 = 1) = 0.5 - 0.5, weight 1/(1-0.4)
        assert!((dq[0] - 0.0).abs() < 1e-15);
        // unit 2: field h2 + W10 (z1 = 1) = 0.25 + 0.3, weight 1/(1-0.2)
        assert!((dq[2] - 0.55 / 0.8).abs() < 1e-12);
        assert_eq!(dq[1], 0.0);
        assert_eq!(dq[3], 0.0);
        assert_eq!(store.get(h).grad().unwrap(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(store.get(w).grad().unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }
}
