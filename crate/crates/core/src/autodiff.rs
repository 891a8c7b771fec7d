//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node; `backward` walks the nodes in exact
//! reverse order of recording. Only nodes that depend on a trainable leaf
//! carry gradients, so frozen sub-graphs cost nothing on the way back.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Reshape(Var),
    PixelShuffle {
        x: Var,
        grid: usize,
        channels: usize,
    },
    Sum(Var),
    Bce {
        logits: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients of trainable leaves, keyed by parameter name in recording order.
pub type Gradients<T> = IndexMap<String, Tensor<T>>;

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    names: IndexMap<String, Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            names: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Looks up a named parameter leaf.
    pub fn var(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a named parameter. Only `trainable` parameters receive gradients.
    pub fn param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<Var> {
        if self.names.contains_key(name) {
            return Err(Error::Config(format!("parameter {name:?} recorded twice")));
        }
        let v = self.push(value, Op::Leaf, trainable);
        self.nodes[v.0].name = Some(name.to_owned());
        self.names.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.value(v).shape() {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::dim(format!("{what} must be a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {m}x{k} . {k2}x{n}"
            )));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Adds a bias vector to every row of the trailing axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let bshape = self.value(bias).shape();
        if bshape != [d] {
            return Err(Error::dim(format!(
                "bias shape {bshape:?} does not match trailing dim {d}"
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "add shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Relu(x), rg)
    }

    /// Normalizes over the trailing axis: `(x - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        if d == 0 || xt.rank() == 0 {
            return Err(Error::dim("layer_norm needs a non-empty trailing axis"));
        }
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm affine params must have shape [{d}]"
            )));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = T::lift(eps);
        let dn = T::lift(d as f64);
        let rows = xt.len() / d;
        let mut out = vec![T::zero(); xt.len()];
        let mut xhat = vec![T::zero(); xt.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let denom = (var + eps).sqrt();
            // eps == 0 on a constant row: the centered values are all zero
            let rs = if denom > T::zero() { T::one() / denom } else { T::zero() };
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xt.shape().to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `[seq × dim]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims(q, "attention q")?;
        for (var, what) in [(k, "attention k"), (v, "attention v")] {
            if self.matrix_dims(var, what)? != (n, d) {
                return Err(Error::dim("attention q, k, v shapes differ"));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!(
                "embedding dim {d} not divisible by {heads} heads"
            )));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            d,
            heads,
        );
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Per-pixel linear map `[h×w×cin] → [h×w×cout]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, cin) = match *self.value(x).shape() {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::dim(format!("conv1x1 input must be h×w×c, got {s:?}"))),
        };
        let (wcin, cout) = self.matrix_dims(w, "conv1x1 weight")?;
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv1x1 weight expects {wcin} input channels, image has {cin}"
            )));
        }
        let flat = self.reshape(x, &[h * wd, cin])?;
        let y = self.matmul(flat, w)?;
        let y = self.add_row(y, b)?;
        self.reshape(y, &[h, wd, cout])
    }

    /// Rearranges `[g²  × 4c]` tokens into `[(2g)² × c]`, doubling the grid.
    pub fn pixel_shuffle(&mut self, x: Var, grid: usize) -> Result<Var> {
        let (n, c4) = self.matrix_dims(x, "pixel_shuffle input")?;
        if n != grid * grid || c4 % 4 != 0 {
            return Err(Error::dim(format!(
                "pixel_shuffle expects {grid}²×4c tokens, got {n}×{c4}"
            )));
        }
        let c = c4 / 4;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (dst, from) in shuffle_index(grid, c) {
            out[dst] = src[from];
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![4 * n, c], out),
            Op::PixelShuffle {
                x,
                grid,
                channels: c,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::from_parts(Vec::new(), vec![s]), Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy on logits, in the stable
    /// `max(z,0) - z·t + ln(1 + e^{-|z|})` form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::dim(format!(
                "bce shapes differ: logits {:?}, targets {:?}",
                z.shape(),
                targets.shape()
            )));
        }
        if let Some(bad) = targets
            .data()
            .iter()
            .find(|&&t| !(t >= T::zero() && t <= T::one()))
        {
            return Err(Error::Domain(format!("bce target {bad:?} outside [0, 1]")));
        }
        let loss = bce_mean(z.data(), targets.data());
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::from_parts(Vec::new(), vec![loss]),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`. Returns a gradient for every
    /// trainable leaf the loss depends on; other leaves are absent.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result = Gradients::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(result);
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.name {
                        let shape = node.value.shape().to_vec();
                        result.insert(name.clone(), Tensor::from_parts(shape, g));
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.matrix_dims(*a, "")?;
                    let n = self.value(*b).shape()[1];
                    if self.requires_grad(*a) {
                        let da = kernels::matmul_nt(&g, self.value(*b).data(), m, k, n);
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.requires_grad(*b) {
                        let db = kernels::matmul_tn(self.value(*a).data(), &g, m, k, n);
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.requires_grad(*bias) {
                        let d = self.value(*bias).len();
                        let mut db = vec![T::zero(); d];
                        for row in g.chunks(d) {
                            for (o, &v) in db.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        self.accumulate(&mut grads, *bias, db);
                    }
                    if self.requires_grad(*x) {
                        self.accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) && self.requires_grad(*b) {
                        self.accumulate(&mut grads, *a, g.clone());
                        self.accumulate(&mut grads, *b, g);
                    } else if self.requires_grad(*a) {
                        self.accumulate(&mut grads, *a, g);
                    } else if self.requires_grad(*b) {
                        self.accumulate(&mut grads, *b, g);
                    }
                }
                Op::Gelu(x) => {
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Relu(x) => {
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = self.value(*gamma).len();
                    let gam = self.value(*gamma).data();
                    if self.requires_grad(*gamma) {
                        let mut dg = vec![T::zero(); d];
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += grow[j] * hrow[j];
                            }
                        }
                        self.accumulate(&mut grads, *gamma, dg);
                    }
                    if self.requires_grad(*beta) {
                        let mut db = vec![T::zero(); d];
                        for grow in g.chunks(d) {
                            for j in 0..d {
                                db[j] += grow[j];
                            }
                        }
                        self.accumulate(&mut grads, *beta, db);
                    }
                    if self.requires_grad(*x) {
                        let dn = T::lift(d as f64);
                        let mut dx = vec![T::zero(); g.len()];
                        for (r, rs) in rstd.iter().enumerate() {
                            let grow = &g[r * d..(r + 1) * d];
                            let hrow = &xhat[r * d..(r + 1) * d];
                            let mut sum_dh = T::zero();
                            let mut sum_dh_h = T::zero();
                            for j in 0..d {
                                let dh = grow[j] * gam[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hrow[j];
                            }
                            for j in 0..d {
                                let dh = grow[j] * gam[j];
                                dx[r * d + j] =
                                    *rs / dn * (dn * dh - sum_dh - hrow[j] * sum_dh_h);
                            }
                        }
                        self.accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (n, d) = self.matrix_dims(*q, "")?;
                    let (dq, dk, dv) = attention_backward(
                        &g,
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        n,
                        d,
                        *heads,
                    );
                    for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.requires_grad(var) {
                            self.accumulate(&mut grads, var, grad);
                        }
                    }
                }
                Op::Reshape(x) => self.accumulate(&mut grads, *x, g),
                Op::PixelShuffle { x, grid, channels } => {
                    let mut dx = vec![T::zero(); g.len()];
                    for (dst, from) in shuffle_index(*grid, *channels) {
                        dx[from] = g[dst];
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    self.accumulate(&mut grads, *x, vec![g[0]; len]);
                }
                Op::Bce { logits, targets } => {
                    let z = self.value(*logits).data();
                    let scale = g[0] / T::lift(z.len() as f64);
                    let dz = z
                        .iter()
                        .zip(targets)
                        .map(|(&zv, &t)| (kernels::sigmoid(zv) - t) * scale)
                        .collect();
                    self.accumulate(&mut grads, *logits, dz);
                }
            }
        }
        Ok(result)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

/// `(destination, source)` flat index pairs of the pixel shuffle.
fn shuffle_index(grid: usize, c: usize) -> impl Iterator<Item = (usize, usize)> {
    let out_grid = 2 * grid;
    (0..grid).flat_map(move |i| {
        (0..grid).flat_map(move |j| {
            (0..4).flat_map(move |sub| {
                let (a, b) = (sub / 2, sub % 2);
                let dst_tok = (2 * i + a) * out_grid + (2 * j + b);
                let src_tok = i * grid + j;
                (0..c).map(move |ch| (dst_tok * c + ch, src_tok * 4 * c + sub * c + ch))
            })
        })
    })
}

fn bce_mean<T: Element>(z: &[T], t: &[T]) -> T {
    let total = z.iter().zip(t).fold(T::zero(), |acc, (&zv, &tv)| {
        acc + zv.max(T::zero()) - zv * tv + (-zv.abs()).exp().ln_1p()
    });
    total / T::lift(z.len() as f64)
}

fn attention_forward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let hd = d / heads;
    let scale = T::lift(1.0 / (hd as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); heads * n * n];
    for h in 0..heads {
        let off = h * hd;
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + hd];
            let row = &mut p[i * n..(i + 1) * n];
            let mut max = T::neg_infinity();
            for j in 0..n {
                let s = kernels::dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                row[j] = s;
                max = max.max(s);
            }
            let mut denom = T::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                denom += *s;
            }
            for s in row.iter_mut() {
                *s = *s / denom;
            }
            let oi = &mut out[i * d + off..i * d + off + hd];
            for j in 0..n {
                let pij = row[j];
                for (o, &vv) in oi.iter_mut().zip(&v[j * d + off..j * d + off + hd]) {
                    *o += pij * vv;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Element>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hd = d / heads;
    let scale = T::lift(1.0 / (hd as f64).sqrt());
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut ds = vec![T::zero(); n];
    for h in 0..heads {
        let off = h * hd;
        let p = &probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let gi = &g[i * d + off..i * d + off + hd];
            let prow = &p[i * n..(i + 1) * n];
            // dP_ij = g_i · v_j ; dS = P ⊙ (dP - Σ_j P_ij dP_ij)
            let mut weighted = T::zero();
            for j in 0..n {
                let dp = kernels::dot(gi, &v[j * d + off..j * d + off + hd]);
                ds[j] = dp;
                weighted += prow[j] * dp;
            }
            for j in 0..n {
                ds[j] = prow[j] * (ds[j] - weighted) * scale;
            }
            for j in 0..n {
                let pij = prow[j];
                let dsj = ds[j];
                for c in 0..hd {
                    dv[j * d + off + c] += pij * gi[c];
                    dq[i * d + off + c] += dsj * k[j * d + off + c];
                    dk[j * d + off + c] += dsj * q[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Largest relative error between analytic and central-difference
    /// gradients of `f` with respect to every element of `inputs[which]`.
    fn fd_check(
        inputs: &[Tensor<f64>],
        which: usize,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) -> f64 {
        let run = |vals: &[Tensor<f64>]| -> (f64, Gradients<f64>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(&format!("p{i}"), t.clone(), true).unwrap())
                .collect();
            let out = f(&mut tape, &vars);
            let loss = tape.value(out).item().unwrap();
            (loss, tape.backward(out).unwrap())
        };
        let (_, grads) = run(inputs);
        let analytic = &grads[&format!("p{which}")];
        let h = 1e-3;
        let mut worst = 0.0f64;
        for e in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[e] -= h;
            let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
            let a = analytic.data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f32>::new();
        let i = tape.constant(t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t32(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let out = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t32(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t32(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
        assert!(matches!(tape.matmul(a, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [random(&[4, 5], &mut rng), random(&[5, 3], &mut rng)];
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let m = t.matmul(v[0], v[1]).unwrap();
            t.sum(m)
        };
        assert!(fd_check(&inputs, 0, f) <= 1e-5);
        assert!(fd_check(&inputs, 1, f) <= 1e-5);
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::<f32>::new();
        let g = tape.constant(Tensor::full(vec![4], 1.0));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let x = tape.constant(Tensor::full(vec![4], 3.5));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g2 = tape.constant(Tensor::full(vec![2], 1.0));
        let b2 = tape.constant(Tensor::zeros(vec![2]));
        let x2 = tape.constant(t32(&[2], &[1.0, 3.0]));
        let y2 = tape.layer_norm(x2, g2, b2, 0.0).unwrap();
        assert_eq!(tape.value(y2).data(), &[-1.0, 1.0]);
        assert!(tape.layer_norm(x2, g, b, 1e-5).is_err());
    }

    #[test]
    fn layer_norm_row_mean_is_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&[2, 8], &mut rng));
        let g = tape.constant(Tensor::full(vec![8], 1.0));
        let beta = 0.25;
        let b = tape.constant(Tensor::full(vec![8], beta));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(y).data().chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            assert!((mean - beta).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [
            random(&[3, 16], &mut rng),
            random(&[16], &mut rng),
            random(&[16], &mut rng),
            random(&[3, 16], &mut rng),
        ];
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            // weight the output so the gradient is not trivially zero
            let w = t.constant(t.value(v[3]).clone());
            let wy = t.reshape(y, &[48, 1]).unwrap();
            let ww = t.reshape(w, &[1, 48]).unwrap();
            let s = t.matmul(ww, wy).unwrap();
            t.sum(s)
        };
        for which in 0..3 {
            let e = fd_check(&inputs, which, f); assert!(e <= 1e-5, "input {which}: {e}");
        }
    }

    #[test]
    fn attention_single_token_returns_v() {
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(t32(&[1, 4], &[0.3, -0.2, 0.9, 1.0]));
        let k = tape.constant(t32(&[1, 4], &[0.1, 0.5, -0.4, 0.2]));
        let v = tape.constant(t32(&[1, 4], &[7.0, -1.0, 2.0, 0.5]));
        let out = tape.attention(q, k, v, 2).unwrap();
        assert_eq!(tape.value(out).data(), &[7.0, -1.0, 2.0, 0.5]);
        assert!(matches!(tape.attention(q, k, v, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(t32(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).cast());
        let k = tape.constant(t32(&[3, 2], &[0.4, 0.1, 0.4, 0.1, 0.4, 0.1]).cast());
        let v = tape.constant(t32(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).cast());
        let out = tape.attention(q, k, v, 1).unwrap();
        for row in tape.value(out).data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (
            random(&[3, 4], &mut rng),
            random(&[3, 4], &mut rng),
            random(&[3, 4], &mut rng),
        );
        // straight-line oracle: one head, explicit softmax
        let mut expected = [[0.0f64; 4]; 3];
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| q.data()[i * 4 + c] * k.data()[j * 4 + c]).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for j in 0..3 {
                for c in 0..4 {
                    expected[i][c] += s[j].exp() / z * v.data()[j * 4 + c];
                }
            }
        }
        let mut tape = Tape::<f64>::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let out = tape.attention(qv, kv, vv, 1).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                assert!((tape.value(out).data()[i * 4 + c] - expected[i][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [
            random(&[5, 4], &mut rng),
            random(&[5, 4], &mut rng),
            random(&[5, 4], &mut rng),
            random(&[4, 1], &mut rng),
        ];
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let a = t.attention(v[0], v[1], v[2], 2).unwrap();
            let w = t.constant(t.value(v[3]).clone());
            let y = t.matmul(a, w).unwrap();
            let y = t.gelu(y);
            t.sum(y)
        };
        for which in 0..3 {
            let e = fd_check(&inputs, which, f); assert!(e <= 1e-5, "input {which}: {e}");
        }
    }

    #[test]
    fn conv1x1_identity_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f32>::from_fn(vec![4, 4, 3], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let eye = tape.constant(Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.conv1x1(xv, eye, zero).unwrap();
        assert_eq!(tape.value(y).data(), x.data());

        let w = Tensor::<f32>::from_fn(vec![3, 2], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f32>::from_fn(vec![2], |_| rng.gen_range(-1.0..1.0));
        let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv1x1(xv, wv, bv).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 4, 2]);
        // reshape-and-matmul oracle, same accumulation order
        let flat = kernels::matmul(x.data(), w.data(), 16, 3, 2);
        for (p, row) in flat.chunks(2).enumerate() {
            for c in 0..2 {
                assert_eq!(tape.value(y).data()[p * 2 + c], row[c] + b.data()[c]);
            }
        }
        let bad = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(tape.conv1x1(xv, bad, bv), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv1x1_single_pixel_is_linear_layer() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t32(&[1, 1, 2], &[1.0, 2.0]));
        let w = tape.constant(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t32(&[2], &[0.5, -0.5]));
        let y = tape.conv1x1(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[7.5, 9.5]);
    }

    #[test]
    fn bce_reference_points() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let l = tape.bce_with_logits(z, &Tensor::full(vec![2, 2], 0.5)).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let z = tape.constant(Tensor::full(vec![3], 20.0));
        let l = tape.bce_with_logits(z, &Tensor::full(vec![3], 1.0)).unwrap();
        assert!(tape.value(l).item().unwrap() <= 1e-8);

        assert!(matches!(
            tape.bce_with_logits(z, &Tensor::full(vec![3], 1.5)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn bce_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z: Vec<f32> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t: Vec<f32> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let naive: f64 = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| {
                let s = 1.0 / (1.0 + (-(z as f64)).exp());
                -(t as f64 * s.ln() + (1.0 - t as f64) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 4.0;
        let mut tape = Tape::<f32>::new();
        let zv = tape.constant(t32(&[2, 2], &z));
        let l = tape.bce_with_logits(zv, &t32(&[2, 2], &t)).unwrap();
        assert!((tape.value(l).item().unwrap() as f64 - naive).abs() < 1e-6);
    }

    #[test]
    fn bce_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = [random(&[3, 3], &mut rng)];
        let targets = Tensor::<f64>::from_fn(vec![3, 3], |i| (i % 3) as f64 / 2.0);
        let f = |t: &mut Tape<f64>, v: &[Var]| t.bce_with_logits(v[0], &targets).unwrap();
        assert!(fd_check(&inputs, 0, f) <= 1e-5);
    }

    #[test]
    fn pixel_shuffle_roundtrip_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = [random(&[4, 8], &mut rng), random(&[16, 2], &mut rng)];
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.pixel_shuffle(v[0], 2).unwrap();
            let w = t.constant(t.value(v[1]).clone());
            let yy = t.reshape(y, &[1, 32]).unwrap();
            let ww = t.reshape(w, &[32, 1]).unwrap();
            let s = t.matmul(yy, ww).unwrap();
            t.sum(s)
        };
        assert!(fd_check(&inputs, 0, f) <= 1e-5);

        // token (0,0) sub-pixel (1,1) lands at output position (1,1)
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 4], |i| i as f32));
        let y = tape.pixel_shuffle(x, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_sum_and_absent_params() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param("x", Tensor::full(vec![2, 3], 0.7), true).unwrap();
        let _p = tape.param("p", Tensor::full(vec![4], 1.0), true).unwrap();
        let frozen = tape.param("f", Tensor::full(vec![2, 3], 1.0), false).unwrap();
        let y = tape.add(x, frozen).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads["x"].data().iter().all(|&g| g == 1.0));
        assert!(!grads.contains_key("p"));
        assert!(!grads.contains_key("f"));
        assert!(matches!(tape.backward(y), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // keep relu inputs away from the kink
        let x = Tensor::<f64>::from_fn(vec![3, 4], |_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        });
        let inputs = [x];
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let r = t.relu(v[0]);
            let g = t.gelu(r);
            let g2 = t.gelu(v[0]);
            let a = t.add(g, g2).unwrap();
            t.sum(a)
        };
        assert!(fd_check(&inputs, 0, f) <= 1e-5);
    }
}
