//! Reverse-mode autodiff over an append-only operation tape.
//!
//! Every operation pushes one node holding its output tensor and enough
//! bookkeeping to run its vector-Jacobian product. Nodes refer to inputs by
//! index, so inputs always precede outputs and a single reverse sweep over
//! the arena propagates gradients. Tapes are cheap to build and are thrown
//! away after each optimization step.

use super::{kernels, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul { a: usize, b: usize },
    MatmulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    Sigmoid { x: usize },
    RmsNorm { x: usize, gain: usize, eps: T },
    Softmax { x: usize },
    Embedding { table: usize, ids: Vec<u32> },
    RotatePairs { x: usize, thetas: Vec<f64>, start_pos: usize, conjugate: bool },
    ConcatCols { parts: Vec<usize> },
    Sum { x: usize },
    CrossEntropy { logits: usize, labels: Vec<u32>, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Tape<T> {
    /// `grad_enabled: false` builds a forward-only tape; `backward` on such
    /// a tape is a contract violation.
    pub fn new(grad_enabled: bool) -> Self {
        Tape { nodes: Vec::new(), grad_enabled }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let requires = self.grad_enabled;
        self.push(value, Op::Leaf, requires)
    }

    /// Registers a non-trainable leaf (inputs, masks, fixed matrices).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`, if `v`
    /// participated in that backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, ka, n, out.data_mut());
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Matmul { a: a.0, b: b.0 }, requires))
    }

    /// `a (m×k) · b (n×k) transposed`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2("matmul_nt")?;
        let (n, kb) = self.value(b).dims2("matmul_nt")?;
        if ka != kb {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, ka, n, out.data_mut());
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::MatmulNt { a: a.0, b: b.0 }, requires))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = self.value(a).clone();
        out.clear_grad();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o + bv;
        }
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add { a: a.0, b: b.0 }, requires))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let mut out = self.value(a).clone();
        out.clear_grad();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * bv;
        }
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul { a: a.0, b: b.0 }, requires))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut out = self.value(x).clone();
        out.clear_grad();
        for o in out.data_mut() {
            *o = *o * c;
        }
        let requires = self.requires(x);
        self.push(out, Op::Scale { x: x.0, c }, requires)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.clear_grad();
        for o in out.data_mut() {
            *o = kernels::sigmoid(*o);
        }
        let requires = self.requires(x);
        self.push(out, Op::Sigmoid { x: x.0 }, requires)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (rows, d) = self.value(x).rows_over_last_dim()?;
        if self.value(gain).shape() != [d] {
            return Err(self.shape_err("rms_norm", x, gain));
        }
        let mut out = Tensor::zeros(self.value(x).shape().to_vec());
        for r in 0..rows {
            kernels::rms_norm_row(
                &self.value(x).data()[r * d..(r + 1) * d],
                self.value(gain).data(),
                eps,
                &mut out.data_mut()[r * d..(r + 1) * d],
            );
        }
        let requires = self.requires(x) || self.requires(gain);
        Ok(self.push(out, Op::RmsNorm { x: x.0, gain: gain.0, eps }, requires))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).all_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let (rows, d) = self.value(x).rows_over_last_dim()?;
        let mut out = self.value(x).clone();
        out.clear_grad();
        for r in 0..rows {
            kernels::softmax_row_in_place(&mut out.data_mut()[r * d..(r + 1) * d]);
        }
        let requires = self.requires(x);
        Ok(self.push(out, Op::Softmax { x: x.0 }, requires))
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2("embedding")?;
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Input(format!(
                "embedding id {bad} out of range for table with {vocab} rows"
            )));
        }
        let mut out = Tensor::zeros(vec![ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            let src = &self.value(table).data()[id as usize * d..(id as usize + 1) * d];
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(src);
        }
        let requires = self.requires(table);
        Ok(self.push(out, Op::Embedding { table: table.0, ids: ids.to_vec() }, requires))
    }

    /// Rotates each row's element pairs by position-scaled angles, where row
    /// `r` sits at sequence position `start_pos + r`.
    pub fn rotate_pairs(
        &mut self,
        x: Var,
        thetas: &[f64],
        start_pos: usize,
        conjugate: bool,
    ) -> Result<Var> {
        let (rows, d) = self.value(x).rows_over_last_dim()?;
        if d != thetas.len() * 2 {
            return Err(Error::Input(format!(
                "rotate_pairs needs an even width of {} for {} angles, got {d}",
                thetas.len() * 2,
                thetas.len()
            )));
        }
        let mut out = Tensor::zeros(self.value(x).shape().to_vec());
        for r in 0..rows {
            kernels::rotate_pairs(
                &self.value(x).data()[r * d..(r + 1) * d],
                start_pos + r,
                thetas,
                conjugate,
                &mut out.data_mut()[r * d..(r + 1) * d],
            );
        }
        let requires = self.requires(x);
        Ok(self.push(
            out,
            Op::RotatePairs { x: x.0, thetas: thetas.to_vec(), start_pos, conjugate },
            requires,
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one input".into()));
        }
        let (rows, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(vec![rows, total]);
        for r in 0..rows {
            let mut col = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.value(p).data()[r * w..(r + 1) * w];
                out.data_mut()[r * total + col..r * total + col + w].copy_from_slice(src);
                col += w;
            }
        }
        let requires = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, requires))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut total = T::zero();
        for &v in self.value(x).data() {
            total = total + v;
        }
        let requires = self.requires(x);
        self.push(Tensor::scalar(total), Op::Sum { x: x.0 }, requires)
    }

    /// Gated linear unit as a composite of primitive ops.
    pub fn glu(&mut self, x: Var, w_value: Var, w_gate: Var) -> Result<Var> {
        let value = self.matmul(x, w_value)?;
        let gate = self.matmul(x, w_gate)?;
        let gate = self.sigmoid(gate);
        self.mul(value, gate)
    }

    /// Mean masked token-level cross entropy between `logits` rows and
    /// integer labels. Positions with `mask[r] == false` do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != rows || mask.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy got {rows} logit rows but {} labels and {} mask entries",
                labels.len(),
                mask.len()
            )));
        }
        let counted = mask.iter().filter(|&&m| m).count();
        if counted == 0 {
            return Err(Error::Contract("cross_entropy mask excludes every position".into()));
        }
        for (r, (&label, &m)) in labels.iter().zip(mask).enumerate() {
            if m && label as usize >= vocab {
                return Err(Error::Input(format!(
                    "label {label} at position {r} out of range for vocab {vocab}"
                )));
            }
        }
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &self.value(logits).data()[r * vocab..(r + 1) * vocab];
            total = total + row_neg_log_prob(row, labels[r] as usize);
        }
        let loss = total / T::from_f64(counted as f64);
        let requires = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), mask: mask.to_vec() },
            requires,
        ))
    }

    /// Accumulates `d(loss)/d(node)` into every participating node's grad
    /// buffer. `loss` must be a scalar on a grad-enabled tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on a tape built with gradients disabled".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.nodes[loss.0].value.grad_mut_or_init()[0] = T::one();

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let gout = match self.nodes[idx].value.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                    let n = self.nodes[b].value.shape()[1];
                    if self.nodes[a].requires_grad {
                        let mut da = vec![T::zero(); m * k];
                        kernels::matmul_nt_acc(&gout, self.nodes[b].value.data(), m, n, k, &mut da);
                        kernels::axpy(T::one(), &da, self.nodes[a].value.grad_mut_or_init());
                    }
                    if self.nodes[b].requires_grad {
                        let mut db = vec![T::zero(); k * n];
                        kernels::matmul_tn_acc(self.nodes[a].value.data(), &gout, m, k, n, &mut db);
                        kernels::axpy(T::one(), &db, self.nodes[b].value.grad_mut_or_init());
                    }
                }
                Op::MatmulNt { a, b } => {
                    let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                    let n = self.nodes[b].value.shape()[0];
                    if self.nodes[a].requires_grad {
                        let mut da = vec![T::zero(); m * k];
                        kernels::matmul_acc(&gout, self.nodes[b].value.data(), m, n, k, &mut da);
                        kernels::axpy(T::one(), &da, self.nodes[a].value.grad_mut_or_init());
                    }
                    if self.nodes[b].requires_grad {
                        let mut db = vec![T::zero(); n * k];
                        kernels::matmul_tn_acc(&gout, self.nodes[a].value.data(), m, n, k, &mut db);
                        kernels::axpy(T::one(), &db, self.nodes[b].value.grad_mut_or_init());
                    }
                }
                Op::Add { a, b } => {
                    for &i in &[a, b] {
                        if self.nodes[i].requires_grad {
                            kernels::axpy(T::one(), &gout, self.nodes[i].value.grad_mut_or_init());
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a].requires_grad {
                        let contrib: Vec<T> = gout
                            .iter()
                            .zip(self.nodes[b].value.data())
                            .map(|(&g, &bv)| g * bv)
                            .collect();
                        kernels::axpy(T::one(), &contrib, self.nodes[a].value.grad_mut_or_init());
                    }
                    if self.nodes[b].requires_grad {
                        let contrib: Vec<T> = gout
                            .iter()
                            .zip(self.nodes[a].value.data())
                            .map(|(&g, &av)| g * av)
                            .collect();
                        kernels::axpy(T::one(), &contrib, self.nodes[b].value.grad_mut_or_init());
                    }
                }
                Op::Scale { x, c } => {
                    if self.nodes[x].requires_grad {
                        kernels::axpy(c, &gout, self.nodes[x].value.grad_mut_or_init());
                    }
                }
                Op::Sigmoid { x } => {
                    if self.nodes[x].requires_grad {
                        let contrib: Vec<T> = gout
                            .iter()
                            .zip(self.nodes[idx].value.data())
                            .map(|(&g, &y)| g * y * (T::one() - y))
                            .collect();
                        kernels::axpy(T::one(), &contrib, self.nodes[x].value.grad_mut_or_init());
                    }
                }
                Op::RmsNorm { x, gain, eps } => {
                    let (rows, d) = self.nodes[x].value.rows_over_last_dim()?;
                    let dim = T::from_f64(d as f64);
                    if self.nodes[x].requires_grad {
                        let mut dx = vec![T::zero(); rows * d];
                        for r in 0..rows {
                            let xr = &self.nodes[x].value.data()[r * d..(r + 1) * d];
                            let g = self.nodes[gain].value.data();
                            let gr = &gout[r * d..(r + 1) * d];
                            let inv = (kernels::dot(xr, xr) / dim + eps).sqrt().recip();
                            let inv3 = inv * inv * inv;
                            let mut u = T::zero();
                            for j in 0..d {
                                u = u + gr[j] * g[j] * xr[j];
                            }
                            let dxr = &mut dx[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxr[j] = gr[j] * g[j] * inv - xr[j] * inv3 * u / dim;
                            }
                        }
                        kernels::axpy(T::one(), &dx, self.nodes[x].value.grad_mut_or_init());
                    }
                    if self.nodes[gain].requires_grad {
                        let mut dg = vec![T::zero(); d];
                        for r in 0..rows {
                            let xr = &self.nodes[x].value.data()[r * d..(r + 1) * d];
                            let gr = &gout[r * d..(r + 1) * d];
                            let inv = (kernels::dot(xr, xr) / dim + eps).sqrt().recip();
                            for j in 0..d {
                                dg[j] = dg[j] + gr[j] * xr[j] * inv;
                            }
                        }
                        kernels::axpy(T::one(), &dg, self.nodes[gain].value.grad_mut_or_init());
                    }
                }
                Op::Softmax { x } => {
                    if self.nodes[x].requires_grad {
                        let (rows, d) = self.nodes[idx].value.rows_over_last_dim()?;
                        let mut dx = vec![T::zero(); rows * d];
                        for r in 0..rows {
                            let y = &self.nodes[idx].value.data()[r * d..(r + 1) * d];
                            let gr = &gout[r * d..(r + 1) * d];
                            let dotgy = kernels::dot(gr, y);
                            let dxr = &mut dx[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxr[j] = y[j] * (gr[j] - dotgy);
                            }
                        }
                        kernels::axpy(T::one(), &dx, self.nodes[x].value.grad_mut_or_init());
                    }
                }
                Op::Embedding { table, ids } => {
                    if self.nodes[table].requires_grad {
                        let d = self.nodes[table].value.shape()[1];
                        let dt = self.nodes[table].value.grad_mut_or_init();
                        for (r, &id) in ids.iter().enumerate() {
                            let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                            for (dv, &g) in dst.iter_mut().zip(&gout[r * d..(r + 1) * d]) {
                                *dv = *dv + g;
                            }
                        }
                    }
                }
                Op::RotatePairs { x, thetas, start_pos, conjugate } => {
                    if self.nodes[x].requires_grad {
                        let (rows, d) = self.nodes[idx].value.rows_over_last_dim()?;
                        let mut dx = vec![T::zero(); rows * d];
                        for r in 0..rows {
                            kernels::rotate_pairs(
                                &gout[r * d..(r + 1) * d],
                                start_pos + r,
                                &thetas,
                                !conjugate,
                                &mut dx[r * d..(r + 1) * d],
                            );
                        }
                        kernels::axpy(T::one(), &dx, self.nodes[x].value.grad_mut_or_init());
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = self.nodes[idx].value.shape()[0];
                    let total = self.nodes[idx].value.shape()[1];
                    let mut col = 0;
                    for &p in &parts {
                        let w = self.nodes[p].value.shape()[1];
                        if self.nodes[p].requires_grad {
                            let mut dp = vec![T::zero(); rows * w];
                            for r in 0..rows {
                                dp[r * w..(r + 1) * w]
                                    .copy_from_slice(&gout[r * total + col..r * total + col + w]);
                            }
                            kernels::axpy(T::one(), &dp, self.nodes[p].value.grad_mut_or_init());
                        }
                        col += w;
                    }
                }
                Op::Sum { x } => {
                    if self.nodes[x].requires_grad {
                        let g = gout[0];
                        for dv in self.nodes[x].value.grad_mut_or_init() {
                            *dv = *dv + g;
                        }
                    }
                }
                Op::CrossEntropy { logits, labels, mask } => {
                    if self.nodes[logits].requires_grad {
                        let (rows, vocab) = self.nodes[logits].value.rows_over_last_dim()?;
                        let counted = mask.iter().filter(|&&m| m).count();
                        let scale = gout[0] / T::from_f64(counted as f64);
                        let mut dl = vec![T::zero(); rows * vocab];
                        for r in 0..rows {
                            if !mask[r] {
                                continue;
                            }
                            let row = &self.nodes[logits].value.data()[r * vocab..(r + 1) * vocab];
                            let dst = &mut dl[r * vocab..(r + 1) * vocab];
                            dst.copy_from_slice(row);
                            kernels::softmax_row_in_place(dst);
                            dst[labels[r] as usize] = dst[labels[r] as usize] - T::one();
                            for dv in dst.iter_mut() {
                                *dv = *dv * scale;
                            }
                        }
                        kernels::axpy(T::one(), &dl, self.nodes[logits].value.grad_mut_or_init());
                    }
                }
            }
        }
        Ok(())
    }
}

/// `-log softmax(row)[label]` via the log-sum-exp identity.
fn row_neg_log_prob<T: Scalar>(row: &[T], label: usize) -> T {
    let mut max = row[0];
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    sum.ln() + max - row[label]
}
