//! Batched reverse-mode tape for the fixed filter-bank graph.
//!
//! Every recorded primitive operates on a whole batch (rows are batch items)
//! and stores exactly what its hand-written backward rule needs. Parameter
//! gradients are accumulated into one flat vector indexed like
//! [`ModelParams`].

use crate::error::{config_err, input_err, NffbError, Result};
use crate::fourier;
use crate::grid::{CornerSet, GridLevel};
use crate::params::{ModelParams, ParamId};
use crate::real::{axpy, dot, Matrix, Real};

// Output widths at or below this use direct loops instead of blocked GEMM.
const NARROW: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Affine,
    SineAffine,
    Sine,
    Relu,
    Interpolate,
    Fourier,
    FourierAdd,
    Add,
    Sum,
    Concat,
    Loss,
}

enum Node<T> {
    Affine {
        input: ValueId,
        output: ValueId,
        weight: ParamId,
        bias: Option<ParamId>,
        scale: T,
    },
    SineAffine {
        input: ValueId,
        output: ValueId,
        weight: ParamId,
        bias: Option<ParamId>,
        scale: T,
        // cos(scale * x W^T + b)
        deriv: Vec<T>,
    },
    Sine {
        input: ValueId,
        output: ValueId,
        // alpha * cos(alpha * z)
        deriv: Vec<T>,
    },
    Relu {
        input: ValueId,
        output: ValueId,
    },
    Interpolate {
        output: ValueId,
        table: ParamId,
        corners: CornerSet<T>,
    },
    Fourier {
        input: ValueId,
        output: ValueId,
        freq: ParamId,
        // cos(phase)
        cos: Vec<T>,
    },
    FourierAdd {
        base: ValueId,
        input: ValueId,
        output: ValueId,
        freq: ParamId,
        cos: Vec<T>,
    },
    Add {
        lhs: ValueId,
        rhs: ValueId,
        output: ValueId,
    },
    Sum {
        inputs: Vec<ValueId>,
        output: ValueId,
    },
    Concat {
        inputs: Vec<ValueId>,
        output: ValueId,
    },
    Loss {
        input: ValueId,
        // d loss / d input
        grad: Matrix<T>,
    },
}

impl<T> Node<T> {
    fn kind(&self) -> NodeKind {
        match self {
            Node::Affine { .. } => NodeKind::Affine,
            Node::SineAffine { .. } => NodeKind::SineAffine,
            Node::Sine { .. } => NodeKind::Sine,
            Node::Relu { .. } => NodeKind::Relu,
            Node::Interpolate { .. } => NodeKind::Interpolate,
            Node::Fourier { .. } => NodeKind::Fourier,
            Node::FourierAdd { .. } => NodeKind::FourierAdd,
            Node::Add { .. } => NodeKind::Add,
            Node::Sum { .. } => NodeKind::Sum,
            Node::Concat { .. } => NodeKind::Concat,
            Node::Loss { .. } => NodeKind::Loss,
        }
    }
}

pub struct Tape<'p, T: Real> {
    params: &'p ModelParams<T>,
    values: Vec<Matrix<T>>,
    // true for values registered through `input`; no gradient flows to them
    constant: Vec<bool>,
    nodes: Vec<Node<T>>,
    trace: Vec<usize>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ModelParams<T>) -> Self {
        Self {
            params,
            values: Vec::new(),
            constant: Vec::new(),
            nodes: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    pub fn value(&self, id: ValueId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn take_value(&mut self, id: ValueId) -> Matrix<T> {
        std::mem::replace(&mut self.values[id.0], Matrix::zeros(0, 0))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_kinds(&self) -> Vec<NodeKind> {
        self.nodes.iter().map(Node::kind).collect()
    }

    /// Node indices visited by the most recent backward pass, in visit order.
    pub fn last_backward_trace(&self) -> &[usize] {
        &self.trace
    }

    fn push_value(&mut self, m: Matrix<T>) -> ValueId {
        self.values.push(m);
        self.constant.push(false);
        ValueId(self.values.len() - 1)
    }

    /// Registers a constant (non-differentiated) input batch.
    pub fn input(&mut self, m: Matrix<T>) -> ValueId {
        let id = self.push_value(m);
        self.constant[id.0] = true;
        id
    }

    /// `scale * (x W^T) + b` per row, with `W` stored `out x in`.
    pub fn affine(&mut self, input: ValueId, weight: ParamId, bias: Option<ParamId>, scale: T) -> Result<ValueId> {
        let out = self.affine_forward(input, weight, bias, scale)?;
        let output = self.push_value(out);
        self.nodes.push(Node::Affine {
            input,
            output,
            weight,
            bias,
            scale,
        });
        Ok(output)
    }

    /// `sin(scale * (x W^T) + b)` recorded as one node.
    pub fn sine_affine(&mut self, input: ValueId, weight: ParamId, bias: Option<ParamId>, scale: T) -> Result<ValueId> {
        let mut out = self.affine_forward(input, weight, bias, scale)?;
        let mut deriv = vec![T::zero(); out.data.len()];
        T::sin_cos_in_place(&mut out.data, &mut deriv);
        let output = self.push_value(out);
        self.nodes.push(Node::SineAffine {
            input,
            output,
            weight,
            bias,
            scale,
            deriv,
        });
        Ok(output)
    }

    fn affine_forward(&self, input: ValueId, weight: ParamId, bias: Option<ParamId>, scale: T) -> Result<Matrix<T>> {
        let x = &self.values[input.0];
        let wb = self.params.block(weight);
        if wb.cols != x.cols {
            return config_err(format!(
                "affine '{}' expects {} inputs, got {}",
                wb.name, wb.cols, x.cols
            ));
        }
        let (n_out, n_in, batch) = (wb.rows, wb.cols, x.rows);
        if let Some(b) = bias {
            let bb = self.params.block(b);
            if bb.len() != n_out {
                return config_err(format!("bias '{}' has {} entries, expected {}", bb.name, bb.len(), n_out));
            }
        }
        let w = self.params.values(weight);
        let mut out = Matrix::zeros(batch, n_out);
        if let Some(b) = bias {
            let bv = self.params.values(b);
            for r in 0..batch {
                out.row_mut(r).copy_from_slice(bv);
            }
        }
        if batch == 0 || n_out == 0 {
            return Ok(out);
        }
        if n_out <= NARROW {
            for r in 0..batch {
                let xr = x.row(r);
                for (o, wo) in out.row_mut(r).iter_mut().zip(w.chunks_exact(n_in)) {
                    *o += scale * dot(xr, wo);
                }
            }
        } else {
            unsafe {
                T::gemm(
                    batch,
                    n_in,
                    n_out,
                    scale,
                    x.data.as_ptr(),
                    n_in as isize,
                    1,
                    w.as_ptr(),
                    1,
                    n_in as isize,
                    T::one(),
                    out.data.as_mut_ptr(),
                    n_out as isize,
                    1,
                );
            }
        }
        Ok(out)
    }

    /// Elementwise `sin(alpha * z)`.
    pub fn sine(&mut self, input: ValueId, alpha: T) -> ValueId {
        let z = &self.values[input.0];
        let mut out = Matrix::zeros(z.rows, z.cols);
        let mut deriv = vec![T::zero(); z.data.len()];
        if alpha == T::one() {
            T::sin_cos_slice(&z.data, &mut out.data, &mut deriv);
        } else {
            let scaled: Vec<T> = z.data.iter().map(|&v| alpha * v).collect();
            T::sin_cos_slice(&scaled, &mut out.data, &mut deriv);
            deriv.iter_mut().for_each(|d| *d *= alpha);
        }
        let output = self.push_value(out);
        self.nodes.push(Node::Sine { input, output, deriv });
        output
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let z = &self.values[input.0];
        let out = Matrix::from_vec(z.rows, z.cols, z.data.iter().map(|&v| v.max(T::zero())).collect());
        let output = self.push_value(out);
        self.nodes.push(Node::Relu { input, output });
        output
    }

    /// Grid feature lookup of the (constant) points in `input`.
    pub fn interpolate(&mut self, input: ValueId, level: &GridLevel, table: ParamId) -> Result<ValueId> {
        let tb = self.params.block(table);
        if tb.rows != level.rows || tb.cols != level.features() {
            return config_err(format!(
                "table '{}' is {}x{}, level needs {}x{}",
                tb.name,
                tb.rows,
                tb.cols,
                level.rows,
                level.features()
            ));
        }
        let corners = level.gather(&self.values[input.0])?;
        let out = corners.interpolate(self.params.values(table), level.features());
        let output = self.push_value(out);
        self.nodes.push(Node::Interpolate { output, table, corners });
        Ok(output)
    }

    /// `sin(2*pi * v B^T)` with trainable `B` (`width x features`).
    pub fn fourier(&mut self, input: ValueId, freq: ParamId) -> Result<ValueId> {
        let (out, cos) = self.fourier_forward(input, freq, None)?;
        let output = self.push_value(out);
        self.nodes.push(Node::Fourier {
            input,
            output,
            freq,
            cos,
        });
        Ok(output)
    }

    /// `base + sin(2*pi * v B^T)` recorded as one node.
    pub fn fourier_add(&mut self, base: ValueId, input: ValueId, freq: ParamId) -> Result<ValueId> {
        let b = &self.values[base.0];
        let fb = self.params.block(freq);
        if b.rows != self.values[input.0].rows || b.cols != fb.rows {
            return config_err("fourier_add: shape mismatch");
        }
        let (out, cos) = self.fourier_forward(input, freq, Some(base))?;
        let output = self.push_value(out);
        self.nodes.push(Node::FourierAdd {
            base,
            input,
            output,
            freq,
            cos,
        });
        Ok(output)
    }

    fn fourier_forward(&self, input: ValueId, freq: ParamId, base: Option<ValueId>) -> Result<(Matrix<T>, Vec<T>)> {
        let v = &self.values[input.0];
        let fb = self.params.block(freq);
        if fb.cols != v.cols {
            return config_err(format!("frequencies '{}' expect {} features, got {}", fb.name, fb.cols, v.cols));
        }
        let base = base.map(|id| &self.values[id.0]);
        Ok(fourier::encode_batch(v, self.params.values(freq), fb.rows, base))
    }

    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId> {
        let (a, b) = (&self.values[lhs.0], &self.values[rhs.0]);
        if a.rows != b.rows || a.cols != b.cols {
            return config_err("add: shape mismatch");
        }
        let out = Matrix::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect());
        let output = self.push_value(out);
        self.nodes.push(Node::Add { lhs, rhs, output });
        Ok(output)
    }

    /// Left-to-right elementwise sum.
    pub fn sum(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        let first = match inputs.first() {
            Some(id) => self.values[id.0].clone(),
            None => return config_err("sum of zero values"),
        };
        let mut acc = first;
        for id in &inputs[1..] {
            let v = &self.values[id.0];
            if v.rows != acc.rows || v.cols != acc.cols {
                return config_err("sum: shape mismatch");
            }
            for (a, &b) in acc.data.iter_mut().zip(&v.data) {
                *a += b;
            }
        }
        let output = self.push_value(acc);
        self.nodes.push(Node::Sum {
            inputs: inputs.to_vec(),
            output,
        });
        Ok(output)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return config_err("concat of zero values");
        }
        let rows = self.values[inputs[0].0].rows;
        if inputs.iter().any(|id| self.values[id.0].rows != rows) {
            return config_err("concat: row mismatch");
        }
        let cols: usize = inputs.iter().map(|id| self.values[id.0].cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for id in inputs {
                let src = self.values[id.0].row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let output = self.push_value(out);
        self.nodes.push(Node::Concat {
            inputs: inputs.to_vec(),
            output,
        });
        Ok(output)
    }

    /// Mean over the batch of the squared L2 distance per row.
    pub fn mse_loss(&mut self, pred: ValueId, target: &Matrix<T>) -> Result<T> {
        let y = &self.values[pred.0];
        if y.rows == 0 {
            return input_err("loss over an empty batch");
        }
        if y.rows != target.rows || y.cols != target.cols {
            return config_err("loss: prediction and target shapes differ");
        }
        let n = T::of(y.rows as f64);
        let two = T::of(2.0);
        let mut total = T::zero();
        let mut grad = Matrix::zeros(y.rows, y.cols);
        for r in 0..y.rows {
            let mut row_sum = T::zero();
            for ((g, &p), &t) in grad.row_mut(r).iter_mut().zip(y.row(r)).zip(target.row(r)) {
                let d = p - t;
                row_sum += d * d;
                *g = two * d / n;
            }
            total += row_sum;
        }
        self.nodes.push(Node::Loss { input: pred, grad });
        Ok(total / n)
    }

    /// Mean over the batch of `(y - y_gt)^2 / (eps + y_gt^2)` (squared L2 norms per row).
    pub fn mape_sq_loss(&mut self, pred: ValueId, target: &Matrix<T>, eps: T) -> Result<T> {
        if !(eps > T::zero()) {
            return config_err(format!("MAPE epsilon must be positive, got {eps}"));
        }
        let y = &self.values[pred.0];
        if y.rows == 0 {
            return input_err("loss over an empty batch");
        }
        if y.rows != target.rows || y.cols != target.cols {
            return config_err("loss: prediction and target shapes differ");
        }
        let n = T::of(y.rows as f64);
        let two = T::of(2.0);
        let mut total = T::zero();
        let mut grad = Matrix::zeros(y.rows, y.cols);
        for r in 0..y.rows {
            let t = target.row(r);
            let denom = eps + t.iter().map(|&v| v * v).sum::<T>();
            let mut num = T::zero();
            for ((g, &p), &tv) in grad.row_mut(r).iter_mut().zip(y.row(r)).zip(t) {
                let d = p - tv;
                num += d * d;
                *g = two * d / (denom * n);
            }
            total += num / denom;
        }
        self.nodes.push(Node::Loss { input: pred, grad });
        Ok(total / n)
    }

    /// Propagates `loss_grad` times the recorded loss back to every parameter.
    ///
    /// Returns a zero-initialized flat gradient vector filled by the pass.
    /// Nodes are visited in exact reverse recording order; the tape is
    /// cleared afterward.
    pub fn backward(&mut self, loss_grad: T) -> Result<Vec<T>> {
        if !self.nodes.iter().any(|n| matches!(n, Node::Loss { .. })) {
            return Err(NffbError::State("backward called without a recorded loss".into()));
        }
        let mut grads = vec![T::zero(); self.params.len()];
        let mut vgrad: Vec<Option<Matrix<T>>> = (0..self.values.len()).map(|_| None).collect();
        self.trace.clear();
        let nodes = std::mem::take(&mut self.nodes);
        for (idx, node) in nodes.into_iter().enumerate().rev() {
            self.trace.push(idx);
            self.backward_node(node, loss_grad, &mut vgrad, &mut grads);
        }
        self.values.clear();
        self.constant.clear();
        Ok(grads)
    }

    fn backward_node(&self, node: Node<T>, loss_grad: T, vgrad: &mut [Option<Matrix<T>>], grads: &mut [T]) {
        match node {
            Node::Loss { input, mut grad } => {
                if loss_grad != T::one() {
                    grad.data.iter_mut().for_each(|g| *g *= loss_grad);
                }
                accumulate(vgrad, input, grad);
            }
            Node::Affine {
                input,
                output,
                weight,
                bias,
                scale,
            } => {
                let Some(up) = vgrad[output.0].take() else { return };
                self.affine_backward(input, weight, bias, scale, up, vgrad, grads);
            }
            Node::SineAffine {
                input,
                output,
                weight,
                bias,
                scale,
                deriv,
            } => {
                let Some(mut up) = vgrad[output.0].take() else { return };
                for (u, &d) in up.data.iter_mut().zip(&deriv) {
                    *u *= d;
                }
                self.affine_backward(input, weight, bias, scale, up, vgrad, grads);
            }
            Node::Sine { input, output, deriv } => {
                let Some(mut up) = vgrad[output.0].take() else { return };
                for (u, &d) in up.data.iter_mut().zip(&deriv) {
                    *u *= d;
                }
                accumulate(vgrad, input, up);
            }
            Node::Relu { input, output } => {
                let Some(mut up) = vgrad[output.0].take() else { return };
                for (u, &z) in up.data.iter_mut().zip(&self.values[input.0].data) {
                    if z <= T::zero() {
                        *u = T::zero();
                    }
                }
                accumulate(vgrad, input, up);
            }
            Node::Interpolate { output, table, corners } => {
                let Some(up) = vgrad[output.0].take() else { return };
                corners.scatter(&up, &mut grads[self.params.block(table).range()]);
            }
            Node::Fourier {
                input,
                output,
                freq,
                cos,
            } => {
                let Some(up) = vgrad[output.0].take() else { return };
                self.fourier_backward(input, freq, &cos, &up, vgrad, grads);
            }
            Node::FourierAdd {
                base,
                input,
                output,
                freq,
                cos,
            } => {
                let Some(up) = vgrad[output.0].take() else { return };
                self.fourier_backward(input, freq, &cos, &up, vgrad, grads);
                accumulate(vgrad, base, up);
            }
            Node::Add { lhs, rhs, output } => {
                let Some(up) = vgrad[output.0].take() else { return };
                accumulate(vgrad, lhs, up.clone());
                accumulate(vgrad, rhs, up);
            }
            Node::Sum { inputs, output } => {
                let Some(up) = vgrad[output.0].take() else { return };
                for id in inputs {
                    accumulate(vgrad, id, up.clone());
                }
            }
            Node::Concat { inputs, output } => {
                let Some(up) = vgrad[output.0].take() else { return };
                let mut c0 = 0;
                for id in inputs {
                    let cols = self.values[id.0].cols;
                    let mut part = Matrix::zeros(up.rows, cols);
                    for r in 0..up.rows {
                        part.row_mut(r).copy_from_slice(&up.row(r)[c0..c0 + cols]);
                    }
                    c0 += cols;
                    accumulate(vgrad, id, part);
                }
            }
        }
    }

    fn fourier_backward(
        &self,
        input: ValueId,
        freq: ParamId,
        cos: &[T],
        up: &Matrix<T>,
        vgrad: &mut [Option<Matrix<T>>],
        grads: &mut [T],
    ) {
        let v = &self.values[input.0];
        let mut dv = Matrix::zeros(v.rows, v.cols);
        let fb = self.params.block(freq);
        fourier::backward_batch(v, self.params.values(freq), cos, up, &mut dv, &mut grads[fb.range()]);
        accumulate(vgrad, input, dv);
    }

    #[allow(clippy::too_many_arguments)]
    fn affine_backward(
        &self,
        input: ValueId,
        weight: ParamId,
        bias: Option<ParamId>,
        scale: T,
        up: Matrix<T>,
        vgrad: &mut [Option<Matrix<T>>],
        grads: &mut [T],
    ) {
        let x = &self.values[input.0];
        let wb = self.params.block(weight);
        let (n_out, n_in, batch) = (wb.rows, wb.cols, x.rows);
        if let Some(b) = bias {
            let gb = &mut grads[self.params.block(b).range()];
            for r in 0..batch {
                for (g, &u) in gb.iter_mut().zip(up.row(r)) {
                    *g += u;
                }
            }
        }
        if batch == 0 {
            return;
        }
        let w = self.params.values(weight);
        let gw = &mut grads[wb.range()];
        let wants_dx = !self.constant[input.0];
        // dx accumulates directly into any gradient already routed to `input`
        let (mut dx, beta) = match vgrad[input.0].take() {
            Some(acc) => (acc, T::one()),
            None => (Matrix::zeros(batch, n_in), T::zero()),
        };
        if n_out <= NARROW {
            for r in 0..batch {
                let xr = x.row(r);
                for (o, &u) in up.row(r).iter().enumerate() {
                    axpy(scale * u, xr, &mut gw[o * n_in..(o + 1) * n_in]);
                }
            }
            if wants_dx {
                for r in 0..batch {
                    let dxr = dx.row_mut(r);
                    for (o, &u) in up.row(r).iter().enumerate() {
                        axpy(scale * u, &w[o * n_in..(o + 1) * n_in], dxr);
                    }
                }
            }
        } else {
            unsafe {
                // dW += scale * up^T x
                T::gemm(
                    n_out,
                    batch,
                    n_in,
                    scale,
                    up.data.as_ptr(),
                    1,
                    n_out as isize,
                    x.data.as_ptr(),
                    n_in as isize,
                    1,
                    T::one(),
                    gw.as_mut_ptr(),
                    n_in as isize,
                    1,
                );
                // dx = scale * up W
                if wants_dx {
                    T::gemm(
                        batch,
                        n_out,
                        n_in,
                        scale,
                        up.data.as_ptr(),
                        n_out as isize,
                        1,
                        w.as_ptr(),
                        n_in as isize,
                        1,
                        beta,
                        dx.data.as_mut_ptr(),
                        n_in as isize,
                        1,
                    );
                }
            }
        }
        if wants_dx {
            vgrad[input.0] = Some(dx);
        }
    }
}

fn accumulate<T: Real>(vgrad: &mut [Option<Matrix<T>>], id: ValueId, g: Matrix<T>) {
    match &mut vgrad[id.0] {
        Some(acc) => {
            for (a, &b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
