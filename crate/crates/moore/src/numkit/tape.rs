//! Define-by-run tape: ops record their backward rule as they execute, and
//! [`Tape::backward`] replays the records in exact reverse order. Nothing is
//! recorded on an inference tape or for subgraphs with no learnable inputs.

use std::cell::RefCell;

use super::kernels;
use super::tensor::Tensor;
use super::Error;

type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

struct Node {
    backward: Box<dyn Fn()>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape for training passes.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A non-recording tape: same ops, forward values only.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, f: impl Fn() + 'static) {
        self.nodes.borrow_mut().push(Node {
            backward: Box::new(f),
        });
    }

    fn track(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    /// Seeds `d loss / d loss = 1` and replays every node in reverse
    /// recording order. Gradients add onto whatever is already stored.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        loss.accumulate_grad(&[1.0]);
        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            (node.backward)();
        }
        Ok(())
    }

    // ---- elementwise binary ----

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let track = self.track(&[a, b]);
        let out = zip_new(a, b, track, |x, y| x + y);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if a.requires_grad() {
                        a.accumulate_grad(g);
                    }
                    if b.requires_grad() {
                        b.accumulate_grad(g);
                    }
                });
            });
        }
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let track = self.track(&[a, b]);
        let out = zip_new(a, b, track, |x, y| x - y);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if a.requires_grad() {
                        a.accumulate_grad(g);
                    }
                    if b.requires_grad() {
                        b.accumulate_grad_with(g.len(), |acc| {
                            for (s, gi) in acc.iter_mut().zip(g) {
                                *s -= gi;
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let track = self.track(&[a, b]);
        let out = zip_new(a, b, track, |x, y| x * y);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if a.requires_grad() {
                        let bd = b.data();
                        a.accumulate_grad_with(g.len(), |acc| {
                            for i in 0..g.len() {
                                acc[i] += g[i] * bd[i];
                            }
                        });
                    }
                    if b.requires_grad() {
                        let ad = a.data();
                        b.accumulate_grad_with(g.len(), |acc| {
                            for i in 0..g.len() {
                                acc[i] += g[i] * ad[i];
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("div", a, b)?;
        let track = self.track(&[a, b]);
        let out = zip_new(a, b, track, |x, y| x / y);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    let bd = b.data();
                    if a.requires_grad() {
                        a.accumulate_grad_with(g.len(), |acc| {
                            for i in 0..g.len() {
                                acc[i] += g[i] / bd[i];
                            }
                        });
                    }
                    if b.requires_grad() {
                        let ad = a.data();
                        b.accumulate_grad_with(g.len(), |acc| {
                            for i in 0..g.len() {
                                acc[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    pub fn minimum(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("minimum", a, b)?;
        let track = self.track(&[a, b]);
        let out = zip_new(a, b, track, f64::min);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    let (ad, bd) = (a.data(), b.data());
                    if a.requires_grad() {
                        a.accumulate_grad_with(g.len(), |acc| {
                            for i in 0..g.len() {
                                if ad[i] <= bd[i] {
                                    acc[i] += g[i];
                                }
                            }
                        });
                    }
                    if b.requires_grad() {
                        b.accumulate_grad_with(g.len(), |acc| {
                            for i in 0..g.len() {
                                if ad[i] > bd[i] {
                                    acc[i] += g[i];
                                }
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    // ---- elementwise unary ----

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        self.map_unary(a, |x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.map_unary(a, move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.map_unary(a, move |x| x * c, move |_, _| c)
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.map_unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        self.map_unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        self.map_unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&self, a: &Tensor) -> Result<Tensor> {
        self.map_unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        self.map_unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    /// Elementwise clamp; gradient passes only where the input was inside
    /// the interval.
    pub fn clamp(&self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        self.map_unary(
            a,
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise activation by kind; `Linear` is the identity.
    pub fn activation(&self, a: &Tensor, kind: Activation) -> Result<Tensor> {
        match kind {
            Activation::Relu => self.relu(a),
            Activation::Tanh => self.tanh(a),
            Activation::Linear => Ok(a.clone()),
        }
    }

    fn map_unary(
        &self,
        a: &Tensor,
        f: impl Fn(f64) -> f64 + 'static,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        let track = self.track(&[a]);
        let out = Tensor::raw(a.shape().to_vec(), data, track);
        if track {
            let (a, o) = (a.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if a.requires_grad() {
                        let (ad, od) = (a.data(), o.data());
                        a.accumulate_grad_with(g.len(), |acc| {
                            for i in 0..g.len() {
                                acc[i] += g[i] * df(ad[i], od[i]);
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    // ---- reductions ----

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        self.reduce(a, 1.0)
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        self.reduce(a, 1.0 / a.numel() as f64)
    }

    fn reduce(&self, a: &Tensor, w: f64) -> Result<Tensor> {
        let s: f64 = a.data().iter().sum::<f64>() * w;
        let track = self.track(&[a]);
        let out = Tensor::raw(Vec::new(), vec![s], track);
        if track {
            let (a, o) = (a.clone(), out.clone());
            let n = a.numel();
            self.push(move || {
                with_grad(&o, |g| {
                    if a.requires_grad() {
                        let gv = g[0] * w;
                        a.accumulate_grad_with(n, |acc| {
                            for s in acc.iter_mut() {
                                *s += gv;
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    // ---- matrix ops ----

    /// a[m,n] * b[n,p] -> [m,p]
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, n) = rank2("matmul", a)?;
        let (n2, p) = rank2("matmul", b)?;
        if n != n2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * p];
        kernels::mm_nn(&a.data(), &b.data(), &mut data, m, n, p, false);
        let track = self.track(&[a, b]);
        let out = Tensor::raw(vec![m, p], data, track);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if a.requires_grad() {
                        let bd = b.data();
                        a.accumulate_grad_with(m * n, |acc| {
                            kernels::mm_nt(g, &bd, acc, m, p, n, true);
                        });
                    }
                    if b.requires_grad() {
                        let ad = a.data();
                        b.accumulate_grad_with(n * p, |acc| {
                            kernels::mm_tn(&ad, g, acc, m, n, p, true);
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    /// a[m,n] * x[n] -> [m]
    pub fn matvec(&self, a: &Tensor, x: &Tensor) -> Result<Tensor> {
        let (m, n) = rank2("matvec", a)?;
        if x.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: a.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m];
        kernels::mm_nn(&a.data(), &x.data(), &mut data, m, n, 1, false);
        let track = self.track(&[a, x]);
        let out = Tensor::raw(vec![m], data, track);
        if track {
            let (a, x, o) = (a.clone(), x.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if a.requires_grad() {
                        let xd = x.data();
                        a.accumulate_grad_with(m * n, |acc| {
                            kernels::mm_nn(g, &xd, acc, m, 1, n, true);
                        });
                    }
                    if x.requires_grad() {
                        let ad = a.data();
                        x.accumulate_grad_with(n, |acc| {
                            kernels::mm_tn(&ad, g, acc, m, n, 1, true);
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    /// Adds a length-n bias row to every row of x[B,n].
    pub fn add_row(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (b, n) = rank2("add_row", x)?;
        if bias.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let xd = x.data();
        let bd = bias.data();
        let mut data = Vec::with_capacity(b * n);
        for r in 0..b {
            for c in 0..n {
                data.push(xd[r * n + c] + bd[c]);
            }
        }
        drop(xd);
        drop(bd);
        let track = self.track(&[x, bias]);
        let out = Tensor::raw(vec![b, n], data, track);
        if track {
            let (x, bias, o) = (x.clone(), bias.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if x.requires_grad() {
                        x.accumulate_grad(g);
                    }
                    if bias.requires_grad() {
                        bias.accumulate_grad_with(n, |acc| {
                            for r in 0..b {
                                for (c, a) in acc.iter_mut().enumerate() {
                                    *a += g[r * n + c];
                                }
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    // ---- rowwise ops over [B, n] ----

    pub fn row_sum(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n) = rank2("row_sum", x)?;
        let xd = x.data();
        let data: Vec<f64> = (0..b).map(|r| xd[r * n..(r + 1) * n].iter().sum()).collect();
        drop(xd);
        let track = self.track(&[x]);
        let out = Tensor::raw(vec![b], data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if x.requires_grad() {
                        x.accumulate_grad_with(b * n, |acc| {
                            for r in 0..b {
                                for c in 0..n {
                                    acc[r * n + c] += g[r];
                                }
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    /// Per-row inner product of two [B,n] tensors -> [B].
    pub fn row_dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("row_dot", a, b)?;
        let (rows, n) = rank2("row_dot", a)?;
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = (0..rows)
            .map(|r| {
                ad[r * n..(r + 1) * n]
                    .iter()
                    .zip(&bd[r * n..(r + 1) * n])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        drop(ad);
        drop(bd);
        let track = self.track(&[a, b]);
        let out = Tensor::raw(vec![rows], data, track);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if a.requires_grad() {
                        let bd = b.data();
                        a.accumulate_grad_with(rows * n, |acc| {
                            for r in 0..rows {
                                for c in 0..n {
                                    acc[r * n + c] += g[r] * bd[r * n + c];
                                }
                            }
                        });
                    }
                    if b.requires_grad() {
                        let ad = a.data();
                        b.accumulate_grad_with(rows * n, |acc| {
                            for r in 0..rows {
                                for c in 0..n {
                                    acc[r * n + c] += g[r] * ad[r * n + c];
                                }
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    /// Scales row r of x[B,n] by s[r].
    pub fn row_scale(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (rows, n) = rank2("row_scale", x)?;
        if s.shape() != [rows] {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                lhs: x.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let (xd, sd) = (x.data(), s.data());
        let mut data = Vec::with_capacity(rows * n);
        for r in 0..rows {
            for c in 0..n {
                data.push(xd[r * n + c] * sd[r]);
            }
        }
        drop(xd);
        drop(sd);
        let track = self.track(&[x, s]);
        let out = Tensor::raw(vec![rows, n], data, track);
        if track {
            let (x, s, o) = (x.clone(), s.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if x.requires_grad() {
                        let sd = s.data();
                        x.accumulate_grad_with(rows * n, |acc| {
                            for r in 0..rows {
                                for c in 0..n {
                                    acc[r * n + c] += g[r * n + c] * sd[r];
                                }
                            }
                        });
                    }
                    if s.requires_grad() {
                        let xd = x.data();
                        s.accumulate_grad_with(rows, |acc| {
                            for r in 0..rows {
                                let mut t = 0.0;
                                for c in 0..n {
                                    t += g[r * n + c] * xd[r * n + c];
                                }
                                acc[r] += t;
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    /// Divides row r of x[B,n] by s[r].
    pub fn row_div(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (rows, n) = rank2("row_div", x)?;
        if s.shape() != [rows] {
            return Err(Error::ShapeMismatch {
                op: "row_div",
                lhs: x.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let (xd, sd) = (x.data(), s.data());
        let mut data = Vec::with_capacity(rows * n);
        for r in 0..rows {
            for c in 0..n {
                data.push(xd[r * n + c] / sd[r]);
            }
        }
        drop(xd);
        drop(sd);
        let track = self.track(&[x, s]);
        let out = Tensor::raw(vec![rows, n], data, track);
        if track {
            let (x, s, o) = (x.clone(), s.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    let sd = s.data();
                    if x.requires_grad() {
                        x.accumulate_grad_with(rows * n, |acc| {
                            for r in 0..rows {
                                for c in 0..n {
                                    acc[r * n + c] += g[r * n + c] / sd[r];
                                }
                            }
                        });
                    }
                    if s.requires_grad() {
                        let xd = x.data();
                        s.accumulate_grad_with(rows, |acc| {
                            for r in 0..rows {
                                let inv2 = 1.0 / (sd[r] * sd[r]);
                                let mut t = 0.0;
                                for c in 0..n {
                                    t -= g[r * n + c] * xd[r * n + c] * inv2;
                                }
                                acc[r] += t;
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    // ---- structural ops ----

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let track = self.track(&[x]);
        let out = Tensor::raw(shape.to_vec(), x.to_vec(), track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if x.requires_grad() {
                        x.accumulate_grad(g);
                    }
                });
            });
        }
        Ok(out)
    }

    /// [B,n1] ++ [B,n2] -> [B, n1+n2], rowwise.
    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (rows, n1) = rank2("concat_cols", a)?;
        let (rows2, n2) = rank2("concat_cols", b)?;
        if rows != rows2 {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (ad, bd) = (a.data(), b.data());
        let mut data = Vec::with_capacity(rows * (n1 + n2));
        for r in 0..rows {
            data.extend_from_slice(&ad[r * n1..(r + 1) * n1]);
            data.extend_from_slice(&bd[r * n2..(r + 1) * n2]);
        }
        drop(ad);
        drop(bd);
        let track = self.track(&[a, b]);
        let out = Tensor::raw(vec![rows, n1 + n2], data, track);
        if track {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    let w = n1 + n2;
                    if a.requires_grad() {
                        a.accumulate_grad_with(rows * n1, |acc| {
                            for r in 0..rows {
                                for c in 0..n1 {
                                    acc[r * n1 + c] += g[r * w + c];
                                }
                            }
                        });
                    }
                    if b.requires_grad() {
                        b.accumulate_grad_with(rows * n2, |acc| {
                            for r in 0..rows {
                                for c in 0..n2 {
                                    acc[r * n2 + c] += g[r * w + n1 + c];
                                }
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    /// Vertically stacks [B_i, n] parts.
    pub fn concat_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, n) = rank2("concat_rows", &parts[0])?;
        let mut total = 0usize;
        for p in parts {
            let (b, np) = rank2("concat_rows", p)?;
            if np != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total += b;
        }
        let mut data = Vec::with_capacity(total * n);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let track = self.recording && parts.iter().any(|t| t.requires_grad());
        let out = Tensor::raw(vec![total, n], data, track);
        if track {
            let parts: Vec<Tensor> = parts.to_vec();
            let o = out.clone();
            self.push(move || {
                with_grad(&o, |g| {
                    let mut off = 0usize;
                    for p in &parts {
                        let len = p.numel();
                        if p.requires_grad() {
                            p.accumulate_grad(&g[off..off + len]);
                        }
                        off += len;
                    }
                });
            });
        }
        Ok(out)
    }

    /// Gathers rows of x[B,n] at `idx` -> [idx.len(), n]; backward scatters.
    pub fn select_rows(&self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (rows, n) = rank2("select_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "select_rows index {bad} out of range for {rows} rows"
            )));
        }
        let xd = x.data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&xd[i * n..(i + 1) * n]);
        }
        drop(xd);
        let track = self.track(&[x]);
        let out = Tensor::raw(vec![idx.len(), n], data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            let idx = idx.to_vec();
            self.push(move || {
                with_grad(&o, |g| {
                    if x.requires_grad() {
                        x.accumulate_grad_with(rows * n, |acc| {
                            for (r, &i) in idx.iter().enumerate() {
                                for c in 0..n {
                                    acc[i * n + c] += g[r * n + c];
                                }
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    /// Column j of x[B,k] -> [B].
    pub fn select_col(&self, x: &Tensor, j: usize) -> Result<Tensor> {
        let (rows, k) = rank2("select_col", x)?;
        if j >= k {
            return Err(Error::Contract(format!(
                "select_col index {j} out of range for {k} columns"
            )));
        }
        let xd = x.data();
        let data: Vec<f64> = (0..rows).map(|r| xd[r * k + j]).collect();
        drop(xd);
        let track = self.track(&[x]);
        let out = Tensor::raw(vec![rows], data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if x.requires_grad() {
                        x.accumulate_grad_with(rows * k, |acc| {
                            for (r, gi) in g.iter().enumerate() {
                                acc[r * k + j] += gi;
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    /// Picks x[r, idx[r]] per row -> [B].
    pub fn take_per_row(&self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (rows, n) = rank2("take_per_row", x)?;
        if idx.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "take_per_row",
                lhs: x.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "take_per_row index {bad} out of range for {n} columns"
            )));
        }
        let xd = x.data();
        let data: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| xd[r * n + i]).collect();
        drop(xd);
        let track = self.track(&[x]);
        let out = Tensor::raw(vec![rows], data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            let idx = idx.to_vec();
            self.push(move || {
                with_grad(&o, |g| {
                    if x.requires_grad() {
                        x.accumulate_grad_with(rows * n, |acc| {
                            for (r, &i) in idx.iter().enumerate() {
                                acc[r * n + i] += g[r];
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    /// Rowwise log-softmax of [B,n], max-shifted for stability.
    pub fn log_softmax(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, n) = rank2("log_softmax", x)?;
        let xd = x.data();
        let mut data = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        drop(xd);
        let track = self.track(&[x]);
        let out = Tensor::raw(vec![rows, n], data, track);
        if track {
            let (x, o) = (x.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    if x.requires_grad() {
                        let od = o.data();
                        x.accumulate_grad_with(rows * n, |acc| {
                            for r in 0..rows {
                                let gsum: f64 = g[r * n..(r + 1) * n].iter().sum();
                                for c in 0..n {
                                    let i = r * n + c;
                                    acc[i] += g[i] - od[i].exp() * gsum;
                                }
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }

    /// Valid (no padding) 2-D convolution. Accepts x as [cin,h,w] or
    /// [B,cin,h,w]; kernels are [cout,cin,kh,kw].
    pub fn conv2d(&self, x: &Tensor, kernels_t: &Tensor, stride: usize) -> Result<Tensor> {
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let ks = kernels_t.shape().to_vec();
        if ks.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: ks,
            });
        }
        let (cout, cin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let batched = x.shape().len() == 4;
        let xs = x.shape().to_vec();
        let (bsz, xcin, h, w) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: xs,
                    rhs: ks,
                })
            }
        };
        if xcin != cin || kh > h || kw > w {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: kernels_t.shape().to_vec(),
            });
        }
        let oh = kernels::conv_out_extent(h, kh, stride);
        let ow = kernels::conv_out_extent(w, kw, stride);
        let ckk = cin * kh * kw;
        let patches = oh * ow;

        // im2col over the whole batch, then one matmul against the kernels.
        let xd = x.data();
        let mut cols = vec![0.0; bsz * patches * ckk];
        for s in 0..bsz {
            kernels::im2col(
                &xd[s * cin * h * w..(s + 1) * cin * h * w],
                &mut cols[s * patches * ckk..(s + 1) * patches * ckk],
                cin,
                h,
                w,
                kh,
                kw,
                stride,
            );
        }
        drop(xd);
        let kd = kernels_t.data();
        let mut rows_out = vec![0.0; bsz * patches * cout];
        kernels::mm_nt(&cols, &kd, &mut rows_out, bsz * patches, ckk, cout, false);
        drop(kd);

        // rows_out is [b*oh*ow, cout]; transpose per sample to [cout, oh*ow].
        let mut data = vec![0.0; bsz * cout * patches];
        for s in 0..bsz {
            for p in 0..patches {
                for c in 0..cout {
                    data[s * cout * patches + c * patches + p] =
                        rows_out[(s * patches + p) * cout + c];
                }
            }
        }
        let out_shape = if batched {
            vec![bsz, cout, oh, ow]
        } else {
            vec![cout, oh, ow]
        };
        let track = self.track(&[x, kernels_t]);
        let out = Tensor::raw(out_shape, data, track);
        if track {
            let (x, kt, o) = (x.clone(), kernels_t.clone(), out.clone());
            self.push(move || {
                with_grad(&o, |g| {
                    // g back to [b*patches, cout] layout
                    let mut g_rows = vec![0.0; bsz * patches * cout];
                    for s in 0..bsz {
                        for c in 0..cout {
                            for p in 0..patches {
                                g_rows[(s * patches + p) * cout + c] =
                                    g[s * cout * patches + c * patches + p];
                            }
                        }
                    }
                    if kt.requires_grad() {
                        kt.accumulate_grad_with(cout * ckk, |acc| {
                            kernels::mm_tn(&g_rows, &cols, acc, bsz * patches, cout, ckk, true);
                        });
                    }
                    if x.requires_grad() {
                        let kd = kt.data();
                        let mut dcols = vec![0.0; bsz * patches * ckk];
                        kernels::mm_nn(&g_rows, &kd, &mut dcols, bsz * patches, cout, ckk, false);
                        drop(kd);
                        x.accumulate_grad_with(bsz * cin * h * w, |acc| {
                            for s in 0..bsz {
                                kernels::col2im_acc(
                                    &dcols[s * patches * ckk..(s + 1) * patches * ckk],
                                    &mut acc[s * cin * h * w..(s + 1) * cin * h * w],
                                    cin,
                                    h,
                                    w,
                                    kh,
                                    kw,
                                    stride,
                                );
                            }
                        });
                    }
                });
            });
        }
        Ok(out)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

fn zip_new(a: &Tensor, b: &Tensor, track: bool, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::raw(a.shape().to_vec(), data, track)
}

fn with_grad(out: &Tensor, f: impl FnOnce(&[f64])) {
    let gref = out.grad_ref();
    if let Some(g) = gref.as_ref() {
        f(g);
    }
}
