//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Parameters are
//! registered by name so that a forward pass that touches the same parameter
//! twice (support and query through one encoder) shares a single leaf.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::params::Params;

pub type Tensor = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Slice(Var, usize, usize, usize),
    Conv2d {
        input: Var,
        weight: Var,
        cols: Array2<f64>,
        geom: ConvGeom,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Input(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Sum `grad` down to `shape` (reverse of broadcasting).
fn unbroadcast(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("tensor is not two-dimensional")
}

fn binary<F: Fn(f64, f64) -> f64>(a: &Tensor, b: &Tensor, f: F) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast checked");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast checked");
    let mut out = Tensor::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    Ok(out)
}

fn im2col(exec: Exec, x: &Tensor, g: &ConvGeom) -> Array2<f64> {
    let rows = g.in_c * g.k * g.k;
    let n = g.out_h * g.out_w;
    let mut data = vec![0.0; rows * n];
    let xs = x.as_slice().expect("contiguous conv input");
    exec::for_each_chunk_mut(exec, &mut data, n, |r, row| {
        let c = r / (g.k * g.k);
        let ki = (r / g.k) % g.k;
        let kj = r % g.k;
        let plane = &xs[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for oy in 0..g.out_h {
            let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
            if iy < 0 || iy >= g.in_h as isize {
                continue;
            }
            let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
            let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
            for (ox, d) in dst.iter_mut().enumerate() {
                let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                if ix >= 0 && ix < g.in_w as isize {
                    *d = src[ix as usize];
                }
            }
        }
    });
    Array2::from_shape_vec((rows, n), data).expect("im2col shape")
}

fn col2im(exec: Exec, cols: &Array2<f64>, g: &ConvGeom) -> Tensor {
    let plane_len = g.in_h * g.in_w;
    let mut data = vec![0.0; g.in_c * plane_len];
    let cs = cols.as_standard_layout();
    let n = g.out_h * g.out_w;
    let cs = cs.as_slice().expect("contiguous cols");
    // one chunk per input channel: every write for channel c comes from rows
    // c*k*k..(c+1)*k*k, so channels are independent
    exec::for_each_chunk_mut(exec, &mut data, plane_len, |c, plane| {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let row = &cs[r * n..(r + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    });
    Tensor::from_shape_vec(IxDyn(&[g.in_c, g.in_h, g.in_w]), data).expect("col2im shape")
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &Params, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.input(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary(self.value(a), self.value(b), |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).mapv(|x| x * k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    /// `a + k` elementwise.
    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).mapv(|x| x + k);
        let rg = self.rg(a);
        self.push(out, Op::Shift(a), rg)
    }

    /// `k - a` elementwise.
    pub fn rsub(&mut self, k: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.shift(neg, k)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Input(format!(
                "matmul shapes {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = as2(av).dot(&as2(bv)).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 {
            return Err(Error::Input(format!("transpose of shape {:?}", av.shape())));
        }
        let out = as2(av).t().as_standard_layout().into_owned().into_dyn();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let out = av
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::Input(format!("reshape {:?} -> {shape:?}: {e}", av.shape())))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Sum of all elements, as a 0-dimensional tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with length one.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.ndim() {
            return Err(Error::Input(format!("axis {axis} out of range")));
        }
        let out = av.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumAxis(a), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(out, Op::Sqrt(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    /// Softmax along the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 {
            return Err(Error::Input(format!("softmax of shape {:?}", av.shape())));
        }
        let mut out = as2(av).to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let rg = self.rg(a);
        Ok(self.push(out.into_dyn(), Op::SoftmaxRows(a), rg))
    }

    /// Half-open slice `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.ndim() || end > av.shape()[axis] || start > end {
            return Err(Error::Input(format!(
                "slice {start}..{end} on axis {axis} of {:?}",
                av.shape()
            )));
        }
        let out = av
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Slice(a, axis, start, end), rg))
    }

    /// 2-D convolution of a single `[C_in, H, W]` image with `[C_out, C_in, k, k]`
    /// weights. No bias; add one by broadcasting.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        dilation: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::Input(format!("conv2d shapes {xs:?} * {ws:?}")));
        }
        let k = ws[2];
        let span = dilation * (k - 1) + 1;
        if xs[1] + 2 * pad < span || xs[2] + 2 * pad < span {
            return Err(Error::Input(format!("conv2d input {xs:?} smaller than kernel")));
        }
        let geom = ConvGeom {
            in_c: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            k,
            stride,
            dilation,
            pad,
            out_h: (xs[1] + 2 * pad - span) / stride + 1,
            out_w: (xs[2] + 2 * pad - span) / stride + 1,
        };
        let x = self.value(input).as_standard_layout().into_owned();
        let cols = im2col(self.exec, &x, &geom);
        let wmat = self
            .value(weight)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((ws[0], ws[1] * k * k))
            .expect("weight reshape");
        let out = wmat
            .dot(&cols)
            .into_shape_with_order(IxDyn(&[ws[0], geom.out_h, geom.out_w]))
            .expect("conv output reshape");
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                cols,
                geom,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::ones(self.value(output).raw_dim()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, unbroadcast(g, self.shape(*a)));
                acc(*b, unbroadcast(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, unbroadcast(g, self.shape(*a)));
                acc(*b, -unbroadcast(g, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = binary(g, bv, |x, y| x * y).expect("shapes checked");
                    acc(*a, unbroadcast(&d, av.shape()));
                }
                if self.rg(*b) {
                    let d = binary(g, av, |x, y| x * y).expect("shapes checked");
                    acc(*b, unbroadcast(&d, bv.shape()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = binary(g, bv, |x, y| x / y).expect("shapes checked");
                    acc(*a, unbroadcast(&d, av.shape()));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let q = binary(&node.value, bv, |o, y| -o / y).expect("shapes checked");
                    let d = binary(g, &q, |x, y| x * y).expect("shapes checked");
                    acc(*b, unbroadcast(&d, bv.shape()));
                }
            }
            Op::Scale(a, k) => acc(*a, g.mapv(|x| x * k)),
            Op::Shift(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                if self.rg(*a) {
                    acc(*a, g2.dot(&as2(self.value(*b)).t()).into_dyn());
                }
                if self.rg(*b) {
                    acc(*b, as2(self.value(*a)).t().dot(&g2).into_dyn());
                }
            }
            Op::Transpose(a) => acc(*a, as2(g).t().as_standard_layout().into_owned().into_dyn()),
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                let d = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("reshape grad");
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let s = g.iter().next().copied().unwrap_or(0.0);
                acc(*a, Tensor::from_elem(self.value(*a).raw_dim(), s));
            }
            Op::SumAxis(a) => {
                let shape = self.value(*a).raw_dim();
                acc(*a, g.broadcast(shape).expect("keepdim broadcast").to_owned());
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Log(a) => acc(*a, g / self.value(*a)),
            Op::Sqrt(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                    *d = if y > 0.0 { *d / (2.0 * y) } else { 0.0 };
                });
                acc(*a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= *lo || x >= *hi {
                        *d = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = as2(&node.value);
                let mut d = as2(g).to_owned();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &y| *d = y * (*d - dot));
                }
                acc(*a, d.into_dyn());
            }
            Op::Slice(a, axis, start, end) => {
                let mut d = Tensor::zeros(self.value(*a).raw_dim());
                d.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*end))
                    .assign(g);
                acc(*a, d);
            }
            Op::Conv2d {
                input,
                weight,
                cols,
                geom,
            } => {
                let cout = g.shape()[0];
                let g2 = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((cout, geom.out_h * geom.out_w))
                    .expect("conv grad reshape");
                if self.rg(*weight) {
                    let dw = g2
                        .dot(&cols.t())
                        .into_shape_with_order(IxDyn(self.shape(*weight)))
                        .expect("conv weight grad");
                    acc(*weight, dw);
                }
                if self.rg(*input) {
                    let wmat = self
                        .value(*weight)
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((cout, geom.in_c * geom.k * geom.k))
                        .expect("weight reshape");
                    let dcols = wmat.t().dot(&g2);
                    acc(*input, col2im(self.exec, &dcols, geom));
                }
            }
        }
    }

    /// Gradients of every registered parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).raw_dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Convert a 2-D array into a dynamic tensor.
pub fn dyn2(a: Array2<f64>) -> Tensor {
    a.into_dyn()
}

/// View a tensor as 2-D, failing if its rank differs.
pub fn to2(t: &Tensor) -> Result<Array2<f64>> {
    t.view()
        .into_dimensionality::<Ix2>()
        .map(|v| v.to_owned())
        .map_err(|_| Error::Input(format!("expected 2-D tensor, got {:?}", t.shape())))
}

/// Row `i` of a 2-D tensor, as a plain vector.
pub fn row(t: &Tensor, i: usize) -> Vec<f64> {
    as2(t).slice(s![i, ..]).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn central_diff<F: Fn(&Tensor) -> f64>(x: &Tensor, f: F) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            out.as_slice_mut().unwrap()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let diff = (a - b).mapv(|x| x * x).sum().sqrt();
        let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn broadcasting_rules() {
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast_shape(&[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shape(&[3], &[4]).is_err());
        let g = Tensor::ones(IxDyn(&[3, 4]));
        assert_eq!(unbroadcast(&g, &[1, 4]), Tensor::from_elem(IxDyn(&[1, 4]), 3.0));
        assert_eq!(unbroadcast(&g, &[]), Tensor::from_elem(IxDyn(&[]), 12.0));
    }

    #[test]
    fn composite_expression_gradient() {
        let a0 = array![[0.3, -1.2, 0.7], [1.5, 0.2, -0.4]].into_dyn();
        let b0 = array![[0.5], [-0.9], [1.1]].into_dyn();
        let f = |a: &Tensor, b: &Tensor| -> (Graph, Var, Var, Var) {
            let mut g = Graph::new();
            let va = g.input(a.clone());
            let vb = g.input(b.clone());
            let m = g.matmul(va, vb).unwrap();
            let s = g.sigmoid(m);
            let t = g.transpose(va).unwrap();
            let r = g.relu(t);
            let e = g.exp(r);
            let sm = g.softmax_rows(e).unwrap();
            let q = g.sum_axis(sm, 0).unwrap();
            let l = g.log(q);
            let sq = g.mul(s, s).unwrap();
            let rt = g.sqrt(sq);
            let d = g.div(l, rt).unwrap();
            let tot = g.sum(d);
            (g, tot, va, vb)
        };
        let (g, out, va, vb) = f(&a0, &b0);
        let grads = g.backward(out);
        let na = central_diff(&a0, |a| {
            let (g, o, _, _) = f(a, &b0);
            g.scalar(o)
        });
        let nb = central_diff(&b0, |b| {
            let (g, o, _, _) = f(&a0, b);
            g.scalar(o)
        });
        assert!(rel_err(grads.get(va).unwrap(), &na) < 1e-6);
        assert!(rel_err(grads.get(vb).unwrap(), &nb) < 1e-6);
    }

    #[test]
    fn conv_gradient_matches_finite_difference() {
        let x0: Tensor = Array3::from_shape_fn((2, 7, 6), |(c, i, j)| {
            ((c * 31 + i * 7 + j * 3) as f64 * 0.37).sin()
        })
        .into_dyn();
        let w0: Tensor = ndarray::Array4::from_shape_fn((3, 2, 3, 3), |(a, b, c, d)| {
            ((a * 17 + b * 5 + c * 3 + d) as f64 * 0.53).cos()
        })
        .into_dyn();
        for &(stride, dil, pad) in &[(1, 1, 1), (2, 1, 1), (1, 2, 2)] {
            let f = |x: &Tensor, w: &Tensor| {
                let mut g = Graph::new();
                let vx = g.input(x.clone());
                let vw = g.input(w.clone());
                let y = g.conv2d(vx, vw, stride, dil, pad).unwrap();
                let y2 = g.mul(y, y).unwrap();
                let s = g.sum(y2);
                (g, s, vx, vw)
            };
            let (g, s, vx, vw) = f(&x0, &w0);
            let grads = g.backward(s);
            let nx = central_diff(&x0, |x| {
                let (g, s, _, _) = f(x, &w0);
                g.scalar(s)
            });
            let nw = central_diff(&w0, |w| {
                let (g, s, _, _) = f(&x0, w);
                g.scalar(s)
            });
            assert!(rel_err(grads.get(vx).unwrap(), &nx) < 1e-6);
            assert!(rel_err(grads.get(vw).unwrap(), &nw) < 1e-6);
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x: Tensor = Array3::from_shape_fn((2, 9, 8), |(c, i, j)| (c + i * j) as f64 * 0.1).into_dyn();
        let w: Tensor =
            ndarray::Array4::from_shape_fn((2, 2, 3, 3), |(a, b, c, d)| (a + 2 * b + c * d) as f64 - 2.0)
                .into_dyn();
        let (stride, dil, pad) = (2, 2, 2);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let vw = g.constant(w.clone());
        let y = g.conv2d(vx, vw, stride, dil, pad).unwrap();
        let y = g.value(y).clone();
        for o in 0..2 {
            for oy in 0..y.shape()[1] {
                for ox in 0..y.shape()[2] {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * stride + ki * dil) as isize - pad as isize;
                                let ix = (ox * stride + kj * dil) as isize - pad as isize;
                                if (0..9).contains(&iy) && (0..8).contains(&ix) {
                                    acc += x[[c, iy as usize, ix as usize]] * w[[o, c, ki, kj]];
                                }
                            }
                        }
                    }
                    assert!((acc - y[[o, oy, ox]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shared_param_accumulates() {
        let mut p = Params::new();
        p.insert("w", array![2.0].into_dyn());
        let mut g = Graph::new();
        let a = g.param(&p, "w").unwrap();
        let b = g.param(&p, "w").unwrap();
        assert_eq!(a, b);
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s);
        let pg = g.param_grads(&grads);
        assert_eq!(pg["w"][[0]], 4.0);
    }

    #[test]
    fn slice_and_clamp_gradients() {
        let x0 = array![[1.0, -2.0, 3.0, 0.5], [0.1, 0.2, 2.0, -0.7]].into_dyn();
        let mut g = Graph::new();
        let x = g.input(x0);
        let s = g.slice(x, 1, 1, 3).unwrap();
        let c = g.clamp(s, 0.0, 2.5);
        let t = g.sum(c);
        let grads = g.backward(t);
        let gx = grads.get(x).unwrap();
        assert_eq!(
            gx,
            &array![[0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0]].into_dyn()
        );
    }
}
