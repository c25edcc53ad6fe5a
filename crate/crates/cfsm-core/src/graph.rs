//! Minimal tape-based reverse-mode autodiff over `ArrayD<f32>`.
//!
//! A [`Tape`] is an append-only arena of nodes; [`Var`] is an index into it.
//! Creation order is already a topological order, so the backward pass is a
//! single reverse sweep. The op set is exactly what the synthesis and
//! recognition models need — this is not a general-purpose framework.
//!
//! Scalars are rank-0 arrays. Reductions accumulate in `f64` before casting
//! back, which keeps finite-difference checks well-conditioned at `f32`.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView4, Axis, Ix1, Ix2, Ix4, IxDyn, Zip};

use crate::{blas, conv};

pub type Arr = ArrayD<f32>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Relu(Var),
    LeakyRelu(Var, f32),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Rsqrt(Var),
    Abs(Var),
    ClampMin(Var, f32),
    Detach,
    Reshape(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRowVec(Var, Var),
    AddColVec(Var, Var),
    MulColVec(Var, Var),
    SumRows(Var),
    SumAll(Var),
    ChanScale(Var, Var),
    ChanShift(Var, Var),
    SpatialMean(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    AvgPool2(Var),
    UpNearest2(Var),
    SliceCols(Var, usize),
    InstanceNorm(Var, f32),
}

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    /// Value of a rank-0 node as `f32`.
    pub fn scalar(&self, v: Var) -> f32 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates gradients (parameters, perturbable inputs).
    pub fn param(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar_constant(&mut self, v: f32) -> Var {
        self.constant(Arr::from_elem(IxDyn(&[]), v))
    }

    fn ng1(&self, a: Var) -> bool {
        self.nodes[a.0].needs_grad
    }

    fn ng2(&self, a: Var, b: Var) -> bool {
        self.ng1(a) || self.ng1(b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b), self.ng2(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b), self.ng2(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b), self.ng2(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a), self.ng1(a))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        self.push(v, Op::AddScalar(a), self.ng1(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        self.push(v, Op::MulScalar(a, s), self.ng1(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), self.ng1(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), self.ng1(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f32::tanh);
        self.push(v, Op::Tanh(a), self.ng1(a))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(v, Op::Softplus(a), self.ng1(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f32::exp);
        self.push(v, Op::Exp(a), self.ng1(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f32::ln);
        self.push(v, Op::Ln(a), self.ng1(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f32::sqrt);
        self.push(v, Op::Sqrt(a), self.ng1(a))
    }

    /// `1 / sqrt(x + eps)`.
    pub fn rsqrt(&mut self, a: Var, eps: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (x + eps).sqrt());
        self.push(v, Op::Rsqrt(a), self.ng1(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f32::abs);
        self.push(v, Op::Abs(a), self.ng1(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f32) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(lo));
        self.push(v, Op::ClampMin(a, lo), self.ng1(a))
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::Detach, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible element count");
        self.push(v, Op::Reshape(a), self.ng1(a))
    }

    // ---- linear algebra ----

    /// `op(a) @ op(b)` on rank-2 operands; `ta`/`tb` select transposed reads.
    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let c = blas::matmul(ta, tb, &av, &bv);
        let v = c.into_dyn();
        self.push(v, Op::MatMul { a, b, ta, tb }, self.ng2(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, false, b, false)
    }

    /// `[m,n] + [n]` broadcast over rows.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Var {
        let m = as2(&self.nodes[a.0].value);
        let r = as1(&self.nodes[v.0].value);
        assert_eq!(m.ncols(), r.len(), "add_row_vec: width mismatch");
        let out = (&m + &r).into_dyn();
        self.push(out, Op::AddRowVec(a, v), self.ng2(a, v))
    }

    /// `[m,n] + [m]` broadcast over columns.
    pub fn add_col_vec(&mut self, a: Var, v: Var) -> Var {
        let m = as2(&self.nodes[a.0].value);
        let c = as1(&self.nodes[v.0].value);
        assert_eq!(m.nrows(), c.len(), "add_col_vec: height mismatch");
        let col = c.insert_axis(Axis(1));
        let out = (&m + &col).into_dyn();
        self.push(out, Op::AddColVec(a, v), self.ng2(a, v))
    }

    /// `[m,n] * [m]` broadcast over columns.
    pub fn mul_col_vec(&mut self, a: Var, v: Var) -> Var {
        let m = as2(&self.nodes[a.0].value);
        let c = as1(&self.nodes[v.0].value);
        assert_eq!(m.nrows(), c.len(), "mul_col_vec: height mismatch");
        let col = c.insert_axis(Axis(1));
        let out = (&m * &col).into_dyn();
        self.push(out, Op::MulColVec(a, v), self.ng2(a, v))
    }

    /// Row sums of a `[m,n]` matrix -> `[m]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = as2(&self.nodes[a.0].value);
        let mut out = Array1::<f32>::zeros(m.nrows());
        for (i, row) in m.rows().into_iter().enumerate() {
            out[i] = row.iter().map(|&x| x as f64).sum::<f64>() as f32;
        }
        self.push(out.into_dyn(), Op::SumRows(a), self.ng1(a))
    }

    /// Sum of all elements -> rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().map(|&x| x as f64).sum();
        let v = Arr::from_elem(IxDyn(&[]), s as f32);
        self.push(v, Op::SumAll(a), self.ng1(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f32)
    }

    /// Slice of columns `[m, start..start+len]` of a rank-2 matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = as2(&self.nodes[a.0].value);
        assert!(start + len <= m.ncols(), "slice_cols: out of range");
        let v = m.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn();
        self.push(v, Op::SliceCols(a, start), self.ng1(a))
    }

    // ---- NCHW ops ----

    /// `x[b,c,h,w] * s[b,c]`.
    pub fn chan_scale(&mut self, x: Var, sc: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let sv = as2(&self.nodes[sc.0].value);
        assert_eq!((xv.dim().0, xv.dim().1), (sv.nrows(), sv.ncols()), "chan_scale: dims");
        let mut out = xv.to_owned();
        for b in 0..xv.dim().0 {
            for c in 0..xv.dim().1 {
                let f = sv[[b, c]];
                out.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), c)
                    .mapv_inplace(|v| v * f);
            }
        }
        self.push(out.into_dyn(), Op::ChanScale(x, sc), self.ng2(x, sc))
    }

    /// `x[b,c,h,w] + s[b,c]`.
    pub fn chan_shift(&mut self, x: Var, sh: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let sv = as2(&self.nodes[sh.0].value);
        assert_eq!((xv.dim().0, xv.dim().1), (sv.nrows(), sv.ncols()), "chan_shift: dims");
        let mut out = xv.to_owned();
        for b in 0..xv.dim().0 {
            for c in 0..xv.dim().1 {
                let f = sv[[b, c]];
                out.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), c)
                    .mapv_inplace(|v| v + f);
            }
        }
        self.push(out.into_dyn(), Op::ChanShift(x, sh), self.ng2(x, sh))
    }

    /// Mean over the spatial dims: `[b,c,h,w] -> [b,c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = xv.dim();
        let mut out = Array2::<f32>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let s: f64 = xv
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), ci)
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                out[[bi, ci]] = (s / (h * w) as f64) as f32;
            }
        }
        self.push(out.into_dyn(), Op::SpatialMean(x), self.ng1(x))
    }

    /// Fused per-sample, per-channel spatial normalization:
    /// `(x − μ) / sqrt(σ² + eps)` over each `[h,w]` plane of a `[b,c,h,w]`
    /// input. One op instead of a seven-op chain; the backward recomputes the
    /// plane statistics from the saved input.
    pub fn instance_norm(&mut self, x: Var, eps: f32) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let out = instance_norm_forward(&xv, eps);
        self.push(out.into_dyn(), Op::InstanceNorm(x, eps), self.ng1(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let out = conv::conv2d_forward(&xv, &wv, &bv, stride, pad);
        let ng = self.ng1(x) || self.ng1(w) || self.ng1(b);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let out = conv::avg_pool2_forward(&xv);
        self.push(out.into_dyn(), Op::AvgPool2(x), self.ng1(x))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let out = conv::upsample2_forward(&xv);
        self.push(out.into_dyn(), Op::UpNearest2(x), self.ng1(x))
    }

    // ---- backward ----

    /// Reverse sweep from a rank-0 `root`; returns gradients for every node
    /// that (transitively) requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward: root must be scalar"
        );
        let n = root.0 + 1;
        let mut grads: Vec<Option<Arr>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        let root_shape = self.nodes[root.0].value.raw_dim();
        grads[root.0] = Some(Arr::from_elem(root_shape, 1.0));

        for i in (0..n).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Arr, grads: &mut [Option<Arr>]) {
        let val_of = |v: Var| &self.nodes[v.0].value;
        match self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng1(a) {
                    self.acc(grads, a, g * val_of(b));
                }
                if self.ng1(b) {
                    self.acc(grads, b, g * val_of(a));
                }
            }
            Op::Neg(a) => self.acc(grads, a, g.mapv(|x| -x)),
            Op::AddScalar(a) => self.acc(grads, a, g.clone()),
            Op::MulScalar(a, s) => self.acc(grads, a, g.mapv(|x| x * s)),
            Op::Relu(a) => {
                let d = zip_map(g, val_of(a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.acc(grads, a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = zip_map(g, val_of(a), |gi, x| if x > 0.0 { gi } else { slope * gi });
                self.acc(grads, a, d);
            }
            Op::Tanh(a) => {
                let d = zip_map(g, &self.nodes[i].value, |gi, y| gi * (1.0 - y * y));
                self.acc(grads, a, d);
            }
            Op::Softplus(a) => {
                let d = zip_map(g, val_of(a), |gi, x| gi * sigmoid(x));
                self.acc(grads, a, d);
            }
            Op::Exp(a) => {
                let d = zip_map(g, &self.nodes[i].value, |gi, y| gi * y);
                self.acc(grads, a, d);
            }
            Op::Ln(a) => {
                let d = zip_map(g, val_of(a), |gi, x| gi / x);
                self.acc(grads, a, d);
            }
            Op::Sqrt(a) => {
                let d = zip_map(g, &self.nodes[i].value, |gi, y| gi * 0.5 / y);
                self.acc(grads, a, d);
            }
            Op::Rsqrt(a) => {
                let d = zip_map(g, &self.nodes[i].value, |gi, y| gi * (-0.5 * y * y * y));
                self.acc(grads, a, d);
            }
            Op::Abs(a) => {
                let d = zip_map(g, val_of(a), |gi, x| gi * x.signum() * (x != 0.0) as u8 as f32);
                self.acc(grads, a, d);
            }
            Op::ClampMin(a, lo) => {
                let d = zip_map(g, val_of(a), |gi, x| if x > lo { gi } else { 0.0 });
                self.acc(grads, a, d);
            }
            Op::Detach => {}
            Op::Reshape(a) => {
                let shape = val_of(a).raw_dim();
                self.acc(grads, a, g.clone().into_shape_with_order(shape).unwrap());
            }
            Op::MatMul { a, b, ta, tb } => {
                let g2 = as2(g);
                let av = as2(val_of(a));
                let bv = as2(val_of(b));
                if self.ng1(a) {
                    let ga = match (ta, tb) {
                        (false, false) => blas::matmul(false, true, &g2, &bv),
                        (false, true) => blas::matmul(false, false, &g2, &bv),
                        (true, false) => blas::matmul(false, true, &bv, &g2),
                        (true, true) => blas::matmul(true, true, &bv, &g2),
                    };
                    self.acc(grads, a, ga.into_dyn());
                }
                if self.ng1(b) {
                    let gb = match (ta, tb) {
                        (false, false) => blas::matmul(true, false, &av, &g2),
                        (false, true) => blas::matmul(true, false, &g2, &av),
                        (true, false) => blas::matmul(false, false, &av, &g2),
                        (true, true) => blas::matmul(true, true, &g2, &av),
                    };
                    self.acc(grads, b, gb.into_dyn());
                }
            }
            Op::AddRowVec(a, v) => {
                if self.ng1(a) {
                    self.acc(grads, a, g.clone());
                }
                if self.ng1(v) {
                    let g2 = as2(g);
                    let mut d = Array1::<f32>::zeros(g2.ncols());
                    for row in g2.rows() {
                        d += &row;
                    }
                    self.acc(grads, v, d.into_dyn());
                }
            }
            Op::AddColVec(a, v) => {
                if self.ng1(a) {
                    self.acc(grads, a, g.clone());
                }
                if self.ng1(v) {
                    let g2 = as2(g);
                    let d = g2.sum_axis(Axis(1));
                    self.acc(grads, v, d.into_dyn());
                }
            }
            Op::MulColVec(a, v) => {
                let g2 = as2(g);
                if self.ng1(a) {
                    let col = as1(val_of(v)).insert_axis(Axis(1));
                    self.acc(grads, a, (&g2 * &col).into_dyn());
                }
                if self.ng1(v) {
                    let av = as2(val_of(a));
                    let d = (&g2 * &av).sum_axis(Axis(1));
                    self.acc(grads, v, d.into_dyn());
                }
            }
            Op::SumRows(a) => {
                let av = as2(val_of(a));
                let g1 = as1(g);
                let mut d = Array2::<f32>::zeros((av.nrows(), av.ncols()));
                for (mut row, &gi) in d.rows_mut().into_iter().zip(g1.iter()) {
                    row.fill(gi);
                }
                self.acc(grads, a, d.into_dyn());
            }
            Op::SumAll(a) => {
                let gi = g.iter().next().copied().unwrap();
                let d = Arr::from_elem(val_of(a).raw_dim(), gi);
                self.acc(grads, a, d);
            }
            Op::ChanScale(x, sv) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, _, _) = g4.dim();
                if self.ng1(x) {
                    let s2 = as2(val_of(sv));
                    let mut d = g4.to_owned();
                    for bi in 0..b {
                        for ci in 0..c {
                            let f = s2[[bi, ci]];
                            d.index_axis_mut(Axis(0), bi)
                                .index_axis_mut(Axis(0), ci)
                                .mapv_inplace(|v| v * f);
                        }
                    }
                    self.acc(grads, x, d.into_dyn());
                }
                if self.ng1(sv) {
                    let xv = val_of(x).view().into_dimensionality::<Ix4>().unwrap();
                    let mut d = Array2::<f32>::zeros((b, c));
                    for bi in 0..b {
                        for ci in 0..c {
                            let s: f64 = g4
                                .index_axis(Axis(0), bi)
                                .index_axis(Axis(0), ci)
                                .iter()
                                .zip(xv.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter())
                                .map(|(&gg, &xx)| gg as f64 * xx as f64)
                                .sum();
                            d[[bi, ci]] = s as f32;
                        }
                    }
                    self.acc(grads, sv, d.into_dyn());
                }
            }
            Op::ChanShift(x, sv) => {
                if self.ng1(x) {
                    self.acc(grads, x, g.clone());
                }
                if self.ng1(sv) {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, c, _, _) = g4.dim();
                    let mut d = Array2::<f32>::zeros((b, c));
                    for bi in 0..b {
                        for ci in 0..c {
                            let s: f64 = g4
                                .index_axis(Axis(0), bi)
                                .index_axis(Axis(0), ci)
                                .iter()
                                .map(|&v| v as f64)
                                .sum();
                            d[[bi, ci]] = s as f32;
                        }
                    }
                    self.acc(grads, sv, d.into_dyn());
                }
            }
            Op::SpatialMean(x) => {
                let xv = val_of(x).view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, h, w) = xv.dim();
                let g2 = as2(g);
                let inv = 1.0 / (h * w) as f32;
                let mut d = ndarray::Array4::<f32>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        let f = g2[[bi, ci]] * inv;
                        d.index_axis_mut(Axis(0), bi)
                            .index_axis_mut(Axis(0), ci)
                            .fill(f);
                    }
                }
                self.acc(grads, x, d.into_dyn());
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = val_of(x).view().into_dimensionality::<Ix4>().unwrap();
                let wv = val_of(w).view().into_dimensionality::<Ix4>().unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (gx, gw, gb) = conv::conv2d_backward(
                    &xv,
                    &wv,
                    stride,
                    pad,
                    &g4,
                    self.ng1(x),
                    self.ng1(w),
                );
                if let Some(gx) = gx {
                    self.acc(grads, x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    self.acc(grads, w, gw.into_dyn());
                }
                if self.ng1(b) {
                    self.acc(grads, b, gb.into_dyn());
                }
            }
            Op::AvgPool2(x) => {
                let (_, _, h, w) = val_of(x)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .dim();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let d = conv::avg_pool2_backward(&g4, h, w);
                self.acc(grads, x, d.into_dyn());
            }
            Op::UpNearest2(x) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let d = conv::upsample2_backward(&g4);
                self.acc(grads, x, d.into_dyn());
            }
            Op::SliceCols(a, start) => {
                let av = as2(val_of(a));
                let g2 = as2(g);
                let mut d = Array2::<f32>::zeros((av.nrows(), av.ncols()));
                d.slice_mut(ndarray::s![.., start..start + g2.ncols()])
                    .assign(&g2);
                self.acc(grads, a, d.into_dyn());
            }
            Op::InstanceNorm(x, eps) => {
                let xv = val_of(x).view().into_dimensionality::<Ix4>().unwrap();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let d = instance_norm_backward(&xv, &g4, eps);
                self.acc(grads, x, d.into_dyn());
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Arr>], v: Var, delta: Arr) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(g: &Arr, x: &Arr, f: impl Fn(f32, f32) -> f32) -> Arr {
    let mut out = g.clone();
    Zip::from(&mut out).and(x).for_each(|o, &xi| *o = f(*o, xi));
    out
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f32> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected rank-2 value")
}

fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f32> {
    a.view()
        .into_dimensionality::<Ix1>()
        .expect("expected rank-1 value")
}

/// Plane statistics for instance normalization: mean, then the mean of the
/// f32 squared deviations, both accumulated in f64 exactly like the
/// `spatial_mean` op so fused and composed paths agree bitwise.
fn plane_stats(plane: &[f32], eps: f32) -> (f32, f32) {
    let n = plane.len() as f64;
    let mean = (plane.iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
    let var = (plane
        .iter()
        .map(|&v| {
            let c = v - mean;
            (c * c) as f64
        })
        .sum::<f64>()
        / n) as f32;
    (mean, 1.0 / (var + eps).sqrt())
}

fn instance_norm_forward(x: &ArrayView4<'_, f32>, eps: f32) -> Array4<f32> {
    let mut out = Array4::<f32>::zeros(x.dim());
    let jobs: Vec<_> = x
        .axis_chunks_iter(Axis(0), 1)
        .zip(out.axis_chunks_iter_mut(Axis(0), 1))
        .collect();
    crate::parallel::for_each_vec(jobs, |(xs, mut os)| {
        for c in 0..xs.dim().1 {
            let xp = xs.index_axis(Axis(1), c);
            let xp = xp.to_slice().expect("instance_norm: non-contiguous input");
            let (mean, r) = plane_stats(xp, eps);
            let mut op = os.index_axis_mut(Axis(1), c);
            let op = op.as_slice_mut().unwrap();
            for (o, &v) in op.iter_mut().zip(xp) {
                *o = (v - mean) * r;
            }
        }
    });
    out
}

fn instance_norm_backward(x: &ArrayView4<'_, f32>, g: &ArrayView4<'_, f32>, eps: f32) -> Array4<f32> {
    let mut dx = Array4::<f32>::zeros(x.dim());
    let jobs: Vec<_> = x
        .axis_chunks_iter(Axis(0), 1)
        .zip(g.axis_chunks_iter(Axis(0), 1))
        .zip(dx.axis_chunks_iter_mut(Axis(0), 1))
        .collect();
    crate::parallel::for_each_vec(jobs, |((xs, gs), mut ds)| {
        for c in 0..xs.dim().1 {
            let xp = xs.index_axis(Axis(1), c);
            let xp = xp.to_slice().expect("instance_norm: non-contiguous input");
            let gp = gs.index_axis(Axis(1), c);
            let gp = gp.to_slice().expect("instance_norm: non-contiguous grad");
            let (mean, r) = plane_stats(xp, eps);
            // With y = (x − μ)·r the adjoint is r·(g − mean(g) − y·mean(g·y)).
            let n = xp.len() as f64;
            let mut gsum = 0f64;
            let mut gysum = 0f64;
            for (&gv, &xv) in gp.iter().zip(xp) {
                gsum += gv as f64;
                gysum += (gv * ((xv - mean) * r)) as f64;
            }
            let gmean = (gsum / n) as f32;
            let gymean = (gysum / n) as f32;
            let mut dp = ds.index_axis_mut(Axis(1), c);
            let dp = dp.as_slice_mut().unwrap();
            for ((d, &gv), &xv) in dp.iter_mut().zip(gp).zip(xp) {
                let y = (xv - mean) * r;
                *d = r * (gv - gmean - y * gymean);
            }
        }
    });
    dx
}
