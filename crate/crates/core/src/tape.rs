//! Minimal reverse-mode automatic differentiation on dynamic-dimension
//! `f64` arrays.
//!
//! A [`Tape`] records a computation as a flat list of nodes in topological
//! order; [`Tape::backward`] walks the list in reverse and accumulates
//! gradients. Every operation the renderer, decoder and losses need is a
//! dedicated node kind with a hand-written adjoint, which keeps the graph
//! shallow and the backward pass allocation-light.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MulConst(Var, ArrayD<f64>),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Sqrt(Var),
    Softplus(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Abs(Var),
    Acos(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    Reshape(Var),
    BroadcastRows(Var),
    Max(Var, Var),
    CumsumExclusive(Var, usize),
    /// `(w: (R,S), f: (R,S,L)) -> (R,L)`, `out[r,l] = sum_s w[r,s] f[r,s,l]`.
    WeightedSum(Var, Var),
    /// `(f: (N,C), r: (9)) -> (N,C)`, each contiguous channel triplet `t`
    /// replaced by `R t` with `R` row-major from `r`.
    RotateTriplets(Var, Var),
    /// `(H,W,C) -> (2H,2W,C)` nearest-neighbour.
    UpsampleNearest2x(Var),
    /// 3x3 patches with padding 1: `(H,W,C) -> (Ho*Wo, 9C)`.
    Im2Col3x3(Var, usize),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.iter().next().copied().unwrap()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; gradients do not propagate into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, c: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        let v = av.dot(&bv).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    /// `a: (m,n) + b: (n)` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("add_bias lhs must be 2-d");
        let bv = self.nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("add_bias rhs must be 1-d");
        let v = (&av + &bv).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::AddBias(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let needs = self.needs(a);
        self.push(v, Op::Neg(a), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let needs = self.needs(a);
        self.push(v, Op::Scale(a, c), needs)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let needs = self.needs(a);
        self.push(v, Op::Offset(a), needs)
    }

    pub fn mul_const(&mut self, a: Var, c: ArrayD<f64>) -> Var {
        let v = &self.nodes[a.0].value * &c;
        let needs = self.needs(a);
        self.push(v, Op::MulConst(a, c), needs)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sin);
        let needs = self.needs(a);
        self.push(v, Op::Sin(a), needs)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::cos);
        let needs = self.needs(a);
        self.push(v, Op::Cos(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let needs = self.needs(a);
        self.push(v, Op::Exp(a), needs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let needs = self.needs(a);
        self.push(v, Op::Sqrt(a), needs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let needs = self.needs(a);
        self.push(v, Op::Softplus(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let needs = self.needs(a);
        self.push(v, Op::Sigmoid(a), needs)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x >= 0.0 { x } else { slope * x });
        let needs = self.needs(a);
        self.push(v, Op::LeakyRelu(a, slope), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(v, Op::Relu(a), needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let needs = self.needs(a);
        self.push(v, Op::Abs(a), needs)
    }

    pub fn acos(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::acos);
        let needs = self.needs(a);
        self.push(v, Op::Acos(a), needs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let needs = self.needs(a);
        self.push(v, Op::Clamp(a, lo, hi), needs)
    }

    /// Sum of all entries, as a `[1]`-shaped array.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let needs = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.nodes[a.0].value.sum_axis(Axis(axis));
        let needs = self.needs(a);
        self.push(v, Op::SumAxis(a, axis), needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::Concat(parts.to_vec(), axis), needs)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let needs = self.needs(a);
        self.push(v, Op::Slice(a, axis, start, end), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        // Iterate in logical order: `into_shape` on a view would silently
        // reinterpret by memory order for non-standard layouts (e.g. the
        // output of `concatenate` along a trailing axis).
        let v = ArrayD::from_shape_vec(
            IxDyn(shape),
            self.nodes[a.0].value.iter().copied().collect(),
        )
        .expect("reshape size mismatch");
        let needs = self.needs(a);
        self.push(v, Op::Reshape(a), needs)
    }

    /// `(n) -> (rows, n)` by repetition.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("broadcast_rows input must be 1-d");
        let v = av
            .broadcast((rows, av.len()))
            .unwrap()
            .to_owned()
            .into_dyn();
        let needs = self.needs(a);
        self.push(v, Op::BroadcastRows(a), needs)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut v = av.clone();
        v.zip_mut_with(bv, |x, &y| {
            if y > *x {
                *x = y;
            }
        });
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Max(a, b), needs)
    }

    /// Exclusive cumulative sum along `axis` (first slice is zero).
    pub fn cumsum_exclusive(&mut self, a: Var, axis: usize) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        exclusive_cumsum_inplace(&mut v, axis);
        let needs = self.needs(a);
        self.push(v, Op::CumsumExclusive(a, axis), needs)
    }

    pub fn weighted_sum(&mut self, w: Var, f: Var) -> Var {
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("weights must be (R,S)");
        let fv = self.nodes[f.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("features must be (R,S,L)");
        let (r, s, l) = fv.dim();
        assert_eq!(wv.dim(), (r, s), "weighted_sum shape mismatch");
        let mut out = ndarray::Array2::<f64>::zeros((r, l));
        for ri in 0..r {
            for si in 0..s {
                let wgt = wv[[ri, si]];
                for li in 0..l {
                    out[[ri, li]] += wgt * fv[[ri, si, li]];
                }
            }
        }
        let needs = self.needs(w) || self.needs(f);
        self.push(out.into_dyn(), Op::WeightedSum(w, f), needs)
    }

    pub fn rotate_triplets(&mut self, f: Var, r: Var) -> Var {
        let fv = self.nodes[f.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("rotate_triplets input must be (N,C)");
        let rv = self.nodes[r.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("rotation must be a 9-vector");
        assert_eq!(rv.len(), 9);
        let (n, c) = fv.dim();
        assert_eq!(c % 3, 0, "channel count must be divisible by 3");
        let mut out = ndarray::Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for t in (0..c).step_by(3) {
                for i in 0..3 {
                    let mut acc = 0.0;
                    for j in 0..3 {
                        acc += rv[3 * i + j] * fv[[ni, t + j]];
                    }
                    out[[ni, t + i]] = acc;
                }
            }
        }
        let needs = self.needs(f) || self.needs(r);
        self.push(out.into_dyn(), Op::RotateTriplets(f, r), needs)
    }

    pub fn upsample_nearest_2x(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("upsample input must be (H,W,C)");
        let (h, w, c) = av.dim();
        let mut out = ndarray::Array3::<f64>::zeros((2 * h, 2 * w, c));
        for i in 0..2 * h {
            for j in 0..2 * w {
                for k in 0..c {
                    out[[i, j, k]] = av[[i / 2, j / 2, k]];
                }
            }
        }
        let needs = self.needs(a);
        self.push(out.into_dyn(), Op::UpsampleNearest2x(a), needs)
    }

    /// Extracts zero-padded 3x3 patches with the given stride, flattened to
    /// `(out_h * out_w, 9 * C)` for a following matmul against a
    /// `(9*C, C_out)` kernel matrix.
    pub fn im2col_3x3(&mut self, a: Var, stride: usize) -> Var {
        let av = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("im2col input must be (H,W,C)");
        let (h, w, c) = av.dim();
        let (oh, ow) = conv3x3_out_dims(h, w, stride);
        let mut out = ndarray::Array2::<f64>::zeros((oh * ow, 9 * c));
        for oi in 0..oh {
            for oj in 0..ow {
                let row = oi * ow + oj;
                for di in 0..3 {
                    for dj in 0..3 {
                        let ii = (oi * stride + di) as isize - 1;
                        let jj = (oj * stride + dj) as isize - 1;
                        if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                            continue;
                        }
                        for k in 0..c {
                            out[[row, (di * 3 + dj) * c + k]] = av[[ii as usize, jj as usize, k]];
                        }
                    }
                }
            }
        }
        let needs = self.needs(a);
        self.push(out.into_dyn(), Op::Im2Col3x3(a, stride), needs)
    }

    /// Reverse pass from a scalar (length-1) root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate_parents(&self, idx: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let mut add_to = |v: Var, delta: ArrayD<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = val(*a).view().into_dimensionality::<Ix2>().unwrap();
                let bv = val(*b).view().into_dimensionality::<Ix2>().unwrap();
                if self.nodes[a.0].needs_grad {
                    add_to(*a, gm.dot(&bv.t()).into_dyn());
                }
                if self.nodes[b.0].needs_grad {
                    add_to(*b, av.t().dot(&gm).into_dyn());
                }
            }
            Op::Add(a, b) => {
                add_to(*a, g.clone());
                add_to(*b, g.clone());
            }
            Op::AddBias(a, b) => {
                add_to(*a, g.clone());
                if self.nodes[b.0].needs_grad {
                    let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                    add_to(*b, gm.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Sub(a, b) => {
                add_to(*a, g.clone());
                add_to(*b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    add_to(*a, g * val(*b));
                }
                if self.nodes[b.0].needs_grad {
                    add_to(*b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                if self.nodes[a.0].needs_grad {
                    add_to(*a, g / val(*b));
                }
                if self.nodes[b.0].needs_grad {
                    let bv = val(*b);
                    add_to(*b, -(g * val(*a)) / (bv * bv));
                }
            }
            Op::Neg(a) => add_to(*a, g.mapv(|x| -x)),
            Op::Scale(a, c) => add_to(*a, g.mapv(|x| x * c)),
            Op::Offset(a) => add_to(*a, g.clone()),
            Op::MulConst(a, c) => add_to(*a, g * c),
            Op::Sin(a) => add_to(*a, g * &val(*a).mapv(f64::cos)),
            Op::Cos(a) => add_to(*a, g * &val(*a).mapv(|x| -x.sin())),
            Op::Exp(a) => add_to(*a, g * &self.nodes[idx].value),
            Op::Sqrt(a) => add_to(*a, g / &self.nodes[idx].value.mapv(|y| 2.0 * y)),
            Op::Softplus(a) => add_to(*a, g * &val(*a).mapv(sigmoid)),
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                add_to(*a, g * &(y * &y.mapv(|v| 1.0 - v)));
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                add_to(*a, g * &val(*a).mapv(|x| if x >= 0.0 { 1.0 } else { s }));
            }
            Op::Relu(a) => add_to(*a, g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })),
            Op::Abs(a) => add_to(*a, g * &val(*a).mapv(f64::signum)),
            Op::Acos(a) => add_to(
                *a,
                g * &val(*a).mapv(|x| -1.0 / (1.0 - x * x).max(1e-300).sqrt()),
            ),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                add_to(
                    *a,
                    g * &val(*a).mapv(|x| if x > lo && x < hi { 1.0 } else { 0.0 }),
                );
            }
            Op::Sum(a) => {
                let s = g.iter().next().copied().unwrap();
                add_to(*a, ArrayD::from_elem(val(*a).raw_dim(), s));
            }
            Op::SumAxis(a, axis) => {
                let shape = val(*a).raw_dim();
                let expanded = g
                    .view()
                    .insert_axis(Axis(*axis))
                    .broadcast(shape.clone())
                    .unwrap()
                    .to_owned();
                add_to(*a, expanded);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    let piece = g
                        .slice_axis(Axis(*axis), Slice::from(start..start + len))
                        .to_owned();
                    add_to(*p, piece);
                    start += len;
                }
            }
            Op::Slice(a, axis, start, end) => {
                let mut full = ArrayD::zeros(val(*a).raw_dim());
                full.slice_axis_mut(Axis(*axis), Slice::from(*start..*end))
                    .assign(g);
                add_to(*a, full);
            }
            Op::Reshape(a) => {
                let back =
                    ArrayD::from_shape_vec(val(*a).raw_dim(), g.iter().copied().collect())
                        .unwrap();
                add_to(*a, back);
            }
            Op::BroadcastRows(a) => {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                add_to(*a, gm.sum_axis(Axis(0)).into_dyn());
            }
            Op::Max(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                if self.nodes[a.0].needs_grad {
                    let mut ga = g.clone();
                    ndarray::Zip::from(&mut ga).and(av).and(bv).for_each(|gx, &x, &y| {
                        if y > x {
                            *gx = 0.0;
                        }
                    });
                    add_to(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = g.clone();
                    ndarray::Zip::from(&mut gb).and(av).and(bv).for_each(|gx, &x, &y| {
                        if y <= x {
                            *gx = 0.0;
                        }
                    });
                    add_to(*b, gb);
                }
            }
            Op::CumsumExclusive(a, axis) => {
                // adjoint: reversed exclusive cumsum of the incoming gradient
                let mut back = g.clone();
                back.invert_axis(Axis(*axis));
                exclusive_cumsum_inplace(&mut back, *axis);
                back.invert_axis(Axis(*axis));
                add_to(*a, back);
            }
            Op::WeightedSum(w, f) => {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let wv = val(*w).view().into_dimensionality::<Ix2>().unwrap();
                let fv = val(*f).view().into_dimensionality::<Ix3>().unwrap();
                let (r, s, l) = fv.dim();
                if self.nodes[w.0].needs_grad {
                    let mut gw = ndarray::Array2::<f64>::zeros((r, s));
                    for ri in 0..r {
                        for si in 0..s {
                            let mut acc = 0.0;
                            for li in 0..l {
                                acc += gm[[ri, li]] * fv[[ri, si, li]];
                            }
                            gw[[ri, si]] = acc;
                        }
                    }
                    add_to(*w, gw.into_dyn());
                }
                if self.nodes[f.0].needs_grad {
                    let mut gf = ndarray::Array3::<f64>::zeros((r, s, l));
                    for ri in 0..r {
                        for si in 0..s {
                            let wgt = wv[[ri, si]];
                            for li in 0..l {
                                gf[[ri, si, li]] = wgt * gm[[ri, li]];
                            }
                        }
                    }
                    add_to(*f, gf.into_dyn());
                }
            }
            Op::RotateTriplets(f, r) => {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let fv = val(*f).view().into_dimensionality::<Ix2>().unwrap();
                let rv = val(*r).view().into_dimensionality::<Ix1>().unwrap();
                let (n, c) = fv.dim();
                if self.nodes[f.0].needs_grad {
                    // df = R^T g per triplet
                    let mut gf = ndarray::Array2::<f64>::zeros((n, c));
                    for ni in 0..n {
                        for t in (0..c).step_by(3) {
                            for j in 0..3 {
                                let mut acc = 0.0;
                                for i in 0..3 {
                                    acc += rv[3 * i + j] * gm[[ni, t + i]];
                                }
                                gf[[ni, t + j]] = acc;
                            }
                        }
                    }
                    add_to(*f, gf.into_dyn());
                }
                if self.nodes[r.0].needs_grad {
                    let mut gr = ndarray::Array1::<f64>::zeros(9);
                    for ni in 0..n {
                        for t in (0..c).step_by(3) {
                            for i in 0..3 {
                                for j in 0..3 {
                                    gr[3 * i + j] += gm[[ni, t + i]] * fv[[ni, t + j]];
                                }
                            }
                        }
                    }
                    add_to(*r, gr.into_dyn());
                }
            }
            Op::UpsampleNearest2x(a) => {
                let gm = g.view().into_dimensionality::<Ix3>().unwrap();
                let (h2, w2, c) = gm.dim();
                let mut ga = ndarray::Array3::<f64>::zeros((h2 / 2, w2 / 2, c));
                for i in 0..h2 {
                    for j in 0..w2 {
                        for k in 0..c {
                            ga[[i / 2, j / 2, k]] += gm[[i, j, k]];
                        }
                    }
                }
                add_to(*a, ga.into_dyn());
            }
            Op::Im2Col3x3(a, stride) => {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let shape = val(*a).shape();
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = conv3x3_out_dims(h, w, *stride);
                let mut ga = ndarray::Array3::<f64>::zeros((h, w, c));
                for oi in 0..oh {
                    for oj in 0..ow {
                        let row = oi * ow + oj;
                        for di in 0..3 {
                            for dj in 0..3 {
                                let ii = (oi * stride + di) as isize - 1;
                                let jj = (oj * stride + dj) as isize - 1;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                for k in 0..c {
                                    ga[[ii as usize, jj as usize, k]] +=
                                        gm[[row, (di * 3 + dj) * c + k]];
                                }
                            }
                        }
                    }
                }
                add_to(*a, ga.into_dyn());
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output spatial dims of a padded 3x3 convolution.
pub fn conv3x3_out_dims(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1)
}

fn exclusive_cumsum_inplace(a: &mut ArrayD<f64>, axis: usize) {
    let len = a.shape()[axis];
    let mut prev_total: Option<ArrayD<f64>> = None;
    for i in 0..len {
        let cur = a.index_axis(Axis(axis), i).to_owned();
        match prev_total.take() {
            None => {
                a.index_axis_mut(Axis(axis), i).fill(0.0);
                prev_total = Some(cur.into_dyn());
            }
            Some(tot) => {
                a.index_axis_mut(Axis(axis), i).assign(&tot);
                prev_total = Some(tot + cur);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of `f` at `x`, one component at a time.
    fn finite_diff<F: FnMut(&Array1<f64>) -> f64>(x: &Array1<f64>, mut f: F, h: f64) -> Array1<f64> {
        let mut g = Array1::zeros(x.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            g[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check_grad<F>(x: Array1<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone().into_dyn());
        let out = build(&mut tape, leaf);
        let grads = tape.backward(out);
        let analytic = grads
            .get(leaf)
            .unwrap()
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let numeric = finite_diff(
            &x,
            |xv| {
                let mut t = Tape::new();
                let l = t.leaf(xv.clone().into_dyn());
                let o = build(&mut t, l);
                t.scalar_value(o)
            },
            1e-6,
        );
        for i in 0..x.len() {
            let denom = analytic[i].abs().max(numeric[i].abs()).max(1e-6);
            assert!(
                (analytic[i] - numeric[i]).abs() / denom < tol,
                "grad mismatch at {i}: analytic {} vs numeric {}",
                analytic[i],
                numeric[i]
            );
        }
    }

    #[test]
    fn elementwise_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array1::from_iter((0..8).map(|_| rng.gen_range(-1.5..1.5)));
        check_grad(
            x,
            |t, l| {
                let a = t.sin(l);
                let b = t.exp(a);
                let c = t.sigmoid(b);
                let d = t.softplus(c);
                let e = t.leaky_relu(d, 0.1);
                t.sum(e)
            },
            1e-5,
        );
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array1::from_iter((0..12).map(|_| rng.gen_range(-1.0..1.0)));
        check_grad(
            x,
            |t, l| {
                let m = t.reshape(l, &[3, 4]);
                let w = t.constant(
                    Array2::from_shape_fn((4, 2), |(i, j)| ((i + 2 * j) as f64 * 0.3).sin())
                        .into_dyn(),
                );
                let b = t.constant(array![0.1, -0.2].into_dyn());
                let y = t.matmul(m, w);
                let y = t.add_bias(y, b);
                let y = t.relu(y);
                t.sum(y)
            },
            1e-5,
        );
    }

    #[test]
    fn cumsum_weighted_sum_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array1::from_iter((0..24).map(|_| rng.gen_range(0.1..1.0)));
        check_grad(
            x,
            |t, l| {
                let sd = t.reshape(l, &[2, 4, 3]); // (R,S,L) features
                let w_raw = t.slice(sd, 2, 0, 1);
                let w = t.reshape(w_raw, &[2, 4]);
                let texcl = t.cumsum_exclusive(w, 1);
                let texp = t.neg(texcl);
                let texp = t.exp(texp);
                let wgt = t.mul(texp, w);
                let out = t.weighted_sum(wgt, sd);
                t.sum(out)
            },
            1e-5,
        );
    }

    #[test]
    fn rotate_triplets_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // 2 spatial x 6 channels plus 9 rotation entries packed in one leaf
        let x = Array1::from_iter((0..21).map(|_| rng.gen_range(-1.0..1.0)));
        check_grad(
            x,
            |t, l| {
                let f_flat = t.slice(l, 0, 0, 12);
                let f = t.reshape(f_flat, &[2, 6]);
                let r = t.slice(l, 0, 12, 21);
                let out = t.rotate_triplets(f, r);
                let sq = t.mul(out, out);
                t.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn upsample_and_im2col_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array1::from_iter((0..32).map(|_| rng.gen_range(-1.0..1.0)));
        check_grad(
            x,
            |t, l| {
                let img = t.reshape(l, &[4, 4, 2]);
                let up = t.upsample_nearest_2x(img);
                let cols = t.im2col_3x3(up, 2);
                let sq = t.mul(cols, cols);
                t.sum(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn max_and_abs_gradients() {
        // values chosen away from ties and kinks
        let x = array![0.5, -0.7, 1.2, -0.3];
        check_grad(
            x,
            |t, l| {
                let a = t.slice(l, 0, 0, 2);
                let b = t.slice(l, 0, 2, 4);
                let m = t.max(a, b);
                let m = t.abs(m);
                t.sum(m)
            },
            1e-5,
        );
    }

    #[test]
    fn acos_clamp_gradient() {
        let x = array![0.3, -0.6];
        check_grad(
            x,
            |t, l| {
                let c = t.clamp(l, -1.0, 1.0);
                let a = t.acos(c);
                t.sum(a)
            },
            1e-5,
        );
    }

    #[test]
    fn exclusive_cumsum_values() {
        let mut a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]].into_dyn();
        exclusive_cumsum_inplace(&mut a, 1);
        assert_eq!(a, array![[0.0, 1.0, 3.0], [0.0, 4.0, 9.0]].into_dyn());
    }

    #[test]
    fn constants_do_not_accumulate_gradients() {
        let mut t = Tape::new();
        let c = t.constant(array![1.0, 2.0].into_dyn());
        let l = t.leaf(array![3.0, 4.0].into_dyn());
        let m = t.mul(c, l);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(l).unwrap(), &array![1.0, 2.0].into_dyn());
    }
}
