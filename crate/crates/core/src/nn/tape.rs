//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive in creation order, which is already a
//! topological order, so [`Tape::backward`] walks it once in reverse.
//! Primitives: matmul (shared or batched right operand, optional transpose),
//! broadcasting add/mul, scalar multiply, softmax and layer norm over the last
//! axis, tanh-GELU, full sum, reshape, permute, row gather and row concat.

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    Softmax { a: Var },
    LayerNorm { a: Var, inv_std: Vec<T> },
    Gelu { a: Var },
    Sum { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Gather { a: Var, rows: Vec<usize> },
    Concat { a: Var, b: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

fn shape_err(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(
            !requires_grad || value.is_finite(),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a [..., M, K] × b` where `b` is `[K, N]` (shared across the batch) or
    /// `[..., K, N]` with the same leading dims as `a`. With `trans_b`, `b` is
    /// given as `[N, K]` / `[..., N, K]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let geom = MatMulGeom::new(&sa, &sb, trans_b)?;
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(geom.n);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        geom.forward(av, bv, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out), Op::MatMul { a, b, trans_b }, rg))
    }

    /// Elementwise add; `b`'s shape must equal `a`'s or a suffix of it (broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.broadcast_inner(a, b, "add")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<T> = av
            .chunks_exact(inner)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out), Op::Add { a, b }, rg))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.broadcast_inner(a, b, "mul")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<T> = av
            .chunks_exact(inner)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x * y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out), Op::Mul { a, b }, rg))
    }

    fn broadcast_inner(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("{what}: cannot broadcast {sb:?} onto {sa:?}")));
        }
        Ok(sb.iter().product::<usize>().max(1))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out), Op::Scale { a, s }, rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            let inv = sum.recip();
            for x in row.iter_mut() {
                *x = *x * inv;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out), Op::Softmax { a }, rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap();
        let eps = T::from_f64(LAYER_NORM_EPS);
        let dn = T::from_f64(d as f64);
        let x = self.value(a).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.len() / d);
        for row in x.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = (var + eps).sqrt().recip();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, xhat), Op::LayerNorm { a, inv_std }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out), Op::Gelu { a }, rg)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![1], vec![s]), Op::Sum { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(a)
            )));
        }
        let data = self.value(a).data().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, data), Op::Reshape { a }, rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, out) = permute_data(self.value(a).data(), &shape, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, out), Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    /// Selects rows (indices along axis 0); repeated indices are allowed.
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = shape[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err(format!("gather row {bad} out of range for {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(out_shape, out), Op::Gather { a, rows: rows.to_vec() }, rg))
    }

    /// Stacks `a` on top of `b` along axis 0.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(shape_err(format!("concat {sa:?} with {sb:?}")));
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out), Op::Concat { a, b }, rg))
    }

    /// Backpropagates from `root`. With `seed = None` the root must be a single
    /// element and is seeded with 1; otherwise `seed` is `∂L/∂root`.
    pub fn backward(&self, root: Var, seed: Option<&[T]>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_len = self.value(root).len();
        let seed = match seed {
            Some(s) if s.len() == root_len => s.to_vec(),
            Some(s) => {
                return Err(shape_err(format!(
                    "seed of length {} for root of length {root_len}",
                    s.len()
                )))
            }
            None if root_len == 1 => vec![T::one()],
            None => return Err(shape_err("implicit seed needs a scalar root".into())),
        };
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let geom = MatMulGeom::new(self.shape(*a), self.shape(*b), *trans_b)
                    .expect("validated in forward");
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| geom.grad_a(g, bv, ga));
                self.accumulate(grads, *b, |gb| geom.grad_b(g, av, gb));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x = *x + y;
                    }
                });
                let inner = self.value(*b).len();
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks_exact(inner) {
                        for (x, &y) in gb.iter_mut().zip(row) {
                            *x = *x + y;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let inner = bv.len();
                self.accumulate(grads, *a, |ga| {
                    for (i, (x, &y)) in ga.iter_mut().zip(g).enumerate() {
                        *x = *x + y * bv[i % inner];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (grow, arow) in g.chunks_exact(inner).zip(av.chunks_exact(inner)) {
                        for ((x, &y), &p) in gb.iter_mut().zip(grow).zip(arow) {
                            *x = *x + y * p;
                        }
                    }
                });
            }
            Op::Scale { a, s } => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x = *x + y * *s;
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                self.accumulate(grads, *a, |ga| {
                    for ((gx, gy), yy) in ga.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                        let dot = gy.iter().zip(yy).map(|(&p, &q)| p * q).sum::<T>();
                        for ((x, &gi), &yi) in gx.iter_mut().zip(gy).zip(yy) {
                            *x = *x + yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, inv_std } => {
                let xhat = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let dn = T::from_f64(d as f64);
                self.accumulate(grads, *a, |ga| {
                    for (((gx, gy), xh), &inv) in ga
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xhat.chunks_exact(d))
                        .zip(inv_std)
                    {
                        let mean_g = gy.iter().copied().sum::<T>() / dn;
                        let mean_gx = gy.iter().zip(xh).map(|(&p, &q)| p * q).sum::<T>() / dn;
                        for ((x, &gi), &xi) in gx.iter_mut().zip(gy).zip(xh) {
                            *x = *x + inv * (gi - mean_g - xi * mean_gx);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, &gi), &ai) in ga.iter_mut().zip(g).zip(av) {
                        *x = *x + gi * gelu_grad(ai);
                    }
                });
            }
            Op::Sum { a } => {
                self.accumulate(grads, *a, |ga| {
                    for x in ga.iter_mut() {
                        *x = *x + g[0];
                    }
                });
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x = *x + y;
                    }
                });
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, back) = permute_data(g, node.value.shape(), &inverse);
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(back) {
                        *x = *x + y;
                    }
                });
            }
            Op::Gather { a, rows } => {
                let inner: usize = node.value.shape()[1..].iter().product();
                self.accumulate(grads, *a, |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (x, &y) in ga[r * inner..(r + 1) * inner].iter_mut().zip(&g[k * inner..(k + 1) * inner]) {
                            *x = *x + y;
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let split = self.value(*a).len();
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(&g[..split]) {
                        *x = *x + y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (x, &y) in gb.iter_mut().zip(&g[split..]) {
                        *x = *x + y;
                    }
                });
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let th = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::from_f64(3.0) * c * x * x)
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    if src.is_empty() {
        return (out_shape, out);
    }
    let last = rank - 1;
    loop {
        let base: usize = idx[..last].iter().zip(&strides[..last]).map(|(i, s)| i * s).sum();
        let s = strides[last];
        for j in 0..out_shape[last] {
            out.push(src[base + j * s]);
        }
        // advance all but the innermost axis
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct MatMulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    trans_b: bool,
}

impl MatMulGeom {
    fn new(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(shape_err(format!("matmul inner dims differ: {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(shape_err(format!("matmul batch dims differ: {sa:?} x {sb:?}")));
        }
        Ok(Self {
            batch,
            m,
            k,
            n,
            shared_b,
            trans_b,
        })
    }

    fn b_strides(&self) -> (isize, isize) {
        // logical b is k×n
        if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }

    /// Number of effective gemm calls and the rows each covers.
    fn groups(&self) -> (usize, usize) {
        if self.shared_b {
            (1, self.batch * self.m)
        } else {
            (self.batch, self.m)
        }
    }

    fn forward<T: Scalar>(&self, a: &[T], b: &[T], c: &mut [T]) {
        let (groups, rows) = self.groups();
        let (rsb, csb) = self.b_strides();
        for g in 0..groups {
            let boff = if self.shared_b { 0 } else { g * self.k * self.n };
            // SAFETY: slices cover rows×k, k×n and rows×n row-major blocks.
            unsafe {
                T::gemm(
                    rows,
                    self.k,
                    self.n,
                    T::one(),
                    a[g * rows * self.k..].as_ptr(),
                    self.k as isize,
                    1,
                    b[boff..].as_ptr(),
                    rsb,
                    csb,
                    T::zero(),
                    c[g * rows * self.n..].as_mut_ptr(),
                    self.n as isize,
                    1,
                );
            }
        }
    }

    /// dA += dC · op(B)ᵀ
    fn grad_a<T: Scalar>(&self, gc: &[T], b: &[T], ga: &mut [T]) {
        let (groups, rows) = self.groups();
        let (rsb, csb) = self.b_strides();
        for g in 0..groups {
            let boff = if self.shared_b { 0 } else { g * self.k * self.n };
            // op(B)ᵀ is n×k: swap the logical strides
            unsafe {
                T::gemm(
                    rows,
                    self.n,
                    self.k,
                    T::one(),
                    gc[g * rows * self.n..].as_ptr(),
                    self.n as isize,
                    1,
                    b[boff..].as_ptr(),
                    csb,
                    rsb,
                    T::one(),
                    ga[g * rows * self.k..].as_mut_ptr(),
                    self.k as isize,
                    1,
                );
            }
        }
    }

    /// d op(B) += Aᵀ · dC, written back in B's storage layout.
    fn grad_b<T: Scalar>(&self, gc: &[T], a: &[T], gb: &mut [T]) {
        let (groups, rows) = self.groups();
        let (rsb, csb) = self.b_strides();
        for g in 0..groups {
            let boff = if self.shared_b { 0 } else { g * self.k * self.n };
            unsafe {
                T::gemm(
                    self.k,
                    rows,
                    self.n,
                    T::one(),
                    a[g * rows * self.k..].as_ptr(),
                    1,
                    self.k as isize,
                    gc[g * rows * self.n..].as_ptr(),
                    self.n as isize,
                    1,
                    T::one(),
                    gb[boff..].as_mut_ptr(),
                    rsb,
                    csb,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.5..1.5)).collect())
    }

    /// Checks `∂(w · f(inputs))/∂inputs` against central differences.
    fn fd_check(inputs: Vec<Tensor<f64>>, build: &Build<'_>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eval = |vals: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
            let out = build(&mut tape, &vars).unwrap();
            (tape, vars, out)
        };
        let (tape, vars, out) = eval(&inputs);
        let w: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = tape.backward(out, Some(&w)).unwrap();
        let objective = |vals: &[Tensor<f64>]| -> f64 {
            let (tape, _, out) = eval(vals);
            tape.value(out).data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let err = (fd - analytic[i]).abs();
                assert!(
                    err <= 1e-4 * fd.abs().max(analytic[i].abs()) + 1e-8,
                    "input {k} entry {i}: fd {fd} analytic {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![3]), false);
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![2, 4], 3.25), false);
        let y = tape.layer_norm(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s, None).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]), true);
        let b = tape.leaf(Tensor::zeros(vec![2, 3]), true);
        let c = tape.leaf(Tensor::zeros(vec![4]), true);
        assert!(matches!(tape.matmul(a, b, false), Err(Error::ShapeMismatch(_))));
        assert!(tape.add(a, c).is_err());
        assert!(tape.reshape(a, vec![5]).is_err());
        assert!(tape.permute(a, &[0, 0]).is_err());
        assert!(tape.gather(a, &[2]).is_err());
        assert!(tape.concat(a, c).is_err());
        assert!(tape.backward(a, None).is_err());
    }

    #[test]
    fn matmul_variants_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        fd_check(vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 5])], &|t, v| t.matmul(v[0], v[1], false), 2);
        fd_check(vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[4, 2])], &|t, v| t.matmul(v[0], v[1], false), 3);
        fd_check(vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 4, 2])], &|t, v| t.matmul(v[0], v[1], false), 4);
        fd_check(vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 5, 4])], &|t, v| t.matmul(v[0], v[1], true), 5);
        fd_check(vec![random(&mut rng, &[3, 4]), random(&mut rng, &[6, 4])], &|t, v| t.matmul(v[0], v[1], true), 6);
    }

    #[test]
    fn repeated_inputs_accumulate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        fd_check(
            vec![random(&mut rng, &[3, 3])],
            &|t, v| {
                let p = t.matmul(v[0], v[0], true)?;
                let q = t.mul(p, v[0])?;
                t.add(q, v[0])
            },
            8,
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn elementwise_primitives_match_finite_differences(rows in 1usize..5, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[rows, cols]);
            let b_full = random(&mut rng, &[rows, cols]);
            let b_row = random(&mut rng, &[cols]);
            fd_check(vec![a.clone(), b_full.clone()], &|t, v| t.add(v[0], v[1]), seed);
            fd_check(vec![a.clone(), b_row.clone()], &|t, v| t.add(v[0], v[1]), seed);
            fd_check(vec![a.clone(), b_full], &|t, v| t.mul(v[0], v[1]), seed);
            fd_check(vec![a.clone(), b_row], &|t, v| t.mul(v[0], v[1]), seed);
            fd_check(vec![a.clone()], &|t, v| Ok(t.scale(v[0], -0.7)), seed);
            fd_check(vec![a.clone()], &|t, v| Ok(t.softmax(v[0])), seed);
            fd_check(vec![a.clone()], &|t, v| Ok(t.gelu(v[0])), seed);
            fd_check(vec![a.clone()], &|t, v| Ok(t.sum(v[0])), seed);
            if cols > 1 {
                fd_check(vec![a], &|t, v| Ok(t.layer_norm(v[0])), seed);
            }
        }

        #[test]
        fn structural_primitives_match_finite_differences(
            d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4,
            perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[d0, d1, d2]);
            let b = random(&mut rng, &[2, d1, d2]);
            let rows: Vec<usize> = (0..d0 + 2).map(|_| rng.random_range(0..d0)).collect();
            fd_check(vec![a.clone()], &|t, v| t.reshape(v[0], vec![d1 * d0, d2]), seed);
            fd_check(vec![a.clone()], &move |t, v| t.permute(v[0], &perm), seed);
            fd_check(vec![a.clone()], &move |t, v| t.gather(v[0], &rows), seed);
            fd_check(vec![a, b], &|t, v| t.concat(v[0], v[1]), seed);
        }

        #[test]
        fn matmul_matches_finite_differences(m in 1usize..4, k in 1usize..4, n in 1usize..4, batch in 1usize..3, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            fd_check(vec![random(&mut rng, &[batch, m, k]), random(&mut rng, &[batch, n, k])], &|t, v| t.matmul(v[0], v[1], true), seed);
            fd_check(vec![random(&mut rng, &[batch, m, k]), random(&mut rng, &[k, n])], &|t, v| t.matmul(v[0], v[1], false), seed);
        }
    }
}
