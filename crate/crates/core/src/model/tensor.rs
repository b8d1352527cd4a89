//! Minimal reverse-mode autodiff over NCHW tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass in creation
//! order, which is already a topological order, so `backward` is a single
//! reverse sweep. Work is split across batch samples only; every reduction
//! over the batch runs in sample order, so results do not depend on the
//! number of threads.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar type of a tape: `f32` at runtime, `f64` for gradient checks.
pub trait Element:
    Copy
    + Send
    + Sync
    + Debug
    + Default
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * a * b + beta * c` with arbitrary strides (row, column).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln_1p(self) -> Self {
                <$t>::ln_1p(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                (rsa, csa): (isize, isize),
                b: &[Self],
                (rsb, csb): (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(span(m, k, rsa, csa) as usize <= a.len(), "gemm: lhs too short");
                assert!(span(k, n, rsb, csb) as usize <= b.len(), "gemm: rhs too short");
                assert!(m * n <= c.len(), "gemm: output too short");
                // SAFETY: the asserts above keep every strided access in bounds,
                // and `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

pub fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::ZERO {
        T::ONE / (T::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::ONE + e)
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Concat(Var, Var),
    Sigmoid(Var),
    Bce { logits: Var, target: Vec<T>, valid: Vec<bool>, count: usize },
    Sum(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::ShapeMismatch(format!("{what} must be 4-D, got {shape:?}"))),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf value. Only leaves created with `requires_grad` receive gradients.
    pub fn leaf(&mut self, shape: &[usize], value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::ShapeMismatch(format!(
                "leaf shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Stride-1 convolution with zero padding `k / 2` (odd `k`):
    /// `x[B,Cin,H,W]`, `w[Cout,Cin,k,k]`, `b[Cout]` -> `[B,Cout,H,W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, cin, h, wd) = dims4(self.shape(x), "conv2d input")?;
        let (cout, wcin, kh, kw) = dims4(self.shape(w), "conv2d weight")?;
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias {:?} should be [{cout}]",
                self.shape(b)
            )));
        }
        let k = kh;
        let hw = h * wd;
        let kk = cin * k * k;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![T::ZERO; bs * cout * hw];
        out.par_chunks_mut(cout * hw).enumerate().for_each(|(s, o)| {
            let xs = &xv[s * cin * hw..(s + 1) * cin * hw];
            for (row, &bias) in o.chunks_mut(hw).zip(bv) {
                row.fill(bias);
            }
            let cols;
            let cols_ref = if k == 1 {
                xs
            } else {
                cols = im2col(xs, cin, h, wd, k);
                &cols[..]
            };
            T::gemm(cout, kk, hw, T::ONE, wv, (kk as isize, 1), cols_ref, (hw as isize, 1), T::ONE, o);
        });
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![bs, cout, h, wd], out, Op::Conv2d { x, w, b, k }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
        let rg = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.needs(x);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    /// 2x2 max pooling with stride 2. Ties go to the first element in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.shape(x), "maxpool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("maxpool2 needs even H, W, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bs * c * oh * ow);
        let mut argmax = Vec::with_capacity(bs * c * oh * ow);
        for plane in 0..bs * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(vec![bs, c, oh, ow], out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.shape(x), "upsample2 input")?;
        let xv = self.value(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::ZERO; bs * c * oh * ow];
        for plane in 0..bs * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(vec![bs, c, oh, ow], out, Op::Upsample2(x), rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = dims4(self.shape(a), "concat lhs")?;
        let (bb, cb, hb, wb) = dims4(self.shape(b), "concat rhs")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::ShapeMismatch(format!(
                "concat {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let hw = ha * wa;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for s in 0..ba {
            out.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![ba, ca + cb, ha, wa], out, Op::Concat(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().fold(T::ZERO, |acc, &v| acc + v);
        let rg = self.needs(x);
        self.push(vec![1], vec![total], Op::Sum(x), rg)
    }

    /// Mean binary cross-entropy over non-ignored pixels, in the stable form
    /// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[T], ignore: &[bool]) -> Result<Var> {
        let z = self.value(logits);
        if target.len() != z.len() || ignore.len() != z.len() {
            return Err(Error::ShapeMismatch(format!(
                "bce: {} logits, {} targets, {} ignore flags",
                z.len(),
                target.len(),
                ignore.len()
            )));
        }
        let valid: Vec<bool> = ignore.iter().map(|&i| !i).collect();
        let count = valid.iter().filter(|v| **v).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut total = 0.0f64;
        for ((&zi, &yi), &ok) in z.iter().zip(target).zip(&valid) {
            if ok {
                let relu = if zi > T::ZERO { zi } else { T::ZERO };
                let l = relu - zi * yi + (-zi.abs()).exp().ln_1p();
                total += l.to_f64();
            }
        }
        let loss = T::from_f64(total / count as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                logits,
                target: target.to_vec(),
                valid,
                count,
            },
            rg,
        ))
    }

    /// Which side of every kink the tape sits on: ReLU input signs and
    /// max-pool winners. Equal patterns mean the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(x) => out.extend(self.value(*x).iter().map(|&v| u32::from(v > T::ZERO))),
                Op::MaxPool2 { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            None => node.grad = Some(delta),
        }
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(out)
            )));
        }
        self.backward_with(out, vec![T::ONE])
    }

    /// Backpropagates an explicit upstream gradient for `out`. Gradients are
    /// kept for leaves; intermediate gradients are released once consumed.
    pub fn backward_with(&mut self, out: Var, upstream: Vec<T>) -> Result<()> {
        if upstream.len() != self.value(out).len() {
            return Err(Error::ShapeMismatch("upstream gradient length".into()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[out.0].grad = Some(upstream);
        for i in (0..=out.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[T]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let x = *x;
                let d = self.value(x).iter().zip(g).map(|(&v, &gi)| if v > T::ZERO { gi } else { T::ZERO }).collect();
                self.accumulate(x, d);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let d = node.value.iter().zip(g).map(|(&y, &gi)| gi * y * (T::ONE - y)).collect();
                self.accumulate(x, d);
            }
            Op::Sum(x) => {
                let x = *x;
                let d = vec![g[0]; self.value(x).len()];
                self.accumulate(x, d);
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let mut d = vec![T::ZERO; self.value(x).len()];
                for (&idx, &gi) in argmax.iter().zip(g) {
                    d[idx as usize] += gi;
                }
                self.accumulate(x, d);
            }
            Op::Upsample2(x) => {
                let x = *x;
                let (bs, c, h, w) = dims4(self.shape(x), "upsample2 input")?;
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![T::ZERO; bs * c * h * w];
                for plane in 0..bs * c {
                    let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            dst[(i / 2) * w + j / 2] += src[i * ow + j];
                        }
                    }
                }
                self.accumulate(x, d);
            }
            Op::Concat(a, b) => {
                let (a, b) = (*a, *b);
                let (bs, ca, h, w) = dims4(self.shape(a), "concat lhs")?;
                let cb = self.shape(b)[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(bs * ca * hw);
                let mut db = Vec::with_capacity(bs * cb * hw);
                for s in 0..bs {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&g[base..base + ca * hw]);
                    db.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Bce {
                logits,
                target,
                valid,
                count,
            } => {
                let logits = *logits;
                let scale = g[0] / T::from_f64(*count as f64);
                let d = self
                    .value(logits)
                    .iter()
                    .zip(target)
                    .zip(valid)
                    .map(|((&z, &y), &ok)| if ok { (sigmoid(z) - y) * scale } else { T::ZERO })
                    .collect();
                self.accumulate(logits, d);
            }
            Op::Conv2d { x, w, b, k } => {
                let (x, w, b, k) = (*x, *w, *b, *k);
                let (dx, dw, db) = self.conv2d_backward(x, w, b, k, g)?;
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(w, dw);
                }
                if let Some(db) = db {
                    self.accumulate(b, db);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        g: &[T],
    ) -> Result<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>)> {
        let (bs, cin, h, wd) = dims4(self.shape(x), "conv2d input")?;
        let cout = self.shape(w)[0];
        let hw = h * wd;
        let kk = cin * k * k;
        let (need_x, need_w, need_b) = (self.needs(x), self.needs(w), self.needs(b));
        let xv = self.value(x);
        let wv = self.value(w);

        // Per-sample weight/bias gradients, reduced below in sample order.
        let work = |s: usize, dxs: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
            let gs = &g[s * cout * hw..(s + 1) * cout * hw];
            let xs = &xv[s * cin * hw..(s + 1) * cin * hw];
            let mut dw = Vec::new();
            if need_w {
                dw = vec![T::ZERO; cout * kk];
                let cols;
                let cols_ref = if k == 1 {
                    xs
                } else {
                    cols = im2col(xs, cin, h, wd, k);
                    &cols[..]
                };
                // dW = g * cols^T
                T::gemm(cout, hw, kk, T::ONE, gs, (hw as isize, 1), cols_ref, (1, hw as isize), T::ZERO, &mut dw);
            }
            let db = if need_b {
                gs.chunks(hw).map(|row| row.iter().fold(T::ZERO, |a, &v| a + v)).collect()
            } else {
                Vec::new()
            };
            if let Some(dxs) = dxs {
                // dcols = W^T * g
                if k == 1 {
                    T::gemm(cin, cout, hw, T::ONE, wv, (1, kk as isize), gs, (hw as isize, 1), T::ZERO, dxs);
                } else {
                    let mut dcols = vec![T::ZERO; kk * hw];
                    T::gemm(kk, cout, hw, T::ONE, wv, (1, kk as isize), gs, (hw as isize, 1), T::ZERO, &mut dcols);
                    col2im(&dcols, cin, h, wd, k, dxs);
                }
            }
            (dw, db)
        };

        let mut dx = if need_x { vec![T::ZERO; bs * cin * hw] } else { Vec::new() };
        let per_sample: Vec<(Vec<T>, Vec<T>)> = if need_x {
            dx.par_chunks_mut(cin * hw)
                .enumerate()
                .map(|(s, dxs)| work(s, Some(dxs)))
                .collect()
        } else {
            (0..bs).into_par_iter().map(|s| work(s, None)).collect()
        };

        let mut dw = need_w.then(|| vec![T::ZERO; cout * kk]);
        let mut db = need_b.then(|| vec![T::ZERO; cout]);
        for (sw, sb) in per_sample {
            if let Some(dw) = &mut dw {
                dw.iter_mut().zip(sw).for_each(|(a, v)| *a += v);
            }
            if let Some(db) = &mut db {
                db.iter_mut().zip(sb).for_each(|(a, v)| *a += v);
            }
        }
        Ok((need_x.then_some(dx), dw, db))
    }
}

/// Unfolds `x[C,H,W]` into `cols[C*k*k, H*W]` with zero padding `k / 2`.
fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::ZERO; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..((ci * k + ky) * k + kx + 1) * hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                let j_lo = (-dx).max(0) as usize;
                let j_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize || j_lo >= j_hi {
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    let dst = &mut row[i * w..(i + 1) * w];
                    let sj_lo = (j_lo as isize + dx) as usize;
                    dst[j_lo..j_hi].copy_from_slice(&src[sj_lo..sj_lo + (j_hi - j_lo)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters `cols[C*k*k, H*W]` back into `dx[C,H,W]`.
fn col2im<T: Element>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..((ci * k + ky) * k + kx + 1) * hw];
                let dy = ky as isize - p;
                let dxo = kx as isize - p;
                let j_lo = (-dxo).max(0) as usize;
                let j_hi = (w as isize - dxo).min(w as isize).max(0) as usize;
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize || j_lo >= j_hi {
                        continue;
                    }
                    let dst = &mut plane[si as usize * w..(si as usize + 1) * w];
                    let src = &row[i * w..(i + 1) * w];
                    let sj_lo = (j_lo as isize + dxo) as usize;
                    for (d, &s) in dst[sj_lo..sj_lo + (j_hi - j_lo)].iter_mut().zip(&src[j_lo..j_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}
