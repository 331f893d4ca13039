//! Broadcasting binary ops and pointwise unary ops.

use crate::array::{numel, strides_of, Array};
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// NumPy-style broadcast of two shapes (aligned from the right).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(op, format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// For each flat output index, the flat index into an input of `in_shape`
/// broadcast to `out_shape`. `None` when no broadcasting happens.
pub(crate) fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape == out_shape {
        return None;
    }
    let nd = out_shape.len();
    let pad = nd - in_shape.len();
    let in_strides = strides_of(in_shape);
    let mut strides = vec![0; nd];
    for d in 0..in_shape.len() {
        if in_shape[d] != 1 {
            strides[d + pad] = in_strides[d];
        }
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

/// Sums a gradient of the broadcast shape back onto the input shape.
pub(crate) fn reduce_to<T: Scalar>(grad: &Array<T>, map: Option<&[usize]>, in_shape: &[usize]) -> Array<T> {
    match map {
        None => grad.clone(),
        Some(map) => {
            let mut out = Array::zeros(in_shape);
            let o = out.data_mut();
            for (&m, &g) in map.iter().zip(grad.data()) {
                o[m] += g;
            }
            out
        }
    }
}

fn gather_broadcast<T: Scalar>(x: &Array<T>, map: Option<&[usize]>) -> Vec<T> {
    match map {
        None => x.data().to_vec(),
        Some(map) => map.iter().map(|&m| x.data()[m]).collect(),
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// Partial derivatives (d/da, d/db).
    #[inline]
    fn partials<T: Scalar>(self, a: T, b: T) -> (T, T) {
        match self {
            BinOp::Add => (T::one(), T::one()),
            BinOp::Sub => (T::one(), -T::one()),
            BinOp::Mul => (b, a),
            BinOp::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let name = op.name();
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(name, va.shape(), vb.shape())?;
        let map_a = broadcast_map(va.shape(), &out_shape);
        let map_b = broadcast_map(vb.shape(), &out_shape);
        let xa = gather_broadcast(va, map_a.as_deref());
        let xb = gather_broadcast(vb, map_b.as_deref());
        let data = xa.iter().zip(&xb).map(|(&x, &y)| op.apply(x, y)).collect();
        let value = Array::new(out_shape, data)?;
        self.custom(
            name,
            &[a, b],
            value,
            Box::new(move |g, p, _| {
                let xa = gather_broadcast(p[0], map_a.as_deref());
                let xb = gather_broadcast(p[1], map_b.as_deref());
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(g.len());
                for ((&gv, &x), &y) in g.data().iter().zip(&xa).zip(&xb) {
                    let (da, db) = op.partials(x, y);
                    ga.push(gv * da);
                    gb.push(gv * db);
                }
                let ga = Array::new(g.shape(), ga).expect("grad shape");
                let gb = Array::new(g.shape(), gb).expect("grad shape");
                vec![
                    Some(reduce_to(&ga, map_a.as_deref(), p[0].shape())),
                    Some(reduce_to(&gb, map_b.as_deref(), p[1].shape())),
                ]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    /// Pointwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary<F, D>(&mut self, op: &'static str, x: Var, f: F, df: D) -> Result<Var>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let value = self.value(x).map(f);
        self.custom(
            op,
            &[x],
            value,
            Box::new(move |g, p, y| {
                let data = g
                    .data()
                    .iter()
                    .zip(p[0].data())
                    .zip(y.data())
                    .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                    .collect();
                vec![Some(Array::new(g.shape(), data).expect("grad shape"))]
            }),
        )
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, |v| -v, |_, _| -T::one())
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary("scale", x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", x, move |v| v + s, |_, _| T::one())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), |v, _| T::one() / v)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, |v| v.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, |v, _| v + v)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), |v, _| sign(v))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "softplus",
            x,
            |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p(),
            |v, _| sigmoid(v),
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "silu",
            x,
            |v| v * sigmoid(v),
            |v, _| {
                let s = sigmoid(v);
                s + v * s * (T::one() - s)
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "relu",
            x,
            |v| v.max(T::zero()),
            |v, _| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(
            "clamp",
            x,
            move |v| v.max(lo).min(hi),
            move |v, _| if v >= lo && v <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn powf(&mut self, x: Var, e: T) -> Result<Var> {
        self.unary("powf", x, move |v| v.powf(e), move |v, _| e * v.powf(e - T::one()))
    }

    /// Multiplies by a fixed array (no gradient to the array).
    pub fn mul_const(&mut self, x: Var, c: Array<T>) -> Result<Var> {
        let c = self.constant(c);
        self.mul(x, c)
    }

    pub fn add_const(&mut self, x: Var, c: Array<T>) -> Result<Var> {
        let c = self.constant(c);
        self.add(x, c)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
