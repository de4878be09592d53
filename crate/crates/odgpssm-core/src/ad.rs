//! Reverse-mode automatic differentiation on a flat scalar tape.
//!
//! The model math is written once, generic over [`Scalar`], and instantiated
//! either with plain `f64` (fast evaluation, no recording) or with [`Var`]
//! (records every operation on a [`Tape`] so a single backward sweep yields
//! exact gradients of the recorded expression).
//!
//! Most nodes are unary/binary with precomputed local partials. The inner
//! loops of GP prediction are dominated by reductions, so the tape also
//! supports fused variable-arity nodes ([`Scalar::dot`],
//! [`Scalar::weighted_sqdist`]) that record one node per reduction instead
//! of one per scalar multiply; their `(parent, partial)` lists live in side
//! arrays. Tapes are single-threaded; concurrent gradient work uses one
//! tape per worker.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Sentinel parent index for "no parent" slots.
const NONE: u32 = u32::MAX;
/// Marker in `parents[0]` for fused nodes whose `(parent, partial)` pairs
/// live in the side arrays: `parents[1]` is the offset, `partials[0]` the
/// pair count.
const FUSED: u32 = u32::MAX - 1;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

#[derive(Default)]
struct TapeData {
    nodes: Vec<Node>,
    fused_parents: Vec<u32>,
    fused_partials: Vec<f64>,
}

/// Records the computation graph for one scalar-valued expression.
#[derive(Default)]
pub struct Tape {
    data: RefCell<TapeData>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.data.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops all recorded nodes but keeps the allocations.
    pub fn clear(&self) {
        let mut data = self.data.borrow_mut();
        data.nodes.clear();
        data.fused_parents.clear();
        data.fused_partials.clear();
    }

    /// Creates a differentiable input variable holding `value`.
    pub fn input(&self, value: f64) -> Var<'_> {
        let index = self.push([NONE, NONE], [0.0, 0.0]);
        Var {
            value,
            index,
            tape: Some(self),
        }
    }

    fn push(&self, parents: [u32; 2], partials: [f64; 2]) -> u32 {
        let mut data = self.data.borrow_mut();
        let index = data.nodes.len();
        assert!(index < FUSED as usize, "tape overflow");
        data.nodes.push(Node { parents, partials });
        index as u32
    }

    /// Records a fused node; `fill` appends the `(parent, partial)` pairs.
    fn push_fused(&self, value: f64, fill: impl FnOnce(&mut Vec<u32>, &mut Vec<f64>)) -> Var<'_> {
        let mut data = self.data.borrow_mut();
        let data = &mut *data;
        let offset = data.fused_parents.len();
        fill(&mut data.fused_parents, &mut data.fused_partials);
        debug_assert_eq!(data.fused_parents.len(), data.fused_partials.len());
        let count = data.fused_parents.len() - offset;
        assert!(offset <= u32::MAX as usize, "fused argument overflow");
        let index = data.nodes.len();
        assert!(index < FUSED as usize, "tape overflow");
        data.nodes.push(Node {
            parents: [FUSED, offset as u32],
            partials: [count as f64, 0.0],
        });
        Var {
            value,
            index: index as u32,
            tape: Some(self),
        }
    }

    /// Adjoints of every node with respect to `output`, by one reverse sweep.
    ///
    /// Read entries off the result with [`Var::index_in`] or use
    /// [`Tape::gradient_into`] with a reusable buffer.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        let mut adjoints = Vec::new();
        self.gradient_into(output, &mut adjoints);
        adjoints
    }

    /// Same as [`Tape::gradient`] but reuses `adjoints` storage.
    pub fn gradient_into(&self, output: Var<'_>, adjoints: &mut Vec<f64>) {
        let data = self.data.borrow();
        adjoints.clear();
        adjoints.resize(data.nodes.len(), 0.0);
        let out = match output.tape {
            Some(tape) => {
                assert!(
                    std::ptr::eq(tape, self),
                    "output variable belongs to a different tape"
                );
                output.index as usize
            }
            // A constant output: all gradients are zero.
            None => return,
        };
        adjoints[out] = 1.0;
        for i in (0..=out).rev() {
            let a = adjoints[i];
            if a == 0.0 {
                continue;
            }
            let node = data.nodes[i];
            if node.parents[0] == FUSED {
                let offset = node.parents[1] as usize;
                let count = node.partials[0] as usize;
                for k in offset..offset + count {
                    adjoints[data.fused_parents[k] as usize] += a * data.fused_partials[k];
                }
            } else {
                if node.parents[0] != NONE {
                    adjoints[node.parents[0] as usize] += a * node.partials[0];
                }
                if node.parents[1] != NONE {
                    adjoints[node.parents[1] as usize] += a * node.partials[1];
                }
            }
        }
    }
}

/// A scalar tracked on a [`Tape`], or a free constant when `tape` is `None`.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    value: f64,
    index: u32,
    tape: Option<&'t Tape>,
}

impl<'t> Var<'t> {
    /// A constant not attached to any tape. Gradients through it are zero.
    pub fn constant(value: f64) -> Self {
        Var {
            value,
            index: NONE,
            tape: None,
        }
    }

    pub fn value(self) -> f64 {
        self.value
    }

    /// Adjoint of this variable in a gradient vector produced by
    /// [`Tape::gradient`].
    pub fn index_in(self, adjoints: &[f64]) -> f64 {
        match self.tape {
            Some(_) => adjoints[self.index as usize],
            None => 0.0,
        }
    }

    fn unary(self, value: f64, partial: f64) -> Self {
        match self.tape {
            Some(tape) => Var {
                value,
                index: tape.push([self.index, NONE], [partial, 0.0]),
                tape: Some(tape),
            },
            None => Var::constant(value),
        }
    }

    fn binary(self, rhs: Var<'t>, value: f64, da: f64, db: f64) -> Self {
        match (self.tape, rhs.tape) {
            (Some(tape), Some(other)) => {
                debug_assert!(std::ptr::eq(tape, other), "mixed tapes");
                Var {
                    value,
                    index: tape.push([self.index, rhs.index], [da, db]),
                    tape: Some(tape),
                }
            }
            (Some(_), None) => self.unary(value, da),
            (None, Some(_)) => rhs.unary(value, db),
            (None, None) => Var::constant(value),
        }
    }
}

fn tape_of<'t>(slices: &[&[Var<'t>]]) -> Option<&'t Tape> {
    for s in slices {
        for v in *s {
            if let Some(t) = v.tape {
                return Some(t);
            }
        }
    }
    None
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let inv = 1.0 / rhs.value;
        self.binary(rhs, self.value * inv, inv, -self.value * inv * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        let inv = 1.0 / rhs;
        self.unary(self.value * inv, inv)
    }
}

/// The scalar abstraction the model math is written against.
///
/// `f64` evaluates directly; [`Var`] additionally records onto its tape.
/// Control flow (jitter escalation, convergence checks) always branches on
/// [`Scalar::value`], so both instantiations trace the same operation
/// sequence for identical inputs. The default reduction implementations
/// keep the same accumulation order as the fused `Var` overrides, so both
/// instantiations produce identical values.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Lifts a plain float into this scalar type as a constant.
    fn konst(value: f64) -> Self;
    /// The primal value, used for branching and diagnostics.
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::konst(0.0)
    }

    fn sq(self) -> Self {
        self * self
    }

    /// `sum_i a_i b_i`, recorded as one fused node on the tape.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = Self::zero();
        for (&x, &y) in a.iter().zip(b) {
            acc = acc + x * y;
        }
        acc
    }

    /// `sum_i w_i (x_i - z_i)^2`, recorded as one fused node on the tape.
    fn weighted_sqdist(x: &[Self], z: &[Self], w: &[Self]) -> Self {
        debug_assert_eq!(x.len(), z.len());
        debug_assert_eq!(x.len(), w.len());
        let mut acc = Self::zero();
        for i in 0..x.len() {
            let d = x[i] - z[i];
            acc = acc + w[i] * d.sq();
        }
        acc
    }

    /// Symmetric quadratic form `kᵀ P k`, recorded as one fused node.
    fn quad_form(p: &crate::linalg::Mat<Self>, k: &[Self]) -> Self {
        let n = k.len();
        debug_assert_eq!(p.rows(), n);
        debug_assert_eq!(p.cols(), n);
        let mut acc = Self::zero();
        for i in 0..n {
            acc = acc + Self::dot(p.row(i), k) * k[i];
        }
        acc
    }
}

impl Scalar for f64 {
    fn konst(value: f64) -> Self {
        value
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += a[i] * b[i];
        }
        acc
    }

    fn weighted_sqdist(x: &[Self], z: &[Self], w: &[Self]) -> Self {
        let mut acc = 0.0;
        for i in 0..x.len() {
            let d = x[i] - z[i];
            acc += w[i] * d * d;
        }
        acc
    }

    fn quad_form(p: &crate::linalg::Mat<Self>, k: &[Self]) -> Self {
        let n = k.len();
        let mut acc = 0.0;
        for i in 0..n {
            acc += f64::dot(p.row(i), k) * k[i];
        }
        acc
    }
}

impl<'t> Scalar for Var<'t> {
    fn konst(value: f64) -> Self {
        Var::constant(value)
    }

    fn value(self) -> f64 {
        Var::value(self)
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }

    fn ln(self) -> Self {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        self.unary(r, 0.5 / r)
    }

    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += a[i].value * b[i].value;
        }
        match tape_of(&[a, b]) {
            Some(tape) => tape.push_fused(acc, |parents, partials| {
                for i in 0..a.len() {
                    if a[i].tape.is_some() {
                        parents.push(a[i].index);
                        partials.push(b[i].value);
                    }
                    if b[i].tape.is_some() {
                        parents.push(b[i].index);
                        partials.push(a[i].value);
                    }
                }
            }),
            None => Var::constant(acc),
        }
    }

    fn weighted_sqdist(x: &[Self], z: &[Self], w: &[Self]) -> Self {
        debug_assert_eq!(x.len(), z.len());
        debug_assert_eq!(x.len(), w.len());
        let mut acc = 0.0;
        for i in 0..x.len() {
            let d = x[i].value - z[i].value;
            acc += w[i].value * d * d;
        }
        match tape_of(&[x, z, w]) {
            Some(tape) => tape.push_fused(acc, |parents, partials| {
                for i in 0..x.len() {
                    let d = x[i].value - z[i].value;
                    let wd2 = 2.0 * w[i].value * d;
                    if x[i].tape.is_some() {
                        parents.push(x[i].index);
                        partials.push(wd2);
                    }
                    if z[i].tape.is_some() {
                        parents.push(z[i].index);
                        partials.push(-wd2);
                    }
                    if w[i].tape.is_some() {
                        parents.push(w[i].index);
                        partials.push(d * d);
                    }
                }
            }),
            None => Var::constant(acc),
        }
    }

    fn quad_form(p: &crate::linalg::Mat<Self>, k: &[Self]) -> Self {
        let n = k.len();
        debug_assert_eq!(p.rows(), n);
        debug_assert_eq!(p.cols(), n);
        // Values first: pk = P k and the form itself.
        let mut pk = vec![0.0; n];
        let mut acc = 0.0;
        for i in 0..n {
            let row = p.row(i);
            let mut s = 0.0;
            for j in 0..n {
                s += row[j].value * k[j].value;
            }
            pk[i] = s;
            acc += s * k[i].value;
        }
        let mut slices: Vec<&[Var<'t>]> = Vec::with_capacity(n + 1);
        slices.push(k);
        for i in 0..n {
            slices.push(p.row(i));
        }
        match tape_of(&slices) {
            Some(tape) => tape.push_fused(acc, |parents, partials| {
                // d/dk_i = 2 (P k)_i for symmetric P.
                for i in 0..n {
                    if k[i].tape.is_some() {
                        parents.push(k[i].index);
                        partials.push(2.0 * pk[i]);
                    }
                }
                for i in 0..n {
                    let row = p.row(i);
                    for j in 0..n {
                        if row[j].tape.is_some() {
                            parents.push(row[j].index);
                            partials.push(k[i].value * k[j].value);
                        }
                    }
                }
            }),
            None => Var::constant(acc),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.input(3.0);
        let y = tape.input(-2.0);
        let z = x * y + x;
        assert_eq!(z.value(), -3.0);
        let g = tape.gradient(z);
        assert_eq!(x.index_in(&g), -1.0); // d/dx (xy + x) = y + 1
        assert_eq!(y.index_in(&g), 3.0); // d/dy (xy + x) = x
    }

    #[test]
    fn chained_transcendentals_match_finite_differences() {
        let f64_version = |x: f64| ((x.exp() + 1.0).ln() * x.tanh()).sqrt();
        let tape = Tape::new();
        let x = tape.input(0.7);
        let y = ((x.exp() + 1.0).ln() * x.tanh()).sqrt();
        assert!((y.value() - f64_version(0.7)).abs() < 1e-15);
        let g = tape.gradient(y);
        let fd = finite_diff(f64_version, 0.7);
        assert!(
            (x.index_in(&g) - fd).abs() < 1e-8,
            "ad {} vs fd {}",
            x.index_in(&g),
            fd
        );
    }

    #[test]
    fn constants_do_not_accumulate_gradient() {
        let tape = Tape::new();
        let x = tape.input(2.0);
        let c = Var::constant(5.0);
        let y = x * c + c;
        let g = tape.gradient(y);
        assert_eq!(x.index_in(&g), 5.0);
        assert_eq!(c.index_in(&g), 0.0);
        assert_eq!(y.value(), 15.0);
    }

    #[test]
    fn fanout_accumulates() {
        let tape = Tape::new();
        let x = tape.input(1.5);
        let y = x * x * x; // x^3, dy/dx = 3x^2
        let g = tape.gradient(y);
        assert!((x.index_in(&g) - 3.0 * 1.5 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn division_partials() {
        let tape = Tape::new();
        let a = tape.input(3.0);
        let b = tape.input(4.0);
        let y = a / b;
        let g = tape.gradient(y);
        assert!((a.index_in(&g) - 0.25).abs() < 1e-15);
        assert!((b.index_in(&g) + 3.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn tape_reuse_after_clear() {
        let tape = Tape::new();
        for _ in 0..3 {
            tape.clear();
            let x = tape.input(2.0);
            let y = x * x;
            let g = tape.gradient(y);
            assert_eq!(x.index_in(&g), 4.0);
        }
    }

    #[test]
    fn generic_code_agrees_between_f64_and_var() {
        fn poly<T: Scalar>(x: T, y: T) -> T {
            (x * y + x.exp() * 0.5 - y.sq()) / 3.0 + 1.0
        }
        let plain = poly(1.2_f64, -0.4);
        let tape = Tape::new();
        let traced = poly(tape.input(1.2), tape.input(-0.4));
        assert_eq!(plain, traced.value());
    }

    #[test]
    fn fused_dot_value_and_gradient() {
        let tape = Tape::new();
        let a: Vec<Var> = [1.0, -2.0, 0.5].iter().map(|&v| tape.input(v)).collect();
        let b: Vec<Var> = [3.0, 0.25, -1.0].iter().map(|&v| tape.input(v)).collect();
        let y = Scalar::dot(&a, &b);
        assert_eq!(y.value(), f64::dot(&[1.0, -2.0, 0.5], &[3.0, 0.25, -1.0]));
        let g = tape.gradient(y);
        for i in 0..3 {
            assert_eq!(a[i].index_in(&g), b[i].value());
            assert_eq!(b[i].index_in(&g), a[i].value());
        }
    }

    #[test]
    fn fused_dot_with_shared_operand_accumulates() {
        // dot(a, a) = sum a_i^2: gradient 2 a_i through both partial slots.
        let tape = Tape::new();
        let a: Vec<Var> = [1.5, -0.5].iter().map(|&v| tape.input(v)).collect();
        let y = Scalar::dot(&a, &a);
        let g = tape.gradient(y);
        for i in 0..2 {
            assert_eq!(a[i].index_in(&g), 2.0 * a[i].value());
        }
    }

    #[test]
    fn fused_dot_skips_constants() {
        let tape = Tape::new();
        let x = tape.input(2.0);
        let a = [x, Var::constant(3.0)];
        let b = [Var::constant(4.0), Var::constant(5.0)];
        let y = Scalar::dot(&a, &b);
        assert_eq!(y.value(), 23.0);
        let g = tape.gradient(y);
        assert_eq!(x.index_in(&g), 4.0);
    }

    #[test]
    fn fused_weighted_sqdist_gradients_match_finite_differences() {
        let xv = [0.3, -1.1];
        let zv = [0.8, 0.2];
        let wv = [2.0, 0.7];
        let tape = Tape::new();
        let x: Vec<Var> = xv.iter().map(|&v| tape.input(v)).collect();
        let z: Vec<Var> = zv.iter().map(|&v| tape.input(v)).collect();
        let w: Vec<Var> = wv.iter().map(|&v| tape.input(v)).collect();
        let y = Scalar::weighted_sqdist(&x, &z, &w);
        assert_eq!(y.value(), f64::weighted_sqdist(&xv, &zv, &wv));
        let g = tape.gradient(y);
        for i in 0..2 {
            let d = xv[i] - zv[i];
            assert!((x[i].index_in(&g) - 2.0 * wv[i] * d).abs() < 1e-14);
            assert!((z[i].index_in(&g) + 2.0 * wv[i] * d).abs() < 1e-14);
            assert!((w[i].index_in(&g) - d * d).abs() < 1e-14);
        }
    }

    #[test]
    fn fused_quad_form_value_and_gradient() {
        use crate::linalg::Mat;
        let tape = Tape::new();
        // Symmetric 3x3.
        let vals = [[2.0, 0.5, -0.3], [0.5, 1.5, 0.2], [-0.3, 0.2, 1.0]];
        let p = Mat::from_fn(3, 3, |i, j| tape.input(vals[i][j]));
        let kv = [0.7, -1.2, 0.4];
        let k: Vec<Var> = kv.iter().map(|&v| tape.input(v)).collect();
        let y = Scalar::quad_form(&p, &k);

        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                want += vals[i][j] * kv[i] * kv[j];
            }
        }
        assert!((y.value() - want).abs() < 1e-14);

        let g = tape.gradient(y);
        for i in 0..3 {
            let pk: f64 = (0..3).map(|j| vals[i][j] * kv[j]).sum();
            assert!((k[i].index_in(&g) - 2.0 * pk).abs() < 1e-13);
            for j in 0..3 {
                assert!((p[(i, j)].index_in(&g) - kv[i] * kv[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn fused_and_elementwise_reductions_agree() {
        let tape = Tape::new();
        let a: Vec<Var> = (0..7).map(|i| tape.input(0.3 * i as f64 - 1.0)).collect();
        let b: Vec<Var> = (0..7).map(|i| tape.input(0.1 * i as f64 + 0.4)).collect();
        let fused = Scalar::dot(&a, &b);
        let mut plain = Var::constant(0.0);
        for i in 0..7 {
            plain = plain + a[i] * b[i];
        }
        assert!((fused.value() - plain.value()).abs() < 1e-15);
        let gf = tape.gradient(fused);
        let gp = tape.gradient(plain);
        for i in 0..7 {
            assert!((a[i].index_in(&gf) - a[i].index_in(&gp)).abs() < 1e-15);
        }
    }
}
