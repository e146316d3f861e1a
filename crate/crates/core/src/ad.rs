//! Reverse-mode automatic differentiation on a thread-local tape.
//!
//! [`Var`] is a `Copy` scalar that records one node per elementary operation.
//! Large vector operations (the REN step) are recorded as a single block node
//! with a hand-written vector-Jacobian product, see [`BlockOp`].
//!
//! A tape is owned by one thread. Open a [`Session`] before building a graph;
//! the tape is cleared when the session ends.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::math::{softplus_f64, Real};

const NONE: u32 = u32::MAX;
const BLOCK_HEAD: u32 = u32::MAX - 1;
const BLOCK_TAIL: u32 = u32::MAX - 2;

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    b: u32,
    da: f64,
    db: f64,
}

/// Vector-Jacobian product of a multi-output tape node.
pub trait BlockOp {
    /// `out_adj` holds the adjoints of the block outputs in recording order.
    /// Adjoints of the block inputs are *added* into `in_adj`.
    fn backward(&mut self, out_adj: &[f64], in_adj: &mut [f64]);
}

struct Block {
    inputs: Vec<u32>,
    n_out: usize,
    op: Box<dyn BlockOp>,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    blocks: Vec<Block>,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

/// Differentiable scalar. Constants carry no tape index.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: u32,
    val: f64,
}

impl Var {
    pub fn constant(val: f64) -> Self {
        Self { idx: NONE, val }
    }

    /// New independent variable on the current tape.
    pub fn input(val: f64) -> Self {
        let idx = push(Node {
            a: NONE,
            b: NONE,
            da: 0.0,
            db: 0.0,
        });
        Self { idx, val }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == NONE
    }

    pub fn index(&self) -> Option<usize> {
        (!self.is_constant()).then_some(self.idx as usize)
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Self {
        if self.is_constant() {
            return Self::constant(val);
        }
        let idx = push(Node {
            a: self.idx,
            b: NONE,
            da: d,
            db: 0.0,
        });
        Self { idx, val }
    }

    #[inline]
    fn binary(self, o: Self, val: f64, da: f64, db: f64) -> Self {
        match (self.is_constant(), o.is_constant()) {
            (true, true) => Self::constant(val),
            (false, true) => self.unary(val, da),
            (true, false) => o.unary(val, db),
            (false, false) => {
                let idx = push(Node {
                    a: self.idx,
                    b: o.idx,
                    da,
                    db,
                });
                Self { idx, val }
            }
        }
    }
}

#[inline]
fn push(node: Node) -> u32 {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let idx = t.nodes.len();
        assert!(idx < BLOCK_TAIL as usize, "tape overflow");
        t.nodes.push(node);
        idx as u32
    })
}

/// Record a block node. Returns the output variables, one per entry of
/// `out_vals`. Constant inputs receive no adjoint.
pub fn push_block(inputs: &[Var], out_vals: &[f64], op: Box<dyn BlockOp>) -> Vec<Var> {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let block_id = t.blocks.len() as u32;
        let first = t.nodes.len();
        for k in 0..out_vals.len() {
            t.nodes.push(Node {
                a: if k == 0 { BLOCK_HEAD } else { BLOCK_TAIL },
                b: block_id,
                da: 0.0,
                db: 0.0,
            });
        }
        t.blocks.push(Block {
            inputs: inputs.iter().map(|v| v.idx).collect(),
            n_out: out_vals.len(),
            op,
        });
        out_vals
            .iter()
            .enumerate()
            .map(|(k, &val)| Var {
                idx: (first + k) as u32,
                val,
            })
            .collect()
    })
}

/// Scope of one recorded computation. Dropping it clears the tape.
pub struct Session {
    _private: (),
}

impl Session {
    pub fn new() -> Self {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            t.nodes.clear();
            t.blocks.clear();
        });
        Self { _private: () }
    }

    pub fn len(&self) -> usize {
        TAPE.with(|t| t.borrow().nodes.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adjoints of every tape entry with respect to `output`.
    pub fn gradient(&self, output: Var) -> Adjoints {
        let mut adj = vec![0.0; self.len()];
        let Some(out) = output.index() else {
            return Adjoints { adj };
        };
        adj[out] = 1.0;
        TAPE.with(|t| {
            let mut guard = t.borrow_mut();
            let tape = &mut *guard;
            let mut in_adj = Vec::new();
            for i in (0..=out).rev() {
                let node = tape.nodes[i];
                match node.a {
                    BLOCK_TAIL => {}
                    BLOCK_HEAD => {
                        let block = &mut tape.blocks[node.b as usize];
                        let out_adj = &adj[i..i + block.n_out];
                        if out_adj.iter().all(|&g| g == 0.0) {
                            continue;
                        }
                        in_adj.clear();
                        in_adj.resize(block.inputs.len(), 0.0);
                        block.op.backward(out_adj, &mut in_adj);
                        for (&src, &g) in block.inputs.iter().zip(&in_adj) {
                            if src != NONE {
                                adj[src as usize] += g;
                            }
                        }
                    }
                    _ => {
                        let g = adj[i];
                        if g == 0.0 {
                            continue;
                        }
                        if node.a != NONE {
                            adj[node.a as usize] += node.da * g;
                        }
                        if node.b != NONE {
                            adj[node.b as usize] += node.db * g;
                        }
                    }
                }
            }
        });
        Adjoints { adj }
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            t.nodes.clear();
            t.nodes.shrink_to(1 << 20);
            t.blocks.clear();
        });
    }
}

pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    pub fn of(&self, v: Var) -> f64 {
        v.index().map_or(0.0, |i| self.adj[i])
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, o: Var) -> Var {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, o: Var) -> Var {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, o: Var) -> Var {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, o: Var) -> Var {
        let val = self.val / o.val;
        self.binary(o, val, 1.0 / o.val, -val / o.val)
    }
}

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

impl Add<f64> for Var {
    type Output = Var;
    #[inline]
    fn add(self, c: f64) -> Var {
        self.unary(self.val + c, 1.0)
    }
}

impl Sub<f64> for Var {
    type Output = Var;
    #[inline]
    fn sub(self, c: f64) -> Var {
        self.unary(self.val - c, 1.0)
    }
}

impl Mul<f64> for Var {
    type Output = Var;
    #[inline]
    fn mul(self, c: f64) -> Var {
        self.unary(self.val * c, c)
    }
}

impl Div<f64> for Var {
    type Output = Var;
    #[inline]
    fn div(self, c: f64) -> Var {
        self.unary(self.val / c, 1.0 / c)
    }
}

impl Real for Var {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }

    #[inline]
    fn value(self) -> f64 {
        self.val
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }

    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }

    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }

    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }

    fn atan2(self, x: Self) -> Self {
        let (y, xv) = (self.val, x.val);
        let r2 = y * y + xv * xv;
        self.binary(x, y.atan2(xv), xv / r2, -y / r2)
    }

    fn softplus(self) -> Self {
        // d/dx ln(1+e^x) = logistic(x)
        let sig = if self.val >= 0.0 {
            1.0 / (1.0 + (-self.val).exp())
        } else {
            let e = self.val.exp();
            e / (1.0 + e)
        };
        self.unary(softplus_f64(self.val), sig)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn f<T: Real>(x: T, y: T) -> T {
        (x * y).sin() + (x / y).tanh() * x.exp() - y.atan2(x).sqrt() * 0.5 + (x - y).softplus()
    }

    #[test]
    fn matches_finite_differences() {
        let (x0, y0) = (0.7, 1.3);
        let s = Session::new();
        let (x, y) = (Var::input(x0), Var::input(y0));
        let out = f(x, y);
        assert_eq!(out.value(), f(x0, y0));
        let g = s.gradient(out);
        let h = 1e-6;
        let fx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let fy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert_relative_eq!(g.of(x), fx, max_relative = 1e-8);
        assert_relative_eq!(g.of(y), fy, max_relative = 1e-8);
    }

    struct Scale2 {
        k: f64,
    }

    impl BlockOp for Scale2 {
        fn backward(&mut self, out_adj: &[f64], in_adj: &mut [f64]) {
            in_adj[0] += self.k * (out_adj[0] + out_adj[1]);
        }
    }

    #[test]
    fn block_node_chains() {
        let s = Session::new();
        let x = Var::input(2.0);
        let outs = push_block(&[x], &[6.0, 6.0], Box::new(Scale2 { k: 3.0 }));
        let y = outs[0] * outs[1] + x;
        let g = s.gradient(y);
        // y = 9x² + x
        assert_relative_eq!(g.of(x), 18.0 * 2.0 + 1.0);
    }

    #[test]
    fn constants_do_not_grow_tape() {
        let s = Session::new();
        let a = Var::constant(1.0) + Var::constant(2.0) * 3.0;
        assert!(a.is_constant());
        assert_eq!(s.len(), 0);
    }
}
