//! Recurrent equilibrium network (REN) with a contracting direct
//! parameterization.
//!
//! A free vector `theta` maps to explicit weights
//!
//! ```text
//! x⁺ = A x + B1 w + B2 u + bx
//! v  = C1 x + D11 w + D12 u + bv,   w = tanh(v)
//! y  = C2 x + D21 w + D22 u + by
//! ```
//!
//! with `D11` strictly lower triangular, so the equilibrium layer is solved in
//! one ordered pass. The map goes through `H = XᵀX + εI ≻ 0`, whose blocks are
//! read as an implicit model `(E, F, B1, P, Λ, C1, D11)`; positive definiteness
//! of `H` is the contraction certificate. The Lipschitz-bounded variant adds
//! a feedthrough `D22 = γN` with `‖N‖ < 1` and the corresponding correction
//! terms in `H`.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::ad::{push_block, BlockOp, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenDims {
    /// State size.
    pub n: usize,
    /// Input size.
    pub m: usize,
    /// Neuron count.
    pub q: usize,
    /// Output size.
    pub p: usize,
}

impl Default for RenDims {
    fn default() -> Self {
        Self { n: 32, m: 96, q: 256, p: 3 }
    }
}

impl RenDims {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.q == 0 || self.p == 0 {
            return Err(Error::InvalidParameter(format!("REN dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Contracting,
    /// Incremental input-output gain bounded by `gamma`.
    Lipschitz { gamma: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }

    fn read(&self, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.rows, self.cols, &theta[self.range()])
    }

    fn read_vec(&self, theta: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&theta[self.range()])
    }

    fn add(&self, out: &mut [f64], m: &DMatrix<f64>) {
        for (o, v) in out[self.range()].iter_mut().zip(m.as_slice()) {
            *o += v;
        }
    }

    fn add_vec(&self, out: &mut [f64], v: &DVector<f64>) {
        for (o, g) in out[self.range()].iter_mut().zip(v.as_slice()) {
            *o += g;
        }
    }
}

/// Position of each free block inside `theta` (column-major blocks).
#[derive(Clone, Copy, Debug)]
struct Layout {
    x: Slot,
    y1: Slot,
    b2: Slot,
    d12: Slot,
    c2: Slot,
    d21: Slot,
    /// Contracting variant only.
    d22: Option<Slot>,
    /// Lipschitz variant only: `(X3, Y3, Z3)`.
    cayley: Option<(Slot, Slot, Slot)>,
    bx: Slot,
    bv: Slot,
    by: Slot,
    len: usize,
}

impl Layout {
    fn new(d: RenDims, variant: Variant) -> Self {
        let mut off = 0;
        let mut slot = |rows, cols| {
            let s = Slot { off, rows, cols };
            off += rows * cols;
            s
        };
        let h = 2 * d.n + d.q;
        let x = slot(h, h);
        let y1 = slot(d.n, d.n);
        let b2 = slot(d.n, d.m);
        let d12 = slot(d.q, d.m);
        let c2 = slot(d.p, d.n);
        let d21 = slot(d.p, d.q);
        let (d22, cayley) = match variant {
            Variant::Contracting => (Some(slot(d.p, d.m)), None),
            Variant::Lipschitz { .. } => {
                let r = d.p.min(d.m);
                let x3 = slot(r, r);
                let y3 = slot(r, r);
                let z3 = slot(d.p.abs_diff(d.m), r);
                (None, Some((x3, y3, z3)))
            }
        };
        let bx = slot(d.n, 1);
        let bv = slot(d.q, 1);
        let by = slot(d.p, 1);
        Self {
            x,
            y1,
            b2,
            d12,
            c2,
            d21,
            d22,
            cayley,
            bx,
            bv,
            by,
            len: off,
        }
    }
}

/// Unconstrained parameter vector. Every finite `theta` is admissible.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectParams {
    pub theta: Vec<f64>,
    /// Contraction margin added to `XᵀX`.
    pub epsilon: f64,
    pub variant: Variant,
}

impl DirectParams {
    pub fn len(dims: RenDims, variant: Variant) -> usize {
        Layout::new(dims, variant).len
    }

    pub fn zeros(dims: RenDims, variant: Variant, epsilon: f64) -> Self {
        Self {
            theta: vec![0.0; Self::len(dims, variant)],
            epsilon,
            variant,
        }
    }

    /// Random initialization with the output rows scaled by `output_scale`
    /// and zero biases.
    pub fn init(dims: RenDims, variant: Variant, epsilon: f64, output_scale: f64, seed: u64) -> Self {
        let lay = Layout::new(dims, variant);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; lay.len];
        let mut fill = |s: &Slot, std: f64, theta: &mut [f64]| {
            for v in &mut theta[s.range()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
        };
        let h = (2 * dims.n + dims.q) as f64;
        let (n, m, q) = (dims.n as f64, dims.m as f64, dims.q as f64);
        fill(&lay.x, 1.0 / h.sqrt(), &mut theta);
        fill(&lay.y1, 1.0 / n.sqrt(), &mut theta);
        fill(&lay.b2, 1.0 / m.sqrt(), &mut theta);
        fill(&lay.d12, 1.0 / m.sqrt(), &mut theta);
        fill(&lay.c2, output_scale / n.sqrt(), &mut theta);
        fill(&lay.d21, output_scale / q.sqrt(), &mut theta);
        if let Some(d22) = &lay.d22 {
            fill(d22, output_scale / m.sqrt(), &mut theta);
        }
        if let Some((x3, y3, z3)) = &lay.cayley {
            let r = x3.rows as f64;
            fill(x3, 1.0 / r.sqrt(), &mut theta);
            fill(y3, 1.0 / r.sqrt(), &mut theta);
            fill(z3, 1.0 / r.sqrt(), &mut theta);
        }
        Self { theta, epsilon, variant }
    }

    /// Offset and length of the output bias `by` inside `theta`.
    pub fn output_bias_range(dims: RenDims, variant: Variant) -> std::ops::Range<usize> {
        Layout::new(dims, variant).by.range()
    }
}

/// Implicit-model quantities kept for certification.
#[derive(Clone, Debug)]
pub struct Implicit {
    pub e: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub lambda: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct RenWeights {
    pub dims: RenDims,
    pub a: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    pub d11: DMatrix<f64>,
    pub d12: DMatrix<f64>,
    pub c2: DMatrix<f64>,
    pub d21: DMatrix<f64>,
    pub d22: DMatrix<f64>,
    pub bx: DVector<f64>,
    pub bv: DVector<f64>,
    pub by: DVector<f64>,
    /// Present when the weights came out of [`materialize`].
    pub implicit: Option<Implicit>,
}

impl RenWeights {
    pub fn zeros(dims: RenDims) -> Self {
        let (n, m, q, p) = (dims.n, dims.m, dims.q, dims.p);
        Self {
            dims,
            a: DMatrix::zeros(n, n),
            b1: DMatrix::zeros(n, q),
            b2: DMatrix::zeros(n, m),
            c1: DMatrix::zeros(q, n),
            d11: DMatrix::zeros(q, q),
            d12: DMatrix::zeros(q, m),
            c2: DMatrix::zeros(p, n),
            d21: DMatrix::zeros(p, q),
            d22: DMatrix::zeros(p, m),
            bx: DVector::zeros(n),
            bv: DVector::zeros(q),
            by: DVector::zeros(p),
            implicit: None,
        }
    }

    pub fn is_strictly_lower(&self) -> bool {
        let q = self.dims.q;
        (0..q).all(|j| (0..=j).all(|i| self.d11[(i, j)] == 0.0))
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for m in [
            &mut self.a,
            &mut self.b1,
            &mut self.b2,
            &mut self.c1,
            &mut self.d11,
            &mut self.d12,
            &mut self.c2,
            &mut self.d21,
            &mut self.d22,
        ] {
            f(m.as_mut_slice());
        }
        for v in [&mut self.bx, &mut self.bv, &mut self.by] {
            f(v.as_mut_slice());
        }
    }

    /// All explicit weights flattened in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut copy = self.clone();
        copy.for_each_mut(|s| out.extend_from_slice(s));
        out
    }
}

/// Recurrent state of one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RenState {
    pub x: DVector<f64>,
}

impl RenState {
    pub fn zeros(dims: RenDims) -> Self {
        Self { x: DVector::zeros(dims.n) }
    }
}

fn gram(x: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let mut h = x.tr_mul(x);
    for i in 0..h.nrows() {
        h[(i, i)] += eps;
    }
    h
}

fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter(format!("{what} is numerically singular")))
}

/// Cayley map `N` with `‖N‖ < 1`, shape `p × m`.
fn cayley(x3: &DMatrix<f64>, y3: &DMatrix<f64>, z3: &DMatrix<f64>, dims: RenDims, eps: f64) -> Result<DMatrix<f64>> {
    let r = x3.nrows();
    let id = DMatrix::<f64>::identity(r, r);
    let mut mm = x3.tr_mul(x3) + y3 - y3.transpose() + z3.tr_mul(z3);
    for i in 0..r {
        mm[(i, i)] += eps;
    }
    let inv = inverse(&(&id + &mm), "I + M")?;
    let top = if dims.p >= dims.m { (&id - &mm) * &inv } else { &inv * (&id - &mm) };
    if dims.p == dims.m {
        return Ok(top);
    }
    let mut n = DMatrix::zeros(dims.p, dims.m);
    if dims.p > dims.m {
        n.view_mut((0, 0), (r, r)).copy_from(&top);
        n.view_mut((r, 0), (dims.p - r, r)).copy_from(&(z3 * &inv * -2.0));
    } else {
        n.view_mut((0, 0), (r, r)).copy_from(&top);
        n.view_mut((0, r), (r, dims.m - r)).copy_from(&(&inv * z3.transpose() * -2.0));
    }
    Ok(n)
}

/// Map free parameters to explicit weights.
pub fn materialize(params: &DirectParams, dims: RenDims) -> Result<RenWeights> {
    dims.validate()?;
    let lay = Layout::new(dims, params.variant);
    let th = &params.theta;
    if th.len() != lay.len {
        return Err(Error::InvalidParameter(format!(
            "theta has length {}, expected {}",
            th.len(),
            lay.len
        )));
    }
    if th.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "REN parameters" });
    }
    let (n, q) = (dims.n, dims.q);
    let x = lay.x.read(th);
    let y1 = lay.y1.read(th);
    let b2_free = lay.b2.read(th);
    let d12_free = lay.d12.read(th);
    let c2 = lay.c2.read(th);
    let d21 = lay.d21.read(th);
    let mut h = gram(&x, params.epsilon);

    let d22 = match (params.variant, &lay.d22, &lay.cayley) {
        (Variant::Contracting, Some(s), _) => s.read(th),
        (Variant::Lipschitz { gamma }, _, Some((sx, sy, sz))) => {
            if !(gamma > 0.0) {
                return Err(Error::InvalidParameter("Lipschitz bound must be positive".into()));
            }
            let nmat = cayley(&sx.read(th), &sy.read(th), &sz.read(th), dims, params.epsilon)?;
            let d22 = &nmat * gamma;
            // (Q, S, R) = (−I/γ, 0, γI)
            let c2_imp = d22.tr_mul(&c2) * (-1.0 / gamma);
            let d21_imp = d22.tr_mul(&d21) * (-1.0 / gamma) - d12_free.transpose();
            let r1 = DMatrix::<f64>::identity(dims.m, dims.m) * gamma - d22.tr_mul(&d22) * (1.0 / gamma);
            let mut left = DMatrix::zeros(2 * n + q, dims.m);
            left.view_mut((0, 0), (n, dims.m)).copy_from(&c2_imp.transpose());
            left.view_mut((n, 0), (q, dims.m)).copy_from(&d21_imp.transpose());
            left.view_mut((n + q, 0), (n, dims.m)).copy_from(&b2_free);
            let chol = r1
                .cholesky()
                .ok_or_else(|| Error::InvalidParameter("gain multiplier is not positive definite".into()))?;
            let gamma2 = &left * chol.solve(&left.transpose());
            let mut cd = DMatrix::zeros(dims.p, 2 * n + q);
            cd.view_mut((0, 0), (dims.p, n)).copy_from(&c2);
            cd.view_mut((0, n), (dims.p, q)).copy_from(&d21);
            let gamma1 = cd.tr_mul(&cd) * (-1.0 / gamma);
            h += gamma2 - gamma1;
            d22
        }
        _ => unreachable!("layout matches variant"),
    };

    let h11 = h.view((0, 0), (n, n));
    let h21 = h.view((n, 0), (q, n));
    let h22 = h.view((n, n), (q, q));
    let h31 = h.view((n + q, 0), (n, n));
    let h32 = h.view((n + q, n), (n, q));
    let p = h.view((n + q, n + q), (n, n)).into_owned();
    let e = (h11 + &p + &y1 - y1.transpose()) * 0.5;
    let lambda = DVector::from_fn(q, |i, _| 0.5 * h22[(i, i)]);
    let e_inv = inverse(&e, "E")?;

    let a = &e_inv * h31;
    let b1 = &e_inv * h32;
    let b2 = &e_inv * &b2_free;
    let mut c1 = -h21.into_owned();
    let mut d11 = DMatrix::zeros(q, q);
    let mut d12 = d12_free;
    for i in 0..q {
        let inv = 1.0 / lambda[i];
        c1.row_mut(i).scale_mut(inv);
        d12.row_mut(i).scale_mut(inv);
        for j in 0..i {
            d11[(i, j)] = -h22[(i, j)] * inv;
        }
    }
    Ok(RenWeights {
        dims,
        a,
        b1,
        b2,
        c1,
        d11,
        d12,
        c2,
        d21,
        d22,
        bx: lay.bx.read_vec(th),
        bv: lay.bv.read_vec(th),
        by: lay.by.read_vec(th),
        implicit: Some(Implicit { e, p, lambda }),
    })
}

/// Gradient of a scalar with respect to every explicit weight.
#[derive(Clone, Debug)]
pub struct WeightGrads(pub RenWeights);

impl WeightGrads {
    pub fn zeros(dims: RenDims) -> Self {
        Self(RenWeights::zeros(dims))
    }

    pub fn scale(&mut self, s: f64) {
        self.0.for_each_mut(|v| v.iter_mut().for_each(|g| *g *= s));
    }
}

/// Pull explicit-weight gradients back to `theta` (contracting variant).
pub fn materialize_vjp(params: &DirectParams, dims: RenDims, grads: &WeightGrads) -> Result<Vec<f64>> {
    if params.variant != Variant::Contracting {
        return Err(Error::InvalidParameter(
            "gradients are only available for the contracting variant".into(),
        ));
    }
    let lay = Layout::new(dims, params.variant);
    let th = &params.theta;
    let w = materialize(params, dims)?;
    let g = &grads.0;
    let (n, q, m) = (dims.n, dims.q, dims.m);
    let imp = w.implicit.as_ref().expect("materialized weights carry the implicit model");
    let e_inv = inverse(&imp.e, "E")?;
    let lambda = &imp.lambda;
    let mut out = vec![0.0; lay.len];

    // A, B1, B2 = E⁻¹ [F, H32, B2_free]
    let mut gab = DMatrix::zeros(n, n + q + m);
    gab.view_mut((0, 0), (n, n)).copy_from(&g.a);
    gab.view_mut((0, n), (n, q)).copy_from(&g.b1);
    gab.view_mut((0, n + q), (n, m)).copy_from(&g.b2);
    let mut ab = DMatrix::zeros(n, n + q + m);
    ab.view_mut((0, 0), (n, n)).copy_from(&w.a);
    ab.view_mut((0, n), (n, q)).copy_from(&w.b1);
    ab.view_mut((0, n + q), (n, m)).copy_from(&w.b2);
    let rhs_bar = e_inv.tr_mul(&gab);
    let e_bar = -(&rhs_bar * ab.transpose());

    let hdim = 2 * n + q;
    let mut h_bar = DMatrix::zeros(hdim, hdim);
    h_bar.view_mut((n + q, 0), (n, n)).copy_from(&rhs_bar.view((0, 0), (n, n)));
    h_bar.view_mut((n + q, n), (n, q)).copy_from(&rhs_bar.view((0, n), (n, q)));
    lay.b2.add(&mut out, &rhs_bar.view((0, n + q), (n, m)).into_owned());

    // E = (H11 + P + Y1 − Y1ᵀ)/2
    let half = &e_bar * 0.5;
    {
        let mut b = h_bar.view_mut((0, 0), (n, n));
        b += &half;
    }
    {
        let mut b = h_bar.view_mut((n + q, n + q), (n, n));
        b += &half;
    }
    lay.y1.add(&mut out, &(&half - half.transpose()));

    // C1 = −Λ⁻¹H21, D11 = −Λ⁻¹ tril(H22), D12 = Λ⁻¹ D12_free
    let mut d12_bar = g.d12.clone();
    for i in 0..q {
        let inv = 1.0 / lambda[i];
        let mut lam_bar = 0.0;
        for j in 0..n {
            lam_bar -= g.c1[(i, j)] * w.c1[(i, j)] * inv;
            h_bar[(n + i, j)] -= g.c1[(i, j)] * inv;
        }
        for j in 0..i {
            lam_bar -= g.d11[(i, j)] * w.d11[(i, j)] * inv;
            h_bar[(n + i, n + j)] -= g.d11[(i, j)] * inv;
        }
        for j in 0..m {
            lam_bar -= g.d12[(i, j)] * w.d12[(i, j)] * inv;
            d12_bar[(i, j)] *= inv;
        }
        h_bar[(n + i, n + i)] += 0.5 * lam_bar;
    }
    lay.d12.add(&mut out, &d12_bar);

    // H = XᵀX + εI
    let x = lay.x.read(th);
    let x_bar = &x * (&h_bar + h_bar.transpose());
    lay.x.add(&mut out, &x_bar);

    lay.c2.add(&mut out, &g.c2);
    lay.d21.add(&mut out, &g.d21);
    if let Some(s) = &lay.d22 {
        s.add(&mut out, &g.d22);
    }
    lay.bx.add_vec(&mut out, &g.bx);
    lay.bv.add_vec(&mut out, &g.bv);
    lay.by.add_vec(&mut out, &g.by);
    Ok(out)
}

/// Output of one step plus the neuron activations.
pub struct Step {
    pub state: RenState,
    pub y: DVector<f64>,
    pub w: DVector<f64>,
}

fn equilibrium(wt: &RenWeights, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let q = wt.dims.q;
    let mut v = wt.bv.clone();
    v.gemv(1.0, &wt.c1, x, 1.0);
    v.gemv(1.0, &wt.d12, u, 1.0);
    let mut w = DVector::zeros(q);
    for j in 0..q {
        let wj = v[j].tanh();
        w[j] = wj;
        if wj != 0.0 {
            let col = &wt.d11.as_slice()[j * q..(j + 1) * q];
            for i in j + 1..q {
                v[i] += col[i] * wj;
            }
        }
    }
    w
}

pub fn forward_step(wt: &RenWeights, state: &RenState, u: &DVector<f64>) -> Step {
    let x = &state.x;
    let w = equilibrium(wt, x, u);
    let mut xn = wt.bx.clone();
    xn.gemv(1.0, &wt.a, x, 1.0);
    xn.gemv(1.0, &wt.b1, &w, 1.0);
    xn.gemv(1.0, &wt.b2, u, 1.0);
    let mut y = wt.by.clone();
    y.gemv(1.0, &wt.c2, x, 1.0);
    y.gemv(1.0, &wt.d21, &w, 1.0);
    y.gemv(1.0, &wt.d22, u, 1.0);
    Step {
        state: RenState { x: xn },
        y,
        w,
    }
}

/// One REN step. Returns the next state and the output.
pub fn forward(wt: &RenWeights, state: &RenState, u: &[f64]) -> (RenState, Vec<f64>) {
    assert_eq!(u.len(), wt.dims.m, "REN input length");
    let s = forward_step(wt, state, &DVector::from_column_slice(u));
    (s.state, s.y.as_slice().to_vec())
}

/// Largest violation of `w = tanh(C1 x + D11 w + D12 u + bv)`.
pub fn fixed_point_residual(wt: &RenWeights, state: &RenState, u: &[f64], w: &DVector<f64>) -> f64 {
    let u = DVector::from_column_slice(u);
    let v = &wt.c1 * &state.x + &wt.d11 * w + &wt.d12 * u + &wt.bv;
    v.iter().zip(w.iter()).map(|(v, w)| (v.tanh() - w).abs()).fold(0.0, f64::max)
}

struct StepOp {
    weights: Rc<RenWeights>,
    grads: Rc<RefCell<WeightGrads>>,
    x: DVector<f64>,
    u: DVector<f64>,
    w: DVector<f64>,
}

impl BlockOp for StepOp {
    fn backward(&mut self, out_adj: &[f64], in_adj: &mut [f64]) {
        let wt = &*self.weights;
        let RenDims { n, m, q, p } = wt.dims;
        let xn_bar = DVector::from_column_slice(&out_adj[..n]);
        let y_bar = DVector::from_column_slice(&out_adj[n..n + p]);
        let mut g = self.grads.borrow_mut();
        let g = &mut g.0;

        let mut w_bar = wt.b1.tr_mul(&xn_bar);
        w_bar.gemv_tr(1.0, &wt.d21, &y_bar, 1.0);
        let mut x_bar = wt.a.tr_mul(&xn_bar);
        x_bar.gemv_tr(1.0, &wt.c2, &y_bar, 1.0);
        let mut u_bar = wt.b2.tr_mul(&xn_bar);
        u_bar.gemv_tr(1.0, &wt.d22, &y_bar, 1.0);

        g.a.ger(1.0, &xn_bar, &self.x, 1.0);
        g.b1.ger(1.0, &xn_bar, &self.w, 1.0);
        g.b2.ger(1.0, &xn_bar, &self.u, 1.0);
        g.bx += &xn_bar;
        g.c2.ger(1.0, &y_bar, &self.x, 1.0);
        g.d21.ger(1.0, &y_bar, &self.w, 1.0);
        g.d22.ger(1.0, &y_bar, &self.u, 1.0);
        g.by += &y_bar;

        // equilibrium layer in reverse order
        let mut v_bar = DVector::zeros(q);
        let d11 = wt.d11.as_slice();
        for i in (0..q).rev() {
            let col = &d11[i * q..(i + 1) * q];
            let mut acc = w_bar[i];
            for j in i + 1..q {
                acc += col[j] * v_bar[j];
            }
            v_bar[i] = acc * (1.0 - self.w[i] * self.w[i]);
        }
        let gd11 = g.d11.as_mut_slice();
        for i in 0..q {
            let wi = self.w[i];
            if wi == 0.0 {
                continue;
            }
            let col = &mut gd11[i * q..(i + 1) * q];
            for j in i + 1..q {
                col[j] += v_bar[j] * wi;
            }
        }
        x_bar.gemv_tr(1.0, &wt.c1, &v_bar, 1.0);
        u_bar.gemv_tr(1.0, &wt.d12, &v_bar, 1.0);
        g.c1.ger(1.0, &v_bar, &self.x, 1.0);
        g.d12.ger(1.0, &v_bar, &self.u, 1.0);
        g.bv += &v_bar;

        for k in 0..n {
            in_adj[k] += x_bar[k];
        }
        for k in 0..m {
            in_adj[n + k] += u_bar[k];
        }
    }
}

/// REN step recorded on the AD tape. Explicit-weight gradients are
/// accumulated into `grads` during the backward pass.
pub fn forward_var(
    weights: &Rc<RenWeights>,
    grads: &Rc<RefCell<WeightGrads>>,
    x: &[Var],
    u: &[Var],
) -> (Vec<Var>, Vec<Var>) {
    let n = weights.dims.n;
    let xv = DVector::from_iterator(x.len(), x.iter().map(|v| crate::math::Real::value(*v)));
    let uv = DVector::from_iterator(u.len(), u.iter().map(|v| crate::math::Real::value(*v)));
    let step = forward_step(weights, &RenState { x: xv.clone() }, &uv);
    let outs: Vec<f64> = step.state.x.iter().chain(step.y.iter()).copied().collect();
    let inputs: Vec<Var> = x.iter().chain(u).copied().collect();
    let op = StepOp {
        weights: Rc::clone(weights),
        grads: Rc::clone(grads),
        x: xv,
        u: uv,
        w: step.w,
    };
    let mut vars = push_block(&inputs, &outs, Box::new(op));
    let y = vars.split_off(n);
    (vars, y)
}

/// Contraction certificate: the smallest rate `ᾱ` (found by bisection) for
/// which the implicit-model inequality holds with the construction's metric.
#[derive(Clone, Debug)]
pub struct Certificate {
    pub rate: f64,
    /// Smallest eigenvalue of the certificate matrix at `rate`.
    pub min_eigenvalue: f64,
}

fn certificate_matrix(wt: &RenWeights, imp: &Implicit, rate: f64) -> DMatrix<f64> {
    let RenDims { n, q, .. } = wt.dims;
    let e = &imp.e;
    let lam = DMatrix::from_diagonal(&imp.lambda);
    let f = e * &wt.a;
    let b1 = e * &wt.b1;
    let c1 = &lam * &wt.c1;
    let d11 = &lam * &wt.d11;
    let w = &lam * 2.0 - &d11 - d11.transpose();
    let mut mm = DMatrix::zeros(2 * n + q, 2 * n + q);
    mm.view_mut((0, 0), (n, n)).copy_from(&(e + e.transpose() - &imp.p / (rate * rate)));
    mm.view_mut((n, 0), (q, n)).copy_from(&-&c1);
    mm.view_mut((0, n), (n, q)).copy_from(&-c1.transpose());
    mm.view_mut((n, n), (q, q)).copy_from(&w);
    mm.view_mut((n + q, 0), (n, n)).copy_from(&f);
    mm.view_mut((0, n + q), (n, n)).copy_from(&f.transpose());
    mm.view_mut((n + q, n), (n, q)).copy_from(&b1);
    mm.view_mut((n, n + q), (q, n)).copy_from(&b1.transpose());
    mm.view_mut((n + q, n + q), (n, n)).copy_from(&imp.p);
    // symmetrize away rounding in the reconstruction
    (&mm + mm.transpose()) * 0.5
}

/// Compute and check the contraction certificate of materialized weights.
pub fn certify(wt: &RenWeights) -> Result<Certificate> {
    let imp = wt
        .implicit
        .as_ref()
        .ok_or_else(|| Error::Certificate("weights carry no implicit model".into()))?;
    let pd = |rate: f64| certificate_matrix(wt, imp, rate).cholesky().is_some();
    let (mut lo, mut hi) = (0.0, 1.0);
    if !pd(hi) {
        let min = certificate_matrix(wt, imp, 1.0).symmetric_eigenvalues().min();
        if min < -1e-8 {
            return Err(Error::Certificate(format!("matrix inequality violated, eigenvalue {min:e}")));
        }
        return Ok(Certificate {
            rate: 1.0,
            min_eigenvalue: min,
        });
    }
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if pd(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let min = certificate_matrix(wt, imp, hi).symmetric_eigenvalues().min();
    Ok(Certificate {
        rate: hi,
        min_eigenvalue: min,
    })
}

/// Empirical contraction rate: for random pairs of initial states driven by
/// the same input sequence, fit a geometric rate to the state distances and
/// return the largest fit.
pub fn contraction_estimate(wt: &RenWeights, inputs: &[Vec<f64>], trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = wt.dims.n;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let xa = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let xb = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        worst = worst.max(pair_rate(wt, inputs, xa, xb));
    }
    worst
}

/// Geometric rate of `‖xa_k − xb_k‖` for one pair of initial states.
pub fn pair_rate(wt: &RenWeights, inputs: &[Vec<f64>], xa: DVector<f64>, xb: DVector<f64>) -> f64 {
    let (mut sa, mut sb) = (RenState { x: xa }, RenState { x: xb });
    let mut logs = Vec::with_capacity(inputs.len() + 1);
    for u in inputs {
        let d = (&sa.x - &sb.x).norm();
        if d < 1e-300 {
            break;
        }
        logs.push(d.ln());
        let u = DVector::from_column_slice(u);
        sa = forward_step(wt, &sa, &u).state;
        sb = forward_step(wt, &sb, &u).state;
    }
    let d = (&sa.x - &sb.x).norm();
    if d >= 1e-300 && logs.len() == inputs.len() {
        logs.push(d.ln());
    }
    match logs.len() {
        0 => 0.0,
        1 => {
            // collapsed to zero distance after one step
            0.0
        }
        k => {
            let kf = k as f64;
            let mean_t = (kf - 1.0) / 2.0;
            let mean_l = logs.iter().sum::<f64>() / kf;
            let (mut num, mut den) = (0.0, 0.0);
            for (t, l) in logs.iter().enumerate() {
                let dt = t as f64 - mean_t;
                num += dt * (l - mean_l);
                den += dt * dt;
            }
            (num / den).exp()
        }
    }
}

/// Empirical lower bound on the incremental input-to-output gain.
pub fn lipschitz_probe(wt: &RenWeights, trials: usize, seed: u64) -> f64 {
    const HORIZON: usize = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let RenDims { n, m, .. } = wt.dims;
    let mut best: f64 = 0.0;
    for _ in 0..trials {
        let x0 = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let (mut sa, mut sb) = (RenState { x: x0.clone() }, RenState { x: x0 });
        let delta_scale: f64 = rng.random_range(1e-3..1.0);
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..HORIZON {
            let ua = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
            let du = DVector::from_fn(m, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                delta_scale * z
            });
            let ub = &ua + &du;
            let a = forward_step(wt, &sa, &ua);
            let b = forward_step(wt, &sb, &ub);
            num += (&a.y - &b.y).norm_squared();
            den += du.norm_squared();
            sa = a.state;
            sb = b.state;
        }
        if den > 0.0 {
            best = best.max((num / den).sqrt());
        }
    }
    best
}

const CHECKPOINT_MAGIC: &str = "ngtc-ren-checkpoint 1";

fn theta_hash(theta: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in theta {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Write a checkpoint: header (dims, variant, margin, hash) and one value per
/// line. The byte stream depends only on the parameters.
pub fn save_checkpoint(path: &Path, params: &DirectParams, dims: RenDims) -> Result<()> {
    let mut s = String::with_capacity(params.theta.len() * 24 + 256);
    let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(s, "dims {} {} {} {}", dims.n, dims.m, dims.q, dims.p);
    match params.variant {
        Variant::Contracting => {
            let _ = writeln!(s, "variant contracting");
        }
        Variant::Lipschitz { gamma } => {
            let _ = writeln!(s, "variant lipschitz {gamma:?}");
        }
    }
    let _ = writeln!(s, "epsilon {:?}", params.epsilon);
    let _ = writeln!(s, "sha256 {}", theta_hash(&params.theta));
    let _ = writeln!(s, "theta {}", params.theta.len());
    for v in &params.theta {
        let _ = writeln!(s, "{v:?}");
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(s.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a checkpoint, check its hash, re-materialize and re-certify.
pub fn load_checkpoint(path: &Path) -> Result<(DirectParams, RenDims, RenWeights)> {
    let text = std::fs::read_to_string(path)?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("unrecognized header"));
    }
    let mut field = |key: &str| -> Result<Vec<String>> {
        let line = lines.next().ok_or_else(|| bad("truncated header"))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(bad(&format!("expected `{key}`")));
        }
        Ok(parts.map(str::to_owned).collect())
    };
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad integer `{s}`")));

    let d = field("dims")?;
    if d.len() != 4 {
        return Err(bad("dims needs four values"));
    }
    let dims = RenDims {
        n: int(&d[0])?,
        m: int(&d[1])?,
        q: int(&d[2])?,
        p: int(&d[3])?,
    };
    let v = field("variant")?;
    let variant = match v.first().map(String::as_str) {
        Some("contracting") => Variant::Contracting,
        Some("lipschitz") if v.len() == 2 => Variant::Lipschitz { gamma: num(&v[1])? },
        _ => return Err(bad("unknown variant")),
    };
    let epsilon = num(field("epsilon")?.first().ok_or_else(|| bad("missing epsilon"))?)?;
    let hash = field("sha256")?.first().cloned().ok_or_else(|| bad("missing hash"))?;
    let len = int(field("theta")?.first().ok_or_else(|| bad("missing length"))?)?;
    if len != DirectParams::len(dims, variant) {
        return Err(bad("theta length does not match dims"));
    }
    let theta = lines.take(len).map(num).collect::<Result<Vec<_>>>()?;
    if theta.len() != len {
        return Err(bad("truncated theta"));
    }
    if theta_hash(&theta) != hash {
        return Err(bad("content hash mismatch"));
    }
    let params = DirectParams { theta, epsilon, variant };
    let weights = materialize(&params, dims)?;
    let cert = certify(&weights)?;
    if cert.rate >= 1.0 {
        return Err(Error::Certificate(format!("checkpoint rate {} is not below 1", cert.rate)));
    }
    Ok((params, dims, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> RenDims {
        RenDims { n: 4, m: 3, q: 6, p: 2 }
    }

    fn random_inputs(m: usize, t: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|_| (0..m).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let w = RenWeights::zeros(small());
        let (s, y) = forward(&w, &RenState::zeros(small()), &[1.0, -2.0, 3.0]);
        assert_eq!(s.x.as_slice(), &[0.0; 4]);
        assert_eq!(y, vec![0.0; 2]);
    }

    #[test]
    fn no_coupling_is_a_single_layer() {
        let dims = small();
        let mut w = materialize(&DirectParams::init(dims, Variant::Contracting, 1e-4, 1.0, 3), dims).unwrap();
        w.d11.fill(0.0);
        let x = RenState { x: DVector::from_vec(vec![0.3, -0.1, 0.2, 0.5]) };
        let u = DVector::from_vec(vec![1.0, 0.5, -0.5]);
        let step = forward_step(&w, &x, &u);
        let direct = (&w.c1 * &x.x + &w.d12 * &u + &w.bv).map(f64::tanh);
        assert_abs_diff_eq!((step.w - direct).amax(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn base_point_is_contracting() {
        let dims = small();
        let w = materialize(&DirectParams::zeros(dims, Variant::Contracting, 1e-4), dims).unwrap();
        assert!(w.is_strictly_lower());
        let rate = contraction_estimate(&w, &random_inputs(3, 60, 1), 4, 2);
        assert!(rate < 1.0);
    }

    #[test]
    fn diagonal_linear_rate() {
        let dims = small();
        let mut w = RenWeights::zeros(dims);
        w.a = DMatrix::identity(4, 4) * 0.5;
        let rate = contraction_estimate(&w, &random_inputs(3, 60, 1), 4, 2);
        assert_abs_diff_eq!(rate, 0.5, epsilon = 0.01);
        let x = DVector::from_element(4, 1.0);
        assert_eq!(pair_rate(&w, &random_inputs(3, 60, 1), x.clone(), x), 0.0);
    }

    #[test]
    fn certificate_holds_for_random_theta() {
        let dims = small();
        for seed in 0..5 {
            let mut params = DirectParams::init(dims, Variant::Contracting, 1e-4, 1.0, seed);
            params.theta.iter_mut().for_each(|v| *v *= 3.0);
            let w = materialize(&params, dims).unwrap();
            let cert = certify(&w).unwrap();
            assert!(cert.rate < 1.0);
            assert!(cert.min_eigenvalue > -1e-8);
        }
    }

    #[test]
    fn feedthrough_gain_probe() {
        let dims = RenDims { n: 2, m: 3, q: 2, p: 3 };
        let mut w = RenWeights::zeros(dims);
        assert_eq!(lipschitz_probe(&w, 4, 1), 0.0);
        w.d22 = DMatrix::identity(3, 3) * 2.5;
        assert_abs_diff_eq!(lipschitz_probe(&w, 4, 1), 2.5, epsilon = 0.025);
    }

    #[test]
    fn lipschitz_variant_respects_bound() {
        for dims in [small(), RenDims { n: 3, m: 2, q: 5, p: 4 }, RenDims { n: 3, m: 3, q: 4, p: 3 }] {
            let gamma = 1.7;
            let mut params = DirectParams::init(dims, Variant::Lipschitz { gamma }, 1e-4, 1.0, 9);
            params.theta.iter_mut().for_each(|v| *v *= 2.0);
            let w = materialize(&params, dims).unwrap();
            let gain = lipschitz_probe(&w, 32, 4);
            assert!(gain > 0.0 && gain <= gamma * (1.0 + 1e-6), "gain {gain}");
            assert!(certify(&w).unwrap().rate < 1.0);
        }
    }

    fn rollout_loss(params: &DirectParams, dims: RenDims, inputs: &[Vec<f64>]) -> f64 {
        let w = materialize(params, dims).unwrap();
        let mut state = RenState::zeros(dims);
        state.x.fill(0.3);
        let mut loss = 0.0;
        for (k, u) in inputs.iter().enumerate() {
            let (s, y) = forward(&w, &state, u);
            state = s;
            loss += y.iter().enumerate().map(|(i, v)| (1.0 + i as f64 + k as f64) * v * v.sin()).sum::<f64>();
        }
        loss
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        use crate::ad::Session;
        use crate::math::Real;
        let dims = small();
        let mut params = DirectParams::init(dims, Variant::Contracting, 1e-4, 1.0, 5);
        params.theta.iter_mut().for_each(|v| *v *= 2.0);
        let inputs = random_inputs(dims.m, 6, 8);
        let w = Rc::new(materialize(&params, dims).unwrap());
        let grads = Rc::new(RefCell::new(WeightGrads::zeros(dims)));
        let session = Session::new();
        let mut x: Vec<Var> = (0..dims.n).map(|_| Var::constant(0.3)).collect();
        let mut loss = Var::constant(0.0);
        for (k, u) in inputs.iter().enumerate() {
            let uv: Vec<Var> = u.iter().map(|&v| Var::constant(v)).collect();
            // route one input through the tape so the block has a tracked input
            let mut uv = uv;
            uv[0] = Var::input(u[0]);
            let (xn, y) = forward_var(&w, &grads, &x, &uv);
            x = xn;
            for (i, v) in y.iter().enumerate() {
                loss = loss + *v * v.sin() * (1.0 + i as f64 + k as f64);
            }
        }
        assert_abs_diff_eq!(loss.value(), rollout_loss(&params, dims, &inputs), epsilon = 1e-12);
        session.gradient(loss);
        let g = materialize_vjp(&params, dims, &grads.borrow()).unwrap();
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let i = rng.random_range(0..g.len());
            let mut p = params.clone();
            p.theta[i] += h;
            let up = rollout_loss(&p, dims, &inputs);
            p.theta[i] -= 2.0 * h;
            let dn = rollout_loss(&p, dims, &inputs);
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err < 1e-5, "coordinate {i}: fd {fd} ad {}", g[i]);
        }
    }
}
