//! Scalar reverse-mode automatic differentiation with stop-gradient.
//!
//! The tape is an append-only arena of scalar nodes. Values are computed
//! eagerly on the forward pass; `grad` runs a reverse sweep that *emits its
//! adjoint arithmetic as ordinary tape nodes*, so the output of `grad` can
//! be differentiated again (`grad_twice` is just `grad` of `grad`).
//!
//! Stop-gradient is a genuine node: its value equals its parent's value and
//! the reverse sweep does not propagate through it. A separate entry point,
//! [`Tape::grad_through_stops`], treats stop nodes as the identity, which
//! computes the gradient of the *evaluated* expression (strip the stops,
//! then differentiate). Having both lets tests exercise the fact that
//! differentiate-then-evaluate and evaluate-then-differentiate disagree on
//! expressions containing stop-gradient.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;

use crate::math;

/// Handle to a node on a tape. Only meaningful with the tape it came from.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub u32);

/// Operation tag with parent indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Const,
    Input,
    Add(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Log(u32),
    Sqrt(u32),
    Pow(u32, u32),
    Stop(u32),
}

#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    value: f64,
}

#[derive(Debug)]
pub enum AdError {
    /// `lift` rejects NaN and infinities.
    NonFinite(f64),
    /// A gradient was requested w.r.t. a node not marked as an input.
    NotAnInput(Var),
    /// A finite-difference probe produced a non-finite value.
    NonFiniteProbe,
}

impl fmt::Display for AdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdError::NonFinite(v) => write!(f, "non-finite constant: {v}"),
            AdError::NotAnInput(v) => write!(f, "node {} is not a designated input", v.0),
            AdError::NonFiniteProbe => write!(f, "finite-difference probe returned a non-finite value"),
        }
    }
}

/// Adjoints of one output w.r.t. a set of input leaves, themselves tape
/// nodes (apply `grad` to them for higher-order derivatives).
pub struct AdjointMap {
    pub target: Var,
    pub leaves: Vec<Var>,
    pub adjoints: Vec<Var>,
}

impl AdjointMap {
    pub fn adjoint(&self, leaf: Var) -> Option<Var> {
        self.leaves.iter().position(|&l| l == leaf).map(|i| self.adjoints[i])
    }

    pub fn values(&self, tape: &Tape) -> Vec<f64> {
        self.adjoints.iter().map(|&v| tape.value(v)).collect()
    }
}

/// Append-only scalar tape. Confined to one thread; create one per run.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(n)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn push(&self, op: Op, value: f64) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len() as u32;
        nodes.push(Node { op, value });
        Var(id)
    }

    #[inline]
    pub fn value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0 as usize].value
    }

    pub fn values(&self, vs: &[Var]) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        vs.iter().map(|v| nodes[v.0 as usize].value).collect()
    }

    pub fn op(&self, v: Var) -> Op {
        self.nodes.borrow()[v.0 as usize].op
    }

    /// True iff the node is a stop-gradient wrapper.
    pub fn is_stop(&self, v: Var) -> bool {
        matches!(self.op(v), Op::Stop(_))
    }

    /// Unchecked constant.
    #[inline]
    pub fn constant(&self, value: f64) -> Var {
        self.push(Op::Const, value)
    }

    /// Checked constant: rejects NaN and infinities.
    pub fn lift(&self, value: f64) -> Result<Var, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFinite(value));
        }
        Ok(self.constant(value))
    }

    /// Differentiable leaf.
    pub fn input(&self, value: f64) -> Var {
        self.push(Op::Input, value)
    }

    #[inline]
    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    #[inline]
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a.0, b.0), v)
    }

    #[inline]
    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(Op::Div(a.0, b.0), v)
    }

    #[inline]
    pub fn neg(&self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(Op::Neg(a.0), v)
    }

    #[inline]
    pub fn exp(&self, a: Var) -> Var {
        let v = math::exp(self.value(a));
        self.push(Op::Exp(a.0), v)
    }

    #[inline]
    pub fn log(&self, a: Var) -> Var {
        let v = math::ln(self.value(a));
        self.push(Op::Log(a.0), v)
    }

    #[inline]
    pub fn sqrt(&self, a: Var) -> Var {
        let v = math::sqrt(self.value(a));
        self.push(Op::Sqrt(a.0), v)
    }

    #[inline]
    pub fn pow(&self, a: Var, b: Var) -> Var {
        let v = math::powf(self.value(a), self.value(b));
        self.push(Op::Pow(a.0, b.0), v)
    }

    /// Value-identity node with zero gradient.
    #[inline]
    pub fn stop_gradient(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push(Op::Stop(a.0), v)
    }

    // ── composite helpers ───────────────────────────────────────────────

    #[inline]
    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    #[inline]
    pub fn scale(&self, a: Var, c: f64) -> Var {
        let cv = self.constant(c);
        self.mul(a, cv)
    }

    #[inline]
    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let cv = self.constant(c);
        self.add(a, cv)
    }

    /// x - stop(x): exactly zero on the forward pass, gradient of x on the
    /// backward pass. The score-attachment building block.
    #[inline]
    pub fn dice(&self, x: Var) -> Var {
        let s = self.stop_gradient(x);
        self.sub(x, s)
    }

    pub fn add_many(&self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    /// Max-shifted log-sum-exp. The shift is a constant (the realized max),
    /// which leaves the gradient untouched and keeps exponentials bounded.
    pub fn logsumexp(&self, xs: &[Var]) -> Var {
        let m = xs.iter().map(|&x| self.value(x)).fold(f64::NEG_INFINITY, f64::max);
        let mv = self.constant(m);
        let mut terms = Vec::with_capacity(xs.len());
        for &x in xs {
            let shifted = self.sub(x, mv);
            terms.push(self.exp(shifted));
        }
        let total = self.add_many(&terms);
        let lt = self.log(total);
        self.add(mv, lt)
    }

    /// log N(x; mean, var), all three tape nodes.
    pub fn gauss_logpdf(&self, x: Var, mean: Var, variance: Var) -> Var {
        let d = self.sub(x, mean);
        let d2 = self.mul(d, d);
        let lv = self.log(variance);
        let two_v = self.scale(variance, 2.0);
        let quad = self.div(d2, two_v);
        let half_lv = self.scale(lv, 0.5);
        let a = self.add_const(half_lv, 0.5 * math::LN_2PI);
        let b = self.add(a, quad);
        self.neg(b)
    }

    /// tanh built from the fixed primitive set.
    pub fn tanh(&self, x: Var) -> Var {
        let two_x = self.scale(x, 2.0);
        let e = self.exp(two_x);
        let num = self.add_const(e, -1.0);
        let den = self.add_const(e, 1.0);
        self.div(num, den)
    }

    // ── reverse sweep ───────────────────────────────────────────────────

    fn check_leaves(&self, leaves: &[Var]) -> Result<(), AdError> {
        let nodes = self.nodes.borrow();
        for &l in leaves {
            if !matches!(nodes[l.0 as usize].op, Op::Input) {
                return Err(AdError::NotAnInput(l));
            }
        }
        Ok(())
    }

    /// Reverse-mode gradient of `output` w.r.t. `leaves`. Adjoints are
    /// recorded as new tape nodes; a leaf with no path to the output gets
    /// an exact-zero constant.
    pub fn grad(&self, output: Var, leaves: &[Var]) -> Result<AdjointMap, AdError> {
        self.sweep(output, leaves, false)
    }

    /// Gradient of the evaluated expression: stop-gradient nodes are
    /// treated as the identity. This is differentiation *after* stripping
    /// stops, not the gradient the tape semantics assign to `output`.
    pub fn grad_through_stops(&self, output: Var, leaves: &[Var]) -> Result<AdjointMap, AdError> {
        self.sweep(output, leaves, true)
    }

    fn sweep(&self, output: Var, leaves: &[Var], through_stops: bool) -> Result<AdjointMap, AdError> {
        self.check_leaves(leaves)?;
        let upto = output.0 as usize;
        let mut adj: Vec<Option<Var>> = vec![None; upto + 1];
        adj[upto] = Some(self.constant(1.0));

        for id in (0..=upto).rev() {
            let Some(abar) = adj[id] else { continue };
            // Ops below clone out of the borrow before emitting new nodes.
            let op = self.nodes.borrow()[id].op;
            match op {
                Op::Const | Op::Input => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, abar);
                    self.accumulate(&mut adj, b, abar);
                }
                Op::Mul(a, b) => {
                    let ca = self.mul(abar, Var(b));
                    self.accumulate(&mut adj, a, ca);
                    let cb = self.mul(abar, Var(a));
                    self.accumulate(&mut adj, b, cb);
                }
                Op::Div(a, b) => {
                    let ca = self.div(abar, Var(b));
                    self.accumulate(&mut adj, a, ca);
                    let t = self.div(Var(id as u32), Var(b));
                    let bt = self.mul(abar, t);
                    let cb = self.neg(bt);
                    self.accumulate(&mut adj, b, cb);
                }
                Op::Neg(a) => {
                    let ca = self.neg(abar);
                    self.accumulate(&mut adj, a, ca);
                }
                Op::Exp(a) => {
                    // d exp(a) = exp(a); reuse the output node.
                    let ca = self.mul(abar, Var(id as u32));
                    self.accumulate(&mut adj, a, ca);
                }
                Op::Log(a) => {
                    let ca = self.div(abar, Var(a));
                    self.accumulate(&mut adj, a, ca);
                }
                Op::Sqrt(a) => {
                    let two_z = self.scale(Var(id as u32), 2.0);
                    let ca = self.div(abar, two_z);
                    self.accumulate(&mut adj, a, ca);
                }
                Op::Pow(a, b) => {
                    let bm1 = self.add_const(Var(b), -1.0);
                    let p = self.pow(Var(a), bm1);
                    let bp = self.mul(Var(b), p);
                    let ca = self.mul(abar, bp);
                    self.accumulate(&mut adj, a, ca);
                    if !matches!(self.nodes.borrow()[b as usize].op, Op::Const) {
                        let la = self.log(Var(a));
                        let zla = self.mul(Var(id as u32), la);
                        let cb = self.mul(abar, zla);
                        self.accumulate(&mut adj, b, cb);
                    }
                }
                Op::Stop(a) => {
                    if through_stops {
                        self.accumulate(&mut adj, a, abar);
                    }
                }
            }
        }

        let mut adjoints = Vec::with_capacity(leaves.len());
        for &l in leaves {
            let got = if (l.0 as usize) <= upto { adj[l.0 as usize] } else { None };
            adjoints.push(match got {
                Some(v) => v,
                None => self.constant(0.0),
            });
        }
        Ok(AdjointMap { target: output, leaves: leaves.to_vec(), adjoints })
    }

    #[inline]
    fn accumulate(&self, adj: &mut [Option<Var>], parent: u32, contrib: Var) {
        let slot = &mut adj[parent as usize];
        *slot = Some(match *slot {
            None => contrib,
            Some(prev) => self.add(prev, contrib),
        });
    }

    /// Gradient values w.r.t. `leaves` (convenience over `grad`).
    pub fn grad_values(&self, output: Var, leaves: &[Var]) -> Result<Vec<f64>, AdError> {
        Ok(self.grad(output, leaves)?.values(self))
    }

    /// Full Hessian by differentiating the recorded first-order adjoints.
    pub fn grad_twice(&self, output: Var, leaves: &[Var]) -> Result<Vec<Vec<Var>>, AdError> {
        let first = self.grad(output, leaves)?;
        let mut rows = Vec::with_capacity(leaves.len());
        for &g in &first.adjoints {
            rows.push(self.grad(g, leaves)?.adjoints);
        }
        Ok(rows)
    }

    pub fn grad_twice_values(&self, output: Var, leaves: &[Var]) -> Result<Vec<Vec<f64>>, AdError> {
        let rows = self.grad_twice(output, leaves)?;
        Ok(rows.iter().map(|r| self.values(r)).collect())
    }

    /// Recompute every node value from the recorded structure. Replay is
    /// deterministic: the result must equal the stored values bit-exactly.
    pub fn replay_values(&self) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut vals: Vec<f64> = Vec::with_capacity(nodes.len());
        for n in nodes.iter() {
            let v = match n.op {
                Op::Const | Op::Input => n.value,
                Op::Add(a, b) => vals[a as usize] + vals[b as usize],
                Op::Mul(a, b) => vals[a as usize] * vals[b as usize],
                Op::Div(a, b) => vals[a as usize] / vals[b as usize],
                Op::Neg(a) => -vals[a as usize],
                Op::Exp(a) => math::exp(vals[a as usize]),
                Op::Log(a) => math::ln(vals[a as usize]),
                Op::Sqrt(a) => math::sqrt(vals[a as usize]),
                Op::Pow(a, b) => math::powf(vals[a as usize], vals[b as usize]),
                Op::Stop(a) => vals[a as usize],
            };
            vals.push(v);
        }
        vals
    }

    pub fn stored_values(&self) -> Vec<f64> {
        self.nodes.borrow().iter().map(|n| n.value).collect()
    }
}

/// Central finite differences (f(x+h e_k) - f(x-h e_k)) / 2h.
pub fn finite_difference<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>, AdError>
where
    F: Fn(&[f64]) -> f64,
{
    let mut out = Vec::with_capacity(theta.len());
    let mut probe = theta.to_vec();
    for k in 0..theta.len() {
        probe[k] = theta[k] + h;
        let up = f(&probe);
        probe[k] = theta[k] - h;
        let down = f(&probe);
        probe[k] = theta[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(AdError::NonFiniteProbe);
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t() -> Tape {
        Tape::new()
    }

    #[test]
    fn lift_rejects_non_finite() {
        let tape = t();
        assert!(tape.lift(f64::NAN).is_err());
        assert!(tape.lift(f64::INFINITY).is_err());
        assert_eq!(tape.value(tape.lift(3.5).unwrap()), 3.5);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let tape = t();
        let x = tape.input(2.0);
        let c = tape.lift(0.0).unwrap();
        let g = tape.grad_values(c, &[x]).unwrap();
        assert_eq!(g[0], 0.0);
        let one = tape.lift(1.0).unwrap();
        let y = tape.mul(one, x);
        assert_eq!(tape.grad_values(y, &[x]).unwrap()[0], 1.0);
    }

    #[test]
    fn stop_gradient_value_and_gradient() {
        let tape = t();
        let x = tape.input(7.0);
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s), 7.0);
        assert_eq!(tape.grad_values(s, &[x]).unwrap()[0], 0.0);

        // forward value of stop(x^2) at x=3
        let x2 = {
            let x = tape.input(3.0);
            let sq = tape.mul(x, x);
            tape.stop_gradient(sq)
        };
        assert_eq!(tape.value(x2), 9.0);
    }

    #[test]
    fn product_rule_with_dead_branch() {
        // d/dx [x * stop(x)] = stop(x) = 3 at x=3.
        let tape = t();
        let x = tape.input(3.0);
        let s = tape.stop_gradient(x);
        let y = tape.mul(x, s);
        assert_eq!(tape.grad_values(y, &[x]).unwrap()[0], 3.0);
    }

    fn tutorial_expr(tape: &Tape, xv: f64) -> (Var, Var) {
        // x + stop(x)^2 + x * stop(x)^2
        let x = tape.input(xv);
        let s = tape.stop_gradient(x);
        let s2 = tape.mul(s, s);
        let xs2 = tape.mul(x, s2);
        let e1 = tape.add(x, s2);
        (x, tape.add(e1, xs2))
    }

    #[test]
    fn tutorial_identities() {
        // differentiate-then-evaluate: 1 + x^2; evaluate-then-differentiate: 1 + 2x + 3x^2.
        for &xv in &[2.0, -1.5, 0.3] {
            let tape = t();
            let (x, e) = tutorial_expr(&tape, xv);
            let forward = tape.grad_values(e, &[x]).unwrap()[0];
            assert!((forward - (1.0 + xv * xv)).abs() < 1e-12);
            let stripped = tape.grad_through_stops(e, &[x]).unwrap().values(&tape)[0];
            assert!((stripped - (1.0 + 2.0 * xv + 3.0 * xv * xv)).abs() < 1e-12);
        }
    }

    #[test]
    fn interleaved_exp_log_second_order() {
        // d/dx of the evaluated first gradient of exp(stop(x) + log x)
        // equals (1/x) exp(x + log x).
        let xv = 1.5;
        let tape = t();
        let x = tape.input(xv);
        let s = tape.stop_gradient(x);
        let lx = tape.log(x);
        let inner = tape.add(s, lx);
        let e = tape.exp(inner);
        let g1 = tape.grad(e, &[x]).unwrap().adjoints[0];
        // evaluate-then-differentiate the recorded first-order adjoint
        let g2 = tape.grad_through_stops(g1, &[x]).unwrap().values(&tape)[0];
        let expect = math::exp(xv + math::ln(xv)) / xv;
        assert!((g2 - expect).abs() < 1e-12, "{g2} vs {expect}");
    }

    #[test]
    fn second_order_basics() {
        let tape = t();
        let x = tape.input(2.0);
        let x2 = tape.mul(x, x);
        let x3 = tape.mul(x2, x);
        let h = tape.grad_twice_values(x3, &[x]).unwrap();
        assert!((h[0][0] - 12.0).abs() < 1e-12);

        // Hessian of (x-1)^2 + (y-2)^2 is diag(2, 2).
        let tape = t();
        let x = tape.input(0.3);
        let y = tape.input(-1.0);
        let dx = tape.add_const(x, -1.0);
        let dy = tape.add_const(y, -2.0);
        let q1 = tape.mul(dx, dx);
        let q2 = tape.mul(dy, dy);
        let f = tape.add(q1, q2);
        let h = tape.grad_twice_values(f, &[x, y]).unwrap();
        assert!((h[0][0] - 2.0).abs() < 1e-12);
        assert!((h[1][1] - 2.0).abs() < 1e-12);
        assert!(h[0][1].abs() < 1e-12 && h[1][0].abs() < 1e-12);
    }

    #[test]
    fn grad_of_grad_equals_grad_twice() {
        let tape = t();
        let x = tape.input(1.2);
        let y = tape.input(-0.7);
        // x^3 y + y^2
        let x2 = tape.mul(x, x);
        let x3 = tape.mul(x2, x);
        let a = tape.mul(x3, y);
        let y2 = tape.mul(y, y);
        let f = tape.add(a, y2);
        let first = tape.grad(f, &[x, y]).unwrap();
        let h = tape.grad_twice_values(f, &[x, y]).unwrap();
        for (k, &g) in first.adjoints.iter().enumerate() {
            let row = tape.grad_values(g, &[x, y]).unwrap();
            for j in 0..2 {
                assert!((row[j] - h[k][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_ancestor_leaf_gets_exact_zero() {
        let tape = t();
        let x = tape.input(1.0);
        let y = tape.input(2.0);
        let f = tape.mul(x, x);
        let g = tape.grad_values(f, &[x, y]).unwrap();
        assert_eq!(g[1], 0.0);
        // downstream only through stop wrappers: exactly zero too
        let s = tape.stop_gradient(y);
        let f2 = tape.mul(f, s);
        assert_eq!(tape.grad_values(f2, &[y]).unwrap()[0], 0.0);
    }

    #[test]
    fn grad_rejects_non_input_leaf() {
        let tape = t();
        let x = tape.input(1.0);
        let c = tape.constant(2.0);
        let f = tape.mul(x, c);
        assert!(matches!(tape.grad(f, &[c]), Err(AdError::NotAnInput(_))));
    }

    #[test]
    fn replay_is_bit_exact() {
        let tape = t();
        let x = tape.input(0.37);
        let y = tape.input(1.91);
        let m = tape.mul(x, y);
        let e = tape.exp(m);
        let l = tape.log(e);
        let sq = tape.sqrt(e);
        let p = tape.pow(x, y);
        let f = tape.add_many(&[l, sq, p]);
        let _ = tape.grad(f, &[x, y]).unwrap();
        let stored = tape.stored_values();
        let replayed = tape.replay_values();
        assert_eq!(stored.len(), replayed.len());
        for (a, b) in stored.iter().zip(&replayed) {
            assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn dice_surrogate_reproduces_score_times_f() {
        // grad of (p/stop(p)) * f equals f * dlog p + df, for a Gaussian
        // density p(theta) = N(1.3; theta, 1) and f = theta^2.
        let tape = t();
        let th = tape.input(0.4);
        let x = tape.constant(1.3);
        let one = tape.constant(1.0);
        let lp = tape.gauss_logpdf(x, th, one);
        let p = tape.exp(lp);
        let sp = tape.stop_gradient(p);
        let ratio = tape.div(p, sp);
        let f = tape.mul(th, th);
        let surrogate = tape.mul(ratio, f);
        let got = tape.grad_values(surrogate, &[th]).unwrap()[0];
        let dlogp = 1.3 - 0.4; // (x - theta)/var
        let expect = 0.4 * 0.4 * dlogp + 2.0 * 0.4;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_basics() {
        let g = finite_difference(|th| th[0] * th[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_difference(|_| 4.2, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(finite_difference(|th| math::ln(th[0]), &[0.0], 1e-5).is_err());
    }
}
