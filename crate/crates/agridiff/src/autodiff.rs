//! Reverse-mode automatic differentiation on a scalar tape.
//!
//! Every numeric quantity in the crop model, the neural nets, and the
//! hybrids is a [`Var`] recorded on a [`Tape`]. A single reverse sweep
//! ([`Tape::backward`]) yields the gradient of one output with respect
//! to every leaf. Tapes are rebuilt each training step.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("non-finite value {value} for {context}")]
    NonFinite { value: f64, context: String },
    #[error("division by zero at node {node}")]
    DivByZero { node: usize },
    #[error("ln of non-positive value {value} at node {node}")]
    LnDomain { value: f64, node: usize },
    #[error("variable belongs to a different tape")]
    ForeignVariable,
}

/// Primitive operation kinds. `*Const` variants carry their constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Relu,
    PowConst(f64),
    MinConst(f64),
    MaxConst(f64),
}

impl OpKind {
    pub fn is_binary(self) -> bool {
        matches!(self, OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div)
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Append-only record of operations. Topological order is the record order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node on one tape, carrying its forward value.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: u32,
    value: f64,
}

/// Adjoints from one backward sweep, indexed by node id.
pub struct Gradient {
    adjoints: Vec<f64>,
}

impl Gradient {
    pub fn wrt(&self, var: Var<'_>) -> f64 {
        self.adjoints[var.index as usize]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parents: [u32; 2], partials: [f64; 2]) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node { parents, partials });
        idx
    }

    /// Record an input node with no parents.
    pub fn leaf(&self, value: f64) -> Result<Var<'_>, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFinite {
                value,
                context: "leaf".into(),
            });
        }
        let idx = self.push([0, 0], [0.0, 0.0]);
        // self-referencing zero partials are harmless in the sweep
        self.nodes.borrow_mut()[idx as usize].parents = [idx, idx];
        Ok(Var {
            tape: self,
            index: idx,
            value,
        })
    }

    /// Record a constant. Identical to a leaf; named for readability.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.leaf(value).expect("finite constant")
    }

    fn check_owned(&self, v: Var<'_>) -> Result<(), AdError> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(AdError::ForeignVariable)
        }
    }

    /// Record one primitive operation. `rhs` is required for binary kinds
    /// and ignored otherwise.
    pub fn elementary<'t>(
        &'t self,
        kind: OpKind,
        lhs: Var<'t>,
        rhs: Option<Var<'t>>,
    ) -> Result<Var<'t>, AdError> {
        self.check_owned(lhs)?;
        let x = lhs.value;
        let (value, partials, rhs_idx) = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let r = rhs.ok_or(AdError::NonFinite {
                    value: f64::NAN,
                    context: "missing rhs for binary op".into(),
                })?;
                self.check_owned(r)?;
                let y = r.value;
                let (v, dl, dr) = match kind {
                    OpKind::Add => (x + y, 1.0, 1.0),
                    OpKind::Sub => (x - y, 1.0, -1.0),
                    OpKind::Mul => (x * y, y, x),
                    OpKind::Div => {
                        if y == 0.0 {
                            return Err(AdError::DivByZero {
                                node: r.index as usize,
                            });
                        }
                        (x / y, 1.0 / y, -x / (y * y))
                    }
                    _ => unreachable!(),
                };
                (v, [dl, dr], r.index)
            }
            OpKind::Exp => {
                let e = x.exp();
                (e, [e, 0.0], lhs.index)
            }
            OpKind::Ln => {
                if x <= 0.0 {
                    return Err(AdError::LnDomain {
                        value: x,
                        node: lhs.index as usize,
                    });
                }
                (x.ln(), [1.0 / x, 0.0], lhs.index)
            }
            OpKind::Tanh => {
                let t = x.tanh();
                (t, [1.0 - t * t, 0.0], lhs.index)
            }
            OpKind::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                (s, [s * (1.0 - s), 0.0], lhs.index)
            }
            // subgradient 0 at the kink
            OpKind::Relu => {
                if x > 0.0 {
                    (x, [1.0, 0.0], lhs.index)
                } else {
                    (0.0, [0.0, 0.0], lhs.index)
                }
            }
            OpKind::PowConst(p) => {
                let v = x.powf(p);
                (v, [p * x.powf(p - 1.0), 0.0], lhs.index)
            }
            OpKind::MinConst(c) => {
                if x < c {
                    (x, [1.0, 0.0], lhs.index)
                } else {
                    (c, [0.0, 0.0], lhs.index)
                }
            }
            OpKind::MaxConst(c) => {
                if x > c {
                    (x, [1.0, 0.0], lhs.index)
                } else {
                    (c, [0.0, 0.0], lhs.index)
                }
            }
        };
        if !value.is_finite() {
            return Err(AdError::NonFinite {
                value,
                context: format!("{kind:?} on node {}", lhs.index),
            });
        }
        let idx = self.push([lhs.index, rhs_idx], partials);
        Ok(Var {
            tape: self,
            index: idx,
            value,
        })
    }

    /// Single reverse sweep in anti-topological order, seeding the output
    /// adjoint with 1.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradient, AdError> {
        self.check_owned(output)?;
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let out = output.index as usize;
        debug_assert!(out < n);
        let mut adjoints = vec![0.0; n];
        adjoints[out] = 1.0;
        for i in (0..=out).rev() {
            let a = adjoints[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            adjoints[node.parents[0] as usize] += node.partials[0] * a;
            adjoints[node.parents[1] as usize] += node.partials[1] * a;
        }
        Ok(Gradient { adjoints })
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn unary(self, kind: OpKind) -> Var<'t> {
        self.tape
            .elementary(kind, self, None)
            .expect("unary op in valid domain")
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(OpKind::Exp)
    }

    pub fn ln(self) -> Result<Var<'t>, AdError> {
        self.tape.elementary(OpKind::Ln, self, None)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(OpKind::Tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(OpKind::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(OpKind::Relu)
    }

    pub fn pow_const(self, p: f64) -> Var<'t> {
        self.unary(OpKind::PowConst(p))
    }

    pub fn min_const(self, c: f64) -> Var<'t> {
        self.unary(OpKind::MinConst(c))
    }

    pub fn max_const(self, c: f64) -> Var<'t> {
        self.unary(OpKind::MaxConst(c))
    }

    pub fn clamp01(self) -> Var<'t> {
        self.max_const(0.0).min_const(1.0)
    }

    pub fn checked_div(self, rhs: Var<'t>) -> Result<Var<'t>, AdError> {
        self.tape.elementary(OpKind::Div, self, Some(rhs))
    }

    /// x·σ(βx); β is a tape variable so it can be trained.
    pub fn swish(self, beta: Var<'t>) -> Var<'t> {
        self * (self * beta).sigmoid()
    }

    /// ln(1 + e^x), composed as relu(x) + ln(1 + e^(-|x|)) so the exp
    /// never overflows.
    pub fn softplus(self) -> Var<'t> {
        let pos = self.relu();
        let minus_abs = self - pos * 2.0; // x - 2*relu(x) = -|x|
        pos + (minus_abs.exp() + self.tape.constant(1.0))
            .ln()
            .expect("1 + e^(-|x|) > 1")
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $kind:expr) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape
                    .elementary($kind, self, Some(rhs))
                    .expect(concat!(stringify!($method), " of tape variables"))
            }
        }
        impl<'t> std::ops::$trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let c = self.tape.constant(rhs);
                self.tape
                    .elementary($kind, self, Some(c))
                    .expect(concat!(stringify!($method), " by constant"))
            }
        }
    };
}

binop!(Add, add, OpKind::Add);
binop!(Sub, sub, OpKind::Sub);
binop!(Mul, mul, OpKind::Mul);
binop!(Div, div, OpKind::Div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.constant(0.0) - self
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Threshold below which absolute instead of relative error is compared.
pub const GRAD_ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub input_name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub pass: bool,
}

/// Compare the reverse-mode gradient of `program` against central finite
/// differences (f(x+h) − f(x−h)) / 2h at `point`.
pub fn grad_check<F>(
    program: F,
    names: &[&str],
    point: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, AdError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AdError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(names.len(), point.len());

    let eval = |xs: &[f64]| -> Result<f64, AdError> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|&x| tape.leaf(x))
            .collect::<Result<_, _>>()?;
        Ok(program(&tape, &vars)?.value())
    };

    // analytic gradient via one tape
    let tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|&x| tape.leaf(x))
        .collect::<Result<_, _>>()?;
    let out = program(&tape, &vars)?;
    let grad = tape.backward(out)?;

    let mut entries = Vec::with_capacity(point.len());
    let mut all_pass = true;
    for (i, name) in names.iter().enumerate() {
        let analytic = grad.wrt(vars[i]);
        let mut plus = point.to_vec();
        let mut minus = point.to_vec();
        plus[i] += step;
        minus[i] -= step;
        let (numeric, ok) = match (eval(&plus), eval(&minus)) {
            (Ok(fp), Ok(fm)) => (((fp - fm) / (2.0 * step)), true),
            _ => (f64::NAN, false),
        };
        let scale = analytic.abs().max(numeric.abs());
        let rel_error = if !ok {
            f64::INFINITY
        } else if scale < GRAD_ABS_FLOOR {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / scale
        };
        let pass = ok && rel_error <= tolerance;
        all_pass &= pass;
        entries.push(GradCheckEntry {
            input_name: name.to_string(),
            analytic,
            numeric,
            rel_error,
            pass,
        });
    }
    Ok(GradCheckReport {
        entries,
        pass: all_pass,
    })
}

// ---------------------------------------------------------------------------
// Random programs (for the gradcheck CLI and property tests)
// ---------------------------------------------------------------------------

/// A replayable straight-line program over the primitive set. Generated
/// once at a nominal point with domain guards wide enough that small
/// finite-difference perturbations stay valid.
#[derive(Debug, Clone)]
pub struct RandomProgram {
    pub n_inputs: usize,
    ops: Vec<(OpKind, usize, usize)>,
}

impl RandomProgram {
    /// Generate a program of at most `max_ops` primitives, choosing only
    /// ops whose operands sit at least 0.1 from any domain boundary at
    /// the nominal point.
    pub fn generate(seed: u64, n_inputs: usize, max_ops: usize, nominal: &[f64]) -> Self {
        use rand::{Rng, SeedableRng};
        assert_eq!(nominal.len(), n_inputs);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut values: Vec<f64> = nominal.to_vec();
        let mut ops = Vec::new();
        let n_ops = rng.gen_range(1..=max_ops);
        while ops.len() < n_ops {
            let a = rng.gen_range(0..values.len());
            let b = rng.gen_range(0..values.len());
            let (xa, xb) = (values[a], values[b]);
            let kind = match rng.gen_range(0..10u8) {
                0 => OpKind::Add,
                1 => OpKind::Sub,
                2 => OpKind::Mul,
                3 if xb.abs() >= 0.1 => OpKind::Div,
                4 if xa.abs() <= 3.0 => OpKind::Exp,
                5 if xa >= 0.1 => OpKind::Ln,
                // keep clear of the saturated tails so finite differences
                // stay above roundoff
                6 if xa.abs() <= 3.0 => OpKind::Tanh,
                7 if xa.abs() <= 3.0 => OpKind::Sigmoid,
                8 if xa.abs() >= 0.1 => OpKind::Relu,
                9 if xa.abs() >= 0.1 && xa.abs() <= 30.0 => OpKind::PowConst(2.0),
                _ => continue,
            };
            let v = match kind {
                OpKind::Add => xa + xb,
                OpKind::Sub => xa - xb,
                OpKind::Mul => xa * xb,
                OpKind::Div => xa / xb,
                OpKind::Exp => xa.exp(),
                OpKind::Ln => xa.ln(),
                OpKind::Tanh => xa.tanh(),
                OpKind::Sigmoid => 1.0 / (1.0 + (-xa).exp()),
                OpKind::Relu => xa.max(0.0),
                OpKind::PowConst(p) => xa.powf(p),
                _ => unreachable!(),
            };
            if !v.is_finite() || v.abs() > 100.0 {
                continue;
            }
            ops.push((kind, a, b));
            values.push(v);
        }
        Self { n_inputs, ops }
    }

    /// Replay on a tape; the final node is the program output (the last
    /// input when the op list is empty).
    pub fn eval<'t>(&self, tape: &'t Tape, inputs: &[Var<'t>]) -> Result<Var<'t>, AdError> {
        assert_eq!(inputs.len(), self.n_inputs);
        let mut vals: Vec<Var> = inputs.to_vec();
        for &(kind, a, b) in &self.ops {
            let out = if kind.is_binary() {
                tape.elementary(kind, vals[a], Some(vals[b]))?
            } else {
                tape.elementary(kind, vals[a], None)?
            };
            vals.push(out);
        }
        Ok(*vals.last().expect("non-empty inputs"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_stores_value_and_appends() {
        let t = Tape::new();
        let a = t.leaf(2.0).unwrap();
        assert_eq!(a.value(), 2.0);
        let _b = t.leaf(3.0).unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let t = Tape::new();
        assert!(t.leaf(f64::NAN).is_err());
        assert!(t.leaf(f64::INFINITY).is_err());
    }

    #[test]
    fn unused_leaf_has_zero_adjoint() {
        let t = Tape::new();
        let a = t.leaf(0.0).unwrap();
        let b = t.leaf(1.0).unwrap();
        let out = b * 2.0;
        let g = t.backward(out).unwrap();
        assert_eq!(g.wrt(a), 0.0);
    }

    #[test]
    fn product_rule() {
        let t = Tape::new();
        let x = t.leaf(2.0).unwrap();
        let y = t.leaf(3.0).unwrap();
        let f = x * y;
        assert_eq!(f.value(), 6.0);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x), 3.0);
        assert_eq!(g.wrt(y), 2.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let t = Tape::new();
        let x = t.leaf(0.0).unwrap();
        let s = x.sigmoid();
        assert_eq!(s.value(), 0.5);
        let g = t.backward(s).unwrap();
        assert!((g.wrt(x) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn relu_negative_branch() {
        let t = Tape::new();
        let x = t.leaf(-1.0).unwrap();
        let r = x.relu();
        assert_eq!(r.value(), 0.0);
        let g = t.backward(r).unwrap();
        assert_eq!(g.wrt(x), 0.0);
    }

    #[test]
    fn tanh_prime_at_zero() {
        let t = Tape::new();
        let x = t.leaf(0.0).unwrap();
        let f = x.tanh();
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x), 1.0);
    }

    #[test]
    fn exp_plus_square() {
        let t = Tape::new();
        let x = t.leaf(1.0).unwrap();
        let f = x.exp() + x.pow_const(2.0);
        let g = t.backward(f).unwrap();
        // d/dx (e^x + x^2) at 1 = e + 2
        assert!((g.wrt(x) - 4.718281828459045).abs() < 1e-12);
    }

    #[test]
    fn div_by_zero_rejected() {
        let t = Tape::new();
        let x = t.leaf(1.0).unwrap();
        let z = t.leaf(0.0).unwrap();
        assert!(matches!(
            t.elementary(OpKind::Div, x, Some(z)),
            Err(AdError::DivByZero { .. })
        ));
    }

    #[test]
    fn ln_domain_rejected() {
        let t = Tape::new();
        let x = t.leaf(-1.0).unwrap();
        assert!(matches!(x.ln(), Err(AdError::LnDomain { .. })));
    }

    #[test]
    fn foreign_variable_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(1.0).unwrap();
        assert!(matches!(t2.backward(a), Err(AdError::ForeignVariable)));
    }

    #[test]
    fn backward_of_seed_is_one() {
        let t = Tape::new();
        let x = t.leaf(4.0).unwrap();
        let g = t.backward(x).unwrap();
        assert_eq!(g.wrt(x), 1.0);
    }

    #[test]
    fn swish_values() {
        let t = Tape::new();
        let beta = t.leaf(1.0).unwrap();
        let x0 = t.leaf(0.0).unwrap();
        assert_eq!(x0.swish(beta).value(), 0.0);
        let x1 = t.leaf(1.0).unwrap();
        assert!((x1.swish(beta).value() - 0.7310585786300049).abs() < 1e-15);
        let b0 = t.leaf(0.0).unwrap();
        let x = t.leaf(3.0).unwrap();
        assert!((x.swish(b0).value() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn softplus_matches_reference() {
        let t = Tape::new();
        for x in [-20.0, -1.0, 0.0, 1.0, 20.0, 500.0] {
            let v = t.leaf(x).unwrap().softplus().value();
            let reference = if x > 30.0 { x } else { (1.0 + x.exp()).ln() };
            assert!((v - reference).abs() < 1e-12, "softplus({x}) = {v}");
        }
    }

    #[test]
    fn grad_check_square() {
        let report = grad_check(
            |_, xs| Ok(xs[0].pow_const(2.0)),
            &["x"],
            &[3.0],
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.pass);
        assert!((report.entries[0].analytic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn grad_check_constant() {
        let report = grad_check(
            |t, xs| Ok(xs[0] * 0.0 + t.constant(5.0)),
            &["x"],
            &[1.0],
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.entries[0].analytic, 0.0);
    }

    #[test]
    fn grad_check_report_serializes() {
        let report = grad_check(|_, xs| Ok(xs[0].exp()), &["x"], &[0.5], 1e-5, 1e-6).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"input_name\""));
        assert!(json.contains("\"rel_error\""));
    }

    #[test]
    fn linearity_of_backward() {
        // backward of a*f + b*g equals a*grad(f) + b*grad(g)
        let (a, b) = (2.5, -1.25);
        let point = [0.7, -0.4];
        fn f<'t>(xs: &[Var<'t>]) -> Var<'t> {
            (xs[0] * xs[1]).tanh()
        }
        fn g<'t>(xs: &[Var<'t>]) -> Var<'t> {
            xs[0].exp() + xs[1].pow_const(2.0)
        }

        let t = Tape::new();
        let xs: Vec<Var> = point.iter().map(|&x| t.leaf(x).unwrap()).collect();
        let combined = f(&xs) * a + g(&xs) * b;
        let gc = t.backward(combined).unwrap();

        let t2 = Tape::new();
        let xs2: Vec<Var> = point.iter().map(|&x| t2.leaf(x).unwrap()).collect();
        let gf = t2.backward(f(&xs2)).unwrap();
        let t3 = Tape::new();
        let xs3: Vec<Var> = point.iter().map(|&x| t3.leaf(x).unwrap()).collect();
        let gg = t3.backward(g(&xs3)).unwrap();

        for i in 0..2 {
            let expect = a * gf.wrt(xs2[i]) + b * gg.wrt(xs3[i]);
            assert!((gc.wrt(xs[i]) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_determinism() {
        let prog = RandomProgram::generate(42, 3, 50, &[0.5, -1.2, 1.8]);
        let run = || {
            let t = Tape::new();
            let xs: Vec<Var> = [0.5, -1.2, 1.8].iter().map(|&x| t.leaf(x).unwrap()).collect();
            let out = prog.eval(&t, &xs).unwrap();
            let g = t.backward(out).unwrap();
            (out.value(), xs.iter().map(|&x| g.wrt(x)).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn random_programs_pass_grad_check() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        for seed in 0..120u64 {
            let n_inputs = rng.gen_range(1..=4);
            let point: Vec<f64> = (0..n_inputs)
                .map(|_| {
                    // uniform in [-2,2] staying 0.1 clear of 0
                    let x: f64 = rng.gen_range(0.1..2.0);
                    if rng.gen_bool(0.5) {
                        x
                    } else {
                        -x
                    }
                })
                .collect();
            let prog = RandomProgram::generate(seed, n_inputs, 50, &point);
            let names: Vec<String> = (0..n_inputs).map(|i| format!("x{i}")).collect();
            let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            let h = 1e-6 * point.iter().fold(1.0f64, |m, x| m.max(x.abs()));
            let report = grad_check(
                |t, xs| prog.eval(t, xs),
                &name_refs,
                &point,
                h,
                1e-5,
            )
            .unwrap();
            assert!(report.pass, "seed {seed} failed: {report:?}");
            checked += 1;
        }
        assert!(checked >= 100);
    }
}
