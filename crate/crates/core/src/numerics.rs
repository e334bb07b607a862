//! Minimal reverse-mode automatic differentiation.
//!
//! Every value computed during a forward pass is appended to a [`Tape`] as a
//! node holding its value and the local partial derivatives with respect to
//! its parents. Because nodes are only ever appended, the tape order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Nodes may have any number of parents. Besides the elementary scalar
//! operations this lets callers record fused kernels (a soft minimum over a
//! whole constellation, say) as one node via [`Tape::node`], computing the
//! partials themselves.
//!
//! Complex numbers are carried as [`CVar`] pairs of real variables.

use crate::error::{Error, Result};

/// Handle to a scalar node on a [`Tape`].
///
/// A `Var` is only meaningful on the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Complex value as a pair of real tape variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

/// Record of a forward computation, consumed by a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<f64>,
    spans: Vec<(u32, u32)>,
    edges: Vec<(u32, f64)>,
    grads: Vec<f64>,
    differentiated: bool,
}

fn check_finite(op: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NumericDomain {
            op,
            detail: format!("non-finite result {value}"),
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node but keeps the allocations for reuse.
    pub fn clear(&mut self) {
        self.values.clear();
        self.spans.clear();
        self.edges.clear();
        self.grads.clear();
        self.differentiated = false;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of recorded (parent, partial) edges.
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Independent variable. Constants are leaves whose gradient is ignored.
    pub fn leaf(&mut self, value: f64) -> Result<Var> {
        self.node("leaf", value, [])
    }

    pub fn leaves(&mut self, values: &[f64]) -> Result<Vec<Var>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn complex_leaf(&mut self, re: f64, im: f64) -> Result<CVar> {
        Ok(CVar {
            re: self.leaf(re)?,
            im: self.leaf(im)?,
        })
    }

    /// Records a node with explicit local partials.
    ///
    /// The result and every partial must be finite. Zero partials are not
    /// stored.
    pub fn node<I>(&mut self, op: &'static str, value: f64, parents: I) -> Result<Var>
    where
        I: IntoIterator<Item = (Var, f64)>,
    {
        check_finite(op, value)?;
        if self.differentiated {
            return Err(Error::Usage(
                "tape already differentiated; clear it before recording".into(),
            ));
        }
        let index = u32::try_from(self.values.len())
            .map_err(|_| Error::Usage("tape exceeds u32 node capacity".into()))?;
        let start = self.edges.len();
        for (parent, partial) in parents {
            if !partial.is_finite() {
                self.edges.truncate(start);
                return Err(Error::NumericDomain {
                    op,
                    detail: format!("non-finite local partial {partial}"),
                });
            }
            debug_assert!(parent.0 < index, "parent recorded after child");
            if partial != 0.0 {
                self.edges.push((parent.0, partial));
            }
        }
        let len = (self.edges.len() - start) as u32;
        self.values.push(value);
        self.spans.push((start as u32, len));
        Ok(Var(index))
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    pub fn cvalue(&self, z: CVar) -> num_complex::Complex64 {
        num_complex::Complex64::new(self.value(z.re), self.value(z.im))
    }

    /// Accumulated adjoint of `v`; zero before [`Tape::backward`].
    pub fn grad(&self, v: Var) -> f64 {
        self.grads.get(v.index()).copied().unwrap_or(0.0)
    }

    /// Local partials recorded for `v`, for inspection in tests.
    pub fn partials(&self, v: Var) -> impl Iterator<Item = (Var, f64)> + '_ {
        let (start, len) = self.spans[v.index()];
        self.edges[start as usize..(start + len) as usize]
            .iter()
            .map(|&(p, d)| (Var(p), d))
    }

    /// Propagates adjoints from the scalar `root` to every ancestor.
    ///
    /// A tape can be differentiated once; a second call is a usage error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::Usage("backward called twice on the same tape".into()));
        }
        if root.index() >= self.values.len() {
            return Err(Error::Usage("root does not belong to this tape".into()));
        }
        self.differentiated = true;
        self.grads.clear();
        self.grads.resize(root.index() + 1, 0.0);
        self.grads[root.index()] = 1.0;
        for i in (0..=root.index()).rev() {
            let g = self.grads[i];
            if g == 0.0 {
                continue;
            }
            let (start, len) = self.spans[i];
            for &(parent, partial) in &self.edges[start as usize..(start + len) as usize] {
                self.grads[parent as usize] += g * partial;
            }
        }
        Ok(())
    }

    /// Backward from a 1×1 tensor.
    pub fn backward_tensor(&mut self, root: &Tensor) -> Result<()> {
        if root.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        self.backward(root.data[0])
    }

    // Scalar operations.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a) + self.value(b);
        self.node("add", v, [(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a) - self.value(b);
        self.node("sub", v, [(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        self.node("mul", x * y, [(a, y), (b, x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if y == 0.0 {
            return Err(Error::NumericDomain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.node("div", x / y, [(a, 1.0 / y), (b, -x / (y * y))])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = -self.value(a);
        self.node("neg", v, [(a, -1.0)])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        self.node("square", x * x, [(a, 2.0 * x)])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x <= 0.0 {
            return Err(Error::NumericDomain {
                op: "sqrt",
                detail: format!("argument {x} is not positive"),
            });
        }
        let r = x.sqrt();
        self.node("sqrt", r, [(a, 0.5 / r)])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let e = self.value(a).exp();
        self.node("exp", e, [(a, e)])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x <= 0.0 {
            return Err(Error::NumericDomain {
                op: "ln",
                detail: format!("argument {x} is not positive"),
            });
        }
        self.node("ln", x.ln(), [(a, 1.0 / x)])
    }

    /// Rectifier; the subgradient at exactly zero is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x > 0.0 {
            self.node("relu", x, [(a, 1.0)])
        } else {
            self.node("relu", 0.0, [(a, 0.0)])
        }
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).tanh();
        self.node("tanh", t, [(a, 1.0 - t * t)])
    }

    /// ln(1 + e^x), evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        self.node("softplus", softplus(x), [(a, sigmoid(x))])
    }

    /// Clamps to `[lo, hi]` with zero gradient outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let x = self.value(a);
        if x < lo {
            self.node("clamp", lo, [(a, 0.0)])
        } else if x > hi {
            self.node("clamp", hi, [(a, 0.0)])
        } else {
            self.node("clamp", x, [(a, 1.0)])
        }
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a) + c;
        self.node("add_const", v, [(a, 1.0)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a) * c;
        self.node("scale", v, [(a, c)])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let v = xs.iter().map(|&x| self.value(x)).sum();
        let parents: Vec<_> = xs.iter().map(|&x| (x, 1.0)).collect();
        self.node("sum", v, parents)
    }

    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape("mean of an empty slice".into()));
        }
        let w = 1.0 / xs.len() as f64;
        let v = xs.iter().map(|&x| self.value(x)).sum::<f64>() * w;
        let parents: Vec<_> = xs.iter().map(|&x| (x, w)).collect();
        self.node("mean", v, parents)
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Result<Var> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("dot of lengths {} and {}", a.len(), b.len())));
        }
        let mut v = 0.0;
        let mut parents = Vec::with_capacity(2 * a.len());
        for (&x, &y) in a.iter().zip(b) {
            let (xv, yv) = (self.value(x), self.value(y));
            v += xv * yv;
            parents.push((x, yv));
            parents.push((y, xv));
        }
        self.node("dot", v, parents)
    }

    /// Temperature-scaled softmin weights `exp(-d_b/t) / Σ_c exp(-d_c/t)`.
    pub fn softmin_weights(&mut self, d: &[Var], temperature: f64) -> Result<Vec<Var>> {
        let values: Vec<f64> = d.iter().map(|&x| self.value(x)).collect();
        let w = softmin_weights(&values, temperature)?;
        let inv_t = 1.0 / temperature;
        let mut out = Vec::with_capacity(d.len());
        for a in 0..d.len() {
            // dw_a/dd_b = -(w_a / t) (δ_ab - w_b)
            let parents = d.iter().enumerate().map(|(b, &db)| {
                let delta = if a == b { 1.0 } else { 0.0 };
                (db, -w[a] * inv_t * (delta - w[b]))
            });
            out.push(self.node("softmin_weights", w[a], parents)?);
        }
        Ok(out)
    }

    // Complex helpers.

    pub fn cadd_const(&mut self, z: CVar, c: num_complex::Complex64) -> Result<CVar> {
        Ok(CVar {
            re: self.add_const(z.re, c.re)?,
            im: self.add_const(z.im, c.im)?,
        })
    }

    /// z · e^{jθ}.
    pub fn crotate(&mut self, z: CVar, theta: f64) -> Result<CVar> {
        let (s, c) = theta.sin_cos();
        let (x, y) = (self.value(z.re), self.value(z.im));
        Ok(CVar {
            re: self.node("crotate", x * c - y * s, [(z.re, c), (z.im, -s)])?,
            im: self.node("crotate", x * s + y * c, [(z.re, s), (z.im, c)])?,
        })
    }

    /// |z|².
    pub fn cabs2(&mut self, z: CVar) -> Result<Var> {
        let (x, y) = (self.value(z.re), self.value(z.im));
        self.node("cabs2", x * x + y * y, [(z.re, 2.0 * x), (z.im, 2.0 * y)])
    }

    // Tensor operations.

    /// Standard product `W · x` for `W` of shape (n × k) and a column `x` (k × 1).
    pub fn matvec(&mut self, w: &Tensor, x: &Tensor) -> Result<Tensor> {
        if x.cols != 1 || w.cols != x.rows {
            return Err(Error::Shape(format!(
                "matvec of {:?} by {:?}",
                w.shape(),
                x.shape()
            )));
        }
        let mut out = Vec::with_capacity(w.rows);
        for r in 0..w.rows {
            out.push(self.dot(w.row(r), &x.data)?);
        }
        Tensor::new(w.rows, 1, out)
    }

    pub fn add_tensors(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_tensors(a, b, Tape::add)
    }

    pub fn sub_tensors(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_tensors(a, b, Tape::sub)
    }

    pub fn mul_tensors(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_tensors(a, b, Tape::mul)
    }

    pub fn div_tensors(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_tensors(a, b, Tape::div)
    }

    /// Elementwise unary map, e.g. `tape.map_tensor(&h, Tape::relu)`.
    pub fn map_tensor(
        &mut self,
        a: &Tensor,
        f: impl Fn(&mut Tape, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let data = a.data.iter().map(|&x| f(self, x)).collect::<Result<_>>()?;
        Tensor::new(a.rows, a.cols, data)
    }

    fn zip_tensors(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| f(self, x, y))
            .collect::<Result<_>>()?;
        Tensor::new(a.rows, a.cols, data)
    }

    /// Sum of all elements as a 1×1 tensor.
    pub fn sum_tensor(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = self.sum(&a.data)?;
        Tensor::new(1, 1, vec![s])
    }
}

/// Dense row-major matrix of tape variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<Var>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<Var>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn column(data: Vec<Var>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    /// Tensor of fresh leaves.
    pub fn leaves(tape: &mut Tape, rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                values.len()
            )));
        }
        Self::new(rows, cols, tape.leaves(values)?)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> Var {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Var] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<Var> {
        self.data
    }

    pub fn values(&self, tape: &Tape) -> Vec<f64> {
        self.data.iter().map(|&v| tape.value(v)).collect()
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmin weights over `d`, stabilized by subtracting `min(d)`.
pub fn softmin_weights(d: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if d.is_empty() {
        return Err(Error::Shape("softmin over an empty vector".into()));
    }
    if let Some(bad) = d.iter().find(|x| !x.is_finite()) {
        return Err(Error::NumericDomain {
            op: "softmin_weights",
            detail: format!("non-finite input {bad}"),
        });
    }
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = d.iter().map(|&x| (-(x - min) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// Result of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of `f` at `x` to central differences.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |analytic|)`.
/// Points where `f` is not differentiable (a relu argument at exactly zero)
/// report the subgradient and will generally disagree with the difference
/// quotient; callers must keep away from them.
pub fn gradcheck<F>(f: F, x: &[f64], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars = tape.leaves(x)?;
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<f64> = vars.iter().map(|&v| tape.grad(v)).collect();

    let eval = |point: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let vs = t.leaves(point)?;
        let r = f(&mut t, &vs)?;
        Ok(t.value(r))
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut point = x.to_vec();
    for i in 0..x.len() {
        point[i] = x[i] + step;
        let up = eval(&point)?;
        point[i] = x[i] - step;
        let down = eval(&point)?;
        point[i] = x[i];
        numeric.push((up - down) / (2.0 * step));
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        analytic,
        numeric,
    })
}
