//! Critics: the polynomial-in-time, affine-in-state linear basis with exact
//! interval integrals, an MLP critic, and Gauss-Legendre quadrature.

use nalgebra::{DMatrix, DVector};

use crate::tinynn::{Mlp, Tape};

/// Anything that can be evaluated as `J(t, x)`.
pub trait Critic: Sync {
    fn value(&self, t: f64, x: &[u32]) -> f64;
}

/// Basis `phi(t, x)` with entries `u^l` and `x_i u^l`, `u = 1 - t/T`,
/// ordered as `[(1, l = 0..=d), (x_1, l = 0..=d), ..., (x_m, l = 0..=d)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBasis {
    m: usize,
    d: usize,
    horizon: f64,
}

impl PolyBasis {
    pub fn new(m: usize, d: usize, horizon: f64) -> Self {
        assert!(horizon > 0.0);
        PolyBasis { m, d, horizon }
    }

    pub fn m(&self) -> usize {
        self.m
    }
    pub fn degree(&self) -> usize {
        self.d
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `W = (m + 1)(d + 1)`.
    pub fn dim(&self) -> usize {
        (self.m + 1) * (self.d + 1)
    }

    #[inline]
    fn coord(x: &[u32], i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            x[i - 1] as f64
        }
    }

    pub fn eval_into(&self, t: f64, x: &[u32], out: &mut [f64]) {
        let u = 1.0 - t / self.horizon;
        let k = self.d + 1;
        for i in 0..=self.m {
            let z = Self::coord(x, i);
            let mut p = 1.0;
            for l in 0..k {
                out[i * k + l] = z * p;
                p *= u;
            }
        }
    }

    pub fn eval(&self, t: f64, x: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, x, &mut out);
        out
    }

    /// Exact time derivative of `eval`.
    pub fn eval_dt(&self, t: f64, x: &[u32]) -> Vec<f64> {
        let u = 1.0 - t / self.horizon;
        let k = self.d + 1;
        let mut out = vec![0.0; self.dim()];
        for i in 0..=self.m {
            let z = Self::coord(x, i);
            let mut p = 1.0; // u^(l-1)
            for l in 1..k {
                out[i * k + l] = -(l as f64) / self.horizon * z * p;
                p *= u;
            }
        }
        out
    }

    /// `P_k = int_{t1}^{t2} u(s)^k ds` for `k = 0..=2d`, evaluated without cancellation.
    fn power_integrals(&self, t1: f64, t2: f64) -> Vec<f64> {
        let u1 = 1.0 - t1 / self.horizon;
        let u2 = 1.0 - t2 / self.horizon;
        let len = t2 - t1;
        let kmax = 2 * self.d;
        let mut out = Vec::with_capacity(kmax + 1);
        // (u1^{k+1} - u2^{k+1}) / (u1 - u2) = sum_{i=0}^{k} u1^i u2^{k-i}
        let mut pows1 = vec![1.0; kmax + 1];
        let mut pows2 = vec![1.0; kmax + 1];
        for k in 1..=kmax {
            pows1[k] = pows1[k - 1] * u1;
            pows2[k] = pows2[k - 1] * u2;
        }
        for k in 0..=kmax {
            let s: f64 = (0..=k).map(|i| pows1[i] * pows2[k - i]).sum();
            out.push(len * s / (k + 1) as f64);
        }
        out
    }

    /// `int_{t1}^{t2} phi(s, x) ds`.
    pub fn b_bar(&self, t1: f64, t2: f64, x: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.add_b_bar(t1, t2, x, 1.0, &mut out);
        out
    }

    pub fn add_b_bar(&self, t1: f64, t2: f64, x: &[u32], scale: f64, out: &mut [f64]) {
        let p = self.power_integrals(t1, t2);
        let k = self.d + 1;
        for i in 0..=self.m {
            let z = Self::coord(x, i) * scale;
            for l in 0..k {
                out[i * k + l] += z * p[l];
            }
        }
    }

    /// `int_{t1}^{t2} phi phi^T ds`.
    pub fn d_bar(&self, t1: f64, t2: f64, x: &[u32]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        self.add_d_bar(t1, t2, x, 1.0, &mut out);
        out
    }

    pub fn add_d_bar(&self, t1: f64, t2: f64, x: &[u32], scale: f64, out: &mut DMatrix<f64>) {
        let p = self.power_integrals(t1, t2);
        let k = self.d + 1;
        for i in 0..=self.m {
            let zi = Self::coord(x, i) * scale;
            for j in 0..=self.m {
                let zz = zi * Self::coord(x, j);
                if zz == 0.0 {
                    continue;
                }
                for l in 0..k {
                    for l2 in 0..k {
                        out[(i * k + l, j * k + l2)] += zz * p[l + l2];
                    }
                }
            }
        }
    }

    /// `int_{t1}^{t2} phi (d phi / ds)^T ds`.
    pub fn f_bar(&self, t1: f64, t2: f64, x: &[u32]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        self.add_f_bar(t1, t2, x, 1.0, &mut out);
        out
    }

    pub fn add_f_bar(&self, t1: f64, t2: f64, x: &[u32], scale: f64, out: &mut DMatrix<f64>) {
        let p = self.power_integrals(t1, t2);
        let k = self.d + 1;
        for i in 0..=self.m {
            let zi = Self::coord(x, i) * scale;
            for j in 0..=self.m {
                let zz = zi * Self::coord(x, j);
                if zz == 0.0 {
                    continue;
                }
                for l in 0..k {
                    for l2 in 1..k {
                        out[(i * k + l, j * k + l2)] -=
                            zz * (l2 as f64) / self.horizon * p[l + l2 - 1];
                    }
                }
            }
        }
    }
}

/// `J(t, x) = theta . phi(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCritic {
    pub basis: PolyBasis,
    pub theta: Vec<f64>,
}

impl LinearCritic {
    pub fn zeros(basis: PolyBasis) -> Self {
        let theta = vec![0.0; basis.dim()];
        LinearCritic { basis, theta }
    }

    pub fn new(basis: PolyBasis, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), basis.dim());
        LinearCritic { basis, theta }
    }
}

impl Critic for LinearCritic {
    fn value(&self, t: f64, x: &[u32]) -> f64 {
        let u = 1.0 - t / self.basis.horizon;
        let k = self.basis.d + 1;
        let mut total = 0.0;
        for i in 0..=self.basis.m {
            let z = PolyBasis::coord(x, i);
            if z == 0.0 {
                continue;
            }
            // Horner in u.
            let mut acc = 0.0;
            for l in (0..k).rev() {
                acc = acc * u + self.theta[i * k + l];
            }
            total += z * acc;
        }
        total
    }
}

/// Inputs fed to an MLP critic.
#[derive(Debug, Clone, PartialEq)]
pub enum CriticFeatures {
    /// `(t/T, x_1/c_1, ..., x_m/c_m)`.
    Scaled { horizon: f64, capacity: Vec<u32> },
    /// The linear basis itself.
    Poly(PolyBasis),
}

impl CriticFeatures {
    pub fn dim(&self) -> usize {
        match self {
            CriticFeatures::Scaled { capacity, .. } => capacity.len() + 1,
            CriticFeatures::Poly(b) => b.dim(),
        }
    }

    pub fn fill(&self, t: f64, x: &[u32], out: &mut Vec<f64>) {
        out.clear();
        match self {
            CriticFeatures::Scaled { horizon, capacity } => {
                out.push(t / horizon);
                for (xi, ci) in x.iter().zip(capacity) {
                    out.push(if *ci == 0 {
                        0.0
                    } else {
                        *xi as f64 / *ci as f64
                    });
                }
            }
            CriticFeatures::Poly(b) => {
                out.resize(b.dim(), 0.0);
                b.eval_into(t, x, out);
            }
        }
    }
}

/// Scalar-output MLP critic.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCritic {
    pub net: Mlp,
    pub features: CriticFeatures,
}

impl MlpCritic {
    pub fn new(net: Mlp, features: CriticFeatures) -> Self {
        assert_eq!(net.input_dim(), features.dim());
        assert_eq!(net.output_dim(), 1);
        MlpCritic { net, features }
    }

    /// Value and `scale * grad_params J` accumulated into `grad`.
    pub fn value_grad(&self, t: f64, x: &[u32], scale: f64, grad: &mut [f64]) -> f64 {
        let mut input = Vec::new();
        let mut tape = Tape::default();
        self.features.fill(t, x, &mut input);
        self.net.forward_tape(&input, &mut tape).unwrap();
        self.net.backward(&tape, &[1.0], scale, grad);
        tape.output()[0]
    }
}

impl Critic for MlpCritic {
    fn value(&self, t: f64, x: &[u32]) -> f64 {
        let mut input = Vec::new();
        self.features.fill(t, x, &mut input);
        self.net.forward(&input).unwrap()[0]
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    // Returns (P_n(x), P_{n-1}(x)).
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    (p1, p0)
}

/// Gauss-Legendre rule on `[-1, 1]` with its spectral integration matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// `cumulative[q][k]`: weight of `f(x_k)` in `int_{-1}^{x_q} f`.
    cumulative: Vec<Vec<f64>>,
}

impl QuadratureRule {
    pub fn gauss_legendre(order: usize) -> Self {
        assert!(order >= 1);
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, pm1) = legendre(n, x);
                let dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (p, pm1) = legendre(n, x);
            let dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            nodes[n - 1 - i] = x;
            weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        // Integration matrix via the discrete Legendre transform.
        let mut cumulative = vec![vec![0.0; n]; n];
        for q in 0..n {
            let xq = nodes[q];
            for k in 0..n {
                let mut s = 0.0;
                for deg in 0..n {
                    let int_to_xq = if deg == 0 {
                        xq + 1.0
                    } else {
                        (legendre(deg + 1, xq).0 - legendre(deg - 1, xq).0) / (2 * deg + 1) as f64
                    };
                    s += int_to_xq * (2 * deg + 1) as f64 / 2.0 * legendre(deg, nodes[k]).0;
                }
                cumulative[q][k] = s * weights[k];
            }
        }
        QuadratureRule {
            nodes,
            weights,
            cumulative,
        }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * x, half * w))
    }

    /// Cumulative-integration weights for the mapped interval: `int_a^{s_q} f ~ sum_k C[q][k] f(s_k)`.
    pub fn cumulative_weight(&self, q: usize, k: usize, a: f64, b: f64) -> f64 {
        0.5 * (b - a) * self.cumulative[q][k]
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        if b == a {
            return 0.0;
        }
        self.mapped(a, b).map(|(s, w)| w * f(s)).sum()
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        QuadratureRule::gauss_legendre(8)
    }
}

/// `E(t1, t2, x; v) = int v(s) H(s) ds` for a scalar weight.
pub fn entropy_integral<V, H>(rule: &QuadratureRule, t1: f64, t2: f64, weight: V, entropy: H) -> f64
where
    V: Fn(f64) -> f64,
    H: Fn(f64) -> f64,
{
    rule.integrate(t1, t2, |s| weight(s) * entropy(s))
}

/// Vector-weight variant: `out += scale * int v(s) H(s) ds`, where `weight(s, buf)` fills `v(s)`.
pub fn entropy_integral_vec<V, H>(
    rule: &QuadratureRule,
    t1: f64,
    t2: f64,
    mut weight: V,
    entropy: H,
    scale: f64,
    out: &mut [f64],
) where
    V: FnMut(f64, &mut [f64]),
    H: Fn(f64) -> f64,
{
    if t1 == t2 {
        return;
    }
    let mut buf = vec![0.0; out.len()];
    for (s, w) in rule.mapped(t1, t2) {
        let h = entropy(s);
        if h == 0.0 {
            continue;
        }
        buf.iter_mut().for_each(|b| *b = 0.0);
        weight(s, &mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o += scale * w * h * b;
        }
    }
}

/// Converts a slice to an nalgebra column vector.
pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
