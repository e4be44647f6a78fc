//! Forward-mode scalar used to push parameter sensitivities through the
//! simulator. The dynamics are written once, generic over `SimScalar`, and
//! instantiated at `f64` (plain stepping) and `Dual4` (value plus a
//! four-component tangent, one slot per physical parameter). Both
//! instantiations execute the same operation sequence on the value part, so
//! the plain step and the value carried by the dual step agree bit for bit.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Number of tangent slots (one per tunable physical parameter).
pub const N_PARAMS: usize = 4;

pub trait SimScalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    /// Value part; every branch in the dynamics tests this.
    fn re(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
}

impl SimScalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Value plus four-component tangent.
#[derive(Debug, Clone, Copy)]
pub struct Dual4 {
    pub v: f64,
    pub dx: [f64; N_PARAMS],
}

impl Dual4 {
    pub fn constant(v: f64) -> Self {
        Dual4 {
            v,
            dx: [0.0; N_PARAMS],
        }
    }

    /// Seeds tangent slot `slot` with 1, making this value the
    /// differentiation variable for that slot.
    pub fn variable(v: f64, slot: usize) -> Self {
        let mut dx = [0.0; N_PARAMS];
        dx[slot] = 1.0;
        Dual4 { v, dx }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        let mut dx = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            dx[i] = dv * self.dx[i];
        }
        Dual4 { v, dx }
    }
}

impl Add for Dual4 {
    type Output = Dual4;
    fn add(self, rhs: Dual4) -> Dual4 {
        let mut dx = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            dx[i] = self.dx[i] + rhs.dx[i];
        }
        Dual4 {
            v: self.v + rhs.v,
            dx,
        }
    }
}

impl Sub for Dual4 {
    type Output = Dual4;
    fn sub(self, rhs: Dual4) -> Dual4 {
        let mut dx = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            dx[i] = self.dx[i] - rhs.dx[i];
        }
        Dual4 {
            v: self.v - rhs.v,
            dx,
        }
    }
}

impl Mul for Dual4 {
    type Output = Dual4;
    fn mul(self, rhs: Dual4) -> Dual4 {
        let mut dx = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            dx[i] = self.dx[i] * rhs.v + self.v * rhs.dx[i];
        }
        Dual4 {
            v: self.v * rhs.v,
            dx,
        }
    }
}

impl Div for Dual4 {
    type Output = Dual4;
    fn div(self, rhs: Dual4) -> Dual4 {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        let mut dx = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            dx[i] = (self.dx[i] - v * rhs.dx[i]) * inv;
        }
        // Match the plain-f64 division result exactly.
        Dual4 {
            v: self.v / rhs.v,
            dx,
        }
    }
}

impl Neg for Dual4 {
    type Output = Dual4;
    fn neg(self) -> Dual4 {
        let mut dx = [0.0; N_PARAMS];
        for i in 0..N_PARAMS {
            dx[i] = -self.dx[i];
        }
        Dual4 { v: -self.v, dx }
    }
}

impl SimScalar for Dual4 {
    fn from_f64(v: f64) -> Self {
        Dual4::constant(v)
    }
    fn re(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        self.map(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.map(self.v.cos(), -self.v.sin())
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        self.map(t, 1.0 - t * t)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.map(e, e)
    }
    fn ln_1p(self) -> Self {
        self.map(self.v.ln_1p(), 1.0 / (1.0 + self.v))
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.map(s, 0.5 / s)
    }
}

/// `log(1 + exp(beta x)) / beta`, evaluated on the overflow-safe branch.
/// Strictly positive, monotone, and smooth; the force law's soft contact gate.
pub fn softplus_beta<S: SimScalar>(x: S, beta: f64) -> S {
    let z = x * S::from_f64(beta);
    let inv_beta = S::from_f64(1.0 / beta);
    if z.re() > 0.0 {
        (z + (-z).exp().ln_1p()) * inv_beta
    } else {
        z.exp().ln_1p() * inv_beta
    }
}

/// `tanh(|v|/eps) / |v|` as a function of the squared norm `q = |v|^2`.
/// Multiplying the result by the vector gives a smoothed unit direction with
/// magnitude `tanh(|v|/eps)`; a series branch keeps it well-defined (value
/// `1/eps`, zero tangent) through `v = 0`.
pub fn tanh_over_norm<S: SimScalar>(q: S, eps: f64) -> S {
    let inv_eps2 = 1.0 / (eps * eps);
    let x2 = q * S::from_f64(inv_eps2);
    if x2.re() <= 1e-4 {
        // tanh(x)/x = 1 - x^2/3 + 2 x^4/15 + O(x^6), x^2 = q/eps^2
        (S::from_f64(1.0) - x2 * S::from_f64(1.0 / 3.0)
            + x2 * x2 * S::from_f64(2.0 / 15.0))
            * S::from_f64(1.0 / eps)
    } else {
        let s = q.sqrt();
        (s * S::from_f64(1.0 / eps)).tanh() / s
    }
}

/// Branch-selected absolute value.
pub fn abs_s<S: SimScalar>(x: S) -> S {
    if x.re() < 0.0 {
        -x
    } else {
        x
    }
}

/// Branch-selected maximum against a constant.
pub fn max_const<S: SimScalar>(x: S, c: f64) -> S {
    if x.re() > c {
        x
    } else {
        S::from_f64(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A composite expression exercising every primitive.
    fn composite<S: SimScalar>(p: [S; 4]) -> S {
        let a = (p[0] * p[1]).sin() + p[2].sqrt() * p[3].tanh();
        let b = softplus_beta(a - S::from_f64(0.3), 55.0);
        let c = tanh_over_norm(b * b + p[1] * S::from_f64(0.01), 0.2);
        (c * p[2]).cos() + (-abs_s(a)).exp() + (p[0] / (p[3] + S::from_f64(2.0))).ln_1p()
    }

    #[test]
    fn dual_value_matches_f64_bitwise() {
        let vals = [0.37, 1.21, 0.85, 2.6];
        let plain = composite([vals[0], vals[1], vals[2], vals[3]]);
        let dual = composite([
            Dual4::variable(vals[0], 0),
            Dual4::variable(vals[1], 1),
            Dual4::variable(vals[2], 2),
            Dual4::variable(vals[3], 3),
        ]);
        assert_eq!(plain.to_bits(), dual.v.to_bits());
    }

    #[test]
    fn dual_gradient_matches_central_differences() {
        let base = [0.37, 1.21, 0.85, 2.6];
        let dual = composite([
            Dual4::variable(base[0], 0),
            Dual4::variable(base[1], 1),
            Dual4::variable(base[2], 2),
            Dual4::variable(base[3], 3),
        ]);
        for i in 0..4 {
            let h = 1e-6 * base[i].abs().max(1.0);
            let mut up = base;
            up[i] += h;
            let mut dn = base;
            dn[i] -= h;
            let fd = (composite(up) - composite(dn)) / (2.0 * h);
            let ad = dual.dx[i];
            let err = (ad - fd).abs();
            assert!(
                err <= 1e-4 * fd.abs().max(1e-8) + 1e-9,
                "slot {i}: ad = {ad}, fd = {fd}"
            );
        }
    }

    #[test]
    fn tanh_over_norm_smooth_through_zero() {
        // Zero input with zero tangent: value 1/eps, no NaN.
        let q = Dual4::constant(0.0);
        let g = tanh_over_norm(q, 0.05);
        assert!((g.v - 20.0).abs() < 1e-12);
        assert!(g.dx.iter().all(|d| *d == 0.0));
        // The series and direct branches agree at the switch point: evaluate
        // exactly on the boundary (series side) and a hair past it (direct
        // side) so the input difference itself is negligible.
        let eps = 0.05;
        let q_switch = 1e-4 * eps * eps;
        let lo = tanh_over_norm(q_switch, eps);
        let hi = tanh_over_norm(q_switch * (1.0 + 1e-9), eps);
        assert!((lo - hi).abs() / hi < 1e-9, "lo = {lo}, hi = {hi}");
    }

    #[test]
    fn softplus_branches_agree() {
        for x in [-0.01, -1e-6, 0.0, 1e-6, 0.01] {
            let v = softplus_beta(x, 500.0);
            let direct = (1.0 + (500.0 * x).exp()).ln() / 500.0;
            assert!((v - direct).abs() < 1e-12, "x = {x}");
            assert!(v > 0.0);
        }
        // Large arguments stay finite on the stable branch.
        let big = softplus_beta(10.0, 500.0);
        assert!(big.is_finite() && (big - 10.0).abs() < 1e-9);
    }
}
