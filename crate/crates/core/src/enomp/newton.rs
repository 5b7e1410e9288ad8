//! Newton refinement of a single atom's continuous parameters.
//!
//! For fixed residual `y` and gain `g` the objective is
//! `S = 2 Re{y^H g c} - |g|^2 ||c||^2`. Every codeword entry is
//! `exp(j psi)` with `psi` linear in the element and subcarrier indices,
//! so all derivatives reduce to low-order index moments of `conj(y) c`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::sysmodel::{cis, delay_vector, steering_factors, SystemConfig};

/// Separable factors of one atom `a_v (x) a_h (x) p`.
#[derive(Debug, Clone)]
pub(crate) struct Atom {
    pub theta: f64,
    pub phi: f64,
    pub delay: f64,
    pub a_v: Vec<Complex64>,
    pub a_h: Vec<Complex64>,
    pub p: Vec<Complex64>,
}

impl Atom {
    pub fn new(theta: f64, phi: f64, delay: f64, cfg: &SystemConfig) -> Self {
        let (a_v, a_h) = steering_factors(theta, phi, cfg);
        let p = delay_vector(delay, cfg.n_subcarriers, cfg.subcarrier_spacing);
        Self {
            theta,
            phi,
            delay,
            a_v,
            a_h,
            p,
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        (self.a_v.len() * self.a_h.len() * self.p.len()) as f64
    }

    /// `c^H y`.
    pub fn inner(&self, y: &[Complex64]) -> Complex64 {
        let n = self.p.len();
        let mut acc = Complex64::default();
        for (iv, v) in self.a_v.iter().enumerate() {
            for (ih, h) in self.a_h.iter().enumerate() {
                let m = iv * self.a_h.len() + ih;
                let s: Complex64 = self
                    .p
                    .iter()
                    .zip(&y[m * n..(m + 1) * n])
                    .map(|(p, y)| p.conj() * y)
                    .sum();
                acc += (v * h).conj() * s;
            }
        }
        acc
    }

    /// `y += g c`.
    pub fn add_to(&self, y: &mut [Complex64], g: Complex64) {
        let n = self.p.len();
        for (iv, v) in self.a_v.iter().enumerate() {
            for (ih, h) in self.a_h.iter().enumerate() {
                let m = iv * self.a_h.len() + ih;
                let w = g * v * h;
                for (y, p) in y[m * n..(m + 1) * n].iter_mut().zip(&self.p) {
                    *y += w * p;
                }
            }
        }
    }

    /// `c_self^H c_other` via the separable factors.
    pub fn gram(&self, other: &Atom) -> Complex64 {
        let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 {
            a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
        };
        dot(&self.a_v, &other.a_v) * dot(&self.a_h, &other.a_h) * dot(&self.p, &other.p)
    }
}

/// Objective value, gradient and Hessian with respect to
/// `(theta [rad], phi [rad], tau [s])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivatives {
    pub value: f64,
    pub gradient: [f64; 3],
    pub hessian: [[f64; 3]; 3],
}

/// Outcome of one safeguarded Newton step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonStep {
    pub theta: f64,
    pub phi: f64,
    pub delay: f64,
    pub accepted: bool,
}

pub(crate) fn objective_value(y: &[Complex64], g: Complex64, atom: &Atom) -> f64 {
    let inner = atom.inner(y);
    2.0 * (g * inner.conj()).re - g.norm_sqr() * atom.norm_sqr()
}

/// `S(theta, phi, tau)` for a residual and a fixed gain.
pub fn objective_s(
    y: &[Complex64],
    g: Complex64,
    theta: f64,
    phi: f64,
    delay: f64,
    cfg: &SystemConfig,
) -> f64 {
    objective_value(y, g, &Atom::new(theta, phi, delay, cfg))
}

/// Coarse gain `c^H y / ||c||^2`.
pub fn coarse_gain(y: &[Complex64], theta: f64, phi: f64, delay: f64, cfg: &SystemConfig) -> Complex64 {
    let atom = Atom::new(theta, phi, delay, cfg);
    atom.inner(y) / atom.norm_sqr()
}

// Index monomials: 1, v, h, n, vv, vh, vn, hh, hn, nn.
const ONE: usize = 0;
const V: usize = 1;
const H: usize = 2;
const N: usize = 3;

fn quad_slot(a: usize, b: usize) -> usize {
    match (a.min(b), a.max(b)) {
        (V, V) => 4,
        (V, H) => 5,
        (V, N) => 6,
        (H, H) => 7,
        (H, N) => 8,
        (N, N) => 9,
        _ => unreachable!(),
    }
}

/// A phase derivative `cv * m_v + ch * m_h + cn * n`.
type Linear = [f64; 3];

fn eval_linear(m: &[Complex64; 10], l: &Linear) -> Complex64 {
    m[V] * l[0] + m[H] * l[1] + m[N] * l[2]
}

fn eval_product(m: &[Complex64; 10], a: &Linear, b: &Linear) -> Complex64 {
    let mut acc = Complex64::default();
    for (i, ca) in a.iter().enumerate() {
        for (j, cb) in b.iter().enumerate() {
            if *ca != 0.0 && *cb != 0.0 {
                acc += m[quad_slot(i + 1, j + 1)] * (ca * cb);
            }
        }
    }
    acc
}

pub(crate) fn derivatives_of(y: &[Complex64], g: Complex64, atom: &Atom, cfg: &SystemConfig) -> Derivatives {
    derivatives_about(y, g, atom, cfg, [0.0; 3])
}

/// Index origin at the array and band centre.
fn centre(atom: &Atom) -> [f64; 3] {
    let c = |len: usize| (len as f64 - 1.0) / 2.0;
    [c(atom.a_v.len()), c(atom.a_h.len()), c(atom.p.len())]
}

/// Phase of the atom entry at index `origin`.
fn phase_at(atom: &Atom, origin: [f64; 3], cfg: &SystemConfig) -> f64 {
    let k = 2.0 * PI * cfg.spacing_ratio;
    k * (atom.theta.sin() * origin[0] + atom.theta.cos() * atom.phi.sin() * origin[1])
        + 2.0 * PI * cfg.subcarrier_spacing * atom.delay * origin[2]
}

/// Derivatives with the gain phase held fixed relative to the atom entry
/// at `origin` rather than at index zero.
fn derivatives_about(
    y: &[Complex64],
    g: Complex64,
    atom: &Atom,
    cfg: &SystemConfig,
    origin: [f64; 3],
) -> Derivatives {
    let n = atom.p.len();
    let m_h = atom.a_h.len();

    // Moments of w = conj(y) c over the index monomials.
    let mut mom = [Complex64::default(); 10];
    for (iv, av) in atom.a_v.iter().enumerate() {
        for (ih, ah) in atom.a_h.iter().enumerate() {
            let m = iv * m_h + ih;
            let (mut t0, mut t1, mut t2) = (Complex64::default(), Complex64::default(), Complex64::default());
            for (k, (p, y)) in atom.p.iter().zip(&y[m * n..(m + 1) * n]).enumerate() {
                let w = y.conj() * p;
                let kf = k as f64 - origin[2];
                t0 += w;
                t1 += w * kf;
                t2 += w * (kf * kf);
            }
            let s = av * ah;
            let (t0, t1, t2) = (t0 * s, t1 * s, t2 * s);
            let (v, h) = (iv as f64 - origin[0], ih as f64 - origin[1]);
            mom[ONE] += t0;
            mom[V] += t0 * v;
            mom[H] += t0 * h;
            mom[N] += t1;
            mom[4] += t0 * (v * v);
            mom[5] += t0 * (v * h);
            mom[6] += t1 * v;
            mom[7] += t0 * (h * h);
            mom[8] += t1 * h;
            mom[9] += t2;
        }
    }

    let k = 2.0 * PI * cfg.spacing_ratio;
    let (st, ct) = atom.theta.sin_cos();
    let (sp, cp) = atom.phi.sin_cos();
    let dtau = 2.0 * PI * cfg.subcarrier_spacing;

    let first: [Linear; 3] = [
        [k * ct, -k * st * sp, 0.0],
        [0.0, k * ct * cp, 0.0],
        [0.0, 0.0, dtau],
    ];
    let zero: Linear = [0.0; 3];
    let second = |a: usize, b: usize| -> Linear {
        match (a.min(b), a.max(b)) {
            (0, 0) => [-k * st, -k * ct * sp, 0.0],
            (0, 1) => [0.0, -k * st * cp, 0.0],
            (1, 1) => [0.0, -k * ct * sp, 0.0],
            _ => zero,
        }
    };

    let value = 2.0 * (g * mom[ONE]).re - g.norm_sqr() * atom.norm_sqr();
    let j = Complex64::new(0.0, 1.0);
    let mut gradient = [0.0; 3];
    for (x, gx) in gradient.iter_mut().enumerate() {
        *gx = 2.0 * (g * j * eval_linear(&mom, &first[x])).re;
    }
    let mut hessian = [[0.0; 3]; 3];
    for x in 0..3 {
        for y_ in x..3 {
            let t = j * eval_linear(&mom, &second(x, y_)) - eval_product(&mom, &first[x], &first[y_]);
            let v = 2.0 * (g * t).re;
            hessian[x][y_] = v;
            hessian[y_][x] = v;
        }
    }
    Derivatives {
        value,
        gradient,
        hessian,
    }
}

/// Gradient and Hessian of `S` at `(theta, phi, tau)`.
pub fn objective_derivatives(
    y: &[Complex64],
    g: Complex64,
    theta: f64,
    phi: f64,
    delay: f64,
    cfg: &SystemConfig,
) -> Derivatives {
    derivatives_of(y, g, &Atom::new(theta, phi, delay, cfg), cfg)
}

pub(crate) fn clamp_angle(x: f64) -> f64 {
    // largest representable value below pi/2
    let upper = FRAC_PI_2 - FRAC_PI_2 * f64::EPSILON;
    x.clamp(-FRAC_PI_2, upper)
}

pub(crate) fn wrap_delay(tau: f64, period: f64) -> f64 {
    let w = tau.rem_euclid(period);
    if w >= period {
        0.0
    } else {
        w
    }
}

/// One Newton step on `S`; applied only when the Hessian is negative
/// definite and the step increases `S`.
pub(crate) fn newton_step(
    y: &[Complex64],
    g: Complex64,
    atom: &Atom,
    cfg: &SystemConfig,
    diagonal_fallback: bool,
) -> Result<Option<Atom>> {
    // Holding the phase at the centre decouples gain phase from the
    // angle and delay updates.
    let origin = centre(atom);
    let d = derivatives_about(y, g, atom, cfg, origin);
    let finite = d.gradient.iter().all(|x| x.is_finite())
        && d.hessian.iter().flatten().all(|x| x.is_finite())
        && d.value.is_finite();
    if !finite {
        return Err(Error::NonFiniteDerivative);
    }

    // Work with the delay in units of 1/delta_f so the system is well scaled.
    let period = cfg.max_delay();
    let scale = Vector3::new(1.0, 1.0, period);
    let grad = Vector3::from(d.gradient).component_mul(&scale);
    let mut hess = Matrix3::from_fn(|r, c| d.hessian[r][c] * scale[r] * scale[c]);
    hess = (hess + hess.transpose()) * 0.5;

    let step = match (-hess).cholesky() {
        // -H is positive definite: step = -H^{-1} grad = (-H)^{-1} grad
        Some(chol) => chol.solve(&grad),
        // otherwise move only along the coordinates where S is concave
        None if diagonal_fallback && (0..3).any(|i| hess[(i, i)] < 0.0) => Vector3::from_fn(|i, _| {
            if hess[(i, i)] < 0.0 {
                -grad[i] / hess[(i, i)]
            } else {
                0.0
            }
        }),
        None => return Ok(None),
    };
    if !step.iter().all(|x| x.is_finite()) {
        return Ok(None);
    }
    let halvings = if diagonal_fallback { 4 } else { 0 };
    let mut step = step;
    for _ in 0..=halvings {
        let theta = clamp_angle(atom.theta + step[0]);
        let phi = clamp_angle(atom.phi + step[1]);
        let delay = wrap_delay(atom.delay + step[2] * period, period);
        let candidate = Atom::new(theta, phi, delay, cfg);
        let g_moved = g * cis(phase_at(atom, origin, cfg) - phase_at(&candidate, origin, cfg));
        if objective_value(y, g_moved, &candidate) > d.value {
            return Ok(Some(candidate));
        }
        step *= 0.5;
    }
    Ok(None)
}

/// Safeguarded Newton refinement of `(theta, phi, tau)` for gain `g`.
pub fn newton_refine(
    y: &[Complex64],
    g: Complex64,
    theta: f64,
    phi: f64,
    delay: f64,
    cfg: &SystemConfig,
) -> Result<NewtonStep> {
    let atom = Atom::new(theta, phi, delay, cfg);
    Ok(match newton_step(y, g, &atom, cfg, false)? {
        Some(a) => NewtonStep {
            theta: a.theta,
            phi: a.phi,
            delay: a.delay,
            accepted: true,
        },
        None => NewtonStep {
            theta,
            phi,
            delay,
            accepted: false,
        },
    })
}
