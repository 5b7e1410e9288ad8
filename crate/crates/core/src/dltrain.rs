//! Downlink training: spatial angle grid, greedy beam scheduling and
//! least-squares estimation of the downlink path gains.
//!
//! Every user knows its own extracted `(theta, phi, tau)` and the beam
//! weights, so the only unknowns on the downlink are the path gains.
//! Stacking the pilots received over `T_p` beamformed symbols gives
//! `y = sqrt(P) A g + z`, and the LS error of `g` is governed by the
//! singular values of `A`. The scheduler drops grid beams, lowest weight
//! first, for as long as every user's predicted NMSE stays below `delta`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::enomp::DetectedPath;
use crate::error::{Error, Result};
use crate::sysmodel::{cis, complex_noise, steering_factors, PathComponent, SystemConfig};

/// Pilots occupy every fourth subcarrier starting at 0.
pub const PILOT_SPACING: usize = 4;

/// The non-oversampled `M_v x M_h` grid of beam directions.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    pub thetas: Vec<f64>,
    pub phis: Vec<f64>,
}

/// One grid point; indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub i_v: usize,
    pub i_h: usize,
    pub theta: f64,
    pub phi: f64,
}

impl AngleGrid {
    pub fn new(cfg: &SystemConfig) -> Self {
        let axis = |m: usize| -> Vec<f64> {
            (0..m)
                .map(|i| PI / m as f64 * (i as f64 - m as f64 / 2.0))
                .collect()
        };
        Self {
            thetas: axis(cfg.m_v),
            phis: axis(cfg.m_h),
        }
    }

    pub fn len(&self) -> usize {
        self.thetas.len() * self.phis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid point `index`, downtilt-major.
    pub fn point(&self, index: usize) -> Result<GridPoint> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        let i_v = index / self.phis.len();
        let i_h = index % self.phis.len();
        Ok(GridPoint {
            index,
            i_v,
            i_h,
            theta: self.thetas[i_v],
            phi: self.phis[i_h],
        })
    }

    /// Unit-norm training beam `a*(theta, phi) / sqrt(M)` of a grid point.
    pub fn beam(&self, index: usize, cfg: &SystemConfig) -> Result<Vec<Complex64>> {
        let pt = self.point(index)?;
        let (a_v, a_h) = steering_factors(pt.theta, pt.phi, cfg);
        let s = 1.0 / (cfg.num_antennas() as f64).sqrt();
        let mut out = Vec::with_capacity(cfg.num_antennas());
        for v in &a_v {
            out.extend(a_h.iter().map(|h| (v * h).conj() * s));
        }
        Ok(out)
    }
}

/// Grid point `index` of the configuration's angle grid.
pub fn grid_point(index: usize, cfg: &SystemConfig) -> Result<GridPoint> {
    AngleGrid::new(cfg).point(index)
}

fn dot_t(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    // a^T conj(b)
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

/// `a^T(theta, phi) a*(theta_g, phi_g)`, unnormalized.
fn steering_overlap(theta: f64, phi: f64, theta_g: f64, phi_g: f64, cfg: &SystemConfig) -> Complex64 {
    let (av, ah) = steering_factors(theta, phi, cfg);
    let (gv, gh) = steering_factors(theta_g, phi_g, cfg);
    dot_t(&av, &gv) * dot_t(&ah, &gh)
}

/// Projected power `|a^T(theta, phi) a*(grid)|^2 / M`.
pub fn projected_power(theta: f64, phi: f64, grid_theta: f64, grid_phi: f64, cfg: &SystemConfig) -> f64 {
    steering_overlap(theta, phi, grid_theta, grid_phi, cfg).norm_sqr() / cfg.num_antennas() as f64
}

/// Grid point with maximum projected power; ties go to the lowest index.
pub fn optimal_grid_point(theta: f64, phi: f64, grid: &AngleGrid, cfg: &SystemConfig) -> usize {
    let mut best = (-1.0, 0);
    for (iv, &tg) in grid.thetas.iter().enumerate() {
        for (ih, &pg) in grid.phis.iter().enumerate() {
            let rho = projected_power(theta, phi, tg, pg, cfg);
            if rho > best.0 * (1.0 + 1e-10) && rho > best.0 {
                best = (rho, iv * grid.phis.len() + ih);
            }
        }
    }
    best.1
}

/// Comb pilot subcarriers `0, 4, 8, ...`.
pub fn pilot_subcarriers(cfg: &SystemConfig) -> Vec<usize> {
    (0..cfg.n_subcarriers).step_by(PILOT_SPACING).collect()
}

/// Result of beam scheduling.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPlan {
    /// Retained grid indices in scan order.
    pub grid_indices: Vec<usize>,
    /// Number of users that marked each retained point.
    pub weights: Vec<usize>,
    /// Unit-norm beams, one per training symbol.
    pub beams: Vec<Vec<Complex64>>,
    pub pilot_subcarriers: Vec<usize>,
    /// Size of the initial marked set before any removal.
    pub initial_size: usize,
    /// False when even the full initial set misses the NMSE target for
    /// some user.
    pub feasible: bool,
}

impl TrainingPlan {
    /// Training length in OFDM symbols.
    pub fn training_symbols(&self) -> usize {
        self.beams.len()
    }

    /// Plan made of explicit beams.
    pub fn from_beams(beams: Vec<Vec<Complex64>>, cfg: &SystemConfig) -> Self {
        Self {
            grid_indices: Vec::new(),
            weights: Vec::new(),
            initial_size: beams.len(),
            beams,
            pilot_subcarriers: pilot_subcarriers(cfg),
            feasible: true,
        }
    }
}

/// Stacked coefficient matrix of one user and its singular values.
#[derive(Debug, Clone)]
pub struct CoefficientMatrix {
    /// `(N_p T_p) x L` matrix, training-symbol-major rows.
    pub matrix: DMatrix<Complex64>,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
}

impl CoefficientMatrix {
    pub fn new(matrix: DMatrix<Complex64>) -> Self {
        let mut singular_values: Vec<f64> = if matrix.nrows() == 0 || matrix.ncols() == 0 {
            Vec::new()
        } else {
            matrix.singular_values().iter().copied().collect()
        };
        singular_values.sort_by(|a, b| b.total_cmp(a));
        // fewer rows than paths: the missing singular values are zero
        singular_values.resize(matrix.ncols(), 0.0);
        Self {
            matrix,
            singular_values,
        }
    }

    pub fn num_paths(&self) -> usize {
        self.matrix.ncols()
    }

    /// Full column rank at the usual numerical tolerance.
    pub fn full_rank(&self) -> bool {
        full_rank(&self.singular_values, self.matrix.nrows().max(self.matrix.ncols()))
    }
}

fn full_rank(sv: &[f64], dim: usize) -> bool {
    let Some(&max) = sv.first() else {
        return false;
    };
    let min = sv.last().copied().unwrap_or(0.0);
    min > max * dim as f64 * f64::EPSILON && min > 0.0
}

/// `(theta, phi, tau)` of the paths that span a coefficient matrix.
fn geometry_matrix(
    geometry: &[(f64, f64, f64)],
    beams: &[Vec<Complex64>],
    pilots: &[usize],
    cfg: &SystemConfig,
) -> DMatrix<Complex64> {
    let np = pilots.len();
    let gap = cfg.duplex_gap();
    let df = cfg.subcarrier_spacing;
    let mut a = DMatrix::zeros(np * beams.len(), geometry.len());
    for (l, &(theta, phi, tau)) in geometry.iter().enumerate() {
        let (av, ah) = steering_factors(theta, phi, cfg);
        // duplex phase rotation and pilot-subcarrier delay phase
        let pp: Vec<Complex64> = pilots
            .iter()
            .map(|&n| cis(2.0 * PI * (gap + n as f64 * df) * tau))
            .collect();
        for (t, b) in beams.iter().enumerate() {
            let mut theta_lt = Complex64::default();
            for (iv, v) in av.iter().enumerate() {
                for (ih, h) in ah.iter().enumerate() {
                    theta_lt += v * h * b[iv * ah.len() + ih];
                }
            }
            for (p, x) in pp.iter().enumerate() {
                a[(t * np + p, l)] = theta_lt * x;
            }
        }
    }
    a
}

/// Coefficient matrix of one user's extracted paths under a plan.
pub fn coefficient_matrix(paths: &[DetectedPath], plan: &TrainingPlan, cfg: &SystemConfig) -> CoefficientMatrix {
    let geom: Vec<_> = paths.iter().map(|p| (p.theta, p.phi, p.delay)).collect();
    CoefficientMatrix::new(geometry_matrix(&geom, &plan.beams, &plan.pilot_subcarriers, cfg))
}

/// Predicted gain NMSE `sum_l 1/lambda_l^2 / (P ||g_ul||^2)`; infinite
/// when `A` is rank deficient.
pub fn predict_nmse(a: &CoefficientMatrix, gains_ul: &[Complex64], power: f64) -> Result<f64> {
    let norm: f64 = gains_ul.iter().map(|g| g.norm_sqr()).sum();
    if gains_ul.is_empty() || norm <= 0.0 {
        return Err(Error::EmptyGains);
    }
    if !a.full_rank() {
        return Ok(f64::INFINITY);
    }
    let inv: f64 = a.singular_values.iter().map(|s| 1.0 / (s * s)).sum();
    Ok(inv / (power * norm))
}

/// Strict success test `sum_l 1/lambda_l^2 < delta P ||g_ul||^2`.
pub fn check_success(a: &CoefficientMatrix, gains_ul: &[Complex64], power: f64, delta: f64) -> bool {
    if !a.full_rank() {
        return false;
    }
    let norm: f64 = gains_ul.iter().map(|g| g.norm_sqr()).sum();
    let inv: f64 = a.singular_values.iter().map(|s| 1.0 / (s * s)).sum();
    inv < delta * power * norm
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScheduleOptions {
    /// Keep scanning past an indispensable point instead of stopping.
    pub continue_scan: bool,
}

/// Per-user state for evaluating candidate plans quickly through the
/// Gram matrix `A^H A = Q o T`, where `Q` collects the pilot delay phases
/// and `T[l, l'] = sum_t conj(Theta_lt) Theta_l't`.
struct UserTraining {
    q: DMatrix<Complex64>,
    /// `Theta_lt` for every grid point, `[grid][path]`.
    theta: Vec<Vec<Complex64>>,
    target: f64,
}

impl UserTraining {
    fn new(paths: &[DetectedPath], grid: &AngleGrid, pilots: &[usize], cfg: &SystemConfig) -> Self {
        let l = paths.len();
        let gap = cfg.duplex_gap();
        let pp: Vec<Vec<Complex64>> = paths
            .iter()
            .map(|p| {
                pilots
                    .iter()
                    .map(|&n| cis(2.0 * PI * (gap + n as f64 * cfg.subcarrier_spacing) * p.delay))
                    .collect()
            })
            .collect();
        let q = DMatrix::from_fn(l, l, |r, c| {
            pp[r].iter().zip(&pp[c]).map(|(a, b)| a.conj() * b).sum()
        });
        let scale = 1.0 / (cfg.num_antennas() as f64).sqrt();
        let theta = (0..grid.len())
            .map(|i| {
                let pt = grid.point(i).expect("grid index");
                paths
                    .iter()
                    .map(|p| steering_overlap(p.theta, p.phi, pt.theta, pt.phi, cfg) * scale)
                    .collect()
            })
            .collect();
        let norm: f64 = paths.iter().map(|p| p.gain.norm_sqr()).sum();
        Self {
            q,
            theta,
            target: cfg.delta * cfg.power * norm,
        }
    }

    fn satisfied(&self, retained: &[usize]) -> bool {
        let l = self.q.nrows();
        if l == 0 {
            return true;
        }
        let mut t = DMatrix::<Complex64>::zeros(l, l);
        for &i in retained {
            let th = &self.theta[i];
            for r in 0..l {
                for c in 0..l {
                    t[(r, c)] += th[r].conj() * th[c];
                }
            }
        }
        let gram = self.q.component_mul(&t);
        let eig = gram.symmetric_eigenvalues();
        let max = eig.iter().copied().fold(0.0f64, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) || min <= max * 1e-12 {
            return false;
        }
        let inv: f64 = eig.iter().map(|e| 1.0 / e).sum();
        inv < self.target
    }
}

/// Greedy beam scheduling. Users' gains must be the uplink estimates in
/// channel units; `cfg.delta` and `cfg.power` set the target.
pub fn schedule_beams(users: &[Vec<DetectedPath>], cfg: &SystemConfig) -> TrainingPlan {
    schedule_beams_with(users, cfg, ScheduleOptions::default())
}

pub fn schedule_beams_with(
    users: &[Vec<DetectedPath>],
    cfg: &SystemConfig,
    opts: ScheduleOptions,
) -> TrainingPlan {
    let grid = AngleGrid::new(cfg);
    let pilots = pilot_subcarriers(cfg);

    let mut marked_by: Vec<Vec<usize>> = vec![Vec::new(); grid.len()];
    for (k, paths) in users.iter().enumerate() {
        for p in paths {
            let i = optimal_grid_point(p.theta, p.phi, &grid, cfg);
            if marked_by[i].last() != Some(&k) {
                marked_by[i].push(k);
            }
        }
    }
    let mut order: Vec<(usize, usize)> = marked_by
        .iter()
        .enumerate()
        .filter(|(_, ks)| !ks.is_empty())
        .map(|(i, ks)| (ks.len(), i))
        .collect();
    order.sort();
    let initial_size = order.len();

    let training: Vec<UserTraining> = users
        .iter()
        .map(|paths| UserTraining::new(paths, &grid, &pilots, cfg))
        .collect();
    let all_ok = |set: &[usize]| training.iter().all(|u| u.satisfied(set));

    let mut retained: Vec<usize> = order.iter().map(|&(_, i)| i).collect();
    let feasible = all_ok(&retained);
    if feasible {
        let mut s = 0;
        while s < retained.len() {
            let mut candidate = retained.clone();
            candidate.remove(s);
            if all_ok(&candidate) {
                retained = candidate;
            } else if opts.continue_scan {
                s += 1;
            } else {
                break;
            }
        }
    }

    let weights = retained.iter().map(|&i| marked_by[i].len()).collect();
    let beams = retained
        .iter()
        .map(|&i| grid.beam(i, cfg).expect("grid index"))
        .collect();
    TrainingPlan {
        grid_indices: retained,
        weights,
        beams,
        pilot_subcarriers: pilots,
        initial_size,
        feasible,
    }
}

/// Received downlink pilots `sqrt(P) A_true g_dl + z` for one user, built
/// from the true path geometry.
pub fn simulate_downlink_pilots<R: Rng + ?Sized>(
    paths: &[PathComponent],
    plan: &TrainingPlan,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Vec<Complex64> {
    let clean = noiseless_downlink_pilots(paths, plan, cfg);
    let z = complex_noise(rng, clean.len(), 1.0);
    clean.iter().zip(&z).map(|(s, z)| s + z).collect()
}

/// Noise-free part of [`simulate_downlink_pilots`].
pub fn noiseless_downlink_pilots(paths: &[PathComponent], plan: &TrainingPlan, cfg: &SystemConfig) -> Vec<Complex64> {
    let geom: Vec<_> = paths.iter().map(|p| (p.theta, p.phi, p.delay)).collect();
    let a = geometry_matrix(&geom, &plan.beams, &plan.pilot_subcarriers, cfg);
    let g = DVector::from_iterator(paths.len(), paths.iter().map(|p| p.gain_dl));
    (a * g * Complex64::from(cfg.power.sqrt())).iter().copied().collect()
}

/// LS gain estimate `(A^H A)^{-1} A^H y / sqrt(P)`.
pub fn estimate_downlink_gains(y: &[Complex64], a: &CoefficientMatrix, power: f64) -> Result<Vec<Complex64>> {
    let m = &a.matrix;
    if y.len() != m.nrows() {
        return Err(Error::LengthMismatch {
            expected: m.nrows(),
            got: y.len(),
        });
    }
    if !a.full_rank() {
        return Err(Error::RankDeficient("coefficient matrix"));
    }
    let gram = m.adjoint() * m;
    let rhs = m.adjoint() * DVector::from_column_slice(y);
    let chol = gram.cholesky().ok_or(Error::RankDeficient("A^H A"))?;
    let g = chol.solve(&rhs) / Complex64::from(power.sqrt());
    Ok(g.iter().copied().collect())
}
