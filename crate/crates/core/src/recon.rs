//! Downlink channel reconstruction, NMSE metrics, the LS and LMMSE
//! baselines, and training/feedback cost accounting.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dltrain::TrainingPlan;
use crate::enomp::DetectedPath;
use crate::error::{Error, Result};
use crate::sysmodel::{cis, complex_noise, downlink_channel, steering_factors, PathComponent, SystemConfig};

/// One user's downlink channel rebuilt from extracted geometry and
/// estimated downlink gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedChannel {
    pub paths: Vec<PathComponent>,
}

impl ReconstructedChannel {
    /// Full `M N` vector in the usual antenna-major layout.
    pub fn full(&self, cfg: &SystemConfig) -> Vec<Complex64> {
        downlink_channel(&self.paths, cfg)
    }

    /// Row `h(n)` of length `M` on subcarrier `n`.
    pub fn subcarrier_row(&self, n: usize, cfg: &SystemConfig) -> Vec<Complex64> {
        let mut row = vec![Complex64::default(); cfg.num_antennas()];
        let f = cfg.duplex_gap() + n as f64 * cfg.subcarrier_spacing;
        for p in &self.paths {
            let w = p.gain_dl * cis(2.0 * PI * f * p.delay);
            let (av, ah) = steering_factors(p.theta, p.phi, cfg);
            for (iv, v) in av.iter().enumerate() {
                for (ih, h) in ah.iter().enumerate() {
                    row[iv * ah.len() + ih] += w * v * h;
                }
            }
        }
        row
    }
}

/// Combine extracted paths with their estimated downlink gains.
pub fn reconstruct(paths: &[DetectedPath], gains_dl: &[Complex64]) -> Result<ReconstructedChannel> {
    if paths.len() != gains_dl.len() {
        return Err(Error::LengthMismatch {
            expected: paths.len(),
            got: gains_dl.len(),
        });
    }
    Ok(ReconstructedChannel {
        paths: paths
            .iter()
            .zip(gains_dl)
            .map(|(p, &g)| PathComponent {
                gain_ul: p.gain,
                gain_dl: g,
                theta: p.theta,
                phi: p.phi,
                delay: p.delay,
            })
            .collect(),
    })
}

/// `||estimate - truth||^2 / ||truth||^2`.
pub fn channel_nmse(estimate: &[Complex64], truth: &[Complex64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    let den: f64 = truth.iter().map(|x| x.norm_sqr()).sum();
    if den <= 0.0 {
        return Err(Error::ZeroNormTruth);
    }
    let num: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(num / den)
}

/// Unitary `M x M` DFT training matrix: row `t` is the pilot sent on
/// training symbol `t`.
pub fn dft_pilots(m: usize) -> DMatrix<Complex64> {
    let s = 1.0 / (m as f64).sqrt();
    DMatrix::from_fn(m, m, |t, i| cis(-2.0 * PI * (t * i) as f64 / m as f64) * s)
}

/// Received training `sqrt(P) X h(n) + z(n)` on every subcarrier, laid out
/// `t * N + n`.
pub fn simulate_training<R: Rng + ?Sized>(
    h: &[Complex64],
    pilots: &DMatrix<Complex64>,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Vec<Complex64> {
    let hm = as_matrix(h, cfg);
    let y = pilots * hm * Complex64::from(cfg.power.sqrt());
    let z = complex_noise(rng, y.len(), 1.0);
    let n = cfg.n_subcarriers;
    let mut out = vec![Complex64::default(); y.len()];
    for t in 0..y.nrows() {
        for k in 0..n {
            out[t * n + k] = y[(t, k)] + z[t * n + k];
        }
    }
    out
}

/// `M x N` view of an antenna-major channel vector.
fn as_matrix(h: &[Complex64], cfg: &SystemConfig) -> DMatrix<Complex64> {
    let n = cfg.n_subcarriers;
    DMatrix::from_fn(cfg.num_antennas(), n, |m, k| h[m * n + k])
}

fn from_matrix(x: &DMatrix<Complex64>) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(x.len());
    for m in 0..x.nrows() {
        out.extend(x.row(m).iter().copied());
    }
    out
}

/// Per-subcarrier LS estimator `X^+ y(n) / sqrt(P)` for a fixed pilot
/// matrix `X` (`T x M`).
#[derive(Debug, Clone)]
pub struct LsEstimator {
    pinv: DMatrix<Complex64>,
}

impl LsEstimator {
    pub fn new(pilots: &DMatrix<Complex64>) -> Result<Self> {
        let (t, m) = pilots.shape();
        if t < m || m == 0 {
            return Err(Error::RankDeficient("pilot matrix"));
        }
        let svd = pilots.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let tol = smax * t as f64 * f64::EPSILON;
        if !(smin > tol) {
            return Err(Error::RankDeficient("pilot matrix"));
        }
        let pinv = svd
            .pseudo_inverse(tol)
            .map_err(|_| Error::RankDeficient("pilot matrix"))?;
        Ok(Self { pinv })
    }

    /// `observation` is laid out `t * N + n` with `T` training symbols.
    pub fn estimate(&self, observation: &[Complex64], cfg: &SystemConfig) -> Result<Vec<Complex64>> {
        let (m, t) = self.pinv.shape();
        let n = cfg.n_subcarriers;
        if m != cfg.num_antennas() || observation.len() != t * n {
            return Err(Error::LengthMismatch {
                expected: t * n,
                got: observation.len(),
            });
        }
        let y = DMatrix::from_fn(t, n, |r, k| observation[r * n + k]);
        let est = &self.pinv * y / Complex64::from(cfg.power.sqrt());
        Ok(from_matrix(&est))
    }
}

/// One-shot [`LsEstimator`].
pub fn ls_baseline(observation: &[Complex64], pilots: &DMatrix<Complex64>, cfg: &SystemConfig) -> Result<Vec<Complex64>> {
    LsEstimator::new(pilots)?.estimate(observation, cfg)
}

/// Spatial covariance `E[a a^H]` of the array response, Hermitian PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCovariance {
    pub matrix: DMatrix<Complex64>,
}

impl SpatialCovariance {
    pub fn new(matrix: DMatrix<Complex64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::NotPsd);
        }
        let herm = (&matrix + matrix.adjoint()) * Complex64::from(0.5);
        let scale = herm.iter().map(|x| x.norm()).fold(0.0, f64::max);
        let asym = (&matrix - &herm).iter().map(|x| x.norm()).fold(0.0, f64::max);
        if asym > 1e-9 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::NotPsd);
        }
        let eig = herm.clone().symmetric_eigenvalues();
        if eig.iter().any(|&e| !e.is_finite() || e < -1e-9 * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::NotPsd);
        }
        Ok(Self { matrix: herm })
    }

    /// Sample covariance of the array response over `draws` uniform
    /// `(theta, phi)` draws. Each `a a^H` depends only on the element lag,
    /// so lags are accumulated once per draw.
    pub fn sample(cfg: &SystemConfig, draws: usize, seed: u64) -> Self {
        let (mv, mh) = (cfg.m_v as i64, cfg.m_h as i64);
        let (lv, lh) = (2 * mv - 1, 2 * mh - 1);
        let mut lags = vec![Complex64::default(); (lv * lh) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 2.0 * PI * cfg.spacing_ratio;
        let half = std::f64::consts::FRAC_PI_2;
        for _ in 0..draws {
            let theta: f64 = rng.random_range(-half..half);
            let phi: f64 = rng.random_range(-half..half);
            let u = k * theta.sin();
            let v = k * theta.cos() * phi.sin();
            for dv in -(mv - 1)..mv {
                for dh in -(mh - 1)..mh {
                    lags[((dv + mv - 1) * lh + dh + mh - 1) as usize] += cis(u * dv as f64 + v * dh as f64);
                }
            }
        }
        let scale = 1.0 / draws.max(1) as f64;
        let m = cfg.num_antennas();
        let matrix = DMatrix::from_fn(m, m, |r, c| {
            let (rv, rh) = ((r as i64) / mh, (r as i64) % mh);
            let (cv, ch) = ((c as i64) / mh, (c as i64) % mh);
            let (dv, dh) = (rv - cv, rh - ch);
            lags[((dv + mv - 1) * lh + dh + mh - 1) as usize] * scale
        });
        Self { matrix }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            matrix: &self.matrix * Complex64::from(s),
        }
    }
}

/// Eigendecomposition of a spatial covariance, reused to build LMMSE
/// filters for any scale and power.
#[derive(Debug, Clone)]
pub struct LmmseDesign {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<Complex64>,
}

impl LmmseDesign {
    pub fn new(cov: &SpatialCovariance) -> Result<Self> {
        let eig = cov.matrix.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|e| !e.is_finite()) {
            return Err(Error::NotPsd);
        }
        Ok(Self {
            eigenvalues: eig.eigenvalues.iter().map(|l| l.max(0.0)).collect(),
            eigenvectors: eig.eigenvectors,
        })
    }

    /// Filter for covariance `scale * R` and noise covariance `I/P`.
    pub fn filter(&self, scale: f64, power: f64) -> LmmseFilter {
        let noise = 1.0 / power;
        let u = &self.eigenvectors;
        let mut us = u.clone();
        for (j, l) in self.eigenvalues.iter().enumerate() {
            let l = l * scale;
            us.column_mut(j).scale_mut(l / (l + noise));
        }
        LmmseFilter {
            weights: us * u.adjoint(),
        }
    }
}

/// LMMSE filter `R (R + I/P)^{-1}` applied to an LS estimate on every
/// subcarrier. The space-frequency covariance is `R (x) I_N` because
/// delays are uniform over the full period.
#[derive(Debug, Clone)]
pub struct LmmseFilter {
    pub weights: DMatrix<Complex64>,
}

impl LmmseFilter {
    pub fn new(cov: &SpatialCovariance, power: f64) -> Result<Self> {
        Ok(LmmseDesign::new(cov)?.filter(1.0, power))
    }

    pub fn apply(&self, ls: &[Complex64], cfg: &SystemConfig) -> Vec<Complex64> {
        from_matrix(&(&self.weights * as_matrix(ls, cfg)))
    }
}

/// LMMSE estimate from an LS estimate with noise covariance `I/P`.
pub fn lmmse_baseline(ls: &[Complex64], cov: &SpatialCovariance, cfg: &SystemConfig) -> Result<Vec<Complex64>> {
    Ok(LmmseFilter::new(cov, cfg.power)?.apply(ls, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemeCost {
    pub training_symbols: usize,
    pub feedback_complex_numbers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub reconstruction: SchemeCost,
    pub lmmse: SchemeCost,
}

/// Training and feedback costs of both schemes. `paths_per_user` holds the
/// number of extracted paths of each user.
pub fn cost_report(plan: &TrainingPlan, paths_per_user: &[usize], cfg: &SystemConfig) -> CostReport {
    let m = cfg.num_antennas();
    CostReport {
        reconstruction: SchemeCost {
            training_symbols: plan.training_symbols(),
            feedback_complex_numbers: paths_per_user.iter().sum(),
        },
        lmmse: SchemeCost {
            training_symbols: m,
            feedback_complex_numbers: m * cfg.n_subcarriers * paths_per_user.len(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::{generate_scenario, steering_vector};

    fn det(p: &PathComponent) -> DetectedPath {
        DetectedPath {
            gain: p.gain_ul,
            theta: p.theta,
            phi: p.phi,
            delay: p.delay,
        }
    }

    #[test]
    fn true_parameters_round_trip() {
        let cfg = SystemConfig::small(4, 4, 16);
        let scen = generate_scenario(1, 3, &cfg, 1);
        let paths = &scen.users[0];
        let d: Vec<_> = paths.iter().map(det).collect();
        let g: Vec<_> = paths.iter().map(|p| p.gain_dl).collect();
        let rec = reconstruct(&d, &g).unwrap();
        assert_eq!(rec.full(&cfg), downlink_channel(paths, &cfg));
        let zero = reconstruct(&d, &vec![Complex64::default(); 3]).unwrap();
        assert!(zero.full(&cfg).iter().all(|x| x.norm() == 0.0));
        assert!(reconstruct(&d, &g[..2]).is_err());
    }

    #[test]
    fn subcarrier_rows_match_full_vector() {
        let cfg = SystemConfig::small(2, 4, 8);
        let scen = generate_scenario(1, 2, &cfg, 4);
        let rec = ReconstructedChannel {
            paths: scen.users[0].clone(),
        };
        let full = rec.full(&cfg);
        for n in 0..cfg.n_subcarriers {
            let row = rec.subcarrier_row(n, &cfg);
            for m in 0..cfg.num_antennas() {
                assert!((row[m] - full[m * cfg.n_subcarriers + n]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn reconstruction_is_linear_in_gains() {
        let cfg = SystemConfig::small(2, 2, 8);
        let scen = generate_scenario(1, 2, &cfg, 6);
        let d: Vec<_> = scen.users[0].iter().map(det).collect();
        let g1 = [Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.1)];
        let g2 = [Complex64::new(0.3, 0.0), Complex64::new(0.0, 1.0)];
        let sum: Vec<_> = g1.iter().zip(&g2).map(|(a, b)| a + b * 2.0).collect();
        let a = reconstruct(&d, &g1).unwrap().full(&cfg);
        let b = reconstruct(&d, &g2).unwrap().full(&cfg);
        let c = reconstruct(&d, &sum).unwrap().full(&cfg);
        for i in 0..a.len() {
            assert!((a[i] + b[i] * 2.0 - c[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn nmse_cases() {
        let h = vec![Complex64::new(1.0, 1.0), Complex64::new(0.0, -2.0)];
        assert_eq!(channel_nmse(&h, &h).unwrap(), 0.0);
        let twice: Vec<_> = h.iter().map(|x| x * 2.0).collect();
        assert!((channel_nmse(&twice, &h).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            channel_nmse(&h, &[Complex64::default(); 2]),
            Err(Error::ZeroNormTruth)
        ));
        assert!(channel_nmse(&h[..1], &h).is_err());
    }

    #[test]
    fn ls_noiseless_is_exact() {
        let cfg = SystemConfig::small(2, 4, 8).with_power(3.0);
        let scen = generate_scenario(1, 3, &cfg, 2);
        let h = downlink_channel(&scen.users[0], &cfg);
        let x = dft_pilots(cfg.num_antennas());
        let y = {
            let hm = as_matrix(&h, &cfg);
            let ym = &x * hm * Complex64::from(cfg.power.sqrt());
            let n = cfg.n_subcarriers;
            (0..ym.len()).map(|i| ym[(i / n, i % n)]).collect::<Vec<_>>()
        };
        let est = ls_baseline(&y, &x, &cfg).unwrap();
        assert!(channel_nmse(&est, &h).unwrap() < 1e-24);
        let short = x.rows(0, 4).into_owned();
        assert!(ls_baseline(&y[..4 * cfg.n_subcarriers], &short, &cfg).is_err());
    }

    #[test]
    fn ls_error_scales_inversely_with_power() {
        let base = SystemConfig::small(2, 4, 32);
        let scen = generate_scenario(1, 4, &base, 8);
        let x = dft_pilots(base.num_antennas());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut err = Vec::new();
        for p in [1.0, 10.0, 100.0] {
            let cfg = base.clone().with_power(p);
            let h = downlink_channel(&scen.users[0], &cfg);
            let mut acc = 0.0;
            for _ in 0..20 {
                let y = simulate_training(&h, &x, &cfg, &mut rng);
                let est = ls_baseline(&y, &x, &cfg).unwrap();
                acc += est.iter().zip(&h).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
            }
            err.push(acc / 20.0 / h.len() as f64);
        }
        // per-entry error variance 1/P
        for (e, p) in err.iter().zip([1.0, 10.0, 100.0]) {
            assert!((e * p - 1.0).abs() < 0.05, "{e}");
        }
    }

    #[test]
    fn sampled_covariance_structure() {
        let cfg = SystemConfig::small(2, 3, 4);
        let cov = SpatialCovariance::sample(&cfg, 2000, 5);
        let m = cfg.num_antennas();
        for i in 0..m {
            assert!((cov.matrix[(i, i)] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
        // direct sample covariance from the same draws
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut direct = DMatrix::<Complex64>::zeros(m, m);
        let half = std::f64::consts::FRAC_PI_2;
        for _ in 0..2000 {
            let th: f64 = rng.random_range(-half..half);
            let ph: f64 = rng.random_range(-half..half);
            let a = steering_vector(th, ph, &cfg).unwrap();
            for r in 0..m {
                for c in 0..m {
                    direct[(r, c)] += a[r] * a[c].conj() / 2000.0;
                }
            }
        }
        assert!((&direct - &cov.matrix).norm() < 1e-10);
        assert!(SpatialCovariance::new(cov.matrix.clone()).is_ok());
    }

    #[test]
    fn covariance_rejects_non_psd() {
        let mut bad = DMatrix::<Complex64>::identity(3, 3);
        bad[(1, 1)] = Complex64::new(-1.0, 0.0);
        assert!(matches!(SpatialCovariance::new(bad), Err(Error::NotPsd)));
        let mut asym = DMatrix::<Complex64>::identity(2, 2);
        asym[(0, 1)] = Complex64::new(0.5, 0.0);
        assert!(SpatialCovariance::new(asym).is_err());
    }

    #[test]
    fn lmmse_limits() {
        let cfg = SystemConfig::small(2, 2, 4).with_power(2.0);
        let ls: Vec<_> = (0..cfg.dim()).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let m = cfg.num_antennas();
        let huge = SpatialCovariance::new(DMatrix::identity(m, m)).unwrap().scaled(1e14);
        let out = lmmse_baseline(&ls, &huge, &cfg).unwrap();
        assert!(channel_nmse(&out, &ls).unwrap() < 1e-20);
        let zero = SpatialCovariance::new(DMatrix::zeros(m, m)).unwrap();
        let out = lmmse_baseline(&ls, &zero, &cfg).unwrap();
        assert!(out.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn lmmse_beats_ls_at_low_snr() {
        let cfg = SystemConfig::small(4, 4, 16).with_power(1.0);
        let cov = SpatialCovariance::sample(&cfg, 5000, 3);
        let filt = LmmseFilter::new(&cov, cfg.power).unwrap();
        let x = DMatrix::identity(cfg.num_antennas(), cfg.num_antennas());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut e_ls, mut e_lm) = (0.0, 0.0);
        for s in 0..20 {
            let scen = generate_scenario(1, 4, &cfg, 100 + s);
            let h = downlink_channel(&scen.users[0], &cfg);
            let y = simulate_training(&h, &x, &cfg, &mut rng);
            let ls = ls_baseline(&y, &x, &cfg).unwrap();
            e_ls += channel_nmse(&ls, &h).unwrap();
            e_lm += channel_nmse(&filt.apply(&ls, &cfg), &h).unwrap();
        }
        assert!(e_lm < e_ls, "{e_lm} {e_ls}");
    }

    #[test]
    fn cost_accounting() {
        let cfg = SystemConfig::default();
        let mut plan = TrainingPlan::from_beams(Vec::new(), &cfg);
        plan.beams = vec![Vec::new(); 23];
        let report = cost_report(&plan, &[6; 10], &cfg);
        assert_eq!(report.lmmse.training_symbols, 128);
        assert_eq!(report.lmmse.feedback_complex_numbers, 327_680);
        assert_eq!(report.reconstruction.feedback_complex_numbers, 60);
        assert_eq!(report.reconstruction.training_symbols, 23);
    }
}
