//! Multiuser downlink evaluation: zero-forcing precoding, per-subcarrier
//! SINR, training-discounted sum rate, and the closed-form approximation
//! of the expected SINR under gain-estimation error.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::sysmodel::complex_noise;

/// ZF precoder of one subcarrier, `W = H_est^+ diag(alpha)`.
#[derive(Debug, Clone)]
pub struct PrecodingState {
    /// `M x K` right pseudo-inverse of the channel estimate.
    pub pinv: DMatrix<Complex64>,
    /// Per-user normalization giving every column power `1/K`.
    pub alpha: Vec<f64>,
}

impl PrecodingState {
    pub fn num_users(&self) -> usize {
        self.alpha.len()
    }

    /// Precoding matrix `W`, `M x K`.
    pub fn precoder(&self) -> DMatrix<Complex64> {
        let mut w = self.pinv.clone();
        for (k, a) in self.alpha.iter().enumerate() {
            w.column_mut(k).scale_mut(*a);
        }
        w
    }
}

/// `H^H (H H^H)^{-1}` for a wide, full-row-rank `H`.
pub fn right_pinv(h: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let (k, m) = h.shape();
    if k == 0 || k > m {
        return Err(Error::RankDeficient("channel matrix"));
    }
    let gram = h * h.adjoint();
    let chol = gram.cholesky().ok_or(Error::RankDeficient("channel matrix"))?;
    let d = chol.l_dirty().diagonal();
    let (lo, hi) = d
        .iter()
        .map(|x| x.re)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if !(lo > hi * 1e-7) {
        return Err(Error::RankDeficient("channel matrix"));
    }
    Ok(h.adjoint() * chol.inverse())
}

/// Zero-forcing precoder with uniform power over users.
pub fn zf_precoder(h_est: &DMatrix<Complex64>) -> Result<PrecodingState> {
    let pinv = right_pinv(h_est)?;
    let k = h_est.nrows() as f64;
    let alpha = pinv
        .column_iter()
        .map(|c| 1.0 / (k.sqrt() * c.norm()))
        .collect();
    Ok(PrecodingState { pinv, alpha })
}

/// Per-user SINR on the true channel `h` (`K x M`) with unit noise power.
pub fn sinr(h: &DMatrix<Complex64>, state: &PrecodingState, power: f64) -> Vec<f64> {
    // received[k][j] = h_k [H^+]_{:,j}
    let received = h * &state.pinv;
    let k = state.num_users();
    (0..k)
        .map(|u| {
            let signal = power * state.alpha[u].powi(2) * received[(u, u)].norm_sqr();
            let interference: f64 = (0..k)
                .filter(|&j| j != u)
                .map(|j| power * state.alpha[j].powi(2) * received[(u, j)].norm_sqr())
                .sum();
            signal / (interference + 1.0)
        })
        .collect()
}

/// Per-subcarrier SINRs plus the prelog-discounted sum rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    /// `sinr[n][k]`.
    pub sinr: Vec<Vec<f64>>,
    pub sum_rate: f64,
    pub training_symbols: usize,
    pub coherence_length: usize,
}

/// `(1 - T_p/T_c) (1/N) sum_n sum_k log2(1 + SINR_k(n))`.
pub fn sum_rate(sinr: &[Vec<f64>], training: usize, coherence: usize) -> Result<f64> {
    if training >= coherence {
        return Err(Error::TrainingTooLong {
            training,
            coherence,
        });
    }
    if sinr.is_empty() {
        return Ok(0.0);
    }
    let prelog = 1.0 - training as f64 / coherence as f64;
    let total: f64 = sinr.iter().flatten().map(|s| (1.0 + s).log2()).sum();
    Ok(prelog * total / sinr.len() as f64)
}

/// Precode on `estimates[n]`, evaluate on `truth[n]`, and discount by the
/// training length.
pub fn evaluate_rates(
    truth: &[DMatrix<Complex64>],
    estimates: &[DMatrix<Complex64>],
    power: f64,
    training: usize,
    coherence: usize,
) -> Result<RateReport> {
    if truth.len() != estimates.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: estimates.len(),
        });
    }
    let sinr = truth
        .iter()
        .zip(estimates)
        .map(|(h, e)| Ok(sinr(h, &zf_precoder(e)?, power)))
        .collect::<Result<Vec<_>>>()?;
    let rate = sum_rate(&sinr, training, coherence)?;
    Ok(RateReport {
        sinr,
        sum_rate: rate,
        training_symbols: training,
        coherence_length: coherence,
    })
}

/// Expected signal powers `S_k` and interference powers `I_{k,j}` of the
/// closed-form approximation.
#[derive(Debug, Clone)]
pub struct TheoremTerms {
    pub signal: Vec<f64>,
    /// `interference[(k, j)]`, zero on the diagonal.
    pub interference: DMatrix<f64>,
}

impl TheoremTerms {
    pub fn expected_sinr(&self) -> Vec<f64> {
        self.signal
            .iter()
            .enumerate()
            .map(|(k, s)| s / (self.interference.row(k).sum() + 1.0))
            .collect()
    }
}

pub fn theorem_terms(h: &DMatrix<Complex64>, delta: f64, power: f64) -> Result<TheoremTerms> {
    let pinv = right_pinv(h)?;
    let k = h.nrows();
    // c[(i, j)] = sum_m |H_im H+_mj|^2
    let c = DMatrix::from_fn(k, k, |i, j| {
        h.row(i)
            .iter()
            .zip(pinv.column(j).iter())
            .map(|(a, b)| (a * b).norm_sqr())
            .sum::<f64>()
    });
    let col: Vec<f64> = pinv.column_iter().map(|x| x.norm_squared()).collect();
    // shared denominator of everything normalized by column j
    let den: Vec<f64> = (0..k)
        .map(|j| {
            let spread: f64 = (0..k).map(|i| col[i] * c[(i, j)]).sum();
            k as f64 * (col[j] + delta * spread)
        })
        .collect();
    let signal = (0..k)
        .map(|u| power * (1.0 + delta * c[(u, u)]) / den[u])
        .collect();
    let interference = DMatrix::from_fn(k, k, |u, j| {
        if u == j {
            0.0
        } else {
            power * delta * c[(u, j)] / den[j]
        }
    });
    Ok(TheoremTerms {
        signal,
        interference,
    })
}

/// Closed-form approximation of `E{SINR_k}` for estimation-error level
/// `delta`.
pub fn analytic_sinr(h: &DMatrix<Complex64>, delta: f64, power: f64) -> Result<Vec<f64>> {
    Ok(theorem_terms(h, delta, power)?.expected_sinr())
}

/// Estimate with i.i.d. circular Gaussian errors of variance
/// `delta |H_ki|^2` on every entry.
pub fn perturb_channel<R: Rng + ?Sized>(h: &DMatrix<Complex64>, delta: f64, rng: &mut R) -> DMatrix<Complex64> {
    let unit = complex_noise(rng, h.len(), 1.0);
    let (k, m) = h.shape();
    DMatrix::from_fn(k, m, |r, c| {
        let x = h[(r, c)];
        x + unit[r * m + c] * (delta * x.norm_sqr()).sqrt()
    })
}

/// Average SINR over `draws` independent error realizations with `h`
/// held fixed.
pub fn monte_carlo_sinr<R: Rng + ?Sized>(
    h: &DMatrix<Complex64>,
    delta: f64,
    power: f64,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let k = h.nrows();
    let mut acc = vec![0.0; k];
    for _ in 0..draws {
        let est = perturb_channel(h, delta, rng);
        let s = sinr(h, &zf_precoder(&est)?, power);
        for (a, x) in acc.iter_mut().zip(s) {
            *a += x;
        }
    }
    Ok(acc.into_iter().map(|a| a / draws.max(1) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::{steering_vector, SystemConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_channel(k: usize, m: usize, seed: u64) -> DMatrix<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = complex_noise(&mut rng, k * m, 1.0);
        DMatrix::from_fn(k, m, |r, c| v[r * m + c])
    }

    #[test]
    fn single_user_is_matched_filter() {
        let cfg = SystemConfig::small(4, 4, 4);
        let a = steering_vector(0.3, -0.2, &cfg).unwrap();
        let m = a.len();
        let c = Complex64::new(0.5, -1.5);
        let h = DMatrix::from_fn(1, m, |_, i| a[i] * c);
        let st = zf_precoder(&h).unwrap();
        let w = st.precoder();
        // w = conj(h)^T / ||h||, up to the gain phase of h
        let norm = (m as f64).sqrt();
        let phase = c.conj() / c.norm();
        for i in 0..m {
            assert!((w[(i, 0)] - a[i].conj() * phase / norm).norm() < 1e-12);
        }
        // SINR = P M for unit-gain steering
        let h1 = DMatrix::from_fn(1, m, |_, i| a[i]);
        let s = sinr(&h1, &zf_precoder(&h1).unwrap(), 3.0);
        assert!((s[0] - 3.0 * m as f64).abs() < 1e-9);
    }

    #[test]
    fn zf_nulls_interference_and_meets_power() {
        let h = random_channel(10, 128, 1);
        let st = zf_precoder(&h).unwrap();
        let w = st.precoder();
        let total: f64 = w.column_iter().map(|c| c.norm_squared()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for c in w.column_iter() {
            assert!((c.norm_squared() - 0.1).abs() < 1e-12);
        }
        let hw = &h * &w;
        for k in 0..10 {
            for j in 0..10 {
                if j != k {
                    assert!(hw[(k, j)].norm() / hw[(k, k)].norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rank_deficient_channel_rejected() {
        let mut h = random_channel(3, 8, 2);
        let r0 = h.row(0).into_owned();
        h.row_mut(2).copy_from(&r0);
        assert!(zf_precoder(&h).is_err());
        assert!(zf_precoder(&random_channel(9, 8, 3)).is_err());
    }

    #[test]
    fn sum_rate_cases() {
        assert_eq!(sum_rate(&vec![vec![0.0; 3]; 4], 0, 200).unwrap(), 0.0);
        assert!((sum_rate(&vec![vec![1.0]; 8], 0, 200).unwrap() - 1.0).abs() < 1e-15);
        let s = vec![vec![2.0, 5.0]; 4];
        let a = sum_rate(&s, 10, 200).unwrap();
        let b = sum_rate(&s, 11, 200).unwrap();
        assert!(b < a);
        assert!(matches!(sum_rate(&s, 200, 200), Err(Error::TrainingTooLong { .. })));
    }

    #[test]
    fn theorem_at_zero_delta() {
        let h = random_channel(4, 32, 4);
        let t = theorem_terms(&h, 0.0, 10.0).unwrap();
        let pinv = right_pinv(&h).unwrap();
        for k in 0..4 {
            let want = 10.0 / (4.0 * pinv.column(k).norm_squared());
            assert!((t.signal[k] - want).abs() < 1e-10 * want);
            assert!(t.interference.row(k).iter().all(|&x| x == 0.0));
        }
        // with perfect CSI the realized SINR equals the signal term
        let s = sinr(&h, &zf_precoder(&h).unwrap(), 10.0);
        for k in 0..4 {
            assert!((s[k] - t.signal[k]).abs() < 1e-9 * s[k]);
        }
    }

    #[test]
    fn theorem_degrades_with_delta() {
        let h = random_channel(5, 40, 5);
        let pinv = right_pinv(&h).unwrap();
        let mut last = analytic_sinr(&h, 0.0, 10.0).unwrap();
        let mut last_i = DMatrix::<f64>::zeros(5, 5);
        for delta in [1e-3, 1e-2, 1e-1] {
            let t = theorem_terms(&h, delta, 10.0).unwrap();
            for k in 0..5 {
                assert!(t.signal[k] < 10.0 / (5.0 * pinv.column(k).norm_squared()));
            }
            assert!(t.interference.iter().zip(last_i.iter()).all(|(a, b)| a >= b));
            let cur = t.expected_sinr();
            assert!(cur.iter().zip(&last).all(|(a, b)| a <= b));
            last = cur;
            last_i = t.interference;
        }
    }

    #[test]
    fn monte_carlo_at_zero_delta_is_exact() {
        let h = random_channel(3, 16, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mc = monte_carlo_sinr(&h, 0.0, 10.0, 5, &mut rng).unwrap();
        let an = analytic_sinr(&h, 0.0, 10.0).unwrap();
        for (a, b) in mc.iter().zip(&an) {
            assert!((a - b).abs() < 1e-9 * b);
        }
    }

    #[test]
    fn error_model_variance() {
        let h = random_channel(2, 64, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let delta = 0.05;
        let draws = 4000;
        let mut acc = DMatrix::<f64>::zeros(2, 64);
        for _ in 0..draws {
            let e = perturb_channel(&h, delta, &mut rng) - &h;
            acc += e.map(|x| x.norm_sqr());
        }
        let ratio: f64 = (0..h.len()).map(|i| acc[i] / draws as f64 / (delta * h[i].norm_sqr())).sum::<f64>()
            / h.len() as f64;
        assert!((ratio - 1.0).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn projected_taylor_expansion_is_second_order() {
        let h = random_channel(4, 12, 8);
        let e0 = random_channel(4, 12, 9);
        let pinv = right_pinv(&h).unwrap();
        let proj = &pinv * &h;
        let mut errs = Vec::new();
        for s in [1e-2, 1e-3, 1e-4] {
            let e = &e0 * Complex64::from(s);
            let exact = &proj * right_pinv(&(&h + &e)).unwrap();
            let approx = &pinv - &pinv * &e * &pinv;
            errs.push((exact - approx).norm());
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 50.0 && ratio < 200.0, "{ratio}");
        }
    }
}
