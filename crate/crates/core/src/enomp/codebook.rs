//! Oversampled angle/delay codebook and its matched filter.
//!
//! The delay grid is uniform in `tau`, so correlation against every sampled
//! delay is a zero-padded FFT along the subcarrier axis. The angle grids
//! are uniform in angle rather than in spatial frequency, so the antenna
//! axes are contracted directly, vertical factor first. The result equals
//! an exhaustive scan of all codewords.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::sysmodel::{cis, delay_vector, steering_factors, SystemConfig};

/// Sampled downtilts, azimuths and delays of the oversampled codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub thetas: Vec<f64>,
    pub phis: Vec<f64>,
    pub delays: Vec<f64>,
}

impl Codebook {
    pub fn new(cfg: &SystemConfig) -> Self {
        let nt = cfg.beta_theta * cfg.m_v;
        let np = cfg.beta_phi * cfg.m_h;
        let nd = cfg.beta_tau * cfg.n_subcarriers;
        Self {
            thetas: (0..nt).map(|i| -FRAC_PI_2 + PI * i as f64 / nt as f64).collect(),
            phis: (0..np).map(|i| -FRAC_PI_2 + PI * i as f64 / np as f64).collect(),
            delays: (0..nd)
                .map(|i| i as f64 / (nd as f64 * cfg.subcarrier_spacing))
                .collect(),
        }
    }

    /// Total number of codewords.
    pub fn len(&self) -> usize {
        self.thetas.len() * self.phis.len() * self.delays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index in (theta, phi, delay) lexicographic order.
    pub fn flat_index(&self, it: usize, ip: usize, id: usize) -> usize {
        (it * self.phis.len() + ip) * self.delays.len() + id
    }

    /// Materializes one codeword `a(theta, phi) (x) p(tau)`.
    pub fn codeword(&self, it: usize, ip: usize, id: usize, cfg: &SystemConfig) -> Vec<Complex64> {
        let (a_v, a_h) = steering_factors(self.thetas[it], self.phis[ip], cfg);
        let p = delay_vector(self.delays[id], cfg.n_subcarriers, cfg.subcarrier_spacing);
        let mut out = Vec::with_capacity(cfg.dim());
        for v in &a_v {
            for h in &a_h {
                let vh = v * h;
                out.extend(p.iter().map(|x| vh * x));
            }
        }
        out
    }
}

pub fn build_codebook(cfg: &SystemConfig) -> Codebook {
    Codebook::new(cfg)
}

/// Best-matching codeword for a residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub theta: f64,
    pub phi: f64,
    pub delay: f64,
    /// `|c^H y|^2 / ||c||^2` at the selected codeword.
    pub power: f64,
    pub index: (usize, usize, usize),
}

/// Relative margin inside which two projected powers count as a tie.
pub(crate) const TIE_TOLERANCE: f64 = 1e-10;

#[inline]
pub(crate) fn beats(candidate: f64, best: f64) -> bool {
    candidate > best * (1.0 + TIE_TOLERANCE) && candidate > best
}

/// Reusable matched-filter workspace for one codebook.
pub struct MatchedFilter {
    codebook: Codebook,
    m_v: usize,
    m_h: usize,
    n: usize,
    fft: Arc<dyn Fft<f64>>,
    /// conj(a_v) per sampled downtilt, `[nt][m_v]`.
    conj_av: Vec<Complex64>,
    /// conj(a_h) per sampled (downtilt, azimuth), `[nt][np][m_h]`.
    conj_ah: Vec<Complex64>,
    spectra: Vec<Complex64>,
    scratch: Vec<Complex64>,
    partial: Vec<Complex64>,
    row: Vec<Complex64>,
}

impl MatchedFilter {
    pub fn new(cfg: &SystemConfig) -> Self {
        let codebook = Codebook::new(cfg);
        let nd = codebook.delays.len();
        let fft = FftPlanner::new().plan_fft_forward(nd);
        let mut conj_av = Vec::with_capacity(codebook.thetas.len() * cfg.m_v);
        let mut conj_ah =
            Vec::with_capacity(codebook.thetas.len() * codebook.phis.len() * cfg.m_h);
        for &theta in &codebook.thetas {
            let (a_v, _) = steering_factors(theta, 0.0, cfg);
            conj_av.extend(a_v.iter().map(|x| x.conj()));
            for &phi in &codebook.phis {
                let (_, a_h) = steering_factors(theta, phi, cfg);
                conj_ah.extend(a_h.iter().map(|x| x.conj()));
            }
        }
        let scratch_len = fft.get_inplace_scratch_len();
        Self {
            m_v: cfg.m_v,
            m_h: cfg.m_h,
            n: cfg.n_subcarriers,
            fft,
            conj_av,
            conj_ah,
            spectra: vec![Complex64::default(); cfg.num_antennas() * nd],
            scratch: vec![Complex64::default(); scratch_len],
            partial: vec![Complex64::default(); cfg.m_h * nd],
            row: vec![Complex64::default(); nd],
            codebook,
        }
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    /// Exhaustive-equivalent search for the codeword with maximum projected
    /// power. Ties go to the lowest flat index.
    pub fn detect(&mut self, residual: &[Complex64]) -> Detection {
        let (m_v, m_h, n) = (self.m_v, self.m_h, self.n);
        assert_eq!(residual.len(), m_v * m_h * n, "residual length");
        let nt = self.codebook.thetas.len();
        let np = self.codebook.phis.len();
        let nd = self.codebook.delays.len();

        for (m, spec) in self.spectra.chunks_exact_mut(nd).enumerate() {
            spec[..n].copy_from_slice(&residual[m * n..(m + 1) * n]);
            spec[n..].iter_mut().for_each(|x| *x = Complex64::default());
            self.fft.process_with_scratch(spec, &mut self.scratch);
        }

        let norm = (m_v * m_h * n) as f64;
        let mut best = (-1.0, (0, 0, 0));
        for it in 0..nt {
            let av = &self.conj_av[it * m_v..(it + 1) * m_v];
            self.partial.iter_mut().for_each(|x| *x = Complex64::default());
            for (mv, w) in av.iter().enumerate() {
                for mh in 0..m_h {
                    let src = &self.spectra[(mv * m_h + mh) * nd..(mv * m_h + mh + 1) * nd];
                    let dst = &mut self.partial[mh * nd..(mh + 1) * nd];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
            for ip in 0..np {
                let ah = &self.conj_ah[(it * np + ip) * m_h..(it * np + ip + 1) * m_h];
                self.row.iter_mut().for_each(|x| *x = Complex64::default());
                for (mh, w) in ah.iter().enumerate() {
                    let src = &self.partial[mh * nd..(mh + 1) * nd];
                    for (d, s) in self.row.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
                for (id, v) in self.row.iter().enumerate() {
                    let p = v.norm_sqr() / norm;
                    if beats(p, best.0) {
                        best = (p, (it, ip, id));
                    }
                }
            }
        }
        let (power, (it, ip, id)) = best;
        Detection {
            theta: self.codebook.thetas[it],
            phi: self.codebook.phis[ip],
            delay: self.codebook.delays[id],
            power,
            index: (it, ip, id),
        }
    }
}

/// Matched-filter detection against the oversampled codebook.
pub fn omp_detect(residual: &[Complex64], cfg: &SystemConfig) -> Detection {
    MatchedFilter::new(cfg).detect(residual)
}

/// Threshold `ln(MN) - ln(-ln(1 - P_fa))` on the stopping statistic.
pub fn stopping_threshold(cfg: &SystemConfig) -> f64 {
    (cfg.dim() as f64).ln() - (-(1.0 - cfg.p_fa).ln()).ln()
}

/// Peak projected power of the residual over the critically sampled,
/// unit-norm 3D DFT atoms.
pub fn stopping_statistic(residual: &[Complex64], cfg: &SystemConfig) -> f64 {
    let dims = [cfg.m_v, cfg.m_h, cfg.n_subcarriers];
    let mut buf = residual.to_vec();
    assert_eq!(buf.len(), cfg.dim(), "residual length");
    fft3(&mut buf, dims);
    buf.iter().map(|x| x.norm_sqr()).fold(0.0, f64::max) / cfg.dim() as f64
}

/// In-place forward 3D FFT on a row-major `[d0][d1][d2]` array.
fn fft3(buf: &mut [Complex64], dims: [usize; 3]) {
    let [d0, d1, d2] = dims;
    let mut planner = FftPlanner::new();

    let f2 = planner.plan_fft_forward(d2);
    f2.process(buf);

    let f1 = planner.plan_fft_forward(d1);
    let mut line = vec![Complex64::default(); d1];
    for i0 in 0..d0 {
        for i2 in 0..d2 {
            for (i1, x) in line.iter_mut().enumerate() {
                *x = buf[(i0 * d1 + i1) * d2 + i2];
            }
            f1.process(&mut line);
            for (i1, x) in line.iter().enumerate() {
                buf[(i0 * d1 + i1) * d2 + i2] = *x;
            }
        }
    }

    let f0 = planner.plan_fft_forward(d0);
    let mut line = vec![Complex64::default(); d0];
    let stride = d1 * d2;
    for j in 0..stride {
        for (i0, x) in line.iter_mut().enumerate() {
            *x = buf[i0 * stride + j];
        }
        f0.process(&mut line);
        for (i0, x) in line.iter().enumerate() {
            buf[i0 * stride + j] = *x;
        }
    }
}

/// Critically sampled unit-norm DFT atom, used by tests and diagnostics.
pub fn dft_atom(k: [usize; 3], cfg: &SystemConfig) -> Vec<Complex64> {
    let dims = [cfg.m_v, cfg.m_h, cfg.n_subcarriers];
    let scale = 1.0 / (cfg.dim() as f64).sqrt();
    let mut out = Vec::with_capacity(cfg.dim());
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let ph = 2.0
                    * PI
                    * (k[0] as f64 * i0 as f64 / dims[0] as f64
                        + k[1] as f64 * i1 as f64 / dims[1] as f64
                        + k[2] as f64 * i2 as f64 / dims[2] as f64);
                out.push(cis(ph) * scale);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::complex_noise;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scans every codeword explicitly.
    fn exhaustive(residual: &[Complex64], cfg: &SystemConfig) -> Detection {
        let cb = Codebook::new(cfg);
        let mut best = (-1.0, (0, 0, 0));
        for it in 0..cb.thetas.len() {
            for ip in 0..cb.phis.len() {
                for id in 0..cb.delays.len() {
                    let c = cb.codeword(it, ip, id, cfg);
                    let ip_: Complex64 = c.iter().zip(residual).map(|(c, y)| c.conj() * y).sum();
                    let nc: f64 = c.iter().map(|x| x.norm_sqr()).sum();
                    let p = ip_.norm_sqr() / nc;
                    if beats(p, best.0) {
                        best = (p, (it, ip, id));
                    }
                }
            }
        }
        let (power, (it, ip, id)) = best;
        Detection {
            theta: cb.thetas[it],
            phi: cb.phis[ip],
            delay: cb.delays[id],
            power,
            index: (it, ip, id),
        }
    }

    #[test]
    fn full_scale_codebook_size() {
        let cb = build_codebook(&SystemConfig::default());
        assert_eq!(cb.thetas.len(), 16);
        assert_eq!(cb.phis.len(), 32);
        assert_eq!(cb.delays.len(), 256);
        assert_eq!(cb.len(), 131_072);
    }

    #[test]
    fn minimal_codebook() {
        let cfg = SystemConfig {
            beta_theta: 1,
            beta_phi: 1,
            beta_tau: 1,
            ..SystemConfig::small(2, 2, 2)
        };
        let cb = build_codebook(&cfg);
        assert_eq!(cb.len(), 8);
        assert_eq!(cb.thetas[0], -FRAC_PI_2);
        assert_eq!(cb.phis[0], -FRAC_PI_2);
        assert_eq!(cb.delays[0], 0.0);
        assert!((cb.thetas[1] - 0.0).abs() < 1e-15);
        assert!((cb.delays[1] - 1.0 / (2.0 * cfg.subcarrier_spacing)).abs() < 1e-18);
    }

    #[test]
    fn on_grid_atom_is_found_exactly() {
        let cfg = SystemConfig::small(4, 4, 16);
        let cb = Codebook::new(&cfg);
        let g = Complex64::new(0.7, -1.1);
        let (it, ip, id) = (5, 3, 11);
        let y: Vec<_> = cb.codeword(it, ip, id, &cfg).iter().map(|c| g * c).collect();
        let det = omp_detect(&y, &cfg);
        assert_eq!(det.index, (it, ip, id));
        let want = cfg.dim() as f64 * g.norm_sqr();
        assert!((det.power - want).abs() < 1e-9 * want);
    }

    #[test]
    fn zero_residual_has_zero_power() {
        let cfg = SystemConfig::small(2, 2, 8);
        let det = omp_detect(&vec![Complex64::default(); cfg.dim()], &cfg);
        assert_eq!(det.power, 0.0);
        assert_eq!(det.index, (0, 0, 0));
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (m_v, m_h, n, bt, bp, bd) in [(2, 3, 8, 2, 2, 1), (3, 2, 5, 2, 3, 2), (4, 4, 6, 1, 2, 3)] {
            let cfg = SystemConfig {
                beta_theta: bt,
                beta_phi: bp,
                beta_tau: bd,
                ..SystemConfig::small(m_v, m_h, n)
            };
            let mut mf = MatchedFilter::new(&cfg);
            for trial in 0..5 {
                // two-atom mixture (off grid) plus noise
                let scen = crate::sysmodel::generate_scenario(1, 2, &cfg, 100 + trial);
                let mut y = crate::sysmodel::uplink_channel(&scen.users[0], &cfg);
                for (y, z) in y.iter_mut().zip(complex_noise(&mut rng, cfg.dim(), 0.05)) {
                    *y += z;
                }
                let fast = mf.detect(&y);
                let slow = exhaustive(&y, &cfg);
                assert_eq!(fast.index, slow.index);
                assert!((fast.power - slow.power).abs() <= 1e-9 * slow.power);
            }
        }
    }

    #[test]
    fn threshold_at_full_scale() {
        let cfg = SystemConfig::default();
        assert_eq!(cfg.dim(), 32768);
        assert!((stopping_threshold(&cfg) - 14.997).abs() < 5e-4);
    }

    #[test]
    fn statistic_edge_cases() {
        let cfg = SystemConfig::small(2, 4, 8);
        assert_eq!(stopping_statistic(&vec![Complex64::default(); cfg.dim()], &cfg), 0.0);
        // An aligned DFT atom carries all of its energy on one bin.
        let scale = (cfg.dim() as f64).sqrt();
        let r: Vec<_> = dft_atom([1, 3, 5], &cfg).iter().map(|x| x * scale).collect();
        let energy: f64 = r.iter().map(|x| x.norm_sqr()).sum();
        let stat = stopping_statistic(&r, &cfg);
        assert!((stat - energy).abs() < 1e-9 * energy);
    }

    #[test]
    fn statistic_matches_direct_dft() {
        let cfg = SystemConfig::small(2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = complex_noise(&mut rng, cfg.dim(), 1.0);
        let mut best: f64 = 0.0;
        for k0 in 0..2 {
            for k1 in 0..3 {
                for k2 in 0..4 {
                    // forward DFT uses the conjugate exponent; atoms are unit norm
                    let atom = dft_atom([k0, k1, k2], &cfg);
                    let ip: Complex64 = atom.iter().zip(&r).map(|(a, y)| a * y).sum();
                    best = best.max(ip.norm_sqr());
                }
            }
        }
        assert!((stopping_statistic(&r, &cfg) - best).abs() < 1e-10);
    }
}
