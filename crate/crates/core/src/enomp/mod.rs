//! Path parameter extraction from a noisy uplink sounding vector.
//!
//! Each iteration detects one new path on the oversampled codebook,
//! refines it with Newton steps, cyclically refines every detected path,
//! then re-fits all gains jointly by least squares. Iteration stops once
//! the residual no longer exceeds the false-alarm threshold.

mod codebook;
mod newton;

pub use codebook::{
    build_codebook, dft_atom, omp_detect, stopping_statistic, stopping_threshold, Codebook,
    Detection, MatchedFilter,
};
pub use newton::{
    coarse_gain, newton_refine, objective_derivatives, objective_s, Derivatives, NewtonStep,
};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysmodel::SystemConfig;
use newton::{newton_step, Atom};

/// One extracted path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedPath {
    pub gain: Complex64,
    pub theta: f64,
    pub phi: f64,
    pub delay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Residual fell below the false-alarm threshold.
    Threshold,
    /// Iteration cap reached.
    Cap,
    /// Joint gain update became singular; the newest path was dropped.
    Degenerate,
}

#[derive(Debug, Clone)]
pub struct ExtractionResult {
    pub paths: Vec<DetectedPath>,
    pub residual: Vec<Complex64>,
    pub iterations: usize,
    pub stop: StopReason,
}

impl ExtractionResult {
    /// Reconstructed uplink channel `sum_l g_l a (x) p`, in observation units.
    pub fn reconstruction(&self, cfg: &SystemConfig) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); cfg.dim()];
        for p in &self.paths {
            Atom::new(p.theta, p.phi, p.delay, cfg).add_to(&mut out, p.gain);
        }
        out
    }
}

/// Tuning knobs that the algorithm description leaves open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnompOptions {
    /// Cyclic refinement rounds over all detected paths per iteration.
    pub cyclic_rounds: usize,
    /// Newton steps per refinement visit.
    pub newton_steps: usize,
    /// Hard cap on detected paths.
    pub max_paths: usize,
    /// Noise variance assumed by the stopping rule.
    pub noise_variance: f64,
    /// When the full Hessian is indefinite but every diagonal entry is
    /// negative, try a per-coordinate Newton step instead of giving up.
    /// Ascent is still required.
    pub diagonal_fallback: bool,
}

impl Default for EnompOptions {
    fn default() -> Self {
        Self {
            cyclic_rounds: 3,
            newton_steps: 1,
            max_paths: 32,
            noise_variance: 1.0,
            diagonal_fallback: true,
        }
    }
}

struct Component {
    atom: Atom,
    gain: Complex64,
}

/// Refine one component in place against `residual`, which must exclude
/// that component. The gain is re-projected after every step.
fn refine(
    comp: &mut Component,
    residual: &[Complex64],
    opts: &EnompOptions,
    cfg: &SystemConfig,
) -> Result<()> {
    for _ in 0..opts.newton_steps {
        match newton_step(residual, comp.gain, &comp.atom, cfg, opts.diagonal_fallback)? {
            Some(atom) => comp.atom = atom,
            None => break,
        }
        comp.gain = comp.atom.inner(residual) / comp.atom.norm_sqr();
    }
    Ok(())
}

/// Least-squares gains of `y` on all atoms, or `None` if the Gram matrix
/// is numerically singular.
fn joint_gains(y: &[Complex64], comps: &[Component]) -> Option<Vec<Complex64>> {
    let l = comps.len();
    let gram = DMatrix::from_fn(l, l, |r, c| comps[r].atom.gram(&comps[c].atom));
    let rhs = DVector::from_iterator(l, comps.iter().map(|c| c.atom.inner(y)));
    let chol = gram.cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .map(|d| d.re)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d), hi.max(d)));
    if !(lo > 0.0) || (lo / hi).powi(2) < 1e-12 {
        return None;
    }
    Some(chol.solve(&rhs).iter().copied().collect())
}

fn rebuild_residual(y: &[Complex64], comps: &[Component]) -> Vec<Complex64> {
    let mut r = y.to_vec();
    for c in comps {
        c.atom.add_to(&mut r, -c.gain);
    }
    r
}

/// Extract paths with default options.
pub fn extract(y: &[Complex64], cfg: &SystemConfig) -> Result<ExtractionResult> {
    Extractor::new(cfg, EnompOptions::default()).run(y)
}

/// Holds the matched-filter workspace so repeated extractions on the same
/// configuration reuse it. Not shared across threads.
pub struct Extractor {
    cfg: SystemConfig,
    opts: EnompOptions,
    filter: MatchedFilter,
}

impl Extractor {
    pub fn new(cfg: &SystemConfig, opts: EnompOptions) -> Self {
        Self {
            cfg: cfg.clone(),
            opts,
            filter: MatchedFilter::new(cfg),
        }
    }

    pub fn run(&mut self, y: &[Complex64]) -> Result<ExtractionResult> {
        let cfg = &self.cfg;
        if y.len() != cfg.dim() {
            return Err(Error::LengthMismatch {
                expected: cfg.dim(),
                got: y.len(),
            });
        }
        let threshold = stopping_threshold(cfg) * self.opts.noise_variance;
        let mut comps: Vec<Component> = Vec::new();
        let mut residual = y.to_vec();
        let mut iterations = 0;

        let stop = loop {
            if stopping_statistic(&residual, cfg) < threshold {
                break StopReason::Threshold;
            }
            if comps.len() >= self.opts.max_paths {
                break StopReason::Cap;
            }
            iterations += 1;

            // new detection + single refinement
            let det = self.filter.detect(&residual);
            let atom = Atom::new(det.theta, det.phi, det.delay, cfg);
            let gain = atom.inner(&residual) / atom.norm_sqr();
            let mut comp = Component { atom, gain };
            refine(&mut comp, &residual, &self.opts, cfg)?;
            comp.atom.add_to(&mut residual, -comp.gain);
            comps.push(comp);

            // cyclic refinement
            for _ in 0..self.opts.cyclic_rounds {
                for comp in comps.iter_mut() {
                    comp.atom.add_to(&mut residual, comp.gain);
                    refine(comp, &residual, &self.opts, cfg)?;
                    comp.atom.add_to(&mut residual, -comp.gain);
                }
            }

            // joint gain update
            match joint_gains(y, &comps) {
                Some(gains) => {
                    for (c, g) in comps.iter_mut().zip(gains) {
                        c.gain = g;
                    }
                    residual = rebuild_residual(y, &comps);
                }
                None => {
                    comps.pop();
                    if let Some(gains) = joint_gains(y, &comps) {
                        for (c, g) in comps.iter_mut().zip(gains) {
                            c.gain = g;
                        }
                    }
                    residual = rebuild_residual(y, &comps);
                    break StopReason::Degenerate;
                }
            }
        };

        let paths = comps
            .iter()
            .map(|c| DetectedPath {
                gain: c.gain,
                theta: c.atom.theta,
                phi: c.atom.phi,
                delay: c.atom.delay,
            })
            .collect();
        Ok(ExtractionResult {
            paths,
            residual,
            iterations,
            stop,
        })
    }
}
