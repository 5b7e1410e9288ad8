use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dltrain::{
    coefficient_matrix, estimate_downlink_gains, noiseless_downlink_pilots, predict_nmse, schedule_beams,
    simulate_downlink_pilots,
};
use crate::enomp::{DetectedPath, Extractor};
use crate::error::{Error, Result};
use crate::mueval::{analytic_sinr, evaluate_rates, monte_carlo_sinr};
use crate::recon::{
    channel_nmse, cost_report, dft_pilots, reconstruct, simulate_training, LmmseDesign, LsEstimator,
    SpatialCovariance,
};
use crate::sysmodel::{
    derive_seed, downlink_channel, generate_scenario_with, sounding_observation, uplink_channel, Scenario,
    ScenarioSpec, SystemConfig,
};

use super::config::{Experiment, RunSettings};
use super::output::{Aggregator, ResultRow, TrialOutcome};

// Sub-streams of a trial seed.
const SCENARIO: u64 = 1;
const SOUNDING: u64 = 2;
const DL_PILOTS: u64 = 3;
const BASELINE: u64 = 4;
const ERROR_DRAWS: u64 = 5;
const COVARIANCE: u64 = 9;

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

fn trial_seed(run: &RunSettings, trial: usize) -> u64 {
    derive_seed(run.seed, run.stream(), trial as u64)
}

fn scenario(run: &RunSettings, seed: u64) -> Scenario {
    let spec = ScenarioSpec {
        users: run.users,
        paths: run.paths,
        attenuation_db: run.attenuation_db,
    };
    generate_scenario_with(&spec, &run.system, derive_seed(seed, SCENARIO, 0))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Extracted paths with gains rescaled from observation to channel units.
fn channel_units(paths: &[DetectedPath], power: f64) -> Vec<DetectedPath> {
    let s = power.sqrt();
    paths
        .iter()
        .map(|p| DetectedPath {
            gain: p.gain / s,
            ..*p
        })
        .collect()
}

/// Per-subcarrier `K x M` matrices from per-user `M N` channel vectors.
fn per_subcarrier(channels: &[Vec<Complex64>], cfg: &SystemConfig) -> Vec<DMatrix<Complex64>> {
    let n = cfg.n_subcarriers;
    (0..n)
        .map(|k| DMatrix::from_fn(channels.len(), cfg.num_antennas(), |u, m| channels[u][m * n + k]))
        .collect()
}

fn spatial_covariance(run: &RunSettings) -> Result<LmmseDesign> {
    let cov = SpatialCovariance::sample(
        &run.system,
        run.covariance_draws,
        derive_seed(run.seed, COVARIANCE, 0),
    );
    LmmseDesign::new(&cov)
}

/// Run trials on the rayon pool and reduce them in trial order.
fn run_trials<F>(run: &RunSettings, sweep: &[f64], trial: F) -> Vec<ResultRow>
where
    F: Fn(&mut Extractor, usize) -> Vec<TrialOutcome> + Sync,
{
    let outcomes: Vec<Vec<TrialOutcome>> = (0..run.trials)
        .into_par_iter()
        .map_init(|| Extractor::new(&run.system, run.enomp), |ex, t| trial(ex, t))
        .collect();
    let mut agg = Aggregator::new(run.experiment.name(), sweep);
    for per_point in outcomes {
        for (i, o) in per_point.into_iter().enumerate() {
            agg.record(i, o);
        }
    }
    agg.rows()
}

fn broadcast_error(points: usize, e: Error) -> Vec<TrialOutcome> {
    vec![Err(e.to_string()); points]
}

/// Uplink NMSE of LS, LMMSE and eNOMP reconstruction over an SNR sweep.
pub fn run_fig4(run: &RunSettings) -> Result<Vec<ResultRow>> {
    let design = spatial_covariance(run)?;
    let identity = DMatrix::<Complex64>::identity(run.system.num_antennas(), run.system.num_antennas());
    let ls = LsEstimator::new(&identity)?;
    let points = run.snr_db.len();

    let trial = |ex: &mut Extractor, t: usize| -> Vec<TrialOutcome> {
        let ts = trial_seed(run, t);
        let scen = scenario(run, ts);
        (0..points)
            .map(|s| -> TrialOutcome {
                let cfg = run.system.clone().with_power(db_to_linear(run.snr_db[s]));
                let mut nmse = [Vec::new(), Vec::new(), Vec::new()];
                let mut detected = 0.0;
                for (k, paths) in scen.users.iter().enumerate() {
                    let h = uplink_channel(paths, &cfg);
                    let seed = derive_seed(ts, SOUNDING, (s * run.users + k) as u64);
                    let y = sounding_observation(paths, &cfg, seed);
                    let est_ls = ls.estimate(&y, &cfg).map_err(|e| e.to_string())?;
                    let att = db_to_linear(scen.attenuation_db[k]);
                    let est_lmmse = design.filter(att, cfg.power).apply(&est_ls, &cfg);
                    let res = ex.run(&y).map_err(|e| e.to_string())?;
                    let amp = cfg.power.sqrt();
                    let rec: Vec<_> = res.reconstruction(&cfg).iter().map(|x| x / amp).collect();
                    let m = |e: &[Complex64]| channel_nmse(e, &h).map_err(|e| e.to_string());
                    nmse[0].push(m(&est_ls)?);
                    nmse[1].push(m(&est_lmmse)?);
                    nmse[2].push(m(&rec)?);
                    detected += res.paths.len() as f64;
                }
                Ok(vec![
                    ("nmse_ls", mean(&nmse[0])),
                    ("nmse_lmmse", mean(&nmse[1])),
                    ("nmse_enomp", mean(&nmse[2])),
                    ("paths_detected", detected / run.users as f64),
                ])
            })
            .collect()
    };
    Ok(run_trials(run, &run.snr_db, trial))
}

/// Beam scheduling, gain estimation and sum rates over a delta sweep.
pub fn run_fig6(run: &RunSettings) -> Result<Vec<ResultRow>> {
    let design = spatial_covariance(run)?;
    let m = run.system.num_antennas();
    let dft = dft_pilots(m);
    let ls = LsEstimator::new(&dft)?;
    let power = db_to_linear(run.snr_db[0]);
    let cfg = run.system.clone().with_power(power);
    let points = run.deltas.len();
    let tc = cfg.coherence_length;

    let trial = |ex: &mut Extractor, t: usize| -> Vec<TrialOutcome> {
        let ts = trial_seed(run, t);
        let scen = scenario(run, ts);
        let shared = (|| -> Result<_> {
            let mut detected = Vec::with_capacity(run.users);
            for (k, paths) in scen.users.iter().enumerate() {
                let y = sounding_observation(paths, &cfg, derive_seed(ts, SOUNDING, k as u64));
                detected.push(channel_units(&ex.run(&y)?.paths, power));
            }
            let truth: Vec<_> = scen.users.iter().map(|p| downlink_channel(p, &cfg)).collect();
            let truth_sub = per_subcarrier(&truth, &cfg);

            let mut lmmse = Vec::with_capacity(run.users);
            let mut lmmse_nmse = Vec::with_capacity(run.users);
            for (k, h) in truth.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ts, BASELINE, k as u64));
                let obs = simulate_training(h, &dft, &cfg, &mut rng);
                let est = ls.estimate(&obs, &cfg)?;
                let est = design.filter(db_to_linear(scen.attenuation_db[k]), power).apply(&est, &cfg);
                lmmse_nmse.push(channel_nmse(&est, h)?);
                lmmse.push(est);
            }
            let lmmse_rate = evaluate_rates(&truth_sub, &per_subcarrier(&lmmse, &cfg), power, m, tc)?.sum_rate;
            Ok((detected, truth, truth_sub, mean(&lmmse_nmse), lmmse_rate))
        })();
        let (detected, truth, truth_sub, lmmse_nmse, lmmse_rate) = match shared {
            Ok(v) => v,
            Err(e) => return broadcast_error(points, e),
        };

        (0..points)
            .map(|d| -> TrialOutcome {
                let point = || -> Result<Vec<(&'static str, f64)>> {
                    let cfg_d = cfg.clone().with_delta(run.deltas[d]);
                    let plan = schedule_beams(&detected, &cfg_d);
                    let tp = plan.training_symbols();
                    let mut gain_nmse = Vec::new();
                    let mut predicted: f64 = 0.0;
                    let mut channel = Vec::new();
                    let mut recon = Vec::new();
                    for (k, paths) in detected.iter().enumerate() {
                        let a = coefficient_matrix(paths, &plan, &cfg_d);
                        let ul: Vec<_> = paths.iter().map(|p| p.gain).collect();
                        predicted = predicted.max(predict_nmse(&a, &ul, power)?);
                        let seed = derive_seed(ts, DL_PILOTS, (d * run.users + k) as u64);
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let y = simulate_downlink_pilots(&scen.users[k], &plan, &cfg_d, &mut rng);
                        let g = estimate_downlink_gains(&y, &a, power)?;
                        let clean = noiseless_downlink_pilots(&scen.users[k], &plan, &cfg_d);
                        let g_ref = estimate_downlink_gains(&clean, &a, power)?;
                        gain_nmse.push(channel_nmse(&g, &g_ref)?);
                        let h = reconstruct(paths, &g)?.full(&cfg_d);
                        channel.push(channel_nmse(&h, &truth[k])?);
                        recon.push(h);
                    }
                    let rate = evaluate_rates(&truth_sub, &per_subcarrier(&recon, &cfg), power, tp, tc)?;
                    let perfect = evaluate_rates(&truth_sub, &truth_sub, power, tp, tc)?;
                    let cost = cost_report(&plan, &detected.iter().map(Vec::len).collect::<Vec<_>>(), &cfg);
                    Ok(vec![
                        ("training_symbols", tp as f64),
                        ("feasible", if plan.feasible { 1.0 } else { 0.0 }),
                        ("predicted_nmse_max", predicted),
                        ("gain_nmse", mean(&gain_nmse)),
                        ("channel_nmse_recon", mean(&channel)),
                        ("channel_nmse_lmmse", lmmse_nmse),
                        ("rate_recon", rate.sum_rate),
                        ("rate_perfect", perfect.sum_rate),
                        ("rate_lmmse", lmmse_rate),
                        ("feedback_recon", cost.reconstruction.feedback_complex_numbers as f64),
                        ("feedback_lmmse", cost.lmmse.feedback_complex_numbers as f64),
                    ])
                };
                point().map_err(|e| e.to_string())
            })
            .collect()
    };
    Ok(run_trials(run, &run.deltas, trial))
}

/// Closed-form expected SINR against Monte Carlo over the error model, on
/// subcarrier 0 of random multipath channels.
pub fn run_theorem1(run: &RunSettings) -> Result<Vec<ResultRow>> {
    let power = db_to_linear(run.snr_db[0]);
    let cfg = run.system.clone().with_power(power);
    let points = run.deltas.len();
    let trial = |_: &mut Extractor, t: usize| -> Vec<TrialOutcome> {
        let ts = trial_seed(run, t);
        let scen = scenario(run, ts);
        let rows: Vec<_> = scen.users.iter().map(|p| downlink_channel(p, &cfg)).collect();
        let h = per_subcarrier(&rows, &cfg).swap_remove(0);
        (0..points)
            .map(|d| {
                let delta = run.deltas[d];
                let point = || -> Result<Vec<(&'static str, f64)>> {
                    let an = analytic_sinr(&h, delta, power)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ts, ERROR_DRAWS, d as u64));
                    let mc = monte_carlo_sinr(&h, delta, power, run.monte_carlo_draws, &mut rng)?;
                    let rel = an
                        .iter()
                        .zip(&mc)
                        .map(|(a, m)| (m - a).abs() / a)
                        .fold(0.0, f64::max);
                    Ok(vec![
                        ("sinr_analytic", mean(&an)),
                        ("sinr_monte_carlo", mean(&mc)),
                        ("max_rel_error", rel),
                    ])
                };
                point().map_err(|e| e.to_string())
            })
            .collect()
    };
    Ok(run_trials(run, &run.deltas, trial))
}

/// Single-shot extraction on one synthetic user. Rows are indexed by path;
/// gains are in channel units.
pub fn run_extract(run: &RunSettings) -> Result<Vec<ResultRow>> {
    let power = db_to_linear(run.snr_db[0]);
    let cfg = run.system.clone().with_power(power);
    let ts = trial_seed(run, 0);
    let scen = scenario(run, ts);
    let paths = &scen.users[0];
    let y = sounding_observation(paths, &cfg, derive_seed(ts, SOUNDING, 0));
    let res = Extractor::new(&cfg, run.enomp).run(&y)?;
    let detected = channel_units(&res.paths, power);
    let est: Vec<_> = res.reconstruction(&cfg).iter().map(|x| x / power.sqrt()).collect();
    let nmse = channel_nmse(&est, &uplink_channel(paths, &cfg))?;

    let row = |point: usize, metric: &str, value: f64| ResultRow {
        experiment: Experiment::Extract.name().to_string(),
        sweep_point: point as f64,
        metric: metric.to_string(),
        value,
        trials: 1,
        std_error: 0.0,
    };
    let mut rows = vec![
        row(0, "nmse_enomp", nmse),
        row(0, "paths_detected", detected.len() as f64),
        row(0, "paths_true", paths.len() as f64),
    ];
    for (i, p) in detected.iter().enumerate() {
        rows.push(row(i, "detected_theta", p.theta));
        rows.push(row(i, "detected_phi", p.phi));
        rows.push(row(i, "detected_delay", p.delay));
        rows.push(row(i, "detected_gain_re", p.gain.re));
        rows.push(row(i, "detected_gain_im", p.gain.im));
    }
    for (i, p) in paths.iter().enumerate() {
        rows.push(row(i, "true_theta", p.theta));
        rows.push(row(i, "true_phi", p.phi));
        rows.push(row(i, "true_delay", p.delay));
        rows.push(row(i, "true_gain_re", p.gain_ul.re));
        rows.push(row(i, "true_gain_im", p.gain_ul.im));
    }
    Ok(rows)
}
