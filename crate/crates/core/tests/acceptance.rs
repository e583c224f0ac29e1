//! Acceptance suite: runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use fairmimic::audit::conditional_parity_curve;
use fairmimic::data::{SimSpec, standard_normal};
use fairmimic::dif::{dif_scan, percent_effect};
use fairmimic::estimate::{fit, OptimOptions};
use fairmimic::model::{log_likelihood, log_likelihood_grad, MimicModel, ModelFrame, ParamLayout};
use fairmimic::score::{fair_score, proxy_score};
use fairmimic::select::{cv_select, lasso_fit, spearman, SelectionRule};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use common::{draw, draw_spec, truth, with_dif};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_model(rng: &mut ChaCha8Rng, p: usize, q: usize) -> MimicModel {
    let mut m = MimicModel::with_dims(p, q);
    for j in 0..p {
        if j > 0 {
            m.loadings[j] = rng.random_range(0.3..1.5);
        }
        m.intercepts[j] = rng.random_range(-1.0..1.0);
        m.resid_vars[j] = rng.random_range(0.3..1.5);
        m.dif_offsets[j] = rng.random_range(-0.3..0.3);
        m.free_mask[j] = true;
    }
    for b in m.struct_coefs.iter_mut() {
        *b = rng.random_range(-0.8..0.8);
    }
    m.sens_coef = rng.random_range(-0.8..0.8);
    m.latent_var = rng.random_range(0.5..1.5);
    m
}

/// Central differences of the log-likelihood with step 1e-5.
fn fd_gradient(model: &MimicModel, frame: &ModelFrame) -> Vec<f64> {
    let layout = ParamLayout::of(model);
    let x = layout.pack(model);
    (0..x.len())
        .map(|k| {
            let h = 1e-5;
            let mut up = x.clone();
            let mut dn = x.clone();
            up[k] += h;
            dn[k] -= h;
            let lu = log_likelihood(&layout.unpack(model, &up), frame).unwrap();
            let ld = log_likelihood(&layout.unpack(model, &dn), frame).unwrap();
            (lu - ld) / (2.0 * h)
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let data = draw(&with_dif(truth(4, 3), 1, 0.3), 300, 7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = random_model(&mut rng, 4, 3);
        let analytic = log_likelihood_grad(&m, &data.frame).unwrap();
        let numeric = fd_gradient(&m, &data.frame);
        for (a, b) in analytic.iter().zip(&numeric) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-6 && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:.2e} over 20 points, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let true_model = truth(4, 3);
    let layout = ParamLayout::of(&true_model);
    let target = layout.pack(&true_model);
    let names = layout.names(&true_model);
    let runs: Vec<(bool, f64, bool)> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let d = draw(&true_model, 5000, 1000 + seed);
            let r = fit(&true_model.clone().without_dif(), &d.frame, &OptimOptions::default()).unwrap();
            let se = r.std_errors.as_ref().unwrap();
            let within = r.estimates.iter().zip(se).zip(&target).all(|((e, s), t)| (e - t).abs() <= 3.0 * s);
            let loading_err = names
                .iter()
                .zip(r.estimates.iter().zip(&target))
                .filter(|(n, _)| n.starts_with("loading["))
                .map(|(_, (e, t))| (e - t).abs())
                .fold(0.0, f64::max);
            (within, loading_err, r.converged)
        })
        .collect();
    let good = runs.iter().filter(|r| r.0).count();
    let worst_loading = runs.iter().map(|r| r.1).fold(0.0, f64::max);
    let all_converged = runs.iter().all(|r| r.2);
    let elapsed = start.elapsed();
    outcome(
        good >= 18 && worst_loading < 0.05 && all_converged && elapsed < Duration::from_secs(120),
        format!(
            "{good}/20 runs with every parameter within 3 SE, worst loading error {worst_loading:.4}, {elapsed:.2?}"
        ),
    )
}

/// Returns (per-indicator null rejection rates, power, coverage).
fn lr_and_coverage() -> (Vec<f64>, f64, usize) {
    let null_model = truth(4, 3);
    let options = OptimOptions::default();
    let rejections: Vec<Vec<bool>> = (0..200u64)
        .into_par_iter()
        .map(|rep| {
            let d = draw(&null_model, 2000, 5000 + rep);
            let report = dif_scan(&null_model.clone().without_dif(), &d.frame, &[], &options).unwrap();
            report.rows.iter().map(|r| r.p_value.unwrap() < 0.05).collect()
        })
        .collect();
    let rates = (0..4)
        .map(|j| rejections.iter().filter(|r| r[j]).count() as f64 / 200.0)
        .collect();

    let alt = with_dif(truth(4, 3), 2, 0.2);
    let alt_rows: Vec<(bool, bool)> = (0..100u64)
        .into_par_iter()
        .map(|rep| {
            let d = draw(&alt, 5000, 9000 + rep);
            let report = dif_scan(&alt.clone().without_dif(), &d.frame, &["y3".to_string()], &options).unwrap();
            let row = &report.rows[0];
            let covers = row.ci_low.unwrap() <= 0.2 && 0.2 <= row.ci_high.unwrap();
            (row.p_value.unwrap() < 0.05, covers)
        })
        .collect();
    let power = alt_rows.iter().filter(|r| r.0).count() as f64 / 100.0;
    let covered = alt_rows.iter().filter(|r| r.1).count();
    (rates, power, covered)
}

fn criterion_3(rates: &[f64], power: f64) -> Outcome {
    let calibrated = rates.iter().all(|r| (0.02..=0.09).contains(r));
    outcome(
        calibrated && power >= 0.95,
        format!("null rejection rates {rates:?} (200 reps each), power {power:.2} at δ = 0.2 (100 reps)"),
    )
}

fn criterion_4(covered: usize) -> Outcome {
    outcome(covered >= 88, format!("{covered}/100 Wald intervals cover δ = 0.2"))
}

fn criterion_5() -> Outcome {
    let mut rows = 0usize;
    let mut mismatches = 0usize;
    for (k, (p, q)) in [(3, 1), (4, 3), (6, 2), (8, 6)].into_iter().enumerate() {
        let d = draw(&truth(p, q), 1500, 300 + k as u64);
        let fitted = fit(&truth(p, q).without_dif(), &d.frame, &OptimOptions::default()).unwrap().model;
        let flipped: Vec<f64> = d.frame.s.iter().map(|s| 1.0 - s).collect();
        for reference in ["0", "1"] {
            let a = fair_score(&fitted, &d.frame.x, &d.frame.s, reference).unwrap();
            let b = fair_score(&fitted, &d.frame.x, &flipped, reference).unwrap();
            rows += a.len();
            mismatches += a.iter().zip(&b).filter(|(u, v)| u.to_bits() != v.to_bits()).count();
        }
    }
    outcome(mismatches == 0, format!("{rows} rows compared bitwise, {mismatches} differ"))
}

/// Group-biased proxies: the focal group has higher values of an `access`
/// covariate that raises cost directly without touching health, and every
/// indicator carries a DIF offset with the signs of the clinical table.
/// Scores are audited against the latent with the sensitive path removed.
fn criterion_6() -> Outcome {
    let names = [
        "chronic_conditions",
        "blood_pressure",
        "hba1c",
        "hematocrit",
        "creatinine",
        "ldl",
        "cost",
        "avoidable_cost",
    ];
    let cost = 6;
    let mut m = MimicModel::new(
        names.iter().map(|s| s.to_string()).collect(),
        vec!["x1".into(), "x2".into(), "access".into()],
        Default::default(),
    );
    m.loadings = vec![1.0, 0.6, 0.7, 0.5, 0.4, 0.5, 0.9, 0.6];
    m.intercepts = vec![2.0, 0.5, 1.0, -0.5, 0.2, 0.0, 7.5, 5.0];
    m.resid_vars = vec![0.6, 0.8, 0.7, 0.5, 0.4, 0.9, 1.0, 0.7];
    m.dif_offsets = vec![0.453, -0.262, -0.343, 0.25, -0.019, -0.235, 0.198, -0.052];
    m.free_mask = vec![true; 8];
    m.struct_coefs = vec![1.0, 0.8, 0.0];
    m.sens_coef = 1.0;
    let mut spec = SimSpec::new(50_000, m.clone(), 0.3, 66);
    spec.covariate_shift = Some(vec![0.0, 0.0, 1.0]);
    let mut direct = vec![vec![0.0; 3]; 8];
    direct[cost][2] = 0.3;
    spec.direct_effects = Some(direct);
    let d = draw_spec(&spec);

    let s = &d.frame.s;
    let target: Vec<f64> = d.latent.iter().zip(s).map(|(eta, s)| eta - m.sens_coef * s).collect();
    let cost_values: Vec<f64> = d.frame.y.column(cost).iter().copied().collect();
    let naive = proxy_score(&d.frame.x, s, &cost_values, false, 0.0).unwrap();
    let corrected = proxy_score(&d.frame.x, s, &cost_values, true, 0.0).unwrap();
    let fitted = fit(&m.clone().without_dif(), &d.frame, &OptimOptions::default()).unwrap();
    let latent = fair_score(&fitted.model, &d.frame.x, s, "0").unwrap();

    let coding = fitted.model.coding.clone();
    let curve = |scores: &[f64]| conditional_parity_curve(scores, s, &target, 10, &coding).unwrap();
    let (cn, cc, cf) = (curve(&naive), curve(&corrected), curve(&latent));
    let (gn, gc, gf) = (cn.mean_abs_gap, cc.mean_abs_gap, cf.mean_abs_gap);
    let over: Vec<String> = cf
        .gap_by_bin
        .iter()
        .zip(&cn.gap_by_bin)
        .enumerate()
        .filter_map(|(b, (f, n))| match (f, n) {
            (Some(f), Some(n)) if f.abs() < 0.25 * n.abs() => None,
            (Some(f), Some(n)) => Some(format!("bin {}: {:.3} vs {:.3}", b + 1, f.abs(), n.abs())),
            _ => Some(format!("bin {}: empty", b + 1)),
        })
        .collect();
    outcome(
        fitted.converged && gn > gc && gc > gf && gf < 0.25 * gn && over.is_empty(),
        format!(
            "mean |gap| naive {gn:.4} > corrected {gc:.4} > latent {gf:.4}; latent/naive = {:.3}; \
             bins where latent |gap| is not below 25% of naive: {over:?}",
            gf / gn
        ),
    )
}

fn criterion_7() -> Outcome {
    let e = percent_effect(0.198, (0.172, 0.225));
    outcome(
        (e.percent - 21.9).abs() <= 0.05,
        format!("δ = 0.198 → {:.3}% [{:.2}, {:.2}]", e.percent, e.ci_low, e.ci_high),
    )
}

fn kkt_violation(x: &DMatrix<f64>, y: &[f64], intercept: f64, w: &[f64], penalty: f64) -> f64 {
    let n = x.nrows() as f64;
    let r: Vec<f64> = (0..x.nrows())
        .map(|i| y[i] - intercept - (0..x.ncols()).map(|j| x[(i, j)] * w[j]).sum::<f64>())
        .collect();
    (0..x.ncols())
        .map(|j| {
            let g = (0..x.nrows()).map(|i| x[(i, j)] * r[i]).sum::<f64>() / n;
            if w[j] == 0.0 {
                (g.abs() - penalty).max(0.0)
            } else {
                (g - penalty * w[j].signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

fn normal_equations(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let n = x.nrows();
    let design = DMatrix::from_fn(n, x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * DVector::from_column_slice(y);
    xtx.lu().solve(&xty).unwrap().iter().copied().collect()
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst_kkt: f64 = 0.0;
    let mut worst_ols: f64 = 0.0;
    for _ in 0..20 {
        let x = DMatrix::from_fn(6, 3, |_, _| standard_normal(&mut rng));
        let y: Vec<f64> = (0..6).map(|_| standard_normal(&mut rng)).collect();
        for penalty in [0.01, 0.1, 0.3] {
            let f = lasso_fit(&x, &y, penalty).unwrap();
            worst_kkt = worst_kkt.max(kkt_violation(&x, &y, f.intercept, &f.coefficients, penalty));
        }
        let f = lasso_fit(&x, &y, 0.0).unwrap();
        let ols = normal_equations(&x, &y);
        worst_ols = worst_ols.max((f.intercept - ols[0]).abs());
        for j in 0..3 {
            worst_ols = worst_ols.max((f.coefficients[j] - ols[j + 1]).abs());
        }
    }
    let x = DMatrix::from_fn(500, 10, |_, _| standard_normal(&mut rng));
    let y: Vec<f64> = (0..500).map(|i| 1.5 * x[(i, 2)] - 2.0 * x[(i, 7)] + 0.5).collect();
    let path = cv_select(&x, &y, 10, None, 3, SelectionRule::MinCv).unwrap();
    let planted = path.active_set == [2, 7];
    outcome(
        worst_kkt < 1e-5 && worst_ols < 1e-6 && planted,
        format!(
            "max KKT violation {worst_kkt:.2e}, max OLS deviation {worst_ols:.2e}, planted support recovered: {planted} ({:?})",
            path.active_set
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut exact = true;
    exact &= (spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() <= 1e-12;
    exact &= (spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() <= 1e-12;
    exact &= (spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() <= 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut invariant = 0;
    for _ in 0..100 {
        let n = rng.random_range(5..60);
        let a: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| (standard_normal(&mut rng) * 3.0).round()).collect();
        let (shift, scale) = (rng.random_range(-5.0..5.0), rng.random_range(0.1..4.0));
        let ta: Vec<f64> = a.iter().map(|v| (scale * v).exp() + shift).collect();
        let tb: Vec<f64> = b.iter().map(|v| v * v * v + scale * v).collect();
        let (Ok(r), Ok(t)) = (spearman(&a, &b), spearman(&ta, &tb)) else {
            continue;
        };
        if (r - t).abs() <= 1e-12 {
            invariant += 1;
        }
    }
    outcome(
        exact && invariant == 100,
        format!("hand cases exact: {exact}; monotone-transform invariance {invariant}/100"),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    let mut full = vec!["fairmimic"];
    full.extend_from_slice(args);
    fairmimic::cli::run(full)
}

fn demo_pipeline(dir: &Path) -> Result<(), String> {
    let d = dir.to_str().unwrap();
    let data = format!("{d}/data.csv");
    let roles = format!("{d}/roles.json");
    let selected = format!("{d}/selected_roles.json");
    let model = format!("{d}/model.json");
    let scores = format!("{d}/scores.csv");
    let steps: Vec<Vec<&str>> = vec![
        vec!["simulate", "--out-dir", d, "--seed", "20240501"],
        vec!["select", "--data", &data, "--roles", &roles, "--out-dir", d, "--target", "cost"],
        vec!["fit", "--data", &data, "--roles", &selected, "--out-dir", d],
        vec!["score", "--data", &data, "--roles", &selected, "--model", &model, "--out-dir", d],
        vec![
            "audit", "--data", &data, "--roles", &selected, "--model", &model, "--scores", &scores, "--out-dir", d,
            "--proxy", "chronic_conditions",
        ],
        vec!["dif", "--data", &data, "--roles", &selected, "--model", &model, "--out-dir", d],
    ];
    for step in steps {
        let code = run_cli(&step);
        if code != 0 {
            return Err(format!("{} exited with {code}", step[0]));
        }
    }
    Ok(())
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    if let Err(e) = demo_pipeline(dir.path()) {
        return outcome(false, e);
    }
    let first_time = start.elapsed();
    let first = snapshot(dir.path());
    if let Err(e) = demo_pipeline(dir.path()) {
        return outcome(false, e);
    }
    let second = snapshot(dir.path());
    let differing: Vec<&String> = first
        .keys()
        .filter(|k| second.get(*k) != first.get(*k))
        .collect();
    outcome(
        differing.is_empty() && first.len() == second.len() && first_time < Duration::from_secs(60),
        format!(
            "{} files, byte-identical across runs: {} (differing: {differing:?}), single run {first_time:.2?}",
            first.len(),
            differing.is_empty()
        ),
    )
}

fn main() {
    let (rates, power, covered) = lr_and_coverage();
    let results = [
        ("1 gradient correctness", criterion_1()),
        ("2 parameter recovery", criterion_2()),
        ("3 LR-test calibration", criterion_3(&rates, power)),
        ("4 DIF CI coverage", criterion_4(covered)),
        ("5 counterfactual invariance", criterion_5()),
        ("6 conditional parity ordering", criterion_6()),
        ("7 percent effect", criterion_7()),
        ("8 LASSO oracle", criterion_8()),
        ("9 Spearman oracle", criterion_9()),
        ("10 pipeline determinism", criterion_10()),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
