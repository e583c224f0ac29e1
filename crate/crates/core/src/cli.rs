//! Command-line front end.
//!
//! Every subcommand computes all of its outputs in memory before touching
//! the output directory, echoes its resolved flags into
//! `<subcommand>_config.json`, and exits 0 on success, 1 on input or
//! validation errors and 2 when the optimizer does not converge.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::audit::{conditional_parity_curve, counterfactual_check, predictive_parity, statistical_parity, ConditionalParityCurve};
use crate::data::{load_csv, simulate, split, transform, Dataset, RoleConfig, SimSpec, TransformRecord};
use crate::dif::dif_scan_from_base;
use crate::error::{Error, Result};
use crate::estimate::{fit, fit_from, OptimOptions};
use crate::model::{log_likelihood, MimicModel};
use crate::score::{nearest_rank, score_set, fair_score, naive_score, ScoreKind, ScoreSet};
use crate::select::{cv_select, SelectionRule};

/// Thread count for the worker pool; unset means one per core.
pub const THREADS_ENV: &str = "FAIRMIMIC_THREADS";

pub const DEMO_SIM_SPEC: &str = include_str!("../assets/demo_sim_spec.json");

#[derive(Parser, Debug)]
#[command(name = "fairmimic", version, about = "Fair risk scores from a MIMIC latent-variable model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic dataset from a known model.
    Simulate(SimulateArgs),
    /// Cross-validated LASSO over the covariates.
    Select(SelectArgs),
    /// Fit the model on the training split.
    Fit(FitArgs),
    /// Fair and naive scores with percentile decisions.
    Score(ScoreArgs),
    /// Parity diagnostics for a score file.
    Audit(AuditArgs),
    /// One-at-a-time differential item functioning scan.
    Dif(DifArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    data: PathBuf,
    /// Role config JSON.
    #[arg(long)]
    roles: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SplitArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
}

#[derive(Args, Debug, Serialize)]
struct OptimArgs {
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Gradient-norm tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

impl OptimArgs {
    fn options(&self) -> OptimOptions {
        OptimOptions {
            max_iter: self.max_iter,
            grad_tol: self.tol,
            ..OptimOptions::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// SimSpec JSON; the packaged demo spec when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the spec's row count.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Indicator to predict; the first indicator when omitted.
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[command(flatten)]
    split: SplitArgs,
    /// Largest penalty within one standard error of the best CV error.
    #[arg(long)]
    one_se: bool,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Indicators whose δ is estimated (comma separated).
    #[arg(long, value_delimiter = ',')]
    free_dif: Vec<String>,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum DecideOn {
    Fair,
    Naive,
}

#[derive(Args, Debug, Serialize)]
struct ModelArgs {
    /// Fitted model.json.
    #[arg(long)]
    model: PathBuf,
    /// Transform record; `transform_record.json` next to the model when omitted.
    #[arg(long)]
    transform: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ScoreArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long, default_value_t = 55.0)]
    percentile: f64,
    /// Level the sensitive attribute is fixed at; the model's reference level when omitted.
    #[arg(long)]
    reference_level: Option<String>,
    #[arg(long, value_enum, default_value_t = DecideOn::Fair)]
    decide_on: DecideOn,
}

#[derive(Args, Debug, Serialize)]
struct AuditArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// scores.csv from the score subcommand.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Numeric column compared across groups; the first indicator when omitted.
    #[arg(long)]
    proxy: Option<String>,
    #[arg(long)]
    reference_level: Option<String>,
    /// Binarize the proxy above this percentile and report predictive parity.
    #[arg(long)]
    outcome_percentile: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct DifArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Indicators to test (comma separated); all when omitted.
    #[arg(long, value_delimiter = ',')]
    indicators: Vec<String>,
}

/// Files produced by one subcommand, written only once all are ready.
struct Outputs {
    files: Vec<(String, Vec<u8>)>,
    converged: bool,
}

impl Outputs {
    fn new(subcommand: &str, args: &impl Serialize) -> Result<Self> {
        let config = json!({ "subcommand": subcommand, "flags": args });
        let mut out = Outputs {
            files: Vec::new(),
            converged: true,
        };
        out.add(&format!("{subcommand}_config.json"), serde_json::to_string_pretty(&config)?);
        Ok(out)
    }

    fn add(&mut self, name: &str, contents: String) {
        let mut bytes = contents.into_bytes();
        if bytes.last() != Some(&b'\n') {
            bytes.push(b'\n');
        }
        self.files.push((name.to_string(), bytes));
    }

    fn add_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.add(name, serde_json::to_string_pretty(value)?);
        Ok(())
    }

    fn write(self, dir: &Path) -> Result<bool> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(self.converged)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load(args: &DataArgs) -> Result<(Dataset, RoleConfig)> {
    let roles = RoleConfig::from_json(&read(&args.roles)?)?;
    Ok((load_csv(&args.data, &roles)?, roles))
}

fn load_model(args: &ModelArgs) -> Result<(MimicModel, TransformRecord)> {
    let model = MimicModel::from_json(&read(&args.model)?)?;
    let record_path = args.transform.clone().unwrap_or_else(|| {
        args.model
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("transform_record.json")
    });
    let record = TransformRecord::from_json(&read(&record_path)?)?;
    Ok((model, record))
}

/// The data must present the model's columns, in model order, and the same
/// sensitive coding.
fn check_compatible(model: &MimicModel, data: &Dataset) -> Result<()> {
    if data.indicator_names() != model.indicator_names {
        return Err(Error::InvalidArgument(format!(
            "data indicators {:?} do not match the model's {:?}",
            data.indicator_names(),
            model.indicator_names
        )));
    }
    if data.covariate_names() != model.covariate_names {
        return Err(Error::InvalidArgument(format!(
            "data covariates {:?} do not match the model's {:?}",
            data.covariate_names(),
            model.covariate_names
        )));
    }
    if data.coding() != &model.coding {
        return Err(Error::InvalidArgument(format!(
            "data sensitive coding {:?} does not match the model's {:?}",
            data.coding(),
            model.coding
        )));
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<Outputs> {
    let mut spec = match &args.spec {
        Some(path) => SimSpec::from_json(&read(path)?)?,
        None => SimSpec::from_json(DEMO_SIM_SPEC)?,
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.n {
        spec.n = n;
    }
    let sim = simulate(&spec)?;
    let mut roles = sim.data.role_config();
    roles.standardize = sim.data.covariate_names();

    let mut truth = csv::Writer::from_writer(Vec::new());
    truth.write_record(["row_id", "latent"])?;
    for (id, eta) in sim.data.row_ids().iter().zip(&sim.latent) {
        truth.write_record([id.clone(), eta.to_string()])?;
    }
    let truth = truth.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;

    let mut out = Outputs::new("simulate", args)?;
    out.add("data.csv", sim.data.to_csv_string()?);
    out.add("truth.csv", String::from_utf8(truth).expect("CSV output is UTF-8"));
    out.add("roles.json", roles.to_json()?);
    out.add_json("sim_spec.json", &spec)?;
    Ok(out)
}

/// Training split with transforms fitted on it, plus the record.
fn training_split(data: &Dataset, roles: &RoleConfig, split_args: &SplitArgs) -> Result<(Dataset, Dataset, TransformRecord)> {
    let (train, test) = split(data, split_args.train_frac, split_args.seed)?;
    let (train, record) = transform(&train, &roles.transform_spec())?;
    let test = record.apply(&test)?;
    Ok((train, test, record))
}

fn cmd_select(args: &SelectArgs) -> Result<Outputs> {
    let (data, roles) = load(&args.data)?;
    let target = match &args.target {
        Some(t) => t.clone(),
        None => data.indicator_names()[0].clone(),
    };
    if !data.indicator_names().contains(&target) {
        return Err(Error::InvalidArgument(format!("target '{target}' is not an indicator")));
    }
    let (train, _, _) = training_split(&data, &roles, &args.split)?;
    let names = train.covariate_names();
    if names.is_empty() {
        return Err(Error::InvalidArgument("no covariates to select from".into()));
    }
    let rule = if args.one_se { SelectionRule::OneSe } else { SelectionRule::MinCv };
    let path = cv_select(
        &train.covariate_matrix(),
        train.numeric(&target)?,
        args.folds,
        None,
        args.split.seed,
        rule,
    )?;
    let active: Vec<String> = path.active_set.iter().map(|&j| names[j].clone()).collect();

    let mut out = Outputs::new("select", args)?;
    out.add_json(
        "lasso_path.json",
        &json!({
            "target": target,
            "feature_names": names,
            "active_features": active,
            "path": path,
        }),
    )?;
    out.add("selected_roles.json", roles.with_covariates(&active).to_json()?);
    Ok(out)
}

fn cmd_fit(args: &FitArgs) -> Result<Outputs> {
    let (data, roles) = load(&args.data)?;
    let (train, test, record) = training_split(&data, &roles, &args.split)?;
    let mut spec = train.base_model();
    for name in &args.free_dif {
        let j = spec
            .indicator_index(name)
            .ok_or_else(|| Error::InvalidArgument(format!("'{name}' is not an indicator")))?;
        spec = spec.free_dif(j);
    }
    let result = fit(&spec, &train.model_frame()?, &args.optim.options())?;
    let holdout = log_likelihood(&result.model, &test.model_frame()?)?;

    let mut out = Outputs::new("fit", args)?;
    out.converged = result.converged;
    out.add("model.json", result.model.to_json()?);
    out.add_json(
        "fit_report.json",
        &json!({
            "fit": result,
            "n_train": train.n_rows(),
            "n_test": test.n_rows(),
            "holdout_loglik": holdout,
        }),
    )?;
    out.add("transform_record.json", record.to_json()?);
    Ok(out)
}

fn scores_for(model: &MimicModel, data: &Dataset, reference_level: &str, kind: ScoreKind) -> Result<Vec<f64>> {
    let x = data.covariate_matrix();
    let s = data.sensitive_codes();
    match kind {
        ScoreKind::Fair => fair_score(model, &x, &s, reference_level),
        ScoreKind::Naive => naive_score(model, &x, &s),
    }
}

fn cmd_score(args: &ScoreArgs) -> Result<Outputs> {
    let (data, _) = load(&args.data)?;
    let (model, record) = load_model(&args.model)?;
    check_compatible(&model, &data)?;
    let reference_level = args.reference_level.clone().unwrap_or_else(|| model.coding.reference.clone());
    let kind = match args.decide_on {
        DecideOn::Fair => ScoreKind::Fair,
        DecideOn::Naive => ScoreKind::Naive,
    };
    let (train, _) = split(&data, args.split.train_frac, args.split.seed)?;
    let train = record.apply(&train)?;
    let reference_scores = scores_for(&model, &train, &reference_level, kind)?;
    let all = record.apply(&data)?;
    let set = score_set(
        &model,
        all.row_ids(),
        &all.covariate_matrix(),
        &all.sensitive_codes(),
        &reference_level,
        kind,
        args.percentile,
        &reference_scores,
    )?;

    let mut out = Outputs::new("score", args)?;
    out.add("scores.csv", set.to_csv_string()?);
    let mut summary = serde_json::to_value(set.summary(&model))?;
    summary["n_threshold_rows"] = json!(train.n_rows());
    out.add_json("score_summary.json", &summary)?;
    Ok(out)
}

/// Reorders `scores` to match the data's row ids.
fn align_scores(data: &Dataset, scores: &ScoreSet) -> Result<ScoreSet> {
    let position: HashMap<&str, usize> = scores
        .row_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    if position.len() != scores.row_ids.len() {
        return Err(Error::InvalidData("duplicate row ids in the score file".into()));
    }
    let ids = data.row_ids();
    if ids.len() != scores.row_ids.len() {
        return Err(Error::DimensionMismatch {
            context: "score rows",
            expected: ids.len(),
            found: scores.row_ids.len(),
        });
    }
    let order: Vec<usize> = ids
        .iter()
        .map(|id| {
            position
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidData(format!("row id '{id}' has no score")))
        })
        .collect::<Result<_>>()?;
    let pick = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    Ok(ScoreSet {
        row_ids: ids,
        fair_score: pick(&scores.fair_score),
        naive_score: pick(&scores.naive_score),
        decision: order.iter().map(|&i| scores.decision[i]).collect(),
        ..scores.clone()
    })
}

fn comparison_csv(curves: &[(&str, &ConditionalParityCurve)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "score",
        "bin",
        "percentile_low",
        "percentile_high",
        "mean_reference",
        "mean_focal",
        "count_reference",
        "count_focal",
        "gap",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for (label, curve) in curves {
        for b in 0..curve.n_bins {
            let (r, f) = (&curve.bins[2 * b], &curve.bins[2 * b + 1]);
            w.write_record([
                label.to_string(),
                b.to_string(),
                r.percentile_low.to_string(),
                r.percentile_high.to_string(),
                opt(r.mean),
                opt(f.mean),
                r.count.to_string(),
                f.count.to_string(),
                opt(curve.gap_by_bin[b]),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

fn cmd_audit(args: &AuditArgs) -> Result<Outputs> {
    let (data, _) = load(&args.data)?;
    let (model, record) = load_model(&args.model)?;
    check_compatible(&model, &data)?;
    let scores = align_scores(&data, &ScoreSet::from_csv_str(&read(&args.scores)?)?)?;
    let reference_level = args.reference_level.clone().unwrap_or_else(|| model.coding.reference.clone());
    let proxy_name = args.proxy.clone().unwrap_or_else(|| model.indicator_names[0].clone());
    let proxy = data.numeric(&proxy_name)?;
    let labels = data.sensitive_labels();
    let codes = data.sensitive_codes();
    let levels = [model.coding.reference.clone(), model.coding.focal.clone()];

    let parity = statistical_parity(&scores.decision, labels, &levels)?;
    let fair_curve = conditional_parity_curve(&scores.fair_score, &codes, proxy, args.bins, &model.coding)?;
    let naive_curve = conditional_parity_curve(&scores.naive_score, &codes, proxy, args.bins, &model.coding)?;
    let transformed = record.apply(&data)?;
    let x = transformed.covariate_matrix();
    let cf_fair = counterfactual_check(&model, &x, &codes, &reference_level, ScoreKind::Fair)?;
    let cf_naive = counterfactual_check(&model, &x, &codes, &reference_level, ScoreKind::Naive)?;
    let ppv = match args.outcome_percentile {
        Some(p) => {
            let cut = nearest_rank(proxy, p)?;
            let outcome: Vec<u8> = proxy.iter().map(|&v| u8::from(v > cut)).collect();
            Some(json!({
                "outcome_threshold": cut,
                "report": predictive_parity(&scores.decision, &outcome, labels, &levels)?,
            }))
        }
        None => None,
    };

    let mut out = Outputs::new("audit", args)?;
    out.add_json("parity.json", &parity)?;
    out.add("curve_fair.csv", fair_curve.to_csv_string()?);
    out.add("curve_naive.csv", naive_curve.to_csv_string()?);
    out.add_json(
        "audit.json",
        &json!({
            "proxy": proxy_name,
            "reference_level": reference_level,
            "statistical_parity": parity,
            "conditional_parity": {
                "fair": fair_curve,
                "naive": naive_curve,
            },
            "mean_abs_gap": {
                "fair": fair_curve.mean_abs_gap,
                "naive": naive_curve.mean_abs_gap,
            },
            "counterfactual_discrepancy": {
                "fair": cf_fair,
                "naive": cf_naive,
            },
            "predictive_parity": ppv,
        }),
    )?;
    out.add("comparison.csv", comparison_csv(&[("naive", &naive_curve), ("fair", &fair_curve)])?);
    Ok(out)
}

fn cmd_dif(args: &DifArgs) -> Result<Outputs> {
    let (data, _) = load(&args.data)?;
    let (model, record) = load_model(&args.model)?;
    check_compatible(&model, &data)?;
    let (train, _) = split(&data, args.split.train_frac, args.split.seed)?;
    let frame = record.apply(&train)?.model_frame()?;
    let options = args.optim.options();
    let base = fit_from(&model.without_dif(), &frame, &options)?;
    let report = dif_scan_from_base(&base, &frame, &args.indicators, &options)?;

    let mut out = Outputs::new("dif", args)?;
    out.add("dif_report.json", report.to_json()?);
    out.add("dif_table.txt", report.to_table());
    Ok(out)
}

fn execute(command: &Command) -> Result<bool> {
    let (dir, outputs) = match command {
        Command::Simulate(a) => (&a.out_dir, cmd_simulate(a)?),
        Command::Select(a) => (&a.out_dir, cmd_select(a)?),
        Command::Fit(a) => (&a.out_dir, cmd_fit(a)?),
        Command::Score(a) => (&a.out_dir, cmd_score(a)?),
        Command::Audit(a) => (&a.out_dir, cmd_audit(a)?),
        Command::Dif(a) => (&a.out_dir, cmd_dif(a)?),
    };
    outputs.write(dir)
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        // A second call in the same process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match execute(&cli.command) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("warning: optimizer did not converge; outputs were written for inspection");
            2
        }
        Err(e @ Error::NotConverged(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
