//! Command-line front end.
//!
//! Exit status: 0 success, 2 input validation, 3 estimation degeneracy
//! (for example no test-in signal), 4 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pwrd_core::covariance::{CovarianceOptions, CovarianceVariant, DfRule, ResidualCentering};
use pwrd_core::effects::EffectMethod;
use pwrd_core::sim::{
    apply_effect, calibrate_thresholds, generate_panel, population_test_in_profile, run_settings, AnalysisConfig,
    EffectSpec, Method, Regime, Scenario, Setting, DEFAULT_TEST_IN_PROFILE,
};
use pwrd_core::weights::Alternative;
use serde::Serialize;

use crate::analyze::{analyze, weights_external, AnalyzeOptions, ExternalSummary};
use crate::manifest::RunManifest;
use crate::numfmt::to_json;
use crate::panel_csv::{read_panel, write_panel, Ingested};
use crate::power_csv::write_power;
use crate::report::{render_table, WeightsJson};
use crate::runner::Parallel;
use crate::schema::Schema;
use crate::{Error, Result};

/// Environment variable giving the default worker count for `power`.
pub const WORKERS_ENV: &str = "PWRD_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "pwrd", version, about = "Power-maximizing aggregation of cohort-year treatment effects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analyze a panel CSV with one method.
    Analyze(AnalyzeArgs),
    /// Aggregation weights and test from a panel CSV or a JSON effect summary.
    Weights(WeightsArgs),
    /// Write one simulated panel as CSV.
    Simulate(SimulateArgs),
    /// Monte Carlo power and size.
    Power(PowerArgs),
    /// Write a scenario file for the default design.
    Scenario(ScenarioArgs),
    /// Re-run the command recorded in a manifest.
    Replay { manifest: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Pwrd,
    Flat,
    Exit,
    Mixed,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Pwrd => Method::Pwrd,
            MethodArg::Flat => Method::Flat,
            MethodArg::Exit => Method::Exit,
            MethodArg::Mixed => Method::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlternativeArg {
    Greater,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovVariantArg {
    Cr0,
    Cr2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DfRuleArg {
    #[value(name = "clusters-2")]
    #[serde(rename = "clusters-2")]
    Clusters2,
    Satterthwaite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorArg {
    DiffMeans,
    PetersBelson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeArg {
    Null,
    Effect1,
    Effect2,
    Effect3,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Null => Regime::Null,
            RegimeArg::Effect1 => Regime::Effect1,
            RegimeArg::Effect2 => Regime::Effect2,
            RegimeArg::Effect3 => Regime::Effect3,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TestArgs {
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = AlternativeArg::Greater)]
    pub alternative: AlternativeArg,
    #[arg(long, value_enum, default_value_t = CovVariantArg::Cr2)]
    pub cov_variant: CovVariantArg,
    #[arg(long, value_enum, default_value_t = DfRuleArg::Clusters2)]
    pub df_rule: DfRuleArg,
    /// Center treated residuals on the control prediction.
    #[arg(long)]
    pub control_centered: bool,
    /// Add 1e-8·trace/G to the covariance diagonal before solving for weights.
    #[arg(long)]
    pub ridge: bool,
}

impl TestArgs {
    fn alternative(&self) -> Alternative {
        match self.alternative {
            AlternativeArg::Greater => Alternative::Greater,
            AlternativeArg::TwoSided => Alternative::TwoSided,
        }
    }

    fn covariance(&self) -> CovarianceOptions {
        CovarianceOptions {
            variant: match self.cov_variant {
                CovVariantArg::Cr0 => CovarianceVariant::Cr0,
                CovVariantArg::Cr2 => CovarianceVariant::Cr2,
            },
            centering: if self.control_centered { ResidualCentering::ControlOnly } else { ResidualCentering::BothArms },
        }
    }

    fn df_rule(&self) -> DfRule {
        match self.df_rule {
            DfRuleArg::Clusters2 => DfRule::ClustersMinus2,
            DfRuleArg::Satterthwaite => DfRule::Satterthwaite,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    pub panel: PathBuf,
    /// JSON column mapping; default column names otherwise.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Pwrd)]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value_t = EstimatorArg::DiffMeans)]
    pub estimator: EstimatorArg,
    /// Covariate columns for Peters-Belson, exit and mixed fits
    /// (defaults to the schema's covariates).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[command(flatten)]
    pub test: TestArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Skip the table.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WeightsArgs {
    /// `.json` effect summary, or a panel CSV.
    pub input: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Pwrd)]
    pub method: MethodArg,
    #[command(flatten)]
    pub test: TestArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EffectArgs {
    /// Overrides the scenario's effect regime.
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    /// Spillover fraction for effect 2.
    #[arg(long)]
    pub p_spill: Option<f64>,
    /// Read the effect-3 spread as a standard deviation.
    #[arg(long)]
    pub effect3_sd: bool,
    /// Start effects the year after a unit tests in.
    #[arg(long)]
    pub defer_effect: bool,
}

impl EffectArgs {
    fn apply(&self, mut spec: EffectSpec) -> EffectSpec {
        if let Some(r) = self.regime {
            spec.regime = r.into();
        }
        if let Some(p) = self.p_spill {
            spec.spill_fraction = p;
        }
        if self.effect3_sd {
            spec.effect3_spread = pwrd_core::sim::Effect3Spread::StdDev;
        }
        spec.defer_one_year |= self.defer_effect;
        spec
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario JSON; the calibrated default design otherwise.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replicate index.
    #[arg(long, default_value_t = 0)]
    pub rep: u64,
    #[command(flatten)]
    pub effect: EffectArgs,
    /// Effect size: τ, or l for effect 3.
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PowerArgs {
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Worker threads; 0 means one per core.
    #[arg(long, env = WORKERS_ENV, default_value_t = 0)]
    #[serde(skip)]
    pub workers: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [MethodArg::Pwrd, MethodArg::Flat, MethodArg::Mixed, MethodArg::Exit])]
    pub methods: Vec<MethodArg>,
    #[command(flatten)]
    pub effect: EffectArgs,
    /// Effect sizes (τ, or l for effect 3). Implies effect 1 when no other
    /// regime is set.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Effect-2 spillover fractions.
    #[arg(long, value_delimiter = ',')]
    pub p_grid: Option<Vec<f64>>,
    /// Intraclass correlations at fixed total variance.
    #[arg(long, value_delimiter = ',')]
    pub icc_grid: Option<Vec<f64>>,
    /// Re-fit thresholds at each ICC.
    #[arg(long)]
    pub recalibrate: bool,
    /// Control test-in targets by participation year for `--recalibrate`.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<f64>>,
    #[command(flatten)]
    pub test: TestArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScenarioArgs {
    #[arg(long, default_value_t = 0.15)]
    pub icc: f64,
    /// Leave thresholds at the grade means.
    #[arg(long)]
    pub uncalibrated: bool,
    /// Control test-in targets by participation year.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_schema(path: Option<&Path>) -> Result<Option<Schema>> {
    path.map(|p| Ok(serde_json::from_str(&read_file(p)?)?)).transpose()
}

fn load_panel(path: &Path, schema: Option<&Schema>) -> Result<Ingested> {
    let f = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_panel(std::io::BufReader::new(f), schema)
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    let s = match path {
        Some(p) => serde_json::from_str(&read_file(p)?)?,
        None => Scenario::calibrated_default(0.15)?,
    };
    s.validate()?;
    Ok(s)
}

/// Output sink: the `--out` file (with a `.manifest.json` sibling) or stdout.
fn emit(out: Option<&Path>, content: &[u8], manifest: &RunManifest) -> Result<()> {
    match out {
        Some(p) => {
            fs::write(p, content).map_err(|e| Error::io(p.display().to_string(), e))?;
            let mut m = p.as_os_str().to_owned();
            m.push(".manifest.json");
            let m = PathBuf::from(m);
            fs::write(&m, to_json(manifest)?).map_err(|e| Error::io(m.display().to_string(), e))
        }
        None => std::io::stdout().write_all(content).map_err(|e| Error::io("stdout", e)),
    }
}

fn inputs<'a>(paths: &[Option<&'a Path>]) -> Vec<&'a Path> {
    paths.iter().flatten().copied().collect()
}

#[derive(Serialize)]
struct WithManifest<'a, T: Serialize> {
    #[serde(flatten)]
    body: &'a T,
    manifest: &'a RunManifest,
}

fn cmd_analyze(a: &AnalyzeArgs, argv: &[String]) -> Result<()> {
    let schema = load_schema(a.schema.as_deref())?;
    let input = load_panel(&a.panel, schema.as_ref())?;
    let opts = AnalyzeOptions {
        method: a.method.into(),
        estimator: match a.estimator {
            EstimatorArg::DiffMeans => EffectMethod::DifferenceInMeans,
            EstimatorArg::PetersBelson => EffectMethod::PetersBelson,
        },
        covariates: a
            .covariates
            .clone()
            .unwrap_or_else(|| schema.as_ref().map(|s| s.covariates.clone()).unwrap_or_default()),
        alpha: a.test.alpha,
        alternative: a.test.alternative(),
        covariance: a.test.covariance(),
        df_rule: a.test.df_rule(),
        ridge: a.test.ridge,
    };
    let manifest = RunManifest::new("analyze", argv, &opts, None, &inputs(&[Some(&a.panel), a.schema.as_deref()]))?;
    let mut report = analyze(&input, &opts)?;
    report.manifest = Some(manifest.clone());
    if !a.quiet {
        let table = render_table(&report);
        if a.out.is_some() {
            print!("{table}");
        } else {
            eprint!("{table}");
        }
    }
    emit(a.out.as_deref(), to_json(&report)?.as_bytes(), &manifest)
}

fn cmd_weights(a: &WeightsArgs, argv: &[String]) -> Result<()> {
    let is_json = a.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let weights: WeightsJson = if is_json {
        if a.method != MethodArg::Pwrd {
            return Err(Error::Input("an effect summary supports only --method pwrd".into()));
        }
        let summary: ExternalSummary = serde_json::from_str(&read_file(&a.input)?)?;
        weights_external(&summary, a.test.alternative(), a.test.ridge)?
    } else {
        if matches!(a.method, MethodArg::Exit | MethodArg::Mixed) {
            return Err(Error::Input("weights are defined for --method pwrd or flat".into()));
        }
        let schema = load_schema(a.schema.as_deref())?;
        let input = load_panel(&a.input, schema.as_ref())?;
        let opts = AnalyzeOptions {
            method: a.method.into(),
            alpha: a.test.alpha,
            alternative: a.test.alternative(),
            covariance: a.test.covariance(),
            df_rule: a.test.df_rule(),
            ridge: a.test.ridge,
            ..AnalyzeOptions::default()
        };
        analyze(&input, &opts)?.weights.expect("pwrd and flat report weights")
    };
    let manifest = RunManifest::new("weights", argv, a, None, &inputs(&[Some(&a.input), a.schema.as_deref()]))?;
    let doc = to_json(&WithManifest { body: &weights, manifest: &manifest })?;
    emit(a.out.as_deref(), doc.as_bytes(), &manifest)
}

fn cmd_simulate(a: &SimulateArgs, argv: &[String]) -> Result<()> {
    let mut s = load_scenario(a.scenario.as_deref())?;
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    let mut spec = a.effect.apply(s.effect);
    if let Some(level) = a.level {
        spec = spec.with_level(level);
    }
    spec.validate()?;
    s.effect = spec;
    let base = generate_panel(&s, a.rep)?;
    let panel = apply_effect(&base, &s.effect, s.seed, a.rep)?;
    let mut buf = Vec::new();
    write_panel(&panel, &mut buf)?;
    let config = serde_json::json!({ "scenario": s, "rep": a.rep });
    let manifest = RunManifest::new("simulate", argv, &config, Some(s.seed), &inputs(&[a.scenario.as_deref()]))?;
    emit(a.out.as_deref(), &buf, &manifest)
}

/// Settings for a power run: one per ICC, each with every (p, level) effect.
pub fn power_settings(a: &PowerArgs, base: &Scenario) -> Result<Vec<Setting>> {
    let mut template = a.effect.apply(base.effect);
    if template.regime == Regime::Null && a.levels.is_some() {
        template.regime = Regime::Effect1;
    }
    let levels = a.levels.clone().unwrap_or_else(|| vec![template.level()]);
    let p_grid = a.p_grid.clone().unwrap_or_else(|| vec![template.spill_fraction]);
    let mut effects = Vec::new();
    for &p in &p_grid {
        for &level in &levels {
            effects.push(EffectSpec { spill_fraction: p, ..template }.with_level(level));
        }
    }
    let targets = a.targets.clone().unwrap_or_else(|| DEFAULT_TEST_IN_PROFILE.to_vec());
    let iccs = a.icc_grid.clone().unwrap_or_else(|| vec![base.icc()]);
    let mut settings = Vec::new();
    for icc in iccs {
        if !(0.0..0.5).contains(&icc) {
            return Err(pwrd_core::Error::InvalidArgument(format!("icc {icc} outside [0, 0.5)")).into());
        }
        let mut s = base.clone();
        if a.icc_grid.is_some() {
            s.set_icc(icc);
        }
        if a.recalibrate {
            s.test_in_thresholds = calibrate_thresholds(&s, &targets)?.thresholds;
        }
        settings.push(Setting { scenario: s, effects: effects.clone() });
    }
    Ok(settings)
}

fn cmd_power(a: &PowerArgs, argv: &[String]) -> Result<()> {
    let mut base = load_scenario(a.scenario.as_deref())?;
    if let Some(seed) = a.seed {
        base.seed = seed;
    }
    let settings = power_settings(a, &base)?;
    for s in &settings {
        let profile = population_test_in_profile(&s.scenario)?;
        for e in &s.effects {
            if !e.aggregate_effect_positive(&profile) {
                eprintln!(
                    "warning: effect 2 with tau {} and p {} is not positive in aggregate at icc {:.3}",
                    e.tau,
                    e.spill_fraction,
                    s.scenario.icc()
                );
            }
        }
    }
    let methods: Vec<Method> = a.methods.iter().map(|&m| m.into()).collect();
    let config = AnalysisConfig {
        alpha: a.test.alpha,
        alternative: a.test.alternative(),
        covariance: a.test.covariance(),
        df_rule: a.test.df_rule(),
        ridge: a.test.ridge,
    };
    let runner = Parallel::new(a.workers)?;
    let result = run_settings(&runner, &settings, &methods, a.reps, &config)?;
    let mut buf = Vec::new();
    write_power(&result, &mut buf)?;
    let resolved = serde_json::json!({
        "args": a,
        "settings": settings.iter().map(|s| serde_json::json!({ "scenario": s.scenario, "effects": s.effects })).collect::<Vec<_>>(),
        "analysis": config,
        "excluded": result.rows.iter().map(|r| r.n_excluded).collect::<Vec<_>>(),
    });
    let manifest = RunManifest::new("power", argv, &resolved, Some(base.seed), &inputs(&[a.scenario.as_deref()]))?;
    emit(a.out.as_deref(), &buf, &manifest)
}

fn cmd_scenario(a: &ScenarioArgs, argv: &[String]) -> Result<()> {
    if !(0.0..1.0).contains(&a.icc) {
        return Err(pwrd_core::Error::InvalidArgument(format!("icc {} outside [0, 1)", a.icc)).into());
    }
    let mut s = Scenario::default_design(a.icc);
    if !a.uncalibrated {
        let targets = a.targets.clone().unwrap_or_else(|| DEFAULT_TEST_IN_PROFILE.to_vec());
        s.test_in_thresholds = calibrate_thresholds(&s, &targets)?.thresholds;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    let manifest = RunManifest::new("scenario", argv, a, Some(s.seed), &[])?;
    emit(a.out.as_deref(), to_json(&s)?.as_bytes(), &manifest)
}

fn cmd_replay(path: &Path) -> Result<()> {
    let manifest: RunManifest = serde_json::from_str(&read_file(path)?)?;
    manifest.verify_inputs()?;
    let cli = Cli::try_parse_from(std::iter::once("pwrd".to_string()).chain(manifest.argv.iter().cloned()))
        .map_err(|e| Error::Input(format!("manifest arguments: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(Error::Input("a manifest cannot replay another manifest".into()));
    }
    run(&cli, &manifest.argv)
}

/// Runs a parsed command. `argv` excludes the program name and is recorded
/// in the manifest.
pub fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a, argv),
        Command::Weights(a) => cmd_weights(a, argv),
        Command::Simulate(a) => cmd_simulate(a, argv),
        Command::Power(a) => cmd_power(a, argv),
        Command::Scenario(a) => cmd_scenario(a, argv),
        Command::Replay { manifest } => cmd_replay(manifest),
    }
}

/// Parses the process arguments, runs, and returns the exit status.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { crate::error::exit_code::VALIDATION } else { crate::error::exit_code::SUCCESS };
        }
    };
    match run(&cli, &args[1..]) {
        Ok(()) => crate::error::exit_code::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Core(pwrd_core::Error::InvalidRows(rows)) = &e {
                for r in rows.iter().take(50) {
                    eprintln!("  row {}: {}", r.row, r.message);
                }
                if rows.len() > 50 {
                    eprintln!("  ... {} more", rows.len() - 50);
                }
            }
            e.exit_code()
        }
    }
}
