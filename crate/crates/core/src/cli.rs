//! Command-line surface: `generate`, `train`, `evaluate`, `compare` and `gradcheck`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::metrics::{
    evaluate_model, paired_ttest, write_comparison_csv, write_report_csv, Comparison, MetricsReport, SIGNIFICANCE_LEVEL,
};
use crate::phantom::{generate_dataset, write_study, DatasetPolicy, PhantomSpec};
use crate::pipeline::{load_split, make_manifest, Manifest, Split, SplitRatios};
use crate::train::{train_from_manifest, EpochRecord, TrainConfig, BEST_CHECKPOINT};
use crate::unet::{load_checkpoint, ArchitectureConfig, Placement};
use crate::verify::{run_gradient_suite, GRADCHECK_TOLERANCE};
use crate::{Error, Result};

pub const REPORT_FILE: &str = "report.csv";
pub const TABLE_FILE: &str = "comparison.csv";
pub const SIGNIFICANCE_FILE: &str = "significance.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub policy: DatasetPolicy,
    pub split: SplitRatios,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 100,
            policy: DatasetPolicy::default(),
            split: SplitRatios::default(),
            seed: 0,
        }
    }
}

/// Everything a command needs, read from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// template for every generated case
    pub phantom: PhantomSpec,
    pub dataset: DatasetConfig,
    /// `placement` is set per run
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub placements: Vec<Placement>,
    /// compare trains every placement once per seed
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            dataset: DatasetConfig::default(),
            architecture: ArchitectureConfig::default(),
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            placements: Placement::VARIANTS.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.placements.is_empty() {
            return Err(Error::Config("placements must not be empty".into()));
        }
        if self.placements.iter().collect::<HashSet<_>>().len() != self.placements.len() {
            return Err(Error::Config(format!("duplicate placements in {:?}", self.placements)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.phantom.validate()?;
        self.architecture.validate()?;
        self.train.validate()
    }

    /// Architecture and training settings of one compare run.
    pub fn run_settings(&self, placement: Placement, seed: u64) -> (ArchitectureConfig, TrainConfig) {
        let arch = ArchitectureConfig {
            placement,
            seed,
            ..self.architecture.clone()
        };
        let train = TrainConfig {
            seed,
            ..self.train.clone()
        };
        (arch, train)
    }

    pub fn run_dir(&self, placement: Placement, seed: u64) -> PathBuf {
        self.out_dir.join(placement.name()).join(format!("seed_{seed}"))
    }

    fn require_data(&self) -> Result<Manifest> {
        if !self.data_dir.is_dir() {
            return Err(Error::Config(format!(
                "data directory {} does not exist; run `filmseg generate` first",
                self.data_dir.display()
            )));
        }
        Manifest::load(&self.data_dir)
    }
}

/// Write every case of the configured dataset plus its manifest into `data_dir`.
pub fn generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let studies = generate_dataset(&cfg.phantom, cfg.dataset.count, &cfg.dataset.policy, cfg.dataset.seed)?;
    fs::create_dir_all(&cfg.data_dir)?;
    for s in &studies {
        write_study(&cfg.data_dir, s)?;
    }
    let ids: Vec<String> = studies.iter().map(|s| s.case_id.clone()).collect();
    let manifest = make_manifest(&ids, cfg.dataset.split, cfg.dataset.seed)?;
    manifest.save(&cfg.data_dir)?;
    Ok(manifest)
}

/// Train one placement with one seed into [`ExperimentConfig::run_dir`] or `out`.
pub fn train_one(
    cfg: &ExperimentConfig,
    placement: Placement,
    seed: u64,
    out: &Path,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<()> {
    let manifest = cfg.require_data()?;
    let (arch, train) = cfg.run_settings(placement, seed);
    train_from_manifest(&cfg.data_dir, &manifest, &arch, &train, out, progress)?;
    Ok(())
}

/// Score a checkpoint on the test split.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MetricsReport> {
    let manifest = cfg.require_data()?;
    let (model, _) = load_checkpoint(checkpoint)?;
    let test = load_split(&cfg.data_dir, &manifest, Split::Test)?;
    evaluate_model(&model, &test, &cfg.train.inference)
}

/// One row of the placement table; spreads are sample standard deviations over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub placement: Placement,
    pub dice_mean: f64,
    pub dice_sd: f64,
    pub dice10_mean: f64,
    pub dice10_sd: f64,
    /// over seeds whose mean HD95 is defined
    pub hd95_mean: Option<f64>,
    pub hd95_sd: Option<f64>,
    /// paired t-test on seed-averaged per-case Dice against the `none` row
    pub vs_none: Option<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub rows: Vec<CompareRow>,
}

impl CompareSummary {
    pub fn row(&self, placement: Placement) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.placement == placement)
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-case Dice averaged over seeds, in the case order of the first report.
fn seed_averaged_dice(reports: &[MetricsReport]) -> Result<(Vec<String>, Vec<f64>)> {
    let ids: Vec<String> = reports[0].per_case.iter().map(|c| c.case_id.clone()).collect();
    let mut sums = vec![0.0; ids.len()];
    for r in reports {
        if r.per_case.len() != ids.len() {
            return Err(Error::Metric("reports cover different cases".into()));
        }
        for (sum, id) in sums.iter_mut().zip(&ids) {
            let c = r
                .per_case
                .iter()
                .find(|c| &c.case_id == id)
                .ok_or_else(|| Error::Metric(format!("case {id} missing from a report")))?;
            *sum += c.dice;
        }
    }
    let n = reports.len() as f64;
    Ok((ids, sums.into_iter().map(|s| s / n).collect()))
}

/// Build the placement table from per-seed test reports, keyed by placement in row order.
pub fn summarize(results: &[(Placement, Vec<MetricsReport>)]) -> Result<CompareSummary> {
    let baseline = match results.iter().find(|(p, _)| *p == Placement::None) {
        Some((_, reports)) => Some(seed_averaged_dice(reports)?),
        None => None,
    };
    let mut rows = Vec::with_capacity(results.len());
    for (placement, reports) in results {
        if reports.is_empty() {
            return Err(Error::Metric(format!("no runs for placement {placement}")));
        }
        let dice: Vec<f64> = reports.iter().map(|r| r.mean_dice).collect();
        let d10: Vec<f64> = reports.iter().map(|r| r.dice10).collect();
        let hd: Vec<f64> = reports.iter().filter_map(|r| r.mean_hd95_mm).collect();
        let (dice_mean, dice_sd) = mean_sd(&dice);
        let (dice10_mean, dice10_sd) = mean_sd(&d10);
        let hd95 = (!hd.is_empty()).then(|| mean_sd(&hd));
        let vs_none = match &baseline {
            Some((ids, base)) if *placement != Placement::None => {
                let (own_ids, own) = seed_averaged_dice(reports)?;
                let aligned = ids
                    .iter()
                    .map(|id| {
                        own_ids
                            .iter()
                            .position(|o| o == id)
                            .map(|i| own[i])
                            .ok_or_else(|| Error::Metric(format!("case {id} missing from {placement}")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let t = paired_ttest(&aligned, base)?;
                Some(Comparison {
                    model_a: placement.name().into(),
                    model_b: Placement::None.name().into(),
                    metric: "dice".into(),
                    mean_a: aligned.iter().sum::<f64>() / aligned.len() as f64,
                    mean_b: base.iter().sum::<f64>() / base.len() as f64,
                    t: t.t,
                    p: t.p,
                    df: t.df,
                    significant: t.significant(SIGNIFICANCE_LEVEL),
                })
            }
            _ => None,
        };
        rows.push(CompareRow {
            placement: *placement,
            dice_mean,
            dice_sd,
            dice10_mean,
            dice10_sd,
            hd95_mean: hd95.map(|h| h.0),
            hd95_sd: hd95.map(|h| h.1),
            vs_none,
        });
    }
    Ok(CompareSummary { rows })
}

/// Train and evaluate every placement for every seed, then write the table and significance files.
pub fn compare(cfg: &ExperimentConfig, progress: &mut dyn FnMut(Placement, u64, &EpochRecord)) -> Result<CompareSummary> {
    cfg.validate()?;
    let manifest = cfg.require_data()?;
    let test = load_split(&cfg.data_dir, &manifest, Split::Test)?;
    let mut results = Vec::with_capacity(cfg.placements.len());
    for &placement in &cfg.placements {
        let mut reports = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let dir = cfg.run_dir(placement, seed);
            let (arch, train) = cfg.run_settings(placement, seed);
            let outcome = train_from_manifest(&cfg.data_dir, &manifest, &arch, &train, &dir, &mut |r| {
                progress(placement, seed, r)
            })?;
            let report = evaluate_model(&outcome.best, &test, &cfg.train.inference)?;
            write_report_csv(&dir.join(REPORT_FILE), &report)?;
            reports.push(report);
        }
        results.push((placement, reports));
    }
    let summary = summarize(&results)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join(TABLE_FILE), table_csv(&summary))?;
    let comparisons: Vec<Comparison> = summary.rows.iter().filter_map(|r| r.vs_none.clone()).collect();
    write_comparison_csv(&cfg.out_dir.join(SIGNIFICANCE_FILE), &comparisons)?;
    Ok(summary)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Machine-readable table at full precision; `*` marks p < 0.05 against `none`.
pub fn table_csv(summary: &CompareSummary) -> String {
    let mut out = String::from(
        "placement,dice_mean,dice_sd,dice10_mean,dice10_sd,hd95_mean_mm,hd95_sd_mm,t_vs_none,p_vs_none,significant\n",
    );
    for r in &summary.rows {
        let c = r.vs_none.as_ref();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.placement,
            r.dice_mean,
            r.dice_sd,
            r.dice10_mean,
            r.dice10_sd,
            opt(r.hd95_mean),
            opt(r.hd95_sd),
            opt(c.map(|c| c.t)),
            opt(c.map(|c| c.p)),
            if c.is_some_and(|c| c.significant) { "*" } else { "" }
        )
        .unwrap();
    }
    out
}

/// Aligned text rendering of the table, mean ± sd over seeds.
pub fn table_text(summary: &CompareSummary) -> String {
    let mut out = format!(
        "{:<11} {:>17} {:>17} {:>19} {:>9}\n",
        "placement", "Dice", "Dice10", "HD95 (mm)", "p vs none"
    );
    for r in &summary.rows {
        let hd = match (r.hd95_mean, r.hd95_sd) {
            (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
            _ => "n/a".into(),
        };
        let p = match &r.vs_none {
            Some(c) => format!("{:.4}{}", c.p, if c.significant { "*" } else { " " }),
            None => String::new(),
        };
        writeln!(
            out,
            "{:<11} {:>17} {:>17} {:>19} {:>9}",
            r.placement.name(),
            format!("{:.4} ± {:.4}", r.dice_mean, r.dice_sd),
            format!("{:.4} ± {:.4}", r.dice10_mean, r.dice10_sd),
            hd,
            p
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Parser)]
#[command(name = "filmseg", version, about = "Acquisition-time conditioned 3D segmentation of DCE volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// worker threads (defaults to all cores)
    #[arg(long, global = true, env = "FILMSEG_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Common {
    /// experiment JSON; missing fields take their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_placement(s: &str) -> std::result::Result<Placement, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a phantom dataset and its split manifest (`--out` overrides `data_dir`, `--seed` the dataset seed)
    Generate(Common),
    /// Train one placement (`--out` overrides the run directory)
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_placement)]
        placement: Placement,
    },
    /// Score a checkpoint on the test split and write a per-case report
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_placement)]
        placement: Placement,
        /// defaults to the best checkpoint of the run directory
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every configured placement over every seed (`--out` overrides `out_dir`)
    Compare(Common),
    /// Finite-difference check of every differentiable primitive and a small model
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn print_epoch(r: &EpochRecord) {
    eprintln!(
        "epoch {:>3}  loss {:.4}  val dice {:.4}  lr {:.2e}",
        r.epoch, r.train_loss, r.val_dice, r.lr
    );
}

/// Run a parsed command. `Ok(false)` means a verification failure.
pub fn execute(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate(common) => {
            let mut cfg = load_config(&common)?;
            if let Some(out) = common.out {
                cfg.data_dir = out;
            }
            if let Some(seed) = common.seed {
                cfg.dataset.seed = seed;
            }
            let manifest = generate(&cfg)?;
            println!(
                "wrote {} cases to {} ({} train / {} val / {} test)",
                manifest.cases.len(),
                cfg.data_dir.display(),
                manifest.ids(Split::Train).len(),
                manifest.ids(Split::Val).len(),
                manifest.ids(Split::Test).len()
            );
        }
        Command::Train { common, placement } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(cfg.train.seed);
            let out = common.out.unwrap_or_else(|| cfg.run_dir(placement, seed));
            train_one(&cfg, placement, seed, &out, &mut print_epoch)?;
            println!("trained {placement} (seed {seed}) into {}", out.display());
        }
        Command::Evaluate {
            common,
            placement,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(cfg.train.seed);
            let run = cfg.run_dir(placement, seed);
            let checkpoint = checkpoint.unwrap_or_else(|| run.join(BEST_CHECKPOINT));
            let report = evaluate_checkpoint(&cfg, &checkpoint)?;
            let out = common.out.unwrap_or(run);
            fs::create_dir_all(&out)?;
            write_report_csv(&out.join(REPORT_FILE), &report)?;
            let hd = report.mean_hd95_mm.map_or("n/a".into(), |h| format!("{h:.2} mm"));
            println!(
                "{placement}: dice {:.4}  dice10 {:.4}  hd95 {hd} ({} undefined) over {} cases",
                report.mean_dice,
                report.dice10,
                report.hd95_undefined,
                report.per_case.len()
            );
        }
        Command::Compare(common) => {
            let mut cfg = load_config(&common)?;
            if let Some(out) = common.out {
                cfg.out_dir = out;
            }
            if let Some(seed) = common.seed {
                cfg.seeds = vec![seed];
            }
            let summary = compare(&cfg, &mut |p, s, r| {
                eprint!("[{p} seed {s}] ");
                print_epoch(r);
            })?;
            print!("{}", table_text(&summary));
        }
        Command::Gradcheck { seed } => {
            let reports = run_gradient_suite(seed, None)?;
            let mut ok = true;
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                ok &= r.passed();
                println!("{:<20} {:>4} coords  max rel err {:.3e}  {status}", r.name, r.checked, r.max_rel_error);
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if failed.is_empty() {
                println!("all {} checks within {GRADCHECK_TOLERANCE:e}", reports.len());
            } else {
                println!("failed: {}", failed.join(", "));
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

/// Parse the process arguments and run; exit code 0 on success, 1 on failure, 2 on usage errors.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::CaseMetrics;

    fn report(dice: &[f64]) -> MetricsReport {
        MetricsReport::from_cases(
            dice.iter()
                .enumerate()
                .map(|(i, &d)| CaseMetrics {
                    case_id: format!("c{i}"),
                    dice: d,
                    hd95_mm: (d > 0.0).then_some(10.0 * (1.0 - d)),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn placement_flag_rejects_unknown_names() {
        let err = Cli::try_parse_from(["filmseg", "train", "--placement", "encdec"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("none|encoder|decoder|bottleneck|all"), "{err}");
        let ok = Cli::try_parse_from(["filmseg", "train", "--placement", "bottleneck"]).unwrap();
        assert!(matches!(
            ok.command,
            Command::Train {
                placement: Placement::Bottleneck,
                ..
            }
        ));
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let dup = ExperimentConfig {
            placements: vec![Placement::All, Placement::All],
            ..Default::default()
        };
        assert!(dup.validate().is_err());
        let empty = ExperimentConfig {
            placements: vec![],
            ..Default::default()
        };
        assert!(empty.validate().is_err());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seeds": [7], "placements": ["none"]}"#).unwrap();
        assert_eq!(partial.seeds, vec![7]);
        assert_eq!(partial.train, TrainConfig::default());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seedz": [7]}"#).is_err());
    }

    #[test]
    fn baseline_only_table_has_no_significance() {
        let s = summarize(&[(Placement::None, vec![report(&[0.5, 0.7]), report(&[0.6, 0.8])])]).unwrap();
        assert_eq!(s.rows.len(), 1);
        assert!(s.rows[0].vs_none.is_none());
        let csv = table_csv(&s);
        assert!(csv.lines().nth(1).unwrap().ends_with(",,,"), "{csv}");
    }

    #[test]
    fn summary_statistics_by_hand() {
        let none = vec![report(&[0.5, 0.7, 0.6]), report(&[0.7, 0.5, 0.6])];
        let all = vec![report(&[0.8, 0.6, 0.9]), report(&[0.6, 0.8, 0.7])];
        let s = summarize(&[(Placement::None, none), (Placement::All, all)]).unwrap();
        let row = s.row(Placement::All).unwrap();
        // seed means are 0.7667 and 0.7
        assert!((row.dice_mean - (2.3 / 3.0 + 0.7) / 2.0).abs() < 1e-12);
        let sd = ((2.3 / 3.0 - 0.7f64).abs()) / 2f64.sqrt();
        assert!((row.dice_sd - sd).abs() < 1e-12);
        // seed-averaged cases: all (0.7, 0.7, 0.8) vs none (0.6, 0.6, 0.6)
        let c = row.vs_none.as_ref().unwrap();
        let want = paired_ttest(&[0.7, 0.7, 0.8], &[0.6, 0.6, 0.6]).unwrap();
        assert!((c.t - want.t).abs() < 1e-9 && (c.p - want.p).abs() < 1e-12);
        assert_eq!(c.df, 2);
    }
}
