//! Command-line surface: `generate`, `train`, `eval`, `ablate`, `check`.
//!
//! Exit codes: 0 ok, 1 failed check, 2 config, 3 I/O, 4 numeric abort.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::barlow::Domain;
use crate::check::{run_checks, CheckScope};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{class_names, evaluate, format_table, EvalReport};
use crate::model::checkpoint::Checkpoint;
use crate::pooling::PoolingKind;
use crate::synthdata::{write_dataset, Dataset, Split};
use crate::trainer::{fit, FitOptions, Switches, CHECKPOINT_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "btseg", version, about = "Barlow Twins regularized segmentation on paired scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `paths.out_dir`, or `paths.data_dir` for generate).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory (overrides `paths.data_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset.
    Generate(Common),
    /// Train on the train split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/checkpoint.bin` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate `<out>/checkpoint.bin` on both domains.
    Eval(Common),
    /// Train and evaluate the seven ablation rows.
    Ablate(Common),
    /// Run the numerical self-checks.
    Check {
        #[arg(long, value_enum, default_value_t = ScopeArg::All)]
        scope: ScopeArg,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Grads,
    Oracles,
    All,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Image { .. } | Error::Format { .. } => EXIT_IO,
        Error::NonFinite(_) | Error::NumericAbort { .. } => EXIT_NUMERIC,
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, _) = load(&c)?;
            let out = c.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
            cmd_generate(&cfg, &out)
        }
        Command::Train { common, resume } => {
            let (cfg, paths) = load(&common)?;
            cmd_train(&cfg, &paths.0, &paths.1, resume)
        }
        Command::Eval(c) => {
            let (cfg, paths) = load(&c)?;
            cmd_eval(&cfg, &paths.0, &paths.1)
        }
        Command::Ablate(c) => {
            let (cfg, paths) = load(&c)?;
            cmd_ablate(&cfg, &paths.0, &paths.1)
        }
        Command::Check { scope } => Ok(cmd_check(match scope {
            ScopeArg::Grads => CheckScope::Grads,
            ScopeArg::Oracles => CheckScope::Oracles,
            ScopeArg::All => CheckScope::All,
        })),
    }
}

/// Config with flag overrides, plus the resolved data and output directories.
fn load(c: &Common) -> Result<(RunConfig, (PathBuf, PathBuf))> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    let data = c.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let out = c.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    Ok((cfg, (data, out)))
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let manifest = write_dataset(
        &cfg.scene,
        cfg.data.count,
        cfg.data.train_fraction,
        out,
        &cfg.fingerprint(),
    )?;
    let digest = file_sha256(&out.join("manifest.json"))?;
    println!(
        "wrote {} samples ({} train, {} val) to {}",
        manifest.count,
        manifest.split_len(Split::Train),
        manifest.split_len(Split::Val),
        out.display()
    );
    println!("manifest sha256 {digest}");
    Ok(EXIT_OK)
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: bool) -> Result<i32> {
    let dataset = Dataset::load(data)?;
    write_config_copy(cfg, out)?;
    let outcome = fit(
        &dataset,
        &cfg.train,
        &cfg.model,
        &FitOptions {
            out_dir: Some(out.to_path_buf()),
            resume,
            config_fingerprint: cfg.fingerprint(),
        },
    )?;
    if let Some(step) = outcome.resumed_from {
        println!("resumed at step {step}");
    }
    match outcome.records.last() {
        Some(r) => println!(
            "trained to step {} (l_ce {:.4}, l_bt {})",
            r.step + 1,
            r.l_ce,
            r.l_bt.map_or("n/a".to_string(), |v| format!("{v:.4}"))
        ),
        None => println!("no steps to run"),
    }
    println!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct EvalRecord<'a> {
    config_fingerprint: String,
    checkpoint_step: usize,
    split: Split,
    source: &'a EvalReport,
    target: &'a EvalReport,
}

pub fn cmd_eval(cfg: &RunConfig, data: &Path, out: &Path) -> Result<i32> {
    let dataset = Dataset::load(data)?;
    let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE))?;
    let model = ck.restore_model()?;
    let samples = dataset.split(cfg.eval.split);
    let fp = cfg.fingerprint();
    let source = evaluate(&model, samples, Domain::Source, &fp)?;
    let target = evaluate(&model, samples, Domain::Target, &fp)?;
    let record = EvalRecord {
        config_fingerprint: fp,
        checkpoint_step: ck.step,
        split: cfg.eval.split,
        source: &source,
        target: &target,
    };
    write_json(&out.join("eval_report.json"), &record)?;
    let names = class_names(dataset.num_classes());
    println!("source domain");
    print!("{}", format_table(&[(cfg.train.switches, source)], &names));
    println!("target domain");
    print!("{}", format_table(&[(cfg.train.switches, target)], &names));
    Ok(EXIT_OK)
}

/// The seven switch settings of the ablation, in table order.
pub fn ablation_rows() -> [(&'static str, Switches); 7] {
    let row = |use_bt, use_warp, use_crop, pooling| Switches {
        use_bt,
        use_warp,
        use_crop,
        pooling,
    };
    [
        ("bt_off", row(false, false, false, PoolingKind::Avg)),
        ("bt", row(true, false, false, PoolingKind::Avg)),
        ("bt_warp", row(true, true, false, PoolingKind::Avg)),
        ("bt_warp_crop", row(true, true, true, PoolingKind::Avg)),
        ("segm", row(true, true, true, PoolingKind::Segm)),
        ("conf", row(true, true, true, PoolingKind::Conf)),
        ("segconf", row(true, true, true, PoolingKind::Segconf)),
    ]
}

#[derive(Debug, Serialize)]
struct AblationRow {
    name: &'static str,
    switches: Switches,
    config_fingerprint: String,
    report: EvalReport,
}

#[derive(Debug, Serialize)]
struct AblationRecord {
    base_fingerprint: String,
    split: Split,
    domain: Domain,
    rows: Vec<AblationRow>,
}

pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<i32> {
    let dataset = Dataset::load(data)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let samples = dataset.split(cfg.eval.split);
    let mut rows = Vec::new();
    for (name, switches) in ablation_rows() {
        let mut row_cfg = cfg.clone();
        row_cfg.train.switches = switches;
        let fp = row_cfg.fingerprint();
        let row_dir = out.join("rows").join(name);
        write_config_copy(&row_cfg, &row_dir)?;
        let outcome = fit(
            &dataset,
            &row_cfg.train,
            &row_cfg.model,
            &FitOptions {
                out_dir: Some(row_dir),
                resume: false,
                config_fingerprint: fp.clone(),
            },
        )?;
        let report = evaluate(&outcome.model, samples, Domain::Target, &fp)?;
        eprintln!("{name}: target mean IoU {:.1}", 100.0 * report.mean_iou);
        rows.push(AblationRow {
            name,
            switches,
            config_fingerprint: fp,
            report,
        });
    }
    let table_rows: Vec<_> = rows.iter().map(|r| (r.switches, r.report.clone())).collect();
    let table = format_table(&table_rows, &class_names(dataset.num_classes()));
    let record = AblationRecord {
        base_fingerprint: cfg.fingerprint(),
        split: cfg.eval.split,
        domain: Domain::Target,
        rows,
    };
    write_json(&out.join("ablation.json"), &record)?;
    let path = out.join("ablation.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    print!("{table}");
    Ok(EXIT_OK)
}

pub fn cmd_check(scope: CheckScope) -> i32 {
    let results = run_checks(scope);
    let mut ok = true;
    for r in &results {
        println!(
            "{:<4} {:<40} max rel err {:.3e} (tol {:.0e})",
            if r.passed() { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.tolerance
        );
        ok &= r.passed();
    }
    if ok {
        EXIT_OK
    } else {
        EXIT_CHECK
    }
}

fn write_config_copy(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("config.toml");
    let text = format!("# fingerprint {}\n{}", cfg.fingerprint(), cfg.to_toml());
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("record serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
