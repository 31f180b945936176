//! Scenario-driven command line for the microgrid resilience toolkit.

use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gridswitch::engine::EngineConfig;
use gridswitch::error::{Error, Result};
use gridswitch::estimator::{evaluate, split, train, Dataset, MlpParams};
use gridswitch::scenario::{
    dataset_sidecar, enumerate_summary, load_scenario, parse_snr_token, run_case, run_pipeline,
    snr_label, sub_seed, trees_to_json, write_pipeline_csv, DetectorChoice, Scenario,
};

#[derive(Parser)]
#[command(
    name = "gridswitch",
    about = "Microgrid secondary-control simulation with attack detection and spanning-tree switching",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario configuration file (TOML).
    scenario: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the plant under consensus control (no detection engine) and
    /// write the trajectory CSV.
    Simulate(CommonArgs),
    /// Enumerate candidate arborescences and verify the count against the
    /// matrix-tree determinant.
    Enumerate {
        #[command(flatten)]
        common: CommonArgs,
        /// Restrict to one root (1-based DG index).
        #[arg(long)]
        root: Option<usize>,
        /// Also dump the scenario tree set as JSON.
        #[arg(long)]
        dump: bool,
    },
    /// Generate a supervised dataset (CSV plus JSON sidecar).
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of rows (defaults to the scenario's train.rows).
        #[arg(long)]
        rows: Option<usize>,
        /// SNR in dB or "inf" (defaults to the scenario's noise setting).
        #[arg(long)]
        snr: Option<String>,
    },
    /// Train the abnormality estimator on a dataset CSV.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset CSV produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Cap training epochs (defaults to the scenario's train.max_epochs).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained model on a dataset CSV.
    Evaluate {
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Model JSON produced by train.
        #[arg(long)]
        model: PathBuf,
    },
    /// Run a closed-loop case study and write trajectory and report.
    RunCase {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained model JSON (omit with --analytic).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Use the exact consensus equations as the detector instead of the
        /// trained network.
        #[arg(long)]
        analytic: bool,
        /// Disable detection and switching.
        #[arg(long)]
        no_mitigation: bool,
    },
    /// Dataset -> split -> train -> evaluate for a list of SNR levels.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        /// Rows per dataset (defaults to the scenario's train.rows).
        #[arg(long)]
        rows: Option<usize>,
        /// Comma-separated SNR list, e.g. "inf,75,40".
        #[arg(long, default_value = "inf,75,40")]
        snr: String,
    },
}

fn load_with_seed(common: &CommonArgs) -> Result<Scenario> {
    let mut sc = load_scenario(&common.scenario)?;
    if let Some(seed) = common.seed {
        sc.seed = seed;
    }
    Ok(sc)
}

fn cmd_simulate(common: &CommonArgs) -> Result<()> {
    let sc = load_with_seed(common)?;
    let est = sc.analytic_estimator();
    let policy = gridswitch::engine::ThresholdPolicy {
        sigma: f64::INFINITY,
        quantile: sc.sigma.quantile,
        safety_factor: sc.sigma.safety_factor,
    };
    let engine = EngineConfig {
        mitigation_enabled: false,
        ..sc.engine
    };
    let report = gridswitch::engine::run_closed_loop(&gridswitch::engine::ClosedLoopInputs {
        grid: &sc.grid,
        trees: &sc.trees,
        attacks: &sc.attacks,
        k1: sc.k1,
        k2: sc.k2,
        omega_ref: sc.omega_ref,
        estimator: &est,
        policy: &policy,
        engine: &engine,
    })?;
    std::fs::create_dir_all(&common.out_dir)?;
    let path = common.out_dir.join(format!("{}_trajectory.csv", sc.name));
    let file = std::fs::File::create(&path)?;
    report
        .trajectory
        .write_csv(BufWriter::new(file), Some(&report.active_tree))?;
    println!(
        "simulated {} for {:.2}s: freq_err={:.6} p_share_err={:.6} q_share_err={:.6}",
        sc.name, sc.grid.t_total, report.residuals.freq_err, report.residuals.p_share_err,
        report.residuals.q_share_err
    );
    println!("trajectory: {}", path.display());
    Ok(())
}

fn cmd_enumerate(common: &CommonArgs, root: Option<usize>, dump: bool) -> Result<()> {
    let sc = load_with_seed(common)?;
    let root0 = match root {
        Some(r) => {
            if r == 0 || r > sc.grid.n {
                return Err(Error::Config(format!(
                    "--root {r} outside 1..={}",
                    sc.grid.n
                )));
            }
            Some(r - 1)
        }
        None => None,
    };
    let summary = enumerate_summary(&sc, root0)?;
    for (root, count) in &summary.per_root {
        println!("root {root}: {count} arborescences (determinant-verified)");
    }
    println!("scenario tree set: {} candidates", summary.total_in_tree_set);
    if dump {
        std::fs::create_dir_all(&common.out_dir)?;
        let path = common.out_dir.join(format!("{}_trees.json", sc.name));
        let file = std::fs::File::create(&path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), &trees_to_json(&sc.trees))
            .map_err(|e| Error::Parse(e.to_string()))?;
        println!("tree dump: {}", path.display());
    }
    Ok(())
}

fn cmd_gen_data(common: &CommonArgs, rows: Option<usize>, snr: Option<&str>) -> Result<()> {
    let sc = load_with_seed(common)?;
    let rows = rows.unwrap_or(sc.train.rows);
    let snr_db = match snr {
        Some(token) => parse_snr_token(token)?,
        None => sc.snr_db,
    };
    let data = sc.generate(rows, snr_db, sc.seed)?;
    std::fs::create_dir_all(&common.out_dir)?;
    let stem = format!("{}_snr-{}", sc.name, snr_label(snr_db));
    let csv_path = common.out_dir.join(format!("{stem}_data.csv"));
    data.write_csv(BufWriter::new(std::fs::File::create(&csv_path)?))?;
    let sidecar_path = common.out_dir.join(format!("{stem}_data.json"));
    serde_json::to_writer_pretty(
        BufWriter::new(std::fs::File::create(&sidecar_path)?),
        &dataset_sidecar(&data, &sc.name),
    )
    .map_err(|e| Error::Parse(e.to_string()))?;
    println!(
        "generated {} rows x {} features (attack fraction {:.3})",
        data.rows(),
        data.width,
        data.provenance.attack_fraction
    );
    println!("dataset: {}", csv_path.display());
    println!("sidecar: {}", sidecar_path.display());
    Ok(())
}

fn cmd_train(common: &CommonArgs, data_path: &PathBuf, epochs: Option<usize>) -> Result<()> {
    let sc = load_with_seed(common)?;
    let file = std::fs::File::open(data_path)?;
    let data = Dataset::read_csv(std::io::BufReader::new(file))?;
    let (tr, va, te) = split(&data, sub_seed(sc.seed, "split"))?;
    let mut cfg = sc.train.mlp.clone();
    cfg.seed = sub_seed(sc.seed, "init");
    if let Some(e) = epochs {
        cfg.max_epochs = e;
    }
    let (params, report) = train(&tr, &va, &te, &cfg)?;
    std::fs::create_dir_all(&common.out_dir)?;
    let model_path = common.out_dir.join(format!("{}_model.json", sc.name));
    params.write_json(BufWriter::new(std::fs::File::create(&model_path)?))?;
    let report_path = common.out_dir.join(format!("{}_train_report.json", sc.name));
    serde_json::to_writer_pretty(
        BufWriter::new(std::fs::File::create(&report_path)?),
        &report,
    )
    .map_err(|e| Error::Parse(e.to_string()))?;
    println!(
        "trained {} epochs (early stop: {}), test MAE {:.6}, RMSE {:.6}",
        report.epochs_run, report.stopped_early, report.test.mae, report.test.rmse
    );
    println!("model: {}", model_path.display());
    println!("report: {}", report_path.display());
    Ok(())
}

fn cmd_evaluate(data_path: &PathBuf, model_path: &PathBuf) -> Result<()> {
    let data = Dataset::read_csv(std::io::BufReader::new(std::fs::File::open(data_path)?))?;
    let params = MlpParams::read_json(std::fs::File::open(model_path)?)?;
    let metrics = evaluate(&params, &data)?;
    println!(
        "{}",
        serde_json::json!({
            "rows": data.rows(),
            "mae": metrics.mae,
            "mse": metrics.mse,
            "rmse": metrics.rmse,
        })
    );
    Ok(())
}

fn cmd_run_case(
    common: &CommonArgs,
    model: Option<&PathBuf>,
    analytic: bool,
    no_mitigation: bool,
) -> Result<bool> {
    let sc = load_with_seed(common)?;
    let detector = if analytic {
        DetectorChoice::Analytic
    } else {
        let path = model.ok_or_else(|| {
            Error::Config("run-case needs --model <file> or --analytic".into())
        })?;
        DetectorChoice::Network(MlpParams::read_json(std::fs::File::open(path)?)?)
    };
    let (doc, _) = run_case(&sc, detector, !no_mitigation, Some(&common.out_dir))?;
    println!(
        "{} [{} detector, mitigation {}] sigma={:.4}",
        doc.scenario,
        doc.detector,
        if doc.mitigation { "on" } else { "off" },
        doc.sigma.sigma
    );
    println!(
        "triggers: {}; switches: {}; latency: {:?}; recovery after trigger: {:?}",
        doc.triggers.len(),
        doc.switches.len(),
        doc.detection_latency_s,
        doc.recovery_after_trigger_s
    );
    for a in &doc.assertions {
        println!(
            "[{}] {} - {}",
            if a.passed { "PASS" } else { "FAIL" },
            a.name,
            a.detail
        );
    }
    if doc.all_trees_compromised {
        println!("no conforming spanning tree: system held to horizon");
    }
    Ok(doc.assertions_passed())
}

fn cmd_pipeline(common: &CommonArgs, rows: Option<usize>, snr: &str) -> Result<()> {
    let sc = load_with_seed(common)?;
    let rows = rows.unwrap_or(sc.train.rows);
    let levels = snr
        .split(',')
        .map(|t| parse_snr_token(t.trim()))
        .collect::<Result<Vec<f64>>>()?;
    let (table, _) = run_pipeline(&sc, rows, &levels, sc.seed)?;
    std::fs::create_dir_all(&common.out_dir)?;
    let csv_path = common.out_dir.join(format!("{}_pipeline.csv", sc.name));
    write_pipeline_csv(&table, BufWriter::new(std::fs::File::create(&csv_path)?))?;
    let json_path = common.out_dir.join(format!("{}_pipeline.json", sc.name));
    serde_json::to_writer_pretty(
        BufWriter::new(std::fs::File::create(&json_path)?),
        &table,
    )
    .map_err(|e| Error::Parse(e.to_string()))?;
    for row in &table.rows {
        println!(
            "snr {:>5}: test MAE {:.6} MSE {:.6} RMSE {:.6} ({} epochs, {})",
            row.snr, row.test_mae, row.test_mse, row.test_rmse, row.epochs_run, row.status
        );
    }
    println!("table: {}", csv_path.display());
    println!("json:  {}", json_path.display());
    Ok(())
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(common) => cmd_simulate(common).map(|_| true),
        Command::Enumerate { common, root, dump } => {
            cmd_enumerate(common, *root, *dump).map(|_| true)
        }
        Command::GenData { common, rows, snr } => {
            cmd_gen_data(common, *rows, snr.as_deref()).map(|_| true)
        }
        Command::Train { common, data, epochs } => cmd_train(common, data, *epochs).map(|_| true),
        Command::Evaluate { data, model } => cmd_evaluate(data, model).map(|_| true),
        Command::RunCase {
            common,
            model,
            analytic,
            no_mitigation,
        } => cmd_run_case(common, model.as_ref(), *analytic, *no_mitigation),
        Command::Pipeline { common, rows, snr } => cmd_pipeline(common, *rows, snr).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", serde_json::json!({ "error": "scenario assertions failed" }));
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
            ExitCode::from(2)
        }
    }
}
