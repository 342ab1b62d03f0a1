//! The `scarf` binary: every workflow as a subcommand.
//!
//! Exit codes: 0 success, 1 assertion/tolerance/validation failure, 2 usage
//! error. Every run prints its fully-resolved configuration so results can
//! be reproduced from the output alone.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batching::DropoutMode;
use crate::benchmark::{
    evaluate, evaluate_split, generate_manifest, load_detections, load_ground_truth, MiManifest,
};
use crate::error::{Result, ScarfError};
use crate::gradcheck;
use crate::neck::{group_forward, FeatureBundle, ScarfGroupParams, ScarfNeckConfig};
use crate::params::save_checkpoint;
use crate::synth::{
    ablate_blocks, ablate_double_sampling, ablate_ratio, evaluate_model, experiment_table,
    generate_pairs, ground_truth_of, run_robustness_experiment, train_detector, AblationReport,
    ExperimentConfig, ExperimentReport, ToyDetectorParams,
};
use crate::tape::Tape;
use crate::tensor::uniform;

#[derive(Parser)]
#[command(
    name = "scarf",
    version,
    about = "Modality-agnostic deformable attention, neck fusion, and the modality-incomplete benchmark at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MissingArg {
    None,
    Vis,
    Ir,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ToggleArg {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    All,
    None,
    Vanilla,
    Pseudo,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Blocks,
    Ratio,
    Double,
}

#[derive(Subcommand)]
enum Command {
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Operation name or "all".
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a seeded random neck, run one path, print shapes and checksums.
    DemoForward {
        #[arg(long, value_enum, default_value_t = MissingArg::None)]
        missing: MissingArg,
        #[arg(long, value_enum, default_value_t = ToggleArg::On)]
        double_sampling: ToggleArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a deterministic modality-incomplete manifest.
    MakeMiManifest {
        /// JSON array of pair id strings.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        vis_fraction: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a detections file against ground truth, optionally restricted
    /// to a manifest's retained-modality images.
    Evaluate {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the toy detector; `--policy all` runs the full per-policy
    /// robustness experiment.
    SynthTrain {
        /// JSON experiment config merged under the explicit flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyArg::All)]
        policy: PolicyArg,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Report JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV table output path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Parameter checkpoint path (single-policy runs only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep one configuration axis and print the resulting table.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Dropout ratios for `--axis ratio`.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Block counts for `--axis blocks`.
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Parses arguments and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Gradcheck { op, seed } => cmd_gradcheck(&op, seed),
        Command::DemoForward {
            missing,
            double_sampling,
            seed,
        } => cmd_demo_forward(missing, double_sampling, seed),
        Command::MakeMiManifest {
            pairs,
            vis_fraction,
            seed,
            out,
        } => cmd_make_mi_manifest(&pairs, vis_fraction, seed, &out),
        Command::Evaluate { dets, gt, manifest } => cmd_evaluate(&dets, &gt, manifest.as_deref()),
        Command::SynthTrain {
            config,
            policy,
            ratio,
            epochs,
            seed,
            out,
            csv,
            checkpoint,
        } => cmd_synth_train(
            config.as_deref(),
            policy,
            ratio,
            epochs,
            seed,
            out,
            csv,
            checkpoint,
        ),
        Command::Ablate {
            axis,
            ratios,
            blocks,
            config,
            epochs,
            seed,
            out,
            csv,
        } => cmd_ablate(
            axis,
            ratios,
            blocks,
            config.as_deref(),
            epochs,
            seed,
            out,
            csv,
        ),
    }
}

fn cmd_gradcheck(op: &str, seed: u64) -> Result<i32> {
    let names = gradcheck::op_names();
    if op != "all" && !names.contains(&op) {
        eprintln!("unknown op '{op}'; known ops: all, {}", names.join(", "));
        return Ok(2);
    }
    println!("gradcheck op={op} seed={seed}");
    let reports = if op == "all" {
        gradcheck::check_all(seed)?
    } else {
        vec![gradcheck::check_op(op, seed)?]
    };
    let mut failed = false;
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<22} worst rel err {:>10.3e}  tolerance {:>8.1e}  {status}",
            r.op, r.worst_rel_err, r.tolerance
        );
        failed |= !r.passed();
    }
    Ok(if failed { 1 } else { 0 })
}

fn cmd_demo_forward(missing: MissingArg, double_sampling: ToggleArg, seed: u64) -> Result<i32> {
    if missing == MissingArg::None && double_sampling == ToggleArg::Off {
        eprintln!(
            "warning: --double-sampling off has no effect with --missing none \
             (the toggle only affects the incomplete path)"
        );
    }
    let mut cfg = ScarfNeckConfig::single_scale(8, 2, 2, 2);
    cfg.double_sampling = double_sampling == ToggleArg::On;
    let missing_name = match missing {
        MissingArg::None => "none",
        MissingArg::Vis => "vis",
        MissingArg::Ir => "ir",
    };
    println!(
        "demo-forward seed={seed} missing={missing_name} double_sampling={}",
        if cfg.double_sampling { "on" } else { "off" }
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ScarfGroupParams::init("demo.g0", &cfg, 0, &mut rng);
    let mut tape = Tape::new();
    let vis = tape.leaf(uniform(&[8, 8, 8], 1.0, &mut rng));
    let ir = tape.leaf(uniform(&[8, 8, 8], 1.0, &mut rng));
    let bundle = match missing {
        MissingArg::None => FeatureBundle::new(Some(vis), Some(ir), 0),
        MissingArg::Vis => FeatureBundle::new(None, Some(ir), 0),
        MissingArg::Ir => FeatureBundle::new(Some(vis), None, 0),
    };
    let (fused, paths) = group_forward(&mut tape, &bundle, &params, &cfg)?;
    println!("block paths: {paths:?}");
    let out = tape.value(fused);
    println!(
        "fused output shape {:?} checksum {:016x}",
        out.shape(),
        out.checksum()
    );
    Ok(0)
}

fn cmd_make_mi_manifest(pairs: &Path, vis_fraction: f64, seed: u64, out: &Path) -> Result<i32> {
    let text = std::fs::read_to_string(pairs).map_err(|source| ScarfError::Io {
        path: pairs.display().to_string(),
        source,
    })?;
    let ids: Vec<String> = serde_json::from_str(&text).map_err(|source| ScarfError::Json {
        path: pairs.display().to_string(),
        source,
    })?;
    let manifest = generate_manifest(&ids, vis_fraction, seed)?;
    manifest.save(out)?;
    println!(
        "manifest: {} pairs, {} VIS / {} IR (vis_fraction={vis_fraction}, seed={seed}) -> {}",
        manifest.entries.len(),
        manifest.vis_count(),
        manifest.entries.len() - manifest.vis_count(),
        out.display()
    );
    Ok(0)
}

fn cmd_evaluate(dets: &Path, gt: &Path, manifest: Option<&Path>) -> Result<i32> {
    let detections = load_detections(dets)?;
    let ground_truth = load_ground_truth(gt)?;
    let result = match manifest {
        Some(path) => {
            let manifest = MiManifest::load(path)?;
            println!(
                "evaluate dets={} gt={} manifest={} (vis_fraction={})",
                dets.display(),
                gt.display(),
                path.display(),
                manifest.vis_fraction
            );
            evaluate_split(&detections, &ground_truth, &manifest)?
        }
        None => {
            println!("evaluate dets={} gt={}", dets.display(), gt.display());
            evaluate(&detections, &ground_truth)?
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&result).expect("result serialization")
    );
    Ok(0)
}

/// Builds the experiment config: defaults, then the config file, then flags.
fn resolve_config(
    config: Option<&Path>,
    ratio: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ScarfError::Io {
                path: path.display().to_string(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|source| ScarfError::Json {
                path: path.display().to_string(),
                source,
            })?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(r) = ratio {
        cfg.dropout_ratio = r;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| ScarfError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn report_csv(report: &ExperimentReport) -> String {
    let mut csv = String::from("arm,split,map,ap50,ap75\n");
    for arm in &report.arms {
        for (split, m) in &arm.metrics {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                arm.label, split, m.map, m.ap50, m.ap75
            ));
        }
    }
    csv
}

fn ablation_csv(report: &AblationReport) -> String {
    let mut csv = String::from("setting,split,map,ap50,ap75\n");
    for row in &report.rows {
        for (split, m) in &row.metrics {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                row.label, split, m.map, m.ap50, m.ap75
            ));
        }
    }
    csv
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth_train(
    config: Option<&Path>,
    policy: PolicyArg,
    ratio: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
) -> Result<i32> {
    let cfg = resolve_config(config, ratio, epochs, seed)?;
    println!(
        "resolved config:\n{}",
        serde_json::to_string_pretty(&cfg).expect("config serialization")
    );
    if policy == PolicyArg::All {
        if checkpoint.is_some() {
            return Err(ScarfError::Argument(
                "--checkpoint requires a single --policy, not all".into(),
            ));
        }
        let report = run_robustness_experiment(&cfg)?;
        println!("{}", experiment_table(&report));
        if let Some(path) = out {
            write_text(&path, &report.to_json())?;
            println!("report written to {}", path.display());
        }
        if let Some(path) = csv {
            write_text(&path, &report_csv(&report))?;
        }
        return Ok(0);
    }

    let mode = match policy {
        PolicyArg::None => DropoutMode::None,
        PolicyArg::Vanilla => DropoutMode::Vanilla,
        PolicyArg::Pseudo => DropoutMode::Pseudo,
        PolicyArg::All => unreachable!(),
    };
    let pairs = generate_pairs(&cfg.scene, cfg.train_scenes, cfg.data_seed())?;
    let test_pairs = generate_pairs(&cfg.scene, cfg.test_scenes, cfg.test_seed())?;
    let gt = ground_truth_of(&test_pairs, cfg.model.num_classes);
    let dropout = cfg.policy(mode);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed());
    let mut params = ToyDetectorParams::init(&cfg.model, &mut rng)?;
    let log = train_detector(
        &mut params,
        &pairs,
        &dropout,
        &cfg.train,
        &cfg.model,
        cfg.shuffle_seed(),
    )?;
    println!(
        "trained {mode} arm: {} steps, final loss {:.6}",
        log.losses.len(),
        log.final_loss().unwrap_or(f64::NAN)
    );
    let suite = evaluate_model(&params, &cfg, &test_pairs, &gt)?;
    for (split, m) in &suite.metrics {
        println!(
            "{split:<10} mAP {:.3}  AP50 {:.3}  AP75 {:.3}",
            m.map, m.ap50, m.ap75
        );
    }
    if let Some(path) = checkpoint {
        save_checkpoint(&params, &path)?;
        println!("checkpoint written to {}", path.display());
    }
    if let Some(path) = &csv {
        let mut text = String::from("split,map,ap50,ap75\n");
        for (split, m) in &suite.metrics {
            text.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                split, m.map, m.ap50, m.ap75
            ));
        }
        write_text(path, &text)?;
    }
    if let Some(path) = out {
        let doc = serde_json::json!({
            "config": cfg,
            "policy": mode.to_string(),
            "final_loss": log.final_loss(),
            "metrics": suite.metrics,
            "single_sampling": suite.single_sampling,
        });
        write_text(
            &path,
            &serde_json::to_string_pretty(&doc).expect("report serialization"),
        )?;
        println!("report written to {}", path.display());
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    axis: AxisArg,
    ratios: Option<Vec<f64>>,
    blocks: Option<Vec<usize>>,
    config: Option<&Path>,
    epochs: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
) -> Result<i32> {
    let cfg = resolve_config(config, None, epochs, seed)?;
    println!(
        "resolved config:\n{}",
        serde_json::to_string_pretty(&cfg).expect("config serialization")
    );
    let report = match axis {
        AxisArg::Blocks => {
            let blocks = blocks.unwrap_or_else(|| vec![1, 2, 4]);
            ablate_blocks(&cfg, &blocks)?
        }
        AxisArg::Ratio => {
            let ratios = ratios.unwrap_or_else(|| vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
            ablate_ratio(&cfg, &ratios)?
        }
        AxisArg::Double => ablate_double_sampling(&cfg)?,
    };
    println!("{}", report.table());
    if let Some(path) = out {
        write_text(&path, &report.to_json())?;
        println!("report written to {}", path.display());
    }
    if let Some(path) = csv {
        write_text(&path, &ablation_csv(&report))?;
    }
    Ok(0)
}
