//! `bevkd`: runs the fusion and distillation pipeline, the check suites,
//! and writes scenes and tensor dumps.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevkd_core::{
    generate_scene, run_suite, train, Error, Forward, Model, Precision, PreparedScene, Result, RunConfig, Suite, Tensor,
};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "bevkd",
    version,
    about = "Camera-radar BEV fusion with intensity-aware distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a generated scene; writes metrics.jsonl and final tensor dumps.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Teacher BEV features `[C, H, W]` to use instead of the built-in encoder.
        #[arg(long)]
        teacher_dump: Option<PathBuf>,
    },
    /// Run a check suite: oracles, gradients, invariants or all.
    Check {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a scene file and its camera tensor sidecar.
    GenScene {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose scene and camera sections are used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dump one tensor of the initial forward pass.
    Dump {
        /// One of the names listed by `--what list`.
        #[arg(long)]
        what: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher_dump: Option<PathBuf>,
    },
}

/// Names accepted by `dump --what`; `run` writes the first six.
const DUMP_NAMES: [&str; 12] = [
    "F_camera",
    "F_radar",
    "F_fused",
    "I_camera",
    "I_radar",
    "I_lidar",
    "F_lidar",
    "F_blend",
    "camera_input",
    "depth",
    "heatmap",
    "attention",
];
const RUN_DUMPS: usize = 6;

fn select(fw: &Forward, prep: &PreparedScene, name: &str) -> Option<Tensor> {
    Some(match name {
        "F_camera" => fw.camera_bev.clone(),
        "F_radar" => fw.radar_bev.clone(),
        "F_fused" => fw.fused.clone(),
        "I_camera" => fw.camera_intensity.tensor().clone(),
        "I_radar" => prep.radar_intensity.tensor().clone(),
        "I_lidar" => prep.lidar_intensity.tensor().clone(),
        "F_lidar" => prep.teacher.f_lidar.clone(),
        "F_blend" => fw.blended.clone(),
        "camera_input" => prep.scene.camera_input.clone(),
        "depth" => fw.depth.clone(),
        "heatmap" => fw.head.heatmap.clone(),
        "attention" => fw.attention.clone(),
        _ => return None,
    })
}

/// Exit status: 2 for bad input or unwritable output, 3 for non-finite
/// numbers, 1 for anything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Argument(_) | Error::Json(_) | Error::Io(_) | Error::Format(_) | Error::UnknownParam(_) => 2,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Argument(format!("cannot read config {}: {io}", p.display())),
            other => other,
        }),
        None => Ok(RunConfig::default()),
    }
}

fn load_teacher(path: Option<&Path>) -> Result<Option<Tensor>> {
    path.map(|p| Tensor::load(p).map(|(t, _)| t)).transpose()
}

fn cmd_run(config: &Path, out: Option<PathBuf>, teacher_dump: Option<&Path>) -> Result<()> {
    let cfg = load_config(Some(config))?;
    let out = out
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Argument("no output directory: pass --out or set out_dir".into()))?;
    fs::create_dir_all(&out)?;
    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let teacher = load_teacher(teacher_dump)?;
    let outcome = train(&cfg, teacher, |rec| {
        serde_json::to_writer(&mut metrics, rec)?;
        metrics.write_all(b"\n")?;
        Ok(())
    })?;
    metrics.flush()?;
    let fw = &outcome.last;
    for name in &DUMP_NAMES[..RUN_DUMPS] {
        let t = select(fw, &outcome.prep, name).expect("run dump names are known");
        t.ensure_finite(name)?;
        t.save(out.join(format!("{name}.bin")), cfg.precision)?;
    }
    let last = outcome.records.last().expect("train reports at least one record");
    println!(
        "{} steps: total {:.6} -> {:.6}, wrote {}",
        cfg.steps,
        outcome.records[0].total,
        last.total,
        out.display()
    );
    Ok(())
}

fn cmd_check(suite: &str, seed: u64) -> Result<bool> {
    let suite: Suite = suite.parse()?;
    let report = run_suite(suite, seed);
    println!("{report}");
    Ok(report.passed())
}

fn cmd_gen_scene(seed: u64, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let scene = generate_scene(seed, &cfg.scene, &cfg.camera)?;
    scene.save(out)?;
    println!(
        "scene {seed}: {} boxes, {} lidar, {} radar points",
        scene.boxes.len(),
        scene.lidar.len(),
        scene.radar.len()
    );
    Ok(())
}

fn cmd_dump(what: &str, out: &Path, config: Option<&Path>, teacher_dump: Option<&Path>) -> Result<()> {
    if what == "list" {
        println!("{}", DUMP_NAMES.join("\n"));
        return Ok(());
    }
    if !DUMP_NAMES.contains(&what) {
        return Err(Error::Argument(format!(
            "unknown dump `{what}`; expected one of {}",
            DUMP_NAMES.join(", ")
        )));
    }
    let cfg = load_config(config)?;
    let model = Model::new(cfg.model())?;
    let store = model.init_params(cfg.seed)?;
    let scene = generate_scene(cfg.seed, &cfg.scene, &cfg.camera)?;
    let prep = model.prepare(&store, scene, load_teacher(teacher_dump)?)?;
    let fw = model.forward(&store, &prep)?;
    let t = select(&fw, &prep, what).expect("name checked above");
    t.ensure_finite(what)?;
    let precision = if what == "camera_input" {
        Precision::F64
    } else {
        cfg.precision
    };
    t.save(out, precision)?;
    println!("{what} {:?} -> {}", t.dims(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            teacher_dump,
        } => cmd_run(&config, out, teacher_dump.as_deref()).map(|_| true),
        Command::Check { suite, seed } => cmd_check(&suite, seed),
        Command::GenScene { seed, out, config } => cmd_gen_scene(seed, &out, config.as_deref()).map(|_| true),
        Command::Dump {
            what,
            out,
            config,
            teacher_dump,
        } => cmd_dump(&what, &out, config.as_deref(), teacher_dump.as_deref()).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
