use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use guided_vo::config::RunConfig;
use guided_vo::data::{self, load_kitti_sequence, load_tum_trajectory, parse_kitti_poses, write_kitti_sequence};
use guided_vo::eval::{kitti_drift, rpe_rmse, DEFAULT_LENGTHS, DEFAULT_STRIDE};
use guided_vo::export::{read_trajectory_csv, write_svg, write_trajectory_csv};
use guided_vo::gradcheck;
use guided_vo::model::{forward_sequence, prepare_samples, to_absolute, train_with, Checkpoint, PoseEstimate};
use guided_vo::pose::{Se3, Trajectory};
use guided_vo::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "gvo", version, about = "Guided-feature visual odometry: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset in KITTI layout.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint and `<out>.loss.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict a trajectory for one sequence of a KITTI-layout dataset.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sequence name; defaults to the first one.
        #[arg(long)]
        sequence: Option<String>,
        /// Resize frames to WIDTHxHEIGHT, e.g. 64x64.
        #[arg(long, value_parser = parse_size)]
        size: Option<(u32, u32)>,
    },
    /// Compare two trajectories (CSV, KITTI or TUM text) and print JSON.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Segment lengths in meters for the drift metric.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<f64>>,
        /// Start-frame stride for the drift metric.
        #[arg(long, default_value_t = DEFAULT_STRIDE)]
        stride: usize,
        /// Frame gap for the relative pose error.
        #[arg(long, default_value_t = 1)]
        delta: usize,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// Overlay trajectories in a top-down SVG.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        traj: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Kitti,
    Rpe,
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    Ok((
        w.parse().map_err(|_| format!("bad width {w:?}"))?,
        h.parse().map_err(|_| format!("bad height {h:?}"))?,
    ))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA })
        }
    }
}

fn run(cmd: Command) -> guided_vo::Result<ExitCode> {
    match cmd {
        Command::Synth { config, out } => synth(&config, &out),
        Command::Train {
            config,
            data,
            out,
            seed,
        } => train(&config, &data, &out, seed),
        Command::Infer {
            ckpt,
            data,
            out,
            sequence,
            size,
        } => infer(&ckpt, &data, &out, sequence, size),
        Command::Eval {
            gt,
            pred,
            metric,
            lengths,
            stride,
            delta,
        } => {
            let (gt, pred) = (read_any_trajectory(&gt)?, read_any_trajectory(&pred)?);
            let out = match metric {
                Metric::Rpe => json!({ "rpe_rmse": rpe_rmse(&gt, &pred, delta)? }),
                Metric::Kitti => {
                    let lengths = lengths.unwrap_or_else(|| DEFAULT_LENGTHS.to_vec());
                    let d = kitti_drift(&gt, &pred, &lengths, stride)?;
                    json!({ "t_rel": d.t_rel, "r_rel": d.r_rel, "segments": d.segments })
                }
            };
            println!("{out}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { module } => {
            let reports = match module {
                Some(m) => gradcheck::run_suite(&m)?,
                None => gradcheck::run_all()?,
            };
            let mut ok = true;
            for r in &reports {
                ok &= r.passed();
                println!(
                    "{} {}/{}: checked {}, kink-skipped {}, max rel err {:.3e} at {}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.suite,
                    r.case,
                    r.checked,
                    r.kink_skipped,
                    r.max_rel_err,
                    r.worst
                );
            }
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_NUMERICAL)
            })
        }
        Command::Plot { traj, out } => {
            let mut trajs = Vec::new();
            for p in &traj {
                let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                trajs.push((label, read_any_trajectory(p)?));
            }
            write_svg(&trajs, &out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn synth(config: &Path, out: &Path) -> guided_vo::Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let seqs = data::generate_synthetic(&cfg.synthetic)?;
    for (i, s) in seqs.iter().enumerate() {
        write_kitti_sequence(out, &format!("{i:02}"), s)?;
    }
    eprintln!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn train(config: &Path, data_dir: &Path, out: &Path, seed: Option<u64>) -> guided_vo::Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let mut tc = cfg.train.to_train_config();
    if let Some(s) = seed {
        tc.seed = s;
    }
    let size = (cfg.synthetic.image_width, cfg.synthetic.image_height);
    let mut samples = Vec::new();
    for (_, seq) in data::load_dataset(data_dir, Some(size))? {
        samples.extend(prepare_samples(&seq.tensors::<f32>(), &seq.poses, cfg.model.sequence_length)?);
    }
    eprintln!("training {} on {} windows", cfg.model.variant, samples.len());
    let ck = Checkpoint::<f32>::fresh(cfg.model.clone(), tc.seed)?;
    let every = (tc.iterations / 20).max(1);
    let (ck, records) = train_with(ck, &tc, &samples, |r| {
        if r.iteration % every == 0 || r.iteration + 1 == tc.iterations {
            eprintln!("iter {:>6}  loss {:.6}", r.iteration, r.loss);
        }
        true
    })?;
    ck.save(out)?;
    let mut csv = String::from("iteration,loss\n");
    for r in &records {
        csv.push_str(&format!("{},{}\n", r.iteration, r.loss));
    }
    let loss_path = sibling(out, ".loss.csv");
    fs::write(&loss_path, csv).map_err(|e| Error::Io {
        path: loss_path.clone(),
        source: e,
    })?;
    Ok(ExitCode::SUCCESS)
}

/// Runs the model over windows of `window` frames that overlap by one frame
/// and chains the per-step relatives from `origin`.
fn predict(frames: &[guided_vo::tensor::Tensor<f32>], ck: &Checkpoint<f32>, origin: Se3) -> guided_vo::Result<Trajectory> {
    let window = ck.model.sequence_length;
    let mut relatives: Vec<PoseEstimate> = Vec::with_capacity(frames.len());
    let mut start = 0;
    while start + 1 < frames.len() {
        let end = (start + window).min(frames.len());
        relatives.extend(forward_sequence(&frames[start..end], &ck.params, &ck.model)?);
        start = end - 1;
    }
    let mut poses = vec![origin];
    poses.extend(to_absolute(&relatives, &origin).iter().map(|e| e.to_pose().to_se3()));
    Trajectory::new(poses)
}

fn infer(
    ckpt: &Path,
    data_dir: &Path,
    out: &Path,
    sequence: Option<String>,
    size: Option<(u32, u32)>,
) -> guided_vo::Result<ExitCode> {
    let ck = Checkpoint::<f32>::load(ckpt)?;
    let name = match sequence {
        Some(s) => s,
        None => data::sequence_dirs(data_dir)?.remove(0),
    };
    let seq = load_kitti_sequence(
        &data_dir.join("sequences").join(&name).join("image_2"),
        &data_dir.join("poses").join(format!("{name}.txt")),
        size,
    )?;
    let traj = predict(&seq.tensors(), &ck, seq.poses[0])?;
    write_trajectory_csv(&traj, out)?;
    Ok(ExitCode::SUCCESS)
}

/// CSV by extension; otherwise KITTI (12 fields) or TUM (8 fields) text.
fn read_any_trajectory(path: &Path) -> guided_vo::Result<Trajectory> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return read_trajectory_csv(path);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .unwrap_or("");
    if first.split_whitespace().count() == 8 {
        load_tum_trajectory(path)
    } else {
        Trajectory::new(parse_kitti_poses(&text, path)?)
    }
}
