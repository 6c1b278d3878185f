//! `obbdet` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::arpt;
use crate::codec::{
    angles_to_raw, decode_detections, encode_targets, Cell, DenseMaps, DEFAULT_CONF_THRESHOLD, DEFAULT_STRIDE,
    DEFAULT_TOP_K,
};
use crate::eval::{report, ImageDetections, DEFAULT_IOU_THRESHOLD};
use crate::geometry::wrap_angle_delta;
use crate::losses::{
    fit_angle, run_gradcheck, AngleLossKind, GradCheckLoss, RangeMode, DEFAULT_EPSILON, DEFAULT_TOLERANCE,
};
use crate::records::{read_detections, read_ground_truth, write_detections, write_ground_truth, write_text};
use crate::synth::{generate_scene, perturb, PerturbConfig, SceneConfig};

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "obbdet", version, about = "Oriented-box people detection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic overhead scene set (gt.jsonl + config.json).
    Synth(SynthArgs),
    /// Degrade ground truth into scored pseudo-detections.
    Perturb(PerturbArgs),
    /// Encode ground truth into dense ARPT target maps.
    Encode(EncodeArgs),
    /// Decode ARPT maps into detections.
    Decode(DecodeArgs),
    /// Evaluate detections against ground truth (AP, P, R, F1).
    Eval(EvalArgs),
    /// Check analytic loss gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Run single-angle gradient descent and print the trajectory.
    AngleDemo(AngleDemoArgs),
}

fn parse_usize_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected MIN:MAX")?;
    let lo: usize = a.trim().parse().map_err(|e| format!("bad MIN: {e}"))?;
    let hi: usize = b.trim().parse().map_err(|e| format!("bad MAX: {e}"))?;
    if lo > hi {
        return Err(format!("MIN ({lo}) exceeds MAX ({hi})"));
    }
    Ok((lo, hi))
}

fn parse_f64_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("expected MIN:MAX")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("bad MIN: {e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("bad MAX: {e}"))?;
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(format!("MIN ({lo}) exceeds MAX ({hi})"));
    }
    Ok((lo, hi))
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub num_images: usize,
    #[arg(long, default_value_t = 512)]
    pub image_size: usize,
    /// Inclusive people-per-image range.
    #[arg(long, default_value = "2:5", value_parser = parse_usize_range)]
    pub people: (usize, usize),
    /// Box height range in pixels.
    #[arg(long, default_value = "40:120", value_parser = parse_f64_range)]
    pub size_range: (f64, f64),
    /// Width/height ratio range.
    #[arg(long, default_value = "0.3:0.6", value_parser = parse_f64_range)]
    pub aspect_range: (f64, f64),
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 8.0)]
    pub min_center_distance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub center_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub size_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub angle_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub drop_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub spurious_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub score_floor: f64,
    #[arg(long, default_value_t = 1.0)]
    pub score_ceiling: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    pub stride: usize,
    /// Store the orientation channel as raw head outputs `atanh(θ/π)`
    /// instead of angles.
    #[arg(long)]
    pub raw_orientation: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    pub conf: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub topk: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou: f64,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    pub conf: f64,
    /// Machine-readable report with the match ledger.
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Focal,
    Offset,
    Size,
    Angle,
    Total,
    All,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = LossArg::All)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub eps: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RangeArg {
    Halfpi,
    Pi,
    Unbounded,
}

impl From<RangeArg> for RangeMode {
    fn from(r: RangeArg) -> Self {
        match r {
            RangeArg::Halfpi => RangeMode::HalfPi,
            RangeArg::Pi => RangeMode::Pi,
            RangeArg::Unbounded => RangeMode::Unbounded,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AngleLossArg {
    L1,
    PeriodicL1,
    SmoothPeriodicL1,
}

impl From<AngleLossArg> for AngleLossKind {
    fn from(a: AngleLossArg) -> Self {
        match a {
            AngleLossArg::L1 => AngleLossKind::PlainL1,
            AngleLossArg::PeriodicL1 => AngleLossKind::PeriodicL1,
            AngleLossArg::SmoothPeriodicL1 => AngleLossKind::SmoothPeriodicL1,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct AngleDemoArgs {
    #[arg(long, default_value_t = 80.0, allow_hyphen_values = true)]
    pub target_deg: f64,
    #[arg(long, default_value_t = -80.0, allow_hyphen_values = true)]
    pub init_deg: f64,
    #[arg(long, value_enum, default_value_t = RangeArg::Pi)]
    pub range: RangeArg,
    #[arg(long, value_enum, default_value_t = AngleLossArg::SmoothPeriodicL1)]
    pub loss: AngleLossArg,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

/// Runs one command, returning the process exit code.
pub fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Perturb(a) => cmd_perturb(&a),
        Command::Encode(a) => cmd_encode(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::AngleDemo(a) => cmd_angle_demo(&a),
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<u8, CliError> {
    let cfg = SceneConfig {
        seed: a.seed,
        image_size: a.image_size,
        n_images: a.num_images,
        people_per_image: a.people,
        size_range: a.size_range,
        aspect_range: a.aspect_range,
        center_margin: a.margin,
        min_center_distance: a.min_center_distance,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let gt = generate_scene(&cfg).map_err(anyhow::Error::from)?;
    ensure_dir(&a.out)?;
    write_ground_truth(&a.out.join("gt.jsonl"), &gt).map_err(anyhow::Error::from)?;
    let echo = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    write_text(&a.out.join("config.json"), &echo).map_err(anyhow::Error::from)?;
    println!(
        "wrote {} images ({} people) to {}",
        gt.images().len(),
        gt.box_count(),
        a.out.display()
    );
    Ok(0)
}

pub fn cmd_perturb(a: &PerturbArgs) -> Result<u8, CliError> {
    let cfg = PerturbConfig {
        seed: a.seed,
        center_noise_sigma: a.center_sigma,
        size_noise_sigma: a.size_sigma,
        angle_noise_sigma: a.angle_sigma,
        drop_rate: a.drop_rate,
        spurious_rate: a.spurious_rate,
        score_floor: a.score_floor,
        score_ceiling: a.score_ceiling,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let gt = read_ground_truth(&a.gt).map_err(anyhow::Error::from)?;
    let dets = perturb(&gt, &cfg).map_err(anyhow::Error::from)?;
    write_detections(&a.out, &dets).map_err(anyhow::Error::from)?;
    let kept: usize = dets.iter().map(|d| d.detections.len()).sum();
    println!(
        "wrote {kept} detections for {} images to {}",
        dets.len(),
        a.out.display()
    );
    Ok(0)
}

/// What the orientation channel of a map directory holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationSemantics {
    /// Canonical angles in radians.
    Angle,
    /// Raw head outputs `t` with `θ = π·tanh(t)`.
    Raw,
}

/// One entry of a map directory's `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapIndexEntry {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub orientation: OrientationSemantics,
    /// Low-resolution `[x, y]` center cell per object.
    pub centers: Vec<[usize; 2]>,
}

pub const MAP_FILES: [&str; 4] = ["heatmap.arpt", "offset.arpt", "size.arpt", "orientation.arpt"];

fn safe_component(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

pub fn cmd_encode(a: &EncodeArgs) -> Result<u8, CliError> {
    let gt = read_ground_truth(&a.gt).map_err(anyhow::Error::from)?;
    let mut encoded = Vec::with_capacity(gt.images().len());
    let mut failures = Vec::new();
    for img in gt.images() {
        if !safe_component(&img.image_id) {
            failures.push(format!(
                "image `{}`: id is not usable as a directory name",
                img.image_id
            ));
            continue;
        }
        match encode_targets(&img.boxes, img.width, img.height, a.stride) {
            Ok(t) => encoded.push((img, t)),
            Err(e) => failures.push(format!("image `{}`: {e}", img.image_id)),
        }
    }
    if !failures.is_empty() {
        return Err(anyhow!("{}", failures.join("\n")).into());
    }

    ensure_dir(&a.out)?;
    let semantics = if a.raw_orientation {
        OrientationSemantics::Raw
    } else {
        OrientationSemantics::Angle
    };
    let mut index = Vec::with_capacity(encoded.len());
    for (img, mut t) in encoded {
        if a.raw_orientation {
            angles_to_raw(&mut t.maps);
        }
        let dir = a.out.join(&img.image_id);
        ensure_dir(&dir)?;
        let m = &t.maps;
        for (name, map) in MAP_FILES.iter().zip([&m.heatmap, &m.offset, &m.size, &m.orientation]) {
            arpt::write_map(&dir.join(name), map).map_err(anyhow::Error::from)?;
        }
        index.push(MapIndexEntry {
            image_id: img.image_id.clone(),
            width: img.width,
            height: img.height,
            stride: a.stride,
            orientation: semantics,
            centers: t.centers.iter().map(|c| [c.x, c.y]).collect(),
        });
    }
    let text = serde_json::to_string_pretty(&index).expect("index serializes") + "\n";
    write_text(&a.out.join("index.json"), &text).map_err(anyhow::Error::from)?;
    println!("encoded {} images into {}", index.len(), a.out.display());
    Ok(0)
}

/// Reads one image's maps from a directory written by `encode`, converting
/// the orientation channel to raw outputs if needed.
pub fn read_maps(root: &Path, entry: &MapIndexEntry) -> anyhow::Result<DenseMaps> {
    let dir = root.join(&entry.image_id);
    let [heatmap, offset, size, orientation] = MAP_FILES.map(|n| arpt::read_map(&dir.join(n)));
    let mut maps = DenseMaps {
        stride: entry.stride,
        heatmap: heatmap?,
        offset: offset?,
        size: size?,
        orientation: orientation?,
    };
    maps.check_shapes()
        .with_context(|| format!("maps for image `{}`", entry.image_id))?;
    for c in &entry.centers {
        if !maps.contains(Cell::new(c[0], c[1])) {
            bail!("image `{}`: center {:?} outside the maps", entry.image_id, c);
        }
    }
    if entry.orientation == OrientationSemantics::Angle {
        angles_to_raw(&mut maps);
    }
    Ok(maps)
}

pub fn read_index(root: &Path) -> anyhow::Result<Vec<MapIndexEntry>> {
    let path = root.join("index.json");
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}

pub fn cmd_decode(a: &DecodeArgs) -> Result<u8, CliError> {
    let index = read_index(&a.maps)?;
    let mut out = Vec::with_capacity(index.len());
    for entry in &index {
        let maps = read_maps(&a.maps, entry)?;
        out.push(ImageDetections {
            image_id: entry.image_id.clone(),
            width: entry.width,
            height: entry.height,
            detections: decode_detections(&maps, a.conf, a.topk),
        });
    }
    write_detections(&a.out, &out).map_err(anyhow::Error::from)?;
    let n: usize = out.iter().map(|d| d.detections.len()).sum();
    println!(
        "decoded {n} detections from {} images into {}",
        out.len(),
        a.out.display()
    );
    Ok(0)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<u8, CliError> {
    let gt = read_ground_truth(&a.gt).map_err(anyhow::Error::from)?;
    let dets = read_detections(&a.det).map_err(anyhow::Error::from)?;
    let r = report(&gt, &dets, a.conf, a.iou).map_err(anyhow::Error::from)?;
    let text = serde_json::to_string_pretty(&r).expect("report serializes") + "\n";
    write_text(&a.report, &text).map_err(anyhow::Error::from)?;
    println!(
        "images {}  gt {}  detections>=conf {}  true positives {}",
        gt.images().len(),
        r.gt_count,
        r.predicted,
        r.true_positives
    );
    println!("AP50      {:.3}", r.ap50);
    println!("precision {:.3}", r.precision);
    println!("recall    {:.3}", r.recall);
    println!("F1        {:.3}", r.f1);
    Ok(0)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<u8, CliError> {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(CliError::Usage(format!("--eps must be positive, got {}", a.eps)));
    }
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    if a.eps > 1e-3 {
        eprintln!(
            "warning: eps={} exceeds 1e-3; the estimate is truncation-dominated",
            a.eps
        );
    } else if a.eps < 1e-7 {
        eprintln!(
            "warning: eps={} is below 1e-7; the estimate is round-off-dominated",
            a.eps
        );
    }
    let losses: Vec<GradCheckLoss> = match a.loss {
        LossArg::Focal => vec![GradCheckLoss::Focal],
        LossArg::Offset => vec![GradCheckLoss::Offset],
        LossArg::Size => vec![GradCheckLoss::Size],
        LossArg::Angle => vec![GradCheckLoss::Angle],
        LossArg::Total => vec![GradCheckLoss::Total],
        LossArg::All => GradCheckLoss::ALL.to_vec(),
    };
    let mut table = format!("{:<26}{:>8}{:>14}  status\n", "loss", "samples", "max_rel_err");
    let mut ok = true;
    for loss in losses {
        for row in run_gradcheck(loss, a.samples, a.eps, a.seed) {
            let pass = row.passes(a.tol);
            ok &= pass;
            let _ = writeln!(
                table,
                "{:<26}{:>8}{:>14.3e}  {}",
                row.name,
                row.samples,
                row.max_relative_error,
                if pass { "pass" } else { "FAIL" }
            );
        }
    }
    print!("{table}");
    println!("tolerance {:e}: {}", a.tol, if ok { "all passed" } else { "FAILED" });
    Ok(if ok { 0 } else { EXIT_RUNTIME })
}

pub fn cmd_angle_demo(a: &AngleDemoArgs) -> Result<u8, CliError> {
    if !(a.lr > 0.0 && a.lr.is_finite()) {
        return Err(CliError::Usage(format!("--lr must be positive, got {}", a.lr)));
    }
    let mode = RangeMode::from(a.range);
    let kind = AngleLossKind::from(a.loss);
    let target = a.target_deg.to_radians();
    let t_init = mode.raw_for(a.init_deg.to_radians()).ok_or_else(|| {
        CliError::Usage(format!(
            "--init-deg {} is outside the {} prediction range",
            a.init_deg, mode
        ))
    })?;
    let traj = fit_angle(target, t_init, mode, kind, a.lr, a.steps as usize);
    let mut csv = String::from("step,t,theta_deg,loss\n");
    for p in &traj {
        let _ = writeln!(csv, "{},{},{},{}", p.step, p.t, p.theta_hat * 180.0 / PI, p.loss);
    }
    let last = traj.last().expect("at least one point");
    let summary = format!(
        "final theta_hat_deg={:.4} wrapped_error_deg={:.4} (range {}, loss {}, {} steps)",
        last.theta_hat.to_degrees(),
        wrap_angle_delta(last.theta_hat - target).abs().to_degrees(),
        mode,
        kind,
        a.steps
    );
    match &a.out {
        Some(path) => {
            write_text(path, &csv).map_err(anyhow::Error::from)?;
            println!("{summary}");
        }
        None => {
            print!("{csv}");
            eprintln!("{summary}");
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_parse() {
        assert_eq!(parse_usize_range("2:5"), Ok((2, 5)));
        assert!(parse_usize_range("5:2").is_err());
        assert!(parse_usize_range("5").is_err());
        assert_eq!(parse_f64_range("0.3:0.6"), Ok((0.3, 0.6)));
    }

    #[test]
    fn usage_errors_from_clap() {
        let e = Cli::try_parse_from(["obbdet", "synth", "--people", "5:2", "--out", "x"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = Cli::try_parse_from(["obbdet", "angle-demo", "--steps", "0"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = Cli::try_parse_from(["obbdet", "gradcheck", "--loss", "hinge"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn negative_degrees_parse() {
        let cli = Cli::try_parse_from(["obbdet", "angle-demo", "--init-deg", "-80", "--target-deg", "-10"]).unwrap();
        match cli.command {
            Command::AngleDemo(a) => assert_eq!((a.init_deg, a.target_deg), (-80.0, -10.0)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn safe_ids() {
        assert!(safe_component("img_00001"));
        assert!(!safe_component("../x"));
        assert!(!safe_component(".."));
        assert!(!safe_component(""));
    }
}
