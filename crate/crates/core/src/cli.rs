//! Command-line front end: `fit`, `track`, `eval`, `check-gradients` and
//! `convert`.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 configuration error,
//! 4 data error, 5 diagnostic failure (flagged fit or failed gradient check).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::config::{DataConversion, TemplateConfig};
use crate::error::GsogError;
use crate::evaluation::{
    calibrate_offsets, joint_distance_error, load_marker_csv, tracks_from_table, write_plot_data, write_report_csv,
};
use crate::gaussian::SoG;
use crate::kinematics::{GSoGTemplate, Pose, Skeleton};
use crate::optimizer::{fit_pose, track_sequence, FitDiagnostics};
use crate::pointcloud::{depth_to_points, load_depth_image, load_points, PointCloud};
use crate::verify::{check_gradients, CheckSettings};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_DIAGNOSTIC: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "gsog", version, about = "Articulated pose estimation with G-SoG templates")]
pub struct Cli {
    /// Template configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for randomized checks.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; more than one enables parallel pair sums.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the template to one observation.
    Fit(FitArgs),
    /// Fit a sequence of observations, each initialized from the previous.
    Track(TrackArgs),
    /// Joint distance error of a trajectory against marker ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients and closed-form overlaps with numerical oracles.
    CheckGradients(CheckArgs),
    /// Convert a point cloud to its SoG representation.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct ConversionArgs {
    /// Uniform data variance (m^2), overriding the configuration.
    #[arg(long, conflicts_with = "octree_depth")]
    pub sigma2: Option<f64>,
    /// Octree clustering depth, overriding the configuration.
    #[arg(long)]
    pub octree_depth: Option<usize>,
    /// Octree leaf capacity used with --octree-depth.
    #[arg(long, default_value_t = 1, requires = "octree_depth")]
    pub octree_min_points: usize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Point cloud (.xyz, .ply) or 16-bit depth image (.png).
    #[arg(long)]
    pub data: PathBuf,
    /// Initial pose file, or `rest`.
    #[arg(long, default_value = "rest")]
    pub init: String,
    /// Output pose file; diagnostics go to `<output>.diagnostics.json`.
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub conversion: ConversionArgs,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Directory of frames (sorted by name) or a text file listing one frame per line.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long, default_value = "rest")]
    pub init: String,
    /// Trajectory CSV.
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub conversion: ConversionArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trajectory CSV written by `track`.
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Marker CSV with header `frame,marker_id,x,y,z`.
    #[arg(long)]
    pub markers: PathBuf,
    /// Calibrate marker offsets on this trajectory (e.g. ground truth)
    /// instead of the evaluated one.
    #[arg(long)]
    pub calibrate_on: Option<PathBuf>,
    /// Report CSV.
    #[arg(long)]
    pub output: PathBuf,
    /// Per-frame error CSV; defaults to `<output>.plot.csv`.
    #[arg(long)]
    pub plot_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 50)]
    pub quadrature_cases: usize,
    /// Optional JSON report.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// SoG CSV with columns `x,y,z,variance,weight`.
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub conversion: ConversionArgs,
}

/// A failure classified by exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: format!("configuration error: {e}"),
        }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_DATA,
            message: format!("data error: {e}"),
        }
    }

    fn other(e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_OTHER,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gsog: {}", e.message);
            e.code
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("GSOG_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let parallel = match cli.threads {
        Some(0) => return Err(CliError::config("--threads must be positive")),
        Some(n) => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                warn!("thread pool already initialized: {e}");
            }
            n > 1
        }
        None => false,
    };
    let mut config = load_config(cli.config.as_deref())?;
    config.optimizer.parallel |= parallel;
    match &cli.command {
        Command::Fit(args) => cmd_fit(&config, args),
        Command::Track(args) => cmd_track(&config, args),
        Command::Eval(args) => cmd_eval(&config, args),
        Command::CheckGradients(args) => cmd_check_gradients(&config, cli.seed, args),
        Command::Convert(args) => cmd_convert(&config, args),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<TemplateConfig> {
    let path = path.ok_or_else(|| CliError::config("--config is required"))?;
    TemplateConfig::load(path).map_err(CliError::config)
}

fn template_of(config: &TemplateConfig) -> CliResult<GSoGTemplate> {
    config.template().map_err(CliError::config)
}

fn conversion_of(config: &TemplateConfig, args: &ConversionArgs) -> CliResult<DataConversion> {
    let conversion = match (args.sigma2, args.octree_depth) {
        (Some(sigma2), _) => DataConversion::Uniform { sigma2 },
        (None, Some(depth)) => {
            let (v_scale, min_half_extent, sigma2_floor) = match config.data {
                DataConversion::Octree {
                    v_scale,
                    min_half_extent,
                    sigma2_floor,
                    ..
                } => (v_scale, min_half_extent, sigma2_floor),
                DataConversion::Uniform { .. } => {
                    let d = crate::pointcloud::OctreeSettings::default();
                    (d.v_scale, d.min_half_extent, None)
                }
            };
            DataConversion::Octree {
                max_depth: depth,
                min_points: args.octree_min_points,
                v_scale,
                min_half_extent,
                sigma2_floor,
            }
        }
        (None, None) => config.data,
    };
    if let DataConversion::Uniform { sigma2 } = conversion {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(CliError::config(GsogError::NonPositiveVariance(sigma2)));
        }
    }
    Ok(conversion)
}

/// Loads a point cloud, back-projecting `.png` depth images with the
/// configured camera.
pub fn load_cloud(config: &TemplateConfig, path: &Path) -> CliResult<PointCloud> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let cloud = if is_png {
        let camera = config
            .camera
            .ok_or_else(|| CliError::config("depth images need camera intrinsics in the configuration"))?;
        let image = load_depth_image(path).map_err(CliError::data)?;
        depth_to_points(&image, &camera).map_err(CliError::data)?
    } else {
        load_points(path).map_err(CliError::data)?
    };
    info!("{}: {} points", path.display(), cloud.len());
    Ok(cloud)
}

fn load_sog(config: &TemplateConfig, conversion: &DataConversion, path: &Path) -> CliResult<SoG> {
    let cloud = load_cloud(config, path)?;
    let sog = conversion
        .convert(&cloud)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    info!("{}: {} data Gaussians", path.display(), sog.len());
    Ok(sog)
}

fn format_values(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes the flattened pose as one line of decimals.
pub fn write_pose_file(path: &Path, pose: &Pose) -> crate::Result<()> {
    fs::write(path, format_values(&pose.to_vec()) + "\n").map_err(|e| GsogError::io(path, e))
}

/// Reads the first non-empty, non-`#` line of a pose file.
pub fn read_pose_file(path: &Path, skeleton: &Skeleton) -> crate::Result<Pose> {
    let text = fs::read_to_string(path).map_err(|e| GsogError::io(path, e))?;
    let (line_no, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .ok_or_else(|| GsogError::parse(path, 1, "no pose found"))?;
    let values = line
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| GsogError::parse(path, line_no + 1, format!("invalid number {t:?}")))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    Pose::from_slice_for(&values, skeleton)
}

fn init_pose(template: &GSoGTemplate, init: &str) -> CliResult<Pose> {
    if init == "rest" {
        Ok(template.rest_pose())
    } else {
        read_pose_file(Path::new(init), template.skeleton()).map_err(CliError::data)
    }
}

fn cmd_fit(config: &TemplateConfig, args: &FitArgs) -> CliResult<()> {
    let template = template_of(config)?;
    let conversion = conversion_of(config, &args.conversion)?;
    let init = init_pose(&template, &args.init)?;
    let data = load_sog(config, &conversion, &args.data)?;
    let fit = fit_pose(&template, &data, &init, &config.optimizer).map_err(CliError::data)?;
    write_pose_file(&args.output, &fit.pose).map_err(CliError::other)?;
    let sidecar = diagnostics_path(&args.output);
    write_json(&sidecar, &fit.diagnostics)?;
    info!(
        "fit: E = {:.6e} after {} iterations ({:?})",
        fit.diagnostics.final_objective(),
        fit.diagnostics.iterations,
        fit.diagnostics.termination
    );
    if fit.diagnostics.flagged() {
        return Err(CliError {
            code: EXIT_DIAGNOSTIC,
            message: format!(
                "fit flagged: {:?}; see {}",
                fit.diagnostics.termination,
                sidecar.display()
            ),
        });
    }
    Ok(())
}

pub fn diagnostics_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".diagnostics.json");
    PathBuf::from(s)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::other)?;
    fs::write(path, text + "\n").map_err(|e| CliError::other(GsogError::io(path, e)))
}

const FRAME_EXTENSIONS: [&str; 3] = ["xyz", "ply", "png"];

/// Frame files of a directory in lexicographic order, or the entries of a
/// list file resolved relative to it.
pub fn frame_paths(source: &Path) -> crate::Result<Vec<PathBuf>> {
    if source.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(source)
            .map_err(|e| GsogError::io(source, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        paths.sort();
        Ok(paths)
    } else {
        let text = fs::read_to_string(source).map_err(|e| GsogError::io(source, e))?;
        let base = source.parent().unwrap_or(Path::new("."));
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| base.join(l))
            .collect())
    }
}

/// One trajectory row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub frame: usize,
    pub objective: f64,
    pub iterations: usize,
    pub pose: Pose,
    pub status: String,
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> crate::Result<()> {
    let err = |e: csv::Error| GsogError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let params = rows.first().map_or(0, |r| r.pose.parameter_count());
    let mut header = vec!["frame".to_string(), "E".into(), "iterations".into()];
    header.extend((0..params).map(|k| format!("theta_{k}")));
    header.push("status".into());
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.frame.to_string(), r.objective.to_string(), r.iterations.to_string()];
        rec.extend(r.pose.to_vec().iter().map(f64::to_string));
        rec.push(r.status.clone());
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| GsogError::io(path, e))
}

/// Reads a trajectory CSV; the pose is taken from the `theta_*` columns.
pub fn read_trajectory(path: &Path, skeleton: &Skeleton) -> crate::Result<Vec<TrajectoryRow>> {
    let file = fs::File::open(path).map_err(|e| GsogError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| GsogError::parse(path, 1, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (frame, objective, iterations) = match (col("frame"), col("E"), col("iterations")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(GsogError::parse(path, 1, "missing frame, E or iterations column")),
    };
    let thetas: Vec<usize> = (0..skeleton.parameter_count())
        .map(|k| col(&format!("theta_{k}")).ok_or_else(|| GsogError::parse(path, 1, format!("missing theta_{k}"))))
        .collect::<crate::Result<_>>()?;
    if headers.iter().filter(|h| h.starts_with("theta_")).count() != thetas.len() {
        return Err(GsogError::parse(path, 1, "theta columns do not match the skeleton"));
    }
    let status = col("status");
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| GsogError::parse(path, line, e.to_string()))?;
        let num = |k: usize| -> crate::Result<f64> {
            record
                .get(k)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| GsogError::parse(path, line, format!("invalid value in column {}", &headers[k])))
        };
        let values = thetas.iter().map(|&k| num(k)).collect::<crate::Result<Vec<_>>>()?;
        rows.push(TrajectoryRow {
            frame: record
                .get(frame)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| GsogError::parse(path, line, "invalid frame index"))?,
            objective: num(objective)?,
            iterations: num(iterations)? as usize,
            pose: Pose::from_slice_for(&values, skeleton).map_err(|e| GsogError::parse(path, line, e.to_string()))?,
            status: status.and_then(|k| record.get(k)).unwrap_or("").to_string(),
        });
    }
    Ok(rows)
}

fn status_of(d: &FitDiagnostics) -> String {
    serde_json::to_value(d.termination)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn cmd_track(config: &TemplateConfig, args: &TrackArgs) -> CliResult<()> {
    let template = template_of(config)?;
    let conversion = conversion_of(config, &args.conversion)?;
    let init = init_pose(&template, &args.init)?;
    let paths = frame_paths(&args.frames).map_err(CliError::data)?;
    if paths.is_empty() {
        return Err(CliError::data(format!("{}: no frames", args.frames.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    let mut load_errors = vec![None; paths.len()];
    for (k, p) in paths.iter().enumerate() {
        match load_sog(config, &conversion, p) {
            Ok(sog) => frames.push(Some(sog)),
            Err(e) => {
                warn!("frame {k}: {}", e.message);
                load_errors[k] = Some(e.message);
                frames.push(None);
            }
        }
    }
    let result = track_sequence(&template, &frames, &init, &config.optimizer).map_err(CliError::data)?;
    let rows: Vec<TrajectoryRow> = result
        .poses
        .iter()
        .zip(&result.diagnostics)
        .enumerate()
        .map(|(k, (pose, d))| TrajectoryRow {
            frame: k,
            objective: d.final_objective(),
            iterations: d.iterations,
            pose: pose.clone(),
            status: status_of(d),
        })
        .collect();
    write_trajectory(&args.output, &rows).map_err(CliError::other)?;
    let flagged = result.diagnostics.iter().filter(|d| d.flagged()).count();
    info!("tracked {} frames, {flagged} flagged", rows.len());
    if flagged > 0 {
        warn!("{flagged} of {} frames flagged; see the status column", rows.len());
    }
    Ok(())
}

fn cmd_eval(config: &TemplateConfig, args: &EvalArgs) -> CliResult<()> {
    let skeleton = config.skeleton().map_err(CliError::config)?;
    let assignments = config.marker_assignments();
    if assignments.is_empty() {
        return Err(CliError::config("no marker assignments in the configuration"));
    }
    let rows = read_trajectory(&args.trajectory, &skeleton).map_err(CliError::data)?;
    let table = load_marker_csv(&args.markers).map_err(CliError::data)?;
    let markers = tracks_from_table(&table, &assignments).map_err(CliError::data)?;
    let marker_frames: Vec<i64> = table[&markers[0].marker_id].iter().map(|(f, _)| *f).collect();
    let traj_frames: Vec<i64> = rows.iter().map(|r| r.frame as i64).collect();
    if marker_frames != traj_frames {
        return Err(CliError::data(format!(
            "trajectory has {} frames, markers cover {} frames; frame indices must match",
            traj_frames.len(),
            marker_frames.len()
        )));
    }
    let poses: Vec<Pose> = rows.into_iter().map(|r| r.pose).collect();
    let calibration = match &args.calibrate_on {
        None => poses.clone(),
        Some(p) => {
            let rows = read_trajectory(p, &skeleton).map_err(CliError::data)?;
            if rows.iter().map(|r| r.frame as i64).collect::<Vec<_>>() != traj_frames {
                return Err(CliError::data("calibration trajectory frames do not match"));
            }
            rows.into_iter().map(|r| r.pose).collect()
        }
    };
    let offsets = calibrate_offsets(&markers, &calibration, &skeleton).map_err(CliError::data)?;
    let report = joint_distance_error(&markers, &poses, &skeleton, &offsets).map_err(CliError::data)?;
    write_report_csv(&args.output, &report).map_err(CliError::other)?;
    let plot = args.plot_data.clone().unwrap_or_else(|| {
        let mut s = args.output.as_os_str().to_owned();
        s.push(".plot.csv");
        PathBuf::from(s)
    });
    write_plot_data(&plot, &report).map_err(CliError::other)?;
    println!("overall mean joint distance error: {:.2} cm", report.overall_mean);
    Ok(())
}

fn cmd_check_gradients(config: &TemplateConfig, seed: u64, args: &CheckArgs) -> CliResult<()> {
    let template = template_of(config)?;
    let settings = CheckSettings {
        gradient_cases: args.cases,
        quadrature_cases: args.quadrature_cases,
        ..Default::default()
    };
    let report = check_gradients(&template, seed, &settings).map_err(CliError::other)?;
    println!(
        "gradient: max relative error {:.3e} over {} cases (tolerance {:.0e}) {}",
        report.gradient_max_error,
        settings.gradient_cases,
        settings.gradient_tolerance,
        verdict(report.gradient_max_error <= settings.gradient_tolerance)
    );
    println!(
        "quadrature: max relative error {:.3e} over {} cases (tolerance {:.0e}) {}",
        report.quadrature_max_error,
        settings.quadrature_cases,
        settings.quadrature_tolerance,
        verdict(report.quadrature_max_error <= settings.quadrature_tolerance)
    );
    if let Some(path) = &args.output {
        write_json(path, &report)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_DIAGNOSTIC,
            message: "gradient check failed".into(),
        })
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn cmd_convert(config: &TemplateConfig, args: &ConvertArgs) -> CliResult<()> {
    let conversion = conversion_of(config, &args.conversion)?;
    let sog = load_sog(config, &conversion, &args.data)?;
    write_sog_csv(&args.output, &sog).map_err(CliError::other)?;
    println!(
        "{} points -> {} Gaussians",
        load_cloud(config, &args.data)?.len(),
        sog.len()
    );
    Ok(())
}

pub fn write_sog_csv(path: &Path, sog: &SoG) -> crate::Result<()> {
    let err = |e: csv::Error| GsogError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["x", "y", "z", "variance", "weight"]).map_err(err)?;
    for g in sog.components() {
        let m = g.mean();
        w.write_record([m.x, m.y, m.z, g.variance(), g.weight()].map(|v| v.to_string()))
            .map_err(err)?;
    }
    w.flush().map_err(|e| GsogError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn skeleton() -> Skeleton {
        Skeleton::new(vec![
            crate::kinematics::Joint::root(nalgebra::Vector3::zeros()),
            crate::kinematics::Joint::child(0, nalgebra::Vector3::new(0.0, 0.3, 0.0)),
        ])
        .unwrap()
    }

    #[test]
    fn pose_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pose.txt");
        let pose = Pose::from_slice(&[0.1, -0.2, 2.0, 0.0, 0.1, 0.0, 0.99, 0.3, 0.0, 0.0, 0.95]).unwrap();
        write_pose_file(&p, &pose).unwrap();
        assert_eq!(read_pose_file(&p, &skeleton()).unwrap(), pose);
        fs::write(&p, "# comment\n1 2 3\n").unwrap();
        assert!(matches!(
            read_pose_file(&p, &skeleton()),
            Err(GsogError::PoseLength { .. })
        ));
        fs::write(&p, "1 2 x 0 0 0 1 0 0 0 1\n").unwrap();
        assert!(matches!(
            read_pose_file(&p, &skeleton()),
            Err(GsogError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let pose = Pose::from_slice(&[0.1, -0.2, 2.0, 0.0, 0.1, 0.0, 0.99, 0.3, 0.0, 0.0, 0.95]).unwrap();
        let rows = vec![
            TrajectoryRow {
                frame: 0,
                objective: 1.5,
                iterations: 12,
                pose: pose.clone(),
                status: "gradient_tolerance".into(),
            },
            TrajectoryRow {
                frame: 1,
                objective: f64::NAN,
                iterations: 0,
                pose,
                status: "empty_data".into(),
            },
        ];
        write_trajectory(&p, &rows).unwrap();
        let header = fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
        assert!(header.starts_with("frame,E,iterations,theta_0,"));
        assert!(header.ends_with("theta_10,status"));
        let back = read_trajectory(&p, &skeleton()).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].objective.is_nan());
        assert_eq!(back[1].status, "empty_data");
    }

    #[test]
    fn frame_listing() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.xyz", "a.xyz", "c.txt", "d.PLY"] {
            fs::write(dir.path().join(name), "0 0 0\n").unwrap();
        }
        let names: Vec<_> = frame_paths(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.xyz", "b.xyz", "d.PLY"]);
        let list = dir.path().join("list.txt");
        fs::write(&list, "b.xyz\n\n# skip\na.xyz\n").unwrap();
        assert_eq!(
            frame_paths(&list).unwrap(),
            vec![dir.path().join("b.xyz"), dir.path().join("a.xyz")]
        );
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["gsog", "bogus"]), 2);
        assert_eq!(
            run([
                "gsog",
                "fit",
                "--sigma2",
                "0.1",
                "--octree-depth",
                "3",
                "--data",
                "x",
                "--output",
                "y"
            ]),
            2
        );
    }
}
