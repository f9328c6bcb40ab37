//! `lpr`: synthetic worlds, map building, voting model fitting,
//! localization and the two benchmarks, one subcommand per stage.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sha2::{Digest, Sha256};

use lpr_core::calib::{cross_beam_variance, fit_calibration, CalibrationTable};
use lpr_core::cloud::{load_scan, save_scan, Scan, ScanFormat};
use lpr_core::descriptors::DescriptorKind;
use lpr_core::eval::{
    attach_ground_truth, auc_csv, default_tau_sweep, eval_descriptor_auc, eval_pipeline, pipeline_csv, pr_curve_csv, scans_csv,
    timing_csv,
};
use lpr_core::geometry::{RigidTransform, Vec3};
use lpr_core::localize::{localize, LocalizeError};
use lpr_core::mapdb::{build_database, load_database, save_database, windowed_place_clouds, place_clouds, merge_survey};
use lpr_core::params::PipelineParams;
use lpr_core::registration::format_pose_line;
use lpr_core::scenario::{fit_voting_model, QuerySpec, Scenario, ScenarioParams};
use lpr_core::synth::{format_ground_truth, format_trajectory, parse_ground_truth, parse_trajectory, Occlusion, SimulatedScan, World};
use lpr_core::voting::PrecisionModel;

const GROUND_TRUTH: &str = "ground_truth.txt";

#[derive(Parser, Debug)]
#[command(name = "lpr", version, about = "Intensity-augmented LiDAR place recognition experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run seed; every random choice derives from it.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a world and its survey trajectory.
    SynthWorld,
    /// Simulate scans in a world.
    SynthScan(SynthScanArgs),
    /// Fit per-beam intensity tables from posed survey scans.
    Calibrate(CalibrateArgs),
    /// Build the place database from posed survey scans.
    BuildMap(BuildMapArgs),
    /// Fit the voting-precision model from posed training scans.
    FitVoting(FitVotingArgs),
    /// Localize one scan; exit code 1 when no candidate is accepted.
    Localize(LocalizeArgs),
    /// Descriptor precision/recall and AUC against the database.
    EvalDescriptors(EvalDescriptorsArgs),
    /// End-to-end success rate and timing.
    EvalPipeline(EvalPipelineArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScanSet {
    /// Survey scans along the trajectory.
    Survey,
    /// Queries at place centres.
    Query,
    /// Training scans at random trajectory positions.
    Train,
    /// One scan at `--pose`.
    Pose,
}

#[derive(Args, Debug)]
struct SynthScanArgs {
    #[arg(long)]
    world: PathBuf,
    /// Defaults to `trajectory.txt` next to the world file.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Which scans to simulate.
    #[arg(long = "scan-set", value_enum)]
    set: ScanSet,
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Blank an azimuth sector of this width (degrees).
    #[arg(long)]
    occlusion: Option<f64>,
    /// Queries sit this far (m) from their place centre.
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    /// `x,y,yaw_deg` for `--scan-set pose`.
    #[arg(long)]
    pose: Option<String>,
    /// Subdirectory of `--out` receiving the scans.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct ScanDirArgs {
    /// Directory of scan files.
    #[arg(long)]
    scans: PathBuf,
    /// Ground-truth poses; defaults to `ground_truth.txt` in the scan directory.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    input: ScanDirArgs,
}

#[derive(Args, Debug)]
struct BuildMapArgs {
    #[command(flatten)]
    input: ScanDirArgs,
    #[arg(long)]
    trajectory: PathBuf,
    /// Identity tables when omitted.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitVotingArgs {
    #[arg(long)]
    map: PathBuf,
    #[command(flatten)]
    input: ScanDirArgs,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    scan: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Shot,
    Ishot,
}

#[derive(Args, Debug)]
struct EvalDescriptorsArgs {
    #[arg(long)]
    map: PathBuf,
    #[command(flatten)]
    input: ScanDirArgs,
    #[arg(long = "kind", value_enum, required = true)]
    kinds: Vec<KindArg>,
    /// Dataset tag in the CSVs; defaults to the scan directory name.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value_t = 5.0)]
    tp_radius: f64,
}

#[derive(Args, Debug)]
struct EvalPipelineArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: ScanDirArgs,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value_t = 3.0)]
    success_radius: f64,
}

/// Everything a run depends on besides its input files.
#[derive(Clone, Debug, Default, PartialEq)]
struct Config {
    pipeline: PipelineParams,
    scenario: ScenarioParams,
}

impl Config {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if PipelineParams::is_key(key) {
            self.pipeline.set(key, value)?;
        } else {
            self.scenario.set(key, value)?;
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        self.pipeline
            .entries()
            .into_iter()
            .chain(self.scenario.entries())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// A usage problem: reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn load_config(global: &Global, command: &Command) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = &global.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let t = line.split('#').next().unwrap_or("").trim();
            if t.is_empty() {
                continue;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| usage(format!("{}:{}: expected 'key = value'", path.display(), i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
    }
    for o in &global.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set {o}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(format!("--set {o}: {e}")))?;
    }
    if let Command::Localize(a) = command {
        if let Some(xi) = a.xi {
            cfg.pipeline.voting.xi = xi;
        }
        if let Some(b) = a.batch {
            cfg.pipeline.voting.batch_size = b;
        }
    }
    Ok(cfg)
}

fn config_hash(cfg: &Config) -> String {
    let digest = Sha256::digest(cfg.to_text().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::SynthWorld => "synth-world",
        Command::SynthScan(_) => "synth-scan",
        Command::Calibrate(_) => "calibrate",
        Command::BuildMap(_) => "build-map",
        Command::FitVoting(_) => "fit-voting",
        Command::Localize(_) => "localize",
        Command::EvalDescriptors(_) => "eval-descriptors",
        Command::EvalPipeline(_) => "eval-pipeline",
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_manifest(out: &Path, command: &str, seed: u64, cfg: &Config) -> Result<()> {
    let text = format!(
        "version = {}\ncommand = {command}\nseed = {seed}\nconfig_sha256 = {}\n",
        env!("CARGO_PKG_VERSION"),
        config_hash(cfg)
    );
    write(&out.join("run.manifest"), text)
}

/// Scan files of a directory in name order; the ground-truth file and
/// anything not ending in `.txt` are skipped.
fn load_scan_dir(dir: &Path) -> Result<Vec<Scan>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading scan directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt") && p.file_name().is_some_and(|n| n != GROUND_TRUTH))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no scan files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| load_scan(p, ScanFormat::Text).with_context(|| format!("loading scan {}", p.display())))
        .collect()
}

fn load_posed(input: &ScanDirArgs) -> Result<Vec<(Scan, RigidTransform)>> {
    let scans = load_scan_dir(&input.scans)?;
    let gt_path = input.gt.clone().unwrap_or_else(|| input.scans.join(GROUND_TRUTH));
    let text = fs::read_to_string(&gt_path).with_context(|| format!("reading ground truth {}", gt_path.display()))?;
    let truth = parse_ground_truth(&text, &gt_path.display().to_string())?;
    Ok(attach_ground_truth(scans, &truth)?)
}

fn load_trajectory(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading trajectory {}", path.display()))?;
    Ok(parse_trajectory(&text, &path.display().to_string())?)
}

fn dataset_name(explicit: &Option<String>, dir: &Path) -> String {
    explicit.clone().unwrap_or_else(|| {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scans".to_string())
    })
}

fn save_scan_set(dir: &Path, scans: &[SimulatedScan]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for s in scans {
        save_scan(&s.scan, &dir.join(format!("{}.txt", s.scan.id)))?;
    }
    let truth: Vec<(String, RigidTransform)> = scans.iter().map(|s| (s.scan.id.clone(), s.pose)).collect();
    write(&dir.join(GROUND_TRUTH), format_ground_truth(&truth))
}

fn parse_pose(text: &str, height: f64) -> Result<RigidTransform> {
    let v: Vec<f64> = text
        .split(',')
        .map(|f| f.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--pose {text}: expected x,y,yaw_deg")))?;
    if v.len() != 3 {
        return Err(usage(format!("--pose {text}: expected x,y,yaw_deg")));
    }
    Ok(RigidTransform::from_yaw(v[2].to_radians(), Vec3::new(v[0], v[1], height)))
}

fn synth_world(global: &Global, cfg: &Config) -> Result<()> {
    let sc = Scenario::new(global.seed, cfg.scenario.clone())?;
    write(&global.out.join("world.json"), sc.world.to_json())?;
    write(&global.out.join("trajectory.txt"), format_trajectory(&sc.trajectory))?;
    info!("world with {} primitives, trajectory of {} poses", sc.world.primitives.len(), sc.trajectory.len());
    Ok(())
}

fn synth_scan(global: &Global, cfg: &Config, a: &SynthScanArgs) -> Result<()> {
    let world = World::load(&a.world)?;
    let traj_path = a
        .trajectory
        .clone()
        .unwrap_or_else(|| a.world.with_file_name("trajectory.txt"));
    let trajectory = load_trajectory(&traj_path)?;
    let sc = Scenario::from_parts(global.seed, cfg.scenario.clone(), world, trajectory);
    let occlusion = a.occlusion.map(f64::to_radians);
    let scans = match a.set {
        ScanSet::Survey => sc.map_scans()?,
        ScanSet::Train => sc.training_scans(a.count, global.seed)?,
        ScanSet::Query => {
            let centers = sc.place_centers(&cfg.pipeline)?;
            let spec = QuerySpec {
                count: a.count,
                occlusion,
                offset: a.offset,
                seed: global.seed,
            };
            sc.queries_at(&centers, &spec)?
        }
        ScanSet::Pose => {
            let text = a.pose.as_deref().ok_or_else(|| usage("--scan-set pose requires --pose x,y,yaw_deg"))?;
            let pose = parse_pose(text, cfg.scenario.sensor_height)?;
            let occ = occlusion.map(|width| Occlusion { start: 0.0, width });
            vec![sc.simulate("scan_000", &pose, global.seed, occ)?]
        }
    };
    let name = a.name.clone().unwrap_or_else(|| {
        match a.set {
            ScanSet::Survey => "survey",
            ScanSet::Query => "query",
            ScanSet::Train => "train",
            ScanSet::Pose => "scan",
        }
        .to_string()
    });
    save_scan_set(&global.out.join(name), &scans)?;
    info!("wrote {} scans", scans.len());
    Ok(())
}

fn calibrate(global: &Global, cfg: &Config, a: &CalibrateArgs) -> Result<()> {
    let posed = load_posed(&a.input)?;
    let world: Vec<Scan> = posed.iter().map(|(s, p)| s.transformed(p)).collect();
    let params = &cfg.pipeline.calib;
    let fit = fit_calibration(&world, params)?;
    let range = params.max_calib_range;
    let before = cross_beam_variance(&world, params.voxel_size, range, |_, raw| raw as f64);
    let after = cross_beam_variance(&world, params.voxel_size, range, |beam, raw| fit.table.lookup(beam, raw));
    info!(
        "calibration: {} shared voxels, {} iterations, cross-beam variance {:?} -> {:?}",
        fit.shared_voxels, fit.iterations, before, after
    );
    fit.table.save(&global.out.join("calibration.txt"))?;
    Ok(())
}

fn build_map(global: &Global, cfg: &Config, a: &BuildMapArgs) -> Result<()> {
    let posed = load_posed(&a.input)?;
    let trajectory = load_trajectory(&a.trajectory)?;
    let table = match &a.calibration {
        Some(p) => CalibrationTable::load(p)?,
        None => CalibrationTable::identity(lpr_core::cloud::NUM_BEAMS, cfg.pipeline.calib.max_calib_range),
    };
    let p = &cfg.pipeline;
    let merge_cell = cfg.scenario.map_voxel_size;
    let places = match cfg.scenario.place_window {
        Some(window) => windowed_place_clouds(&posed, &trajectory, &table, p, merge_cell, window)?,
        None => place_clouds(&merge_survey(&posed, &table, p.max_range, merge_cell)?, &trajectory, p)?,
    };
    let db = build_database(places, &table, p)?;
    info!("{} places, {} descriptors", db.num_places(), db.index.len());
    save_database(&db, &global.out.join("map.lprdb"))?;
    Ok(())
}

fn fit_voting(global: &Global, a: &FitVotingArgs) -> Result<()> {
    let db = load_database(&a.map)?;
    let posed = load_posed(&a.input)?;
    let scans: Vec<SimulatedScan> = posed.into_iter().map(|(scan, pose)| SimulatedScan { scan, pose }).collect();
    let model = fit_voting_model(&db, &scans)?;
    model.save(&global.out.join("model.txt"))?;
    Ok(())
}

/// Ok(true) when a pose was accepted.
fn localize_cmd(cfg: &Config, global: &Global, a: &LocalizeArgs) -> Result<bool> {
    let db = load_database(&a.map)?;
    let model = PrecisionModel::load(&a.model)?;
    let table = db.probability_table(&model)?;
    let scan = load_scan(&a.scan, ScanFormat::Text)?;
    let p = &cfg.pipeline;
    match localize(&scan, &db, &table, &p.voting, &p.registration, global.seed) {
        Ok(r) => {
            let pose = r.pose.expect("accepted result has a pose");
            println!("{}", format_pose_line(&scan.id, r.place, &pose, r.residual.unwrap_or(f64::NAN), true));
            Ok(true)
        }
        Err(LocalizeError::AllCandidatesRejected(r)) => {
            // best rejected candidate, if any got as far as ICP
            let best = r.candidates.iter().find_map(|c| c.result.as_ref().ok().map(|v| (c.place, v)));
            match best {
                Some((place, v)) => println!("{}", format_pose_line(&scan.id, Some(place), &v.transform, v.icp.residual, false)),
                None => println!("{}", format_pose_line(&scan.id, None, &RigidTransform::identity(), f64::NAN, false)),
            }
            Ok(false)
        }
        Err(e) => Err(e.into()),
    }
}

fn eval_descriptors(global: &Global, a: &EvalDescriptorsArgs) -> Result<()> {
    let db = load_database(&a.map)?;
    let posed = load_posed(&a.input)?;
    let dataset = dataset_name(&a.dataset, &a.input.scans);
    let mut evals = Vec::new();
    for k in &a.kinds {
        let kind = match k {
            KindArg::Shot => DescriptorKind::Shot,
            KindArg::Ishot => DescriptorKind::Ishot,
        };
        let e = eval_descriptor_auc(&db, &posed, kind, &default_tau_sweep(), a.tp_radius)?;
        info!("{} AUC {:.4}", kind.name(), e.auc);
        evals.push((dataset.clone(), e));
    }
    write(&global.out.join("pr_curve.csv"), pr_curve_csv(&evals))?;
    write(&global.out.join("auc.csv"), auc_csv(&evals))?;
    Ok(())
}

fn eval_pipeline_cmd(global: &Global, cfg: &Config, a: &EvalPipelineArgs) -> Result<()> {
    let db = load_database(&a.map)?;
    let model = PrecisionModel::load(&a.model)?;
    let table = db.probability_table(&model)?;
    let posed = load_posed(&a.input)?;
    let dataset = dataset_name(&a.dataset, &a.input.scans);
    let p = &cfg.pipeline;
    let report = eval_pipeline(&dataset, &db, &table, &posed, &p.voting, &p.registration, a.success_radius, global.seed);
    info!("{dataset}: success rate {:.3}", report.success_rate());
    let reports = [report];
    write(&global.out.join("pipeline.csv"), pipeline_csv(&reports))?;
    write(&global.out.join("scans.csv"), scans_csv(&reports))?;
    write(&global.out.join("timing.csv"), timing_csv(&reports))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let g = &cli.global;
    let cfg = load_config(g, &cli.command)?;
    if g.print_config {
        print!("{}", cfg.to_text());
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    write_manifest(&g.out, command_name(&cli.command), g.seed, &cfg)?;
    let accepted = match &cli.command {
        Command::SynthWorld => synth_world(g, &cfg).map(|_| true),
        Command::SynthScan(a) => synth_scan(g, &cfg, a).map(|_| true),
        Command::Calibrate(a) => calibrate(g, &cfg, a).map(|_| true),
        Command::BuildMap(a) => build_map(g, &cfg, a).map(|_| true),
        Command::FitVoting(a) => fit_voting(g, a).map(|_| true),
        Command::Localize(a) => localize_cmd(&cfg, g, a),
        Command::EvalDescriptors(a) => eval_descriptors(g, a).map(|_| true),
        Command::EvalPipeline(a) => eval_pipeline_cmd(g, &cfg, a).map(|_| true),
    }?;
    Ok(if accepted { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
