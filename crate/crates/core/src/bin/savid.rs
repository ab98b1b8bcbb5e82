use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use savid::asmn::AsmnMode;
use savid::corruption::SeverityTable;
use savid::kgf::{CosineKind, NeighborSpec};
use savid::metrics::{format_detections, ApMode};
use savid::oracles;
use savid::pipeline::io::{write_point_cloud, write_tensor};
use savid::pipeline::{
    emit_report, generate_scene, run_forward, run_robustness_suite, DetectionFiles, DetectionProvider, Model,
    PipelineConfig, ProxyScorer,
};
use savid::{Error, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "savid", version, about = "LiDAR-camera fusion pipeline and corruption robustness harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fusion pipeline on a synthetic scene and write its features.
    Forward {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        scene_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep every corruption kind and severity and write report.json and rce.csv.
    Robustness {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Read detections from `<dir>/<cell>.txt` instead of the proxy scorer.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Generate a synthetic scene.
    GenScene {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        objects: usize,
        #[arg(long)]
        range: f64,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        /// Write point clouds, images and boxes here; prints a summary otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every gradient check, oracle and invariant.
    Selftest,
}

/// Config file plus per-key overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    keypoints: Option<usize>,
    #[arg(long)]
    sequence_length: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    asmn_mode: Option<AsmnMode>,
    #[arg(long)]
    asmn_sparsity: Option<f64>,
    /// `false` threads the raw Stage 2 state between frames.
    #[arg(long)]
    asmn_rescale_state: Option<bool>,
    #[arg(long)]
    kgf_cosine: Option<CosineKind>,
    /// `window3x3`, `knn` or `knn:<k>`.
    #[arg(long, value_parser = parse_neighbors)]
    neighbors: Option<NeighborSpec>,
    #[arg(long, value_parser = parse_ap_mode)]
    ap_mode: Option<ApMode>,
    #[arg(long)]
    ap_iou: Option<f64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    corruption_seed: Option<u64>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    range: Option<f64>,
    #[arg(long)]
    no_gman: bool,
    #[arg(long)]
    no_asmn: bool,
    #[arg(long)]
    no_kgf: bool,
    #[arg(long)]
    severity_table: Option<PathBuf>,
}

fn parse_neighbors(s: &str) -> std::result::Result<NeighborSpec, String> {
    let spec = match s.split_once(':') {
        None if s == "window3x3" => NeighborSpec::Window3x3,
        None if s == "knn" => NeighborSpec::Knn { k: NeighborSpec::DEFAULT_K },
        Some(("knn", k)) => NeighborSpec::Knn {
            k: k.parse().map_err(|e| format!("knn size: {e}"))?,
        },
        _ => return Err(format!("unknown neighbor spec {s:?}")),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

fn parse_ap_mode(s: &str) -> std::result::Result<ApMode, String> {
    match s {
        "interp101" => Ok(ApMode::Interp101),
        "exact" => Ok(ApMode::Exact),
        _ => Err(format!("unknown AP mode {s:?} (interp101 or exact)")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load_unchecked(path)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $($path:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { c.$($path).+ = v; })*
            };
        }
        set!(
            channels => channels,
            heads => heads,
            window => window,
            height => height,
            width => width,
            keypoints => keypoints,
            sequence_length => sequence_length,
            dropout => dropout,
            asmn_mode => asmn_mode,
            asmn_sparsity => asmn_sparsity,
            asmn_rescale_state => asmn_rescale_state,
            kgf_cosine => kgf_cosine,
            neighbors => neighbors,
            ap_mode => ap_mode,
            ap_iou => ap_iou,
            model_seed => seeds.model,
            corruption_seed => seeds.corruption,
            objects => scene.objects,
            range => scene.range_m,
        );
        if self.severity_table.is_some() {
            c.severity_table = self.severity_table.clone();
        }
        c.ablation.gman &= !self.no_gman;
        c.ablation.asmn &= !self.no_asmn;
        c.ablation.kgf &= !self.no_kgf;
        c.validate()?;
        Ok(c)
    }
}

fn severity_table(config: &PipelineConfig) -> Result<SeverityTable> {
    match &config.severity_table {
        Some(path) => SeverityTable::load(path),
        None => Ok(SeverityTable::builtin().clone()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn forward(config: &PipelineConfig, scene_seed: u64, out: &Path) -> Result<()> {
    let model = Model::new(config)?;
    let scene = generate_scene(scene_seed, &config.scene, &config.grid, &model.camera, config.sequence_length)?;
    let result = run_forward(config, &model, &scene.frames)?;
    create_dir(out)?;
    let last = result.last();
    for (name, t) in [("f_i", &last.f_i), ("f_l", &last.f_l), ("f_s", &last.f_s), ("f_kgf", &last.f_kgf)] {
        write_tensor(&out.join(format!("{name}.svtn")), t)?;
    }
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    let t = &result.timings;
    let summary = json!({
        "scene_seed": scene_seed,
        "frames": result.frames.len(),
        "shape": last.f_kgf.shape(),
        "gman_states": result.gman_states.len(),
        "asmn_states": result.asmn_states.len(),
        "depth_fallback": result.frames.iter().map(|f| f.depth_fallback).collect::<Vec<_>>(),
        "keypoints": last.keypoints.len(),
        "ablation": config.ablation.label(),
        "timings_ms": {
            "depth": ms(t.depth), "gman": ms(t.gman), "lidar": ms(t.lidar),
            "asmn": ms(t.asmn), "kgf": ms(t.kgf), "total": ms(t.total()),
        },
    });
    write_text(&out.join("forward.json"), &format!("{:#}\n", summary))?;
    log::info!("forward pass over {} frames in {:.1} ms", result.frames.len(), ms(t.total()));
    Ok(())
}

fn robustness(config: &PipelineConfig, out: &Path, detections: Option<PathBuf>) -> Result<()> {
    let table = severity_table(config)?;
    let model = Model::new(config)?;
    let scene = generate_scene(
        config.seeds.scene,
        &config.scene,
        &config.grid,
        &model.camera,
        config.sequence_length,
    )?;
    let provider: Box<dyn DetectionProvider> = match detections {
        Some(dir) => Box::new(DetectionFiles { dir }),
        None => Box::new(ProxyScorer::new(config)),
    };
    let report = run_robustness_suite(config, &model, &scene, provider.as_ref(), &table)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    emit_report(&report, out)?;
    if let Some(s) = &report.summary {
        log::info!("AP_cln {:.4}  AP_corr {:.4}  RCE {:.4}", s.ap_cln, s.ap_corr, s.rce);
    }
    Ok(())
}

fn gen_scene(seed: u64, objects: usize, range: f64, frames: usize, out: Option<PathBuf>) -> Result<()> {
    let mut config = PipelineConfig::default();
    config.scene.objects = objects;
    config.scene.range_m = range;
    let scene = generate_scene(seed, &config.scene, &config.grid, &config.camera(), frames)?;
    let summary = json!({
        "seed": seed,
        "frames": scene.frames.len(),
        "points": scene.frames.iter().map(|f| f.cloud.len()).collect::<Vec<_>>(),
        "boxes": scene.frames[0].boxes,
    });
    match out {
        Some(dir) => {
            create_dir(&dir)?;
            for (i, f) in scene.frames.iter().enumerate() {
                write_point_cloud(&dir.join(format!("cloud_{i:03}.svpc")), &f.cloud)?;
                write_tensor(&dir.join(format!("image_{i:03}.svtn")), &f.image)?;
                write_text(&dir.join(format!("boxes_{i:03}.txt")), &format_detections(&f.boxes))?;
            }
            write_text(&dir.join("scene.json"), &format!("{:#}\n", summary))
        }
        None => {
            println!("{:#}", summary);
            Ok(())
        }
    }
}

fn selftest() -> bool {
    let mut ok = true;
    for suite in oracles::run_all() {
        for c in &suite.checks {
            println!("[{}] {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, suite.name, c.name, c.detail);
        }
        println!("{} suite: {:.2} s", suite.name, suite.elapsed.as_secs_f64());
        ok &= suite.passed();
    }
    ok
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Forward { config, scene_seed, out } => {
            let config = config.resolve()?;
            forward(&config, scene_seed.unwrap_or(config.seeds.scene), &out)?;
        }
        Command::Robustness { config, out, detections } => robustness(&config.resolve()?, &out, detections)?,
        Command::GenScene {
            seed,
            objects,
            range,
            frames,
            out,
        } => gen_scene(seed, objects, range, frames, out)?,
        Command::Selftest => return Ok(selftest()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_NUMERICAL),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_NUMERICAL })
        }
    }
}
