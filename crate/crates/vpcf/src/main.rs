//! Command-line entry point: dataset generation, training, evaluation,
//! forecasting dumps, and gradient checking, all reproducible from a config
//! file and a seed.
//!
//! Exit codes: 0 success, 2 config/IO error, 3 training divergence,
//! 4 gradcheck failure.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::io::Write;
use std::path::{Path, PathBuf};
use vpcf::config::{config_hash, RunConfig};
use vpcf::eval::{
    evaluate_forecast, evaluate_oracle, evaluate_persistence, EvalTable,
};
use vpcf::grid::PointCloud;
use vpcf::latent::{along_ray_similarity, latent_render_with_tables, RayTables};
use vpcf::model::encode_history;
use vpcf::params::ParamVec;
use vpcf::scenes::{
    generate_episode, read_dataset, template_motions, write_dataset, EpisodeData, MotionTemplate,
};
use vpcf::train::{build_samples, fit, gradcheck, CheckOp, ModelVariant, TrainError};

const EXIT_CONFIG: i32 = 2;
const EXIT_DIVERGENCE: i32 = 3;
const EXIT_GRADCHECK: i32 = 4;

#[derive(Parser)]
#[command(name = "vpcf", about = "Desk-scale visual point cloud forecasting", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineArg {
    Raycast,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TemplateArg {
    Left,
    Straight,
    Right,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode dataset and its manifest.
    Generate {
        /// TOML run configuration (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured episode count.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train a model on the dataset's training split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// JSON-lines metrics log path.
        #[arg(long)]
        metrics: PathBuf,
        /// Train an ablation wiring instead of the full pipeline.
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint path (ignored with --oracle).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Results CSV path; the persistence table lands next to it.
        #[arg(long)]
        out: PathBuf,
        /// Summary JSON path.
        #[arg(long)]
        summary: PathBuf,
        /// Score volumes rasterized from ground truth instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Dump forecast point clouds (PLY) and feature similarity statistics.
    Forecast {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode index within the dataset.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// Replace the episode's future ego motions with a template.
        #[arg(long, value_enum)]
        motion_template: Option<TemplateArg>,
    },
    /// Verify analytical gradients against finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict the check to one registered operation.
        #[arg(long)]
        op: Option<String>,
        /// Deliberately corrupt the analytical gradients to prove the
        /// harness detects broken backward passes (must exit 4).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    configure_threads();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            classify_error(&err)
        }
    };
    std::process::exit(code);
}

fn configure_threads() {
    if let Ok(value) = std::env::var("VPCF_THREADS") {
        if let Ok(n) = value.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn classify_error(err: &anyhow::Error) -> i32 {
    if let Some(train_err) = err.downcast_ref::<TrainError>() {
        if matches!(train_err, TrainError::NonFiniteLoss { .. }) {
            return EXIT_DIVERGENCE;
        }
    }
    EXIT_CONFIG
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate { config, out, episodes } => cmd_generate(config.as_deref(), &out, episodes),
        Command::Train { config, dataset, out_checkpoint, metrics, baseline, epochs } => cmd_train(
            config.as_deref(),
            &dataset,
            &out_checkpoint,
            &metrics,
            baseline.map(|_| ModelVariant::Raycast).unwrap_or(ModelVariant::Latent),
            epochs,
        ),
        Command::Eval { config, dataset, checkpoint, out, summary, oracle } => cmd_eval(
            config.as_deref(),
            &dataset,
            checkpoint.as_deref(),
            &out,
            &summary,
            oracle,
        ),
        Command::Forecast { config, dataset, checkpoint, episode, out_dir, motion_template } => {
            cmd_forecast(
                config.as_deref(),
                &dataset,
                &checkpoint,
                episode,
                &out_dir,
                motion_template,
            )
        }
        Command::Gradcheck { config, op, corrupt } => cmd_gradcheck(config.as_deref(), op, corrupt),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    RunConfig::load_or_default(path).map_err(|e| anyhow!(e))
}

fn split_dataset(episodes: &[EpisodeData], cfg: &RunConfig) -> (usize, usize) {
    let train = cfg.scenes.train_episodes.min(episodes.len().saturating_sub(1)).max(1);
    (train, episodes.len() - train)
}

fn cmd_generate(config: Option<&Path>, out: &Path, episodes: Option<usize>) -> Result<i32> {
    let cfg = load_config(config)?;
    let n_episodes = episodes.unwrap_or(cfg.scenes.episodes);
    if n_episodes == 0 {
        bail!("empty dataset requested: episode count is 0");
    }
    let scene_cfg = cfg.scene_config();
    let camera = cfg.camera_rig();
    let lidar = cfg.lidar_rig();
    let mut data = Vec::with_capacity(n_episodes);
    let mut total_points = 0usize;
    for i in 0..n_episodes {
        let episode = generate_episode(cfg.seed.wrapping_add(i as u64), &scene_cfg)
            .with_context(|| format!("generating episode {i}"))?;
        let ep = EpisodeData::materialize(episode, &camera, &lidar)?;
        total_points += ep.clouds.iter().map(|c| c.len()).sum::<usize>();
        data.push(ep);
    }
    write_dataset(&data, out).with_context(|| format!("writing {}", out.display()))?;
    let manifest = serde_json::json!({
        "seed": cfg.seed,
        "config_sha256": config_hash(&cfg),
        "episodes": n_episodes,
        "frames_per_episode": cfg.scenes.frames,
        "total_points": total_points,
    });
    let manifest_path = sibling(out, "manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} episodes ({} points) to {} (manifest {})",
        n_episodes,
        total_points,
        out.display(),
        manifest_path.display()
    );
    Ok(0)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn cmd_train(
    config: Option<&Path>,
    dataset: &Path,
    out_checkpoint: &Path,
    metrics_path: &Path,
    variant: ModelVariant,
    epochs_override: Option<usize>,
) -> Result<i32> {
    let cfg = load_config(config)?;
    let episodes = read_dataset(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    if episodes.is_empty() {
        bail!("dataset {} holds no episodes", dataset.display());
    }
    let (n_train, n_holdout) = split_dataset(&episodes, &cfg);
    let model_cfg = cfg.model_config();
    let mut train_cfg = cfg.train_config();
    if let Some(e) = epochs_override {
        train_cfg.epochs = e;
    }
    let loss_cfg = cfg.loss_config();
    let samples = build_samples(&episodes[..n_train], train_cfg.history_frames, train_cfg.future_steps)?;
    let mut params = ParamVec::seeded_init(model_cfg.layout(), cfg.seed);

    let metrics_file = std::fs::File::create(metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut writer = std::io::BufWriter::new(metrics_file);
    let holdout = &episodes[n_train..];
    let eval_cfg = cfg.eval_config();
    let history = train_cfg.history_frames;
    let mut hook = |p: &ParamVec| -> Vec<f64> {
        evaluate_forecast(p, &model_cfg, variant, holdout, history, &eval_cfg, 0.0)
            .map(|t| t.rows.iter().map(|r| r.chamfer_m2).collect())
            .unwrap_or_default()
    };
    let eval_hook: Option<&mut dyn FnMut(&ParamVec) -> Vec<f64>> =
        if n_holdout > 0 { Some(&mut hook) } else { None };
    let outcome = fit(
        &samples,
        &mut params,
        &model_cfg,
        variant,
        &train_cfg,
        &loss_cfg,
        eval_hook,
        |row| {
            let line = serde_json::to_string(row).expect("metrics row serializes");
            writeln!(writer, "{line}").expect("metrics log writable");
        },
    )?;
    writer.flush()?;
    params.save(out_checkpoint).with_context(|| format!("writing {}", out_checkpoint.display()))?;
    let manifest = serde_json::json!({
        "variant": variant.name(),
        "seed": cfg.seed,
        "config_sha256": config_hash(&cfg),
        "epochs": train_cfg.epochs,
        "train_episodes": n_train,
        "holdout_episodes": n_holdout,
        "final_loss": outcome.metrics.last().map(|m| m.loss),
    });
    std::fs::write(sibling(out_checkpoint, "manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "trained {} variant for {} epochs; checkpoint {}, metrics {}",
        variant.name(),
        train_cfg.epochs,
        out_checkpoint.display(),
        metrics_path.display()
    );
    Ok(0)
}

/// The checkpoint manifest records which pipeline wiring produced it.
fn checkpoint_variant(checkpoint: &Path) -> ModelVariant {
    let manifest = sibling(checkpoint, "manifest.json");
    if let Ok(text) = std::fs::read_to_string(manifest) {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
            if value["variant"] == "raycast" {
                return ModelVariant::Raycast;
            }
        }
    }
    ModelVariant::Latent
}

fn cmd_eval(
    config: Option<&Path>,
    dataset: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    summary: &Path,
    oracle: bool,
) -> Result<i32> {
    let cfg = load_config(config)?;
    let episodes = read_dataset(dataset)?;
    let (n_train, _) = split_dataset(&episodes, &cfg);
    let holdout = &episodes[n_train..];
    if holdout.is_empty() {
        bail!("dataset leaves no held-out episodes to evaluate");
    }
    let history = cfg.train.history_frames;
    let eval_cfg = cfg.eval_config();
    let model_cfg = cfg.model_config();

    let model_table: EvalTable = if oracle {
        evaluate_oracle(holdout, history, &eval_cfg, cfg.volume_spec(), 0.0)?
    } else {
        let ckpt = checkpoint.ok_or_else(|| anyhow!("--checkpoint is required without --oracle"))?;
        let variant = checkpoint_variant(ckpt);
        let params = ParamVec::load(ckpt, model_cfg.layout())
            .with_context(|| format!("loading {}", ckpt.display()))?;
        evaluate_forecast(&params, &model_cfg, variant, holdout, history, &eval_cfg, 0.0)?
    };
    let persistence = evaluate_persistence(holdout, history, &eval_cfg)?;

    std::fs::write(out, model_table.to_csv())?;
    let persistence_path = sibling(out, "persistence.csv");
    std::fs::write(&persistence_path, persistence.to_csv())?;
    let summary_value = serde_json::json!({
        "convention": "chamfer = mean over pred of squared nn distance to gt + mean over gt of squared nn distance to pred (m^2)",
        "config_sha256": config_hash(&cfg),
        "holdout_episodes": holdout.len(),
        "oracle": oracle,
        "model": model_table,
        "persistence": persistence,
    });
    std::fs::write(summary, serde_json::to_string_pretty(&summary_value)?)?;
    println!("{}", model_table.to_csv().trim_end());
    println!("results {}, persistence {}, summary {}", out.display(), persistence_path.display(), summary.display());
    Ok(0)
}

fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut text = String::new();
    text.push_str("ply\nformat ascii 1.0\n");
    text.push_str(&format!("element vertex {}\n", cloud.len()));
    text.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in &cloud.points {
        text.push_str(&format!("{} {} {}\n", p[0] as f32, p[1] as f32, p[2] as f32));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_forecast(
    config: Option<&Path>,
    dataset: &Path,
    checkpoint: &Path,
    episode: usize,
    out_dir: &Path,
    template: Option<TemplateArg>,
) -> Result<i32> {
    let cfg = load_config(config)?;
    let episodes = read_dataset(dataset)?;
    let ep = episodes
        .get(episode)
        .ok_or_else(|| anyhow!("episode {episode} out of range ({} available)", episodes.len()))?;
    let model_cfg = cfg.model_config();
    let variant = checkpoint_variant(checkpoint);
    let params = ParamVec::load(checkpoint, model_cfg.layout())
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    std::fs::create_dir_all(out_dir)?;

    let history = cfg.train.history_frames;
    let steps = cfg.train.future_steps;
    let current = history - 1;
    let seq = ep.history_sequence(history);
    let f_bev = encode_history(&seq, &params, &model_cfg.bev)?;
    let tables = RayTables::build(
        [model_cfg.bev.cells[0], model_cfg.bev.cells[1]],
        model_cfg.latent_config(),
    );
    let (rendered, _) = latent_render_with_tables(
        &f_bev,
        params.tensor("latent.proj_w"),
        params.tensor("latent.proj_b"),
        &tables,
    )
    .map_err(|e| anyhow!(e.to_string()))?;
    let f0 = match variant {
        ModelVariant::Latent => rendered.clone(),
        ModelVariant::Raycast => f_bev.clone(),
    };

    let motions = match template {
        Some(TemplateArg::Left) => template_motions(MotionTemplate::Left, 2.0, cfg.scenes.ego_turn_rate, steps),
        Some(TemplateArg::Straight) => {
            template_motions(MotionTemplate::Straight, 2.0, cfg.scenes.ego_turn_rate, steps)
        }
        Some(TemplateArg::Right) => {
            template_motions(MotionTemplate::Right, 2.0, cfg.scenes.ego_turn_rate, steps)
        }
        None => (0..steps).map(|t| ep.motion(current + t)).collect(),
    };
    let volumes = vpcf::model::forecast(&f0, &motions, &params, &model_cfg)?;
    let dirs = vpcf::render::direction_fan(
        ep.lidar.azimuths,
        ep.lidar.elevations,
        ep.lidar.elev_min,
        ep.lidar.elev_max,
    );
    let origin = [0.0, 0.0, ep.lidar.sensor_z];
    let spacing = 0.5 * model_cfg.bev.cell_size(0);
    for (t, volume) in volumes.iter().enumerate() {
        let cloud = vpcf::render::extract_point_cloud(volume, &dirs, origin, spacing, 0.0);
        let horizon = (t + 1) as f64 * vpcf::scenes::FRAME_DT;
        let path = out_dir.join(format!("forecast_{horizon:.1}s.ply"));
        write_ply(&path, &cloud)?;
    }

    // Feature-shape statistics before and after latent rendering.
    let origin_cells = model_cfg.latent_config().origin;
    let mut csv = String::from("stage,along_ray_similarity\n");
    let pre = along_ray_similarity(&f_bev, origin_cells).map(|v| v.to_string()).unwrap_or_default();
    let post =
        along_ray_similarity(&rendered, origin_cells).map(|v| v.to_string()).unwrap_or_default();
    csv.push_str(&format!("pre_render,{pre}\npost_render,{post}\n"));
    std::fs::write(out_dir.join("similarity.csv"), csv)?;
    println!("wrote {} horizons and similarity.csv to {}", volumes.len(), out_dir.display());
    Ok(0)
}

fn cmd_gradcheck(config: Option<&Path>, op: Option<String>, corrupt: bool) -> Result<i32> {
    // Gradcheck runs on fixed tiny scenarios; the config is accepted for
    // interface symmetry and only validated.
    let _ = load_config(config)?;
    let ops: Vec<CheckOp> = match op {
        Some(name) => vec![CheckOp::parse(&name)?],
        None => CheckOp::ALL.to_vec(),
    };
    let corruption = if corrupt { 0.05 } else { 0.0 };
    let mut failures = Vec::new();
    for op in ops {
        for report in gradcheck(op, 1e-5, 11, corruption) {
            let status = if report.passed() { "ok" } else { "FAIL" };
            println!(
                "{status:4} {:<20} {:<16} max_rel_err {:.3e} (threshold {:.0e})",
                report.op, report.block, report.max_rel_err, report.threshold
            );
            if !report.passed() {
                failures.push(format!("{}/{}", report.op, report.block));
            }
        }
    }
    if failures.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradcheck failed for: {}", failures.join(", "));
        Ok(EXIT_GRADCHECK)
    }
}
