use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use splatdiff::camera::load_camera;
use splatdiff::diffusion::{sample_unconditional, Denoiser};
use splatdiff::error::ErrorKind;
use splatdiff::gaussians::{load_gaussians, save_gaussians};
use splatdiff::guidance::{reconstruct, GuidanceConfig};
use splatdiff::image::save_png;
use splatdiff::nn::checkpoint::load_checkpoint;
use splatdiff::nn::denoiser::DenoiserWeights;
use splatdiff::pipeline::config::{create_run_dir, PipelineConfig};
use splatdiff::pipeline::dataset::{generate_dataset, list_scenes, load_scene, load_view, scenes_dir};
use splatdiff::pipeline::driver::{evaluate_dirs, evidence_views, fit_scenes, input_view_psnr, reconstruct_scene, write_prediction};
use splatdiff::pipeline::eval::{evaluate_scene, EvalReport};
use splatdiff::pipeline::train::{prepare_corpus, Trainer};
use splatdiff::render::render;
use splatdiff::{Error, Result};

#[derive(Parser)]
#[command(name = "splatdiff", version, about = "View-guided Gaussian-splat diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set guidance.lambda_gd=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic toy corpus.
    Datagen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a fixed-count Gaussian set to every scene from its ring views.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        views: usize,
    },
    /// Train the denoiser on the scenes' Gaussian sets.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train on `<fitted>/scenes/<id>/gaussians.bin` instead of the analytic sets.
        #[arg(long)]
        fitted: Option<PathBuf>,
    },
    /// Draw unconditional samples.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Reconstruct scenes from 1 or 2 ring views, or from explicit evidence.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required_unless_present = "evidence")]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        views: usize,
        /// `image.png,mask.png,camera.txt`; repeatable. Skips the dataset.
        #[arg(long)]
        evidence: Vec<String>,
    },
    /// Render a Gaussian set from a camera to PNG.
    Render {
        #[arg(long)]
        gaussians: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
        background: Vec<f64>,
    },
    /// Compare a prediction directory with a dataset directory.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Calibrate `lambda_gd` over the configured grid.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        scenes: usize,
        #[arg(long, default_value_t = 1)]
        views: usize,
    },
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let cfg = PipelineConfig::load(args.config.as_deref(), &args.overrides)?;
    eprintln!("# resolved config (fingerprint {})\n{}", cfg.fingerprint(), cfg.to_toml());
    Ok(cfg)
}

fn load_model(path: &Path, cfg: &PipelineConfig) -> Result<(DenoiserWeights<f32>, splatdiff::diffusion::NoiseSchedule)> {
    let ck = load_checkpoint(path)?;
    let schedule = cfg.schedule.from_checkpoint(&ck).build()?;
    if ck.weights.config.point_count != cfg.denoiser.point_count {
        eprintln!(
            "note: checkpoint trained with N = {}, sampling with N = {}",
            ck.weights.config.point_count, cfg.denoiser.point_count
        );
    }
    Ok((ck.weights, schedule))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { cfg, out } => {
            let cfg = load_config(&cfg)?;
            eprintln!("seed {}", cfg.dataset.seed);
            let t0 = Instant::now();
            let scenes = generate_dataset(&out, &cfg.dataset)?;
            let p = out.join("config.toml");
            std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
            println!("wrote {} scenes to {} in {:.1}s", scenes.len(), out.display(), t0.elapsed().as_secs_f64());
        }
        Command::Fit { cfg, data, out, views } => {
            let cfg = load_config(&cfg)?;
            let scenes = list_scenes(&data)?.iter().map(|d| load_scene(d)).collect::<Result<Vec<_>>>()?;
            let fits = fit_scenes(&scenes, views, &cfg.fit, cfg.train.seed)?;
            for (scene, (set, stats)) in scenes.iter().zip(&fits) {
                let dir = scenes_dir(&out).join(&scene.id);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                save_gaussians(dir.join("gaussians.bin"), set)?;
                let m = evaluate_scene(set, scene, &cfg.eval)?;
                let train_psnr = stats.view_psnr.iter().sum::<f64>() / stats.view_psnr.len().max(1) as f64;
                println!(
                    "scene={} train_psnr={train_psnr:.3} held_psnr={:.3} count={}",
                    scene.id,
                    m.psnr,
                    set.len()
                );
            }
        }
        Command::Train {
            cfg,
            data,
            out,
            resume,
            fitted,
        } => {
            let cfg = load_config(&cfg)?;
            let source = fitted.as_ref().unwrap_or(&data);
            let sets = list_scenes(source)?
                .iter()
                .map(|d| load_gaussians(d.join("gaussians.bin")))
                .collect::<Result<Vec<_>>>()?;
            let corpus = prepare_corpus(&sets, cfg.train.outlier_sigma)?;
            let masked: usize = corpus.iter().map(|s| s.len() - s.active_count()).sum();
            eprintln!("{} scenes, {masked} outlier rows masked, seed {}", corpus.len(), cfg.train.seed);
            let mut trainer = match resume {
                Some(p) => Trainer::resume(load_checkpoint(&p)?, cfg.schedule, cfg.train)?,
                None => Trainer::new(cfg.denoiser, cfg.schedule, cfg.train)?,
            };
            let dir = create_run_dir(&out, &cfg, "train")?;
            trainer.run(&corpus, Some(&dir))?;
            println!("checkpoint {}", dir.join("latest.ckpt").display());
        }
        Command::Sample {
            cfg,
            checkpoint,
            out,
            count,
        } => {
            let cfg = load_config(&cfg)?;
            let (weights, schedule) = load_model(&checkpoint, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let cam = cfg.dataset.rig.ring(1, 0.0)?.remove(0);
            for i in 0..count {
                let sampler = splatdiff::diffusion::SamplerConfig {
                    seed: cfg.sampler.seed + i as u64,
                    ..cfg.sampler
                };
                let set = sample_unconditional(&Denoiser::new(&weights, &schedule), &schedule, &sampler, cfg.denoiser.point_count)?;
                save_gaussians(out.join(format!("sample_{i:03}.bin")), &set)?;
                save_png(out.join(format!("sample_{i:03}.png")), &render(&set, &cam, cfg.guidance.background).image)?;
                println!("sample {i} seed {}", sampler.seed);
            }
        }
        Command::Reconstruct {
            cfg,
            checkpoint,
            data,
            out,
            views,
            evidence,
        } => {
            let cfg = load_config(&cfg)?;
            let (weights, schedule) = load_model(&checkpoint, &cfg)?;
            eprintln!("sampler seed {}", cfg.sampler.seed);
            if !evidence.is_empty() {
                let ev = evidence
                    .iter()
                    .map(|e| {
                        let parts: Vec<&str> = e.split(',').collect();
                        match parts.as_slice() {
                            [img, mask, cam] => load_view(Path::new(img), Path::new(mask), Path::new(cam), 1.0),
                            _ => Err(Error::Config(format!("evidence `{e}` is not image,mask,camera"))),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let r = reconstruct(&Denoiser::new(&weights, &schedule), &schedule, &ev, &cfg.sampler, &cfg.guidance, cfg.denoiser.point_count)?;
                std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                save_gaussians(out.join("gaussians.bin"), &r.set)?;
                println!("input_psnr={:.3}", input_view_psnr(&r.set, &ev, cfg.guidance.background)?);
                return Ok(());
            }
            let data = data.expect("clap enforces --data without --evidence");
            let mut rows = Vec::new();
            for d in list_scenes(&data)? {
                let scene = load_scene(&d)?;
                let r = reconstruct_scene(&Denoiser::new(&weights, &schedule), &schedule, &scene, views, &cfg, &cfg.sampler, &cfg.guidance)?;
                write_prediction(&scenes_dir(&out).join(&scene.id), &r.set, &scene, &cfg)?;
                let m = evaluate_scene(&r.set, &scene, &cfg.eval)?;
                let ev = evidence_views(&scene, views)?;
                println!(
                    "scene={} input_psnr={:.3} held_psnr={:.3}",
                    scene.id,
                    input_view_psnr(&r.set, &ev, cfg.guidance.background)?,
                    m.psnr
                );
                rows.push((scene.id.clone(), m));
            }
            let report = EvalReport::new(rows, cfg.fingerprint(), vec![cfg.sampler.seed])?;
            print!("{}", report.to_table());
        }
        Command::Render {
            gaussians,
            camera,
            out,
            background,
        } => {
            let set = load_gaussians(&gaussians)?;
            let cam = load_camera(&camera)?;
            save_png(&out, &render(&set, &cam, [background[0], background[1], background[2]]).image)?;
        }
        Command::Eval { cfg, pred, gt } => {
            let cfg = load_config(&cfg)?;
            let report = evaluate_dirs(&pred, &gt, &cfg, vec![cfg.dataset.seed, cfg.sampler.seed])?;
            print!("{}", report.to_table());
            print!("{}", report.to_lines());
        }
        Command::Sweep {
            cfg,
            checkpoint,
            data,
            scenes,
            views,
        } => {
            let cfg = load_config(&cfg)?;
            let (weights, schedule) = load_model(&checkpoint, &cfg)?;
            let dirs = list_scenes(&data)?;
            let chosen: Vec<_> = dirs.iter().rev().take(scenes).collect();
            println!("{:>10} {:>11} {:>10}", "lambda_gd", "input_psnr", "held_psnr");
            for &lambda in &cfg.sweep_lambdas {
                let guidance = GuidanceConfig {
                    lambda_gd: lambda,
                    ..cfg.guidance
                };
                let (mut ip, mut hp) = (0.0, 0.0);
                for d in &chosen {
                    let scene = load_scene(d)?;
                    let ev = evidence_views(&scene, views)?;
                    let r = reconstruct(&Denoiser::new(&weights, &schedule), &schedule, &ev, &cfg.sampler, &guidance, cfg.denoiser.point_count)?;
                    ip += input_view_psnr(&r.set, &ev, guidance.background)?;
                    hp += evaluate_scene(&r.set, &scene, &cfg.eval)?.psnr;
                }
                let n = chosen.len().max(1) as f64;
                println!("{lambda:>10} {:>11.3} {:>10.3}", ip / n, hp / n);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 3,
                ErrorKind::Io => 4,
                ErrorKind::Numeric => 5,
            })
        }
    }
}
