//! `sdf` command-line tool: dataset generation, training, sampling, the
//! multi-stage upscaling pipeline, statistics, and gradient verification.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. All randomness is
//! governed by `--seed`; `--threads 1` is the determinism reference (dataset
//! generation and batch training are deterministic at any thread count).
//! When `SDF_HOME` is set, relative input/output paths resolve under it.

use clap::{Parser, Subcommand};
use sdf_cli::checkpoint;
use sdf_cli::config::{DataGenConfig, TrainConfig};
use sdf_cli::dataset;
use sdf_cli::error::{CliError, Result};
use sdf_cli::evalstats;
use sdf_cli::fsutil;
use sdf_cli::gradcheck;
use sdf_cli::manifest::RunManifest;
use sdf_cli::pgm;
use sdf_cli::pngout;
use sdf_cli::sampler::{self, PromptSource, SampleRequest};
use sdf_cli::trainer;
use sdf_cli::upscale;
use sdf_core::text;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "sdf", version, about = "desk-scale latent-diffusion stack for SAR-like imagery")]
struct Cli {
    /// Master seed; every random draw derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel sections (1 = fully serial).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speckled dataset with paired reflectivity maps.
    DataGen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the VAE from scratch.
    TrainVae {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the base noise-prediction network on frozen-VAE latents.
    TrainDenoiser {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        vae: PathBuf,
    },
    /// Train a control branch against a frozen trunk.
    TrainControl {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        /// base denoiser checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train low-rank adapters over a frozen base denoiser.
    FinetuneLora {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate images from a trained model.
    Sample {
        /// denoiser checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        /// adapter checkpoint to merge before sampling
        #[arg(long)]
        lora: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// sampler steps (defaults to the full schedule)
        #[arg(long)]
        steps: Option<usize>,
        /// output image side in pixels (must be divisible by 8)
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// fixed prompt words, whitespace separated
        #[arg(long)]
        prompt: Option<String>,
        /// draw prompts from a dataset manifest instead
        #[arg(long)]
        captions_from: Option<PathBuf>,
        /// restrict drawn captions to one tier
        #[arg(long)]
        tier: Option<String>,
        /// also write 8-bit PNG previews
        #[arg(long, default_value_t = false)]
        png: bool,
    },
    /// Run the multi-stage creative-upscaling pipeline.
    Upscale {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        dump_intermediates: Option<PathBuf>,
    },
    /// Image-set statistics, optionally against a reference set.
    EvalStats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        tier: Option<String>,
        /// write the JSON report here (defaults next to the input)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference verification of every gradient path.
    GradCheck {
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn hash_config_file(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => Ok(fsutil::sha256_hex(&fsutil::read_bytes(p)?)),
        None => Ok(fsutil::sha256_hex(b"defaults")),
    }
}

fn finish(
    mut man: RunManifest,
    dir: &Path,
    artifacts: &[PathBuf],
    started: Instant,
) -> Result<()> {
    man.wall_time_secs = started.elapsed().as_secs_f64();
    man.with_artifacts(artifacts).write(dir)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let started = Instant::now();
    let seed = cli.seed;
    let threads = cli.threads.max(1);

    match cli.command {
        Command::DataGen { config, output } => {
            let output = fsutil::resolve(&output);
            let cfg: DataGenConfig = match &config {
                Some(path) => sdf_cli::config::load_json(&fsutil::resolve(path))?,
                None => DataGenConfig::default(),
            };
            let seed = seed.unwrap_or(0);
            let records = dataset::make_dataset(&cfg, seed, &output, threads)?;
            println!(
                "wrote {} tiles ({} scenes) to {}",
                records.len(),
                cfg.scenes,
                output.display()
            );
            let man = RunManifest::new("data-gen", hash_config_file(config.as_deref())?, seed, threads);
            finish(man, &output, &dataset::artifact_paths(&output, &records), started)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainVae { config, dataset: ds, output } => {
            train_command("train-vae", &config, &ds, &output, None, None, seed, threads, started)
        }
        Command::TrainDenoiser { config, dataset: ds, output, vae } => train_command(
            "train-denoiser",
            &config,
            &ds,
            &output,
            Some(&vae),
            None,
            seed,
            threads,
            started,
        ),
        Command::TrainControl { config, dataset: ds, output, vae, checkpoint } => train_command(
            "train-control",
            &config,
            &ds,
            &output,
            Some(&vae),
            Some(&checkpoint),
            seed,
            threads,
            started,
        ),
        Command::FinetuneLora { config, dataset: ds, output, vae, checkpoint } => train_command(
            "finetune-lora",
            &config,
            &ds,
            &output,
            Some(&vae),
            Some(&checkpoint),
            seed,
            threads,
            started,
        ),
        Command::Sample {
            checkpoint: ckpt,
            vae,
            lora,
            output,
            count,
            steps,
            size,
            prompt,
            captions_from,
            tier,
            png,
        } => {
            let output = fsutil::resolve(&output);
            if size % 8 != 0 {
                return Err(CliError::Run(format!("--size {size} must be divisible by 8")));
            }
            let (mut denoiser, sched_json) = checkpoint::load_denoiser(&fsutil::resolve(&ckpt))?;
            if let Some(lora_path) = &lora {
                let (adapters, base_hash) = checkpoint::load_lora(&fsutil::resolve(lora_path))?;
                if !base_hash.is_empty() {
                    let actual = fsutil::sha256_hex(&fsutil::read_bytes(&fsutil::resolve(&ckpt))?);
                    if actual != base_hash {
                        return Err(CliError::Run(
                            "LoRA adapter was trained against a different base checkpoint".into(),
                        ));
                    }
                }
                denoiser = sdf_core::lora::merge_lora(&denoiser, &adapters)?;
            }
            let (vae_params, latent_scale) = checkpoint::load_vae(&fsutil::resolve(&vae))?;
            let schedule = sched_json.schedule()?;
            let mode = sched_json.variance()?;
            let prompts = match (&prompt, &captions_from) {
                (Some(words), _) => {
                    let split: Vec<&str> = words.split_whitespace().collect();
                    PromptSource::Fixed(text::sequence_ids(&text::tokenize(&split)))
                }
                (None, Some(dir)) => {
                    let manifest = dataset::read_manifest(&fsutil::resolve(dir))?;
                    let pool: Vec<_> = manifest
                        .iter()
                        .filter(|r| tier.as_deref().map(|t| t == r.tier).unwrap_or(true))
                        .map(|r| {
                            let words: Vec<&str> = r.caption.iter().map(|s| s.as_str()).collect();
                            text::sequence_ids(&text::tokenize(&words))
                        })
                        .collect();
                    if pool.is_empty() {
                        return Err(CliError::Run("no captions matched in the manifest".into()));
                    }
                    PromptSource::Pool(pool)
                }
                (None, None) => {
                    let words = sdf_core::pipeline::default_prompt();
                    let split: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
                    PromptSource::Fixed(text::sequence_ids(&text::tokenize(&split)))
                }
            };
            let seed = seed.unwrap_or(0);
            let req = SampleRequest {
                count,
                steps: steps.unwrap_or(schedule.len()),
                latent_hw: (size / 8, size / 8),
                seed,
                threads,
            };
            let images = sampler::generate(&denoiser, &schedule, mode, &vae_params, latent_scale, &prompts, &req)?;
            let mut artifacts = Vec::new();
            for (k, img) in images.iter().enumerate() {
                let p = output.join(format!("sample_{k:04}.pgm"));
                pgm::write_pgm(&p, img, true)?;
                artifacts.push(p);
                if png {
                    let p = output.join(format!("sample_{k:04}.png"));
                    pngout::write_png_gray(&p, img, false)?;
                    artifacts.push(p);
                }
            }
            println!("wrote {} samples to {}", images.len(), output.display());
            let man = RunManifest::new("sample", fsutil::sha256_hex(b"sample"), seed, threads);
            finish(man, &output, &artifacts, started)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Upscale { config, input, output, dump_intermediates } => {
            let config = fsutil::resolve(&config);
            let input = fsutil::resolve(&input);
            let output = fsutil::resolve(&output);
            let dump = dump_intermediates.map(|d| fsutil::resolve(&d));
            let artifacts = upscale::run(&config, &input, &output, dump.as_deref())?;
            println!("wrote {}", output.display());
            let dir = output.parent().unwrap_or(Path::new(".")).to_path_buf();
            let man = RunManifest::new(
                "upscale",
                hash_config_file(Some(&config))?,
                seed.unwrap_or(0),
                threads,
            );
            finish(man, &dir, &artifacts, started)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::EvalStats { input, reference, tier, output } => {
            let input = fsutil::resolve(&input);
            let images = evalstats::load_images(&input, tier.as_deref())?;
            let reference_images = match &reference {
                Some(dir) => Some(evalstats::load_images(&fsutil::resolve(dir), tier.as_deref())?),
                None => None,
            };
            let report = evalstats::stats_for(&images, reference_images.as_deref())?;
            let json = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Run(e.to_string()))?;
            println!("{}", String::from_utf8_lossy(&json));
            let out_path = output
                .map(|p| fsutil::resolve(&p))
                .unwrap_or_else(|| input.join("stats.json"));
            fsutil::write_atomic(&out_path, &json)?;
            let dir = out_path.parent().unwrap_or(Path::new(".")).to_path_buf();
            let man = RunManifest::new("eval-stats", fsutil::sha256_hex(b"eval-stats"), seed.unwrap_or(0), threads);
            finish(man, &dir, &[out_path], started)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck { output } => {
            let results = gradcheck::run_suite(seed.unwrap_or(7))?;
            let mut all_pass = true;
            let mut lines = String::new();
            for r in &results {
                let status = if r.pass() { "PASS" } else { "FAIL" };
                let line = format!(
                    "{status} {:<24} max_rel_err {:.3e} (threshold {:.0e})",
                    r.name, r.max_rel_err, r.threshold
                );
                println!("{line}");
                lines.push_str(&line);
                lines.push('\n');
                all_pass &= r.pass();
            }
            let dir = match &output {
                Some(p) => {
                    let p = fsutil::resolve(p);
                    fsutil::write_atomic(&p, lines.as_bytes())?;
                    p.parent().unwrap_or(Path::new(".")).to_path_buf()
                }
                None => PathBuf::from("."),
            };
            let man = RunManifest::new("grad-check", fsutil::sha256_hex(b"grad-check"), seed.unwrap_or(7), threads);
            finish(man, &dir, &[], started)?;
            if all_pass {
                Ok(ExitCode::SUCCESS)
            } else {
                Err(CliError::Run("gradient verification failed".into()))
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_command(
    name: &str,
    config: &Path,
    ds: &Path,
    output: &Path,
    vae: Option<&Path>,
    base: Option<&Path>,
    seed: Option<u64>,
    threads: usize,
    started: Instant,
) -> Result<ExitCode> {
    let config = fsutil::resolve(config);
    let ds = fsutil::resolve(ds);
    let output = fsutil::resolve(output);
    let vae = vae.map(fsutil::resolve);
    let base = base.map(fsutil::resolve);
    let cfg: TrainConfig = sdf_cli::config::load_json(&config)?;
    let expected_target = match name {
        "train-vae" => "vae",
        "train-denoiser" => "denoiser",
        "train-control" => "control",
        _ => "lora",
    };
    if cfg.target != expected_target {
        return Err(CliError::Config(format!(
            "{name}: config target is `{}`, expected `{expected_target}`",
            cfg.target
        )));
    }
    let seed = seed.unwrap_or(cfg.seed);
    let outcome = trainer::train(&cfg, &ds, &output, vae.as_deref(), base.as_deref(), seed, threads)?;
    println!(
        "{name}: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
        cfg.steps,
        outcome.first_window_mean,
        outcome.last_window_mean,
        outcome.final_checkpoint.display()
    );
    let man = RunManifest::new(name, hash_config_file(Some(&config))?, seed, threads);
    finish(man, &output, &outcome.artifacts, started)?;
    Ok(ExitCode::SUCCESS)
}
