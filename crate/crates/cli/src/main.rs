use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use specref_core::config::BackendKind;
use specref_core::controller::{edit_latents, extract_reference, invert_source, EditPlan};
use specref_core::io::{
    latent_checksum, read_kv_cache, read_maps, read_pgm, read_ppm, read_trajectory, write_kv_cache,
    write_maps, write_ppm, write_tensor, write_trajectory,
};
use specref_core::masks::load_source_mask;
use specref_core::selftest::{run_selftest, SelfTestOptions};
use specref_core::{
    EditOutcome, NoisePredictor, Result, RunConfig, SpecRefError, TextEmbedding, ToyBackend, ZeroNoise,
};

#[derive(Parser)]
#[command(name = "specref", version, about = "Reference-guided latent editing on a toy diffusion backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert a source image and record its trajectory and cross-attention maps.
    Invert {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_traj: PathBuf,
        #[arg(long)]
        out_maps: PathBuf,
    },
    /// Invert a reference image and record its self-attention keys and values.
    ExtractRef {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_kv: PathBuf,
    },
    /// Run the editing stage and write the edited image.
    Edit {
        #[arg(long)]
        src_traj: PathBuf,
        #[arg(long)]
        src_maps: PathBuf,
        #[arg(long)]
        ref_kv: PathBuf,
        #[arg(long, default_value = "")]
        source_prompt: String,
        #[arg(long)]
        target_prompt: String,
        /// Word of the target prompt (or its 0-based position) to edit.
        #[arg(long)]
        edit_token: String,
        /// Word of the source prompt (or its 0-based position) being replaced.
        #[arg(long)]
        source_token: String,
        /// Grayscale PGM selecting the object in the reference image.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the built-in properties and print one line per property.
    Selftest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        sentinel_override: Option<f32>,
    },
}

fn predictor(cfg: &RunConfig) -> Result<(ToyBackend, Box<dyn NoisePredictor>)> {
    let backend = ToyBackend::new(cfg.backend_config())?;
    let predictor: Box<dyn NoisePredictor> = match cfg.backend {
        BackendKind::Toy => Box::new(backend.clone()),
        BackendKind::Zero => Box::new(ZeroNoise(backend.clone())),
    };
    Ok((backend, predictor))
}

fn resolve_token(arg: &str, prompt: &str, embedding: &TextEmbedding, which: &str) -> Result<usize> {
    if let Ok(index) = arg.parse::<usize>() {
        return Ok(index);
    }
    prompt
        .split_whitespace()
        .take(embedding.seq_len())
        .position(|w| w == arg)
        .ok_or_else(|| SpecRefError::InvalidRequest(format!("{which} token {arg:?} not found in {prompt:?}")))
}

fn cmd_invert(image: &Path, prompt: &str, config: &Path, out_traj: &Path, out_maps: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (backend, predictor) = predictor(&cfg)?;
    let latent = backend.encode_image(&read_ppm(image)?)?;
    let (traj, maps) =
        invert_source(&latent, &backend.embed_text(prompt), &cfg.schedule()?, predictor.as_ref())?;
    write_trajectory(out_traj, &traj)?;
    write_maps(out_maps, &maps)?;
    println!("steps {} final-latent crc32 {:08x}", traj.steps(), latent_checksum(traj.last()));
    Ok(())
}

fn cmd_extract_ref(image: &Path, prompt: &str, config: &Path, out_kv: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (backend, predictor) = predictor(&cfg)?;
    let latent = backend.encode_image(&read_ppm(image)?)?;
    let cache =
        extract_reference(&latent, &backend.embed_text(prompt), &cfg.schedule()?, predictor.as_ref())?;
    write_kv_cache(out_kv, &cache)?;
    println!("entries {}", cache.len());
    Ok(())
}

fn write_dumps(dir: &Path, outcome: &EditOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    for state in outcome.trajectory.states() {
        write_tensor(dir.join(format!("latent_{:04}.sprf", state.timestep)), &state.data.clone().into_dyn())?;
    }
    for step in &outcome.diagnostics.steps {
        write_tensor(
            dir.join(format!("target_mask_{:04}.sprf", step.t)),
            &step.target_mask.clone().into_dyn(),
        )?;
        write_tensor(
            dir.join(format!("blend_mask_{:04}.sprf", step.t)),
            &step.blend_mask.clone().into_dyn(),
        )?;
    }
    Ok(())
}

struct EditArgs<'a> {
    src_traj: &'a Path,
    src_maps: &'a Path,
    ref_kv: &'a Path,
    source_prompt: &'a str,
    target_prompt: &'a str,
    edit_token: &'a str,
    source_token: &'a str,
    mask: &'a Path,
    config: &'a Path,
    out: &'a Path,
}

fn cmd_edit(a: EditArgs<'_>) -> Result<()> {
    let cfg = RunConfig::load(a.config)?;
    let schedule = cfg.schedule()?;
    let (backend, predictor) = predictor(&cfg)?;
    let trajectory = read_trajectory(a.src_traj)?;
    let maps = read_maps(a.src_maps)?;
    let reference = read_kv_cache(a.ref_kv)?;

    let (_, h, w) = backend.latent_shape();
    let source_mask = load_source_mask(&read_pgm(a.mask)?, (h, w), predictor.sites())?;
    let source_embedding = backend.embed_text(a.source_prompt);
    let target_embedding = backend.embed_text(a.target_prompt);
    let source_token = resolve_token(a.source_token, a.source_prompt, &source_embedding, "source")?;
    let edit_token = resolve_token(a.edit_token, a.target_prompt, &target_embedding, "edit")?;

    let options = cfg.edit_options();
    let plan = EditPlan {
        source_trajectory: &trajectory,
        source_maps: &maps,
        reference: &reference,
        source_embedding: &source_embedding,
        target_embedding: &target_embedding,
        source_token,
        edit_token,
        source_mask: &source_mask,
        gating: cfg.gating(),
        options: &options,
    };
    let outcome = edit_latents(predictor.as_ref(), &schedule, &plan)?;
    write_ppm(a.out, &backend.decode_latent(outcome.trajectory.first())?)?;
    if let Some(dir) = &cfg.dump_dir {
        write_dumps(dir, &outcome)?;
    }
    println!(
        "edited-latent crc32 {:08x} evaluations {}+{}",
        latent_checksum(outcome.trajectory.first()),
        outcome.diagnostics.editing_evaluations,
        outcome.diagnostics.reconstruction_evaluations
    );
    Ok(())
}

fn cmd_selftest(config: Option<&Path>, sentinel: Option<f32>) -> Result<bool> {
    let cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse(&RunConfig::default_text(0))?,
    };
    let mut opts = SelfTestOptions::default();
    if let Some(s) = sentinel {
        opts.sentinel = s;
    }
    let results = run_selftest(&cfg, opts)?;
    for r in &results {
        if r.passed {
            println!("PASS {}", r.name);
        } else {
            println!("FAIL {} ({})", r.name, r.detail);
        }
    }
    Ok(results.iter().all(|r| r.passed))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Invert { image, prompt, config, out_traj, out_maps } => {
            cmd_invert(&image, &prompt, &config, &out_traj, &out_maps)?
        }
        Command::ExtractRef { image, prompt, config, out_kv } => {
            cmd_extract_ref(&image, &prompt, &config, &out_kv)?
        }
        Command::Edit {
            src_traj,
            src_maps,
            ref_kv,
            source_prompt,
            target_prompt,
            edit_token,
            source_token,
            mask,
            config,
            out,
        } => cmd_edit(EditArgs {
            src_traj: &src_traj,
            src_maps: &src_maps,
            ref_kv: &ref_kv,
            source_prompt: &source_prompt,
            target_prompt: &target_prompt,
            edit_token: &edit_token,
            source_token: &source_token,
            mask: &mask,
            config: &config,
            out: &out,
        })?,
        Command::Selftest { config, sentinel_override } => {
            return cmd_selftest(config.as_deref(), sentinel_override)
        }
    }
    Ok(true)
}

/// Exit status when the self-test finds a failing property.
const SELFTEST_FAILED: u8 = 1;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(SELFTEST_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
