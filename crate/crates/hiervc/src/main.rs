use std::path::PathBuf;

use anyhow::{bail, Context};
use candle_core::Device;
use clap::{Parser, Subcommand};
use rand::SeedableRng;

use hiervc::config::Config;
use hiervc::data::make_extractor;
use hiervc::pipeline::{
    convert, evaluate, ConversionRequest, EvalBackends, EvalTriplet, SubprocessBackend,
};
use hiervc::trainer::TrainState;
use hiervc_core::manifest::{build_manifest, Manifest};
use hiervc_core::wave::{load_and_resample, save_wav};

#[derive(Parser)]
#[command(name = "hiervc", about = "Zero-shot voice style transfer: train, convert, evaluate")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a configuration preset to a TOML file.
    InitConfig {
        /// `desk` (CPU-sized) or `paper` (full-scale hyperparameters).
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scan a directory tree for WAV files and write a manifest.
    BuildManifest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic toy corpus (speech-like, multi-speaker).
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 20)]
        utts: usize,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
    /// Apply the information perturbation to one file.
    Perturb {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Extract content features for every manifest entry into a cache dir.
    ExtractFeatures {
        #[arg(long)]
        manifest: PathBuf,
        /// `stub` or `external`.
        #[arg(long, default_value = "stub")]
        backend: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train from a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured total number of steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Fine-tune a checkpoint on a single target utterance (conditional only).
    FineTune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
    },
    /// Convert a source utterance to a target speaker's style.
    Convert {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Additional style references, averaged with the target.
        #[arg(long)]
        extra_refs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.667)]
        temperature_l: f64,
        #[arg(long, default_value_t = 0.667)]
        temperature_a: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert and score a manifest of {source, target} pairs.
    Eval {
        /// JSONL rows: {"utt_id"?, "source", "target", "transcript"?}
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(serde::Deserialize)]
struct EvalRow {
    #[serde(default)]
    utt_id: Option<String>,
    source: PathBuf,
    target: PathBuf,
    #[serde(default)]
    transcript: Option<String>,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let device = Device::Cpu;
    match cli.cmd {
        Cmd::InitConfig { scale, out } => {
            let cfg = match scale.as_str() {
                "desk" => Config::desk_scale(),
                "paper" => Config::paper_scale(),
                other => bail!("unknown scale {other:?}; expected desk or paper"),
            };
            cfg.save(&out)?;
            println!("wrote {scale} config to {}", out.display());
        }
        Cmd::BuildManifest { root, out } => {
            let (manifest, skip) = build_manifest(&root)?;
            manifest.save(&out)?;
            println!("{} entries -> {}", manifest.len(), out.display());
            for (path, reason) in skip.skipped {
                eprintln!("skipped {}: {reason}", path.display());
            }
        }
        Cmd::SynthCorpus { out, speakers, utts, seconds, seed } => {
            let n_samples = (seconds * 16000.0) as usize;
            hiervc_core::synth::write_toy_corpus(&out, speakers, utts, n_samples, 16000, seed)?;
            println!("wrote {speakers} speakers x {utts} utterances to {}", out.display());
        }
        Cmd::Perturb { input, out, seed, config } => {
            let cfg = match config {
                Some(p) => Config::load(p)?,
                None => Config::desk_scale(),
            };
            let wave = load_and_resample(&input, cfg.audio.sample_rate)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let perturbed = hiervc_core::perturb::perturb(&wave, &cfg.perturb, &mut rng)?;
            save_wav(&out, &perturbed)?;
            println!("perturbed {} -> {}", input.display(), out.display());
        }
        Cmd::ExtractFeatures { manifest, backend, out_dir, config } => {
            let mut cfg = match config {
                Some(p) => Config::load(p)?,
                None => Config::desk_scale(),
            };
            cfg.content.backend = backend;
            cfg.validate()?;
            let manifest = Manifest::load(&manifest)?;
            let extractor = make_extractor(&cfg.content)?;
            std::fs::create_dir_all(&out_dir)?;
            for rec in &manifest.records {
                let wave = load_and_resample(&rec.path, cfg.audio.sample_rate)?;
                let feats = extractor.extract(&wave)?;
                let path = out_dir.join(format!("{}.feat", rec.utt_id));
                hiervc_core::content::write_feature_record(&path, &rec.utt_id, &feats)?;
            }
            println!("cached {} records in {}", manifest.len(), out_dir.display());
        }
        Cmd::Train { config, data_manifest, out_dir, resume, steps } => {
            let manifest = Manifest::load(&data_manifest)?;
            let mut state = match resume {
                Some(ckpt) => TrainState::load_checkpoint(&ckpt, &device)?,
                None => TrainState::new(&Config::load(&config)?, &device)?,
            };
            let total = steps.unwrap_or(state.cfg.train.total_steps);
            let remaining = total.saturating_sub(state.step);
            let mut data_rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(state.cfg.train.seed ^ 0xda7a);
            let dataset = hiervc::data::TrainDataset::load(&state.cfg, &manifest, &mut data_rng)?;
            println!(
                "training on {} utterances for {remaining} steps (starting at step {})",
                dataset.len(),
                state.step
            );
            state.fit(&dataset, remaining, Some(&out_dir), |step, losses| {
                if step % 50 == 0 || step < 10 {
                    println!(
                        "step {step}: stft {:.4} pitch {:.4} kl_l {:.4} kl_a {:.4} \
                         prosody {:.4} adv_g {:.4} adv_d {:.4} fm {:.4}",
                        losses.stft,
                        losses.pitch,
                        losses.kl_linguistic,
                        losses.kl_acoustic,
                        losses.prosody,
                        losses.adv_gen,
                        losses.adv_disc,
                        losses.feat_match
                    );
                }
            })?;
            let final_path = out_dir.join("final.ckpt");
            state.save_checkpoint(&final_path)?;
            println!("saved {}", final_path.display());
        }
        Cmd::FineTune { ckpt, target, out, steps, lr } => {
            let mut state = TrainState::load_checkpoint(&ckpt, &device)?;
            let wave = load_and_resample(&target, state.cfg.audio.sample_rate)?;
            state.fine_tune_one_shot(&wave, steps, lr)?;
            state.save_checkpoint(&out)?;
            println!("fine-tuned {steps} steps -> {}", out.display());
        }
        Cmd::Convert {
            source,
            target,
            ckpt,
            out,
            extra_refs,
            temperature_l,
            temperature_a,
            seed,
        } => {
            let state = TrainState::load_checkpoint(&ckpt, &device)?;
            let req = ConversionRequest {
                source_path: source,
                target_path: target,
                extra_refs,
                temperature_l,
                temperature_a,
                seed,
            };
            let wave = convert(&state, &req)?;
            save_wav(&out, &wave)?;
            println!("wrote {} ({:.2} s)", out.display(), wave.duration_secs());
        }
        Cmd::Eval { manifest, ckpt, report } => {
            let state = TrainState::load_checkpoint(&ckpt, &device)?;
            let text = std::fs::read_to_string(&manifest)
                .with_context(|| format!("read {}", manifest.display()))?;
            let mut triplets = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let row: EvalRow = serde_json::from_str(line)
                    .with_context(|| format!("{}:{}", manifest.display(), i + 1))?;
                let req = ConversionRequest {
                    source_path: row.source.clone(),
                    target_path: row.target.clone(),
                    extra_refs: vec![],
                    temperature_l: state.cfg.eval.temperature_l,
                    temperature_a: state.cfg.eval.temperature_a,
                    seed: state.cfg.eval.seed.wrapping_add(i as u64),
                };
                let converted = convert(&state, &req)?;
                triplets.push(EvalTriplet {
                    utt_id: row.utt_id.unwrap_or_else(|| format!("pair{i:04}")),
                    converted,
                    target: load_and_resample(&row.target, state.cfg.audio.sample_rate)?,
                    source: load_and_resample(&row.source, state.cfg.audio.sample_rate)?,
                    transcript: row.transcript,
                });
            }
            let backends = EvalBackends {
                asr: if state.cfg.eval.asr_command.is_empty() {
                    None
                } else {
                    Some(Box::new(SubprocessBackend {
                        command: state.cfg.eval.asr_command.clone(),
                    }))
                },
                speaker: if state.cfg.eval.speaker_command.is_empty() {
                    None
                } else {
                    Some(Box::new(SubprocessBackend {
                        command: state.cfg.eval.speaker_command.clone(),
                    }))
                },
            };
            let result = evaluate(&state, &triplets, &backends)?;
            let json = serde_json::to_string_pretty(&result)?;
            std::fs::write(&report, &json)?;
            println!(
                "evaluated {} pairs; mean style-cos to target {:.4}, to source {:.4}",
                result.aggregate.n,
                result.aggregate.mean_style_cos_to_target,
                result.aggregate.mean_style_cos_to_source
            );
        }
    }
    Ok(())
}
