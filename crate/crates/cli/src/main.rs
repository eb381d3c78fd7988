//! `plmix` — corpus generation, stage-wise training, evaluation, gradient
//! checking, and the benchmark suites, driven by one declarative TOML
//! config.
//!
//! Exit codes: 0 success, 1 config error, 2 runtime failure, 3 assertion
//! failure (suite `--assert` and `grad-check`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};

use plmix_core::config::ExperimentConfig;
use plmix_core::container;
use plmix_core::corpus::{make_split, CorpusSplit};
use plmix_core::error::Error as CoreError;
use plmix_core::gradcheck;
use plmix_core::harness::results::{
    append_aggregates, write_curve, write_manifest, write_results_csv, SuiteManifest,
};
use plmix_core::harness::suites::{run_suite, SuiteKind};
use plmix_core::harness::{eval_model_per, eval_oracle_floor, pseudo_corpus_per};
use plmix_core::model::SynthModel;
use plmix_core::pipeline::{
    finetune, mix_pretrain, train_embedding_generator, StageManifest,
};
use plmix_core::pseudolabel::{pseudo_label, train_frame_classifier};

#[derive(Parser)]
#[command(name = "plmix", about = "Synthetic-language lab for pseudo-label-mixing TTS adaptation", version)]
struct Cli {
    /// Declarative experiment config (TOML). Defaults are used if omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; each command writes into a content-addressed
    /// subdirectory derived from the config hash.
    #[arg(short, long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Override the config's world seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker-pool size for suite cells (0 = one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus split and write it as container files.
    GenCorpus,
    /// Mix pretraining on the source languages.
    Pretrain {
        /// Corpus directory written by gen-corpus.
        #[arg(long)]
        corpus: PathBuf,
        /// Force p_repr = 0 (the no-mix-pretraining baseline).
        #[arg(long)]
        no_mix: bool,
    },
    /// Second pretraining stage: learn the embedding generator.
    TrainGenerator {
        #[arg(long)]
        corpus: PathBuf,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the frame classifier and label the unpaired speech.
    PseudoLabel {
        #[arg(long)]
        corpus: PathBuf,
        /// Labeled utterances for the classifier (defaults to the config's
        /// fine-tune shot count).
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Fine-tune a checkpoint on the labeled shots plus a pseudo corpus.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pseudo corpus file; omit for plain few-shot fine-tuning.
        #[arg(long)]
        pseudo: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's PER on the corpus eval set.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a benchmark suite and write results.csv + manifest.json.
    Suite {
        /// table2 | table4 | table5 | fig3
        name: String,
        /// Exit 3 if any trend check fails.
        #[arg(long, action = clap::ArgAction::SetTrue)]
        assert: bool,
    },
    /// Finite-difference validation of every layer type and the composed
    /// model; exits 3 if any exceeds tolerance.
    GradCheck {
        /// Number of random seeds to sweep.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Print the resolved config (defaults merged with the config file).
    PrintConfig,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CoreError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CoreError::io(path.display().to_string(), e))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.world_seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Content-addressed run directory for a command.
fn run_dir(out: &Path, command: &str, cfg: &ExperimentConfig) -> PathBuf {
    out.join(format!("{command}-{}", &cfg.hash()[..12]))
}

fn write_stage_manifest(dir: &Path, stage: &str, cfg: &ExperimentConfig, seed: u64) -> Result<(), CoreError> {
    let manifest = StageManifest {
        format_version: plmix_core::config::CONFIG_FORMAT_VERSION,
        stage: stage.to_string(),
        config_hash: cfg.hash(),
        world_seed: cfg.world_seed,
        seed,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
    std::fs::write(&path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn load_split(corpus: &Path) -> Result<CorpusSplit, CoreError> {
    container::load_corpus(corpus)
}

fn run(cli: &Cli) -> Result<i32, CoreError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenCorpus => {
            let split = make_split(cfg.world_seed, &cfg.corpus)?;
            let dir = run_dir(&cli.out, "corpus", &cfg);
            container::save_corpus(&dir, &split)?;
            write_stage_manifest(&dir, "gen-corpus", &cfg, cfg.corpus.split_seed)?;
            println!(
                "corpus: {} source langs, {} shots, {} unpaired utts ({} frames), {} eval -> {}",
                split.source_langs.len(),
                split.d_target.len(),
                split.unpaired.len(),
                split.unpaired_frames(),
                split.eval.len(),
                dir.display()
            );
            Ok(0)
        }
        Command::Pretrain { corpus, no_mix } => {
            let split = load_split(corpus)?;
            let mut pcfg = cfg.pretrain.clone();
            if *no_mix {
                pcfg.p_repr = 0.0;
            }
            let mut model = SynthModel::new(cfg.model.clone(), pcfg.seed)?;
            let report = mix_pretrain(&mut model, &split, &pcfg)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let dir = run_dir(&cli.out, if *no_mix { "pretrain-nomix" } else { "pretrain" }, &cfg);
            let path = dir.join("pretrain.plx");
            container::save_model(&path, &model)?;
            write_stage_manifest(&dir, "pretrain", &cfg, pcfg.seed)?;
            println!(
                "pretrained (p_repr {}): final loss {:.6}, branches phn/repr {}/{} -> {}",
                pcfg.p_repr,
                report.final_loss,
                report.phoneme_branch_count,
                report.repr_branch_count,
                path.display()
            );
            Ok(0)
        }
        Command::TrainGenerator { corpus, checkpoint } => {
            let split = load_split(corpus)?;
            let mut model = container::load_model(checkpoint)?;
            let report = train_embedding_generator(&mut model, &split, &cfg.generator)?;
            let dir = run_dir(&cli.out, "generator", &cfg);
            let path = dir.join("generator.plx");
            container::save_model(&path, &model)?;
            write_stage_manifest(&dir, "train-generator", &cfg, cfg.generator.seed)?;
            println!(
                "generator trained: final query loss {:.6} -> {}",
                report.final_loss,
                path.display()
            );
            Ok(0)
        }
        Command::PseudoLabel { corpus, shots } => {
            let split = load_split(corpus)?;
            let shots = shots.unwrap_or(cfg.finetune.shots);
            let seed = plmix_core::seeds::derive(cfg.corpus.split_seed, "cls", shots as u64);
            let cls = train_frame_classifier(&split, shots, &cfg.classifier, seed)?;
            let pseudo = pseudo_label(&cls, &split)?;
            let per = pseudo_corpus_per(&pseudo, &split)?;
            let dir = run_dir(&cli.out, "pseudo", &cfg);
            let path = dir.join(format!("pseudo-{shots}shot.plx"));
            container::save_pseudo(&path, split.world_seed, &pseudo)?;
            write_stage_manifest(&dir, "pseudo-label", &cfg, seed)?;
            println!(
                "pseudo corpus: {} utterances, PER vs withheld truth {:.4} -> {}",
                pseudo.utterances.len(),
                per,
                path.display()
            );
            Ok(0)
        }
        Command::Finetune { corpus, checkpoint, pseudo } => {
            let split = load_split(corpus)?;
            let mut model = container::load_model(checkpoint)?;
            let pseudo_corpus = match pseudo {
                Some(p) => Some(container::load_pseudo(p)?.1),
                None => None,
            };
            let report = finetune(&mut model, &split, pseudo_corpus.as_ref(), &cfg.finetune)?;
            let dir = run_dir(&cli.out, "finetune", &cfg);
            let path = dir.join("finetuned.plx");
            container::save_model(&path, &model)?;
            write_stage_manifest(&dir, "finetune", &cfg, cfg.finetune.seed)?;
            println!(
                "fine-tuned: lambda {:.4}, pseudo kept {}/{}, final loss {:.6} -> {}",
                report.threshold,
                report.kept_pseudo,
                report.total_pseudo,
                report.final_loss,
                path.display()
            );
            Ok(0)
        }
        Command::Eval { corpus, checkpoint } => {
            let split = load_split(corpus)?;
            let model = container::load_model(checkpoint)?;
            let per = eval_model_per(&model, &split)?;
            let floor = eval_oracle_floor(&split)?;
            println!("eval PER {per:.4} over {} utterances (oracle floor {floor:.4})", split.eval.len());
            Ok(0)
        }
        Command::Suite { name, assert } => {
            let kind = SuiteKind::parse(name)?;
            let started = now_ms();
            let output = run_suite(kind, &cfg)?;
            let mut rows = output.rows.clone();
            append_aggregates(&mut rows);
            let dir = run_dir(&cli.out, &format!("suite-{}", kind.name()), &cfg);
            write_results_csv(&dir.join("results.csv"), &rows)?;
            for (method, shots, points) in &output.curves {
                write_curve(&dir.join("curves").join(format!("{method}_{shots}shot.dat")), points)?;
            }
            let manifest = SuiteManifest {
                format_version: plmix_core::config::CONFIG_FORMAT_VERSION,
                suite: kind.name().to_string(),
                config_hash: cfg.hash(),
                world_seed: cfg.world_seed,
                seeds: cfg.seeds.clone(),
                started_unix_ms: started,
                finished_unix_ms: now_ms(),
                cells: output.cells.clone(),
                checks: output.checks.clone(),
                config: cfg.clone(),
            };
            write_manifest(&dir.join("manifest.json"), &manifest)?;
            let errors = output.cells.iter().filter(|c| c.status != "ok").count();
            println!("suite {}: {} rows, {} cells ({errors} errors) -> {}", kind.name(), rows.len(), output.cells.len(), dir.display());
            let mut failed = false;
            for check in &output.checks {
                println!(
                    "  [{}] {} — {}",
                    if check.passed { "pass" } else { "FAIL" },
                    check.name,
                    check.detail
                );
                if !check.passed {
                    failed = true;
                }
            }
            if *assert && failed {
                return Ok(3);
            }
            Ok(0)
        }
        Command::GradCheck { seeds } => {
            let mut failed = false;
            for seed in 1..=*seeds {
                for (name, worst) in gradcheck::layer_suite(seed)? {
                    let tol = gradcheck::tolerance_for(&name);
                    let ok = worst < tol;
                    if !ok {
                        failed = true;
                    }
                    println!(
                        "seed {seed:>3} {name:<30} max rel err {worst:>12.3e} (tol {tol:.0e}) {}",
                        if ok { "ok" } else { "FAIL" }
                    );
                }
            }
            Ok(if failed { 3 } else { 0 })
        }
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests print and exit cleanly
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                CoreError::Config(_) | CoreError::Argument(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
