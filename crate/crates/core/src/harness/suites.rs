//! The four benchmark suites: strategy-combination grid, mixing-function
//! grid, pseudo-label-quality grid, and the data-variation grid with its
//! per-curve plot files.
//!
//! Pretraining runs once per suite (the adaptation runs re-draw the target
//! split and fine-tuning streams per seed), checkpoints are cloned into each
//! cell, and rows are sorted before writing so reruns are byte-identical.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::corpus::{make_split, CorpusConfig, CorpusSplit};
use crate::error::{Error, Result};
use crate::harness::results::{CellStatus, ResultRow, TrendCheck};
use crate::harness::{eval_model_per, pseudo_corpus_per};
use crate::model::SynthModel;
use crate::pipeline::{
    finetune, mix_pretrain, train_embedding_generator, EmbeddingInit, FinetuneConfig,
};
use crate::pseudolabel::{pseudo_label, train_frame_classifier, PseudoCorpus};
use crate::seeds;
use crate::strategy::{MixKind, StrategyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteKind {
    Table2,
    Table4,
    Table5,
    Fig3,
}

impl SuiteKind {
    pub fn name(&self) -> &'static str {
        match self {
            SuiteKind::Table2 => "table2",
            SuiteKind::Table4 => "table4",
            SuiteKind::Table5 => "table5",
            SuiteKind::Fig3 => "fig3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "table2" => Ok(SuiteKind::Table2),
            "table4" => Ok(SuiteKind::Table4),
            "table5" => Ok(SuiteKind::Table5),
            "fig3" => Ok(SuiteKind::Fig3),
            other => Err(Error::Config(format!(
                "unknown suite `{other}` (expected table2|table4|table5|fig3)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOutput {
    pub suite: String,
    pub rows: Vec<ResultRow>,
    pub cells: Vec<CellStatus>,
    pub checks: Vec<TrendCheck>,
    /// (method label, shots) -> sorted (minutes, mean per) points.
    pub curves: Vec<(String, usize, Vec<(f64, f64)>)>,
}

/// Checkpoints shared by every cell of a suite run.
struct Checkpoints {
    mp: SynthModel,
    nomp: SynthModel,
    /// The mix-pretrained checkpoint with a trained embedding generator
    /// (identical to `mp` outside the `gen.*` group).
    generator: SynthModel,
}

fn pretrain_corpus_config(cfg: &ExperimentConfig) -> CorpusConfig {
    CorpusConfig {
        unlabeled_minutes: 0.0,
        n_shots: cfg.corpus.coverage_shots.max(1),
        eval_size: 1,
        split_seed: 0,
        ..cfg.corpus.clone()
    }
}

fn build_checkpoints(cfg: &ExperimentConfig, with_generator: bool) -> Result<Checkpoints> {
    let split = make_split(cfg.world_seed, &pretrain_corpus_config(cfg))?;
    let mut mp = SynthModel::new(cfg.model.clone(), cfg.pretrain.seed)?;
    mix_pretrain(&mut mp, &split, &cfg.pretrain)?;
    let mut nomp = SynthModel::new(cfg.model.clone(), cfg.pretrain.seed)?;
    let nomp_cfg = crate::pipeline::PretrainConfig {
        p_repr: 0.0,
        ..cfg.pretrain.clone()
    };
    mix_pretrain(&mut nomp, &split, &nomp_cfg)?;
    let generator = if with_generator {
        let mut g = mp.clone();
        train_embedding_generator(&mut g, &split, &cfg.generator)?;
        g
    } else {
        mp.clone()
    };
    Ok(Checkpoints { mp, nomp, generator })
}

#[derive(Clone, Debug, Default)]
struct CellSpec {
    cell: String,
    mp: Option<bool>,
    ft: Option<String>,
    ratio: Option<f64>,
    alpha: Option<f64>,
    shots: Option<usize>,
    asr_shots: Option<usize>,
    minutes: Option<f64>,
    method: Option<String>,
}

impl CellSpec {
    fn row(&self, suite: &str, seed: Option<u64>, metric: &str, value: f64) -> ResultRow {
        ResultRow {
            suite: suite.to_string(),
            cell: self.cell.clone(),
            mp: self.mp,
            ft: self.ft.clone(),
            ratio: self.ratio,
            alpha: self.alpha,
            shots: self.shots,
            asr_shots: self.asr_shots,
            minutes: self.minutes,
            method: self.method.clone(),
            seed,
            metric: metric.to_string(),
            value,
            aggregate: false,
        }
    }
}

fn ratio_pct(r: f64) -> String {
    format!("{}", (r * 100.0).round() as u32)
}

struct CellResult {
    per: f64,
    model_hash: String,
}

fn run_cell(
    base: &SynthModel,
    split: &CorpusSplit,
    pseudo: Option<&PseudoCorpus>,
    ft: &FinetuneConfig,
) -> Result<CellResult> {
    let mut model = base.clone();
    finetune(&mut model, split, pseudo, ft)?;
    let per = eval_model_per(&model, split)?;
    Ok(CellResult {
        per,
        model_hash: model.params.content_hash(),
    })
}

/// Per-seed partial output, merged deterministically afterwards.
#[derive(Default)]
struct SeedOutput {
    rows: Vec<ResultRow>,
    cells: Vec<CellStatus>,
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn run_suite(kind: SuiteKind, cfg: &ExperimentConfig) -> Result<SuiteOutput> {
    cfg.validate()?;
    match kind {
        SuiteKind::Table2 => run_table2(cfg),
        SuiteKind::Table4 => run_table4(cfg),
        SuiteKind::Table5 => run_table5(cfg),
        SuiteKind::Fig3 => run_fig3(cfg),
    }
}

// ---- shared helpers over rows ----

fn mean_metric(rows: &[ResultRow], cell: &str, metric: &str) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.cell == cell && r.metric == metric && !r.aggregate)
        .map(|r| r.value)
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn per_seed_metric(rows: &[ResultRow], cell: &str, metric: &str) -> BTreeMap<u64, f64> {
    rows.iter()
        .filter(|r| r.cell == cell && r.metric == metric && !r.aggregate)
        .filter_map(|r| r.seed.map(|s| (s, r.value)))
        .collect()
}

/// Strict mean comparison plus per-seed wins in at least 80% of the seeds.
fn dominates(rows: &[ResultRow], better: &str, worse: &str, name: &str) -> TrendCheck {
    let b = per_seed_metric(rows, better, "per");
    let w = per_seed_metric(rows, worse, "per");
    let common: Vec<u64> = b.keys().filter(|k| w.contains_key(k)).copied().collect();
    if common.is_empty() {
        return TrendCheck {
            name: name.into(),
            passed: false,
            detail: format!("no common seeds between {better} and {worse}"),
        };
    }
    let bm: f64 = common.iter().map(|s| b[s]).sum::<f64>() / common.len() as f64;
    let wm: f64 = common.iter().map(|s| w[s]).sum::<f64>() / common.len() as f64;
    let wins = common.iter().filter(|s| b[s] < w[s]).count();
    let need = ((common.len() as f64) * 0.8).ceil() as usize;
    let passed = bm < wm && wins >= need;
    TrendCheck {
        name: name.into(),
        passed,
        detail: format!(
            "{better} mean {bm:.4} vs {worse} mean {wm:.4}; wins {wins}/{} (need {need})",
            common.len()
        ),
    }
}

fn weaker_or_equal(rows: &[ResultRow], better: &str, worse: &str, name: &str) -> TrendCheck {
    let b = mean_metric(rows, better, "per");
    let w = mean_metric(rows, worse, "per");
    match (b, w) {
        (Some(bm), Some(wm)) => TrendCheck {
            name: name.into(),
            passed: bm <= wm,
            detail: format!("{better} mean {bm:.4} vs {worse} mean {wm:.4}"),
        },
        _ => TrendCheck {
            name: name.into(),
            passed: false,
            detail: format!("missing cells {better} / {worse}"),
        },
    }
}

// ---- table 2: strategy-combination grid ----

const TABLE2_COMBOS: [(bool, MixKind); 6] = [
    (true, MixKind::HardPhonemeMix),
    (true, MixKind::PhonemeFilter),
    (false, MixKind::PhonemeFilter),
    (true, MixKind::SentenceMix),
    (true, MixKind::SentenceFilter),
    (false, MixKind::SentenceFilter),
];

fn combo_cell(mp: bool, kind: MixKind, ratio: f64) -> String {
    format!(
        "{}+{}@{}",
        if mp { "mp" } else { "nomp" },
        kind.label(),
        ratio_pct(ratio)
    )
}

fn run_table2(cfg: &ExperimentConfig) -> Result<SuiteOutput> {
    let suite = "table2";
    let ckpt = build_checkpoints(cfg, false)?;
    let shots = cfg.suite.table_shots;

    let seed_outputs = with_pool(cfg.jobs, || {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_table2_seed(cfg, &ckpt, seed, shots))
            .collect::<Vec<_>>()
    })?;

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for out in seed_outputs {
        let out = out?;
        rows.extend(out.rows);
        cells.extend(out.cells);
    }
    cells.sort_by(|a, b| (a.cell.clone(), a.seed).cmp(&(b.cell.clone(), b.seed)));

    let mut checks = Vec::new();
    // bitwise identity of the four strategies at ratio 100%
    let ident = per_seed_metric(&rows, "identity@100", "lambda0_identical");
    checks.push(TrendCheck {
        name: "t2_lambda0_identity".into(),
        passed: !ident.is_empty() && ident.values().all(|&v| v == 1.0),
        detail: format!("per-seed identity flags: {ident:?}"),
    });
    checks.push(dominates(
        &rows,
        &combo_cell(true, MixKind::HardPhonemeMix, cfg.suite.main_ratio),
        &combo_cell(false, MixKind::SentenceFilter, 1.0),
        "t2_mp_pm75_beats_nomp_sf100",
    ));
    for r in [0.5, 0.75] {
        checks.push(dominates(
            &rows,
            &combo_cell(true, MixKind::HardPhonemeMix, r),
            &combo_cell(true, MixKind::SentenceFilter, r),
            &format!("t2_pm_beats_sf_at_{}", ratio_pct(r)),
        ));
    }
    Ok(SuiteOutput {
        suite: suite.into(),
        rows,
        cells,
        checks,
        curves: Vec::new(),
    })
}

fn run_table2_seed(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoints,
    seed: u64,
    shots: usize,
) -> Result<SeedOutput> {
    let suite = "table2";
    let mut out = SeedOutput::default();
    let corpus_cfg = CorpusConfig {
        split_seed: seed,
        n_shots: shots,
        ..cfg.corpus.clone()
    };
    let split = make_split(cfg.world_seed, &corpus_cfg)?;
    let cls = train_frame_classifier(
        &split,
        shots,
        &cfg.classifier,
        seeds::derive(seed, "cls", shots as u64),
    )?;
    let pseudo = pseudo_label(&cls, &split)?;
    let asr_spec = CellSpec {
        cell: format!("asr@{shots}"),
        asr_shots: Some(shots),
        shots: Some(shots),
        ..Default::default()
    };
    out.rows
        .push(asr_spec.row(suite, Some(seed), "pseudo_per", pseudo_corpus_per(&pseudo, &split)?));

    let mut identity: Vec<(MixKind, String, f64)> = Vec::new();
    for (mp, kind) in TABLE2_COMBOS {
        for &ratio in &cfg.suite.ratios {
            let spec = CellSpec {
                cell: combo_cell(mp, kind, ratio),
                mp: Some(mp),
                ft: Some(kind.label().into()),
                ratio: Some(ratio),
                alpha: None,
                shots: Some(shots),
                asr_shots: Some(shots),
                ..Default::default()
            };
            let base = if mp { &ckpt.mp } else { &ckpt.nomp };
            let ft = FinetuneConfig {
                strategy: StrategyConfig {
                    kind,
                    ratio,
                    alpha: cfg.suite.soft_alpha,
                },
                seed: seeds::derive(seed, "ft", 0),
                shots,
                embedding_init: EmbeddingInit::Random,
                ..cfg.finetune.clone()
            };
            match run_cell(base, &split, Some(&pseudo), &ft) {
                Ok(res) => {
                    out.rows.push(spec.row(suite, Some(seed), "per", res.per));
                    out.cells.push(CellStatus {
                        cell: spec.cell.clone(),
                        seed,
                        status: "ok".into(),
                    });
                    if mp && (ratio - 1.0).abs() < 1e-12 {
                        identity.push((kind, res.model_hash, res.per));
                    }
                }
                Err(e) => out.cells.push(CellStatus {
                    cell: spec.cell.clone(),
                    seed,
                    status: format!("error: {e}"),
                }),
            }
        }
    }
    if identity.len() == 4 {
        let all_same = identity
            .windows(2)
            .all(|w| w[0].1 == w[1].1 && w[0].2 == w[1].2);
        let spec = CellSpec {
            cell: "identity@100".into(),
            ratio: Some(1.0),
            shots: Some(shots),
            ..Default::default()
        };
        out.rows.push(spec.row(
            suite,
            Some(seed),
            "lambda0_identical",
            if all_same { 1.0 } else { 0.0 },
        ));
    }
    Ok(out)
}

// ---- table 4: mixing functions ----

fn run_table4(cfg: &ExperimentConfig) -> Result<SuiteOutput> {
    let suite = "table4";
    let ckpt = build_checkpoints(cfg, false)?;
    let shots = cfg.suite.table_shots;

    let seed_outputs = with_pool(cfg.jobs, || {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_table4_seed(cfg, &ckpt, seed, shots))
            .collect::<Vec<_>>()
    })?;

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for out in seed_outputs {
        let out = out?;
        rows.extend(out.rows);
        cells.extend(out.cells);
    }
    cells.sort_by(|a, b| (a.cell.clone(), a.seed).cmp(&(b.cell.clone(), b.seed)));

    let mut checks = Vec::new();
    let grid_ratios: Vec<f64> = cfg.suite.ratios.iter().copied().filter(|r| *r < 1.0).collect();
    // exact reduction at alpha = 1
    let hard_cell = format!("hard@{}", ratio_pct(cfg.suite.main_ratio));
    let soft1_cell = format!("soft100@{}", ratio_pct(cfg.suite.main_ratio));
    let hard = per_seed_metric(&rows, &hard_cell, "per");
    let soft1 = per_seed_metric(&rows, &soft1_cell, "per");
    let reduction_ok = !hard.is_empty()
        && hard.len() == soft1.len()
        && hard.iter().all(|(s, v)| soft1.get(s) == Some(v));
    checks.push(TrendCheck {
        name: "t4_softmix_alpha1_equals_hardmix".into(),
        passed: reduction_ok,
        detail: format!("hard {hard:?} vs soft(alpha=1) {soft1:?}"),
    });
    // sampling lands inside the hard-mix envelope
    let hard_means: Vec<f64> = grid_ratios
        .iter()
        .filter_map(|r| mean_metric(&rows, &format!("hard@{}", ratio_pct(*r)), "per"))
        .collect();
    let sampling = mean_metric(&rows, "sampling", "per");
    let passed = match (&sampling, hard_means.is_empty()) {
        (Some(s), false) => {
            let lo = hard_means.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = hard_means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            *s >= lo && *s <= hi
        }
        _ => false,
    };
    checks.push(TrendCheck {
        name: "t4_sampling_within_hardmix_envelope".into(),
        passed,
        detail: format!("sampling {sampling:?}, hard means {hard_means:?}"),
    });
    Ok(SuiteOutput {
        suite: suite.into(),
        rows,
        cells,
        checks,
        curves: Vec::new(),
    })
}

fn run_table4_seed(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoints,
    seed: u64,
    shots: usize,
) -> Result<SeedOutput> {
    let suite = "table4";
    let mut out = SeedOutput::default();
    let corpus_cfg = CorpusConfig {
        split_seed: seed,
        n_shots: shots,
        ..cfg.corpus.clone()
    };
    let split = make_split(cfg.world_seed, &corpus_cfg)?;
    let cls = train_frame_classifier(
        &split,
        shots,
        &cfg.classifier,
        seeds::derive(seed, "cls", shots as u64),
    )?;
    let pseudo = pseudo_label(&cls, &split)?;

    let grid_ratios: Vec<f64> = cfg.suite.ratios.iter().copied().filter(|r| *r < 1.0).collect();
    let mut specs: Vec<(CellSpec, StrategyConfig)> = Vec::new();
    for &r in &grid_ratios {
        specs.push((
            CellSpec {
                cell: format!("hard@{}", ratio_pct(r)),
                mp: Some(true),
                ft: Some("hard".into()),
                ratio: Some(r),
                shots: Some(shots),
                asr_shots: Some(shots),
                ..Default::default()
            },
            StrategyConfig {
                kind: MixKind::HardPhonemeMix,
                ratio: r,
                alpha: cfg.suite.soft_alpha,
            },
        ));
        specs.push((
            CellSpec {
                cell: format!("soft{}@{}", ratio_pct(cfg.suite.soft_alpha), ratio_pct(r)),
                mp: Some(true),
                ft: Some("soft".into()),
                ratio: Some(r),
                alpha: Some(cfg.suite.soft_alpha),
                shots: Some(shots),
                asr_shots: Some(shots),
                ..Default::default()
            },
            StrategyConfig {
                kind: MixKind::SoftMix,
                ratio: r,
                alpha: cfg.suite.soft_alpha,
            },
        ));
    }
    // the alpha = 1 reduction cell
    specs.push((
        CellSpec {
            cell: format!("soft100@{}", ratio_pct(cfg.suite.main_ratio)),
            mp: Some(true),
            ft: Some("soft".into()),
            ratio: Some(cfg.suite.main_ratio),
            alpha: Some(1.0),
            shots: Some(shots),
            asr_shots: Some(shots),
            ..Default::default()
        },
        StrategyConfig {
            kind: MixKind::SoftMix,
            ratio: cfg.suite.main_ratio,
            alpha: 1.0,
        },
    ));
    // sampling has no ratio cell by definition
    specs.push((
        CellSpec {
            cell: "sampling".into(),
            mp: Some(true),
            ft: Some("sampling".into()),
            shots: Some(shots),
            asr_shots: Some(shots),
            ..Default::default()
        },
        StrategyConfig {
            kind: MixKind::Sampling,
            ratio: 1.0,
            alpha: cfg.suite.soft_alpha,
        },
    ));

    for (spec, strategy) in specs {
        let ft = FinetuneConfig {
            strategy,
            seed: seeds::derive(seed, "ft", 0),
            shots,
            embedding_init: EmbeddingInit::Random,
            ..cfg.finetune.clone()
        };
        match run_cell(&ckpt.mp, &split, Some(&pseudo), &ft) {
            Ok(res) => {
                out.rows.push(spec.row(suite, Some(seed), "per", res.per));
                out.cells.push(CellStatus {
                    cell: spec.cell.clone(),
                    seed,
                    status: "ok".into(),
                });
            }
            Err(e) => out.cells.push(CellStatus {
                cell: spec.cell.clone(),
                seed,
                status: format!("error: {e}"),
            }),
        }
    }
    Ok(out)
}

// ---- table 5: pseudo-label quality ----

fn run_table5(cfg: &ExperimentConfig) -> Result<SuiteOutput> {
    let suite = "table5";
    let ckpt = build_checkpoints(cfg, false)?;
    let tts_shots = cfg.suite.table_shots;
    let max_shots = cfg
        .suite
        .asr_shots_grid
        .iter()
        .copied()
        .max()
        .unwrap_or(tts_shots)
        .max(tts_shots);

    let seed_outputs = with_pool(cfg.jobs, || {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_table5_seed(cfg, &ckpt, seed, tts_shots, max_shots))
            .collect::<Vec<_>>()
    })?;

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for out in seed_outputs {
        let out = out?;
        rows.extend(out.rows);
        cells.extend(out.cells);
    }
    cells.sort_by(|a, b| (a.cell.clone(), a.seed).cmp(&(b.cell.clone(), b.seed)));

    let mut checks = Vec::new();
    let pct = ratio_pct(cfg.suite.main_ratio);
    for &asr in &cfg.suite.asr_shots_grid {
        checks.push(weaker_or_equal(
            &rows,
            &format!("mp+pm@{pct}/asr{asr}"),
            &format!("nomp+sf@{pct}/asr{asr}"),
            &format!("t5_mp_pm_le_nomp_sf_asr{asr}"),
        ));
    }
    // pseudo-label quality improves (weakly) with classifier shots
    let pseudo_means: Vec<(usize, Option<f64>)> = cfg
        .suite
        .asr_shots_grid
        .iter()
        .map(|&asr| (asr, mean_metric(&rows, &format!("asr@{asr}"), "pseudo_per")))
        .collect();
    let mut non_increasing = true;
    let mut prev = f64::INFINITY;
    for (_, m) in &pseudo_means {
        match m {
            Some(v) => {
                if *v > prev + 1e-12 {
                    non_increasing = false;
                }
                prev = *v;
            }
            None => non_increasing = false,
        }
    }
    checks.push(TrendCheck {
        name: "t5_pseudo_per_non_increasing".into(),
        passed: non_increasing,
        detail: format!("{pseudo_means:?}"),
    });
    for combo in ["mp+pm", "nomp+sf"] {
        let means: Vec<Option<f64>> = cfg
            .suite
            .asr_shots_grid
            .iter()
            .map(|&asr| mean_metric(&rows, &format!("{combo}@{pct}/asr{asr}"), "per"))
            .collect();
        let mut ok = true;
        let mut prev = f64::INFINITY;
        for m in &means {
            match m {
                Some(v) => {
                    if *v > prev + 1e-12 {
                        ok = false;
                    }
                    prev = *v;
                }
                None => ok = false,
            }
        }
        checks.push(TrendCheck {
            name: format!("t5_per_non_increasing_{}", combo.replace('+', "_")),
            passed: ok,
            detail: format!("{means:?}"),
        });
    }
    Ok(SuiteOutput {
        suite: suite.into(),
        rows,
        cells,
        checks,
        curves: Vec::new(),
    })
}

fn run_table5_seed(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoints,
    seed: u64,
    tts_shots: usize,
    corpus_shots: usize,
) -> Result<SeedOutput> {
    let suite = "table5";
    let mut out = SeedOutput::default();
    let corpus_cfg = CorpusConfig {
        split_seed: seed,
        n_shots: corpus_shots,
        ..cfg.corpus.clone()
    };
    let split = make_split(cfg.world_seed, &corpus_cfg)?;
    let pct = ratio_pct(cfg.suite.main_ratio);
    for &asr in &cfg.suite.asr_shots_grid {
        let cls = train_frame_classifier(
            &split,
            asr,
            &cfg.classifier,
            seeds::derive(seed, "cls", asr as u64),
        )?;
        let pseudo = pseudo_label(&cls, &split)?;
        let asr_spec = CellSpec {
            cell: format!("asr@{asr}"),
            asr_shots: Some(asr),
            ..Default::default()
        };
        out.rows.push(asr_spec.row(
            suite,
            Some(seed),
            "pseudo_per",
            pseudo_corpus_per(&pseudo, &split)?,
        ));
        for (mp, kind, label) in [
            (true, MixKind::HardPhonemeMix, "mp+pm"),
            (false, MixKind::SentenceFilter, "nomp+sf"),
        ] {
            let spec = CellSpec {
                cell: format!("{label}@{pct}/asr{asr}"),
                mp: Some(mp),
                ft: Some(kind.label().into()),
                ratio: Some(cfg.suite.main_ratio),
                shots: Some(tts_shots),
                asr_shots: Some(asr),
                ..Default::default()
            };
            let base = if mp { &ckpt.mp } else { &ckpt.nomp };
            let ft = FinetuneConfig {
                strategy: StrategyConfig {
                    kind,
                    ratio: cfg.suite.main_ratio,
                    alpha: cfg.suite.soft_alpha,
                },
                seed: seeds::derive(seed, "ft", 0),
                shots: tts_shots,
                embedding_init: EmbeddingInit::Random,
                ..cfg.finetune.clone()
            };
            match run_cell(base, &split, Some(&pseudo), &ft) {
                Ok(res) => {
                    out.rows.push(spec.row(suite, Some(seed), "per", res.per));
                    out.cells.push(CellStatus {
                        cell: spec.cell.clone(),
                        seed,
                        status: "ok".into(),
                    });
                }
                Err(e) => out.cells.push(CellStatus {
                    cell: spec.cell.clone(),
                    seed,
                    status: format!("error: {e}"),
                }),
            }
        }
    }
    Ok(out)
}

// ---- fig 3: data-variation grid ----

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fig3Method {
    Baseline,
    Proposed,
    ProposedStar,
}

impl Fig3Method {
    fn label(&self) -> &'static str {
        match self {
            Fig3Method::Baseline => "baseline",
            Fig3Method::Proposed => "proposed",
            Fig3Method::ProposedStar => "proposed_star",
        }
    }
}

fn fig3_cell(method: Fig3Method, shots: usize, minutes: f64) -> String {
    format!("{}@{}shot@{}min", method.label(), shots, minutes)
}

fn run_fig3(cfg: &ExperimentConfig) -> Result<SuiteOutput> {
    let suite = "fig3";
    let ckpt = build_checkpoints(cfg, true)?;
    let corpus_shots = cfg.suite.shots_grid.iter().copied().max().unwrap_or(4);

    let seed_outputs = with_pool(cfg.jobs, || {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_fig3_seed(cfg, &ckpt, seed, corpus_shots))
            .collect::<Vec<_>>()
    })?;

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for out in seed_outputs {
        let out = out?;
        rows.extend(out.rows);
        cells.extend(out.cells);
    }
    cells.sort_by(|a, b| (a.cell.clone(), a.seed).cmp(&(b.cell.clone(), b.seed)));

    let mut checks = Vec::new();
    let min_shots = cfg.suite.shots_grid.iter().copied().min().unwrap_or(4);
    let zero = fig3_cell(Fig3Method::ProposedStar, min_shots, 0.0);
    let fifteen = fig3_cell(Fig3Method::ProposedStar, min_shots, 15.0);
    let z = mean_metric(&rows, &zero, "per");
    let f = mean_metric(&rows, &fifteen, "per");
    checks.push(TrendCheck {
        name: "f3_star_15min_halves_0min".into(),
        passed: matches!((z, f), (Some(z), Some(f)) if f < 0.5 * z),
        detail: format!("{fifteen} {f:?} vs half of {zero} {z:?}"),
    });
    let mut all_ok = true;
    let mut details = Vec::new();
    for &shots in &cfg.suite.shots_grid {
        for &minutes in cfg.suite.minutes_grid.iter().filter(|m| **m > 0.0) {
            let p = mean_metric(&rows, &fig3_cell(Fig3Method::Proposed, shots, minutes), "per");
            let b = mean_metric(&rows, &fig3_cell(Fig3Method::Baseline, shots, minutes), "per");
            let ok = matches!((p, b), (Some(p), Some(b)) if p <= b);
            if !ok {
                all_ok = false;
            }
            details.push(format!("{shots}shot/{minutes}min: proposed {p:?} baseline {b:?}"));
        }
    }
    checks.push(TrendCheck {
        name: "f3_proposed_le_baseline_everywhere".into(),
        passed: all_ok,
        detail: details.join("; "),
    });
    // star helps most at the smallest shot count
    let mut star_ok = true;
    let mut star_details = Vec::new();
    for &minutes in cfg.suite.minutes_grid.iter().filter(|m| **m > 0.0) {
        let s = mean_metric(&rows, &fig3_cell(Fig3Method::ProposedStar, min_shots, minutes), "per");
        let p = mean_metric(&rows, &fig3_cell(Fig3Method::Proposed, min_shots, minutes), "per");
        let ok = matches!((s, p), (Some(s), Some(p)) if s <= p);
        if !ok {
            star_ok = false;
        }
        star_details.push(format!("{minutes}min: star {s:?} proposed {p:?}"));
    }
    checks.push(TrendCheck {
        name: "f3_star_le_proposed_low_resource".into(),
        passed: star_ok,
        detail: star_details.join("; "),
    });

    // plot data per (method, shots)
    let mut curves = Vec::new();
    for method in [Fig3Method::Baseline, Fig3Method::Proposed, Fig3Method::ProposedStar] {
        for &shots in &cfg.suite.shots_grid {
            let mut points: Vec<(f64, f64)> = Vec::new();
            for &minutes in &cfg.suite.minutes_grid {
                if let Some(m) = mean_metric(&rows, &fig3_cell(method, shots, minutes), "per") {
                    points.push((minutes, m));
                }
            }
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite minutes"));
            if !points.is_empty() {
                curves.push((method.label().to_string(), shots, points));
            }
        }
    }

    Ok(SuiteOutput {
        suite: suite.into(),
        rows,
        cells,
        checks,
        curves,
    })
}

fn run_fig3_seed(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoints,
    seed: u64,
    corpus_shots: usize,
) -> Result<SeedOutput> {
    let suite = "fig3";
    let mut out = SeedOutput::default();
    for &minutes in &cfg.suite.minutes_grid {
        let corpus_cfg = CorpusConfig {
            split_seed: seed,
            n_shots: corpus_shots,
            unlabeled_minutes: minutes,
            ..cfg.corpus.clone()
        };
        let split = make_split(cfg.world_seed, &corpus_cfg)?;
        for &shots in &cfg.suite.shots_grid {
            let pseudo = if minutes > 0.0 {
                let cls = train_frame_classifier(
                    &split,
                    shots,
                    &cfg.classifier,
                    seeds::derive(seed, "cls", shots as u64),
                )?;
                let pc = pseudo_label(&cls, &split)?;
                let spec = CellSpec {
                    cell: format!("asr{shots}@{minutes}min"),
                    asr_shots: Some(shots),
                    shots: Some(shots),
                    minutes: Some(minutes),
                    ..Default::default()
                };
                out.rows.push(spec.row(
                    suite,
                    Some(seed),
                    "pseudo_per",
                    pseudo_corpus_per(&pc, &split)?,
                ));
                Some(pc)
            } else {
                None
            };
            let methods: &[Fig3Method] = if minutes > 0.0 {
                &[Fig3Method::Baseline, Fig3Method::Proposed, Fig3Method::ProposedStar]
            } else {
                // without unpaired speech only the embedding-initialized
                // variant can adapt; the grid runs it alone
                &[Fig3Method::ProposedStar]
            };
            for &method in methods {
                let (base, strategy, init) = match method {
                    Fig3Method::Baseline => (
                        &ckpt.nomp,
                        StrategyConfig {
                            kind: MixKind::SentenceFilter,
                            ratio: 1.0,
                            alpha: cfg.suite.soft_alpha,
                        },
                        EmbeddingInit::Random,
                    ),
                    Fig3Method::Proposed => (
                        &ckpt.mp,
                        StrategyConfig {
                            kind: MixKind::HardPhonemeMix,
                            ratio: cfg.suite.main_ratio,
                            alpha: cfg.suite.soft_alpha,
                        },
                        EmbeddingInit::Random,
                    ),
                    Fig3Method::ProposedStar => (
                        &ckpt.generator,
                        StrategyConfig {
                            kind: MixKind::HardPhonemeMix,
                            ratio: cfg.suite.main_ratio,
                            alpha: cfg.suite.soft_alpha,
                        },
                        EmbeddingInit::Generator,
                    ),
                };
                let spec = CellSpec {
                    cell: fig3_cell(method, shots, minutes),
                    mp: Some(method != Fig3Method::Baseline),
                    ft: Some(strategy.kind.label().into()),
                    ratio: Some(strategy.ratio),
                    shots: Some(shots),
                    asr_shots: Some(shots),
                    minutes: Some(minutes),
                    method: Some(method.label().into()),
                    ..Default::default()
                };
                let ft = FinetuneConfig {
                    strategy: strategy.clone(),
                    seed: seeds::derive(seed, "ft", 0),
                    shots,
                    embedding_init: init,
                    ..cfg.finetune.clone()
                };
                match run_cell(base, &split, pseudo.as_ref(), &ft) {
                    Ok(res) => {
                        out.rows.push(spec.row(suite, Some(seed), "per", res.per));
                        out.cells.push(CellStatus {
                            cell: spec.cell.clone(),
                            seed,
                            status: "ok".into(),
                        });
                    }
                    Err(e) => out.cells.push(CellStatus {
                        cell: spec.cell.clone(),
                        seed,
                        status: format!("error: {e}"),
                    }),
                }
            }
        }
    }
    Ok(out)
}
