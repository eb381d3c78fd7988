//! Ratio-calibrated confidence thresholds, the four pseudo-label mixing
//! functions, and the two filtering baselines.
//!
//! Everything here is a pure function: stochastic plans draw from a stream
//! derived from (run seed, utterance id, visit), never from shared state,
//! so cells that differ only in strategy consume identical batch draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudolabel::{PseudoCorpus, PseudoUtterance};
use crate::seeds;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    HardPhonemeMix,
    SentenceMix,
    SoftMix,
    Sampling,
    PhonemeFilter,
    SentenceFilter,
}

impl MixKind {
    /// Mixing kinds route low-confidence phonemes to the representation
    /// encoder; filter kinds only drop data.
    pub fn uses_representation(&self) -> bool {
        matches!(
            self,
            MixKind::HardPhonemeMix | MixKind::SentenceMix | MixKind::SoftMix | MixKind::Sampling
        )
    }

    pub fn label(&self) -> &'static str {
        match self {
            MixKind::HardPhonemeMix => "pm",
            MixKind::SentenceMix => "sm",
            MixKind::SoftMix => "soft",
            MixKind::Sampling => "sampling",
            MixKind::PhonemeFilter => "pf",
            MixKind::SentenceFilter => "sf",
        }
    }
}

/// Declarative strategy choice: a kind plus the pseudo-label ratio the
/// threshold is calibrated to (and alpha for the soft mix).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: MixKind,
    /// Target fraction of predictions whose confidence must reach the
    /// calibrated threshold. Ignored by Sampling.
    pub ratio: f64,
    /// Probability of honoring the threshold decision (SoftMix only).
    pub alpha: f64,
}

impl StrategyConfig {
    pub fn new(kind: MixKind, ratio: f64) -> Self {
        StrategyConfig {
            kind,
            ratio,
            alpha: 0.9,
        }
    }
}

/// A calibrated strategy, ready to plan utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixStrategy {
    pub kind: MixKind,
    /// Confidence threshold lambda in [0, 1].
    pub threshold: f64,
    /// SoftMix alpha in [0, 1].
    pub alpha: f64,
}

impl MixStrategy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Argument(format!("threshold {} outside [0,1]", self.threshold)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Argument(format!("alpha {} outside [0,1]", self.alpha)));
        }
        Ok(())
    }
}

/// Per-phoneme source selection for one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    FromPhn,
    FromRepr,
}

/// What the trainer should do with one pseudo utterance: where each phoneme
/// representation comes from, whether the sentence is kept at all, and the
/// loss masks implied by the per-phoneme keep flags.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionPlan {
    pub choices: Vec<Choice>,
    /// False only under SentenceFilter when the sentence mean falls below
    /// the threshold; such sentences contribute nothing to fine-tuning.
    pub keep_sentence: bool,
    /// Per-frame loss mask (expanded from per-phoneme keeps by durations).
    pub frame_mask: Vec<f64>,
    /// Per-phoneme duration-loss mask.
    pub dur_mask: Vec<f64>,
}

impl SelectionPlan {
    fn keep_all(l: usize, frames: usize, choices: Vec<Choice>) -> Self {
        SelectionPlan {
            choices,
            keep_sentence: true,
            frame_mask: vec![1.0; frames],
            dur_mask: vec![1.0; l],
        }
    }

    pub fn from_phn_flags(&self) -> Vec<bool> {
        self.choices.iter().map(|c| *c == Choice::FromPhn).collect()
    }
}

/// Largest threshold such that at least `ratio` of the pool stays at or
/// above it; ratio 1.0 pins the threshold to 0 exactly.
pub fn calibrate_threshold(confidences: &[f64], ratio: f64) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::Calibration("empty confidence pool".into()));
    }
    if !(0.0..=1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::Calibration(format!("ratio {ratio} outside (0, 1]")));
    }
    if ratio >= 1.0 {
        return Ok(0.0);
    }
    let mut sorted = confidences.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite confidences"));
    let k = (ratio * sorted.len() as f64).ceil() as usize;
    Ok(sorted[k.clamp(1, sorted.len()) - 1])
}

/// Pool the statistic the kind thresholds on: per-phoneme confidences for
/// phoneme-level kinds, per-sentence means for sentence-level kinds.
pub fn calibration_pool(kind: MixKind, corpus: &PseudoCorpus) -> Vec<f64> {
    match kind {
        MixKind::SentenceMix | MixKind::SentenceFilter => corpus
            .utterances
            .iter()
            .map(|u| u.sentence_confidence)
            .collect(),
        _ => corpus
            .utterances
            .iter()
            .flat_map(|u| u.runs.iter().map(|r| r.confidence))
            .collect(),
    }
}

/// Calibrate a declarative config against a pseudo corpus.
pub fn calibrate(cfg: &StrategyConfig, corpus: &PseudoCorpus) -> Result<MixStrategy> {
    let threshold = if cfg.kind == MixKind::Sampling {
        0.0
    } else {
        let pool = calibration_pool(cfg.kind, corpus);
        calibrate_threshold(&pool, cfg.ratio)?
    };
    let strategy = MixStrategy {
        kind: cfg.kind,
        threshold,
        alpha: cfg.alpha,
    };
    strategy.validate()?;
    Ok(strategy)
}

pub fn plan_hard_phoneme_mix(confidences: &[f64], threshold: f64) -> Vec<Choice> {
    confidences
        .iter()
        .map(|&s| if s >= threshold { Choice::FromPhn } else { Choice::FromRepr })
        .collect()
}

pub fn plan_sentence_mix(confidences: &[f64], threshold: f64) -> Vec<Choice> {
    let mean = confidences.iter().sum::<f64>() / confidences.len().max(1) as f64;
    let choice = if mean >= threshold { Choice::FromPhn } else { Choice::FromRepr };
    vec![choice; confidences.len()]
}

pub fn plan_soft_mix(
    confidences: &[f64],
    threshold: f64,
    alpha: f64,
    rng: &mut impl rand::Rng,
) -> Vec<Choice> {
    confidences
        .iter()
        .map(|&s| {
            let p_phn = if s >= threshold { alpha } else { 1.0 - alpha };
            if rng.random_bool(p_phn) {
                Choice::FromPhn
            } else {
                Choice::FromRepr
            }
        })
        .collect()
}

pub fn plan_sampling(confidences: &[f64], rng: &mut impl rand::Rng) -> Vec<Choice> {
    confidences
        .iter()
        .map(|&s| {
            if rng.random_bool(s.clamp(0.0, 1.0)) {
                Choice::FromPhn
            } else {
                Choice::FromRepr
            }
        })
        .collect()
}

/// Build the full plan for one pseudo utterance. Stochastic kinds draw from
/// a stream derived from (run_seed, utterance id, visit); deterministic
/// kinds ignore it entirely.
pub fn plan_utterance(
    strategy: &MixStrategy,
    utt: &PseudoUtterance,
    run_seed: u64,
    visit: u64,
) -> SelectionPlan {
    let confs = utt.confidences();
    let durations = utt.run_durations();
    let l = confs.len();
    let frames: usize = durations.iter().map(|&d| d as usize).sum();
    match strategy.kind {
        MixKind::HardPhonemeMix => {
            SelectionPlan::keep_all(l, frames, plan_hard_phoneme_mix(&confs, strategy.threshold))
        }
        MixKind::SentenceMix => {
            SelectionPlan::keep_all(l, frames, plan_sentence_mix(&confs, strategy.threshold))
        }
        MixKind::SoftMix => {
            let mut rng = seeds::rng(seeds::derive2(run_seed, "plan", utt.utt_id, visit));
            SelectionPlan::keep_all(
                l,
                frames,
                plan_soft_mix(&confs, strategy.threshold, strategy.alpha, &mut rng),
            )
        }
        MixKind::Sampling => {
            let mut rng = seeds::rng(seeds::derive2(run_seed, "plan", utt.utt_id, visit));
            SelectionPlan::keep_all(l, frames, plan_sampling(&confs, &mut rng))
        }
        MixKind::PhonemeFilter => {
            let keep: Vec<bool> = confs.iter().map(|&s| s >= strategy.threshold).collect();
            let mut frame_mask = Vec::with_capacity(frames);
            for (k, d) in keep.iter().zip(&durations) {
                let v = if *k { 1.0 } else { 0.0 };
                frame_mask.extend(std::iter::repeat(v).take(*d as usize));
            }
            SelectionPlan {
                choices: vec![Choice::FromPhn; l],
                keep_sentence: true,
                frame_mask,
                dur_mask: keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
            }
        }
        MixKind::SentenceFilter => {
            let keep = utt.sentence_confidence >= strategy.threshold;
            SelectionPlan {
                choices: vec![Choice::FromPhn; l],
                keep_sentence: keep,
                frame_mask: vec![1.0; frames],
                dur_mask: vec![1.0; l],
            }
        }
    }
}

/// Row-wise selection between the two encoder outputs.
pub fn apply_plan(choices: &[Choice], c_phn: &Tensor2, c_repr: &Tensor2) -> Result<Tensor2> {
    if c_phn.shape() != c_repr.shape() || choices.len() != c_phn.rows() {
        return Err(Error::Alignment(format!(
            "apply_plan: c_phn {:?}, c_repr {:?}, plan {}",
            c_phn.shape(),
            c_repr.shape(),
            choices.len()
        )));
    }
    let mut out = Tensor2::zeros(c_phn.rows(), c_phn.cols());
    for (r, choice) in choices.iter().enumerate() {
        let src = match choice {
            Choice::FromPhn => c_phn.row(r),
            Choice::FromRepr => c_repr.row(r),
        };
        out.row_mut(r).copy_from_slice(src);
    }
    Ok(out)
}
