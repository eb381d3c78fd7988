//! Evaluation oracle, phoneme error rate, and the benchmark suites.

pub mod results;
pub mod suites;

use crate::corpus::{CorpusSplit, ToyLanguage};
use crate::error::{Error, Result};
use crate::model::SynthModel;
use crate::pseudolabel::PseudoCorpus;
use crate::tensor::Tensor2;

/// Nearest-prototype frame classification followed by run-length merging.
/// Stands in for external ASR scoring of synthesized speech; the corpus
/// separation invariant guarantees exact transcripts on real frames.
pub fn decode_oracle(frames: &Tensor2, lang: &ToyLanguage) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    for r in 0..frames.rows() {
        let row = frames.row(r);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for p in 0..lang.prototypes.rows() {
            let d = Tensor2::sq_dist(row, lang.prototypes.row(p));
            if d < best_d {
                best_d = d;
                best = p;
            }
        }
        let id = lang.phoneme_ids[best];
        if out.last() != Some(&id) {
            out.push(id);
        }
    }
    out
}

/// Phoneme error rate: Levenshtein distance (unit costs) over the reference
/// length. Two-row iterative dynamic program.
pub fn per(hypothesis: &[u32], reference: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Metric("empty reference".into()));
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m] as f64 / n as f64)
}

/// Mean PER of inference-mode synthesis over the eval set: transcripts in,
/// predicted durations, decoded by the nearest-prototype oracle.
pub fn eval_model_per(model: &SynthModel, split: &CorpusSplit) -> Result<f64> {
    if split.eval.is_empty() {
        return Err(Error::Metric("empty eval set".into()));
    }
    let lang = &split.target_lang;
    let mut total = 0.0;
    for utt in &split.eval {
        let (frames, _durations) = model.infer(lang.id, &utt.phonemes)?;
        let hyp = decode_oracle(&frames, lang);
        total += per(&hyp, &utt.phonemes)?;
    }
    Ok(total / split.eval.len() as f64)
}

/// Mean PER of the ground-truth eval frames through the decode oracle
/// (should be exactly zero given the separation invariant).
pub fn eval_oracle_floor(split: &CorpusSplit) -> Result<f64> {
    let lang = &split.target_lang;
    let mut total = 0.0;
    for utt in &split.eval {
        let hyp = decode_oracle(&utt.frames, lang);
        total += per(&hyp, &utt.phonemes)?;
    }
    Ok(total / split.eval.len().max(1) as f64)
}

/// Mean PER of pseudo transcripts against the withheld references.
pub fn pseudo_corpus_per(pseudo: &PseudoCorpus, split: &CorpusSplit) -> Result<f64> {
    if pseudo.utterances.is_empty() {
        return Err(Error::Metric("empty pseudo corpus".into()));
    }
    let mut total = 0.0;
    for pu in &pseudo.utterances {
        let u = split
            .unpaired
            .iter()
            .find(|u| u.id() == pu.utt_id)
            .ok_or_else(|| Error::Metric(format!("pseudo utterance {} unknown", pu.utt_id)))?;
        let (reference, _) = u.oracle_reference();
        total += per(&pu.transcript(), reference)?;
    }
    Ok(total / pseudo.utterances.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_language, gen_utterance, make_split, CorpusConfig};
    use crate::seeds;

    #[test]
    fn oracle_decodes_clean_frames_exactly() {
        let cfg = CorpusConfig::default();
        let lang = gen_language(50, 0, &cfg).unwrap();
        for i in 0..1000 {
            let utt = gen_utterance(&lang, seeds::derive(50, "dec", i), (1, 10)).unwrap();
            assert_eq!(decode_oracle(&utt.frames, &lang), utt.phonemes);
        }
    }

    #[test]
    fn oracle_merges_repeated_prototype_frames() {
        let cfg = CorpusConfig::default();
        let lang = gen_language(51, 0, &cfg).unwrap();
        let proto = lang.prototypes.row(3).to_vec();
        let frames = Tensor2::from_rows(&vec![proto; 5]).unwrap();
        assert_eq!(decode_oracle(&frames, &lang), vec![lang.phoneme_ids[3]]);
    }

    #[test]
    fn per_examples() {
        assert_eq!(per(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        // hypothesis [1,2,3] vs reference [1,3]: one insertion over 2
        assert_eq!(per(&[1, 2, 3], &[1, 3]).unwrap(), 0.5);
        assert!(per(&[1], &[]).is_err());
        assert_eq!(per(&[], &[5, 6]).unwrap(), 1.0);
    }

    /// Independent quadratic-memory oracle: full DP matrix, top-down.
    fn edit_distance_oracle(a: &[u32], b: &[u32]) -> usize {
        fn go(a: &[u32], b: &[u32], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
            if i == 0 {
                return j;
            }
            if j == 0 {
                return i;
            }
            if let Some(v) = memo[i][j] {
                return v;
            }
            let sub = go(a, b, i - 1, j - 1, memo) + usize::from(a[i - 1] != b[j - 1]);
            let del = go(a, b, i - 1, j, memo) + 1;
            let ins = go(a, b, i, j - 1, memo) + 1;
            let v = sub.min(del).min(ins);
            memo[i][j] = Some(v);
            v
        }
        let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
        go(a, b, a.len(), b.len(), &mut memo)
    }

    #[test]
    fn per_matches_independent_dp_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let n = rng.random_range(1..15);
            let m = rng.random_range(0..15);
            let reference: Vec<u32> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let hypothesis: Vec<u32> = (0..m).map(|_| rng.random_range(0..5)).collect();
            let want = edit_distance_oracle(&hypothesis, &reference) as f64 / n as f64;
            let got = per(&hypothesis, &reference).unwrap();
            assert!((want - got).abs() < 1e-12, "{hypothesis:?} vs {reference:?}");
        }
    }

    #[test]
    fn ground_truth_eval_frames_have_zero_per() {
        let cfg = CorpusConfig {
            source_utts_per_lang: 2,
            eval_size: 16,
            unlabeled_minutes: 0.0,
            n_shots: 4,
            ..Default::default()
        };
        let split = make_split(52, &cfg).unwrap();
        assert_eq!(eval_oracle_floor(&split).unwrap(), 0.0);
    }
}
