//! Frame-level linear phoneme classifier over the simulated SSL features,
//! argmax decoding, run-length merging with averaged confidences, and the
//! pseudo-corpus builder.
//!
//! The classifier is deliberately independent of the synthesis model: it has
//! its own layer-weight vector and sees only features, never transcripts of
//! unpaired speech.

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, LayeredFeatures};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{init_uniform, AdamConfig, ParamStore};
use crate::seeds;
use crate::tensor::{softmax, Tensor2};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch_frames: usize,
    pub lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            steps: 600,
            batch_frames: 128,
            lr: 0.02,
        }
    }
}

/// Linear frame classifier: softmax-weighted layer sum followed by a single
/// affine map to the target inventory.
#[derive(Clone, Debug)]
pub struct FrameClassifier {
    pub lang: u32,
    /// Global phoneme id per output class.
    pub phoneme_ids: Vec<u32>,
    pub params: ParamStore,
    pub shots: usize,
    pub seed: u64,
}

/// Maximal run of identical frame predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeRun {
    pub phoneme: u32,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    /// Mean of the member frames' softmax maxima.
    pub confidence: f64,
}

impl PhonemeRun {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoUtterance {
    pub utt_id: u64,
    pub runs: Vec<PhonemeRun>,
    /// Mean of the per-run confidences (1/L * sum s_i).
    pub sentence_confidence: f64,
}

impl PseudoUtterance {
    pub fn transcript(&self) -> Vec<u32> {
        self.runs.iter().map(|r| r.phoneme).collect()
    }

    pub fn run_durations(&self) -> Vec<u32> {
        self.runs.iter().map(|r| r.len() as u32).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.confidence).collect()
    }

    pub fn frame_count(&self) -> usize {
        self.runs.last().map_or(0, |r| r.end)
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoCorpus {
    pub lang: u32,
    pub asr_shots: usize,
    pub classifier_seed: u64,
    pub utterances: Vec<PseudoUtterance>,
}

/// Train the linear head (plus its layer weights) on the first `shots`
/// utterances of D_target, with frame targets expanded from the known
/// boundaries.
pub fn train_frame_classifier(
    split: &CorpusSplit,
    shots: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<FrameClassifier> {
    if split.d_target.is_empty() || shots == 0 {
        return Err(Error::Training("frame classifier needs labeled target data".into()));
    }
    let shots = shots.min(split.d_target.len());
    let lang = &split.target_lang;
    let n_classes = lang.inventory_size();
    let k = split.ssl.n_layers();
    let d_ssl = split.ssl.ssl_dim();

    // Pool every training frame (features per layer + local class target).
    let mut pooled: Vec<Tensor2> = (0..k).map(|_| Tensor2::zeros(0, 0)).collect();
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); k];
    let mut targets: Vec<usize> = Vec::new();
    for utt in &split.d_target[..shots] {
        let feats = split.ssl.features(utt)?;
        for (layer, store) in feats.layers.iter().zip(rows.iter_mut()) {
            for r in 0..layer.rows() {
                store.push(layer.row(r).to_vec());
            }
        }
        for label in utt.frame_labels() {
            targets.push(lang.local_index(label)?);
        }
    }
    for (dst, src) in pooled.iter_mut().zip(rows) {
        *dst = Tensor2::from_rows(&src)?;
    }
    let n_frames = targets.len();

    let mut params = ParamStore::new();
    let mut rng = seeds::rng_for(seed, "classifier-init", 0);
    params.insert("cls.layer_logits", Tensor2::zeros(1, k));
    params.insert("cls.head.w", init_uniform(&mut rng, d_ssl, n_classes, d_ssl));
    params.insert("cls.head.b", init_uniform(&mut rng, 1, n_classes, d_ssl));

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut step_rng = seeds::rng_for(seed, "classifier-steps", 0);
    use rand::Rng;
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_frames)
            .map(|_| step_rng.random_range(0..n_frames))
            .collect();
        let batch_targets: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
        let mut g = Graph::new();
        let logits_node = g.param(&params, "cls.layer_logits")?;
        let weights = g.softmax_rows(logits_node)?;
        let gathered: Vec<_> = pooled
            .iter()
            .map(|layer| {
                let leaf = g.leaf(layer.clone());
                g.gather_rows(leaf, batch.clone())
            })
            .collect::<Result<_>>()?;
        let summed = g.weighted_sum(weights, gathered)?;
        let w = g.param(&params, "cls.head.w")?;
        let b = g.param(&params, "cls.head.b")?;
        let logits = g.affine(summed, w, b)?;
        let loss = g.cross_entropy(logits, batch_targets, vec![1.0; cfg.batch_frames])?;
        params.zero_grads();
        let value = g.accumulate_grads(loss, &mut params)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "classifier loss".into(),
            });
        }
        params.adam_step(&adam, 1.0)?;
    }

    Ok(FrameClassifier {
        lang: lang.id,
        phoneme_ids: lang.phoneme_ids.clone(),
        params,
        shots,
        seed,
    })
}

impl FrameClassifier {
    /// Per-frame argmax class (local index) and softmax maximum.
    pub fn classify_frames(&self, feats: &LayeredFeatures) -> Result<(Vec<usize>, Vec<f64>)> {
        let logits = self.frame_logits(feats)?;
        let mut ids = Vec::with_capacity(logits.rows());
        let mut confs = Vec::with_capacity(logits.rows());
        for r in 0..logits.rows() {
            let p = softmax(logits.row(r))?;
            let (best, best_p) = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .expect("non-empty inventory");
            ids.push(best);
            confs.push(*best_p);
        }
        Ok((ids, confs))
    }

    fn frame_logits(&self, feats: &LayeredFeatures) -> Result<Tensor2> {
        let weights = softmax(self.params.value("cls.layer_logits")?.row(0))?;
        let (rows, _) = feats.layers[0].shape();
        let d = feats.layers[0].cols();
        let mut summed = Tensor2::zeros(rows, d);
        for (wk, layer) in weights.iter().zip(&feats.layers) {
            summed.add_scaled(layer, *wk)?;
        }
        let mut logits = summed.matmul(self.params.value("cls.head.w")?)?;
        let bias = self.params.value("cls.head.b")?.row(0).to_vec();
        for r in 0..logits.rows() {
            for (o, b) in logits.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(logits)
    }

    /// Fraction of frames whose argmax matches the reference labels.
    pub fn frame_accuracy(&self, feats: &LayeredFeatures, labels: &[u32]) -> Result<f64> {
        let (pred, _) = self.classify_frames(feats)?;
        if pred.len() != labels.len() {
            return Err(Error::dimension("frame_accuracy", labels.len(), pred.len()));
        }
        let hits = pred
            .iter()
            .zip(labels)
            .filter(|(p, l)| self.phoneme_ids[**p] == **l)
            .count();
        Ok(hits as f64 / pred.len().max(1) as f64)
    }
}

/// Merge consecutive identical frame predictions into runs; run confidence
/// is the arithmetic mean of the member frame confidences.
pub fn merge_consecutive(ids: &[u32], confs: &[f64]) -> Result<Vec<PhonemeRun>> {
    if ids.is_empty() {
        return Err(Error::Argument("merge_consecutive on empty input".into()));
    }
    if ids.len() != confs.len() {
        return Err(Error::dimension("merge_consecutive", ids.len(), confs.len()));
    }
    let mut runs: Vec<PhonemeRun> = Vec::new();
    let mut start = 0usize;
    let mut acc = 0f64;
    for i in 0..ids.len() {
        acc += confs[i];
        let end_of_run = i + 1 == ids.len() || ids[i + 1] != ids[i];
        if end_of_run {
            runs.push(PhonemeRun {
                phoneme: ids[i],
                start,
                end: i + 1,
                confidence: acc / (i + 1 - start) as f64,
            });
            start = i + 1;
            acc = 0.0;
        }
    }
    Ok(runs)
}

/// Label every unpaired utterance: per-frame argmax + confidence, merged
/// into runs, with the sentence confidence as the mean of run confidences.
pub fn pseudo_label(classifier: &FrameClassifier, split: &CorpusSplit) -> Result<PseudoCorpus> {
    let mut utterances = Vec::with_capacity(split.unpaired.len());
    for u in &split.unpaired {
        let feats = split.ssl.features_of(u.id(), u.frames())?;
        let (local, confs) = classifier.classify_frames(&feats)?;
        let global: Vec<u32> = local.iter().map(|&i| classifier.phoneme_ids[i]).collect();
        let runs = merge_consecutive(&global, &confs)?;
        let sentence_confidence =
            runs.iter().map(|r| r.confidence).sum::<f64>() / runs.len() as f64;
        utterances.push(PseudoUtterance {
            utt_id: u.id(),
            runs,
            sentence_confidence,
        });
    }
    Ok(PseudoCorpus {
        lang: classifier.lang,
        asr_shots: classifier.shots,
        classifier_seed: classifier.seed,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_split, CorpusConfig};

    #[test]
    fn merge_hand_example() {
        let runs = merge_consecutive(&[1, 1, 2, 2, 2, 1], &[0.9, 0.7, 0.6, 0.8, 0.4, 0.5]).unwrap();
        assert_eq!(runs.len(), 3);
        assert_eq!(runs[0].phoneme, 1);
        assert!((runs[0].confidence - 0.8).abs() < 1e-12);
        assert_eq!(runs[1].phoneme, 2);
        assert!((runs[1].confidence - 0.6).abs() < 1e-12);
        assert_eq!(runs[2].phoneme, 1);
        assert!((runs[2].confidence - 0.5).abs() < 1e-12);
        assert_eq!(runs[0].start..runs[0].end, 0..2);
        assert_eq!(runs[2].start..runs[2].end, 5..6);
    }

    #[test]
    fn merge_single_run() {
        let runs = merge_consecutive(&[3, 3, 3], &[0.3, 0.6, 0.9]).unwrap();
        assert_eq!(runs.len(), 1);
        assert!((runs[0].confidence - 0.6).abs() < 1e-12);
    }

    #[test]
    fn merge_empty_is_argument_error() {
        assert!(merge_consecutive(&[], &[]).is_err());
    }

    #[test]
    fn merge_round_trips_through_expansion() {
        // inverse-expansion oracle on random inputs
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..4u32)).collect();
            let confs: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let runs = merge_consecutive(&ids, &confs).unwrap();
            // runs tile the frame axis with no adjacent duplicates
            let mut cursor = 0;
            for w in runs.windows(2) {
                assert_ne!(w[0].phoneme, w[1].phoneme);
            }
            let mut expanded = Vec::new();
            for r in &runs {
                assert_eq!(r.start, cursor);
                assert!(r.end > r.start);
                cursor = r.end;
                expanded.extend(std::iter::repeat(r.phoneme).take(r.len()));
            }
            assert_eq!(cursor, n);
            assert_eq!(expanded, ids);
        }
    }

    fn noiseless_cfg() -> CorpusConfig {
        CorpusConfig {
            frame_noise: 0.0,
            ssl_noise: 0.0,
            n_shots: 4,
            coverage_shots: 4,
            unlabeled_minutes: 1.0,
            source_utts_per_lang: 4,
            eval_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_corpus_trains_to_high_frame_accuracy() {
        let split = make_split(77, &noiseless_cfg()).unwrap();
        let cls = train_frame_classifier(&split, 4, &ClassifierConfig::default(), 1).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for utt in &split.d_target {
            let feats = split.ssl.features(utt).unwrap();
            total += cls.frame_accuracy(&feats, &utt.frame_labels()).unwrap();
            n += 1;
        }
        let acc = total / n as f64;
        assert!(acc >= 0.99, "training frame accuracy {acc}");
    }

    #[test]
    fn classifier_training_is_deterministic_in_seed() {
        let split = make_split(78, &noiseless_cfg()).unwrap();
        let a = train_frame_classifier(&split, 4, &ClassifierConfig::default(), 9).unwrap();
        let b = train_frame_classifier(&split, 4, &ClassifierConfig::default(), 9).unwrap();
        assert_eq!(a.params.content_hash(), b.params.content_hash());
    }

    #[test]
    fn noiseless_pseudo_labels_match_hidden_truth() {
        let split = make_split(79, &noiseless_cfg()).unwrap();
        let cls = train_frame_classifier(&split, 4, &ClassifierConfig::default(), 2).unwrap();
        let pseudo = pseudo_label(&cls, &split).unwrap();
        assert_eq!(pseudo.utterances.len(), split.unpaired.len());
        for (pu, u) in pseudo.utterances.iter().zip(&split.unpaired) {
            let (truth, durs) = u.oracle_reference();
            assert_eq!(pu.transcript(), truth, "utt {}", u.id());
            let true_durs: Vec<u32> = durs.to_vec();
            assert_eq!(pu.run_durations(), true_durs);
        }
    }

    #[test]
    fn uniform_logit_classifier_yields_uniform_confidence() {
        let split = make_split(80, &noiseless_cfg()).unwrap();
        let mut cls = train_frame_classifier(&split, 4, &ClassifierConfig { steps: 1, ..Default::default() }, 3).unwrap();
        cls.params.value_mut("cls.head.w").unwrap().fill(0.0);
        cls.params.value_mut("cls.head.b").unwrap().fill(0.0);
        let p = split.target_lang.inventory_size() as f64;
        let u = &split.unpaired[0];
        let feats = split.ssl.features_of(u.id(), u.frames()).unwrap();
        let (_, confs) = cls.classify_frames(&feats).unwrap();
        for c in confs {
            assert!((c - 1.0 / p).abs() < 1e-12);
        }
    }

    #[test]
    fn sentence_confidence_is_mean_of_run_confidences() {
        let pu = PseudoUtterance {
            utt_id: 0,
            runs: vec![
                PhonemeRun { phoneme: 1, start: 0, end: 2, confidence: 0.4 },
                PhonemeRun { phoneme: 2, start: 2, end: 5, confidence: 0.8 },
            ],
            sentence_confidence: 0.6,
        };
        let mean = pu.confidences().iter().sum::<f64>() / pu.len() as f64;
        assert!((mean - 0.6).abs() < 1e-12);
        assert_eq!(pu.frame_count(), 5);
    }

    #[test]
    fn confidences_are_within_bounds() {
        let mut cfg = noiseless_cfg();
        cfg.frame_noise = 0.05;
        cfg.ssl_noise = 0.3;
        let split = make_split(81, &cfg).unwrap();
        let cls = train_frame_classifier(&split, 4, &ClassifierConfig::default(), 4).unwrap();
        let pseudo = pseudo_label(&cls, &split).unwrap();
        for pu in &pseudo.utterances {
            assert!(pu.sentence_confidence > 0.0 && pu.sentence_confidence <= 1.0);
            for r in &pu.runs {
                assert!(r.confidence > 0.0 && r.confidence <= 1.0);
            }
        }
    }
}
