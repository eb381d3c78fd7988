//! The toy synthesis network: per-language phoneme embedding table +
//! phoneme encoder, representation encoder with learnable layer weights,
//! shared encoder, duration predictor, and a frame decoder with
//! duration-based upsampling.
//!
//! Blocks are position-wise residual affines (`x + tanh(xW + b)`), small
//! enough for finite-difference checking of the whole composed model. An
//! optional single-head attention block can be enabled for the shared
//! encoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{LayeredFeatures, ToyLanguage};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{init_uniform, ParamStore};
use crate::seeds;
use crate::tensor::Tensor2;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub frame_dim: usize,
    pub ssl_dim: usize,
    pub ssl_layers: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Sinusoidal position features at the shared-encoder input (phoneme
    /// index) and the decoder input (frame index). Position-wise blocks are
    /// otherwise order-blind, so this is what makes few-shot adaptation
    /// genuinely have to generalize across positions.
    pub position_features: bool,
    pub position_scale: f64,
    /// Adds a single-head self-attention block in the shared encoder.
    pub shared_attention: bool,
    pub dur_loss_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 24,
            frame_dim: 16,
            ssl_dim: 24,
            ssl_layers: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            position_features: true,
            position_scale: 0.5,
            shared_attention: false,
            dur_loss_weight: 0.1,
        }
    }
}

/// Where a checkpoint came from; later stages validate against this.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
pub struct Provenance {
    pub stage: String,
    /// Probability of the representation branch during pretraining; mixing
    /// strategies require this to have been > 0.
    pub pretrain_p_repr: Option<f64>,
    pub world_seed: Option<u64>,
}

/// Which encoder feeds the shared encoder for one training sample.
#[derive(Clone, Debug)]
pub enum Branch<'a> {
    Phoneme,
    Representation,
    /// Per-phoneme source selection (true = phoneme encoder).
    Mixed { from_phn: &'a [bool] },
}

/// One training sample. `phonemes`/`durations` are the (possibly pseudo)
/// transcript; `target_frames` is always the real speech.
pub struct TrainItem<'a> {
    pub lang: u32,
    pub phonemes: &'a [u32],
    pub durations: &'a [u32],
    pub target_frames: &'a Tensor2,
    pub feats: Option<&'a LayeredFeatures>,
    pub frame_mask: &'a [f64],
    pub dur_mask: &'a [f64],
}

#[derive(Clone, Debug)]
pub struct SynthModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    /// Per-language embedding-table row order (global phoneme ids).
    pub tables: BTreeMap<u32, Vec<u32>>,
    pub provenance: Provenance,
}

pub fn emb_name(lang: u32) -> String {
    format!("emb.{lang}")
}

impl SynthModel {
    /// Fresh model with all encoder/decoder parameters initialized from
    /// `seed`. Embedding tables are added per language afterwards.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.ssl_layers < 2 {
            return Err(Error::Argument("ssl_layers must be >= 2".into()));
        }
        let h = cfg.hidden_dim;
        let mut params = ParamStore::new();
        let mut rng = seeds::rng_for(seed, "model-init", 0);
        let block = |params: &mut ParamStore, prefix: &str, n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            for i in 0..n {
                params.insert(format!("{prefix}.block{i}.w"), init_uniform(rng, h, h, h));
                params.insert(format!("{prefix}.block{i}.b"), init_uniform(rng, 1, h, h));
            }
        };
        block(&mut params, "phn", cfg.encoder_blocks, &mut rng);
        params.insert("rep.layer_logits", Tensor2::zeros(1, cfg.ssl_layers));
        params.insert("rep.proj.w", init_uniform(&mut rng, cfg.ssl_dim, h, cfg.ssl_dim));
        params.insert("rep.proj.b", init_uniform(&mut rng, 1, h, cfg.ssl_dim));
        block(&mut params, "rep", cfg.encoder_blocks, &mut rng);
        block(&mut params, "shared", cfg.encoder_blocks, &mut rng);
        if cfg.shared_attention {
            for name in ["q", "k", "v"] {
                params.insert(format!("shared.attn.{name}.w"), init_uniform(&mut rng, h, h, h));
                params.insert(format!("shared.attn.{name}.b"), init_uniform(&mut rng, 1, h, h));
            }
        }
        params.insert("dur.head.w", init_uniform(&mut rng, h, 1, h));
        params.insert("dur.head.b", init_uniform(&mut rng, 1, 1, h));
        block(&mut params, "dec", cfg.decoder_blocks, &mut rng);
        params.insert("dec.out.w", init_uniform(&mut rng, h, cfg.frame_dim, h));
        params.insert("dec.out.b", init_uniform(&mut rng, 1, cfg.frame_dim, h));
        // Generator projection starts as the identity so an untrained
        // generator reproduces the plain double-average.
        params.insert("gen.proj.w", Tensor2::eye(h));
        params.insert("gen.proj.b", Tensor2::zeros(1, h));
        Ok(SynthModel {
            cfg,
            params,
            tables: BTreeMap::new(),
            provenance: Provenance::default(),
        })
    }

    /// Install a randomly initialized embedding table for `lang`, replacing
    /// any previous table for that language.
    pub fn add_language(&mut self, lang: &ToyLanguage, seed: u64) {
        let h = self.cfg.hidden_dim;
        let mut rng = seeds::rng_for(seed, "emb-init", lang.id as u64);
        let table = init_uniform(&mut rng, lang.inventory_size(), h, h);
        self.set_language_table(lang, table);
    }

    /// Install an explicit embedding table (for generator initialization).
    pub fn set_language_table(&mut self, lang: &ToyLanguage, table: Tensor2) {
        self.params.insert(emb_name(lang.id), table);
        self.tables.insert(lang.id, lang.phoneme_ids.clone());
    }

    pub fn has_language(&self, lang: u32) -> bool {
        self.tables.contains_key(&lang)
    }

    /// Embedding-table row indices for a phoneme sequence.
    fn table_rows(&self, lang: u32, phonemes: &[u32]) -> Result<Vec<usize>> {
        let order = self
            .tables
            .get(&lang)
            .ok_or_else(|| Error::Argument(format!("no embedding table for language {lang}")))?;
        phonemes
            .iter()
            .map(|p| {
                order
                    .iter()
                    .position(|q| q == p)
                    .ok_or(Error::Vocabulary { lang, id: *p })
            })
            .collect()
    }

    fn residual_block(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = g.param(&self.params, &format!("{prefix}.w"))?;
        let b = g.param(&self.params, &format!("{prefix}.b"))?;
        let pre = g.affine(x, w, b)?;
        let act = g.tanh(pre);
        g.add(x, act)
    }

    fn attention_block(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let wq = g.param(&self.params, "shared.attn.q.w")?;
        let bq = g.param(&self.params, "shared.attn.q.b")?;
        let wk = g.param(&self.params, "shared.attn.k.w")?;
        let bk = g.param(&self.params, "shared.attn.k.b")?;
        let wv = g.param(&self.params, "shared.attn.v.w")?;
        let bv = g.param(&self.params, "shared.attn.v.b")?;
        let q = g.affine(x, wq, bq)?;
        let k = g.affine(x, wk, bk)?;
        let v = g.affine(x, wv, bv)?;
        let scores = g.matmul_nt(q, k)?;
        let scaled = g.scale(scores, 1.0 / (self.cfg.hidden_dim as f64).sqrt());
        let probs = g.softmax_rows(scaled)?;
        let ctx = g.matmul(probs, v)?;
        g.add(x, ctx)
    }

    /// Phoneme branch: embedding lookup followed by the encoder blocks.
    pub fn phn_encode_nodes(&self, g: &mut Graph, lang: u32, phonemes: &[u32]) -> Result<NodeId> {
        let rows = self.table_rows(lang, phonemes)?;
        let table = g.param(&self.params, &emb_name(lang))?;
        self.phn_encode_from(g, table, rows)
    }

    /// Phoneme branch from an arbitrary embedding-table node (used by the
    /// embedding generator, whose table is itself a graph computation).
    pub fn phn_encode_from(&self, g: &mut Graph, table: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let mut x = g.gather_rows(table, rows)?;
        for i in 0..self.cfg.encoder_blocks {
            x = self.residual_block(g, x, &format!("phn.block{i}"))?;
        }
        Ok(x)
    }

    /// Representation branch: softmax-weighted layer sum, projection,
    /// frame-level blocks, then per-segment averaging down to phoneme level.
    pub fn rep_encode_nodes(
        &self,
        g: &mut Graph,
        feats: &LayeredFeatures,
        seg_lens: &[usize],
    ) -> Result<NodeId> {
        if feats.n_layers() != self.cfg.ssl_layers {
            return Err(Error::dimension("rep_encode layers", self.cfg.ssl_layers, feats.n_layers()));
        }
        let total: usize = seg_lens.iter().sum();
        if total != feats.frame_count() {
            return Err(Error::Alignment(format!(
                "boundaries cover {total} frames but features have {}",
                feats.frame_count()
            )));
        }
        let logits = g.param(&self.params, "rep.layer_logits")?;
        let weights = g.softmax_rows(logits)?;
        let layer_nodes: Vec<NodeId> = feats.layers.iter().map(|l| g.leaf(l.clone())).collect();
        let summed = g.weighted_sum(weights, layer_nodes)?;
        let pw = g.param(&self.params, "rep.proj.w")?;
        let pb = g.param(&self.params, "rep.proj.b")?;
        let mut x = g.affine(summed, pw, pb)?;
        for i in 0..self.cfg.encoder_blocks {
            x = self.residual_block(g, x, &format!("rep.block{i}"))?;
        }
        g.segment_mean(x, seg_lens.to_vec())
    }

    /// Shared encoder over phoneme-level input (adds position features when
    /// enabled).
    pub fn shared_nodes(&self, g: &mut Graph, c: NodeId) -> Result<NodeId> {
        let mut x = c;
        if self.cfg.position_features {
            let n = g.value(c).rows();
            let pe = g.leaf(position_encoding(n, self.cfg.hidden_dim, self.cfg.position_scale));
            x = g.add(x, pe)?;
        }
        if self.cfg.shared_attention {
            x = self.attention_block(g, x)?;
        }
        for i in 0..self.cfg.encoder_blocks {
            x = self.residual_block(g, x, &format!("shared.block{i}"))?;
        }
        Ok(x)
    }

    /// Duration head on the shared-encoder output (log-durations, L x 1).
    pub fn duration_nodes(&self, g: &mut Graph, e: NodeId) -> Result<NodeId> {
        let w = g.param(&self.params, "dur.head.w")?;
        let b = g.param(&self.params, "dur.head.b")?;
        g.affine(e, w, b)
    }

    /// Length-regulate and decode to frames.
    pub fn decode_nodes(&self, g: &mut Graph, e: NodeId, durations: &[u32]) -> Result<NodeId> {
        if durations.len() != g.value(e).rows() {
            return Err(Error::dimension("decode", g.value(e).rows(), durations.len()));
        }
        if durations.iter().any(|&d| d == 0) {
            return Err(Error::Duration("zero duration in length regulator".into()));
        }
        let reps: Vec<usize> = durations.iter().map(|&d| d as usize).collect();
        let mut x = g.repeat_rows(e, reps)?;
        if self.cfg.position_features {
            let n = g.value(x).rows();
            let pe = g.leaf(position_encoding(n, self.cfg.hidden_dim, self.cfg.position_scale));
            x = g.add(x, pe)?;
        }
        for i in 0..self.cfg.decoder_blocks {
            x = self.residual_block(g, x, &format!("dec.block{i}"))?;
        }
        let w = g.param(&self.params, "dec.out.w")?;
        let b = g.param(&self.params, "dec.out.b")?;
        g.affine(x, w, b)
    }

    /// Full training loss for one sample:
    /// masked frame MSE + dur_loss_weight * masked log-duration MSE.
    pub fn forward_loss(&self, g: &mut Graph, item: &TrainItem, branch: &Branch) -> Result<NodeId> {
        let l = item.phonemes.len();
        if item.durations.len() != l || item.dur_mask.len() != l {
            return Err(Error::dimension("forward_loss durations", l, item.durations.len()));
        }
        let total: usize = item.durations.iter().map(|&d| d as usize).sum();
        if item.target_frames.rows() != total || item.frame_mask.len() != total {
            return Err(Error::dimension("forward_loss frames", total, item.target_frames.rows()));
        }
        let seg_lens: Vec<usize> = item.durations.iter().map(|&d| d as usize).collect();

        let c = match branch {
            Branch::Phoneme => self.phn_encode_nodes(g, item.lang, item.phonemes)?,
            Branch::Representation => {
                let feats = item.feats.ok_or_else(|| {
                    Error::Argument("representation branch requires features".into())
                })?;
                self.rep_encode_nodes(g, feats, &seg_lens)?
            }
            Branch::Mixed { from_phn } => {
                if from_phn.len() != l {
                    return Err(Error::Alignment(format!(
                        "mix plan length {} vs {} phonemes",
                        from_phn.len(),
                        l
                    )));
                }
                let feats = item.feats.ok_or_else(|| {
                    Error::Argument("mixed branch requires features".into())
                })?;
                let c_phn = self.phn_encode_nodes(g, item.lang, item.phonemes)?;
                let c_repr = self.rep_encode_nodes(g, feats, &seg_lens)?;
                g.mix_rows(c_phn, c_repr, from_phn.to_vec())?
            }
        };

        self.supervised_loss_from_c(g, c, item)
    }

    /// Losses downstream of the (already selected or mixed) phoneme-level
    /// representation: shared encoder, masked duration loss, masked frame
    /// reconstruction loss.
    pub fn supervised_loss_from_c(&self, g: &mut Graph, c: NodeId, item: &TrainItem) -> Result<NodeId> {
        let e = self.shared_nodes(g, c)?;
        let dur_pred = self.duration_nodes(g, e)?;
        let log_dur: Vec<f64> = item.durations.iter().map(|&d| (d as f64).ln()).collect();
        let dur_loss = g.masked_mse(dur_pred, Tensor2::col_vec(&log_dur), item.dur_mask.to_vec())?;
        let frames_pred = self.decode_nodes(g, e, item.durations)?;
        let frame_loss = g.masked_mse(frames_pred, item.target_frames.clone(), item.frame_mask.to_vec())?;
        let dur_scaled = g.scale(dur_loss, self.cfg.dur_loss_weight);
        g.add(frame_loss, dur_scaled)
    }

    // ---- inference-mode wrappers ----

    pub fn phn_encode(&self, lang: u32, phonemes: &[u32]) -> Result<Tensor2> {
        let mut g = Graph::new();
        let c = self.phn_encode_nodes(&mut g, lang, phonemes)?;
        Ok(g.value(c).clone())
    }

    pub fn rep_encode(&self, feats: &LayeredFeatures, seg_lens: &[usize]) -> Result<Tensor2> {
        let mut g = Graph::new();
        let c = self.rep_encode_nodes(&mut g, feats, seg_lens)?;
        Ok(g.value(c).clone())
    }

    /// Integer durations from the duration head: round(exp(raw)), clamped
    /// to at least 1 (and capped to keep degenerate heads bounded).
    pub fn predict_durations(&self, c: &Tensor2) -> Result<Vec<u32>> {
        let mut g = Graph::new();
        let cn = g.leaf(c.clone());
        let e = self.shared_nodes(&mut g, cn)?;
        let d = self.duration_nodes(&mut g, e)?;
        Ok(g.value(d)
            .data()
            .iter()
            .map(|&x| x.exp().round().clamp(1.0, 1000.0) as u32)
            .collect())
    }

    /// Decode phoneme-level representations to frames with the given
    /// durations (shared encoder applied inside).
    pub fn synthesize(&self, c: &Tensor2, durations: &[u32]) -> Result<Tensor2> {
        let mut g = Graph::new();
        let cn = g.leaf(c.clone());
        let e = self.shared_nodes(&mut g, cn)?;
        let out = self.decode_nodes(&mut g, e, durations)?;
        Ok(g.value(out).clone())
    }

    /// End-to-end inference from a transcript: predicted durations drive the
    /// length regulator, so duration-model failures surface in the output.
    pub fn infer(&self, lang: u32, phonemes: &[u32]) -> Result<(Tensor2, Vec<u32>)> {
        let mut g = Graph::new();
        let c = self.phn_encode_nodes(&mut g, lang, phonemes)?;
        let e = self.shared_nodes(&mut g, c)?;
        let dur_node = self.duration_nodes(&mut g, e)?;
        let durations: Vec<u32> = g
            .value(dur_node)
            .data()
            .iter()
            .map(|&x| x.exp().round().clamp(1.0, 1000.0) as u32)
            .collect();
        let out = self.decode_nodes(&mut g, e, &durations)?;
        Ok((g.value(out).clone(), durations))
    }
}

/// Sinusoidal position features, scaled.
pub fn position_encoding(n: usize, dim: usize, scale: f64) -> Tensor2 {
    let mut pe = Tensor2::zeros(n, dim);
    for i in 0..n {
        for k in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / dim as f64);
            let angle = i as f64 * rate;
            let v = if k % 2 == 0 { angle.sin() } else { angle.cos() };
            pe.set(i, k, scale * v);
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_language, gen_utterance, CorpusConfig, SslSimulator};
    use crate::params::AdamConfig;

    fn test_cfg() -> ModelConfig {
        ModelConfig {
            position_features: false,
            ..Default::default()
        }
    }

    fn corpus_cfg() -> CorpusConfig {
        CorpusConfig::default()
    }

    fn model_with_lang(seed: u64) -> (SynthModel, ToyLanguage) {
        let lang = gen_language(seed, 0, &corpus_cfg()).unwrap();
        let mut m = SynthModel::new(test_cfg(), seed).unwrap();
        m.add_language(&lang, seed);
        (m, lang)
    }

    #[test]
    fn phn_encode_is_deterministic_and_shaped() {
        let (m, lang) = model_with_lang(1);
        for l in [1usize, 5, 64] {
            let seq: Vec<u32> = (0..l).map(|i| lang.phoneme_ids[i % lang.inventory_size()]).collect();
            let a = m.phn_encode(lang.id, &seq).unwrap();
            let b = m.phn_encode(lang.id, &seq).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.shape(), (l, m.cfg.hidden_dim));
        }
    }

    #[test]
    fn phn_encode_unknown_id_is_vocabulary_error() {
        let (m, lang) = model_with_lang(1);
        let err = m.phn_encode(lang.id, &[9_999_999]).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { .. }));
    }

    #[test]
    fn phn_encode_is_position_equivariant_without_position_features() {
        let (m, lang) = model_with_lang(2);
        let a = lang.phoneme_ids[0];
        let b = lang.phoneme_ids[1];
        let fwd = m.phn_encode(lang.id, &[a, b]).unwrap();
        let rev = m.phn_encode(lang.id, &[b, a]).unwrap();
        assert_eq!(fwd.row(0), rev.row(1));
        assert_eq!(fwd.row(1), rev.row(0));
    }

    #[test]
    fn rep_encode_single_segment_is_temporal_mean() {
        let (m, lang) = model_with_lang(3);
        let cc = corpus_cfg();
        let ssl = SslSimulator::generate(3, cc.ssl_layers, cc.frame_dim, cc.ssl_dim, 0.0).unwrap();
        let mut utt = gen_utterance(&lang, 4, (3, 3)).unwrap();
        utt.id = 77;
        let feats = ssl.features(&utt).unwrap();
        let n = feats.frame_count();
        let c = m.rep_encode(&feats, &[n]).unwrap();
        assert_eq!(c.rows(), 1);
        // oracle: mean over block outputs = rep_encode with unit segments,
        // averaged by hand
        let per_frame = m.rep_encode(&feats, &vec![1; n]).unwrap();
        for j in 0..c.cols() {
            let mean: f64 = (0..n).map(|i| per_frame.get(i, j)).sum::<f64>() / n as f64;
            assert!((c.get(0, j) - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn one_hot_layer_weights_ignore_other_layers() {
        let (mut m, lang) = model_with_lang(5);
        let cc = corpus_cfg();
        // push layer 2's logit far up: softmax weight ~ 1
        let logits = m.params.value_mut("rep.layer_logits").unwrap();
        logits.fill(-40.0);
        logits.set(0, 2, 40.0);
        let ssl = SslSimulator::generate(5, cc.ssl_layers, cc.frame_dim, cc.ssl_dim, 0.0).unwrap();
        let mut utt = gen_utterance(&lang, 6, (2, 4)).unwrap();
        utt.id = 5;
        let mut feats = ssl.features(&utt).unwrap();
        let segs = utt.segment_lengths();
        let base = m.rep_encode(&feats, &segs).unwrap();
        // perturbing any other layer leaves the output unchanged
        for k in [0usize, 1, 3] {
            feats.layers[k].data_mut().iter_mut().for_each(|v| *v += 123.0);
        }
        let perturbed = m.rep_encode(&feats, &segs).unwrap();
        for (a, b) in base.data().iter().zip(perturbed.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn rep_encode_rejects_bad_boundaries() {
        let (m, lang) = model_with_lang(6);
        let cc = corpus_cfg();
        let ssl = SslSimulator::generate(6, cc.ssl_layers, cc.frame_dim, cc.ssl_dim, 0.0).unwrap();
        let mut utt = gen_utterance(&lang, 7, (2, 2)).unwrap();
        utt.id = 6;
        let feats = ssl.features(&utt).unwrap();
        let err = m.rep_encode(&feats, &[feats.frame_count() + 3]).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn synthesize_frame_counts() {
        let (m, lang) = model_with_lang(7);
        let mut rng = seeds::rng(7);
        use rand::Rng;
        for _ in 0..100 {
            let l = rng.random_range(1..10usize);
            let seq: Vec<u32> = (0..l).map(|i| lang.phoneme_ids[i % lang.inventory_size()]).collect();
            let durs: Vec<u32> = (0..l).map(|_| rng.random_range(1..5u32)).collect();
            let c = m.phn_encode(lang.id, &seq).unwrap();
            let frames = m.synthesize(&c, &durs).unwrap();
            let want: usize = durs.iter().map(|&d| d as usize).sum();
            assert_eq!(frames.rows(), want);
            assert_eq!(frames.cols(), m.cfg.frame_dim);
        }
    }

    #[test]
    fn unit_durations_give_one_frame_per_phoneme() {
        let (m, lang) = model_with_lang(8);
        let seq = &lang.phoneme_ids[..3];
        let c = m.phn_encode(lang.id, seq).unwrap();
        let frames = m.synthesize(&c, &[1, 1, 1]).unwrap();
        assert_eq!(frames.rows(), 3);
    }

    #[test]
    fn doubling_durations_repeats_rows_pairwise_before_blocks() {
        // with position features off the decoder is position-wise, so
        // doubled durations exactly duplicate output rows
        let (m, lang) = model_with_lang(9);
        let seq = &lang.phoneme_ids[..2];
        let c = m.phn_encode(lang.id, seq).unwrap();
        let single = m.synthesize(&c, &[1, 1]).unwrap();
        let doubled = m.synthesize(&c, &[2, 2]).unwrap();
        assert_eq!(doubled.rows(), 4);
        assert_eq!(doubled.row(0), single.row(0));
        assert_eq!(doubled.row(1), single.row(0));
        assert_eq!(doubled.row(2), single.row(1));
        assert_eq!(doubled.row(3), single.row(1));
    }

    #[test]
    fn zero_duration_is_a_duration_error() {
        let (m, lang) = model_with_lang(10);
        let c = m.phn_encode(lang.id, &lang.phoneme_ids[..2]).unwrap();
        let err = m.synthesize(&c, &[1, 0]).unwrap_err();
        assert!(matches!(err, Error::Duration(_)));
    }

    #[test]
    fn zero_duration_head_predicts_round_exp_bias() {
        let (mut m, lang) = model_with_lang(11);
        m.params.value_mut("dur.head.w").unwrap().fill(0.0);
        m.params.value_mut("dur.head.b").unwrap().fill(1.2);
        let c = m.phn_encode(lang.id, &lang.phoneme_ids[..4]).unwrap();
        let durs = m.predict_durations(&c).unwrap();
        let want = (1.2f64).exp().round() as u32;
        assert_eq!(durs, vec![want; 4]);
        // strongly negative raw output clamps to 1
        m.params.value_mut("dur.head.b").unwrap().fill(-10.0);
        let durs = m.predict_durations(&c).unwrap();
        assert_eq!(durs, vec![1; 4]);
    }

    #[test]
    fn all_zero_masks_give_zero_loss_and_zero_gradients() {
        let (mut m, lang) = model_with_lang(12);
        let cc = corpus_cfg();
        let ssl = SslSimulator::generate(12, cc.ssl_layers, cc.frame_dim, cc.ssl_dim, cc.ssl_noise).unwrap();
        let mut utt = gen_utterance(&lang, 13, (3, 5)).unwrap();
        utt.id = 12;
        let feats = ssl.features(&utt).unwrap();
        let item = TrainItem {
            lang: lang.id,
            phonemes: &utt.phonemes,
            durations: &utt.durations,
            target_frames: &utt.frames,
            feats: Some(&feats),
            frame_mask: &vec![0.0; utt.frame_count()],
            dur_mask: &vec![0.0; utt.len()],
        };
        let mut g = Graph::new();
        let loss = m.forward_loss(&mut g, &item, &Branch::Phoneme).unwrap();
        assert_eq!(g.scalar(loss), 0.0);
        g.accumulate_grads(loss, &mut m.params).unwrap();
        for name in m.params.names().map(String::from).collect::<Vec<_>>() {
            assert!(
                m.params.grad(&name).unwrap().data().iter().all(|&v| v == 0.0),
                "nonzero grad in {name}"
            );
        }
    }

    #[test]
    fn branch_isolation_phoneme_branch_leaves_rep_encoder_untouched() {
        let (mut m, lang) = model_with_lang(13);
        let utt = gen_utterance(&lang, 14, (3, 5)).unwrap();
        let item = TrainItem {
            lang: lang.id,
            phonemes: &utt.phonemes,
            durations: &utt.durations,
            target_frames: &utt.frames,
            feats: None,
            frame_mask: &vec![1.0; utt.frame_count()],
            dur_mask: &vec![1.0; utt.len()],
        };
        let mut g = Graph::new();
        let loss = m.forward_loss(&mut g, &item, &Branch::Phoneme).unwrap();
        g.accumulate_grads(loss, &mut m.params).unwrap();
        for name in m.params.names().map(String::from).collect::<Vec<_>>() {
            let grad_norm: f64 = m.params.grad(&name).unwrap().data().iter().map(|v| v * v).sum();
            if name.starts_with("rep.") {
                assert_eq!(grad_norm, 0.0, "{name} received gradient on phoneme branch");
            }
        }
        // and the phoneme path did get gradient
        let g_emb: f64 = m.params.grad(&emb_name(lang.id)).unwrap().data().iter().map(|v| v * v).sum();
        assert!(g_emb > 0.0);
    }

    #[test]
    fn branch_isolation_representation_branch_leaves_phoneme_encoder_untouched() {
        let (mut m, lang) = model_with_lang(14);
        let cc = corpus_cfg();
        let ssl = SslSimulator::generate(14, cc.ssl_layers, cc.frame_dim, cc.ssl_dim, cc.ssl_noise).unwrap();
        let mut utt = gen_utterance(&lang, 15, (3, 5)).unwrap();
        utt.id = 14;
        let feats = ssl.features(&utt).unwrap();
        let item = TrainItem {
            lang: lang.id,
            phonemes: &utt.phonemes,
            durations: &utt.durations,
            target_frames: &utt.frames,
            feats: Some(&feats),
            frame_mask: &vec![1.0; utt.frame_count()],
            dur_mask: &vec![1.0; utt.len()],
        };
        let mut g = Graph::new();
        let loss = m.forward_loss(&mut g, &item, &Branch::Representation).unwrap();
        g.accumulate_grads(loss, &mut m.params).unwrap();
        for name in m.params.names().map(String::from).collect::<Vec<_>>() {
            let grad_norm: f64 = m.params.grad(&name).unwrap().data().iter().map(|v| v * v).sum();
            if name.starts_with("phn.") || name.starts_with("emb.") {
                assert_eq!(grad_norm, 0.0, "{name} received gradient on representation branch");
            }
        }
    }

    #[test]
    fn c_phn_and_c_repr_share_shape() {
        let (m, lang) = model_with_lang(15);
        let cc = corpus_cfg();
        let ssl = SslSimulator::generate(15, cc.ssl_layers, cc.frame_dim, cc.ssl_dim, cc.ssl_noise).unwrap();
        let mut utt = gen_utterance(&lang, 16, (2, 8)).unwrap();
        utt.id = 15;
        let feats = ssl.features(&utt).unwrap();
        let c_phn = m.phn_encode(lang.id, &utt.phonemes).unwrap();
        let c_repr = m.rep_encode(&feats, &utt.segment_lengths()).unwrap();
        assert_eq!(c_phn.shape(), c_repr.shape());
        assert_eq!(c_repr.rows(), utt.len());
    }

    #[test]
    fn missing_features_for_representation_branch_is_an_input_error() {
        let (m, lang) = model_with_lang(16);
        let utt = gen_utterance(&lang, 17, (2, 3)).unwrap();
        let item = TrainItem {
            lang: lang.id,
            phonemes: &utt.phonemes,
            durations: &utt.durations,
            target_frames: &utt.frames,
            feats: None,
            frame_mask: &vec![1.0; utt.frame_count()],
            dur_mask: &vec![1.0; utt.len()],
        };
        let mut g = Graph::new();
        let err = m.forward_loss(&mut g, &item, &Branch::Representation).unwrap_err();
        assert!(err.to_string().contains("features"), "{err}");
    }

    // Overfit sanity oracles: on a noiseless corpus a single utterance is
    // learnable to near-zero loss from either branch.
    fn overfit(branch_is_phoneme: bool) -> f64 {
        let mut cc = corpus_cfg();
        cc.frame_noise = 0.0;
        cc.ssl_noise = 0.0;
        let lang = gen_language(20, 0, &cc).unwrap();
        let ssl = SslSimulator::generate(20, cc.ssl_layers, cc.frame_dim, cc.ssl_dim, 0.0).unwrap();
        let mut utt = gen_utterance(&lang, 21, (4, 4)).unwrap();
        utt.id = 20;
        let feats = ssl.features(&utt).unwrap();
        let mut m = SynthModel::new(test_cfg(), 20).unwrap();
        m.add_language(&lang, 20);
        let adam = AdamConfig::with_lr(1e-2);
        let frame_mask = vec![1.0; utt.frame_count()];
        let dur_mask = vec![1.0; utt.len()];
        let mut last = f64::INFINITY;
        for _ in 0..2000 {
            let item = TrainItem {
                lang: lang.id,
                phonemes: &utt.phonemes,
                durations: &utt.durations,
                target_frames: &utt.frames,
                feats: Some(&feats),
                frame_mask: &frame_mask,
                dur_mask: &dur_mask,
            };
            let branch = if branch_is_phoneme {
                Branch::Phoneme
            } else {
                Branch::Representation
            };
            let mut g = Graph::new();
            let loss = m.forward_loss(&mut g, &item, &branch).unwrap();
            m.params.zero_grads();
            last = g.accumulate_grads(loss, &mut m.params).unwrap();
            m.params.adam_step(&adam, 1.0).unwrap();
            if last < 5e-4 {
                break;
            }
        }
        last
    }

    #[test]
    fn overfit_single_utterance_phoneme_branch() {
        let loss = overfit(true);
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn overfit_single_utterance_representation_branch() {
        let loss = overfit(false);
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn composed_model_passes_grad_check() {
        // small model so the finite-difference sweep stays cheap
        let cc = CorpusConfig {
            inventory_size: 5,
            frame_dim: 6,
            ssl_dim: 8,
            ssl_layers: 3,
            ..Default::default()
        };
        let mcfg = ModelConfig {
            hidden_dim: 8,
            frame_dim: 6,
            ssl_dim: 8,
            ssl_layers: 3,
            position_features: true,
            position_scale: 0.5,
            shared_attention: true,
            dur_loss_weight: 0.1,
            ..Default::default()
        };
        let lang = gen_language(30, 0, &cc).unwrap();
        let ssl = SslSimulator::generate(30, cc.ssl_layers, cc.frame_dim, cc.ssl_dim, cc.ssl_noise).unwrap();
        let mut utt = gen_utterance(&lang, 31, (4, 4)).unwrap();
        utt.id = 30;
        let feats = ssl.features(&utt).unwrap();
        let mut m = SynthModel::new(mcfg, 30).unwrap();
        m.add_language(&lang, 30);
        let from_phn: Vec<bool> = (0..utt.len()).map(|i| i % 2 == 0).collect();
        let frame_mask = vec![1.0; utt.frame_count()];
        let dur_mask = vec![1.0; utt.len()];
        let mut store = m.params.clone();
        let mut builder = |g: &mut Graph, store: &ParamStore| {
            let shadow = SynthModel {
                cfg: m.cfg.clone(),
                params: store.clone(),
                tables: m.tables.clone(),
                provenance: Provenance::default(),
            };
            let item = TrainItem {
                lang: lang.id,
                phonemes: &utt.phonemes,
                durations: &utt.durations,
                target_frames: &utt.frames,
                feats: Some(&feats),
                frame_mask: &frame_mask,
                dur_mask: &dur_mask,
            };
            shadow.forward_loss(g, &item, &Branch::Mixed { from_phn: &from_phn })
        };
        let report = crate::gradcheck::grad_check(&mut store, &mut builder, 1e-5).unwrap();
        assert!(report.worst < 1e-3, "worst {}", report.worst);
    }
}
