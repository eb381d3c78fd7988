//! Three-stage adaptation: mix pretraining on the source languages, an
//! optional embedding-generator stage, and strategy-driven fine-tuning on
//! the target language's labeled shots plus the pseudo corpus.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, FeatureCache, ToyLanguage, Utterance};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{emb_name, Branch, SynthModel, TrainItem};
use crate::params::AdamConfig;
use crate::pseudolabel::PseudoCorpus;
use crate::seeds;
use crate::strategy::{calibrate, MixKind, SelectionPlan, StrategyConfig};
use crate::tensor::Tensor2;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PretrainConfig {
    /// Probability that a sample trains the representation branch.
    /// 0 recovers the no-mix-pretraining baseline.
    pub p_repr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            p_repr: 0.5,
            steps: 1500,
            batch_size: 6,
            adam: AdamConfig::default(),
            seed: 101,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub steps: usize,
    /// Utterances per step that produce the table.
    pub support: usize,
    /// Utterances per step scored against the generated table.
    pub query: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            steps: 300,
            support: 8,
            query: 4,
            adam: AdamConfig::default(),
            seed: 202,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingInit {
    Random,
    Generator,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FinetuneConfig {
    pub strategy: StrategyConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// How many labeled target utterances to use (prefix of D_target).
    pub shots: usize,
    pub embedding_init: EmbeddingInit,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            strategy: StrategyConfig::new(MixKind::HardPhonemeMix, 0.75),
            steps: 400,
            batch_size: 4,
            adam: AdamConfig::default(),
            seed: 303,
            shots: 16,
            embedding_init: EmbeddingInit::Random,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub final_loss: f64,
    pub phoneme_branch_count: usize,
    pub repr_branch_count: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct GeneratorReport {
    pub final_loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FinetuneReport {
    pub threshold: f64,
    pub kept_pseudo: usize,
    pub total_pseudo: usize,
    pub final_loss: f64,
}

/// Manifest describing one stage run; written next to stage checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageManifest {
    pub format_version: u32,
    pub stage: String,
    pub config_hash: String,
    pub world_seed: u64,
    pub seed: u64,
}

/// Stage 1 — joint pretraining on the source languages with a per-sample
/// random branch between the phoneme and representation encoders.
pub fn mix_pretrain(
    model: &mut SynthModel,
    split: &CorpusSplit,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if !(0.0..1.0).contains(&cfg.p_repr) {
        return Err(Error::Config(format!(
            "p_repr must be in [0, 1), got {}",
            cfg.p_repr
        )));
    }
    if split.source.is_empty() || split.source.iter().any(|b| b.is_empty()) {
        return Err(Error::Training("pretraining needs source data".into()));
    }
    let mut report = PretrainReport::default();
    if split.source.len() < 2 {
        report.warnings.push(
            "single-language source corpus: cross-lingual transfer claim weakens".into(),
        );
    }
    for lang in &split.source_langs {
        if !model.has_language(lang.id) {
            model.add_language(lang, seeds::derive(cfg.seed, "pretrain-emb", lang.id as u64));
        }
    }
    model.params.set_all_trainable(true);
    model.params.reset_optimizer();

    let mut cache = FeatureCache::new();
    let mut rng = seeds::rng_for(cfg.seed, "pretrain", 0);
    let mut last = 0.0;
    for step in 0..cfg.steps {
        model.params.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let lang_ix = rng.random_range(0..split.source.len());
            let utt_ix = rng.random_range(0..split.source[lang_ix].len());
            let take_repr = rng.random_bool(cfg.p_repr);
            let utt = &split.source[lang_ix][utt_ix];
            let frame_mask = vec![1.0; utt.frame_count()];
            let dur_mask = vec![1.0; utt.len()];
            let mut g = Graph::new();
            let loss = if take_repr {
                report.repr_branch_count += 1;
                let feats = cache.get(&split.ssl, utt)?.clone();
                let item = TrainItem {
                    lang: utt.lang,
                    phonemes: &utt.phonemes,
                    durations: &utt.durations,
                    target_frames: &utt.frames,
                    feats: Some(&feats),
                    frame_mask: &frame_mask,
                    dur_mask: &dur_mask,
                };
                model.forward_loss(&mut g, &item, &Branch::Representation)?
            } else {
                report.phoneme_branch_count += 1;
                let item = TrainItem {
                    lang: utt.lang,
                    phonemes: &utt.phonemes,
                    durations: &utt.durations,
                    target_frames: &utt.frames,
                    feats: None,
                    frame_mask: &frame_mask,
                    dur_mask: &dur_mask,
                };
                model.forward_loss(&mut g, &item, &Branch::Phoneme)?
            };
            let v = g.accumulate_grads(loss, &mut model.params)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: "pretraining loss".into(),
                });
            }
            batch_loss += v;
        }
        last = batch_loss / cfg.batch_size as f64;
        model.params.adam_step(&cfg.adam, 1.0 / cfg.batch_size as f64)?;
    }
    report.final_loss = last;
    model.provenance.stage = "pretrain".into();
    model.provenance.pretrain_p_repr = Some(cfg.p_repr);
    model.provenance.world_seed = Some(split.world_seed);
    Ok(report)
}

/// Group phoneme-level representation rows by phoneme and double-average
/// them into an embedding table node: first within each occurrence (already
/// done by segment averaging), then across occurrences, then the learned
/// projection. Returns the table node plus its row order.
fn generate_table_nodes(
    model: &SynthModel,
    g: &mut Graph,
    items: &[(NodeId, Vec<u32>)],
) -> Result<(NodeId, Vec<u32>)> {
    let mut occurrence: Vec<(u32, usize)> = Vec::new();
    let mut offset = 0usize;
    for (node, phonemes) in items {
        let rows = g.value(*node).rows();
        if rows != phonemes.len() {
            return Err(Error::Alignment(format!(
                "representation rows {rows} vs {} phonemes",
                phonemes.len()
            )));
        }
        for (r, p) in phonemes.iter().enumerate() {
            occurrence.push((*p, offset + r));
        }
        offset += rows;
    }
    if occurrence.is_empty() {
        return Err(Error::Argument("generate_table over no occurrences".into()));
    }
    occurrence.sort_by_key(|(p, r)| (*p, *r));
    let order: Vec<usize> = occurrence.iter().map(|(_, r)| *r).collect();
    let mut covered: Vec<u32> = Vec::new();
    let mut group_sizes: Vec<usize> = Vec::new();
    for (p, _) in &occurrence {
        if covered.last() == Some(p) {
            *group_sizes.last_mut().expect("non-empty") += 1;
        } else {
            covered.push(*p);
            group_sizes.push(1);
        }
    }
    let parts: Vec<NodeId> = items.iter().map(|(n, _)| *n).collect();
    let stacked = g.concat_rows(parts)?;
    let grouped = g.gather_rows(stacked, order)?;
    let averaged = g.segment_mean(grouped, group_sizes)?;
    let w = g.param(&model.params, "gen.proj.w")?;
    let b = g.param(&model.params, "gen.proj.b")?;
    let table = g.affine(averaged, w, b)?;
    Ok((table, covered))
}

/// Stage 2 — learn the embedding-generator projection: each step builds a
/// table from a support subset of one source language and scores a query
/// subset with it; only `gen.*` parameters update.
pub fn train_embedding_generator(
    model: &mut SynthModel,
    split: &CorpusSplit,
    cfg: &GeneratorConfig,
) -> Result<GeneratorReport> {
    if model.provenance.stage.is_empty() {
        return Err(Error::Training(
            "embedding-generator training requires a pretrained checkpoint".into(),
        ));
    }
    if cfg.support == 0 || cfg.query == 0 {
        return Err(Error::Config("support and query sizes must be positive".into()));
    }
    model.params.set_all_trainable(false);
    model.params.set_trainable_prefix("gen.", true);
    model.params.reset_optimizer();

    let mut cache = FeatureCache::new();
    let mut rng = seeds::rng_for(cfg.seed, "generator", 0);
    let mut last = 0.0;
    const SPLIT_RETRIES: usize = 50;
    for step in 0..cfg.steps {
        let lang_ix = rng.random_range(0..split.source.len());
        let bucket = &split.source[lang_ix];
        if bucket.len() < cfg.support + cfg.query {
            return Err(Error::Training(format!(
                "language bucket has {} utterances; need {}",
                bucket.len(),
                cfg.support + cfg.query
            )));
        }
        // support/query split with support covering every query phoneme
        let mut chosen: Option<(Vec<usize>, Vec<usize>)> = None;
        for _ in 0..SPLIT_RETRIES {
            let mut idx: Vec<usize> = (0..bucket.len()).collect();
            for i in 0..(cfg.support + cfg.query) {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            let support: Vec<usize> = idx[..cfg.support].to_vec();
            let query: Vec<usize> = idx[cfg.support..cfg.support + cfg.query].to_vec();
            let mut cover = std::collections::BTreeSet::new();
            for &s in &support {
                cover.extend(bucket[s].phonemes.iter().copied());
            }
            if query
                .iter()
                .all(|&q| bucket[q].phonemes.iter().all(|p| cover.contains(p)))
            {
                chosen = Some((support, query));
                break;
            }
        }
        let (support, query) = chosen.ok_or_else(|| {
            Error::Training(format!(
                "support subset failed to cover query phonemes after {SPLIT_RETRIES} resamples"
            ))
        })?;

        let mut g = Graph::new();
        let mut items = Vec::with_capacity(support.len());
        for &s in &support {
            let utt = &bucket[s];
            let feats = cache.get(&split.ssl, utt)?.clone();
            let c = model.rep_encode_nodes(&mut g, &feats, &utt.segment_lengths())?;
            items.push((c, utt.phonemes.clone()));
        }
        let (table, covered) = generate_table_nodes(model, &mut g, &items)?;
        let mut total: Option<NodeId> = None;
        for &q in &query {
            let utt = &bucket[q];
            let rows: Vec<usize> = utt
                .phonemes
                .iter()
                .map(|p| covered.binary_search(p).expect("coverage checked"))
                .collect();
            let c = model.phn_encode_from(&mut g, table, rows)?;
            let frame_mask = vec![1.0; utt.frame_count()];
            let dur_mask = vec![1.0; utt.len()];
            let item = TrainItem {
                lang: utt.lang,
                phonemes: &utt.phonemes,
                durations: &utt.durations,
                target_frames: &utt.frames,
                feats: None,
                frame_mask: &frame_mask,
                dur_mask: &dur_mask,
            };
            let loss = model.supervised_loss_from_c(&mut g, c, &item)?;
            total = Some(match total {
                Some(t) => g.add(t, loss)?,
                None => loss,
            });
        }
        let total = total.expect("query non-empty");
        let mean = g.scale(total, 1.0 / cfg.query as f64);
        model.params.zero_grads();
        let v = g.accumulate_grads(mean, &mut model.params)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "generator loss".into(),
            });
        }
        last = v;
        model.params.adam_step(&cfg.adam, 1.0)?;
    }
    model.provenance.stage = "generator".into();
    Ok(GeneratorReport { final_loss: last })
}

/// Generate an embedding table for `for_phonemes` from the labeled target
/// shots: per-occurrence segment averages, averaged again per phoneme, then
/// the generator projection. Rows follow `for_phonemes` order.
pub fn generate_table(
    model: &SynthModel,
    split: &CorpusSplit,
    shots: usize,
    for_phonemes: &[u32],
) -> Result<Tensor2> {
    if shots == 0 || split.d_target.is_empty() {
        return Err(Error::Training("generate_table needs labeled target data".into()));
    }
    let shots = shots.min(split.d_target.len());
    let mut g = Graph::new();
    let mut items = Vec::with_capacity(shots);
    for utt in &split.d_target[..shots] {
        let feats = split.ssl.features(utt)?;
        let c = model.rep_encode_nodes(&mut g, &feats, &utt.segment_lengths())?;
        items.push((c, utt.phonemes.clone()));
    }
    let (table, covered) = generate_table_nodes(model, &mut g, &items)?;
    let missing: Vec<u32> = for_phonemes
        .iter()
        .copied()
        .filter(|p| covered.binary_search(p).is_err())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage { missing });
    }
    let rows: Vec<usize> = for_phonemes
        .iter()
        .map(|p| covered.binary_search(p).expect("checked"))
        .collect();
    let picked = g.gather_rows(table, rows)?;
    Ok(g.value(picked).clone())
}

/// Install the target-language embedding table per the configured init.
pub fn init_embedding_table(
    model: &mut SynthModel,
    split: &CorpusSplit,
    lang: &ToyLanguage,
    cfg: &FinetuneConfig,
) -> Result<()> {
    match cfg.embedding_init {
        EmbeddingInit::Random => {
            model.add_language(lang, seeds::derive(cfg.seed, "finetune-emb", lang.id as u64));
        }
        EmbeddingInit::Generator => {
            let table = generate_table(model, split, cfg.shots, &lang.phoneme_ids)?;
            model.set_language_table(lang, table);
        }
    }
    Ok(())
}

enum FtItem<'a> {
    Paired(&'a Utterance),
    Pseudo {
        utt_id: u64,
        frames: &'a Tensor2,
        transcript: Vec<u32>,
        durations: Vec<u32>,
        pseudo_ix: usize,
    },
}

/// Stage 3 — fine-tune on the labeled shots plus the pseudo corpus with a
/// calibrated strategy. The representation encoder, generator, and source
/// embedding tables stay frozen (bitwise).
pub fn finetune(
    model: &mut SynthModel,
    split: &CorpusSplit,
    pseudo: Option<&PseudoCorpus>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    if model.provenance.pretrain_p_repr.is_none() {
        return Err(Error::Training("fine-tuning requires a pretrained checkpoint".into()));
    }
    // Pseudo-label mixing only works on top of mix pretraining: reject
    // mixing strategies on a checkpoint whose representation branch never
    // trained.
    if cfg.strategy.kind.uses_representation() {
        let p = model.provenance.pretrain_p_repr.unwrap_or(0.0);
        if p <= 0.0 {
            return Err(Error::Config(format!(
                "strategy `{}` mixes in the representation encoder, but the checkpoint \
                 was pretrained with p_repr = 0 (no mix pretraining)",
                cfg.strategy.kind.label()
            )));
        }
    }
    if cfg.shots == 0 && split.d_target.is_empty() {
        return Err(Error::Training("no labeled target data".into()));
    }
    let target = split.target_lang.clone();
    init_embedding_table(model, split, &target, cfg)?;

    // Freeze contract: only the listed groups adapt.
    model.params.set_all_trainable(false);
    model.params.set_trainable(&emb_name(target.id), true);
    model.params.set_trainable_prefix("phn.", true);
    model.params.set_trainable_prefix("shared.", true);
    model.params.set_trainable_prefix("dur.", true);
    model.params.set_trainable_prefix("dec.", true);
    model.params.reset_optimizer();

    let mut report = FinetuneReport::default();
    let strategy = match pseudo {
        Some(pc) if !pc.utterances.is_empty() => Some(calibrate(&cfg.strategy, pc)?),
        _ => None,
    };
    if let Some(s) = &strategy {
        report.threshold = s.threshold;
    }

    let shots = cfg.shots.min(split.d_target.len());
    let mut items: Vec<FtItem> = split.d_target[..shots].iter().map(FtItem::Paired).collect();
    if let (Some(pc), Some(strat)) = (pseudo, &strategy) {
        report.total_pseudo = pc.utterances.len();
        for (ix, pu) in pc.utterances.iter().enumerate() {
            if pu.is_empty() {
                continue;
            }
            if strat.kind == MixKind::SentenceFilter {
                let plan = crate::strategy::plan_utterance(strat, pu, cfg.seed, 0);
                if !plan.keep_sentence {
                    continue;
                }
            }
            let unpaired = split
                .unpaired
                .iter()
                .find(|u| u.id() == pu.utt_id)
                .ok_or_else(|| {
                    Error::Training(format!("pseudo utterance {} not in the unpaired split", pu.utt_id))
                })?;
            items.push(FtItem::Pseudo {
                utt_id: pu.utt_id,
                frames: unpaired.frames(),
                transcript: pu.transcript(),
                durations: pu.run_durations(),
                pseudo_ix: ix,
            });
        }
        report.kept_pseudo = items.len() - shots;
    }
    if items.is_empty() {
        return Err(Error::Training(
            "empty effective training set (all pseudo sentences filtered and no labeled shots)".into(),
        ));
    }

    let mut cache = FeatureCache::new();
    let mut visits: HashMap<u64, u64> = HashMap::new();
    let mut rng = seeds::rng_for(cfg.seed, "finetune", 0);
    let mut last = 0.0;
    for step in 0..cfg.steps {
        model.params.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let pick = rng.random_range(0..items.len());
            let mut g = Graph::new();
            let loss = match &items[pick] {
                FtItem::Paired(utt) => {
                    let frame_mask = vec![1.0; utt.frame_count()];
                    let dur_mask = vec![1.0; utt.len()];
                    let item = TrainItem {
                        lang: utt.lang,
                        phonemes: &utt.phonemes,
                        durations: &utt.durations,
                        target_frames: &utt.frames,
                        feats: None,
                        frame_mask: &frame_mask,
                        dur_mask: &dur_mask,
                    };
                    model.forward_loss(&mut g, &item, &Branch::Phoneme)?
                }
                FtItem::Pseudo {
                    utt_id,
                    frames,
                    transcript,
                    durations,
                    pseudo_ix,
                } => {
                    let strat = strategy.as_ref().expect("pseudo items imply a strategy");
                    let pu = &pseudo.expect("present").utterances[*pseudo_ix];
                    let visit = visits.entry(*utt_id).or_insert(0);
                    let plan: SelectionPlan =
                        crate::strategy::plan_utterance(strat, pu, cfg.seed, *visit);
                    *visit += 1;
                    let branch_needs_feats = strat.kind.uses_representation();
                    let feats = if branch_needs_feats {
                        Some(cache.get_raw(&split.ssl, *utt_id, frames)?.clone())
                    } else {
                        None
                    };
                    let item = TrainItem {
                        lang: target.id,
                        phonemes: transcript,
                        durations,
                        target_frames: frames,
                        feats: feats.as_ref(),
                        frame_mask: &plan.frame_mask,
                        dur_mask: &plan.dur_mask,
                    };
                    if branch_needs_feats {
                        let flags = plan.from_phn_flags();
                        model.forward_loss(&mut g, &item, &Branch::Mixed { from_phn: &flags })?
                    } else {
                        model.forward_loss(&mut g, &item, &Branch::Phoneme)?
                    }
                }
            };
            let v = g.accumulate_grads(loss, &mut model.params)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: "fine-tuning loss".into(),
                });
            }
            batch_loss += v;
        }
        last = batch_loss / cfg.batch_size as f64;
        model.params.adam_step(&cfg.adam, 1.0 / cfg.batch_size as f64)?;
    }
    report.final_loss = last;
    model.provenance.stage = "finetune".into();
    Ok(report)
}
