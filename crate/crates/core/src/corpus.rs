//! Deterministic synthetic languages, utterances, simulated multi-layer SSL
//! features, and the source/target/unpaired/eval split machinery.
//!
//! Everything here is a pure function of (world seed, config): regenerating
//! with the same inputs reproduces every byte.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor2;

/// Phoneme ids of different languages never overlap: language `i` owns
/// `[i * PHONEME_ID_STRIDE, i * PHONEME_ID_STRIDE + P)`.
pub const PHONEME_ID_STRIDE: u32 = 1 << 16;

/// How many times language/split generation retries before giving up on an
/// invariant (prototype separation, phoneme coverage).
const MAX_RETRIES: usize = 500;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusConfig {
    /// Languages 0..n_source_langs are sources; language n_source_langs is
    /// the adaptation target.
    pub n_source_langs: usize,
    /// Inventory size P per language.
    pub inventory_size: usize,
    /// Synthetic frame dimension d.
    pub frame_dim: usize,
    /// Simulated SSL feature dimension.
    pub ssl_dim: usize,
    /// Number of simulated SSL layers K (>= 2).
    pub ssl_layers: usize,
    /// Frame noise scale sigma; prototypes are kept > 4 sigma apart.
    pub frame_noise: f64,
    /// Additive noise scale inside the simulated SSL layers.
    pub ssl_noise: f64,
    pub dur_min: u32,
    pub dur_max: u32,
    pub utt_len_min: usize,
    pub utt_len_max: usize,
    /// Converts "minutes of unpaired speech" into a frame budget.
    pub frames_per_second: f64,
    pub source_utts_per_lang: usize,
    /// Paired utterances from the target language (D_target).
    pub n_shots: usize,
    /// The first `coverage_shots` target utterances are resampled until they
    /// jointly cover the full inventory, so any shot prefix >= this count
    /// satisfies the eval-coverage invariant.
    pub coverage_shots: usize,
    /// Unpaired target speech budget, in minutes.
    pub unlabeled_minutes: f64,
    pub eval_size: usize,
    /// Selects which target utterances land in which partition; the harness
    /// sets this to the run seed while sources stay identical across runs.
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_source_langs: 3,
            inventory_size: 8,
            frame_dim: 16,
            ssl_dim: 24,
            ssl_layers: 4,
            frame_noise: 0.05,
            ssl_noise: 0.05,
            dur_min: 3,
            dur_max: 7,
            utt_len_min: 6,
            utt_len_max: 10,
            frames_per_second: 10.0,
            source_utts_per_lang: 160,
            n_shots: 16,
            coverage_shots: 4,
            unlabeled_minutes: 15.0,
            eval_size: 64,
            split_seed: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ToyLanguage {
    pub id: u32,
    /// Global phoneme ids owned by this language, in table order.
    pub phoneme_ids: Vec<u32>,
    /// One prototype frame vector per phoneme (P x d).
    pub prototypes: Tensor2,
    pub dur_min: u32,
    pub dur_max: u32,
    pub sigma: f64,
}

impl ToyLanguage {
    pub fn inventory_size(&self) -> usize {
        self.phoneme_ids.len()
    }

    /// Table index of a global phoneme id.
    pub fn local_index(&self, phoneme: u32) -> Result<usize> {
        let base = self.id * PHONEME_ID_STRIDE;
        let off = phoneme.wrapping_sub(base) as usize;
        if phoneme < base || off >= self.phoneme_ids.len() {
            return Err(Error::Vocabulary {
                lang: self.id,
                id: phoneme,
            });
        }
        Ok(off)
    }

    pub fn min_prototype_distance(&self) -> f64 {
        let p = &self.prototypes;
        let mut best = f64::INFINITY;
        for i in 0..p.rows() {
            for j in (i + 1)..p.rows() {
                best = best.min(Tensor2::sq_dist(p.row(i), p.row(j)).sqrt());
            }
        }
        best
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub lang: u32,
    /// Phoneme sequence (global ids), never with adjacent repeats.
    pub phonemes: Vec<u32>,
    /// Frames per phoneme.
    pub durations: Vec<u32>,
    /// Sum(durations) x d frame matrix.
    pub frames: Tensor2,
}

impl Utterance {
    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    /// Cumulative exclusive end-frame of each phoneme; strictly increasing.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.durations.len());
        let mut acc = 0usize;
        for &d in &self.durations {
            acc += d as usize;
            out.push(acc);
        }
        out
    }

    pub fn segment_lengths(&self) -> Vec<usize> {
        self.durations.iter().map(|&d| d as usize).collect()
    }

    /// Frame-level phoneme labels expanded from the boundaries.
    pub fn frame_labels(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.frame_count());
        for (p, d) in self.phonemes.iter().zip(&self.durations) {
            out.extend(std::iter::repeat(*p).take(*d as usize));
        }
        out
    }
}

/// Frame-aligned K-layer feature stack for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredFeatures {
    pub layers: Vec<Tensor2>,
}

impl LayeredFeatures {
    pub fn frame_count(&self) -> usize {
        self.layers.first().map_or(0, |l| l.rows())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// One fixed affine transform per simulated SSL layer. Drawn once per world
/// seed and immutable afterwards, standing in for a frozen pretrained model.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SslSimulator {
    pub world_seed: u64,
    /// Per layer: d x d_ssl projection.
    pub projections: Vec<Tensor2>,
    /// Per layer: d_ssl offset.
    pub offsets: Vec<Vec<f64>>,
    pub noise: f64,
}

impl SslSimulator {
    pub fn generate(world_seed: u64, k: usize, frame_dim: usize, ssl_dim: usize, noise: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Argument(format!("ssl_layers must be >= 2, got {k}")));
        }
        let mut projections = Vec::with_capacity(k);
        let mut offsets = Vec::with_capacity(k);
        for layer in 0..k {
            let mut rng = seeds::rng_for(world_seed, "ssl-layer", layer as u64);
            let bound = 1.0 / (frame_dim as f64).sqrt();
            let data = (0..frame_dim * ssl_dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            projections.push(Tensor2::new(frame_dim, ssl_dim, data)?);
            offsets.push((0..ssl_dim).map(|_| rng.random_range(-0.5..0.5)).collect());
        }
        Ok(SslSimulator {
            world_seed,
            projections,
            offsets,
            noise,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.projections.len()
    }

    pub fn ssl_dim(&self) -> usize {
        self.projections.first().map_or(0, |p| p.cols())
    }

    /// Layer k output = frames * A_k + c_k + noise. The noise stream is
    /// derived from (world seed, utterance id, layer), so the same utterance
    /// always produces identical features.
    pub fn features(&self, utt: &Utterance) -> Result<LayeredFeatures> {
        self.features_of(utt.id, &utt.frames)
    }

    /// Same as [`features`](Self::features) but from raw frames, so unpaired
    /// speech can be featurized without touching its withheld transcript.
    pub fn features_of(&self, id: u64, frames: &Tensor2) -> Result<LayeredFeatures> {
        let mut layers = Vec::with_capacity(self.n_layers());
        for (k, (proj, off)) in self.projections.iter().zip(&self.offsets).enumerate() {
            let mut out = frames.matmul(proj)?;
            let mut rng = seeds::rng(seeds::derive2(self.world_seed, "ssl-noise", id, k as u64));
            for i in 0..out.rows() {
                for (o, c) in out.row_mut(i).iter_mut().zip(off) {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *o += c + self.noise * n;
                }
            }
            layers.push(out);
        }
        Ok(LayeredFeatures { layers })
    }

    /// Stable hash over the transform constants (freeze-contract audits).
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (p, off) in self.projections.iter().zip(&self.offsets) {
            for x in p.data() {
                h.update(x.to_le_bytes());
            }
            for x in off {
                h.update(x.to_le_bytes());
            }
        }
        h.update(self.noise.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Unpaired target speech. The true transcript is retained for oracle
/// scoring but kept private to this module: training code only sees frames
/// and features. Scoring goes through [`Unpaired::oracle_reference`].
#[derive(Clone, Debug, PartialEq)]
pub struct Unpaired {
    hidden: Utterance,
}

impl Unpaired {
    pub fn id(&self) -> u64 {
        self.hidden.id
    }

    pub fn lang(&self) -> u32 {
        self.hidden.lang
    }

    pub fn frames(&self) -> &Tensor2 {
        &self.hidden.frames
    }

    pub fn frame_count(&self) -> usize {
        self.hidden.frame_count()
    }

    /// Scoring-oracle access to the withheld transcript. Never feed this to
    /// training code.
    pub fn oracle_reference(&self) -> (&[u32], &[u32]) {
        (&self.hidden.phonemes, &self.hidden.durations)
    }

    pub(crate) fn from_utterance(u: Utterance) -> Self {
        Unpaired { hidden: u }
    }

    pub(crate) fn hidden(&self) -> &Utterance {
        &self.hidden
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub world_seed: u64,
    pub config: CorpusConfig,
    pub source_langs: Vec<ToyLanguage>,
    pub target_lang: ToyLanguage,
    pub ssl: SslSimulator,
    /// Paired source data, one bucket per source language.
    pub source: Vec<Vec<Utterance>>,
    /// Paired target data (n_shots utterances; the first coverage_shots
    /// jointly cover the inventory).
    pub d_target: Vec<Utterance>,
    /// Unpaired target speech, transcripts withheld.
    pub unpaired: Vec<Unpaired>,
    pub eval: Vec<Utterance>,
}

impl CorpusSplit {
    pub fn unpaired_frames(&self) -> usize {
        self.unpaired.iter().map(|u| u.frame_count()).sum()
    }

    pub(crate) fn unpaired_hidden(&self, id: u64) -> Option<&Utterance> {
        self.unpaired.iter().find(|u| u.id() == id).map(|u| u.hidden())
    }
}

/// Generate a toy language. Prototypes are redrawn until the minimum
/// pairwise distance exceeds 4 sigma so nearest-prototype decoding of clean
/// frames can never confuse two phonemes.
pub fn gen_language(
    world_seed: u64,
    lang_index: u32,
    cfg: &CorpusConfig,
) -> Result<ToyLanguage> {
    if cfg.inventory_size < 2 {
        return Err(Error::Generation(format!(
            "inventory_size must be >= 2, got {}",
            cfg.inventory_size
        )));
    }
    if cfg.frame_dim < 2 {
        return Err(Error::Generation(format!(
            "frame_dim must be >= 2, got {}",
            cfg.frame_dim
        )));
    }
    if cfg.dur_min < 1 || cfg.dur_max < cfg.dur_min {
        return Err(Error::Generation(format!(
            "bad duration range [{}, {}]",
            cfg.dur_min, cfg.dur_max
        )));
    }
    let mut rng = seeds::rng_for(world_seed, "language", lang_index as u64);
    let p = cfg.inventory_size;
    let d = cfg.frame_dim;
    let min_dist = 4.0 * cfg.frame_noise;
    for _ in 0..MAX_RETRIES {
        let data: Vec<f64> = (0..p * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let protos = Tensor2::new(p, d, data)?;
        let mut ok = true;
        'pairs: for i in 0..p {
            for j in (i + 1)..p {
                let dist = Tensor2::sq_dist(protos.row(i), protos.row(j)).sqrt();
                if dist <= min_dist || dist == 0.0 {
                    ok = false;
                    break 'pairs;
                }
            }
        }
        if ok {
            let base = lang_index * PHONEME_ID_STRIDE;
            return Ok(ToyLanguage {
                id: lang_index,
                phoneme_ids: (0..p as u32).map(|k| base + k).collect(),
                prototypes: protos,
                dur_min: cfg.dur_min,
                dur_max: cfg.dur_max,
                sigma: cfg.frame_noise,
            });
        }
    }
    Err(Error::Generation(format!(
        "could not separate {p} prototypes by {min_dist:.3}; increase frame_dim or lower frame_noise"
    )))
}

/// Frame noise: a vector drawn uniformly from the radius-sigma ball, so the
/// perturbed frame stays strictly closer to its own prototype than to any
/// other (prototypes are > 4 sigma apart).
fn ball_noise(rng: &mut impl Rng, dim: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; dim];
    }
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; dim];
    }
    let u: f64 = rng.random::<f64>();
    let radius = sigma * u.powf(1.0 / dim as f64);
    for x in &mut v {
        *x *= radius / norm;
    }
    v
}

/// Sample one utterance: length from `len_range`, phonemes uniform without
/// adjacent repeats, durations uniform in the language's range, frames =
/// prototype + ball noise.
pub fn gen_utterance(
    lang: &ToyLanguage,
    seed: u64,
    len_range: (usize, usize),
) -> Result<Utterance> {
    let (lo, hi) = len_range;
    if lo < 1 || hi > 64 || lo > hi {
        return Err(Error::Argument(format!(
            "utterance length range [{lo}, {hi}] outside [1, 64]"
        )));
    }
    let mut rng = seeds::rng(seed);
    let l = rng.random_range(lo..=hi);
    let p = lang.inventory_size();
    let mut phonemes: Vec<u32> = Vec::with_capacity(l);
    for i in 0..l {
        let k = if i == 0 {
            rng.random_range(0..p)
        } else {
            // uniform over the other P-1 symbols: no adjacent repeats, so
            // run-length decoding of clean frames recovers the transcript
            let prev = lang.local_index(phonemes[i - 1])?;
            let mut k = rng.random_range(0..p - 1);
            if k >= prev {
                k += 1;
            }
            k
        };
        phonemes.push(lang.phoneme_ids[k]);
    }
    let durations: Vec<u32> = (0..l)
        .map(|_| rng.random_range(lang.dur_min..=lang.dur_max))
        .collect();
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    let d = lang.prototypes.cols();
    let mut frames = Tensor2::zeros(total, d);
    let mut r = 0;
    for (ph, dur) in phonemes.iter().zip(&durations) {
        let proto = lang.prototypes.row(lang.local_index(*ph)?).to_vec();
        for _ in 0..*dur {
            let noise = ball_noise(&mut rng, d, lang.sigma);
            for ((o, p), n) in frames.row_mut(r).iter_mut().zip(&proto).zip(&noise) {
                *o = p + n;
            }
            r += 1;
        }
    }
    Ok(Utterance {
        id: 0,
        lang: lang.id,
        phonemes,
        durations,
        frames,
    })
}

fn covered_phonemes(utts: &[Utterance]) -> BTreeSet<u32> {
    utts.iter().flat_map(|u| u.phonemes.iter().copied()).collect()
}

/// Build the full corpus split. Pure in (world_seed, config).
pub fn make_split(world_seed: u64, cfg: &CorpusConfig) -> Result<CorpusSplit> {
    if cfg.n_source_langs < 1 {
        return Err(Error::Split("need at least one source language".into()));
    }
    if cfg.n_shots < 1 {
        return Err(Error::Split("n_shots must be positive".into()));
    }
    if cfg.unlabeled_minutes < 0.0 {
        return Err(Error::Split("unlabeled_minutes must be >= 0".into()));
    }
    let len_range = (cfg.utt_len_min, cfg.utt_len_max);

    let source_langs: Vec<ToyLanguage> = (0..cfg.n_source_langs as u32)
        .map(|i| gen_language(world_seed, i, cfg))
        .collect::<Result<_>>()?;
    let target_lang = gen_language(world_seed, cfg.n_source_langs as u32, cfg)?;
    let ssl = SslSimulator::generate(world_seed, cfg.ssl_layers, cfg.frame_dim, cfg.ssl_dim, cfg.ssl_noise)?;

    // Utterance ids: lang index in the high bits, section+index below.
    let make_id = |lang: u32, section: u64, index: u64| -> u64 {
        ((lang as u64) << 40) | (section << 32) | index
    };

    let mut source = Vec::with_capacity(cfg.n_source_langs);
    for (j, lang) in source_langs.iter().enumerate() {
        let mut utts = Vec::with_capacity(cfg.source_utts_per_lang);
        for i in 0..cfg.source_utts_per_lang {
            let seed = seeds::derive2(world_seed, "source-utt", j as u64, i as u64);
            let mut u = gen_utterance(lang, seed, len_range)?;
            u.id = make_id(lang.id, 0, i as u64);
            utts.push(u);
        }
        source.push(utts);
    }

    // D_target: resample until the first coverage_shots utterances jointly
    // cover the inventory, so every eval phoneme is guaranteed to appear in
    // the labeled data for any shot prefix the harness later uses.
    let cover_n = cfg.coverage_shots.clamp(1, cfg.n_shots);
    let full: BTreeSet<u32> = target_lang.phoneme_ids.iter().copied().collect();
    let mut d_target = None;
    for attempt in 0..MAX_RETRIES {
        let mut utts = Vec::with_capacity(cfg.n_shots);
        for i in 0..cfg.n_shots {
            let seed = seeds::derive2(
                seeds::derive(world_seed, "target-shot", cfg.split_seed),
                "utt",
                attempt as u64,
                i as u64,
            );
            let mut u = gen_utterance(&target_lang, seed, len_range)?;
            u.id = make_id(target_lang.id, 1, (attempt * cfg.n_shots + i) as u64);
            utts.push(u);
        }
        if covered_phonemes(&utts[..cover_n]).is_superset(&full) {
            d_target = Some(utts);
            break;
        }
    }
    let d_target = d_target.ok_or_else(|| {
        Error::Split(format!(
            "could not cover {} phonemes within {} labeled utterances after {MAX_RETRIES} attempts",
            full.len(),
            cover_n
        ))
    })?;

    // Unpaired speech: add utterances until the frame budget is reached, so
    // the realized total is within one utterance of the budget.
    let budget = (cfg.unlabeled_minutes * 60.0 * cfg.frames_per_second).round() as usize;
    let mut unpaired = Vec::new();
    let mut total_frames = 0usize;
    let mut i = 0u64;
    while budget > 0 && total_frames < budget {
        let seed = seeds::derive2(
            seeds::derive(world_seed, "unpaired", cfg.split_seed),
            "utt",
            i,
            0,
        );
        let mut u = gen_utterance(&target_lang, seed, len_range)?;
        u.id = make_id(target_lang.id, 2, i);
        total_frames += u.frame_count();
        unpaired.push(Unpaired::from_utterance(u));
        i += 1;
    }

    // Eval set: rejection-resample any utterance containing a phoneme not
    // present in the labeled prefix (full coverage makes this a no-op, but
    // the invariant is enforced here rather than assumed).
    let covered = covered_phonemes(&d_target[..cover_n]);
    let mut eval = Vec::with_capacity(cfg.eval_size);
    let mut draw = 0u64;
    for i in 0..cfg.eval_size {
        let mut placed = false;
        for _ in 0..MAX_RETRIES {
            let seed = seeds::derive2(
                seeds::derive(world_seed, "eval", cfg.split_seed),
                "utt",
                draw,
                0,
            );
            draw += 1;
            let mut u = gen_utterance(&target_lang, seed, len_range)?;
            if u.phonemes.iter().all(|p| covered.contains(p)) {
                u.id = make_id(target_lang.id, 3, i as u64);
                eval.push(u);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Split(
                "could not sample an eval utterance covered by the labeled data".into(),
            ));
        }
    }

    Ok(CorpusSplit {
        world_seed,
        config: cfg.clone(),
        source_langs,
        target_lang,
        ssl,
        source,
        d_target,
        unpaired,
        eval,
    })
}

/// Cache of layered features keyed by utterance id; features are a pure
/// function of (SSL simulator, utterance), so caching is just memoization.
#[derive(Default)]
pub struct FeatureCache {
    map: HashMap<u64, LayeredFeatures>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, ssl: &SslSimulator, utt: &Utterance) -> Result<&LayeredFeatures> {
        self.get_raw(ssl, utt.id, &utt.frames)
    }

    pub fn get_unpaired(&mut self, ssl: &SslSimulator, utt: &Unpaired) -> Result<&LayeredFeatures> {
        self.get_raw(ssl, utt.id(), utt.frames())
    }

    pub fn get_raw(&mut self, ssl: &SslSimulator, id: u64, frames: &Tensor2) -> Result<&LayeredFeatures> {
        if !self.map.contains_key(&id) {
            let f = ssl.features_of(id, frames)?;
            self.map.insert(id, f);
        }
        Ok(self.map.get(&id).expect("just inserted"))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CorpusConfig {
        CorpusConfig::default()
    }

    #[test]
    fn gen_language_is_deterministic() {
        let a = gen_language(42, 0, &cfg()).unwrap();
        let b = gen_language(42, 0, &cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_prototypes_separated_beyond_four_sigma() {
        let mut c = cfg();
        c.inventory_size = 2;
        c.frame_dim = 8;
        c.frame_noise = 0.05;
        let lang = gen_language(7, 0, &c).unwrap();
        assert!(lang.min_prototype_distance() > 0.2);
    }

    #[test]
    fn distinct_languages_have_disjoint_phoneme_ranges() {
        let a = gen_language(42, 0, &cfg()).unwrap();
        let b = gen_language(42, 1, &cfg()).unwrap();
        let sa: BTreeSet<u32> = a.phoneme_ids.iter().copied().collect();
        let sb: BTreeSet<u32> = b.phoneme_ids.iter().copied().collect();
        assert!(sa.is_disjoint(&sb));
    }

    #[test]
    fn separation_failure_suggests_remedy() {
        let mut c = cfg();
        c.frame_noise = 10.0; // 4 sigma = 40 > diameter of [-1,1]^d
        let err = gen_language(1, 0, &c).unwrap_err();
        assert!(err.to_string().contains("frame_dim"), "{err}");
    }

    #[test]
    fn noiseless_frames_equal_prototypes() {
        let mut c = cfg();
        c.frame_noise = 0.0;
        let lang = gen_language(3, 0, &c).unwrap();
        let utt = gen_utterance(&lang, 99, (2, 4)).unwrap();
        let mut r = 0;
        for (ph, dur) in utt.phonemes.iter().zip(&utt.durations) {
            let proto = lang.prototypes.row(lang.local_index(*ph).unwrap());
            for _ in 0..*dur {
                assert_eq!(utt.frames.row(r), proto);
                r += 1;
            }
        }
    }

    #[test]
    fn single_phoneme_utterance_has_one_boundary() {
        let mut c = cfg();
        c.frame_noise = 0.0;
        c.dur_min = 3;
        c.dur_max = 3;
        let lang = gen_language(3, 0, &c).unwrap();
        let utt = gen_utterance(&lang, 5, (1, 1)).unwrap();
        assert_eq!(utt.len(), 1);
        assert_eq!(utt.durations, vec![3]);
        assert_eq!(utt.boundaries(), vec![3]);
        assert_eq!(utt.frame_count(), 3);
        // all three frames share the prototype mean
        assert_eq!(utt.frames.row(0), utt.frames.row(1));
    }

    #[test]
    fn duration_sample_mean_tracks_distribution_mean() {
        // Monte-Carlo oracle: empirical mean within 5% of (min+max)/2.
        let lang = gen_language(11, 0, &cfg()).unwrap();
        let mut count = 0usize;
        let mut sum = 0f64;
        for i in 0..1000 {
            let u = gen_utterance(&lang, seeds::derive(11, "mc", i), (4, 8)).unwrap();
            for &d in &u.durations {
                sum += d as f64;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let expect = (lang.dur_min + lang.dur_max) as f64 / 2.0;
        assert!((mean - expect).abs() / expect < 0.05, "mean {mean} vs {expect}");
    }

    #[test]
    fn ball_noise_never_leaves_half_separation() {
        let lang = gen_language(2, 0, &cfg()).unwrap();
        for i in 0..100 {
            let u = gen_utterance(&lang, seeds::derive(2, "noise", i), (2, 6)).unwrap();
            let labels = u.frame_labels();
            for (r, ph) in labels.iter().enumerate() {
                let proto = lang.prototypes.row(lang.local_index(*ph).unwrap());
                let dist = Tensor2::sq_dist(u.frames.row(r), proto).sqrt();
                assert!(dist <= lang.sigma + 1e-12);
            }
        }
    }

    #[test]
    fn ssl_features_are_deterministic_and_frame_aligned() {
        let c = cfg();
        let lang = gen_language(21, 0, &c).unwrap();
        let ssl = SslSimulator::generate(21, c.ssl_layers, c.frame_dim, c.ssl_dim, c.ssl_noise).unwrap();
        for i in 0..100 {
            let mut u = gen_utterance(&lang, seeds::derive(21, "feat", i), (1, 8)).unwrap();
            u.id = i;
            let f1 = ssl.features(&u).unwrap();
            let f2 = ssl.features(&u).unwrap();
            assert_eq!(f1, f2);
            assert_eq!(f1.n_layers(), c.ssl_layers);
            for l in &f1.layers {
                assert_eq!(l.rows(), u.frame_count());
            }
        }
    }

    #[test]
    fn zero_noise_zero_frame_yields_offset_broadcast() {
        let c = cfg();
        let ssl = SslSimulator::generate(5, c.ssl_layers, c.frame_dim, c.ssl_dim, 0.0).unwrap();
        let utt = Utterance {
            id: 1,
            lang: 0,
            phonemes: vec![0, 1],
            durations: vec![1, 1],
            frames: Tensor2::zeros(2, c.frame_dim),
        };
        let f = ssl.features(&utt).unwrap();
        for (k, layer) in f.layers.iter().enumerate() {
            for r in 0..layer.rows() {
                for (a, b) in layer.row(r).iter().zip(&ssl.offsets[k]) {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn split_coverage_and_budget() {
        let mut c = cfg();
        c.n_shots = 4;
        c.coverage_shots = 4;
        c.unlabeled_minutes = 15.0;
        let split = make_split(42, &c).unwrap();
        // every eval phoneme appears in the labeled data
        let labeled = covered_phonemes(&split.d_target);
        for u in &split.eval {
            for p in &u.phonemes {
                assert!(labeled.contains(p));
            }
        }
        // frame budget honored within one utterance
        let budget = (15.0 * 60.0 * c.frames_per_second) as usize;
        let total = split.unpaired_frames();
        assert!(total >= budget);
        let max_utt = c.utt_len_max * c.dur_max as usize;
        assert!(total < budget + max_utt);
    }

    #[test]
    fn zero_minutes_means_no_unpaired_data() {
        let mut c = cfg();
        c.unlabeled_minutes = 0.0;
        let split = make_split(42, &c).unwrap();
        assert!(split.unpaired.is_empty());
    }

    #[test]
    fn split_is_reproducible_and_ids_disjoint() {
        let c = cfg();
        let a = make_split(13, &c).unwrap();
        let b = make_split(13, &c).unwrap();
        assert_eq!(a, b);
        let mut ids = BTreeSet::new();
        for u in a.source.iter().flatten() {
            assert!(ids.insert(u.id));
        }
        for u in &a.d_target {
            assert!(ids.insert(u.id));
        }
        for u in &a.unpaired {
            assert!(ids.insert(u.id()));
        }
        for u in &a.eval {
            assert!(ids.insert(u.id));
        }
    }
}
