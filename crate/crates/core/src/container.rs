//! Versioned binary container for corpora, pseudo corpora, and model
//! checkpoints.
//!
//! Layout: magic `PLMX` | u32 format version | u8 kind | u64 header length |
//! header JSON (config echo) | binary payload. All integers and f64 bits are
//! little-endian, so round-trips are bit-exact and files are byte-stable for
//! identical inputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::corpus::{CorpusConfig, CorpusSplit, SslSimulator, ToyLanguage, Unpaired, Utterance};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Provenance, SynthModel};
use crate::params::ParamStore;
use crate::pseudolabel::{PhonemeRun, PseudoCorpus, PseudoUtterance};
use crate::tensor::Tensor2;

pub const MAGIC: &[u8; 4] = b"PLMX";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_WORLD: u8 = 1;
pub const KIND_UTTERANCES: u8 = 2;
pub const KIND_PSEUDO: u8 = 3;
pub const KIND_MODEL: u8 = 4;

// ---- low-level encoding ----

#[derive(Default)]
struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.f64(*v);
        }
    }
    fn u32s(&mut self, vs: &[u32]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.u32(*v);
        }
    }
    fn tensor(&mut self, t: &Tensor2) {
        self.u64(t.rows() as u64);
        self.u64(t.cols() as u64);
        for v in t.data() {
            self.f64(*v);
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Dec<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.clone(),
            reason: reason.into(),
        })
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return self.fail(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("sized")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("sized")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("sized")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (64 << 20) {
            return self.fail(format!("implausible length {n}"));
        }
        Ok(n as usize)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format {
                path: self.path.clone(),
                reason: "invalid utf-8".into(),
            })
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len()?;
        (0..n).map(|_| self.u32()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor2> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let data = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor2::new(rows, cols, data)
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                reason: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn write_file<H: Serialize>(path: &Path, kind: u8, header: &H, payload: Vec<u8>) -> Result<()> {
    let header_json = serde_json::to_vec(header)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file<H: DeserializeOwned>(path: &Path, want_kind: u8) -> Result<(H, Vec<u8>)> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(display.clone(), e))?;
    let mut dec = Dec {
        buf: &bytes,
        pos: 0,
        path: display.clone(),
    };
    if dec.take(4)? != MAGIC {
        return dec.fail("bad magic (not a PLMX container)");
    }
    let version = dec.u32()?;
    if version != FORMAT_VERSION {
        return dec.fail(format!("unsupported format version {version}"));
    }
    let kind = dec.u8()?;
    if kind != want_kind {
        return dec.fail(format!("kind {kind}, expected {want_kind}"));
    }
    let hlen = dec.len()?;
    let header_bytes = dec.take(hlen)?;
    let header: H = serde_json::from_slice(header_bytes).map_err(|e| Error::Format {
        path: display,
        reason: format!("header: {e}"),
    })?;
    let payload = bytes[dec.pos..].to_vec();
    Ok((header, payload))
}

// ---- corpus ----

#[derive(Serialize, Deserialize)]
struct WorldHeader {
    format_version: u32,
    world_seed: u64,
    config: CorpusConfig,
}

#[derive(Serialize, Deserialize)]
struct SplitHeader {
    format_version: u32,
    world_seed: u64,
    split: String,
    config: CorpusConfig,
}

fn enc_language(e: &mut Enc, lang: &ToyLanguage) {
    e.u32(lang.id);
    e.u32s(&lang.phoneme_ids);
    e.tensor(&lang.prototypes);
    e.u32(lang.dur_min);
    e.u32(lang.dur_max);
    e.f64(lang.sigma);
}

fn dec_language(d: &mut Dec) -> Result<ToyLanguage> {
    Ok(ToyLanguage {
        id: d.u32()?,
        phoneme_ids: d.u32s()?,
        prototypes: d.tensor()?,
        dur_min: d.u32()?,
        dur_max: d.u32()?,
        sigma: d.f64()?,
    })
}

fn enc_utterance(e: &mut Enc, u: &Utterance) {
    e.u64(u.id);
    e.u32(u.lang);
    e.u32s(&u.phonemes);
    e.u32s(&u.durations);
    e.tensor(&u.frames);
}

fn dec_utterance(d: &mut Dec) -> Result<Utterance> {
    Ok(Utterance {
        id: d.u64()?,
        lang: d.u32()?,
        phonemes: d.u32s()?,
        durations: d.u32s()?,
        frames: d.tensor()?,
    })
}

fn enc_utterances(utts: &[Utterance]) -> Vec<u8> {
    let mut e = Enc::default();
    e.u64(utts.len() as u64);
    for u in utts {
        enc_utterance(&mut e, u);
    }
    e.buf
}

fn dec_utterances(d: &mut Dec) -> Result<Vec<Utterance>> {
    let n = d.len()?;
    (0..n).map(|_| dec_utterance(d)).collect()
}

fn world_path(dir: &Path) -> PathBuf {
    dir.join("world.plx")
}

/// Save a corpus split as a directory: `world.plx` (languages + SSL
/// transforms), plus one file per partition.
pub fn save_corpus(dir: &Path, split: &CorpusSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let header = WorldHeader {
        format_version: FORMAT_VERSION,
        world_seed: split.world_seed,
        config: split.config.clone(),
    };
    let mut e = Enc::default();
    e.u64(split.source_langs.len() as u64);
    for lang in &split.source_langs {
        enc_language(&mut e, lang);
    }
    enc_language(&mut e, &split.target_lang);
    // ssl simulator
    e.u64(split.ssl.world_seed);
    e.f64(split.ssl.noise);
    e.u64(split.ssl.projections.len() as u64);
    for (p, off) in split.ssl.projections.iter().zip(&split.ssl.offsets) {
        e.tensor(p);
        e.f64s(off);
    }
    write_file(&world_path(dir), KIND_WORLD, &header, e.buf)?;

    let split_header = |name: &str| SplitHeader {
        format_version: FORMAT_VERSION,
        world_seed: split.world_seed,
        split: name.to_string(),
        config: split.config.clone(),
    };
    // D_source keeps its per-language buckets, flattened with a bucket tag.
    let mut e = Enc::default();
    e.u64(split.source.len() as u64);
    for bucket in &split.source {
        e.buf.extend_from_slice(&enc_utterances(bucket));
    }
    write_file(&dir.join("source.plx"), KIND_UTTERANCES, &split_header("source"), e.buf)?;
    write_file(
        &dir.join("target.plx"),
        KIND_UTTERANCES,
        &split_header("target"),
        enc_utterances(&split.d_target),
    )?;
    let hidden: Vec<Utterance> = split.unpaired.iter().map(|u| u.hidden().clone()).collect();
    write_file(
        &dir.join("unpaired.plx"),
        KIND_UTTERANCES,
        &split_header("unpaired"),
        enc_utterances(&hidden),
    )?;
    write_file(
        &dir.join("eval.plx"),
        KIND_UTTERANCES,
        &split_header("eval"),
        enc_utterances(&split.eval),
    )
}

pub fn load_corpus(dir: &Path) -> Result<CorpusSplit> {
    let (header, payload): (WorldHeader, _) = read_file(&world_path(dir), KIND_WORLD)?;
    let path_str = world_path(dir).display().to_string();
    let mut d = Dec {
        buf: &payload,
        pos: 0,
        path: path_str,
    };
    let n_src = d.len()?;
    let source_langs: Vec<ToyLanguage> = (0..n_src).map(|_| dec_language(&mut d)).collect::<Result<_>>()?;
    let target_lang = dec_language(&mut d)?;
    let ssl_world = d.u64()?;
    let noise = d.f64()?;
    let k = d.len()?;
    let mut projections = Vec::with_capacity(k);
    let mut offsets = Vec::with_capacity(k);
    for _ in 0..k {
        projections.push(d.tensor()?);
        offsets.push(d.f64s()?);
    }
    d.done()?;
    let ssl = SslSimulator {
        world_seed: ssl_world,
        projections,
        offsets,
        noise,
    };

    let read_split = |name: &str| -> Result<(SplitHeader, Vec<u8>)> {
        read_file(&dir.join(name), KIND_UTTERANCES)
    };
    let (_, src_payload) = read_split("source.plx")?;
    let mut d = Dec {
        buf: &src_payload,
        pos: 0,
        path: dir.join("source.plx").display().to_string(),
    };
    let buckets = d.len()?;
    let mut source = Vec::with_capacity(buckets);
    for _ in 0..buckets {
        source.push(dec_utterances(&mut d)?);
    }
    d.done()?;

    let load_utts = |name: &str| -> Result<Vec<Utterance>> {
        let (_, payload) = read_split(name)?;
        let mut d = Dec {
            buf: &payload,
            pos: 0,
            path: dir.join(name).display().to_string(),
        };
        let utts = dec_utterances(&mut d)?;
        d.done()?;
        Ok(utts)
    };
    let d_target = load_utts("target.plx")?;
    let unpaired = load_utts("unpaired.plx")?
        .into_iter()
        .map(Unpaired::from_utterance)
        .collect();
    let eval = load_utts("eval.plx")?;

    Ok(CorpusSplit {
        world_seed: header.world_seed,
        config: header.config,
        source_langs,
        target_lang,
        ssl,
        source,
        d_target,
        unpaired,
        eval,
    })
}

// ---- pseudo corpus ----

#[derive(Serialize, Deserialize)]
struct PseudoHeader {
    format_version: u32,
    world_seed: u64,
    lang: u32,
    asr_shots: usize,
    classifier_seed: u64,
}

pub fn save_pseudo(path: &Path, world_seed: u64, corpus: &PseudoCorpus) -> Result<()> {
    let header = PseudoHeader {
        format_version: FORMAT_VERSION,
        world_seed,
        lang: corpus.lang,
        asr_shots: corpus.asr_shots,
        classifier_seed: corpus.classifier_seed,
    };
    let mut e = Enc::default();
    e.u64(corpus.utterances.len() as u64);
    for u in &corpus.utterances {
        e.u64(u.utt_id);
        e.f64(u.sentence_confidence);
        e.u64(u.runs.len() as u64);
        for r in &u.runs {
            e.u32(r.phoneme);
            e.u64(r.start as u64);
            e.u64(r.end as u64);
            e.f64(r.confidence);
        }
    }
    write_file(path, KIND_PSEUDO, &header, e.buf)
}

pub fn load_pseudo(path: &Path) -> Result<(u64, PseudoCorpus)> {
    let (header, payload): (PseudoHeader, _) = read_file(path, KIND_PSEUDO)?;
    let mut d = Dec {
        buf: &payload,
        pos: 0,
        path: path.display().to_string(),
    };
    let n = d.len()?;
    let mut utterances = Vec::with_capacity(n);
    for _ in 0..n {
        let utt_id = d.u64()?;
        let sentence_confidence = d.f64()?;
        let runs_n = d.len()?;
        let mut runs = Vec::with_capacity(runs_n);
        for _ in 0..runs_n {
            runs.push(PhonemeRun {
                phoneme: d.u32()?,
                start: d.u64()? as usize,
                end: d.u64()? as usize,
                confidence: d.f64()?,
            });
        }
        utterances.push(PseudoUtterance {
            utt_id,
            runs,
            sentence_confidence,
        });
    }
    d.done()?;
    Ok((
        header.world_seed,
        PseudoCorpus {
            lang: header.lang,
            asr_shots: header.asr_shots,
            classifier_seed: header.classifier_seed,
            utterances,
        },
    ))
}

// ---- model checkpoint ----

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    config: ModelConfig,
    provenance: Provenance,
    tables: Vec<(u32, Vec<u32>)>,
}

pub fn save_model(path: &Path, model: &SynthModel) -> Result<()> {
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        config: model.cfg.clone(),
        provenance: model.provenance.clone(),
        tables: model.tables.iter().map(|(k, v)| (*k, v.clone())).collect(),
    };
    let mut e = Enc::default();
    let entries: Vec<_> = model.params.iter().collect();
    e.u64(entries.len() as u64);
    for (name, value, trainable) in entries {
        e.str(name);
        e.u8(trainable as u8);
        e.tensor(value);
    }
    write_file(path, KIND_MODEL, &header, e.buf)
}

pub fn load_model(path: &Path) -> Result<SynthModel> {
    let (header, payload): (ModelHeader, _) = read_file(path, KIND_MODEL)?;
    let mut d = Dec {
        buf: &payload,
        pos: 0,
        path: path.display().to_string(),
    };
    let n = d.len()?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = d.str()?;
        let trainable = d.u8()? != 0;
        let value = d.tensor()?;
        params.insert(name.clone(), value);
        params.set_trainable(&name, trainable);
    }
    d.done()?;
    Ok(SynthModel {
        cfg: header.config,
        params,
        tables: header.tables.into_iter().collect(),
        provenance: header.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_split, CorpusConfig};
    use crate::model::{ModelConfig, SynthModel};
    use crate::pseudolabel::{train_frame_classifier, pseudo_label, ClassifierConfig};

    fn small_corpus() -> CorpusSplit {
        let cfg = CorpusConfig {
            source_utts_per_lang: 3,
            n_shots: 4,
            coverage_shots: 4,
            unlabeled_minutes: 0.5,
            eval_size: 3,
            ..Default::default()
        };
        make_split(5, &cfg).unwrap()
    }

    #[test]
    fn corpus_round_trip_is_exact() {
        let split = small_corpus();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &split).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(split, loaded);
        // re-saving produces byte-identical files
        let dir2 = tempfile::tempdir().unwrap();
        save_corpus(dir2.path(), &loaded).unwrap();
        for name in ["world.plx", "source.plx", "target.plx", "unpaired.plx", "eval.plx"] {
            let a = std::fs::read(dir.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn pseudo_round_trip_is_exact() {
        let split = small_corpus();
        let cls = train_frame_classifier(&split, 4, &ClassifierConfig { steps: 50, ..Default::default() }, 3).unwrap();
        let pseudo = pseudo_label(&cls, &split).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pseudo.plx");
        save_pseudo(&path, split.world_seed, &pseudo).unwrap();
        let (ws, loaded) = load_pseudo(&path).unwrap();
        assert_eq!(ws, split.world_seed);
        assert_eq!(pseudo, loaded);
    }

    #[test]
    fn model_round_trip_preserves_bits_and_flags() {
        let split = small_corpus();
        let mut m = SynthModel::new(ModelConfig::default(), 9).unwrap();
        m.add_language(&split.target_lang, 9);
        m.params.set_trainable_prefix("rep.", false);
        m.provenance.stage = "pretrain".into();
        m.provenance.pretrain_p_repr = Some(0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.plx");
        save_model(&path, &m).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(m.params.content_hash(), loaded.params.content_hash());
        assert_eq!(m.cfg, loaded.cfg);
        assert_eq!(m.tables, loaded.tables);
        assert_eq!(m.provenance, loaded.provenance);
        assert!(!loaded.params.is_trainable("rep.proj.w"));
        assert!(loaded.params.is_trainable("dec.out.w"));
    }

    #[test]
    fn wrong_kind_is_a_format_error() {
        let split = small_corpus();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &split).unwrap();
        let err = load_model(&dir.path().join("world.plx")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = load_model(Path::new("/nonexistent/m.plx")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/m.plx"), "{err}");
    }
}
