//! On-disk formats.
//!
//! | file            | layout                                                              |
//! |-----------------|---------------------------------------------------------------------|
//! | embeddings      | `LAPR` v1 · count u32 · dim u32 · kind u8 · 3 reserved · f32 body    |
//! | checkpoint      | `LAPC` v1 · json len u32 · config json · count u64 · f64 parameters  |
//! | mode cache      | `LAPM` v1 · count u32 · K u32 · dim u32 · flags u8 · 3 reserved · fingerprint u64 · f64 body |
//! | scores          | CSV `query_id,prompt_id,perf_score,label_score`                     |
//! | sidecars        | JSON lines, one object per record                                   |
//!
//! All integers and reals are little-endian. Checkpoint parameters follow
//! [`LaprModel::flatten`] order: query experts then prompt experts (each
//! `W1, b1, W2, b2`, matrices row-major), then router `W, b`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LaprError, Result};
use crate::model::{LaprModel, ModelConfig};
use crate::retrieval::{check_dense_ids, ModeCache, PromptRecord, QueryRecord};
use crate::synth::{SynthConfig, SynthDataset};
use crate::training::{ScoreEntry, ScoreTable, TrainConfig};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"LAPR";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LAPC";
pub const CACHE_MAGIC: &[u8; 4] = b"LAPM";
pub const FORMAT_VERSION: u32 = 1;
pub const EMBEDDING_HEADER_LEN: usize = 20;
pub const CACHE_HEADER_LEN: usize = 32;

/// `%g` with six significant digits, as C's printf prints it.
pub fn format_g6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        strip_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> LaprError {
    LaprError::Format { path: path.display().to_string(), reason: reason.into() }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| LaprError::invalid(format!("{what} {n} does not fit in 32 bits")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image = 0,
    Label = 1,
    Query = 2,
}

impl EmbeddingKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(EmbeddingKind::Image),
            1 => Some(EmbeddingKind::Label),
            2 => Some(EmbeddingKind::Query),
            _ => None,
        }
    }
}

/// Rows as stored: f32 values widened to f64, not renormalized.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

pub fn encode_embeddings(kind: EmbeddingKind, dim: usize, rows: &[&[f64]]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + rows.len() * dim * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(rows.len(), "record count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(dim, "dimension")?.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&[0u8; 3]);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(LaprError::invalid(format!("row {i} has dim {}, expected {dim}", row.len())));
        }
        for &x in row.iter() {
            let v = x as f32;
            if !v.is_finite() {
                return Err(LaprError::invalid(format!("row {i} holds {x}, not representable as a finite f32")));
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<EmbeddingFile> {
    if bytes.len() < EMBEDDING_HEADER_LEN {
        return Err(format_err(path, format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let count = u32_at(bytes, 8) as usize;
    let dim = u32_at(bytes, 12) as usize;
    let kind = EmbeddingKind::from_byte(bytes[16]).ok_or_else(|| format_err(path, format!("unknown kind {}", bytes[16])))?;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(EMBEDDING_HEADER_LEN))
        .ok_or_else(|| format_err(path, "header sizes overflow"))?;
    if bytes.len() != expected {
        return Err(format_err(path, format!("{} bytes, header implies {expected}", bytes.len())));
    }
    let body = &bytes[EMBEDDING_HEADER_LEN..];
    let mut rows = Vec::with_capacity(count);
    for r in 0..count {
        let mut row = Vec::with_capacity(dim);
        for c in 0..dim {
            let at = (r * dim + c) * 4;
            let v = f32::from_le_bytes(body[at..at + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(format_err(path, format!("non-finite value at record {r}, column {c}")));
            }
            row.push(v as f64);
        }
        rows.push(row);
    }
    Ok(EmbeddingFile { kind, dim, rows })
}

pub fn write_embeddings(path: &Path, kind: EmbeddingKind, dim: usize, rows: &[&[f64]]) -> Result<()> {
    fs::write(path, encode_embeddings(kind, dim, rows)?)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    decode_embeddings(&read_bytes(path)?, path)
}

pub fn encode_checkpoint(model: &LaprModel) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&model.config)?;
    let params = model.flatten();
    let mut out = Vec::with_capacity(20 + json.len() + params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(json.len(), "config length")?.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<LaprModel> {
    if bytes.len() < 12 {
        return Err(format_err(path, "truncated header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let json_len = u32_at(bytes, 8) as usize;
    let json_end = 12 + json_len;
    if bytes.len() < json_end + 8 {
        return Err(format_err(path, "truncated config"));
    }
    let config: ModelConfig =
        serde_json::from_slice(&bytes[12..json_end]).map_err(|e| format_err(path, format!("config: {e}")))?;
    config.validate().map_err(|e| format_err(path, format!("config: {e}")))?;
    let count = u64_at(bytes, json_end) as usize;
    let body = &bytes[json_end + 8..];
    let mut model = LaprModel::zeros(config)?;
    if count != model.num_params() || body.len() != count * 8 {
        return Err(format_err(
            path,
            format!("{} parameter bytes for {count} declared and {} expected parameters", body.len(), model.num_params()),
        ));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut slices = model.query_bank.param_slices_mut();
    slices.extend(model.prompt_bank.param_slices_mut());
    slices.extend(model.router.param_slices_mut());
    for s in slices {
        for x in s.iter_mut() {
            *x = values.next().expect("length checked");
        }
    }
    model.validate().map_err(|e| format_err(path, e.to_string()))?;
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &LaprModel) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<LaprModel> {
    decode_checkpoint(&read_bytes(path)?, path)
}

pub fn encode_cache(cache: &ModeCache) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(CACHE_HEADER_LEN + cache.as_slice().len() * 8);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(cache.num_prompts(), "prompt count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(cache.experts(), "expert count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(cache.dim(), "dimension")?.to_le_bytes());
    out.push(cache.use_label() as u8);
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&cache.fingerprint().to_le_bytes());
    for x in cache.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cache(bytes: &[u8], path: &Path) -> Result<ModeCache> {
    if bytes.len() < CACHE_HEADER_LEN {
        return Err(format_err(path, format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != CACHE_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let n = u32_at(bytes, 8) as usize;
    let k = u32_at(bytes, 12) as usize;
    let d = u32_at(bytes, 16) as usize;
    let use_label = match bytes[20] {
        0 => false,
        1 => true,
        b => return Err(format_err(path, format!("bad flag byte {b}"))),
    };
    let fingerprint = u64_at(bytes, 24);
    let expected = n
        .checked_mul(k)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(8))
        .and_then(|x| x.checked_add(CACHE_HEADER_LEN))
        .ok_or_else(|| format_err(path, "header sizes overflow"))?;
    if bytes.len() != expected {
        return Err(format_err(path, format!("{} bytes, header implies {expected}", bytes.len())));
    }
    let data: Vec<f64> = bytes[CACHE_HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(format_err(path, "non-finite cache value"));
    }
    ModeCache::from_parts(n, k, d, use_label, fingerprint, data)
}

pub fn write_cache(path: &Path, cache: &ModeCache) -> Result<()> {
    fs::write(path, encode_cache(cache)?)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<ModeCache> {
    decode_cache(&read_bytes(path)?, path)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    query_id: usize,
    prompt_id: usize,
    perf_score: f64,
    label_score: f64,
}

/// Scores are written at full precision so a reread table is identical.
pub fn write_scores(path: &Path, table: &ScoreTable) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for ((q, p), e) in table.iter() {
        w.serialize(ScoreRow { query_id: q, prompt_id: p, perf_score: e.perf, label_score: e.label })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<ScoreTable> {
    let mut r = csv::Reader::from_path(path)?;
    let mut table = ScoreTable::new();
    for row in r.deserialize() {
        let row: ScoreRow = row.map_err(|e| format_err(path, e.to_string()))?;
        table
            .insert(row.query_id, row.prompt_id, ScoreEntry { perf: row.perf_score, label: row.label_score })
            .map_err(|e| format_err(path, e.to_string()))?;
    }
    Ok(table)
}

/// One line of a metadata sidecar. `hidden_mode` appears only in the
/// evaluation sidecars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<usize>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub meta: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_mode: Option<usize>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Everything a run needs besides data paths. Every field has a default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()
    }

    /// Reads a JSON config; parse errors count as invalid arguments.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| LaprError::invalid(format!("{}: {e}", path.display())))
    }
}

/// Query split inside a data directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn stem(self) -> &'static str {
        match self {
            Split::Train => "train_queries",
            Split::Eval => "eval_queries",
        }
    }
}

/// File names inside a generated data directory.
#[derive(Clone, Debug)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn prompt_images(&self) -> PathBuf {
        self.root.join("prompts_image.lapr")
    }

    pub fn prompt_labels(&self) -> PathBuf {
        self.root.join("prompts_label.lapr")
    }

    pub fn prompt_meta(&self) -> PathBuf {
        self.root.join("prompts.jsonl")
    }

    pub fn prompt_eval_meta(&self) -> PathBuf {
        self.root.join("prompts.eval.jsonl")
    }

    pub fn queries(&self, split: Split) -> PathBuf {
        self.root.join(format!("{}.lapr", split.stem()))
    }

    pub fn query_labels(&self, split: Split) -> PathBuf {
        self.root.join(format!("{}_label.lapr", split.stem()))
    }

    pub fn query_meta(&self, split: Split) -> PathBuf {
        self.root.join(format!("{}.jsonl", split.stem()))
    }

    pub fn query_eval_meta(&self, split: Split) -> PathBuf {
        self.root.join(format!("{}.eval.jsonl", split.stem()))
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }

    /// Writes the dataset, its sidecars, the score table and the config.
    pub fn write(&self, config: &RunConfig, ds: &SynthDataset, scores: &ScoreTable) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        let dim = ds.config.dim;
        let images: Vec<&[f64]> = ds.prompts.iter().map(|p| p.image.as_slice()).collect();
        let labels: Vec<&[f64]> = ds.prompts.iter().map(|p| p.label.as_slice()).collect();
        write_embeddings(&self.prompt_images(), EmbeddingKind::Image, dim, &images)?;
        write_embeddings(&self.prompt_labels(), EmbeddingKind::Label, dim, &labels)?;
        let meta = |with_mode: bool| -> Vec<RecordMeta> {
            ds.prompts
                .iter()
                .zip(&ds.prompt_modes)
                .map(|(p, &m)| RecordMeta {
                    id: p.id,
                    category: Some(p.category),
                    meta: p.meta.clone(),
                    hidden_mode: with_mode.then_some(m),
                })
                .collect()
        };
        write_jsonl(&self.prompt_meta(), &meta(false))?;
        write_jsonl(&self.prompt_eval_meta(), &meta(true))?;
        for (split, queries, modes) in
            [(Split::Train, &ds.train_queries, &ds.train_modes), (Split::Eval, &ds.eval_queries, &ds.eval_modes)]
        {
            let emb: Vec<&[f64]> = queries.iter().map(|q| q.embedding.as_slice()).collect();
            write_embeddings(&self.queries(split), EmbeddingKind::Query, dim, &emb)?;
            let labels: Vec<&[f64]> = queries
                .iter()
                .map(|q| q.label.as_ref().map(|l| l.as_slice()).ok_or_else(|| LaprError::invalid("query without label")))
                .collect::<Result<_>>()?;
            write_embeddings(&self.query_labels(split), EmbeddingKind::Label, dim, &labels)?;
            let meta = |with_mode: bool| -> Vec<RecordMeta> {
                queries
                    .iter()
                    .zip(modes.iter())
                    .map(|(q, &m)| RecordMeta {
                        id: q.id,
                        category: q.category,
                        meta: String::new(),
                        hidden_mode: with_mode.then_some(m),
                    })
                    .collect()
            };
            write_jsonl(&self.query_meta(split), &meta(false))?;
            write_jsonl(&self.query_eval_meta(split), &meta(true))?;
        }
        write_scores(&self.scores(), scores)?;
        fs::write(self.config(), serde_json::to_string_pretty(config)? + "\n")?;
        Ok(())
    }

    pub fn load_config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config())
    }

    pub fn load_prompts(&self) -> Result<Vec<PromptRecord>> {
        let images = read_embeddings(&self.prompt_images())?;
        let labels = read_embeddings(&self.prompt_labels())?;
        let meta: Vec<RecordMeta> = read_jsonl(&self.prompt_meta())?;
        if labels.rows.len() != images.rows.len() || meta.len() != images.rows.len() {
            return Err(format_err(&self.root, "prompt image, label and metadata counts differ"));
        }
        check_dense_ids(meta.iter().map(|m| m.id), "prompt")?;
        images
            .rows
            .into_iter()
            .zip(labels.rows)
            .zip(meta)
            .map(|((img, lab), m)| {
                let mut p = PromptRecord::ingest(m.id, img, lab, m.category.unwrap_or(0))?;
                p.meta = m.meta;
                Ok(p)
            })
            .collect()
    }

    /// Queries of one split with labels and categories attached.
    pub fn load_queries(&self, split: Split) -> Result<Vec<QueryRecord>> {
        let emb = read_embeddings(&self.queries(split))?;
        let labels_path = self.query_labels(split);
        let labels = if labels_path.exists() { Some(read_embeddings(&labels_path)?) } else { None };
        let meta: Vec<RecordMeta> = read_jsonl(&self.query_meta(split))?;
        if meta.len() != emb.rows.len() || labels.as_ref().is_some_and(|l| l.rows.len() != emb.rows.len()) {
            return Err(format_err(&self.root, "query embedding, label and metadata counts differ"));
        }
        check_dense_ids(meta.iter().map(|m| m.id), "query")?;
        let mut labels = labels.map(|l| l.rows.into_iter());
        emb.rows
            .into_iter()
            .zip(meta)
            .map(|(u, m)| QueryRecord::ingest(m.id, u, labels.as_mut().and_then(|l| l.next()), m.category))
            .collect()
    }

    /// Hidden modes of the prompts and of one query split.
    pub fn load_modes(&self, split: Split) -> Result<(Vec<usize>, Vec<usize>)> {
        let modes = |path: PathBuf| -> Result<Vec<usize>> {
            let meta: Vec<RecordMeta> = read_jsonl(&path)?;
            meta.into_iter().map(|m| m.hidden_mode.ok_or_else(|| format_err(&path, "record without hidden_mode"))).collect()
        };
        Ok((modes(self.prompt_eval_meta())?, modes(self.query_eval_meta(split))?))
    }

    pub fn load_scores(&self) -> Result<ScoreTable> {
        read_scores(&self.scores())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn g6_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (999999.5, "1e+06"),
            (0.166666666, "0.166667"),
            (100.0, "100"),
        ];
        for (x, want) in cases {
            assert_eq!(format_g6(x), want, "{x}");
        }
    }

    #[test]
    fn embedding_file_sizes() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 * 0.01; 32]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let bytes = encode_embeddings(EmbeddingKind::Image, 32, &refs).unwrap();
        assert_eq!(bytes.len(), 12_820);
        let empty = encode_embeddings(EmbeddingKind::Query, 8, &[]).unwrap();
        assert_eq!(empty.len(), 20);
        let back = decode_embeddings(&empty, Path::new("x")).unwrap();
        assert!(back.rows.is_empty());
        assert_eq!(back.kind, EmbeddingKind::Query);
    }

    #[test]
    fn embedding_decode_rejects_damage() {
        let row = [1.0, 2.0];
        let bytes = encode_embeddings(EmbeddingKind::Label, 2, &[&row]).unwrap();
        let p = Path::new("x");
        assert!(matches!(decode_embeddings(&bytes[..bytes.len() - 1], p), Err(LaprError::Format { .. })));
        assert!(decode_embeddings(&bytes[..10], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_embeddings(&bad, p).is_err());
        let mut bad = bytes.clone();
        bad[16] = 9;
        assert!(decode_embeddings(&bad, p).is_err());
        let mut bad = bytes;
        bad[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_embeddings(&bad, p).is_err());
        assert!(encode_embeddings(EmbeddingKind::Image, 1, &[&[1e300]]).is_err());
    }

    proptest! {
        #[test]
        fn embedding_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 0..20)) {
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let bytes = encode_embeddings(EmbeddingKind::Image, 3, &refs).unwrap();
            let back = decode_embeddings(&bytes, Path::new("x")).unwrap();
            for (a, b) in rows.iter().zip(&back.rows) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert_eq!((*x as f32) as f64, *y);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = SeededRng::new(4);
        let cfg = ModelConfig { experts: 3, hidden_dim: 5, output_dim: 2, temperature: 0.7, ..ModelConfig::new(4) };
        let model = LaprModel::init(cfg, &mut rng).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let back = decode_checkpoint(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, model);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
        assert!(decode_checkpoint(&bytes[..6], Path::new("x")).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let cache = ModeCache::from_parts(2, 3, 2, true, 0xdead_beef, (0..12).map(|i| i as f64 / 7.0).collect()).unwrap();
        let bytes = encode_cache(&cache).unwrap();
        assert_eq!(bytes.len(), CACHE_HEADER_LEN + 12 * 8);
        assert_eq!(decode_cache(&bytes, Path::new("x")).unwrap(), cache);
        assert!(decode_cache(&bytes[..40], Path::new("x")).is_err());
    }

    #[test]
    fn scores_and_sidecars_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = ScoreTable::new();
        t.insert(0, 3, ScoreEntry { perf: 0.1 + 0.2, label: 1.0 / 3.0 }).unwrap();
        t.insert(1, 0, ScoreEntry { perf: 0.0, label: 1e-17 }).unwrap();
        let path = dir.path().join("s.csv");
        write_scores(&path, &t).unwrap();
        assert_eq!(read_scores(&path).unwrap(), t);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("query_id,prompt_id,perf_score,label_score\n"));

        let meta = vec![
            RecordMeta { id: 0, category: Some(2), meta: String::new(), hidden_mode: None },
            RecordMeta { id: 1, category: None, meta: "x".into(), hidden_mode: Some(4) },
        ];
        let path = dir.path().join("m.jsonl");
        write_jsonl(&path, &meta).unwrap();
        assert_eq!(read_jsonl::<RecordMeta>(&path).unwrap(), meta);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().next().unwrap(), r#"{"id":0,"category":2}"#);
    }
}
