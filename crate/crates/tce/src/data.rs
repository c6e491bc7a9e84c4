//! Dataset ingestion and synthetic corpus generation.
//!
//! On-disk layout of a data directory:
//!   manifest.jsonl          one {"query": ..., "video_id": ...} per line
//!   vocab.txt               one token per line (index = line + 2)
//!   features/<id>.tcef      frame features per video

use crate::error::{Result, TceError};
use crate::tensor::Tensor;
use crate::video::{self, FrameFeatures};
use crate::vocab::Vocabulary;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub query: String,
    pub video_id: String,
}

/// Loaded dataset: records with pre-tokenized queries plus the deduplicated
/// video features in first-appearance order.
#[derive(Debug)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Token indices per record, parallel to `records`.
    pub tokens: Vec<Vec<usize>>,
    /// Unique videos in first-appearance order.
    pub videos: Vec<FrameFeatures>,
    /// video_id -> index into `videos`; also the retrieval ground truth.
    pub video_index: BTreeMap<String, usize>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn num_pairs(&self) -> usize {
        self.records.len()
    }

    pub fn num_videos(&self) -> usize {
        self.videos.len()
    }

    /// Ground-truth video index for record `i`.
    pub fn target(&self, i: usize) -> usize {
        self.video_index[&self.records[i].video_id]
    }

    /// Loads the conventional directory layout.
    pub fn load_dir<P: AsRef<Path>>(dir: P) -> Result<Dataset> {
        let dir = dir.as_ref();
        let vocab = Vocabulary::load(dir.join("vocab.txt"))?;
        load_dataset(dir.join("manifest.jsonl"), dir.join("features"), vocab)
    }
}

/// Parses and validates a manifest against the feature directory: every line
/// must be a JSON record with a non-empty tokenized query, and every
/// referenced feature file must exist and parse.
pub fn load_dataset<P: AsRef<Path>>(
    manifest_path: P,
    features_dir: P,
    vocab: Vocabulary,
) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let features_dir = features_dir.as_ref();
    let text = fs::read_to_string(manifest_path)?;

    let mut records = Vec::new();
    let mut tokens = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line)
            .map_err(|e| TceError::Manifest { line: i + 1, msg: e.to_string() })?;
        let ids = vocab.encode(&record.query).map_err(|_| TceError::Manifest {
            line: i + 1,
            msg: format!("query {:?} is empty after tokenization", record.query),
        })?;
        records.push(record);
        tokens.push(ids);
    }
    if records.is_empty() {
        return Err(TceError::NoRecords);
    }

    let mut videos = Vec::new();
    let mut video_index = BTreeMap::new();
    let mut missing = Vec::new();
    for record in &records {
        if video_index.contains_key(&record.video_id) {
            continue;
        }
        let path = feature_path(features_dir, &record.video_id);
        if !path.is_file() {
            if !missing.contains(&record.video_id) {
                missing.push(record.video_id.clone());
            }
            continue;
        }
        let frames = video::load_frames(&path, &record.video_id)?;
        video_index.insert(record.video_id.clone(), videos.len());
        videos.push(frames);
    }
    if !missing.is_empty() {
        return Err(TceError::MissingFeatures { ids: missing });
    }
    Ok(Dataset { records, tokens, videos, video_index, vocab })
}

pub fn feature_path(features_dir: &Path, video_id: &str) -> PathBuf {
    features_dir.join(format!("{video_id}.tcef"))
}

/// Stable FNV-1a hash, used for the seed-independent validation split.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Indices of records held out for validation: ~10% by stable hash of the
/// video id, so the split survives reshuffles and reruns.
pub fn validation_indices(records: &[DatasetRecord]) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| stable_hash(&r.video_id).is_multiple_of(10))
        .map(|(i, _)| i)
        .collect()
}

/// In-memory description of a generated corpus, kept for inspection and for
/// sanity probes over the latent concepts.
pub struct SyntheticCorpus {
    pub records: Vec<DatasetRecord>,
    /// Generator vector per vocabulary token, `[vocab_size, feature_dim]`.
    pub token_vectors: Tensor,
    /// Latent concept per pair (the mean of its query's token vectors).
    pub concepts: Vec<Vec<f64>>,
    /// Token strings in vocabulary order.
    pub tokens: Vec<String>,
}

/// Generates a retrieval corpus where perfect retrieval is achievable: each
/// pair draws a distinct token sequence, the latent concept is the mean of
/// the tokens' generator vectors, and the video's frames are noisy copies of
/// the concept. Fixed seed, fixed bytes.
pub fn generate_synthetic<P: AsRef<Path>>(
    out_dir: P,
    n_pairs: usize,
    vocab_size: usize,
    feature_dim: usize,
    frames_per_video: usize,
    seed: u64,
) -> Result<SyntheticCorpus> {
    if n_pairs < 2 {
        return Err(TceError::Config(format!("n_pairs must be >= 2, got {n_pairs}")));
    }
    if vocab_size < 2 || feature_dim == 0 || frames_per_video == 0 {
        return Err(TceError::Config("degenerate synthetic corpus dimensions".into()));
    }
    let out_dir = out_dir.as_ref();
    let features_dir = out_dir.join("features");
    fs::create_dir_all(&features_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = (vocab_size.max(2) - 1).to_string().len();
    let tokens: Vec<String> = (0..vocab_size).map(|i| format!("w{i:0width$}")).collect();
    let token_vectors = Tensor::gaussian(&[vocab_size, feature_dim], 1.0, &mut rng);

    let mut records = Vec::with_capacity(n_pairs);
    let mut concepts = Vec::with_capacity(n_pairs);
    let mut seen = std::collections::BTreeSet::new();
    let noise_std = 0.1;
    for pair in 0..n_pairs {
        // distinct token sequences keep retrieval unambiguous
        let sequence = loop {
            let len = rng.gen_range(3..=8usize);
            let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
            if seen.insert(seq.clone()) {
                break seq;
            }
        };
        let mut concept = vec![0.0; feature_dim];
        for &t in &sequence {
            for (c, v) in concept.iter_mut().zip(token_vectors.row(t)) {
                *c += v;
            }
        }
        for c in concept.iter_mut() {
            *c /= sequence.len() as f64;
        }

        let mut frame_data = Vec::with_capacity(frames_per_video * feature_dim);
        for _ in 0..frames_per_video {
            for &c in &concept {
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                frame_data.push(c + noise_std * noise);
            }
        }
        let video_id = format!("vid_{pair:04}");
        let features = Tensor::matrix(frames_per_video, feature_dim, frame_data)?;
        video::save_frames(feature_path(&features_dir, &video_id), &features)?;

        let query = sequence.iter().map(|&t| tokens[t].as_str()).collect::<Vec<_>>().join(" ");
        records.push(DatasetRecord { query, video_id });
        concepts.push(concept);
    }

    let mut manifest = fs::File::create(out_dir.join("manifest.jsonl"))?;
    for record in &records {
        let line = serde_json::to_string(record)
            .map_err(|e| TceError::Config(format!("serializing manifest: {e}")))?;
        writeln!(manifest, "{line}")?;
    }
    manifest.flush()?;
    Vocabulary::from_tokens(tokens.iter().cloned())?.save(out_dir.join("vocab.txt"))?;

    Ok(SyntheticCorpus { records, token_vectors, concepts, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn dir_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().to_string_lossy().to_string();
                    files.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn synthetic_corpus_is_byte_deterministic() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        generate_synthetic(d1.path(), 8, 20, 6, 4, 7).unwrap();
        generate_synthetic(d2.path(), 8, 20, 6, 4, 7).unwrap();
        assert_eq!(dir_digest(d1.path()), dir_digest(d2.path()));
    }

    #[test]
    fn synthetic_corpus_has_expected_cardinality() {
        let dir = tempdir().unwrap();
        let corpus = generate_synthetic(dir.path(), 32, 50, 8, 4, 7).unwrap();
        assert_eq!(corpus.records.len(), 32);
        let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.lines().count(), 32);
        let feature_files = fs::read_dir(dir.path().join("features")).unwrap().count();
        assert_eq!(feature_files, 32);
    }

    #[test]
    fn mean_token_vector_probe_recovers_concepts() {
        // nearest mean-frame-vector by the mean of generator token vectors
        let dir = tempdir().unwrap();
        let corpus = generate_synthetic(dir.path(), 24, 40, 8, 5, 11).unwrap();
        let dataset = Dataset::load_dir(dir.path()).unwrap();
        let mean_frames: Vec<Vec<f64>> = dataset
            .videos
            .iter()
            .map(|f| {
                let (m, d) = (f.num_frames(), f.feature_dim());
                let mut mean = vec![0.0; d];
                for i in 0..m {
                    for (s, v) in mean.iter_mut().zip(f.features.row(i)) {
                        *s += v;
                    }
                }
                mean.iter().map(|v| v / m as f64).collect()
            })
            .collect();
        let mut hits = 0;
        for (i, concept) in corpus.concepts.iter().enumerate() {
            let target = dataset.target(i);
            let mut best = (f64::INFINITY, usize::MAX);
            for (j, frame_mean) in mean_frames.iter().enumerate() {
                let dist: f64 =
                    concept.iter().zip(frame_mean).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            if best.1 == target {
                hits += 1;
            }
        }
        let accuracy = hits as f64 / corpus.concepts.len() as f64;
        assert!(accuracy > 0.9, "nearest-neighbor accuracy {accuracy}");
    }

    #[test]
    fn empty_manifest_is_no_records() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("manifest.jsonl"), "").unwrap();
        fs::create_dir(dir.path().join("features")).unwrap();
        let vocab = Vocabulary::from_tokens(["a".into()]).unwrap();
        let err = load_dataset(
            dir.path().join("manifest.jsonl"),
            dir.path().join("features"),
            vocab,
        )
        .unwrap_err();
        assert!(matches!(err, TceError::NoRecords));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempdir().unwrap();
        fs::write(
            dir.path().join("manifest.jsonl"),
            "{\"query\": \"a b\", \"video_id\": \"v0\"}\nnot json\n",
        )
        .unwrap();
        fs::create_dir(dir.path().join("features")).unwrap();
        let vocab = Vocabulary::from_tokens(["a".into(), "b".into()]).unwrap();
        let err = load_dataset(
            dir.path().join("manifest.jsonl"),
            dir.path().join("features"),
            vocab,
        )
        .unwrap_err();
        assert!(matches!(err, TceError::Manifest { line: 2, .. }), "{err}");
    }

    #[test]
    fn query_empty_after_tokenization_reports_line() {
        let dir = tempdir().unwrap();
        fs::write(
            dir.path().join("manifest.jsonl"),
            "{\"query\": \"a\", \"video_id\": \"v0\"}\n{\"query\": \"!!! ...\", \"video_id\": \"v1\"}\n",
        )
        .unwrap();
        fs::create_dir(dir.path().join("features")).unwrap();
        let vocab = Vocabulary::from_tokens(["a".into()]).unwrap();
        let err = load_dataset(
            dir.path().join("manifest.jsonl"),
            dir.path().join("features"),
            vocab,
        )
        .unwrap_err();
        assert!(matches!(err, TceError::Manifest { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("empty after tokenization"), "{err}");
    }

    #[test]
    fn missing_feature_files_listed_by_id() {
        let dir = tempdir().unwrap();
        fs::write(
            dir.path().join("manifest.jsonl"),
            "{\"query\": \"a\", \"video_id\": \"gone1\"}\n{\"query\": \"b\", \"video_id\": \"gone2\"}\n",
        )
        .unwrap();
        fs::create_dir(dir.path().join("features")).unwrap();
        let vocab = Vocabulary::from_tokens(["a".into(), "b".into()]).unwrap();
        let err = load_dataset(
            dir.path().join("manifest.jsonl"),
            dir.path().join("features"),
            vocab,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gone1") && msg.contains("gone2"), "{msg}");
    }

    #[test]
    fn wrong_magic_names_offending_file() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("manifest.jsonl"), "{\"query\": \"a\", \"video_id\": \"v0\"}\n")
            .unwrap();
        fs::create_dir(dir.path().join("features")).unwrap();
        fs::write(dir.path().join("features/v0.tcef"), b"BAD!rest").unwrap();
        let vocab = Vocabulary::from_tokens(["a".into()]).unwrap();
        let err = load_dataset(
            dir.path().join("manifest.jsonl"),
            dir.path().join("features"),
            vocab,
        )
        .unwrap_err();
        assert!(err.to_string().contains("v0.tcef"), "{err}");
    }

    #[test]
    fn duplicate_video_ids_deduplicate() {
        let dir = tempdir().unwrap();
        let corpus_dir = dir.path();
        generate_synthetic(corpus_dir, 4, 10, 4, 3, 5).unwrap();
        // add a second caption for vid_0000
        let manifest = corpus_dir.join("manifest.jsonl");
        let mut text = fs::read_to_string(&manifest).unwrap();
        text.push_str("{\"query\": \"w1 w2 w3\", \"video_id\": \"vid_0000\"}\n");
        fs::write(&manifest, text).unwrap();
        let dataset = Dataset::load_dir(corpus_dir).unwrap();
        assert_eq!(dataset.num_pairs(), 5);
        assert_eq!(dataset.num_videos(), 4);
        assert_eq!(dataset.target(4), dataset.target(0));
    }

    #[test]
    fn validation_split_is_stable_and_sparse() {
        let records: Vec<DatasetRecord> = (0..200)
            .map(|i| DatasetRecord { query: "q".into(), video_id: format!("vid_{i:04}") })
            .collect();
        let a = validation_indices(&records);
        let b = validation_indices(&records);
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() < 50, "got {} validation rows", a.len());
    }
}
