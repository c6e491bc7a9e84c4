//! Temporal-attentive video encoder and the TCEF frame-feature file format.
//!
//! Frame vectors run through a GRU for consecutive-frame dependence, then
//! multi-head self-attention for frame-wise interaction (residual +
//! layer norm), and finally temporal attention pooling into one vector.
//! Padded frames are masked out of every attention and pooling step.

use crate::config::{RunConfig, VideoPool, VideoSeq};
use crate::error::{Result, TceError};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::RngCore;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FRAME_MAGIC: &[u8; 4] = b"TCEF";
pub const FRAME_VERSION: u32 = 1;
const LAYERNORM_EPS: f64 = 1e-5;

/// Frame feature matrix for one video with a validity mask; `false` rows are
/// padding and are ignored by every attention and pooling step.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub video_id: String,
    /// `[M, feature_dim]` frame vectors.
    pub features: Tensor,
    pub mask: Vec<bool>,
}

impl FrameFeatures {
    pub fn new(video_id: String, features: Tensor, mask: Vec<bool>) -> Result<Self> {
        if features.rank() != 2 || mask.len() != features.rows() {
            return Err(TceError::Shape {
                op: "frame_features",
                detail: format!("features {:?} with {} mask entries", features.shape(), mask.len()),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TceError::AllMasked);
        }
        Ok(FrameFeatures { video_id, features, mask })
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Normalizes to exactly `target` rows: longer sequences are uniformly
    /// subsampled, shorter ones padded with masked zero rows.
    pub fn fit_to(&self, target: usize) -> Result<FrameFeatures> {
        let (m, d) = (self.num_frames(), self.feature_dim());
        if m == target {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(target * d);
        let mut mask = Vec::with_capacity(target);
        if m > target {
            for j in 0..target {
                let src = j * m / target;
                data.extend_from_slice(self.features.row(src));
                mask.push(self.mask[src]);
            }
        } else {
            for i in 0..m {
                data.extend_from_slice(self.features.row(i));
                mask.push(self.mask[i]);
            }
            data.extend(std::iter::repeat_n(0.0, (target - m) * d));
            mask.extend(std::iter::repeat_n(false, target - m));
        }
        FrameFeatures::new(self.video_id.clone(), Tensor::matrix(target, d, data)?, mask)
    }
}

// ── TCEF file format ─────────────────────────────────────────────────────

fn format_err(path: &Path, msg: impl Into<String>) -> TceError {
    TceError::Format { file: path.to_path_buf(), msg: msg.into() }
}

/// Writes `TCEF`, version u32, M u32, feature dim u32, then M x dim
/// little-endian f32 values row-major.
pub fn save_frames<P: AsRef<Path>>(path: P, features: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if features.rank() != 2 {
        return Err(TceError::Shape {
            op: "save_frames",
            detail: format!("{:?}", features.shape()),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FRAME_MAGIC)?;
    w.write_all(&FRAME_VERSION.to_le_bytes())?;
    w.write_all(&(features.rows() as u32).to_le_bytes())?;
    w.write_all(&(features.cols() as u32).to_le_bytes())?;
    for &v in features.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Header-only validation; used by dataset loading to fail fast on bad files.
pub fn check_frame_header<P: AsRef<Path>>(path: P) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err(path, "truncated header"))?;
    if &magic != FRAME_MAGIC {
        return Err(format_err(path, format!("bad magic bytes {magic:?}, expected \"TCEF\"")));
    }
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated version"))?;
    let version = u32::from_le_bytes(buf);
    if version != FRAME_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated frame count"))?;
    let m = u32::from_le_bytes(buf) as usize;
    r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated feature dim"))?;
    let d = u32::from_le_bytes(buf) as usize;
    if m == 0 || d == 0 {
        return Err(format_err(path, format!("degenerate dimensions {m}x{d}")));
    }
    Ok((m, d))
}

pub fn load_frames<P: AsRef<Path>>(path: P, video_id: &str) -> Result<FrameFeatures> {
    let path = path.as_ref();
    let (m, d) = check_frame_header(path)?;
    let mut r = BufReader::new(File::open(path)?);
    let mut skip = [0u8; 16];
    r.read_exact(&mut skip)?;
    let mut data = Vec::with_capacity(m * d);
    let mut buf = [0u8; 4];
    for _ in 0..m * d {
        r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated payload"))?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    FrameFeatures::new(video_id.to_string(), Tensor::matrix(m, d, data)?, vec![true; m])
}

// ── parameter initialization ─────────────────────────────────────────────

/// Registers all video-side parameters for the given config and input
/// frame-feature dimension.
pub fn init_params(
    store: &mut ParamStore,
    cfg: &RunConfig,
    frame_dim: usize,
    rng: &mut dyn RngCore,
) -> Result<()> {
    let d_v = cfg.d_v;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    match cfg.video_seq {
        VideoSeq::Gru => {
            store.insert("video.gru.w_ih", Tensor::uniform(&[3 * d_v, frame_dim], fan(frame_dim), rng))?;
            store.insert("video.gru.w_hh", Tensor::uniform(&[3 * d_v, d_v], fan(d_v), rng))?;
            store.insert("video.gru.b_ih", Tensor::zeros(&[3 * d_v]))?;
            store.insert("video.gru.b_hh", Tensor::zeros(&[3 * d_v]))?;
        }
        VideoSeq::Affine => {
            store.insert("video.seq.w", Tensor::uniform(&[d_v, frame_dim], fan(frame_dim), rng))?;
            store.insert("video.seq.b", Tensor::zeros(&[d_v]))?;
        }
    }
    if cfg.use_mha {
        for h in 0..cfg.heads {
            for proj in ["q", "k", "v"] {
                store.insert(
                    &format!("video.mha.h{h}.{proj}"),
                    Tensor::uniform(&[cfg.head_dim, d_v], fan(d_v), rng),
                )?;
            }
        }
        store.insert(
            "video.mha.proj",
            Tensor::uniform(&[d_v, cfg.heads * cfg.head_dim], fan(cfg.heads * cfg.head_dim), rng),
        )?;
    }
    if cfg.video_pool == VideoPool::Attn {
        store.insert("video.attn.w", Tensor::uniform(&[cfg.d_va, d_v], fan(d_v), rng))?;
        store.insert("video.attn.b", Tensor::zeros(&[cfg.d_va]))?;
        store.insert("video.attn.u", Tensor::uniform(&[cfg.d_va], fan(cfg.d_va), rng))?;
    }
    Ok(())
}

// ── encoder stages ───────────────────────────────────────────────────────

/// One GRU step: reset/update gates from input and state, candidate gated by
/// reset, new state interpolated by the update gate.
#[allow(clippy::too_many_arguments)]
fn gru_cell(
    g: &mut Graph,
    w_ih: NodeId,
    w_hh: NodeId,
    b_ih: NodeId,
    b_hh: NodeId,
    x: NodeId,
    hidden: NodeId,
    d: usize,
) -> Result<NodeId> {
    let gi = g.matmul(w_ih, x)?;
    let gi = g.add(gi, b_ih)?;
    let gh = g.matmul(w_hh, hidden)?;
    let gh = g.add(gh, b_hh)?;
    let reset_pre = {
        let a = g.slice(gi, 0, d)?;
        let b = g.slice(gh, 0, d)?;
        g.add(a, b)?
    };
    let reset = g.sigmoid(reset_pre)?;
    let update_pre = {
        let a = g.slice(gi, d, 2 * d)?;
        let b = g.slice(gh, d, 2 * d)?;
        g.add(a, b)?
    };
    let update = g.sigmoid(update_pre)?;
    let cand_pre = {
        let a = g.slice(gi, 2 * d, 3 * d)?;
        let b = g.slice(gh, 2 * d, 3 * d)?;
        let gated = g.mul(reset, b)?;
        g.add(a, gated)?
    };
    let candidate = g.tanh(cand_pre)?;
    // h' = (1 - z) * candidate + z * h
    let keep = g.mul(update, hidden)?;
    let ones = g.constant(Tensor::vector(vec![1.0; d]))?;
    let inv_update = g.sub(ones, update)?;
    let fresh = g.mul(inv_update, candidate)?;
    g.add(keep, fresh)
}

/// Runs the sequence model over real frames in order. The recurrent state
/// skips padded positions; their output rows stay zero and masked.
pub fn sequence_encode(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    frames: &FrameFeatures,
) -> Result<NodeId> {
    let m = frames.num_frames();
    if m == 0 {
        return Err(TceError::AllMasked);
    }
    let d = cfg.d_v;
    let x = g.constant(frames.features.clone())?;
    let mut rows: Vec<NodeId> = Vec::with_capacity(m);
    let zero = g.constant(Tensor::zeros(&[d]))?;
    match cfg.video_seq {
        VideoSeq::Gru => {
            let w_ih = g.param(store, "video.gru.w_ih")?;
            let w_hh = g.param(store, "video.gru.w_hh")?;
            let b_ih = g.param(store, "video.gru.b_ih")?;
            let b_hh = g.param(store, "video.gru.b_hh")?;
            let mut hidden = zero;
            for t in 0..m {
                if frames.mask[t] {
                    let xt = g.row(x, t)?;
                    hidden = gru_cell(g, w_ih, w_hh, b_ih, b_hh, xt, hidden, d)?;
                    rows.push(hidden);
                } else {
                    rows.push(zero);
                }
            }
        }
        VideoSeq::Affine => {
            let w = g.param(store, "video.seq.w")?;
            let b = g.param(store, "video.seq.b")?;
            for t in 0..m {
                if frames.mask[t] {
                    let xt = g.row(x, t)?;
                    let pre = g.matmul(w, xt)?;
                    rows.push(g.add(pre, b)?);
                } else {
                    rows.push(zero);
                }
            }
        }
    }
    g.stack_rows(&rows)
}

/// Multi-head self-attention over the frame sequence with residual connection
/// and layer normalization. Padded keys are excluded from every softmax.
pub fn multihead_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    seq: NodeId,
    mask: &[bool],
) -> Result<NodeId> {
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let w_q = g.param(store, &format!("video.mha.h{h}.q"))?;
        let w_k = g.param(store, &format!("video.mha.h{h}.k"))?;
        let w_v = g.param(store, &format!("video.mha.h{h}.v"))?;
        // rows are frames: Q = seq W_q^T etc., [M, head_dim]
        let q = {
            let t = g.transpose(w_q)?;
            g.matmul(seq, t)?
        };
        let k = {
            let t = g.transpose(w_k)?;
            g.matmul(seq, t)?
        };
        let v = {
            let t = g.transpose(w_v)?;
            g.matmul(seq, t)?
        };
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, scale)?;
        let attn = g.softmax_rows(logits, Some(mask.to_vec()))?;
        heads.push(g.matmul(attn, v)?);
    }
    let concat = g.concat_cols(&heads)?;
    let proj = g.param(store, "video.mha.proj")?;
    let proj_t = g.transpose(proj)?;
    let mixed = g.matmul(concat, proj_t)?;
    let residual = g.add(seq, mixed)?;
    g.layernorm_rows(residual, LAYERNORM_EPS)
}

/// Pools frame representations into the video embedding. In attention mode
/// the per-frame weights are returned alongside; other modes return `None`.
pub fn attend_frames(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    seq: NodeId,
    mask: &[bool],
) -> Result<(NodeId, Option<Vec<f64>>)> {
    if !mask.iter().any(|&m| m) {
        return Err(TceError::AllMasked);
    }
    let m = g.value(seq).rows();
    match cfg.video_pool {
        VideoPool::Attn => {
            let w = g.param(store, "video.attn.w")?;
            let b = g.param(store, "video.attn.b")?;
            let u = g.param(store, "video.attn.u")?;
            let mut logits = Vec::with_capacity(m);
            for t in 0..m {
                let row = g.row(seq, t)?;
                let z = g.matmul(w, row)?;
                let z = g.add(z, b)?;
                let z = g.relu(z)?;
                let logit = g.dot(u, z)?;
                logits.push(g.scale(logit, 1.0 / (cfg.d_va as f64).sqrt())?);
            }
            let stacked = g.concat(&logits)?;
            let weights = g.softmax_vec(stacked, Some(mask.to_vec()))?;
            let pooled = g.matmul(weights, seq)?;
            let w_values = g.value(weights).data().to_vec();
            Ok((pooled, Some(w_values)))
        }
        VideoPool::Avg => {
            let live = mask.iter().filter(|&&x| x).count() as f64;
            let weights: Vec<f64> =
                mask.iter().map(|&x| if x { 1.0 / live } else { 0.0 }).collect();
            let w = g.constant(Tensor::vector(weights))?;
            Ok((g.matmul(w, seq)?, None))
        }
        VideoPool::Max => Ok((g.max_rows(seq, Some(mask.to_vec()))?, None)),
        VideoPool::Last => {
            let last = mask.iter().rposition(|&x| x).expect("checked above");
            Ok((g.row(seq, last)?, None))
        }
    }
}

/// Full video path: sequence model -> self-attention -> temporal pooling.
pub fn encode_video(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    frames: &FrameFeatures,
) -> Result<NodeId> {
    let seq = sequence_encode(g, store, cfg, frames)?;
    let seq = if cfg.use_mha {
        multihead_self_attention(g, store, cfg, seq, &frames.mask)?
    } else {
        seq
    };
    let (pooled, _) = attend_frames(g, store, cfg, seq, &frames.mask)?;
    Ok(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn tiny_config() -> RunConfig {
        RunConfig {
            d_w: 4,
            d_t: 6,
            d_ta: 3,
            d_v: 6,
            d_va: 3,
            heads: 2,
            head_dim: 2,
            d_star: 6,
            frames: 4,
            batch: 2,
            ..Default::default()
        }
    }

    fn init_store(cfg: &RunConfig, frame_dim: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut store, cfg, frame_dim, &mut rng).unwrap();
        store
    }

    fn random_frames(m: usize, d: usize, seed: u64) -> FrameFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::uniform(&[m, d], 1.0, &mut rng);
        FrameFeatures::new("v".into(), t, vec![true; m]).unwrap()
    }

    fn zero_params(store: &mut ParamStore) {
        let names: Vec<String> = store.param_names().cloned().collect();
        for name in names {
            for v in store.get_mut(&name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn gru_zero_params_propagates_zeros() {
        let cfg = tiny_config();
        let mut store = init_store(&cfg, 5, 0);
        zero_params(&mut store);
        let frames = random_frames(3, 5, 1);
        let mut g = Graph::new();
        let seq = sequence_encode(&mut g, &store, &cfg, &frames).unwrap();
        assert_eq!(g.value(seq).data(), &vec![0.0; 3 * 6][..]);
    }

    #[test]
    fn single_frame_gru_equals_one_step() {
        let cfg = tiny_config();
        let store = init_store(&cfg, 5, 2);
        let frames = random_frames(1, 5, 3);
        let mut g = Graph::new();
        let seq = sequence_encode(&mut g, &store, &cfg, &frames).unwrap();
        assert_eq!(g.value(seq).shape(), &[1, 6]);
    }

    #[test]
    fn zeroed_attention_branch_is_layernorm_of_input() {
        let cfg = tiny_config();
        let mut store = init_store(&cfg, 5, 4);
        // zero only the output projection: the residual branch carries the input
        for v in store.get_mut("video.mha.proj").unwrap().data_mut() {
            *v = 0.0;
        }
        let frames = random_frames(3, 5, 5);
        let mut g = Graph::new();
        let seq = sequence_encode(&mut g, &store, &cfg, &frames).unwrap();
        let out = multihead_self_attention(&mut g, &store, &cfg, seq, &frames.mask).unwrap();
        let expected = g.layernorm_rows(seq, 1e-5).unwrap();
        let (a, b) = (g.value(out).data().to_vec(), g.value(expected).data().to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_frame_attention_weight_is_one() {
        let cfg = tiny_config();
        let store = init_store(&cfg, 5, 6);
        let frames = random_frames(1, 5, 7);
        let mut g = Graph::new();
        let seq = sequence_encode(&mut g, &store, &cfg, &frames).unwrap();
        let seq = multihead_self_attention(&mut g, &store, &cfg, seq, &frames.mask).unwrap();
        let (pooled, weights) = attend_frames(&mut g, &store, &cfg, seq, &frames.mask).unwrap();
        assert_eq!(weights.unwrap(), vec![1.0]);
        assert_eq!(g.value(pooled).data(), g.value(seq).row(0));
    }

    #[test]
    fn temporal_attention_sums_to_one_with_masked_zeros() {
        let cfg = tiny_config();
        let store = init_store(&cfg, 5, 8);
        let mut frames = random_frames(4, 5, 9);
        frames.mask[3] = false;
        let mut g = Graph::new();
        let v = g.constant(frames.features.clone()).unwrap();
        let _ = v;
        let seq = sequence_encode(&mut g, &store, &cfg, &frames).unwrap();
        let (_, weights) = attend_frames(&mut g, &store, &cfg, seq, &frames.mask).unwrap();
        let w = weights.unwrap();
        assert_eq!(w[3], 0.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn all_masked_pooling_is_error() {
        let cfg = tiny_config();
        let store = init_store(&cfg, 5, 10);
        let mut g = Graph::new();
        let seq = g.constant(Tensor::matrix(2, 6, vec![0.0; 12]).unwrap()).unwrap();
        assert!(matches!(
            attend_frames(&mut g, &store, &cfg, seq, &[false, false]),
            Err(TceError::AllMasked)
        ));
    }

    #[test]
    fn encode_video_is_deterministic() {
        let cfg = tiny_config();
        let store = init_store(&cfg, 5, 11);
        let frames = random_frames(4, 5, 12);
        let run = || {
            let mut g = Graph::new();
            let v = encode_video(&mut g, &store, &cfg, &frames).unwrap();
            g.value(v).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn padded_rows_never_influence_output() {
        let cfg = tiny_config();
        let store = init_store(&cfg, 5, 13);
        let mut frames = random_frames(5, 5, 14);
        frames.mask[1] = false;
        frames.mask[4] = false;

        let run = |f: &FrameFeatures| {
            let mut g = Graph::new();
            let v = encode_video(&mut g, &store, &cfg, f).unwrap();
            g.value(v).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        let base = run(&frames);

        // randomize padded row contents
        let mut scrambled = frames.clone();
        for &row in &[1usize, 4] {
            let cols = scrambled.features.cols();
            for j in 0..cols {
                scrambled.features.data_mut()[row * cols + j] = 1e6 + (row * cols + j) as f64;
            }
        }
        assert_eq!(run(&scrambled), base);
    }

    #[test]
    fn pooling_mode_variants_produce_valid_embeddings() {
        for pool in [VideoPool::Avg, VideoPool::Max, VideoPool::Last] {
            let cfg = RunConfig { video_pool: pool, ..tiny_config() };
            let store = init_store(&cfg, 5, 15);
            let frames = random_frames(4, 5, 16);
            let mut g = Graph::new();
            let v = encode_video(&mut g, &store, &cfg, &frames).unwrap();
            assert_eq!(g.value(v).numel(), 6, "{pool:?}");
        }
    }

    #[test]
    fn affine_sequence_mode_works() {
        let cfg = RunConfig { video_seq: VideoSeq::Affine, use_mha: false, ..tiny_config() };
        let store = init_store(&cfg, 5, 17);
        let frames = random_frames(4, 5, 18);
        let mut g = Graph::new();
        let v = encode_video(&mut g, &store, &cfg, &frames).unwrap();
        assert_eq!(g.value(v).numel(), 6);
    }

    #[test]
    fn frame_file_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vid.tcef");
        let t = Tensor::matrix(2, 3, vec![1.0, 2.5, -0.25, 0.0, 4.0, -8.0]).unwrap();
        save_frames(&path, &t).unwrap();
        let back = load_frames(&path, "vid").unwrap();
        assert_eq!(back.features, t);
        assert_eq!(back.mask, vec![true, true]);
        assert_eq!(check_frame_header(&path).unwrap(), (2, 3));
    }

    #[test]
    fn frame_file_bad_magic_names_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vid.tcef");
        std::fs::write(&path, b"WRNG\x01\x00\x00\x00").unwrap();
        let err = check_frame_header(&path).unwrap_err();
        assert!(err.to_string().contains("vid.tcef"), "{err}");
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn fit_to_subsamples_and_pads() {
        let t = Tensor::matrix(4, 2, (0..8).map(|v| v as f64).collect()).unwrap();
        let f = FrameFeatures::new("v".into(), t, vec![true; 4]).unwrap();
        let shorter = f.fit_to(2).unwrap();
        assert_eq!(shorter.num_frames(), 2);
        assert_eq!(shorter.features.row(0), &[0.0, 1.0]);
        assert_eq!(shorter.features.row(1), &[4.0, 5.0]);
        let longer = f.fit_to(6).unwrap();
        assert_eq!(longer.num_frames(), 6);
        assert_eq!(longer.mask, vec![true, true, true, true, false, false]);
        assert_eq!(longer.features.row(5), &[0.0, 0.0]);
    }
}
