//! Model facade: parameter initialization across all modules, checkpoint
//! save/load, and frozen-parameter encoding helpers.

use crate::checkpoint::{self, Precision};
use crate::config::RunConfig;
use crate::error::{Result, TceError};
use crate::graph::Graph;
use crate::joint::{self, Side};
use crate::params::ParamStore;
use crate::query::{self, SemanticTree, TreeMode};
use crate::tensor::Tensor;
use crate::video::{self, FrameFeatures};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub struct TceModel {
    pub config: RunConfig,
    pub store: ParamStore,
}

impl TceModel {
    /// Fresh parameters drawn from the config seed. `vocab_len` is the full
    /// index space (reserved slots included); `frame_dim` the raw frame
    /// feature dimension.
    pub fn new(config: RunConfig, vocab_len: usize, frame_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        query::init_params(&mut store, &config, vocab_len, &mut rng)?;
        video::init_params(&mut store, &config, frame_dim, &mut rng)?;
        joint::init_params(&mut store, &config, &mut rng)?;
        if let Some(path) = config.embedding_init.clone() {
            warm_start_embedding(&mut store, &path)?;
        }
        Ok(TceModel { config, store })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        checkpoint::save_store(path, &self.store, Precision::Double)
    }

    pub fn load<P: AsRef<Path>>(config: RunConfig, path: P) -> Result<Self> {
        config.validate()?;
        let store = checkpoint::load_store(path)?;
        Ok(TceModel { config, store })
    }

    /// Inference-mode query embedding in the joint space, plus the tree.
    pub fn embed_query(&self, tokens: &[usize]) -> Result<(Tensor, SemanticTree)> {
        let mut g = Graph::new();
        let encoded = query::encode_query(&mut g, &self.store, &self.config, tokens, &mut TreeMode::Eval)?;
        let projected = joint::project_vec(&mut g, &self.store, &self.config, encoded.embedding, Side::Query)?;
        Ok((g.value(projected).clone(), encoded.tree))
    }

    /// Inference-mode video embedding in the joint space. Frames are fitted
    /// to the configured length first.
    pub fn embed_video(&self, frames: &FrameFeatures) -> Result<Tensor> {
        let fitted = frames.fit_to(self.config.frames)?;
        let mut g = Graph::new();
        let encoded = video::encode_video(&mut g, &self.store, &self.config, &fitted)?;
        let projected = joint::project_vec(&mut g, &self.store, &self.config, encoded, Side::Video)?;
        Ok(g.value(projected).clone())
    }
}

/// Replaces the word embedding matrix with the tensor named `embedding` from
/// a checkpoint container.
fn warm_start_embedding(store: &mut ParamStore, path: &str) -> Result<()> {
    let tensors = checkpoint::load_tensors(path)?;
    let init = tensors.get("embedding").ok_or_else(|| TceError::Format {
        file: path.into(),
        msg: "no tensor named \"embedding\" in warm-start container".into(),
    })?;
    let current = store.get_mut("embedding")?;
    if init.shape() != current.shape() {
        return Err(TceError::Shape {
            op: "warm_start",
            detail: format!("embedding {:?} vs expected {:?}", init.shape(), current.shape()),
        });
    }
    *current = init.clone();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use tempfile::tempdir;

    fn desk_model() -> TceModel {
        let cfg = RunConfig { seed: 3, ..RunConfig::desk() };
        TceModel::new(cfg, 20, 10).unwrap()
    }

    #[test]
    fn query_output_dimension_matches_config() {
        let model = desk_model();
        let (emb, tree) = model.embed_query(&[2, 5, 7]).unwrap();
        assert_eq!(emb.numel(), model.config.d_star);
        assert_eq!(tree.constituents.len(), 2);
    }

    #[test]
    fn video_output_dimension_matches_config() {
        let model = desk_model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frames = FrameFeatures::new(
            "v".into(),
            Tensor::uniform(&[5, 10], 1.0, &mut rng),
            vec![true; 5],
        )
        .unwrap();
        let emb = model.embed_video(&frames).unwrap();
        assert_eq!(emb.numel(), model.config.d_star);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_embeddings_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.tcem");
        let model = desk_model();
        let (before, _) = model.embed_query(&[2, 3, 4]).unwrap();
        model.save(&path).unwrap();
        let restored = TceModel::load(model.config.clone(), &path).unwrap();
        let (after, _) = restored.embed_query(&[2, 3, 4]).unwrap();
        assert_eq!(
            before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = desk_model();
        let b = desk_model();
        for (name, t) in a.store.params() {
            assert_eq!(t, b.store.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn embedding_warm_start_applies() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("warm.tcem");
        let cfg = RunConfig { seed: 3, ..RunConfig::desk() };
        let shape = [20usize, cfg.d_w];
        let mut tensors = BTreeMap::new();
        let warm = Tensor::vector(vec![0.125; shape[0] * shape[1]]);
        let warm = Tensor::matrix(shape[0], shape[1], warm.into_data()).unwrap();
        tensors.insert("embedding".to_string(), warm.clone());
        checkpoint::save_tensors(&path, &tensors, Precision::Double).unwrap();

        let cfg = RunConfig {
            embedding_init: Some(path.to_string_lossy().to_string()),
            ..cfg
        };
        let model = TceModel::new(cfg, 20, 10).unwrap();
        assert_eq!(model.store.get("embedding").unwrap(), &warm);
    }
}
