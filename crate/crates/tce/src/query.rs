//! Tree-augmented query encoder.
//!
//! Word embeddings pass through a leaf LSTM, then a latent binary tree is
//! composed bottom-up: every adjacent pair of nodes is offered to a TreeLSTM
//! cell, a memory-augmented scorer ranks the candidate parents, and a
//! straight-through Gumbel selection commits to one merge per layer. Attention
//! over the collected constituents yields the query embedding.

use crate::config::{LeafMode, QueryPool, RunConfig, ScoreMode};
use crate::error::{Result, TceError};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::RngCore;
use rand_distr::Open01;

/// Hidden/cell state pair for one tree node, with the token span it covers.
#[derive(Debug, Clone, Copy)]
pub struct NodeState {
    pub hidden: NodeId,
    pub cell: NodeId,
    /// Half-open token interval [lo, hi).
    pub span: (usize, usize),
}

/// Reference to a node in the finished tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeLink {
    Leaf(usize),
    Constituent(usize),
}

/// Latent semantic tree over N leaves: N-1 constituents in merge order, the
/// merge history, and (after pooling) the attention weight of each attended
/// node.
#[derive(Debug, Clone)]
pub struct SemanticTree {
    pub leaves: Vec<NodeState>,
    pub constituents: Vec<NodeState>,
    /// Children of each constituent, parallel to `constituents`.
    pub children: Vec<(TreeLink, TreeLink)>,
    /// Selected candidate index per layer.
    pub merges: Vec<usize>,
    /// Selection vector per layer as seen by the forward pass (exactly
    /// one-hot in both train and eval modes).
    pub selections: Vec<Vec<f64>>,
    /// Node states per layer: layer 0 is the leaves, each merge adds a layer.
    pub layers: Vec<Vec<NodeState>>,
    /// Attention weights over the pooled nodes (constituents first, then
    /// leaves when those are included), filled by `attend_constituents`.
    pub node_weights: Vec<f64>,
}

impl SemanticTree {
    pub fn root(&self) -> TreeLink {
        if self.constituents.is_empty() {
            TreeLink::Leaf(0)
        } else {
            TreeLink::Constituent(self.constituents.len() - 1)
        }
    }

    /// Attention weight assigned to constituent `i` by the pooling step.
    pub fn constituent_weight(&self, i: usize) -> f64 {
        self.node_weights.get(i).copied().unwrap_or(0.0)
    }
}

/// Query output: the embedding node plus the tree that produced it.
pub struct EncodedQuery {
    pub embedding: NodeId,
    pub tree: SemanticTree,
}

/// Selection behaviour during tree construction.
pub enum TreeMode<'a> {
    /// Gumbel-perturbed straight-through selection; gradients reach the scorer.
    Train { rng: &'a mut dyn RngCore },
    /// Noiseless argmax frozen to a constant: deterministic and locally smooth.
    Eval,
}

// ── parameter initialization ─────────────────────────────────────────────

/// Registers all query-side parameters for the given config.
pub fn init_params(
    store: &mut ParamStore,
    cfg: &RunConfig,
    vocab_len: usize,
    rng: &mut dyn RngCore,
) -> Result<()> {
    let (d_w, d_t, d_ta) = (cfg.d_w, cfg.d_t, cfg.d_ta);
    store.insert("embedding", Tensor::uniform(&[vocab_len, d_w], 0.5, rng))?;

    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    match cfg.leaf_mode {
        LeafMode::Lstm => {
            store.insert("query.leaf.w_ih", Tensor::uniform(&[4 * d_t, d_w], fan(d_w), rng))?;
            store.insert("query.leaf.w_hh", Tensor::uniform(&[4 * d_t, d_t], fan(d_t), rng))?;
            store.insert("query.leaf.b", Tensor::zeros(&[4 * d_t]))?;
        }
        LeafMode::Affine => {
            store.insert("query.leaf.affine_w", Tensor::uniform(&[2 * d_t, d_w], fan(d_w), rng))?;
            store.insert("query.leaf.affine_b", Tensor::zeros(&[2 * d_t]))?;
        }
    }
    store.insert("query.compose.w", Tensor::uniform(&[5 * d_t, 2 * d_t], fan(2 * d_t), rng))?;
    store.insert("query.compose.b", Tensor::zeros(&[5 * d_t]))?;
    match cfg.score_mode {
        ScoreMode::MemoryCtx => {
            store.insert("query.score.key_w", Tensor::uniform(&[d_t, d_t], fan(d_t), rng))?;
            store.insert("query.score.key_b", Tensor::zeros(&[d_t]))?;
            store.insert("query.score.mlp_w", Tensor::uniform(&[2 * d_t, 2 * d_t], fan(2 * d_t), rng))?;
            store.insert("query.score.mlp_b", Tensor::zeros(&[2 * d_t]))?;
            store.insert("query.score.out_w", Tensor::uniform(&[2 * d_t], fan(2 * d_t), rng))?;
        }
        ScoreMode::GlobalQuery => {
            store.insert("query.score.global_q", Tensor::uniform(&[d_t], fan(d_t), rng))?;
        }
    }
    if cfg.query_pool == QueryPool::Attn {
        store.insert("query.attn.w", Tensor::uniform(&[d_ta, d_t], fan(d_t), rng))?;
        store.insert("query.attn.b", Tensor::zeros(&[d_ta]))?;
        store.insert("query.attn.u", Tensor::uniform(&[d_ta], fan(d_ta), rng))?;
    }
    Ok(())
}

// ── encoder stages ───────────────────────────────────────────────────────

/// Token indices -> `[N, d_w]` embedding rows.
pub fn embed_tokens(g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(TceError::EmptyQuery);
    }
    let table = g.param(store, "embedding")?;
    g.embed(table, tokens)
}

/// One LSTM step; `pre`-activation order is (input, forget, candidate, output).
#[allow(clippy::too_many_arguments)]
fn lstm_cell(
    g: &mut Graph,
    w_ih: NodeId,
    w_hh: NodeId,
    bias: NodeId,
    x: NodeId,
    hidden: NodeId,
    cell: NodeId,
    d: usize,
) -> Result<(NodeId, NodeId)> {
    let from_x = g.matmul(w_ih, x)?;
    let from_h = g.matmul(w_hh, hidden)?;
    let pre = g.add(from_x, from_h)?;
    let pre = g.add(pre, bias)?;
    let input_gate = g.slice(pre, 0, d).and_then(|s| g.sigmoid(s))?;
    let forget_gate = g.slice(pre, d, 2 * d).and_then(|s| g.sigmoid(s))?;
    let candidate = g.slice(pre, 2 * d, 3 * d).and_then(|s| g.tanh(s))?;
    let output_gate = g.slice(pre, 3 * d, 4 * d).and_then(|s| g.sigmoid(s))?;
    let kept = g.mul(forget_gate, cell)?;
    let written = g.mul(input_gate, candidate)?;
    let new_cell = g.add(kept, written)?;
    let squashed = g.tanh(new_cell)?;
    let new_hidden = g.mul(output_gate, squashed)?;
    Ok((new_hidden, new_cell))
}

/// Transforms embedded tokens into the bottom tree layer and the global
/// memory (the stacked leaf hidden states).
pub fn leaf_transform(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    embedded: NodeId,
) -> Result<(Vec<NodeState>, NodeId)> {
    let n = g.value(embedded).rows();
    let d = cfg.d_t;
    let mut leaves = Vec::with_capacity(n);
    match cfg.leaf_mode {
        LeafMode::Lstm => {
            let w_ih = g.param(store, "query.leaf.w_ih")?;
            let w_hh = g.param(store, "query.leaf.w_hh")?;
            let bias = g.param(store, "query.leaf.b")?;
            let mut hidden = g.constant(Tensor::zeros(&[d]))?;
            let mut cell = g.constant(Tensor::zeros(&[d]))?;
            for t in 0..n {
                let x = g.row(embedded, t)?;
                let (h, c) = lstm_cell(g, w_ih, w_hh, bias, x, hidden, cell, d)?;
                leaves.push(NodeState { hidden: h, cell: c, span: (t, t + 1) });
                hidden = h;
                cell = c;
            }
        }
        LeafMode::Affine => {
            let w = g.param(store, "query.leaf.affine_w")?;
            let b = g.param(store, "query.leaf.affine_b")?;
            for t in 0..n {
                let x = g.row(embedded, t)?;
                let pre = g.matmul(w, x)?;
                let pre = g.add(pre, b)?;
                let h = g.slice(pre, 0, d)?;
                let c = g.slice(pre, d, 2 * d)?;
                leaves.push(NodeState { hidden: h, cell: c, span: (t, t + 1) });
            }
        }
    }
    let hiddens: Vec<NodeId> = leaves.iter().map(|l| l.hidden).collect();
    let memory = g.stack_rows(&hiddens)?;
    Ok((leaves, memory))
}

/// TreeLSTM composition of two adjacent nodes into their parent.
pub fn treelstm_compose(
    g: &mut Graph,
    store: &ParamStore,
    left: &NodeState,
    right: &NodeState,
) -> Result<NodeState> {
    if left.span.1 != right.span.0 {
        return Err(TceError::Shape {
            op: "treelstm_compose",
            detail: format!("non-adjacent spans {:?} and {:?}", left.span, right.span),
        });
    }
    let d = g.value(left.hidden).numel();
    let w = g.param(store, "query.compose.w")?;
    let b = g.param(store, "query.compose.b")?;
    let cat = g.concat(&[left.hidden, right.hidden])?;
    let pre = g.matmul(w, cat)?;
    let pre = g.add(pre, b)?;
    let input_gate = g.slice(pre, 0, d).and_then(|s| g.sigmoid(s))?;
    let forget_left = g.slice(pre, d, 2 * d).and_then(|s| g.sigmoid(s))?;
    let forget_right = g.slice(pre, 2 * d, 3 * d).and_then(|s| g.sigmoid(s))?;
    let output_gate = g.slice(pre, 3 * d, 4 * d).and_then(|s| g.sigmoid(s))?;
    let candidate = g.slice(pre, 4 * d, 5 * d).and_then(|s| g.tanh(s))?;

    let from_left = g.mul(forget_left, left.cell)?;
    let from_right = g.mul(forget_right, right.cell)?;
    let written = g.mul(input_gate, candidate)?;
    let cell = g.add(from_left, from_right)?;
    let cell = g.add(cell, written)?;
    let squashed = g.tanh(cell)?;
    let hidden = g.mul(output_gate, squashed)?;
    Ok(NodeState { hidden, cell, span: (left.span.0, right.span.1) })
}

/// Scores candidate parents into a probability vector.
///
/// In memory-context mode each candidate's hidden state queries the global
/// memory for a context vector, and an MLP over [hidden; context] produces the
/// logit. In global-query mode the logit is a scaled inner product with a
/// learned vector.
pub fn score_candidates(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    candidates: &[NodeState],
    memory: NodeId,
) -> Result<NodeId> {
    if candidates.is_empty() {
        return Err(TceError::Shape { op: "score_candidates", detail: "no candidates".into() });
    }
    let d = cfg.d_t;
    let mut logits = Vec::with_capacity(candidates.len());
    match cfg.score_mode {
        ScoreMode::MemoryCtx => {
            let key_w = g.param(store, "query.score.key_w")?;
            let key_b = g.param(store, "query.score.key_b")?;
            let mlp_w = g.param(store, "query.score.mlp_w")?;
            let mlp_b = g.param(store, "query.score.mlp_b")?;
            let out_w = g.param(store, "query.score.out_w")?;
            // keys = sigmoid(M W^T + b), one row per memory slot
            let key_wt = g.transpose(key_w)?;
            let pre = g.matmul(memory, key_wt)?;
            let pre = g.add_row(pre, key_b)?;
            let keys = g.sigmoid(pre)?;
            for cand in candidates {
                let scores = g.matmul(keys, cand.hidden)?;
                let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
                let attn = g.softmax_vec(scaled, None)?;
                let context = g.matmul(attn, memory)?;
                let cat = g.concat(&[cand.hidden, context])?;
                let z = g.matmul(mlp_w, cat)?;
                let z = g.add(z, mlp_b)?;
                let z = g.relu(z)?;
                let logit = g.dot(out_w, z)?;
                let logit = g.scale(logit, 1.0 / (2.0 * d as f64).sqrt())?;
                logits.push(logit);
            }
        }
        ScoreMode::GlobalQuery => {
            let global_q = g.param(store, "query.score.global_q")?;
            for cand in candidates {
                let logit = g.dot(global_q, cand.hidden)?;
                let logit = g.scale(logit, 1.0 / (d as f64).sqrt())?;
                logits.push(logit);
            }
        }
    }
    let stacked = g.concat(&logits)?;
    g.softmax_vec(stacked, None)
}

fn sample_gumbel(rng: &mut dyn RngCore) -> f64 {
    let u: f64 = rand::Rng::sample(rng, Open01);
    -(-u.ln()).ln()
}

/// Straight-through Gumbel selection over a probability vector.
///
/// Training: Gumbel noise is added to log s, softened at `temperature`, and
/// discretized; the forward value is exactly one-hot while gradients flow
/// through the soft distribution. Evaluation: noiseless argmax frozen to a
/// constant. Returns the selection node and the chosen index.
pub fn st_gumbel_select(
    g: &mut Graph,
    s: NodeId,
    temperature: f64,
    mode: &mut TreeMode<'_>,
) -> Result<(NodeId, usize)> {
    if temperature <= 0.0 {
        return Err(TceError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let k = g.value(s).numel();
    match mode {
        TreeMode::Train { rng } => {
            let noise = Tensor::vector((0..k).map(|_| sample_gumbel(*rng)).collect());
            let noise = g.constant(noise)?;
            let log_s = g.log(s)?;
            let perturbed = g.add(log_s, noise)?;
            let scaled = g.scale(perturbed, 1.0 / temperature)?;
            let soft = g.softmax_vec(scaled, None)?;
            g.straight_through(soft)
        }
        TreeMode::Eval => {
            let values = g.value(s).data();
            let mut best = 0;
            for (i, &v) in values.iter().enumerate() {
                if v > values[best] {
                    best = i;
                }
            }
            let mut one_hot = vec![0.0; k];
            one_hot[best] = 1.0;
            let id = g.constant(Tensor::vector(one_hot))?;
            Ok((id, best))
        }
    }
}

/// Composes the latent semantic tree over the given leaves: N-1 rounds of
/// candidate composition, scoring, and selection. Unselected nodes carry over
/// to the next layer untouched.
pub fn build_tree(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    leaves: Vec<NodeState>,
    memory: NodeId,
    mode: &mut TreeMode<'_>,
) -> Result<SemanticTree> {
    if leaves.is_empty() {
        return Err(TceError::EmptyQuery);
    }
    let n = leaves.len();
    let mut current: Vec<(NodeState, TreeLink)> = leaves
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, TreeLink::Leaf(i)))
        .collect();
    let mut tree = SemanticTree {
        leaves,
        constituents: Vec::with_capacity(n.saturating_sub(1)),
        children: Vec::with_capacity(n.saturating_sub(1)),
        merges: Vec::with_capacity(n.saturating_sub(1)),
        selections: Vec::with_capacity(n.saturating_sub(1)),
        layers: vec![current.iter().map(|(s, _)| *s).collect()],
        node_weights: Vec::new(),
    };

    while current.len() > 1 {
        let mut candidates = Vec::with_capacity(current.len() - 1);
        for i in 0..current.len() - 1 {
            candidates.push(treelstm_compose(g, store, &current[i].0, &current[i + 1].0)?);
        }
        let scores = score_candidates(g, store, cfg, &candidates, memory)?;
        let (selection, picked) = st_gumbel_select(g, scores, cfg.temperature, mode)?;

        // parent = selection-weighted sum over candidates; exactly the picked
        // candidate in the forward pass, soft gradients in the backward pass
        let hiddens: Vec<NodeId> = candidates.iter().map(|c| c.hidden).collect();
        let cells: Vec<NodeId> = candidates.iter().map(|c| c.cell).collect();
        let hidden_stack = g.stack_rows(&hiddens)?;
        let cell_stack = g.stack_rows(&cells)?;
        let parent_hidden = g.matmul(selection, hidden_stack)?;
        let parent_cell = g.matmul(selection, cell_stack)?;
        let parent = NodeState {
            hidden: parent_hidden,
            cell: parent_cell,
            span: (current[picked].0.span.0, current[picked + 1].0.span.1),
        };

        tree.children.push((current[picked].1, current[picked + 1].1));
        tree.merges.push(picked);
        tree.selections.push(g.value(selection).data().to_vec());
        let link = TreeLink::Constituent(tree.constituents.len());
        tree.constituents.push(parent);
        current.splice(picked..picked + 2, [(parent, link)]);
        tree.layers.push(current.iter().map(|(s, _)| *s).collect());
    }
    Ok(tree)
}

/// Pools the tree into the query embedding and records the attention weights
/// on the tree. Single-leaf trees have nothing to pool; the leaf hidden state
/// is the embedding.
pub fn attend_constituents(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    tree: &mut SemanticTree,
) -> Result<NodeId> {
    let mut pool: Vec<NodeId> = tree.constituents.iter().map(|c| c.hidden).collect();
    if cfg.include_leaves {
        pool.extend(tree.leaves.iter().map(|l| l.hidden));
    }
    if pool.is_empty() {
        tree.node_weights.clear();
        return Ok(tree.leaves[0].hidden);
    }
    let stacked = g.stack_rows(&pool)?;
    let pooled = match cfg.query_pool {
        QueryPool::Attn => {
            let w = g.param(store, "query.attn.w")?;
            let b = g.param(store, "query.attn.b")?;
            let u = g.param(store, "query.attn.u")?;
            let mut logits = Vec::with_capacity(pool.len());
            for &node in &pool {
                let z = g.matmul(w, node)?;
                let z = g.add(z, b)?;
                let z = g.relu(z)?;
                let logit = g.dot(u, z)?;
                logits.push(g.scale(logit, 1.0 / (cfg.d_ta as f64).sqrt())?);
            }
            let stacked_logits = g.concat(&logits)?;
            let weights = g.softmax_vec(stacked_logits, None)?;
            tree.node_weights = g.value(weights).data().to_vec();
            g.matmul(weights, stacked)?
        }
        QueryPool::Avg => {
            let k = pool.len();
            let weights = g.constant(Tensor::vector(vec![1.0 / k as f64; k]))?;
            tree.node_weights = vec![1.0 / k as f64; k];
            g.matmul(weights, stacked)?
        }
        QueryPool::Last => {
            let mut weights = vec![0.0; pool.len()];
            let last = tree.constituents.len() - 1;
            weights[last] = 1.0;
            tree.node_weights = weights;
            tree.constituents[last].hidden
        }
    };
    Ok(pooled)
}

/// Full query path: embed -> leaf transform -> tree -> constituent pooling.
pub fn encode_query(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    tokens: &[usize],
    mode: &mut TreeMode<'_>,
) -> Result<EncodedQuery> {
    let embedded = embed_tokens(g, store, tokens)?;
    let (leaves, memory) = leaf_transform(g, store, cfg, embedded)?;
    let mut tree = build_tree(g, store, cfg, leaves, memory, mode)?;
    let embedding = attend_constituents(g, store, cfg, &mut tree)?;
    Ok(EncodedQuery { embedding, tree })
}

/// Bracketed rendering of the tree with per-constituent attention weights,
/// e.g. `((a baby):0.042 (plays):...)`. Leaves print as bare tokens.
pub fn bracketed(tree: &SemanticTree, tokens: &[String]) -> String {
    fn walk(tree: &SemanticTree, tokens: &[String], link: TreeLink, out: &mut String) {
        match link {
            TreeLink::Leaf(i) => out.push_str(&tokens[i]),
            TreeLink::Constituent(i) => {
                out.push('(');
                walk(tree, tokens, tree.children[i].0, out);
                out.push(' ');
                walk(tree, tokens, tree.children[i].1, out);
                out.push_str(&format!("):{:.3}", tree.constituent_weight(i)));
            }
        }
    }
    let mut out = String::new();
    walk(tree, tokens, tree.root(), &mut out);
    out
}
