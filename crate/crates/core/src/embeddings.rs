//! The five per-location embeddings (feature, node, rank-based node,
//! time-of-day, day-of-week) and their fusion into the representation `H′`.
//!
//! Every input is batched: flows are `[batch, rows, L]` and every embedding
//! comes out as `[batch, rows, d]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{DAYS_PER_WEEK, INTERVALS_PER_DAY};
use crate::diffcore::{xavier_uniform, Graph, NodeId, ParameterStore, ResidualBlock};
use crate::error::{Result, StpsError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TOD_BANK: &str = "emb.tod";
pub const DOW_BANK: &str = "emb.dow";
pub const NODE_BANK: &str = "emb.node";
pub const RANK_BANK: &str = "emb.rank";

/// Which input window a representation is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowLength {
    /// Length `l` (the past window `T`).
    Past,
    /// Length `l′` (the future window `T′`, fed back from predictions).
    Future,
}

impl WindowLength {
    fn tag(self) -> &'static str {
        match self {
            WindowLength::Past => "l",
            WindowLength::Future => "lp",
        }
    }
}

/// Per column, the position of each row in the ascending sort; ties go to
/// the lower row index. `values` is `[batch, rows, cols]` (or `[rows, cols]`).
pub fn compute_ranks<T: Scalar>(values: &Tensor<T>) -> Result<Vec<usize>> {
    let s = values.shape();
    if s.len() < 2 {
        return Err(StpsError::shape("compute_ranks", format!("{s:?}")));
    }
    let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
    if let Some(v) = values.data().iter().find(|v| !v.is_finite()) {
        return Err(StpsError::invalid(format!("cannot rank non-finite value {v}")));
    }
    let batch = values.len() / (rows * cols).max(1);
    let data = values.data();
    let mut ranks = vec![0usize; values.len()];
    let mut order: Vec<usize> = Vec::with_capacity(rows);
    for b in 0..batch {
        let base = b * rows * cols;
        for c in 0..cols {
            order.clear();
            order.extend(0..rows);
            // Stable sort keeps ascending row order among ties.
            order.sort_by(|&i, &j| {
                data[base + i * cols + c]
                    .partial_cmp(&data[base + j * cols + c])
                    .expect("finite values")
            });
            for (pos, &r) in order.iter().enumerate() {
                ranks[base + r * cols + c] = pos;
            }
        }
    }
    Ok(ranks)
}

/// Trainable banks: time-of-day (288 × d), day-of-week (7 × d), node
/// (n × d), rank (n × d), plus one length-`L` rank aggregator per window length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingBanks {
    pub n: usize,
    pub d: usize,
    pub l: usize,
    pub l_prime: usize,
}

impl EmbeddingBanks {
    pub fn rank_agg_weight(length: WindowLength) -> String {
        format!("rank_agg.{}.w", length.tag())
    }

    pub fn rank_agg_bias(length: WindowLength) -> String {
        format!("rank_agg.{}.b", length.tag())
    }

    pub fn len_of(&self, length: WindowLength) -> usize {
        match length {
            WindowLength::Past => self.l,
            WindowLength::Future => self.l_prime,
        }
    }

    pub fn param_names(&self, with_rank: bool) -> Vec<String> {
        let mut v = vec![TOD_BANK.to_string(), DOW_BANK.to_string(), NODE_BANK.to_string()];
        if with_rank {
            v.push(RANK_BANK.to_string());
            for len in [WindowLength::Past, WindowLength::Future] {
                v.push(Self::rank_agg_weight(len));
                v.push(Self::rank_agg_bias(len));
            }
        }
        v
    }

    pub fn init<T: Scalar>(
        &self,
        store: &mut ParameterStore<T>,
        with_rank: bool,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let d = self.d;
        store.insert(TOD_BANK, xavier_uniform(&[INTERVALS_PER_DAY, d], INTERVALS_PER_DAY, d, rng))?;
        store.insert(DOW_BANK, xavier_uniform(&[DAYS_PER_WEEK, d], DAYS_PER_WEEK, d, rng))?;
        store.insert(NODE_BANK, xavier_uniform(&[self.n, d], self.n, d, rng))?;
        if with_rank {
            store.insert(RANK_BANK, xavier_uniform(&[self.n, d], self.n, d, rng))?;
            for len in [WindowLength::Past, WindowLength::Future] {
                let l = self.len_of(len);
                // Start as a plain average over the window.
                store.insert(Self::rank_agg_weight(len), Tensor::full([l, 1], T::of(1.0 / l as f64)))?;
                store.insert(Self::rank_agg_bias(len), Tensor::zeros([1]))?;
            }
        }
        Ok(())
    }
}

/// Gathers rank-bank rows by rank for every time slot and contracts the
/// slot axis with the length-`L` aggregator: `[batch, rows, L]` ranks →
/// `[batch, rows, d]`.
pub fn rank_node_embedding<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    ranks: &[usize],
    batch: usize,
    rows: usize,
    length: WindowLength,
) -> Result<NodeId> {
    let bank = g.param(store, RANK_BANK)?;
    let d = g.shape(bank)[1];
    let w = g.param(store, &EmbeddingBanks::rank_agg_weight(length))?;
    let b = g.param(store, &EmbeddingBanks::rank_agg_bias(length))?;
    let l = g.shape(w)[0];
    if ranks.len() != batch * rows * l {
        return Err(StpsError::shape(
            "rank_node_embedding",
            format!("{} ranks for batch {batch} x rows {rows} x L {l}", ranks.len()),
        ));
    }
    let agg = g.weighted_gather(bank, w, ranks)?;
    let agg = g.reshape(agg, vec![batch, rows, d])?;
    g.broadcast_add(agg, b)
}

/// Time-of-day and day-of-week rows broadcast over `rows` locations.
pub fn temporal_embedding<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    tod: &[usize],
    dow: &[usize],
    rows: usize,
) -> Result<(NodeId, NodeId)> {
    if tod.len() != dow.len() {
        return Err(StpsError::shape("temporal_embedding", "tod/dow batch sizes differ"));
    }
    let batch = tod.len();
    let mut out = [None, None];
    for (k, (name, idx)) in [(TOD_BANK, tod), (DOW_BANK, dow)].into_iter().enumerate() {
        let bank = g.param(store, name)?;
        let d = g.shape(bank)[1];
        let tiled: Vec<usize> = idx.iter().flat_map(|&i| std::iter::repeat(i).take(rows)).collect();
        let e = g.embedding_lookup(bank, &tiled)?;
        out[k] = Some(g.reshape(e, vec![batch, rows, d])?);
    }
    Ok((out[0].expect("set"), out[1].expect("set")))
}

/// Node-bank rows for `row_ids`, repeated over the batch.
pub fn node_embedding<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    row_ids: &[usize],
    batch: usize,
) -> Result<NodeId> {
    let bank = g.param(store, NODE_BANK)?;
    let d = g.shape(bank)[1];
    let tiled: Vec<usize> = (0..batch).flat_map(|_| row_ids.iter().copied()).collect();
    let e = g.embedding_lookup(bank, &tiled)?;
    g.reshape(e, vec![batch, row_ids.len(), d])
}

/// `H′` and the embeddings it was fused from.
#[derive(Clone, Debug)]
pub struct Representation {
    pub h_prime: NodeId,
    pub e_feature: NodeId,
    pub e_node: NodeId,
    /// Aggregated rank-based embedding; `None` when ranks are disabled.
    pub e_rank: Option<NodeId>,
    pub e_tod: NodeId,
    pub e_dow: NodeId,
}

/// Parameters that turn a window of flows into `H′`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepresentationNet {
    pub banks: EmbeddingBanks,
    pub feature_l: ResidualBlock,
    pub feature_lp: ResidualBlock,
    pub project: ResidualBlock,
    pub use_rank: bool,
}

impl RepresentationNet {
    /// Feature MLPs map `L → d` with hidden width `d`; the projection is
    /// `width → width` where width is `5d` (`4d` without ranks).
    pub fn new(n: usize, d: usize, l: usize, l_prime: usize, use_rank: bool) -> Self {
        let width = if use_rank { 5 * d } else { 4 * d };
        Self {
            banks: EmbeddingBanks { n, d, l, l_prime },
            feature_l: ResidualBlock::new("feature_l", l, d, d),
            feature_lp: ResidualBlock::new("feature_lp", l_prime, d, d),
            project: ResidualBlock::new("project", width, width, width),
            use_rank,
        }
    }

    pub fn width(&self) -> usize {
        self.project.output
    }

    pub fn feature(&self, length: WindowLength) -> &ResidualBlock {
        match length {
            WindowLength::Past => &self.feature_l,
            WindowLength::Future => &self.feature_lp,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParameterStore<T>, rng: &mut impl Rng) -> Result<()> {
        self.banks.init(store, self.use_rank, rng)?;
        self.feature_l.init(store, rng)?;
        self.feature_lp.init(store, rng)?;
        self.project.init(store, rng)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = self.banks.param_names(self.use_rank);
        v.extend(self.feature_l.param_names());
        v.extend(self.feature_lp.param_names());
        v.extend(self.project.param_names());
        v
    }

    /// Builds `H′ = project(E_f ‖ E_v ‖ E_r′ ‖ E_tod ‖ E_dow)` for `x`
    /// (`[batch, rows, L]`, normalised) at locations `row_ids`. Ranks are
    /// taken over the rows of `x` per time slot.
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x: NodeId,
        row_ids: &[usize],
        tod: &[usize],
        dow: &[usize],
        dropout: f64,
    ) -> Result<Representation> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != row_ids.len() || shape[0] != tod.len() {
            return Err(StpsError::shape(
                "build_representation",
                format!("x {shape:?} with {} row ids and batch {}", row_ids.len(), tod.len()),
            ));
        }
        let (batch, rows, len) = (shape[0], shape[1], shape[2]);
        let length = if len == self.banks.l {
            WindowLength::Past
        } else if len == self.banks.l_prime {
            WindowLength::Future
        } else {
            return Err(StpsError::shape(
                "build_representation",
                format!(
                    "window length {len} matches neither l = {} nor l' = {}",
                    self.banks.l, self.banks.l_prime
                ),
            ));
        };
        let e_feature = self.feature(length).forward(g, store, x, dropout)?;
        let e_node = node_embedding(g, store, row_ids, batch)?;
        let e_rank = if self.use_rank {
            let ranks = compute_ranks(g.value(x))?;
            Some(rank_node_embedding(g, store, &ranks, batch, rows, length)?)
        } else {
            None
        };
        let (e_tod, e_dow) = temporal_embedding(g, store, tod, dow, rows)?;
        let mut parts = vec![e_feature, e_node];
        parts.extend(e_rank);
        parts.extend([e_tod, e_dow]);
        let h = g.concat_features(&parts)?;
        let h_prime = self.project.forward(g, store, h, dropout)?;
        Ok(Representation {
            h_prime,
            e_feature,
            e_node,
            e_rank,
            e_tod,
            e_dow,
        })
    }
}
