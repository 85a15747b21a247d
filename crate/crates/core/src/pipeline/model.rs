use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Normalizer, RoadGraph, SensingPartition, WindowSample};
use crate::diffcore::{Graph, NodeId, ParameterStore, ResidualBlock};
use crate::embeddings::{Representation, RepresentationNet, NODE_BANK};
use crate::error::{Result, StpsError};
use crate::pipeline::config::{Ablation, ModelConfig, Stage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transfer::{enhanced_transfer, location_mlp_apply, plain_transfer, transfer_apply};

pub const PLAIN_TRANSFER: &str = "transfer.plain";

/// Calendar indices per batch element: the first interval of `T` and of `T′`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Calendar {
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
    pub tod_future: Vec<usize>,
    pub dow_future: Vec<usize>,
}

impl Calendar {
    pub fn single(tod: usize, dow: usize, tod_future: usize, dow_future: usize) -> Self {
        Self {
            tod: vec![tod],
            dow: vec![dow],
            tod_future: vec![tod_future],
            dow_future: vec![dow_future],
        }
    }

    pub fn len(&self) -> usize {
        self.tod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tod.is_empty()
    }
}

/// A minibatch. The model input is normalised; targets stay in raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub calendar: Calendar,
    /// `[B, m, l]`, normalised.
    pub x_m_t: Tensor<T>,
    /// `[B, m′, l]`, raw.
    pub x_mp_t: Tensor<T>,
    /// `[B, m, l′]`, raw.
    pub x_m_tp: Tensor<T>,
    /// `[B, m′, l′]`, raw.
    pub x_mp_tp: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[WindowSample], normalizer: &Normalizer) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| StpsError::invalid("cannot build an empty batch"))?;
        let (b, l, lp) = (samples.len(), first.l, first.l_prime);
        let m = first.x_m_t.len() / l;
        let mp = first.x_mp_t.len() / l;
        let gather = |f: &dyn Fn(&WindowSample) -> &[f64], norm: bool| -> Vec<T> {
            samples
                .iter()
                .flat_map(|s| f(s).iter().map(|&v| T::of(if norm { normalizer.forward(v) } else { v })))
                .collect()
        };
        let mut calendar = Calendar::default();
        for s in samples {
            calendar.tod.push(s.tod_index);
            calendar.dow.push(s.dow_index);
            calendar.tod_future.push(s.tod_index_future);
            calendar.dow_future.push(s.dow_index_future);
        }
        Ok(Self {
            calendar,
            x_m_t: Tensor::new([b, m, l], gather(&|s| &s.x_m_t, true))?,
            x_mp_t: Tensor::new([b, mp, l], gather(&|s| &s.x_mp_t, false))?,
            x_m_tp: Tensor::new([b, m, lp], gather(&|s| &s.x_m_tp, false))?,
            x_mp_tp: Tensor::new([b, mp, lp], gather(&|s| &s.x_mp_tp, false))?,
        })
    }

    pub fn len(&self) -> usize {
        self.calendar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.calendar.is_empty()
    }
}

/// Per-stage location-axis mixers of the no-transfer variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mixers {
    pub s1: ResidualBlock,
    pub s2: ResidualBlock,
    pub s3a: ResidualBlock,
    pub s3b: ResidualBlock,
}

/// Block dimensions derived from the configuration and the partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub net: RepresentationNet,
    pub head_l: ResidualBlock,
    pub head_lp: ResidualBlock,
    pub mixers: Option<Mixers>,
    pub plain: bool,
}

impl Architecture {
    pub fn new(config: &ModelConfig, partition: &SensingPartition) -> Self {
        let (n, m, mp) = (partition.n(), partition.m(), partition.m_prime());
        let net = RepresentationNet::new(n, config.d, config.l, config.l_prime, config.use_rank());
        let w = net.width();
        let mixers = (config.ablation == Ablation::NoTransfer).then(|| Mixers {
            s1: ResidualBlock::new("mix.s1", m, mp, mp),
            s2: ResidualBlock::new("mix.s2", n, m, m),
            s3a: ResidualBlock::new("mix.s3a", n, mp, mp),
            s3b: ResidualBlock::new("mix.s3b", m, mp, mp),
        });
        Self {
            net,
            head_l: ResidualBlock::new("head_l", w, config.l, config.l),
            head_lp: ResidualBlock::new("head_lp", w, config.l_prime, config.l_prime),
            mixers,
            plain: config.ablation == Ablation::PlainTransfer,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = self.net.param_names();
        v.extend(self.head_l.param_names());
        v.extend(self.head_lp.param_names());
        if let Some(mx) = &self.mixers {
            for b in [&mx.s1, &mx.s2, &mx.s3a, &mx.s3b] {
                v.extend(b.param_names());
            }
        }
        if self.plain {
            v.push(PLAIN_TRANSFER.to_string());
        }
        v.sort();
        v
    }

    fn init<T: Scalar>(&self, store: &mut ParameterStore<T>, n: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        self.net.init(store, rng)?;
        self.head_l.init(store, rng)?;
        self.head_lp.init(store, rng)?;
        if let Some(mx) = &self.mixers {
            for b in [&mx.s1, &mx.s2, &mx.s3a, &mx.s3b] {
                b.init(store, rng)?;
            }
        }
        if self.plain {
            store.insert(PLAIN_TRANSFER, Tensor::zeros([n, n]))?;
        }
        Ok(())
    }
}

/// Graph nodes produced by the stage-2 forward.
#[derive(Clone, Debug)]
pub struct Step2Output {
    /// `[M; M′]` rows of the past window.
    pub x_n_t: NodeId,
    pub rep_n: Representation,
    pub out: NodeId,
}

/// Graph nodes produced by the stage-3 forward.
#[derive(Clone, Copy, Debug)]
pub struct Step3Output {
    pub branch_a: NodeId,
    pub branch_b: Option<NodeId>,
    pub out: NodeId,
}

/// Graph nodes of a chained forward up to some stage.
#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub s1: NodeId,
    pub s2: Option<NodeId>,
    pub s3: Option<Step3Output>,
}

/// The three-stage partial-sensing forecaster.
#[derive(Clone, Debug)]
pub struct StpsModel<T> {
    pub(crate) config: ModelConfig,
    pub(crate) partition: SensingPartition,
    pub(crate) graph: RoadGraph,
    pub(crate) normalizer: Normalizer,
    pub(crate) store: ParameterStore<T>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) trained: Vec<Stage>,
    arch: Architecture,
    a_m_mp: Tensor<T>,
    a_n_m: Tensor<T>,
    a_n_mp: Tensor<T>,
}

fn sub_block<T: Scalar>(graph: &RoadGraph, rows: &[usize], cols: &[usize]) -> Result<Tensor<T>> {
    let n = graph.n_locations();
    Tensor::<T>::from_f64([n, n], &graph.dense())?.select_block(rows, cols)
}

impl<T: Scalar> StpsModel<T> {
    /// Freshly initialised model; parameters are drawn from `config.seed`.
    pub fn new(config: ModelConfig, graph: RoadGraph, partition: SensingPartition, normalizer: Normalizer) -> Result<Self> {
        let mut model = Self::with_store(config, graph, partition, normalizer, ParameterStore::new())?;
        let n = model.n();
        model.arch.init(&mut model.store, n, &mut model.rng)?;
        Ok(model)
    }

    pub(crate) fn with_store(
        config: ModelConfig,
        graph: RoadGraph,
        partition: SensingPartition,
        normalizer: Normalizer,
        store: ParameterStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        if graph.n_locations() != partition.n() {
            return Err(StpsError::shape(
                "StpsModel::new",
                format!("graph has {} locations, partition {}", graph.n_locations(), partition.n()),
            ));
        }
        if !(normalizer.std > 0.0 && normalizer.std.is_finite() && normalizer.mean.is_finite()) {
            return Err(StpsError::Degenerate(format!("normalizer {normalizer:?}")));
        }
        let all = partition.all();
        let (m, mp) = (partition.sensed(), partition.unsensed());
        Ok(Self {
            a_m_mp: sub_block(&graph, m, mp)?,
            a_n_m: sub_block(&graph, &all, m)?,
            a_n_mp: sub_block(&graph, &all, mp)?,
            arch: Architecture::new(&config, &partition),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            partition,
            graph,
            normalizer,
            store,
            trained: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn partition(&self) -> &SensingPartition {
        &self.partition
    }

    pub fn road_graph(&self) -> &RoadGraph {
        &self.graph
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn n(&self) -> usize {
        self.partition.n()
    }

    pub fn trained_stages(&self) -> &[Stage] {
        &self.trained
    }

    pub fn mark_trained(&mut self, stage: Stage) {
        if !self.trained.contains(&stage) {
            self.trained.push(stage);
            self.trained.sort();
        }
    }

    /// True when every stage of the configured plan has been trained.
    pub fn is_trained(&self) -> bool {
        self.config.stages().iter().all(|s| self.trained.contains(s))
    }

    /// Names of every parameter the configuration owns, sorted.
    pub fn param_names(&self) -> Vec<String> {
        self.arch.param_names()
    }

    fn node_rows(&self, g: &mut Graph<T>, ids: &[usize]) -> Result<NodeId> {
        let bank = g.param(&self.store, NODE_BANK)?;
        g.embedding_lookup(bank, ids)
    }

    /// Transfer of `rep` from `src` to `dst` locations followed by `head`.
    #[allow(clippy::too_many_arguments)]
    fn route(
        &self,
        g: &mut Graph<T>,
        rep: &Representation,
        src: &[usize],
        dst: &[usize],
        a_sub: &Tensor<T>,
        mixer: impl Fn(&Mixers) -> &ResidualBlock,
        head: &ResidualBlock,
        dropout: f64,
    ) -> Result<NodeId> {
        if let Some(mx) = &self.arch.mixers {
            return location_mlp_apply(g, &self.store, mixer(mx), rep.h_prime, head, dropout);
        }
        let a = g.constant(a_sub.clone());
        let tm = if self.arch.plain {
            let p = g.param(&self.store, PLAIN_TRANSFER)?;
            let rows = g.embedding_lookup(p, src)?;
            let rows_t = g.transpose(rows)?;
            let block_t = g.embedding_lookup(rows_t, dst)?;
            let block = g.transpose(block_t)?;
            plain_transfer(g, a, block)?
        } else {
            let b_src = self.node_rows(g, src)?;
            let b_dst = self.node_rows(g, dst)?;
            enhanced_transfer(g, a, rep.e_rank, b_src, b_dst)?
        };
        transfer_apply(g, &self.store, &tm, rep.h_prime, head, dropout)
    }

    fn check_input(&self, g: &Graph<T>, x: NodeId, rows: usize, len: usize, batch: usize, what: &str) -> Result<()> {
        let s = g.shape(x);
        if s != [batch, rows, len] {
            return Err(StpsError::shape(
                "stage forward",
                format!("{what} has shape {s:?}, expected {:?}", [batch, rows, len]),
            ));
        }
        Ok(())
    }

    /// Stage 1: `[B, m, l]` sensed past → `[B, m′, l]` unsensed past
    /// (`[B, m′, l′]` future in the one-step variant).
    pub fn step1(&self, g: &mut Graph<T>, x_m_t: NodeId, cal: &Calendar, dropout: f64) -> Result<NodeId> {
        let p = &self.partition;
        self.check_input(g, x_m_t, p.m(), self.config.l, cal.len(), "x_M,T")?;
        let rep = self.arch.net.build(g, &self.store, x_m_t, p.sensed(), &cal.tod, &cal.dow, dropout)?;
        let head = if self.config.ablation == Ablation::OneStep {
            &self.arch.head_lp
        } else {
            &self.arch.head_l
        };
        self.route(g, &rep, p.sensed(), p.unsensed(), &self.a_m_mp, |m| &m.s1, head, dropout)
    }

    /// Stage 2: past flows over all locations (re-ranked over `N`) →
    /// `[B, m, l′]` sensed future.
    pub fn step2(
        &self,
        g: &mut Graph<T>,
        x_m_t: NodeId,
        xhat_mp_t: NodeId,
        cal: &Calendar,
        dropout: f64,
    ) -> Result<Step2Output> {
        let p = &self.partition;
        let (b, l) = (cal.len(), self.config.l);
        self.check_input(g, x_m_t, p.m(), l, b, "x_M,T")?;
        self.check_input(g, xhat_mp_t, p.m_prime(), l, b, "x̂_M′,T")?;
        let x_n_t = g.concat(&[x_m_t, xhat_mp_t], 1)?;
        let all = p.all();
        let rep_n = self.arch.net.build(g, &self.store, x_n_t, &all, &cal.tod, &cal.dow, dropout)?;
        let out = self.route(g, &rep_n, &all, p.sensed(), &self.a_n_m, |m| &m.s2, &self.arch.head_lp, dropout)?;
        Ok(Step2Output { x_n_t, rep_n, out })
    }

    /// Stage 3: `α·branch_a + (1−α)·branch_b`. Branch A transfers the
    /// all-location past; branch B transfers the forecast sensed future.
    /// Without `xhat_m_tp` only branch A is used.
    pub fn step3(
        &self,
        g: &mut Graph<T>,
        x_n_t: NodeId,
        rep_n: Option<&Representation>,
        xhat_m_tp: Option<NodeId>,
        cal: &Calendar,
        dropout: f64,
    ) -> Result<Step3Output> {
        let p = &self.partition;
        let all = p.all();
        self.check_input(g, x_n_t, p.n(), self.config.l, cal.len(), "x′_N,T")?;
        let built;
        let rep_n = match rep_n {
            Some(r) => r,
            None => {
                built = self.arch.net.build(g, &self.store, x_n_t, &all, &cal.tod, &cal.dow, dropout)?;
                &built
            }
        };
        let head = &self.arch.head_lp;
        let branch_a = self.route(g, rep_n, &all, p.unsensed(), &self.a_n_mp, |m| &m.s3a, head, dropout)?;
        let Some(x_m_tp) = xhat_m_tp else {
            return Ok(Step3Output {
                branch_a,
                branch_b: None,
                out: branch_a,
            });
        };
        self.check_input(g, x_m_tp, p.m(), self.config.l_prime, cal.len(), "x̂_M,T′")?;
        let rep_m = self
            .arch
            .net
            .build(g, &self.store, x_m_tp, p.sensed(), &cal.tod_future, &cal.dow_future, dropout)?;
        let branch_b = self.route(g, &rep_m, p.sensed(), p.unsensed(), &self.a_m_mp, |m| &m.s3b, head, dropout)?;
        let alpha = self.config.effective_alpha();
        let wa = g.scale(branch_a, T::of(alpha))?;
        let wb = g.scale(branch_b, T::of(1.0 - alpha))?;
        let out = g.add(wa, wb)?;
        Ok(Step3Output {
            branch_a,
            branch_b: Some(branch_b),
            out,
        })
    }

    fn normalized(&self, raw: &Tensor<T>) -> Tensor<T> {
        let (mean, std) = (T::of(self.normalizer.mean), T::of(self.normalizer.std));
        raw.map(|v| (v - mean) / std)
    }

    /// Chains the stages up to `upto`, feeding each stage the previous
    /// predictions (or the ground truth when `teacher_forcing`).
    pub fn chain(
        &self,
        g: &mut Graph<T>,
        batch: &Batch<T>,
        upto: Stage,
        dropout: f64,
        teacher_forcing: bool,
    ) -> Result<ChainOutput> {
        let cal = &batch.calendar;
        let x_m_t = g.constant(batch.x_m_t.clone());
        let s1 = self.step1(g, x_m_t, cal, dropout)?;
        let mut out = ChainOutput { s1, s2: None, s3: None };
        if upto == Stage::One || self.config.ablation == Ablation::OneStep {
            return Ok(out);
        }
        let past_unsensed = if teacher_forcing {
            g.constant(self.normalized(&batch.x_mp_t))
        } else {
            s1
        };
        if self.config.ablation == Ablation::TwoStep {
            let x_n_t = g.concat(&[x_m_t, past_unsensed], 1)?;
            out.s3 = Some(self.step3(g, x_n_t, None, None, cal, dropout)?);
            return Ok(out);
        }
        let s2 = self.step2(g, x_m_t, past_unsensed, cal, dropout)?;
        out.s2 = Some(s2.out);
        if upto == Stage::Two {
            return Ok(out);
        }
        let future_sensed = if teacher_forcing {
            g.constant(self.normalized(&batch.x_m_tp))
        } else {
            s2.out
        };
        out.s3 = Some(self.step3(g, s2.x_n_t, Some(&s2.rep_n), Some(future_sensed), cal, dropout)?);
        Ok(out)
    }

    /// Raw-unit target of a stage.
    pub fn stage_target<'a>(&self, batch: &'a Batch<T>, stage: Stage) -> &'a Tensor<T> {
        match stage {
            Stage::One if self.config.ablation == Ablation::OneStep => &batch.x_mp_tp,
            Stage::One => &batch.x_mp_t,
            Stage::Two => &batch.x_m_tp,
            Stage::Three => &batch.x_mp_tp,
        }
    }

    /// Normalised prediction node of `stage` and its MAE loss.
    pub fn stage_loss(
        &self,
        g: &mut Graph<T>,
        batch: &Batch<T>,
        stage: Stage,
        dropout: f64,
        teacher_forcing: bool,
    ) -> Result<(NodeId, NodeId)> {
        if !self.config.stages().contains(&stage) {
            return Err(StpsError::invalid(format!(
                "{stage} is not part of the {} variant",
                self.config.ablation
            )));
        }
        let out = self.chain(g, batch, stage, dropout, teacher_forcing)?;
        let pred = match stage {
            Stage::One => out.s1,
            Stage::Two => out.s2.expect("stage 2 built"),
            Stage::Three => out.s3.expect("stage 3 built").out,
        };
        let loss = mae_loss(g, pred, self.stage_target(batch, stage), &self.normalizer)?;
        Ok((pred, loss))
    }

    /// Denormalised evaluation-mode prediction of `stage` for a batch.
    pub fn predict_stage(&self, batch: &Batch<T>, stage: Stage) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (pred, _) = self.stage_loss(&mut g, batch, stage, 0.0, false)?;
        let (mean, std) = (T::of(self.normalizer.mean), T::of(self.normalizer.std));
        Ok(g.value(pred).map(|v| v * std + mean))
    }

    /// Final forecast `[B, m′, l′]` in raw units.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        if !self.is_trained() {
            return Err(StpsError::Untrained);
        }
        self.predict_stage(batch, self.config.final_stage())
    }

    /// Forecast of the unsensed locations (`m′ × l′`, raw units) from the
    /// last `l` raw intervals of the sensed locations (`m × l`).
    pub fn infer(&self, x_m_t: &Tensor<T>, calendar: &Calendar) -> Result<Tensor<T>> {
        if !self.is_trained() {
            return Err(StpsError::Untrained);
        }
        let p = &self.partition;
        let (l, lp) = (self.config.l, self.config.l_prime);
        if x_m_t.shape() != [p.m(), l] || calendar.len() != 1 {
            return Err(StpsError::shape(
                "infer",
                format!("input {:?} with {} calendars, expected [{}, {l}] and 1", x_m_t.shape(), calendar.len(), p.m()),
            ));
        }
        let batch = Batch {
            calendar: calendar.clone(),
            x_m_t: self.normalized(x_m_t).reshaped([1, p.m(), l])?,
            x_mp_t: Tensor::zeros([1, p.m_prime(), l]),
            x_m_tp: Tensor::zeros([1, p.m(), lp]),
            x_mp_tp: Tensor::zeros([1, p.m_prime(), lp]),
        };
        self.predict(&batch)?.reshaped([p.m_prime(), lp])
    }
}

/// `mean |pred·std + mean − truth|` over all entries.
pub fn mae_loss<T: Scalar>(g: &mut Graph<T>, pred_norm: NodeId, truth_raw: &Tensor<T>, normalizer: &Normalizer) -> Result<NodeId> {
    let scaled = g.scale(pred_norm, T::of(normalizer.std))?;
    let denorm = g.offset(scaled, T::of(normalizer.mean));
    g.mean_abs_error(denorm, truth_raw)
}
