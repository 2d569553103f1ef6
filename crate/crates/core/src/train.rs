//! Regularized 1-vs-all logistic training with Adagrad.
//!
//! For a triple `(h, r, t)` the loss is
//! `Σ_{t'∈E} softplus(-y_{t'} f_r(h, t')) + Φ` with `y = +1` for the true
//! tail and `-1` for every other entity, and
//! `Φ = λ(λ₁ G_p(h) + λ₂ G_p(r) + λ₃ G_p(t))`. Batches use the mean.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::algebra::{g_p_norm, Quaternion};
use crate::data::{augment_reciprocal, build_filter_index, Dataset, Triple};
use crate::eval::{evaluate, EvalError};
use crate::model::{
    combine, score_all_tails, AblationMask, HeadBuffers, ModelError, ParameterStore, ScoreKind, ENTITY_CHUNK,
};

pub const ADAGRAD_EPSILON: f64 = 1e-10;

/// Total decay factor of the exponential schedule over a full run.
pub const EXP_DECAY_RATE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("gradient shape does not match parameter store")]
    ShapeMismatch,
    #[error("loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("parameters became non-finite at epoch {0}")]
    NonFiniteParameters(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Exponent of the G_p norm.
    pub p: u32,
    /// Regularization multiplier λ.
    pub lambda: f64,
    /// Rates λ₁, λ₂, λ₃ for head, relation and tail.
    pub rates: [f64; 3],
}

impl LossConfig {
    pub fn unregularized() -> Self {
        LossConfig {
            p: 3,
            lambda: 0.0,
            rates: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(2..=3).contains(&self.p) {
            return Err(TrainError::InvalidConfig(format!("p must be 2 or 3, got {}", self.p)));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 || self.rates.iter().any(|r| r.is_nan() || *r < 0.0) {
            return Err(TrainError::InvalidConfig("regularization weights must be ≥ 0".into()));
        }
        Ok(())
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Φ` for one triple, computed on materialized module elements.
pub fn regularizer(
    h: usize,
    r: usize,
    t: usize,
    store: &ParameterStore,
    cfg: &LossConfig,
    mask: AblationMask,
) -> Result<f64, ModelError> {
    if cfg.lambda == 0.0 {
        store.check_entity(h)?;
        store.check_relation(r)?;
        store.check_entity(t)?;
        return Ok(0.0);
    }
    let he = store.entity_embedding(h, mask)?;
    let te = store.entity_embedding(t, mask)?;
    let re = store.relation_embedding(r, mask)?;
    let gh = g_p_norm(&combine(&he.scalar, &he.vector)?, cfg.p)?;
    let gt = g_p_norm(&combine(&te.scalar, &te.vector)?, cfg.p)?;
    let gr = g_p_norm(&re.scaling, cfg.p)?;
    Ok(cfg.lambda * (cfg.rates[0] * gh + cfg.rates[1] * gr + cfg.rates[2] * gt))
}

/// Loss of one triple against every entity as candidate tail.
pub fn triple_loss(
    h: usize,
    r: usize,
    t: usize,
    store: &ParameterStore,
    cfg: &LossConfig,
    mask: AblationMask,
) -> Result<f64, ModelError> {
    store.check_entity(t)?;
    let scores = score_all_tails(h, r, store, mask)?;
    let data: f64 = scores
        .iter()
        .enumerate()
        .map(|(j, &f)| if j == t { softplus(-f) } else { softplus(f) })
        .sum();
    Ok(data + regularizer(h, r, t, store, cfg, mask)?)
}

/// Mean [`triple_loss`] over a batch.
pub fn batch_loss(batch: &[Triple], store: &ParameterStore, cfg: &LossConfig, mask: AblationMask) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for t in batch {
        total += triple_loss(t.head, t.relation, t.tail, store, cfg, mask)?;
    }
    Ok(total / batch.len() as f64)
}

/// Gradient tables with the same shape as a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entities: Vec<f64>,
    pub relations: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Gradients {
            entities: vec![0.0; store.entity_table().len()],
            relations: vec![0.0; store.relation_table().len()],
        }
    }
}

/// `G_p` over flattened slots of `width` coordinates, with its gradient
/// scaled by `coef` added into `grad`.
fn gp_with_grad(x: &[f64], width: usize, p: u32, coef: f64, grad: &mut [f64]) -> f64 {
    let norms: Vec<f64> = x.chunks_exact(width).map(|c| c.iter().map(|v| v * v).sum()).collect();
    let sum: f64 = norms.iter().map(|n| n.powi(p as i32)).sum();
    if sum == 0.0 {
        return 0.0;
    }
    let g = sum.powf(1.0 / p as f64);
    if coef != 0.0 {
        // dG/dx = S^{1/p - 1} N^{p - 1} · 2x
        let outer = g / sum;
        for ((gc, xc), n) in grad.chunks_exact_mut(width).zip(x.chunks_exact(width)).zip(&norms) {
            let f = coef * outer * n.powi(p as i32 - 1) * 2.0;
            for (gi, xi) in gc.iter_mut().zip(xc) {
                *gi += f * xi;
            }
        }
    }
    g
}

struct ChunkResult {
    loss: f64,
    d_heads: Array2<f64>,
    d_entities: Array2<f64>,
}

fn chunk_pass(
    heads: ArrayView2<f64>,
    ent: ArrayView2<f64>,
    offset: usize,
    tails: &[usize],
    kind: ScoreKind,
    width: usize,
    inv_b: f64,
) -> ChunkResult {
    let (b, n) = (heads.nrows(), ent.nrows());
    let scores = match kind {
        ScoreKind::Cosine => heads.dot(&ent.t()),
        ScoreKind::Distance => crate::model::distance_block(heads, ent, width),
    };
    let mut coef = Array2::<f64>::zeros((b, n));
    let mut loss = 0.0;
    for q in 0..b {
        for j in 0..n {
            let f = scores[[q, j]];
            if offset + j == tails[q] {
                loss += softplus(-f);
                coef[[q, j]] = -sigmoid(-f) * inv_b;
            } else {
                loss += softplus(f);
                coef[[q, j]] = sigmoid(f) * inv_b;
            }
        }
    }
    let (d_heads, d_entities) = match kind {
        ScoreKind::Cosine => (coef.dot(&ent), coef.t().dot(&heads)),
        ScoreKind::Distance => {
            let mut dh = Array2::<f64>::zeros(heads.raw_dim());
            let mut de = Array2::<f64>::zeros(ent.raw_dim());
            let dim = heads.ncols();
            for q in 0..b {
                for j in 0..n {
                    let c = coef[[q, j]];
                    for slot in (0..dim).step_by(width) {
                        let mut norm = 0.0;
                        for c2 in slot..slot + width {
                            let d = heads[[q, c2]] - ent[[j, c2]];
                            norm += d * d;
                        }
                        let norm = norm.sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        // f = -Σ |h' - e|: ∂f/∂h' = -(h' - e)/|h' - e|.
                        for c2 in slot..slot + width {
                            let u = (heads[[q, c2]] - ent[[j, c2]]) / norm;
                            dh[[q, c2]] -= c * u;
                            de[[j, c2]] += c * u;
                        }
                    }
                }
            }
            (dh, de)
        }
    };
    ChunkResult {
        loss,
        d_heads,
        d_entities,
    }
}

/// Mean batch loss and its exact gradient with respect to every parameter.
/// Parameters frozen by `mask` get zero gradient.
pub fn batch_gradients(
    batch: &[Triple],
    store: &ParameterStore,
    cfg: &LossConfig,
    mask: AblationMask,
) -> Result<(f64, Gradients), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    for t in batch {
        store.check_entity(t.tail)?;
    }
    let l = store.layout();
    let kind = store.variant().groups().score;
    let inv_b = 1.0 / batch.len() as f64;
    let queries: Vec<(usize, usize)> = batch.iter().map(|t| (t.head, t.relation)).collect();
    let tails: Vec<usize> = batch.iter().map(|t| t.tail).collect();
    let heads = store.transformed_heads(&queries, mask)?;
    let entities = store.combined_entities(mask);

    let chunks: Vec<ChunkResult> = entities
        .axis_chunks_iter(Axis(0), ENTITY_CHUNK)
        .into_par_iter()
        .enumerate()
        .map(|(c, ent)| chunk_pass(heads.view(), ent, c * ENTITY_CHUNK, &tails, kind, l.width, inv_b))
        .collect();

    let mut loss = 0.0;
    let mut d_heads = Array2::<f64>::zeros(heads.raw_dim());
    let mut d_entities = Array2::<f64>::zeros(entities.raw_dim());
    for (c, chunk) in chunks.into_iter().enumerate() {
        loss += chunk.loss;
        d_heads += &chunk.d_heads;
        let start = c * ENTITY_CHUNK;
        d_entities
            .slice_mut(s![start..start + chunk.d_entities.nrows(), ..])
            .assign(&chunk.d_entities);
    }
    loss *= inv_b;

    let mut grads = Gradients::zeros_like(store);
    let k = l.k;

    if cfg.lambda != 0.0 {
        let mut gs = vec![Quaternion::ZERO; k];
        let mut gv = vec![Quaternion::ZERO; k];
        let mut dgs = vec![0.0; 4 * k];
        let zeros = vec![Quaternion::ZERO; k];
        let rel_len = l.relation_len();
        for t in batch {
            let scale = cfg.lambda * inv_b;
            for (id, rate) in [(t.head, cfg.rates[0]), (t.tail, cfg.rates[2])] {
                let row = entities.row(id);
                let mut d_row = d_entities.row_mut(id);
                loss += scale
                    * rate
                    * gp_with_grad(
                        row.as_slice().expect("standard layout"),
                        l.width,
                        cfg.p,
                        scale * rate,
                        d_row.as_slice_mut().expect("standard layout"),
                    );
            }
            store.relation_parts(t.relation, mask, &mut gs, &mut gv);
            let flat: Vec<f64> = gs.iter().flat_map(|q| q.to_array()).collect();
            dgs.fill(0.0);
            loss += scale * cfg.rates[1] * gp_with_grad(&flat, 4, cfg.p, scale * cfg.rates[1], &mut dgs);
            let dq: Vec<Quaternion> = dgs.chunks_exact(4).map(|c| Quaternion::new(c[0], c[1], c[2], c[3])).collect();
            let r = t.relation;
            store.relation_backward(r, mask, &dq, &zeros, &mut grads.relations[r * rel_len..(r + 1) * rel_len]);
        }
    }

    // Tails and negatives: E_j = s_j ⊙ v_j.
    let ent_len = l.entity_len();
    grads
        .entities
        .par_chunks_mut(ENTITY_CHUNK * ent_len)
        .zip(d_entities.axis_chunks_iter(Axis(0), ENTITY_CHUNK).into_par_iter())
        .enumerate()
        .for_each(|(c, (g_chunk, d_chunk))| {
            let mut s = vec![Quaternion::ZERO; k];
            let mut v = vec![Quaternion::ZERO; k];
            let mut ds = vec![Quaternion::ZERO; k];
            let mut dv = vec![Quaternion::ZERO; k];
            for (j, (g_row, d_row)) in g_chunk.chunks_exact_mut(ent_len).zip(d_chunk.outer_iter()).enumerate() {
                let e = c * ENTITY_CHUNK + j;
                store.entity_parts(e, mask, &mut s, &mut v);
                for i in 0..k {
                    let mut g = [0.0; 4];
                    for w in 0..l.width {
                        g[w] = d_row[i * l.width + w];
                    }
                    let g = Quaternion::from_array(g);
                    ds[i] = g * v[i].conj();
                    dv[i] = s[i].conj() * g;
                }
                store.entity_backward(e, mask, &ds, &dv, g_row);
            }
        });

    // Heads: h' = (s ⊗ g_s) ⊗ (v ⊗ g_v).
    let mut buf = HeadBuffers::new(k);
    let rel_len = l.relation_len();
    for (b, t) in batch.iter().enumerate() {
        buf.forward(store, t.head, t.relation, mask);
        let d_row = d_heads.row(b);
        let (h, r) = (t.head, t.relation);
        buf.backward(
            store,
            h,
            r,
            mask,
            d_row.as_slice().expect("standard layout"),
            &mut grads.entities[h * ent_len..(h + 1) * ent_len],
            &mut grads.relations[r * rel_len..(r + 1) * rel_len],
        );
    }

    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Constant,
    /// Geometric decay reaching a total factor of 0.1 at the last epoch.
    Exponential,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Exponential => "exp",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "exp" | "exponential" => Ok(Schedule::Exponential),
            _ => Err(format!("unknown schedule '{s}' (expected constant|exp)")),
        }
    }
}

/// Learning rate for `epoch` of a run lasting `total_epochs` epochs.
pub fn lr_at(epoch: usize, total_epochs: usize, base_lr: f64, schedule: Schedule) -> f64 {
    match schedule {
        Schedule::Constant => base_lr,
        Schedule::Exponential => {
            let last = total_epochs.saturating_sub(1).max(1);
            base_lr * EXP_DECAY_RATE.powf(epoch as f64 / last as f64)
        }
    }
}

/// Adagrad accumulators of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub entity_acc: Vec<f64>,
    pub relation_acc: Vec<f64>,
}

impl OptimizerState {
    pub fn new(store: &ParameterStore) -> Self {
        OptimizerState {
            entity_acc: vec![0.0; store.entity_table().len()],
            relation_acc: vec![0.0; store.relation_table().len()],
        }
    }
}

fn adagrad_update(params: &mut [f64], acc: &mut [f64], grads: &[f64], lr: f64) {
    params
        .par_chunks_mut(4096)
        .zip(acc.par_chunks_mut(4096))
        .zip(grads.par_chunks(4096))
        .for_each(|((p, a), g)| {
            for ((p, a), &g) in p.iter_mut().zip(a.iter_mut()).zip(g) {
                if g != 0.0 {
                    *a += g * g;
                    *p -= lr * g / (a.sqrt() + ADAGRAD_EPSILON);
                }
            }
        });
}

/// `acc += g²; θ -= lr · g / (√acc + ε)`.
pub fn adagrad_step(
    store: &mut ParameterStore,
    state: &mut OptimizerState,
    grads: &Gradients,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.entities.len() != store.entities.len()
        || grads.relations.len() != store.relations.len()
        || state.entity_acc.len() != store.entities.len()
        || state.relation_acc.len() != store.relations.len()
    {
        return Err(TrainError::ShapeMismatch);
    }
    adagrad_update(&mut store.entities, &mut state.entity_acc, &grads.entities, lr);
    adagrad_update(&mut store.relations, &mut state.relation_acc, &grads.relations, lr);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub loss: LossConfig,
    pub mask: AblationMask,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_interval: usize,
    /// Stop after this many validations without improvement; 0 disables.
    pub patience: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be ≥ 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub valid_mrr: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,loss,lr,valid_mrr,seconds";

    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.epochs {
            let mrr = r.valid_mrr.map(|m| format!("{m:.6}")).unwrap_or_default();
            writeln!(w, "{},{:.9},{:.9},{},{:.3}", r.epoch, r.loss, r.lr, mrr, r.seconds)?;
        }
        Ok(())
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|r| r.seconds).sum()
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub store: ParameterStore,
    pub optimizer: OptimizerState,
    /// Next epoch to run.
    pub epoch: usize,
    pub report: TrainReport,
    pub best_valid_mrr: Option<f64>,
    pub stale_evals: usize,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn new(store: ParameterStore) -> Self {
        let optimizer = OptimizerState::new(&store);
        TrainState {
            store,
            optimizer,
            epoch: 0,
            report: TrainReport::default(),
            best_valid_mrr: None,
            stale_evals: 0,
            stopped_early: false,
        }
    }
}

/// Hooks invoked by [`fit`].
pub trait FitCallback {
    /// Called after every epoch; returning `false` halts training.
    fn on_epoch_end(&mut self, _state: &TrainState) -> Result<bool, TrainError> {
        Ok(true)
    }
}

impl FitCallback for () {}

/// Stops after the given epoch count has been reached.
pub struct StopAfter(pub usize);

impl FitCallback for StopAfter {
    fn on_epoch_end(&mut self, state: &TrainState) -> Result<bool, TrainError> {
        Ok(state.epoch < self.0)
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | epoch as u64);
    rng
}

/// Runs epochs `state.epoch .. cfg.epochs` on the reciprocal-augmented
/// training split, with optional validation and early stopping.
pub fn fit(
    dataset: &Dataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
    callbacks: &mut dyn FitCallback,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let vocab = &dataset.vocab;
    if state.store.num_entities() != vocab.num_entities() || state.store.num_relations() != vocab.num_relation_ids() {
        return Err(TrainError::ShapeMismatch);
    }
    let train = augment_reciprocal(&dataset.triples.train, vocab);
    let filter = build_filter_index(&dataset.triples, vocab);
    let validate = cfg.eval_interval > 0 && !dataset.triples.valid.is_empty();

    while state.epoch < cfg.epochs && !state.stopped_early {
        let epoch = state.epoch;
        let started = Instant::now();
        let lr = lr_at(epoch, cfg.epochs, cfg.lr, cfg.schedule);
        let mut order = train.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));

        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradients(batch, &state.store, &cfg.loss, cfg.mask)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss(epoch));
            }
            total += loss * batch.len() as f64;
            adagrad_step(&mut state.store, &mut state.optimizer, &grads, lr)?;
        }
        if !state.store.all_finite() {
            return Err(TrainError::NonFiniteParameters(epoch));
        }
        let loss = if order.is_empty() { 0.0 } else { total / order.len() as f64 };

        let mut valid_mrr = None;
        if validate && (epoch + 1).is_multiple_of(cfg.eval_interval) {
            let m = evaluate(
                &dataset.triples.valid,
                &state.store,
                &filter,
                cfg.mask,
                vocab.num_relations(),
            )?
            .mrr;
            valid_mrr = Some(m);
            if state.best_valid_mrr.is_none_or(|b| m > b) {
                state.best_valid_mrr = Some(m);
                state.stale_evals = 0;
            } else {
                state.stale_evals += 1;
                if cfg.patience > 0 && state.stale_evals >= cfg.patience {
                    state.stopped_early = true;
                }
            }
        }
        let record = EpochRecord {
            epoch,
            loss,
            lr,
            valid_mrr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {loss:.6} lr {lr:.5}{}",
            valid_mrr.map(|m| format!(" valid MRR {m:.4}")).unwrap_or_default()
        );
        state.report.epochs.push(record);
        state.epoch += 1;
        if !callbacks.on_epoch_end(state)? {
            break;
        }
    }
    Ok(state.report.clone())
}
