//! Dynamic dual decoder.
//!
//! Each step builds an intra-cluster query from the start and end of the
//! current same-role sub-path and an inter-cluster query from the current
//! node and its cluster mean. Both queries run through one shared
//! glimpse/logit pipeline; a small gate mixes the two distributions.
//!
//! Rollouts are decoded in lockstep: `P` rows (for example `B` instances
//! times `N` start nodes) advance together, and row `r` belongs to instance
//! `r / (P / B)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::RouteState;
use crate::error::{ActionRule, Error, Result};
use crate::numcore::ops::MASK_SENTINEL;
use crate::numcore::{ParamStore, RowPool, Scalar, Tape, Tensor2, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub clip: f64,
    pub dual_decoder: bool,
    pub gate_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            clip: 10.0,
            dual_decoder: true,
            gate_hidden: 128,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        if self.gate_hidden == 0 {
            return Err(Error::Config("gate_hidden must be positive".into()));
        }
        Ok(())
    }
}

const PROJECTIONS: [&str; 7] = ["wq_first", "wq_last", "wq_cluster", "wk", "wv", "wo", "wk_logit"];

pub fn register_params<T: Scalar>(store: &mut ParamStore<T>, d_h: usize, cfg: &DecoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    for w in PROJECTIONS {
        store.insert_uniform(format!("decoder.{w}"), d_h, d_h, rng)?;
    }
    store.insert_uniform("gate.w1", 3 * d_h, cfg.gate_hidden, rng)?;
    store.insert("gate.b1", Tensor2::zeros(1, cfg.gate_hidden))?;
    store.insert_uniform("gate.w2", cfg.gate_hidden, 1, rng)?;
    store.insert("gate.b2", Tensor2::zeros(1, 1))?;
    Ok(())
}

fn role_of(n: usize, node: usize) -> u8 {
    match node {
        0 => 0,
        i if i <= n => 1,
        _ => 2,
    }
}

/// Node indices that define the decoding context of one state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextIndex {
    /// First node of the maximal same-role suffix of the tour.
    pub first: usize,
    pub last: usize,
    /// All nodes sharing the current node's role.
    pub current_cluster: Vec<usize>,
    /// Feasible nodes of another role, or every feasible node if none.
    pub other: Vec<usize>,
}

pub fn context_index(state: &RouteState) -> Result<ContextIndex> {
    if state.is_done() {
        return Err(Error::EpisodeFinished);
    }
    let n = state.n();
    let tour = state.tour();
    let last = state.current();
    let role = role_of(n, last);
    let mut first = last;
    for &node in tour.iter().rev() {
        if role_of(n, node) != role {
            break;
        }
        first = node;
    }
    let current_cluster = (0..=2 * n).filter(|&i| role_of(n, i) == role).collect();
    let feasible: Vec<usize> = (1..=2 * n).filter(|&j| state.is_feasible(j)).collect();
    let mut other: Vec<usize> = feasible.iter().copied().filter(|&j| role_of(n, j) != role).collect();
    if other.is_empty() {
        other = feasible;
    }
    Ok(ContextIndex {
        first,
        last,
        current_cluster,
        other,
    })
}

/// Additive feasibility mask row: 0 for feasible nodes, the sentinel
/// elsewhere.
pub fn additive_mask<T: Scalar>(state: &RouteState) -> Vec<T> {
    (0..=2 * state.n())
        .map(|j| if state.is_feasible(j) { T::zero() } else { T::from_f64(MASK_SENTINEL) })
        .collect()
}

/// Decoding context with embeddings materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeContext<T> {
    pub h_first: Vec<T>,
    pub h_last: Vec<T>,
    pub mean_current: Vec<T>,
    pub mean_other: Vec<T>,
    pub mask: Vec<T>,
}

fn mean_rows<T: Scalar>(h: &Tensor2<T>, rows: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); h.cols()];
    for &r in rows {
        for (o, &x) in out.iter_mut().zip(h.row(r)) {
            *o += x;
        }
    }
    let inv = T::one() / T::from_f64(rows.len().max(1) as f64);
    out.iter_mut().for_each(|x| *x *= inv);
    out
}

pub fn build_context<T: Scalar>(state: &RouteState, h: &Tensor2<T>) -> Result<DecodeContext<T>> {
    let idx = context_index(state)?;
    if h.rows() != 2 * state.n() + 1 {
        return Err(Error::Shape(format!("{} embedding rows for n = {}", h.rows(), state.n())));
    }
    Ok(DecodeContext {
        h_first: h.row(idx.first).to_vec(),
        h_last: h.row(idx.last).to_vec(),
        mean_current: mean_rows(h, &idx.current_cluster),
        mean_other: mean_rows(h, &idx.other),
        mask: additive_mask(state),
    })
}

/// Per-node projections shared by every decoding step of a batch, plus the
/// decoder parameters bound on the tape.
#[derive(Debug, Clone, Copy)]
pub struct NodeKeys {
    pub groups: usize,
    pub nodes: usize,
    q_first: Var,
    q_last: Var,
    q_cluster: Var,
    k: Var,
    v: Var,
    k_logit: Var,
    wo: Var,
    gate_last: Var,
    gate_current: Var,
    gate_other: Var,
    gate_b1: Var,
    gate_w2: Var,
    gate_b2: Var,
}

pub fn project_nodes<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, h: Var, groups: usize) -> Result<NodeKeys> {
    let (rows, d) = tape.shape(h);
    if groups == 0 || rows % groups != 0 {
        return Err(Error::Shape(format!("{rows} embedding rows in {groups} groups")));
    }
    let mut p = |name: &str| -> Result<Var> { Ok(tape.param(store, store.require(name)?)) };
    let w: Vec<Var> = PROJECTIONS.iter().map(|name| p(&format!("decoder.{name}"))).collect::<Result<_>>()?;
    let (w1, b1, w2, b2) = (p("gate.w1")?, p("gate.b1")?, p("gate.w2")?, p("gate.b2")?);
    let proj = |tape: &mut Tape<T>, w: Var| tape.matmul(h, w);
    let q_first = proj(tape, w[0])?;
    let q_last = proj(tape, w[1])?;
    let q_cluster = proj(tape, w[2])?;
    let k = proj(tape, w[3])?;
    let v = proj(tape, w[4])?;
    let k_logit = proj(tape, w[6])?;
    let mut gate = Vec::with_capacity(3);
    for part in 0..3 {
        let slice = tape.slice_rows(w1, part * d, (part + 1) * d)?;
        gate.push(tape.matmul(h, slice)?);
    }
    Ok(NodeKeys {
        groups,
        nodes: rows / groups,
        q_first,
        q_last,
        q_cluster,
        k,
        v,
        k_logit,
        wo: w[5],
        gate_last: gate[0],
        gate_current: gate[1],
        gate_other: gate[2],
        gate_b1: b1,
        gate_w2: w2,
        gate_b2: b2,
    })
}

/// Tape variables produced by one decoding step over `P` rows.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    /// Clipped logits of the intra pipeline (or the single pipeline).
    pub logits_intra: Var,
    pub p_intra: Var,
    pub logits_inter: Option<Var>,
    pub p_inter: Option<Var>,
    /// `P x 1` gate output; absent in single-decoder mode.
    pub p_stay: Option<Var>,
    pub pi: Var,
}

fn pipeline_vars<T: Scalar>(
    tape: &mut Tape<T>,
    keys: &NodeKeys,
    q: Var,
    heads: usize,
    clip: f64,
    mask: &Tensor2<T>,
) -> Result<(Var, Var)> {
    let d = tape.shape(q).1;
    let glimpse = tape.attention_grouped(q, keys.k, keys.v, heads, keys.groups, Some(mask))?;
    let glimpse = tape.matmul(glimpse, keys.wo)?;
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let u = tape.group_scores(glimpse, keys.k_logit, keys.groups, scale)?;
    let u = tape.tanh(u);
    let clipped = tape.scale(u, T::from_f64(clip));
    let probs = tape.softmax_masked(clipped, mask)?;
    Ok((clipped, probs))
}

/// One decoding step for `states.len()` rows.
pub fn step_batch<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &DecoderConfig,
    heads: usize,
    keys: &NodeKeys,
    states: &[RouteState],
) -> Result<StepVars> {
    let rows = states.len();
    if rows == 0 || !rows.is_multiple_of(keys.groups) {
        return Err(Error::Shape(format!("{rows} decoding rows in {} groups", keys.groups)));
    }
    let per_group = rows / keys.groups;
    let nodes = keys.nodes;
    let (mut first, mut last, mut current, mut other) = (RowPool::new(), RowPool::new(), RowPool::new(), RowPool::new());
    let mut mask = Tensor2::zeros(rows, nodes);
    for (r, state) in states.iter().enumerate() {
        if state.tour().len() > nodes || 2 * state.n() + 1 != nodes {
            return Err(Error::Shape(format!("state for n = {} against {nodes} nodes", state.n())));
        }
        let offset = (r / per_group) * nodes;
        let idx = context_index(state)?;
        let shift = |v: &[usize]| v.iter().map(|&i| i + offset).collect::<Vec<_>>();
        first.push_row([(idx.first + offset, T::one())]);
        last.push_row([(idx.last + offset, T::one())]);
        current.push_mean(&shift(&idx.current_cluster));
        other.push_mean(&shift(&idx.other));
        mask.row_mut(r).copy_from_slice(&additive_mask::<T>(state));
    }
    let ql = tape.pool_rows(keys.q_last, last.clone())?;
    let qf = tape.pool_rows(keys.q_first, first)?;
    let q_intra = tape.add(qf, ql)?;
    let (logits_intra, p_intra) = pipeline_vars(tape, keys, q_intra, heads, cfg.clip, &mask)?;
    if !cfg.dual_decoder {
        return Ok(StepVars {
            logits_intra,
            p_intra,
            logits_inter: None,
            p_inter: None,
            p_stay: None,
            pi: p_intra,
        });
    }
    let qc = tape.pool_rows(keys.q_cluster, current.clone())?;
    let q_inter = tape.add(ql, qc)?;
    let (logits_inter, p_inter) = pipeline_vars(tape, keys, q_inter, heads, cfg.clip, &mask)?;

    let g_last = tape.pool_rows(keys.gate_last, last)?;
    let g_cur = tape.pool_rows(keys.gate_current, current)?;
    let g_other = tape.pool_rows(keys.gate_other, other)?;
    let pre = tape.add(g_last, g_cur)?;
    let pre = tape.add(pre, g_other)?;
    let pre = tape.add_row(pre, keys.gate_b1)?;
    let hidden = tape.relu(pre);
    let out = tape.linear(hidden, keys.gate_w2, Some(keys.gate_b2))?;
    let p_stay = tape.sigmoid(out);
    let pi = tape.mix(p_stay, p_intra, p_inter)?;
    Ok(StepVars {
        logits_intra,
        p_intra,
        logits_inter: Some(logits_inter),
        p_inter: Some(p_inter),
        p_stay: Some(p_stay),
        pi,
    })
}

// ---------------------------------------------------------------------------
// Single-state evaluation

/// Full per-step output for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution<T> {
    pub p_intra: Vec<T>,
    /// Absent in single-decoder mode.
    pub p_inter: Option<Vec<T>>,
    pub p_stay: Option<T>,
    pub pi: Vec<T>,
    /// Clipped pre-mask logits of each pipeline.
    pub logits_intra: Vec<T>,
    pub logits_inter: Option<Vec<T>>,
}

pub fn decode_step<T: Scalar>(
    state: &RouteState,
    h: &Tensor2<T>,
    store: &ParamStore<T>,
    cfg: &DecoderConfig,
    heads: usize,
) -> Result<StepDistribution<T>> {
    let mut tape = Tape::inference();
    let hv = tape.constant(h.clone());
    let keys = project_nodes(&mut tape, store, hv, 1)?;
    let vars = step_batch(&mut tape, cfg, heads, &keys, std::slice::from_ref(state))?;
    let row = |v: Var| tape.value(v).row(0).to_vec();
    Ok(StepDistribution {
        p_intra: row(vars.p_intra),
        p_inter: vars.p_inter.map(row),
        p_stay: vars.p_stay.map(|v| tape.value(v).get(0, 0)),
        pi: row(vars.pi),
        logits_intra: row(vars.logits_intra),
        logits_inter: vars.logits_inter.map(row),
    })
}

fn vec_matmul<T: Scalar>(x: &[T], w: &Tensor2<T>) -> Vec<T> {
    let mut out = vec![T::zero(); w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn weight<'a, T: Scalar>(store: &'a ParamStore<T>, name: &str) -> Result<&'a Tensor2<T>> {
    store
        .by_name(name)
        .ok_or_else(|| Error::Config(format!("parameter {name} is missing")))
}

/// `(q_intra, q_inter)` for a context.
pub fn queries<T: Scalar>(ctx: &DecodeContext<T>, store: &ParamStore<T>) -> Result<(Vec<T>, Vec<T>)> {
    let last = vec_matmul(&ctx.h_last, weight(store, "decoder.wq_last")?);
    let first = vec_matmul(&ctx.h_first, weight(store, "decoder.wq_first")?);
    let cluster = vec_matmul(&ctx.mean_current, weight(store, "decoder.wq_cluster")?);
    let intra = first.iter().zip(&last).map(|(&a, &b)| a + b).collect();
    let inter = last.iter().zip(&cluster).map(|(&a, &b)| a + b).collect();
    Ok((intra, inter))
}

/// Probability vector produced by the shared pipeline for query `q`.
pub fn pipeline<T: Scalar>(
    q: &[T],
    h: &Tensor2<T>,
    mask: &[T],
    store: &ParamStore<T>,
    heads: usize,
    clip: f64,
) -> Result<Vec<T>> {
    let mut tape = Tape::inference();
    let hv = tape.constant(h.clone());
    let keys = project_nodes(&mut tape, store, hv, 1)?;
    let qv = tape.constant(Tensor2::row_vector(q.to_vec()));
    let mask = Tensor2::row_vector(mask.to_vec());
    let (_, p) = pipeline_vars(&mut tape, &keys, qv, heads, clip, &mask)?;
    Ok(tape.value(p).row(0).to_vec())
}

/// Gate probability of staying in the current cluster.
pub fn gate<T: Scalar>(ctx: &DecodeContext<T>, store: &ParamStore<T>) -> Result<T> {
    let input: Vec<T> = [&ctx.h_last, &ctx.mean_current, &ctx.mean_other].into_iter().flatten().copied().collect();
    let mut hidden = vec_matmul(&input, weight(store, "gate.w1")?);
    for (x, &b) in hidden.iter_mut().zip(weight(store, "gate.b1")?.data()) {
        *x = (*x + b).max(T::zero());
    }
    let out = vec_matmul(&hidden, weight(store, "gate.w2")?)[0] + weight(store, "gate.b2")?.get(0, 0);
    Ok(T::one() / (T::one() + (-out).exp()))
}

// ---------------------------------------------------------------------------
// Rollouts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Where the actions after the forced first move come from.
pub enum ActionSource<'a> {
    /// Highest probability, ties to the lowest node index.
    Greedy,
    /// One generator per row.
    Sample(&'a mut [ChaCha8Rng]),
    /// Fixed customer orders (the first entry must equal the row's start).
    Replay(&'a [Vec<usize>]),
}

#[derive(Debug, Clone)]
pub struct RolloutOutput {
    /// Customer orders, one per row.
    pub orders: Vec<Vec<usize>>,
    /// `sum_t ln pi(a_t)` per row.
    pub log_probs: Vec<f64>,
    /// Per-step `P x 1` log-probability columns (recording tapes only).
    pub step_log_probs: Vec<Var>,
}

/// Index of the largest probability among feasible nodes.
pub fn greedy_action<T: Scalar>(pi: &[T], state: &RouteState) -> usize {
    let mut best = None;
    for (j, &p) in pi.iter().enumerate() {
        if state.is_feasible(j) && best.is_none_or(|(_, bp)| p > bp) {
            best = Some((j, p));
        }
    }
    best.expect("at least one feasible node").0
}

/// Inverse-CDF draw from `pi` restricted to feasible nodes.
pub fn sample_action<T: Scalar>(pi: &[T], state: &RouteState, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let total: f64 = pi.iter().enumerate().filter(|&(j, _)| state.is_feasible(j)).map(|(_, &p)| Scalar::to_f64(p)).sum();
    let target = u * total;
    let mut cum = 0.0;
    let mut fallback = None;
    for (j, &p) in pi.iter().enumerate() {
        if !state.is_feasible(j) || p <= T::zero() {
            continue;
        }
        cum += Scalar::to_f64(p);
        fallback = Some(j);
        if cum > target {
            return j;
        }
    }
    fallback.unwrap_or_else(|| greedy_action(pi, state))
}

/// Decodes complete tours for every row. `starts[r]` is the forced first
/// pickup of row `r`; its probability still enters the log-likelihood.
pub fn rollout_batch<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &DecoderConfig,
    heads: usize,
    keys: &NodeKeys,
    n: usize,
    starts: &[usize],
    mut source: ActionSource<'_>,
) -> Result<RolloutOutput> {
    let rows = starts.len();
    if let Some(&bad) = starts.iter().find(|&&s| s == 0 || s > n) {
        return Err(Error::InfeasibleAction {
            node: bad,
            rule: if bad == 0 { ActionRule::Depot } else { ActionRule::Precedence },
        });
    }
    match &source {
        ActionSource::Sample(rngs) if rngs.len() != rows => {
            return Err(Error::Shape(format!("{} generators for {rows} rows", rngs.len())));
        }
        ActionSource::Replay(orders) if orders.len() != rows => {
            return Err(Error::Shape(format!("{} replay orders for {rows} rows", orders.len())));
        }
        _ => {}
    }
    let mut states: Vec<RouteState> = (0..rows).map(|_| RouteState::new(n)).collect();
    let mut log_probs = vec![0.0; rows];
    let mut step_log_probs = Vec::new();
    let mark = tape.len();
    for t in 0..2 * n {
        let vars = step_batch(tape, cfg, heads, keys, &states)?;
        let mut actions = Vec::with_capacity(rows);
        {
            let pi = tape.value(vars.pi);
            for (r, state) in states.iter().enumerate() {
                let row = pi.row(r);
                let a = if t == 0 {
                    starts[r]
                } else {
                    match &mut source {
                        ActionSource::Greedy => greedy_action(row, state),
                        ActionSource::Sample(rngs) => sample_action(row, state, &mut rngs[r]),
                        ActionSource::Replay(orders) => orders[r].get(t).copied().unwrap_or(0),
                    }
                };
                if let ActionSource::Replay(orders) = &source {
                    if orders[r].first() != Some(&starts[r]) {
                        return Err(Error::InvalidTour(format!("replay order of row {r} does not begin at its start")));
                    }
                }
                state.check_action(a)?;
                log_probs[r] += Scalar::to_f64(row[a]).ln();
                actions.push(a);
            }
        }
        if tape.is_recording() {
            step_log_probs.push(tape.log_pick(vars.pi, &actions)?);
        } else {
            tape.truncate(mark);
        }
        for (state, &a) in states.iter_mut().zip(&actions) {
            state.push_unchecked(a);
        }
    }
    Ok(RolloutOutput {
        orders: states.iter().map(|s| s.customers().to_vec()).collect(),
        log_probs,
        step_log_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{self, EncoderConfig};
    use crate::env::validate_tour;
    use crate::instances::{gen_clustered, PdpInstance};
    use crate::numcore::gradcheck::{central_difference, compare};
    use rand::SeedableRng;

    const HEADS: usize = 2;

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig {
            d_h: 16,
            layers: 1,
            heads: HEADS,
            ffn_hidden: 32,
            cluster_attention: true,
        }
    }

    fn dec_cfg() -> DecoderConfig {
        DecoderConfig {
            gate_hidden: 8,
            ..DecoderConfig::default()
        }
    }

    fn store<T: Scalar>(seed: u64) -> ParamStore<T> {
        let mut st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        encoder::register_params(&mut st, &enc_cfg(), &mut rng).unwrap();
        register_params(&mut st, 16, &dec_cfg(), &mut rng).unwrap();
        st
    }

    fn embeddings(inst: &PdpInstance, st: &ParamStore<f64>) -> Tensor2<f64> {
        encoder::encode(inst, st, &enc_cfg()).unwrap()
    }

    fn state(n: usize, tour: &[usize]) -> RouteState {
        let mut s = RouteState::new(n);
        for &a in tour {
            s.push(a).unwrap();
        }
        s
    }

    #[test]
    fn suffix_rule_for_first_node() {
        assert_eq!(context_index(&state(3, &[])).unwrap().first, 0);
        assert_eq!(context_index(&state(3, &[1, 2])).unwrap().first, 1);
        assert_eq!(context_index(&state(3, &[1, 4])).unwrap().first, 4);
        assert_eq!(context_index(&state(3, &[1, 4, 2, 3])).unwrap().first, 2);
        let done = state(1, &[1, 2]);
        assert!(matches!(context_index(&done), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn context_means() {
        let idx = context_index(&state(3, &[1])).unwrap();
        assert_eq!(idx.current_cluster, vec![1, 2, 3]);
        assert_eq!(idx.other, vec![4]);
        // After all pickups, only deliveries remain feasible; with current
        // a pickup the "other" set is the deliveries.
        let idx = context_index(&state(2, &[1, 3])).unwrap();
        assert_eq!(idx.other, vec![2]);
        // Current is a delivery and only deliveries remain: fall back to all
        // feasible nodes.
        let idx = context_index(&state(2, &[1, 2, 3])).unwrap();
        assert_eq!(idx.other, vec![4]);
    }

    #[test]
    fn build_context_at_start() {
        let st = store::<f64>(1);
        let inst = gen_clustered(3, 2).unwrap();
        let h = embeddings(&inst, &st);
        let ctx = build_context(&RouteState::new(3), &h).unwrap();
        assert_eq!(ctx.h_first, h.row(0));
        assert_eq!(ctx.h_last, h.row(0));
        assert_eq!(ctx.mean_current, h.row(0));
        assert_eq!(ctx.mask[0], MASK_SENTINEL);
    }

    #[test]
    fn queries_are_linear() {
        let mut st = store::<f64>(2);
        let h: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let ctx = DecodeContext {
            h_first: h.clone(),
            h_last: h.clone(),
            mean_current: h.clone(),
            mean_other: h.clone(),
            mask: vec![],
        };
        let (intra, _) = queries(&ctx, &st).unwrap();
        let mut sum = st.by_name("decoder.wq_first").unwrap().clone();
        sum.add_assign(st.by_name("decoder.wq_last").unwrap());
        for (a, b) in intra.iter().zip(vec_matmul(&h, &sum)) {
            assert!((a - b).abs() < 1e-12);
        }
        for w in ["wq_first", "wq_last", "wq_cluster"] {
            let id = st.require(&format!("decoder.{w}")).unwrap();
            *st.value_mut(id) = Tensor2::zeros(16, 16);
        }
        let (intra, inter) = queries(&ctx, &st).unwrap();
        assert!(intra.iter().chain(&inter).all(|&x| x == 0.0));
        assert_eq!(intra.len(), 16);
    }

    #[test]
    fn gate_bounds_and_zero_weights() {
        let mut st = store::<f64>(3);
        let inst = gen_clustered(4, 1).unwrap();
        let h = embeddings(&inst, &st);
        let ctx = build_context(&state(4, &[2, 1]), &h).unwrap();
        let p = gate(&ctx, &st).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let dist = decode_step(&state(4, &[2, 1]), &h, &st, &dec_cfg(), HEADS).unwrap();
        assert!((dist.p_stay.unwrap() - p).abs() < 1e-12);
        for name in ["gate.w1", "gate.w2"] {
            let id = st.require(name).unwrap();
            let shape = st.value(id).shape();
            *st.value_mut(id) = Tensor2::zeros(shape.0, shape.1);
        }
        assert_eq!(gate(&ctx, &st).unwrap(), 0.5);
    }

    #[test]
    fn pipeline_masking() {
        let st = store::<f64>(4);
        let inst = gen_clustered(3, 3).unwrap();
        let h = embeddings(&inst, &st);
        let s = state(3, &[1]);
        let ctx = build_context(&s, &h).unwrap();
        let (q, _) = queries(&ctx, &st).unwrap();
        let p = pipeline(&q, &h, &ctx.mask, &st, HEADS, 10.0).unwrap();
        for j in 0..7 {
            if !s.is_feasible(j) {
                assert_eq!(p[j], 0.0);
            }
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let only = state(3, &[1, 2, 3, 4, 5]);
        let ctx = build_context(&only, &h).unwrap();
        let p = pipeline(&q, &h, &ctx.mask, &st, HEADS, 10.0).unwrap();
        assert_eq!(p[6], 1.0);
        assert_eq!(p.iter().sum::<f64>(), 1.0);
        let none = vec![MASK_SENTINEL; 7];
        assert!(matches!(pipeline(&q, &h, &none, &st, HEADS, 10.0), Err(Error::MaskExhausted)));
    }

    #[test]
    fn step_distribution_is_convex_mixture() {
        let st = store::<f64>(5);
        let inst = gen_clustered(4, 4).unwrap();
        let h = embeddings(&inst, &st);
        let s = state(4, &[1, 3, 5]);
        let d = decode_step(&s, &h, &st, &dec_cfg(), HEADS).unwrap();
        let (pin, pout, p) = (&d.p_intra, d.p_inter.as_ref().unwrap(), d.p_stay.unwrap());
        for j in 0..9 {
            assert!((d.pi[j] - (p * pin[j] + (1.0 - p) * pout[j])).abs() < 1e-15);
            assert!(d.pi[j] >= pin[j].min(pout[j]) - 1e-15 && d.pi[j] <= pin[j].max(pout[j]) + 1e-15);
            if !s.is_feasible(j) {
                assert_eq!(d.pi[j], 0.0);
            }
        }
        assert!((d.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.logits_intra.iter().chain(d.logits_inter.as_ref().unwrap()).all(|x| x.abs() <= 10.0));
        let single = DecoderConfig {
            dual_decoder: false,
            ..dec_cfg()
        };
        let d1 = decode_step(&s, &h, &st, &single, HEADS).unwrap();
        assert_eq!(d1.pi, d.p_intra);
        assert!(d1.p_stay.is_none());
    }

    fn greedy_single(inst: &PdpInstance, st: &ParamStore<f64>, start: usize) -> RolloutOutput {
        let mut tape = Tape::inference();
        let h = encoder::encode_batch(&mut tape, st, &enc_cfg(), &[inst]).unwrap();
        let keys = project_nodes(&mut tape, st, h, 1).unwrap();
        rollout_batch(&mut tape, &dec_cfg(), HEADS, &keys, inst.n(), &[start], ActionSource::Greedy).unwrap()
    }

    #[test]
    fn forced_single_pair() {
        let st = store::<f64>(6);
        let inst = gen_clustered(1, 0).unwrap();
        let out = greedy_single(&inst, &st, 1);
        assert_eq!(out.orders[0], vec![1, 2]);
        assert_eq!(out.log_probs[0], 0.0);
    }

    #[test]
    fn greedy_rollouts_are_deterministic_and_valid() {
        let st = store::<f64>(7);
        let inst = gen_clustered(5, 8).unwrap();
        let a = greedy_single(&inst, &st, 3);
        let b = greedy_single(&inst, &st, 3);
        assert_eq!(a.orders, b.orders);
        assert_eq!(a.orders[0][0], 3);
        assert!(validate_tour(&inst, &a.orders[0]).is_ok());
        assert!(a.log_probs[0] <= 0.0);
    }

    #[test]
    fn batched_rows_match_single_rows() {
        let st = store::<f64>(8);
        let insts = [gen_clustered(3, 1).unwrap(), gen_clustered(3, 2).unwrap()];
        let refs: Vec<&PdpInstance> = insts.iter().collect();
        let mut tape = Tape::inference();
        let h = encoder::encode_batch(&mut tape, &st, &enc_cfg(), &refs).unwrap();
        let keys = project_nodes(&mut tape, &st, h, 2).unwrap();
        let starts = [1, 2, 3, 1, 2, 3];
        let out = rollout_batch(&mut tape, &dec_cfg(), HEADS, &keys, 3, &starts, ActionSource::Greedy).unwrap();
        for (r, &s) in starts.iter().enumerate() {
            let single = greedy_single(&insts[r / 3], &st, s);
            assert_eq!(out.orders[r], single.orders[0]);
            assert!((out.log_probs[r] - single.log_probs[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_reproduces_sampled_log_probs() {
        let st = store::<f64>(9);
        let inst = gen_clustered(4, 5).unwrap();
        let mut tape = Tape::inference();
        let h = encoder::encode_batch(&mut tape, &st, &enc_cfg(), &[&inst]).unwrap();
        let keys = project_nodes(&mut tape, &st, h, 1).unwrap();
        let mut rngs: Vec<ChaCha8Rng> = (0..4).map(ChaCha8Rng::seed_from_u64).collect();
        let starts = [1, 2, 3, 4];
        let sampled = rollout_batch(&mut tape, &dec_cfg(), HEADS, &keys, 4, &starts, ActionSource::Sample(&mut rngs)).unwrap();
        let replay =
            rollout_batch(&mut tape, &dec_cfg(), HEADS, &keys, 4, &starts, ActionSource::Replay(&sampled.orders)).unwrap();
        assert_eq!(replay.orders, sampled.orders);
        assert_eq!(replay.log_probs, sampled.log_probs);
        let bad = vec![vec![1, 5, 2, 3, 4, 6, 7, 8]; 4];
        assert!(rollout_batch(&mut tape, &dec_cfg(), HEADS, &keys, 4, &starts, ActionSource::Replay(&bad)).is_err());
        assert!(rollout_batch(&mut tape, &dec_cfg(), HEADS, &keys, 4, &[5], ActionSource::Greedy).is_err());
    }

    #[test]
    fn gate_gradient_matches_finite_differences() {
        let mut st = store::<f64>(10);
        let inst = gen_clustered(3, 6).unwrap();
        let s = state(3, &[2, 1]);
        let h = embeddings(&inst, &st);
        let f = |tape: &mut Tape<f64>, st: &ParamStore<f64>| {
            let hv = tape.constant(h.clone());
            let keys = project_nodes(tape, st, hv, 1).unwrap();
            let vars = step_batch(tape, &dec_cfg(), HEADS, &keys, std::slice::from_ref(&s)).unwrap();
            tape.weighted_sum(vars.p_stay.unwrap(), &[1.0]).unwrap()
        };
        let mut tape = Tape::new();
        let root = f(&mut tape, &st);
        tape.backward(root, 1.0, &mut st).unwrap();
        let numeric = central_difference(
            &st,
            |p| {
                let mut t = Tape::inference();
                let r = f(&mut t, p);
                t.value(r).get(0, 0)
            },
            1e-4,
        );
        let report = compare(&st, &numeric, 1e-6);
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }
}
