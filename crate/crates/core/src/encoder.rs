//! Cluster-aware node encoder.
//!
//! Inputs `[x, y, onehot(role)]` are embedded linearly, the depot row is
//! replaced by a cross-attention readout over the customers, and `L` layers
//! each fuse a global and an intra-cluster attention branch before the usual
//! residual/normalization and feed-forward sublayers.
//!
//! Instances with the same `n` are encoded together: their node rows are
//! stacked (`instance * (2n + 1) + node`) and attention runs per instance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{NodeRole, PdpInstance};
use crate::numcore::ops::MASK_SENTINEL;
use crate::numcore::{ParamStore, Scalar, Tape, Tensor2, Var};

/// Width of the per-node input features.
pub const INPUT_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub cluster_attention: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_h: 128,
            layers: 6,
            heads: 8,
            ffn_hidden: 512,
            cluster_attention: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.heads == 0 || !self.d_h.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_h = {} is not divisible by {} heads", self.d_h, self.heads)));
        }
        if self.layers == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("encoder needs at least one layer and a non-empty FFN".into()));
        }
        Ok(())
    }
}

/// Node embeddings `H`, one row per node.
pub type NodeEmbeddings<T> = Tensor2<T>;

fn layer_prefix(l: usize) -> String {
    format!("encoder.layers.{l}")
}

/// Adds every encoder parameter to `store`. The cluster branch is created
/// even when disabled so that all ablations share one parameter layout.
pub fn register_params<T: Scalar>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_h;
    store.insert_uniform("encoder.embed.weight", INPUT_FEATURES, d, rng)?;
    store.insert("encoder.embed.bias", Tensor2::zeros(1, d))?;
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert_uniform(format!("encoder.depot.{w}"), d, d, rng)?;
    }
    for l in 0..cfg.layers {
        let p = layer_prefix(l);
        for branch in ["global", "cluster"] {
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert_uniform(format!("{p}.{branch}.{w}"), d, d, rng)?;
            }
        }
        store.insert_uniform(format!("{p}.combine.weight"), d, d, rng)?;
        store.insert(format!("{p}.combine.bias"), Tensor2::zeros(1, d))?;
        store.insert(format!("{p}.ln1.gain"), Tensor2::filled(1, d, T::one()))?;
        store.insert(format!("{p}.ln1.shift"), Tensor2::zeros(1, d))?;
        store.insert_uniform(format!("{p}.ffn.w1"), d, cfg.ffn_hidden, rng)?;
        store.insert(format!("{p}.ffn.b1"), Tensor2::zeros(1, cfg.ffn_hidden))?;
        store.insert_uniform(format!("{p}.ffn.w2"), cfg.ffn_hidden, d, rng)?;
        store.insert(format!("{p}.ffn.b2"), Tensor2::zeros(1, d))?;
        store.insert(format!("{p}.ln2.gain"), Tensor2::filled(1, d, T::one()))?;
        store.insert(format!("{p}.ln2.shift"), Tensor2::zeros(1, d))?;
    }
    Ok(())
}

/// `[x, y, onehot(role)]` per node.
pub fn input_features<T: Scalar>(inst: &PdpInstance) -> Tensor2<T> {
    let mut out = Tensor2::zeros(inst.len(), INPUT_FEATURES);
    for (i, (c, role)) in inst.coords().iter().zip(inst.roles()).enumerate() {
        let row = out.row_mut(i);
        row[0] = T::from_f64(c[0]);
        row[1] = T::from_f64(c[1]);
        row[2 + role.code() as usize] = T::one();
    }
    out
}

/// Additive mask allowing attention only between nodes of the same role.
pub fn cluster_mask<T: Scalar>(roles: &[NodeRole]) -> Tensor2<T> {
    let n = roles.len();
    let mut m = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if roles[i] != roles[j] {
                m.set(i, j, T::from_f64(MASK_SENTINEL));
            }
        }
    }
    m
}

fn param<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    Ok(tape.param(store, store.require(name)?))
}

fn check_batch(insts: &[&PdpInstance]) -> Result<usize> {
    let first = insts.first().ok_or_else(|| Error::InvalidSize("empty instance batch".into()))?;
    let n = first.n();
    if insts.iter().any(|i| i.n() != n) {
        return Err(Error::InvalidSize("instances in one batch must share n".into()));
    }
    Ok(n)
}

/// Initial embeddings of a batch, rows stacked per instance.
pub fn embed_batch<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, insts: &[&PdpInstance]) -> Result<Var> {
    check_batch(insts)?;
    let mut data = Vec::new();
    for inst in insts {
        data.extend_from_slice(input_features::<T>(inst).data());
    }
    let rows = data.len() / INPUT_FEATURES;
    let x = tape.constant(Tensor2::from_vec(rows, INPUT_FEATURES, data)?);
    let w = param(tape, store, "encoder.embed.weight")?;
    let b = param(tape, store, "encoder.embed.bias")?;
    tape.linear(x, w, Some(b))
}

/// Replaces each instance's depot row by multi-head attention from the
/// depot over that instance's customers. Customer rows pass through.
pub fn depot_attention_batch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    h: Var,
    groups: usize,
) -> Result<Var> {
    let nodes = tape.shape(h).0 / groups;
    let customers = nodes - 1;
    if customers == 0 {
        return Ok(h);
    }
    let depot_idx: Vec<usize> = (0..groups).map(|g| g * nodes).collect();
    let cust_idx: Vec<usize> = (0..groups).flat_map(|g| (1..nodes).map(move |i| g * nodes + i)).collect();
    let depot = tape.gather_rows(h, &depot_idx)?;
    let cust = tape.gather_rows(h, &cust_idx)?;
    let (wq, wk, wv, wo) = (
        param(tape, store, "encoder.depot.wq")?,
        param(tape, store, "encoder.depot.wk")?,
        param(tape, store, "encoder.depot.wv")?,
        param(tape, store, "encoder.depot.wo")?,
    );
    let q = tape.matmul(depot, wq)?;
    let k = tape.matmul(cust, wk)?;
    let v = tape.matmul(cust, wv)?;
    let att = tape.attention_grouped(q, k, v, cfg.heads, groups, None)?;
    let new_depot = tape.matmul(att, wo)?;
    let stacked = tape.concat_rows(&[new_depot, cust])?;
    let order: Vec<usize> = (0..groups)
        .flat_map(|g| std::iter::once(g).chain((0..customers).map(move |i| groups + g * customers + i)))
        .collect();
    tape.gather_rows(stacked, &order)
}

fn attention_branch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    h: Var,
    heads: usize,
    groups: usize,
    mask: Option<&Tensor2<T>>,
) -> Result<Var> {
    let w = |tape: &mut Tape<T>, name: &str| param(tape, store, &format!("{prefix}.{name}"));
    let (wq, wk, wv, wo) = (w(tape, "wq")?, w(tape, "wk")?, w(tape, "wv")?, w(tape, "wo")?);
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    let att = tape.attention_grouped(q, k, v, heads, groups, mask)?;
    tape.matmul(att, wo)
}

/// One dual-attention layer. `mask` is the cluster mask repeated for every
/// instance in the batch (`rows x nodes-per-instance`).
pub fn layer_batch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    layer: usize,
    h: Var,
    groups: usize,
    mask: &Tensor2<T>,
) -> Result<Var> {
    let p = layer_prefix(layer);
    let mut fused = attention_branch(tape, store, &format!("{p}.global"), h, cfg.heads, groups, None)?;
    if cfg.cluster_attention {
        let hc = attention_branch(tape, store, &format!("{p}.cluster"), h, cfg.heads, groups, Some(mask))?;
        fused = tape.add(fused, hc)?;
    }
    let w = |tape: &mut Tape<T>, name: &str| param(tape, store, &format!("{p}.{name}"));
    let (cw, cb) = (w(tape, "combine.weight")?, w(tape, "combine.bias")?);
    let combined = tape.linear(fused, cw, Some(cb))?;
    let res = tape.add(h, combined)?;
    let (g1, s1) = (w(tape, "ln1.gain")?, w(tape, "ln1.shift")?);
    let h1 = tape.layer_norm(res, g1, s1)?;
    let (w1, b1, w2, b2) = (w(tape, "ffn.w1")?, w(tape, "ffn.b1")?, w(tape, "ffn.w2")?, w(tape, "ffn.b2")?);
    let hidden = tape.linear(h1, w1, Some(b1))?;
    let hidden = tape.relu(hidden);
    let ff = tape.linear(hidden, w2, Some(b2))?;
    let res = tape.add(h1, ff)?;
    let (g2, s2) = (w(tape, "ln2.gain")?, w(tape, "ln2.shift")?);
    tape.layer_norm(res, g2, s2)
}

/// Cluster mask of one instance tiled for `groups` stacked instances.
pub fn batch_mask<T: Scalar>(roles: &[NodeRole], groups: usize) -> Tensor2<T> {
    let single = cluster_mask::<T>(roles);
    let mut data = Vec::with_capacity(groups * single.len());
    for _ in 0..groups {
        data.extend_from_slice(single.data());
    }
    Tensor2::from_vec(groups * roles.len(), roles.len(), data).expect("tiled mask")
}

/// Full encoder over a batch of equally sized instances; returns the stacked
/// final embeddings.
pub fn encode_batch<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    insts: &[&PdpInstance],
) -> Result<Var> {
    cfg.validate()?;
    let groups = insts.len();
    let h0 = embed_batch(tape, store, insts)?;
    let mut h = depot_attention_batch(tape, store, cfg, h0, groups)?;
    let mask = batch_mask::<T>(insts[0].roles(), groups);
    for l in 0..cfg.layers {
        h = layer_batch(tape, store, cfg, l, h, groups, &mask)?;
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Single-instance evaluation

pub fn embed_inputs<T: Scalar>(inst: &PdpInstance, store: &ParamStore<T>) -> Result<NodeEmbeddings<T>> {
    let mut tape = Tape::inference();
    let h = embed_batch(&mut tape, store, &[inst])?;
    Ok(tape.value(h).clone())
}

pub fn depot_cross_attention<T: Scalar>(
    h0: &NodeEmbeddings<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
) -> Result<NodeEmbeddings<T>> {
    let mut tape = Tape::inference();
    let h = tape.constant(h0.clone());
    let out = depot_attention_batch(&mut tape, store, cfg, h, 1)?;
    Ok(tape.value(out).clone())
}

pub fn encoder_layer<T: Scalar>(
    h: &NodeEmbeddings<T>,
    mask: &Tensor2<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    layer: usize,
) -> Result<NodeEmbeddings<T>> {
    let mut tape = Tape::inference();
    let x = tape.constant(h.clone());
    let out = layer_batch(&mut tape, store, cfg, layer, x, 1, mask)?;
    Ok(tape.value(out).clone())
}

pub fn encode<T: Scalar>(inst: &PdpInstance, store: &ParamStore<T>, cfg: &EncoderConfig) -> Result<NodeEmbeddings<T>> {
    let mut tape = Tape::inference();
    let h = encode_batch(&mut tape, store, cfg, &[inst])?;
    Ok(tape.value(h).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{gen_clustered, gen_uniform};
    use crate::numcore::gradcheck::{central_difference, compare};
    use crate::numcore::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            d_h: 16,
            layers: 2,
            heads: 2,
            ffn_hidden: 32,
            cluster_attention: true,
        }
    }

    fn store<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> ParamStore<T> {
        let mut st = ParamStore::new();
        register_params(&mut st, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        st
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig { heads: 3, ..small() }.validate().is_err());
        assert!(EncoderConfig { layers: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn default_shape_and_finiteness() {
        let cfg = EncoderConfig::default();
        let st = store::<f32>(&cfg, 1);
        let inst = gen_clustered(5, 3).unwrap();
        let h = encode(&inst, &st, &cfg).unwrap();
        assert_eq!(h.shape(), (11, 128));
        assert!(h.is_finite());
        assert_eq!(encode(&inst, &st, &cfg).unwrap(), h);
    }

    #[test]
    fn embedding_rows_follow_inputs() {
        let cfg = small();
        let mut st = store::<f64>(&cfg, 2);
        let inst = PdpInstance::from_coords(
            vec![[0.5, 0.5], [0.1, 0.2], [0.1, 0.2], [0.9, 0.9], [0.8, 0.7]],
            crate::instances::Distribution::Uniform,
            0,
        )
        .unwrap();
        let h = embed_inputs(&inst, &st).unwrap();
        assert_eq!(h.shape(), (5, 16));
        assert_eq!(h.row(1), h.row(2));
        let id = st.require("encoder.embed.weight").unwrap();
        *st.value_mut(id) = Tensor2::zeros(INPUT_FEATURES, 16);
        assert_eq!(embed_inputs(&inst, &st).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn cluster_mask_structure() {
        let inst = gen_uniform(3, 0).unwrap();
        let m = cluster_mask::<f64>(inst.roles());
        for i in 0..7 {
            assert_eq!(m.get(i, i), 0.0);
            for j in 0..7 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        assert!((1..7).all(|j| m.get(0, j) == MASK_SENTINEL));
        assert_eq!(m.get(1, 3), 0.0);
        assert_eq!(m.get(1, 4), MASK_SENTINEL);
    }

    #[test]
    fn depot_attention_identity_weights() {
        let cfg = small();
        let mut st = store::<f64>(&cfg, 3);
        for w in ["wq", "wk", "wv", "wo"] {
            let id = st.require(&format!("encoder.depot.{w}")).unwrap();
            *st.value_mut(id) = Tensor2::identity(16);
        }
        let mut h0 = Tensor2::zeros(5, 16);
        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.3).collect();
        for r in 1..5 {
            h0.row_mut(r).copy_from_slice(&v);
        }
        h0.row_mut(0).iter_mut().for_each(|x| *x = 0.7);
        let out = depot_cross_attention(&h0, &st, &cfg).unwrap();
        assert_eq!(out.shape(), h0.shape());
        for (a, b) in out.row(0).iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.slice_rows(1, 5), h0.slice_rows(1, 5));
        let lone = Tensor2::filled(1, 16, 0.5);
        assert_eq!(depot_cross_attention(&lone, &st, &cfg).unwrap(), lone);
    }

    #[test]
    fn cluster_branch_blocks_cross_role_attention() {
        let cfg = small();
        let st = store::<f64>(&cfg, 4);
        let inst = gen_clustered(3, 5).unwrap();
        let mut tape = Tape::new();
        let h = embed_batch(&mut tape, &st, &[&inst]).unwrap();
        let mask = cluster_mask::<f64>(inst.roles());
        let p = |t: &mut Tape<f64>, n: &str| t.param(&st, st.require(n).unwrap());
        let q = p(&mut tape, "encoder.layers.0.cluster.wq");
        let k = p(&mut tape, "encoder.layers.0.cluster.wk");
        let (q, k) = (tape.matmul(h, q).unwrap(), tape.matmul(h, k).unwrap());
        let att = tape.attention(q, k, k, 2, Some(&mask)).unwrap();
        let w = tape.attention_weights(att).unwrap();
        let nodes = inst.len();
        for head in 0..2 {
            for i in 0..nodes {
                for j in 0..nodes {
                    if inst.role(i) != inst.role(j) {
                        assert_eq!(w[(head * nodes + i) * nodes + j], 0.0);
                    }
                }
            }
        }
    }

    /// Residual attention layer written directly with the eager kernels.
    fn vanilla_layer(h: &Tensor2<f64>, st: &ParamStore<f64>, heads: usize) -> Tensor2<f64> {
        let w = |n: &str| st.by_name(&format!("encoder.layers.0.{n}")).unwrap();
        let proj = |n: &str| h.matmul(w(n)).unwrap();
        let att = ops::mha(&proj("global.wq"), &proj("global.wk"), &proj("global.wv"), heads, None).unwrap();
        let att = att.matmul(w("global.wo")).unwrap();
        let mut res = ops::linear(&att, w("combine.weight"), Some(w("combine.bias").data())).unwrap();
        res.add_assign(h);
        let h1 = ops::layer_norm(&res, w("ln1.gain").data(), w("ln1.shift").data()).unwrap();
        let hidden = ops::linear(&h1, w("ffn.w1"), Some(w("ffn.b1").data())).unwrap().map(|x| x.max(0.0));
        let mut res = ops::linear(&hidden, w("ffn.w2"), Some(w("ffn.b2").data())).unwrap();
        res.add_assign(&h1);
        ops::layer_norm(&res, w("ln2.gain").data(), w("ln2.shift").data()).unwrap()
    }

    #[test]
    fn disabled_cluster_branch_is_a_vanilla_layer() {
        let cfg = EncoderConfig {
            cluster_attention: false,
            ..small()
        };
        let st = store::<f64>(&cfg, 6);
        let inst = gen_clustered(4, 1).unwrap();
        let h = embed_inputs(&inst, &st).unwrap();
        let mask = cluster_mask::<f64>(inst.roles());
        let ours = encoder_layer(&h, &mask, &st, &cfg, 0).unwrap();
        let reference = vanilla_layer(&h, &st, cfg.heads);
        for (a, b) in ours.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let with_cluster = encoder_layer(&h, &mask, &st, &small(), 0).unwrap();
        assert_ne!(with_cluster, ours);
    }

    #[test]
    fn batched_encoding_matches_single() {
        let cfg = small();
        let st = store::<f64>(&cfg, 7);
        let insts = [gen_clustered(3, 1).unwrap(), gen_uniform(3, 2).unwrap()];
        let mut tape = Tape::inference();
        let refs: Vec<&PdpInstance> = insts.iter().collect();
        let h = encode_batch(&mut tape, &st, &cfg, &refs).unwrap();
        for (g, inst) in insts.iter().enumerate() {
            let single = encode(inst, &st, &cfg).unwrap();
            let part = tape.value(h).slice_rows(g * 7, g * 7 + 7);
            for (a, b) in single.data().iter().zip(part.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let mixed = [gen_uniform(2, 0).unwrap(), gen_uniform(3, 0).unwrap()];
        let refs: Vec<&PdpInstance> = mixed.iter().collect();
        assert!(encode_batch(&mut Tape::<f64>::inference(), &st, &cfg, &refs).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = EncoderConfig {
            d_h: 32,
            layers: 3,
            heads: 4,
            ffn_hidden: 64,
            cluster_attention: true,
        };
        let st = store::<f32>(&cfg, 8);
        let inst = gen_clustered(6, 11).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let moved = inst.permute_pairs(&perm).unwrap();
        let (h, hp) = (encode(&inst, &st, &cfg).unwrap(), encode(&moved, &st, &cfg).unwrap());
        let n = inst.n();
        let mut max_diff = 0.0f32;
        for k in 0..n {
            for (new_row, old_row) in [(1 + k, 1 + perm[k]), (1 + n + k, 1 + n + perm[k])] {
                for (a, b) in hp.row(new_row).iter().zip(h.row(old_row)) {
                    max_diff = max_diff.max((a - b).abs());
                }
            }
        }
        for (a, b) in hp.row(0).iter().zip(h.row(0)) {
            max_diff = max_diff.max((a - b).abs());
        }
        assert!(max_diff < 1e-5, "max deviation {max_diff}");
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let cfg = EncoderConfig {
            d_h: 16,
            layers: 1,
            heads: 2,
            ffn_hidden: 32,
            cluster_attention: true,
        };
        let mut st = store::<f64>(&cfg, 9);
        let inst = gen_clustered(2, 4).unwrap();
        let weights: Vec<f64> = (0..5 * 16).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let loss = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let h = encode_batch(tape, s, &cfg, &[&inst]).unwrap();
            let t = tape.tanh(h);
            tape.weighted_sum(t, &weights).unwrap()
        };
        let mut tape = Tape::new();
        let root = loss(&mut tape, &st);
        tape.backward(root, 1.0, &mut st).unwrap();
        let numeric = central_difference(
            &st,
            |s| {
                let mut t = Tape::inference();
                let r = loss(&mut t, s);
                t.value(r).get(0, 0)
            },
            1e-4,
        );
        let report = compare(&st, &numeric, 1e-6);
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
