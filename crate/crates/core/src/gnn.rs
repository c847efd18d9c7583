//! Shared message-passing encoder over the fully connected cluster graph.
//!
//! Each layer computes `h_i' = ReLU(W_self·h_i + W_neigh·mean_{j≠i} h_j)`.
//! Two layers map the 10 raw features to a 16-wide embedding, which is
//! appended to the raw features to form a node's 26-wide observation.

use rand::Rng;

use crate::autodiff::{matmul_t, neighbour_mean, relu, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::cluster::{raw_features, ClusterGraph, RawFeatures, RAW_FEATURES};
use crate::error::{Error, Result};
use crate::weights::{export_store, import_store, WeightsFile};

pub const EMBEDDING: usize = 16;
pub const HIDDEN: usize = 32;
pub const OBSERVATION: usize = RAW_FEATURES + EMBEDDING;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnnLayer {
    pub w_self: ParamId,
    pub w_neigh: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnEncoder {
    pub store: ParamStore,
    pub layers: Vec<GnnLayer>,
}

impl GnnEncoder {
    /// Default encoder: 10 → 32 → 16.
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::with_dims(&[RAW_FEATURES, HIDDEN, EMBEDDING], rng)
    }

    pub fn with_dims<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| GnnLayer {
                // both terms feed one unit, so scale as if fan-in were doubled
                w_self: store.add_uniform(format!("layer{k}.w_self"), &[d[1], d[0]], 2 * d[0], rng),
                w_neigh: store.add_uniform(format!("layer{k}.w_neigh"), &[d[1], d[0]], 2 * d[0], rng),
                d_in: d[0],
                d_out: d[1],
            })
            .collect();
        GnnEncoder { store, layers }
    }

    /// Builds an encoder from explicit `(w_self, w_neigh)` pairs.
    pub fn from_weights_pairs(pairs: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (k, (ws, wn)) in pairs.into_iter().enumerate() {
            store.add(format!("layer{k}.w_self"), ws);
            store.add(format!("layer{k}.w_neigh"), wn);
        }
        Self::bind(store)
    }

    fn bind(store: ParamStore) -> Result<Self> {
        let mut layers = Vec::new();
        let mut k = 0;
        while let (Some(w_self), Some(w_neigh)) = (store.id(&format!("layer{k}.w_self")), store.id(&format!("layer{k}.w_neigh"))) {
            let (a, b) = (store.value(w_self), store.value(w_neigh));
            if a.shape() != b.shape() || a.shape().len() != 2 {
                return Err(Error::Shape(format!("gnn layer {k}: {:?} vs {:?}", a.shape(), b.shape())));
            }
            layers.push(GnnLayer {
                w_self,
                w_neigh,
                d_in: a.cols(),
                d_out: a.rows(),
            });
            k += 1;
        }
        if layers.is_empty() || layers.len() * 2 != store.len() {
            return Err(Error::Format("gnn parameters are not a layer{k}.w_self/w_neigh chain".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out != pair[1].d_in {
                return Err(Error::Shape(format!("gnn widths {} -> {}", pair[0].d_out, pair[1].d_in)));
            }
        }
        Ok(GnnEncoder { store, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn export(&self, file: &mut WeightsFile) {
        export_store(file, "gnn.", &self.store);
    }

    pub fn import(file: &WeightsFile) -> Result<Self> {
        Self::bind(import_store(file, "gnn.")?)
    }

    /// Embeds stacked node features `h0: [rows×d_in]`; `segs[r]` names the
    /// graph row r belongs to, so several graphs can share one call.
    pub fn embed(&self, h0: &Tensor, segs: &[usize]) -> Result<Tensor> {
        embed_with(&self.store, &self.layers, h0, segs)
    }

    /// Tape version of [`embed`](Self::embed).
    pub fn embed_on_tape<'a>(&'a self, tape: &mut Tape<'a>, h0: NodeId, segs: &[usize]) -> Result<NodeId> {
        embed_on_tape_with(&self.store, &self.layers, tape, h0, segs)
    }
}

pub fn embed_with(store: &ParamStore, layers: &[GnnLayer], h0: &Tensor, segs: &[usize]) -> Result<Tensor> {
    if h0.cols() != layers[0].d_in {
        return Err(Error::Shape(format!("gnn input width {} != {}", h0.cols(), layers[0].d_in)));
    }
    if segs.len() != h0.rows() {
        return Err(Error::Shape("segment ids do not match rows".into()));
    }
    let mut h = h0.clone();
    for l in layers {
        let own = matmul_t(&h, store.value(l.w_self))?;
        let msg = matmul_t(&neighbour_mean(&h, segs), store.value(l.w_neigh))?;
        let data = own.data().iter().zip(msg.data()).map(|(a, b)| relu(a + b)).collect();
        h = Tensor::new(vec![h.rows(), l.d_out], data)?;
    }
    Ok(h)
}

pub fn embed_on_tape_with<'a>(store: &'a ParamStore, layers: &[GnnLayer], tape: &mut Tape<'a>, h0: NodeId, segs: &[usize]) -> Result<NodeId> {
    let mut h = h0;
    for l in layers {
        let ws = tape.param(store, l.w_self);
        let wn = tape.param(store, l.w_neigh);
        let own = tape.matmul_t(h, ws)?;
        let nm = tape.neighbour_mean(h, segs.to_vec())?;
        let msg = tape.matmul_t(nm, wn)?;
        let sum = tape.add(own, msg)?;
        h = tape.relu(sum);
    }
    Ok(h)
}

/// Raw feature matrix `[N×10]` in node order.
pub fn feature_matrix(g: &ClusterGraph) -> Tensor {
    let data = g.nodes.iter().flat_map(|n| raw_features(n, g).0).collect();
    Tensor::new(vec![g.len(), RAW_FEATURES], data).expect("features are finite")
}

/// Per-node embeddings `[N×16]`, rows in `g.nodes` order.
pub fn gnn_forward(g: &ClusterGraph, gnn: &GnnEncoder) -> Result<Tensor> {
    if g.is_empty() {
        return Err(Error::EmptyCluster);
    }
    gnn.embed(&feature_matrix(g), &vec![0; g.len()])
}

/// A node's local observation: raw features followed by its embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation(pub [f64; OBSERVATION]);

impl Observation {
    pub fn new(raw: &RawFeatures, embedding: &[f64]) -> Result<Self> {
        if embedding.len() != EMBEDDING {
            return Err(Error::Shape(format!("embedding width {} != {EMBEDDING}", embedding.len())));
        }
        let mut o = [0.0; OBSERVATION];
        o[..RAW_FEATURES].copy_from_slice(&raw.0);
        o[RAW_FEATURES..].copy_from_slice(embedding);
        Ok(Observation(o))
    }

    pub fn raw(&self) -> &[f64] {
        &self.0[..RAW_FEATURES]
    }

    pub fn embedding(&self) -> &[f64] {
        &self.0[RAW_FEATURES..]
    }
}

pub fn build_observation(node_id: usize, g: &ClusterGraph, embeddings: &Tensor) -> Result<Observation> {
    let idx = g.index_of(node_id).ok_or(Error::UnknownNode(node_id))?;
    if embeddings.rows() != g.len() {
        return Err(Error::Shape(format!("{} embeddings for {} nodes", embeddings.rows(), g.len())));
    }
    Observation::new(&raw_features(&g.nodes[idx], g), embeddings.row_slice(idx))
}

/// Observations for every node of `g`, in node order.
pub fn observe_all(g: &ClusterGraph, gnn: &GnnEncoder) -> Result<Vec<Observation>> {
    let e = gnn_forward(g, gnn)?;
    g.nodes.iter().map(|n| build_observation(n.node_id, g, &e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::cluster::{CostClass, NodeState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(n: usize) -> ClusterGraph {
        let mut g = ClusterGraph::new((0..n).map(|i| NodeState::new(i, 4000, 16384, CostClass::Standard)).collect());
        for (i, node) in g.nodes.iter_mut().enumerate() {
            node.cpu_allocated = 500 * i as u64;
            node.mem_allocated = 1000 * (i as u64 + 1);
            node.restarts_window = i as u32;
        }
        g.stress = 0.3;
        g
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let gnn = GnnEncoder::from_weights_pairs(vec![
            (Tensor::zeros(&[32, 10]), Tensor::zeros(&[32, 10])),
            (Tensor::zeros(&[16, 32]), Tensor::zeros(&[16, 32])),
        ])
        .unwrap();
        let e = gnn_forward(&graph(3), &gnn).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_nodes_identical_embeddings() {
        let gnn = GnnEncoder::new(&mut ChaCha8Rng::seed_from_u64(1));
        let g = ClusterGraph::new((0..4).map(|i| NodeState::new(i, 4000, 16384, CostClass::Standard)).collect());
        let e = gnn_forward(&g, &gnn).unwrap();
        for r in 1..4 {
            assert_eq!(e.row_slice(r), e.row_slice(0));
        }
    }

    #[test]
    fn one_layer_by_hand() {
        // 3 nodes, 2-wide features, K = 1
        let ws = Tensor::matrix(2, 2, vec![1.0, 0.5, -1.0, 2.0]).unwrap();
        let wn = Tensor::matrix(2, 2, vec![0.25, 0.0, 1.0, -0.5]).unwrap();
        let gnn = GnnEncoder::from_weights_pairs(vec![(ws, wn)]).unwrap();
        let h = Tensor::matrix(3, 2, vec![1.0, 2.0, 0.0, 1.0, 3.0, -1.0]).unwrap();
        let e = gnn.embed(&h, &[0, 0, 0]).unwrap();
        // node 0: self [1,2] → [2, 3]; neighbours mean [1.5, 0] → [0.375, 1.5]
        // node 1: self [0,1] → [0.5, 2]; neighbours mean [2, 0.5] → [0.5, 1.75]
        // node 2: self [3,-1] → [2.5, -5]; neighbours mean [0.5, 1.5] → [0.125, -0.25]
        let want = [2.375, 4.5, 1.0, 3.75, 2.625, 0.0];
        for (a, b) in e.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn single_node_gets_zero_message() {
        let ws = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let wn = Tensor::matrix(1, 1, vec![100.0]).unwrap();
        let gnn = GnnEncoder::from_weights_pairs(vec![(ws, wn)]).unwrap();
        let e = gnn.embed(&Tensor::matrix(1, 1, vec![0.5]).unwrap(), &[0]).unwrap();
        assert_eq!(e.data(), &[1.0]);
    }

    #[test]
    fn dimension_errors() {
        let gnn = GnnEncoder::new(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(gnn.embed(&Tensor::zeros(&[3, 9]), &[0, 0, 0]).is_err());
        let bad = GnnEncoder::from_weights_pairs(vec![
            (Tensor::zeros(&[32, 10]), Tensor::zeros(&[32, 10])),
            (Tensor::zeros(&[16, 31]), Tensor::zeros(&[16, 31])),
        ]);
        assert!(bad.is_err());
        assert!(matches!(gnn_forward(&ClusterGraph::new(vec![]), &gnn), Err(Error::EmptyCluster)));
    }

    #[test]
    fn observation_layout() {
        let raw = RawFeatures([0.1; RAW_FEATURES]);
        let o = Observation::new(&raw, &[0.2; EMBEDDING]).unwrap();
        assert_eq!(o.0.len(), 26);
        assert!(o.0[..10].iter().all(|&v| v == 0.1));
        assert!(o.0[10..].iter().all(|&v| v == 0.2));
        let zero = Observation::new(&RawFeatures([0.0; RAW_FEATURES]), &[0.0; EMBEDDING]).unwrap();
        assert!(zero.0.iter().all(|&v| v == 0.0));
        let g = graph(3);
        let gnn = GnnEncoder::new(&mut ChaCha8Rng::seed_from_u64(2));
        let e = gnn_forward(&g, &gnn).unwrap();
        assert!(matches!(build_observation(9, &g, &e), Err(Error::UnknownNode(9))));
        let obs = build_observation(2, &g, &e).unwrap();
        assert_eq!(obs.raw(), &raw_features(&g.nodes[2], &g).0);
        assert_eq!(obs.embedding(), e.row_slice(2));
    }

    #[test]
    fn permutation_equivariance() {
        let gnn = GnnEncoder::new(&mut ChaCha8Rng::seed_from_u64(5));
        let g = graph(4);
        let h = feature_matrix(&g);
        let e = gnn.embed(&h, &[0; 4]).unwrap();
        let perm = [2, 0, 3, 1];
        let hp = Tensor::new(vec![4, 10], perm.iter().flat_map(|&p| h.row_slice(p).to_vec()).collect()).unwrap();
        let ep = gnn.embed(&hp, &[0; 4]).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            for (a, b) in ep.row_slice(k).iter().zip(e.row_slice(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_depends_on_other_nodes() {
        let gnn = GnnEncoder::new(&mut ChaCha8Rng::seed_from_u64(6));
        let g = graph(3);
        let h = feature_matrix(&g);
        let e = gnn.embed(&h, &[0; 3]).unwrap();
        let mut moved = h.clone();
        for v in &mut moved.data_mut()[20..30] {
            *v = (*v + 0.5).min(1.0);
        }
        let e2 = gnn.embed(&moved, &[0; 3]).unwrap();
        let delta: f64 = e.row_slice(0).iter().zip(e2.row_slice(0)).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta > 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let gnn = GnnEncoder::new(&mut rng);
            let h0 = Tensor::new(vec![7, 10], (0..70).map(|_| rng.random::<f64>()).collect()).unwrap();
            let segs = vec![0, 0, 0, 1, 1, 1, 1];
            let target = Tensor::new(vec![7, 16], (0..112).map(|_| rng.random::<f64>()).collect()).unwrap();
            let layers = &gnn.layers;
            let loss = |s: &ParamStore| -> Result<f64> {
                let e = embed_with(s, layers, &h0, &segs)?;
                Ok(e.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / e.len() as f64)
            };
            let analytic = |s: &ParamStore| {
                let mut tape = Tape::new();
                let x = tape.input(h0.clone());
                let e = embed_on_tape_with(s, layers, &mut tape, x, &segs)?;
                let t = tape.input(target.clone());
                let l = tape.mse(e, t)?;
                tape.backward(l)
            };
            let err = grad_check(&gnn.store, 1e-6, loss, analytic).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
