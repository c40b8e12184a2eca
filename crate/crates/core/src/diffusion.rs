//! Graph diffusion of entity embeddings by stacked CONVOLVE layers.
//!
//! One layer, for every entity `v` at once:
//!
//! ```text
//! h_v   = AGG(f_u for u in N(v))          (zero when N(v) is empty)
//! la_v  = ReLU(W1 h_v + b1)
//! f_v   = ReLU(W2 [f_in_v, la_v] + b2)
//! f*_v  = f_v / |f_v|                     (zero when |f_v| < 1e-12)
//! ```
//!
//! Layer `k` aggregates the outputs of layer `k - 1`; layer 0 is the
//! inherent table. The self term is always the inherent feature.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Aggregator, NodeId, Tape};
use crate::error::DiffError;
use crate::graph::InteractionGraph;
use crate::params::{conv_name, ModelParams, INHERENT};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionParams {
    pub layers: Vec<ConvLayer>,
}

impl DiffusionParams {
    pub fn from_model(params: &ModelParams, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|k| ConvLayer {
                w1: params.tensor(&conv_name(k, "w1")).clone(),
                b1: params.tensor(&conv_name(k, "b1")).clone(),
                w2: params.tensor(&conv_name(k, "w2")).clone(),
                b2: params.tensor(&conv_name(k, "b2")).clone(),
            })
            .collect();
        DiffusionParams { layers }
    }
}

/// Inherent and post-diffusion entity features, both `|V| x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub inherent: Tensor,
    pub diffused: Tensor,
}

/// Per-hop neighbor lists, one entry per entity.
pub type HopSamples = Vec<Arc<Vec<Vec<usize>>>>;

/// Samples `depth` independent neighbor lists (one per hop).
pub fn sample_hops<R: Rng + ?Sized>(
    graph: &InteractionGraph,
    depth: usize,
    cap: usize,
    rng: &mut R,
) -> HopSamples {
    (0..depth)
        .map(|_| Arc::new(graph.sample_all(cap, rng)))
        .collect()
}

/// Full, unsampled neighborhoods for every hop.
pub fn full_hops(graph: &InteractionGraph, depth: usize) -> HopSamples {
    let all: Vec<Vec<usize>> = (0..graph.entity_count())
        .map(|e| graph.neighbors(e).to_vec())
        .collect();
    let shared = Arc::new(all);
    (0..depth).map(|_| shared.clone()).collect()
}

/// Tape nodes for one convolution layer's weights.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl LayerNodes {
    /// Binds layer `k` of `params` as keyed leaves.
    pub fn bind(tape: &mut Tape, params: &ModelParams, k: usize) -> Self {
        let mut leaf = |part: &str| {
            let name = conv_name(k, part);
            tape.param(name.clone(), params.tensor(&name).clone())
        };
        LayerNodes {
            w1: leaf("w1"),
            b1: leaf("b1"),
            w2: leaf("w2"),
            b2: leaf("b2"),
        }
    }

    fn bind_values(tape: &mut Tape, layer: &ConvLayer, k: usize) -> Self {
        LayerNodes {
            w1: tape.param(conv_name(k, "w1"), layer.w1.clone()),
            b1: tape.param(conv_name(k, "b1"), layer.b1.clone()),
            w2: tape.param(conv_name(k, "w2"), layer.w2.clone()),
            b2: tape.param(conv_name(k, "b2"), layer.b2.clone()),
        }
    }
}

/// One convolution layer applied to all rows. `prev` supplies neighbor
/// features, `inherent` supplies the self term.
pub fn convolve_layer(
    tape: &mut Tape,
    inherent: NodeId,
    prev: NodeId,
    layer: &LayerNodes,
    neighbors: Arc<Vec<Vec<usize>>>,
    aggregator: Aggregator,
) -> Result<NodeId, DiffError> {
    let h = tape.aggregate(prev, neighbors, aggregator)?;
    let la = tape.linear(h, layer.w1)?;
    let la = tape.add_bias(la, layer.b1)?;
    let la = tape.relu(la)?;
    let cat = tape.concat(&[inherent, la], 1)?;
    let f = tape.linear(cat, layer.w2)?;
    let f = tape.add_bias(f, layer.b2)?;
    let f = tape.relu(f)?;
    tape.l2_normalize_rows(f)
}

/// Stacks `layers.len()` convolutions over the sampled hops.
pub fn diffuse_on_tape(
    tape: &mut Tape,
    inherent: NodeId,
    layers: &[LayerNodes],
    hops: &HopSamples,
    aggregator: Aggregator,
) -> Result<NodeId, DiffError> {
    assert!(!layers.is_empty(), "diffusion needs at least one layer");
    assert!(hops.len() >= layers.len(), "one neighbor sample per hop");
    let mut prev = inherent;
    for (layer, nbrs) in layers.iter().zip(hops) {
        prev = convolve_layer(tape, inherent, prev, layer, nbrs.clone(), aggregator)?;
    }
    Ok(prev)
}

/// The whole θ1 forward pass on a tape, with the inherent table and all
/// layer weights bound as keyed leaves. Returns the diffused-table node.
pub fn bind_and_diffuse(
    tape: &mut Tape,
    params: &ModelParams,
    depth: usize,
    hops: &HopSamples,
    aggregator: Aggregator,
) -> Result<NodeId, DiffError> {
    let inherent = tape.param(INHERENT, params.tensor(INHERENT).clone());
    let layers: Vec<LayerNodes> = (0..depth)
        .map(|k| LayerNodes::bind(tape, params, k))
        .collect();
    diffuse_on_tape(tape, inherent, &layers, hops, aggregator)
}

/// A single CONVOLVE for one entity.
pub fn convolve(
    f_in: &[f64],
    neighbor_feats: &[Vec<f64>],
    layer: &ConvLayer,
    aggregator: Aggregator,
) -> Result<Vec<f64>, DiffError> {
    let d = f_in.len();
    let mut rows = vec![f_in.to_vec()];
    rows.extend(neighbor_feats.iter().cloned());
    if rows.iter().any(|r| r.len() != d) {
        return Err(DiffError::Shape {
            node: 0,
            op: "convolve",
            detail: "feature dimensions differ".into(),
        });
    }
    let mut tape = Tape::new();
    let all = tape.constant(Tensor::from_rows(&rows));
    let me = tape.lookup(all, vec![0])?;
    let neighbors = Arc::new(vec![(1..rows.len()).collect::<Vec<_>>()]);
    let nodes = LayerNodes::bind_values(&mut tape, layer, 0);
    let out = convolve_layer(&mut tape, me, all, &nodes, neighbors, aggregator)?;
    Ok(tape.value(out).data().to_vec())
}

/// Diffuses every entity through `depth` layers using full neighborhoods.
pub fn diffuse_all(
    graph: &InteractionGraph,
    inherent: &Tensor,
    params: &DiffusionParams,
    depth: usize,
    aggregator: Aggregator,
) -> Result<EmbeddingTable, DiffError> {
    diffuse_with_hops(inherent, params, &full_hops(graph, depth), aggregator)
}

/// As [`diffuse_all`] with pre-sampled neighbor lists.
pub fn diffuse_with_hops(
    inherent: &Tensor,
    params: &DiffusionParams,
    hops: &HopSamples,
    aggregator: Aggregator,
) -> Result<EmbeddingTable, DiffError> {
    let depth = hops.len();
    assert!(depth >= 1, "depth must be at least 1");
    assert!(params.layers.len() >= depth, "not enough diffusion layers");
    let mut tape = Tape::new();
    let f_in = tape.constant(inherent.clone());
    let layers: Vec<LayerNodes> = params.layers[..depth]
        .iter()
        .enumerate()
        .map(|(k, l)| LayerNodes::bind_values(&mut tape, l, k))
        .collect();
    let out = diffuse_on_tape(&mut tape, f_in, &layers, hops, aggregator)?;
    Ok(EmbeddingTable {
        inherent: inherent.clone(),
        diffused: tape.value(out).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn layer(d: usize, seed_label: &str) -> ConvLayer {
        use rand::Rng;
        let mut rng = seed::rng(11, seed_label);
        let mut m = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        ConvLayer {
            w1: m(d, d),
            b1: m(1, d),
            w2: m(d, 2 * d),
            b2: m(1, d),
        }
    }

    // Scalar-loop reference of one CONVOLVE with mean aggregation.
    fn reference_convolve(f_in: &[f64], nbrs: &[Vec<f64>], l: &ConvLayer) -> Vec<f64> {
        let d = f_in.len();
        let mut h = vec![0.0; d];
        for n in nbrs {
            for j in 0..d {
                h[j] += n[j];
            }
        }
        if !nbrs.is_empty() {
            for v in &mut h {
                *v /= nbrs.len() as f64;
            }
        }
        let mut la = vec![0.0; d];
        for i in 0..d {
            let mut s = l.b1.data()[i];
            for j in 0..d {
                s += l.w1.get(i, j) * h[j];
            }
            la[i] = s.max(0.0);
        }
        let cat: Vec<f64> = f_in.iter().chain(&la).copied().collect();
        let mut f = vec![0.0; d];
        for i in 0..d {
            let mut s = l.b2.data()[i];
            for j in 0..2 * d {
                s += l.w2.get(i, j) * cat[j];
            }
            f[i] = s.max(0.0);
        }
        let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            vec![0.0; d]
        } else {
            f.iter().map(|x| x / norm).collect()
        }
    }

    #[test]
    fn output_is_unit_norm() {
        let l = layer(4, "unit");
        let out = convolve(&[0.3, -0.2, 0.9, 0.1], &[vec![0.5, 0.1, -0.3, 0.7]], &l, Aggregator::Mean).unwrap();
        let n: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_weights_give_zero_vector() {
        let d = 3;
        let l = ConvLayer {
            w1: Tensor::zeros(&[d, d]),
            b1: Tensor::zeros(&[1, d]),
            w2: Tensor::zeros(&[d, 2 * d]),
            b2: Tensor::zeros(&[1, d]),
        };
        let out = convolve(&[1.0, 2.0, 3.0], &[vec![1.0, 1.0, 1.0]], &l, Aggregator::Mean).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn mean_of_two_neighbors_feeds_w1() {
        // Identity-like weights: W1 = I, W2 = [0 | I], zero biases, so the
        // output is normalize(ReLU(mean(neighbors))).
        let d = 2;
        let l = ConvLayer {
            w1: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            b1: Tensor::zeros(&[1, d]),
            w2: Tensor::matrix(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
            b2: Tensor::zeros(&[1, d]),
        };
        let nbrs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = convolve(&[0.7, -0.1], &nbrs, &l, Aggregator::Mean).unwrap();
        let s = 0.5f64.sqrt();
        assert!((out[0] - s).abs() < 1e-15 && (out[1] - s).abs() < 1e-15);
        assert_eq!(out, reference_convolve(&[0.7, -0.1], &nbrs, &l));
    }

    #[test]
    fn matches_scalar_reference() {
        let d = 5;
        let l = layer(d, "ref");
        let mut rng = seed::rng(5, "feats");
        use rand::Rng;
        let mut v = || (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let f_in = v();
        let nbrs = vec![v(), v(), v()];
        let got = convolve(&f_in, &nbrs, &l, Aggregator::Mean).unwrap();
        let want = reference_convolve(&f_in, &nbrs, &l);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let alone = convolve(&f_in, &[], &l, Aggregator::Mean).unwrap();
        let want = reference_convolve(&f_in, &[], &l);
        for (a, b) in alone.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_one_is_one_convolve_per_node() {
        let d = 3;
        let g = InteractionGraph::build(1, 1, &[(0, 0)]).unwrap();
        let inherent = Tensor::matrix(2, d, vec![0.2, -0.5, 0.9, 0.4, 0.4, -0.1]);
        let params = DiffusionParams {
            layers: vec![layer(d, "d1")],
        };
        let table = diffuse_all(&g, &inherent, &params, 1, Aggregator::Mean).unwrap();
        for e in 0..2 {
            let other = 1 - e;
            let want = convolve(
                inherent.row_slice(e),
                &[inherent.row_slice(other).to_vec()],
                &params.layers[0],
                Aggregator::Mean,
            )
            .unwrap();
            assert_eq!(table.diffused.row_slice(e), want.as_slice());
        }
    }

    #[test]
    fn depth_two_path_graph_matches_unrolled() {
        // Path u0 - i0 - u1 - i1 (users 0,1; items 0,1 at entities 2,3).
        let d = 3;
        let g = InteractionGraph::build(2, 2, &[(0, 0), (1, 0), (1, 1)]).unwrap();
        let mut rng = seed::rng(2, "path");
        use rand::Rng;
        let inherent = Tensor::matrix(4, d, (0..4 * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let params = DiffusionParams {
            layers: vec![layer(d, "p0"), layer(d, "p1")],
        };
        let table = diffuse_all(&g, &inherent, &params, 2, Aggregator::Mean).unwrap();

        let rows: Vec<Vec<f64>> = (0..4).map(|e| inherent.row_slice(e).to_vec()).collect();
        let layer1: Vec<Vec<f64>> = (0..4)
            .map(|e| {
                let nb: Vec<Vec<f64>> = g.neighbors(e).iter().map(|&n| rows[n].clone()).collect();
                reference_convolve(&rows[e], &nb, &params.layers[0])
            })
            .collect();
        for e in 0..4 {
            let nb: Vec<Vec<f64>> = g.neighbors(e).iter().map(|&n| layer1[n].clone()).collect();
            let want = reference_convolve(&rows[e], &nb, &params.layers[1]);
            for (a, b) in table.diffused.row_slice(e).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_entity_uses_only_inherent_feature() {
        let d = 3;
        let g = InteractionGraph::build(1, 2, &[(0, 0)]).unwrap();
        let inherent = Tensor::matrix(3, d, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, -0.3, 0.8, 0.2]);
        let params = DiffusionParams {
            layers: vec![layer(d, "i0"), layer(d, "i1")],
        };
        let table = diffuse_all(&g, &inherent, &params, 2, Aggregator::Mean).unwrap();
        let want = reference_convolve(inherent.row_slice(2), &[], &params.layers[1]);
        for (a, b) in table.diffused.row_slice(2).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
