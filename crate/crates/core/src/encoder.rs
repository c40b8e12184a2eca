//! Masked bidirectional self-attention over a behavior sequence.
//!
//! For query position `n` and key position `m`:
//!
//! ```text
//! cor(m, n) = W3^T sigmoid(W4 i_m + W5 i_n) + M[m][n]
//! att(., n) = softmax over m of the finite cor(m, n)
//! out_n     = sum_m att(m, n) * i_m
//! ```
//!
//! The forward mask admits `m <= n`, the backward mask `m >= n`; both keep
//! the diagonal so every position has at least one admissible key.

use std::sync::Arc;

use crate::autodiff::{NodeId, Tape};
use crate::error::DiffError;
use crate::params::{
    ModelParams, ScorerKind, ATT_BW_W3, ATT_BW_W4, ATT_BW_W5, ATT_W3, ATT_W4, ATT_W5, ENC_B3,
    ENC_W6, MLP_HIDDEN_B, MLP_HIDDEN_W, MLP_OUT_B, MLP_OUT_W,
};
use crate::tensor::Tensor;

/// Forward and backward position-bias matrices, indexed `[m][n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionBias {
    pub forward: Tensor,
    pub backward: Tensor,
}

pub fn position_bias(len: usize) -> PositionBias {
    assert!(len >= 1, "sequence length must be at least 1");
    let mut fw = Tensor::filled(&[len, len], f64::NEG_INFINITY);
    let mut bw = fw.clone();
    for m in 0..len {
        for n in 0..len {
            let decay = -((m.abs_diff(n)) as f64).exp();
            if m <= n {
                fw.set(m, n, decay);
            }
            if m >= n {
                bw.set(m, n, decay);
            }
        }
    }
    PositionBias {
        forward: fw,
        backward: bw,
    }
}

impl PositionBias {
    /// Biases laid out as softmax rows: row `n`, column `m`.
    pub fn as_rows(&self) -> (Arc<Tensor>, Arc<Tensor>) {
        (
            Arc::new(self.forward.transpose()),
            Arc::new(self.backward.transpose()),
        )
    }
}

/// Attention weights for one direction.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub w3: NodeId,
    pub w4: NodeId,
    pub w5: NodeId,
}

/// All θ2 tensors bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SeqNodes {
    pub forward: AttentionNodes,
    pub backward: AttentionNodes,
    pub w6: NodeId,
    pub b3: NodeId,
    pub mlp: Option<MlpNodes>,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpNodes {
    pub hidden_w: NodeId,
    pub hidden_b: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

impl SeqNodes {
    /// Binds the θ2 tensors present in `params` as keyed leaves.
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut leaf = |name: &str| tape.param(name, params.tensor(name).clone());
        let forward = AttentionNodes {
            w3: leaf(ATT_W3),
            w4: leaf(ATT_W4),
            w5: leaf(ATT_W5),
        };
        let backward = if params.contains(ATT_BW_W3) {
            AttentionNodes {
                w3: leaf(ATT_BW_W3),
                w4: leaf(ATT_BW_W4),
                w5: leaf(ATT_BW_W5),
            }
        } else {
            forward
        };
        let w6 = leaf(ENC_W6);
        let b3 = leaf(ENC_B3);
        let mlp = params.contains(MLP_HIDDEN_W).then(|| MlpNodes {
            hidden_w: leaf(MLP_HIDDEN_W),
            hidden_b: leaf(MLP_HIDDEN_B),
            out_w: leaf(MLP_OUT_W),
            out_b: leaf(MLP_OUT_B),
        });
        SeqNodes {
            forward,
            backward,
            w6,
            b3,
            mlp,
        }
    }
}

/// One direction of masked self-attention. `x` is `T x d`; `bias_rows` is
/// the position bias transposed to `[n][m]`. Returns `(output, attention)`,
/// where attention row `n` holds `att(m, n)` over `m`.
pub fn attend(
    tape: &mut Tape,
    x: NodeId,
    w: &AttentionNodes,
    bias_rows: Arc<Tensor>,
) -> Result<(NodeId, NodeId), DiffError> {
    let t = tape.value(x).rows();
    let a = tape.linear(x, w.w4)?;
    let b = tape.linear(x, w.w5)?;
    let key_idx: Vec<usize> = (0..t).flat_map(|_| 0..t).collect();
    let query_idx: Vec<usize> = (0..t).flat_map(|n| std::iter::repeat(n).take(t)).collect();
    let am = tape.lookup(a, key_idx)?;
    let bn = tape.lookup(b, query_idx)?;
    let pre = tape.add(am, bn)?;
    let act = tape.sigmoid(pre)?;
    let cor = tape.matmul(act, w.w3)?;
    let logits = tape.reshape(cor, vec![t, t])?;
    let att = tape.masked_softmax_rows(logits, Some(bias_rows))?;
    let out = tape.matmul(att, x)?;
    Ok((out, att))
}

/// `s_u = ReLU(W6 [mean(fw), mean(bw)] + b3)`, shape `1 x d`.
pub fn encode_preference_nodes(
    tape: &mut Tape,
    fw: NodeId,
    bw: NodeId,
    w6: NodeId,
    b3: NodeId,
) -> Result<NodeId, DiffError> {
    let mf = tape.mean_axis(fw, 0)?;
    let mb = tape.mean_axis(bw, 0)?;
    let cat = tape.concat(&[mf, mb], 1)?;
    let z = tape.linear(cat, w6)?;
    let z = tape.add_bias(z, b3)?;
    tape.relu(z)
}

/// Encodes a `T x d` sequence node into `s_u` with both attention passes.
pub fn encode_sequence(
    tape: &mut Tape,
    x: NodeId,
    nodes: &SeqNodes,
) -> Result<NodeId, DiffError> {
    let t = tape.value(x).rows();
    let (fw_bias, bw_bias) = position_bias(t).as_rows();
    let (fw, _) = attend(tape, x, &nodes.forward, fw_bias)?;
    let (bw, _) = attend(tape, x, &nodes.backward, bw_bias)?;
    encode_preference_nodes(tape, fw, bw, nodes.w6, nodes.b3)
}

/// Raw scores `F(s_u, i)` for each row of `items` (`k x d`), shape `1 x k`.
pub fn score_logits(
    tape: &mut Tape,
    s_u: NodeId,
    items: NodeId,
    mlp: Option<&MlpNodes>,
) -> Result<NodeId, DiffError> {
    match mlp {
        None => tape.linear(s_u, items),
        Some(m) => {
            let k = tape.value(items).rows();
            let rep = tape.lookup(s_u, vec![0; k])?;
            let cat = tape.concat(&[rep, items], 1)?;
            let h = tape.linear(cat, m.hidden_w)?;
            let h = tape.add_bias(h, m.hidden_b)?;
            let h = tape.relu(h)?;
            let o = tape.linear(h, m.out_w)?;
            let o = tape.add_bias(o, m.out_b)?;
            tape.reshape(o, vec![1, k])
        }
    }
}

/// Value-level attention weights for one direction (bound as constants).
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub w3: Tensor,
    pub w4: Tensor,
    pub w5: Tensor,
}

impl AttentionWeights {
    pub fn forward_from(params: &ModelParams) -> Self {
        AttentionWeights {
            w3: params.tensor(ATT_W3).clone(),
            w4: params.tensor(ATT_W4).clone(),
            w5: params.tensor(ATT_W5).clone(),
        }
    }

    fn bind(&self, tape: &mut Tape) -> AttentionNodes {
        AttentionNodes {
            w3: tape.constant(self.w3.clone()),
            w4: tape.constant(self.w4.clone()),
            w5: tape.constant(self.w5.clone()),
        }
    }
}

/// Attention output (`T x d`) and weights (`T x T`, row `n` over `m`) for
/// one direction. `bias` is indexed `[m][n]` as returned by [`position_bias`].
pub fn masked_self_attention(
    seq_embeds: &Tensor,
    weights: &AttentionWeights,
    bias: &Tensor,
) -> Result<(Tensor, Tensor), DiffError> {
    let mut tape = Tape::new();
    let x = tape.constant(seq_embeds.clone());
    let w = weights.bind(&mut tape);
    let (out, att) = attend(&mut tape, x, &w, Arc::new(bias.transpose()))?;
    Ok((tape.value(out).clone(), tape.value(att).clone()))
}

pub fn encode_preference(
    fw: &Tensor,
    bw: &Tensor,
    w6: &Tensor,
    b3: &Tensor,
) -> Result<Tensor, DiffError> {
    let mut tape = Tape::new();
    let f = tape.constant(fw.clone());
    let b = tape.constant(bw.clone());
    let w6 = tape.constant(w6.clone());
    let b3 = tape.constant(b3.clone());
    let s = encode_preference_nodes(&mut tape, f, b, w6, b3)?;
    Ok(tape.value(s).clone())
}

/// `sigmoid(F(s_u, item))` with `F` the inner product, or the MLP in
/// `params` when `scorer` asks for it.
pub fn score(s_u: &[f64], item: &[f64], scorer: ScorerKind, params: &ModelParams) -> f64 {
    match scorer {
        ScorerKind::InnerProduct => {
            let dot: f64 = s_u.iter().zip(item).map(|(a, b)| a * b).sum();
            crate::autodiff::sigmoid(dot)
        }
        ScorerKind::Mlp => {
            let mut tape = Tape::new();
            let s = tape.constant(Tensor::row(s_u.to_vec()));
            let i = tape.constant(Tensor::row(item.to_vec()));
            let m = MlpNodes {
                hidden_w: tape.constant(params.tensor(MLP_HIDDEN_W).clone()),
                hidden_b: tape.constant(params.tensor(MLP_HIDDEN_B).clone()),
                out_w: tape.constant(params.tensor(MLP_OUT_W).clone()),
                out_b: tape.constant(params.tensor(MLP_OUT_B).clone()),
            };
            let logit = score_logits(&mut tape, s, i, Some(&m)).expect("mlp shapes");
            crate::autodiff::sigmoid(tape.value(logit).item())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::seed;
    use rand::Rng;

    fn rand_matrix(rng: &mut seed::Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn weights(rng: &mut seed::Rng, d: usize) -> AttentionWeights {
        AttentionWeights {
            w3: rand_matrix(rng, d, 1),
            w4: rand_matrix(rng, d, d),
            w5: rand_matrix(rng, d, d),
        }
    }

    #[test]
    fn bias_formula() {
        let one = position_bias(1);
        assert_eq!(one.forward.data(), &[-1.0]);
        assert_eq!(one.backward.data(), &[-1.0]);
        let three = position_bias(3);
        assert!((three.forward.get(0, 1) + std::f64::consts::E).abs() < 1e-12);
        assert_eq!(three.forward.get(1, 0), f64::NEG_INFINITY);
        assert!((three.backward.get(2, 0) + 2f64.exp()).abs() < 1e-12);
        assert!((three.backward.get(2, 0) + 7.38906).abs() < 1e-5);
    }

    // Evaluates the attention formulas literally with scalar loops.
    fn reference_attention(x: &Tensor, w: &AttentionWeights, bias: &Tensor) -> Tensor {
        let (t, d) = (x.rows(), x.cols());
        let proj = |wm: &Tensor, row: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|i| (0..d).map(|j| wm.get(i, j) * row[j]).sum())
                .collect()
        };
        let mut out = Tensor::zeros(&[t, d]);
        for n in 0..t {
            let mut cor = vec![f64::NEG_INFINITY; t];
            for m in 0..t {
                if !bias.get(m, n).is_finite() {
                    continue;
                }
                let a = proj(&w.w4, x.row_slice(m));
                let b = proj(&w.w5, x.row_slice(n));
                let mut c = 0.0;
                for i in 0..d {
                    c += w.w3.get(i, 0) * sigmoid(a[i] + b[i]);
                }
                cor[m] = c + bias.get(m, n);
            }
            let z: f64 = cor.iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum();
            for m in 0..t {
                if cor[m].is_finite() {
                    let att = cor[m].exp() / z;
                    for j in 0..d {
                        let v = out.get(n, j) + att * x.get(m, j);
                        out.set(n, j, v);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_scalar_reference() {
        let mut rng = seed::rng(9, "att");
        let x = rand_matrix(&mut rng, 3, 4);
        let w = weights(&mut rng, 4);
        let bias = position_bias(3);
        for b in [&bias.forward, &bias.backward] {
            let (out, att) = masked_self_attention(&x, &w, b).unwrap();
            let want = reference_attention(&x, &w, b);
            assert!(out.max_abs_diff(&want) < 1e-12);
            for n in 0..3 {
                let s: f64 = att.row_slice(n).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_step_sequence_is_identity() {
        let mut rng = seed::rng(1, "one");
        let x = rand_matrix(&mut rng, 1, 4);
        let w = weights(&mut rng, 4);
        let (out, att) = masked_self_attention(&x, &w, &position_bias(1).forward).unwrap();
        assert_eq!(att.data(), &[1.0]);
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn zero_inputs_give_zero_preference() {
        let d = 3;
        let z = Tensor::zeros(&[2, d]);
        let mut rng = seed::rng(0, "w6");
        let w6 = rand_matrix(&mut rng, d, 2 * d);
        let s = encode_preference(&z, &z, &w6, &Tensor::zeros(&[1, d])).unwrap();
        assert_eq!(s.data(), &[0.0; 3]);
    }

    #[test]
    fn preference_matches_unrolled() {
        let (t, d) = (4, 3);
        let mut rng = seed::rng(4, "pref");
        let fw = rand_matrix(&mut rng, t, d);
        let bw = rand_matrix(&mut rng, t, d);
        let w6 = rand_matrix(&mut rng, d, 2 * d);
        let b3 = rand_matrix(&mut rng, 1, d);
        let got = encode_preference(&fw, &bw, &w6, &b3).unwrap();
        let mut pooled = vec![0.0; 2 * d];
        for r in 0..t {
            for j in 0..d {
                pooled[j] += fw.get(r, j) / t as f64;
                pooled[d + j] += bw.get(r, j) / t as f64;
            }
        }
        for i in 0..d {
            let mut s = b3.data()[i];
            for j in 0..2 * d {
                s += w6.get(i, j) * pooled[j];
            }
            assert!((got.data()[i] - s.max(0.0)).abs() < 1e-12);
        }
        // T = 1: pooling is the row itself.
        let one = rand_matrix(&mut rng, 1, d);
        let a = encode_preference(&one, &one, &w6, &b3).unwrap();
        let cat = Tensor::row(one.data().iter().chain(one.data()).copied().collect());
        for i in 0..d {
            let s: f64 = b3.data()[i] + (0..2 * d).map(|j| w6.get(i, j) * cat.data()[j]).sum::<f64>();
            assert!((a.data()[i] - s.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_product_score() {
        let p = ModelParams::default();
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0], ScorerKind::InnerProduct, &p), 0.5);
        assert!(score(&[50.0], &[50.0], ScorerKind::InnerProduct, &p) > 1.0 - 1e-12);
        let s = [0.3, -1.2, 0.8];
        let i = [1.1, 0.4, -0.6];
        let dot = 0.3 * 1.1 - 1.2 * 0.4 - 0.8 * 0.6;
        let want = 1.0 / (1.0 + (-dot as f64).exp());
        assert!((score(&s, &i, ScorerKind::InnerProduct, &p) - want).abs() < 1e-15);
    }
}
