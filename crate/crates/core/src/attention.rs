//! Scaled dot-product attention with an additive, gated grounding bias.
//!
//! Facts for the M linked entities are projected into key space, scored
//! against every query (`B_qf`, L×M), and spread onto the token columns the
//! entities occupy through the assignment matrix (`G = B_qf · A`, L×L). Row
//! `t` of `G` is scaled by the gate value `α_t` and added to the raw scores
//! before the causal mask and softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, matmul_transposed, row_softmax, sigmoid, Matrix};
use crate::linker::EntitySpan;

/// `QKᵀ / √d_k` without masking.
pub fn raw_scores(q: &Matrix, k: &Matrix, d_k: usize) -> Result<Matrix> {
    let s = matmul_transposed(q, k)?;
    Ok(s.scale(1.0 / (d_k as f64).sqrt()))
}

/// Sets every entry above the diagonal to `-inf`.
pub fn apply_causal_mask(s: &mut Matrix) {
    for r in 0..s.rows() {
        for v in &mut s.row_mut(r)[r + 1..] {
            *v = f64::NEG_INFINITY;
        }
    }
}

/// Causally masked scores `S` for a decoder (L×L).
pub fn standard_scores(q: &Matrix, k: &Matrix, d_k: usize) -> Result<Matrix> {
    if q.rows() != k.rows() {
        return Err(Error::Shape {
            op: "standard_scores",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let mut s = raw_scores(q, k, d_k)?;
    apply_causal_mask(&mut s);
    Ok(s)
}

/// Fact keys `K_fact` (M×d_k) from fact embeddings (M×d) and `W_K_fact` (d×d_k).
pub fn project_facts(w_k_fact: &Matrix, fact_embeddings: &Matrix) -> Result<Matrix> {
    if fact_embeddings.cols() != w_k_fact.rows() {
        return Err(Error::Shape {
            op: "project_facts",
            left: fact_embeddings.shape(),
            right: w_k_fact.shape(),
        });
    }
    matmul(fact_embeddings, w_k_fact)
}

/// `B_qf = Q K_factᵀ / √d_k` (L×M).
pub fn query_fact_affinity(q: &Matrix, k_fact: &Matrix, d_k: usize) -> Result<Matrix> {
    if q.cols() != k_fact.cols() {
        return Err(Error::Shape {
            op: "query_fact_affinity",
            left: q.shape(),
            right: k_fact.shape(),
        });
    }
    raw_scores(q, k_fact, d_k)
}

/// `G = B_qf · A` (L×L).
pub fn grounding_scores(b_qf: &Matrix, assignment: &Matrix) -> Result<Matrix> {
    if b_qf.cols() != assignment.rows() || b_qf.rows() != assignment.cols() {
        return Err(Error::Shape {
            op: "grounding_scores",
            left: b_qf.shape(),
            right: assignment.shape(),
        });
    }
    matmul(b_qf, assignment)
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Value mixture, L×d_v.
    pub output: Matrix,
    /// Post-softmax weights, L×L.
    pub weights: Matrix,
}

/// `softmax(mask(S + α ⊙ G)) V`, with `α_t` broadcast over row `t` of `G`.
pub fn fga_attention(q: &Matrix, k: &Matrix, v: &Matrix, g: &Matrix, alpha: &[f64]) -> Result<AttentionOutput> {
    let len = q.rows();
    if g.shape() != (len, len) {
        return Err(Error::Shape {
            op: "fga_attention (G)",
            left: (len, len),
            right: g.shape(),
        });
    }
    if alpha.len() != len {
        return Err(Error::Shape {
            op: "fga_attention (alpha)",
            left: (len, 1),
            right: (alpha.len(), 1),
        });
    }
    let d_k = q.cols();
    let mut s = raw_scores(q, k, d_k)?;
    for (t, &a) in alpha.iter().enumerate() {
        for (sv, gv) in s.row_mut(t).iter_mut().zip(g.row(t)) {
            *sv += a * gv;
        }
    }
    finish_attention(s, k, v)
}

/// Plain causal attention, the ungrounded baseline.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<AttentionOutput> {
    let s = raw_scores(q, k, q.cols())?;
    finish_attention(s, k, v)
}

fn finish_attention(mut s: Matrix, k: &Matrix, v: &Matrix) -> Result<AttentionOutput> {
    if s.cols() != k.rows() || k.rows() != v.rows() || s.rows() != s.cols() {
        return Err(Error::Shape {
            op: "attention",
            left: k.shape(),
            right: v.shape(),
        });
    }
    apply_causal_mask(&mut s);
    let weights = row_softmax(&s)?;
    let output = matmul(&weights, v)?;
    Ok(AttentionOutput { output, weights })
}

/// Closed-form probability ratio of a token with grounding score `g` over an
/// ungrounded one: `e^{αg}`.
pub fn amplification_ratio(alpha: f64, g: f64) -> f64 {
    (alpha * g).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Heuristic,
    Learned,
}

/// Parameters of the per-token fact gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// Weights over `[q_t; c_t]`.
    pub w_alpha: Vec<f64>,
    pub b_alpha: f64,
    pub mode: GateMode,
    pub heuristic_factual: f64,
    pub heuristic_default: f64,
}

impl GateParams {
    /// Zero-shot gate: 0.8 in interrogative contexts, 0.2 elsewhere.
    pub fn heuristic() -> Self {
        Self {
            w_alpha: Vec::new(),
            b_alpha: 0.0,
            mode: GateMode::Heuristic,
            heuristic_factual: 0.8,
            heuristic_default: 0.2,
        }
    }

    /// Learned gate with all-zero parameters over a `query_dim + 4` input.
    pub fn learned_zero(query_dim: usize) -> Self {
        Self {
            w_alpha: vec![0.0; query_dim + GateFeatures::LEN],
            b_alpha: 0.0,
            mode: GateMode::Learned,
            ..Self::heuristic()
        }
    }
}

/// Context features `c_t` for one position; every entry lies in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GateFeatures {
    /// Fraction of the last 16 tokens (up to and including `t`) inside entity spans.
    pub entity_density: f64,
    pub interrogative: f64,
    /// 1 when an attribute keyword has appeared outside entity spans by `t`.
    pub attribute_keyword: f64,
    pub relative_position: f64,
}

impl GateFeatures {
    pub const LEN: usize = 4;
    pub const DENSITY_WINDOW: usize = 16;

    pub fn to_array(&self) -> [f64; 4] {
        [self.entity_density, self.interrogative, self.attribute_keyword, self.relative_position]
    }
}

/// Gate features for every position of `tokens`.
pub fn context_features(
    tokens: &[String],
    spans: &[EntitySpan],
    interrogative: bool,
    is_attribute_keyword: impl Fn(&str) -> bool,
) -> Vec<GateFeatures> {
    let len = tokens.len();
    let mut inside = vec![false; len];
    for s in spans {
        for flag in inside.iter_mut().take(s.end.min(len)).skip(s.start) {
            *flag = true;
        }
    }
    let mut keyword_seen = false;
    (0..len)
        .map(|t| {
            if !inside[t] && is_attribute_keyword(&tokens[t]) {
                keyword_seen = true;
            }
            let lo = (t + 1).saturating_sub(GateFeatures::DENSITY_WINDOW);
            let covered = inside[lo..=t].iter().filter(|&&b| b).count();
            GateFeatures {
                entity_density: covered as f64 / (t + 1 - lo) as f64,
                interrogative: if interrogative { 1.0 } else { 0.0 },
                attribute_keyword: if keyword_seen { 1.0 } else { 0.0 },
                relative_position: t as f64 / len as f64,
            }
        })
        .collect()
}

/// Concatenated gate input `[q_t; c_t]`.
pub fn gate_input(q_t: &[f64], c_t: &GateFeatures) -> Vec<f64> {
    let mut x = q_t.to_vec();
    x.extend_from_slice(&c_t.to_array());
    x
}

/// `α_t ∈ [0, 1]` for one position.
pub fn gate_value(params: &GateParams, q_t: &[f64], c_t: &GateFeatures) -> f64 {
    match params.mode {
        GateMode::Heuristic => {
            if c_t.interrogative >= 0.5 {
                params.heuristic_factual
            } else {
                params.heuristic_default
            }
        }
        GateMode::Learned => {
            let x = gate_input(q_t, c_t);
            debug_assert_eq!(x.len(), params.w_alpha.len(), "gate input width");
            sigmoid(dot(&params.w_alpha, &x) + params.b_alpha)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use crate::linker::assignment_matrix;
    use proptest::prelude::*;

    #[test]
    fn orthonormal_scores_and_mask() {
        let q = Matrix::identity(4);
        let s = standard_scores(&q, &q, 4).unwrap();
        for i in 0..4 {
            assert_eq!(s.get(i, i), 0.5);
            for j in 0..4 {
                if j > i {
                    assert_eq!(s.get(i, j), f64::NEG_INFINITY);
                } else if j < i {
                    assert_eq!(s.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_query_attends_uniformly_over_prefix() {
        let mut rng = SeededRng::new(1);
        let k = rng.gaussian_matrix(5, 4, 1.0);
        let v = rng.gaussian_matrix(5, 3, 1.0);
        let s = standard_scores(&Matrix::zeros(5, 4), &k, 4).unwrap();
        for i in 0..5 {
            assert!(s.row(i)[..=i].iter().all(|&x| x == 0.0));
        }
        let out = attention(&Matrix::zeros(5, 4), &k, &v).unwrap();
        for i in 0..5 {
            for j in 0..=i {
                assert!((out.weights.get(i, j) - 1.0 / (i + 1) as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scores_match_double_loop() {
        let mut rng = SeededRng::new(2);
        let q = rng.gaussian_matrix(4, 8, 1.0);
        let k = rng.gaussian_matrix(4, 8, 1.0);
        let s = standard_scores(&q, &k, 8).unwrap();
        for i in 0..4 {
            for j in 0..=i {
                let mut acc = 0.0;
                for c in 0..8 {
                    acc += q.get(i, c) * k.get(j, c);
                }
                assert!((s.get(i, j) - acc / 8f64.sqrt()).abs() < 1e-12);
            }
        }
        assert!(standard_scores(&q, &rng.gaussian_matrix(3, 8, 1.0), 8).is_err());
    }

    #[test]
    fn fact_projection_cases() {
        let w = SeededRng::new(3).gaussian_matrix(8, 4, 1.0);
        let none = project_facts(&w, &Matrix::zeros(0, 8)).unwrap();
        assert_eq!(none.shape(), (0, 4));

        let mut ident = Matrix::zeros(8, 4);
        for i in 0..4 {
            ident.set(i, i, 1.0);
        }
        let emb = SeededRng::new(4).gaussian_matrix(3, 8, 1.0);
        assert_eq!(project_facts(&ident, &emb).unwrap(), emb.slice_cols(0, 4));

        let got = project_facts(&w, &emb).unwrap();
        for m in 0..3 {
            for c in 0..4 {
                let want: f64 = (0..8).map(|i| emb.get(m, i) * w.get(i, c)).sum();
                assert!((got.get(m, c) - want).abs() < 1e-12);
            }
        }
        assert!(project_facts(&w, &Matrix::zeros(2, 7)).is_err());
    }

    #[test]
    fn affinity_cases() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]);
        let k = Matrix::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]]);
        assert_eq!(query_fact_affinity(&q, &k, 4).unwrap().get(0, 0), 0.0);
        // ‖q‖² = d_k ⇒ affinity √d_k
        let q = Matrix::from_rows(&[vec![1.0, -1.0, 1.0, 1.0]]);
        let b = query_fact_affinity(&q, &q, 4).unwrap();
        assert!((b.get(0, 0) - 2.0).abs() < 1e-15);

        let mut rng = SeededRng::new(5);
        let q = rng.gaussian_matrix(6, 4, 1.0);
        let kf = rng.gaussian_matrix(2, 4, 1.0);
        let b = query_fact_affinity(&q, &kf, 4).unwrap();
        assert_eq!(b.shape(), (6, 2));
        for t in 0..6 {
            for m in 0..2 {
                let want: f64 = (0..4).map(|c| q.get(t, c) * kf.get(m, c)).sum::<f64>() / 2.0;
                assert!((b.get(t, m) - want).abs() < 1e-12);
            }
        }
        assert!(query_fact_affinity(&q, &rng.gaussian_matrix(2, 5, 1.0), 4).is_err());
    }

    #[test]
    fn grounding_with_no_entities_is_zero() {
        let b = Matrix::zeros(5, 0);
        let a = assignment_matrix(&[], 5).unwrap();
        let g = grounding_scores(&b, &a.matrix).unwrap();
        assert_eq!(g, Matrix::zeros(5, 5));
    }

    #[test]
    fn grounding_expands_entity_columns() {
        let mut rng = SeededRng::new(6);
        let b = rng.gaussian_matrix(6, 1, 1.0);
        let span = EntitySpan {
            entity_id: "x:y".into(),
            start: 3,
            end: 5,
        };
        let a = assignment_matrix(&[span], 6).unwrap();
        let g = grounding_scores(&b, &a.matrix).unwrap();
        for t in 0..6 {
            for j in 0..6 {
                let want = if j == 3 || j == 4 { b.get(t, 0) } else { 0.0 };
                assert_eq!(g.get(t, j), want);
            }
        }
        assert!(grounding_scores(&b, &Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn grounding_columns_are_zero_or_one_affinity_column() {
        // exhaustive over all span layouts of two entities in L = 5
        let mut rng = SeededRng::new(7);
        let len = 5;
        let b = rng.gaussian_matrix(len, 2, 1.0);
        for s0 in 0..len {
            for e0 in s0 + 1..=len {
                for s1 in e0..len {
                    for e1 in s1 + 1..=len {
                        let spans = vec![
                            EntitySpan { entity_id: "a:a".into(), start: s0, end: e0 },
                            EntitySpan { entity_id: "b:b".into(), start: s1, end: e1 },
                        ];
                        let a = assignment_matrix(&spans, len).unwrap();
                        let g = grounding_scores(&b, &a.matrix).unwrap();
                        for j in 0..len {
                            let col: Vec<f64> = (0..len).map(|t| g.get(t, j)).collect();
                            match a.owner(j) {
                                None => assert!(col.iter().all(|&v| v == 0.0)),
                                Some(m) => assert!((0..len).all(|t| col[t] == b.get(t, m))),
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn heuristic_and_zero_gates() {
        let h = GateParams::heuristic();
        let question = GateFeatures {
            interrogative: 1.0,
            ..Default::default()
        };
        assert_eq!(gate_value(&h, &[], &question), 0.8);
        assert_eq!(gate_value(&h, &[], &GateFeatures::default()), 0.2);
        let z = GateParams::learned_zero(3);
        assert_eq!(gate_value(&z, &[1.0, -2.0, 3.0], &question), 0.5);
        assert_eq!(gate_value(&z, &[0.0; 3], &GateFeatures::default()), 0.5);
    }

    #[test]
    fn context_features_are_bounded() {
        let tokens: Vec<String> = "what is the battery of iphone 15 ?".split(' ').map(String::from).collect();
        let spans = vec![EntitySpan { entity_id: "p:i".into(), start: 5, end: 7 }];
        let f = context_features(&tokens, &spans, true, |t| t == "battery");
        assert_eq!(f.len(), 8);
        assert_eq!(f[2].attribute_keyword, 0.0);
        assert_eq!(f[3].attribute_keyword, 1.0);
        assert!((f[7].entity_density - 2.0 / 8.0).abs() < 1e-15);
        assert_eq!(f[0].relative_position, 0.0);
        for c in &f {
            assert!(c.to_array().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gate_off_is_bit_identical_to_baseline() {
        let mut rng = SeededRng::new(8);
        let q = rng.gaussian_matrix(7, 4, 1.0);
        let k = rng.gaussian_matrix(7, 4, 1.0);
        let v = rng.gaussian_matrix(7, 4, 1.0);
        let g = rng.gaussian_matrix(7, 7, 3.0);
        let base = attention(&q, &k, &v).unwrap();
        let off = fga_attention(&q, &k, &v, &g, &[0.0; 7]).unwrap();
        assert_eq!(base.output.data(), off.output.data());
        assert_eq!(base.weights.data(), off.weights.data());
    }

    #[test]
    fn boost_at_point_eight_and_five_is_e_to_the_fourth() {
        // one query row over two visible keys with equal raw scores
        let q = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = Matrix::identity(2);
        let mut g = Matrix::zeros(2, 2);
        g.set(1, 0, 5.0);
        let out = fga_attention(&q, &k, &v, &g, &[0.8, 0.8]).unwrap();
        let ratio = out.weights.get(1, 0) / out.weights.get(1, 1);
        assert!((ratio - 54.598150033144236).abs() < 1e-9);
        assert!((amplification_ratio(0.8, 5.0) - 54.598).abs() < 1e-3);
        assert_eq!(amplification_ratio(0.0, 123.0), 1.0);
        assert!((amplification_ratio(1.0, 2f64.ln()) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn attention_shape_errors() {
        let q = Matrix::zeros(3, 2);
        assert!(fga_attention(&q, &q, &q, &Matrix::zeros(2, 2), &[0.0; 3]).is_err());
        assert!(fga_attention(&q, &q, &q, &Matrix::zeros(3, 3), &[0.0; 2]).is_err());
    }

    proptest! {
        #[test]
        fn odds_ratio_matches_closed_form(seed in any::<u64>(), len in 2usize..12, alpha in 0.0f64..1.0) {
            let mut rng = SeededRng::new(seed);
            let q = rng.gaussian_matrix(len, 4, 1.0);
            let k = rng.gaussian_matrix(len, 4, 1.0);
            let v = rng.gaussian_matrix(len, 4, 1.0);
            let g = rng.uniform_matrix(len, len, -6.0, 6.0);
            let alphas = vec![alpha; len];
            let base = attention(&q, &k, &v).unwrap();
            let fga = fga_attention(&q, &k, &v, &g, &alphas).unwrap();
            for t in 1..len {
                let s = fga.weights.row(t).iter().sum::<f64>();
                prop_assert!((s - 1.0).abs() < 1e-12);
                let (i, j) = (t, rng.below(t));
                let measured = (fga.weights.get(t, i) / fga.weights.get(t, j)) / (base.weights.get(t, i) / base.weights.get(t, j));
                let expected = (alpha * (g.get(t, i) - g.get(t, j))).exp();
                prop_assert!(((measured - expected) / expected).abs() < 1e-9);
            }
        }

        #[test]
        fn entity_mass_grows_with_alpha(seed in any::<u64>(), len in 3usize..10) {
            let mut rng = SeededRng::new(seed);
            let q = rng.gaussian_matrix(len, 4, 1.0);
            let k = rng.gaussian_matrix(len, 4, 1.0);
            let v = rng.gaussian_matrix(len, 4, 1.0);
            let mut g = Matrix::zeros(len, len);
            for t in 0..len {
                g.set(t, 0, rng.range(0.1, 4.0));
                g.set(t, 1, rng.range(0.1, 4.0));
            }
            let mut prev = vec![0.0; len];
            for step in 0..=10 {
                let a = step as f64 / 10.0;
                let w = fga_attention(&q, &k, &v, &g, &vec![a; len]).unwrap().weights;
                for (t, p) in prev.iter_mut().enumerate().skip(1) {
                    let mass = w.get(t, 0) + w.get(t, 1);
                    prop_assert!(mass + 1e-12 >= *p);
                    *p = mass;
                }
            }
        }
    }
}
