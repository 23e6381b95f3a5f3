//! A small pre-LN decoder with grounded attention in selected layers.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention, fga_attention, gate_value, grounding_scores, project_facts, query_fact_affinity, GateFeatures,
    GateParams,
};
use crate::checkpoint::{self, NamedTensors};
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix, SeededRng};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub d_k: usize,
    pub heads: usize,
    pub layers: usize,
    pub fga_layers: Vec<usize>,
    pub max_positions: usize,
    /// Compute the grounding matrix from each head's own queries instead of head 0's.
    pub per_head_grounding: bool,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            d: 64,
            d_k: 16,
            heads: 4,
            layers: 4,
            fga_layers: vec![2, 3],
            max_positions: 256,
            per_head_grounding: false,
            seed: 42,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.vocab_size == 0 || self.d == 0 || self.d_k == 0 || self.heads == 0 || self.max_positions == 0 {
            return bad("model dimensions must be positive".into());
        }
        if let Some(&l) = self.fga_layers.iter().find(|&&l| l >= self.layers) {
            return bad(format!("fga layer {l} outside 0..{}", self.layers));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Input(format!("model config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn first_fga_layer(&self) -> Option<usize> {
        self.fga_layers.iter().copied().min()
    }

    pub fn is_fga_layer(&self, layer: usize) -> bool {
        self.fga_layers.contains(&layer)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w_q: Vec<Matrix>,
    w_k: Vec<Matrix>,
    w_v: Vec<Matrix>,
    w_o: Matrix,
    w_k_fact: Option<Matrix>,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

/// How the gate value for each position is obtained.
#[derive(Debug, Clone)]
pub enum AlphaSpec {
    Fixed(Vec<f64>),
    Gate { params: GateParams, features: Vec<GateFeatures> },
}

/// Everything a forward pass needs to bias attention toward linked entities.
#[derive(Debug, Clone)]
pub struct Grounding {
    /// One fact embedding per linked entity, M×d.
    pub fact_embeddings: Matrix,
    /// Entity-to-position assignment, M×L.
    pub assignment: Matrix,
    pub alpha: AlphaSpec,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// L×vocab, or 1×vocab for the last position only.
    pub logits: Matrix,
    /// Gate values per position, present when grounding was supplied.
    pub alpha: Option<Vec<f64>>,
    /// Time spent computing K_fact, B_qf, G and α.
    pub grounding_time: Duration,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    tok_emb: Matrix,
    pos_emb: Matrix,
    layers: Vec<Layer>,
    w_out: Matrix,
}

impl ToyModel {
    /// Seeded Gaussian initialization.
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let (d, dk, h) = (config.d, config.d_k, config.heads);
        let tok_emb = rng.gaussian_matrix(config.vocab_size, d, INIT_STD);
        let pos_emb = rng.gaussian_matrix(config.max_positions, d, INIT_STD);
        let mut layers = Vec::with_capacity(config.layers);
        for li in 0..config.layers {
            let heads = |rng: &mut SeededRng| (0..h).map(|_| rng.gaussian_matrix(d, dk, INIT_STD)).collect::<Vec<_>>();
            let w_q = heads(&mut rng);
            let w_k = heads(&mut rng);
            let w_v = heads(&mut rng);
            let w_o = rng.gaussian_matrix(h * dk, d, INIT_STD);
            let w_k_fact = config.is_fga_layer(li).then(|| rng.gaussian_matrix(d, dk, INIT_STD));
            let w1 = rng.gaussian_matrix(d, 4 * d, INIT_STD);
            let w2 = rng.gaussian_matrix(4 * d, d, INIT_STD);
            layers.push(Layer {
                w_q,
                w_k,
                w_v,
                w_o,
                w_k_fact,
                w1,
                b1: Matrix::zeros(1, 4 * d),
                w2,
                b2: Matrix::zeros(1, d),
            });
        }
        let w_out = rng.gaussian_matrix(d, config.vocab_size, INIT_STD);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            w_out,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    /// Logits for every position.
    pub fn forward(&self, ids: &[u32], grounding: Option<&Grounding>) -> Result<Matrix> {
        Ok(self.run(ids, grounding, false)?.logits)
    }

    /// Full forward pass; with `last_only` the output projection is applied to
    /// the final position alone (its row equals the last row of the full pass).
    pub fn run(&self, ids: &[u32], grounding: Option<&Grounding>, last_only: bool) -> Result<ForwardOutput> {
        let len = ids.len();
        if let Some(g) = grounding {
            self.check_grounding(g, len)?;
        }
        let mut x = self.embed(ids)?;
        let mut alpha: Option<Vec<f64>> = None;
        let mut grounding_time = Duration::ZERO;
        for li in 0..self.layers.len() {
            let g = grounding.filter(|_| self.config.is_fga_layer(li));
            x = self.layer_forward(li, &x, g, &mut alpha, &mut grounding_time)?;
        }
        let mut h = layer_norm(&x);
        if last_only {
            h = Matrix::from_vec(1, self.config.d, h.row(len - 1).to_vec())?;
        }
        Ok(ForwardOutput {
            logits: matmul(&h, &self.w_out)?,
            alpha,
            grounding_time,
        })
    }

    /// Head-0 queries of the first grounded layer, the `q_t` half of the gate input.
    pub fn gate_queries(&self, ids: &[u32]) -> Result<Matrix> {
        let first = self
            .config
            .first_fga_layer()
            .ok_or_else(|| Error::Input("model has no grounded layers".into()))?;
        let mut x = self.embed(ids)?;
        let mut unused = None;
        let mut t = Duration::ZERO;
        for li in 0..first {
            x = self.layer_forward(li, &x, None, &mut unused, &mut t)?;
        }
        matmul(&layer_norm(&x), &self.layers[first].w_q[0])
    }

    fn embed(&self, ids: &[u32]) -> Result<Matrix> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds {} positions",
                ids.len(),
                self.config.max_positions
            )));
        }
        let d = self.config.d;
        let mut x = Matrix::zeros(ids.len(), d);
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::Input(format!("token id {id} outside vocabulary of {}", self.config.vocab_size)));
            }
            for (c, slot) in x.row_mut(t).iter_mut().enumerate() {
                *slot = self.tok_emb.get(id, c) + self.pos_emb.get(t, c);
            }
        }
        Ok(x)
    }

    fn check_grounding(&self, g: &Grounding, len: usize) -> Result<()> {
        let m = g.fact_embeddings.rows();
        if g.fact_embeddings.cols() != self.config.d || g.assignment.shape() != (m, len) {
            return Err(Error::Shape {
                op: "grounding",
                left: g.fact_embeddings.shape(),
                right: g.assignment.shape(),
            });
        }
        let n = match &g.alpha {
            AlphaSpec::Fixed(a) => a.len(),
            AlphaSpec::Gate { features, .. } => features.len(),
        };
        if n != len {
            return Err(Error::Shape {
                op: "grounding alpha",
                left: (len, 1),
                right: (n, 1),
            });
        }
        Ok(())
    }

    fn layer_forward(
        &self,
        li: usize,
        x: &Matrix,
        grounding: Option<&Grounding>,
        alpha: &mut Option<Vec<f64>>,
        grounding_time: &mut Duration,
    ) -> Result<Matrix> {
        let layer = &self.layers[li];
        let (len, dk) = (x.rows(), self.config.d_k);
        let h = layer_norm(x);
        let mut heads_out = Matrix::zeros(len, self.config.heads * dk);
        let mut shared_g: Option<Matrix> = None;
        for head in 0..self.config.heads {
            let q = matmul(&h, &layer.w_q[head])?;
            let k = matmul(&h, &layer.w_k[head])?;
            let v = matmul(&h, &layer.w_v[head])?;
            let out = match (grounding, &layer.w_k_fact) {
                (Some(g), Some(w_k_fact)) => {
                    let start = Instant::now();
                    if alpha.is_none() {
                        *alpha = Some(resolve_alpha(&g.alpha, &q)?);
                    }
                    let gm = if self.config.per_head_grounding {
                        grounding_matrix(g, w_k_fact, &q, dk)?
                    } else {
                        if shared_g.is_none() {
                            shared_g = Some(grounding_matrix(g, w_k_fact, &q, dk)?);
                        }
                        shared_g.clone().expect("set above")
                    };
                    *grounding_time += start.elapsed();
                    fga_attention(&q, &k, &v, &gm, alpha.as_deref().expect("set above"))?
                }
                _ => attention(&q, &k, &v)?,
            };
            for t in 0..len {
                heads_out.row_mut(t)[head * dk..(head + 1) * dk].copy_from_slice(out.output.row(t));
            }
        }
        let mut y = x.clone();
        y.add_assign(&matmul(&heads_out, &layer.w_o)?)?;

        let mut hidden = matmul(&layer_norm(&y), &layer.w1)?;
        add_bias(&mut hidden, &layer.b1);
        for v in hidden.data_mut() {
            *v = v.max(0.0);
        }
        let mut mlp = matmul(&hidden, &layer.w2)?;
        add_bias(&mut mlp, &layer.b2);
        y.add_assign(&mlp)?;
        Ok(y)
    }

    pub fn named_tensors(&self) -> NamedTensors {
        let mut t = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (li, l) in self.layers.iter().enumerate() {
            for head in 0..self.config.heads {
                t.push((format!("layers.{li}.w_q.{head}"), l.w_q[head].clone()));
                t.push((format!("layers.{li}.w_k.{head}"), l.w_k[head].clone()));
                t.push((format!("layers.{li}.w_v.{head}"), l.w_v[head].clone()));
            }
            t.push((format!("layers.{li}.w_o"), l.w_o.clone()));
            if let Some(w) = &l.w_k_fact {
                t.push((format!("layers.{li}.w_k_fact"), w.clone()));
            }
            t.push((format!("layers.{li}.w1"), l.w1.clone()));
            t.push((format!("layers.{li}.b1"), l.b1.clone()));
            t.push((format!("layers.{li}.w2"), l.w2.clone()));
            t.push((format!("layers.{li}.b2"), l.b2.clone()));
        }
        t.push(("w_out".to_string(), self.w_out.clone()));
        t
    }

    pub fn from_tensors(config: ToyModelConfig, mut tensors: NamedTensors) -> Result<Self> {
        config.validate()?;
        let (d, dk, h, v) = (config.d, config.d_k, config.heads, config.vocab_size);
        let mut take = |name: String, shape: (usize, usize)| -> Result<Matrix> {
            let m = checkpoint::take(&mut tensors, &name)?;
            if m.shape() != shape {
                return Err(Error::Checkpoint(format!("{name}: expected {shape:?}, found {:?}", m.shape())));
            }
            Ok(m)
        };
        let tok_emb = take("tok_emb".into(), (v, d))?;
        let pos_emb = take("pos_emb".into(), (config.max_positions, d))?;
        let mut layers = Vec::with_capacity(config.layers);
        for li in 0..config.layers {
            let (mut w_q, mut w_k, mut w_v) = (Vec::new(), Vec::new(), Vec::new());
            for head in 0..h {
                w_q.push(take(format!("layers.{li}.w_q.{head}"), (d, dk))?);
                w_k.push(take(format!("layers.{li}.w_k.{head}"), (d, dk))?);
                w_v.push(take(format!("layers.{li}.w_v.{head}"), (d, dk))?);
            }
            let w_o = take(format!("layers.{li}.w_o"), (h * dk, d))?;
            let w_k_fact = if config.is_fga_layer(li) {
                Some(take(format!("layers.{li}.w_k_fact"), (d, dk))?)
            } else {
                None
            };
            layers.push(Layer {
                w_q,
                w_k,
                w_v,
                w_o,
                w_k_fact,
                w1: take(format!("layers.{li}.w1"), (d, 4 * d))?,
                b1: take(format!("layers.{li}.b1"), (1, 4 * d))?,
                w2: take(format!("layers.{li}.w2"), (4 * d, d))?,
                b2: take(format!("layers.{li}.b2"), (1, d))?,
            });
        }
        let w_out = take("w_out".into(), (d, v))?;
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            w_out,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.named_tensors())
    }

    pub fn load(config: ToyModelConfig, path: &Path) -> Result<Self> {
        Self::from_tensors(config, checkpoint::load(path)?)
    }

    /// SHA-256 over every parameter.
    pub fn checksum(&self) -> String {
        checkpoint::digest(&self.named_tensors())
    }
}

fn resolve_alpha(spec: &AlphaSpec, q: &Matrix) -> Result<Vec<f64>> {
    match spec {
        AlphaSpec::Fixed(a) => Ok(a.clone()),
        AlphaSpec::Gate { params, features } => {
            if params.mode == crate::attention::GateMode::Learned && params.w_alpha.len() != q.cols() + GateFeatures::LEN {
                return Err(Error::Shape {
                    op: "gate weights",
                    left: (1, params.w_alpha.len()),
                    right: (1, q.cols() + GateFeatures::LEN),
                });
            }
            Ok(features.iter().enumerate().map(|(t, c)| gate_value(params, q.row(t), c)).collect())
        }
    }
}

fn grounding_matrix(g: &Grounding, w_k_fact: &Matrix, q: &Matrix, d_k: usize) -> Result<Matrix> {
    let k_fact = project_facts(w_k_fact, &g.fact_embeddings)?;
    let b_qf = query_fact_affinity(q, &k_fact, d_k)?;
    grounding_scores(&b_qf, &g.assignment)
}

fn layer_norm(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    let n = x.cols() as f64;
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row {
            *v = (*v - mean) * inv;
        }
    }
    y
}

fn add_bias(m: &mut Matrix, bias: &Matrix) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias.row(0)) {
            *v += b;
        }
    }
}
