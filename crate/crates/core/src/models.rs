//! Trainable components: the semantic projector and the conditional VAE
//! that generates vision queries from semantic embeddings.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, SemanticEmbeddingTable};
use crate::diffcore::{BatchNormMode, Graph, ParamId, ParamStore, Var, BN_MOMENTUM};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const STREAM_PROJECTOR: u64 = 101;
const STREAM_GENERATOR: u64 = 102;

/// Whether bound parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

fn bind(g: &mut Graph, store: &ParamStore, id: ParamId, b: Binding) -> Var {
    match b {
        Binding::Trainable => g.param(store, id),
        Binding::Frozen => g.frozen(store, id),
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| rng.sample(dist)).collect();
    Tensor::matrix(rows, cols, data).expect("sized data")
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn add(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), uniform_matrix(rng, fan_in, fan_out), true)?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), true)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, b: Binding) -> Result<Var> {
        let w = bind(g, store, self.w, b);
        let bias = bind(g, store, self.b, b);
        g.affine(x, w, bias)
    }
}

/// Two affine layers with a leaky rectifier between, `D → D → C`.
#[derive(Clone, Debug)]
pub struct SemanticProjector {
    pub store: ParamStore,
    fc1: Linear,
    fc2: Linear,
    d_in: usize,
    d_out: usize,
}

impl SemanticProjector {
    pub fn new(d_vision: usize, c_semantic: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PROJECTOR, 0));
        let mut store = ParamStore::new();
        let fc1 = Linear::add(&mut store, "projector.fc1", d_vision, d_vision, &mut rng)?;
        let fc2 = Linear::add(&mut store, "projector.fc2", d_vision, c_semantic, &mut rng)?;
        Ok(Self {
            store,
            fc1,
            fc2,
            d_in: d_vision,
            d_out: c_semantic,
        })
    }

    /// Rebuilds a projector around a loaded store.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
        let fc1 = Linear {
            w: get("projector.fc1.w")?,
            b: get("projector.fc1.b")?,
        };
        let fc2 = Linear {
            w: get("projector.fc2.w")?,
            b: get("projector.fc2.b")?,
        };
        let (d_in, d_out) = (store.get(fc1.w).rows(), store.get(fc2.w).cols());
        Ok(Self {
            store,
            fc1,
            fc2,
            d_in,
            d_out,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    /// `V: K × D → S: K × C` against an explicit store (used by gradcheck).
    pub fn forward_with(&self, store: &ParamStore, g: &mut Graph, v: Var, b: Binding) -> Result<Var> {
        if g.value(v).cols() != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "project",
                lhs: g.shape(v).to_vec(),
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let h = self.fc1.forward(g, store, v, b)?;
        let h = g.leaky_relu(h)?;
        self.fc2.forward(g, store, h, b)
    }

    pub fn forward(&self, g: &mut Graph, v: Var, b: Binding) -> Result<Var> {
        self.forward_with(&self.store, g, v, b)
    }

    /// Plain-value projection.
    pub fn project(&self, v: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(v.clone());
        let s = self.forward(&mut g, x, Binding::Frozen)?;
        Ok(g.value(s).clone())
    }
}

/// How the condition embedding enters the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Decoder input is `z + a`.
    Add,
    /// Decoder input is `[z, a]`.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Hidden width of every block; 0 means `max(D, C)`.
    pub hidden: usize,
    pub blocks: usize,
    pub conditioning: Conditioning,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hidden: 0,
            blocks: 4,
            conditioning: Conditioning::Add,
        }
    }
}

/// Batch-norm behavior of a generator pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics (running statistics for batches of one row) and
    /// running-stat updates.
    Train,
    /// Running statistics only.
    Eval,
}

#[derive(Clone, Debug)]
struct Block {
    fc: Linear,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Running-statistic update recorded during a training pass.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    running_mean: ParamId,
    running_var: ParamId,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Block {
    fn add(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc: Linear::add(store, &format!("{name}.fc"), fan_in, fan_out, rng)?,
            gamma: store.add(format!("{name}.bn.gamma"), Tensor::full(&[1, fan_out], 1.0), true)?,
            beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[1, fan_out]), true)?,
            running_mean: store.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[1, fan_out]), false)?,
            running_var: store.add(format!("{name}.bn.running_var"), Tensor::full(&[1, fan_out], 1.0), false)?,
        })
    }

    fn load(store: &ParamStore, name: &str) -> Result<Self> {
        let get = |n: String| store.id(&n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
        Ok(Self {
            fc: Linear {
                w: get(format!("{name}.fc.w"))?,
                b: get(format!("{name}.fc.b"))?,
            },
            gamma: get(format!("{name}.bn.gamma"))?,
            beta: get(format!("{name}.bn.beta"))?,
            running_mean: get(format!("{name}.bn.running_mean"))?,
            running_var: get(format!("{name}.bn.running_var"))?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        b: Binding,
        mode: NormMode,
        updates: &mut Vec<NormUpdate>,
    ) -> Result<Var> {
        let h = self.fc.forward(g, store, x, b)?;
        let gamma = bind(g, store, self.gamma, b);
        let beta = bind(g, store, self.beta, b);
        let rows = g.value(h).rows();
        let bn = if mode == NormMode::Train && rows >= 2 {
            let t = g.value(h);
            let (mean, var) = column_stats(t);
            updates.push(NormUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean,
                // running variance tracks the unbiased estimate
                var: var.iter().map(|v| v * rows as f64 / (rows - 1) as f64).collect(),
            });
            BatchNormMode::Batch
        } else {
            BatchNormMode::Fixed {
                mean: store.get(self.running_mean).data().to_vec(),
                var: store.get(self.running_var).data().to_vec(),
            }
        };
        let y = g.batch_norm(h, gamma, beta, &bn)?;
        g.leaky_relu(y)
    }
}

fn column_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, f) = (t.rows(), t.cols());
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; f];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    (mean, var)
}

/// Conditional VAE over vision queries. The encoder sees only the query;
/// the condition joins the latent before decoding.
#[derive(Clone, Debug)]
pub struct Generator {
    pub store: ParamStore,
    pub config: GeneratorConfig,
    encoder: Vec<Block>,
    mu_head: Linear,
    logvar_head: Linear,
    decoder: Vec<Block>,
    out_head: Linear,
    d_vision: usize,
    c_semantic: usize,
}

/// Encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub mu: Var,
    pub logvar: Var,
}

impl Generator {
    pub fn new(d_vision: usize, c_semantic: usize, config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.blocks == 0 {
            return Err(Error::Config("generator.blocks must be >= 1".into()));
        }
        let width = if config.hidden == 0 {
            d_vision.max(c_semantic)
        } else {
            config.hidden
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_GENERATOR, 0));
        let mut store = ParamStore::new();
        let mut encoder = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let fan_in = if i == 0 { d_vision } else { width };
            encoder.push(Block::add(&mut store, &format!("cvae.encoder.block{i}"), fan_in, width, &mut rng)?);
        }
        let mu_head = Linear::add(&mut store, "cvae.encoder.mu", width, c_semantic, &mut rng)?;
        let logvar_head = Linear::add(&mut store, "cvae.encoder.logvar", width, c_semantic, &mut rng)?;
        let dec_in = match config.conditioning {
            Conditioning::Add => c_semantic,
            Conditioning::Concat => 2 * c_semantic,
        };
        let mut decoder = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let fan_in = if i == 0 { dec_in } else { width };
            decoder.push(Block::add(&mut store, &format!("cvae.decoder.block{i}"), fan_in, width, &mut rng)?);
        }
        let out_head = Linear::add(&mut store, "cvae.decoder.out", width, d_vision, &mut rng)?;
        Ok(Self {
            store,
            config,
            encoder,
            mu_head,
            logvar_head,
            decoder,
            out_head,
            d_vision,
            c_semantic,
        })
    }

    /// Rebuilds a generator around a loaded store.
    pub fn from_store(store: ParamStore, config: GeneratorConfig) -> Result<Self> {
        let get = |n: &str| store.id(n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        for i in 0..config.blocks {
            encoder.push(Block::load(&store, &format!("cvae.encoder.block{i}"))?);
            decoder.push(Block::load(&store, &format!("cvae.decoder.block{i}"))?);
        }
        let mu_head = Linear {
            w: get("cvae.encoder.mu.w")?,
            b: get("cvae.encoder.mu.b")?,
        };
        let logvar_head = Linear {
            w: get("cvae.encoder.logvar.w")?,
            b: get("cvae.encoder.logvar.b")?,
        };
        let out_head = Linear {
            w: get("cvae.decoder.out.w")?,
            b: get("cvae.decoder.out.b")?,
        };
        let d_vision = store.get(out_head.w).cols();
        let c_semantic = store.get(mu_head.w).cols();
        Ok(Self {
            store,
            config,
            encoder,
            mu_head,
            logvar_head,
            decoder,
            out_head,
            d_vision,
            c_semantic,
        })
    }

    pub fn d_vision(&self) -> usize {
        self.d_vision
    }

    pub fn latent_dim(&self) -> usize {
        self.c_semantic
    }

    pub fn encode_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        v: Var,
        mode: NormMode,
        updates: &mut Vec<NormUpdate>,
    ) -> Result<Encoded> {
        if g.value(v).cols() != self.d_vision || g.value(v).rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "cvae_encode",
                lhs: g.shape(v).to_vec(),
                rhs: vec![1, self.d_vision],
            });
        }
        let mut h = v;
        for blk in &self.encoder {
            h = blk.forward(g, store, h, Binding::Trainable, mode, updates)?;
        }
        Ok(Encoded {
            mu: self.mu_head.forward(g, store, h, Binding::Trainable)?,
            logvar: self.logvar_head.forward(g, store, h, Binding::Trainable)?,
        })
    }

    pub fn decode_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        z: Var,
        cond: Var,
        b: Binding,
        mode: NormMode,
        updates: &mut Vec<NormUpdate>,
    ) -> Result<Var> {
        if g.shape(z) != g.shape(cond) || g.value(z).cols() != self.c_semantic {
            return Err(Error::ShapeMismatch {
                op: "cvae_decode",
                lhs: g.shape(z).to_vec(),
                rhs: g.shape(cond).to_vec(),
            });
        }
        let mut h = match self.config.conditioning {
            Conditioning::Add => g.add(z, cond)?,
            Conditioning::Concat => g.concat(&[z, cond], crate::diffcore::Axis::Cols)?,
        };
        for blk in &self.decoder {
            h = blk.forward(g, store, h, b, mode, updates)?;
        }
        self.out_head.forward(g, store, h, b)
    }

    /// Writes the running statistics recorded by training passes.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate]) -> Result<()> {
        for u in updates {
            for (id, batch) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
                let cur = self.store.get(id);
                let data = cur
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                    .collect();
                let next = Tensor::new(cur.shape().to_vec(), data)?;
                self.store.set(id, next)?;
            }
        }
        Ok(())
    }

    /// Plain-value decode in eval mode.
    pub fn generate(&self, z: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let cv = g.constant(cond.clone());
        let out = self.decode_with(&self.store, &mut g, zv, cv, Binding::Frozen, NormMode::Eval, &mut Vec::new())?;
        Ok(g.value(out).clone())
    }
}

/// `μ + exp(½ logvar) ⊙ ε`.
pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var> {
    if g.shape(mu) != g.shape(logvar) || g.shape(mu) != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            lhs: g.shape(mu).to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let e = g.constant(eps.clone());
    let noise = g.mul(std, e)?;
    g.add(mu, noise)
}

/// `rows × cols` standard-normal draw.
pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sized data")
}

/// Pseudo unseen queries: `U` latents decoded with uniformly drawn unseen
/// embeddings. Labels index the full embedding table.
pub fn sample_pseudo_unseen(
    table: &SemanticEmbeddingTable,
    count: usize,
    generator: &Generator,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let unseen = table.unseen_ids();
    if unseen.is_empty() {
        return Err(invalid("pseudo-unseen sampling needs a non-empty unseen set"));
    }
    if count == 0 {
        return Ok((Tensor::zeros(&[0, generator.d_vision()]), Vec::new()));
    }
    let labels: Vec<usize> = (0..count).map(|_| unseen[rng.random_range(0..unseen.len())]).collect();
    let all = table.all();
    let cond = all.select_rows(&labels)?;
    let z = standard_normal(rng, count, generator.latent_dim());
    Ok((generator.generate(&z, &cond)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_projector_outputs_zero() {
        let mut p = SemanticProjector::new(4, 3, 0).unwrap();
        for id in p.store.ids().collect::<Vec<_>>() {
            let shape = p.store.get(id).shape().to_vec();
            p.store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let s = p.project(&Tensor::full(&[2, 4], 0.7)).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.shape(), &[2, 3]);
    }

    #[test]
    fn identical_rows_project_identically() {
        let p = SemanticProjector::new(4, 3, 1).unwrap();
        let s = p.project(&Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3, 0.4]], 4).unwrap()).unwrap();
        assert_eq!(s.row(0), s.row(1));
        assert!(p.project(&Tensor::zeros(&[1, 5])).is_err());
    }

    #[test]
    fn encoder_shapes_and_single_row() {
        let gen = Generator::new(6, 4, GeneratorConfig::default(), 0).unwrap();
        for o in [1, 3] {
            let mut g = Graph::new();
            let v = g.constant(Tensor::full(&[o, 6], 0.3));
            let mut ups = Vec::new();
            let e = gen.encode_with(&gen.store, &mut g, v, NormMode::Train, &mut ups).unwrap();
            assert_eq!(g.shape(e.mu), &[o, 4]);
            assert_eq!(g.shape(e.logvar), &[o, 4]);
            // a single row never updates running statistics
            assert_eq!(ups.is_empty(), o == 1);
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let gen = Generator::new(6, 4, GeneratorConfig::default(), 0).unwrap();
        let z = Tensor::full(&[2, 4], 0.1);
        let c = Tensor::full(&[2, 4], -0.2);
        assert_eq!(gen.generate(&z, &c).unwrap(), gen.generate(&z, &c).unwrap());
        assert_eq!(gen.generate(&z, &c).unwrap().shape(), &[2, 6]);
    }

    #[test]
    fn reparameterize_cases() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::row_vector(&[1.0, 2.0]));
        let lv = g.constant(Tensor::row_vector(&[0.0, 0.0]));
        let z = reparameterize(&mut g, mu, lv, &Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 2.0]);
        let z = reparameterize(&mut g, mu, lv, &Tensor::row_vector(&[0.5, -1.0])).unwrap();
        assert_eq!(g.value(z).data(), &[1.5, 1.0]);
    }

    #[test]
    fn concat_conditioning_builds() {
        let cfg = GeneratorConfig {
            conditioning: Conditioning::Concat,
            ..GeneratorConfig::default()
        };
        let gen = Generator::new(5, 3, cfg, 0).unwrap();
        let out = gen.generate(&Tensor::zeros(&[2, 3]), &Tensor::full(&[2, 3], 0.5)).unwrap();
        assert_eq!(out.shape(), &[2, 5]);
    }

    #[test]
    fn store_round_trip_rebuilds_models() {
        let gen = Generator::new(5, 3, GeneratorConfig::default(), 2).unwrap();
        let again = Generator::from_store(gen.store.clone(), gen.config.clone()).unwrap();
        let z = Tensor::full(&[1, 3], 0.4);
        assert_eq!(gen.generate(&z, &z).unwrap(), again.generate(&z, &z).unwrap());
        let p = SemanticProjector::new(5, 3, 2).unwrap();
        let q = SemanticProjector::from_store(p.store.clone()).unwrap();
        assert_eq!((q.d_in(), q.d_out()), (5, 3));
    }
}
