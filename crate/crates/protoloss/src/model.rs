//! The feature extractor: a small multilayer perceptron mapping input
//! space into the latent space where prototypes live.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const THETA_MAGIC: &[u8; 16] = b"PROTOLOSS-THETA\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpConfig {
    /// `[input_dim, hidden..., latent_dim]`.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpConfig {
    pub fn new(layer_dims: Vec<usize>, seed: u64) -> Self {
        MlpConfig {
            layer_dims,
            activation: Activation::Relu,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config(
                "layer_dims needs at least input and output".into(),
            ));
        }
        if self.layer_dims.iter().any(|d| *d == 0) {
            return Err(Error::Config("layer_dims entries must be >= 1".into()));
        }
        Ok(())
    }
}

/// Weights and biases of the extractor. Weight `l` has shape
/// `[out_l x in_l]`; forward computes `x @ W^T + b` per layer with relu
/// between layers and nothing after the last one.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Leaf handles for one graph, in the same order as [`FeatureExtractor::params`].
pub struct MlpVars {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl FeatureExtractor {
    /// He-style initialization: weights from `N(0, 2/fan_in)`, biases zero.
    pub fn init(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in config.layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let data = (0..fan_in * fan_out)
                .map(|_| normal.sample(&mut rng))
                .collect();
            weights.push(Tensor::from_vec(vec![fan_out, fan_in], data).with_grad());
            biases.push(Tensor::zeros(vec![fan_out]).with_grad());
        }
        Ok(FeatureExtractor { weights, biases })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.weights.last().unwrap().rows()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Parameters in save order: `W1, b1, W2, b2, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Registers every parameter as a graph leaf.
    pub fn register(&self, g: &mut Graph) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| g.leaf(w)).collect(),
            biases: self.biases.iter().map(|b| g.leaf(b)).collect(),
        }
    }

    /// Leaf handles in the same order as [`FeatureExtractor::params`].
    pub fn param_vars(vars: &MlpVars) -> Vec<Var> {
        vars.weights
            .iter()
            .zip(&vars.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }

    /// Recorded forward pass: `h = L_k(relu(L_{k-1}(... relu(L_1(x)))))`,
    /// no activation after the final layer.
    pub fn forward(&self, g: &mut Graph, vars: &MlpVars, x: Var) -> Var {
        assert_eq!(
            g.value(x).cols(),
            self.input_dim(),
            "forward: input width does not match first layer"
        );
        let mut cur = x;
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let z = g.matmul_nt(cur, vars.weights[l]);
            cur = g.add_bias(z, vars.biases[l]);
            if l != last {
                cur = g.relu(cur);
            }
        }
        cur
    }

    /// Forward pass without gradient bookkeeping kept around.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let vars = self.register(&mut g);
        let h = self.forward(&mut g, &vars, xv);
        g.value(h).clone()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(Tensor::is_finite) && self.biases.iter().all(Tensor::is_finite)
    }

    // ── flat binary save format ──────────────────────────────────────
    // magic "PROTOLOSS-THETA\0", then per tensor:
    // rank: u32 LE, dims: u32 LE x rank, data: f64 LE x numel

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(THETA_MAGIC)?;
        for t in self.params() {
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)?;
        if &magic != THETA_MAGIC {
            return Err(Error::Contract(format!(
                "{} is not a parameter file (bad magic)",
                path.display()
            )));
        }
        let mut tensors = Vec::new();
        loop {
            let mut rank_buf = [0u8; 4];
            match r.read_exact(&mut rank_buf) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let rank = u32::from_le_bytes(rank_buf) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut d = [0u8; 4];
                r.read_exact(&mut d)?;
                shape.push(u32::from_le_bytes(d) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut v = [0u8; 8];
                r.read_exact(&mut v)?;
                data.push(f64::from_le_bytes(v));
            }
            tensors.push(Tensor::from_vec(shape, data).with_grad());
        }
        if tensors.len() < 2 || tensors.len() % 2 != 0 {
            return Err(Error::Contract(format!(
                "parameter file holds {} tensors, expected an even count",
                tensors.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in tensors.chunks(2) {
            let (w, b) = (&pair[0], &pair[1]);
            if w.shape().len() != 2 || b.shape().len() != 1 || w.rows() != b.len() {
                return Err(Error::Contract(
                    "parameter file layer shapes do not chain".into(),
                ));
            }
            if let Some(prev) = weights.last() {
                let prev: &Tensor = prev;
                if prev.rows() != w.cols() {
                    return Err(Error::Contract(
                        "parameter file layer shapes do not chain".into(),
                    ));
                }
            }
            weights.push(w.clone());
            biases.push(b.clone());
        }
        Ok(FeatureExtractor { weights, biases })
    }
}
