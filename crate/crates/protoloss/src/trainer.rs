//! The training loop: per epoch, renormalize prototypes onto the sphere,
//! then for each shuffled mini-batch find the nearest-rival prototypes,
//! evaluate the configured objective, and take SGD-with-momentum steps on
//! the network parameters and the prototype matrix with separate learning
//! rates. Weight decay applies to the network only; renormalization
//! already controls the prototype scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result, TrainDiagnostics};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::model::FeatureExtractor;
use crate::prototypes::PrototypeBank;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "CL")]
    Cl,
    #[serde(rename = "DPP")]
    Dpp,
    #[serde(rename = "DPNP")]
    Dpnp,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ce => "CE",
            Method::Cl => "CL",
            Method::Dpp => "DPP",
            Method::Dpnp => "DPNP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CE" => Ok(Method::Ce),
            "CL" => Ok(Method::Cl),
            "DPP" => Ok(Method::Dpp),
            "DPNP" => Ok(Method::Dpnp),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected CE, CL, DPP or DPNP)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Network learning rate.
    pub eta: f64,
    /// Prototype learning rate.
    pub eta_c: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch fractions at which the learning rate drops.
    pub lr_drop_points: Vec<f64>,
    pub lr_drop_factor: f64,
    pub loss_weights: LossWeights,
    pub alpha: f64,
    pub seed: u64,
    pub method: Method,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            eta: 0.1,
            eta_c: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_points: vec![0.25, 0.5, 0.75],
            lr_drop_factor: 0.1,
            loss_weights: LossWeights::high_dim(),
            alpha: 40.0,
            seed: 0,
            method: Method::Dpnp,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return Err(Error::Config("lr_drop_factor must lie in (0, 1)".into()));
        }
        let pts = &self.lr_drop_points;
        if pts.windows(2).any(|w| w[0] >= w[1]) || pts.iter().any(|p| *p <= 0.0 || *p >= 1.0) {
            return Err(Error::Config(
                "lr_drop_points must be strictly increasing inside (0, 1)".into(),
            ));
        }
        if !self.loss_weights.validate() {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(self.eta > 0.0) || !(self.eta_c > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight_decay be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Effective weights for the configured method: CE ignores every extra
    /// term, CL and DPP use only the attraction weight.
    pub fn effective_weights(&self) -> LossWeights {
        match self.method {
            Method::Ce => LossWeights::zero(),
            Method::Cl | Method::Dpp => LossWeights {
                lambda_pos: self.loss_weights.lambda_pos,
                lambda_neg_sample: 0.0,
                lambda_neg_class: 0.0,
            },
            Method::Dpnp => self.loss_weights,
        }
    }
}

/// `eta * factor^k` where `k` counts the drop points already passed.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let k = config
        .lr_drop_points
        .iter()
        .filter(|p| epoch >= (*p * config.epochs as f64).floor() as usize)
        .count();
    config.eta * config.lr_drop_factor.powi(k as i32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub current_eta: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub metrics: Vec<EpochMetrics>,
    /// The separately-parametrized center matrix of a CL run; used as the
    /// class centers for geometry reporting, matching how split-parameter
    /// methods are conventionally assessed.
    pub aux_centers: Option<Tensor>,
    /// Epoch starts at which a prototype norm missed `alpha` beyond
    /// tolerance (must stay 0).
    pub renorm_violations: usize,
}

// ── SGD with momentum ────────────────────────────────────────────────

struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn new(sizes: &[usize]) -> Self {
        Sgd {
            velocity: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    /// `v <- momentum*v + g + wd*p; p <- p - lr*v` per parameter tensor.
    fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        assert_eq!(params.len(), self.velocity.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.len(), v.len(), "momentum buffer shape mismatch");
            for i in 0..v.len() {
                v[i] = momentum * v[i] + g.data()[i] + weight_decay * p.data()[i];
                p.data_mut()[i] -= lr * v[i];
            }
        }
    }
}

/// Fraction of samples whose argmax inner-product class matches the label.
/// The `1/alpha` scaling is monotone, so raw inner products decide.
pub fn evaluate(fx: &FeatureExtractor, bank: &PrototypeBank, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("evaluate: empty dataset".into()));
    }
    let mut correct = 0usize;
    let chunk = 256usize;
    let n = data.len();
    let dim = data.input_dim();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let rows = end - start;
        let mut feats = Vec::with_capacity(rows * dim);
        for i in start..end {
            feats.extend_from_slice(data.features.row(i));
        }
        let x = Tensor::from_vec(vec![rows, dim], feats);
        let h = fx.forward_eval(&x);
        for i in 0..rows {
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for j in 0..bank.num_classes() {
                let score: f64 = h.row(i).iter().zip(bank.row(j)).map(|(a, b)| a * b).sum();
                if score > best_score {
                    best_score = score;
                    best = j;
                }
            }
            if best == data.labels[i + start] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

fn diagnostics(
    epoch: usize,
    step: usize,
    bd: &LossBreakdown,
    lr: f64,
    fx: &FeatureExtractor,
    bank: &PrototypeBank,
) -> TrainDiagnostics {
    let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    TrainDiagnostics {
        epoch,
        step,
        ce: bd.ce,
        pos: bd.pos,
        neg_sample: bd.neg_sample,
        neg_class: bd.neg_class,
        total: bd.total,
        learning_rate: lr,
        parameter_norms: fx.params().iter().map(|t| norm(t)).collect(),
        prototype_norms: (0..bank.num_classes()).map(|j| bank.row_norm(j)).collect(),
    }
}

/// Runs the full training loop, mutating `fx` and `bank` in place.
pub fn train(
    fx: &mut FeatureExtractor,
    bank: &mut PrototypeBank,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("train: empty dataset".into()));
    }
    if bank.num_classes() != train_set.num_classes {
        return Err(Error::Contract(format!(
            "bank holds {} classes but data holds {}",
            bank.num_classes(),
            train_set.num_classes
        )));
    }
    if fx.latent_dim() != bank.latent_dim() {
        return Err(Error::Contract(
            "extractor latent width does not match prototype width".into(),
        ));
    }

    let weights = config.effective_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // CL keeps a second, independently learned center matrix.
    let mut aux_centers: Option<Tensor> = match config.method {
        Method::Cl => Some(
            PrototypeBank::init(
                bank.num_classes(),
                bank.latent_dim(),
                config.alpha,
                config.seed ^ 0x434c_5f43,
            )?
            .prototypes()
            .clone(),
        ),
        _ => None,
    };

    let param_sizes: Vec<usize> = fx.params().iter().map(|t| t.len()).collect();
    let mut sgd_theta = Sgd::new(&param_sizes);
    let mut sgd_proto = Sgd::new(&[bank.prototypes().len()]);
    let mut sgd_centers = aux_centers
        .as_ref()
        .map(|c| Sgd::new(&[c.len()]));

    let mut metrics = Vec::with_capacity(config.epochs);
    let mut renorm_violations = 0usize;

    for epoch in 0..config.epochs {
        bank.renormalize()?;
        if !bank.on_sphere() {
            renorm_violations += 1;
        }
        let lr = lr_at_epoch(config, epoch);
        let lr_c = config.eta_c * (lr / config.eta); // same schedule factor

        let mut sum = LossBreakdown::default();
        let mut batch_count = 0usize;

        for (step, batch) in batches(train_set, config.batch_size, &mut rng).into_iter().enumerate() {
            let mut g = Graph::new();
            let xv = g.leaf(&batch.features);
            let mlp_vars = fx.register(&mut g);
            let hv = fx.forward(&mut g, &mlp_vars, xv);
            let cv = g.leaf(bank.prototypes());

            // rival selections from the current state; constants for the step
            let h_val = g.value(hv).clone();
            let needs_sample_neg = weights.lambda_neg_sample != 0.0;
            let needs_class_neg = weights.lambda_neg_class != 0.0;
            let sample_neg = if needs_sample_neg {
                bank.sample_negatives(&h_val, &batch.labels)
            } else {
                None
            };
            let class_neg = if needs_class_neg {
                bank.class_negatives()
            } else {
                None
            };

            let (composed, centers_leaf) = match config.method {
                Method::Cl => {
                    let centv = g.leaf(aux_centers.as_ref().unwrap());
                    (
                        losses::cl_loss(
                            &mut g,
                            hv,
                            cv,
                            centv,
                            &batch.labels,
                            weights.lambda_pos,
                            config.alpha,
                        ),
                        Some(centv),
                    )
                }
                _ => (
                    losses::dpnp_loss(
                        &mut g,
                        hv,
                        cv,
                        &batch.labels,
                        sample_neg.as_deref(),
                        class_neg.as_deref(),
                        weights,
                        config.alpha,
                        losses::TRAIN_EPS,
                    ),
                    None,
                ),
            };

            let mut bd = composed.breakdown(&g);
            if !bd.total.is_finite() {
                return Err(Error::Numerical {
                    message: format!("non-finite loss at epoch {epoch}, step {step}"),
                    diagnostics: Some(Box::new(diagnostics(epoch, step, &bd, lr, fx, bank))),
                });
            }

            // metric reporting uses the unsmoothed repulsion values
            if composed.neg_sample.is_some() {
                bd.neg_sample = losses::sample_neg_loss(&h_val, bank, &batch.labels, 0.0).value;
            }
            if composed.neg_class.is_some() {
                bd.neg_class = losses::class_neg_loss(bank, 0.0).value;
            }

            let theta_vars = FeatureExtractor::param_vars(&mlp_vars);
            let mut leaves = theta_vars.clone();
            leaves.push(cv);
            if let Some(centv) = centers_leaf {
                leaves.push(centv);
            }
            let grads = g.grad(composed.total, &leaves)?;

            let n_theta = theta_vars.len();
            sgd_theta.step(
                &mut fx.params_mut(),
                &grads[..n_theta],
                lr,
                config.momentum,
                config.weight_decay,
            );
            sgd_proto.step(
                &mut [bank.prototypes_mut()],
                &grads[n_theta..n_theta + 1],
                lr_c,
                config.momentum,
                0.0,
            );
            if let (Some(centers), Some(opt)) = (aux_centers.as_mut(), sgd_centers.as_mut()) {
                opt.step(
                    &mut [centers],
                    &grads[n_theta + 1..],
                    lr_c,
                    config.momentum,
                    0.0,
                );
            }

            if !fx.all_finite() || !bank.prototypes().is_finite() {
                return Err(Error::Numerical {
                    message: format!("non-finite parameters after epoch {epoch}, step {step}"),
                    diagnostics: Some(Box::new(diagnostics(epoch, step, &bd, lr, fx, bank))),
                });
            }

            sum.ce += bd.ce;
            sum.pos += bd.pos;
            sum.neg_sample += bd.neg_sample;
            sum.neg_class += bd.neg_class;
            sum.total += bd.total;
            batch_count += 1;
        }

        let inv = 1.0 / batch_count as f64;
        let mean = LossBreakdown {
            ce: sum.ce * inv,
            pos: sum.pos * inv,
            neg_sample: sum.neg_sample * inv,
            neg_class: sum.neg_class * inv,
            total: sum.total * inv,
        };
        metrics.push(EpochMetrics {
            epoch,
            loss: mean,
            train_accuracy: evaluate(fx, bank, train_set)?,
            test_accuracy: evaluate(fx, bank, test_set)?,
            current_eta: lr,
        });
    }

    Ok(TrainOutput {
        metrics,
        aux_centers,
        renorm_violations,
    })
}
