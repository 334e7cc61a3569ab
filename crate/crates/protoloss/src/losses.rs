//! The loss zoo: scaled-softmax cross-entropy, center attraction, the
//! split-parametrization CL baseline, the unified DPP objective, and the
//! DPNP composite with sample- and class-level repulsion from nearest
//! rival prototypes.
//!
//! Every builder records onto a [`Graph`], so gradients with respect to
//! both the features and the prototype matrix come from the same tape.
//! The prototype matrix is registered as ONE leaf which every term reads;
//! that single shared `Var` is what makes the classifier weights and the
//! class centers the same parameters.

use serde::{Deserialize, Serialize};

use crate::prototypes::PrototypeBank;
use crate::tensor::{half_power, Graph, Tensor, Var};

/// Smoothing used inside `|t|^(1/2)` during training. Metric reporting
/// uses 0 instead.
pub const TRAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pos: f64,
    pub lambda_neg_sample: f64,
    pub lambda_neg_class: f64,
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_pos: 0.0,
            lambda_neg_sample: 0.0,
            lambda_neg_class: 0.0,
        }
    }

    /// Defaults for high-dimensional latent spaces.
    pub fn high_dim() -> Self {
        LossWeights {
            lambda_pos: 0.1,
            lambda_neg_sample: 0.1,
            lambda_neg_class: 0.1,
        }
    }

    /// Defaults for low-dimensional latent spaces (e.g. 3D).
    pub fn low_dim() -> Self {
        LossWeights {
            lambda_pos: 0.01,
            lambda_neg_sample: 0.01,
            lambda_neg_class: 0.02,
        }
    }

    pub fn validate(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        ok(self.lambda_pos) && ok(self.lambda_neg_sample) && ok(self.lambda_neg_class)
    }
}

/// The four summands of the composite objective plus their weighted total.
/// `neg_sample` and `neg_class` carry the signed (non-positive) values of
/// the repulsion terms.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub pos: f64,
    pub neg_sample: f64,
    pub neg_class: f64,
    pub total: f64,
}

// ── graph builders ───────────────────────────────────────────────────

/// Mean negative log-softmax of the true-class logits. `logits` must
/// already be scaled by `1/alpha`.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let m = g.value(logits).cols();
    assert!(
        labels.iter().all(|y| *y < m),
        "ce_loss: label out of range"
    );
    let lse = g.log_sum_exp_rows(logits);
    let z_true = g.gather_label(logits, labels);
    let per_sample = g.sub(lse, z_true);
    g.mean(per_sample)
}

/// `1/(2B) * sum_i |h_i - c_{y_i}|^2`: pulls features toward their own
/// prototype.
pub fn center_term(g: &mut Graph, h: Var, c: Var, labels: &[usize]) -> Var {
    let batch = g.value(h).rows();
    let own = g.gather_rows(c, labels);
    let diff = g.sub(h, own);
    let sq = g.square(diff);
    let s = g.sum(sq);
    g.scale(s, 1.0 / (2.0 * batch as f64))
}

/// `-1/(2B) * sum_i sum_t (|h_i - c_neg(i)|_t)^(1/2)`: pushes features away
/// from the nearest rival prototype. The selection `neg` is fixed; the
/// selected rows still receive gradients.
pub fn sample_neg_term(g: &mut Graph, h: Var, c: Var, neg: &[usize], eps: f64) -> Var {
    let batch = g.value(h).rows();
    assert_eq!(batch, neg.len(), "sample_neg_term: one negative per sample");
    let rivals = g.gather_rows(c, neg);
    let diff = g.sub(h, rivals);
    let hp = g.half_power(diff, eps);
    let s = g.sum(hp);
    g.scale(s, -1.0 / (2.0 * batch as f64))
}

/// `-1/(2M) * sum_j sum_t (|c_j - c_neg(j)|_t)^(1/2)`: pushes prototypes
/// away from their nearest rival.
pub fn class_neg_term(g: &mut Graph, c: Var, neg: &[usize], eps: f64) -> Var {
    let m = g.value(c).rows();
    assert_eq!(m, neg.len(), "class_neg_term: one negative per class");
    let rivals = g.gather_rows(c, neg);
    let diff = g.sub(c, rivals);
    let hp = g.half_power(diff, eps);
    let s = g.sum(hp);
    g.scale(s, -1.0 / (2.0 * m as f64))
}

/// A composed objective on the tape: the total plus handles to the raw
/// (unweighted) terms for breakdown readout. Terms with zero weight are
/// never recorded, so a run with all-zero weights builds exactly the plain
/// cross-entropy graph.
pub struct ComposedLoss {
    pub total: Var,
    pub ce: Var,
    pub pos: Option<Var>,
    pub neg_sample: Option<Var>,
    pub neg_class: Option<Var>,
    weights: LossWeights,
}

impl ComposedLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let read = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossBreakdown {
            ce: g.value(self.ce).item(),
            pos: read(self.pos),
            neg_sample: read(self.neg_sample),
            neg_class: read(self.neg_class),
            total: g.value(self.total).item(),
        }
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }
}

/// The unified-prototype objective: scaled-softmax CE plus attraction,
/// both reading the same prototype leaf `c`.
pub fn dpp_loss(
    g: &mut Graph,
    h: Var,
    c: Var,
    labels: &[usize],
    weights: LossWeights,
    alpha: f64,
) -> ComposedLoss {
    dpnp_loss(g, h, c, labels, None, None, weights, alpha, TRAIN_EPS)
}

/// The full composite objective. `sample_neg`/`class_neg` are the
/// nearest-rival selections for the current batch and prototype state;
/// pass `None` when there is no rival class (`M = 1`).
#[allow(clippy::too_many_arguments)]
pub fn dpnp_loss(
    g: &mut Graph,
    h: Var,
    c: Var,
    labels: &[usize],
    sample_neg: Option<&[usize]>,
    class_neg: Option<&[usize]>,
    weights: LossWeights,
    alpha: f64,
    eps: f64,
) -> ComposedLoss {
    assert!(weights.validate(), "loss weights must be finite and >= 0");
    let logits = PrototypeBank::logits_graph(g, h, c, alpha);
    let ce = ce_loss(g, logits, labels);

    let mut total = ce;
    let mut add_weighted = |g: &mut Graph, total: Var, term: Var, w: f64| {
        let scaled = g.scale(term, w);
        g.add(total, scaled)
    };

    let pos = (weights.lambda_pos != 0.0).then(|| center_term(g, h, c, labels));
    if let Some(term) = pos {
        total = add_weighted(g, total, term, weights.lambda_pos);
    }

    let neg_sample = match sample_neg {
        Some(neg) if weights.lambda_neg_sample != 0.0 => {
            Some(sample_neg_term(g, h, c, neg, eps))
        }
        _ => None,
    };
    if let Some(term) = neg_sample {
        total = add_weighted(g, total, term, weights.lambda_neg_sample);
    }

    let neg_class = match class_neg {
        Some(neg) if weights.lambda_neg_class != 0.0 => Some(class_neg_term(g, c, neg, eps)),
        _ => None,
    };
    if let Some(term) = neg_class {
        total = add_weighted(g, total, term, weights.lambda_neg_class);
    }

    ComposedLoss {
        total,
        ce,
        pos,
        neg_sample,
        neg_class,
        weights,
    }
}

/// The split-parametrization baseline: CE through classifier weights `w`
/// plus attraction toward a SEPARATE center matrix. Both matrices learn by
/// gradient, but they never coincide structurally.
pub fn cl_loss(
    g: &mut Graph,
    h: Var,
    w: Var,
    centers: Var,
    labels: &[usize],
    lambda_center: f64,
    alpha: f64,
) -> ComposedLoss {
    let logits = PrototypeBank::logits_graph(g, h, w, alpha);
    let ce = ce_loss(g, logits, labels);
    let mut total = ce;
    let pos = (lambda_center != 0.0).then(|| center_term(g, h, centers, labels));
    if let Some(term) = pos {
        let scaled = g.scale(term, lambda_center);
        total = g.add(total, scaled);
    }
    ComposedLoss {
        total,
        ce,
        pos,
        neg_sample: None,
        neg_class: None,
        weights: LossWeights {
            lambda_pos: lambda_center,
            lambda_neg_sample: 0.0,
            lambda_neg_class: 0.0,
        },
    }
}

// ── value-only evaluation (used by metrics and oracles) ─────────────

/// Result of a repulsion-term evaluation; `skipped` marks the no-rival
/// (`M = 1`) case where the term is defined as zero.
#[derive(Debug, Clone, Copy)]
pub struct NegLossValue {
    pub value: f64,
    pub skipped: bool,
}

/// Scaled-softmax CE from precomputed logits, stable log-sum-exp route.
pub fn ce_loss_value(logits: &Tensor, labels: &[usize]) -> f64 {
    let (b, m) = (logits.rows(), logits.cols());
    assert_eq!(b, labels.len());
    assert!(labels.iter().all(|y| *y < m), "label out of range");
    let mut sum = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        sum += lse - row[labels[i]];
    }
    sum / b as f64
}

pub fn center_term_value(h: &Tensor, bank: &PrototypeBank, labels: &[usize]) -> f64 {
    let b = h.rows();
    let mut sum = 0.0;
    for i in 0..b {
        let c = bank.row(labels[i]);
        sum += h.row(i).iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    sum / (2.0 * b as f64)
}

/// Sample-level repulsion value (selection included), `eps`-smoothed.
pub fn sample_neg_loss(
    h: &Tensor,
    bank: &PrototypeBank,
    labels: &[usize],
    eps: f64,
) -> NegLossValue {
    let Some(neg) = bank.sample_negatives(h, labels) else {
        return NegLossValue {
            value: 0.0,
            skipped: true,
        };
    };
    let b = h.rows();
    let mut sum = 0.0;
    for i in 0..b {
        let c = bank.row(neg[i]);
        sum += h
            .row(i)
            .iter()
            .zip(c)
            .map(|(a, b)| half_power(a - b, eps))
            .sum::<f64>();
    }
    NegLossValue {
        value: -sum / (2.0 * b as f64),
        skipped: false,
    }
}

/// Class-level repulsion value (selection included), `eps`-smoothed.
pub fn class_neg_loss(bank: &PrototypeBank, eps: f64) -> NegLossValue {
    let Some(neg) = bank.class_negatives() else {
        return NegLossValue {
            value: 0.0,
            skipped: true,
        };
    };
    let m = bank.num_classes();
    let mut sum = 0.0;
    for j in 0..m {
        let rival = bank.row(neg[j]);
        sum += bank
            .row(j)
            .iter()
            .zip(rival)
            .map(|(a, b)| half_power(a - b, eps))
            .sum::<f64>();
    }
    NegLossValue {
        value: -sum / (2.0 * m as f64),
        skipped: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOL};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(
        rng: &mut ChaCha8Rng,
        b: usize,
        m: usize,
        d: usize,
    ) -> (Tensor, PrototypeBank, Vec<usize>) {
        let h = Tensor::from_vec(
            vec![b, d],
            (0..b * d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )
        .with_grad();
        let bank = PrototypeBank::init(m, d, 4.0, rng.gen()).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..m)).collect();
        (h, bank, labels)
    }

    #[test]
    fn ce_of_uniform_logits_is_log_m() {
        let logits = Tensor::from_vec(vec![2, 4], vec![0.7; 8]);
        assert_relative_eq!(
            ce_loss_value(&logits, &[0, 3]),
            4f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn ce_vanishes_with_large_true_margin() {
        let logits = Tensor::from_vec(vec![1, 3], vec![500.0, 0.0, 0.0]);
        assert!(ce_loss_value(&logits, &[0]) < 1e-12);
    }

    #[test]
    fn ce_matches_explicit_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let logits = Tensor::from_vec(
            vec![3, 5],
            (0..15).map(|_| rng.gen_range(-4.0..4.0)).collect(),
        );
        let labels = [2usize, 0, 4];
        // naive route: explicit softmax, no log-sum-exp trick
        let mut expected = 0.0;
        for i in 0..3 {
            let row = logits.row(i);
            let denom: f64 = row.iter().map(|z| z.exp()).sum();
            expected += -(row[labels[i]].exp() / denom).ln();
        }
        expected /= 3.0;
        assert_relative_eq!(ce_loss_value(&logits, &labels), expected, epsilon = 1e-12);

        // graph route agrees with the value route
        let mut g = Graph::new();
        let lv = g.leaf(&logits);
        let loss = ce_loss(&mut g, lv, &labels);
        assert_relative_eq!(g.value(loss).item(), expected, epsilon = 1e-12);
    }

    #[test]
    fn center_term_hand_cases() {
        // features sitting exactly on their centers
        let bank = PrototypeBank::init(3, 2, 5.0, 1).unwrap();
        let h = Tensor::from_vec(vec![2, 2], [bank.row(1), bank.row(2)].concat());
        assert_relative_eq!(center_term_value(&h, &bank, &[1, 2]), 0.0, epsilon = 1e-20);

        // single sample with h - c = (3, 4): 25/2
        let c = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).with_grad();
        let bank = PrototypeBank::from_tensor(c, 1.0);
        let h = Tensor::from_vec(vec![1, 2], vec![3.0, 4.0]);
        assert_relative_eq!(center_term_value(&h, &bank, &[0]), 12.5, epsilon = 1e-12);
    }

    #[test]
    fn sample_neg_hand_cases() {
        // B=1, h - c_neg = (1, 4): -(sqrt 1 + sqrt 4) / 2 = -1.5
        let c = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 100.0, 100.0]).with_grad();
        let bank = PrototypeBank::from_tensor(c, 1.0);
        let h = Tensor::from_vec(vec![1, 2], vec![1.0, 4.0]);
        let v = sample_neg_loss(&h, &bank, &[1], 0.0);
        assert!(!v.skipped);
        assert_relative_eq!(v.value, -1.5, epsilon = 1e-12);

        // h exactly at the rival prototype: zero contribution
        let h = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]);
        let v = sample_neg_loss(&h, &bank, &[1], 0.0);
        assert_relative_eq!(v.value, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn class_neg_hand_cases() {
        // M=2 with c_1 - c_2 = (0, 9): each class contributes sqrt 9 = 3,
        // total -(1/4) * 6 = -1.5
        let c = Tensor::from_vec(vec![2, 2], vec![0.0, 9.0, 0.0, 0.0]).with_grad();
        let bank = PrototypeBank::from_tensor(c, 1.0);
        let v = class_neg_loss(&bank, 0.0);
        assert_relative_eq!(v.value, -1.5, epsilon = 1e-12);

        // coincident prototypes: zero
        let c = Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).with_grad();
        let bank = PrototypeBank::from_tensor(c, 1.0);
        assert_relative_eq!(class_neg_loss(&bank, 0.0).value, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn single_class_skips_negative_terms() {
        let bank = PrototypeBank::init(1, 3, 4.0, 2).unwrap();
        let h = Tensor::from_vec(vec![2, 3], vec![0.0; 6]);
        assert!(sample_neg_loss(&h, &bank, &[0, 0], 0.0).skipped);
        assert!(class_neg_loss(&bank, 0.0).skipped);
    }

    #[test]
    fn dpnp_with_zero_weights_is_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, bank, labels) = random_instance(&mut rng, 4, 3, 2);
        let neg = bank.sample_negatives(&h, &labels).unwrap();
        let class_neg = bank.class_negatives().unwrap();

        let mut g = Graph::new();
        let hv = g.leaf(&h);
        let cv = g.leaf(bank.prototypes());
        let composed = dpnp_loss(
            &mut g,
            hv,
            cv,
            &labels,
            Some(&neg),
            Some(&class_neg),
            LossWeights::zero(),
            bank.alpha(),
            TRAIN_EPS,
        );
        let bd = composed.breakdown(&g);

        let expected = ce_loss_value(&bank.logits(&h), &labels);
        assert_eq!(bd.total, bd.ce, "zero-weight terms must not touch the total");
        assert_relative_eq!(bd.ce, expected, epsilon = 1e-12);
        assert_eq!(bd.pos, 0.0);
        assert_eq!(bd.neg_sample, 0.0);
        assert_eq!(bd.neg_class, 0.0);
    }

    #[test]
    fn dpnp_breakdown_recomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, bank, labels) = random_instance(&mut rng, 4, 5, 3);
        let neg = bank.sample_negatives(&h, &labels).unwrap();
        let class_neg = bank.class_negatives().unwrap();
        let w = LossWeights {
            lambda_pos: 0.1,
            lambda_neg_sample: 0.3,
            lambda_neg_class: 0.2,
        };

        let mut g = Graph::new();
        let hv = g.leaf(&h);
        let cv = g.leaf(bank.prototypes());
        let composed = dpnp_loss(
            &mut g,
            hv,
            cv,
            &labels,
            Some(&neg),
            Some(&class_neg),
            w,
            bank.alpha(),
            TRAIN_EPS,
        );
        let bd = composed.breakdown(&g);

        // independent recomputation from the value-only routes
        let ce = ce_loss_value(&bank.logits(&h), &labels);
        let pos = center_term_value(&h, &bank, &labels);
        let ns = sample_neg_loss(&h, &bank, &labels, TRAIN_EPS).value;
        let nc = class_neg_loss(&bank, TRAIN_EPS).value;
        let expected = ce + w.lambda_pos * pos + w.lambda_neg_sample * ns + w.lambda_neg_class * nc;

        assert_relative_eq!(bd.ce, ce, epsilon = 1e-12);
        assert_relative_eq!(bd.pos, pos, epsilon = 1e-12);
        assert_relative_eq!(bd.neg_sample, ns, epsilon = 1e-12);
        assert_relative_eq!(bd.neg_class, nc, epsilon = 1e-12);
        assert_relative_eq!(bd.total, expected, epsilon = 1e-10);
    }

    #[test]
    fn cl_recomposes_and_degenerates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, bank, labels) = random_instance(&mut rng, 3, 4, 3);
        let centers = PrototypeBank::init(4, 3, 4.0, 99).unwrap();

        let mut g = Graph::new();
        let hv = g.leaf(&h);
        let wv = g.leaf(bank.prototypes());
        let centv = g.leaf(centers.prototypes());
        let composed = cl_loss(&mut g, hv, wv, centv, &labels, 0.25, bank.alpha());
        let bd = composed.breakdown(&g);

        let ce = ce_loss_value(&bank.logits(&h), &labels);
        let pos = center_term_value(&h, &centers, &labels);
        assert_relative_eq!(bd.total, ce + 0.25 * pos, epsilon = 1e-12);

        // lambda_center = 0 degenerates to plain CE
        let mut g = Graph::new();
        let hv = g.leaf(&h);
        let wv = g.leaf(bank.prototypes());
        let centv = g.leaf(centers.prototypes());
        let composed = cl_loss(&mut g, hv, wv, centv, &labels, 0.0, bank.alpha());
        assert_eq!(composed.breakdown(&g).total, ce_loss_value(&bank.logits(&h), &labels));
    }

    #[test]
    fn losses_have_expected_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (h, bank, labels) = random_instance(&mut rng, 5, 4, 3);
            assert!(ce_loss_value(&bank.logits(&h), &labels) >= 0.0);
            assert!(center_term_value(&h, &bank, &labels) >= 0.0);
            assert!(sample_neg_loss(&h, &bank, &labels, 0.0).value <= 0.0);
            assert!(class_neg_loss(&bank, 0.0).value <= 0.0);
        }
    }

    #[test]
    fn losses_are_batch_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, bank, labels) = random_instance(&mut rng, 6, 4, 3);
        let perm = [5usize, 2, 0, 4, 1, 3];
        let hp = Tensor::from_vec(
            vec![6, 3],
            perm.iter().flat_map(|&i| h.row(i).to_vec()).collect(),
        );
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();

        let a = ce_loss_value(&bank.logits(&h), &labels);
        let b = ce_loss_value(&bank.logits(&hp), &lp);
        assert_relative_eq!(a, b, epsilon = 1e-12);
        assert_relative_eq!(
            center_term_value(&h, &bank, &labels),
            center_term_value(&hp, &bank, &lp),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            sample_neg_loss(&h, &bank, &labels, 0.0).value,
            sample_neg_loss(&hp, &bank, &lp, 0.0).value,
            epsilon = 1e-12
        );
    }

    #[test]
    fn logits_ignore_perturbations_orthogonal_to_features() {
        // h vectors span the xy-plane; perturb a prototype along z
        let h = Tensor::from_vec(vec![2, 3], vec![1.0, 0.5, 0.0, -0.3, 2.0, 0.0]);
        let c = Tensor::from_vec(vec![2, 3], vec![1.0, 1.0, 1.0, -1.0, 0.5, 2.0]).with_grad();
        let bank = PrototypeBank::from_tensor(c.clone(), 4.0);
        let labels = [0usize, 1];

        let mut perturbed = c.clone();
        perturbed.data_mut()[2] += 7.0; // z-component of row 0
        let bank_p = PrototypeBank::from_tensor(perturbed, 4.0);

        assert_eq!(bank.logits(&h).data(), bank_p.logits(&h).data());
        assert_eq!(
            ce_loss_value(&bank.logits(&h), &labels),
            ce_loss_value(&bank_p.logits(&h), &labels)
        );
        assert_ne!(
            center_term_value(&h, &bank, &labels),
            center_term_value(&h, &bank_p, &labels)
        );
    }

    #[test]
    fn unified_parametrization_uses_one_prototype_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (h, bank, labels) = random_instance(&mut rng, 3, 3, 2);
        let mut g = Graph::new();
        let hv = g.leaf(&h);
        let cv = g.leaf(bank.prototypes());
        let leaves_before = g.leaf_count();
        let composed = dpp_loss(
            &mut g,
            hv,
            cv,
            &labels,
            LossWeights {
                lambda_pos: 0.5,
                ..LossWeights::zero()
            },
            bank.alpha(),
        );
        // composing CE + attraction must not register any new leaf: both
        // terms read the same prototype storage
        assert_eq!(g.leaf_count(), leaves_before);

        // and the single leaf receives gradient contributions from both terms
        let g_total = g.grad(composed.total, &[cv]).unwrap();
        let g_ce = g.grad(composed.ce, &[cv]).unwrap();
        let g_pos = g.grad(composed.pos.unwrap(), &[cv]).unwrap();
        for i in 0..g_total[0].len() {
            assert_relative_eq!(
                g_total[0].data()[i],
                g_ce[0].data()[i] + 0.5 * g_pos[0].data()[i],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn gradient_step_pushes_feature_from_rival() {
        // descending the sample repulsion term alone must increase the
        // distance between h and its nearest rival
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (h, bank, labels) = random_instance(&mut rng, 1, 3, 3);
            let neg = bank.sample_negatives(&h, &labels).unwrap();
            let dist_before: f64 = h
                .row(0)
                .iter()
                .zip(bank.row(neg[0]))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();

            let mut g = Graph::new();
            let hv = g.leaf(&h);
            let cv = g.leaf(bank.prototypes());
            let term = sample_neg_term(&mut g, hv, cv, &neg, TRAIN_EPS);
            let grads = g.grad(term, &[hv, cv]).unwrap();

            let step = 1e-3;
            let mut h2 = h.clone();
            for (v, d) in h2.data_mut().iter_mut().zip(grads[0].data()) {
                *v -= step * d;
            }
            let mut c2 = bank.prototypes().clone();
            for (v, d) in c2.data_mut().iter_mut().zip(grads[1].data()) {
                *v -= step * d;
            }
            let dist_after: f64 = h2
                .row(0)
                .iter()
                .zip(&c2.row(neg[0]).to_vec())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(
                dist_after > dist_before,
                "distance must grow: {dist_before} -> {dist_after}"
            );
        }
    }

    #[test]
    fn gradient_step_spreads_prototypes() {
        // descending the class repulsion term alone must increase the
        // minimum pairwise prototype distance
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let min_pair_dist = |c: &Tensor| -> f64 {
            let m = c.rows();
            let mut best = f64::INFINITY;
            for j in 0..m {
                for k in 0..j {
                    let d: f64 = c
                        .row(j)
                        .iter()
                        .zip(c.row(k))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    best = best.min(d);
                }
            }
            best
        };
        for _ in 0..20 {
            let bank = PrototypeBank::init(4, 3, 4.0, rng.gen()).unwrap();
            let neg = bank.class_negatives().unwrap();
            let before = min_pair_dist(bank.prototypes());

            let mut g = Graph::new();
            let cv = g.leaf(bank.prototypes());
            let term = class_neg_term(&mut g, cv, &neg, TRAIN_EPS);
            let grads = g.grad(term, &[cv]).unwrap();

            let mut c2 = bank.prototypes().clone();
            for (v, d) in c2.data_mut().iter_mut().zip(grads[0].data()) {
                *v -= 1e-3 * d;
            }
            assert!(min_pair_dist(&c2) > before);
        }
    }

    #[test]
    fn all_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..10 {
            let b = rng.gen_range(1..=4);
            let m = rng.gen_range(2..=5);
            let d = rng.gen_range(2..=4);
            let (h, bank, labels) = random_instance(&mut rng, b, m, d);
            let neg = bank.sample_negatives(&h, &labels).unwrap();
            let class_neg = bank.class_negatives().unwrap();
            let w = LossWeights {
                lambda_pos: 0.2,
                lambda_neg_sample: 0.15,
                lambda_neg_class: 0.1,
            };
            let alpha = bank.alpha();
            let inputs = [h.clone(), bank.prototypes().clone()];

            type LossFn<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> Var + 'a>;
            let cases: Vec<(&str, LossFn)> = vec![
                ("ce", Box::new(|g: &mut Graph, v: &[Var]| {
                    let z = PrototypeBank::logits_graph(g, v[0], v[1], alpha);
                    ce_loss(g, z, &labels)
                })),
                ("center", Box::new(|g: &mut Graph, v: &[Var]| {
                    center_term(g, v[0], v[1], &labels)
                })),
                ("sample_neg", Box::new(|g: &mut Graph, v: &[Var]| {
                    sample_neg_term(g, v[0], v[1], &neg, TRAIN_EPS)
                })),
                ("class_neg", Box::new(|g: &mut Graph, v: &[Var]| {
                    class_neg_term(g, v[1], &class_neg, TRAIN_EPS)
                })),
                ("dpnp", Box::new(|g: &mut Graph, v: &[Var]| {
                    dpnp_loss(g, v[0], v[1], &labels, Some(&neg), Some(&class_neg), w, alpha, TRAIN_EPS).total
                })),
            ];
            for (name, build) in cases {
                let report = check_gradients(|g, v| build(g, v), &inputs, DEFAULT_STEP);
                assert!(
                    report.passes(DEFAULT_TOL),
                    "{name} trial {trial}: {report:?}"
                );
            }
        }
    }
}
