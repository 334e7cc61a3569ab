//! The unified prototype bank: one `M x d` matrix whose rows are
//! simultaneously the classifier weight vectors and the class centers,
//! constrained to a hypersphere of radius `alpha` at each epoch start.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Relative tolerance on row norms immediately after [`PrototypeBank::renormalize`].
pub const RENORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    c: Tensor,
    alpha: f64,
}

impl PrototypeBank {
    /// Rows drawn i.i.d. standard normal, then rescaled onto the
    /// radius-`alpha` sphere. Deterministic for a fixed seed.
    pub fn init(num_classes: usize, latent_dim: usize, alpha: f64, seed: u64) -> Result<Self> {
        if num_classes < 1 || latent_dim < 1 {
            return Err(Error::Config(format!(
                "prototype bank needs M >= 1 and d >= 1, got M={num_classes}, d={latent_dim}"
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..num_classes * latent_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut bank = PrototypeBank {
            c: Tensor::from_vec(vec![num_classes, latent_dim], data).with_grad(),
            alpha,
        };
        bank.renormalize()?;
        for j in 1..num_classes {
            for k in 0..j {
                assert_ne!(
                    bank.c.row(j),
                    bank.c.row(k),
                    "distinct prototypes collided at init (probability-0 event)"
                );
            }
        }
        Ok(bank)
    }

    pub fn from_tensor(c: Tensor, alpha: f64) -> Self {
        assert_eq!(c.shape().len(), 2, "prototype bank must be rank 2");
        PrototypeBank { c, alpha }
    }

    pub fn num_classes(&self) -> usize {
        self.c.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.c.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.c
    }

    pub fn prototypes_mut(&mut self) -> &mut Tensor {
        &mut self.c
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.c.row(j)
    }

    pub fn row_norm(&self, j: usize) -> f64 {
        self.c.row(j).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales every row back onto the sphere: `c_j <- alpha * c_j / |c_j|`.
    pub fn renormalize(&mut self) -> Result<()> {
        for j in 0..self.num_classes() {
            let norm = self.row_norm(j);
            if norm < 1e-12 {
                return Err(Error::DegeneratePrototype(format!(
                    "row {j} collapsed to norm {norm:e}"
                )));
            }
            let scale = self.alpha / norm;
            for v in self.c.row_mut(j) {
                *v *= scale;
            }
        }
        Ok(())
    }

    /// True when every row norm is within [`RENORM_TOL`] of `alpha`.
    pub fn on_sphere(&self) -> bool {
        (0..self.num_classes()).all(|j| (self.row_norm(j) - self.alpha).abs() <= RENORM_TOL * self.alpha)
    }

    /// `(h @ C^T) / alpha`, the scaled inner-product logits.
    pub fn logits(&self, h: &Tensor) -> Tensor {
        assert_eq!(h.cols(), self.latent_dim(), "logits: latent width mismatch");
        let (b, m, d) = (h.rows(), self.num_classes(), self.latent_dim());
        let mut out = vec![0.0; b * m];
        for i in 0..b {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..d {
                    s += h.row(i)[t] * self.c.row(j)[t];
                }
                out[i * m + j] = s / self.alpha;
            }
        }
        Tensor::from_vec(vec![b, m], out)
    }

    /// Recorded version of [`PrototypeBank::logits`] for a graph where the
    /// bank is already registered as `c`.
    pub fn logits_graph(g: &mut Graph, h: Var, c: Var, alpha: f64) -> Var {
        let z = g.matmul_nt(h, c);
        g.scale(z, 1.0 / alpha)
    }

    /// Nearest prototype of a different class to the latent vector `h_i`,
    /// by Euclidean distance. Ties break to the smallest index. The choice
    /// carries no gradient; the selected row does.
    ///
    /// Returns `None` when there is no other class (`M = 1`).
    pub fn nearest_negative_for_sample(&self, h_i: &[f64], label: usize) -> Option<usize> {
        assert_eq!(h_i.len(), self.latent_dim());
        assert!(label < self.num_classes(), "label out of range");
        if self.num_classes() < 2 {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.num_classes() {
            if j == label {
                continue;
            }
            let d2: f64 = h_i
                .iter()
                .zip(self.c.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.map_or(true, |(_, b)| d2 < b) {
                best = Some((j, d2));
            }
        }
        best.map(|(j, _)| j)
    }

    /// Per-sample negative prototypes for a whole batch.
    pub fn sample_negatives(&self, h: &Tensor, labels: &[usize]) -> Option<Vec<usize>> {
        assert_eq!(h.rows(), labels.len());
        if self.num_classes() < 2 {
            return None;
        }
        Some(
            labels
                .iter()
                .enumerate()
                .map(|(i, &y)| self.nearest_negative_for_sample(h.row(i), y).unwrap())
                .collect(),
        )
    }

    /// Nearest other prototype to prototype `j`, smallest-index tie-break.
    pub fn nearest_negative_for_class(&self, j: usize) -> Option<usize> {
        assert!(j < self.num_classes(), "class out of range");
        if self.num_classes() < 2 {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        for k in 0..self.num_classes() {
            if k == j {
                continue;
            }
            let d2: f64 = self
                .c
                .row(j)
                .iter()
                .zip(self.c.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.map_or(true, |(_, b)| d2 < b) {
                best = Some((k, d2));
            }
        }
        best.map(|(k, _)| k)
    }

    /// Nearest rival for every class.
    pub fn class_negatives(&self) -> Option<Vec<usize>> {
        if self.num_classes() < 2 {
            return None;
        }
        Some(
            (0..self.num_classes())
                .map(|j| self.nearest_negative_for_class(j).unwrap())
                .collect(),
        )
    }

    // ── CSV export: header "class,c0,...,c{d-1}" ─────────────────────

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class");
        for t in 0..self.latent_dim() {
            s.push_str(&format!(",c{t}"));
        }
        s.push('\n');
        for j in 0..self.num_classes() {
            s.push_str(&j.to_string());
            for v in self.c.row(j) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Reads a bank back from the CSV export. `alpha` is not stored in the
    /// file and must be supplied.
    pub fn read_csv(path: &Path, alpha: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 {
                continue; // header
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 2 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "expected class,c0,... row".into(),
                });
            }
            let values: std::result::Result<Vec<f64>, _> =
                fields[1..].iter().map(|f| f.parse::<f64>()).collect();
            match values {
                Ok(v) => rows.push(v),
                Err(e) => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::Contract("prototype CSV holds no rows".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Contract("ragged prototype CSV".into()));
        }
        let m = rows.len();
        let data = rows.into_iter().flatten().collect();
        Ok(PrototypeBank {
            c: Tensor::from_vec(vec![m, d], data).with_grad(),
            alpha,
        })
    }
}
