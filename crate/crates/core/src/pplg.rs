//! Prototype-based pseudo-label generation.
//!
//! Two unit-norm prototypes (`μ₀` negative, `μ₁` positive) track class centres
//! in embedding space. Instances from positive bags move their soft label
//! `s` toward the one-hot of the nearest prototype,
//! `s ← α s + (1 − α) onehot(argmax_r q·μ_r)`; instances from negative bags are
//! pinned to `[1, 0]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dot, l2_normalize, softmax_xent, Matrix};

const UNIT_NORM_TOL: f64 = 1e-6;

fn check_unit(q: &[f64], what: &str) -> Result<()> {
    let n = dot(q, q).sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Validation(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    mu: [Vec<f64>; 2],
    initialized: [bool; 2],
    pub beta: f64,
    /// Updates whose mixed vector had (near) zero norm and was left unnormalized.
    pub degenerate_updates: u64,
}

impl PrototypeBank {
    pub fn new(dim: usize, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config("beta", format!("must lie in [0, 1], got {beta}")));
        }
        Ok(PrototypeBank {
            mu: [vec![0.0; dim], vec![0.0; dim]],
            initialized: [false; 2],
            beta,
            degenerate_updates: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu[0].len()
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.mu[class]
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized[class]
    }

    pub fn ready(&self) -> bool {
        self.initialized[0] && self.initialized[1]
    }

    /// Overwrites a prototype and marks it initialized.
    pub fn set_prototype(&mut self, class: usize, mu: &[f64]) -> Result<()> {
        if mu.len() != self.dim() {
            return Err(Error::dim("prototype", self.dim(), mu.len()));
        }
        check_unit(mu, "prototype")?;
        self.mu[class] = mu.to_vec();
        self.initialized[class] = true;
        Ok(())
    }

    /// Class of the prototype with the largest inner product; ties go to class 0.
    /// `None` until both prototypes exist.
    pub fn nearest(&self, q: &[f64]) -> Option<u8> {
        self.ready()
            .then(|| u8::from(dot(q, &self.mu[1]) > dot(q, &self.mu[0])))
    }

    /// Moving-average prototype update. A key from a negative bag always
    /// updates `μ₀`; otherwise `μ_c` with `c = predicted_class`. The first
    /// update of a class sets the prototype to `q`.
    pub fn update(&mut self, q: &[f64], predicted_class: u8, from_negative_bag: bool) -> Result<()> {
        if q.len() != self.dim() {
            return Err(Error::dim("prototype update embedding", self.dim(), q.len()));
        }
        if predicted_class > 1 {
            return Err(Error::Validation(format!("class {predicted_class} not in {{0,1}}")));
        }
        check_unit(q, "embedding")?;
        let c = if from_negative_bag { 0 } else { predicted_class as usize };
        if !self.initialized[c] {
            self.mu[c] = q.to_vec();
            self.initialized[c] = true;
            return Ok(());
        }
        let mixed: Vec<f64> = self.mu[c]
            .iter()
            .zip(q)
            .map(|(m, x)| self.beta * m + (1.0 - self.beta) * x)
            .collect();
        let n = l2_normalize(&mixed, 1e-12);
        if n.degenerate {
            self.degenerate_updates += 1;
        }
        self.mu[c] = n.vector;
        Ok(())
    }
}

/// Result of one pseudo-label update request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelUpdate {
    Updated([f64; 2]),
    /// A prototype was not initialized yet; the label is unchanged.
    Skipped,
}

/// Per-instance soft labels on the 2-simplex, indexed by global instance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStore {
    s: Vec<[f64; 2]>,
    negative_bag: Vec<bool>,
    pub alpha: f64,
    pub skipped: u64,
}

impl PseudoLabelStore {
    /// Negative-bag instances start at `[1, 0]`, positive-bag ones at `[0.5, 0.5]`.
    pub fn new(instance_bag_labels: &[u8], alpha: f64) -> Result<Self> {
        Self::with_positive_prior(instance_bag_labels, alpha, 0.5)
    }

    /// Like [`PseudoLabelStore::new`] but positive-bag instances start at
    /// `[1 − prior, prior]`.
    pub fn with_positive_prior(instance_bag_labels: &[u8], alpha: f64, prior: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prior) {
            return Err(Error::config("positive_prior", format!("must lie in [0, 1], got {prior}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("alpha", format!("must lie in [0, 1], got {alpha}")));
        }
        Ok(PseudoLabelStore {
            s: instance_bag_labels
                .iter()
                .map(|&l| if l == 0 { [1.0, 0.0] } else { [1.0 - prior, prior] })
                .collect(),
            negative_bag: instance_bag_labels.iter().map(|&l| l == 0).collect(),
            alpha,
            skipped: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn get(&self, id: usize) -> [f64; 2] {
        self.s[id]
    }

    pub fn labels(&self) -> &[[f64; 2]] {
        &self.s
    }

    pub fn is_negative_bag(&self, id: usize) -> bool {
        self.negative_bag[id]
    }

    /// Overwrites the label of a positive-bag instance.
    pub fn set(&mut self, id: usize, s: [f64; 2]) -> Result<()> {
        self.check_id(id)?;
        if self.negative_bag[id] {
            return Err(Error::Usage(format!("instance {id} belongs to a negative bag")));
        }
        if s.iter().any(|&v| v < 0.0) || (s[0] + s[1] - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("{s:?} is not on the simplex")));
        }
        self.s[id] = s;
        Ok(())
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.s.len() {
            return Err(Error::Usage(format!("instance {id} out of range ({})", self.s.len())));
        }
        Ok(())
    }

    pub fn generate_pseudo_label(&mut self, id: usize, q: &[f64], bank: &PrototypeBank) -> Result<LabelUpdate> {
        self.check_id(id)?;
        if self.negative_bag[id] {
            return Err(Error::Usage(format!(
                "instance {id} belongs to a negative bag; its label is fixed"
            )));
        }
        let Some(c) = bank.nearest(q) else {
            self.skipped += 1;
            return Ok(LabelUpdate::Skipped);
        };
        let z = if c == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
        let a = self.alpha;
        let s = &mut self.s[id];
        *s = [a * s[0] + (1.0 - a) * z[0], a * s[1] + (1.0 - a) * z[1]];
        Ok(LabelUpdate::Updated(*s))
    }

    pub fn assign_negative_label(&mut self, id: usize) -> Result<()> {
        self.check_id(id)?;
        if !self.negative_bag[id] {
            return Err(Error::Usage(format!("instance {id} belongs to a positive bag")));
        }
        self.s[id] = [1.0, 0.0];
        Ok(())
    }

    /// Rows of `s` for the given ids, as a `len × 2` target matrix.
    pub fn batch_targets(&self, ids: &[usize]) -> Matrix {
        let rows: Vec<[f64; 2]> = ids.iter().map(|&i| self.s[i]).collect();
        Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, 2))
    }

    /// CSV with header `instance_id,s0,s1`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "instance_id,s0,s1")?;
        for (i, s) in self.s.iter().enumerate() {
            writeln!(w, "{i},{},{}", s[0], s[1])?;
        }
        Ok(())
    }
}

/// Cross-entropy between classifier logits and soft pseudo labels.
pub fn instance_cls_loss(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    softmax_xent(logits, targets)
}
