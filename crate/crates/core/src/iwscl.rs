//! Instance-level weakly supervised contrastive learning.
//!
//! Each anchor query embedding `q` gets a pool made of the other batch
//! queries, every batch key and the embedding queue. Pool members carrying
//! the anchor's class label form the family set, the rest the non-family set,
//! and the loss is
//!
//! ```text
//! L(q) = −1/|F| Σ_{k⁺∈F} log( exp(q·k⁺/τ) / Σ_{k⁻∈F'} exp(q·k⁻/τ) )
//! ```
//!
//! Only the anchor receives gradient; keys, queue entries and the other batch
//! queries are treated as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{axpy, dot, gemm, Matrix};

/// Tolerance on `‖k‖ − 1` for embeddings entering the queue.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub embedding: Vec<f64>,
    pub label: u8,
    pub is_true_negative: bool,
}

/// Fixed-capacity FIFO of key embeddings with class labels, stored as a ring buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "QueueState", try_from = "QueueState")]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    labels: Vec<u8>,
    true_negative: Vec<bool>,
    /// Slot of the oldest entry.
    head: usize,
    len: usize,
}

/// Serialized form: entries oldest first, plus the ring slot of the oldest
/// entry so a restored queue has the same memory layout (and therefore the
/// same floating-point summation order) as the original.
#[derive(Serialize, Deserialize)]
struct QueueState {
    capacity: usize,
    dim: usize,
    #[serde(default)]
    head: usize,
    entries: Vec<QueueEntry>,
}

impl From<EmbeddingQueue> for QueueState {
    fn from(q: EmbeddingQueue) -> Self {
        QueueState {
            capacity: q.capacity,
            dim: q.dim,
            head: q.head,
            entries: q.entries().collect(),
        }
    }
}

impl TryFrom<QueueState> for EmbeddingQueue {
    type Error = Error;

    fn try_from(s: QueueState) -> Result<Self> {
        let mut q = EmbeddingQueue::new(s.capacity, s.dim)?;
        if s.entries.len() > s.capacity {
            return Err(Error::Validation(format!(
                "{} queue entries exceed capacity {}",
                s.entries.len(),
                s.capacity
            )));
        }
        for e in s.entries {
            if e.is_true_negative && e.label != 0 {
                return Err(Error::Validation("true-negative queue entry with label 1".into()));
            }
            q.push(&e.embedding, e.label, e.is_true_negative)?;
        }
        if s.head != 0 {
            if q.len != q.capacity || s.head >= q.capacity {
                return Err(Error::Validation(format!("queue head {} invalid for {} entries", s.head, q.len)));
            }
            q.data.rotate_right(s.head * q.dim);
            q.labels.rotate_right(s.head);
            q.true_negative.rotate_right(s.head);
            q.head = s.head;
        }
        Ok(q)
    }
}

/// Borrowed view of one queue slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryRef<'a> {
    pub embedding: &'a [f64],
    pub label: u8,
    pub is_true_negative: bool,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("queue_capacity", "must be at least 1"));
        }
        if dim == 0 {
            return Err(Error::config("embed_dim", "must be at least 1"));
        }
        Ok(EmbeddingQueue {
            capacity,
            dim,
            data: Vec::new(),
            labels: Vec::new(),
            true_negative: Vec::new(),
            head: 0,
            len: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn slot(&self, i: usize) -> usize {
        (self.head + i) % self.capacity
    }

    /// The `i`-th oldest entry.
    pub fn get(&self, i: usize) -> Option<EntryRef<'_>> {
        (i < self.len).then(|| {
            let s = self.slot(i);
            EntryRef {
                embedding: &self.data[s * self.dim..(s + 1) * self.dim],
                label: self.labels[s],
                is_true_negative: self.true_negative[s],
            }
        })
    }

    /// Entries oldest first.
    pub fn iter(&self) -> impl Iterator<Item = EntryRef<'_>> + '_ {
        (0..self.len).map(move |i| self.get(i).expect("index below len"))
    }

    pub fn entries(&self) -> impl Iterator<Item = QueueEntry> + '_ {
        self.iter().map(|e| QueueEntry {
            embedding: e.embedding.to_vec(),
            label: e.label,
            is_true_negative: e.is_true_negative,
        })
    }

    /// Stored rows and their labels in slot order, which is not age order
    /// once the buffer has wrapped.
    fn slots(&self) -> (&[f64], &[u8]) {
        (&self.data, &self.labels)
    }

    /// `(count of label 0, count of label 1)`
    pub fn label_counts(&self) -> (usize, usize) {
        let ones = self.iter().filter(|e| e.label == 1).count();
        (self.len - ones, ones)
    }

    /// Appends a key embedding. Keys from negative bags are stored with label 0
    /// and flagged as true negatives whatever the classifier predicted. When
    /// full, the oldest entry is dropped first.
    pub fn enqueue(&mut self, key: &[f64], predicted_label: u8, from_negative_bag: bool) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::dim("queue key embedding", self.dim, key.len()));
        }
        let n = dot(key, key).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Validation(format!("key embedding has norm {n}, expected 1")));
        }
        if predicted_label > 1 {
            return Err(Error::Validation(format!("label {predicted_label} not in {{0,1}}")));
        }
        let label = if from_negative_bag { 0 } else { predicted_label };
        self.push(key, label, from_negative_bag)
    }

    fn push(&mut self, key: &[f64], label: u8, true_negative: bool) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::dim("queue key embedding", self.dim, key.len()));
        }
        if self.len < self.capacity {
            // Still filling: slots are appended in order and head stays at 0.
            self.data.extend_from_slice(key);
            self.labels.push(label);
            self.true_negative.push(true_negative);
            self.len += 1;
        } else {
            let s = self.head;
            self.data[s * self.dim..(s + 1) * self.dim].copy_from_slice(key);
            self.labels[s] = label;
            self.true_negative[s] = true_negative;
            self.head = (self.head + 1) % self.capacity;
        }
        Ok(())
    }
}

/// A batch of embeddings (one per row) with their class labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    pub embeddings: &'a Matrix,
    pub labels: &'a [u8],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolSource {
    BatchQuery(usize),
    BatchKey(usize),
    Queue(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolMember<'a> {
    pub embedding: &'a [f64],
    pub label: u8,
    pub source: PoolSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePool<'a> {
    pub members: Vec<PoolMember<'a>>,
}

/// `(B_q ∪ B_k ∪ Q) \ {q_anchor}`: the anchor's own key stays in the pool.
pub fn build_pool<'a>(
    anchor: usize,
    batch_q: LabeledBatch<'a>,
    batch_k: LabeledBatch<'a>,
    queue: &'a EmbeddingQueue,
) -> Result<ContrastivePool<'a>> {
    let nq = batch_q.embeddings.rows();
    if anchor >= nq {
        return Err(Error::Usage(format!("anchor {anchor} not in a batch of {nq}")));
    }
    if batch_q.labels.len() != nq || batch_k.labels.len() != batch_k.embeddings.rows() {
        return Err(Error::Usage("batch labels and embeddings differ in length".into()));
    }
    let mut members = Vec::with_capacity(nq - 1 + batch_k.embeddings.rows() + queue.len());
    members.extend((0..nq).filter(|&j| j != anchor).map(|j| PoolMember {
        embedding: batch_q.embeddings.row(j),
        label: batch_q.labels[j],
        source: PoolSource::BatchQuery(j),
    }));
    members.extend((0..batch_k.embeddings.rows()).map(|j| PoolMember {
        embedding: batch_k.embeddings.row(j),
        label: batch_k.labels[j],
        source: PoolSource::BatchKey(j),
    }));
    members.extend(queue.iter().enumerate().map(|(j, e)| PoolMember {
        embedding: e.embedding,
        label: e.label,
        source: PoolSource::Queue(j),
    }));
    Ok(ContrastivePool { members })
}

/// Splits a pool into `(family, non_family)` by equality with `anchor_label`.
pub fn split_family<'a>(
    pool: &ContrastivePool<'a>,
    anchor_label: u8,
) -> (Vec<PoolMember<'a>>, Vec<PoolMember<'a>>) {
    pool.members.iter().partition(|m| m.label == anchor_label)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub loss: f64,
    /// Derivative w.r.t. the anchor embedding, before any re-normalization.
    pub grad_anchor: Vec<f64>,
}

/// The contrastive loss for one anchor, or `None` when the family or the
/// non-family set is empty and the term is skipped.
///
/// With `infonce_denominator` each family term also puts its own
/// `exp(q·k⁺/τ)` into the denominator, which makes the loss non-negative.
pub fn iwscl_loss(
    anchor: &[f64],
    family: &[&[f64]],
    non_family: &[&[f64]],
    tau: f64,
    infonce_denominator: bool,
) -> Result<Option<ContrastiveLoss>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config("tau", format!("must be > 0, got {tau}")));
    }
    if family.is_empty() || non_family.is_empty() {
        return Ok(None);
    }
    let d = anchor.len();
    for k in family.iter().chain(non_family) {
        if k.len() != d {
            return Err(Error::dim("contrastive pool embedding", d, k.len()));
        }
    }

    let pos: Vec<f64> = family.iter().map(|k| dot(anchor, k) / tau).collect();
    let neg: Vec<f64> = non_family.iter().map(|k| dot(anchor, k) / tau).collect();
    let neg_max = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let neg_sum: f64 = neg.iter().map(|b| (b - neg_max).exp()).sum();
    let lse_neg = neg_max + neg_sum.ln();
    let inv_f = 1.0 / family.len() as f64;

    let mut grad = vec![0.0; d];
    let loss = if !infonce_denominator {
        // −mean(a⁺) + LSE(a⁻); the LSE does not depend on k⁺.
        let loss = lse_neg - pos.iter().sum::<f64>() * inv_f;
        for k in family {
            axpy(-inv_f / tau, k, &mut grad);
        }
        for (k, b) in non_family.iter().zip(&neg) {
            axpy((b - lse_neg).exp() / tau, k, &mut grad);
        }
        loss
    } else {
        let mut loss = 0.0;
        // Weight on the shared non-family softmax, accumulated over family terms.
        let mut neg_weight = 0.0;
        for (k, &a) in family.iter().zip(&pos) {
            let m = a.max(lse_neg);
            let lse_p = m + ((a - m).exp() + (lse_neg - m).exp()).ln();
            loss += lse_p - a;
            let w_self = (a - lse_p).exp();
            axpy((w_self - 1.0) * inv_f / tau, k, &mut grad);
            neg_weight += (lse_neg - lse_p).exp();
        }
        for (k, b) in non_family.iter().zip(&neg) {
            axpy(neg_weight * (b - lse_neg).exp() * inv_f / tau, k, &mut grad);
        }
        loss * inv_f
    };
    Ok(Some(ContrastiveLoss {
        loss,
        grad_anchor: grad,
    }))
}

/// Contrastive loss over a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchContrastive {
    /// Mean over anchors that were not skipped, 0 when all were.
    pub loss: f64,
    /// `batch × d` gradient w.r.t. the anchors, already divided by the number
    /// of active anchors.
    pub grad: Matrix,
    pub active: usize,
    pub skipped: usize,
}

/// Runs [`build_pool`], [`split_family`] and [`iwscl_loss`] for every anchor row
/// of `anchors`. `pool_q` holds the detached batch queries used as pool
/// members; it normally equals `anchors`.
pub fn batch_iwscl(
    anchors: &Matrix,
    pool_q: LabeledBatch<'_>,
    keys: LabeledBatch<'_>,
    queue: &EmbeddingQueue,
    tau: f64,
    infonce_denominator: bool,
) -> Result<BatchContrastive> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config("tau", format!("must be > 0, got {tau}")));
    }
    let n = anchors.rows();
    let d = anchors.cols();
    if pool_q.embeddings.rows() != n {
        return Err(Error::dim("detached query batch", n, pool_q.embeddings.rows()));
    }
    if pool_q.labels.len() != n || keys.labels.len() != keys.embeddings.rows() {
        return Err(Error::Usage("batch labels and embeddings differ in length".into()));
    }
    for (what, m) in [("detached query batch", pool_q.embeddings), ("key batch", keys.embeddings)] {
        if m.cols() != d {
            return Err(Error::dim(what, d, m.cols()));
        }
    }
    if !queue.is_empty() && queue.dim() != d {
        return Err(Error::dim("queue embedding", d, queue.dim()));
    }

    // The pool as three row blocks; the anchor's own query is masked below.
    let (queue_rows, queue_labels) = queue.slots();
    let blocks: [(&[f64], &[u8]); 3] = [
        (pool_q.embeddings.as_slice(), pool_q.labels),
        (keys.embeddings.as_slice(), keys.labels),
        (queue_rows, queue_labels),
    ];
    let labels: Vec<u8> = blocks.iter().flat_map(|b| b.1.iter().copied()).collect();
    let m = labels.len();
    let mut sims = vec![0.0; n * m];
    let mut offset = 0;
    let mut scratch = Vec::new();
    for (rows, lab) in blocks {
        let r = lab.len();
        scratch.clear();
        scratch.resize(n * r, 0.0);
        gemm((n, d, r), (anchors.as_slice(), d, 1), (rows, 1, d), &mut scratch);
        for i in 0..n {
            sims[i * m + offset..i * m + offset + r].copy_from_slice(&scratch[i * r..(i + 1) * r]);
        }
        offset += r;
    }

    // Per-anchor weights on every pool row; the gradient is weights · pool / τ.
    let mut weights = vec![0.0; n * m];
    let mut total = 0.0;
    let mut active = 0;
    for i in 0..n {
        let c = pool_q.labels[i];
        let row = &mut sims[i * m..(i + 1) * m];
        for v in row.iter_mut() {
            *v /= tau;
        }
        let in_pool = |j: usize| j != i;
        let mut n_fam = 0usize;
        let mut fam_sum = 0.0;
        let mut neg_max = f64::NEG_INFINITY;
        for j in (0..m).filter(|&j| in_pool(j)) {
            if labels[j] == c {
                n_fam += 1;
                fam_sum += row[j];
            } else {
                neg_max = neg_max.max(row[j]);
            }
        }
        if n_fam == 0 || neg_max == f64::NEG_INFINITY {
            continue;
        }
        let neg_sum: f64 = (0..m)
            .filter(|&j| in_pool(j) && labels[j] != c)
            .map(|j| (row[j] - neg_max).exp())
            .sum();
        let lse_neg = neg_max + neg_sum.ln();
        let inv_f = 1.0 / n_fam as f64;
        let w = &mut weights[i * m..(i + 1) * m];
        let neg_scale = if !infonce_denominator {
            total += lse_neg - fam_sum * inv_f;
            for j in (0..m).filter(|&j| in_pool(j) && labels[j] == c) {
                w[j] = -inv_f;
            }
            1.0
        } else {
            let mut loss = 0.0;
            let mut neg_weight = 0.0;
            for j in (0..m).filter(|&j| in_pool(j) && labels[j] == c) {
                let a = row[j];
                let hi = a.max(lse_neg);
                let lse_p = hi + ((a - hi).exp() + (lse_neg - hi).exp()).ln();
                loss += lse_p - a;
                w[j] = ((a - lse_p).exp() - 1.0) * inv_f;
                neg_weight += (lse_neg - lse_p).exp();
            }
            total += loss * inv_f;
            neg_weight * inv_f
        };
        for j in (0..m).filter(|&j| in_pool(j) && labels[j] != c) {
            w[j] = neg_scale * (row[j] - lse_neg).exp();
        }
        active += 1;
    }

    let mut grad = Matrix::zeros(n, d);
    if active > 0 {
        let scale = 1.0 / (tau * active as f64);
        let mut offset = 0;
        for (rows, lab) in blocks {
            let r = lab.len();
            scratch.clear();
            scratch.resize(n * r, 0.0);
            for i in 0..n {
                scratch[i * r..(i + 1) * r].copy_from_slice(&weights[i * m + offset..i * m + offset + r]);
            }
            let mut part = vec![0.0; n * d];
            gemm((n, r, d), (&scratch, r, 1), (rows, d, 1), &mut part);
            for (g, p) in grad.as_mut_slice().iter_mut().zip(&part) {
                *g += p * scale;
            }
            offset += r;
        }
        total /= active as f64;
    }
    Ok(BatchContrastive {
        loss: total,
        grad,
        active,
        skipped: n - active,
    })
}
