//! Anchor-based event detection: candidate enumeration over all contiguous
//! intervals of a clip, interval-mean pooling, and ground-truth labels.

use crate::error::{Error, Result};
use crate::mat::Mat;

/// All M = N(N+1)/2 contiguous candidates of an N-frame clip, ordered
/// length-major then start-ascending. Entries are (start, length) with
/// 1-based starts; the last entry is the full clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    n: usize,
    entries: Vec<(usize, usize)>,
}

impl CandidateSet {
    pub fn build(n: usize) -> Self {
        assert!(n >= 1, "clip length must be at least 1");
        let mut entries = Vec::with_capacity(n * (n + 1) / 2);
        for len in 1..=n {
            for start in 1..=(n - len + 1) {
                entries.push((start, len));
            }
        }
        CandidateSet { n, entries }
    }

    pub fn clip_len(&self) -> usize {
        self.n
    }

    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    /// Canonical index of candidate (start, len).
    pub fn index_of(&self, start: usize, len: usize) -> usize {
        debug_assert!(len >= 1 && len <= self.n && start >= 1 && start + len - 1 <= self.n);
        // Candidates with lengths < len come first: sum_{l<len} (N-l+1).
        let shorter: usize = (1..len).map(|l| self.n - l + 1).sum();
        shorter + (start - 1)
    }
}

/// Interval-mean pooling: row m is the mean of the X rows covered by
/// candidate m, i.e. the normalized-candidate product with X.
pub fn candidate_pool_mat(x: &Mat, cs: &CandidateSet) -> Mat {
    assert_eq!(x.rows(), cs.clip_len(), "feature rows must equal clip length");
    let d = x.cols();
    // Prefix sums over time, one extra zero row.
    let mut prefix = Mat::zeros(x.rows() + 1, d);
    for r in 0..x.rows() {
        for c in 0..d {
            let v = prefix.at(r, c) + x.at(r, c);
            prefix.set(r + 1, c, v);
        }
    }
    let mut out = Mat::zeros(cs.count(), d);
    for (m, &(s, l)) in cs.entries().iter().enumerate() {
        let inv = 1.0 / l as f64;
        for c in 0..d {
            out.set(m, c, (prefix.at(s - 1 + l, c) - prefix.at(s - 1, c)) * inv);
        }
    }
    out
}

pub fn candidate_pool(x: &Mat, cs: &CandidateSet) -> Result<Mat> {
    if x.rows() != cs.clip_len() {
        return Err(Error::ShapeMismatch(format!(
            "candidate_pool: {} feature rows vs clip length {}",
            x.rows(),
            cs.clip_len()
        )));
    }
    Ok(candidate_pool_mat(x, cs))
}

/// Frame-level IoU between candidate (start, len) and the run encoded by y.
fn candidate_iou(start: usize, len: usize, run_start: usize, run_len: usize) -> f64 {
    let a0 = start;
    let a1 = start + len - 1;
    let b0 = run_start;
    let b1 = run_start + run_len - 1;
    let inter = (a1.min(b1) + 1).saturating_sub(a0.max(b0));
    if inter == 0 {
        return 0.0;
    }
    let union = (a1.max(b1) + 1) - a0.min(b0);
    inter as f64 / union as f64
}

/// Extracts the single contiguous run of 1s from a binary frame vector.
/// Returns None for all-zero input; errors on multiple runs.
pub fn single_run(y: &[f64]) -> Result<Option<(usize, usize)>> {
    let mut run: Option<(usize, usize)> = None;
    let mut in_run = false;
    for (i, &v) in y.iter().enumerate() {
        let on = v >= 0.5;
        if on && !in_run {
            if run.is_some() {
                return Err(Error::InvalidData(
                    "training window contains more than one event run".into(),
                ));
            }
            run = Some((i + 1, 1));
            in_run = true;
        } else if on {
            if let Some((_, l)) = &mut run {
                *l += 1;
            }
        } else {
            in_run = false;
        }
    }
    Ok(run)
}

/// One-hot target at the candidate with maximal IoU against the ground-truth
/// run (the exact-match candidate, which always exists). All-zero input
/// yields an all-zero target.
pub fn label_candidates(y: &[f64], cs: &CandidateSet) -> Result<Vec<f64>> {
    assert_eq!(y.len(), cs.clip_len(), "label length must equal clip length");
    let mut target = vec![0.0; cs.count()];
    if let Some((s, l)) = single_run(y)? {
        target[cs.index_of(s, l)] = 1.0;
    }
    Ok(target)
}

/// Detection head parameter handles: D→D, gated nonlinearity, D→1, sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct DetectionHeadIds {
    pub w1: crate::params::ParamId,
    pub b1: crate::params::ParamId,
    pub w2: crate::params::ParamId,
    pub b2: crate::params::ParamId,
}

pub fn init_detection_head(
    store: &mut crate::params::ParamStore,
    name: &str,
    d: usize,
    rng: &mut impl rand::Rng,
) -> DetectionHeadIds {
    let s = 1.0 / (d as f64).sqrt();
    let mut u = |rows: usize, cols: usize| {
        Mat::from_fn(rows, cols, |_, _| (rng.gen::<f64>() * 2.0 - 1.0) * s)
    };
    let w1 = u(d, d);
    let w2 = u(d, 1);
    DetectionHeadIds {
        w1: store.add(format!("{name}.w1"), w1, true),
        b1: store.add(format!("{name}.b1"), Mat::zeros(1, d), true),
        w2: store.add(format!("{name}.w2"), w2, true),
        b2: store.add(format!("{name}.b2"), Mat::zeros(1, 1), true),
    }
}

/// MLP scoring of pooled candidate features; rowwise-independent sigmoid
/// probabilities strictly inside (0, 1). Returns an M×1 node.
pub fn score_candidates(
    tape: &mut crate::tape::Tape,
    head: &DetectionHeadIds,
    pooled: crate::tape::NodeId,
) -> crate::tape::NodeId {
    let w1 = tape.param(head.w1);
    let b1 = tape.param(head.b1);
    let h = tape.matmul(pooled, w1);
    let h = tape.add_row(h, b1);
    let h = tape.silu(h);
    let w2 = tape.param(head.w2);
    let b2 = tape.param(head.b2);
    let logits = tape.matmul(h, w2);
    let logits = tape.add_row(logits, b2);
    tape.sigmoid(logits)
}
