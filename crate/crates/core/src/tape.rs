//! Minimal reverse-mode tape over matrix-valued nodes.
//!
//! The tape records the forward pass of one training window; `backward`
//! walks it in reverse and accumulates gradients into buffers aligned with
//! the [`ParamStore`]. The contract for every op is agreement with central
//! finite differences, which the unit tests below and the `gradcheck`
//! harness enforce.
//!
//! The S4 convolution is a single fused op: its forward runs the FFT path
//! from [`crate::ssm`], and its adjoint recovers kernel-tap gradients via
//! FFT correlations, then chains through the bilinear discretization in
//! closed form (treating each complex parameter as a real pair).

use std::sync::Arc;

use num_complex::Complex64;

use crate::detector::CandidateSet;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::params::{ParamId, ParamStore};
use crate::ssm;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Parameter handles for one bank of per-channel state-space systems.
/// All tensors are D×R except `log_step`, which is D×1.
#[derive(Clone, Copy, Debug)]
pub struct SsmBankIds {
    pub a_re: ParamId,
    pub a_im: ParamId,
    pub b_re: ParamId,
    pub b_im: ParamId,
    pub d_re: ParamId,
    pub d_im: ParamId,
    pub log_step: ParamId,
}

enum Op {
    Const,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// a * b^T
    MatMulTB(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// (L×D) + broadcast (1×D)
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    S4Conv { u: NodeId, bank: SsmBankIds },
    ConcatRows(NodeId, NodeId),
    SliceRows { x: NodeId, start: usize },
    SoftmaxRows { x: NodeId, valid: Option<Arc<Vec<bool>>> },
    Embed { table: ParamId, ids: Arc<Vec<usize>> },
    CandidatePool { x: NodeId, cs: Arc<CandidateSet> },
    Suppress { v: NodeId, scores: NodeId, cs: Arc<CandidateSet>, theta: Arc<Vec<usize>>, k: usize },
    FocalLoss { p: NodeId, targets: Arc<Vec<f64>>, alpha: f64, gamma: f64 },
    TokenCe { rows: NodeId, gold: Arc<Vec<usize>> },
    /// Frobenius inner product with a constant; scalar output (test utility).
    DotConst { x: NodeId, w: Arc<Mat> },
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    node_grads: Vec<Option<Mat>>,
    /// Number of token-CE rows that hit the 1e-12 probability clamp.
    pub ce_clamp_events: usize,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape { store, nodes: Vec::new(), node_grads: Vec::new(), ce_clamp_events: 0 }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. a node (None if unreached).
    pub fn node_grad(&self, id: NodeId) -> Option<&Mat> {
        self.node_grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(self.store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_tb(self.value(b));
        self.push(v, Op::MatMulTB(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (bm, am) = (self.value(bias), self.value(a));
        assert_eq!(bm.rows(), 1, "add_row bias must be 1×D");
        assert_eq!(bm.cols(), am.cols(), "add_row width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            for (x, &b) in row.iter_mut().zip(bm.row(0)) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, Op::Hadamard(a, b))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Per-position normalization across features with learnable scale/shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xm = self.value(x);
        let gm = self.value(gamma);
        let bm = self.value(beta);
        assert_eq!(gm.shape(), (1, xm.cols()));
        assert_eq!(bm.shape(), (1, xm.cols()));
        let mut out = Mat::zeros(xm.rows(), xm.cols());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let (mu, inv) = row_stats(row);
            for c in 0..xm.cols() {
                let xhat = (row[c] - mu) * inv;
                out.set(r, c, gm.at(0, c) * xhat + bm.at(0, c));
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta })
    }

    /// Per-channel state-space causal convolution over an L×D sequence.
    pub fn s4_conv(&mut self, u: NodeId, bank: &SsmBankIds) -> NodeId {
        let um = self.value(u);
        let (l, d) = um.shape();
        let mut out = Mat::zeros(l, d);
        for ch in 0..d {
            let dssm = self.channel_discrete(bank, ch);
            let taps = ssm::materialize_kernel(&dssm, l);
            let y = ssm::fft_causal_convolve(&taps.taps, &um.col(ch));
            out.set_col(ch, &y);
        }
        self.push(out, Op::S4Conv { u, bank: *bank })
    }

    fn channel_continuous(&self, bank: &SsmBankIds, ch: usize) -> ssm::ContinuousSsm {
        let a_re = self.store.get(bank.a_re);
        let a_im = self.store.get(bank.a_im);
        let b_re = self.store.get(bank.b_re);
        let b_im = self.store.get(bank.b_im);
        let d_re = self.store.get(bank.d_re);
        let d_im = self.store.get(bank.d_im);
        let log_step = self.store.get(bank.log_step).at(ch, 0);
        let r = a_re.cols();
        let take = |m: &Mat, mi: &Mat| -> Vec<Complex64> {
            (0..r).map(|i| Complex64::new(m.at(ch, i), mi.at(ch, i))).collect()
        };
        ssm::ContinuousSsm {
            state_dim: r,
            a_diag: take(a_re, a_im),
            b: take(b_re, b_im),
            d: take(d_re, d_im),
            log_step,
        }
    }

    fn channel_discrete(&self, bank: &SsmBankIds, ch: usize) -> ssm::DiscreteSsm {
        let cont = self.channel_continuous(bank, ch);
        ssm::discretize(&cont).expect("stability clamp keeps the bilinear map regular")
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).concat_rows(self.value(b));
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice_rows(start, len);
        self.push(v, Op::SliceRows { x, start })
    }

    /// Row-wise softmax; entries where `valid` is false receive -inf logits.
    pub fn softmax_rows(&mut self, x: NodeId, valid: Option<Arc<Vec<bool>>>) -> NodeId {
        let xm = self.value(x);
        if let Some(v) = &valid {
            assert_eq!(v.len(), xm.len(), "softmax mask length mismatch");
        }
        let mut out = Mat::zeros(xm.rows(), xm.cols());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let is_valid = |c: usize| valid.as_ref().map_or(true, |v| v[r * xm.cols() + c]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..xm.cols() {
                if is_valid(c) && row[c] > max {
                    max = row[c];
                }
            }
            assert!(max.is_finite(), "softmax row {r} has no valid entries");
            let mut denom = 0.0;
            for c in 0..xm.cols() {
                if is_valid(c) {
                    denom += (row[c] - max).exp();
                }
            }
            for c in 0..xm.cols() {
                if is_valid(c) {
                    out.set(r, c, (row[c] - max).exp() / denom);
                }
            }
        }
        self.push(out, Op::SoftmaxRows { x, valid })
    }

    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> NodeId {
        let tm = self.store.get(table);
        let mut out = Mat::zeros(ids.len(), tm.cols());
        for (k, &id) in ids.iter().enumerate() {
            assert!(id < tm.rows(), "token id {id} out of vocabulary");
            out.row_mut(k).copy_from_slice(tm.row(id));
        }
        self.push(out, Op::Embed { table, ids: Arc::new(ids.to_vec()) })
    }

    pub fn candidate_pool(&mut self, x: NodeId, cs: Arc<CandidateSet>) -> NodeId {
        let v = crate::detector::candidate_pool_mat(self.value(x), &cs);
        self.push(v, Op::CandidatePool { x, cs })
    }

    /// Differentiable feature suppression. Returns the output node and the
    /// selected top-k candidate indices.
    pub fn suppress(
        &mut self,
        v: NodeId,
        scores: NodeId,
        cs: Arc<CandidateSet>,
        k: usize,
    ) -> (NodeId, Arc<Vec<usize>>) {
        let sm = self.value(scores);
        assert_eq!(sm.cols(), 1, "scores must be M×1");
        assert_eq!(sm.rows(), cs.count(), "scores length must equal candidate count");
        assert!(k >= 1 && k <= cs.count(), "top-k count out of range");
        let theta = Arc::new(top_k_indices(sm.col(0).as_slice(), k));
        let vm = self.value(v);
        let scales = suppression_row_scales(sm, &theta, &cs, k, vm.rows());
        let mut out = vm.clone();
        for r in 0..out.rows() {
            let s = scales[r];
            for x in out.row_mut(r) {
                *x *= s;
            }
        }
        let node = self.push(out, Op::Suppress { v, scores, cs, theta: theta.clone(), k });
        (node, theta)
    }

    /// Mean focal loss over binary candidate targets; scalar output.
    pub fn focal_loss(
        &mut self,
        p: NodeId,
        targets: Arc<Vec<f64>>,
        alpha: f64,
        gamma: f64,
    ) -> Result<NodeId> {
        let pm = self.value(p);
        assert_eq!(pm.cols(), 1, "scores must be M×1");
        assert_eq!(pm.rows(), targets.len(), "targets length mismatch");
        if !pm.is_finite() {
            return Err(Error::NonFinite("focal loss input".into()));
        }
        let mut total = 0.0;
        for m in 0..pm.rows() {
            total += focal_term(pm.at(m, 0), targets[m], alpha, gamma).0;
        }
        let v = Mat::scalar(total / targets.len() as f64);
        Ok(self.push(v, Op::FocalLoss { p, targets, alpha, gamma }))
    }

    /// Mean token-level cross-entropy over distribution rows; scalar output.
    pub fn token_ce(&mut self, rows: NodeId, gold: Arc<Vec<usize>>) -> Result<NodeId> {
        let rm = self.value(rows);
        assert_eq!(rm.rows(), gold.len(), "gold length mismatch");
        let mut total = 0.0;
        let mut clamps = 0;
        for (kk, &g) in gold.iter().enumerate() {
            let row = rm.row(kk);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::DecoderNotNormalized { row: kk, sum });
            }
            let mut p = row[g];
            if p < 1e-12 {
                p = 1e-12;
                clamps += 1;
            }
            total += -p.ln();
        }
        self.ce_clamp_events += clamps;
        let v = Mat::scalar(total / gold.len() as f64);
        Ok(self.push(v, Op::TokenCe { rows, gold }))
    }

    pub fn dot_const(&mut self, x: NodeId, w: Mat) -> NodeId {
        let xm = self.value(x);
        assert_eq!(xm.shape(), w.shape());
        let v: f64 = xm.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
        self.push(Mat::scalar(v), Op::DotConst { x, w: Arc::new(w) })
    }

    /// Reverse pass from a scalar loss node. Returns gradient buffers
    /// aligned with the parameter store.
    pub fn backward(&mut self, loss: NodeId) -> Vec<Mat> {
        assert_eq!(self.nodes[loss.0].value.shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut param_grads = self.store.zeros_like();

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-inserted below so callers can inspect node gradients.
            let gref = &g;
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(pid) => param_grads[pid.0].add_assign(gref),
                Op::MatMul(a, b) => {
                    let da = gref.matmul_tb(&self.nodes[b.0].value);
                    let db = self.nodes[a.0].value.matmul_ta(gref);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulTB(a, b) => {
                    let da = gref.matmul(&self.nodes[b.0].value);
                    let db = gref.matmul_ta(&self.nodes[a.0].value);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gref.clone());
                    accumulate(&mut grads, *b, gref.clone());
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *a, gref.clone());
                    let mut db = Mat::zeros(1, gref.cols());
                    for r in 0..gref.rows() {
                        for c in 0..gref.cols() {
                            *db.row_mut(0).get_mut(c).unwrap() += gref.at(r, c);
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, gref.scale(*c)),
                Op::Hadamard(a, b) => {
                    let da = gref.hadamard(&self.nodes[b.0].value);
                    let db = gref.hadamard(&self.nodes[a.0].value);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Silu(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut da = gref.clone();
                    for (dv, &xv) in da.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        let s = sigmoid(xv);
                        *dv *= s * (1.0 + xv * (1.0 - s));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = gref.clone();
                    for (dv, &yv) in da.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *dv *= yv * (1.0 - yv);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (dx, dgamma, dbeta) = layer_norm_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[gamma.0].value,
                        gref,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::S4Conv { u, bank } => {
                    let bank = *bank;
                    let u = *u;
                    let du = self.s4_conv_backward(u, &bank, gref, &mut param_grads);
                    accumulate(&mut grads, u, du);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[a.0].value.rows();
                    let da = gref.slice_rows(0, ra);
                    let db = gref.slice_rows(ra, gref.rows() - ra);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SliceRows { x, start } => {
                    let xm = &self.nodes[x.0].value;
                    let mut dx = Mat::zeros(xm.rows(), xm.cols());
                    for r in 0..gref.rows() {
                        dx.row_mut(start + r).copy_from_slice(gref.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxRows { x, .. } => {
                    let y = &self.nodes[i].value;
                    let mut dx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = gref.row(r);
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, yr[c] * (gr[c] - s));
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Embed { table, ids } => {
                    let tgrad = &mut param_grads[table.0];
                    for (k, &id) in ids.iter().enumerate() {
                        for (c, &gv) in gref.row(k).iter().enumerate() {
                            let cur = tgrad.at(id, c);
                            tgrad.set(id, c, cur + gv);
                        }
                    }
                }
                Op::CandidatePool { x, cs } => {
                    let xm = &self.nodes[x.0].value;
                    let n = xm.rows();
                    let d = xm.cols();
                    // Range-add via difference rows, then prefix-accumulate.
                    let mut diff = Mat::zeros(n + 1, d);
                    for (m, &(s, l)) in cs.entries().iter().enumerate() {
                        let w = 1.0 / l as f64;
                        for c in 0..d {
                            let gv = gref.at(m, c) * w;
                            let a = diff.at(s - 1, c);
                            diff.set(s - 1, c, a + gv);
                            let b = diff.at(s - 1 + l, c);
                            diff.set(s - 1 + l, c, b - gv);
                        }
                    }
                    let mut dx = Mat::zeros(n, d);
                    let mut acc = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            acc[c] += diff.at(r, c);
                            dx.set(r, c, acc[c]);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Suppress { v, scores, cs, theta, k } => {
                    let vm = &self.nodes[v.0].value;
                    let sm = &self.nodes[scores.0].value;
                    let scales = suppression_row_scales(sm, theta, cs, *k, vm.rows());
                    let mut dv = gref.clone();
                    for r in 0..dv.rows() {
                        let s = scales[r];
                        for x in dv.row_mut(r) {
                            *x *= s;
                        }
                    }
                    let mut ds = Mat::zeros(sm.rows(), 1);
                    let inv_k = 1.0 / *k as f64;
                    for &idx in theta.iter() {
                        let (s, l) = cs.entries()[idx];
                        let mut acc = 0.0;
                        for r in (s - 1)..(s - 1 + l) {
                            let grow = gref.row(r);
                            let vrow = vm.row(r);
                            for c in 0..vm.cols() {
                                acc += grow[c] * vrow[c];
                            }
                        }
                        ds.set(idx, 0, acc * inv_k);
                    }
                    accumulate(&mut grads, *v, dv);
                    accumulate(&mut grads, *scores, ds);
                }
                Op::FocalLoss { p, targets, alpha, gamma } => {
                    let pm = &self.nodes[p.0].value;
                    let scale = gref.item() / targets.len() as f64;
                    let mut dp = Mat::zeros(pm.rows(), 1);
                    for m in 0..pm.rows() {
                        let (_, d) = focal_term(pm.at(m, 0), targets[m], *alpha, *gamma);
                        dp.set(m, 0, d * scale);
                    }
                    accumulate(&mut grads, *p, dp);
                }
                Op::TokenCe { rows, gold } => {
                    let rm = &self.nodes[rows.0].value;
                    let scale = gref.item() / gold.len() as f64;
                    let mut dr = Mat::zeros(rm.rows(), rm.cols());
                    for (kk, &gid) in gold.iter().enumerate() {
                        let p = rm.at(kk, gid);
                        if p >= 1e-12 {
                            dr.set(kk, gid, -scale / p);
                        }
                    }
                    accumulate(&mut grads, *rows, dr);
                }
                Op::DotConst { x, w } => {
                    accumulate(&mut grads, *x, w.scale(gref.item()));
                }
            }
            grads[i] = Some(g);
        }
        self.node_grads = grads;
        param_grads
    }

    /// Adjoint of the fused S4 convolution. Returns the input gradient and
    /// accumulates parameter gradients for the bank.
    fn s4_conv_backward(
        &self,
        u: NodeId,
        bank: &SsmBankIds,
        g: &Mat,
        param_grads: &mut [Mat],
    ) -> Mat {
        let um = &self.nodes[u.0].value;
        let (l, d) = um.shape();
        let mut du = Mat::zeros(l, d);
        for ch in 0..d {
            let cont = self.channel_continuous(bank, ch);
            let dssm = ssm::discretize(&cont).expect("stable");
            let taps = ssm::materialize_kernel(&dssm, l).taps;
            let g_col = g.col(ch);
            let u_col = um.col(ch);
            // dL/dtaps and dL/du via causal correlations.
            let grad_taps = ssm::fft_causal_correlate(&g_col, &u_col);
            let grad_u = ssm::fft_causal_correlate(&g_col, &taps);
            du.set_col(ch, &grad_u);

            let step = cont.step_size();
            let mut d_log_step = 0.0;
            for r in 0..cont.state_dim {
                let a = cont.a_diag[r];
                let b = cont.b[r];
                let dd = cont.d[r];
                let a_bar = dssm.a_bar[r];
                let b_bar = dssm.b_bar[r];
                let w = dd * b_bar;

                // s0 = sum_i gt[i] conj(a_bar)^i
                // s1 = sum_{i>=1} gt[i] * i * conj(a_bar)^(i-1)
                let ca = a_bar.conj();
                let mut pw = Complex64::new(1.0, 0.0);
                let mut s0 = Complex64::new(0.0, 0.0);
                let mut s1 = Complex64::new(0.0, 0.0);
                for (i, &gt) in grad_taps.iter().enumerate() {
                    s0 += pw * gt;
                    if i + 1 < l {
                        s1 += pw * (grad_taps[i + 1] * (i + 1) as f64);
                    }
                    pw *= ca;
                }

                // Gradients in the (d/dx + i d/dy) convention; for real loss L
                // and holomorphic w = f(z): G_z = G_w * conj(f'(z)).
                let g_w = s0;
                let g_abar = w.conj() * s1;
                let g_bbar = g_w * dd.conj();
                let g_d = g_w * b_bar.conj();
                let den = Complex64::new(1.0, 0.0) - a * (step / 2.0);
                let den2 = den * den;
                let g_a = g_abar * (Complex64::new(step, 0.0) / den2).conj()
                    + g_bbar * (b * (step * step / 2.0) / den2).conj();
                let g_b = g_bbar * (Complex64::new(step, 0.0) / den).conj();
                let d_step = (g_abar * (a / den2).conj()).re + (g_bbar * (b / den2).conj()).re;
                d_log_step += d_step * step;

                add_at(&mut param_grads[bank.a_re.0], ch, r, g_a.re);
                add_at(&mut param_grads[bank.a_im.0], ch, r, g_a.im);
                add_at(&mut param_grads[bank.b_re.0], ch, r, g_b.re);
                add_at(&mut param_grads[bank.b_im.0], ch, r, g_b.im);
                add_at(&mut param_grads[bank.d_re.0], ch, r, g_d.re);
                add_at(&mut param_grads[bank.d_im.0], ch, r, g_d.im);
            }
            add_at(&mut param_grads[bank.log_step.0], ch, 0, d_log_step);
        }
        du
    }
}

fn add_at(m: &mut Mat, r: usize, c: usize, v: f64) {
    let cur = m.at(r, c);
    m.set(r, c, cur + v);
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + NORM_EPS).sqrt())
}

fn layer_norm_backward(x: &Mat, gamma: &Mat, g: &Mat) -> (Mat, Mat, Mat) {
    let (rows, cols) = x.shape();
    let mut dx = Mat::zeros(rows, cols);
    let mut dgamma = Mat::zeros(1, cols);
    let mut dbeta = Mat::zeros(1, cols);
    let n = cols as f64;
    for r in 0..rows {
        let xr = x.row(r);
        let grr = g.row(r);
        let (mu, inv) = row_stats(xr);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        let mut xhat = vec![0.0; cols];
        let mut dxhat = vec![0.0; cols];
        for c in 0..cols {
            xhat[c] = (xr[c] - mu) * inv;
            dxhat[c] = grr[c] * gamma.at(0, c);
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xhat[c];
            dgamma.set(0, c, dgamma.at(0, c) + grr[c] * xhat[c]);
            dbeta.set(0, c, dbeta.at(0, c) + grr[c]);
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        for c in 0..cols {
            dx.set(r, c, inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat));
        }
    }
    (dx, dgamma, dbeta)
}

/// Indices of the k largest scores, ties broken toward the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Margin between the k-th and (k+1)-th scores (infinite when k == M).
pub fn top_k_margin(scores: &[f64], k: usize) -> f64 {
    if k >= scores.len() {
        return f64::INFINITY;
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sorted[k - 1] - sorted[k]
}

fn suppression_row_scales(
    scores: &Mat,
    theta: &[usize],
    cs: &CandidateSet,
    k: usize,
    n_rows: usize,
) -> Vec<f64> {
    let inv_k = 1.0 / k as f64;
    let mut scales = vec![0.0; n_rows];
    for &idx in theta {
        let p = scores.at(idx, 0);
        let (s, l) = cs.entries()[idx];
        for scale in scales.iter_mut().skip(s - 1).take(l) {
            *scale += p * inv_k;
        }
    }
    scales
}

fn focal_term(p_hat: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let positive = target >= 0.5;
    let (p_t, dpt_dp) = if positive { (p_hat, 1.0) } else { (1.0 - p_hat, -1.0) };
    let alpha_t = if positive { alpha } else { 1.0 - alpha };
    let clamped = p_t.clamp(1e-7, 1.0 - 1e-7);
    let one_minus = 1.0 - clamped;
    let loss = -alpha_t * one_minus.powf(gamma) * clamped.ln();
    if p_t < 1e-7 || p_t > 1.0 - 1e-7 {
        // Saturated by the clamp: locally constant.
        return (loss, 0.0);
    }
    let d_loss_dpt = if gamma == 0.0 {
        -alpha_t / clamped
    } else {
        -alpha_t * (-gamma * one_minus.powf(gamma - 1.0) * clamped.ln() + one_minus.powf(gamma) / clamped)
    };
    (loss, d_loss_dpt * dpt_dp)
}
