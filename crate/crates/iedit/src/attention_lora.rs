//! Attention projections with optional low-rank adapters and a selective
//! freeze policy: Query weights stay frozen, Key/Value weights adapt.
//!
//! The pure-matrix operations here are the contract surface; the `*_on_tape`
//! functions are the same math expressed on the autograd tape for training.

use crate::autograd::{softmax_row, Tape, Var};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// self · otherᵀ
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * other.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

/// Low-rank factor pair; the weight update is `ΔW = A·Bᵀ` with rank ≤ r.
#[derive(Debug, Clone)]
pub struct LoRAAdapter {
    /// [d_out × r]
    pub a: Matrix,
    /// [d_in × r]
    pub b: Matrix,
    pub rank: usize,
}

impl LoRAAdapter {
    /// Standard init: A small Gaussian (std 0.01), B zero, so the update is
    /// exactly zero before training.
    pub fn init(d_out: usize, d_in: usize, rank: usize, a_init: &[f64]) -> Result<Self> {
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(Error::Config(format!(
                "lora rank {rank} invalid for {d_out}x{d_in} projection"
            )));
        }
        assert_eq!(a_init.len(), d_out * rank);
        Ok(LoRAAdapter {
            a: Matrix::from_vec(d_out, rank, a_init.to_vec()),
            b: Matrix::zeros(d_in, rank),
            rank,
        })
    }
}

/// Either a low-rank factor pair or (for the no-LoRA ablation) a dense delta.
#[derive(Debug, Clone)]
pub enum Adapter {
    LowRank(LoRAAdapter),
    Dense(Matrix),
}

impl Adapter {
    pub fn delta(&self) -> Result<Matrix> {
        match self {
            Adapter::LowRank(l) => lora_delta(l),
            Adapter::Dense(d) => Ok(d.clone()),
        }
    }
}

/// A projection weight: frozen base plus an optional adapter.
#[derive(Debug, Clone)]
pub struct ProjectionWeights {
    /// [d_out × d_in]; never mutated by training.
    pub base: Matrix,
    pub adapter: Option<Adapter>,
}

impl ProjectionWeights {
    pub fn frozen(base: Matrix) -> Self {
        ProjectionWeights {
            base,
            adapter: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    SelfAttn,
    CrossAttn,
}

/// Per-projection train flags for one attention kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjPolicy {
    pub train_q: bool,
    pub train_k: bool,
    pub train_v: bool,
}

/// Which projections receive trainable adapters, per attention kind.
/// The default freezes Query and trains Key/Value in both kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub self_attn: ProjPolicy,
    pub cross_attn: ProjPolicy,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        let kv_only = ProjPolicy {
            train_q: false,
            train_k: true,
            train_v: true,
        };
        FreezePolicy {
            self_attn: kv_only,
            cross_attn: kv_only,
        }
    }
}

impl FreezePolicy {
    /// Train Q as well as K/V (the no-selective-fine-tuning ablation).
    pub fn train_all() -> Self {
        let all = ProjPolicy {
            train_q: true,
            train_k: true,
            train_v: true,
        };
        FreezePolicy {
            self_attn: all,
            cross_attn: all,
        }
    }

    pub fn none() -> Self {
        let off = ProjPolicy {
            train_q: false,
            train_k: false,
            train_v: false,
        };
        FreezePolicy {
            self_attn: off,
            cross_attn: off,
        }
    }

    pub fn for_kind(&self, kind: AttentionKind) -> ProjPolicy {
        match kind {
            AttentionKind::SelfAttn => self.self_attn,
            AttentionKind::CrossAttn => self.cross_attn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjKind {
    Q,
    K,
    V,
}

impl ProjPolicy {
    pub fn trains(&self, proj: ProjKind) -> bool {
        match proj {
            ProjKind::Q => self.train_q,
            ProjKind::K => self.train_k,
            ProjKind::V => self.train_v,
        }
    }
}

/// One attention layer with per-projection weights.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub q_proj: ProjectionWeights,
    pub k_proj: ProjectionWeights,
    pub v_proj: ProjectionWeights,
    pub out_proj: ProjectionWeights,
    pub head_dim: usize,
    pub kind: AttentionKind,
}

/// A reference to one trainable factor matrix inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorRef {
    pub proj: ProjKind,
    /// "a" / "b" for low-rank factors, "delta" for dense adapters.
    pub factor: &'static str,
}

/// ΔW = A·Bᵀ. The result has rank at most `adapter.rank`.
pub fn lora_delta(adapter: &LoRAAdapter) -> Result<Matrix> {
    if adapter.a.cols != adapter.b.cols || adapter.a.cols != adapter.rank {
        return Err(Error::ShapeMismatch {
            ctx: "lora_delta",
            expected: format!(
                "A[{}x{}], B[{}x{}]",
                adapter.a.rows, adapter.rank, adapter.b.rows, adapter.rank
            ),
            got: format!(
                "A[{}x{}], B[{}x{}]",
                adapter.a.rows, adapter.a.cols, adapter.b.rows, adapter.b.cols
            ),
        });
    }
    Ok(adapter.a.matmul_nt(&adapter.b))
}

/// `W = W_original + ΔW` when an adapter is present, else the base unchanged.
pub fn effective_weight(p: &ProjectionWeights) -> Result<Matrix> {
    match &p.adapter {
        None => Ok(p.base.clone()),
        Some(adapter) => {
            let delta = adapter.delta()?;
            if delta.rows != p.base.rows || delta.cols != p.base.cols {
                return Err(Error::ShapeMismatch {
                    ctx: "effective_weight",
                    expected: format!("{}x{}", p.base.rows, p.base.cols),
                    got: format!("{}x{}", delta.rows, delta.cols),
                });
            }
            let mut out = p.base.clone();
            for (o, d) in out.data.iter_mut().zip(&delta.data) {
                *o += d;
            }
            Ok(out)
        }
    }
}

/// Scaled dot-product attention, `Softmax(QKᵀ/√d_k)·V`, split evenly over
/// `n_heads` heads. Every softmax row sums to 1.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, n_heads: usize) -> Result<Matrix> {
    if k.rows == 0 {
        return Err(Error::EmptyContext);
    }
    if q.cols != k.cols
        || k.rows != v.rows
        || !q.cols.is_multiple_of(n_heads)
        || !v.cols.is_multiple_of(n_heads)
    {
        return Err(Error::ShapeMismatch {
            ctx: "attention",
            expected: format!("Q[*x{}], K[*x{}], V[{}x*]", k.cols, k.cols, k.rows),
            got: format!(
                "Q[{}x{}], K[{}x{}], V[{}x{}] heads={n_heads}",
                q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
            ),
        });
    }
    let d_k = q.cols / n_heads;
    let d_v = v.cols / n_heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut out = Matrix::zeros(q.rows, v.cols);
    let mut logits = vec![0.0; k.rows];
    for h in 0..n_heads {
        for i in 0..q.rows {
            for (j, lj) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..d_k {
                    acc += q.get(i, h * d_k + d) * k.get(j, h * d_k + d);
                }
                *lj = acc * scale;
            }
            softmax_row(&mut logits);
            for d in 0..d_v {
                let mut acc = 0.0;
                for (j, &p) in logits.iter().enumerate() {
                    acc += p * v.get(j, h * d_v + d);
                }
                out.set(i, h * d_v + d, acc);
            }
        }
    }
    Ok(out)
}

/// Enumerate the trainable factor matrices of a layer under `policy`.
///
/// Only adapter factors are ever returned; base weights are not trainable.
/// Requesting a projection that carries no adapter is a configuration error.
pub fn trainable_parameters<'a>(
    layer: &'a AttentionLayer,
    policy: &FreezePolicy,
) -> Result<Vec<(FactorRef, &'a Matrix)>> {
    let pp = policy.for_kind(layer.kind);
    let mut out = Vec::new();
    for (proj, weights) in [
        (ProjKind::Q, &layer.q_proj),
        (ProjKind::K, &layer.k_proj),
        (ProjKind::V, &layer.v_proj),
    ] {
        if !pp.trains(proj) {
            continue;
        }
        match &weights.adapter {
            Some(Adapter::LowRank(l)) => {
                out.push((FactorRef { proj, factor: "a" }, &l.a));
                out.push((FactorRef { proj, factor: "b" }, &l.b));
            }
            Some(Adapter::Dense(d)) => {
                out.push((
                    FactorRef {
                        proj,
                        factor: "delta",
                    },
                    d,
                ));
            }
            None => {
                return Err(Error::Config(format!(
                    "policy trains {proj:?} but the projection has no adapter"
                )));
            }
        }
    }
    Ok(out)
}

/// Average per-layer (and per-head) cross-attention maps for one token and
/// min–max normalize the result into [0, 1]. Maps must all share `map_res`.
///
/// The degenerate constant map normalizes to 0.5 everywhere.
pub fn cross_attention_map_from_probs(
    probs_per_layer: &[Matrix],
    token_index: usize,
    map_res: usize,
) -> Result<Vec<f64>> {
    if probs_per_layer.is_empty() {
        return Err(Error::Config(format!(
            "no cross-attention layer at map resolution {map_res}"
        )));
    }
    let n_q = map_res * map_res;
    let mut acc = vec![0.0; n_q];
    for probs in probs_per_layer {
        if probs.rows != n_q {
            return Err(Error::ShapeMismatch {
                ctx: "cross_attention_map",
                expected: format!("{n_q} query rows"),
                got: format!("{}", probs.rows),
            });
        }
        if token_index >= probs.cols {
            return Err(Error::Config(format!(
                "token index {token_index} outside conditioning length {}",
                probs.cols
            )));
        }
        for (i, a) in acc.iter_mut().enumerate() {
            *a += probs.get(i, token_index);
        }
    }
    let inv = 1.0 / probs_per_layer.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(minmax_normalize_map(&acc))
}

/// Min–max normalize a map into [0, 1]; constant maps become 0.5 everywhere.
pub fn minmax_normalize_map(map: &[f64]) -> Vec<f64> {
    let mn = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx > mn {
        let inv = 1.0 / (mx - mn);
        map.iter().map(|x| (x - mn) * inv).collect()
    } else {
        vec![0.5; map.len()]
    }
}

/// Adapter factors as tape leaves.
#[derive(Debug, Clone, Copy)]
pub enum AdapterVars {
    LowRank { a: Var, b: Var },
    Dense { delta: Var },
}

/// Effective projection weight on the tape: `base + ΔW`.
pub fn effective_weight_on_tape(tape: &mut Tape, base: Var, adapter: Option<AdapterVars>) -> Var {
    match adapter {
        None => base,
        Some(AdapterVars::LowRank { a, b }) => {
            let bt = tape.transpose(b);
            let delta = tape.matmul(a, bt);
            tape.add(base, delta)
        }
        Some(AdapterVars::Dense { delta }) => tape.add(base, delta),
    }
}

/// Attention on the tape. Returns the output `[n_q × d_v·h]` and the per-head
/// probability matrices `[n_q × n_k]` (softmax rows), which callers may use
/// for cross-attention map capture.
pub fn attention_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let q_cols = tape.shape(q)[1];
    let (k_rows, k_cols) = (tape.shape(k)[0], tape.shape(k)[1]);
    let v_cols = tape.shape(v)[1];
    if k_rows == 0 {
        return Err(Error::EmptyContext);
    }
    if q_cols != k_cols || !q_cols.is_multiple_of(n_heads) || !v_cols.is_multiple_of(n_heads) {
        return Err(Error::ShapeMismatch {
            ctx: "attention_on_tape",
            expected: format!("Q/K width multiple of {n_heads} heads"),
            got: format!("Q[*x{q_cols}] K[*x{k_cols}] V[*x{v_cols}]"),
        });
    }
    let d_k = q_cols / n_heads;
    let d_v = v_cols / n_heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut head_outs = Vec::with_capacity(n_heads);
    let mut head_probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = if n_heads == 1 {
            q
        } else {
            tape.slice_cols(q, h * d_k, d_k)
        };
        let kh = if n_heads == 1 {
            k
        } else {
            tape.slice_cols(k, h * d_k, d_k)
        };
        let vh = if n_heads == 1 {
            v
        } else {
            tape.slice_cols(v, h * d_v, d_v)
        };
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt);
        let scaled = tape.scale(logits, scale);
        let probs = tape.softmax_rows(scaled);
        let out = tape.matmul(probs, vh);
        head_probs.push(probs);
        head_outs.push(out);
    }
    let out = if n_heads == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)
    };
    Ok((out, head_probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::testutil::{finite_diff, naive_attention, singular_values};
    use proptest::prelude::*;

    #[test]
    fn lora_delta_zero_factor_gives_zero_matrix() {
        let adapter = LoRAAdapter {
            a: Matrix::zeros(4, 2),
            b: Matrix::from_vec(3, 2, rng::normal_vec(1, "b", 0, 6)),
            rank: 2,
        };
        let d = lora_delta(&adapter).unwrap();
        assert_eq!((d.rows, d.cols), (4, 3));
        assert!(d.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lora_delta_rank_one_outer_product() {
        // A = [[1],[0]], B = [[1],[1]]  =>  A·Bᵀ = [[1,1],[0,0]]
        let adapter = LoRAAdapter {
            a: Matrix::from_vec(2, 1, vec![1.0, 0.0]),
            b: Matrix::from_vec(2, 1, vec![1.0, 1.0]),
            rank: 1,
        };
        let d = lora_delta(&adapter).unwrap();
        assert_eq!(d.data, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn lora_delta_numerical_rank_bounded_by_r() {
        let adapter = LoRAAdapter {
            a: Matrix::from_vec(8, 4, rng::normal_vec(2, "a", 0, 32)),
            b: Matrix::from_vec(8, 4, rng::normal_vec(2, "b", 0, 32)),
            rank: 4,
        };
        let d = lora_delta(&adapter).unwrap();
        let sv = singular_values(&d.data, d.rows, d.cols);
        assert!(sv[0] > 0.1);
        for &s in &sv[4..] {
            assert!(s < 1e-8 * sv[0], "singular value {s} beyond rank bound");
        }
    }

    #[test]
    fn lora_delta_shape_mismatch_errors() {
        let adapter = LoRAAdapter {
            a: Matrix::zeros(4, 2),
            b: Matrix::zeros(3, 3),
            rank: 2,
        };
        assert!(matches!(
            lora_delta(&adapter),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn effective_weight_identity_cases() {
        let base = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let p = ProjectionWeights::frozen(base.clone());
        assert_eq!(effective_weight(&p).unwrap(), base);

        // zero A factor leaves the base untouched, bit for bit
        let p = ProjectionWeights {
            base: base.clone(),
            adapter: Some(Adapter::LowRank(LoRAAdapter {
                a: Matrix::zeros(2, 1),
                b: Matrix::from_vec(2, 1, vec![5.0, 7.0]),
                rank: 1,
            })),
        };
        assert_eq!(effective_weight(&p).unwrap(), base);
    }

    #[test]
    fn effective_weight_adds_single_off_diagonal() {
        // base = I(4); A = e1, B = e2 (unit vectors) => I + E_{0,1}
        let mut base = Matrix::zeros(4, 4);
        for i in 0..4 {
            base.set(i, i, 1.0);
        }
        let mut a = Matrix::zeros(4, 1);
        a.set(0, 0, 1.0);
        let mut b = Matrix::zeros(4, 1);
        b.set(1, 0, 1.0);
        let p = ProjectionWeights {
            base: base.clone(),
            adapter: Some(Adapter::LowRank(LoRAAdapter { a, b, rank: 1 })),
        };
        let w = effective_weight(&p).unwrap();
        let mut expected = base;
        expected.set(0, 1, 1.0);
        assert_eq!(w, expected);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let q = Matrix::from_vec(3, 2, rng::normal_vec(3, "q", 0, 6));
        let k = Matrix::from_vec(1, 2, rng::normal_vec(3, "k", 0, 2));
        let v = Matrix::from_vec(1, 2, vec![0.4, -1.2]);
        let out = attention(&q, &k, &v, 1).unwrap();
        for r in 0..3 {
            assert!((out.get(r, 0) - 0.4).abs() < 1e-12);
            assert!((out.get(r, 1) + 1.2).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = Matrix::from_vec(2, 2, rng::normal_vec(4, "q", 0, 4));
        let k = Matrix::from_vec(3, 2, vec![0.5, -0.3, 0.5, -0.3, 0.5, -0.3]);
        let v = Matrix::from_vec(3, 1, vec![1.0, 2.0, 6.0]);
        let out = attention(&q, &k, &v, 1).unwrap();
        for r in 0..2 {
            assert!((out.get(r, 0) - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let q = Matrix::from_vec(2, 4, rng::normal_vec(5, "q", 0, 8));
        let k = Matrix::from_vec(3, 4, rng::normal_vec(5, "k", 0, 12));
        let v = Matrix::from_vec(3, 4, rng::normal_vec(5, "v", 0, 12));
        for heads in [1usize, 2] {
            let out = attention(&q, &k, &v, heads).unwrap();
            let oracle = naive_attention(&q.data, &k.data, &v.data, 2, 3, 4, 4, heads);
            for (a, b) in out.data.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_empty_context_errors() {
        let q = Matrix::from_vec(2, 2, vec![0.0; 4]);
        let k = Matrix::zeros(0, 2);
        let v = Matrix::zeros(0, 2);
        assert!(matches!(attention(&q, &k, &v, 1), Err(Error::EmptyContext)));
    }

    fn layer_with_kv_adapters(rank: usize) -> AttentionLayer {
        let d = 4;
        let base = || Matrix::from_vec(d, d, rng::normal_vec(9, "base", 0, d * d));
        let adapter = || {
            Adapter::LowRank(
                LoRAAdapter::init(d, d, rank, &rng::normal_vec(9, "a", 1, d * rank)).unwrap(),
            )
        };
        AttentionLayer {
            q_proj: ProjectionWeights::frozen(base()),
            k_proj: ProjectionWeights {
                base: base(),
                adapter: Some(adapter()),
            },
            v_proj: ProjectionWeights {
                base: base(),
                adapter: Some(adapter()),
            },
            out_proj: ProjectionWeights::frozen(base()),
            head_dim: 4,
            kind: AttentionKind::SelfAttn,
        }
    }

    #[test]
    fn trainable_parameters_default_policy_is_kv_factors() {
        let layer = layer_with_kv_adapters(2);
        let params = trainable_parameters(&layer, &FreezePolicy::default()).unwrap();
        assert_eq!(params.len(), 4); // A_K, B_K, A_V, B_V
        assert!(params.iter().all(|(f, _)| f.proj != ProjKind::Q));
    }

    #[test]
    fn trainable_parameters_all_false_is_empty() {
        let layer = layer_with_kv_adapters(2);
        let params = trainable_parameters(&layer, &FreezePolicy::none()).unwrap();
        assert!(params.is_empty());
    }

    #[test]
    fn trainable_parameters_train_all_needs_q_adapter() {
        let layer = layer_with_kv_adapters(2);
        // Q has no adapter: requesting it is a configuration error.
        assert!(matches!(
            trainable_parameters(&layer, &FreezePolicy::train_all()),
            Err(Error::Config(_))
        ));
        let mut layer = layer;
        layer.q_proj.adapter = Some(Adapter::LowRank(
            LoRAAdapter::init(4, 4, 2, &rng::normal_vec(9, "aq", 2, 8)).unwrap(),
        ));
        let params = trainable_parameters(&layer, &FreezePolicy::train_all()).unwrap();
        assert_eq!(params.len(), 6); // Q, K, V factor pairs
    }

    #[test]
    fn cross_attention_map_uniform_input_normalizes_to_half() {
        let probs = Matrix::from_vec(4, 3, vec![1.0 / 3.0; 12]);
        let map = cross_attention_map_from_probs(&[probs], 1, 2).unwrap();
        assert_eq!(map, vec![0.5; 4]);
    }

    #[test]
    fn cross_attention_map_one_hot() {
        let mut probs = Matrix::zeros(4, 2);
        for r in 0..4 {
            probs.set(r, 0, if r == 2 { 1.0 } else { 0.0 });
            probs.set(r, 1, if r == 2 { 0.0 } else { 1.0 });
        }
        let map = cross_attention_map_from_probs(&[probs], 0, 2).unwrap();
        assert_eq!(map, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_attention_map_matches_independent_average_and_normalize() {
        let l0 = Matrix::from_vec(
            4,
            3,
            rng::normal_vec(6, "l0", 0, 12)
                .iter()
                .map(|x| x.abs())
                .collect(),
        );
        let l1 = Matrix::from_vec(
            4,
            3,
            rng::normal_vec(6, "l1", 0, 12)
                .iter()
                .map(|x| x.abs())
                .collect(),
        );
        let map = cross_attention_map_from_probs(&[l0.clone(), l1.clone()], 2, 2).unwrap();
        // straight-line oracle
        let raw: Vec<f64> = (0..4)
            .map(|r| (l0.get(r, 2) + l1.get(r, 2)) / 2.0)
            .collect();
        let mn = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (m, r) in map.iter().zip(&raw) {
            assert!((m - (r - mn) / (mx - mn)).abs() < 1e-12);
        }
        assert!(map.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn cross_attention_map_requires_a_layer() {
        assert!(matches!(
            cross_attention_map_from_probs(&[], 0, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_grads_wrt_lora_factors_match_finite_differences() {
        // 4-dim toy layer: out = Attention(X·Wqᵀ, X·(Wk+A·Bᵀ)ᵀ, X·Wvᵀ)
        let d = 4;
        let r = 2;
        let x = rng::normal_vec(10, "x", 0, 3 * d);
        let wq = rng::normal_vec(10, "wq", 0, d * d);
        let wk = rng::normal_vec(10, "wk", 0, d * d);
        let wv = rng::normal_vec(10, "wv", 0, d * d);
        let a0 = rng::normal_vec(10, "a", 0, d * r);
        let b0 = rng::normal_vec(10, "b", 0, d * r);

        let run = |av: &[f64], bv: &[f64]| {
            let mut t = Tape::new();
            let vx = t.leaf(x.clone(), vec![3, d], false);
            let vwq = t.leaf(wq.clone(), vec![d, d], false);
            let vwk = t.leaf(wk.clone(), vec![d, d], false);
            let vwv = t.leaf(wv.clone(), vec![d, d], false);
            let va = t.leaf(av.to_vec(), vec![d, r], true);
            let vb = t.leaf(bv.to_vec(), vec![d, r], true);
            let wk_eff =
                effective_weight_on_tape(&mut t, vwk, Some(AdapterVars::LowRank { a: va, b: vb }));
            let wqt = t.transpose(vwq);
            let wkt = t.transpose(wk_eff);
            let wvt = t.transpose(vwv);
            let q = t.matmul(vx, wqt);
            let k = t.matmul(vx, wkt);
            let v = t.matmul(vx, wvt);
            let (out, _) = attention_on_tape(&mut t, q, k, v, 1).unwrap();
            let zero = t.leaf(vec![0.0; 3 * d], vec![3, d], false);
            let l = t.sq_diff_mean(out, zero);
            (t, va, vb, l)
        };

        let (mut tape, va, vb, l) = run(&a0, &b0);
        let grads = tape.backward(l);
        let ga = grads.get(va).unwrap().to_vec();
        let gb = grads.get(vb).unwrap().to_vec();

        let fd_a = finite_diff(
            &a0,
            &mut |av| {
                let (t, _, _, l) = run(av, &b0);
                t.scalar(l)
            },
            1e-5,
        );
        let fd_b = finite_diff(
            &b0,
            &mut |bv| {
                let (t, _, _, l) = run(&a0, bv);
                t.scalar(l)
            },
            1e-5,
        );
        for (an, fd) in ga.iter().zip(&fd_a) {
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!((an - fd).abs() / denom < 1e-4, "dA {an} vs {fd}");
        }
        for (an, fd) in gb.iter().zip(&fd_b) {
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!((an - fd).abs() / denom < 1e-4, "dB {an} vs {fd}");
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_always_sum_to_one(
            seed in 0u64..1000,
            rows in 1usize..5,
            cols in 1usize..8,
        ) {
            let q = Matrix::from_vec(rows, cols, rng::normal_vec(seed, "pq", 0, rows * cols));
            let k = Matrix::from_vec(3, cols, rng::normal_vec(seed, "pk", 0, 3 * cols));
            let v = Matrix::from_vec(3, 2, rng::normal_vec(seed, "pv", 0, 6));
            // probe normalization through the convex-combination property:
            // outputs must lie within [min, max] of the value column.
            let out = attention(&q, &k, &v, 1).unwrap();
            for c in 0..2 {
                let vmin = (0..3).map(|r| v.get(r, c)).fold(f64::INFINITY, f64::min);
                let vmax = (0..3).map(|r| v.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
                for r in 0..rows {
                    prop_assert!(out.get(r, c) >= vmin - 1e-9);
                    prop_assert!(out.get(r, c) <= vmax + 1e-9);
                }
            }
        }

        #[test]
        fn lora_rank_bound_property(seed in 0u64..200, rank in 1usize..4) {
            let d = 6;
            let adapter = LoRAAdapter {
                a: Matrix::from_vec(d, rank, rng::normal_vec(seed, "ra", 0, d * rank)),
                b: Matrix::from_vec(d, rank, rng::normal_vec(seed, "rb", 0, d * rank)),
                rank,
            };
            let delta = lora_delta(&adapter).unwrap();
            let sv = singular_values(&delta.data, d, d);
            let smax = sv[0].max(1e-12);
            for &s in &sv[rank..] {
                prop_assert!(s < 1e-8 * smax + 1e-12);
            }
        }
    }
}
