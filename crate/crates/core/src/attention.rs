//! Task-specific attention masking and rotary embeddings driven by event
//! timestamps.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{row_softmax_masked, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Context,
    Retrieval,
    Ranking,
}

impl TokenKind {
    pub fn symbol(self) -> char {
        match self {
            TokenKind::Context => 'C',
            TokenKind::Retrieval => 'R',
            TokenKind::Ranking => 'K',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub kind: TokenKind,
    pub t: i64,
    pub req_group: i64,
    pub event_id: i64,
    pub index: usize,
}

/// `n x n` attention permissions; `get(i, j)` says whether token `i` may
/// attend to token `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl MaskMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                bits.push(f(i, j));
            }
        }
        Self { n, bits }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, allowed: bool) {
        self.bits[i * self.n + j] = allowed;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// One line per row, `#` for permitted and `.` for masked, prefixed by
    /// the row's token kind.
    pub fn render(&self, metas: &[TokenMeta]) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let kind = metas.get(i).map_or('?', |m| m.kind.symbol());
            let _ = write!(out, "{i:>4} {kind} ");
            for j in 0..self.n {
                out.push(if self.get(i, j) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

/// Attention permissions for one sequence.
///
/// `M[i][j]` holds for the diagonal and whenever one of the following does:
/// context→context with `t_i > t_j + theta`; retrieval→context or
/// ranking→context from a strictly earlier request group; ranking→retrieval
/// with the same event id. `theta` only gates context→context edges.
pub fn build_mask(metas: &[TokenMeta], theta: i64) -> MaskMatrix {
    debug_assert!(metas.iter().enumerate().all(|(i, m)| m.index == i));
    MaskMatrix::from_fn(metas.len(), |i, j| i == j || valid_attn(&metas[i], &metas[j], theta))
}

fn valid_attn(a: &TokenMeta, b: &TokenMeta, theta: i64) -> bool {
    use TokenKind::*;
    match (a.kind, b.kind) {
        (Context, Context) => a.t > b.t.saturating_add(theta),
        (Retrieval, Context) | (Ranking, Context) => a.req_group > b.req_group,
        (Ranking, Retrieval) => a.event_id == b.event_id,
        _ => false,
    }
}

/// Which integer coordinate drives the rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopePosition {
    /// Bucketed Unix timestamps.
    #[default]
    Time,
    /// Sequence index, the plain positional variant.
    Index,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    pub bucket_seconds: i64,
    pub base: f64,
    pub head_dim: usize,
    #[serde(default)]
    pub position: RopePosition,
}

impl RopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rope head_dim must be even, got {}", self.head_dim)));
        }
        if !(self.base > 1.0) || !self.base.is_finite() {
            return Err(Error::Config(format!("rope base must exceed 1, got {}", self.base)));
        }
        if self.bucket_seconds < 1 {
            return Err(Error::Config("rope bucket_seconds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn inv_freqs(&self) -> Vec<f64> {
        let d = self.head_dim as f64;
        (0..self.head_dim / 2).map(|k| self.base.powf(-(2.0 * k as f64) / d)).collect()
    }

    pub fn bucket(&self, t: i64) -> i64 {
        t.div_euclid(self.bucket_seconds)
    }
}

/// Ratio between rotation base and effective context length, fixed by the
/// reference pairing of a 7.8e6 base with a 125K-step context.
pub const BASE_PER_CONTEXT_STEP: f64 = 62.4;

/// Rotation base for a history span, proportional to the number of buckets
/// the span covers.
pub fn select_rope_base(history_span_seconds: f64, bucket_seconds: f64) -> f64 {
    BASE_PER_CONTEXT_STEP * (history_span_seconds / bucket_seconds)
}

/// `(sin, cos)` of `pos * freq` where the product is carried in double-double
/// precision. Timestamps around 1.7e9 would otherwise lose ~1e-7 rad.
fn angle_sin_cos(pos: i64, freq: f64) -> (f64, f64) {
    let p = pos as f64;
    let hi = p * freq;
    let lo = p.mul_add(freq, -hi);
    let (sh, ch) = hi.sin_cos();
    let (sl, cl) = lo.sin_cos();
    (sh * cl + ch * sl, ch * cl - sh * sl)
}

/// Per-row cosine and sine tables (`[n x head_dim/2]`) for integer positions.
pub fn rope_tables(positions: &[i64], inv_freqs: &[f64]) -> (Arc<Vec<f64>>, Arc<Vec<f64>>) {
    let half = inv_freqs.len();
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for &f in inv_freqs {
            let (s, c) = angle_sin_cos(p, f);
            cos.push(c);
            sin.push(s);
        }
    }
    (Arc::new(cos), Arc::new(sin))
}

/// Rotates each consecutive dimension pair of row `i` by the angle of its
/// bucketed timestamp `t_list[i]`.
pub fn rope_rotate(x: &Tensor, t_list: &[i64], cfg: &RopeConfig) -> Result<Tensor> {
    cfg.validate()?;
    if x.cols() != cfg.head_dim {
        return Err(Error::shape("rope_rotate", format!("x has {} cols, head_dim {}", x.cols(), cfg.head_dim)));
    }
    if t_list.len() != x.rows() {
        return Err(Error::shape("rope_rotate", format!("{} timestamps for {} rows", t_list.len(), x.rows())));
    }
    let positions: Vec<i64> = t_list.iter().map(|&t| cfg.bucket(t)).collect();
    rotate_positions(x, &positions, cfg)
}

pub(crate) fn rotate_positions(x: &Tensor, positions: &[i64], cfg: &RopeConfig) -> Result<Tensor> {
    let (cos, sin) = rope_tables(positions, &cfg.inv_freqs());
    let out = crate::tensor::rotate_pairs(x.data(), x.cols(), &cos, &sin, false);
    Tensor::matrix(x.rows(), x.cols(), out)
}

/// Integer rotation coordinates for a sequence. Time positions bucket the
/// offset from the earliest token, so a common shift of every timestamp leaves
/// them unchanged.
pub fn sequence_positions(metas: &[TokenMeta], cfg: &RopeConfig) -> Vec<i64> {
    match cfg.position {
        RopePosition::Index => metas.iter().map(|m| m.index as i64).collect(),
        RopePosition::Time => {
            let origin = metas.iter().map(|m| m.t).min().unwrap_or(0);
            metas.iter().map(|m| cfg.bucket(m.t - origin)).collect()
        }
    }
}

/// Scaled, rotated attention scores `(R q)(R k)^T / sqrt(d)` before masking.
pub fn attention_logits(q: &Tensor, k: &Tensor, metas: &[TokenMeta], cfg: &RopeConfig) -> Result<Tensor> {
    cfg.validate()?;
    if q.cols() != cfg.head_dim || k.cols() != cfg.head_dim || q.rows() != metas.len() || k.rows() != metas.len() {
        return Err(Error::shape("attend", "q/k must be [n x head_dim] with one meta per row"));
    }
    let pos = sequence_positions(metas, cfg);
    let qr = rotate_positions(q, &pos, cfg)?;
    let kr = rotate_positions(k, &pos, cfg)?;
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let mut scores = qr.matmul(&kr.transpose())?;
    for v in scores.data_mut() {
        *v *= scale;
    }
    Ok(scores)
}

/// Single-head masked temporal attention.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    metas: &[TokenMeta],
    mask: &MaskMatrix,
    cfg: &RopeConfig,
) -> Result<Tensor> {
    if v.rows() != metas.len() || mask.len() != metas.len() {
        return Err(Error::shape("attend", "v rows and mask size must match the token count"));
    }
    let scores = attention_logits(q, k, metas, cfg)?;
    let weights = row_softmax_masked(&scores, mask)?;
    weights.matmul(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(i: usize, kind: TokenKind, t: i64, g: i64, e: i64) -> TokenMeta {
        TokenMeta { kind, t, req_group: g, event_id: e, index: i }
    }

    fn cfg(bucket: i64, base: f64, head_dim: usize) -> RopeConfig {
        RopeConfig { bucket_seconds: bucket, base, head_dim, position: RopePosition::Time }
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn three_context_tokens_give_lower_triangle() {
        let metas: Vec<_> = (0..3).map(|i| meta(i, TokenKind::Context, 10 * (i as i64 + 1), i as i64, i as i64)).collect();
        let m = build_mask(&metas, 0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), j <= i, "({i},{j})");
            }
        }
    }

    #[test]
    fn retrieval_sees_only_earlier_groups() {
        let metas = vec![
            meta(0, TokenKind::Context, 1, 1, 0),
            meta(1, TokenKind::Context, 2, 1, 1),
            meta(2, TokenKind::Context, 3, 2, 2),
            meta(3, TokenKind::Retrieval, 3, 2, 2),
        ];
        let m = build_mask(&metas, 0);
        assert_eq!(m.row(3), &[true, true, false, true]);
    }

    #[test]
    fn ranking_sees_same_event_retrieval_only() {
        let metas = vec![
            meta(0, TokenKind::Context, 1, 1, 0),
            meta(1, TokenKind::Retrieval, 5, 2, 7),
            meta(2, TokenKind::Retrieval, 5, 2, 8),
            meta(3, TokenKind::Ranking, 5, 2, 7),
        ];
        let m = build_mask(&metas, 0);
        assert_eq!(m.row(3), &[true, true, false, true]);
        // retrieval tokens never see ranking tokens or each other
        assert_eq!(m.row(1), &[true, true, false, false]);
    }

    #[test]
    fn theta_gates_context_edges_only() {
        let metas = vec![
            meta(0, TokenKind::Context, 0, 0, 0),
            meta(1, TokenKind::Context, 100, 1, 1),
            meta(2, TokenKind::Retrieval, 100, 2, 2),
        ];
        let m = build_mask(&metas, 3600);
        assert!(!m.get(1, 0));
        assert!(m.get(2, 0) && m.get(2, 1));
    }

    #[test]
    fn equal_time_contexts_do_not_attend() {
        let metas = vec![meta(0, TokenKind::Context, 5, 0, 0), meta(1, TokenKind::Context, 5, 0, 1)];
        let m = build_mask(&metas, 0);
        assert!(!m.get(1, 0) && !m.get(0, 1));
    }

    #[test]
    fn render_marks_permitted_cells() {
        let metas: Vec<_> = (0..2).map(|i| meta(i, TokenKind::Context, i as i64, 0, i as i64)).collect();
        let s = build_mask(&metas, 0).render(&metas);
        assert_eq!(s, "   0 C #.\n   1 C ##\n");
    }

    #[test]
    fn zero_time_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(&mut rng, 3, 8);
        let y = rope_rotate(&x, &[0, 0, 0], &cfg(1, 10_000.0, 8)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_matrix(&mut rng, 4, 16);
        let y = rope_rotate(&x, &[1_704_096_000, 3, 77, 1_706_774_400], &cfg(1, 7.8e6, 16)).unwrap();
        for i in 0..4 {
            let a: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let b: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_head_dim_rejected() {
        let x = Tensor::zeros(1, 3);
        assert!(rope_rotate(&x, &[0], &cfg(1, 100.0, 3)).is_err());
    }

    #[test]
    fn worked_example_relative_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(1, 7.8e6, 16);
        for _ in 0..20 {
            let q = rand_matrix(&mut rng, 1, 16);
            let k = rand_matrix(&mut rng, 1, 16);
            let (m, n) = (1_704_096_000i64, 1_706_774_400i64);
            let qa = rope_rotate(&q, &[m], &c).unwrap();
            let ka = rope_rotate(&k, &[n], &c).unwrap();
            let kr = rope_rotate(&k, &[n - m], &c).unwrap();
            let abs: f64 = qa.data().iter().zip(ka.data()).map(|(a, b)| a * b).sum();
            let rel: f64 = q.data().iter().zip(kr.data()).map(|(a, b)| a * b).sum();
            assert_eq!(n - m, 2_678_400);
            assert!((abs - rel).abs() < 1e-9, "{abs} vs {rel}");
        }
    }

    #[test]
    fn base_selection() {
        let b = select_rope_base(125_000.0, 1.0);
        assert!((7.7e6..=7.9e6).contains(&b));
        assert!((select_rope_base(125_000.0, 2.0) - b / 2.0).abs() < 1e-6);
        let span: f64 = 90.0 * 86_400.0;
        assert!((span / 60.0 - 129_600.0).abs() < 1e-9);
        assert!((select_rope_base(span, 60.0) - 8.087_04e6).abs() < 1.0);
    }

    #[test]
    fn attend_single_token_returns_value_row() {
        let c = cfg(1, 100.0, 4);
        let q = Tensor::row_vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let v = Tensor::row_vector(vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let metas = vec![meta(0, TokenKind::Context, 9, 0, 0)];
        let out = attend(&q, &q, &v, &metas, &build_mask(&metas, 0), &c).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn attend_shift_by_whole_days_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(60, select_rope_base(90.0 * 86_400.0, 60.0), 8);
        let (q, k, v) = (rand_matrix(&mut rng, 5, 8), rand_matrix(&mut rng, 5, 8), rand_matrix(&mut rng, 5, 8));
        let metas: Vec<_> = (0..5).map(|i| meta(i, TokenKind::Context, 1_700_000_000 + 4000 * i as i64, i as i64, i as i64)).collect();
        let shifted: Vec<_> = metas.iter().map(|m| TokenMeta { t: m.t + 86_400, ..*m }).collect();
        let a = attend(&q, &k, &v, &metas, &build_mask(&metas, 0), &c).unwrap();
        let b = attend(&q, &k, &v, &shifted, &build_mask(&shifted, 0), &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attend_matches_direct_pair_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg(1, 1000.0, 4);
        let (q, k, v) = (rand_matrix(&mut rng, 4, 4), rand_matrix(&mut rng, 4, 4), rand_matrix(&mut rng, 4, 4));
        let ts = [10i64, 25, 26, 90];
        let metas: Vec<_> = (0..4).map(|i| meta(i, TokenKind::Context, ts[i], i as i64, i as i64)).collect();
        let mask = build_mask(&metas, 0);
        let out = attend(&q, &k, &v, &metas, &mask, &c).unwrap();
        // score(i, j) = q_i^T R(t_j - t_i) k_j, written out with plain cos/sin.
        for i in 0..4 {
            let mut w = [0.0; 4];
            for j in 0..=i {
                let gap = (ts[j] - ts[i]) as f64;
                let mut s = 0.0;
                for p in 0..2 {
                    let ang = gap / 1000f64.powf(2.0 * p as f64 / 4.0);
                    let (k0, k1) = (k.get(j, 2 * p), k.get(j, 2 * p + 1));
                    let r0 = k0 * ang.cos() - k1 * ang.sin();
                    let r1 = k0 * ang.sin() + k1 * ang.cos();
                    s += q.get(i, 2 * p) * r0 + q.get(i, 2 * p + 1) * r1;
                }
                w[j] = (s / 2.0).exp();
            }
            let z: f64 = w.iter().sum();
            for col in 0..4 {
                let want: f64 = (0..=i).map(|j| w[j] / z * v.get(j, col)).sum();
                assert!((out.get(i, col) - want).abs() < 1e-12);
            }
        }
    }
}
