//! Pre-norm decoder-only transformer over fused tokens, with a retrieval
//! head projecting into item-embedding space and a ranking head producing
//! click logits. Also owns the binary checkpoint format.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{build_mask, rope_tables, select_rope_base, sequence_positions, MaskMatrix, RopeConfig, RopePosition, TokenMeta};
use crate::embeddings::{init_normal, EmbeddingDims, EmbeddingIds, Fusion, SemanticStore, TokenInput};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, RngState, Stream};
use crate::tensor::{ParamId, ParamStore, Partition, Tape, Tensor, Var};

/// Ninety days at one-minute buckets.
pub fn default_rope_base() -> f64 {
    select_rope_base(90.0 * 86_400.0, 60.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub query_dim: usize,
    pub item_semantic_dim: usize,
    pub item_collab_dim: usize,
    pub action_dim: usize,
    pub items: usize,
    pub queries: usize,
    pub bucket_seconds: i64,
    pub rope_base: f64,
    pub rope_position: RopePosition,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            mlp_hidden: 256,
            query_dim: 256,
            item_semantic_dim: 128,
            item_collab_dim: 128,
            action_dim: 32,
            items: 200,
            queries: 20,
            bucket_seconds: 60,
            rope_base: default_rope_base(),
            rope_position: RopePosition::Time,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            bucket_seconds: self.bucket_seconds,
            base: self.rope_base,
            head_dim: self.head_dim(),
            position: self.rope_position,
        }
    }

    pub fn embedding_dims(&self) -> EmbeddingDims {
        EmbeddingDims {
            query: self.query_dim,
            item_semantic: self.item_semantic_dim,
            item_collab: self.item_collab_dim,
            action: self.action_dim,
            model: self.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads)));
        }
        if self.layers == 0 || self.mlp_hidden == 0 || self.items == 0 || self.queries == 0 {
            return Err(Error::Config("layers, mlp_hidden, items and queries must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        self.rope().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelIds {
    pub embeddings: EmbeddingIds,
    pub layers: Vec<LayerIds>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub retrieval_w: ParamId,
    pub rank_w1: ParamId,
    pub rank_b1: ParamId,
    pub rank_w2: ParamId,
    pub rank_b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: ModelIds,
    dims: EmbeddingDims,
}

impl Model {
    /// Fresh parameters drawn from the init stream of `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, Stream::Init);
        let std = config.init_std;
        let d = config.d_model;
        let dims = config.embedding_dims();
        let mut p = ParamStore::new();
        let embeddings = EmbeddingIds::register(&mut p, &dims, config.items, std, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                ln1_gain: p.add(n("ln1.gain"), Tensor::filled(1, d, 1.0), Partition::Dense),
                ln1_bias: p.add(n("ln1.bias"), Tensor::zeros(1, d), Partition::Dense),
                wq: p.add(n("wq"), init_normal(&mut rng, d, d, std), Partition::Dense),
                wk: p.add(n("wk"), init_normal(&mut rng, d, d, std), Partition::Dense),
                wv: p.add(n("wv"), init_normal(&mut rng, d, d, std), Partition::Dense),
                wo: p.add(n("wo"), init_normal(&mut rng, d, d, std), Partition::Dense),
                ln2_gain: p.add(n("ln2.gain"), Tensor::filled(1, d, 1.0), Partition::Dense),
                ln2_bias: p.add(n("ln2.bias"), Tensor::zeros(1, d), Partition::Dense),
                mlp_w1: p.add(n("mlp.w1"), init_normal(&mut rng, d, config.mlp_hidden, std), Partition::Dense),
                mlp_b1: p.add(n("mlp.b1"), Tensor::zeros(1, config.mlp_hidden), Partition::Dense),
                mlp_w2: p.add(n("mlp.w2"), init_normal(&mut rng, config.mlp_hidden, d, std), Partition::Dense),
                mlp_b2: p.add(n("mlp.b2"), Tensor::zeros(1, d), Partition::Dense),
            });
        }
        let ids = ModelIds {
            embeddings,
            layers,
            final_gain: p.add("final_ln.gain", Tensor::filled(1, d, 1.0), Partition::Dense),
            final_bias: p.add("final_ln.bias", Tensor::zeros(1, d), Partition::Dense),
            retrieval_w: p.add("retrieval_head.w", init_normal(&mut rng, d, dims.item_slot(), std), Partition::Dense),
            rank_w1: p.add("ranking_head.w1", init_normal(&mut rng, d, d, std), Partition::Dense),
            rank_b1: p.add("ranking_head.b1", Tensor::zeros(1, d), Partition::Dense),
            rank_w2: p.add("ranking_head.w2", init_normal(&mut rng, d, 1, std), Partition::Dense),
            rank_b2: p.add("ranking_head.b2", Tensor::zeros(1, 1), Partition::Dense),
        };
        Ok(Self { config, params: p, ids, dims })
    }

    pub fn dims(&self) -> &EmbeddingDims {
        &self.dims
    }

    pub fn fusion<'a>(&'a self, store: &'a SemanticStore) -> Fusion<'a> {
        Fusion { params: &self.params, ids: &self.ids.embeddings, store, dims: &self.dims }
    }

    /// Checks that a semantic store matches the configured vocabulary and widths.
    pub fn check_store(&self, store: &SemanticStore) -> Result<()> {
        let c = &self.config;
        if store.items() != c.items || store.queries() != c.queries {
            return Err(Error::DimMismatch(format!(
                "store has {} items / {} queries, model expects {} / {}",
                store.items(),
                store.queries(),
                c.items,
                c.queries
            )));
        }
        if store.item_dim() != c.item_semantic_dim || store.query_dim() != c.query_dim {
            return Err(Error::DimMismatch(format!(
                "store widths {}/{}, model expects {}/{}",
                store.item_dim(),
                store.query_dim(),
                c.item_semantic_dim,
                c.query_dim
            )));
        }
        Ok(())
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> Result<Var> {
        tape.param(id, self.params.get(id))
    }

    /// Final hidden states `[n x d]` for fused tokens `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var, metas: &[TokenMeta], mask: &MaskMatrix) -> Result<Var> {
        let n = tape.value(x).rows();
        if metas.len() != n || mask.len() != n || tape.value(x).cols() != self.config.d_model {
            return Err(Error::shape("forward", format!("{n} tokens, {} metas, mask {}", metas.len(), mask.len())));
        }
        let rope = self.config.rope();
        let positions = sequence_positions(metas, &rope);
        let (cos, sin) = rope_tables(&positions, &rope.inv_freqs());
        let mut h = x;
        for layer in &self.ids.layers {
            h = self.block(tape, h, layer, &cos, &sin, mask)?;
        }
        let g = self.p(tape, self.ids.final_gain)?;
        let b = self.p(tape, self.ids.final_bias)?;
        tape.layer_norm(h, g, b)
    }

    fn block(
        &self,
        tape: &mut Tape,
        x: Var,
        l: &LayerIds,
        cos: &Arc<Vec<f64>>,
        sin: &Arc<Vec<f64>>,
        mask: &MaskMatrix,
    ) -> Result<Var> {
        let dh = self.config.head_dim();
        let (g1, b1) = (self.p(tape, l.ln1_gain)?, self.p(tape, l.ln1_bias)?);
        let h = tape.layer_norm(x, g1, b1)?;
        let (wq, wk, wv, wo) = (self.p(tape, l.wq)?, self.p(tape, l.wk)?, self.p(tape, l.wv)?, self.p(tape, l.wo)?);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let qh = tape.rope(qh, cos.clone(), sin.clone())?;
            let kh = tape.rope(kh, cos.clone(), sin.clone())?;
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            let a = tape.softmax_masked(s, mask)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let att = tape.matmul(cat, wo)?;
        let x = tape.add(x, att)?;

        let (g2, b2) = (self.p(tape, l.ln2_gain)?, self.p(tape, l.ln2_bias)?);
        let h = tape.layer_norm(x, g2, b2)?;
        let (w1, c1, w2, c2) = (self.p(tape, l.mlp_w1)?, self.p(tape, l.mlp_b1)?, self.p(tape, l.mlp_w2)?, self.p(tape, l.mlp_b2)?);
        let m = tape.matmul(h, w1)?;
        let m = tape.add_row(m, c1)?;
        let m = tape.relu(m)?;
        let m = tape.matmul(m, w2)?;
        let m = tape.add_row(m, c2)?;
        tape.add(x, m)
    }

    /// Retrieval-head projection of hidden rows into item-embedding space.
    pub fn retrieval_projection(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let w = self.p(tape, self.ids.retrieval_w)?;
        tape.matmul(h, w)
    }

    /// Ranking-head logits `[n x 1]`.
    pub fn ranking_logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            self.p(tape, self.ids.rank_w1)?,
            self.p(tape, self.ids.rank_b1)?,
            self.p(tape, self.ids.rank_w2)?,
            self.p(tape, self.ids.rank_b2)?,
        );
        let z = tape.matmul(h, w1)?;
        let z = tape.add_row(z, b1)?;
        let z = tape.relu(z)?;
        let z = tape.matmul(z, w2)?;
        tape.add_row(z, b2)
    }

    /// Fuses `inputs`, builds the mask and runs the backbone without autodiff.
    pub fn encode(&self, store: &SemanticStore, inputs: &[TokenInput], metas: &[TokenMeta], theta: i64) -> Result<Tensor> {
        let mask = build_mask(metas, theta);
        let mut tape = Tape::new();
        let x = self.fusion(store).fuse(&mut tape, inputs)?;
        let h = self.forward(&mut tape, x, metas, &mask)?;
        Ok(tape.value(h).clone())
    }

    pub fn forward_values(&self, tokens: &Tensor, metas: &[TokenMeta], mask: &MaskMatrix) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(tokens.clone())?;
        let h = self.forward(&mut tape, x, metas, mask)?;
        Ok(tape.value(h).clone())
    }

    /// Retrieval-head projections for hidden rows, without autodiff.
    pub fn project(&self, h: &Tensor) -> Result<Tensor> {
        h.matmul(self.params.get(self.ids.retrieval_w))
    }

    /// Dot product between the projected hidden state `h` and an item embedding.
    pub fn retrieval_score(&self, h: &[f64], item_embedding: &[f64]) -> Result<f64> {
        let proj = self.project(&Tensor::row_vector(h.to_vec())?)?;
        dot(proj.data(), item_embedding)
    }

    /// Raw click logit for one ranking-token hidden state.
    pub fn ranking_logit(&self, h: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(h.to_vec())?)?;
        let s = self.ranking_logits(&mut tape, x)?;
        Ok(tape.value(s).item())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(&ck.config_json)?;
        let model_value = value.get("model").cloned().unwrap_or(value);
        let config: ModelConfig = serde_json::from_value(model_value)?;
        let mut model = Model::new(config)?;
        model.params.assign_from(&ck.params)?;
        Ok(model)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!("dot of lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// First and second AdamW moments plus the bias-correction step.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerMoments {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerMoments {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let z = |e: &crate::tensor::ParamEntry| Tensor::zeros(e.tensor.rows(), e.tensor.cols());
        Self { step: 0, m: params.entries().iter().map(z).collect(), v: params.entries().iter().map(z).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Canonical JSON of the run configuration; the `model` key holds the
    /// [`ModelConfig`].
    pub config_json: String,
    pub params: ParamStore,
    pub moments: OptimizerMoments,
    pub rng: RngState,
    pub step: u64,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes any value to JSON with object keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, partition: Partition, t: &Tensor) {
    put_u32(buf, name.len() as u32);
    buf.extend_from_slice(name.as_bytes());
    buf.push(match partition {
        Partition::Dense => 0,
        Partition::Sparse => 1,
    });
    put_u32(buf, t.rows() as u32);
    put_u32(buf, t.cols() as u32);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_section(buf: &mut Vec<u8>, tag: &[u8; 4], body: &[u8]) {
    buf.extend_from_slice(tag);
    buf.extend_from_slice(&(body.len() as u64).to_le_bytes());
    buf.extend_from_slice(body);
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_section(&mut out, b"CONF", self.config_json.as_bytes());

        let mut body = Vec::new();
        put_u32(&mut body, self.params.len() as u32);
        for e in self.params.entries() {
            put_tensor(&mut body, &e.name, e.partition, &e.tensor);
        }
        put_section(&mut out, b"PARM", &body);

        let mut body = Vec::new();
        body.extend_from_slice(&self.moments.step.to_le_bytes());
        put_u32(&mut body, self.moments.m.len() as u32);
        for (e, (m, v)) in self.params.entries().iter().zip(self.moments.m.iter().zip(&self.moments.v)) {
            put_tensor(&mut body, &e.name, e.partition, m);
            put_tensor(&mut body, &e.name, e.partition, v);
        }
        put_section(&mut out, b"MOMS", &body);

        let mut body = Vec::new();
        body.extend_from_slice(&self.rng.seed);
        body.extend_from_slice(&self.rng.stream.to_le_bytes());
        body.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_section(&mut out, b"RNGS", &body);
        put_section(&mut out, b"STEP", &self.step.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let config_json = String::from_utf8(r.section(b"CONF")?.to_vec()).map_err(|_| r.corrupt("config is not UTF-8"))?;

        let mut s = Reader { bytes: r.section(b"PARM")?, pos: 0, path };
        let mut params = ParamStore::new();
        for _ in 0..s.u32()? {
            let (name, partition, t) = s.tensor()?;
            params.add(name, t, partition);
        }
        s.finish()?;

        let mut s = Reader { bytes: r.section(b"MOMS")?, pos: 0, path };
        let step = s.u64()?;
        let count = s.u32()? as usize;
        if count != params.len() {
            return Err(s.corrupt("moment count differs from parameter count"));
        }
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for id in params.ids() {
            let (n1, _, mt) = s.tensor()?;
            let (n2, _, vt) = s.tensor()?;
            if n1 != params.name(id) || n2 != params.name(id) || mt.shape() != params.get(id).shape() || vt.shape() != mt.shape() {
                return Err(s.corrupt("moment tensors do not match parameters"));
            }
            m.push(mt);
            v.push(vt);
        }
        s.finish()?;

        let mut s = Reader { bytes: r.section(b"RNGS")?, pos: 0, path };
        let seed: [u8; 32] = s.take(32)?.try_into().expect("32 bytes");
        let stream = s.u64()?;
        let word_pos = u128::from_le_bytes(s.take(16)?.try_into().expect("16 bytes"));
        s.finish()?;

        let mut s = Reader { bytes: r.section(b"STEP")?, pos: 0, path };
        let ck_step = s.u64()?;
        s.finish()?;
        r.finish()?;
        Ok(Self {
            config_json,
            params,
            moments: OptimizerMoments { step, m, v },
            rng: RngState { seed, stream, word_pos },
            step: ck_step,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ck.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: &str) -> Error {
        Error::Corrupt { path: self.path.to_path_buf(), msg: format!("{msg} at byte {}", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<&'a [u8]> {
        if self.take(4)? != tag {
            return Err(self.corrupt(&format!("expected section {}", String::from_utf8_lossy(tag))));
        }
        let len = self.u64()? as usize;
        self.take(len)
    }

    fn tensor(&mut self) -> Result<(String, Partition, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("tensor name is not UTF-8"))?;
        let partition = match self.take(1)?[0] {
            0 => Partition::Dense,
            1 => Partition::Sparse,
            _ => return Err(self.corrupt("unknown partition tag")),
        };
        let (rows, cols) = (self.u32()? as usize, self.u32()? as usize);
        let raw = self.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::matrix(rows, cols, data).map_err(|_| self.corrupt("non-finite tensor value"))?;
        Ok((name, partition, t))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt("trailing bytes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::TokenKind;
    use crate::events::{Action, SynthSpec};
    use crate::embeddings::synth_semantic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            mlp_hidden: 16,
            query_dim: 6,
            item_semantic_dim: 4,
            item_collab_dim: 4,
            action_dim: 3,
            items: 10,
            queries: 3,
            ..ModelConfig::default()
        }
    }

    fn ctx_metas(n: usize) -> Vec<TokenMeta> {
        (0..n)
            .map(|i| TokenMeta { kind: TokenKind::Context, t: 1_700_000_000 + 600 * i as i64, req_group: i as i64, event_id: i as i64, index: i })
            .collect()
    }

    fn rand_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_context_token_is_finite() {
        let m = Model::new(small()).unwrap();
        let metas = ctx_metas(1);
        let out = m.forward_values(&Tensor::filled(1, 8, 0.3), &metas, &build_mask(&metas, 0)).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
        assert!(out.is_finite());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig { d_model: 10, heads: 4, ..small() };
        assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn swapping_mutually_invisible_tokens_leaves_other_rows() {
        let m = Model::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut metas = ctx_metas(5);
        // Tokens 2 and 3 share a timestamp, so neither sees the other.
        metas[3].t = metas[2].t;
        let x = rand_tokens(&mut rng, 5, 8);
        let out = m.forward_values(&x, &metas, &build_mask(&metas, 0)).unwrap();

        let mut rows: Vec<Vec<f64>> = (0..5).map(|i| x.row(i).to_vec()).collect();
        rows.swap(2, 3);
        let mut swapped = metas.clone();
        swapped.swap(2, 3);
        for (i, mm) in swapped.iter_mut().enumerate() {
            mm.index = i;
        }
        let out2 = m.forward_values(&Tensor::from_rows(&rows).unwrap(), &swapped, &build_mask(&swapped, 0)).unwrap();
        let pairs = [(0, 0), (1, 1), (2, 3), (3, 2), (4, 4)];
        for (a, b) in pairs {
            for (u, v) in out.row(a).iter().zip(out2.row(b)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    fn manual_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
    }

    fn manual_affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        (0..w.cols()).map(|j| b.get(0, j) + x.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum::<f64>()).collect()
    }

    #[test]
    fn zero_output_projection_reduces_to_mlp_stack() {
        let mut m = Model::new(small()).unwrap();
        for l in m.ids.layers.clone() {
            *m.params.get_mut(l.wo) = Tensor::zeros(8, 8);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let metas = ctx_metas(4);
        let x = rand_tokens(&mut rng, 4, 8);
        let out = m.forward_values(&x, &metas, &build_mask(&metas, 0)).unwrap();
        let p = &m.params;
        for r in 0..4 {
            let mut h = x.row(r).to_vec();
            for l in &m.ids.layers {
                let n = manual_layer_norm(&h, p.get(l.ln2_gain).data(), p.get(l.ln2_bias).data());
                let a: Vec<f64> = manual_affine(&n, p.get(l.mlp_w1), p.get(l.mlp_b1)).into_iter().map(|v| v.max(0.0)).collect();
                let o = manual_affine(&a, p.get(l.mlp_w2), p.get(l.mlp_b2));
                h = h.iter().zip(&o).map(|(u, v)| u + v).collect();
            }
            let want = manual_layer_norm(&h, p.get(m.ids.final_gain).data(), p.get(m.ids.final_bias).data());
            for (u, v) in out.row(r).iter().zip(&want) {
                assert!((u - v).abs() < 1e-10, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn retrieval_score_is_bilinear_and_argmax_matches() {
        let m = Model::new(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ef: Vec<f64> = e.iter().zip(&f).map(|(a, b)| a + b).collect();
        let lhs = m.retrieval_score(&h, &e).unwrap() + m.retrieval_score(&h, &f).unwrap();
        assert!((lhs - m.retrieval_score(&h, &ef).unwrap()).abs() < 1e-12);

        let proj = m.project(&Tensor::row_vector(h.clone()).unwrap()).unwrap();
        let mut ortho = vec![0.0; 8];
        ortho[0] = proj.data()[1];
        ortho[1] = -proj.data()[0];
        assert!(m.retrieval_score(&h, &ortho).unwrap().abs() < 1e-15);

        let store = synth_semantic(&SynthSpec { items: 10, queries: 3, item_dim: 4, query_dim: 6, ..SynthSpec::default() }, 1).unwrap();
        let items: Vec<u32> = (0..10).collect();
        let emb = m.fusion(&store).item_embedding_matrix(&items).unwrap();
        let scores = proj.matmul(&emb.transpose()).unwrap();
        let best = (0..10).max_by(|&a, &b| scores.get(0, a).total_cmp(&scores.get(0, b))).unwrap();
        let brute = (0..10)
            .max_by(|&a, &b| m.retrieval_score(&h, emb.row(a)).unwrap().total_cmp(&m.retrieval_score(&h, emb.row(b)).unwrap()))
            .unwrap();
        assert_eq!(best, brute);
        assert!(matches!(m.retrieval_score(&h, &[1.0]), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn ranking_logit_zero_weights_and_bias_monotone() {
        let mut m = Model::new(small()).unwrap();
        let h = vec![0.5; 8];
        let zero = m.ids.rank_w2;
        let saved = m.params.get(zero).clone();
        *m.params.get_mut(zero) = Tensor::zeros(8, 1);
        assert_eq!(m.ranking_logit(&h).unwrap(), 0.0);
        *m.params.get_mut(zero) = saved;
        let a = m.ranking_logit(&h).unwrap();
        assert_eq!(a, m.ranking_logit(&h).unwrap());
        let mut last = f64::NEG_INFINITY;
        for b in [-2.0, -0.5, 0.0, 1.0, 3.0] {
            *m.params.get_mut(m.ids.rank_b2) = Tensor::scalar(b);
            let s = m.ranking_logit(&h).unwrap();
            assert!(s > last);
            last = s;
        }
    }

    fn sample_checkpoint() -> Checkpoint {
        let m = Model::new(small()).unwrap();
        let mut moments = OptimizerMoments::zeros_like(&m.params);
        moments.step = 7;
        *moments.m[0].data_mut().first_mut().unwrap() = 0.25;
        Checkpoint {
            config_json: canonical_json(&serde_json::json!({ "model": m.config })).unwrap(),
            params: m.params.clone(),
            moments,
            rng: RngState::capture(&stream_rng(1, Stream::Train)),
            step: 7,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let ck = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.sgck");
        save_checkpoint(&p, &ck).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let model = Model::from_checkpoint(&back).unwrap();
        assert_eq!(model.params, ck.params);
    }

    #[test]
    fn checkpoint_rejects_wrong_version_and_truncation() {
        let mut bytes = sample_checkpoint().to_bytes();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes, p), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes, p), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn encode_runs_end_to_end() {
        let m = Model::new(small()).unwrap();
        let store = synth_semantic(&SynthSpec { items: 10, queries: 3, item_dim: 4, query_dim: 6, ..SynthSpec::default() }, 2).unwrap();
        m.check_store(&store).unwrap();
        let inputs = [TokenInput::context(1, Action::Click), TokenInput::retrieval(Some(2), Action::Click)];
        let metas = [
            TokenMeta { kind: TokenKind::Context, t: 100, req_group: 0, event_id: 0, index: 0 },
            TokenMeta { kind: TokenKind::Retrieval, t: 200, req_group: 1, event_id: 1, index: 1 },
        ];
        let h = m.encode(&store, &inputs, &metas, 0).unwrap();
        assert_eq!(h.shape(), &[2, 8]);
    }
}
