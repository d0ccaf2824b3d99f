//! Frozen semantic tables, trainable collaborative tables and the shared
//! fusion MLP that turns slot vectors into model-width tokens.
//!
//! Every token is built from the same slot layout
//! `[query (d_q) ; item semantic (d_s) ; item collaborative (d_c) ; action (d_a)]`.
//! Context tokens leave the query slot at zero, retrieval tokens replace the
//! whole item slot with a trainable mask vector, and ranking tokens carry both.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Action, Event, SynthSpec};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{ParamId, ParamStore, Partition, Tape, Tensor, Var};

pub const SGEM_MAGIC: &[u8; 4] = b"SGEM";
pub const SGEM_VERSION: u32 = 1;
pub const ITEM_FILE: &str = "item_semantic.sgem";
pub const QUERY_FILE: &str = "query_semantic.sgem";

/// Writes one table as `SGEM`: magic, version, rows, dim, then `f32` values.
pub fn write_sgem(path: impl AsRef<Path>, table: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + table.numel() * 4);
    buf.extend_from_slice(SGEM_MAGIC);
    buf.extend_from_slice(&SGEM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(table.cols() as u32).to_le_bytes());
    for &v in table.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads an `SGEM` table, optionally checking its width.
pub fn read_sgem(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: &str| Error::Corrupt { path: path.to_path_buf(), msg: msg.to_string() };
    if bytes.len() < 16 {
        return Err(corrupt("header shorter than 16 bytes"));
    }
    if &bytes[0..4] != SGEM_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != SGEM_VERSION {
        return Err(Error::Version { found: version, expected: SGEM_VERSION });
    }
    let (rows, dim) = (word(8) as usize, word(12) as usize);
    if let Some(want) = expected_dim {
        if dim != want {
            return Err(Error::DimMismatch(format!("{} has dim {dim}, config expects {want}", path.display())));
        }
    }
    let body = &bytes[16..];
    if body.len() != rows * dim * 4 {
        return Err(corrupt(&format!("expected {} payload bytes, found {}", rows * dim * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Tensor::matrix(rows, dim, data).map_err(|_| corrupt("non-finite value"))
}

/// Frozen item and query tables produced by an external encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticStore {
    item: Tensor,
    query: Tensor,
}

impl SemanticStore {
    pub fn new(item: Tensor, query: Tensor) -> Self {
        Self { item, query }
    }

    pub fn item_table(&self) -> &Tensor {
        &self.item
    }

    pub fn query_table(&self) -> &Tensor {
        &self.query
    }

    pub fn items(&self) -> usize {
        self.item.rows()
    }

    pub fn queries(&self) -> usize {
        self.query.rows()
    }

    pub fn item_dim(&self) -> usize {
        self.item.cols()
    }

    pub fn query_dim(&self) -> usize {
        self.query.cols()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        write_sgem(dir.as_ref().join(ITEM_FILE), &self.item)?;
        write_sgem(dir.as_ref().join(QUERY_FILE), &self.query)
    }
}

/// Loads both tables from `dir`, checking widths against the configuration.
pub fn load_semantic(dir: impl AsRef<Path>, item_dim: usize, query_dim: usize) -> Result<SemanticStore> {
    let item = read_sgem(dir.as_ref().join(ITEM_FILE), Some(item_dim))?;
    let query = read_sgem(dir.as_ref().join(QUERY_FILE), Some(query_dim))?;
    Ok(SemanticStore { item, query })
}

/// Clustered stand-in for encoder output: items of one cluster share a
/// random direction, and query `q` gets its own random direction. Values are
/// rounded to `f32` so that a save/load cycle is lossless.
pub fn synth_semantic(spec: &SynthSpec, seed: u64) -> Result<SemanticStore> {
    spec.validate()?;
    let mut rng = stream_rng(seed, Stream::Semantic);
    let unit = |rng: &mut rand_chacha::ChaCha8Rng, dim: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    };
    let centres: Vec<Vec<f64>> = (0..spec.queries).map(|_| unit(&mut rng, spec.item_dim)).collect();
    let mut item = Vec::with_capacity(spec.items * spec.item_dim);
    for i in 0..spec.items {
        let c = &centres[spec.cluster_of(i as u32) as usize];
        let noise = unit(&mut rng, spec.item_dim);
        let row: Vec<f64> = c.iter().zip(&noise).map(|(a, b)| a + spec.cluster_spread * b).collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        item.extend(row.into_iter().map(|x| (x / n) as f32 as f64));
    }
    let mut query = Vec::with_capacity(spec.queries * spec.query_dim);
    for _ in 0..spec.queries {
        query.extend(unit(&mut rng, spec.query_dim).into_iter().map(|x| x as f32 as f64));
    }
    Ok(SemanticStore {
        item: Tensor::matrix(spec.items, spec.item_dim, item)?,
        query: Tensor::matrix(spec.queries, spec.query_dim, query)?,
    })
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("valid normal").sample(rng)
}

pub(crate) fn init_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_parts(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingDims {
    pub query: usize,
    pub item_semantic: usize,
    pub item_collab: usize,
    pub action: usize,
    pub model: usize,
}

impl EmbeddingDims {
    pub fn item_slot(&self) -> usize {
        self.item_semantic + self.item_collab
    }

    pub fn input(&self) -> usize {
        self.query + self.item_slot() + self.action
    }
}

/// Parameter handles for the trainable embedding tables and fusion MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingIds {
    pub item_collab: ParamId,
    pub action_embed: ParamId,
    pub mask_embed: ParamId,
    pub fusion_w1: ParamId,
    pub fusion_b1: ParamId,
    pub fusion_w2: ParamId,
    pub fusion_b2: ParamId,
}

impl EmbeddingIds {
    pub fn register(params: &mut ParamStore, dims: &EmbeddingDims, items: usize, std: f64, rng: &mut impl Rng) -> Self {
        let d = dims.model;
        Self {
            item_collab: params.add("item_collab", init_normal(rng, items, dims.item_collab, std), Partition::Sparse),
            action_embed: params.add("action_embed", init_normal(rng, Action::COUNT, dims.action, std), Partition::Sparse),
            mask_embed: params.add("mask_embed", init_normal(rng, 1, dims.item_slot(), std), Partition::Dense),
            fusion_w1: params.add("fusion.w1", init_normal(rng, dims.input(), d, std), Partition::Dense),
            fusion_b1: params.add("fusion.b1", Tensor::zeros(1, d), Partition::Dense),
            fusion_w2: params.add("fusion.w2", init_normal(rng, d, d, std), Partition::Dense),
            fusion_b2: params.add("fusion.b2", Tensor::zeros(1, d), Partition::Dense),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ItemSlot {
    Item(u32),
    Mask,
}

/// Slot contents for one token before fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenInput {
    pub query: Option<u32>,
    pub item: ItemSlot,
    pub action: Action,
}

impl TokenInput {
    pub fn context(item: u32, action: Action) -> Self {
        Self { query: None, item: ItemSlot::Item(item), action }
    }

    pub fn retrieval(query: Option<u32>, action: Action) -> Self {
        Self { query, item: ItemSlot::Mask, action }
    }

    pub fn ranking(query: Option<u32>, item: u32, action: Action) -> Self {
        Self { query, item: ItemSlot::Item(item), action }
    }

    /// Context token of a logged event; its query is dropped.
    pub fn context_of(event: &Event) -> Self {
        Self::context(event.item_id, event.action)
    }

    /// Retrieval token predicting `event`; the item is never an input.
    pub fn retrieval_of(event: &Event, with_query: bool) -> Self {
        Self::retrieval(event.query_id.filter(|_| with_query), event.action)
    }
}

/// Borrowed view of everything fusion needs.
#[derive(Clone, Copy)]
pub struct Fusion<'a> {
    pub params: &'a ParamStore,
    pub ids: &'a EmbeddingIds,
    pub store: &'a SemanticStore,
    pub dims: &'a EmbeddingDims,
}

impl Fusion<'_> {
    fn check(&self, inputs: &[TokenInput]) -> Result<()> {
        for t in inputs {
            if let Some(q) = t.query {
                if q as usize >= self.store.queries() {
                    return Err(Error::IdOutOfRange { what: "query", id: q as usize, size: self.store.queries() });
                }
            }
            if let ItemSlot::Item(i) = t.item {
                if i as usize >= self.store.items() {
                    return Err(Error::IdOutOfRange { what: "item", id: i as usize, size: self.store.items() });
                }
            }
        }
        Ok(())
    }

    fn frozen_rows(&self, table: &Tensor, rows: impl Iterator<Item = Option<u32>>, n: usize) -> Result<Tensor> {
        let c = table.cols();
        let mut out = Vec::with_capacity(n * c);
        for r in rows {
            match r {
                Some(r) => out.extend_from_slice(table.row(r as usize)),
                None => out.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        Tensor::matrix(n, c, out)
    }

    /// Concatenated slot vectors `[n x input]`, without autodiff.
    pub fn input_matrix(&self, inputs: &[TokenInput]) -> Result<Tensor> {
        self.check(inputs)?;
        let d = self.dims;
        let collab = self.params.get(self.ids.item_collab);
        let mask = self.params.get(self.ids.mask_embed);
        let action = self.params.get(self.ids.action_embed);
        let mut out = Vec::with_capacity(inputs.len() * d.input());
        for t in inputs {
            match t.query {
                Some(q) => out.extend_from_slice(self.store.query_table().row(q as usize)),
                None => out.extend(std::iter::repeat_n(0.0, d.query)),
            }
            match t.item {
                ItemSlot::Item(i) => {
                    out.extend_from_slice(self.store.item_table().row(i as usize));
                    out.extend_from_slice(collab.row(i as usize));
                }
                ItemSlot::Mask => out.extend_from_slice(mask.row(0)),
            }
            out.extend_from_slice(action.row(t.action.index()));
        }
        Tensor::matrix(inputs.len(), d.input(), out)
    }

    /// Records fusion of `inputs` on `tape`, returning `[n x model]`.
    pub fn fuse(&self, tape: &mut Tape, inputs: &[TokenInput]) -> Result<Var> {
        self.check(inputs)?;
        let n = inputs.len();
        let d = self.dims;
        let query = tape.constant(self.frozen_rows(self.store.query_table(), inputs.iter().map(|t| t.query), n)?)?;
        let item_of = |t: &TokenInput| match t.item {
            ItemSlot::Item(i) => Some(i),
            ItemSlot::Mask => None,
        };
        let sem = tape.constant(self.frozen_rows(self.store.item_table(), inputs.iter().map(item_of), n)?)?;

        let collab_table = tape.param(self.ids.item_collab, self.params.get(self.ids.item_collab))?;
        let zero_collab = tape.constant(Tensor::zeros(1, d.item_collab))?;
        let picks: Vec<_> = inputs.iter().map(|t| item_of(t).map_or((1, 0), |i| (0, i as usize))).collect();
        let collab = tape.gather_rows(&[collab_table, zero_collab], &picks)?;
        let item_slot = tape.concat_cols(&[sem, collab])?;

        let mask_table = tape.param(self.ids.mask_embed, self.params.get(self.ids.mask_embed))?;
        let zero_slot = tape.constant(Tensor::zeros(1, d.item_slot()))?;
        let picks: Vec<_> = inputs.iter().map(|t| if item_of(t).is_some() { (1, 0) } else { (0, 0) }).collect();
        let mask = tape.gather_rows(&[mask_table, zero_slot], &picks)?;
        let item_slot = tape.add(item_slot, mask)?;

        let action_table = tape.param(self.ids.action_embed, self.params.get(self.ids.action_embed))?;
        let action_ids: Vec<usize> = inputs.iter().map(|t| t.action.index()).collect();
        let action = tape.embedding_lookup(action_table, &action_ids)?;

        let x = tape.concat_cols(&[query, item_slot, action])?;
        self.mlp(tape, x)
    }

    fn mlp(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = |tape: &mut Tape, id| tape.param(id, self.params.get(id));
        let (w1, b1, w2, b2) = (
            p(tape, self.ids.fusion_w1)?,
            p(tape, self.ids.fusion_b1)?,
            p(tape, self.ids.fusion_w2)?,
            p(tape, self.ids.fusion_b2)?,
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, w2)?;
        tape.add_row(h, b2)
    }

    /// Candidate embeddings `[semantic ; collaborative]` recorded on `tape`.
    pub fn item_embeddings(&self, tape: &mut Tape, items: &[u32]) -> Result<Var> {
        self.check(&items.iter().map(|&i| TokenInput::context(i, Action::Click)).collect::<Vec<_>>())?;
        let sem = tape.constant(self.frozen_rows(self.store.item_table(), items.iter().map(|&i| Some(i)), items.len())?)?;
        let table = tape.param(self.ids.item_collab, self.params.get(self.ids.item_collab))?;
        let ids: Vec<usize> = items.iter().map(|&i| i as usize).collect();
        let collab = tape.embedding_lookup(table, &ids)?;
        tape.concat_cols(&[sem, collab])
    }

    /// Candidate embeddings without autodiff.
    pub fn item_embedding_matrix(&self, items: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.item_embeddings(&mut tape, items)?;
        Ok(tape.value(v).clone())
    }

    pub fn fuse_values(&self, inputs: &[TokenInput]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.fuse(&mut tape, inputs)?;
        Ok(tape.value(v).clone())
    }

    pub fn fuse_context(&self, item: u32, action: Action) -> Result<Tensor> {
        self.fuse_values(&[TokenInput::context(item, action)])
    }

    pub fn fuse_retrieval(&self, query: Option<u32>, action: Action) -> Result<Tensor> {
        self.fuse_values(&[TokenInput::retrieval(query, action)])
    }

    pub fn fuse_ranking(&self, query: Option<u32>, item: u32, action: Action) -> Result<Tensor> {
        self.fuse_values(&[TokenInput::ranking(query, item, action)])
    }
}
