//! Causal self-attention sequence encoder over item ids, with hand-written
//! backpropagation.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Stable item-id to row mapping (ids sorted).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemVocab {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl ItemVocab {
    pub fn new<I: IntoIterator<Item = String>>(ids: I) -> Self {
        let mut ids: Vec<String> = ids.into_iter().collect();
        ids.sort();
        ids.dedup();
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Self { ids, index }
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// One transformer block without normalization: multi-head causal attention with a
/// residual, then a tanh feed-forward with a residual.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub item_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<AttentionBlock>,
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

impl AttentionBlock {
    fn init<R: Rng>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        let sd = 1.0 / (dim as f64).sqrt();
        Self {
            wq: gaussian(rng, dim, dim, sd),
            wk: gaussian(rng, dim, dim, sd),
            wv: gaussian(rng, dim, dim, sd),
            wo: gaussian(rng, dim, dim, sd),
            w1: gaussian(rng, dim, hidden, sd),
            b1: Array2::zeros((1, hidden)),
            w2: gaussian(rng, hidden, dim, 1.0 / (hidden as f64).sqrt()),
            b2: Array2::zeros((1, dim)),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Self {
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
        }
    }

    pub(crate) fn named(&self) -> [(&'static str, &Array2<f64>); 8] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub(crate) fn named_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 8] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

impl EncoderParams {
    pub fn init<R: Rng>(rng: &mut R, n_items: usize, dim: usize, max_len: usize, blocks: usize, hidden: usize) -> Self {
        Self {
            item_emb: gaussian(rng, n_items, dim, 0.1),
            pos_emb: gaussian(rng, max_len, dim, 0.1),
            blocks: (0..blocks).map(|_| AttentionBlock::init(rng, dim, hidden)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            item_emb: Array2::zeros(self.item_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            blocks: self.blocks.iter().map(AttentionBlock::zeros_like).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.pos_emb.ncols()
    }

    pub fn max_len(&self) -> usize {
        self.pos_emb.nrows()
    }

    /// Embedding row of an item, or zeros for a cold item.
    pub fn item_vector(&self, row: Option<usize>) -> ndarray::Array1<f64> {
        match row {
            Some(r) => self.item_emb.row(r).to_owned(),
            None => ndarray::Array1::zeros(self.dim()),
        }
    }
}

pub(crate) struct BlockCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    u: Array2<f64>,
    hact: Array2<f64>,
}

pub(crate) struct EncoderCache {
    rows: Vec<Option<usize>>,
    blocks: Vec<BlockCache>,
    pub out: Array2<f64>,
}

fn block_forward(block: &AttentionBlock, x: &Array2<f64>, heads: usize) -> (Array2<f64>, BlockCache) {
    let (m, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = x.dot(&block.wq);
    let k = x.dot(&block.wk);
    let v = x.dot(&block.wv);
    let mut o = Array2::zeros((m, d));
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for i in 0..m {
            let mut row = a.row_mut(i);
            let max = row.iter().take(i + 1).fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let mut sum = 0.0;
            for (j, val) in row.iter_mut().enumerate() {
                if j <= i {
                    *val = (*val - max).exp();
                    sum += *val;
                } else {
                    *val = 0.0;
                }
            }
            row /= sum;
        }
        o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        attn.push(a);
    }
    let u = x + &o.dot(&block.wo);
    let hact = (u.dot(&block.w1) + &block.b1).mapv(f64::tanh);
    let y = &u + &(hact.dot(&block.w2) + &block.b2);
    (y, BlockCache { x: x.clone(), q, k, v, attn, o, u, hact })
}

/// Returns d(loss)/d(x) and accumulates parameter gradients into `grad`.
fn block_backward(block: &AttentionBlock, cache: &BlockCache, dy: &Array2<f64>, heads: usize, grad: &mut AttentionBlock) -> Array2<f64> {
    let d = cache.x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Feed-forward branch.
    grad.w2 += &cache.hact.t().dot(dy);
    grad.b2 += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dpre = dy.dot(&block.w2.t()) * cache.hact.mapv(|h| 1.0 - h * h);
    grad.w1 += &cache.u.t().dot(&dpre);
    grad.b1 += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
    let du = dy + &dpre.dot(&block.w1.t());

    // Attention branch.
    grad.wo += &cache.o.t().dot(&du);
    let d_o = du.dot(&block.wo.t());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = &cache.attn[h];
        let doh = d_o.slice(cols);
        let da = doh.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&doh));
        let row_dot = (a * &da).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = a * &(&da - &row_dot) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    grad.wq += &cache.x.t().dot(&dq);
    grad.wk += &cache.x.t().dot(&dk);
    grad.wv += &cache.x.t().dot(&dv);
    du + dq.dot(&block.wq.t()) + dk.dot(&block.wk.t()) + dv.dot(&block.wv.t())
}

/// Runs the encoder over up to `max_len` item rows (`None` = cold item).
pub(crate) fn encoder_forward(params: &EncoderParams, rows: &[Option<usize>], heads: usize) -> EncoderCache {
    let m = rows.len();
    assert!(m <= params.max_len(), "sequence of {m} exceeds encoder max_len {}", params.max_len());
    let mut x = params.pos_emb.slice(s![..m, ..]).to_owned();
    for (p, row) in rows.iter().enumerate() {
        if let Some(r) = row {
            let mut xr = x.row_mut(p);
            xr += &params.item_emb.row(*r);
        }
    }
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (y, cache) = block_forward(block, &x, heads);
        blocks.push(cache);
        x = y;
    }
    EncoderCache { rows: rows.to_vec(), blocks, out: x }
}

pub(crate) fn encoder_backward(params: &EncoderParams, cache: &EncoderCache, d_out: &Array2<f64>, heads: usize, grad: &mut EncoderParams) {
    let mut d = d_out.clone();
    for (idx, block) in params.blocks.iter().enumerate().rev() {
        d = block_backward(block, &cache.blocks[idx], &d, heads, &mut grad.blocks[idx]);
    }
    let m = cache.rows.len();
    {
        let mut gp = grad.pos_emb.slice_mut(s![..m, ..]);
        gp += &d;
    }
    for (p, row) in cache.rows.iter().enumerate() {
        if let Some(r) = row {
            let mut g = grad.item_emb.row_mut(*r);
            g += &d.row(p);
        }
    }
}
