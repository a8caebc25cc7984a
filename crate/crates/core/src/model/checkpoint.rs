//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "RCPT"
//! version    u32
//! dims       7 x u32  text_dim hash_vocab collab_dim blocks heads ffn_hidden max_len
//! n_items    u32
//! step       u64
//! seed       u64
//! text_seed  u64
//! flags      u32      bit 0: collaborative encoder trained
//! text_sha   32 bytes SHA-256 of the frozen text table
//! n_tensors  u32
//! tensor*    u16 name length, name, u32 rows, u32 cols, rows*cols f32
//! item id*   n_items x (u32 length, UTF-8 bytes)
//! ```

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

use super::{EncoderParams, ItemVocab, ModelConfig, ModelError, Recommender, TextEmbedder};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RCPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub n_items: usize,
    pub step: u64,
    pub seed: u64,
    pub encoder_trained: bool,
    pub text_sha256: [u8; 32],
    pub tensors: Vec<(String, usize, usize)>,
}

impl fmt::Display for CheckpointHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(f, "version          {}", self.version)?;
        writeln!(f, "text_dim         {}", c.text_dim)?;
        writeln!(f, "hash_vocab       {}", c.hash_vocab)?;
        writeln!(f, "text_seed        {}", c.text_seed)?;
        writeln!(f, "collab_dim       {}", c.collab_dim)?;
        writeln!(f, "blocks           {}", c.blocks)?;
        writeln!(f, "heads            {}", c.heads)?;
        writeln!(f, "ffn_hidden       {}", c.ffn_hidden)?;
        writeln!(f, "max_len          {}", c.max_len)?;
        writeln!(f, "items            {}", self.n_items)?;
        writeln!(f, "step             {}", self.step)?;
        writeln!(f, "seed             {}", self.seed)?;
        writeln!(f, "encoder_trained  {}", self.encoder_trained)?;
        let sha: String = self.text_sha256.iter().map(|b| format!("{b:02x}")).collect();
        writeln!(f, "text_sha256      {sha}")?;
        for (name, r, c) in &self.tensors {
            writeln!(f, "tensor           {name} {r}x{c}")?;
        }
        Ok(())
    }
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn u32_of(n: usize, what: &str) -> Result<u32, ModelError> {
    u32::try_from(n).map_err(|_| corrupt(format!("{what} {n} does not fit in u32")))
}

impl Recommender {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in [c.text_dim, c.hash_vocab, c.collab_dim, c.blocks, c.heads, c.ffn_hidden, c.max_len, self.vocab.len()] {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&c.text_seed.to_le_bytes());
        out.extend_from_slice(&u32::from(self.encoder_trained).to_le_bytes());
        out.extend_from_slice(&self.text.fingerprint());
        let tensors = self.params.tensors();
        out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in tensors {
            let len = u16::try_from(name.len()).map_err(|_| corrupt("tensor name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_of(t.nrows(), "rows")?.to_le_bytes());
            out.extend_from_slice(&u32_of(t.ncols(), "cols")?.to_le_bytes());
            for x in t.iter() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        for id in self.vocab.ids() {
            out.extend_from_slice(&u32_of(id.len(), "item id length")?.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        Ok(out)
    }

    /// Writes the checkpoint atomically.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| ModelError::Io(e.error))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        let header = read_header(&mut r)?;
        let c = header.config;
        c.validate()?;
        let text = TextEmbedder::new(c.text_dim, c.hash_vocab, c.text_seed);
        if text.fingerprint() != header.text_sha256 {
            return Err(corrupt("frozen text table does not match the recorded fingerprint"));
        }
        let mut model = Recommender::with_embedder(c, Arc::new(text), header.seed);
        model.params.encoder = EncoderParams::zeros_shaped(header.n_items, &c);
        let expected: Vec<(String, usize, usize)> =
            model.params.tensors().into_iter().map(|(n, t)| (n, t.nrows(), t.ncols())).collect();
        if expected != header.tensors {
            return Err(corrupt("tensor list does not match the declared dimensions"));
        }
        // Tensor payloads follow the header in declaration order.
        let mut r = Reader { bytes, pos: 0 };
        read_header_skipping(&mut r)?;
        for (_, t) in model.params.tensors_mut() {
            r.skip_tensor_meta()?;
            for x in t.iter_mut() {
                *x = f64::from(f32::from_le_bytes(r.array()?));
            }
        }
        let mut ids = Vec::with_capacity(header.n_items);
        for _ in 0..header.n_items {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            ids.push(String::from_utf8(raw.to_vec()).map_err(|_| corrupt("item id is not UTF-8"))?);
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let vocab = ItemVocab::new(ids.iter().cloned());
        if vocab.ids() != ids.as_slice() {
            return Err(corrupt("item ids are not sorted and unique"));
        }
        model.vocab = vocab;
        model.step = header.step;
        model.encoder_trained = header.encoder_trained;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

impl EncoderParams {
    fn zeros_shaped(n_items: usize, c: &ModelConfig) -> Self {
        let block = super::AttentionBlock {
            wq: Array2::zeros((c.collab_dim, c.collab_dim)),
            wk: Array2::zeros((c.collab_dim, c.collab_dim)),
            wv: Array2::zeros((c.collab_dim, c.collab_dim)),
            wo: Array2::zeros((c.collab_dim, c.collab_dim)),
            w1: Array2::zeros((c.collab_dim, c.ffn_hidden)),
            b1: Array2::zeros((1, c.ffn_hidden)),
            w2: Array2::zeros((c.ffn_hidden, c.collab_dim)),
            b2: Array2::zeros((1, c.collab_dim)),
        };
        Self {
            item_emb: Array2::zeros((n_items, c.collab_dim)),
            pos_emb: Array2::zeros((c.max_len, c.collab_dim)),
            blocks: vec![block; c.blocks],
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn tensor_meta(&mut self) -> Result<(String, usize, usize), ModelError> {
        let len = self.u16()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        Ok((name, self.u32()? as usize, self.u32()? as usize))
    }

    fn skip_tensor_meta(&mut self) -> Result<(), ModelError> {
        self.tensor_meta().map(|_| ())
    }
}

struct Fixed {
    version: u32,
    config: ModelConfig,
    n_items: usize,
    step: u64,
    seed: u64,
    encoder_trained: bool,
    text_sha256: [u8; 32],
    n_tensors: usize,
}

fn read_fixed(r: &mut Reader<'_>) -> Result<Fixed, ModelError> {
    if r.array::<4>().map_err(|_| corrupt("not a checkpoint (file too short)"))? != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let step = r.u64()?;
    let seed = r.u64()?;
    let text_seed = r.u64()?;
    let flags = r.u32()?;
    if flags > 1 {
        return Err(corrupt(format!("unknown flags {flags:#x}")));
    }
    let text_sha256 = r.array()?;
    let n_tensors = r.u32()? as usize;
    let config = ModelConfig {
        text_dim: dims[0],
        hash_vocab: dims[1],
        text_seed,
        collab_dim: dims[2],
        blocks: dims[3],
        heads: dims[4],
        ffn_hidden: dims[5],
        max_len: dims[6],
    };
    Ok(Fixed { version, config, n_items: dims[7], step, seed, encoder_trained: flags == 1, text_sha256, n_tensors })
}

fn read_header(r: &mut Reader<'_>) -> Result<CheckpointHeader, ModelError> {
    let f = read_fixed(r)?;
    let mut tensors = Vec::with_capacity(f.n_tensors);
    for _ in 0..f.n_tensors {
        let (name, rows, cols) = r.tensor_meta()?;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| corrupt("tensor too large"))?;
        r.take(n)?;
        tensors.push((name, rows, cols));
    }
    Ok(CheckpointHeader {
        version: f.version,
        config: f.config,
        n_items: f.n_items,
        step: f.step,
        seed: f.seed,
        encoder_trained: f.encoder_trained,
        text_sha256: f.text_sha256,
        tensors,
    })
}

fn read_header_skipping(r: &mut Reader<'_>) -> Result<(), ModelError> {
    read_fixed(r).map(|_| ())
}

/// Reads only what `checkpoint inspect` prints.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointHeader, ModelError> {
    let bytes = std::fs::read(path)?;
    read_header(&mut Reader { bytes: &bytes, pos: 0 })
}
