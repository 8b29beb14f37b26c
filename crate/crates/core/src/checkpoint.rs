//! Checkpoint directory: `manifest.txt` plus one little-endian f32 blob per
//! tensor (`<name>.f32`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelParams, Tensors, TENSOR_NAMES};

pub const FORMAT_TAG: &str = "sbg-checkpoint-v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub dim: usize,
    pub attn_dim: usize,
    pub lambda: f64,
    pub score_fn: String,
    pub n_words: usize,
    pub n_products: usize,
    pub n_sequences: usize,
    pub config_hash: String,
    pub shapes: BTreeMap<String, (usize, usize)>,
}

impl CheckpointManifest {
    fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format={FORMAT_TAG}");
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "attn_dim={}", self.attn_dim);
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "score_fn={}", self.score_fn);
        let _ = writeln!(s, "n_words={}", self.n_words);
        let _ = writeln!(s, "n_products={}", self.n_products);
        let _ = writeln!(s, "n_sequences={}", self.n_sequences);
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        for name in TENSOR_NAMES {
            let (r, c) = self.shapes[name];
            let _ = writeln!(s, "tensor.{name}={r}x{c}");
        }
        s
    }

    fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad manifest line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("manifest missing key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("manifest key {k} is not an integer")))
        };
        if get("format")? != FORMAT_TAG {
            return Err(Error::Checkpoint(format!("unsupported format {}", get("format")?)));
        }
        let mut shapes = BTreeMap::new();
        for name in TENSOR_NAMES {
            let raw = get(&format!("tensor.{name}"))?;
            let (r, c) = raw
                .split_once('x')
                .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)))
                .ok_or_else(|| Error::Checkpoint(format!("bad shape {raw:?} for {name}")))?;
            shapes.insert(name.to_string(), (r, c));
        }
        Ok(Self {
            dim: num("dim")?,
            attn_dim: num("attn_dim")?,
            lambda: get("lambda")?
                .parse()
                .map_err(|_| Error::Checkpoint("lambda is not a number".into()))?,
            score_fn: get("score_fn")?.clone(),
            n_words: num("n_words")?,
            n_products: num("n_products")?,
            n_sequences: num("n_sequences")?,
            config_hash: get("config_hash")?.clone(),
            shapes,
        })
    }
}

pub fn manifest_for(params: &ModelParams, config_hash: &str) -> CheckpointManifest {
    let dims = params.dims();
    CheckpointManifest {
        dim: params.dim,
        attn_dim: params.attn_dim,
        lambda: params.lambda,
        score_fn: params.score_fn.to_string(),
        n_words: dims.n_words,
        n_products: dims.n_products,
        n_sequences: dims.n_sequences,
        config_hash: config_hash.to_string(),
        shapes: params
            .tensors
            .named()
            .iter()
            .map(|(n, m)| (n.to_string(), m.shape()))
            .collect(),
    }
}

pub fn save(params: &ModelParams, config_hash: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, m) in params.tensors.named() {
        let mut bytes = Vec::with_capacity(m.as_slice().len() * 4);
        for &x in m.as_slice() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let path = dir.join(format!("{name}.f32"));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest_for(params, config_hash).render()).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    CheckpointManifest::parse(&text)
}

pub fn load(dir: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let d = manifest.dim;
    let da = manifest.attn_dim;
    let expected = [
        (TENSOR_NAMES[0], (manifest.n_words, d)),
        (TENSOR_NAMES[1], (manifest.n_products, d)),
        (TENSOR_NAMES[2], (manifest.n_sequences, d)),
        (TENSOR_NAMES[3], (d * da, d)),
        (TENSOR_NAMES[4], (d, da)),
        (TENSOR_NAMES[5], (1, da)),
        (TENSOR_NAMES[6], (1, d)),
    ];
    let mut mats = Vec::with_capacity(7);
    for (name, shape) in expected {
        if manifest.shapes[name] != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: manifest shape {:?} inconsistent with dims {:?}",
                manifest.shapes[name], shape
            )));
        }
        let path = dir.join(format!("{name}.f32"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != shape.0 * shape.1 * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: blob has {} bytes, expected {}",
                bytes.len(),
                shape.0 * shape.1 * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        mats.push(Matrix::from_vec(shape.0, shape.1, data)?);
    }
    let mut it = mats.into_iter();
    let mut next = || it.next().expect("seven tensors");
    let tensors = Tensors {
        word_embeddings: next(),
        product_embeddings: next(),
        sequence_embeddings: next(),
        attn_wf: next(),
        attn_bf: next(),
        attn_wh: next(),
        zero_inquiry: next(),
    };
    let params = ModelParams {
        dim: d,
        attn_dim: da,
        lambda: manifest.lambda,
        score_fn: manifest.score_fn.parse()?,
        tensors,
    };
    if !params.tensors.is_finite() {
        return Err(Error::Checkpoint("checkpoint contains non-finite values".into()));
    }
    Ok((params, manifest))
}
