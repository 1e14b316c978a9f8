//! On-disk tensor container: a plain-text manifest next to one raw blob of
//! little-endian f64 values. Weights, datasets, and cached stage artifacts
//! all share this format.
//!
//! manifest.txt lines:
//!   meta <key> <value...>
//!   tensor <name> <elem-offset> <dim,dim,...>
//! data.bin: concatenated tensor payloads, 8 bytes per element.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{weight_names, ModelConfig, ToyViT};

const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "data.bin";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Write a named tensor set plus free-form metadata.
pub fn write_store(
    dir: &Path,
    tensors: &[(String, &Tensor)],
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::new();
    for (k, v) in meta {
        if k.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("meta key `{k}` contains whitespace")));
        }
        if v.contains('\n') {
            return Err(Error::InvalidArgument(format!("meta value for `{k}` contains a newline")));
        }
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    let blob_path = dir.join(BLOB);
    let mut blob = fs::File::create(&blob_path).map_err(|e| io_err(&blob_path, e))?;
    let mut offset = 0usize;
    for (name, t) in tensors {
        if name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("tensor name `{name}` contains whitespace")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("tensor {name} {offset} {}\n", dims.join(",")));
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        blob.write_all(&bytes).map_err(|e| io_err(&blob_path, e))?;
        offset += t.len();
    }
    let man_path = dir.join(MANIFEST);
    fs::write(&man_path, manifest).map_err(|e| io_err(&man_path, e))
}

/// Read a store back; tensors keep manifest order in the returned map's
/// iteration only by name (BTreeMap), offsets come from the manifest.
pub fn read_store(dir: &Path) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let man_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&man_path).map_err(|e| io_err(&man_path, e))?;
    let blob_path = dir.join(BLOB);
    let mut raw = Vec::new();
    fs::File::open(&blob_path)
        .map_err(|e| io_err(&blob_path, e))?
        .read_to_end(&mut raw)
        .map_err(|e| io_err(&blob_path, e))?;
    if raw.len() % 8 != 0 {
        return Err(parse_err(&blob_path, "blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut tensors = BTreeMap::new();
    let mut meta = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ' ');
        let tag = parts.next().unwrap_or_default();
        let rest = parts.next().unwrap_or_default();
        match tag {
            "meta" => {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| parse_err(&man_path, format!("bad meta line {}", lineno + 1)))?;
                meta.insert(k.to_string(), v.to_string());
            }
            "tensor" => {
                let fields: Vec<&str> = rest.split(' ').collect();
                if fields.len() != 3 {
                    return Err(parse_err(&man_path, format!("bad tensor line {}", lineno + 1)));
                }
                let name = fields[0].to_string();
                let offset: usize = fields[1]
                    .parse()
                    .map_err(|_| parse_err(&man_path, format!("bad offset on line {}", lineno + 1)))?;
                let shape: Vec<usize> = fields[2]
                    .split(',')
                    .map(|d| d.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err(&man_path, format!("bad shape on line {}", lineno + 1)))?;
                let len: usize = shape.iter().product();
                if offset + len > values.len() {
                    return Err(parse_err(
                        &man_path,
                        format!("tensor `{name}` exceeds blob ({} values)", values.len()),
                    ));
                }
                tensors.insert(name, Tensor::new(shape, values[offset..offset + len].to_vec())?);
            }
            _ => return Err(parse_err(&man_path, format!("unknown tag on line {}", lineno + 1))),
        }
    }
    Ok((tensors, meta))
}

fn config_meta(config: &ModelConfig) -> BTreeMap<String, String> {
    [
        ("blocks", config.blocks.to_string()),
        ("embed_dim", config.embed_dim.to_string()),
        ("heads", config.heads.to_string()),
        ("mlp_dim", config.mlp_dim.to_string()),
        ("tokens", config.tokens.to_string()),
        ("classes", config.classes.to_string()),
        ("patch_size", config.patch_size.to_string()),
        ("image_size", config.image_size.to_string()),
        ("channels", config.channels.to_string()),
        ("seed", config.seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("model.{k}"), v))
    .collect()
}

fn meta_usize(meta: &BTreeMap<String, String>, key: &str, dir: &Path) -> Result<usize> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(dir, format!("missing or invalid meta `{key}`")))
}

fn config_from_meta(meta: &BTreeMap<String, String>, dir: &Path) -> Result<ModelConfig> {
    Ok(ModelConfig {
        blocks: meta_usize(meta, "model.blocks", dir)?,
        embed_dim: meta_usize(meta, "model.embed_dim", dir)?,
        heads: meta_usize(meta, "model.heads", dir)?,
        mlp_dim: meta_usize(meta, "model.mlp_dim", dir)?,
        tokens: meta_usize(meta, "model.tokens", dir)?,
        classes: meta_usize(meta, "model.classes", dir)?,
        patch_size: meta_usize(meta, "model.patch_size", dir)?,
        image_size: meta_usize(meta, "model.image_size", dir)?,
        channels: meta_usize(meta, "model.channels", dir)?,
        seed: meta_usize(meta, "model.seed", dir)? as u64,
    })
}

pub fn save_model(dir: &Path, model: &ToyViT) -> Result<()> {
    let tensors: Vec<(String, &Tensor)> = weight_names(&model.config)
        .into_iter()
        .map(|n| {
            let t = model.weight(&n);
            (n, t)
        })
        .collect();
    write_store(dir, &tensors, &config_meta(&model.config))
}

pub fn load_model(dir: &Path) -> Result<ToyViT> {
    let (tensors, meta) = read_store(dir)?;
    let config = config_from_meta(&meta, dir)?;
    config.validate()?;
    let mut weights = BTreeMap::new();
    for name in weight_names(&config) {
        let t = tensors
            .get(&name)
            .ok_or_else(|| parse_err(dir, format!("missing weight `{name}`")))?;
        weights.insert(name, t.clone());
    }
    Ok(ToyViT { config, weights })
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let labels = Tensor::vector(data.labels.iter().map(|&l| l as f64).collect());
    let mut tensors: Vec<(String, &Tensor)> = vec![("labels".into(), &labels)];
    for (i, img) in data.images.iter().enumerate() {
        tensors.push((format!("img{i:06}"), img));
    }
    write_store(dir, &tensors, &BTreeMap::new())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (tensors, _) = read_store(dir)?;
    let labels_t = tensors
        .get("labels")
        .ok_or_else(|| parse_err(dir, "missing `labels` tensor"))?;
    let labels: Vec<usize> = labels_t.data().iter().map(|&v| v as usize).collect();
    let mut images = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let name = format!("img{i:06}");
        images.push(
            tensors
                .get(&name)
                .ok_or_else(|| parse_err(dir, format!("missing `{name}`")))?
                .clone(),
        );
    }
    Ok(Dataset { images, labels })
}
