//! Model checkpoints: a key/value text manifest followed by the raw
//! little-endian `f64` parameter blob in manifest order.
//!
//! ```text
//! dpft-checkpoint
//! version=1
//! input=1,12,12
//! layer=stem kind=conv2d stride=1 padding=1 standardize=0
//! param=stem.weight shape=8,1,3,3
//! param=stem.bias shape=8
//! layer=stem_act kind=relu
//! ...
//! params=9698
//! end
//! <params * 8 bytes>
//! ```

use std::collections::HashMap;
use std::path::Path;

use super::{Layer, LayerKind, Model, NnError, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "dpft-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

fn join(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut text = format!("{MAGIC}\nversion={CHECKPOINT_VERSION}\ninput={}\n", join(model.input_shape()));
    for l in model.layers() {
        let hyper = match &l.kind {
            LayerKind::Dense { standardize, .. } => format!(" standardize={}", u8::from(*standardize)),
            LayerKind::Conv2d {
                stride,
                padding,
                standardize,
                ..
            } => format!(
                " stride={stride} padding={padding} standardize={}",
                u8::from(*standardize)
            ),
            LayerKind::GroupNorm { groups, .. } => format!(" groups={groups}"),
            LayerKind::MeanPool { size } => format!(" size={size}"),
            LayerKind::Relu | LayerKind::Flatten => String::new(),
        };
        text.push_str(&format!("layer={} kind={}{hyper}\n", l.name, l.kind_name()));
        for (pname, t) in l.params() {
            text.push_str(&format!("param={}.{pname} shape={}\n", l.name, join(t.shape())));
        }
    }
    text.push_str(&format!("params={}\nend\n", model.num_params()));
    let mut bytes = text.into_bytes();
    for l in model.layers() {
        for (_, t) in l.params() {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    bytes
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension list `{s}`"))))
        .collect()
}

fn fields(line: &str) -> Result<HashMap<&str, &str>> {
    line.split_whitespace()
        .map(|kv| kv.split_once('=').ok_or_else(|| bad(format!("expected key=value in `{line}`"))))
        .collect()
}

fn get<'a>(f: &HashMap<&str, &'a str>, key: &str) -> Result<&'a str> {
    f.get(key).copied().ok_or_else(|| bad(format!("missing `{key}`")))
}

fn get_usize(f: &HashMap<&str, &str>, key: &str) -> Result<usize> {
    get(f, key)?.parse().map_err(|_| bad(format!("`{key}` is not an integer")))
}

fn get_flag(f: &HashMap<&str, &str>, key: &str) -> Result<bool> {
    match get(f, key)? {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(bad(format!("`{key}` must be 0 or 1, got `{other}`"))),
    }
}

struct PendingLayer {
    name: String,
    fields: HashMap<String, String>,
    params: Vec<(String, Vec<usize>)>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    const END: &[u8] = b"\nend\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("manifest terminator `end` not found"))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("manifest is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a dpft checkpoint"));
    }
    let version = lines
        .next()
        .and_then(|l| l.strip_prefix("version="))
        .ok_or_else(|| bad("missing version"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let input = parse_dims(
        lines
            .next()
            .and_then(|l| l.strip_prefix("input="))
            .ok_or_else(|| bad("missing input shape"))?,
    )?;

    let mut pending: Vec<PendingLayer> = Vec::new();
    let mut declared = None;
    for line in lines {
        if line == "end" {
            break;
        }
        if let Some(n) = line.strip_prefix("params=") {
            declared = Some(n.parse::<usize>().map_err(|_| bad("bad params count"))?);
            continue;
        }
        let f = fields(line)?;
        if let Some(name) = f.get("layer") {
            pending.push(PendingLayer {
                name: name.to_string(),
                fields: f.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
                params: Vec::new(),
            });
        } else if let Some(pname) = f.get("param") {
            let layer = pending.last_mut().ok_or_else(|| bad("param before any layer"))?;
            let (owner, role) = pname
                .rsplit_once('.')
                .ok_or_else(|| bad(format!("bad param name `{pname}`")))?;
            if owner != layer.name {
                return Err(bad(format!("param `{pname}` outside its layer `{}`", layer.name)));
            }
            layer.params.push((role.to_string(), parse_dims(get(&f, "shape")?)?));
        } else {
            return Err(bad(format!("unrecognized manifest line `{line}`")));
        }
    }

    let total: usize = pending
        .iter()
        .flat_map(|l| l.params.iter().map(|(_, s)| s.iter().product::<usize>()))
        .sum();
    if declared != Some(total) {
        return Err(bad(format!("params={declared:?} disagrees with shapes ({total})")));
    }
    let blob = &bytes[header_end..];
    if blob.len() != total * 8 {
        return Err(bad(format!(
            "parameter blob has {} bytes, expected {}",
            blob.len(),
            total * 8
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |shape: &[usize]| -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), values.by_ref().take(n).collect()).map_err(|e| bad(e.to_string()))
    };

    let mut layers = Vec::with_capacity(pending.len());
    for p in pending {
        let f: HashMap<&str, &str> = p.fields.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let roles: Vec<&str> = p.params.iter().map(|(r, _)| r.as_str()).collect();
        let kind = get(&f, "kind")?;
        let expect_roles = |want: &[&str]| -> Result<()> {
            if roles != want {
                return Err(bad(format!("{}: expected params {want:?}, found {roles:?}", p.name)));
            }
            Ok(())
        };
        let layer = match kind {
            "dense" => {
                expect_roles(&["weight", "bias"])?;
                let w = take(&p.params[0].1)?;
                let b = take(&p.params[1].1)?;
                Layer::dense(p.name, w, b)?.with_standardization(get_flag(&f, "standardize")?)?
            }
            "conv2d" => {
                expect_roles(&["weight", "bias"])?;
                let w = take(&p.params[0].1)?;
                let b = take(&p.params[1].1)?;
                Layer::conv2d(p.name, w, b, get_usize(&f, "stride")?, get_usize(&f, "padding")?)?
                    .with_standardization(get_flag(&f, "standardize")?)?
            }
            "groupnorm" => {
                expect_roles(&["scale", "shift"])?;
                let scale = take(&p.params[0].1)?;
                let shift = take(&p.params[1].1)?;
                let mut l = Layer::group_norm(p.name, scale.len(), get_usize(&f, "groups")?)?;
                if let LayerKind::GroupNorm { scale: s, shift: t, .. } = &mut l.kind {
                    *s = scale;
                    *t = shift;
                }
                l
            }
            "relu" => {
                expect_roles(&[])?;
                Layer::relu(p.name)
            }
            "flatten" => {
                expect_roles(&[])?;
                Layer::flatten(p.name)
            }
            "meanpool" => {
                expect_roles(&[])?;
                Layer::mean_pool(p.name, get_usize(&f, "size")?)?
            }
            other => return Err(bad(format!("unknown layer kind `{other}`"))),
        };
        layers.push(layer);
    }
    Model::new(input, layers)
}
