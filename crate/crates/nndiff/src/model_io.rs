//! Model files: a text manifest followed by a raw parameter blob.
//!
//! Layout is a line-oriented header (format version, network metadata,
//! layer specs, named-array table with byte offsets and shapes, blob
//! checksum), a `---` separator line, then every parameter tensor as
//! little-endian `f64`s at its stated offset. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{LayerSpec, Network};
use crate::tensor::Tensor;

const FORMAT_LINE: &str = "nndiff-model 1";

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut array_lines = Vec::new();
    for (name, tensor) in net.params() {
        let offset = blob.len();
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        array_lines.push(format!(
            "array {name} {} {offset}",
            format_shape(tensor.shape())
        ));
    }
    let digest = hex_digest(&blob);

    let mut manifest = String::new();
    manifest.push_str(FORMAT_LINE);
    manifest.push('\n');
    manifest.push_str(&format!("model_id {}\n", net.model_id()));
    manifest.push_str(&format!("input_shape {}\n", format_shape(net.input_shape())));
    for layer in net.layers() {
        manifest.push_str(&format_layer(layer));
        manifest.push('\n');
    }
    for line in &array_lines {
        manifest.push_str(line);
        manifest.push('\n');
    }
    manifest.push_str(&format!("checksum sha256:{digest}\n"));
    manifest.push_str("---\n");

    let mut out = manifest.into_bytes();
    out.extend_from_slice(&blob);
    fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network> {
    let bytes = fs::read(path)?;
    let p = path.display().to_string();
    let sep = b"\n---\n";
    let split = find_subslice(&bytes, sep)
        .ok_or_else(|| Error::format(&p, "missing manifest/blob separator"))?;
    let manifest = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::format(&p, "manifest is not utf-8"))?;
    let blob = &bytes[split + sep.len()..];

    let mut lines = manifest.lines();
    let first = lines.next().unwrap_or("");
    if first != FORMAT_LINE {
        return Err(Error::format(
            &p,
            format!("version mismatch: '{first}', expected '{FORMAT_LINE}'"),
        ));
    }

    let mut model_id = None;
    let mut input_shape = None;
    let mut layers = Vec::new();
    let mut arrays: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let mut checksum = None;
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "model_id" => model_id = Some(rest.to_string()),
            "input_shape" => input_shape = Some(parse_shape(rest, &p)?),
            "layer" => layers.push(parse_layer(rest, &p)?),
            "array" => {
                let mut it = rest.split_whitespace();
                let name = it
                    .next()
                    .ok_or_else(|| Error::format(&p, "array line missing name"))?;
                let shape = parse_shape(
                    it.next()
                        .ok_or_else(|| Error::format(&p, "array line missing shape"))?,
                    &p,
                )?;
                let offset: usize = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format(&p, "array line missing offset"))?;
                arrays.push((name.to_string(), shape, offset));
            }
            "checksum" => checksum = Some(rest.to_string()),
            other => {
                return Err(Error::format(&p, format!("unknown manifest key '{other}'")))
            }
        }
    }

    let expected = checksum.ok_or_else(|| Error::format(&p, "missing checksum"))?;
    let actual = format!("sha256:{}", hex_digest(blob));
    if expected != actual {
        return Err(Error::format(
            &p,
            format!("checksum failure: manifest says {expected}, blob is {actual}"),
        ));
    }

    let mut params = BTreeMap::new();
    for (name, shape, offset) in arrays {
        let count: usize = shape.iter().product();
        let end = offset + count * 8;
        if end > blob.len() {
            return Err(Error::format(
                &p,
                format!("array '{name}' extends past the blob ({end} > {})", blob.len()),
            ));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in blob[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }

    // Network::new reports any layer parameter that the array table did not
    // supply as a missing-array error.
    Network::new(
        model_id.ok_or_else(|| Error::format(&p, "missing model_id"))?,
        input_shape.ok_or_else(|| Error::format(&p, "missing input_shape"))?,
        layers,
        params,
    )
}

fn format_shape(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str, path: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad shape '{s}'")))
        })
        .collect()
}

fn format_layer(layer: &LayerSpec) -> String {
    match layer {
        LayerSpec::Dense {
            in_units,
            out_units,
            weight,
            bias,
        } => format!("layer dense in={in_units} out={out_units} w={weight} b={bias}"),
        LayerSpec::Conv2D {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            weight,
            bias,
        } => format!(
            "layer conv2d in={in_channels} out={out_channels} kh={kernel_h} kw={kernel_w} stride={stride} w={weight} b={bias}"
        ),
        LayerSpec::ReLU => "layer relu".into(),
        LayerSpec::MaxPool2D { window, stride } => {
            format!("layer maxpool2d window={window} stride={stride}")
        }
        LayerSpec::Flatten => "layer flatten".into(),
        LayerSpec::Softmax => "layer softmax".into(),
    }
}

fn parse_layer(rest: &str, path: &str) -> Result<LayerSpec> {
    let mut it = rest.split_whitespace();
    let kind = it
        .next()
        .ok_or_else(|| Error::format(path, "layer line missing kind"))?;
    let mut kv = BTreeMap::new();
    for token in it {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad layer token '{token}'")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get_num = |k: &str| -> Result<usize> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, format!("layer '{kind}' missing numeric '{k}'")))
    };
    let get_str = |k: &str| -> Result<String> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::format(path, format!("layer '{kind}' missing '{k}'")))
    };
    match kind {
        "dense" => Ok(LayerSpec::Dense {
            in_units: get_num("in")?,
            out_units: get_num("out")?,
            weight: get_str("w")?,
            bias: get_str("b")?,
        }),
        "conv2d" => Ok(LayerSpec::Conv2D {
            in_channels: get_num("in")?,
            out_channels: get_num("out")?,
            kernel_h: get_num("kh")?,
            kernel_w: get_num("kw")?,
            stride: get_num("stride")?,
            weight: get_str("w")?,
            bias: get_str("b")?,
        }),
        "relu" => Ok(LayerSpec::ReLU),
        "maxpool2d" => Ok(LayerSpec::MaxPool2D {
            window: get_num("window")?,
            stride: get_num("stride")?,
        }),
        "flatten" => Ok(LayerSpec::Flatten),
        "softmax" => Ok(LayerSpec::Softmax),
        other => Err(Error::format(path, format!("unknown layer kind '{other}'"))),
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|window| window == needle)
}
