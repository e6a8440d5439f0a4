//! Named-tensor container files.
//!
//! Layout: the 8-byte magic `SPCKPT01`, a little-endian `u64` header length,
//! a JSON header listing `{name, shape, dtype, offset}` per tensor, then the
//! little-endian `f32` payloads, each starting at a 64-byte-aligned absolute
//! file offset. A `<file>.meta.json` sidecar carries the step, dev metric,
//! label sets, config fingerprint and a hash binding it to the payload file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Codebook;
use crate::nn::Tensor;
use crate::seed;
use crate::training::Checkpoint;
use crate::upstream::{UpstreamConfig, UpstreamModel};

pub const MAGIC: &[u8; 8] = b"SPCKPT01";
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    /// `checkpoint`, `upstream` or `codebook`.
    pub kind: String,
    pub step: Option<u64>,
    pub dev_metric: Option<f64>,
    pub label_sets: BTreeMap<String, Vec<String>>,
    pub config_fingerprint: String,
    /// Hash of the container bytes this sidecar describes.
    pub content_hash: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes tensors to container bytes. Non-finite values are refused.
pub fn encode_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut seen = std::collections::BTreeSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Container(format!("duplicate tensor name `{name}`")));
        }
        t.ensure_finite(name)?;
    }
    // Offsets depend on the header length, which depends on the offsets'
    // digits; iterate until the layout is stable.
    let mut data_start = 0usize;
    let (header, entries) = loop {
        let mut offset = data_start;
        let entries: Vec<TensorEntry> = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset: offset as u64,
                };
                offset = align(offset + 4 * t.len());
                e
            })
            .collect();
        let header = serde_json::to_vec(&entries)?;
        let start = align(MAGIC.len() + 8 + header.len());
        if start == data_start {
            break (header, entries);
        }
        data_start = start;
    };
    let mut out = Vec::with_capacity(data_start + tensors.iter().map(|(_, t)| 4 * t.len() + ALIGN).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for ((_, t), e) in tensors.iter().zip(&entries) {
        out.resize(e.offset as usize, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(align(out.len()), 0);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Container(msg.into())
}

/// Parses container bytes back into tensors, in file order.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing container magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| corrupt("header extends past end of file"))?;
    let entries: Vec<TensorEntry> =
        serde_json::from_slice(header).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != "f32" {
            return Err(corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset as usize % ALIGN != 0 || (e.offset as usize) < 16 + hlen {
            return Err(corrupt(format!("{}: misplaced payload at {}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let payload = bytes
            .get(start..start + 4 * n)
            .ok_or_else(|| corrupt(format!("{}: payload truncated", e.name)))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&e.shape, data)?;
        t.ensure_finite(&e.name)?;
        out.push((e.name, t));
    }
    Ok(out)
}

/// Writes the container and its sidecar. The sidecar's `content_hash` is
/// filled in here.
pub fn write_container(path: &Path, tensors: &[(String, Tensor<f32>)], mut meta: Sidecar) -> Result<()> {
    let bytes = encode_tensors(tensors)?;
    meta.content_hash = seed::fingerprint(&bytes);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

/// Reads a container and its sidecar. With `expect_fingerprint`, a sidecar
/// recorded under a different config is refused.
pub fn read_container(path: &Path, expect_fingerprint: Option<&str>) -> Result<(Vec<(String, Tensor<f32>)>, Sidecar)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar = serde_json::from_str(&text)?;
    if meta.content_hash != seed::fingerprint(&bytes) {
        return Err(corrupt(format!("{} does not match its sidecar", path.display())));
    }
    if let Some(fp) = expect_fingerprint {
        if meta.config_fingerprint != fp {
            return Err(Error::FingerprintMismatch {
                expected: fp.to_string(),
                found: meta.config_fingerprint,
            });
        }
    }
    Ok((decode_tensors(&bytes)?, meta))
}

fn expect_kind(meta: &Sidecar, kind: &str) -> Result<()> {
    if meta.kind != kind {
        return Err(corrupt(format!("expected a {kind} container, found {}", meta.kind)));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_container(
        path,
        &ck.tensors,
        Sidecar {
            kind: "checkpoint".into(),
            step: Some(ck.step),
            dev_metric: ck.dev_metric,
            label_sets: ck.label_sets.clone(),
            config_fingerprint: ck.config_fingerprint.clone(),
            content_hash: String::new(),
            extra: serde_json::Value::Null,
        },
    )
}

pub fn load_checkpoint(path: &Path, expect_fingerprint: Option<&str>) -> Result<Checkpoint> {
    let (tensors, meta) = read_container(path, expect_fingerprint)?;
    expect_kind(&meta, "checkpoint")?;
    Ok(Checkpoint {
        tensors,
        step: meta.step.ok_or_else(|| corrupt("checkpoint sidecar has no step"))?,
        dev_metric: meta.dev_metric,
        config_fingerprint: meta.config_fingerprint,
        label_sets: meta.label_sets,
    })
}

pub fn save_upstream(path: &Path, model: &UpstreamModel, config_fingerprint: &str) -> Result<()> {
    write_container(
        path,
        &model.state(),
        Sidecar {
            kind: "upstream".into(),
            step: None,
            dev_metric: None,
            label_sets: BTreeMap::new(),
            config_fingerprint: config_fingerprint.into(),
            content_hash: String::new(),
            extra: serde_json::json!({ "model": model.config() }),
        },
    )
}

pub fn load_upstream(path: &Path, expect_fingerprint: Option<&str>) -> Result<(UpstreamModel, Sidecar)> {
    let (tensors, meta) = read_container(path, expect_fingerprint)?;
    expect_kind(&meta, "upstream")?;
    let config: UpstreamConfig = serde_json::from_value(meta.extra["model"].clone())?;
    let model = UpstreamModel::from_state(config, &tensors.into_iter().collect())?;
    Ok((model, meta))
}

pub fn save_codebook(path: &Path, cb: &Codebook, config_fingerprint: &str) -> Result<()> {
    write_container(
        path,
        &[("centroids".to_string(), cb.centroids().clone())],
        Sidecar {
            kind: "codebook".into(),
            step: None,
            dev_metric: None,
            label_sets: BTreeMap::new(),
            config_fingerprint: config_fingerprint.into(),
            content_hash: String::new(),
            extra: serde_json::json!({ "feature_kind": cb.feature_kind }),
        },
    )
}

pub fn load_codebook(path: &Path, expect_fingerprint: Option<&str>) -> Result<Codebook> {
    let (tensors, meta) = read_container(path, expect_fingerprint)?;
    expect_kind(&meta, "codebook")?;
    let (_, centroids) = tensors
        .into_iter()
        .find(|(n, _)| n == "centroids")
        .ok_or_else(|| corrupt("codebook container has no `centroids` tensor"))?;
    let kind = meta.extra["feature_kind"].as_str().unwrap_or_default();
    Codebook::new(centroids, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::upstream::UpstreamConfig;
    use proptest::prelude::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f32) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn layout_is_aligned_and_exact() {
        let tensors = vec![
            ("a".to_string(), t(&[3], |i| i as f32 - 1.5)),
            ("b.weight".to_string(), t(&[2, 5], |i| (i as f32).sin())),
            ("s".to_string(), t(&[], |_| f32::MIN_POSITIVE)),
        ];
        let bytes = encode_tensors(&tensors).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes.len() % ALIGN, 0);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let entries: Vec<TensorEntry> = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert!(entries.iter().all(|e| e.offset % ALIGN as u64 == 0 && e.dtype == "f32"));
        assert_eq!(decode_tensors(&bytes).unwrap(), tensors);
    }

    #[test]
    fn refuses_nan_and_corruption() {
        let bad = vec![("x".to_string(), t(&[2], |i| if i == 1 { f32::NAN } else { 0.0 }))];
        assert!(matches!(encode_tensors(&bad), Err(Error::NonFinite(_))));
        let good = encode_tensors(&[("x".to_string(), t(&[4], |i| i as f32))]).unwrap();
        assert!(decode_tensors(&good[..good.len() - 64]).is_err());
        let mut wrong = good.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_tensors(&wrong), Err(Error::Container(_))));
    }

    #[test]
    fn checkpoint_files_round_trip_and_check_fingerprints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run/step10.ckpt");
        let ck = Checkpoint {
            tensors: vec![("head.t.weight".into(), t(&[2, 3], |i| 0.1 * i as f32 + 1e-7))],
            step: 10,
            dev_metric: Some(0.75),
            config_fingerprint: "abc".into(),
            label_sets: BTreeMap::from([("t".into(), vec!["x".into(), "y".into()])]),
        };
        save_checkpoint(&path, &ck).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(load_checkpoint(&path, Some("abc")).unwrap(), ck);
        assert!(matches!(
            load_checkpoint(&path, Some("zzz")),
            Err(Error::FingerprintMismatch { .. })
        ));
        // A sidecar from another file is refused.
        let other = dir.path().join("other.ckpt");
        let mut ck2 = ck.clone();
        ck2.tensors[0].1.data_mut()[0] = 9.0;
        save_checkpoint(&other, &ck2).unwrap();
        std::fs::copy(sidecar_path(&path), sidecar_path(&other)).unwrap();
        assert!(matches!(load_checkpoint(&other, None), Err(Error::Container(_))));
        assert!(matches!(load_codebook(&path, None), Err(Error::Container(_))));
    }

    #[test]
    fn upstream_and_codebook_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = UpstreamConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            ffn_dim: 16,
            codebook_size: 3,
            ..UpstreamConfig::default()
        };
        let m = UpstreamModel::new(cfg, 5).unwrap();
        let p = dir.path().join("up.ckpt");
        save_upstream(&p, &m, "fp").unwrap();
        let (back, _) = load_upstream(&p, Some("fp")).unwrap();
        assert_eq!(back.state(), m.state());
        let cb = Codebook::new(t(&[3, 2], |i| i as f32 * 0.5), "mfcc13").unwrap();
        let q = dir.path().join("cb.ckpt");
        save_codebook(&q, &cb, "fp").unwrap();
        let cb2 = load_codebook(&q, None).unwrap();
        assert_eq!(cb2.centroids(), cb.centroids());
        assert_eq!(cb2.feature_kind, "mfcc13");
    }

    proptest! {
        #[test]
        fn arbitrary_finite_tensors_round_trip_bit_exactly(
            vals in proptest::collection::vec(proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..40), 1..6)
        ) {
            let tensors: Vec<(String, Tensor<f32>)> = vals
                .into_iter()
                .enumerate()
                .map(|(i, v)| (format!("t{i}"), Tensor::from_vec(&[v.len()], v).unwrap()))
                .collect();
            let back = decode_tensors(&encode_tensors(&tensors).unwrap()).unwrap();
            for ((n1, a), (n2, b)) in tensors.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(a), bits(b));
            }
        }
    }
}
