//! On-disk datasets: a JSON manifest plus float32 embedding blobs and u32
//! label blobs per domain. A benchmark directory adds the frozen tokens and
//! the encoder shape.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blob::{read_f32, read_json, read_u32, word_count, write_f32, write_json, write_u32};
use crate::embedding::{DomainDataset, RawEmbedding};
use crate::error::{Error, Result};
use crate::prompt::{BaseContext, ClassTokenSet, EncoderShape, TokenMatrix};
use crate::synthetic::Benchmark;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub name: String,
    pub count: usize,
    pub labeled: bool,
    /// Labels stored for evaluation only, in `<name>.heldout.u32`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub held_out_labels: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub d: usize,
    /// Number of classes; labels must lie below it.
    #[serde(rename = "K")]
    pub k: usize,
    pub domains: Vec<DomainEntry>,
}

/// One domain as stored: the dataset and, for a target, its held-out labels.
#[derive(Clone, Debug)]
pub struct StoredDomain {
    pub data: DomainDataset,
    pub held_out_labels: Option<Vec<usize>>,
}

fn blob_path(dir: &Path, name: &str, ext: &str) -> PathBuf {
    dir.join(format!("{name}.{ext}"))
}

fn labels_to_u32(labels: &[usize]) -> Result<Vec<u32>> {
    labels
        .iter()
        .map(|&l| u32::try_from(l).map_err(|_| Error::InvalidConfig(format!("label {l} exceeds u32"))))
        .collect()
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        && name != "manifest";
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("domain name {name:?} is not a plain file stem")))
    }
}

pub fn write_dataset(dir: &Path, classes: usize, domains: &[StoredDomain]) -> Result<()> {
    let d = domains.first().map(|s| s.data.dim()).ok_or(Error::EmptyInput)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(domains.len());
    for dom in domains {
        let ds = &dom.data;
        let name = ds.domain_id();
        check_name(name)?;
        if entries.iter().any(|e: &DomainEntry| e.name == name) {
            return Err(Error::InvalidConfig(format!("duplicate domain name {name}")));
        }
        if ds.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, found: ds.dim() });
        }
        let flat: Vec<f64> = ds.raw().iter().flat_map(|r| r.values().iter().copied()).collect();
        write_f32(&blob_path(dir, name, "f32"), &flat)?;
        if let Some(labels) = ds.labels() {
            write_u32(&blob_path(dir, name, "labels.u32"), &labels_to_u32(labels)?)?;
        }
        if let Some(h) = &dom.held_out_labels {
            if h.len() != ds.len() {
                return Err(Error::DimensionMismatch {
                    expected: ds.len(),
                    found: h.len(),
                });
            }
            write_u32(&blob_path(dir, name, "heldout.u32"), &labels_to_u32(h)?)?;
        }
        entries.push(DomainEntry {
            name: name.to_string(),
            count: ds.len(),
            labeled: ds.is_labeled(),
            held_out_labels: dom.held_out_labels.is_some(),
        });
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        d,
        k: classes,
        domains: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn read_labels(path: &Path, count: usize, classes: usize) -> Result<Vec<usize>> {
    let raw = read_u32(path, count)?;
    raw.into_iter()
        .map(|l| {
            let l = l as usize;
            if l >= classes {
                Err(Error::SchemaMismatch(format!(
                    "{}: label {l} out of range for {classes} classes",
                    path.display()
                )))
            } else {
                Ok(l)
            }
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<StoredDomain>)> {
    let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::SchemaMismatch(format!(
            "unsupported dataset schema version {}",
            manifest.schema_version
        )));
    }
    if manifest.d == 0 || manifest.k == 0 {
        return Err(Error::SchemaMismatch("manifest has a zero dimension".into()));
    }
    let d = manifest.d;
    let mut out = Vec::with_capacity(manifest.domains.len());
    for e in &manifest.domains {
        check_name(&e.name).map_err(|_| Error::SchemaMismatch(format!("bad domain name {:?}", e.name)))?;
        let flat = read_f32(&blob_path(dir, &e.name, "f32"), e.count * d)?;
        let raw = flat
            .chunks_exact(d)
            .map(|c| RawEmbedding::new(c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let labels_path = blob_path(dir, &e.name, "labels.u32");
        let labels = match (e.labeled, labels_path.exists()) {
            (true, true) => Some(read_labels(&labels_path, e.count, manifest.k)?),
            (true, false) => {
                return Err(Error::SchemaMismatch(format!("domain {} is labeled but has no labels file", e.name)))
            }
            (false, true) => {
                return Err(Error::SchemaMismatch(format!(
                    "domain {} is unlabeled but {} exists",
                    e.name,
                    labels_path.display()
                )))
            }
            (false, false) => None,
        };
        let held_out_labels = if e.held_out_labels {
            Some(read_labels(&blob_path(dir, &e.name, "heldout.u32"), e.count, manifest.k)?)
        } else {
            None
        };
        let data = DomainDataset::new(e.name.clone(), raw, labels, manifest.k)?;
        out.push(StoredDomain { data, held_out_labels });
    }
    Ok((manifest, out))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct FrozenManifest {
    encoder: EncoderShape,
    base_context_len: usize,
}

/// Writes sources, the target (with held-out labels) and the frozen tokens.
pub fn write_benchmark(dir: &Path, bench: &Benchmark) -> Result<()> {
    let mut domains: Vec<StoredDomain> = bench
        .sources
        .iter()
        .map(|s| StoredDomain {
            data: s.clone(),
            held_out_labels: None,
        })
        .collect();
    domains.push(StoredDomain {
        data: bench.target.clone(),
        held_out_labels: Some(bench.target_labels.clone()),
    });
    write_dataset(dir, bench.num_classes, &domains)?;
    write_f32(&dir.join("classes.f32"), bench.classes.0.data())?;
    write_f32(&dir.join("base.f32"), bench.base.0.data())?;
    write_json(
        &dir.join("frozen.json"),
        &FrozenManifest {
            encoder: bench.encoder,
            base_context_len: bench.base.0.rows(),
        },
    )
}

/// Reads a benchmark directory: every labeled domain is a source and the
/// single unlabeled domain is the target, which must carry held-out labels.
pub fn read_benchmark(dir: &Path) -> Result<Benchmark> {
    let (manifest, domains) = read_dataset(dir)?;
    let frozen: FrozenManifest = read_json(&dir.join("frozen.json"))?;
    let enc = frozen.encoder;
    if enc.d_out != manifest.d {
        return Err(Error::SchemaMismatch(format!(
            "encoder output {} differs from data dimension {}",
            enc.d_out, manifest.d
        )));
    }
    let classes_words = word_count(&dir.join("classes.f32"))?;
    if classes_words != manifest.k * enc.d_tok {
        return Err(Error::SchemaMismatch(format!(
            "classes.f32 holds {classes_words} values, expected K * d_tok = {}",
            manifest.k * enc.d_tok
        )));
    }
    let classes = ClassTokenSet(TokenMatrix::from_data(
        manifest.k,
        enc.d_tok,
        read_f32(&dir.join("classes.f32"), manifest.k * enc.d_tok)?,
    )?);
    let base = BaseContext(TokenMatrix::from_data(
        frozen.base_context_len,
        enc.d_tok,
        read_f32(&dir.join("base.f32"), frozen.base_context_len * enc.d_tok)?,
    )?);
    let mut sources = Vec::new();
    let mut target = None;
    for dom in domains {
        if dom.data.is_labeled() {
            sources.push(dom.data);
        } else if target.is_some() {
            return Err(Error::SchemaMismatch("more than one unlabeled domain".into()));
        } else {
            let labels = dom
                .held_out_labels
                .ok_or_else(|| Error::SchemaMismatch("target has no held-out labels".into()))?;
            target = Some((dom.data, labels));
        }
    }
    let (target, target_labels) = target.ok_or_else(|| Error::SchemaMismatch("no unlabeled target domain".into()))?;
    if sources.is_empty() {
        return Err(Error::SchemaMismatch("no labeled source domain".into()));
    }
    Ok(Benchmark {
        sources,
        target,
        target_labels,
        encoder: enc,
        classes,
        base,
        num_classes: manifest.k,
    })
}
