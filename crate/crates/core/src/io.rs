//! On-disk formats.
//!
//! Embedding bank (`EMB1`), all integers little-endian:
//!
//! | offset | size | field                           |
//! |--------|------|---------------------------------|
//! | 0      | 4    | magic `b"EMB1"`                 |
//! | 4      | 4    | version, u32 = 1                |
//! | 8      | 4    | rows, u32                       |
//! | 12     | 4    | dim, u32                        |
//! | 16     | 4·rows·dim | row-major IEEE-754 f32    |
//!
//! Labels (`LBL1`): magic, version u32 = 1, count u32, then `count` u32 labels.
//!
//! Task residuals are stored as `EMB1` banks. A disentangled residual is a
//! directory holding `index.json`, `shared.emb` and one
//! `specific_<domain>.emb` per domain.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dg::DisentangledResidual;
use crate::embedding::Matrix;
use crate::error::{Error, Result};
use crate::selftrain::TaskResidual;
use crate::synth::SynthProblem;
use crate::zeroshot::{render_prompt, ClassAnchorSet, PromptKey};

pub const BANK_MAGIC: [u8; 4] = *b"EMB1";
pub const LABEL_MAGIC: [u8; 4] = *b"LBL1";
pub const FORMAT_VERSION: u32 = 1;
const BANK_HEADER: usize = 16;
const LABEL_HEADER: usize = 12;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::ConfigInvalid(format!("{what} {v} exceeds u32")))
}

/// Checks magic, version and that the header is complete.
fn check_header(bytes: &[u8], path: &Path, magic: [u8; 4], header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile {
            path: path.to_owned(),
            needed: header_len as u64,
            found: bytes.len() as u64,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::TruncatedFile {
            path: path.to_owned(),
            needed: header_len as u64,
            found: bytes.len() as u64,
        });
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_owned(),
            version,
        });
    }
    Ok(())
}

fn check_payload(path: &Path, expected: u64, found: u64, header_len: usize) -> Result<()> {
    if found < expected {
        return Err(Error::TruncatedFile {
            path: path.to_owned(),
            needed: expected + header_len as u64,
            found: found + header_len as u64,
        });
    }
    if found > expected {
        return Err(Error::SizeMismatch {
            path: path.to_owned(),
            expected,
            found,
        });
    }
    Ok(())
}

pub fn encode_bank(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(BANK_HEADER + 4 * m.as_slice().len());
    out.extend_from_slice(&BANK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(m.rows(), "rows")?.to_le_bytes());
    out.extend_from_slice(&to_u32(m.dim(), "dim")?.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses an `EMB1` image; `path` is only used in error messages.
pub fn decode_bank(bytes: &[u8], path: &Path) -> Result<Matrix> {
    check_header(bytes, path, BANK_MAGIC, BANK_HEADER)?;
    let rows = u32_at(bytes, 8) as u64;
    let dim = u32_at(bytes, 12) as u64;
    let payload = &bytes[BANK_HEADER..];
    check_payload(path, rows * dim * 4, payload.len() as u64, BANK_HEADER)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Matrix::new(rows as usize, dim as usize, data)
}

pub fn write_bank(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_bank(m)?)
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    decode_bank(&read_file(path)?, path)
}

pub fn encode_labels(labels: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(LABEL_HEADER + 4 * labels.len());
    out.extend_from_slice(&LABEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(labels.len(), "label count")?.to_le_bytes());
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    check_header(bytes, path, LABEL_MAGIC, LABEL_HEADER)?;
    let count = u32_at(bytes, 8) as u64;
    let payload = &bytes[LABEL_HEADER..];
    check_payload(path, count * 4, payload.len() as u64, LABEL_HEADER)?;
    Ok(payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

pub fn write_labels(labels: &[u32], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_labels(labels)?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    decode_labels(&read_file(path)?, path)
}

pub fn write_residual(residual: &TaskResidual, path: impl AsRef<Path>) -> Result<()> {
    write_bank(residual.matrix(), path)
}

pub fn read_residual(path: impl AsRef<Path>) -> Result<TaskResidual> {
    read_bank(path).map(TaskResidual::from_matrix)
}

const DG_INDEX: &str = "index.json";
const DG_SHARED: &str = "shared.emb";
const DG_FORMAT: &str = "resadapt-dg-residual";

#[derive(Debug, Serialize, Deserialize)]
struct DgIndex {
    format: String,
    version: u32,
    shared: String,
    domains: Vec<DgIndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DgIndexEntry {
    name: String,
    file: String,
}

/// File-name-safe rendering of a domain name.
fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn write_dg_residual(res: &DisentangledResidual, dir: impl AsRef<Path>) -> Result<()> {
    res.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut domains = Vec::with_capacity(res.domain_names.len());
    let mut used = HashSet::new();
    for (i, (name, table)) in res.domain_names.iter().zip(&res.specific).enumerate() {
        let mut file = format!("specific_{}.emb", file_stem(name));
        if !used.insert(file.clone()) {
            file = format!("specific_{}_{i}.emb", file_stem(name));
            used.insert(file.clone());
        }
        write_bank(table, dir.join(&file))?;
        domains.push(DgIndexEntry {
            name: name.clone(),
            file,
        });
    }
    write_bank(&res.shared, dir.join(DG_SHARED))?;
    let index = DgIndex {
        format: DG_FORMAT.into(),
        version: FORMAT_VERSION,
        shared: DG_SHARED.into(),
        domains,
    };
    let path = dir.join(DG_INDEX);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    write_file(&path, format!("{text}\n").as_bytes())
}

fn read_dg_index(dir: &Path) -> Result<DgIndex> {
    let path = dir.join(DG_INDEX);
    let bytes = read_file(&path)?;
    let index: DgIndex = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if index.format != DG_FORMAT {
        return Err(Error::ManifestInvalid(format!(
            "{} is not a disentangled residual index",
            path.display()
        )));
    }
    if index.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path,
            version: index.version,
        });
    }
    Ok(index)
}

pub fn read_dg_residual(dir: impl AsRef<Path>) -> Result<DisentangledResidual> {
    let dir = dir.as_ref();
    let index = read_dg_index(dir)?;
    let shared = read_bank(dir.join(&index.shared))?;
    let mut domain_names = Vec::with_capacity(index.domains.len());
    let mut specific = Vec::with_capacity(index.domains.len());
    for entry in &index.domains {
        let path = dir.join(&entry.file);
        if !path.is_file() {
            return Err(Error::MissingDomainTable {
                domain: entry.name.clone(),
                path,
            });
        }
        specific.push(read_bank(path)?);
        domain_names.push(entry.name.clone());
    }
    let res = DisentangledResidual {
        domain_names,
        shared,
        specific,
    };
    res.validate()?;
    Ok(res)
}

/// Reads only the shared table (and the domain names listed in the index);
/// specific tables need not exist.
pub fn read_dg_shared(dir: impl AsRef<Path>) -> Result<(Matrix, Vec<String>)> {
    let dir = dir.as_ref();
    let index = read_dg_index(dir)?;
    let shared = read_bank(dir.join(&index.shared))?;
    Ok((shared, index.domains.into_iter().map(|d| d.name).collect()))
}

/// Dataset description consumed by the command-line tool. Paths are
/// relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub prompt_template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_description: Option<String>,
    /// Anchor bank rendered without any domain-specific description.
    pub anchors_path: String,
    /// Anchor banks rendered with a domain description, one per domain.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domain_anchors: Vec<DomainAnchorEntry>,
    pub splits: Vec<SplitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAnchorEntry {
    pub domain_name: String,
    pub domain_description: String,
    pub bank_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub bank_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<String>,
    pub domain_name: String,
}

#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub name: String,
    pub domain_name: String,
    pub bank: Matrix,
    pub labels: Option<Vec<u32>>,
}

/// A manifest whose referenced files have been read and cross-checked.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub base_dir: PathBuf,
    pub anchors: ClassAnchorSet,
    pub splits: Vec<LoadedSplit>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ManifestInvalid(msg.into())
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
        let manifest_path = manifest_path.as_ref();
        let bytes = read_file(manifest_path)?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| invalid(format!("{}: {e}", manifest_path.display())))?;
        let base_dir = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Dataset::from_manifest(manifest, base_dir)
    }

    pub fn from_manifest(manifest: Manifest, base_dir: PathBuf) -> Result<Dataset> {
        if manifest.class_names.is_empty() {
            return Err(invalid("class_names is empty"));
        }
        let mut seen = HashSet::new();
        for c in &manifest.class_names {
            if !seen.insert(c) {
                return Err(invalid(format!("duplicate class name {c:?}")));
            }
        }
        let mut seen = HashSet::new();
        for s in &manifest.splits {
            if !seen.insert(&s.name) {
                return Err(invalid(format!("duplicate split name {:?}", s.name)));
            }
        }
        let resolve = |p: &str| base_dir.join(p);
        let k = manifest.class_names.len();

        let anchors = load_anchor_set(
            &manifest,
            &resolve(&manifest.anchors_path),
            manifest.domain_description.as_deref(),
            "anchors_path",
        )?;

        let mut splits = Vec::with_capacity(manifest.splits.len());
        for s in &manifest.splits {
            let bank_path = resolve(&s.bank_path);
            require_file(&bank_path, &format!("splits[{}].bank_path", s.name))?;
            let bank = read_bank(&bank_path)?;
            if bank.dim() != anchors.dim() {
                return Err(invalid(format!(
                    "split {:?} has dimension {}, anchors have {}",
                    s.name,
                    bank.dim(),
                    anchors.dim()
                )));
            }
            let labels = match &s.labels_path {
                None => None,
                Some(p) => {
                    let path = resolve(p);
                    require_file(&path, &format!("splits[{}].labels_path", s.name))?;
                    let labels = read_labels(&path)?;
                    if labels.len() != bank.rows() {
                        return Err(invalid(format!(
                            "split {:?}: {} labels for {} rows",
                            s.name,
                            labels.len(),
                            bank.rows()
                        )));
                    }
                    if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
                        return Err(invalid(format!(
                            "split {:?}: label {bad} out of range for {k} classes",
                            s.name
                        )));
                    }
                    Some(labels)
                }
            };
            splits.push(LoadedSplit {
                name: s.name.clone(),
                domain_name: s.domain_name.clone(),
                bank,
                labels,
            });
        }
        Ok(Dataset {
            manifest,
            base_dir,
            anchors,
            splits,
        })
    }

    pub fn split(&self, name: &str) -> Result<&LoadedSplit> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| invalid(format!("no split named {name:?}")))
    }

    /// Anchors decorated with the description of `domain_name`.
    pub fn domain_prior_anchors(&self, domain_name: &str) -> Result<ClassAnchorSet> {
        let entry = self
            .manifest
            .domain_anchors
            .iter()
            .find(|e| e.domain_name == domain_name)
            .ok_or_else(|| {
                invalid(format!(
                    "missing key domain_anchors[domain_name = {domain_name:?}] required by --domain-prior"
                ))
            })?;
        let set = load_anchor_set(
            &self.manifest,
            &self.base_dir.join(&entry.bank_path),
            Some(&entry.domain_description),
            &format!("domain_anchors[{domain_name}].bank_path"),
        )?;
        if set.dim() != self.anchors.dim() {
            return Err(invalid(format!(
                "domain anchors for {domain_name:?} have dimension {}, expected {}",
                set.dim(),
                self.anchors.dim()
            )));
        }
        Ok(set)
    }

    /// Plain or domain-decorated anchors for the split's domain.
    pub fn anchors_for(&self, split: &LoadedSplit, domain_prior: bool) -> Result<ClassAnchorSet> {
        if domain_prior {
            self.domain_prior_anchors(&split.domain_name)
        } else {
            Ok(self.anchors.clone())
        }
    }
}

fn require_file(path: &Path, key: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{key}: file {} not found", path.display())))
    }
}

fn load_anchor_set(
    manifest: &Manifest,
    path: &Path,
    domain_description: Option<&str>,
    key: &str,
) -> Result<ClassAnchorSet> {
    require_file(path, key)?;
    let bank = read_bank(path)?;
    if bank.rows() != manifest.class_names.len() {
        return Err(invalid(format!(
            "{key}: {} anchor rows for {} classes",
            bank.rows(),
            manifest.class_names.len()
        )));
    }
    let keys = manifest
        .class_names
        .iter()
        .map(|c| {
            render_prompt(&PromptKey::new(&manifest.prompt_template, domain_description, c))
        })
        .collect::<Result<Vec<_>>>()?;
    ClassAnchorSet::new(manifest.class_names.clone(), bank, keys)
}

/// Writes a synthetic problem as banks, labels and `manifest.json` under `dir`.
/// Returns the manifest path.
pub fn save_synthetic(problem: &SynthProblem, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_bank(problem.anchors.anchors(), dir.join("anchors.emb"))?;
    let mut splits = Vec::new();
    for (n, name) in problem.domains.domain_names().iter().enumerate() {
        let bank_path = format!("{name}.emb");
        let labels_path = format!("{name}.lbl");
        write_bank(problem.domains.bank(n)?, dir.join(&bank_path))?;
        write_labels(&problem.labels[n], dir.join(&labels_path))?;
        splits.push(SplitEntry {
            name: name.clone(),
            bank_path,
            labels_path: Some(labels_path),
            domain_name: name.clone(),
        });
    }
    let manifest = Manifest {
        class_names: problem.anchors.class_names().to_vec(),
        prompt_template: crate::zeroshot::PLAIN_TEMPLATE.into(),
        domain_description: None,
        anchors_path: "anchors.emb".into(),
        domain_anchors: Vec::new(),
        splits,
    };
    let path = dir.join("manifest.json");
    write_manifest(&manifest, &path)?;
    Ok(path)
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json {
        path: path.to_owned(),
        source: e,
    })?;
    write_file(path, format!("{text}\n").as_bytes())
}
