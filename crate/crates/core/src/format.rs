//! `NSPK` binary spike-data files.
//!
//! All integers are little-endian `u32`, floats little-endian `f64`:
//!
//! ```text
//! "NSPK" | version | header_len | header (UTF-8 JSON)
//! n_trials | n_neurons | flags | latent_dim
//! T[n_trials]
//! labels[n_trials]            if flags & 1
//! counts[ΣT · n_neurons]      row-major (trial, time, neuron)
//! latents[ΣT · latent_dim]    if flags & 2
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::synthdata::{DatasetBundle, Manifest, SpikeSequence, PARTITIONS};

pub const MAGIC: &[u8; 4] = b"NSPK";
pub const VERSION: u32 = 1;
const FLAG_LABELS: u32 = 1;
const FLAG_LATENTS: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic at offset 0: expected \"NSPK\"")]
    Magic,
    #[error("unsupported format version {0} at offset 4")]
    Version(u32),
    #[error("truncated payload at offset {offset}: needed {needed} more bytes, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("{extra} trailing bytes after offset {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("invalid header at offset 12: {0}")]
    Header(String),
    #[error("inconsistent trials: {0}")]
    Inconsistent(String),
}

/// A decoded file: its JSON header and trials.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeFile {
    pub header: String,
    pub trials: Vec<SpikeSequence>,
}

/// Header of each partition file inside a bundle directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionHeader {
    pub partition: String,
    pub manifest: Manifest,
}

fn u32_of(v: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::Inconsistent(format!("{what} {v} exceeds u32")))
}

pub fn encode(header: &str, trials: &[SpikeSequence]) -> Result<Vec<u8>, FormatError> {
    let n = trials.first().map_or(0, |s| s.n_neurons);
    let d = trials.first().map_or(0, |s| s.latent_dim);
    let labelled = trials.first().is_some_and(|s| s.label.is_some());
    for (i, s) in trials.iter().enumerate() {
        if s.n_neurons != n || s.latent_dim != d || s.label.is_some() != labelled {
            return Err(FormatError::Inconsistent(format!(
                "trial {i} differs from trial 0 in neurons, latent width or labelling"
            )));
        }
        if n > 0 && s.counts.len() % n != 0 || s.latents.len() != s.len() * d {
            return Err(FormatError::Inconsistent(format!("trial {i} has ragged arrays")));
        }
    }
    let flags = if labelled { FLAG_LABELS } else { 0 } | if d > 0 { FLAG_LATENTS } else { 0 };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(header.len(), "header length")?.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in [u32_of(trials.len(), "trial count")?, u32_of(n, "neuron count")?, flags, u32_of(d, "latent width")?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in trials {
        out.extend_from_slice(&u32_of(s.len(), "trial length")?.to_le_bytes());
    }
    if labelled {
        for s in trials {
            out.extend_from_slice(&s.label.expect("labelled").to_le_bytes());
        }
    }
    for s in trials {
        for c in &s.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for s in trials {
        for x in &s.latents {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if len > available {
            return Err(FormatError::Truncated { offset: self.pos, needed: len, available });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u32s(&mut self, count: usize) -> Result<Vec<u32>, FormatError> {
        let raw = self.take(count.checked_mul(4).ok_or(FormatError::Inconsistent("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(count.checked_mul(8).ok_or(FormatError::Inconsistent("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<SpikeFile, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| FormatError::Magic)? != MAGIC {
        return Err(FormatError::Magic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?).map_err(|e| FormatError::Header(e.to_string()))?.to_string();
    let n_trials = r.u32()? as usize;
    let n = r.u32()? as usize;
    let flags = r.u32()?;
    let d = r.u32()? as usize;
    if flags & !(FLAG_LABELS | FLAG_LATENTS) != 0 {
        return Err(FormatError::Inconsistent(format!("unknown flags {flags:#x}")));
    }
    if (flags & FLAG_LATENTS != 0) != (d > 0) {
        return Err(FormatError::Inconsistent("latent flag disagrees with latent width".into()));
    }
    let lens = r.u32s(n_trials)?;
    let labels = if flags & FLAG_LABELS != 0 { Some(r.u32s(n_trials)?) } else { None };
    let total: usize = lens.iter().map(|&t| t as usize).sum();
    let counts = r.u32s(total * n)?;
    let latents = r.f64s(total * d)?;
    if r.pos != bytes.len() {
        return Err(FormatError::Trailing { offset: r.pos, extra: bytes.len() - r.pos });
    }
    let mut trials = Vec::with_capacity(n_trials);
    let (mut c0, mut l0) = (0, 0);
    for (i, &t) in lens.iter().enumerate() {
        let t = t as usize;
        trials.push(SpikeSequence {
            n_neurons: n,
            counts: counts[c0..c0 + t * n].to_vec(),
            label: labels.as_ref().map(|l| l[i]),
            latents: latents[l0..l0 + t * d].to_vec(),
            latent_dim: d,
        });
        c0 += t * n;
        l0 += t * d;
    }
    Ok(SpikeFile { header, trials })
}

pub fn write_file(path: &Path, header: &str, trials: &[SpikeSequence]) -> Result<(), FormatError> {
    let bytes = encode(header, trials)?;
    fs::write(path, bytes).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })
}

pub fn read_file(path: &Path) -> Result<SpikeFile, FormatError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

pub fn partition_path(dir: &Path, partition: &str) -> PathBuf {
    dir.join(format!("{partition}.nspk"))
}

/// Writes `manifest.json` and one file per partition into `dir`.
pub fn write_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<(), FormatError> {
    fs::create_dir_all(dir).map_err(|source| FormatError::Io { path: dir.to_path_buf(), source })?;
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, bundle.manifest.to_json() + "\n")
        .map_err(|source| FormatError::Io { path: manifest_path, source })?;
    for name in PARTITIONS {
        let header = PartitionHeader { partition: name.to_string(), manifest: bundle.manifest.clone() };
        let header = serde_json::to_string(&header).expect("header serializes");
        write_file(&partition_path(dir, name), &header, bundle.partition(name).expect("known partition"))?;
    }
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<DatasetBundle, FormatError> {
    let mut parts = Vec::new();
    let mut manifest: Option<Manifest> = None;
    for name in PARTITIONS {
        let path = partition_path(dir, name);
        let file = read_file(&path)?;
        let header: PartitionHeader =
            serde_json::from_str(&file.header).map_err(|e| FormatError::Header(format!("{}: {e}", path.display())))?;
        if header.partition != name {
            return Err(FormatError::Header(format!("{} declares partition {:?}", path.display(), header.partition)));
        }
        match &manifest {
            Some(m) if *m != header.manifest => {
                return Err(FormatError::Header(format!("{} has a different manifest", path.display())));
            }
            Some(_) => {}
            None => manifest = Some(header.manifest),
        }
        parts.push(file.trials);
    }
    let test = parts.pop().expect("three partitions");
    let validation = parts.pop().expect("three partitions");
    let train = parts.pop().expect("three partitions");
    Ok(DatasetBundle { manifest: manifest.expect("three partitions"), train, validation, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_scene_surrogate, SceneSpec};

    fn seqs() -> Vec<SpikeSequence> {
        vec![
            SpikeSequence {
                n_neurons: 2,
                counts: vec![1, 2, 3, 4, 5, 6],
                label: Some(7),
                latents: vec![0.5, -1.0, 2.0],
                latent_dim: 1,
            },
            SpikeSequence {
                n_neurons: 2,
                counts: vec![9, 0],
                label: Some(1),
                latents: vec![f64::MIN_POSITIVE],
                latent_dim: 1,
            },
        ]
    }

    #[test]
    fn layout_is_as_documented() {
        let b = encode("{}", &seqs()).unwrap();
        assert_eq!(&b[..4], b"NSPK");
        let word = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        assert_eq!(word(4), 1);
        assert_eq!(word(8), 2);
        assert_eq!(&b[12..14], b"{}");
        assert_eq!([word(14), word(18), word(22), word(26)], [2, 2, 3, 1]);
        assert_eq!([word(30), word(34)], [3, 1]);
        assert_eq!([word(38), word(42)], [7, 1]);
        assert_eq!(word(46), 1);
        assert_eq!(word(46 + 4 * 7), 0);
        let first_latent = 46 + 4 * 8;
        assert_eq!(f64::from_le_bytes(b[first_latent..first_latent + 8].try_into().unwrap()), 0.5);
        assert_eq!(b.len(), first_latent + 8 * 4);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let b = encode("hdr", &seqs()).unwrap();
        let f = decode(&b).unwrap();
        assert_eq!(f.header, "hdr");
        assert_eq!(f.trials, seqs());
        assert_eq!(encode(&f.header, &f.trials).unwrap(), b);
    }

    #[test]
    fn unlabelled_and_latent_free() {
        let s =
            vec![SpikeSequence { n_neurons: 3, counts: vec![1, 2, 3], label: None, latents: vec![], latent_dim: 0 }];
        let b = encode("", &s).unwrap();
        assert_eq!(decode(&b).unwrap().trials, s);
        assert_eq!(decode(&encode("", &[]).unwrap()).unwrap().trials, vec![]);
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let b = encode("hdr", &seqs()).unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(FormatError::Magic)));
        assert!(matches!(decode(&b[..2]), Err(FormatError::Magic)));
        let cut = b.len() - 3;
        match decode(&b[..cut]) {
            Err(FormatError::Truncated { offset, needed, available }) => {
                assert_eq!(offset, b.len() - 8 * 4);
                assert_eq!(needed, 32);
                assert_eq!(available, 29);
            }
            other => panic!("{other:?}"),
        }
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(FormatError::Trailing { extra: 1, .. })));
        let mut ver = b.clone();
        ver[4] = 9;
        assert!(matches!(decode(&ver), Err(FormatError::Version(9))));
    }

    #[test]
    fn mixed_trials_rejected() {
        let mut s = seqs();
        s[1].label = None;
        assert!(matches!(encode("", &s), Err(FormatError::Inconsistent(_))));
    }

    #[test]
    fn bundle_round_trip() {
        let bundle =
            gen_scene_surrogate(&SceneSpec { trials_per_class: 10, n_bins: 4, ..SceneSpec::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &bundle).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.manifest, bundle.manifest);
        assert_eq!(back.train, bundle.train);
        assert_eq!(back.validation, bundle.validation);
        assert_eq!(back.test, bundle.test);
        let first = fs::read(partition_path(dir.path(), "train")).unwrap();
        let again = tempfile::tempdir().unwrap();
        write_bundle(again.path(), &back).unwrap();
        assert_eq!(fs::read(partition_path(again.path(), "train")).unwrap(), first);
    }
}
