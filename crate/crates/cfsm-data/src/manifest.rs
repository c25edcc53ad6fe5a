//! Dataset manifests: generation of the labeled toy source set, construction
//! of the unlabeled degraded target pool, and JSONL (de)serialization.
//!
//! Manifest file layout: a header line `{"num_identities", "image_size",
//! "seed"}` followed by one line per record with `{"path", "identity",
//! "split"}`. Image paths are stored relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cfsm_core::nn::{derive_rng, sample_distinct};

use crate::degrade::{apply_degradation, DegradationSpec};
use crate::error::{DataError, Result};
use crate::glyph::{render, IdentityParams, SampleJitter};
use crate::imageio::{load_png, save_png};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestGallery,
    TestProbe,
}

/// One image entry; `identity_id` is −1 exactly when the record belongs to an
/// unlabeled target manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentityRecord {
    pub image_path: PathBuf,
    pub identity_id: i64,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<IdentityRecord>,
    pub num_identities: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Directory the relative image paths resolve against (the manifest's
    /// own directory). Not serialized.
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    num_identities: usize,
    image_size: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    path: String,
    identity: i64,
    split: Split,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    /// Absolute path of a record's image.
    pub fn resolve(&self, record: &IdentityRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    /// Indices of records belonging to `split`, in manifest order.
    pub fn indices_for_split(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Distinct non-negative identities present, ascending.
    pub fn identities(&self) -> Vec<i64> {
        let set: BTreeSet<i64> = self
            .records
            .iter()
            .map(|r| r.identity_id)
            .filter(|&id| id >= 0)
            .collect();
        set.into_iter().collect()
    }

    fn check(&self) -> Result<()> {
        let distinct = self.identities().len();
        if distinct != self.num_identities {
            return Err(DataError::Manifest {
                path: self.root.join(MANIFEST_FILE),
                detail: format!(
                    "num_identities {} but {} distinct labels present",
                    self.num_identities, distinct
                ),
            });
        }
        for r in &self.records {
            if r.identity_id < -1 {
                return Err(DataError::Manifest {
                    path: self.root.join(MANIFEST_FILE),
                    detail: format!("identity {} out of range", r.identity_id),
                });
            }
        }
        Ok(())
    }

    /// Writes `manifest.jsonl` under `self.root`.
    pub fn save(&self) -> Result<PathBuf> {
        self.check()?;
        let path = self.root.join(MANIFEST_FILE);
        let mut out = Vec::new();
        let header = HeaderLine {
            num_identities: self.num_identities,
            image_size: self.image_size,
            seed: self.seed,
        };
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for r in &self.records {
            let line = RecordLine {
                path: r.image_path.to_string_lossy().into_owned(),
                identity: r.identity_id,
                split: r.split,
            };
            serde_json::to_writer(&mut out, &line).expect("record serializes");
            out.push(b'\n');
        }
        fs::write(&path, out).map_err(|e| DataError::io(&path, e))?;
        Ok(path)
    }

    /// Loads a manifest file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Manifest> {
        let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| DataError::Manifest {
                path: path.to_path_buf(),
                detail: "empty manifest".into(),
            })?
            .map_err(|e| DataError::io(path, e))?;
        let header: HeaderLine =
            serde_json::from_str(&header_line).map_err(|e| DataError::Manifest {
                path: path.to_path_buf(),
                detail: format!("bad header: {e}"),
            })?;
        let mut records = Vec::new();
        for (ln, line) in lines.enumerate() {
            let line = line.map_err(|e| DataError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine = serde_json::from_str(&line).map_err(|e| DataError::Manifest {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", ln + 2),
            })?;
            records.push(IdentityRecord {
                image_path: PathBuf::from(rec.path),
                identity_id: rec.identity,
                split: rec.split,
            });
        }
        let manifest = Manifest {
            records,
            num_identities: header.num_identities,
            image_size: header.image_size,
            seed: header.seed,
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        manifest.check()?;
        Ok(manifest)
    }
}

/// Generates the labeled procedural source dataset: `num_identities ×
/// samples_per_id` PNGs plus a manifest. The last two samples of every
/// identity are reserved for evaluation (one gallery, one probe).
pub fn generate_toy_dataset(
    num_identities: usize,
    samples_per_id: usize,
    image_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if num_identities < 2 {
        return Err(DataError::InvalidArgument(format!(
            "need at least 2 identities, got {num_identities}"
        )));
    }
    if samples_per_id < 2 {
        return Err(DataError::InvalidArgument(format!(
            "need at least 2 samples per identity, got {samples_per_id}"
        )));
    }
    if image_size != 32 && image_size != 64 {
        return Err(DataError::InvalidArgument(format!(
            "image_size must be 32 or 64, got {image_size}"
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;

    let mut records = Vec::with_capacity(num_identities * samples_per_id);
    for id in 0..num_identities {
        let params = IdentityParams::from_seed(seed, id as u32);
        for sample in 0..samples_per_id {
            let mut rng = derive_rng(seed, &format!("jitter/{id}/{sample}"));
            let jitter = SampleJitter::sample(&mut rng);
            let img = render(&params, &jitter, image_size);
            let name = format!("img_{id:04}_{sample:02}.png");
            save_png(&out_dir.join(&name), &img)?;
            let split = if sample + 2 < samples_per_id {
                Split::Train
            } else if sample + 2 == samples_per_id {
                Split::TestGallery
            } else {
                Split::TestProbe
            };
            records.push(IdentityRecord {
                image_path: PathBuf::from(name),
                identity_id: id as i64,
                split,
            });
        }
    }

    let manifest = Manifest {
        records,
        num_identities,
        image_size,
        seed,
        root: out_dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

/// Builds the unlabeled degraded target pool from a source manifest. Picks
/// `round(fraction · N)` images — preferring identities absent from the
/// source train split when enough such images exist — degrades each with a
/// per-image seeded rng, and writes them with `identity_id = −1`.
pub fn build_target_set(
    source: &Manifest,
    spec: &DegradationSpec,
    fraction: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    spec.validate()?;
    let n = source.records.len();
    let count = (n as f64 * fraction).round() as usize;
    if count == 0 {
        return Err(DataError::InvalidArgument(format!(
            "fraction {fraction} of {n} records yields zero images"
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;

    let train_ids: BTreeSet<i64> = source
        .records
        .iter()
        .filter(|r| r.split == Split::Train && r.identity_id >= 0)
        .map(|r| r.identity_id)
        .collect();
    let disjoint: Vec<usize> = source
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| !train_ids.contains(&r.identity_id))
        .map(|(i, _)| i)
        .collect();
    let pool: Vec<usize> = if disjoint.len() >= count {
        disjoint
    } else {
        (0..n).collect()
    };

    let mut rng = derive_rng(seed, "target-subset");
    let mut chosen = sample_distinct(&mut rng, pool.len(), count);
    chosen.sort_unstable();

    let mut records = Vec::with_capacity(count);
    for (out_idx, &pick) in chosen.iter().enumerate() {
        let src = &source.records[pool[pick]];
        let img = load_png(&source.resolve(src))?;
        let mut op_rng = derive_rng(seed, &format!("degrade/{out_idx}"));
        let degraded = apply_degradation(&img, spec, &mut op_rng)?;
        let name = format!("tgt_{out_idx:04}.png");
        save_png(&out_dir.join(&name), &degraded)?;
        records.push(IdentityRecord {
            image_path: PathBuf::from(name),
            identity_id: -1,
            split: Split::Train,
        });
    }

    let manifest = Manifest {
        records,
        num_identities: 0,
        image_size: source.image_size,
        seed,
        root: out_dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_serialization_matches_wire_names() {
        assert_eq!(serde_json::to_string(&Split::Train).unwrap(), "\"train\"");
        assert_eq!(
            serde_json::to_string(&Split::TestGallery).unwrap(),
            "\"test_gallery\""
        );
        assert_eq!(
            serde_json::to_string(&Split::TestProbe).unwrap(),
            "\"test_probe\""
        );
    }

    #[test]
    fn save_load_roundtrip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest {
            records: vec![
                IdentityRecord {
                    image_path: PathBuf::from("a.png"),
                    identity_id: 0,
                    split: Split::Train,
                },
                IdentityRecord {
                    image_path: PathBuf::from("b.png"),
                    identity_id: 1,
                    split: Split::TestProbe,
                },
            ],
            num_identities: 2,
            image_size: 32,
            seed: 9,
            root: dir.path().to_path_buf(),
        };
        let path = manifest.save().unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.records, manifest.records);
        assert_eq!(back.num_identities, 2);
        assert_eq!(back.image_size, 32);
        assert_eq!(back.seed, 9);
        assert_eq!(back.root, dir.path());
    }

    #[test]
    fn load_rejects_inconsistent_identity_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(
            &path,
            "{\"num_identities\":3,\"image_size\":32,\"seed\":0}\n\
             {\"path\":\"a.png\",\"identity\":0,\"split\":\"train\"}\n",
        )
        .unwrap();
        let err = Manifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("distinct labels"));
    }
}
