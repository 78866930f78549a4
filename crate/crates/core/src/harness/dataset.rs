//! On-disk dataset layout: a JSON manifest plus one binary file per trial.
//!
//! Trial files carry the magic `BEETL1\0`, a u32 LE channel count, a u32 LE
//! sample count, the sampling rate as f64 LE, then channels x samples f32 LE
//! in row-major order. Round trips are lossless at f32 precision.

use crate::error::{Error, Result};
use crate::signal::{ChannelMap, DomainId, SubjectId, Trial};
use crate::spdnet::DomainRole;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const TRIAL_MAGIC: &[u8; 7] = b"BEETL1\0";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One data set in the collection.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainEntry {
    pub id: DomainId,
    pub name: String,
    pub channels: ChannelMap,
    pub rate: f64,
    pub classes: Vec<String>,
    pub role: DomainRole,
    pub subjects: Vec<SubjectId>,
}

/// One trial file in the index.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrialEntry {
    pub path: PathBuf,
    pub domain: DomainId,
    pub subject: SubjectId,
    pub session: u32,
    pub block: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub domains: Vec<DomainEntry>,
    pub trials: Vec<TrialEntry>,
}

impl DatasetManifest {
    pub fn domain(&self, id: DomainId) -> Result<&DomainEntry> {
        self.domains
            .iter()
            .find(|d| d.id == id)
            .ok_or(Error::UnknownDomain(id.0))
    }

    pub fn target_domains(&self) -> impl Iterator<Item = &DomainEntry> {
        self.domains
            .iter()
            .filter(|d| d.role == DomainRole::Target)
    }

    fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::ManifestMismatch(format!(
                "unsupported manifest version {}",
                self.format_version
            )));
        }
        if self.domains.is_empty() {
            return Err(Error::ManifestMismatch("no domains".into()));
        }
        for t in &self.trials {
            let d = self.domain(t.domain)?;
            if !d.subjects.contains(&t.subject) {
                return Err(Error::ManifestMismatch(format!(
                    "trial {} lists subject {} absent from domain {}",
                    t.path.display(),
                    t.subject,
                    d.name
                )));
            }
            if let Some(l) = t.label {
                if l >= d.classes.len() {
                    return Err(Error::ManifestMismatch(format!(
                        "trial {} label {} exceeds the {} classes of domain {}",
                        t.path.display(),
                        l,
                        d.classes.len(),
                        d.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Writes one trial's signal (channels x samples) and rate.
pub fn save_trial_file(path: &Path, signal: &DMatrix<f64>, rate: f64) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(TRIAL_MAGIC)?;
    w.write_u32::<LittleEndian>(signal.nrows() as u32)?;
    w.write_u32::<LittleEndian>(signal.ncols() as u32)?;
    w.write_f64::<LittleEndian>(rate)?;
    for i in 0..signal.nrows() {
        for j in 0..signal.ncols() {
            w.write_f32::<LittleEndian>(signal[(i, j)] as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a trial file back; fails with a dedicated error on a wrong magic or
/// a payload shorter than the header claims.
pub fn load_trial_file(path: &Path) -> Result<(DMatrix<f64>, f64)> {
    let file = fs::File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| Error::BadMagic {
        path: path.to_path_buf(),
    })?;
    if &magic != TRIAL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let channels = r.read_u32::<LittleEndian>()? as usize;
    let samples = r.read_u32::<LittleEndian>()? as usize;
    let rate = r.read_f64::<LittleEndian>()?;
    let expected = 7 + 4 + 4 + 8 + (channels * samples * 4) as u64;
    if file_len < expected {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            expected,
            found: file_len,
        });
    }
    let mut signal = DMatrix::zeros(channels, samples);
    for i in 0..channels {
        for j in 0..samples {
            signal[(i, j)] = r.read_f32::<LittleEndian>()? as f64;
        }
    }
    Ok((signal, rate))
}

/// Writes the manifest plus every trial file under `dir`. Trial paths in the
/// manifest are relative to `dir`.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, trials: &[Trial]) -> Result<()> {
    if manifest.trials.len() != trials.len() {
        return Err(Error::LengthMismatch {
            op: "save_dataset",
            left: manifest.trials.len(),
            right: trials.len(),
        });
    }
    manifest.validate()?;
    fs::create_dir_all(dir)?;
    for (entry, trial) in manifest.trials.iter().zip(trials) {
        let path = dir.join(&entry.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        save_trial_file(&path, trial.signal(), trial.rate())?;
    }
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

/// Loads a dataset directory, checking every trial file against the manifest
/// (channel count and rate must match its domain).
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Trial>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = fs::read_to_string(&manifest_path)?;
    let manifest: DatasetManifest = serde_json::from_str(&json)?;
    manifest.validate()?;
    let mut trials = Vec::with_capacity(manifest.trials.len());
    for entry in &manifest.trials {
        let domain = manifest.domain(entry.domain)?;
        let path = dir.join(&entry.path);
        let (signal, rate) = load_trial_file(&path)?;
        if signal.nrows() != domain.channels.len() {
            return Err(Error::ManifestMismatch(format!(
                "{}: {} channels on disk, domain {} declares {}",
                entry.path.display(),
                signal.nrows(),
                domain.name,
                domain.channels.len()
            )));
        }
        if (rate - domain.rate).abs() > 1e-9 {
            return Err(Error::ManifestMismatch(format!(
                "{}: rate {} on disk, domain {} declares {}",
                entry.path.display(),
                rate,
                domain.name,
                domain.rate
            )));
        }
        trials.push(Trial::new(
            signal,
            rate,
            entry.subject,
            entry.domain,
            entry.session,
            entry.block,
            entry.label,
        )?);
    }
    Ok((manifest, trials))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    fn tiny_dataset(dir: &Path) -> (DatasetManifest, Vec<Trial>) {
        let mut rng = ChaCha20Rng::seed_from_u64(80);
        let channels = ChannelMap::new(["C3", "Cz", "C4"]).unwrap();
        let manifest = DatasetManifest {
            format_version: MANIFEST_VERSION,
            domains: vec![DomainEntry {
                id: DomainId(0),
                name: "toy".into(),
                channels,
                rate: 50.0,
                classes: vec!["left".into(), "right".into()],
                role: DomainRole::Source,
                subjects: vec![SubjectId(0)],
            }],
            trials: (0..3)
                .map(|i| TrialEntry {
                    path: PathBuf::from(format!("trials/t{i}.bin")),
                    domain: DomainId(0),
                    subject: SubjectId(0),
                    session: 0,
                    block: i,
                    label: Some((i % 2) as usize),
                })
                .collect(),
        };
        let trials: Vec<Trial> = (0..3)
            .map(|i| {
                let signal =
                    DMatrix::from_fn(3, 16, |_, _| rng.sample::<f64, _>(StandardNormal));
                Trial::new(signal, 50.0, SubjectId(0), DomainId(0), 0, i, Some((i % 2) as usize))
                    .unwrap()
            })
            .collect();
        save_dataset(dir, &manifest, &trials).unwrap();
        (manifest, trials)
    }

    #[test]
    fn round_trip_is_lossless_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, trials) = tiny_dataset(dir.path());
        let (loaded_manifest, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest, loaded_manifest);
        for (a, b) in trials.iter().zip(&loaded) {
            assert_eq!(a.subject, b.subject);
            assert_eq!(a.block, b.block);
            assert_eq!(a.label, b.label);
            for (x, y) in a.signal().iter().zip(b.signal().iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn corrupted_magic_is_a_magic_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let victim = dir.path().join("trials/t0.bin");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[0] = b'X';
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_file_is_a_truncation_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        let victim = dir.path().join("trials/t1.bin");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn channel_count_mismatch_is_a_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        let (_, trials) = tiny_dataset(dir.path());
        // Overwrite one file with a 2-channel signal.
        let two_rows = trials[0].signal().rows(0, 2).into_owned();
        save_trial_file(&dir.path().join("trials/t2.bin"), &two_rows, 50.0).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::ManifestMismatch(_))
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (mut manifest, trials) = tiny_dataset(dir.path());
        manifest.trials[0].label = Some(5);
        assert!(matches!(
            save_dataset(dir.path(), &manifest, &trials),
            Err(Error::ManifestMismatch(_))
        ));
    }

    #[test]
    fn missing_trial_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path());
        fs::remove_file(dir.path().join("trials/t1.bin")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io(_))));
    }
}
