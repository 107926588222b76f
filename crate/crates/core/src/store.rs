//! On-disk artifact store: `<root>/<run-id>/<stage>/` with a digest
//! manifest per completed stage.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::datasets::atomic_write;
use crate::error::{KrError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Gan,
    CheckpointOpt,
    Tuning,
    Student,
    Strategies,
    Mia,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Teacher,
        Stage::Gan,
        Stage::CheckpointOpt,
        Stage::Tuning,
        Stage::Student,
        Stage::Strategies,
        Stage::Mia,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Gan => "gan",
            Stage::CheckpointOpt => "checkpoint_opt",
            Stage::Tuning => "tuning",
            Stage::Student => "student",
            Stage::Strategies => "strategies",
            Stage::Mia => "mia",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = KrError;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| KrError::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub config_hash: String,
    pub artifacts: Vec<ArtifactDigest>,
    pub seconds: f64,
}

pub fn file_sha256(path: &Path) -> Result<(String, u64)> {
    let mut f = fs::File::open(path).map_err(|e| KrError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(|e| KrError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(h.finalize()), total))
}

#[derive(Clone, Debug)]
pub struct ArtifactStore {
    run_dir: PathBuf,
    config_hash: String,
}

impl ArtifactStore {
    /// Opens (creating if needed) the run directory for `cfg` and records
    /// its configuration. An existing directory must hold the same config.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let run_dir = cfg.output_root.join(cfg.run_id());
        fs::create_dir_all(&run_dir).map_err(|e| KrError::io(&run_dir, e))?;
        let hash = cfg.hash();
        let cfg_path = run_dir.join(CONFIG_FILE);
        if cfg_path.exists() {
            let stored = Self::read_config_text(&run_dir)?;
            let prev: RunConfig = toml::from_str(&stored).map_err(|e| KrError::Config(e.to_string()))?;
            if prev.hash() != hash {
                return Err(KrError::Config(format!(
                    "{} holds a different configuration",
                    run_dir.display()
                )));
            }
        } else {
            atomic_write(&cfg_path, cfg.to_toml()?.as_bytes())?;
        }
        Ok(Self {
            run_dir,
            config_hash: hash,
        })
    }

    fn read_config_text(run_dir: &Path) -> Result<String> {
        let p = run_dir.join(CONFIG_FILE);
        fs::read_to_string(&p).map_err(|e| KrError::io(&p, e))
    }

    /// The configuration stored in an existing run directory.
    pub fn load_config(run_dir: &Path) -> Result<RunConfig> {
        toml::from_str(&Self::read_config_text(run_dir)?).map_err(|e| KrError::Config(e.to_string()))
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.as_str())
    }

    /// Stage directory, created empty (any previous content is removed).
    pub fn fresh_stage_dir(&self, stage: Stage) -> Result<PathBuf> {
        let d = self.stage_dir(stage);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| KrError::io(&d, e))?;
        }
        fs::create_dir_all(&d).map_err(|e| KrError::io(&d, e))?;
        Ok(d)
    }

    /// The manifest of a completed stage whose artifacts all still match
    /// their digests; `None` otherwise.
    pub fn completed(&self, stage: Stage) -> Result<Option<StageManifest>> {
        let p = self.stage_dir(stage).join(MANIFEST);
        let Ok(bytes) = fs::read(&p) else {
            return Ok(None);
        };
        let Ok(m) = serde_json::from_slice::<StageManifest>(&bytes) else {
            return Ok(None);
        };
        if m.config_hash != self.config_hash || m.stage != stage {
            return Ok(None);
        }
        for a in &m.artifacts {
            match file_sha256(&self.run_dir.join(&a.path)) {
                Ok((d, n)) if d == a.sha256 && n == a.bytes => {}
                _ => return Ok(None),
            }
        }
        Ok(Some(m))
    }

    /// Records `files` (inside the stage directory) as the stage's output.
    pub fn finish(&self, stage: Stage, files: &[PathBuf], seconds: f64) -> Result<StageManifest> {
        let mut artifacts = Vec::with_capacity(files.len());
        for f in files {
            let rel = f
                .strip_prefix(&self.run_dir)
                .map_err(|_| KrError::invalid(format!("{} is outside the run directory", f.display())))?;
            let (sha256, bytes) = file_sha256(f)?;
            artifacts.push(ArtifactDigest {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256,
                bytes,
            });
        }
        let m = StageManifest {
            stage,
            config_hash: self.config_hash.clone(),
            artifacts,
            seconds,
        };
        atomic_write(&self.stage_dir(stage).join(MANIFEST), &serde_json::to_vec_pretty(&m)?)?;
        Ok(m)
    }

    /// Drops a stage's completion record.
    pub fn invalidate(&self, stage: Stage) -> Result<()> {
        let p = self.stage_dir(stage).join(MANIFEST);
        match fs::remove_file(&p) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(KrError::io(p, e)),
        }
    }

    pub fn write_json<T: Serialize>(&self, stage: Stage, name: &str, value: &T) -> Result<PathBuf> {
        let p = self.stage_dir(stage).join(name);
        atomic_write(&p, &serde_json::to_vec_pretty(value)?)?;
        Ok(p)
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&self, stage: Stage, name: &str) -> Result<T> {
        let p = self.stage_dir(stage).join(name);
        let bytes = fs::read(&p).map_err(|e| KrError::io(&p, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Registry, TOY_SHAPES};
    use crate::nets::Profile;

    fn cfg(root: &Path) -> RunConfig {
        let mut c = RunConfig::defaults(&Registry::builtin(), TOY_SHAPES, Profile::Tiny, 1).unwrap();
        c.output_root = root.to_path_buf();
        c
    }

    #[test]
    fn manifest_tracks_digests() {
        let tmp = tempfile::tempdir().unwrap();
        let s = ArtifactStore::open(&cfg(tmp.path())).unwrap();
        let d = s.fresh_stage_dir(Stage::Teacher).unwrap();
        let f = d.join("a.bin");
        fs::write(&f, b"hello").unwrap();
        assert!(s.completed(Stage::Teacher).unwrap().is_none());
        s.finish(Stage::Teacher, std::slice::from_ref(&f), 1.0).unwrap();
        let m = s.completed(Stage::Teacher).unwrap().unwrap();
        assert_eq!(m.artifacts[0].path, "teacher/a.bin");
        assert_eq!(m.artifacts[0].bytes, 5);
        fs::write(&f, b"hellO").unwrap();
        assert!(s.completed(Stage::Teacher).unwrap().is_none());
        fs::write(&f, b"hello").unwrap();
        s.invalidate(Stage::Teacher).unwrap();
        assert!(s.completed(Stage::Teacher).unwrap().is_none());
    }

    #[test]
    fn reopen_checks_config() {
        let tmp = tempfile::tempdir().unwrap();
        let c = cfg(tmp.path());
        let s = ArtifactStore::open(&c).unwrap();
        assert_eq!(ArtifactStore::load_config(s.run_dir()).unwrap().hash(), c.hash());
        ArtifactStore::open(&c).unwrap();
        // a tampered config file under the same run id is refused
        let mut other = c.clone();
        other.gan.train.epochs = 5;
        fs::write(s.run_dir().join(CONFIG_FILE), other.to_toml().unwrap()).unwrap();
        assert!(ArtifactStore::open(&c).is_err());
    }

    #[test]
    fn stage_names_round_trip() {
        for st in Stage::ALL {
            assert_eq!(st.as_str().parse::<Stage>().unwrap(), st);
        }
    }
}
