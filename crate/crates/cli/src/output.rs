use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use coca_core::{Error, Result};
use serde_json::{json, Value};

pub const OUTPUT_ROOT_ENV: &str = "COCA_OUTPUT_ROOT";
pub const MANIFEST: &str = "manifest.json";

/// `--out` if given, else `$COCA_OUTPUT_ROOT/<command>`, else `runs/<command>`.
pub fn resolve_out(out: Option<&Path>, command: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    }
}

/// A staging directory next to the final one. Nothing appears at the final
/// path until [`OutputDir::commit`]; a dropped, uncommitted stage is removed.
pub struct OutputDir {
    target: PathBuf,
    stage: PathBuf,
    force: bool,
    committed: bool,
}

impl OutputDir {
    pub fn create(target: PathBuf, force: bool) -> Result<Self> {
        if target.exists() && !force {
            return Err(Error::Config(format!(
                "output directory {} exists; pass --force to replace it",
                target.display()
            )));
        }
        let name = target
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Config(format!("bad output directory {}", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let stage = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if stage.exists() {
            fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
        }
        fs::create_dir(&stage).map_err(|e| Error::io(&stage, e))?;
        Ok(Self {
            target,
            stage,
            force,
            committed: false,
        })
    }

    /// Path of `name` inside the staging directory.
    pub fn file(&self, name: &str) -> PathBuf {
        self.stage.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.file(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    pub fn write_json(&mut self, name: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    /// JSON report plus its aligned-text rendering, as `<stem>.json` and `<stem>.txt`.
    pub fn write_report(&mut self, stem: &str, value: &Value, table: &str) -> Result<()> {
        self.write_json(&format!("{stem}.json"), value)?;
        self.write(&format!("{stem}.txt"), table)
    }

    pub fn stage_path(&self) -> &Path {
        &self.stage
    }

    /// Writes the manifest, listing every file in the directory as an
    /// artifact, and moves the staging directory into place.
    pub fn commit(mut self, manifest: Manifest) -> Result<PathBuf> {
        let mut artifacts = Vec::new();
        for entry in fs::read_dir(&self.stage).map_err(|e| Error::io(&self.stage, e))? {
            let entry = entry.map_err(|e| Error::io(&self.stage, e))?;
            artifacts.push(entry.file_name().to_string_lossy().into_owned());
        }
        artifacts.sort();
        let value = manifest.to_json(&artifacts);
        self.write_json(MANIFEST, &value)?;
        if self.target.exists() {
            if !self.force {
                return Err(Error::Config(format!(
                    "output directory {} appeared during the run",
                    self.target.display()
                )));
            }
            fs::remove_dir_all(&self.target).map_err(|e| Error::io(&self.target, e))?;
        }
        fs::rename(&self.stage, &self.target).map_err(|e| Error::io(&self.target, e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.stage);
        }
    }
}

/// What a run did: enough to repeat it with `--config manifest.json`.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    fn to_json(&self, artifacts: &[String]) -> Value {
        json!({
            "command": self.command,
            "code_version": format!("coca {}", env!("CARGO_PKG_VERSION")),
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "artifacts": artifacts,
        })
    }
}

/// Config pairs and input paths stored in a manifest.
pub struct SavedRun {
    pub config: Vec<(String, String)>,
    pub inputs: BTreeMap<String, PathBuf>,
}

pub fn read_manifest(path: &Path) -> Result<SavedRun> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)?;
    let table = |key: &str| -> Result<Vec<(String, String)>> {
        match value.get(key) {
            None => Ok(Vec::new()),
            Some(Value::Object(m)) => m
                .iter()
                .map(|(k, v)| match v {
                    Value::String(s) => Ok((k.clone(), s.clone())),
                    other => Ok((k.clone(), other.to_string())),
                })
                .collect(),
            Some(_) => Err(Error::Data(format!("{}: \"{key}\" is not an object", path.display()))),
        }
    };
    Ok(SavedRun {
        config: table("config")?,
        inputs: table("inputs")?.into_iter().map(|(k, v)| (k, PathBuf::from(v))).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_stage_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("run");
        {
            let mut out = OutputDir::create(target.clone(), false).unwrap();
            out.write("a.txt", "x").unwrap();
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn commit_refuses_to_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("run");
        let mut out = OutputDir::create(target.clone(), false).unwrap();
        out.write("b.txt", "1").unwrap();
        out.write("a.txt", "2").unwrap();
        out.commit(Manifest::default()).unwrap();
        let manifest: Value = serde_json::from_str(&fs::read_to_string(target.join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(manifest["artifacts"], json!(["a.txt", "b.txt"]));

        assert!(matches!(OutputDir::create(target.clone(), false), Err(Error::Config(_))));
        let mut again = OutputDir::create(target.clone(), true).unwrap();
        again.write("c.txt", "3").unwrap();
        again.commit(Manifest::default()).unwrap();
        assert!(!target.join("a.txt").exists());
        assert!(target.join("c.txt").exists());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest {
            command: "pretrain".into(),
            seed: 3,
            ..Manifest::default()
        };
        m.config.insert("tau".into(), "0.3".into());
        m.inputs.insert("sessions".into(), "a.jsonl".into());
        let out = OutputDir::create(dir.path().join("r"), false).unwrap();
        let target = out.commit(m).unwrap();
        let saved = read_manifest(&target.join(MANIFEST)).unwrap();
        assert_eq!(saved.config, [("tau".to_string(), "0.3".to_string())]);
        assert_eq!(saved.inputs["sessions"], PathBuf::from("a.jsonl"));
    }

    #[test]
    fn default_out_uses_the_environment_root() {
        assert_eq!(resolve_out(Some(Path::new("x")), "sweep"), PathBuf::from("x"));
        std::env::set_var(OUTPUT_ROOT_ENV, "/tmp/coca-root");
        assert_eq!(resolve_out(None, "sweep"), PathBuf::from("/tmp/coca-root/sweep"));
        std::env::remove_var(OUTPUT_ROOT_ENV);
    }
}
