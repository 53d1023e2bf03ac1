use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use vidiff_core::config::{RunConfig, SEEDED_SECTIONS};
use vidiff_core::Error;

use crate::error::CliError;
use crate::GlobalArgs;

pub const CONFIG_FILE: &str = "config.toml";
const SUBDIRS: [&str; 4] = ["logs", "ckpt", "images", "metrics"];

/// One run directory and the configuration every command in it uses.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    pub cfg: RunConfig,
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_overrides(global: &GlobalArgs) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for item in &global.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set {item}: expected KEY=VALUE")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = global.seed {
        out.push(("seed".into(), seed.to_string()));
        for section in SEEDED_SECTIONS {
            out.push((format!("{section}.seed"), seed.to_string()));
        }
    }
    Ok(out)
}

fn timestamp() -> String {
    chrono::Local::now().format("%Y%m%d-%H%M%S-%3f").to_string()
}

impl Run {
    /// Resolves the configuration (explicit file, else the run's snapshot, else
    /// defaults; overrides on top), creates the layout and rewrites the snapshot.
    pub fn open(global: &GlobalArgs, command: &str, extra: Vec<(String, String)>) -> Result<Self, CliError> {
        let mut overrides = parse_overrides(global)?;
        overrides.extend(extra);
        let file_text = match &global.config {
            Some(p) if !p.is_file() => {
                return Err(CliError::config(format!("--config {}: no such file", p.display())));
            }
            Some(p) => Some(read_text(p)?),
            None => None,
        };
        let provisional = RunConfig::parse(file_text.as_deref().unwrap_or(""), &overrides)?;
        let name = global.name.clone().unwrap_or_else(timestamp);
        if name.is_empty() || name == "." || name == ".." {
            return Err(CliError::config(format!("--name `{name}` is not a directory name")));
        }
        let dir = provisional.runs_root().join(&name);
        let snapshot = dir.join(CONFIG_FILE);
        let cfg = match file_text {
            None if snapshot.is_file() => {
                log::info!("reusing {}", snapshot.display());
                RunConfig::parse(&read_text(&snapshot)?, &overrides)?
            }
            _ => provisional,
        };
        for sub in SUBDIRS {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        vidiff_core::synthdata::write_text(&snapshot, &cfg.to_toml())?;
        let history = dir.join("logs").join("commands.log");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&history)
            .map_err(|e| Error::io(&history, e))?;
        writeln!(f, "{} {command}", chrono::Local::now().to_rfc3339()).map_err(|e| Error::io(&history, e))?;
        Ok(Self { dir, cfg })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}
