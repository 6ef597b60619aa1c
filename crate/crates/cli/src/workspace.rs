//! Artifact layout under `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use decode_core::contlearn::{self, Framework};
use decode_core::experiment::Corpus;
use decode_core::scenegen::{read_dataset, Dataset};
use decode_core::Config;

use crate::Common;

pub struct Workspace {
    pub root: PathBuf,
    pub config: Config,
}

impl Workspace {
    pub fn open(common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Config::from_toml(&text).with_context(|| format!("in config {}", p.display()))?
            }
            None => Config::default(),
        };
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(Workspace {
            root: common.out.clone(),
            config,
        })
    }

    pub fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    pub fn dataset_path(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.ds"))
    }

    pub fn checkpoint_path(&self, phase: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("phase-{phase}.ck"))
    }

    pub fn dataset(&self, name: &str) -> Result<Dataset> {
        let p = self.dataset_path(name);
        if !p.exists() {
            bail!(
                "dataset {} not found; run `decode gen-data --out {}` first",
                p.display(),
                self.root.display()
            );
        }
        read_dataset(&p).with_context(|| format!("reading {}", p.display()))
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let mix = self.dataset("mix")?;
        let domains = self
            .config
            .data
            .domains
            .iter()
            .map(|spec| Ok((spec.clone(), self.dataset(&spec.name)?)))
            .collect::<Result<_>>()?;
        Ok(Corpus { mix, domains })
    }

    /// Loads `path`, or the phase checkpoint when `path` is `None`.
    pub fn framework(&self, phase: usize, path: Option<&Path>) -> Result<Framework> {
        let p = path.map(Path::to_path_buf).unwrap_or_else(|| self.checkpoint_path(phase));
        if !p.exists() {
            let hint = if phase == 0 {
                "run `decode pretrain` first".to_string()
            } else {
                format!("run `decode expand --phase {phase}` first")
            };
            bail!("checkpoint {} not found; {hint}", p.display());
        }
        let fw = contlearn::read_checkpoint(&p).with_context(|| format!("loading {}", p.display()))?;
        if path.is_none() && fw.phases_done() != phase {
            bail!(
                "{} holds {} finalized phase(s), expected {phase}",
                p.display(),
                fw.phases_done()
            );
        }
        if fw.config != self.config {
            log::warn!(
                "{} was trained with a different configuration; using the checkpoint's copy",
                p.display()
            );
        }
        Ok(fw)
    }

    /// Highest `phase-N.ck` present.
    pub fn latest_phase(&self) -> Option<usize> {
        (0..=self.config.data.phases.len())
            .rev()
            .find(|&m| self.checkpoint_path(m).exists())
    }
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}
