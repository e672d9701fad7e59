//! Artifact layout of a work directory.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: PathBuf) -> Result<Self> {
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Workdir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.jsonl"))
    }

    pub fn fusion(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.fusion.vec"))
    }

    pub fn knowledge(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.knowledge.jsonl"))
    }

    pub fn direct(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.direct.jsonl"))
    }

    pub fn manifest(&self, split: &str, direct: bool) -> PathBuf {
        let kind = if direct { "direct" } else { "knowledge" };
        self.root.join(format!("{split}.{kind}.manifest.jsonl"))
    }

    pub fn prompts(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.prompts.jsonl"))
    }

    pub fn retrieval(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.retrieval.jsonl"))
    }

    pub fn predictions(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.pred.jsonl"))
    }

    pub fn metrics(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.metrics.json"))
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.crf")
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run(&self, name: &str) -> PathBuf {
        self.runs().join(format!("{name}.json"))
    }

    pub fn snapshot(&self, command: &str) -> PathBuf {
        self.root.join("snapshots").join(format!("{command}.toml"))
    }
}

/// Fails unless `path` exists, naming the subcommand that produces it.
pub fn require(path: &Path, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "missing {}; run `pgim {producer}` first",
            path.display()
        );
    }
    Ok(())
}

pub fn open(path: &Path, producer: &str) -> Result<BufReader<fs::File>> {
    require(path, producer)?;
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
