use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use setcomp_core::model::NormMode;
use setcomp_core::othello::CorpusSpec;
use setcomp_core::search::{GroupKey, SearchConfig};
use setcomp_core::training::TrainRunConfig;

pub const MANIFEST_NAME: &str = "setcomp-manifest.json";

/// A fully resolved command: enough to rerun it without the original
/// flags or config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    VerifyTheory {
        v: usize,
        precision: f64,
        norm: NormMode,
        max_v: usize,
        enumeration_cap: u64,
        allow_sampling: bool,
        eq_tol: f64,
        rank_tol: f64,
        out: Option<PathBuf>,
    },
    Train {
        config: TrainRunConfig,
        out: PathBuf,
        strict: bool,
    },
    Search {
        config: SearchConfig,
        out: PathBuf,
        group: Vec<GroupKey>,
    },
    Summarize {
        input: PathBuf,
        group: Vec<GroupKey>,
        out: PathBuf,
    },
    OthelloGen {
        spec: CorpusSpec,
        out: PathBuf,
        masks: Option<PathBuf>,
    },
    OthelloEval {
        logits: PathBuf,
        masks: PathBuf,
        out: Option<PathBuf>,
    },
    EvalLogits {
        logits: PathBuf,
        v: usize,
        out: Option<PathBuf>,
    },
}

impl Invocation {
    /// Global seed, when the command has one.
    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Train { config, .. } => Some(config.seed),
            Invocation::Search { config, .. } => Some(config.global_seed),
            Invocation::OthelloGen { spec, .. } => Some(spec.seed),
            _ => None,
        }
    }

    /// Where this command's manifest goes: inside output directories, next
    /// to single output files, nowhere for stdout-only runs.
    pub fn manifest_path(&self) -> Option<PathBuf> {
        match self {
            Invocation::Train { out, .. } | Invocation::Search { out, .. } => Some(out.join(MANIFEST_NAME)),
            Invocation::Summarize { out, .. } | Invocation::OthelloGen { out, .. } => Some(sidecar(out)),
            Invocation::VerifyTheory { out, .. }
            | Invocation::OthelloEval { out, .. }
            | Invocation::EvalLogits { out, .. } => out.as_deref().map(sidecar),
        }
    }

    /// Same command, with its primary output redirected.
    pub fn with_out(mut self, new: PathBuf) -> Self {
        match &mut self {
            Invocation::Train { out, .. } | Invocation::Search { out, .. } | Invocation::Summarize { out, .. } => {
                *out = new
            }
            Invocation::OthelloGen { out, masks, .. } => {
                if masks.is_some() {
                    *masks = Some(masks_path(&new));
                }
                *out = new;
            }
            Invocation::VerifyTheory { out, .. }
            | Invocation::OthelloEval { out, .. }
            | Invocation::EvalLogits { out, .. } => *out = Some(new),
        }
        self
    }
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

pub fn masks_path(corpus: &Path) -> PathBuf {
    let mut name = corpus.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".masks");
    corpus.with_file_name(name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub invocation: Invocation,
}

impl Manifest {
    pub fn new(invocation: Invocation) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: invocation.seed(),
            invocation,
        }
    }

    pub fn write(&self) -> Result<()> {
        let Some(path) = self.invocation.manifest_path() else { return Ok(()) };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
    }
}
