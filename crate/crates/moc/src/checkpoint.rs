//! Versioned JSON checkpoints with a dimension manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use moc_core::trainer::{Trainer, TrainerState, WarmStart};

pub const FORMAT: &str = "moc-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (format `{0}`)")]
    Format(String),
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("dimension manifest mismatch: {0}")]
    Manifest(String),
}

/// Shapes a checkpoint must agree with before it is loaded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: String,
    pub variant: String,
    pub theta_len: usize,
    pub hyper_hidden: usize,
    pub hyper_z: usize,
    pub base_hidden: usize,
    pub mem_rows: usize,
    pub mem_cols: usize,
    pub pi_len: usize,
    pub v_len: usize,
    pub q_len: usize,
}

impl Manifest {
    pub fn of(tr: &Trainer) -> Self {
        let c = tr.config();
        let p = tr.agent_params();
        Self {
            task: c.task.name().into(),
            variant: c.variant.name().into(),
            theta_len: tr.theta().len(),
            hyper_hidden: c.hyper_hidden,
            hyper_z: c.hyper_z,
            base_hidden: c.base_hidden,
            mem_rows: c.mem_rows,
            mem_cols: c.mem_cols,
            pi_len: p.pi.len(),
            v_len: p.v.len(),
            q_len: p.q.len(),
        }
    }

    fn outer_dims(&self) -> [(&'static str, usize); 6] {
        [
            ("theta_len", self.theta_len),
            ("hyper_hidden", self.hyper_hidden),
            ("hyper_z", self.hyper_z),
            ("base_hidden", self.base_hidden),
            ("mem_rows", self.mem_rows),
            ("mem_cols", self.mem_cols),
        ]
    }

    /// Checks the dimensions that a warm start transfers.
    pub fn check_outer(&self, want: &Manifest) -> Result<(), CheckpointError> {
        for ((name, got), (_, expected)) in self.outer_dims().into_iter().zip(want.outer_dims()) {
            if got != expected {
                return Err(CheckpointError::Manifest(format!("{name}: checkpoint has {got}, run expects {expected}")));
            }
        }
        Ok(())
    }

    /// Checks every dimension, including the agent networks.
    pub fn check_full(&self, want: &Manifest) -> Result<(), CheckpointError> {
        self.check_outer(want)?;
        for (name, got, expected) in [
            ("pi_len", self.pi_len, want.pi_len),
            ("v_len", self.v_len, want.v_len),
            ("q_len", self.q_len, want.q_len),
        ] {
            if got != expected {
                return Err(CheckpointError::Manifest(format!("{name}: checkpoint has {got}, run expects {expected}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub manifest: Manifest,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn of(tr: &Trainer) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            manifest: Manifest::of(tr),
            state: tr.state(),
        }
    }

    /// Writes via a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer(&mut f, self)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path)?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let format = v.get("format").and_then(|f| f.as_str()).unwrap_or("");
        if format != FORMAT {
            return Err(CheckpointError::Format(format.into()));
        }
        let version = v.get("version").and_then(|f| f.as_u64()).unwrap_or(0) as u32;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let ck: Checkpoint = serde_json::from_value(v)?;
        if ck.state.theta.len() != ck.manifest.theta_len
            || (ck.state.memory.rows(), ck.state.memory.cols()) != (ck.manifest.mem_rows, ck.manifest.mem_cols)
        {
            return Err(CheckpointError::Manifest("payload disagrees with its own manifest".into()));
        }
        Ok(ck)
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            theta: self.state.theta.clone(),
            memory: self.state.memory.clone(),
            hyper_state: self.state.hyper_state.clone(),
        }
    }

    /// Loads the outer parameters and memory into `tr` after checking shapes.
    pub fn warm_start_into(&self, tr: &mut Trainer) -> Result<(), CheckpointError> {
        self.manifest.check_outer(&Manifest::of(tr))?;
        tr.apply_warm_start(&self.warm_start())
            .map_err(|e| CheckpointError::Manifest(e.to_string()))
    }

    /// Restores the full trainer state after checking every shape.
    pub fn restore_into(&self, tr: &mut Trainer) -> Result<(), CheckpointError> {
        self.manifest.check_full(&Manifest::of(tr))?;
        tr.restore(&self.state).map_err(|e| CheckpointError::Manifest(e.to_string()))
    }
}
