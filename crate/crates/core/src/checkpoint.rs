//! Prompt-bank checkpoints: a JSON manifest plus one float32 blob per token
//! matrix, and optionally the optimizer state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{read_f32, read_json, word_count, write_f32, write_json};
use crate::error::{Error, Result};
use crate::prompt::{
    BaseContext, ClassTokenSet, DomainPrompt, EncoderShape, Owner, PromptBank, SharedPromptSet, TokenMatrix,
};
use crate::training::OptimizerState;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub d: usize,
    pub d_tok: usize,
    pub d_hid: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N_sources")]
    pub n_sources: usize,
    #[serde(rename = "M1")]
    pub m1: usize,
    #[serde(rename = "M2")]
    pub m2: usize,
    pub encoder_seed: u64,
}

impl CheckpointManifest {
    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            seed: self.encoder_seed,
            d_tok: self.d_tok,
            d_hid: self.d_hid,
            d_out: self.d,
        }
    }

    /// Fails unless the checkpoint was written for `shape`.
    pub fn check_encoder(&self, shape: EncoderShape) -> Result<()> {
        if self.encoder_shape() != shape {
            return Err(Error::SchemaMismatch(format!(
                "checkpoint encoder {:?} differs from expected {:?}",
                self.encoder_shape(),
                shape
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    step: usize,
    total_steps: usize,
    epochs_done: usize,
    blocks: usize,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub bank: PromptBank,
    pub optimizer: Option<OptimizerState>,
}

fn source_file(i: usize) -> String {
    format!("source_{i}.f32")
}

pub fn save_checkpoint(
    dir: &Path,
    bank: &PromptBank,
    opt: Option<&OptimizerState>,
    encoder: EncoderShape,
) -> Result<()> {
    bank.validate()?;
    if encoder.d_tok != bank.d_tok() {
        return Err(Error::DimensionMismatch {
            expected: bank.d_tok(),
            found: encoder.d_tok,
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        d: encoder.d_out,
        d_tok: encoder.d_tok,
        d_hid: encoder.d_hid,
        k: bank.num_classes(),
        n_sources: bank.num_sources(),
        m1: bank.m1(),
        m2: bank.m2(),
        encoder_seed: encoder.seed,
    };
    write_f32(&dir.join("shared.f32"), bank.shared.tokens().data())?;
    for (i, s) in bank.sources.iter().enumerate() {
        write_f32(&dir.join(source_file(i)), s.tokens.data())?;
    }
    write_f32(&dir.join("target.f32"), bank.target.tokens.data())?;
    write_f32(&dir.join("classes.f32"), bank.classes.0.data())?;
    write_f32(&dir.join("base.f32"), bank.base.0.data())?;
    if let Some(opt) = opt {
        opt.check_shapes(bank)?;
        for (b, buf) in opt.buffers.iter().enumerate() {
            write_f32(&dir.join(format!("momentum_{b}.f32")), buf)?;
        }
        let meta = OptimizerMeta {
            step: opt.step,
            total_steps: opt.total_steps,
            epochs_done: opt.epochs_done,
            blocks: opt.buffers.len(),
        };
        write_json(&dir.join("optimizer.json"), &meta)?;
    }
    // Written last so a partial directory never looks complete.
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::SchemaMismatch(format!(
            "unsupported checkpoint schema version {}",
            manifest.schema_version
        )));
    }
    let CheckpointManifest {
        d_tok, k, n_sources, m1, m2, ..
    } = manifest;
    if d_tok == 0 || k == 0 || n_sources == 0 || m1 == 0 || m2 == 0 || manifest.d == 0 {
        return Err(Error::SchemaMismatch("manifest has a zero dimension".into()));
    }
    let matrix = |name: &str, rows: usize| -> Result<TokenMatrix> {
        TokenMatrix::from_data(rows, d_tok, read_f32(&dir.join(name), rows * d_tok)?)
    };
    let shared = SharedPromptSet::new(m1, matrix("shared.f32", k * m1)?)?;
    let sources = (0..n_sources)
        .map(|i| {
            Ok(DomainPrompt {
                owner: Owner::Source(i),
                tokens: matrix(&source_file(i), m2)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let target = DomainPrompt {
        owner: Owner::Target,
        tokens: matrix("target.f32", m2)?,
    };
    let classes = ClassTokenSet(matrix("classes.f32", k)?);
    let base_path = dir.join("base.f32");
    let base_words = word_count(&base_path)?;
    if base_words == 0 || base_words % d_tok != 0 {
        return Err(Error::SchemaMismatch(format!(
            "base.f32 holds {base_words} values, not a positive multiple of d_tok = {d_tok}"
        )));
    }
    let base = BaseContext(matrix("base.f32", base_words / d_tok)?);
    let bank = PromptBank {
        shared,
        sources,
        target,
        classes,
        base,
    };
    bank.validate()?;

    let opt_path = dir.join("optimizer.json");
    let optimizer = if opt_path.exists() {
        let meta: OptimizerMeta = read_json(&opt_path)?;
        let sizes: Vec<usize> = bank.learnable_blocks().iter().map(|b| b.len()).collect();
        if meta.blocks != sizes.len() {
            return Err(Error::SchemaMismatch(format!(
                "optimizer has {} blocks, bank has {}",
                meta.blocks,
                sizes.len()
            )));
        }
        let buffers = sizes
            .iter()
            .enumerate()
            .map(|(b, &len)| read_f32(&dir.join(format!("momentum_{b}.f32")), len))
            .collect::<Result<Vec<_>>>()?;
        Some(OptimizerState {
            buffers,
            step: meta.step,
            total_steps: meta.total_steps,
            epochs_done: meta.epochs_done,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        manifest,
        bank,
        optimizer,
    })
}
