//! Checkpoint format: one magic line, one JSON header line, then the
//! numeric payload as little-endian 64-bit floats in a fixed field order
//! (delta, z_star, codebook, network parameters, both optimizer moment
//! vectors). Loading a checkpoint reproduces every parameter bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use bridgevq_core::mat::Matrix;
use bridgevq_core::noise_model::{NetArch, NoisePredictor};
use bridgevq_core::ou_bridge::DiffusionSchedule;
use bridgevq_core::quantizer::Codebook;
use bridgevq_core::training::{Adam, Trainer};

use crate::config::RunConfig;

pub const MAGIC: &str = "bridgevq-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchDescriptor {
    input_channels: usize,
    positions: usize,
    hidden_units: usize,
    time_channels: usize,
    max_step: usize,
    input_scale: Vec<f64>,
    lift_freqs: Vec<f64>,
}

impl From<&NetArch> for ArchDescriptor {
    fn from(a: &NetArch) -> Self {
        ArchDescriptor {
            input_channels: a.input_channels,
            positions: a.positions,
            hidden_units: a.hidden_units,
            time_channels: a.time_channels,
            max_step: a.max_step,
            input_scale: a.input_scale.clone(),
            lift_freqs: a.lift_freqs.clone(),
        }
    }
}

impl From<&ArchDescriptor> for NetArch {
    fn from(a: &ArchDescriptor) -> Self {
        NetArch {
            input_channels: a.input_channels,
            positions: a.positions,
            hidden_units: a.hidden_units,
            time_channels: a.time_channels,
            max_step: a.max_step,
            input_scale: a.input_scale.clone(),
            lift_freqs: a.lift_freqs.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: RunConfig,
    arch: ArchDescriptor,
    k: usize,
    dim: usize,
    positions: usize,
    steps: usize,
    trainable_len: usize,
    adam_steps: u64,
    train_step: u64,
    seed: u64,
    rng_word_pos: [u64; 2],
    payload_len: usize,
}

/// Everything needed to continue or use a run.
pub struct Checkpoint {
    pub config: RunConfig,
    pub schedule: DiffusionSchedule,
    pub codebook: Codebook,
    pub predictor: NoisePredictor,
    pub adam: Adam,
    pub train_step: u64,
    pub seed: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config: &RunConfig, rng_word_pos: u128) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            schedule: trainer.schedule.clone(),
            codebook: trainer.codebook.clone(),
            predictor: trainer.predictor.clone(),
            adam: trainer.adam.clone(),
            train_step: trainer.step,
            seed: config.seed,
            rng_word_pos,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let delta: Vec<f64> = (1..=self.schedule.step_count())
            .map(|t| self.schedule.delta(t))
            .collect();
        let z_star = self.schedule.z_star();
        let payload_len = delta.len()
            + z_star.len()
            + self.codebook.vectors().len()
            + self.predictor.param_count()
            + 2 * self.adam.m.len();
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            arch: self.predictor.arch().into(),
            k: self.codebook.k(),
            dim: self.codebook.dim(),
            positions: z_star.cols(),
            steps: self.schedule.step_count(),
            trainable_len: self.adam.m.len(),
            adam_steps: self.adam.steps,
            train_step: self.train_step,
            seed: self.seed,
            rng_word_pos: [
                (self.rng_word_pos >> 64) as u64,
                self.rng_word_pos as u64,
            ],
            payload_len,
        };

        let mut buf = Vec::new();
        writeln!(buf, "{MAGIC} v{FORMAT_VERSION}")?;
        serde_json::to_writer(&mut buf, &header)?;
        buf.push(b'\n');
        let write_f64s = |values: &[f64], buf: &mut Vec<u8>| {
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        write_f64s(&delta, &mut buf);
        write_f64s(z_star.data(), &mut buf);
        write_f64s(self.codebook.vectors().data(), &mut buf);
        write_f64s(self.predictor.params(), &mut buf);
        write_f64s(&self.adam.m, &mut buf);
        write_f64s(&self.adam.v, &mut buf);

        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &buf).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file =
            fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;

        let magic_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .context("truncated checkpoint: no magic line")?;
        let magic = std::str::from_utf8(&bytes[..magic_end]).context("bad magic line")?;
        let expected = format!("{MAGIC} v{FORMAT_VERSION}");
        if magic != expected {
            bail!(
                "checkpoint format mismatch: file says {magic:?}, this build reads {expected:?}"
            );
        }
        let rest = &bytes[magic_end + 1..];
        let header_end = rest
            .iter()
            .position(|&b| b == b'\n')
            .context("truncated checkpoint: no header line")?;
        let header: Header =
            serde_json::from_slice(&rest[..header_end]).context("bad checkpoint header")?;
        if header.format_version != FORMAT_VERSION {
            bail!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            );
        }

        let payload = &rest[header_end + 1..];
        if payload.len() != header.payload_len * 8 {
            bail!(
                "payload holds {} bytes but the header promises {}",
                payload.len(),
                header.payload_len * 8
            );
        }
        let mut floats = Vec::with_capacity(header.payload_len);
        for chunk in payload.chunks_exact(8) {
            floats.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }

        let mut cursor = 0usize;
        let mut take = |len: usize| -> Result<Vec<f64>> {
            if cursor + len > floats.len() {
                bail!("payload too short");
            }
            let out = floats[cursor..cursor + len].to_vec();
            cursor += len;
            Ok(out)
        };

        let delta = take(header.steps)?;
        let z_star = Matrix::from_vec(
            header.dim,
            header.positions,
            take(header.dim * header.positions)?,
        )
        .map_err(anyhow::Error::from)?;
        let codebook_vals =
            Matrix::from_vec(header.k, header.dim, take(header.k * header.dim)?)
                .map_err(anyhow::Error::from)?;
        let arch: NetArch = (&header.arch).into();
        let net_params = take(arch.param_count())?;
        let adam_m = take(header.trainable_len)?;
        let adam_v = take(header.trainable_len)?;
        if cursor != floats.len() {
            bail!("payload has {} unread values", floats.len() - cursor);
        }

        let schedule = DiffusionSchedule::new(
            delta,
            header.config.schedule.theta,
            header.config.schedule.eta,
            z_star,
        )?;
        let codebook = Codebook::new(codebook_vals, header.config.codebook.trainable)?;
        let predictor = NoisePredictor::from_params(arch, net_params)?;
        let train_cfg = header.config.train_config();
        let mut adam = Adam::new(
            header.trainable_len,
            train_cfg.learning_rate,
            train_cfg.adam_beta1,
            train_cfg.adam_beta2,
            train_cfg.adam_eps,
        );
        adam.m = adam_m;
        adam.v = adam_v;
        adam.steps = header.adam_steps;

        Ok(Checkpoint {
            config: header.config,
            schedule,
            codebook,
            predictor,
            adam,
            train_step: header.train_step,
            seed: header.seed,
            rng_word_pos: ((header.rng_word_pos[0] as u128) << 64)
                | header.rng_word_pos[1] as u128,
        })
    }
}
