//! The four subcommands: train, sample, inpaint, eval. Each one locks its
//! output directory, writes a manifest sufficient to re-run it, and emits
//! CSV as the canonical data format with SVG previews on the side.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde_json::json;

use bridgevq_core::evaluation::{
    ar_conditional_nll, conditional_nll, fit_ar_baseline, positional_kl, PositionalHistograms,
};
use bridgevq_core::generation::{inpaint, sample, InpaintMask, SampleOptions};
use bridgevq_core::mat::Matrix;
use bridgevq_core::toy_domain::{generate, is_valid_sequence, decode_to_indices, ToySample};
use bridgevq_core::training::Trainer;

use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::config::{content_hash, parse_mask_spec, RunConfig};
use crate::log;
use crate::output::{
    chain_svg, write_dataset_csv, write_json, write_manifest, CsvWriter, LockGuard, Manifest,
};

// Stream separation constants for the per-purpose generators.
const DATA_STREAM: u64 = 0x9e3779b97f4a7c15;
const EXPORT_STREAM: u64 = 0xd1b54a32d192ed03;
const SELECT_STREAM: u64 = 0x2545f4914f6cdd1d;

/// Walk-validity of fresh sampler draws; the held-out probe that drives
/// best-snapshot selection during training.
fn sampler_validity(trainer: &Trainer, config: &RunConfig, draws: usize, seed: u64) -> f64 {
    let decoder = match config.build_decoder() {
        Ok(d) => d,
        Err(_) => return 0.0,
    };
    let opts = SampleOptions {
        record_stride: trainer.schedule.step_count().max(1),
        stochastic_reverse: config.sampling.stochastic_reverse,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut valid = 0usize;
    for _ in 0..draws {
        let rec = match sample(
            &trainer.schedule,
            &trainer.predictor,
            &trainer.codebook,
            &decoder,
            &opts,
            &mut rng,
        ) {
            Ok(r) => r,
            Err(_) => return 0.0,
        };
        if let Ok(q) = decode_to_indices(&trainer.codebook, rec.final_ze()) {
            valid += is_valid_sequence(&q, trainer.codebook.k()) as usize;
        }
    }
    valid as f64 / draws.max(1) as f64
}

struct BestSnapshot {
    validity: f64,
    step: u64,
    params: Vec<f64>,
    codebook: bridgevq_core::mat::Matrix,
    adam: bridgevq_core::training::Adam,
}

pub fn cmd_train(config_path: &Path, out: &Path, seed_override: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let mut config = RunConfig::from_toml(&text)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    let _lock = LockGuard::acquire(out)?;

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut data_rng = ChaCha12Rng::seed_from_u64(config.seed ^ DATA_STREAM);
    let mut export_rng = ChaCha12Rng::seed_from_u64(config.seed ^ EXPORT_STREAM);

    let schedule = config.build_schedule()?;
    let predictor = config.build_predictor(&schedule, &mut rng);
    let codebook = config.build_codebook(&mut rng)?;
    let decoder = config.build_decoder()?;
    let temperatures = config.build_temperatures()?;
    let toy = config.toy_config();

    let dataset = generate(&toy, config.data.export_count.max(1), &mut export_rng)?;
    let dataset_bytes = write_dataset_csv(&out.join("dataset.csv"), &dataset)?;
    let dataset_hash = content_hash(&dataset_bytes);

    write_manifest(
        out,
        &Manifest {
            command: "train",
            bin_version: env!("CARGO_PKG_VERSION"),
            format_version: FORMAT_VERSION,
            seed: config.seed,
            config_hash: content_hash(config.to_toml().as_bytes()),
            dataset_hash: Some(dataset_hash),
            overrides: json!({ "seed": seed_override }),
            config: &config,
        },
    )?;

    let mut trainer = Trainer::new(
        schedule,
        predictor,
        codebook,
        decoder,
        temperatures,
        config.train_config(),
    )?;

    let mut metrics = CsvWriter::create(
        out.join("metrics.csv"),
        "step,rec,diff,reg,total,wall_ms",
    )?;
    let started = Instant::now();
    let steps = config.training.step_count;
    let mut best: Option<BestSnapshot> = None;
    for step in 1..=steps {
        let batch = generate(&toy, config.training.batch_size, &mut data_rng)?;
        let terms = trainer
            .train_step(&batch, &mut rng)
            .with_context(|| format!("training step {step}"))?;
        if step == 1 || step % config.training.log_every.max(1) == 0 || step == steps {
            metrics.row(&[
                step.to_string(),
                terms.rec.to_string(),
                terms.diff.to_string(),
                terms.reg.to_string(),
                terms.total.to_string(),
                started.elapsed().as_millis().to_string(),
            ]);
            log::debug(&format!(
                "step {step}: rec {:.4} diff {:.4} reg {:.4}",
                terms.rec, terms.diff, terms.reg
            ));
        }
        if config.training.select_every > 0
            && (step % config.training.select_every == 0 || step == steps)
        {
            let probe_seed = config.seed ^ SELECT_STREAM ^ step;
            let validity =
                sampler_validity(&trainer, &config, config.training.select_draws, probe_seed);
            log::debug(&format!("step {step}: held-out validity {validity:.3}"));
            if best.as_ref().map_or(true, |b| validity > b.validity) {
                best = Some(BestSnapshot {
                    validity,
                    step,
                    params: trainer.predictor.params().to_vec(),
                    codebook: trainer.codebook.vectors().clone(),
                    adam: trainer.adam.clone(),
                });
            }
        }
        if config.training.checkpoint_every > 0
            && step % config.training.checkpoint_every == 0
            && step != steps
        {
            let ck = Checkpoint::from_trainer(&trainer, &config, rng.get_word_pos());
            ck.save(&out.join(format!("checkpoint_step_{step}.ckpt")))?;
        }
    }
    metrics.finish()?;
    if let Some(best) = best {
        log::info(&format!(
            "keeping the step-{} snapshot (held-out validity {:.3})",
            best.step, best.validity
        ));
        trainer.predictor.params_mut().copy_from_slice(&best.params);
        trainer.codebook.set_vectors(best.codebook)?;
        trainer.adam = best.adam;
        trainer.step = best.step;
    }
    let ck = Checkpoint::from_trainer(&trainer, &config, rng.get_word_pos());
    ck.save(&out.join("checkpoint_final.ckpt"))?;
    log::info(&format!(
        "trained {steps} steps in {:.1}s; artifacts in {}",
        started.elapsed().as_secs_f64(),
        out.display()
    ));
    Ok(())
}

fn load_for_inference(checkpoint: &Path) -> Result<(Checkpoint, SampleOptions)> {
    let ck = Checkpoint::load(checkpoint)?;
    let opts = SampleOptions {
        record_stride: ck.config.sampling.record_stride,
        stochastic_reverse: ck.config.sampling.stochastic_reverse,
    };
    Ok((ck, opts))
}

fn latent_header(positions: usize, dim: usize) -> String {
    let mut cols = Vec::new();
    for p in 0..positions {
        for i in 0..dim {
            cols.push(format!("ze{p}_{i}"));
        }
    }
    cols.join(",")
}

fn latent_fields(z: &Matrix) -> Vec<String> {
    let mut fields = Vec::with_capacity(z.len());
    for p in 0..z.cols() {
        for i in 0..z.rows() {
            fields.push(z.at(i, p).to_string());
        }
    }
    fields
}

pub fn cmd_sample(
    checkpoint: &Path,
    out: &Path,
    count: usize,
    stride_override: Option<usize>,
    seed_override: Option<u64>,
) -> Result<()> {
    let (ck, mut opts) = load_for_inference(checkpoint)?;
    if let Some(stride) = stride_override {
        opts.record_stride = stride;
    }
    let seed = seed_override.unwrap_or(ck.config.seed);
    let _lock = LockGuard::acquire(out)?;
    write_manifest(
        out,
        &Manifest {
            command: "sample",
            bin_version: env!("CARGO_PKG_VERSION"),
            format_version: FORMAT_VERSION,
            seed,
            config_hash: content_hash(ck.config.to_toml().as_bytes()),
            dataset_hash: None,
            overrides: json!({
                "count": count,
                "stride": stride_override,
                "seed": seed_override,
                "checkpoint": checkpoint.display().to_string(),
            }),
            config: &ck.config,
        },
    )?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let positions = ck.config.data.positions;
    let dim = ck.codebook.dim();
    let decoder = ck.config.build_decoder()?;
    let k = ck.codebook.k();

    let q_cols: Vec<String> = (0..positions).map(|p| format!("q{p}")).collect();
    let mut samples_csv = CsvWriter::create(
        out.join("samples.csv"),
        &format!("sample,{},valid,{}", q_cols.join(","), latent_header(positions, dim)),
    )?;
    let mut chains_csv = CsvWriter::create(
        out.join("chains.csv"),
        &format!("sample,t,{}", latent_header(positions, dim)),
    )?;

    let mut valid = 0usize;
    for idx in 0..count {
        let record = sample(&ck.schedule, &ck.predictor, &ck.codebook, &decoder, &opts, &mut rng)?;
        let decoded = decode_to_indices(&ck.codebook, record.final_ze())?;
        let ok = is_valid_sequence(&decoded, k);
        valid += ok as usize;

        let mut fields = vec![idx.to_string()];
        fields.extend(decoded.iter().map(|q| q.to_string()));
        fields.push((ok as u8).to_string());
        fields.extend(latent_fields(record.final_ze()));
        samples_csv.row(&fields);

        for (t, z) in &record.steps {
            let mut fields = vec![idx.to_string(), t.to_string()];
            fields.extend(latent_fields(z));
            chains_csv.row(&fields);
        }
        if idx < ck.config.sampling.svg_count {
            let svg = chain_svg(&record, &ck.codebook, &format!("chain {idx}"));
            fs::write(out.join(format!("chain_{idx}.svg")), svg)?;
        }
    }
    samples_csv.finish()?;
    chains_csv.finish()?;
    let rate = valid as f64 / count.max(1) as f64;
    write_json(
        &out.join("summary.json"),
        &json!({ "count": count, "valid": valid, "validity_rate": rate, "seed": seed }),
    )?;
    log::info(&format!("{count} samples, validity rate {rate:.3}"));
    Ok(())
}

pub fn cmd_inpaint(
    checkpoint: &Path,
    out: &Path,
    mask_override: Option<&str>,
    count: usize,
    seed_override: Option<u64>,
) -> Result<()> {
    let (ck, opts) = load_for_inference(checkpoint)?;
    let seed = seed_override.unwrap_or(ck.config.seed);
    let positions = ck.config.data.positions;
    let mask_spec = mask_override.unwrap_or(&ck.config.inpaint.mask).to_string();
    let known = parse_mask_spec(&mask_spec, positions)?;
    let pins = &ck.config.inpaint.pin_indices;
    if known.len() != pins.len() {
        bail!(
            "mask {:?} pins {} positions but inpaint.pin_indices lists {}",
            mask_spec,
            known.len(),
            pins.len()
        );
    }
    let dim = ck.codebook.dim();
    let known_values = Matrix::from_fn(dim, known.len(), |i, j| {
        ck.codebook.vectors().at(pins[j], i)
    });
    let mask = InpaintMask::new(known.clone(), known_values)?;

    let _lock = LockGuard::acquire(out)?;
    write_manifest(
        out,
        &Manifest {
            command: "inpaint",
            bin_version: env!("CARGO_PKG_VERSION"),
            format_version: FORMAT_VERSION,
            seed,
            config_hash: content_hash(ck.config.to_toml().as_bytes()),
            dataset_hash: None,
            overrides: json!({
                "count": count,
                "mask": mask_spec,
                "seed": seed_override,
                "checkpoint": checkpoint.display().to_string(),
            }),
            config: &ck.config,
        },
    )?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let decoder = ck.config.build_decoder()?;
    let k = ck.codebook.k();
    let q_cols: Vec<String> = (0..positions).map(|p| format!("q{p}")).collect();
    let mut csv = CsvWriter::create(
        out.join("conditional_samples.csv"),
        &format!(
            "sample,{},valid,pinned_match,{}",
            q_cols.join(","),
            latent_header(positions, dim)
        ),
    )?;

    let mut valid = 0usize;
    let mut pinned_ok = 0usize;
    for idx in 0..count {
        let record = inpaint(
            &ck.schedule,
            &ck.predictor,
            &ck.codebook,
            &decoder,
            &mask,
            &opts,
            &mut rng,
        )?;
        let decoded = decode_to_indices(&ck.codebook, record.final_ze())?;
        let ok = is_valid_sequence(&decoded, k);
        let pins_match = known
            .iter()
            .zip(pins)
            .all(|(&pos, &pin)| decoded[pos] == pin);
        valid += ok as usize;
        pinned_ok += (ok && pins_match) as usize;

        let mut fields = vec![idx.to_string()];
        fields.extend(decoded.iter().map(|q| q.to_string()));
        fields.push((ok as u8).to_string());
        fields.push((pins_match as u8).to_string());
        fields.extend(latent_fields(record.final_ze()));
        csv.row(&fields);
        if idx < ck.config.sampling.svg_count {
            let svg = chain_svg(&record, &ck.codebook, &format!("conditional chain {idx}"));
            fs::write(out.join(format!("conditional_chain_{idx}.svg")), svg)?;
        }
    }
    csv.finish()?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "count": count,
            "valid": valid,
            "valid_with_pins": pinned_ok,
            "mask": mask_spec,
            "pin_indices": pins,
            "seed": seed,
        }),
    )?;
    log::info(&format!(
        "{count} conditional samples, {valid} valid, {pinned_ok} valid with pinned endpoints"
    ));
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    out: &Path,
    data: Option<&Path>,
    metric_list: Option<&str>,
    seed_override: Option<u64>,
) -> Result<()> {
    let (ck, opts) = load_for_inference(checkpoint)?;
    let seed = seed_override.unwrap_or(ck.config.seed);
    let wanted: Vec<&str> = metric_list
        .unwrap_or("validity,kl,nll,recovery")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    for m in &wanted {
        if !["validity", "kl", "nll", "recovery"].contains(m) {
            bail!("unknown metric {m:?} (expected validity, kl, nll, recovery)");
        }
    }

    let _lock = LockGuard::acquire(out)?;
    let toy = ck.config.toy_config();
    let positions = ck.config.data.positions;
    let k = ck.codebook.k();
    let decoder = ck.config.build_decoder()?;

    let dataset: Vec<ToySample> = match data {
        Some(path) => crate::output::read_dataset_csv(path, positions, ck.codebook.dim())?,
        None => {
            let mut export_rng = ChaCha12Rng::seed_from_u64(ck.config.seed ^ EXPORT_STREAM);
            generate(&toy, ck.config.data.export_count.max(1), &mut export_rng)?
        }
    };

    write_manifest(
        out,
        &Manifest {
            command: "eval",
            bin_version: env!("CARGO_PKG_VERSION"),
            format_version: FORMAT_VERSION,
            seed,
            config_hash: content_hash(ck.config.to_toml().as_bytes()),
            dataset_hash: None,
            overrides: json!({
                "data": data.map(|p| p.display().to_string()),
                "metrics": wanted,
                "seed": seed_override,
                "checkpoint": checkpoint.display().to_string(),
            }),
            config: &ck.config,
        },
    )?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut results = serde_json::Map::new();
    let mut metrics_csv = CsvWriter::create(out.join("metrics.csv"), "metric,value")?;
    let push = |csv: &mut CsvWriter, results: &mut serde_json::Map<String, serde_json::Value>,
                    name: &str,
                    value: f64| {
        csv.row(&[name.to_string(), value.to_string()]);
        results.insert(name.to_string(), json!(value));
    };

    // model samples are shared by the validity and histogram metrics
    let mut decoded_model: Vec<Vec<usize>> = Vec::new();
    if wanted.contains(&"validity") || wanted.contains(&"kl") {
        let n = ck.config.eval.sample_count;
        log::info(&format!("drawing {n} unconditional samples"));
        for _ in 0..n {
            let record = sample(
                &ck.schedule,
                &ck.predictor,
                &ck.codebook,
                &decoder,
                &opts,
                &mut rng,
            )?;
            decoded_model.push(decode_to_indices(&ck.codebook, record.final_ze())?);
        }
    }

    if wanted.contains(&"validity") {
        let valid = decoded_model
            .iter()
            .filter(|q| is_valid_sequence(q, k))
            .count();
        push(
            &mut metrics_csv,
            &mut results,
            "validity_rate",
            valid as f64 / decoded_model.len().max(1) as f64,
        );
    }

    if wanted.contains(&"kl") {
        let truth = PositionalHistograms::from_sequences(
            dataset.iter().map(|s| s.q.as_slice()),
            positions,
            k,
        )?;
        let model = PositionalHistograms::from_sequences(
            decoded_model.iter().map(|q| q.as_slice()),
            positions,
            k,
        )?;
        let (per_position, mean) = positional_kl(&truth, &model)?;
        let mut kl_csv = CsvWriter::create(out.join("kl_positions.csv"), "position,kl")?;
        for (p, v) in per_position.iter().enumerate() {
            kl_csv.row(&[p.to_string(), v.to_string()]);
        }
        kl_csv.finish()?;
        push(&mut metrics_csv, &mut results, "kl_mean", mean);
    }

    if wanted.contains(&"nll") {
        let masked = ck.config.eval.nll_masked.clone();
        let subset: Vec<ToySample> = dataset
            .iter()
            .take(ck.config.eval.nll_sample_count)
            .cloned()
            .collect();
        log::info(&format!(
            "conditional likelihood over {} samples, {} draws each",
            subset.len(),
            ck.config.eval.mc_draws
        ));
        let model_nll = conditional_nll(
            &ck.schedule,
            &ck.predictor,
            &ck.codebook,
            &decoder,
            &masked,
            &subset,
            ck.config.eval.mc_draws,
            &opts,
            &mut rng,
        )?;
        push(&mut metrics_csv, &mut results, "conditional_nll", model_nll);

        let seqs: Vec<Vec<usize>> = dataset.iter().map(|s| s.q.clone()).collect();
        let baseline = fit_ar_baseline(&seqs, k, positions)?;
        let eval_seqs: Vec<Vec<usize>> = subset.iter().map(|s| s.q.clone()).collect();
        let ar_nll = ar_conditional_nll(&baseline, &masked, &eval_seqs)?;
        push(&mut metrics_csv, &mut results, "ar_conditional_nll", ar_nll);
    }

    if wanted.contains(&"recovery") {
        let truth = toy.centroid_codebook();
        let recovery = bridgevq_core::evaluation::codebook_recovery(&ck.codebook, &truth)?;
        push(&mut metrics_csv, &mut results, "codebook_recovery", recovery);
    }

    metrics_csv.finish()?;
    results.insert(
        "config_hash".to_string(),
        json!(content_hash(ck.config.to_toml().as_bytes())),
    );
    results.insert("seed".to_string(), json!(seed));
    write_json(&out.join("summary.json"), &serde_json::Value::Object(results))?;
    log::info(&format!("metrics written to {}", out.display()));
    Ok(())
}
