//! Output-directory plumbing: lock file, manifest, CSV schemas and the
//! self-contained SVG scatter plots.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use bridgevq_core::generation::ChainRecord;
use bridgevq_core::mat::Matrix;
use bridgevq_core::quantizer::Codebook;
use bridgevq_core::toy_domain::ToySample;

use crate::config::RunConfig;

/// Exclusive marker preventing two commands from sharing an output
/// directory; removed when the command finishes.
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(dir: &Path) -> Result<LockGuard> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let path = dir.join("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "output directory {} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).context("creating lock file"),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub bin_version: &'a str,
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    pub overrides: serde_json::Value,
    pub config: &'a RunConfig,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Dataset rows: discrete indices then position-major latent coordinates.
pub fn dataset_header(positions: usize, dim: usize) -> String {
    let mut cols: Vec<String> = (0..positions).map(|p| format!("q{p}")).collect();
    for p in 0..positions {
        for i in 0..dim {
            cols.push(format!("x{p}_{i}"));
        }
    }
    cols.join(",")
}

pub fn write_dataset_csv(path: &Path, samples: &[ToySample]) -> Result<Vec<u8>> {
    let (dim, positions) = samples
        .first()
        .map(|s| s.x.shape())
        .context("empty dataset")?;
    let mut out = String::new();
    out.push_str(&dataset_header(positions, dim));
    out.push('\n');
    for s in samples {
        let mut fields: Vec<String> = s.q.iter().map(|q| q.to_string()).collect();
        for p in 0..positions {
            for i in 0..dim {
                fields.push(s.x.at(i, p).to_string());
            }
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let bytes = out.into_bytes();
    fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn read_dataset_csv(path: &Path, positions: usize, dim: usize) -> Result<Vec<ToySample>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty dataset file")?;
    if header != dataset_header(positions, dim) {
        bail!("dataset header does not match the expected schema");
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != positions + positions * dim {
            bail!("line {}: wrong field count", lineno + 2);
        }
        let q: Vec<usize> = fields[..positions]
            .iter()
            .map(|f| f.parse().map_err(anyhow::Error::from))
            .collect::<Result<_>>()?;
        let mut x = Matrix::zeros(dim, positions);
        for p in 0..positions {
            for i in 0..dim {
                let v: f64 = fields[positions + p * dim + i].parse()?;
                x.set(i, p, v);
            }
        }
        samples.push(ToySample { q, x });
    }
    Ok(samples)
}

/// Incremental CSV writer with a fixed header.
pub struct CsvWriter {
    path: PathBuf,
    buf: String,
}

impl CsvWriter {
    pub fn create(path: PathBuf, header: &str) -> Result<CsvWriter> {
        Ok(CsvWriter {
            path,
            buf: format!("{header}\n"),
        })
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self) -> Result<()> {
        fs::write(&self.path, self.buf.as_bytes())
            .with_context(|| format!("writing {}", self.path.display()))?;
        Ok(())
    }
}

fn svg_point(v: f64, half_extent: f64, size: f64) -> f64 {
    (v / half_extent * 0.5 + 0.5) * size
}

/// Scatter plot of one denoising chain over the embedding plane: embeddings
/// as outlined circles, snapshots fading in as t decreases, and the final
/// latent joined position to position.
pub fn chain_svg(record: &ChainRecord, cb: &Codebook, title: &str) -> String {
    let size = 480.0;
    let extent = 1.8_f64;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n"
    ));
    s.push_str(&format!(
        "<rect width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n<text x=\"8\" y=\"16\" \
         font-size=\"12\" font-family=\"monospace\">{title}</text>\n"
    ));
    for k in 0..cb.k() {
        let e = cb.vector(k);
        let (cx, cy) = (
            svg_point(e[0], extent, size),
            svg_point(-e[1], extent, size),
        );
        s.push_str(&format!(
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"7\" fill=\"none\" stroke=\"#888\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" font-family=\"monospace\" \
             fill=\"#555\">{k}</text>\n",
            cx + 9.0,
            cy + 3.0
        ));
    }
    let t_max = record.steps.first().map(|(t, _)| *t).unwrap_or(0).max(1);
    for (t, z) in &record.steps {
        let progress = 1.0 - *t as f64 / t_max as f64;
        let opacity = 0.15 + 0.85 * progress;
        for n in 0..z.cols() {
            let (cx, cy) = (
                svg_point(z.at(0, n), extent, size),
                svg_point(-z.at(1, n), extent, size),
            );
            s.push_str(&format!(
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"#1f6fb2\" \
                 fill-opacity=\"{opacity:.3}\"/>\n"
            ));
        }
    }
    if let Some((_, z)) = record.steps.last() {
        let pts: Vec<String> = (0..z.cols())
            .map(|n| {
                format!(
                    "{:.2},{:.2}",
                    svg_point(z.at(0, n), extent, size),
                    svg_point(-z.at(1, n), extent, size)
                )
            })
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#d14\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
    }
    s.push_str("</svg>\n");
    s
}
