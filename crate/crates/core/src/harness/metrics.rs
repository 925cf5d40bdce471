use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::codec::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One JSONL metrics line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: u64,
    pub loss: f64,
    /// Milliseconds since this process started training.
    pub wall_ms: f64,
    pub grad_norm: f64,
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Append-only metrics stream, flushed after every record.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Start a fresh stream, or continue one after `resume_step`, dropping
    /// any records written past it by an interrupted run.
    pub fn open(path: &Path, resume_step: Option<u64>) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let io = |e| Error::io(path, e);
        match resume_step {
            Some(step) if path.exists() => {
                // Keep surviving lines byte for byte.
                let text = fs::read_to_string(path).map_err(io)?;
                let mut kept = String::new();
                for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let r: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        msg: format!("line {}: {e}", i + 1),
                    })?;
                    if r.step <= step {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
                write_atomic(path, kept.as_bytes())?;
            }
            _ => {
                File::create(path).map_err(io)?;
            }
        }
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, r: &Record) -> Result<()> {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn loss_csv(records: &[Record]) -> String {
    let mut s = String::from("step,loss\n");
    for r in records {
        s.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    s
}

/// Binary greyscale PGM (P5) from row-major `[0, 1]` pixel values.
pub fn pgm(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Loss against step on a white canvas, log-scaled when every loss is
/// positive.
pub fn loss_curve_pgm(records: &[Record], width: usize, height: usize) -> Vec<u8> {
    let mut px = vec![1.0; width * height];
    let positive = records.iter().all(|r| r.loss > 0.0);
    let y: Vec<f64> = records
        .iter()
        .map(|r| if positive { r.loss.ln() } else { r.loss })
        .collect();
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let n = records.len();
    for (i, &v) in y.iter().enumerate() {
        let col = if n > 1 { i * (width - 1) / (n - 1) } else { 0 };
        let frac = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let row = ((1.0 - frac) * (height - 1) as f64).round() as usize;
        px[row * width + col] = 0.0;
    }
    pgm(width, height, &px)
}

/// Channel 0 of `(N, h, w, d)` latents as a grid with `cols` tiles per row,
/// each pixel repeated `scale` times and tiles separated by one-pixel grey
/// borders. Values are scaled by the grid's min and max.
pub fn latent_grid_pgm(latents: &Tensor, cols: usize, scale: usize) -> Result<Vec<u8>> {
    let s = latents.shape();
    if s.len() != 4 || cols == 0 || scale == 0 {
        return Err(Error::config(format!("cannot tile latents of shape {s:?}")));
    }
    let (n, h, w, d) = (s[0], s[1], s[2], s[3]);
    let rows = n.div_ceil(cols).max(1);
    let (th, tw) = (h * scale + 1, w * scale + 1);
    let (height, width) = (rows * th + 1, cols * tw + 1);
    let data = latents.data();
    let ch0 = |i: usize, y: usize, x: usize| data[((i * h + y) * w + x) * d] as f64;
    let (lo, hi) = (0..n * h * w)
        .map(|k| data[k * d] as f64)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut px = vec![0.5; width * height];
    for i in 0..n {
        let (r0, c0) = ((i / cols) * th + 1, (i % cols) * tw + 1);
        for y in 0..h * scale {
            for x in 0..w * scale {
                let v = ch0(i, y / scale, x / scale);
                px[(r0 + y) * width + c0 + x] = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            }
        }
    }
    Ok(pgm(width, height, &px))
}
