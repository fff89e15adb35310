//! Figure-style artifacts: image grids, latent traversals, histograms and
//! latent-code dumps.

use std::fmt::Write as _;
use std::path::Path;

use muvae_autodiff::{Real, Tensor};

use crate::data::{Dataset, IMAGE_SIDE, PIXELS};
use crate::error::{Error, Result};
use crate::model::{standard_normal, ClipConfig, LatentStats, Vae};
use crate::seed::{rng_for, Stream};

pub const HISTOGRAM_BINS: usize = 61;

/// `rows × cols` grayscale 28×28 tiles, stored as one image in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `(rows·28) × (cols·28)` pixels.
    pub pixels: Vec<f64>,
}

impl ImageGrid {
    /// Builds a grid from `rows·cols` tiles of 784 values each, clamping to `[0,1]`.
    pub fn from_tiles(rows: usize, cols: usize, tiles: &[f64]) -> Result<Self> {
        if rows == 0 || cols == 0 || tiles.len() != rows * cols * PIXELS {
            return Err(Error::Contract(format!(
                "{} tile values do not fill a {rows}x{cols} grid",
                tiles.len()
            )));
        }
        let w = cols * IMAGE_SIDE;
        let mut pixels = vec![0.0; rows * IMAGE_SIDE * w];
        for (t, tile) in tiles.chunks(PIXELS).enumerate() {
            let (r, c) = (t / cols, t % cols);
            for (p, &v) in tile.iter().enumerate() {
                let (y, x) = (p / IMAGE_SIDE, p % IMAGE_SIDE);
                pixels[(r * IMAGE_SIDE + y) * w + c * IMAGE_SIDE + x] = v.clamp(0.0, 1.0);
            }
        }
        Ok(ImageGrid { rows, cols, pixels })
    }

    pub fn width(&self) -> usize {
        self.cols * IMAGE_SIDE
    }

    pub fn height(&self) -> usize {
        self.rows * IMAGE_SIDE
    }

    pub fn tile_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Pixels of tile `(r, c)` in row-major order.
    pub fn tile(&self, r: usize, c: usize) -> Vec<f64> {
        let w = self.width();
        (0..PIXELS)
            .map(|p| self.pixels[(r * IMAGE_SIDE + p / IMAGE_SIDE) * w + c * IMAGE_SIDE + p % IMAGE_SIDE])
            .collect()
    }

    pub fn quantized(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    /// 8-bit grayscale PNG.
    pub fn to_png(&self) -> Vec<u8> {
        encode_png(self.width(), self.height(), png::ColorType::Grayscale, &self.quantized())
    }

    /// One line per pixel row, full-precision values.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.pixels.len() * 8);
        for row in self.pixels.chunks(self.width()) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>.png` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write(&dir.join(format!("{stem}.png")), self.to_png())?;
        write(&dir.join(format!("{stem}.csv")), self.to_csv())
    }
}

fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory PNG header");
        w.write_image_data(data).expect("in-memory PNG body");
    }
    out
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_f64<S: Real>(t: &Tensor<S>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64()).collect()
}

/// Row 0 holds `n` test images, row 1 their reconstructions from `z = mu`.
pub fn export_reconstructions<S: Real>(
    vae: &Vae<S>,
    clip: &ClipConfig,
    images: &Tensor<S>,
    n: usize,
) -> Result<ImageGrid> {
    let available = images.shape().first().copied().unwrap_or(0);
    if n == 0 || n > available {
        return Err(Error::Contract(format!("asked for {n} reconstructions from {available} images")));
    }
    let x = images.slice_rows(0, n)?;
    let stats = vae.encode_stats(&x, clip)?;
    let x_hat = vae.decode_values(&stats.mu)?;
    let mut tiles = to_f64(&x);
    tiles.extend(to_f64(&x_hat));
    ImageGrid::from_tiles(2, n, &tiles)
}

/// Decodes `rows·cols` draws of `z ~ N(0, σ² I)` from the prior stream of `seed`.
pub fn sample_prior<S: Real>(vae: &Vae<S>, sigma: f64, rows: usize, cols: usize, seed: u64) -> Result<ImageGrid> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Contract(format!("prior sigma must be positive, got {sigma}")));
    }
    let mut rng = rng_for(seed, Stream::Prior);
    let eps = standard_normal::<S>(&mut rng, &[rows * cols, vae.z_dim()]);
    let z = eps.map(|v| v * S::from_f64(sigma));
    ImageGrid::from_tiles(rows, cols, &to_f64(&vae.decode_values(&z)?))
}

/// Evenly spaced sweep values from `lo` to `hi` inclusive.
pub fn sweep(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::Contract(format!("traversal needs at least 2 steps, got {steps}")));
    }
    Ok((0..steps)
        .map(|j| lo + (hi - lo) * j as f64 / (steps - 1) as f64)
        .collect())
}

/// Row `d` sweeps latent dimension `d` over `[lo, hi]` with the others at 0.
pub fn latent_traversal<S: Real>(vae: &Vae<S>, lo: f64, hi: f64, steps: usize) -> Result<ImageGrid> {
    let values = sweep(lo, hi, steps)?;
    let d = vae.z_dim();
    let z = Tensor::from_fn([d * steps, d], |i| {
        let (row, dim) = (i / d, i % d);
        if dim == row / steps {
            S::from_f64(values[row % steps])
        } else {
            S::ZERO
        }
    });
    ImageGrid::from_tiles(d, steps, &to_f64(&vae.decode_values(&z)?))
}

/// Per-dimension histograms over one shared range, plus mean and std.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentHistograms {
    pub lo: f64,
    pub hi: f64,
    /// `counts[d][b]`.
    pub counts: Vec<Vec<u64>>,
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
}

impl LatentHistograms {
    pub fn from_codes(codes: &[f64], dims: usize) -> Result<Self> {
        if dims == 0 || codes.is_empty() || !codes.len().is_multiple_of(dims) {
            return Err(Error::Contract("histograms need a non-empty [N, D] code matrix".into()));
        }
        let n = codes.len() / dims;
        let (mut lo, mut hi) = codes
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        let mut counts = vec![vec![0u64; HISTOGRAM_BINS]; dims];
        let mut mean = vec![0.0; dims];
        for row in codes.chunks(dims) {
            for (d, &v) in row.iter().enumerate() {
                let b = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                counts[d][b] += 1;
                mean[d] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut std = vec![0.0; dims];
        for row in codes.chunks(dims) {
            for (d, &v) in row.iter().enumerate() {
                std[d] += (v - mean[d]).powi(2);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / n as f64).sqrt());
        Ok(LatentHistograms {
            lo,
            hi,
            counts,
            mean,
            std,
        })
    }

    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / HISTOGRAM_BINS as f64;
        (self.lo + w * b as f64, self.lo + w * (b + 1) as f64)
    }

    /// `dim,bin,lo,hi,count` rows.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("dim,bin,lo,hi,count\n");
        for (d, row) in self.counts.iter().enumerate() {
            for (b, c) in row.iter().enumerate() {
                let (lo, hi) = self.bin_edges(b);
                let _ = writeln!(out, "{d},{b},{lo},{hi},{c}");
            }
        }
        out
    }

    /// `dim,mean,std` rows.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("dim,mean,std\n");
        for (d, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            let _ = writeln!(out, "{d},{m},{s}");
        }
        out
    }
}

/// Histograms of `z = mu` (clipped where configured) over `images`.
pub fn latent_histograms<S: Real>(vae: &Vae<S>, clip: &ClipConfig, images: &Tensor<S>) -> Result<LatentHistograms> {
    let stats = vae.encode_stats(images, clip)?;
    LatentHistograms::from_codes(&to_f64(&stats.mu), vae.z_dim())
}

/// `z0,...,z{D-1},label` CSV text for `stats` and `labels`.
pub fn latent_codes_csv<S: Real>(stats: &LatentStats<S>, labels: &[u8]) -> Result<String> {
    let d = stats.z_dim();
    if stats.batch() != labels.len() {
        return Err(Error::Contract(format!("{} codes for {} labels", stats.batch(), labels.len())));
    }
    let header: Vec<String> = (0..d).map(|i| format!("z{i}")).collect();
    let mut out = format!("{},label\n", header.join(","));
    for (row, label) in stats.mu.data().chunks(d).zip(labels) {
        for v in row {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{label}");
    }
    Ok(out)
}

/// Latent-code CSV for a whole dataset with `z = mu`.
pub fn export_latent_codes<S: Real>(vae: &Vae<S>, clip: &ClipConfig, ds: &Dataset) -> Result<String> {
    let stats = vae.encode_stats(&ds.images::<S>(), clip)?;
    latent_codes_csv(&stats, ds.labels())
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

/// RGB scatter of 2-D codes coloured by label, axes fitted to the data.
pub fn scatter_png(codes: &[f64], labels: &[u8], size: usize) -> Result<Vec<u8>> {
    if codes.len() != 2 * labels.len() || labels.is_empty() {
        return Err(Error::Contract("scatter needs one 2-D code per label".into()));
    }
    let bounds = |axis: usize| {
        let (lo, hi) = codes
            .iter()
            .skip(axis)
            .step_by(2)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let pad = ((hi - lo) * 0.05).max(1e-6);
        (lo - pad, hi + pad)
    };
    let (bx, by) = (bounds(0), bounds(1));
    let mut img = vec![255u8; size * size * 3];
    for (p, &label) in codes.chunks(2).zip(labels) {
        let px = ((p[0] - bx.0) / (bx.1 - bx.0) * (size - 1) as f64) as i64;
        let py = ((by.1 - p[1]) / (by.1 - by.0) * (size - 1) as f64) as i64;
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1)] {
            let (x, y) = (px + dx, py + dy);
            if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                let o = (y as usize * size + x as usize) * 3;
                img[o..o + 3].copy_from_slice(&PALETTE[label as usize % 10]);
            }
        }
    }
    Ok(encode_png(size, size, png::ColorType::Rgb, &img))
}

/// What [`export_all`] draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExportSettings {
    pub clip: ClipConfig,
    pub prior_sigma: f64,
    pub traversal_range: f64,
    pub traversal_steps: usize,
    pub seed: u64,
    pub reconstructions: usize,
}

/// Writes every artifact for a trained model into `dir`.
pub fn export_all<S: Real>(vae: &Vae<S>, test: &Dataset, settings: &ExportSettings, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images = test.images::<S>();
    let n = settings.reconstructions.min(test.len());
    export_reconstructions(vae, &settings.clip, &images, n)?.save(dir, "reconstructions")?;
    sample_prior(vae, settings.prior_sigma, 8, 8, settings.seed)?.save(dir, "prior_samples")?;
    let r = settings.traversal_range;
    latent_traversal(vae, -r, r, settings.traversal_steps)?.save(dir, "traversal")?;
    let stats = vae.encode_stats(&images, &settings.clip)?;
    let hist = LatentHistograms::from_codes(&to_f64(&stats.mu), vae.z_dim())?;
    write(&dir.join("latent_histograms.csv"), hist.histogram_csv())?;
    write(&dir.join("latent_summary.csv"), hist.summary_csv())?;
    write(&dir.join("latent_codes.csv"), latent_codes_csv(&stats, test.labels())?)?;
    if vae.z_dim() == 2 {
        write(&dir.join("scatter.png"), scatter_png(&to_f64(&stats.mu), test.labels(), 512)?)?;
    }
    Ok(())
}
