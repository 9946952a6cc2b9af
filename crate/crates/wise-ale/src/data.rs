//! Dataset production: the sine-wave generator, an IDX-format image
//! loader/writer, a synthetic digit-glyph generator, and the binary cache
//! format for generated sine sets.
//!
//! Sine rows are `x[n] = A·sin(2π f t_n + φ) + ε_n` with `t_n = n/256` over
//! a one-second window and `ε_n ~ N(0, 0.05²)`; per-row draw order is
//! frequency, phase, amplitude, then the 256 noise values. Generation is
//! deterministic given the seed and the (A, f, φ) metadata is retained for
//! noise-free evaluation.

use crate::autodiff::DenseArray;
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::path::Path;

/// Samples per sine row (one second at 256 Hz).
pub const SINE_SAMPLES: usize = 256;

/// Standard deviation of the additive sine noise.
pub const SINE_NOISE_STD: f64 = 0.05;

/// Magic of the sine cache file.
pub const SINE_CACHE_MAGIC: &[u8; 8] = b"SINED001";

/// Per-row sine parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineMeta {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

/// Generated sine rows plus their generating parameters.
#[derive(Debug, Clone)]
pub struct SineDataset {
    pub data: DenseArray,
    pub meta: Vec<SineMeta>,
}

/// Noise-free wave for a metadata row.
pub fn sine_clean_row(meta: &SineMeta) -> Vec<f64> {
    (0..SINE_SAMPLES)
        .map(|n| {
            let t = n as f64 / SINE_SAMPLES as f64;
            meta.amplitude * (std::f64::consts::TAU * meta.frequency * t + meta.phase).sin()
        })
        .collect()
}

/// One row from explicit parameters and noise values; the override hook the
/// tests use to force e.g. zero amplitude or zero noise.
pub fn sine_row(meta: &SineMeta, noise: &[f64]) -> Vec<f64> {
    debug_assert_eq!(noise.len(), SINE_SAMPLES);
    sine_clean_row(meta)
        .iter()
        .zip(noise)
        .map(|(&c, &e)| c + e)
        .collect()
}

/// Generates `count` rows with f ~ U(0, 20 Hz), φ ~ U(0, 2π), A ~ U(0, 2).
pub fn generate_sine(count: usize, seed: u64) -> Result<SineDataset> {
    if count == 0 {
        return Err(Error::usage("sine dataset needs at least one row"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(count * SINE_SAMPLES);
    let mut meta = Vec::with_capacity(count);
    let mut noise = vec![0.0; SINE_SAMPLES];
    for _ in 0..count {
        let frequency = rng.gen_range(0.0..20.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amplitude = rng.gen_range(0.0..2.0);
        for e in noise.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *e = SINE_NOISE_STD * n;
        }
        let m = SineMeta {
            amplitude,
            frequency,
            phase,
        };
        data.extend_from_slice(&sine_row(&m, &noise));
        meta.push(m);
    }
    Ok(SineDataset {
        data: DenseArray::from_vec(vec![count, SINE_SAMPLES], data)?,
        meta,
    })
}

/// Writes the cache (`SINED001`, little-endian f64 rows) plus a CSV
/// metadata sidecar at `<path>.meta.csv`.
pub fn save_sine(ds: &SineDataset, path: &Path) -> Result<()> {
    let count = ds.meta.len();
    let mut buf = Vec::with_capacity(16 + ds.data.numel() * 8);
    buf.extend_from_slice(SINE_CACHE_MAGIC);
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    buf.extend_from_slice(&(SINE_SAMPLES as u64).to_le_bytes());
    for v in ds.data.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))?;

    let meta_path = sidecar_path(path);
    let mut csv = String::from("amplitude,frequency,phase\n");
    for m in &ds.meta {
        csv.push_str(&format!("{},{},{}\n", m.amplitude, m.frequency, m.phase));
    }
    std::fs::write(&meta_path, csv).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.csv");
    std::path::PathBuf::from(s)
}

/// Loads a cache written by [`save_sine`].
pub fn load_sine(path: &Path) -> Result<SineDataset> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(p.clone(), e))?;
    if bytes.len() < 24 {
        return Err(Error::format(&p, "file shorter than the header"));
    }
    if &bytes[..8] != SINE_CACHE_MAGIC {
        return Err(Error::format(
            &p,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(SINE_CACHE_MAGIC)
            ),
        ));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let width = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if width != SINE_SAMPLES {
        return Err(Error::format(&p, format!("unexpected row width {width}")));
    }
    let need = 24 + count * width * 8;
    if bytes.len() != need {
        return Err(Error::format(
            &p,
            format!("expected {} bytes, found {}", need, bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(count * width);
    for chunk in bytes[24..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }

    let meta_path = sidecar_path(path);
    let mp = meta_path.display().to_string();
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(mp.clone(), e))?;
    let mut meta = Vec::with_capacity(count);
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                &mp,
                format!("line {}: expected 3 fields, got {}", lineno + 1, fields.len()),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::format(&mp, format!("line {}: bad number {s:?}", lineno + 1)))
        };
        meta.push(SineMeta {
            amplitude: parse(fields[0])?,
            frequency: parse(fields[1])?,
            phase: parse(fields[2])?,
        });
    }
    if meta.len() != count {
        return Err(Error::format(
            &mp,
            format!("{} metadata rows for {} data rows", meta.len(), count),
        ));
    }
    Ok(SineDataset {
        data: DenseArray::from_vec(vec![count, SINE_SAMPLES], data)?,
        meta,
    })
}

/// Which half of an IDX image set to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

impl MnistSplit {
    fn file_names(&self) -> (&'static str, &'static str) {
        match self {
            MnistSplit::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            MnistSplit::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Images in [0, 1] (one 784-wide row per image) and their labels.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub images: DenseArray,
    pub labels: Vec<u8>,
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], off: usize, path: &str) -> Result<u32> {
    if off + 4 > bytes.len() {
        return Err(Error::format(
            path,
            format!("truncated at byte offset {off} (needed 4 more)"),
        ));
    }
    Ok(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()))
}

/// Parses the IDX pair for `split` from `dir`, scales pixels by 1/255 and
/// applies `x ≥ threshold → 1 else 0` when a threshold is given.
pub fn load_mnist_idx(
    dir: &Path,
    split: MnistSplit,
    binarize_threshold: Option<f64>,
) -> Result<ImageDataset> {
    if let Some(t) = binarize_threshold {
        if !(0.0 < t && t < 1.0) {
            return Err(Error::usage(format!(
                "binarize threshold must lie in (0, 1), got {t}"
            )));
        }
    }
    let (img_name, lbl_name) = split.file_names();
    let img_path = dir.join(img_name);
    let lbl_path = dir.join(lbl_name);
    let ip = img_path.display().to_string();
    let lp = lbl_path.display().to_string();
    let img_bytes = std::fs::read(&img_path).map_err(|e| Error::io(ip.clone(), e))?;
    let lbl_bytes = std::fs::read(&lbl_path).map_err(|e| Error::io(lp.clone(), e))?;

    let magic = read_be_u32(&img_bytes, 0, &ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            &ip,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let count = read_be_u32(&img_bytes, 4, &ip)? as usize;
    let rows = read_be_u32(&img_bytes, 8, &ip)? as usize;
    let cols = read_be_u32(&img_bytes, 12, &ip)? as usize;
    if rows != 28 || cols != 28 {
        return Err(Error::format(
            &ip,
            format!("expected 28×28 images, got {rows}×{cols}"),
        ));
    }
    let need = 16 + count * rows * cols;
    if img_bytes.len() < need {
        return Err(Error::format(
            &ip,
            format!("truncated at byte offset {} (needed {})", img_bytes.len(), need),
        ));
    }

    let lmagic = read_be_u32(&lbl_bytes, 0, &lp)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            &lp,
            format!("bad magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let lcount = read_be_u32(&lbl_bytes, 4, &lp)? as usize;
    if lcount != count {
        return Err(Error::format(
            &lp,
            format!("{lcount} labels for {count} images"),
        ));
    }
    if lbl_bytes.len() < 8 + count {
        return Err(Error::format(
            &lp,
            format!(
                "truncated at byte offset {} (needed {})",
                lbl_bytes.len(),
                8 + count
            ),
        ));
    }

    let mut data = Vec::with_capacity(count * 784);
    for &b in &img_bytes[16..16 + count * 784] {
        let v = b as f64 / 255.0;
        data.push(match binarize_threshold {
            Some(t) => {
                if v >= t {
                    1.0
                } else {
                    0.0
                }
            }
            None => v,
        });
    }
    let labels = lbl_bytes[8..8 + count].to_vec();
    Ok(ImageDataset {
        images: DenseArray::from_vec(vec![count, 784], data)?,
        labels,
    })
}

/// Writes an IDX pair for `split` into `dir`; pixel values are quantized to
/// bytes by rounding `v·255`.
pub fn write_mnist_idx(dir: &Path, split: MnistSplit, ds: &ImageDataset) -> Result<()> {
    let count = ds.labels.len();
    if ds.images.shape() != [count, 784] {
        return Err(Error::usage(format!(
            "images must be [{count}, 784], got {:?}",
            ds.images.shape()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let (img_name, lbl_name) = split.file_names();

    let mut img = Vec::with_capacity(16 + count * 784);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(count as u32).to_be_bytes());
    img.extend_from_slice(&28u32.to_be_bytes());
    img.extend_from_slice(&28u32.to_be_bytes());
    for &v in ds.images.data() {
        img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let img_path = dir.join(img_name);
    std::fs::write(&img_path, img).map_err(|e| Error::io(img_path.display().to_string(), e))?;

    let mut lbl = Vec::with_capacity(8 + count);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(count as u32).to_be_bytes());
    lbl.extend_from_slice(&ds.labels);
    let lbl_path = dir.join(lbl_name);
    std::fs::write(&lbl_path, lbl).map_err(|e| Error::io(lbl_path.display().to_string(), e))?;
    Ok(())
}

/// Deterministic 28×28 binary digit glyphs (seven-segment style with seeded
/// position/thickness jitter and a few flipped pixels). A locally generated
/// stand-in for runs when no real IDX image set is on disk.
pub fn generate_synthetic_digits(count: usize, seed: u64) -> Result<ImageDataset> {
    if count == 0 {
        return Err(Error::usage("digit dataset needs at least one image"));
    }
    // segments: 0 top, 1 top-left, 2 top-right, 3 middle, 4 bottom-left,
    // 5 bottom-right, 6 bottom
    const SEGMENTS: [&[usize]; 10] = [
        &[0, 1, 2, 4, 5, 6],
        &[2, 5],
        &[0, 2, 3, 4, 6],
        &[0, 2, 3, 5, 6],
        &[1, 2, 3, 5],
        &[0, 1, 3, 5, 6],
        &[0, 1, 3, 4, 5, 6],
        &[0, 2, 5],
        &[0, 1, 2, 3, 4, 5, 6],
        &[0, 1, 2, 3, 5, 6],
    ];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut data = vec![0.0; count * 784];
    let mut labels = Vec::with_capacity(count);
    for img in 0..count {
        let label = rng.gen_range(0..10u8);
        let x0 = 8 + rng.gen_range(-4i32..=4) as i64;
        let y0 = 4 + rng.gen_range(-3i32..=3) as i64;
        let t = rng.gen_range(2i64..=3);
        let (w, h) = (12i64, 20i64);
        let base = img * 784;
        let fill = |r0: i64, r1: i64, c0: i64, c1: i64, data: &mut [f64]| {
            for r in r0..r1 {
                for c in c0..c1 {
                    if (0..28).contains(&r) && (0..28).contains(&c) {
                        data[base + (r * 28 + c) as usize] = 1.0;
                    }
                }
            }
        };
        for &seg in SEGMENTS[label as usize] {
            match seg {
                0 => fill(y0, y0 + t, x0, x0 + w, &mut data),
                1 => fill(y0, y0 + h / 2, x0, x0 + t, &mut data),
                2 => fill(y0, y0 + h / 2, x0 + w - t, x0 + w, &mut data),
                3 => fill(y0 + h / 2 - t / 2 - 1, y0 + h / 2 + t / 2 + 1, x0, x0 + w, &mut data),
                4 => fill(y0 + h / 2, y0 + h, x0, x0 + t, &mut data),
                5 => fill(y0 + h / 2, y0 + h, x0 + w - t, x0 + w, &mut data),
                6 => fill(y0 + h - t, y0 + h, x0, x0 + w, &mut data),
                _ => unreachable!(),
            }
        }
        for _ in 0..5 {
            let px = rng.gen_range(0..784);
            data[base + px] = 1.0 - data[base + px];
        }
        labels.push(label);
    }
    Ok(ImageDataset {
        images: DenseArray::from_vec(vec![count, 784], data)?,
        labels,
    })
}
