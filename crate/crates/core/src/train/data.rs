use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::IMAGE_CHANNELS;

const RASTER_MAGIC: &[u8; 4] = b"LFQI";
const RASTER_VERSION: u32 = 1;

/// 8-bit image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn pixel_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

pub fn unit_to_pixel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * channels {
            return Err(Error::invalid(
                "raster",
                format!("{} pixels for {width}x{height}x{channels}", pixels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(20 + self.pixels.len());
        b.extend_from_slice(RASTER_MAGIC);
        for v in [RASTER_VERSION, self.width as u32, self.height as u32, self.channels as u32] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.pixels);
        b
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(path, bytes);
        r.magic(RASTER_MAGIC)?;
        let version = r.u32()?;
        if version != RASTER_VERSION {
            return Err(r.fail(format!("raster version {version} unsupported")));
        }
        let (w, h, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n = w
            .checked_mul(h)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| r.fail("dimensions overflow"))?;
        let pixels = r.take(n)?.to_vec();
        r.finish()?;
        Self::new(w, h, c, pixels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// `[C, H, W]` with values in `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = pixel_to_unit(self.pixels[(y * w + x) * c + ch]);
                }
            }
        }
        Tensor::new(&[c, h, w], data).expect("sized above")
    }

    /// Quantize a `[C, H, W]` tensor in `[-1, 1]` (values outside are
    /// clamped).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [c, h, w] = t.shape()[..] else {
            return Err(Error::invalid("raster", format!("expects [C,H,W], got {:?}", t.shape())));
        };
        let d = t.data();
        let mut pixels = vec![0u8; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    pixels[(y * w + x) * c + ch] = unit_to_pixel(d[(ch * h + y) * w + x]);
                }
            }
        }
        Self::new(w, h, c, pixels)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub class: usize,
}

/// Lines of `relative/path<TAB>class_id`; paths resolve against the
/// manifest's directory. Blank lines are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub image_size: usize,
    pub channels: usize,
}

impl DatasetManifest {
    pub fn read(path: &Path, image_size: usize) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "manifest is not UTF-8"))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((p, c)) = line.split_once('\t') else {
                return Err(Error::format(path, format!("line {}: expected path<TAB>class", i + 1)));
            };
            let class = c
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad class id {c:?}", i + 1)))?;
            records.push(ManifestRecord {
                path: base.join(p),
                class,
            });
        }
        Ok(Self {
            records,
            image_size,
            channels: IMAGE_CHANNELS,
        })
    }

    /// Write `rasters` next to `path` and a manifest listing them.
    pub fn write_with_images(path: &Path, items: &[(Raster, usize)]) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut text = String::new();
        for (i, (r, class)) in items.iter().enumerate() {
            let name = format!("img_{i:05}.lfqi");
            r.write(&base.join(&name))?;
            text.push_str(&format!("{name}\t{class}\n"));
        }
        write_atomic(path, text.as_bytes())
    }
}

/// All images of a manifest held in memory as `[3, H, W]` tensors.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub classes: Vec<usize>,
    pub image_size: usize,
}

pub fn load_dataset(manifest: &Path, image_size: usize) -> Result<Dataset> {
    let m = DatasetManifest::read(manifest, image_size)?;
    let mut images = Vec::with_capacity(m.records.len());
    let mut classes = Vec::with_capacity(m.records.len());
    for rec in &m.records {
        let r = Raster::read(&rec.path)?;
        if r.width != image_size || r.height != image_size || r.channels != m.channels {
            return Err(Error::format(
                &rec.path,
                format!(
                    "image is {}x{}x{}, dataset expects {image_size}x{image_size}x{}",
                    r.width, r.height, r.channels, m.channels
                ),
            ));
        }
        images.push(r.to_tensor());
        classes.push(rec.class);
    }
    Ok(Dataset {
        images,
        classes,
        image_size,
    })
}

/// Shuffled order of `0..n` for one epoch; a pure function of its inputs.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

/// Sample indices of training step `step`: consecutive slices of the
/// concatenated shuffled epochs.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let start = step as usize * batch;
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in start..start + batch {
        let epoch = (k / n) as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_order(n, seed, epoch)));
        }
        out.push(cached.as_ref().unwrap().1[k % n]);
    }
    out
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, usize)> {
        self.images.iter().zip(self.classes.iter().copied())
    }

    /// Stack the chosen images into `[B, 3, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        stack(indices.iter().map(|&i| &self.images[i]))
    }
}

/// Stack equally shaped tensors along a new leading axis.
pub fn stack<'a>(items: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut n = 0;
    for t in items {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: s.clone(),
                    rhs: t.shape().to_vec(),
                })
            }
            _ => {}
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let Some(mut s) = shape else {
        return Err(Error::invalid("stack", "nothing to stack"));
    };
    s.insert(0, n);
    Tensor::new(&s, data)
}
