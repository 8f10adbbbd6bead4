use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[n, res, res, c]` with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != s[2] {
            return Err(Error::Shape(format!("expected [n, res, res, c] images, got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn res(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Images at `idx` as one batch tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data).expect("gather shape")
    }

    /// Each image flattened to one row.
    pub fn flat_pixels(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.image_len()], self.images.data().to_vec()).expect("flat shape")
    }
}

/// Quadrant-template classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub res: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub classes: usize,
    pub n_per_class: usize,
    /// Per-pixel Gaussian noise.
    pub noise: f64,
    /// Intensity step between template levels.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}

fn default_contrast() -> f64 {
    0.1
}

impl SyntheticSpec {
    /// 4 classes at 16 px, matching the micro model.
    pub fn micro(noise: f64, n_per_class: usize, seed: u64) -> Self {
        SyntheticSpec { res: 16, channels: 3, classes: 4, n_per_class, noise, contrast: 0.1, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.res < 2 || !self.res.is_multiple_of(2) {
            return Err(Error::Config(format!("resolution must be even, got {}", self.res)));
        }
        if self.channels == 0 || self.n_per_class == 0 {
            return Err(Error::Config("channels and n_per_class must be positive".into()));
        }
        Ok(())
    }

    /// Quadrant levels (top-left, top-right, bottom-left, bottom-right) of
    /// every class. Classes take the nonzero base-L digit vectors in order of
    /// digit sum, so up to four classes each light one quadrant.
    pub fn templates(&self) -> Vec<[usize; 4]> {
        let mut levels = 2usize;
        while levels.pow(4) - 1 < self.classes {
            levels += 1;
        }
        let mut codes: Vec<[usize; 4]> =
            (1..levels.pow(4)).map(|v| std::array::from_fn(|j| (v / levels.pow(j as u32)) % levels)).collect();
        codes.sort_by_key(|c| c.iter().sum::<usize>());
        codes.truncate(self.classes);
        codes
    }

    /// Noise-free image of class `k`, `[res, res, c]` flattened.
    pub fn template_image(&self, k: usize) -> Vec<f64> {
        let code = self.templates()[k];
        let half = self.res / 2;
        let mut img = Vec::with_capacity(self.res * self.res * self.channels);
        for y in 0..self.res {
            for x in 0..self.res {
                let q = 2 * usize::from(y >= half) + usize::from(x >= half);
                let v = self.contrast * code[q] as f64;
                img.extend(std::iter::repeat_n(v, self.channels));
            }
        }
        img
    }
}

/// Template plus Gaussian noise. Samples are ordered class by class.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let n = spec.classes * spec.n_per_class;
    let per = spec.res * spec.res * spec.channels;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for k in 0..spec.classes {
        let t = spec.template_image(k);
        for _ in 0..spec.n_per_class {
            data.extend(t.iter().map(|&v| v + noise.sample(&mut rng)));
            labels.push(k);
        }
    }
    Dataset::new(Tensor::new(vec![n, spec.res, spec.res, spec.channels], data)?, labels, spec.classes)
}

/// Accuracy of assigning each image to the closest class template.
pub fn nearest_template_accuracy(spec: &SyntheticSpec, data: &Dataset) -> f64 {
    let templates: Vec<Vec<f64>> = (0..spec.classes).map(|k| spec.template_image(k)).collect();
    let correct = (0..data.len())
        .filter(|&i| {
            let img = data.image(i);
            let dist = |t: &Vec<f64>| t.iter().zip(img).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..templates.len())
                .min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b])).then(a.cmp(&b)))
                .unwrap();
            best == data.labels[i]
        })
        .count();
    correct as f64 / data.len() as f64
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parse IDX image bytes (u8, `[n, rows, cols]`) into `[n, rows, cols, 1]`
/// scaled to [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || be_u32(bytes, 0) != IDX_IMAGES {
        return Err(Error::Format("not an IDX u8 image file (magic 0x00000803)".into()));
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "IDX images: expected {} pixel bytes, found {}",
            n * rows * cols,
            body.len()
        )));
    }
    Tensor::new(vec![n, rows, cols, 1], body.iter().map(|&p| p as f64 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != IDX_LABELS {
        return Err(Error::Format("not an IDX u8 label file (magic 0x00000801)".into()));
    }
    let n = be_u32(bytes, 4) as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!("IDX labels: expected {n} bytes, found {}", body.len())));
    }
    Ok(body.iter().map(|&l| l as usize).collect())
}

/// Load an IDX image/label pair; the class count is `max label + 1`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let imgs = parse_idx_images(&read(images.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels.as_ref())?)?;
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(imgs, labels, classes)
}
