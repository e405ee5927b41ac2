//! Synthetic segmentation corpus, its on-disk layout, splits and batching.
//!
//! Layout: `dir/manifest.json`, `dir/samples/<id>.img` (SSEG) and
//! `dir/samples/<id>.msk` (SMSK) for every sample that carries a mask.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, SsegDims};
use crate::rng::{stream_id, StreamKey};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `(1,H,W)` intensities in `[0,1]`.
    pub image: Tensor,
    /// `(H,W)` class indices; present iff `labeled`.
    pub mask: Option<Vec<u8>>,
    pub labeled: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub train_labeled: Vec<String>,
    pub train_unlabeled: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train_labeled.iter().chain(&self.train_unlabeled).chain(&self.test)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in self.all_ids() {
            if !seen.insert(id) {
                return Err(Error::Config(format!("sample `{id}` appears in more than one partition")));
            }
        }
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("image size {}x{} not divisible by 4", self.height, self.width)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    samples: BTreeMap<String, SampleRecord>,
}

impl Dataset {
    /// Combines generated samples with a split. Unlabeled training samples
    /// lose their masks; test samples keep theirs.
    pub fn assemble(samples: Vec<SampleRecord>, manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        let mut by_id: BTreeMap<String, SampleRecord> = samples.into_iter().map(|s| (s.id.clone(), s)).collect();
        let mut kept = BTreeMap::new();
        for (ids, has_mask) in
            [(&manifest.train_labeled, true), (&manifest.train_unlabeled, false), (&manifest.test, true)]
        {
            for id in ids {
                let mut s = by_id
                    .remove(id)
                    .ok_or_else(|| Error::Config(format!("manifest references unknown sample `{id}`")))?;
                if has_mask && s.mask.is_none() {
                    return Err(Error::Config(format!("sample `{id}` needs a mask")));
                }
                if !has_mask {
                    s.mask = None;
                }
                s.labeled = has_mask;
                kept.insert(id.clone(), s);
            }
        }
        let ds = Self { manifest, samples: kept };
        ds.check_samples()?;
        Ok(ds)
    }

    fn check_samples(&self) -> Result<()> {
        let (h, w) = (self.manifest.height, self.manifest.width);
        for s in self.samples.values() {
            if s.image.shape() != [1, h, w] {
                return Err(Error::Config(format!("sample `{}` has shape {:?}", s.id, s.image.shape())));
            }
            if let Some(m) = &s.mask {
                if m.len() != h * w || m.iter().any(|&c| c as usize >= self.manifest.num_classes) {
                    return Err(Error::Config(format!("sample `{}` has an invalid mask", s.id)));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.get(id)
    }

    pub fn sample(&self, id: &str) -> Result<&SampleRecord> {
        self.get(id).ok_or_else(|| Error::Config(format!("unknown sample `{id}`")))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.values()
    }

    pub fn labeled(&self) -> impl Iterator<Item = &SampleRecord> {
        self.manifest.train_labeled.iter().map(|id| &self.samples[id])
    }

    pub fn test(&self) -> impl Iterator<Item = &SampleRecord> {
        self.manifest.test.iter().map(|id| &self.samples[id])
    }

    /// Copy of this dataset with a different partition of the same ids.
    pub fn with_manifest(&self, manifest: Manifest) -> Result<Self> {
        let samples = self.samples.values().cloned().collect();
        Dataset::assemble(samples, manifest)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let sdir = dir.join("samples");
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        let (h, w) = (self.manifest.height as u32, self.manifest.width as u32);
        for s in self.samples.values() {
            let mut img = Vec::new();
            format::encode_sseg(SsegDims { h, w, c: 1 }, s.image.data(), &mut img);
            format::write_file(&sdir.join(format!("{}.img", s.id)), &img)?;
            if let Some(m) = &s.mask {
                format::write_file(&sdir.join(format!("{}.msk", s.id)), &format::encode_smsk(h, w, m))?;
            }
        }
        let mut json = serde_json::to_vec_pretty(&self.manifest)?;
        json.push(b'\n');
        format::write_file(&dir.join("manifest.json"), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let manifest: Manifest =
            serde_json::from_slice(&format::read_file(&mpath)?).map_err(|e| Error::data(&mpath, e.to_string()))?;
        manifest.validate().map_err(|e| Error::data(&mpath, e.to_string()))?;
        let (h, w) = (manifest.height, manifest.width);
        let sdir = dir.join("samples");
        let mut samples = Vec::new();
        for (ids, has_mask) in
            [(&manifest.train_labeled, true), (&manifest.train_unlabeled, false), (&manifest.test, true)]
        {
            for id in ids {
                let ipath = sample_path(&sdir, id, "img");
                let bytes = read_sample(&ipath, id)?;
                let (dims, values, used) = format::decode_sseg(&bytes, &ipath).map_err(|e| tag(e, id))?;
                if used != bytes.len() {
                    return Err(Error::data(&ipath, format!("sample `{id}`: trailing bytes")));
                }
                if (dims.h as usize, dims.w as usize, dims.c) != (h, w, 1) {
                    return Err(Error::data(
                        &ipath,
                        format!(
                            "sample `{id}`: header {}x{}x{} disagrees with manifest {h}x{w}x1",
                            dims.h, dims.w, dims.c
                        ),
                    ));
                }
                let mask = if has_mask {
                    let kpath = sample_path(&sdir, id, "msk");
                    let kb = read_sample(&kpath, id)?;
                    let (mh, mw, m) = format::decode_smsk(&kb, &kpath).map_err(|e| tag(e, id))?;
                    if (mh as usize, mw as usize) != (h, w) {
                        return Err(Error::data(&kpath, format!("sample `{id}`: mask header disagrees with manifest")));
                    }
                    if m.iter().any(|&c| c as usize >= manifest.num_classes) {
                        return Err(Error::data(&kpath, format!("sample `{id}`: mask class out of range")));
                    }
                    Some(m)
                } else {
                    None
                };
                samples.push(SampleRecord {
                    id: id.clone(),
                    image: Tensor::new(vec![1, h, w], values)?,
                    mask,
                    labeled: has_mask,
                });
            }
        }
        Dataset::assemble(samples, manifest)
    }
}

fn sample_path(dir: &Path, id: &str, ext: &str) -> PathBuf {
    dir.join(format!("{id}.{ext}"))
}

fn read_sample(path: &Path, id: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::data(path, format!("sample `{id}`: {e}")))
}

fn tag(e: Error, id: &str) -> Error {
    match e {
        Error::Data { path, detail } => Error::Data { path, detail: format!("sample `{id}`: {detail}") },
        other => other,
    }
}

pub const BACKGROUND: f64 = 0.2;
pub const DISTRACTOR: f64 = 0.45;
pub const FOREGROUND: f64 = 0.7;
pub const BIAS_AMPLITUDE: f64 = 0.15;
pub const PIXEL_NOISE: f64 = 0.05;

/// `n` samples of `size x size`: background with a smooth bias field, one
/// target ellipse (the mask), 1-3 distractor discs and Gaussian pixel noise.
/// Sample `i` depends only on `(seed, i)`.
pub fn generate_synthetic(n: usize, size: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if size == 0 || !size.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!("size {size} must be a positive multiple of 4")));
    }
    Ok((0..n).map(|i| generate_one(i, size, seed)).collect())
}

fn generate_one(index: usize, size: usize, seed: u64) -> SampleRecord {
    let mut rng = StreamKey::new(seed, stream_id(&[0x5EED, index as u64])).open();
    let s = size as f64;

    let amp = rng.uniform_range(0.0, BIAS_AMPLITUDE);
    let fx = rng.uniform_range(0.25, 1.0);
    let fy = rng.uniform_range(0.25, 1.0);
    let phase = rng.uniform_range(0.0, 2.0 * PI);

    let cy = rng.uniform_range(s / 4.0, 3.0 * s / 4.0);
    let cx = rng.uniform_range(s / 4.0, 3.0 * s / 4.0);
    let ra = rng.uniform_range(s / 8.0, s / 4.0);
    let rb = rng.uniform_range(s / 8.0, s / 4.0);
    let theta = rng.uniform_range(0.0, PI);
    let (sin, cos) = theta.sin_cos();

    let n_blobs = 1 + rng.below(3);
    let blobs: Vec<(f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let r = rng.uniform_range(s / 16.0, s / 8.0);
            (rng.uniform_range(r, s - r), rng.uniform_range(r, s - r), r)
        })
        .collect();

    let mut image = vec![0.0f32; size * size];
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let (dy, dx) = (py - cy, px - cx);
            let u = (dx * cos + dy * sin) / ra;
            let v = (-dx * sin + dy * cos) / rb;
            let inside = u * u + v * v <= 1.0;
            let mut val = if inside {
                FOREGROUND
            } else if blobs.iter().any(|&(by, bx, r)| (py - by).powi(2) + (px - bx).powi(2) <= r * r) {
                DISTRACTOR
            } else {
                BACKGROUND
            };
            val += amp * (2.0 * PI * (fx * px + fy * py) / s + phase).sin();
            val += PIXEL_NOISE * rng.normal();
            image[y * size + x] = val.clamp(0.0, 1.0) as f32;
            mask[y * size + x] = inside as u8;
        }
    }
    SampleRecord {
        id: format!("s{index:04}"),
        image: Tensor::new(vec![1, size, size], image).expect("generated shape"),
        mask: Some(mask),
        labeled: true,
    }
}

/// Deterministic shuffle of the sample ids: the first `n_test` become the
/// test split, the next `n_labeled` the labeled training set, the rest
/// unlabeled training data.
pub fn split(samples: &[SampleRecord], n_labeled: usize, n_test: usize, seed: u64, name: &str) -> Result<Manifest> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("no samples to split".into()))?;
    if n_test + n_labeled > samples.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_test} test + {n_labeled} labeled exceeds {} samples",
            samples.len()
        )));
    }
    if n_labeled == 0 {
        return Err(Error::InvalidArgument("need at least one labeled sample".into()));
    }
    let mut ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    ids.shuffle(StreamKey::new(seed, stream_id(&[0x5B11])).open().rng());
    let test = ids[..n_test].to_vec();
    let train_labeled = ids[n_test..n_test + n_labeled].to_vec();
    let train_unlabeled = ids[n_test + n_labeled..].to_vec();
    let [_, h, w] = first.image.shape()[..] else {
        return Err(Error::shape("split", "images must be (1,H,W)"));
    };
    Ok(Manifest { name: name.into(), height: h, width: w, num_classes: 2, train_labeled, train_unlabeled, test })
}

/// Ids of one training step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
}

struct Pool {
    ids: Vec<String>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    key: StreamKey,
}

impl Pool {
    fn new(ids: Vec<String>, key: StreamKey) -> Self {
        let mut p = Self { order: Vec::new(), ids, pos: 0, epoch: 0, key };
        p.reshuffle();
        p
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.ids.len()).collect();
        self.order.shuffle(self.key.child(self.epoch).open().rng());
        self.pos = 0;
    }

    fn take(&mut self, n: usize) -> Vec<String> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.ids[self.order[self.pos]].clone());
            self.pos += 1;
        }
        out
    }
}

/// Endless stream of batches with a fixed labeled:unlabeled composition.
/// The two pools cycle independently, each reshuffled every epoch.
pub struct BatchIter {
    labeled: Pool,
    unlabeled: Pool,
    n_labeled: usize,
    n_unlabeled: usize,
}

impl BatchIter {
    pub fn new(manifest: &Manifest, n_labeled: usize, n_unlabeled: usize, seed: u64) -> Result<Self> {
        if n_labeled > 0 && manifest.train_labeled.is_empty() {
            return Err(Error::InvalidArgument("labeled pool is empty".into()));
        }
        if n_unlabeled > 0 && manifest.train_unlabeled.is_empty() {
            return Err(Error::InvalidArgument("unlabeled pool is empty".into()));
        }
        Ok(Self {
            labeled: Pool::new(manifest.train_labeled.clone(), StreamKey::new(seed, stream_id(&[0xBA7C, 0]))),
            unlabeled: Pool::new(manifest.train_unlabeled.clone(), StreamKey::new(seed, stream_id(&[0xBA7C, 1]))),
            n_labeled,
            n_unlabeled,
        })
    }
}

impl Iterator for BatchIter {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(Batch { labeled: self.labeled.take(self.n_labeled), unlabeled: self.unlabeled.take(self.n_unlabeled) })
    }
}
