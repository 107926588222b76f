//! Readers for the original distribution formats: CIFAR binary batches,
//! (gzipped) IDX files and MedMNIST `.npz` archives.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use krlab_nn::Tensor;

use super::{DatasetSpec, LabeledDataset, Source, Split, SIDE};
use crate::error::{KrError, Result};

/// Bilinear resize of an HWC image with half-pixel centres.
pub fn bilinear_resize(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w * c);
    if h == oh && w == ow {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; oh * ow * c];
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for y in 0..oh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..ow {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[(y * ow + x) * c + ch] = (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn missing(name: &str, path: &Path, e: std::io::Error) -> KrError {
    KrError::Dataset {
        name: name.to_string(),
        reason: format!("cannot read {}: {e} (place the original files under the raw/ directory)", path.display()),
    }
}

fn read_file(name: &str, path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| missing(name, path, e))
}

/// Reads `path`, or `path.gz` decompressed.
fn read_maybe_gz(name: &str, path: &Path) -> Result<Vec<u8>> {
    if path.exists() {
        return read_file(name, path);
    }
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    let raw = read_file(name, &gz)?;
    let mut out = Vec::new();
    GzDecoder::new(&raw[..])
        .read_to_end(&mut out)
        .map_err(|e| missing(name, &gz, e))?;
    Ok(out)
}

/// Images as u8 HWC plus labels, before resizing.
struct RawImages {
    h: usize,
    w: usize,
    c: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl RawImages {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn into_split(self, spec: &DatasetSpec, split: Split, range: std::ops::Range<usize>) -> Result<LabeledDataset> {
        if self.c != spec.channels {
            return Err(KrError::Dataset {
                name: spec.name.clone(),
                reason: format!("source has {} channels, spec says {}", self.c, spec.channels),
            });
        }
        let per = self.h * self.w * self.c;
        let n = range.len();
        let mut data = Vec::with_capacity(n * SIDE * SIDE * self.c);
        for i in range.clone() {
            let img: Vec<f32> = self.pixels[i * per..(i + 1) * per].iter().map(|&b| b as f32 / 255.0).collect();
            data.extend(bilinear_resize(&img, self.h, self.w, self.c, SIDE, SIDE));
        }
        let labels = self.labels[range].to_vec();
        LabeledDataset::new(&spec.name, split, spec.num_classes, Tensor::new(&[n, SIDE, SIDE, self.c], data), labels)
    }
}

/// CIFAR binary records: optional coarse label, label, 3×32×32 planar RGB.
fn read_cifar(name: &str, files: &[PathBuf], label_offset: usize) -> Result<RawImages> {
    let rec = label_offset + 1 + 3072;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = read_file(name, f)?;
        if bytes.len() % rec != 0 {
            return Err(KrError::Dataset {
                name: name.to_string(),
                reason: format!("{} is not a whole number of records", f.display()),
            });
        }
        for r in bytes.chunks_exact(rec) {
            labels.push(r[label_offset] as usize);
            let planes = &r[label_offset + 1..];
            for p in 0..1024 {
                pixels.extend_from_slice(&[planes[p], planes[1024 + p], planes[2048 + p]]);
            }
        }
    }
    Ok(RawImages {
        h: 32,
        w: 32,
        c: 3,
        pixels,
        labels,
    })
}

fn read_idx(name: &str, images: &Path, labels: &Path) -> Result<RawImages> {
    let img = read_maybe_gz(name, images)?;
    let lab = read_maybe_gz(name, labels)?;
    let be = |b: &[u8], o: usize| u32::from_be_bytes(b[o..o + 4].try_into().expect("4 bytes")) as usize;
    let bad = |reason: &str| KrError::Dataset {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    if img.len() < 16 || be(&img, 0) != 0x803 || lab.len() < 8 || be(&lab, 0) != 0x801 {
        return Err(bad("bad IDX magic"));
    }
    let (n, h, w) = (be(&img, 4), be(&img, 8), be(&img, 12));
    if img.len() != 16 + n * h * w || be(&lab, 4) != n || lab.len() != 8 + n {
        return Err(bad("IDX size mismatch"));
    }
    Ok(RawImages {
        h,
        w,
        c: 1,
        pixels: img[16..].to_vec(),
        labels: lab[8..].iter().map(|&b| b as usize).collect(),
    })
}

fn read_npz(name: &str, path: &Path) -> Result<[RawImages; 3]> {
    let file = fs::File::open(path).map_err(|e| missing(name, path, e))?;
    let bad = |reason: String| KrError::Dataset {
        name: name.to_string(),
        reason,
    };
    let mut zip = zip::ZipArchive::new(file).map_err(|e| bad(format!("bad npz archive: {e}")))?;
    let mut array = |key: &str| -> Result<(Vec<u64>, Vec<u8>)> {
        let entry = zip
            .by_name(&format!("{key}.npy"))
            .map_err(|e| bad(format!("missing array {key}: {e}")))?;
        let npy = npyz::NpyFile::new(entry).map_err(|e| bad(format!("array {key}: {e}")))?;
        let shape = npy.shape().to_vec();
        let data = npy.into_vec::<u8>().map_err(|e| bad(format!("array {key}: {e}")))?;
        Ok((shape, data))
    };
    let mut out = Vec::with_capacity(3);
    for split in ["train", "val", "test"] {
        let (ishape, pixels) = array(&format!("{split}_images"))?;
        let (_, labels) = array(&format!("{split}_labels"))?;
        let (h, w, c) = match ishape.as_slice() {
            [_, h, w] => (*h as usize, *w as usize, 1),
            [_, h, w, c] => (*h as usize, *w as usize, *c as usize),
            s => return Err(bad(format!("unexpected image shape {s:?}"))),
        };
        out.push(RawImages {
            h,
            w,
            c,
            pixels,
            labels: labels.into_iter().map(|b| b as usize).collect(),
        });
    }
    Ok(out.try_into().ok().expect("three splits"))
}

pub(crate) fn ingest(spec: &DatasetSpec, source: &Source, raw: &Path) -> Result<[LabeledDataset; 3]> {
    let name = spec.name.as_str();
    // Train and validation are carved from the original training set; the
    // validation part is its tail.
    let carve = |all: RawImages, test: RawImages| -> Result<[LabeledDataset; 3]> {
        let n = all.len();
        if n != spec.train + spec.val {
            return Err(KrError::Dataset {
                name: name.to_string(),
                reason: format!("source training set has {n} samples, spec expects {}", spec.train + spec.val),
            });
        }
        let nt = test.len();
        let val = RawImages {
            h: all.h,
            w: all.w,
            c: all.c,
            pixels: all.pixels.clone(),
            labels: all.labels.clone(),
        };
        Ok([
            all.into_split(spec, Split::Train, 0..spec.train)?,
            val.into_split(spec, Split::Val, spec.train..n)?,
            test.into_split(spec, Split::Test, 0..nt)?,
        ])
    };
    match source {
        Source::Cifar10 => {
            let d = raw.join("cifar-10-batches-bin");
            let train: Vec<_> = (1..=5).map(|i| d.join(format!("data_batch_{i}.bin"))).collect();
            carve(read_cifar(name, &train, 0)?, read_cifar(name, &[d.join("test_batch.bin")], 0)?)
        }
        Source::Cifar100 => {
            let d = raw.join("cifar-100-binary");
            carve(read_cifar(name, &[d.join("train.bin")], 1)?, read_cifar(name, &[d.join("test.bin")], 1)?)
        }
        Source::FashionMnist => {
            let d = raw.join("fashion-mnist");
            carve(
                read_idx(name, &d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte"))?,
                read_idx(name, &d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte"))?,
            )
        }
        Source::MedMnist(stem) => {
            let [tr, va, te] = read_npz(name, &raw.join(format!("{stem}.npz")))?;
            let (ntr, nva, nte) = (tr.len(), va.len(), te.len());
            Ok([
                tr.into_split(spec, Split::Train, 0..ntr)?,
                va.into_split(spec, Split::Val, 0..nva)?,
                te.into_split(spec, Split::Test, 0..nte)?,
            ])
        }
        Source::Toy { .. } => unreachable!("toy datasets are rendered, not ingested"),
    }
}
