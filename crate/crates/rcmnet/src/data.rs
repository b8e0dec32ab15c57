//! Dataset ingestion, balancing, splitting, augmentation, preprocessing and
//! deterministic synthetic image generation.
//!
//! On-disk interchange is binary NetPBM: P6 color for dataset images, P5
//! grayscale for heatmaps, both 8-bit with maxval 255. Grayscale inputs are
//! replicated to 3 channels on load.

use std::fs;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;

/// 8-bit image stored planar: 3 channel planes of height x width, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Raster {
        Raster {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Ingested,
    Synthetic,
    Augmented,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Raster,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

// ---- NetPBM codec ----

fn parse_header(bytes: &[u8]) -> Result<(u8, usize, usize, usize, usize)> {
    if bytes.len() < 2 || bytes[0] != b'P' || (bytes[1] != b'5' && bytes[1] != b'6') {
        return Err(Error::Format("not a binary NetPBM file (expected P5 or P6)".into()));
    }
    let kind = bytes[1];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and '#' comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed NetPBM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format("malformed NetPBM header".into()))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("malformed NetPBM header".into()));
    }
    pos += 1; // single whitespace byte before the raster
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval} (expected 255)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("zero image extent".into()));
    }
    Ok((kind, w, h, maxval, pos))
}

/// Decodes binary P5 (grayscale, replicated to 3 channels) or P6 (color).
pub fn decode_netpbm(bytes: &[u8]) -> Result<Raster> {
    let (kind, w, h, _, pos) = parse_header(bytes)?;
    let raster = &bytes[pos..];
    let mut img = Raster::new(w, h);
    match kind {
        b'5' => {
            if raster.len() < w * h {
                return Err(Error::Format("truncated P5 raster".into()));
            }
            for c in 0..3 {
                img.data[c * w * h..(c + 1) * w * h].copy_from_slice(&raster[..w * h]);
            }
        }
        _ => {
            if raster.len() < 3 * w * h {
                return Err(Error::Format("truncated P6 raster".into()));
            }
            for i in 0..w * h {
                for c in 0..3 {
                    img.data[c * w * h + i] = raster[3 * i + c];
                }
            }
        }
    }
    Ok(img)
}

pub fn encode_p6(img: &Raster) -> Vec<u8> {
    let (w, h) = (img.width, img.height);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..w * h {
        for c in 0..3 {
            out.push(img.data[c * w * h + i]);
        }
    }
    out
}

pub fn encode_p5(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

// ---- directory ingestion / export ----

/// Loads a directory-per-class tree of NetPBM files. Classes and files are
/// sorted lexicographically. Unreadable files are reported by path but do not
/// abort the load; an empty class directory does.
pub fn load_dataset(root: &Path) -> Result<(LabeledDataset, Vec<String>)> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    let mut problems = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned(),
        );
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut loaded = 0;
        for file in files {
            match fs::read(&file).map_err(|e| Error::io(&file, e)).and_then(|b| decode_netpbm(&b)) {
                Ok(image) => {
                    samples.push(Sample { image, label });
                    loaded += 1;
                }
                Err(e) => problems.push(format!("{}: {e}", file.display())),
            }
        }
        if loaded == 0 {
            return Err(Error::Data(format!("class directory {} has no readable images", dir.display())));
        }
    }
    Ok((
        LabeledDataset {
            class_names,
            samples,
            provenance: Provenance::Ingested,
        },
        problems,
    ))
}

/// Writes a dataset back out as class-dir/sample_NNNN.ppm.
pub fn save_dataset(ds: &LabeledDataset, root: &Path) -> Result<usize> {
    let mut counters = vec![0usize; ds.class_names.len()];
    for name in &ds.class_names {
        fs::create_dir_all(root.join(name)).map_err(|e| Error::io(root.join(name), e))?;
    }
    for s in &ds.samples {
        let n = counters[s.label];
        counters[s.label] += 1;
        let path = ds_path(root, &ds.class_names[s.label], n);
        fs::write(&path, encode_p6(&s.image)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ds.samples.len())
}

fn ds_path(root: &Path, class: &str, n: usize) -> PathBuf {
    root.join(class).join(format!("sample_{n:04}.ppm"))
}

// ---- balancing / splitting ----

/// Truncates every class to the minimum class cardinality by seeded uniform
/// sampling without replacement.
pub fn balance_classes(ds: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let counts = ds.class_counts();
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Data("balance: a class has no samples".into()));
    }
    let target = *counts.iter().min().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(init::sub_seed(seed, "balance"));
    let mut samples = Vec::with_capacity(target * counts.len());
    for class in 0..counts.len() {
        let mut idx: Vec<usize> = ds
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        init::shuffle(&mut rng, &mut idx);
        idx.truncate(target);
        idx.sort_unstable(); // keep original relative order within the class
        samples.extend(idx.into_iter().map(|i| ds.samples[i].clone()));
    }
    Ok(LabeledDataset {
        class_names: ds.class_names.clone(),
        samples,
        provenance: ds.provenance,
    })
}

/// Per-class seeded shuffle, then prefix/suffix split with
/// train count = round(fraction * class size).
pub fn split_train_test(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {} must lie in (0,1)",
            spec.train_fraction
        )));
    }
    let counts = ds.class_counts();
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::Data("split: every class needs at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init::sub_seed(spec.seed, "split"));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..counts.len() {
        let mut idx: Vec<usize> = ds
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        init::shuffle(&mut rng, &mut idx);
        let n_train = (spec.train_fraction * idx.len() as f64).round() as usize;
        for (k, i) in idx.into_iter().enumerate() {
            if k < n_train {
                train.push(ds.samples[i].clone());
            } else {
                test.push(ds.samples[i].clone());
            }
        }
    }
    let wrap = |samples| LabeledDataset {
        class_names: ds.class_names.clone(),
        samples,
        provenance: ds.provenance,
    };
    Ok((wrap(train), wrap(test)))
}

// ---- augmentation ----

/// Clockwise quarter turn.
pub fn rotate90(img: &Raster) -> Raster {
    let (w, h) = (img.width, img.height);
    let mut out = Raster::new(h, w);
    for c in 0..3 {
        for y in 0..w {
            for x in 0..h {
                out.set(c, y, x, img.get(c, h - 1 - x, y));
            }
        }
    }
    out
}

pub fn rotate180(img: &Raster) -> Raster {
    rotate90(&rotate90(img))
}

pub fn rotate270(img: &Raster) -> Raster {
    rotate90(&rotate180(img))
}

/// Left-right mirror.
pub fn flip_horizontal(img: &Raster) -> Raster {
    let (w, h) = (img.width, img.height);
    let mut out = Raster::new(w, h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

/// Top-bottom mirror.
pub fn flip_vertical(img: &Raster) -> Raster {
    let (w, h) = (img.width, img.height);
    let mut out = Raster::new(w, h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, img.get(c, h - 1 - y, x));
            }
        }
    }
    out
}

pub const AUGMENT_SUFFIXES: [&str; 5] = ["_r90", "_r180", "_r270", "_fh", "_fv"];

fn augment_one(img: &Raster) -> [Raster; 5] {
    [
        rotate90(img),
        rotate180(img),
        rotate270(img),
        flip_horizontal(img),
        flip_vertical(img),
    ]
}

/// Expands every sample to itself plus three rotations and two flips, in the
/// fixed order (original, r90, r180, r270, flip-h, flip-v).
pub fn augment(ds: &LabeledDataset) -> Result<LabeledDataset> {
    let mut samples = Vec::with_capacity(6 * ds.samples.len());
    for s in &ds.samples {
        if !s.image.is_square() {
            return Err(Error::Data(format!(
                "augment requires square images, got {}x{}",
                s.image.width, s.image.height
            )));
        }
        samples.push(s.clone());
        for img in augment_one(&s.image) {
            samples.push(Sample {
                image: img,
                label: s.label,
            });
        }
    }
    Ok(LabeledDataset {
        class_names: ds.class_names.clone(),
        samples,
        provenance: Provenance::Augmented,
    })
}

/// Directory-to-directory augmentation preserving the class layout: each
/// input file yields itself plus five suffixed transforms. Returns
/// (input file count, output file count).
pub fn augment_directory(input: &Path, output: &Path) -> Result<(usize, usize)> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", input.display())));
    }
    let mut n_in = 0;
    let mut n_out = 0;
    for dir in class_dirs {
        let class = dir.file_name().unwrap().to_string_lossy().into_owned();
        let out_dir = output.join(&class);
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let img = decode_netpbm(&bytes)
                .map_err(|e| Error::Format(format!("{}: {e}", file.display())))?;
            if !img.is_square() {
                return Err(Error::Data(format!(
                    "augment requires square images: {}",
                    file.display()
                )));
            }
            let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
            let write = |name: String, img: &Raster| -> Result<()> {
                let path = out_dir.join(name);
                fs::write(&path, encode_p6(img)).map_err(|e| Error::io(&path, e))
            };
            write(format!("{stem}.ppm"), &img)?;
            n_out += 1;
            for (suffix, t) in AUGMENT_SUFFIXES.iter().zip(augment_one(&img)) {
                write(format!("{stem}{suffix}.ppm"), &t)?;
                n_out += 1;
            }
            n_in += 1;
        }
    }
    Ok((n_in, n_out))
}

// ---- preprocessing ----

/// Center-crops to the largest centered square (floor rule for the left/top
/// offset), nearest-neighbor resamples to side x side, scales to [0,1].
/// Output layout matches the model input: [3, side, side] row-major.
pub fn preprocess_image(img: &Raster, side: usize) -> Vec<f64> {
    let m = img.width.min(img.height);
    let x0 = (img.width - m) / 2;
    let y0 = (img.height - m) / 2;
    let mut out = vec![0.0; 3 * side * side];
    for c in 0..3 {
        for y in 0..side {
            let sy = y0 + y * m / side;
            for x in 0..side {
                let sx = x0 + x * m / side;
                out[(c * side + y) * side + x] = img.get(c, sy, sx) as f64 / 255.0;
            }
        }
    }
    out
}

/// Dataset preprocessed to flat [3, side, side] f64 buffers.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub class_names: Vec<String>,
    pub side: usize,
    pub samples: Vec<(Vec<f64>, usize)>,
}

pub fn preprocess(ds: &LabeledDataset, side: usize) -> PreparedDataset {
    PreparedDataset {
        class_names: ds.class_names.clone(),
        side,
        samples: ds
            .samples
            .iter()
            .map(|s| (preprocess_image(&s.image, side), s.label))
            .collect(),
    }
}

// ---- synthetic generation ----

/// Deterministic desk-scale stand-in dataset: each class draws a distinct
/// parametric shape with seeded jitter in position, scale and intensity plus
/// per-pixel noise. Supports 2..=8 classes.
pub fn synth_generate(
    num_classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(2..=8).contains(&num_classes) {
        return Err(Error::Config(format!(
            "synthetic generator supports 2..=8 classes, got {num_classes}"
        )));
    }
    if side < 16 {
        return Err(Error::Config(format!("synthetic side {side} too small (minimum 16)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init::sub_seed(seed, "synth"));
    let class_names: Vec<String> = (0..num_classes).map(|k| format!("class_{k}")).collect();
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for label in 0..num_classes {
        for _ in 0..per_class {
            samples.push(Sample {
                image: synth_image(&mut rng, label, side),
                label,
            });
        }
    }
    Ok(LabeledDataset {
        class_names,
        samples,
        provenance: Provenance::Synthetic,
    })
}

fn synth_image(rng: &mut ChaCha8Rng, class: usize, side: usize) -> Raster {
    let s = side as f64;
    let cx = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
    let cy = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
    let r = s / 4.0 * rng.gen_range(0.8..1.2);
    let fg: f64 = rng.gen_range(150.0..220.0);
    let bg: f64 = rng.gen_range(20.0..50.0);
    let tint = [1.0, rng.gen_range(0.85..1.0), rng.gen_range(0.85..1.0)];
    let mut img = Raster::new(side, side);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let inside = match class {
                0 => dist <= r,                                  // disk
                1 => dist <= r && dist >= r * 0.55,              // ring
                2 => dx.abs() <= r && dy.abs() <= r * 0.8,       // box
                3 => dx.abs() <= r * 0.3 || dy.abs() <= r * 0.3, // cross
                4 => (y / 4) % 2 == 0,                           // horizontal bars
                5 => (x / 4) % 2 == 0,                           // vertical bars
                6 => dx + dy <= 0.0,                             // diagonal half
                _ => ((x / 4) + (y / 4)) % 2 == 0,               // checkerboard
            };
            let base = if inside { fg } else { bg };
            for c in 0..3 {
                let noise: f64 = rng.gen_range(-15.0..15.0);
                let v = (base * tint[c] + noise).clamp(0.0, 255.0);
                img.set(c, y, x, v as u8);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(w: usize, h: usize, vals: &[u8]) -> Raster {
        // single gray plane replicated
        let mut img = Raster::new(w, h);
        for c in 0..3 {
            for (i, v) in vals.iter().enumerate() {
                img.data[c * w * h + i] = *v;
            }
        }
        img
    }

    #[test]
    fn p6_decode_matches_format_definition() {
        let bytes = b"P6 2 1 255 \xff\x00\x00\x00\xff\x00";
        let img = decode_netpbm(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(
            [img.get(0, 0, 0), img.get(1, 0, 0), img.get(2, 0, 0)],
            [255, 0, 0]
        );
        assert_eq!(
            [img.get(0, 0, 1), img.get(1, 0, 1), img.get(2, 0, 1)],
            [0, 255, 0]
        );
    }

    #[test]
    fn p5_replicates_to_three_channels() {
        let img = decode_netpbm(b"P5\n2 2\n255\n\x01\x02\x03\x04").unwrap();
        for c in 0..3 {
            assert_eq!(img.get(c, 1, 0), 3);
        }
    }

    #[test]
    fn decoder_rejects_bad_input() {
        assert!(decode_netpbm(b"P3 1 1 255 1 2 3").is_err());
        assert!(decode_netpbm(b"P6 2 2 255 \x00").is_err()); // truncated
        assert!(decode_netpbm(b"P6 2 2 65535 ").is_err()); // maxval
        assert!(decode_netpbm(b"P6 x 2 255 ").is_err());
    }

    #[test]
    fn p6_roundtrip_with_comment_header() {
        let img = tiny(2, 2, &[1, 2, 3, 4]);
        let enc = encode_p6(&img);
        assert_eq!(decode_netpbm(&enc).unwrap(), img);
        let commented = b"P6\n# a comment\n2 2\n255\n\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00";
        assert!(decode_netpbm(commented).is_ok());
    }

    #[test]
    fn rotation_and_flip_pixel_permutations() {
        // [[a,b],[c,d]] with a=1 b=2 c=3 d=4
        let img = tiny(2, 2, &[1, 2, 3, 4]);
        let r90 = rotate90(&img);
        assert_eq!(r90.data[0..4], [3, 1, 4, 2]); // [[c,a],[d,b]]
        let fh = flip_horizontal(&img);
        assert_eq!(fh.data[0..4], [2, 1, 4, 3]); // [[b,a],[d,c]]
        let fv = flip_vertical(&img);
        assert_eq!(fv.data[0..4], [3, 4, 1, 2]);
    }

    #[test]
    fn transform_involutions() {
        let ds = synth_generate(2, 2, 16, 9).unwrap();
        for s in &ds.samples {
            let img = &s.image;
            assert_eq!(&flip_horizontal(&flip_horizontal(img)), img);
            assert_eq!(&flip_vertical(&flip_vertical(img)), img);
            assert_eq!(&rotate90(&rotate270(img)), img);
            assert_eq!(&rotate90(&rotate90(&rotate90(&rotate90(img)))), img);
        }
    }

    #[test]
    fn augment_multiplies_by_six() {
        let mut ds = synth_generate(2, 1, 16, 3).unwrap();
        ds.samples.truncate(1);
        assert_eq!(augment(&ds).unwrap().samples.len(), 6);
        let ds = synth_generate(2, 250, 16, 3).unwrap();
        assert_eq!(ds.samples.len(), 500);
        assert_eq!(augment(&ds).unwrap().samples.len(), 3000);
    }

    #[test]
    fn augment_rejects_non_square() {
        let ds = LabeledDataset {
            class_names: vec!["a".into()],
            samples: vec![Sample {
                image: Raster::new(3, 2),
                label: 0,
            }],
            provenance: Provenance::Ingested,
        };
        assert!(augment(&ds).is_err());
    }

    #[test]
    fn balance_truncates_to_minimum() {
        let mut ds = synth_generate(2, 10, 16, 1).unwrap();
        // drop three class-1 samples to get counts (10, 7)
        let mut kept = 0;
        ds.samples.retain(|s| {
            if s.label == 1 {
                kept += 1;
                kept <= 7
            } else {
                true
            }
        });
        assert_eq!(ds.class_counts(), vec![10, 7]);
        let balanced = balance_classes(&ds, 4).unwrap();
        assert_eq!(balanced.class_counts(), vec![7, 7]);
        // different seeds keep the same counts but may pick different members
        let b2 = balance_classes(&ds, 5).unwrap();
        assert_eq!(b2.class_counts(), vec![7, 7]);
    }

    #[test]
    fn split_reproduces_table_counts() {
        let spec = SplitSpec {
            train_fraction: 0.8,
            seed: 11,
        };
        let ds = synth_generate(2, 250, 16, 2).unwrap();
        let (train, test) = split_train_test(&ds, &spec).unwrap();
        assert_eq!(train.class_counts(), vec![200, 200]);
        assert_eq!(test.class_counts(), vec![50, 50]);
        // same seed twice -> identical partition
        let (train2, _) = split_train_test(&ds, &spec).unwrap();
        assert_eq!(
            train.samples.iter().map(|s| s.image.data.clone()).collect::<Vec<_>>(),
            train2.samples.iter().map(|s| s.image.data.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn crop_rule_drops_one_left_two_right() {
        // 363 wide, 360 tall -> offsets x0=1, y0=0
        let mut img = Raster::new(363, 360);
        img.set(0, 0, 1, 77); // first kept column
        let out = preprocess_image(&img, 360);
        assert_eq!(out[0], 77.0 / 255.0);
    }

    #[test]
    fn preprocess_same_size_only_rescales() {
        let img = tiny(2, 2, &[0, 51, 102, 255]);
        // side 2 == source side: pure rescale
        let out = preprocess_image(&img, 2);
        assert_eq!(out[0..4], [0.0, 0.2, 0.4, 1.0]);
    }

    #[test]
    fn nearest_neighbor_matches_index_oracle() {
        // 8x8 checkerboard down to 4: oracle picks src = x*8/4 = 2x
        let mut img = Raster::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                let v = if (x + y) % 2 == 0 { 255 } else { 0 };
                for c in 0..3 {
                    img.set(c, y, x, v);
                }
            }
        }
        let out = preprocess_image(&img, 4);
        for y in 0..4 {
            for x in 0..4 {
                let expect = img.get(0, 2 * y, 2 * x) as f64 / 255.0;
                assert_eq!(out[y * 4 + x], expect);
            }
        }
    }

    #[test]
    fn synth_is_deterministic_and_validates() {
        let a = synth_generate(3, 4, 16, 42).unwrap();
        let b = synth_generate(3, 4, 16, 42).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image, y.image);
        }
        assert!(synth_generate(1, 4, 16, 0).is_err());
        assert!(synth_generate(9, 4, 16, 0).is_err());
        assert!(synth_generate(2, 4, 8, 0).is_err());
    }
}
