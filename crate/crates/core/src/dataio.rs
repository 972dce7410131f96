//! Dataset ingestion, preprocessing, augmentation and split protocols.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scnn::{PartStack, NUM_PARTS};
use crate::tensor::Tensor;

pub mod synthetic;

/// Target size every image is resized to before entering the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self { height: 128, width: 48 }
    }
}

impl ImageGeometry {
    /// Narrower geometry used when mixing datasets with different aspect ratios.
    pub fn cross_dataset() -> Self {
        Self { height: 128, width: 40 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonImage {
    pub subject_id: String,
    pub camera_id: String,
    pub index: u32,
    /// `[3, H, W]`, normalized to `[-1, 1]`.
    pub pixels: Tensor,
    pub mirrored: bool,
}

/// Maps a raw `[0, 255]` intensity to `[-1, 1]`.
pub fn normalize_pixel(p: f64) -> f64 {
    (p / 255.0 - 0.5) * 2.0
}

/// Bilinear resize of a `[C, H, W]` tensor with half-pixel aligned sampling.
/// Resizing to the current size returns the input unchanged.
pub fn resize_bilinear(image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    image.expect_rank("resize_bilinear", 3)?;
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    if h == height && w == width {
        return Ok(image.clone());
    }
    if height == 0 || width == 0 || h == 0 || w == 0 {
        return Err(Error::Usage("cannot resize to or from an empty image".into()));
    }
    let taps = |out: usize, len_in: usize, len_out: usize| {
        let src = ((out as f64 + 0.5) * len_in as f64 / len_out as f64 - 0.5).clamp(0.0, (len_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len_in - 1);
        (lo, hi, src - lo as f64)
    };
    let ys: Vec<_> = (0..height).map(|y| taps(y, h, height)).collect();
    let xs: Vec<_> = (0..width).map(|x| taps(x, w, width)).collect();
    let src = image.data();
    let mut out = Tensor::zeros(&[c, height, width]);
    let dst = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[(ch * height + y) * width + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Converts interleaved 8-bit RGB into a normalized `[3, H, W]` tensor at the target geometry.
pub fn tensor_from_rgb8(rgb: &[u8], width: usize, height: usize, geometry: ImageGeometry) -> Result<Tensor> {
    if rgb.len() != width * height * 3 {
        return Err(Error::dim("tensor_from_rgb8", "pixel bytes", width * height * 3, rgb.len()));
    }
    let raw = Tensor::from_fn(&[3, height, width], |i| {
        let (c, p) = (i / (width * height), i % (width * height));
        rgb[p * 3 + c] as f64
    });
    Ok(resize_bilinear(&raw, geometry.height, geometry.width)?.map(normalize_pixel))
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    subject_id: String,
    camera_id: String,
    index: u32,
    path: String,
}

/// Reads a `subject_id,camera_id,index,path` manifest; paths are relative to
/// the manifest's directory. Images are decoded, resized and normalized.
pub fn load_manifest(path: &Path, geometry: ImageGeometry) -> Result<Vec<PersonImage>> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        _ => csv_err(e),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(csv_err)?;
        if !seen.insert((row.subject_id.clone(), row.camera_id.clone(), row.index)) {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                message: format!(
                    "duplicate row for subject {} camera {} index {}",
                    row.subject_id, row.camera_id, row.index
                ),
            });
        }
        rows.push(row);
    }
    rows.par_iter()
        .map(|row| {
            let file: PathBuf = base.join(&row.path);
            let img = image::open(&file).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&file, io),
                other => Error::Image {
                    path: file.clone(),
                    message: other.to_string(),
                },
            })?;
            let rgb = img.to_rgb8();
            let pixels = tensor_from_rgb8(rgb.as_raw(), rgb.width() as usize, rgb.height() as usize, geometry)?;
            Ok(PersonImage {
                subject_id: row.subject_id.clone(),
                camera_id: row.camera_id.clone(),
                index: row.index,
                pixels,
                mirrored: false,
            })
        })
        .collect()
}

/// Horizontal flip; applying it twice restores the original exactly.
pub fn mirror(img: &PersonImage) -> PersonImage {
    let (c, h, w) = (img.pixels.dim(0), img.pixels.dim(1), img.pixels.dim(2));
    let src = img.pixels.data();
    let pixels = Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    });
    PersonImage {
        pixels,
        mirrored: !img.mirrored,
        ..img.clone()
    }
}

/// Returns the images followed by their mirrored copies.
pub fn augment_with_mirrors(images: &[PersonImage]) -> Vec<PersonImage> {
    images.iter().cloned().chain(images.iter().map(mirror)).collect()
}

/// Vertical placement of the three overlapping body bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartGeometry {
    pub image_height: usize,
    pub band_height: usize,
    pub offsets: [usize; NUM_PARTS],
}

impl PartGeometry {
    /// Bands of roughly 3/8 of the image height (rounded up to a multiple of
    /// 4 for two 2x2 poolings), evenly spaced from top to bottom. For a
    /// 128-row image this gives 48-row bands at offsets 0, 40 and 80.
    pub fn for_height(image_height: usize) -> Result<Self> {
        let band = (3 * image_height).div_ceil(8).div_ceil(4) * 4;
        if band == 0 || band > image_height {
            return Err(Error::Usage(format!("image height {image_height} too small for three parts")));
        }
        let span = image_height - band;
        Ok(Self {
            image_height,
            band_height: band,
            offsets: [0, span / 2, span],
        })
    }
}

/// Crops the three horizontal bands at full width.
pub fn crop_parts(img: &PersonImage, geometry: &PartGeometry) -> Result<PartStack> {
    let t = &img.pixels;
    t.expect_rank("crop_parts", 3)?;
    if t.dim(1) != geometry.image_height {
        return Err(Error::dim("crop_parts", "height", geometry.image_height, t.dim(1)));
    }
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let band = geometry.band_height;
    let crop = |offset: usize| {
        Tensor::from_fn(&[c, band, w], |i| {
            let ch = i / (band * w);
            let rest = i % (band * w);
            t.data()[ch * h * w + offset * w + rest]
        })
    };
    PartStack::new(geometry.offsets.map(crop))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Half the subjects train, the other half test; one image per camera.
    #[value(name = "viper_style", alias = "viper")]
    ViperStyle,
    /// 100 of the first 200 shared subjects train; the rest of the shared
    /// pool probes against every camera-B subject not used for training.
    #[value(name = "prid_style", alias = "prid")]
    PridStyle,
}

/// Number of split repetitions: one development split plus ten test splits.
pub const SPLIT_REPEATS: usize = 11;
const PRID_SHARED_POOL: usize = 200;
const PRID_TRAIN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub protocol: Protocol,
    /// 0 is the development split, 1..=10 the test splits.
    pub repeat: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Probe,
    Gallery,
}

/// Subject-level split; probes come from the first camera, gallery entries from the second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub probe: Vec<String>,
    pub gallery: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SplitSets {
    pub train: Vec<PersonImage>,
    pub probe: Vec<PersonImage>,
    pub gallery: Vec<PersonImage>,
}

/// Orders numeric ids numerically and everything else lexicographically.
fn subject_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

fn sorted_subjects<'a>(ids: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut v: Vec<String> = ids.cloned().collect::<BTreeSet<_>>().into_iter().collect();
    v.sort_by(|a, b| subject_order(a, b));
    v
}

/// The two camera ids in sorted order.
pub fn camera_pair(dataset: &[PersonImage]) -> Result<(String, String)> {
    let cams: BTreeSet<&String> = dataset.iter().map(|i| &i.camera_id).collect();
    let mut it = cams.into_iter();
    match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), None) => Ok((a.clone(), b.clone())),
        _ => Err(Error::Protocol(format!(
            "split protocols need exactly two cameras, found {}",
            dataset.iter().map(|i| &i.camera_id).collect::<BTreeSet<_>>().len()
        ))),
    }
}

fn split_rng(spec: &SplitSpec) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(spec.seed ^ (spec.repeat as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn make_split(dataset: &[PersonImage], spec: &SplitSpec) -> Result<Split> {
    let (cam_a, cam_b) = camera_pair(dataset)?;
    let in_a: BTreeSet<&String> = dataset.iter().filter(|i| i.camera_id == cam_a).map(|i| &i.subject_id).collect();
    let in_b: BTreeSet<&String> = dataset.iter().filter(|i| i.camera_id == cam_b).map(|i| &i.subject_id).collect();
    let shared = sorted_subjects(in_a.intersection(&in_b).copied());
    let mut rng = split_rng(spec);
    match spec.protocol {
        Protocol::ViperStyle => {
            if shared.len() < 4 {
                return Err(Error::Protocol(format!(
                    "viper_style needs at least 4 subjects seen by both cameras, found {}",
                    shared.len()
                )));
            }
            let mut order = shared;
            order.shuffle(&mut rng);
            let half = order.len() / 2;
            let mut train = order[..half].to_vec();
            let mut test = order[half..].to_vec();
            train.sort_by(|a, b| subject_order(a, b));
            test.sort_by(|a, b| subject_order(a, b));
            Ok(Split {
                train,
                probe: test.clone(),
                gallery: test,
            })
        }
        Protocol::PridStyle => {
            if shared.len() < PRID_SHARED_POOL {
                return Err(Error::Protocol(format!(
                    "prid_style needs at least {PRID_SHARED_POOL} subjects seen by both cameras, found {}",
                    shared.len()
                )));
            }
            let mut pool = shared[..PRID_SHARED_POOL].to_vec();
            pool.shuffle(&mut rng);
            let mut train = pool[..PRID_TRAIN].to_vec();
            let mut probe = pool[PRID_TRAIN..].to_vec();
            train.sort_by(|a, b| subject_order(a, b));
            probe.sort_by(|a, b| subject_order(a, b));
            let train_set: HashSet<&String> = train.iter().collect();
            let gallery = sorted_subjects(in_b.iter().copied().filter(|s| !train_set.contains(s)));
            Ok(Split { train, probe, gallery })
        }
    }
}

impl Split {
    pub fn rows(&self) -> Vec<(String, Role)> {
        let mut rows = Vec::new();
        rows.extend(self.train.iter().map(|s| (s.clone(), Role::Train)));
        rows.extend(self.probe.iter().map(|s| (s.clone(), Role::Probe)));
        rows.extend(self.gallery.iter().map(|s| (s.clone(), Role::Gallery)));
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["subject_id", "role"]).map_err(err)?;
        for (subject, role) in self.rows() {
            let role = match role {
                Role::Train => "train",
                Role::Probe => "probe",
                Role::Gallery => "gallery",
            };
            w.write_record([subject.as_str(), role]).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            subject_id: String,
            role: Role,
        }
        let err = |e: csv::Error| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        let mut split = Split {
            train: Vec::new(),
            probe: Vec::new(),
            gallery: Vec::new(),
        };
        for row in r.deserialize::<Row>() {
            let row = row.map_err(err)?;
            match row.role {
                Role::Train => split.train.push(row.subject_id),
                Role::Probe => split.probe.push(row.subject_id),
                Role::Gallery => split.gallery.push(row.subject_id),
            }
        }
        Ok(split)
    }

    /// Materializes the split: every image of a training subject, plus the
    /// lowest-index first-camera image per probe and second-camera image per
    /// gallery subject.
    pub fn apply(&self, dataset: &[PersonImage]) -> Result<SplitSets> {
        let (cam_a, cam_b) = camera_pair(dataset)?;
        let train_set: HashSet<&String> = self.train.iter().collect();
        for s in self.probe.iter().chain(&self.gallery) {
            if train_set.contains(s) {
                return Err(Error::Protocol(format!("subject {s} is in both train and test roles")));
            }
        }
        let train = dataset
            .iter()
            .filter(|i| !i.mirrored && train_set.contains(&i.subject_id))
            .cloned()
            .collect();
        let first_by_camera = |camera: &str| {
            let mut m: BTreeMap<&String, &PersonImage> = BTreeMap::new();
            for img in dataset.iter().filter(|i| !i.mirrored && i.camera_id == camera) {
                m.entry(&img.subject_id)
                    .and_modify(|cur| {
                        if img.index < cur.index {
                            *cur = img;
                        }
                    })
                    .or_insert(img);
            }
            m
        };
        let a = first_by_camera(&cam_a);
        let b = first_by_camera(&cam_b);
        let pick = |ids: &[String], m: &BTreeMap<&String, &PersonImage>, cam: &str| {
            ids.iter()
                .map(|s| {
                    m.get(s).map(|&i| i.clone()).ok_or_else(|| {
                        Error::Protocol(format!("subject {s} has no image from camera {cam}"))
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(SplitSets {
            train,
            probe: pick(&self.probe, &a, &cam_a)?,
            gallery: pick(&self.gallery, &b, &cam_b)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(subject: &str, camera: &str, pixels: Tensor) -> PersonImage {
        PersonImage {
            subject_id: subject.into(),
            camera_id: camera.into(),
            index: 0,
            pixels,
            mirrored: false,
        }
    }

    fn two_camera_dataset(subjects: usize, only_b: usize) -> Vec<PersonImage> {
        let mut out = Vec::new();
        let px = Tensor::zeros(&[3, 4, 4]);
        for s in 0..subjects {
            out.push(img(&s.to_string(), "a", px.clone()));
            out.push(img(&s.to_string(), "b", px.clone()));
        }
        for s in subjects..subjects + only_b {
            out.push(img(&s.to_string(), "b", px.clone()));
        }
        out
    }

    #[test]
    fn normalization_of_mid_gray() {
        let v = normalize_pixel(128.0);
        assert!((v - (128.0 / 255.0 - 0.5) * 2.0).abs() < 1e-15);
        assert!((v - 0.00392156862745098).abs() < 1e-12);
        assert_eq!(normalize_pixel(0.0), -1.0);
        assert_eq!(normalize_pixel(255.0), 1.0);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let t = Tensor::from_fn(&[3, 5, 4], |i| i as f64 * 0.37);
        assert_eq!(resize_bilinear(&t, 5, 4).unwrap(), t);
    }

    #[test]
    fn resize_matches_hand_bilinear() {
        // 60 wide x 160 tall -> 40 x 128
        let (h, w) = (160usize, 60usize);
        let t = Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            ((y * 7 + x * 13) % 251) as f64
        });
        let out = resize_bilinear(&t, 128, 40).unwrap();
        let px = |y: usize, x: usize| t.data()[y * w + x];
        let hand = |oy: usize, ox: usize| {
            let sy = ((oy as f64 + 0.5) * 160.0 / 128.0 - 0.5).max(0.0);
            let sx = ((ox as f64 + 0.5) * 60.0 / 40.0 - 0.5).max(0.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            (px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx) * (1.0 - fy) + (px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx) * fy
        };
        for (oy, ox) in [(0, 0), (0, 39), (127, 0), (127, 39), (64, 20)] {
            assert!((out.data()[oy * 40 + ox] - hand(oy, ox)).abs() < 1e-9, "pixel ({oy},{ox})");
        }
    }

    #[test]
    fn mirror_round_trip() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| i as f64);
        let a = img("1", "a", t.clone());
        let m = mirror(&a);
        assert!(m.mirrored);
        assert_eq!(m.pixels.data()[4], t.data()[0]);
        assert_eq!(m.pixels.data()[0], t.data()[4]);
        assert_eq!(mirror(&m), a);
    }

    #[test]
    fn augmentation_doubles() {
        let ds = two_camera_dataset(316, 0);
        assert_eq!(ds.len(), 632);
        assert_eq!(augment_with_mirrors(&ds).len(), 1264);
    }

    #[test]
    fn part_geometry_for_standard_height() {
        let g = PartGeometry::for_height(128).unwrap();
        assert_eq!(g.band_height, 48);
        assert_eq!(g.offsets, [0, 40, 80]);
        let toy = PartGeometry::for_height(48).unwrap();
        assert_eq!(toy.band_height % 4, 0);
        assert_eq!(toy.offsets[2] + toy.band_height, 48);
    }

    #[test]
    fn crop_covers_image_and_commutes_with_mirror() {
        let g = PartGeometry::for_height(128).unwrap();
        let t = Tensor::from_fn(&[3, 128, 8], |i| ((i / 8) % 128) as f64 + (i % 8) as f64 * 0.01);
        let a = img("1", "a", t);
        let parts = crop_parts(&a, &g).unwrap();
        let mut covered = [false; 128];
        for (p, off) in g.offsets.iter().enumerate() {
            for r in 0..48 {
                covered[off + r] = true;
            }
            assert_eq!(parts.parts[p].data()[0].floor() as usize, *off);
        }
        assert!(covered.iter().all(|&c| c));
        assert_ne!(parts.parts[0], parts.parts[1]);
        assert_ne!(parts.parts[1], parts.parts[2]);
        let mirrored_parts = crop_parts(&mirror(&a), &g).unwrap();
        let m0 = mirror(&img("1", "a", parts.parts[0].clone()));
        assert_eq!(mirrored_parts.parts[0], m0.pixels);
        assert!(crop_parts(&img("1", "a", Tensor::zeros(&[3, 100, 8])), &g).is_err());
    }

    #[test]
    fn viper_split_halves() {
        let ds = two_camera_dataset(632, 0);
        let spec = SplitSpec {
            protocol: Protocol::ViperStyle,
            repeat: 0,
            seed: 7,
        };
        let split = make_split(&ds, &spec).unwrap();
        assert_eq!((split.train.len(), split.probe.len(), split.gallery.len()), (316, 316, 316));
        let train: HashSet<_> = split.train.iter().collect();
        assert!(split.probe.iter().all(|s| !train.contains(s)));
        assert_eq!(make_split(&ds, &spec).unwrap(), split);
        let other = make_split(&ds, &SplitSpec { repeat: 1, ..spec }).unwrap();
        assert_ne!(other, split);
        let sets = split.apply(&ds).unwrap();
        assert_eq!(sets.train.len(), 632);
        assert!(sets.probe.iter().all(|i| i.camera_id == "a"));
        assert!(sets.gallery.iter().all(|i| i.camera_id == "b"));
    }

    #[test]
    fn prid_split_counts() {
        let ds = two_camera_dataset(200, 549);
        let split = make_split(
            &ds,
            &SplitSpec {
                protocol: Protocol::PridStyle,
                repeat: 3,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(split.train.len(), 100);
        assert_eq!(split.probe.len(), 100);
        assert_eq!(split.gallery.len(), 649);
        let sets = split.apply(&ds).unwrap();
        assert_eq!(sets.train.len(), 200);
        let too_small = two_camera_dataset(150, 10);
        let err = make_split(
            &too_small,
            &SplitSpec {
                protocol: Protocol::PridStyle,
                repeat: 0,
                seed: 1,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Protocol(ref m) if m.contains("150")));
    }

    #[test]
    fn split_csv_round_trip() {
        let ds = two_camera_dataset(20, 0);
        let split = make_split(
            &ds,
            &SplitSpec {
                protocol: Protocol::ViperStyle,
                repeat: 2,
                seed: 5,
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        split.write_csv(&path).unwrap();
        assert_eq!(Split::read_csv(&path).unwrap(), split);
    }
}
