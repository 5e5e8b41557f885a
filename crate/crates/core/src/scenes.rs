//! Seeded synthetic scenes and their line-oriented text format.
//!
//! File layout (one record per line, fields separated by single spaces):
//!
//! ```text
//! mal-dataset 1
//! classes <K>
//! image <width> <height>
//! noise <noise_level>
//! scenes <N>
//! train <number of leading scenes in the train split>
//! scene <id> <seed> <n_objects> [<class_id> <x1> <y1> <x2> <y2>]*
//! ...
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so a load of a
//! saved dataset reproduces it exactly.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub seed: u64,
    pub objects: Vec<GroundTruthObject>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scene_count: usize,
    pub class_count: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object size as `sqrt(width * height)`, pixels.
    pub size_min: f64,
    pub size_max: f64,
    /// Elongation range (`max(w/h, h/w)`) of regular objects.
    pub aspect_min: f64,
    pub aspect_max: f64,
    /// Fraction of objects drawn from the slender elongation range.
    pub slender_fraction: f64,
    pub slender_aspect_min: f64,
    pub slender_aspect_max: f64,
    pub max_pair_iou: f64,
    pub min_area: f64,
    pub noise_level: f64,
    pub seed: u64,
    /// Placement attempts per object before giving up.
    pub retry_budget: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene_count: 10,
            class_count: 3,
            image_width: 96,
            image_height: 96,
            objects_min: 1,
            objects_max: 3,
            size_min: 20.0,
            size_max: 56.0,
            aspect_min: 1.0,
            aspect_max: 2.0,
            slender_fraction: 0.3,
            slender_aspect_min: 3.0,
            slender_aspect_max: 8.0,
            max_pair_iou: 0.2,
            min_area: 64.0,
            noise_level: 0.1,
            seed: 0,
            retry_budget: 200,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("dataset: {m}")));
        if self.class_count == 0 {
            return fail("class_count must be >= 1".into());
        }
        if self.image_width == 0 || self.image_height == 0 {
            return fail("image dimensions must be positive".into());
        }
        if self.objects_min > self.objects_max {
            return fail(format!(
                "objects_min {} > objects_max {}",
                self.objects_min, self.objects_max
            ));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max.is_finite()) {
            return fail(format!("size range [{}, {}]", self.size_min, self.size_max));
        }
        if !(self.aspect_min >= 1.0 && self.aspect_min <= self.aspect_max && self.aspect_max.is_finite()) {
            return fail(format!("aspect range [{}, {}]", self.aspect_min, self.aspect_max));
        }
        if !(0.0..=1.0).contains(&self.slender_fraction) {
            return fail(format!("slender_fraction {}", self.slender_fraction));
        }
        if self.slender_fraction > 0.0
            && !(self.slender_aspect_min >= 1.0
                && self.slender_aspect_min <= self.slender_aspect_max
                && self.slender_aspect_max.is_finite())
        {
            return fail(format!(
                "slender aspect range [{}, {}]",
                self.slender_aspect_min, self.slender_aspect_max
            ));
        }
        if !(0.0..=1.0).contains(&self.max_pair_iou) {
            return fail(format!("max_pair_iou {}", self.max_pair_iou));
        }
        if !(self.min_area >= 0.0 && self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return fail("min_area and noise_level must be non-negative".into());
        }
        if self.retry_budget == 0 {
            return fail("retry_budget must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "all" => Ok(Split::All),
            _ => Err(Error::InvalidArgument(format!("unknown split '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_count: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub noise_level: f64,
    pub scenes: Vec<Scene>,
    /// The first `train_count` scenes form the train split; the rest are validation.
    pub train_count: usize,
}

/// Train size for `n` scenes under the 80/20 split.
pub fn train_count_for(n: usize) -> usize {
    (4 * n).div_ceil(5)
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.scenes[..self.train_count],
            Split::Val => &self.scenes[self.train_count..],
            Split::All => &self.scenes,
        }
    }
}

/// `index`-th output (1-based) of a splitmix64 stream started at `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo.ln()..hi.ln()).exp()
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

#[derive(Debug, Clone, Copy)]
enum Reject {
    DoesNotFit,
    Area,
    Overlap,
}

fn generate_scene(cfg: &DatasetConfig, id: usize) -> Result<Scene> {
    let seed = derive_seed(cfg.seed, id as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let (iw, ih) = (cfg.image_width as f64, cfg.image_height as f64);
    let mut objects: Vec<GroundTruthObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut last = Reject::DoesNotFit;
        let mut placed = None;
        for _ in 0..cfg.retry_budget {
            let class_id = rng.random_range(0..cfg.class_count);
            let slender = cfg.slender_fraction > 0.0 && rng.random_bool(cfg.slender_fraction);
            let e = if slender {
                log_uniform(&mut rng, cfg.slender_aspect_min, cfg.slender_aspect_max)
            } else {
                log_uniform(&mut rng, cfg.aspect_min, cfg.aspect_max)
            };
            let ratio = if rng.random_bool(0.5) { e } else { 1.0 / e };
            // largest size whose box still fits in the image
            let fit = (iw / ratio.sqrt()).min(ih * ratio.sqrt());
            let hi = cfg.size_max.min(fit);
            if hi < cfg.size_min {
                last = Reject::DoesNotFit;
                continue;
            }
            let size = uniform(&mut rng, cfg.size_min, hi);
            let (w, h) = ((size * ratio.sqrt()).min(iw), (size / ratio.sqrt()).min(ih));
            let x1 = uniform(&mut rng, 0.0, iw - w);
            let y1 = uniform(&mut rng, 0.0, ih - h);
            let bbox = BBox::new(x1, y1, (x1 + w).min(iw), (y1 + h).min(ih))?;
            if bbox.area() < cfg.min_area {
                last = Reject::Area;
                continue;
            }
            if objects.iter().any(|o| o.bbox.iou(&bbox) > cfg.max_pair_iou) {
                last = Reject::Overlap;
                continue;
            }
            placed = Some(GroundTruthObject { class_id, bbox });
            break;
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                let which = match last {
                    Reject::DoesNotFit => "size range does not fit the image",
                    Reject::Area => "min_area",
                    Reject::Overlap => "max_pair_iou",
                };
                return Err(Error::Infeasible(format!(
                    "scene {id}: no placement within {} attempts ({which})",
                    cfg.retry_budget
                )));
            }
        }
    }
    Ok(Scene {
        id,
        image_width: cfg.image_width,
        image_height: cfg.image_height,
        seed,
        objects,
    })
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let scenes = (0..cfg.scene_count)
        .into_par_iter()
        .map(|i| generate_scene(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        class_count: cfg.class_count,
        image_width: cfg.image_width,
        image_height: cfg.image_height,
        noise_level: cfg.noise_level,
        train_count: train_count_for(scenes.len()),
        scenes,
    })
}

pub fn dataset_to_string(d: &Dataset) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mal-dataset {FORMAT_VERSION}");
    let _ = writeln!(s, "classes {}", d.class_count);
    let _ = writeln!(s, "image {} {}", d.image_width, d.image_height);
    let _ = writeln!(s, "noise {}", d.noise_level);
    let _ = writeln!(s, "scenes {}", d.scenes.len());
    let _ = writeln!(s, "train {}", d.train_count);
    for sc in &d.scenes {
        let _ = write!(s, "scene {} {} {}", sc.id, sc.seed, sc.objects.len());
        for o in &sc.objects {
            let b = &o.bbox;
            let _ = write!(s, " {} {} {} {} {}", o.class_id, b.x1, b.y1, b.x2, b.y2);
        }
        s.push('\n');
    }
    s
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_string(d)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l.split(' ').collect()))
            }
            None => Err(Error::Parse {
                line: self.last + 1,
                message: format!("unexpected end of file, expected {what}"),
            }),
        }
    }

    fn header(&mut self, key: &str, n: usize) -> Result<(usize, Vec<&'a str>)> {
        let (line, f) = self.next_line(key)?;
        if f.len() != n + 1 || f[0] != key {
            return Err(Error::Parse {
                line,
                message: format!("expected '{key}' followed by {n} value(s)"),
            });
        }
        Ok((line, f[1..].to_vec()))
    }
}

fn field<T: std::str::FromStr>(line: usize, s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad {what} '{s}'"),
    })
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (line, v) = lines.header("mal-dataset", 1)?;
    let version: u32 = field(line, v[0], "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            line,
            message: format!("unsupported format version {version}"),
        });
    }
    let (line, v) = lines.header("classes", 1)?;
    let class_count: usize = field(line, v[0], "class count")?;
    let (line, v) = lines.header("image", 2)?;
    let image_width: u32 = field(line, v[0], "image width")?;
    let image_height: u32 = field(line, v[1], "image height")?;
    let (line, v) = lines.header("noise", 1)?;
    let noise_level: f64 = field(line, v[0], "noise level")?;
    let (line, v) = lines.header("scenes", 1)?;
    let n: usize = field(line, v[0], "scene count")?;
    let (line, v) = lines.header("train", 1)?;
    let train_count: usize = field(line, v[0], "train count")?;
    if train_count > n {
        return Err(Error::Parse {
            line,
            message: format!("train count {train_count} exceeds scene count {n}"),
        });
    }

    let (iw, ih) = (image_width as f64, image_height as f64);
    let mut ids = HashSet::new();
    let mut scenes = Vec::with_capacity(n);
    for _ in 0..n {
        let (line, f) = lines.next_line("scene record")?;
        if f.len() < 4 || f[0] != "scene" {
            return Err(Error::Parse {
                line,
                message: "expected 'scene <id> <seed> <n_objects> ...'".into(),
            });
        }
        let id: usize = field(line, f[1], "scene id")?;
        let seed: u64 = field(line, f[2], "seed")?;
        let count: usize = field(line, f[3], "object count")?;
        if f.len() != 4 + 5 * count {
            return Err(Error::Parse {
                line,
                message: format!("expected {} object fields, found {}", 5 * count, f.len() - 4),
            });
        }
        if !ids.insert(id) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate scene id {id}"),
            });
        }
        let mut objects = Vec::with_capacity(count);
        for o in f[4..].chunks(5) {
            let class_id: usize = field(line, o[0], "class id")?;
            if class_id >= class_count {
                return Err(Error::Parse {
                    line,
                    message: format!("class id {class_id} >= class count {class_count}"),
                });
            }
            let c: [f64; 4] = [
                field(line, o[1], "x1")?,
                field(line, o[2], "y1")?,
                field(line, o[3], "x2")?,
                field(line, o[4], "y2")?,
            ];
            let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > iw || bbox.y2 > ih {
                return Err(Error::Parse {
                    line,
                    message: "object box outside image bounds".into(),
                });
            }
            objects.push(GroundTruthObject { class_id, bbox });
        }
        scenes.push(Scene {
            id,
            image_width,
            image_height,
            seed,
            objects,
        });
    }
    if let Some((i, l)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Parse {
            line: i + 1,
            message: format!("trailing content '{l}'"),
        });
    }
    Ok(Dataset {
        class_count,
        image_width,
        image_height,
        noise_level,
        scenes,
        train_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = DatasetConfig { seed: 7, ..Default::default() };
        assert_eq!(generate_dataset(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
        let other = DatasetConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate_dataset(&cfg).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn square_objects() {
        let cfg = DatasetConfig {
            aspect_min: 1.0,
            aspect_max: 1.0,
            slender_fraction: 0.0,
            scene_count: 30,
            ..Default::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        for o in d.scenes.iter().flat_map(|s| &s.objects) {
            assert!((o.bbox.width() - o.bbox.height()).abs() < 1e-9);
        }
    }

    #[test]
    fn disjoint_when_no_overlap_allowed() {
        let cfg = DatasetConfig {
            max_pair_iou: 0.0,
            objects_min: 3,
            objects_max: 4,
            size_min: 10.0,
            size_max: 24.0,
            scene_count: 40,
            ..Default::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        for s in &d.scenes {
            for (i, a) in s.objects.iter().enumerate() {
                for b in &s.objects[i + 1..] {
                    assert_eq!(a.bbox.intersection(&b.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn infeasible_is_reported() {
        let cfg = DatasetConfig {
            size_min: 200.0,
            size_max: 300.0,
            ..Default::default()
        };
        let err = generate_dataset(&cfg).unwrap_err();
        assert!(matches!(err, Error::Infeasible(ref m) if m.contains("does not fit")), "{err}");
        let crowded = DatasetConfig {
            objects_min: 12,
            objects_max: 12,
            size_min: 50.0,
            size_max: 56.0,
            max_pair_iou: 0.0,
            retry_budget: 20,
            ..Default::default()
        };
        assert!(matches!(
            generate_dataset(&crowded),
            Err(Error::Infeasible(ref m)) if m.contains("max_pair_iou")
        ));
    }

    #[test]
    fn split_sizes() {
        assert_eq!(train_count_for(250), 200);
        assert_eq!(train_count_for(10), 8);
        assert_eq!(train_count_for(1), 1);
        assert_eq!(train_count_for(0), 0);
        let d = generate_dataset(&DatasetConfig::default()).unwrap();
        assert_eq!(d.split(Split::Train).len() + d.split(Split::Val).len(), d.scenes.len());
        assert_eq!(d.split(Split::Val)[0].id, d.train_count);
    }

    #[test]
    fn round_trip() {
        let empty = generate_dataset(&DatasetConfig { scene_count: 0, ..Default::default() }).unwrap();
        assert_eq!(parse_dataset(&dataset_to_string(&empty)).unwrap(), empty);
        let d = generate_dataset(&DatasetConfig { scene_count: 100, seed: 3, ..Default::default() }).unwrap();
        assert_eq!(parse_dataset(&dataset_to_string(&d)).unwrap(), d);
    }

    #[test]
    fn truncated_file_reports_line() {
        let d = generate_dataset(&DatasetConfig { scene_count: 5, ..Default::default() }).unwrap();
        let text = dataset_to_string(&d);
        // header is 6 lines; cut the 4th scene record (line 10) mid-way
        let lines: Vec<&str> = text.lines().collect();
        let mut cut = lines[..9].join("\n");
        cut.push('\n');
        let fields: Vec<&str> = lines[9].split(' ').collect();
        cut.push_str(&fields[..fields.len() - 2].join(" "));
        match parse_dataset(&cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 10),
            other => panic!("{other:?}"),
        }
        // dropping whole records fails at the first missing line
        let short = lines[..8].join("\n");
        match parse_dataset(&short) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_records() {
        let base = "mal-dataset 1\nclasses 2\nimage 10 10\nnoise 0\nscenes 1\ntrain 1\n";
        assert!(parse_dataset(&format!("{base}scene 0 1 1 5 0 0 1 1\n")).is_err());
        assert!(parse_dataset(&format!("{base}scene 0 1 1 0 0 0 11 1\n")).is_err());
        assert!(parse_dataset(&format!("{base}scene 0 1 1 0 2 0 1 1\n")).is_err());
        assert!(parse_dataset(&format!("{base}scene 0 1 1 0 0 0 1 1\n")).is_ok());
        let dup = "mal-dataset 1\nclasses 2\nimage 10 10\nnoise 0\nscenes 2\ntrain 2\nscene 0 1 0\nscene 0 2 0\n";
        assert!(matches!(parse_dataset(dup), Err(Error::Parse { line: 8, .. })));
    }
}
