//! TUM RGB-D directory layout.
//!
//! ```text
//! dir/
//!   rgb/*.png          8-bit color
//!   depth/*.png        16-bit, meters × 5000, 0 = invalid
//!   associations.txt   "t path t path" per frame (rgb/depth in either order)
//!   groundtruth.txt    optional, "t tx ty tz qx qy qz qw"
//!   intrinsics.txt     optional, "fx fy cx cy width height"
//! ```

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};

use super::{BenchError, Trajectory};
use crate::geometry::{Image, Intrinsics, RgbdFrame};

pub const DEPTH_SCALE: f64 = 5000.0;

const ASSOCIATION_NAMES: [&str; 3] = ["associations.txt", "associate.txt", "association.txt"];

/// ITU-R 601 luma in `[0, 1]`, computed in integers so a color image
/// always maps to the same intensity.
pub fn intensity_from_rgb(c: [u8; 3]) -> f32 {
    (299 * c[0] as u32 + 587 * c[1] as u32 + 114 * c[2] as u32) as f32 / 255_000.0
}

/// Depth as stored in a 16-bit PNG and read back.
pub fn quantize_depth(d: f32) -> f32 {
    encode_depth(d) as f32 / DEPTH_SCALE as f32
}

fn encode_depth(d: f32) -> u16 {
    let v = (d as f64 * DEPTH_SCALE).round();
    if d.is_finite() && v > 0.0 && v <= u16::MAX as f64 {
        v as u16
    } else {
        0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    timestamp: f64,
    rgb: PathBuf,
    depth: PathBuf,
}

/// A lazily loaded sequence.
#[derive(Clone, Debug)]
pub struct TumSequence {
    pub dir: PathBuf,
    pub intrinsics: Intrinsics,
    pub groundtruth: Option<Trajectory>,
    entries: Vec<Entry>,
}

impl TumSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.timestamp).collect()
    }

    /// Loads frame `i`.
    pub fn frame(&self, i: usize) -> Result<RgbdFrame, BenchError> {
        let e = &self.entries[i];
        let k = self.intrinsics;
        let img_err = |p: &Path, e: image::ImageError| BenchError::Image(format!("{}: {e}", p.display()));
        let depth_img = image::open(&e.depth).map_err(|x| img_err(&e.depth, x))?.into_luma16();
        let rgb_img = image::open(&e.rgb).map_err(|x| img_err(&e.rgb, x))?.into_rgb8();
        for (what, (w, h)) in [("depth", depth_img.dimensions()), ("rgb", rgb_img.dimensions())] {
            if w as usize != k.width || h as usize != k.height {
                return Err(BenchError::Image(format!("{what} image is {w}x{h}, intrinsics are {}x{}", k.width, k.height)));
            }
        }
        let depth = Image::from_fn(k.width, k.height, |u, v| depth_img.get_pixel(u as u32, v as u32).0[0] as f32 / DEPTH_SCALE as f32);
        let color: Vec<[u8; 3]> = rgb_img.pixels().map(|p| p.0).collect();
        let intensity = Image::from_fn(k.width, k.height, |u, v| intensity_from_rgb(color[v * k.width + u]));
        Ok(RgbdFrame {
            intensity,
            depth,
            color: Some(color),
            intrinsics: k,
            timestamp: e.timestamp,
        })
    }

    /// Frames in timestamp order; unreadable images are skipped with a
    /// warning.
    pub fn frames(&self) -> impl Iterator<Item = RgbdFrame> + '_ {
        (0..self.len()).filter_map(move |i| match self.frame(i) {
            Ok(f) => Some(f),
            Err(e) => {
                log::warn!("skipping frame {i}: {e}");
                None
            }
        })
    }
}

fn parse_intrinsics(text: &str, path: &str) -> Result<Intrinsics, BenchError> {
    let line = text
        .lines()
        .map(str::trim)
        .enumerate()
        .find(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| BenchError::Parse {
            path: path.into(),
            line: 1,
            message: "no intrinsics line".into(),
        })?;
    let err = |message: String| BenchError::Parse {
        path: path.into(),
        line: line.0 + 1,
        message,
    };
    let w: Vec<&str> = line.1.split_whitespace().collect();
    if w.len() != 6 {
        return Err(err(format!("expected 'fx fy cx cy width height', found {} fields", w.len())));
    }
    let f = |s: &str| s.parse::<f64>().map_err(|_| err(format!("not a number: '{s}'")));
    let u = |s: &str| s.parse::<usize>().map_err(|_| err(format!("not an integer: '{s}'")));
    Intrinsics::new(f(w[0])?, f(w[1])?, f(w[2])?, f(w[3])?, u(w[4])?, u(w[5])?).map_err(|e| err(e.to_string()))
}

/// Opens a TUM-layout directory. Without `intrinsics.txt` the standard
/// 525/319.5/239.5 VGA camera is assumed.
pub fn load_tum_sequence(dir: &Path) -> Result<TumSequence, BenchError> {
    let assoc = ASSOCIATION_NAMES
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| BenchError::MissingAssociations(dir.display().to_string()))?;
    let source = assoc.display().to_string();
    let text = std::fs::read_to_string(&assoc)?;
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| BenchError::Parse {
            path: source.clone(),
            line: i + 1,
            message,
        };
        let w: Vec<&str> = line.split_whitespace().collect();
        if w.len() != 4 {
            return Err(err(format!("expected 't path t path', found {} fields", w.len())));
        }
        let t0: f64 = w[0].parse().map_err(|_| err(format!("bad timestamp '{}'", w[0])))?;
        let t1: f64 = w[2].parse().map_err(|_| err(format!("bad timestamp '{}'", w[2])))?;
        let (rgb, depth, t) = if w[1].contains("depth") {
            (w[3], w[1], t0)
        } else {
            (w[1], w[3], t1)
        };
        entries.push(Entry {
            timestamp: t,
            rgb: dir.join(rgb),
            depth: dir.join(depth),
        });
    }
    entries.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let intr_path = dir.join("intrinsics.txt");
    let intrinsics = if intr_path.is_file() {
        parse_intrinsics(&std::fs::read_to_string(&intr_path)?, &intr_path.display().to_string())?
    } else {
        log::warn!("{} missing; assuming the default 640x480 camera", intr_path.display());
        Intrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).expect("default intrinsics are valid")
    };
    let gt_path = dir.join("groundtruth.txt");
    let groundtruth = if gt_path.is_file() { Some(Trajectory::load(&gt_path)?) } else { None };
    Ok(TumSequence {
        dir: dir.to_path_buf(),
        intrinsics,
        groundtruth,
        entries,
    })
}

/// Writes frames (and optional ground truth) in TUM layout. Depth is
/// quantized to 1/5000 m; frames without color are stored as gray.
pub fn write_tum_sequence(dir: &Path, frames: &[RgbdFrame], groundtruth: Option<&Trajectory>) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir.join("rgb"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    let mut assoc = String::from("# rgb_timestamp rgb_file depth_timestamp depth_file\n");
    for (i, f) in frames.iter().enumerate() {
        let k = &f.intrinsics;
        let name = format!("{i:06}.png");
        let depth: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(k.width as u32, k.height as u32, |u, v| Luma([encode_depth(f.depth.get(u as usize, v as usize))]));
        depth
            .save(dir.join("depth").join(&name))
            .map_err(|e| BenchError::Image(e.to_string()))?;
        let rgb: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(k.width as u32, k.height as u32, |u, v| {
            let idx = v as usize * k.width + u as usize;
            match &f.color {
                Some(c) => Rgb(c[idx]),
                None => {
                    let g = (f.intensity.data[idx].clamp(0.0, 1.0) * 255.0).round() as u8;
                    Rgb([g, g, g])
                }
            }
        });
        rgb.save(dir.join("rgb").join(&name)).map_err(|e| BenchError::Image(e.to_string()))?;
        assoc += &format!("{} rgb/{name} {} depth/{name}\n", f.timestamp, f.timestamp);
    }
    std::fs::write(dir.join("associations.txt"), assoc)?;
    if let Some(k) = frames.first().map(|f| f.intrinsics) {
        std::fs::write(
            dir.join("intrinsics.txt"),
            format!("# fx fy cx cy width height\n{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
        )?;
    }
    if let Some(gt) = groundtruth {
        gt.save(&dir.join("groundtruth.txt"))?;
    }
    Ok(())
}
