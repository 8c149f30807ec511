//! Synthetic tubule scenes, image and mask files, manifests and fold splits.
//!
//! A scene is a set of annuli (epithelium around a lumen) on interstitial
//! background. Masks come in three flavours:
//!
//! * `mask2`: 1 on epithelium, 0 elsewhere (lumen included);
//! * `mask3`: as `mask2`, but the outermost 2 px of each tubule, and the
//!   contact line between touching tubules, are class 2;
//! * `instances`: one id per tubule, so touching pairs that merge in `mask2`
//!   stay distinct.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::{InstanceMap, LabelMask};
use crate::postprocess::label_components;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Palette {
    /// Magenta epithelium on pale pink interstitium.
    #[default]
    PasLike,
    /// Purple epithelium on pink interstitium.
    HeLike,
}

impl FromStr for Palette {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pas" | "pas-like" => Ok(Palette::PasLike),
            "he" | "he-like" => Ok(Palette::HeLike),
            other => Err(Error::Config(format!("unknown palette `{other}` (pas-like|he-like)"))),
        }
    }
}

impl fmt::Display for Palette {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Palette::PasLike => "pas-like",
            Palette::HeLike => "he-like",
        })
    }
}

/// Mean RGB of each tissue region plus per-scene jitter of those means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaletteColors {
    pub background: [f64; 3],
    pub epithelium: [f64; 3],
    pub lumen: [f64; 3],
    /// Nuclei and interstitial cell dots.
    pub nuclei: [f64; 3],
    pub jitter: f64,
}

impl Palette {
    pub fn colors(self) -> PaletteColors {
        match self {
            Palette::PasLike => PaletteColors {
                background: [236.0, 206.0, 222.0],
                epithelium: [176.0, 72.0, 148.0],
                lumen: [246.0, 236.0, 242.0],
                nuclei: [96.0, 40.0, 110.0],
                jitter: 10.0,
            },
            Palette::HeLike => PaletteColors {
                background: [242.0, 192.0, 204.0],
                epithelium: [128.0, 78.0, 156.0],
                lumen: [250.0, 242.0, 246.0],
                nuclei: [60.0, 40.0, 120.0],
                jitter: 10.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of the number of tubules.
    pub tubules: (usize, usize),
    /// Outer radius range in pixels.
    pub outer_radius: (f64, f64),
    /// Lumen radius as a fraction of the outer radius.
    pub lumen_ratio: (f64, f64),
    /// Chance that a tubule is placed against an earlier one.
    pub touching_probability: f64,
    pub palette: Palette,
    /// Standard deviation of per-pixel intensity noise (8-bit units).
    pub texture: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            tubules: (2, 5),
            outer_radius: (11.0, 20.0),
            lumen_ratio: (0.35, 0.6),
            touching_probability: 0.3,
            palette: Palette::PasLike,
            texture: 8.0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(32) || !self.height.is_multiple_of(32) {
            return bad(format!("scene {}x{} must be a positive multiple of 32", self.width, self.height));
        }
        if self.tubules.0 > self.tubules.1 {
            return bad(format!("tubule count range {:?} is empty", self.tubules));
        }
        let (rlo, rhi) = self.outer_radius;
        if !(rlo >= 3.0 && rlo <= rhi && 2.0 * rhi + 4.0 <= self.width.min(self.height) as f64) {
            return bad(format!(
                "outer radius range {:?} does not fit a {}x{} scene",
                self.outer_radius, self.width, self.height
            ));
        }
        let (llo, lhi) = self.lumen_ratio;
        if !(llo > 0.0 && llo <= lhi && lhi < 1.0) {
            return bad(format!("lumen ratio range {:?} must lie in (0, 1)", self.lumen_ratio));
        }
        if !(0.0..=1.0).contains(&self.touching_probability) {
            return bad(format!("touching probability {} outside [0, 1]", self.touching_probability));
        }
        if !(self.texture >= 0.0) {
            return bad("texture amplitude must be non-negative".into());
        }
        Ok(())
    }
}

/// One generated record.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub mask2: LabelMask,
    pub mask3: LabelMask,
    pub instances: InstanceMap,
}

#[derive(Debug, Clone, Copy)]
struct Tubule {
    x: f64,
    y: f64,
    r: f64,
    lumen: f64,
}

const PLACEMENT_TRIES: usize = 400;
/// Free space kept between tubules that are not meant to touch.
const GAP: f64 = 3.0;
const BORDER_WIDTH: f64 = 2.0;

fn place_tubules<R: Rng>(spec: &SyntheticSceneSpec, rng: &mut R) -> Result<Vec<Tubule>> {
    let k = rng.random_range(spec.tubules.0..=spec.tubules.1);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut placed: Vec<Tubule> = Vec::with_capacity(k);
    for n in 0..k {
        let touch = n > 0 && rng.random::<f64>() < spec.touching_probability;
        let mut ok = None;
        for _ in 0..PLACEMENT_TRIES {
            let r = rng.random_range(spec.outer_radius.0..=spec.outer_radius.1);
            let lumen = r * rng.random_range(spec.lumen_ratio.0..=spec.lumen_ratio.1);
            let (x, y, partner) = if touch {
                let p = rng.random_range(0..placed.len());
                let q = placed[p];
                let d = (q.r + r) * rng.random_range(0.78..0.92);
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                (q.x + d * a.cos(), q.y + d * a.sin(), Some(p))
            } else {
                (rng.random_range(r + 1.0..=w - r - 2.0), rng.random_range(r + 1.0..=h - r - 2.0), None)
            };
            let t = Tubule { x, y, r, lumen };
            if x < r + 1.0 || y < r + 1.0 || x > w - r - 2.0 || y > h - r - 2.0 {
                continue;
            }
            let fits = placed.iter().enumerate().all(|(i, q)| {
                let d = ((q.x - x).powi(2) + (q.y - y).powi(2)).sqrt();
                if Some(i) == partner {
                    // overlap the rims but keep each lumen clear of the other tubule
                    d >= q.r + lumen + 1.0 && d >= r + q.lumen + 1.0
                } else {
                    d >= q.r + r + GAP
                }
            });
            if fits {
                ok = Some(t);
                break;
            }
        }
        match ok {
            Some(t) => placed.push(t),
            None => {
                return Err(Error::Placement(format!(
                    "could not place tubule {} of {k} ({}) with radius in {:?} and {GAP} px spacing in a {}x{} scene after {PLACEMENT_TRIES} tries",
                    n + 1,
                    if touch { "touching" } else { "isolated" },
                    spec.outer_radius,
                    spec.width,
                    spec.height
                )))
            }
        }
    }
    Ok(placed)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Region {
    Outside,
    Lumen,
    Epithelium(u32),
}

/// Owner of a pixel among the tubules covering it: smallest power distance
/// `d^2 - r^2`, which splits touching pairs along their radical line.
fn rasterize(tubules: &[Tubule], w: usize, h: usize) -> Vec<Region> {
    (0..w * h)
        .map(|i| {
            let (px, py) = ((i % w) as f64, (i / w) as f64);
            let mut best: Option<(f64, usize, f64)> = None;
            for (k, t) in tubules.iter().enumerate() {
                let d2 = (px - t.x).powi(2) + (py - t.y).powi(2);
                if d2 <= t.r * t.r {
                    let power = d2 - t.r * t.r;
                    if best.is_none_or(|(bp, _, _)| power < bp) {
                        best = Some((power, k, d2));
                    }
                }
            }
            match best {
                None => Region::Outside,
                Some((_, k, d2)) if d2 <= tubules[k].lumen.powi(2) => Region::Lumen,
                Some((_, k, _)) => Region::Epithelium(k as u32 + 1),
            }
        })
        .collect()
}

pub fn generate_scene(spec: &SyntheticSceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let tubules = place_tubules(spec, &mut rng)?;
    let regions = rasterize(&tubules, w, h);

    // touching tubules must merge in the 2-class mask
    let epi: Vec<bool> = regions.iter().map(|r| matches!(r, Region::Epithelium(_))).collect();
    let (components, _) = label_components(&epi, w, h);
    let mut component_of = vec![0u32; tubules.len()];
    for (i, r) in regions.iter().enumerate() {
        if let Region::Epithelium(k) = r {
            let c = &mut component_of[*k as usize - 1];
            if *c != 0 && *c != components[i] {
                return Err(Error::Placement(format!("tubule {k} rasterized into disconnected pieces")));
            }
            *c = components[i];
        }
    }

    let ids: Vec<u32> = regions.iter().map(|r| if let Region::Epithelium(k) = r { *k } else { 0 }).collect();
    let instances = InstanceMap::canonical(w, h, &ids)?;
    let mask2 = LabelMask::new(w, h, epi.iter().map(|&e| e as u8).collect())?;

    // border: epithelium within 2 px of the outside or of another tubule
    let reach = BORDER_WIDTH.ceil() as isize;
    let mut mask3 = mask2.clone();
    for y in 0..h {
        for x in 0..w {
            let Region::Epithelium(k) = regions[y * w + x] else { continue };
            let mut border = false;
            'scan: for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if ((dx * dx + dy * dy) as f64) > BORDER_WIDTH * BORDER_WIDTH {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    let other = if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        Region::Outside
                    } else {
                        regions[ny as usize * w + nx as usize]
                    };
                    if other == Region::Outside || matches!(other, Region::Epithelium(j) if j != k) {
                        border = true;
                        break 'scan;
                    }
                }
            }
            if border {
                mask3.set(x, y, 2);
            }
        }
    }

    let image = paint(spec, &tubules, &regions, &mut rng);
    Ok(Scene { image, mask2, mask3, instances })
}

fn paint<R: Rng>(spec: &SyntheticSceneSpec, tubules: &[Tubule], regions: &[Region], rng: &mut R) -> RgbImage {
    let (w, h) = (spec.width, spec.height);
    let colors = spec.palette.colors();
    let jitter = |c: [f64; 3], rng: &mut R| c.map(|v| v + rng.random_range(-colors.jitter..=colors.jitter));
    let background = jitter(colors.background, rng);
    let lumen = jitter(colors.lumen, rng);
    let nuclei = jitter(colors.nuclei, rng);
    let epithelium: Vec<[f64; 3]> = tubules.iter().map(|_| jitter(colors.epithelium, rng)).collect();

    // nuclei: dense in epithelium, sparse interstitial cells
    let mut dots: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..(w * h) / 25 {
        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        let keep = match regions[y * w + x] {
            Region::Epithelium(_) => true,
            Region::Outside => rng.random::<f64>() < 0.08,
            Region::Lumen => false,
        };
        if keep {
            dots.push((x as f64, y as f64, rng.random_range(1.0..2.2)));
        }
    }
    let mut dot_mask = vec![0.0f64; w * h];
    for &(cx, cy, r) in &dots {
        let reach = r.ceil() as isize + 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (cx as isize + dx, cy as isize + dy);
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let d = ((dx * dx + dy * dy) as f64).sqrt();
                let a = (r + 0.5 - d).clamp(0.0, 1.0) * 0.8;
                let i = y as usize * w + x as usize;
                dot_mask[i] = dot_mask[i].max(a);
            }
        }
    }

    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let strength = rng.random_range(0.0..0.15);
    let noise = Normal::new(0.0, spec.texture.max(1e-9)).expect("finite texture");
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let (x, y) = ((i % w) as f64 / w as f64 - 0.5, (i / w) as f64 / h as f64 - 0.5);
        let light = 1.0 + strength * (x * angle.cos() + y * angle.sin());
        let base = match regions[i] {
            Region::Outside => background,
            Region::Lumen => lumen,
            Region::Epithelium(k) => epithelium[k as usize - 1],
        };
        let a = dot_mask[i];
        let grain = if spec.texture > 0.0 { noise.sample(rng) } else { 0.0 };
        px.0 = std::array::from_fn(|c| {
            let v = (base[c] * (1.0 - a) + nuclei[c] * a) * light + grain;
            v.round().clamp(0.0, 255.0) as u8
        });
    }
    img
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| Error::format(path, "not a file path"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode_png(path: &Path, img: &DynamicImage) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| Error::Image { path: path.into(), source: e })?;
    write_atomic(path, buf.get_ref())
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::Image { path: path.into(), source: e })
}

pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    encode_png(path, &DynamicImage::ImageRgb8(img.clone()))
}

/// Reads an 8-bit colour image; gray or alpha inputs are converted to RGB.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    match decode(path)? {
        DynamicImage::ImageRgb8(img) => Ok(img),
        img @ (DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_)) => {
            Ok(img.to_rgb8())
        }
        other => Err(Error::format(path, format!("expected an 8-bit image, found {:?}", other.color()))),
    }
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .expect("mask buffer matches extent");
    encode_png(path, &DynamicImage::ImageLuma8(img))
}

/// Reads class ids from an 8-bit single-channel image.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    match decode(path)? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            LabelMask::new(w as usize, h as usize, img.into_raw())
        }
        other => {
            Err(Error::format(path, format!("class masks must be 8-bit single-channel, found {:?}", other.color())))
        }
    }
}

pub fn write_instances(path: &Path, map: &InstanceMap) -> Result<()> {
    if map.count() > u16::MAX as u32 {
        return Err(Error::format(path, format!("{} instances exceed 16-bit storage", map.count())));
    }
    let data: Vec<u16> = map.data().iter().map(|&v| v as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width() as u32, map.height() as u32, data).expect("buffer matches extent");
    encode_png(path, &DynamicImage::ImageLuma16(img))
}

/// Reads instance ids from a 16-bit (or 8-bit) single-channel image. Ids that
/// are not contiguous are renumbered in raster order.
pub fn read_instances(path: &Path) -> Result<InstanceMap> {
    let (w, h, data): (u32, u32, Vec<u32>) = match decode(path)? {
        DynamicImage::ImageLuma16(img) => {
            (img.width(), img.height(), img.into_raw().into_iter().map(u32::from).collect())
        }
        DynamicImage::ImageLuma8(img) => {
            (img.width(), img.height(), img.into_raw().into_iter().map(u32::from).collect())
        }
        other => {
            return Err(Error::format(path, format!("instance maps must be single-channel, found {:?}", other.color())))
        }
    };
    let (w, h) = (w as usize, h as usize);
    InstanceMap::new(w, h, data.clone()).or_else(|_| InstanceMap::canonical(w, h, &data))
}

/// One dataset entry. Mask paths are optional so unlabeled images can be
/// listed for inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask2: Option<PathBuf>,
    pub mask3: Option<PathBuf>,
    pub instances: Option<PathBuf>,
    pub split: String,
}

impl ManifestRecord {
    /// File stem of the image, used to pair predictions with ground truth.
    pub fn name(&self) -> String {
        self.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    /// The class mask for a 2- or 3-class model.
    pub fn mask(&self, num_classes: usize) -> Option<&Path> {
        match num_classes {
            3 => self.mask3.as_deref(),
            _ => self.mask2.as_deref(),
        }
    }
}

/// Tab-separated records `image mask2 mask3 instances split`; `-` marks a
/// missing mask and `#` starts a comment. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

const MANIFEST_HEADER: &str = "# image\tmask2\tmask3\tinstances\tsplit";

impl DatasetManifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::Invalid(format!(
                    "manifest line {}: expected 5 tab-separated columns, got {}",
                    n + 1,
                    cols.len()
                )));
            }
            let opt = |s: &str| (s != "-" && !s.is_empty()).then(|| PathBuf::from(s));
            records.push(ManifestRecord {
                image: PathBuf::from(cols[0]),
                mask2: opt(cols[1]),
                mask3: opt(cols[2]),
                instances: opt(cols[3]),
                split: cols[4].to_string(),
            });
        }
        Ok(Self { root: root.to_path_buf(), records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&text, &root).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let show = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.image.display(),
                show(&r.mask2),
                show(&r.mask3),
                show(&r.instances),
                r.split
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records carrying the given split tag.
    pub fn with_split(&self, split: &str) -> Self {
        Self { root: self.root.clone(), records: self.records.iter().filter(|r| r.split == split).cloned().collect() }
    }

    /// Every referenced file exists and all files of a record share extents.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            let img = self.resolve(&r.image);
            let dims = image::image_dimensions(&img).map_err(|e| Error::Image { path: img.clone(), source: e })?;
            for m in [&r.mask2, &r.mask3, &r.instances].into_iter().flatten() {
                let p = self.resolve(m);
                let d = image::image_dimensions(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
                if d != dims {
                    return Err(Error::format(&p, format!("extent {d:?} differs from image {dims:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn read_image(&self, i: usize) -> Result<RgbImage> {
        read_image(&self.resolve(&self.records[i].image))
    }

    pub fn read_mask(&self, i: usize, num_classes: usize) -> Result<LabelMask> {
        let r = &self.records[i];
        let p = r
            .mask(num_classes)
            .ok_or_else(|| Error::Invalid(format!("record `{}` has no {num_classes}-class mask", r.image.display())))?;
        read_mask(&self.resolve(p))
    }

    pub fn read_instances(&self, i: usize) -> Result<InstanceMap> {
        let r = &self.records[i];
        let p = r
            .instances
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("record `{}` has no instance map", r.image.display())))?;
        read_instances(&self.resolve(p))
    }
}

/// Generates `count` scenes into `dir` (seeded per record from `seed`) and
/// writes `dir/manifest.tsv`.
pub fn generate_dataset(
    dir: &Path,
    count: usize,
    seed: u64,
    spec: &SyntheticSceneSpec,
    split: &str,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(spec, crate::seed::derive_seed(seed, &[i as u64]))?;
        let stem = format!("scene_{i:03}");
        let rec = ManifestRecord {
            image: PathBuf::from(format!("{stem}.png")),
            mask2: Some(PathBuf::from(format!("{stem}_mask2.png"))),
            mask3: Some(PathBuf::from(format!("{stem}_mask3.png"))),
            instances: Some(PathBuf::from(format!("{stem}_instances.png"))),
            split: split.to_string(),
        };
        write_image(&dir.join(&rec.image), &scene.image)?;
        write_mask(&dir.join(rec.mask2.as_ref().unwrap()), &scene.mask2)?;
        write_mask(&dir.join(rec.mask3.as_ref().unwrap()), &scene.mask3)?;
        write_instances(&dir.join(rec.instances.as_ref().unwrap()), &scene.instances)?;
        records.push(rec);
    }
    let manifest = DatasetManifest { root: dir.to_path_buf(), records };
    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Assignment of record indices to `k` disjoint folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn validation(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Every record outside `fold`, ascending.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        let mut t: Vec<usize> =
            self.folds.iter().enumerate().filter(|&(f, _)| f != fold).flat_map(|(_, v)| v.iter().copied()).collect();
        t.sort_unstable();
        t
    }
}

/// Seeded permutation dealt round-robin into `k` folds; each fold is sorted.
pub fn kfold_split(n_records: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 || n_records < k {
        return Err(Error::Invalid(format!("cannot split {n_records} records into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n_records).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, r) in order.into_iter().enumerate() {
        folds[i % k].push(r);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSplit { folds })
}
