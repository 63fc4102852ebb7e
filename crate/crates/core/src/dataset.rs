//! Deterministic synthetic phantoms: touching, class-labelled smooth blobs
//! on a dark background, with polygons, masks and energy maps, plus the
//! on-disk layout (PGM images, JSON annotations, JSON manifest).

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::energymap::{analytic_energy_map, EnergyMap};
use crate::error::{Error, Result};
use crate::geometry::{draw_outline, rasterize, segments_intersect, Contour, Mask, Point};
use crate::pnm::{self, Gray};

pub const GENERATOR_VERSION: u32 = 1;
pub const BLOB_VERTICES: usize = 64;
pub const CLASSES: usize = 3;
pub const MIN_AREA: f64 = 300.0;
const BACKGROUND: f64 = 40.0;
const CLASS_INTENSITY: [f64; CLASSES] = [90.0, 150.0, 210.0];
const CLASS_RADIUS: [(f64, f64); CLASSES] = [(11.0, 13.5), (14.0, 17.0), (17.5, 21.0)];
const MAX_ATTEMPTS: usize = 100;
const GAP: (f64, f64) = (-2.0, 10.0);

/// One ground-truth object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: usize,
    pub polygon: Contour,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 1.5,
            noise_sigma: 8.0,
        }
    }
}

/// A rendered scene with everything derived from its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Gray,
    pub instances: Vec<Annotation>,
    /// Disjoint visible region of each instance.
    pub masks: Vec<Mask>,
    /// Union of every instance outline.
    pub boundary: Mask,
    pub energy: EnergyMap,
}

impl Phantom {
    /// Derives masks, boundary and energy from image and annotations. Later
    /// instances occlude earlier ones.
    pub fn from_parts(image: Gray, instances: Vec<Annotation>) -> Result<Self> {
        let (w, h) = (image.width, image.height);
        let masks = visible_masks(&instances, w, h)?;
        let mut boundary = Mask::new(w, h);
        for a in &instances {
            draw_outline(&mut boundary, &a.polygon);
        }
        let energy = analytic_energy_map(&boundary)?;
        Ok(Self {
            image,
            instances,
            masks,
            boundary,
            energy,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

fn visible_masks(instances: &[Annotation], w: usize, h: usize) -> Result<Vec<Mask>> {
    let mut covered = Mask::new(w, h);
    let mut masks = vec![Mask::new(w, h); instances.len()];
    for (i, a) in instances.iter().enumerate().rev() {
        let mut m = rasterize(&a.polygon, w, h);
        m.subtract(&covered)?;
        covered.union_with(&m)?;
        masks[i] = m;
    }
    Ok(masks)
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Blob shape parameters; [`BlobShape::polygon`] turns them into vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobShape {
    pub radius: f64,
    /// Ellipse axis ratio; semi-axes are `radius·aspect` and `radius/aspect`.
    pub aspect: f64,
    pub rotation: f64,
    /// `(a_k, φ_k)` for k = 2..=5.
    pub harmonics: [(f64, f64); 4],
}

impl BlobShape {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, class: usize) -> Self {
        let (lo, hi) = CLASS_RADIUS[class];
        let radius = rng.random_range(lo..hi);
        let aspect = rng.random_range(0.8..1.25);
        let rotation = rng.random_range(0.0..TAU);
        let mut harmonics = [(0.0, 0.0); 4];
        for hk in &mut harmonics {
            *hk = (rng.random_range(0.0..0.15), rng.random_range(0.0..TAU));
        }
        Self {
            radius,
            aspect,
            rotation,
            harmonics,
        }
    }

    /// Radius along angle `t` measured in the blob's own frame.
    pub fn radius_at(&self, t: f64) -> f64 {
        let (a, b) = (self.radius * self.aspect, self.radius / self.aspect);
        let ellipse = a * b / ((b * t.cos()).powi(2) + (a * t.sin()).powi(2)).sqrt();
        let pert: f64 = self.harmonics.iter().enumerate().map(|(i, &(ak, ph))| ak * ((i + 2) as f64 * t + ph).cos()).sum();
        ellipse * (1.0 + pert)
    }

    /// 64 vertices at equal angles around `centre`, positive orientation,
    /// rounded to 1e-3.
    pub fn polygon(&self, centre: Point) -> Result<Contour> {
        let pts = (0..BLOB_VERTICES)
            .map(|i| {
                let t = TAU * i as f64 / BLOB_VERTICES as f64;
                let r = self.radius_at(t);
                let th = t + self.rotation;
                Point::new(round3(centre.x + r * th.cos()), round3(centre.y + r * th.sin()))
            })
            .collect();
        Contour::new(pts)
    }
}

/// Fourier-perturbed ellipse for `class`, centred at the origin.
pub fn generate_blob<R: Rng + ?Sized>(rng: &mut R, class: usize) -> Result<Contour> {
    BlobShape::random(rng, class).polygon(Point::new(0.0, 0.0))
}

/// Signed separation of two polygon boundaries: the closest boundary
/// distance when disjoint, minus the deepest vertex penetration otherwise.
pub fn boundary_gap(a: &Contour, b: &Contour) -> f64 {
    let mut pen: f64 = 0.0;
    let mut inside = false;
    for (p, q) in [(a, b), (b, a)] {
        for &v in p.points() {
            if q.contains(v) {
                inside = true;
                pen = pen.max(q.boundary_distance(v));
            }
        }
    }
    if inside {
        return -pen;
    }
    let crossing = a.edges().any(|(p0, p1)| b.edges().any(|(q0, q1)| segments_intersect(p0, p1, q0, q1)));
    if crossing {
        return 0.0;
    }
    let da = a.points().iter().map(|&v| b.boundary_distance(v)).fold(f64::INFINITY, f64::min);
    let db = b.points().iter().map(|&v| a.boundary_distance(v)).fold(f64::INFINITY, f64::min);
    da.min(db)
}

/// Moves the vertices of `poly` lying inside any of `occluders` onto the
/// occluder boundary, then drops consecutive repeats.
fn clip_visible(poly: &Contour, occluders: &[Contour]) -> Option<Contour> {
    let mut pts: Vec<Point> = Vec::with_capacity(poly.len());
    for &v in poly.points() {
        let mut p = v;
        for o in occluders {
            if o.contains(p) {
                p = o.project(p);
            }
        }
        let p = Point::new(round3(p.x), round3(p.y));
        if pts.last().is_none_or(|q| q.dist(p) > 1e-6) {
            pts.push(p);
        }
    }
    while pts.len() > 1 && pts[0].dist(*pts.last().unwrap()) <= 1e-6 {
        pts.pop();
    }
    let c = Contour::new(pts).ok()?;
    (c.is_simple() && c.signed_area() >= MIN_AREA).then_some(c)
}

fn place_scene(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Option<Vec<Annotation>> {
    let count = rng.random_range(3..=6);
    let mut placed: Vec<Annotation> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..CLASSES);
        let shape = BlobShape::random(rng, class);
        let template = shape.polygon(Point::new(0.0, 0.0)).ok()?;
        if template.signed_area() < MIN_AREA {
            return None;
        }
        let reach = template.points().iter().map(|p| p.norm()).fold(0.0, f64::max) + 2.0;
        if 2.0 * reach >= width.min(height) as f64 {
            return None;
        }
        let mut ok = None;
        for _ in 0..MAX_ATTEMPTS {
            let c = Point::new(rng.random_range(reach..width as f64 - reach), rng.random_range(reach..height as f64 - reach));
            let poly = shape.polygon(c).ok()?;
            let gaps: Vec<f64> = placed.iter().map(|a| boundary_gap(&a.polygon, &poly)).collect();
            let fits = gaps.iter().all(|&g| g >= GAP.0) && (gaps.is_empty() || gaps.iter().any(|&g| g <= GAP.1));
            if fits {
                ok = Some(poly);
                break;
            }
        }
        placed.push(Annotation { class, polygon: ok? });
    }
    // earlier blobs are drawn first, so later ones occlude them
    let polys: Vec<Contour> = placed.iter().map(|a| a.polygon.clone()).collect();
    for (i, a) in placed.iter_mut().enumerate() {
        a.polygon = clip_visible(&polys[i], &polys[i + 1..])?;
    }
    Some(placed)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (-3..=3).map(|i: i32| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable 7×7 Gaussian blur with edge replication.
pub fn blur(img: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..7).map(|i| k[i] * img[y * w + (x as i64 + i as i64 - 3).clamp(0, w as i64 - 1) as usize]).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..7).map(|i| k[i] * tmp[(y as i64 + i as i64 - 3).clamp(0, h as i64 - 1) as usize * w + x]).sum();
        }
    }
    out
}

/// Paints each instance's visible region with its class intensity, blurs,
/// adds noise, and quantises.
pub fn render_image<R: Rng + ?Sized>(instances: &[Annotation], width: usize, height: usize, cfg: RenderConfig, rng: &mut R) -> Result<Gray> {
    let masks = visible_masks(instances, width, height)?;
    let mut img = vec![BACKGROUND; width * height];
    for (a, m) in instances.iter().zip(&masks) {
        for (v, &b) in img.iter_mut().zip(m.bits()) {
            if b {
                *v = CLASS_INTENSITY[a.class];
            }
        }
    }
    let mut img = blur(&img, width, height, cfg.blur_sigma);
    if cfg.noise_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        img.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    Ok(Gray {
        width,
        height,
        pixels: img.into_iter().map(|v| v.clamp(0.0, 255.0).round() as u8).collect(),
    })
}

/// Scene number `index` of the dataset with `seed`. Placement failures move
/// to the next substream of the same scene.
pub fn render_scene(seed: u64, index: u64, width: usize, height: usize, cfg: RenderConfig) -> Result<Phantom> {
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((attempt << 32) | index);
        if let Some(instances) = place_scene(&mut rng, width, height) {
            let image = render_image(&instances, width, height, cfg, &mut rng)?;
            return Phantom::from_parts(image, instances);
        }
    }
    Err(Error::Config(format!("could not place blobs in a {width}×{height} scene")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    /// Two thirds train, the rest halved between validation and test.
    pub fn for_count(count: usize) -> Self {
        let train = count * 2 / 3;
        let val = (count - train) / 2;
        Self {
            train,
            val,
            test: count - train - val,
        }
    }

    /// Global scene indices of a split.
    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train,
            Split::Val => self.train..self.train + self.val,
            Split::Test => self.train + self.val..self.train + self.val + self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub generator_version: u32,
    pub seed: u64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub splits: SplitSizes,
    pub render: RenderConfig,
}

impl DatasetManifest {
    pub fn new(seed: u64, count: usize, width: usize, height: usize) -> Self {
        Self {
            generator_version: GENERATOR_VERSION,
            seed,
            count,
            width,
            height,
            splits: SplitSizes::for_count(count),
            render: RenderConfig::default(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    instances: Vec<Annotation>,
    image: String,
}

pub const MANIFEST: &str = "manifest.json";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn scene_stem(split: Split, index: usize) -> String {
    format!("{}/{:04}", split.name(), index)
}

/// Writes every scene and the manifest under `root`; returns the manifest path.
pub fn generate(root: &Path, manifest: &DatasetManifest) -> Result<PathBuf> {
    if manifest.width % 4 != 0 || manifest.height % 4 != 0 || manifest.width < 32 || manifest.height < 32 {
        return Err(Error::Config(format!(
            "image size {}×{} must be at least 32×32 with sides divisible by 4",
            manifest.width, manifest.height
        )));
    }
    for split in Split::ALL {
        let dir = root.join(split.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (local, global) in manifest.splits.range(split).enumerate() {
            let ph = render_scene(manifest.seed, global as u64, manifest.width, manifest.height, manifest.render)?;
            let stem = scene_stem(split, local);
            write(&root.join(format!("{stem}.pgm")), &pnm::encode_pgm(&ph.image))?;
            let ann = AnnotationFile {
                instances: ph.instances,
                image: format!("{stem}.pgm"),
            };
            let json = serde_json::to_vec_pretty(&ann).map_err(|e| Error::Format(e.to_string()))?;
            write(&root.join(format!("{stem}.json")), &json)?;
        }
    }
    let path = root.join(MANIFEST);
    let json = serde_json::to_vec_pretty(manifest).map_err(|e| Error::Format(e.to_string()))?;
    write(&path, &json)?;
    Ok(path)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST);
    let buf = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Reads one annotation file and its image.
pub fn load_scene(root: &Path, json: &Path) -> Result<Phantom> {
    let buf = std::fs::read(json).map_err(|e| Error::io(json, e))?;
    let ann: AnnotationFile = serde_json::from_slice(&buf).map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    let image = pnm::read_pgm(&root.join(&ann.image))?;
    Phantom::from_parts(image, ann.instances)
}

/// Every scene of `split`, in index order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Phantom>> {
    let m = load_manifest(root)?;
    let n = m.splits.range(split).len();
    (0..n).map(|i| load_scene(root, &root.join(format!("{}.json", scene_stem(split, i))))).collect()
}
