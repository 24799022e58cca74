//! Images, masks, preprocessing, and 7-class target assembly.

mod fixtures;
mod manifest;
pub mod pnm;

pub use fixtures::gen_fixtures;
pub use manifest::{load_manifest, write_manifest, DatasetManifest, Record, Split};
pub use pnm::{load_pgm, load_ppm, save_pgm, save_ppm};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{class, NUM_CLASSES, NUM_SCORED};

/// Retina threshold on the integer channel mean.
pub const DEFAULT_RETINA_THRESHOLD: u8 = 20;

/// Soft-map level at or above which a pixel counts as annotated.
pub const SOFTMAP_CUTOFF: f64 = 0.75;

/// 8-bit RGB raster, row-major triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

/// Real-valued annotation map in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, rgb: vec![0; 3 * width * height] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, p: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.rgb[i..i + 3].copy_from_slice(&p);
    }

    /// `[1, 3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::from_vec(&[1, 3, self.height, self.width], data).expect("nonempty image")
    }
}

impl MaskImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// 0/255 grayscale for writing.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    fn same_size(&self, other: &MaskImage) -> bool {
        (self.width, self.height) == (other.width, other.height)
    }
}

impl GrayImage {
    /// Values scaled to `[0, 1]`.
    pub fn to_soft(&self) -> SoftMap {
        SoftMap {
            width: self.width,
            height: self.height,
            values: self.data.iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }
}

/// Load an annotation PGM as a binary mask: gray levels are read as a soft map and
/// binarized at [`SOFTMAP_CUTOFF`]. Hard 0/255 masks pass through unchanged.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskImage> {
    binarize_softmap(&load_pgm(path)?.to_soft())
}

/// Mean of every 8×8 block per channel, rounded half up.
pub fn downsample8(img: &Image) -> Result<Image> {
    if !img.width.is_multiple_of(8) || !img.height.is_multiple_of(8) {
        return Err(Error::shape(format!("{}x{} is not divisible by 8", img.width, img.height)));
    }
    let (w, h) = (img.width / 8, img.height / 8);
    let mut out = Image::new(w, h);
    for oy in 0..h {
        for ox in 0..w {
            let mut sum = [0u32; 3];
            for y in 8 * oy..8 * oy + 8 {
                for x in 8 * ox..8 * ox + 8 {
                    let p = img.pixel(x, y);
                    for c in 0..3 {
                        sum[c] += p[c] as u32;
                    }
                }
            }
            out.set_pixel(ox, oy, sum.map(|s| ((s + 32) / 64) as u8));
        }
    }
    Ok(out)
}

/// Block majority over 8×8 blocks; a 32/64 tie counts as set, matching
/// [`downsample8`] of a 0/255 mask followed by a midpoint threshold.
pub fn downsample8_mask(m: &MaskImage) -> Result<MaskImage> {
    if !m.width.is_multiple_of(8) || !m.height.is_multiple_of(8) {
        return Err(Error::shape(format!("{}x{} is not divisible by 8", m.width, m.height)));
    }
    let mut out = MaskImage::new(m.width / 8, m.height / 8);
    for oy in 0..out.height {
        for ox in 0..out.width {
            let n = (0..64).filter(|k| m.get(8 * ox + k % 8, 8 * oy + k / 8)).count();
            out.set(ox, oy, n >= 32);
        }
    }
    Ok(out)
}

/// `floor((R + G + B) / 3) >= thresh`.
pub fn retina_mask(img: &Image, thresh: u8) -> MaskImage {
    let bits =
        img.rgb.chunks_exact(3).map(|p| (p[0] as u32 + p[1] as u32 + p[2] as u32) / 3 >= thresh as u32).collect();
    MaskImage { width: img.width, height: img.height, bits }
}

pub fn binarize_softmap(soft: &SoftMap) -> Result<MaskImage> {
    let mut bits = Vec::with_capacity(soft.values.len());
    for (i, &v) in soft.values.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!("soft-map value {v} at pixel {i} outside [0, 1]")));
        }
        bits.push(v >= SOFTMAP_CUTOFF);
    }
    Ok(MaskImage { width: soft.width, height: soft.height, bits })
}

/// Per-pixel class planes in the fixed channel order of [`crate::CLASS_NAMES`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetStack {
    pub channels: Vec<MaskImage>,
}

impl TargetStack {
    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    /// `[1, 7, H, W]` tensor of 0/1.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width() * self.height();
        let mut data = Vec::with_capacity(NUM_CLASSES * plane);
        for ch in &self.channels {
            data.extend(ch.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        Tensor::from_vec(&[1, NUM_CLASSES, self.height(), self.width()], data).expect("nonempty target")
    }
}

/// Copy lesion and OD masks, derive the retinal-disk remainder and the background.
pub fn build_target(lesions: [&MaskImage; 4], od: &MaskImage, retina: &MaskImage) -> Result<TargetStack> {
    if !lesions.iter().all(|m| m.same_size(retina)) || !od.same_size(retina) {
        return Err(Error::shape("target masks differ in size"));
    }
    let mut channels: Vec<MaskImage> = lesions.iter().map(|m| (*m).clone()).collect();
    channels.push(od.clone());
    let n = retina.bits.len();
    let rd = (0..n).map(|i| retina.bits[i] && !channels.iter().any(|m| m.bits[i])).collect();
    let bg = retina.bits.iter().map(|&b| !b).collect();
    channels.push(MaskImage { width: retina.width, height: retina.height, bits: rd });
    channels.push(MaskImage { width: retina.width, height: retina.height, bits: bg });
    debug_assert_eq!(channels.len(), NUM_CLASSES);
    Ok(TargetStack { channels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    Identity,
    Horizontal,
    Vertical,
    Rotate180,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::Identity, Flip::Horizontal, Flip::Vertical, Flip::Rotate180];

    fn source(self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        match self {
            Flip::Identity => (x, y),
            Flip::Horizontal => (w - 1 - x, y),
            Flip::Vertical => (x, h - 1 - y),
            Flip::Rotate180 => (w - 1 - x, h - 1 - y),
        }
    }

    fn apply_raw<T: Copy>(self, src: &[T], w: usize, h: usize, ch: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(src.len());
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(x, y, w, h);
                out.extend_from_slice(&src[(sy * w + sx) * ch..][..ch]);
            }
        }
        out
    }

    pub fn image(self, img: &Image) -> Image {
        Image { width: img.width, height: img.height, rgb: self.apply_raw(&img.rgb, img.width, img.height, 3) }
    }

    pub fn mask(self, m: &MaskImage) -> MaskImage {
        MaskImage { width: m.width, height: m.height, bits: self.apply_raw(&m.bits, m.width, m.height, 1) }
    }
}

/// Original, horizontal flip, vertical flip, 180° rotation; masks follow the image.
pub fn augment_flips(img: &Image, t: &TargetStack) -> Vec<(Image, TargetStack)> {
    Flip::ALL
        .iter()
        .map(|&f| (f.image(img), TargetStack { channels: t.channels.iter().map(|m| f.mask(m)).collect() }))
        .collect()
}

/// Dimensions after aspect-preserving scaling into `tw × th`.
fn fit_size(w: usize, h: usize, tw: usize, th: usize) -> (usize, usize) {
    if tw * h <= th * w {
        (tw, ((h * tw + w / 2) / w).clamp(1, th))
    } else {
        (((w * th + h / 2) / h).clamp(1, tw), th)
    }
}

/// Nearest-neighbour resampling of a `w × h × ch` raster to `nw × nh`.
fn resize_nearest_raw<T: Copy>(src: &[T], w: usize, h: usize, ch: usize, nw: usize, nh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(nw * nh * ch);
    for y in 0..nh {
        let sy = ((2 * y + 1) * h) / (2 * nh);
        for x in 0..nw {
            let sx = ((2 * x + 1) * w) / (2 * nw);
            out.extend_from_slice(&src[(sy * w + sx) * ch..][..ch]);
        }
    }
    out
}

fn resize_pad_raw<T: Copy>(src: &[T], w: usize, h: usize, ch: usize, tw: usize, th: usize, fill: T) -> Vec<T> {
    let (nw, nh) = fit_size(w, h, tw, th);
    let scaled = resize_nearest_raw(src, w, h, ch, nw, nh);
    let mut out = vec![fill; tw * th * ch];
    for y in 0..nh {
        out[y * tw * ch..][..nw * ch].copy_from_slice(&scaled[y * nw * ch..][..nw * ch]);
    }
    out
}

/// Nearest-neighbour scale by `min(tw / W, th / H)`, then zero-pad right and bottom.
pub fn resize_pad(img: &Image, tw: usize, th: usize) -> Result<Image> {
    if tw == 0 || th == 0 {
        return Err(Error::shape("resize target must be at least 1x1"));
    }
    Ok(Image { width: tw, height: th, rgb: resize_pad_raw(&img.rgb, img.width, img.height, 3, tw, th, 0) })
}

pub fn resize_pad_mask(m: &MaskImage, tw: usize, th: usize) -> Result<MaskImage> {
    if tw == 0 || th == 0 {
        return Err(Error::shape("resize target must be at least 1x1"));
    }
    Ok(MaskImage { width: tw, height: th, bits: resize_pad_raw(&m.bits, m.width, m.height, 1, tw, th, false) })
}

/// Nearest-neighbour resampling of a real plane; used to map predictions back.
pub fn resize_nearest_plane(src: &[f64], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f64> {
    resize_nearest_raw(src, w, h, 1, nw, nh)
}

/// How an original image was mapped to network resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Native,
    Downsample8,
    /// Content occupies the top-left `content_w × content_h` of the padded frame.
    ResizePad {
        content_w: usize,
        content_h: usize,
    },
}

impl Geometry {
    /// Choose the mapping from `w × h` to an optional network input size.
    pub fn for_sizes(w: usize, h: usize, input: Option<(usize, usize)>) -> Geometry {
        match input {
            None => Geometry::Native,
            Some((tw, th)) if (tw, th) == (w, h) => Geometry::Native,
            Some((tw, th)) if (8 * tw, 8 * th) == (w, h) => Geometry::Downsample8,
            Some((tw, th)) => {
                let (content_w, content_h) = fit_size(w, h, tw, th);
                Geometry::ResizePad { content_w, content_h }
            }
        }
    }

    pub fn image(self, img: &Image, input: Option<(usize, usize)>) -> Result<Image> {
        match (self, input) {
            (Geometry::Native, _) => Ok(img.clone()),
            (Geometry::Downsample8, _) => downsample8(img),
            (Geometry::ResizePad { .. }, Some((tw, th))) => resize_pad(img, tw, th),
            (Geometry::ResizePad { .. }, None) => Err(Error::Config("resize geometry without input size".into())),
        }
    }

    pub fn mask(self, m: &MaskImage, input: Option<(usize, usize)>) -> Result<MaskImage> {
        match (self, input) {
            (Geometry::Native, _) => Ok(m.clone()),
            (Geometry::Downsample8, _) => downsample8_mask(m),
            (Geometry::ResizePad { .. }, Some((tw, th))) => resize_pad_mask(m, tw, th),
            (Geometry::ResizePad { .. }, None) => Err(Error::Config("resize geometry without input size".into())),
        }
    }

    /// Map a network-resolution plane back to the original `ow × oh` frame.
    pub fn restore_plane(self, plane: &[f64], nw: usize, nh: usize, ow: usize, oh: usize) -> Vec<f64> {
        match self {
            Geometry::Native => plane.to_vec(),
            Geometry::Downsample8 => resize_nearest_plane(plane, nw, nh, ow, oh),
            Geometry::ResizePad { content_w, content_h } => {
                let mut content = Vec::with_capacity(content_w * content_h);
                for y in 0..content_h {
                    content.extend_from_slice(&plane[y * nw..][..content_w]);
                }
                resize_nearest_plane(&content, content_w, content_h, ow, oh)
            }
        }
    }
}

/// Preprocessing knobs shared by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrepOptions {
    /// Network input size; `None` keeps the native resolution.
    pub input_size: Option<(usize, usize)>,
    pub retina_threshold: u8,
}

impl Default for PrepOptions {
    fn default() -> Self {
        Self { input_size: None, retina_threshold: DEFAULT_RETINA_THRESHOLD }
    }
}

/// One image prepared at network resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub target: TargetStack,
    pub geometry: Geometry,
    pub original_size: (usize, usize),
    pub od_center: Option<(f64, f64)>,
}

/// The five annotated masks of a record at original resolution; missing ones are empty.
pub fn load_annotations(rec: &Record, w: usize, h: usize) -> Result<Vec<MaskImage>> {
    rec.masks
        .iter()
        .map(|p| match p {
            Some(path) => {
                let m = load_mask(path)?;
                if (m.width, m.height) != (w, h) {
                    return Err(Error::shape(format!(
                        "{}: mask is {}x{}, image is {w}x{h}",
                        path.display(),
                        m.width,
                        m.height
                    )));
                }
                Ok(m)
            }
            None => Ok(MaskImage::new(w, h)),
        })
        .collect()
}

/// Load, map to network resolution, and assemble the 7-class target. The retina
/// mask is computed on the mapped image so that padding counts as background.
pub fn load_sample(rec: &Record, opts: &PrepOptions) -> Result<Sample> {
    let raw = load_ppm(&rec.image)?;
    let ann = load_annotations(rec, raw.width, raw.height)?;
    let geometry = Geometry::for_sizes(raw.width, raw.height, opts.input_size);
    let image = geometry.image(&raw, opts.input_size)?;
    let mapped = ann.iter().map(|m| geometry.mask(m, opts.input_size)).collect::<Result<Vec<_>>>()?;
    let retina = retina_mask(&image, opts.retina_threshold);
    let target = build_target([&mapped[0], &mapped[1], &mapped[2], &mapped[3]], &mapped[class::OD], &retina)?;
    debug_assert_eq!(mapped.len(), NUM_SCORED);
    Ok(Sample {
        name: rec.name(),
        image,
        target,
        geometry,
        original_size: (raw.width, raw.height),
        od_center: rec.od_center,
    })
}
