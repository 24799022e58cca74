//! Synthetic fundus-like fixtures with exact masks.
//!
//! Each image has a near-black background, a circular orange retina (radius 0.45 of
//! the short side, centred), one bright optic disk, and up to two non-overlapping
//! blobs per lesion class drawn inside the retina. Every drawn pixel keeps a channel
//! mean of at least 25, so the retina threshold recovers the circle exactly and all
//! lesion pixels lie inside it.
//!
//! Layout: `images/NNN.ppm`, `masks/NNN_<class>.pgm` (0/255; written only for classes
//! present in the image), `manifest.csv`. Splits cycle by index: `i % 8 == 6` is
//! validation, `i % 8 == 7` is test, everything else is training.

use std::path::Path;

use super::manifest::{write_manifest, DatasetManifest, Record, Split};
use super::{save_pgm, save_ppm, Image, MaskImage};
use crate::error::{Error, Result};
use crate::tensor::Prng;
use crate::{CLASS_NAMES, NUM_SCORED};

struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Blob {
    fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 - self.cx, y as f64 - self.cy);
        dx * dx + dy * dy <= self.r * self.r
    }

    fn overlaps(&self, other: &Blob, margin: f64) -> bool {
        let d = ((self.cx - other.cx).powi(2) + (self.cy - other.cy).powi(2)).sqrt();
        d <= self.r + other.r + margin
    }
}

/// Base colour and radius (relative to a 32-pixel short side) per lesion class.
const LESIONS: [([u8; 3], f64); 4] = [
    ([70, 12, 12], 1.0),    // microaneurysm: tiny dark red dot
    ([105, 18, 12], 2.0),   // haemorrhage: larger dark red blob
    ([240, 228, 80], 1.5),  // hard exudate: small bright yellow
    ([210, 200, 185], 2.5), // soft exudate: pale, fluffy
];
const OD_COLOUR: [u8; 3] = [248, 232, 170];

fn jitter(rng: &mut Prng, base: [u8; 3], amp: i32) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.next_below((2 * amp + 1) as usize) as i32 - amp).clamp(0, 255) as u8)
}

fn fixture_image(rng: &mut Prng, w: usize, h: usize) -> (Image, Vec<MaskImage>, (f64, f64)) {
    let short = w.min(h) as f64;
    let scale = short / 32.0;
    let retina = Blob { cx: ((w - 1) / 2) as f64, cy: ((h - 1) / 2) as f64, r: 0.45 * short };

    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = if retina.contains(x, y) {
                let d2 = ((x as f64 - retina.cx).powi(2) + (y as f64 - retina.cy).powi(2)) / retina.r.powi(2);
                let shade = 1.0 - 0.3 * d2;
                let base = [(160.0 * shade) as u8, (75.0 * shade) as u8, (38.0 * shade) as u8];
                jitter(rng, base, 6)
            } else {
                [0, 1, 2].map(|_| rng.next_below(7) as u8)
            };
            img.set_pixel(x, y, px);
        }
    }

    // optic disk: integer centre so that the disk centroid equals the recorded centre
    let od_r = (0.12 * short).round().max(2.0);
    let od = loop {
        let cx = retina.cx + rng.uniform(-0.5, 0.5) * retina.r;
        let cy = retina.cy + rng.uniform(-0.5, 0.5) * retina.r;
        let b = Blob { cx: cx.round(), cy: cy.round(), r: od_r };
        let d = ((b.cx - retina.cx).powi(2) + (b.cy - retina.cy).powi(2)).sqrt();
        if d + od_r + 1.0 <= retina.r {
            break b;
        }
    };

    let mut placed: Vec<Blob> = Vec::new();
    let mut lesion_blobs: Vec<Vec<Blob>> = (0..4).map(|_| Vec::new()).collect();
    for (k, &(_, rel_r)) in LESIONS.iter().enumerate() {
        let r = (rel_r * scale).max(1.0);
        let count = rng.next_below(3);
        for _ in 0..count {
            for _attempt in 0..50 {
                let ang = rng.uniform(0.0, std::f64::consts::TAU);
                let rad = rng.uniform(0.0, retina.r - r - 1.5);
                let b =
                    Blob { cx: (retina.cx + rad * ang.cos()).round(), cy: (retina.cy + rad * ang.sin()).round(), r };
                if !b.overlaps(&od, 1.0) && placed.iter().all(|p| !b.overlaps(p, 1.0)) {
                    placed.push(Blob { cx: b.cx, cy: b.cy, r: b.r });
                    lesion_blobs[k].push(b);
                    break;
                }
            }
        }
    }

    let mut masks: Vec<MaskImage> = (0..NUM_SCORED).map(|_| MaskImage::new(w, h)).collect();
    for y in 0..h {
        for x in 0..w {
            if od.contains(x, y) {
                img.set_pixel(x, y, jitter(rng, OD_COLOUR, 5));
                masks[4].set(x, y, true);
            }
            for (k, blobs) in lesion_blobs.iter().enumerate() {
                if blobs.iter().any(|b| b.contains(x, y)) {
                    img.set_pixel(x, y, jitter(rng, LESIONS[k].0, 5));
                    masks[k].set(x, y, true);
                }
            }
        }
    }
    (img, masks, (od.cx, od.cy))
}

/// Write `count` fixtures of `w × h` into `out_dir` and return the manifest.
pub fn gen_fixtures(seed: u64, count: usize, w: usize, h: usize, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if w < 16 || h < 16 {
        return Err(Error::Config(format!("fixture size {w}x{h} below the 16x16 minimum")));
    }
    let out_dir = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let digits = count.saturating_sub(1).to_string().len().max(3);
    let mut rng = Prng::new(seed);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let stem = format!("{i:0digits$}");
        let (img, masks, centre) = fixture_image(&mut rng, w, h);
        let image = out_dir.join("images").join(format!("{stem}.ppm"));
        save_ppm(&img, &image)?;
        let mut paths: [Option<std::path::PathBuf>; NUM_SCORED] = Default::default();
        for (k, m) in masks.iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            let p = out_dir.join("masks").join(format!("{stem}_{}.pgm", CLASS_NAMES[k]));
            save_pgm(&m.to_gray(), &p)?;
            paths[k] = Some(p);
        }
        let split = match i % 8 {
            6 => Split::Val,
            7 => Split::Test,
            _ => Split::Train,
        };
        records.push(Record { split, image, masks: paths, od_center: Some(centre) });
    }
    let manifest = DatasetManifest { base_dir: out_dir.to_path_buf(), records };
    write_manifest(out_dir.join("manifest.csv"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, load_sample, retina_mask, PrepOptions};
    use crate::{class, NUM_CLASSES};
    use std::collections::BTreeMap;

    fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for sub in ["", "images", "masks"] {
            for e in std::fs::read_dir(dir.join(sub)).unwrap() {
                let p = e.unwrap().path();
                if p.is_file() {
                    out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn deterministic_tree() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_fixtures(7, 8, 32, 32, a.path()).unwrap();
        gen_fixtures(7, 8, 32, 32, b.path()).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));
        let c = tempfile::tempdir().unwrap();
        gen_fixtures(8, 8, 32, 32, c.path()).unwrap();
        assert_ne!(tree(a.path()), tree(c.path()));
    }

    #[test]
    fn manifest_rows_and_splits() {
        let d = tempfile::tempdir().unwrap();
        let m = gen_fixtures(7, 8, 32, 32, d.path()).unwrap();
        assert_eq!(m.records.len(), 8);
        let loaded = load_manifest(d.path().join("manifest.csv")).unwrap();
        assert_eq!(loaded.records.len(), 8);
        assert_eq!(loaded.split(Split::Train).count(), 6);
        assert_eq!(loaded.split(Split::Val).count(), 1);
        assert_eq!(loaded.split(Split::Test).count(), 1);
        assert!(loaded.records.iter().all(|r| r.masks[class::OD].is_some() && r.od_center.is_some()));
    }

    #[test]
    fn lesions_inside_retina_and_full_coverage() {
        let d = tempfile::tempdir().unwrap();
        gen_fixtures(3, 16, 40, 36, d.path()).unwrap();
        let m = load_manifest(d.path().join("manifest.csv")).unwrap();
        let mut lesion_pixels = 0;
        for rec in &m.records {
            let s = load_sample(rec, &PrepOptions::default()).unwrap();
            let retina = retina_mask(&s.image, 20);
            for k in 0..NUM_CLASSES - 2 {
                for (i, &b) in s.target.channels[k].bits.iter().enumerate() {
                    if b {
                        assert!(retina.bits[i], "{} class {k} pixel {i} outside retina", rec.name());
                        lesion_pixels += (k < 4) as usize;
                    }
                }
            }
            for i in 0..retina.bits.len() {
                assert!(s.target.channels.iter().any(|c| c.bits[i]));
            }
            // the recorded OD centre is the centroid of the OD mask
            let od = &s.target.channels[class::OD];
            let (mut sx, mut sy) = (0.0, 0.0);
            for y in 0..od.height {
                for x in 0..od.width {
                    if od.get(x, y) {
                        sx += x as f64;
                        sy += y as f64;
                    }
                }
            }
            let n = od.count() as f64;
            let (cx, cy) = rec.od_center.unwrap();
            assert!((sx / n - cx).abs() < 1e-9 && (sy / n - cy).abs() < 1e-9);
        }
        assert!(lesion_pixels > 0);
    }

    #[test]
    fn rejects_tiny_size() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(gen_fixtures(1, 1, 15, 32, d.path()), Err(Error::Config(_))));
    }
}
