//! Ensemble inference, threshold sweeps and calibration, segmentation metrics, and
//! optic-disk localization.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{load_annotations, load_ppm, DatasetManifest, Geometry, Image, MaskImage, PrepOptions, Split};
use crate::error::{Error, Result};
use crate::layers::channel_softmax;
use crate::model::{load_checkpoint, Network};
use crate::tensor::Tensor;
use crate::train::EnsembleManifest;
use crate::{class, CLASS_NAMES, NUM_CLASSES, NUM_SCORED};

/// Seven probability planes of one image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbStack {
    pub width: usize,
    pub height: usize,
    pub planes: Vec<Vec<f64>>,
}

impl ProbStack {
    /// Take batch item 0 of an `[N, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let planes = (0..c).map(|k| t.data()[k * h * w..(k + 1) * h * w].to_vec()).collect();
        Ok(Self { width: w, height: h, planes })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.planes.concat();
        Tensor::from_vec(&[1, self.planes.len(), self.height, self.width], data).expect("consistent stack")
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.planes[c]
    }

    /// Per-pixel index of the largest channel; ties go to the lower index.
    pub fn argmax_map(&self) -> Vec<usize> {
        (0..self.width * self.height)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.planes.len() {
                    if self.planes[c][i] > self.planes[best][i] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// The distinct networks referenced by an ensemble manifest.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub networks: Vec<Network>,
    /// `member[c]` indexes the network that supplies class `c`.
    pub member: [usize; NUM_CLASSES],
    pub files: Vec<PathBuf>,
}

impl Ensemble {
    /// Load the checkpoints named in `dir/ensemble.csv`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = EnsembleManifest::load(dir)?;
        let mut files: Vec<PathBuf> = Vec::new();
        let mut networks = Vec::new();
        let mut member = [0; NUM_CLASSES];
        for (c, entry) in manifest.classes.iter().enumerate() {
            let path = dir.join(&entry.checkpoint);
            member[c] = match files.iter().position(|f| *f == path) {
                Some(k) => k,
                None => {
                    networks.push(load_checkpoint(&path)?.network);
                    files.push(path);
                    files.len() - 1
                }
            };
        }
        Self::from_parts(networks, member, files)
    }

    /// One network for every class.
    pub fn single(net: Network) -> Self {
        Self { networks: vec![net], member: [0; NUM_CLASSES], files: Vec::new() }
    }

    pub fn from_parts(networks: Vec<Network>, member: [usize; NUM_CLASSES], files: Vec<PathBuf>) -> Result<Self> {
        for net in &networks {
            if net.config().out_channels != NUM_CLASSES {
                return Err(Error::Config(format!(
                    "ensemble member has {} outputs, expected {NUM_CLASSES}",
                    net.config().out_channels
                )));
            }
        }
        if member.iter().any(|&m| m >= networks.len()) {
            return Err(Error::Config("ensemble member index out of range".into()));
        }
        Ok(Self { networks, member, files })
    }
}

/// Assemble channel `c` from member `c` for a `[1, 3, H, W]` input; optionally boost.
pub fn infer_tensor(ens: &Ensemble, x: &Tensor, boost: bool) -> Result<Tensor> {
    let outs = ens.networks.iter().map(|n| n.predict(x)).collect::<Result<Vec<_>>>()?;
    let (n, _, h, w) = outs[0].dims4()?;
    let plane = h * w;
    let mut stack = Tensor::zeros(&[n, NUM_CLASSES, h, w]);
    for b in 0..n {
        for c in 0..NUM_CLASSES {
            let at = (b * NUM_CLASSES + c) * plane;
            stack.data_mut()[at..at + plane].copy_from_slice(&outs[ens.member[c]].data()[at..at + plane]);
        }
    }
    if boost {
        stack = channel_softmax(&stack)?;
    }
    Ok(stack)
}

pub fn infer(ens: &Ensemble, img: &Image, boost: bool) -> Result<ProbStack> {
    ProbStack::from_tensor(&infer_tensor(ens, &img.to_tensor(), boost)?)
}

/// Nearest-neighbour enlargement of every plane.
pub fn upsample_nearest(p: &ProbStack, out_w: usize, out_h: usize) -> Result<ProbStack> {
    if out_w < p.width || out_h < p.height {
        return Err(Error::shape(format!("cannot upsample {}x{} to smaller {out_w}x{out_h}", p.width, p.height)));
    }
    let planes =
        p.planes.iter().map(|pl| crate::data::resize_nearest_plane(pl, p.width, p.height, out_w, out_h)).collect();
    Ok(ProbStack { width: out_w, height: out_h, planes })
}

pub fn threshold_plane(plane: &[f64], width: usize, height: usize, t: f64) -> MaskImage {
    assert_eq!(plane.len(), width * height, "plane size");
    MaskImage { width, height, bits: plane.iter().map(|&v| v >= t).collect() }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn metrics(&self) -> Metrics {
        metrics(self)
    }

    /// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both are empty.
    pub fn jaccard(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }
}

fn same_size(a: &MaskImage, b: &MaskImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(format!("mask sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

pub fn confusion(pred: &MaskImage, gt: &MaskImage) -> Result<Confusion> {
    same_size(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub sensitivity: f64,
    pub ppv: f64,
    pub accuracy: f64,
}

pub fn metrics(c: &Confusion) -> Metrics {
    let pos = c.tp + c.fn_;
    let called = c.tp + c.fp;
    let sensitivity = if pos == 0 { 1.0 } else { c.tp as f64 / pos as f64 };
    let ppv = match (called, pos) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => c.tp as f64 / called as f64,
    };
    let accuracy = if c.total() == 0 { 1.0 } else { (c.tp + c.tn) as f64 / c.total() as f64 };
    Metrics { sensitivity, ppv, accuracy }
}

pub fn jaccard(pred: &MaskImage, gt: &MaskImage) -> Result<f64> {
    Ok(confusion(pred, gt)?.jaccard())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub ppv: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricCurve {
    pub points: Vec<CurvePoint>,
}

/// `0.01, 0.02, …, 0.99`.
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    if grid.iter().any(|&t| !(t > 0.0 && t < 1.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("threshold grid must be strictly increasing within (0,1)".into()));
    }
    Ok(())
}

/// Confusion counts at every grid threshold. Each pixel is bucketed by how many
/// thresholds it clears, so the cost is one binary search per pixel.
pub fn sweep_counts(plane: &[f64], gt: &MaskImage, grid: &[f64]) -> Result<Vec<Confusion>> {
    check_grid(grid)?;
    if plane.len() != gt.bits.len() {
        return Err(Error::shape(format!("plane has {} values, mask has {}", plane.len(), gt.bits.len())));
    }
    let n = grid.len();
    let mut pos_hist = vec![0u64; n + 1];
    let mut neg_hist = vec![0u64; n + 1];
    for (&v, &g) in plane.iter().zip(&gt.bits) {
        let k = grid.partition_point(|&t| t <= v);
        if g {
            pos_hist[k] += 1;
        } else {
            neg_hist[k] += 1;
        }
    }
    let (pos, neg) = (pos_hist.iter().sum::<u64>(), neg_hist.iter().sum::<u64>());
    // thresholds i < k are cleared by a pixel in bucket k
    let mut out = vec![Confusion::default(); n];
    let (mut tp, mut fp) = (0, 0);
    for i in (0..n).rev() {
        tp += pos_hist[i + 1];
        fp += neg_hist[i + 1];
        out[i] = Confusion { tp, fp, fn_: pos - tp, tn: neg - fp };
    }
    Ok(out)
}

pub fn curve_from_counts(grid: &[f64], counts: &[Confusion]) -> MetricCurve {
    let points = grid
        .iter()
        .zip(counts)
        .map(|(&threshold, c)| {
            let m = metrics(c);
            CurvePoint { threshold, sensitivity: m.sensitivity, ppv: m.ppv }
        })
        .collect();
    MetricCurve { points }
}

pub fn sweep_curve(plane: &[f64], gt: &MaskImage, grid: &[f64]) -> Result<MetricCurve> {
    Ok(curve_from_counts(grid, &sweep_counts(plane, gt, grid)?))
}

/// Threshold where sensitivity and PPV first meet, interpolated between grid
/// points; without a crossing, the threshold maximizing `min(SE, PPV)`.
pub fn calibrate(curve: &MetricCurve) -> f64 {
    let p = &curve.points;
    assert!(!p.is_empty(), "calibrate needs a nonempty curve");
    let d: Vec<f64> = p.iter().map(|q| q.sensitivity - q.ppv).collect();
    for i in 0..p.len() {
        if d[i] == 0.0 {
            return p[i].threshold;
        }
        if i + 1 < p.len() && (d[i] > 0.0) != (d[i + 1] > 0.0) && d[i + 1] != 0.0 {
            let f = d[i] / (d[i] - d[i + 1]);
            return p[i].threshold + f * (p[i + 1].threshold - p[i].threshold);
        }
    }
    let mut best = 0;
    for i in 1..p.len() {
        if p[i].sensitivity.min(p[i].ppv) > p[best].sensitivity.min(p[best].ppv) {
            best = i;
        }
    }
    p[best].threshold
}

/// Trapezoidal area under PPV as a function of sensitivity over the observed range.
pub fn auc_ppv_se(curve: &MetricCurve) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|q| (q.sensitivity, q.ppv)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for (se, ppv) in pts {
        match dedup.last_mut() {
            Some(last) if last.0 == se => last.1 = last.1.max(ppv),
            _ => dedup.push((se, ppv)),
        }
    }
    dedup.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Mean `(x, y)` of set pixels.
pub fn centroid(mask: &MaskImage) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0u64);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

pub fn localization_error(pred: (f64, f64), gt: (f64, f64)) -> f64 {
    (pred.0 - gt.0).hypot(pred.1 - gt.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocRow {
    pub image: String,
    pub pred: Option<(f64, f64)>,
    pub gt: (f64, f64),
    pub distance: f64,
}

/// Distance for one image; a missing prediction costs `penalty`.
pub fn loc_row(image: String, pred: Option<(f64, f64)>, gt: (f64, f64), penalty: f64) -> LocRow {
    let distance = pred.map_or(penalty, |p| localization_error(p, gt));
    LocRow { image, pred, gt, distance }
}

pub fn mean_localization_error(rows: &[LocRow]) -> Option<f64> {
    (!rows.is_empty()).then(|| rows.iter().map(|r| r.distance).sum::<f64>() / rows.len() as f64)
}

/// One threshold per scored class, each in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSet(pub [f64; NUM_SCORED]);

pub const THRESHOLDS_HEADER: &str = "class,threshold";

impl ThresholdSet {
    pub fn new(t: [f64; NUM_SCORED]) -> Result<Self> {
        if let Some(bad) = t.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Config(format!("threshold {bad} outside (0,1)")));
        }
        Ok(Self(t))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{THRESHOLDS_HEADER}\n");
        for (c, t) in self.0.iter().enumerate() {
            let _ = writeln!(s, "{},{t}", CLASS_NAMES[c]);
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |row: usize, msg: String| Error::Load { path: path.to_path_buf(), row, msg };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(THRESHOLDS_HEADER) {
            return Err(err(1, format!("bad header, expected {THRESHOLDS_HEADER}")));
        }
        let mut t = [None; NUM_SCORED];
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row = i + 2;
            let (name, v) = line.split_once(',').ok_or_else(|| err(row, "expected class,threshold".into()))?;
            let c = CLASS_NAMES[..NUM_SCORED]
                .iter()
                .position(|n| *n == name.trim())
                .ok_or_else(|| err(row, format!("unknown class {name:?}")))?;
            let v: f64 = v.trim().parse().map_err(|_| err(row, format!("bad threshold {v:?}")))?;
            if !(v > 0.0 && v < 1.0) {
                return Err(err(row, format!("threshold {v} outside (0,1)")));
            }
            t[c] = Some(v);
        }
        let mut out = [0.0; NUM_SCORED];
        for c in 0..NUM_SCORED {
            out[c] = t[c].ok_or_else(|| err(0, format!("missing threshold for {}", CLASS_NAMES[c])))?;
        }
        Ok(Self(out))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Run the ensemble on an original-resolution image and map the result back to it.
pub fn predict_image(ens: &Ensemble, raw: &Image, prep: &PrepOptions, boost: bool) -> Result<ProbStack> {
    let geometry = Geometry::for_sizes(raw.width, raw.height, prep.input_size);
    let input = geometry.image(raw, prep.input_size)?;
    let p = infer(ens, &input, boost)?;
    let planes =
        p.planes.iter().map(|pl| geometry.restore_plane(pl, p.width, p.height, raw.width, raw.height)).collect();
    Ok(ProbStack { width: raw.width, height: raw.height, planes })
}

/// Per-image results gathered before aggregation.
#[derive(Debug, Clone)]
struct ImageEval {
    name: String,
    sweeps: Vec<Vec<Confusion>>,
    at_threshold: Vec<Confusion>,
    od_pred: Option<(f64, f64)>,
    od_gt: Option<(f64, f64)>,
    diagonal: f64,
}

fn eval_record(
    ens: &Ensemble,
    rec: &crate::data::Record,
    prep: &PrepOptions,
    boost: bool,
    grid: &[f64],
    thresholds: Option<&ThresholdSet>,
) -> Result<ImageEval> {
    let raw = load_ppm(&rec.image)?;
    let gts = load_annotations(rec, raw.width, raw.height)?;
    let probs = predict_image(ens, &raw, prep, boost)?;
    let mut sweeps = Vec::with_capacity(NUM_SCORED);
    let mut at_threshold = Vec::new();
    let mut od_pred = None;
    for c in 0..NUM_SCORED {
        sweeps.push(sweep_counts(probs.plane(c), &gts[c], grid)?);
        if let Some(ts) = thresholds {
            let m = threshold_plane(probs.plane(c), raw.width, raw.height, ts.0[c]);
            at_threshold.push(confusion(&m, &gts[c])?);
            if c == class::OD {
                od_pred = centroid(&m);
            }
        }
    }
    Ok(ImageEval {
        name: rec.name(),
        sweeps,
        at_threshold,
        od_pred,
        od_gt: rec.od_center,
        diagonal: (raw.width as f64).hypot(raw.height as f64),
    })
}

fn eval_split(
    ens: &Ensemble,
    data: &DatasetManifest,
    split: Split,
    prep: &PrepOptions,
    boost: bool,
    grid: &[f64],
    thresholds: Option<&ThresholdSet>,
) -> Result<Vec<ImageEval>> {
    check_grid(grid)?;
    let recs: Vec<_> = data.split(split).collect();
    if recs.is_empty() {
        return Err(Error::Config(format!("manifest has no {split} rows")));
    }
    // indexed parallel collect keeps manifest order
    recs.par_iter().map(|rec| eval_record(ens, rec, prep, boost, grid, thresholds)).collect()
}

fn pooled_sweeps(evals: &[ImageEval], n: usize) -> Vec<Vec<Confusion>> {
    let mut pooled = vec![vec![Confusion::default(); n]; NUM_SCORED];
    for e in evals {
        for c in 0..NUM_SCORED {
            for (acc, x) in pooled[c].iter_mut().zip(&e.sweeps[c]) {
                acc.add(x);
            }
        }
    }
    pooled
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub thresholds: ThresholdSet,
    pub curves: Vec<MetricCurve>,
}

/// Pooled sweeps over the validation split and the intersection rule per class.
pub fn calibrate_dataset(
    ens: &Ensemble,
    data: &DatasetManifest,
    prep: &PrepOptions,
    boost: bool,
    grid: &[f64],
) -> Result<Calibration> {
    let evals = eval_split(ens, data, Split::Val, prep, boost, grid, None)?;
    let curves: Vec<MetricCurve> =
        pooled_sweeps(&evals, grid.len()).iter().map(|counts| curve_from_counts(grid, counts)).collect();
    let mut t = [0.0; NUM_SCORED];
    for (c, curve) in curves.iter().enumerate() {
        t[c] = calibrate(curve);
    }
    Ok(Calibration { thresholds: ThresholdSet::new(t)?, curves })
}

pub const CURVES_HEADER: &str = "class,threshold,sensitivity,ppv";

pub fn curves_csv(curves: &[MetricCurve]) -> String {
    let mut s = format!("{CURVES_HEADER}\n");
    for (c, curve) in curves.iter().enumerate() {
        for p in &curve.points {
            let _ = writeln!(s, "{},{},{},{}", CLASS_NAMES[c], p.threshold, p.sensitivity, p.ppv);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub class: usize,
    pub threshold: f64,
    pub metrics: Metrics,
    pub jaccard: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub loc: Vec<LocRow>,
    pub mean_distance: Option<f64>,
}

pub const REPORT_HEADER: &str = "class,threshold,sensitivity,ppv,accuracy,jaccard,auc";
pub const LOC_HEADER: &str = "image,pred_x,pred_y,gt_x,gt_y,distance";

impl EvalReport {
    pub fn report_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                CLASS_NAMES[r.class], r.threshold, m.sensitivity, m.ppv, m.accuracy, r.jaccard, r.auc
            );
        }
        s
    }

    pub fn loc_csv(&self) -> String {
        let mut s = format!("{LOC_HEADER}\n");
        for r in &self.loc {
            let (px, py) = r.pred.map_or((String::new(), String::new()), |(x, y)| (x.to_string(), y.to_string()));
            let _ = writeln!(s, "{},{px},{py},{},{},{}", r.image, r.gt.0, r.gt.1, r.distance);
        }
        s
    }
}

/// Metrics on the test split with pixel counts pooled over images. A missing optic
/// disk prediction costs `penalty`, or the image diagonal when `None`.
pub fn evaluate(
    ens: &Ensemble,
    data: &DatasetManifest,
    thresholds: &ThresholdSet,
    prep: &PrepOptions,
    boost: bool,
    penalty: Option<f64>,
) -> Result<EvalReport> {
    let grid = default_grid();
    let evals = eval_split(ens, data, Split::Test, prep, boost, &grid, Some(thresholds))?;
    let pooled = pooled_sweeps(&evals, grid.len());
    let mut rows = Vec::with_capacity(NUM_SCORED);
    for c in 0..NUM_SCORED {
        let mut at = Confusion::default();
        for e in &evals {
            at.add(&e.at_threshold[c]);
        }
        rows.push(ReportRow {
            class: c,
            threshold: thresholds.0[c],
            metrics: metrics(&at),
            jaccard: at.jaccard(),
            auc: auc_ppv_se(&curve_from_counts(&grid, &pooled[c])),
        });
    }
    let loc: Vec<LocRow> = evals
        .iter()
        .filter_map(|e| e.od_gt.map(|gt| loc_row(e.name.clone(), e.od_pred, gt, penalty.unwrap_or(e.diagonal))))
        .collect();
    let mean_distance = mean_localization_error(&loc);
    Ok(EvalReport { rows, loc, mean_distance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;
    use crate::tensor::Prng;

    fn random_mask(rng: &mut Prng, w: usize, h: usize, p: f64) -> MaskImage {
        MaskImage { width: w, height: h, bits: (0..w * h).map(|_| rng.next_f64() < p).collect() }
    }

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> MaskImage {
        let mut m = MaskImage::new(w, h);
        for &(x, y) in on {
            m.set(x, y, true);
        }
        m
    }

    fn curve(pts: &[(f64, f64, f64)]) -> MetricCurve {
        MetricCurve {
            points: pts
                .iter()
                .map(|&(threshold, sensitivity, ppv)| CurvePoint { threshold, sensitivity, ppv })
                .collect(),
        }
    }

    #[test]
    fn upsample_cases() {
        let p = ProbStack { width: 1, height: 1, planes: vec![vec![0.7]; 7] };
        let u = upsample_nearest(&p, 8, 8).unwrap();
        assert!(u.planes.iter().all(|pl| pl.len() == 64 && pl.iter().all(|&v| v == 0.7)));
        let mut rng = Prng::new(3);
        let src: Vec<f64> = (0..6).map(|_| rng.next_f64()).collect();
        let p = ProbStack { width: 3, height: 2, planes: vec![src.clone(); 7] };
        let u = upsample_nearest(&p, 24, 16).unwrap();
        for y in 0..16 {
            for x in 0..24 {
                assert_eq!(u.planes[0][y * 24 + x], src[(y / 8) * 3 + x / 8]);
            }
        }
        let p = ProbStack { width: 536, height: 356, planes: vec![vec![0.1; 536 * 356]; 7] };
        let u = upsample_nearest(&p, 4288, 2848).unwrap();
        assert_eq!((u.width, u.height, u.planes[6].len()), (4288, 2848, 4288 * 2848));
        assert!(matches!(upsample_nearest(&p, 100, 356), Err(Error::Shape(_))));
    }

    #[test]
    fn threshold_cases() {
        let pl = vec![0.6; 4];
        assert_eq!(threshold_plane(&pl, 2, 2, 0.5).count(), 4);
        assert_eq!(threshold_plane(&pl, 2, 2, 0.7).count(), 0);
        assert_eq!(threshold_plane(&pl, 2, 2, 0.6).count(), 4);
        let mut rng = Prng::new(1);
        let pl: Vec<f64> = (0..64).map(|_| rng.next_f64()).collect();
        for (t1, t2) in [(0.1, 0.2), (0.3, 0.9), (0.5, 0.51)] {
            let (a, b) = (threshold_plane(&pl, 8, 8, t1), threshold_plane(&pl, 8, 8, t2));
            assert!(b.bits.iter().zip(&a.bits).all(|(&hi, &lo)| !hi || lo));
        }
    }

    #[test]
    fn confusion_and_metrics_cases() {
        let pred = mask(2, 2, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        let gt = mask(2, 2, &[(0, 0), (1, 0), (0, 1)]);
        assert_eq!(confusion(&pred, &gt).unwrap(), Confusion { tp: 3, fp: 1, fn_: 0, tn: 0 });
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_, c.total()), (0, 0, 4));
        assert!(matches!(confusion(&pred, &MaskImage::new(3, 2)), Err(Error::Shape(_))));

        assert_eq!(metrics(&Confusion { tp: 8, fp: 0, fn_: 2, tn: 0 }).sensitivity, 0.8);
        let m = metrics(&confusion(&pred, &pred).unwrap());
        assert_eq!((m.ppv, m.accuracy), (1.0, 1.0));
        assert_eq!(metrics(&Confusion { tp: 0, fp: 0, fn_: 3, tn: 1 }).ppv, 0.0);
        let empty = metrics(&Confusion { tp: 0, fp: 0, fn_: 0, tn: 4 });
        assert_eq!((empty.sensitivity, empty.ppv), (1.0, 1.0));
    }

    #[test]
    fn jaccard_cases() {
        let a = mask(4, 4, &[(0, 0), (1, 0), (2, 0), (3, 0)]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        let b = mask(4, 4, &[(0, 3), (1, 3)]);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
        let c = mask(4, 4, &[(2, 0), (3, 0), (0, 2), (1, 2)]);
        assert!((jaccard(&a, &c).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(jaccard(&MaskImage::new(2, 2), &MaskImage::new(2, 2)).unwrap(), 1.0);
    }

    #[test]
    fn jaccard_properties() {
        let mut rng = Prng::new(11);
        for _ in 0..100 {
            let a = random_mask(&mut rng, 6, 5, 0.3);
            let b = random_mask(&mut rng, 6, 5, 0.3);
            let j = jaccard(&a, &b).unwrap();
            assert!((0.0..=1.0).contains(&j));
            assert_eq!(j, jaccard(&b, &a).unwrap());
            assert_eq!(j == 1.0, a == b);
        }
    }

    fn brute_row(plane: &[f64], gt: &MaskImage, t: f64) -> (f64, f64) {
        let (mut tp, mut fp, mut fneg) = (0u32, 0u32, 0u32);
        for i in 0..plane.len() {
            let p = plane[i] >= t;
            match (p, gt.bits[i]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let se = if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 };
        let ppv = if tp + fp == 0 {
            if tp + fneg == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            tp as f64 / (tp + fp) as f64
        };
        (se, ppv)
    }

    #[test]
    fn sweep_matches_brute_force_and_is_monotone() {
        let grid = default_grid();
        let mut rng = Prng::new(5);
        for k in 0..100 {
            // include exact grid values to exercise the >= boundary
            let plane: Vec<f64> =
                (0..256).map(|i| if (i + k) % 7 == 0 { grid[rng.next_below(99)] } else { rng.next_f64() }).collect();
            let gt = random_mask(&mut rng, 16, 16, 0.2 + 0.006 * k as f64);
            let curve = sweep_curve(&plane, &gt, &grid).unwrap();
            assert_eq!(curve.points.len(), 99);
            for (p, &t) in curve.points.iter().zip(&grid) {
                assert_eq!((p.sensitivity, p.ppv), brute_row(&plane, &gt, t));
            }
            assert!(curve.points.windows(2).all(|w| w[1].sensitivity <= w[0].sensitivity));
        }
    }

    #[test]
    fn sweep_flat_when_plane_is_gt() {
        let mut rng = Prng::new(8);
        let gt = random_mask(&mut rng, 8, 8, 0.4);
        let plane: Vec<f64> = gt.bits.iter().map(|&b| b as u8 as f64).collect();
        let c = sweep_curve(&plane, &gt, &default_grid()).unwrap();
        assert!(c.points.iter().all(|p| p.sensitivity == 1.0 && p.ppv == 1.0));
        assert!(matches!(sweep_curve(&plane, &gt, &[]), Err(Error::Config(_))));
        assert!(matches!(sweep_curve(&plane, &gt, &[0.5, 0.4]), Err(Error::Config(_))));
    }

    #[test]
    fn calibrate_cases() {
        let grid = default_grid();
        let sym = curve(&grid.iter().map(|&t| (t, 1.0 - t, t)).collect::<Vec<_>>());
        assert!((calibrate(&sym) - 0.5).abs() <= 0.005);
        // crossing between grid points is interpolated
        let off = curve(&[(0.1, 0.9, 0.2), (0.2, 0.6, 0.4), (0.3, 0.3, 0.6)]);
        assert!((calibrate(&off) - 0.24).abs() < 1e-12);
        // SE always above PPV, PPV rising: best min is the last point
        let above = curve(&grid.iter().map(|&t| (t, 1.0, 0.5 * t)).collect::<Vec<_>>());
        assert_eq!(calibrate(&above), 0.99);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc_ppv_se(&curve(&[(0.1, 0.0, 1.0), (0.2, 1.0, 1.0)])), 1.0);
        assert_eq!(auc_ppv_se(&curve(&[(0.1, 0.0, 0.0), (0.2, 1.0, 1.0)])), 0.5);
        assert_eq!(auc_ppv_se(&curve(&[(0.3, 0.4, 0.7)])), 0.0);
        // duplicate SE keeps the larger PPV
        assert_eq!(auc_ppv_se(&curve(&[(0.1, 1.0, 0.2), (0.2, 1.0, 1.0), (0.3, 0.0, 1.0)])), 1.0);
    }

    #[test]
    fn centroid_and_distance() {
        assert_eq!(centroid(&mask(3, 3, &[(0, 0), (2, 2)])), Some((1.0, 1.0)));
        assert_eq!(centroid(&mask(8, 8, &[(5, 3)])), Some((5.0, 3.0)));
        assert_eq!(centroid(&MaskImage::new(4, 4)), None);
        assert_eq!(localization_error((0.0, 0.0), (3.0, 4.0)), 5.0);
        assert_eq!(localization_error((2.5, 1.0), (2.5, 1.0)), 0.0);
        let rows = [loc_row("a".into(), Some((0.0, 0.0)), (3.0, 4.0), 9.0), loc_row("b".into(), None, (1.0, 1.0), 9.0)];
        assert_eq!(mean_localization_error(&rows), Some(7.0));
        let mut rng = Prng::new(2);
        for _ in 0..50 {
            let m = random_mask(&mut rng, 9, 7, 0.1);
            if let Some((x, y)) = centroid(&m) {
                let xs: Vec<usize> = (0..63).filter(|&i| m.bits[i]).map(|i| i % 9).collect();
                let ys: Vec<usize> = (0..63).filter(|&i| m.bits[i]).map(|i| i / 9).collect();
                assert!(x >= *xs.iter().min().unwrap() as f64 && x <= *xs.iter().max().unwrap() as f64);
                assert!(y >= *ys.iter().min().unwrap() as f64 && y <= *ys.iter().max().unwrap() as f64);
            }
        }
    }

    #[test]
    fn thresholds_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let ts = ThresholdSet::new([0.1, 0.25, 0.5, 0.75, 0.333]).unwrap();
        let p = d.path().join("t.csv");
        ts.save(&p).unwrap();
        assert_eq!(ThresholdSet::load(&p).unwrap(), ts);
        assert!(ThresholdSet::new([0.0, 0.5, 0.5, 0.5, 0.5]).is_err());
        std::fs::write(&p, "class,threshold\nma,0.5\n").unwrap();
        assert!(matches!(ThresholdSet::load(&p), Err(Error::Load { .. })));
    }

    fn random_net(seed: u64) -> Network {
        let mut rng = Prng::new(seed);
        Network::build(&NetConfig::desk(), &mut rng).unwrap()
    }

    #[test]
    fn degenerate_ensemble_is_single_network() {
        let net = random_net(4);
        let mut rng = Prng::new(9);
        let x = rng.uniform_tensor(&[1, 3, 12, 10], 0.0, 1.0).unwrap();
        let ens = Ensemble::single(net.clone());
        assert_eq!(infer_tensor(&ens, &x, false).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn ensemble_takes_channel_from_member() {
        let (a, b) = (random_net(1), random_net(2));
        let mut member = [0; NUM_CLASSES];
        member[class::EX] = 1;
        let ens = Ensemble::from_parts(vec![a.clone(), b.clone()], member, Vec::new()).unwrap();
        let mut rng = Prng::new(3);
        let x = rng.uniform_tensor(&[1, 3, 8, 8], 0.0, 1.0).unwrap();
        let got = ProbStack::from_tensor(&infer_tensor(&ens, &x, false).unwrap()).unwrap();
        let pa = ProbStack::from_tensor(&a.predict(&x).unwrap()).unwrap();
        let pb = ProbStack::from_tensor(&b.predict(&x).unwrap()).unwrap();
        assert_eq!(got.planes[class::EX], pb.planes[class::EX]);
        assert_eq!(got.planes[class::OD], pa.planes[class::OD]);
    }

    #[test]
    fn boost_normalizes_and_keeps_argmax() {
        let ens = Ensemble::single(random_net(6));
        let mut rng = Prng::new(7);
        let x = rng.uniform_tensor(&[1, 3, 8, 8], 0.0, 1.0).unwrap();
        let plain = ProbStack::from_tensor(&infer_tensor(&ens, &x, false).unwrap()).unwrap();
        let boosted = ProbStack::from_tensor(&infer_tensor(&ens, &x, true).unwrap()).unwrap();
        for i in 0..64 {
            let s: f64 = boosted.planes.iter().map(|p| p[i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(plain.argmax_map(), boosted.argmax_map());
    }

    #[test]
    fn ensemble_load_dedupes_and_reports_missing() {
        let d = tempfile::tempdir().unwrap();
        let net = random_net(5);
        crate::model::save_checkpoint(&net, &Default::default(), d.path().join("only.fseg")).unwrap();
        let mut csv = String::from("class,checkpoint,epoch,val_loss\n");
        for n in CLASS_NAMES.iter().chain(["total"].iter()) {
            csv += &format!("{n},only.fseg,1,0.5\n");
        }
        std::fs::write(d.path().join("ensemble.csv"), &csv).unwrap();
        let ens = Ensemble::load(d.path()).unwrap();
        assert_eq!(ens.networks.len(), 1);
        std::fs::write(d.path().join("ensemble.csv"), csv.replacen("only.fseg", "gone.fseg", 1)).unwrap();
        assert!(matches!(Ensemble::load(d.path()), Err(Error::Io { .. })));
    }
}
