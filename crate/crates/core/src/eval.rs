//! Evaluation protocols: quality-vs-count curves, matched-count baselines,
//! the four-strip discrete-vs-continuous comparison and model summaries.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::clod::{LodMode, LodQuery, DEFAULT_TAU};
use crate::dataset::{CameraSet, View};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{psnr, ssim};
use crate::model::GaussianScene;
use crate::ply::encode_ply;
use crate::raster::{render, RenderArtifacts};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub s_v: f64,
    pub ratio: f64,
    pub count: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Metrics of one render against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub count: usize,
    pub ratio: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn evaluate_view(scene: &GaussianScene, view: &View, mode: &LodMode) -> Result<ViewMetrics> {
    let art = render(scene, &view.camera, mode)?;
    metrics_of(&art, &view.image)
}

fn metrics_of(art: &RenderArtifacts, gt: &Image) -> Result<ViewMetrics> {
    Ok(ViewMetrics {
        count: art.rendered_count,
        ratio: art.rendered_ratio,
        psnr: psnr(&art.image, gt)?,
        ssim: ssim(&art.image, gt)?,
    })
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("scale grid is empty".into()));
    }
    if grid.iter().any(|s| !(s.is_finite() && *s >= 1.0)) {
        return Err(Error::Config("scale grid values must be finite and >= 1".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("scale grid must be strictly ascending".into()));
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// `start, start + step, ..., <= end` without accumulating rounding error.
pub fn scale_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + step * i as f64).collect()
}

/// Renders every camera at every grid scale and averages per scale.
pub fn quality_curve(scene: &GaussianScene, cameras: &CameraSet, grid: &[f64], tau: f64) -> Result<Vec<CurvePoint>> {
    check_grid(grid)?;
    if cameras.is_empty() {
        return Err(Error::Config("camera set is empty".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..cameras.len()).map(move |c| (g, c)))
        .collect();
    let results: Vec<ViewMetrics> = pairs
        .par_iter()
        .map(|&(g, c)| {
            evaluate_view(
                scene,
                &cameras.views[c],
                &LodMode::Clod(LodQuery::with_tau(grid[g], tau)),
            )
        })
        .collect::<Result<_>>()?;
    let nc = cameras.len();
    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, &s_v)| {
            let rows = &results[g * nc..(g + 1) * nc];
            CurvePoint {
                s_v,
                ratio: mean(rows.iter().map(|r| r.ratio)),
                count: mean(rows.iter().map(|r| r.count as f64)),
                psnr: mean(rows.iter().map(|r| r.psnr)),
                ssim: mean(rows.iter().map(|r| r.ssim)),
            }
        })
        .collect())
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("s_v,ratio,count,psnr,ssim\n");
    for p in points {
        writeln!(out, "{},{},{},{},{}", p.s_v, p.ratio, p.count, p.psnr, p.ssim).unwrap();
    }
    out
}

/// Keeps the `k` in-frustum primitives with the largest attenuated opacity
/// under `q`, ignoring the threshold.
pub fn topk_opacity_baseline(scene: &GaussianScene, cam: &Camera, k: usize, q: LodQuery) -> Result<RenderArtifacts> {
    if k > scene.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds the {} primitives in the scene",
            scene.len()
        )));
    }
    render(scene, cam, &LodMode::TopK { k, query: q })
}

/// Converts a ratio of the whole scene into a primitive count.
pub fn count_for_ratio(scene: &GaussianScene, ratio: f64) -> usize {
    (ratio.clamp(0.0, 1.0) * scene.len() as f64).round() as usize
}

/// Finds `s_v` whose rendered count is within `tolerance` (relative) of
/// `target`, bisecting on the monotone count curve. Returns the best scale
/// found and its render.
pub fn match_count(
    scene: &GaussianScene,
    cam: &Camera,
    target: usize,
    tau: f64,
    tolerance: f64,
) -> Result<(f64, RenderArtifacts)> {
    let run = |s: f64| render(scene, cam, &LodMode::Clod(LodQuery::with_tau(s, tau)));
    let within = |c: usize| (c as f64 - target as f64).abs() <= tolerance * (target as f64).max(1.0);
    let mut lo = (1.0, run(1.0)?);
    if lo.1.rendered_count <= target || within(lo.1.rendered_count) {
        return Ok(lo);
    }
    let mut hi_s = 2.0;
    let mut hi = run(hi_s)?;
    while hi.rendered_count > target {
        if LodQuery::with_tau(hi_s, tau).culls_everything() {
            break;
        }
        lo = (hi_s, hi);
        hi_s *= 2.0;
        hi = run(hi_s)?;
    }
    let mut best =
        if (hi.rendered_count as f64 - target as f64).abs() < (lo.1.rendered_count as f64 - target as f64).abs() {
            (hi_s, hi.clone())
        } else {
            lo.clone()
        };
    let mut hi = (hi_s, hi);
    for _ in 0..60 {
        if within(best.1.rendered_count) {
            break;
        }
        let mid = 0.5 * (lo.0 + hi.0);
        let art = run(mid)?;
        let c = art.rendered_count;
        if (c as f64 - target as f64).abs() < (best.1.rendered_count as f64 - target as f64).abs() {
            best = (mid, art.clone());
        }
        if c > target {
            lo = (mid, art);
        } else {
            hi = (mid, art);
        }
    }
    Ok(best)
}

/// One grid scale of the matched-count comparison, averaged over cameras.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPoint {
    pub s_v: f64,
    pub ratio: f64,
    pub count: f64,
    pub psnr: f64,
    /// The reference model filtered to the same count.
    pub reference_count: f64,
    pub reference_psnr: f64,
    /// Top-K opacity pruning of the reference model at the same count.
    pub topk_psnr: f64,
    /// Worst relative count mismatch of the reference model over cameras.
    pub max_count_error: f64,
}

/// For each grid scale, renders `model` and matches the count per camera
/// with `reference` (by bisection on its scale) and with top-K pruning of
/// `reference`.
pub fn matched_count_comparison(
    model: &GaussianScene,
    reference: &GaussianScene,
    cameras: &CameraSet,
    grid: &[f64],
    tau: f64,
    tolerance: f64,
) -> Result<Vec<MatchedPoint>> {
    check_grid(grid)?;
    if cameras.is_empty() {
        return Err(Error::Config("camera set is empty".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..cameras.len()).map(move |c| (g, c)))
        .collect();
    let rows: Vec<[f64; 7]> = pairs
        .par_iter()
        .map(|&(g, c)| {
            let view = &cameras.views[c];
            let q = LodQuery::with_tau(grid[g], tau);
            let ours = metrics_of(&render(model, &view.camera, &LodMode::Clod(q))?, &view.image)?;
            let (_, matched) = match_count(reference, &view.camera, ours.count, tau, tolerance)?;
            let reference_m = metrics_of(&matched, &view.image)?;
            let k = ours.count.min(reference.len());
            let topk = topk_opacity_baseline(reference, &view.camera, k, LodQuery::with_tau(1.0, tau))?;
            let topk_m = metrics_of(&topk, &view.image)?;
            let err = (reference_m.count as f64 - ours.count as f64).abs() / (ours.count as f64).max(1.0);
            Ok([
                ours.ratio,
                ours.count as f64,
                ours.psnr,
                reference_m.count as f64,
                reference_m.psnr,
                topk_m.psnr,
                err,
            ])
        })
        .collect::<Result<_>>()?;
    let nc = cameras.len();
    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, &s_v)| {
            let r = &rows[g * nc..(g + 1) * nc];
            let col = |i: usize| mean(r.iter().map(|x| x[i]));
            MatchedPoint {
                s_v,
                ratio: col(0),
                count: col(1),
                psnr: col(2),
                reference_count: col(3),
                reference_psnr: col(4),
                topk_psnr: col(5),
                max_count_error: r.iter().map(|x| x[6]).fold(0.0, f64::max),
            }
        })
        .collect())
}

/// Splits `width` into `n` strips whose widths differ by at most one pixel;
/// the first `width % n` strips get the extra column.
pub fn strip_bounds(width: usize, n: usize) -> Vec<(usize, usize)> {
    let base = width / n;
    let extra = width % n;
    let mut x = 0;
    (0..n)
        .map(|i| {
            let w = base + usize::from(i < extra);
            let r = (x, x + w);
            x += w;
            r
        })
        .collect()
}

pub const REGIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompareMode {
    Dlod,
    Clod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub mode: CompareMode,
    /// Column ranges `[start, end)` of the strips.
    pub strips: Vec<(usize, usize)>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// `|psnr[r] - psnr[r + 1]|` for each boundary.
    pub jumps: Vec<f64>,
    /// Mean rendered count over the strips' source renders.
    pub budget: f64,
}

impl RegionReport {
    pub fn max_jump(&self) -> f64 {
        self.jumps.iter().copied().fold(0.0, f64::max)
    }

    fn from_metrics(
        mode: CompareMode,
        strips: Vec<(usize, usize)>,
        psnr: Vec<f64>,
        ssim: Vec<f64>,
        budget: f64,
    ) -> Self {
        let jumps = psnr.windows(2).map(|w| (w[0] - w[1]).abs()).collect();
        Self {
            mode,
            strips,
            psnr,
            ssim,
            jumps,
            budget,
        }
    }
}

/// Region PSNR against ground truth. Strips narrower than the SSIM window
/// report SSIM as NaN.
fn region_metrics(img: &Image, gt: &Image, strips: &[(usize, usize)]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut p = Vec::new();
    let mut s = Vec::new();
    for &(x0, x1) in strips {
        let a = img.crop_columns(x0, x1);
        let b = gt.crop_columns(x0, x1);
        p.push(psnr(&a, &b)?);
        s.push(ssim(&a, &b).unwrap_or(f64::NAN));
    }
    Ok((p, s))
}

/// A scene with the mode used to render it.
#[derive(Clone, Copy, Debug)]
pub struct RenderPath<'a> {
    pub scene: &'a GaussianScene,
    pub mode: LodMode,
}

/// Per-strip scales of the continuous composite, left to right.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    /// Scales used as given.
    Fixed { scales: [f64; REGIONS] },
    /// Linear ramp from a searched left scale down to 1 at the right strip,
    /// chosen so the mean count matches the discrete budget.
    #[default]
    MatchedRamp,
}

pub const DEFAULT_FIXED_SCALES: [f64; REGIONS] = [4.0, 3.0, 2.0, 1.0];

/// Outcome of one discrete-vs-continuous comparison.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub dlod: RegionReport,
    pub clod: RegionReport,
    pub dlod_image: Image,
    pub clod_image: Image,
    pub clod_scales: [f64; REGIONS],
}

/// Relative budget mismatch allowed between the two composites.
pub const BUDGET_TOLERANCE: f64 = 0.10;

fn composite(renders: &[&Image], strips: &[(usize, usize)]) -> Image {
    let (w, h) = (renders[0].width, renders[0].height);
    let mut out = Image::new(w, h);
    for (r, &(x0, x1)) in strips.iter().enumerate() {
        for y in 0..h {
            for x in x0..x1 {
                let i = 3 * (y * w + x);
                out.data[i..i + 3].copy_from_slice(&renders[r].data[i..i + 3]);
            }
        }
    }
    out
}

fn ramp(left: f64) -> [f64; REGIONS] {
    std::array::from_fn(|r| left + (1.0 - left) * r as f64 / (REGIONS - 1) as f64)
}

/// Discrete composite: strips 1-2 from `low`, 3-4 from `high`. Continuous
/// composite: `clod` rendered at one scale per strip, detail increasing left
/// to right, with a budget matched to the discrete one.
pub fn dlod_clod_compare(
    high: RenderPath<'_>,
    low: RenderPath<'_>,
    clod: &GaussianScene,
    view: &View,
    schedule: &Schedule,
    tau: f64,
) -> Result<Comparison> {
    let cam = &view.camera;
    if cam.width < REGIONS {
        return Err(Error::Config(format!(
            "image width {} is narrower than {REGIONS} strips",
            cam.width
        )));
    }
    let strips = strip_bounds(cam.width, REGIONS);
    let hi = render(high.scene, cam, &high.mode)?;
    let lo = render(low.scene, cam, &low.mode)?;
    let dlod_budget = (lo.rendered_count + hi.rendered_count) as f64 / 2.0;
    let dlod_image = composite(&[&lo.image, &lo.image, &hi.image, &hi.image], &strips);

    let render_scales = |scales: [f64; REGIONS]| -> Result<(Vec<RenderArtifacts>, f64)> {
        let arts = scales
            .iter()
            .map(|&s| render(clod, cam, &LodMode::Clod(LodQuery::with_tau(s, tau))))
            .collect::<Result<Vec<_>>>()?;
        let budget = mean(arts.iter().map(|a| a.rendered_count as f64));
        Ok((arts, budget))
    };
    let (scales, (arts, clod_budget)) = match schedule {
        Schedule::Fixed { scales } => (*scales, render_scales(*scales)?),
        Schedule::MatchedRamp => {
            let mut a = 1.0;
            let mut hi_found = None;
            let mut best = (1.0, render_scales(ramp(1.0))?);
            if best.1 .1 > dlod_budget {
                let mut b = 2.0;
                loop {
                    let r = render_scales(ramp(b))?;
                    let done = r.1 <= dlod_budget || b > 1e4;
                    if (r.1 - dlod_budget).abs() < (best.1 .1 - dlod_budget).abs() {
                        best = (b, r);
                    }
                    if done {
                        hi_found = Some(b);
                        break;
                    }
                    a = b;
                    b *= 2.0;
                }
            }
            if let Some(mut hi_s) = hi_found {
                for _ in 0..50 {
                    if (best.1 .1 - dlod_budget).abs() <= 0.02 * dlod_budget {
                        break;
                    }
                    let mid = 0.5 * (a + hi_s);
                    let r = render_scales(ramp(mid))?;
                    let over = r.1 > dlod_budget;
                    if (r.1 - dlod_budget).abs() < (best.1 .1 - dlod_budget).abs() {
                        best = (mid, r);
                    }
                    if over {
                        a = mid;
                    } else {
                        hi_s = mid;
                    }
                }
            }
            (ramp(best.0), best.1)
        }
    };
    if (clod_budget - dlod_budget).abs() > BUDGET_TOLERANCE * dlod_budget.max(1.0) {
        return Err(Error::Config(format!(
            "continuous budget {clod_budget:.1} does not match the discrete budget {dlod_budget:.1} within 10% (scales {scales:?})"
        )));
    }
    let clod_image = composite(&arts.iter().map(|a| &a.image).collect::<Vec<_>>(), &strips);

    let (dp, ds) = region_metrics(&dlod_image, &view.image, &strips)?;
    let (cp, cs) = region_metrics(&clod_image, &view.image, &strips)?;
    Ok(Comparison {
        dlod: RegionReport::from_metrics(CompareMode::Dlod, strips.clone(), dp, ds, dlod_budget),
        clod: RegionReport::from_metrics(CompareMode::Clod, strips, cp, cs, clod_budget),
        dlod_image,
        clod_image,
        clod_scales: scales,
    })
}

/// Averages per-camera region reports of one mode strip by strip; jumps are
/// recomputed from the mean PSNRs.
pub fn average_reports(reports: &[&RegionReport]) -> Result<RegionReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("no reports to average".into()))?;
    let n = first.psnr.len();
    let col = |f: &dyn Fn(&RegionReport) -> &Vec<f64>, i: usize| mean(reports.iter().map(|r| f(r)[i]));
    let psnr = (0..n).map(|i| col(&|r| &r.psnr, i)).collect();
    let ssim = (0..n).map(|i| col(&|r| &r.ssim, i)).collect();
    let budget = mean(reports.iter().map(|r| r.budget));
    Ok(RegionReport::from_metrics(
        first.mode,
        first.strips.clone(),
        psnr,
        ssim,
        budget,
    ))
}

/// Quality and size of a model at `s_v = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub psnr: f64,
    pub ssim: f64,
    pub num_gaussians: usize,
    pub file_bytes: usize,
    pub file_mb: f64,
}

pub fn summarize(scene: &GaussianScene, cameras: &CameraSet) -> Result<Summary> {
    let point = quality_curve(scene, cameras, &[1.0], DEFAULT_TAU)?[0];
    let bytes = encode_ply(scene)?.len();
    Ok(Summary {
        psnr: point.psnr,
        ssim: point.ssim,
        num_gaussians: scene.len(),
        file_bytes: bytes,
        file_mb: bytes as f64 / 1e6,
    })
}
