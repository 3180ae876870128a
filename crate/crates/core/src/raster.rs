//! Tile-based splatting: forward compositing and the analytic backward pass.
//!
//! Work is split into 16x16 pixel tiles. Tiles are processed in parallel and
//! their partial results are merged in tile order, so images and gradients are
//! bit-identical for any worker count.

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::clod::{attenuation_grad, select, DistanceField, LodMode};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{GaussianScene, ParamGradients, ParamLayout};
use crate::project::{project_backward, project_geometry, SplatGeometry};
use crate::sh;

pub const TILE: usize = 16;
/// Upper clamp on the per-pixel opacity of one splat.
pub const ALPHA_MAX: f64 = 0.99;
/// Per-pixel contributions below this are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing for a pixel stops once transmittance drops below this.
pub const T_MIN: f64 = 1e-4;

#[derive(Clone, Debug)]
pub(crate) struct RenderedSplat {
    source: usize,
    geom: SplatGeometry,
    color: [f64; 3],
    clamped: [bool; 3],
    alpha_eff: f64,
}

/// Output of one render plus the state the backward pass replays.
#[derive(Clone, Debug)]
pub struct RenderArtifacts {
    pub image: Image,
    pub mode: LodMode,
    /// Attenuated opacity per primitive (zero-distance value for culled ones).
    pub alpha_eff: Vec<f64>,
    pub mask: Vec<bool>,
    pub rendered_count: usize,
    pub total: usize,
    /// `rendered_count / total`.
    pub rendered_ratio: f64,
    pub final_transmittance: Vec<f64>,
    pub distances: DistanceField,
    splats: Vec<RenderedSplat>,
    tiles: Vec<Vec<u32>>,
    n_contrib: Vec<u32>,
    tiles_x: usize,
    background: [f64; 3],
}

/// Compact description of a render, suitable for JSON export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSummary {
    pub rendered_count: usize,
    pub total: usize,
    pub eta_actual: f64,
    pub s_v: f64,
    pub tau: f64,
}

impl RenderArtifacts {
    pub fn summary(&self) -> RenderSummary {
        let (s_v, tau) = match &self.mode {
            LodMode::Clod(q) | LodMode::TopK { query: q, .. } => (q.scale, q.tau),
            LodMode::Off { tau } => (1.0, *tau),
        };
        RenderSummary {
            rendered_count: self.rendered_count,
            total: self.total,
            eta_actual: self.rendered_ratio,
            s_v,
            tau,
        }
    }

    /// Number of splats that reached the rasterizer (equals `rendered_count`
    /// minus masked primitives that failed projection, which cannot happen).
    pub fn splat_count(&self) -> usize {
        self.splats.len()
    }
}

fn tile_range(geom: &SplatGeometry, cam: &Camera) -> Option<(usize, usize, usize, usize)> {
    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let x0 = ((geom.mean2d.x - geom.radius) / TILE as f64).floor().max(0.0) as usize;
    let y0 = ((geom.mean2d.y - geom.radius) / TILE as f64).floor().max(0.0) as usize;
    let x1 = (((geom.mean2d.x + geom.radius) / TILE as f64).ceil().max(0.0) as usize).min(tiles_x);
    let y1 = (((geom.mean2d.y + geom.radius) / TILE as f64).ceil().max(0.0) as usize).min(tiles_y);
    (x0 < x1 && y0 < y1).then_some((x0, x1, y0, y1))
}

#[inline]
fn splat_alpha(s: &RenderedSplat, px: f64, py: f64) -> Option<(f64, f64, Vector2<f64>)> {
    let d = Vector2::new(px - s.geom.mean2d.x, py - s.geom.mean2d.y);
    let c = &s.geom.conic;
    let power = 0.5 * (c[(0, 0)] * d.x * d.x + c[(1, 1)] * d.y * d.y) + c[(0, 1)] * d.x * d.y;
    if power < 0.0 {
        return None;
    }
    let g = (-power).exp();
    let raw = s.alpha_eff * g;
    if raw < ALPHA_MIN {
        return None;
    }
    Some((raw, g, d))
}

struct TileOutput {
    pixels: Vec<(usize, [f64; 3], f64, u32)>,
}

fn render_tile(
    tile: usize,
    list: &[u32],
    splats: &[RenderedSplat],
    cam: &Camera,
    tiles_x: usize,
    bg: [f64; 3],
) -> TileOutput {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let mut pixels = Vec::with_capacity(TILE * TILE);
    for y in ty * TILE..((ty + 1) * TILE).min(cam.height) {
        for x in tx * TILE..((tx + 1) * TILE).min(cam.width) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            let mut n = 0u32;
            for (j, &si) in list.iter().enumerate() {
                let s = &splats[si as usize];
                let Some((raw, _, _)) = splat_alpha(s, px, py) else {
                    continue;
                };
                let a = raw.min(ALPHA_MAX);
                for (c, sc) in rgb.iter_mut().zip(&s.color) {
                    *c += sc * a * t;
                }
                t *= 1.0 - a;
                n = j as u32 + 1;
                if t < T_MIN {
                    break;
                }
            }
            for ch in 0..3 {
                rgb[ch] += t * bg[ch];
            }
            pixels.push((y * cam.width + x, rgb, t, n));
        }
    }
    TileOutput { pixels }
}

/// Renders `scene` from `cam`, selecting and attenuating primitives per `mode`.
pub fn render(scene: &GaussianScene, cam: &Camera, mode: &LodMode) -> Result<RenderArtifacts> {
    scene.check_finite()?;
    cam.validate()?;
    mode.validate()?;

    let geometry: Vec<Option<SplatGeometry>> = scene.primitives.par_iter().map(|p| project_geometry(p, cam)).collect();
    let distances = DistanceField::from_geometry(scene, cam, &geometry);
    let selection = select(scene, distances, mode);

    let center = cam.center();
    let mut splats: Vec<RenderedSplat> = geometry
        .into_iter()
        .enumerate()
        .filter(|(i, g)| selection.mask[*i] && g.is_some())
        .map(|(i, g)| {
            let p = &scene.primitives[i];
            let dir = (p.position - center).normalize();
            let (color, clamped) = sh::color_with_clamp(&p.sh, &dir, scene.sh_degree);
            RenderedSplat {
                source: i,
                geom: g.unwrap(),
                color,
                clamped,
                alpha_eff: selection.alpha_eff[i],
            }
        })
        .collect();
    splats.sort_by(|a, b| a.geom.depth.total_cmp(&b.geom.depth).then(a.source.cmp(&b.source)));

    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        if let Some((x0, x1, y0, y1)) = tile_range(&s.geom, cam) {
            for ty in y0..y1 {
                for tx in x0..x1 {
                    tiles[ty * tiles_x + tx].push(si as u32);
                }
            }
        }
    }

    let bg = scene.background;
    let outputs: Vec<TileOutput> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| render_tile(t, list, &splats, cam, tiles_x, bg))
        .collect();

    let npix = cam.width * cam.height;
    let mut image = Image::new(cam.width, cam.height);
    let mut final_transmittance = vec![1.0; npix];
    let mut n_contrib = vec![0u32; npix];
    for out in outputs {
        for (pix, rgb, t, n) in out.pixels {
            image.data[3 * pix..3 * pix + 3].copy_from_slice(&rgb);
            final_transmittance[pix] = t;
            n_contrib[pix] = n;
        }
    }

    Ok(RenderArtifacts {
        image,
        mode: *mode,
        alpha_eff: selection.alpha_eff,
        mask: selection.mask,
        rendered_count: selection.rendered_count,
        total: scene.len(),
        rendered_ratio: selection.rendered_ratio,
        final_transmittance,
        distances: selection.distances,
        splats,
        tiles,
        n_contrib,
        tiles_x,
        background: bg,
    })
}

/// Per-splat screen-space gradient: color(3), alpha_eff, mean2d(2), conic
/// entries (00, 01, 11) as a symmetric-matrix gradient.
type ScreenGrad = [f64; 9];

fn backward_tile(tile: usize, art: &RenderArtifacts, cam: &Camera, d_image: &Image) -> Vec<ScreenGrad> {
    let list = &art.tiles[tile];
    let mut acc = vec![[0.0; 9]; list.len()];
    if list.is_empty() {
        return acc;
    }
    let (tx, ty) = (tile % art.tiles_x, tile / art.tiles_x);
    let bg = art.background;
    for y in ty * TILE..((ty + 1) * TILE).min(cam.height) {
        for x in tx * TILE..((tx + 1) * TILE).min(cam.width) {
            let pix = y * cam.width + x;
            let n = art.n_contrib[pix] as usize;
            if n == 0 {
                continue;
            }
            let dpix = [
                d_image.data[3 * pix],
                d_image.data[3 * pix + 1],
                d_image.data[3 * pix + 2],
            ];
            let bg_dot = bg[0] * dpix[0] + bg[1] * dpix[1] + bg[2] * dpix[2];
            let t_final = art.final_transmittance[pix];
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = t_final;
            let mut behind = [0.0; 3];
            let mut last_a = 0.0;
            let mut last_c = [0.0; 3];
            for j in (0..n).rev() {
                let s = &art.splats[list[j] as usize];
                let Some((raw, g, d)) = splat_alpha(s, px, py) else {
                    continue;
                };
                let a = raw.min(ALPHA_MAX);
                t /= 1.0 - a;
                let w = a * t;
                let slot = &mut acc[j];
                for ch in 0..3 {
                    slot[ch] += w * dpix[ch];
                    behind[ch] = last_a * last_c[ch] + (1.0 - last_a) * behind[ch];
                }
                last_a = a;
                last_c = s.color;
                let mut d_a = 0.0;
                for ch in 0..3 {
                    d_a += (s.color[ch] - behind[ch]) * t * dpix[ch];
                }
                d_a -= t_final / (1.0 - a) * bg_dot;
                if raw > ALPHA_MAX {
                    continue;
                }
                slot[3] += d_a * g;
                let d_power = -g * d_a * s.alpha_eff;
                let c = &s.geom.conic;
                // power = 1/2 d^T C d, d = pixel - mean
                let cd = Vector2::new(c[(0, 0)] * d.x + c[(0, 1)] * d.y, c[(0, 1)] * d.x + c[(1, 1)] * d.y);
                slot[4] -= d_power * cd.x;
                slot[5] -= d_power * cd.y;
                slot[6] += d_power * 0.5 * d.x * d.x;
                slot[7] += d_power * 0.5 * d.x * d.y;
                slot[8] += d_power * 0.5 * d.y * d.y;
            }
        }
    }
    acc
}

/// Gradients of a scalar loss with respect to every scene parameter, given
/// `d_image` = dL/d(pixel). `extra_d_alpha` adds loss terms that depend on the
/// attenuated opacities directly (any in-frustum primitive, masked or not).
pub fn render_backward(
    scene: &GaussianScene,
    cam: &Camera,
    art: &RenderArtifacts,
    d_image: &Image,
    extra_d_alpha: Option<&[f64]>,
) -> Result<ParamGradients> {
    if d_image.width != cam.width || d_image.height != cam.height || d_image.data.len() != art.image.data.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}x3", cam.width, cam.height),
            actual: format!("{}x{} ({} values)", d_image.width, d_image.height, d_image.data.len()),
        });
    }
    if art.total != scene.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} primitives", art.total),
            actual: format!("{} primitives", scene.len()),
        });
    }
    if let Some(extra) = extra_d_alpha {
        if extra.len() != scene.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} opacity gradients", scene.len()),
                actual: format!("{}", extra.len()),
            });
        }
    }

    let per_tile: Vec<Vec<ScreenGrad>> = (0..art.tiles.len())
        .into_par_iter()
        .map(|t| backward_tile(t, art, cam, d_image))
        .collect();
    let mut screen = vec![[0.0; 9]; art.splats.len()];
    for (t, grads) in per_tile.iter().enumerate() {
        for (j, g) in grads.iter().enumerate() {
            let slot = &mut screen[art.tiles[t][j] as usize];
            for k in 0..9 {
                slot[k] += g[k];
            }
        }
    }

    let layout = scene.layout();
    let n = scene.len();
    let mut grads = ParamGradients::zeros(layout, n);
    let mut d_alpha_eff = vec![0.0; n];
    let mut d_position = vec![Vector3::zeros(); n];
    let center = cam.center();
    let degree = scene.sh_degree;

    let splat_grads: Vec<_> = art
        .splats
        .par_iter()
        .zip(screen.par_iter())
        .map(|(s, g)| {
            let p = &scene.primitives[s.source];
            let d_mean = Vector2::new(g[4], g[5]);
            let d_conic = Matrix2::new(g[6], g[7], g[7], g[8]);
            let geo = project_backward(p, cam, &s.geom, &d_mean, &d_conic);

            let v = p.position - center;
            let dist = v.norm();
            let dir = v / dist;
            let b = sh::basis(&dir, degree);
            let bg = sh::basis_grad(&dir, degree);
            let d_color: [f64; 3] = std::array::from_fn(|ch| if s.clamped[ch] { 0.0 } else { g[ch] });
            let mut d_sh = vec![[0.0; 3]; p.sh.len()];
            let mut d_dir = Vector3::zeros();
            for k in 0..p.sh.len() {
                for ch in 0..3 {
                    d_sh[k][ch] = d_color[ch] * b[k];
                    let w = d_color[ch] * p.sh[k][ch];
                    d_dir += Vector3::new(bg[k][0], bg[k][1], bg[k][2]) * w;
                }
            }
            let d_pos_color = (d_dir - dir * dir.dot(&d_dir)) / dist;
            (s.source, geo, d_pos_color, d_sh, g[3])
        })
        .collect();

    for (src, geo, d_pos_color, d_sh, d_alpha) in splat_grads {
        let slot = grads.primitive_mut(src);
        for k in 0..3 {
            slot[ParamLayout::LOG_SCALE + k] += geo.log_scale[k];
        }
        for k in 0..4 {
            slot[ParamLayout::ROTATION + k] += geo.rotation[k];
        }
        for (k, c) in d_sh.iter().enumerate() {
            for ch in 0..3 {
                slot[ParamLayout::SH + 3 * k + ch] += c[ch];
            }
        }
        d_position[src] += geo.position + d_pos_color;
        d_alpha_eff[src] += d_alpha;
    }

    if let Some(extra) = extra_d_alpha {
        for (i, e) in extra.iter().enumerate() {
            if art.distances.in_frustum[i] {
                d_alpha_eff[i] += e;
            }
        }
    }

    // Attenuated opacity -> opacity logit, sigma_d and normalized distance.
    let mut d_norm = vec![0.0; n];
    for (i, p) in scene.primitives.iter().enumerate() {
        let da = d_alpha_eff[i];
        if da == 0.0 {
            continue;
        }
        let alpha = p.opacity();
        let slot = grads.primitive_mut(i);
        match art.mode.query() {
            Some(q) => {
                let ag = attenuation_grad(alpha, art.distances.normalized[i], p.sigma_d, q);
                slot[ParamLayout::OPACITY] += da * ag.alpha * alpha * (1.0 - alpha);
                slot[ParamLayout::SIGMA_D] += da * ag.sigma_d;
                d_norm[i] = da * ag.d_norm;
            }
            None => slot[ParamLayout::OPACITY] += da * alpha * (1.0 - alpha),
        }
    }
    art.distances.backward(scene, cam, &d_norm, &mut d_position);
    for (i, d) in d_position.iter().enumerate() {
        let slot = grads.primitive_mut(i);
        for k in 0..3 {
            slot[ParamLayout::POSITION + k] += d[k];
        }
    }
    Ok(grads)
}

/// Renders and differentiates in one call.
pub fn render_with_gradients(
    scene: &GaussianScene,
    cam: &Camera,
    mode: &LodMode,
    loss_grad: &Image,
) -> Result<(RenderArtifacts, ParamGradients)> {
    let art = render(scene, cam, mode)?;
    let grads = render_backward(scene, cam, &art, loss_grad, None)?;
    Ok((art, grads))
}
