//! Differentiable sphere rendering: voxels become opaque-ish spheres, each
//! pixel composites up to M depth-selected spheres with the blending weight
//!
//!   w = o * d * exp(o * z * gamma) / (exp(eps * gamma) + sum_k o_k * d_k * exp(o_k * z_k * gamma))
//!
//! where z is depth normalized to [0,1] (1 = nearest) and d measures ray
//! proximity to the sphere. Rendered feature maps go through a small conv
//! UNet to produce 2D semantic logits.

use std::path::Path;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::fusion::Camera;
use crate::grid::GridConfig;
use crate::params::{Binder, ParamStore};
use crate::sparse::ops::SparseVar;
use crate::tape::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    /// d = min(1, dist/r): the formula exactly as written
    AsPrinted,
    /// d = 1 - min(1, dist/r): center hits contribute most
    Closeness,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    pub gamma: f64,
    pub epsilon: f64,
    pub max_spheres_per_pixel: usize,
    pub z_near: f64,
    pub z_far: f64,
    pub coverage_mode: CoverageMode,
    pub r_min: f64,
    /// true: exact ray-sphere coverage; false: screen-space projected radius
    pub exact_coverage: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            gamma: 1.0,
            epsilon: 1.0,
            max_spheres_per_pixel: 16,
            z_near: 0.1,
            z_far: 80.0,
            coverage_mode: CoverageMode::Closeness,
            r_min: 0.05,
            exact_coverage: false,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z_near >= self.z_far {
            return Err(Error::Config(format!(
                "z_near {} must be below z_far {}",
                self.z_near, self.z_far
            )));
        }
        if self.max_spheres_per_pixel == 0 {
            return Err(Error::Config("need at least one sphere per pixel".to_string()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".to_string()));
        }
        if self.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be non-negative".to_string()));
        }
        if self.r_min <= 0.0 {
            return Err(Error::Config("r_min must be positive".to_string()));
        }
        Ok(())
    }
}

/// Spheres with fixed centers and differentiable features, radii, opacities.
pub struct SphereCloud<'t> {
    pub centers: Vec<[f64; 3]>,
    pub features: Var<'t>,
    pub radii: Var<'t>,
    pub opacities: Var<'t>,
}

impl<'t> SphereCloud<'t> {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// One sphere per voxel at its metric center. Radius and opacity come from
/// unconstrained per-row parameters: radius = softplus(p) + r_min keeps radii
/// positive, opacity = sigmoid(p) stays in (0,1). Centers are fixed.
pub fn spheres_from_voxels<'t>(
    tensor: &SparseVar<'t>,
    radius_params: Var<'t>,
    opacity_params: Var<'t>,
    grid: &GridConfig,
    cfg: &RenderConfig,
) -> Result<SphereCloud<'t>> {
    let n = tensor.len();
    if radius_params.shape()[0] != n || opacity_params.shape()[0] != n {
        return Err(Error::Length(format!(
            "{} radius and {} opacity parameters for {} voxels",
            radius_params.shape()[0],
            opacity_params.shape()[0],
            n
        )));
    }
    let centers = tensor
        .coords
        .iter()
        .map(|c| grid.voxel_center([c.x, c.y, c.z]))
        .collect();
    Ok(SphereCloud {
        centers,
        features: tensor.feats,
        radii: radius_params.softplus().add_scalar(cfg.r_min),
        opacities: opacity_params.sigmoid(),
    })
}

/// Ray proximity term of the blending weight.
pub fn coverage(dist_orth: f64, r: f64, mode: CoverageMode) -> f64 {
    let ratio = (dist_orth / r).min(1.0);
    match mode {
        CoverageMode::AsPrinted => ratio,
        CoverageMode::Closeness => 1.0 - ratio,
    }
}

/// Depth mapped so the near plane gives 1 and the far plane 0.
pub fn normalized_depth(depth: f64, cfg: &RenderConfig) -> f64 {
    (cfg.z_far - depth) / (cfg.z_far - cfg.z_near)
}

/// Blending weights for one pixel given (opacity, coverage, normalized
/// depth) per selected sphere; stabilized by subtracting the largest
/// exponent before exponentiation.
pub fn blend_weights_scalar(entries: &[(f64, f64, f64)], gamma: f64, epsilon: f64) -> Vec<f64> {
    let mut m = epsilon * gamma;
    for &(o, _, z) in entries {
        m = m.max(o * z * gamma);
    }
    let mut denom = (epsilon * gamma - m).exp();
    let numers: Vec<f64> = entries
        .iter()
        .map(|&(o, d, z)| {
            let n = o * d * (o * z * gamma - m).exp();
            denom += n;
            n
        })
        .collect();
    numers.into_iter().map(|n| n / denom).collect()
}

/// Feature image plus the per-pixel compositing record.
pub struct Rendered<'t> {
    /// (d, H, W)
    pub image: Var<'t>,
    /// per pixel, row-major y*W+x: (sphere index, weight) back to front
    pub weights: Vec<Vec<(usize, f64)>>,
    /// nearest composited sphere depth per pixel, 0 where uncovered
    pub depth: Array2<f64>,
}

struct PixelCandidate {
    sphere: usize,
    depth: f64,
    dist_orth: f64,
}

/// Project sphere centers, pick up to M nearest covering spheres per pixel,
/// and composite features with the blending weights. Pixels covered by no
/// sphere stay zero.
pub fn render_features<'t>(
    cloud: &SphereCloud<'t>,
    camera: &Camera,
    cfg: &RenderConfig,
) -> Result<Rendered<'t>> {
    cfg.validate()?;
    let tape = cloud.features.tape();
    let (w_img, h_img) = (camera.width, camera.height);
    let d_feat = cloud.feature_dim();
    let n_pix = w_img * h_img;

    let radii_vals = cloud.radii.value();
    let opac_vals = cloud.opacities.value();

    // camera origin and per-sphere projections
    let origin = {
        let o = -(camera.r.transpose() * camera.t);
        [o.x, o.y, o.z]
    };
    let fx = camera.k[(0, 0)];

    let mut candidates: Vec<Vec<PixelCandidate>> = (0..n_pix).map(|_| Vec::new()).collect();
    for (s, &c) in cloud.centers.iter().enumerate() {
        let (u, v, depth) = camera.project(c);
        if !(depth > cfg.z_near && depth < cfg.z_far) {
            continue;
        }
        let r = radii_vals[[s, 0]];
        let r_screen = r * fx / depth;
        let (u_lo, u_hi) = (
            ((u - r_screen).floor().max(0.0)) as usize,
            ((u + r_screen).ceil().min(w_img as f64 - 1.0)) as usize,
        );
        let (v_lo, v_hi) = (
            ((v - r_screen).floor().max(0.0)) as usize,
            ((v + r_screen).ceil().min(h_img as f64 - 1.0)) as usize,
        );
        if u - r_screen >= w_img as f64 || u + r_screen < 0.0 {
            continue;
        }
        if v - r_screen >= h_img as f64 || v + r_screen < 0.0 {
            continue;
        }
        for py in v_lo..=v_hi {
            for px in u_lo..=u_hi {
                let (pcx, pcy) = (px as f64 + 0.5, py as f64 + 0.5);
                // 3D orthogonal distance of the pixel ray to the center
                let target = camera.back_project(pcx, pcy, 1.0);
                let mut dir = [
                    target[0] - origin[0],
                    target[1] - origin[1],
                    target[2] - origin[2],
                ];
                let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
                for a in &mut dir {
                    *a /= norm;
                }
                let rel = [c[0] - origin[0], c[1] - origin[1], c[2] - origin[2]];
                let along = rel[0] * dir[0] + rel[1] * dir[1] + rel[2] * dir[2];
                let orth2 = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2])
                    - along * along;
                let dist_orth = orth2.max(0.0).sqrt();
                let covered = if cfg.exact_coverage {
                    dist_orth <= r
                } else {
                    let dp = ((pcx - u).powi(2) + (pcy - v).powi(2)).sqrt();
                    dp <= r_screen
                };
                if covered {
                    candidates[py * w_img + px].push(PixelCandidate {
                        sphere: s,
                        depth,
                        dist_orth,
                    });
                }
            }
        }
    }

    // per-pixel selection: M nearest in depth, then composite back to front
    let mut pair_sphere: Vec<u32> = Vec::new();
    let mut pair_pixel: Vec<u32> = Vec::new();
    let mut pair_dist: Vec<f64> = Vec::new();
    let mut pair_zg: Vec<f64> = Vec::new();
    let mut pair_m: Vec<f64> = Vec::new();
    let mut covered_pixels: Vec<u32> = Vec::new();
    let mut bg_terms: Vec<f64> = Vec::new();
    let mut weights_layout: Vec<Vec<usize>> = Vec::new();
    let mut depth_map = Array2::<f64>::zeros((h_img, w_img));

    for (pix, cand) in candidates.iter_mut().enumerate() {
        if cand.is_empty() {
            continue;
        }
        cand.sort_by(|a, b| {
            a.depth
                .partial_cmp(&b.depth)
                .unwrap()
                .then(a.sphere.cmp(&b.sphere))
        });
        cand.truncate(cfg.max_spheres_per_pixel);
        depth_map[[pix / w_img, pix % w_img]] = cand[0].depth;
        // back to front: farthest first; equal depths by sphere index
        cand.sort_by(|a, b| {
            b.depth
                .partial_cmp(&a.depth)
                .unwrap()
                .then(a.sphere.cmp(&b.sphere))
        });
        let covered_row = covered_pixels.len() as u32;
        let mut m = cfg.epsilon * cfg.gamma;
        for pc in cand.iter() {
            let z = normalized_depth(pc.depth, cfg);
            m = m.max(opac_vals[[pc.sphere, 0]] * z * cfg.gamma);
        }
        let mut layout = Vec::with_capacity(cand.len());
        for pc in cand.iter() {
            layout.push(pair_sphere.len());
            pair_sphere.push(pc.sphere as u32);
            pair_pixel.push(covered_row);
            pair_dist.push(pc.dist_orth);
            pair_zg.push(normalized_depth(pc.depth, cfg) * cfg.gamma);
            pair_m.push(m);
        }
        covered_pixels.push(pix as u32);
        bg_terms.push((cfg.epsilon * cfg.gamma - m).exp());
        weights_layout.push(layout);
    }

    let zero_image = || {
        tape.constant(ArrayD::zeros(IxDyn(&[d_feat, h_img, w_img])))
    };
    if pair_sphere.is_empty() {
        return Ok(Rendered {
            image: zero_image(),
            weights: vec![Vec::new(); n_pix],
            depth: depth_map,
        });
    }

    let n_pairs = pair_sphere.len();
    let n_cov = covered_pixels.len();
    let pair_sphere = Rc::new(pair_sphere);
    let pair_pixel = Rc::new(pair_pixel);

    let o_pairs = cloud.opacities.gather_rows(pair_sphere.clone());
    let r_pairs = cloud.radii.gather_rows(pair_sphere.clone());
    let dist_const = tape.constant(
        Array2::from_shape_fn((n_pairs, 1), |(i, _)| pair_dist[i]).into_dyn(),
    );
    let ratio = dist_const.div(r_pairs).min_const(1.0);
    let d_pairs = match cfg.coverage_mode {
        CoverageMode::AsPrinted => ratio,
        CoverageMode::Closeness => ratio.neg().add_scalar(1.0),
    };
    let zg_const = tape.constant(
        Array2::from_shape_fn((n_pairs, 1), |(i, _)| pair_zg[i]).into_dyn(),
    );
    let m_const = tape.constant(
        Array2::from_shape_fn((n_pairs, 1), |(i, _)| pair_m[i]).into_dyn(),
    );
    let expo = o_pairs.mul(zg_const).sub(m_const).exp();
    let numer = o_pairs.mul(d_pairs).mul(expo);
    let bg_const = tape.constant(
        Array2::from_shape_fn((n_cov, 1), |(i, _)| bg_terms[i]).into_dyn(),
    );
    let denom = numer
        .scatter_add_rows(pair_pixel.clone(), n_cov)
        .add(bg_const);
    let w_pairs = numer.div(denom.gather_rows(pair_pixel.clone()));

    let f_pairs = cloud.features.gather_rows(pair_sphere.clone());
    let pix_feats = f_pairs
        .scale_rows(w_pairs)
        .scatter_add_rows(pair_pixel.clone(), n_cov);
    let image = pix_feats.rows_to_image(Rc::new(covered_pixels.clone()), h_img, w_img);

    let w_vals = w_pairs.value();
    let mut weights: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_pix];
    for (row, layout) in weights_layout.iter().enumerate() {
        let pix = covered_pixels[row] as usize;
        weights[pix] = layout
            .iter()
            .map(|&p| (pair_sphere[p] as usize, w_vals[[p, 0]]))
            .collect();
    }

    Ok(Rendered {
        image,
        weights,
        depth: depth_map,
    })
}

/// Small 2-down/2-up conv UNet turning a rendered feature image into 2D
/// semantic logits; needs H and W divisible by 4.
pub struct NeuralShade {
    pub in_channels: usize,
    pub hidden: [usize; 2],
    pub num_classes: usize,
}

impl NeuralShade {
    pub fn new(in_channels: usize, hidden: [usize; 2], num_classes: usize) -> Self {
        NeuralShade {
            in_channels,
            hidden,
            num_classes,
        }
    }

    pub fn init_params<R: rand::Rng>(&self, store: &mut ParamStore, rng: &mut R, prefix: &str) {
        use crate::params::{glorot_conv2d, zeros1};
        let [h1, h2] = self.hidden;
        store.insert(
            &format!("{prefix}.enc1.w"),
            glorot_conv2d(rng, h1, self.in_channels, 3),
        );
        store.insert(&format!("{prefix}.enc1.b"), zeros1(h1));
        store.insert(&format!("{prefix}.enc2.w"), glorot_conv2d(rng, h2, h1, 3));
        store.insert(&format!("{prefix}.enc2.b"), zeros1(h2));
        store.insert(&format!("{prefix}.dec1.w"), glorot_conv2d(rng, h1, h2, 3));
        store.insert(&format!("{prefix}.dec1.b"), zeros1(h1));
        store.insert(
            &format!("{prefix}.out.w"),
            glorot_conv2d(rng, self.num_classes, h1, 3),
        );
        store.insert(&format!("{prefix}.out.b"), zeros1(self.num_classes));
    }

    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        prefix: &str,
        f: Var<'t>,
    ) -> Result<Var<'t>> {
        let shape = f.shape();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::Shape(format!(
                "shading expects ({},H,W), got {:?}",
                self.in_channels, shape
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "shading needs H and W divisible by 4, got {h}x{w}"
            )));
        }
        let e1 = f
            .conv2d(
                binder.var(&format!("{prefix}.enc1.w"))?,
                binder.var(&format!("{prefix}.enc1.b"))?,
                2,
            )
            .relu();
        let e2 = e1
            .conv2d(
                binder.var(&format!("{prefix}.enc2.w"))?,
                binder.var(&format!("{prefix}.enc2.b"))?,
                2,
            )
            .relu();
        let d1 = e2
            .upsample2x_nearest()
            .conv2d(
                binder.var(&format!("{prefix}.dec1.w"))?,
                binder.var(&format!("{prefix}.dec1.b"))?,
                1,
            )
            .relu()
            .add(e1);
        Ok(d1.upsample2x_nearest().conv2d(
            binder.var(&format!("{prefix}.out.w"))?,
            binder.var(&format!("{prefix}.out.b"))?,
            1,
        ))
    }
}

/// Binary PPM with one RGB triple per pixel.
pub fn write_ppm(path: &Path, rgb: &[[u8; 3]], width: usize, height: usize) -> Result<()> {
    use std::io::Write;
    if rgb.len() != width * height {
        return Err(Error::Length(format!(
            "{} pixels for a {width}x{height} image",
            rgb.len()
        )));
    }
    let mut buf = Vec::with_capacity(rgb.len() * 3 + 32);
    buf.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    for px in rgb {
        buf.extend_from_slice(px);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Class-id image rendered with the fixed palette.
pub fn class_map_to_ppm(path: &Path, labels: &Array2<i32>) -> Result<()> {
    let (h, w) = (labels.shape()[0], labels.shape()[1]);
    let rgb: Vec<[u8; 3]> = labels
        .iter()
        .map(|&l| {
            if (0..crate::classes::NUM_CLASSES as i32).contains(&l) {
                crate::classes::CLASS_COLORS[l as usize]
            } else {
                [0, 0, 0]
            }
        })
        .collect();
    write_ppm(path, &rgb, w, h)
}

/// Depth image as grayscale, near = bright.
pub fn depth_to_ppm(path: &Path, depth: &Array2<f64>, z_far: f64) -> Result<()> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let rgb: Vec<[u8; 3]> = depth
        .iter()
        .map(|&d| {
            if d <= 0.0 {
                [0u8, 0, 0]
            } else {
                let v = (255.0 * (1.0 - (d / z_far).clamp(0.0, 1.0))) as u8;
                [v, v, v]
            }
        })
        .collect();
    write_ppm(path, &rgb, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{check_gradients, ParamStore};
    use crate::sparse::Coordinate;
    use crate::tape::Tape;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam32() -> Camera {
        Camera::look_along([0.0, 0.0, 1.5], 0.0, 20.0, 20.0, 32, 24)
    }

    /// Straight Eq. 2 without any stabilization, for cross-checking.
    fn naive_weights(entries: &[(f64, f64, f64)], gamma: f64, epsilon: f64) -> Vec<f64> {
        let denom: f64 = (epsilon * gamma).exp()
            + entries
                .iter()
                .map(|&(o, d, z)| o * d * (o * z * gamma).exp())
                .sum::<f64>();
        entries
            .iter()
            .map(|&(o, d, z)| o * d * (o * z * gamma).exp() / denom)
            .collect()
    }

    #[test]
    fn unit_sphere_center_hit_weight() {
        let w = blend_weights_scalar(&[(1.0, 1.0, 1.0)], 1.0, 0.0);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(w[0], e / (1.0 + e), epsilon = 1e-9);
        assert_abs_diff_eq!(w[0], 0.731058578630, epsilon = 1e-9);
    }

    #[test]
    fn zero_opacity_gives_zero_weight() {
        let w = blend_weights_scalar(&[(0.0, 1.0, 0.9), (0.5, 0.5, 0.5)], 1.3, 1.0);
        assert_eq!(w[0], 0.0);
        assert!(w[1] > 0.0);
    }

    #[test]
    fn identical_spheres_share_weight_below_half() {
        let e = (0.8, 0.7, 0.6);
        let w = blend_weights_scalar(&[e, e], 1.0, 1.0);
        assert_abs_diff_eq!(w[0], w[1], epsilon = 1e-15);
        assert!(w[0] < 0.5);
    }

    #[test]
    fn stabilized_weights_match_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let entries: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let gamma = rng.gen_range(0.1..5.0);
            let epsilon = rng.gen_range(0.0..2.0);
            let got = blend_weights_scalar(&entries, gamma, epsilon);
            let want = naive_weights(&entries, gamma, epsilon);
            let total: f64 = got.iter().sum();
            assert!(total < 1.0);
            for (g, w) in got.iter().zip(want.iter()) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-12);
                assert!(*g >= 0.0 && *g < 1.0);
            }
        }
    }

    #[test]
    fn coverage_modes_disagree_at_center() {
        assert_eq!(coverage(0.0, 0.5, CoverageMode::AsPrinted), 0.0);
        assert_eq!(coverage(0.0, 0.5, CoverageMode::Closeness), 1.0);
        assert_abs_diff_eq!(
            coverage(0.25, 0.5, CoverageMode::Closeness),
            0.5,
            epsilon = 1e-12
        );
        assert_eq!(coverage(2.0, 0.5, CoverageMode::AsPrinted), 1.0);
    }

    #[test]
    fn opacity_monotone_in_closeness_mode() {
        let mut last = 0.0;
        for i in 1..=10 {
            let o = i as f64 / 10.0;
            let w = blend_weights_scalar(&[(o, 1.0, 0.8)], 1.0, 1.0)[0];
            assert!(w > last, "w({o}) = {w} not above {last}");
            last = w;
        }
    }

    #[test]
    fn nearer_sphere_wins() {
        let near = (0.7, 0.9, 0.9);
        let far = (0.7, 0.9, 0.2);
        let w = blend_weights_scalar(&[near, far], 1.0, 1.0);
        assert!(w[0] > w[1]);
    }

    fn sphere_cloud<'t>(
        tape: &'t Tape,
        centers: Vec<[f64; 3]>,
        feats: Vec<[f64; 2]>,
        r_param: f64,
        o_param: f64,
    ) -> SphereCloud<'t> {
        let n = centers.len();
        let f = Array2::from_shape_fn((n, 2), |(i, j)| feats[i][j]);
        SphereCloud {
            centers,
            features: tape.leaf(f.into_dyn()),
            radii: tape
                .leaf(Array2::from_elem((n, 1), r_param).into_dyn())
                .softplus()
                .add_scalar(0.05),
            opacities: tape
                .leaf(Array2::from_elem((n, 1), o_param).into_dyn())
                .sigmoid(),
        }
    }

    #[test]
    fn voxel_sphere_centers_and_radius() {
        let tape = Tape::new();
        let grid = GridConfig::paper();
        let coords = vec![Coordinate::new(0, 0, 0, 0)];
        let feats = tape.leaf(array![[1.0, 2.0]].into_dyn());
        let t = SparseVar {
            coords: Rc::new(coords),
            stride: 1,
            feats,
        };
        let rp = tape.leaf(array![[0.3]].into_dyn());
        let op = tape.leaf(array![[-0.2]].into_dyn());
        let cfg = RenderConfig::default();
        let cloud = spheres_from_voxels(&t, rp, op, &grid, &cfg).unwrap();
        assert_abs_diff_eq!(cloud.centers[0][0], -39.8, epsilon = 1e-12);
        assert_abs_diff_eq!(cloud.centers[0][1], -39.8, epsilon = 1e-12);
        assert_abs_diff_eq!(cloud.centers[0][2], -0.8, epsilon = 1e-12);
        // scalar softplus and sigmoid oracles
        let want_r = (1.0 + (0.3f64).exp()).ln() + 0.05;
        let want_o = 1.0 / (1.0 + (0.2f64).exp());
        assert_abs_diff_eq!(cloud.radii.value()[[0, 0]], want_r, epsilon = 1e-12);
        assert_abs_diff_eq!(cloud.opacities.value()[[0, 0]], want_o, epsilon = 1e-12);
    }

    #[test]
    fn empty_tensor_renders_black() {
        let tape = Tape::new();
        let grid = GridConfig::desk();
        let t = SparseVar {
            coords: Rc::new(vec![]),
            stride: 1,
            feats: tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[0, 2]))),
        };
        let rp = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[0, 1])));
        let op = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[0, 1])));
        let cfg = RenderConfig::default();
        let cloud = spheres_from_voxels(&t, rp, op, &grid, &cfg).unwrap();
        assert!(cloud.is_empty());
        let out = render_features(&cloud, &cam32(), &cfg).unwrap();
        assert!(out.image.value().iter().all(|&v| v == 0.0));
        assert!(out.weights.iter().all(|w| w.is_empty()));
    }

    #[test]
    fn single_sphere_pixel_matches_scalar_composition() {
        let tape = Tape::new();
        let cfg = RenderConfig::default();
        let cam = cam32();
        let center = [5.0, 0.0, 1.5];
        let cloud = sphere_cloud(&tape, vec![center], vec![[2.0, -1.0]], 0.4, 0.6);
        let out = render_features(&cloud, &cam, &cfg).unwrap();

        let (u, v, depth) = cam.project(center);
        let (px, py) = (15usize, 12usize);
        // oracle geometry straight from the camera model
        let origin = {
            let o = -(cam.r.transpose() * cam.t);
            [o.x, o.y, o.z]
        };
        let target = cam.back_project(px as f64 + 0.5, py as f64 + 0.5, 1.0);
        let dir = {
            let d = [
                target[0] - origin[0],
                target[1] - origin[1],
                target[2] - origin[2],
            ];
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            [d[0] / n, d[1] / n, d[2] / n]
        };
        let rel = [
            center[0] - origin[0],
            center[1] - origin[1],
            center[2] - origin[2],
        ];
        let along = rel[0] * dir[0] + rel[1] * dir[1] + rel[2] * dir[2];
        let dist =
            ((rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]) - along * along)
                .max(0.0)
                .sqrt();
        let r = cloud.radii.value()[[0, 0]];
        let o = cloud.opacities.value()[[0, 0]];
        let dp = ((px as f64 + 0.5 - u).powi(2) + (py as f64 + 0.5 - v).powi(2)).sqrt();
        assert!(dp <= r * cam.k[(0, 0)] / depth, "pixel not covered");
        let d_term = coverage(dist, r, cfg.coverage_mode);
        let z = normalized_depth(depth, &cfg);
        let w = blend_weights_scalar(&[(o, d_term, z)], cfg.gamma, cfg.epsilon)[0];

        let img = out.image.value();
        assert_abs_diff_eq!(img[[0, py, px]], w * 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(img[[1, py, px]], w * -1.0, epsilon = 1e-9);
        let listed = &out.weights[py * 32 + px];
        assert_eq!(listed.len(), 1);
        assert_abs_diff_eq!(listed[0].1, w, epsilon = 1e-12);
    }

    #[test]
    fn per_pixel_weights_sum_below_one() {
        let tape = Tape::new();
        let cfg = RenderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers: Vec<[f64; 3]> = (0..40)
            .map(|_| {
                [
                    rng.gen_range(2.0..10.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(0.5..2.5),
                ]
            })
            .collect();
        let feats: Vec<[f64; 2]> = (0..40).map(|_| [rng.gen(), rng.gen()]).collect();
        let cloud = sphere_cloud(&tape, centers, feats, 0.5, 0.8);
        let out = render_features(&cloud, &cam32(), &cfg).unwrap();
        let mut covered = 0;
        for pixel in &out.weights {
            let total: f64 = pixel.iter().map(|(_, w)| w).sum();
            assert!(total < 1.0, "weights sum {total}");
            assert!(pixel.iter().all(|&(_, w)| (0.0..1.0).contains(&w)));
            if !pixel.is_empty() {
                covered += 1;
                assert!(pixel.len() <= cfg.max_spheres_per_pixel);
            }
        }
        assert!(covered > 0);
    }

    #[test]
    fn depth_ordering_in_rendered_weights() {
        let tape = Tape::new();
        let cfg = RenderConfig::default();
        let cam = cam32();
        // same ray, different depths
        let cloud = sphere_cloud(
            &tape,
            vec![[4.0, 0.0, 1.5], [9.0, 0.0, 1.5]],
            vec![[1.0, 0.0], [0.0, 1.0]],
            0.5,
            0.7,
        );
        let out = render_features(&cloud, &cam, &cfg).unwrap();
        let listed = &out.weights[12 * 32 + 15];
        assert_eq!(listed.len(), 2);
        // back-to-front order: far sphere first
        assert_eq!(listed[0].0, 1);
        assert_eq!(listed[1].0, 0);
        assert!(listed[1].1 > listed[0].1, "near sphere should outweigh far");
        assert_abs_diff_eq!(out.depth[[12, 15]], 4.0, epsilon = 1e-9);
    }

    #[test]
    fn render_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        store.insert(
            "feat",
            Array2::from_shape_fn((3, 2), |(i, j)| 0.3 * (i as f64 + 1.0) - 0.2 * j as f64)
                .into_dyn(),
        );
        store.insert("rad", Array2::from_elem((3, 1), 0.8).into_dyn());
        store.insert("opa", Array2::from_elem((3, 1), 0.4).into_dyn());
        let centers = vec![[4.0, 0.0, 1.5], [5.0, 0.8, 1.2], [6.0, -0.5, 1.9]];
        let cfg = RenderConfig {
            max_spheres_per_pixel: 8,
            ..RenderConfig::default()
        };
        let cam = Camera::look_along([0.0, 0.0, 1.5], 0.0, 8.0, 8.0, 16, 12);
        let max_rel = check_gradients(&store, 1e-5, |_tape, binder| {
            let cloud = SphereCloud {
                centers: centers.clone(),
                features: binder.var("feat")?,
                radii: binder.var("rad")?.softplus().add_scalar(0.05),
                opacities: binder.var("opa")?.sigmoid(),
            };
            let out = render_features(&cloud, &cam, &cfg)?;
            Ok(out.image.mul(out.image).sum())
        })
        .unwrap();
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn shade_zero_input_zero_params_is_zero() {
        let ns = NeuralShade::new(2, [3, 4], 5);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ns.init_params(&mut store, &mut rng, "ns");
        for (_, p) in store.iter_mut() {
            p.value.fill(0.0);
        }
        let tape = Tape::new();
        let binder = Binder::new(&tape, &store);
        let f = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 8, 8])));
        let y = ns.forward(&binder, "ns", f).unwrap();
        assert_eq!(y.shape(), vec![5, 8, 8]);
        assert!(y.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shade_rejects_unaligned_sizes() {
        let ns = NeuralShade::new(2, [3, 4], 5);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        ns.init_params(&mut store, &mut rng, "ns");
        let tape = Tape::new();
        let binder = Binder::new(&tape, &store);
        let f = tape.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 10, 8])));
        assert!(ns.forward(&binder, "ns", f).is_err());
    }

    #[test]
    fn render_shade_composition_gradients_pass() {
        let ns = NeuralShade::new(2, [2, 3], 3);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        ns.init_params(&mut store, &mut rng, "ns");
        // keep relu inputs away from the kink at exactly zero: rendered
        // images are identically zero outside sphere coverage
        for name in ["ns.enc1.b", "ns.enc2.b", "ns.dec1.b"] {
            store.get_mut(name).unwrap().value.fill(0.07);
        }
        store.insert(
            "feat",
            Array2::from_shape_fn((2, 2), |(i, j)| 0.4 * (i as f64) + 0.1 * (j as f64 + 1.0))
                .into_dyn(),
        );
        store.insert("rad", Array2::from_elem((2, 1), 0.9).into_dyn());
        store.insert("opa", Array2::from_elem((2, 1), 0.2).into_dyn());
        let centers = vec![[4.0, 0.2, 1.4], [6.0, -0.6, 1.8]];
        let cfg = RenderConfig::default();
        let cam = Camera::look_along([0.0, 0.0, 1.5], 0.0, 6.0, 6.0, 8, 8);
        let max_rel = check_gradients(&store, 1e-5, |_tape, binder| {
            let cloud = SphereCloud {
                centers: centers.clone(),
                features: binder.var("feat")?,
                radii: binder.var("rad")?.softplus().add_scalar(0.05),
                opacities: binder.var("opa")?.sigmoid(),
            };
            let out = render_features(&cloud, &cam, &cfg)?;
            let y = ns.forward(binder, "ns", out.image)?;
            Ok(y.mul(y).sum())
        })
        .unwrap();
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn fifty_steps_reduce_rendering_objective() {
        use crate::optim::Adam;
        let ns = NeuralShade::new(2, [3, 3], 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        ns.init_params(&mut store, &mut rng, "ns");
        store.insert(
            "feat",
            Array2::from_shape_fn((4, 2), |_| rng.gen_range(-0.5..0.5)).into_dyn(),
        );
        store.insert("rad", Array2::from_elem((4, 1), 0.6).into_dyn());
        store.insert("opa", Array2::from_elem((4, 1), 0.0).into_dyn());
        let centers = vec![
            [4.0, 0.0, 1.5],
            [5.0, 1.0, 1.2],
            [6.0, -1.0, 1.8],
            [7.0, 0.5, 1.5],
        ];
        let target = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 8, 8]), |_| {
            rng.gen_range(0.0..1.0)
        });
        let cfg = RenderConfig::default();
        let cam = Camera::look_along([0.0, 0.0, 1.5], 0.0, 6.0, 6.0, 8, 8);
        let mut adam = Adam::new();
        let run_loss = |store: &ParamStore| -> (f64, std::collections::BTreeMap<String, crate::tape::Arr>) {
            let tape = Tape::new();
            let binder = Binder::new(&tape, store);
            let cloud = SphereCloud {
                centers: centers.clone(),
                features: binder.var("feat").unwrap(),
                radii: binder.var("rad").unwrap().softplus().add_scalar(0.05),
                opacities: binder.var("opa").unwrap().sigmoid(),
            };
            let out = render_features(&cloud, &cam, &cfg).unwrap();
            let y = ns.forward(&binder, "ns", out.image).unwrap();
            let loss = y.sub(tape.constant(target.clone())).abs().sum();
            let v = loss.scalar_value();
            let grads = tape.backward(loss).unwrap();
            (v, binder.grad_map(&grads))
        };
        let (first, _) = run_loss(&store);
        for _ in 0..50 {
            let (_, grads) = run_loss(&store);
            adam.step(&mut store, &grads, 1e-2);
        }
        let (last, _) = run_loss(&store);
        assert!(
            last < first,
            "objective did not decrease: {first} -> {last}"
        );
    }
}
