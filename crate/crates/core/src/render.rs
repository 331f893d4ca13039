//! Z-buffer rasterizer with barycentric attribute gradients and the rendering loss.

use std::path::Path;
use std::rc::Rc;

use triplane_tensor::{Array, Graph, Scalar, Var};

use crate::error::{config, CoreError, Result};
use crate::iso::SurfaceMesh;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    pub fn new(
        position: [f64; 3],
        look_at: [f64; 3],
        up: [f64; 3],
        fov_y_deg: f64,
        size: (usize, usize),
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Camera {
            position,
            look_at,
            up,
            fov_y_deg,
            width: size.0,
            height: size.1,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return config(format!("camera needs 0 < near < far, got {} and {}", self.near, self.far));
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return config(format!("camera fov must lie in (0, 180), got {}", self.fov_y_deg));
        }
        if self.width == 0 || self.height == 0 {
            return config("camera image must be non-empty");
        }
        let f = sub(self.look_at, self.position);
        if dot(f, f) == 0.0 || dot(cross(f, self.up), cross(f, self.up)) == 0.0 {
            return config("camera view direction is degenerate");
        }
        Ok(())
    }

    /// Rows `right, up, forward` of the world-to-camera rotation.
    pub fn basis(&self) -> [[f64; 3]; 3] {
        let f = normalize(sub(self.look_at, self.position));
        let r = normalize(cross(f, self.up));
        let u = cross(r, f);
        [r, u, f]
    }

    pub fn focal(&self) -> f64 {
        (self.height as f64 / 2.0) / (self.fov_y_deg.to_radians() / 2.0).tan()
    }

    /// Camera-space `(x, y, z)` with `z` the distance along the view direction.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = sub(p, self.position);
        let b = self.basis();
        [dot(d, b[0]), dot(d, b[1]), dot(d, b[2])]
    }

    /// Pixel-space `(x, y)` and camera depth.
    pub fn project(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.to_camera(p);
        let f = self.focal();
        [
            self.width as f64 / 2.0 + f * c[0] / c[2],
            self.height as f64 / 2.0 - f * c[1] / c[2],
            c[2],
        ]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

/// `n` cameras on a sphere of `radius` around the origin, directions drawn
/// uniformly from a seeded generator.
pub fn make_view_set(n: usize, radius: f64, fov_y_deg: f64, size: usize, seed: u64) -> Result<Vec<Camera>> {
    if n == 0 {
        return config("view set must contain at least one camera");
    }
    let mut rng = triplane_tensor::rng::seeded(seed);
    (0..n)
        .map(|_| {
            let d = loop {
                let v = [0; 3].map(|_| triplane_tensor::rng::normal(&mut rng));
                let l = dot(v, v).sqrt();
                if l > 1e-9 {
                    break [v[0] / l, v[1] / l, v[2] / l];
                }
            };
            let up = if d[1].abs() > 0.99 { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] };
            Camera::new(
                [d[0] * radius, d[1] * radius, d[2] * radius],
                [0.0; 3],
                up,
                fov_y_deg,
                (size, size),
                0.1 * radius,
                2.0 * radius,
            )
        })
        .collect()
}

/// Per-pixel images; depth is camera `z / far` and 0 where the mask is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderTarget {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub mask: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RenderTarget {
    pub fn background(width: usize, height: usize) -> Self {
        RenderTarget {
            width,
            height,
            rgb: vec![[0.0; 3]; width * height],
            mask: vec![0.0; width * height],
            depth: vec![0.0; width * height],
        }
    }

    pub fn covered(&self) -> Vec<bool> {
        self.depth.iter().map(|&d| d > 0.0).collect()
    }

    pub fn save_png(&self, dir: &Path, stem: &str) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let rgb = image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb(self.rgb[(y * w + x) as usize].map(byte))
        });
        let mask = image::GrayImage::from_fn(w, h, |x, y| image::Luma([byte(self.mask[(y * w + x) as usize])]));
        let depth = image::GrayImage::from_fn(w, h, |x, y| image::Luma([byte(self.depth[(y * w + x) as usize])]));
        let err = |e: image::ImageError| CoreError::Image(e.to_string());
        rgb.save(dir.join(format!("{stem}_rgb.png"))).map_err(err)?;
        mask.save(dir.join(format!("{stem}_mask.png"))).map_err(err)?;
        depth.save(dir.join(format!("{stem}_depth.png"))).map_err(err)?;
        Ok(())
    }
}

/// Pixel-to-triangle assignment from a z-buffer pass; constant for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub width: usize,
    pub height: usize,
    /// Nearest triangle per pixel.
    pub triangle: Vec<Option<usize>>,
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (a[0] - p[0]) * (b[1] - p[1]) - (a[1] - p[1]) * (b[0] - p[0])
}

/// Screen-space barycentrics of `p` in triangle `s`.
fn barycentric(s: &[[f64; 3]; 3], p: [f64; 2]) -> Option<[f64; 3]> {
    let v = s.map(|q| [q[0], q[1]]);
    let area = edge(v[1], v[2], v[0]);
    if area.abs() < 1e-14 {
        return None;
    }
    Some([
        edge(v[1], v[2], p) / area,
        edge(v[2], v[0], p) / area,
        edge(v[0], v[1], p) / area,
    ])
}

fn pixel_center(i: usize, width: usize) -> [f64; 2] {
    [(i % width) as f64 + 0.5, (i / width) as f64 + 0.5]
}

/// Z-buffer pass over triangles fully in front of the near plane.
pub fn rasterize_coverage(vertices: &[[f64; 3]], faces: &[[usize; 3]], cam: &Camera) -> Coverage {
    let (w, h) = (cam.width, cam.height);
    let mut triangle = vec![None; w * h];
    let mut zbuf = vec![f64::INFINITY; w * h];
    let screen: Vec<[f64; 3]> = vertices.iter().map(|&p| cam.project(p)).collect();
    for (t, f) in faces.iter().enumerate() {
        let s = f.map(|v| screen[v]);
        if s.iter().any(|q| q[2] <= cam.near) {
            continue;
        }
        let min_x = s.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
        let max_x = s.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = s.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
        let max_y = s.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let x1 = ((max_x - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let y1 = ((max_y - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        for py in y0..=y1 as usize {
            for px in x0..=x1 as usize {
                let p = [px as f64 + 0.5, py as f64 + 0.5];
                let Some(l) = barycentric(&s, p) else { continue };
                if l.iter().any(|&v| v < 0.0) {
                    continue;
                }
                let z = 1.0 / (l[0] / s[0][2] + l[1] / s[1][2] + l[2] / s[2][2]);
                let i = py * w + px;
                if z < zbuf[i] && z <= cam.far {
                    zbuf[i] = z;
                    triangle[i] = Some(t);
                }
            }
        }
    }
    Coverage {
        width: w,
        height: h,
        triangle,
    }
}

/// Graph-side images, `[H W, 3]` and `[H W, 1]` rows in scanline order.
#[derive(Debug, Clone)]
pub struct RenderVars {
    pub rgb: Var,
    pub mask: Var,
    pub depth: Var,
    /// Hard coverage of the prediction.
    pub covered: Vec<bool>,
    pub width: usize,
    pub height: usize,
}

impl RenderVars {
    pub fn constant<T: Scalar>(g: &mut Graph<T>, t: &RenderTarget) -> Result<Self> {
        let n = t.width * t.height;
        let rgb = Array::new(vec![n, 3], t.rgb.iter().flatten().map(|&v| T::of(v)).collect())?;
        let mask = Array::new(vec![n, 1], t.mask.iter().map(|&v| T::of(v)).collect())?;
        let depth = Array::new(vec![n, 1], t.depth.iter().map(|&v| T::of(v)).collect())?;
        Ok(RenderVars {
            rgb: g.constant(rgb),
            mask: g.constant(mask),
            depth: g.constant(depth),
            covered: t.covered(),
            width: t.width,
            height: t.height,
        })
    }

    pub fn to_target<T: Scalar>(&self, g: &Graph<T>) -> RenderTarget {
        let rgb = g.value(self.rgb).to_f64_vec();
        RenderTarget {
            width: self.width,
            height: self.height,
            rgb: rgb.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            mask: g.value(self.mask).to_f64_vec(),
            depth: g.value(self.depth).to_f64_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterOptions {
    /// Adds edge-crossing coverage terms to the mask so silhouettes move with vertices.
    pub silhouette: bool,
}

impl Default for RasterOptions {
    fn default() -> Self {
        RasterOptions { silhouette: true }
    }
}

/// Screen-space `(x, y, z)` of every vertex, `[M, 3]`.
fn project_vars<T: Scalar>(g: &mut Graph<T>, vertices: Var, cam: &Camera) -> Result<Var> {
    let basis = cam.basis();
    let rot = Array::new(
        vec![3, 3],
        (0..9).map(|i| T::of(basis[i % 3][i / 3])).collect(),
    )?;
    let shift = Array::new(vec![1, 3], cam.position.iter().map(|&v| T::of(-v)).collect())?;
    let d = g.add_const(vertices, shift)?;
    let rot = g.constant(rot);
    let c = g.matmul(d, rot)?;
    let xc = g.slice(c, 1, 0, 1)?;
    let yc = g.slice(c, 1, 1, 2)?;
    let zc = g.slice(c, 1, 2, 3)?;
    let f = cam.focal();
    let sx = g.div(xc, zc)?;
    let sx = g.scale(sx, T::of(f))?;
    let sx = g.add_scalar(sx, T::of(cam.width as f64 / 2.0))?;
    let sy = g.div(yc, zc)?;
    let sy = g.scale(sy, T::of(-f))?;
    let sy = g.add_scalar(sy, T::of(cam.height as f64 / 2.0))?;
    Ok(g.concat(&[sx, sy, zc], 1)?)
}

/// One triangle corner per row: screen x, y and depth columns.
struct Corner {
    x: Var,
    y: Var,
    z: Var,
}

fn corner<T: Scalar>(g: &mut Graph<T>, screen: Var, idx: Vec<usize>) -> Result<Corner> {
    let s = g.gather_rows(screen, Rc::new(idx))?;
    Ok(Corner {
        x: g.slice(s, 1, 0, 1)?,
        y: g.slice(s, 1, 1, 2)?,
        z: g.slice(s, 1, 2, 3)?,
    })
}

fn column<T: Scalar>(v: &[f64]) -> Result<Array<T>> {
    Ok(Array::new(vec![v.len(), 1], v.iter().map(|&x| T::of(x)).collect())?)
}

/// `(a - p) × (b - p)` for rows of corners and constant points.
fn edge_var<T: Scalar>(g: &mut Graph<T>, a: &Corner, b: &Corner, px: &Array<T>, py: &Array<T>) -> Result<Var> {
    let npx = px.map(|v| -v);
    let npy = py.map(|v| -v);
    let ax = g.add_const(a.x, npx.clone())?;
    let ay = g.add_const(a.y, npy.clone())?;
    let bx = g.add_const(b.x, npx)?;
    let by = g.add_const(b.y, npy)?;
    let l = g.mul(ax, by)?;
    let r = g.mul(ay, bx)?;
    Ok(g.sub(l, r)?)
}

/// `(a - c) × (b - c)` between corner rows.
fn area_var<T: Scalar>(g: &mut Graph<T>, a: &Corner, b: &Corner, c: &Corner) -> Result<Var> {
    let ax = g.sub(a.x, c.x)?;
    let ay = g.sub(a.y, c.y)?;
    let bx = g.sub(b.x, c.x)?;
    let by = g.sub(b.y, c.y)?;
    let l = g.mul(ax, by)?;
    let r = g.mul(ay, bx)?;
    Ok(g.sub(l, r)?)
}

/// Renders a mesh whose vertex positions and colors are graph values.
/// Pixel-to-triangle assignment is recomputed from current values and held constant.
pub fn render_vars<T: Scalar>(
    g: &mut Graph<T>,
    vertices: Option<Var>,
    faces: &[[usize; 3]],
    colors: Option<Var>,
    cam: &Camera,
    opts: RasterOptions,
) -> Result<RenderVars> {
    cam.validate()?;
    let n = cam.num_pixels();
    let (Some(vertices), Some(colors)) = (vertices, colors) else {
        return RenderVars::constant(g, &RenderTarget::background(cam.width, cam.height));
    };
    if g.shape(vertices) != g.shape(colors) || g.shape(vertices).get(1) != Some(&3) {
        return Err(CoreError::Dimension(
            "render_vars",
            format!("vertices {:?} and colors {:?}", g.shape(vertices), g.shape(colors)),
        ));
    }
    let vals = g.value(vertices).to_f64_vec();
    let pts: Vec<[f64; 3]> = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    if faces.iter().flatten().any(|&v| v >= pts.len()) {
        return Err(CoreError::Dimension("render_vars", "face index out of range".into()));
    }
    let cov = rasterize_coverage(&pts, faces, cam);
    let pix: Vec<usize> = (0..n).filter(|&i| cov.triangle[i].is_some()).collect();
    let covered: Vec<bool> = cov.triangle.iter().map(Option::is_some).collect();
    if pix.is_empty() {
        return RenderVars::constant(g, &RenderTarget::background(cam.width, cam.height));
    }
    let screen = project_vars(g, vertices, cam)?;
    let tri_of = |i: usize| faces[cov.triangle[i].expect("covered pixel")];
    let idx = |k: usize| pix.iter().map(|&i| tri_of(i)[k]).collect::<Vec<_>>();
    let idxs = [idx(0), idx(1), idx(2)];
    let corners = [
        corner(g, screen, idxs[0].clone())?,
        corner(g, screen, idxs[1].clone())?,
        corner(g, screen, idxs[2].clone())?,
    ];
    let centers: Vec<[f64; 2]> = pix.iter().map(|&i| pixel_center(i, cam.width)).collect();
    let px = column::<T>(&centers.iter().map(|c| c[0]).collect::<Vec<_>>())?;
    let py = column::<T>(&centers.iter().map(|c| c[1]).collect::<Vec<_>>())?;
    let area = area_var(g, &corners[1], &corners[2], &corners[0])?;
    let mut w = Vec::with_capacity(3);
    for k in 0..3 {
        let e = edge_var(g, &corners[(k + 1) % 3], &corners[(k + 2) % 3], &px, &py)?;
        let l = g.div(e, area)?;
        w.push(g.div(l, corners[k].z)?);
    }
    let wsum = g.add(w[0], w[1])?;
    let wsum = g.add(wsum, w[2])?;

    let pix = Rc::new(pix);
    let mut rgb = None;
    for (wk, ik) in w.iter().zip(idxs) {
        let ck = g.gather_rows(colors, Rc::new(ik))?;
        let term = g.mul(*wk, ck)?;
        rgb = Some(match rgb {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let rgb = g.div(rgb.expect("three corners"), wsum)?;
    let rgb = g.scatter_add_rows(rgb, pix.clone(), n)?;
    let inv = g.powf(wsum, T::of(-1.0))?;
    let depth = g.scale(inv, T::of(1.0 / cam.far))?;
    let depth = g.scatter_add_rows(depth, pix.clone(), n)?;

    let hard = Array::new(
        vec![n, 1],
        covered.iter().map(|&c| if c { T::one() } else { T::zero() }).collect(),
    )?;
    let mut mask = g.constant(hard);
    if opts.silhouette {
        if let Some((grow, shrink)) = silhouette_terms(g, screen, faces, &cov, &pts, cam)? {
            mask = g.add(mask, grow)?;
            mask = g.sub(mask, shrink)?;
            mask = g.clamp(mask, T::zero(), T::one())?;
        }
    }
    Ok(RenderVars {
        rgb,
        mask,
        depth,
        covered,
        width: cam.width,
        height: cam.height,
    })
}

/// For each covered pixel next to an uncovered one, the fraction `α` of the
/// way to the neighbour at which the separating triangle edge lies. The
/// uncovered pixel gains `relu(α - ½)` coverage and the covered one loses
/// `relu(½ - α)`. Returns both as `[H W, 1]` scatters.
fn silhouette_terms<T: Scalar>(
    g: &mut Graph<T>,
    screen: Var,
    faces: &[[usize; 3]],
    cov: &Coverage,
    pts: &[[f64; 3]],
    cam: &Camera,
) -> Result<Option<(Var, Var)>> {
    let (w, h) = (cov.width, cov.height);
    let mut rot: [Vec<usize>; 3] = Default::default();
    let mut inside_px = Vec::new();
    let mut outside_px = Vec::new();
    let mut inside_rows = Vec::new();
    let mut outside_rows = Vec::new();
    for i in 0..w * h {
        let Some(t) = cov.triangle[i] else { continue };
        let (x, y) = (i % w, i / w);
        let mut nbrs = Vec::with_capacity(4);
        if x > 0 {
            nbrs.push(i - 1);
        }
        if x + 1 < w {
            nbrs.push(i + 1);
        }
        if y > 0 {
            nbrs.push(i - w);
        }
        if y + 1 < h {
            nbrs.push(i + w);
        }
        let f = faces[t];
        let s = f.map(|v| cam.project(pts[v]));
        for u in nbrs {
            if cov.triangle[u].is_some() {
                continue;
            }
            let Some(lu) = barycentric(&s, pixel_center(u, w)) else { continue };
            let k = (0..3).min_by(|&a, &b| lu[a].total_cmp(&lu[b])).expect("three corners");
            if lu[k] >= 0.0 {
                continue;
            }
            for (j, r) in rot.iter_mut().enumerate() {
                r.push(f[(k + j) % 3]);
            }
            inside_px.push(pixel_center(i, w));
            outside_px.push(pixel_center(u, w));
            inside_rows.push(i);
            outside_rows.push(u);
        }
    }
    if inside_rows.is_empty() {
        return Ok(None);
    }
    let [r0, r1, r2] = rot;
    let c0 = corner(g, screen, r0)?;
    let c1 = corner(g, screen, r1)?;
    let c2 = corner(g, screen, r2)?;
    let split = |v: &[[f64; 2]], d: usize| column::<T>(&v.iter().map(|p| p[d]).collect::<Vec<_>>());
    let (ix, iy) = (split(&inside_px, 0)?, split(&inside_px, 1)?);
    let (ox, oy) = (split(&outside_px, 0)?, split(&outside_px, 1)?);
    let area = area_var(g, &c1, &c2, &c0)?;
    let ein = edge_var(g, &c1, &c2, &ix, &iy)?;
    let lin = g.div(ein, area)?;
    let eout = edge_var(g, &c1, &c2, &ox, &oy)?;
    let lout = g.div(eout, area)?;
    let gap = g.sub(lin, lout)?;
    let alpha = g.div(lin, gap)?;
    let grow = g.add_scalar(alpha, T::of(-0.5))?;
    let grow = g.relu(grow)?;
    let shrink = g.neg(alpha)?;
    let shrink = g.add_scalar(shrink, T::of(0.5))?;
    let shrink = g.relu(shrink)?;
    let n = w * h;
    let grow = g.scatter_add_rows(grow, Rc::new(outside_rows), n)?;
    let shrink = g.scatter_add_rows(shrink, Rc::new(inside_rows), n)?;
    Ok(Some((grow, shrink)))
}

/// Renders a plain mesh; missing colors render white.
pub fn rasterize(mesh: &SurfaceMesh, cam: &Camera, opts: RasterOptions) -> Result<RenderTarget> {
    let mut g = Graph::<f64>::new();
    if mesh.vertices.is_empty() {
        return Ok(RenderTarget::background(cam.width, cam.height));
    }
    let m = mesh.vertices.len();
    let v = g.constant(Array::new(vec![m, 3], mesh.vertices.iter().flatten().copied().collect())?);
    let colors = match &mesh.colors {
        Some(c) => Array::new(vec![m, 3], c.iter().flatten().copied().collect())?,
        None => Array::ones(vec![m, 3]),
    };
    let c = g.constant(colors);
    let r = render_vars(&mut g, Some(v), &mesh.faces, Some(c), cam, opts)?;
    Ok(r.to_target(&g))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub mask: f64,
    pub depth: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rgb: 10.0,
            mask: 10.0,
            depth: 0.1,
            kl: 1e-6,
        }
    }
}

/// Weighted total and its unweighted components.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub rgb: Var,
    pub mask: Var,
    pub depth: Var,
    pub kl: Option<Var>,
}

/// `λ₁ L_rgb + λ₂ L_mask + λ₃ L_depth + λ_kl KL`, each image term a per-pixel
/// mean squared error; depth averages over pixels covered in both images.
pub fn rendering_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: &RenderVars,
    gt: &RenderTarget,
    kl: Option<Var>,
    lambda: &LossWeights,
) -> Result<LossTerms> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(CoreError::Dimension(
            "rendering_loss",
            format!("{}x{} vs {}x{}", pred.width, pred.height, gt.width, gt.height),
        ));
    }
    let t = RenderVars::constant(g, gt)?;
    let n = gt.width * gt.height;
    let rgb = g.mse_loss(pred.rgb, t.rgb)?;
    let mask = g.mse_loss(pred.mask, t.mask)?;
    let joint: Vec<bool> = pred.covered.iter().zip(&t.covered).map(|(&a, &b)| a && b).collect();
    let count = joint.iter().filter(|&&j| j).count().max(1);
    let sel = Array::new(
        vec![n, 1],
        joint.iter().map(|&j| if j { T::one() } else { T::zero() }).collect(),
    )?;
    let diff = g.sub(pred.depth, t.depth)?;
    let diff = g.mul_const(diff, sel)?;
    let sq = g.square(diff)?;
    let depth = g.sum_all(sq)?;
    let depth = g.scale(depth, T::of(1.0 / count as f64))?;
    let mut total = g.scale(rgb, T::of(lambda.rgb))?;
    let m = g.scale(mask, T::of(lambda.mask))?;
    total = g.add(total, m)?;
    let d = g.scale(depth, T::of(lambda.depth))?;
    total = g.add(total, d)?;
    if let Some(k) = kl {
        let k = g.scale(k, T::of(lambda.kl))?;
        total = g.add(total, k)?;
    }
    Ok(LossTerms {
        total,
        rgb,
        mask,
        depth,
        kl,
    })
}

/// Ground-truth renders of a mesh from every camera.
pub fn render_targets(mesh: &SurfaceMesh, cams: &[Camera], opts: RasterOptions) -> Result<Vec<RenderTarget>> {
    cams.iter().map(|c| rasterize(mesh, c, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn front_camera(size: usize, fov: f64) -> Camera {
        Camera::new([0.0; 3], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], fov, (size, size), 0.1, 10.0).unwrap()
    }

    #[test]
    fn camera_rejects_bad_planes() {
        assert!(Camera::new([0.0; 3], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], 60.0, (8, 8), 2.0, 1.0).is_err());
        assert!(Camera::new([0.0; 3], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], 180.0, (8, 8), 0.1, 1.0).is_err());
    }

    #[test]
    fn projection_centers_the_axis() {
        let cam = front_camera(64, 90.0);
        let p = cam.project([0.0, 0.0, 2.0]);
        assert_eq!([p[0], p[1]], [32.0, 32.0]);
        // looking down +z with +y up puts world +x on the left of the image
        let q = cam.project([1.0, 1.0, 2.0]);
        assert!((q[0] - 16.0).abs() < 1e-12 && (q[1] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mesh_renders_background() {
        let t = rasterize(&SurfaceMesh::default(), &front_camera(8, 60.0), RasterOptions::default()).unwrap();
        assert!(t.mask.iter().all(|&m| m == 0.0));
        assert!(t.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn view_set_is_reproducible() {
        let a = make_view_set(1, 3.0, 40.0, 8, 5).unwrap();
        let b = make_view_set(1, 3.0, 40.0, 8, 5).unwrap();
        assert_eq!(a, b);
        assert!(make_view_set(0, 3.0, 40.0, 8, 5).is_err());
    }
}
