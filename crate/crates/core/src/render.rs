//! Differentiable rasterizer for a canonical face (albedo + depth on a
//! regular grid) seen under a rigid pose and a directional Lambertian light.
//!
//! The canonical grid spans `[-1, 1]²`; column `j` is `x`, row `i` is `y`.
//! Each grid point becomes a mesh vertex at `z = depth`. Shading happens in
//! the canonical frame, vertices are then rotated about the pivot `(0, 0, 1)`,
//! translated, and projected with a pinhole camera `K = diag(f, f, 1)`.
//! Rasterization is hard (z-buffered); gradients flow through the shading
//! and the screen-space barycentric interpolation, never through coverage.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::real::Real;

/// Field of view of the fixed camera, degrees.
pub const FOV_DEGREES: f64 = 10.0;
pub const MAX_YAW_DEG: f64 = 60.0;
pub const MAX_PITCH_DEG: f64 = 30.0;
pub const MAX_ROLL_DEG: f64 = 30.0;
pub const MAX_TRANSLATION: f64 = 0.1;
/// Half-width of the depth band around the canonical distance.
pub const DEPTH_HALF_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderError {
    /// A map contained NaN or infinity.
    NonFinite,
    /// Map shapes disagree.
    ShapeMismatch,
    /// A transformed vertex ended up at or behind the camera plane.
    DegeneratePose,
}

impl fmt::Display for RenderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RenderError::NonFinite => f.write_str("invalid input: non-finite value in map"),
            RenderError::ShapeMismatch => f.write_str("invalid input: map shapes do not match"),
            RenderError::DegeneratePose => f.write_str("degenerate pose: vertex behind the camera"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for RenderError {}

/// A `C×H×W` planar map. Depth maps have one channel, albedo and images three.
#[derive(Clone, Debug, PartialEq)]
pub struct Map<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub type DepthMap<T> = Map<T>;
pub type AlbedoMap<T> = Map<T>;
pub type NormalMap<T> = Map<T>;

impl<T: Real> Map<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "map data length mismatch");
        Self { channels, height, width, data }
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: T) -> Self {
        Self::new(channels, height, width, vec![v; channels * height * width])
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.height + i) * self.width + j]
    }

    /// Column `j` maps to column `W - 1 - j` in every channel.
    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        hflip_planes(&self.data, self.width, &mut out.data);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_grid(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Mirrors rows of length `width` in a flat buffer.
pub fn hflip_planes<T: Copy>(src: &[T], width: usize, dst: &mut [T]) {
    for (s, d) in src.chunks_exact(width).zip(dst.chunks_exact_mut(width)) {
        for (j, v) in s.iter().enumerate() {
            d[width - 1 - j] = *v;
        }
    }
}

/// Grid coordinate of index `k` on an `n`-point axis spanning `[-1, 1]`.
pub fn grid_coord<T: Real>(k: usize, n: usize) -> T {
    if n == 1 {
        return T::zero();
    }
    T::lit(-1.0 + 2.0 * k as f64 / (n - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera<T> {
    pub fov_deg: T,
    pub focal: T,
    /// Added to canonical depth so that depth 1 sits at distance `focal`.
    pub z_offset: T,
}

impl<T: Real> Camera<T> {
    pub fn with_fov(fov_deg: f64) -> Self {
        let half = (fov_deg * 0.5).to_radians();
        let focal = 1.0 / (2.0 * half.tan());
        Self {
            fov_deg: T::lit(fov_deg),
            focal: T::lit(focal),
            z_offset: T::lit(focal - 1.0),
        }
    }
}

impl<T: Real> Default for Camera<T> {
    fn default() -> Self {
        Self::with_fov(FOV_DEGREES)
    }
}

/// Rigid head pose: rotation angles in radians, translation in canonical units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T> {
    pub yaw: T,
    pub pitch: T,
    pub roll: T,
    pub tx: T,
    pub ty: T,
    pub tz: T,
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self::from_array([T::zero(); 6])
    }

    /// `[yaw, pitch, roll, tx, ty, tz]`.
    pub fn from_array(a: [T; 6]) -> Self {
        Self { yaw: a[0], pitch: a[1], roll: a[2], tx: a[3], ty: a[4], tz: a[5] }
    }

    pub fn to_array(&self) -> [T; 6] {
        [self.yaw, self.pitch, self.roll, self.tx, self.ty, self.tz]
    }

    /// Maps tanh outputs in `(-1, 1)` to the operating ranges.
    pub fn from_unit(raw: [T; 6]) -> Self {
        let s = pose_scales::<T>();
        let mut a = [T::zero(); 6];
        for k in 0..6 {
            a[k] = raw[k] * s[k];
        }
        Self::from_array(a)
    }

    pub fn in_range(&self) -> bool {
        let s = pose_scales::<T>();
        let tol = T::lit(1e-9);
        self.to_array().iter().zip(s.iter()).all(|(&v, &m)| v.abs() <= m + tol)
    }
}

/// Per-component multipliers from unit range to pose range.
pub fn pose_scales<T: Real>() -> [T; 6] {
    [
        T::lit(MAX_YAW_DEG.to_radians()),
        T::lit(MAX_PITCH_DEG.to_radians()),
        T::lit(MAX_ROLL_DEG.to_radians()),
        T::lit(MAX_TRANSLATION),
        T::lit(MAX_TRANSLATION),
        T::lit(MAX_TRANSLATION),
    ]
}

/// Ambient and diffuse strength plus the two free light-direction components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Light<T> {
    pub ka: T,
    pub kd: T,
    pub lx: T,
    pub ly: T,
}

impl<T: Real> Light<T> {
    /// Relighting used for frontalization and the light-free ablation.
    pub fn neutral() -> Self {
        Self { ka: T::lit(0.7), kd: T::lit(0.3), lx: T::zero(), ly: T::zero() }
    }

    /// `[ka, kd, lx, ly]`.
    pub fn from_array(a: [T; 4]) -> Self {
        Self { ka: a[0], kd: a[1], lx: a[2], ly: a[3] }
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.ka, self.kd, self.lx, self.ly]
    }

    /// Maps tanh outputs: coefficients to `[0, 1]`, direction components kept.
    pub fn from_unit(raw: [T; 4]) -> Self {
        let half = T::lit(0.5);
        Self { ka: (raw[0] + T::one()) * half, kd: (raw[1] + T::one()) * half, lx: raw[2], ly: raw[3] }
    }

    /// Unit light direction `normalize(lx, ly, 1)`.
    pub fn direction(&self) -> [T; 3] {
        let n = (self.lx * self.lx + self.ly * self.ly + T::one()).sqrt();
        [self.lx / n, self.ly / n, T::one() / n]
    }
}

/// Raw tanh output to depth: `1 + 0.1 t`.
pub fn depth_from_unit<T: Real>(t: T) -> T {
    T::one() + T::lit(DEPTH_HALF_RANGE) * t
}

/// Raw tanh output to albedo: `(t + 1) / 2`.
pub fn albedo_from_unit<T: Real>(t: T) -> T {
    (t + T::one()) * T::lit(0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh<T> {
    pub vertices: Vec<[T; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

/// Regular grid mesh: one vertex per depth sample, two triangles per cell.
pub fn build_grid_mesh<T: Real>(depth: &DepthMap<T>) -> Result<Mesh<T>, RenderError> {
    if !depth.all_finite() {
        return Err(RenderError::NonFinite);
    }
    let (h, w) = (depth.height, depth.width);
    let mut vertices = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            vertices.push([grid_coord(j, w), grid_coord(i, h), depth.data[i * w + j]]);
        }
    }
    Ok(Mesh { vertices, triangles: grid_triangles(h, w) })
}

pub fn grid_triangles(h: usize, w: usize) -> Vec<[u32; 3]> {
    let mut tris = Vec::with_capacity(2 * h.saturating_sub(1) * w.saturating_sub(1));
    for i in 0..h.saturating_sub(1) {
        for j in 0..w.saturating_sub(1) {
            let a = (i * w + j) as u32;
            let b = a + 1;
            let c = a + w as u32;
            let d = c + 1;
            tris.push([a, b, c]);
            tris.push([b, d, c]);
        }
    }
    tris
}

/// Surface slopes `(dz/dx, dz/dy)` by central differences, one-sided at borders.
fn slopes<T: Real>(depth: &DepthMap<T>) -> (Vec<T>, Vec<T>) {
    let (h, w) = (depth.height, depth.width);
    let z = &depth.data;
    let dx = T::lit(2.0 / (w.max(2) - 1) as f64);
    let dy = T::lit(2.0 / (h.max(2) - 1) as f64);
    let two = T::lit(2.0);
    let mut gx = vec![T::zero(); h * w];
    let mut gy = vec![T::zero(); h * w];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if w > 1 {
                gx[p] = if j == 0 {
                    (z[p + 1] - z[p]) / dx
                } else if j == w - 1 {
                    (z[p] - z[p - 1]) / dx
                } else {
                    (z[p + 1] - z[p - 1]) / (two * dx)
                };
            }
            if h > 1 {
                gy[p] = if i == 0 {
                    (z[p + w] - z[p]) / dy
                } else if i == h - 1 {
                    (z[p] - z[p - w]) / dy
                } else {
                    (z[p + w] - z[p - w]) / (two * dy)
                };
            }
        }
    }
    (gx, gy)
}

/// Unit normals `normalize(-dz/dx, -dz/dy, 1)`; the z component is positive.
pub fn compute_normals<T: Real>(depth: &DepthMap<T>) -> NormalMap<T> {
    let (gx, gy) = slopes(depth);
    let n = depth.plane_len();
    let mut data = vec![T::zero(); 3 * n];
    for p in 0..n {
        let inv = T::one() / (gx[p] * gx[p] + gy[p] * gy[p] + T::one()).sqrt();
        data[p] = -gx[p] * inv;
        data[n + p] = -gy[p] * inv;
        data[2 * n + p] = inv;
    }
    Map::new(3, depth.height, depth.width, data)
}

/// Lambertian shading `albedo * (ka + kd * max(0, n·L))`, unclamped.
pub fn shade<T: Real>(albedo: &AlbedoMap<T>, normals: &NormalMap<T>, light: &Light<T>) -> Map<T> {
    assert!(albedo.same_grid(normals));
    let n = albedo.plane_len();
    let l = light.direction();
    let mut out = albedo.clone();
    for p in 0..n {
        let ndl = normals.data[p] * l[0] + normals.data[n + p] * l[1] + normals.data[2 * n + p] * l[2];
        let s = light.ka + light.kd * ndl.max(T::zero());
        for c in 0..albedo.channels {
            out.data[c * n + p] = albedo.data[c * n + p] * s;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput<T> {
    pub image: Map<T>,
    /// Pixels covered by the projected mesh, row-major `H×W`.
    pub mask: Vec<bool>,
}

impl<T: Real> RenderOutput<T> {
    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Sentinel for pixels not covered by any triangle.
pub const NO_TRIANGLE: u32 = u32::MAX;

/// Everything the backward pass needs from one forward render.
#[derive(Clone, Debug)]
pub struct RasterCache<T> {
    pub height: usize,
    pub width: usize,
    /// Canonical-frame vertex positions relative to the rotation pivot.
    pub rel: Vec<[T; 3]>,
    /// Camera-frame positions.
    pub cam: Vec<[T; 3]>,
    /// Pixel-space projected positions.
    pub screen: Vec<[T; 2]>,
    /// Covering triangle per pixel, [`NO_TRIANGLE`] when uncovered.
    pub pixel_triangle: Vec<u32>,
    pub triangles: Vec<[u32; 3]>,
    /// Shaded per-vertex colors (`C×H×W`).
    pub colors: Map<T>,
    pub rotation: [[T; 3]; 3],
}

fn matvec<T: Real>(r: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

fn matmul3<T: Real>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn rot_x<T: Real>(a: T, deriv: bool) -> [[T; 3]; 3] {
    let (s, c) = a.sin_cos();
    let (o, z) = (T::one(), T::zero());
    if deriv {
        [[z, z, z], [z, -s, -c], [z, c, -s]]
    } else {
        [[o, z, z], [z, c, -s], [z, s, c]]
    }
}

fn rot_y<T: Real>(a: T, deriv: bool) -> [[T; 3]; 3] {
    let (s, c) = a.sin_cos();
    let (o, z) = (T::one(), T::zero());
    if deriv {
        [[-s, z, c], [z, z, z], [-c, z, -s]]
    } else {
        [[c, z, s], [z, o, z], [-s, z, c]]
    }
}

fn rot_z<T: Real>(a: T, deriv: bool) -> [[T; 3]; 3] {
    let (s, c) = a.sin_cos();
    let (o, z) = (T::one(), T::zero());
    if deriv {
        [[-s, -c, z], [c, -s, z], [z, z, z]]
    } else {
        [[c, -s, z], [s, c, z], [z, z, o]]
    }
}

/// `R = Rz(roll) · Rx(pitch) · Ry(yaw)`, optionally differentiated in one angle
/// (0 = yaw, 1 = pitch, 2 = roll).
pub fn rotation<T: Real>(pose: &Pose<T>, deriv: Option<usize>) -> [[T; 3]; 3] {
    let ry = rot_y(pose.yaw, deriv == Some(0));
    let rx = rot_x(pose.pitch, deriv == Some(1));
    let rz = rot_z(pose.roll, deriv == Some(2));
    matmul3(&rz, &matmul3(&rx, &ry))
}

fn edge<T: Real>(a: [T; 2], b: [T; 2], q: [T; 2]) -> T {
    (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
}

/// Projects the shaded canonical map through the pose and rasterizes it.
pub fn project_and_rasterize<T: Real>(
    shaded: &Map<T>,
    depth: &DepthMap<T>,
    pose: &Pose<T>,
    cam: &Camera<T>,
) -> Result<(RenderOutput<T>, RasterCache<T>), RenderError> {
    if !shaded.same_grid(depth) {
        return Err(RenderError::ShapeMismatch);
    }
    let mesh = build_grid_mesh(depth)?;
    let (h, w) = (depth.height, depth.width);
    let r = rotation(pose, None);
    let half_w = T::lit((w.max(2) - 1) as f64 * 0.5);
    let half_h = T::lit((h.max(2) - 1) as f64 * 0.5);
    let pivot_z = T::one() + cam.z_offset;
    let mut rel = Vec::with_capacity(mesh.vertices.len());
    let mut cam_pts = Vec::with_capacity(mesh.vertices.len());
    let mut screen = Vec::with_capacity(mesh.vertices.len());
    for v in &mesh.vertices {
        let q = [v[0], v[1], v[2] - T::one()];
        let p = matvec(&r, q);
        let pc = [p[0] + pose.tx, p[1] + pose.ty, p[2] + pivot_z + pose.tz];
        if !(pc[2] > T::zero()) {
            return Err(RenderError::DegeneratePose);
        }
        let u = cam.focal * pc[0] / pc[2];
        let vv = cam.focal * pc[1] / pc[2];
        rel.push(q);
        cam_pts.push(pc);
        screen.push([(u + T::one()) * half_w, (vv + T::one()) * half_h]);
    }

    let npx = h * w;
    let mut zbuf = vec![T::infinity(); npx];
    let mut pixel_triangle = vec![NO_TRIANGLE; npx];
    let tol = T::lit(1e-4);
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let p0 = screen[tri[0] as usize];
        let p1 = screen[tri[1] as usize];
        let p2 = screen[tri[2] as usize];
        let area = edge(p0, p1, p2);
        if area.abs() < T::lit(1e-12) {
            continue;
        }
        let xmin = p0[0].min(p1[0]).min(p2[0]);
        let xmax = p0[0].max(p1[0]).max(p2[0]);
        let ymin = p0[1].min(p1[1]).min(p2[1]);
        let ymax = p0[1].max(p1[1]).max(p2[1]);
        let slack = T::lit(1e-3);
        let j0 = (xmin - slack).ceil().max(T::zero());
        let j1 = (xmax + slack).floor().min(T::lit((w - 1) as f64));
        let i0 = (ymin - slack).ceil().max(T::zero());
        let i1 = (ymax + slack).floor().min(T::lit((h - 1) as f64));
        if j0 > j1 || i0 > i1 {
            continue;
        }
        let (j0, j1) = (j0.to_usize().unwrap_or(0), j1.to_usize().unwrap_or(0));
        let (i0, i1) = (i0.to_usize().unwrap_or(0), i1.to_usize().unwrap_or(0));
        let z0 = cam_pts[tri[0] as usize][2];
        let z1 = cam_pts[tri[1] as usize][2];
        let z2 = cam_pts[tri[2] as usize][2];
        let lim = -tol * area.abs();
        for i in i0..=i1 {
            for j in j0..=j1 {
                let q = [T::lit(j as f64), T::lit(i as f64)];
                let mut w0 = edge(p1, p2, q);
                let mut w1 = edge(p2, p0, q);
                let mut w2 = edge(p0, p1, q);
                if area < T::zero() {
                    w0 = -w0;
                    w1 = -w1;
                    w2 = -w2;
                }
                if w0 < lim || w1 < lim || w2 < lim {
                    continue;
                }
                let a = area.abs();
                let z = (w0 * z0 + w1 * z1 + w2 * z2) / a;
                let px = i * w + j;
                if z < zbuf[px] {
                    zbuf[px] = z;
                    pixel_triangle[px] = t as u32;
                }
            }
        }
    }

    let c = shaded.channels;
    let mut image = Map::filled(c, h, w, T::zero());
    let mut mask = vec![false; npx];
    for px in 0..npx {
        let t = pixel_triangle[px];
        if t == NO_TRIANGLE {
            continue;
        }
        mask[px] = true;
        let tri = mesh.triangles[t as usize];
        let q = [T::lit((px % w) as f64), T::lit((px / w) as f64)];
        let b = barycentric(&screen, tri, q);
        for ch in 0..c {
            let plane = &shaded.data[ch * npx..(ch + 1) * npx];
            image.data[ch * npx + px] =
                b[0] * plane[tri[0] as usize] + b[1] * plane[tri[1] as usize] + b[2] * plane[tri[2] as usize];
        }
    }
    let cache = RasterCache {
        height: h,
        width: w,
        rel,
        cam: cam_pts,
        screen,
        pixel_triangle,
        triangles: mesh.triangles,
        colors: shaded.clone(),
        rotation: r,
    };
    Ok((RenderOutput { image, mask }, cache))
}

fn edges_of<T: Real>(screen: &[[T; 2]], tri: [u32; 3], q: [T; 2]) -> [T; 3] {
    let p0 = screen[tri[0] as usize];
    let p1 = screen[tri[1] as usize];
    let p2 = screen[tri[2] as usize];
    [edge(p1, p2, q), edge(p2, p0, q), edge(p0, p1, q)]
}

fn barycentric<T: Real>(screen: &[[T; 2]], tri: [u32; 3], q: [T; 2]) -> [T; 3] {
    let w = edges_of(screen, tri, q);
    let s = w[0] + w[1] + w[2];
    [w[0] / s, w[1] / s, w[2] / s]
}

/// Full forward: normals, shading, projection, rasterization.
pub fn render<T: Real>(
    albedo: &AlbedoMap<T>,
    depth: &DepthMap<T>,
    pose: &Pose<T>,
    light: &Light<T>,
    cam: &Camera<T>,
) -> Result<RenderOutput<T>, RenderError> {
    render_with_cache(albedo, depth, pose, light, cam).map(|(o, _)| o)
}

pub fn render_with_cache<T: Real>(
    albedo: &AlbedoMap<T>,
    depth: &DepthMap<T>,
    pose: &Pose<T>,
    light: &Light<T>,
    cam: &Camera<T>,
) -> Result<(RenderOutput<T>, RasterCache<T>), RenderError> {
    if !albedo.same_grid(depth) || depth.channels != 1 {
        return Err(RenderError::ShapeMismatch);
    }
    if !albedo.all_finite() || !depth.all_finite() {
        return Err(RenderError::NonFinite);
    }
    let normals = compute_normals(depth);
    let shaded = shade(albedo, &normals, light);
    project_and_rasterize(&shaded, depth, pose, cam)
}

/// Render of the horizontally mirrored canonical maps under the same pose and light.
pub fn render_flipped<T: Real>(
    albedo: &AlbedoMap<T>,
    depth: &DepthMap<T>,
    pose: &Pose<T>,
    light: &Light<T>,
    cam: &Camera<T>,
) -> Result<RenderOutput<T>, RenderError> {
    render(&albedo.hflip(), &depth.hflip(), pose, light, cam)
}

/// Canonical view under the neutral light.
pub fn frontalize<T: Real>(albedo: &AlbedoMap<T>, depth: &DepthMap<T>, cam: &Camera<T>) -> Result<Map<T>, RenderError> {
    render(albedo, depth, &Pose::identity(), &Light::neutral(), cam).map(|o| o.image)
}

/// Gradients of a scalar w.r.t. every render input.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads<T> {
    pub albedo: Map<T>,
    pub depth: Map<T>,
    /// `[yaw, pitch, roll, tx, ty, tz]`.
    pub pose: [T; 6],
    /// `[ka, kd, lx, ly]`.
    pub light: [T; 4],
}

/// Reverse pass of [`render_with_cache`] for an upstream image gradient.
pub fn render_backward<T: Real>(
    albedo: &AlbedoMap<T>,
    depth: &DepthMap<T>,
    pose: &Pose<T>,
    light: &Light<T>,
    cam: &Camera<T>,
    cache: &RasterCache<T>,
    d_image: &Map<T>,
) -> RenderGrads<T> {
    let (h, w) = (cache.height, cache.width);
    let npx = h * w;
    let ch = d_image.channels;
    let half_w = T::lit((w.max(2) - 1) as f64 * 0.5);
    let half_h = T::lit((h.max(2) - 1) as f64 * 0.5);

    // Rasterization: per-vertex colors and screen positions.
    let mut d_colors = vec![T::zero(); ch * npx];
    let mut d_screen = vec![[T::zero(); 2]; npx];
    for px in 0..npx {
        let t = cache.pixel_triangle[px];
        if t == NO_TRIANGLE {
            continue;
        }
        let tri = cache.triangles[t as usize];
        let q = [T::lit((px % w) as f64), T::lit((px / w) as f64)];
        let ew = edges_of(&cache.screen, tri, q);
        let s = ew[0] + ew[1] + ew[2];
        let mut d_w = [T::zero(); 3];
        for c in 0..ch {
            let g = d_image.data[c * npx + px];
            if g == T::zero() {
                continue;
            }
            let plane = &cache.colors.data[c * npx..(c + 1) * npx];
            let cols = [plane[tri[0] as usize], plane[tri[1] as usize], plane[tri[2] as usize]];
            let out = (ew[0] * cols[0] + ew[1] * cols[1] + ew[2] * cols[2]) / s;
            for k in 0..3 {
                d_colors[c * npx + tri[k] as usize] += g * ew[k] / s;
                d_w[k] += g * (cols[k] - out) / s;
            }
        }
        // w_k = E(a, b, q) for (a, b) = (p1, p2), (p2, p0), (p0, p1).
        let pairs = [(1usize, 2usize), (2, 0), (0, 1)];
        for (k, &(ia, ib)) in pairs.iter().enumerate() {
            if d_w[k] == T::zero() {
                continue;
            }
            let a = cache.screen[tri[ia] as usize];
            let b = cache.screen[tri[ib] as usize];
            let va = tri[ia] as usize;
            let vb = tri[ib] as usize;
            d_screen[va][0] += d_w[k] * (b[1] - q[1]);
            d_screen[va][1] += d_w[k] * (q[0] - b[0]);
            d_screen[vb][0] += d_w[k] * (q[1] - a[1]);
            d_screen[vb][1] += d_w[k] * (a[0] - q[0]);
        }
    }

    // Projection and rigid transform.
    let mut d_rot = [[T::zero(); 3]; 3];
    let mut d_t = [T::zero(); 3];
    let mut d_depth = vec![T::zero(); npx];
    for v in 0..npx {
        let ds = d_screen[v];
        if ds[0] == T::zero() && ds[1] == T::zero() {
            continue;
        }
        let du = ds[0] * half_w;
        let dv = ds[1] * half_h;
        let p = cache.cam[v];
        let inv_z = T::one() / p[2];
        let dp = [
            du * cam.focal * inv_z,
            dv * cam.focal * inv_z,
            -(du * cam.focal * p[0] + dv * cam.focal * p[1]) * inv_z * inv_z,
        ];
        for a in 0..3 {
            d_t[a] += dp[a];
            for b in 0..3 {
                d_rot[a][b] += dp[a] * cache.rel[v][b];
            }
        }
        let r = &cache.rotation;
        d_depth[v] += r[0][2] * dp[0] + r[1][2] * dp[1] + r[2][2] * dp[2];
    }
    let mut d_pose = [T::zero(); 6];
    for (k, slot) in d_pose.iter_mut().take(3).enumerate() {
        let dr = rotation(pose, Some(k));
        let mut acc = T::zero();
        for a in 0..3 {
            for b in 0..3 {
                acc += d_rot[a][b] * dr[a][b];
            }
        }
        *slot = acc;
    }
    d_pose[3] = d_t[0];
    d_pose[4] = d_t[1];
    d_pose[5] = d_t[2];

    // Shading.
    let normals = compute_normals(depth);
    let l = light.direction();
    let mut d_albedo = Map::filled(albedo.channels, h, w, T::zero());
    let mut d_light = [T::zero(); 4];
    let mut d_l = [T::zero(); 3];
    let mut d_normals = vec![T::zero(); 3 * npx];
    for p in 0..npx {
        let n = [normals.data[p], normals.data[npx + p], normals.data[2 * npx + p]];
        let ndl = n[0] * l[0] + n[1] * l[1] + n[2] * l[2];
        let lit = ndl > T::zero();
        let s = light.ka + if lit { light.kd * ndl } else { T::zero() };
        let mut ds = T::zero();
        for c in 0..albedo.channels {
            let g = d_colors[c * npx + p];
            d_albedo.data[c * npx + p] = g * s;
            ds += g * albedo.data[c * npx + p];
        }
        d_light[0] += ds;
        if lit {
            d_light[1] += ds * ndl;
            let dndl = ds * light.kd;
            for a in 0..3 {
                d_normals[a * npx + p] = dndl * l[a];
                d_l[a] += dndl * n[a];
            }
        }
    }
    // L = v / |v| with v = (lx, ly, 1).
    let vnorm = (light.lx * light.lx + light.ly * light.ly + T::one()).sqrt();
    let ldot = d_l[0] * l[0] + d_l[1] * l[1] + d_l[2] * l[2];
    d_light[2] = (d_l[0] - l[0] * ldot) / vnorm;
    d_light[3] = (d_l[1] - l[1] * ldot) / vnorm;

    // Normals from slopes: n = m / |m|, m = (-gx, -gy, 1).
    let mut d_gx = vec![T::zero(); npx];
    let mut d_gy = vec![T::zero(); npx];
    for p in 0..npx {
        let dn = [d_normals[p], d_normals[npx + p], d_normals[2 * npx + p]];
        if dn[0] == T::zero() && dn[1] == T::zero() && dn[2] == T::zero() {
            continue;
        }
        let n = [normals.data[p], normals.data[npx + p], normals.data[2 * npx + p]];
        let inv_len = n[2];
        let dot = dn[0] * n[0] + dn[1] * n[1] + dn[2] * n[2];
        let dm0 = (dn[0] - n[0] * dot) * inv_len;
        let dm1 = (dn[1] - n[1] * dot) * inv_len;
        d_gx[p] = -dm0;
        d_gy[p] = -dm1;
    }
    slopes_backward(h, w, &d_gx, &d_gy, &mut d_depth);

    RenderGrads {
        albedo: d_albedo,
        depth: Map::new(1, h, w, d_depth),
        pose: d_pose,
        light: d_light,
    }
}

fn slopes_backward<T: Real>(h: usize, w: usize, d_gx: &[T], d_gy: &[T], d_z: &mut [T]) {
    let dx = T::lit(2.0 / (w.max(2) - 1) as f64);
    let dy = T::lit(2.0 / (h.max(2) - 1) as f64);
    let two = T::lit(2.0);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let g = d_gx[p];
            if w > 1 && g != T::zero() {
                if j == 0 {
                    d_z[p + 1] += g / dx;
                    d_z[p] -= g / dx;
                } else if j == w - 1 {
                    d_z[p] += g / dx;
                    d_z[p - 1] -= g / dx;
                } else {
                    d_z[p + 1] += g / (two * dx);
                    d_z[p - 1] -= g / (two * dx);
                }
            }
            let g = d_gy[p];
            if h > 1 && g != T::zero() {
                if i == 0 {
                    d_z[p + w] += g / dy;
                    d_z[p] -= g / dy;
                } else if i == h - 1 {
                    d_z[p] += g / dy;
                    d_z[p - w] -= g / dy;
                } else {
                    d_z[p + w] += g / (two * dy);
                    d_z[p - w] -= g / (two * dy);
                }
            }
        }
    }
}
