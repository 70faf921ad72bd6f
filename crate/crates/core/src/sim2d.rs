//! Deterministic planar stand-in for the robot: a 2-joint arm, tools made of
//! one small disc per tool-image pixel, quasi-static pushing of a disk, and
//! rasterization to task and tool images.
//!
//! World frame: the arm base sits on the crop's vertical symmetry axis, `+y`
//! points away from the base and `+x` to the right. Joint angles are measured
//! from `+y` towards `+x`, so the zero pose is a straight arm along `+y`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{BinaryImage, SIZE};

pub const N_JOINTS: usize = 2;

/// Tolerance for joint-limit checks on interpolated angles.
const LIMIT_EPS: f64 = 1e-12;
/// Largest penetration tolerated at the end of a substep.
pub const PENETRATION_TOL: f64 = 1e-10;
/// Contact resolution passes allowed per substep.
pub const MAX_RESOLVE_ITERS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmConfig {
    pub link_lengths: [f64; N_JOINTS],
    pub base_position: [f64; 2],
    pub joint_min: [f64; N_JOINTS],
    pub joint_max: [f64; N_JOINTS],
    /// rad/s; nominal only, motion is quasi-static.
    pub joint_rate: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        let lim = std::f64::consts::FRAC_PI_4;
        Self {
            link_lengths: [0.25, 0.25],
            base_position: [0.0, 0.0],
            joint_min: [-lim; N_JOINTS],
            joint_max: [lim; N_JOINTS],
            joint_rate: 0.5,
        }
    }
}

impl ArmConfig {
    pub fn validate(&self) -> Result<()> {
        for j in 0..N_JOINTS {
            if !(self.joint_min[j] < self.joint_max[j]) {
                return Err(Error::Config(format!("joint {j}: lower limit must be below upper limit")));
            }
            if !(self.link_lengths[j] > 0.0) {
                return Err(Error::Config(format!("link {j} must have positive length")));
            }
        }
        Ok(())
    }

    pub fn within_limits(&self, theta: &[f64]) -> bool {
        theta.len() == N_JOINTS
            && theta
                .iter()
                .enumerate()
                .all(|(j, &a)| a >= self.joint_min[j] - LIMIT_EPS && a <= self.joint_max[j] + LIMIT_EPS)
    }
}

/// Crop of the world rendered into task images, and the tool frame rendered
/// into tool images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    /// Side of the square task crop (m). The crop is centred on the base's x.
    pub crop_size: f64,
    /// Near edge of the crop along y (m).
    pub crop_y_min: f64,
    pub image_size: usize,
    /// Side of the square tool frame (m).
    pub tool_extent: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            crop_size: 0.9,
            crop_y_min: 0.0,
            image_size: SIZE,
            tool_extent: 0.30,
        }
    }
}

impl RenderSpec {
    /// Task-image pixel pitch (m).
    pub fn task_pixel(&self) -> f64 {
        self.crop_size / self.image_size as f64
    }

    /// Tool-image pixel pitch (m).
    pub fn tool_pixel(&self) -> f64 {
        self.tool_extent / self.image_size as f64
    }

    /// Tool-frame position `(lateral, forward)` of a tool pixel centre. The
    /// mount point `(0, 0)` is the bottom centre of the tool image.
    pub fn tool_pixel_position(&self, row: usize, col: usize) -> [f64; 2] {
        let n = self.image_size as f64;
        let p = self.tool_pixel();
        [(col as f64 + 0.5 - n / 2.0) * p, (n - row as f64 - 0.5) * p]
    }

    /// Tool pixel containing a tool-frame point, if inside the frame.
    pub fn tool_point_pixel(&self, a: f64, b: f64) -> Option<(usize, usize)> {
        let n = self.image_size as f64;
        let p = self.tool_pixel();
        let col = (a / p + n / 2.0).floor();
        let row = (n - b / p).floor().min(n - 1.0);
        (col >= 0.0 && col < n && row >= 0.0).then_some((row as usize, col as usize))
    }

    pub fn mount_pixel(&self) -> (usize, usize) {
        (self.image_size - 1, self.image_size / 2)
    }

    /// World position of a task pixel centre, given the base x coordinate.
    pub fn task_pixel_center(&self, base_x: f64, row: usize, col: usize) -> [f64; 2] {
        let n = self.image_size as f64;
        let p = self.task_pixel();
        [
            base_x + (col as f64 + 0.5 - n / 2.0) * p,
            self.crop_y_min + self.crop_size - (row as f64 + 0.5) * p,
        ]
    }

    /// Continuous task-image coordinates `(row, col)` of a world point.
    pub fn world_to_task(&self, base_x: f64, p: [f64; 2]) -> (f64, f64) {
        let n = self.image_size as f64;
        let px = self.task_pixel();
        let col = (p[0] - base_x) / px + n / 2.0 - 0.5;
        let row = (self.crop_y_min + self.crop_size - p[1]) / px - 0.5;
        (row, col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiskObject {
    pub center: [f64; 2],
    pub radius: f64,
}

impl DiskObject {
    pub fn mirrored(&self, base_x: f64) -> Self {
        Self {
            center: [2.0 * base_x - self.center[0], self.center[1]],
            radius: self.radius,
        }
    }
}

/// Start and end joint angles; execution interpolates linearly between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolTrajectory {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl ToolTrajectory {
    pub fn new(start: Vec<f64>, end: Vec<f64>) -> Self {
        Self { start, end }
    }

    pub fn n_joints(&self) -> usize {
        self.start.len()
    }

    /// `(θ_start, θ_end)` stacked.
    pub fn to_vec(&self) -> Vec<f64> {
        self.start.iter().chain(&self.end).copied().collect()
    }

    pub fn from_slice(u: &[f64]) -> Self {
        let n = u.len() / 2;
        Self {
            start: u[..n].to_vec(),
            end: u[n..].to_vec(),
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            start: self.start.iter().map(|v| -v).collect(),
            end: self.end.iter().map(|v| -v).collect(),
        }
    }

    pub fn l1_span(&self) -> f64 {
        self.start.iter().zip(&self.end).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn at(&self, frac: f64) -> Vec<f64> {
        self.start
            .iter()
            .zip(&self.end)
            .map(|(a, b)| a + (b - a) * frac)
            .collect()
    }

    /// Joint angles at substep `k` of `substeps`.
    pub fn at_step(&self, k: usize, substeps: usize) -> Vec<f64> {
        self.start
            .iter()
            .zip(&self.end)
            .map(|(a, b)| a + (b - a) * k as f64 / (substeps - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipPose {
    pub position: [f64; 2],
    pub orientation: f64,
}

/// Tool as a set of collider discs in the tool frame, one per white pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolGeometry {
    pub colliders: Vec<[f64; 2]>,
    pub radius: f64,
    pub source_image: BinaryImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub arm: ArmConfig,
    pub render: RenderSpec,
    pub disk_radius: f64,
    /// Radius of each tool collider disc (m); the 3 mm wire's radius.
    pub collider_radius: f64,
    pub substeps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            arm: ArmConfig::default(),
            render: RenderSpec::default(),
            disk_radius: 0.07,
            collider_radius: 1.5e-3,
            substeps: 200,
        }
    }
}

/// Random wire-tool generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolGenConfig {
    pub arc_length: f64,
    pub min_control_points: usize,
    pub max_control_points: usize,
    pub max_attempts: usize,
}

impl Default for ToolGenConfig {
    fn default() -> Self {
        Self {
            arc_length: 0.25,
            min_control_points: 4,
            max_control_points: 6,
            max_attempts: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulator {
    pub config: SimConfig,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.arm.validate()?;
        if config.substeps < 2 {
            return Err(Error::Config("substeps must be at least 2".into()));
        }
        if !(config.disk_radius > 0.0) || !(config.collider_radius >= 0.0) {
            return Err(Error::Config("radii must be positive".into()));
        }
        Ok(Self { config })
    }

    pub fn arm(&self) -> &ArmConfig {
        &self.config.arm
    }

    pub fn render_spec(&self) -> &RenderSpec {
        &self.config.render
    }

    pub fn base_x(&self) -> f64 {
        self.config.arm.base_position[0]
    }

    pub fn forward_kinematics(&self, theta: &[f64]) -> Result<TipPose> {
        forward_kinematics(theta, &self.config.arm)
    }

    pub fn tool_geometry(&self, image: &BinaryImage) -> ToolGeometry {
        let spec = &self.config.render;
        ToolGeometry {
            colliders: image
                .white_pixels()
                .map(|(r, c)| spec.tool_pixel_position(r, c))
                .collect(),
            radius: self.config.collider_radius,
            source_image: image.clone(),
        }
    }

    /// Tool images are the native representation, so this is the stored image.
    pub fn render_tool(&self, tool: &ToolGeometry) -> BinaryImage {
        tool.source_image.clone()
    }

    pub fn disk(&self, center: [f64; 2]) -> DiskObject {
        DiskObject {
            center,
            radius: self.config.disk_radius,
        }
    }

    /// World positions of every collider with the arm at `theta`.
    pub fn colliders_at(&self, tool: &ToolGeometry, theta: &[f64]) -> Result<Vec<[f64; 2]>> {
        let pose = self.forward_kinematics(theta)?;
        Ok(place_colliders(tool, pose))
    }

    /// Executes `u` quasi-statically; returns the disk after every substep.
    pub fn simulate(
        &self,
        object0: DiskObject,
        tool: &ToolGeometry,
        u: &ToolTrajectory,
        substeps: usize,
    ) -> Result<Vec<DiskObject>> {
        if substeps < 2 {
            return Err(Error::Config("substeps must be at least 2".into()));
        }
        let arm = &self.config.arm;
        if !arm.within_limits(&u.start) || !arm.within_limits(&u.end) {
            return Err(Error::JointLimit { angles: u.to_vec() });
        }
        let mut disk = object0;
        let mut states = Vec::with_capacity(substeps);
        for k in 0..substeps {
            let theta = u.at_step(k, substeps);
            let world = self.colliders_at(tool, &theta)?;
            disk.center = resolve_contacts(disk, &world, tool.radius).ok_or(Error::Unresolved { substep: k })?;
            states.push(disk);
        }
        Ok(states)
    }

    /// True when the disk overlaps no collider with the arm at `theta`.
    pub fn is_collision_free(&self, object: &DiskObject, tool: &ToolGeometry, theta: &[f64]) -> Result<bool> {
        let world = self.colliders_at(tool, theta)?;
        let reach = tool.radius + object.radius;
        Ok(world.iter().all(|c| dist2(*c, object.center) >= reach * reach))
    }

    /// Pixels whose centres lie strictly inside the disk (and inside the crop).
    pub fn render_task(&self, object: &DiskObject) -> BinaryImage {
        let spec = &self.config.render;
        let n = spec.image_size;
        let mut img = BinaryImage::new(n, n);
        let base_x = self.base_x();
        let (rc, cc) = spec.world_to_task(base_x, object.center);
        let rpx = object.radius / spec.task_pixel() + 1.0;
        let r0 = (rc - rpx).floor().max(0.0) as usize;
        let c0 = (cc - rpx).floor().max(0.0) as usize;
        let r1 = ((rc + rpx).ceil().max(-1.0) + 1.0).min(n as f64) as usize;
        let c1 = ((cc + rpx).ceil().max(-1.0) + 1.0).min(n as f64) as usize;
        let r2 = object.radius * object.radius;
        for r in r0..r1 {
            for c in c0..c1 {
                if dist2(spec.task_pixel_center(base_x, r, c), object.center) < r2 {
                    img.set(r, c, true);
                }
            }
        }
        img
    }

    /// Task-frame image of the tool swept along `u`, sampled at `frames` poses.
    pub fn render_tool_sweep(&self, tool: &ToolGeometry, u: &ToolTrajectory, frames: usize) -> Result<BinaryImage> {
        let spec = &self.config.render;
        let n = spec.image_size;
        let mut img = BinaryImage::new(n, n);
        let frames = frames.max(2);
        for k in 0..frames {
            for p in self.colliders_at(tool, &u.at_step(k, frames))? {
                let (r, c) = spec.world_to_task(self.base_x(), p);
                let (r, c) = (r.round(), c.round());
                if r >= 0.0 && c >= 0.0 && (r as usize) < n && (c as usize) < n {
                    img.set(r as usize, c as usize, true);
                }
            }
        }
        Ok(img)
    }
}

#[inline]
fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Serial 2-link planar forward kinematics; orientation is θ1 + θ2.
pub fn forward_kinematics(theta: &[f64], arm: &ArmConfig) -> Result<TipPose> {
    if !arm.within_limits(theta) {
        return Err(Error::JointLimit { angles: theta.to_vec() });
    }
    let [l1, l2] = arm.link_lengths;
    let a1 = theta[0];
    let a12 = theta[0] + theta[1];
    Ok(TipPose {
        position: [
            arm.base_position[0] + l1 * a1.sin() + l2 * a12.sin(),
            arm.base_position[1] + l1 * a1.cos() + l2 * a12.cos(),
        ],
        orientation: a12,
    })
}

/// Tool-frame `(lateral, forward)` to world, with the mount at the tip.
pub fn place_colliders(tool: &ToolGeometry, pose: TipPose) -> Vec<[f64; 2]> {
    let (s, c) = pose.orientation.sin_cos();
    let [tx, ty] = pose.position;
    tool.colliders
        .iter()
        .map(|&[a, b]| [tx + b * s + a * c, ty + b * c - a * s])
        .collect()
}

/// Pushes the disk out of the deepest penetrating collider until it is
/// penetration-free. Returns `None` when [`MAX_RESOLVE_ITERS`] passes do not
/// suffice.
fn resolve_contacts(disk: DiskObject, colliders: &[[f64; 2]], collider_radius: f64) -> Option<[f64; 2]> {
    let reach = collider_radius + disk.radius;
    let mut center = disk.center;
    for _ in 0..=MAX_RESOLVE_ITERS {
        let mut deepest: Option<(usize, f64, f64)> = None;
        for (i, c) in colliders.iter().enumerate() {
            let d2 = dist2(*c, center);
            if d2 >= reach * reach {
                continue;
            }
            let d = d2.sqrt();
            let depth = reach - d;
            if depth > PENETRATION_TOL && deepest.is_none_or(|(_, best, _)| depth > best) {
                deepest = Some((i, depth, d));
            }
        }
        let Some((i, _, d)) = deepest else {
            return Some(center);
        };
        let c = colliders[i];
        let dir = if d > 1e-15 {
            [(center[0] - c[0]) / d, (center[1] - c[1]) / d]
        } else {
            [0.0, 1.0]
        };
        center = [c[0] + dir[0] * reach, c[1] + dir[1] * reach];
    }
    None
}

/// Uniform clamped cubic B-spline evaluated at parameter `t ∈ [0, 1]`.
fn bspline_point(ctrl: &[[f64; 2]], t: f64) -> [f64; 2] {
    let degree = 3usize;
    let n = ctrl.len();
    let segments = n - degree;
    // knots: 0,0,0,0,1,...,segments-1,segments,segments,segments,segments
    let knot = |i: usize| -> f64 {
        if i <= degree {
            0.0
        } else if i >= n {
            segments as f64
        } else {
            (i - degree) as f64
        }
    };
    let x = t.clamp(0.0, 1.0) * segments as f64;
    let mut span = (x.floor() as usize).min(segments - 1) + degree;
    span = span.min(n - 1);
    let mut d: Vec<[f64; 2]> = (0..=degree).map(|j| ctrl[span - degree + j]).collect();
    for r in 1..=degree {
        for j in (r..=degree).rev() {
            let i = span - degree + j;
            let denom = knot(i + degree + 1 - r) - knot(i);
            let alpha = if denom.abs() < 1e-15 { 0.0 } else { (x - knot(i)) / denom };
            d[j] = [
                (1.0 - alpha) * d[j - 1][0] + alpha * d[j][0],
                (1.0 - alpha) * d[j - 1][1] + alpha * d[j][1],
            ];
        }
    }
    d[degree]
}

fn adjacent8(a: (usize, usize), b: (usize, usize)) -> bool {
    a != b && a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1
}

/// Integer line between two pixels, endpoints included.
pub fn bresenham(a: (usize, usize), b: (usize, usize)) -> Vec<(usize, usize)> {
    let (mut r, mut c) = (a.0 as i64, a.1 as i64);
    let (r1, c1) = (b.0 as i64, b.1 as i64);
    let (dr, dc) = ((r1 - r).abs(), -(c1 - c).abs());
    let (sr, sc) = (if r < r1 { 1 } else { -1 }, if c < c1 { 1 } else { -1 });
    let mut err = dr + dc;
    let mut out = vec![(r as usize, c as usize)];
    while (r, c) != (r1, c1) {
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
        out.push((r as usize, c as usize));
    }
    out
}

/// Removes redundant pixels so consecutive chain members are 8-adjacent and
/// no member could be skipped.
fn thin_chain(chain: &mut Vec<(usize, usize)>) {
    loop {
        let mut changed = false;
        let mut i = 1;
        while i + 1 < chain.len() {
            if chain[i - 1] == chain[i + 1] {
                chain.drain(i..i + 2);
                changed = true;
            } else if adjacent8(chain[i - 1], chain[i + 1]) {
                chain.remove(i);
                changed = true;
            } else {
                i += 1;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Stroke length in pixels: 1 per axial step, √2 per diagonal step.
fn chain_length(chain: &[(usize, usize)]) -> f64 {
    chain
        .windows(2)
        .map(|w| if w[0].0 != w[1].0 && w[0].1 != w[1].1 { std::f64::consts::SQRT_2 } else { 1.0 })
        .sum()
}

/// Pixel chain of a tool-frame polyline, or `None` if it leaves the frame or
/// touches itself.
fn rasterize_stroke(points: &[[f64; 2]], spec: &RenderSpec) -> Option<Vec<(usize, usize)>> {
    let mut chain: Vec<(usize, usize)> = Vec::new();
    for p in points {
        let px = spec.tool_point_pixel(p[0], p[1])?;
        match chain.last() {
            Some(&last) if last == px => {}
            Some(&last) if !adjacent8(last, px) => chain.extend(bresenham(last, px).into_iter().skip(1)),
            _ => chain.push(px),
        }
    }
    thin_chain(&mut chain);
    for i in 0..chain.len() {
        for j in i + 2..chain.len() {
            if chain[i] == chain[j] || adjacent8(chain[i], chain[j]) {
                return None;
            }
        }
    }
    Some(chain)
}

/// Random one-stroke wire tool: a clamped cubic B-spline through 4–6 random
/// control points starting at the mount, scaled to the configured arc length
/// and rasterized as an 8-connected chain containing the mount pixel.
pub fn generate_random_tool<R: Rng + ?Sized>(rng: &mut R, spec: &RenderSpec, cfg: &ToolGenConfig) -> BinaryImage {
    let n = spec.image_size;
    let half = spec.tool_extent / 2.0;
    for _ in 0..cfg.max_attempts {
        let count = rng.random_range(cfg.min_control_points..=cfg.max_control_points);
        let mut ctrl = vec![[0.0, 0.0]];
        for _ in 1..count {
            ctrl.push([
                rng.random_range(-half..half),
                rng.random_range(0.0..spec.tool_extent),
            ]);
        }
        let samples = 4000;
        let pts: Vec<[f64; 2]> = (0..=samples).map(|i| bspline_point(&ctrl, i as f64 / samples as f64)).collect();
        let length: f64 = pts.windows(2).map(|w| dist2(w[0], w[1]).sqrt()).sum();
        if length < 1e-6 {
            continue;
        }
        // Rasterization shortcuts sub-pixel wiggles, so the scale is refined
        // until the pixel stroke itself has the target length.
        let target_px = cfg.arc_length / spec.tool_pixel();
        let mut scale = cfg.arc_length / length;
        let mut accepted = None;
        for _ in 0..6 {
            let scaled: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] * scale, p[1] * scale]).collect();
            let Some(chain) = rasterize_stroke(&scaled, spec) else { break };
            let len = chain_length(&chain);
            if (len - target_px).abs() <= 0.04 * target_px {
                accepted = Some(chain);
                break;
            }
            scale *= target_px / len.max(1.0);
        }
        let Some(chain) = accepted else { continue };
        if chain.first() != Some(&spec.mount_pixel()) {
            continue;
        }
        let mut img = BinaryImage::new(n, n);
        for (r, c) in chain {
            img.set(r, c, true);
        }
        return img;
    }
    straight_tool(spec, cfg.arc_length)
}

/// Straight wire from the mount along the tool's forward axis.
pub fn straight_tool(spec: &RenderSpec, length: f64) -> BinaryImage {
    let n = spec.image_size;
    let mut img = BinaryImage::new(n, n);
    let (mr, mc) = spec.mount_pixel();
    let len_px = ((length / spec.tool_pixel()).round() as usize).clamp(1, n);
    for k in 0..len_px {
        img.set(mr - k, mc, true);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::mirror;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_4;

    fn sim() -> Simulator {
        Simulator::new(SimConfig::default()).unwrap()
    }

    #[test]
    fn fk_examples() {
        let arm = ArmConfig::default();
        let p = forward_kinematics(&[0.0, 0.0], &arm).unwrap();
        assert_eq!(p.position, [0.0, 0.5]);
        assert_eq!(p.orientation, 0.0);
        let p = forward_kinematics(&[FRAC_PI_4, -FRAC_PI_4], &arm).unwrap();
        assert!((p.position[0] - 0.17678).abs() < 1e-5);
        assert!((p.position[1] - 0.42678).abs() < 1e-5);
        assert!(p.orientation.abs() < 1e-15);
        assert!(matches!(forward_kinematics(&[1.0, 0.0], &arm), Err(Error::JointLimit { .. })));
    }

    #[test]
    fn fk_is_mirror_symmetric() {
        let arm = ArmConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let th = [rng.random_range(-FRAC_PI_4..FRAC_PI_4), rng.random_range(-FRAC_PI_4..FRAC_PI_4)];
            let a = forward_kinematics(&th, &arm).unwrap();
            let b = forward_kinematics(&[-th[0], -th[1]], &arm).unwrap();
            assert_eq!(a.position[0], -b.position[0]);
            assert_eq!(a.position[1], b.position[1]);
        }
    }

    #[test]
    fn render_task_examples() {
        let s = sim();
        assert_eq!(s.render_task(&s.disk([5.0, 5.0])).white_count(), 0);
        let spec = s.render_spec();
        let disk = DiskObject {
            center: [0.0, spec.crop_y_min + spec.crop_size / 2.0],
            radius: 5.0 * spec.task_pixel(),
        };
        let count = s.render_task(&disk).white_count() as f64;
        let area = std::f64::consts::PI * 25.0;
        assert!((count - area).abs() <= 0.15 * area, "{count}");
        let off = DiskObject {
            center: [0.123, 0.456],
            radius: 0.05,
        };
        assert_eq!(s.render_task(&off.mirrored(0.0)), mirror(&s.render_task(&off)));
    }

    #[test]
    fn tool_geometry_is_one_collider_per_pixel() {
        let s = sim();
        let empty = BinaryImage::new(64, 64);
        assert!(s.tool_geometry(&empty).colliders.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = generate_random_tool(&mut rng, s.render_spec(), &ToolGenConfig::default());
        let g = s.tool_geometry(&t);
        assert_eq!(g.colliders.len(), t.white_count());
        assert_eq!(s.render_tool(&g), t);
    }

    #[test]
    fn random_tools_are_connected_strokes_from_the_mount() {
        let spec = RenderSpec::default();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = generate_random_tool(&mut rng, &spec, &ToolGenConfig::default());
            let (mr, mc) = spec.mount_pixel();
            assert!(t.get(mr, mc));
            // flood fill over 8-neighbours from the mount reaches every white pixel
            let mut seen = vec![false; t.len()];
            let mut stack = vec![(mr, mc)];
            seen[mr * 64 + mc] = true;
            let mut count = 0;
            while let Some((r, c)) = stack.pop() {
                count += 1;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if (0..64).contains(&nr) && (0..64).contains(&nc) {
                            let i = (nr * 64 + nc) as usize;
                            if t.is_white_at(i) && !seen[i] {
                                seen[i] = true;
                                stack.push((nr as usize, nc as usize));
                            }
                        }
                    }
                }
            }
            assert_eq!(count, t.white_count());
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(generate_random_tool(&mut rng2, &spec, &ToolGenConfig::default()), t);
        }
    }

    /// Length of the stroke walked pixel-to-pixel from the mount (1 or √2 per step).
    fn stroke_length_px(t: &BinaryImage, start: (usize, usize)) -> f64 {
        let mut seen = vec![false; t.len()];
        let (mut cur, mut len) = (start, 0.0);
        seen[cur.0 * t.width() + cur.1] = true;
        loop {
            let mut next = None;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (r, c) = (cur.0 as i64 + dr, cur.1 as i64 + dc);
                    if (dr, dc) == (0, 0) || r < 0 || c < 0 || r >= 64 || c >= 64 {
                        continue;
                    }
                    let i = (r * 64 + c) as usize;
                    if t.is_white_at(i) && !seen[i] && next.is_none() {
                        next = Some(((r as usize, c as usize), if dr != 0 && dc != 0 { 2f64.sqrt() } else { 1.0 }));
                    }
                }
            }
            let Some((p, step)) = next else { return len };
            seen[p.0 * 64 + p.1] = true;
            len += step;
            cur = p;
        }
    }

    #[test]
    fn random_tool_stroke_length_matches_target() {
        let spec = RenderSpec::default();
        let cfg = ToolGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let target = cfg.arc_length / spec.tool_pixel();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let t = generate_random_tool(&mut rng, &spec, &cfg);
            let len = stroke_length_px(&t, spec.mount_pixel());
            // the walk covers every pixel: the stroke is a simple chain
            worst = worst.max((len - target).abs() / target);
        }
        assert!(worst <= 0.10, "worst relative arc-length error {worst}");
    }

    #[test]
    fn doubling_substeps_barely_moves_the_result() {
        let s = sim();
        let spec = s.render_spec().clone();
        let px = spec.task_pixel();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut cases = 0;
        while cases < 20 {
            let tool = s.tool_geometry(&generate_random_tool(&mut rng, &spec, &ToolGenConfig::default()));
            let u = ToolTrajectory::new(
                vec![rng.random_range(-FRAC_PI_4..FRAC_PI_4), rng.random_range(-FRAC_PI_4..FRAC_PI_4)],
                vec![rng.random_range(-FRAC_PI_4..FRAC_PI_4), rng.random_range(-FRAC_PI_4..FRAC_PI_4)],
            );
            let disk = s.disk([rng.random_range(-0.35..0.35), rng.random_range(0.3..0.85)]);
            if !s.is_collision_free(&disk, &tool, &u.start).unwrap() {
                continue;
            }
            let a = *s.simulate(disk, &tool, &u, 200).unwrap().last().unwrap();
            if a.center == disk.center {
                continue;
            }
            let b = *s.simulate(disk, &tool, &u, 400).unwrap().last().unwrap();
            assert!(dist2(a.center, b.center).sqrt() < px, "case {cases}");
            cases += 1;
        }
    }

    #[test]
    fn no_contact_leaves_disk_in_place() {
        let s = sim();
        let tool = s.tool_geometry(&straight_tool(s.render_spec(), 0.25));
        let disk = s.disk([0.4, 0.1]);
        let u = ToolTrajectory::new(vec![0.0, 0.0], vec![-0.3, 0.2]);
        let states = s.simulate(disk, &tool, &u, 50).unwrap();
        assert_eq!(states.len(), 50);
        assert_eq!(states.last().unwrap().center, disk.center);
    }

    #[test]
    fn sweeping_tool_never_leaves_penetration() {
        let s = sim();
        let tool = s.tool_geometry(&straight_tool(s.render_spec(), 0.25));
        // straight tool pointing along +y at zero pose spans y in [0.5, 0.75]
        let disk = s.disk([0.2, 0.62]);
        let u = ToolTrajectory::new(vec![-FRAC_PI_4, 0.0], vec![FRAC_PI_4, 0.0]);
        let states = s.simulate(disk, &tool, &u, 200).unwrap();
        assert_ne!(states.last().unwrap().center, disk.center);
        for (k, st) in states.iter().enumerate() {
            let world = s.colliders_at(&tool, &u.at_step(k, 200)).unwrap();
            for c in world {
                assert!(dist2(c, st.center).sqrt() >= tool.radius + st.radius - 1e-9);
            }
        }
    }

    #[test]
    fn simulate_rejects_out_of_limit_trajectories() {
        let s = sim();
        let tool = s.tool_geometry(&straight_tool(s.render_spec(), 0.25));
        let u = ToolTrajectory::new(vec![0.0, 0.0], vec![1.0, 0.0]);
        assert!(matches!(s.simulate(s.disk([0.3, 0.3]), &tool, &u, 10), Err(Error::JointLimit { .. })));
        assert!(s.simulate(s.disk([0.3, 0.3]), &tool, &ToolTrajectory::new(vec![0.0; 2], vec![0.0; 2]), 1).is_err());
    }

    #[test]
    fn simulate_is_mirror_equivariant() {
        let s = sim();
        let spec = s.render_spec().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut moved = 0;
        for _ in 0..20 {
            let img = generate_random_tool(&mut rng, &spec, &ToolGenConfig::default());
            let tool = s.tool_geometry(&img);
            let mtool = s.tool_geometry(&mirror(&img));
            let u = ToolTrajectory::new(
                vec![rng.random_range(-FRAC_PI_4..FRAC_PI_4), rng.random_range(-FRAC_PI_4..FRAC_PI_4)],
                vec![rng.random_range(-FRAC_PI_4..FRAC_PI_4), rng.random_range(-FRAC_PI_4..FRAC_PI_4)],
            );
            let disk = s.disk([rng.random_range(-0.3..0.3), rng.random_range(0.4..0.8)]);
            if !s.is_collision_free(&disk, &tool, &u.start).unwrap() {
                continue;
            }
            let a = s.simulate(disk, &tool, &u, 200).unwrap();
            let b = s.simulate(disk.mirrored(0.0), &mtool, &u.negated(), 200).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x.center[0] + y.center[0]).abs() <= 1e-9);
                assert!((x.center[1] - y.center[1]).abs() <= 1e-9);
            }
            if a.last().unwrap().center != disk.center {
                moved += 1;
            }
            assert_eq!(
                s.render_task(b.last().unwrap()),
                mirror(&s.render_task(a.last().unwrap()))
            );
        }
        assert!(moved > 0);
    }
}
